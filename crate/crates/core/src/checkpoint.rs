//! Checkpoint serialization: a plain-text header (model configuration,
//! layer list, seed, epoch) followed by per-tensor binary blocks.
//!
//! Each block: u32 name length + name bytes, u32 rows, u32 cols, u8 flag
//! (0 = dense, 1 = sparse), then row-major float64 values (dense) or the
//! CSR encoding (u32 nnz, rows+1 u32 row offsets, nnz u32 column indices,
//! nnz float64 values). All integers and floats little-endian.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{ModelConfig, ParameterSet};
use crate::sparse::{densify, sparsify, SparseMatrix};

const HEADER_MAGIC: &str = "SGNNCKPT1";
const HEADER_END: &str = "END_HEADER";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub epoch: usize,
    pub params: ParameterSet,
}

pub fn save(path: &Path, run: &RunConfig, epoch: usize, params: &ParameterSet) -> Result<()> {
    let model = run.model_config()?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(HEADER_MAGIC.as_bytes());
    bytes.push(b'\n');
    bytes.extend_from_slice(run.serialize().as_bytes());
    let stack_names: Vec<String> = model.stack.iter().map(|s| s.name()).collect();
    bytes.extend_from_slice(format!("stack = {}\n", stack_names.join("|")).as_bytes());
    bytes.extend_from_slice(format!("epoch = {epoch}\n").as_bytes());
    bytes.extend_from_slice(HEADER_END.as_bytes());
    bytes.push(b'\n');

    params.visit(|info, m| {
        bytes.extend_from_slice(&(info.name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(info.name.as_bytes());
        bytes.extend_from_slice(&(m.rows as u32).to_le_bytes());
        bytes.extend_from_slice(&(m.cols as u32).to_le_bytes());
        match &m.mask {
            Some(_) => {
                bytes.push(1);
                let s = sparsify(m);
                bytes.extend_from_slice(&(s.nnz() as u32).to_le_bytes());
                for &off in &s.row_offsets {
                    bytes.extend_from_slice(&(off as u32).to_le_bytes());
                }
                for &c in &s.col_indices {
                    bytes.extend_from_slice(&(c as u32).to_le_bytes());
                }
                for &v in &s.values {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => {
                bytes.push(0);
                for &v in &m.data {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    });
    fs::write(path, bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos,
                cause: format!("truncated checkpoint while reading {what}"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let header_end = find_header_end(&bytes)?;
    let header = std::str::from_utf8(&bytes[..header_end.0]).map_err(|_| Error::Format {
        offset: 0,
        cause: "checkpoint header is not UTF-8".into(),
    })?;
    let mut lines = header.lines();
    if lines.next() != Some(HEADER_MAGIC) {
        return Err(Error::Format {
            offset: 0,
            cause: format!("bad checkpoint magic, expected {HEADER_MAGIC}"),
        });
    }
    let mut run = RunConfig::default();
    let mut epoch = 0usize;
    let mut stack_line: Option<String> = None;
    for line in lines {
        let line = line.trim();
        if line.is_empty() || line == HEADER_END {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Format {
            offset: 0,
            cause: format!("bad header line '{line}'"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "epoch" => {
                epoch = value.parse().map_err(|_| Error::Format {
                    offset: 0,
                    cause: format!("bad epoch '{value}'"),
                })?
            }
            "stack" => stack_line = Some(value.to_string()),
            _ => run.set(key, value).map_err(|e| Error::Format {
                offset: 0,
                cause: format!("header: {e}"),
            })?,
        }
    }
    let model: ModelConfig = run.model_config().map_err(|e| Error::Format {
        offset: 0,
        cause: format!("header does not describe a valid model: {e}"),
    })?;
    if let Some(s) = stack_line {
        let expect: Vec<String> = model.stack.iter().map(|l| l.name()).collect();
        if s != expect.join("|") {
            return Err(Error::Format {
                offset: 0,
                cause: "checkpoint layer list does not match its configuration".into(),
            });
        }
    }

    let mut params = ParameterSet::init(&model, 0);
    let mut r = Reader {
        bytes: &bytes,
        pos: header_end.1,
    };
    let mut failure: Option<Error> = None;
    params.visit_mut(|info, m| {
        if failure.is_some() {
            return;
        }
        if let Err(e) = read_tensor(&mut r, info.name.as_str(), m) {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            cause: "trailing bytes after final tensor block".into(),
        });
    }
    Ok(Checkpoint { run, epoch, params })
}

fn read_tensor(r: &mut Reader<'_>, expect_name: &str, m: &mut Matrix) -> Result<()> {
    let name_len = r.u32("tensor name length")?;
    if name_len > 1024 {
        return Err(Error::Format {
            offset: r.pos,
            cause: format!("implausible tensor name length {name_len}"),
        });
    }
    let name_bytes = r.take(name_len, "tensor name")?;
    let name = std::str::from_utf8(name_bytes).map_err(|_| Error::Format {
        offset: r.pos,
        cause: "tensor name is not UTF-8".into(),
    })?;
    if name != expect_name {
        return Err(Error::Format {
            offset: r.pos,
            cause: format!("tensor '{name}' where '{expect_name}' expected"),
        });
    }
    let rows = r.u32("rows")?;
    let cols = r.u32("cols")?;
    if rows != m.rows || cols != m.cols {
        return Err(Error::Format {
            offset: r.pos,
            cause: format!(
                "tensor '{name}' is {rows}x{cols}, model expects {}x{}",
                m.rows, m.cols
            ),
        });
    }
    match r.u8("storage flag")? {
        0 => {
            for k in 0..rows * cols {
                m.data[k] = r.f64("dense value")?;
            }
            m.mask = None;
        }
        1 => {
            let nnz = r.u32("nnz")?;
            if nnz > rows * cols {
                return Err(Error::Format {
                    offset: r.pos,
                    cause: format!("nnz {nnz} exceeds {rows}x{cols}"),
                });
            }
            let mut row_offsets = Vec::with_capacity(rows + 1);
            for _ in 0..=rows {
                row_offsets.push(r.u32("row offset")?);
            }
            if row_offsets[rows] != nnz || row_offsets.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::Format {
                    offset: r.pos,
                    cause: "inconsistent CSR row offsets".into(),
                });
            }
            let mut col_indices = Vec::with_capacity(nnz);
            for _ in 0..nnz {
                let c = r.u32("column index")?;
                if c >= cols {
                    return Err(Error::Format {
                        offset: r.pos,
                        cause: format!("column index {c} out of range"),
                    });
                }
                col_indices.push(c);
            }
            let mut values = Vec::with_capacity(nnz);
            for _ in 0..nnz {
                values.push(r.f64("sparse value")?);
            }
            let sparse = SparseMatrix {
                rows,
                cols,
                row_offsets,
                col_indices,
                values,
            };
            let dense = densify(&sparse);
            let mut mask = vec![false; rows * cols];
            for i in 0..rows {
                for k in sparse.row_offsets[i]..sparse.row_offsets[i + 1] {
                    mask[i * cols + sparse.col_indices[k]] = true;
                }
            }
            m.data = dense.data;
            m.mask = Some(mask);
        }
        other => {
            return Err(Error::Format {
                offset: r.pos,
                cause: format!("unknown storage flag {other}"),
            })
        }
    }
    Ok(())
}

fn find_header_end(bytes: &[u8]) -> Result<(usize, usize)> {
    let needle = format!("{HEADER_END}\n");
    let hay_limit = bytes.len().min(64 * 1024);
    let hay = &bytes[..hay_limit];
    for i in 0..hay.len().saturating_sub(needle.len() - 1) {
        if &hay[i..i + needle.len()] == needle.as_bytes() {
            return Ok((i, i + needle.len()));
        }
    }
    Err(Error::Format {
        offset: 0,
        cause: "checkpoint header terminator not found".into(),
    })
}
