//! Dataset ingestion, the "SGR1" on-disk sample format, stratified
//! splitting, and a seeded synthetic sparse-target generator.
//!
//! Sample format (little-endian): magic "SGR1", u32 height, u32 width,
//! u32 channels, u32 label, then height*width*channels IEEE-754 float32
//! values in (row, column, channel) order. A dataset is a directory with
//! a manifest: a `classes=<N>` header line followed by one sample
//! filename per line.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::ImageSample;

pub const MAGIC: &[u8; 4] = b"SGR1";
const HEADER_LEN: usize = 20;
/// Refuse dimension fields whose product would overflow sane storage.
const MAX_DIM: u32 = 1 << 16;

pub fn write_sample(sample: &ImageSample) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + sample.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(sample.height as u32).to_le_bytes());
    out.extend_from_slice(&(sample.width as u32).to_le_bytes());
    out.extend_from_slice(&(sample.channels as u32).to_le_bytes());
    out.extend_from_slice(&(sample.label as u32).to_le_bytes());
    for &v in &sample.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format {
            offset,
            cause: format!("truncated: need {end} bytes, have {}", bytes.len()),
        });
    }
    Ok(u32::from_le_bytes(bytes[offset..end].try_into().unwrap()))
}

pub fn read_sample(bytes: &[u8]) -> Result<ImageSample> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            cause: "bad magic, expected SGR1".into(),
        });
    }
    let height = read_u32(bytes, 4)?;
    let width = read_u32(bytes, 8)?;
    let channels = read_u32(bytes, 12)?;
    let label = read_u32(bytes, 16)?;
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::Format {
            offset: 4,
            cause: format!("zero dimension: {height}x{width}x{channels}"),
        });
    }
    if height > MAX_DIM || width > MAX_DIM || channels > MAX_DIM {
        return Err(Error::Format {
            offset: 4,
            cause: format!("dimension overflow: {height}x{width}x{channels}"),
        });
    }
    let count = height as usize * width as usize * channels as usize;
    let expect = HEADER_LEN + count * 4;
    if bytes.len() != expect {
        return Err(Error::Format {
            offset: HEADER_LEN.min(bytes.len()),
            cause: format!("payload length {} != expected {expect}", bytes.len()),
        });
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let off = HEADER_LEN + i * 4;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Format {
                offset: off,
                cause: "non-finite sample value".into(),
            });
        }
        data.push(v as f64);
    }
    ImageSample::new(
        height as usize,
        width as usize,
        channels as usize,
        data,
        label as usize,
    )
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub num_classes: usize,
    pub entries: Vec<String>,
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::InvalidInput(format!("cannot read manifest {}: {e}", path.display()))
    })?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let num_classes = header
        .strip_prefix("classes=")
        .and_then(|v| v.parse::<usize>().ok())
        .ok_or_else(|| {
            Error::InvalidInput(format!(
                "manifest {} must start with classes=<N>, got '{header}'",
                path.display()
            ))
        })?;
    let entries: Vec<String> = lines
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect();
    let mut seen = std::collections::HashSet::new();
    for e in &entries {
        if !seen.insert(e) {
            return Err(Error::InvalidInput(format!("duplicate manifest entry '{e}'")));
        }
    }
    Ok(DatasetManifest {
        root: path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf(),
        num_classes,
        entries,
    })
}

/// Load every sample referenced by a manifest. An empty manifest loads
/// an empty dataset (callers may warn).
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<ImageSample>)> {
    let manifest = read_manifest(manifest_path)?;
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for (line_no, name) in manifest.entries.iter().enumerate() {
        let path = manifest.root.join(name);
        let bytes = fs::read(&path).map_err(|e| {
            Error::InvalidInput(format!(
                "manifest line {}: cannot read {}: {e}",
                line_no + 2,
                path.display()
            ))
        })?;
        let sample = read_sample(&bytes).map_err(|e| {
            Error::InvalidInput(format!("manifest line {}: {name}: {e}", line_no + 2))
        })?;
        if sample.label >= manifest.num_classes {
            return Err(Error::InvalidLabel {
                label: sample.label,
                num_classes: manifest.num_classes,
            });
        }
        samples.push(sample);
    }
    Ok((manifest, samples))
}

/// Stratified seeded split; `fraction` of each class goes to train,
/// remainders (non-divisible classes) also go to train.
pub fn split(
    dataset: &[ImageSample],
    fraction: f64,
    num_classes: usize,
    seed: u64,
) -> (Vec<ImageSample>, Vec<ImageSample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..num_classes {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset[i].label == class)
            .collect();
        idx.shuffle(&mut rng);
        let n_test = ((idx.len() as f64 * (1.0 - fraction)).round() as usize).min(idx.len());
        let n_train = idx.len() - n_test;
        for &i in &idx[..n_train] {
            train.push(dataset[i].clone());
        }
        for &i in &idx[n_train..] {
            test.push(dataset[i].clone());
        }
    }
    (train, test)
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub side: usize,
    pub channels: usize,
    /// Background magnitudes are uniform in [0, background_scale).
    pub background_scale: f64,
    /// Target pixel intensities are uniform in this range.
    pub intensity: (f64, f64),
    /// Max translation jitter in pixels (each axis).
    pub jitter: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 10,
            samples_per_class: 375,
            side: 32,
            channels: 1,
            background_scale: 0.05,
            intensity: (0.5, 1.5),
            jitter: 4,
            seed: 0,
        }
    }
}

/// Edge length of the square stamp each class mask lives on.
const STAMP: usize = 16;

/// Parametric binary target masks on a 16x16 stamp. Jitter rotates
/// stamps by quarter turns, so classes are separated by rotation-stable
/// geometry (pixel mass, radial extent, topology) rather than
/// orientation. Every mask stays under 15% of a 32x32 image.
fn class_mask(class: usize) -> Vec<(usize, usize)> {
    let mut px = Vec::new();
    let mut put = |r: usize, c: usize| px.push((r, c));
    let center = (STAMP as f64 - 1.0) / 2.0;
    let radial = |r: usize, c: usize| {
        let (dr, dc) = (r as f64 - center, c as f64 - center);
        dr * dr + dc * dc
    };
    match class % 10 {
        // Small filled disk.
        0 => {
            for r in 0..STAMP {
                for c in 0..STAMP {
                    if radial(r, c) <= 9.0 {
                        put(r, c);
                    }
                }
            }
        }
        // Large filled disk.
        1 => {
            for r in 0..STAMP {
                for c in 0..STAMP {
                    if radial(r, c) <= 42.0 {
                        put(r, c);
                    }
                }
            }
        }
        // Annulus.
        2 => {
            for r in 0..STAMP {
                for c in 0..STAMP {
                    let d2 = radial(r, c);
                    if (30.25..=64.0).contains(&d2) {
                        put(r, c);
                    }
                }
            }
        }
        // Thick plus, arms spanning the stamp.
        3 => {
            for i in 0..STAMP {
                for j in 5..10 {
                    put(i, j);
                    put(j, i);
                }
            }
        }
        // Four corner blobs.
        4 => {
            for &(br, bc) in &[(0, 0), (0, 13), (13, 0), (13, 13)] {
                for r in 0..3 {
                    for c in 0..3 {
                        put(br + r, bc + c);
                    }
                }
            }
        }
        // Hollow frame, two pixels thick.
        5 => {
            for i in 0..STAMP {
                for t in 0..2 {
                    put(t, i);
                    put(STAMP - 1 - t, i);
                    put(i, t);
                    put(i, STAMP - 1 - t);
                }
            }
        }
        // Single wide bar.
        6 => {
            for r in 5..11 {
                for c in 0..STAMP {
                    put(r, c);
                }
            }
        }
        // Two bars hugging opposite edges.
        7 => {
            for c in 0..STAMP {
                for t in 0..3 {
                    put(t, c);
                    put(STAMP - 1 - t, c);
                }
            }
        }
        // Diagonal cross, two pixels wide.
        8 => {
            for i in 0..STAMP {
                put(i, i);
                put(i, STAMP - 1 - i);
                if i + 1 < STAMP {
                    put(i + 1, i);
                    put(i + 1, STAMP - 1 - i);
                }
            }
        }
        // Center dot plus four edge-midpoint dots.
        _ => {
            for &(br, bc) in &[(0, 6), (6, 0), (6, 13), (13, 6), (6, 6)] {
                for r in 0..3 {
                    for c in 0..3 {
                        put(br + r, bc + c);
                    }
                }
            }
        }
    }
    px.sort_unstable();
    px.dedup();
    px
}

fn rotate_stamp(px: &[(usize, usize)], quarter_turns: usize) -> Vec<(usize, usize)> {
    px.iter()
        .map(|&(r, c)| match quarter_turns % 4 {
            0 => (r, c),
            1 => (c, STAMP - 1 - r),
            2 => (STAMP - 1 - r, STAMP - 1 - c),
            _ => (STAMP - 1 - c, r),
        })
        .collect()
}

/// Generator self-check: every pair of class masks differs in at least 20
/// pixels under the best rotational alignment.
fn check_mask_separation(num_classes: usize) -> Result<()> {
    let masks: Vec<std::collections::HashSet<(usize, usize)>> = (0..num_classes.min(10))
        .map(|c| class_mask(c).into_iter().collect())
        .collect();
    for a in 0..masks.len() {
        for b in a + 1..masks.len() {
            let mut min_diff = usize::MAX;
            for rot in 0..4 {
                let rotated: std::collections::HashSet<_> =
                    rotate_stamp(&masks[b].iter().cloned().collect::<Vec<_>>(), rot)
                        .into_iter()
                        .collect();
                let diff = masks[a].symmetric_difference(&rotated).count();
                min_diff = min_diff.min(diff);
            }
            if min_diff < 20 {
                return Err(Error::Config(format!(
                    "class masks {a} and {b} differ in only {min_diff} pixels"
                )));
            }
        }
    }
    Ok(())
}

fn render_sample(spec: &SynthSpec, class: usize, rng: &mut ChaCha8Rng) -> Result<ImageSample> {
    let side = spec.side;
    let stamp = STAMP;
    if stamp > side {
        return Err(Error::Config(format!(
            "target stamp {stamp} larger than image side {side}"
        )));
    }
    let n = side * side * spec.channels;
    let mut data = vec![0.0f64; n];
    // Background magnitude is uniform; spread across channels so the
    // channel-vector norm stays below background_scale.
    let ch_scale = spec.background_scale / (spec.channels as f64).sqrt();
    for v in data.iter_mut() {
        *v = rng.gen_range(0.0..ch_scale);
    }
    let rot = rng.gen_range(0..4usize);
    let mask = rotate_stamp(&class_mask(class), rot);
    let center = (side - stamp) / 2;
    let jr = rng.gen_range(-(spec.jitter as isize)..=spec.jitter as isize);
    let jc = rng.gen_range(-(spec.jitter as isize)..=spec.jitter as isize);
    for &(r, c) in &mask {
        let rr = r as isize + center as isize + jr;
        let cc = c as isize + center as isize + jc;
        if rr < 0 || cc < 0 || rr as usize >= side || cc as usize >= side {
            continue;
        }
        let base = (rr as usize * side + cc as usize) * spec.channels;
        let mag = rng.gen_range(spec.intensity.0..spec.intensity.1);
        let per_ch = mag / (spec.channels as f64).sqrt();
        for k in 0..spec.channels {
            data[base + k] = per_ch;
        }
    }
    ImageSample::new(side, side, spec.channels, data, class)
}

/// Generate a deterministic synthetic dataset on disk under `out_dir`,
/// with stratified 80/20 train/test manifests. Returns the manifest
/// paths.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    check_mask_separation(spec.num_classes)?;
    let target_px = class_mask(0).len();
    if target_px * 100 >= spec.side * spec.side * 15 {
        return Err(Error::Config(format!(
            "target occupies {target_px} of {} pixels; sparsity bound violated",
            spec.side * spec.side
        )));
    }
    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut all = Vec::new();
    for class in 0..spec.num_classes {
        for i in 0..spec.samples_per_class {
            let sample = render_sample(spec, class, &mut rng)?;
            let name = format!("c{class:02}_s{i:04}.sgr");
            fs::write(out_dir.join(&name), write_sample(&sample))?;
            all.push((name, class));
        }
    }
    // Stratified 80/20 split by seeded shuffle of filenames.
    let mut split_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let mut train_names = Vec::new();
    let mut test_names = Vec::new();
    for class in 0..spec.num_classes {
        let mut names: Vec<&String> = all
            .iter()
            .filter(|(_, c)| *c == class)
            .map(|(n, _)| n)
            .collect();
        names.shuffle(&mut split_rng);
        let n_test = names.len() / 5;
        let n_train = names.len() - n_test;
        train_names.extend(names[..n_train].iter().map(|s| s.to_string()));
        test_names.extend(names[n_train..].iter().map(|s| s.to_string()));
    }
    let write_manifest = |file: &str, names: &[String]| -> Result<PathBuf> {
        let path = out_dir.join(file);
        let mut text = format!("classes={}\n", spec.num_classes);
        for n in names {
            text.push_str(n);
            text.push('\n');
        }
        fs::write(&path, text)?;
        Ok(path)
    };
    let train = write_manifest("train.manifest", &train_names)?;
    let test = write_manifest("test.manifest", &test_names)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_sample_round_trips() {
        let s = ImageSample::new(1, 1, 1, vec![0.5], 3).unwrap();
        let bytes = write_sample(&s);
        assert_eq!(bytes.len(), 24);
        let back = read_sample(&bytes).unwrap();
        assert_eq!(back.label, 3);
        assert_eq!(back.data, vec![0.5]);
    }

    #[test]
    fn wrong_magic_errors_at_offset_zero() {
        let mut bytes = write_sample(&ImageSample::new(1, 1, 1, vec![0.5], 0).unwrap());
        bytes[..4].copy_from_slice(b"XXXX");
        match read_sample(&bytes).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncation_always_yields_structured_error() {
        let bytes = write_sample(&ImageSample::new(2, 3, 2, vec![0.25; 12], 1).unwrap());
        for len in 0..bytes.len() {
            assert!(read_sample(&bytes[..len]).is_err(), "len {len} accepted");
        }
    }

    #[test]
    fn dimension_overflow_rejected() {
        let mut bytes = write_sample(&ImageSample::new(1, 1, 1, vec![0.5], 0).unwrap());
        bytes[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(read_sample(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn class_masks_are_separated() {
        check_mask_separation(10).unwrap();
    }

    #[test]
    fn class_masks_are_sparse() {
        for c in 0..10 {
            let n = class_mask(c).len();
            assert!(n * 100 < 32 * 32 * 15, "class {c}: {n} pixels");
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let dir1 = std::env::temp_dir().join("sargnn_synth_det_a");
        let dir2 = std::env::temp_dir().join("sargnn_synth_det_b");
        let spec = SynthSpec {
            num_classes: 3,
            samples_per_class: 5,
            seed: 42,
            ..SynthSpec::default()
        };
        generate_synthetic(&spec, &dir1).unwrap();
        generate_synthetic(&spec, &dir2).unwrap();
        for entry in fs::read_dir(&dir1).unwrap() {
            let name = entry.unwrap().file_name();
            let a = fs::read(dir1.join(&name)).unwrap();
            let b = fs::read(dir2.join(&name)).unwrap();
            assert_eq!(a, b, "file {name:?} differs");
        }
        fs::remove_dir_all(dir1).ok();
        fs::remove_dir_all(dir2).ok();
    }

    #[test]
    fn generated_dataset_loads_with_counts_preserved() {
        let dir = std::env::temp_dir().join("sargnn_synth_load");
        let spec = SynthSpec {
            num_classes: 2,
            samples_per_class: 10,
            seed: 7,
            ..SynthSpec::default()
        };
        let (train, test) = generate_synthetic(&spec, &dir).unwrap();
        let (_, train_set) = load_dataset(&train).unwrap();
        let (_, test_set) = load_dataset(&test).unwrap();
        assert_eq!(train_set.len(), 16);
        assert_eq!(test_set.len(), 4);
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn background_prunes_heavily_at_point_one() {
        let dir = std::env::temp_dir().join("sargnn_synth_prune");
        let spec = SynthSpec {
            num_classes: 2,
            samples_per_class: 5,
            seed: 3,
            ..SynthSpec::default()
        };
        let (train, _) = generate_synthetic(&spec, &dir).unwrap();
        let (_, samples) = load_dataset(&train).unwrap();
        let mut total_frac = 0.0;
        for s in &samples {
            let g = crate::graph::build_graph(s, crate::graph::Connectivity::Eight);
            let (_, frac) = crate::graph::prune_input(&g, 0.1);
            total_frac += frac;
        }
        let mean = total_frac / samples.len() as f64;
        assert!(mean >= 0.85, "mean pruned fraction {mean}");
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn split_is_stratified_and_exhaustive() {
        let mut data = Vec::new();
        for class in 0..10 {
            for _ in 0..10 {
                data.push(ImageSample::new(1, 1, 1, vec![0.1], class).unwrap());
            }
        }
        let (train, test) = split(&data, 0.8, 10, 5);
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);
        for class in 0..10 {
            assert_eq!(train.iter().filter(|s| s.label == class).count(), 8);
            assert_eq!(test.iter().filter(|s| s.label == class).count(), 2);
        }
    }

    #[test]
    fn split_fraction_one_empties_test() {
        let data: Vec<ImageSample> = (0..5)
            .map(|_| ImageSample::new(1, 1, 1, vec![0.1], 0).unwrap())
            .collect();
        let (train, test) = split(&data, 1.0, 1, 0);
        assert_eq!(train.len(), 5);
        assert!(test.is_empty());
    }

    #[test]
    fn missing_file_names_manifest_line() {
        let dir = std::env::temp_dir().join("sargnn_missing_file");
        fs::create_dir_all(&dir).unwrap();
        let manifest = dir.join("m.manifest");
        fs::write(&manifest, "classes=2\nnope.sgr\n").unwrap();
        let err = load_dataset(&manifest).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn empty_manifest_loads_empty() {
        let dir = std::env::temp_dir().join("sargnn_empty_manifest");
        fs::create_dir_all(&dir).unwrap();
        let manifest = dir.join("m.manifest");
        fs::write(&manifest, "classes=2\n").unwrap();
        let (_, samples) = load_dataset(&manifest).unwrap();
        assert!(samples.is_empty());
        fs::remove_dir_all(dir).ok();
    }
}
