//! Line-oriented `key = value` run configuration with `#` comments.
//! Unknown keys are rejected; flags override file values in the CLI.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::graph::Connectivity;
use crate::model::{default_config, GnnKind, ModelConfig};
use crate::train::TrainHyper;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub layer_type: GnnKind,
    pub connectivity: Connectivity,
    pub grid_size: usize,
    pub channels: usize,
    pub classes: usize,
    pub vertex_attention: bool,
    pub feature_attention: bool,
    pub extra_pools: usize,
    /// Input-pruning threshold applied before the stack.
    pub iv: f64,
    pub batch_size: usize,
    pub lr0: f64,
    pub lambda_l1: f64,
    pub l2_decay: f64,
    pub epochs: usize,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub seed: u64,
    pub workers: usize,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let h = TrainHyper::default();
        RunConfig {
            layer_type: GnnKind::Sage,
            connectivity: Connectivity::Eight,
            grid_size: 32,
            channels: 1,
            classes: 10,
            vertex_attention: true,
            feature_attention: true,
            extra_pools: 0,
            iv: 0.1,
            batch_size: h.batch_size,
            lr0: h.lr0,
            lambda_l1: h.lambda_l1,
            l2_decay: h.l2_decay,
            epochs: h.epochs,
            lr_step: h.lr_step,
            lr_gamma: h.lr_gamma,
            seed: h.seed,
            workers: 1,
            train_manifest: None,
            test_manifest: None,
            checkpoint: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> Result<ModelConfig> {
        default_config(
            self.layer_type,
            self.connectivity,
            self.grid_size,
            self.channels,
            self.classes,
            self.vertex_attention,
            self.feature_attention,
            self.extra_pools,
        )
    }

    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            batch_size: self.batch_size,
            lr0: self.lr0,
            lambda_l1: self.lambda_l1,
            l2_decay: self.l2_decay,
            epochs: self.epochs,
            lr_step: self.lr_step,
            lr_gamma: self.lr_gamma,
            seed: self.seed,
            workers: self.workers,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value '{value}' for {what}"));
        match key {
            "layer_type" => self.layer_type = GnnKind::parse(value)?,
            "connectivity" => {
                self.connectivity = match value {
                    "4" => Connectivity::Four,
                    "8" => Connectivity::Eight,
                    _ => return Err(bad("connectivity (4|8)")),
                }
            }
            "grid_size" => self.grid_size = value.parse().map_err(|_| bad(key))?,
            "channels" => self.channels = value.parse().map_err(|_| bad(key))?,
            "classes" => self.classes = value.parse().map_err(|_| bad(key))?,
            "vertex_attention" => self.vertex_attention = value.parse().map_err(|_| bad(key))?,
            "feature_attention" => self.feature_attention = value.parse().map_err(|_| bad(key))?,
            "extra_pools" => self.extra_pools = value.parse().map_err(|_| bad(key))?,
            "iv" => self.iv = value.parse().map_err(|_| bad(key))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad(key))?,
            "lr0" => self.lr0 = value.parse().map_err(|_| bad(key))?,
            "lambda_l1" => self.lambda_l1 = value.parse().map_err(|_| bad(key))?,
            "l2_decay" => self.l2_decay = value.parse().map_err(|_| bad(key))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad(key))?,
            "lr_step" => self.lr_step = value.parse().map_err(|_| bad(key))?,
            "lr_gamma" => self.lr_gamma = value.parse().map_err(|_| bad(key))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "workers" => self.workers = value.parse().map_err(|_| bad(key))?,
            "train_manifest" => self.train_manifest = Some(PathBuf::from(value)),
            "test_manifest" => self.test_manifest = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", line_no + 1))
            })?;
            config.set(key.trim(), value.trim()).map_err(|e| {
                Error::Config(format!("line {}: {e}", line_no + 1))
            })?;
        }
        Ok(config)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "layer_type = {}", self.layer_type.name());
        let _ = writeln!(
            out,
            "connectivity = {}",
            match self.connectivity {
                Connectivity::Four => 4,
                Connectivity::Eight => 8,
            }
        );
        let _ = writeln!(out, "grid_size = {}", self.grid_size);
        let _ = writeln!(out, "channels = {}", self.channels);
        let _ = writeln!(out, "classes = {}", self.classes);
        let _ = writeln!(out, "vertex_attention = {}", self.vertex_attention);
        let _ = writeln!(out, "feature_attention = {}", self.feature_attention);
        let _ = writeln!(out, "extra_pools = {}", self.extra_pools);
        let _ = writeln!(out, "iv = {}", self.iv);
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "lr0 = {}", self.lr0);
        let _ = writeln!(out, "lambda_l1 = {}", self.lambda_l1);
        let _ = writeln!(out, "l2_decay = {}", self.l2_decay);
        let _ = writeln!(out, "epochs = {}", self.epochs);
        let _ = writeln!(out, "lr_step = {}", self.lr_step);
        let _ = writeln!(out, "lr_gamma = {}", self.lr_gamma);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "workers = {}", self.workers);
        for (key, path) in [
            ("train_manifest", &self.train_manifest),
            ("test_manifest", &self.test_manifest),
            ("checkpoint", &self.checkpoint),
            ("out_dir", &self.out_dir),
        ] {
            if let Some(p) = path {
                let _ = writeln!(out, "{key} = {}", p.display());
            }
        }
        out
    }
}
