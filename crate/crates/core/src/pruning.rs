//! Post-training weight sparsification and the threshold sweep driver.

use crate::cost::{count_flops, survival_stats};
use crate::error::Result;
use crate::graph::ImageSample;
use crate::model::{model_forward_sparse, ModelConfig, ParameterSet, SparseParameterSet};

#[derive(Debug, Clone)]
pub struct PruneStats {
    /// (tensor name, pruned fraction) per weight matrix.
    pub per_matrix: Vec<(String, f64)>,
    pub total_weights: usize,
    pub pruned_weights: usize,
}

impl PruneStats {
    pub fn pruned_fraction(&self) -> f64 {
        if self.total_weights == 0 {
            0.0
        } else {
            self.pruned_weights as f64 / self.total_weights as f64
        }
    }
}

/// Mask out weight entries with |w| strictly smaller than the threshold.
/// Biases are never pruned. Masked entries are zeroed and stay zero
/// through later optimizer steps.
pub fn prune_weights(params: &ParameterSet, threshold: f64) -> (ParameterSet, PruneStats) {
    let mut out = params.clone();
    let mut per_matrix = Vec::new();
    let mut total = 0usize;
    let mut pruned = 0usize;
    out.visit_mut(|info, m| {
        if info.is_bias {
            return;
        }
        let mask: Vec<bool> = m.data.iter().map(|&w| w.abs() >= threshold).collect();
        let kept = mask.iter().filter(|&&b| b).count();
        let n = mask.len();
        per_matrix.push((info.name.clone(), (n - kept) as f64 / n as f64));
        total += n;
        pruned += n - kept;
        m.mask = Some(mask);
        m.enforce_mask();
    });
    (
        out,
        PruneStats {
            per_matrix,
            total_weights: total,
            pruned_weights: pruned,
        },
    )
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub iv: f64,
    pub iw: f64,
    pub vtx_pruned_pct: f64,
    pub w_pruned_pct: f64,
    pub acc: f64,
    pub flops: f64,
}

pub const SWEEP_HEADER: &str = "iv\tiw\tvtx_pruned_pct\tw_pruned_pct\tacc\tflops";

impl SweepRow {
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.iv, self.iw, self.vtx_pruned_pct, self.w_pruned_pct, self.acc, self.flops
        )
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Evaluate accuracy over the sparse inference path.
pub fn evaluate_sparse(
    config: &ModelConfig,
    params: &SparseParameterSet,
    dataset: &[ImageSample],
    input_threshold: f64,
) -> Result<f64> {
    let mut correct = 0usize;
    for s in dataset {
        let logits = model_forward_sparse(config, params, s, input_threshold)?;
        if argmax(&logits) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Full cross-product evaluation over input and weight thresholds,
/// sorted by (iv, iw).
pub fn sweep(
    config: &ModelConfig,
    params: &ParameterSet,
    dataset: &[ImageSample],
    iv_list: &[f64],
    iw_list: &[f64],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(iv_list.len() * iw_list.len());
    for &iw in iw_list {
        let (pruned, stats) = prune_weights(params, iw);
        let sparse = SparseParameterSet::from_dense(&pruned);
        for &iv in iv_list {
            let survival = survival_stats(config, dataset, iv)?;
            let report = count_flops(config, &survival, &pruned, true)?;
            let acc = evaluate_sparse(config, &sparse, dataset, iv)?;
            rows.push(SweepRow {
                iv,
                iw,
                vtx_pruned_pct: survival.input_pruned_frac * 100.0,
                w_pruned_pct: stats.pruned_fraction() * 100.0,
                acc,
                flops: report.total_flops,
            });
        }
    }
    rows.sort_by(|a, b| {
        (a.iv, a.iw)
            .partial_cmp(&(b.iv, b.iw))
            .expect("finite thresholds")
    });
    Ok(rows)
}
