//! Zero- and few-shot prediction, calibrated stacking, per-class metrics,
//! attribute localization, PCP and heatmap export.

mod fsl;
mod localize;
mod report;

pub use fsl::{cosine, fsl_evaluate, fsl_fit_predict, gfsl_eval, run_episodes, EpisodeSummary};
pub use localize::{
    chance_pcp, export_heatmaps, localize, pcp, pcp_from_peaks, write_pgm, write_ppm, Localization,
    PartScore, PcpReport,
};
pub use report::{accuracy_report, harmonic_mean, ClassAccuracy, EvalReport};

use rayon::prelude::*;

use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::model::{infer, ForwardTrace, LossConfig, ModelParams};
use crate::tensor::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Zsl,
    Gzsl,
    Fsl,
    Gfsl,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Zsl => "zsl",
            Mode::Gzsl => "gzsl",
            Mode::Fsl => "fsl",
            Mode::Gfsl => "gfsl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "zsl" => Some(Mode::Zsl),
            "gzsl" => Some(Mode::Gzsl),
            "fsl" => Some(Mode::Fsl),
            "gfsl" => Some(Mode::Gfsl),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub mode: Mode,
    /// Calibration applied to seen-class scores in generalized ZSL.
    pub gamma: f64,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub episodes: usize,
    /// Localization box side as a fraction of the object box side.
    pub rho: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: Mode::Zsl,
            gamma: 0.7,
            way: 5,
            shot: 1,
            query: 15,
            episodes: 600,
            rho: 0.25,
            seed: 7,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "rho must lie in (0, 1], got {}",
                self.rho
            )));
        }
        if self.way == 0 || self.shot == 0 || self.query == 0 || self.episodes == 0 {
            return Err(Error::InvalidArgument(
                "way, shot, query and episodes must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Index of the best score; ties go to the smallest class id.
fn best_class(scores: impl Iterator<Item = f64>, ids: &[u32]) -> Result<u32> {
    let mut best: Option<(f64, u32)> = None;
    for (s, &id) in scores.zip(ids) {
        best = match best {
            Some((bs, bid)) if bs > s || (bs == s && bid < id) => Some((bs, bid)),
            _ => Some((s, id)),
        };
    }
    best.map(|(_, id)| id)
        .ok_or_else(|| Error::Empty("candidate class set".into()))
}

/// Zero-shot rule: the highest-scoring candidate; `logits[i]` scores `ids[i]`.
pub fn zsl_predict<T: Float>(logits: &[T], ids: &[u32]) -> Result<u32> {
    if logits.len() != ids.len() {
        return Err(Error::Shape(format!(
            "{} logits for {} classes",
            logits.len(),
            ids.len()
        )));
    }
    best_class(logits.iter().map(|v| v.to_f64()), ids)
}

/// Calibrated stacking: `argmax_j logit_j − γ·[j is seen]`.
pub fn gzsl_predict<T: Float>(logits: &[T], ids: &[u32], seen: &[bool], gamma: f64) -> Result<u32> {
    if logits.len() != ids.len() || seen.len() != ids.len() {
        return Err(Error::Shape(format!(
            "{} logits, {} ids, {} seen flags",
            logits.len(),
            ids.len(),
            seen.len()
        )));
    }
    if !(gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gamma must be >= 0, got {gamma}"
        )));
    }
    best_class(
        logits
            .iter()
            .zip(seen)
            .map(|(v, &s)| v.to_f64() - if s { gamma } else { 0.0 }),
        ids,
    )
}

/// Images per inference batch. Fixed so that results do not depend on the
/// number of worker threads.
pub const EVAL_CHUNK: usize = 32;

/// Runs the model over the samples `indices`, scoring the classes `class_ids`,
/// and maps each trace through `f(sample_index, trace)`. Chunks run in
/// parallel on the current rayon pool; results keep the order of `indices`.
pub fn map_traces<T, R, F>(
    params: &ModelParams<T>,
    bundle: &DatasetBundle,
    indices: &[usize],
    class_ids: &[u32],
    loss_cfg: &LossConfig,
    f: F,
) -> Result<Vec<R>>
where
    T: Float,
    R: Send,
    F: Fn(usize, &ForwardTrace<T>) -> R + Sync,
{
    let class_attrs = bundle.class_matrix::<T>(class_ids)?;
    let groups = bundle.schema.groups();
    let chunks: Vec<&[usize]> = indices.chunks(EVAL_CHUNK).collect();
    let parts: Vec<Result<Vec<R>>> = chunks
        .par_iter()
        .map(|chunk| {
            let batch = bundle.batch::<T>(chunk)?;
            let traces = infer(params, &batch, &class_attrs, groups, loss_cfg)?;
            Ok(chunk.iter().zip(&traces).map(|(&i, t)| f(i, t)).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(indices.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Final logits (as f64) of every sample in `indices` over `class_ids`.
pub fn class_logits<T: Float>(
    params: &ModelParams<T>,
    bundle: &DatasetBundle,
    indices: &[usize],
    class_ids: &[u32],
    loss_cfg: &LossConfig,
) -> Result<Vec<Vec<f64>>> {
    map_traces(params, bundle, indices, class_ids, loss_cfg, |_, t| {
        t.logits.data().iter().map(|v| v.to_f64()).collect()
    })
}

fn truths(bundle: &DatasetBundle, indices: &[usize]) -> Vec<u32> {
    indices
        .iter()
        .map(|&i| bundle.samples[i].class_id)
        .collect()
}

/// Zero-shot evaluation of `indices` against the candidate classes `ids`.
pub fn zsl_eval<T: Float>(
    params: &ModelParams<T>,
    bundle: &DatasetBundle,
    indices: &[usize],
    ids: &[u32],
    loss_cfg: &LossConfig,
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::Empty("zero-shot test set".into()));
    }
    let logits = class_logits(params, bundle, indices, ids, loss_cfg)?;
    let preds = logits
        .iter()
        .map(|l| zsl_predict(l, ids))
        .collect::<Result<Vec<_>>>()?;
    Ok(accuracy_report(
        Mode::Zsl,
        &truths(bundle, indices),
        &preds,
        &[],
    ))
}

/// Generalized evaluation from precomputed logits over `ids`, of which
/// `seen_ids` are calibrated down by `gamma`.
pub fn gzsl_from_logits(
    logits: &[Vec<f64>],
    truth: &[u32],
    ids: &[u32],
    seen_ids: &[u32],
    gamma: f64,
) -> Result<EvalReport> {
    let seen: Vec<bool> = ids.iter().map(|id| seen_ids.contains(id)).collect();
    let preds = logits
        .iter()
        .map(|l| gzsl_predict(l, ids, &seen, gamma))
        .collect::<Result<Vec<_>>>()?;
    let mut r = accuracy_report(Mode::Gzsl, truth, &preds, seen_ids);
    r.gamma = Some(gamma);
    Ok(r)
}

/// Generalized evaluation on held-out seen images plus all unseen images,
/// over the union of seen and unseen classes.
pub fn gzsl_eval<T: Float>(
    params: &ModelParams<T>,
    bundle: &DatasetBundle,
    gamma: f64,
    loss_cfg: &LossConfig,
) -> Result<EvalReport> {
    use crate::data::Split;
    let part = bundle.partition();
    let indices = part.test();
    if indices.is_empty() {
        return Err(Error::Empty("generalized test set".into()));
    }
    let seen_ids = bundle.classes.ids(Split::Seen);
    let mut ids = seen_ids.clone();
    ids.extend(bundle.classes.ids(Split::Unseen));
    ids.sort_unstable();
    let logits = class_logits(params, bundle, &indices, &ids, loss_cfg)?;
    gzsl_from_logits(&logits, &truths(bundle, &indices), &ids, &seen_ids, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zsl_rules() {
        assert_eq!(zsl_predict(&[0.2f32, 0.9], &[1, 2]).unwrap(), 2);
        assert_eq!(zsl_predict(&[0.5f64, 0.5, 0.5], &[7, 3, 9]).unwrap(), 3);
        assert!(zsl_predict::<f32>(&[], &[]).is_err());
    }

    #[test]
    fn calibrated_stacking() {
        let ids = [1, 2];
        let seen = [true, false];
        assert_eq!(gzsl_predict(&[0.9f64, 0.5], &ids, &seen, 0.5).unwrap(), 2);
        assert_eq!(gzsl_predict(&[0.9f64, 0.5], &ids, &seen, 0.0).unwrap(), 1);
        assert!(gzsl_predict(&[0.9f64, 0.5], &ids, &seen, -1.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EvalConfig::default().validate().is_ok());
        assert!(EvalConfig {
            gamma: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(EvalConfig {
            rho: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
