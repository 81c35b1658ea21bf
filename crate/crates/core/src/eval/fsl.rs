//! Few-shot classification by nearest class mean under cosine similarity,
//! reusing the trained global feature `g(x)`.

use std::collections::HashMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::report::{accuracy_report, EvalReport};
use super::{map_traces, EvalConfig, Mode};
use crate::data::{make_episodes, DatasetBundle, Episode, Split};
use crate::error::{Error, Result};
use crate::model::{LossConfig, ModelParams};
use crate::tensor::Float;

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| dot / (na * nb))
}

/// Centroid of every label present in `support`. Zero-norm vectors are
/// dropped with a warning.
fn centroids(support: &[(usize, Vec<f64>)]) -> Result<Vec<Option<Vec<f64>>>> {
    let n_labels = support.iter().map(|(l, _)| l + 1).max().unwrap_or(0);
    if n_labels == 0 {
        return Err(Error::Empty("support set".into()));
    }
    let dim = support[0].1.len();
    let mut sums = vec![vec![0.0; dim]; n_labels];
    let mut counts = vec![0usize; n_labels];
    let mut dropped = 0;
    for (label, f) in support {
        if f.len() != dim {
            return Err(Error::Shape(format!(
                "support features of lengths {dim} and {}",
                f.len()
            )));
        }
        if f.iter().all(|&v| v == 0.0) {
            dropped += 1;
            continue;
        }
        for (s, v) in sums[*label].iter_mut().zip(f) {
            *s += v;
        }
        counts[*label] += 1;
    }
    if dropped > 0 {
        warn!("{dropped} zero-norm support feature(s) excluded");
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect())
}

/// Labels `queries` by the nearest support centroid under cosine
/// similarity. Ties go to the smaller label; zero-norm queries get `None`.
pub fn fsl_fit_predict(
    support: &[(usize, Vec<f64>)],
    queries: &[Vec<f64>],
) -> Result<Vec<Option<usize>>> {
    let cents = centroids(support)?;
    let mut zero = 0;
    let out = queries
        .iter()
        .map(|q| {
            let mut best: Option<(f64, usize)> = None;
            for (label, c) in cents.iter().enumerate() {
                let Some(sim) = c.as_ref().and_then(|c| cosine(q, c)) else {
                    continue;
                };
                if best.is_none_or(|(b, _)| sim > b) {
                    best = Some((sim, label));
                }
            }
            if best.is_none() {
                zero += 1;
            }
            best.map(|(_, l)| l)
        })
        .collect();
    if zero > 0 {
        warn!("{zero} query feature(s) could not be scored (zero norm)");
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSummary {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub episodes: usize,
    pub mean: f64,
    /// Half-width of the normal-approximation 95% confidence interval.
    pub ci95: f64,
    pub accuracies: Vec<f64>,
}

/// Scores `episodes` given a feature for every sample index they reference.
pub fn run_episodes(
    episodes: &[Episode],
    features: &HashMap<usize, Vec<f64>>,
) -> Result<EpisodeSummary> {
    let first = episodes
        .first()
        .ok_or_else(|| Error::Empty("episode list".into()))?;
    let feat = |i: &usize| {
        features
            .get(i)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("no feature for sample {i}")))
    };
    let mut accs = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let mut support = Vec::new();
        for (w, s) in ep.support.iter().enumerate() {
            for i in s {
                support.push((w, feat(i)?));
            }
        }
        let (qi, ql): (Vec<usize>, Vec<usize>) = ep.labeled_queries().unzip();
        let queries = qi.iter().map(feat).collect::<Result<Vec<_>>>()?;
        let preds = fsl_fit_predict(&support, &queries)?;
        let correct = preds
            .iter()
            .zip(&ql)
            .filter(|(p, &l)| **p == Some(l))
            .count();
        accs.push(correct as f64 / ql.len() as f64);
    }
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let ci95 = if accs.len() > 1 {
        let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
        1.96 * (var / n).sqrt()
    } else {
        0.0
    };
    Ok(EpisodeSummary {
        way: first.classes.len(),
        shot: first.support[0].len(),
        query: first.query[0].len(),
        episodes: episodes.len(),
        mean,
        ci95,
        accuracies: accs,
    })
}

fn global_features<T: Float>(
    params: &ModelParams<T>,
    bundle: &DatasetBundle,
    indices: &[usize],
    loss_cfg: &LossConfig,
) -> Result<HashMap<usize, Vec<f64>>> {
    // Logits are not needed; score against any single class.
    let any = [bundle.classes.all_ids()[0]];
    let cfg = LossConfig {
        zoom: false,
        ..*loss_cfg
    };
    let feats = map_traces(params, bundle, indices, &any, &cfg, |i, t| {
        (
            i,
            t.global
                .data()
                .iter()
                .map(|v| v.to_f64())
                .collect::<Vec<f64>>(),
        )
    })?;
    Ok(feats.into_iter().collect())
}

/// Episodic N-way K-shot evaluation on the unseen classes.
pub fn fsl_evaluate<T: Float>(
    params: &ModelParams<T>,
    bundle: &DatasetBundle,
    cfg: &EvalConfig,
    loss_cfg: &LossConfig,
) -> Result<EpisodeSummary> {
    let episodes = make_episodes(bundle, cfg.way, cfg.shot, cfg.query, cfg.episodes, cfg.seed)?;
    let mut used: Vec<usize> = episodes
        .iter()
        .flat_map(|e| e.support.iter().chain(&e.query).flatten().copied())
        .collect();
    used.sort_unstable();
    used.dedup();
    let features = global_features(params, bundle, &used, loss_cfg)?;
    run_episodes(&episodes, &features)
}

/// All-way evaluation: centroids of every seen class from its training images
/// and of every unseen class from `shots` randomly reserved images; the test
/// set is the held-out seen images plus the remaining unseen images.
pub fn gfsl_eval<T: Float>(
    params: &ModelParams<T>,
    bundle: &DatasetBundle,
    shots: usize,
    seed: u64,
    loss_cfg: &LossConfig,
) -> Result<EvalReport> {
    if shots == 0 {
        return Err(Error::InvalidArgument("shots must be positive".into()));
    }
    let part = bundle.partition();
    let seen_ids = bundle.classes.ids(Split::Seen);
    let novel_ids = bundle.classes.ids(Split::Unseen);
    if novel_ids.is_empty() {
        return Err(Error::Empty("novel class set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut novel_support = Vec::new();
    let mut test: Vec<usize> = part.seen_test.clone();
    for &id in &novel_ids {
        let mut pool = bundle.samples_of(id);
        if pool.len() < shots {
            return Err(Error::InsufficientSamples {
                class: id,
                needed: shots,
                available: pool.len(),
            });
        }
        pool.shuffle(&mut rng);
        novel_support.extend(pool[..shots].iter().map(|&i| (i, id)));
        test.extend_from_slice(&pool[shots..]);
    }
    test.sort_unstable();
    if test.is_empty() {
        return Err(Error::Empty("all-way test set".into()));
    }

    let mut all: Vec<usize> = part
        .train
        .iter()
        .copied()
        .chain(novel_support.iter().map(|p| p.0))
        .collect();
    all.extend_from_slice(&test);
    all.sort_unstable();
    all.dedup();
    let features = global_features(params, bundle, &all, loss_cfg)?;

    let class_ids: Vec<u32> = seen_ids.iter().chain(&novel_ids).copied().collect();
    let label_of: HashMap<u32, usize> =
        class_ids.iter().enumerate().map(|(l, &c)| (c, l)).collect();
    let support: Vec<(usize, Vec<f64>)> = part
        .train
        .iter()
        .map(|&i| (i, bundle.samples[i].class_id))
        .chain(novel_support)
        .map(|(i, c)| (label_of[&c], features[&i].clone()))
        .collect();
    let queries: Vec<Vec<f64>> = test.iter().map(|i| features[i].clone()).collect();
    let preds = fsl_fit_predict(&support, &queries)?;
    let truth: Vec<u32> = test.iter().map(|&i| bundle.samples[i].class_id).collect();
    // An unscorable query counts as wrong: map it to a class id that never matches.
    let pred_ids: Vec<u32> = preds
        .iter()
        .map(|p| p.map_or(u32::MAX, |l| class_ids[l]))
        .collect();
    Ok(accuracy_report(Mode::Gfsl, &truth, &pred_ids, &seen_ids))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_shot_identity() {
        let support = vec![(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])];
        let preds = fsl_fit_predict(&support, &[vec![1.0, 0.0], vec![0.2, 3.0]]).unwrap();
        assert_eq!(preds, vec![Some(0), Some(1)]);
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]), Some(1.0));
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), Some(0.0));
    }

    #[test]
    fn zero_norm_handling() {
        let support = vec![
            (0, vec![0.0, 0.0]),
            (0, vec![1.0, 1.0]),
            (1, vec![-1.0, 0.0]),
        ];
        let preds = fsl_fit_predict(&support, &[vec![0.0, 0.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(preds, vec![None, Some(0)]);
    }
}
