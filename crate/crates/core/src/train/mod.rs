//! Optimisation loop, Adam, learning-rate schedule, run logs and
//! hyper-parameter grid search.

mod config;

pub use config::TrainConfig;

use std::collections::HashMap;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetBundle, InputKind, Split};
use crate::error::{Error, Result};
use crate::eval::{class_logits, gzsl_from_logits, zsl_eval};
use crate::model::{forward_batch, Architecture, LossBreakdown, ModelParams, Supervision};
use crate::tensor::{Float, Graph, Tensor};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Float> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(params: &ModelParams<T>, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Vec<T>> = params
            .tensors()
            .iter()
            .map(|(_, t)| vec![T::ZERO; t.numel()])
            .collect();
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update with `grads` in [`ModelParams::tensors`] order.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &[&Tensor<T>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let step_size = T::from_f64(lr / c1);
        let c2_sqrt = T::from_f64(c2.sqrt());
        let eps = T::from_f64(self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::ONE - b1) * gi;
                *vi = b2 * *vi + (T::ONE - b2) * gi * gi;
                *w -= step_size * *mi / ((*vi).sqrt() / c2_sqrt + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Image-weighted averages over the epoch's batches.
    pub losses: LossBreakdown,
    /// Zero-shot T1 on the validation classes, when there are any.
    pub val_zsl: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were returned, when chosen on validation.
    pub best_epoch: Option<usize>,
}

impl RunLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tlr\tl_cls\tl_reg\tl_ad\tl_cpt\ttotal\tval_zsl\tseconds\n");
        for r in &self.records {
            let l = &r.losses;
            s.push_str(&format!(
                "{}\t{:e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.3}\n",
                r.epoch,
                r.lr,
                l.cls,
                l.reg,
                l.ad,
                l.cpt,
                l.total,
                r.val_zsl.map_or("-".to_string(), |v| format!("{v:.6}")),
                r.seconds
            ));
        }
        s
    }
}

/// Model shape for `bundle`: the configured encoder for raw images, the
/// identity encoder for feature bundles.
pub fn architecture_for(bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<Architecture> {
    let (h, w) = bundle.spatial_size();
    if h != w {
        return Err(Error::InvalidData(format!(
            "inputs must be square, got {h}x{w}"
        )));
    }
    let channels = match bundle.input_kind {
        InputKind::Image => std::iter::once(bundle.input_channels())
            .chain(cfg.channels.iter().copied())
            .collect(),
        InputKind::Feature => vec![bundle.input_channels()],
    };
    Architecture::new(channels, h, bundle.schema.k())
}

/// Training order for one epoch: every class's images are shuffled, then
/// classes are visited round-robin in a shuffled class order, so each batch
/// mixes classes evenly.
fn balanced_order(by_class: &[Vec<usize>], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut queues: Vec<Vec<usize>> = by_class.to_vec();
    for q in &mut queues {
        q.shuffle(rng);
    }
    let mut order_of_classes: Vec<usize> = (0..queues.len()).collect();
    order_of_classes.shuffle(rng);
    let longest = queues.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::with_capacity(queues.iter().map(Vec::len).sum());
    for r in 0..longest {
        for &c in &order_of_classes {
            if let Some(&i) = queues[c].get(r) {
                out.push(i);
            }
        }
    }
    out
}

fn add_scaled(acc: &mut LossBreakdown, b: &LossBreakdown, w: f64) {
    acc.cls += w * b.cls;
    acc.reg += w * b.reg;
    acc.ad += w * b.ad;
    acc.cpt += w * b.cpt;
    acc.total += w * b.total;
    acc.lambda1 = b.lambda1;
    acc.lambda2 = b.lambda2;
    acc.lambda3 = b.lambda3;
}

/// Trains from a fresh initialisation seeded by `cfg.seed`.
pub fn train<T: Float>(
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, RunLog)> {
    let arch = architecture_for(bundle, cfg)?;
    train_from(bundle, cfg, ModelParams::init(arch, cfg.seed))
}

/// Trains `params` on the seen-class training images of `bundle`.
///
/// When the bundle has validation classes, the parameters of the epoch with
/// the best validation zero-shot T1 are returned; otherwise the final ones.
pub fn train_from<T: Float>(
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    mut params: ModelParams<T>,
) -> Result<(ModelParams<T>, RunLog)> {
    cfg.validate()?;
    let part = bundle.partition();
    if part.train.is_empty() {
        return Err(Error::Empty("seen-class training images".into()));
    }
    let seen = bundle.classes.ids(Split::Seen);
    let row: HashMap<u32, usize> = seen.iter().enumerate().map(|(r, &id)| (id, r)).collect();
    let class_attrs = bundle.class_matrix::<T>(&seen)?;
    let mut by_class = vec![Vec::new(); seen.len()];
    for &i in &part.train {
        by_class[row[&bundle.samples[i].class_id]].push(i);
    }
    let groups = bundle.schema.groups();
    let loss_cfg = cfg.loss_config();
    let val_ids = bundle.classes.ids(Split::Val);
    let validate = !val_ids.is_empty() && !part.val.is_empty();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_ba7c4);
    let mut adam = Adam::new(&params, cfg.beta1, cfg.beta2);
    let mut log = RunLog::default();
    let mut best: Option<(f64, ModelParams<T>)> = None;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr * cfg.lr_decay.powi(((epoch - 1) / cfg.lr_decay_every) as i32);
        let order = balanced_order(&by_class, &mut rng);
        let mut avg = LossBreakdown::default();
        for idx in order.chunks(cfg.batch_size) {
            let targets: Vec<usize> = idx
                .iter()
                .map(|&i| row[&bundle.samples[i].class_id])
                .collect();
            let batch = bundle.batch::<T>(idx)?;
            let mut g = Graph::new();
            let pv = params.attach(&mut g, true);
            let pass = forward_batch(
                &mut g,
                &pv,
                &batch,
                &class_attrs,
                groups,
                &loss_cfg,
                Some(Supervision { targets: &targets }),
            )?;
            let lv = pass.losses.expect("supervised pass");
            let b = lv.breakdown(&g, &loss_cfg);
            if !b.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("non-finite loss {b:?}"),
                });
            }
            g.backward(lv.total)?;
            let vars = pv.all();
            let grads: Vec<&Tensor<T>> = vars
                .iter()
                .map(|&v| g.grad(v).expect("trainable leaves receive gradients"))
                .collect();
            adam.step(&mut params, &grads, lr);
            if !params.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: "non-finite parameters after update".into(),
                });
            }
            add_scaled(&mut avg, &b, idx.len() as f64 / order.len() as f64);
        }
        let val_zsl = if validate {
            Some(zsl_eval(&params, bundle, &part.val, &val_ids, &loss_cfg)?.t1)
        } else {
            None
        };
        if let Some(acc) = val_zsl {
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, params.clone()));
                log.best_epoch = Some(epoch);
            }
        }
        let seconds = start.elapsed().as_secs_f64();
        info!(
            "epoch {epoch}: lr {lr:.2e} cls {:.4} reg {:.4} ad {:.4} cpt {:.4} total {:.4}{} ({seconds:.1}s)",
            avg.cls,
            avg.reg,
            avg.ad,
            avg.cpt,
            avg.total,
            val_zsl.map_or(String::new(), |v| format!(" val_zsl {v:.4}"))
        );
        log.records.push(EpochRecord {
            epoch,
            lr,
            losses: avg,
            val_zsl,
            seconds,
        });
    }
    Ok((best.map_or(params, |(_, p)| p), log))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub lambda1: f64,
    pub gamma: f64,
    /// Validation zero-shot T1.
    pub zsl_t1: f64,
    /// Validation generalized harmonic mean (held-out seen images plus
    /// validation-class images).
    pub gzsl_h: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridOutcome {
    pub best: TrainConfig,
    pub rows: Vec<GridRow>,
}

impl GridOutcome {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("lambda1\tgamma\tval_zsl_t1\tval_gzsl_h\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\n",
                r.lambda1, r.gamma, r.zsl_t1, r.gzsl_h
            ));
        }
        s
    }
}

/// Exhaustive search over `λ1 × γ` on the validation classes. Ranks by
/// validation zero-shot T1, then validation generalized H, then prefers the
/// smaller λ1 and the smaller γ.
pub fn grid_search<T: Float>(
    bundle: &DatasetBundle,
    base: &TrainConfig,
    lambda1s: &[f64],
    gammas: &[f64],
) -> Result<GridOutcome> {
    if lambda1s.is_empty() || gammas.is_empty() {
        return Err(Error::InvalidArgument(
            "grid search needs at least one λ1 and one γ".into(),
        ));
    }
    let val_ids = bundle.classes.ids(Split::Val);
    let part = bundle.partition();
    if val_ids.is_empty() || part.val.is_empty() {
        return Err(Error::Empty("validation classes".into()));
    }
    if val_ids.len() == 1 {
        warn!("a single validation class makes zero-shot validation accuracy trivially 1");
    }
    let seen = bundle.classes.ids(Split::Seen);
    let mut ids: Vec<u32> = seen.iter().chain(&val_ids).copied().collect();
    ids.sort_unstable();
    let mut gen_idx: Vec<usize> = part.seen_test.iter().chain(&part.val).copied().collect();
    gen_idx.sort_unstable();
    let truth: Vec<u32> = gen_idx
        .iter()
        .map(|&i| bundle.samples[i].class_id)
        .collect();

    let mut rows = Vec::with_capacity(lambda1s.len() * gammas.len());
    for &lambda1 in lambda1s {
        let cfg = TrainConfig {
            lambda1,
            ..base.clone()
        };
        let (params, _) = train::<T>(bundle, &cfg)?;
        let loss_cfg = cfg.loss_config();
        let zsl = zsl_eval(&params, bundle, &part.val, &val_ids, &loss_cfg)?.t1;
        let logits = class_logits(&params, bundle, &gen_idx, &ids, &loss_cfg)?;
        for &gamma in gammas {
            let h = gzsl_from_logits(&logits, &truth, &ids, &seen, gamma)?
                .harmonic
                .unwrap_or(0.0);
            info!("grid λ1 = {lambda1}, γ = {gamma}: val zsl {zsl:.4}, val H {h:.4}");
            rows.push(GridRow {
                lambda1,
                gamma,
                zsl_t1: zsl,
                gzsl_h: h,
            });
        }
    }
    let best = rows
        .iter()
        .min_by(|a, b| {
            b.zsl_t1
                .total_cmp(&a.zsl_t1)
                .then(b.gzsl_h.total_cmp(&a.gzsl_h))
                .then(a.lambda1.total_cmp(&b.lambda1))
                .then(a.gamma.total_cmp(&b.gamma))
        })
        .expect("non-empty grid");
    Ok(GridOutcome {
        best: TrainConfig {
            lambda1: best.lambda1,
            gamma: best.gamma,
            ..base.clone()
        },
        rows,
    })
}
