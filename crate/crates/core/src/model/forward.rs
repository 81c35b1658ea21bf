use super::{chw_to_hwc, transpose2, LossConfig, ModelParams, ParamVars};
use crate::error::{Error, Result};
use crate::geometry::PixelBox;
use crate::tensor::{nearest_upsample, resize_region, Float, Graph, Tensor, Var};

/// Intermediates of the zoom-in branch for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ZoomInResult<T: Float = f32> {
    /// Selected attribute `n_l` of every group.
    pub selected: Vec<usize>,
    /// Informative map `M̃ = Σ_l M[n_l]`, `[H,W]`.
    pub informative: Tensor<T>,
    /// Mean of `M̃`.
    pub threshold: T,
    /// Binary mask `[H,W]`.
    pub mask: Tensor<T>,
    /// Crop on the input, in input pixels.
    pub crop: PixelBox,
    /// The crop resized back to the input size, `[C,S,S]`.
    pub zoomed: Tensor<T>,
    /// Class logits of the zoomed branch, when it was run.
    pub logits: Option<Tensor<T>>,
}

/// Everything the model computes for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T: Float = f32> {
    /// `f(x)`, `[H,W,C]`.
    pub features: Tensor<T>,
    /// `g(x)`, `[C]`.
    pub global: Tensor<T>,
    /// Similarity maps `[K,H,W]`.
    pub sim: Tensor<T>,
    /// Predicted attributes `[K]`.
    pub attrs: Tensor<T>,
    /// Row-major-first peak `(i, j)` of every similarity map.
    pub peaks: Vec<(usize, usize)>,
    /// Global-branch logits `[J]`.
    pub base_logits: Tensor<T>,
    /// Final logits `[J]`: base plus zoom logits when zoom ran.
    pub logits: Tensor<T>,
    pub zoom: Option<ZoomInResult<T>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub ad: f64,
    pub cpt: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossBreakdown {
    /// `cls + λ1·reg + λ2·ad + λ3·cpt` recomputed from the components.
    pub fn weighted_sum(&self) -> f64 {
        self.cls + self.lambda1 * self.reg + self.lambda2 * self.ad + self.lambda3 * self.cpt
    }
}

/// Loss nodes of a supervised batch. Disabled terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cls: Var,
    pub reg: Option<Var>,
    pub ad: Option<Var>,
    pub cpt: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Float>(&self, g: &Graph<T>, cfg: &LossConfig) -> LossBreakdown {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0].to_f64());
        let (lambda1, lambda2, lambda3) = cfg.effective_lambdas();
        LossBreakdown {
            cls: val(Some(self.cls)),
            reg: val(self.reg),
            ad: val(self.ad),
            cpt: val(self.cpt),
            total: val(Some(self.total)),
            lambda1,
            lambda2,
            lambda3,
        }
    }
}

/// Class supervision for a batch: the row of the class matrix holding each
/// image's class.
#[derive(Clone, Copy, Debug)]
pub struct Supervision<'a> {
    pub targets: &'a [usize],
}

/// Graph nodes of one batched forward pass.
#[derive(Debug)]
pub struct BatchPass<T: Float = f32> {
    /// `[N,C,H,W]`.
    pub features: Var,
    /// `[N,C]`.
    pub global: Var,
    /// `[N,K,H,W]`.
    pub sim: Var,
    /// `[N,K]`.
    pub attrs: Var,
    /// Flat spatial argmax per `(n, k)`, row-major over `[N,K]`.
    pub peaks: Vec<usize>,
    /// `[N,J]`.
    pub base_logits: Var,
    pub zoom_logits: Option<Var>,
    pub logits: Var,
    /// One entry per image when the zoom branch ran.
    pub zoom: Vec<ZoomInResult<T>>,
    pub losses: Option<LossVars>,
}

impl<T: Float> BatchPass<T> {
    /// Extracts the trace of image `n`.
    pub fn trace(&self, g: &Graph<T>, n: usize) -> Result<ForwardTrace<T>> {
        let f = g.value(self.features).slice_outer(n)?;
        let sim = g.value(self.sim).slice_outer(n)?;
        let (k, w) = (sim.shape()[0], sim.shape()[2]);
        let row = |v: Var| -> Result<Tensor<T>> {
            let t = g.value(v);
            let cols = t.shape()[1];
            Tensor::from_vec(t.data()[n * cols..(n + 1) * cols].to_vec())
        };
        Ok(ForwardTrace {
            features: chw_to_hwc(&f)?,
            global: row(self.global)?,
            attrs: row(self.attrs)?,
            peaks: self.peaks[n * k..(n + 1) * k]
                .iter()
                .map(|&a| (a / w, a % w))
                .collect(),
            sim,
            base_logits: row(self.base_logits)?,
            logits: row(self.logits)?,
            zoom: self.zoom.get(n).cloned(),
        })
    }
}

/// Encoder on an `[N,C,S,S]` node.
pub(crate) fn encode_graph<T: Float>(g: &mut Graph<T>, pv: &ParamVars, x: Var) -> Result<Var> {
    let mut h = x;
    for (&w, &b) in pv.conv_w.iter().zip(&pv.conv_b) {
        let c = g.conv2d(h, w, 2, 1)?;
        let c = g.add_channel_bias(c, b)?;
        h = g.relu(c);
    }
    Ok(h)
}

/// Index of the largest value among `group`; ties go to the smallest index.
pub fn group_argmax<T: Float>(attrs: &[T], group: &[usize]) -> usize {
    let mut best = group[0];
    for &a in &group[1..] {
        if attrs[a] > attrs[best] || (attrs[a] == attrs[best] && a < best) {
            best = a;
        }
    }
    best
}

/// Zoom-in crop from the similarity maps `[K,H,W]` (flat), predictions and
/// the model input `[C,S,S]`.
pub(crate) fn zoom_from_maps<T: Float>(
    sim: &[T],
    attrs: &[T],
    h: usize,
    w: usize,
    groups: &[Vec<usize>],
    image: &Tensor<T>,
) -> Result<ZoomInResult<T>> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument(
            "zoom-in needs at least one attribute group".into(),
        ));
    }
    let plane = h * w;
    let selected: Vec<usize> = groups.iter().map(|gr| group_argmax(attrs, gr)).collect();
    let mut informative = vec![T::ZERO; plane];
    for &k in &selected {
        for (acc, &m) in informative.iter_mut().zip(&sim[k * plane..(k + 1) * plane]) {
            *acc += m;
        }
    }
    let threshold = informative.iter().copied().sum::<T>() / T::from_usize(plane);
    let mut mask: Vec<T> = informative
        .iter()
        .map(|&m| if m >= threshold { T::ONE } else { T::ZERO })
        .collect();
    if mask.iter().all(|&m| m == T::ZERO) {
        // The rounded mean of a (near) constant map can exceed its maximum.
        let max = informative.iter().copied().fold(informative[0], T::max);
        for (a, &m) in mask.iter_mut().zip(&informative) {
            if m == max {
                *a = T::ONE;
            }
        }
    }
    let mask = Tensor::new(vec![h, w], mask)?;
    let (sh, sw) = (image.shape()[1], image.shape()[2]);
    let up = nearest_upsample(&mask, sh, sw)?;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, &v) in up.data().iter().enumerate() {
        if v > T::ZERO {
            let (y, x) = (i / sw, i % sw);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
    }
    let crop = PixelBox::new(x0, y0, x1, y1);
    let zoomed = resize_region(image, crop, sh, sw)?;
    Ok(ZoomInResult {
        selected,
        informative: Tensor::new(vec![h, w], informative)?,
        threshold,
        mask,
        crop,
        zoomed,
        logits: None,
    })
}

/// Runs the network on a batch `inputs [N,C,S,S]` against the classes whose
/// attribute vectors are the rows of `class_attrs [J,K]`.
///
/// With `supervision`, the joint loss is added: the batch mean over images of
/// `cls + λ1·reg + λ3·cpt`, plus `λ2·ad` once. Prototype losses use the
/// original input only; the zoomed branch only adds its logits.
pub fn forward_batch<T: Float>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    inputs: &Tensor<T>,
    class_attrs: &Tensor<T>,
    groups: &[Vec<usize>],
    cfg: &LossConfig,
    supervision: Option<Supervision<'_>>,
) -> Result<BatchPass<T>> {
    if inputs.ndim() != 4 {
        return Err(Error::Shape(format!(
            "expected an [N,C,S,S] batch, got {:?}",
            inputs.shape()
        )));
    }
    if class_attrs.ndim() != 2 || class_attrs.shape()[1] != g.value(pv.p).shape()[0] {
        return Err(Error::Shape(format!(
            "class attribute matrix {:?} does not match K = {}",
            class_attrs.shape(),
            g.value(pv.p).shape()[0]
        )));
    }
    let n = inputs.shape()[0];
    let x = g.constant(inputs.clone());
    let f = encode_graph(g, pv, x)?;
    let global = g.mean_spatial(f)?;
    let phi_t = g.constant(transpose2(class_attrs));
    let embed = g.matmul(pv.v, phi_t)?;
    let base_logits = g.matmul(global, embed)?;

    let sim = g.proto_sim(f, pv.p)?;
    let (attrs, peaks) = g.max_spatial(sim)?;
    let (k, h, w) = {
        let s = g.value(sim).shape();
        (s[1], s[2], s[3])
    };

    let mut zoom = Vec::new();
    let mut zoom_logits = None;
    let mut logits = base_logits;
    if cfg.zoom && !groups.is_empty() {
        let plane = k * h * w;
        for i in 0..n {
            let image = inputs.slice_outer(i)?;
            zoom.push(zoom_from_maps(
                &g.value(sim).data()[i * plane..(i + 1) * plane],
                &g.value(attrs).data()[i * k..(i + 1) * k],
                h,
                w,
                groups,
                &image,
            )?);
        }
        for z in &zoom {
            for c in [z.crop.x0, z.crop.y0, z.crop.x1, z.crop.y1] {
                g.note_branch(c as u64);
            }
        }
        let crops: Vec<&Tensor<T>> = zoom.iter().map(|z| &z.zoomed).collect();
        let xz = g.constant(Tensor::stack(&crops)?);
        let fz = encode_graph(g, pv, xz)?;
        let gz = g.mean_spatial(fz)?;
        let zl = g.matmul(gz, embed)?;
        let j = g.value(zl).shape()[1];
        for (i, z) in zoom.iter_mut().enumerate() {
            z.logits = Some(Tensor::from_vec(
                g.value(zl).data()[i * j..(i + 1) * j].to_vec(),
            )?);
        }
        logits = g.add(base_logits, zl)?;
        zoom_logits = Some(zl);
    }

    let losses = match supervision {
        None => None,
        Some(sup) => Some(batch_losses(
            g,
            pv,
            class_attrs,
            groups,
            cfg,
            sup.targets,
            logits,
            sim,
            attrs,
            &peaks,
            (n, k, h, w),
        )?),
    };

    Ok(BatchPass {
        features: f,
        global,
        sim,
        attrs,
        peaks,
        base_logits,
        zoom_logits,
        logits,
        zoom,
        losses,
    })
}

#[allow(clippy::too_many_arguments)]
fn batch_losses<T: Float>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    class_attrs: &Tensor<T>,
    groups: &[Vec<usize>],
    cfg: &LossConfig,
    targets: &[usize],
    logits: Var,
    sim: Var,
    attrs: Var,
    peaks: &[usize],
    (n, k, h, w): (usize, usize, usize, usize),
) -> Result<LossVars> {
    let j = class_attrs.shape()[0];
    if targets.len() != n {
        return Err(Error::Shape(format!(
            "{} targets for a batch of {n}",
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= j) {
        return Err(Error::InvalidArgument(format!(
            "target class row {t} outside the {j} training classes"
        )));
    }
    let (lambda1, lambda2, lambda3) = cfg.effective_lambdas();
    let ce = g.softmax_ce(logits, targets)?;
    let cls = g.mean(ce);
    let mut total = cls;

    let mut reg = None;
    if cfg.reg {
        let mut tgt = Vec::with_capacity(n * k);
        for &t in targets {
            tgt.extend_from_slice(&class_attrs.data()[t * k..(t + 1) * k]);
        }
        let tgt = g.constant(Tensor::new(vec![n, k], tgt)?);
        let sq = g.mse(attrs, tgt)?;
        let r = g.scale(sq, 1.0 / n as f64);
        let weighted = g.scale(r, lambda1);
        total = g.add(total, weighted)?;
        reg = Some(r);
    }

    let mut ad = None;
    if cfg.ad && !groups.is_empty() {
        let a = g.group_l2(pv.p, groups)?;
        let weighted = g.scale(a, lambda2);
        total = g.add(total, weighted)?;
        ad = Some(a);
    }

    let mut cpt = None;
    if cfg.cpt {
        let plane = h * w;
        let mut dist = Vec::with_capacity(n * k * plane);
        for &peak in peaks {
            let (pi, pj) = ((peak / w) as f64, (peak % w) as f64);
            for i in 0..h {
                for jj in 0..w {
                    let (di, dj) = (i as f64 - pi, jj as f64 - pj);
                    dist.push(T::from_f64(di * di + dj * dj));
                }
            }
        }
        let dist = g.constant(Tensor::new(vec![n, k, h, w], dist)?);
        // Negative similarities are clamped: unclamped, the term is unbounded
        // below and training diverges.
        let positive = g.relu(sim);
        let weighted_maps = g.mul(positive, dist)?;
        let s = g.sum(weighted_maps);
        let c = g.scale(s, 1.0 / (n * k * plane) as f64);
        let weighted = g.scale(c, lambda3);
        total = g.add(total, weighted)?;
        cpt = Some(c);
    }

    Ok(LossVars {
        cls,
        reg,
        ad,
        cpt,
        total,
    })
}

/// Forward pass without gradients. Returns one trace per image.
pub fn infer<T: Float>(
    params: &ModelParams<T>,
    inputs: &Tensor<T>,
    class_attrs: &Tensor<T>,
    groups: &[Vec<usize>],
    cfg: &LossConfig,
) -> Result<Vec<ForwardTrace<T>>> {
    let mut g = Graph::new();
    let pv = params.attach(&mut g, false);
    let pass = forward_batch(&mut g, &pv, inputs, class_attrs, groups, cfg, None)?;
    (0..inputs.shape()[0]).map(|i| pass.trace(&g, i)).collect()
}
