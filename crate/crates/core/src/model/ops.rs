//! Single-image entry points with `f(x)` laid out as `[H,W,C]`.

use super::forward::{
    forward_batch, zoom_from_maps, ForwardTrace, LossBreakdown, Supervision, ZoomInResult,
};
use super::{hwc_to_chw, transpose2, LossConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Tensor};

fn check_image<T: Float>(image: &Tensor<T>, params: &ModelParams<T>) -> Result<()> {
    let s = image.shape();
    let arch = &params.arch;
    if s.len() != 3 || s[0] != arch.channels[0] {
        return Err(Error::Shape(format!(
            "model expects {} input channels, image has shape {s:?}",
            arch.channels[0]
        )));
    }
    if s[1] != arch.input_size || s[2] != arch.input_size {
        return Err(Error::Shape(format!(
            "model expects {0}x{0} inputs, got {1}x{2}",
            arch.input_size, s[1], s[2]
        )));
    }
    Ok(())
}

fn batch_of_one<T: Float>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshape(shape)
}

/// Feature map `f(x)` of one `[C,S,S]` image as `[H,W,C]`.
pub fn encode<T: Float>(image: &Tensor<T>, params: &ModelParams<T>) -> Result<Tensor<T>> {
    check_image(image, params)?;
    let mut g = Graph::new();
    let pv = params.attach(&mut g, false);
    let x = g.constant(batch_of_one(image)?);
    let f = super::forward::encode_graph(&mut g, &pv, x)?;
    super::chw_to_hwc(&g.value(f).slice_outer(0)?)
}

/// `s_j = gᵀ V φ(y_j)` for every class vector in `phi`.
pub fn base_logits<T: Float>(
    global: &Tensor<T>,
    v: &Tensor<T>,
    phi: &[Vec<T>],
) -> Result<Tensor<T>> {
    if phi.is_empty() {
        return Err(Error::Empty("class set".into()));
    }
    let k = v.shape()[1];
    if v.ndim() != 2 || global.numel() != v.shape()[0] {
        return Err(Error::Shape(format!(
            "g of length {} incompatible with V {:?}",
            global.numel(),
            v.shape()
        )));
    }
    let mut rows = Vec::with_capacity(phi.len() * k);
    for p in phi {
        if p.len() != k {
            return Err(Error::Shape(format!(
                "class vector of length {} but K = {k}",
                p.len()
            )));
        }
        rows.extend_from_slice(p);
    }
    let mut g = Graph::new();
    let gv = g.constant(global.clone().reshape(vec![1, global.numel()])?);
    let vv = g.constant(v.clone());
    let pt = g.constant(transpose2(&Tensor::new(vec![phi.len(), k], rows)?));
    let gv = g.matmul(gv, vv)?;
    let out = g.matmul(gv, pt)?;
    Tensor::from_vec(g.value(out).data().to_vec())
}

/// Cross-entropy of `true_class` against the seen classes only. `logits[i]`
/// scores `classes[i]`; classes outside `seen` are ignored.
pub fn cls_loss<T: Float>(
    logits: &[T],
    classes: &[u32],
    true_class: u32,
    seen: &[u32],
) -> Result<T> {
    if logits.len() != classes.len() {
        return Err(Error::Shape(format!(
            "{} logits for {} classes",
            logits.len(),
            classes.len()
        )));
    }
    let target = seen
        .iter()
        .position(|&c| c == true_class)
        .ok_or_else(|| Error::InvalidArgument(format!("class {true_class} is not a seen class")))?;
    let picked = seen
        .iter()
        .map(|c| {
            classes
                .iter()
                .position(|x| x == c)
                .map(|i| logits[i])
                .ok_or_else(|| Error::InvalidArgument(format!("no logit for seen class {c}")))
        })
        .collect::<Result<Vec<T>>>()?;
    let mut g = Graph::new();
    let z = g.constant(Tensor::new(vec![1, picked.len()], picked)?);
    let ce = g.softmax_ce(z, &[target])?;
    Ok(g.value(ce).data()[0])
}

/// `M[k,i,j] = <p_k, f[i,j,:]>` for `f [H,W,C]` and `P [K,C]`.
pub fn similarity_maps<T: Float>(f: &Tensor<T>, p: &Tensor<T>) -> Result<Tensor<T>> {
    let chw = hwc_to_chw(f)?;
    let mut g = Graph::new();
    let fv = g.constant(batch_of_one(&chw)?);
    let pv = g.constant(p.clone());
    let m = g.proto_sim(fv, pv)?;
    g.value(m).slice_outer(0)
}

/// Spatial maximum of every map and the row-major-first `(i, j)` where it occurs.
pub fn predict_attributes<T: Float>(m: &Tensor<T>) -> Result<(Tensor<T>, Vec<(usize, usize)>)> {
    if m.ndim() != 3 {
        return Err(Error::Shape(format!(
            "expected [K,H,W] maps, got {:?}",
            m.shape()
        )));
    }
    let w = m.shape()[2];
    let mut g = Graph::new();
    let mv = g.constant(m.clone());
    let (a, peaks) = g.max_spatial(mv)?;
    Ok((
        g.value(a).clone(),
        peaks.into_iter().map(|p| (p / w, p % w)).collect(),
    ))
}

/// `‖â − φ‖²` (sum of squares).
pub fn reg_loss<T: Float>(attrs: &Tensor<T>, phi: &Tensor<T>) -> Result<T> {
    let mut g = Graph::new();
    let a = g.constant(attrs.clone());
    let b = g.constant(phi.clone());
    let l = g.mse(a, b)?;
    Ok(g.value(l).data()[0])
}

/// `Σ_c Σ_l ‖P[S_l, c]‖₂`; attributes outside every group do not contribute.
pub fn ad_loss<T: Float>(p: &Tensor<T>, groups: &[Vec<usize>]) -> Result<T> {
    let mut g = Graph::new();
    let pv = g.constant(p.clone());
    let l = g.group_l2(pv, groups)?;
    Ok(g.value(l).data()[0])
}

/// `(1/KHW) Σ_k Σ_ij max(M[k,i,j], 0)·((i−ĩ_k)² + (j−j̃_k)²)`.
pub fn cpt_loss<T: Float>(m: &Tensor<T>, peaks: &[(usize, usize)]) -> Result<T> {
    if m.ndim() != 3 || peaks.len() != m.shape()[0] {
        return Err(Error::Shape(format!(
            "{} peaks for maps of shape {:?}",
            peaks.len(),
            m.shape()
        )));
    }
    let (h, w) = (m.shape()[1], m.shape()[2]);
    let mut dist = Vec::with_capacity(m.numel());
    for &(pi, pj) in peaks {
        for i in 0..h {
            for j in 0..w {
                let (di, dj) = (i as f64 - pi as f64, j as f64 - pj as f64);
                dist.push(T::from_f64(di * di + dj * dj));
            }
        }
    }
    let mut g = Graph::new();
    let raw = g.constant(m.clone());
    let mv = g.relu(raw);
    let dv = g.constant(Tensor::new(m.shape().to_vec(), dist)?);
    let prod = g.mul(mv, dv)?;
    let s = g.sum(prod);
    let l = g.scale(s, 1.0 / m.numel() as f64);
    Ok(g.value(l).data()[0])
}

/// Zoom-in crop of `image [C,S,S]` from maps `M [K,H,W]` and predictions `â`.
pub fn zoom_in<T: Float>(
    m: &Tensor<T>,
    attrs: &Tensor<T>,
    groups: &[Vec<usize>],
    image: &Tensor<T>,
) -> Result<ZoomInResult<T>> {
    if m.ndim() != 3 || attrs.numel() != m.shape()[0] || image.ndim() != 3 {
        return Err(Error::Shape(format!(
            "zoom_in: maps {:?}, attributes {:?}, image {:?}",
            m.shape(),
            attrs.shape(),
            image.shape()
        )));
    }
    zoom_from_maps(
        m.data(),
        attrs.data(),
        m.shape()[1],
        m.shape()[2],
        groups,
        image,
    )
}

/// Full forward pass and joint loss for one image of class row `target`.
pub fn forward<T: Float>(
    image: &Tensor<T>,
    params: &ModelParams<T>,
    class_attrs: &Tensor<T>,
    target: usize,
    groups: &[Vec<usize>],
    cfg: &LossConfig,
) -> Result<(ForwardTrace<T>, LossBreakdown)> {
    check_image(image, params)?;
    let mut g = Graph::new();
    let pv = params.attach(&mut g, false);
    let targets = [target];
    let pass = forward_batch(
        &mut g,
        &pv,
        &batch_of_one(image)?,
        class_attrs,
        groups,
        cfg,
        Some(Supervision { targets: &targets }),
    )?;
    let losses = pass.losses.expect("supervised").breakdown(&g, cfg);
    Ok((pass.trace(&g, 0)?, losses))
}
