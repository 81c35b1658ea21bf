//! The attribute prototype network.
//!
//! A small convolutional encoder produces a feature map `f(x)`. The global
//! branch pools it into `g(x)` and scores classes through the embedding `V`
//! and the class attribute vectors. The prototype branch compares each local
//! feature with one learned prototype per attribute, giving similarity maps
//! whose spatial maxima predict the attributes. The zoom-in branch crops the
//! input to the region where the most confident attribute of every group
//! fires and re-classifies the crop with the shared encoder and `V`.
//!
//! Internally feature maps are channel-major (`[C,H,W]`, batched `[N,C,H,W]`);
//! the per-image wrappers in this module expose `f(x)` as `[H,W,C]`.

mod checkpoint;
mod forward;
mod ops;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    forward_batch, group_argmax, infer, BatchPass, ForwardTrace, LossBreakdown, LossVars,
    Supervision, ZoomInResult,
};
pub use ops::{
    ad_loss, base_logits, cls_loss, cpt_loss, encode, forward, predict_attributes, reg_loss,
    similarity_maps, zoom_in,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv_output_size, Float, Graph, Tensor, Var};

/// Encoder channel progression of the default model: three stride-2 blocks.
pub const DEFAULT_CHANNELS: [usize; 4] = [3, 16, 32, 64];

/// Network shape. `channels[0]` is the input channel count and every further
/// entry adds one `conv3x3/stride 2/pad 1 + bias + relu` block. A single
/// entry means the input is already a feature map and the encoder is the
/// identity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub channels: Vec<usize>,
    pub input_size: usize,
    pub k: usize,
}

impl Architecture {
    pub fn new(channels: Vec<usize>, input_size: usize, k: usize) -> Result<Self> {
        if channels.is_empty() || channels.contains(&0) || input_size == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid architecture: channels {channels:?}, input size {input_size}, K {k}"
            )));
        }
        let arch = Architecture {
            channels,
            input_size,
            k,
        };
        arch.feature_size()?;
        Ok(arch)
    }

    pub fn blocks(&self) -> usize {
        self.channels.len() - 1
    }

    /// Feature channels `C`.
    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("non-empty")
    }

    /// Spatial size `H = W` of `f(x)`.
    pub fn feature_size(&self) -> Result<usize> {
        let mut s = self.input_size;
        for _ in 0..self.blocks() {
            s = conv_output_size(s, 3, 2, 1)?;
        }
        Ok(s)
    }
}

/// Toggles and weights of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_reg: f64,
    pub lambda_ad: f64,
    pub lambda_cpt: f64,
    pub reg: bool,
    pub ad: bool,
    pub cpt: bool,
    pub zoom: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_reg: 0.2,
            lambda_ad: 0.01,
            lambda_cpt: 0.2,
            reg: true,
            ad: true,
            cpt: true,
            zoom: true,
        }
    }
}

impl LossConfig {
    /// Global branch only.
    pub fn base_only() -> Self {
        LossConfig {
            reg: false,
            ad: false,
            cpt: false,
            zoom: false,
            ..Self::default()
        }
    }

    /// The weights actually applied: a disabled term weighs 0.
    pub fn effective_lambdas(&self) -> (f64, f64, f64) {
        (
            if self.reg { self.lambda_reg } else { 0.0 },
            if self.ad { self.lambda_ad } else { 0.0 },
            if self.cpt { self.lambda_cpt } else { 0.0 },
        )
    }
}

/// Trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Float = f32> {
    pub arch: Architecture,
    /// Per block `[C_out,C_in,3,3]`.
    pub conv_w: Vec<Tensor<T>>,
    /// Per block `[C_out]`.
    pub conv_b: Vec<Tensor<T>>,
    /// Visual-semantic embedding `[C,K]`.
    pub v: Tensor<T>,
    /// Attribute prototypes `[K,C]`, row `k` is `p_k`.
    pub p: Tensor<T>,
}

/// Graph handles of a [`ModelParams`] attached to a [`Graph`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub conv_w: Vec<Var>,
    pub conv_b: Vec<Var>,
    pub v: Var,
    pub p: Var,
}

impl ParamVars {
    /// Handles in [`ModelParams::tensors`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::with_capacity(2 * self.conv_w.len() + 2);
        for (w, b) in self.conv_w.iter().zip(&self.conv_b) {
            out.push(*w);
            out.push(*b);
        }
        out.push(self.v);
        out.push(self.p);
        out
    }
}

fn glorot<T: Float>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-a..=a))).collect();
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}

impl<T: Float> ModelParams<T> {
    /// Glorot-uniform weights, zero biases. Deterministic in `seed`.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv_w = Vec::with_capacity(arch.blocks());
        let mut conv_b = Vec::with_capacity(arch.blocks());
        for pair in arch.channels.windows(2) {
            let (cin, cout) = (pair[0], pair[1]);
            conv_w.push(glorot(&[cout, cin, 3, 3], cin * 9, cout * 9, &mut rng));
            conv_b.push(Tensor::zeros(&[cout]).expect("positive"));
        }
        let (c, k) = (arch.feature_channels(), arch.k);
        let v = glorot(&[c, k], c, k, &mut rng);
        let p = glorot(&[k, c], c, k, &mut rng);
        ModelParams {
            arch,
            conv_w,
            conv_b,
            v,
            p,
        }
    }

    /// All-zero parameters of the given shape.
    pub fn zeros(arch: Architecture) -> Self {
        let mut p = Self::init(arch, 0);
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::ZERO);
        }
        p
    }

    /// Named tensors in a fixed order: per block weight then bias, `V`, `P`.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.conv_w.len() + 2);
        for (i, (w, b)) in self.conv_w.iter().zip(&self.conv_b).enumerate() {
            out.push((format!("enc{i}.w"), w));
            out.push((format!("enc{i}.b"), b));
        }
        out.push(("V".to_string(), &self.v));
        out.push(("P".to_string(), &self.p));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::with_capacity(2 * self.conv_w.len() + 2);
        for (w, b) in self.conv_w.iter_mut().zip(self.conv_b.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.v);
        out.push(&mut self.p);
        out
    }

    pub fn attach(&self, g: &mut Graph<T>, trainable: bool) -> ParamVars {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        ParamVars {
            conv_w: self.conv_w.iter().map(&mut leaf).collect(),
            conv_b: self.conv_b.iter().map(&mut leaf).collect(),
            v: leaf(&self.v),
            p: leaf(&self.p),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.all_finite())
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            conv_w: self.conv_w.iter().map(Tensor::cast).collect(),
            conv_b: self.conv_b.iter().map(Tensor::cast).collect(),
            v: self.v.cast(),
            p: self.p.cast(),
        }
    }
}

/// `[H,W,C]` -> `[C,H,W]`.
pub fn hwc_to_chw<T: Float>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected [H,W,C], got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for ch in 0..c {
        for p in 0..h * w {
            out.push(src[p * c + ch]);
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// `[C,H,W]` -> `[H,W,C]`.
pub fn chw_to_hwc<T: Float>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for p in 0..h * w {
        for ch in 0..c {
            out.push(src[ch * h * w + p]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

pub(crate) fn transpose2<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for j in 0..c {
        for i in 0..r {
            out.push(src[i * c + j]);
        }
    }
    Tensor::new(vec![c, r], out).expect("same size")
}
