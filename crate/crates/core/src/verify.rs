//! Finite-difference verification of every differentiable primitive and of
//! the joint loss on a micro-model. Shared by the `gradcheck` command and the
//! test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{forward_batch, Architecture, LossConfig, ModelParams, ParamVars, Supervision};
use crate::tensor::{grad_check_many, Graph, Tensor, Var};

/// Central-difference step.
pub const EPS: f64 = 1e-6;

/// Names of the primitives covered by [`check_primitive`].
pub const PRIMITIVES: [&str; 19] = [
    "conv2d",
    "add_channel_bias",
    "relu",
    "matmul",
    "add",
    "sub",
    "mul",
    "square",
    "scale",
    "sum",
    "mean",
    "sum_rows",
    "mean_spatial",
    "max_spatial",
    "softmax_ce",
    "dot",
    "mse",
    "proto_sim",
    "group_l2",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub max_relative_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl CheckResult {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_relative_error < tol
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .expect("positive dims")
}

/// Reduces `out` to a scalar through fixed random weights so that every
/// output component influences the check.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(uniform(&shape, -1.0, 1.0, &mut rng));
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

fn accumulate(acc: &mut CheckResult, o: crate::tensor::GradCheckOutcome) {
    acc.trials += 1;
    acc.checked += o.checked;
    acc.skipped += o.skipped;
    if o.max_relative_error > acc.max_relative_error || o.max_relative_error.is_nan() {
        acc.max_relative_error = o.max_relative_error;
    }
}

fn empty(name: &str) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        trials: 0,
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
    }
}

/// One random trial of primitive `name`.
fn primitive_trial(name: &str, rng: &mut ChaCha8Rng) -> Result<crate::tensor::GradCheckOutcome> {
    let s: u64 = rng.gen();
    let r = |shape: &[usize], rng: &mut ChaCha8Rng| uniform(shape, -1.0, 1.0, rng);
    macro_rules! unary {
        ($shape:expr, |$g:ident, $x:ident| $body:expr) => {{
            let pt = r(&$shape, rng);
            grad_check_many(
                |$g: &mut Graph<f64>, v: &[Var]| {
                    let $x = v[0];
                    let out = $body;
                    project($g, out, s)
                },
                &[pt],
                EPS,
            )
        }};
    }
    macro_rules! binary {
        ($sa:expr, $sb:expr, |$g:ident, $a:ident, $b:ident| $body:expr) => {{
            let pts = [r(&$sa, rng), r(&$sb, rng)];
            grad_check_many(
                |$g: &mut Graph<f64>, v: &[Var]| {
                    let ($a, $b) = (v[0], v[1]);
                    let out = $body;
                    project($g, out, s)
                },
                &pts,
                EPS,
            )
        }};
    }
    match name {
        "conv2d" => {
            let (stride, pad) = if rng.gen() { (2, 1) } else { (1, 0) };
            binary!([2, 2, 5, 5], [3, 2, 3, 3], |g, x, w| g
                .conv2d(x, w, stride, pad)?)
        }
        "add_channel_bias" => binary!([2, 3, 2, 2], [3], |g, x, b| g.add_channel_bias(x, b)?),
        "relu" => unary!([3, 4], |g, x| g.relu(x)),
        "matmul" => binary!([3, 4], [4, 2], |g, a, b| g.matmul(a, b)?),
        "add" => binary!([2, 3], [2, 3], |g, a, b| g.add(a, b)?),
        "sub" => binary!([2, 3], [2, 3], |g, a, b| g.sub(a, b)?),
        "mul" => binary!([2, 3], [2, 3], |g, a, b| g.mul(a, b)?),
        "square" => unary!([2, 3], |g, x| g.square(x)),
        "scale" => unary!([2, 3], |g, x| g.scale(x, -1.7)),
        "sum" => unary!([2, 3], |g, x| g.sum(x)),
        "mean" => unary!([2, 3], |g, x| g.mean(x)),
        "sum_rows" => unary!([3, 4], |g, x| g.sum_rows(x)),
        "mean_spatial" => unary!([2, 3, 2, 3], |g, x| g.mean_spatial(x)?),
        "max_spatial" => unary!([2, 3, 3, 3], |g, x| g.max_spatial(x)?.0),
        "softmax_ce" => {
            let targets: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
            unary!([3, 4], |g, x| g.softmax_ce(x, &targets)?)
        }
        "dot" => binary!([5], [5], |g, a, b| g.dot(a, b)?),
        "mse" => binary!([2, 3], [2, 3], |g, a, b| g.mse(a, b)?),
        "proto_sim" => binary!([2, 3, 2, 2], [4, 3], |g, f, p| g.proto_sim(f, p)?),
        "group_l2" => {
            let groups = vec![vec![0, 2], vec![1], vec![3, 4]];
            unary!([5, 3], |g, p| g.group_l2(p, &groups)?)
        }
        other => Err(crate::error::Error::InvalidArgument(format!(
            "unknown primitive `{other}`"
        ))),
    }
}

/// `trials` random checks of one primitive.
pub fn check_primitive(name: &str, trials: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = empty(name);
    for _ in 0..trials {
        accumulate(&mut acc, primitive_trial(name, &mut rng)?);
    }
    Ok(acc)
}

/// Tiny network and batch: channels `[3,4,4]` on `12×12` inputs, so `C = 4`
/// and `H = W = 3`; `K = 4` attributes in `L = 2` groups; 2 classes.
#[derive(Clone, Debug)]
pub struct MicroModel {
    pub params: ModelParams<f64>,
    pub inputs: Tensor<f64>,
    pub class_attrs: Tensor<f64>,
    pub groups: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
}

impl MicroModel {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture::new(vec![3, 4, 4], 12, 4).expect("valid micro architecture");
        let params = ModelParams::init(arch, rng.gen());
        MicroModel {
            params,
            inputs: uniform(&[2, 3, 12, 12], 0.0, 1.0, &mut rng),
            class_attrs: uniform(&[2, 4], 0.0, 1.0, &mut rng),
            groups: vec![vec![0, 1], vec![2, 3]],
            targets: vec![0, 1],
        }
    }

    /// Parameter tensors in [`ModelParams::tensors`] order.
    pub fn points(&self) -> Vec<Tensor<f64>> {
        self.params
            .tensors()
            .into_iter()
            .map(|(_, t)| t.clone())
            .collect()
    }

    /// Handles for leaves created from [`MicroModel::points`].
    pub fn param_vars(&self, vars: &[Var]) -> ParamVars {
        let blocks = self.params.arch.blocks();
        ParamVars {
            conv_w: (0..blocks).map(|b| vars[2 * b]).collect(),
            conv_b: (0..blocks).map(|b| vars[2 * b + 1]).collect(),
            v: vars[2 * blocks],
            p: vars[2 * blocks + 1],
        }
    }

    /// The batch's joint loss under `cfg`.
    pub fn loss(&self, g: &mut Graph<f64>, vars: &[Var], cfg: &LossConfig) -> Result<Var> {
        let pv = self.param_vars(vars);
        let pass = forward_batch(
            g,
            &pv,
            &self.inputs,
            &self.class_attrs,
            &self.groups,
            cfg,
            Some(Supervision {
                targets: &self.targets,
            }),
        )?;
        Ok(pass.losses.expect("supervised pass").total)
    }
}

/// `trials` checks of the full joint loss, each on a fresh micro-model.
pub fn check_full_loss(trials: usize, seed: u64, cfg: &LossConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = empty("joint_loss");
    for _ in 0..trials {
        let m = MicroModel::new(rng.gen());
        accumulate(
            &mut acc,
            grad_check_many(|g, v| m.loss(g, v, cfg), &m.points(), EPS)?,
        );
    }
    Ok(acc)
}

/// Every primitive plus the full loss with all terms enabled.
pub fn gradient_suite(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::with_capacity(PRIMITIVES.len() + 1);
    for (i, name) in PRIMITIVES.iter().enumerate() {
        out.push(check_primitive(name, trials, seed.wrapping_add(i as u64))?);
    }
    out.push(check_full_loss(trials, seed, &LossConfig::default())?);
    Ok(out)
}
