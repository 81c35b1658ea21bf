//! Tape of differentiable operations and its reverse sweep.

use super::conv::{conv_backward, conv_forward, ConvGeom};
use super::{gemm, Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    AddChannelBias {
        x: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Square {
        x: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumRows {
        x: Var,
    },
    MeanSpatial {
        x: Var,
        plane: usize,
    },
    MaxSpatial {
        x: Var,
        plane: usize,
        argmax: Vec<usize>,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
    },
    Dot {
        a: Var,
        b: Var,
    },
    ProtoSim {
        f: Var,
        p: Var,
        n: usize,
        c: usize,
        k: usize,
        hw: usize,
    },
    GroupL2 {
        p: Var,
        groups: Vec<Vec<usize>>,
        c: usize,
        norms: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    trainable: bool,
    grad: Option<Tensor<T>>,
}

/// Records differentiable operations in execution order.
///
/// A graph supports exactly one [`backward`](Graph::backward) call; build a
/// fresh graph for every optimisation step.
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    track_branches: bool,
    branch_hash: u64,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
            track_branches: false,
            branch_hash: 0xcbf2_9ce4_8422_2325,
        }
    }

    /// A graph that fingerprints every discrete decision taken during the
    /// forward pass (relu masks, argmax picks, explicit notes). Used by the
    /// finite-difference checker to detect probes that straddle a kink.
    pub fn with_branch_tracking() -> Self {
        let mut g = Self::new();
        g.track_branches = true;
        g
    }

    pub fn branch_signature(&self) -> u64 {
        self.branch_hash
    }

    /// Mixes an externally taken discrete decision into the branch signature.
    pub fn note_branch(&mut self, token: u64) {
        if self.track_branches {
            for byte in token.to_le_bytes() {
                self.branch_hash ^= byte as u64;
                self.branch_hash = self.branch_hash.wrapping_mul(FNV_PRIME);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].trainable = true;
        v
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass' loss w.r.t. `v`, when it reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- ops

    /// 2-D convolution of an NCHW batch with a `[C_out,C_in,k,k]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        let (out, cols) = conv_forward(&geom, self.data(x), self.data(w));
        let requires = self.requires(x) || self.requires(w);
        let value = Tensor::new(vec![geom.n, geom.c_out, geom.h_out, geom.w_out], out)?;
        let cols = if self.requires(w) { cols } else { Vec::new() };
        Ok(self.push(value, Op::Conv2d { x, w, geom, cols }, requires))
    }

    /// Adds `b[c]` to every element of channel `c` of an `[N,C,...]` tensor.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(b) != [shape[1]] {
            return Err(Error::Shape(format!(
                "bias of shape {:?} does not match channels of {:?}",
                self.shape(b),
                shape
            )));
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let bias = self.data(b);
        let data: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[(i / inner) % c])
            .collect();
        let requires = self.requires(x) || self.requires(b);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::AddChannelBias { x, b },
            requires,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::ZERO { v } else { T::ZERO });
        if self.track_branches {
            let mut h = 0u64;
            for (i, &v) in self.data(x).iter().enumerate() {
                if v > T::ZERO {
                    h = h.wrapping_mul(31).wrapping_add(i as u64 + 1);
                }
            }
            self.note_branch(h);
        }
        let requires = self.requires(x);
        self.push(value, Op::Relu { x }, requires)
    }

    /// `[m,k] · [k,n]` matrix product; the linear layer of the model.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!(
                "matmul: cannot multiply {sa:?} by {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            false,
            self.data(b),
            false,
            &mut out,
            false,
        );
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, m, k, n },
            requires,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(
            Tensor::new(self.shape(a).to_vec(), data)?,
            Op::Add { a, b },
            requires,
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(
            Tensor::new(self.shape(a).to_vec(), data)?,
            Op::Sub { a, b },
            requires,
        ))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(
            Tensor::new(self.shape(a).to_vec(), data)?,
            Op::Mul { a, b },
            requires,
        ))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let requires = self.requires(x);
        self.push(value, Op::Square { x }, requires)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64(s);
        let value = self.value(x).map(|v| v * s);
        let requires = self.requires(x);
        self.push(value, Op::Scale { x, s }, requires)
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        let requires = self.requires(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, requires)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel());
        let s: T = self.data(x).iter().copied().sum();
        let requires = self.requires(x);
        self.push(Tensor::scalar(s / n), Op::Mean { x }, requires)
    }

    /// Sums everything but the leading axis: `[N,...] -> [N]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let rows = self.shape(x)[0];
        let inner = self.value(x).numel() / rows;
        let data = self
            .data(x)
            .chunks(inner)
            .map(|c| c.iter().copied().sum())
            .collect();
        let requires = self.requires(x);
        let value = Tensor::new(vec![rows], data).expect("rows > 0");
        self.push(value, Op::SumRows { x }, requires)
    }

    fn spatial_split(&self, x: Var, op: &str) -> Result<(Vec<usize>, usize)> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return Err(Error::Shape(format!(
                "{op} needs at least 2 dims, got {shape:?}"
            )));
        }
        let nd = shape.len();
        let plane = shape[nd - 2] * shape[nd - 1];
        let outer = if nd == 2 {
            vec![1]
        } else {
            shape[..nd - 2].to_vec()
        };
        Ok((outer, plane))
    }

    /// Mean over the two trailing (spatial) axes.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let (outer, plane) = self.spatial_split(x, "mean_spatial")?;
        let denom = T::from_usize(plane);
        let data = self
            .data(x)
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() / denom)
            .collect();
        let requires = self.requires(x);
        Ok(self.push(
            Tensor::new(outer, data)?,
            Op::MeanSpatial { x, plane },
            requires,
        ))
    }

    /// Maximum over the two trailing axes. Also returns, per slice, the flat
    /// spatial index of the first maximum in row-major order.
    pub fn max_spatial(&mut self, x: Var) -> Result<(Var, Vec<usize>)> {
        let (outer, plane) = self.spatial_split(x, "max_spatial")?;
        let mut argmax = Vec::with_capacity(self.value(x).numel() / plane);
        let mut data = Vec::with_capacity(argmax.capacity());
        for chunk in self.data(x).chunks(plane) {
            let idx = first_argmax(chunk);
            argmax.push(idx);
            data.push(chunk[idx]);
        }
        if self.track_branches {
            for &a in &argmax {
                self.note_branch(a as u64);
            }
        }
        let requires = self.requires(x);
        let value = Tensor::new(outer, data)?;
        let v = self.push(
            value,
            Op::MaxSpatial {
                x,
                plane,
                argmax: argmax.clone(),
            },
            requires,
        );
        Ok((v, argmax))
    }

    /// Per-row softmax cross-entropy: `[N,J]` logits, `N` targets -> `[N]` losses.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::Shape(format!(
                "softmax_ce: logits {shape:?} do not match {} targets",
                targets.len()
            )));
        }
        let (n, j) = (shape[0], shape[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= j) {
            return Err(Error::InvalidArgument(format!(
                "softmax_ce: target {t} outside {j} classes"
            )));
        }
        let mut probs = vec![T::ZERO; n * j];
        let mut losses = Vec::with_capacity(n);
        for (row, (z, p)) in self
            .data(logits)
            .chunks(j)
            .zip(probs.chunks_mut(j))
            .enumerate()
        {
            let zmax = z.iter().copied().fold(z[0], T::max);
            let mut total = T::ZERO;
            for (pi, &zi) in p.iter_mut().zip(z) {
                *pi = (zi - zmax).exp();
                total += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= total;
            }
            losses.push(total.ln() + zmax - z[targets[row]]);
        }
        let requires = self.requires(logits);
        let value = Tensor::new(vec![n], losses)?;
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            requires,
        ))
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let s: T = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .sum();
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::scalar(s), Op::Dot { a, b }, requires))
    }

    /// Sum of squared differences, as a `[1]` scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.sum(sq))
    }

    /// Prototype similarity maps: `f [N,C,H,W]`, `p [K,C]` -> `[N,K,H,W]` with
    /// `out[n,k,i,j] = <p_k, f[n,:,i,j]>`.
    pub fn proto_sim(&mut self, f: Var, p: Var) -> Result<Var> {
        let (sf, sp) = (self.shape(f), self.shape(p));
        if sf.len() != 4 || sp.len() != 2 || sf[1] != sp[1] {
            return Err(Error::Shape(format!(
                "proto_sim: features {sf:?} incompatible with prototypes {sp:?}"
            )));
        }
        let (n, c, h, w, k) = (sf[0], sf[1], sf[2], sf[3], sp[0]);
        let hw = h * w;
        let mut out = vec![T::ZERO; n * k * hw];
        let (fd, pd) = (self.data(f), self.data(p));
        for i in 0..n {
            gemm(
                k,
                c,
                hw,
                pd,
                false,
                &fd[i * c * hw..(i + 1) * c * hw],
                false,
                &mut out[i * k * hw..(i + 1) * k * hw],
                false,
            );
        }
        let requires = self.requires(f) || self.requires(p);
        let value = Tensor::new(vec![n, k, h, w], out)?;
        Ok(self.push(value, Op::ProtoSim { f, p, n, c, k, hw }, requires))
    }

    /// Group-sparsity penalty over prototype rows: `Σ_c Σ_l ‖P[S_l, c]‖₂`.
    pub fn group_l2(&mut self, p: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let sp = self.shape(p);
        if sp.len() != 2 {
            return Err(Error::Shape(format!("group_l2 expects [K,C], got {sp:?}")));
        }
        let (k, c) = (sp[0], sp[1]);
        let mut seen = vec![false; k];
        for (l, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "attribute group {l} is empty"
                )));
            }
            for &a in group {
                if a >= k {
                    return Err(Error::InvalidArgument(format!(
                        "group {l} references attribute {a} but K = {k}"
                    )));
                }
                if std::mem::replace(&mut seen[a], true) {
                    return Err(Error::InvalidArgument(format!(
                        "attribute {a} appears in more than one group"
                    )));
                }
            }
        }
        let pd = self.data(p);
        let mut norms = Vec::with_capacity(groups.len() * c);
        let mut total = T::ZERO;
        for group in groups {
            for ch in 0..c {
                let sq: T = group.iter().map(|&a| pd[a * c + ch] * pd[a * c + ch]).sum();
                let nrm = sq.sqrt();
                norms.push(nrm);
                total += nrm;
            }
        }
        let requires = self.requires(p);
        Ok(self.push(
            Tensor::scalar(total),
            Op::GroupL2 {
                p,
                groups: groups.to_vec(),
                c,
                norms,
            },
            requires,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Every trainable leaf ends up with a
    /// gradient (zeros when the loss does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::new(shape, g)?);
        }
        for node in self
            .nodes
            .iter_mut()
            .filter(|n| n.trainable && n.grad.is_none())
        {
            node.grad = Some(Tensor::zeros(node.value.shape())?);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.requires(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, geom, cols } => {
                if self.requires(*w) {
                    let (dw, dx) = conv_backward(geom, cols, self.data(*w), g, self.requires(*x));
                    self.accumulate(grads, *w, dw);
                    if let Some(dx) = dx {
                        self.accumulate(grads, *x, dx);
                    }
                } else if self.requires(*x) {
                    // Input-only gradient without saved patches: rebuild them.
                    let (_, cols) = conv_forward(geom, self.data(*x), self.data(*w));
                    let (_, dx) = conv_backward(geom, &cols, self.data(*w), g, true);
                    self.accumulate(grads, *x, dx.expect("requested"));
                }
            }
            Op::AddChannelBias { x, b } => {
                let shape = self.shape(*x);
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                if self.requires(*b) {
                    let mut db = vec![T::ZERO; c];
                    for (idx, &gv) in g.iter().enumerate() {
                        db[(idx / inner) % c] += gv;
                    }
                    self.accumulate(grads, *b, db);
                }
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::Relu { x } => {
                let dx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&gv, &xv)| if xv > T::ZERO { gv } else { T::ZERO })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.requires(*a) {
                    let mut da = vec![T::ZERO; m * k];
                    gemm(m, n, k, g, false, self.data(*b), true, &mut da, false);
                    self.accumulate(grads, *a, da);
                }
                if self.requires(*b) {
                    let mut db = vec![T::ZERO; k * n];
                    gemm(k, m, n, self.data(*a), true, g, false, &mut db, false);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul { a, b } => {
                let da = g
                    .iter()
                    .zip(self.data(*b))
                    .map(|(&gv, &bv)| gv * bv)
                    .collect();
                let db = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&gv, &av)| gv * av)
                    .collect();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Square { x } => {
                let two = T::from_f64(2.0);
                let dx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&gv, &xv)| two * xv * gv)
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Scale { x, s } => {
                let dx = g.iter().map(|&gv| gv * *s).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / T::from_usize(n); n]);
            }
            Op::SumRows { x } => {
                let n = self.value(*x).numel();
                let inner = n / g.len();
                let dx = (0..n).map(|idx| g[idx / inner]).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::MeanSpatial { x, plane } => {
                let denom = T::from_usize(*plane);
                let n = self.value(*x).numel();
                let dx = (0..n).map(|idx| g[idx / plane] / denom).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::MaxSpatial { x, plane, argmax } => {
                let mut dx = vec![T::ZERO; self.value(*x).numel()];
                for (slice, (&a, &gv)) in argmax.iter().zip(g).enumerate() {
                    dx[slice * plane + a] = gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxCe {
                logits,
                probs,
                targets,
            } => {
                let j = probs.len() / targets.len();
                let mut dz = probs.clone();
                for (row, &t) in targets.iter().enumerate() {
                    dz[row * j + t] -= T::ONE;
                    for v in &mut dz[row * j..(row + 1) * j] {
                        *v *= g[row];
                    }
                }
                self.accumulate(grads, *logits, dz);
            }
            Op::Dot { a, b } => {
                let da = self.data(*b).iter().map(|&v| v * g[0]).collect();
                let db = self.data(*a).iter().map(|&v| v * g[0]).collect();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::ProtoSim { f, p, n, c, k, hw } => {
                let (n, c, k, hw) = (*n, *c, *k, *hw);
                if self.requires(*p) {
                    let mut dp = vec![T::ZERO; k * c];
                    let fd = self.data(*f);
                    for i in 0..n {
                        gemm(
                            k,
                            hw,
                            c,
                            &g[i * k * hw..(i + 1) * k * hw],
                            false,
                            &fd[i * c * hw..(i + 1) * c * hw],
                            true,
                            &mut dp,
                            true,
                        );
                    }
                    self.accumulate(grads, *p, dp);
                }
                if self.requires(*f) {
                    let mut df = vec![T::ZERO; n * c * hw];
                    let pd = self.data(*p);
                    for i in 0..n {
                        gemm(
                            c,
                            k,
                            hw,
                            pd,
                            true,
                            &g[i * k * hw..(i + 1) * k * hw],
                            false,
                            &mut df[i * c * hw..(i + 1) * c * hw],
                            false,
                        );
                    }
                    self.accumulate(grads, *f, df);
                }
            }
            Op::GroupL2 {
                p,
                groups,
                c,
                norms,
            } => {
                let c = *c;
                let pd = self.data(*p);
                let mut dp = vec![T::ZERO; pd.len()];
                for (l, group) in groups.iter().enumerate() {
                    for ch in 0..c {
                        let nrm = norms[l * c + ch];
                        if nrm > T::ZERO {
                            for &a in group {
                                dp[a * c + ch] = g[0] * pd[a * c + ch] / nrm;
                            }
                        }
                    }
                }
                self.accumulate(grads, *p, dp);
            }
        }
    }
}

/// Index of the first maximum in scan order.
pub(crate) fn first_argmax<T: Float>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[-1.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_ce_two_equal_logits_is_ln2() {
        let mut g = Graph::new();
        let z = g.constant(t(&[1, 2], &[0.3, 0.3]));
        let l = g.softmax_ce(z, &[0]).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn mse_is_sum_of_squares() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[1.0, 4.0]));
        let l = g.mse(a, b).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 4.0);
    }

    #[test]
    fn max_spatial_first_occurrence_tie_break() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2, 2], &[1.0, 1.0, 1.0, 1.0, 0.2, 0.5, 0.1, 0.5]));
        let (m, arg) = g.max_spatial(x).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, 0.5]);
        assert_eq!(arg, vec![0, 1]);
    }

    #[test]
    fn backward_runs_once_and_fills_trainable_leaves() {
        let mut g = Graph::new();
        let a = g.param(t(&[1], &[3.0]));
        let unused = g.param(t(&[2], &[1.0, 1.0]));
        let sq = g.square(a);
        let l = g.sum(sq);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[6.0]);
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0]);
        assert!(matches!(g.backward(l), Err(Error::GraphConsumed)));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let a = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.square(a);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[5.0, 7.0]));
        let d = g.dot(a, c).unwrap();
        g.backward(d).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[5.0, 7.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn conv_channel_mismatch_is_descriptive() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]).unwrap());
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]).unwrap());
        let err = g.conv2d(x, w, 1, 0).unwrap_err().to_string();
        assert!(err.contains("channel mismatch"), "{err}");
    }

    #[test]
    fn group_l2_validates_groups() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::zeros(&[3, 2]).unwrap());
        assert!(g.group_l2(p, &[vec![]]).is_err());
        assert!(g.group_l2(p, &[vec![0, 1], vec![1]]).is_err());
        assert!(g.group_l2(p, &[vec![5]]).is_err());
    }
}
