//! Backbone + task-head networks with hand-written forward/backward passes.
//!
//! A [`Network`] is an MLP backbone `f(x; B)` producing features `z`, followed
//! by a head `g(z; v)` producing logits `q`. The two-layer linear model
//! `z = Bx, q = vᵀz` is the special case built by
//! [`Network::linear_two_layer`]: one bias-free linear backbone layer and a
//! bias-free scalar head.
//!
//! Parameters flatten layer by layer, weights row-major then bias. Every
//! Jacobian and gradient vector in the crate uses that order.

mod checkpoint;

pub use checkpoint::{Architecture, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::numkernel::{argmax, log_softmax, softmax, Matrix, RngState};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

impl LossKind {
    /// Per-sample loss against a target row.
    pub fn value(self, q: &[f64], target: &[f64]) -> f64 {
        match self {
            LossKind::Mse => 0.5 * q.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
            LossKind::CrossEntropy => {
                let lp = log_softmax(q);
                -target.iter().zip(&lp).map(|(t, l)| t * l).sum::<f64>()
            }
        }
    }

    /// `∇_q L`: `q - t` for MSE, `softmax(q) - t` for cross-entropy.
    pub fn grad_q(self, q: &[f64], target: &[f64]) -> Vec<f64> {
        match self {
            LossKind::Mse => q.iter().zip(target).map(|(a, b)| a - b).collect(),
            LossKind::CrossEntropy => softmax(q).iter().zip(target).map(|(p, t)| p - t).collect(),
        }
    }

    /// The prediction compared with `e_y`: probabilities for CE, raw outputs for MSE.
    pub fn prediction(self, q: &[f64]) -> Vec<f64> {
        match self {
            LossKind::Mse => q.to_vec(),
            LossKind::CrossEntropy => softmax(q),
        }
    }
}

/// Fully connected layer `y = act(W x + b)`, `W` stored out x in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Matrix,
    pub b: Option<Vec<f64>>,
    pub relu: bool,
}

impl Dense {
    /// Uniform init in `±1/sqrt(fan_in)` for weights and bias.
    pub fn init(fan_in: usize, fan_out: usize, bias: bool, relu: bool, rng: &mut RngState) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Matrix::from_vec(
            fan_out,
            fan_in,
            (0..fan_in * fan_out).map(|_| rng.uniform_range(-bound, bound)).collect(),
        );
        let b = bias.then(|| (0..fan_out).map(|_| rng.uniform_range(-bound, bound)).collect());
        Self { w, b, relu }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn param_count(&self) -> usize {
        self.w.rows() * self.w.cols() + self.b.as_ref().map_or(0, |b| b.len())
    }

    /// Same shape and activation, freshly initialized.
    pub fn reinitialized(&self, rng: &mut RngState) -> Dense {
        Dense::init(self.in_dim(), self.out_dim(), self.b.is_some(), self.relu, rng)
    }

    /// Returns `(pre-activation, output)` for a batch of rows.
    fn forward_batch(&self, a: &Matrix) -> (Matrix, Matrix) {
        let mut pre = a.matmul_nt(&self.w);
        if let Some(b) = &self.b {
            for i in 0..pre.rows() {
                pre.row_mut(i).iter_mut().zip(b).for_each(|(p, bj)| *p += bj);
            }
        }
        let out = if self.relu {
            let mut o = pre.clone();
            o.as_mut_slice().iter_mut().for_each(|v| *v = relu(*v));
            o
        } else {
            pre.clone()
        };
        (pre, out)
    }

    fn forward_one(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut pre = self.w.matvec(x);
        if let Some(b) = &self.b {
            pre.iter_mut().zip(b).for_each(|(p, bj)| *p += bj);
        }
        let out = if self.relu {
            pre.iter().map(|v| relu(*v)).collect()
        } else {
            pre.clone()
        };
        (pre, out)
    }

    fn push_params(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.w.as_slice());
        if let Some(b) = &self.b {
            out.extend_from_slice(b);
        }
    }

    fn load_params(&mut self, src: &[f64]) -> usize {
        let nw = self.w.rows() * self.w.cols();
        self.w.as_mut_slice().copy_from_slice(&src[..nw]);
        let mut used = nw;
        if let Some(b) = &mut self.b {
            let nb = b.len();
            b.copy_from_slice(&src[nw..nw + nb]);
            used += nb;
        }
        used
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseGrad {
    pub w: Matrix,
    pub b: Option<Vec<f64>>,
}

/// Concatenates gradients in the parameter flattening order.
pub fn flatten_grads(grads: &[DenseGrad]) -> Vec<f64> {
    let mut v = Vec::new();
    grads.iter().for_each(|g| g.push(&mut v));
    v
}

impl DenseGrad {
    fn push(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.w.as_slice());
        if let Some(b) = &self.b {
            out.extend_from_slice(b);
        }
    }
}

/// Gradients for every parameter of a [`Network`], same layout as the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub backbone: Vec<DenseGrad>,
    pub head: Vec<DenseGrad>,
}

impl Gradients {
    pub fn backbone_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.backbone.iter().for_each(|g| g.push(&mut v));
        v
    }

    pub fn head_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.head.iter().for_each(|g| g.push(&mut v));
        v
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.backbone_flat();
        v.extend(self.head_flat());
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpBackbone {
    pub layers: Vec<Dense>,
}

impl MlpBackbone {
    /// ReLU on every hidden layer; `final_relu` controls the output layer.
    pub fn new(input_dim: usize, widths: &[usize], final_relu: bool, rng: &mut RngState) -> Self {
        assert!(!widths.is_empty(), "backbone needs at least one layer");
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input_dim;
        for (i, &w) in widths.iter().enumerate() {
            let relu = i + 1 < widths.len() || final_relu;
            layers.push(Dense::init(fan_in, w, true, relu, rng));
            fan_in = w;
        }
        Self { layers }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        self.layers.iter().for_each(|l| l.push_params(&mut v));
        v
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_count(), "backbone parameter length");
        let mut off = 0;
        for l in &mut self.layers {
            off += l.load_params(&p[off..]);
        }
    }

    /// Keeps the first `depth - n_last` layers and returns the last `n_last`
    /// reinitialized (same shapes and activations).
    pub fn split_last(&self, n_last: usize, rng: &mut RngState) -> Result<(MlpBackbone, Vec<Dense>)> {
        if n_last >= self.depth() {
            return Err(Error::InvalidSplit {
                requested: n_last,
                depth: self.depth(),
            });
        }
        let keep = self.depth() - n_last;
        let kept = MlpBackbone {
            layers: self.layers[..keep].to_vec(),
        };
        let moved = self.layers[keep..].iter().map(|l| l.reinitialized(rng)).collect();
        Ok((kept, moved))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    Mlp2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub kind: HeadKind,
    /// Number of leading layers that came from the backbone.
    #[serde(default)]
    pub absorbed: usize,
    pub layers: Vec<Dense>,
}

impl Head {
    pub fn linear(h: usize, k: usize, rng: &mut RngState) -> Self {
        Self {
            kind: HeadKind::Linear,
            absorbed: 0,
            layers: vec![Dense::init(h, k, true, false, rng)],
        }
    }

    /// Two layers: `h -> hidden` with ReLU, then `hidden -> k`.
    pub fn mlp2(h: usize, hidden: usize, k: usize, rng: &mut RngState) -> Self {
        Self {
            kind: HeadKind::Mlp2,
            absorbed: 0,
            layers: vec![
                Dense::init(h, hidden, true, true, rng),
                Dense::init(hidden, k, true, false, rng),
            ],
        }
    }

    pub fn new(kind: HeadKind, h: usize, hidden: usize, k: usize, rng: &mut RngState) -> Self {
        match kind {
            HeadKind::Linear => Head::linear(h, k, rng),
            HeadKind::Mlp2 => Head::mlp2(h, hidden, k, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        self.layers.iter().for_each(|l| l.push_params(&mut v));
        v
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.param_count(), "head parameter length");
        let mut off = 0;
        for l in &mut self.layers {
            off += l.load_params(&p[off..]);
        }
    }

    /// Weight matrix of a single-layer head (the `vᵀ` of the linear case).
    pub fn linear_weight(&self) -> Option<&Matrix> {
        (self.layers.len() == 1).then(|| &self.layers[0].w)
    }

    pub fn forward(&self, z: &[f64]) -> Vec<f64> {
        let mut a = z.to_vec();
        for l in &self.layers {
            a = l.forward_one(&a).1;
        }
        a
    }

    /// `∇_z q` (k x h) at feature `z`.
    pub fn jacobian(&self, z: &[f64]) -> Matrix {
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut a = z.to_vec();
        for l in &self.layers {
            let (pre, out) = l.forward_one(&a);
            pres.push(pre);
            a = out;
        }
        let k = self.output_dim();
        let mut jac = Matrix::identity(k);
        for (l, pre) in self.layers.iter().zip(&pres).rev() {
            if l.relu {
                for i in 0..jac.rows() {
                    for (v, p) in jac.row_mut(i).iter_mut().zip(pre) {
                        if *p <= 0.0 {
                            *v = 0.0;
                        }
                    }
                }
            }
            jac = jac.matmul(&l.w);
        }
        jac
    }

    /// Mean loss and head gradients given precomputed features `z` (N x h).
    pub fn loss_and_grads(&self, z: &Matrix, targets: &Matrix, loss: LossKind) -> Result<(f64, Vec<DenseGrad>)> {
        let layers: Vec<&Dense> = self.layers.iter().collect();
        let (acts, pres) = forward_stack(&layers, z);
        let (value, g) = loss_grad_matrix(acts.last().unwrap(), targets, loss)?;
        Ok((value, backward_stack(&layers, &acts, &pres, g)))
    }

    pub fn forward_batch(&self, z: &Matrix) -> Matrix {
        let layers: Vec<&Dense> = self.layers.iter().collect();
        forward_stack(&layers, z).0.pop().unwrap()
    }

    pub fn same_shape(&self, other: &Head) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.w.shape() == b.w.shape() && a.b.is_some() == b.b.is_some() && a.relu == b.relu
            })
    }
}

/// Cached activations of a batch forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input followed by every layer output (backbone then head).
    pub acts: Vec<Matrix>,
    pub pres: Vec<Matrix>,
    pub backbone_depth: usize,
}

impl ForwardCache {
    pub fn features(&self) -> &Matrix {
        &self.acts[self.backbone_depth]
    }

    pub fn logits(&self) -> &Matrix {
        self.acts.last().unwrap()
    }
}

/// Per-sample factors of the backbone Jacobian `∇_B z`.
///
/// For layer `l`, `deltas[l]` is `∂z/∂pre_l` (h x out_l) and `inputs[l]` is
/// the layer input; `∂z_a/∂W_l[r, c] = deltas[l][a, r] * inputs[l][c]`.
#[derive(Debug, Clone)]
pub struct JacobianFactors {
    pub deltas: Vec<Matrix>,
    pub inputs: Vec<Vec<f64>>,
    pub has_bias: Vec<bool>,
}

impl JacobianFactors {
    /// Empirical backbone NTK block `κ = (∇_B z_self)(∇_B z_other)ᵀ` (h x h).
    pub fn kernel_with(&self, other: &JacobianFactors) -> Matrix {
        let h = self.deltas[0].rows();
        let mut k = Matrix::zeros(h, h);
        for l in 0..self.deltas.len() {
            let mut s: f64 = self.inputs[l]
                .iter()
                .zip(&other.inputs[l])
                .map(|(a, b)| a * b)
                .sum();
            if self.has_bias[l] {
                s += 1.0;
            }
            if s == 0.0 {
                continue;
            }
            k.add_scaled(s, &self.deltas[l].matmul_nt(&other.deltas[l]));
        }
        k
    }

    /// Dense `∇_B z` (h x P) in the flattened parameter order.
    pub fn dense(&self) -> Matrix {
        let h = self.deltas[0].rows();
        let p: usize = self
            .deltas
            .iter()
            .zip(&self.inputs)
            .zip(&self.has_bias)
            .map(|((d, i), &b)| d.cols() * i.len() + if b { d.cols() } else { 0 })
            .sum();
        let mut jac = Matrix::zeros(h, p);
        for a in 0..h {
            let row = jac.row_mut(a);
            let mut off = 0;
            for l in 0..self.deltas.len() {
                let d = self.deltas[l].row(a);
                let inp = &self.inputs[l];
                for (r, &dr) in d.iter().enumerate() {
                    for (c, &ic) in inp.iter().enumerate() {
                        row[off + r * inp.len() + c] = dr * ic;
                    }
                }
                off += d.len() * inp.len();
                if self.has_bias[l] {
                    row[off..off + d.len()].copy_from_slice(d);
                    off += d.len();
                }
            }
        }
        jac
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub backbone: MlpBackbone,
    pub head: Head,
}

impl Network {
    pub fn new(backbone: MlpBackbone, head: Head) -> Self {
        assert_eq!(
            backbone.output_dim(),
            head.input_dim(),
            "head input width must equal feature width"
        );
        Self { backbone, head }
    }

    /// `z = B x`, `q = vᵀ z`, no biases or activations.
    pub fn linear_two_layer(b: Matrix, v: Vec<f64>) -> Self {
        assert_eq!(b.rows(), v.len(), "v must have one entry per row of B");
        let backbone = MlpBackbone {
            layers: vec![Dense {
                w: b,
                b: None,
                relu: false,
            }],
        };
        let head = Head {
            kind: HeadKind::Linear,
            absorbed: 0,
            layers: vec![Dense {
                w: Matrix::from_vec(1, v.len(), v),
                b: None,
                relu: false,
            }],
        };
        Self { backbone, head }
    }

    /// `(B, v)` when this is a two-layer linear model.
    pub fn as_linear_two_layer(&self) -> Option<(&Matrix, &[f64])> {
        let bl = &self.backbone.layers;
        let hl = &self.head.layers;
        if bl.len() == 1 && hl.len() == 1 && bl[0].b.is_none() && hl[0].b.is_none() && !bl[0].relu && hl[0].w.rows() == 1 {
            Some((&bl[0].w, hl[0].w.as_slice()))
        } else {
            None
        }
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.output_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.head.output_dim()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::of(self)
    }

    /// `(z, q)` for one input.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(x.len(), self.input_dim(), "input width mismatch");
        let mut a = x.to_vec();
        for l in &self.backbone.layers {
            a = l.forward_one(&a).1;
        }
        let q = self.head.forward(&a);
        (a, q)
    }

    pub fn forward_batch(&self, x: &Matrix) -> ForwardCache {
        assert_eq!(x.cols(), self.input_dim(), "input width mismatch");
        let layers: Vec<&Dense> = self.backbone.layers.iter().chain(&self.head.layers).collect();
        let (acts, pres) = forward_stack(&layers, x);
        ForwardCache {
            acts,
            pres,
            backbone_depth: self.backbone.depth(),
        }
    }

    /// Features for every row of `x` (N x h).
    pub fn features(&self, x: &Matrix) -> Matrix {
        let mut a = x.clone();
        for l in &self.backbone.layers {
            a = l.forward_batch(&a).1;
        }
        a
    }

    /// Logits for every row of `x` (N x k).
    pub fn predict(&self, x: &Matrix) -> Matrix {
        self.forward_batch(x).logits().clone()
    }

    pub fn predict_from_features(&self, z: &Matrix) -> Matrix {
        self.head.forward_batch(z)
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> f64 {
        accuracy_of(&self.predict(x), labels)
    }

    /// Mean loss over the rows of `x` and the gradient of that mean for every
    /// parameter.
    pub fn loss_and_grads(&self, x: &Matrix, targets: &Matrix, loss: LossKind) -> Result<(f64, Gradients)> {
        let cache = self.forward_batch(x);
        let (value, g) = loss_grad_matrix(cache.logits(), targets, loss)?;
        Ok((value, self.backward(&cache, g)))
    }

    /// Backpropagates `∂L/∂q` (N x k) through head and backbone.
    pub fn backward(&self, cache: &ForwardCache, grad_q: Matrix) -> Gradients {
        let layers: Vec<&Dense> = self.backbone.layers.iter().chain(&self.head.layers).collect();
        let mut grads = backward_stack(&layers, &cache.acts, &cache.pres, grad_q);
        let head = grads.split_off(self.backbone.depth());
        Gradients { backbone: grads, head }
    }

    /// `∇_z q` (k x h) at the features of input `x`.
    pub fn grad_q_wrt_z(&self, x: &[f64]) -> Matrix {
        let (z, _) = self.forward(x);
        self.head.jacobian(&z)
    }

    /// Backbone Jacobian factors at input `x` (one backward pass per unit of z,
    /// done together as a matrix recursion).
    pub fn backbone_jacobian_factors(&self, x: &[f64]) -> JacobianFactors {
        let layers = &self.backbone.layers;
        let mut inputs = Vec::with_capacity(layers.len());
        let mut pres = Vec::with_capacity(layers.len());
        let mut a = x.to_vec();
        for l in layers {
            let (pre, out) = l.forward_one(&a);
            inputs.push(a);
            pres.push(pre);
            a = out;
        }
        let h = self.feature_dim();
        let mut deltas = vec![Matrix::zeros(0, 0); layers.len()];
        let mut d = Matrix::identity(h);
        for idx in (0..layers.len()).rev() {
            if layers[idx].relu {
                for i in 0..h {
                    for (v, p) in d.row_mut(i).iter_mut().zip(&pres[idx]) {
                        if *p <= 0.0 {
                            *v = 0.0;
                        }
                    }
                }
            }
            let next = if idx > 0 { d.matmul(&layers[idx].w) } else { Matrix::zeros(0, 0) };
            deltas[idx] = std::mem::replace(&mut d, next);
        }
        JacobianFactors {
            deltas,
            inputs,
            has_bias: layers.iter().map(|l| l.b.is_some()).collect(),
        }
    }

    /// Dense `∇_B z` (h x P_backbone).
    pub fn backbone_jacobian(&self, x: &[f64]) -> Matrix {
        self.backbone_jacobian_factors(x).dense()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.backbone.params();
        p.extend(self.head.params());
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let nb = self.backbone.param_count();
        self.backbone.set_params(&p[..nb]);
        self.head.set_params(&p[nb..]);
    }

    /// Moves the last `n_last` backbone layers into the head, reinitialized.
    /// The feature tap point becomes the output of the shortened backbone.
    pub fn reinit_partial_backbone(&self, n_last: usize, rng: &mut RngState) -> Result<Network> {
        if n_last == 0 {
            return Ok(self.clone());
        }
        let (backbone, moved) = self.backbone.split_last(n_last, rng)?;
        let mut layers = moved;
        layers.extend(self.head.layers.iter().cloned());
        let head = Head {
            kind: self.head.kind,
            absorbed: self.head.absorbed + n_last,
            layers,
        };
        Ok(Network { backbone, head })
    }

    /// Stable 64-bit fingerprint of the backbone parameter bits (FNV-1a).
    pub fn backbone_hash(&self) -> u64 {
        fingerprint(&self.backbone.params())
    }

    pub fn head_hash(&self) -> u64 {
        fingerprint(&self.head.params())
    }
}

/// Input followed by every layer output, and the pre-activations.
fn forward_stack(layers: &[&Dense], x: &Matrix) -> (Vec<Matrix>, Vec<Matrix>) {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    let mut pres = Vec::with_capacity(layers.len());
    acts.push(x.clone());
    for l in layers {
        let (pre, out) = l.forward_batch(acts.last().unwrap());
        pres.push(pre);
        acts.push(out);
    }
    (acts, pres)
}

fn backward_stack(layers: &[&Dense], acts: &[Matrix], pres: &[Matrix], grad_out: Matrix) -> Vec<DenseGrad> {
    let mut grads: Vec<DenseGrad> = Vec::with_capacity(layers.len());
    let mut g = grad_out;
    for (idx, l) in layers.iter().enumerate().rev() {
        if l.relu {
            g.as_mut_slice()
                .iter_mut()
                .zip(pres[idx].as_slice())
                .for_each(|(gv, p)| {
                    if *p <= 0.0 {
                        *gv = 0.0;
                    }
                });
        }
        let gw = g.matmul_tn(&acts[idx]);
        let gb = l.b.as_ref().map(|_| {
            let mut s = vec![0.0; g.cols()];
            for i in 0..g.rows() {
                s.iter_mut().zip(g.row(i)).for_each(|(a, b)| *a += b);
            }
            s
        });
        if idx > 0 {
            g = g.matmul(&l.w);
        }
        grads.push(DenseGrad { w: gw, b: gb });
    }
    grads.reverse();
    grads
}

/// Mean loss over rows and `∂(mean loss)/∂q`.
fn loss_grad_matrix(q: &Matrix, targets: &Matrix, loss: LossKind) -> Result<(f64, Matrix)> {
    let n = q.rows();
    assert!(n > 0, "empty batch");
    assert_eq!(targets.rows(), n, "one target row per input");
    assert_eq!(targets.cols(), q.cols(), "target width mismatch");
    if !q.is_finite() {
        return Err(Error::Divergence {
            stage: "forward".into(),
            epoch: 0,
        });
    }
    let mut total = 0.0;
    let mut g = Matrix::zeros(n, q.cols());
    for i in 0..n {
        total += loss.value(q.row(i), targets.row(i));
        let gi = loss.grad_q(q.row(i), targets.row(i));
        g.row_mut(i).iter_mut().zip(gi).for_each(|(a, b)| *a = b / n as f64);
    }
    Ok((total / n as f64, g))
}

/// ReLU that lets NaN through so divergence is detectable downstream.
fn relu(v: f64) -> f64 {
    if v < 0.0 {
        0.0
    } else {
        v
    }
}

pub fn fingerprint(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy_of(logits: &Matrix, labels: &[usize]) -> f64 {
    assert_eq!(logits.rows(), labels.len());
    let hits = (0..labels.len())
        .filter(|&i| argmax(logits.row(i)) == labels[i])
        .count();
    hits as f64 / labels.len() as f64
}

/// Mean loss of a logit matrix against target rows.
pub fn mean_loss(logits: &Matrix, targets: &Matrix, loss: LossKind) -> f64 {
    let n = logits.rows();
    (0..n).map(|i| loss.value(logits.row(i), targets.row(i))).sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_net(seed: u64, kind: HeadKind) -> Network {
        let mut rng = RngState::new(seed);
        let bb = MlpBackbone::new(4, &[6, 5, 3], true, &mut rng);
        let head = Head::new(kind, 3, 4, 2, &mut rng);
        Network::new(bb, head)
    }

    #[test]
    fn linear_two_layer_forward() {
        let net = Network::linear_two_layer(Matrix::identity(2), vec![1.0, 2.0]);
        let (z, q) = net.forward(&[3.0, 4.0]);
        assert_eq!(z, vec![3.0, 4.0]);
        assert_eq!(q, vec![11.0]);
        let (z, q) = net.forward(&[0.0, 0.0]);
        assert_eq!(z, vec![0.0, 0.0]);
        assert_eq!(q, vec![0.0]);
    }

    #[test]
    fn zero_gap_mse_gives_zero_grads() {
        let net = Network::linear_two_layer(Matrix::identity(2), vec![1.0, 2.0]);
        let x = Matrix::from_rows(&[[3.0, 4.0]]);
        let t = Matrix::from_rows(&[[11.0]]);
        let (l, g) = net.loss_and_grads(&x, &t, LossKind::Mse).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matched_softmax_target_zero_logit_grad() {
        let q = [0.3, -1.2, 2.0];
        let p = softmax(&q);
        let g = LossKind::CrossEntropy.grad_q(&q, &p);
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn linear_head_jacobian_is_weight() {
        let net = Network::linear_two_layer(Matrix::identity(3), vec![1.0, 2.0, 3.0]);
        for x in [[1.0, 0.0, 0.0], [-5.0, 2.0, 7.0]] {
            assert_eq!(net.grad_q_wrt_z(&x).as_slice(), &[1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn mlp2_positive_region_jacobian_is_product() {
        let mut rng = RngState::new(3);
        let mut head = Head::mlp2(3, 4, 2, &mut rng);
        // force all hidden preactivations positive
        head.layers[0].w = Matrix::from_vec(4, 3, vec![0.1; 12]);
        head.layers[0].b = Some(vec![1.0; 4]);
        let j = head.jacobian(&[0.5, 0.2, 0.1]);
        let want = head.layers[1].w.matmul(&head.layers[0].w);
        assert!(j.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn reinit_partial_bookkeeping() {
        let net = small_net(5, HeadKind::Linear);
        let mut rng = RngState::new(77);
        assert_eq!(net.reinit_partial_backbone(0, &mut rng).unwrap(), net);
        let moved = net.reinit_partial_backbone(1, &mut rng).unwrap();
        assert_eq!(moved.backbone.depth(), 2);
        assert_eq!(
            moved.head.param_count(),
            net.head.param_count() + net.backbone.layers[2].param_count()
        );
        assert_eq!(moved.backbone.layers[..], net.backbone.layers[..2]);
        assert_eq!(moved.head.layers[0].w.shape(), net.backbone.layers[2].w.shape());
        assert_ne!(moved.head.layers[0].w, net.backbone.layers[2].w);
        assert_eq!(moved.feature_dim(), 5);
        assert!(matches!(
            net.reinit_partial_backbone(3, &mut rng),
            Err(Error::InvalidSplit { requested: 3, depth: 3 })
        ));
    }

    #[test]
    fn jacobian_factor_kernel_matches_dense() {
        let net = small_net(9, HeadKind::Mlp2);
        let xa = [0.3, -0.2, 0.9, 0.1];
        let xb = [-0.5, 0.4, 0.2, 0.8];
        let fa = net.backbone_jacobian_factors(&xa);
        let fb = net.backbone_jacobian_factors(&xb);
        let dense = fa.dense().matmul_nt(&fb.dense());
        assert!(fa.kernel_with(&fb).max_abs_diff(&dense) < 1e-12);
        assert_eq!(fa.dense().cols(), net.backbone.param_count());
    }

    #[test]
    fn params_roundtrip() {
        let mut net = small_net(4, HeadKind::Mlp2);
        let p: Vec<f64> = (0..net.params().len()).map(|i| i as f64 * 0.01).collect();
        net.set_params(&p);
        assert_eq!(net.params(), p);
    }

    #[test]
    fn nan_input_is_divergence() {
        let net = small_net(1, HeadKind::Linear);
        let x = Matrix::from_rows(&[[f64::NAN, 0.0, 0.0, 0.0]]);
        let t = Matrix::from_rows(&[[1.0, 0.0]]);
        assert!(matches!(
            net.loss_and_grads(&x, &t, LossKind::CrossEntropy),
            Err(Error::Divergence { .. })
        ));
    }
}
