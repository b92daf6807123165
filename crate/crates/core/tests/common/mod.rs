#![allow(dead_code)]

use hpft::models::{Dense, Head, HeadKind, LossKind, MlpBackbone, Network};
use hpft::numkernel::{Matrix, RngState};

/// Forward pass written against the public layer fields only, so finite
/// differences do not go through the code under test.
pub fn ref_forward(layers: &[&Dense], x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    for l in layers {
        let (rows, cols) = l.w.shape();
        let mut out = vec![0.0; rows];
        for (r, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for c in 0..cols {
                s += l.w[(r, c)] * a[c];
            }
            if let Some(b) = &l.b {
                s += b[r];
            }
            *o = if l.relu && s < 0.0 { 0.0 } else { s };
        }
        a = out;
    }
    a
}

pub fn ref_loss(net: &Network, x: &Matrix, t: &Matrix, loss: LossKind) -> f64 {
    let layers: Vec<&Dense> = net.backbone.layers.iter().chain(&net.head.layers).collect();
    let mut total = 0.0;
    for i in 0..x.rows() {
        let q = ref_forward(&layers, x.row(i));
        let ti = t.row(i);
        total += match loss {
            LossKind::Mse => 0.5 * q.iter().zip(ti).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
            LossKind::CrossEntropy => {
                let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + q.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                ti.iter().zip(&q).map(|(tj, qj)| tj * (lse - qj)).sum::<f64>()
            }
        };
    }
    total / x.rows() as f64
}

/// Central differences of [`ref_loss`] in every parameter.
pub fn fd_grad(net: &Network, x: &Matrix, t: &Matrix, loss: LossKind, h: f64) -> Vec<f64> {
    let p0 = net.params();
    let mut work = net.clone();
    let mut g = vec![0.0; p0.len()];
    let mut p = p0.clone();
    for i in 0..p0.len() {
        p[i] = p0[i] + h;
        work.set_params(&p);
        let up = ref_loss(&work, x, t, loss);
        p[i] = p0[i] - h;
        work.set_params(&p);
        let down = ref_loss(&work, x, t, loss);
        p[i] = p0[i];
        g[i] = (up - down) / (2.0 * h);
    }
    g
}

/// `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` for the analytical gradient of `net`.
pub fn grad_rel_err(net: &Network, x: &Matrix, t: &Matrix, loss: LossKind) -> f64 {
    let (_, grads) = net.loss_and_grads(x, t, loss).unwrap();
    let g = grads.flat();
    let fd = fd_grad(net, x, t, loss, 1e-5);
    let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = hpft::numkernel::norm(&g).max(hpft::numkernel::norm(&fd)).max(1e-12);
    diff / scale
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    LinearTwoLayer,
    MlpLinearHead,
    MlpMlp2Head,
}

pub struct GradInstance {
    pub kind: ModelKind,
    pub loss: LossKind,
    pub net: Network,
    pub x: Matrix,
    pub t: Matrix,
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut RngState) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal() * scale).collect())
}

/// Random soft targets (rows on the simplex) or real-valued MSE targets.
pub fn random_targets(n: usize, k: usize, loss: LossKind, rng: &mut RngState) -> Matrix {
    match loss {
        LossKind::Mse => random_matrix(n, k, 1.0, rng),
        LossKind::CrossEntropy => {
            let mut t = Matrix::zeros(n, k);
            for i in 0..n {
                let raw: Vec<f64> = (0..k).map(|_| rng.uniform() + 0.05).collect();
                let s: f64 = raw.iter().sum();
                t.row_mut(i).iter_mut().zip(&raw).for_each(|(a, b)| *a = b / s);
            }
            t
        }
    }
}

/// Small random instance; `which` cycles through model kinds and losses.
pub fn grad_instance(which: usize, seed: u64) -> GradInstance {
    let mut rng = RngState::new(seed);
    let n = 3 + rng.below(4);
    let d = 2 + rng.below(4);
    let (kind, loss) = match which % 5 {
        0 => (ModelKind::LinearTwoLayer, LossKind::Mse),
        1 => (ModelKind::MlpLinearHead, LossKind::Mse),
        2 => (ModelKind::MlpLinearHead, LossKind::CrossEntropy),
        3 => (ModelKind::MlpMlp2Head, LossKind::Mse),
        _ => (ModelKind::MlpMlp2Head, LossKind::CrossEntropy),
    };
    let x = random_matrix(n, d, 1.0, &mut rng);
    let net = match kind {
        ModelKind::LinearTwoLayer => {
            let h = 2 + rng.below(4);
            let b = random_matrix(h, d, 0.7, &mut rng);
            let v: Vec<f64> = (0..h).map(|_| rng.normal()).collect();
            Network::linear_two_layer(b, v)
        }
        ModelKind::MlpLinearHead | ModelKind::MlpMlp2Head => {
            let depth = 1 + rng.below(4);
            let widths: Vec<usize> = (0..depth).map(|_| 3 + rng.below(4)).collect();
            let backbone = MlpBackbone::new(d, &widths, true, &mut rng);
            let k = 2 + rng.below(3);
            let h = *widths.last().unwrap();
            let head = match kind {
                ModelKind::MlpLinearHead => Head::new(HeadKind::Linear, h, 0, k, &mut rng),
                _ => Head::new(HeadKind::Mlp2, h, 3 + rng.below(3), k, &mut rng),
            };
            Network::new(backbone, head)
        }
    };
    let k = net.output_dim();
    let t = random_targets(n, k, loss, &mut rng);
    GradInstance { kind, loss, net, x, t }
}
