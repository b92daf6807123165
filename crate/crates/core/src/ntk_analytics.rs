//! Closed-form analysis of the two-layer linear model `q = X Bᵀ v` under
//! the lazy (constant-NTK) approximation, with sum loss `½‖XBᵀv − Y‖²`.
//!
//! `b = vec(B)` is the column-major stacking of `B`. With
//! `K₀ = X(B₀ᵀB₀ + ‖v₀‖²I)Xᵀ`, `K̃₀ = XB₀ᵀB₀Xᵀ`, `C₁ = K₀⁻¹` and
//! `C₂ = K₀⁻¹K̃₀K₀⁻¹`, the adaptation metrics along `q₀ = βY` are quadratics
//! in `β`:
//!
//! ```text
//! d_dot(q₀)   = ‖b₀‖² − q₀ᵀC₁(q₀ − Y)
//! zt_norm(q₀) = ‖b₀‖² + YᵀC₂Y + q₀ᵀ(2C₁ − 2C₂)Y + q₀ᵀ(C₂ − 2C₁)q₀
//! d_euc(q₀)   = zt_norm − 2·d_dot + ‖b₀‖²
//! ```
//!
//! The expansion of `zt_norm` stands in `K̃₀` for the backbone Gram
//! `(∇_b q₀)(∇_b q₀)ᵀ`, which is really `‖v₀‖²XXᵀ = K₀ − K̃₀`.
//! [`direct_metrics`] evaluates the same quantities from the closed-form
//! `B_t` itself so the two can be compared.

use crate::datagen::{format_float, gen_overparam_regression};
use crate::error::{Error, Result};
use crate::numkernel::{
    default_jitter, definiteness, dot, inverse_spd, mean, norm, solve_general, solve_spd, std_dev, Cholesky, Definiteness,
    Matrix, RngState,
};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearInstance {
    /// h x d
    pub b0: Matrix,
    pub v0: Vec<f64>,
    /// N x d
    pub x: Matrix,
    pub y: Vec<f64>,
    pub jitter: f64,
}

impl LinearInstance {
    pub fn new(b0: Matrix, v0: Vec<f64>, x: Matrix, y: Vec<f64>) -> Result<Self> {
        if b0.rows() != v0.len() || b0.cols() != x.cols() || x.rows() != y.len() {
            return Err(Error::Config("linear instance shapes do not chain".into()));
        }
        if x.rows() > x.cols() {
            return Err(Error::Config(format!("need N <= d, got N={} d={}", x.rows(), x.cols())));
        }
        Ok(Self {
            b0,
            v0,
            x,
            y,
            jitter: 0.0,
        })
    }

    /// `B₀ ~ N(0, 1/d)·b_scale`, `v₀ ~ N(0, 1/h)·v_scale`, data from
    /// [`gen_overparam_regression`].
    pub fn random(h: usize, d: usize, n: usize, b_scale: f64, v_scale: f64, rng: &RngState) -> Result<Self> {
        let data = gen_overparam_regression(d, n, &mut rng.fork_named("data"))?;
        let mut pr = rng.fork_named("params");
        let sd_b = b_scale / (d as f64).sqrt();
        let sd_v = v_scale / (h as f64).sqrt();
        let b0 = Matrix::from_vec(h, d, (0..h * d).map(|_| pr.normal() * sd_b).collect());
        let v0 = (0..h).map(|_| pr.normal() * sd_v).collect();
        Self::new(b0, v0, data.x, data.y)
    }

    /// Same data, initial parameters rescaled.
    pub fn scaled(&self, b_scale: f64, v_scale: f64) -> Self {
        Self {
            b0: self.b0.scale(b_scale),
            v0: self.v0.iter().map(|v| v * v_scale).collect(),
            ..self.clone()
        }
    }

    pub fn h(&self) -> usize {
        self.b0.rows()
    }

    pub fn d(&self) -> usize {
        self.b0.cols()
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    /// `q₀ = X B₀ᵀ v₀`.
    pub fn q0(&self) -> Vec<f64> {
        self.x.matvec(&self.b0.t_matvec(&self.v0))
    }

    pub fn b0_vec(&self) -> Vec<f64> {
        self.b0.vec_col_major()
    }

    pub fn b0_sq(&self) -> f64 {
        self.b0.frobenius_norm().powi(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelPair {
    pub k0: Matrix,
    pub ktilde0: Matrix,
    pub c1: Matrix,
    pub c2: Matrix,
}

/// Kernels, jitter `inst.jitter` added to `K₀` before inversion (0 means
/// the default relative jitter).
pub fn build_kernels(inst: &LinearInstance) -> Result<KernelPair> {
    let btb = inst.b0.matmul_tn(&inst.b0);
    let xb = inst.x.matmul(&btb);
    let ktilde0 = xb.matmul_nt(&inst.x).symmetrize();
    let vsq = dot(&inst.v0, &inst.v0);
    let k0 = ktilde0.add(&inst.x.matmul_nt(&inst.x).scale(vsq)).symmetrize();
    let jitter = if inst.jitter > 0.0 { inst.jitter } else { default_jitter(&k0) };
    let c1 = inverse_spd(&k0, jitter)?;
    let c2 = c1.matmul(&ktilde0).matmul(&c1).symmetrize();
    Ok(KernelPair { k0, ktilde0, c1, c2 })
}

/// `∇_b q₀` (N x hd); row n is `vec(v₀ x_nᵀ)ᵀ`.
pub fn grad_b_q0(inst: &LinearInstance) -> Matrix {
    let (n, h, d) = (inst.n(), inst.h(), inst.d());
    let mut g = Matrix::zeros(n, h * d);
    for r in 0..n {
        g.row_mut(r)
            .copy_from_slice(&Matrix::outer(&inst.v0, inst.x.row(r)).vec_col_major());
    }
    g
}

/// `∇_v q₀ = X B₀ᵀ` (N x h).
pub fn grad_v_q0(inst: &LinearInstance) -> Matrix {
    inst.x.matmul_nt(&inst.b0)
}

/// `b₀ − (∇_b q₀)ᵀ K₀⁻¹ (q₀ − Y)`.
pub fn closed_form_b_infinity(inst: &LinearInstance, kernels: &KernelPair, q0: &[f64]) -> Result<Vec<f64>> {
    assert_eq!(q0.len(), inst.n(), "q0 length must equal N");
    let resid: Vec<f64> = q0.iter().zip(&inst.y).map(|(q, y)| q - y).collect();
    let r = kernels.c1.matvec(&resid);
    let step = grad_b_q0(inst).t_matvec(&r);
    Ok(inst.b0_vec().iter().zip(&step).map(|(b, s)| b - s).collect())
}

/// Converged head of head-only GD from `v₀`: `v₀ − (∇_v q₀)ᵀ K̃₀⁻¹ (q₀ − Y)`.
/// Needs `K̃₀` invertible, so `h ≥ N`.
pub fn closed_form_v_head_only(inst: &LinearInstance, kernels: &KernelPair) -> Result<Vec<f64>> {
    let resid: Vec<f64> = inst.q0().iter().zip(&inst.y).map(|(q, y)| q - y).collect();
    let r = solve_spd(&kernels.ktilde0, &resid, 0.0)?;
    let step = grad_v_q0(inst).t_matvec(&r);
    Ok(inst.v0.iter().zip(&step).map(|(v, s)| v - s).collect())
}

/// Max elementwise gap between `∇_b q₀ · b₀` and `q₀ = X B₀ᵀ v₀`.
pub fn verify_lemma_grad_identity(inst: &LinearInstance) -> f64 {
    let lhs = grad_b_q0(inst).matvec(&inst.b0_vec());
    let rhs = inst.q0();
    lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderFlags {
    /// Hessian of d_dot: `−2C₁`.
    pub d_dot_hessian: Definiteness,
    /// Hessian of zt_norm: `2C₂ − 4C₁`.
    pub zt_norm_hessian: Definiteness,
}

impl SecondOrderFlags {
    /// The zt_norm critical point is a maximum.
    pub fn favorable(&self) -> bool {
        self.zt_norm_hessian == Definiteness::NegativeDefinite
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoints {
    /// 0.5, the analytic maximizer of d_dot along the ray.
    pub beta_dot_star: f64,
    /// Argmax of a least-squares quadratic fitted to the d_dot curve.
    pub beta_dot_fit: f64,
    /// `(I + (C₂ − 2C₁)⁻¹C₁)Y`; `None` when `C₂ − 2C₁` is singular.
    pub q0_norm_star: Option<Vec<f64>>,
    /// Scalar reading of `q0_norm_star` on the ray: its projection onto `Y`
    /// in the metric `2C₁ − C₂`, which is also the exact argmax of zt_norm
    /// along `βY`.
    pub alpha_summary: Option<f64>,
    /// Mean of `q0_norm_star ⊘ Y` and its spread (sample std).
    pub alpha_ratio_mean: Option<f64>,
    pub alpha_ratio_spread: Option<f64>,
    pub second_order: SecondOrderFlags,
}

fn quad_form(m: &Matrix, a: &[f64], b: &[f64]) -> f64 {
    dot(a, &m.matvec(b))
}

/// Evenly spaced grid on `[lo, hi]` with `steps` intervals.
pub fn beta_grid(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    assert!(steps >= 1 && hi > lo);
    (0..=steps).map(|i| lo + (hi - lo) * i as f64 / steps as f64).collect()
}

/// Argmax of the least-squares quadratic through `(x, y)`.
fn quadratic_fit_argmax(x: &[f64], y: &[f64]) -> f64 {
    let mut ata = Matrix::zeros(3, 3);
    let mut aty = Matrix::zeros(3, 1);
    for (&xi, &yi) in x.iter().zip(y) {
        let row = [xi * xi, xi, 1.0];
        for r in 0..3 {
            for c in 0..3 {
                ata[(r, c)] += row[r] * row[c];
            }
            aty[(r, 0)] += row[r] * yi;
        }
    }
    match solve_general(&ata, &aty) {
        Some(coef) if coef[(0, 0)] != 0.0 => -coef[(1, 0)] / (2.0 * coef[(0, 0)]),
        _ => f64::NAN,
    }
}

pub fn critical_points(inst: &LinearInstance, kernels: &KernelPair) -> CriticalPoints {
    let (c1, c2, y) = (&kernels.c1, &kernels.c2, &inst.y);
    let m = c2.sub(&c1.scale(2.0)).symmetrize();
    let q_star = solve_general(&m, c1).map(|mc1| {
        let corr = mc1.matvec(y);
        y.iter().zip(&corr).map(|(a, b)| a + b).collect::<Vec<f64>>()
    });
    let ratios: Option<Vec<f64>> = q_star
        .as_ref()
        .map(|q| q.iter().zip(y).filter(|(_, yi)| yi.abs() > 0.0).map(|(a, b)| a / b).collect());
    let num = quad_form(c1, y, y) - quad_form(c2, y, y);
    let den = 2.0 * quad_form(c1, y, y) - quad_form(c2, y, y);
    let alpha = (q_star.is_some() && den != 0.0).then(|| num / den);
    let grid = beta_grid(0.0, 1.0, 200);
    let curve = trend_curves_raw(inst, kernels, &grid);
    CriticalPoints {
        beta_dot_star: 0.5,
        beta_dot_fit: quadratic_fit_argmax(&grid, &curve.d_dot),
        alpha_ratio_mean: ratios.as_ref().map(|r| mean(r)),
        alpha_ratio_spread: ratios.as_ref().map(|r| if r.len() > 1 { std_dev(r) } else { 0.0 }),
        q0_norm_star: q_star,
        alpha_summary: alpha,
        second_order: SecondOrderFlags {
            d_dot_hessian: definiteness(&c1.scale(-2.0)),
            zt_norm_hessian: definiteness(&m.scale(2.0)),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    TinySide,
    Stretch,
    Rotate,
    Collapse,
    Unknown,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::TinySide => "tiny_side",
            Phase::Stretch => "stretch",
            Phase::Rotate => "rotate",
            Phase::Collapse => "collapse",
            Phase::Unknown => "unknown",
        })
    }
}

/// Phase of `q₀ = βY`: tiny-side at `β ≥ 1`, stretch on `(½, 1)`, rotate on
/// `(α, ½]`, collapse at `β ≤ α`.
pub fn classify_phase(beta: f64, cp: &CriticalPoints) -> Phase {
    if beta >= 1.0 {
        return Phase::TinySide;
    }
    if beta > cp.beta_dot_star {
        return Phase::Stretch;
    }
    match cp.alpha_summary {
        Some(a) if a.is_finite() && a < cp.beta_dot_star => {
            if beta > a {
                Phase::Rotate
            } else {
                Phase::Collapse
            }
        }
        _ => Phase::Unknown,
    }
}

/// Metric values at one `q₀`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub d_euc: f64,
    pub d_dot: f64,
    pub zt_norm: f64,
    pub d_cos: f64,
}

/// Metrics from the quadratic expansions at an arbitrary `q₀` (off-ray allowed).
pub fn metrics_at(inst: &LinearInstance, kernels: &KernelPair, q0: &[f64]) -> TrendPoint {
    let (c1, c2, y) = (&kernels.c1, &kernels.c2, &inst.y);
    let b0sq = inst.b0_sq();
    let resid: Vec<f64> = q0.iter().zip(y).map(|(q, t)| q - t).collect();
    let d_dot = b0sq - quad_form(c1, q0, &resid);
    let zt_norm = b0sq + quad_form(c2, y, y) + 2.0 * quad_form(c1, q0, y) - 2.0 * quad_form(c2, q0, y)
        + quad_form(c2, q0, q0)
        - 2.0 * quad_form(c1, q0, q0);
    let d_euc = zt_norm - 2.0 * d_dot + b0sq;
    TrendPoint {
        d_euc,
        d_dot,
        zt_norm,
        d_cos: d_dot / (zt_norm.max(0.0).sqrt() * b0sq.sqrt()),
    }
}

/// The same metrics computed from the closed-form `B_t` directly.
pub fn direct_metrics(inst: &LinearInstance, kernels: &KernelPair, q0: &[f64]) -> Result<TrendPoint> {
    let bt = closed_form_b_infinity(inst, kernels, q0)?;
    let b0 = inst.b0_vec();
    let d_dot = dot(&b0, &bt);
    let zt_norm = dot(&bt, &bt);
    let diff: Vec<f64> = bt.iter().zip(&b0).map(|(a, b)| a - b).collect();
    Ok(TrendPoint {
        d_euc: dot(&diff, &diff),
        d_dot,
        zt_norm,
        d_cos: d_dot / (norm(&bt) * norm(&b0)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCurve {
    pub beta: Vec<f64>,
    pub d_euc: Vec<f64>,
    pub d_dot: Vec<f64>,
    pub zt_norm: Vec<f64>,
    pub d_cos: Vec<f64>,
    pub phase: Vec<Phase>,
}

impl TrendCurve {
    /// CSV: `beta,d_euc,d_dot,zt_norm,d_cos,phase`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "beta,d_euc,d_dot,zt_norm,d_cos,phase")?;
        for i in 0..self.beta.len() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                format_float(self.beta[i]),
                format_float(self.d_euc[i]),
                format_float(self.d_dot[i]),
                format_float(self.zt_norm[i]),
                format_float(self.d_cos[i]),
                self.phase[i]
            )?;
        }
        Ok(())
    }
}

fn trend_curves_raw(inst: &LinearInstance, kernels: &KernelPair, grid: &[f64]) -> TrendCurve {
    let pts: Vec<TrendPoint> = grid
        .iter()
        .map(|&b| {
            let q: Vec<f64> = inst.y.iter().map(|y| b * y).collect();
            metrics_at(inst, kernels, &q)
        })
        .collect();
    TrendCurve {
        beta: grid.to_vec(),
        d_euc: pts.iter().map(|p| p.d_euc).collect(),
        d_dot: pts.iter().map(|p| p.d_dot).collect(),
        zt_norm: pts.iter().map(|p| p.zt_norm).collect(),
        d_cos: pts.iter().map(|p| p.d_cos).collect(),
        phase: vec![Phase::Unknown; grid.len()],
    }
}

/// Curves along `q₀ = βY` with a phase tag per grid point.
pub fn trend_curves(inst: &LinearInstance, kernels: &KernelPair, grid: &[f64]) -> TrendCurve {
    assert!(!grid.is_empty(), "beta grid is empty");
    assert!(grid.windows(2).all(|w| w[1] > w[0]), "beta grid must be strictly increasing");
    let cp = critical_points(inst, kernels);
    let mut curve = trend_curves_raw(inst, kernels, grid);
    curve.phase = grid.iter().map(|&b| classify_phase(b, &cp)).collect();
    curve
}

/// One point of a GD trajectory on the linear model.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearState {
    pub b: Matrix,
    pub v: Vec<f64>,
}

/// Plain GD on `½‖XBᵀv − Y‖²`. Returns every state including the start.
/// With `head_only`, `B` stays at `B₀`.
pub fn gd_trajectory(inst: &LinearInstance, lr: f64, steps: usize, head_only: bool) -> Vec<LinearState> {
    let mut out = Vec::with_capacity(steps + 1);
    let mut s = LinearState {
        b: inst.b0.clone(),
        v: inst.v0.clone(),
    };
    out.push(s.clone());
    for _ in 0..steps {
        s = gd_step(inst, &s, lr, head_only);
        out.push(s.clone());
    }
    out
}

fn gd_step(inst: &LinearInstance, s: &LinearState, lr: f64, head_only: bool) -> LinearState {
    let xbt_v = inst.x.matvec(&s.b.t_matvec(&s.v));
    let resid: Vec<f64> = xbt_v.iter().zip(&inst.y).map(|(q, y)| q - y).collect();
    let xr = inst.x.t_matvec(&resid);
    let gv = s.b.matvec(&xr);
    let mut b = s.b.clone();
    if !head_only {
        b.add_scaled(-lr, &Matrix::outer(&s.v, &xr));
    }
    let v = s.v.iter().zip(&gv).map(|(v, g)| v - lr * g).collect();
    LinearState { b, v }
}

/// Runs GD until `‖q − Y‖ ≤ tol` or `max_steps`; returns `(state, steps)`.
pub fn gd_converge(inst: &LinearInstance, lr: f64, max_steps: usize, tol: f64, head_only: bool) -> (LinearState, usize) {
    let mut s = LinearState {
        b: inst.b0.clone(),
        v: inst.v0.clone(),
    };
    for step in 0..max_steps {
        let q = inst.x.matvec(&s.b.t_matvec(&s.v));
        let r: Vec<f64> = q.iter().zip(&inst.y).map(|(a, b)| a - b).collect();
        if norm(&r) <= tol {
            return (s, step);
        }
        s = gd_step(inst, &s, lr, head_only);
    }
    (s, max_steps)
}

/// A stable step size for GD on the instance: `0.5 / λ_max(K₀)`.
pub fn safe_lr(kernels: &KernelPair) -> f64 {
    let top = crate::numkernel::sym_eigen(&kernels.k0).values[0];
    0.5 / top
}

/// `‖(v_tv_tᵀ − B_tB_tᵀ) − (v₀v₀ᵀ − B₀B₀ᵀ)‖_F` per trajectory point.
pub fn conservation_check(trajectory: &[LinearState]) -> Vec<f64> {
    let invariant = |s: &LinearState| Matrix::outer(&s.v, &s.v).sub(&s.b.matmul_nt(&s.b));
    let Some(first) = trajectory.first() else {
        return Vec::new();
    };
    let base = invariant(first);
    trajectory.iter().map(|s| invariant(s).sub(&base).frobenius_norm()).collect()
}

/// Cholesky-based check that `K₀ − K̃₀ = ‖v₀‖²XXᵀ`; returns the relative gap.
pub fn kernel_difference_gap(inst: &LinearInstance, kernels: &KernelPair) -> f64 {
    let vsq = dot(&inst.v0, &inst.v0);
    let want = inst.x.matmul_nt(&inst.x).scale(vsq);
    let got = kernels.k0.sub(&kernels.ktilde0);
    got.max_abs_diff(&want) / kernels.k0.frobenius_norm().max(f64::MIN_POSITIVE)
}

/// True if `K₀` factors without jitter.
pub fn k0_is_spd(kernels: &KernelPair) -> bool {
    Cholesky::factor(&kernels.k0).is_ok()
}
