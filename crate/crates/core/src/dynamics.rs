//! One-step feature dynamics split into kernel, direction and energy terms,
//! the average initial energy (AIE), and empirical-NTK change probes.
//!
//! For one gradient step of size `γ` on the mean loss over `N` samples,
//!
//! ```text
//! Δz_j ≈ (γ/N) Σ_n κ^(j,n) (∇_z q^(n))ᵀ (e_{y_n} − p^(n))
//! ```
//!
//! with `κ^(j,n) = (∇_B z^(j))(∇_B z^(n))ᵀ`.

use crate::datagen::format_float;
use crate::error::{Error, Result};
use crate::models::{JacobianFactors, LossKind, Network};
use crate::numkernel::{argmax, mean, norm, sub, Matrix, RngState};
use crate::training::{RunBundle, SnapshotTag};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Number of equal-width histogram bins on `[0, √2]`.
pub const ENERGY_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub e_aie: f64,
    /// `‖t_n − p_n‖₂` per sample.
    pub energies: Vec<f64>,
    /// Predicted value at the target's argmax (`[p₀]_y`).
    pub correct_prob: Vec<f64>,
    pub histogram: Vec<HistogramBin>,
}

impl EnergyReport {
    /// CSV: `sample_id,energy,correct_prob`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "sample_id,energy,correct_prob")?;
        for (i, (e, p)) in self.energies.iter().zip(&self.correct_prob).enumerate() {
            writeln!(w, "{},{},{}", i, format_float(*e), format_float(*p))?;
        }
        Ok(())
    }
}

/// Per-sample energy `‖t − p‖₂` (CE) or `‖t − q‖₂` (MSE) for given target rows.
pub fn sample_energies(logits: &Matrix, targets: &Matrix, loss: LossKind) -> (Vec<f64>, Vec<f64>) {
    let mut energies = Vec::with_capacity(logits.rows());
    let mut correct = Vec::with_capacity(logits.rows());
    for i in 0..logits.rows() {
        let p = loss.prediction(logits.row(i));
        energies.push(norm(&sub(targets.row(i), &p)));
        correct.push(p[argmax(targets.row(i))]);
    }
    (energies, correct)
}

pub fn compute_aie(model: &Network, x: &Matrix, targets: &Matrix, loss: LossKind) -> EnergyReport {
    let (energies, correct_prob) = sample_energies(&model.predict(x), targets, loss);
    let top = std::f64::consts::SQRT_2;
    let width = top / ENERGY_BINS as f64;
    let mut histogram: Vec<HistogramBin> = (0..ENERGY_BINS)
        .map(|b| HistogramBin {
            lo: b as f64 * width,
            hi: (b + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for e in &energies {
        // MSE energies above √2 land in the last bin
        let b = ((e / width) as usize).min(ENERGY_BINS - 1);
        histogram[b].count += 1;
    }
    EnergyReport {
        e_aie: mean(&energies),
        energies,
        correct_prob,
        histogram,
    }
}

/// Stored parts of one decomposed step plus the realized feature change.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDecomposition {
    pub gamma: f64,
    pub probe_ids: Vec<usize>,
    /// `kernels[j][n]` = κ^(probe_j, n) for every batch sample n.
    pub kernels: Vec<Vec<Matrix>>,
    /// `∇_z q^(n)` (k x h) per batch sample.
    pub directions: Vec<Matrix>,
    /// `e_{y_n} − p^(n)` per batch sample.
    pub energies: Vec<Vec<f64>>,
    pub predicted: Vec<Vec<f64>>,
    /// Δz after a step that updates only the backbone.
    pub actual_backbone: Vec<Vec<f64>>,
    /// Δz after the usual joint step.
    pub actual_joint: Vec<Vec<f64>>,
    pub residual_backbone: Vec<f64>,
    pub residual_joint: Vec<f64>,
}

impl StepDecomposition {
    /// Rebuilds the predicted Δz of probe `j` from the stored parts.
    pub fn recompose(&self, j: usize) -> Vec<f64> {
        compose(self.gamma, &self.kernels[j], &self.directions, &self.energies)
    }

    pub fn max_residual_backbone(&self) -> f64 {
        self.residual_backbone.iter().cloned().fold(0.0, f64::max)
    }

    pub fn max_residual_joint(&self) -> f64 {
        self.residual_joint.iter().cloned().fold(0.0, f64::max)
    }

    /// CSV: `probe_id,predicted_norm,actual_norm,residual_backbone,residual_joint`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "probe_id,predicted_norm,actual_norm,residual_backbone,residual_joint")?;
        for (j, id) in self.probe_ids.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{}",
                id,
                format_float(norm(&self.predicted[j])),
                format_float(norm(&self.actual_joint[j])),
                format_float(self.residual_backbone[j]),
                format_float(self.residual_joint[j])
            )?;
        }
        Ok(())
    }
}

fn compose(gamma: f64, kernels: &[Matrix], directions: &[Matrix], energies: &[Vec<f64>]) -> Vec<f64> {
    let n = directions.len();
    let h = directions[0].cols();
    let mut out = vec![0.0; h];
    for ((k, d), e) in kernels.iter().zip(directions).zip(energies) {
        let u = d.t_matvec(e);
        let ku = k.matvec(&u);
        out.iter_mut().zip(&ku).for_each(|(o, v)| *o += v);
    }
    let s = gamma / n as f64;
    out.iter_mut().for_each(|o| *o *= s);
    out
}

/// Decomposes one full-batch GD step of size `gamma` on `(x, targets)`.
pub fn decompose_step(
    model: &Network,
    x: &Matrix,
    targets: &Matrix,
    loss: LossKind,
    gamma: f64,
    probe_ids: &[usize],
) -> Result<StepDecomposition> {
    assert!(gamma > 0.0, "gamma must be positive");
    assert!(probe_ids.iter().all(|&j| j < x.rows()), "probe id out of range");
    let n = x.rows();
    let factors: Vec<JacobianFactors> = (0..n)
        .into_par_iter()
        .map(|i| model.backbone_jacobian_factors(x.row(i)))
        .collect();
    let q = model.predict(x);
    let directions: Vec<Matrix> = (0..n).map(|i| model.grad_q_wrt_z(x.row(i))).collect();
    let energies: Vec<Vec<f64>> = (0..n)
        .map(|i| loss.grad_q(q.row(i), targets.row(i)).iter().map(|g| -g).collect())
        .collect();
    let kernels: Vec<Vec<Matrix>> = probe_ids
        .par_iter()
        .map(|&j| factors.iter().map(|f| factors[j].kernel_with(f)).collect())
        .collect();
    let predicted: Vec<Vec<f64>> = kernels.iter().map(|k| compose(gamma, k, &directions, &energies)).collect();

    let (_, grads) = model.loss_and_grads(x, targets, loss)?;
    let nb = model.backbone.param_count();
    let mut stepped = model.params();
    for (p, g) in stepped.iter_mut().zip(grads.flat()) {
        *p -= gamma * g;
    }
    let mut backbone_only = model.clone();
    backbone_only.backbone.set_params(&stepped[..nb]);
    let mut joint = model.clone();
    joint.set_params(&stepped);

    let xp = x.select_rows(probe_ids);
    let z0 = model.features(&xp);
    let zb = backbone_only.features(&xp);
    let zj = joint.features(&xp);
    let delta = |z1: &Matrix| -> Vec<Vec<f64>> { (0..xp.rows()).map(|r| sub(z1.row(r), z0.row(r))).collect() };
    let actual_backbone = delta(&zb);
    let actual_joint = delta(&zj);
    let resid = |act: &[Vec<f64>]| -> Vec<f64> { act.iter().zip(&predicted).map(|(a, p)| norm(&sub(a, p))).collect() };
    Ok(StepDecomposition {
        gamma,
        probe_ids: probe_ids.to_vec(),
        residual_backbone: resid(&actual_backbone),
        residual_joint: resid(&actual_joint),
        kernels,
        directions,
        energies,
        predicted,
        actual_backbone,
        actual_joint,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtkProbeRecord {
    pub sample_ids: Vec<usize>,
    /// Ordered pairs `(j, n)` over `sample_ids`.
    pub pair_ids: Vec<(usize, usize)>,
    /// Mean `‖κ^(j,n)‖_F` per trajectory point (index 0 is the FT start).
    pub k_norm: Vec<f64>,
    /// Mean `‖κ_{t+1} − κ_t‖_F` between consecutive trajectory points.
    pub k_gap: Vec<f64>,
}

impl NtkProbeRecord {
    pub fn mean_k_gap(&self) -> f64 {
        mean(&self.k_gap)
    }

    /// CSV: `epoch,k_norm,k_gap` (k_gap empty at epoch 0).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,k_norm,k_gap")?;
        for (e, kn) in self.k_norm.iter().enumerate() {
            let gap = if e == 0 { String::new() } else { format_float(self.k_gap[e - 1]) };
            writeln!(w, "{},{},{}", e, format_float(*kn), gap)?;
        }
        Ok(())
    }
}

/// Backbone kernel blocks for every ordered pair over `sample_ids`.
pub fn kernel_blocks(model: &Network, x: &Matrix, sample_ids: &[usize]) -> Vec<Matrix> {
    let factors: Vec<JacobianFactors> = sample_ids
        .par_iter()
        .map(|&i| model.backbone_jacobian_factors(x.row(i)))
        .collect();
    let m = sample_ids.len();
    (0..m * m)
        .into_par_iter()
        .map(|p| factors[p / m].kernel_with(&factors[p % m]))
        .collect()
}

/// k_norm / k_gap along a sequence of models on a fixed sample set.
pub fn ntk_probe_models(models: &[Network], x: &Matrix, sample_ids: &[usize]) -> NtkProbeRecord {
    let mut k_norm = Vec::with_capacity(models.len());
    let mut k_gap = Vec::with_capacity(models.len().saturating_sub(1));
    let mut prev: Option<Vec<Matrix>> = None;
    for m in models {
        let blocks = kernel_blocks(m, x, sample_ids);
        k_norm.push(mean(&blocks.iter().map(Matrix::frobenius_norm).collect::<Vec<_>>()));
        if let Some(p) = &prev {
            let gaps: Vec<f64> = blocks.iter().zip(p).map(|(a, b)| a.sub(b).frobenius_norm()).collect();
            k_gap.push(mean(&gaps));
        }
        prev = Some(blocks);
    }
    let pair_ids = sample_ids
        .iter()
        .flat_map(|&j| sample_ids.iter().map(move |&n| (j, n)))
        .collect();
    NtkProbeRecord {
        sample_ids: sample_ids.to_vec(),
        pair_ids,
        k_norm,
        k_gap,
    }
}

/// NTK probe over a run's FT trajectory using `n_probe` seeded training samples.
pub fn ntk_probe(bundle: &RunBundle, x_train: &Matrix, n_probe: usize, rng: &RngState) -> Result<NtkProbeRecord> {
    assert!(n_probe >= 2, "need at least two probe samples");
    if bundle.trajectory.is_empty() {
        return Err(Error::Missing("run bundle has no FT trajectory".into()));
    }
    let mut ids = rng.fork_named("ntk-probe").sample_indices(x_train.rows(), n_probe.min(x_train.rows()));
    ids.sort_unstable();
    Ok(ntk_probe_models(&bundle.trajectory, x_train, &ids))
}

/// Upper bound on `‖∇_z q‖_F`: product of head weight Frobenius norms.
pub fn head_jacobian_bound(model: &Network) -> f64 {
    model.head.layers.iter().map(|l| l.w.frobenius_norm()).product()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AieBoundCheck {
    /// Mean `‖z_T − z₀‖₂` over the probe set.
    pub lhs: f64,
    pub gamma: f64,
    pub steps: usize,
    pub c1: f64,
    pub c2: f64,
    pub c: f64,
    pub e_aie: f64,
    pub holds: bool,
    /// `c·E_aie / lhs` (infinite when lhs = 0).
    pub slack: f64,
    /// Fraction of training samples whose energy did not grow over FT.
    pub stable_fraction: f64,
}

/// Checks `E‖z_T − z₀‖ ≤ c·E_aie` with `c = γ·C₁·C₂·T`; `γ` is the effective
/// step size under momentum and `T` the number of FT optimizer steps.
pub fn check_aie_bound(bundle: &RunBundle, ntk: &NtkProbeRecord, x_train: &Matrix, ft_targets: &Matrix) -> Result<AieBoundCheck> {
    let z0 = bundle
        .snapshot(SnapshotTag::Z0)
        .ok_or_else(|| Error::Missing("z0 snapshot".into()))?;
    let zt = bundle
        .snapshot(SnapshotTag::ZT)
        .ok_or_else(|| Error::Missing("zT snapshot".into()))?;
    if z0.probe_ids != zt.probe_ids {
        return Err(Error::ProbeMismatch);
    }
    let aie = bundle
        .record
        .aie
        .as_ref()
        .ok_or_else(|| Error::Missing("AIE report".into()))?;
    let ft = bundle
        .record
        .ft_config
        .as_ref()
        .ok_or_else(|| Error::Missing("FT config".into()))?;
    if bundle.trajectory.is_empty() {
        return Err(Error::Missing("run bundle has no FT trajectory".into()));
    }
    let dists: Vec<f64> = (0..z0.features.rows())
        .map(|r| norm(&sub(zt.features.row(r), z0.features.row(r))))
        .collect();
    let lhs = mean(&dists);
    let c1 = ntk.k_norm.iter().cloned().fold(0.0, f64::max);
    let c2 = bundle.trajectory.iter().map(head_jacobian_bound).fold(0.0, f64::max);
    let gamma = ft.effective_lr();
    let steps = bundle.record.ft_steps;
    let c = gamma * c1 * c2 * steps as f64;
    let rhs = c * aie.e_aie;
    let loss = ft.loss;
    let (start, _) = sample_energies(&bundle.trajectory[0].predict(x_train), ft_targets, loss);
    let (end, _) = sample_energies(&bundle.trajectory.last().unwrap().predict(x_train), ft_targets, loss);
    let stable = start.iter().zip(&end).filter(|(s, e)| e <= s).count();
    Ok(AieBoundCheck {
        lhs,
        gamma,
        steps,
        c1,
        c2,
        c,
        e_aie: aie.e_aie,
        holds: lhs <= rhs,
        slack: if lhs > 0.0 { rhs / lhs } else { f64::INFINITY },
        stable_fraction: stable as f64 / start.len().max(1) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionSeries {
    pub epochs: Vec<usize>,
    pub head_grad_norm: Vec<f64>,
    pub head_norm: Vec<f64>,
    pub direction_change: Vec<f64>,
    /// True for a linear head trained without momentum, where
    /// `‖∇_z q_{t+1} − ∇_z q_t‖_F = γ‖∇_v L‖` holds exactly per step.
    pub exact: bool,
    pub max_identity_gap: f64,
}

impl DirectionSeries {
    /// Identity verified to `tol` (only meaningful when `exact`).
    pub fn identity_holds(&self, tol: f64) -> bool {
        self.exact && self.max_identity_gap <= tol
    }

    /// CSV: `epoch,head_grad_norm,head_norm,direction_change`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,head_grad_norm,head_norm,direction_change")?;
        for i in 0..self.epochs.len() {
            writeln!(
                w,
                "{},{},{},{}",
                self.epochs[i],
                format_float(self.head_grad_norm[i]),
                format_float(self.head_norm[i]),
                format_float(self.direction_change[i])
            )?;
        }
        Ok(())
    }
}

pub fn track_direction(bundle: &RunBundle) -> DirectionSeries {
    let t = &bundle.record.ft_trace;
    let momentum = bundle.record.ft_config.as_ref().map_or(0.0, |c| c.momentum);
    DirectionSeries {
        epochs: t.iter().map(|e| e.epoch).collect(),
        head_grad_norm: t.iter().map(|e| e.head_grad_norm).collect(),
        head_norm: t.iter().map(|e| e.head_norm).collect(),
        direction_change: t.iter().map(|e| e.direction_change).collect(),
        exact: bundle.model.head.layers.len() == 1 && momentum == 0.0,
        max_identity_gap: t.iter().map(|e| e.identity_gap).fold(0.0, f64::max),
    }
}
