//! Feature-adaptation metrics between snapshots, PCA scatter export with a
//! frozen z₀ basis, and the head-exchange accuracy matrix.

use crate::datagen::format_float;
use crate::error::{Error, Result};
use crate::models::{accuracy_of, Network};
use crate::numkernel::{dot, mean, pca_top2, Matrix, Pca2};
use crate::training::{FeatureSnapshot, SnapshotTag, TaskData};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub sample_id: usize,
    /// `‖z_T − z₀‖²`
    pub d_euc: f64,
    /// `z_Tᵀz₀`
    pub d_dot: f64,
    pub d_cos: f64,
    /// `‖z_T‖²`
    pub norm_t: f64,
    /// `‖z₀‖²`
    pub norm_0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub per_probe: Vec<ProbeMetrics>,
    pub mean_d_euc: f64,
    pub mean_d_dot: f64,
    pub mean_d_cos: f64,
    pub mean_norm_t: f64,
    pub mean_norm_0: f64,
    /// Max relative gap of `d_euc = norm_T − 2·d_dot + norm_0` over probes.
    pub identity_gap: f64,
}

impl AdaptationReport {
    pub fn one_minus_cos(&self) -> f64 {
        1.0 - self.mean_d_cos
    }

    /// CSV: `sample_id,d_euc,d_dot,d_cos,norm_t,norm_0`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "sample_id,d_euc,d_dot,d_cos,norm_t,norm_0")?;
        for p in &self.per_probe {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                p.sample_id,
                format_float(p.d_euc),
                format_float(p.d_dot),
                format_float(p.d_cos),
                format_float(p.norm_t),
                format_float(p.norm_0)
            )?;
        }
        Ok(())
    }
}

/// Cosine with the conventions `cos(0, 0) = 1` and `cos(0, z) = 0`.
fn cosine(a: &[f64], b: &[f64], na2: f64, nb2: f64) -> f64 {
    match (na2 > 0.0, nb2 > 0.0) {
        (false, false) => 1.0,
        (true, true) => (dot(a, b) / (na2.sqrt() * nb2.sqrt())).clamp(-1.0, 1.0),
        _ => 0.0,
    }
}

pub fn adaptation_report(z0: &FeatureSnapshot, zt: &FeatureSnapshot) -> Result<AdaptationReport> {
    if z0.probe_ids != zt.probe_ids || z0.features.shape() != zt.features.shape() {
        return Err(Error::ProbeMismatch);
    }
    let mut per_probe = Vec::with_capacity(z0.probe_ids.len());
    let mut identity_gap: f64 = 0.0;
    for (r, &id) in z0.probe_ids.iter().enumerate() {
        let a = z0.features.row(r);
        let b = zt.features.row(r);
        let norm_0 = dot(a, a);
        let norm_t = dot(b, b);
        let d_dot = dot(a, b);
        let d_euc: f64 = a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum();
        let scale = norm_0 + norm_t;
        if scale > 0.0 {
            identity_gap = identity_gap.max((d_euc - (norm_t - 2.0 * d_dot + norm_0)).abs() / scale);
        }
        per_probe.push(ProbeMetrics {
            sample_id: id,
            d_euc,
            d_dot,
            d_cos: cosine(a, b, norm_0, norm_t),
            norm_t,
            norm_0,
        });
    }
    let avg = |f: fn(&ProbeMetrics) -> f64| mean(&per_probe.iter().map(f).collect::<Vec<_>>());
    Ok(AdaptationReport {
        mean_d_euc: avg(|p| p.d_euc),
        mean_d_dot: avg(|p| p.d_dot),
        mean_d_cos: avg(|p| p.d_cos),
        mean_norm_t: avg(|p| p.norm_t),
        mean_norm_0: avg(|p| p.norm_0),
        identity_gap,
        per_probe,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub tag: SnapshotTag,
    pub sample_id: usize,
    pub label: usize,
    pub pc1: f64,
    pub pc2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScatterTable {
    pub rows: Vec<ScatterRow>,
    pub pca: Pca2,
}

impl ScatterTable {
    /// CSV: `snapshot_tag,sample_id,label,pc1,pc2`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "snapshot_tag,sample_id,label,pc1,pc2")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.tag,
                r.sample_id,
                r.label,
                format_float(r.pc1),
                format_float(r.pc2)
            )?;
        }
        Ok(())
    }
}

/// Projects every snapshot onto the top-2 PCA basis of the z₀ snapshot.
/// `labels` is indexed by sample id.
pub fn pca_scatter_export(snapshots: &[FeatureSnapshot], labels: &[usize]) -> Result<ScatterTable> {
    let z0 = snapshots
        .iter()
        .find(|s| s.tag == SnapshotTag::Z0)
        .ok_or_else(|| Error::Missing("z0 snapshot".into()))?;
    let (_, pca) = pca_top2(&z0.features);
    let mut rows = Vec::new();
    for s in snapshots {
        if s.probe_ids != z0.probe_ids {
            return Err(Error::ProbeMismatch);
        }
        let proj = pca.project(&s.features);
        for (r, &id) in s.probe_ids.iter().enumerate() {
            rows.push(ScatterRow {
                tag: s.tag,
                sample_id: id,
                label: labels[id],
                pc1: proj[(r, 0)],
                pc2: proj[(r, 1)],
            });
        }
    }
    Ok(ScatterTable { rows, pca })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeMatrix {
    pub taus: Vec<usize>,
    /// Row = backbone's run, column = head's run.
    pub train_acc: Matrix,
    pub valid_acc: Matrix,
}

impl ExchangeMatrix {
    pub fn diagonal_mean(&self, m: &Matrix) -> f64 {
        mean(&(0..m.rows()).map(|i| m[(i, i)]).collect::<Vec<_>>())
    }

    pub fn off_diagonal_mean(&self, m: &Matrix) -> f64 {
        let n = m.rows();
        let vals: Vec<f64> = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)])
            .collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            mean(&vals)
        }
    }

    /// Mean off-diagonal valid accuracy of row `i` (backbone i with foreign heads).
    pub fn row_compatibility(&self, i: usize) -> f64 {
        let n = self.taus.len();
        mean(&(0..n).filter(|&j| j != i).map(|j| self.valid_acc[(i, j)]).collect::<Vec<_>>())
    }

    /// Mean off-diagonal valid accuracy of column `j` (head j on foreign backbones).
    pub fn col_compatibility(&self, j: usize) -> f64 {
        let n = self.taus.len();
        mean(&(0..n).filter(|&i| i != j).map(|i| self.valid_acc[(i, j)]).collect::<Vec<_>>())
    }

    /// Row and column compatibility averaged, per run.
    pub fn compatibility(&self) -> Vec<f64> {
        (0..self.taus.len())
            .map(|k| 0.5 * (self.row_compatibility(k) + self.col_compatibility(k)))
            .collect()
    }

    /// CSV: `backbone_tau,head_tau,train_acc,valid_acc` (row = backbone).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "backbone_tau,head_tau,train_acc,valid_acc")?;
        for (i, ti) in self.taus.iter().enumerate() {
            for (j, tj) in self.taus.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{},{}",
                    ti,
                    tj,
                    format_float(self.train_acc[(i, j)]),
                    format_float(self.valid_acc[(i, j)])
                )?;
            }
        }
        Ok(())
    }
}

/// Evaluates every (backbone_i, head_j) pairing without training.
pub fn head_exchange(runs: &[(usize, Network)], data: &TaskData) -> Result<ExchangeMatrix> {
    let Some((_, first)) = runs.first() else {
        return Err(Error::Missing("no runs to exchange".into()));
    };
    let arch = first.architecture();
    if runs.iter().any(|(_, n)| n.architecture() != arch || !n.head.same_shape(&first.head)) {
        return Err(Error::ArchitectureMismatch("exchange runs differ in architecture".into()));
    }
    let m = runs.len();
    let feats: Vec<(Matrix, Matrix)> = runs
        .par_iter()
        .map(|(_, n)| (n.features(&data.train.x), n.features(&data.valid.x)))
        .collect();
    let cells: Vec<(f64, f64)> = (0..m * m)
        .into_par_iter()
        .map(|c| {
            let (i, j) = (c / m, c % m);
            let head = &runs[j].1.head;
            (
                accuracy_of(&head.forward_batch(&feats[i].0), &data.train.labels),
                accuracy_of(&head.forward_batch(&feats[i].1), &data.valid.labels),
            )
        })
        .collect();
    let mut train_acc = Matrix::zeros(m, m);
    let mut valid_acc = Matrix::zeros(m, m);
    for (c, (t, v)) in cells.into_iter().enumerate() {
        train_acc[(c / m, c % m)] = t;
        valid_acc[(c / m, c % m)] = v;
    }
    Ok(ExchangeMatrix {
        taus: runs.iter().map(|(t, _)| *t).collect(),
        train_acc,
        valid_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(tag: SnapshotTag, rows: &[[f64; 2]]) -> FeatureSnapshot {
        FeatureSnapshot {
            tag,
            features: Matrix::from_rows(rows),
            probe_ids: (0..rows.len()).collect(),
        }
    }

    #[test]
    fn identical_snapshots() {
        let z = snap(SnapshotTag::Z0, &[[1.0, 2.0], [-3.0, 0.5]]);
        let r = adaptation_report(&z, &z).unwrap();
        assert_eq!(r.mean_d_euc, 0.0);
        assert!((r.mean_d_cos - 1.0).abs() < 1e-15);
        assert_eq!(r.mean_d_dot, r.mean_norm_0);
    }

    #[test]
    fn pure_stretch() {
        let z0 = snap(SnapshotTag::Z0, &[[1.0, 2.0]]);
        let zt = snap(SnapshotTag::ZT, &[[2.0, 4.0]]);
        let r = adaptation_report(&z0, &zt).unwrap();
        assert!((r.mean_d_cos - 1.0).abs() < 1e-15);
        assert_eq!(r.mean_d_dot, 2.0 * r.mean_norm_0);
        assert_eq!(r.mean_d_euc, r.mean_norm_0);
    }

    #[test]
    fn orthogonal_change() {
        let z0 = snap(SnapshotTag::Z0, &[[1.0, 0.0]]);
        let zt = snap(SnapshotTag::ZT, &[[0.0, 3.0]]);
        let r = adaptation_report(&z0, &zt).unwrap();
        assert_eq!(r.mean_d_dot, 0.0);
        assert_eq!(r.mean_d_cos, 0.0);
    }

    #[test]
    fn mismatched_probes_rejected() {
        let z0 = snap(SnapshotTag::Z0, &[[1.0, 0.0]]);
        let mut zt = snap(SnapshotTag::ZT, &[[0.0, 3.0]]);
        zt.probe_ids = vec![7];
        assert!(matches!(adaptation_report(&z0, &zt), Err(Error::ProbeMismatch)));
    }
}
