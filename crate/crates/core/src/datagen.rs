//! Synthetic datasets: Gaussian class clouds standing in for the pretraining
//! and downstream image tasks, a parametric distortion that plays the role of
//! rotation/crop augmentation, label smoothing, and overparameterized
//! regression instances for the closed-form analysis.

use crate::error::{Error, Result};
use crate::numkernel::{norm, sym_eigen, Matrix, RngState};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationDataset {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl ClassificationDataset {
    pub fn new(x: Matrix, labels: Vec<usize>, num_classes: usize, split: Split) -> Self {
        assert_eq!(x.rows(), labels.len(), "one label per row");
        assert!(!labels.is_empty(), "dataset must not be empty");
        assert!(
            labels.iter().all(|&l| l < num_classes),
            "label out of range"
        );
        Self {
            x,
            labels,
            num_classes,
            split,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// One-hot rows `e_y`.
    pub fn onehot(&self) -> Matrix {
        let mut m = Matrix::zeros(self.len(), self.num_classes);
        for (i, &y) in self.labels.iter().enumerate() {
            m[(i, y)] = 1.0;
        }
        m
    }

    pub fn subset(&self, idx: &[usize]) -> ClassificationDataset {
        ClassificationDataset::new(
            self.x.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
            self.split,
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Stratified split; the first `valid_frac` of each class (after a
    /// seeded shuffle) goes to the validation set.
    pub fn train_valid_split(
        &self,
        valid_frac: f64,
        rng: &mut RngState,
    ) -> (ClassificationDataset, ClassificationDataset) {
        assert!((0.0..1.0).contains(&valid_frac));
        let mut train = Vec::new();
        let mut valid = Vec::new();
        for c in 0..self.num_classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            rng.shuffle(&mut idx);
            let nv = (idx.len() as f64 * valid_frac).round() as usize;
            valid.extend_from_slice(&idx[..nv]);
            train.extend_from_slice(&idx[nv..]);
        }
        train.sort_unstable();
        valid.sort_unstable();
        let mut tr = self.subset(&train);
        tr.split = Split::Train;
        let mut va = self.subset(&valid);
        va.split = Split::Valid;
        (tr, va)
    }

    /// CSV: header `x0,...,x{d-1},label`, one sample per row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.dim();
        let header: Vec<String> = (0..d)
            .map(|j| format!("x{j}"))
            .chain(std::iter::once("label".to_string()))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut line: Vec<String> = self.x.row(i).iter().map(|v| format_float(*v)).collect();
            line.push(self.labels[i].to_string());
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    /// Reads the CSV form written by [`write_csv`](Self::write_csv). The class
    /// count is `max(label) + 1` unless `num_classes` is given.
    pub fn read_csv<R: BufRead>(
        r: R,
        num_classes: Option<usize>,
        split: Split,
    ) -> Result<ClassificationDataset> {
        let (cols, rows) = read_numeric_csv(r, "label")?;
        let d = cols - 1;
        let mut x = Vec::with_capacity(rows.len() * d);
        let mut labels = Vec::with_capacity(rows.len());
        for (n, row) in rows.iter().enumerate() {
            x.extend_from_slice(&row[..d]);
            let l = row[d];
            if l < 0.0 || l.fract() != 0.0 {
                return Err(Error::Parse(format!("row {}: bad label {l}", n + 2)));
            }
            labels.push(l as usize);
        }
        if labels.is_empty() {
            return Err(Error::Parse("no samples".into()));
        }
        let k = num_classes.unwrap_or_else(|| labels.iter().max().unwrap() + 1);
        if labels.iter().any(|&l| l >= k) {
            return Err(Error::Parse(format!("label exceeds class count {k}")));
        }
        Ok(ClassificationDataset::new(
            Matrix::from_vec(labels.len(), d, x),
            labels,
            k,
            split,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionDataset {
    pub x: Matrix,
    pub y: Vec<f64>,
}

impl RegressionDataset {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.x.cols();
        let header: Vec<String> = (0..d)
            .map(|j| format!("x{j}"))
            .chain(std::iter::once("y".to_string()))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.y.len() {
            let mut line: Vec<String> = self.x.row(i).iter().map(|v| format_float(*v)).collect();
            line.push(format_float(self.y[i]));
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<RegressionDataset> {
        let (cols, rows) = read_numeric_csv(r, "y")?;
        let d = cols - 1;
        let mut x = Vec::with_capacity(rows.len() * d);
        let mut y = Vec::with_capacity(rows.len());
        for row in &rows {
            x.extend_from_slice(&row[..d]);
            y.push(row[d]);
        }
        Ok(RegressionDataset {
            x: Matrix::from_vec(y.len(), d, x),
            y,
        })
    }
}

/// Floats in CSV/console output: 9 significant digits.
pub fn format_float(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        let s = if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        };
        if s == "-0" {
            "0".to_string()
        } else {
            s
        }
    } else {
        format!("{v:.8e}")
    }
}

fn read_numeric_csv<R: BufRead>(r: R, last_col: &str) -> Result<(usize, Vec<Vec<f64>>)> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty csv".into()))??;
    let names: Vec<&str> = header.trim().split(',').collect();
    if names.len() < 2 || names.last() != Some(&last_col) {
        return Err(Error::Parse(format!(
            "header must end with `{last_col}`, got `{header}`"
        )));
    }
    let cols = names.len();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|e| Error::Parse(format!("row {}: {e}", n + 2)))?;
        if vals.len() != cols {
            return Err(Error::Parse(format!(
                "row {}: expected {cols} fields, got {}",
                n + 2,
                vals.len()
            )));
        }
        rows.push(vals);
    }
    Ok((cols, rows))
}

/// Class means for a Gaussian-cloud task. Kept separate from sampling so the
/// pretraining and downstream sets can share means but not noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianClasses {
    /// K x d.
    pub means: Matrix,
}

impl GaussianClasses {
    /// Means are the first K columns of a seeded random orthogonal matrix
    /// scaled to `mean_radius` (Gram–Schmidt on Gaussian columns). When
    /// `K > d` the extra means are random unit directions.
    pub fn new(d: usize, k: usize, mean_radius: f64, rng: &mut RngState) -> Self {
        assert!(d >= 2 && k >= 2, "need d >= 2 and K >= 2");
        assert!(mean_radius > 0.0, "mean_radius must be positive");
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
        while basis.len() < k {
            let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            if basis.len() < d {
                for b in &basis {
                    let p: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                    v.iter_mut().zip(b).for_each(|(a, c)| *a -= p * c);
                }
            }
            let n = norm(&v);
            if n < 1e-8 {
                continue;
            }
            v.iter_mut().for_each(|a| *a /= n);
            basis.push(v);
        }
        let means = Matrix::from_rows(&basis).scale(mean_radius);
        Self { means }
    }

    pub fn num_classes(&self) -> usize {
        self.means.rows()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    /// Balanced sample: `n_per_class` rows per class, class-major order.
    pub fn sample(
        &self,
        n_per_class: usize,
        noise_sigma: f64,
        rng: &mut RngState,
    ) -> ClassificationDataset {
        assert!(noise_sigma >= 0.0);
        assert!(n_per_class >= 1);
        let k = self.num_classes();
        let d = self.dim();
        let mut x = Matrix::zeros(k * n_per_class, d);
        let mut labels = Vec::with_capacity(k * n_per_class);
        for c in 0..k {
            for s in 0..n_per_class {
                let row = x.row_mut(c * n_per_class + s);
                for (j, v) in row.iter_mut().enumerate() {
                    let noise = if noise_sigma > 0.0 { noise_sigma * rng.normal() } else { 0.0 };
                    *v = self.means[(c, j)] + noise;
                }
                labels.push(c);
            }
        }
        ClassificationDataset::new(x, labels, k, Split::Train)
    }
}

pub fn gen_gaussian_classes(
    d: usize,
    k: usize,
    n_per_class: usize,
    mean_radius: f64,
    noise_sigma: f64,
    rng: &mut RngState,
) -> ClassificationDataset {
    let classes = GaussianClasses::new(d, k, mean_radius, rng);
    classes.sample(n_per_class, noise_sigma, rng)
}

/// Distortion applied to build a downstream task from a source task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    /// Retained class ids (in the source labelling); re-indexed in this order.
    pub class_subset: Vec<usize>,
    /// Rotation in radians applied to the (x0, x1) plane.
    pub rotation_angle: f64,
    /// Multiplicative input gain.
    pub scale: f64,
    /// Samples kept per class; `None` keeps all.
    #[serde(default)]
    pub per_class_count: Option<usize>,
}

impl ShiftSpec {
    pub fn identity(num_classes: usize) -> Self {
        Self {
            class_subset: (0..num_classes).collect(),
            rotation_angle: 0.0,
            scale: 1.0,
            per_class_count: None,
        }
    }
}

pub fn apply_shift(
    src: &ClassificationDataset,
    spec: &ShiftSpec,
    rng: &mut RngState,
) -> Result<ClassificationDataset> {
    if spec.class_subset.is_empty() {
        return Err(Error::Config("class_subset must not be empty".into()));
    }
    if !(spec.scale > 0.0) {
        return Err(Error::Config("scale must be positive".into()));
    }
    if let Some(&bad) = spec.class_subset.iter().find(|&&c| c >= src.num_classes) {
        return Err(Error::Config(format!(
            "class {bad} not present in a {}-class source",
            src.num_classes
        )));
    }
    let (s, c) = spec.rotation_angle.sin_cos();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (new_label, &class) in spec.class_subset.iter().enumerate() {
        let idx: Vec<usize> = (0..src.len()).filter(|&i| src.labels[i] == class).collect();
        let chosen = match spec.per_class_count {
            Some(n) if n > idx.len() => {
                return Err(Error::NotEnoughSamples {
                    class,
                    requested: n,
                    available: idx.len(),
                })
            }
            Some(n) if n < idx.len() => {
                let mut pick: Vec<usize> = rng.sample_indices(idx.len(), n);
                pick.sort_unstable();
                pick.into_iter().map(|p| idx[p]).collect()
            }
            _ => idx,
        };
        for i in chosen {
            let mut row = src.x.row(i).to_vec();
            let (a, b) = (row[0], row[1]);
            row[0] = c * a - s * b;
            row[1] = s * a + c * b;
            row.iter_mut().for_each(|v| *v *= spec.scale);
            rows.push(row);
            labels.push(new_label);
        }
    }
    Ok(ClassificationDataset::new(
        Matrix::from_rows(&rows),
        labels,
        spec.class_subset.len(),
        src.split,
    ))
}

/// Rows `eta * e_y + (1 - eta) * u`.
pub fn smooth_labels(onehot: &Matrix, eta: f64) -> Matrix {
    assert!(eta > 0.0 && eta <= 1.0, "label eta must lie in (0, 1], got {eta}");
    let k = onehot.cols();
    let u = (1.0 - eta) / k as f64;
    let mut out = onehot.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v = eta * *v + u);
    out
}

/// `N <= d` rows of standard normal inputs with targets from a hidden
/// teacher `w ~ N(0, I/d)`; redrawn up to three times if `XXᵀ` is rank
/// deficient.
pub fn gen_overparam_regression(d: usize, n: usize, rng: &mut RngState) -> Result<RegressionDataset> {
    assert!(n >= 1 && n <= d, "overparameterized regression needs 1 <= N <= d");
    let attempts = 3;
    let mut last_rank = 0;
    for _ in 0..attempts {
        let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect());
        let rank = numerical_rank(&x.matmul_nt(&x));
        if rank == n {
            let w: Vec<f64> = (0..d).map(|_| rng.normal() / (d as f64).sqrt()).collect();
            let y = x.matvec(&w);
            return Ok(RegressionDataset { x, y });
        }
        last_rank = rank;
    }
    Err(Error::RankDeficient {
        attempts,
        rank: last_rank,
        wanted: n,
    })
}

/// Number of eigenvalues above `1e-10` times the largest.
pub fn numerical_rank(gram: &Matrix) -> usize {
    let eig = sym_eigen(gram);
    let top = eig.values.first().copied().unwrap_or(0.0).abs();
    eig.values.iter().filter(|&&v| v > 1e-10 * top).count()
}
