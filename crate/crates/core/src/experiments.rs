//! End-to-end protocols on the synthetic toy: pretraining, the τ sweep,
//! label-smoothed HP, head capacity, partial backbone, head exchange, the AIE
//! bound, the NTK comparison, and the closed-form trend battery.
//!
//! Runs over (τ, seed, condition) execute in parallel; every aggregate is
//! assembled in sorted key order so outputs do not depend on scheduling.

use crate::adaptmetrics::{adaptation_report, head_exchange, AdaptationReport, ExchangeMatrix};
use crate::datagen::{apply_shift, format_float, smooth_labels, GaussianClasses, ShiftSpec, Split};
use crate::dynamics::{check_aie_bound, compute_aie, ntk_probe, AieBoundCheck};
use crate::error::{Error, Result};
use crate::models::{Head, MlpBackbone, Network};
use crate::ntk_analytics::{
    beta_grid, build_kernels, classify_phase, critical_points, trend_curves, LinearInstance, Phase,
};
use crate::numkernel::{argmax, mean, std_dev, RngState};
use crate::training::{
    finetune, hp_ft_run, FtOptions, HeadSpec, RunBundle, RunOptions, SnapshotTag, Stage, StageConfig, TaskData,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Pretraining task and backbone shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub n_per_class: usize,
    pub mean_radius: f64,
    pub noise_sigma: f64,
    pub widths: Vec<usize>,
    pub stage: StageConfig,
    /// Train accuracy the backbone must reach.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    0.99
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            num_classes: 10,
            n_per_class: 500,
            mean_radius: 4.0,
            noise_sigma: 1.0,
            widths: vec![64, 64, 64, 64],
            stage: StageConfig::new(Stage::Pretrain, 200, 0.02, crate::models::LossKind::CrossEntropy)
                .with_momentum(0.9)
                .with_batch_size(64),
            threshold: default_threshold(),
        }
    }
}

/// Downstream task: fresh samples of a class subset from the pretraining
/// classes, then distorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    pub n_per_class: usize,
    pub noise_sigma: f64,
    pub shift: ShiftSpec,
    pub valid_frac: f64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            n_per_class: 300,
            noise_sigma: 1.0,
            shift: ShiftSpec {
                class_subset: vec![0, 1, 2],
                rotation_angle: std::f64::consts::FRAC_PI_3,
                scale: 1.5,
                per_class_count: None,
            },
            valid_frac: 0.3,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 2 || self.num_classes < 2 {
            return Err(Error::Config("pretrain needs input_dim >= 2 and num_classes >= 2".into()));
        }
        if self.n_per_class == 0 {
            return Err(Error::Config("pretrain n_per_class must be positive".into()));
        }
        if !(self.mean_radius > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("pretrain needs mean_radius > 0 and noise_sigma >= 0".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("backbone widths must be nonempty and positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::Config("threshold must be in (0, 1]".into()));
        }
        self.stage.validate()
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class < 2 {
            return Err(Error::Config("downstream n_per_class must be at least 2".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("downstream noise_sigma must be >= 0".into()));
        }
        if !(self.valid_frac > 0.0 && self.valid_frac < 1.0) {
            return Err(Error::Config("valid_frac must be in (0, 1)".into()));
        }
        Ok(())
    }
}

fn class_means(cfg: &PretrainConfig, data_seed: u64) -> GaussianClasses {
    GaussianClasses::new(
        cfg.input_dim,
        cfg.num_classes,
        cfg.mean_radius,
        &mut RngState::new(data_seed).fork_named("means"),
    )
}

/// Pretraining data (train split plus a held-out split of the same size / 5).
pub fn gen_pretrain_data(cfg: &PretrainConfig, data_seed: u64) -> Result<TaskData> {
    cfg.validate()?;
    let classes = class_means(cfg, data_seed);
    let root = RngState::new(data_seed);
    let train = classes.sample(cfg.n_per_class, cfg.noise_sigma, &mut root.fork_named("pretrain-train"));
    let mut valid = classes.sample(
        (cfg.n_per_class / 5).max(1),
        cfg.noise_sigma,
        &mut root.fork_named("pretrain-valid"),
    );
    valid.split = Split::Valid;
    Ok(TaskData { train, valid })
}

/// Downstream data built from the pretraining class means.
pub fn gen_downstream(pre: &PretrainConfig, ds: &DownstreamConfig, data_seed: u64) -> Result<TaskData> {
    pre.validate()?;
    ds.validate()?;
    let classes = class_means(pre, data_seed);
    let root = RngState::new(data_seed);
    let raw = classes.sample(ds.n_per_class, ds.noise_sigma, &mut root.fork_named("downstream"));
    let shifted = apply_shift(&raw, &ds.shift, &mut root.fork_named("shift"))?;
    let (train, valid) = shifted.train_valid_split(ds.valid_frac, &mut root.fork_named("split"));
    Ok(TaskData { train, valid })
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub network: Network,
    pub train_acc: f64,
    pub epochs: usize,
}

/// Trains backbone + a K-way linear head until train accuracy reaches the
/// threshold; errors if the epoch cap comes first.
pub fn pretrain_backbone(cfg: &PretrainConfig, data: &TaskData, seed: u64) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let root = RngState::new(seed);
    let mut init = root.fork_named("pretrain-init");
    let backbone = MlpBackbone::new(cfg.input_dim, &cfg.widths, true, &mut init);
    let head = Head::linear(backbone.output_dim(), cfg.num_classes, &mut init);
    let net = Network::new(backbone, head);
    let opts = FtOptions {
        stop_at_train_acc: Some(cfg.threshold),
        ..FtOptions::default()
    };
    let out = finetune(&net, data, &cfg.stage, &opts, &mut root.fork_named("pretrain-sgd"))?;
    let train_acc = out.record.epochs.last().map_or_else(
        || out.model.accuracy(&data.train.x, &data.train.labels),
        |m| m.train_acc,
    );
    if train_acc < cfg.threshold {
        return Err(Error::ThresholdUnreachable {
            final_acc: train_acc,
            threshold: cfg.threshold,
            epochs: out.record.epochs.len(),
        });
    }
    Ok(PretrainOutcome {
        epochs: out.record.epochs.len(),
        network: out.model,
        train_acc,
    })
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        Self {
            mean: mean(values),
            std: if values.len() > 1 { std_dev(values) } else { 0.0 },
        }
    }
}

/// Headline numbers of one HP-FT run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub tau: usize,
    pub seed: u64,
    pub diverged: bool,
    pub hp_epochs: usize,
    pub hp_train_acc: f64,
    pub e_aie: f64,
    /// AIE against one-hot labels (differs from `e_aie` when FT smooths labels).
    pub residual_hp_energy: f64,
    pub ft_best_valid_acc: f64,
    pub ft_final_valid_acc: f64,
    pub d_euc: f64,
    pub d_dot: f64,
    pub d_cos: f64,
    pub norm_t: f64,
    pub norm_0: f64,
    /// Early-FT head gradient norm (first FT epoch).
    pub early_head_grad: f64,
}

impl RunSummary {
    fn diverged(tau: usize, seed: u64) -> Self {
        Self {
            tau,
            seed,
            diverged: true,
            hp_epochs: 0,
            hp_train_acc: f64::NAN,
            e_aie: f64::NAN,
            residual_hp_energy: f64::NAN,
            ft_best_valid_acc: f64::NAN,
            ft_final_valid_acc: f64::NAN,
            d_euc: f64::NAN,
            d_dot: f64::NAN,
            d_cos: f64::NAN,
            norm_t: f64::NAN,
            norm_0: f64::NAN,
            early_head_grad: f64::NAN,
        }
    }

    pub fn from_bundle(tau: usize, bundle: &RunBundle, data: &TaskData) -> Result<Self> {
        let rec = &bundle.record;
        let z0 = bundle.snapshot(SnapshotTag::Z0).ok_or_else(|| Error::Missing("z0 snapshot".into()))?;
        let zt = bundle.snapshot(SnapshotTag::ZT).ok_or_else(|| Error::Missing("zT snapshot".into()))?;
        let ad: AdaptationReport = adaptation_report(z0, zt)?;
        let hp_loss = rec.hp_config.as_ref().map_or(crate::models::LossKind::CrossEntropy, |c| c.loss);
        let residual = compute_aie(&bundle.hp_model, &data.train.x, &data.train.onehot(), hp_loss).e_aie;
        Ok(Self {
            tau,
            seed: rec.seed,
            diverged: false,
            hp_epochs: rec.hp_epochs,
            hp_train_acc: rec.hp_train_acc.unwrap_or(f64::NAN),
            e_aie: rec.aie.as_ref().map_or(f64::NAN, |a| a.e_aie),
            residual_hp_energy: residual,
            ft_best_valid_acc: rec.ft_best_valid_acc.unwrap_or(f64::NAN),
            ft_final_valid_acc: rec.ft_final_valid_acc.unwrap_or(f64::NAN),
            d_euc: ad.mean_d_euc,
            d_dot: ad.mean_d_dot,
            d_cos: ad.mean_d_cos,
            norm_t: ad.mean_norm_t,
            norm_0: ad.mean_norm_0,
            early_head_grad: rec.ft_trace.first().map_or(f64::NAN, |t| t.head_grad_norm),
        })
    }
}

/// Seed-aggregated view of a set of runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_ok: usize,
    pub n_diverged: usize,
    pub hp_train_acc: Stat,
    pub e_aie: Stat,
    pub residual_hp_energy: Stat,
    pub ft_best_valid_acc: Stat,
    pub ft_final_valid_acc: Stat,
    pub d_euc: Stat,
    pub one_minus_cos: Stat,
    pub d_dot: Stat,
    pub norm_t: Stat,
    pub early_head_grad: Stat,
}

impl Aggregate {
    pub fn of(runs: &[&RunSummary]) -> Self {
        let ok: Vec<&&RunSummary> = runs.iter().filter(|r| !r.diverged).collect();
        let col = |f: fn(&RunSummary) -> f64| Stat::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
        Self {
            n_ok: ok.len(),
            n_diverged: runs.len() - ok.len(),
            hp_train_acc: col(|r| r.hp_train_acc),
            e_aie: col(|r| r.e_aie),
            residual_hp_energy: col(|r| r.residual_hp_energy),
            ft_best_valid_acc: col(|r| r.ft_best_valid_acc),
            ft_final_valid_acc: col(|r| r.ft_final_valid_acc),
            d_euc: col(|r| r.d_euc),
            one_minus_cos: col(|r| 1.0 - r.d_cos),
            d_dot: col(|r| r.d_dot),
            norm_t: col(|r| r.norm_t),
            early_head_grad: col(|r| r.early_head_grad),
        }
    }
}

fn run_or_flag(
    tau: usize,
    backbone: &MlpBackbone,
    head: &HeadSpec,
    data: &TaskData,
    hp: &StageConfig,
    ft: &StageConfig,
    opts: &RunOptions,
    seed: u64,
) -> Result<(RunSummary, Option<RunBundle>)> {
    match hp_ft_run(backbone, head, data, hp, ft, opts, seed) {
        Ok(b) => Ok((RunSummary::from_bundle(tau, &b, data)?, Some(b))),
        Err(Error::Divergence { .. }) => Ok((RunSummary::diverged(tau, seed), None)),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: usize,
    pub agg: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunSummary>,
    pub per_tau: Vec<TauRow>,
    pub tau_star: Option<usize>,
    /// Other τ tied with τ* on mean FT-valid-acc.
    pub tau_star_ties: Vec<usize>,
    /// τ* is neither the smallest nor the largest grid value.
    pub interior_optimum: bool,
}

impl SweepResult {
    /// CSV with one row per τ (means and stds over seeds).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "tau,n_ok,n_diverged,hp_train_acc,e_aie,ft_valid_acc,ft_valid_acc_std,d_euc,d_euc_std,one_minus_cos,one_minus_cos_std,d_cos,tau_star"
        )?;
        for r in &self.per_tau {
            let a = &r.agg;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.tau,
                a.n_ok,
                a.n_diverged,
                format_float(a.hp_train_acc.mean),
                format_float(a.e_aie.mean),
                format_float(a.ft_best_valid_acc.mean),
                format_float(a.ft_best_valid_acc.std),
                format_float(a.d_euc.mean),
                format_float(a.d_euc.std),
                format_float(a.one_minus_cos.mean),
                format_float(a.one_minus_cos.std),
                format_float(1.0 - a.one_minus_cos.mean),
                u8::from(Some(r.tau) == self.tau_star)
            )?;
        }
        Ok(())
    }

    /// CSV with one row per (τ, seed) run.
    pub fn write_runs_csv<W: Write>(&self, w: W) -> Result<()> {
        write_run_rows(self.runs.iter().map(|r| (r.tau.to_string(), r)), "tau", w)
    }
}

fn write_run_rows<'a, W: Write>(
    runs: impl Iterator<Item = (String, &'a RunSummary)>,
    key: &str,
    mut w: W,
) -> Result<()> {
    writeln!(
        w,
        "{key},seed,diverged,hp_epochs,hp_train_acc,e_aie,residual_hp_energy,ft_best_valid_acc,ft_final_valid_acc,d_euc,d_dot,d_cos,norm_t,norm_0"
    )?;
    for (k, r) in runs {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            k,
            r.seed,
            u8::from(r.diverged),
            r.hp_epochs,
            format_float(r.hp_train_acc),
            format_float(r.e_aie),
            format_float(r.residual_hp_energy),
            format_float(r.ft_best_valid_acc),
            format_float(r.ft_final_valid_acc),
            format_float(r.d_euc),
            format_float(r.d_dot),
            format_float(r.d_cos),
            format_float(r.norm_t),
            format_float(r.norm_0)
        )?;
    }
    Ok(())
}

/// Smallest τ with the maximal mean value, plus the other tied values.
pub fn select_tau_star(rows: &[(usize, f64)]) -> Option<(usize, Vec<usize>)> {
    let best = rows
        .iter()
        .filter(|(_, v)| v.is_finite())
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() {
        return None;
    }
    let mut tied: Vec<usize> = rows.iter().filter(|(_, v)| *v == best).map(|(t, _)| *t).collect();
    tied.sort_unstable();
    let star = tied.remove(0);
    Some((star, tied))
}

/// Doubling grid `{0, 1, 2, 4, …, ≤ max}`.
pub fn doubling_grid(max: usize) -> Vec<usize> {
    let mut g = vec![0];
    let mut t = 1;
    while t <= max {
        g.push(t);
        t *= 2;
    }
    g
}

#[allow(clippy::too_many_arguments)]
pub fn sweep_tau(
    backbone: &MlpBackbone,
    head: &HeadSpec,
    data: &TaskData,
    grid: &[usize],
    hp: &StageConfig,
    ft: &StageConfig,
    opts: &RunOptions,
    seeds: &[u64],
) -> Result<SweepResult> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs a nonempty grid and seed list".into()));
    }
    let mut grid: Vec<usize> = grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let jobs: Vec<(usize, u64)> = grid.iter().flat_map(|&t| seeds.iter().map(move |&s| (t, s))).collect();
    let runs: Vec<RunSummary> = jobs
        .par_iter()
        .map(|&(tau, seed)| {
            let hp_t = hp.clone().with_epochs(tau);
            run_or_flag(tau, backbone, head, data, &hp_t, ft, opts, seed).map(|(s, _)| s)
        })
        .collect::<Result<_>>()?;
    let per_tau: Vec<TauRow> = grid
        .iter()
        .map(|&t| TauRow {
            tau: t,
            agg: Aggregate::of(&runs.iter().filter(|r| r.tau == t).collect::<Vec<_>>()),
        })
        .collect();
    let scores: Vec<(usize, f64)> = per_tau
        .iter()
        .filter(|r| r.agg.n_ok > 0)
        .map(|r| (r.tau, r.agg.ft_best_valid_acc.mean))
        .collect();
    let sel = select_tau_star(&scores);
    let interior = sel
        .as_ref()
        .is_some_and(|(t, _)| *t != grid[0] && *t != *grid.last().unwrap());
    Ok(SweepResult {
        grid,
        seeds: seeds.to_vec(),
        runs,
        per_tau,
        tau_star: sel.as_ref().map(|(t, _)| *t),
        tau_star_ties: sel.map(|(_, ties)| ties).unwrap_or_default(),
        interior_optimum: interior,
    })
}

/// One named condition of a protocol table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRow {
    pub name: String,
    pub head: HeadSpec,
    pub hp: StageConfig,
    pub ft: StageConfig,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunSummary>,
    pub agg: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: String,
    pub rows: Vec<ProtocolRow>,
}

impl ProtocolReport {
    pub fn row(&self, name: &str) -> Option<&ProtocolRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// CSV with one row per (condition, seed) run.
    pub fn write_runs_csv<W: Write>(&self, w: W) -> Result<()> {
        let rows = self.rows.iter().flat_map(|r| r.runs.iter().map(move |x| (r.name.clone(), x)));
        write_run_rows(rows, "condition", w)
    }

    /// CSV: `condition,n_ok,hp_train_acc,one_minus_cos,d_euc,ft_valid_acc,...` (means, stds).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "condition,n_ok,hp_train_acc,hp_train_acc_std,one_minus_cos,one_minus_cos_std,d_euc,d_euc_std,ft_valid_acc,ft_valid_acc_std,e_aie,residual_hp_energy"
        )?;
        for r in &self.rows {
            let a = &r.agg;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.name,
                a.n_ok,
                format_float(a.hp_train_acc.mean),
                format_float(a.hp_train_acc.std),
                format_float(a.one_minus_cos.mean),
                format_float(a.one_minus_cos.std),
                format_float(a.d_euc.mean),
                format_float(a.d_euc.std),
                format_float(a.ft_best_valid_acc.mean),
                format_float(a.ft_best_valid_acc.std),
                format_float(a.e_aie.mean),
                format_float(a.residual_hp_energy.mean)
            )?;
        }
        Ok(())
    }
}

/// A condition to run over every seed.
#[derive(Debug, Clone)]
pub struct Condition {
    pub name: String,
    pub head: HeadSpec,
    pub hp: StageConfig,
    pub ft: StageConfig,
}

pub fn run_conditions(
    protocol: &str,
    backbone: &MlpBackbone,
    data: &TaskData,
    conditions: &[Condition],
    opts: &RunOptions,
    seeds: &[u64],
) -> Result<ProtocolReport> {
    let jobs: Vec<(usize, u64)> = (0..conditions.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let runs: Vec<(usize, RunSummary)> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let cond = &conditions[c];
            run_or_flag(cond.hp.epochs, backbone, &cond.head, data, &cond.hp, &cond.ft, opts, seed).map(|(s, _)| (c, s))
        })
        .collect::<Result<_>>()?;
    let rows = conditions
        .iter()
        .enumerate()
        .map(|(c, cond)| {
            let mine: Vec<RunSummary> = runs.iter().filter(|(k, _)| *k == c).map(|(_, r)| r.clone()).collect();
            ProtocolRow {
                name: cond.name.clone(),
                head: cond.head.clone(),
                hp: cond.hp.clone(),
                ft: cond.ft.clone(),
                seeds: seeds.to_vec(),
                agg: Aggregate::of(&mine.iter().collect::<Vec<_>>()),
                runs: mine,
            }
        })
        .collect();
    Ok(ProtocolReport {
        protocol: protocol.into(),
        rows,
    })
}

fn eta_name(eta_hp: f64, eta_ft: f64) -> String {
    format!("eta_hp={eta_hp}/eta_ft={eta_ft}")
}

/// The four (η_HP, η_FT) conditions `(1,1), (η,1), (η,η), (1,η)`.
#[allow(clippy::too_many_arguments)]
pub fn ls_hp_study(
    backbone: &MlpBackbone,
    data: &TaskData,
    eta_hp: f64,
    eta_ft: f64,
    head: &HeadSpec,
    hp: &StageConfig,
    ft: &StageConfig,
    opts: &RunOptions,
    seeds: &[u64],
) -> Result<ProtocolReport> {
    for eta in [eta_hp, eta_ft] {
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::Config(format!("eta must be in (0, 1], got {eta}")));
        }
    }
    let conds = [(1.0, 1.0), (eta_hp, 1.0), (eta_hp, eta_ft), (1.0, eta_ft)]
        .into_iter()
        .map(|(a, b)| Condition {
            name: eta_name(a, b),
            head: head.clone(),
            hp: hp.clone().with_label_eta(a),
            ft: ft.clone().with_label_eta(b),
        })
        .collect::<Vec<_>>();
    run_conditions("ls_hp", backbone, data, &conds, opts, seeds)
}

/// Name of an ls_hp_study condition.
pub fn ls_condition(eta_hp: f64, eta_ft: f64) -> String {
    eta_name(eta_hp, eta_ft)
}

/// Residual per-sample energy expected after label-smoothed HP converges:
/// `(1 − η)·‖e_y − u‖₂` with `‖e_y − u‖₂ = sqrt((K−1)/K)`.
pub fn reserved_energy(eta_hp: f64, k: usize) -> f64 {
    (1.0 - eta_hp) * ((k as f64 - 1.0) / k as f64).sqrt()
}

pub fn head_capacity_study(
    backbone: &MlpBackbone,
    data: &TaskData,
    heads: &[HeadSpec],
    hp: &StageConfig,
    ft: &StageConfig,
    opts: &RunOptions,
    seeds: &[u64],
) -> Result<ProtocolReport> {
    let conds: Vec<Condition> = heads
        .iter()
        .map(|h| Condition {
            name: match h.kind {
                crate::models::HeadKind::Linear => "linear".into(),
                crate::models::HeadKind::Mlp2 => format!("mlp2_{}", h.hidden),
            },
            head: h.clone(),
            hp: hp.clone(),
            ft: ft.clone(),
        })
        .collect();
    run_conditions("head_capacity", backbone, data, &conds, opts, seeds)
}

#[allow(clippy::too_many_arguments)]
pub fn partial_backbone_study(
    backbone: &MlpBackbone,
    data: &TaskData,
    n_last: &[usize],
    head: &HeadSpec,
    hp: &StageConfig,
    ft: &StageConfig,
    opts: &RunOptions,
    seeds: &[u64],
) -> Result<ProtocolReport> {
    if let Some(&bad) = n_last.iter().find(|&&n| n >= backbone.depth()) {
        return Err(Error::InvalidSplit {
            requested: bad,
            depth: backbone.depth(),
        });
    }
    let conds: Vec<Condition> = n_last
        .iter()
        .map(|&n| Condition {
            name: format!("reinit_last_{n}"),
            head: HeadSpec {
                reinit_last: n,
                ..head.clone()
            },
            hp: hp.clone(),
            ft: ft.clone(),
        })
        .collect();
    run_conditions("partial_backbone", backbone, data, &conds, opts, seeds)
}

/// Runs one seed per τ and evaluates all backbone/head pairings.
pub fn exchange_bundle(
    backbone: &MlpBackbone,
    head: &HeadSpec,
    data: &TaskData,
    taus: &[usize],
    hp: &StageConfig,
    ft: &StageConfig,
    opts: &RunOptions,
    seed: u64,
) -> Result<ExchangeMatrix> {
    let models: Vec<(usize, Network)> = taus
        .par_iter()
        .map(|&t| hp_ft_run(backbone, head, data, &hp.clone().with_epochs(t), ft, opts, seed).map(|b| (t, b.model)))
        .collect::<Result<_>>()?;
    head_exchange(&models, data)
}

/// Exchange bundles for several seeds and their elementwise mean.
#[allow(clippy::too_many_arguments)]
pub fn exchange_over_seeds(
    backbone: &MlpBackbone,
    head: &HeadSpec,
    data: &TaskData,
    taus: &[usize],
    hp: &StageConfig,
    ft: &StageConfig,
    opts: &RunOptions,
    seeds: &[u64],
) -> Result<(Vec<ExchangeMatrix>, ExchangeMatrix)> {
    if seeds.is_empty() {
        return Err(Error::Config("exchange needs at least one seed".into()));
    }
    let per_seed: Vec<ExchangeMatrix> = seeds
        .iter()
        .map(|&s| exchange_bundle(backbone, head, data, taus, hp, ft, opts, s))
        .collect::<Result<_>>()?;
    let w = 1.0 / per_seed.len() as f64;
    let mut train = per_seed[0].train_acc.scale(0.0);
    let mut valid = train.clone();
    for m in &per_seed {
        train.add_scaled(w, &m.train_acc);
        valid.add_scaled(w, &m.valid_acc);
    }
    let mean = ExchangeMatrix {
        taus: per_seed[0].taus.clone(),
        train_acc: train,
        valid_acc: valid,
    };
    Ok((per_seed, mean))
}

/// Monotonicity of the seed-averaged adaptation metrics along a sweep. An
/// adjacent pair passes when the later mean exceeds the earlier one by at
/// most the larger of the two seed standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTrend {
    pub d_euc_non_increasing: bool,
    pub d_cos_non_decreasing: bool,
    /// (τ_prev, τ_next, metric) for each failing pair.
    pub violations: Vec<(usize, usize, String)>,
}

pub fn sweep_trend(sweep: &SweepResult) -> SweepTrend {
    let rows: Vec<&TauRow> = sweep.per_tau.iter().filter(|r| r.agg.n_ok > 0).collect();
    let mut violations = Vec::new();
    let mut check = |name: &str, f: fn(&Aggregate) -> Stat| {
        let mut ok = true;
        for w in rows.windows(2) {
            let (a, b) = (f(&w[0].agg), f(&w[1].agg));
            if b.mean > a.mean + a.std.max(b.std) {
                ok = false;
                violations.push((w[0].tau, w[1].tau, name.to_string()));
            }
        }
        ok
    };
    let d_euc = check("d_euc", |a| a.d_euc);
    // d_cos non-decreasing is 1 - cos non-increasing
    let d_cos = check("d_cos", |a| a.one_minus_cos);
    SweepTrend {
        d_euc_non_increasing: d_euc,
        d_cos_non_decreasing: d_cos,
        violations,
    }
}

/// AIE bound rows for each τ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub tau: usize,
    pub seed: u64,
    pub check: AieBoundCheck,
}

#[allow(clippy::too_many_arguments)]
pub fn aie_bound_study(
    backbone: &MlpBackbone,
    head: &HeadSpec,
    data: &TaskData,
    taus: &[usize],
    hp: &StageConfig,
    ft: &StageConfig,
    n_probe: usize,
    seeds: &[u64],
) -> Result<Vec<BoundRow>> {
    let opts = RunOptions {
        keep_trajectory: true,
        ..RunOptions::default()
    };
    let ft_targets = smooth_labels(&data.train.onehot(), ft.label_eta);
    let jobs: Vec<(usize, u64)> = taus.iter().flat_map(|&t| seeds.iter().map(move |&s| (t, s))).collect();
    jobs.par_iter()
        .map(|&(tau, seed)| {
            let b = hp_ft_run(backbone, head, data, &hp.clone().with_epochs(tau), ft, &opts, seed)?;
            let ntk = ntk_probe(&b, &data.train.x, n_probe, &RngState::new(seed))?;
            let check = check_aie_bound(&b, &ntk, &data.train.x, &ft_targets)?;
            Ok(BoundRow { tau, seed, check })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtkComparison {
    pub seed: u64,
    pub pretrained_mean_k_gap: f64,
    pub random_mean_k_gap: f64,
    pub pretrained_k_norm0: f64,
    pub random_k_norm0: f64,
    /// Mean k_gap divided by mean k_norm.
    pub pretrained_rel_gap: f64,
    pub random_rel_gap: f64,
}

/// Mean FT kernel change for the pretrained backbone vs a freshly
/// initialized backbone of the same shape, on the same data and configs.
#[allow(clippy::too_many_arguments)]
pub fn ntk_pretrained_vs_random(
    pretrained: &MlpBackbone,
    head: &HeadSpec,
    data: &TaskData,
    hp: &StageConfig,
    ft: &StageConfig,
    n_probe: usize,
    seeds: &[u64],
) -> Result<Vec<NtkComparison>> {
    let opts = RunOptions {
        keep_trajectory: true,
        probe_count: 0,
        ..RunOptions::default()
    };
    seeds
        .par_iter()
        .map(|&seed| {
            let widths: Vec<usize> = pretrained.layers.iter().map(|l| l.out_dim()).collect();
            let final_relu = pretrained.layers.last().is_some_and(|l| l.relu);
            let random = MlpBackbone::new(
                pretrained.input_dim(),
                &widths,
                final_relu,
                &mut RngState::new(seed).fork_named("random-backbone"),
            );
            let probe_rng = RngState::new(seed);
            let a = hp_ft_run(pretrained, head, data, hp, ft, &opts, seed)?;
            let b = hp_ft_run(&random, head, data, hp, ft, &opts, seed)?;
            let na = ntk_probe(&a, &data.train.x, n_probe, &probe_rng)?;
            let nb = ntk_probe(&b, &data.train.x, n_probe, &probe_rng)?;
            Ok(NtkComparison {
                seed,
                pretrained_mean_k_gap: na.mean_k_gap(),
                random_mean_k_gap: nb.mean_k_gap(),
                pretrained_k_norm0: na.k_norm[0],
                random_k_norm0: nb.k_norm[0],
                pretrained_rel_gap: na.mean_k_gap() / mean(&na.k_norm),
                random_rel_gap: nb.mean_k_gap() / mean(&nb.k_norm),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrendSuiteConfig {
    pub instances: usize,
    pub h: usize,
    pub d: usize,
    pub n: usize,
    #[serde(default = "one")]
    pub b_scale: f64,
    #[serde(default = "one")]
    pub v_scale: f64,
    pub beta_lo: f64,
    pub beta_hi: f64,
    pub grid_steps: usize,
    pub seed: u64,
    /// Factor applied to B₀ (resp. v₀) for the regime-limit checks.
    #[serde(default = "hundred")]
    pub regime_factor: f64,
}

fn one() -> f64 {
    1.0
}

fn hundred() -> f64 {
    100.0
}

impl Default for TrendSuiteConfig {
    fn default() -> Self {
        Self {
            instances: 10,
            h: 16,
            d: 20,
            n: 10,
            b_scale: 1.0,
            v_scale: 1.0,
            beta_lo: -0.2,
            beta_hi: 1.2,
            grid_steps: 140,
            seed: 0,
            regime_factor: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendVerdict {
    pub instance: usize,
    pub alpha_summary: Option<f64>,
    pub alpha_ratio_mean: Option<f64>,
    pub alpha_ratio_spread: Option<f64>,
    pub beta_dot_fit: f64,
    pub d_dot_argmax: f64,
    pub d_dot_ok: bool,
    pub d_dot_concave: bool,
    pub d_euc_argmin: f64,
    pub d_euc_min_at_one: bool,
    pub d_euc_convex: bool,
    pub zt_argmax: f64,
    pub second_order_favorable: bool,
    /// `None` when the second-order flag is unfavorable.
    pub zt_ok: Option<bool>,
    pub phase_order_ok: bool,
    /// All metrics at their no-adaptation values at β = 1.
    pub beta_one_identity: bool,
    pub alpha_b_scaled: Option<f64>,
    pub alpha_v_scaled: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendSuiteResult {
    pub config: TrendSuiteConfig,
    pub verdicts: Vec<TrendVerdict>,
    pub d_dot_pass_rate: f64,
    pub d_euc_pass_rate: f64,
    /// Over instances with a favorable second-order flag.
    pub zt_pass_rate: f64,
    pub phase_pass_rate: f64,
}

impl TrendSuiteResult {
    /// CSV, one row per instance.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "instance,alpha_summary,alpha_ratio_mean,alpha_ratio_spread,d_dot_argmax,d_dot_ok,d_euc_argmin,d_euc_ok,zt_argmax,second_order_favorable,zt_ok,phase_order_ok,alpha_b_scaled,alpha_v_scaled"
        )?;
        let f = |v: Option<f64>| v.map(format_float).unwrap_or_default();
        for v in &self.verdicts {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                v.instance,
                f(v.alpha_summary),
                f(v.alpha_ratio_mean),
                f(v.alpha_ratio_spread),
                format_float(v.d_dot_argmax),
                u8::from(v.d_dot_ok),
                format_float(v.d_euc_argmin),
                u8::from(v.d_euc_min_at_one && v.d_euc_convex),
                format_float(v.zt_argmax),
                u8::from(v.second_order_favorable),
                v.zt_ok.map(|b| u8::from(b).to_string()).unwrap_or_default(),
                u8::from(v.phase_order_ok),
                f(v.alpha_b_scaled),
                f(v.alpha_v_scaled)
            )?;
        }
        Ok(())
    }
}

fn argmin(v: &[f64]) -> usize {
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    argmax(&neg)
}

fn phase_rank(p: Phase) -> Option<u8> {
    match p {
        Phase::Collapse => Some(0),
        Phase::Rotate => Some(1),
        Phase::Stretch => Some(2),
        Phase::TinySide => Some(3),
        Phase::Unknown => None,
    }
}

/// Checks the closed-form trend claims on a seeded battery of instances.
pub fn trend_suite(cfg: &TrendSuiteConfig) -> Result<TrendSuiteResult> {
    let grid = beta_grid(cfg.beta_lo, cfg.beta_hi, cfg.grid_steps);
    let step = (cfg.beta_hi - cfg.beta_lo) / cfg.grid_steps as f64;
    let root = RngState::new(cfg.seed);
    let verdicts: Vec<TrendVerdict> = (0..cfg.instances)
        .into_par_iter()
        .map(|i| {
            let inst = LinearInstance::random(cfg.h, cfg.d, cfg.n, cfg.b_scale, cfg.v_scale, &root.fork(i as u64))?;
            let k = build_kernels(&inst)?;
            let cp = critical_points(&inst, &k);
            let curve = trend_curves(&inst, &k, &grid);
            let dd = &curve.d_dot;
            let de = &curve.d_euc;
            let second = |v: &[f64], j: usize| v[j + 1] - 2.0 * v[j] + v[j - 1];
            let scale = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
            let tol_dd = 1e-12 * scale(dd);
            let tol_de = 1e-12 * scale(de);
            let d_dot_argmax = grid[argmax(dd)];
            let d_euc_argmin = grid[argmin(de)];
            let zt_argmax = grid[argmax(&curve.zt_norm)];
            let favorable = cp.second_order.favorable();
            let zt_ok = match (favorable, cp.alpha_summary) {
                (true, Some(a)) => Some((zt_argmax - a).abs() <= 2.0 * step + 1e-12),
                _ => None,
            };
            let ranks: Vec<Option<u8>> = curve.phase.iter().map(|p| phase_rank(*p)).collect();
            let phase_order_ok = ranks.iter().all(Option::is_some)
                && ranks.windows(2).all(|w| w[0] <= w[1]);
            let b0sq = inst.b0_sq();
            let at_one = crate::ntk_analytics::metrics_at(&inst, &k, &inst.y);
            let rel = |a: f64, b: f64| (a - b).abs() <= 1e-8 * b.abs().max(1.0);
            let alpha_for = |bs: f64, vs: f64| -> Result<Option<f64>> {
                let s = inst.scaled(bs, vs);
                let ks = build_kernels(&s)?;
                Ok(critical_points(&s, &ks).alpha_summary)
            };
            Ok(TrendVerdict {
                instance: i,
                alpha_summary: cp.alpha_summary,
                alpha_ratio_mean: cp.alpha_ratio_mean,
                alpha_ratio_spread: cp.alpha_ratio_spread,
                beta_dot_fit: cp.beta_dot_fit,
                d_dot_argmax,
                d_dot_ok: (d_dot_argmax - 0.5).abs() <= step + 1e-12,
                d_dot_concave: (1..grid.len() - 1).all(|j| second(dd, j) < tol_dd),
                d_euc_argmin,
                d_euc_min_at_one: (d_euc_argmin - 1.0).abs() <= 1e-9,
                d_euc_convex: (1..grid.len() - 1).all(|j| second(de, j) > -tol_de),
                zt_argmax,
                second_order_favorable: favorable,
                zt_ok,
                phase_order_ok,
                beta_one_identity: rel(at_one.d_dot, b0sq) && rel(at_one.zt_norm, b0sq) && at_one.d_euc.abs() <= 1e-8 * b0sq && rel(at_one.d_cos, 1.0),
                alpha_b_scaled: alpha_for(cfg.regime_factor, 1.0)?,
                alpha_v_scaled: alpha_for(1.0, cfg.regime_factor)?,
            })
        })
        .collect::<Result<_>>()?;
    let rate = |f: &dyn Fn(&TrendVerdict) -> Option<bool>| {
        let vals: Vec<bool> = verdicts.iter().filter_map(f).collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().filter(|&&b| b).count() as f64 / vals.len() as f64
        }
    };
    Ok(TrendSuiteResult {
        d_dot_pass_rate: rate(&|v| Some(v.d_dot_ok)),
        d_euc_pass_rate: rate(&|v| Some(v.d_euc_min_at_one && v.d_euc_convex)),
        zt_pass_rate: rate(&|v| v.zt_ok),
        phase_pass_rate: rate(&|v| Some(v.phase_order_ok)),
        config: cfg.clone(),
        verdicts,
    })
}

/// Phase tag of β for an instance (convenience for reports).
pub fn phase_of(inst: &LinearInstance, beta: f64) -> Result<Phase> {
    let k = build_kernels(inst)?;
    Ok(classify_phase(beta, &critical_points(inst, &k)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_star_smallest_tie() {
        let rows = vec![(0, 0.5), (1, 0.9), (2, 0.9), (4, 0.7)];
        assert_eq!(select_tau_star(&rows), Some((1, vec![2])));
        let mut perm = rows.clone();
        perm.reverse();
        assert_eq!(select_tau_star(&perm), Some((1, vec![2])));
    }

    #[test]
    fn doubling() {
        assert_eq!(doubling_grid(16), vec![0, 1, 2, 4, 8, 16]);
        assert_eq!(doubling_grid(0), vec![0]);
    }

    #[test]
    fn reserved_energy_three_classes() {
        assert!((reserved_energy(0.9, 3) - 0.1 * 6f64.sqrt() / 3.0).abs() < 1e-15);
    }
}
