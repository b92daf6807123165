//! Two-stage HP-FT training: head probing on a frozen backbone, then joint
//! fine-tuning, with feature snapshots on a fixed probe set.

use crate::datagen::{format_float, smooth_labels, ClassificationDataset};
use crate::dynamics::{compute_aie, EnergyReport};
use crate::error::{Error, Result};
use crate::models::{accuracy_of, flatten_grads, mean_loss, Head, HeadKind, LossKind, MlpBackbone, Network};
use crate::numkernel::{norm, Matrix, RngState};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Hp,
    Ft,
    Pretrain,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Hp => "hp",
            Stage::Ft => "ft",
            Stage::Pretrain => "pretrain",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopMetric {
    ValidAcc,
    ValidLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub metric: EarlyStopMetric,
    pub patience: usize,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub lr: f64,
    /// 0 is plain (S)GD.
    #[serde(default)]
    pub momentum: f64,
    /// 0 means full batch.
    #[serde(default)]
    pub batch_size: usize,
    pub loss: LossKind,
    #[serde(default = "one")]
    pub label_eta: f64,
    #[serde(default)]
    pub early_stop: Option<EarlyStop>,
}

impl StageConfig {
    pub fn new(stage: Stage, epochs: usize, lr: f64, loss: LossKind) -> Self {
        Self {
            stage,
            epochs,
            lr,
            momentum: 0.0,
            batch_size: 0,
            loss,
            label_eta: 1.0,
            early_stop: None,
        }
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn with_label_eta(mut self, eta: f64) -> Self {
        self.label_eta = eta;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn with_early_stop(mut self, metric: EarlyStopMetric, patience: usize) -> Self {
        self.early_stop = Some(EarlyStop { metric, patience });
        self
    }

    /// `lr = 0` is accepted so frozen-dynamics runs can be expressed.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.label_eta > 0.0 && self.label_eta <= 1.0) {
            return Err(Error::Config(format!("label_eta must be in (0, 1], got {}", self.label_eta)));
        }
        Ok(())
    }

    /// Steady-state step size of heavy-ball momentum, `lr / (1 - momentum)`.
    pub fn effective_lr(&self) -> f64 {
        self.lr / (1.0 - self.momentum)
    }

    fn expect(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::Config(format!("expected a {stage} stage config, got {}", self.stage)));
        }
        self.validate()
    }
}

/// Train/valid pair for one downstream task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: ClassificationDataset,
    pub valid: ClassificationDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: Stage,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub valid_loss: f64,
    pub valid_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotTag {
    Z0,
    Zt(usize),
    ZT,
}

impl fmt::Display for SnapshotTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SnapshotTag::Z0 => f.write_str("z0"),
            SnapshotTag::Zt(e) => write!(f, "zt{e}"),
            SnapshotTag::ZT => f.write_str("zT"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSnapshot {
    pub tag: SnapshotTag,
    pub features: Matrix,
    pub probe_ids: Vec<usize>,
}

impl FeatureSnapshot {
    pub fn take(tag: SnapshotTag, model: &Network, x: &Matrix, probe_ids: &[usize]) -> Self {
        Self {
            tag,
            features: model.features(&x.select_rows(probe_ids)),
            probe_ids: probe_ids.to_vec(),
        }
    }
}

/// Writes snapshots as `tag,sample_id,z0,...`.
pub fn write_snapshots_csv<W: Write>(snaps: &[FeatureSnapshot], mut w: W) -> Result<()> {
    let h = snaps.first().map_or(0, |s| s.features.cols());
    let cols: Vec<String> = (0..h).map(|i| format!("z{i}")).collect();
    writeln!(w, "tag,sample_id,{}", cols.join(","))?;
    for s in snaps {
        for (r, id) in s.probe_ids.iter().enumerate() {
            let vals: Vec<String> = s.features.row(r).iter().map(|v| format_float(*v)).collect();
            writeln!(w, "{},{},{}", s.tag, id, vals.join(","))?;
        }
    }
    Ok(())
}

/// Per-FT-epoch trace of the head (direction term) during fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtEpochTrace {
    pub epoch: usize,
    pub steps: usize,
    /// `‖∇_v L‖` (head weights only) at the first step of the epoch.
    pub head_grad_norm: f64,
    /// `‖v‖_F` over head weights at the end of the epoch.
    pub head_norm: f64,
    /// `‖v_end − v_start‖_F` over the epoch.
    pub direction_change: f64,
    /// Max over steps of `| ‖v_{s+1} − v_s‖ − lr·‖∇_v L‖ |`.
    pub identity_gap: f64,
}

/// When head probing counts as converged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceRule {
    pub window: usize,
    /// Max spread of train accuracy (fraction) over the window.
    pub acc_tol: f64,
    /// Optional extra requirement on relative train-loss change over the window.
    #[serde(default)]
    pub loss_rel_tol: Option<f64>,
}

impl Default for ConvergenceRule {
    /// Train accuracy moves by less than 0.1 percentage points over 10 epochs.
    fn default() -> Self {
        Self {
            window: 10,
            acc_tol: 0.001,
            loss_rel_tol: None,
        }
    }
}

impl ConvergenceRule {
    fn converged(&self, log: &[EpochMetrics]) -> bool {
        if log.len() <= self.window {
            return false;
        }
        let tail = &log[log.len() - self.window - 1..];
        let (lo, hi) = tail
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| (lo.min(m.train_acc), hi.max(m.train_acc)));
        if hi - lo >= self.acc_tol {
            return false;
        }
        match self.loss_rel_tol {
            None => true,
            Some(tol) => {
                let first = tail[0].train_loss;
                let last = tail[tail.len() - 1].train_loss;
                (first - last).abs() <= tol * first.abs().max(f64::MIN_POSITIVE)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub hp_config: Option<StageConfig>,
    pub ft_config: Option<StageConfig>,
    /// Epoch indices run on across stages (HP first).
    pub epochs: Vec<EpochMetrics>,
    /// Number of HP epochs actually run (the stage boundary).
    pub hp_epochs: usize,
    pub hp_converged: Option<bool>,
    /// Train accuracy at the HP/FT boundary.
    pub hp_train_acc: Option<f64>,
    pub ft_steps: usize,
    pub ft_best_valid_acc: Option<f64>,
    pub ft_best_epoch: Option<usize>,
    pub ft_final_valid_acc: Option<f64>,
    pub snapshot_tags: Vec<SnapshotTag>,
    pub aie: Option<EnergyReport>,
    pub ft_trace: Vec<FtEpochTrace>,
}

impl RunRecord {
    pub fn empty(seed: u64) -> Self {
        Self {
            seed,
            hp_config: None,
            ft_config: None,
            epochs: Vec::new(),
            hp_epochs: 0,
            hp_converged: None,
            hp_train_acc: None,
            ft_steps: 0,
            ft_best_valid_acc: None,
            ft_best_epoch: None,
            ft_final_valid_acc: None,
            snapshot_tags: Vec::new(),
            aie: None,
            ft_trace: Vec::new(),
        }
    }

    pub fn stage_epochs(&self, stage: Stage) -> impl Iterator<Item = &EpochMetrics> + '_ {
        self.epochs.iter().filter(move |m| m.stage == stage)
    }

    /// Per-epoch CSV: `stage,epoch,train_loss,train_acc,valid_loss,valid_acc`.
    pub fn write_metrics_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "stage,epoch,train_loss,train_acc,valid_loss,valid_acc")?;
        for m in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                m.stage,
                m.epoch,
                format_float(m.train_loss),
                format_float(m.train_acc),
                format_float(m.valid_loss),
                format_float(m.valid_acc)
            )?;
        }
        Ok(())
    }

    /// Head trace CSV, one row per FT epoch.
    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,steps,head_grad_norm,head_norm,direction_change,identity_gap")?;
        for t in &self.ft_trace {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                t.epoch,
                t.steps,
                format_float(t.head_grad_norm),
                format_float(t.head_norm),
                format_float(t.direction_change),
                format_float(t.identity_gap)
            )?;
        }
        Ok(())
    }
}

/// Everything produced by one HP-FT run.
#[derive(Debug, Clone)]
pub struct RunBundle {
    pub record: RunRecord,
    /// Model at the HP/FT boundary.
    pub hp_model: Network,
    /// Model after FT (best epoch if early stopping restored it).
    pub model: Network,
    pub snapshots: Vec<FeatureSnapshot>,
    /// Model after every FT epoch (index 0 is the boundary model), when kept.
    pub trajectory: Vec<Network>,
}

impl RunBundle {
    pub fn snapshot(&self, tag: SnapshotTag) -> Option<&FeatureSnapshot> {
        self.snapshots.iter().find(|s| s.tag == tag)
    }
}

/// Heavy-ball SGD in the `buf = μ·buf + g; p -= lr·buf` form.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    buf: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            buf: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), grad.len());
        if self.momentum == 0.0 {
            params.iter_mut().zip(grad).for_each(|(p, g)| *p -= self.lr * g);
            return;
        }
        if self.buf.is_empty() {
            self.buf = grad.to_vec();
        } else {
            self.buf
                .iter_mut()
                .zip(grad)
                .for_each(|(b, g)| *b = self.momentum * *b + g);
        }
        params.iter_mut().zip(&self.buf).for_each(|(p, b)| *p -= self.lr * b);
    }
}

/// Index batches for one epoch; full batch keeps the natural order and draws nothing.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut RngState) -> Vec<Vec<usize>> {
    if batch_size == 0 || batch_size >= n {
        return vec![(0..n).collect()];
    }
    rng.permutation(n).chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn rows_or_all<'a>(m: &'a Matrix, idx: &[usize]) -> std::borrow::Cow<'a, Matrix> {
    if idx.len() == m.rows() && idx.iter().enumerate().all(|(i, &j)| i == j) {
        std::borrow::Cow::Borrowed(m)
    } else {
        std::borrow::Cow::Owned(m.select_rows(idx))
    }
}

fn with_context(e: Error, stage: Stage, epoch: usize) -> Error {
    match e {
        Error::Divergence { .. } => Error::Divergence {
            stage: stage.to_string(),
            epoch,
        },
        other => other,
    }
}

fn check_finite(v: f64, stage: Stage, epoch: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            stage: stage.to_string(),
            epoch,
        })
    }
}

fn head_weights(head: &Head) -> Vec<f64> {
    head.layers.iter().flat_map(|l| l.w.as_slice().iter().copied()).collect()
}

/// Head probing for `cfg.epochs` epochs; the backbone is never touched.
pub fn head_probe(model: &Network, data: &TaskData, cfg: &StageConfig, rng: &mut RngState) -> Result<(Network, RunRecord)> {
    probe(model, data, cfg, None, rng)
}

/// Head probing until [`ConvergenceRule`] holds or `cfg.epochs` is reached.
pub fn hp_until_converged(
    model: &Network,
    data: &TaskData,
    cfg: &StageConfig,
    rule: &ConvergenceRule,
    rng: &mut RngState,
) -> Result<(Network, RunRecord)> {
    probe(model, data, cfg, Some(rule), rng)
}

fn probe(
    model: &Network,
    data: &TaskData,
    cfg: &StageConfig,
    rule: Option<&ConvergenceRule>,
    rng: &mut RngState,
) -> Result<(Network, RunRecord)> {
    cfg.expect(Stage::Hp)?;
    let mut net = model.clone();
    let mut record = RunRecord::empty(rng.seed());
    record.hp_config = Some(cfg.clone());
    if cfg.epochs == 0 {
        record.hp_converged = rule.map(|_| false);
        return Ok((net, record));
    }
    // frozen backbone: features computed once
    let z_train = net.features(&data.train.x);
    let z_valid = net.features(&data.valid.x);
    let targets = smooth_labels(&data.train.onehot(), cfg.label_eta);
    let valid_targets = data.valid.onehot();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut params = net.head.params();
    let mut converged = false;
    for epoch in 1..=cfg.epochs {
        for idx in epoch_batches(data.train.len(), cfg.batch_size, rng) {
            let zb = rows_or_all(&z_train, &idx);
            let tb = rows_or_all(&targets, &idx);
            let (_, grads) = net
                .head
                .loss_and_grads(&zb, &tb, cfg.loss)
                .map_err(|e| with_context(e, Stage::Hp, epoch))?;
            opt.step(&mut params, &flatten_grads(&grads));
            net.head.set_params(&params);
        }
        let qt = net.head.forward_batch(&z_train);
        let qv = net.head.forward_batch(&z_valid);
        let m = EpochMetrics {
            stage: Stage::Hp,
            epoch,
            train_loss: mean_loss(&qt, &targets, cfg.loss),
            train_acc: accuracy_of(&qt, &data.train.labels),
            valid_loss: mean_loss(&qv, &valid_targets, cfg.loss),
            valid_acc: accuracy_of(&qv, &data.valid.labels),
        };
        check_finite(m.train_loss, Stage::Hp, epoch)?;
        record.epochs.push(m);
        if let Some(r) = rule {
            if r.converged(&record.epochs) {
                converged = true;
                break;
            }
        }
    }
    record.hp_epochs = record.epochs.len();
    record.hp_converged = rule.map(|_| converged);
    record.hp_train_acc = record.epochs.last().map(|m| m.train_acc);
    Ok((net, record))
}

/// Options for [`finetune`] beyond the stage config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FtOptions {
    /// Training-set indices whose features are snapshotted.
    pub probe_ids: Vec<usize>,
    /// Snapshot every this many epochs (0 = only z0 and zT).
    pub snapshot_every: usize,
    /// Keep a copy of the model after every epoch.
    pub keep_trajectory: bool,
    /// Stop as soon as train accuracy reaches this value.
    pub stop_at_train_acc: Option<f64>,
}

/// Output of [`finetune`].
#[derive(Debug, Clone)]
pub struct FtOutcome {
    pub model: Network,
    pub record: RunRecord,
    pub snapshots: Vec<FeatureSnapshot>,
    pub trajectory: Vec<Network>,
}

/// Joint training of backbone and head. Also used for pretraining.
pub fn finetune(model: &Network, data: &TaskData, cfg: &StageConfig, opts: &FtOptions, rng: &mut RngState) -> Result<FtOutcome> {
    if cfg.stage == Stage::Hp {
        return Err(Error::Config("finetune needs an ft or pretrain stage config".into()));
    }
    cfg.validate()?;
    let stage = cfg.stage;
    let mut net = model.clone();
    let mut record = RunRecord::empty(rng.seed());
    record.ft_config = Some(cfg.clone());
    let targets = smooth_labels(&data.train.onehot(), cfg.label_eta);
    let valid_targets = data.valid.onehot();
    let mut snapshots = Vec::new();
    if !opts.probe_ids.is_empty() {
        snapshots.push(FeatureSnapshot::take(SnapshotTag::Z0, &net, &data.train.x, &opts.probe_ids));
    }
    let mut trajectory = Vec::new();
    if opts.keep_trajectory {
        trajectory.push(net.clone());
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut params = net.params();
    let n_backbone = net.backbone.param_count();
    let linear_head = net.head.layers.len() == 1;
    let mut best: Option<(f64, usize, Network)> = None;
    let mut since_best = 0usize;
    let mut best_valid_acc: Option<(f64, usize)> = None;
    for epoch in 1..=cfg.epochs {
        let w_start = head_weights(&net.head);
        let mut trace = FtEpochTrace {
            epoch,
            steps: 0,
            head_grad_norm: 0.0,
            head_norm: 0.0,
            direction_change: 0.0,
            identity_gap: 0.0,
        };
        for idx in epoch_batches(data.train.len(), cfg.batch_size, rng) {
            let xb = rows_or_all(&data.train.x, &idx);
            let tb = rows_or_all(&targets, &idx);
            let (_, grads) = net
                .loss_and_grads(&xb, &tb, cfg.loss)
                .map_err(|e| with_context(e, stage, epoch))?;
            let gw: Vec<f64> = grads.head.iter().flat_map(|g| g.w.as_slice().iter().copied()).collect();
            let gw_norm = norm(&gw);
            if trace.steps == 0 {
                trace.head_grad_norm = gw_norm;
            }
            let before = head_weights(&net.head);
            let mut flat = grads.backbone_flat();
            flat.extend(grads.head_flat());
            opt.step(&mut params, &flat);
            net.backbone.set_params(&params[..n_backbone]);
            net.head.set_params(&params[n_backbone..]);
            if linear_head {
                let after = head_weights(&net.head);
                let moved = norm(&crate::numkernel::sub(&after, &before));
                trace.identity_gap = trace.identity_gap.max((moved - cfg.lr * gw_norm).abs());
            }
            trace.steps += 1;
        }
        record.ft_steps += trace.steps;
        let w_end = head_weights(&net.head);
        trace.head_norm = norm(&w_end);
        trace.direction_change = norm(&crate::numkernel::sub(&w_end, &w_start));
        record.ft_trace.push(trace);

        let qt = net.predict(&data.train.x);
        let qv = net.predict(&data.valid.x);
        let m = EpochMetrics {
            stage,
            epoch,
            train_loss: mean_loss(&qt, &targets, cfg.loss),
            train_acc: accuracy_of(&qt, &data.train.labels),
            valid_loss: mean_loss(&qv, &valid_targets, cfg.loss),
            valid_acc: accuracy_of(&qv, &data.valid.labels),
        };
        check_finite(m.train_loss, stage, epoch)?;
        if best_valid_acc.is_none_or(|(a, _)| m.valid_acc > a) {
            best_valid_acc = Some((m.valid_acc, epoch));
        }
        if opts.snapshot_every > 0 && epoch % opts.snapshot_every == 0 && epoch < cfg.epochs && !opts.probe_ids.is_empty() {
            snapshots.push(FeatureSnapshot::take(SnapshotTag::Zt(epoch), &net, &data.train.x, &opts.probe_ids));
        }
        if opts.keep_trajectory {
            trajectory.push(net.clone());
        }
        let reached = opts.stop_at_train_acc.is_some_and(|t| m.train_acc >= t);
        let mut stop = reached;
        if let Some(es) = &cfg.early_stop {
            let score = match es.metric {
                EarlyStopMetric::ValidAcc => m.valid_acc,
                EarlyStopMetric::ValidLoss => -m.valid_loss,
            };
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, epoch, net.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= es.patience {
                    stop = true;
                }
            }
        }
        record.epochs.push(m);
        if stop {
            break;
        }
    }
    if let Some((_, epoch, model)) = best {
        net = model;
        record.ft_best_epoch = Some(epoch);
    } else {
        record.ft_best_epoch = best_valid_acc.map(|(_, e)| e);
    }
    record.ft_best_valid_acc = best_valid_acc.map(|(a, _)| a);
    record.ft_final_valid_acc = Some(net.accuracy(&data.valid.x, &data.valid.labels));
    if !opts.probe_ids.is_empty() {
        snapshots.push(FeatureSnapshot::take(SnapshotTag::ZT, &net, &data.train.x, &opts.probe_ids));
    }
    record.snapshot_tags = snapshots.iter().map(|s| s.tag).collect();
    Ok(FtOutcome {
        model: net,
        record,
        snapshots,
        trajectory,
    })
}

/// How to build the task head on top of a pretrained backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub kind: HeadKind,
    /// Hidden width of an `mlp2` head.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Backbone layers moved into the head and reinitialized.
    #[serde(default)]
    pub reinit_last: usize,
}

fn default_hidden() -> usize {
    64
}

impl HeadSpec {
    pub fn linear() -> Self {
        Self {
            kind: HeadKind::Linear,
            hidden: default_hidden(),
            reinit_last: 0,
        }
    }

    pub fn mlp2(hidden: usize) -> Self {
        Self {
            kind: HeadKind::Mlp2,
            hidden,
            reinit_last: 0,
        }
    }

    pub fn build(&self, backbone: &MlpBackbone, num_classes: usize, rng: &mut RngState) -> Result<Network> {
        let head = Head::new(self.kind, backbone.output_dim(), self.hidden, num_classes, &mut rng.fork_named("head"));
        Network::new(backbone.clone(), head).reinit_partial_backbone(self.reinit_last, &mut rng.fork_named("reinit"))
    }
}

/// Run-level options for [`hp_ft_run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    #[serde(default = "default_probe_count")]
    pub probe_count: usize,
    #[serde(default)]
    pub snapshot_every: usize,
    #[serde(default)]
    pub keep_trajectory: bool,
    /// When set, HP stops early once converged (cfg.epochs is the cap).
    #[serde(default)]
    pub hp_convergence: Option<ConvergenceRule>,
}

fn default_probe_count() -> usize {
    100
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            probe_count: default_probe_count(),
            snapshot_every: 0,
            keep_trajectory: false,
            hp_convergence: None,
        }
    }
}

/// Seeded probe subset of the training set, sorted.
pub fn probe_ids(n: usize, count: usize, rng: &RngState) -> Vec<usize> {
    let mut ids = rng.fork_named("probe").sample_indices(n, count.min(n));
    ids.sort_unstable();
    ids
}

/// Head probing then fine-tuning from a pretrained backbone. AIE is measured
/// at the boundary against the FT targets.
pub fn hp_ft_run(
    backbone: &MlpBackbone,
    head_spec: &HeadSpec,
    data: &TaskData,
    hp_cfg: &StageConfig,
    ft_cfg: &StageConfig,
    opts: &RunOptions,
    seed: u64,
) -> Result<RunBundle> {
    hp_cfg.expect(Stage::Hp)?;
    ft_cfg.expect(Stage::Ft)?;
    let root = RngState::new(seed);
    let net = head_spec.build(backbone, data.train.num_classes, &mut root.fork_named("init"))?;
    let mut hp_rng = root.fork_named("hp");
    let (hp_model, hp_record) = match &opts.hp_convergence {
        Some(rule) => hp_until_converged(&net, data, hp_cfg, rule, &mut hp_rng)?,
        None => head_probe(&net, data, hp_cfg, &mut hp_rng)?,
    };
    let ft_targets = smooth_labels(&data.train.onehot(), ft_cfg.label_eta);
    let aie = compute_aie(&hp_model, &data.train.x, &ft_targets, ft_cfg.loss);
    let ft_opts = FtOptions {
        probe_ids: probe_ids(data.train.len(), opts.probe_count, &root),
        snapshot_every: opts.snapshot_every,
        keep_trajectory: opts.keep_trajectory,
        stop_at_train_acc: None,
    };
    let ft = finetune(&hp_model, data, ft_cfg, &ft_opts, &mut root.fork_named("ft"))?;

    let mut record = hp_record;
    record.seed = seed;
    record.ft_config = Some(ft_cfg.clone());
    record.hp_train_acc = Some(accuracy_of(&hp_model.predict(&data.train.x), &data.train.labels));
    let offset = record.hp_epochs;
    record.epochs.extend(ft.record.epochs.into_iter().map(|mut m| {
        m.epoch += offset;
        m
    }));
    record.ft_steps = ft.record.ft_steps;
    record.ft_best_valid_acc = ft.record.ft_best_valid_acc;
    record.ft_best_epoch = ft.record.ft_best_epoch;
    record.ft_final_valid_acc = ft.record.ft_final_valid_acc;
    record.snapshot_tags = ft.record.snapshot_tags;
    record.ft_trace = ft.record.ft_trace;
    record.aie = Some(aie);
    Ok(RunBundle {
        record,
        hp_model,
        model: ft.model,
        snapshots: ft.snapshots,
        trajectory: ft.trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_momentum_matches_heavy_ball() {
        let mut opt = Sgd::new(0.1, 0.9);
        let mut p = vec![1.0];
        opt.step(&mut p, &[1.0]);
        assert!((p[0] - 0.9).abs() < 1e-15);
        opt.step(&mut p, &[1.0]);
        // buf = 0.9 + 1 = 1.9
        assert!((p[0] - (0.9 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn convergence_rule_window() {
        let m = |acc: f64| EpochMetrics {
            stage: Stage::Hp,
            epoch: 0,
            train_loss: 1.0,
            train_acc: acc,
            valid_loss: 1.0,
            valid_acc: 0.0,
        };
        let rule = ConvergenceRule::default();
        let mut log: Vec<_> = (0..10).map(|_| m(0.5)).collect();
        assert!(!rule.converged(&log));
        log.push(m(0.5));
        assert!(rule.converged(&log));
        log.push(m(0.51));
        assert!(!rule.converged(&log));
    }

    #[test]
    fn stage_config_json_rejects_unknown() {
        let ok = r#"{"stage":"hp","epochs":3,"lr":0.1,"loss":"cross_entropy"}"#;
        let cfg: StageConfig = serde_json::from_str(ok).unwrap();
        assert_eq!(cfg.label_eta, 1.0);
        let bad = r#"{"stage":"hp","epochs":3,"lr":0.1,"loss":"mse","lrr":1}"#;
        assert!(serde_json::from_str::<StageConfig>(bad).is_err());
    }

    #[test]
    fn snapshot_tag_names() {
        assert_eq!(SnapshotTag::Z0.to_string(), "z0");
        assert_eq!(SnapshotTag::Zt(4).to_string(), "zt4");
        assert_eq!(SnapshotTag::ZT.to_string(), "zT");
    }
}
