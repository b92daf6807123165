use hpft::adaptmetrics::{adaptation_report, pca_scatter_export, AdaptationReport, ExchangeMatrix};
use hpft::datagen::{format_float, gen_overparam_regression, smooth_labels, ClassificationDataset, Split};
use hpft::dynamics::{check_aie_bound, compute_aie, ntk_probe, track_direction, AieBoundCheck, DirectionSeries, EnergyReport, NtkProbeRecord};
use hpft::experiments::{
    aie_bound_study, exchange_over_seeds, gen_downstream, gen_pretrain_data, head_capacity_study, ls_condition,
    ls_hp_study, ntk_pretrained_vs_random, partial_backbone_study, pretrain_backbone, reserved_energy, sweep_trend,
    sweep_tau, trend_suite, ProtocolReport,
};
use hpft::models::{Checkpoint, MlpBackbone, Network};
use hpft::numkernel::RngState;
use hpft::training::{hp_ft_run, probe_ids, write_snapshots_csv, FeatureSnapshot, RunBundle, RunRecord, SnapshotTag, TaskData};
use serde_json::{json, Value};
use std::io::{BufReader, Write};
use std::path::Path;

use crate::config::{self, *};
use crate::store::{Manifest, RunStore};
use crate::CliError;

pub struct Ctx<'a> {
    pub config_path: &'a Path,
    pub out: &'a Path,
    pub force: bool,
    pub seed: Option<u64>,
}

impl Ctx<'_> {
    fn base(&self) -> &Path {
        self.config_path.parent().unwrap_or(Path::new("."))
    }
}

/// JSON number rounded to the 9 significant digits used in CSVs; non-finite
/// values become null.
fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(format_float(v).parse::<f64>().unwrap_or(v))
    } else {
        Value::Null
    }
}

fn echo<T: serde::Serialize>(cfg: &T) -> Value {
    serde_json::to_value(cfg).unwrap_or(Value::Null)
}

fn read_dataset(path: &Path, num_classes: Option<usize>, split: Split) -> Result<ClassificationDataset, CliError> {
    let f = std::fs::File::open(path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
    Ok(ClassificationDataset::read_csv(BufReader::new(f), num_classes, split)?)
}

fn load_data(base: &Path, paths: &DataPaths) -> Result<TaskData, CliError> {
    let train = read_dataset(&config::resolve(base, &paths.train), None, Split::Train)?;
    let valid = read_dataset(&config::resolve(base, &paths.valid), Some(train.num_classes), Split::Valid)?;
    if train.dim() != valid.dim() {
        return Err(CliError::Config(format!(
            "data: train has {} features, valid has {}",
            train.dim(),
            valid.dim()
        )));
    }
    Ok(TaskData { train, valid })
}

fn load_network(path: &Path) -> Result<Network, CliError> {
    Ok(Checkpoint::load(path)?.network)
}

fn load_backbone(base: &Path, path: &Path, data: &TaskData) -> Result<MlpBackbone, CliError> {
    let backbone = load_network(&config::resolve(base, path))?.backbone;
    if backbone.input_dim() != data.train.dim() {
        return Err(CliError::Config(format!(
            "checkpoint expects {} inputs, data has {}",
            backbone.input_dim(),
            data.train.dim()
        )));
    }
    Ok(backbone)
}

fn write_dataset(store: &mut RunStore, rel: &str, d: &ClassificationDataset) -> Result<(), CliError> {
    store.write_with(rel, |w| d.write_csv(w))
}

pub fn gen_data(ctx: &Ctx) -> Result<(), CliError> {
    let mut cfg: GenDataConfig = config::load(ctx.config_path)?;
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    let pre = gen_pretrain_data(&cfg.pretrain, cfg.seed)?;
    let down = gen_downstream(&cfg.pretrain, &cfg.downstream, cfg.seed)?;
    let regression = match &cfg.regression {
        Some(r) => Some(gen_overparam_regression(r.d, r.n, &mut RngState::new(cfg.seed).fork_named("regression"))?),
        None => None,
    };
    let mut store = RunStore::create(ctx.out, ctx.force)?;
    write_dataset(&mut store, "data/pretrain_train.csv", &pre.train)?;
    write_dataset(&mut store, "data/pretrain_valid.csv", &pre.valid)?;
    write_dataset(&mut store, "data/downstream_train.csv", &down.train)?;
    write_dataset(&mut store, "data/downstream_valid.csv", &down.valid)?;
    if let Some(r) = &regression {
        store.write_with("data/regression.csv", |w| r.write_csv(w))?;
    }
    let summary = json!({
        "pretrain_train": pre.train.len(),
        "pretrain_valid": pre.valid.len(),
        "downstream_train": down.train.len(),
        "downstream_valid": down.valid.len(),
        "downstream_classes": down.train.num_classes,
        "regression_rows": regression.as_ref().map(|r| r.y.len()),
    });
    store.finish("gen-data", echo(&cfg), summary)?;
    Ok(())
}

pub fn pretrain(ctx: &Ctx) -> Result<(), CliError> {
    let mut cfg: PretrainCmdConfig = config::load(ctx.config_path)?;
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    let data = gen_pretrain_data(&cfg.pretrain, cfg.data_seed.unwrap_or(cfg.seed))?;
    let out = pretrain_backbone(&cfg.pretrain, &data, cfg.seed)?;
    let mut store = RunStore::create(ctx.out, ctx.force)?;
    store.write_bytes("checkpoints/backbone.json", Checkpoint::new(&out.network).to_json()?.as_bytes())?;
    let summary = json!({
        "train_acc": num(out.train_acc),
        "valid_acc": num(out.network.accuracy(&data.valid.x, &data.valid.labels)),
        "epochs": out.epochs,
        "backbone_hash": format!("{:016x}", out.network.backbone_hash()),
    });
    store.finish("pretrain", echo(&cfg), summary)?;
    Ok(())
}

/// Everything `run` and `analyze` derive from a finished bundle.
struct Analysis {
    aie: EnergyReport,
    adaptation: AdaptationReport,
    ntk: NtkProbeRecord,
    bound: AieBoundCheck,
    direction: DirectionSeries,
}

impl Analysis {
    fn of(bundle: &RunBundle, data: &TaskData, n_probe: usize) -> Result<Self, CliError> {
        let ft = bundle
            .record
            .ft_config
            .as_ref()
            .ok_or_else(|| CliError::Missing("run record has no ft config".into()))?;
        let ft_targets = smooth_labels(&data.train.onehot(), ft.label_eta);
        let aie = compute_aie(&bundle.hp_model, &data.train.x, &ft_targets, ft.loss);
        let z0 = bundle.snapshot(SnapshotTag::Z0).ok_or_else(|| CliError::Missing("z0 snapshot".into()))?;
        let zt = bundle.snapshot(SnapshotTag::ZT).ok_or_else(|| CliError::Missing("zT snapshot".into()))?;
        let adaptation = adaptation_report(z0, zt)?;
        let ntk = ntk_probe(bundle, &data.train.x, n_probe, &RngState::new(bundle.record.seed))?;
        let bound = check_aie_bound(bundle, &ntk, &data.train.x, &ft_targets)?;
        let direction = track_direction(bundle);
        Ok(Self {
            aie,
            adaptation,
            ntk,
            bound,
            direction,
        })
    }

    fn write(&self, store: &mut RunStore) -> Result<(), CliError> {
        store.write_with("metrics/aie.csv", |w| self.aie.write_csv(w))?;
        store.write_with("metrics/adaptation.csv", |w| self.adaptation.write_csv(w))?;
        store.write_with("metrics/ntk.csv", |w| self.ntk.write_csv(w))?;
        store.write_with("metrics/direction.csv", |w| self.direction.write_csv(w))?;
        let b = &self.bound;
        store.write_with("metrics/bound.csv", |w| {
            writeln!(w, "lhs,gamma,steps,c1,c2,c,e_aie,holds,slack,stable_fraction")?;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                format_float(b.lhs),
                format_float(b.gamma),
                b.steps,
                format_float(b.c1),
                format_float(b.c2),
                format_float(b.c),
                format_float(b.e_aie),
                u8::from(b.holds),
                format_float(b.slack),
                format_float(b.stable_fraction)
            )?;
            Ok(())
        })
    }

    fn summary(&self) -> Value {
        let a = &self.adaptation;
        let b = &self.bound;
        json!({
            "e_aie": num(self.aie.e_aie),
            "d_euc": num(a.mean_d_euc),
            "d_dot": num(a.mean_d_dot),
            "d_cos": num(a.mean_d_cos),
            "one_minus_cos": num(a.one_minus_cos()),
            "mean_k_gap": num(self.ntk.mean_k_gap()),
            "bound": {
                "lhs": num(b.lhs),
                "c": num(b.c),
                "c1": num(b.c1),
                "c2": num(b.c2),
                "gamma": num(b.gamma),
                "steps": b.steps,
                "holds": b.holds,
                "slack": num(b.slack),
            },
            "direction_identity_exact": self.direction.exact,
        })
    }
}

pub fn run(ctx: &Ctx) -> Result<(), CliError> {
    let mut cfg: RunConfig = config::load(ctx.config_path)?;
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    config::check_stage("hp", &cfg.hp)?;
    config::check_stage("ft", &cfg.ft)?;
    let base = ctx.base();
    let data = load_data(base, &cfg.data)?;
    let backbone = load_backbone(base, &cfg.checkpoint, &data)?;
    let mut opts = cfg.options.clone();
    opts.keep_trajectory = true;
    if opts.probe_count == 0 {
        return Err(CliError::Config("options.probe_count: run needs at least one probe sample".into()));
    }
    let bundle = hp_ft_run(&backbone, &cfg.head, &data, &cfg.hp, &cfg.ft, &opts, cfg.seed)?;
    let analysis = Analysis::of(&bundle, &data, cfg.ntk_probe)?;

    let mut store = RunStore::create(ctx.out, ctx.force)?;
    store.write_bytes("checkpoints/hp_model.json", Checkpoint::new(&bundle.hp_model).to_json()?.as_bytes())?;
    store.write_bytes("checkpoints/final.json", Checkpoint::new(&bundle.model).to_json()?.as_bytes())?;
    for (i, m) in bundle.trajectory.iter().enumerate() {
        store.write_bytes(
            &format!("checkpoints/trajectory/epoch_{i:04}.json"),
            Checkpoint::new(m).to_json()?.as_bytes(),
        )?;
    }
    store.write_json("run_record.json", &bundle.record)?;
    store.write_with("metrics/epochs.csv", |w| bundle.record.write_metrics_csv(w))?;
    store.write_with("metrics/trace.csv", |w| bundle.record.write_trace_csv(w))?;
    store.write_with("snapshots/features.csv", |w| write_snapshots_csv(&bundle.snapshots, w))?;
    let scatter = pca_scatter_export(&bundle.snapshots, &data.train.labels)?;
    store.write_with("snapshots/pca.csv", |w| scatter.write_csv(w))?;
    analysis.write(&mut store)?;
    let rec = &bundle.record;
    let summary = json!({
        "seed": cfg.seed,
        "hp_epochs": rec.hp_epochs,
        "hp_train_acc": rec.hp_train_acc.map_or(Value::Null, num),
        "ft_steps": rec.ft_steps,
        "ft_best_valid_acc": rec.ft_best_valid_acc.map_or(Value::Null, num),
        "ft_final_valid_acc": rec.ft_final_valid_acc.map_or(Value::Null, num),
        "analysis": analysis.summary(),
    });
    store.finish("run", echo(&cfg), summary)?;
    Ok(())
}

pub fn analyze(ctx: &Ctx) -> Result<(), CliError> {
    let cfg: AnalyzeConfig = config::load(ctx.config_path)?;
    let base = ctx.base();
    let run_dir = config::resolve(base, &cfg.run_dir);
    let manifest = Manifest::load(&run_dir)?;
    if manifest.command != "run" {
        return Err(CliError::Config(format!(
            "run_dir: {} holds `{}` output, expected `run`",
            run_dir.display(),
            manifest.command
        )));
    }
    let tampered = manifest.verify(&run_dir)?;
    if !tampered.is_empty() {
        return Err(CliError::Config(format!("run_dir: files changed since the run: {}", tampered.join(", "))));
    }
    let run_cfg: RunConfig =
        serde_json::from_value(manifest.config.clone()).map_err(|e| CliError::Config(format!("run manifest config: {e}")))?;
    let data = load_data(base, &cfg.data)?;
    let record_text = std::fs::read_to_string(run_dir.join("run_record.json")).map_err(CliError::io)?;
    let record: RunRecord = serde_json::from_str(&record_text).map_err(|e| CliError::Config(format!("run_record.json: {e}")))?;
    let hp_model = load_network(&run_dir.join("checkpoints/hp_model.json"))?;
    let model = load_network(&run_dir.join("checkpoints/final.json"))?;
    let trajectory: Vec<Network> = manifest
        .files
        .iter()
        .filter(|f| f.path.starts_with("checkpoints/trajectory/"))
        .map(|f| load_network(&run_dir.join(&f.path)))
        .collect::<Result<_, _>>()?;
    if hp_model.input_dim() != data.train.dim() {
        return Err(CliError::Config("data does not match the run's input dimension".into()));
    }
    let ids = probe_ids(data.train.len(), run_cfg.options.probe_count, &RngState::new(record.seed));
    let snapshots = vec![
        FeatureSnapshot::take(SnapshotTag::Z0, &hp_model, &data.train.x, &ids),
        FeatureSnapshot::take(SnapshotTag::ZT, &model, &data.train.x, &ids),
    ];
    let bundle = RunBundle {
        record,
        hp_model,
        model,
        snapshots,
        trajectory,
    };
    let analysis = Analysis::of(&bundle, &data, cfg.ntk_probe)?;
    let mut store = RunStore::create(ctx.out, ctx.force)?;
    analysis.write(&mut store)?;
    store.finish("analyze", echo(&cfg), json!({ "analysis": analysis.summary() }))?;
    Ok(())
}

fn divergence_summary(n: usize) -> Value {
    json!({ "diverged_runs": n })
}

pub fn sweep(ctx: &Ctx) -> Result<(), CliError> {
    let mut cfg: SweepConfig = config::load(ctx.config_path)?;
    if let Some(s) = ctx.seed {
        config::reseed(&mut cfg.seeds, s);
    }
    config::check_nonempty("seeds", &cfg.seeds)?;
    config::check_nonempty("grid", &cfg.grid)?;
    config::check_stage("hp", &cfg.hp)?;
    config::check_stage("ft", &cfg.ft)?;
    let base = ctx.base();
    let data = load_data(base, &cfg.data)?;
    let backbone = load_backbone(base, &cfg.checkpoint, &data)?;
    let r = sweep_tau(&backbone, &cfg.head, &data, &cfg.grid, &cfg.hp, &cfg.ft, &cfg.options, &cfg.seeds)?;
    let trend = sweep_trend(&r);
    let mut store = RunStore::create(ctx.out, ctx.force)?;
    store.write_with("metrics/sweep.csv", |w| r.write_csv(w))?;
    store.write_with("metrics/sweep_runs.csv", |w| r.write_runs_csv(w))?;
    let summary = json!({
        "tau_star": r.tau_star,
        "tau_star_ties": r.tau_star_ties,
        "interior_optimum": r.interior_optimum,
        "d_euc_non_increasing": trend.d_euc_non_increasing,
        "d_cos_non_decreasing": trend.d_cos_non_decreasing,
        "trend_violations": trend.violations,
        "divergence": divergence_summary(r.runs.iter().filter(|x| x.diverged).count()),
    });
    store.finish("sweep", echo(&cfg), summary)?;
    Ok(())
}

fn exchange_summary(m: &ExchangeMatrix) -> Value {
    let compat = m.compatibility();
    let lowest = compat
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| m.taus[i]);
    json!({
        "diagonal_mean": num(m.diagonal_mean(&m.valid_acc)),
        "off_diagonal_mean": num(m.off_diagonal_mean(&m.valid_acc)),
        "compatibility": compat.iter().map(|&c| num(c)).collect::<Vec<_>>(),
        "lowest_compatibility_tau": lowest,
    })
}

pub fn exchange(ctx: &Ctx) -> Result<(), CliError> {
    let mut cfg: ExchangeConfig = config::load(ctx.config_path)?;
    if let Some(s) = ctx.seed {
        config::reseed(&mut cfg.seeds, s);
    }
    config::check_nonempty("seeds", &cfg.seeds)?;
    config::check_nonempty("taus", &cfg.taus)?;
    config::check_stage("hp", &cfg.hp)?;
    config::check_stage("ft", &cfg.ft)?;
    let base = ctx.base();
    let data = load_data(base, &cfg.data)?;
    let backbone = load_backbone(base, &cfg.checkpoint, &data)?;
    let (per_seed, mean) =
        exchange_over_seeds(&backbone, &cfg.head, &data, &cfg.taus, &cfg.hp, &cfg.ft, &cfg.options, &cfg.seeds)?;
    let mut store = RunStore::create(ctx.out, ctx.force)?;
    for (s, m) in cfg.seeds.iter().zip(&per_seed) {
        store.write_with(&format!("metrics/exchange_seed{s}.csv"), |w| m.write_csv(w))?;
    }
    store.write_with("metrics/exchange_mean.csv", |w| mean.write_csv(w))?;
    store.finish("exchange", echo(&cfg), json!({ "mean": exchange_summary(&mean) }))?;
    Ok(())
}

pub fn trend(ctx: &Ctx) -> Result<(), CliError> {
    let mut cfg: TrendConfig = config::load(ctx.config_path)?;
    if let Some(s) = ctx.seed {
        cfg.trend.seed = s;
    }
    let t = &cfg.trend;
    if t.instances == 0 || t.grid_steps < 2 || !(t.beta_lo < t.beta_hi) {
        return Err(CliError::Config(
            "trend: needs instances >= 1, grid_steps >= 2 and beta_lo < beta_hi".into(),
        ));
    }
    if t.n > t.d || t.n == 0 {
        return Err(CliError::Config("trend: needs 1 <= n <= d".into()));
    }
    let r = trend_suite(t)?;
    let mut store = RunStore::create(ctx.out, ctx.force)?;
    store.write_with("metrics/trend.csv", |w| r.write_csv(w))?;
    let fold = |f: fn(&hpft::experiments::TrendVerdict) -> Option<f64>, max: bool| {
        let vals: Vec<f64> = r.verdicts.iter().filter_map(f).collect();
        let v = if max {
            vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        } else {
            vals.iter().copied().fold(f64::INFINITY, f64::min)
        };
        num(v)
    };
    let summary = json!({
        "instances": r.verdicts.len(),
        "d_dot_pass_rate": num(r.d_dot_pass_rate),
        "d_euc_pass_rate": num(r.d_euc_pass_rate),
        "zt_pass_rate": num(r.zt_pass_rate),
        "phase_pass_rate": num(r.phase_pass_rate),
        "max_alpha_b_scaled": fold(|v| v.alpha_b_scaled, true),
        "min_alpha_v_scaled": fold(|v| v.alpha_v_scaled, false),
    });
    store.finish("trend", echo(&cfg), summary)?;
    Ok(())
}

fn protocol_summary(r: &ProtocolReport) -> Value {
    let rows: Vec<Value> = r
        .rows
        .iter()
        .map(|row| {
            let a = &row.agg;
            json!({
                "condition": row.name,
                "n_ok": a.n_ok,
                "hp_train_acc": num(a.hp_train_acc.mean),
                "residual_hp_energy": num(a.residual_hp_energy.mean),
                "e_aie": num(a.e_aie.mean),
                "d_euc": num(a.d_euc.mean),
                "one_minus_cos": num(a.one_minus_cos.mean),
                "ft_valid_acc": num(a.ft_best_valid_acc.mean),
            })
        })
        .collect();
    json!({ "protocol": r.protocol, "rows": rows })
}

fn write_protocol(store: &mut RunStore, r: &ProtocolReport) -> Result<(), CliError> {
    store.write_with("metrics/report.csv", |w| r.write_csv(w))?;
    store.write_with("metrics/report_runs.csv", |w| r.write_runs_csv(w))
}

pub fn report(ctx: &Ctx) -> Result<(), CliError> {
    let mut cfg: ReportConfig = config::load(ctx.config_path)?;
    if let Some(s) = ctx.seed {
        config::reseed(&mut cfg.seeds, s);
    }
    config::check_nonempty("seeds", &cfg.seeds)?;
    config::check_stage("hp", &cfg.hp)?;
    config::check_stage("ft", &cfg.ft)?;
    let base = ctx.base();
    let data = load_data(base, &cfg.data)?;
    let backbone = load_backbone(base, &cfg.checkpoint, &data)?;
    let (hp, ft, seeds) = (&cfg.hp, &cfg.ft, &cfg.seeds[..]);
    let mut store;
    let summary = match &cfg.study {
        Study::LsHp { eta_hp, eta_ft } => {
            let r = ls_hp_study(&backbone, &data, *eta_hp, *eta_ft, &cfg.head, hp, ft, &cfg.options, seeds)?;
            store = RunStore::create(ctx.out, ctx.force)?;
            write_protocol(&mut store, &r)?;
            let smoothed = r.row(&ls_condition(*eta_hp, 1.0)).map(|row| row.agg.residual_hp_energy.mean);
            let mut s = protocol_summary(&r);
            s["reserved_energy_target"] = num(reserved_energy(*eta_hp, data.train.num_classes));
            s["residual_hp_energy"] = smoothed.map_or(Value::Null, num);
            s
        }
        Study::HeadCapacity { heads } => {
            config::check_nonempty("study.heads", heads)?;
            let r = head_capacity_study(&backbone, &data, heads, hp, ft, &cfg.options, seeds)?;
            store = RunStore::create(ctx.out, ctx.force)?;
            write_protocol(&mut store, &r)?;
            protocol_summary(&r)
        }
        Study::PartialBackbone { n_last } => {
            config::check_nonempty("study.n_last", n_last)?;
            let r = partial_backbone_study(&backbone, &data, n_last, &cfg.head, hp, ft, &cfg.options, seeds)?;
            store = RunStore::create(ctx.out, ctx.force)?;
            write_protocol(&mut store, &r)?;
            protocol_summary(&r)
        }
        Study::AieBound { taus, n_probe } => {
            config::check_nonempty("study.taus", taus)?;
            let rows = aie_bound_study(&backbone, &cfg.head, &data, taus, hp, ft, *n_probe, seeds)?;
            store = RunStore::create(ctx.out, ctx.force)?;
            store.write_with("metrics/aie_bound.csv", |w| {
                writeln!(w, "tau,seed,lhs,gamma,steps,c1,c2,c,e_aie,holds,slack,stable_fraction")?;
                for r in &rows {
                    let b = &r.check;
                    writeln!(
                        w,
                        "{},{},{},{},{},{},{},{},{},{},{},{}",
                        r.tau,
                        r.seed,
                        format_float(b.lhs),
                        format_float(b.gamma),
                        b.steps,
                        format_float(b.c1),
                        format_float(b.c2),
                        format_float(b.c),
                        format_float(b.e_aie),
                        u8::from(b.holds),
                        format_float(b.slack),
                        format_float(b.stable_fraction)
                    )?;
                }
                Ok(())
            })?;
            json!({ "runs": rows.len(), "all_hold": rows.iter().all(|r| r.check.holds) })
        }
        Study::NtkCompare { n_probe } => {
            let rows = ntk_pretrained_vs_random(&backbone, &cfg.head, &data, hp, ft, *n_probe, seeds)?;
            store = RunStore::create(ctx.out, ctx.force)?;
            store.write_with("metrics/ntk_compare.csv", |w| {
                writeln!(
                    w,
                    "seed,pretrained_mean_k_gap,random_mean_k_gap,pretrained_k_norm0,random_k_norm0,pretrained_rel_gap,random_rel_gap"
                )?;
                for r in &rows {
                    writeln!(
                        w,
                        "{},{},{},{},{},{},{}",
                        r.seed,
                        format_float(r.pretrained_mean_k_gap),
                        format_float(r.random_mean_k_gap),
                        format_float(r.pretrained_k_norm0),
                        format_float(r.random_k_norm0),
                        format_float(r.pretrained_rel_gap),
                        format_float(r.random_rel_gap)
                    )?;
                }
                Ok(())
            })?;
            json!({
                "pretrained_slower_abs": rows.iter().filter(|r| r.pretrained_mean_k_gap < r.random_mean_k_gap).count(),
                "pretrained_slower_rel": rows.iter().filter(|r| r.pretrained_rel_gap < r.random_rel_gap).count(),
                "seeds": rows.len(),
            })
        }
    };
    store.finish("report", echo(&cfg), summary)?;
    Ok(())
}
