//! Training protocols on a small pretrained toy.

use hpft::datagen::ShiftSpec;
use hpft::dynamics::{compute_aie, decompose_step};
use hpft::experiments::*;
use hpft::models::{Checkpoint, Head, HeadKind, LossKind, MlpBackbone, Network};
use hpft::numkernel::{Matrix, RngState};
use hpft::training::*;
use std::sync::OnceLock;

fn small_pretrain() -> PretrainConfig {
    PretrainConfig {
        input_dim: 8,
        num_classes: 4,
        n_per_class: 60,
        mean_radius: 4.0,
        noise_sigma: 0.5,
        widths: vec![16, 16, 16],
        stage: StageConfig::new(Stage::Pretrain, 200, 0.02, LossKind::CrossEntropy)
            .with_momentum(0.9)
            .with_batch_size(32),
        threshold: 0.99,
    }
}

fn downstream(noise: f64) -> DownstreamConfig {
    DownstreamConfig {
        n_per_class: 60,
        noise_sigma: noise,
        shift: ShiftSpec {
            class_subset: vec![0, 1, 2],
            rotation_angle: 0.8,
            scale: 1.3,
            per_class_count: None,
        },
        valid_frac: 0.25,
    }
}

struct Toy {
    backbone: MlpBackbone,
    data: TaskData,
}

fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let pre = small_pretrain();
        let pdata = gen_pretrain_data(&pre, 1).unwrap();
        let out = pretrain_backbone(&pre, &pdata, 1).unwrap();
        assert!(out.train_acc >= 0.99);
        Toy {
            backbone: out.network.backbone,
            data: gen_downstream(&pre, &downstream(1.0), 1).unwrap(),
        }
    })
}

fn hp(epochs: usize) -> StageConfig {
    StageConfig::new(Stage::Hp, epochs, 0.01, LossKind::CrossEntropy).with_momentum(0.9)
}

fn ft() -> StageConfig {
    StageConfig::new(Stage::Ft, 3, 0.005, LossKind::CrossEntropy)
        .with_momentum(0.9)
        .with_batch_size(16)
}

fn opts() -> RunOptions {
    RunOptions {
        probe_count: 30,
        ..RunOptions::default()
    }
}

#[test]
fn aie_is_measured_at_the_stage_boundary() {
    let t = toy();
    let b = hp_ft_run(&t.backbone, &HeadSpec::linear(), &t.data, &hp(5), &ft(), &opts(), 3).unwrap();
    let want = compute_aie(&b.hp_model, &t.data.train.x, &t.data.train.onehot(), LossKind::CrossEntropy);
    assert_eq!(b.record.aie.as_ref().unwrap().e_aie, want.e_aie);
    assert_eq!(b.record.hp_epochs, 5);
    // HP leaves the backbone untouched
    assert_eq!(b.hp_model.backbone, t.backbone);
    assert_ne!(b.model.backbone, t.backbone);
    assert_eq!(b.snapshot(SnapshotTag::Z0).unwrap().features.rows(), 30);
}

#[test]
fn tau_zero_starts_fine_tuning_from_the_initial_head() {
    let t = toy();
    let b = hp_ft_run(&t.backbone, &HeadSpec::linear(), &t.data, &hp(0), &ft(), &opts(), 3).unwrap();
    let init = HeadSpec::linear()
        .build(&t.backbone, 3, &mut RngState::new(3).fork_named("init"))
        .unwrap();
    assert_eq!(b.hp_model, init);
    assert_eq!(b.record.hp_epochs, 0);
}

#[test]
fn runs_are_independent_of_the_thread_count() {
    let t = toy();
    let grid = [0, 2, 4];
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| sweep_tau(&t.backbone, &HeadSpec::linear(), &t.data, &grid, &hp(0), &ft(), &opts(), &[0, 1]).unwrap())
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a, b);
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    a.write_csv(&mut ca).unwrap();
    b.write_csv(&mut cb).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn sweep_selection_is_invariant_to_grid_order() {
    let t = toy();
    let a = sweep_tau(&t.backbone, &HeadSpec::linear(), &t.data, &[0, 1, 4], &hp(0), &ft(), &opts(), &[0]).unwrap();
    let b = sweep_tau(&t.backbone, &HeadSpec::linear(), &t.data, &[4, 0, 1], &hp(0), &ft(), &opts(), &[0]).unwrap();
    assert_eq!(a.tau_star, b.tau_star);
    assert_eq!(a.tau_star_ties, b.tau_star_ties);
}

#[test]
fn divergent_runs_are_flagged_not_fatal() {
    let t = toy();
    let wild = StageConfig::new(Stage::Ft, 40, 1e6, LossKind::Mse).with_momentum(0.9);
    let hp_wild = StageConfig::new(Stage::Hp, 60, 1e6, LossKind::Mse).with_momentum(0.9);
    let r = sweep_tau(&t.backbone, &HeadSpec::linear(), &t.data, &[60], &hp_wild, &wild, &opts(), &[0]).unwrap();
    assert_eq!(r.per_tau[0].agg.n_diverged, 1);
    assert!(r.runs[0].diverged);
    assert!(r.tau_star.is_none());
}

#[test]
fn partial_backbone_zero_matches_the_baseline() {
    let t = toy();
    let rep = partial_backbone_study(&t.backbone, &t.data, &[0, 1], &HeadSpec::linear(), &hp(4), &ft(), &opts(), &[5]).unwrap();
    let base = run_conditions(
        "baseline",
        &t.backbone,
        &t.data,
        &[Condition {
            name: "base".into(),
            head: HeadSpec::linear(),
            hp: hp(4),
            ft: ft(),
        }],
        &opts(),
        &[5],
    )
    .unwrap();
    assert_eq!(rep.row("reinit_last_0").unwrap().runs, base.rows[0].runs);
    assert_ne!(rep.row("reinit_last_1").unwrap().runs, base.rows[0].runs);
    assert!(partial_backbone_study(&t.backbone, &t.data, &[3], &HeadSpec::linear(), &hp(4), &ft(), &opts(), &[5]).is_err());
}

#[test]
fn identical_head_conditions_give_identical_rows() {
    let t = toy();
    let rep = head_capacity_study(&t.backbone, &t.data, &[HeadSpec::linear(), HeadSpec::linear()], &hp(3), &ft(), &opts(), &[0, 1]).unwrap();
    assert_eq!(rep.rows[0].runs, rep.rows[1].runs);
}

#[test]
fn mlp_head_fits_a_noisy_task_that_a_linear_head_cannot() {
    let pre = small_pretrain();
    let t = toy();
    let data = gen_downstream(&pre, &downstream(2.5), 2).unwrap();
    let hp_long = StageConfig::new(Stage::Hp, 1500, 0.01, LossKind::CrossEntropy).with_momentum(0.9);
    let o = RunOptions {
        hp_convergence: Some(ConvergenceRule {
            window: 10,
            acc_tol: 0.001,
            loss_rel_tol: Some(1e-5),
        }),
        ..opts()
    };
    let rep = head_capacity_study(&t.backbone, &data, &[HeadSpec::linear(), HeadSpec::mlp2(64)], &hp_long, &ft(), &o, &[0, 1, 2]).unwrap();
    let lin = rep.row("linear").unwrap();
    let mlp = rep.row("mlp2_64").unwrap();
    assert!(lin.agg.hp_train_acc.mean < 1.0);
    assert!(mlp.agg.hp_train_acc.mean > lin.agg.hp_train_acc.mean);
    // paired seeds: better HP fit leaves less energy
    for (a, b) in lin.runs.iter().zip(&mlp.runs) {
        if b.hp_train_acc > a.hp_train_acc {
            assert!(b.e_aie < a.e_aie, "seed {}", a.seed);
        }
    }
}

#[test]
fn exchange_diagonal_is_each_run_with_its_own_head() {
    let t = toy();
    let taus = [0, 2, 8];
    let ex = exchange_bundle(&t.backbone, &HeadSpec::linear(), &t.data, &taus, &hp(0), &ft(), &opts(), 4).unwrap();
    for (i, &tau) in taus.iter().enumerate() {
        let b = hp_ft_run(&t.backbone, &HeadSpec::linear(), &t.data, &hp(tau), &ft(), &opts(), 4).unwrap();
        let acc = b.model.accuracy(&t.data.valid.x, &t.data.valid.labels);
        assert_eq!(ex.valid_acc[(i, i)], acc);
    }
    let (per_seed, mean) = exchange_over_seeds(&t.backbone, &HeadSpec::linear(), &t.data, &taus, &hp(0), &ft(), &opts(), &[4, 5]).unwrap();
    assert_eq!(per_seed[0], ex);
    let avg = per_seed[0].valid_acc.add(&per_seed[1].valid_acc).scale(0.5);
    assert!(mean.valid_acc.max_abs_diff(&avg) < 1e-15);
}

#[test]
fn label_smoothing_reserves_energy_after_convergence() {
    let pre = small_pretrain();
    let t = toy();
    let data = gen_downstream(&pre, &downstream(0.1), 3).unwrap();
    let hp_c = StageConfig::new(Stage::Hp, 3000, 0.1, LossKind::CrossEntropy).with_momentum(0.9);
    let o = RunOptions {
        hp_convergence: Some(ConvergenceRule {
            window: 10,
            acc_tol: 0.001,
            loss_rel_tol: Some(1e-5),
        }),
        ..opts()
    };
    let rep = ls_hp_study(&t.backbone, &data, 0.9, 0.9, &HeadSpec::linear(), &hp_c, &ft(), &o, &[0, 1]).unwrap();
    let row = rep.row(&ls_condition(0.9, 1.0)).unwrap();
    let target = reserved_energy(0.9, 3);
    assert!((target - 0.1 * 6f64.sqrt() / 3.0).abs() < 1e-15);
    assert!((row.agg.residual_hp_energy.mean - target).abs() <= 0.1 * target, "{:?}", row.runs);
    // without smoothing the HP head fits the one-hot targets
    let plain = rep.row(&ls_condition(1.0, 1.0)).unwrap();
    assert!(plain.agg.residual_hp_energy.mean < row.agg.residual_hp_energy.mean);
    assert_eq!(rep.rows.len(), 4);
}

#[test]
fn checkpoint_round_trip_and_architecture_guard() {
    let t = toy();
    let net = HeadSpec::linear().build(&t.backbone, 3, &mut RngState::new(0)).unwrap();
    let json = Checkpoint::new(&net).to_json().unwrap();
    let back = Checkpoint::from_json(&json).unwrap().into_network_checked(&net.architecture()).unwrap();
    assert_eq!(back, net);
    assert_eq!(back.backbone_hash(), net.backbone_hash());
    let other = HeadSpec::mlp2(4).build(&t.backbone, 3, &mut RngState::new(0)).unwrap();
    assert!(Checkpoint::from_json(&json).unwrap().into_network_checked(&other.architecture()).is_err());
    assert!(Checkpoint::from_json(&json.replace("hpft-checkpoint", "other")).is_err());
}

#[test]
fn decomposition_is_exact_for_the_linear_backbone() {
    let mut rng = RngState::new(8);
    let b = Matrix::from_vec(4, 6, (0..24).map(|_| rng.normal()).collect());
    let v: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
    let net = Network::linear_two_layer(b, v);
    let x = Matrix::from_vec(5, 6, (0..30).map(|_| rng.normal()).collect());
    let t = Matrix::from_vec(5, 1, (0..5).map(|_| rng.normal()).collect());
    let dec = decompose_step(&net, &x, &t, LossKind::Mse, 0.05, &[0, 2, 4]).unwrap();
    assert!(dec.max_residual_backbone() <= 1e-10);
    // features never see the head update
    assert_eq!(dec.residual_joint, dec.residual_backbone);
    for j in 0..3 {
        assert_eq!(dec.recompose(j), dec.predicted[j]);
    }
}

#[test]
fn mlp_joint_residual_is_second_order() {
    let mut rng = RngState::new(10);
    let backbone = MlpBackbone::new(5, &[8, 8, 8, 8], true, &mut rng);
    let head = Head::new(HeadKind::Linear, 8, 0, 3, &mut rng);
    let net = Network::new(backbone, head);
    let x = Matrix::from_vec(12, 5, (0..60).map(|_| rng.normal()).collect());
    let t = hpft::datagen::smooth_labels(
        &Matrix::from_rows(&(0..12).map(|i| {
            let mut r = vec![0.0; 3];
            r[i % 3] = 1.0;
            r
        }).collect::<Vec<_>>()),
        1.0,
    );
    let r1 = decompose_step(&net, &x, &t, LossKind::CrossEntropy, 0.1, &[0, 5]).unwrap().max_residual_joint();
    let r2 = decompose_step(&net, &x, &t, LossKind::CrossEntropy, 0.05, &[0, 5]).unwrap().max_residual_joint();
    assert!(r2 <= 0.35 * r1, "{r1} -> {r2}");
}
