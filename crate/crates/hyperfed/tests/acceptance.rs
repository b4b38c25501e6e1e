//! Acceptance gate: one test per criterion, each printing a PASS/FAIL
//! line. Statistical criteria run on the bundled reference benchmark
//! (configs/reference.toml).

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use hyperfed::calibration::{client_stats, head_mse, oracle_finetune, server_solve};
use hyperfed::config::{HeadConfig, RunConfig};
use hyperfed::data::{make_synthetic, partition_dirichlet, Concentration, Dataset, Partition};
use hyperfed::fed::{self, CalibrationPlan, FedConfig, LocalOutcome, ServerState, Strategy};
use hyperfed::metrics::{accuracy, cost_classifier_comm, cost_ffc_flops, CommPath};
use hyperfed::model::{
    backward, forward, trace_loss, ClassifierHead, LossKind, MlpExtractor, ModelParams, Schedule,
};
use hyperfed::numerics::{matmul, orthonormal_rows, solve_spd, Matrix, Rng};

fn verdict(criterion: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{criterion} failed: {detail}");
}

fn reference_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml");
    RunConfig::load(&path).expect("reference config must load")
}

/// Reference-benchmark workload materialized for direct engine calls.
struct Workload {
    train: Dataset,
    eval: Dataset,
    partition: Partition,
    model: ModelParams,
    fed: FedConfig,
}

fn build_workload(mutate: impl FnOnce(&mut RunConfig)) -> Workload {
    let mut cfg = reference_config();
    mutate(&mut cfg);
    cfg.validate().expect("mutated reference config valid");
    let (train, eval) = cfg.build_datasets().unwrap();
    let partition = cfg.build_partition(&train).unwrap();
    let model = cfg.build_model(train.dim(), train.num_classes).unwrap();
    let fed = cfg.to_fed_config();
    Workload {
        train,
        eval,
        partition,
        model,
        fed,
    }
}

/// Trainable-head CE FedAvg baseline (the paper's standard-recipe foil),
/// cached across criteria since several of them share these runs.
fn baseline_run(alpha: Option<f64>, seed: u64) -> &'static (Workload, fed::RunOutcome) {
    static CACHE: OnceLock<Mutex<HashMap<(u64, u64), &'static (Workload, fed::RunOutcome)>>> =
        OnceLock::new();
    let key = (alpha.map_or(u64::MAX, f64::to_bits), seed);
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(hit) = cache.lock().unwrap().get(&key) {
        return hit;
    }
    let w = build_workload(|cfg| {
        cfg.seed = seed;
        cfg.model.head = HeadConfig::Trainable;
        cfg.training.loss = LossKind::Ce;
        cfg.training.lr = 0.1;
        cfg.calibration.plan = hyperfed::config::PlanName::Off;
        cfg.partition.alpha = match alpha {
            Some(a) => hyperfed::config::AlphaSpec::Value(a),
            None => hyperfed::config::AlphaSpec::Named(hyperfed::config::IidTag::Iid),
        };
    });
    let out = fed::run(&w.fed, &w.model, &w.train, &w.partition, &w.eval).unwrap();
    let leaked: &'static (Workload, fed::RunOutcome) = Box::leak(Box::new((w, out)));
    cache.lock().unwrap().insert(key, leaked);
    leaked
}

fn sphere_run(seed: u64) -> (Workload, fed::RunOutcome) {
    let w = build_workload(|cfg| cfg.seed = seed);
    let out = fed::run(&w.fed, &w.model, &w.train, &w.partition, &w.eval).unwrap();
    (w, out)
}

#[test]
fn criterion_01_calibration_distributed_equals_centralized() {
    let start = Instant::now();
    let mut rng = Rng::new(0xACC1);
    let mut worst = 0.0f64;
    for instance in 0..20 {
        use rand::Rng as _;
        let c = rng.gen_range(3..=10usize);
        let l = rng.gen_range(c.max(4)..=32usize);
        let per_class = rng.gen_range(5..=(500 / c));
        let k = [1usize, 3, 10][instance % 3];
        let lambda = [0.0, 1e-3, 1e-1][instance % 3];
        let mut data_rng = rng.derive(instance as u64);
        let ds = make_synthetic(c, l.max(c) + 2, per_class, 1.0, &mut data_rng).unwrap();
        let model = MlpExtractor::new(&[ds.dim(), l], &mut data_rng.derive(7)).unwrap();
        // Distributed path: per-client sufficient statistics.
        let parts: Vec<Vec<usize>> = {
            let mut v = vec![Vec::new(); k];
            for i in 0..ds.len() {
                v[i % k].push(i);
            }
            v
        };
        let stats: Vec<_> = parts
            .iter()
            .map(|p| client_stats(&model, &ds, p).unwrap())
            .collect();
        let dist = server_solve(&stats, lambda).unwrap();
        // Centralized oracle: materialize Z and Y, form the normal
        // equations with plain matrix products.
        let mut z = Matrix::zeros(ds.len(), l);
        let mut y = Matrix::zeros(ds.len(), c);
        for i in 0..ds.len() {
            let f = hyperfed::model::normalized_feature(&model, ds.features.row(i)).unwrap();
            for (j, &v) in f.iter().enumerate() {
                z.set(i, j, v);
            }
            y.set(i, ds.labels[i], 1.0);
        }
        let zt = z.transpose();
        let mut a = matmul(&zt, &z).unwrap();
        for i in 0..l {
            a.set(i, i, a.get(i, i) + lambda);
        }
        let b = matmul(&zt, &y).unwrap();
        let oracle = solve_spd(&a, &b).unwrap().x.transpose();
        for i in 0..c {
            for j in 0..l {
                worst = worst.max((dist.weights.get(i, j) - oracle.get(i, j)).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "1 distributed-calibration exactness",
        worst < 1e-10 && elapsed.as_secs() < 10,
        &format!("max |diff| = {worst:.3e} over 20 instances in {elapsed:.2?}"),
    );
}

#[test]
fn criterion_02_calibration_matches_sgd_oracle_on_reference() {
    let start = Instant::now();
    let (w, out) = sphere_run(1);
    let model = &out.model;
    let all: Vec<usize> = (0..w.train.len()).collect();
    let stats = client_stats(&model.extractor, &w.train, &all).unwrap();
    // The loss comparison is at lambda = 0 (ridge trades loss for norm).
    let closed = server_solve(std::slice::from_ref(&stats), 0.0).unwrap();
    let mut ft_rng = Rng::new(99);
    let sgd = oracle_finetune(
        &model.extractor,
        &w.train,
        &model.head.weights,
        400,
        0.5,
        64,
        &mut ft_rng,
    )
    .unwrap();
    let loss_closed = head_mse(&model.extractor, &closed.weights, &w.train).unwrap();
    let loss_sgd = head_mse(&model.extractor, &sgd, &w.train).unwrap();
    let acc_closed = accuracy(
        &model.extractor,
        &closed.clone().into_head(model.head.temperature),
        &w.eval,
    )
    .unwrap();
    let sgd_head = ClassifierHead {
        weights: sgd,
        fixed: true,
        normalize_features: true,
        temperature: model.head.temperature,
    };
    let acc_sgd = accuracy(&model.extractor, &sgd_head, &w.eval).unwrap();
    let acc_gap = (acc_closed - acc_sgd).abs();
    let elapsed = start.elapsed();
    verdict(
        "2 closed-form vs SGD-oracle head",
        acc_gap <= 0.005 && loss_closed <= loss_sgd + 1e-9 && elapsed.as_secs() < 120,
        &format!(
            "acc {acc_closed:.4} vs {acc_sgd:.4} (gap {acc_gap:.4}), \
             loss {loss_closed:.6e} vs {loss_sgd:.6e}, {elapsed:.2?}"
        ),
    );
}

#[test]
fn criterion_03_cost_ledger_reproduces_published_figures() {
    let comm = cost_classifier_comm(CommPath::TrainableHead, 1280, 100, 10, 100, 4);
    let ffc = cost_classifier_comm(CommPath::FfcPayload, 1280, 100, 10, 100, 4);
    let flops = cost_ffc_flops(1280, 100, &[5000; 10]);
    let mb = |b: u64| b as f64 / 1e6;
    let rel = |x: f64, target: f64| (x - target).abs() / target;
    let e1 = rel(mb(comm.per_client_bytes), 102.4);
    let e2 = rel(mb(ffc.per_client_bytes), 7.07);
    let e3 = rel(flops.client_flops as f64, 1.766e11);
    verdict(
        "3 published cost figures",
        e1 == 0.0 && e2 < 0.005 && e3 < 0.005,
        &format!(
            "{:.1} MB (err {e1:.2e}), {:.4} MB (err {e2:.2e}), {:.4e} FLOPs (err {e3:.2e})",
            mb(comm.per_client_bytes),
            mb(ffc.per_client_bytes),
            flops.client_flops as f64
        ),
    );
}

#[test]
fn criterion_04_orthonormal_head_construction_and_stability() {
    // Construction at full scale.
    let mut rng = Rng::new(41);
    let w = orthonormal_rows(100, 1280, &mut rng).unwrap();
    let gram = matmul(&w, &w.transpose()).unwrap();
    let mut max_dev = 0.0f64;
    for i in 0..100 {
        for j in 0..100 {
            let target = if i == j { 1.0 } else { 0.0 };
            max_dev = max_dev.max((gram.get(i, j) - target).abs());
        }
    }
    // Bit-identity through 40 federated rounds with that exact head.
    let mut data_rng = Rng::new(42);
    let train = make_synthetic(100, 100, 2, 1.0, &mut data_rng).unwrap();
    let eval = make_synthetic(100, 100, 1, 1.0, &mut data_rng.derive(3)).unwrap();
    let extractor = MlpExtractor::new(&[100, 1280], &mut data_rng.derive(5)).unwrap();
    let head = ClassifierHead {
        weights: w.clone(),
        fixed: true,
        normalize_features: true,
        temperature: 1.0,
    };
    let model = ModelParams { extractor, head };
    let partition =
        partition_dirichlet(&train, 2, Concentration::Iid, &mut data_rng.derive(9)).unwrap();
    let cfg = FedConfig {
        rounds: 40,
        local_epochs: 1,
        batch: 32,
        base_lr: 0.1,
        momentum: 0.0,
        weight_decay: 0.0,
        schedule: Schedule::Cosine,
        loss: LossKind::Mse,
        strategy: Strategy::FedAvg,
        participation: 1.0,
        seed: 4,
        calibration: CalibrationPlan::Off,
        lambda: 0.0,
    };
    let out = fed::run(&cfg, &model, &train, &partition, &eval).unwrap();
    let identical = out
        .model
        .head
        .weights
        .data()
        .iter()
        .zip(w.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    verdict(
        "4 hypersphere construction and stability",
        max_dev < 1e-10 && identical,
        &format!("max |WW^T - I| = {max_dev:.3e}, head bit-identical after 40 rounds: {identical}"),
    );
}

#[test]
fn criterion_05_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut rng = Rng::new(51);
    let mut worst_rel = 0.0f64;
    for &loss in &[LossKind::Mse, LossKind::Ce] {
        for &normalize in &[true, false] {
            for &fixed in &[true, false] {
                let model = MlpExtractor::new(&[6, 8, 5], &mut rng).unwrap();
                let mut head = if fixed {
                    ClassifierHead::orthonormal(4, 5, &mut rng).unwrap()
                } else {
                    ClassifierHead::trainable(4, 5, &mut rng).unwrap()
                };
                head.normalize_features = normalize;
                head.temperature = 1.3;
                let params = ModelParams {
                    extractor: model,
                    head,
                };
                let x = hyperfed::model::gaussian_vec(6, &mut rng);
                let y = 2usize;
                let trace = forward(&params.extractor, &params.head, &x).unwrap();
                let grads = backward(&params.extractor, &params.head, &trace, y, loss);
                let flat_g = params.flatten_grads(&grads);
                let flat_p = params.flatten();
                let h = 1e-5;
                for idx in 0..flat_p.len() {
                    let eval_at = |delta: f64| -> f64 {
                        let mut p = params.clone();
                        let mut fp = flat_p.clone();
                        fp[idx] += delta;
                        p.unflatten(&fp).unwrap();
                        let t = forward(&p.extractor, &p.head, &x).unwrap();
                        trace_loss(&t, y, loss)
                    };
                    let fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
                    let denom = fd.abs().max(flat_g[idx].abs()).max(1e-4);
                    worst_rel = worst_rel.max((fd - flat_g[idx]).abs() / denom);
                }
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "5 finite-difference gradient suite",
        worst_rel < 1e-6 && elapsed.as_secs() < 30,
        &format!("worst relative error {worst_rel:.3e} in {elapsed:.2?}"),
    );
}

#[test]
fn criterion_06_strategy_reductions() {
    // A 3-round micro-run shared by all three reductions.
    let mut rng = Rng::new(61);
    let train = make_synthetic(4, 10, 24, 1.0, &mut rng).unwrap();
    let _eval = make_synthetic(4, 10, 6, 1.0, &mut rng.derive(1)).unwrap();
    let extractor = MlpExtractor::new(&[10, 8, 6], &mut rng).unwrap();
    let head = ClassifierHead::orthonormal(4, 6, &mut rng).unwrap();
    let model = ModelParams { extractor, head };
    // Equal client sizes so FedNova's equal-tau reduction applies.
    let assignments: Vec<Vec<usize>> = (0..3).map(|k| (k * 32..(k + 1) * 32).collect()).collect();
    let partition = Partition {
        assignments,
        concentration: Concentration::Iid,
    };
    let base = FedConfig {
        rounds: 3,
        local_epochs: 2,
        batch: 8,
        base_lr: 0.2,
        momentum: 0.5,
        weight_decay: 0.0,
        schedule: Schedule::MultiStep {
            milestones: vec![],
            gamma: 1.0,
        },
        loss: LossKind::Mse,
        strategy: Strategy::FedAvg,
        participation: 1.0,
        seed: 6,
        calibration: CalibrationPlan::Off,
        lambda: 0.0,
    };
    let trajectory = |strategy: Strategy| -> Vec<Vec<f64>> {
        // Per-round global parameters, replayed with explicit engine calls
        // so the whole trajectory is visible, not just the endpoint.
        let mut cfg = base.clone();
        cfg.strategy = strategy;
        let mut global = model.clone();
        let mut state = ServerState::default();
        let mut traj = Vec::new();
        for round in 1..=cfg.rounds {
            let lr = hyperfed::model::lr_schedule(&cfg.schedule, round - 1, cfg.rounds, cfg.base_lr);
            let outs: Vec<LocalOutcome> = (0..3)
                .map(|id| {
                    fed::local_train(
                        &global,
                        &train,
                        &partition.assignments[id],
                        &cfg,
                        lr,
                        round,
                        id,
                    )
                    .unwrap()
                })
                .collect();
            let refs: Vec<&LocalOutcome> = outs.iter().collect();
            fed::aggregate(&mut global, &refs, &cfg.strategy, cfg.momentum, &mut state).unwrap();
            traj.push(global.flatten());
        }
        traj
    };
    let avg = trajectory(Strategy::FedAvg);
    let prox = trajectory(Strategy::FedProx { mu: 0.0 });
    let opt = trajectory(Strategy::FedOpt {
        server_lr: 1.0,
        server_momentum: 0.0,
    });
    let nova = trajectory(Strategy::FedNova);
    let max_diff = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        a.iter()
            .zip(b)
            .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
            .fold(0.0, f64::max)
    };
    let d_prox = max_diff(&avg, &prox);
    let d_opt = max_diff(&avg, &opt);
    let d_nova = max_diff(&avg, &nova);
    verdict(
        "6 strategy reductions",
        d_prox <= 1e-12 && d_opt <= 1e-12 && d_nova <= 1e-12,
        &format!("prox {d_prox:.2e}, opt {d_opt:.2e}, nova {d_nova:.2e}"),
    );
}

#[test]
fn criterion_07_alignment_trend_across_heterogeneity() {
    let start = Instant::now();
    let mut means = Vec::new();
    for &alpha in &[Some(0.1), Some(0.5), None] {
        let mut cos_sum = 0.0;
        let mut norm_sum = 0.0;
        for seed in 1..=5 {
            let (_, out) = baseline_run(alpha, seed);
            let mut cos = 0.0;
            let mut nd = 0.0;
            let mut n = 0;
            for r in &out.reports {
                if let Some(a) = &r.alignment {
                    cos += a.mean_cosine;
                    nd += a.mean_norm_diff;
                    n += 1;
                }
            }
            cos_sum += cos / n as f64;
            norm_sum += nd / n as f64;
        }
        means.push((cos_sum / 5.0, norm_sum / 5.0));
    }
    let cos_increasing = means[0].0 < means[1].0 && means[1].0 < means[2].0;
    let norm_decreasing = means[0].1 > means[1].1 && means[1].1 > means[2].1;
    let elapsed = start.elapsed();
    verdict(
        "7 classifier-disparity trend vs heterogeneity",
        cos_increasing && norm_decreasing && elapsed.as_secs() < 600,
        &format!(
            "cosine {:.6} < {:.6} < {:.6}; norm-diff {:.6} > {:.6} > {:.6}; {elapsed:.2?}",
            means[0].0, means[1].0, means[2].0, means[0].1, means[1].1, means[2].1
        ),
    );
}

#[test]
fn criterion_08_fixed_sphere_head_beats_trainable_baseline() {
    let mut wins = 0;
    let mut margin_sum = 0.0;
    let mut details = String::new();
    for seed in 1..=3 {
        let (_, sphere) = sphere_run(seed);
        let sphere_acc = sphere
            .calibrated
            .as_ref()
            .map(|(_, acc)| *acc)
            .unwrap_or(sphere.final_accuracy);
        let (_, base) = baseline_run(Some(0.1), seed);
        let base_acc = base.final_accuracy;
        if sphere_acc > base_acc {
            wins += 1;
        }
        margin_sum += sphere_acc - base_acc;
        details.push_str(&format!("seed {seed}: {sphere_acc:.4} vs {base_acc:.4}; "));
    }
    let mean_margin = margin_sum / 3.0;
    verdict(
        "8 calibrated fixed-head advantage at alpha=0.1",
        wins == 3 && mean_margin > 0.0,
        &format!("{details}mean margin {mean_margin:+.4}"),
    );
}

#[test]
fn criterion_09_reference_run_logs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("det");
    let mut cfg = reference_config();
    cfg.out_dir = out.clone();
    hyperfed::cli::execute_run(&cfg, true).unwrap();
    let first = std::fs::read(out.join("run.log.jsonl")).unwrap();
    hyperfed::cli::execute_run(&cfg, true).unwrap();
    let second = std::fs::read(out.join("run.log.jsonl")).unwrap();
    verdict(
        "9 run-log determinism",
        first == second && !first.is_empty(),
        &format!("{} bytes compared", first.len()),
    );
}

#[test]
fn criterion_10_ridge_grid_periodic_and_posthoc_calibration() {
    // (a) Lambda grid completes and reports its spread.
    let (w, out) = sphere_run(1);
    let stats: Vec<_> = w
        .partition
        .assignments
        .iter()
        .map(|idx| client_stats(&out.model.extractor, &w.train, idx).unwrap())
        .collect();
    let mut grid_accs = Vec::new();
    for lam in [1e-4, 1e-3, 1e-2, 1e-1] {
        let cal = server_solve(&stats, lam).unwrap();
        let head = cal.into_head(out.model.head.temperature);
        grid_accs.push(accuracy(&out.model.extractor, &head, &w.eval).unwrap());
    }
    let spread = grid_accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - grid_accs.iter().cloned().fold(f64::INFINITY, f64::min);
    let one_shot = out
        .calibrated
        .as_ref()
        .map(|(_, acc)| *acc)
        .expect("reference plan calibrates at the end");

    // (b) Multi-time calibration every 10 rounds lands within 1 point of
    // the one-shot result.
    let wp = build_workload(|cfg| {
        cfg.calibration.plan = hyperfed::config::PlanName::Every;
        cfg.calibration.interval = 10;
    });
    let periodic = fed::run(&wp.fed, &wp.model, &wp.train, &wp.partition, &wp.eval).unwrap();
    let periodic_acc = periodic.calibrated.as_ref().map(|(_, a)| *a).unwrap();
    let periodic_gap = (periodic_acc - one_shot).abs();

    // (c) Post-hoc calibration of CE-trained models helps, 3 seeds.
    let mut ce_improves = true;
    let mut ce_details = String::new();
    for seed in 1..=3 {
        let (bw, bout) = baseline_run(Some(0.1), seed);
        let before = bout.final_accuracy;
        let bstats: Vec<_> = bw
            .partition
            .assignments
            .iter()
            .map(|idx| client_stats(&bout.model.extractor, &bw.train, idx).unwrap())
            .collect();
        let cal = server_solve(&bstats, 1e-3).unwrap();
        let head = cal.into_head(bout.model.head.temperature);
        let after = accuracy(&bout.model.extractor, &head, &bw.eval).unwrap();
        ce_improves &= after > before;
        ce_details.push_str(&format!("seed {seed}: {before:.4}->{after:.4}; "));
    }
    verdict(
        "10 ridge grid, periodic, and post-hoc calibration",
        spread >= 0.0 && periodic_gap <= 0.01 && ce_improves,
        &format!(
            "grid spread {spread:.4}; periodic {periodic_acc:.4} vs one-shot {one_shot:.4} \
             (gap {periodic_gap:.4}); {ce_details}"
        ),
    );
}
