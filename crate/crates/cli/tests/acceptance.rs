//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line.
//!
//! Exact and contract criteria assert. Convergence-bound and empirical
//! criteria (2, 3, 5, 6, 7) report
//! their verdict without panicking unless `SRTC_ACCEPTANCE_STRICT=1`, so the
//! measured outcome is visible in every run.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use srtc::autodiff::{Activation, Bindings, Graph};
use srtc::data::{
    generate_environment, normalize_rss, sample_fingerprints, EnvironmentConfig, FingerprintDataset, RssNormalization,
};
use srtc::distill::{ablate, distill, ConstraintMask, DistillConfig};
use srtc::eval::{compare, evaluate, report_from_errors, EvalReport, DEFAULT_PROBES};
use srtc::expert::{train_expert, ExpertConfig, TeacherBundle};
use srtc::lipschitz::{
    feature_normalize, power_iteration, power_iteration_matrix, transmitting_matrix_with, TransmitOptions, VERIFY_ITERS,
};
use srtc::losses::{
    gradient_penalty, gradient_penalty_node, j_mae, j_mi_term, j_overall, j_sim, LossTerms, LossWeights,
};
use srtc::nn::{build_critic, build_mi_estimator, Critic, Leaf, Mlp, ModelDims, Module};
use srtc::rng::{normal_tensor, seeded, uniform_tensor};
use srtc::Tensor;
use srtc_cli::checkpoint::read_manifest;
use srtc_cli::config::RunConfig;
use srtc_cli::metrics::MetricsWriter;
use srtc_cli::pipeline::{distill_phase, run_pipeline, write_csv};

fn strict() -> bool {
    std::env::var("SRTC_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1")
}

/// Writes straight to the process stdout so the line survives test capture.
fn verdict(n: u32, pass: bool, detail: &str) {
    let word = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{word} criterion {n}: {detail}");
    let _ = out.flush();
}

fn exact(n: u32, pass: bool, detail: &str) {
    verdict(n, pass, detail);
    assert!(pass, "criterion {n} failed: {detail}");
}

fn empirical(n: u32, pass: bool, detail: &str) {
    verdict(n, pass, detail);
    if strict() {
        assert!(pass, "criterion {n} failed: {detail}");
    }
}

fn to_na(t: &Tensor<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

// Criterion 1

fn mlp_loss(mlp: &Mlp<f64>, x: &Tensor<f64>, target: &Tensor<f64>) -> f64 {
    let out = mlp.forward(x).unwrap();
    out.sub(target).data().iter().map(|v| v * v).sum::<f64>() / out.len() as f64
}

fn mlp_gradient_error(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let depth = rng.random_range(1..=3);
    let widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=32)).collect();
    let acts: Vec<Activation> = (0..depth)
        .map(|_| [Activation::Identity, Activation::Relu, Activation::Tanh][rng.random_range(0..3)])
        .collect();
    let mut mlp = Mlp::<f64>::new("m", &widths, &acts, &mut rng).unwrap();
    // Zero biases can park a pre-activation exactly on a ReLU kink.
    for (name, t) in mlp.params_mut() {
        if name.ends_with("bias") {
            let noise = normal_tensor::<f64>(&mut rng, 1, t.len(), 0.1);
            t.data_mut().copy_from_slice(noise.data());
        }
    }
    let batch = rng.random_range(1..=6);
    let x = normal_tensor::<f64>(&mut rng, batch, widths[0], 1.0);
    let target = normal_tensor::<f64>(&mut rng, batch, widths[depth], 1.0);

    let mut g = Graph::new();
    let xn = g.input("x", batch, widths[0]);
    let tn = g.input("target", batch, widths[depth]);
    let out = mlp.graph_forward(&mut g, xn, Leaf::Trainable).unwrap();
    let diff = g.sub(out, tn).unwrap();
    let sq = g.square(diff).unwrap();
    let loss = g.mean(sq).unwrap();
    let mut b = Bindings::new();
    mlp.bind(&mut b);
    b.bind("x", &x).bind("target", &target);
    g.forward(&b).unwrap();
    let grads = g.backward(loss).unwrap();

    let h = 1e-6;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let names: Vec<String> = mlp.params().iter().map(|(n, _)| n.to_string()).collect();
    for (k, name) in names.iter().enumerate() {
        let grad = grads.get(name).expect("every parameter gets a gradient");
        for i in 0..grad.len() {
            let eval = |delta: f64| {
                let mut m = mlp.clone();
                m.params_mut()[k].1.data_mut()[i] += delta;
                mlp_loss(&m, &x, &target)
            };
            analytic.push(grad.data()[i]);
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
        }
    }
    rel_err(&analytic, &numeric)
}

fn gp_gradient_error(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let d = rng.random_range(2..=8);
    let h_width = rng.random_range(2..=12);
    let batch = rng.random_range(2..=6);
    let critic: Critic<f64> = build_critic(d, h_width, seed).unwrap();
    let real = normal_tensor::<f64>(&mut rng, batch, d, 1.0);
    let fake = normal_tensor::<f64>(&mut rng, batch, d, 1.0);
    let eps = uniform_tensor::<f64>(&mut rng, batch, 1, 0.0, 1.0);

    let mut g = Graph::new();
    let rn = g.input("real", batch, d);
    let fnode = g.input("fake", batch, d);
    let en = g.input("eps", batch, 1);
    let leaves = critic.net.leaves(&mut g, Leaf::Trainable);
    let gp = gradient_penalty_node(&mut g, &leaves, rn, fnode, en).unwrap();
    let mut b = Bindings::new();
    critic.bind(&mut b);
    b.bind("real", &real).bind("fake", &fake).bind("eps", &eps);
    g.forward(&b).unwrap();
    let grads = g.backward(gp).unwrap();

    let h = 1e-6;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let names: Vec<String> = critic.params().iter().map(|(n, _)| n.to_string()).collect();
    for (k, name) in names.iter().enumerate() {
        let grad = grads.get(name).map(|t| t.data().to_vec());
        let len = critic.params()[k].1.len();
        for i in 0..len {
            let eval = |delta: f64| {
                let mut c = critic.clone();
                c.params_mut()[k].1.data_mut()[i] += delta;
                gradient_penalty(&c, &real, &fake, &eps).unwrap()
            };
            analytic.push(grad.as_ref().map_or(0.0, |v| v[i]));
            numeric.push((eval(h) - eval(-h)) / (2.0 * h));
        }
    }
    rel_err(&analytic, &numeric)
}

#[test]
fn criterion_01_gradient_correctness() {
    let mlp_worst = (0..120).map(mlp_gradient_error).fold(0.0, f64::max);
    let gp_worst = (0..20).map(|s| gp_gradient_error(1000 + s)).fold(0.0, f64::max);
    exact(
        1,
        mlp_worst <= 1e-4 && gp_worst <= 1e-3,
        &format!("120 random MLPs worst rel err {mlp_worst:.2e} (<= 1e-4); 20 GP double-backprop cases worst {gp_worst:.2e} (<= 1e-3)"),
    );
}

#[test]
fn criterion_02_power_iteration() {
    let mut rng = seeded(2);
    let mut worst: f64 = 0.0;
    let mut within = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=64);
        let b = normal_tensor::<f64>(&mut rng, n, n, 1.0);
        let a = b.matmul_nt(&b).unwrap();
        let oracle = SymmetricEigen::new(to_na(&a)).eigenvalues.max().sqrt();
        let est = power_iteration_matrix(&a, 100, &mut rng).unwrap().value;
        let err = (est - oracle).abs() / oracle;
        within += usize::from(err <= 1e-4);
        worst = worst.max(err);
    }
    empirical(
        2,
        worst <= 1e-4,
        &format!("{within}/100 random PSD matrices up to 64x64 within 1e-4 of the dense eigensolver, worst rel err {worst:.2e}"),
    );
}

#[test]
fn criterion_03_transmitting_matrix_fidelity() {
    let mut rng = seeded(3);
    let mut within = 0;
    for _ in 0..100 {
        let w = normal_tensor::<f64>(&mut rng, 8, 8, 1.0);
        let x = normal_tensor::<f64>(&mut rng, 512, 8, 1.0);
        let z_in = feature_normalize(&x).unwrap().z;
        let z_out = z_in.matmul_nt(&w).unwrap();
        let tm = transmitting_matrix_with(&z_in, &z_out, TransmitOptions::input_only()).unwrap();
        let est = power_iteration(&tm, VERIFY_ITERS, &mut rng).unwrap().value;
        let sigma = to_na(&w).singular_values().max();
        if (est - sigma).abs() <= 0.1 * sigma {
            within += 1;
        }
    }
    empirical(
        3,
        within >= 95,
        &format!("{within}/100 random 8->8 layers within 10% of SVD sigma_max (need >= 95)"),
    );
}

#[test]
fn criterion_04_loss_unit_values() {
    let z = normal_tensor::<f64>(&mut seeded(4), 16, 8, 1.0);
    let sim = j_sim(&z, &z, 0.2).unwrap();
    let sim_ok = (sim - (1.0 - 0.2f64.cos())).abs() <= 1e-9;

    let mut psi = build_mi_estimator::<f64>(8, 16, 4).unwrap();
    for (_, t) in psi.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let shifted = srtc::losses::cyclic_shift_pairing(&z).unwrap();
    let joint = psi.forward(&z, &z).unwrap();
    let product = psi.forward(&z, &shifted).unwrap();
    let mi = j_mi_term(&joint, &product).unwrap();
    let mi_ok = (mi + 2.0 * 2f64.ln()).abs() <= 1e-12;

    let overall = j_overall(
        &LossWeights::new(3.0, 0.5, 0.5, 0.5),
        &LossTerms::new(1.0, 0.0, 0.0, 0.0),
    )
    .unwrap();
    let overall_ok = (overall - 2.0 / 3.0).abs() <= 1e-12;
    exact(
        4,
        sim_ok && mi_ok && overall_ok,
        &format!("j_sim {sim:.12} (1-cos 0.2), j_mi_term {mi:.14} (-2 ln 2), j_overall {overall:.14} (2/3)"),
    );
}

// Shared toy data for criteria 5-7.

fn toy_data(env: &srtc::data::SyntheticEnvironment, m: usize, seed: u64) -> FingerprintDataset<f64> {
    normalize_rss(&sample_fingerprints(env, m, seed).unwrap(), RssNormalization::default()).unwrap()
}

fn environment(n_anchors: usize, seed: u64) -> srtc::data::SyntheticEnvironment {
    generate_environment(
        &EnvironmentConfig {
            n_anchors,
            ..Default::default()
        },
        seed,
    )
    .unwrap()
}

#[test]
fn criterion_05_expert_training() {
    let dims = ModelDims::default();
    let mut successes = 0;
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let env = environment(8, 100 + seed);
        let train = toy_data(&env, 512, 200 + seed);
        let test = toy_data(&env, 256, 300 + seed);
        let cfg = ExpertConfig {
            epochs: 200,
            seed,
            ..Default::default()
        };
        let init = train_expert(
            &train,
            "toy",
            &dims,
            &ExpertConfig {
                epochs: 0,
                ..cfg.clone()
            },
            |_| {},
        )
        .unwrap();
        let trained = train_expert(&train, "toy", &dims, &cfg, |_| {}).unwrap();
        let before = init.alignment(&test.x, &mut seeded(9)).unwrap();
        let after = trained.alignment(&test.x, &mut seeded(9)).unwrap();
        let gen_mae = trained.generator_mae(&test.y, &mut seeded(9)).unwrap();

        let m = train.len() as f64;
        let mean: Vec<f64> = (0..2)
            .map(|k| (0..train.len()).map(|i| train.y.get(i, k)).sum::<f64>() / m)
            .collect();
        let mean_pred = Tensor::from_vec(test.len(), 2, (0..test.len()).flat_map(|_| mean.clone()).collect());
        let baseline = j_mae(&test.y, &mean_pred).unwrap();
        let ok = after > before && gen_mae < baseline;
        successes += usize::from(ok);
        rows.push(format!(
            "seed {seed}: align {before:.3}->{after:.3}, gen MAE {gen_mae:.2} vs mean {baseline:.2}"
        ));
    }
    empirical(
        5,
        successes >= 4,
        &format!(
            "{successes}/5 seeds raise alignment and beat the mean-location baseline (need >= 4); {}",
            rows.join("; ")
        ),
    );
}

struct DistillSeed {
    teachers: Vec<TeacherBundle<f64>>,
    train: FingerprintDataset<f64>,
    test: FingerprintDataset<f64>,
    base_cfg: DistillConfig,
}

fn distill_setup(seed: u64, dims: &ModelDims) -> DistillSeed {
    let teachers = [8usize, 12]
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let i = i as u64;
            let env = environment(n, 1000 * seed + i);
            let src = toy_data(&env, 512, 1000 * seed + 10 + i);
            let cfg = ExpertConfig {
                epochs: 200,
                seed: 1000 * seed + 20 + i,
                ..Default::default()
            };
            train_expert(&src, &format!("source{i}"), dims, &cfg, |_| {}).unwrap()
        })
        .collect();
    let env = environment(8, 1000 * seed + 5);
    DistillSeed {
        teachers,
        train: toy_data(&env, 256, 1000 * seed + 30),
        test: toy_data(&env, 512, 1000 * seed + 31),
        base_cfg: DistillConfig {
            epochs: 200,
            seed,
            constraints: ConstraintMask::NONE,
            ..Default::default()
        },
    }
}

fn distilled_report(s: &DistillSeed, dims: &ModelDims, mask: ConstraintMask) -> EvalReport {
    let cfg = DistillConfig {
        constraints: mask,
        ..s.base_cfg.clone()
    };
    let out = distill(&s.train, &s.teachers, dims, &cfg, |_| {}).unwrap();
    evaluate(&out.specialized, &s.test).unwrap()
}

#[test]
fn criteria_06_07_distilling_and_ablation() {
    let dims = ModelDims::default();
    let mut base = Vec::new();
    let mut enhanced = Vec::new();
    let mut ablation: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let grid = ConstraintMask::ablation_grid();
    for seed in 0..5u64 {
        let s = distill_setup(seed, &dims);
        base.push(distilled_report(&s, &dims, ConstraintMask::NONE).mae_m);
        enhanced.push(distilled_report(&s, &dims, ConstraintMask::ALL).mae_m);
        if seed < 3 {
            let rows = ablate(&s.train, &s.test, &s.teachers, &dims, &s.base_cfg, &grid).unwrap();
            assert_eq!(rows.len(), 6);
            for (k, row) in rows.iter().enumerate() {
                ablation.entry(k).or_default().push(row.report.mae_m);
            }
        }
    }
    let wins = base.iter().zip(&enhanced).filter(|(b, e)| e <= b).count();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mb, me) = (mean(&base), mean(&enhanced));
    let pairs: Vec<String> = base
        .iter()
        .zip(&enhanced)
        .map(|(b, e)| format!("{b:.3}/{e:.3}"))
        .collect();
    empirical(
        6,
        wins >= 3 && me < mb,
        &format!(
            "enhanced <= baseline in {wins}/5 seeds (need >= 3), mean MAE {me:.3} vs {mb:.3} (need strictly lower); baseline/enhanced {}",
            pairs.join(", ")
        ),
    );

    let means: Vec<f64> = (0..6).map(|k| mean(&ablation[&k])).collect();
    let all = means[5];
    let worst_other = means[..5].iter().cloned().fold(f64::MIN, f64::max);
    let table: Vec<String> = grid.iter().zip(&means).map(|(m, v)| format!("{m} {v:.3}")).collect();
    empirical(
        7,
        all < worst_other,
        &format!(
            "6-mask grid over 3 seeds completed; all-constraints mean {all:.3}, worst other {worst_other:.3}; {}",
            table.join(", ")
        ),
    );
}

// Criteria 8 and 9 run through the command-line layer.

fn tiny_config(dir: &Path, sources: &str) -> PathBuf {
    let text = format!(
        r#"seed = 11

[model]
hidden = 24
d_repr = 12
d_noise = 12

[data.target]
name = "target"
samples = 192

{sources}

[expert]
epochs = 15
batch_size = 64

[distill]
epochs = 15
batch_size = 64
"#
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn run_cli(args: &[&str]) -> i32 {
    let mut argv = vec!["srtc"];
    argv.extend_from_slice(args);
    srtc_cli::run(argv)
}

fn only_subdir(dir: &Path) -> PathBuf {
    let dirs: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(dirs.len(), 1, "expected one run directory in {}", dir.display());
    dirs.into_iter().next().unwrap()
}

#[test]
fn criterion_08_frozen_teachers_and_no_source_access() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    for (name, n, seed) in [("a", 6usize, 1u64), ("b", 9, 2)] {
        let data = sample_fingerprints::<f64>(&environment(n, seed), 192, seed + 10).unwrap();
        write_csv(&data, &root.join(format!("{name}.csv"))).unwrap();
    }
    let target = sample_fingerprints::<f64>(&environment(7, 3), 128, 13).unwrap();
    write_csv(&target, &root.join("target-train.csv")).unwrap();
    let cfg = tiny_config(
        root,
        "[[data.sources]]\nname = \"a\"\ncsv = \"a.csv\"\n\n[[data.sources]]\nname = \"b\"\ncsv = \"b.csv\"",
    );
    let cfg_s = cfg.to_str().unwrap();

    let teachers_out = root.join("teachers-run");
    assert_eq!(
        run_cli(&[
            "train-experts",
            "--config",
            cfg_s,
            "--out",
            teachers_out.to_str().unwrap()
        ]),
        0
    );
    let teacher_dir = only_subdir(&teachers_out).join("teachers");
    let teachers = [teacher_dir.join("a.srtc"), teacher_dir.join("b.srtc")];
    let before: Vec<Vec<u8>> = teachers.iter().map(|p| fs::read(p).unwrap()).collect();

    // Source data is gone before distilling starts.
    fs::remove_file(root.join("a.csv")).unwrap();
    fs::remove_file(root.join("b.csv")).unwrap();
    let distill_out = root.join("distill-run");
    let code = run_cli(&[
        "distill",
        "--config",
        cfg_s,
        "--out",
        distill_out.to_str().unwrap(),
        "--teachers",
        teachers[0].to_str().unwrap(),
        teachers[1].to_str().unwrap(),
        "--data",
        root.join("target-train.csv").to_str().unwrap(),
    ]);
    let after: Vec<Vec<u8>> = teachers.iter().map(|p| fs::read(p).unwrap()).collect();
    let model = only_subdir(&distill_out).join("models/distilled.srtc");
    let bytes = fs::read(&model).unwrap();
    let (manifest, _) = read_manifest(&bytes).unwrap();

    // The library entry point takes only checkpoint paths and target data.
    let rc = RunConfig::from_path(&cfg).unwrap();
    let target_train = normalize_rss(&target, RssNormalization::default()).unwrap();
    let mut w = MetricsWriter::create(&root.join("audit.jsonl")).unwrap();
    let net = distill_phase(
        &teachers,
        &target_train,
        &rc.model,
        &rc.distill_config(),
        &mut w,
        "audit",
    )
    .unwrap();
    let pass = code == 0 && before == after && manifest.source.is_none() && net.n_anchors() == 7;
    exact(
        8,
        pass,
        &format!(
            "distill exit {code} with source CSVs deleted; teacher checkpoints bitwise unchanged: {}; model manifest carries no source: {}",
            before == after,
            manifest.source.is_none()
        ),
    );
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_09_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(
        tmp.path(),
        "[[data.sources]]\nname = \"a\"\nsamples = 192\n\n[[data.sources]]\nname = \"b\"\nsamples = 192\n[data.sources.environment]\nn_anchors = 10",
    );
    let cfg = RunConfig::from_path(&cfg_path).unwrap();
    let out = tmp.path().join("runs");
    let first = run_pipeline(&cfg, &out).unwrap();
    let second = run_pipeline(&cfg, &out).unwrap();
    assert_ne!(first.run.root, second.run.root);
    let a = tree(&first.run.root);
    let b = tree(&second.run.root);
    let metrics = a.keys().filter(|k| k.starts_with("metrics")).count();
    let checkpoints = a.keys().filter(|k| k.extension().is_some_and(|e| e == "srtc")).count();
    let pass = a == b && metrics == 4 && checkpoints == 3;
    exact(
        9,
        pass,
        &format!(
            "two pipeline runs: {} files compared ({metrics} metric streams, {checkpoints} checkpoints), identical: {}",
            a.len(),
            a == b
        ),
    );
}

#[test]
fn criterion_10_evaluation_oracle() {
    let mut rng = seeded(10);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let m = rng.random_range(1..=200);
        // Quantized values force ties.
        let errors: Vec<f64> = (0..m)
            .map(|_| (rng.random_range(0.0..30.0f64) * 4.0).round() / 4.0)
            .collect();
        let r = report_from_errors(&errors, &DEFAULT_PROBES).unwrap();

        let mut sorted = errors.clone();
        for i in 0..sorted.len() {
            for j in 0..sorted.len() - 1 - i {
                if sorted[j] > sorted[j + 1] {
                    sorted.swap(j, j + 1);
                }
            }
        }
        let rank = |p: f64| sorted[((p / 100.0 * m as f64).ceil() as usize).max(1) - 1];
        let mut cdf = Vec::new();
        for &e in &sorted {
            if cdf.last().is_some_and(|(x, _): &(f64, f64)| *x == e) {
                continue;
            }
            cdf.push((e, errors.iter().filter(|&&v| v <= e).count() as f64 / m as f64));
        }
        let probes: Vec<(f64, f64)> = DEFAULT_PROBES
            .iter()
            .map(|&r| (r, errors.iter().filter(|&&v| v < r).count() as f64 / m as f64))
            .collect();
        let mae = errors.iter().sum::<f64>() / m as f64;
        let ok = r.p75_m == rank(75.0)
            && r.p95_m == rank(95.0)
            && r.cdf == cdf
            && r.threshold_probes == probes
            && (r.mae_m - mae).abs() <= 1e-12 * mae.max(1.0);
        mismatches += usize::from(!ok);
    }
    let pct = |b: f64, e: f64| {
        let rep = |v: f64| report_from_errors(&[v], &[]).unwrap();
        compare(&rep(b), &rep(e)).unwrap().mae_pct
    };
    let table = pct(14.04, 11.98);
    exact(
        10,
        mismatches == 0 && (table - 14.67).abs() <= 0.01,
        &format!(
            "{mismatches}/1000 random error sets disagree with the sort oracle; compare(14.04, 11.98) = {table:+.2}%"
        ),
    );
}
