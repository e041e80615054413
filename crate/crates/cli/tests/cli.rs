use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"seed = 5
checkpoint_dtype = "f32"

[model]
hidden = 8
d_repr = 4
d_noise = 4

[data.target]
name = "target"
samples = 48

[[data.sources]]
name = "src"
samples = 48

[expert]
epochs = 2
batch_size = 16

[distill]
epochs = 2
batch_size = 16
"#;

fn srtc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srtc"))
        .args(args)
        .env("SRTC_LOG_LEVEL", "off")
        .output()
        .unwrap()
}

fn stdout_lines(out: &Output) -> Vec<PathBuf> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(PathBuf::from)
        .collect()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("c.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(srtc(&[]).status.code(), Some(2));
    assert_eq!(srtc(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(srtc(&["pipeline"]).status.code(), Some(2));
    assert_eq!(
        srtc(&["pipeline", "--config", "x.toml", "--bogus"]).status.code(),
        Some(2)
    );
    assert_eq!(srtc(&["distill", "--config", "x.toml"]).status.code(), Some(2));
    assert_eq!(srtc(&["--help"]).status.code(), Some(0));
}

#[test]
fn validation_failures_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let out = out.to_str().unwrap();

    let missing = srtc(&["gen-data", "--config", "/nonexistent/c.toml", "--out", out]);
    assert_eq!(missing.status.code(), Some(1));

    let cfg = write_config(tmp.path(), &format!("{CONFIG}\n[eval]\nradius = 3\n"));
    let unknown = srtc(&["gen-data", "--config", &cfg, "--out", out]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("radius"));

    let cfg = write_config(
        tmp.path(),
        &CONFIG.replace("batch_size = 16\n\n[distill]", "batch_size = 0\n\n[distill]"),
    );
    assert_eq!(
        srtc(&["train-experts", "--config", &cfg, "--out", out]).status.code(),
        Some(1)
    );
    assert!(!Path::new(out).exists(), "nothing is written before validation passes");
}

#[test]
fn gen_data_distill_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let runs = tmp.path().join("runs");
    let runs = runs.to_str().unwrap();

    let gen = srtc(&["gen-data", "--config", &cfg, "--out", runs]);
    assert_eq!(gen.status.code(), Some(0), "{}", String::from_utf8_lossy(&gen.stderr));
    let csvs = stdout_lines(&gen);
    let names: Vec<String> = csvs
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert!(names.contains(&"target-train.csv".to_owned()), "{names:?}");
    assert!(names.contains(&"target-test.csv".to_owned()), "{names:?}");
    let data_dir = csvs[0].parent().unwrap();
    let run_dir = data_dir.parent().unwrap();
    assert!(run_dir.join("config.toml").is_file());

    let train = srtc(&["train-experts", "--config", &cfg, "--out", runs]);
    assert_eq!(
        train.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&train.stderr)
    );
    let teacher = stdout_lines(&train).remove(0);
    assert_eq!(&fs::read(&teacher).unwrap()[..5], b"SRTC1");

    let distill = srtc(&[
        "distill",
        "--config",
        &cfg,
        "--out",
        runs,
        "--teachers",
        teacher.to_str().unwrap(),
        "--data",
        data_dir.join("target-train.csv").to_str().unwrap(),
    ]);
    assert_eq!(
        distill.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&distill.stderr)
    );
    let model = stdout_lines(&distill).remove(0);
    let metrics = model.parent().unwrap().parent().unwrap().join("metrics/distill.jsonl");
    let lines = fs::read_to_string(metrics).unwrap();
    assert_eq!(lines.lines().count(), 2);
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["phase"], "distill");
        assert!(v["j_mae"].is_number() && v["j_overall"].is_number());
        assert!(v["teacher0.j_sim"].is_number());
    }

    let eval = srtc(&[
        "evaluate",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data_dir.join("target-test.csv").to_str().unwrap(),
        "--out",
        runs,
    ]);
    assert_eq!(eval.status.code(), Some(0), "{}", String::from_utf8_lossy(&eval.stderr));
    let report_path = stdout_lines(&eval).remove(0);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["n_samples"], 24);
    assert!(report["mae_m"].as_f64().unwrap() > 0.0);
    assert_eq!(report["threshold_probes"].as_array().unwrap().len(), 4);
    let cdf = fs::read_to_string(report_path.with_file_name("report-cdf.csv")).unwrap();
    assert!(cdf.starts_with("error_m,cum_prob\n"));

    // A teacher is not a model, and a damaged file is rejected.
    let wrong = srtc(&[
        "evaluate",
        "--model",
        teacher.to_str().unwrap(),
        "--data",
        data_dir.join("target-test.csv").to_str().unwrap(),
        "--out",
        runs,
    ]);
    assert_eq!(wrong.status.code(), Some(1));
    let bytes = fs::read(&model).unwrap();
    let cut = tmp.path().join("cut.srtc");
    fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    let truncated = srtc(&[
        "evaluate",
        "--model",
        cut.to_str().unwrap(),
        "--data",
        data_dir.join("target-test.csv").to_str().unwrap(),
        "--out",
        runs,
    ]);
    assert_eq!(truncated.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&truncated.stderr).contains("truncated"));
}

#[test]
fn log_level_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CONFIG);
    let runs = tmp.path().join("runs");
    let run = |level: &str| {
        Command::new(env!("CARGO_BIN_EXE_srtc"))
            .args(["gen-data", "--config", &cfg, "--out", runs.to_str().unwrap()])
            .env("SRTC_LOG_LEVEL", level)
            .output()
            .unwrap()
    };
    assert!(run("off").stderr.is_empty());
    assert!(String::from_utf8_lossy(&run("info").stderr).contains("INFO"));
}
