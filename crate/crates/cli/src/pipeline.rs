//! Pipeline phases. Each phase reads and writes files under a run
//! directory so phases can also be run one at a time from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use serde::{Deserialize, Serialize};
use srtc::data::{
    generate_environment, load_csv, normalize_rss, sample_fingerprints, split, CsvSchema, FingerprintDataset,
    RssNormalization,
};
use srtc::distill::{distill, ConstraintMask, DistillConfig};
use srtc::eval::{compare, evaluate_with, Comparison, EvalReport};
use srtc::expert::{train_expert, TeacherBundle};
use srtc::nn::{ModelDims, SpecializedNetwork};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Artifact, Checkpoint};
use crate::config::{DatasetSpec, RunConfig};
use crate::error::{config_err, CliError, IoContext, Result};
use crate::metrics::{distill_record, expert_record, MetricsWriter};

/// `<out>/<digest prefix>-<UTC timestamp>` with one subdirectory per
/// artifact type.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(out: &Path, digest: &str) -> Result<Self> {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = format!("{}-{stamp}", &digest[..digest.len().min(12)]);
        let mut root = out.join(&base);
        let mut n = 1;
        while root.exists() {
            root = out.join(format!("{base}-{n}"));
            n += 1;
        }
        fs::create_dir_all(&root).at(&root)?;
        info!("run directory {}", root.display());
        Ok(Self { root })
    }

    fn sub(&self, name: &str) -> Result<PathBuf> {
        let dir = self.root.join(name);
        fs::create_dir_all(&dir).at(&dir)?;
        Ok(dir)
    }

    pub fn data(&self) -> Result<PathBuf> {
        self.sub("data")
    }

    pub fn teachers(&self) -> Result<PathBuf> {
        self.sub("teachers")
    }

    pub fn models(&self) -> Result<PathBuf> {
        self.sub("models")
    }

    pub fn metrics(&self) -> Result<PathBuf> {
        self.sub("metrics")
    }

    pub fn reports(&self) -> Result<PathBuf> {
        self.sub("reports")
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        let path = self.root.join("config.toml");
        fs::write(&path, cfg.canonical()?).at(path)
    }
}

pub fn save(ckpt: &Checkpoint, dtype: srtc::DType, path: &Path) -> Result<()> {
    save_checkpoint(ckpt, dtype, path).map_err(|source| CliError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).map_err(|source| CliError::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

/// Readings in dB, as generated or read from disk.
pub fn load_dataset(cfg: &RunConfig, spec: &DatasetSpec) -> Result<FingerprintDataset<f64>> {
    match &spec.csv {
        Some(path) => {
            let schema = spec.schema.clone().unwrap_or_default();
            Ok(load_csv(cfg.resolve(path), &schema)?)
        }
        None => {
            let env_cfg = spec.environment.clone().unwrap_or_default();
            let env = generate_environment(&env_cfg, cfg.environment_seed(&spec.name))?;
            let m = spec.samples.unwrap_or(crate::config::DEFAULT_SAMPLES);
            Ok(sample_fingerprints(&env, m, cfg.samples_seed(&spec.name))?)
        }
    }
}

/// Raw target data split into `(train, test)`.
pub fn target_split(cfg: &RunConfig) -> Result<(FingerprintDataset<f64>, FingerprintDataset<f64>)> {
    let raw = load_dataset(cfg, &cfg.data.target)?;
    Ok(split(&raw, cfg.data.train_fraction, cfg.split_seed())?)
}

/// Writes raw readings with the default schema's column names.
pub fn write_csv(data: &FingerprintDataset<f64>, path: &Path) -> Result<()> {
    let schema = CsvSchema::default();
    let prefix = match &schema.rss {
        srtc::data::RssColumns::Prefix(p) => p.clone(),
        srtc::data::RssColumns::Names(_) => unreachable!("default schema uses a prefix"),
    };
    let mut w = csv::Writer::from_path(path).map_err(srtc::Error::from)?;
    let mut header: Vec<String> = (1..=data.n_anchors()).map(|i| format!("{prefix}{i:03}")).collect();
    header.push(schema.x_column.clone());
    header.push(schema.y_column.clone());
    w.write_record(&header).map_err(srtc::Error::from)?;
    for i in 0..data.len() {
        let mut row: Vec<String> = data.x.row(i).iter().map(f64::to_string).collect();
        row.extend(data.y.row(i).iter().map(f64::to_string));
        w.write_record(&row).map_err(srtc::Error::from)?;
    }
    w.flush().at(path)
}

/// Writes every configured dataset plus the target's train/test split.
pub fn gen_data(cfg: &RunConfig, run: &RunDir) -> Result<Vec<PathBuf>> {
    let dir = run.data()?;
    let mut written = Vec::new();
    for spec in cfg.datasets() {
        let path = dir.join(format!("{}.csv", spec.name));
        write_csv(&load_dataset(cfg, spec)?, &path)?;
        written.push(path);
    }
    let (train, test) = target_split(cfg)?;
    for (part, data) in [("train", &train), ("test", &test)] {
        let path = dir.join(format!("{}-{part}.csv", cfg.data.target.name));
        write_csv(data, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Trains one expert per source, each on its own worker thread with its own
/// metrics file, and returns the teacher checkpoint paths in source order.
pub fn train_experts(cfg: &RunConfig, run: &RunDir) -> Result<Vec<PathBuf>> {
    let digest = cfg.digest()?;
    let teachers = run.teachers()?;
    let metrics = run.metrics()?;
    let dtype = cfg.checkpoint_dtype.into();
    let norm = cfg.data.normalization;
    std::thread::scope(|scope| {
        let workers: Vec<_> = cfg
            .data
            .sources
            .iter()
            .map(|spec| {
                let (digest, teachers, metrics) = (&digest, &teachers, &metrics);
                scope.spawn(move || -> Result<PathBuf> {
                    let data = normalize_rss(&load_dataset(cfg, spec)?, norm)?;
                    let expert_cfg = cfg.expert_config(spec);
                    info!("training expert `{}` on {} samples", spec.name, data.len());
                    let mut writer = MetricsWriter::create(&metrics.join(format!("expert-{}.jsonl", spec.name)))?;
                    let mut write_err = None;
                    let bundle = train_expert(&data, &spec.name, &cfg.model, &expert_cfg, |e| {
                        debug!("expert `{}` epoch {}: j_mae {:.4}", spec.name, e.epoch, e.j_mae);
                        if write_err.is_none() {
                            write_err = writer.write(&expert_record(&spec.name, e)).err();
                        }
                    })?;
                    if let Some(e) = write_err {
                        return Err(e);
                    }
                    let path = teachers.join(format!("{}.srtc", spec.name));
                    let ckpt = Checkpoint {
                        config_digest: digest.clone(),
                        normalization: Some(norm),
                        artifact: Artifact::Teacher(bundle),
                    };
                    save(&ckpt, dtype, &path)?;
                    info!("expert `{}` saved to {}", spec.name, path.display());
                    Ok(path)
                })
            })
            .collect();
        workers
            .into_iter()
            .map(|w| w.join().unwrap_or_else(|_| Err(config_err("expert worker panicked"))))
            .collect()
    })
}

pub fn load_teachers(paths: &[PathBuf]) -> Result<Vec<TeacherBundle<f64>>> {
    paths
        .iter()
        .map(|p| {
            load(p)?
                .teacher()
                .ok_or_else(|| config_err(format!("{} is not a teacher checkpoint", p.display())))
        })
        .collect()
}

/// Distills a target network from teacher checkpoints and normalized target
/// training data. Nothing else is read: source datasets are out of reach by
/// construction.
pub fn distill_phase(
    teachers: &[PathBuf],
    target_train: &FingerprintDataset<f64>,
    dims: &ModelDims,
    cfg: &DistillConfig,
    metrics: &mut MetricsWriter,
    label: &str,
) -> Result<SpecializedNetwork<f64>> {
    let bundles = if cfg.constraints.any() {
        load_teachers(teachers)?
    } else {
        Vec::new()
    };
    info!(
        "distilling `{label}` with constraints {} from {} teacher(s)",
        cfg.constraints,
        bundles.len()
    );
    let mut write_err = None;
    let out = distill(target_train, &bundles, dims, cfg, |e| {
        debug!("distill `{label}` epoch {}: j_overall {:.4}", e.epoch, e.j_overall);
        if write_err.is_none() {
            write_err = metrics.write(&distill_record(label, e)).err();
        }
    })?;
    match write_err {
        Some(e) => Err(e),
        None => Ok(out.specialized),
    }
}

/// Normalizes raw readings the way `model` was trained.
pub fn evaluate_model(
    model: &SpecializedNetwork<f64>,
    normalization: Option<RssNormalization>,
    raw: &FingerprintDataset<f64>,
    probes: &[f64],
) -> Result<EvalReport> {
    let data = match normalization {
        Some(n) => normalize_rss(raw, n)?,
        None => raw.clone(),
    };
    Ok(evaluate_with(model, &data, probes)?)
}

/// The JSON half of a written report; the CDF goes to its own CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub mae_m: f64,
    pub p75_m: f64,
    pub p95_m: f64,
    pub n_samples: usize,
    /// `(radius, P(error < radius))`.
    pub threshold_probes: Vec<(f64, f64)>,
}

impl From<&EvalReport> for ReportSummary {
    fn from(r: &EvalReport) -> Self {
        Self {
            mae_m: r.mae_m,
            p75_m: r.p75_m,
            p95_m: r.p95_m,
            n_samples: r.n_samples,
            threshold_probes: r.threshold_probes.clone(),
        }
    }
}

/// `<stem>.json` with the summary and `<stem>-cdf.csv` with the CDF.
pub fn write_report(report: &EvalReport, dir: &Path, stem: &str) -> Result<PathBuf> {
    let path = dir.join(format!("{stem}.json"));
    let summary = ReportSummary::from(report);
    fs::write(&path, serde_json::to_string_pretty(&summary)?).at(&path)?;
    let cdf = dir.join(format!("{stem}-cdf.csv"));
    let file = fs::File::create(&cdf).at(&cdf)?;
    report.write_cdf_csv(std::io::BufWriter::new(file)).at(&cdf)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub constraints: String,
    pub baseline_mae_m: f64,
    pub enhanced_mae_m: f64,
    pub improvement: Comparison,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub run: RunDir,
    pub teachers: Vec<PathBuf>,
    pub model: PathBuf,
    pub baseline: EvalReport,
    pub enhanced: EvalReport,
    pub comparison: Comparison,
}

/// Generate, train experts, distill with and without constraints, evaluate
/// both on the held-out target split and compare.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<PipelineOutput> {
    cfg.validate()?;
    let run = RunDir::create(out, &cfg.digest()?)?;
    run.write_config(cfg)?;
    gen_data(cfg, &run)?;
    let teachers = train_experts(cfg, &run)?;

    let (train_raw, test_raw) = target_split(cfg)?;
    let norm = cfg.data.normalization;
    let train = normalize_rss(&train_raw, norm)?;
    let enhanced_cfg = cfg.distill_config();
    let baseline_cfg = DistillConfig {
        constraints: ConstraintMask::NONE,
        ..enhanced_cfg.clone()
    };
    let metrics = run.metrics()?;
    let mut w = MetricsWriter::create(&metrics.join("distill-enhanced.jsonl"))?;
    let enhanced_net = distill_phase(&teachers, &train, &cfg.model, &enhanced_cfg, &mut w, "enhanced")?;
    let mut w = MetricsWriter::create(&metrics.join("distill-baseline.jsonl"))?;
    let baseline_net = distill_phase(&[], &train, &cfg.model, &baseline_cfg, &mut w, "baseline")?;

    let model = run.models()?.join("distilled.srtc");
    let ckpt = Checkpoint {
        config_digest: cfg.digest()?,
        normalization: Some(norm),
        artifact: Artifact::Model(enhanced_net.clone()),
    };
    save(&ckpt, cfg.checkpoint_dtype.into(), &model)?;

    let probes = &cfg.eval.probes;
    let baseline = evaluate_model(&baseline_net, Some(norm), &test_raw, probes)?;
    let enhanced = evaluate_model(&enhanced_net, Some(norm), &test_raw, probes)?;
    let comparison = compare(&baseline, &enhanced)?;
    let reports = run.reports()?;
    write_report(&baseline, &reports, "baseline")?;
    write_report(&enhanced, &reports, "enhanced")?;
    let summary = ComparisonReport {
        constraints: enhanced_cfg.constraints.to_string(),
        baseline_mae_m: baseline.mae_m,
        enhanced_mae_m: enhanced.mae_m,
        improvement: comparison,
    };
    let path = reports.join("comparison.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).at(&path)?;
    info!(
        "baseline MAE {:.3} m, enhanced MAE {:.3} m ({:+.2}%)",
        baseline.mae_m, enhanced.mae_m, comparison.mae_pct
    );
    Ok(PipelineOutput {
        run,
        teachers,
        model,
        baseline,
        enhanced,
        comparison,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub constraints: String,
    pub mae_m: f64,
    pub p75_m: f64,
    pub p95_m: f64,
}

fn mask_slug(mask: ConstraintMask) -> String {
    let parts: Vec<&str> = [(mask.sim, "sim"), (mask.mi, "mi"), (mask.fi, "fi")]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
    if parts.is_empty() {
        "none".into()
    } else {
        parts.join("-")
    }
}

/// Distills once per ablation mask from the given teachers, or from freshly
/// trained ones when none are given.
pub fn run_ablation(
    cfg: &RunConfig,
    out: &Path,
    teachers: Option<Vec<PathBuf>>,
) -> Result<(RunDir, Vec<AblationEntry>)> {
    cfg.validate()?;
    let run = RunDir::create(out, &cfg.digest()?)?;
    run.write_config(cfg)?;
    let teachers = match teachers {
        Some(t) => t,
        None => train_experts(cfg, &run)?,
    };
    let (train_raw, test_raw) = target_split(cfg)?;
    let norm = cfg.data.normalization;
    let train = normalize_rss(&train_raw, norm)?;
    let metrics = run.metrics()?;
    let mut rows = Vec::new();
    for mask in ConstraintMask::ablation_grid() {
        let run_cfg = DistillConfig {
            constraints: mask,
            ..cfg.distill_config()
        };
        let slug = mask_slug(mask);
        let mut w = MetricsWriter::create(&metrics.join(format!("ablate-{slug}.jsonl")))?;
        let net = distill_phase(&teachers, &train, &cfg.model, &run_cfg, &mut w, &slug)?;
        let report = evaluate_model(&net, Some(norm), &test_raw, &cfg.eval.probes)?;
        info!("ablation {mask}: MAE {:.3} m", report.mae_m);
        rows.push(AblationEntry {
            constraints: mask.to_string(),
            mae_m: report.mae_m,
            p75_m: report.p75_m,
            p95_m: report.p95_m,
        });
    }
    let reports = run.reports()?;
    let path = reports.join("ablation.json");
    fs::write(&path, serde_json::to_string_pretty(&rows)?).at(&path)?;
    let csv_path = reports.join("ablation.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(srtc::Error::from)?;
    for row in &rows {
        w.serialize(row).map_err(srtc::Error::from)?;
    }
    w.flush().at(&csv_path)?;
    Ok((run, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs() {
        assert_eq!(mask_slug(ConstraintMask::NONE), "none");
        assert_eq!(mask_slug(ConstraintMask::ALL), "sim-mi-fi");
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let cfg = RunConfig::from_toml(
            "[data.target]\nname = \"t\"\nsamples = 20\n[[data.sources]]\nname = \"s\"\n",
            PathBuf::new(),
        )
        .unwrap();
        let raw = load_dataset(&cfg, &cfg.data.target).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(&raw, &path).unwrap();
        let back = load_csv::<f64>(&path, &CsvSchema::default()).unwrap();
        assert_eq!(back, raw);
    }

    #[test]
    fn run_dirs_are_unique() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunDir::create(dir.path(), "0123456789abcdef").unwrap();
        let b = RunDir::create(dir.path(), "0123456789abcdef").unwrap();
        assert_ne!(a.root, b.root);
        assert!(a
            .root
            .file_name()
            .unwrap()
            .to_str()
            .unwrap()
            .starts_with("0123456789ab-"));
    }
}
