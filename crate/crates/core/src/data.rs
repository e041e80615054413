//! Fingerprint datasets: synthetic radio environments and CSV ingestion.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::seeded;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Reading used for an anchor that was not heard.
pub const MISSING_MARKER: f64 = 100.0;
/// Weakest detectable signal in dB.
pub const MIN_RSS: f64 = -104.0;
pub const DEFAULT_P0: f64 = -30.0;
pub const DEFAULT_D0: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub width: f64,
    pub height: f64,
    pub n_anchors: usize,
    pub path_loss_exponent: f64,
    pub p0: f64,
    pub d0: f64,
    pub noise_std: f64,
    pub p_drop: f64,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        Self {
            width: 60.0,
            height: 40.0,
            n_anchors: 8,
            path_loss_exponent: 2.5,
            p0: DEFAULT_P0,
            d0: DEFAULT_D0,
            noise_std: 3.0,
            p_drop: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEnvironment {
    pub width: f64,
    pub height: f64,
    pub anchors: Vec<[f64; 2]>,
    pub path_loss_exponent: f64,
    pub p0: f64,
    pub d0: f64,
    pub noise_std: f64,
    pub p_drop: f64,
}

impl SyntheticEnvironment {
    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(invalid(format!(
                "area bounds must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        if self.anchors.is_empty() {
            return Err(invalid("environment needs at least one anchor"));
        }
        if let Some(a) = self
            .anchors
            .iter()
            .find(|a| !(0.0..=self.width).contains(&a[0]) || !(0.0..=self.height).contains(&a[1]))
        {
            return Err(invalid(format!("anchor {a:?} outside bounds")));
        }
        if !(self.path_loss_exponent > 0.0) {
            return Err(invalid("path-loss exponent must be positive"));
        }
        if !(self.d0 > 0.0) {
            return Err(invalid("reference distance must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(invalid(format!("p_drop must lie in [0, 1], got {}", self.p_drop)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(invalid("noise std must be nonnegative"));
        }
        Ok(())
    }

    /// Noise-free received power at distance `d`.
    pub fn mean_rss(&self, d: f64) -> f64 {
        self.p0 - 10.0 * self.path_loss_exponent * (d.max(self.d0) / self.d0).log10()
    }
}

pub fn generate_environment(config: &EnvironmentConfig, seed: u64) -> Result<SyntheticEnvironment> {
    if !(config.width > 0.0 && config.height > 0.0) || !config.width.is_finite() || !config.height.is_finite() {
        return Err(invalid(format!(
            "invalid area bounds {}x{}",
            config.width, config.height
        )));
    }
    if config.n_anchors == 0 {
        return Err(invalid("anchor count must be >= 1"));
    }
    let mut rng = seeded(seed);
    let anchors = (0..config.n_anchors)
        .map(|_| {
            [
                rng.random_range(0.0..=config.width),
                rng.random_range(0.0..=config.height),
            ]
        })
        .collect();
    let env = SyntheticEnvironment {
        width: config.width,
        height: config.height,
        anchors,
        path_loss_exponent: config.path_loss_exponent,
        p0: config.p0,
        d0: config.d0,
        noise_std: config.noise_std,
        p_drop: config.p_drop,
    };
    env.validate()?;
    Ok(env)
}

/// How raw dB readings were mapped into network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RssNormalization {
    pub min_rss: f64,
}

impl Default for RssNormalization {
    fn default() -> Self {
        Self { min_rss: MIN_RSS }
    }
}

impl RssNormalization {
    pub fn forward(&self, x: f64) -> f64 {
        if x == MISSING_MARKER {
            0.0
        } else {
            ((x - self.min_rss) / -self.min_rss).clamp(0.0, 1.0)
        }
    }

    /// Inverse of [`forward`](Self::forward). Zero maps back to the missing
    /// marker.
    pub fn inverse(&self, x: f64) -> f64 {
        if x == 0.0 {
            MISSING_MARKER
        } else {
            x * -self.min_rss + self.min_rss
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintDataset<T> {
    /// `[M, n]` readings, in dB or normalized.
    pub x: Tensor<T>,
    /// `[M, 2]` locations in meters.
    pub y: Tensor<T>,
    pub missing_marker: f64,
    /// Set once [`normalize_rss`] has been applied.
    pub normalization: Option<RssNormalization>,
}

impl<T: Scalar> FingerprintDataset<T> {
    pub fn new(x: Tensor<T>, y: Tensor<T>) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(invalid(format!("{} fingerprints but {} locations", x.rows(), y.rows())));
        }
        if y.cols() != 2 {
            return Err(invalid(format!("locations need 2 columns, got {}", y.cols())));
        }
        Ok(Self {
            x,
            y,
            missing_marker: MISSING_MARKER,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_anchors(&self) -> usize {
        self.x.cols()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: self.y.select_rows(idx),
            missing_marker: self.missing_marker,
            normalization: self.normalization,
        }
    }

    pub fn cast<U: Scalar>(&self) -> FingerprintDataset<U> {
        FingerprintDataset {
            x: self.x.cast(),
            y: self.y.cast(),
            missing_marker: self.missing_marker,
            normalization: self.normalization,
        }
    }
}

pub fn sample_fingerprints<T: Scalar>(
    env: &SyntheticEnvironment,
    m: usize,
    seed: u64,
) -> Result<FingerprintDataset<T>> {
    env.validate()?;
    if m == 0 {
        return Err(invalid("sample count must be >= 1"));
    }
    let mut rng = seeded(seed);
    let noise = Normal::new(0.0, env.noise_std).map_err(|e| invalid(e.to_string()))?;
    let n = env.n_anchors();
    let mut x = Vec::with_capacity(m * n);
    let mut y = Vec::with_capacity(m * 2);
    for _ in 0..m {
        let px = rng.random_range(0.0..=env.width);
        let py = rng.random_range(0.0..=env.height);
        y.extend([T::lit(px), T::lit(py)]);
        for a in &env.anchors {
            let d = ((px - a[0]).powi(2) + (py - a[1]).powi(2)).sqrt();
            let rss = (env.mean_rss(d) + noise.sample(&mut rng)).min(0.0);
            let dropped = rng.random_bool(env.p_drop);
            let v = if dropped || rss < MIN_RSS { MISSING_MARKER } else { rss };
            x.push(T::lit(v));
        }
    }
    FingerprintDataset::new(Tensor::from_vec(m, n, x), Tensor::from_vec(m, 2, y))
}

/// Maps dB readings into `[0, 1]`, missing readings to 0.
pub fn normalize_rss<T: Scalar>(data: &FingerprintDataset<T>, norm: RssNormalization) -> Result<FingerprintDataset<T>> {
    if data.normalization.is_some() {
        return Err(invalid("dataset is already normalized"));
    }
    if !(norm.min_rss < 0.0) {
        return Err(invalid("min_rss must be negative"));
    }
    let marker = data.missing_marker;
    let x = data.x.map(|v| {
        let v = v.as_f64();
        T::lit(if v == marker { 0.0 } else { norm.forward(v) })
    });
    Ok(FingerprintDataset {
        x,
        y: data.y.clone(),
        missing_marker: data.missing_marker,
        normalization: Some(norm),
    })
}

pub fn denormalize_rss<T: Scalar>(data: &FingerprintDataset<T>) -> Result<FingerprintDataset<T>> {
    let norm = data.normalization.ok_or_else(|| invalid("dataset is not normalized"))?;
    Ok(FingerprintDataset {
        x: data.x.map(|v| T::lit(norm.inverse(v.as_f64()))),
        y: data.y.clone(),
        missing_marker: data.missing_marker,
        normalization: None,
    })
}

/// Disjoint train/test partition; both sides sorted by original index.
pub fn split_indices(m: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(invalid(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if m < 2 {
        return Err(invalid("cannot split fewer than 2 samples"));
    }
    let n_train = ((m as f64 * train_fraction).round() as usize).clamp(1, m - 1);
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut seeded(seed));
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split<T: Scalar>(
    data: &FingerprintDataset<T>,
    train_fraction: f64,
    seed: u64,
) -> Result<(FingerprintDataset<T>, FingerprintDataset<T>)> {
    let (train, test) = split_indices(data.len(), train_fraction, seed)?;
    Ok((data.select(&train), data.select(&test)))
}

/// Shuffled minibatches covering `0..m`; the last batch may be short.
pub fn batch_indices<R: Rng>(m: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Which CSV columns hold readings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RssColumns {
    /// Every column whose header starts with this prefix, in file order.
    Prefix(String),
    Names(Vec<String>),
}

/// Planar coordinates `((x − origin_x)·scale_x, (y − origin_y)·scale_y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub origin: [f64; 2],
    pub scale: [f64; 2],
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self {
            origin: [0.0, 0.0],
            scale: [1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub rss: RssColumns,
    pub x_column: String,
    pub y_column: String,
    pub transform: AffineTransform,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            rss: RssColumns::Prefix("WAP".into()),
            x_column: "LONGITUDE".into(),
            y_column: "LATITUDE".into(),
            transform: AffineTransform::default(),
        }
    }
}

pub fn load_csv<T: Scalar>(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<FingerprintDataset<T>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let rss_idx: Vec<usize> = match &schema.rss {
        RssColumns::Prefix(p) => headers
            .iter()
            .enumerate()
            .filter(|(_, h)| h.trim().starts_with(p.as_str()))
            .map(|(i, _)| i)
            .collect(),
        RssColumns::Names(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
    };
    if rss_idx.is_empty() {
        return Err(Error::MissingColumn(format!("{:?}", schema.rss)));
    }
    let xi = find(&schema.x_column)?;
    let yi = find(&schema.y_column)?;

    let mut x = Vec::new();
    let mut y = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let cell = |i: usize| -> Result<f64> {
            let column = headers.get(i).unwrap_or("?").to_string();
            let raw = record.get(i).ok_or_else(|| Error::Data {
                line,
                column: column.clone(),
                message: "missing field".into(),
            })?;
            match raw.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Data {
                    line,
                    column,
                    message: format!("not a finite number: {raw:?}"),
                }),
            }
        };
        for &i in &rss_idx {
            x.push(T::lit(cell(i)?));
        }
        let t = &schema.transform;
        y.push(T::lit((cell(xi)? - t.origin[0]) * t.scale[0]));
        y.push(T::lit((cell(yi)? - t.origin[1]) * t.scale[1]));
    }
    let m = y.len() / 2;
    if m == 0 {
        return Err(invalid("CSV file has no data rows"));
    }
    FingerprintDataset::new(Tensor::from_vec(m, rss_idx.len(), x), Tensor::from_vec(m, 2, y))
}
