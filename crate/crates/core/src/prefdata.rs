//! Ground-truth rewards, explicit reference policies, scripted preference
//! labelers, and the preference dataset with its line-oriented file format.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    stds: Vec<Vec<f64>>,
}

/// Diagonal-covariance Gaussian mixture with an explicit density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixture", into = "RawMixture")]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    stds: Vec<Vec<f64>>,
    dim: usize,
    // log of the normalizing constant of each component
    log_norms: Vec<f64>,
}

impl TryFrom<RawMixture> for GaussianMixture {
    type Error = Error;
    fn try_from(raw: RawMixture) -> Result<Self> {
        GaussianMixture::new(raw.weights, raw.means, raw.stds)
    }
}

impl From<GaussianMixture> for RawMixture {
    fn from(gm: GaussianMixture) -> Self {
        RawMixture {
            weights: gm.weights,
            means: gm.means,
            stds: gm.stds,
        }
    }
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, stds: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        if means.len() != weights.len() || stds.len() != weights.len() {
            return Err(Error::Config(format!(
                "mixture has {} weights, {} means, {} stds",
                weights.len(),
                means.len(),
                stds.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("mixture weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "mixture weights sum to {total}, expected 1 within 1e-12"
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::Config("mixture dimension must be >= 1".into()));
        }
        for (k, (m, s)) in means.iter().zip(&stds).enumerate() {
            if m.len() != dim || s.len() != dim {
                return Err(Error::Config(format!(
                    "mixture component {k}: mean/std length differs from dim {dim}"
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("mixture component {k}: non-finite mean")));
            }
            if s.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                return Err(Error::Config(format!(
                    "mixture component {k}: stds must be finite and > 0"
                )));
            }
        }
        let log_norms = stds
            .iter()
            .map(|s| {
                -0.5 * dim as f64 * (2.0 * PI).ln() - s.iter().map(|v| v.ln()).sum::<f64>()
            })
            .collect();
        Ok(Self {
            weights,
            means,
            stds,
            dim,
            log_norms,
        })
    }

    pub fn isotropic(weights: Vec<f64>, means: Vec<Vec<f64>>, std: f64) -> Result<Self> {
        let stds = means.iter().map(|m| vec![std; m.len()]).collect();
        Self::new(weights, means, stds)
    }

    /// Eight equal-weight components on a circle of radius 4 (angles k * 45deg), std 0.3.
    pub fn eight_gaussians() -> Self {
        Self::ring(8, 4.0, 0.3)
    }

    pub fn ring(count: usize, radius: f64, std: f64) -> Self {
        let means = (0..count)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / count as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        let weights = equal_weights(count);
        Self::isotropic(weights, means, std).expect("ring mixture is valid")
    }

    /// Broad two-component stand-in for a pre-trained sampler covering the ring.
    pub fn default_reference() -> Self {
        Self::isotropic(
            vec![0.5, 0.5],
            vec![vec![-1.0, 0.5], vec![1.0, -0.5]],
            2.5,
        )
        .expect("reference mixture is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn stds(&self) -> &[Vec<f64>] {
        &self.stds
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += w * v;
            }
        }
        out
    }

    /// Pick a component by weight, then draw from its diagonal Gaussian.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        self.means[k]
            .iter()
            .zip(&self.stds[k])
            .map(|(m, s)| {
                let z: f64 = StandardNormal.sample(rng);
                m + s * z
            })
            .collect()
    }

    fn component_log_pdf(&self, k: usize, y: &[f64]) -> f64 {
        let q: f64 = y
            .iter()
            .zip(&self.means[k])
            .zip(&self.stds[k])
            .map(|((v, m), s)| {
                let z = (v - m) / s;
                z * z
            })
            .sum();
        self.log_norms[k] - 0.5 * q
    }

    /// Mixture density. Far tails underflow to exactly 0.
    pub fn pdf(&self, y: &[f64]) -> f64 {
        assert_eq!(y.len(), self.dim, "mixture pdf: dimension mismatch");
        self.weights
            .iter()
            .enumerate()
            .map(|(k, w)| w * self.component_log_pdf(k, y).exp())
            .sum()
    }

    pub fn log_pdf(&self, y: &[f64]) -> f64 {
        assert_eq!(y.len(), self.dim, "mixture log_pdf: dimension mismatch");
        let terms: Vec<f64> = self
            .weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(k, w)| w.ln() + self.component_log_pdf(k, y))
            .collect();
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }

    /// Largest component peak, an upper bound on the density up to overlap.
    pub fn peak_density(&self) -> f64 {
        self.means
            .iter()
            .map(|m| self.pdf(m))
            .fold(0.0, f64::max)
    }

    pub fn describe(&self) -> String {
        format!("gaussian_mixture(k={}, dim={})", self.weights.len(), self.dim)
    }
}

fn equal_weights(count: usize) -> Vec<f64> {
    // keep the sum within 1e-12 of 1 for any count
    let mut w = vec![1.0 / count as f64; count];
    let s: f64 = w.iter().sum();
    w[0] += 1.0 - s;
    w
}

/// Ground-truth reward r*(y).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardFunction {
    MixtureDensity { mixture: GaussianMixture },
    MixtureLogDensity { mixture: GaussianMixture },
    /// Values on a finite support; evaluation returns the nearest support point's value.
    Tabular { points: Vec<Vec<f64>>, values: Vec<f64> },
}

impl RewardFunction {
    pub fn eight_gaussians() -> Self {
        RewardFunction::MixtureDensity {
            mixture: GaussianMixture::eight_gaussians(),
        }
    }

    pub fn tabular(points: Vec<Vec<f64>>, values: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != values.len() {
            return Err(Error::Config(format!(
                "tabular reward needs matching non-empty points/values ({} vs {})",
                points.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("tabular reward values must be finite".into()));
        }
        Ok(RewardFunction::Tabular { points, values })
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        match self {
            RewardFunction::MixtureDensity { mixture } => mixture.pdf(y),
            RewardFunction::MixtureLogDensity { mixture } => mixture.log_pdf(y),
            RewardFunction::Tabular { points, values } => {
                let (best, _) = points
                    .iter()
                    .map(|p| p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                    .enumerate()
                    .fold((0, f64::INFINITY), |acc, (i, d)| if d < acc.1 { (i, d) } else { acc });
                values[best]
            }
        }
    }

    /// Typical magnitude of reward differences, used to scale tolerances.
    pub fn scale(&self) -> f64 {
        match self {
            RewardFunction::MixtureDensity { mixture } => mixture.peak_density(),
            RewardFunction::MixtureLogDensity { .. } => 1.0,
            RewardFunction::Tabular { values, .. } => {
                let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (hi - lo).max(f64::MIN_POSITIVE)
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            RewardFunction::MixtureDensity { mixture } => format!("pdf of {}", mixture.describe()),
            RewardFunction::MixtureLogDensity { mixture } => {
                format!("log-pdf of {}", mixture.describe())
            }
            RewardFunction::Tabular { points, .. } => format!("tabular({} points)", points.len()),
        }
    }
}

/// Logistic function with `f(z) + f(-z) == 1` exactly in floating point.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        1.0 - 1.0 / (1.0 + z.exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelerKind {
    /// Higher reward always wins; equal rewards are a fair coin.
    Deterministic,
    /// `P(y > y') = logistic(temperature * (r(y) - r(y')))`.
    BradleyTerry { temperature: f64 },
}

/// Scripted teacher that labels pairs from a known reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceLabeler {
    pub kind: LabelerKind,
    pub reward: RewardFunction,
}

impl PreferenceLabeler {
    pub fn new(kind: LabelerKind, reward: RewardFunction) -> Result<Self> {
        if let LabelerKind::BradleyTerry { temperature } = kind {
            if !(temperature.is_finite() && temperature > 0.0) {
                return Err(Error::Config(format!(
                    "bradley-terry temperature must be finite and > 0, got {temperature}"
                )));
            }
        }
        Ok(Self { kind, reward })
    }

    pub fn deterministic(reward: RewardFunction) -> Self {
        Self {
            kind: LabelerKind::Deterministic,
            reward,
        }
    }

    pub fn bradley_terry(reward: RewardFunction, temperature: f64) -> Result<Self> {
        Self::new(LabelerKind::BradleyTerry { temperature }, reward)
    }

    pub fn prob_from_rewards(&self, r: f64, r2: f64) -> f64 {
        match self.kind {
            LabelerKind::Deterministic => {
                if r > r2 {
                    1.0
                } else if r < r2 {
                    0.0
                } else {
                    0.5
                }
            }
            LabelerKind::BradleyTerry { temperature } => logistic(temperature * (r - r2)),
        }
    }

    /// Probability that `y` is preferred over `y2`.
    pub fn preference_prob(&self, y: &[f64], y2: &[f64]) -> f64 {
        self.prob_from_rewards(self.reward.eval(y), self.reward.eval(y2))
    }

    /// Order a pair: `y` becomes the preferred point with probability
    /// `preference_prob(y, y2)`. Always consumes exactly one uniform draw.
    pub fn label_pair<R: Rng + ?Sized>(
        &self,
        x: Vec<f64>,
        y: Vec<f64>,
        y2: Vec<f64>,
        rng: &mut R,
    ) -> Result<PreferenceTriple> {
        if y.len() != y2.len() {
            return Err(Error::Shape(format!(
                "cannot compare points of dimension {} and {}",
                y.len(),
                y2.len()
            )));
        }
        let p = self.preference_prob(&y, &y2);
        let u: f64 = rng.random();
        Ok(if u < p {
            PreferenceTriple::new(x, y, y2)
        } else {
            PreferenceTriple::new(x, y2, y)
        })
    }

    pub fn describe(&self) -> String {
        match self.kind {
            LabelerKind::Deterministic => format!("deterministic on {}", self.reward.describe()),
            LabelerKind::BradleyTerry { temperature } => format!(
                "bradley_terry(temperature={temperature}) on {}",
                self.reward.describe()
            ),
        }
    }
}

/// One labeled comparison `(x, y+, y-)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub x: Vec<f64>,
    pub y_plus: Vec<f64>,
    pub y_minus: Vec<f64>,
}

impl PreferenceTriple {
    pub fn new(x: Vec<f64>, y_plus: Vec<f64>, y_minus: Vec<f64>) -> Self {
        Self { x, y_plus, y_minus }
    }

    pub fn swapped(&self) -> Self {
        Self::new(self.x.clone(), self.y_minus.clone(), self.y_plus.clone())
    }
}

/// Optional contexts shared by both points of a pair, drawn from `N(0, I)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSpec {
    pub dim: usize,
}

impl ContextSpec {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim).map(|_| StandardNormal.sample(rng)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub seed: u64,
    pub n: usize,
    pub labeler: PreferenceLabeler,
    pub policy: GaussianMixture,
    pub context: ContextSpec,
    /// Free-form creation parameters (for example the flows a sampler was pushed through).
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    pub triples: Vec<PreferenceTriple>,
    pub x_dim: usize,
    pub y_dim: usize,
    pub metadata: DatasetMetadata,
}

impl PreferenceDataset {
    pub fn new(
        triples: Vec<PreferenceTriple>,
        x_dim: usize,
        y_dim: usize,
        metadata: DatasetMetadata,
    ) -> Result<Self> {
        if y_dim == 0 {
            return Err(Error::Shape("dataset y_dim must be >= 1".into()));
        }
        for (i, t) in triples.iter().enumerate() {
            if t.x.len() != x_dim || t.y_plus.len() != y_dim || t.y_minus.len() != y_dim {
                return Err(Error::Shape(format!(
                    "triple {i} has dims (x={}, y+={}, y-={}), dataset expects (x={x_dim}, y={y_dim})",
                    t.x.len(),
                    t.y_plus.len(),
                    t.y_minus.len()
                )));
            }
        }
        Ok(Self {
            triples,
            x_dim,
            y_dim,
            metadata,
        })
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn positives(&self) -> Vec<Vec<f64>> {
        self.triples.iter().map(|t| t.y_plus.clone()).collect()
    }

    pub fn negatives(&self) -> Vec<Vec<f64>> {
        self.triples.iter().map(|t| t.y_minus.clone()).collect()
    }
}

/// An unlabeled pair `(x, y, y')` before the labeler orders it.
pub type RawPair = (Vec<f64>, Vec<f64>, Vec<f64>);

/// Draw `n` independent pairs from `policy`, each from its own `(seed, "draw", i)` stream.
pub fn draw_raw_pairs(
    policy: &GaussianMixture,
    n: usize,
    context: ContextSpec,
    seed: u64,
) -> Vec<RawPair> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, "draw", i as u64);
            let x = context.draw(&mut rng);
            let y = policy.sample(&mut rng);
            let y2 = policy.sample(&mut rng);
            (x, y, y2)
        })
        .collect()
}

/// Label pairs, each with its own `(seed, "label", i)` stream.
pub fn label_pairs(
    labeler: &PreferenceLabeler,
    pairs: Vec<RawPair>,
    seed: u64,
) -> Result<Vec<PreferenceTriple>> {
    pairs
        .into_par_iter()
        .enumerate()
        .map(|(i, (x, y, y2))| {
            let mut rng: StreamRng = rng::stream(seed, "label", i as u64);
            labeler.label_pair(x, y, y2, &mut rng)
        })
        .collect()
}

/// Collect `n` labeled pairs drawn from `policy`. Output depends only on the
/// arguments, not on thread scheduling.
pub fn collect_dataset(
    policy: &GaussianMixture,
    labeler: &PreferenceLabeler,
    n: usize,
    context: ContextSpec,
    seed: u64,
) -> Result<PreferenceDataset> {
    if n < 1 {
        return Err(Error::Usage("collect_dataset: n must be >= 1".into()));
    }
    let pairs = draw_raw_pairs(policy, n, context, seed);
    let triples = label_pairs(labeler, pairs, seed)?;
    let metadata = DatasetMetadata {
        seed,
        n,
        labeler: labeler.clone(),
        policy: policy.clone(),
        context,
        extra: Default::default(),
    };
    PreferenceDataset::new(triples, context.dim, policy.dim(), metadata)
}

pub const DATASET_FORMAT: &str = "pfm-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    format_version: u32,
    x_dim: usize,
    y_dim: usize,
    columns: usize,
    column_names: Vec<String>,
    metadata: DatasetMetadata,
}

/// Floats are written with 17 significant digits so they parse back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_dataset<W: Write>(mut w: W, ds: &PreferenceDataset) -> Result<()> {
    let mut names: Vec<String> = (0..ds.x_dim).map(|i| format!("x{i}")).collect();
    names.extend((0..ds.y_dim).map(|i| format!("y_plus{i}")));
    names.extend((0..ds.y_dim).map(|i| format!("y_minus{i}")));
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        format_version: DATASET_VERSION,
        x_dim: ds.x_dim,
        y_dim: ds.y_dim,
        columns: names.len(),
        column_names: names,
        metadata: ds.metadata.clone(),
    };
    serde_json::to_writer(&mut w, &header).expect("dataset header serializes");
    w.write_all(b"\n")?;
    for t in &ds.triples {
        let line = t
            .x
            .iter()
            .chain(&t.y_plus)
            .chain(&t.y_minus)
            .map(|v| fmt_f64(*v))
            .collect::<Vec<_>>()
            .join(",");
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<PreferenceDataset> {
    let mut lines = r.lines();
    let header_line = match lines.next() {
        Some(l) => l?,
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "missing header".into(),
            })
        }
    };
    let header: DatasetHeader = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    if header.format != DATASET_FORMAT || header.format_version != DATASET_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "unsupported format {} v{}",
                header.format, header.format_version
            ),
        });
    }
    let columns = header.x_dim + 2 * header.y_dim;
    if header.columns != columns {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header declares {} columns, dims imply {columns}", header.columns),
        });
    }
    let mut triples = Vec::new();
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let line = line?;
        let values: Vec<f64> = line
            .split(',')
            .map(|f| {
                f.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno,
                    msg: format!("bad float {f:?}: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != columns {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {columns} columns, found {}", values.len()),
            });
        }
        let (x, rest) = values.split_at(header.x_dim);
        let (yp, ym) = rest.split_at(header.y_dim);
        triples.push(PreferenceTriple::new(x.to_vec(), yp.to_vec(), ym.to_vec()));
    }
    PreferenceDataset::new(triples, header.x_dim, header.y_dim, header.metadata)
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &PreferenceDataset) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(BufWriter::new(file), ds)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<PreferenceDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    // r(y) = |y| on the two points used below
    fn norm_reward() -> RewardFunction {
        RewardFunction::tabular(
            vec![vec![3.0, 4.0], vec![0.0, 0.0]],
            vec![5.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn degenerate_component_returns_mean() {
        let gm = GaussianMixture::isotropic(vec![1.0], vec![vec![1.5, -2.0]], 1e-12).unwrap();
        let mut rng = rng::from_seed(3);
        let y = gm.sample(&mut rng);
        assert_abs_diff_eq!(y[0], 1.5, epsilon = 1e-9);
        assert_abs_diff_eq!(y[1], -2.0, epsilon = 1e-9);
    }

    #[test]
    fn component_choice_follows_weights() {
        let gm = GaussianMixture::isotropic(
            vec![0.5, 0.5],
            vec![vec![10.0, 0.0], vec![-10.0, 0.0]],
            0.1,
        )
        .unwrap();
        let mut rng = rng::from_seed(11);
        let pos = (0..10_000).filter(|_| gm.sample(&mut rng)[0] > 0.0).count();
        let frac = pos as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&frac), "{frac}");
    }

    #[test]
    fn empirical_mean_matches_mixture_mean() {
        let gm = GaussianMixture::new(
            vec![0.2, 0.8],
            vec![vec![2.0, -1.0], vec![-1.0, 3.0]],
            vec![vec![0.5, 1.0], vec![1.5, 0.3]],
        )
        .unwrap();
        let n = 100_000;
        let mut rng = rng::from_seed(5);
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let y = gm.sample(&mut rng);
            sum[0] += y[0];
            sum[1] += y[1];
        }
        let mean = gm.mean();
        // per-coordinate mixture std from E[y^2] - E[y]^2
        for d in 0..2 {
            let second: f64 = gm
                .weights()
                .iter()
                .zip(gm.means().iter().zip(gm.stds()))
                .map(|(w, (m, s))| w * (s[d] * s[d] + m[d] * m[d]))
                .sum();
            let sd = (second - mean[d] * mean[d]).sqrt();
            let emp = sum[d] / n as f64;
            assert!((emp - mean[d]).abs() < 4.0 * sd / (n as f64).sqrt(), "coord {d}");
        }
    }

    #[test]
    fn pdf_peak_tail_and_degenerate_mixture() {
        let single = GaussianMixture::isotropic(vec![1.0], vec![vec![0.0, 0.0]], 1.0).unwrap();
        assert_abs_diff_eq!(single.pdf(&[0.0, 0.0]), 0.159154943, epsilon = 1e-9);
        assert_abs_diff_eq!(single.pdf(&[0.0, 0.0]), 1.0 / (2.0 * PI), epsilon = 1e-15);
        assert!(single.pdf(&[100.0, 0.0]) < 1e-300);
        let twin = GaussianMixture::isotropic(
            vec![0.3, 0.7],
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            1.0,
        )
        .unwrap();
        for y in [[0.0, 0.0], [0.5, -1.2], [2.0, 2.0]] {
            assert_abs_diff_eq!(twin.pdf(&y), single.pdf(&y), epsilon = 1e-15);
        }
    }

    #[test]
    fn log_pdf_agrees_with_pdf() {
        let gm = GaussianMixture::eight_gaussians();
        for y in [[4.0, 0.0], [0.0, 0.0], [1.0, 2.5]] {
            assert_abs_diff_eq!(gm.log_pdf(&y), gm.pdf(&y).ln(), epsilon = 1e-10);
        }
        // far away the pdf underflows but the log stays finite
        assert!(gm.log_pdf(&[200.0, 0.0]).is_finite());
    }

    #[test]
    fn eight_gaussians_quadrature_mass() {
        let gm = GaussianMixture::eight_gaussians();
        let h = 0.02;
        let mut mass = 0.0;
        let mut x = -6.0 + h / 2.0;
        while x < 6.0 {
            let mut y = -6.0 + h / 2.0;
            while y < 6.0 {
                mass += gm.pdf(&[x, y]) * h * h;
                y += h;
            }
            x += h;
        }
        assert!(mass >= 0.999, "mass {mass}");
        assert!(mass <= 1.0 + 1e-6, "mass {mass}");
    }

    #[test]
    fn invalid_mixtures_rejected() {
        assert!(GaussianMixture::isotropic(vec![0.5, 0.6], vec![vec![0.0], vec![1.0]], 1.0).is_err());
        assert!(GaussianMixture::isotropic(vec![1.0], vec![vec![0.0]], 0.0).is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![vec![0.0, 1.0]], vec![vec![1.0]]).is_err());
        let bad = r#"{"weights":[1.0],"means":[[0.0]],"stds":[[-1.0]]}"#;
        assert!(serde_json::from_str::<GaussianMixture>(bad).is_err());
    }

    #[test]
    fn preference_probabilities() {
        let reward = RewardFunction::tabular(vec![vec![0.0], vec![1.0]], vec![0.0, 1.0]).unwrap();
        let bt = PreferenceLabeler::bradley_terry(reward.clone(), 1.0).unwrap();
        assert_eq!(bt.preference_prob(&[0.0], &[0.0]), 0.5);
        assert_abs_diff_eq!(bt.preference_prob(&[1.0], &[0.0]), 0.731058579, epsilon = 1e-9);
        let det = PreferenceLabeler::deterministic(reward);
        assert_eq!(det.preference_prob(&[1.0], &[0.0]), 1.0);
        assert_eq!(det.preference_prob(&[0.0], &[1.0]), 0.0);
        assert_eq!(det.preference_prob(&[1.0], &[1.0]), 0.5);
        assert!(PreferenceLabeler::bradley_terry(RewardFunction::eight_gaussians(), 0.0).is_err());
    }

    #[test]
    fn deterministic_labeling_prefers_higher_reward() {
        let det = PreferenceLabeler::deterministic(norm_reward());
        let mut rng = rng::from_seed(0);
        for _ in 0..20 {
            let t = det
                .label_pair(vec![], vec![0.0, 0.0], vec![3.0, 4.0], &mut rng)
                .unwrap();
            assert_eq!(t.y_plus, vec![3.0, 4.0]);
        }
    }

    #[test]
    fn ties_are_fair_coins() {
        let reward = RewardFunction::tabular(vec![vec![0.0]], vec![1.0]).unwrap();
        let det = PreferenceLabeler::deterministic(reward);
        let mut rng = rng::from_seed(21);
        let wins = (0..10_000)
            .filter(|_| {
                det.label_pair(vec![], vec![1.0], vec![2.0], &mut rng)
                    .unwrap()
                    .y_plus
                    == vec![1.0]
            })
            .count();
        let frac = wins as f64 / 10_000.0;
        assert!((0.47..=0.53).contains(&frac), "{frac}");
    }

    #[test]
    fn sharp_bradley_terry_saturates() {
        let reward = RewardFunction::tabular(vec![vec![0.0], vec![1.0]], vec![0.0, 0.1]).unwrap();
        let bt = PreferenceLabeler::bradley_terry(reward, 1e6).unwrap();
        let mut rng = rng::from_seed(4);
        let correct = (0..10_000)
            .filter(|_| {
                bt.label_pair(vec![], vec![0.0], vec![1.0], &mut rng).unwrap().y_plus == vec![1.0]
            })
            .count();
        assert!(correct >= 9_999);
    }

    #[test]
    fn label_pair_dimension_mismatch() {
        let det = PreferenceLabeler::deterministic(RewardFunction::eight_gaussians());
        let mut rng = rng::from_seed(0);
        assert!(matches!(
            det.label_pair(vec![], vec![0.0, 0.0], vec![0.0], &mut rng),
            Err(Error::Shape(_))
        ));
    }

    fn toy_dataset(n: usize, seed: u64) -> PreferenceDataset {
        let labeler = PreferenceLabeler::bradley_terry(RewardFunction::eight_gaussians(), 20.0).unwrap();
        collect_dataset(
            &GaussianMixture::default_reference(),
            &labeler,
            n,
            ContextSpec::default(),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn collect_single_and_zero() {
        let ds = toy_dataset(1, 0);
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.triples[0].y_plus.len(), 2);
        assert_eq!(ds.triples[0].y_minus.len(), 2);
        let labeler = PreferenceLabeler::deterministic(RewardFunction::eight_gaussians());
        let err = collect_dataset(
            &GaussianMixture::default_reference(),
            &labeler,
            0,
            ContextSpec::default(),
            0,
        );
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn contexts_are_shared_within_a_pair() {
        let labeler = PreferenceLabeler::deterministic(RewardFunction::eight_gaussians());
        let ds = collect_dataset(
            &GaussianMixture::default_reference(),
            &labeler,
            5,
            ContextSpec { dim: 3 },
            9,
        )
        .unwrap();
        assert_eq!(ds.x_dim, 3);
        assert!(ds.triples.iter().all(|t| t.x.len() == 3));
    }

    #[test]
    fn dataset_serialization_is_deterministic_and_idempotent() {
        let mut a = Vec::new();
        write_dataset(&mut a, &toy_dataset(50, 42)).unwrap();
        let mut b = Vec::new();
        write_dataset(&mut b, &toy_dataset(50, 42)).unwrap();
        assert_eq!(a, b);
        let loaded = read_dataset(a.as_slice()).unwrap();
        assert_eq!(loaded, toy_dataset(50, 42));
        let mut c = Vec::new();
        write_dataset(&mut c, &loaded).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn truncated_line_names_the_line() {
        let mut buf = Vec::new();
        write_dataset(&mut buf, &toy_dataset(3, 1)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut = text.trim_end().rfind(',').unwrap();
        let truncated = &text[..cut];
        match read_dataset(truncated.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
        let broken = text.trim_end().to_string() + "\n1.0,2.0,3.0,4.0e";
        match read_dataset(broken.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn header_only_file_is_empty_dataset() {
        let mut ds = toy_dataset(2, 3);
        ds.triples.clear();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        let loaded = read_dataset(buf.as_slice()).unwrap();
        assert!(loaded.is_empty());
        assert_eq!(loaded.metadata, ds.metadata);
    }
}
