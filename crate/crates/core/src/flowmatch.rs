//! Preference flow matching: regress a time-dependent vector field onto the
//! straight-line velocity `y+ - y-` of each labeled pair, then transport
//! samples by integrating the learned ODE from `t = 0` to `t = 1`.

use std::path::Path;

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnflow::{self, Activation, AdamConfig, AdamState, MlpParams, MlpSpec};
use crate::prefdata::{
    label_pairs, ContextSpec, DatasetMetadata, GaussianMixture, PreferenceDataset,
    PreferenceLabeler, PreferenceTriple, RawPair,
};
use crate::rng::{self, StageSeeds};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeDistribution {
    #[default]
    Uniform01,
}

/// Gaussian probability path `N(t y+ + (1 - t) y-, sigma^2 I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathConfig {
    pub sigma: f64,
    pub t_distribution: TimeDistribution,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            sigma: 0.05,
            t_distribution: TimeDistribution::Uniform01,
        }
    }
}

impl PathConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Config(format!(
                "path.sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub t: f64,
    pub y_t: Vec<f64>,
    pub u_target: Vec<f64>,
    pub x: Vec<f64>,
}

/// Draw `t ~ U[0, 1]` and a point on the probability path of `triple`.
pub fn sample_path_point<R: Rng + ?Sized>(
    triple: &PreferenceTriple,
    path: &PathConfig,
    rng: &mut R,
) -> Result<FlowSample> {
    let t = match path.t_distribution {
        TimeDistribution::Uniform01 => rng.random::<f64>(),
    };
    sample_path_point_at(triple, path, t, rng)
}

/// Same as [`sample_path_point`] with the time fixed. With `sigma = 0` no
/// randomness is consumed and `y_t` lies exactly on the segment.
pub fn sample_path_point_at<R: Rng + ?Sized>(
    triple: &PreferenceTriple,
    path: &PathConfig,
    t: f64,
    rng: &mut R,
) -> Result<FlowSample> {
    if triple.y_plus.len() != triple.y_minus.len() {
        return Err(Error::Shape(format!(
            "y+ has dimension {}, y- has {}",
            triple.y_plus.len(),
            triple.y_minus.len()
        )));
    }
    let mut y_t: Vec<f64> = triple
        .y_plus
        .iter()
        .zip(&triple.y_minus)
        .map(|(p, m)| t * p + (1.0 - t) * m)
        .collect();
    if path.sigma > 0.0 {
        for v in &mut y_t {
            let z: f64 = StandardNormal.sample(rng);
            *v += path.sigma * z;
        }
    }
    let u_target = triple
        .y_plus
        .iter()
        .zip(&triple.y_minus)
        .map(|(p, m)| p - m)
        .collect();
    Ok(FlowSample {
        t,
        y_t,
        u_target,
        x: triple.x.clone(),
    })
}

/// How time enters the network input.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeFeatures {
    #[default]
    Raw,
    /// `[t, sin(2 pi k t), cos(2 pi k t)]` for `k = 1..=frequencies`.
    Sinusoidal { frequencies: usize },
}

impl TimeFeatures {
    pub fn dim(&self) -> usize {
        match self {
            TimeFeatures::Raw => 1,
            TimeFeatures::Sinusoidal { frequencies } => 1 + 2 * frequencies,
        }
    }

    fn write(&self, t: f64, out: &mut [f64]) {
        out[0] = t;
        if let TimeFeatures::Sinusoidal { frequencies } = *self {
            for k in 1..=frequencies {
                let a = 2.0 * std::f64::consts::PI * k as f64 * t;
                out[2 * k - 1] = a.sin();
                out[2 * k] = a.cos();
            }
        }
    }
}

/// Architecture of the vector-field network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_features: TimeFeatures,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
            time_features: TimeFeatures::Raw,
        }
    }
}

/// A velocity field over `y` in `R^d`, optionally conditioned on a context `x`.
pub trait VectorField: Sync {
    fn y_dim(&self) -> usize;
    fn x_dim(&self) -> usize;
    /// Velocities at a shared time `t` for a batch of points (one per row).
    fn velocity(&self, t: f64, y: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
}

/// The learned field `v(t, y | x)`, backed by an MLP on `[time features, y, x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub net: MlpParams,
    pub y_dim: usize,
    pub x_dim: usize,
    pub time_features: TimeFeatures,
}

impl FlowField {
    pub fn spec_for(cfg: &FieldConfig, y_dim: usize, x_dim: usize, seed: u64) -> Result<MlpSpec> {
        MlpSpec::new(
            cfg.time_features.dim() + y_dim + x_dim,
            cfg.hidden.clone(),
            y_dim,
            cfg.activation,
            seed,
        )
    }

    pub fn new(net: MlpParams, y_dim: usize, x_dim: usize, time_features: TimeFeatures) -> Result<Self> {
        let spec = net.spec();
        if spec.input_dim != time_features.dim() + y_dim + x_dim || spec.output_dim != y_dim {
            return Err(Error::Shape(format!(
                "network maps {} -> {}, field needs {} -> {y_dim}",
                spec.input_dim,
                spec.output_dim,
                time_features.dim() + y_dim + x_dim
            )));
        }
        Ok(Self {
            net,
            y_dim,
            x_dim,
            time_features,
        })
    }

    pub fn init(cfg: &FieldConfig, y_dim: usize, x_dim: usize, seed: u64) -> Result<Self> {
        let spec = Self::spec_for(cfg, y_dim, x_dim, seed)?;
        Self::new(MlpParams::init(&spec)?, y_dim, x_dim, cfg.time_features)
    }

    /// A field that is identically zero (its output layer is zeroed).
    pub fn zeroed(cfg: &FieldConfig, y_dim: usize, x_dim: usize, seed: u64) -> Result<Self> {
        let mut f = Self::init(cfg, y_dim, x_dim, seed)?;
        f.net.zero_output_layer();
        Ok(f)
    }

    fn build_inputs(
        &self,
        times: ArrayView1<'_, f64>,
        y: ArrayView2<'_, f64>,
        x: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let n = y.nrows();
        if y.ncols() != self.y_dim || x.ncols() != self.x_dim || x.nrows() != n || times.len() != n {
            return Err(Error::Shape(format!(
                "field expects y:(n, {}) x:(n, {}), got y:{:?} x:{:?} t:{}",
                self.y_dim,
                self.x_dim,
                y.dim(),
                x.dim(),
                times.len()
            )));
        }
        let td = self.time_features.dim();
        let mut input = Array2::zeros((n, td + self.y_dim + self.x_dim));
        for (i, mut row) in input.rows_mut().into_iter().enumerate() {
            let row = row.as_slice_mut().expect("fresh array is contiguous");
            self.time_features.write(times[i], &mut row[..td]);
            for (d, v) in y.row(i).iter().enumerate() {
                row[td + d] = *v;
            }
            for (d, v) in x.row(i).iter().enumerate() {
                row[td + self.y_dim + d] = *v;
            }
        }
        Ok(input)
    }

    fn batch_inputs(&self, batch: &[FlowSample]) -> Result<(Array2<f64>, Array2<f64>)> {
        let n = batch.len();
        let mut times = ndarray::Array1::zeros(n);
        let mut y = Array2::zeros((n, self.y_dim));
        let mut x = Array2::zeros((n, self.x_dim));
        let mut u = Array2::zeros((n, self.y_dim));
        for (i, s) in batch.iter().enumerate() {
            if s.y_t.len() != self.y_dim || s.u_target.len() != self.y_dim || s.x.len() != self.x_dim {
                return Err(Error::Shape(format!(
                    "flow sample {i} has dims (y={}, u={}, x={}), field expects (y={}, x={})",
                    s.y_t.len(),
                    s.u_target.len(),
                    s.x.len(),
                    self.y_dim,
                    self.x_dim
                )));
            }
            times[i] = s.t;
            y.row_mut(i).assign(&ArrayView1::from(s.y_t.as_slice()));
            x.row_mut(i).assign(&ArrayView1::from(s.x.as_slice()));
            u.row_mut(i).assign(&ArrayView1::from(s.u_target.as_slice()));
        }
        Ok((self.build_inputs(times.view(), y.view(), x.view())?, u))
    }

    fn checkpoint_extra(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "flow_field",
            "y_dim": self.y_dim,
            "x_dim": self.x_dim,
            "time_features": self.time_features,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        nnflow::save_checkpoint(path, &self.net, &self.checkpoint_extra())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        nnflow::write_checkpoint(&mut buf, &self.net, &self.checkpoint_extra())
            .expect("writing to memory cannot fail");
        buf
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (net, extra) = nnflow::load_checkpoint(path)?;
        Self::from_checkpoint(net, extra)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (net, extra) = nnflow::read_checkpoint(bytes)?;
        Self::from_checkpoint(net, extra)
    }

    fn from_checkpoint(net: MlpParams, extra: serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct Extra {
            kind: String,
            y_dim: usize,
            x_dim: usize,
            time_features: TimeFeatures,
        }
        let extra: Extra = serde_json::from_value(extra).map_err(|e| Error::Parse {
            line: 0,
            msg: format!("flow checkpoint metadata: {e}"),
        })?;
        if extra.kind != "flow_field" {
            return Err(Error::Parse {
                line: 0,
                msg: format!("checkpoint holds a {:?}, not a flow field", extra.kind),
            });
        }
        Self::new(net, extra.y_dim, extra.x_dim, extra.time_features)
    }
}

impl VectorField for FlowField {
    fn y_dim(&self) -> usize {
        self.y_dim
    }

    fn x_dim(&self) -> usize {
        self.x_dim
    }

    fn velocity(&self, t: f64, y: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let times = ndarray::Array1::from_elem(y.nrows(), t);
        let input = self.build_inputs(times.view(), y, x)?;
        self.net.forward_batch(input.view())
    }
}

/// A field given by a closure `f(t, y)`, ignoring context. Handy for tests.
pub struct FnField<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> VectorField for FnField<F>
where
    F: Fn(f64, &[f64]) -> Vec<f64> + Sync,
{
    fn y_dim(&self) -> usize {
        self.dim
    }

    fn x_dim(&self) -> usize {
        0
    }

    fn velocity(&self, t: f64, y: ArrayView2<'_, f64>, _x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(y.dim());
        for (i, row) in y.rows().into_iter().enumerate() {
            let v = (self.f)(t, &row.to_vec());
            out.row_mut(i).assign(&ArrayView1::from(v.as_slice()));
        }
        Ok(out)
    }
}

/// Mean squared error between the field and the conditional velocities.
pub fn cfm_loss(field: &FlowField, batch: &[FlowSample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Usage("cfm_loss: empty batch".into()));
    }
    let (input, u) = field.batch_inputs(batch)?;
    let out = field.net.forward_batch(input.view())?;
    Ok((&out - &u).mapv(|d| d * d).sum() / batch.len() as f64)
}

/// Loss and its gradient with respect to the flat network parameters.
pub fn cfm_loss_and_grad(field: &FlowField, batch: &[FlowSample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Usage("cfm_loss: empty batch".into()));
    }
    let (input, u) = field.batch_inputs(batch)?;
    let trace = field.net.forward_trace(input.view())?;
    let diff = &trace.output - &u;
    let n = batch.len() as f64;
    let loss = diff.mapv(|d| d * d).sum() / n;
    let upstream = diff.mapv(|d| 2.0 * d / n);
    let grad = field.net.backward(&trace, upstream.view())?;
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Drives shuffling and path sampling; network init uses its own seed.
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 256,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedFlow {
    pub field: FlowField,
    pub losses: Vec<EpochLoss>,
}

/// Minimize the flow-matching loss over `dataset` with Adam, starting from
/// `initial`. Each epoch reshuffles the triples and draws fresh path points.
pub fn train_flow(
    dataset: &PreferenceDataset,
    initial: FlowField,
    path: &PathConfig,
    cfg: &TrainConfig,
) -> Result<TrainedFlow> {
    path.validate()?;
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Usage("train_flow: empty dataset".into()));
    }
    if dataset.y_dim != initial.y_dim || dataset.x_dim != initial.x_dim {
        return Err(Error::Shape(format!(
            "dataset dims (y={}, x={}) do not match field dims (y={}, x={})",
            dataset.y_dim, dataset.x_dim, initial.y_dim, initial.x_dim
        )));
    }
    let mut field = initial;
    let mut adam = AdamState::new(field.net.total_count(), cfg.adam);
    let mut rng = rng::from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| sample_path_point(&dataset.triples[i], path, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grad) = cfm_loss_and_grad(&field, &batch)?;
            adam.step(field.net.as_mut_slice(), &grad)?;
            total += loss;
            batches += 1;
        }
        losses.push(EpochLoss {
            epoch,
            loss: total / batches as f64,
        });
    }
    Ok(TrainedFlow { field, losses })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeMethod {
    Euler,
    #[default]
    Rk4,
}

/// Fixed-step integration over `[0, 1]` with step `1 / steps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdeConfig {
    pub method: OdeMethod,
    pub steps: usize,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self {
            method: OdeMethod::Rk4,
            steps: 100,
        }
    }
}

impl OdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("ode.steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Integrate a batch of initial points (one per row) from `t = 0` to `t = 1`.
pub fn integrate_batch<F: VectorField + ?Sized>(
    field: &F,
    y0: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    ode: &OdeConfig,
) -> Result<Array2<f64>> {
    ode.validate()?;
    if y0.ncols() != field.y_dim() {
        return Err(Error::Shape(format!(
            "initial points have dimension {}, field has {}",
            y0.ncols(),
            field.y_dim()
        )));
    }
    let h = 1.0 / ode.steps as f64;
    let mut y = y0.to_owned();
    for step in 0..ode.steps {
        let t = step as f64 * h;
        match ode.method {
            OdeMethod::Euler => {
                let k1 = field.velocity(t, y.view(), x)?;
                y.scaled_add(h, &k1);
            }
            OdeMethod::Rk4 => {
                let k1 = field.velocity(t, y.view(), x)?;
                let k2 = field.velocity(t + 0.5 * h, (&y + &(&k1 * (0.5 * h))).view(), x)?;
                let k3 = field.velocity(t + 0.5 * h, (&y + &(&k2 * (0.5 * h))).view(), x)?;
                let k4 = field.velocity(t + h, (&y + &(&k3 * h)).view(), x)?;
                let incr = (&k1 + &(&k2 * 2.0) + &(&k3 * 2.0) + &k4) * (h / 6.0);
                y += &incr;
            }
        }
        if let Some(bad) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                step: step + 1,
                msg: format!(
                    "non-finite state in row {} during ODE integration",
                    bad / y.ncols().max(1)
                ),
            });
        }
    }
    Ok(y)
}

/// Integrate one point: returns the flow map `phi_1(y0)`.
pub fn integrate<F: VectorField + ?Sized>(
    field: &F,
    y0: &[f64],
    x: &[f64],
    ode: &OdeConfig,
) -> Result<Vec<f64>> {
    let y = ArrayView2::from_shape((1, y0.len()), y0).map_err(|e| Error::Shape(e.to_string()))?;
    let xv = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(integrate_batch(field, y, xv, ode)?.row(0).to_vec())
}

const INTEGRATE_CHUNK: usize = 256;

/// [`integrate_batch`] split into fixed-size chunks run in parallel. Rows are
/// independent, so the result does not depend on the thread count.
pub fn integrate_many<F: VectorField + ?Sized>(
    field: &F,
    y0: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    ode: &OdeConfig,
) -> Result<Array2<f64>> {
    let n = y0.nrows();
    if x.nrows() != n {
        return Err(Error::Shape(format!(
            "{} initial points but {} contexts",
            n,
            x.nrows()
        )));
    }
    let starts: Vec<usize> = (0..n).step_by(INTEGRATE_CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s0| {
            let s1 = (s0 + INTEGRATE_CHUNK).min(n);
            integrate_batch(field, y0.slice(s![s0..s1, ..]), x.slice(s![s0..s1, ..]), ode)
        })
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    if views.is_empty() {
        return Ok(Array2::zeros((0, y0.ncols())));
    }
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Where inference draws its starting points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleSource {
    /// The reference policy itself.
    Reference { policy: GaussianMixture },
    /// The marginal of rejected samples: draw a pair from the policy, label it,
    /// keep the loser. Needs a labeler at inference time.
    NegativeMarginal {
        policy: GaussianMixture,
        labeler: Option<PreferenceLabeler>,
    },
}

impl SampleSource {
    pub fn reference(policy: GaussianMixture) -> Self {
        SampleSource::Reference { policy }
    }

    pub fn dim(&self) -> usize {
        match self {
            SampleSource::Reference { policy } | SampleSource::NegativeMarginal { policy, .. } => {
                policy.dim()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let SampleSource::NegativeMarginal { labeler: None, .. } = self {
            return Err(Error::Config(
                "negative-marginal source requires a labeler".into(),
            ));
        }
        Ok(())
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        match self {
            SampleSource::Reference { policy } => Ok(policy.sample(rng)),
            SampleSource::NegativeMarginal { policy, labeler } => {
                let labeler = labeler.as_ref().ok_or_else(|| {
                    Error::Config("negative-marginal source requires a labeler".into())
                })?;
                let y = policy.sample(rng);
                let y2 = policy.sample(rng);
                Ok(labeler.label_pair(Vec::new(), y, y2, rng)?.y_minus)
            }
        }
    }

    /// `n` draws, the `i`-th from stream `(seed, "source", i)`.
    pub fn draw_many(&self, n: usize, seed: u64) -> Result<Array2<f64>> {
        self.validate()?;
        let rows = (0..n)
            .into_par_iter()
            .map(|i| self.draw(&mut rng::stream(seed, "source", i as u64)))
            .collect::<Result<Vec<_>>>()?;
        nnflow::rows_to_array(&rows, self.dim())
    }
}

/// Draw one starting point from `source` and transport it through `field`.
pub fn pfm_infer<R: Rng + ?Sized>(
    field: &FlowField,
    source: &SampleSource,
    x: &[f64],
    ode: &OdeConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let y0 = source.draw(rng)?;
    integrate(field, &y0, x, ode)
}

/// A source pushed through a sequence of flows, in order.
#[derive(Debug, Clone)]
pub struct CompositeSampler {
    pub source: SampleSource,
    pub flows: Vec<FlowField>,
    pub ode: OdeConfig,
}

impl CompositeSampler {
    pub fn push(&self, y: Array2<f64>, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.flows
            .iter()
            .try_fold(y, |y, f| integrate_many(f, y.view(), x, &self.ode))
    }

    /// `n` unconditional samples; source draws use `(seed, "source", i)` streams.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Array2<f64>> {
        let y = self.source.draw_many(n, seed)?;
        let x = Array2::zeros((n, self.flows.first().map_or(0, |f| f.x_dim)));
        self.push(y, x.view())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterateMode {
    /// Collect fresh pairs from the current sampler and train a new flow each round.
    #[default]
    Retrain,
    /// Apply one learned flow repeatedly.
    Reapply,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterateConfig {
    pub iterations: usize,
    pub mode: IterateMode,
    pub pairs_per_iter: usize,
}

impl Default for IterateConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            mode: IterateMode::Retrain,
            pairs_per_iter: 2000,
        }
    }
}

/// Everything iterative training needs besides the data source.
#[derive(Debug, Clone)]
pub struct IterateSetup<'a> {
    pub labeler: Option<&'a PreferenceLabeler>,
    pub field: &'a FieldConfig,
    pub path: &'a PathConfig,
    pub train: &'a TrainConfig,
    pub ode: &'a OdeConfig,
    pub context: ContextSpec,
    pub master_seed: u64,
}

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub dataset: PreferenceDataset,
    pub losses: Vec<EpochLoss>,
}

#[derive(Debug, Clone)]
pub struct IterateOutput {
    pub flows: Vec<FlowField>,
    /// One record per retrain round; empty in reapply mode.
    pub rounds: Vec<IterationRecord>,
    pub sampler: CompositeSampler,
}

impl IterateOutput {
    /// Sampler using only the first `k` flows.
    pub fn prefix_sampler(&self, k: usize) -> CompositeSampler {
        CompositeSampler {
            source: self.sampler.source.clone(),
            flows: self.sampler.flows[..k.min(self.sampler.flows.len())].to_vec(),
            ode: self.sampler.ode,
        }
    }
}

/// Collect `n` labeled pairs whose points come from `sampler`. With no flows
/// and a reference source this matches [`crate::prefdata::collect_dataset`].
pub fn collect_from_sampler(
    sampler: &CompositeSampler,
    labeler: &PreferenceLabeler,
    n: usize,
    context: ContextSpec,
    seed: u64,
) -> Result<PreferenceDataset> {
    if n < 1 {
        return Err(Error::Usage("pairs_per_iter must be >= 1".into()));
    }
    sampler.source.validate()?;
    let raw = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, "draw", i as u64);
            let x = context.draw(&mut rng);
            let y = sampler.source.draw(&mut rng)?;
            let y2 = sampler.source.draw(&mut rng)?;
            Ok((x, y, y2))
        })
        .collect::<Result<Vec<RawPair>>>()?;
    let pairs = if sampler.flows.is_empty() {
        raw
    } else {
        let dim = sampler.source.dim();
        let xs = nnflow::rows_to_array(&raw.iter().map(|p| p.0.clone()).collect::<Vec<_>>(), context.dim)?;
        let ya = nnflow::rows_to_array(&raw.iter().map(|p| p.1.clone()).collect::<Vec<_>>(), dim)?;
        let yb = nnflow::rows_to_array(&raw.iter().map(|p| p.2.clone()).collect::<Vec<_>>(), dim)?;
        let ya = nnflow::array_to_rows(&sampler.push(ya, xs.view())?);
        let yb = nnflow::array_to_rows(&sampler.push(yb, xs.view())?);
        raw.into_iter()
            .zip(ya.into_iter().zip(yb))
            .map(|((x, _, _), (a, b))| (x, a, b))
            .collect()
    };
    let triples = label_pairs(labeler, pairs, seed)?;
    let policy = match &sampler.source {
        SampleSource::Reference { policy } | SampleSource::NegativeMarginal { policy, .. } => {
            policy.clone()
        }
    };
    let mut extra = serde_json::Map::new();
    if !sampler.flows.is_empty() {
        extra.insert("pushed_through_flows".into(), sampler.flows.len().into());
    }
    if let SampleSource::NegativeMarginal { .. } = sampler.source {
        extra.insert("source".into(), "negative_marginal".into());
    }
    let metadata = DatasetMetadata {
        seed,
        n,
        labeler: labeler.clone(),
        policy,
        context,
        extra,
    };
    PreferenceDataset::new(triples, context.dim, sampler.source.dim(), metadata)
}

/// Iterated preference flow matching.
///
/// Retrain mode: round `n` draws pairs by pushing `source0` through flows
/// `1..n-1`, labels them, and trains flow `n`. Reapply mode: `pretrained` is
/// applied `iterations` times.
pub fn iterate_pfm(
    source0: &SampleSource,
    setup: &IterateSetup<'_>,
    it: &IterateConfig,
    pretrained: Option<&FlowField>,
) -> Result<IterateOutput> {
    if it.iterations < 1 {
        return Err(Error::Usage("iterate: iterations must be >= 1".into()));
    }
    match it.mode {
        IterateMode::Reapply => {
            let flow = pretrained.ok_or_else(|| {
                Error::Usage("reapply mode needs a pre-trained flow".into())
            })?;
            let flows = vec![flow.clone(); it.iterations];
            Ok(IterateOutput {
                sampler: CompositeSampler {
                    source: source0.clone(),
                    flows: flows.clone(),
                    ode: *setup.ode,
                },
                flows,
                rounds: Vec::new(),
            })
        }
        IterateMode::Retrain => {
            let labeler = setup
                .labeler
                .ok_or_else(|| Error::Usage("retrain mode needs a labeler".into()))?;
            if it.pairs_per_iter < 1 {
                return Err(Error::Usage("iterate: pairs_per_iter must be >= 1".into()));
            }
            let mut sampler = CompositeSampler {
                source: source0.clone(),
                flows: Vec::new(),
                ode: *setup.ode,
            };
            let mut rounds = Vec::with_capacity(it.iterations);
            for n in 1..=it.iterations {
                let seeds = StageSeeds::for_iteration(setup.master_seed, n);
                let dataset = collect_from_sampler(
                    &sampler,
                    labeler,
                    it.pairs_per_iter,
                    setup.context,
                    seeds.data,
                )?;
                let init = FlowField::init(setup.field, dataset.y_dim, dataset.x_dim, seeds.init)?;
                let cfg = TrainConfig {
                    seed: seeds.train,
                    ..setup.train.clone()
                };
                let trained = train_flow(&dataset, init, setup.path, &cfg)?;
                sampler.flows.push(trained.field);
                rounds.push(IterationRecord {
                    dataset,
                    losses: trained.losses,
                });
            }
            Ok(IterateOutput {
                flows: sampler.flows.clone(),
                rounds,
                sampler,
            })
        }
    }
}
