//! Reference methods that go through an explicit or implicit reward: a
//! Bradley-Terry reward model and DPO over a softmax policy on a finite
//! support. Both record how large their learned reward gaps grow.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnflow::{sigmoid, AdamConfig, AdamState, MlpParams, MlpSpec};
use crate::oracle::DiscreteDist;
use crate::prefdata::{fmt_f64, PreferenceDataset, PreferenceTriple};
use crate::rng;

/// `-log(sigmoid(z))` without overflow.
fn neg_log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// `(epoch, max |learned reward gap|)` series.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OverfitTrace {
    pub points: Vec<(usize, f64)>,
}

impl OverfitTrace {
    pub fn push(&mut self, epoch: usize, gap: f64) {
        if let Some(&(last, _)) = self.points.last() {
            assert!(epoch > last, "trace epochs must increase");
        }
        self.points.push((epoch, gap));
    }

    pub fn gap_at(&self, epoch: usize) -> Option<f64> {
        self.points.iter().find(|(e, _)| *e == epoch).map(|(_, g)| *g)
    }

    pub fn last_gap(&self) -> Option<f64> {
        self.points.last().map(|(_, g)| *g)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,max_gap\n");
        for (e, g) in &self.points {
            writeln!(out, "{e},{}", fmt_f64(*g)).unwrap();
        }
        out
    }
}

/// Scalar reward network over the concatenation `[x, y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub net: MlpParams,
}

impl RewardModel {
    pub fn new(net: MlpParams) -> Result<Self> {
        if net.spec().output_dim != 1 {
            return Err(Error::Config(format!(
                "reward model needs output_dim 1, got {}",
                net.spec().output_dim
            )));
        }
        Ok(Self { net })
    }

    pub fn init(spec: &MlpSpec) -> Result<Self> {
        Self::new(MlpParams::init(spec)?)
    }

    pub fn spec(&self) -> &MlpSpec {
        self.net.spec()
    }

    pub fn reward(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let input: Vec<f64> = x.iter().chain(y).copied().collect();
        Ok(self.net.forward(&input)?[0])
    }

    /// Rewards for the rows of `ys`, all under the same context `x`.
    pub fn rewards(&self, x: &[f64], ys: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let (n, d) = ys.dim();
        let mut input = Array2::zeros((n, x.len() + d));
        for (mut row, y) in input.rows_mut().into_iter().zip(ys.rows()) {
            for (k, v) in x.iter().chain(y.iter()).enumerate() {
                row[k] = *v;
            }
        }
        Ok(self.net.forward_batch(input.view())?.column(0).to_vec())
    }

    fn check_triples(&self, batch: &[PreferenceTriple]) -> Result<()> {
        let want = self.spec().input_dim;
        for t in batch {
            if t.x.len() + t.y_plus.len() != want || t.y_plus.len() != t.y_minus.len() {
                return Err(Error::Shape(format!(
                    "reward model expects x+y of dim {want}, triple has x={}, y+={}, y-={}",
                    t.x.len(),
                    t.y_plus.len(),
                    t.y_minus.len()
                )));
            }
        }
        Ok(())
    }

    fn side_inputs(batch: &[PreferenceTriple], plus: bool) -> Array2<f64> {
        let d = batch[0].x.len() + batch[0].y_plus.len();
        let mut a = Array2::zeros((batch.len(), d));
        for (mut row, t) in a.rows_mut().into_iter().zip(batch) {
            let y = if plus { &t.y_plus } else { &t.y_minus };
            for (k, v) in t.x.iter().chain(y).enumerate() {
                row[k] = *v;
            }
        }
        a
    }

    /// `r(x, y+) - r(x, y-)` for every triple.
    pub fn gaps(&self, batch: &[PreferenceTriple]) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        self.check_triples(batch)?;
        let rp = self.net.forward_batch(Self::side_inputs(batch, true).view())?;
        let rm = self.net.forward_batch(Self::side_inputs(batch, false).view())?;
        Ok(rp.column(0).iter().zip(rm.column(0)).map(|(a, b)| a - b).collect())
    }

    pub fn max_gap(&self, batch: &[PreferenceTriple]) -> Result<f64> {
        Ok(self.gaps(batch)?.iter().fold(0.0, |m, g| m.max(g.abs())))
    }
}

/// `-mean log sigmoid(r(x, y+) - r(x, y-))`.
pub fn reward_nll(model: &RewardModel, batch: &[PreferenceTriple]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Usage("reward_nll: empty batch".into()));
    }
    let gaps = model.gaps(batch)?;
    Ok(gaps.iter().map(|&g| neg_log_sigmoid(g)).sum::<f64>() / gaps.len() as f64)
}

pub fn reward_nll_and_grad(model: &RewardModel, batch: &[PreferenceTriple]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Usage("reward_nll: empty batch".into()));
    }
    model.check_triples(batch)?;
    let n = batch.len() as f64;
    let tp = model.net.forward_trace(RewardModel::side_inputs(batch, true).view())?;
    let tm = model.net.forward_trace(RewardModel::side_inputs(batch, false).view())?;
    let mut loss = 0.0;
    let mut up_plus = Array2::zeros((batch.len(), 1));
    for i in 0..batch.len() {
        let g = tp.output[[i, 0]] - tm.output[[i, 0]];
        loss += neg_log_sigmoid(g);
        up_plus[[i, 0]] = -(1.0 - sigmoid(g)) / n;
    }
    let up_minus = up_plus.mapv(|v| -v);
    let mut grad = model.net.backward(&tp, up_plus.view())?;
    for (g, m) in grad.iter_mut().zip(model.net.backward(&tm, up_minus.view())?) {
        *g += m;
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Drives minibatch shuffling; network init uses the spec seed.
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl RewardTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("baseline.reward.epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("baseline.reward.batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Fit a reward model by minibatch Adam on the preference likelihood,
/// recording the largest absolute reward gap over the dataset after each epoch.
pub fn train_reward(
    dataset: &PreferenceDataset,
    spec: &MlpSpec,
    cfg: &RewardTrainConfig,
) -> Result<(RewardModel, OverfitTrace)> {
    train_reward_from(dataset, RewardModel::init(spec)?, cfg)
}

/// [`train_reward`] starting from an existing model.
pub fn train_reward_from(
    dataset: &PreferenceDataset,
    initial: RewardModel,
    cfg: &RewardTrainConfig,
) -> Result<(RewardModel, OverfitTrace)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Usage("train_reward: empty dataset".into()));
    }
    if initial.spec().input_dim != dataset.x_dim + dataset.y_dim {
        return Err(Error::Shape(format!(
            "reward model input_dim {} != x_dim + y_dim = {}",
            initial.spec().input_dim,
            dataset.x_dim + dataset.y_dim
        )));
    }
    let mut model = initial;
    let mut adam = AdamState::new(model.net.total_count(), cfg.adam);
    let mut rng = rng::from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = OverfitTrace::default();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| dataset.triples[i].clone()));
            let (_, grad) = reward_nll_and_grad(&model, &batch)?;
            adam.step(model.net.as_mut_slice(), &grad)?;
        }
        trace.push(epoch, model.max_gap(&dataset.triples)?);
    }
    Ok((model, trace))
}

/// Softmax policy over a fixed list of points.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePolicy {
    pub support: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl DiscretePolicy {
    pub fn new(support: Vec<Vec<f64>>, logits: Vec<f64>) -> Result<Self> {
        if support.is_empty() || support.len() != logits.len() {
            return Err(Error::Shape(format!(
                "policy needs one logit per support point ({} points, {} logits)",
                support.len(),
                logits.len()
            )));
        }
        let d = support[0].len();
        if support.iter().any(|p| p.len() != d) {
            return Err(Error::Shape("support points have mixed dimensions".into()));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Numerical {
                step: 0,
                msg: "non-finite logit".into(),
            });
        }
        Ok(Self { support, logits })
    }

    /// Policy equal to `reference` (which must be strictly positive).
    pub fn from_reference(support: Vec<Vec<f64>>, reference: &DiscreteDist) -> Result<Self> {
        if reference.probs().iter().any(|&p| p <= 0.0) {
            return Err(Error::Config("reference must be strictly positive on the support".into()));
        }
        Self::new(support, reference.probs().iter().map(|p| p.ln()).collect())
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.support[0].len()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        let max = self.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + self.logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        self.logits.iter().map(|l| l - lse).collect()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs().into_iter().map(f64::exp).collect()
    }

    pub fn distribution(&self) -> Result<DiscreteDist> {
        DiscreteDist::from_weights(self.probs())
    }

    /// Index of the support point equal to `y`, if any.
    pub fn index_of(&self, y: &[f64]) -> Option<usize> {
        self.support.iter().position(|p| p.as_slice() == y)
    }

    /// Map each triple to `(winner index, loser index)` on the support.
    pub fn index_pairs(&self, batch: &[PreferenceTriple]) -> Result<Vec<(usize, usize)>> {
        batch
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let find = |y: &[f64]| {
                    self.index_of(y).ok_or_else(|| {
                        Error::Usage(format!("triple {k}: point {y:?} is not on the policy support"))
                    })
                };
                Ok((find(&t.y_plus)?, find(&t.y_minus)?))
            })
            .collect()
    }

    /// `beta * log(pi / ref)` at every support point.
    pub fn implicit_rewards(&self, reference: &DiscreteDist, beta: f64) -> Result<Vec<f64>> {
        check_reference(self, reference)?;
        Ok(self
            .log_probs()
            .iter()
            .zip(reference.probs())
            .map(|(lp, r)| beta * (lp - r.ln()))
            .collect())
    }

    /// Draw support points, each displaced uniformly within `±jitter/2` per coordinate.
    pub fn sample(&self, n: usize, seed: u64, jitter: f64) -> Result<Array2<f64>> {
        let cdf: Vec<f64> = self
            .probs()
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect();
        let total = *cdf.last().expect("non-empty");
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let mut rng = rng::stream(seed, "policy-sample", i as u64);
            let u = rng.random::<f64>() * total;
            let k = cdf.partition_point(|c| *c <= u).min(self.len() - 1);
            for (j, v) in self.support[k].iter().enumerate() {
                let shift = if jitter > 0.0 {
                    jitter * (rng.random::<f64>() - 0.5)
                } else {
                    0.0
                };
                row[j] = v + shift;
            }
        }
        Ok(out)
    }

    /// One line per support point: coordinates then the logit.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (p, l) in self.support.iter().zip(&self.logits) {
            let mut fields: Vec<String> = p.iter().map(|v| fmt_f64(*v)).collect();
            fields.push(fmt_f64(*l));
            writeln!(out, "{}", fields.join(" ")).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut support = Vec::new();
        let mut logits = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let vals = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|e| Error::Parse {
                        line: i + 1,
                        msg: format!("bad float {t:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if vals.len() < 2 {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "expected coordinates followed by a logit".into(),
                });
            }
            let (l, p) = vals.split_last().expect("len >= 2");
            support.push(p.to_vec());
            logits.push(*l);
        }
        Self::new(support, logits)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn check_reference(policy: &DiscretePolicy, reference: &DiscreteDist) -> Result<()> {
    if reference.len() != policy.len() {
        return Err(Error::Shape(format!(
            "reference has {} entries, policy support has {}",
            reference.len(),
            policy.len()
        )));
    }
    if let Some(i) = reference.probs().iter().position(|&p| p <= 0.0) {
        return Err(Error::Usage(format!("reference has zero mass at support point {i}")));
    }
    Ok(())
}

/// Win counts `C[a][b]`: how often support point `a` was preferred over `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCounts {
    n: usize,
    counts: Vec<f64>,
    total: f64,
}

impl PairCounts {
    pub fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut counts = vec![0.0; n * n];
        for &(a, b) in pairs {
            if a >= n || b >= n {
                return Err(Error::Usage(format!("pair ({a}, {b}) outside support of size {n}")));
            }
            counts[a * n + b] += 1.0;
        }
        Ok(Self {
            n,
            counts,
            total: pairs.len() as f64,
        })
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    fn nonzero(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, c)| **c > 0.0)
            .map(move |(k, c)| (k / self.n, k % self.n, *c))
    }
}

fn dpo_loss_counts(h: &[f64], counts: &PairCounts) -> f64 {
    counts
        .nonzero()
        .map(|(a, b, c)| c * neg_log_sigmoid(h[a] - h[b]))
        .sum::<f64>()
        / counts.total
}

/// Loss and gradient with respect to the logits. The log-partition terms of
/// winner and loser cancel, so each pair only touches its own two logits.
fn dpo_loss_grad_counts(h: &[f64], beta: f64, counts: &PairCounts) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; h.len()];
    let mut loss = 0.0;
    for (a, b, c) in counts.nonzero() {
        let d = h[a] - h[b];
        loss += c * neg_log_sigmoid(d);
        let g = -c * beta * (1.0 - sigmoid(d));
        grad[a] += g;
        grad[b] -= g;
    }
    let n = counts.total;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

fn check_batch(batch_len: usize) -> Result<()> {
    if batch_len == 0 {
        return Err(Error::Usage("dpo_loss: empty batch".into()));
    }
    Ok(())
}

/// `-mean log sigmoid(beta [log pi/ref (y+) - log pi/ref (y-)])` over triples on the support.
pub fn dpo_loss(policy: &DiscretePolicy, reference: &DiscreteDist, batch: &[PreferenceTriple], beta: f64) -> Result<f64> {
    check_batch(batch.len())?;
    let pairs = policy.index_pairs(batch)?;
    dpo_loss_indexed(policy, reference, &pairs, beta)
}

pub fn dpo_loss_indexed(policy: &DiscretePolicy, reference: &DiscreteDist, pairs: &[(usize, usize)], beta: f64) -> Result<f64> {
    check_batch(pairs.len())?;
    let h = policy.implicit_rewards(reference, beta)?;
    Ok(dpo_loss_counts(&h, &PairCounts::from_pairs(policy.len(), pairs)?))
}

pub fn dpo_loss_and_grad(
    policy: &DiscretePolicy,
    reference: &DiscreteDist,
    pairs: &[(usize, usize)],
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    check_batch(pairs.len())?;
    let h = policy.implicit_rewards(reference, beta)?;
    Ok(dpo_loss_grad_counts(&h, beta, &PairCounts::from_pairs(policy.len(), pairs)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    pub beta: f64,
    /// Full-batch Adam steps over the aggregated pair counts.
    pub epochs: usize,
    pub adam: AdamConfig,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            epochs: 2000,
            adam: AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!("baseline.dpo.beta must be > 0, got {}", self.beta)));
        }
        if self.epochs < 1 {
            return Err(Error::Config("baseline.dpo.epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Train softmax logits by full-batch Adam on the DPO loss, starting at the
/// reference. The trace holds the largest `|h(y+) - h(y-)|` over observed
/// pairs, with `h = beta log(pi/ref)`.
pub fn train_dpo(
    support: Vec<Vec<f64>>,
    reference: &DiscreteDist,
    pairs: &[(usize, usize)],
    cfg: &DpoConfig,
) -> Result<(DiscretePolicy, OverfitTrace)> {
    cfg.validate()?;
    check_batch(pairs.len())?;
    let mut policy = DiscretePolicy::from_reference(support, reference)?;
    let counts = PairCounts::from_pairs(policy.len(), pairs)?;
    let mut adam = AdamState::new(policy.len(), cfg.adam);
    let mut trace = OverfitTrace::default();
    for epoch in 1..=cfg.epochs {
        let h = policy.implicit_rewards(reference, cfg.beta)?;
        let (_, grad) = dpo_loss_grad_counts(&h, cfg.beta, &counts);
        adam.step(&mut policy.logits, &grad)?;
        let h = policy.implicit_rewards(reference, cfg.beta)?;
        let gap = counts
            .nonzero()
            .fold(0.0f64, |m, (a, b, _)| m.max((h[a] - h[b]).abs()));
        trace.push(epoch, gap);
    }
    Ok((policy, trace))
}

/// Regular grid over `[lo, hi]^dim` with `per_axis` points per coordinate,
/// ordered with the last coordinate varying fastest.
pub fn grid_support(lo: f64, hi: f64, per_axis: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    if per_axis < 2 || !(hi > lo) || dim == 0 {
        return Err(Error::Config(format!(
            "grid needs per_axis >= 2, hi > lo, dim >= 1 (got {per_axis}, [{lo}, {hi}], {dim})"
        )));
    }
    let step = (hi - lo) / (per_axis - 1) as f64;
    let axis: Vec<f64> = (0..per_axis).map(|k| lo + step * k as f64).collect();
    let mut points = vec![Vec::new()];
    for _ in 0..dim {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    Ok(points)
}

/// Index of the support point nearest to `y` (first one on ties).
pub fn nearest_index(support: &[Vec<f64>], y: &[f64]) -> usize {
    let d2 = |p: &Vec<f64>| p.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in support.iter().enumerate() {
        let d = d2(p);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Snap each triple's endpoints to their nearest support points.
pub fn snap_pairs(support: &[Vec<f64>], batch: &[PreferenceTriple]) -> Vec<(usize, usize)> {
    batch
        .iter()
        .map(|t| (nearest_index(support, &t.y_plus), nearest_index(support, &t.y_minus)))
        .collect()
}

/// `pi(y) ∝ ref(y) exp(r(y) / beta)`: the KL-regularized optimum for a fixed reward.
pub fn kl_tilt(reference: &DiscreteDist, rewards: &[f64], beta: f64) -> Result<DiscreteDist> {
    if rewards.len() != reference.len() {
        return Err(Error::Shape(format!(
            "{} rewards for a distribution of {} points",
            rewards.len(),
            reference.len()
        )));
    }
    let log_w: Vec<f64> = reference
        .probs()
        .iter()
        .zip(rewards)
        .map(|(p, r)| if *p > 0.0 { p.ln() + r / beta } else { f64::NEG_INFINITY })
        .collect();
    DiscreteDist::from_log_weights(&log_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnflow::Activation;
    use crate::oracle::{rlhf_optimal, PreferenceMatrix};
    use crate::prefdata::{DatasetMetadata, GaussianMixture, PreferenceLabeler, RewardFunction};
    use approx::assert_abs_diff_eq;

    fn dataset(triples: Vec<PreferenceTriple>, y_dim: usize) -> PreferenceDataset {
        let metadata = DatasetMetadata {
            seed: 0,
            n: triples.len(),
            labeler: PreferenceLabeler::deterministic(RewardFunction::eight_gaussians()),
            policy: GaussianMixture::default_reference(),
            context: Default::default(),
            extra: Default::default(),
        };
        PreferenceDataset::new(triples, 0, y_dim, metadata).unwrap()
    }

    fn spec(input: usize, seed: u64) -> MlpSpec {
        MlpSpec::new(input, vec![16, 16], 1, Activation::Tanh, seed).unwrap()
    }

    fn random_triples(n: usize, seed: u64) -> Vec<PreferenceTriple> {
        let mut rng = rng::from_seed(seed);
        (0..n)
            .map(|_| {
                let a: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
                let b: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
                PreferenceTriple::new(vec![], a, b)
            })
            .collect()
    }

    /// Zero the output layer and set its bias so the model is constant.
    fn constant_model(c: f64) -> RewardModel {
        let mut m = RewardModel::init(&spec(2, 1)).unwrap();
        m.net.zero_output_layer();
        let n = m.net.total_count();
        m.net.as_mut_slice()[n - 1] = c;
        m
    }

    #[test]
    fn nll_at_indifference_and_at_large_gap() {
        let batch = random_triples(20, 1);
        assert_abs_diff_eq!(reward_nll(&constant_model(3.0), &batch).unwrap(), 2f64.ln(), epsilon = 1e-15);
        // linear model r(y) = 10 * y_0 on pairs that differ by exactly 1 in y_0
        let lin = MlpSpec::new(2, vec![1], 1, Activation::Tanh, 0).unwrap();
        let mut m = RewardModel::init(&lin).unwrap();
        m.net.as_mut_slice().copy_from_slice(&[1e-3, 0.0, 0.0, 1e4, 0.0]);
        let batch: Vec<_> = (0..5)
            .map(|k| {
                let y = k as f64 * 0.1;
                PreferenceTriple::new(vec![], vec![y + 0.5, 0.0], vec![y - 0.5, 0.0])
            })
            .collect();
        let gaps = m.gaps(&batch).unwrap();
        for g in &gaps {
            assert_abs_diff_eq!(*g, 10.0, epsilon = 1e-4);
        }
        let expect: f64 = gaps.iter().map(|g| -(1.0 / (1.0 + (-g).exp())).ln()).sum::<f64>() / 5.0;
        assert_abs_diff_eq!(reward_nll(&m, &batch).unwrap(), expect, epsilon = 1e-15);
        assert!((expect - 4.54e-5).abs() < 1e-6);
    }

    #[test]
    fn nll_empty_batch_and_shape_errors() {
        let m = constant_model(0.0);
        assert!(matches!(reward_nll(&m, &[]), Err(Error::Usage(_))));
        let bad = vec![PreferenceTriple::new(vec![], vec![0.0; 3], vec![0.0; 3])];
        assert!(matches!(reward_nll(&m, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let batch = random_triples(12, 2);
        let m = RewardModel::init(&spec(2, 3)).unwrap();
        let (_, grad) = reward_nll_and_grad(&m, &batch).unwrap();
        let h = 1e-5;
        for k in 0..m.net.total_count() {
            let mut p = m.clone();
            p.net.as_mut_slice()[k] += h;
            let mut q = m.clone();
            q.net.as_mut_slice()[k] -= h;
            let fd = (reward_nll(&p, &batch).unwrap() - reward_nll(&q, &batch).unwrap()) / (2.0 * h);
            let scale = fd.abs().max(grad[k].abs()).max(1e-6);
            assert!((fd - grad[k]).abs() / scale < 1e-4, "param {k}: fd {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn nll_is_permutation_invariant() {
        let batch = random_triples(30, 4);
        let m = RewardModel::init(&spec(2, 5)).unwrap();
        let mut rev = batch.clone();
        rev.reverse();
        assert_abs_diff_eq!(reward_nll(&m, &batch).unwrap(), reward_nll(&m, &rev).unwrap(), epsilon = 1e-14);
    }

    fn linear_labeled(n: usize, seed: u64, bt: bool) -> (Vec<PreferenceTriple>, Vec<PreferenceTriple>) {
        // ground truth r(y) = y_0 + 0.5 y_1
        let r = |y: &[f64]| y[0] + 0.5 * y[1];
        let mut rng = rng::from_seed(seed + 1000);
        let label = |t: PreferenceTriple, rng: &mut rng::StreamRng| {
            let d = r(&t.y_plus) - r(&t.y_minus);
            let p = if bt { 1.0 / (1.0 + (-d).exp()) } else { (d > 0.0) as u8 as f64 };
            if rng.random::<f64>() < p {
                t
            } else {
                t.swapped()
            }
        };
        let all: Vec<_> = random_triples(n, seed).into_iter().map(|t| label(t, &mut rng)).collect();
        let split = n * 4 / 5;
        (all[..split].to_vec(), all[split..].to_vec())
    }

    #[test]
    fn bradley_terry_fit_beats_chance_on_held_out_pairs() {
        let (train, test) = linear_labeled(1000, 6, true);
        let cfg = RewardTrainConfig {
            epochs: 40,
            batch_size: 64,
            ..Default::default()
        };
        let (m, _) = train_reward(&dataset(train, 2), &spec(2, 7), &cfg).unwrap();
        assert!(reward_nll(&m, &test).unwrap() < 2f64.ln() - 0.05);
    }

    #[test]
    fn deterministic_separable_gap_keeps_growing() {
        let (train, _) = linear_labeled(200, 8, false);
        let cfg = RewardTrainConfig {
            epochs: 200,
            batch_size: 200,
            adam: AdamConfig {
                lr: 1e-2,
                ..Default::default()
            },
            ..Default::default()
        };
        let (_, trace) = train_reward(&dataset(train, 2), &spec(2, 9), &cfg).unwrap();
        let g1 = trace.gap_at(20).unwrap();
        let g10 = trace.gap_at(200).unwrap();
        assert!(g10 >= 2.0 * g1, "gap {g1} -> {g10}");
    }

    #[test]
    fn symmetric_data_learns_indifference() {
        let base = random_triples(100, 10);
        let both: Vec<_> = base.iter().flat_map(|t| [t.clone(), t.swapped()]).collect();
        let cfg = RewardTrainConfig {
            epochs: 100,
            batch_size: 200,
            ..Default::default()
        };
        let (m, _) = train_reward(&dataset(both.clone(), 2), &spec(2, 11), &cfg).unwrap();
        assert!(m.max_gap(&both).unwrap() < 0.1);
    }

    #[test]
    fn swapped_labels_mirror_training() {
        // Negating the output layer maps r to -r; Adam is sign-equivariant per
        // coordinate, so training on swapped labels from the mirrored init
        // stays the exact mirror image.
        let (train, _) = linear_labeled(400, 12, true);
        let swapped: Vec<_> = train.iter().map(|t| t.swapped()).collect();
        let cfg = RewardTrainConfig {
            epochs: 50,
            batch_size: 100,
            ..Default::default()
        };
        let init = RewardModel::init(&spec(2, 13)).unwrap();
        let mut mirrored = init.clone();
        let last = mirrored.net.num_layers() - 1;
        let (w, b) = (mirrored.net.weights(last).len(), mirrored.net.bias(last).len());
        let n = mirrored.net.total_count();
        for v in &mut mirrored.net.as_mut_slice()[n - w - b..] {
            *v = -*v;
        }
        let (a, _) = train_reward_from(&dataset(train.clone(), 2), init, &cfg).unwrap();
        let (b, _) = train_reward_from(&dataset(swapped, 2), mirrored, &cfg).unwrap();
        let ga = a.gaps(&train).unwrap();
        let gb = b.gaps(&train).unwrap();
        let worst = ga.iter().zip(&gb).map(|(x, y)| (x + y).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-9, "max |gap_a + gap_b| = {worst}");
        assert!(ga.iter().map(|g| g.abs()).sum::<f64>() > 1.0);
    }

    fn small_support(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![i as f64]).collect()
    }

    fn ref10() -> DiscreteDist {
        DiscreteDist::from_weights((1..=10).map(|k| 1.0 + (k % 3) as f64).collect()).unwrap()
    }

    #[test]
    fn dpo_loss_indifference_points() {
        let r = ref10();
        let pi = DiscretePolicy::from_reference(small_support(10), &r).unwrap();
        let pairs = vec![(1, 2), (3, 0), (9, 4)];
        assert_abs_diff_eq!(dpo_loss_indexed(&pi, &r, &pairs, 1.0).unwrap(), 2f64.ln(), epsilon = 1e-15);
        let other = DiscretePolicy::new(small_support(10), (0..10).map(|k| k as f64).collect()).unwrap();
        assert_abs_diff_eq!(dpo_loss_indexed(&other, &r, &pairs, 0.0).unwrap(), 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn dpo_loss_rejects_off_support_points() {
        let r = ref10();
        let pi = DiscretePolicy::from_reference(small_support(10), &r).unwrap();
        let bad = vec![PreferenceTriple::new(vec![], vec![0.5], vec![1.0])];
        assert!(matches!(dpo_loss(&pi, &r, &bad, 1.0), Err(Error::Usage(_))));
        let good = vec![PreferenceTriple::new(vec![], vec![2.0], vec![1.0])];
        assert_abs_diff_eq!(dpo_loss(&pi, &r, &good, 1.0).unwrap(), 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn dpo_gradient_matches_finite_differences() {
        let r = ref10();
        let mut rng = rng::from_seed(14);
        let logits: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pi = DiscretePolicy::new(small_support(10), logits).unwrap();
        let pairs: Vec<_> = (0..40).map(|_| (rng.random_range(0..10), rng.random_range(0..10))).collect();
        for beta in [0.3, 1.0, 2.5] {
            let (_, grad) = dpo_loss_and_grad(&pi, &r, &pairs, beta).unwrap();
            let h = 1e-5;
            for k in 0..10 {
                let mut p = pi.clone();
                p.logits[k] += h;
                let mut q = pi.clone();
                q.logits[k] -= h;
                let fd = (dpo_loss_indexed(&p, &r, &pairs, beta).unwrap()
                    - dpo_loss_indexed(&q, &r, &pairs, beta).unwrap())
                    / (2.0 * h);
                let scale = fd.abs().max(grad[k].abs()).max(1e-6);
                assert!((fd - grad[k]).abs() / scale < 1e-4);
            }
        }
    }

    fn bt_pairs(r: &DiscreteDist, rewards: &[f64], n: usize, seed: u64) -> Vec<(usize, usize)> {
        let mut rng = rng::from_seed(seed);
        let dist = rand_distr::weighted::WeightedIndex::new(r.probs()).unwrap();
        (0..n)
            .map(|_| {
                use rand_distr::Distribution;
                let a = dist.sample(&mut rng);
                let b = dist.sample(&mut rng);
                let p = 1.0 / (1.0 + (rewards[b] - rewards[a]).exp());
                if rng.random::<f64>() < p {
                    (a, b)
                } else {
                    (b, a)
                }
            })
            .collect()
    }

    #[test]
    fn dpo_matches_kl_regularized_optimum() {
        let r = ref10();
        let rewards: Vec<f64> = (0..10).map(|k| (k as f64 * 0.7).sin() * 1.5).collect();
        let oracle = rlhf_optimal(&r, &PreferenceMatrix::bradley_terry(&rewards, 1.0).unwrap(), 1.0).unwrap();
        let mut last = f64::INFINITY;
        for n in [1_000, 10_000, 50_000] {
            let pairs = bt_pairs(&r, &rewards, n, 15);
            let (pi, _) = train_dpo(small_support(10), &r, &pairs, &DpoConfig::default()).unwrap();
            let tv = pi.distribution().unwrap().total_variation(&oracle);
            assert!(tv <= last, "n={n}: tv {tv} > {last}");
            last = tv;
        }
        assert!(last <= 0.1);
    }

    #[test]
    fn dpo_on_symmetric_data_stays_at_reference() {
        let r = ref10();
        let pairs: Vec<_> = (0..10).flat_map(|a| (0..10).map(move |b| (a, b))).collect();
        let (pi, _) = train_dpo(small_support(10), &r, &pairs, &DpoConfig::default()).unwrap();
        assert!(pi.distribution().unwrap().total_variation(&r) < 0.05);
    }

    #[test]
    fn dpo_deterministic_labels_concentrate_and_blow_up() {
        let r = ref10();
        // point 9 beats everything; among the rest the larger index wins
        let pairs: Vec<_> = (0..10)
            .flat_map(|a| (0..a).map(move |b| (a, b)))
            .collect();
        let cfg = DpoConfig {
            epochs: 3000,
            ..Default::default()
        };
        let (pi, trace) = train_dpo(small_support(10), &r, &pairs, &cfg).unwrap();
        assert!(pi.probs()[9] > 0.9);
        let g1 = trace.gap_at(300).unwrap();
        let g10 = trace.gap_at(3000).unwrap();
        assert!(g10 >= 2.0 * g1, "gap {g1} -> {g10}");
    }

    #[test]
    fn policy_text_round_trip() {
        let pi = DiscretePolicy::new(grid_support(-1.0, 1.0, 3, 2).unwrap(), (0..9).map(|k| 0.1 * k as f64).collect()).unwrap();
        let back = DiscretePolicy::parse(&pi.to_text()).unwrap();
        assert_eq!(back, pi);
    }

    #[test]
    fn grid_and_snapping() {
        let g = grid_support(0.0, 1.0, 3, 2).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g[1], vec![0.0, 0.5]);
        assert_eq!(nearest_index(&g, &[0.9, 0.1]), 6);
        assert!(grid_support(0.0, 1.0, 1, 2).is_err());
    }

    #[test]
    fn tilt_with_zero_reward_is_reference() {
        let r = ref10();
        assert!(kl_tilt(&r, &[0.0; 10], 1.0).unwrap().total_variation(&r) < 1e-15);
    }

    #[test]
    fn policy_sampling_follows_probabilities() {
        let pi = DiscretePolicy::new(small_support(3), vec![0.0, 0.0, 2f64.ln()]).unwrap();
        let s = pi.sample(8000, 16, 0.0).unwrap();
        let frac2 = s.column(0).iter().filter(|v| **v == 2.0).count() as f64 / 8000.0;
        assert!((frac2 - 0.5).abs() < 0.03);
        assert_eq!(pi.sample(50, 3, 0.5).unwrap(), pi.sample(50, 3, 0.5).unwrap());
    }
}
