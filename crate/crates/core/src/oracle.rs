//! Exact computations on finite domains: preference marginals, the closed-form
//! KL-regularized optimum, the marginal objective, and the fixed-point
//! iteration of repeated marginalization with a convergence certificate.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prefdata::{fmt_f64, logistic};
use crate::rng;

/// Probability vector over indices `0..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DiscreteDist {
    probs: Vec<f64>,
}

impl TryFrom<Vec<f64>> for DiscreteDist {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        DiscreteDist::new(v)
    }
}

impl From<DiscreteDist> for Vec<f64> {
    fn from(d: DiscreteDist) -> Self {
        d.probs
    }
}

impl DiscreteDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Config("distribution needs at least one entry".into()));
        }
        if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Config(format!(
                "probability {i} is {}, must be finite and >= 0",
                probs[i]
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "probabilities sum to {total}, expected 1 within 1e-12"
            )));
        }
        Ok(Self { probs })
    }

    /// Normalize non-negative weights. An all-zero vector is an error.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Degenerate(
                "unnormalized weights must be finite and >= 0".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Degenerate(
                "unnormalized weights are all zero".into(),
            ));
        }
        Ok(Self {
            probs: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    /// Normalize `exp(log_weights)` stably; `-inf` entries get zero mass.
    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::Degenerate(format!(
                "log-weights have no finite maximum ({max})"
            )));
        }
        Self::from_weights(log_weights.iter().map(|l| (l - max).exp()).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Self::from_weights(vec![1.0; n]).expect("n >= 1")
    }

    pub fn point_mass(n: usize, at: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[at] = 1.0;
        Self { probs }
    }

    /// Uniform over `indices` within a domain of size `n`.
    pub fn uniform_on(n: usize, indices: &[usize]) -> Result<Self> {
        let mut w = vec![0.0; n];
        for &i in indices {
            w[i] = 1.0;
        }
        Self::from_weights(w)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn l1(&self, other: &Self) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    pub fn total_variation(&self, other: &Self) -> f64 {
        0.5 * self.l1(other)
    }

    pub fn mass_on(&self, indices: &[usize]) -> f64 {
        indices.iter().map(|&i| self.probs[i]).sum()
    }

    /// Draw from Dirichlet(1, ..., 1).
    pub fn dirichlet_uniform<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        loop {
            let w: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
            if let Ok(d) = Self::from_weights(w) {
                return d;
            }
        }
    }
}

/// Exact pairwise preferences `P[i][j] = P(y_i > y_j)` on a finite domain.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl PreferenceMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || data.len() != n * n {
            return Err(Error::Config(format!(
                "preference matrix needs {n}x{n} entries, got {}",
                data.len()
            )));
        }
        for i in 0..n {
            if data[i * n + i] != 0.5 {
                return Err(Error::Config(format!(
                    "preference matrix diagonal ({i},{i}) is {}, must be 0.5",
                    data[i * n + i]
                )));
            }
            for j in 0..n {
                let p = data[i * n + j];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!(
                        "preference ({i},{j}) = {p} outside [0, 1]"
                    )));
                }
                if (p + data[j * n + i] - 1.0).abs() > 1e-12 {
                    return Err(Error::Config(format!(
                        "P({i},{j}) + P({j},{i}) = {} != 1",
                        p + data[j * n + i]
                    )));
                }
            }
        }
        Ok(Self { n, data })
    }

    /// Build from `f(i, j)` for `i < j`; the rest follows from antisymmetry.
    pub fn from_upper<F: FnMut(usize, usize) -> f64>(n: usize, mut f: F) -> Result<Self> {
        let mut data = vec![0.5; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let p = f(i, j);
                data[i * n + j] = p;
                data[j * n + i] = 1.0 - p;
            }
        }
        Self::new(n, data)
    }

    pub fn constant_half(n: usize) -> Self {
        Self {
            n,
            data: vec![0.5; n * n],
        }
    }

    /// `P[i][j] = 1` iff `i > j`: a strict total order with the last index on top.
    pub fn total_order(n: usize) -> Self {
        Self::from_upper(n, |_, _| 0.0).expect("valid total order")
    }

    pub fn bradley_terry(rewards: &[f64], temperature: f64) -> Result<Self> {
        Self::from_upper(rewards.len(), |i, j| {
            logistic(temperature * (rewards[i] - rewards[j]))
        })
    }

    pub fn deterministic(rewards: &[f64]) -> Result<Self> {
        Self::from_upper(rewards.len(), |i, j| {
            if rewards[i] > rewards[j] {
                1.0
            } else if rewards[i] < rewards[j] {
                0.0
            } else {
                0.5
            }
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// The matrix with roles swapped: `Q[i][j] = P[j][i]`.
    pub fn transposed(&self) -> Self {
        let n = self.n;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = self.data[j * n + i];
            }
        }
        Self { n, data }
    }

    /// `f[i] = sum_j w[j] P[i][j]`: expected win probability of `i` against `w`.
    pub fn expected_win(&self, w: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let row = &self.data[i * self.n..(i + 1) * self.n];
                row.iter().zip(w).map(|(p, q)| p * q).sum()
            })
            .collect()
    }

    /// `g[j] = sum_i w[i] P[i][j]`: expected loss probability of `j` against `w`.
    pub fn expected_loss(&self, w: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n];
        for i in 0..self.n {
            let wi = w[i];
            for (gj, p) in g.iter_mut().zip(&self.data[i * self.n..(i + 1) * self.n]) {
                *gj += wi * p;
            }
        }
        g
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

fn check_dims(reference: &DiscreteDist, prefs: &PreferenceMatrix) -> Result<()> {
    if reference.len() != prefs.len() {
        return Err(Error::Shape(format!(
            "distribution has {} entries, preference matrix is {}x{}",
            reference.len(),
            prefs.len(),
            prefs.len()
        )));
    }
    Ok(())
}

/// Marginal of rejected samples: `p0[j] ∝ ref[j] * sum_i ref[i] P[i][j]`.
pub fn marginal_negative(reference: &DiscreteDist, prefs: &PreferenceMatrix) -> Result<DiscreteDist> {
    check_dims(reference, prefs)?;
    let g = prefs.expected_loss(reference.probs());
    DiscreteDist::from_weights(reference.probs().iter().zip(g).map(|(r, g)| r * g).collect())
}

/// Marginal of preferred samples: `p1[i] ∝ ref[i] * sum_j ref[j] P[i][j]`.
pub fn marginal_positive(reference: &DiscreteDist, prefs: &PreferenceMatrix) -> Result<DiscreteDist> {
    check_dims(reference, prefs)?;
    let f = prefs.expected_win(reference.probs());
    DiscreteDist::from_weights(reference.probs().iter().zip(f).map(|(r, f)| r * f).collect())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Closed-form maximizer of `E_pi[E_ref logit P(y > y')] - beta KL(pi || ref)`:
/// `pi*(y) ∝ ref(y) exp(E_ref[logit P(y > y')] / beta)`.
pub fn rlhf_optimal(reference: &DiscreteDist, prefs: &PreferenceMatrix, beta: f64) -> Result<DiscreteDist> {
    check_dims(reference, prefs)?;
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::Config(format!("beta must be finite and > 0, got {beta}")));
    }
    let n = prefs.len();
    for i in 0..n {
        for j in 0..n {
            let p = prefs.get(i, j);
            if p <= 0.0 || p >= 1.0 {
                return Err(Error::DeterministicPreference { i, j, p });
            }
        }
    }
    let r = reference.probs();
    let log_w: Vec<f64> = (0..n)
        .map(|i| {
            if r[i] == 0.0 {
                return f64::NEG_INFINITY;
            }
            let score: f64 = (0..n).map(|j| r[j] * logit(prefs.get(i, j))).sum();
            r[i].ln() + score / beta
        })
        .collect();
    DiscreteDist::from_log_weights(&log_w)
}

/// `E_pi[log sum_j ref[j] P[y > j]] - KL(pi || ref)` with `0 log 0 = 0`.
pub fn marginal_objective(pi: &DiscreteDist, reference: &DiscreteDist, prefs: &PreferenceMatrix) -> Result<f64> {
    check_dims(reference, prefs)?;
    check_dims(pi, prefs)?;
    let f = prefs.expected_win(reference.probs());
    let mut value = 0.0;
    for (i, (&p, &r)) in pi.probs().iter().zip(reference.probs()).enumerate() {
        if p == 0.0 {
            continue;
        }
        if r == 0.0 {
            return Err(Error::InfiniteKl { index: i, mass: p });
        }
        value += p * (f[i].ln() - (p / r).ln());
    }
    Ok(value)
}

/// One step of `p <- normalize(p * P p)`.
pub fn marginal_step(p: &DiscreteDist, prefs: &PreferenceMatrix) -> Result<DiscreteDist> {
    marginal_positive(p, prefs)
}

/// Apply [`marginal_step`] `n` times starting from `reference`.
pub fn iterate_marginal(reference: &DiscreteDist, prefs: &PreferenceMatrix, n: usize) -> Result<DiscreteDist> {
    check_dims(reference, prefs)?;
    let mut p = reference.clone();
    for _ in 0..n {
        p = marginal_step(&p, prefs)?;
    }
    Ok(p)
}

/// Indices whose expected win probability against `reference` is within `tol` of the maximum.
pub fn argmax_set(reference: &DiscreteDist, prefs: &PreferenceMatrix, tol: f64) -> Vec<usize> {
    let f = prefs.expected_win(reference.probs());
    let max = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    f.iter()
        .enumerate()
        .filter(|(_, v)| max - **v <= tol)
        .map(|(i, _)| i)
        .collect()
}

/// Tolerance used to decide ties in the argmax set.
pub const ARGMAX_TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub iterations_used: usize,
    pub final_l1_to_limit: f64,
    pub limit: DiscreteDist,
    pub converged: bool,
    pub tolerance: f64,
    pub argmax: Vec<usize>,
    /// Mass on the argmax set never dropped by more than 1e-12 between iterates.
    pub argmax_mass_nondecreasing: bool,
    pub final_iterate: DiscreteDist,
}

/// Iterate the marginalization from `reference` until the L1 distance to the
/// uniform distribution on the argmax set is at most `tol`, or `max_iters`.
pub fn check_theorem2(
    reference: &DiscreteDist,
    prefs: &PreferenceMatrix,
    tol: f64,
    max_iters: usize,
) -> Result<ConvergenceReport> {
    check_dims(reference, prefs)?;
    if !(tol > 0.0) {
        return Err(Error::Usage(format!("tolerance must be > 0, got {tol}")));
    }
    let argmax = argmax_set(reference, prefs, ARGMAX_TIE_TOL);
    let limit = DiscreteDist::uniform_on(reference.len(), &argmax)?;
    let mut p = reference.clone();
    let mut dist = p.l1(&limit);
    let mut mass = p.mass_on(&argmax);
    let mut monotone = true;
    let mut iterations = 0;
    while dist > tol && iterations < max_iters {
        p = marginal_step(&p, prefs)?;
        iterations += 1;
        let m = p.mass_on(&argmax);
        if m < mass - 1e-12 {
            monotone = false;
        }
        mass = m;
        dist = p.l1(&limit);
    }
    Ok(ConvergenceReport {
        iterations_used: iterations,
        final_l1_to_limit: dist,
        converged: dist <= tol,
        limit,
        tolerance: tol,
        argmax,
        argmax_mass_nondecreasing: monotone,
        final_iterate: p,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub draws: usize,
    /// Smallest `objective(p1) - objective(q)` over all draws.
    pub min_margin: f64,
    /// Draws with `objective(q) > objective(p1) + slack`.
    pub violations: usize,
    pub objective_at_marginal: f64,
    pub passed: bool,
}

/// Compare the objective at the positive marginal against `draws` Dirichlet(1) candidates.
pub fn check_theorem1(
    reference: &DiscreteDist,
    prefs: &PreferenceMatrix,
    draws: usize,
    seed: u64,
    slack: f64,
) -> Result<Theorem1Report> {
    let p1 = marginal_positive(reference, prefs)?;
    let best = marginal_objective(&p1, reference, prefs)?;
    let mut rng = rng::from_seed(seed);
    let mut min_margin = f64::INFINITY;
    let mut violations = 0;
    for _ in 0..draws {
        let q = DiscreteDist::dirichlet_uniform(reference.len(), &mut rng);
        let margin = best - marginal_objective(&q, reference, prefs)?;
        min_margin = min_margin.min(margin);
        if margin < -slack {
            violations += 1;
        }
    }
    Ok(Theorem1Report {
        draws,
        min_margin,
        violations,
        objective_at_marginal: best,
        passed: violations == 0,
    })
}

/// A reference distribution with a preference matrix on the same domain.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleInstance {
    pub reference: DiscreteDist,
    pub prefs: PreferenceMatrix,
}

impl OracleInstance {
    pub fn new(reference: DiscreteDist, prefs: PreferenceMatrix) -> Result<Self> {
        check_dims(&reference, &prefs)?;
        Ok(Self { reference, prefs })
    }

    /// Uniform reference over three points with `y2 > y1 > y0`.
    pub fn three_point_total_order() -> Self {
        Self::new(DiscreteDist::uniform(3), PreferenceMatrix::total_order(3)).expect("valid")
    }

    pub fn constant_half_uniform(n: usize) -> Self {
        Self::new(DiscreteDist::uniform(n), PreferenceMatrix::constant_half(n)).expect("valid")
    }

    /// Dirichlet(1) reference with independent uniform preferences above the diagonal.
    pub fn random_general(n: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "oracle-general", n as u64);
        let reference = DiscreteDist::dirichlet_uniform(n, &mut rng);
        let prefs = PreferenceMatrix::from_upper(n, |_, _| {
            // keep strictly inside (0, 1)
            rng.random_range(1e-6..1.0 - 1e-6)
        })
        .expect("valid");
        Self { reference, prefs }
    }

    /// Dirichlet(1) reference with Bradley-Terry preferences from uniform
    /// rewards on `[0, 3]`, resampled until the best reward leads the runner-up
    /// by at least `min_gap`, so the argmax is unique.
    pub fn random_unique_argmax(n: usize, seed: u64, min_gap: f64) -> Self {
        let mut rng = rng::stream(seed, "oracle-unique", n as u64);
        let reference = DiscreteDist::dirichlet_uniform(n, &mut rng);
        let rewards = loop {
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
            let mut sorted = r.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            if n < 2 || sorted[0] - sorted[1] >= min_gap {
                break r;
            }
        };
        let prefs = PreferenceMatrix::bradley_terry(&rewards, 1.0).expect("valid");
        Self { reference, prefs }
    }

    /// Plain-text form: `n`, then the reference probabilities, then `n` rows of `P`.
    pub fn to_text(&self) -> String {
        let n = self.prefs.len();
        let mut out = format!("{n}\n");
        let join = |vals: &[f64]| vals.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" ");
        writeln!(out, "{}", join(self.reference.probs())).unwrap();
        for i in 0..n {
            writeln!(out, "{}", join(&self.prefs.as_slice()[i * n..(i + 1) * n])).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (lineno, first) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty instance file".into(),
        })?;
        let n: usize = first.parse().map_err(|e| Error::Parse {
            line: lineno,
            msg: format!("bad size {first:?}: {e}"),
        })?;
        let mut row = |what: &str| -> Result<Vec<f64>> {
            let (lineno, l) = lines.next().ok_or(Error::Parse {
                line: lineno,
                msg: format!("missing {what}"),
            })?;
            let vals = l
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|e| Error::Parse {
                        line: lineno,
                        msg: format!("bad float {t:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != n {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("{what}: expected {n} values, found {}", vals.len()),
                });
            }
            Ok(vals)
        };
        let reference = DiscreteDist::new(row("reference probabilities")?).map_err(|e| Error::Parse {
            line: 2,
            msg: e.to_string(),
        })?;
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            data.extend(row(&format!("preference row {i}"))?);
        }
        let prefs = PreferenceMatrix::new(n, data).map_err(|e| Error::Parse {
            line: 0,
            msg: e.to_string(),
        })?;
        Self::new(reference, prefs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn close(a: &DiscreteDist, b: &[f64], tol: f64) {
        for (x, y) in a.probs().iter().zip(b) {
            assert_abs_diff_eq!(*x, *y, epsilon = tol);
        }
    }

    #[test]
    fn constant_half_marginals_equal_reference() {
        let r = DiscreteDist::new(vec![0.2, 0.5, 0.3]).unwrap();
        let p = PreferenceMatrix::constant_half(3);
        close(&marginal_negative(&r, &p).unwrap(), r.probs(), 1e-15);
        close(&marginal_positive(&r, &p).unwrap(), r.probs(), 1e-15);
    }

    #[test]
    fn three_point_marginals() {
        let inst = OracleInstance::three_point_total_order();
        // column sums f- = (5/6, 1/2, 1/6), row sums f+ = (1/6, 1/2, 5/6)
        assert_eq!(inst.prefs.get(2, 0), 1.0);
        assert_eq!(inst.prefs.get(0, 2), 0.0);
        let p0 = marginal_negative(&inst.reference, &inst.prefs).unwrap();
        let p1 = marginal_positive(&inst.reference, &inst.prefs).unwrap();
        close(&p0, &[5.0 / 9.0, 3.0 / 9.0, 1.0 / 9.0], 1e-12);
        close(&p1, &[1.0 / 9.0, 3.0 / 9.0, 5.0 / 9.0], 1e-12);
    }

    #[test]
    fn point_mass_is_preserved() {
        let r = DiscreteDist::point_mass(4, 2);
        let p = OracleInstance::random_general(4, 1).prefs;
        assert_eq!(marginal_negative(&r, &p).unwrap(), r);
        assert_eq!(marginal_positive(&r, &p).unwrap(), r);
    }

    #[test]
    fn positive_is_negative_of_transpose() {
        let inst = OracleInstance::random_general(6, 3);
        let a = marginal_positive(&inst.reference, &inst.prefs).unwrap();
        let b = marginal_negative(&inst.reference, &inst.prefs.transposed()).unwrap();
        close(&a, b.probs(), 1e-14);
    }

    #[test]
    fn marginals_normalize_by_one_half() {
        // sum_ij ref_i ref_j P[i][j] = 1/2 for any valid instance
        let inst = OracleInstance::random_general(7, 4);
        let f = inst.prefs.expected_win(inst.reference.probs());
        let z: f64 = inst.reference.probs().iter().zip(&f).map(|(r, f)| r * f).sum();
        assert_abs_diff_eq!(z, 0.5, epsilon = 1e-15);
        assert!(matches!(DiscreteDist::from_weights(vec![0.0, 0.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn rlhf_optimum_limits() {
        let r = DiscreteDist::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let half = PreferenceMatrix::constant_half(4);
        for beta in [1e-3, 1.0, 1e3] {
            close(&rlhf_optimal(&r, &half, beta).unwrap(), r.probs(), 1e-15);
        }
        let bt = PreferenceMatrix::bradley_terry(&[0.0, 1.0, 0.5, -0.3], 1.0).unwrap();
        let wide = rlhf_optimal(&r, &bt, 1e9).unwrap();
        assert!(wide.total_variation(&r) < 1e-8);
        let sharp = rlhf_optimal(&r, &bt, 1e-3).unwrap();
        let scores: Vec<f64> = (0..4)
            .map(|i| (0..4).map(|j| r.probs()[j] * logit(bt.get(i, j))).sum())
            .collect();
        let best = (0..4).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        assert!(sharp.total_variation(&DiscreteDist::point_mass(4, best)) < 1e-6);
    }

    #[test]
    fn rlhf_rejects_deterministic_preferences() {
        let inst = OracleInstance::three_point_total_order();
        assert!(matches!(
            rlhf_optimal(&inst.reference, &inst.prefs, 1.0),
            Err(Error::DeterministicPreference { .. })
        ));
    }

    #[test]
    fn rlhf_invariant_to_reward_shift() {
        // Bradley-Terry from r and from r + c give the same matrix, hence the same optimum.
        let r = DiscreteDist::new(vec![0.25, 0.25, 0.5]).unwrap();
        let a = PreferenceMatrix::bradley_terry(&[0.1, 0.7, -0.2], 1.0).unwrap();
        let b = PreferenceMatrix::bradley_terry(&[5.1, 5.7, 4.8], 1.0).unwrap();
        let pa = rlhf_optimal(&r, &a, 0.5).unwrap();
        let pb = rlhf_optimal(&r, &b, 0.5).unwrap();
        assert!(pa.total_variation(&pb) < 1e-12);
    }

    #[test]
    fn objective_values() {
        let r = DiscreteDist::new(vec![0.3, 0.7]).unwrap();
        let half = PreferenceMatrix::constant_half(2);
        assert_abs_diff_eq!(marginal_objective(&r, &r, &half).unwrap(), 0.5f64.ln(), epsilon = 1e-15);
        let r0 = DiscreteDist::new(vec![1.0, 0.0]).unwrap();
        let pi = DiscreteDist::new(vec![0.5, 0.5]).unwrap();
        assert!(matches!(marginal_objective(&pi, &r0, &half), Err(Error::InfiniteKl { index: 1, .. })));
    }

    #[test]
    fn marginal_maximizes_objective() {
        for seed in 0..10 {
            let inst = OracleInstance::random_general(10, seed);
            let rep = check_theorem1(&inst.reference, &inst.prefs, 200, seed, 1e-9).unwrap();
            assert!(rep.passed && rep.min_margin > 0.0, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn iterate_base_cases() {
        let inst = OracleInstance::random_general(5, 8);
        assert_eq!(iterate_marginal(&inst.reference, &inst.prefs, 0).unwrap(), inst.reference);
        assert_eq!(
            iterate_marginal(&inst.reference, &inst.prefs, 1).unwrap(),
            marginal_positive(&inst.reference, &inst.prefs).unwrap()
        );
    }

    #[test]
    fn three_point_iterates_concentrate_on_top() {
        let inst = OracleInstance::three_point_total_order();
        assert_eq!(argmax_set(&inst.reference, &inst.prefs, 0.0), vec![2]);
        let rep = check_theorem2(&inst.reference, &inst.prefs, 1e-8, 10_000).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.limit, DiscreteDist::point_mass(3, 2));
        assert!(rep.argmax_mass_nondecreasing);
    }

    #[test]
    fn argmax_sets() {
        let r = DiscreteDist::uniform(4);
        assert_eq!(argmax_set(&r, &PreferenceMatrix::constant_half(4), 0.0), vec![0, 1, 2, 3]);
        let tied = PreferenceMatrix::bradley_terry(&[0.0, 2.0, 2.0, 1.0], 1.0).unwrap();
        assert_eq!(argmax_set(&r, &tied, ARGMAX_TIE_TOL), vec![1, 2]);
    }

    #[test]
    fn constant_half_uniform_is_already_converged() {
        let inst = OracleInstance::constant_half_uniform(5);
        let rep = check_theorem2(&inst.reference, &inst.prefs, 1e-8, 100).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations_used, 0);
    }

    #[test]
    fn tied_winners_converge_to_uniform_tie() {
        // rows 1 and 2 are identical and dominate; ref puts equal mass on them
        let r = DiscreteDist::new(vec![0.4, 0.2, 0.2, 0.2]).unwrap();
        let p = PreferenceMatrix::bradley_terry(&[0.0, 2.0, 2.0, 1.0], 1.0).unwrap();
        let rep = check_theorem2(&r, &p, 1e-8, 10_000).unwrap();
        assert!(rep.converged, "{rep:?}");
        close(&rep.limit, &[0.0, 0.5, 0.5, 0.0], 0.0);
    }

    #[test]
    fn unique_argmax_instances_converge() {
        for seed in 0..10 {
            let inst = OracleInstance::random_unique_argmax(20, seed, 0.05);
            let rep = check_theorem2(&inst.reference, &inst.prefs, 1e-8, 10_000).unwrap();
            assert!(rep.converged && rep.argmax.len() == 1 && rep.argmax_mass_nondecreasing, "seed {seed}");
        }
    }

    #[test]
    fn instance_text_round_trip() {
        let inst = OracleInstance::random_general(4, 2);
        let text = inst.to_text();
        assert_eq!(OracleInstance::parse(&text).unwrap(), inst);
        assert_eq!(OracleInstance::parse(&text).unwrap().to_text(), text);
    }

    #[test]
    fn instance_parser_validates() {
        let bad_sum = "2\n0.5 0.6\n0.5 0.5\n0.5 0.5\n";
        assert!(matches!(OracleInstance::parse(bad_sum), Err(Error::Parse { line: 2, .. })));
        let bad_diag = "2\n0.5 0.5\n0.4 0.6\n0.4 0.5\n";
        assert!(OracleInstance::parse(bad_diag).is_err());
        let short = "3\n0.2 0.3 0.5\n0.5 0.5 0.5\n0.5 0.5\n";
        assert!(matches!(OracleInstance::parse(short), Err(Error::Parse { line: 4, .. })));
        let asym = "2\n0.5 0.5\n0.5 0.9\n0.9 0.5\n";
        assert!(OracleInstance::parse(asym).is_err());
    }
}
