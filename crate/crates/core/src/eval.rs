//! Metrics over sample clouds and discrete distributions.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{ArrayView1, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::DiscreteDist;
use crate::prefdata::{fmt_f64, PreferenceLabeler, RewardFunction};
use crate::rng;

pub fn mean_reward(samples: ArrayView2<'_, f64>, reward: &RewardFunction) -> Result<f64> {
    if samples.nrows() == 0 {
        return Err(Error::Usage("mean_reward: no samples".into()));
    }
    let total: f64 = samples
        .rows()
        .into_iter()
        .map(|row| match row.as_slice() {
            Some(y) => reward.eval(y),
            None => reward.eval(&row.to_vec()),
        })
        .sum();
    Ok(total / samples.nrows() as f64)
}

fn lex_cmp(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

fn check_same_dim(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "sample dims differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(())
}

/// Credit to `a` from one labeled comparison against `b`: 1, 0, or 1/2 when
/// the points coincide. The labeler always sees the lexicographically smaller
/// point first and draws from the stream for index `i`, so swapping the
/// arguments flips the credit exactly.
fn pair_credit(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, labeler: &PreferenceLabeler, seed: u64, i: usize) -> f64 {
    let (first, second, a_first) = match lex_cmp(a, b) {
        Ordering::Equal => return 0.5,
        Ordering::Less => (a, b, true),
        Ordering::Greater => (b, a, false),
    };
    let p = labeler.preference_prob(
        first.as_slice().expect("standard layout"),
        second.as_slice().expect("standard layout"),
    );
    let u: f64 = rng::stream(seed, "win-rate", i as u64).random();
    let first_wins = u < p;
    if first_wins == a_first {
        1.0
    } else {
        0.0
    }
}

/// Fraction of index-paired comparisons in which the labeler prefers `a[i]` over `b[i]`.
pub fn win_rate(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    labeler: &PreferenceLabeler,
    seed: u64,
) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(Error::Usage(format!(
            "win_rate needs equal sample counts, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    if a.nrows() == 0 {
        return Err(Error::Usage("win_rate: no samples".into()));
    }
    check_same_dim(a, b)?;
    let a = a.as_standard_layout();
    let b = b.as_standard_layout();
    let credits: Vec<f64> = (0..a.nrows())
        .into_par_iter()
        .map(|i| pair_credit(a.row(i), b.row(i), labeler, seed, i))
        .collect();
    Ok(credits.iter().sum::<f64>() / a.nrows() as f64)
}

fn sorted_rows(a: ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = a.rows().into_iter().map(|r| r.to_vec()).collect();
    rows.sort_by(|x, y| lex_cmp(ArrayView1::from(x), ArrayView1::from(y)));
    rows
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// `mean over (i, j) of |x_i - y_j|`, summed row by row in a fixed order.
fn mean_cross_distance(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    let row_sums: Vec<f64> = xs
        .par_iter()
        .map(|x| ys.iter().map(|y| dist(x, y)).sum::<f64>())
        .collect();
    row_sums.iter().sum::<f64>() / (xs.len() as f64 * ys.len() as f64)
}

/// V-statistic `2 E|A - B| - E|A - A'| - E|B - B'|`.
///
/// Both clouds are sorted and put in a canonical order first, so the value is
/// exactly symmetric and exactly zero for identical multisets.
pub fn energy_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Usage("energy_distance: empty sample set".into()));
    }
    check_same_dim(a, b)?;
    let mut sa = sorted_rows(a);
    let mut sb = sorted_rows(b);
    let set_order = sa
        .iter()
        .zip(&sb)
        .map(|(x, y)| lex_cmp(ArrayView1::from(x), ArrayView1::from(y)))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(sa.len().cmp(&sb.len()));
    if set_order == Ordering::Greater {
        std::mem::swap(&mut sa, &mut sb);
    }
    let ab = mean_cross_distance(&sa, &sb);
    let aa = mean_cross_distance(&sa, &sa);
    let bb = mean_cross_distance(&sb, &sb);
    Ok((2.0 * ab - aa - bb).max(0.0))
}

/// `sum p log(p / q)` with `0 log 0 = 0`.
pub fn discrete_kl(p: &DiscreteDist, q: &DiscreteDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "distributions have {} and {} entries",
            p.len(),
            q.len()
        )));
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.probs().iter().zip(q.probs()).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::InfiniteKl { index: i, mass: pi });
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub mean_reward: f64,
    pub win_rate_vs_reference: f64,
    pub energy_distance_to_positive: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl MethodMetrics {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.win_rate_vs_reference) {
            return Err(Error::Numerical {
                step: 0,
                msg: format!("win rate {} outside [0, 1]", self.win_rate_vs_reference),
            });
        }
        if !(self.energy_distance_to_positive >= 0.0) {
            return Err(Error::Numerical {
                step: 0,
                msg: format!("energy distance {} is negative", self.energy_distance_to_positive),
            });
        }
        if self.n_samples < 1 {
            return Err(Error::Usage("metrics need at least one sample".into()));
        }
        Ok(())
    }
}

/// Everything needed to score a sample cloud against the reference and the preferred samples.
pub struct EvalContext<'a> {
    pub reference_samples: ArrayView2<'a, f64>,
    pub positives: ArrayView2<'a, f64>,
    pub labeler: &'a PreferenceLabeler,
    pub seed: u64,
}

impl EvalContext<'_> {
    pub fn score(&self, samples: ArrayView2<'_, f64>) -> Result<MethodMetrics> {
        let m = MethodMetrics {
            mean_reward: mean_reward(samples, &self.labeler.reward)?,
            win_rate_vs_reference: win_rate(samples, self.reference_samples, self.labeler, self.seed)?,
            energy_distance_to_positive: energy_distance(samples, self.positives)?,
            n_samples: samples.nrows(),
            seed: self.seed,
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub methods: BTreeMap<String, MethodMetrics>,
}

impl MetricsReport {
    pub fn insert(&mut self, name: impl Into<String>, metrics: MethodMetrics) -> Result<()> {
        metrics.validate()?;
        self.methods.insert(name.into(), metrics);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&MethodMetrics> {
        self.methods.get(name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        for m in r.methods.values() {
            m.validate()?;
        }
        Ok(r)
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("method,mean_reward,win_rate_vs_reference,energy_distance_to_positive,n_samples,seed\n");
        for (name, m) in &self.methods {
            writeln!(
                out,
                "{name},{},{},{},{},{}",
                fmt_f64(m.mean_reward),
                fmt_f64(m.win_rate_vs_reference),
                fmt_f64(m.energy_distance_to_positive),
                m.n_samples,
                m.seed
            )
            .unwrap();
        }
        out
    }
}
