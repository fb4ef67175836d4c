//! Exact enumeration of discrete melded models, used as a reference for the samplers.

use std::io::Write;

use crate::chain::{log_melded_density, ChainModel, PhiVector, Support};
use crate::csvfmt::fmt_f64;
use crate::error::{MeldError, Result};
use crate::pooling::{log_sum_exp, PooledPrior};
use crate::samplers::MeldedChainOutput;

/// Largest state space [`enumerate_melded_posterior`] will walk.
pub const MAX_STATES: u128 = 1_000_000;

/// A normalized probability table over every joint code of `columns`,
/// indexed mixed-radix with the first column most significant.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactTable {
    pub columns: Vec<String>,
    pub cards: Vec<usize>,
    pub probs: Vec<f64>,
    /// Log of the normalizing sum of the unnormalized density.
    pub log_norm: f64,
}

fn index_of(cards: &[usize], x: &[f64]) -> Option<usize> {
    let mut idx = 0usize;
    for (&c, &v) in cards.iter().zip(x) {
        if !(v >= 0.0 && v.fract() == 0.0 && (v as usize) < c) {
            return None;
        }
        idx = idx * c + v as usize;
    }
    Some(idx)
}

fn state_of(cards: &[usize], mut idx: usize) -> Vec<f64> {
    let mut out = vec![0.0; cards.len()];
    for (o, &c) in out.iter_mut().zip(cards).rev() {
        *o = (idx % c) as f64;
        idx /= c;
    }
    out
}

impl ExactTable {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn state(&self, idx: usize) -> Vec<f64> {
        state_of(&self.cards, idx)
    }

    pub fn index_of(&self, x: &[f64]) -> Option<usize> {
        index_of(&self.cards, x)
    }

    /// Marginal table over the columns `cols`, in the order given.
    pub fn marginal(&self, cols: &[usize]) -> Vec<f64> {
        let sub: Vec<usize> = cols.iter().map(|&c| self.cards[c]).collect();
        let mut out = vec![0.0; sub.iter().product()];
        for (i, &p) in self.probs.iter().enumerate() {
            let s = self.state(i);
            let x: Vec<f64> = cols.iter().map(|&c| s[c]).collect();
            out[index_of(&sub, &x).expect("valid code")] += p;
        }
        out
    }

    /// Writes `columns..., probability` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{},probability", self.columns.join(","))?;
        for (i, &p) in self.probs.iter().enumerate() {
            let s: Vec<String> = self.state(i).iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{},{}", s.join(","), fmt_f64(p))?;
        }
        Ok(())
    }
}

fn discrete_cards(columns: &[String], supports: &[Support]) -> Result<Vec<usize>> {
    supports
        .iter()
        .zip(columns)
        .map(|(s, name)| {
            s.cardinality().ok_or_else(|| {
                MeldError::Unsupported(format!("enumeration needs discrete coordinates; `{name}` is continuous"))
            })
        })
        .collect()
}

/// Normalizes `exp(log_density)` over every code of the given discrete columns.
pub fn enumerate_table(
    columns: Vec<String>,
    supports: &[Support],
    log_density: impl Fn(&[f64]) -> Result<f64>,
) -> Result<ExactTable> {
    let cards = discrete_cards(&columns, supports)?;
    let states = cards.iter().try_fold(1u128, |acc, &c| acc.checked_mul(c as u128)).unwrap_or(u128::MAX);
    if states > MAX_STATES {
        return Err(MeldError::StateSpaceTooLarge {
            states,
            limit: MAX_STATES,
        });
    }
    let n = states as usize;
    let mut logs = Vec::with_capacity(n);
    for i in 0..n {
        let v = log_density(&state_of(&cards, i))?;
        if v.is_nan() || v == f64::INFINITY {
            return Err(MeldError::Numerical(format!("log density {v} at state {i}")));
        }
        logs.push(v);
    }
    let log_norm = log_sum_exp(&logs);
    if !log_norm.is_finite() {
        return Err(MeldError::Numerical("density is zero on every state".into()));
    }
    let probs = logs.iter().map(|l| (l - log_norm).exp()).collect();
    Ok(ExactTable {
        columns,
        cards,
        probs,
        log_norm,
    })
}

/// Exact melded posterior over all `(phi, psi)` codes, columns as in
/// [`ChainModel::column_names`].
pub fn enumerate_melded_posterior(model: &ChainModel, pool: &PooledPrior) -> Result<ExactTable> {
    enumerate_table(model.column_names(), &model.column_supports(), |x| {
        let (phi, psi) = model.unflatten(x);
        log_melded_density(model, pool, &phi, &psi)
    })
}

/// Exact normalized pooled prior over all `phi` codes.
pub fn enumerate_pooled_prior(model: &ChainModel, pool: &PooledPrior) -> Result<ExactTable> {
    let columns: Vec<String> = model.phi_blocks().iter().flat_map(|b| b.coordinate_names()).collect();
    let supports: Vec<Support> = model.phi_blocks().iter().flat_map(|b| b.support.iter().copied()).collect();
    let dims: Vec<usize> = model.phi_blocks().iter().map(|b| b.dim()).collect();
    enumerate_table(columns, &supports, |x| {
        let mut off = 0;
        let blocks = dims
            .iter()
            .map(|&d| {
                off += d;
                x[off - d..off].to_vec()
            })
            .collect();
        pool.log_density(&PhiVector(blocks))
    })
}

/// `0.5 * sum |p - q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "tables of different size");
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Relative frequencies of the codes of columns `cols` over all kept draws.
pub fn empirical_table(output: &MeldedChainOutput, cards: &[usize], cols: &[usize]) -> Result<Vec<f64>> {
    let sub: Vec<usize> = cols.iter().map(|&c| cards[c]).collect();
    let mut counts = vec![0.0; sub.iter().product()];
    let mut n = 0usize;
    for row in output.rows() {
        let x: Vec<f64> = cols.iter().map(|&c| row[c]).collect();
        let i = index_of(&sub, &x)
            .ok_or_else(|| MeldError::Numerical(format!("sampled state {x:?} is not a valid code")))?;
        counts[i] += 1.0;
        n += 1;
    }
    if n == 0 {
        return Err(MeldError::EmptyStore("sampler output has no draws".into()));
    }
    counts.iter_mut().for_each(|c| *c /= n as f64);
    Ok(counts)
}

/// Total variation between the sampler's joint state frequencies and `table`.
pub fn sampler_tv(output: &MeldedChainOutput, table: &ExactTable) -> Result<f64> {
    if output.columns != table.columns {
        return Err(MeldError::Structure("sampler output and exact table have different columns".into()));
    }
    let cols: Vec<usize> = (0..table.cards.len()).collect();
    Ok(total_variation(&empirical_table(output, &table.cards, &cols)?, &table.probs))
}
