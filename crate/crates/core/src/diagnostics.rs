//! Convergence diagnostics: rank-normalized split-R-hat and effective sample size.

use std::io::Write;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::csvfmt::fmt_f64;
use crate::error::{MeldError, Result};
use crate::samplers::MeldedChainOutput;

/// Lower bound reported for R-hat.
pub const RHAT_FLOOR: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosticFlag {
    /// Every draw of every chain is the same value.
    ZeroVariance,
    /// Each chain is constant but chains differ.
    ZeroWithinVariance,
    /// Negatively correlated draws pushed the estimate above the draw count; it was capped.
    Antithetic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostic {
    pub value: f64,
    pub flag: Option<DiagnosticFlag>,
}

impl Diagnostic {
    fn plain(value: f64) -> Self {
        Self { value, flag: None }
    }

    fn flagged(value: f64, flag: DiagnosticFlag) -> Self {
        Self { value, flag: Some(flag) }
    }
}

fn check_chains(chains: &[Vec<f64>], min_chains: usize, min_draws: usize) -> Result<()> {
    if chains.len() < min_chains {
        return Err(MeldError::Diagnostics(format!(
            "need at least {min_chains} chains, got {}",
            chains.len()
        )));
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(MeldError::Diagnostics("chains have different lengths".into()));
    }
    if n < min_draws {
        return Err(MeldError::Diagnostics(format!("need at least {min_draws} draws per chain, got {n}")));
    }
    if chains.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MeldError::Diagnostics("trace has non-finite values".into()));
    }
    Ok(())
}

/// Splits each chain into its first and second half, dropping the middle draw of odd lengths.
pub fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    chains
        .iter()
        .flat_map(|c| {
            let h = c.len() / 2;
            [c[..h].to_vec(), c[c.len() - h..].to_vec()]
        })
        .collect()
}

/// Replaces each value by `Phi^-1((r - 3/8) / (S + 1/4))` of its average rank `r`
/// among all `S` pooled draws.
pub fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut all: Vec<(f64, usize)> = chains.iter().flatten().copied().zip(0..).collect();
    let s = all.len();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[all[k].1] = avg;
        }
        i = j + 1;
    }
    let normal = Normal::standard();
    let mut it = ranks.into_iter();
    chains
        .iter()
        .map(|c| {
            c.iter()
                .map(|_| normal.inverse_cdf((it.next().expect("rank") - 0.375) / (s as f64 + 0.25)))
                .collect()
        })
        .collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// Absolute deviations from the median. The two middle draws of an even
/// count are equidistant from it, so they get exactly the same value rather
/// than whatever rounding makes of `|v - med|`.
fn fold_about_median(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut all: Vec<f64> = chains.iter().flatten().copied().collect();
    all.sort_by(f64::total_cmp);
    let n = all.len();
    let (lo, hi) = (all[(n - 1) / 2], all[n / 2]);
    let med = lo + 0.5 * (hi - lo);
    let half_gap = 0.5 * (hi - lo);
    chains
        .iter()
        .map(|c| c.iter().map(|&v| if v == lo || v == hi { half_gap } else { (v - med).abs() }).collect())
        .collect()
}

/// Linear-interpolation quantile of the pooled draws.
fn quantile(chains: &[Vec<f64>], q: f64) -> f64 {
    let mut all: Vec<f64> = chains.iter().flatten().copied().collect();
    all.sort_by(f64::total_cmp);
    let h = (all.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    all[lo] + (h - lo as f64) * (all[hi] - all[lo])
}

fn basic_rhat(chains: &[Vec<f64>]) -> Diagnostic {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = chains.iter().map(|c| sample_var(c)).sum::<f64>() / chains.len() as f64;
    let b = n * sample_var(&means);
    if w == 0.0 {
        return if b == 0.0 {
            Diagnostic::flagged(1.0, DiagnosticFlag::ZeroVariance)
        } else {
            Diagnostic::flagged(f64::INFINITY, DiagnosticFlag::ZeroWithinVariance)
        };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Diagnostic::plain((var_plus / w).sqrt())
}

/// Rank-normalized split-R-hat: the larger of the bulk and folded values.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<Diagnostic> {
    check_chains(chains, 2, 4)?;
    let split = split_chains(chains);
    let flat = split.iter().flatten();
    let first = split[0][0];
    if flat.clone().all(|&v| v == first) {
        return Ok(Diagnostic::flagged(1.0, DiagnosticFlag::ZeroVariance));
    }
    let raw = basic_rhat(&split);
    if raw.flag.is_some() {
        return Ok(raw);
    }
    let bulk = basic_rhat(&rank_normalize(&split));
    let folded = fold_about_median(&split);
    let tail = basic_rhat(&rank_normalize(&folded));
    for d in [bulk, tail] {
        if d.flag == Some(DiagnosticFlag::ZeroWithinVariance) {
            return Ok(d);
        }
    }
    let v = [bulk, tail]
        .iter()
        .filter(|d| d.flag.is_none())
        .map(|d| d.value)
        .fold(RHAT_FLOOR, f64::max);
    Ok(Diagnostic::plain(v))
}

/// Multi-chain ESS with Geyer's initial positive and monotone sequence truncation.
pub fn ess(chains: &[Vec<f64>]) -> Result<Diagnostic> {
    check_chains(chains, 1, 8)?;
    Ok(ess_unchecked(chains))
}

fn ess_unchecked(chains: &[Vec<f64>]) -> Diagnostic {
    let m = chains.len();
    let n = chains[0].len();
    let total = (m * n) as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let devs: Vec<Vec<f64>> = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|v| v - mu).collect())
        .collect();
    let acov_mean = |t: usize| -> f64 {
        devs.iter()
            .map(|d| d[..n - t].iter().zip(&d[t..]).map(|(a, b)| a * b).sum::<f64>() / n as f64)
            .sum::<f64>()
            / m as f64
    };
    let mean_var = acov_mean(0) * n as f64 / (n - 1) as f64;
    let mut var_plus = mean_var * (n - 1) as f64 / n as f64;
    if m > 1 {
        var_plus += sample_var(&means);
    }
    if var_plus == 0.0 {
        return Diagnostic::flagged(f64::NAN, DiagnosticFlag::ZeroVariance);
    }
    let rho = |t: usize| 1.0 - (mean_var - acov_mean(t)) / var_plus;
    let mut rho_hat = vec![0.0; n + 1];
    rho_hat[0] = 1.0;
    let mut even = 1.0;
    let mut odd = rho(1);
    rho_hat[1] = odd;
    let mut s = 1;
    while s + 4 < n && even + odd > 0.0 {
        even = rho(s + 1);
        odd = rho(s + 2);
        if even + odd >= 0.0 {
            rho_hat[s + 1] = even;
            rho_hat[s + 2] = odd;
        }
        s += 2;
    }
    let max_s = s;
    if even > 0.0 {
        rho_hat[max_s + 1] = even;
    }
    let mut t = 1;
    while t + 3 <= max_s {
        if rho_hat[t + 1] + rho_hat[t + 2] > rho_hat[t - 1] + rho_hat[t] {
            rho_hat[t + 1] = (rho_hat[t - 1] + rho_hat[t]) / 2.0;
            rho_hat[t + 2] = rho_hat[t + 1];
        }
        t += 2;
    }
    let tau = (-1.0 + 2.0 * rho_hat[..=max_s].iter().sum::<f64>() + rho_hat[max_s + 1]).max(1.0 / total.log10());
    let e = total / tau;
    if e > total {
        Diagnostic::flagged(total, DiagnosticFlag::Antithetic)
    } else {
        Diagnostic::plain(e)
    }
}

/// ESS of the rank-normalized split chains.
pub fn ess_bulk(chains: &[Vec<f64>]) -> Result<Diagnostic> {
    check_chains(chains, 1, 8)?;
    let split = split_chains(chains);
    let first = split[0][0];
    if split.iter().flatten().all(|&v| v == first) {
        return Ok(Diagnostic::flagged(f64::NAN, DiagnosticFlag::ZeroVariance));
    }
    Ok(ess_unchecked(&rank_normalize(&split)))
}

/// Smaller of the ESS of the indicators of falling below the 5% and 95% quantiles.
pub fn ess_tail(chains: &[Vec<f64>]) -> Result<Diagnostic> {
    check_chains(chains, 1, 8)?;
    let split = split_chains(chains);
    let mut best: Option<Diagnostic> = None;
    for q in [0.05, 0.95] {
        let cut = quantile(&split, q);
        let ind: Vec<Vec<f64>> = split
            .iter()
            .map(|c| c.iter().map(|&v| f64::from(u8::from(v <= cut))).collect())
            .collect();
        let d = ess_unchecked(&ind);
        best = match best {
            None => Some(d),
            Some(b) if d.value < b.value || b.value.is_nan() => Some(d),
            keep => keep,
        };
    }
    Ok(best.expect("two quantiles"))
}

/// Fraction of consecutive kept draws, over all chains, at which the value changed.
pub fn move_rate(chains: &[Vec<f64>]) -> f64 {
    let (mut moved, mut total) = (0usize, 0usize);
    for c in chains {
        for w in c.windows(2) {
            total += 1;
            moved += usize::from(w[0] != w[1]);
        }
    }
    if total == 0 {
        f64::NAN
    } else {
        moved as f64 / total as f64
    }
}

/// One diagnostics row per output column.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSummary {
    pub parameter: String,
    pub rhat: f64,
    pub ess_bulk: f64,
    pub ess_tail: f64,
    pub acceptance_rate: f64,
}

/// Summarizes every column; values that cannot be computed (one chain, too
/// few draws) are NaN.
pub fn summarize(output: &MeldedChainOutput) -> Vec<ParameterSummary> {
    (0..output.width())
        .map(|j| {
            let traces = output.traces(j);
            ParameterSummary {
                parameter: output.columns[j].clone(),
                rhat: split_rhat(&traces).map_or(f64::NAN, |d| d.value),
                ess_bulk: ess_bulk(&traces).map_or(f64::NAN, |d| d.value),
                ess_tail: ess_tail(&traces).map_or(f64::NAN, |d| d.value),
                acceptance_rate: move_rate(&traces),
            }
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(rows: &[ParameterSummary], mut w: W) -> std::io::Result<()> {
    writeln!(w, "parameter,rhat,ess_bulk,ess_tail,acceptance_rate")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.parameter,
            fmt_f64(r.rhat),
            fmt_f64(r.ess_bulk),
            fmt_f64(r.ess_tail),
            fmt_f64(r.acceptance_rate)
        )?;
    }
    Ok(())
}
