//! Three linked submodels over small finite state spaces, given by explicit
//! probability tables. The end submodels factorize over independent units.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BuiltinModel;
use crate::chain::{replaced_term, ChainModel, PhiBlock, SubmodelSpec, Support, UnitFactorization};
use crate::error::{MeldError, Result};

/// Largest cardinality of any shared block coordinate or psi coordinate.
pub const MAX_CARDINALITY: usize = 6;

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscreteChainParams {
    pub card12: usize,
    pub card23: usize,
    /// Units of submodel 1; `phi12` has one coordinate per unit.
    pub units1: usize,
    pub units3: usize,
    /// Cardinality of the per-unit psi of submodel 1, if it has one.
    pub psi1_card: Option<usize>,
    pub psi2_card: Option<usize>,
    pub psi3_card: Option<usize>,
    /// Seed for the random tables.
    pub table_seed: u64,
    /// Multiplies the joints by random likelihood factors; without it every
    /// likelihood is one.
    pub with_data: bool,
    /// Every table uniform instead of random.
    pub uniform: bool,
}

impl Default for DiscreteChainParams {
    fn default() -> Self {
        Self {
            card12: 2,
            card23: 2,
            units1: 1,
            units3: 1,
            psi1_card: Some(2),
            psi2_card: Some(2),
            psi3_card: Some(2),
            table_seed: 1,
            with_data: true,
            uniform: false,
        }
    }
}

/// Tables of one unit-factorized end submodel. `prior[u][a]` is the prior
/// marginal of unit `u` at block code `a`; `joint[u][a][b]` the unnormalized
/// joint with psi code `b` (a single column when the unit has no psi).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndTables {
    pub card: usize,
    pub psi_card: Option<usize>,
    pub prior: Vec<Vec<f64>>,
    pub joint: Vec<Vec<Vec<f64>>>,
}

/// Tables of the middle submodel over all codes of `(phi12, phi23)`, indexed
/// mixed-radix with the first `phi12` coordinate most significant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiddleTables {
    pub psi_card: Option<usize>,
    pub marginal: Vec<f64>,
    pub joint: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteTables {
    pub end1: EndTables,
    pub middle: MiddleTables,
    pub end3: EndTables,
}

fn weights(rng: &mut ChaCha8Rng, n: usize, uniform: bool) -> Vec<f64> {
    if uniform {
        vec![1.0; n]
    } else {
        (0..n).map(|_| rng.random_range(0.2..1.0)).collect()
    }
}

fn normalized(mut w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

fn random_end(rng: &mut ChaCha8Rng, units: usize, card: usize, psi_card: Option<usize>, p: &DiscreteChainParams) -> EndTables {
    let k = psi_card.unwrap_or(1);
    let mut prior = Vec::new();
    let mut joint = Vec::new();
    for _ in 0..units {
        let pr = normalized(weights(rng, card, p.uniform));
        let j = pr
            .iter()
            .map(|&pa| {
                let cond = normalized(weights(rng, k, p.uniform));
                let like = weights(rng, k, p.uniform || !p.with_data);
                cond.iter().zip(&like).map(|(c, l)| pa * c * l).collect()
            })
            .collect();
        prior.push(pr);
        joint.push(j);
    }
    EndTables {
        card,
        psi_card,
        prior,
        joint,
    }
}

impl DiscreteTables {
    /// Seeded random (or uniform) tables for `params`.
    pub fn generate(params: &DiscreteChainParams) -> Result<Self> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.table_seed);
        let end1 = random_end(&mut rng, params.units1, params.card12, params.psi1_card, params);
        let n_phi = params.card12.pow(params.units1 as u32) * params.card23.pow(params.units3 as u32);
        let k = params.psi2_card.unwrap_or(1);
        let marginal = normalized(weights(&mut rng, n_phi, params.uniform));
        let joint = marginal
            .iter()
            .map(|&pa| {
                let cond = normalized(weights(&mut rng, k, params.uniform));
                let like = weights(&mut rng, k, params.uniform || !params.with_data);
                cond.iter().zip(&like).map(|(c, l)| pa * c * l).collect()
            })
            .collect();
        let end3 = random_end(&mut rng, params.units3, params.card23, params.psi3_card, params);
        Ok(Self {
            end1,
            middle: MiddleTables {
                psi_card: params.psi2_card,
                marginal,
                joint,
            },
            end3,
        })
    }

    fn middle_phi_states(&self) -> usize {
        self.end1.card.pow(self.end1.prior.len() as u32) * self.end3.card.pow(self.end3.prior.len() as u32)
    }

    /// Mixed-radix index of `(phi12, phi23)` into the middle tables.
    pub fn middle_index(&self, phi: &[f64]) -> Option<usize> {
        let u1 = self.end1.prior.len();
        let mut idx = 0usize;
        for (i, &x) in phi.iter().enumerate() {
            let card = if i < u1 { self.end1.card } else { self.end3.card };
            let code = code_of(x, card)?;
            idx = idx * card + code;
        }
        Some(idx)
    }

    /// One-block marginals of the middle prior: `(over phi12, over phi23)`,
    /// each indexed mixed-radix over its block's coordinates.
    pub fn middle_block_marginals(&self) -> (Vec<f64>, Vec<f64>) {
        let n12 = self.end1.card.pow(self.end1.prior.len() as u32);
        let n23 = self.end3.card.pow(self.end3.prior.len() as u32);
        let mut a = vec![0.0; n12];
        let mut b = vec![0.0; n23];
        for (i, &p) in self.middle.marginal.iter().enumerate() {
            a[i / n23] += p;
            b[i % n23] += p;
        }
        (a, b)
    }

    fn validate(&self) -> Result<()> {
        for (name, end) in [("submodel 1", &self.end1), ("submodel 3", &self.end3)] {
            check_card(end.card, name)?;
            if let Some(k) = end.psi_card {
                check_card(k, name)?;
            }
            let k = end.psi_card.unwrap_or(1);
            if end.prior.is_empty() || end.joint.len() != end.prior.len() {
                return Err(MeldError::Configuration(format!("{name}: one prior and joint table per unit required")));
            }
            for (u, (pr, j)) in end.prior.iter().zip(&end.joint).enumerate() {
                check_distribution(pr, end.card, &format!("{name} unit {u} prior"))?;
                if j.len() != end.card || j.iter().any(|r| r.len() != k) {
                    return Err(MeldError::Configuration(format!("{name} unit {u}: joint table has the wrong shape")));
                }
                check_nonnegative(j.iter().flatten(), &format!("{name} unit {u} joint"))?;
            }
        }
        let n = self.middle_phi_states();
        check_distribution(&self.middle.marginal, n, "submodel 2 prior")?;
        let k = self.middle.psi_card.unwrap_or(1);
        if let Some(k) = self.middle.psi_card {
            check_card(k, "submodel 2")?;
        }
        if self.middle.joint.len() != n || self.middle.joint.iter().any(|r| r.len() != k) {
            return Err(MeldError::Configuration("submodel 2: joint table has the wrong shape".into()));
        }
        check_nonnegative(self.middle.joint.iter().flatten(), "submodel 2 joint")?;
        Ok(())
    }
}

fn check_card(card: usize, name: &str) -> Result<()> {
    if !(2..=MAX_CARDINALITY).contains(&card) {
        return Err(MeldError::Configuration(format!(
            "{name}: cardinality {card} outside 2..={MAX_CARDINALITY}"
        )));
    }
    Ok(())
}

fn check_nonnegative<'a>(values: impl IntoIterator<Item = &'a f64>, what: &str) -> Result<()> {
    if values.into_iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(MeldError::Configuration(format!("{what} has negative or non-finite entries")));
    }
    Ok(())
}

fn check_distribution(p: &[f64], len: usize, what: &str) -> Result<()> {
    if p.len() != len {
        return Err(MeldError::Configuration(format!("{what} needs {len} entries, got {}", p.len())));
    }
    check_nonnegative(p, what)?;
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOLERANCE {
        return Err(MeldError::Configuration(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

fn code_of(x: f64, card: usize) -> Option<usize> {
    if x >= 0.0 && x.fract() == 0.0 && (x as usize) < card {
        Some(x as usize)
    } else {
        None
    }
}

fn ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

impl DiscreteChainParams {
    pub fn validate(&self) -> Result<()> {
        check_card(self.card12, "phi12")?;
        check_card(self.card23, "phi23")?;
        for (name, c) in [("psi1", self.psi1_card), ("psi2", self.psi2_card), ("psi3", self.psi3_card)] {
            if let Some(c) = c {
                check_card(c, name)?;
            }
        }
        if self.units1 == 0 || self.units3 == 0 {
            return Err(MeldError::Configuration("each end submodel needs at least one unit".into()));
        }
        Ok(())
    }
}

fn end_spec(name: &str, label: &str, left: bool, psi_label: &str, t: &EndTables) -> SubmodelSpec {
    let units = t.prior.len();
    let has_psi = t.psi_card.is_some();
    let t = Arc::new(t.clone());
    let unit_joint = {
        let t = t.clone();
        move |u: usize, phi: &[f64], psi: &[f64]| -> f64 {
            let a = match code_of(phi[0], t.card) {
                Some(a) => a,
                None => return f64::NEG_INFINITY,
            };
            let b = if has_psi {
                match code_of(psi[0], t.psi_card.unwrap_or(1)) {
                    Some(b) => b,
                    None => return f64::NEG_INFINITY,
                }
            } else {
                0
            };
            ln(t.joint[u][a][b])
        }
    };
    let unit_marg = {
        let t = t.clone();
        move |u: usize, phi: &[f64]| -> f64 { code_of(phi[0], t.card).map_or(f64::NEG_INFINITY, |a| ln(t.prior[u][a])) }
    };
    let psi_per = usize::from(has_psi);
    let (uj, um) = (Arc::new(unit_joint), Arc::new(unit_marg));
    let (uj2, um2) = (uj.clone(), um.clone());
    let joint = move |phi: &[f64], psi: &[f64]| -> f64 {
        (0..units)
            .map(|u| uj2(u, &phi[u..=u], &psi[u * psi_per..(u + 1) * psi_per]))
            .sum()
    };
    let marg = move |phi: &[f64]| -> f64 { (0..units).map(|u| um2(u, &phi[u..=u])).sum() };
    let uf = UnitFactorization::new(units, 1, psi_per).with_unit_terms(
        move |u, phi, psi| uj(u, phi, psi),
        move |u, phi| um(u, phi),
    );
    let mut s = SubmodelSpec::new(name, joint).prior_marginal(marg).units(uf);
    s = if left { s.left(label, units) } else { s.right(label, units) };
    if let Some(k) = t.psi_card {
        s = s.psi(psi_label, vec![Support::Discrete(k); units]);
    }
    s
}

/// Builds the discrete chain from explicit tables. A zero in the middle prior
/// where the middle joint is positive is reported as a model inconsistency.
pub fn discrete_chain_from_tables(tables: &DiscreteTables) -> Result<BuiltinModel> {
    tables.validate()?;
    for (i, row) in tables.middle.joint.iter().enumerate() {
        for &j in row {
            replaced_term(1, ln(j), ln(tables.middle.marginal[i]))?;
        }
    }
    let units1 = tables.end1.prior.len();
    let units3 = tables.end3.prior.len();
    let s1 = end_spec("discrete-1", "phi12", false, "psi1", &tables.end1);
    let s3 = end_spec("discrete-3", "phi23", true, "psi3", &tables.end3);

    let t = Arc::new(tables.clone());
    let has_psi2 = tables.middle.psi_card.is_some();
    let psi2_card = tables.middle.psi_card.unwrap_or(1);
    let (tj, tm) = (t.clone(), t.clone());
    let mut s2 = SubmodelSpec::new("discrete-2", move |phi, psi| {
        let Some(i) = tj.middle_index(phi) else {
            return f64::NEG_INFINITY;
        };
        let b = if has_psi2 {
            match code_of(psi[0], psi2_card) {
                Some(b) => b,
                None => return f64::NEG_INFINITY,
            }
        } else {
            0
        };
        ln(tj.middle.joint[i][b])
    })
    .left("phi12", units1)
    .right("phi23", units3)
    .prior_marginal(move |phi| tm.middle_index(phi).map_or(f64::NEG_INFINITY, |i| ln(tm.middle.marginal[i])));
    if let Some(k) = tables.middle.psi_card {
        s2 = s2.psi("psi2", vec![Support::Discrete(k)]);
    }

    let model = ChainModel::validated(
        vec![
            PhiBlock::discrete("phi12", units1, tables.end1.card),
            PhiBlock::discrete("phi23", units3, tables.end3.card),
        ],
        vec![s1, s2, s3],
    )?;
    let (m12, m23) = tables.middle_block_marginals();
    let block_index = |phi: &[f64], card: usize| -> Option<usize> {
        phi.iter().try_fold(0usize, |acc, &x| code_of(x, card).map(|c| acc * card + c))
    };
    let (c12, c23) = (tables.end1.card, tables.end3.card);
    Ok(BuiltinModel {
        model,
        block_marginals: vec![
            (1, 0, Arc::new(move |x: &[f64]| block_index(x, c12).map_or(f64::NEG_INFINITY, |i| ln(m12[i])))),
            (1, 1, Arc::new(move |x: &[f64]| block_index(x, c23).map_or(f64::NEG_INFINITY, |i| ln(m23[i])))),
        ],
    })
}

/// Seeded random (or uniform) discrete chain.
pub fn builtin_discrete_chain(params: &DiscreteChainParams) -> Result<BuiltinModel> {
    discrete_chain_from_tables(&DiscreteTables::generate(params)?)
}
