//! Chains of submodels linked by shared-quantity blocks, and the chained
//! melded log density built from them.
//!
//! Submodel `m` (0-based here, 1-based in messages) touches block `m - 1` on
//! its left and block `m` on its right, where those exist. Its shared
//! quantity vector is the concatenation of the left and right block values.

use std::collections::HashSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{MeldError, Result};
use crate::gaussian::GaussianDensity;
use crate::pooling::PooledPrior;

/// Log density over a single argument vector.
pub type LogDensityFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Log joint density `(phi_m, psi_m) -> log p_m(phi_m, psi_m, Y_m)` with data bound in.
pub type LogJointFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
/// Per-unit log term `(unit, phi slice, psi slice)`.
pub type UnitLogJointFn = Arc<dyn Fn(usize, &[f64], &[f64]) -> f64 + Send + Sync>;
/// Per-unit log term `(unit, phi slice)`.
pub type UnitLogDensityFn = Arc<dyn Fn(usize, &[f64]) -> f64 + Send + Sync>;

/// Support of a single coordinate. Discrete coordinates hold integer codes
/// `0..cardinality` stored as `f64`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Support {
    Real,
    Positive,
    Discrete(usize),
}

impl Support {
    pub fn contains(&self, x: f64) -> bool {
        match *self {
            Support::Real => x.is_finite(),
            Support::Positive => x.is_finite() && x > 0.0,
            Support::Discrete(k) => x >= 0.0 && x < k as f64 && x.fract() == 0.0,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Support::Discrete(_))
    }

    pub fn cardinality(&self) -> Option<usize> {
        match *self {
            Support::Discrete(k) => Some(k),
            _ => None,
        }
    }
}

/// A shared-quantity block `phi_{m∩m+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiBlock {
    pub label: String,
    pub support: Vec<Support>,
}

impl PhiBlock {
    pub fn new(label: impl Into<String>, support: Vec<Support>) -> Self {
        Self {
            label: label.into(),
            support,
        }
    }

    pub fn real(label: impl Into<String>, dim: usize) -> Self {
        Self::new(label, vec![Support::Real; dim])
    }

    pub fn discrete(label: impl Into<String>, dim: usize, cardinality: usize) -> Self {
        Self::new(label, vec![Support::Discrete(cardinality); dim])
    }

    pub fn dim(&self) -> usize {
        self.support.len()
    }

    pub fn is_continuous(&self) -> bool {
        self.support.iter().all(|s| !s.is_discrete())
    }

    /// Column names for the block's coordinates.
    pub fn coordinate_names(&self) -> Vec<String> {
        coordinate_names(&self.label, self.dim())
    }
}

pub(crate) fn coordinate_names(label: &str, dim: usize) -> Vec<String> {
    if dim == 1 {
        vec![label.to_string()]
    } else {
        (0..dim).map(|i| format!("{label}[{i}]")).collect()
    }
}

/// Values of all shared blocks, in chain order.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiVector(pub Vec<Vec<f64>>);

/// Values of the submodel-specific parameters `psi_1 .. psi_M` (any may be empty).
#[derive(Debug, Clone, PartialEq)]
pub struct PsiVector(pub Vec<Vec<f64>>);

impl PhiVector {
    pub fn block(&self, b: usize) -> &[f64] {
        &self.0[b]
    }
}

impl PsiVector {
    pub fn part(&self, m: usize) -> &[f64] {
        &self.0[m]
    }
}

/// How a submodel sees one of its blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockView {
    pub label: String,
    pub dim: usize,
}

/// Declares that a single-block submodel factorizes into `units` independent
/// units, unit `u` owning the contiguous slices
/// `phi[u * phi_per_unit ..]` and `psi[u * psi_per_unit ..]`.
#[derive(Clone)]
pub struct UnitFactorization {
    pub units: usize,
    pub phi_per_unit: usize,
    pub psi_per_unit: usize,
    pub unit_log_joint: Option<UnitLogJointFn>,
    pub unit_log_prior_marginal: Option<UnitLogDensityFn>,
}

impl UnitFactorization {
    pub fn new(units: usize, phi_per_unit: usize, psi_per_unit: usize) -> Self {
        Self {
            units,
            phi_per_unit,
            psi_per_unit,
            unit_log_joint: None,
            unit_log_prior_marginal: None,
        }
    }

    pub fn with_unit_terms(
        mut self,
        log_joint: impl Fn(usize, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
        log_prior_marginal: impl Fn(usize, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.unit_log_joint = Some(Arc::new(log_joint));
        self.unit_log_prior_marginal = Some(Arc::new(log_prior_marginal));
        self
    }

    pub fn phi_range(&self, unit: usize) -> std::ops::Range<usize> {
        unit * self.phi_per_unit..(unit + 1) * self.phi_per_unit
    }

    pub fn psi_range(&self, unit: usize) -> std::ops::Range<usize> {
        unit * self.psi_per_unit..(unit + 1) * self.psi_per_unit
    }
}

impl fmt::Debug for UnitFactorization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UnitFactorization")
            .field("units", &self.units)
            .field("phi_per_unit", &self.phi_per_unit)
            .field("psi_per_unit", &self.psi_per_unit)
            .finish()
    }
}

/// One submodel `p_m(phi_m, psi_m, Y_m)` with its data already bound.
pub struct SubmodelSpec {
    name: String,
    left: Option<BlockView>,
    right: Option<BlockView>,
    psi_support: Vec<Support>,
    psi_label: String,
    log_joint: LogJointFn,
    log_prior_marginal: Option<LogDensityFn>,
    unit_factorization: Option<UnitFactorization>,
    prior_summary: Option<GaussianDensity>,
    joint_calls: AtomicU64,
    marginal_calls: AtomicU64,
}

impl fmt::Debug for SubmodelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SubmodelSpec")
            .field("name", &self.name)
            .field("left", &self.left)
            .field("right", &self.right)
            .field("psi_support", &self.psi_support)
            .field("has_prior_marginal", &self.log_prior_marginal.is_some())
            .field("unit_factorization", &self.unit_factorization)
            .finish()
    }
}

impl SubmodelSpec {
    pub fn new(
        name: impl Into<String>,
        log_joint: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        let name = name.into();
        Self {
            psi_label: format!("psi_{name}"),
            name,
            left: None,
            right: None,
            psi_support: Vec::new(),
            log_joint: Arc::new(log_joint),
            log_prior_marginal: None,
            unit_factorization: None,
            prior_summary: None,
            joint_calls: AtomicU64::new(0),
            marginal_calls: AtomicU64::new(0),
        }
    }

    pub fn left(mut self, label: impl Into<String>, dim: usize) -> Self {
        self.left = Some(BlockView {
            label: label.into(),
            dim,
        });
        self
    }

    pub fn right(mut self, label: impl Into<String>, dim: usize) -> Self {
        self.right = Some(BlockView {
            label: label.into(),
            dim,
        });
        self
    }

    /// Declares the submodel-specific parameters and the column label used for them.
    pub fn psi(mut self, label: impl Into<String>, support: Vec<Support>) -> Self {
        self.psi_label = label.into();
        self.psi_support = support;
        self
    }

    pub fn prior_marginal(
        mut self,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.log_prior_marginal = Some(Arc::new(f));
        self
    }

    pub fn units(mut self, factorization: UnitFactorization) -> Self {
        self.unit_factorization = Some(factorization);
        self
    }

    /// Gaussian summary of the prior marginal over `phi_m`, used for default
    /// proposal scales and the normal approximation.
    pub fn prior_summary(mut self, g: GaussianDensity) -> Self {
        self.prior_summary = Some(g);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn left_view(&self) -> Option<&BlockView> {
        self.left.as_ref()
    }

    pub fn right_view(&self) -> Option<&BlockView> {
        self.right.as_ref()
    }

    pub fn phi_dim(&self) -> usize {
        self.left.as_ref().map_or(0, |b| b.dim) + self.right.as_ref().map_or(0, |b| b.dim)
    }

    pub fn psi_dim(&self) -> usize {
        self.psi_support.len()
    }

    pub fn psi_support(&self) -> &[Support] {
        &self.psi_support
    }

    pub fn psi_label(&self) -> &str {
        &self.psi_label
    }

    pub fn psi_names(&self) -> Vec<String> {
        coordinate_names(&self.psi_label, self.psi_dim())
    }

    pub fn unit_factorization(&self) -> Option<&UnitFactorization> {
        self.unit_factorization.as_ref()
    }

    pub fn summary(&self) -> Option<&GaussianDensity> {
        self.prior_summary.as_ref()
    }

    pub fn has_prior_marginal(&self) -> bool {
        self.log_prior_marginal.is_some()
    }

    pub fn prior_marginal_fn(&self) -> Option<LogDensityFn> {
        self.log_prior_marginal.clone()
    }

    /// `log p_m(phi_m, psi_m, Y_m)`; counted.
    pub fn log_joint(&self, phi_m: &[f64], psi_m: &[f64]) -> f64 {
        self.joint_calls.fetch_add(1, Ordering::Relaxed);
        (self.log_joint)(phi_m, psi_m)
    }

    /// `log p_m(phi_m)`; counted.
    pub fn log_prior_marginal(&self, phi_m: &[f64]) -> Result<f64> {
        let f = self.log_prior_marginal.as_ref().ok_or_else(|| {
            MeldError::Configuration(format!("submodel `{}` has no prior marginal evaluator", self.name))
        })?;
        self.marginal_calls.fetch_add(1, Ordering::Relaxed);
        Ok(f(phi_m))
    }

    pub fn joint_calls(&self) -> u64 {
        self.joint_calls.load(Ordering::Relaxed)
    }

    pub fn marginal_calls(&self) -> u64 {
        self.marginal_calls.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.joint_calls.store(0, Ordering::Relaxed);
        self.marginal_calls.store(0, Ordering::Relaxed);
    }

    /// Compares the full joint and prior marginal against the sums of their
    /// declared per-unit terms at one point. Returns the largest absolute
    /// discrepancy.
    pub fn unit_factorization_discrepancy(&self, phi_m: &[f64], psi_m: &[f64]) -> Result<f64> {
        let uf = self.unit_factorization.as_ref().ok_or_else(|| {
            MeldError::Configuration(format!("submodel `{}` declares no unit factorization", self.name))
        })?;
        let (uj, um) = match (&uf.unit_log_joint, &uf.unit_log_prior_marginal) {
            (Some(j), Some(m)) => (j, m),
            _ => {
                return Err(MeldError::Configuration(format!(
                    "submodel `{}` declares no per-unit terms",
                    self.name
                )))
            }
        };
        let mut joint_sum = 0.0;
        let mut marg_sum = 0.0;
        for u in 0..uf.units {
            joint_sum += uj(u, &phi_m[uf.phi_range(u)], &psi_m[uf.psi_range(u)]);
            marg_sum += um(u, &phi_m[uf.phi_range(u)]);
        }
        let full_joint = (self.log_joint)(phi_m, psi_m);
        let full_marg = self.log_prior_marginal.as_ref().map_or(marg_sum, |f| f(phi_m));
        Ok(log_gap(full_joint, joint_sum).max(log_gap(full_marg, marg_sum)))
    }
}

fn log_gap(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs()
    }
}

/// An ordered chain of `M >= 2` submodels and its `M - 1` shared blocks.
#[derive(Debug)]
pub struct ChainModel {
    phi_blocks: Vec<PhiBlock>,
    submodels: Vec<SubmodelSpec>,
}

/// Result of [`validate_chain`]; empty iff the model is usable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.contains(needle))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.violations.join("; "))
    }
}

impl ChainModel {
    /// Assembles a chain without checking it; see [`validate_chain`].
    pub fn new(phi_blocks: Vec<PhiBlock>, submodels: Vec<SubmodelSpec>) -> Self {
        Self {
            phi_blocks,
            submodels,
        }
    }

    /// Assembles a chain and fails if [`validate_chain`] reports anything.
    pub fn validated(phi_blocks: Vec<PhiBlock>, submodels: Vec<SubmodelSpec>) -> Result<Self> {
        let model = Self::new(phi_blocks, submodels);
        let report = validate_chain(&model);
        if report.is_ok() {
            Ok(model)
        } else {
            Err(MeldError::Structure(report.to_string()))
        }
    }

    /// Number of submodels `M`.
    pub fn len(&self) -> usize {
        self.submodels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.submodels.is_empty()
    }

    pub fn phi_blocks(&self) -> &[PhiBlock] {
        &self.phi_blocks
    }

    pub fn submodels(&self) -> &[SubmodelSpec] {
        &self.submodels
    }

    pub fn submodel(&self, m: usize) -> &SubmodelSpec {
        &self.submodels[m]
    }

    /// Block indices touched by submodel `m`, left first.
    pub fn touched_blocks(&self, m: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(2);
        if m > 0 {
            out.push(m - 1);
        }
        if m + 1 < self.len() {
            out.push(m);
        }
        out
    }

    /// `phi_m`: concatenation of the blocks submodel `m` touches.
    pub fn phi_for(&self, m: usize, phi: &PhiVector) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.submodels[m].phi_dim());
        for b in self.touched_blocks(m) {
            out.extend_from_slice(&phi.0[b]);
        }
        out
    }

    pub fn reset_counters(&self) {
        for s in &self.submodels {
            s.reset_counters();
        }
    }

    pub fn joint_calls(&self) -> Vec<u64> {
        self.submodels.iter().map(SubmodelSpec::joint_calls).collect()
    }

    /// Checks that `phi` and `psi` have the block and submodel dimensions of this chain.
    pub fn check_state(&self, phi: &PhiVector, psi: &PsiVector) -> Result<()> {
        if phi.0.len() != self.phi_blocks.len() {
            return Err(MeldError::DimensionMismatch {
                what: "number of phi blocks".into(),
                expected: self.phi_blocks.len(),
                got: phi.0.len(),
            });
        }
        for (b, (v, block)) in phi.0.iter().zip(&self.phi_blocks).enumerate() {
            if v.len() != block.dim() {
                return Err(MeldError::DimensionMismatch {
                    what: format!("phi block {} (`{}`)", b + 1, block.label),
                    expected: block.dim(),
                    got: v.len(),
                });
            }
        }
        if psi.0.len() != self.submodels.len() {
            return Err(MeldError::DimensionMismatch {
                what: "number of psi parts".into(),
                expected: self.submodels.len(),
                got: psi.0.len(),
            });
        }
        for (m, (v, s)) in psi.0.iter().zip(&self.submodels).enumerate() {
            if v.len() != s.psi_dim() {
                return Err(MeldError::DimensionMismatch {
                    what: format!("psi part of submodel {}", m + 1),
                    expected: s.psi_dim(),
                    got: v.len(),
                });
            }
        }
        Ok(())
    }

    /// `log p_m(phi_m, psi_m, Y_m) - log p_m(phi_m)` under the `-inf` policy
    /// of [`replaced_term`].
    pub fn log_replaced(&self, m: usize, phi_m: &[f64], psi_m: &[f64]) -> Result<f64> {
        let s = &self.submodels[m];
        let joint = s.log_joint(phi_m, psi_m);
        if joint == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        let marg = s.log_prior_marginal(phi_m)?;
        replaced_term(m, joint, marg)
    }

    /// Column names of the flattened `(phi, psi)` state.
    pub fn column_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .phi_blocks
            .iter()
            .flat_map(PhiBlock::coordinate_names)
            .collect();
        for s in &self.submodels {
            out.extend(s.psi_names());
        }
        out
    }

    /// Supports of the flattened `(phi, psi)` state, matching [`Self::column_names`].
    pub fn column_supports(&self) -> Vec<Support> {
        let mut out: Vec<Support> = self
            .phi_blocks
            .iter()
            .flat_map(|b| b.support.iter().copied())
            .collect();
        for s in &self.submodels {
            out.extend_from_slice(s.psi_support());
        }
        out
    }

    pub fn flatten(&self, phi: &PhiVector, psi: &PsiVector) -> Vec<f64> {
        phi.0.iter().chain(psi.0.iter()).flatten().copied().collect()
    }

    pub fn unflatten(&self, flat: &[f64]) -> (PhiVector, PsiVector) {
        let mut offset = 0;
        let mut take = |n: usize| {
            let v = flat[offset..offset + n].to_vec();
            offset += n;
            v
        };
        let phi = self.phi_blocks.iter().map(|b| take(b.dim())).collect();
        let psi = self.submodels.iter().map(|s| take(s.psi_dim())).collect();
        (PhiVector(phi), PsiVector(psi))
    }
}

/// Applies the `-inf` policy to one marginally replaced term
/// `log p_m(phi_m, psi_m, Y_m) - log p_m(phi_m)`.
///
/// A `-inf` joint makes the term `-inf` whatever the marginal. A finite
/// joint over a `-inf` marginal is a model inconsistency. NaN or `+inf` on
/// either side is a numerical failure.
pub fn replaced_term(m: usize, joint: f64, marg: f64) -> Result<f64> {
    if joint.is_nan() || marg.is_nan() {
        return Err(MeldError::Numerical(format!(
            "submodel {} returned NaN (joint {joint}, marginal {marg})",
            m + 1
        )));
    }
    if joint == f64::INFINITY || marg == f64::INFINITY {
        return Err(MeldError::Numerical(format!(
            "submodel {} returned +inf (joint {joint}, marginal {marg})",
            m + 1
        )));
    }
    if joint == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    if marg == f64::NEG_INFINITY {
        return Err(MeldError::ModelInconsistency { submodel: m + 1 });
    }
    Ok(joint - marg)
}

/// Lists every structural problem with `model`.
pub fn validate_chain(model: &ChainModel) -> ValidationReport {
    let mut v = Vec::new();
    let m_count = model.submodels.len();
    if m_count < 2 {
        v.push(format!("chain requires M ≥ 2 submodels, got {m_count}"));
        return ValidationReport { violations: v };
    }
    if model.phi_blocks.len() != m_count - 1 {
        v.push(format!(
            "chain of {m_count} submodels requires {} phi blocks, got {}",
            m_count - 1,
            model.phi_blocks.len()
        ));
        return ValidationReport { violations: v };
    }

    let mut labels = HashSet::new();
    for (b, block) in model.phi_blocks.iter().enumerate() {
        if block.dim() == 0 {
            v.push(format!("block `{}` at boundary {} has dim 0", block.label, b + 1));
        }
        if !labels.insert(block.label.as_str()) {
            v.push(format!("duplicate block label `{}`", block.label));
        }
        check_supports(&block.support, &format!("block `{}`", block.label), &mut v);
    }

    for (m, s) in model.submodels.iter().enumerate() {
        let idx = m + 1;
        let expect_left = m > 0;
        let expect_right = m + 1 < m_count;
        match (&s.left, expect_left) {
            (None, true) => v.push(format!("submodel {idx} does not declare its left block")),
            (Some(_), false) => v.push(format!("submodel {idx} must not declare a left block")),
            (Some(view), true) => check_view(model, m - 1, view, idx, "left", &mut v),
            (None, false) => {}
        }
        match (&s.right, expect_right) {
            (None, true) => v.push(format!("submodel {idx} does not declare its right block")),
            (Some(_), false) => v.push(format!("submodel {idx} must not declare a right block")),
            (Some(view), true) => check_view(model, m, view, idx, "right", &mut v),
            (None, false) => {}
        }
        if s.log_prior_marginal.is_none() {
            v.push(format!("submodel {idx} is missing its prior marginal evaluator"));
        }
        check_supports(&s.psi_support, &format!("psi of submodel {idx}"), &mut v);
        if let Some(uf) = &s.unit_factorization {
            let blocks = model.touched_blocks(m);
            if blocks.len() != 1 {
                v.push(format!(
                    "submodel {idx} declares a unit factorization but touches {} blocks",
                    blocks.len()
                ));
            } else if uf.units == 0
                || uf.units * uf.phi_per_unit != s.phi_dim()
                || uf.units * uf.psi_per_unit != s.psi_dim()
            {
                v.push(format!(
                    "submodel {idx} unit factorization ({} units of {}+{}) does not tile phi dim {} and psi dim {}",
                    uf.units,
                    uf.phi_per_unit,
                    uf.psi_per_unit,
                    s.phi_dim(),
                    s.psi_dim()
                ));
            }
        }
    }

    for b in 0..m_count - 1 {
        let l = model.submodels[b].right.as_ref();
        let r = model.submodels[b + 1].left.as_ref();
        if let (Some(l), Some(r)) = (l, r) {
            if l.dim != r.dim {
                v.push(format!(
                    "block dim mismatch at boundary {}: submodel {} declares {}, submodel {} declares {}",
                    b + 1,
                    b + 1,
                    l.dim,
                    b + 2,
                    r.dim
                ));
            }
        }
    }
    ValidationReport { violations: v }
}

fn check_view(model: &ChainModel, b: usize, view: &BlockView, idx: usize, side: &str, v: &mut Vec<String>) {
    let block = &model.phi_blocks[b];
    if view.label != block.label {
        v.push(format!(
            "submodel {idx} {side} block `{}` does not match chain block `{}`",
            view.label, block.label
        ));
    }
    if view.dim != block.dim() {
        v.push(format!(
            "submodel {idx} declares {side} block `{}` with dim {}, chain block has dim {}",
            view.label,
            view.dim,
            block.dim()
        ));
    }
}

fn check_supports(support: &[Support], what: &str, v: &mut Vec<String>) {
    for (i, s) in support.iter().enumerate() {
        if let Support::Discrete(k) = s {
            if *k < 2 {
                v.push(format!("{what} coordinate {i} declares cardinality {k} < 2"));
            }
        }
    }
}

/// Unnormalized log of the chained melded density
/// `log p_pool(phi) + sum_m [log p_m(phi_m, psi_m, Y_m) - log p_m(phi_m)]`.
pub fn log_melded_density(
    model: &ChainModel,
    pool: &PooledPrior,
    phi: &PhiVector,
    psi: &PsiVector,
) -> Result<f64> {
    model.check_state(phi, psi)?;
    let lp = pool.log_density(phi)?;
    if lp == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let mut total = lp;
    for m in 0..model.len() {
        let phi_m = model.phi_for(m, phi);
        let term = model.log_replaced(m, &phi_m, &psi.0[m])?;
        if term == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        total += term;
    }
    Ok(total)
}

/// Log of the chained Markov combination
/// `sum_m log p_m(phi_m, psi_m, Y_m) - sum_b log p(phi_b)`, where `shared_priors[b]`
/// is the common prior every submodel touching block `b` declares for it.
pub fn markov_combination_density(
    model: &ChainModel,
    shared_priors: &[LogDensityFn],
    phi: &PhiVector,
    psi: &PsiVector,
) -> Result<f64> {
    model.check_state(phi, psi)?;
    if shared_priors.len() != model.phi_blocks.len() {
        return Err(MeldError::DimensionMismatch {
            what: "shared block priors".into(),
            expected: model.phi_blocks.len(),
            got: shared_priors.len(),
        });
    }
    let mut total = 0.0;
    for m in 0..model.len() {
        let j = model.submodels[m].log_joint(&model.phi_for(m, phi), &psi.0[m]);
        if j.is_nan() || j == f64::INFINITY {
            return Err(MeldError::Numerical(format!("submodel {} joint is {j}", m + 1)));
        }
        if j == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        total += j;
    }
    for (b, prior) in shared_priors.iter().enumerate() {
        let p = prior(&phi.0[b]);
        if p.is_nan() || p == f64::INFINITY {
            return Err(MeldError::Numerical(format!("shared prior of block {} is {p}", b + 1)));
        }
        if p == f64::NEG_INFINITY {
            return Err(MeldError::Numerical(format!(
                "shared prior of block {} is -inf where every submodel joint is finite",
                b + 1
            )));
        }
        total -= p;
    }
    Ok(total)
}
