//! Pooled priors over the shared blocks, their factorizations for the
//! multi-stage samplers, and grid normalization.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use crate::chain::{ChainModel, LogDensityFn, PhiVector};
use crate::csvfmt::fmt_f64;
use crate::error::{MeldError, Result};

/// Upper bound on the number of nodes [`grid_normalize`] will evaluate.
pub const MAX_GRID_POINTS: usize = 10_000_000;

/// Which of the two adjacent submodels is authoritative for one block under
/// complete dictatorial pooling. For block `b`, `Left` is submodel `b` and
/// `Right` is submodel `b + 1` (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryChoice {
    Left,
    Right,
}

/// How the blocks not covered by the authoritative submodel are pooled under
/// partial dictatorial pooling.
#[derive(Debug, Clone, PartialEq)]
pub enum RestPooling {
    /// One weight per submodel; the authority's entry is ignored.
    Logarithmic(Vec<f64>),
    /// One weight pair per block; pairs of dictated blocks are ignored.
    Linear(Vec<[f64; 2]>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PoolMethod {
    /// `sum_m lambda_m log p_m(phi_m)`, one weight per submodel.
    Logarithmic(Vec<f64>),
    /// Logarithmic pooling with every weight equal to one.
    ProductOfExperts,
    /// `sum_b log(l_b0 p_b(phi_b) + l_b1 p_{b+1}(phi_b))`, one pair per block.
    Linear(Vec<[f64; 2]>),
    /// Submodel `authority` (0-based) supplies the prior for every block it touches.
    DictatorialPartial { authority: usize, rest: RestPooling },
    /// One authoritative submodel per block.
    DictatorialComplete(Vec<BoundaryChoice>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    /// The submodel's own prior marginal over every block it touches.
    Joint(usize),
    /// One-block marginal `p_k(phi_b)`.
    Block(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
enum Term {
    Power { weight: f64, source: Source },
    Mixture { parts: Vec<(f64, Source)> },
}

/// A pooled prior `p_pool(phi)` over all shared blocks, evaluated up to its
/// normalizing constant (subtracted when `log_norm` is known).
#[derive(Clone)]
pub struct PooledPrior {
    method: PoolMethod,
    block_dims: Vec<usize>,
    touched: Vec<Vec<usize>>,
    marginals: Vec<Option<LogDensityFn>>,
    block_marginals: BTreeMap<(usize, usize), LogDensityFn>,
    log_norm: Option<f64>,
    terms: Vec<Term>,
}

impl std::fmt::Debug for PooledPrior {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PooledPrior")
            .field("method", &self.method)
            .field("block_dims", &self.block_dims)
            .field("log_norm", &self.log_norm)
            .finish()
    }
}

pub struct PooledPriorBuilder {
    method: PoolMethod,
    block_dims: Vec<usize>,
    touched: Vec<Vec<usize>>,
    marginals: Vec<Option<LogDensityFn>>,
    block_marginals: BTreeMap<(usize, usize), LogDensityFn>,
    log_norm: Option<f64>,
}

impl PooledPriorBuilder {
    /// Supplies the one-block marginal `p_submodel(phi_block)` (0-based indices),
    /// needed by linear and dictatorial pooling for submodels touching two blocks.
    pub fn block_marginal(
        mut self,
        submodel: usize,
        block: usize,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.block_marginals.insert((submodel, block), Arc::new(f));
        self
    }

    pub fn block_marginal_fn(mut self, submodel: usize, block: usize, f: LogDensityFn) -> Self {
        self.block_marginals.insert((submodel, block), f);
        self
    }

    /// Known `log K(lambda)`, subtracted on evaluation.
    pub fn log_norm(mut self, log_norm: f64) -> Self {
        self.log_norm = Some(log_norm);
        self
    }

    pub fn build(self) -> Result<PooledPrior> {
        let terms = compile(&self.method, &self.touched)?;
        let prior = PooledPrior {
            method: self.method,
            block_dims: self.block_dims,
            touched: self.touched,
            marginals: self.marginals,
            block_marginals: self.block_marginals,
            log_norm: self.log_norm,
            terms,
        };
        for t in &prior.terms {
            match t {
                Term::Power { source, .. } => prior.check_source(*source)?,
                Term::Mixture { parts } => {
                    for (_, s) in parts {
                        prior.check_source(*s)?;
                    }
                }
            }
        }
        Ok(prior)
    }
}

fn check_weight(w: f64, what: &str) -> Result<()> {
    if !w.is_finite() || w < 0.0 {
        return Err(MeldError::Configuration(format!(
            "{what} weight must be a nonnegative finite real, got {w}"
        )));
    }
    Ok(())
}

fn linear_term(b: usize, pair: [f64; 2]) -> Result<Term> {
    check_weight(pair[0], "linear pooling")?;
    check_weight(pair[1], "linear pooling")?;
    if pair[0] == 0.0 && pair[1] == 0.0 {
        return Err(MeldError::Configuration(format!(
            "linear pooling weights for block {} are both zero",
            b + 1
        )));
    }
    let parts = [(pair[0], Source::Block(b, b)), (pair[1], Source::Block(b + 1, b))]
        .into_iter()
        .filter(|(w, _)| *w > 0.0)
        .collect();
    Ok(Term::Mixture { parts })
}

fn source_for(k: usize, blocks: &[usize], touched: &[Vec<usize>]) -> Source {
    if blocks == touched[k].as_slice() {
        Source::Joint(k)
    } else {
        Source::Block(k, blocks[0])
    }
}

fn compile(method: &PoolMethod, touched: &[Vec<usize>]) -> Result<Vec<Term>> {
    let m_count = touched.len();
    let n_blocks = m_count.saturating_sub(1);
    let mut terms = Vec::new();
    match method {
        PoolMethod::ProductOfExperts => {
            return compile(&PoolMethod::Logarithmic(vec![1.0; m_count]), touched);
        }
        PoolMethod::Logarithmic(w) => {
            if w.len() != m_count {
                return Err(MeldError::Configuration(format!(
                    "logarithmic pooling needs {m_count} weights, got {}",
                    w.len()
                )));
            }
            for &x in w {
                check_weight(x, "logarithmic pooling")?;
            }
            if w.iter().all(|&x| x == 0.0) {
                return Err(MeldError::Configuration("all pooling weights are zero".into()));
            }
            for (k, &x) in w.iter().enumerate() {
                if x > 0.0 {
                    terms.push(Term::Power {
                        weight: x,
                        source: Source::Joint(k),
                    });
                }
            }
        }
        PoolMethod::Linear(w) => {
            if w.len() != n_blocks {
                return Err(MeldError::Configuration(format!(
                    "linear pooling needs {n_blocks} weight pairs, got {}",
                    w.len()
                )));
            }
            for (b, pair) in w.iter().enumerate() {
                terms.push(linear_term(b, *pair)?);
            }
        }
        PoolMethod::DictatorialPartial { authority, rest } => {
            let a = *authority;
            if a >= m_count {
                return Err(MeldError::Configuration(format!(
                    "authoritative submodel {} does not exist",
                    a + 1
                )));
            }
            terms.push(Term::Power {
                weight: 1.0,
                source: Source::Joint(a),
            });
            let remaining: Vec<usize> = (0..n_blocks).filter(|b| !touched[a].contains(b)).collect();
            match rest {
                RestPooling::Logarithmic(w) => {
                    if w.len() != m_count {
                        return Err(MeldError::Configuration(format!(
                            "partial dictatorial logarithmic rest needs {m_count} weights, got {}",
                            w.len()
                        )));
                    }
                    for &x in w {
                        check_weight(x, "logarithmic pooling")?;
                    }
                    let mut any = false;
                    for k in (0..m_count).filter(|&k| k != a) {
                        let blocks: Vec<usize> =
                            touched[k].iter().copied().filter(|b| remaining.contains(b)).collect();
                        if blocks.is_empty() || w[k] == 0.0 {
                            continue;
                        }
                        any = true;
                        terms.push(Term::Power {
                            weight: w[k],
                            source: source_for(k, &blocks, touched),
                        });
                    }
                    if !remaining.is_empty() && !any {
                        return Err(MeldError::Configuration(
                            "all pooling weights for the non-dictated blocks are zero".into(),
                        ));
                    }
                }
                RestPooling::Linear(w) => {
                    if w.len() != n_blocks {
                        return Err(MeldError::Configuration(format!(
                            "partial dictatorial linear rest needs {n_blocks} weight pairs, got {}",
                            w.len()
                        )));
                    }
                    for &b in &remaining {
                        terms.push(linear_term(b, w[b])?);
                    }
                }
            }
        }
        PoolMethod::DictatorialComplete(choices) => {
            if choices.len() != n_blocks {
                return Err(MeldError::Configuration(format!(
                    "complete dictatorial pooling needs {n_blocks} choices, got {}",
                    choices.len()
                )));
            }
            let owner: Vec<usize> = choices
                .iter()
                .enumerate()
                .map(|(b, c)| match c {
                    BoundaryChoice::Left => b,
                    BoundaryChoice::Right => b + 1,
                })
                .collect();
            for (k, touched_k) in touched.iter().enumerate().take(m_count) {
                let owned: Vec<usize> = (0..n_blocks).filter(|&b| owner[b] == k).collect();
                if owned.is_empty() {
                    continue;
                }
                if owned == *touched_k {
                    // consecutive blocks owned by one submodel keep its joint marginal
                    terms.push(Term::Power {
                        weight: 1.0,
                        source: Source::Joint(k),
                    });
                } else {
                    for b in owned {
                        terms.push(Term::Power {
                            weight: 1.0,
                            source: Source::Block(k, b),
                        });
                    }
                }
            }
        }
    }
    Ok(terms)
}

fn touched_blocks(m_count: usize) -> Vec<Vec<usize>> {
    (0..m_count)
        .map(|m| {
            let mut v = Vec::new();
            if m > 0 {
                v.push(m - 1);
            }
            if m + 1 < m_count {
                v.push(m);
            }
            v
        })
        .collect()
}

impl PooledPrior {
    pub fn builder(model: &ChainModel, method: PoolMethod) -> PooledPriorBuilder {
        PooledPriorBuilder {
            method,
            block_dims: model.phi_blocks().iter().map(|b| b.dim()).collect(),
            touched: touched_blocks(model.len()),
            marginals: model.submodels().iter().map(|s| s.prior_marginal_fn()).collect(),
            block_marginals: BTreeMap::new(),
            log_norm: None,
        }
    }

    pub fn method(&self) -> &PoolMethod {
        &self.method
    }

    pub fn num_submodels(&self) -> usize {
        self.touched.len()
    }

    pub fn block_dims(&self) -> &[usize] {
        &self.block_dims
    }

    pub fn log_norm(&self) -> Option<f64> {
        self.log_norm
    }

    /// The evaluator for `p_k(phi_k)` over every block submodel `k` touches.
    pub fn submodel_marginal(&self, k: usize) -> Result<LogDensityFn> {
        self.marginals[k].clone().ok_or_else(|| {
            MeldError::Configuration(format!("submodel {} has no prior marginal evaluator", k + 1))
        })
    }

    /// The evaluator for `p_k(phi_b)`, falling back to the submodel's own
    /// marginal when `b` is the only block it touches.
    pub fn one_block_marginal(&self, k: usize, b: usize) -> Result<LogDensityFn> {
        if !self.touched[k].contains(&b) {
            return Err(MeldError::Configuration(format!(
                "submodel {} does not touch block {}",
                k + 1,
                b + 1
            )));
        }
        if self.touched[k].len() == 1 {
            return self.submodel_marginal(k);
        }
        self.block_marginals.get(&(k, b)).cloned().ok_or_else(|| {
            MeldError::Configuration(format!(
                "missing one-block marginal p_{}(phi block {}) required by {:?} pooling",
                k + 1,
                b + 1,
                self.method
            ))
        })
    }

    fn check_source(&self, s: Source) -> Result<()> {
        match s {
            Source::Joint(k) => self.submodel_marginal(k).map(|_| ()),
            Source::Block(k, b) => self.one_block_marginal(k, b).map(|_| ()),
        }
    }

    fn eval_source(&self, s: Source, phi: &PhiVector) -> Result<f64> {
        let v = match s {
            Source::Joint(k) => {
                let f = self.marginals[k].as_ref().expect("checked at build");
                let arg: Vec<f64> = self.touched[k].iter().flat_map(|&b| phi.0[b].iter().copied()).collect();
                f(&arg)
            }
            Source::Block(k, b) => {
                let f = if self.touched[k].len() == 1 {
                    self.marginals[k].as_ref().expect("checked at build")
                } else {
                    self.block_marginals.get(&(k, b)).expect("checked at build")
                };
                f(&phi.0[b])
            }
        };
        if v.is_nan() || v == f64::INFINITY {
            return Err(MeldError::Numerical(format!("prior marginal evaluated to {v}")));
        }
        Ok(v)
    }

    fn check_phi(&self, phi: &PhiVector) -> Result<()> {
        if phi.0.len() != self.block_dims.len() {
            return Err(MeldError::DimensionMismatch {
                what: "number of phi blocks".into(),
                expected: self.block_dims.len(),
                got: phi.0.len(),
            });
        }
        for (b, (v, &d)) in phi.0.iter().zip(&self.block_dims).enumerate() {
            if v.len() != d {
                return Err(MeldError::DimensionMismatch {
                    what: format!("phi block {}", b + 1),
                    expected: d,
                    got: v.len(),
                });
            }
        }
        Ok(())
    }

    /// Log pooled density at `phi`; `-inf` off-support, never NaN.
    pub fn log_density(&self, phi: &PhiVector) -> Result<f64> {
        self.check_phi(phi)?;
        let mut total = 0.0;
        for t in &self.terms {
            let v = match t {
                Term::Power { weight, source } => {
                    let lp = self.eval_source(*source, phi)?;
                    if lp == f64::NEG_INFINITY {
                        return Ok(f64::NEG_INFINITY);
                    }
                    weight * lp
                }
                Term::Mixture { parts } => {
                    let mut logs = Vec::with_capacity(parts.len());
                    for (w, s) in parts {
                        logs.push(w.ln() + self.eval_source(*s, phi)?);
                    }
                    let v = log_sum_exp(&logs);
                    if v == f64::NEG_INFINITY {
                        return Ok(f64::NEG_INFINITY);
                    }
                    v
                }
            };
            total += v;
        }
        Ok(total - self.log_norm.unwrap_or(0.0))
    }
}

/// `log sum exp(xs)`, `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Free-function form of [`PooledPrior::log_density`].
pub fn log_pool_eval(pool: &PooledPrior, phi: &PhiVector) -> Result<f64> {
    pool.log_density(phi)
}

/// How the pooled prior is split into `pool1(phi12) pool2(phi12, phi23) pool3(phi23)`
/// for the parallel sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorizationMode {
    /// `pool1 = pool3 = 1`; all of the pooled prior sits in `pool2`.
    FlatEnds,
    /// `pool1 = p_1(phi12)`, `pool3 = p_3(phi23)`, so stage one targets the
    /// end subposteriors; `pool2` carries the remainder.
    SubpriorEnds,
    /// Caller-supplied factors.
    Custom,
}

type Log1 = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type Log2 = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
enum FactorKind {
    Flat(PooledPrior),
    Subprior {
        pool: PooledPrior,
        p1: LogDensityFn,
        p3: LogDensityFn,
    },
    Custom {
        pool1: Log1,
        pool2: Log2,
        pool3: Log1,
    },
}

/// The three-factor decomposition of a pooled prior used by the parallel sampler.
#[derive(Clone)]
pub struct PoolFactorization {
    kind: FactorKind,
}

impl std::fmt::Debug for PoolFactorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PoolFactorization({:?})", self.mode())
    }
}

fn finite_or_err(v: f64, what: &str) -> Result<f64> {
    if v.is_nan() || v == f64::INFINITY {
        return Err(MeldError::Numerical(format!("{what} evaluated to {v}")));
    }
    Ok(v)
}

/// `full - parts`, where `-inf` in `full` wins and `-inf` in a part under a
/// finite `full` is an error.
fn remainder(full: f64, parts: &[(f64, &str)]) -> Result<f64> {
    if full == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let mut out = full;
    for &(p, name) in parts {
        let p = finite_or_err(p, name)?;
        if p == f64::NEG_INFINITY {
            return Err(MeldError::Numerical(format!(
                "{name} is -inf where the pooled prior is finite; the factorization is undefined here"
            )));
        }
        out -= p;
    }
    Ok(out)
}

/// Splits `pool` for the parallel sampler. Only three-submodel chains are supported.
pub fn factorize_for_sampler(pool: &PooledPrior, mode: FactorizationMode) -> Result<PoolFactorization> {
    if pool.num_submodels() != 3 {
        return Err(MeldError::Unsupported(format!(
            "sampler factorization needs M = 3 submodels, got {}",
            pool.num_submodels()
        )));
    }
    let kind = match mode {
        FactorizationMode::FlatEnds => FactorKind::Flat(pool.clone()),
        FactorizationMode::SubpriorEnds => FactorKind::Subprior {
            pool: pool.clone(),
            p1: pool.submodel_marginal(0)?,
            p3: pool.submodel_marginal(2)?,
        },
        FactorizationMode::Custom => {
            return Err(MeldError::Configuration(
                "custom factorizations are built with PoolFactorization::custom".into(),
            ))
        }
    };
    Ok(PoolFactorization { kind })
}

impl PoolFactorization {
    pub fn custom(
        pool1: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        pool2: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        pool3: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            kind: FactorKind::Custom {
                pool1: Arc::new(pool1),
                pool2: Arc::new(pool2),
                pool3: Arc::new(pool3),
            },
        }
    }

    pub fn mode(&self) -> FactorizationMode {
        match self.kind {
            FactorKind::Flat(_) => FactorizationMode::FlatEnds,
            FactorKind::Subprior { .. } => FactorizationMode::SubpriorEnds,
            FactorKind::Custom { .. } => FactorizationMode::Custom,
        }
    }

    pub fn log_pool1(&self, phi12: &[f64]) -> Result<f64> {
        match &self.kind {
            FactorKind::Flat(_) => Ok(0.0),
            FactorKind::Subprior { p1, .. } => finite_or_err(p1(phi12), "p_1(phi12)"),
            FactorKind::Custom { pool1, .. } => finite_or_err(pool1(phi12), "pool1"),
        }
    }

    pub fn log_pool3(&self, phi23: &[f64]) -> Result<f64> {
        match &self.kind {
            FactorKind::Flat(_) => Ok(0.0),
            FactorKind::Subprior { p3, .. } => finite_or_err(p3(phi23), "p_3(phi23)"),
            FactorKind::Custom { pool3, .. } => finite_or_err(pool3(phi23), "pool3"),
        }
    }

    pub fn log_pool2(&self, phi12: &[f64], phi23: &[f64]) -> Result<f64> {
        match &self.kind {
            FactorKind::Flat(pool) => pool.log_density(&PhiVector(vec![phi12.to_vec(), phi23.to_vec()])),
            FactorKind::Subprior { pool, p1, p3 } => {
                let full = pool.log_density(&PhiVector(vec![phi12.to_vec(), phi23.to_vec()]))?;
                remainder(full, &[(p1(phi12), "p_1(phi12)"), (p3(phi23), "p_3(phi23)")])
            }
            FactorKind::Custom { pool2, .. } => finite_or_err(pool2(phi12, phi23), "pool2"),
        }
    }
}

/// How the pooled prior is split into `pool1(phi12) pool2(phi12, phi23) pool3(phi12, phi23)`
/// for the sequential sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequentialMode {
    /// `pool1 = pool2 = 1`; all of the pooled prior enters at stage three.
    Flat,
    /// `pool1 = p_1(phi12)`, `pool2 = p_2(phi12, phi23)`; stage three carries the remainder.
    SubpriorChain,
    Custom,
}

#[derive(Clone)]
enum SeqKind {
    Flat(PooledPrior),
    SubpriorChain {
        pool: PooledPrior,
        p1: LogDensityFn,
        p2: LogDensityFn,
    },
    Custom {
        pool1: Log1,
        pool2: Log2,
        pool3: Log2,
    },
}

/// Three-factor decomposition used by the sequential sampler.
#[derive(Clone)]
pub struct SequentialFactorization {
    kind: SeqKind,
}

impl std::fmt::Debug for SequentialFactorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SequentialFactorization({:?})", self.mode())
    }
}

pub fn factorize_sequential(pool: &PooledPrior, mode: SequentialMode) -> Result<SequentialFactorization> {
    if pool.num_submodels() != 3 {
        return Err(MeldError::Unsupported(format!(
            "sequential factorization needs M = 3 submodels, got {}",
            pool.num_submodels()
        )));
    }
    let kind = match mode {
        SequentialMode::Flat => SeqKind::Flat(pool.clone()),
        SequentialMode::SubpriorChain => SeqKind::SubpriorChain {
            pool: pool.clone(),
            p1: pool.submodel_marginal(0)?,
            p2: pool.submodel_marginal(1)?,
        },
        SequentialMode::Custom => {
            return Err(MeldError::Configuration(
                "custom factorizations are built with SequentialFactorization::custom".into(),
            ))
        }
    };
    Ok(SequentialFactorization { kind })
}

impl SequentialFactorization {
    pub fn custom(
        pool1: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        pool2: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        pool3: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            kind: SeqKind::Custom {
                pool1: Arc::new(pool1),
                pool2: Arc::new(pool2),
                pool3: Arc::new(pool3),
            },
        }
    }

    pub fn mode(&self) -> SequentialMode {
        match self.kind {
            SeqKind::Flat(_) => SequentialMode::Flat,
            SeqKind::SubpriorChain { .. } => SequentialMode::SubpriorChain,
            SeqKind::Custom { .. } => SequentialMode::Custom,
        }
    }

    pub fn log_pool1(&self, phi12: &[f64]) -> Result<f64> {
        match &self.kind {
            SeqKind::Flat(_) => Ok(0.0),
            SeqKind::SubpriorChain { p1, .. } => finite_or_err(p1(phi12), "p_1(phi12)"),
            SeqKind::Custom { pool1, .. } => finite_or_err(pool1(phi12), "pool1"),
        }
    }

    pub fn log_pool2(&self, phi12: &[f64], phi23: &[f64]) -> Result<f64> {
        match &self.kind {
            SeqKind::Flat(_) => Ok(0.0),
            SeqKind::SubpriorChain { p2, .. } => {
                let arg: Vec<f64> = phi12.iter().chain(phi23).copied().collect();
                finite_or_err(p2(&arg), "p_2(phi12, phi23)")
            }
            SeqKind::Custom { pool2, .. } => finite_or_err(pool2(phi12, phi23), "pool2"),
        }
    }

    pub fn log_pool3(&self, phi12: &[f64], phi23: &[f64]) -> Result<f64> {
        match &self.kind {
            SeqKind::Flat(pool) => pool.log_density(&PhiVector(vec![phi12.to_vec(), phi23.to_vec()])),
            SeqKind::SubpriorChain { pool, p1, p2 } => {
                let full = pool.log_density(&PhiVector(vec![phi12.to_vec(), phi23.to_vec()]))?;
                let arg: Vec<f64> = phi12.iter().chain(phi23).copied().collect();
                remainder(full, &[(p1(phi12), "p_1(phi12)"), (p2(&arg), "p_2(phi12, phi23)")])
            }
            SeqKind::Custom { pool3, .. } => finite_or_err(pool3(phi12, phi23), "pool3"),
        }
    }
}

/// One axis of a regular grid: `points` equally spaced nodes from `lower` to `upper` inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridAxis {
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
}

impl GridAxis {
    pub fn new(lower: f64, upper: f64, points: usize) -> Self {
        Self { lower, upper, points }
    }

    pub fn step(&self) -> f64 {
        (self.upper - self.lower) / (self.points - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i + 1 == self.points {
            self.upper
        } else {
            self.lower + i as f64 * self.step()
        }
    }
}

/// Normalized density values on a regular grid over every `phi` coordinate,
/// in row-major order (last coordinate fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct GridTable {
    pub columns: Vec<String>,
    pub axes: Vec<GridAxis>,
    pub density: Vec<f64>,
    pub cell_volume: f64,
}

impl GridTable {
    pub fn len(&self) -> usize {
        self.density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.density.is_empty()
    }

    /// Coordinates of node `idx`.
    pub fn point(&self, mut idx: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.axes.len()];
        for (d, axis) in self.axes.iter().enumerate().rev() {
            out[d] = axis.node(idx % axis.points);
            idx /= axis.points;
        }
        out
    }

    pub fn total_mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.cell_volume
    }

    /// Mean vector and covariance matrix of the gridded distribution.
    pub fn moments(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let d = self.axes.len();
        let mass = self.total_mass();
        let mut mean = vec![0.0; d];
        for (i, &p) in self.density.iter().enumerate() {
            let x = self.point(i);
            for k in 0..d {
                mean[k] += p * x[k];
            }
        }
        for m in &mut mean {
            *m *= self.cell_volume / mass;
        }
        let mut cov = vec![vec![0.0; d]; d];
        for (i, &p) in self.density.iter().enumerate() {
            let x = self.point(i);
            for a in 0..d {
                for b in 0..d {
                    cov[a][b] += p * (x[a] - mean[a]) * (x[b] - mean[b]);
                }
            }
        }
        for row in &mut cov {
            for c in row.iter_mut() {
                *c *= self.cell_volume / mass;
            }
        }
        (mean, cov)
    }

    pub fn correlation(&self, i: usize, j: usize) -> f64 {
        let (_, cov) = self.moments();
        cov[i][j] / (cov[i][i] * cov[j][j]).sqrt()
    }

    /// Writes `coordinates..., density` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{},density", self.columns.join(","))?;
        for (i, &p) in self.density.iter().enumerate() {
            let row: Vec<String> = self.point(i).into_iter().map(fmt_f64).collect();
            writeln!(w, "{},{}", row.join(","), fmt_f64(p))?;
        }
        Ok(())
    }
}

/// Evaluates a log density over a regular grid and normalizes it so that
/// `sum(density) * cell_volume == 1`.
pub fn grid_normalize_fn(
    columns: Vec<String>,
    axes: &[GridAxis],
    log_density: impl Fn(&[f64]) -> Result<f64>,
) -> Result<GridTable> {
    if axes.is_empty() {
        return Err(MeldError::Configuration("grid needs at least one axis".into()));
    }
    let mut total: usize = 1;
    for a in axes {
        if a.points < 2 || !a.lower.is_finite() || !a.upper.is_finite() || a.upper <= a.lower {
            return Err(MeldError::Configuration(format!("invalid grid axis {a:?}")));
        }
        total = total
            .checked_mul(a.points)
            .filter(|&t| t <= MAX_GRID_POINTS)
            .ok_or_else(|| MeldError::Configuration(format!("grid exceeds {MAX_GRID_POINTS} points")))?;
    }
    let mut table = GridTable {
        columns,
        axes: axes.to_vec(),
        density: Vec::with_capacity(total),
        cell_volume: axes.iter().map(GridAxis::step).product(),
    };
    let mut logs = Vec::with_capacity(total);
    for i in 0..total {
        let v = log_density(&table.point(i))?;
        if v.is_nan() || v == f64::INFINITY {
            return Err(MeldError::Numerical(format!("log density {v} on grid")));
        }
        logs.push(v);
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(MeldError::Numerical("zero mass on grid".into()));
    }
    let unnorm: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let mass = unnorm.iter().sum::<f64>() * table.cell_volume;
    if !mass.is_finite() || mass <= 0.0 {
        return Err(MeldError::Numerical(format!("non-finite grid mass {mass}")));
    }
    table.density = unnorm.into_iter().map(|u| u / mass).collect();
    Ok(table)
}

/// Grid-normalizes a pooled prior over all of its (continuous) coordinates.
/// `axes` holds one axis per coordinate of the flattened `phi`.
pub fn grid_normalize(model: &ChainModel, pool: &PooledPrior, axes: &[GridAxis]) -> Result<GridTable> {
    if let Some(b) = model.phi_blocks().iter().find(|b| !b.is_continuous()) {
        return Err(MeldError::Unsupported(format!(
            "grid normalization needs continuous blocks; `{}` is discrete",
            b.label
        )));
    }
    let dims: Vec<usize> = model.phi_blocks().iter().map(|b| b.dim()).collect();
    let n: usize = dims.iter().sum();
    if axes.len() != n {
        return Err(MeldError::DimensionMismatch {
            what: "grid axes".into(),
            expected: n,
            got: axes.len(),
        });
    }
    let columns = model.phi_blocks().iter().flat_map(|b| b.coordinate_names()).collect();
    grid_normalize_fn(columns, axes, |x| {
        let mut offset = 0;
        let blocks = dims
            .iter()
            .map(|&d| {
                let v = x[offset..offset + d].to_vec();
                offset += d;
                v
            })
            .collect();
        pool.log_density(&PhiVector(blocks))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{PhiBlock, SubmodelSpec, Support};

    fn nl(x: f64, m: f64, v: f64) -> f64 {
        -0.5 * ((x - m).powi(2) / v + (2.0 * std::f64::consts::PI * v).ln())
    }

    /// Three unit-normal 1-D marginals on a chain of three 1-D blocks... for M = 3
    /// the middle submodel sees two blocks, so it gets an independent product.
    fn unit_normal_chain() -> ChainModel {
        let s1 = SubmodelSpec::new("1", |_, _| 0.0).right("a", 1).prior_marginal(|p| nl(p[0], 0.0, 1.0));
        let s2 = SubmodelSpec::new("2", |_, _| 0.0)
            .left("a", 1)
            .right("b", 1)
            .prior_marginal(|p| nl(p[0], 0.0, 1.0) + nl(p[1], 0.0, 1.0));
        let s3 = SubmodelSpec::new("3", |_, _| 0.0).left("b", 1).prior_marginal(|p| nl(p[0], 0.0, 1.0));
        ChainModel::new(vec![PhiBlock::real("a", 1), PhiBlock::real("b", 1)], vec![s1, s2, s3])
    }

    fn five_chain() -> ChainModel {
        // submodel k marginal: sum of N(k, 1) over its coordinates; block marginals also N(k, 1)
        let mut subs = Vec::new();
        let labels = ["b1", "b2", "b3", "b4"];
        for k in 0..5 {
            let c = k as f64;
            let mut s = SubmodelSpec::new(format!("{}", k + 1), |_, _| 0.0)
                .prior_marginal(move |p| p.iter().map(|x| nl(*x, c, 1.0)).sum());
            if k > 0 {
                s = s.left(labels[k - 1], 1);
            }
            if k < 4 {
                s = s.right(labels[k], 1);
            }
            subs.push(s);
        }
        ChainModel::new(labels.iter().map(|l| PhiBlock::real(*l, 1)).collect(), subs)
    }

    #[test]
    fn poe_three_unit_normals_at_origin() {
        let model = unit_normal_chain();
        let pool = PooledPrior::builder(&model, PoolMethod::ProductOfExperts).build().unwrap();
        let v = pool.log_density(&PhiVector(vec![vec![0.0], vec![0.0]])).unwrap();
        // p1(0) + p2(0, 0) + p3(0) = four standard normal log densities at 0
        assert!((v - 4.0 * nl(0.0, 0.0, 1.0)).abs() < 1e-14);
    }

    #[test]
    fn complete_dictatorial_m5_example() {
        let model = five_chain();
        use BoundaryChoice::*;
        // blocks -> p1, p3, p3, p5
        let pool = PooledPrior::builder(&model, PoolMethod::DictatorialComplete(vec![Left, Right, Left, Right]))
            .build()
            .unwrap();
        let phi = PhiVector(vec![vec![0.3], vec![1.7], vec![2.2], vec![4.1]]);
        let v = pool.log_density(&phi).unwrap();
        let expect = nl(0.3, 0.0, 1.0) + (nl(1.7, 2.0, 1.0) + nl(2.2, 2.0, 1.0)) + nl(4.1, 4.0, 1.0);
        assert!((v - expect).abs() < 1e-13);
    }

    #[test]
    fn complete_dictatorial_needs_block_marginal_when_split() {
        let model = five_chain();
        use BoundaryChoice::*;
        // block 2 -> p2 (Left) while block 1 -> p1: p2 owns only one of its two blocks
        let err = PooledPrior::builder(&model, PoolMethod::DictatorialComplete(vec![Left, Left, Left, Right]))
            .build()
            .unwrap_err();
        assert!(matches!(err, MeldError::Configuration(_)));
        let ok = PooledPrior::builder(&model, PoolMethod::DictatorialComplete(vec![Left, Left, Left, Right]))
            .block_marginal(1, 1, |p| nl(p[0], 1.0, 1.0))
            .block_marginal(2, 2, |p| nl(p[0], 2.0, 1.0))
            .build();
        assert!(ok.is_ok());
    }

    #[test]
    fn logarithmic_single_weight_is_flat_elsewhere() {
        let model = five_chain();
        let pool = PooledPrior::builder(&model, PoolMethod::Logarithmic(vec![1.0, 0.0, 0.0, 0.0, 0.0]))
            .build()
            .unwrap();
        let a = pool.log_density(&PhiVector(vec![vec![0.5], vec![0.0], vec![0.0], vec![0.0]])).unwrap();
        let b = pool.log_density(&PhiVector(vec![vec![0.5], vec![9.0], vec![-3.0], vec![100.0]])).unwrap();
        assert_eq!(a, b);
        assert!((a - nl(0.5, 0.0, 1.0)).abs() < 1e-15);
    }

    #[test]
    fn all_zero_weights_rejected() {
        let model = unit_normal_chain();
        assert!(PooledPrior::builder(&model, PoolMethod::Logarithmic(vec![0.0; 3])).build().is_err());
        assert!(PooledPrior::builder(&model, PoolMethod::Linear(vec![[0.0, 0.0], [1.0, 1.0]]))
            .block_marginal(1, 0, |_| 0.0)
            .block_marginal(1, 1, |_| 0.0)
            .build()
            .is_err());
        assert!(PooledPrior::builder(&model, PoolMethod::Logarithmic(vec![1.0, -1.0, 1.0])).build().is_err());
    }

    #[test]
    fn linear_needs_one_block_marginals() {
        let model = unit_normal_chain();
        let err = PooledPrior::builder(&model, PoolMethod::Linear(vec![[0.5, 0.5], [0.5, 0.5]]))
            .build()
            .unwrap_err();
        assert!(err.to_string().contains("missing one-block marginal"));
    }

    #[test]
    fn linear_of_equal_densities_is_that_density() {
        let model = unit_normal_chain();
        let pool = PooledPrior::builder(&model, PoolMethod::Linear(vec![[0.5, 0.5], [0.5, 0.5]]))
            .block_marginal(1, 0, |p| nl(p[0], 0.0, 1.0))
            .block_marginal(1, 1, |p| nl(p[0], 0.0, 1.0))
            .build()
            .unwrap();
        for &(a, b) in &[(0.0, 0.0), (1.0, -2.0), (3.0, 0.5)] {
            let v = pool.log_density(&PhiVector(vec![vec![a], vec![b]])).unwrap();
            assert!((v - nl(a, 0.0, 1.0) - nl(b, 0.0, 1.0)).abs() < 1e-13);
        }
    }

    #[test]
    fn partial_dictatorial_middle_authority() {
        let model = five_chain();
        // authority submodel 3 (0-based 2) covers blocks 2 and 3; rest logarithmic
        let pool = PooledPrior::builder(
            &model,
            PoolMethod::DictatorialPartial {
                authority: 2,
                rest: RestPooling::Logarithmic(vec![1.0, 1.0, 1.0, 1.0, 1.0]),
            },
        )
        .block_marginal(1, 0, |p| nl(p[0], 1.0, 1.0))
        .block_marginal(3, 3, |p| nl(p[0], 3.0, 1.0))
        .build()
        .unwrap();
        let phi = PhiVector(vec![vec![0.1], vec![0.2], vec![0.3], vec![0.4]]);
        let expect = (nl(0.2, 2.0, 1.0) + nl(0.3, 2.0, 1.0))
            + nl(0.1, 0.0, 1.0)
            + nl(0.1, 1.0, 1.0)
            + nl(0.4, 3.0, 1.0)
            + nl(0.4, 4.0, 1.0);
        assert!((pool.log_density(&phi).unwrap() - expect).abs() < 1e-13);
    }

    #[test]
    fn off_support_is_neg_inf_not_nan() {
        let s1 = SubmodelSpec::new("1", |_, _| 0.0)
            .right("a", 1)
            .prior_marginal(|p| if p[0] > 0.0 { -p[0] } else { f64::NEG_INFINITY });
        let s2 = SubmodelSpec::new("2", |_, _| 0.0).left("a", 1).prior_marginal(|_| 0.0);
        let model = ChainModel::new(vec![PhiBlock::new("a", vec![Support::Positive])], vec![s1, s2]);
        let pool = PooledPrior::builder(&model, PoolMethod::Logarithmic(vec![0.5, 1.0]))
            .build()
            .unwrap();
        assert_eq!(pool.log_density(&PhiVector(vec![vec![-1.0]])).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn factorization_requires_three_submodels() {
        let model = five_chain();
        let pool = PooledPrior::builder(&model, PoolMethod::ProductOfExperts).build().unwrap();
        assert!(matches!(
            factorize_for_sampler(&pool, FactorizationMode::FlatEnds),
            Err(MeldError::Unsupported(_))
        ));
    }

    #[test]
    fn flat_ends_pool2_is_full_pool() {
        let model = unit_normal_chain();
        let pool = PooledPrior::builder(&model, PoolMethod::Logarithmic(vec![0.3, 0.6, 0.9]))
            .build()
            .unwrap();
        let f = factorize_for_sampler(&pool, FactorizationMode::FlatEnds).unwrap();
        for &(a, b) in &[(0.0, 0.0), (1.5, -0.5)] {
            assert_eq!(f.log_pool1(&[a]).unwrap(), 0.0);
            assert_eq!(f.log_pool3(&[b]).unwrap(), 0.0);
            assert_eq!(
                f.log_pool2(&[a], &[b]).unwrap(),
                pool.log_density(&PhiVector(vec![vec![a], vec![b]])).unwrap()
            );
        }
    }

    #[test]
    fn subprior_ends_error_at_evaluation() {
        let s1 = SubmodelSpec::new("1", |_, _| 0.0)
            .right("a", 1)
            .prior_marginal(|p| if p[0] > 0.0 { 0.0 } else { f64::NEG_INFINITY });
        let s2 = SubmodelSpec::new("2", |_, _| 0.0).left("a", 1).right("b", 1).prior_marginal(|_| 0.0);
        let s3 = SubmodelSpec::new("3", |_, _| 0.0).left("b", 1).prior_marginal(|_| 0.0);
        let model = ChainModel::new(vec![PhiBlock::real("a", 1), PhiBlock::real("b", 1)], vec![s1, s2, s3]);
        // dictatorial with p2 authoritative: finite where p1 is -inf
        let pool = PooledPrior::builder(
            &model,
            PoolMethod::DictatorialComplete(vec![BoundaryChoice::Right, BoundaryChoice::Left]),
        )
        .build()
        .unwrap();
        let f = factorize_for_sampler(&pool, FactorizationMode::SubpriorEnds).expect("construction succeeds");
        assert!(f.log_pool2(&[1.0], &[0.0]).is_ok());
        assert!(matches!(f.log_pool2(&[-1.0], &[0.0]), Err(MeldError::Numerical(_))));
    }

    #[test]
    fn grid_of_standard_normal() {
        let axes = [GridAxis::new(-8.0, 8.0, 401)];
        let t = grid_normalize_fn(vec!["x".into()], &axes, |x| Ok(nl(x[0], 1.0, 1.0))).unwrap();
        assert!((t.total_mass() - 1.0).abs() < 1e-12);
        let (m, c) = t.moments();
        assert!((m[0] - 1.0).abs() < 1e-9);
        assert!((c[0][0] - 1.0).abs() < 1e-6);
        assert!(grid_normalize_fn(vec!["x".into()], &axes, |_| Ok(f64::NEG_INFINITY)).is_err());
        assert!(grid_normalize_fn(vec!["x".into()], &[GridAxis::new(0.0, 1.0, 1)], |_| Ok(0.0)).is_err());
    }

    #[test]
    fn grid_rejects_discrete_blocks() {
        let s1 = SubmodelSpec::new("1", |_, _| 0.0).right("a", 1).prior_marginal(|_| 0.0);
        let s2 = SubmodelSpec::new("2", |_, _| 0.0).left("a", 1).prior_marginal(|_| 0.0);
        let model = ChainModel::new(vec![PhiBlock::discrete("a", 1, 3)], vec![s1, s2]);
        let pool = PooledPrior::builder(&model, PoolMethod::ProductOfExperts).build().unwrap();
        assert!(matches!(
            grid_normalize(&model, &pool, &[GridAxis::new(0.0, 2.0, 3)]),
            Err(MeldError::Unsupported(_))
        ));
    }

    #[test]
    fn grid_point_limit() {
        let axes = [GridAxis::new(0.0, 1.0, 5000), GridAxis::new(0.0, 1.0, 5000)];
        assert!(grid_normalize_fn(vec!["x".into(), "y".into()], &axes, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn log_sum_exp_edge_cases() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }
}
