//! Three linked Gaussian submodels: scalar shared quantities `phi12` and
//! `phi23`, a bivariate normal prior on both in the middle submodel.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{normal_log_pdf, BuiltinModel};
use crate::chain::{ChainModel, PhiBlock, SubmodelSpec, Support};
use crate::error::{MeldError, Result};
use crate::gaussian::GaussianDensity;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianChainParams {
    /// Prior mean and variance of `phi12` in submodel 1.
    pub mu1: f64,
    pub sigma1_sq: f64,
    /// Prior mean and variance of `phi23` in submodel 3.
    pub mu3: f64,
    pub sigma3_sq: f64,
    /// Bivariate prior of `(phi12, phi23)` in submodel 2.
    pub mu2: [f64; 2],
    pub sigma2_sq: [f64; 2],
    pub rho: f64,
    /// Variance of the latent `psi1 ~ N(phi12, omega1_sq)`; without it the
    /// data of submodel 1 depend on `phi12` directly.
    pub omega1_sq: Option<f64>,
    pub omega3_sq: Option<f64>,
    /// Variance of `psi2 ~ N(phi12 + phi23, omega2_sq)`.
    pub omega2_sq: f64,
    /// Observations and their noise variances.
    pub y1: Vec<f64>,
    pub tau1_sq: f64,
    pub y2: Vec<f64>,
    pub tau2_sq: f64,
    pub y3: Vec<f64>,
    pub tau3_sq: f64,
}

impl Default for GaussianChainParams {
    fn default() -> Self {
        Self {
            mu1: -2.5,
            sigma1_sq: 1.0,
            mu3: 2.5,
            sigma3_sq: 1.0,
            mu2: [0.0, 0.0],
            sigma2_sq: [1.0, 1.0],
            rho: 0.8,
            omega1_sq: None,
            omega3_sq: None,
            omega2_sq: 1.0,
            y1: vec![-2.1, -2.9, -2.4],
            tau1_sq: 1.0,
            y2: vec![0.3],
            tau2_sq: 1.0,
            y3: vec![2.2, 2.8],
            tau3_sq: 1.0,
        }
    }
}

impl GaussianChainParams {
    /// No observations anywhere.
    pub fn without_data(mut self) -> Self {
        self.y1.clear();
        self.y2.clear();
        self.y3.clear();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let variances = [
            ("sigma1_sq", self.sigma1_sq),
            ("sigma3_sq", self.sigma3_sq),
            ("sigma2_sq[0]", self.sigma2_sq[0]),
            ("sigma2_sq[1]", self.sigma2_sq[1]),
            ("omega2_sq", self.omega2_sq),
            ("tau1_sq", self.tau1_sq),
            ("tau2_sq", self.tau2_sq),
            ("tau3_sq", self.tau3_sq),
            ("omega1_sq", self.omega1_sq.unwrap_or(1.0)),
            ("omega3_sq", self.omega3_sq.unwrap_or(1.0)),
        ];
        for (name, v) in variances {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MeldError::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        if self.rho.is_nan() || self.rho.abs() >= 1.0 {
            return Err(MeldError::Domain(format!("rho must lie in (-1, 1), got {}", self.rho)));
        }
        Ok(())
    }

    /// The middle submodel's prior on `(phi12, phi23)`.
    pub fn middle_prior(&self) -> Result<GaussianDensity> {
        let c = self.rho * (self.sigma2_sq[0] * self.sigma2_sq[1]).sqrt();
        GaussianDensity::from_slices(&self.mu2, &[self.sigma2_sq[0], c, c, self.sigma2_sq[1]])
    }
}

/// Precomputed bivariate normal log density.
struct Bivariate {
    mean: [f64; 2],
    prec: [f64; 3],
    log_norm: f64,
}

impl Bivariate {
    fn new(g: &GaussianDensity) -> Self {
        let c = g.cov();
        let det = c[(0, 0)] * c[(1, 1)] - c[(0, 1)] * c[(1, 0)];
        Self {
            mean: [g.mean()[0], g.mean()[1]],
            prec: [c[(1, 1)] / det, -c[(0, 1)] / det, c[(0, 0)] / det],
            log_norm: -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln(),
        }
    }

    fn log_pdf(&self, x: &[f64]) -> f64 {
        let a = x[0] - self.mean[0];
        let b = x[1] - self.mean[1];
        self.log_norm - 0.5 * (self.prec[0] * a * a + 2.0 * self.prec[1] * a * b + self.prec[2] * b * b)
    }
}

fn data_term(ys: &[f64], mean: f64, var: f64) -> f64 {
    ys.iter().map(|&y| normal_log_pdf(y, mean, var)).sum()
}

#[allow(clippy::too_many_arguments)]
fn end_submodel(
    name: &str,
    left: bool,
    label: &str,
    mu: f64,
    var: f64,
    omega: Option<f64>,
    ys: Vec<f64>,
    tau: f64,
    psi_label: &str,
) -> Result<SubmodelSpec> {
    let joint = move |phi: &[f64], psi: &[f64]| {
        let prior = normal_log_pdf(phi[0], mu, var);
        match omega {
            Some(w) => prior + normal_log_pdf(psi[0], phi[0], w) + data_term(&ys, psi[0], tau),
            None => prior + data_term(&ys, phi[0], tau),
        }
    };
    let mut s = SubmodelSpec::new(name, joint)
        .prior_marginal(move |phi| normal_log_pdf(phi[0], mu, var))
        .prior_summary(GaussianDensity::univariate(mu, var)?);
    s = if left { s.left(label, 1) } else { s.right(label, 1) };
    if omega.is_some() {
        s = s.psi(psi_label, vec![Support::Real]);
    }
    Ok(s)
}

/// Builds the three-submodel Gaussian chain with blocks `phi12`, `phi23`.
pub fn builtin_gaussian_chain(params: &GaussianChainParams) -> Result<BuiltinModel> {
    params.validate()?;
    let p = params.clone();
    let s1 = end_submodel("gaussian-1", false, "phi12", p.mu1, p.sigma1_sq, p.omega1_sq, p.y1.clone(), p.tau1_sq, "psi1")?;
    let s3 = end_submodel("gaussian-3", true, "phi23", p.mu3, p.sigma3_sq, p.omega3_sq, p.y3.clone(), p.tau3_sq, "psi3")?;

    let prior2 = params.middle_prior()?;
    let biv = Arc::new(Bivariate::new(&prior2));
    let (b1, b2) = (biv.clone(), biv.clone());
    let (omega2, y2, tau2) = (p.omega2_sq, p.y2.clone(), p.tau2_sq);
    let s2 = SubmodelSpec::new("gaussian-2", move |phi, psi| {
        b1.log_pdf(phi) + normal_log_pdf(psi[0], phi[0] + phi[1], omega2) + data_term(&y2, psi[0], tau2)
    })
    .left("phi12", 1)
    .right("phi23", 1)
    .psi("psi2", vec![Support::Real])
    .prior_marginal(move |phi| b2.log_pdf(phi))
    .prior_summary(prior2);

    let model = ChainModel::validated(vec![PhiBlock::real("phi12", 1), PhiBlock::real("phi23", 1)], vec![s1, s2, s3])?;
    let (m0, v0, m1, v1) = (p.mu2[0], p.sigma2_sq[0], p.mu2[1], p.sigma2_sq[1]);
    Ok(BuiltinModel {
        model,
        block_marginals: vec![
            (1, 0, Arc::new(move |x: &[f64]| normal_log_pdf(x[0], m0, v0))),
            (1, 1, Arc::new(move |x: &[f64]| normal_log_pdf(x[0], m1, v1))),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{PhiVector, PsiVector};
    use crate::pooling::{factorize_for_sampler, FactorizationMode, PoolMethod};

    #[test]
    fn default_layout_and_columns() {
        let b = builtin_gaussian_chain(&GaussianChainParams::default()).unwrap();
        assert_eq!(b.model.column_names(), vec!["phi12", "phi23", "psi2"]);
        let with_latent = GaussianChainParams {
            omega1_sq: Some(0.5),
            ..Default::default()
        };
        let b = builtin_gaussian_chain(&with_latent).unwrap();
        assert_eq!(b.model.column_names(), vec!["phi12", "phi23", "psi1", "psi2"]);
    }

    #[test]
    fn invalid_parameters_rejected() {
        for bad in [
            GaussianChainParams { rho: 1.0, ..Default::default() },
            GaussianChainParams { rho: -1.0, ..Default::default() },
            GaussianChainParams { sigma1_sq: 0.0, ..Default::default() },
            GaussianChainParams { sigma2_sq: [1.0, -1.0], ..Default::default() },
        ] {
            assert!(matches!(builtin_gaussian_chain(&bad), Err(MeldError::Domain(_))));
        }
    }

    #[test]
    fn middle_marginal_matches_gaussian_algebra() {
        let params = GaussianChainParams::default();
        let b = builtin_gaussian_chain(&params).unwrap();
        let g = params.middle_prior().unwrap();
        for x in [[0.0, 0.0], [1.0, -0.5], [-2.0, 3.0]] {
            let v = b.model.submodel(1).log_prior_marginal(&x).unwrap();
            assert!((v - g.log_density(&x)).abs() < 1e-12);
        }
    }

    #[test]
    fn uncorrelated_prior_splits_the_pool() {
        let params = GaussianChainParams { rho: 0.0, ..Default::default() };
        let b = builtin_gaussian_chain(&params).unwrap();
        let pool = b.pool_builder(PoolMethod::Logarithmic(vec![0.5, 0.5, 0.5])).build().unwrap();
        let b1 = |x: f64| 0.5 * normal_log_pdf(x, -2.5, 1.0) + 0.5 * normal_log_pdf(x, 0.0, 1.0);
        let b2 = |x: f64| 0.5 * normal_log_pdf(x, 0.0, 1.0) + 0.5 * normal_log_pdf(x, 2.5, 1.0);
        for (x, y) in [(0.0, 0.0), (-1.0, 2.0), (3.0, -3.0)] {
            let v = pool.log_density(&PhiVector(vec![vec![x], vec![y]])).unwrap();
            assert!((v - b1(x) - b2(y)).abs() < 1e-12);
        }
    }

    #[test]
    fn subprior_ends_on_poe_leaves_middle_marginal() {
        let params = GaussianChainParams::default();
        let b = builtin_gaussian_chain(&params).unwrap();
        let pool = b.pool_builder(PoolMethod::ProductOfExperts).build().unwrap();
        let f = factorize_for_sampler(&pool, FactorizationMode::SubpriorEnds).unwrap();
        let g = params.middle_prior().unwrap();
        for i in 0..50 {
            for j in 0..50 {
                let x = -6.0 + 12.0 * i as f64 / 49.0;
                let y = -6.0 + 12.0 * j as f64 / 49.0;
                let v = f.log_pool2(&[x], &[y]).unwrap();
                assert!((v - g.log_density(&[x, y])).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn joint_includes_data() {
        let b = builtin_gaussian_chain(&GaussianChainParams::default()).unwrap();
        let phi = PhiVector(vec![vec![-2.0], vec![2.0]]);
        let psi = PsiVector(vec![vec![], vec![0.1], vec![]]);
        let v = b.model.log_replaced(0, &b.model.phi_for(0, &phi), psi.part(0)).unwrap();
        let expect = [-2.1, -2.9, -2.4].iter().map(|&y| normal_log_pdf(y, -2.0, 1.0)).sum::<f64>();
        assert!((v - expect).abs() < 1e-12);
    }
}
