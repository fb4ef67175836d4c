//! Normal-approximation melding: Gaussian summaries of the end submodels'
//! priors and subposteriors collapse into one Gaussian factor on the middle
//! submodel.

use nalgebra::{DMatrix, DVector};

use crate::chain::{ChainModel, Support};
use crate::error::{MeldError, Result};
use crate::gaussian::{block_diag_stack, gaussian_ratio_product, GaussianDensity, GaussianRatio, PD_TOLERANCE};
use crate::samplers::{run_target, MeldedChainOutput, SampleStore, StageSettings};

/// Whether the end-submodel priors are divided out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApproxMode {
    /// Factor `N(post) / N(prior)` per end block.
    Ratio,
    /// Priors treated as flat: the factor is `N(post)` alone.
    PoeFlatPrior,
}

/// Sample mean and unbiased covariance of the given store columns.
pub fn fit_gaussian_moments(store: &SampleStore, columns: &[usize], supports: &[Support]) -> Result<GaussianDensity> {
    if supports.iter().any(Support::is_discrete) {
        return Err(MeldError::Unsupported(
            "normal approximation is unavailable for discrete coordinates".into(),
        ));
    }
    let d = columns.len();
    let n = store.len();
    let mut distinct: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        let row: Vec<f64> = columns.iter().map(|&c| store.row(i)[c]).collect();
        if !distinct.contains(&row) {
            distinct.push(row);
            if distinct.len() > d {
                break;
            }
        }
    }
    if distinct.len() < d + 1 {
        return Err(MeldError::SingularCovariance(format!(
            "need at least {} distinct draws to fit a {d}-dimensional Gaussian, got {}",
            d + 1,
            distinct.len()
        )));
    }
    let mut mean = DVector::zeros(d);
    for i in 0..n {
        for (k, &c) in columns.iter().enumerate() {
            mean[k] += store.row(i)[c];
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        let row = store.row(i);
        let dev = DVector::from_iterator(d, columns.iter().enumerate().map(|(k, &c)| row[c] - mean[k]));
        cov += &dev * dev.transpose();
    }
    cov /= (n - 1) as f64;
    let min_eig = cov.clone().symmetric_eigen().eigenvalues.min();
    if min_eig <= PD_TOLERANCE {
        return Err(MeldError::SingularCovariance(format!(
            "fitted covariance has smallest eigenvalue {min_eig}"
        )));
    }
    GaussianDensity::new(mean, cov)
}

/// Fits a Gaussian to the phi columns of a stage-one store.
pub fn fit_store_phi(store: &SampleStore, supports: &[Support]) -> Result<GaussianDensity> {
    let cols: Vec<usize> = (0..store.phi_dim()).collect();
    fit_gaussian_moments(store, &cols, supports)
}

/// Sample skewness and excess kurtosis of each selected column, reported as a
/// check on whether a Gaussian summary is reasonable.
pub fn shape_diagnostics(store: &SampleStore, columns: &[usize]) -> Vec<(f64, f64)> {
    columns
        .iter()
        .map(|&c| {
            let x = store.column(c);
            let n = x.len() as f64;
            let m = x.iter().sum::<f64>() / n;
            let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            let m3 = x.iter().map(|v| (v - m).powi(3)).sum::<f64>() / n;
            let m4 = x.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
            (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
        })
        .collect()
}

/// `log N((phi12, phi23); mu, Sigma) + log p_2(phi12, phi23, psi2, Y_2)`.
pub struct NormalApproxTarget<'a> {
    model: &'a ChainModel,
    factor: GaussianDensity,
    precision: DMatrix<f64>,
    log_normalizer: f64,
    d12: usize,
    d23: usize,
}

impl std::fmt::Debug for NormalApproxTarget<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NormalApproxTarget").field("factor", &self.factor).finish()
    }
}

fn proper_ratio(post: &GaussianDensity, prior: &GaussianDensity, block: &str) -> Result<()> {
    match gaussian_ratio_product(post, prior)? {
        GaussianRatio::Proper(_) => Ok(()),
        GaussianRatio::Improper { .. } => Err(MeldError::ImproperRatio { block: block.to_string() }),
    }
}

/// Builds the approximate melded target. In ratio mode both priors are
/// required and each block's ratio must be a proper Gaussian.
pub fn build_normal_approx_target<'a>(
    model: &'a ChainModel,
    g1_post: &GaussianDensity,
    g1_prior: Option<&GaussianDensity>,
    g3_post: &GaussianDensity,
    g3_prior: Option<&GaussianDensity>,
    mode: ApproxMode,
) -> Result<NormalApproxTarget<'a>> {
    if model.len() != 3 {
        return Err(MeldError::Unsupported(format!(
            "normal approximation needs M = 3 submodels, got {}",
            model.len()
        )));
    }
    let blocks = model.phi_blocks();
    for b in blocks {
        if !b.is_continuous() {
            return Err(MeldError::Unsupported(format!(
                "normal approximation is unavailable for discrete block `{}`",
                b.label
            )));
        }
    }
    let (d12, d23) = (blocks[0].dim(), blocks[1].dim());
    for (g, d, label) in [(g1_post, d12, &blocks[0].label), (g3_post, d23, &blocks[1].label)] {
        if g.dim() != d {
            return Err(MeldError::DimensionMismatch {
                what: format!("Gaussian summary for `{label}`"),
                expected: d,
                got: g.dim(),
            });
        }
    }
    let nu = block_diag_stack(&[g1_post.clone(), g3_post.clone()])?;
    let factor = match mode {
        ApproxMode::PoeFlatPrior => nu,
        ApproxMode::Ratio => {
            let (p1, p3) = match (g1_prior, g3_prior) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(MeldError::Configuration(
                        "ratio mode needs prior summaries for both end blocks".into(),
                    ))
                }
            };
            proper_ratio(g1_post, p1, &blocks[0].label)?;
            proper_ratio(g3_post, p3, &blocks[1].label)?;
            let de = block_diag_stack(&[p1.clone(), p3.clone()])?;
            match gaussian_ratio_product(&nu, &de)? {
                GaussianRatio::Proper(g) => g,
                GaussianRatio::Improper { .. } => {
                    return Err(MeldError::ImproperRatio {
                        block: format!("{}+{}", blocks[0].label, blocks[1].label),
                    })
                }
            }
        }
    };
    let precision = factor.precision()?;
    let log_normalizer = factor.log_normalizer();
    Ok(NormalApproxTarget {
        model,
        factor,
        precision,
        log_normalizer,
        d12,
        d23,
    })
}

impl NormalApproxTarget<'_> {
    /// The Gaussian factor `N(mu, Sigma)` over `(phi12, phi23)`.
    pub fn factor(&self) -> &GaussianDensity {
        &self.factor
    }

    pub fn log_factor(&self, phi: &[f64]) -> f64 {
        let dev = DVector::from_column_slice(phi) - self.factor.mean();
        -0.5 * dev.dot(&(&self.precision * &dev)) - self.log_normalizer
    }

    /// Log target at the flattened state `(phi12, phi23, psi2)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        let d = self.d12 + self.d23;
        let joint = self.model.submodel(1).log_joint(&x[..d], &x[d..]);
        if joint.is_nan() || joint == f64::INFINITY {
            return Err(MeldError::Numerical(format!("submodel 2 joint evaluated to {joint}")));
        }
        if joint == f64::NEG_INFINITY {
            return Ok(joint);
        }
        Ok(self.log_factor(&x[..d]) + joint)
    }

    pub fn columns(&self) -> Vec<String> {
        let mut c: Vec<String> = self.model.phi_blocks().iter().flat_map(|b| b.coordinate_names()).collect();
        c.extend(self.model.submodel(1).psi_names());
        c
    }

    pub fn supports(&self) -> Vec<Support> {
        let mut s: Vec<Support> = self.model.phi_blocks().iter().flat_map(|b| b.support.iter().copied()).collect();
        s.extend_from_slice(self.model.submodel(1).psi_support());
        s
    }

    /// Samples the approximate target, started at the factor's mean.
    pub fn sample(&self, settings: &StageSettings, seed: u64) -> Result<MeldedChainOutput> {
        let supports = self.supports();
        let mut center: Vec<f64> = self.factor.mean().iter().copied().collect();
        center.extend(self.model.submodel(1).psi_support().iter().map(|s| if *s == Support::Positive { 1.0 } else { 0.0 }));
        run_target(self.columns(), &supports, Some(&center), |x| self.log_density(x), settings, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin::{builtin_gaussian_chain, GaussianChainParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn store_from(values: &[[f64; 2]]) -> SampleStore {
        let mut s = SampleStore::new(vec!["a".into(), "b".into()], vec![]);
        for (i, v) in values.iter().enumerate() {
            s.push(v, 0.0, 0, i as u64);
        }
        s
    }

    #[test]
    fn identical_draws_are_degenerate() {
        let s = store_from(&[[1.0, 2.0]; 50]);
        assert!(matches!(
            fit_gaussian_moments(&s, &[0, 1], &[Support::Real; 2]),
            Err(MeldError::SingularCovariance(_))
        ));
    }

    #[test]
    fn discrete_rejected() {
        let s = store_from(&[[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]);
        assert!(matches!(
            fit_gaussian_moments(&s, &[0, 1], &[Support::Discrete(2), Support::Real]),
            Err(MeldError::Unsupported(_))
        ));
    }

    #[test]
    fn univariate_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dist = Normal::new(2.0, 3f64.sqrt()).unwrap();
        let mut s = SampleStore::new(vec!["x".into()], vec![]);
        for i in 0..100_000 {
            s.push(&[dist.sample(&mut rng)], 0.0, 0, i);
        }
        let g = fit_store_phi(&s, &[Support::Real]).unwrap();
        assert!((g.mean()[0] - 2.0).abs() < 0.05);
        assert!((g.cov()[(0, 0)] - 3.0).abs() < 0.1);
        let shape = shape_diagnostics(&s, &[0]);
        assert!(shape[0].0.abs() < 0.05 && shape[0].1.abs() < 0.1);
    }

    #[test]
    fn bivariate_correlation() {
        let g = GaussianDensity::bivariate([0.0, 0.0], 1.0, 0.8).unwrap();
        let l = g.cov().clone().cholesky().unwrap().l();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut rows = Vec::new();
        for _ in 0..20_000 {
            let z = DVector::from_fn(2, |_, _| rand_distr::StandardNormal.sample(&mut rng));
            let x = &l * z;
            rows.push([x[0], x[1]]);
        }
        let fit = fit_gaussian_moments(&store_from(&rows), &[0, 1], &[Support::Real; 2]).unwrap();
        assert!((fit.correlation(0, 1) - 0.8).abs() < 0.02);
    }

    #[test]
    fn scalar_worked_case_enters_as_n21() {
        let b = builtin_gaussian_chain(&GaussianChainParams::default()).unwrap();
        let post = GaussianDensity::univariate(1.0, 0.5).unwrap();
        let prior = GaussianDensity::univariate(0.0, 1.0).unwrap();
        // block 3 posterior equal in spread to a much wider prior: nearly trivial factor
        let post3 = GaussianDensity::univariate(0.0, 1.0).unwrap();
        let prior3 = GaussianDensity::univariate(0.0, 1e6).unwrap();
        let t = build_normal_approx_target(&b.model, &post, Some(&prior), &post3, Some(&prior3), ApproxMode::Ratio).unwrap();
        assert!((t.factor().mean()[0] - 2.0).abs() < 1e-9);
        assert!((t.factor().cov()[(0, 0)] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn posterior_equal_to_prior_is_improper_in_ratio_mode() {
        let b = builtin_gaussian_chain(&GaussianChainParams::default()).unwrap();
        let g1 = GaussianDensity::univariate(-2.5, 1.0).unwrap();
        let g3 = GaussianDensity::univariate(2.5, 1.0).unwrap();
        let err = build_normal_approx_target(&b.model, &g1, Some(&g1), &g3, Some(&g3), ApproxMode::Ratio).unwrap_err();
        assert_eq!(err, MeldError::ImproperRatio { block: "phi12".into() });
        let t = build_normal_approx_target(&b.model, &g1, None, &g3, None, ApproxMode::PoeFlatPrior).unwrap();
        assert_eq!(t.factor().mean().as_slice(), &[-2.5, 2.5]);
    }

    #[test]
    fn wider_posterior_names_its_block() {
        let b = builtin_gaussian_chain(&GaussianChainParams::default()).unwrap();
        let g1p = GaussianDensity::univariate(0.0, 1.0).unwrap();
        let g1 = GaussianDensity::univariate(0.0, 0.5).unwrap();
        let g3 = GaussianDensity::univariate(0.0, 2.0).unwrap();
        let g3p = GaussianDensity::univariate(0.0, 1.0).unwrap();
        let err = build_normal_approx_target(&b.model, &g1, Some(&g1p), &g3, Some(&g3p), ApproxMode::Ratio).unwrap_err();
        assert_eq!(err, MeldError::ImproperRatio { block: "phi23".into() });
    }

    #[test]
    fn diffuse_prior_converges_to_flat_mode() {
        let b = builtin_gaussian_chain(&GaussianChainParams::default()).unwrap();
        let g1 = GaussianDensity::univariate(-1.0, 0.3).unwrap();
        let g3 = GaussianDensity::univariate(1.5, 0.4).unwrap();
        let p1 = GaussianDensity::univariate(0.5, 1e6).unwrap();
        let p3 = GaussianDensity::univariate(-0.5, 1e6).unwrap();
        let ratio = build_normal_approx_target(&b.model, &g1, Some(&p1), &g3, Some(&p3), ApproxMode::Ratio).unwrap();
        let flat = build_normal_approx_target(&b.model, &g1, None, &g3, None, ApproxMode::PoeFlatPrior).unwrap();
        let d = (ratio.factor().mean() - flat.factor().mean()).amax();
        assert!(d < 1e-3, "{d}");
    }
}
