#![allow(dead_code)]

use chained_melding::builtin::{DiscreteTables, EndTables, GaussianChainParams, MiddleTables};
use chained_melding::samplers::{ChainSchedule, MHKernelConfig, StageSettings};
use chained_melding::Support;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Accumulates a Gaussian log density `-0.5 x'Px + h'x` term by term.
pub struct Quadratic {
    pub p: DMatrix<f64>,
    pub h: DVector<f64>,
}

impl Quadratic {
    pub fn new(dim: usize) -> Self {
        Self {
            p: DMatrix::zeros(dim, dim),
            h: DVector::zeros(dim),
        }
    }

    /// `w * log N(c'x; d, v)` up to a constant.
    pub fn linear(&mut self, c: &[f64], d: f64, v: f64, w: f64) {
        let c = DVector::from_column_slice(c);
        self.p += &c * c.transpose() * (w / v);
        self.h += c * (w * d / v);
    }

    /// `w * log N(x[idx]; mean, cov)` up to a constant.
    pub fn block(&mut self, idx: &[usize], mean: &[f64], cov: &DMatrix<f64>, w: f64) {
        let prec = cov.clone().try_inverse().unwrap() * w;
        let hm = &prec * DVector::from_column_slice(mean);
        for (a, &i) in idx.iter().enumerate() {
            self.h[i] += hm[a];
            for (b, &j) in idx.iter().enumerate() {
                self.p[(i, j)] += prec[(a, b)];
            }
        }
    }

    pub fn cov(&self) -> DMatrix<f64> {
        self.p.clone().try_inverse().unwrap()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.cov() * &self.h
    }
}

/// Analytic melded posterior of the Gaussian chain under logarithmic pooling
/// with weights `lambda`, over `(phi12, phi23, psi2)`. Latent end psi are not handled.
pub fn gaussian_melded_posterior(p: &GaussianChainParams, lambda: [f64; 3]) -> Quadratic {
    assert!(p.omega1_sq.is_none() && p.omega3_sq.is_none());
    let mut q = Quadratic::new(3);
    q.linear(&[1.0, 0.0, 0.0], p.mu1, p.sigma1_sq, lambda[0]);
    let c = p.rho * (p.sigma2_sq[0] * p.sigma2_sq[1]).sqrt();
    let s2 = DMatrix::from_row_slice(2, 2, &[p.sigma2_sq[0], c, c, p.sigma2_sq[1]]);
    q.block(&[0, 1], &p.mu2, &s2, lambda[1]);
    q.linear(&[0.0, 1.0, 0.0], p.mu3, p.sigma3_sq, lambda[2]);
    for &y in &p.y1 {
        q.linear(&[1.0, 0.0, 0.0], y, p.tau1_sq, 1.0);
    }
    for &y in &p.y3 {
        q.linear(&[0.0, 1.0, 0.0], y, p.tau3_sq, 1.0);
    }
    q.linear(&[-1.0, -1.0, 1.0], 0.0, p.omega2_sq, 1.0);
    for &y in &p.y2 {
        q.linear(&[0.0, 0.0, 1.0], y, p.tau2_sq, 1.0);
    }
    q
}

/// Conjugate posterior `(mean, var)` of a normal mean with prior `N(mu, var)`.
pub fn conjugate_posterior(mu: f64, var: f64, ys: &[f64], tau: f64) -> (f64, f64) {
    let prec = 1.0 / var + ys.len() as f64 / tau;
    let mean = (mu / var + ys.iter().sum::<f64>() / tau) / prec;
    (mean, 1.0 / prec)
}

pub fn ln_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean).powi(2) / var + (2.0 * std::f64::consts::PI * var).ln())
}

/// A discrete joint model `q(a) r(c) P(b|a) L1(b) P(s|a,c) L2(s) P(t|c) L3(t)`
/// split into three submodels sharing the block priors `q` and `r`.
pub struct SplitJoint {
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub cond1: Vec<Vec<f64>>,
    pub like1: Vec<f64>,
    pub cond2: Vec<Vec<Vec<f64>>>,
    pub like2: Vec<f64>,
    pub cond3: Vec<Vec<f64>>,
    pub like3: Vec<f64>,
}

fn probs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

impl SplitJoint {
    pub fn random(seed: u64, card12: usize, card23: usize, k: [usize; 3]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = probs(&mut rng, card12);
        let r = probs(&mut rng, card23);
        let cond1 = (0..card12).map(|_| probs(&mut rng, k[0])).collect();
        let cond2 = (0..card12).map(|_| (0..card23).map(|_| probs(&mut rng, k[1])).collect()).collect();
        let cond3 = (0..card23).map(|_| probs(&mut rng, k[2])).collect();
        let mut like = |n| (0..n).map(|_| rng.random_range(0.05..1.0)).collect::<Vec<f64>>();
        let (like1, like2, like3) = (like(k[0]), like(k[1]), like(k[2]));
        Self {
            q,
            r,
            cond1,
            like1,
            cond2,
            like2,
            cond3,
            like3,
        }
    }

    /// Unnormalized joint at `(a, c, b, s, t)`, the column order of the chain.
    pub fn density(&self, x: &[f64]) -> f64 {
        let [a, c, b, s, t] = [x[0], x[1], x[2], x[3], x[4]].map(|v| v as usize);
        self.q[a]
            * self.r[c]
            * self.cond1[a][b]
            * self.like1[b]
            * self.cond2[a][c][s]
            * self.like2[s]
            * self.cond3[c][t]
            * self.like3[t]
    }

    pub fn tables(&self) -> DiscreteTables {
        let (n12, n23) = (self.q.len(), self.r.len());
        let end = |prior: &Vec<f64>, cond: &Vec<Vec<f64>>, like: &Vec<f64>| EndTables {
            card: prior.len(),
            psi_card: Some(like.len()),
            prior: vec![prior.clone()],
            joint: vec![prior
                .iter()
                .zip(cond)
                .map(|(p, row)| row.iter().zip(like).map(|(c, l)| p * c * l).collect())
                .collect()],
        };
        let mut marginal = Vec::new();
        let mut joint = Vec::new();
        for a in 0..n12 {
            for c in 0..n23 {
                let m = self.q[a] * self.r[c];
                marginal.push(m);
                joint.push(self.cond2[a][c].iter().zip(&self.like2).map(|(p, l)| m * p * l).collect());
            }
        }
        DiscreteTables {
            end1: end(&self.q, &self.cond1, &self.like1),
            middle: MiddleTables {
                psi_card: Some(self.like2.len()),
                marginal,
                joint,
            },
            end3: end(&self.r, &self.cond3, &self.like3),
        }
    }
}

/// Mixed-radix states in the oracle's order: first column most significant.
pub fn all_states(cards: &[usize]) -> Vec<Vec<f64>> {
    let n: usize = cards.iter().product();
    (0..n)
        .map(|mut i| {
            let mut s = vec![0.0; cards.len()];
            for (o, &c) in s.iter_mut().zip(cards).rev() {
                *o = (i % c) as f64;
                i /= c;
            }
            s
        })
        .collect()
}

pub fn settings(supports: &[Support], scales: &[f64], warmup: usize, iterations: usize, chains: usize) -> StageSettings {
    StageSettings::new(
        MHKernelConfig::for_supports(supports, scales).unwrap(),
        ChainSchedule::new(warmup, iterations),
        chains,
    )
}

pub fn sample_mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}
