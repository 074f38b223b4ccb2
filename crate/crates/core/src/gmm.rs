//! Gaussian mixtures and the exact posterior of a linear process whose
//! endpoints are independent Gaussian mixtures.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedules::{Schedule, ScheduleValues};
use crate::velocity::{FieldKind, VelocitySource};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MixtureJson {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MixtureJson", into = "MixtureJson")]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
    chol_lower: Vec<DMatrix<f64>>,
}

impl TryFrom<MixtureJson> for GaussianMixture {
    type Error = Error;
    fn try_from(raw: MixtureJson) -> Result<Self> {
        GaussianMixture::new(raw.weights, raw.means, raw.covs)
    }
}

impl From<GaussianMixture> for MixtureJson {
    fn from(g: GaussianMixture) -> Self {
        MixtureJson {
            weights: g.weights.clone(),
            means: g.means.iter().map(|m| m.iter().copied().collect()).collect(),
            covs: g
                .covs
                .iter()
                .map(|c| (0..c.nrows()).map(|r| c.row(r).iter().copied().collect()).collect())
                .collect(),
        }
    }
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covs: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covs.len() != k {
            return Err(Error::Mixture(format!(
                "{} weights, {} means, {} covariances",
                k,
                means.len(),
                covs.len()
            )));
        }
        let d = means[0].len();
        if d == 0 {
            return Err(Error::Mixture("zero-dimensional mixture".into()));
        }
        let means = means
            .into_iter()
            .map(|m| {
                if m.len() == d {
                    Ok(DVector::from_vec(m))
                } else {
                    Err(Error::Dimension { expected: d, got: m.len() })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let covs = covs
            .into_iter()
            .map(|c| {
                if c.len() != d || c.iter().any(|r| r.len() != d) {
                    return Err(Error::Mixture(format!("covariance is not {d}x{d}")));
                }
                Ok(DMatrix::from_fn(d, d, |i, j| c[i][j]))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(weights, means, covs)
    }

    fn from_parts(weights: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Mixture("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Mixture(format!("weights sum to {total}")));
        }
        let mut chol_lower = Vec::with_capacity(covs.len());
        for (k, c) in covs.iter().enumerate() {
            let asym = (c - c.transpose()).abs().max();
            if asym > 1e-12 * c.abs().max().max(1.0) {
                return Err(Error::Mixture(format!("covariance {k} is not symmetric")));
            }
            let chol = Cholesky::new(c.clone())
                .ok_or_else(|| Error::Mixture(format!("covariance {k} is not positive definite")))?;
            chol_lower.push(chol.l());
        }
        Ok(GaussianMixture {
            weights,
            means,
            covs,
            chol_lower,
        })
    }

    pub fn gaussian(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![cov])
    }

    pub fn standard_normal(d: usize) -> Self {
        let cov = (0..d)
            .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::gaussian(vec![0.0; d], cov).expect("identity is a valid covariance")
    }

    /// Equal-weight mixture.
    pub fn uniform(means: Vec<Vec<f64>>, covs: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let k = means.len();
        Self::new(vec![1.0 / k as f64; k], means, covs)
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        self.means[k].as_slice()
    }

    pub fn cov(&self, k: usize) -> &DMatrix<f64> {
        &self.covs[k]
    }

    pub fn overall_mean(&self) -> Array1<f64> {
        let mut m = Array1::zeros(self.dim());
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for (o, v) in m.iter_mut().zip(mu.iter()) {
                *o += w * v;
            }
        }
        m
    }

    /// i.i.d. draws, deterministic given `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(n, &mut rng)
    }

    pub fn sample_with<R: rand::Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let d = self.dim();
        let pick = WeightedIndex::new(&self.weights).expect("validated weights");
        let mut out = Array2::zeros((n, d));
        let mut z = DVector::zeros(d);
        for mut row in out.rows_mut() {
            let k = pick.sample(rng);
            for zi in z.iter_mut() {
                *zi = StandardNormal.sample(rng);
            }
            let x = &self.means[k] + &self.chol_lower[k] * &z;
            for (o, v) in row.iter_mut().zip(x.iter()) {
                *o = *v;
            }
        }
        out
    }

    pub fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        let d = self.dim();
        let xv = DVector::from_iterator(d, x.iter().copied());
        let mut terms = Vec::with_capacity(self.n_components());
        for k in 0..self.n_components() {
            let diff = &xv - &self.means[k];
            let l = &self.chol_lower[k];
            let y = l.solve_lower_triangular(&diff).expect("nonsingular factor");
            let log_det: f64 = (0..d).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
            terms.push(
                self.weights[k].ln()
                    - 0.5 * y.norm_squared()
                    - 0.5 * log_det
                    - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln(),
            );
        }
        log_sum_exp(&terms)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mixture of `x_t = a x0 + sigma x1` over all component pairs.
pub fn marginal_mixture(
    p0: &GaussianMixture,
    p1: &GaussianMixture,
    sv: &ScheduleValues,
) -> Result<GaussianMixture> {
    if p0.dim() != p1.dim() {
        return Err(Error::Dimension {
            expected: p0.dim(),
            got: p1.dim(),
        });
    }
    let (a, s) = (sv.a, sv.sigma);
    let mut weights = Vec::new();
    let mut means = Vec::new();
    let mut covs = Vec::new();
    for i in 0..p0.n_components() {
        for j in 0..p1.n_components() {
            weights.push(p0.weights[i] * p1.weights[j]);
            means.push(&p0.means[i] * a + &p1.means[j] * s);
            covs.push(&p0.covs[i] * (a * a) + &p1.covs[j] * (s * s));
        }
    }
    // Products of weights can drift from 1 by rounding.
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    GaussianMixture::from_parts(weights, means, covs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMoments {
    pub x0_given_t: Array1<f64>,
    pub x1_given_t: Array1<f64>,
    /// Over component pairs `(i, j)`, `i` major.
    pub responsibilities: Array1<f64>,
}

struct PairTerm {
    log_weight: f64,
    mean: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    half_log_det: f64,
    mean0: DVector<f64>,
    mean1: DVector<f64>,
    gain0: DMatrix<f64>,
    gain1: DMatrix<f64>,
}

/// Posterior of `(x0, x1)` given `x_t` at one fixed time, with the per-pair
/// factorizations computed once.
pub struct Conditioner {
    d: usize,
    pairs: Vec<PairTerm>,
}

/// Per-row output of [`Conditioner`].
pub struct ConditionedBatch {
    pub x0_given_t: Array2<f64>,
    pub x1_given_t: Array2<f64>,
    pub score: Array2<f64>,
    pub responsibilities: Array2<f64>,
}

impl Conditioner {
    pub fn new(p0: &GaussianMixture, p1: &GaussianMixture, sv: &ScheduleValues) -> Result<Self> {
        if p0.dim() != p1.dim() {
            return Err(Error::Dimension {
                expected: p0.dim(),
                got: p1.dim(),
            });
        }
        let d = p0.dim();
        let (a, s) = (sv.a, sv.sigma);
        let mut pairs = Vec::with_capacity(p0.n_components() * p1.n_components());
        for i in 0..p0.n_components() {
            for j in 0..p1.n_components() {
                let cov = &p0.covs[i] * (a * a) + &p1.covs[j] * (s * s);
                let chol = Cholesky::new(cov).ok_or_else(|| {
                    Error::Mixture(format!("marginal covariance ({i},{j}) is singular at t={}", sv.t))
                })?;
                let l = chol.l_dirty();
                let half_log_det = (0..d).map(|k| l[(k, k)].ln()).sum();
                pairs.push(PairTerm {
                    log_weight: p0.weights[i].ln() + p1.weights[j].ln(),
                    mean: &p0.means[i] * a + &p1.means[j] * s,
                    chol,
                    half_log_det,
                    mean0: p0.means[i].clone(),
                    mean1: p1.means[j].clone(),
                    gain0: &p0.covs[i] * a,
                    gain1: &p1.covs[j] * s,
                });
            }
        }
        Ok(Conditioner { d, pairs })
    }

    pub fn condition(&self, x: ArrayView2<f64>) -> ConditionedBatch {
        let n = x.nrows();
        let d = self.d;
        assert_eq!(x.ncols(), d, "sample dimension");
        let k = self.pairs.len();
        let mut out = ConditionedBatch {
            x0_given_t: Array2::zeros((n, d)),
            x1_given_t: Array2::zeros((n, d)),
            score: Array2::zeros((n, d)),
            responsibilities: Array2::zeros((n, k)),
        };
        let mut ys: Vec<DVector<f64>> = vec![DVector::zeros(d); k];
        let mut diff = DVector::zeros(d);
        let mut logp = vec![0.0; k];
        let mut acc0 = DVector::zeros(d);
        let mut acc1 = DVector::zeros(d);
        let mut accs = DVector::zeros(d);
        for r in 0..n {
            let row = x.row(r);
            for (p, pair) in self.pairs.iter().enumerate() {
                let y = &mut ys[p];
                for c in 0..d {
                    diff[c] = row[c] - pair.mean[c];
                }
                y.copy_from(&diff);
                pair.chol.solve_mut(y);
                logp[p] = pair.log_weight - 0.5 * diff.dot(y) - pair.half_log_det;
            }
            let m = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for lp in logp.iter_mut() {
                *lp = (*lp - m).exp();
                total += *lp;
            }
            acc0.fill(0.0);
            acc1.fill(0.0);
            accs.fill(0.0);
            for (p, pair) in self.pairs.iter().enumerate() {
                let w = logp[p] / total;
                out.responsibilities[[r, p]] = w;
                if w == 0.0 {
                    continue;
                }
                acc0.axpy(w, &pair.mean0, 1.0);
                acc0.gemv(w, &pair.gain0, &ys[p], 1.0);
                acc1.axpy(w, &pair.mean1, 1.0);
                acc1.gemv(w, &pair.gain1, &ys[p], 1.0);
                accs.axpy(-w, &ys[p], 1.0);
            }
            for c in 0..d {
                out.x0_given_t[[r, c]] = acc0[c];
                out.x1_given_t[[r, c]] = acc1[c];
                out.score[[r, c]] = accs[c];
            }
        }
        out
    }
}

pub fn posterior_moments(
    p0: &GaussianMixture,
    p1: &GaussianMixture,
    sv: &ScheduleValues,
    x: ArrayView1<f64>,
) -> Result<PosteriorMoments> {
    check_point(p0, x)?;
    let batch = Conditioner::new(p0, p1, sv)?.condition(x.insert_axis(ndarray::Axis(0)));
    Ok(PosteriorMoments {
        x0_given_t: batch.x0_given_t.row(0).to_owned(),
        x1_given_t: batch.x1_given_t.row(0).to_owned(),
        responsibilities: batch.responsibilities.row(0).to_owned(),
    })
}

/// `a_dot x0|t + sigma_dot x1|t`
pub fn posterior_velocity(
    p0: &GaussianMixture,
    p1: &GaussianMixture,
    sv: &ScheduleValues,
    x: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    let m = posterior_moments(p0, p1, sv, x)?;
    Ok(m.x0_given_t * sv.a_dot + m.x1_given_t * sv.sigma_dot)
}

/// Gradient of the log marginal density at `x`.
pub fn score(
    p0: &GaussianMixture,
    p1: &GaussianMixture,
    sv: &ScheduleValues,
    x: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    check_point(p0, x)?;
    let batch = Conditioner::new(p0, p1, sv)?.condition(x.insert_axis(ndarray::Axis(0)));
    Ok(batch.score.row(0).to_owned())
}

fn check_point(p0: &GaussianMixture, x: ArrayView1<f64>) -> Result<()> {
    if x.len() != p0.dim() {
        return Err(Error::Dimension {
            expected: p0.dim(),
            got: x.len(),
        });
    }
    Ok(())
}

/// Exact posterior field of a schedule with mixture endpoints, usable wherever
/// a trained model is.
#[derive(Debug, Clone)]
pub struct GmmOracle {
    pub p0: GaussianMixture,
    pub p1: GaussianMixture,
    pub schedule: Schedule,
    output: FieldKind,
}

impl GmmOracle {
    pub fn new(p0: GaussianMixture, p1: GaussianMixture, schedule: Schedule) -> Result<Self> {
        if p0.dim() != p1.dim() {
            return Err(Error::Dimension {
                expected: p0.dim(),
                got: p1.dim(),
            });
        }
        Ok(GmmOracle {
            p0,
            p1,
            schedule,
            output: FieldKind::Oracle,
        })
    }

    /// Report `x1|t` (noise model) or `x0|t` (data model) instead of the velocity.
    pub fn with_output(mut self, kind: FieldKind) -> Self {
        self.output = kind;
        self
    }

    pub fn condition(&self, x: ArrayView2<f64>, t: f64) -> ConditionedBatch {
        let sv = self.schedule.at(t);
        Conditioner::new(&self.p0, &self.p1, &sv)
            .expect("full-rank endpoint covariances")
            .condition(x)
    }
}

impl VelocitySource for GmmOracle {
    fn dim(&self) -> usize {
        self.p0.dim()
    }

    fn kind(&self) -> FieldKind {
        self.output
    }

    fn evaluate(&self, x: ArrayView2<f64>, t: f64) -> Array2<f64> {
        let sv = self.schedule.at(t);
        let c = self.condition(x, t);
        match self.output {
            FieldKind::NoiseModel => c.x1_given_t,
            FieldKind::DataModel => c.x0_given_t,
            FieldKind::VelocityModel | FieldKind::Oracle => {
                c.x0_given_t * sv.a_dot + c.x1_given_t * sv.sigma_dot
            }
        }
    }
}
