//! Diagonal-Gaussian primitives: the distribution carrier type, log density,
//! closed-form KL divergence, and reparameterized sampling.
//!
//! Every posterior and conditional in the model is a diagonal Gaussian, so
//! these four pieces are the numerical bedrock of the whole crate.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1};

/// Lower clamp bound applied to every network log-variance head.
pub const LOGVAR_MIN: f64 = -7.0;
/// Upper clamp bound applied to every network log-variance head.
pub const LOGVAR_MAX: f64 = 7.0;

pub(crate) const LN_2PI: f64 = 1.8378770664093453;

/// Mean and log-variance of a diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Array1<f64>,
    pub logvar: Array1<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Array1<f64>, logvar: Array1<f64>) -> Result<Self> {
        if mean.len() != logvar.len() {
            return Err(Error::InputContract(format!(
                "mean length {} != logvar length {}",
                mean.len(),
                logvar.len()
            )));
        }
        if mean.iter().chain(logvar.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InputContract(
                "non-finite entry in Gaussian parameters".into(),
            ));
        }
        Ok(DiagGaussian { mean, logvar })
    }

    /// Standard normal of the given dimension.
    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: Array1::zeros(dim),
            logvar: Array1::zeros(dim),
        }
    }

    /// Isotropic Gaussian `N(mean, var I)`.
    pub fn isotropic(mean: Array1<f64>, var: f64) -> Self {
        let dim = mean.len();
        DiagGaussian {
            mean,
            logvar: Array1::from_elem(dim, var.ln()),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Per-dimension variance, `exp(logvar)`.
    pub fn var(&self) -> Array1<f64> {
        self.logvar.mapv(f64::exp)
    }
}

/// Log density of `v` under the diagonal Gaussian `g`.
pub fn gaussian_log_prob(v: ArrayView1<f64>, g: &DiagGaussian) -> Result<f64> {
    if v.len() != g.dim() {
        return Err(Error::InputContract(format!(
            "value length {} != Gaussian dim {}",
            v.len(),
            g.dim()
        )));
    }
    let mut total = 0.0;
    for ((&x, &m), &lv) in v.iter().zip(g.mean.iter()).zip(g.logvar.iter()) {
        let d = x - m;
        total += -0.5 * LN_2PI - 0.5 * lv - 0.5 * d * d * (-lv).exp();
    }
    Ok(total)
}

/// Closed-form `KL(q || p)` between diagonal Gaussians of equal dimension.
pub fn kl_diag_gaussian(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::InputContract(format!(
            "q dim {} != p dim {}",
            q.dim(),
            p.dim()
        )));
    }
    let mut total = 0.0;
    for i in 0..q.dim() {
        let (mq, lvq) = (q.mean[i], q.logvar[i]);
        let (mp, lvp) = (p.mean[i], p.logvar[i]);
        let dm = mq - mp;
        total += 0.5 * (lvp - lvq + (lvq.exp() + dm * dm) * (-lvp).exp() - 1.0);
    }
    Ok(total)
}

/// Reparameterized sample: `mean + exp(logvar / 2) * noise`.
pub fn reparam_sample(g: &DiagGaussian, noise: ArrayView1<f64>) -> Result<Array1<f64>> {
    if noise.len() != g.dim() {
        return Err(Error::InputContract(format!(
            "noise length {} != Gaussian dim {}",
            noise.len(),
            g.dim()
        )));
    }
    let mut out = g.mean.clone();
    for i in 0..out.len() {
        out[i] += (0.5 * g.logvar[i]).exp() * noise[i];
    }
    Ok(out)
}

// Batched row-wise helpers used by the objective and trainer. Rows index
// batch elements; columns index latent or observation dimensions.

/// Row-wise log density: `out[b] = log N(v[b]; mean[b], exp(logvar[b]))`.
pub(crate) fn log_prob_rows(v: &Array2<f64>, mean: &Array2<f64>, logvar: &Array2<f64>) -> Array1<f64> {
    let n = v.nrows();
    let mut out = Array1::zeros(n);
    for b in 0..n {
        let mut total = 0.0;
        for ((&x, &m), &lv) in v.row(b).iter().zip(mean.row(b).iter()).zip(logvar.row(b).iter()) {
            let d = x - m;
            total += -0.5 * LN_2PI - 0.5 * lv - 0.5 * d * d * (-lv).exp();
        }
        out[b] = total;
    }
    out
}

/// Row-wise KL from `N(mean[b], exp(logvar[b]))` to the isotropic prior
/// `N(prior_mean[b], prior_var I)`. `prior_mean` of zero rows gives the
/// stationary prior case.
pub(crate) fn kl_rows_isotropic(
    mean: &Array2<f64>,
    logvar: &Array2<f64>,
    prior_mean: Option<&Array2<f64>>,
    prior_var: f64,
) -> Array1<f64> {
    let n = mean.nrows();
    let ln_pv = prior_var.ln();
    let inv_pv = 1.0 / prior_var;
    let mut out = Array1::zeros(n);
    for b in 0..n {
        let mut total = 0.0;
        for (i, (&m, &lv)) in mean.row(b).iter().zip(logvar.row(b).iter()).enumerate() {
            let pm = prior_mean.map_or(0.0, |p| p[[b, i]]);
            let dm = m - pm;
            total += 0.5 * (ln_pv - lv + (lv.exp() + dm * dm) * inv_pv - 1.0);
        }
        out[b] = total;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn g(mean: Vec<f64>, logvar: Vec<f64>) -> DiagGaussian {
        DiagGaussian::new(Array1::from(mean), Array1::from(logvar)).unwrap()
    }

    #[test]
    fn log_prob_standard_normal_at_zero() {
        let v = array![0.0];
        let lp = gaussian_log_prob(v.view(), &DiagGaussian::standard(1)).unwrap();
        assert!((lp - (-0.91894)).abs() < 1e-5, "lp = {lp}");
    }

    #[test]
    fn log_prob_adds_over_dims() {
        let v = array![0.0, 0.0];
        let lp = gaussian_log_prob(v.view(), &DiagGaussian::standard(2)).unwrap();
        assert!((lp - (-1.83788)).abs() < 1e-5, "lp = {lp}");
    }

    #[test]
    fn log_prob_unit_offset() {
        let v = array![1.0];
        let lp = gaussian_log_prob(v.view(), &DiagGaussian::standard(1)).unwrap();
        assert!((lp - (-1.41894)).abs() < 1e-5, "lp = {lp}");
    }

    #[test]
    fn log_prob_length_mismatch() {
        let v = array![0.0, 0.0];
        assert!(gaussian_log_prob(v.view(), &DiagGaussian::standard(1)).is_err());
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let q = g(vec![0.3, -1.2], vec![0.1, -0.4]);
        assert_eq!(kl_diag_gaussian(&q, &q).unwrap(), 0.0);
    }

    #[test]
    fn kl_unit_mean_shift() {
        let q = g(vec![1.0], vec![0.0]);
        let p = g(vec![0.0], vec![0.0]);
        assert!((kl_diag_gaussian(&q, &p).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_variance_quarter() {
        let q = g(vec![0.0], vec![0.25f64.ln()]);
        let p = g(vec![0.0], vec![0.0]);
        let kl = kl_diag_gaussian(&q, &p).unwrap();
        // 0.5 (ln 4 + 0.25 - 1)
        assert!((kl - 0.31815).abs() < 1e-5, "kl = {kl}");
    }

    #[test]
    fn reparam_zero_noise_is_mean() {
        let q = g(vec![0.7, -0.2], vec![1.3, -2.0]);
        let s = reparam_sample(&q, Array1::zeros(2).view()).unwrap();
        assert_eq!(s, q.mean);
    }

    #[test]
    fn reparam_unit_gaussian_returns_noise() {
        let q = DiagGaussian::standard(3);
        let n = array![0.4, -1.1, 2.2];
        let s = reparam_sample(&q, n.view()).unwrap();
        assert_eq!(s, n);
    }

    #[test]
    fn reparam_empirical_mean_matches() {
        // Monte-Carlo check: sample mean within 4 standard errors of g.mean.
        let q = g(vec![1.5, -0.7], vec![0.4, -1.0]);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let n = 100_000usize;
        let mut sums = vec![0.0; 2];
        let mut sqsums = vec![0.0; 2];
        for _ in 0..n {
            let noise: Array1<f64> =
                Array1::from_iter((0..2).map(|_| StandardNormal.sample(&mut rng)));
            let s = reparam_sample(&q, noise.view()).unwrap();
            for d in 0..2 {
                sums[d] += s[d];
                sqsums[d] += s[d] * s[d];
            }
        }
        for d in 0..2 {
            let mean = sums[d] / n as f64;
            let var = sqsums[d] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - q.mean[d]).abs() < 4.0 * se,
                "dim {d}: empirical {mean} vs {} (se {se})",
                q.mean[d]
            );
        }
    }

    #[test]
    fn batch_helpers_agree_with_scalar_ops() {
        let mean = array![[0.2, -0.4], [1.0, 0.5]];
        let logvar = array![[0.3, -0.2], [0.0, 0.1]];
        let v = array![[0.0, 0.0], [1.5, -0.5]];
        let lp = log_prob_rows(&v, &mean, &logvar);
        for b in 0..2 {
            let g = DiagGaussian::new(mean.row(b).to_owned(), logvar.row(b).to_owned()).unwrap();
            let want = gaussian_log_prob(v.row(b), &g).unwrap();
            assert!((lp[b] - want).abs() < 1e-12);
        }
        let kl = kl_rows_isotropic(&mean, &logvar, None, 0.25);
        for b in 0..2 {
            let q = DiagGaussian::new(mean.row(b).to_owned(), logvar.row(b).to_owned()).unwrap();
            let p = DiagGaussian::isotropic(Array1::zeros(2), 0.25);
            let want = kl_diag_gaussian(&q, &p).unwrap();
            assert!((kl[b] - want).abs() < 1e-12);
        }
    }
}
