//! Gaussian process regression, exact and with an inducing-point
//! approximation, plus the interval-width uncertainty metric.
//!
//! The exact model carries the full training covariance. The inducing-point
//! variant replaces it with a low-rank cross-covariance plus a diagonal
//! correction, which keeps the heavy factorizations at the subset size. With
//! every training point inducing, the two collapse to the same posterior;
//! that identity is the main correctness anchor for the approximation.

use std::io::Write;

use crate::error::{CoreError, Result};
use crate::linalg::{cholesky, dot, Cholesky, Mat};

const JITTER_BASE: f64 = 1e-12;
const JITTER_MAX: f64 = 1e-6;
/// Isotropic lengthscale factors swept during the initial search.
const N_STARTS: usize = 8;
const FACTOR_LO: f64 = 5e-2;
const FACTOR_HI: f64 = 2e1;
/// Noise-to-signal variance ratio bracket for the optimized noise mode.
const RATIO_LO: f64 = 1e-10;
const RATIO_HI: f64 = 1e1;
const GOLDEN_ITERS: usize = 24;
const REFINE_SWEEPS: usize = 2;
/// Diagonal correction floor. The correction is nonnegative in exact
/// arithmetic; rounding can push it slightly negative.
const LAMBDA_FLOOR: f64 = 1e-12;
/// Greedy selection never scores more candidates than this per step.
pub const POOL_CAP: usize = 2048;

/// How the observation noise variance is treated during fitting, always as a
/// ratio to the signal variance so the likelihood stays concentrated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseMode {
    /// Pin `sigma_n^2 / sigma_f^2` to the given value. Zero means the model
    /// interpolates the data.
    FixedRatio(f64),
    /// Search the ratio jointly with the lengthscales.
    Optimize,
}

/// Exact Gaussian process with a Gaussian kernel and a constant mean.
///
/// The kernel is `sigma_f^2 exp(-0.5 sum((h_k / l_k)^2))`; targets are
/// centered on their mean before fitting and the mean is added back at
/// prediction. The signal variance has a closed form given the lengthscales
/// and the noise ratio, so the search runs over those two alone.
pub struct GpModel {
    x: Mat,
    y_mean: f64,
    y_centered: Vec<f64>,
    lengthscales: Vec<f64>,
    signal_var: f64,
    noise_ratio: f64,
    /// Factorization of `R + ratio I` in correlation units. Absent when the
    /// targets are constant and the model degenerates to its mean.
    chol: Option<Cholesky>,
    alpha: Vec<f64>,
}

impl GpModel {
    pub fn fit(x: &Mat, y: &[f64], noise: NoiseMode) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(CoreError::ShapeMismatch {
                op: "gp fit",
                got: vec![x.rows(), y.len()],
                expected: "one target per site".into(),
            });
        }
        let n = x.rows();
        if n < 2 {
            return Err(CoreError::invalid("gp fit", "need at least two sites"));
        }
        if let NoiseMode::FixedRatio(r) = noise {
            if !(r >= 0.0) || !r.is_finite() {
                return Err(CoreError::invalid(
                    "gp fit",
                    "noise ratio must be finite and nonnegative",
                ));
            }
        }

        let y_mean = y.iter().sum::<f64>() / n as f64;
        let y_centered: Vec<f64> = y.iter().map(|&v| v - y_mean).collect();
        let spans = dimension_spans(x);
        if y_centered.iter().all(|&v| v == 0.0) {
            // Constant targets: the posterior is the mean with zero spread.
            return Ok(GpModel {
                x: x.clone(),
                y_mean,
                y_centered,
                lengthscales: spans.iter().map(|&s| if s > 0.0 { s } else { 1.0 }).collect(),
                signal_var: 0.0,
                noise_ratio: 0.0,
                chol: None,
                alpha: vec![0.0; n],
            });
        }

        let active: Vec<usize> = (0..x.cols()).filter(|&k| spans[k] > 0.0).collect();
        let ratio_grid: Vec<f64> = match noise {
            NoiseMode::FixedRatio(r) => vec![r],
            NoiseMode::Optimize => (0..N_STARTS)
                .map(|i| {
                    let t = i as f64 / (N_STARTS - 1) as f64;
                    1e-8 * (1e-1f64 / 1e-8).powf(t)
                })
                .collect(),
        };

        let mut best: Option<(f64, Vec<f64>, f64)> = None;
        for i in 0..N_STARTS {
            let t = i as f64 / (N_STARTS - 1) as f64;
            let factor = FACTOR_LO * (FACTOR_HI / FACTOR_LO).powf(t);
            let ls: Vec<f64> = spans
                .iter()
                .map(|&s| if s > 0.0 { factor * s } else { 1.0 })
                .collect();
            for &r in &ratio_grid {
                if let Some(ll) = concentrated_ll(x, &y_centered, &ls, r) {
                    if best.as_ref().map_or(true, |(b, _, _)| ll > *b) {
                        best = Some((ll, ls.clone(), r));
                    }
                }
            }
        }
        let (_, mut ls, mut ratio) = best.ok_or_else(|| {
            CoreError::invalid("gp fit", "no hyperparameter candidate is factorizable")
        })?;

        for _ in 0..REFINE_SWEEPS {
            for &k in &active {
                let lo = (1e-2 * spans[k]).ln();
                let hi = (1e2 * spans[k]).ln();
                let eval = |t: f64| {
                    let mut trial = ls.clone();
                    trial[k] = t.exp();
                    concentrated_ll(x, &y_centered, &trial, ratio).unwrap_or(f64::NEG_INFINITY)
                };
                ls[k] = golden_max(lo, hi, GOLDEN_ITERS, eval).exp();
            }
            if noise == NoiseMode::Optimize {
                let eval = |t: f64| {
                    concentrated_ll(x, &y_centered, &ls, t.exp()).unwrap_or(f64::NEG_INFINITY)
                };
                ratio = golden_max(RATIO_LO.ln(), RATIO_HI.ln(), GOLDEN_ITERS, eval).exp();
            }
        }

        assemble_gp(x.clone(), y_mean, y_centered, ls, ratio)
    }

    /// Posterior mean at `x`.
    pub fn predict_mean(&self, x: &[f64]) -> Result<f64> {
        let rho = self.corr_vec(x)?;
        Ok(self.y_mean + dot(&rho, &self.alpha))
    }

    /// Posterior mean and latent variance at `x`. The variance excludes the
    /// observation noise and is clamped at zero.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        let rho = self.corr_vec(x)?;
        let mean = self.y_mean + dot(&rho, &self.alpha);
        let var = match &self.chol {
            Some(chol) => {
                let z = chol.solve_vec(&rho);
                (self.signal_var * (1.0 - dot(&rho, &z))).max(0.0)
            }
            None => 0.0,
        };
        Ok((mean, var))
    }

    /// Exact log marginal likelihood of the training targets, constants
    /// included.
    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        let chol = self.chol.as_ref().ok_or_else(|| {
            CoreError::invalid("gp likelihood", "model is degenerate (constant targets)")
        })?;
        let n = self.x.rows() as f64;
        let quad = dot(&self.y_centered, &self.alpha) / self.signal_var;
        let logdet = n * self.signal_var.ln() + chol.logdet();
        Ok(-0.5 * (quad + logdet + n * (2.0 * std::f64::consts::PI).ln()))
    }

    pub fn train_x(&self) -> &Mat {
        &self.x
    }

    pub fn n_train(&self) -> usize {
        self.x.rows()
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn signal_var(&self) -> f64 {
        self.signal_var
    }

    pub fn noise_ratio(&self) -> f64 {
        self.noise_ratio
    }

    pub fn noise_var(&self) -> f64 {
        self.signal_var * self.noise_ratio
    }

    pub fn y_mean(&self) -> f64 {
        self.y_mean
    }

    fn corr_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.x.cols() {
            return Err(CoreError::ShapeMismatch {
                op: "gp predict",
                got: vec![x.len()],
                expected: format!("{} coordinates", self.x.cols()),
            });
        }
        Ok((0..self.x.rows())
            .map(|i| correlation(self.x.row(i), x, &self.lengthscales))
            .collect())
    }

    /// Covariance between training site `i` and query `x`.
    fn cov(&self, i: usize, x: &[f64]) -> f64 {
        self.signal_var * correlation(self.x.row(i), x, &self.lengthscales)
    }
}

fn correlation(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    let mut q = 0.0;
    for k in 0..a.len() {
        let h = (a[k] - b[k]) / ls[k];
        q += h * h;
    }
    (-0.5 * q).exp()
}

fn dimension_spans(x: &Mat) -> Vec<f64> {
    let mut lo = vec![f64::INFINITY; x.cols()];
    let mut hi = vec![f64::NEG_INFINITY; x.cols()];
    for i in 0..x.rows() {
        for (k, &v) in x.row(i).iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    lo.iter().zip(&hi).map(|(a, b)| b - a).collect()
}

/// Concentrated log marginal likelihood over lengthscales and noise ratio,
/// with the signal variance maximized out. `None` when the correlation
/// matrix cannot be factorized or the variance estimate collapses.
fn concentrated_ll(x: &Mat, y_centered: &[f64], ls: &[f64], ratio: f64) -> Option<f64> {
    let n = x.rows();
    let mut r = Mat::symmetric_from_fn(n, |i, j| correlation(x.row(i), x.row(j), ls));
    r.add_diag(ratio);
    let chol = cholesky(&r, JITTER_BASE, JITTER_MAX).ok()?;
    let alpha = chol.solve_vec(y_centered);
    let sigma2 = dot(y_centered, &alpha) / n as f64;
    if !(sigma2 > 0.0) {
        return None;
    }
    Some(-0.5 * n as f64 * sigma2.ln() - 0.5 * chol.logdet())
}

fn assemble_gp(
    x: Mat,
    y_mean: f64,
    y_centered: Vec<f64>,
    lengthscales: Vec<f64>,
    noise_ratio: f64,
) -> Result<GpModel> {
    let n = x.rows();
    let mut r = Mat::symmetric_from_fn(n, |i, j| correlation(x.row(i), x.row(j), &lengthscales));
    r.add_diag(noise_ratio);
    let chol = cholesky(&r, JITTER_BASE, JITTER_MAX)?;
    let alpha = chol.solve_vec(&y_centered);
    let signal_var = dot(&y_centered, &alpha) / n as f64;
    Ok(GpModel {
        x,
        y_mean,
        y_centered,
        lengthscales,
        signal_var,
        noise_ratio,
        chol: Some(chol),
        alpha,
    })
}

fn golden_max(mut a: f64, mut b: f64, iters: usize, f: impl Fn(f64) -> f64) -> f64 {
    let inv_phi = 0.618_033_988_749_894_9;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc > fd {
        c
    } else {
        d
    }
}

/// Shared pieces of the inducing-point computation for one subset.
struct FicFactors {
    /// Factorization of `K_mm`.
    kmm: Cholesky,
    /// Factorization of `B = K_mm + K_mn Lambda^-1 K_nm`.
    b: Cholesky,
    /// `N x m` cross covariance.
    knm: Mat,
    /// Diagonal `diag(K_nn - Q) + sigma_n^2`, floored.
    lambda: Vec<f64>,
    /// `B^-1 K_mn Lambda^-1 y_centered`, the prediction weights.
    beta: Vec<f64>,
}

fn fic_factors(gp: &GpModel, subset: &[usize]) -> Result<FicFactors> {
    let n = gp.x.rows();
    let m = subset.len();
    if m == 0 {
        return Err(CoreError::invalid("fic", "inducing subset is empty"));
    }
    let mut seen = vec![false; n];
    for &j in subset {
        if j >= n {
            return Err(CoreError::invalid(
                "fic",
                format!("inducing index {j} out of range for {n} sites"),
            ));
        }
        if seen[j] {
            return Err(CoreError::invalid(
                "fic",
                format!("inducing index {j} repeated"),
            ));
        }
        seen[j] = true;
    }
    if gp.signal_var == 0.0 {
        return Err(CoreError::invalid("fic", "model is degenerate (constant targets)"));
    }
    let sf2 = gp.signal_var;
    let noise = gp.noise_var();

    let kmm_raw = Mat::symmetric_from_fn(m, |a, b| {
        sf2 * correlation(gp.x.row(subset[a]), gp.x.row(subset[b]), &gp.lengthscales)
    });
    let kmm = cholesky(&kmm_raw, JITTER_BASE * sf2, JITTER_MAX * sf2)?;

    let mut knm = Mat::zeros(n, m);
    for i in 0..n {
        for (a, &j) in subset.iter().enumerate() {
            knm[(i, a)] = sf2 * correlation(gp.x.row(i), gp.x.row(j), &gp.lengthscales);
        }
    }

    // q_ii = k_i' K_mm^-1 k_i, the diagonal of the low-rank approximation.
    let w = kmm.solve_mat(&knm.t());
    let mut lambda = vec![0.0; n];
    for i in 0..n {
        let mut q_ii = 0.0;
        for a in 0..m {
            q_ii += knm[(i, a)] * w[(a, i)];
        }
        lambda[i] = (sf2 - q_ii + noise).max(LAMBDA_FLOOR);
    }

    let mut b_raw = kmm_raw;
    for a in 0..m {
        for c in 0..m {
            let mut acc = 0.0;
            for i in 0..n {
                acc += knm[(i, a)] * knm[(i, c)] / lambda[i];
            }
            b_raw[(a, c)] += acc;
        }
    }
    let b = cholesky(&b_raw, JITTER_BASE * sf2, JITTER_MAX * sf2)?;

    let mut v = vec![0.0; m];
    for a in 0..m {
        for i in 0..n {
            v[a] += knm[(i, a)] * gp.y_centered[i] / lambda[i];
        }
    }
    let beta = b.solve_vec(&v);
    Ok(FicFactors {
        kmm,
        b,
        knm,
        lambda,
        beta,
    })
}

/// Log marginal likelihood of the inducing-point approximation, constants
/// included. With every training site in `subset` this equals the exact
/// [`GpModel::log_marginal_likelihood`].
pub fn fic_log_ml(gp: &GpModel, subset: &[usize]) -> Result<f64> {
    let f = fic_factors(gp, subset)?;
    let n = gp.x.rows();
    // Woodbury: y'(Q + L)^-1 y = y'L^-1 y - (K_mn L^-1 y)' B^-1 (K_mn L^-1 y).
    let mut quad = 0.0;
    for i in 0..n {
        quad += gp.y_centered[i] * gp.y_centered[i] / f.lambda[i];
    }
    let mut v = vec![0.0; subset.len()];
    for a in 0..subset.len() {
        for i in 0..n {
            v[a] += f.knm[(i, a)] * gp.y_centered[i] / f.lambda[i];
        }
    }
    quad -= dot(&v, &f.beta);
    let logdet: f64 =
        f.b.logdet() - f.kmm.logdet() + f.lambda.iter().map(|l| l.ln()).sum::<f64>();
    Ok(-0.5 * (quad + logdet + n as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// Posterior mean and latent variance of the inducing-point approximation.
pub fn fic_predict(gp: &GpModel, subset: &[usize], x: &[f64]) -> Result<(f64, f64)> {
    if x.len() != gp.x.cols() {
        return Err(CoreError::ShapeMismatch {
            op: "fic predict",
            got: vec![x.len()],
            expected: format!("{} coordinates", gp.x.cols()),
        });
    }
    let f = fic_factors(gp, subset)?;
    let kxm: Vec<f64> = subset.iter().map(|&j| gp.cov(j, x)).collect();
    let mean = gp.y_mean + dot(&kxm, &f.beta);
    let z_kmm = f.kmm.solve_vec(&kxm);
    let z_b = f.b.solve_vec(&kxm);
    let var = (gp.signal_var - dot(&kxm, &z_kmm) + dot(&kxm, &z_b)).max(0.0);
    Ok((mean, var))
}

/// Picks `m` inducing sites by greedy forward selection, scoring each
/// candidate by the approximation's log marginal likelihood over the full
/// training set. Ties keep the lowest index. The returned indices are sorted
/// ascending.
///
/// Candidate pools larger than [`POOL_CAP`] are thinned evenly first.
pub fn select_inducing(gp: &GpModel, m: usize) -> Result<Vec<usize>> {
    let n = gp.x.rows();
    if m == 0 {
        return Err(CoreError::invalid("fic selection", "need at least one inducing site"));
    }
    let pool: Vec<usize> = if n <= POOL_CAP {
        (0..n).collect()
    } else {
        (0..POOL_CAP).map(|i| i * n / POOL_CAP).collect()
    };
    if m > pool.len() {
        return Err(CoreError::invalid(
            "fic selection",
            format!("{m} inducing sites requested, pool has {}", pool.len()),
        ));
    }

    let mut chosen: Vec<usize> = Vec::with_capacity(m);
    let mut trial: Vec<usize> = Vec::with_capacity(m);
    while chosen.len() < m {
        let mut best: Option<(f64, usize)> = None;
        for &j in &pool {
            if chosen.contains(&j) {
                continue;
            }
            trial.clear();
            trial.extend_from_slice(&chosen);
            trial.push(j);
            let ll = match fic_log_ml(gp, &trial) {
                Ok(v) => v,
                Err(_) => continue,
            };
            // Strict comparison keeps the lowest index on ties; the pool is
            // ascending.
            if best.map_or(true, |(b, _)| ll > b) {
                best = Some((ll, j));
            }
        }
        let (_, j) = best.ok_or_else(|| {
            CoreError::invalid("fic selection", "no candidate produced a usable factorization")
        })?;
        chosen.push(j);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Acklam's rational approximation to the standard normal quantile.
/// Relative error is below 1.2e-9 over the open unit interval.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(CoreError::invalid(
            "normal quantile",
            format!("probability {p} outside (0, 1)"),
        ));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let tail = |p: f64| -> f64 {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let x = if p < P_LOW {
        tail(p)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail(1.0 - p)
    };
    Ok(x)
}

/// Mean two-sided interval width `U = (2 z_{1-alpha/2} / N) sum(sigma_i)`.
pub fn uncertainty_width(sigmas: &[f64], alpha: f64) -> Result<f64> {
    if sigmas.is_empty() {
        return Err(CoreError::invalid("uncertainty", "no predictive deviations given"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CoreError::invalid(
            "uncertainty",
            format!("alpha {alpha} outside (0, 1)"),
        ));
    }
    let z = normal_quantile(1.0 - alpha / 2.0)?;
    Ok(2.0 * z / sigmas.len() as f64 * sigmas.iter().sum::<f64>())
}

/// Pointwise predictive intervals plus the aggregate width metric.
#[derive(Debug, Clone)]
pub struct UncertaintyReport {
    pub alpha: f64,
    pub z: f64,
    pub means: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Mean interval width over all points.
    pub u: f64,
}

impl UncertaintyReport {
    pub fn new(means: Vec<f64>, sigmas: Vec<f64>, alpha: f64) -> Result<Self> {
        if means.len() != sigmas.len() {
            return Err(CoreError::ShapeMismatch {
                op: "uncertainty report",
                got: vec![means.len(), sigmas.len()],
                expected: "one deviation per mean".into(),
            });
        }
        let u = uncertainty_width(&sigmas, alpha)?;
        let z = normal_quantile(1.0 - alpha / 2.0)?;
        Ok(UncertaintyReport {
            alpha,
            z,
            means,
            sigmas,
            u,
        })
    }

    pub fn lower(&self, i: usize) -> f64 {
        self.means[i] - self.z * self.sigmas[i]
    }

    pub fn upper(&self, i: usize) -> f64 {
        self.means[i] + self.z * self.sigmas[i]
    }

    /// Writes `index,sigma,lower,upper` rows.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "index,sigma,lower,upper")?;
        for i in 0..self.sigmas.len() {
            writeln!(
                w,
                "{},{},{},{}",
                i,
                fmt(self.sigmas[i]),
                fmt(self.lower(i)),
                fmt(self.upper(i))
            )?;
        }
        Ok(())
    }

    /// Writes the one-row `U,alpha,N_test` summary.
    pub fn write_summary(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "U,alpha,N_test")?;
        writeln!(w, "{},{},{}", fmt(self.u), fmt(self.alpha), self.sigmas.len())
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sites_1d(xs: &[f64]) -> Mat {
        Mat::from_rows(&xs.iter().map(|&x| vec![x]).collect::<Vec<_>>())
    }

    /// Gauss-Jordan inverse, independent of the production Cholesky.
    fn dense_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut aug: Vec<Vec<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut r = row.clone();
                r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                r
            })
            .collect();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| aug[i][col].abs().partial_cmp(&aug[j][col].abs()).unwrap())
                .unwrap();
            aug.swap(col, piv);
            let d = aug[col][col];
            for v in &mut aug[col] {
                *v /= d;
            }
            for row in 0..n {
                if row != col {
                    let f = aug[row][col];
                    for k in 0..2 * n {
                        aug[row][k] -= f * aug[col][k];
                    }
                }
            }
        }
        aug.into_iter().map(|r| r[n..].to_vec()).collect()
    }

    const XS: [f64; 8] = [0.0, 0.14, 0.3, 0.42, 0.58, 0.71, 0.86, 1.0];

    fn wiggly(x: f64) -> f64 {
        (7.0 * x).sin() + 0.4 * (15.0 * x).cos()
    }

    fn fitted_model(ratio: f64) -> GpModel {
        let x = sites_1d(&XS);
        let y: Vec<f64> = XS.iter().map(|&v| wiggly(v)).collect();
        GpModel::fit(&x, &y, NoiseMode::FixedRatio(ratio)).unwrap()
    }

    #[test]
    fn predictive_variance_matches_dense_inverse_oracle() {
        let model = fitted_model(0.05);
        let n = model.n_train();
        let sf2 = model.signal_var();
        let noise = model.noise_var();
        // Same covariance the model factorized, jitter included.
        let ky: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let c = sf2
                            * correlation(
                                model.train_x().row(i),
                                model.train_x().row(j),
                                model.lengthscales(),
                            );
                        if i == j {
                            c + noise + JITTER_BASE * sf2
                        } else {
                            c
                        }
                    })
                    .collect()
            })
            .collect();
        let ky_inv = dense_inverse(&ky);
        for &q in &[0.07, 0.33, 0.5, 0.77, 0.95] {
            let k: Vec<f64> = (0..n).map(|i| model.cov(i, &[q])).collect();
            let mut quad = 0.0;
            for i in 0..n {
                for j in 0..n {
                    quad += k[i] * ky_inv[i][j] * k[j];
                }
            }
            let oracle_var = sf2 - quad;
            let (_, var) = model.predict(&[q]).unwrap();
            assert!(
                (var - oracle_var).abs() <= 1e-9 * sf2.max(1.0),
                "q={q}: {var} vs oracle {oracle_var}"
            );
        }
    }

    #[test]
    fn log_ml_matches_dense_route() {
        let model = fitted_model(0.1);
        let n = model.n_train();
        let sf2 = model.signal_var();
        let noise = model.noise_var();
        let ky: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let c = sf2
                            * correlation(
                                model.train_x().row(i),
                                model.train_x().row(j),
                                model.lengthscales(),
                            );
                        if i == j {
                            c + noise + JITTER_BASE * sf2
                        } else {
                            c
                        }
                    })
                    .collect()
            })
            .collect();
        let ky_inv = dense_inverse(&ky);
        let y: Vec<f64> = XS.iter().map(|&v| wiggly(v)).collect();
        let mean = y.iter().sum::<f64>() / n as f64;
        let yc: Vec<f64> = y.iter().map(|v| v - mean).collect();
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += yc[i] * ky_inv[i][j] * yc[j];
            }
        }
        // Determinant by elimination, independent of the Cholesky logdet.
        let mut a = ky.clone();
        let mut logdet = 0.0;
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
                .unwrap();
            if piv != col {
                a.swap(col, piv);
            }
            logdet += a[col][col].ln();
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
        let oracle = -0.5 * (quad + logdet + n as f64 * (2.0 * std::f64::consts::PI).ln());
        let got = model.log_marginal_likelihood().unwrap();
        assert!((got - oracle).abs() <= 1e-8, "{got} vs oracle {oracle}");
    }

    #[test]
    fn variance_vanishes_at_noise_free_training_sites() {
        let model = fitted_model(0.0);
        for &x in &XS {
            let (mean, var) = model.predict(&[x]).unwrap();
            assert!(var < 1e-10, "x={x}: variance {var}");
            assert!((mean - wiggly(x)).abs() <= 1e-6, "x={x}: mean {mean}");
        }
    }

    #[test]
    fn fic_with_all_sites_inducing_equals_exact() {
        let model = fitted_model(0.02);
        let all: Vec<usize> = (0..model.n_train()).collect();
        let exact_ll = model.log_marginal_likelihood().unwrap();
        let fic_ll = fic_log_ml(&model, &all).unwrap();
        assert!(
            (exact_ll - fic_ll).abs() <= 1e-8,
            "log-ml {exact_ll} vs fic {fic_ll}"
        );
        for i in 0..=20 {
            let q = i as f64 / 20.0;
            let (em, ev) = model.predict(&[q]).unwrap();
            let (fm, fv) = fic_predict(&model, &all, &[q]).unwrap();
            assert!((em - fm).abs() <= 1e-8, "q={q}: mean {em} vs {fm}");
            assert!((ev - fv).abs() <= 1e-8, "q={q}: var {ev} vs {fv}");
        }
    }

    #[test]
    fn fic_log_ml_matches_hand_assembled_two_point_case() {
        // N = 2, M = 1: every matrix is a scalar, so the whole likelihood
        // can be written out longhand.
        let x = sites_1d(&[0.0, 1.0]);
        let y = [1.0, -1.0];
        let model = GpModel::fit(&x, &y, NoiseMode::FixedRatio(0.5)).unwrap();
        let sf2 = model.signal_var();
        let noise = model.noise_var();
        let ls = model.lengthscales()[0];

        let rho = (-0.5 / (ls * ls)).exp();
        let kmm = sf2 + JITTER_BASE * sf2;
        let k0 = sf2; // covariance of site 0 with inducing site 0
        let k1 = sf2 * rho;
        let q00 = k0 * k0 / kmm;
        let q11 = k1 * k1 / kmm;
        let l0 = (sf2 - q00 + noise).max(LAMBDA_FLOOR);
        let l1 = (sf2 - q11 + noise).max(LAMBDA_FLOOR);
        let b = kmm + k0 * k0 / l0 + k1 * k1 / l1 + JITTER_BASE * sf2;
        let yc = [1.0, -1.0]; // targets are already centered (mean 0)
        let v = k0 * yc[0] / l0 + k1 * yc[1] / l1;
        let quad = yc[0] * yc[0] / l0 + yc[1] * yc[1] / l1 - v * v / b;
        let logdet = b.ln() - kmm.ln() + l0.ln() + l1.ln();
        let oracle = -0.5 * (quad + logdet + 2.0 * (2.0 * std::f64::consts::PI).ln());

        let got = fic_log_ml(&model, &[0]).unwrap();
        assert!((got - oracle).abs() <= 1e-10, "{got} vs oracle {oracle}");
    }

    #[test]
    fn more_training_sites_never_widen_noise_free_variance() {
        let full = sites_1d(&XS);
        let y: Vec<f64> = XS.iter().map(|&v| wiggly(v)).collect();
        let ls = vec![0.3];
        let small = assemble_gp(
            sites_1d(&XS[..4]),
            0.0,
            y[..4].to_vec(),
            ls.clone(),
            0.0,
        )
        .unwrap();
        let big = assemble_gp(full, 0.0, y, ls, 0.0).unwrap();
        // The signal variance is re-estimated per model, so compare in
        // correlation units where the kernels coincide.
        for i in 0..=10 {
            let q = i as f64 / 10.0;
            let (_, v_small) = small.predict(&[q]).unwrap();
            let (_, v_big) = big.predict(&[q]).unwrap();
            let r_small = v_small / small.signal_var();
            let r_big = v_big / big.signal_var();
            assert!(
                r_big <= r_small + 1e-9,
                "q={q}: {r_big} with 8 sites vs {r_small} with 4"
            );
        }
    }

    #[test]
    fn greedy_selection_is_sorted_and_tie_breaks_low() {
        // Sites 0 and 1 coincide, so as inducing candidates they score
        // identically bit for bit; the lower index must win.
        let x = sites_1d(&[0.3, 0.3, 0.8, 0.55]);
        let y = [1.0, 1.0, -0.7, 0.2];
        let model = GpModel::fit(&x, &y, NoiseMode::FixedRatio(0.1)).unwrap();
        let one = select_inducing(&model, 1).unwrap();
        assert_ne!(one[0], 1, "tie between duplicate sites 0 and 1 must pick 0");
        let three = select_inducing(&model, 3).unwrap();
        assert_eq!(three.len(), 3);
        assert!(three.windows(2).all(|w| w[0] < w[1]), "{three:?} not sorted");
    }

    #[test]
    fn greedy_selection_is_deterministic() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let x = sites_1d(&xs);
        let y: Vec<f64> = xs.iter().map(|&v| wiggly(v)).collect();
        let model = GpModel::fit(&x, &y, NoiseMode::FixedRatio(0.05)).unwrap();
        let a = select_inducing(&model, 5).unwrap();
        let b = select_inducing(&model, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn optimized_noise_smooths_rather_than_interpolates() {
        use rand::SeedableRng;
        use rand_chacha::ChaCha20Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..40).map(|i| i as f64 / 39.0).collect();
        let clean: Vec<f64> = xs.iter().map(|&v| (4.0 * v).sin()).collect();
        let noisy: Vec<f64> = clean
            .iter()
            .map(|&v| {
                // Box-Muller pair, first component only.
                let u1: f64 = rand::Rng::gen_range(&mut rng, 1e-12..1.0);
                let u2: f64 = rand::Rng::gen_range(&mut rng, 0.0..1.0);
                v + 0.1
                    * (-2.0 * u1.ln()).sqrt()
                    * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        let model = GpModel::fit(&sites_1d(&xs), &noisy, NoiseMode::Optimize).unwrap();
        let rmse = |pred: &dyn Fn(f64) -> f64| {
            let s: f64 = xs
                .iter()
                .zip(&clean)
                .map(|(&x, &c)| (pred(x) - c).powi(2))
                .sum();
            (s / xs.len() as f64).sqrt()
        };
        let model_rmse = rmse(&|x| model.predict_mean(&[x]).unwrap());
        let obs_rmse = {
            let s: f64 = noisy
                .iter()
                .zip(&clean)
                .map(|(n, c)| (n - c).powi(2))
                .sum();
            (s / xs.len() as f64).sqrt()
        };
        assert!(
            model_rmse < obs_rmse,
            "posterior mean rmse {model_rmse} vs observation rmse {obs_rmse}"
        );
        assert!(model.noise_ratio() > 1e-6, "noise ratio collapsed");
    }

    #[test]
    fn constant_targets_degenerate_to_the_mean() {
        let x = sites_1d(&[0.0, 0.5, 1.0]);
        let model = GpModel::fit(&x, &[2.5, 2.5, 2.5], NoiseMode::Optimize).unwrap();
        let (mean, var) = model.predict(&[0.3]).unwrap();
        assert_eq!(mean, 2.5);
        assert_eq!(var, 0.0);
        assert!(model.log_marginal_likelihood().is_err());
    }

    #[test]
    fn quantile_hits_frozen_reference_values() {
        let z = normal_quantile(0.975).unwrap();
        assert!((z - 1.959963984540054).abs() <= 1e-8, "z = {z}");
        assert!((z - 1.959964).abs() <= 1e-6);
        assert_eq!(normal_quantile(0.5).unwrap(), 0.0);
        let lo = normal_quantile(0.025).unwrap();
        assert!((lo + z).abs() <= 1e-9, "asymmetry: {lo} vs -{z}");
        let deep = normal_quantile(1e-6).unwrap();
        assert!((deep + 4.753424308822899).abs() <= 1e-7, "deep tail {deep}");
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.0).is_err());
    }

    #[test]
    fn uncertainty_width_matches_frozen_value_and_scales_linearly() {
        let sig = vec![1.0; 7];
        let u = uncertainty_width(&sig, 0.05).unwrap();
        assert!((u - 3.919928).abs() <= 1e-6, "U = {u}");
        let doubled: Vec<f64> = sig.iter().map(|s| 2.0 * s).collect();
        let u2 = uncertainty_width(&doubled, 0.05).unwrap();
        assert!((u2 - 2.0 * u).abs() <= 1e-12);
    }

    #[test]
    fn report_rows_carry_interval_bounds() {
        let report =
            UncertaintyReport::new(vec![1.0, -2.0], vec![0.5, 0.25], 0.05).unwrap();
        assert!((report.lower(0) - (1.0 - report.z * 0.5)).abs() <= 1e-15);
        assert!((report.upper(1) - (-2.0 + report.z * 0.25)).abs() <= 1e-15);
        let mut rows = Vec::new();
        report.write_csv(&mut rows).unwrap();
        let text = String::from_utf8(rows).unwrap();
        assert!(text.starts_with("index,sigma,lower,upper\n"));
        assert_eq!(text.lines().count(), 3);
        let mut summary = Vec::new();
        report.write_summary(&mut summary).unwrap();
        let text = String::from_utf8(summary).unwrap();
        assert!(text.starts_with("U,alpha,N_test\n"));
        assert!(text.trim_end().ends_with(",2"));
    }
}
