//! Synthetic low/high-fidelity benchmark pairs on [0, 1].
//!
//! `Smooth` is the classic two-fidelity pair with a smooth residual:
//!   y_H(x) = (6x - 2)^2 sin(12x - 4),  y_L(x) = 0.5 y_H(x) + 10(x - 0.5) - 5.
//! `Shock` embeds a moving-front mismatch: the high-fidelity front is a tanh
//! of width `W_H` at `X_S`, the low-fidelity one is smeared to width 4 W_H
//! and shifted by `DELTA`, so the residual is sharply localized.
//! Optional Gaussian noise contaminates the high-fidelity response only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{Column, DataSet};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    Smooth,
    Shock,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "smooth" => Ok(SyntheticKind::Smooth),
            "shock" => Ok(SyntheticKind::Shock),
            other => Err(CoreError::invalid(
                "gen_synthetic",
                format!("unknown kind '{other}' (expected smooth|shock)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SyntheticConfig {
    pub kind: SyntheticKind,
    pub n_lf: usize,
    pub n_hf: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

pub const SHOCK_CENTER: f64 = 0.5;
pub const SHOCK_WIDTH_HF: f64 = 0.02;
pub const SHOCK_SHIFT: f64 = 0.05;

pub fn smooth_hf(x: f64) -> f64 {
    let a = 6.0 * x - 2.0;
    a * a * (12.0 * x - 4.0).sin()
}

pub fn smooth_lf(x: f64) -> f64 {
    0.5 * smooth_hf(x) + 10.0 * (x - 0.5) - 5.0
}

pub fn shock_hf(x: f64) -> f64 {
    ((x - SHOCK_CENTER) / SHOCK_WIDTH_HF).tanh()
}

pub fn shock_lf(x: f64) -> f64 {
    ((x - SHOCK_CENTER - SHOCK_SHIFT) / (4.0 * SHOCK_WIDTH_HF)).tanh()
}

/// Generates the (low-fidelity, high-fidelity) tables on inclusive uniform
/// grids of `n_lf` and `n_hf` points. Identical seeds give identical bits.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<(DataSet, DataSet)> {
    if cfg.n_lf < 2 || cfg.n_hf < 2 {
        return Err(CoreError::invalid(
            "gen_synthetic",
            format!("need at least 2 points per fidelity, got {}/{}", cfg.n_lf, cfg.n_hf),
        ));
    }
    if cfg.noise_sigma < 0.0 {
        return Err(CoreError::invalid(
            "gen_synthetic",
            format!("noise sigma {} must be non-negative", cfg.noise_sigma),
        ));
    }
    let (lf_fn, hf_fn): (fn(f64) -> f64, fn(f64) -> f64) = match cfg.kind {
        SyntheticKind::Smooth => (smooth_lf, smooth_hf),
        SyntheticKind::Shock => (shock_lf, shock_hf),
    };
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let columns = vec![Column::state("x"), Column::response("y")];

    let mut lf_data = Vec::with_capacity(cfg.n_lf * 2);
    for x in linspace(cfg.n_lf) {
        lf_data.push(x);
        lf_data.push(lf_fn(x));
    }
    let lf = DataSet::new(columns.clone(), lf_data)?;

    let mut hf_data = Vec::with_capacity(cfg.n_hf * 2);
    for x in linspace(cfg.n_hf) {
        let noise = if cfg.noise_sigma > 0.0 {
            cfg.noise_sigma * gaussian(&mut rng)
        } else {
            0.0
        };
        hf_data.push(x);
        hf_data.push(hf_fn(x) + noise);
    }
    let hf = DataSet::new(columns, hf_data)?;
    Ok((lf, hf))
}

fn linspace(n: usize) -> impl Iterator<Item = f64> {
    let step = 1.0 / (n - 1) as f64;
    (0..n).map(move |i| if i == n - 1 { 1.0 } else { i as f64 * step })
}

/// Box-Muller standard normal draw.
fn gaussian(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_hf_frozen_value_at_zero() {
        // (6*0 - 2)^2 sin(-4) = 4 sin(-4), evaluated independently.
        let want = 4.0 * (-4.0f64).sin();
        assert_eq!(smooth_hf(0.0), want);
        assert!((smooth_hf(0.0) - 3.02721).abs() < 1e-5);
    }

    #[test]
    fn same_grid_zero_noise_residual_is_analytic() {
        let cfg = SyntheticConfig {
            kind: SyntheticKind::Smooth,
            n_lf: 41,
            n_hf: 41,
            noise_sigma: 0.0,
            seed: 1,
        };
        let (lf, hf) = gen_synthetic(&cfg).unwrap();
        assert_eq!(lf.n_rows(), 41);
        for r in 0..41 {
            assert_eq!(lf.value(r, 0), hf.value(r, 0));
            let x = lf.value(r, 0);
            let delta = hf.value(r, 1) - lf.value(r, 1);
            let want = smooth_hf(x) - smooth_lf(x);
            assert_eq!(delta, want);
        }
        // Grid endpoints are exact.
        assert_eq!(lf.value(0, 0), 0.0);
        assert_eq!(lf.value(40, 0), 1.0);
    }

    #[test]
    fn shock_residual_is_sharply_localized() {
        let n = 401;
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let delta: Vec<f64> = xs.iter().map(|&x| shock_hf(x) - shock_lf(x)).collect();
        let mut diffs: Vec<f64> = delta.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        let max = diffs.iter().cloned().fold(0.0, f64::max);
        diffs.sort_by(f64::total_cmp);
        let median = diffs[diffs.len() / 2];
        assert!(
            max > 10.0 * median,
            "front not localized: max step {max:.3e}, median {median:.3e}"
        );
    }

    #[test]
    fn noise_contaminates_hf_only_and_is_seed_deterministic() {
        let cfg = SyntheticConfig {
            kind: SyntheticKind::Smooth,
            n_lf: 20,
            n_hf: 20,
            noise_sigma: 0.1,
            seed: 42,
        };
        let (lf_a, hf_a) = gen_synthetic(&cfg).unwrap();
        let (lf_b, hf_b) = gen_synthetic(&cfg).unwrap();
        assert_eq!(hf_a, hf_b);
        assert_eq!(lf_a, lf_b);
        // LF is noise-free.
        for r in 0..20 {
            assert_eq!(lf_a.value(r, 1), smooth_lf(lf_a.value(r, 0)));
        }
        // HF deviates from the clean curve somewhere.
        let deviates = (0..20).any(|r| hf_a.value(r, 1) != smooth_hf(hf_a.value(r, 0)));
        assert!(deviates);
        let other_seed = gen_synthetic(&SyntheticConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(other_seed.1, hf_a);
    }

    #[test]
    fn too_few_points_rejected() {
        let cfg = SyntheticConfig {
            kind: SyntheticKind::Shock,
            n_lf: 1,
            n_hf: 10,
            noise_sigma: 0.0,
            seed: 0,
        };
        assert!(gen_synthetic(&cfg).is_err());
    }
}
