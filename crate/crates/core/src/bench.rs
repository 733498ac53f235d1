//! Timing of one continual update against the number of stored tracks, with
//! a linear fit and a test for curvature.

use std::fmt;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::error::{Error, Result};
use crate::fac::{FacState, LabelMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub tracks_max: usize,
    pub step: usize,
    pub d_et: usize,
    /// Detections per timed frame.
    pub rows: usize,
    pub reps: usize,
    pub seed: u64,
    pub gamma: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            tracks_max: 1000,
            step: 50,
            d_et: 256,
            rows: 10,
            reps: 15,
            seed: 0,
            gamma: 1.0,
        }
    }
}

/// Ordinary least-squares polynomial fit `y ≈ Σ c_k x^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyFit {
    pub coeffs: Vec<f64>,
    pub rss: f64,
    pub r_squared: f64,
}

pub fn poly_fit(x: &[f64], y: &[f64], degree: usize) -> Result<PolyFit> {
    let n = x.len();
    if n != y.len() || n <= degree + 1 {
        return Err(Error::invalid(format!(
            "need more than {} points for a degree-{degree} fit, got {n}",
            degree + 1
        )));
    }
    // Centre and scale x so the normal equations stay well conditioned.
    let mean = x.iter().sum::<f64>() / n as f64;
    let scale = x.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max).max(1e-300);
    let a = DMatrix::from_fn(n, degree + 1, |i, k| ((x[i] - mean) / scale).powi(k as i32));
    let b = DVector::from_column_slice(y);
    let svd = a.clone().svd(true, true);
    let c = svd
        .solve(&b, 1e-12)
        .map_err(|e| Error::invalid(format!("least squares failed: {e}")))?;
    let resid = &a * &c - &b;
    let rss = resid.norm_squared();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let tss: f64 = y.iter().map(|v| (v - y_mean).powi(2)).sum();
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };

    // Expand the centred polynomial back into powers of x.
    let mut coeffs = vec![0.0; degree + 1];
    for (k, &ck) in c.iter().enumerate() {
        let ck = ck / scale.powi(k as i32);
        for j in 0..=k {
            coeffs[j] += ck * binomial(k, j) * (-mean).powi((k - j) as i32);
        }
    }
    Ok(PolyFit {
        coeffs,
        rss,
        r_squared,
    })
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Nested-model F-test of a quadratic term over a linear fit.
/// Returns `(F, p)`.
pub fn quadratic_f_test(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let lin = poly_fit(x, y, 1)?;
    let quad = poly_fit(x, y, 2)?;
    let df = (x.len() - 3) as f64;
    if quad.rss <= 0.0 {
        return Ok(if lin.rss <= 0.0 { (0.0, 1.0) } else { (f64::INFINITY, 0.0) });
    }
    let f = ((lin.rss - quad.rss).max(0.0)) / (quad.rss / df);
    let dist = FisherSnedecor::new(1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
    Ok((f, 1.0 - dist.cdf(f)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    /// `(d_T, fastest seconds per update)`. Interference only adds time, so
    /// the minimum over repetitions is the least noisy estimate.
    pub points: Vec<(usize, f64)>,
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
    pub f_stat: f64,
    pub p_value: f64,
}

pub const MIN_R_SQUARED: f64 = 0.95;
pub const ALPHA: f64 = 0.05;

impl BenchReport {
    pub fn linear_ok(&self) -> bool {
        self.r_squared >= MIN_R_SQUARED && self.p_value > ALPHA
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8}  {:>12}", "tracks", "update_ms")?;
        for (d, t) in &self.points {
            writeln!(f, "{d:>8}  {:>12.4}", t * 1e3)?;
        }
        writeln!(f, "intercept_ms = {}", self.intercept * 1e3)?;
        writeln!(f, "slope_ms_per_track = {}", self.slope * 1e3)?;
        writeln!(f, "r_squared = {}", self.r_squared)?;
        writeln!(f, "quadratic_f = {}", self.f_stat)?;
        writeln!(f, "quadratic_p = {}", self.p_value)?;
        writeln!(f, "linear = {}", self.linear_ok())
    }
}

/// Larger than the last private cache level of common desktop CPUs.
const EVICT_BYTES: usize = 32 << 20;

fn evict_caches(buf: &mut [f64]) {
    for v in buf.iter_mut() {
        *v += 1.0;
    }
    std::hint::black_box(buf);
}

fn relu_gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal).max(0.0))
}

/// A learner holding `d_t` tracks, built from one spawning frame followed by
/// one matching frame so its buffers are in steady state.
fn state_with_tracks(cfg: &BenchConfig, d_t: usize, rng: &mut ChaCha8Rng) -> Result<FacState> {
    let mut s = FacState::new(cfg.gamma, cfg.d_et)?;
    let x = relu_gaussian(rng, d_t, cfg.d_et);
    let labels = LabelMatrix::new(0, d_t, (0..d_t).map(Some).collect())?;
    s.continual_update(&x, &labels)?;
    let x = relu_gaussian(rng, cfg.rows, cfg.d_et);
    let labels = LabelMatrix::new(d_t, 0, (0..cfg.rows).map(Some).collect())?;
    s.continual_update(&x, &labels)?;
    Ok(s)
}

pub fn run(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.step == 0 || cfg.tracks_max < cfg.step || cfg.reps == 0 || cfg.rows == 0 {
        return Err(Error::invalid("bench needs step ≥ 1, tracks_max ≥ step, reps ≥ 1, rows ≥ 1"));
    }
    let sizes: Vec<usize> = (1..=cfg.tracks_max / cfg.step).map(|k| k * cfg.step).collect();
    if sizes.len() < 4 {
        return Err(Error::invalid("bench needs at least 4 track counts"));
    }
    if cfg.rows > cfg.step {
        return Err(Error::invalid("rows per frame cannot exceed the smallest track count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let states: Vec<FacState> = sizes
        .iter()
        .map(|&d| state_with_tracks(cfg, d, &mut rng))
        .collect::<Result<_>>()?;
    let x = relu_gaussian(&mut rng, cfg.rows, cfg.d_et);

    let mut samples = vec![Vec::with_capacity(cfg.reps); sizes.len()];
    let mut evict = vec![0.0f64; EVICT_BYTES / 8];
    // One untimed pass warms the allocator.
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    for rep in 0..=cfg.reps {
        // A fresh order each pass keeps slow drift from looking like a trend.
        order.shuffle(&mut rng);
        for &i in &order {
            let base = &states[i];
            let labels = LabelMatrix::new(base.n_tracks(), 0, (0..cfg.rows).map(Some).collect())?;
            let mut s = base.clone();
            // Every size starts cold, otherwise the clone leaves small states cached.
            evict_caches(&mut evict);
            let t0 = Instant::now();
            s.continual_update(&x, &labels)?;
            let dt = t0.elapsed().as_secs_f64();
            if rep > 0 {
                samples[i].push(dt);
            }
        }
    }
    let points: Vec<(usize, f64)> = sizes
        .iter()
        .zip(samples.iter_mut())
        .map(|(&d, s)| (d, s.iter().copied().fold(f64::INFINITY, f64::min)))
        .collect();
    let xs: Vec<f64> = points.iter().map(|p| p.0 as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let lin = poly_fit(&xs, &ys, 1)?;
    let (f_stat, p_value) = quadratic_f_test(&xs, &ys)?;
    Ok(BenchReport {
        points,
        intercept: lin.coeffs[0],
        slope: lin.coeffs[1],
        r_squared: lin.r_squared,
        f_stat,
        p_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_recovered() {
        let x: Vec<f64> = (1..=10).map(|v| v as f64 * 50.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.5 + 0.01 * v).collect();
        let fit = poly_fit(&x, &y, 1).unwrap();
        assert!((fit.coeffs[0] - 0.5).abs() < 1e-9);
        assert!((fit.coeffs[1] - 0.01).abs() < 1e-12);
        assert!(fit.r_squared > 1.0 - 1e-12);
    }

    #[test]
    fn quadratic_detected_noise_not() {
        let x: Vec<f64> = (1..=20).map(|v| v as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise: Vec<f64> = (0..20).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.1).collect();
        let quad: Vec<f64> = x.iter().zip(&noise).map(|(v, n)| v * v + n).collect();
        let (_, p) = quadratic_f_test(&x, &quad).unwrap();
        assert!(p < 1e-6);
        let lin: Vec<f64> = x.iter().zip(&noise).map(|(v, n)| 3.0 * v + n).collect();
        let fit = poly_fit(&x, &lin, 2).unwrap();
        assert!((fit.coeffs[1] - 3.0).abs() < 0.1);
    }

    #[test]
    fn f_test_matches_hand_computation() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [1.0, 3.0, 2.0, 5.0, 4.0];
        // Linear RSS is 3.6. The curvature direction orthogonal to {1, x} is
        // q = x² − 6x + 7 = [2, −1, −2, −1, 2], so the quadratic term removes
        // (q·y)² / (q·q) = 4/14 of it.
        let gain = 4.0 / 14.0;
        let lin_rss = 3.6;
        let f_expected = gain / ((lin_rss - gain) / 2.0);
        let (f, p) = quadratic_f_test(&x, &y).unwrap();
        assert!((f - f_expected).abs() < 1e-9, "{f} vs {f_expected}");
        assert!(p > 0.05 && p < 1.0);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(run(&BenchConfig { tracks_max: 100, ..Default::default() }).is_err());
        assert!(run(&BenchConfig { reps: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn small_run_reports_every_size() {
        let cfg = BenchConfig {
            tracks_max: 40,
            step: 10,
            d_et: 16,
            rows: 4,
            reps: 1,
            ..Default::default()
        };
        let r = run(&cfg).unwrap();
        assert_eq!(r.points.iter().map(|p| p.0).collect::<Vec<_>>(), vec![10, 20, 30, 40]);
        assert!(r.to_string().contains("r_squared = "));
    }
}
