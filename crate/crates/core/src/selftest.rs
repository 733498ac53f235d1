//! Recursive-versus-batch check of the continual learner on random histories.

use std::fmt;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::fac::{EtLayer, FacState, LabelMatrix};

pub const MAX_RELATIVE_ERROR: f64 = 1e-8;
pub const MAX_INVERSE_ERROR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryShape {
    pub frames: usize,
    pub max_rows: usize,
    pub d_reid: usize,
    pub d_et: usize,
    pub max_tracks: usize,
    pub gamma: f64,
}

impl Default for HistoryShape {
    fn default() -> Self {
        Self {
            frames: 50,
            max_rows: 10,
            d_reid: 32,
            d_et: 64,
            max_tracks: 20,
            gamma: 1.0,
        }
    }
}

/// A random labelled history: ET features of Gaussian embeddings, each row
/// either matched to a distinct existing track or spawning a new one.
pub fn random_history(seed: u64, shape: &HistoryShape) -> Result<Vec<(DMatrix<f64>, LabelMatrix)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = EtLayer::new(seed, shape.d_reid, shape.d_et)?;
    let mut tracks = 0usize;
    let mut out = Vec::with_capacity(shape.frames);
    for _ in 0..shape.frames {
        let wanted = rng.random_range(1..=shape.max_rows);
        let mut free: Vec<usize> = (0..tracks).collect();
        free.shuffle(&mut rng);
        let mut rows = Vec::with_capacity(wanted);
        let mut spawned = 0;
        for _ in 0..wanted {
            let can_spawn = tracks + spawned < shape.max_tracks;
            if can_spawn && (free.is_empty() || rng.random_bool(0.3)) {
                rows.push(Some(tracks + spawned));
                spawned += 1;
            } else if let Some(c) = free.pop() {
                rows.push(Some(c));
            }
        }
        let reid = DMatrix::from_fn(rows.len(), shape.d_reid, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = layer.transform(&reid)?;
        out.push((x, LabelMatrix::new(tracks, spawned, rows)?));
        tracks += spawned;
    }
    Ok(out)
}

fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = b.norm();
    let diff = (a - b).norm();
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelftestReport {
    pub histories: usize,
    /// Worst final-weight relative Frobenius error against the batch solve.
    pub max_weight_error: f64,
    /// Worst per-frame `max |R·(γI + ΣXᵀX) − I|`.
    pub max_inverse_error: f64,
    pub final_tracks: usize,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.max_weight_error <= MAX_RELATIVE_ERROR && self.max_inverse_error <= MAX_INVERSE_ERROR
    }
}

impl fmt::Display for SelftestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "histories = {}", self.histories)?;
        writeln!(f, "final_tracks = {}", self.final_tracks)?;
        writeln!(f, "max_weight_relative_error = {:e}", self.max_weight_error)?;
        writeln!(f, "max_inverse_error = {:e}", self.max_inverse_error)?;
        writeln!(f, "passed = {}", self.passed())
    }
}

/// Runs one history through the recursive learner and compares every frame
/// against the batch solution of the history so far.
pub fn check_history(history: &[(DMatrix<f64>, LabelMatrix)], gamma: f64, d_et: usize) -> Result<(f64, f64, usize)> {
    let mut state = FacState::new(gamma, d_et)?;
    let mut gram = DMatrix::<f64>::identity(d_et, d_et) * gamma;
    let mut w_err = 0.0f64;
    let mut r_err = 0.0f64;
    let eye = DMatrix::<f64>::identity(d_et, d_et);
    for k in 0..history.len() {
        let (x, y) = &history[k];
        state.continual_update(x, y)?;
        gram += x.transpose() * x;
        let dev = state.r() * &gram - &eye;
        r_err = r_err.max(dev.amax());
        let batch = FacState::base_learn(gamma, d_et, &history[..=k])?;
        w_err = w_err.max(relative_frobenius(state.w_fcn(), batch.w_fcn()));
    }
    Ok((w_err, r_err, state.n_tracks()))
}

pub fn run(seeds: &[u64], shape: &HistoryShape) -> Result<SelftestReport> {
    let mut report = SelftestReport {
        histories: seeds.len(),
        max_weight_error: 0.0,
        max_inverse_error: 0.0,
        final_tracks: 0,
    };
    for &seed in seeds {
        let h = random_history(seed, shape)?;
        let (w, r, t) = check_history(&h, shape.gamma, shape.d_et)?;
        report.max_weight_error = report.max_weight_error.max(w);
        report.max_inverse_error = report.max_inverse_error.max(r);
        report.final_tracks = report.final_tracks.max(t);
    }
    Ok(report)
}
