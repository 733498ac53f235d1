//! Feature-adaptive continual learner.
//!
//! A fixed random ReLU projection (the embedding-transformation layer) feeds a
//! linear ridge classifier with one output column per track identity. The
//! classifier is never retrained from scratch: each frame's association
//! results are absorbed recursively through the inverse regularized
//! autocorrelation matrix `R = (γI + XᵀX)⁻¹`, updated with a Woodbury step so
//! only an `N×N` system is factorized per frame. The recursive solution is
//! identical (up to rounding) to the batch ridge solution over the whole
//! history, which [`FacState::base_learn`] computes directly.

use std::collections::VecDeque;
use std::io::{Read, Write};

use nalgebra::{Cholesky, DMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const SNAPSHOT_MAGIC: &[u8; 4] = b"FACW";
const SNAPSHOT_VERSION: u32 = 1;

/// Fixed random projection followed by ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct EtLayer {
    seed: Option<u64>,
    weights: DMatrix<f64>,
}

impl EtLayer {
    /// Draws a `d_reid × d_et` matrix of i.i.d. `N(0, 1/d_reid)` entries from a
    /// ChaCha8 stream seeded with `seed`. Entries are drawn in row-major order.
    pub fn new(seed: u64, d_reid: usize, d_et: usize) -> Result<Self> {
        if d_reid == 0 || d_et == 0 {
            return Err(Error::invalid(format!(
                "ET layer dimensions must be positive (d_reid={d_reid}, d_et={d_et})"
            )));
        }
        let scale = 1.0 / (d_reid as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..d_reid * d_et)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Ok(Self {
            seed: Some(seed),
            weights: DMatrix::from_row_slice(d_reid, d_et, &data),
        })
    }

    /// Wraps an explicit weight matrix. Used for hand-built test layers.
    pub fn from_weights(weights: DMatrix<f64>) -> Result<Self> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::invalid("ET layer weights must be non-empty"));
        }
        Ok(Self {
            seed: None,
            weights,
        })
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn d_reid(&self) -> usize {
        self.weights.nrows()
    }

    pub fn d_et(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// `max(0, x · W_et)`. Rows of `x` are expected to be L2-normalized.
    pub fn transform(&self, x_reid: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x_reid.ncols() != self.d_reid() {
            return Err(Error::invalid(format!(
                "embedding width {} does not match ET layer input {}",
                x_reid.ncols(),
                self.d_reid()
            )));
        }
        let mut out = x_reid * &self.weights;
        out.apply(|v| *v = v.max(0.0));
        Ok(out)
    }
}

/// One-hot training targets for a single frame.
///
/// Row `n` carries the absolute output column it trains, or `None`. Columns
/// `0..old_cols` belong to tracks that existed before the frame and columns
/// `old_cols..old_cols + new_cols` to tracks spawned in it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    old_cols: usize,
    new_cols: usize,
    rows: Vec<Option<usize>>,
}

impl LabelMatrix {
    pub fn new(old_cols: usize, new_cols: usize, rows: Vec<Option<usize>>) -> Result<Self> {
        let total = old_cols + new_cols;
        let mut new_hits = vec![0usize; new_cols];
        for (n, label) in rows.iter().enumerate() {
            if let Some(c) = *label {
                if c >= total {
                    return Err(Error::invalid(format!(
                        "label row {n} references column {c} but only {total} exist"
                    )));
                }
                if c >= old_cols {
                    new_hits[c - old_cols] += 1;
                }
            }
        }
        if let Some(j) = new_hits.iter().position(|&h| h != 1) {
            return Err(Error::invalid(format!(
                "new column {} must be spawned by exactly one row, found {}",
                old_cols + j,
                new_hits[j]
            )));
        }
        Ok(Self {
            old_cols,
            new_cols,
            rows,
        })
    }

    /// Builds labels from a dense 0/1 matrix whose first `old_cols` columns are
    /// the pre-existing tracks.
    pub fn from_dense(old_cols: usize, dense: &DMatrix<f64>) -> Result<Self> {
        if dense.ncols() < old_cols {
            return Err(Error::invalid("dense label matrix narrower than old_cols"));
        }
        let mut rows = Vec::with_capacity(dense.nrows());
        for n in 0..dense.nrows() {
            let mut hit = None;
            for c in 0..dense.ncols() {
                let v = dense[(n, c)];
                if v == 1.0 {
                    if hit.is_some() {
                        return Err(Error::invalid(format!("label row {n} has more than one 1")));
                    }
                    hit = Some(c);
                } else if v != 0.0 {
                    return Err(Error::invalid(format!("label entry ({n},{c}) = {v} is not 0/1")));
                }
            }
            rows.push(hit);
        }
        Self::new(old_cols, dense.ncols() - old_cols, rows)
    }

    pub fn old_cols(&self) -> usize {
        self.old_cols
    }

    pub fn new_cols(&self) -> usize {
        self.new_cols
    }

    pub fn total_cols(&self) -> usize {
        self.old_cols + self.new_cols
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Option<usize>] {
        &self.rows
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.to_dense_width(self.total_cols())
    }

    fn to_dense_width(&self, width: usize) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.rows.len(), width);
        for (n, label) in self.rows.iter().enumerate() {
            if let Some(c) = *label {
                y[(n, c)] = 1.0;
            }
        }
        y
    }
}

/// Adds column `n` of `k` into column `label(n)` of `out`, i.e. `out += k·Y`
/// for one-hot `Y`.
fn add_label_product(out: &mut DMatrix<f64>, k: &DMatrix<f64>, labels: &LabelMatrix) {
    for (n, label) in labels.rows().iter().enumerate() {
        if let Some(c) = *label {
            let mut dst = out.column_mut(c);
            dst += k.column(n);
        }
    }
}

/// Classifier weights plus the inverse regularized autocorrelation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FacState {
    gamma: f64,
    w_fcn: DMatrix<f64>,
    r: DMatrix<f64>,
    frame_counter: u64,
    spare: Spare,
}

/// Output buffer swapped with the weights on every update so steady-state
/// frames do not allocate. Never part of the learner's value.
#[derive(Debug, Clone)]
struct Spare(DMatrix<f64>);

impl PartialEq for Spare {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl FacState {
    /// Empty learner: `R = I/γ`, no output columns.
    pub fn new(gamma: f64, d_et: usize) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
        }
        if d_et == 0 {
            return Err(Error::invalid("d_et must be positive"));
        }
        Ok(Self {
            gamma,
            w_fcn: DMatrix::zeros(d_et, 0),
            r: DMatrix::identity(d_et, d_et) / gamma,
            frame_counter: 0,
            spare: Spare(DMatrix::zeros(0, 0)),
        })
    }

    /// Batch ridge solution over a full history, by direct factorization of
    /// `γI + Σ XᵀX`. This is the reference the recursive path must reproduce.
    pub fn base_learn(
        gamma: f64,
        d_et: usize,
        history: &[(DMatrix<f64>, LabelMatrix)],
    ) -> Result<Self> {
        let mut state = Self::new(gamma, d_et)?;
        if history.is_empty() {
            return Ok(state);
        }
        let mut cols = 0usize;
        for (k, (x, y)) in history.iter().enumerate() {
            if x.ncols() != d_et {
                return Err(Error::invalid(format!(
                    "history frame {k} has {} features, expected {d_et}",
                    x.ncols()
                )));
            }
            if x.nrows() != y.n_rows() {
                return Err(Error::invalid(format!(
                    "history frame {k}: {} feature rows but {} label rows",
                    x.nrows(),
                    y.n_rows()
                )));
            }
            if y.old_cols() != cols {
                return Err(Error::invalid(format!(
                    "history frame {k} labels assume {} prior columns, history has {cols}",
                    y.old_cols()
                )));
            }
            cols += y.new_cols();
        }

        let mut gram = DMatrix::identity(d_et, d_et) * gamma;
        let mut cross = DMatrix::zeros(d_et, cols);
        for (x, y) in history {
            gram += x.transpose() * x;
            cross += x.transpose() * y.to_dense_width(cols);
        }
        let chol = Cholesky::new(gram).ok_or_else(|| Error::NumericalFailure {
            frame: history.len() as u64,
            context: "regularized Gram matrix is not positive definite".into(),
        })?;
        state.w_fcn = chol.solve(&cross);
        state.r = chol.inverse();
        state.frame_counter = history.len() as u64;
        Ok(state)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn d_et(&self) -> usize {
        self.r.nrows()
    }

    /// Number of output columns, i.e. track identities learned so far.
    pub fn n_tracks(&self) -> usize {
        self.w_fcn.ncols()
    }

    pub fn frame_counter(&self) -> u64 {
        self.frame_counter
    }

    pub fn w_fcn(&self) -> &DMatrix<f64> {
        &self.w_fcn
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    fn check_features(&self, x_et: &DMatrix<f64>) -> Result<()> {
        if x_et.ncols() != self.d_et() {
            return Err(Error::invalid(format!(
                "feature width {} does not match d_et {}",
                x_et.ncols(),
                self.d_et()
            )));
        }
        Ok(())
    }

    /// Woodbury step `R ← R − R Xᵀ (I + X R Xᵀ)⁻¹ X R`, followed by
    /// re-symmetrization. Returns `R_new · Xᵀ` for reuse by the weight update.
    fn woodbury(&self, x_et: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let n = x_et.nrows();
        let p = &self.r * x_et.transpose();
        let inner = DMatrix::identity(n, n) + x_et * &p;
        let chol = Cholesky::new(inner).ok_or_else(|| Error::NumericalFailure {
            frame: self.frame_counter,
            context: "inner Woodbury system I + X R Xᵀ is singular".into(),
        })?;
        let z = chol.solve(&p.transpose());
        let mut r = &self.r - &p * z;
        symmetrize(&mut r);
        let k = &r * x_et.transpose();
        Ok((r, k))
    }

    /// Absorbs feature rows into `R` without touching the classifier weights.
    pub fn update_r(&mut self, x_et: &DMatrix<f64>) -> Result<()> {
        self.check_features(x_et)?;
        if x_et.nrows() == 0 {
            return Ok(());
        }
        let (r, _) = self.woodbury(x_et)?;
        self.r = r;
        Ok(())
    }

    /// Recursive ridge update for one frame of association results.
    ///
    /// `W ← [V W + R Xᵀ Y_old, R Xᵀ Y_new]` with `V = I − R XᵀX` and `R`
    /// already updated with this frame. On error the state is left unchanged.
    pub fn continual_update(&mut self, x_et: &DMatrix<f64>, labels: &LabelMatrix) -> Result<()> {
        self.check_features(x_et)?;
        if labels.old_cols() != self.n_tracks() {
            return Err(Error::invalid(format!(
                "labels assume {} existing tracks, classifier has {}",
                labels.old_cols(),
                self.n_tracks()
            )));
        }
        if labels.n_rows() != x_et.nrows() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} label rows",
                x_et.nrows(),
                labels.n_rows()
            )));
        }
        let d_et = self.d_et();
        let old = self.n_tracks();
        if x_et.nrows() == 0 {
            self.frame_counter += 1;
            return Ok(());
        }

        let (r, k) = self.woodbury(x_et)?;
        let v = DMatrix::<f64>::identity(d_et, d_et) - &k * x_et;
        let cols = old + labels.new_cols();
        let mut w = std::mem::replace(&mut self.spare.0, DMatrix::zeros(0, 0));
        if w.shape() != (d_et, cols) {
            w = DMatrix::zeros(d_et, cols);
        }
        if old > 0 {
            w.columns_mut(0, old).gemm(1.0, &v, &self.w_fcn, 0.0);
        }
        w.columns_mut(old, cols - old).fill(0.0);
        add_label_product(&mut w, &k, labels);

        self.r = r;
        self.spare.0 = std::mem::replace(&mut self.w_fcn, w);
        self.frame_counter += 1;
        Ok(())
    }

    /// Raw classifier outputs `x_et · W` for already-transformed features.
    pub fn affinity_from_features(&self, x_et: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_features(x_et)?;
        Ok(x_et * &self.w_fcn)
    }

    /// Raw affinities between embeddings and every learned track. No softmax
    /// or other normalization is applied.
    pub fn predict_affinity(&self, layer: &EtLayer, x_reid: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if layer.d_et() != self.d_et() {
            return Err(Error::invalid(format!(
                "ET layer width {} does not match classifier d_et {}",
                layer.d_et(),
                self.d_et()
            )));
        }
        let x_et = layer.transform(x_reid)?;
        self.affinity_from_features(&x_et)
    }

    /// Little-endian snapshot: magic, version, gamma, d_et, d_T, then `W` and
    /// `R` row-major. The frame counter is not persisted.
    pub fn write_snapshot<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(SNAPSHOT_MAGIC)?;
        out.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        out.write_all(&self.gamma.to_le_bytes())?;
        out.write_all(&(self.d_et() as u32).to_le_bytes())?;
        out.write_all(&(self.n_tracks() as u32).to_le_bytes())?;
        for m in [&self.w_fcn, &self.r] {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.write_all(&m[(i, j)].to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut input: R) -> Result<Self> {
        let path = std::path::PathBuf::from("<snapshot>");
        let truncated = |what: &str| Error::Truncated {
            path: path.clone(),
            context: what.to_string(),
        };
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(|_| truncated("magic"))?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::BadMagic {
                path,
                expected: "FACW",
            });
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        input.read_exact(&mut b4).map_err(|_| truncated("version"))?;
        let version = u32::from_le_bytes(b4);
        if version != SNAPSHOT_VERSION {
            return Err(Error::UnsupportedVersion { path, version });
        }
        input.read_exact(&mut b8).map_err(|_| truncated("gamma"))?;
        let gamma = f64::from_le_bytes(b8);
        input.read_exact(&mut b4).map_err(|_| truncated("d_et"))?;
        let d_et = u32::from_le_bytes(b4) as usize;
        input.read_exact(&mut b4).map_err(|_| truncated("d_T"))?;
        let d_t = u32::from_le_bytes(b4) as usize;

        let mut read_matrix = |rows: usize, cols: usize, what: &str| -> Result<DMatrix<f64>> {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                input.read_exact(&mut b8).map_err(|_| truncated(what))?;
                data.push(f64::from_le_bytes(b8));
            }
            Ok(DMatrix::from_row_slice(rows, cols, &data))
        };
        let w_fcn = read_matrix(d_et, d_t, "w_fcn")?;
        let r = read_matrix(d_et, d_et, "r")?;
        let mut state = Self::new(gamma, d_et)?;
        state.w_fcn = w_fcn;
        state.r = r;
        Ok(state)
    }
}

/// Ridge learner that only remembers the most recent `len` training frames.
///
/// Output columns still accumulate for every track ever spawned; a track whose
/// samples have all left the window gets an all-zero column. Rebuilt by direct
/// solve each frame.
#[derive(Debug, Clone)]
pub struct WindowedFac {
    gamma: f64,
    len: usize,
    frames: VecDeque<(DMatrix<f64>, LabelMatrix)>,
    w_fcn: DMatrix<f64>,
    frame_counter: u64,
}

impl WindowedFac {
    pub fn new(gamma: f64, d_et: usize, len: usize) -> Result<Self> {
        FacState::new(gamma, d_et)?;
        if len == 0 {
            return Err(Error::invalid("memory window must hold at least one frame"));
        }
        Ok(Self {
            gamma,
            len,
            frames: VecDeque::with_capacity(len + 1),
            w_fcn: DMatrix::zeros(d_et, 0),
            frame_counter: 0,
        })
    }

    pub fn d_et(&self) -> usize {
        self.w_fcn.nrows()
    }

    pub fn n_tracks(&self) -> usize {
        self.w_fcn.ncols()
    }

    pub fn w_fcn(&self) -> &DMatrix<f64> {
        &self.w_fcn
    }

    pub fn update(&mut self, x_et: &DMatrix<f64>, labels: &LabelMatrix) -> Result<()> {
        let d_et = self.d_et();
        if x_et.ncols() != d_et || labels.n_rows() != x_et.nrows() {
            return Err(Error::invalid("windowed update: feature/label shape mismatch"));
        }
        if labels.old_cols() != self.n_tracks() {
            return Err(Error::invalid(format!(
                "labels assume {} existing tracks, classifier has {}",
                labels.old_cols(),
                self.n_tracks()
            )));
        }
        let cols = labels.total_cols();
        self.frames.push_back((x_et.clone(), labels.clone()));
        while self.frames.len() > self.len {
            self.frames.pop_front();
        }
        let n: usize = self.frames.iter().map(|(x, _)| x.nrows()).sum();
        let mut x_all = DMatrix::zeros(n, d_et);
        let mut y_all = DMatrix::zeros(n, cols);
        let mut at = 0;
        for (x, y) in &self.frames {
            x_all.rows_mut(at, x.nrows()).copy_from(x);
            y_all.rows_mut(at, x.nrows()).copy_from(&y.to_dense_width(cols));
            at += x.nrows();
        }
        let fail = |frame| Error::NumericalFailure {
            frame,
            context: "windowed ridge system is not positive definite".into(),
        };
        // Solve in whichever of the primal (d_et) or dual (row count) spaces is smaller.
        self.w_fcn = if n < d_et {
            let kernel = &x_all * x_all.transpose() + DMatrix::identity(n, n) * self.gamma;
            let chol = Cholesky::new(kernel).ok_or_else(|| fail(self.frame_counter))?;
            x_all.transpose() * chol.solve(&y_all)
        } else {
            let gram = x_all.transpose() * &x_all + DMatrix::identity(d_et, d_et) * self.gamma;
            let chol = Cholesky::new(gram).ok_or_else(|| fail(self.frame_counter))?;
            chol.solve(&(x_all.transpose() * y_all))
        };
        self.frame_counter += 1;
        Ok(())
    }

    pub fn affinity_from_features(&self, x_et: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x_et.ncols() != self.d_et() {
            return Err(Error::invalid("feature width does not match d_et"));
        }
        Ok(x_et * &self.w_fcn)
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rel_fro(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn et_layer_deterministic_per_seed() {
        let a = EtLayer::new(7, 4, 8).unwrap();
        let b = EtLayer::new(7, 4, 8).unwrap();
        let c = EtLayer::new(8, 4, 8).unwrap();
        assert_eq!(a.weights(), b.weights());
        assert_ne!(a.weights(), c.weights());
    }

    #[test]
    fn et_layer_moments() {
        let layer = EtLayer::new(1, 64, 256).unwrap();
        let w = layer.weights();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 0.02, "mean {mean}");
        assert!((var.sqrt() - 0.125).abs() <= 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn et_layer_rejects_zero_dims() {
        assert!(matches!(EtLayer::new(1, 0, 4), Err(Error::InvalidArgument(_))));
        assert!(matches!(EtLayer::new(1, 4, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn transform_relu_kills_negative() {
        let layer = EtLayer::from_weights(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])).unwrap();
        let out = layer.transform(&DMatrix::from_row_slice(1, 2, &[1.0, 1.0])).unwrap();
        assert_eq!(out, DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        let zero = layer.transform(&DMatrix::zeros(1, 2)).unwrap();
        assert_eq!(zero, DMatrix::zeros(1, 2));
    }

    #[test]
    fn transform_matches_naive_loop() {
        let layer = EtLayer::new(3, 16, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 5, 16);
        let out = layer.transform(&x).unwrap();
        let w = layer.weights();
        for i in 0..5 {
            for j in 0..32 {
                let mut acc = 0.0;
                for k in 0..16 {
                    acc += x[(i, k)] * w[(k, j)];
                }
                assert!((out[(i, j)] - acc.max(0.0)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn transform_dimension_mismatch() {
        let layer = EtLayer::new(3, 16, 32).unwrap();
        assert!(layer.transform(&DMatrix::zeros(2, 15)).is_err());
    }

    #[test]
    fn init_fac_examples() {
        let s = FacState::new(1.0, 2).unwrap();
        assert_eq!(s.r(), &DMatrix::<f64>::identity(2, 2));
        assert_eq!(s.n_tracks(), 0);
        assert_eq!(s.frame_counter(), 0);
        let s = FacState::new(2.0, 2).unwrap();
        assert_eq!(s.r(), &(DMatrix::<f64>::identity(2, 2) * 0.5));
        assert!(matches!(FacState::new(0.0, 2), Err(Error::InvalidArgument(_))));
        assert!(FacState::new(-1.0, 2).is_err());
    }

    fn one(old: usize, new: usize, rows: &[Option<usize>]) -> LabelMatrix {
        LabelMatrix::new(old, new, rows.to_vec()).unwrap()
    }

    #[test]
    fn label_matrix_invariants() {
        assert!(LabelMatrix::new(1, 1, vec![Some(0), None]).is_err());
        assert!(LabelMatrix::new(0, 1, vec![Some(0), Some(0)]).is_err());
        assert!(LabelMatrix::new(2, 0, vec![Some(2)]).is_err());
        let dense = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        assert!(LabelMatrix::from_dense(1, &dense).is_err());
        let dense = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let l = LabelMatrix::from_dense(1, &dense).unwrap();
        assert_eq!(l.rows(), &[Some(1), Some(0)]);
        assert_eq!(l.to_dense(), dense);
    }

    #[test]
    fn base_learn_closed_forms() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let s = FacState::base_learn(1.0, 2, &[(x.clone(), one(0, 1, &[Some(0)]))]).unwrap();
        assert!((s.w_fcn()[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(s.w_fcn()[(1, 0)], 0.0);
        let expect_r = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 1.0]);
        assert!((s.r() - expect_r).amax() < 1e-15);

        let s = FacState::base_learn(
            1.0,
            2,
            &[(x.clone(), one(0, 1, &[Some(0)])), (x, one(1, 0, &[Some(0)]))],
        )
        .unwrap();
        assert!((s.w_fcn()[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.w_fcn()[(1, 0)], 0.0);

        assert_eq!(FacState::base_learn(1.0, 2, &[]).unwrap(), FacState::new(1.0, 2).unwrap());
    }

    #[test]
    fn base_learn_rejects_inconsistent_columns() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let err = FacState::base_learn(
            1.0,
            2,
            &[(x.clone(), one(0, 1, &[Some(0)])), (x, one(2, 0, &[Some(0)]))],
        );
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn update_r_examples() {
        let mut s = FacState::new(1.0, 2).unwrap();
        s.update_r(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 1.0]);
        assert!((s.r() - expect).amax() < 1e-15);
        let before = s.r().clone();
        s.update_r(&DMatrix::zeros(0, 2)).unwrap();
        assert_eq!(s.r(), &before);
    }

    #[test]
    fn update_r_matches_direct_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 32;
        let mut s = FacState::new(1.0, d).unwrap();
        let mut gram = DMatrix::<f64>::identity(d, d);
        for _ in 0..30 {
            let n = rng.random_range(0..=8);
            let x = random_matrix(&mut rng, n, d).map(|v| v.max(0.0));
            s.update_r(&x).unwrap();
            gram += x.transpose() * &x;
            let direct = gram.clone().try_inverse().unwrap();
            assert!(rel_fro(s.r(), &direct) <= 1e-8);
        }
    }

    #[test]
    fn update_r_singular_inner_system() {
        let mut s = FacState::new(1.0, 2).unwrap();
        // A corrupted R makes I + X R Xᵀ indefinite.
        s.r = DMatrix::identity(2, 2) * -2.0;
        let err = s.update_r(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        assert!(matches!(err, Err(Error::NumericalFailure { frame: 0, .. })));
    }

    #[test]
    fn continual_update_examples() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let mut s = FacState::base_learn(1.0, 2, &[(x.clone(), one(0, 1, &[Some(0)]))]).unwrap();
        s.continual_update(&x, &one(1, 0, &[Some(0)])).unwrap();
        assert!((s.w_fcn()[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!(s.w_fcn()[(1, 0)].abs() < 1e-15);
        assert_eq!(s.frame_counter(), 2);

        let y = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        s.continual_update(&DMatrix::from_row_slice(1, 2, &[0.0, 1.0]), &LabelMatrix::from_dense(1, &y).unwrap())
            .unwrap();
        assert_eq!(s.n_tracks(), 2);
        assert!(s.w_fcn()[(0, 1)].abs() < 1e-15);
        assert!((s.w_fcn()[(1, 1)] - 0.5).abs() < 1e-15);
        assert!((s.w_fcn()[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn continual_update_rejects_width_mismatch() {
        let mut s = FacState::new(1.0, 2).unwrap();
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert!(s.continual_update(&x, &one(1, 0, &[Some(0)])).is_err());
        assert!(s.continual_update(&DMatrix::zeros(1, 3), &one(0, 1, &[Some(0)])).is_err());
        assert!(s.continual_update(&x, &one(0, 0, &[])).is_err());
        assert_eq!(s, FacState::new(1.0, 2).unwrap());
    }

    #[test]
    fn continual_matches_base_learn() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 64;
        let mut s = FacState::new(1.0, d).unwrap();
        let mut history = Vec::new();
        let mut cols = 0usize;
        for _ in 0..50 {
            let n = rng.random_range(1..=10);
            let x = random_matrix(&mut rng, n, d).map(|v| v.max(0.0));
            let spawn = if cols < 20 { rng.random_range(0..=1.min(n)) } else { 0 };
            let mut rows = Vec::with_capacity(n);
            for i in 0..n {
                if i < spawn {
                    rows.push(Some(cols + i));
                } else if cols > 0 && rng.random_bool(0.8) {
                    rows.push(Some(rng.random_range(0..cols)));
                } else {
                    rows.push(None);
                }
            }
            let labels = LabelMatrix::new(cols, spawn, rows).unwrap();
            cols += spawn;
            s.continual_update(&x, &labels).unwrap();
            history.push((x, labels));
        }
        let batch = FacState::base_learn(1.0, d, &history).unwrap();
        assert_eq!(s.n_tracks(), cols);
        assert!(rel_fro(s.w_fcn(), batch.w_fcn()) <= 1e-8);
        assert!(rel_fro(s.r(), batch.r()) <= 1e-8);
    }

    #[test]
    fn predict_affinity_rank_one_law() {
        let layer = EtLayer::from_weights(DMatrix::identity(2, 2)).unwrap();
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let mut s = FacState::new(1.0, 2).unwrap();
        assert_eq!(s.predict_affinity(&layer, &x).unwrap().shape(), (1, 0));
        s.continual_update(&x, &one(0, 1, &[Some(0)])).unwrap();
        assert!((s.predict_affinity(&layer, &x).unwrap()[(0, 0)] - 0.5).abs() < 1e-15);
        s.continual_update(&x, &one(1, 0, &[Some(0)])).unwrap();
        assert!((s.predict_affinity(&layer, &x).unwrap()[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        let zero = s.predict_affinity(&layer, &DMatrix::zeros(1, 2)).unwrap();
        assert_eq!(zero[(0, 0)], 0.0);
    }

    #[test]
    fn windowed_matches_base_learn_on_recent_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 16;
        // 2 rows per frame exercises the dual solve, 8 the primal one.
        for rows in [2usize, 8] {
            let mut win = WindowedFac::new(1.0, d, 3).unwrap();
            let mut frames = Vec::new();
            for k in 0..6 {
                let x = random_matrix(&mut rng, rows, d).map(|v| v.max(0.0));
                let mut labels = vec![Some(k), if k > 0 { Some(k - 1) } else { None }];
                labels.resize(rows, None);
                let labels = one(k, 1, &labels);
                win.update(&x, &labels).unwrap();
                frames.push((x, labels));
            }
            // Oracle: batch ridge on the last three frames with all six columns.
            let mut gram = DMatrix::<f64>::identity(d, d);
            let mut cross = DMatrix::<f64>::zeros(d, 6);
            for (x, y) in &frames[3..] {
                gram += x.transpose() * x;
                cross += x.transpose() * y.to_dense_width(6);
            }
            let expect = gram.try_inverse().unwrap() * cross;
            assert!(rel_fro(win.w_fcn(), &expect) <= 1e-10, "rows {rows}");
            assert!(win.w_fcn().column(0).amax() == 0.0);
        }
        assert!(WindowedFac::new(1.0, d, 0).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = FacState::new(0.5, 6).unwrap();
        let x = random_matrix(&mut rng, 3, 6);
        s.continual_update(&x, &one(0, 2, &[Some(0), Some(1), None])).unwrap();
        let mut buf = Vec::new();
        s.write_snapshot(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"FACW");
        assert_eq!(buf.len(), 4 + 4 + 8 + 4 + 4 + 8 * (6 * 2 + 36));
        let back = FacState::read_snapshot(buf.as_slice()).unwrap();
        assert_eq!(back.w_fcn(), s.w_fcn());
        assert_eq!(back.r(), s.r());
        assert_eq!(back.gamma(), 0.5);
        assert!(matches!(
            FacState::read_snapshot(&buf[..buf.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        buf[0] = b'X';
        assert!(matches!(FacState::read_snapshot(buf.as_slice()), Err(Error::BadMagic { .. })));
    }
}
