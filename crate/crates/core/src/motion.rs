//! Constant-velocity Kalman filtering of boxes, IoU and Mahalanobis gating.
//!
//! State is `(cx, cy, w, h, vcx, vcy, vw, vh)`; the measurement is the box
//! `(cx, cy, w, h)`. Noise standard deviations scale with the box height.

use nalgebra::{Matrix2, SMatrix, SVector};

use crate::error::{Error, Result};

pub type StateVec = SVector<f64, 8>;
pub type StateCov = SMatrix<f64, 8, 8>;
type MeasVec = SVector<f64, 4>;
type MeasCov = SMatrix<f64, 4, 4>;

/// 0.95 quantile of the chi-square distribution with 4 degrees of freedom.
pub const CHI2_95_4DOF: f64 = 9.4877;

/// Axis-aligned box in MOT `(left, top, width, height)` convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
    pub confidence: f64,
}

impl BBox {
    pub fn new(left: f64, top: f64, width: f64, height: f64, confidence: f64) -> Result<Self> {
        let b = Self {
            left,
            top,
            width,
            height,
            confidence,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64, confidence: f64) -> Self {
        Self {
            left: cx - width / 2.0,
            top: cy - height / 2.0,
            width,
            height,
            confidence,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::invalid(format!(
                "box size must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.left.is_finite() && self.top.is_finite()) {
            return Err(Error::invalid("box position must be finite"));
        }
        Ok(())
    }

    pub fn center(&self) -> (f64, f64) {
        (self.left + self.width / 2.0, self.top + self.height / 2.0)
    }

    fn measurement(&self) -> MeasVec {
        let (cx, cy) = self.center();
        MeasVec::new(cx, cy, self.width, self.height)
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }
}

/// Intersection over union. Symmetric by construction.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if (a.left, a.top, a.width, a.height) == (b.left, b.top, b.width, b.height) {
        return if a.area() > 0.0 { 1.0 } else { 0.0 };
    }
    let ix = (a.left + a.width).min(b.left + b.width) - a.left.max(b.left);
    let iy = (a.top + a.height).min(b.top + b.height) - a.top.max(b.top);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub mean: StateVec,
    pub covariance: StateCov,
}

impl KalmanState {
    pub fn to_bbox(&self, confidence: f64) -> BBox {
        BBox::from_center(self.mean[0], self.mean[1], self.mean[2], self.mean[3], confidence)
    }
}

/// Previous-frame → current-frame pixel mapping `[a11 a12 a13; a21 a22 a23]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    m: [[f64; 3]; 2],
}

impl AffineTransform {
    pub fn new(m: [[f64; 3]; 2]) -> Result<Self> {
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if !(det.abs() > 1e-9) {
            return Err(Error::invalid(format!("affine linear part is singular (det={det})")));
        }
        Ok(Self { m })
    }

    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy]],
        }
    }

    pub fn matrix(&self) -> [[f64; 3]; 2] {
        self.m
    }

    fn linear(&self) -> Matrix2<f64> {
        Matrix2::new(self.m[0][0], self.m[0][1], self.m[1][0], self.m[1][1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanFilter {
    pub std_weight_position: f64,
    pub std_weight_velocity: f64,
}

impl Default for KalmanFilter {
    fn default() -> Self {
        Self {
            std_weight_position: 1.0 / 20.0,
            std_weight_velocity: 1.0 / 160.0,
        }
    }
}

fn noise_scale(h: f64) -> f64 {
    // Keeps the noise model sane if a predicted height collapses.
    h.abs().max(1.0)
}

fn symmetrize<const N: usize>(m: &mut SMatrix<f64, N, N>) {
    let t = m.transpose();
    *m = (*m + t) * 0.5;
}

impl KalmanFilter {
    pub fn init(&self, b: &BBox) -> Result<KalmanState> {
        b.validate()?;
        let z = b.measurement();
        let mut mean = StateVec::zeros();
        mean.fixed_rows_mut::<4>(0).copy_from(&z);
        let h = noise_scale(b.height);
        let p = 2.0 * self.std_weight_position * h;
        let v = 10.0 * self.std_weight_velocity * h;
        let std = StateVec::from([p, p, p, p, v, v, v, v]);
        Ok(KalmanState {
            mean,
            covariance: StateCov::from_diagonal(&std.component_mul(&std)),
        })
    }

    fn motion_matrix() -> StateCov {
        let mut f = StateCov::identity();
        for i in 0..4 {
            f[(i, i + 4)] = 1.0;
        }
        f
    }

    fn measurement_noise(&self, h: f64) -> MeasCov {
        let s = self.std_weight_position * noise_scale(h);
        MeasCov::from_diagonal_element(s * s)
    }

    pub fn predict(&self, s: &KalmanState) -> KalmanState {
        let h = noise_scale(s.mean[3]);
        let p = self.std_weight_position * h;
        let v = self.std_weight_velocity * h;
        let std = StateVec::from([p, p, p, p, v, v, v, v]);
        let q = StateCov::from_diagonal(&std.component_mul(&std));
        let f = Self::motion_matrix();
        let mut covariance = f * s.covariance * f.transpose() + q;
        symmetrize(&mut covariance);
        KalmanState {
            mean: f * s.mean,
            covariance,
        }
    }

    /// Measurement-space mean and innovation covariance.
    fn project(&self, s: &KalmanState) -> (MeasVec, MeasCov) {
        let mean = s.mean.fixed_rows::<4>(0).into_owned();
        let cov = s.covariance.fixed_view::<4, 4>(0, 0).into_owned() + self.measurement_noise(s.mean[3]);
        (mean, cov)
    }

    pub fn update(&self, s: &KalmanState, z: &BBox) -> Result<KalmanState> {
        z.validate()?;
        let (proj_mean, proj_cov) = self.project(s);
        let chol = proj_cov.cholesky().ok_or_else(|| Error::NumericalFailure {
            frame: 0,
            context: "Kalman innovation covariance is singular".into(),
        })?;
        // P Hᵀ is the first four columns of P.
        let pht: SMatrix<f64, 8, 4> = s.covariance.fixed_columns::<4>(0).into_owned();
        let gain = chol.solve(&pht.transpose()).transpose();
        let innovation = z.measurement() - proj_mean;
        let mean = s.mean + gain * innovation;
        let mut covariance = s.covariance - gain * proj_cov * gain.transpose();
        symmetrize(&mut covariance);
        Ok(KalmanState { mean, covariance })
    }

    /// Squared Mahalanobis distances of each box to the projected state.
    pub fn gating_distance(&self, s: &KalmanState, boxes: &[BBox]) -> Result<Vec<f64>> {
        let (mean, cov) = self.project(s);
        let chol = cov.cholesky().ok_or_else(|| Error::NumericalFailure {
            frame: 0,
            context: "projected covariance is singular".into(),
        })?;
        let l = chol.l();
        Ok(boxes
            .iter()
            .map(|b| {
                let d = b.measurement() - mean;
                let y = l
                    .solve_lower_triangular(&d)
                    .expect("Cholesky factor has a positive diagonal");
                y.norm_squared()
            })
            .collect())
    }

    /// `true` where the squared distance is at most `threshold` (inclusive).
    pub fn gate(&self, s: &KalmanState, boxes: &[BBox], threshold: f64) -> Result<Vec<bool>> {
        Ok(self
            .gating_distance(s, boxes)?
            .into_iter()
            .map(|d| d <= threshold)
            .collect())
    }

    /// Maps position and velocity through the transform; translation only
    /// moves the position. Width and height are left alone.
    pub fn apply_cmc(&self, s: &KalmanState, t: &AffineTransform) -> KalmanState {
        let a = t.linear();
        let mut big = StateCov::identity();
        big.fixed_view_mut::<2, 2>(0, 0).copy_from(&a);
        big.fixed_view_mut::<2, 2>(4, 4).copy_from(&a);
        let mut mean = big * s.mean;
        mean[0] += t.m[0][2];
        mean[1] += t.m[1][2];
        let mut covariance = big * s.covariance * big.transpose();
        symmetrize(&mut covariance);
        KalmanState { mean, covariance }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(l: f64, t: f64, w: f64, h: f64) -> BBox {
        BBox::new(l, t, w, h, 1.0).unwrap()
    }

    fn asym(m: &StateCov) -> f64 {
        (m - m.transpose()).amax()
    }

    #[test]
    fn init_examples() {
        let kf = KalmanFilter::default();
        let s = kf.init(&b(0.0, 0.0, 10.0, 10.0)).unwrap();
        assert_eq!(s.mean, StateVec::from([5.0, 5.0, 10.0, 10.0, 0.0, 0.0, 0.0, 0.0]));
        let off_diag = s.covariance - StateCov::from_diagonal(&s.covariance.diagonal());
        assert_eq!(off_diag.amax(), 0.0);
        assert_eq!(s, kf.init(&b(0.0, 0.0, 10.0, 10.0)).unwrap());
        assert!(kf.init(&BBox { left: 0.0, top: 0.0, width: 0.0, height: 1.0, confidence: 1.0 }).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn predict_examples() {
        let kf = KalmanFilter::default();
        let s = kf.init(&b(0.0, 0.0, 10.0, 10.0)).unwrap();
        let p = kf.predict(&s);
        assert_eq!(p.mean.fixed_rows::<4>(0), s.mean.fixed_rows::<4>(0));
        let mut moving = s.clone();
        moving.mean = StateVec::from([0.0, 0.0, 10.0, 10.0, 1.0, 0.0, 0.0, 0.0]);
        let p = kf.predict(&moving);
        assert_eq!(p.mean, StateVec::from([1.0, 0.0, 10.0, 10.0, 1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn update_zero_innovation_keeps_position() {
        let kf = KalmanFilter::default();
        let s = kf.predict(&kf.init(&b(3.0, 4.0, 20.0, 40.0)).unwrap());
        let u = kf.update(&s, &s.to_bbox(1.0)).unwrap();
        assert!((u.mean.fixed_rows::<4>(0) - s.mean.fixed_rows::<4>(0)).amax() <= 1e-9);
    }

    #[test]
    fn update_converges_to_fixed_box() {
        let kf = KalmanFilter::default();
        let target = b(100.0, 50.0, 30.0, 60.0);
        let goal = target.measurement();
        let mut s = kf.init(&b(80.0, 40.0, 30.0, 60.0)).unwrap();
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            s = kf.update(&kf.predict(&s), &target).unwrap();
            last = (s.mean.fixed_rows::<4>(0) - goal).norm();
        }
        assert!(last < 0.5, "{last}");
    }

    #[test]
    fn singular_innovation_is_reported() {
        let kf = KalmanFilter::default();
        let mut s = kf.init(&b(0.0, 0.0, 10.0, 10.0)).unwrap();
        s.covariance = StateCov::identity() * -1e6;
        assert!(matches!(kf.update(&s, &b(0.0, 0.0, 10.0, 10.0)), Err(Error::NumericalFailure { .. })));
        assert!(kf.gating_distance(&s, &[b(0.0, 0.0, 10.0, 10.0)]).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 5.0, 5.0)), 0.0);
        assert!((iou(&a, &b(5.0, 0.0, 10.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn gate_examples() {
        let kf = KalmanFilter::default();
        let s = kf.init(&b(100.0, 100.0, 20.0, 40.0)).unwrap();
        let res = kf
            .gate(&s, &[s.to_bbox(1.0), b(1e6, 1e6, 20.0, 40.0)], CHI2_95_4DOF)
            .unwrap();
        assert_eq!(res, vec![true, false]);
    }

    #[test]
    fn gate_boundary_is_inclusive() {
        let kf = KalmanFilter::default();
        // h = 20 makes the measurement noise exactly I, so P_pos = 3I gives a
        // projected covariance of 4I = σ²I with σ = 2.
        let mut s = kf.init(&b(0.0, 0.0, 20.0, 20.0)).unwrap();
        s.covariance = StateCov::identity();
        for i in 0..4 {
            s.covariance[(i, i)] = 3.0;
        }
        let sigma: f64 = 2.0;
        let offset = sigma * CHI2_95_4DOF.sqrt();
        let probe = BBox::from_center(10.0 + offset, 10.0, 20.0, 20.0, 1.0);
        let d = kf.gating_distance(&s, &[probe]).unwrap()[0];
        assert!((d - CHI2_95_4DOF).abs() < 1e-12, "{d}");
        assert_eq!(kf.gate(&s, &[probe], d).unwrap(), vec![true]);
        assert_eq!(kf.gate(&s, &[probe], d - d * f64::EPSILON).unwrap(), vec![false]);
    }

    #[test]
    fn cmc_examples() {
        let kf = KalmanFilter::default();
        let mut s = kf.init(&b(0.0, 0.0, 10.0, 10.0)).unwrap();
        s.mean[4] = 1.0;
        assert_eq!(kf.apply_cmc(&s, &AffineTransform::identity()), s);

        let t = kf.apply_cmc(&s, &AffineTransform::translation(3.0, -2.0));
        assert_eq!(t.mean[0], s.mean[0] + 3.0);
        assert_eq!(t.mean[1], s.mean[1] - 2.0);
        assert_eq!(t.mean.fixed_rows::<4>(4), s.mean.fixed_rows::<4>(4));
        assert_eq!(t.covariance, s.covariance);

        let rot = AffineTransform::new([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let r = kf.apply_cmc(&s, &rot);
        assert!((r.mean[4] - 0.0).abs() < 1e-15 && (r.mean[5] - 1.0).abs() < 1e-15);

        assert!(AffineTransform::new([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0]]).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-500.0..500.0f64, -500.0..500.0f64, 1.0..200.0f64, 1.0..200.0f64)
            .prop_map(|(l, t, w, h)| BBox::new(l, t, w, h, 1.0).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_reflexive(a in arb_box(), c in arb_box()) {
            prop_assert_eq!(iou(&a, &c), iou(&c, &a));
            prop_assert_eq!(iou(&a, &a), 1.0);
            let v = iou(&a, &c);
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn predict_grows_trace_and_preserves_symmetry(
            first in arb_box(),
            second in arb_box(),
            steps in 0usize..6,
        ) {
            let kf = KalmanFilter::default();
            let mut s = kf.init(&first).unwrap();
            for _ in 0..steps {
                s = kf.update(&kf.predict(&s), &second).unwrap();
            }
            let p = kf.predict(&s);
            prop_assert!(p.covariance.trace() > s.covariance.trace());
            prop_assert!(asym(&p.covariance) <= 1e-9);
            let u = kf.update(&p, &second).unwrap();
            prop_assert!(asym(&u.covariance) <= 1e-9);
            let prior = p.covariance.fixed_view::<4, 4>(0, 0).trace();
            let post = u.covariance.fixed_view::<4, 4>(0, 0).trace();
            prop_assert!(post <= prior);
            let min_eig = u.covariance.symmetric_eigenvalues().min();
            prop_assert!(min_eig >= -1e-9);
        }

        #[test]
        fn predicted_measurement_update_is_idempotent(first in arb_box(), second in arb_box()) {
            let kf = KalmanFilter::default();
            let s = kf.update(&kf.predict(&kf.init(&first).unwrap()), &second).unwrap();
            let p = kf.predict(&s);
            prop_assume!(p.mean[2] > 0.0 && p.mean[3] > 0.0);
            let u = kf.update(&p, &p.to_bbox(1.0)).unwrap();
            let drift = (u.mean.fixed_rows::<4>(0) - p.mean.fixed_rows::<4>(0)).amax();
            prop_assert!(drift <= 1e-9);
        }
    }
}
