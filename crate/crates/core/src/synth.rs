//! Seeded synthetic scenarios: moving boxes, drifting identity embeddings,
//! occlusion windows, ground truth.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io::{self, EmbeddingFile, MotRow};
use crate::motion::BBox;

/// Minimum pairwise angle between identity centroids.
pub const MIN_CENTROID_ANGLE_DEG: f64 = 20.0;

const CENTROID_ATTEMPTS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcclusionMode {
    /// The detection is omitted.
    Dropout,
    /// The embedding is pulled towards the nearest other identity.
    Contaminate,
}

impl OcclusionMode {
    fn as_str(self) -> &'static str {
        match self {
            OcclusionMode::Dropout => "dropout",
            OcclusionMode::Contaminate => "contaminate",
        }
    }
}

/// Frames `start..end` (0-based) of target `target` (0-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OcclusionWindow {
    pub target: usize,
    pub start: u32,
    pub end: u32,
    pub mode: OcclusionMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub n_targets: usize,
    pub n_frames: u32,
    pub d_reid: usize,
    pub arena_width: f64,
    pub arena_height: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Per-coordinate std of the Gaussian added to the centroid.
    pub cluster_std: f64,
    /// Centroid rotation per frame, radians.
    pub drift_rate: f64,
    pub windows: Vec<OcclusionWindow>,
    pub lambda: f64,
    /// Std (pixels) of the detector jitter on box position and size.
    pub box_noise: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_targets: 5,
            n_frames: 200,
            d_reid: 64,
            arena_width: 1280.0,
            arena_height: 720.0,
            speed_min: 0.5,
            speed_max: 3.0,
            cluster_std: 0.2,
            drift_rate: 5e-4,
            windows: Vec::new(),
            lambda: 0.3,
            box_noise: 1.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_targets == 0 || self.n_frames == 0 || self.d_reid < 2 {
            return Err(Error::invalid(
                "n_targets and n_frames must be at least 1 and d_reid at least 2",
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        let dims_ok = self.arena_width > 100.0 && self.arena_height > 200.0;
        let speeds_ok = 0.0 <= self.speed_min && self.speed_min <= self.speed_max;
        let noise_ok = self.cluster_std >= 0.0 && self.box_noise >= 0.0 && self.drift_rate >= 0.0;
        if !(dims_ok && speeds_ok && noise_ok) {
            return Err(Error::invalid("arena, speed or noise parameters out of range"));
        }
        for w in &self.windows {
            if w.target >= self.n_targets || w.start >= w.end || w.end > self.n_frames {
                return Err(Error::invalid(format!(
                    "window {} {}..{} does not fit {} targets × {} frames",
                    w.target, w.start, w.end, self.n_targets, self.n_frames
                )));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self {
            windows: Vec::new(),
            ..Default::default()
        };
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: String| Error::Config(format!("line {}: {m}", idx + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad("expected `key = value`".into()))?;
            let (k, v) = (k.trim(), v.trim());
            fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
                v.parse().map_err(|_| format!("cannot parse {v:?}"))
            }
            let r = match k {
                "seed" => num(v).map(|x| cfg.seed = x),
                "n_targets" => num(v).map(|x| cfg.n_targets = x),
                "n_frames" => num(v).map(|x| cfg.n_frames = x),
                "d_reid" => num(v).map(|x| cfg.d_reid = x),
                "arena_width" => num(v).map(|x| cfg.arena_width = x),
                "arena_height" => num(v).map(|x| cfg.arena_height = x),
                "speed_min" => num(v).map(|x| cfg.speed_min = x),
                "speed_max" => num(v).map(|x| cfg.speed_max = x),
                "cluster_std" => num(v).map(|x| cfg.cluster_std = x),
                "drift_rate" => num(v).map(|x| cfg.drift_rate = x),
                "lambda" => num(v).map(|x| cfg.lambda = x),
                "box_noise" => num(v).map(|x| cfg.box_noise = x),
                "window" => parse_window(v).map(|w| cfg.windows.push(w)),
                _ => Err(format!("unknown key {k:?}")),
            };
            r.map_err(bad)?;
        }
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

fn parse_window(v: &str) -> std::result::Result<OcclusionWindow, String> {
    let f: Vec<&str> = v.split_whitespace().collect();
    if f.len() != 4 {
        return Err("window needs `target start end mode`".into());
    }
    let p = |s: &str| s.parse::<u64>().map_err(|_| format!("cannot parse {s:?}"));
    let mode = match f[3] {
        "dropout" => OcclusionMode::Dropout,
        "contaminate" => OcclusionMode::Contaminate,
        m => return Err(format!("unknown window mode {m:?}")),
    };
    Ok(OcclusionWindow {
        target: p(f[0])? as usize,
        start: p(f[1])? as u32,
        end: p(f[2])? as u32,
        mode,
    })
}

impl fmt::Display for ScenarioConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "n_targets = {}", self.n_targets)?;
        writeln!(f, "n_frames = {}", self.n_frames)?;
        writeln!(f, "d_reid = {}", self.d_reid)?;
        writeln!(f, "arena_width = {}", self.arena_width)?;
        writeln!(f, "arena_height = {}", self.arena_height)?;
        writeln!(f, "speed_min = {}", self.speed_min)?;
        writeln!(f, "speed_max = {}", self.speed_max)?;
        writeln!(f, "cluster_std = {}", self.cluster_std)?;
        writeln!(f, "drift_rate = {}", self.drift_rate)?;
        writeln!(f, "lambda = {}", self.lambda)?;
        writeln!(f, "box_noise = {}", self.box_noise)?;
        for w in &self.windows {
            writeln!(f, "window = {} {} {} {}", w.target, w.start, w.end, w.mode.as_str())?;
        }
        Ok(())
    }
}

/// A generated sequence. Frame keys are MOT frame numbers (1-based); only
/// frames with at least one detection appear in `detections`/`embeddings`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub d_reid: usize,
    pub detections: BTreeMap<u32, Vec<BBox>>,
    pub embeddings: BTreeMap<u32, DMatrix<f64>>,
    pub gt: Vec<MotRow>,
    /// Ground-truth target index (0-based) of each detection row.
    pub det_targets: BTreeMap<u32, Vec<usize>>,
}

impl Scenario {
    /// Frames in the shape expected by [`crate::tracker::run_sequence`].
    pub fn frames(&self) -> BTreeMap<u32, (Vec<BBox>, DMatrix<f64>)> {
        self.detections
            .iter()
            .map(|(&f, b)| (f, (b.clone(), self.embeddings[&f].clone())))
            .collect()
    }

    /// Writes `det.txt`, `emb.bin` and `gt.txt` into `dir` (created if needed).
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        io::write_detections(dir.join("det.txt"), &self.detections)?;
        let file = EmbeddingFile::from_frames(self.d_reid, &self.embeddings)?;
        io::write_embeddings(dir.join("emb.bin"), &file)?;
        io::write_results(dir.join("gt.txt"), &self.gt)
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn unit(v: DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    v / n
}

fn sample_centroids(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Result<Vec<DVector<f64>>> {
    let max_cos = MIN_CENTROID_ANGLE_DEG.to_radians().cos();
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > CENTROID_ATTEMPTS {
            return Err(Error::invalid(format!(
                "cannot place {n} centroids {MIN_CENTROID_ANGLE_DEG}° apart in {d} dimensions"
            )));
        }
        let c = unit(gaussian_vec(rng, d));
        if out.iter().all(|o| o.dot(&c) <= max_cos) {
            out.push(c);
        }
    }
    Ok(out)
}

struct Target {
    base: DVector<f64>,
    /// Unit vector orthogonal to `base`; the centroid rotates towards it.
    drift_dir: DVector<f64>,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    w: f64,
    h: f64,
}

impl Target {
    fn centroid(&self, t: f64, rate: f64) -> DVector<f64> {
        let a = rate * t;
        &self.base * a.cos() + &self.drift_dir * a.sin()
    }

    fn advance(&mut self, arena_w: f64, arena_h: f64) {
        self.x += self.vx;
        self.y += self.vy;
        if self.x < 0.0 {
            self.x = -self.x;
            self.vx = self.vx.abs();
        } else if self.x + self.w > arena_w {
            self.x = 2.0 * (arena_w - self.w) - self.x;
            self.vx = -self.vx.abs();
        }
        if self.y < 0.0 {
            self.y = -self.y;
            self.vy = self.vy.abs();
        } else if self.y + self.h > arena_h {
            self.y = 2.0 * (arena_h - self.h) - self.y;
            self.vy = -self.vy.abs();
        }
    }
}

pub fn generate(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d_reid;
    let bases = sample_centroids(&mut rng, cfg.n_targets, d)?;
    let mut targets: Vec<Target> = bases
        .into_iter()
        .map(|base| {
            let r = gaussian_vec(&mut rng, d);
            let drift_dir = unit(&r - &base * base.dot(&r));
            let w = rng.random_range(25.0..60.0);
            let h = 2.4 * w;
            let speed = rng.random_range(cfg.speed_min..=cfg.speed_max);
            let heading = rng.random_range(0.0..std::f64::consts::TAU);
            Target {
                base,
                drift_dir,
                x: rng.random_range(0.0..cfg.arena_width - w),
                y: rng.random_range(0.0..cfg.arena_height - h),
                vx: speed * heading.cos(),
                vy: speed * heading.sin(),
                w,
                h,
            }
        })
        .collect();

    let mut scenario = Scenario {
        d_reid: d,
        detections: BTreeMap::new(),
        embeddings: BTreeMap::new(),
        gt: Vec::new(),
        det_targets: BTreeMap::new(),
    };
    let mut order: Vec<usize> = (0..cfg.n_targets).collect();
    for t_idx in 0..cfg.n_frames {
        if t_idx > 0 {
            for t in targets.iter_mut() {
                t.advance(cfg.arena_width, cfg.arena_height);
            }
        }
        let frame = t_idx + 1;
        let tf = t_idx as f64;
        let centroids: Vec<DVector<f64>> = targets.iter().map(|t| t.centroid(tf, cfg.drift_rate)).collect();
        order.shuffle(&mut rng);

        let mut boxes = Vec::new();
        let mut rows: Vec<DVector<f64>> = Vec::new();
        let mut ids = Vec::new();
        for &k in &order {
            let t = &targets[k];
            let noise = gaussian_vec(&mut rng, d) * cfg.cluster_std;
            let jitter: [f64; 4] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal) * cfg.box_noise);
            let conf: f64 = rng.random_range(0.65..1.0);

            let gt_box = BBox::new(t.x, t.y, t.w, t.h, 1.0)?;
            scenario.gt.push(MotRow::new(frame, k as i64 + 1, &gt_box));

            let active = cfg
                .windows
                .iter()
                .filter(|w| w.target == k && (w.start..w.end).contains(&t_idx));
            let mut dropout = false;
            let mut contaminate = false;
            for w in active {
                match w.mode {
                    OcclusionMode::Dropout => dropout = true,
                    OcclusionMode::Contaminate => contaminate = true,
                }
            }
            if dropout {
                continue;
            }
            let mut emb = unit(&centroids[k] + noise);
            if contaminate && cfg.n_targets > 1 && cfg.lambda > 0.0 {
                let other = (0..cfg.n_targets)
                    .filter(|&j| j != k)
                    .max_by(|&a, &b| {
                        let (ca, cb) = (centroids[k].dot(&centroids[a]), centroids[k].dot(&centroids[b]));
                        ca.total_cmp(&cb).then(b.cmp(&a))
                    })
                    .expect("at least two targets");
                emb = unit(&emb * (1.0 - cfg.lambda) + &centroids[other] * cfg.lambda);
            }
            let w = (t.w + 0.2 * jitter[2]).max(1.0);
            let h = (t.h + 0.2 * jitter[3]).max(1.0);
            boxes.push(BBox::new(t.x + jitter[0], t.y + jitter[1], w, h, conf)?);
            rows.push(emb);
            ids.push(k);
        }
        if !boxes.is_empty() {
            let m = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
            scenario.detections.insert(frame, boxes);
            scenario.embeddings.insert(frame, m);
            scenario.det_targets.insert(frame, ids);
        }
    }
    scenario.gt.sort_by_key(|r| (r.frame, r.id));
    Ok(scenario)
}

pub const SUITE_SIZE: usize = 20;
const SUITE_TARGETS: [usize; 3] = [5, 10, 20];
const SUITE_FRAMES: [u32; 2] = [200, 500];
const SUITE_DROPOUT: [u32; 3] = [5, 15, 40];
const SUITE_LAMBDA: [f64; 2] = [0.3, 0.6];
const CONTAMINATION_LEN: u32 = 20;

/// Twenty configurations spanning target count, length, dropout length and
/// contamination strength.
pub fn scenario_suite(master_seed: u64) -> Vec<ScenarioConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    (0..SUITE_SIZE)
        .map(|i| {
            let n_targets = SUITE_TARGETS[i % 3];
            let n_frames = SUITE_FRAMES[(i / 3) % 2];
            let dropout = SUITE_DROPOUT[(i / 6) % 3];
            let lambda = SUITE_LAMBDA[i % 2];
            let seed = rng.next_u64();
            let per_mode = (n_frames / 100) as usize * n_targets.div_ceil(5);
            let mut windows = Vec::with_capacity(2 * per_mode);
            for (mode, len) in [
                (OcclusionMode::Dropout, dropout),
                (OcclusionMode::Contaminate, CONTAMINATION_LEN),
            ] {
                for _ in 0..per_mode {
                    let start = rng.random_range(10..n_frames - len);
                    windows.push(OcclusionWindow {
                        target: rng.random_range(0..n_targets),
                        start,
                        end: start + len,
                        mode,
                    });
                }
            }
            ScenarioConfig {
                seed,
                n_targets,
                n_frames,
                windows,
                lambda,
                ..Default::default()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            seed: 4,
            n_targets: 3,
            n_frames: 30,
            d_reid: 16,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_output_and_files() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        a.write_to(da.path()).unwrap();
        b.write_to(db.path()).unwrap();
        for f in ["det.txt", "emb.bin", "gt.txt"] {
            assert_eq!(
                std::fs::read(da.path().join(f)).unwrap(),
                std::fs::read(db.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn dropout_removes_detections_keeps_gt() {
        let mut cfg = small();
        cfg.windows.push(OcclusionWindow {
            target: 1,
            start: 10,
            end: 15,
            mode: OcclusionMode::Dropout,
        });
        let s = generate(&cfg).unwrap();
        for frame in 1..=30u32 {
            let present = s.det_targets.get(&frame).is_some_and(|v| v.contains(&1));
            assert_eq!(present, !(11..=15).contains(&frame), "frame {frame}");
            assert!(s.gt.iter().any(|r| r.frame == frame && r.id == 2));
        }
        assert_eq!(s.gt.len(), 90);
    }

    #[test]
    fn zero_lambda_contamination_is_a_no_op() {
        let mut cfg = small();
        cfg.lambda = 0.0;
        let clean = generate(&cfg).unwrap();
        cfg.windows.push(OcclusionWindow {
            target: 0,
            start: 5,
            end: 20,
            mode: OcclusionMode::Contaminate,
        });
        assert_eq!(generate(&cfg).unwrap(), clean);
    }

    #[test]
    fn contamination_pulls_towards_another_identity() {
        let mut cfg = small();
        cfg.lambda = 1.0;
        cfg.cluster_std = 0.0;
        cfg.drift_rate = 0.0;
        cfg.windows.push(OcclusionWindow {
            target: 0,
            start: 0,
            end: 30,
            mode: OcclusionMode::Contaminate,
        });
        let s = generate(&cfg).unwrap();
        let clean = generate(&ScenarioConfig { windows: vec![], ..cfg.clone() }).unwrap();
        let f = 1;
        let pos = s.det_targets[&f].iter().position(|&k| k == 0).unwrap();
        let e = s.embeddings[&f].row(pos).transpose();
        let others: Vec<_> = (0..clean.det_targets[&f].len())
            .filter(|&i| clean.det_targets[&f][i] != 0)
            .map(|i| clean.embeddings[&f].row(i).transpose())
            .collect();
        assert!(others.iter().any(|o| (o - &e).norm() < 1e-12));
    }

    #[test]
    fn invariants_hold() {
        let cfg = ScenarioConfig {
            windows: vec![OcclusionWindow {
                target: 2,
                start: 3,
                end: 9,
                mode: OcclusionMode::Contaminate,
            }],
            ..small()
        };
        let s = generate(&cfg).unwrap();
        for (f, m) in &s.embeddings {
            assert!(s.detections[f].len() <= cfg.n_targets);
            assert_eq!(m.nrows(), s.detections[f].len());
            for r in m.row_iter() {
                assert!((r.norm() - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn invalid_windows_rejected() {
        for (target, start, end) in [(3, 0, 5), (0, 5, 5), (0, 10, 31)] {
            let mut cfg = small();
            cfg.windows.push(OcclusionWindow {
                target,
                start,
                end,
                mode: OcclusionMode::Dropout,
            });
            assert!(matches!(generate(&cfg), Err(Error::InvalidArgument(_))));
        }
        let cfg = ScenarioConfig { lambda: 1.5, ..small() };
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn suite_shape() {
        let suite = scenario_suite(7);
        assert_eq!(suite.len(), SUITE_SIZE);
        assert_eq!(suite, scenario_suite(7));
        for c in &suite {
            c.validate().unwrap();
        }
        for t in SUITE_TARGETS {
            assert!(suite.iter().any(|c| c.n_targets == t));
        }
        for n in SUITE_FRAMES {
            assert!(suite.iter().any(|c| c.n_frames == n));
        }
        for l in SUITE_LAMBDA {
            assert!(suite.iter().any(|c| c.lambda == l));
        }
        for d in SUITE_DROPOUT {
            assert!(suite
                .iter()
                .any(|c| c.windows.iter().any(|w| w.mode == OcclusionMode::Dropout && w.end - w.start == d)));
        }
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = scenario_suite(3).remove(4);
        assert_eq!(ScenarioConfig::parse(&cfg.to_string()).unwrap(), cfg);
        assert!(ScenarioConfig::parse("colour = red").is_err());
        assert!(ScenarioConfig::parse("window = 0 1 2 sideways").is_err());
    }

    #[test]
    fn centroids_respect_min_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = sample_centroids(&mut rng, 20, 8).unwrap();
        let max_cos = MIN_CENTROID_ANGLE_DEG.to_radians().cos();
        for i in 0..c.len() {
            for j in 0..i {
                assert!(c[i].dot(&c[j]) <= max_cos);
            }
        }
        assert!(sample_centroids(&mut rng, 30, 2).is_err());
    }
}
