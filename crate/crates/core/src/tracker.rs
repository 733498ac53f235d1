//! The per-frame tracking loop: predict, affinity, cascade, lifecycle,
//! labels, continual learning.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::association::{
    affinity_submatrix, cascade, to_distance, AssociationResult, CascadeInput, Stage, Thresholds,
};
use crate::error::{Error, Result};
use crate::fac::{EtLayer, FacState, LabelMatrix, WindowedFac};
use crate::io::MotRow;
use crate::motion::{iou, AffineTransform, BBox, KalmanFilter, KalmanState, CHI2_95_4DOF};

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub gamma: f64,
    pub d_et: usize,
    pub seed: u64,
    pub tau_aff: f64,
    pub tau_cos: f64,
    pub tau_iou: f64,
    pub tau_new: f64,
    pub n_init: u32,
    pub ema_alpha: f64,
    pub max_lost_frames: u32,
    pub min_box_confidence: f64,
    /// Consecutive hits before a tentative track is confirmed.
    pub confirm_hits: u32,
    /// Squared-Mahalanobis gate on `(cx, cy, w, h)`.
    pub gate_threshold: f64,
    /// A lost track whose predicted box overlaps a matched active track at
    /// least this much (IoU) is dropped as a duplicate.
    pub duplicate_iou: f64,
    /// `false` runs the cosine + IoU baseline with no FAC stage.
    pub fac: bool,
    /// Train only on the last `L` frames; `None` keeps all history.
    pub memory_length: Option<usize>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        let th = Thresholds::default();
        Self {
            gamma: 1.0,
            d_et: 3000,
            seed: 0,
            tau_aff: th.tau_aff,
            tau_cos: th.tau_cos,
            tau_iou: th.tau_iou,
            tau_new: th.tau_new,
            n_init: 3,
            ema_alpha: 0.9,
            max_lost_frames: 30,
            min_box_confidence: 0.1,
            confirm_hits: 2,
            gate_threshold: CHI2_95_4DOF,
            duplicate_iou: 0.85,
            fac: true,
            memory_length: None,
        }
    }
}

impl TrackerConfig {
    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            tau_aff: self.tau_aff,
            tau_cos: self.tau_cos,
            tau_iou: self.tau_iou,
            tau_new: self.tau_new,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("tau_aff", self.tau_aff),
            ("tau_cos", self.tau_cos),
            ("tau_iou", self.tau_iou),
            ("tau_new", self.tau_new),
            ("ema_alpha", self.ema_alpha),
            ("min_box_confidence", self.min_box_confidence),
            ("duplicate_iou", self.duplicate_iou),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.d_et == 0 || self.n_init == 0 || self.max_lost_frames == 0 || self.confirm_hits == 0 {
            return Err(Error::Config(
                "d_et, n_init, max_lost_frames and confirm_hits must be at least 1".into(),
            ));
        }
        if !(self.gate_threshold > 0.0) {
            return Err(Error::Config("gate_threshold must be positive".into()));
        }
        if self.memory_length == Some(0) {
            return Err(Error::Config("memory_length must be at least 1 (or `all`)".into()));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "gamma" => self.gamma = num(key, value)?,
            "d_et" => self.d_et = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "tau_aff" => self.tau_aff = num(key, value)?,
            "tau_cos" => self.tau_cos = num(key, value)?,
            "tau_iou" => self.tau_iou = num(key, value)?,
            "tau_new" => self.tau_new = num(key, value)?,
            "n_init" => self.n_init = num(key, value)?,
            "ema_alpha" => self.ema_alpha = num(key, value)?,
            "max_lost_frames" => self.max_lost_frames = num(key, value)?,
            "min_box_confidence" => self.min_box_confidence = num(key, value)?,
            "confirm_hits" => self.confirm_hits = num(key, value)?,
            "gate_threshold" => self.gate_threshold = num(key, value)?,
            "duplicate_iou" => self.duplicate_iou = num(key, value)?,
            "fac" => self.fac = num(key, value)?,
            "memory_length" => {
                self.memory_length = if value == "all" {
                    None
                } else {
                    Some(num(key, value)?)
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", idx + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", idx + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

impl fmt::Display for TrackerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gamma = {}", self.gamma)?;
        writeln!(f, "d_et = {}", self.d_et)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "tau_aff = {}", self.tau_aff)?;
        writeln!(f, "tau_cos = {}", self.tau_cos)?;
        writeln!(f, "tau_iou = {}", self.tau_iou)?;
        writeln!(f, "tau_new = {}", self.tau_new)?;
        writeln!(f, "n_init = {}", self.n_init)?;
        writeln!(f, "ema_alpha = {}", self.ema_alpha)?;
        writeln!(f, "max_lost_frames = {}", self.max_lost_frames)?;
        writeln!(f, "min_box_confidence = {}", self.min_box_confidence)?;
        writeln!(f, "confirm_hits = {}", self.confirm_hits)?;
        writeln!(f, "gate_threshold = {}", self.gate_threshold)?;
        writeln!(f, "duplicate_iou = {}", self.duplicate_iou)?;
        writeln!(f, "fac = {}", self.fac)?;
        match self.memory_length {
            Some(l) => writeln!(f, "memory_length = {l}"),
            None => writeln!(f, "memory_length = all"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Tentative,
    Active,
    Lost,
    Removed,
}

#[derive(Debug, Clone)]
pub struct Track {
    pub id: u64,
    pub kf: KalmanState,
    /// EMA appearance feature, unit norm.
    pub feature: DVector<f64>,
    pub status: TrackStatus,
    pub fac_frames: u32,
    pub last_seen: u32,
    pub fcn_column: usize,
    /// Confidence of the most recent matched detection.
    pub last_confidence: f64,
    hits: u32,
}

/// One frame of detections with their appearance embeddings (`N × d_reid`).
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub frame: u32,
    pub boxes: Vec<BBox>,
    pub embeddings: DMatrix<f64>,
}

/// What happened to a detection in the last stepped frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchRecord {
    pub track_id: u64,
    pub stage: Stage,
    pub distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameReport {
    pub frame: u32,
    pub matches: Vec<MatchRecord>,
    pub spawned: Vec<u64>,
}

/// Training rows selected from a frame, with their one-hot labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLabels {
    /// Detection index of each label row.
    pub det_rows: Vec<usize>,
    pub labels: LabelMatrix,
}

/// Label construction from association results.
///
/// `matches` pairs a detection with the matched track's output column;
/// `spawn` lists detections that start new tracks, in spawn order. Rows come
/// out in detection order; unmatched, non-spawning detections are dropped.
pub fn build_labels(
    old_cols: usize,
    matches: &[(usize, usize)],
    spawn: &[usize],
) -> Result<TrainingLabels> {
    let mut col_seen = vec![false; old_cols];
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    for &(det, col) in matches {
        if col >= old_cols {
            return Err(Error::invalid(format!("match column {col} out of range")));
        }
        if std::mem::replace(&mut col_seen[col], true) {
            return Err(Error::invalid(format!("track column {col} matched twice")));
        }
        if rows.insert(det, col).is_some() {
            return Err(Error::invalid(format!("detection {det} matched twice")));
        }
    }
    for (k, &det) in spawn.iter().enumerate() {
        if rows.insert(det, old_cols + k).is_some() {
            return Err(Error::invalid(format!("detection {det} both matched and spawned")));
        }
    }
    let det_rows: Vec<usize> = rows.keys().copied().collect();
    let labels = LabelMatrix::new(old_cols, spawn.len(), rows.values().map(|&c| Some(c)).collect())?;
    Ok(TrainingLabels { det_rows, labels })
}

fn normalized(v: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let n = v.norm();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::invalid(format!("{what} has zero or invalid norm")));
    }
    Ok(v / n)
}

/// `normalize(alpha · feature + (1 − alpha) · normalize(emb))`.
pub fn ema_feature(feature: &DVector<f64>, emb: &DVector<f64>, alpha: f64) -> Result<DVector<f64>> {
    let e = normalized(emb.clone(), "embedding")?;
    if alpha == 0.0 {
        return Ok(e);
    }
    let mixed = feature * alpha + e * (1.0 - alpha);
    normalized(mixed, "EMA feature")
}

#[derive(Debug, Clone)]
enum Learner {
    Full(FacState),
    Window(WindowedFac),
}

impl Learner {
    fn n_tracks(&self) -> usize {
        match self {
            Learner::Full(s) => s.n_tracks(),
            Learner::Window(w) => w.n_tracks(),
        }
    }

    fn affinity(&self, x_et: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Learner::Full(s) => s.affinity_from_features(x_et),
            Learner::Window(w) => w.affinity_from_features(x_et),
        }
    }

    fn update(&mut self, x_et: &DMatrix<f64>, labels: &LabelMatrix) -> Result<()> {
        match self {
            Learner::Full(s) => s.continual_update(x_et, labels),
            Learner::Window(w) => w.update(x_et, labels),
        }
    }
}

struct Fac {
    layer: EtLayer,
    learner: Learner,
}

pub struct Tracker {
    cfg: TrackerConfig,
    d_reid: usize,
    kf: KalmanFilter,
    fac: Option<Fac>,
    tracks: Vec<Track>,
    cmc: BTreeMap<u32, AffineTransform>,
    last_frame: Option<u32>,
    rows: Vec<MotRow>,
    report: FrameReport,
}

fn with_frame(e: Error, frame: u32) -> Error {
    match e {
        Error::NumericalFailure { context, .. } => Error::NumericalFailure {
            frame: frame as u64,
            context,
        },
        other => other,
    }
}

impl Tracker {
    pub fn new(cfg: TrackerConfig, d_reid: usize) -> Result<Self> {
        cfg.validate()?;
        if d_reid == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        let fac = if cfg.fac {
            let layer = EtLayer::new(cfg.seed, d_reid, cfg.d_et)?;
            let learner = match cfg.memory_length {
                None => Learner::Full(FacState::new(cfg.gamma, cfg.d_et)?),
                Some(l) => Learner::Window(WindowedFac::new(cfg.gamma, cfg.d_et, l)?),
            };
            Some(Fac { layer, learner })
        } else {
            None
        };
        Ok(Self {
            cfg,
            d_reid,
            kf: KalmanFilter::default(),
            fac,
            tracks: Vec::new(),
            cmc: BTreeMap::new(),
            last_frame: None,
            rows: Vec::new(),
            report: FrameReport::default(),
        })
    }

    /// Per-frame camera motion, keyed by the frame it maps *into*.
    pub fn set_cmc(&mut self, cmc: BTreeMap<u32, AffineTransform>) {
        self.cmc = cmc;
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn last_report(&self) -> &FrameReport {
        &self.report
    }

    pub fn et_layer(&self) -> Option<&EtLayer> {
        self.fac.as_ref().map(|f| &f.layer)
    }

    /// The recursive FAC state, when running with full memory.
    pub fn fac_state(&self) -> Option<&FacState> {
        match self.fac.as_ref().map(|f| &f.learner) {
            Some(Learner::Full(s)) => Some(s),
            _ => None,
        }
    }

    /// Number of output columns learned so far (0 without FAC).
    pub fn fac_columns(&self) -> usize {
        self.fac.as_ref().map_or(0, |f| f.learner.n_tracks())
    }

    pub fn step(&mut self, input: &FrameInput) -> Result<Vec<(u64, BBox)>> {
        let frame = input.frame;
        if let Some(last) = self.last_frame {
            if frame <= last {
                return Err(Error::invalid(format!(
                    "frame {frame} does not follow frame {last}"
                )));
            }
        }
        if input.embeddings.nrows() != input.boxes.len() {
            return Err(Error::invalid(format!(
                "frame {frame}: {} boxes but {} embeddings",
                input.boxes.len(),
                input.embeddings.nrows()
            )));
        }
        if !input.boxes.is_empty() && input.embeddings.ncols() != self.d_reid {
            return Err(Error::invalid(format!(
                "frame {frame}: embedding width {} != {}",
                input.embeddings.ncols(),
                self.d_reid
            )));
        }
        let first = self.last_frame.is_none();

        // (1) confidence filter + embedding normalization
        let keep: Vec<usize> = (0..input.boxes.len())
            .filter(|&i| input.boxes[i].confidence >= self.cfg.min_box_confidence)
            .collect();
        let boxes: Vec<BBox> = keep.iter().map(|&i| input.boxes[i]).collect();
        for b in &boxes {
            b.validate()?;
        }
        let mut emb = DMatrix::zeros(keep.len(), self.d_reid);
        for (r, &i) in keep.iter().enumerate() {
            let row = normalized(input.embeddings.row(i).transpose(), "embedding")
                .map_err(|e| Error::invalid(format!("frame {frame}, detection {i}: {e}")))?;
            emb.row_mut(r).copy_from(&row.transpose());
        }

        // (2) motion prediction
        let cmc = self.cmc.get(&frame).copied();
        for t in self.tracks.iter_mut().filter(|t| t.status != TrackStatus::Removed) {
            if let Some(a) = &cmc {
                t.kf = self.kf.apply_cmc(&t.kf, a);
            }
            t.kf = self.kf.predict(&t.kf);
        }
        let live: Vec<usize> = (0..self.tracks.len())
            .filter(|&i| self.tracks[i].status != TrackStatus::Removed)
            .collect();

        let x_et = match &self.fac {
            Some(f) if !boxes.is_empty() => Some(f.layer.transform(&emb)?),
            _ => None,
        };

        // (3)+(4) affinity and cascade
        let assoc = if first || live.is_empty() {
            AssociationResult {
                matches: Vec::new(),
                unmatched_dets: (0..boxes.len()).collect(),
                unmatched_tracks: (0..live.len()).collect(),
                spawn: if first {
                    (0..boxes.len()).collect()
                } else {
                    (0..boxes.len())
                        .filter(|&d| boxes[d].confidence >= self.cfg.tau_new)
                        .collect()
                },
            }
        } else {
            self.associate(&boxes, &emb, x_et.as_ref(), &live)
                .map_err(|e| with_frame(e, frame))?
        };

        // (5) lifecycle
        let mut report = FrameReport {
            frame,
            ..Default::default()
        };
        let mut matched_cols = Vec::with_capacity(assoc.matches.len());
        for m in &assoc.matches {
            let ti = live[m.track];
            let emb_row = emb.row(m.det).transpose();
            let t = &mut self.tracks[ti];
            t.kf = self.kf.update(&t.kf, &boxes[m.det]).map_err(|e| with_frame(e, frame))?;
            t.feature = ema_feature(&t.feature, &emb_row, self.cfg.ema_alpha)?;
            t.last_seen = frame;
            t.last_confidence = boxes[m.det].confidence;
            t.hits += 1;
            t.status = match t.status {
                TrackStatus::Tentative if t.hits >= self.cfg.confirm_hits => TrackStatus::Active,
                TrackStatus::Tentative => TrackStatus::Tentative,
                _ => TrackStatus::Active,
            };
            matched_cols.push((m.det, t.fcn_column));
            report.matches.push(MatchRecord {
                track_id: t.id,
                stage: m.stage,
                distance: m.distance,
            });
        }
        for &j in &assoc.unmatched_tracks {
            let t = &mut self.tracks[live[j]];
            t.hits = 0;
            t.status = match t.status {
                TrackStatus::Tentative => TrackStatus::Removed,
                TrackStatus::Active | TrackStatus::Lost => {
                    if frame - t.last_seen > self.cfg.max_lost_frames {
                        TrackStatus::Removed
                    } else {
                        TrackStatus::Lost
                    }
                }
                TrackStatus::Removed => TrackStatus::Removed,
            };
        }
        let old_cols = self.tracks.len();
        for &d in &assoc.spawn {
            let kf = self.kf.init(&boxes[d])?;
            let id = self.tracks.len() as u64 + 1;
            self.tracks.push(Track {
                id,
                kf,
                feature: emb.row(d).transpose(),
                status: if first {
                    TrackStatus::Active
                } else {
                    TrackStatus::Tentative
                },
                fac_frames: 0,
                last_seen: frame,
                fcn_column: old_cols + report.spawned.len(),
                last_confidence: boxes[d].confidence,
                hits: 1,
            });
            report.spawned.push(id);
        }

        self.drop_duplicates(frame);

        // (6)+(7) labels and continual learning
        if let (Some(fac), Some(x_et)) = (self.fac.as_mut(), x_et.as_ref()) {
            let training = build_labels(old_cols, &matched_cols, &assoc.spawn)?;
            let rows = DMatrix::from_fn(training.det_rows.len(), x_et.ncols(), |i, j| {
                x_et[(training.det_rows[i], j)]
            });
            fac.learner
                .update(&rows, &training.labels)
                .map_err(|e| with_frame(e, frame))?;
            for c in training.labels.rows().iter().flatten() {
                self.tracks[*c].fac_frames += 1;
            }
        }

        self.last_frame = Some(frame);
        self.report = report;
        let mut out: Vec<(u64, BBox)> = self
            .tracks
            .iter()
            .filter(|t| t.status == TrackStatus::Active && t.last_seen == frame)
            .map(|t| (t.id, t.kf.to_bbox(t.last_confidence)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        self.rows
            .extend(out.iter().map(|(id, b)| MotRow::new(frame, *id as i64, b)));
        Ok(out)
    }

    fn drop_duplicates(&mut self, frame: u32) {
        let active: Vec<BBox> = self
            .tracks
            .iter()
            .filter(|t| t.status == TrackStatus::Active && t.last_seen == frame)
            .map(|t| t.kf.to_bbox(1.0))
            .collect();
        for t in self.tracks.iter_mut().filter(|t| t.status == TrackStatus::Lost) {
            let b = t.kf.to_bbox(1.0);
            if b.validate().is_ok() && active.iter().any(|a| iou(a, &b) >= self.cfg.duplicate_iou) {
                t.status = TrackStatus::Removed;
            }
        }
    }

    fn associate(
        &self,
        boxes: &[BBox],
        emb: &DMatrix<f64>,
        x_et: Option<&DMatrix<f64>>,
        live: &[usize],
    ) -> Result<AssociationResult> {
        let n = boxes.len();
        let m = live.len();
        let mut gate = DMatrix::from_element(n, m, false);
        let mut features = DMatrix::zeros(m, self.d_reid);
        let mut track_boxes = Vec::with_capacity(m);
        let mut iou_eligible = Vec::with_capacity(m);
        for (j, &ti) in live.iter().enumerate() {
            let t = &self.tracks[ti];
            let g = self.kf.gate(&t.kf, boxes, self.cfg.gate_threshold)?;
            for (d, ok) in g.into_iter().enumerate() {
                gate[(d, j)] = ok;
            }
            features.row_mut(j).copy_from(&t.feature.transpose());
            track_boxes.push(t.kf.to_bbox(1.0));
            iou_eligible.push(matches!(t.status, TrackStatus::Tentative | TrackStatus::Active));
        }

        let mut fac_tracks = Vec::new();
        let mut affinity_distance = DMatrix::zeros(n, 0);
        if let (Some(fac), Some(x_et)) = (self.fac.as_ref(), x_et) {
            fac_tracks = (0..m)
                .filter(|&j| self.tracks[live[j]].fac_frames >= self.cfg.n_init)
                .collect();
            if !fac_tracks.is_empty() {
                let o = fac.learner.affinity(x_et)?;
                let cols: Vec<usize> = fac_tracks.iter().map(|&j| self.tracks[live[j]].fcn_column).collect();
                let mut d = to_distance(&affinity_submatrix(&o, &cols)?);
                for (k, &j) in fac_tracks.iter().enumerate() {
                    for r in 0..n {
                        if !gate[(r, j)] {
                            d[(r, k)] = 1.0;
                        }
                    }
                }
                affinity_distance = d;
            }
        }

        let input = CascadeInput {
            boxes,
            embeddings: emb,
            track_features: &features,
            track_boxes: &track_boxes,
            iou_eligible: &iou_eligible,
            gate: &gate,
            fac_tracks: &fac_tracks,
            affinity_distance: &affinity_distance,
        };
        cascade(&input, &self.cfg.thresholds())
    }

    /// All emitted rows sorted by `(frame, id)`.
    pub fn finalize(&self) -> Vec<MotRow> {
        let mut rows = self.rows.clone();
        rows.sort_by_key(|r| (r.frame, r.id));
        rows
    }
}

/// Runs a whole sequence, stepping every frame from the first to the last
/// present in `frames` (missing frames are stepped empty).
pub fn run_sequence(
    cfg: &TrackerConfig,
    d_reid: usize,
    frames: &BTreeMap<u32, (Vec<BBox>, DMatrix<f64>)>,
    cmc: Option<BTreeMap<u32, AffineTransform>>,
) -> Result<Vec<MotRow>> {
    let mut tracker = Tracker::new(cfg.clone(), d_reid)?;
    if let Some(c) = cmc {
        tracker.set_cmc(c);
    }
    let (Some(&lo), Some(&hi)) = (frames.keys().next(), frames.keys().next_back()) else {
        return Ok(Vec::new());
    };
    for frame in lo..=hi {
        let input = match frames.get(&frame) {
            Some((boxes, emb)) => FrameInput {
                frame,
                boxes: boxes.clone(),
                embeddings: emb.clone(),
            },
            None => FrameInput {
                frame,
                boxes: Vec::new(),
                embeddings: DMatrix::zeros(0, d_reid),
            },
        };
        tracker.step(&input)?;
    }
    Ok(tracker.finalize())
}
