//! Cost matrices, rectangular assignment and the two-stage association cascade.
//!
//! Stage one matches detections to FAC-eligible tracks on the affinity
//! distance `clamp(1 − A, 0, 1)`. Stage two runs on whatever is left: cosine
//! distance between detection embeddings and track features (motion gated),
//! then IoU distance against the predicted boxes.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::motion::{iou, BBox};

/// Detection × track distance matrix. Entries produced by this module lie in
/// `[0, 1]`.
pub type CostMatrix = DMatrix<f64>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AssignmentOutcome {
    /// `(row, col)` pairs sorted by row.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

/// Minimum-cost assignment of `min(rows, cols)` pairs on an arbitrary real
/// matrix (shortest augmenting paths with potentials, O(n²m)).
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let (rows, cols) = cost.shape();
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows > cols {
        let mut t: Vec<(usize, usize)> = hungarian(&cost.transpose())
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        t.sort_unstable();
        return t;
    }
    let n = rows;
    let m = cols;
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    out.sort_unstable();
    out
}

/// Thresholded minimum-cost matching.
///
/// Entries above `threshold` (or NaN) are treated as forbidden: the solver
/// first maximizes the number of admissible pairs, then minimizes their total
/// cost. Forbidden pairs never appear in the result.
pub fn solve_assignment(cost: &DMatrix<f64>, threshold: f64) -> AssignmentOutcome {
    let (rows, cols) = cost.shape();
    let admissible = |c: f64| !c.is_nan() && c <= threshold;
    let max_ok = cost
        .iter()
        .copied()
        .filter(|&c| admissible(c))
        .fold(0.0f64, |acc, c| acc.max(c.abs()));
    // Any single forbidden pair costs more than every admissible matching.
    let forbidden = (rows.min(cols) as f64 + 1.0) * (2.0 * max_ok + 1.0);
    let work = cost.map(|c| if admissible(c) { c } else { forbidden });

    let mut row_used = vec![false; rows];
    let mut col_used = vec![false; cols];
    let mut matches = Vec::new();
    for (r, c) in hungarian(&work) {
        if admissible(cost[(r, c)]) {
            row_used[r] = true;
            col_used[c] = true;
            matches.push((r, c));
        }
    }
    AssignmentOutcome {
        matches,
        unmatched_rows: (0..rows).filter(|&r| !row_used[r]).collect(),
        unmatched_cols: (0..cols).filter(|&c| !col_used[c]).collect(),
    }
}

/// Gathers the affinity columns of the given tracks, in the given order.
pub fn affinity_submatrix(o: &DMatrix<f64>, active: &[usize]) -> Result<DMatrix<f64>> {
    let mut seen = vec![false; o.ncols()];
    for &c in active {
        if c >= o.ncols() {
            return Err(Error::invalid(format!(
                "active column {c} out of range for {} tracks",
                o.ncols()
            )));
        }
        if seen[c] {
            return Err(Error::invalid(format!("active column {c} listed twice")));
        }
        seen[c] = true;
    }
    Ok(DMatrix::from_fn(o.nrows(), active.len(), |r, j| o[(r, active[j])]))
}

/// `clamp(1 − a, 0, 1)`.
pub fn to_distance(a: &DMatrix<f64>) -> CostMatrix {
    a.map(|v| (1.0 - v).clamp(0.0, 1.0))
}

fn normalized_rows(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        let norm = row.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::invalid(format!("{what} row {i} has zero or invalid norm")));
        }
        row /= norm;
    }
    Ok(out)
}

/// `clamp(1 − cos, 0, 1)` between every detection and track row.
pub fn cosine_distance(dets: &DMatrix<f64>, tracks: &DMatrix<f64>) -> Result<CostMatrix> {
    if dets.nrows() > 0 && tracks.nrows() > 0 && dets.ncols() != tracks.ncols() {
        return Err(Error::invalid(format!(
            "embedding widths differ: {} vs {}",
            dets.ncols(),
            tracks.ncols()
        )));
    }
    let d = normalized_rows(dets, "detection")?;
    let t = normalized_rows(tracks, "track")?;
    if d.nrows() == 0 || t.nrows() == 0 {
        return Ok(DMatrix::zeros(d.nrows(), t.nrows()));
    }
    Ok((d * t.transpose()).map(|c| (1.0 - c).clamp(0.0, 1.0)))
}

/// `1 − IoU` between every detection and track box.
pub fn iou_distance(dets: &[BBox], tracks: &[BBox]) -> CostMatrix {
    DMatrix::from_fn(dets.len(), tracks.len(), |i, j| 1.0 - iou(&dets[i], &tracks[j]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub tau_aff: f64,
    pub tau_cos: f64,
    pub tau_iou: f64,
    pub tau_new: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            tau_aff: 0.3,
            tau_cos: 0.45,
            tau_iou: 0.5,
            tau_new: 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Affinity,
    Cosine,
    Iou,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub det: usize,
    pub track: usize,
    pub stage: Stage,
    pub distance: f64,
}

/// Tracks are indexed `0..M` in the caller's candidate table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssociationResult {
    /// Sorted by detection index.
    pub matches: Vec<Match>,
    pub unmatched_dets: Vec<usize>,
    pub unmatched_tracks: Vec<usize>,
    /// Unmatched detections confident enough to start a track, ascending.
    pub spawn: Vec<usize>,
}

/// Everything the cascade reads for one frame.
#[derive(Debug, Clone, Copy)]
pub struct CascadeInput<'a> {
    pub boxes: &'a [BBox],
    /// `N × d_reid`, rows unit norm.
    pub embeddings: &'a DMatrix<f64>,
    /// `M × d_reid`, rows unit norm.
    pub track_features: &'a DMatrix<f64>,
    /// Predicted box per track.
    pub track_boxes: &'a [BBox],
    /// Tracks allowed into the IoU round.
    pub iou_eligible: &'a [bool],
    /// `N × M` motion gate.
    pub gate: &'a DMatrix<bool>,
    /// Track indices whose FAC affinity is trusted, one per column of
    /// `affinity_distance`.
    pub fac_tracks: &'a [usize],
    /// `N × fac_tracks.len()`, already gated and converted to distances.
    pub affinity_distance: &'a CostMatrix,
}

impl CascadeInput<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.boxes.len();
        let m = self.track_boxes.len();
        let bad = |what: &str| Err(Error::invalid(format!("cascade: inconsistent {what}")));
        if self.embeddings.nrows() != n {
            return bad("detection embeddings");
        }
        if self.track_features.nrows() != m || self.iou_eligible.len() != m {
            return bad("track table");
        }
        if self.gate.shape() != (n, m) {
            return bad("gate shape");
        }
        if self.affinity_distance.shape() != (n, self.fac_tracks.len()) {
            return bad("affinity matrix shape");
        }
        let mut seen = vec![false; m];
        for &t in self.fac_tracks {
            if t >= m || seen[t] {
                return bad("FAC track indices");
            }
            seen[t] = true;
        }
        Ok(())
    }
}

fn sub_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

pub fn cascade(input: &CascadeInput<'_>, th: &Thresholds) -> Result<AssociationResult> {
    input.validate()?;
    let n = input.boxes.len();
    let m = input.track_boxes.len();
    let mut det_done = vec![false; n];
    let mut track_done = vec![false; m];
    let mut matches = Vec::new();

    // Stage 1: FAC affinity.
    if !input.fac_tracks.is_empty() && n > 0 {
        let out = solve_assignment(input.affinity_distance, th.tau_aff);
        for (d, j) in out.matches {
            let t = input.fac_tracks[j];
            det_done[d] = true;
            track_done[t] = true;
            matches.push(Match {
                det: d,
                track: t,
                stage: Stage::Affinity,
                distance: input.affinity_distance[(d, j)],
            });
        }
    }

    // Stage 2a: gated cosine distance on EMA features.
    let dets: Vec<usize> = (0..n).filter(|&d| !det_done[d]).collect();
    let tracks: Vec<usize> = (0..m).filter(|&t| !track_done[t]).collect();
    if !dets.is_empty() && !tracks.is_empty() {
        let mut cost = cosine_distance(
            &sub_rows(input.embeddings, &dets),
            &sub_rows(input.track_features, &tracks),
        )?;
        for (i, &d) in dets.iter().enumerate() {
            for (j, &t) in tracks.iter().enumerate() {
                if !input.gate[(d, t)] {
                    cost[(i, j)] = 1.0;
                }
            }
        }
        for (i, j) in solve_assignment(&cost, th.tau_cos).matches {
            det_done[dets[i]] = true;
            track_done[tracks[j]] = true;
            matches.push(Match {
                det: dets[i],
                track: tracks[j],
                stage: Stage::Cosine,
                distance: cost[(i, j)],
            });
        }
    }

    // Stage 2b: IoU on what is still unmatched.
    let dets: Vec<usize> = (0..n).filter(|&d| !det_done[d]).collect();
    let tracks: Vec<usize> = (0..m)
        .filter(|&t| !track_done[t] && input.iou_eligible[t])
        .collect();
    if !dets.is_empty() && !tracks.is_empty() {
        let db: Vec<BBox> = dets.iter().map(|&d| input.boxes[d]).collect();
        let tb: Vec<BBox> = tracks.iter().map(|&t| input.track_boxes[t]).collect();
        let cost = iou_distance(&db, &tb);
        for (i, j) in solve_assignment(&cost, th.tau_iou).matches {
            det_done[dets[i]] = true;
            track_done[tracks[j]] = true;
            matches.push(Match {
                det: dets[i],
                track: tracks[j],
                stage: Stage::Iou,
                distance: cost[(i, j)],
            });
        }
    }

    matches.sort_by_key(|mt| mt.det);
    let unmatched_dets: Vec<usize> = (0..n).filter(|&d| !det_done[d]).collect();
    let spawn = unmatched_dets
        .iter()
        .copied()
        .filter(|&d| input.boxes[d].confidence >= th.tau_new)
        .collect();
    Ok(AssociationResult {
        matches,
        unmatched_dets,
        unmatched_tracks: (0..m).filter(|&t| !track_done[t]).collect(),
        spawn,
    })
}
