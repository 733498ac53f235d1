//! CLEAR-style MOTA/IDSW and global-matching IDF1.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::association::{hungarian, solve_assignment};
use crate::io::MotRow;
use crate::motion::iou;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub mota: f64,
    pub idf1: f64,
    pub fp: usize,
    pub fn_: usize,
    pub idsw: usize,
    pub gt_count: usize,
    /// Frame-level true positives.
    pub matches: usize,
}

fn by_frame(rows: &[MotRow]) -> BTreeMap<u32, Vec<&MotRow>> {
    let mut out: BTreeMap<u32, Vec<&MotRow>> = BTreeMap::new();
    for r in rows {
        out.entry(r.frame).or_default().push(r);
    }
    out
}

fn iou_rows(a: &MotRow, b: &MotRow) -> f64 {
    iou(&a.bbox(), &b.bbox())
}

/// Per-frame IoU matching with continuity, plus IDF1.
///
/// A GT id keeps its previous predicted id whenever that pair still clears
/// `iou_thresh`; the rest of the frame is solved by Hungarian assignment on
/// `1 − IoU`. A switch is counted whenever a GT id is matched to a different
/// predicted id than at its last match.
pub fn clear_metrics(results: &[MotRow], gt: &[MotRow], iou_thresh: f64) -> MetricsReport {
    let res = by_frame(results);
    let truth = by_frame(gt);
    let frames: BTreeSet<u32> = res.keys().chain(truth.keys()).copied().collect();
    let empty = Vec::new();

    let mut last_map: HashMap<i64, i64> = HashMap::new();
    let (mut fp, mut fn_, mut idsw, mut tp) = (0usize, 0usize, 0usize, 0usize);
    for f in frames {
        let g = truth.get(&f).unwrap_or(&empty);
        let p = res.get(&f).unwrap_or(&empty);
        let mut g_used = vec![false; g.len()];
        let mut p_used = vec![false; p.len()];
        let mut pairs: Vec<(usize, usize)> = Vec::new();

        for (gi, gr) in g.iter().enumerate() {
            let Some(&pid) = last_map.get(&gr.id) else { continue };
            if let Some(pi) = p.iter().position(|pr| pr.id == pid) {
                if !p_used[pi] && iou_rows(gr, p[pi]) >= iou_thresh {
                    g_used[gi] = true;
                    p_used[pi] = true;
                    pairs.push((gi, pi));
                }
            }
        }

        let g_rest: Vec<usize> = (0..g.len()).filter(|&i| !g_used[i]).collect();
        let p_rest: Vec<usize> = (0..p.len()).filter(|&i| !p_used[i]).collect();
        if !g_rest.is_empty() && !p_rest.is_empty() {
            let cost = DMatrix::from_fn(g_rest.len(), p_rest.len(), |i, j| {
                let v = iou_rows(g[g_rest[i]], p[p_rest[j]]);
                if v >= iou_thresh {
                    1.0 - v
                } else {
                    f64::INFINITY
                }
            });
            let finite_max = cost.iter().copied().filter(|c| c.is_finite()).fold(0.0, f64::max);
            let cost = cost.map(|c| if c.is_finite() { c } else { finite_max + 1.0 });
            for (i, j) in solve_assignment(&cost, finite_max).matches {
                pairs.push((g_rest[i], p_rest[j]));
            }
        }

        for &(gi, pi) in &pairs {
            let (gid, pid) = (g[gi].id, p[pi].id);
            if let Some(prev) = last_map.insert(gid, pid) {
                if prev != pid {
                    idsw += 1;
                }
            }
        }
        tp += pairs.len();
        fp += p.len() - pairs.len();
        fn_ += g.len() - pairs.len();
    }

    let gt_count = gt.len();
    let mota = if gt_count == 0 {
        if fp == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - (fp + fn_ + idsw) as f64 / gt_count as f64
    };
    MetricsReport {
        mota,
        idf1: idf1(results, gt, iou_thresh),
        fp,
        fn_,
        idsw,
        gt_count,
        matches: tp,
    }
}

/// Identity F1 under the best one-to-one GT/prediction identity matching.
///
/// Two empty inputs score 1.0.
pub fn idf1(results: &[MotRow], gt: &[MotRow], iou_thresh: f64) -> f64 {
    if results.is_empty() && gt.is_empty() {
        return 1.0;
    }
    if results.is_empty() || gt.is_empty() {
        return 0.0;
    }
    let gids: Vec<i64> = gt.iter().map(|r| r.id).collect::<BTreeSet<_>>().into_iter().collect();
    let pids: Vec<i64> = results.iter().map(|r| r.id).collect::<BTreeSet<_>>().into_iter().collect();
    let gix: HashMap<i64, usize> = gids.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    let pix: HashMap<i64, usize> = pids.iter().enumerate().map(|(i, &p)| (p, i)).collect();

    let mut overlap = DMatrix::<f64>::zeros(gids.len(), pids.len());
    let res = by_frame(results);
    for (f, g) in by_frame(gt) {
        let Some(p) = res.get(&f) else { continue };
        for gr in &g {
            for pr in p {
                if iou_rows(gr, pr) >= iou_thresh {
                    overlap[(gix[&gr.id], pix[&pr.id])] += 1.0;
                }
            }
        }
    }
    let idtp: f64 = hungarian(&(-&overlap))
        .into_iter()
        .map(|(i, j)| overlap[(i, j)])
        .sum();
    let idfp = results.len() as f64 - idtp;
    let idfn = gt.len() as f64 - idtp;
    2.0 * idtp / (2.0 * idtp + idfp + idfn)
}

impl MetricsReport {
    pub fn table(&self) -> String {
        let cells = [
            ("MOTA", format!("{:.4}", self.mota)),
            ("IDF1", format!("{:.4}", self.idf1)),
            ("FP", self.fp.to_string()),
            ("FN", self.fn_.to_string()),
            ("IDSW", self.idsw.to_string()),
            ("GT", self.gt_count.to_string()),
        ];
        let mut head = String::new();
        let mut body = String::new();
        for (name, value) in &cells {
            let w = name.len().max(value.len());
            let _ = write!(head, "{name:>w$}  ");
            let _ = write!(body, "{value:>w$}  ");
        }
        format!("{}\n{}\n", head.trim_end(), body.trim_end())
    }

    pub fn key_values(&self) -> String {
        format!(
            "mota = {}\nidf1 = {}\nfp = {}\nfn = {}\nidsw = {}\ngt_count = {}\n",
            self.mota, self.idf1, self.fp, self.fn_, self.idsw, self.gt_count
        )
    }
}
