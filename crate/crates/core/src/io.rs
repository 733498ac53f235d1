//! File formats: MOT detection/result/ground-truth text, the binary embedding
//! sidecar, per-frame camera-motion transforms, and gap interpolation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::motion::{AffineTransform, BBox};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"FACTEMB1";
pub const EMBEDDING_VERSION: u32 = 1;
const EMBEDDING_HEADER_LEN: usize = 8 + 4 + 4 + 8;

/// Default largest gap (in frames) filled by [`interpolate`].
pub const DEFAULT_MAX_GAP: u32 = 20;

/// One MOTChallenge text row. `id` is −1 in detection files.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotRow {
    pub frame: u32,
    pub id: i64,
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
    pub conf: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl MotRow {
    pub fn new(frame: u32, id: i64, b: &BBox) -> Self {
        Self {
            frame,
            id,
            left: b.left,
            top: b.top,
            width: b.width,
            height: b.height,
            conf: b.confidence,
            x: -1.0,
            y: -1.0,
            z: -1.0,
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox {
            left: self.left,
            top: self.top,
            width: self.width,
            height: self.height,
            confidence: self.conf,
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses comma-separated MOT rows. Accepts 7 to 10 fields per row; missing
/// trailing world coordinates default to −1.
pub fn parse_mot_text(text: &str, path: &Path) -> Result<Vec<MotRow>> {
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(7..=10).contains(&fields.len()) {
            return Err(err(format!("expected 7 to 10 fields, found {}", fields.len())));
        }
        let mut vals = [-1.0f64; 10];
        for (k, f) in fields.iter().enumerate() {
            vals[k] = f
                .parse::<f64>()
                .map_err(|_| err(format!("field {} is not a number: {f:?}", k + 1)))?;
        }
        if vals[0] < 1.0 || vals[0].fract() != 0.0 || vals[0] > u32::MAX as f64 {
            return Err(err(format!("frame must be a positive integer, got {}", fields[0])));
        }
        if vals[1].fract() != 0.0 {
            return Err(err(format!("id must be an integer, got {}", fields[1])));
        }
        rows.push(MotRow {
            frame: vals[0] as u32,
            id: vals[1] as i64,
            left: vals[2],
            top: vals[3],
            width: vals[4],
            height: vals[5],
            conf: vals[6],
            x: vals[7],
            y: vals[8],
            z: vals[9],
        });
    }
    Ok(rows)
}

/// Detections grouped by frame, file order kept within each frame. Box errors
/// report the row's position among non-empty rows.
pub fn group_detections(rows: &[MotRow], path: &Path) -> Result<BTreeMap<u32, Vec<BBox>>> {
    let mut frames: BTreeMap<u32, Vec<BBox>> = BTreeMap::new();
    for (k, r) in rows.iter().enumerate() {
        let b = r.bbox();
        b.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            message: e.to_string(),
        })?;
        frames.entry(r.frame).or_default().push(b);
    }
    Ok(frames)
}

pub fn parse_detections(path: impl AsRef<Path>) -> Result<BTreeMap<u32, Vec<BBox>>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let rows = parse_mot_text(&text, path)?;
    group_detections(&rows, path)
}

pub fn parse_gt(path: impl AsRef<Path>) -> Result<Vec<MotRow>> {
    let path = path.as_ref();
    let rows = parse_mot_text(&read_text(path)?, path)?;
    for (k, r) in rows.iter().enumerate() {
        if r.id <= 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: k + 1,
                message: format!("ground-truth id must be positive, got {}", r.id),
            });
        }
    }
    Ok(rows)
}

/// Formats result rows sorted by `(frame, id)`. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn format_results(rows: &[MotRow]) -> Result<String> {
    if let Some(bad) = rows.iter().find(|r| r.id <= 0) {
        return Err(Error::invalid(format!(
            "result row at frame {} has non-positive id {}",
            bad.frame, bad.id
        )));
    }
    let mut sorted = rows.to_vec();
    sorted.sort_by_key(|r| (r.frame, r.id));
    let mut out = String::new();
    for r in &sorted {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},-1,-1,-1",
            r.frame, r.id, r.left, r.top, r.width, r.height, r.conf
        );
    }
    Ok(out)
}

pub fn write_results(path: impl AsRef<Path>, rows: &[MotRow]) -> Result<()> {
    let path = path.as_ref();
    let text = format_results(rows)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes detection rows (`id = −1`) in the given per-frame order.
pub fn write_detections(path: impl AsRef<Path>, frames: &BTreeMap<u32, Vec<BBox>>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (frame, boxes) in frames {
        for b in boxes {
            let _ = writeln!(
                out,
                "{},-1,{},{},{},{},{},-1,-1,-1",
                frame, b.left, b.top, b.width, b.height, b.confidence
            );
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Raw contents of an embedding sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub d_reid: u32,
    /// `(frame, det_index, vector)`, sorted by `(frame, det_index)`.
    pub records: Vec<(u32, u32, Vec<f32>)>,
}

impl EmbeddingFile {
    /// Builds a file from per-frame matrices (`N × d_reid`). Values are
    /// narrowed to `f32`.
    pub fn from_frames(d_reid: usize, frames: &BTreeMap<u32, DMatrix<f64>>) -> Result<Self> {
        let mut records = Vec::new();
        for (&frame, m) in frames {
            if m.nrows() > 0 && m.ncols() != d_reid {
                return Err(Error::invalid(format!(
                    "frame {frame}: embedding width {} != {d_reid}",
                    m.ncols()
                )));
            }
            for (i, row) in m.row_iter().enumerate() {
                records.push((frame, i as u32, row.iter().map(|&v| v as f32).collect()));
            }
        }
        Ok(Self {
            d_reid: d_reid as u32,
            records,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.d_reid as usize;
        let mut out = Vec::with_capacity(EMBEDDING_HEADER_LEN + self.records.len() * (8 + 4 * d));
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&self.d_reid.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for (frame, det, v) in &self.records {
            out.extend_from_slice(&frame.to_le_bytes());
            out.extend_from_slice(&det.to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |context: String| Error::Truncated {
            path: path.to_path_buf(),
            context,
        };
        if bytes.len() < 8 {
            return Err(truncated("header".into()));
        }
        if &bytes[..8] != EMBEDDING_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "FACTEMB1",
            });
        }
        if bytes.len() < EMBEDDING_HEADER_LEN {
            return Err(truncated("header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != EMBEDDING_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.to_path_buf(),
                version,
            });
        }
        let d_reid = u32_at(12);
        let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let rec_len = 8 + 4 * d_reid as usize;
        let expected_len = (count as u128) * (rec_len as u128) + EMBEDDING_HEADER_LEN as u128;
        if (bytes.len() as u128) < expected_len {
            return Err(truncated(format!(
                "header declares {count} records of {rec_len} bytes, file has {} payload bytes",
                bytes.len() - EMBEDDING_HEADER_LEN
            )));
        }
        if (bytes.len() as u128) > expected_len {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                message: "trailing bytes after the declared records".into(),
            });
        }
        let mut records = Vec::with_capacity(count as usize);
        let mut off = EMBEDDING_HEADER_LEN;
        for _ in 0..count {
            let frame = u32_at(off);
            let det = u32_at(off + 4);
            let v = bytes[off + 8..off + rec_len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push((frame, det, v));
            off += rec_len;
        }
        Ok(Self { d_reid, records })
    }

    /// Groups records into per-frame `N × d_reid` matrices, checking that each
    /// frame holds exactly `expected[frame]` dense, ordered detections.
    pub fn into_frames(
        self,
        expected: &BTreeMap<u32, usize>,
        path: &Path,
    ) -> Result<BTreeMap<u32, DMatrix<f64>>> {
        let d = self.d_reid as usize;
        let mut grouped: BTreeMap<u32, Vec<Vec<f32>>> = BTreeMap::new();
        let mut prev: Option<(u32, u32)> = None;
        for (frame, det, v) in self.records {
            let dense_next = match prev {
                Some((pf, pd)) if pf == frame => det == pd + 1,
                Some((pf, _)) if frame < pf => false,
                _ => det == 0,
            };
            if !dense_next {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    message: format!(
                        "record (frame {frame}, det {det}) breaks the sorted dense (frame, det_index) order"
                    ),
                });
            }
            prev = Some((frame, det));
            grouped.entry(frame).or_default().push(v);
        }
        for (&frame, v) in &grouped {
            let want = expected.get(&frame).copied().unwrap_or(0);
            if v.len() != want {
                return Err(Error::CountMismatch {
                    frame,
                    expected: want,
                    found: v.len(),
                });
            }
        }
        let mut out = BTreeMap::new();
        for (&frame, &want) in expected {
            let rows = grouped.remove(&frame).unwrap_or_default();
            if rows.len() != want {
                return Err(Error::CountMismatch {
                    frame,
                    expected: want,
                    found: rows.len(),
                });
            }
            let m = DMatrix::from_fn(want, d, |i, j| rows[i][j] as f64);
            out.insert(frame, m);
        }
        Ok(out)
    }
}

pub fn write_embeddings(path: impl AsRef<Path>, file: &EmbeddingFile) -> Result<()> {
    let path = path.as_ref();
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&file.to_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingFile::from_bytes(&bytes, path)
}

/// Reads the sidecar and pairs it with detection counts per frame.
pub fn read_embeddings(
    path: impl AsRef<Path>,
    expected_counts: &BTreeMap<u32, usize>,
) -> Result<(usize, BTreeMap<u32, DMatrix<f64>>)> {
    let path = path.as_ref();
    let file = read_embedding_file(path)?;
    let d = file.d_reid as usize;
    Ok((d, file.into_frames(expected_counts, path)?))
}

/// Parses `frame a11 a12 a13 a21 a22 a23` lines, frames strictly ascending.
pub fn parse_cmc_text(text: &str, path: &Path) -> Result<BTreeMap<u32, AffineTransform>> {
    let mut out = BTreeMap::new();
    let mut last: Option<u32> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", fields.len())));
        }
        let frame: u32 = fields[0]
            .parse()
            .map_err(|_| err(format!("bad frame {:?}", fields[0])))?;
        if last.is_some_and(|l| frame <= l) {
            return Err(err(format!("frame {frame} is not ascending")));
        }
        last = Some(frame);
        let mut a = [0.0f64; 6];
        for (k, f) in fields[1..].iter().enumerate() {
            a[k] = f.parse().map_err(|_| err(format!("bad coefficient {f:?}")))?;
        }
        let t = AffineTransform::new([[a[0], a[1], a[2]], [a[3], a[4], a[5]]])
            .map_err(|e| err(e.to_string()))?;
        out.insert(frame, t);
    }
    Ok(out)
}

pub fn parse_cmc(path: impl AsRef<Path>) -> Result<BTreeMap<u32, AffineTransform>> {
    let path = path.as_ref();
    parse_cmc_text(&read_text(path)?, path)
}

/// Fills per-id gaps of at most `max_gap` missing frames with linearly
/// interpolated boxes. Filled rows take the smaller endpoint confidence.
/// Output is sorted by `(frame, id)`.
pub fn interpolate(rows: &[MotRow], max_gap: u32) -> Vec<MotRow> {
    let mut by_id: BTreeMap<i64, Vec<MotRow>> = BTreeMap::new();
    for r in rows {
        by_id.entry(r.id).or_default().push(*r);
    }
    let mut out = Vec::with_capacity(rows.len());
    for (_, mut track) in by_id {
        track.sort_by_key(|r| r.frame);
        for (k, r) in track.iter().enumerate() {
            out.push(*r);
            let Some(next) = track.get(k + 1) else { continue };
            let gap = next.frame.saturating_sub(r.frame).saturating_sub(1);
            if gap == 0 || gap > max_gap {
                continue;
            }
            let span = (next.frame - r.frame) as f64;
            for f in (r.frame + 1)..next.frame {
                let t = (f - r.frame) as f64 / span;
                let lerp = |a: f64, b: f64| a + (b - a) * t;
                out.push(MotRow {
                    frame: f,
                    id: r.id,
                    left: lerp(r.left, next.left),
                    top: lerp(r.top, next.top),
                    width: lerp(r.width, next.width),
                    height: lerp(r.height, next.height),
                    conf: r.conf.min(next.conf),
                    x: -1.0,
                    y: -1.0,
                    z: -1.0,
                });
            }
        }
    }
    out.sort_by_key(|r| (r.frame, r.id));
    out
}
