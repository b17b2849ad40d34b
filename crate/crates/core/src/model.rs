//! Domain records shared across the pipeline and their on-disk formats.
//!
//! Three formats are supported:
//!
//! * detections: UTF-8 text, one `camera_id,frame,x,y,w,h,wx,wy` line per
//!   observation;
//! * trajectories / ground truth: UTF-8 text, one
//!   `camera_id,identity,frame,x,y,w,h,wx,wy` line per detection;
//! * embeddings: binary, `EMB1` magic, `count` and `dim` as little-endian
//!   `u32`, then `count * dim` little-endian `f32` values, row-major.
//!
//! Text files ignore empty lines and lines starting with `#`. Reals are
//! written with the shortest representation that parses back to the same
//! `f64`, so write/read is exact.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{invalid, io_err, Error, Result};

pub const DETECTIONS_HEADER: &str = "# mtmct detections v1";
pub const TRAJECTORIES_HEADER: &str = "# mtmct trajectories v1";
pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";

/// Axis-aligned image box in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Self {
        Self { x, y, width, height }
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x + self.width).min(other.x + other.width) - self.x.max(other.x);
        let iy = (self.y + self.height).min(other.y + other.height) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (self.area() + other.area() - inter)
    }

    pub fn lerp(&self, other: &BBox, t: f64) -> BBox {
        BBox {
            x: self.x + (other.x - self.x) * t,
            y: self.y + (other.y - self.y) * t,
            width: self.width + (other.width - self.width) * t,
            height: self.height + (other.height - self.height) * t,
        }
    }
}

/// One observation of a person in one camera at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub camera: u32,
    /// Frame index on the global (synchronized) clock.
    pub frame: u64,
    pub bbox: BBox,
    /// Ground-plane position in meters.
    pub world: [f64; 2],
    pub embedding: Option<usize>,
    /// Set for detections synthesized by interpolation.
    pub interpolated: bool,
}

impl Detection {
    pub fn new(camera: u32, frame: u64, bbox: BBox, world: [f64; 2]) -> Self {
        Self { camera, frame, bbox, world, embedding: None, interpolated: false }
    }

    pub fn with_embedding(mut self, row: usize) -> Self {
        self.embedding = Some(row);
        self
    }

    pub fn world_distance(&self, other: &Detection) -> f64 {
        let dx = self.world[0] - other.world[0];
        let dy = self.world[1] - other.world[1];
        dx.hypot(dy)
    }
}

/// Row-major matrix of appearance embeddings, optionally labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    data: Vec<f32>,
    labels: Option<Vec<u32>>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("embedding dim must be positive"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(invalid(format!("embedding data length {} is not a multiple of dim {dim}", data.len())));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: pos / dim });
        }
        Ok(Self { dim, data, labels: None })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(invalid("embedding rows differ in length"));
        }
        Self::new(dim.max(1), rows.concat())
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(invalid(format!("{} labels for {} embedding rows", labels.len(), self.len())));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// Euclidean distance between two rows, accumulated in `f64`.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        euclidean(self.row(i), self.row(j))
    }

    /// Row indices grouped by label, in ascending label order.
    pub fn by_label(&self) -> Result<BTreeMap<u32, Vec<usize>>> {
        let labels = self.labels.as_ref().ok_or_else(|| invalid("embedding set has no labels"))?;
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        Ok(groups)
    }

    /// Subset of rows, keeping labels when present.
    pub fn select(&self, rows: &[usize]) -> EmbeddingSet {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        EmbeddingSet { dim: self.dim, data, labels: self.labels.as_ref().map(|l| rows.iter().map(|&r| l[r]).collect()) }
    }
}

pub(crate) fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Time-ordered detections sharing one identity label.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub identity: u64,
    pub detections: Vec<Detection>,
    pub cameras: BTreeSet<u32>,
}

impl Trajectory {
    /// Sorts detections by `(frame, camera)` and checks the trajectory
    /// invariants: nonempty, strictly increasing frames within each camera.
    pub fn new(identity: u64, mut detections: Vec<Detection>) -> Result<Self> {
        if detections.is_empty() {
            return Err(invalid(format!("trajectory {identity} is empty")));
        }
        detections.sort_by_key(|d| (d.frame, d.camera));
        for w in detections.windows(2) {
            if w[0].frame == w[1].frame && w[0].camera == w[1].camera {
                return Err(invalid(format!("trajectory {identity} has two detections at camera {}, frame {}", w[0].camera, w[0].frame)));
            }
        }
        let cameras = detections.iter().map(|d| d.camera).collect();
        Ok(Self { identity, detections, cameras })
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn first_frame(&self) -> u64 {
        self.detections[0].frame
    }

    pub fn last_frame(&self) -> u64 {
        self.detections[self.detections.len() - 1].frame
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Yields `(1-based line number, trimmed content)` for data lines.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn fields<const N: usize>(line_no: usize, line: &str) -> Result<[&str; N]> {
    let parts: Vec<&str> = line.split(',').map(str::trim).collect();
    parts
        .try_into()
        .map_err(|p: Vec<&str>| Error::Parse { line: line_no, msg: format!("expected {N} comma-separated fields, found {}", p.len()) })
}

fn num<T: std::str::FromStr>(line: usize, field: &str, name: &str) -> Result<T> {
    field.parse().map_err(|_| Error::Parse { line, msg: format!("bad {name} {field:?}") })
}

fn real(line: usize, field: &str, name: &str) -> Result<f64> {
    let v: f64 = num(line, field, name)?;
    if !v.is_finite() {
        return Err(Error::Parse { line, msg: format!("non-finite {name}") });
    }
    Ok(v)
}

fn checked_box(line: usize, f: [&str; 4]) -> Result<BBox> {
    let b = BBox::new(real(line, f[0], "x")?, real(line, f[1], "y")?, real(line, f[2], "width")?, real(line, f[3], "height")?);
    if b.width <= 0.0 || b.height <= 0.0 {
        return Err(Error::NonPositiveBox { line });
    }
    Ok(b)
}

/// Parses detection text. Each detection's `embedding` is its 0-based
/// data-line index in file order; the result is sorted by `(camera, frame)`.
pub fn parse_detections_str(text: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (idx, (line, content)) in data_lines(text).enumerate() {
        let f: [&str; 8] = fields(line, content)?;
        let bbox = checked_box(line, [f[2], f[3], f[4], f[5]])?;
        let det = Detection::new(
            num(line, f[0], "camera_id")?,
            num(line, f[1], "frame")?,
            bbox,
            [real(line, f[6], "wx")?, real(line, f[7], "wy")?],
        )
        .with_embedding(idx);
        out.push(det);
    }
    out.sort_by_key(|d| (d.camera, d.frame, d.embedding));
    Ok(out)
}

/// Reads a detection file. `fps` is the frame rate the frame column is
/// expressed in; it is validated but frames are stored as-is.
pub fn parse_detections(path: &Path, fps: u32) -> Result<Vec<Detection>> {
    if fps == 0 {
        return Err(invalid("fps must be positive"));
    }
    parse_detections_str(&read_text(path)?)
}

/// Serializes detections in the given order; embedding rows are not written.
pub fn format_detections(detections: &[Detection]) -> String {
    let mut s = String::new();
    writeln!(s, "{DETECTIONS_HEADER}").unwrap();
    writeln!(s, "# camera_id,frame,x,y,w,h,wx,wy").unwrap();
    for d in detections {
        let b = &d.bbox;
        writeln!(s, "{},{},{},{},{},{},{},{}", d.camera, d.frame, b.x, b.y, b.width, b.height, d.world[0], d.world[1]).unwrap();
    }
    s
}

pub fn write_detections(detections: &[Detection], path: &Path) -> Result<()> {
    fs::write(path, format_detections(detections)).map_err(io_err(path))
}

pub fn format_trajectories(trajectories: &[Trajectory]) -> String {
    let mut rows: Vec<(u32, u64, u64, &Detection)> =
        trajectories.iter().flat_map(|t| t.detections.iter().map(move |d| (d.camera, d.frame, t.identity, d))).collect();
    rows.sort_by_key(|r| (r.0, r.1, r.2));
    let mut s = String::new();
    writeln!(s, "{TRAJECTORIES_HEADER}").unwrap();
    writeln!(s, "# camera_id,identity,frame,x,y,w,h,wx,wy").unwrap();
    for (camera, frame, id, d) in rows {
        let b = &d.bbox;
        writeln!(s, "{camera},{id},{frame},{},{},{},{},{},{}", b.x, b.y, b.width, b.height, d.world[0], d.world[1]).unwrap();
    }
    s
}

/// Writes one line per detection, sorted by `(camera_id, frame, identity)`.
pub fn write_trajectories(trajectories: &[Trajectory], path: &Path) -> Result<()> {
    fs::write(path, format_trajectories(trajectories)).map_err(io_err(path))
}

pub fn parse_ground_truth_str(text: &str) -> Result<Vec<Trajectory>> {
    let mut groups: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for (line, content) in data_lines(text) {
        let f: [&str; 9] = fields(line, content)?;
        let bbox = checked_box(line, [f[3], f[4], f[5], f[6]])?;
        let det = Detection::new(
            num(line, f[0], "camera_id")?,
            num(line, f[2], "frame")?,
            bbox,
            [real(line, f[7], "wx")?, real(line, f[8], "wy")?],
        );
        groups.entry(num(line, f[1], "identity")?).or_default().push(det);
    }
    groups.into_iter().map(|(id, dets)| Trajectory::new(id, dets)).collect()
}

/// Reads a trajectory or ground-truth file, one trajectory per identity in
/// ascending identity order.
pub fn parse_ground_truth(path: &Path) -> Result<Vec<Trajectory>> {
    parse_ground_truth_str(&read_text(path)?)
}

pub fn encode_embeddings(set: &EmbeddingSet) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + set.data.len() * 4);
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&(set.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(set.dim as u32).to_le_bytes());
    for v in &set.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingSet> {
    if bytes.len() < 4 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(Error::TruncatedPayload { expected: 12, found: bytes.len() });
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(invalid("embedding dim must be positive"));
    }
    let expected = 12 + count * dim * 4;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload { expected, found: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(invalid(format!("{} trailing bytes after payload", bytes.len() - expected)));
    }
    let data: Vec<f32> = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    EmbeddingSet::new(dim, data)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    decode_embeddings(&fs::read(path).map_err(io_err(path))?)
}

pub fn write_embeddings(set: &EmbeddingSet, path: &Path) -> Result<()> {
    fs::write(path, encode_embeddings(set)).map_err(io_err(path))
}
