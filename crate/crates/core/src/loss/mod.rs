//! Generalized triplet loss over PK batches.
//!
//! For an anchor `a` with positives `P(a)` and negatives `N(a)` the loss is
//!
//! ```text
//! [ m + sum_p w_p d(a, p) - sum_n w_n d(a, n) ]_+
//! ```
//!
//! with the weights chosen by a [`WeightScheme`]: uniform, batch-hard
//! (one-hot on the farthest positive and the nearest negative) or adaptive
//! (softmax of positive distances, softmin of negative distances).
//!
//! Gradients are analytic. For the adaptive scheme the weights are
//! differentiated through by default; [`GradientMode::DetachWeights`]
//! treats them as constants instead.

mod embedder;
mod sampling;

pub use embedder::{format_trace, train_toy_embedder, LrSchedule, ToyEmbedder, TrainConfig, TrainOutcome};
pub use sampling::{build_identity_pools, sample_pk_batch, sample_pk_indices, IdentityPools, PkSample, Pool};

use crate::error::{invalid, Error, Result};

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn first_non_finite_row(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite()).map(|p| p / self.cols.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistanceKind {
    Euclidean,
    SquaredEuclidean,
}

impl DistanceKind {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        match self {
            DistanceKind::Euclidean => sq.sqrt(),
            DistanceKind::SquaredEuclidean => sq,
        }
    }

    /// Adds `coeff * d(a, b)/da` to `ga` and its negation to `gb`.
    /// The euclidean derivative at `a == b` is taken as zero.
    fn accumulate_grad(self, a: &[f64], b: &[f64], dist: f64, coeff: f64, ga: &mut [f64], gb: &mut [f64]) {
        let scale = match self {
            DistanceKind::Euclidean if dist > 0.0 => coeff / dist,
            DistanceKind::Euclidean => return,
            DistanceKind::SquaredEuclidean => 2.0 * coeff,
        };
        for (((x, y), ga), gb) in a.iter().zip(b).zip(ga.iter_mut()).zip(gb.iter_mut()) {
            let g = scale * (x - y);
            *ga += g;
            *gb -= g;
        }
    }
}

impl std::str::FromStr for DistanceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "squared_euclidean" | "sqeuclidean" => Ok(Self::SquaredEuclidean),
            _ => Err(invalid(format!("unknown distance kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightScheme {
    Uniform,
    BatchHard,
    Adaptive,
}

impl WeightScheme {
    pub const ALL: [WeightScheme; 3] = [WeightScheme::Uniform, WeightScheme::BatchHard, WeightScheme::Adaptive];

    pub fn name(self) -> &'static str {
        match self {
            WeightScheme::Uniform => "uniform",
            WeightScheme::BatchHard => "batch_hard",
            WeightScheme::Adaptive => "adaptive",
        }
    }
}

impl std::str::FromStr for WeightScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "batch_hard" | "batch-hard" => Ok(Self::BatchHard),
            "adaptive" => Ok(Self::Adaptive),
            _ => Err(invalid(format!("unknown weight scheme {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientMode {
    /// Differentiate through the adaptive weights.
    #[default]
    Full,
    /// Treat every weight as a constant.
    DetachWeights,
}

/// Full `n x n` distance matrix between the rows of `embeddings`.
pub fn pairwise_distances(embeddings: &Matrix, kind: DistanceKind) -> Result<Matrix> {
    if embeddings.rows() == 0 {
        return Err(invalid("pairwise_distances needs at least one row"));
    }
    if let Some(row) = embeddings.first_non_finite_row() {
        return Err(Error::NonFinite { row });
    }
    let n = embeddings.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let d = kind.eval(embeddings.row(i), embeddings.row(j));
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    Ok(out)
}

/// A P x K block of labeled embeddings with a designated anchor row.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    embeddings: Matrix,
    labels: Vec<u32>,
    anchor: usize,
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

impl TripletBatch {
    /// Checks that `labels` holds exactly `K` copies of each of `P` labels.
    pub fn new(embeddings: Matrix, labels: Vec<u32>, anchor: usize) -> Result<Self> {
        if labels.len() != embeddings.rows() {
            return Err(invalid("one label per embedding row is required"));
        }
        if anchor >= labels.len() {
            return Err(invalid("anchor index out of range"));
        }
        let mut counts = std::collections::BTreeMap::new();
        for &l in &labels {
            *counts.entry(l).or_insert(0usize) += 1;
        }
        let k = counts[&labels[anchor]];
        if counts.values().any(|&c| c != k) {
            return Err(invalid("every identity in a PK batch needs the same sample count"));
        }
        let positives = (0..labels.len()).filter(|&i| i != anchor && labels[i] == labels[anchor]).collect();
        let negatives = (0..labels.len()).filter(|&i| labels[i] != labels[anchor]).collect();
        Ok(Self { embeddings, labels, anchor, positives, negatives })
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut Matrix {
        &mut self.embeddings
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    pub fn with_anchor(&self, anchor: usize) -> Result<Self> {
        Self::new(self.embeddings.clone(), self.labels.clone(), anchor)
    }

    /// Rows co-identical with the anchor, ascending, anchor excluded.
    pub fn positives(&self) -> &[usize] {
        &self.positives
    }

    /// Rows not co-identical with the anchor, ascending.
    pub fn negatives(&self) -> &[usize] {
        &self.negatives
    }

    pub fn identity_count(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }

    fn anchor_distances(&self, kind: DistanceKind) -> Vec<f64> {
        let a = self.embeddings.row(self.anchor);
        (0..self.embeddings.rows()).map(|i| kind.eval(a, self.embeddings.row(i))).collect()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    Positive,
    Negative,
}

/// Weights over one side (positives or negatives) given the distances of
/// that side's members to the anchor.
fn side_weights(dist: &[f64], scheme: WeightScheme, side: Side) -> Vec<f64> {
    let n = dist.len();
    match scheme {
        WeightScheme::Uniform => vec![1.0 / n as f64; n],
        WeightScheme::BatchHard => {
            // lowest index wins ties
            let mut best = 0;
            for i in 1..n {
                let better = match side {
                    Side::Positive => dist[i] > dist[best],
                    Side::Negative => dist[i] < dist[best],
                };
                if better {
                    best = i;
                }
            }
            let mut w = vec![0.0; n];
            w[best] = 1.0;
            w
        }
        WeightScheme::Adaptive => {
            let sign = if side == Side::Positive { 1.0 } else { -1.0 };
            let shift = dist.iter().map(|d| sign * d).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = dist.iter().map(|d| (sign * d - shift).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        }
    }
}

/// Weights `(w_p, w_n)` over `batch.positives()` and `batch.negatives()`
/// (in that order), given per-row distances to the anchor.
pub fn triplet_weights(distances_to_anchor: &[f64], batch: &TripletBatch, scheme: WeightScheme) -> Result<(Vec<f64>, Vec<f64>)> {
    if distances_to_anchor.len() != batch.labels.len() {
        return Err(invalid("one distance per batch row is required"));
    }
    if batch.positives.is_empty() || batch.negatives.is_empty() {
        return Err(invalid("anchor needs a nonempty positive and negative set"));
    }
    if distances_to_anchor.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite { row: batch.anchor });
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| distances_to_anchor[i]).collect::<Vec<_>>();
    Ok((side_weights(&pick(&batch.positives), scheme, Side::Positive), side_weights(&pick(&batch.negatives), scheme, Side::Negative)))
}

/// Per-anchor loss and `dL/dd_j` for every positive and negative distance.
struct AnchorTerms {
    loss: f64,
    pos_coeff: Vec<f64>,
    neg_coeff: Vec<f64>,
}

fn anchor_terms(pos_d: &[f64], neg_d: &[f64], scheme: WeightScheme, margin: f64, mode: GradientMode) -> AnchorTerms {
    let wp = side_weights(pos_d, scheme, Side::Positive);
    let wn = side_weights(neg_d, scheme, Side::Negative);
    let sp: f64 = wp.iter().zip(pos_d).map(|(w, d)| w * d).sum();
    let sn: f64 = wn.iter().zip(neg_d).map(|(w, d)| w * d).sum();
    let z = margin + sp - sn;
    if z <= 0.0 {
        return AnchorTerms { loss: 0.0, pos_coeff: vec![0.0; pos_d.len()], neg_coeff: vec![0.0; neg_d.len()] };
    }
    let through = scheme == WeightScheme::Adaptive && mode == GradientMode::Full;
    // d/dd_j of sum softmax(d)*d is w_j (1 + d_j - S); of sum softmin(d)*d is w_j (1 - d_j + S).
    let pos_coeff = wp.iter().zip(pos_d).map(|(&w, &d)| if through { w * (1.0 + d - sp) } else { w }).collect();
    let neg_coeff = wn.iter().zip(neg_d).map(|(&w, &d)| -(if through { w * (1.0 - d + sn) } else { w })).collect();
    AnchorTerms { loss: z, pos_coeff, neg_coeff }
}

fn validate(batch: &TripletBatch, margin: f64) -> Result<()> {
    if !(margin >= 0.0) {
        return Err(invalid("margin must be non-negative"));
    }
    if let Some(row) = batch.embeddings.first_non_finite_row() {
        return Err(Error::NonFinite { row });
    }
    if batch.positives.is_empty() || batch.negatives.is_empty() {
        return Err(invalid("anchor needs a nonempty positive and negative set"));
    }
    Ok(())
}

fn terms_for(batch: &TripletBatch, scheme: WeightScheme, kind: DistanceKind, margin: f64, mode: GradientMode) -> (Vec<f64>, AnchorTerms) {
    let d = batch.anchor_distances(kind);
    let pos: Vec<f64> = batch.positives.iter().map(|&i| d[i]).collect();
    let neg: Vec<f64> = batch.negatives.iter().map(|&i| d[i]).collect();
    let terms = anchor_terms(&pos, &neg, scheme, margin, mode);
    (d, terms)
}

/// Loss of the batch's anchor.
pub fn triplet_loss(batch: &TripletBatch, scheme: WeightScheme, kind: DistanceKind, margin: f64) -> Result<f64> {
    validate(batch, margin)?;
    Ok(terms_for(batch, scheme, kind, margin, GradientMode::Full).1.loss)
}

/// Gradient of [`triplet_loss`] with respect to every embedding row.
pub fn triplet_loss_gradient(batch: &TripletBatch, scheme: WeightScheme, kind: DistanceKind, margin: f64) -> Result<Matrix> {
    triplet_loss_gradient_with(batch, scheme, kind, margin, GradientMode::Full)
}

pub fn triplet_loss_gradient_with(
    batch: &TripletBatch,
    scheme: WeightScheme,
    kind: DistanceKind,
    margin: f64,
    mode: GradientMode,
) -> Result<Matrix> {
    validate(batch, margin)?;
    let (d, terms) = terms_for(batch, scheme, kind, margin, mode);
    let mut grad = Matrix::zeros(batch.embeddings.rows(), batch.embeddings.cols());
    let a = batch.anchor;
    let members = batch.positives.iter().zip(&terms.pos_coeff).chain(batch.negatives.iter().zip(&terms.neg_coeff));
    for (&j, &c) in members {
        if c == 0.0 {
            continue;
        }
        accumulate_pair(&batch.embeddings, &mut grad, kind, a, j, d[j], c);
    }
    Ok(grad)
}

fn accumulate_pair(emb: &Matrix, grad: &mut Matrix, kind: DistanceKind, a: usize, j: usize, dist: f64, coeff: f64) {
    let cols = emb.cols();
    let mut ga = vec![0.0; cols];
    let mut gj = vec![0.0; cols];
    kind.accumulate_grad(emb.row(a), emb.row(j), dist, coeff, &mut ga, &mut gj);
    for (g, v) in grad.row_mut(a).iter_mut().zip(ga) {
        *g += v;
    }
    for (g, v) in grad.row_mut(j).iter_mut().zip(gj) {
        *g += v;
    }
}

/// Mean loss over every row taken as anchor, and its gradient. This is the
/// objective the toy embedder descends on.
pub fn batch_loss_and_gradient(
    embeddings: &Matrix,
    labels: &[u32],
    scheme: WeightScheme,
    kind: DistanceKind,
    margin: f64,
    mode: GradientMode,
) -> Result<(f64, Matrix)> {
    let n = embeddings.rows();
    if labels.len() != n || n == 0 {
        return Err(invalid("one label per embedding row is required"));
    }
    let dist = pairwise_distances(embeddings, kind)?;
    let mut grad = Matrix::zeros(n, embeddings.cols());
    let mut total = 0.0;
    for a in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&i| i != a && labels[i] == labels[a]).collect();
        let neg: Vec<usize> = (0..n).filter(|&i| labels[i] != labels[a]).collect();
        if pos.is_empty() || neg.is_empty() {
            return Err(invalid("anchor needs a nonempty positive and negative set"));
        }
        let pd: Vec<f64> = pos.iter().map(|&i| dist.get(a, i)).collect();
        let nd: Vec<f64> = neg.iter().map(|&i| dist.get(a, i)).collect();
        let t = anchor_terms(&pd, &nd, scheme, margin, mode);
        total += t.loss;
        for (&j, &c) in pos.iter().zip(&t.pos_coeff).chain(neg.iter().zip(&t.neg_coeff)) {
            if c != 0.0 {
                accumulate_pair(embeddings, &mut grad, kind, a, j, dist.get(a, j), c / n as f64);
            }
        }
    }
    Ok((total / n as f64, grad))
}
