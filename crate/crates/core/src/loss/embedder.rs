use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    batch_loss_and_gradient, build_identity_pools, sample_pk_indices, DistanceKind, GradientMode, IdentityPools, Matrix, WeightScheme,
};
use crate::error::{invalid, Error, Result};
use crate::model::EmbeddingSet;

/// Constant rate, then geometric decay to `final_rate` between
/// `decay_start` and `decay_end`, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub final_rate: f64,
    pub decay_start: usize,
    pub decay_end: usize,
}

impl LrSchedule {
    pub fn constant(rate: f64) -> Self {
        Self { initial: rate, final_rate: rate, decay_start: usize::MAX, decay_end: usize::MAX }
    }

    /// The 3e-4 / 15000 / 1e-7 @ 25000 shape, compressed to `iterations`.
    pub fn scaled(initial: f64, iterations: usize) -> Self {
        Self { initial, final_rate: initial * (1e-7 / 3e-4), decay_start: iterations * 3 / 5, decay_end: iterations }
    }

    pub fn rate(&self, iteration: usize) -> f64 {
        if iteration < self.decay_start || self.initial == 0.0 {
            return self.initial;
        }
        if iteration >= self.decay_end {
            return self.final_rate;
        }
        let t = (iteration - self.decay_start) as f64 / (self.decay_end - self.decay_start) as f64;
        self.initial * (self.final_rate / self.initial).powf(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub scheme: WeightScheme,
    pub kind: DistanceKind,
    pub margin: f64,
    pub p: usize,
    pub k: usize,
    /// Hard pool size; `None` disables hard-identity mining.
    pub h: Option<usize>,
    /// Iteration at which the pools are built from the current features.
    pub pool_iteration: usize,
    pub schedule: LrSchedule,
    pub embed_dim: usize,
    pub gradient: GradientMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheme: WeightScheme::Adaptive,
            kind: DistanceKind::Euclidean,
            margin: 1.0,
            p: 18,
            k: 4,
            h: None,
            pool_iteration: 0,
            schedule: LrSchedule::constant(0.01),
            embed_dim: 8,
            gradient: GradientMode::Full,
            seed: 0,
        }
    }
}

/// Linear map `input_dim -> embed_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEmbedder {
    weights: Matrix,
}

impl ToyEmbedder {
    pub fn random(input_dim: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        if embed_dim < 2 || input_dim == 0 {
            return Err(invalid("toy embedder needs embed_dim >= 2 and input_dim >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt()).unwrap();
        let data = (0..embed_dim * input_dim).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self { weights: Matrix::from_vec(embed_dim, input_dim, data)? })
    }

    pub fn from_weights(weights: Matrix) -> Result<Self> {
        if weights.rows() < 2 {
            return Err(invalid("toy embedder needs embed_dim >= 2"));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.weights.rows()
    }

    fn embed_row(&self, x: &[f32]) -> Vec<f64> {
        (0..self.embed_dim()).map(|o| self.weights.row(o).iter().zip(x).map(|(w, &v)| w * v as f64).sum()).collect()
    }

    /// Embeds every row, keeping labels.
    pub fn embed(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        if set.dim() != self.input_dim() {
            return Err(invalid(format!("input dim {} != embedder input dim {}", set.dim(), self.input_dim())));
        }
        let data = (0..set.len()).flat_map(|r| self.embed_row(set.row(r))).map(|v| v as f32).collect();
        let out = EmbeddingSet::new(self.embed_dim(), data)?;
        match set.labels() {
            Some(l) => out.with_labels(l.to_vec()),
            None => Ok(out),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub embedder: ToyEmbedder,
    /// Mean batch loss before each update.
    pub trace: Vec<f64>,
    pub pools: Option<IdentityPools>,
}

/// Plain gradient descent on the mean PK-batch triplet loss. Iteration `i`
/// anchors its batch on the `(i mod n)`-th identity in ascending label
/// order.
pub fn train_toy_embedder(data: &EmbeddingSet, config: &TrainConfig, iterations: usize) -> Result<TrainOutcome> {
    if iterations == 0 {
        return Err(invalid("iterations must be at least 1"));
    }
    let by_label = data.by_label()?;
    let identities: Vec<u32> = by_label.keys().copied().collect();
    let mut embedder = ToyEmbedder::random(data.dim(), config.embed_dim, config.seed)?;
    let mut pools = None;
    let mut trace = Vec::with_capacity(iterations);

    for it in 0..iterations {
        if let Some(h) = config.h.filter(|_| it == config.pool_iteration) {
            pools = Some(build_identity_pools(&embedder.embed(data)?, h)?);
        }
        let anchor = identities[it % identities.len()];
        let batch_seed = config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(it as u64);
        let sample = sample_pk_indices(&by_label, anchor, config.p, config.k, pools.as_ref(), batch_seed)?;

        let emb_rows: Vec<f64> = sample.rows.iter().flat_map(|&r| embedder.embed_row(data.row(r))).collect();
        let emb = Matrix::from_vec(sample.rows.len(), embedder.embed_dim(), emb_rows)?;
        let (loss, grad) = batch_loss_and_gradient(&emb, &sample.labels, config.scheme, config.kind, config.margin, config.gradient)
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { iteration: it },
                other => other,
            })?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: it });
        }
        trace.push(loss);

        let lr = config.schedule.rate(it);
        if lr != 0.0 {
            // dL/dW = sum_i g_i x_i^T
            let w = &mut embedder.weights;
            for (bi, &r) in sample.rows.iter().enumerate() {
                let x = data.row(r);
                for o in 0..w.rows() {
                    let g = grad.get(bi, o);
                    if g == 0.0 {
                        continue;
                    }
                    for (wv, &xv) in w.row_mut(o).iter_mut().zip(x) {
                        *wv -= lr * g * xv as f64;
                    }
                }
            }
            if w.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { iteration: it });
            }
        }
    }
    Ok(TrainOutcome { embedder, trace, pools })
}

/// Writes `iteration loss` lines.
pub fn format_trace(trace: &[f64]) -> String {
    use std::fmt::Write as _;
    let mut s = String::from("# iteration loss\n");
    for (i, l) in trace.iter().enumerate() {
        writeln!(s, "{i} {l}").unwrap();
    }
    s
}
