//! Pairwise correlations between observations or fragments.
//!
//! The combined matrix is `W = (W_a + W_m) ⊙ D`:
//!
//! * `W_a` appearance, `(t_a - d) / t_a` for embedding distance `d`;
//! * `W_m` motion, `alpha (t_m - e_m)` for the forward-backward error of a
//!   constant-velocity extrapolation, or forbidden when the required speed
//!   exceeds the speed limit;
//! * `D` time decay, `exp(-beta dt)`.
//!
//! Forbidden pairs are carried in a mask rather than as `-inf`; every solver
//! treats them as hard cannot-link constraints.

use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::ScenarioConfig;
use crate::error::{invalid, Error, Result};
use crate::model::{Detection, EmbeddingSet, Trajectory};

/// Symmetric `n x n` correlation matrix with a forbidden-pair mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    n: usize,
    values: Vec<f64>,
    forbidden: Vec<bool>,
}

impl CorrelationMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, values: vec![0.0; n * n], forbidden: vec![false; n * n] }
    }

    pub fn filled(n: usize, v: f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in i + 1..n {
                m.set(i, j, v);
            }
        }
        m
    }

    /// Builds from the strict upper triangle; `None` entries are forbidden.
    pub fn from_upper(n: usize, upper: impl IntoIterator<Item = Option<f64>>) -> Result<Self> {
        let mut m = Self::zeros(n);
        let mut it = upper.into_iter();
        for i in 0..n {
            for j in i + 1..n {
                match it.next() {
                    Some(Some(v)) => m.set(i, j, v),
                    Some(None) => m.forbid(i, j),
                    None => return Err(invalid("too few upper-triangle entries")),
                }
            }
        }
        if it.next().is_some() {
            return Err(invalid("too many upper-triangle entries"));
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.n + j] = v;
        self.values[j * self.n + i] = v;
    }

    pub fn is_forbidden(&self, i: usize, j: usize) -> bool {
        self.forbidden[i * self.n + j]
    }

    pub fn forbid(&mut self, i: usize, j: usize) {
        self.forbidden[i * self.n + j] = true;
        self.forbidden[j * self.n + i] = true;
        self.values[i * self.n + j] = 0.0;
        self.values[j * self.n + i] = 0.0;
    }

    /// `Some(w)` for a scored pair, `None` when forbidden.
    pub fn entry(&self, i: usize, j: usize) -> Option<f64> {
        (!self.is_forbidden(i, j)).then(|| self.get(i, j))
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut m = self.clone();
        m.values.iter_mut().for_each(|v| *v *= c);
        m
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| self.get(i, j) == self.get(j, i) && self.is_forbidden(i, j) == self.is_forbidden(j, i)))
    }

    /// Text dump: one row per line, `F` for forbidden, `-` on the diagonal.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for i in 0..self.n {
            let cells: Vec<String> = (0..self.n)
                .map(|j| {
                    if i == j {
                        "-".to_string()
                    } else if self.is_forbidden(i, j) {
                        "F".to_string()
                    } else {
                        self.get(i, j).to_string()
                    }
                })
                .collect();
            writeln!(s, "{}", cells.join(" ")).unwrap();
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionParams {
    /// Error threshold in meters separating positive from negative evidence.
    pub t_m: f64,
    pub alpha: f64,
    /// Meters per second.
    pub speed_limit: f64,
    /// Decay rate per second.
    pub beta: f64,
}

impl MotionParams {
    pub fn new(t_m: f64, alpha: f64, speed_limit: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta >= 0.0 && t_m > 0.0 && speed_limit > 0.0) {
            return Err(invalid("need alpha > 0, beta >= 0, t_m > 0, speed_limit > 0"));
        }
        Ok(Self { t_m, alpha, speed_limit, beta })
    }

    pub fn from_config(c: &ScenarioConfig) -> Self {
        Self { t_m: c.t_m, alpha: c.alpha, speed_limit: c.speed_limit, beta: c.beta }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AppearanceCalibration {
    pub mu_p: f64,
    pub mu_n: f64,
    pub t_a: f64,
}

impl AppearanceCalibration {
    pub fn from_means(mu_p: f64, mu_n: f64) -> Result<Self> {
        if !(mu_p < mu_n) {
            return Err(Error::Inseparable { mu_p, mu_n });
        }
        let t_a = 0.5 * (mu_p + mu_n);
        if !(t_a > 0.0) {
            return Err(invalid("appearance threshold must be positive"));
        }
        Ok(Self { mu_p, mu_n, t_a })
    }

    /// Calibration known only through its threshold.
    pub fn from_threshold(t_a: f64) -> Result<Self> {
        Self::from_means(0.0, 2.0 * t_a)
    }
}

fn pair_from_linear(k: usize, n: usize) -> (usize, usize) {
    // row i starts at offset i*(2n - i - 1)/2
    let offset = |i: usize| i * (2 * n - i - 1) / 2;
    let (mut lo, mut hi) = (0usize, n - 1);
    while lo + 1 < hi {
        let mid = (lo + hi) / 2;
        if offset(mid) <= k {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo, lo + 1 + (k - offset(lo)))
}

/// Means of co-identical and non-co-identical pair distances, over all pairs
/// or over `max_pairs` pairs sampled uniformly without replacement.
pub fn calibrate_appearance(embeddings: &EmbeddingSet, max_pairs: usize, seed: u64) -> Result<AppearanceCalibration> {
    let labels = embeddings.labels().ok_or_else(|| invalid("calibration needs labeled embeddings"))?;
    let n = embeddings.len();
    let total = n * n.saturating_sub(1) / 2;
    let pairs: Vec<(usize, usize)> = if total <= max_pairs {
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ks = index::sample(&mut rng, total, max_pairs).into_vec();
        ks.sort_unstable();
        ks.into_iter().map(|k| pair_from_linear(k, n)).collect()
    };
    let (mut sp, mut np, mut sn, mut nn) = (0.0, 0usize, 0.0, 0usize);
    for (i, j) in pairs {
        let d = embeddings.distance(i, j);
        if labels[i] == labels[j] {
            sp += d;
            np += 1;
        } else {
            sn += d;
            nn += 1;
        }
    }
    if np == 0 || nn == 0 {
        return Err(invalid("calibration needs at least one positive and one negative pair"));
    }
    AppearanceCalibration::from_means(sp / np as f64, sn / nn as f64)
}

/// `(t_a - d) / t_a`.
pub fn appearance_correlation(d: f64, calib: &AppearanceCalibration) -> f64 {
    (calib.t_a - d) / calib.t_a
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MotionEvidence {
    /// Forward plus backward extrapolation error, meters.
    Error(f64),
    Impossible,
}

/// Least-squares line `p(t) = p0 + v t` through `(t, p)` samples.
struct LineFit {
    t0: f64,
    p0: [f64; 2],
    v: [f64; 2],
}

impl LineFit {
    fn fit(points: &[&Detection], fps: f64) -> Self {
        let n = points.len() as f64;
        let ts: Vec<f64> = points.iter().map(|d| d.frame as f64 / fps).collect();
        let t_mean = ts.iter().sum::<f64>() / n;
        let mut p_mean = [0.0; 2];
        for d in points {
            p_mean[0] += d.world[0] / n;
            p_mean[1] += d.world[1] / n;
        }
        let stt: f64 = ts.iter().map(|t| (t - t_mean).powi(2)).sum();
        let mut v = [0.0; 2];
        if stt > 0.0 {
            for axis in 0..2 {
                let stp: f64 = ts.iter().zip(points).map(|(t, d)| (t - t_mean) * (d.world[axis] - p_mean[axis])).sum();
                v[axis] = stp / stt;
            }
        }
        Self { t0: t_mean, p0: p_mean, v }
    }

    fn at(&self, t: f64) -> [f64; 2] {
        [self.p0[0] + self.v[0] * (t - self.t0), self.p0[1] + self.v[1] * (t - self.t0)]
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn required_speed(a: &Detection, b: &Detection, fps: f64) -> f64 {
    let dt = b.frame.abs_diff(a.frame) as f64 / fps;
    let dx = a.world_distance(b);
    if dt == 0.0 {
        if dx == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        dx / dt
    }
}

/// Forward-backward error between two time-disjoint fragments (each sorted
/// by frame). Velocities are least-squares fits over the last (resp. first)
/// `min(len, fps)` points; a single point has zero velocity.
pub fn motion_error(earlier: &[Detection], later: &[Detection], fps: u32, speed_limit: f64) -> Result<MotionEvidence> {
    let (Some(e_last), Some(l_first)) = (earlier.last(), later.first()) else {
        return Err(invalid("motion_error needs nonempty fragments"));
    };
    if e_last.frame >= l_first.frame {
        return Err(invalid("fragments overlap in time"));
    }
    let fps_f = fps as f64;
    if required_speed(e_last, l_first, fps_f) > speed_limit {
        return Ok(MotionEvidence::Impossible);
    }
    let w = fps as usize;
    let tail: Vec<&Detection> = earlier[earlier.len().saturating_sub(w)..].iter().collect();
    let head: Vec<&Detection> = later[..later.len().min(w)].iter().collect();
    let fe = LineFit::fit(&tail, fps_f);
    let fl = LineFit::fit(&head, fps_f);
    let t_end = e_last.frame as f64 / fps_f;
    let t_start = l_first.frame as f64 / fps_f;
    let e_f = dist2(fe.at(t_start), l_first.world);
    let e_b = dist2(fl.at(t_end), e_last.world);
    Ok(MotionEvidence::Error(e_f + e_b))
}

/// `alpha (t_m - e_m)`, or `None` (forbidden) for an impossible pair.
pub fn motion_correlation(evidence: MotionEvidence, params: &MotionParams) -> Option<f64> {
    match evidence {
        MotionEvidence::Error(e) => Some(params.alpha * (params.t_m - e)),
        MotionEvidence::Impossible => None,
    }
}

pub fn decay_factor(dt_seconds: f64, beta: f64) -> f64 {
    (-beta * dt_seconds).exp()
}

/// Elementwise `(W_a + W_m) ⊙ D`. A pair forbidden in `W_a` or `W_m` stays
/// forbidden whatever `D` holds.
pub fn combine(wa: &CorrelationMatrix, wm: &CorrelationMatrix, d: &CorrelationMatrix) -> Result<CorrelationMatrix> {
    let n = wa.n();
    if wm.n() != n || d.n() != n {
        return Err(invalid(format!("shape mismatch: {} / {} / {}", n, wm.n(), d.n())));
    }
    let mut out = CorrelationMatrix::zeros(n);
    for i in 0..n {
        for j in i + 1..n {
            if wa.is_forbidden(i, j) || wm.is_forbidden(i, j) {
                out.forbid(i, j);
            } else {
                out.set(i, j, (wa.get(i, j) + wm.get(i, j)) * d.get(i, j));
            }
        }
    }
    Ok(out)
}

/// A time-ordered group of detections treated as one clustering node.
#[derive(Debug, Clone, PartialEq)]
pub struct Fragment {
    detections: Vec<Detection>,
}

impl Fragment {
    /// Sorts by `(frame, camera)`.
    pub fn new(mut detections: Vec<Detection>) -> Result<Self> {
        if detections.is_empty() {
            return Err(invalid("empty fragment"));
        }
        detections.sort_by_key(|d| (d.frame, d.camera));
        Ok(Self { detections })
    }

    pub fn single(d: Detection) -> Self {
        Self { detections: vec![d] }
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    pub fn into_detections(self) -> Vec<Detection> {
        self.detections
    }

    pub fn first_frame(&self) -> u64 {
        self.detections[0].frame
    }

    pub fn last_frame(&self) -> u64 {
        self.detections[self.detections.len() - 1].frame
    }

    /// Up to `k` uniformly spaced detections that carry an embedding row.
    fn representatives(&self, k: usize) -> Vec<usize> {
        let rows: Vec<usize> = self.detections.iter().filter_map(|d| d.embedding).collect();
        let n = rows.len();
        if n <= k {
            return rows;
        }
        (0..k).map(|i| rows[(i * (n - 1) + (k - 1) / 2) / (k - 1)]).collect()
    }
}

impl From<&Trajectory> for Fragment {
    fn from(t: &Trajectory) -> Self {
        Self { detections: t.detections.clone() }
    }
}

/// Number of representatives per fragment for appearance aggregation.
pub const REPRESENTATIVES: usize = 8;

/// Mean pairwise embedding distance between fragment representatives.
pub fn fragment_distance(a: &Fragment, b: &Fragment, embeddings: &EmbeddingSet) -> Option<f64> {
    let ra = a.representatives(REPRESENTATIVES);
    let rb = b.representatives(REPRESENTATIVES);
    if ra.is_empty() || rb.is_empty() {
        return None;
    }
    let sum: f64 = ra.iter().flat_map(|&i| rb.iter().map(move |&j| (i, j))).map(|(i, j)| embeddings.distance(i, j)).sum();
    Some(sum / (ra.len() * rb.len()) as f64)
}

/// Per-pair motion evidence and time gap (seconds) between two fragments.
fn pair_motion(a: &Fragment, b: &Fragment, fps: u32, params: &MotionParams) -> Result<(Option<f64>, f64)> {
    let (e, l) = if (a.first_frame(), a.last_frame()) <= (b.first_frame(), b.last_frame()) { (a, b) } else { (b, a) };
    if e.last_frame() < l.first_frame() {
        let dt = (l.first_frame() - e.last_frame()) as f64 / fps as f64;
        let ev = motion_error(e.detections(), l.detections(), fps, params.speed_limit)?;
        let wm = match motion_correlation(ev, params) {
            None => None,
            Some(_) if e.detections.len() < 2 || l.detections.len() < 2 => Some(0.0),
            some => some,
        };
        return Ok((wm, dt));
    }
    // Overlapping spans: walk the merged sequence and check each hand-over
    // between the two fragments.
    let (mut i, mut j) = (0, 0);
    let (da, db) = (&a.detections, &b.detections);
    let mut prev: Option<(bool, &Detection)> = None;
    while i < da.len() || j < db.len() {
        let take_a = j >= db.len() || (i < da.len() && (da[i].frame, da[i].camera) <= (db[j].frame, db[j].camera));
        let cur = if take_a {
            i += 1;
            (true, &da[i - 1])
        } else {
            j += 1;
            (false, &db[j - 1])
        };
        if let Some((src, p)) = prev {
            if src != cur.0 && (p.frame == cur.1.frame || required_speed(p, cur.1, fps as f64) > params.speed_limit) {
                return Ok((None, 0.0));
            }
        }
        prev = Some(cur);
    }
    Ok((Some(0.0), 0.0))
}

/// The three component matrices over a set of fragments.
#[derive(Debug, Clone)]
pub struct CorrelationParts {
    pub appearance: CorrelationMatrix,
    pub motion: CorrelationMatrix,
    pub decay: CorrelationMatrix,
}

impl CorrelationParts {
    pub fn combined(&self) -> Result<CorrelationMatrix> {
        combine(&self.appearance, &self.motion, &self.decay)
    }
}

pub fn fragment_parts(
    fragments: &[Fragment],
    embeddings: &EmbeddingSet,
    calib: &AppearanceCalibration,
    params: &MotionParams,
    fps: u32,
) -> Result<CorrelationParts> {
    let n = fragments.len();
    let rows: Vec<Vec<(f64, Option<f64>, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| {
                    let (a, b) = (&fragments[i], &fragments[j]);
                    let wa = fragment_distance(a, b, embeddings).map_or(0.0, |d| appearance_correlation(d, calib));
                    let (wm, dt) = pair_motion(a, b, fps, params)?;
                    Ok((wa, wm, decay_factor(dt, params.beta)))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut parts = CorrelationParts {
        appearance: CorrelationMatrix::zeros(n),
        motion: CorrelationMatrix::zeros(n),
        decay: CorrelationMatrix::zeros(n),
    };
    for (i, row) in rows.into_iter().enumerate() {
        for (off, (wa, wm, d)) in row.into_iter().enumerate() {
            let j = i + 1 + off;
            parts.appearance.set(i, j, wa);
            match wm {
                Some(v) => parts.motion.set(i, j, v),
                None => parts.motion.forbid(i, j),
            }
            parts.decay.set(i, j, d);
        }
    }
    Ok(parts)
}

/// Combined correlation matrix over `fragments`.
pub fn fragment_correlations(
    fragments: &[Fragment],
    embeddings: &EmbeddingSet,
    calib: &AppearanceCalibration,
    params: &MotionParams,
    fps: u32,
) -> Result<CorrelationMatrix> {
    fragment_parts(fragments, embeddings, calib, params, fps)?.combined()
}

/// One `(t_m, alpha, beta)` candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub t_m: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Labeled scenario used to score motion parameters.
#[derive(Debug, Clone, Copy)]
pub struct ValidationScenario<'a> {
    pub detections: &'a [Detection],
    pub embeddings: &'a EmbeddingSet,
    pub truth: &'a [Trajectory],
}

/// Grid point whose full-pipeline multi-camera IDF1 on `scenario` is
/// highest; ties go to the earliest point. Returns the IDF1 of every point.
pub fn calibrate_motion(
    grid: &[GridPoint],
    scenario: &ValidationScenario<'_>,
    base: &ScenarioConfig,
    seed: u64,
) -> Result<(MotionParams, Vec<f64>)> {
    if grid.is_empty() {
        return Err(invalid("empty calibration grid"));
    }
    let scores: Vec<f64> = grid
        .par_iter()
        .map(|g| {
            let cfg = ScenarioConfig { t_m: g.t_m, alpha: g.alpha, beta: g.beta, ..base.clone() };
            cfg.validate()?;
            let out = crate::tracker::run_pipeline(scenario.detections, scenario.embeddings, &cfg, seed)?;
            Ok(crate::evalkit::id_measures(scenario.truth, &out, crate::evalkit::DEFAULT_IOU)?.idf1)
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let g = grid[best];
    Ok((MotionParams::new(g.t_m, g.alpha, base.speed_limit, g.beta)?, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BBox;
    use proptest::prelude::*;
    use rand::Rng;

    fn at(frame: u64, x: f64, y: f64) -> Detection {
        Detection::new(0, frame, BBox::new(0.0, 0.0, 1.0, 1.0), [x, y])
    }

    fn line(frames: std::ops::Range<u64>, p0: [f64; 2], v: [f64; 2], fps: f64) -> Vec<Detection> {
        frames
            .map(|f| {
                let t = f as f64 / fps;
                at(f, p0[0] + v[0] * t, p0[1] + v[1] * t)
            })
            .collect()
    }

    #[test]
    fn degenerate_clusters_calibrate() {
        let data = vec![0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 2.0, 0.0];
        let set = EmbeddingSet::new(2, data).unwrap().with_labels(vec![0, 0, 1, 1]).unwrap();
        let c = calibrate_appearance(&set, 1000, 0).unwrap();
        assert_eq!((c.mu_p, c.mu_n, c.t_a), (0.0, 2.0, 1.0));
        let c = AppearanceCalibration::from_means(0.4, 1.2).unwrap();
        assert!((c.t_a - 0.8).abs() < 1e-15);
        assert!(matches!(AppearanceCalibration::from_means(1.2, 0.4), Err(Error::Inseparable { .. })));
    }

    #[test]
    fn sampled_equals_exhaustive_when_budget_covers_all_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 50;
        let labels: Vec<u32> = (0..n).map(|i| (i % 5) as u32).collect();
        let data: Vec<f32> =
            (0..n * 4).map(|i| (i % 4) as f32 * 0.1 * (labels[i / 4] as f32 + 1.0) + rng.random_range(-0.05..0.05)).collect();
        let set = EmbeddingSet::new(4, data).unwrap().with_labels(labels.clone()).unwrap();
        // exhaustive oracle
        let (mut sp, mut np, mut sn, mut nn) = (0.0, 0, 0.0, 0);
        for i in 0..n {
            for j in i + 1..n {
                let d = set.distance(i, j);
                if labels[i] == labels[j] {
                    sp += d;
                    np += 1
                } else {
                    sn += d;
                    nn += 1
                }
            }
        }
        let c = calibrate_appearance(&set, n * (n - 1) / 2, 9).unwrap();
        assert_eq!(c.mu_p, sp / np as f64);
        assert_eq!(c.mu_n, sn / nn as f64);
        // a smaller budget samples and still lands near the exhaustive values
        let s = calibrate_appearance(&set, 600, 9).unwrap();
        assert!((s.t_a - c.t_a).abs() / c.t_a < 0.1);
    }

    #[test]
    fn linear_index_mapping() {
        let n = 7;
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                assert_eq!(pair_from_linear(k, n), (i, j));
                k += 1;
            }
        }
    }

    #[test]
    fn appearance_endpoints() {
        let c = AppearanceCalibration::from_threshold(0.8).unwrap();
        assert_eq!(appearance_correlation(0.0, &c), 1.0);
        assert_eq!(appearance_correlation(0.8, &c), 0.0);
        assert_eq!(appearance_correlation(1.6, &c), -1.0);
    }

    #[test]
    fn constant_velocity_has_zero_error() {
        let fps = 60.0;
        let a = line(0..40, [1.0, 2.0], [1.2, -0.4], fps);
        let b = line(70..130, [1.0, 2.0], [1.2, -0.4], fps);
        match motion_error(&a, &b, 60, 7.0).unwrap() {
            MotionEvidence::Error(e) => assert!(e < 1e-9, "{e}"),
            MotionEvidence::Impossible => panic!(),
        }
    }

    #[test]
    fn teleport_is_impossible() {
        let a = vec![at(0, 0.0, 0.0), at(30, 0.0, 0.0)];
        let b = vec![at(90, 5.0, 0.0), at(120, 5.0, 0.0)];
        assert_eq!(motion_error(&a, &b, 60, 3.0).unwrap(), MotionEvidence::Impossible);
        assert!(motion_error(&b, &a, 60, 3.0).is_err());
    }

    #[test]
    fn closed_form_extrapolation() {
        // Two different lines; the fits are exact so the error has a closed form.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fps = 60u32;
        for _ in 0..50 {
            let p1 = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let v1 = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            let p2 = [p1[0] + rng.random_range(-1.0..1.0), p1[1] + rng.random_range(-1.0..1.0)];
            let v2 = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            let len_a = rng.random_range(2..150u64);
            let gap = rng.random_range(1..300u64);
            let len_b = rng.random_range(2..150u64);
            let a = line(0..len_a, p1, v1, 60.0);
            let b = line(len_a - 1 + gap..len_a - 1 + gap + len_b, p2, v2, 60.0);
            let t_end = (len_a - 1) as f64 / 60.0;
            let t_start = (len_a - 1 + gap) as f64 / 60.0;
            let l1 = |t: f64| [p1[0] + v1[0] * t, p1[1] + v1[1] * t];
            let l2 = |t: f64| [p2[0] + v2[0] * t, p2[1] + v2[1] * t];
            let e_f = ((l1(t_start)[0] - l2(t_start)[0]).powi(2) + (l1(t_start)[1] - l2(t_start)[1]).powi(2)).sqrt();
            let e_b = ((l1(t_end)[0] - l2(t_end)[0]).powi(2) + (l1(t_end)[1] - l2(t_end)[1]).powi(2)).sqrt();
            match motion_error(&a, &b, fps, 1e9).unwrap() {
                MotionEvidence::Error(e) => assert!((e - (e_f + e_b)).abs() < 1e-9, "{e} vs {}", e_f + e_b),
                MotionEvidence::Impossible => panic!(),
            }
        }
    }

    #[test]
    fn motion_correlation_examples() {
        let p = MotionParams::new(2.0, 0.5, 7.0, 0.1).unwrap();
        assert_eq!(motion_correlation(MotionEvidence::Error(2.0), &p), Some(0.0));
        assert_eq!(motion_correlation(MotionEvidence::Error(0.0), &p), Some(1.0));
        assert_eq!(motion_correlation(MotionEvidence::Impossible, &p), None);
    }

    #[test]
    fn decay_examples() {
        assert_eq!(decay_factor(0.0, 0.3), 1.0);
        assert!((decay_factor(10.0, 0.1) - 0.367879).abs() < 1e-6);
        assert_eq!(decay_factor(1e6, 0.0), 1.0);
    }

    #[test]
    fn combine_examples() {
        let mut wa = CorrelationMatrix::filled(3, 0.6);
        let mut wm = CorrelationMatrix::filled(3, 0.4);
        let d = CorrelationMatrix::filled(3, 0.5);
        let w = combine(&wa, &wm, &d).unwrap();
        assert!((w.get(0, 1) - 0.5).abs() < 1e-15);
        assert!(w.is_symmetric());
        let one = CorrelationMatrix::filled(3, 1.0);
        assert_eq!(combine(&wa, &wm, &one).unwrap().get(1, 2), 1.0);

        wm.forbid(0, 2);
        let zero = CorrelationMatrix::filled(3, 0.0);
        assert!(combine(&wa, &wm, &zero).unwrap().is_forbidden(2, 0));
        wa.forbid(1, 2);
        assert!(combine(&wa, &wm, &one).unwrap().is_forbidden(1, 2));
        assert!(combine(&wa, &wm, &CorrelationMatrix::zeros(2)).is_err());
    }

    #[test]
    fn representatives_are_spread() {
        let dets: Vec<Detection> = (0..20).map(|f| at(f, 0.0, 0.0).with_embedding(f as usize)).collect();
        let f = Fragment::new(dets).unwrap();
        let r = f.representatives(8);
        assert_eq!(r.len(), 8);
        assert_eq!((r[0], r[7]), (0, 19));
        assert!(r.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn overlapping_fragments_with_shared_frame_are_forbidden() {
        let a = Fragment::new(vec![at(0, 0.0, 0.0), at(2, 0.0, 0.0)]).unwrap();
        let b = Fragment::new(vec![at(1, 0.01, 0.0), at(3, 0.01, 0.0)]).unwrap();
        let c = Fragment::new(vec![at(2, 0.0, 0.0)]).unwrap();
        let p = MotionParams::new(2.0, 0.5, 7.0, 0.1).unwrap();
        assert_eq!(pair_motion(&a, &b, 60, &p).unwrap(), (Some(0.0), 0.0));
        assert_eq!(pair_motion(&a, &c, 60, &p).unwrap().0, None);
    }

    proptest! {
        #[test]
        fn appearance_monotone(d1 in 0.0f64..10.0, d2 in 0.0f64..10.0, t in 0.01f64..5.0) {
            let c = AppearanceCalibration::from_threshold(t).unwrap();
            let (w1, w2) = (appearance_correlation(d1, &c), appearance_correlation(d2, &c));
            prop_assert!(w1 <= 1.0);
            if d1 < d2 { prop_assert!(w1 > w2); }
            prop_assert_eq!(w1 > 0.0, t > d1);
        }

        #[test]
        fn decay_in_range_and_monotone(dt in 0.0f64..1e3, ddt in 0.0f64..10.0, beta in 0.0f64..2.0, db in 0.0f64..1.0) {
            let d = decay_factor(dt, beta);
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!(decay_factor(dt + ddt, beta) <= d);
            prop_assert!(decay_factor(dt, beta + db) <= d);
        }

        #[test]
        fn fragment_matrix_symmetric_and_finite(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 6;
            let dets: Vec<Detection> = (0..n)
                .map(|i| at(rng.random_range(0..120), rng.random_range(0.0..20.0), rng.random_range(0.0..5.0)).with_embedding(i))
                .collect();
            let data: Vec<f32> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let set = EmbeddingSet::new(3, data).unwrap();
            let frags: Vec<Fragment> = dets.into_iter().map(Fragment::single).collect();
            let calib = AppearanceCalibration::from_threshold(0.8).unwrap();
            let p = MotionParams::new(2.0, 0.5, 7.0, 0.1).unwrap();
            let parts = fragment_parts(&frags, &set, &calib, &p, 60).unwrap();
            let w = parts.combined().unwrap();
            prop_assert!(w.is_symmetric());
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        prop_assert!((0.0..=1.0).contains(&parts.decay.get(i, j)));
                        prop_assert_eq!(w.is_forbidden(i, j), parts.motion.is_forbidden(i, j));
                        prop_assert!(w.get(i, j).is_finite());
                    }
                }
            }
        }
    }
}
