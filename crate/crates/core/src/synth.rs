//! Synthetic ground truth: walkers in a corridor watched by cameras with
//! disjoint fields of view, and degraded observations of them.
//!
//! Camera `c` sees the ground-plane strip `x in [c (R + G), c (R + G) + R]`
//! of a corridor `W` meters wide, where `R` is the region length and `G`
//! the blind spot between neighbouring regions. Walkers move with
//! piecewise-constant velocity, turn around only at the corridor ends and
//! keep their velocity while crossing a blind spot.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::config::KvConfig;
use crate::correlation::CorrelationMatrix;
use crate::error::{invalid, Error, Result};
use crate::model::{BBox, Detection, EmbeddingSet, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub camera: u32,
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Region {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (self.x0..=self.x1).contains(&p[0]) && (self.y0..=self.y1).contains(&p[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub camera_count: u32,
    pub identity_count: u32,
    pub duration_s: f64,
    pub fps: u32,
    pub region_length_m: f64,
    pub gap_m: f64,
    pub corridor_width_m: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    pub lateral_speed: f64,
    pub segment_min_s: f64,
    pub segment_max_s: f64,
    pub speed_limit: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            camera_count: 4,
            identity_count: 20,
            duration_s: 60.0,
            fps: 60,
            region_length_m: 20.0,
            gap_m: 10.0,
            corridor_width_m: 10.0,
            min_speed: 0.8,
            max_speed: 2.0,
            lateral_speed: 0.2,
            segment_min_s: 3.0,
            segment_max_s: 8.0,
            speed_limit: 7.0,
            seed: 0,
        }
    }
}

macro_rules! kv_fields {
    ($kv:expr, $target:expr, $($field:ident),*) => {
        $( if let Some(v) = $kv.get(stringify!($field))? { $target.$field = v; } )*
    };
}

impl WorldSpec {
    pub const KEYS: &'static [&'static str] = &[
        "camera_count",
        "identity_count",
        "duration_s",
        "fps",
        "region_length_m",
        "gap_m",
        "corridor_width_m",
        "min_speed",
        "max_speed",
        "lateral_speed",
        "segment_min_s",
        "segment_max_s",
        "speed_limit",
        "seed",
    ];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut s = Self::default();
        kv_fields!(
            kv,
            s,
            camera_count,
            identity_count,
            duration_s,
            fps,
            region_length_m,
            gap_m,
            corridor_width_m,
            min_speed,
            max_speed,
            lateral_speed,
            segment_min_s,
            segment_max_s,
            speed_limit,
            seed
        );
        Ok(s)
    }

    pub fn corridor_length(&self) -> f64 {
        self.camera_count as f64 * (self.region_length_m + self.gap_m) - self.gap_m
    }

    pub fn regions(&self) -> Vec<Region> {
        (0..self.camera_count)
            .map(|c| {
                let x0 = c as f64 * (self.region_length_m + self.gap_m);
                Region { camera: c, x0, x1: x0 + self.region_length_m, y0: 0.0, y1: self.corridor_width_m }
            })
            .collect()
    }

    /// Shortest and longest time to walk from the edge of region `a` to the
    /// edge of region `b` without turning, in seconds.
    pub fn transit_range(&self, a: u32, b: u32) -> (f64, f64) {
        let span = a.abs_diff(b) as f64;
        let dist = span * self.gap_m + (span - 1.0).max(0.0) * self.region_length_m;
        (dist / self.max_speed, dist / self.min_speed)
    }

    pub fn frames(&self) -> u64 {
        (self.duration_s * self.fps as f64).round() as u64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InfeasibleWorld(m.to_string()));
        if self.camera_count == 0 || self.fps == 0 || !(self.duration_s > 0.0) {
            return bad("need cameras, fps and a positive duration");
        }
        if !(self.region_length_m > 0.0 && self.gap_m > 0.0 && self.corridor_width_m > 1.0) {
            return bad("regions need positive length, positive blind-spot gaps and width above 1 m");
        }
        if !(0.0 < self.min_speed && self.min_speed <= self.max_speed && self.lateral_speed >= 0.0) {
            return bad("need 0 < min_speed <= max_speed and lateral_speed >= 0");
        }
        if self.max_speed.hypot(self.lateral_speed) > self.speed_limit {
            return bad("walking speed exceeds the speed limit");
        }
        if !(0.0 < self.segment_min_s && self.segment_min_s <= self.segment_max_s) {
            return bad("need 0 < segment_min_s <= segment_max_s");
        }
        Ok(())
    }

    fn region_of(&self, p: [f64; 2], regions: &[Region]) -> Option<u32> {
        regions.iter().find(|r| r.contains(p)).map(|r| r.camera)
    }

    /// Box for a ground-plane point seen by the camera of `region`: a
    /// 1920-pixel-wide image spans the region, nearer points (larger y)
    /// sit lower and appear taller.
    pub fn project(&self, region: &Region, p: [f64; 2]) -> BBox {
        let px = 1920.0 / self.region_length_m;
        let depth = (p[1] - region.y0) / self.corridor_width_m;
        let h = 120.0 + 60.0 * depth;
        let w = 0.4 * h;
        let u = (p[0] - region.x0) * px;
        let v = 300.0 + 700.0 * depth;
        BBox::new(u - w / 2.0, v - h, w, h)
    }
}

fn walk(spec: &WorldSpec, identity: u32) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(identity as u64 + 1);
    let regions = spec.regions();
    let length = spec.corridor_length();
    let (ylo, yhi) = (0.5, spec.corridor_width_m - 0.5);
    let dt = 1.0 / spec.fps as f64;
    let mut p = [rng.random_range(0.0..=length), rng.random_range(ylo..=yhi)];
    let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let mut v = [dir * rng.random_range(spec.min_speed..=spec.max_speed), rng.random_range(-spec.lateral_speed..=spec.lateral_speed)];
    let seg = |rng: &mut ChaCha8Rng| (rng.random_range(spec.segment_min_s..=spec.segment_max_s) * spec.fps as f64) as u64;
    let mut next_change = seg(&mut rng);
    let n = spec.frames();
    let mut out = Vec::with_capacity(n as usize);
    for f in 0..n {
        out.push(p);
        if f >= next_change && spec.region_of(p, &regions).is_some() {
            v = [
                v[0].signum() * rng.random_range(spec.min_speed..=spec.max_speed),
                rng.random_range(-spec.lateral_speed..=spec.lateral_speed),
            ];
            next_change = f + seg(&mut rng);
        }
        p[0] += v[0] * dt;
        p[1] += v[1] * dt;
        if p[0] < 0.0 {
            p[0] = -p[0];
            v[0] = -v[0];
        } else if p[0] > length {
            p[0] = 2.0 * length - p[0];
            v[0] = -v[0];
        }
        if p[1] < ylo {
            p[1] = 2.0 * ylo - p[1];
            v[1] = -v[1];
        } else if p[1] > yhi {
            p[1] = 2.0 * yhi - p[1];
            v[1] = -v[1];
        }
    }
    out
}

/// Ground-truth trajectories, one per identity (ids `1..`), holding every
/// frame on which the walker stands inside some camera's region.
/// Identities never seen by any camera are omitted.
pub fn generate_world(spec: &WorldSpec) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    let regions = spec.regions();
    let out: Vec<Option<Trajectory>> = (0..spec.identity_count)
        .into_par_iter()
        .map(|id| {
            let dets: Vec<Detection> = walk(spec, id)
                .into_iter()
                .enumerate()
                .filter_map(|(f, p)| {
                    let r = regions.iter().find(|r| r.contains(p))?;
                    Some(Detection::new(r.camera, f as u64, spec.project(r, p), p))
                })
                .collect();
            (!dets.is_empty()).then(|| Trajectory::new(id as u64 + 1, dets)).transpose()
        })
        .collect::<Result<_>>()?;
    Ok(out.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub embedding_dim: usize,
    /// Per-coordinate embedding noise.
    pub sigma: f64,
    /// Fraction of embeddings drawn around another identity's mean.
    pub outlier_fraction: f64,
    pub miss_rate: f64,
    /// Probability per camera and frame that a false positive starts.
    pub false_positive_rate: f64,
    /// Pixels.
    pub box_sigma: f64,
    /// Meters.
    pub world_sigma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            embedding_dim: 128,
            sigma: 0.0,
            outlier_fraction: 0.0,
            miss_rate: 0.0,
            false_positive_rate: 0.0,
            box_sigma: 0.0,
            world_sigma: 0.0,
        }
    }
}

impl NoiseSpec {
    pub const KEYS: &'static [&'static str] =
        &["embedding_dim", "sigma", "outlier_fraction", "miss_rate", "false_positive_rate", "box_sigma", "world_sigma"];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut s = Self::default();
        kv_fields!(kv, s, embedding_dim, sigma, outlier_fraction, miss_rate, false_positive_rate, box_sigma, world_sigma);
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.outlier_fraction) && unit(self.miss_rate) && unit(self.false_positive_rate)) {
            return Err(invalid("rates must lie in [0, 1]"));
        }
        if !(self.sigma >= 0.0 && self.box_sigma >= 0.0 && self.world_sigma >= 0.0) || self.embedding_dim == 0 {
            return Err(invalid("noise scales must be non-negative and embedding_dim positive"));
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Identity means on the unit sphere.
pub fn identity_means(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| unit_vector(&mut rng, dim)).collect()
}

fn noisy(mean: &[f64], sigma: f64, rng: &mut impl Rng) -> Vec<f32> {
    if sigma == 0.0 {
        return mean.iter().map(|&m| m as f32).collect();
    }
    let n = Normal::new(0.0, sigma).unwrap();
    mean.iter().map(|&m| (m + n.sample(rng)) as f32).collect()
}

/// Observations of a world.
#[derive(Debug, Clone)]
pub struct Degraded {
    /// Sorted by `(camera, frame)`; detection `i` uses embedding row `i`.
    pub detections: Vec<Detection>,
    pub embeddings: EmbeddingSet,
    /// The input ground truth.
    pub truth: Vec<Trajectory>,
    /// Source identity of each detection, `None` for false positives.
    pub sources: Vec<Option<u64>>,
}

/// Drops, jitters and pads the true detections and samples an embedding
/// for each survivor. False positives are stationary, last at most a
/// quarter second and use a fresh random mean.
pub fn degrade(truth: &[Trajectory], world: &WorldSpec, noise: &NoiseSpec, seed: u64) -> Result<Degraded> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<u64> = truth.iter().map(|t| t.identity).collect();
    let means = identity_means(ids.len(), noise.embedding_dim, seed ^ 0x5EED);
    let box_n = Normal::new(0.0, noise.box_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let world_n = Normal::new(0.0, noise.world_sigma.max(f64::MIN_POSITIVE)).unwrap();

    let mut rows: Vec<(Detection, Vec<f32>, Option<u64>)> = Vec::new();
    for (k, t) in truth.iter().enumerate() {
        for d in &t.detections {
            if noise.miss_rate > 0.0 && rng.random_bool(noise.miss_rate) {
                continue;
            }
            let mut o = Detection::new(d.camera, d.frame, d.bbox, d.world);
            if noise.box_sigma > 0.0 {
                let b = &mut o.bbox;
                b.x += box_n.sample(&mut rng);
                b.y += box_n.sample(&mut rng);
                b.width = (b.width + box_n.sample(&mut rng)).max(1.0);
                b.height = (b.height + box_n.sample(&mut rng)).max(1.0);
            }
            if noise.world_sigma > 0.0 {
                o.world[0] += world_n.sample(&mut rng);
                o.world[1] += world_n.sample(&mut rng);
            }
            let src = if ids.len() > 1 && noise.outlier_fraction > 0.0 && rng.random_bool(noise.outlier_fraction) {
                (k + rng.random_range(1..ids.len())) % ids.len()
            } else {
                k
            };
            let e = noisy(&means[src], noise.sigma, &mut rng);
            rows.push((o, e, Some(t.identity)));
        }
    }

    if noise.false_positive_rate > 0.0 {
        let last = truth.iter().flat_map(|t| t.detections.iter().map(|d| d.frame)).max().unwrap_or(0);
        let max_len = (world.fps as u64 / 4).max(1);
        for region in world.regions() {
            for f in 0..=last {
                if !rng.random_bool(noise.false_positive_rate) {
                    continue;
                }
                let p = [rng.random_range(region.x0..=region.x1), rng.random_range(region.y0..=region.y1)];
                let len = rng.random_range(1..=max_len);
                let mean = unit_vector(&mut rng, noise.embedding_dim);
                let bbox = world.project(&region, p);
                for g in f..(f + len).min(last + 1) {
                    let e = noisy(&mean, noise.sigma, &mut rng);
                    rows.push((Detection::new(region.camera, g, bbox, p), e, None));
                }
            }
        }
    }

    // stable: ties keep generation order
    rows.sort_by_key(|r| (r.0.camera, r.0.frame));
    let mut detections = Vec::with_capacity(rows.len());
    let mut data = Vec::with_capacity(rows.len() * noise.embedding_dim);
    let mut sources = Vec::with_capacity(rows.len());
    for (i, (d, e, s)) in rows.into_iter().enumerate() {
        detections.push(d.with_embedding(i));
        data.extend(e);
        sources.push(s);
    }
    Ok(Degraded { detections, embeddings: EmbeddingSet::new(noise.embedding_dim, data)?, truth: truth.to_vec(), sources })
}

/// Labeled samples around identity means on the unit sphere. A fraction
/// `outlier_fraction` of each identity's samples is drawn around another
/// identity's mean but keeps its nominal label.
pub fn labeled_clusters(
    identities: usize,
    per_identity: usize,
    dim: usize,
    sigma: f64,
    outlier_fraction: f64,
    seed: u64,
) -> Result<EmbeddingSet> {
    if identities < 2 || per_identity == 0 {
        return Err(invalid("need at least two identities and one sample each"));
    }
    let means = identity_means(identities, dim, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let n_out = (per_identity as f64 * outlier_fraction).round() as usize;
    let mut data = Vec::with_capacity(identities * per_identity * dim);
    let mut labels = Vec::with_capacity(identities * per_identity);
    for id in 0..identities {
        let outliers = index::sample(&mut rng, per_identity, n_out.min(per_identity)).into_vec();
        for s in 0..per_identity {
            let src = if outliers.contains(&s) { (id + rng.random_range(1..identities)) % identities } else { id };
            data.extend(noisy(&means[src], sigma, &mut rng));
            labels.push(id as u32);
        }
    }
    EmbeddingSet::new(dim, data)?.with_labels(labels)
}

/// Toy re-identification data: a signal block of identity means plus an
/// isotropic nuisance block that a good embedding has to suppress.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub identities: usize,
    pub train_per_identity: usize,
    pub test_per_identity: usize,
    pub signal_dim: usize,
    pub nuisance_dim: usize,
    pub sigma: f64,
    pub nuisance_sigma: f64,
    pub outlier_fraction: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            identities: 20,
            train_per_identity: 96,
            test_per_identity: 8,
            signal_dim: 16,
            nuisance_dim: 48,
            sigma: 0.15,
            nuisance_sigma: 0.5,
            outlier_fraction: 0.05,
        }
    }
}

/// `(train, test)`; label outliers appear in the training split only.
pub fn toy_reid(spec: &ToySpec, seed: u64) -> Result<(EmbeddingSet, EmbeddingSet)> {
    let n = spec.train_per_identity + spec.test_per_identity;
    let signal = labeled_clusters(spec.identities, n, spec.signal_dim, spec.sigma, 0.0, seed)?;
    let labels = signal.labels().unwrap().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA11CE);
    let nuisance = Normal::new(0.0, spec.nuisance_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let dim = spec.signal_dim + spec.nuisance_dim;
    let n_out = (spec.train_per_identity as f64 * spec.outlier_fraction).round() as usize;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let (mut train_l, mut test_l) = (Vec::new(), Vec::new());
    for id in 0..spec.identities {
        let outliers = index::sample(&mut rng, spec.train_per_identity, n_out.min(spec.train_per_identity)).into_vec();
        for s in 0..n {
            let mut row = id * n + s;
            if s < spec.train_per_identity && outliers.contains(&s) {
                // content of another identity under this label
                let other = (id + rng.random_range(1..spec.identities)) % spec.identities;
                row = other * n + rng.random_range(0..spec.train_per_identity);
            }
            let mut v: Vec<f32> = signal.row(row).to_vec();
            v.extend((0..spec.nuisance_dim).map(|_| if spec.nuisance_sigma > 0.0 { nuisance.sample(&mut rng) as f32 } else { 0.0 }));
            if s < spec.train_per_identity {
                train.extend(v);
                train_l.push(labels[id * n]);
            } else {
                test.extend(v);
                test_l.push(labels[id * n]);
            }
        }
    }
    Ok((EmbeddingSet::new(dim, train)?.with_labels(train_l)?, EmbeddingSet::new(dim, test)?.with_labels(test_l)?))
}

/// Copies of `truth` whose detections index rows of the returned sets,
/// one set per sigma. Means are shared, so the sets differ only in noise.
pub fn embedding_checkpoints(truth: &[Trajectory], dim: usize, sigmas: &[f64], seed: u64) -> (Vec<Trajectory>, Vec<EmbeddingSet>) {
    let means = identity_means(truth.len(), dim, seed);
    let mut row = 0;
    let tagged: Vec<Trajectory> = truth
        .iter()
        .map(|t| {
            let mut t = t.clone();
            for d in &mut t.detections {
                d.embedding = Some(row);
                row += 1;
            }
            t
        })
        .collect();
    let sets = sigmas
        .iter()
        .enumerate()
        .map(|(k, &sigma)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64 + 1));
            let mut data = Vec::with_capacity(row * dim);
            for (i, t) in truth.iter().enumerate() {
                for _ in &t.detections {
                    data.extend(noisy(&means[i], sigma, &mut rng));
                }
            }
            EmbeddingSet::new(dim, data).expect("rows have the declared dim")
        })
        .collect();
    (tagged, sets)
}

/// Random symmetric correlations in `[-1, 1)` with a fraction of forbidden
/// pairs.
pub fn random_correlations(n: usize, forbidden_fraction: f64, seed: u64) -> CorrelationMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = CorrelationMatrix::zeros(n);
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(forbidden_fraction) {
                w.forbid(i, j);
            } else {
                w.set(i, j, rng.random_range(-1.0..1.0));
            }
        }
    }
    w
}

/// `E|X|` for `X ~ N(0, I_dim)`.
fn chi_mean(dim: usize) -> f64 {
    // r(d) = Gamma((d+1)/2) / Gamma(d/2), r(1) = 1/sqrt(pi), r(d+1) = d / (2 r(d))
    let mut r = 1.0 / std::f64::consts::PI.sqrt();
    for d in 1..dim {
        r = d as f64 / (2.0 * r);
    }
    std::f64::consts::SQRT_2 * r
}

/// Approximate mean distances between two noisy samples of one identity
/// and of two identities whose unit means are orthogonal on average.
pub fn expected_distances(dim: usize, sigma: f64) -> (f64, f64) {
    let mu_p = sigma * std::f64::consts::SQRT_2 * chi_mean(dim);
    let mu_n = (2.0 + 2.0 * sigma * sigma * dim as f64).sqrt();
    (mu_p, mu_n)
}

/// Sigma at which the expected negative distance is `ratio` times the
/// positive one.
pub fn sigma_for_ratio(dim: usize, ratio: f64) -> f64 {
    bisect(|s| {
        let (p, n) = expected_distances(dim, s);
        n / p - ratio
    })
}

fn normal_sf(z: f64) -> f64 {
    // Abramowitz and Stegun 7.1.26 on erfc(z / sqrt 2)
    let x = z.abs() / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erfc = poly * (-x * x).exp();
    if z >= 0.0 {
        0.5 * erfc
    } else {
        1.0 - 0.5 * erfc
    }
}

/// Approximate probability that a pair's distance lands on the wrong side
/// of the midpoint threshold, averaged over positive and negative pairs.
pub fn sign_error_rate(dim: usize, sigma: f64) -> f64 {
    let (mu_p, mu_n) = expected_distances(dim, sigma);
    let d = dim as f64;
    let s2 = sigma * sigma;
    let sd_p = sigma * (2.0 * d - 2.0 * chi_mean(dim).powi(2)).max(0.0).sqrt();
    // squared negative distance: 2 - 2cos + cross term + noise norm
    let var_sq = 4.0 / d + 16.0 * s2 + 8.0 * s2 * s2 * d;
    let sd_n = var_sq.sqrt() / (2.0 * mu_n);
    let t = 0.5 * (mu_p + mu_n);
    0.5 * (normal_sf((t - mu_p) / sd_p.max(1e-300)) + normal_sf((mu_n - t) / sd_n))
}

/// Sigma giving a balanced pairwise sign-error rate of `target`.
pub fn sigma_for_sign_error(dim: usize, target: f64) -> f64 {
    bisect(|s| target - sign_error_rate(dim, s))
}

/// Root of a function that is positive at small sigma and negative at large.
fn bisect(f: impl Fn(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (1e-6, 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::calibrate_appearance;

    fn one_camera() -> WorldSpec {
        WorldSpec { camera_count: 1, identity_count: 1, duration_s: 10.0, ..Default::default() }
    }

    #[test]
    fn single_camera_counts() {
        let t = generate_world(&one_camera()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].len(), 600);
    }

    #[test]
    fn deterministic() {
        let s = WorldSpec { seed: 7, ..Default::default() };
        assert_eq!(generate_world(&s).unwrap(), generate_world(&s).unwrap());
        let n = NoiseSpec { sigma: 0.1, miss_rate: 0.1, false_positive_rate: 0.01, box_sigma: 1.0, ..Default::default() };
        let t = generate_world(&s).unwrap();
        let a = degrade(&t, &s, &n, 3).unwrap();
        let b = degrade(&t, &s, &n, 3).unwrap();
        assert_eq!(a.detections, b.detections);
        assert_eq!(a.embeddings, b.embeddings);
    }

    #[test]
    fn physical_consistency_and_disjoint_views() {
        let s = WorldSpec { seed: 2, ..Default::default() };
        let truth = generate_world(&s).unwrap();
        assert_eq!(truth.len(), 20);
        let mut crossed = false;
        for t in &truth {
            for w in t.detections.windows(2) {
                assert_ne!(w[0].frame, w[1].frame, "seen by two cameras at once");
                if w[0].camera == w[1].camera {
                    let dt = (w[1].frame - w[0].frame) as f64 / 60.0;
                    assert!(w[0].world_distance(&w[1]) / dt <= s.speed_limit);
                } else {
                    // blind-spot transit: no detections in between
                    crossed = true;
                    assert!(w[1].frame - w[0].frame > 1);
                }
            }
        }
        assert!(crossed);
    }

    #[test]
    fn infeasible_specs() {
        let fast = WorldSpec { max_speed: 8.0, ..Default::default() };
        assert!(matches!(generate_world(&fast), Err(Error::InfeasibleWorld(_))));
        let nogap = WorldSpec { gap_m: 0.0, ..Default::default() };
        assert!(generate_world(&nogap).is_err());
        let s = WorldSpec::default();
        let (lo, hi) = s.transit_range(0, 1);
        assert_eq!((lo, hi), (5.0, 12.5));
    }

    #[test]
    fn noiseless_degrade_is_identity() {
        let s = WorldSpec { identity_count: 3, duration_s: 5.0, ..Default::default() };
        let truth = generate_world(&s).unwrap();
        let d = degrade(&truth, &s, &NoiseSpec::default(), 1).unwrap();
        let total: usize = truth.iter().map(Trajectory::len).sum();
        assert_eq!(d.detections.len(), total);
        let means = identity_means(truth.len(), 128, 1 ^ 0x5EED);
        for (i, det) in d.detections.iter().enumerate() {
            let id = d.sources[i].unwrap();
            let k = truth.iter().position(|t| t.identity == id).unwrap();
            let want: Vec<f32> = means[k].iter().map(|&m| m as f32).collect();
            assert_eq!(d.embeddings.row(det.embedding.unwrap()), want.as_slice());
        }
        let all_missed = degrade(&truth, &s, &NoiseSpec { miss_rate: 1.0, ..Default::default() }, 1).unwrap();
        assert!(all_missed.detections.is_empty());
    }

    #[test]
    fn false_positives_are_short() {
        let s = WorldSpec { identity_count: 1, duration_s: 5.0, ..Default::default() };
        let truth = generate_world(&s).unwrap();
        let d = degrade(&truth, &s, &NoiseSpec { false_positive_rate: 0.05, ..Default::default() }, 4).unwrap();
        assert!(d.sources.iter().any(Option::is_none));
    }

    #[test]
    fn ratio_three_recovers_threshold() {
        let sigma = sigma_for_ratio(128, 3.0);
        assert!((sigma - 0.03125).abs() < 5e-4, "{sigma}");
        let set = labeled_clusters(20, 30, 128, sigma, 0.0, 9).unwrap();
        let c = calibrate_appearance(&set, 100_000, 0).unwrap();
        let (p, n) = expected_distances(128, sigma);
        let t = 0.5 * (p + n);
        assert!((c.t_a - t).abs() / t < 0.05, "{} vs {t}", c.t_a);
    }

    #[test]
    fn sign_error_matches_sampling() {
        let sigma = sigma_for_sign_error(128, 0.05);
        let set = labeled_clusters(30, 20, 128, sigma, 0.0, 5).unwrap();
        let c = calibrate_appearance(&set, 1_000_000, 0).unwrap();
        let labels = set.labels().unwrap();
        let (mut ep, mut np, mut en, mut nn) = (0, 0, 0, 0);
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                let d = set.distance(i, j);
                if labels[i] == labels[j] {
                    np += 1;
                    ep += usize::from(d > c.t_a);
                } else {
                    nn += 1;
                    en += usize::from(d < c.t_a);
                }
            }
        }
        let rate = 0.5 * (ep as f64 / np as f64 + en as f64 / nn as f64);
        assert!((rate - 0.05).abs() < 0.02, "sigma {sigma}: {rate}");
    }

    #[test]
    fn outliers_keep_nominal_labels() {
        let set = labeled_clusters(4, 20, 8, 0.0, 0.05, 1).unwrap();
        let labels = set.labels().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 2).count(), 20);
        // one of twenty samples per identity sits on another mean
        let first = set.row(0).to_vec();
        let same = (0..20).filter(|&i| set.row(i) == first.as_slice()).count();
        assert!(same == 19 || same == 1);
    }
}
