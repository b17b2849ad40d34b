//! Identity-aware tracking measures and re-identification ranking metrics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use log::warn;
use rayon::prelude::*;

use crate::config::ScenarioConfig;
use crate::correlation::{appearance_correlation, calibrate_appearance, fragment_distance, AppearanceCalibration, Fragment};
use crate::error::{invalid, Error, Result};
use crate::loss::Matrix;
use crate::model::{BBox, Detection, EmbeddingSet, Trajectory};
use crate::tracker::{associate_cameras, IdentityTracks, StageParams};

pub const DEFAULT_IOU: f64 = 0.5;

/// Optimal one-to-one mapping between true and computed identities.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IdMapping {
    /// `(true id, computed id)` pairs with at least one matched detection.
    pub pairs: Vec<(u64, u64)>,
    pub idtp: u64,
    pub idfp: u64,
    pub idfn: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IdMeasures {
    pub mapping: IdMapping,
    pub idf1: f64,
    pub idp: f64,
    pub idr: f64,
}

fn ratio(num: u64, den: u64, name: &str) -> f64 {
    if den == 0 {
        warn!("{name}: empty denominator, reporting 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl IdMeasures {
    pub fn from_counts(mapping: IdMapping) -> Self {
        let (tp, fp, fn_) = (mapping.idtp, mapping.idfp, mapping.idfn);
        Self { idp: ratio(tp, tp + fp, "IDP"), idr: ratio(tp, tp + fn_, "IDR"), idf1: ratio(2 * tp, 2 * tp + fp + fn_, "IDF1"), mapping }
    }

    /// `name=value` lines.
    pub fn to_text(&self) -> String {
        let m = &self.mapping;
        format!("IDF1={:.4}\nIDP={:.4}\nIDR={:.4}\nIDTP={}\nIDFP={}\nIDFN={}\n", self.idf1, self.idp, self.idr, m.idtp, m.idfp, m.idfn)
    }

    pub fn to_csv(&self) -> String {
        let m = &self.mapping;
        format!("idf1,idp,idr,idtp,idfp,idfn\n{},{},{},{},{},{}\n", self.idf1, self.idp, self.idr, m.idtp, m.idfp, m.idfn)
    }
}

/// Minimum-cost perfect assignment on a square matrix (row-major).
/// Returns the column assigned to each row.
pub fn hungarian(n: usize, cost: &[i64]) -> Vec<usize> {
    const INF: i64 = i64::MAX / 4;
    // 1-based potentials, column 0 is the virtual start
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

type FrameIndex<'a> = HashMap<(u32, u64), Vec<(usize, &'a BBox)>>;

fn index_frames(ts: &[Trajectory]) -> FrameIndex<'_> {
    let mut idx: FrameIndex = HashMap::new();
    for (k, t) in ts.iter().enumerate() {
        for d in &t.detections {
            idx.entry((d.camera, d.frame)).or_default().push((k, &d.bbox));
        }
    }
    idx
}

/// `count[t][c]`: frames on which true identity `t` and computed identity
/// `c` have boxes overlapping at `iou >= threshold`.
pub fn match_counts(truth: &[Trajectory], computed: &[Trajectory], threshold: f64) -> Vec<Vec<u64>> {
    let ci = index_frames(computed);
    let mut counts = vec![vec![0u64; computed.len()]; truth.len()];
    for (t, tr) in truth.iter().enumerate() {
        for d in &tr.detections {
            if let Some(cands) = ci.get(&(d.camera, d.frame)) {
                for &(c, b) in cands {
                    if d.bbox.iou(b) >= threshold {
                        counts[t][c] += 1;
                    }
                }
            }
        }
    }
    counts
}

fn check_truth(truth: &[Trajectory]) -> Result<()> {
    let mut seen: HashMap<(u64, u32, u64), ()> = HashMap::new();
    for t in truth {
        for d in &t.detections {
            if seen.insert((t.identity, d.camera, d.frame), ()).is_some() {
                return Err(Error::DuplicateTruth { identity: t.identity, camera: d.camera, frame: d.frame });
            }
        }
    }
    Ok(())
}

/// IDF1, IDP and IDR under the identity mapping maximizing matched
/// detections.
pub fn id_measures(truth: &[Trajectory], computed: &[Trajectory], iou_threshold: f64) -> Result<IdMeasures> {
    check_truth(truth)?;
    let counts = match_counts(truth, computed, iou_threshold);
    let n = truth.len().max(computed.len());
    let mut cost = vec![0i64; n * n];
    for (t, row) in counts.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            cost[t * n + c] = -(v as i64);
        }
    }
    let assign = hungarian(n, &cost);
    let mut pairs = Vec::new();
    let mut idtp = 0;
    for t in 0..truth.len() {
        let c = assign[t];
        if c < computed.len() && counts[t][c] > 0 {
            idtp += counts[t][c];
            pairs.push((truth[t].identity, computed[c].identity));
        }
    }
    pairs.sort_unstable();
    let n_true: u64 = truth.iter().map(|t| t.len() as u64).sum();
    let n_comp: u64 = computed.iter().map(|t| t.len() as u64).sum();
    Ok(IdMeasures::from_counts(IdMapping { pairs, idtp, idfp: n_comp - idtp, idfn: n_true - idtp }))
}

/// Labels each detection with the true identity whose box on the same
/// camera and frame overlaps it most, if that overlap reaches `threshold`.
pub fn label_detections(detections: &[Detection], truth: &[Trajectory], threshold: f64) -> Vec<Option<u64>> {
    let ti = index_frames(truth);
    detections
        .iter()
        .map(|d| {
            let mut best: Option<(f64, u64)> = None;
            for &(k, b) in ti.get(&(d.camera, d.frame)).map(Vec::as_slice).unwrap_or(&[]) {
                let v = d.bbox.iou(b);
                if v >= threshold && best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, truth[k].identity));
                }
            }
            best.map(|b| b.1)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankResult {
    /// Unmasked gallery indices per query, nearest first.
    pub ranked: Vec<Vec<usize>>,
    /// `cmc[k-1]`: fraction of queries with a positive in the top `k`.
    pub cmc: Vec<f64>,
    pub map: f64,
}

impl RankResult {
    pub fn rank(&self, k: usize) -> f64 {
        if self.cmc.is_empty() {
            return 0.0;
        }
        self.cmc[(k.max(1) - 1).min(self.cmc.len() - 1)]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in [1, 5, 10] {
            writeln!(s, "rank{k}={:.4}", self.rank(k)).unwrap();
        }
        writeln!(s, "mAP={:.4}", self.map).unwrap();
        s
    }
}

/// Rank-k accuracies and mAP. Gallery entries sharing both identity and
/// camera with the query are excluded; ties in distance keep gallery order.
pub fn rank_map(
    distances: &Matrix,
    query_ids: &[u64],
    gallery_ids: &[u64],
    query_cameras: &[u32],
    gallery_cameras: &[u32],
) -> Result<RankResult> {
    let (nq, ng) = (distances.rows(), distances.cols());
    if query_ids.len() != nq || query_cameras.len() != nq || gallery_ids.len() != ng || gallery_cameras.len() != ng {
        return Err(invalid("rank_map: id/camera lengths do not match the distance matrix"));
    }
    if let Some(q) = (0..nq).find(|&q| distances.row(q).iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { row: q });
    }
    let per_query: Vec<(Vec<usize>, Option<usize>, f64)> = (0..nq)
        .into_par_iter()
        .map(|q| {
            let row = distances.row(q);
            let mut order: Vec<usize> =
                (0..ng).filter(|&g| !(gallery_ids[g] == query_ids[q] && gallery_cameras[g] == query_cameras[q])).collect();
            order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
            let mut hits = 0;
            let mut ap = 0.0;
            let mut first = None;
            for (r, &g) in order.iter().enumerate() {
                if gallery_ids[g] == query_ids[q] {
                    hits += 1;
                    ap += hits as f64 / (r + 1) as f64;
                    first.get_or_insert(r);
                }
            }
            if hits == 0 {
                return Err(Error::NoPositive(q));
            }
            Ok((order, first, ap / hits as f64))
        })
        .collect::<Result<_>>()?;
    let mut cmc = vec![0.0; ng.max(1)];
    let mut map = 0.0;
    let mut ranked = Vec::with_capacity(nq);
    for (order, first, ap) in per_query {
        let r = first.expect("checked above");
        for c in &mut cmc[r..] {
            *c += 1.0;
        }
        map += ap;
        ranked.push(order);
    }
    let denom = nq.max(1) as f64;
    cmc.iter_mut().for_each(|c| *c /= denom);
    Ok(RankResult { ranked, cmc, map: map / denom })
}

/// Ranking with every labeled row as a query against all other rows.
pub fn leave_one_out(set: &EmbeddingSet) -> Result<RankResult> {
    let labels = set.labels().ok_or_else(|| invalid("leave-one-out ranking needs labels"))?;
    let n = set.len();
    let ids: Vec<u64> = labels.iter().map(|&l| l as u64).collect();
    // each row is its own camera, so the mask removes exactly the query
    let cams: Vec<u32> = (0..n as u32).collect();
    let dist = Matrix::from_vec(n, n, (0..n).flat_map(|i| (0..n).map(move |j| set.distance(i, j))).collect())?;
    rank_map(&dist, &ids, &ids, &cams, &cams)
}

/// Splits true trajectories into single-camera visits: runs of one camera
/// separated by less than `max_gap` frames.
pub fn single_camera_visits(truth: &[Trajectory], max_gap: u64) -> Vec<(u64, Vec<Detection>)> {
    let mut out = Vec::new();
    for t in truth {
        let mut by_cam: BTreeMap<u32, Vec<Detection>> = BTreeMap::new();
        for d in &t.detections {
            by_cam.entry(d.camera).or_default().push(d.clone());
        }
        for dets in by_cam.into_values() {
            let mut cur: Vec<Detection> = Vec::new();
            for d in dets {
                if cur.last().is_some_and(|l| d.frame - l.frame > max_gap) {
                    out.push((t.identity, std::mem::take(&mut cur)));
                }
                cur.push(d);
            }
            out.push((t.identity, cur));
        }
    }
    out.sort_by_key(|(id, d)| (d[0].frame, d[0].camera, *id));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub checkpoint: usize,
    pub rank1: f64,
    pub sign_accuracy: f64,
    pub idf1: f64,
}

pub fn format_study(rows: &[StudyRow]) -> String {
    let mut s = String::from("# checkpoint rank1 sign_accuracy idf1\n");
    for r in rows {
        writeln!(s, "{} {:.4} {:.4} {:.4}", r.checkpoint, r.rank1, r.sign_accuracy, r.idf1).unwrap();
    }
    s
}

/// `(identity, camera, embedding row)`.
pub(crate) type ReidRow = (u64, u32, usize);

/// Query and gallery rows for the ranking part of the study: the middle
/// detection of each visit is a query, up to eight other evenly spaced
/// detections go to the gallery.
pub(crate) fn reid_split(visits: &[(u64, Vec<Detection>)]) -> (Vec<ReidRow>, Vec<ReidRow>) {
    let mut q = Vec::new();
    let mut g = Vec::new();
    for (id, dets) in visits {
        let rows: Vec<(u32, usize)> = dets.iter().filter_map(|d| d.embedding.map(|r| (d.camera, r))).collect();
        if rows.is_empty() {
            continue;
        }
        let mid = rows.len() / 2;
        q.push((*id, rows[mid].0, rows[mid].1));
        let rest: Vec<&(u32, usize)> = rows.iter().enumerate().filter(|(i, _)| *i != mid).map(|(_, r)| r).collect();
        let take = rest.len().min(8);
        for k in 0..take {
            let r = rest[k * rest.len() / take];
            g.push((*id, r.0, r.1));
        }
    }
    (q, g)
}

/// For each feature checkpoint: held-out rank-1, the fraction of visit
/// pairs whose appearance correlation has the right sign, and the
/// multi-camera IDF1 of associating the true single-camera visits.
///
/// Detections in `truth` index rows of every checkpoint.
pub fn tracking_vs_rank_study(
    checkpoints: &[EmbeddingSet],
    truth: &[Trajectory],
    cfg: &ScenarioConfig,
    seed: u64,
) -> Result<Vec<StudyRow>> {
    if checkpoints.len() < 2 {
        return Err(invalid("study needs at least two checkpoints"));
    }
    let visits = single_camera_visits(truth, cfg.fps as u64);
    let (queries, gallery) = reid_split(&visits);
    // identities seen in one camera only have no cross-camera positive
    let queries: Vec<_> = queries.into_iter().filter(|q| gallery.iter().any(|g| g.0 == q.0 && g.1 != q.1)).collect();
    let mut rows = Vec::new();
    for (ci, set) in checkpoints.iter().enumerate() {
        let mut labels = vec![u32::MAX; set.len()];
        for (id, dets) in &visits {
            for d in dets {
                if let Some(r) = d.embedding {
                    labels[r] = *id as u32;
                }
            }
        }
        let labeled: Vec<usize> = (0..set.len()).filter(|&r| labels[r] != u32::MAX).collect();
        let sub = set.select(&labeled).with_labels(labeled.iter().map(|&r| labels[r]).collect())?;
        let calib = match calibrate_appearance(&sub, 200_000, seed) {
            // no appearance signal: keep the midpoint threshold anyway
            Err(Error::Inseparable { mu_p, mu_n }) => AppearanceCalibration::from_threshold(0.5 * (mu_p + mu_n))?,
            other => other?,
        };

        let dist = Matrix::from_vec(
            queries.len(),
            gallery.len(),
            queries.iter().flat_map(|q| gallery.iter().map(|g| set.distance(q.2, g.2))).collect(),
        )?;
        let rank = rank_map(
            &dist,
            &queries.iter().map(|q| q.0).collect::<Vec<_>>(),
            &gallery.iter().map(|g| g.0).collect::<Vec<_>>(),
            &queries.iter().map(|q| q.1).collect::<Vec<_>>(),
            &gallery.iter().map(|g| g.1).collect::<Vec<_>>(),
        )?;

        let frags: Vec<Fragment> = visits.iter().map(|(_, d)| Fragment::new(d.clone())).collect::<Result<_>>()?;
        let n = frags.len();
        let (mut right, mut total) = (0u64, 0u64);
        for i in 0..n {
            for j in i + 1..n {
                if let Some(d) = fragment_distance(&frags[i], &frags[j], set) {
                    let w = appearance_correlation(d, &calib);
                    right += u64::from((w > 0.0) == (visits[i].0 == visits[j].0));
                    total += 1;
                }
            }
        }

        let mut p = StageParams::from_config(cfg, seed)?;
        p.calib = calib;
        let mut ids = IdentityTracks::new(frags);
        associate_cameras(&mut ids, set, cfg, &p)?;
        let idf1 = id_measures(truth, &ids.into_trajectories()?, DEFAULT_IOU)?.idf1;
        rows.push(StudyRow { checkpoint: ci, rank1: rank.rank(1), sign_accuracy: ratio(right, total, "sign accuracy"), idf1 });
    }
    Ok(rows)
}
