//! Three-level hierarchical tracker.
//!
//! 1. Disjoint one-second windows per camera: detections become tracklets.
//! 2. Sliding windows per camera: tracklets join single-camera trajectories.
//!    Trajectories with a detection in the window are reconsidered as whole
//!    nodes, so earlier merges are never undone.
//! 3. Sliding windows over all cameras: single-camera trajectories join
//!    multi-camera identities, again as whole nodes.
//!
//! A merged entity keeps the oldest (smallest) id among its members. Short
//! gaps are interpolated and low-confidence tracks pruned at the end.

use std::collections::BTreeMap;

use log::info;
use rayon::prelude::*;

use crate::clustering::{solve, Partition};
use crate::config::ScenarioConfig;
use crate::correlation::{fragment_correlations, AppearanceCalibration, CorrelationMatrix, Fragment, MotionParams};
use crate::error::{Error, Result};
use crate::model::{Detection, EmbeddingSet, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Tracklet,
    SingleCamera,
    MultiCamera,
}

impl Level {
    pub fn number(self) -> u8 {
        match self {
            Level::Tracklet => 1,
            Level::SingleCamera => 2,
            Level::MultiCamera => 3,
        }
    }
}

/// Window geometry for one level, in frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowPlan {
    pub level: Level,
    pub width: u64,
    pub stride: u64,
}

impl WindowPlan {
    pub fn for_level(level: Level, cfg: &ScenarioConfig) -> Self {
        let (seconds, sliding) = match level {
            Level::Tracklet => (cfg.window_tracklet_s, false),
            Level::SingleCamera => (cfg.window_sc_s, true),
            Level::MultiCamera => (cfg.window_mc_s, true),
        };
        let width = cfg.frames(seconds).max(1);
        let stride = if sliding { ((width as f64 * (1.0 - cfg.overlap_fraction)).round() as u64).clamp(1, width) } else { width };
        Self { level, width, stride }
    }

    pub fn disjoint(&self) -> bool {
        self.stride == self.width
    }

    /// Half-open windows, aligned to multiples of the stride, covering
    /// frames `first..=last`.
    pub fn windows(&self, first: u64, last: u64) -> Vec<(u64, u64)> {
        let mut out = Vec::new();
        let mut s = first / self.stride * self.stride;
        while s <= last {
            out.push((s, s + self.width));
            s += self.stride;
        }
        out
    }
}

/// Per-instance solver and correlation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageParams {
    pub calib: AppearanceCalibration,
    pub motion: MotionParams,
    pub fps: u32,
    pub exact_limit: usize,
    pub seed: u64,
}

impl StageParams {
    pub fn from_config(cfg: &ScenarioConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            calib: AppearanceCalibration::from_threshold(cfg.t_a)?,
            motion: MotionParams::from_config(cfg),
            fps: cfg.fps,
            exact_limit: cfg.exact_limit,
            seed,
        })
    }

    fn instance_seed(&self, level: Level, camera: u32, start: u64) -> u64 {
        let mut h = self.seed ^ 0x9E37_79B9_7F4A_7C15;
        for v in [level.number() as u64, camera as u64, start] {
            h = (h ^ v).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            h ^= h >> 31;
        }
        h
    }
}

/// Node and cluster counts of one clustering instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StageReport {
    pub nodes: usize,
    pub clusters: usize,
}

fn log_stage(level: Level, window: (u64, u64), r: StageReport) {
    info!("level={} window=[{},{}) nodes={} clusters={}", level.number(), window.0, window.1, r.nodes, r.clusters);
}

fn cluster(fragments: &[Fragment], embeddings: &EmbeddingSet, p: &StageParams, seed: u64) -> Result<(CorrelationMatrix, Partition)> {
    let w = fragment_correlations(fragments, embeddings, &p.calib, &p.motion, p.fps)?;
    let part = solve(&w, p.exact_limit, seed);
    Ok((w, part))
}

fn intersects(f: &Fragment, window: (u64, u64)) -> bool {
    let d = f.detections();
    let i = d.partition_point(|x| x.frame < window.0);
    i < d.len() && d[i].frame < window.1
}

/// Splits a cluster so it holds at most one detection per frame. On a
/// crowded frame the detection with the largest summed correlation to the
/// rest of the cluster stays; the others become singletons.
pub fn repair_frames(members: &[usize], frames: &[u64], w: &CorrelationMatrix) -> Vec<Vec<usize>> {
    let mut by_frame: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for &m in members {
        by_frame.entry(frames[m]).or_default().push(m);
    }
    if by_frame.values().all(|v| v.len() == 1) {
        return vec![members.to_vec()];
    }
    let mut kept = Vec::new();
    let mut split = Vec::new();
    for group in by_frame.values() {
        if group.len() == 1 {
            kept.push(group[0]);
            continue;
        }
        let score = |i: usize| -> f64 { members.iter().filter(|&&j| frames[j] != frames[i]).map(|&j| w.get(i, j)).sum() };
        let mut best = group[0];
        for &c in &group[1..] {
            if score(c) > score(best) {
                best = c;
            }
        }
        kept.push(best);
        split.extend(group.iter().copied().filter(|&c| c != best).map(|c| vec![c]));
    }
    kept.sort_unstable();
    let mut out = vec![kept];
    out.extend(split);
    out
}

/// Clusters one camera's detections in one window into tracklets. Returns
/// index lists into `window`, each sorted by frame.
pub fn tracklet_stage(window: &[Detection], embeddings: &EmbeddingSet, p: &StageParams, seed: u64) -> Result<Vec<Vec<usize>>> {
    if window.is_empty() {
        return Ok(Vec::new());
    }
    let frags: Vec<Fragment> = window.iter().cloned().map(Fragment::single).collect();
    let (w, part) = cluster(&frags, embeddings, p, seed)?;
    let frames: Vec<u64> = window.iter().map(|d| d.frame).collect();
    let mut out = Vec::new();
    for members in part.clusters() {
        for mut t in repair_frames(&members, &frames, &w) {
            t.sort_by_key(|&i| (frames[i], i));
            out.push(t);
        }
    }
    out.sort_by_key(|t| t[0]);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ScTrajectory {
    pub id: u64,
    pub fragment: Fragment,
    pub tracklets: Vec<usize>,
}

/// Level-2 state of one camera.
#[derive(Debug, Clone)]
pub struct CameraTracks {
    pub camera: u32,
    pub tracklets: Vec<Fragment>,
    owner: Vec<Option<usize>>,
    slots: Vec<Option<ScTrajectory>>,
    next_id: u64,
}

impl CameraTracks {
    pub fn new(camera: u32, tracklets: Vec<Fragment>) -> Self {
        let owner = vec![None; tracklets.len()];
        Self { camera, tracklets, owner, slots: Vec::new(), next_id: 1 }
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &ScTrajectory> {
        self.slots.iter().flatten()
    }

    pub fn unassigned(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.tracklets.len()).filter(|&i| self.owner[i].is_none())
    }

    /// Assigns any leftover tracklet its own trajectory.
    fn finish(&mut self) {
        for t in self.unassigned().collect::<Vec<_>>() {
            self.new_trajectory(vec![t]);
        }
    }

    fn new_trajectory(&mut self, tracklets: Vec<usize>) -> usize {
        let dets = tracklets.iter().flat_map(|&t| self.tracklets[t].detections().iter().cloned()).collect();
        let slot = self.slots.len();
        for &t in &tracklets {
            self.owner[t] = Some(slot);
        }
        self.slots.push(Some(ScTrajectory { id: self.next_id, fragment: Fragment::new(dets).expect("tracklets are nonempty"), tracklets }));
        self.next_id += 1;
        slot
    }
}

enum ScNode {
    Trajectory(usize),
    Tracklet(usize),
}

/// One level-2 window on one camera. Nodes are live trajectories with a
/// detection in the window, then unassigned tracklets in the window.
pub fn sc_trajectory_stage(
    state: &mut CameraTracks,
    window: (u64, u64),
    embeddings: &EmbeddingSet,
    p: &StageParams,
) -> Result<StageReport> {
    let mut nodes = Vec::new();
    let mut frags = Vec::new();
    for (slot, t) in state.slots.iter().enumerate() {
        if let Some(t) = t {
            if intersects(&t.fragment, window) {
                nodes.push(ScNode::Trajectory(slot));
                frags.push(t.fragment.clone());
            }
        }
    }
    for i in state.unassigned().collect::<Vec<_>>() {
        if intersects(&state.tracklets[i], window) {
            nodes.push(ScNode::Tracklet(i));
            frags.push(state.tracklets[i].clone());
        }
    }
    if nodes.is_empty() {
        return Ok(StageReport::default());
    }
    let seed = p.instance_seed(Level::SingleCamera, state.camera, window.0);
    let (_, part) = cluster(&frags, embeddings, p, seed)?;
    let clusters = part.clusters();
    for members in &clusters {
        let mut slots: Vec<usize> = Vec::new();
        let mut loose: Vec<usize> = Vec::new();
        for &m in members {
            match nodes[m] {
                ScNode::Trajectory(s) => slots.push(s),
                ScNode::Tracklet(t) => loose.push(t),
            }
        }
        if slots.is_empty() {
            state.new_trajectory(loose);
            continue;
        }
        slots.sort_by_key(|&s| state.slots[s].as_ref().unwrap().id);
        let target = slots[0];
        let mut dets = Vec::new();
        let mut tracklets = Vec::new();
        for &s in &slots[1..] {
            let t = state.slots[s].take().unwrap();
            dets.extend(t.fragment.into_detections());
            tracklets.extend(t.tracklets);
        }
        for &t in &loose {
            dets.extend(state.tracklets[t].detections().iter().cloned());
        }
        tracklets.extend(loose);
        for &t in &tracklets {
            state.owner[t] = Some(target);
        }
        let tgt = state.slots[target].as_mut().unwrap();
        if !dets.is_empty() {
            dets.extend(tgt.fragment.detections().iter().cloned());
            tgt.fragment = Fragment::new(dets)?;
        }
        tgt.tracklets.extend(tracklets);
    }
    Ok(StageReport { nodes: nodes.len(), clusters: clusters.len() })
}

#[derive(Debug, Clone)]
pub struct Identity {
    pub id: u64,
    /// Indices into the single-camera trajectory list.
    pub members: Vec<usize>,
    pub fragment: Fragment,
}

/// Level-3 state: multi-camera identities over a fixed list of
/// single-camera trajectories.
#[derive(Debug, Clone)]
pub struct IdentityTracks {
    slots: Vec<Option<Identity>>,
}

impl IdentityTracks {
    /// One identity per trajectory, ids `1..` in input order.
    pub fn new(single_camera: Vec<Fragment>) -> Self {
        let slots = single_camera
            .into_iter()
            .enumerate()
            .map(|(i, f)| Some(Identity { id: i as u64 + 1, members: vec![i], fragment: f }))
            .collect();
        Self { slots }
    }

    pub fn identities(&self) -> impl Iterator<Item = &Identity> {
        self.slots.iter().flatten()
    }

    pub fn span(&self) -> Option<(u64, u64)> {
        let first = self.identities().map(|i| i.fragment.first_frame()).min()?;
        let last = self.identities().map(|i| i.fragment.last_frame()).max()?;
        Some((first, last))
    }

    pub fn into_trajectories(self) -> Result<Vec<Trajectory>> {
        self.slots.into_iter().flatten().map(|i| Trajectory::new(i.id, i.fragment.into_detections())).collect()
    }
}

/// One level-3 window: identities with a detection in the window are the
/// nodes.
pub fn mc_trajectory_stage(
    state: &mut IdentityTracks,
    window: (u64, u64),
    embeddings: &EmbeddingSet,
    p: &StageParams,
) -> Result<StageReport> {
    let nodes: Vec<usize> =
        (0..state.slots.len()).filter(|&s| state.slots[s].as_ref().is_some_and(|i| intersects(&i.fragment, window))).collect();
    if nodes.is_empty() {
        return Ok(StageReport::default());
    }
    let frags: Vec<Fragment> = nodes.iter().map(|&s| state.slots[s].as_ref().unwrap().fragment.clone()).collect();
    let seed = p.instance_seed(Level::MultiCamera, 0, window.0);
    let (_, part) = cluster(&frags, embeddings, p, seed)?;
    let clusters = part.clusters();
    for members in &clusters {
        if members.len() < 2 {
            continue;
        }
        let mut slots: Vec<usize> = members.iter().map(|&m| nodes[m]).collect();
        slots.sort_by_key(|&s| state.slots[s].as_ref().unwrap().id);
        let mut dets = Vec::new();
        let mut absorbed = Vec::new();
        for &s in &slots[1..] {
            let i = state.slots[s].take().unwrap();
            dets.extend(i.fragment.into_detections());
            absorbed.extend(i.members);
        }
        let tgt = state.slots[slots[0]].as_mut().unwrap();
        dets.extend(tgt.fragment.detections().iter().cloned());
        tgt.fragment = Fragment::new(dets)?;
        tgt.members.extend(absorbed);
        tgt.members.sort_unstable();
    }
    Ok(StageReport { nodes: nodes.len(), clusters: clusters.len() })
}

/// Runs every level-3 window over the identities' span.
pub fn associate_cameras(state: &mut IdentityTracks, embeddings: &EmbeddingSet, cfg: &ScenarioConfig, p: &StageParams) -> Result<()> {
    let Some((first, last)) = state.span() else { return Ok(()) };
    let plan = WindowPlan::for_level(Level::MultiCamera, cfg);
    for win in plan.windows(first, last) {
        let r = mc_trajectory_stage(state, win, embeddings, p)?;
        log_stage(Level::MultiCamera, win, r);
    }
    Ok(())
}

/// Fills per-camera gaps of at most `max_gap` frames by linear
/// interpolation of box and world position.
pub fn interpolate(t: &Trajectory, max_gap: u64) -> Trajectory {
    let mut by_cam: BTreeMap<u32, Vec<&Detection>> = BTreeMap::new();
    for d in &t.detections {
        by_cam.entry(d.camera).or_default().push(d);
    }
    let mut out = t.detections.clone();
    for dets in by_cam.values() {
        for pair in dets.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let gap = b.frame - a.frame;
            if gap < 2 || gap > max_gap {
                continue;
            }
            for f in a.frame + 1..b.frame {
                let s = (f - a.frame) as f64 / gap as f64;
                let world = [a.world[0] + s * (b.world[0] - a.world[0]), a.world[1] + s * (b.world[1] - a.world[1])];
                let mut d = Detection::new(a.camera, f, a.bbox.lerp(&b.bbox, s), world);
                d.interpolated = true;
                out.push(d);
            }
        }
    }
    Trajectory::new(t.identity, out).expect("interpolation fills only empty frames")
}

/// Keeps trajectories with at least `min_length` original detections in
/// some camera.
pub fn prune(trajectories: Vec<Trajectory>, min_length: u64) -> Vec<Trajectory> {
    trajectories
        .into_iter()
        .filter(|t| {
            let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
            for d in t.detections.iter().filter(|d| !d.interpolated) {
                *counts.entry(d.camera).or_default() += 1;
            }
            counts.values().any(|&c| c >= min_length)
        })
        .collect()
}

fn check_embeddings(detections: &[Detection], embeddings: &EmbeddingSet) -> Result<()> {
    for (index, d) in detections.iter().enumerate() {
        if !d.embedding.is_some_and(|r| r < embeddings.len()) {
            return Err(Error::MissingEmbedding { index, camera: d.camera, frame: d.frame });
        }
    }
    Ok(())
}

/// Levels 1 and 2 for every camera. Returns each camera's single-camera
/// trajectories, cameras in ascending order.
pub fn single_camera_tracks(
    detections: &[Detection],
    embeddings: &EmbeddingSet,
    cfg: &ScenarioConfig,
    p: &StageParams,
) -> Result<Vec<CameraTracks>> {
    let mut by_cam: BTreeMap<u32, Vec<Detection>> = BTreeMap::new();
    for d in detections {
        by_cam.entry(d.camera).or_default().push(d.clone());
    }
    let l1 = WindowPlan::for_level(Level::Tracklet, cfg);
    let l2 = WindowPlan::for_level(Level::SingleCamera, cfg);
    by_cam
        .into_par_iter()
        .map(|(camera, mut dets)| {
            dets.sort_by_key(|d| (d.frame, d.embedding));
            let (first, last) = (dets[0].frame, dets[dets.len() - 1].frame);
            let windows = l1.windows(first, last);
            let per_window: Vec<Vec<Fragment>> = windows
                .par_iter()
                .map(|&win| {
                    let lo = dets.partition_point(|d| d.frame < win.0);
                    let hi = dets.partition_point(|d| d.frame < win.1);
                    let slice = &dets[lo..hi];
                    let seed = p.instance_seed(Level::Tracklet, camera, win.0);
                    let groups = tracklet_stage(slice, embeddings, p, seed)?;
                    log_stage(Level::Tracklet, win, StageReport { nodes: slice.len(), clusters: groups.len() });
                    groups.into_iter().map(|g| Fragment::new(g.into_iter().map(|i| slice[i].clone()).collect())).collect()
                })
                .collect::<Result<_>>()?;
            let mut state = CameraTracks::new(camera, per_window.into_iter().flatten().collect());
            for win in l2.windows(first, last) {
                let r = sc_trajectory_stage(&mut state, win, embeddings, p)?;
                if r.nodes > 0 {
                    log_stage(Level::SingleCamera, win, r);
                }
            }
            state.finish();
            Ok(state)
        })
        .collect()
}

/// Full pipeline: tracklets, single-camera trajectories, multi-camera
/// identities, then interpolation and pruning. Output is sorted by identity.
pub fn run_pipeline(detections: &[Detection], embeddings: &EmbeddingSet, cfg: &ScenarioConfig, seed: u64) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    check_embeddings(detections, embeddings)?;
    if detections.is_empty() {
        return Ok(Vec::new());
    }
    let p = StageParams::from_config(cfg, seed)?;
    let cams = single_camera_tracks(detections, embeddings, cfg, &p)?;
    let mut sc: Vec<(u64, u32, u64, Fragment)> = cams
        .into_iter()
        .flat_map(|c| {
            let camera = c.camera;
            c.slots.into_iter().flatten().map(move |t| (t.fragment.first_frame(), camera, t.id, t.fragment))
        })
        .collect();
    sc.sort_by_key(|s| (s.0, s.1, s.2));
    let mut ids = IdentityTracks::new(sc.into_iter().map(|s| s.3).collect());
    associate_cameras(&mut ids, embeddings, cfg, &p)?;
    let out: Vec<Trajectory> = ids.into_trajectories()?.iter().map(|t| interpolate(t, cfg.fps as u64)).collect();
    let mut out = prune(out, cfg.min_length());
    out.sort_by_key(|t| t.identity);
    Ok(out)
}
