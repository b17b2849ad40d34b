//! Correlation clustering: maximize the summed correlation inside clusters,
//! never co-clustering a forbidden pair.
//!
//! [`solve_exact`] is a branch-and-bound over restricted-growth strings and
//! returns the lexicographically smallest optimal labeling.
//! [`solve_heuristic`] is greedy agglomeration followed by local search.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::correlation::CorrelationMatrix;
use crate::error::{invalid, Error, Result};

pub const DEFAULT_EXACT_LIMIT: usize = 12;

// Improvements below this are treated as float noise.
const EPS: f64 = 1e-12;

/// Canonical cluster labels: dense, numbered in order of first occurrence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Partition {
    labels: Vec<usize>,
}

impl Partition {
    pub fn from_labels<T: Copy + Eq + std::hash::Hash>(raw: &[T]) -> Self {
        let mut map = std::collections::HashMap::new();
        let labels = raw
            .iter()
            .map(|l| {
                let next = map.len();
                *map.entry(*l).or_insert(next)
            })
            .collect();
        Self { labels }
    }

    pub fn singletons(n: usize) -> Self {
        Self { labels: (0..n).collect() }
    }

    pub fn single_cluster(n: usize) -> Self {
        Self { labels: vec![0; n] }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cluster_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn together(&self, i: usize, j: usize) -> bool {
        self.labels[i] == self.labels[j]
    }

    /// Members of each cluster, in label order.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.cluster_count()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    fn from_clusters(n: usize, clusters: &[Vec<usize>]) -> Self {
        let mut raw = vec![0usize; n];
        for (c, members) in clusters.iter().enumerate() {
            for &i in members {
                raw[i] = c;
            }
        }
        Self::from_labels(&raw)
    }

    /// `node:label` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, l) in self.labels.iter().enumerate() {
            writeln!(s, "{i}:{l}").unwrap();
        }
        s
    }
}

/// Sum of within-cluster correlations.
pub fn objective(w: &CorrelationMatrix, p: &Partition) -> Result<f64> {
    if w.n() != p.len() {
        return Err(invalid(format!("matrix has {} nodes, partition {}", w.n(), p.len())));
    }
    let mut total = 0.0;
    for members in p.clusters() {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                if w.is_forbidden(i, j) {
                    return Err(Error::ForbiddenPair(i, j));
                }
                total += w.get(i, j);
            }
        }
    }
    Ok(total)
}

/// Exact solver with the default node limit.
pub fn solve_exact(w: &CorrelationMatrix) -> Result<Partition> {
    solve_exact_with_limit(w, DEFAULT_EXACT_LIMIT)
}

pub fn solve_exact_with_limit(w: &CorrelationMatrix, limit: usize) -> Result<Partition> {
    let n = w.n();
    if n > limit {
        return Err(Error::ExactLimit { n, limit });
    }
    // rem[i]: positive mass of edges whose later endpoint is >= i
    let mut rem = vec![0.0; n + 1];
    for j in (0..n).rev() {
        let pos: f64 = (0..j).filter(|&i| !w.is_forbidden(i, j)).map(|i| w.get(i, j).max(0.0)).sum();
        rem[j] = rem[j + 1] + pos;
    }
    let mut search = Exact { w, rem, labels: vec![0; n], clusters: Vec::new(), best: f64::NEG_INFINITY, best_labels: (0..n).collect() };
    search.descend(0, 0.0);
    Ok(Partition { labels: search.best_labels })
}

struct Exact<'a> {
    w: &'a CorrelationMatrix,
    rem: Vec<f64>,
    labels: Vec<usize>,
    clusters: Vec<Vec<usize>>,
    best: f64,
    best_labels: Vec<usize>,
}

impl Exact<'_> {
    fn descend(&mut self, i: usize, value: f64) {
        let n = self.labels.len();
        if i == n {
            if value > self.best {
                self.best = value;
                self.best_labels.copy_from_slice(&self.labels);
            }
            return;
        }
        // Singletons are feasible with value 0, so a subtree bounded below
        // zero cannot hold an optimum. Later subtrees are lexicographically
        // larger, so ties with the incumbent need not be explored.
        let bound = value + self.rem[i];
        if bound < -EPS || bound <= self.best - EPS * (1.0 + self.best.abs()) {
            return;
        }
        for c in 0..=self.clusters.len() {
            let gain = if c == self.clusters.len() {
                0.0
            } else {
                let mut g = 0.0;
                let mut ok = true;
                for &j in &self.clusters[c] {
                    if self.w.is_forbidden(i, j) {
                        ok = false;
                        break;
                    }
                    g += self.w.get(i, j);
                }
                if !ok {
                    continue;
                }
                g
            };
            if c == self.clusters.len() {
                self.clusters.push(vec![i]);
            } else {
                self.clusters[c].push(i);
            }
            self.labels[i] = c;
            self.descend(i + 1, value + gain);
            if c == self.clusters.len() - 1 && self.clusters[c].len() == 1 {
                self.clusters.pop();
            } else {
                self.clusters[c].pop();
            }
        }
    }
}

/// Greedy agglomeration: repeatedly merge the cluster pair with the largest
/// positive summed correlation (ties to the lowest pair), never across a
/// forbidden pair.
pub fn solve_greedy(w: &CorrelationMatrix) -> Partition {
    let n = w.n();
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut alive = vec![true; n];
    let mut s: Vec<f64> = (0..n * n).map(|k| w.get(k / n, k % n)).collect();
    let mut f: Vec<bool> = (0..n * n).map(|k| k / n != k % n && w.is_forbidden(k / n, k % n)).collect();
    loop {
        let mut best: Option<(usize, usize)> = None;
        let mut best_v = 0.0;
        for a in (0..n).filter(|&a| alive[a]) {
            for b in (a + 1..n).filter(|&b| alive[b]) {
                let v = s[a * n + b];
                if !f[a * n + b] && v > best_v + EPS {
                    best_v = v;
                    best = Some((a, b));
                }
            }
        }
        let Some((a, b)) = best else { break };
        alive[b] = false;
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
        for c in 0..n {
            s[a * n + c] += s[b * n + c];
            s[c * n + a] = s[a * n + c];
            f[a * n + c] |= f[b * n + c];
            f[c * n + a] = f[a * n + c];
        }
    }
    let clusters: Vec<Vec<usize>> = members.into_iter().filter(|m| !m.is_empty()).collect();
    Partition::from_clusters(n, &clusters)
}

/// Greedy agglomeration, then local search with single-node relocation,
/// cluster merges and cluster bipartitions, each accepted only on strict
/// improvement. `seed` fixes the node visiting order.
pub fn solve_heuristic(w: &CorrelationMatrix, seed: u64) -> Partition {
    let n = w.n();
    let start = solve_greedy(w);
    let mut state = Local::new(w, &start);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    loop {
        let mut improved = false;
        for &i in &order {
            improved |= state.relocate(i);
        }
        improved |= state.merge_pass();
        improved |= state.split_pass();
        if !improved {
            break;
        }
    }
    Partition::from_clusters(n, &state.clusters())
}

/// Exact below `exact_limit` nodes, heuristic otherwise.
pub fn solve(w: &CorrelationMatrix, exact_limit: usize, seed: u64) -> Partition {
    if w.n() <= exact_limit {
        solve_exact_with_limit(w, exact_limit).expect("size checked")
    } else {
        solve_heuristic(w, seed)
    }
}

struct Local<'a> {
    w: &'a CorrelationMatrix,
    label: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl<'a> Local<'a> {
    fn new(w: &'a CorrelationMatrix, p: &Partition) -> Self {
        Self { w, label: p.labels().to_vec(), members: p.clusters() }
    }

    fn clusters(&self) -> Vec<Vec<usize>> {
        self.members.iter().filter(|m| !m.is_empty()).cloned().collect()
    }

    /// Summed correlation from `i` to cluster `c` (excluding `i`), or
    /// `None` if any member is forbidden with `i`.
    fn link(&self, i: usize, c: usize) -> Option<f64> {
        let mut s = 0.0;
        for &j in &self.members[c] {
            if j == i {
                continue;
            }
            if self.w.is_forbidden(i, j) {
                return None;
            }
            s += self.w.get(i, j);
        }
        Some(s)
    }

    fn cross(&self, a: &[usize], b: &[usize]) -> Option<f64> {
        let mut s = 0.0;
        for &i in a {
            for &j in b {
                if self.w.is_forbidden(i, j) {
                    return None;
                }
                s += self.w.get(i, j);
            }
        }
        Some(s)
    }

    fn relocate(&mut self, i: usize) -> bool {
        let own = self.label[i];
        let here = self.link(i, own).expect("current clusters are feasible");
        // moving to a fresh singleton gains -here
        let mut best = (None, 0.0);
        for c in 0..self.members.len() {
            if c == own || self.members[c].is_empty() {
                continue;
            }
            if let Some(v) = self.link(i, c) {
                if v > best.1 + EPS {
                    best = (Some(c), v);
                }
            }
        }
        if best.1 <= here + EPS {
            return false;
        }
        self.members[own].retain(|&j| j != i);
        let target = match best.0 {
            Some(c) => c,
            None => {
                if let Some(e) = self.members.iter().position(|m| m.is_empty()) {
                    e
                } else {
                    self.members.push(Vec::new());
                    self.members.len() - 1
                }
            }
        };
        self.members[target].push(i);
        self.label[i] = target;
        true
    }

    fn merge_pass(&mut self) -> bool {
        let mut improved = false;
        loop {
            let k = self.members.len();
            let mut best = None;
            let mut best_v = 0.0;
            for a in 0..k {
                for b in a + 1..k {
                    if self.members[a].is_empty() || self.members[b].is_empty() {
                        continue;
                    }
                    if let Some(v) = self.cross(&self.members[a], &self.members[b]) {
                        if v > best_v + EPS {
                            best_v = v;
                            best = Some((a, b));
                        }
                    }
                }
            }
            let Some((a, b)) = best else { return improved };
            let moved = std::mem::take(&mut self.members[b]);
            for &i in &moved {
                self.label[i] = a;
            }
            self.members[a].extend(moved);
            improved = true;
        }
    }

    /// Splits a cluster in two around its most negative pair when the cut
    /// carries negative mass.
    fn split_pass(&mut self) -> bool {
        let mut improved = false;
        for c in 0..self.members.len() {
            let m = self.members[c].clone();
            if m.len() < 2 {
                continue;
            }
            let mut worst = (0, 0, f64::INFINITY);
            for (x, &i) in m.iter().enumerate() {
                for &j in &m[x + 1..] {
                    let v = self.w.get(i, j);
                    if v < worst.2 {
                        worst = (i, j, v);
                    }
                }
            }
            if worst.2 >= 0.0 {
                continue;
            }
            let (mut a, mut b) = (vec![worst.0], vec![worst.1]);
            for &i in &m {
                if i == worst.0 || i == worst.1 {
                    continue;
                }
                let sa: f64 = a.iter().map(|&j| self.w.get(i, j)).sum();
                let sb: f64 = b.iter().map(|&j| self.w.get(i, j)).sum();
                if sa >= sb {
                    a.push(i)
                } else {
                    b.push(i)
                }
            }
            let cut = self.cross(&a, &b).expect("members of one cluster are never forbidden");
            if cut < -EPS {
                for &i in &b {
                    self.label[i] = self.members.len();
                }
                self.members[c] = a;
                self.members.push(b);
                improved = true;
            }
        }
        improved
    }
}

/// Checks every triangle `x_ij + x_jk <= 1 + x_ik` of the partition's
/// incidence.
pub fn verify_transitivity(p: &Partition) -> bool {
    let n = p.len();
    incidence_is_transitive(n, |i, j| p.together(i, j))
}

/// Triangle check on an arbitrary symmetric incidence.
pub fn incidence_is_transitive(n: usize, x: impl Fn(usize, usize) -> bool) -> bool {
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                if i != j && j != k && i != k && x(i, j) && x(j, k) && !x(i, k) {
                    return false;
                }
            }
        }
    }
    true
}
