use std::collections::BTreeMap;

use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DistanceKind, Matrix, TripletBatch};
use crate::error::{invalid, Result};
use crate::model::EmbeddingSet;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Pool {
    /// The identities nearest to the owner, nearest first.
    pub hard: Vec<u32>,
    pub random: Vec<u32>,
}

/// Per-identity hard and random identity pools.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IdentityPools {
    pools: BTreeMap<u32, Pool>,
}

impl IdentityPools {
    pub fn get(&self, identity: u32) -> Option<&Pool> {
        self.pools.get(&identity)
    }

    pub fn from_pools(pools: BTreeMap<u32, Pool>) -> Self {
        Self { pools }
    }

    pub fn len(&self) -> usize {
        self.pools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pools.is_empty()
    }
}

fn centroids(set: &EmbeddingSet) -> Result<BTreeMap<u32, Vec<f64>>> {
    let groups = set.by_label()?;
    Ok(groups
        .into_iter()
        .map(|(label, rows)| {
            let mut c = vec![0f64; set.dim()];
            for &r in &rows {
                for (acc, &v) in c.iter_mut().zip(set.row(r)) {
                    *acc += v as f64;
                }
            }
            let n = rows.len() as f64;
            (label, c.into_iter().map(|v| v / n).collect())
        })
        .collect())
}

/// Hard pool = the `h` identities whose centroids are nearest (euclidean)
/// to the owner's centroid, ties broken by ascending label; the random pool
/// holds every other identity.
pub fn build_identity_pools(embeddings: &EmbeddingSet, h: usize) -> Result<IdentityPools> {
    let cents = centroids(embeddings)?;
    if cents.len() < 2 {
        return Err(invalid("identity pools need at least two identities"));
    }
    let mut pools = BTreeMap::new();
    for (&owner, c) in &cents {
        let mut others: Vec<(f64, u32)> =
            cents.iter().filter(|(&l, _)| l != owner).map(|(&l, o)| (DistanceKind::Euclidean.eval(c, o), l)).collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let take = h.min(others.len());
        let hard = others[..take].iter().map(|o| o.1).collect();
        let mut random: Vec<u32> = others[take..].iter().map(|o| o.1).collect();
        random.sort_unstable();
        pools.insert(owner, Pool { hard, random });
    }
    Ok(IdentityPools { pools })
}

/// Row indices and labels of one PK batch; the anchor identity's rows come
/// first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PkSample {
    pub rows: Vec<usize>,
    pub labels: Vec<u32>,
}

fn pick_k(rng: &mut ChaCha8Rng, rows: &[usize], k: usize) -> Vec<usize> {
    if rows.len() >= k {
        index::sample(rng, rows.len(), k).into_iter().map(|i| rows[i]).collect()
    } else {
        (0..k).map(|_| rows[rng.random_range(0..rows.len())]).collect()
    }
}

fn take_random(rng: &mut ChaCha8Rng, pool: &mut Vec<u32>) -> u32 {
    let i = rng.random_range(0..pool.len());
    pool.remove(i)
}

/// Samples `p` identities (the anchor's plus `p - 1` others) with `k` rows
/// each. Without pools the others are uniform without replacement; with
/// pools each slot flips a fair coin between the hard and random pool,
/// falling back to the other pool when the chosen one is exhausted.
/// Identities with fewer than `k` rows are resampled with replacement.
pub fn sample_pk_indices(
    by_label: &BTreeMap<u32, Vec<usize>>,
    anchor_identity: u32,
    p: usize,
    k: usize,
    pools: Option<&IdentityPools>,
    seed: u64,
) -> Result<PkSample> {
    if p == 0 || k == 0 {
        return Err(invalid("P and K must be positive"));
    }
    if by_label.len() < p {
        return Err(invalid(format!("{} identities available, P = {p}", by_label.len())));
    }
    if by_label.get(&anchor_identity).is_none_or(Vec::is_empty) {
        return Err(invalid(format!("anchor identity {anchor_identity} has no samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![anchor_identity];
    match pools.and_then(|pl| pl.get(anchor_identity)) {
        None => {
            let others: Vec<u32> = by_label.keys().copied().filter(|&l| l != anchor_identity).collect();
            chosen.extend(others.choose_multiple(&mut rng, p - 1).copied());
        }
        Some(pool) => {
            let mut hard: Vec<u32> = pool.hard.iter().copied().filter(|l| by_label.contains_key(l)).collect();
            let mut random: Vec<u32> = pool.random.iter().copied().filter(|l| by_label.contains_key(l)).collect();
            for _ in 1..p {
                let want_hard = rng.random_bool(0.5);
                let from_hard = match (hard.is_empty(), random.is_empty()) {
                    (true, true) => return Err(invalid("identity pools exhausted before P identities")),
                    (false, true) => true,
                    (true, false) => false,
                    (false, false) => want_hard,
                };
                let l = if from_hard { take_random(&mut rng, &mut hard) } else { take_random(&mut rng, &mut random) };
                chosen.push(l);
            }
        }
    }
    let mut rows = Vec::with_capacity(p * k);
    let mut labels = Vec::with_capacity(p * k);
    for l in chosen {
        let r = pick_k(&mut rng, &by_label[&l], k);
        rows.extend(r);
        labels.extend(std::iter::repeat_n(l, k));
    }
    Ok(PkSample { rows, labels })
}

/// PK batch over a labeled embedding set; the anchor is the first row of
/// the anchor identity.
pub fn sample_pk_batch(
    set: &EmbeddingSet,
    anchor_identity: u32,
    p: usize,
    k: usize,
    pools: Option<&IdentityPools>,
    seed: u64,
) -> Result<TripletBatch> {
    let by_label = set.by_label()?;
    let s = sample_pk_indices(&by_label, anchor_identity, p, k, pools, seed)?;
    let data = s.rows.iter().flat_map(|&r| set.row(r).iter().map(|&v| v as f64)).collect();
    TripletBatch::new(Matrix::from_vec(s.rows.len(), set.dim(), data)?, s.labels, 0)
}
