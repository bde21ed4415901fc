//! Embedding stabilization: spatial grouping, EMA targets, and the
//! clustering / stacking consistency losses.
//!
//! Candidate embeddings are grouped by single-link connected components of
//! the "center distance below delta" relation, so the groups form a
//! deterministic partition (the minimal transitive closure of the pairwise
//! relation). Per-group means, a global mean, and per-group stacked means
//! are tracked as EMA references keyed by the quantized group centroid;
//! the losses pull raw embeddings toward those references while the
//! references themselves are constants under differentiation. Gradients
//! therefore flow only through the embeddings, never through the EMA
//! targets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A feature vector with the pixel location it was extracted from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub center: (f64, f64),
}

impl Embedding {
    pub fn new(vector: Vec<f64>, center: (f64, f64)) -> Self {
        Self { vector, center }
    }
}

/// One spatial group: indices into the embedding list, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingGroup {
    pub members: Vec<usize>,
}

impl EmbeddingGroup {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Mean of the member centers.
    pub fn centroid(&self, embeddings: &[Embedding]) -> (f64, f64) {
        let n = self.members.len() as f64;
        let (mut cx, mut cy) = (0.0, 0.0);
        for &i in &self.members {
            cx += embeddings[i].center.0;
            cy += embeddings[i].center.1;
        }
        (cx / n, cy / n)
    }

    /// Mean of the member vectors.
    pub fn mean_vector(&self, embeddings: &[Embedding]) -> Vec<f64> {
        let dim = embeddings[self.members[0]].vector.len();
        let mut mean = vec![0.0; dim];
        for &i in &self.members {
            for (m, v) in mean.iter_mut().zip(&embeddings[i].vector) {
                *m += v;
            }
        }
        let n = self.members.len() as f64;
        for m in &mut mean {
            *m /= n;
        }
        mean
    }
}

/// Stable identity of a group across iterations: the integer cell of its
/// centroid on a grid of pitch `delta`. Spatially static scenes keep
/// hitting the same key, which is what lets `mu_j` and `e_stack` persist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey(pub i64, pub i64);

impl GroupKey {
    pub fn from_centroid(centroid: (f64, f64), delta: f64) -> Self {
        GroupKey(
            (centroid.0 / delta).floor() as i64,
            (centroid.1 / delta).floor() as i64,
        )
    }
}

/// Single-link connected components of the relation
/// `dist(center_a, center_b) < delta`.
///
/// Groups are returned ordered by their smallest member index, members
/// sorted ascending, so the output is a deterministic partition of the
/// input.
pub fn group_embeddings(embeddings: &[Embedding], delta: f64) -> Result<Vec<EmbeddingGroup>> {
    if delta <= 0.0 {
        return Err(Error::Argument(format!("delta {delta} must be positive")));
    }
    let n = embeddings.len();
    let mut dsu = DisjointSet::new(n);
    let delta_sq = delta * delta;
    for a in 0..n {
        for b in (a + 1)..n {
            let (ax, ay) = embeddings[a].center;
            let (bx, by) = embeddings[b].center;
            let (dx, dy) = (ax - bx, ay - by);
            if dx * dx + dy * dy < delta_sq {
                dsu.union(a, b);
            }
        }
    }
    let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = dsu.find(i);
        by_root.entry(root).or_default().push(i);
    }
    let mut groups: Vec<EmbeddingGroup> = by_root
        .into_values()
        .map(|members| EmbeddingGroup { members })
        .collect();
    groups.sort_by_key(|g| g.members[0]);
    Ok(groups)
}

struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut node: usize) -> usize {
        let mut root = node;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[node] != node {
            let next = self.parent[node];
            self.parent[node] = root;
            node = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut a, mut b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        if self.rank[a] < self.rank[b] {
            std::mem::swap(&mut a, &mut b);
        }
        self.parent[b] = a;
        if self.rank[a] == self.rank[b] {
            self.rank[a] += 1;
        }
    }
}

/// Persistent EMA references for embedding stabilization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilizerState {
    /// Per-group EMA means `mu_j`, keyed by quantized centroid cell.
    #[serde(with = "map_as_pairs")]
    pub cluster_means: BTreeMap<GroupKey, Vec<f64>>,
    /// Global EMA mean over all embeddings, `None` until first touched.
    pub global_mean: Option<Vec<f64>>,
    /// Per-group stacked EMA means `e_stack`.
    #[serde(with = "map_as_pairs")]
    pub stacks: BTreeMap<GroupKey, Vec<f64>>,
    /// EMA smoothing factor, in `[0.01, 0.1]`.
    pub rho: f64,
    /// Cluster-vs-global balance in the clustering loss, in `[0.5, 2.0]`.
    pub lambda: f64,
    /// Spatial proximity threshold in pixels, in `[20, 100]`.
    pub delta: f64,
}

impl StabilizerState {
    pub fn new(rho: f64, lambda: f64, delta: f64) -> Result<Self> {
        for (name, v, lo, hi) in [
            ("rho", rho, 0.01, 0.1),
            ("lambda", lambda, 0.5, 2.0),
            ("delta", delta, 20.0, 100.0),
        ] {
            if !(lo..=hi).contains(&v) {
                return Err(Error::Argument(format!("{name} {v} outside [{lo}, {hi}]")));
            }
        }
        Self::new_lenient(rho, lambda, delta)
    }

    /// Range-unchecked variant for explicitly-requested experiments;
    /// still requires positive `rho <= 1`, `lambda >= 0`, `delta > 0`.
    pub fn new_lenient(rho: f64, lambda: f64, delta: f64) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::Argument(format!("rho {rho} outside (0, 1]")));
        }
        if lambda < 0.0 || delta <= 0.0 {
            return Err(Error::Argument(format!(
                "lambda {lambda} must be >= 0 and delta {delta} > 0"
            )));
        }
        Ok(Self {
            cluster_means: BTreeMap::new(),
            global_mean: None,
            stacks: BTreeMap::new(),
            rho,
            lambda,
            delta,
        })
    }

    /// Groups the embeddings with this state's `delta`.
    pub fn group(&self, embeddings: &[Embedding]) -> Vec<EmbeddingGroup> {
        group_embeddings(embeddings, self.delta).expect("delta validated at construction")
    }

    fn key_of(&self, group: &EmbeddingGroup, embeddings: &[Embedding]) -> GroupKey {
        GroupKey::from_centroid(group.centroid(embeddings), self.delta)
    }

    /// EMA step for every group's cluster mean; unseen keys seed with the
    /// current group mean.
    pub fn update_cluster_means(&mut self, groups: &[EmbeddingGroup], embeddings: &[Embedding]) {
        for group in groups {
            let key = self.key_of(group, embeddings);
            let mean = group.mean_vector(embeddings);
            ema_vec_entry(&mut self.cluster_means, key, &mean, self.rho);
        }
    }

    /// EMA step for the global mean over all embeddings of this iteration.
    /// An empty list leaves the state untouched.
    pub fn update_global_mean(&mut self, embeddings: &[Embedding]) {
        if embeddings.is_empty() {
            return;
        }
        let dim = embeddings[0].vector.len();
        let mut mean = vec![0.0; dim];
        for e in embeddings {
            for (m, v) in mean.iter_mut().zip(&e.vector) {
                *m += v;
            }
        }
        let n = embeddings.len() as f64;
        for m in &mut mean {
            *m /= n;
        }
        match &mut self.global_mean {
            None => self.global_mean = Some(mean),
            Some(g) => ema_vec(g, &mean, self.rho),
        }
    }

    /// EMA step for every group's stacked mean; same seeding rule as the
    /// cluster means.
    pub fn update_stacks(&mut self, groups: &[EmbeddingGroup], embeddings: &[Embedding]) {
        for group in groups {
            let key = self.key_of(group, embeddings);
            let mean = group.mean_vector(embeddings);
            ema_vec_entry(&mut self.stacks, key, &mean, self.rho);
        }
    }

    /// Clustering consistency loss and its gradient per embedding:
    ///
    /// ```text
    /// L = (1/J) * sum_j [ (1/|G_j|) * sum_{e in G_j} ||e - mu_j||^2
    ///                     + lambda * ||mu_j - mu_global||^2 ]
    /// dL/de = (2 / (J * |G_j|)) * (e - mu_j)    for e in G_j
    /// ```
    ///
    /// `mu_j` and `mu_global` are constants here; call the update methods
    /// first. Missing keys are a state error.
    pub fn cluster_loss(
        &self,
        groups: &[EmbeddingGroup],
        embeddings: &[Embedding],
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        if groups.is_empty() {
            return Ok((0.0, grads_like(embeddings)));
        }
        let global = self
            .global_mean
            .as_ref()
            .ok_or_else(|| Error::State("global mean not initialized".into()))?;
        let mut grads = grads_like(embeddings);
        let j_count = groups.len() as f64;
        let mut loss = 0.0;
        for group in groups {
            let key = self.key_of(group, embeddings);
            let mu = self.cluster_means.get(&key).ok_or_else(|| {
                Error::State(format!("no cluster mean for group key {key:?}"))
            })?;
            let size = group.len() as f64;
            for &i in &group.members {
                let e = &embeddings[i].vector;
                loss += sq_dist(e, mu) / size;
                let scale = 2.0 / (j_count * size);
                for ((g, ev), mv) in grads[i].iter_mut().zip(e).zip(mu) {
                    *g += scale * (ev - mv);
                }
            }
            loss += self.lambda * sq_dist(mu, global);
        }
        Ok((loss / j_count, grads))
    }

    /// Stacking consistency loss: per group the mean squared distance to
    /// that group's stacked mean, averaged over groups (the stacked means
    /// are constants under the gradient).
    pub fn stack_loss(
        &self,
        groups: &[EmbeddingGroup],
        embeddings: &[Embedding],
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        if groups.is_empty() {
            return Ok((0.0, grads_like(embeddings)));
        }
        let mut grads = grads_like(embeddings);
        let j_count = groups.len() as f64;
        let mut loss = 0.0;
        for group in groups {
            let key = self.key_of(group, embeddings);
            let stack = self
                .stacks
                .get(&key)
                .ok_or_else(|| Error::State(format!("no stack for group key {key:?}")))?;
            let size = group.len() as f64;
            for &i in &group.members {
                let e = &embeddings[i].vector;
                loss += sq_dist(e, stack) / size;
                let scale = 2.0 / (j_count * size);
                for ((g, ev), sv) in grads[i].iter_mut().zip(e).zip(stack) {
                    *g += scale * (ev - sv);
                }
            }
        }
        Ok((loss / j_count, grads))
    }
}

fn grads_like(embeddings: &[Embedding]) -> Vec<Vec<f64>> {
    embeddings
        .iter()
        .map(|e| vec![0.0; e.vector.len()])
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn ema_vec(prev: &mut [f64], observed: &[f64], rho: f64) {
    for (p, o) in prev.iter_mut().zip(observed) {
        *p += rho * (o - *p);
    }
}

fn ema_vec_entry(map: &mut BTreeMap<GroupKey, Vec<f64>>, key: GroupKey, mean: &[f64], rho: f64) {
    match map.get_mut(&key) {
        None => {
            map.insert(key, mean.to_vec());
        }
        Some(prev) => ema_vec(prev, mean, rho),
    }
}

/// JSON has no non-string map keys, so the state's keyed maps serialize
/// as ordered `(key, vector)` pair lists.
mod map_as_pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::GroupKey;

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<GroupKey, Vec<f64>>,
        serializer: S,
    ) -> Result<S::Ok, S::Error> {
        map.iter().collect::<Vec<_>>().serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        deserializer: D,
    ) -> Result<BTreeMap<GroupKey, Vec<f64>>, D::Error> {
        let pairs: Vec<(GroupKey, Vec<f64>)> = Vec::deserialize(deserializer)?;
        Ok(pairs.into_iter().collect())
    }
}
