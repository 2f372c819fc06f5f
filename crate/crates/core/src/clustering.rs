//! Bottom-up grouping of proposals.
//!
//! Every proposal starts as its own cluster; the two clusters with the
//! smallest complete-linkage distance are merged until the stop rule fires.
//! Linkage values are maintained with the Lance–Williams update for complete
//! linkage, `d(A ∪ B, C) = max(d(A, C), d(B, C))`, and candidate pairs live
//! in a binary heap with lazy invalidation.
//!
//! Clusters are identified by their smallest member index. When several pairs
//! share the minimal linkage distance, the pair with the smaller
//! `(min id, max id)` tuple merges first, which makes the schedule fully
//! deterministic.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::common::{check_dim, dot, l2_norm, BoundingBox, Proposal};
use crate::error::{Error, Result};

/// Norm below which a vector has no usable direction.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    Cosine,
    #[serde(rename = "iou")]
    SpatialIou,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Merge while the complete-linkage distance is at most `tau`.
    RadiusThreshold(f64),
    /// Merge until exactly `k` clusters remain (or nothing is left to merge).
    FixedCount(usize),
}

impl StopRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StopRule::RadiusThreshold(tau) if !(tau > 0.0 && tau.is_finite()) => Err(
                Error::Config(format!("cluster radius must be positive, got {tau}")),
            ),
            StopRule::FixedCount(0) => Err(Error::Config("fixed cluster count must be >= 1".into())),
            _ => Ok(()),
        }
    }
}

/// Which grouping granularity feeds the instance-level alignment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupingMode {
    /// One mean embedding per (pseudo-)class.
    #[serde(rename = "sg")]
    SingleGroup,
    /// Agglomerative groups within each (pseudo-)class.
    #[serde(rename = "mg")]
    MultiGroup,
    /// Agglomerative groups over all proposals, labels ignored.
    #[serde(rename = "mg_ca")]
    ClassAgnostic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    /// Id (smallest member) of the surviving cluster.
    pub a: usize,
    /// Id of the cluster absorbed into `a`.
    pub b: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Member indices, each list sorted; lists ordered by their first member.
    pub clusters: Vec<Vec<usize>>,
    pub merge_trace: Vec<Merge>,
    pub n_items: usize,
}

impl ClusterAssignment {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Cluster index of every item.
    pub fn labels(&self) -> Vec<usize> {
        let mut labels = vec![usize::MAX; self.n_items];
        for (c, members) in self.clusters.iter().enumerate() {
            for &m in members {
                labels[m] = c;
            }
        }
        labels
    }

    /// Verify the clusters partition `0..n_items`.
    pub fn check_partition(&self) -> Result<()> {
        let mut seen = vec![false; self.n_items];
        for members in &self.clusters {
            if members.is_empty() {
                return Err(self.mismatch("empty cluster".into()));
            }
            for &m in members {
                if m >= self.n_items {
                    return Err(self.mismatch(format!("member {m} out of range")));
                }
                if std::mem::replace(&mut seen[m], true) {
                    return Err(self.mismatch(format!("member {m} appears twice")));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(self.mismatch(format!("member {missing} unassigned")));
        }
        Ok(())
    }

    fn mismatch(&self, reason: String) -> Error {
        Error::PartitionMismatch {
            n: self.n_items,
            reason,
        }
    }
}

/// Mean-pooled representative of one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEmbedding {
    pub vector: Vec<f64>,
    pub member_count: usize,
    pub class_tag: Option<usize>,
    /// Indices of the pooled proposals in the input list.
    pub members: Vec<usize>,
}

/// Cosine distance `1 - <a, b> / (|a| |b|)`, clamped to `[0, 2]`. Vectors with
/// norm below [`ZERO_NORM`] sit at distance 1 from everything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    Ok(cosine_from_parts(dot(a, b), l2_norm(a), l2_norm(b)))
}

fn cosine_from_parts(dot: f64, norm_a: f64, norm_b: f64) -> f64 {
    if norm_a < ZERO_NORM || norm_b < ZERO_NORM {
        return 1.0;
    }
    (1.0 - dot / (norm_a * norm_b)).clamp(0.0, 2.0)
}

/// `1 - IoU`. Zero-area boxes overlap nothing.
pub fn iou_distance(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (area_a, area_b) = (a.area(), b.area());
    if area_a <= 0.0 || area_b <= 0.0 {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    let union = area_a + area_b - inter;
    (1.0 - inter / union).clamp(0.0, 1.0)
}

/// Dense symmetric distance matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = f(i, j);
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        DistanceMatrix { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

/// Pairwise distances between proposals under `metric`.
pub fn pairwise_distances(proposals: &[Proposal], metric: DistanceMetric) -> Result<DistanceMatrix> {
    let n = proposals.len();
    match metric {
        DistanceMetric::Cosine => {
            let dim = proposals.first().map_or(0, Proposal::dim);
            for p in proposals {
                check_dim(dim, p.dim())?;
            }
            let norms: Vec<f64> = proposals.iter().map(|p| l2_norm(&p.feature)).collect();
            Ok(DistanceMatrix::from_fn(n, |i, j| {
                cosine_from_parts(
                    dot(&proposals[i].feature, &proposals[j].feature),
                    norms[i],
                    norms[j],
                )
            }))
        }
        DistanceMetric::SpatialIou => {
            let boxes = proposals
                .iter()
                .enumerate()
                .map(|(index, p)| p.bbox.ok_or(Error::MissingBox { index }))
                .collect::<Result<Vec<_>>>()?;
            Ok(DistanceMatrix::from_fn(n, |i, j| iou_distance(&boxes[i], &boxes[j])))
        }
    }
}

/// Largest pairwise distance between members of `a` and members of `b`.
pub fn complete_linkage(a: &[usize], b: &[usize], pairwise: &DistanceMatrix) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("linkage of an empty cluster"));
    }
    let mut max = f64::NEG_INFINITY;
    for &i in a {
        for &j in b {
            max = max.max(pairwise.get(i, j));
        }
    }
    Ok(max)
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    distance: f64,
    lo: usize,
    hi: usize,
    lo_version: u32,
    hi_version: u32,
}

impl Candidate {
    fn key(&self) -> (f64, usize, usize) {
        (self.distance, self.lo, self.hi)
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    // Reversed so the max-heap pops the smallest (distance, lo, hi).
    fn cmp(&self, other: &Self) -> Ordering {
        let (da, la, ha) = self.key();
        let (db, lb, hb) = other.key();
        db.total_cmp(&da).then(lb.cmp(&la)).then(hb.cmp(&ha))
    }
}

/// Complete-linkage agglomeration over a precomputed distance matrix.
pub fn agglomerate_matrix(pairwise: &DistanceMatrix, stop: StopRule) -> Result<ClusterAssignment> {
    stop.validate()?;
    let n = pairwise.len();
    if n == 0 {
        return Err(Error::EmptyInput("agglomerate needs at least one item"));
    }

    // Working linkage matrix, indexed by cluster id (smallest member).
    let mut link = pairwise.data.clone();
    let mut active = vec![true; n];
    let mut version = vec![0u32; n];
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut heap = BinaryHeap::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            heap.push(Candidate {
                distance: link[i * n + j],
                lo: i,
                hi: j,
                lo_version: 0,
                hi_version: 0,
            });
        }
    }

    let mut n_clusters = n;
    let mut merge_trace = Vec::new();
    while n_clusters > 1 {
        if let StopRule::FixedCount(k) = stop {
            if n_clusters <= k {
                break;
            }
        }
        let Some(best) = heap.pop() else { break };
        if !active[best.lo]
            || !active[best.hi]
            || version[best.lo] != best.lo_version
            || version[best.hi] != best.hi_version
        {
            continue;
        }
        if let StopRule::RadiusThreshold(tau) = stop {
            if best.distance > tau {
                break;
            }
        }

        let (keep, gone) = (best.lo, best.hi);
        active[gone] = false;
        version[keep] += 1;
        let absorbed = std::mem::take(&mut members[gone]);
        members[keep].extend(absorbed);
        merge_trace.push(Merge {
            a: keep,
            b: gone,
            distance: best.distance,
        });
        n_clusters -= 1;

        for other in (0..n).filter(|&o| active[o] && o != keep) {
            let d = link[keep * n + other].max(link[gone * n + other]);
            link[keep * n + other] = d;
            link[other * n + keep] = d;
            let (lo, hi) = if keep < other { (keep, other) } else { (other, keep) };
            heap.push(Candidate {
                distance: d,
                lo,
                hi,
                lo_version: version[lo],
                hi_version: version[hi],
            });
        }
    }

    let clusters = members
        .into_iter()
        .zip(active)
        .filter_map(|(mut m, a)| {
            a.then(|| {
                m.sort_unstable();
                m
            })
        })
        .collect();
    Ok(ClusterAssignment {
        clusters,
        merge_trace,
        n_items: n,
    })
}

/// Group `proposals` by complete-linkage agglomeration under `metric`.
pub fn agglomerate(proposals: &[Proposal], metric: DistanceMetric, stop: StopRule) -> Result<ClusterAssignment> {
    if proposals.is_empty() {
        return Err(Error::EmptyInput("agglomerate needs at least one proposal"));
    }
    let pairwise = pairwise_distances(proposals, metric)?;
    agglomerate_matrix(&pairwise, stop)
}

fn mean_of(proposals: &[Proposal], members: &[usize]) -> Vec<f64> {
    let dim = proposals[members[0]].dim();
    let mut sum = vec![0.0; dim];
    for &m in members {
        for (s, x) in sum.iter_mut().zip(&proposals[m].feature) {
            *s += x;
        }
    }
    let count = members.len() as f64;
    sum.iter_mut().for_each(|s| *s /= count);
    sum
}

/// Mean-pool each cluster into one embedding, ordered by smallest member.
pub fn group_embeddings(proposals: &[Proposal], assignment: &ClusterAssignment) -> Result<Vec<GroupEmbedding>> {
    if assignment.n_items != proposals.len() {
        return Err(Error::PartitionMismatch {
            n: proposals.len(),
            reason: format!("assignment covers {} items", assignment.n_items),
        });
    }
    assignment.check_partition()?;
    let dim = proposals.first().map_or(0, Proposal::dim);
    for p in proposals {
        check_dim(dim, p.dim())?;
    }
    let mut groups: Vec<GroupEmbedding> = assignment
        .clusters
        .iter()
        .map(|members| {
            let mut members = members.clone();
            members.sort_unstable();
            GroupEmbedding {
                vector: mean_of(proposals, &members),
                member_count: members.len(),
                class_tag: None,
                members,
            }
        })
        .collect();
    groups.sort_by_key(|g| g.members[0]);
    Ok(groups)
}

fn partition_by_label(proposals: &[Proposal]) -> Result<BTreeMap<usize, Vec<usize>>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (index, p) in proposals.iter().enumerate() {
        let label = p.pseudo_label.ok_or(Error::MissingLabel { index })?;
        by_class.entry(label).or_default().push(index);
    }
    Ok(by_class)
}

/// Build group embeddings at the requested granularity.
///
/// Class-aware modes read `pseudo_label` from every proposal. Multi-group
/// modes run the agglomeration separately inside each label partition.
/// Output is ordered by smallest member index.
pub fn cluster_by_mode(
    proposals: &[Proposal],
    mode: GroupingMode,
    metric: DistanceMetric,
    stop: StopRule,
) -> Result<Vec<GroupEmbedding>> {
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let mut groups = match mode {
        GroupingMode::ClassAgnostic => {
            let assignment = agglomerate(proposals, metric, stop)?;
            group_embeddings(proposals, &assignment)?
        }
        GroupingMode::SingleGroup => partition_by_label(proposals)?
            .into_iter()
            .map(|(class, members)| GroupEmbedding {
                vector: mean_of(proposals, &members),
                member_count: members.len(),
                class_tag: Some(class),
                members,
            })
            .collect(),
        GroupingMode::MultiGroup => {
            // Validate the metric against the whole set before splitting.
            if metric == DistanceMetric::SpatialIou {
                if let Some(index) = proposals.iter().position(|p| p.bbox.is_none()) {
                    return Err(Error::MissingBox { index });
                }
            }
            let mut out = Vec::new();
            for (class, members) in partition_by_label(proposals)? {
                let subset: Vec<Proposal> = members.iter().map(|&i| proposals[i].clone()).collect();
                let assignment = agglomerate(&subset, metric, stop)?;
                for cluster in &assignment.clusters {
                    let global: Vec<usize> = cluster.iter().map(|&i| members[i]).collect();
                    out.push(GroupEmbedding {
                        vector: mean_of(proposals, &global),
                        member_count: global.len(),
                        class_tag: Some(class),
                        members: global,
                    });
                }
            }
            out
        }
    };
    groups.sort_by_key(|g| g.members[0]);
    Ok(groups)
}
