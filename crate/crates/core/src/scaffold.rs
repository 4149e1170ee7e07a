//! The frozen cluster scaffold: a one-shot partition of per-class
//! prototypes into semantic clusters, built once and never mutated during
//! training. Trainers receive it read-only; all fields are private and
//! reachable through accessors only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedding::{normalize_matrix, ClassId, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterAlgorithm {
    KMeansCosine,
    KMeansEuclidean,
    KMedoidsCosine,
}

impl ClusterAlgorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClusterAlgorithm::KMeansCosine => "kmeans-cosine",
            ClusterAlgorithm::KMeansEuclidean => "kmeans-euclidean",
            ClusterAlgorithm::KMedoidsCosine => "kmedoids-cosine",
        }
    }
}

/// Frozen partition of the class set. Cluster ids are 1-based; `mapping`
/// and `clusters` always satisfy the biconditional
/// `mapping[c] == m  <=>  c in clusters[m-1]` because the member lists are
/// derived from the mapping at construction.
#[derive(Clone, Debug, Serialize)]
#[serde(into = "ScaffoldRepr")]
pub struct ClusterScaffold {
    algorithm: ClusterAlgorithm,
    m: usize,
    seed: u64,
    mapping: BTreeMap<ClassId, u32>,
    #[serde(skip)]
    clusters: Vec<Vec<ClassId>>,
    centroids: Vec<Vec<f64>>,
}

/// Wire form: `{algorithm, m, seed, mapping, centroids}`. Loading
/// revalidates the partition invariant.
#[derive(Serialize, Deserialize)]
struct ScaffoldRepr {
    algorithm: ClusterAlgorithm,
    m: usize,
    seed: u64,
    mapping: BTreeMap<ClassId, u32>,
    centroids: Vec<Vec<f64>>,
}

impl From<ClusterScaffold> for ScaffoldRepr {
    fn from(s: ClusterScaffold) -> Self {
        ScaffoldRepr {
            algorithm: s.algorithm,
            m: s.m,
            seed: s.seed,
            mapping: s.mapping,
            centroids: s.centroids,
        }
    }
}

impl TryFrom<ScaffoldRepr> for ClusterScaffold {
    type Error = Error;

    fn try_from(r: ScaffoldRepr) -> Result<Self> {
        ClusterScaffold::from_parts(r.algorithm, r.m, r.seed, r.mapping, r.centroids)
    }
}

impl<'de> Deserialize<'de> for ClusterScaffold {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        let repr = ScaffoldRepr::deserialize(deserializer)?;
        ClusterScaffold::try_from(repr).map_err(serde::de::Error::custom)
    }
}

impl ClusterScaffold {
    fn from_parts(
        algorithm: ClusterAlgorithm,
        m: usize,
        seed: u64,
        mapping: BTreeMap<ClassId, u32>,
        centroids: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if mapping.is_empty() {
            return Err(Error::EmptyInput);
        }
        if m == 0 || m > mapping.len() {
            return Err(Error::InvalidClusterCount {
                requested: m,
                classes: mapping.len(),
            });
        }
        if centroids.len() != m {
            return Err(Error::InvalidConfig(format!(
                "expected {m} centroids, got {}",
                centroids.len()
            )));
        }
        let dim = centroids[0].len();
        if centroids.iter().any(|c| c.len() != dim) {
            return Err(Error::InvalidConfig("ragged centroid rows".into()));
        }
        let mut clusters = vec![Vec::new(); m];
        for (&class, &cid) in &mapping {
            if cid == 0 || cid as usize > m {
                return Err(Error::InvalidConfig(format!(
                    "class {class} mapped to out-of-range cluster {cid}"
                )));
            }
            clusters[cid as usize - 1].push(class);
        }
        if clusters.iter().any(|c| c.is_empty()) {
            return Err(Error::InvalidConfig(
                "partition invariant violated: empty cluster".into(),
            ));
        }
        Ok(ClusterScaffold {
            algorithm,
            m,
            seed,
            mapping,
            clusters,
            centroids,
        })
    }

    /// Builds a scaffold from an explicit class → cluster mapping. The
    /// centroids are the plain arithmetic means of the mapped prototype
    /// rows. Useful for planted partitions and the M=1 "global" baseline.
    pub fn from_mapping(
        prototypes: &EmbeddingMatrix,
        mapping: BTreeMap<ClassId, u32>,
        algorithm: ClusterAlgorithm,
        seed: u64,
    ) -> Result<Self> {
        let index = prototypes.label_index()?;
        let m = mapping.values().map(|&c| c as usize).max().unwrap_or(0);
        let mut member_rows: Vec<Vec<usize>> = vec![Vec::new(); m];
        for (&class, &cid) in &mapping {
            let row = *index.get(&class).ok_or(Error::MissingPrototype(class))?;
            if cid == 0 {
                return Err(Error::InvalidConfig(format!(
                    "class {class} mapped to cluster 0; ids are 1-based"
                )));
            }
            member_rows[cid as usize - 1].push(row);
        }
        let mut centroids = Vec::with_capacity(m);
        for rows in &member_rows {
            if rows.is_empty() {
                return Err(Error::InvalidConfig(
                    "partition invariant violated: empty cluster".into(),
                ));
            }
            centroids.push(mean_of_rows(prototypes.matrix(), rows));
        }
        ClusterScaffold::from_parts(algorithm, m, seed, mapping, centroids)
    }

    /// Single cluster holding every class: the global baseline.
    pub fn global(prototypes: &EmbeddingMatrix, seed: u64) -> Result<Self> {
        let mapping = prototypes.labels().iter().map(|&l| (l, 1u32)).collect();
        ClusterScaffold::from_mapping(prototypes, mapping, ClusterAlgorithm::KMeansCosine, seed)
    }

    pub fn algorithm(&self) -> ClusterAlgorithm {
        self.algorithm
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mapping(&self) -> &BTreeMap<ClassId, u32> {
        &self.mapping
    }

    pub fn cluster_of(&self, class: ClassId) -> Option<u32> {
        self.mapping.get(&class).copied()
    }

    /// Member classes of a 1-based cluster id, sorted ascending.
    pub fn members(&self, cluster: u32) -> &[ClassId] {
        &self.clusters[cluster as usize - 1]
    }

    /// Iterate `(cluster_id, members)` in cluster-id order.
    pub fn iter_clusters(&self) -> impl Iterator<Item = (u32, &[ClassId])> {
        self.clusters
            .iter()
            .enumerate()
            .map(|(i, c)| (i as u32 + 1, c.as_slice()))
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.mapping.keys().copied()
    }

    pub fn len_classes(&self) -> usize {
        self.mapping.len()
    }

    /// Default cluster count targeting roughly 16 classes per cluster.
    pub fn default_m(classes: usize) -> usize {
        ((classes as f64 / 16.0).round() as usize).clamp(1, classes.max(1))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Arithmetic mean of the member rows (no normalization; spherical K-means
/// renormalizes internally for assignment but reports the plain mean).
pub fn centroid(members: &Matrix) -> Result<Vec<f64>> {
    if members.rows() == 0 {
        return Err(Error::EmptyCluster);
    }
    Ok(mean_of_rows(
        members,
        &(0..members.rows()).collect::<Vec<_>>(),
    ))
}

fn mean_of_rows(m: &Matrix, rows: &[usize]) -> Vec<f64> {
    let mut mean = vec![0.0; m.cols()];
    for &r in rows {
        for (a, b) in mean.iter_mut().zip(m.row(r)) {
            *a += b;
        }
    }
    let n = rows.len() as f64;
    for a in &mut mean {
        *a /= n;
    }
    mean
}

/// Per-iteration diagnostics from a Lloyd run.
#[derive(Clone, Debug, Default)]
pub struct KmeansTrace {
    /// Objective value after each update step; non-increasing by
    /// construction.
    pub objective_per_iteration: Vec<f64>,
    pub iterations: usize,
    /// Times a zero-mean (degenerate) centroid was repaired by keeping the
    /// previous assignment centroid.
    pub degenerate_centroid_repairs: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Metric {
    Cosine,
    SqEuclidean,
}

const MAX_ITERS: usize = 100;

/// Spherical K-means: cosine-distance assignment against normalized mean
/// centroids, deterministic given the seed.
pub fn kmeans_cosine(prototypes: &EmbeddingMatrix, m: usize, seed: u64) -> Result<ClusterScaffold> {
    kmeans_cosine_traced(prototypes, m, seed).map(|(s, _)| s)
}

pub fn kmeans_cosine_traced(
    prototypes: &EmbeddingMatrix,
    m: usize,
    seed: u64,
) -> Result<(ClusterScaffold, KmeansTrace)> {
    lloyd(prototypes, m, seed, Metric::Cosine)
}

/// Plain K-means with the squared-Euclidean objective and unnormalized mean
/// centroids.
pub fn kmeans_euclidean(
    prototypes: &EmbeddingMatrix,
    m: usize,
    seed: u64,
) -> Result<ClusterScaffold> {
    kmeans_euclidean_traced(prototypes, m, seed).map(|(s, _)| s)
}

pub fn kmeans_euclidean_traced(
    prototypes: &EmbeddingMatrix,
    m: usize,
    seed: u64,
) -> Result<(ClusterScaffold, KmeansTrace)> {
    lloyd(prototypes, m, seed, Metric::SqEuclidean)
}

fn validate_inputs(prototypes: &EmbeddingMatrix, m: usize) -> Result<()> {
    if prototypes.is_empty() {
        return Err(Error::EmptyInput);
    }
    if m == 0 || m > prototypes.len() {
        return Err(Error::InvalidClusterCount {
            requested: m,
            classes: prototypes.len(),
        });
    }
    prototypes.label_index()?;
    for i in 0..prototypes.len() {
        if norm(prototypes.row(i)) <= crate::embedding::ZERO_NORM_EPS {
            return Err(Error::ZeroNormRow(i));
        }
    }
    Ok(())
}

fn lloyd(
    prototypes: &EmbeddingMatrix,
    m: usize,
    seed: u64,
    metric: Metric,
) -> Result<(ClusterScaffold, KmeansTrace)> {
    use rand::{Rng, SeedableRng};

    validate_inputs(prototypes, m)?;
    let k = prototypes.len();
    // Cosine assignment works on normalized rows; Euclidean on the raw ones.
    let points = match metric {
        Metric::Cosine => normalize_matrix(prototypes.matrix())?,
        Metric::SqEuclidean => prototypes.matrix().clone(),
    };
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        match metric {
            Metric::Cosine => 1.0 - dot(a, b).clamp(-1.0, 1.0),
            Metric::SqEuclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        }
    };

    // Greedy farthest-point seeding from the seeded PRNG: the first center
    // is random, each next one maximizes its distance to the chosen set.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut center_rows = vec![rng.random_range(0..k)];
    while center_rows.len() < m {
        let mut best = (0usize, -1.0f64);
        for i in 0..k {
            let d = center_rows
                .iter()
                .map(|&c| dist(points.row(i), points.row(c)))
                .fold(f64::INFINITY, f64::min);
            if d > best.1 {
                best = (i, d);
            }
        }
        center_rows.push(best.0);
    }
    let mut centroids: Vec<Vec<f64>> = center_rows
        .iter()
        .map(|&r| points.row(r).to_vec())
        .collect();

    let mut assignment = vec![u32::MAX; k];
    let mut trace = KmeansTrace::default();

    for iter in 0..MAX_ITERS {
        // Assignment: nearest centroid, ties to the lower cluster index.
        let mut next = vec![0u32; k];
        for i in 0..k {
            let mut best = (0usize, f64::INFINITY);
            for (c, cent) in centroids.iter().enumerate() {
                let d = dist(points.row(i), cent);
                if d < best.1 {
                    best = (c, d);
                }
            }
            next[i] = best.0 as u32;
        }

        // Empty-cluster repair: donate the point farthest from its own
        // centroid. Its new singleton distance is zero, so the objective
        // cannot increase.
        loop {
            let mut sizes = vec![0usize; m];
            for &a in &next {
                sizes[a as usize] += 1;
            }
            let Some(empty) = sizes.iter().position(|&s| s == 0) else {
                break;
            };
            let mut donor = (usize::MAX, -1.0f64);
            for i in 0..k {
                if sizes[next[i] as usize] < 2 {
                    continue;
                }
                let d = dist(points.row(i), &centroids[next[i] as usize]);
                if d > donor.1 {
                    donor = (i, d);
                }
            }
            if donor.0 == usize::MAX {
                break; // cannot repair; fewer distinct points than clusters
            }
            next[donor.0] = empty as u32;
            centroids[empty] = points.row(donor.0).to_vec();
        }

        let converged = next == assignment;
        assignment = next;

        // Update: mean of members; cosine renormalizes for the next
        // assignment round. A zero-norm mean (antipodal members) keeps the
        // previous centroid.
        for c in 0..m {
            let rows: Vec<usize> = (0..k).filter(|&i| assignment[i] == c as u32).collect();
            if rows.is_empty() {
                continue;
            }
            let mean = mean_of_rows(&points, &rows);
            match metric {
                Metric::SqEuclidean => centroids[c] = mean,
                Metric::Cosine => {
                    let n = norm(&mean);
                    if n <= crate::embedding::ZERO_NORM_EPS {
                        trace.degenerate_centroid_repairs += 1;
                    } else {
                        centroids[c] = mean.iter().map(|v| v / n).collect();
                    }
                }
            }
        }

        let objective: f64 = (0..k)
            .map(|i| dist(points.row(i), &centroids[assignment[i] as usize]))
            .sum();
        trace.objective_per_iteration.push(objective);
        trace.iterations = iter + 1;
        if converged {
            break;
        }
    }

    let scaffold = scaffold_from_assignment(
        prototypes,
        &assignment,
        m,
        seed,
        match metric {
            Metric::Cosine => ClusterAlgorithm::KMeansCosine,
            Metric::SqEuclidean => ClusterAlgorithm::KMeansEuclidean,
        },
        None,
    )?;
    Ok((scaffold, trace))
}

/// PAM-style K-medoids under cosine distance: greedy BUILD, then SWAP until
/// no exchange improves the cost. Fully deterministic; the seed is recorded
/// for provenance only.
pub fn kmedoids_cosine(
    prototypes: &EmbeddingMatrix,
    m: usize,
    seed: u64,
) -> Result<ClusterScaffold> {
    validate_inputs(prototypes, m)?;
    let k = prototypes.len();
    let points = normalize_matrix(prototypes.matrix())?;
    let mut d = Matrix::zeros(k, k);
    for i in 0..k {
        for j in (i + 1)..k {
            let v = 1.0 - dot(points.row(i), points.row(j)).clamp(-1.0, 1.0);
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    let cost_of = |meds: &[usize]| -> f64 {
        (0..k)
            .map(|i| {
                meds.iter()
                    .map(|&m_| d.get(i, m_))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    };

    // BUILD
    let mut medoids = Vec::with_capacity(m);
    let first = (0..k)
        .min_by(|&a, &b| {
            let ca: f64 = (0..k).map(|i| d.get(i, a)).sum();
            let cb: f64 = (0..k).map(|i| d.get(i, b)).sum();
            ca.partial_cmp(&cb).unwrap()
        })
        .unwrap();
    medoids.push(first);
    while medoids.len() < m {
        let mut best = (usize::MAX, f64::INFINITY);
        for cand in 0..k {
            if medoids.contains(&cand) {
                continue;
            }
            medoids.push(cand);
            let c = cost_of(&medoids);
            medoids.pop();
            if c < best.1 {
                best = (cand, c);
            }
        }
        medoids.push(best.0);
    }

    // SWAP
    let mut current = cost_of(&medoids);
    for _ in 0..1000 {
        let mut best = (usize::MAX, usize::MAX, current);
        for mi in 0..medoids.len() {
            for cand in 0..k {
                if medoids.contains(&cand) {
                    continue;
                }
                let saved = medoids[mi];
                medoids[mi] = cand;
                let c = cost_of(&medoids);
                medoids[mi] = saved;
                if c < best.2 {
                    best = (mi, cand, c);
                }
            }
        }
        if best.0 == usize::MAX {
            break;
        }
        medoids[best.0] = best.1;
        current = best.2;
    }

    let mut assignment = vec![0u32; k];
    for i in 0..k {
        let mut bi = (0usize, f64::INFINITY);
        for (c, &m_) in medoids.iter().enumerate() {
            let dd = d.get(i, m_);
            if dd < bi.1 {
                bi = (c, dd);
            }
        }
        assignment[i] = bi.0 as u32;
    }
    // every medoid belongs to its own cluster
    for (c, &m_) in medoids.iter().enumerate() {
        assignment[m_] = c as u32;
    }

    let medoid_rows: Vec<Vec<f64>> = medoids
        .iter()
        .map(|&r| prototypes.row(r).to_vec())
        .collect();
    scaffold_from_assignment(
        prototypes,
        &assignment,
        m,
        seed,
        ClusterAlgorithm::KMedoidsCosine,
        Some(medoid_rows),
    )
}

/// Relabels clusters canonically (ordered by smallest member class id) and
/// assembles the scaffold. `explicit_centroids`, when given, are reordered
/// along with the clusters; otherwise centroids are the plain means.
fn scaffold_from_assignment(
    prototypes: &EmbeddingMatrix,
    assignment: &[u32],
    m: usize,
    seed: u64,
    algorithm: ClusterAlgorithm,
    explicit_centroids: Option<Vec<Vec<f64>>>,
) -> Result<ClusterScaffold> {
    let labels = prototypes.labels();
    let mut min_label = vec![ClassId::MAX; m];
    for (i, &a) in assignment.iter().enumerate() {
        min_label[a as usize] = min_label[a as usize].min(labels[i]);
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by_key(|&c| min_label[c]);
    let mut new_id = vec![0u32; m];
    for (rank, &old) in order.iter().enumerate() {
        new_id[old] = rank as u32 + 1;
    }

    let mut mapping = BTreeMap::new();
    let mut member_rows: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, &a) in assignment.iter().enumerate() {
        let nid = new_id[a as usize];
        mapping.insert(labels[i], nid);
        member_rows[nid as usize - 1].push(i);
    }
    let centroids = match explicit_centroids {
        Some(cents) => order.iter().map(|&old| cents[old].clone()).collect(),
        None => member_rows
            .iter()
            .map(|rows| mean_of_rows(prototypes.matrix(), rows))
            .collect(),
    };
    ClusterScaffold::from_parts(algorithm, m, seed, mapping, centroids)
}

/// Mean silhouette under cosine distance `1 - cos`. Singleton points
/// contribute 0; an all-singleton partition scores 0 by convention.
pub fn cosine_silhouette(prototypes: &EmbeddingMatrix, scaffold: &ClusterScaffold) -> Result<f64> {
    if scaffold.m() < 2 {
        return Err(Error::InvalidClusterCount {
            requested: scaffold.m(),
            classes: scaffold.len_classes(),
        });
    }
    let index = prototypes.label_index()?;
    let unit = normalize_matrix(prototypes.matrix())?;
    let row_of = |class: ClassId| -> Result<usize> {
        index
            .get(&class)
            .copied()
            .ok_or(Error::MissingPrototype(class))
    };

    let mut total = 0.0;
    let mut count = 0usize;
    for (cid, members) in scaffold.iter_clusters() {
        for &class in members {
            let i = row_of(class)?;
            count += 1;
            if members.len() < 2 {
                continue; // singleton contributes 0
            }
            let mut a = 0.0;
            for &other in members {
                if other == class {
                    continue;
                }
                a += 1.0 - dot(unit.row(i), unit.row(row_of(other)?)).clamp(-1.0, 1.0);
            }
            a /= (members.len() - 1) as f64;

            let mut b = f64::INFINITY;
            for (ocid, omembers) in scaffold.iter_clusters() {
                if ocid == cid {
                    continue;
                }
                let mut mean = 0.0;
                for &other in omembers {
                    mean += 1.0 - dot(unit.row(i), unit.row(row_of(other)?)).clamp(-1.0, 1.0);
                }
                b = b.min(mean / omembers.len() as f64);
            }

            let denom = a.max(b);
            if denom > 0.0 {
                total += (b - a) / denom;
            }
        }
    }
    Ok(total / count as f64)
}

/// Picks the `(M, seed)` pair maximizing the cosine silhouette over the
/// candidate grid. Candidates are visited in ascending `(M, seed)` order
/// and replaced only on a strictly better score, so ties resolve to the
/// smaller M, then the smaller seed. A single candidate is returned
/// unconditionally.
pub fn select_scaffold(
    prototypes: &EmbeddingMatrix,
    candidate_ms: &[usize],
    algorithm: ClusterAlgorithm,
    seeds: &[u64],
) -> Result<ClusterScaffold> {
    if candidate_ms.is_empty() || seeds.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut ms = candidate_ms.to_vec();
    ms.sort_unstable();
    ms.dedup();
    let mut ss = seeds.to_vec();
    ss.sort_unstable();
    ss.dedup();

    let build = |m: usize, seed: u64| -> Result<ClusterScaffold> {
        match algorithm {
            ClusterAlgorithm::KMeansCosine => kmeans_cosine(prototypes, m, seed),
            ClusterAlgorithm::KMeansEuclidean => kmeans_euclidean(prototypes, m, seed),
            ClusterAlgorithm::KMedoidsCosine => kmedoids_cosine(prototypes, m, seed),
        }
    };

    if ms.len() == 1 && ss.len() == 1 {
        return build(ms[0], ss[0]);
    }

    let mut best: Option<(f64, ClusterScaffold)> = None;
    for &m in &ms {
        for &seed in &ss {
            let scaffold = build(m, seed)?;
            // silhouette needs at least two clusters; rank M=1 below any
            // real score
            let score = if m >= 2 {
                cosine_silhouette(prototypes, &scaffold)?
            } else {
                f64::NEG_INFINITY
            };
            match &best {
                Some((s, _)) if score <= s + 1e-12 => {}
                _ => best = Some((score, scaffold)),
            }
        }
    }
    Ok(best.expect("non-empty candidate grid").1)
}
