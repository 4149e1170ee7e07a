//! Controlled long-tailed classification tasks with planted cluster
//! structure: ground-truth directions grouped around near-orthogonal
//! cluster centers, frozen prototypes (directions plus noise), per-class
//! sample counts following an exponential decay at imbalance ratio tau, and
//! a stratified base/new class split.
//!
//! Generation is a pure function of the parameter set; tasks are immutable
//! after creation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::{ClassId, EmbeddingMatrix, FeaturesByClass};
use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskParams {
    pub m_planted: usize,
    pub classes_per_cluster: usize,
    pub dim: usize,
    /// Angle between a class direction and its cluster center, degrees.
    pub intra_cluster_angle_deg: f64,
    /// Std-dev of the isotropic Gaussian added to feature samples before
    /// renormalization.
    pub feature_noise: f64,
    /// Std-dev of the noise separating frozen prototypes from the
    /// ground-truth directions. Zero makes the prototypes exact.
    pub prototype_noise: f64,
    /// Fraction of the intra-cluster angle at which frozen prototypes sit:
    /// 1.0 puts them on the class directions, smaller values pull them
    /// toward the cluster center. Related classes' text embeddings bunch
    /// much tighter than their visual features do, and that compression is
    /// what the separation loss has to undo.
    pub text_compression: f64,
    /// Imbalance ratio: smallest over largest training-class size.
    pub tau: f64,
    /// Largest per-class training count.
    pub n_max: usize,
    /// Balanced test-set size per class, for base and new classes alike.
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams {
            m_planted: 4,
            classes_per_cluster: 8,
            dim: 32,
            intra_cluster_angle_deg: 32.0,
            feature_noise: 0.2,
            prototype_noise: 0.01,
            text_compression: 0.3,
            tau: 0.06,
            n_max: 16,
            test_per_class: 32,
            seed: 17,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub params: TaskParams,
    /// Ground-truth unit directions, one row per class.
    pub directions: EmbeddingMatrix,
    /// Frozen prototypes: direction + noise, renormalized.
    pub frozen_prototypes: EmbeddingMatrix,
    /// Long-tailed training samples, base classes only.
    pub train_features: FeaturesByClass,
    /// Balanced test samples for every class.
    pub test_features: FeaturesByClass,
    /// Training count per base class.
    pub counts: BTreeMap<ClassId, usize>,
    pub tau: f64,
    pub n_max: usize,
    pub base_classes: Vec<ClassId>,
    pub new_classes: Vec<ClassId>,
    /// Ground-truth cluster of each class, 1-based.
    pub planted_clusters: BTreeMap<ClassId, u32>,
    pub seed: u64,
}

/// Per-class training counts under exponential decay:
/// `n_k = max(1, round(n_max * tau^{(k-1)/(K-1)}))`, returned descending.
/// The realized min/max ratio sits within `1/n_max` of tau.
pub fn sample_counts(k: usize, tau: f64, n_max: usize) -> Result<Vec<usize>> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidImbalance(format!(
            "tau must be in (0, 1], got {tau}"
        )));
    }
    if n_max < 1 {
        return Err(Error::InvalidImbalance(format!(
            "n_max must be >= 1, got {n_max}"
        )));
    }
    if k < 2 {
        return Err(Error::InvalidImbalance(format!(
            "need at least 2 classes, got {k}"
        )));
    }
    let mut counts = Vec::with_capacity(k);
    for i in 0..k {
        let exponent = i as f64 / (k - 1) as f64;
        let n = (n_max as f64 * tau.powf(exponent)).round().max(1.0) as usize;
        counts.push(n);
    }
    counts.sort_unstable_by(|a, b| b.cmp(a));
    Ok(counts)
}

/// Stratified base/new split: every planted cluster contributes classes to
/// both sides where possible, odd leftovers alternate so the global split
/// stays even (base receives the extra class when K is odd). Deterministic
/// given the seed.
pub fn base_new_split(
    planted_clusters: &BTreeMap<ClassId, u32>,
    seed: u64,
) -> (Vec<ClassId>, Vec<ClassId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut by_cluster: BTreeMap<u32, Vec<ClassId>> = BTreeMap::new();
    for (&class, &cluster) in planted_clusters {
        by_cluster.entry(cluster).or_default().push(class);
    }
    let mut base = Vec::new();
    let mut new = Vec::new();
    for members in by_cluster.values() {
        let mut order = members.clone();
        // Fisher-Yates with the shared stream
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let half = order.len() / 2;
        let extra = order.len() % 2;
        // larger half goes to whichever side currently has fewer classes
        let base_take = if extra == 1 && base.len() > new.len() {
            half
        } else {
            half + extra
        };
        base.extend_from_slice(&order[..base_take]);
        new.extend_from_slice(&order[base_take..]);
    }
    base.sort_unstable();
    new.sort_unstable();
    (base, new)
}

fn sample_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Unit vector orthogonal to `against`, drawn from the stream. Redraws on
/// (measure-zero) degenerate samples.
fn orthogonal_unit(rng: &mut ChaCha8Rng, against: &[f64], d: usize) -> Vec<f64> {
    loop {
        let mut u = sample_gaussian(rng, d);
        let proj = dot(&u, against);
        for (x, a) in u.iter_mut().zip(against) {
            *x -= proj * a;
        }
        let n = norm(&u);
        if n > 1e-9 {
            for x in &mut u {
                *x /= n;
            }
            return u;
        }
    }
}

fn noisy_unit(rng: &mut ChaCha8Rng, direction: &[f64], sigma: f64) -> Result<Vec<f64>> {
    let mut v: Vec<f64> = if sigma == 0.0 {
        direction.to_vec()
    } else {
        direction
            .iter()
            .map(|&x| x + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let n = norm(&v);
    if n <= 1e-12 {
        return Err(Error::InfeasibleGeometry(
            "noise annihilated a direction".into(),
        ));
    }
    for x in &mut v {
        *x /= n;
    }
    Ok(v)
}

pub fn generate_task(params: &TaskParams) -> Result<SyntheticTask> {
    let p = params.clone();
    if p.dim < 3 {
        return Err(Error::InfeasibleGeometry(format!(
            "dim must be >= 3, got {}",
            p.dim
        )));
    }
    if p.m_planted < 2 || p.classes_per_cluster < 2 {
        return Err(Error::InfeasibleGeometry(
            "need at least 2 clusters of at least 2 classes".into(),
        ));
    }
    if p.m_planted > p.dim {
        return Err(Error::InfeasibleGeometry(format!(
            "{} orthonormal cluster centers cannot fit in dimension {}",
            p.m_planted, p.dim
        )));
    }
    if !(0.0..90.0).contains(&p.intra_cluster_angle_deg) {
        return Err(Error::InfeasibleGeometry(format!(
            "intra-cluster angle must be in [0, 90) degrees, got {}",
            p.intra_cluster_angle_deg
        )));
    }
    if p.test_per_class == 0 {
        return Err(Error::InvalidConfig("test_per_class must be >= 1".into()));
    }
    if !(0.0 < p.text_compression && p.text_compression <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "text_compression must be in (0, 1], got {}",
            p.text_compression
        )));
    }
    let k = p.m_planted * p.classes_per_cluster;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);

    // Cluster centers: Gram-Schmidt on Gaussian draws gives a seeded random
    // orthonormal frame.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(p.m_planted);
    while centers.len() < p.m_planted {
        let mut v = sample_gaussian(&mut rng, p.dim);
        for c in &centers {
            let proj = dot(&v, c);
            for (x, y) in v.iter_mut().zip(c) {
                *x -= proj * y;
            }
        }
        let n = norm(&v);
        if n > 1e-9 {
            for x in &mut v {
                *x /= n;
            }
            centers.push(v);
        }
    }

    // Class directions at the requested angle from their center; the frozen
    // text prototypes sit on the same great circle at the compressed angle.
    let angle = p.intra_cluster_angle_deg.to_radians();
    let text_angle = angle * p.text_compression;
    let mut labels = Vec::with_capacity(k);
    let mut dir_rows = Vec::with_capacity(k);
    let mut text_dir_rows = Vec::with_capacity(k);
    let mut planted = BTreeMap::new();
    for m in 0..p.m_planted {
        for j in 0..p.classes_per_cluster {
            let class = (m * p.classes_per_cluster + j) as ClassId;
            let u = orthogonal_unit(&mut rng, &centers[m], p.dim);
            let along = |theta: f64| -> Vec<f64> {
                centers[m]
                    .iter()
                    .zip(&u)
                    .map(|(c, uu)| theta.cos() * c + theta.sin() * uu)
                    .collect()
            };
            labels.push(class);
            dir_rows.push(along(angle));
            text_dir_rows.push(along(text_angle));
            planted.insert(class, m as u32 + 1);
        }
    }

    // Pairwise-angle validation: each direction must be nearest its own
    // center and no two directions may (near-)coincide.
    for (i, dir) in dir_rows.iter().enumerate() {
        let own = i / p.classes_per_cluster;
        let own_cos = dot(dir, &centers[own]);
        for (m, c) in centers.iter().enumerate() {
            if m != own && dot(dir, c) >= own_cos {
                return Err(Error::InfeasibleGeometry(format!(
                    "class {i} is at least as close to cluster {m} as to its own center; \
                     reduce the intra-cluster angle or raise the dimension"
                )));
            }
        }
        for other in dir_rows.iter().skip(i + 1) {
            if dot(dir, other) > (0.5f64).to_radians().cos() {
                return Err(Error::InfeasibleGeometry(
                    "two class directions nearly coincide".into(),
                ));
            }
        }
    }
    let directions = EmbeddingMatrix::new(labels.clone(), Matrix::from_rows(&dir_rows)?)?;

    // Frozen prototypes.
    let mut proto_rows = Vec::with_capacity(k);
    for text_dir in &text_dir_rows {
        proto_rows.push(noisy_unit(&mut rng, text_dir, p.prototype_noise)?);
    }
    let frozen_prototypes = EmbeddingMatrix::new(labels.clone(), Matrix::from_rows(&proto_rows)?)?;

    // Stratified base/new split, then the long-tailed counts over base
    // classes in a seeded order (so head/tail is not correlated with ids).
    let (base_classes, new_classes) = base_new_split(&planted, p.seed);
    let count_values = sample_counts(base_classes.len(), p.tau, p.n_max)?;
    let mut order = base_classes.clone();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut counts = BTreeMap::new();
    for (class, n) in order.into_iter().zip(count_values) {
        counts.insert(class, n);
    }

    // Features: direction + isotropic noise, renormalized.
    let class_row: BTreeMap<ClassId, usize> =
        labels.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut train_features = FeaturesByClass::new();
    for (&class, &n) in &counts {
        let dir = &dir_rows[class_row[&class]];
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| noisy_unit(&mut rng, dir, p.feature_noise))
            .collect::<Result<_>>()?;
        train_features.insert(class, Matrix::from_rows(&rows)?);
    }
    let mut test_features = FeaturesByClass::new();
    for &class in &labels {
        let dir = &dir_rows[class_row[&class]];
        let rows: Vec<Vec<f64>> = (0..p.test_per_class)
            .map(|_| noisy_unit(&mut rng, dir, p.feature_noise))
            .collect::<Result<_>>()?;
        test_features.insert(class, Matrix::from_rows(&rows)?);
    }

    Ok(SyntheticTask {
        directions,
        frozen_prototypes,
        train_features,
        test_features,
        counts,
        tau: p.tau,
        n_max: p.n_max,
        base_classes,
        new_classes,
        planted_clusters: planted,
        seed: p.seed,
        params: p,
    })
}

impl SyntheticTask {
    pub fn num_classes(&self) -> usize {
        self.directions.len()
    }

    pub fn dim(&self) -> usize {
        self.directions.dim()
    }

    /// Planted mapping as a scaffold-compatible `(class -> cluster)` map.
    pub fn planted_mapping(&self) -> BTreeMap<ClassId, u32> {
        self.planted_clusters.clone()
    }

    /// Re-derives a stratified split with another seed.
    pub fn split_with_seed(&self, seed: u64) -> (Vec<ClassId>, Vec<ClassId>) {
        base_new_split(&self.planted_clusters, seed)
    }

    /// Writes `frozen_prototypes.csv`, `train_features.csv`,
    /// `test_features.csv` and `task.json` into the directory.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.frozen_prototypes
            .write_csv(&dir.join("frozen_prototypes.csv"))?;
        features_to_embedding(&self.train_features)?.write_csv(&dir.join("train_features.csv"))?;
        features_to_embedding(&self.test_features)?.write_csv(&dir.join("test_features.csv"))?;
        let manifest = TaskManifest {
            params: self.params.clone(),
            counts: self.counts.clone(),
            tau: self.tau,
            n_max: self.n_max,
            base_classes: self.base_classes.clone(),
            new_classes: self.new_classes.clone(),
            planted_clusters: self.planted_clusters.clone(),
            seed: self.seed,
            directions: self.directions.matrix().to_nested(),
            direction_labels: self.directions.labels().to_vec(),
        };
        fs::write(
            dir.join("task.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let manifest: TaskManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("task.json"))?)?;
        let frozen = EmbeddingMatrix::read_csv(&dir.join("frozen_prototypes.csv"))?;
        let train =
            embedding_to_features(&EmbeddingMatrix::read_csv(&dir.join("train_features.csv"))?)?;
        let test =
            embedding_to_features(&EmbeddingMatrix::read_csv(&dir.join("test_features.csv"))?)?;
        let directions = EmbeddingMatrix::new(
            manifest.direction_labels.clone(),
            Matrix::from_rows(&manifest.directions)?,
        )?;
        for (&class, &n) in &manifest.counts {
            let have = train.get(&class).map(|m| m.rows()).unwrap_or(0);
            if have != n {
                return Err(Error::MalformedFile(format!(
                    "class {class}: manifest says {n} train samples, file has {have}"
                )));
            }
        }
        Ok(SyntheticTask {
            params: manifest.params,
            directions,
            frozen_prototypes: frozen,
            train_features: train,
            test_features: test,
            counts: manifest.counts,
            tau: manifest.tau,
            n_max: manifest.n_max,
            base_classes: manifest.base_classes,
            new_classes: manifest.new_classes,
            planted_clusters: manifest.planted_clusters,
            seed: manifest.seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TaskManifest {
    params: TaskParams,
    counts: BTreeMap<ClassId, usize>,
    tau: f64,
    n_max: usize,
    base_classes: Vec<ClassId>,
    new_classes: Vec<ClassId>,
    planted_clusters: BTreeMap<ClassId, u32>,
    seed: u64,
    directions: Vec<Vec<f64>>,
    direction_labels: Vec<ClassId>,
}

fn features_to_embedding(features: &FeaturesByClass) -> Result<EmbeddingMatrix> {
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for (&class, m) in features {
        for r in m.iter_rows() {
            labels.push(class);
            rows.push(r.to_vec());
        }
    }
    EmbeddingMatrix::new(labels, Matrix::from_rows(&rows)?)
}

fn embedding_to_features(em: &EmbeddingMatrix) -> Result<FeaturesByClass> {
    let mut grouped: BTreeMap<ClassId, Vec<Vec<f64>>> = BTreeMap::new();
    for (i, &label) in em.labels().iter().enumerate() {
        grouped.entry(label).or_default().push(em.row(i).to_vec());
    }
    let mut out = FeaturesByClass::new();
    for (class, rows) in grouped {
        out.insert(class, Matrix::from_rows(&rows)?);
    }
    Ok(out)
}
