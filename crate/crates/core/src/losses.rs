//! The four training objectives as pure value-and-gradient functions.
//!
//! All losses consume unnormalized inputs. The contrastive, separation and
//! convergence terms normalize rows internally and their gradients include
//! the normalization Jacobian `(I - u u^T) / ||x||`; the anchoring term
//! deliberately operates on raw vectors, since pinning absolute positions
//! is its entire point.
//!
//! Evaluation order is fixed (clusters by id, classes by label), so values
//! are reproducible bit-for-bit across runs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::embedding::{normalize_matrix_with_norms, ClassId, EmbeddingMatrix, FeaturesByClass};
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::scaffold::ClusterScaffold;

/// Mixing weights for the total objective plus the contrastive temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_tetf: f64,
    pub lambda_cc: f64,
    pub lambda_rs: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_tetf: 0.25,
            lambda_cc: 0.15,
            lambda_rs: 0.10,
            temperature: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_tetf < 0.0 || self.lambda_cc < 0.0 || self.lambda_rs < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::NonPositiveTemperature(self.temperature));
        }
        Ok(())
    }
}

/// Per-component values of one total-loss evaluation.
///
/// `total = clip + lambda_tetf * tetf_raw + lambda_cc * cc + lambda_rs * rs`
/// holds exactly for the weights the evaluation used. `tetf_centered` is the
/// raw separation value minus its irreducible diagonal floor (the mean
/// cluster size over multi-class clusters); it is zero exactly at the
/// per-cluster equiangular optimum and never meaningfully negative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub clip: f64,
    pub tetf_raw: f64,
    pub tetf_centered: f64,
    pub cc: f64,
    pub rs: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.clip.is_finite()
            && self.tetf_raw.is_finite()
            && self.tetf_centered.is_finite()
            && self.cc.is_finite()
            && self.rs.is_finite()
            && self.total.is_finite()
    }
}

/// Pulls a gradient w.r.t. the unit row back through `x -> x / ||x||`.
fn pullback(unit_row: &[f64], raw_norm: f64, grad_unit: &[f64]) -> Vec<f64> {
    let along = dot(unit_row, grad_unit);
    unit_row
        .iter()
        .zip(grad_unit)
        .map(|(u, g)| (g - along * u) / raw_norm)
        .collect()
}

pub struct ClipLoss {
    pub value: f64,
    pub grad_images: Matrix,
    pub grad_texts: Matrix,
}

/// Contrastive alignment of matched image–text pairs: for each text row i
/// the softmax runs over image rows j at temperature `tau`, and the batch
/// contributions are summed, not averaged. `symmetric` adds the mirrored
/// image-axis term (off by default; the single-axis form is the reference).
pub fn loss_clip(
    image_feats: &Matrix,
    text_feats: &Matrix,
    temperature: f64,
    symmetric: bool,
) -> Result<ClipLoss> {
    if image_feats.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    if image_feats.rows() != text_feats.rows() || image_feats.cols() != text_feats.cols() {
        return Err(Error::DimensionMismatch {
            expected: image_feats.rows() * image_feats.cols(),
            got: text_feats.rows() * text_feats.cols(),
        });
    }
    if temperature <= 0.0 {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    let (img_unit, img_norms) = normalize_matrix_with_norms(image_feats)?;
    let (txt_unit, txt_norms) = normalize_matrix_with_norms(text_feats)?;

    let (value_t, grad_txt_unit, grad_img_unit) = clip_axis(&txt_unit, &img_unit, temperature);
    let mut value = value_t;
    let mut g_txt = grad_txt_unit;
    let mut g_img = grad_img_unit;
    if symmetric {
        let (value_i, grad_img2, grad_txt2) = clip_axis(&img_unit, &txt_unit, temperature);
        value += value_i;
        g_img.add_scaled(&grad_img2, 1.0)?;
        g_txt.add_scaled(&grad_txt2, 1.0)?;
    }

    let mut grad_images = Matrix::zeros(image_feats.rows(), image_feats.cols());
    let mut grad_texts = Matrix::zeros(text_feats.rows(), text_feats.cols());
    for i in 0..image_feats.rows() {
        grad_images.row_mut(i).copy_from_slice(&pullback(
            img_unit.row(i),
            img_norms[i],
            g_img.row(i),
        ));
        grad_texts.row_mut(i).copy_from_slice(&pullback(
            txt_unit.row(i),
            txt_norms[i],
            g_txt.row(i),
        ));
    }
    Ok(ClipLoss {
        value,
        grad_images,
        grad_texts,
    })
}

/// One softmax axis: anchors index the rows whose diagonal pairing is the
/// positive; the softmax runs over `others`. Returns
/// `(value, grad_anchor_unit, grad_other_unit)`.
fn clip_axis(anchor: &Matrix, other: &Matrix, tau: f64) -> (f64, Matrix, Matrix) {
    let b = anchor.rows();
    let mut value = 0.0;
    let mut grad_anchor = Matrix::zeros(b, anchor.cols());
    let mut grad_other = Matrix::zeros(b, other.cols());
    let mut probs = vec![0.0; b];
    for i in 0..b {
        let mut max_logit = f64::NEG_INFINITY;
        for j in 0..b {
            let l = dot(anchor.row(i), other.row(j)) / tau;
            probs[j] = l;
            max_logit = max_logit.max(l);
        }
        let mut z = 0.0;
        for p in probs.iter_mut() {
            *p = (*p - max_logit).exp();
            z += *p;
        }
        let lse = max_logit + z.ln();
        let own = dot(anchor.row(i), other.row(i)) / tau;
        value += lse - own;
        for j in 0..b {
            let d = (probs[j] / z - if i == j { 1.0 } else { 0.0 }) / tau;
            // d L / d anchor_i += d * other_j ; d L / d other_j += d * anchor_i
            for (g, v) in grad_anchor.row_mut(i).iter_mut().zip(other.row(j)) {
                *g += d * v;
            }
            for (g, v) in grad_other.row_mut(j).iter_mut().zip(anchor.row(i)) {
                *g += d * v;
            }
        }
    }
    (value, grad_anchor, grad_other)
}

pub struct TetfLoss {
    pub raw: f64,
    pub centered: f64,
    pub grad: Matrix,
}

/// Within-cluster equiangular separation: per multi-class cluster, the
/// squared Frobenius distance between the cosine Gram matrix and the
/// maximally separated target with uniform off-diagonal `-1/(k-1)`,
/// averaged over multi-class clusters. Singleton clusters contribute
/// nothing and are excluded from the average. The Gram diagonal is constant
/// under normalization, so the raw and centered values share one gradient.
pub fn loss_tetf(prototypes: &EmbeddingMatrix, scaffold: &ClusterScaffold) -> Result<TetfLoss> {
    loss_tetf_filtered(prototypes, scaffold, None)
}

/// Same, restricted to a subset of cluster ids (`None` = all clusters).
pub fn loss_tetf_filtered(
    prototypes: &EmbeddingMatrix,
    scaffold: &ClusterScaffold,
    clusters: Option<&BTreeSet<u32>>,
) -> Result<TetfLoss> {
    let index = prototypes.label_index()?;
    let (unit, norms) = normalize_matrix_with_norms(prototypes.matrix())?;
    let k_total = prototypes.len();
    let d = prototypes.dim();

    let mut grad_unit = Matrix::zeros(k_total, d);
    let mut raw_sum = 0.0;
    let mut floor_sum = 0.0;
    let mut multi = 0usize;

    for (cid, members) in scaffold.iter_clusters() {
        if let Some(filter) = clusters {
            if !filter.contains(&cid) {
                continue;
            }
        }
        let rows: Vec<usize> = members
            .iter()
            .map(|c| index.get(c).copied().ok_or(Error::MissingPrototype(*c)))
            .collect::<Result<_>>()?;
        let k = rows.len();
        if k < 2 {
            continue;
        }
        multi += 1;
        floor_sum += k as f64;
        let beta = 1.0 / (k as f64 - 1.0);

        // A = C + beta (1 - I), computed on the normalized rows
        let mut a = Matrix::zeros(k, k);
        for p in 0..k {
            for q in 0..k {
                let c = dot(unit.row(rows[p]), unit.row(rows[q]));
                let v = if p == q { c } else { c + beta };
                a.set(p, q, v);
                raw_sum += v * v;
            }
        }
        // d ||A||_F^2 / d G_unit = 4 A G_unit (per cluster block)
        for p in 0..k {
            for q in 0..k {
                let coeff = 4.0 * a.get(p, q);
                let dst = rows[p];
                let src = rows[q];
                for t in 0..d {
                    let add = coeff * unit.get(src, t);
                    grad_unit.set(dst, t, grad_unit.get(dst, t) + add);
                }
            }
        }
    }

    if multi == 0 {
        return Ok(TetfLoss {
            raw: 0.0,
            centered: 0.0,
            grad: Matrix::zeros(k_total, d),
        });
    }
    let inv_m = 1.0 / multi as f64;
    let raw = raw_sum * inv_m;
    let centered = raw - floor_sum * inv_m;

    let mut grad = Matrix::zeros(k_total, d);
    for i in 0..k_total {
        let mut gu: Vec<f64> = grad_unit.row(i).to_vec();
        for g in &mut gu {
            *g *= inv_m;
        }
        grad.row_mut(i)
            .copy_from_slice(&pullback(unit.row(i), norms[i], &gu));
    }
    Ok(TetfLoss {
        raw,
        centered,
        grad,
    })
}

pub struct CcLoss {
    pub value: f64,
    pub grad_prototypes: Matrix,
    pub grad_features: BTreeMap<ClassId, Matrix>,
}

/// Class-wise convergence: mean (over classes present in the feature map,
/// then over each class's samples) squared distance between the normalized
/// feature and its class's normalized prototype. An empty feature map
/// contributes zero.
pub fn loss_cc(
    features_by_class: &FeaturesByClass,
    prototypes: &EmbeddingMatrix,
) -> Result<CcLoss> {
    let index = prototypes.label_index()?;
    let (unit, norms) = normalize_matrix_with_norms(prototypes.matrix())?;
    let k_present = features_by_class.len();
    let mut grad_prototypes = Matrix::zeros(prototypes.len(), prototypes.dim());
    let mut grad_features = BTreeMap::new();
    if k_present == 0 {
        return Ok(CcLoss {
            value: 0.0,
            grad_prototypes,
            grad_features,
        });
    }

    let mut value = 0.0;
    for (&class, feats) in features_by_class {
        let row = *index.get(&class).ok_or(Error::MissingPrototype(class))?;
        if feats.rows() == 0 {
            return Err(Error::EmptyInput);
        }
        if feats.cols() != prototypes.dim() {
            return Err(Error::DimensionMismatch {
                expected: prototypes.dim(),
                got: feats.cols(),
            });
        }
        let (f_unit, f_norms) = normalize_matrix_with_norms(feats)?;
        let n_c = feats.rows() as f64;
        let scale = 2.0 / (k_present as f64 * n_c);
        let g = unit.row(row);

        let mut grad_proto_unit = vec![0.0; prototypes.dim()];
        let mut gf = Matrix::zeros(feats.rows(), feats.cols());
        for i in 0..feats.rows() {
            let f = f_unit.row(i);
            let mut sq = 0.0;
            for t in 0..f.len() {
                let diff = f[t] - g[t];
                sq += diff * diff;
                grad_proto_unit[t] += scale * (g[t] - f[t]);
            }
            value += sq / (k_present as f64 * n_c);
            let grad_f_unit: Vec<f64> = (0..f.len()).map(|t| scale * (f[t] - g[t])).collect();
            gf.row_mut(i)
                .copy_from_slice(&pullback(f, f_norms[i], &grad_f_unit));
        }
        let pulled = pullback(g, norms[row], &grad_proto_unit);
        for (dst, v) in grad_prototypes.row_mut(row).iter_mut().zip(&pulled) {
            *dst += v;
        }
        grad_features.insert(class, gf);
    }
    Ok(CcLoss {
        value,
        grad_prototypes,
        grad_features,
    })
}

pub struct RsLoss {
    pub value: f64,
    pub grad: Matrix,
}

/// Anchoring of each learnable prototype to its frozen counterpart: mean L1
/// distance over classes, on raw (unnormalized) vectors. The subgradient at
/// exactly-zero coordinates is taken as 0, which makes `g = g_hat`
/// stationary.
pub fn loss_rs(prototypes: &EmbeddingMatrix, frozen: &EmbeddingMatrix) -> Result<RsLoss> {
    loss_rs_subset(prototypes, frozen, None)
}

/// Same, restricted to a subset of classes (`None` = all prototype classes).
pub fn loss_rs_subset(
    prototypes: &EmbeddingMatrix,
    frozen: &EmbeddingMatrix,
    classes: Option<&BTreeSet<ClassId>>,
) -> Result<RsLoss> {
    if prototypes.dim() != frozen.dim() {
        return Err(Error::DimensionMismatch {
            expected: prototypes.dim(),
            got: frozen.dim(),
        });
    }
    let frozen_index = frozen.label_index()?;
    let mut grad = Matrix::zeros(prototypes.len(), prototypes.dim());
    let mut value = 0.0;
    let mut counted = 0usize;
    for (i, &class) in prototypes.labels().iter().enumerate() {
        if let Some(filter) = classes {
            if !filter.contains(&class) {
                continue;
            }
        }
        let fr = *frozen_index
            .get(&class)
            .ok_or(Error::MissingPrototype(class))?;
        counted += 1;
        for (t, (&g, &gh)) in prototypes.row(i).iter().zip(frozen.row(fr)).enumerate() {
            let delta = g - gh;
            value += delta.abs();
            grad.set(i, t, if delta == 0.0 { 0.0 } else { delta.signum() });
        }
    }
    if counted == 0 {
        return Ok(RsLoss { value: 0.0, grad });
    }
    let inv_k = 1.0 / counted as f64;
    grad.scale(inv_k);
    Ok(RsLoss {
        value: value * inv_k,
        grad,
    })
}

/// Everything one total-loss evaluation needs.
pub struct TotalLossInputs<'a> {
    pub prototypes: &'a EmbeddingMatrix,
    pub frozen: &'a EmbeddingMatrix,
    pub scaffold: &'a ClusterScaffold,
    /// Batch image features, one row per sampled pair.
    pub batch_images: &'a Matrix,
    /// Class of each batch row; the matching text feature is the current
    /// prototype of that class.
    pub batch_classes: &'a [ClassId],
    /// Features the convergence term runs over, grouped by class.
    pub cc_features: &'a FeaturesByClass,
    pub symmetric_clip: bool,
    /// When false the contrastive term is dropped from the objective (its
    /// reported value is 0 so the breakdown identity still holds).
    pub include_clip: bool,
    /// Restrict the separation term to these cluster ids (per-batch mode).
    pub tetf_cluster_filter: Option<&'a BTreeSet<u32>>,
    /// Restrict the anchoring term to these classes (per-batch mode).
    pub rs_class_filter: Option<&'a BTreeSet<ClassId>>,
}

/// Weighted sum of the four objectives and its gradient with respect to the
/// prototype matrix. Component values are always computed and reported;
/// the weights only decide what reaches the total and the gradient.
pub fn loss_total(
    inputs: &TotalLossInputs<'_>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Matrix)> {
    weights.validate()?;
    let protos = inputs.prototypes;
    let index = protos.label_index()?;
    if inputs.batch_images.rows() != inputs.batch_classes.len() {
        return Err(Error::DimensionMismatch {
            expected: inputs.batch_images.rows(),
            got: inputs.batch_classes.len(),
        });
    }

    let mut grad = Matrix::zeros(protos.len(), protos.dim());

    // contrastive term over the batch, text side tied to prototype rows
    let clip_value = if inputs.include_clip {
        let mut texts = Matrix::zeros(inputs.batch_images.rows(), protos.dim());
        for (b, class) in inputs.batch_classes.iter().enumerate() {
            let row = *index.get(class).ok_or(Error::MissingPrototype(*class))?;
            texts.row_mut(b).copy_from_slice(protos.row(row));
        }
        let clip = loss_clip(
            inputs.batch_images,
            &texts,
            weights.temperature,
            inputs.symmetric_clip,
        )?;
        for (b, class) in inputs.batch_classes.iter().enumerate() {
            let row = index[class];
            for (dst, v) in grad.row_mut(row).iter_mut().zip(clip.grad_texts.row(b)) {
                *dst += v;
            }
        }
        clip.value
    } else {
        0.0
    };

    let tetf = loss_tetf_filtered(protos, inputs.scaffold, inputs.tetf_cluster_filter)?;
    if weights.lambda_tetf != 0.0 {
        grad.add_scaled(&tetf.grad, weights.lambda_tetf)?;
    }
    let cc = loss_cc(inputs.cc_features, protos)?;
    if weights.lambda_cc != 0.0 {
        grad.add_scaled(&cc.grad_prototypes, weights.lambda_cc)?;
    }
    let rs = loss_rs_subset(protos, inputs.frozen, inputs.rs_class_filter)?;
    if weights.lambda_rs != 0.0 {
        grad.add_scaled(&rs.grad, weights.lambda_rs)?;
    }

    let total = clip_value
        + weights.lambda_tetf * tetf.raw
        + weights.lambda_cc * cc.value
        + weights.lambda_rs * rs.value;
    let breakdown = LossBreakdown {
        clip: clip_value,
        tetf_raw: tetf.raw,
        tetf_centered: tetf.centered,
        cc: cc.value,
        rs: rs.value,
        total,
    };
    Ok((breakdown, grad))
}
