//! Box-head classification with embedding normalization.
//!
//! Region features pass through a two-layer perceptron to an embedding `x`.
//! The classifier scores class `j` as `γ · (x/‖x‖)·(w_j/‖w_j‖)`, so only the
//! angle between embedding and class weight matters and every logit lies in
//! `[−γ, γ]`. A separate linear layer on the same embedding predicts
//! per-class box deltas.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const DEFAULT_GAMMA: f64 = 20.0;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Per-class weight rows (background is row 0) with scale `gamma` and
/// normalization floor `eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineClassifierWeights<T: Scalar = f32> {
    weights: Tensor<T>,
    pub gamma: f64,
    pub eps: f64,
}

impl<T: Scalar> CosineClassifierWeights<T> {
    pub fn new(weights: Tensor<T>, gamma: f64, eps: f64) -> Result<Self> {
        let [c, _d] = weights.shape()[..] else {
            return Err(Error::dim(
                "cosine classifier",
                format!("weights must be [C,D], got {:?}", weights.shape()),
            ));
        };
        if c < 2 {
            return Err(Error::Config(format!("cosine classifier needs ≥ 2 classes, got {c}")));
        }
        if !(gamma > 0.0) || !(eps > 0.0) {
            return Err(Error::Config(format!(
                "cosine classifier needs gamma > 0 and eps > 0, got {gamma}, {eps}"
            )));
        }
        if !weights.all_finite() {
            return Err(Error::Config("cosine classifier weights must be finite".into()));
        }
        Ok(CosineClassifierWeights { weights, gamma, eps })
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn num_classes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn row(&self, j: usize) -> &[T] {
        let d = self.dim();
        &self.weights.data()[j * d..(j + 1) * d]
    }
}

/// Records `γ · normalize(x) · normalize(W)ᵀ` on a tape. `x` may be a single
/// embedding `[D]` or a batch `[N,D]`.
pub fn cosine_logits_var<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, gamma: f64, eps: f64) -> Result<Var> {
    let eps = T::from_f64_lossy(eps);
    let xn = tape.l2_normalize(x, eps)?;
    let wn = tape.l2_normalize(w, eps)?;
    let dots = tape.matmul_nt(xn, wn)?;
    Ok(tape.scale(dots, T::from_f64_lossy(gamma)))
}

/// Cosine-similarity logits for one embedding.
pub fn cosine_logits<T: Scalar>(x: &Tensor<T>, weights: &CosineClassifierWeights<T>) -> Result<Tensor<T>> {
    if x.shape() != [weights.dim()] {
        return Err(Error::dim(
            "cosine_logits",
            format!("embedding {:?} vs weight dim {}", x.shape(), weights.dim()),
        ));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_requires_grad(false));
    let wv = tape.leaf(weights.weights.clone().with_requires_grad(false));
    let out = cosine_logits_var(&mut tape, xv, wv, weights.gamma, weights.eps)?;
    Ok(tape.value(out).clone())
}

/// Rows drawn from a seeded standard normal, then scaled to unit length.
pub fn init_classifier(num_classes: usize, dim: usize, gamma: f64, seed: u64) -> Result<CosineClassifierWeights<f32>> {
    let mut rng = Rng::new(seed);
    let weights = unit_rows(num_classes, dim, &mut rng);
    CosineClassifierWeights::new(Tensor::new(vec![num_classes, dim], weights)?, gamma, DEFAULT_EPS)
}

pub(crate) fn unit_rows(rows: usize, dim: usize, rng: &mut Rng) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let mut row: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(DEFAULT_EPS);
        row.iter_mut().for_each(|v| *v /= n);
        out.extend(row.into_iter().map(|v| v as f32));
    }
    out
}

/// Which classifier sits on top of the embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    /// Embedding normalization: scaled cosine similarity.
    Cosine,
    /// Plain affine layer `W·x + b`.
    Linear,
}

/// Weights of the region head apart from the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T: Scalar = f32> {
    pub fc1_weight: Tensor<T>,
    pub fc1_bias: Tensor<T>,
    pub fc2_weight: Tensor<T>,
    pub fc2_bias: Tensor<T>,
    pub bbox_weight: Tensor<T>,
    pub bbox_bias: Tensor<T>,
}

/// Tape handles for a bound head.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
    pub bbox_weight: Var,
    pub bbox_bias: Var,
    pub classifier: ClassifierVars,
}

#[derive(Clone, Copy, Debug)]
pub enum ClassifierVars {
    Cosine { weight: Var, gamma: f64, eps: f64 },
    Linear { weight: Var, bias: Var },
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<T: Scalar = f32> {
    /// `[C]` class logits, background first.
    pub logits: Tensor<T>,
    /// `[4·(C−1)]` box deltas, one quadruple per foreground class.
    pub deltas: Tensor<T>,
}

/// Records the head on a tape for a batch of flattened region features
/// `[R,F]`. Returns `(logits [R,C], deltas [R,4(C−1)], embedding [R,D])`.
pub fn head_forward_var<T: Scalar>(tape: &mut Tape<T>, rows: Var, v: &HeadVars) -> Result<(Var, Var, Var)> {
    let h = tape.linear(rows, v.fc1_weight, v.fc1_bias)?;
    let h = tape.relu(h);
    let e = tape.linear(h, v.fc2_weight, v.fc2_bias)?;
    let emb = tape.relu(e);
    let logits = match v.classifier {
        ClassifierVars::Cosine { weight, gamma, eps } => cosine_logits_var(tape, emb, weight, gamma, eps)?,
        ClassifierVars::Linear { weight, bias } => tape.linear(emb, weight, bias)?,
    };
    let deltas = tape.linear(emb, v.bbox_weight, v.bbox_bias)?;
    Ok((logits, deltas, emb))
}

/// Head forward pass for a single region feature `[C_f,S,S]` with the
/// cosine classifier.
pub fn head_forward<T: Scalar>(
    roi_feat: &Tensor<T>,
    params: &HeadParams<T>,
    weights: &CosineClassifierWeights<T>,
) -> Result<HeadOutput<T>> {
    if roi_feat.shape().len() != 3 {
        return Err(Error::dim(
            "head_forward",
            format!("roi features must be [C,S,S], got {:?}", roi_feat.shape()),
        ));
    }
    let c = weights.num_classes();
    if params.bbox_weight.shape().first() != Some(&(4 * (c - 1))) {
        return Err(Error::dim(
            "head_forward",
            format!(
                "box regressor {:?} does not match {} classes",
                params.bbox_weight.shape(),
                c
            ),
        ));
    }
    let mut tape = Tape::new();
    let mut leaf = |t: &Tensor<T>| tape.leaf(t.clone().with_requires_grad(false));
    let flat = leaf(&Tensor::new(vec![roi_feat.len()], roi_feat.data().to_vec())?);
    let vars = HeadVars {
        fc1_weight: leaf(&params.fc1_weight),
        fc1_bias: leaf(&params.fc1_bias),
        fc2_weight: leaf(&params.fc2_weight),
        fc2_bias: leaf(&params.fc2_bias),
        bbox_weight: leaf(&params.bbox_weight),
        bbox_bias: leaf(&params.bbox_bias),
        classifier: ClassifierVars::Cosine {
            weight: leaf(weights.weights()),
            gamma: weights.gamma,
            eps: weights.eps,
        },
    };
    let (logits, deltas, _) = head_forward_var(&mut tape, flat, &vars)?;
    Ok(HeadOutput {
        logits: tape.value(logits).clone(),
        deltas: tape.value(deltas).clone(),
    })
}

/// Within-class spread of a set of labelled embeddings, measured two ways.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSpread {
    /// Mean squared distance to the class centroid after L2 normalization.
    pub normalized: f64,
    /// The same statistic for raw embeddings rescaled to unit mean norm.
    pub unnormalized: f64,
}

pub fn intra_class_spread(samples: &[(usize, Vec<f32>)]) -> EmbeddingSpread {
    let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let mean_norm = samples.iter().map(|(_, v)| norm(v)).sum::<f64>() / samples.len().max(1) as f64;
    let spread = |map: &dyn Fn(&[f32]) -> Vec<f64>| -> f64 {
        let mut by_class: std::collections::BTreeMap<usize, Vec<Vec<f64>>> = Default::default();
        for (c, v) in samples {
            by_class.entry(*c).or_default().push(map(v));
        }
        let (mut total, mut count) = (0.0, 0usize);
        for vs in by_class.values() {
            let d = vs[0].len();
            let mut centroid = vec![0.0; d];
            for v in vs {
                centroid.iter_mut().zip(v).for_each(|(c, x)| *c += x / vs.len() as f64);
            }
            for v in vs {
                total += v.iter().zip(&centroid).map(|(x, c)| (x - c).powi(2)).sum::<f64>();
                count += 1;
            }
        }
        total / count.max(1) as f64
    };
    EmbeddingSpread {
        normalized: spread(&|v| {
            let n = norm(v).max(DEFAULT_EPS);
            v.iter().map(|&x| x as f64 / n).collect()
        }),
        unnormalized: spread(&|v| {
            let s = mean_norm.max(DEFAULT_EPS);
            v.iter().map(|&x| x as f64 / s).collect()
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights(rows: Vec<Vec<f32>>, gamma: f64) -> CosineClassifierWeights<f32> {
        let d = rows[0].len();
        let c = rows.len();
        let t = Tensor::new(vec![c, d], rows.concat()).unwrap();
        CosineClassifierWeights::new(t, gamma, DEFAULT_EPS).unwrap()
    }

    #[test]
    fn parallel_vectors_hit_gamma() {
        let w = weights(vec![vec![3.0, 4.0], vec![0.0, 1.0]], 20.0);
        let l = cosine_logits(&Tensor::vector(vec![3.0, 4.0]), &w).unwrap();
        assert!((l.data()[0] - 20.0).abs() < 1e-5);
    }

    #[test]
    fn orthogonal_vectors_score_zero() {
        let w = weights(vec![vec![5.0, 0.0], vec![0.0, 1.0]], 20.0);
        let l = cosine_logits(&Tensor::vector(vec![1.0, 0.0]), &w).unwrap();
        assert_eq!(l.data()[1], 0.0);
    }

    #[test]
    fn embedding_scale_is_irrelevant() {
        let w = weights(vec![vec![0.3, -1.0, 2.0], vec![1.0, 1.0, 0.5], vec![-0.2, 0.1, 0.0]], 20.0);
        let x = vec![0.7f32, -0.4, 1.3];
        let a = cosine_logits(&Tensor::vector(x.clone()), &w).unwrap();
        let b = cosine_logits(&Tensor::vector(x.iter().map(|v| v * 5.0).collect()), &w).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-5);
        }
    }

    #[test]
    fn init_rows_are_unit_and_seeded() {
        let a = init_classifier(6, 16, 20.0, 3).unwrap();
        for j in 0..6 {
            let n: f32 = a.row(j).iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(a, init_classifier(6, 16, 20.0, 3).unwrap());
        assert_ne!(a, init_classifier(6, 16, 20.0, 4).unwrap());
    }

    #[test]
    fn classifier_needs_two_classes() {
        let t = Tensor::new(vec![1, 2], vec![1.0f32, 0.0]).unwrap();
        assert!(CosineClassifierWeights::new(t, 20.0, 1e-8).is_err());
    }

    #[test]
    fn zero_head_outputs_zero() {
        let (cf, s, hidden, d, c) = (2, 2, 5, 4, 3);
        let z = |shape: Vec<usize>| Tensor::<f32>::zeros(shape);
        let params = HeadParams {
            fc1_weight: z(vec![hidden, cf * s * s]),
            fc1_bias: z(vec![hidden]),
            fc2_weight: z(vec![d, hidden]),
            fc2_bias: z(vec![d]),
            bbox_weight: z(vec![4 * (c - 1), d]),
            bbox_bias: z(vec![4 * (c - 1)]),
        };
        let w = init_classifier(c, d, 20.0, 0).unwrap();
        let out = head_forward(&z(vec![cf, s, s]), &params, &w).unwrap();
        assert_eq!(out.logits.shape(), &[c]);
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.deltas.shape(), &[4 * (c - 1)]);
        assert!(out.deltas.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spread_of_scaled_copies() {
        // Same direction, different lengths: normalized spread vanishes.
        let s = vec![(0, vec![1.0, 0.0]), (0, vec![3.0, 0.0]), (1, vec![0.0, 2.0])];
        let sp = intra_class_spread(&s);
        assert!(sp.normalized < 1e-12);
        assert!(sp.unnormalized > 0.1);
    }
}
