//! Layer-wise multi-task distillation objective and the student lifecycle
//! around it (initialization from the teacher, layer-set validation).
//!
//! For a predicted teacher layer `l` with teacher frames `h_t` and student
//! head frames `p_t` (both `D`-dimensional):
//!
//! ```text
//! loss_l = reduce_t [ |h_t - p_t|_1 / D  -  lambda * log sigmoid(cos(h_t, p_t)) ]
//! loss   = sum over predicted layers of loss_l
//! ```
//!
//! `reduce_t` is a sum over frames or a mean over frames.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{Encoder, EncoderConfig, FeatureMap, HEAD_PREFIX};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    SumOverTime,
    #[default]
    MeanOverTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSpec {
    /// Teacher layers to predict, ascending and distinct.
    pub predicted_layers: Vec<usize>,
    pub lambda: f64,
    #[serde(default)]
    pub reduction: Reduction,
}

impl Default for DistillSpec {
    fn default() -> Self {
        Self {
            predicted_layers: alloc::vec![4, 8, 12],
            lambda: 1.0,
            reduction: Reduction::MeanOverTime,
        }
    }
}

impl DistillSpec {
    pub fn validate(&self, teacher_layers: usize) -> Result<()> {
        if self.predicted_layers.is_empty() {
            return Err(Error::Spec("the predicted layer set is empty".into()));
        }
        if let Some(&l) = self
            .predicted_layers
            .iter()
            .find(|&&l| l == 0 || l > teacher_layers)
        {
            return Err(Error::Spec(format!(
                "predicted layer {l} is out of range 1..={teacher_layers}"
            )));
        }
        if self.predicted_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Spec(format!(
                "predicted layers must be distinct and ascending: {:?}",
                self.predicted_layers
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Spec(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Builds a `DistillSpec` with default weighting from an arbitrary layer collection.
/// Duplicates are merged; order does not matter.
pub fn validate_layer_set(layers: &[usize], teacher_layers: usize) -> Result<DistillSpec> {
    let mut predicted_layers = layers.to_vec();
    predicted_layers.sort_unstable();
    predicted_layers.dedup();
    let spec = DistillSpec {
        predicted_layers,
        ..DistillSpec::default()
    };
    spec.validate(teacher_layers)?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    pub layer: usize,
    /// Reduced `|h - p|_1 / D` term.
    pub l1: f64,
    /// Reduced `-log sigmoid(cos)` term, before the lambda weight. Zero when
    /// lambda is zero (the branch is not evaluated).
    pub cos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_layer: Vec<LayerLoss>,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Element-wise mean of several breakdowns with identical layer sets.
    pub fn average(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = items.first()?;
        let n = items.len() as f64;
        let per_layer = first
            .per_layer
            .iter()
            .enumerate()
            .map(|(i, l)| LayerLoss {
                layer: l.layer,
                l1: items.iter().map(|b| b.per_layer[i].l1).sum::<f64>() / n,
                cos: items.iter().map(|b| b.per_layer[i].cos).sum::<f64>() / n,
            })
            .collect();
        Some(LossBreakdown {
            per_layer,
            lambda: first.lambda,
            total: items.iter().map(|b| b.total).sum::<f64>() / n,
        })
    }
}

/// Loss nodes inside a graph.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub total: Var,
    /// `(layer, l1 node, cos node)`.
    pub terms: Vec<(usize, Var, Option<Var>)>,
}

impl LossVars {
    pub fn breakdown<F: Element>(&self, g: &Graph<F>, lambda: f64) -> LossBreakdown {
        let scalar = |v: Var| g.value(v).data()[0].to_f64();
        LossBreakdown {
            per_layer: self
                .terms
                .iter()
                .map(|&(layer, l1, cos)| LayerLoss {
                    layer,
                    l1: scalar(l1),
                    cos: cos.map_or(0.0, scalar),
                })
                .collect(),
            lambda,
            total: scalar(self.total),
        }
    }
}

/// Adds the distillation objective to `g`.
///
/// `student` maps each predicted teacher layer to the head prediction node,
/// `teacher` to the target node. Targets are normally constants, so no
/// gradient reaches the teacher.
pub fn distill_loss<F: Element>(
    g: &mut Graph<F>,
    student: &BTreeMap<usize, Var>,
    teacher: &BTreeMap<usize, Var>,
    spec: &DistillSpec,
) -> Result<LossVars> {
    let mut terms = Vec::with_capacity(spec.predicted_layers.len());
    let mut total: Option<Var> = None;
    for &l in &spec.predicted_layers {
        let missing = |who: &str| Error::Spec(format!("{who} output for layer {l} is missing"));
        let p = *student.get(&l).ok_or_else(|| missing("student head"))?;
        let h = *teacher.get(&l).ok_or_else(|| missing("teacher"))?;
        if g.shape(p) != g.shape(h) || g.shape(p).len() != 2 {
            return Err(shape_err(
                "distill_loss",
                format!("teacher layer {l} shape {:?}", g.shape(h)),
                g.shape(p),
            ));
        }
        let d = g.shape(p)[1] as f64;
        let reduce = |g: &mut Graph<F>, v: Var| match spec.reduction {
            Reduction::MeanOverTime => g.mean(v),
            Reduction::SumOverTime => g.sum(v),
        };
        let l1 = g.l1_distance(p, h)?;
        let l1 = g.scale(l1, 1.0 / d);
        let l1 = reduce(g, l1);
        let (layer_total, cos_term) = if spec.lambda > 0.0 {
            let c = g.cosine_similarity(p, h)?;
            let c = g.sigmoid(c);
            let c = g.log(c);
            let c = g.scale(c, -1.0);
            let c = reduce(g, c);
            let weighted = g.scale(c, spec.lambda);
            (g.add(l1, weighted)?, Some(c))
        } else {
            (l1, None)
        };
        total = Some(match total {
            Some(t) => g.add(t, layer_total)?,
            None => layer_total,
        });
        terms.push((l, l1, cos_term));
    }
    Ok(LossVars {
        total: total.ok_or_else(|| Error::Spec("the predicted layer set is empty".into()))?,
        terms,
    })
}

/// Value-only evaluation of the objective on feature maps.
pub fn distill_loss_value<F: Element>(
    student: &[FeatureMap<F>],
    teacher: &[FeatureMap<F>],
    spec: &DistillSpec,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let mut s = BTreeMap::new();
    for f in student {
        s.insert(f.layer_index, g.constant(f.frames.clone()));
    }
    let mut t = BTreeMap::new();
    for f in teacher {
        t.insert(f.layer_index, g.constant(f.frames.clone()));
    }
    let vars = distill_loss(&mut g, &s, &t, spec)?;
    Ok(vars.breakdown(&g, spec.lambda))
}

/// Mean frame-wise cosine similarity between each head prediction and its
/// teacher layer, in ascending layer order.
pub fn head_cosines<F: Element>(
    student_heads: &[FeatureMap<F>],
    teacher_layers: &[FeatureMap<F>],
) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(student_heads.len());
    for head in student_heads {
        let target = teacher_layers
            .iter()
            .find(|f| f.layer_index == head.layer_index)
            .ok_or_else(|| Error::Spec(format!("teacher layer {} is missing", head.layer_index)))?;
        let mut g = Graph::new();
        let a = g.constant(head.frames.clone());
        let b = g.constant(target.frames.clone());
        let c = g.cosine_similarity(a, b)?;
        let m = g.mean(c);
        out.push((head.layer_index, g.value(m).data()[0].to_f64()));
    }
    Ok(out)
}

/// True for parameters that are copied from the teacher at initialization.
pub fn is_inherited(name: &str) -> bool {
    !name.starts_with(HEAD_PREFIX)
}

/// Builds a student whose front-end, projection, positional convolution,
/// encoder norm and first `k` transformer layers are exact copies of the
/// teacher's; heads (and nothing else) are freshly initialized from `seed`.
pub fn init_student_from_teacher<F: Element>(
    teacher: &Encoder<F>,
    student_config: &EncoderConfig,
    seed: u64,
) -> Result<Encoder<F>> {
    let mut student = Encoder::build(student_config, seed)?;
    let mismatched: Vec<String> = student
        .params()
        .iter()
        .filter(|(name, _)| is_inherited(name))
        .filter(|(name, t)| teacher.param(name).is_none_or(|tt| tt.shape() != t.shape()))
        .map(|(name, _)| name.clone())
        .collect();
    if !mismatched.is_empty() {
        return Err(Error::Incompatible { names: mismatched });
    }
    let inherited: Vec<(String, Tensor<F>)> = student
        .params()
        .keys()
        .filter(|n| is_inherited(n))
        .map(|n| (n.clone(), teacher.param(n).expect("checked above").clone()))
        .collect();
    for (name, t) in inherited {
        student.set_param(&name, t)?;
    }
    Ok(student)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn fm(layer: usize, rows: usize, cols: usize, data: &[f64]) -> FeatureMap<f64> {
        FeatureMap {
            frames: Tensor::from_f64_slice(&[rows, cols], data).unwrap(),
            layer_index: layer,
        }
    }

    fn spec(layers: &[usize], lambda: f64, reduction: Reduction) -> DistillSpec {
        DistillSpec {
            predicted_layers: layers.to_vec(),
            lambda,
            reduction,
        }
    }

    #[test]
    fn identical_frames_leave_only_the_cosine_floor() {
        let h = fm(4, 1, 3, &[0.3, -1.2, 2.0]);
        let b = distill_loss_value(core::slice::from_ref(&h), core::slice::from_ref(&h), &spec(&[4], 1.0, Reduction::SumOverTime)).unwrap();
        assert_eq!(b.per_layer[0].l1, 0.0);
        // -log sigmoid(c) = log(1 + e^-c), c = |h|^2 / (|h| + eps)^2
        let n = libm::sqrt(0.09 + 1.44 + 4.0);
        let c = n * n / ((n + crate::graph::COSINE_EPS) * (n + crate::graph::COSINE_EPS));
        let expected = libm::log(1.0 + libm::exp(-c));
        assert!((b.total - expected).abs() < 1e-12);
        assert!((b.total - 0.313_262).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_unit_vectors() {
        let h = fm(1, 1, 2, &[1.0, 0.0]);
        let p = fm(1, 1, 2, &[0.0, 1.0]);
        let b = distill_loss_value(&[p], &[h], &spec(&[1], 1.0, Reduction::SumOverTime)).unwrap();
        assert!((b.per_layer[0].l1 - 1.0).abs() < 1e-12);
        assert!((b.per_layer[0].cos - core::f64::consts::LN_2).abs() < 1e-12);
        assert!((b.total - 1.693_147).abs() < 1e-6);
    }

    #[test]
    fn zero_lambda_is_pure_l1() {
        let h = fm(2, 2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        let p = fm(2, 2, 3, &[0.0, 2.5, 1.0, 1.0, 0.5, -3.0]);
        let b = distill_loss_value(&[p], &[h], &spec(&[2], 0.0, Reduction::MeanOverTime)).unwrap();
        // rows: (1 + 0.5 + 2)/3, (2 + 0 + 3)/3
        let expected = ((3.5 / 3.0) + (5.0 / 3.0)) / 2.0;
        assert!((b.total - expected).abs() < 1e-12);
        assert_eq!(b.per_layer[0].cos, 0.0);
    }

    #[test]
    fn zero_vector_frames_are_finite() {
        let h = fm(1, 1, 2, &[0.0, 0.0]);
        let p = fm(1, 1, 2, &[0.0, 0.0]);
        let b = distill_loss_value(&[p], &[h], &spec(&[1], 1.0, Reduction::MeanOverTime)).unwrap();
        assert!((b.total - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn missing_layer_and_shape_mismatch() {
        let h = fm(1, 2, 2, &[1.0; 4]);
        let p = fm(2, 2, 2, &[1.0; 4]);
        let s = spec(&[1], 1.0, Reduction::MeanOverTime);
        assert!(matches!(distill_loss_value(&[p], core::slice::from_ref(&h), &s), Err(Error::Spec(_))));
        let p = fm(1, 1, 4, &[1.0; 4]);
        assert!(matches!(distill_loss_value(&[p], &[h], &s), Err(Error::Shape { .. })));
    }

    #[test]
    fn sum_equals_frames_times_mean() {
        let data: Vec<f64> = (0..12).map(|i| libm::sin(i as f64)).collect();
        let other: Vec<f64> = (0..12).map(|i| libm::cos(i as f64 * 0.7)).collect();
        let h = fm(3, 4, 3, &data);
        let p = fm(3, 4, 3, &other);
        let sum = distill_loss_value(core::slice::from_ref(&p), core::slice::from_ref(&h), &spec(&[3], 1.0, Reduction::SumOverTime)).unwrap();
        let mean = distill_loss_value(&[p], &[h], &spec(&[3], 1.0, Reduction::MeanOverTime)).unwrap();
        assert!((sum.total - 4.0 * mean.total).abs() < 1e-12);
    }

    #[test]
    fn layer_sets() {
        for set in [
            vec![4],
            vec![8],
            vec![12],
            vec![4, 8],
            vec![4, 12],
            vec![8, 12],
            vec![4, 8, 12],
        ] {
            assert_eq!(validate_layer_set(&set, 12).unwrap().predicted_layers, set);
        }
        let all: Vec<usize> = (1..=12).collect();
        assert_eq!(validate_layer_set(&all, 12).unwrap().predicted_layers.len(), 12);
        assert!(matches!(validate_layer_set(&[13], 12), Err(Error::Spec(_))));
        assert!(matches!(validate_layer_set(&[0], 12), Err(Error::Spec(_))));
        assert!(matches!(validate_layer_set(&[], 12), Err(Error::Spec(_))));
        assert_eq!(validate_layer_set(&[8, 4, 8], 12).unwrap().predicted_layers, vec![4, 8]);
    }

    #[test]
    fn negative_lambda_rejected() {
        assert!(spec(&[1], -0.5, Reduction::MeanOverTime).validate(2).is_err());
    }
}
