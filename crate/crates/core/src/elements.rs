//! The two complementary representation elements: the ℓ2-normalized feature
//! and the gradient of the per-sample classification loss with respect to
//! that feature.

use std::collections::HashSet;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{CrcdError, Result};
use crate::models::{Forward, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Feature,
    Gradient,
}

impl ElementKind {
    pub const ALL: [ElementKind; 2] = [ElementKind::Feature, ElementKind::Gradient];

    pub fn index(self) -> usize {
        match self {
            ElementKind::Feature => 0,
            ElementKind::Gradient => 1,
        }
    }
}

const UNIT_TOL: f64 = 1e-6;
/// Norm floor applied when normalizing gradient rows.
pub const GRADIENT_NORM_FLOOR: f64 = 1e-12;

/// Immutable snapshot of one element for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationBatch {
    vectors: Array2<f64>,
    space: Space,
    element: ElementKind,
    sample_ids: Vec<usize>,
    differentiable: bool,
}

impl RepresentationBatch {
    pub fn new(
        vectors: Array2<f64>,
        space: Space,
        element: ElementKind,
        sample_ids: Vec<usize>,
        differentiable: bool,
    ) -> Result<Self> {
        if sample_ids.len() != vectors.nrows() {
            return Err(CrcdError::usage(format!(
                "{} sample ids for {} rows",
                sample_ids.len(),
                vectors.nrows()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = sample_ids.iter().find(|id| !seen.insert(**id)) {
            return Err(CrcdError::usage(format!("duplicate sample id {dup} in batch")));
        }
        if space == Space::Teacher && differentiable {
            return Err(CrcdError::usage("teacher representations are never differentiable"));
        }
        if element == ElementKind::Feature {
            for (r, row) in vectors.rows().into_iter().enumerate() {
                let n = row.dot(&row).sqrt();
                if (n - 1.0).abs() >= UNIT_TOL {
                    return Err(CrcdError::usage(format!(
                        "feature row {r} has norm {n}, expected 1"
                    )));
                }
            }
        }
        Ok(Self {
            vectors,
            space,
            element,
            sample_ids,
            differentiable,
        })
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }
    pub fn space(&self) -> Space {
        self.space
    }
    pub fn element(&self) -> ElementKind {
        self.element
    }
    pub fn sample_ids(&self) -> &[usize] {
        &self.sample_ids
    }
    pub fn differentiable(&self) -> bool {
        self.differentiable
    }
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }
    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn row(&self, i: usize) -> Representation {
        Representation {
            values: self.vectors.row(i).to_owned(),
            space: self.space,
            element: self.element,
            sample_id: self.sample_ids[i],
        }
    }
}

/// One sample's element vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub values: Array1<f64>,
    pub space: Space,
    pub element: ElementKind,
    pub sample_id: usize,
}

/// An element still attached to the tape.
#[derive(Debug, Clone, Copy)]
pub struct ElementVars<'t> {
    pub vectors: Var<'t>,
    pub space: Space,
    pub element: ElementKind,
    pub differentiable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradientOptions {
    /// Keep student gradient elements differentiable w.r.t. model parameters.
    pub higher_order: bool,
    pub normalize: bool,
}

impl Default for GradientOptions {
    fn default() -> Self {
        Self {
            higher_order: true,
            normalize: true,
        }
    }
}

/// ℓ2-normalized feature rows. Teacher features are detached.
pub fn feature_element_var<'t>(
    fwd: &Forward<'t>,
    space: Space,
    declared_dim: usize,
) -> Result<ElementVars<'t>> {
    let f = fwd.feature;
    let dim = f.shape()[1];
    if dim != declared_dim {
        return Err(CrcdError::config(format!(
            "feature dimension {dim} does not match declared {declared_dim}"
        )));
    }
    let value = f.value();
    for (r, row) in crate::autograd::as_matrix(&value).rows().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(CrcdError::DegenerateInput {
                what: format!("{space:?} feature has norm {n}"),
                row: r,
            });
        }
    }
    let normalized = f.l2_normalize_rows(0.0);
    let (vectors, differentiable) = match space {
        Space::Teacher => (normalized.detach(), false),
        Space::Student => (normalized, normalized.needs_grad()),
    };
    Ok(ElementVars {
        vectors,
        space,
        element: ElementKind::Feature,
        differentiable,
    })
}

/// `g = ∂ℓ/∂f = (softmax(z) − onehot(y)) · W_head` for each sample, with `ℓ`
/// the per-sample cross-entropy of the model's own linear head.
///
/// Built from graph operations, so with `higher_order` the student's element
/// stays differentiable w.r.t. the backbone and head parameters.
pub fn gradient_element_var<'t>(
    tape: &'t Tape,
    fwd: &Forward<'t>,
    head_weight: Option<Var<'t>>,
    labels: &[usize],
    sample_ids: &[usize],
    space: Space,
    opts: GradientOptions,
) -> Result<ElementVars<'t>> {
    let (Some(logits), Some(w)) = (fwd.logits, head_weight) else {
        return Err(CrcdError::config(
            "gradient element needs a model with a classification head",
        ));
    };
    let classes = logits.shape()[1];
    let batch = labels.len();
    if logits.shape()[0] != batch {
        return Err(CrcdError::usage("label count does not match batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(CrcdError::usage(format!("label {bad} out of range for {classes} classes")));
    }
    let mut onehot = Array2::<f64>::zeros((batch, classes));
    for (r, &l) in labels.iter().enumerate() {
        onehot[[r, l]] = 1.0;
    }
    let residual = logits.softmax_rows().sub(tape.constant_matrix(onehot));
    let mut g = residual.matmul(w);
    {
        let gv = g.value();
        let gm = crate::autograd::as_matrix(&gv);
        for (r, row) in gm.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(CrcdError::Numerical {
                    component: "gradient element".into(),
                    sample_id: Some(sample_ids.get(r).copied().unwrap_or(r)),
                });
            }
        }
    }
    if opts.normalize {
        g = g.l2_normalize_rows(GRADIENT_NORM_FLOOR);
    }
    let keep_graph = space == Space::Student && opts.higher_order;
    let vectors = if keep_graph { g } else { g.detach() };
    Ok(ElementVars {
        vectors,
        space,
        element: ElementKind::Gradient,
        differentiable: keep_graph && vectors.needs_grad(),
    })
}

fn snapshot(e: &ElementVars<'_>, sample_ids: &[usize]) -> Result<RepresentationBatch> {
    RepresentationBatch::new(
        e.vectors.matrix(),
        e.space,
        e.element,
        sample_ids.to_vec(),
        e.space == Space::Student && e.differentiable,
    )
}

/// Feature element of `model` on `inputs` (`[B, input_shape...]`).
pub fn feature_element(
    model: &Model,
    inputs: &Tensor,
    sample_ids: &[usize],
    space: Space,
) -> Result<RepresentationBatch> {
    if inputs.shape().first().copied().unwrap_or(0) == 0 {
        return Err(CrcdError::usage("empty batch"));
    }
    let tape = Tape::new();
    let p = model.bind(&tape, space == Space::Student);
    let fwd = model.forward(&p, tape.constant(inputs.clone()))?;
    let e = feature_element_var(&fwd, space, model.spec.feature_dim)?;
    snapshot(&e, sample_ids)
}

/// Gradient element of `model` on a labeled batch.
pub fn gradient_element(
    model: &Model,
    inputs: &Tensor,
    labels: &[usize],
    sample_ids: &[usize],
    space: Space,
    opts: GradientOptions,
) -> Result<RepresentationBatch> {
    let tape = Tape::new();
    let p = model.bind(&tape, space == Space::Student);
    let fwd = model.forward(&p, tape.constant(inputs.clone()))?;
    let e = gradient_element_var(
        &tape,
        &fwd,
        model.head_weight(&p),
        labels,
        sample_ids,
        space,
        opts,
    )?;
    snapshot(&e, sample_ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, ModelSpec};
    use crate::nn::ParamId;
    use ndarray::{array, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// A model whose feature equals its input: one hidden-free MLP layer with
    /// identity weight and zero bias.
    fn identity_feature_model(dim: usize, classes: usize) -> Model {
        let mut m = build_model(&ModelSpec::mlp(dim, &[], dim, classes), 0).unwrap();
        let w = m.params.find("feature.weight").unwrap();
        let b = m.params.find("feature.bias").unwrap();
        *m.params.get_mut(w) = Array2::<f64>::eye(dim).into_dyn();
        m.params.get_mut(b).fill(0.0);
        m
    }

    fn set(m: &mut Model, name: &str, t: Tensor) {
        let id: ParamId = m.params.find(name).unwrap();
        *m.params.get_mut(id) = t;
    }

    #[test]
    fn three_four_five() {
        let m = identity_feature_model(2, 2);
        let rb = feature_element(&m, &array![[3.0, 4.0]].into_dyn(), &[0], Space::Teacher).unwrap();
        assert!((rb.vectors()[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((rb.vectors()[[0, 1]] - 0.8).abs() < 1e-15);
        assert!(!rb.differentiable());
        let unit = feature_element(&m, &array![[1.0, 0.0]].into_dyn(), &[0], Space::Student).unwrap();
        assert_eq!(unit.vectors().row(0).to_vec(), vec![1.0, 0.0]);
        assert!(unit.differentiable());
    }

    #[test]
    fn random_rows_match_norm_oracle() {
        let m = identity_feature_model(8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_shape_simple_fn(IxDyn(&[5, 8]), || StandardNormal.sample(&mut rng));
        let rb = feature_element(&m, &x, &[0, 1, 2, 3, 4], Space::Student).unwrap();
        for r in 0..5 {
            let mut ss = 0.0;
            for c in 0..8 {
                ss += x[[r, c]] * x[[r, c]];
            }
            let norm = ss.sqrt();
            for c in 0..8 {
                let expect = x[[r, c]] / norm;
                assert!((rb.vectors()[[r, c]] - expect).abs() <= 1e-6 * expect.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn zero_feature_is_degenerate() {
        let m = identity_feature_model(3, 2);
        let err = feature_element(&m, &array![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]].into_dyn(), &[4, 5], Space::Student)
            .unwrap_err();
        assert!(matches!(err, CrcdError::DegenerateInput { row: 1, .. }));
    }

    #[test]
    fn feature_dim_mismatch_is_config_error() {
        let m = identity_feature_model(3, 2);
        let tape = Tape::new();
        let p = m.bind(&tape, false);
        let fwd = m.forward(&p, tape.constant(array![[1.0, 2.0, 3.0]].into_dyn())).unwrap();
        assert!(matches!(
            feature_element_var(&fwd, Space::Teacher, 4),
            Err(CrcdError::Config(_))
        ));
    }

    #[test]
    fn zero_weight_head_gives_zero_gradient() {
        let mut m = identity_feature_model(3, 4);
        set(&mut m, "head.weight", Tensor::zeros(IxDyn(&[4, 3])));
        let rb = gradient_element(
            &m,
            &array![[0.3, -1.0, 2.0]].into_dyn(),
            &[2],
            &[0],
            Space::Student,
            GradientOptions {
                higher_order: true,
                normalize: false,
            },
        )
        .unwrap();
        assert!(rb.vectors().iter().all(|&v| v == 0.0));
    }

    /// Per-sample cross-entropy of a linear head, evaluated directly.
    fn ce(w: &Array2<f64>, b: &[f64], f: &[f64], label: usize) -> f64 {
        let z: Vec<f64> = (0..w.nrows())
            .map(|k| b[k] + (0..f.len()).map(|d| w[[k, d]] * f[d]).sum::<f64>())
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        lse - z[label]
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let w = array![[0.7, -0.3], [-0.4, 0.9]];
        let b = [0.1, -0.2];
        let f = [0.5, 1.5];
        let mut m = identity_feature_model(2, 2);
        set(&mut m, "head.weight", w.clone().into_dyn());
        set(&mut m, "head.bias", array![0.1, -0.2].into_dyn());
        let rb = gradient_element(
            &m,
            &array![[0.5, 1.5]].into_dyn(),
            &[1],
            &[0],
            Space::Teacher,
            GradientOptions {
                higher_order: false,
                normalize: false,
            },
        )
        .unwrap();
        let h = 1e-5;
        for d in 0..2 {
            let mut fp = f;
            let mut fm = f;
            fp[d] += h;
            fm[d] -= h;
            let fd = (ce(&w, &b, &fp, 1) - ce(&w, &b, &fm, 1)) / (2.0 * h);
            let got = rb.vectors()[[0, d]];
            assert!((got - fd).abs() <= 1e-4 * fd.abs(), "dim {d}: {got} vs {fd}");
        }
    }

    #[test]
    fn per_sample_locality_under_duplication_and_permutation() {
        let m = build_model(&ModelSpec::mlp(4, &[6], 3, 3), 5).unwrap();
        let opts = GradientOptions {
            higher_order: true,
            normalize: false,
        };
        let x = array![[0.1, 0.2, -0.3, 0.4], [1.0, -1.0, 0.5, 0.0]];
        let single = gradient_element(&m, &x.clone().into_dyn(), &[2, 0], &[0, 1], Space::Student, opts).unwrap();
        let dup = ndarray::concatenate![ndarray::Axis(0), x, x.slice(ndarray::s![0..1, ..])];
        let three = gradient_element(&m, &dup.into_dyn(), &[2, 0, 2], &[0, 1, 2], Space::Student, opts).unwrap();
        assert_eq!(single.vectors().row(0), three.vectors().row(0));
        assert_eq!(three.vectors().row(0), three.vectors().row(2));
        let perm = ndarray::stack![ndarray::Axis(0), x.row(1), x.row(0)];
        let swapped = gradient_element(&m, &perm.into_dyn(), &[0, 2], &[1, 0], Space::Student, opts).unwrap();
        assert_eq!(swapped.vectors().row(0), single.vectors().row(1));
        assert_eq!(swapped.vectors().row(1), single.vectors().row(0));
    }

    #[test]
    fn headless_model_has_no_gradient_element() {
        let m = build_model(&ModelSpec::mlp(3, &[], 2, 0), 0).unwrap();
        let err = gradient_element(
            &m,
            &array![[1.0, 2.0, 3.0]].into_dyn(),
            &[0],
            &[0],
            Space::Student,
            GradientOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CrcdError::Config(_)));
    }

    #[test]
    fn non_finite_gradient_names_the_sample() {
        let mut m = identity_feature_model(2, 2);
        set(&mut m, "head.weight", array![[f64::NAN, 0.0], [0.0, 1.0]].into_dyn());
        let err = gradient_element(
            &m,
            &array![[1.0, 1.0], [2.0, 2.0]].into_dyn(),
            &[0, 1],
            &[17, 42],
            Space::Student,
            GradientOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, CrcdError::Numerical { sample_id: Some(17), .. }));
    }

    #[test]
    fn teacher_and_detached_gradients_carry_no_graph() {
        let m = build_model(&ModelSpec::mlp(4, &[5], 3, 3), 1).unwrap();
        let tape = Tape::new();
        let p = m.bind(&tape, true);
        let x = tape.constant(array![[0.1, 0.2, 0.3, 0.4]].into_dyn());
        let fwd = m.forward(&p, x).unwrap();
        let hw = m.head_weight(&p);
        let on = gradient_element_var(&tape, &fwd, hw, &[1], &[0], Space::Student, GradientOptions::default()).unwrap();
        assert!(on.vectors.needs_grad() && on.differentiable);
        let off = gradient_element_var(
            &tape,
            &fwd,
            hw,
            &[1],
            &[0],
            Space::Student,
            GradientOptions {
                higher_order: false,
                normalize: true,
            },
        )
        .unwrap();
        assert!(!off.vectors.needs_grad());
        let t = gradient_element_var(&tape, &fwd, hw, &[1], &[0], Space::Teacher, GradientOptions::default()).unwrap();
        assert!(!t.vectors.needs_grad());
    }

    #[test]
    fn batch_invariants_enforced() {
        let v = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(RepresentationBatch::new(v.clone(), Space::Student, ElementKind::Feature, vec![1, 1], true).is_err());
        assert!(RepresentationBatch::new(v.clone(), Space::Teacher, ElementKind::Feature, vec![1, 2], true).is_err());
        assert!(RepresentationBatch::new(v * 2.0, Space::Student, ElementKind::Feature, vec![1, 2], true).is_err());
    }
}
