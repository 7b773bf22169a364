//! Teacher and student backbones.
//!
//! Every model exposes two taps: the penultimate feature (after global
//! pooling for convolutional nets) and the logits of a linear classification
//! head applied to that feature.

use ndarray::{Array1, Array2, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{as_matrix, ConvGeometry, Tape, Tensor, Var};
use crate::error::{CrcdError, Result};
use crate::nn::{fan_in_uniform, BoundParams, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Fully connected; the feature layer is linear (no activation).
    Mlp { hidden: Vec<usize> },
    /// CIFAR-style residual net with `(depth - 2) / 6` basic blocks per stage
    /// and stage widths `width, 2·width, 4·width`.
    Resnet { depth: usize, width: usize },
    /// Stages of 3×3 convolutions, each stage followed by 2×2 max pooling.
    Vgg { stages: Vec<Vec<usize>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub arch: Architecture,
    /// Per-sample input shape: `[C, H, W]` for convolutional nets, anything for MLPs.
    pub input_shape: Vec<usize>,
    pub feature_dim: usize,
    /// Zero builds a headless feature extractor.
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], feature_dim: usize, num_classes: usize) -> Self {
        Self {
            name: format!("mlp{}", feature_dim),
            arch: Architecture::Mlp {
                hidden: hidden.to_vec(),
            },
            input_shape: vec![input_dim],
            feature_dim,
            num_classes,
        }
    }

    pub fn resnet(depth: usize, width: usize, input_shape: &[usize], num_classes: usize) -> Self {
        let suffix = if width == 16 {
            String::new()
        } else if width % 16 == 0 {
            format!("x{}", width / 16)
        } else {
            format!("w{width}")
        };
        Self {
            name: format!("resnet{depth}{suffix}"),
            arch: Architecture::Resnet { depth, width },
            input_shape: input_shape.to_vec(),
            feature_dim: 4 * width,
            num_classes,
        }
    }

    /// Named zoo entries: `resnet{8,14,20,32,44,56,110}`, `resnet8x4`, `resnet32x4`,
    /// `vgg8`, `vgg11`, `vgg13`.
    pub fn preset(name: &str, input_shape: &[usize], num_classes: usize) -> Result<Self> {
        if let Some(rest) = name.strip_prefix("resnet") {
            let (depth, width) = match rest.split_once('x') {
                Some((d, m)) => (d.parse().ok(), m.parse::<usize>().ok().map(|m| 16 * m)),
                None => (rest.parse().ok(), Some(16)),
            };
            if let (Some(depth), Some(width)) = (depth, width) {
                let spec = Self::resnet(depth, width, input_shape, num_classes);
                spec.validate()?;
                return Ok(spec);
            }
        }
        let stages = match name {
            "vgg8" => vec![vec![64], vec![128], vec![256], vec![512], vec![512]],
            "vgg11" => vec![vec![64], vec![128], vec![256, 256], vec![512, 512], vec![512, 512]],
            "vgg13" => vec![
                vec![64, 64],
                vec![128, 128],
                vec![256, 256],
                vec![512, 512],
                vec![512, 512],
            ],
            _ => return Err(CrcdError::usage(format!("unknown architecture `{name}`"))),
        };
        let feature_dim = *stages.last().and_then(|s| s.last()).unwrap();
        Ok(Self {
            name: name.to_string(),
            arch: Architecture::Vgg { stages },
            input_shape: input_shape.to_vec(),
            feature_dim,
            num_classes,
        })
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(CrcdError::config(format!("{}: feature_dim must be > 0", self.name)));
        }
        match &self.arch {
            Architecture::Mlp { hidden } => {
                if hidden.iter().any(|&h| h == 0) || self.input_len() == 0 {
                    return Err(CrcdError::config(format!("{}: zero-width layer", self.name)));
                }
            }
            Architecture::Resnet { depth, width } => {
                if *depth < 8 || (depth - 2) % 6 != 0 {
                    return Err(CrcdError::usage(format!(
                        "resnet depth must be 6n+2 with n >= 1, got {depth}"
                    )));
                }
                if self.input_shape.len() != 3 {
                    return Err(CrcdError::config("resnet input_shape must be [C, H, W]"));
                }
                if self.feature_dim != 4 * width {
                    return Err(CrcdError::config(format!(
                        "{}: feature_dim {} does not match 4·width = {}",
                        self.name,
                        self.feature_dim,
                        4 * width
                    )));
                }
            }
            Architecture::Vgg { stages } => {
                if self.input_shape.len() != 3 || stages.iter().any(|s| s.is_empty()) {
                    return Err(CrcdError::config("vgg needs [C, H, W] input and nonempty stages"));
                }
                let last = *stages.last().and_then(|s| s.last()).unwrap_or(&0);
                if self.feature_dim != last {
                    return Err(CrcdError::config(format!(
                        "{}: feature_dim {} does not match last stage width {last}",
                        self.name, self.feature_dim
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
    geo: ConvGeometry,
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv,
    conv2: Conv,
    /// Residual-branch gain, initialized to zero so each block starts as identity.
    gain: ParamId,
    shortcut: Option<Conv>,
}

#[derive(Debug, Clone)]
enum Layout {
    Mlp { hidden: Vec<Dense>, feature: Dense },
    Resnet { stem: Conv, blocks: Vec<BasicBlock> },
    Vgg { stages: Vec<Vec<Conv>> },
}

/// Tapped outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward<'t> {
    /// Penultimate representation, before any normalization.
    pub feature: Var<'t>,
    pub logits: Option<Var<'t>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    layout: Layout,
    head: Option<Dense>,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn dense(&mut self, name: &str, in_dim: usize, out_dim: usize) -> Dense {
        let w = fan_in_uniform(&[out_dim, in_dim], in_dim, self.rng);
        let b = fan_in_uniform(&[out_dim], in_dim, self.rng);
        Dense {
            w: self.store.add(format!("{name}.weight"), w),
            b: self.store.add(format!("{name}.bias"), b),
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let fan_in = cin * k * k;
        let w = fan_in_uniform(&[cout, cin, k, k], fan_in, self.rng);
        let b = fan_in_uniform(&[cout], fan_in, self.rng);
        Conv {
            w: self.store.add(format!("{name}.weight"), w),
            b: self.store.add(format!("{name}.bias"), b),
            geo: ConvGeometry {
                stride,
                padding: k / 2,
            },
        }
    }
}

impl Conv {
    fn apply<'t>(&self, p: &BoundParams<'t>, x: Var<'t>) -> Var<'t> {
        x.conv2d(p.get(self.w), self.geo).add_channel_bias(p.get(self.b))
    }
}

impl Dense {
    fn apply<'t>(&self, p: &BoundParams<'t>, x: Var<'t>) -> Var<'t> {
        x.matmul_t(p.get(self.w)).add_row(p.get(self.b))
    }
}

/// Builds a model with deterministic initialization under `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        store: &mut store,
        rng: &mut rng,
    };
    let layout = match &spec.arch {
        Architecture::Mlp { hidden } => {
            let mut prev = spec.input_len();
            let mut layers = Vec::new();
            for (i, &h) in hidden.iter().enumerate() {
                layers.push(b.dense(&format!("hidden{i}"), prev, h));
                prev = h;
            }
            let feature = b.dense("feature", prev, spec.feature_dim);
            Layout::Mlp {
                hidden: layers,
                feature,
            }
        }
        Architecture::Resnet { depth, width } => {
            let per_stage = (depth - 2) / 6;
            let stem = b.conv("stem", spec.input_shape[0], *width, 3, 1);
            let mut blocks = Vec::new();
            let mut cin = *width;
            for stage in 0..3 {
                let cout = width << stage;
                for i in 0..per_stage {
                    let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                    let name = format!("stage{stage}.block{i}");
                    let conv1 = b.conv(&format!("{name}.conv1"), cin, cout, 3, stride);
                    let conv2 = b.conv(&format!("{name}.conv2"), cout, cout, 3, 1);
                    let gain = b
                        .store
                        .add(format!("{name}.gain"), Tensor::zeros(IxDyn(&[1])));
                    let shortcut = (stride != 1 || cin != cout)
                        .then(|| b.conv(&format!("{name}.shortcut"), cin, cout, 1, stride));
                    blocks.push(BasicBlock {
                        conv1,
                        conv2,
                        gain,
                        shortcut,
                    });
                    cin = cout;
                }
            }
            Layout::Resnet { stem, blocks }
        }
        Architecture::Vgg { stages } => {
            let mut cin = spec.input_shape[0];
            let mut out = Vec::new();
            for (s, widths) in stages.iter().enumerate() {
                let mut convs = Vec::new();
                for (i, &w) in widths.iter().enumerate() {
                    convs.push(b.conv(&format!("stage{s}.conv{i}"), cin, w, 3, 1));
                    cin = w;
                }
                out.push(convs);
            }
            Layout::Vgg { stages: out }
        }
    };
    let head = (spec.num_classes > 0).then(|| b.dense("head", spec.feature_dim, spec.num_classes));
    Ok(Model {
        spec: spec.clone(),
        params: store,
        layout,
        head,
    })
}

impl Model {
    /// Rebuilds a model around previously saved parameters.
    pub fn from_params(spec: &ModelSpec, params: ParamStore) -> Result<Model> {
        let mut model = build_model(spec, 0)?;
        if !model.params.same_layout(&params) {
            return Err(CrcdError::Ingestion(format!(
                "checkpoint parameters do not match architecture `{}`",
                spec.name
            )));
        }
        model.params = params;
        Ok(model)
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }

    /// Head weight `[classes, feature_dim]` on the tape, if the model has a head.
    pub fn head_weight<'t>(&self, bound: &BoundParams<'t>) -> Option<Var<'t>> {
        self.head.map(|h| bound.get(h.w))
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        self.params.bind(tape, trainable)
    }

    /// `x` has shape `[B, input_shape...]`.
    pub fn forward<'t>(&self, p: &BoundParams<'t>, x: Var<'t>) -> Result<Forward<'t>> {
        let shape = x.shape();
        if shape.len() < 2 || shape[1..].iter().product::<usize>() != self.spec.input_len() {
            return Err(CrcdError::usage(format!(
                "{}: input shape {:?} does not match {:?}",
                self.spec.name, shape, self.spec.input_shape
            )));
        }
        let batch = shape[0];
        let feature = match &self.layout {
            Layout::Mlp { hidden, feature } => {
                let mut h = x.reshape(&[batch, self.spec.input_len()]);
                for layer in hidden {
                    h = layer.apply(p, h).relu();
                }
                feature.apply(p, h)
            }
            Layout::Resnet { stem, blocks } => {
                let mut dims = vec![batch];
                dims.extend(&self.spec.input_shape);
                let mut h = stem.apply(p, x.reshape(&dims)).relu();
                for blk in blocks {
                    let branch = blk.conv1.apply(p, h).relu();
                    let branch = blk.conv2.apply(p, branch).mul_scalar_var(p.get(blk.gain));
                    let skip = match &blk.shortcut {
                        Some(sc) => sc.apply(p, h),
                        None => h,
                    };
                    h = skip.add(branch).relu();
                }
                h.global_avg_pool()
            }
            Layout::Vgg { stages } => {
                let mut dims = vec![batch];
                dims.extend(&self.spec.input_shape);
                let mut h = x.reshape(&dims);
                for convs in stages {
                    for c in convs {
                        h = c.apply(p, h).relu();
                    }
                    let s = h.shape();
                    if s[2] >= 2 && s[3] >= 2 {
                        h = h.max_pool2();
                    }
                }
                h.global_avg_pool()
            }
        };
        let got = feature.shape()[1];
        if got != self.spec.feature_dim {
            return Err(CrcdError::config(format!(
                "{}: feature tap has dim {got}, declared {}",
                self.spec.name, self.spec.feature_dim
            )));
        }
        let logits = self.head.map(|h| h.apply(p, feature));
        Ok(Forward { feature, logits })
    }

    /// Logits without recording gradients.
    pub fn predict(&self, inputs: &Tensor) -> Result<Array2<f64>> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let fwd = self.forward(&p, tape.constant(inputs.clone()))?;
        let logits = fwd
            .logits
            .ok_or_else(|| CrcdError::config(format!("{} has no classification head", self.spec.name)))?;
        Ok(logits.matrix())
    }

    /// Pre-normalization features and logits for a batch, no gradients.
    pub fn features_and_logits(&self, inputs: &Tensor) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let fwd = self.forward(&p, tape.constant(inputs.clone()))?;
        Ok((fwd.feature.matrix(), fwd.logits.map(|l| l.matrix())))
    }

    /// Applies the head to externally supplied features.
    pub fn head_logits(&self, features: &Array2<f64>) -> Option<Array2<f64>> {
        self.head.map(|h| {
            let w = as_matrix(self.params.get(h.w));
            let b = self
                .params
                .get(h.b)
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .to_owned();
            features.dot(&w.t()) + &b.insert_axis(Axis(0))
        })
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }
}

/// Row-wise argmax with first-index tie breaking.
pub fn argmax_rows(m: &Array2<f64>) -> Array1<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_shape_simple_fn(IxDyn(shape), || StandardNormal.sample(&mut rng))
    }

    #[test]
    fn mlp_zero_input_gives_finite_logits() {
        let spec = ModelSpec::mlp(6, &[16], 8, 4);
        let m = build_model(&spec, 1).unwrap();
        let logits = m.predict(&Tensor::zeros(IxDyn(&[1, 6]))).unwrap();
        assert_eq!(logits.dim(), (1, 4));
        assert!(logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = ModelSpec::resnet(8, 4, &[3, 8, 8], 10);
        let a = build_model(&spec, 42).unwrap();
        let b = build_model(&spec, 42).unwrap();
        let c = build_model(&spec, 43).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn resnet_feature_dim_matches_spec() {
        let spec = ModelSpec::resnet(8, 4, &[3, 8, 8], 10);
        let m = build_model(&spec, 0).unwrap();
        let (f, l) = m.features_and_logits(&random_input(&[1, 3, 8, 8], 5)).unwrap();
        assert_eq!(f.ncols(), spec.feature_dim);
        assert_eq!(l.unwrap().ncols(), 10);
    }

    #[test]
    fn logits_equal_head_applied_to_feature() {
        for spec in [
            ModelSpec::mlp(5, &[7], 3, 4),
            ModelSpec::resnet(8, 2, &[3, 8, 8], 3),
            ModelSpec {
                name: "tiny-vgg".into(),
                arch: Architecture::Vgg {
                    stages: vec![vec![4], vec![6]],
                },
                input_shape: vec![3, 8, 8],
                feature_dim: 6,
                num_classes: 3,
            },
        ] {
            let m = build_model(&spec, 9).unwrap();
            let mut shape = vec![4];
            shape.extend(&spec.input_shape);
            let (f, l) = m.features_and_logits(&random_input(&shape, 2)).unwrap();
            let again = m.head_logits(&f).unwrap();
            for (a, b) in l.unwrap().iter().zip(again.iter()) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn presets_and_errors() {
        let r20 = ModelSpec::preset("resnet20", &[3, 32, 32], 100).unwrap();
        assert_eq!(r20.feature_dim, 64);
        let r8x4 = ModelSpec::preset("resnet8x4", &[3, 32, 32], 100).unwrap();
        assert_eq!(r8x4.feature_dim, 256);
        assert_eq!(ModelSpec::preset("vgg8", &[3, 32, 32], 100).unwrap().feature_dim, 512);
        assert!(matches!(
            ModelSpec::preset("alexnet", &[3, 32, 32], 10),
            Err(CrcdError::Usage(_))
        ));
        let mut bad = ModelSpec::resnet(8, 4, &[3, 8, 8], 10);
        bad.feature_dim = 7;
        assert!(matches!(build_model(&bad, 0), Err(CrcdError::Config(_))));
    }

    #[test]
    fn headless_model_has_no_logits() {
        let m = build_model(&ModelSpec::mlp(3, &[], 2, 0), 0).unwrap();
        assert!(!m.has_head());
        assert!(m.predict(&Tensor::zeros(IxDyn(&[1, 3]))).is_err());
    }
}
