//! One distillation step over all relation pairs of a batch, the epoch loop,
//! evaluation, supervised (teacher) training and checkpoints.

use std::collections::HashMap;
use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::data::{derive_rng, epoch_order, Batch, Dataset};
use crate::elements::{
    feature_element_var, gradient_element_var, ElementKind, ElementVars, GradientOptions, Space,
};
use crate::error::{CrcdError, Result};
use crate::losses::{
    baseline_graph, cross_entropy_graph, kd_graph, rc_graph, total_objective, BaselineLoss,
    LossBreakdown, LossWeights, DEFAULT_MARGIN,
};
use crate::models::{argmax_rows, Model};
use crate::nn::{l2_norm, LrSchedule, ParamStore, Sgd, SgdConfig};
use crate::queue::{ReplayQueue, SamplingPolicy};
use crate::relation::{CriticMode, RelationConfig, RelationModule};

/// Which ordered `(i, j)` pairs of a batch form positive relations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairSelection {
    /// All `B²` ordered pairs, diagonal included.
    All,
    /// Only `(i, i)`.
    Diagonal,
    /// A seeded uniform subsample of the `B²` pairs.
    Subsample(usize),
}

impl fmt::Display for PairSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::All => f.write_str("all"),
            Self::Diagonal => f.write_str("diagonal"),
            Self::Subsample(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PairRepr {
    Count(usize),
    Word(String),
}

impl Serialize for PairSelection {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Subsample(n) => PairRepr::Count(*n),
            other => PairRepr::Word(other.to_string()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PairSelection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match PairRepr::deserialize(d)? {
            PairRepr::Count(n) => Ok(Self::Subsample(n)),
            PairRepr::Word(w) => match w.as_str() {
                "all" => Ok(Self::All),
                "diagonal" => Ok(Self::Diagonal),
                other => Err(serde::de::Error::custom(format!(
                    "expected \"all\", \"diagonal\" or a pair count, got \"{other}\""
                ))),
            },
        }
    }
}

/// All ordered pairs, or a seeded subsample of them, in row-major order.
pub fn build_pair_index(
    batch_size: usize,
    selection: PairSelection,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    build_pair_index_with(batch_size, selection, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Subsampling draws `n` of the `B²` flat indices `i·B + j` with a partial
/// Fisher–Yates (slot `k` swapped with a uniform slot in `k..B²`), then sorts.
pub fn build_pair_index_with(
    batch_size: usize,
    selection: PairSelection,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>> {
    if batch_size == 0 {
        return Err(CrcdError::usage("batch_size must be at least 1"));
    }
    let b = batch_size;
    match selection {
        PairSelection::All => Ok((0..b).flat_map(|i| (0..b).map(move |j| (i, j))).collect()),
        PairSelection::Diagonal => Ok((0..b).map(|i| (i, i)).collect()),
        PairSelection::Subsample(n) => {
            let total = b * b;
            if n > total || n == 0 {
                return Err(CrcdError::usage(format!(
                    "pairs_per_batch {n} must be in 1..={total} for batch size {b}"
                )));
            }
            let mut flat: Vec<usize> = (0..total).collect();
            for k in 0..n {
                let j = rng.random_range(k..total);
                flat.swap(k, j);
            }
            let mut picked = flat[..n].to_vec();
            picked.sort_unstable();
            Ok(picked.into_iter().map(|f| (f / b, f % b)).collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveLoss {
    Relation,
    TripletMargin,
    Logistic,
    InfoNce,
}

impl ContrastiveLoss {
    fn baseline(self) -> Option<BaselineLoss> {
        match self {
            Self::Relation => None,
            Self::TripletMargin => Some(BaselineLoss::TripletMargin),
            Self::Logistic => Some(BaselineLoss::Logistic),
            Self::InfoNce => Some(BaselineLoss::InfoNce),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fractions of the epoch count at which the rate is multiplied by `gamma`.
    pub milestones: Vec<f64>,
    pub gamma: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let s = LrSchedule::default();
        let o = SgdConfig::default();
        Self {
            kind: OptimizerKind::Sgd,
            lr: s.base_lr,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            milestones: s.milestones,
            gamma: s.gamma,
        }
    }
}

impl OptimConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            milestones: self.milestones.clone(),
            gamma: self.gamma,
        }
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        let bad = |field: &str, message: String| CrcdError::Schema {
            field: format!("{prefix}.{field}"),
            message,
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("momentum", format!("must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(bad("weight_decay", "must be non-negative".into()));
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(bad("milestones", "fractions must lie in [0, 1]".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(bad("gamma", "must be positive".into()));
        }
        Ok(())
    }
}

/// Every hyperparameter of the distillation objective and its optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub tau: f64,
    pub negatives: usize,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// KD softmax temperature.
    pub rho: f64,
    pub relation_dim: usize,
    pub proj_dim: usize,
    pub batch_size: usize,
    pub pairs_per_batch: PairSelection,
    pub critic_mode: CriticMode,
    pub sampling_policy: SamplingPolicy,
    pub higher_order: bool,
    pub normalize_gradient: bool,
    /// Multiply the negative sum by the negative count.
    pub literal_n: bool,
    pub contrastive_loss: ContrastiveLoss,
    /// Margin of the triplet baseline.
    pub margin: f64,
    pub optimizer: OptimConfig,
    pub epochs: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            negatives: 500,
            alpha: 1.0,
            beta1: 0.5,
            beta2: 0.5,
            rho: 4.0,
            relation_dim: 256,
            proj_dim: 128,
            batch_size: 64,
            pairs_per_batch: PairSelection::All,
            critic_mode: CriticMode::Linear,
            sampling_policy: SamplingPolicy::Queue,
            higher_order: true,
            normalize_gradient: true,
            literal_n: false,
            contrastive_loss: ContrastiveLoss::Relation,
            margin: DEFAULT_MARGIN,
            optimizer: OptimConfig::default(),
            epochs: 30,
        }
    }
}

impl DistillConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta1: self.beta1,
            beta2: self.beta2,
        }
    }

    pub fn relation_config(&self) -> RelationConfig {
        RelationConfig {
            relation_dim: self.relation_dim,
            proj_dim: self.proj_dim,
            tau: self.tau,
            critic_mode: self.critic_mode,
        }
    }

    pub fn gradient_options(&self) -> GradientOptions {
        GradientOptions {
            higher_order: self.higher_order,
            normalize: self.normalize_gradient,
        }
    }

    /// Buffer size: the negative count, grown to hold at least one batch.
    pub fn queue_capacity(&self) -> usize {
        self.negatives.max(self.batch_size)
    }

    fn contrastive_active(&self) -> bool {
        self.beta1 != 0.0 || self.beta2 != 0.0
    }

    fn beta(&self, e: ElementKind) -> f64 {
        match e {
            ElementKind::Feature => self.beta1,
            ElementKind::Gradient => self.beta2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| CrcdError::Schema {
            field: format!("distill.{field}"),
            message,
        };
        let positive = [
            ("tau", self.tau),
            ("rho", self.rho),
            ("margin", self.margin),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(name, format!("must be positive, got {v}")));
            }
        }
        for (name, v) in [("alpha", self.alpha), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(name, format!("must be non-negative, got {v}")));
            }
        }
        for (name, v) in [
            ("negatives", self.negatives),
            ("relation_dim", self.relation_dim),
            ("proj_dim", self.proj_dim),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(bad(name, "must be at least 1".into()));
            }
        }
        if let PairSelection::Subsample(n) = self.pairs_per_batch {
            if n == 0 || n > self.batch_size * self.batch_size {
                return Err(bad(
                    "pairs_per_batch",
                    format!("must be in 1..={}", self.batch_size * self.batch_size),
                ));
            }
        }
        self.optimizer.validate("distill.optimizer")
    }
}

/// Pair and negative selection for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub pairs: Vec<(usize, usize)>,
    /// Distinct anchor rows, ascending.
    pub anchors: Vec<usize>,
    /// Queue positions per anchor; `None` when the contrastive terms are off
    /// or the queue is still warming up.
    pub negatives: Option<Vec<Vec<usize>>>,
    pub warm_up: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTarget {
    Total,
    RcFeature,
    RcGradient,
}

pub struct ObjectiveEval {
    pub breakdown: LossBreakdown,
    pub student_grads: Vec<Option<Tensor>>,
    pub relation_grads: Vec<Option<Tensor>>,
    pub saturations: usize,
    /// Detached student elements for the queue.
    pub student_features: Array2<f64>,
    pub student_gradients: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub positive_pair_count: usize,
    /// `(distinct anchors) × N` for each active element.
    pub negatives_per_element: usize,
    pub negative_saturation_count: usize,
    pub queue_fill: f64,
    pub student_grad_norm: f64,
    /// The contrastive terms were skipped because the queue is warming up.
    pub contrastive_skipped: bool,
}

/// Teacher, student, relation nets, critics, queue and optimizer state.
pub struct Distiller {
    pub config: DistillConfig,
    pub teacher: Model,
    pub student: Model,
    pub relations: RelationModule,
    pub queue: ReplayQueue,
    student_opt: Sgd,
    relation_opt: Sgd,
    pair_rng: ChaCha8Rng,
    seed: u64,
    step: u64,
    epoch: usize,
}

impl Distiller {
    pub fn new(config: DistillConfig, teacher: Model, student: Model, seed: u64) -> Result<Self> {
        config.validate()?;
        if !student.has_head() {
            return Err(CrcdError::config("the student needs a classification head"));
        }
        if !teacher.has_head() && (config.alpha != 0.0 || config.beta2 != 0.0) {
            return Err(CrcdError::config(
                "KD and gradient relations need a teacher with a classification head",
            ));
        }
        if teacher.has_head() && teacher.spec.num_classes != student.spec.num_classes {
            return Err(CrcdError::config("teacher and student class counts differ"));
        }
        let relations = RelationModule::new(
            teacher.spec.feature_dim,
            student.spec.feature_dim,
            &config.relation_config(),
            &mut derive_rng(seed, "relation-init", 0),
        )?;
        let ds = student.spec.feature_dim;
        let queue = ReplayQueue::new(
            config.queue_capacity(),
            ds,
            ds,
            config.sampling_policy,
            derive_rng(seed, "queue", 0),
        )?;
        let student_opt = Sgd::new(config.optimizer.sgd(), student.params.len());
        let relation_opt = Sgd::new(config.optimizer.sgd(), relations.params.len());
        Ok(Self {
            config,
            teacher,
            student,
            relations,
            queue,
            student_opt,
            relation_opt,
            pair_rng: derive_rng(seed, "pairs", 0),
            seed,
            step: 0,
            epoch: 0,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Chooses pairs and draws negatives from the queue.
    pub fn plan_step(&mut self, batch: &Batch) -> Result<StepPlan> {
        let b = batch.len();
        if b == 0 {
            return Err(CrcdError::usage("empty batch"));
        }
        if !self.config.contrastive_active() {
            return Ok(StepPlan {
                pairs: Vec::new(),
                anchors: Vec::new(),
                negatives: None,
                warm_up: false,
            });
        }
        let selection = match self.config.pairs_per_batch {
            PairSelection::Subsample(n) => PairSelection::Subsample(n.min(b * b)),
            s => s,
        };
        let pairs = build_pair_index_with(b, selection, &mut self.pair_rng)?;
        let mut anchors: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        anchors.sort_unstable();
        anchors.dedup();
        let mut negatives = Vec::with_capacity(anchors.len());
        for &a in &anchors {
            match self.queue.sample_indices(batch.sample_ids[a], self.config.negatives) {
                Ok(idx) => negatives.push(idx),
                Err(CrcdError::WarmUp { .. }) => {
                    return Ok(StepPlan {
                        pairs,
                        anchors,
                        negatives: None,
                        warm_up: true,
                    })
                }
                Err(e) => return Err(e),
            }
        }
        Ok(StepPlan {
            pairs,
            anchors,
            negatives: Some(negatives),
            warm_up: false,
        })
    }

    /// Builds the objective for `batch` under `plan` and differentiates
    /// `target` with respect to student and relation parameters.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        plan: &StepPlan,
        target: LossTarget,
    ) -> Result<ObjectiveEval> {
        let cfg = &self.config;
        let tape = Tape::new();
        let sp = self.student.bind(&tape, true);
        let rp = self.relations.params.bind(&tape, true);
        let x = tape.constant(batch.inputs.clone());
        let sf = self.student.forward(&sp, x)?;
        let s_logits = sf
            .logits
            .ok_or_else(|| CrcdError::config("the student needs a classification head"))?;
        let l_cls = cross_entropy_graph(s_logits, &batch.labels);

        let contrastive = plan.negatives.as_ref();
        let need_teacher = cfg.alpha != 0.0 || contrastive.is_some();
        let tp = self.teacher.bind(&tape, false);
        let tf = if need_teacher {
            Some(self.teacher.forward(&tp, x)?)
        } else {
            None
        };

        let l_kd = match (&tf, cfg.alpha != 0.0) {
            (Some(tf), true) => {
                let t_logits = tf
                    .logits
                    .ok_or_else(|| CrcdError::config("KD needs a teacher classification head"))?;
                if t_logits.shape() != s_logits.shape() {
                    return Err(CrcdError::usage("teacher and student logits differ in shape"));
                }
                Some(kd_graph(t_logits, s_logits, cfg.rho))
            }
            _ => None,
        };

        let s_feat = feature_element_var(&sf, Space::Student, self.student.spec.feature_dim)?;
        let s_grad = gradient_element_var(
            &tape,
            &sf,
            self.student.head_weight(&sp),
            &batch.labels,
            &batch.sample_ids,
            Space::Student,
            cfg.gradient_options(),
        )?;

        let mut rc = [None, None];
        let mut saturations = 0;
        if let (Some(negs), Some(tf)) = (contrastive, &tf) {
            for e in ElementKind::ALL {
                if cfg.beta(e) == 0.0 {
                    continue;
                }
                let (t_el, s_el) = match e {
                    ElementKind::Feature => (
                        feature_element_var(tf, Space::Teacher, self.teacher.spec.feature_dim)?,
                        s_feat,
                    ),
                    ElementKind::Gradient => (
                        gradient_element_var(
                            &tape,
                            tf,
                            self.teacher.head_weight(&tp),
                            &batch.labels,
                            &batch.sample_ids,
                            Space::Teacher,
                            cfg.gradient_options(),
                        )?,
                        s_grad,
                    ),
                };
                let (l, sat) = self.element_loss(&tape, &rp, e, t_el, s_el, plan, negs);
                saturations += sat;
                rc[e.index()] = Some(l);
            }
        }

        let value = |v: Option<Var>| v.map(|v| v.scalar()).unwrap_or(0.0);
        let breakdown = total_objective(
            l_cls.scalar(),
            value(l_kd),
            value(rc[0]),
            value(rc[1]),
            cfg.weights(),
        )?;
        let mut total = l_cls;
        if let Some(kd) = l_kd {
            total = total.add(kd.scale(cfg.alpha));
        }
        for e in ElementKind::ALL {
            if let Some(l) = rc[e.index()] {
                total = total.add(l.scale(cfg.beta(e)));
            }
        }
        if !total.scalar().is_finite() {
            return Err(CrcdError::numerical("total loss"));
        }
        let root = match target {
            LossTarget::Total => total,
            LossTarget::RcFeature => rc[0].ok_or_else(|| CrcdError::usage("feature term inactive"))?,
            LossTarget::RcGradient => {
                rc[1].ok_or_else(|| CrcdError::usage("gradient term inactive"))?
            }
        };
        let grads = root.backward();
        Ok(ObjectiveEval {
            breakdown,
            student_grads: sp.collect_grads(&grads),
            relation_grads: rp.collect_grads(&grads),
            saturations,
            student_features: s_feat.vectors.matrix(),
            student_gradients: s_grad.vectors.matrix(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn element_loss<'t>(
        &self,
        tape: &'t Tape,
        rp: &crate::nn::BoundParams<'t>,
        e: ElementKind,
        t_el: ElementVars<'t>,
        s_el: ElementVars<'t>,
        plan: &StepPlan,
        negs: &[Vec<usize>],
    ) -> (Var<'t>, usize) {
        let cfg = &self.config;
        let k = e.index();
        let teacher_net = &self.relations.teacher_nets[k];
        let cross_net = &self.relations.cross_nets[k];
        let critic = &self.relations.critics[k];

        let ia: Vec<usize> = plan.pairs.iter().map(|p| p.0).collect();
        let ja: Vec<usize> = plan.pairs.iter().map(|p| p.1).collect();
        let r_t = teacher_net.forward(rp, t_el.vectors, &ia, t_el.vectors, &ja);
        let r_pos = cross_net.forward(rp, t_el.vectors, &ia, s_el.vectors, &ja);

        // Negatives depend only on the anchor, so each anchor's N relations
        // are built once and shared by every pair with that anchor.
        let mut uniq: Vec<usize> = negs.iter().flatten().copied().collect();
        uniq.sort_unstable();
        uniq.dedup();
        let slot: HashMap<usize, usize> = uniq.iter().enumerate().map(|(s, &p)| (p, s)).collect();
        let q = tape.constant_matrix(self.queue.gather(&uniq, e));
        let n = cfg.negatives;
        let mut na = Vec::with_capacity(plan.anchors.len() * n);
        let mut nb = Vec::with_capacity(plan.anchors.len() * n);
        for (a, positions) in plan.anchors.iter().zip(negs) {
            for p in positions {
                na.push(*a);
                nb.push(slot[p]);
            }
        }
        let r_neg = cross_net.forward(rp, t_el.vectors, &na, q, &nb);
        let group_of: HashMap<usize, usize> =
            plan.anchors.iter().enumerate().map(|(g, &a)| (a, g)).collect();
        let group: Vec<usize> = ia.iter().map(|a| group_of[a]).collect();

        let u = critic.embed_teacher(rp, r_t);
        let pos = u.row_dot(critic.embed_cross(rp, r_pos));
        let neg = u.grouped_dot(critic.embed_cross(rp, r_neg), &group, n);
        match cfg.contrastive_loss.baseline() {
            None => rc_graph(pos, neg, cfg.tau, cfg.literal_n),
            Some(kind) => {
                let param = if kind == BaselineLoss::TripletMargin {
                    cfg.margin
                } else {
                    cfg.tau
                };
                (baseline_graph(tape, kind, pos, neg, param), 0)
            }
        }
    }

    /// One optimizer update over student, relation-net and critic parameters.
    pub fn distill_step(&mut self, batch: &Batch, lr: f64) -> Result<StepMetrics> {
        let plan = self.plan_step(batch)?;
        let eval = self.loss_and_grads(batch, &plan, LossTarget::Total)?;
        let student_grad_norm = l2_norm(&eval.student_grads);
        self.student_opt
            .step(&mut self.student.params, eval.student_grads, lr);
        self.relation_opt
            .step(&mut self.relations.params, eval.relation_grads, lr);
        self.queue.push_batch(
            &batch.sample_ids,
            eval.student_features.view(),
            eval.student_gradients.view(),
        )?;
        let computed = plan.negatives.is_some();
        let metrics = StepMetrics {
            step: self.step,
            epoch: self.epoch,
            lr,
            loss: eval.breakdown,
            positive_pair_count: if computed { plan.pairs.len() } else { 0 },
            negatives_per_element: if computed {
                plan.anchors.len() * self.config.negatives
            } else {
                0
            },
            negative_saturation_count: eval.saturations,
            queue_fill: self.queue.fill(),
            student_grad_norm,
            contrastive_skipped: plan.warm_up,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Runs one epoch over `train` in a seeded order.
    pub fn run_epoch(
        &mut self,
        train: &Dataset,
        epoch: usize,
        augment: bool,
        on_step: &mut dyn FnMut(&StepMetrics),
    ) -> Result<EpochStats> {
        if train.is_empty() {
            return Err(CrcdError::usage("empty training split"));
        }
        self.epoch = epoch;
        let lr = self
            .config
            .optimizer
            .schedule()
            .lr_at(epoch, self.config.epochs);
        self.pair_rng = derive_rng(self.seed, "pairs", epoch as u64);
        self.queue
            .reseed(derive_rng(self.seed, "queue", epoch as u64));
        let mut aug_rng = derive_rng(self.seed, "augment", epoch as u64);
        let order = epoch_order(train.len(), self.seed, epoch);
        let mut stats = EpochStats::new(epoch, lr);
        for chunk in order.chunks(self.config.batch_size) {
            let batch = train.batch(chunk, augment.then_some(&mut aug_rng));
            let m = self.distill_step(&batch, lr)?;
            stats.add(&m);
            on_step(&m);
        }
        stats.finish(self.queue.fill());
        Ok(stats)
    }

    pub fn checkpoint(&self, epochs_completed: usize, config_hash: &str) -> DistillCheckpoint {
        DistillCheckpoint {
            version: CHECKPOINT_VERSION,
            epochs_completed,
            step: self.step,
            seed: self.seed,
            config_hash: config_hash.to_string(),
            teacher_fingerprint: self.teacher.fingerprint(),
            student: self.student.params.clone(),
            relations: self.relations.clone(),
            student_opt: self.student_opt.clone(),
            relation_opt: self.relation_opt.clone(),
            queue_restored: false,
        }
    }

    /// Restores trainable state. The queue starts empty and warms up again.
    pub fn restore(&mut self, ckpt: &DistillCheckpoint) -> Result<()> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CrcdError::Ingestion(format!(
                "checkpoint version {} unsupported",
                ckpt.version
            )));
        }
        if ckpt.seed != self.seed {
            return Err(CrcdError::Ingestion("checkpoint seed differs from run seed".into()));
        }
        if ckpt.teacher_fingerprint != self.teacher.fingerprint() {
            return Err(CrcdError::Ingestion("checkpoint was made with a different teacher".into()));
        }
        if !self.student.params.same_layout(&ckpt.student)
            || !self.relations.params.same_layout(&ckpt.relations.params)
        {
            return Err(CrcdError::Ingestion("checkpoint layout does not match config".into()));
        }
        self.student.params = ckpt.student.clone();
        self.relations = ckpt.relations.clone();
        self.student_opt = ckpt.student_opt.clone();
        self.relation_opt = ckpt.relation_opt.clone();
        self.step = ckpt.step;
        Ok(())
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillCheckpoint {
    pub version: u32,
    pub epochs_completed: usize,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    pub teacher_fingerprint: String,
    pub student: ParamStore,
    pub relations: RelationModule,
    pub student_opt: Sgd,
    pub relation_opt: Sgd,
    /// Always false: the replay queue is not saved.
    pub queue_restored: bool,
}

/// Per-epoch means of the step metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean_loss: LossBreakdown,
    pub skipped_steps: usize,
    pub saturations: usize,
    pub mean_student_grad_norm: f64,
    pub queue_fill: f64,
}

impl EpochStats {
    fn new(epoch: usize, lr: f64) -> Self {
        Self {
            epoch,
            lr,
            steps: 0,
            mean_loss: LossBreakdown::default(),
            skipped_steps: 0,
            saturations: 0,
            mean_student_grad_norm: 0.0,
            queue_fill: 0.0,
        }
    }

    fn add(&mut self, m: &StepMetrics) {
        self.steps += 1;
        let l = &mut self.mean_loss;
        l.l_cls += m.loss.l_cls;
        l.l_kd += m.loss.l_kd;
        l.l_rc_feature += m.loss.l_rc_feature;
        l.l_rc_gradient += m.loss.l_rc_gradient;
        l.total += m.loss.total;
        self.skipped_steps += m.contrastive_skipped as usize;
        self.saturations += m.negative_saturation_count;
        self.mean_student_grad_norm += m.student_grad_norm;
    }

    fn finish(&mut self, queue_fill: f64) {
        let n = self.steps.max(1) as f64;
        let l = &mut self.mean_loss;
        l.l_cls /= n;
        l.l_kd /= n;
        l.l_rc_feature /= n;
        l.l_rc_gradient /= n;
        l.total /= n;
        self.mean_student_grad_norm /= n;
        self.queue_fill = queue_fill;
    }
}

/// Anything that maps a batch of inputs to class scores.
pub trait Classifier {
    fn class_scores(&self, inputs: &Tensor) -> Result<Array2<f64>>;
}

impl Classifier for Model {
    fn class_scores(&self, inputs: &Tensor) -> Result<Array2<f64>> {
        self.predict(inputs)
    }
}

/// Accuracies in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub top1: f64,
    /// Present when there are at least five classes.
    pub top5: Option<f64>,
    pub samples: usize,
}

/// Rank of the true class: larger scores first, ties broken by lower index.
fn label_rank(row: ndarray::ArrayView1<f64>, label: usize) -> usize {
    let y = row[label];
    row.iter()
        .enumerate()
        .filter(|&(k, &v)| v > y || (v == y && k < label))
        .count()
}

const EVAL_BATCH: usize = 256;

pub fn evaluate(model: &dyn Classifier, split: &Dataset) -> Result<AccuracyReport> {
    if split.is_empty() {
        return Err(CrcdError::usage("cannot evaluate on an empty split"));
    }
    let mut hit1 = 0usize;
    let mut hit5 = 0usize;
    let all: Vec<usize> = (0..split.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let batch = split.batch(chunk, None);
        let scores = model.class_scores(&batch.inputs)?;
        let pred = argmax_rows(&scores);
        for (r, &y) in batch.labels.iter().enumerate() {
            hit1 += (pred[r] == y) as usize;
            hit5 += (label_rank(scores.row(r), y) < 5) as usize;
        }
    }
    let n = split.len() as f64;
    Ok(AccuracyReport {
        top1: 100.0 * hit1 as f64 / n,
        top5: (split.num_classes >= 5).then(|| 100.0 * hit5 as f64 / n),
        samples: split.len(),
    })
}

/// One plain cross-entropy update; returns the batch loss.
pub fn supervised_step(model: &mut Model, opt: &mut Sgd, batch: &Batch, lr: f64) -> Result<f64> {
    let tape = Tape::new();
    let p = model.bind(&tape, true);
    let fwd = model.forward(&p, tape.constant(batch.inputs.clone()))?;
    let logits = fwd
        .logits
        .ok_or_else(|| CrcdError::config("supervised training needs a classification head"))?;
    let loss = cross_entropy_graph(logits, &batch.labels);
    let value = loss.scalar();
    if !value.is_finite() {
        return Err(CrcdError::Numerical {
            component: format!("cross-entropy at lr {lr} (diverged; try a smaller lr)"),
            sample_id: None,
        });
    }
    let grads = p.collect_grads(&loss.backward());
    opt.step(&mut model.params, grads, lr);
    Ok(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub test: AccuracyReport,
}

/// Trains `model` with cross-entropy for `epochs` and evaluates after each.
#[allow(clippy::too_many_arguments)]
pub fn train_supervised(
    model: &mut Model,
    train: &Dataset,
    test: &Dataset,
    optim: &OptimConfig,
    epochs: usize,
    batch_size: usize,
    seed: u64,
    augment: bool,
    on_epoch: &mut dyn FnMut(&SupervisedEpoch),
) -> Result<Vec<SupervisedEpoch>> {
    optim.validate("teacher.optimizer")?;
    if batch_size == 0 {
        return Err(CrcdError::usage("batch_size must be at least 1"));
    }
    if train.is_empty() {
        return Err(CrcdError::usage("empty training split"));
    }
    let mut opt = Sgd::new(optim.sgd(), model.params.len());
    let schedule = optim.schedule();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let lr = schedule.lr_at(epoch, epochs);
        let mut rng = derive_rng(seed, "teacher-augment", epoch as u64);
        let order = epoch_order(train.len(), seed ^ 0x7465_6163_6865_72, epoch);
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(batch_size) {
            let batch = train.batch(chunk, augment.then_some(&mut rng));
            sum += supervised_step(model, &mut opt, &batch, lr)?;
            steps += 1;
        }
        let rec = SupervisedEpoch {
            epoch,
            lr,
            mean_loss: sum / steps as f64,
            test: evaluate(model, test)?,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, DatasetHandle, DatasetKind};
    use crate::models::{build_model, ModelSpec};

    fn tiny_config() -> DistillConfig {
        DistillConfig {
            negatives: 3,
            relation_dim: 5,
            proj_dim: 3,
            batch_size: 4,
            tau: 0.5,
            epochs: 2,
            ..Default::default()
        }
    }

    fn tiny_data() -> crate::data::LoadedData {
        load_dataset(&DatasetHandle {
            kind: DatasetKind::Synthetic,
            num_classes: 3,
            sample_shape: vec![6],
            train_per_class: 6,
            test_per_class: 4,
            ..Default::default()
        })
        .unwrap()
    }

    fn distiller(cfg: DistillConfig) -> Distiller {
        let t = build_model(&ModelSpec::mlp(6, &[8], 5, 3), 1).unwrap();
        let s = build_model(&ModelSpec::mlp(6, &[], 4, 3), 2).unwrap();
        Distiller::new(cfg, t, s, 9).unwrap()
    }

    #[test]
    fn pair_index_enumeration() {
        assert_eq!(
            build_pair_index(2, PairSelection::All, 0).unwrap(),
            vec![(0, 0), (0, 1), (1, 0), (1, 1)]
        );
        assert_eq!(build_pair_index(64, PairSelection::All, 0).unwrap().len(), 4096);
        assert_eq!(build_pair_index(3, PairSelection::Diagonal, 0).unwrap(), vec![(0, 0), (1, 1), (2, 2)]);
        assert!(build_pair_index(2, PairSelection::Subsample(5), 0).is_err());
        assert!(build_pair_index(0, PairSelection::All, 0).is_err());
    }

    #[test]
    fn pair_subsample_matches_independent_draw() {
        let got = build_pair_index(8, PairSelection::Subsample(16), 42).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut pool: Vec<usize> = (0..64).collect();
        let mut drawn = Vec::new();
        for k in 0..16 {
            let j = rng.random_range(k..64);
            pool.swap(k, j);
            drawn.push(pool[k]);
        }
        drawn.sort();
        let expect: Vec<(usize, usize)> = drawn.iter().map(|f| (f / 8, f % 8)).collect();
        assert_eq!(got, expect);
        assert_eq!(got, build_pair_index(8, PairSelection::Subsample(16), 42).unwrap());
    }

    #[test]
    fn pair_selection_serde() {
        #[derive(Deserialize, Serialize)]
        struct W {
            p: PairSelection,
        }
        let w: W = toml::from_str("p = \"all\"").unwrap();
        assert_eq!(w.p, PairSelection::All);
        let w: W = toml::from_str("p = 16").unwrap();
        assert_eq!(w.p, PairSelection::Subsample(16));
        assert!(toml::from_str::<W>("p = \"some\"").is_err());
        assert_eq!(toml::to_string(&W { p: PairSelection::Diagonal }).unwrap().trim(), "p = \"diagonal\"");
    }

    #[test]
    fn warm_up_then_contrastive() {
        let data = tiny_data();
        let mut d = distiller(tiny_config());
        let b1 = data.train.batch(&[0, 1, 2, 3], None);
        let m = d.distill_step(&b1, 0.01).unwrap();
        assert!(m.contrastive_skipped);
        assert_eq!(m.loss.l_rc_feature, 0.0);
        let b2 = data.train.batch(&[4, 5, 6, 7], None);
        let m = d.distill_step(&b2, 0.01).unwrap();
        assert!(!m.contrastive_skipped);
        assert_eq!(m.positive_pair_count, 16);
        assert_eq!(m.negatives_per_element, 4 * 3);
        assert!(m.loss.l_rc_feature > 0.0 && m.loss.l_rc_gradient > 0.0);
        let w = d.config.weights();
        let l = m.loss;
        let expect = l.l_cls + w.alpha * l.l_kd + w.beta1 * l.l_rc_feature + w.beta2 * l.l_rc_gradient;
        assert!((l.total - expect).abs() <= 1e-6 * expect.abs());
    }

    #[test]
    fn zero_weights_match_cross_entropy_step_bitwise() {
        let data = tiny_data();
        let cfg = DistillConfig {
            alpha: 0.0,
            beta1: 0.0,
            beta2: 0.0,
            ..tiny_config()
        };
        let mut d = distiller(cfg.clone());
        let mut plain = d.student.clone();
        let mut opt = Sgd::new(cfg.optimizer.sgd(), plain.params.len());
        let relations_before = d.relations.params.fingerprint();
        for chunk in [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9, 10, 11]] {
            let b = data.train.batch(&chunk, None);
            d.distill_step(&b, 0.05).unwrap();
            supervised_step(&mut plain, &mut opt, &b, 0.05).unwrap();
        }
        assert_eq!(d.student.fingerprint(), plain.fingerprint());
        assert_eq!(relations_before, d.relations.params.fingerprint());
    }

    #[test]
    fn teacher_is_never_modified() {
        let data = tiny_data();
        let mut d = distiller(tiny_config());
        let before = d.teacher.fingerprint();
        d.run_epoch(&data.train, 0, false, &mut |_| {}).unwrap();
        assert_eq!(before, d.teacher.fingerprint());
    }

    #[test]
    fn detached_gradient_element_only_updates_relation_side() {
        let data = tiny_data();
        let cfg = DistillConfig {
            higher_order: false,
            ..tiny_config()
        };
        let mut d = distiller(cfg);
        d.distill_step(&data.train.batch(&[0, 1, 2, 3], None), 0.0).unwrap();
        let b = data.train.batch(&[4, 5, 6, 7], None);
        let plan = d.plan_step(&b).unwrap();
        let eval = d.loss_and_grads(&b, &plan, LossTarget::RcGradient).unwrap();
        assert!(eval.student_grads.iter().all(|g| g.is_none()));
        assert!(eval.relation_grads.iter().any(|g| g.is_some()));

        let mut d = distiller(tiny_config());
        d.distill_step(&data.train.batch(&[0, 1, 2, 3], None), 0.0).unwrap();
        let plan = d.plan_step(&b).unwrap();
        let eval = d.loss_and_grads(&b, &plan, LossTarget::RcGradient).unwrap();
        assert!(eval.student_grads.iter().any(|g| g.is_some()));
    }

    #[test]
    fn diagonal_pairs_count_b() {
        let data = tiny_data();
        let mut d = distiller(DistillConfig {
            pairs_per_batch: PairSelection::Diagonal,
            ..tiny_config()
        });
        d.distill_step(&data.train.batch(&[0, 1, 2, 3], None), 0.01).unwrap();
        let m = d.distill_step(&data.train.batch(&[4, 5, 6, 7], None), 0.01).unwrap();
        assert_eq!(m.positive_pair_count, 4);
    }

    #[test]
    fn baselines_run() {
        let data = tiny_data();
        for kind in [ContrastiveLoss::TripletMargin, ContrastiveLoss::Logistic, ContrastiveLoss::InfoNce] {
            let mut d = distiller(DistillConfig {
                contrastive_loss: kind,
                critic_mode: CriticMode::Nonlinear,
                ..tiny_config()
            });
            let stats = d.run_epoch(&data.train, 0, false, &mut |_| {}).unwrap();
            assert!(stats.mean_loss.total.is_finite());
        }
    }

    #[test]
    fn deterministic_epochs() {
        let data = tiny_data();
        let run = || {
            let mut d = distiller(DistillConfig {
                sampling_policy: SamplingPolicy::Random,
                pairs_per_batch: PairSelection::Subsample(6),
                ..tiny_config()
            });
            let mut log = Vec::new();
            for e in 0..2 {
                d.run_epoch(&data.train, e, true, &mut |m| log.push(m.clone())).unwrap();
            }
            (log, d.student.fingerprint())
        };
        assert_eq!(run(), run());
    }

    struct Oracle(Vec<usize>, usize);
    impl Classifier for Oracle {
        fn class_scores(&self, inputs: &Tensor) -> Result<Array2<f64>> {
            let n = inputs.shape()[0];
            let mut m = Array2::zeros((n, self.1));
            // Inputs carry their row index in column 0.
            for r in 0..n {
                m[[r, self.0[inputs[[r, 0]] as usize]]] = 1.0;
            }
            Ok(m)
        }
    }

    struct Constant(usize);
    impl Classifier for Constant {
        fn class_scores(&self, inputs: &Tensor) -> Result<Array2<f64>> {
            let mut m = Array2::zeros((inputs.shape()[0], self.0));
            m.column_mut(0).fill(1.0);
            Ok(m)
        }
    }

    fn indexed_split(k: usize, per: usize) -> Dataset {
        let n = k * per;
        Dataset {
            name: "idx".into(),
            inputs: Array2::from_shape_fn((n, 2), |(r, c)| if c == 0 { r as f64 } else { 0.0 }),
            sample_shape: vec![2],
            labels: (0..n).map(|i| i % k).collect(),
            num_classes: k,
        }
    }

    #[test]
    fn evaluate_oracle_and_constant() {
        let split = indexed_split(4, 10);
        let r = evaluate(&Oracle(split.labels.clone(), 4), &split).unwrap();
        assert_eq!(r.top1, 100.0);
        assert_eq!(r.top5, None);
        let r = evaluate(&Constant(4), &split).unwrap();
        assert_eq!(r.top1, 25.0);
        let split = indexed_split(10, 3);
        let r = evaluate(&Constant(10), &split).unwrap();
        assert_eq!(r.top1, 10.0);
        // Ties rank by index: classes 0..4 are the top five.
        assert_eq!(r.top5, Some(50.0));
        assert!(evaluate(&Constant(2), &indexed_split(2, 0)).is_err());
    }

    #[test]
    fn evaluate_matches_independent_argmax_count() {
        let data = load_dataset(&DatasetHandle {
            kind: DatasetKind::Synthetic,
            num_classes: 5,
            sample_shape: vec![6],
            train_per_class: 2,
            test_per_class: 20,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(data.test.len(), 100);
        let m = build_model(&ModelSpec::mlp(6, &[7], 4, 5), 3).unwrap();
        let r = evaluate(&m, &data.test).unwrap();
        let mut hits = 0;
        for i in 0..100 {
            let row = data.test.inputs.row(i).to_owned().insert_axis(ndarray::Axis(0)).into_dyn();
            let z = m.predict(&row).unwrap();
            let mut best = 0;
            for k in 1..5 {
                if z[[0, k]] > z[[0, best]] {
                    best = k;
                }
            }
            hits += (best == data.test.labels[i]) as usize;
        }
        assert_eq!(r.top1, hits as f64);
    }

    #[test]
    fn separable_teacher_reaches_99() {
        let data = load_dataset(&DatasetHandle {
            kind: DatasetKind::Separable,
            sample_shape: vec![4],
            train_per_class: 100,
            test_per_class: 100,
            ..Default::default()
        })
        .unwrap();
        let mut m = build_model(&ModelSpec::mlp(4, &[8], 4, 2), 0).unwrap();
        let zero = evaluate(&m, &data.test).unwrap();
        assert!(zero.top1 <= 100.0);
        let hist = train_supervised(
            &mut m,
            &data.train,
            &data.test,
            &OptimConfig::default(),
            10,
            32,
            0,
            false,
            &mut |_| {},
        )
        .unwrap();
        assert!(hist.last().unwrap().test.top1 >= 99.0, "{:?}", hist.last());
    }

    #[test]
    fn divergence_reports_lr() {
        let data = tiny_data();
        let mut m = build_model(&ModelSpec::mlp(6, &[], 4, 3), 0).unwrap();
        let w = m.params.find("head.weight").unwrap();
        m.params.get_mut(w).fill(f64::NAN);
        let mut opt = Sgd::new(SgdConfig::default(), m.params.len());
        let err = supervised_step(&mut m, &mut opt, &data.train.batch(&[0, 1], None), 0.5).unwrap_err();
        assert!(err.to_string().contains("lr 0.5"));
    }

    #[test]
    fn checkpoint_roundtrip_restores_state() {
        let data = tiny_data();
        let mut d = distiller(tiny_config());
        d.run_epoch(&data.train, 0, false, &mut |_| {}).unwrap();
        let ck = d.checkpoint(1, "h");
        let json = serde_json::to_string(&ck).unwrap();
        let back: DistillCheckpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ck);
        let mut fresh = distiller(tiny_config());
        fresh.restore(&back).unwrap();
        assert_eq!(fresh.student.fingerprint(), d.student.fingerprint());
        assert_eq!(fresh.relations, d.relations);
        assert_eq!(fresh.queue.len(), 0);
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        let bad = DistillConfig {
            tau: 0.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(CrcdError::Schema { field, .. }) if field == "distill.tau"));
        let bad = DistillConfig {
            batch_size: 2,
            pairs_per_batch: PairSelection::Subsample(5),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(DistillConfig::default().queue_capacity(), 500);
    }
}
