//! Relation sub-networks and the critic that scores relation pairs.
//!
//! A relation between an anchor `a` and another representation `b` is
//! `W_out · relu(W_left a − W_right b)`. Teacher-space nets relate two teacher
//! representations; cross-space nets relate a teacher anchor to a student
//! representation. The critic maps a pair of relations to
//! `exp((⟨ℓ2(h1 r_T), ℓ2(h2 r_TS)⟩ − 1) / τ)`.

use ndarray::Array1;
#[cfg(test)]
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::elements::{ElementKind, Representation, Space};
use crate::error::{CrcdError, Result};
use crate::nn::{linear_weight, BoundParams, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    TeacherSpace,
    CrossSpace,
}

/// One relation sub-network. Weights live in an external [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationNet {
    pub kind: RelationKind,
    pub element: ElementKind,
    pub left_dim: usize,
    pub right_dim: usize,
    pub relation_dim: usize,
    pub w_left: ParamId,
    pub w_right: ParamId,
    pub w_out: ParamId,
}

impl RelationNet {
    pub fn new(
        store: &mut ParamStore,
        kind: RelationKind,
        element: ElementKind,
        left_dim: usize,
        right_dim: usize,
        relation_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let prefix = format!("{}.{}", kind_name(kind), element_name(element));
        let w_left = store.add(format!("{prefix}.w_left"), linear_weight(relation_dim, left_dim, rng));
        let w_right = store.add(format!("{prefix}.w_right"), linear_weight(relation_dim, right_dim, rng));
        let w_out = store.add(
            format!("{prefix}.w_out"),
            linear_weight(relation_dim, relation_dim, rng),
        );
        Self {
            kind,
            element,
            left_dim,
            right_dim,
            relation_dim,
            w_left,
            w_right,
            w_out,
        }
    }

    /// Relations for row pairs `(a[ia[m]], b[ib[m]])`, shape `[M, relation_dim]`.
    ///
    /// Each input row is projected once, then differences are gathered.
    pub fn forward<'t>(
        &self,
        p: &BoundParams<'t>,
        a: Var<'t>,
        ia: &[usize],
        b: Var<'t>,
        ib: &[usize],
    ) -> Var<'t> {
        let left = a.matmul_t(p.get(self.w_left));
        let right = b.matmul_t(p.get(self.w_right));
        left.gather_sub(ia, right, ib).relu().matmul_t(p.get(self.w_out))
    }
}

fn kind_name(k: RelationKind) -> &'static str {
    match k {
        RelationKind::TeacherSpace => "teacher_space",
        RelationKind::CrossSpace => "cross_space",
    }
}

fn element_name(e: ElementKind) -> &'static str {
    match e {
        ElementKind::Feature => "feature",
        ElementKind::Gradient => "gradient",
    }
}

/// A relation vector produced outside the training graph.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationVector {
    pub values: Array1<f64>,
    pub kind: RelationKind,
    pub element: ElementKind,
    pub pair: (usize, usize),
}

fn eval_single(
    net: &RelationNet,
    store: &ParamStore,
    a: &Representation,
    b: &Representation,
) -> Result<RelationVector> {
    if a.values.len() != net.left_dim || b.values.len() != net.right_dim {
        return Err(CrcdError::usage(format!(
            "relation net expects dims ({}, {}), got ({}, {})",
            net.left_dim,
            net.right_dim,
            a.values.len(),
            b.values.len()
        )));
    }
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let av = tape.constant_matrix(a.values.clone().insert_axis(ndarray::Axis(0)));
    let bv = tape.constant_matrix(b.values.clone().insert_axis(ndarray::Axis(0)));
    let r = net.forward(&p, av, &[0], bv, &[0]).matrix().row(0).to_owned();
    if r.iter().any(|v| !v.is_finite()) {
        return Err(CrcdError::numerical("relation net"));
    }
    Ok(RelationVector {
        values: r,
        kind: net.kind,
        element: net.element,
        pair: (a.sample_id, b.sample_id),
    })
}

fn check_element(net: &RelationNet, a: &Representation, b: &Representation) -> Result<()> {
    if a.element != b.element {
        return Err(CrcdError::usage(format!(
            "element mismatch: {:?} vs {:?}",
            a.element, b.element
        )));
    }
    if a.element != net.element {
        return Err(CrcdError::usage(format!(
            "{:?} relation net given {:?} inputs",
            net.element, a.element
        )));
    }
    Ok(())
}

/// Anchor-teacher relation between two teacher representations.
pub fn teacher_relation(
    net: &RelationNet,
    store: &ParamStore,
    phi_t_i: &Representation,
    phi_t_j: &Representation,
) -> Result<RelationVector> {
    if net.kind != RelationKind::TeacherSpace {
        return Err(CrcdError::usage("teacher_relation needs a teacher-space net"));
    }
    check_element(net, phi_t_i, phi_t_j)?;
    if phi_t_i.space != Space::Teacher || phi_t_j.space != Space::Teacher {
        return Err(CrcdError::usage("teacher_relation takes two teacher representations"));
    }
    eval_single(net, store, phi_t_i, phi_t_j)
}

/// Anchor-student relation: teacher anchor first, student representation second.
pub fn cross_relation(
    net: &RelationNet,
    store: &ParamStore,
    phi_t_i: &Representation,
    phi_s_j: &Representation,
) -> Result<RelationVector> {
    if net.kind != RelationKind::CrossSpace {
        return Err(CrcdError::usage("cross_relation needs a cross-space net"));
    }
    check_element(net, phi_t_i, phi_s_j)?;
    if phi_t_i.space != Space::Teacher || phi_s_j.space != Space::Student {
        return Err(CrcdError::usage(
            "cross_relation takes the teacher anchor first and the student representation second",
        ));
    }
    eval_single(net, store, phi_t_i, phi_s_j)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticMode {
    /// `h(r) = W r`
    Linear,
    /// `h(r) = r`
    Identity,
    /// `h(r) = W2 relu(W1 r)`
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Projection {
    Identity,
    Linear(ParamId),
    Nonlinear { w1: ParamId, w2: ParamId },
}

impl Projection {
    fn new(
        store: &mut ParamStore,
        name: &str,
        mode: CriticMode,
        relation_dim: usize,
        proj_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        match mode {
            CriticMode::Identity => Projection::Identity,
            CriticMode::Linear => Projection::Linear(store.add(
                format!("{name}.weight"),
                linear_weight(proj_dim, relation_dim, rng),
            )),
            CriticMode::Nonlinear => {
                let w1 = store.add(
                    format!("{name}.w1"),
                    linear_weight(relation_dim, relation_dim, rng),
                );
                let w2 = store.add(format!("{name}.w2"), linear_weight(proj_dim, relation_dim, rng));
                Projection::Nonlinear { w1, w2 }
            }
        }
    }

    pub fn apply<'t>(&self, p: &BoundParams<'t>, r: Var<'t>) -> Var<'t> {
        match self {
            Projection::Identity => r,
            Projection::Linear(w) => r.matmul_t(p.get(*w)),
            Projection::Nonlinear { w1, w2 } => r.matmul_t(p.get(*w1)).relu().matmul_t(p.get(*w2)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub mode: CriticMode,
    pub tau: f64,
    pub relation_dim: usize,
    pub proj_dim: usize,
    pub h1: Projection,
    pub h2: Projection,
}

/// Floor for the projected-relation norm inside the training graph.
pub const PROJECTION_NORM_FLOOR: f64 = 1e-12;

impl Critic {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        mode: CriticMode,
        relation_dim: usize,
        proj_dim: usize,
        tau: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(CrcdError::config(format!("tau must be positive, got {tau}")));
        }
        if proj_dim == 0 || relation_dim == 0 {
            return Err(CrcdError::config("relation_dim and proj_dim must be positive"));
        }
        let proj_dim = if mode == CriticMode::Identity {
            relation_dim
        } else {
            proj_dim
        };
        let h1 = Projection::new(store, &format!("{name}.h1"), mode, relation_dim, proj_dim, rng);
        let h2 = Projection::new(store, &format!("{name}.h2"), mode, relation_dim, proj_dim, rng);
        Ok(Self {
            mode,
            tau,
            relation_dim,
            proj_dim,
            h1,
            h2,
        })
    }

    /// `ℓ2(h1 r_T)` rows.
    pub fn embed_teacher<'t>(&self, p: &BoundParams<'t>, r_t: Var<'t>) -> Var<'t> {
        self.h1.apply(p, r_t).l2_normalize_rows(PROJECTION_NORM_FLOOR)
    }

    /// `ℓ2(h2 r_TS)` rows.
    pub fn embed_cross<'t>(&self, p: &BoundParams<'t>, r_ts: Var<'t>) -> Var<'t> {
        self.h2.apply(p, r_ts).l2_normalize_rows(PROJECTION_NORM_FLOOR)
    }

    /// Score from a cosine `d`: `exp((d − 1)/τ)`.
    pub fn score_from_dot(&self, d: f64) -> f64 {
        ((d - 1.0) / self.tau).exp()
    }

    pub fn min_score(&self) -> f64 {
        (-2.0 / self.tau).exp()
    }

    /// Projections of a single relation, without normalization.
    fn project_raw(&self, store: &ParamStore, r: &Array1<f64>, second: bool) -> Array1<f64> {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let v = tape.constant_matrix(r.clone().insert_axis(ndarray::Axis(0)));
        let h = if second { &self.h2 } else { &self.h1 };
        h.apply(&p, v).matrix().row(0).to_owned()
    }
}

/// Critic score of a teacher-space relation against a cross-space relation.
pub fn critic_score(
    critic: &Critic,
    store: &ParamStore,
    r_t: &RelationVector,
    r_ts: &RelationVector,
) -> Result<f64> {
    if r_t.values.len() != critic.relation_dim || r_ts.values.len() != critic.relation_dim {
        return Err(CrcdError::usage(format!(
            "critic expects relations of length {}",
            critic.relation_dim
        )));
    }
    if r_t.kind != RelationKind::TeacherSpace || r_ts.kind != RelationKind::CrossSpace {
        return Err(CrcdError::usage(
            "critic_score takes the teacher-space relation first",
        ));
    }
    let u = critic.project_raw(store, &r_t.values, false);
    let v = critic.project_raw(store, &r_ts.values, true);
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        let pair = if nu == 0.0 || !nu.is_finite() { r_t.pair } else { r_ts.pair };
        return Err(CrcdError::DegenerateRelation {
            anchor: pair.0,
            other: pair.1,
        });
    }
    let d = (u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0);
    Ok(critic.score_from_dot(d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationConfig {
    pub relation_dim: usize,
    pub proj_dim: usize,
    pub tau: f64,
    pub critic_mode: CriticMode,
}

impl Default for RelationConfig {
    fn default() -> Self {
        Self {
            relation_dim: 256,
            proj_dim: 128,
            tau: 0.05,
            critic_mode: CriticMode::Linear,
        }
    }
}

/// The four relation sub-networks and the two per-element critics, sharing
/// one parameter store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationModule {
    pub params: ParamStore,
    /// Indexed by element: `[feature, gradient]`.
    pub teacher_nets: [RelationNet; 2],
    pub cross_nets: [RelationNet; 2],
    pub critics: [Critic; 2],
}

impl RelationModule {
    pub fn new(
        teacher_dim: usize,
        student_dim: usize,
        cfg: &RelationConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if cfg.relation_dim == 0 {
            return Err(CrcdError::config("relation_dim must be positive"));
        }
        let mut params = ParamStore::new();
        let mut build = |kind, element, right| {
            RelationNet::new(&mut params, kind, element, teacher_dim, right, cfg.relation_dim, rng)
        };
        let teacher_nets = [
            build(RelationKind::TeacherSpace, ElementKind::Feature, teacher_dim),
            build(RelationKind::TeacherSpace, ElementKind::Gradient, teacher_dim),
        ];
        let cross_nets = [
            build(RelationKind::CrossSpace, ElementKind::Feature, student_dim),
            build(RelationKind::CrossSpace, ElementKind::Gradient, student_dim),
        ];
        let critics = [
            Critic::new(&mut params, "critic.feature", cfg.critic_mode, cfg.relation_dim, cfg.proj_dim, cfg.tau, rng)?,
            Critic::new(&mut params, "critic.gradient", cfg.critic_mode, cfg.relation_dim, cfg.proj_dim, cfg.tau, rng)?,
        ];
        Ok(Self {
            params,
            teacher_nets,
            cross_nets,
            critics,
        })
    }
}
