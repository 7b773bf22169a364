//! Synthetic joint distributions with known mutual information, and a check
//! that the contrastive bound `log N + I(h)` never exceeds it.
//!
//! The critic is the same projection + ℓ2 + `exp((d − 1)/τ)` scorer used for
//! relations, applied to inputs lifted to `[x, 1]` (one-hot for discrete
//! values). `I(h)` is estimated on held-out data as
//! `mean_m [ln h⁺_m + Σ_k ln(1 − h⁻_mk)]`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{log1m_exp, Tape};
use crate::data::{derive_rng, sample_normal};
use crate::error::{CrcdError, Result};
use crate::losses::{rc_graph, SATURATION_EPS};
use crate::nn::{ParamStore, Sgd, SgdConfig};
use crate::relation::{Critic, CriticMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JointKind {
    /// `v = ρ u + sqrt(1 − ρ²) ε` per dimension, `u, ε ~ N(0, I)`.
    GaussianPair { rho: f64, dim: usize },
    /// `table[a][b] = P(u = a, v = b)`.
    DiscreteJoint { table: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticJointSpec {
    pub kind: JointKind,
    pub seed: u64,
}

impl SyntheticJointSpec {
    pub fn gaussian(rho: f64, dim: usize, seed: u64) -> Self {
        Self {
            kind: JointKind::GaussianPair { rho, dim },
            seed,
        }
    }

    pub fn discrete(table: Vec<Vec<f64>>, seed: u64) -> Self {
        Self {
            kind: JointKind::DiscreteJoint { table },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            JointKind::GaussianPair { rho, dim } => {
                if !(rho.abs() < 1.0) {
                    return Err(CrcdError::usage(format!("correlation {rho} must satisfy |ρ| < 1")));
                }
                if *dim == 0 {
                    return Err(CrcdError::usage("gaussian dim must be at least 1"));
                }
            }
            JointKind::DiscreteJoint { table } => {
                let cols = table.first().map(Vec::len).unwrap_or(0);
                if cols == 0 || table.iter().any(|r| r.len() != cols) {
                    return Err(CrcdError::usage("discrete table must be a non-empty rectangle"));
                }
                if table.iter().flatten().any(|&p| !(p >= 0.0)) {
                    return Err(CrcdError::usage("discrete table entries must be >= 0"));
                }
                let s: f64 = table.iter().flatten().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(CrcdError::usage(format!("discrete table sums to {s}, not 1")));
                }
            }
        }
        Ok(())
    }

    /// Width of the lifted critic input.
    fn lifted_dim(&self) -> usize {
        match &self.kind {
            JointKind::GaussianPair { dim, .. } => dim + 1,
            JointKind::DiscreteJoint { table } => table.len().max(table[0].len()) + 1,
        }
    }
}

impl fmt::Display for SyntheticJointSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            JointKind::GaussianPair { rho, dim } if *dim == 1 => write!(f, "gaussian:{rho}"),
            JointKind::GaussianPair { rho, dim } => write!(f, "gaussian:{rho}:{dim}"),
            JointKind::DiscreteJoint { table } => {
                let rows: Vec<String> = table
                    .iter()
                    .map(|r| r.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(","))
                    .collect();
                write!(f, "discrete:{}", rows.join(";"))
            }
        }
    }
}

/// `gaussian:RHO[:DIM]` or `discrete:p00,p01;p10,p11` (rows separated by `;`).
impl FromStr for SyntheticJointSpec {
    type Err = CrcdError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || CrcdError::usage(format!("cannot parse joint spec `{s}`"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let spec = match kind {
            "gaussian" => {
                let mut parts = rest.split(':');
                let rho = parts.next().and_then(|r| r.parse().ok()).ok_or_else(bad)?;
                let dim = match parts.next() {
                    Some(d) => d.parse().map_err(|_| bad())?,
                    None => 1,
                };
                Self::gaussian(rho, dim, 0)
            }
            "discrete" => {
                let table = rest
                    .split(';')
                    .map(|row| row.split(',').map(|p| p.trim().parse::<f64>()).collect())
                    .collect::<std::result::Result<Vec<Vec<f64>>, _>>()
                    .map_err(|_| bad())?;
                Self::discrete(table, 0)
            }
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Exact mutual information in nats.
pub fn true_mi(spec: &SyntheticJointSpec) -> Result<f64> {
    spec.validate()?;
    Ok(match &spec.kind {
        JointKind::GaussianPair { rho, dim } => -0.5 * (1.0 - rho * rho).ln() * *dim as f64,
        JointKind::DiscreteJoint { table } => {
            let pu: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
            let pv: Vec<f64> = (0..table[0].len())
                .map(|b| table.iter().map(|r| r[b]).sum())
                .collect();
            let mut mi = 0.0;
            for (a, row) in table.iter().enumerate() {
                for (b, &p) in row.iter().enumerate() {
                    if p > 0.0 {
                        mi += p * (p / (pu[a] * pv[b])).ln();
                    }
                }
            }
            mi
        }
    })
}

fn draw_index(p: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if x < acc {
            return i;
        }
    }
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(0)
}

/// Draws pairs from one spec with a private generator.
pub struct PairSampler {
    spec: SyntheticJointSpec,
    rng: ChaCha8Rng,
    flat: Vec<f64>,
    pv: Vec<f64>,
}

impl PairSampler {
    pub fn new(spec: &SyntheticJointSpec, rng: ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let (flat, pv) = match &spec.kind {
            JointKind::DiscreteJoint { table } => (
                table.iter().flatten().copied().collect(),
                (0..table[0].len())
                    .map(|b| table.iter().map(|r| r[b]).sum())
                    .collect(),
            ),
            _ => (Vec::new(), Vec::new()),
        };
        Ok(Self {
            spec: spec.clone(),
            rng,
            flat,
            pv,
        })
    }

    /// Raw values: real vectors for gaussian specs, category indices (as f64)
    /// for discrete ones. Rows of `u` and `v` pair up.
    pub fn pairs(&mut self, n: usize, from_joint: bool) -> (Array2<f64>, Array2<f64>) {
        match self.spec.kind.clone() {
            JointKind::GaussianPair { rho, dim } => {
                let mut u = Array2::zeros((n, dim));
                let mut v = Array2::zeros((n, dim));
                let s = (1.0 - rho * rho).sqrt();
                for i in 0..n {
                    for d in 0..dim {
                        let a = sample_normal(&mut self.rng);
                        let e = sample_normal(&mut self.rng);
                        u[[i, d]] = a;
                        v[[i, d]] = if from_joint { rho * a + s * e } else { e };
                    }
                }
                (u, v)
            }
            JointKind::DiscreteJoint { table } => {
                let cols = table[0].len();
                let pu: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
                let mut u = Array2::zeros((n, 1));
                let mut v = Array2::zeros((n, 1));
                for i in 0..n {
                    let (a, b) = if from_joint {
                        let f = draw_index(&self.flat, &mut self.rng);
                        (f / cols, f % cols)
                    } else {
                        let a = draw_index(&pu, &mut self.rng);
                        (a, draw_index(&self.pv, &mut self.rng))
                    };
                    u[[i, 0]] = a as f64;
                    v[[i, 0]] = b as f64;
                }
                (u, v)
            }
        }
    }

    /// `n` draws from the marginal of `v`.
    pub fn marginal_v(&mut self, n: usize) -> Array2<f64> {
        self.pairs(n, false).1
    }
}

/// Seeded pairs from the joint or from the product of marginals.
pub fn sample_pairs(
    spec: &SyntheticJointSpec,
    n: usize,
    from_joint: bool,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if n == 0 {
        return Err(CrcdError::usage("n must be at least 1"));
    }
    let purpose = if from_joint { "mi-joint" } else { "mi-marginal" };
    let mut s = PairSampler::new(spec, derive_rng(spec.seed, purpose, 0))?;
    Ok(s.pairs(n, from_joint))
}

/// Critic input: `[x, 1]` for reals, `[onehot(x), 1]` for categories, zero padded.
fn lift(spec: &SyntheticJointSpec, raw: &Array2<f64>) -> Array2<f64> {
    let width = spec.lifted_dim();
    let mut out = Array2::zeros((raw.nrows(), width));
    for (r, row) in raw.rows().into_iter().enumerate() {
        match spec.kind {
            JointKind::GaussianPair { dim, .. } => {
                for d in 0..dim {
                    out[[r, d]] = row[d];
                }
            }
            JointKind::DiscreteJoint { .. } => out[[r, row[0] as usize]] = 1.0,
        }
        out[[r, width - 1]] = 1.0;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiCriticConfig {
    pub mode: CriticMode,
    pub proj_dim: usize,
    pub tau: f64,
    pub lr: f64,
    pub momentum: f64,
    /// Positives per training step.
    pub batch: usize,
    /// Held-out positives used to evaluate the bound.
    pub heldout: usize,
    /// Evaluate every this many steps (and at step 0).
    pub eval_every: usize,
    pub literal_n: bool,
}

impl Default for MiCriticConfig {
    fn default() -> Self {
        Self {
            mode: CriticMode::Linear,
            proj_dim: 16,
            tau: 0.1,
            lr: 0.05,
            momentum: 0.9,
            batch: 32,
            heldout: 2000,
            eval_every: 100,
            literal_n: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckpoint {
    pub step: usize,
    pub bound: f64,
    /// Three standard errors of the held-out mean.
    pub eps_stat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiReport {
    pub spec: String,
    pub negatives: usize,
    pub train_steps: usize,
    pub true_mi: f64,
    pub checkpoints: Vec<BoundCheckpoint>,
    pub final_bound: f64,
    /// Every checkpoint satisfies `bound ≤ true_mi + eps_stat`.
    pub sound: bool,
    /// Every checkpoint satisfies `bound ≤ ln(N + 1) + eps_stat`.
    pub below_ceiling: bool,
    /// Consecutive checkpoints never drop by more than the larger `eps_stat`.
    pub monotone: bool,
}

struct HeldOut {
    u: Array2<f64>,
    v: Array2<f64>,
    v_neg: Array2<f64>,
}

fn evaluate_bound(
    critic: &Critic,
    store: &ParamStore,
    data: &HeldOut,
    n: usize,
    literal_n: bool,
) -> Result<(f64, f64)> {
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let m = data.u.nrows();
    let u = critic.embed_teacher(&p, tape.constant_matrix(data.u.clone()));
    let pos = u
        .row_dot(critic.embed_cross(&p, tape.constant_matrix(data.v.clone())))
        .value();
    let group: Vec<usize> = (0..m).collect();
    let neg = u
        .grouped_dot(critic.embed_cross(&p, tape.constant_matrix(data.v_neg.clone())), &group, n)
        .matrix();
    let factor = if literal_n { n as f64 } else { 1.0 };
    let per: Array1<f64> = (0..m)
        .map(|i| {
            let lp = (pos[i] - 1.0) / critic.tau;
            let ln: f64 = neg
                .row(i)
                .iter()
                .map(|&d| log1m_exp((d - 1.0) / critic.tau, SATURATION_EPS).0)
                .sum();
            (n as f64).ln() + lp + factor * ln
        })
        .collect();
    if per.iter().any(|v| !v.is_finite()) {
        return Err(CrcdError::numerical("mi critic likelihood"));
    }
    let mean = per.mean().unwrap_or(0.0);
    let std = if m > 1 { per.std(1.0) } else { 0.0 };
    Ok((mean, 3.0 * std / (m as f64).sqrt()))
}

/// Trains a critic by minimizing the relation contrastive loss with one joint
/// sample against `n` marginal samples, evaluating the held-out bound at
/// checkpoints.
pub fn fit_and_bound(
    spec: &SyntheticJointSpec,
    cfg: &MiCriticConfig,
    n: usize,
    train_steps: usize,
) -> Result<MiReport> {
    spec.validate()?;
    if n == 0 {
        return Err(CrcdError::usage("negatives must be at least 1"));
    }
    if cfg.batch == 0 || cfg.heldout == 0 || cfg.eval_every == 0 {
        return Err(CrcdError::usage("batch, heldout and eval_every must be positive"));
    }
    let truth = true_mi(spec)?;
    let width = spec.lifted_dim();
    let mut store = ParamStore::new();
    let critic = Critic::new(
        &mut store,
        "mi",
        cfg.mode,
        width,
        cfg.proj_dim,
        cfg.tau,
        &mut derive_rng(spec.seed, "mi-critic-init", 0),
    )?;
    let heldout = {
        let mut s = PairSampler::new(spec, derive_rng(spec.seed, "mi-heldout", 0))?;
        let (u, v) = s.pairs(cfg.heldout, true);
        let v_neg = s.marginal_v(cfg.heldout * n);
        HeldOut {
            u: lift(spec, &u),
            v: lift(spec, &v),
            v_neg: lift(spec, &v_neg),
        }
    };
    let mut sampler = PairSampler::new(spec, derive_rng(spec.seed, "mi-train", 0))?;
    let mut opt = Sgd::new(
        SgdConfig {
            momentum: cfg.momentum,
            weight_decay: 0.0,
        },
        store.len(),
    );
    let group: Vec<usize> = (0..cfg.batch).collect();
    let mut checkpoints = Vec::new();
    for step in 0..=train_steps {
        if step % cfg.eval_every == 0 || step == train_steps {
            let (bound, eps_stat) = evaluate_bound(&critic, &store, &heldout, n, cfg.literal_n)?;
            checkpoints.push(BoundCheckpoint {
                step,
                bound,
                eps_stat,
            });
        }
        if step == train_steps {
            break;
        }
        let (u, v) = sampler.pairs(cfg.batch, true);
        let v_neg = sampler.marginal_v(cfg.batch * n);
        let tape = Tape::new();
        let p = store.bind(&tape, true);
        let ue = critic.embed_teacher(&p, tape.constant_matrix(lift(spec, &u)));
        let pos = ue.row_dot(critic.embed_cross(&p, tape.constant_matrix(lift(spec, &v))));
        let neg = ue.grouped_dot(
            critic.embed_cross(&p, tape.constant_matrix(lift(spec, &v_neg))),
            &group,
            n,
        );
        let (loss, _) = rc_graph(pos, neg, cfg.tau, cfg.literal_n);
        if !loss.scalar().is_finite() {
            return Err(CrcdError::Numerical {
                component: format!("mi critic loss at step {step}"),
                sample_id: None,
            });
        }
        let grads = p.collect_grads(&loss.backward());
        opt.step(&mut store, grads, cfg.lr);
    }
    let ceiling = ((n + 1) as f64).ln();
    let sound = checkpoints.iter().all(|c| c.bound <= truth + c.eps_stat);
    let below_ceiling = checkpoints.iter().all(|c| c.bound <= ceiling + c.eps_stat);
    let monotone = checkpoints
        .windows(2)
        .all(|w| w[1].bound >= w[0].bound - w[0].eps_stat.max(w[1].eps_stat));
    Ok(MiReport {
        spec: spec.to_string(),
        negatives: n,
        train_steps,
        true_mi: truth,
        final_bound: checkpoints.last().map(|c| c.bound).unwrap_or(f64::NAN),
        checkpoints,
        sound,
        below_ceiling,
        monotone,
    })
}
