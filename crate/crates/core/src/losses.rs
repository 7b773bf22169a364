//! Relation contrastive loss, the baseline contrastive family, the KD loss and
//! the weighted total objective.
//!
//! Each loss has a plain numeric form over scores or logits, and a graph form
//! over cosine similarities used by the training step.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autograd::{log1m_exp, Tape, Var};
use crate::error::{CrcdError, Result};

/// Clamp applied to `1 − h⁻` before the logarithm.
pub const SATURATION_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RcValue {
    pub loss: f64,
    /// Negatives whose `1 − h⁻` hit the clamp.
    pub saturations: usize,
}

/// `mean_p [ −ln h⁺_p − Σ_k ln(1 − h⁻_pk) ]`.
///
/// With `literal_n` the negative sum is multiplied by the negative count.
pub fn relation_contrastive_loss(
    positive: &[f64],
    negative: &Array2<f64>,
    literal_n: bool,
) -> Result<RcValue> {
    if positive.is_empty() {
        return Err(CrcdError::usage("no positive scores"));
    }
    if negative.nrows() != positive.len() {
        return Err(CrcdError::usage(format!(
            "{} positives but {} negative rows",
            positive.len(),
            negative.nrows()
        )));
    }
    if let Some(bad) = positive.iter().chain(negative.iter()).find(|&&h| !(h > 0.0 && h <= 1.0)) {
        return Err(CrcdError::usage(format!("score {bad} outside (0, 1]")));
    }
    let n = negative.ncols() as f64;
    let mut saturations = 0;
    let mut total = 0.0;
    for (p, row) in positive.iter().zip(negative.rows()) {
        let mut neg = 0.0;
        for &h in row {
            if 1.0 - h > SATURATION_EPS {
                neg -= (-h).ln_1p();
            } else {
                saturations += 1;
                neg -= SATURATION_EPS.ln();
            }
        }
        if literal_n {
            neg *= n;
        }
        total += -p.ln() + neg;
    }
    Ok(RcValue {
        loss: total / positive.len() as f64,
        saturations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineLoss {
    TripletMargin,
    Logistic,
    InfoNce,
}

impl FromStr for BaselineLoss {
    type Err = CrcdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triplet_margin" | "triplet" => Ok(Self::TripletMargin),
            "logistic" => Ok(Self::Logistic),
            "info_nce" | "infonce" => Ok(Self::InfoNce),
            other => Err(CrcdError::usage(format!("unknown contrastive loss `{other}`"))),
        }
    }
}

impl fmt::Display for BaselineLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TripletMargin => "triplet_margin",
            Self::Logistic => "logistic",
            Self::InfoNce => "info_nce",
        })
    }
}

/// Default margin of the triplet baseline.
pub const DEFAULT_MARGIN: f64 = 0.4;

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-6 {
        return Err(CrcdError::usage(format!("{what} is not unit-norm (norm {n})")));
    }
    Ok(())
}

/// Baseline loss on unit vectors. `param` is the margin for the triplet loss
/// and the temperature otherwise.
pub fn baseline_contrastive_loss(
    kind: BaselineLoss,
    u: &Array1<f64>,
    v_pos: &Array1<f64>,
    v_negs: &Array2<f64>,
    param: f64,
) -> Result<f64> {
    if !(param > 0.0) {
        return Err(CrcdError::usage(format!("{kind} parameter must be positive")));
    }
    if v_negs.nrows() == 0 {
        return Err(CrcdError::usage("no negatives"));
    }
    if v_pos.len() != u.len() || v_negs.ncols() != u.len() {
        return Err(CrcdError::usage("vector length mismatch"));
    }
    check_unit(u.as_slice().unwrap_or(&u.to_vec()), "u")?;
    check_unit(&v_pos.to_vec(), "v⁺")?;
    for row in v_negs.rows() {
        check_unit(&row.to_vec(), "v⁻")?;
    }
    let pos = u.dot(v_pos);
    let negs: Vec<f64> = v_negs.rows().into_iter().map(|r| u.dot(&r)).collect();
    Ok(baseline_from_dots(kind, pos, &negs, param))
}

/// Same as [`baseline_contrastive_loss`], given the inner products directly.
pub fn baseline_from_dots(kind: BaselineLoss, pos: f64, negs: &[f64], param: f64) -> f64 {
    let n = negs.len() as f64;
    match kind {
        BaselineLoss::TripletMargin => {
            negs.iter().map(|d| (d - pos + param).max(0.0)).sum::<f64>() / n
        }
        BaselineLoss::Logistic => {
            softplus(-pos / param) + negs.iter().map(|d| softplus(d / param)).sum::<f64>() / n
        }
        BaselineLoss::InfoNce => {
            let m = negs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / param;
            let lse = m + negs.iter().map(|d| (d / param - m).exp()).sum::<f64>().ln();
            -pos / param + lse
        }
    }
}

/// `ρ² · mean_b H(σ(z_T/ρ), σ(z_S/ρ))`.
pub fn kd_loss(z_t: &Array2<f64>, z_s: &Array2<f64>, rho: f64) -> Result<f64> {
    if z_t.dim() != z_s.dim() {
        return Err(CrcdError::usage(format!(
            "logit shapes differ: {:?} vs {:?}",
            z_t.dim(),
            z_s.dim()
        )));
    }
    if !(rho > 0.0) {
        return Err(CrcdError::usage("rho must be positive"));
    }
    if z_t.nrows() == 0 {
        return Err(CrcdError::usage("empty logits"));
    }
    let tape = Tape::new();
    let l = kd_graph(tape.constant_matrix(z_t.clone()), tape.constant_matrix(z_s.clone()), rho);
    Ok(l.scalar())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta1: 0.5,
            beta2: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_kd: f64,
    pub l_rc_feature: f64,
    pub l_rc_gradient: f64,
    pub total: f64,
}

pub fn total_objective(
    l_cls: f64,
    l_kd: f64,
    l_rc_f: f64,
    l_rc_g: f64,
    w: LossWeights,
) -> Result<LossBreakdown> {
    for (name, v) in [
        ("l_cls", l_cls),
        ("l_kd", l_kd),
        ("l_rc_feature", l_rc_f),
        ("l_rc_gradient", l_rc_g),
    ] {
        if !v.is_finite() {
            return Err(CrcdError::numerical(name));
        }
    }
    Ok(LossBreakdown {
        l_cls,
        l_kd,
        l_rc_feature: l_rc_f,
        l_rc_gradient: l_rc_g,
        total: l_cls + w.alpha * l_kd + w.beta1 * l_rc_f + w.beta2 * l_rc_g,
    })
}

// Graph forms.

/// Mean cross-entropy of `logits [B, K]` against `labels`.
pub fn cross_entropy_graph<'t>(logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    logits.log_softmax_rows().pick_per_row(labels).mean().scale(-1.0)
}

/// KD loss with teacher logits detached.
pub fn kd_graph<'t>(z_t: Var<'t>, z_s: Var<'t>, rho: f64) -> Var<'t> {
    let b = z_s.shape()[0] as f64;
    let p_t = z_t.detach().scale(1.0 / rho).softmax_rows();
    z_s.scale(1.0 / rho)
        .log_softmax_rows()
        .mul(p_t)
        .sum()
        .scale(-rho * rho / b)
}

/// Relation contrastive loss from cosines: `pos [M]`, `neg [M, N]`, with
/// `h = exp((d − 1)/τ)`. Also returns the saturation count.
pub fn rc_graph<'t>(pos: Var<'t>, neg: Var<'t>, tau: f64, literal_n: bool) -> (Var<'t>, usize) {
    let shape = neg.shape();
    let (m, n) = (shape[0] as f64, shape[1]);
    let saturations = neg
        .value()
        .iter()
        .filter(|&&d| log1m_exp((d - 1.0) / tau, SATURATION_EPS).1)
        .count();
    let pos_term = pos.scale(-1.0 / tau).add_scalar(1.0 / tau).mean();
    let factor = if literal_n { n as f64 } else { 1.0 };
    let neg_term = neg
        .add_scalar(-1.0)
        .scale(1.0 / tau)
        .log1m_exp(SATURATION_EPS)
        .sum()
        .scale(-factor / m);
    (pos_term.add(neg_term), saturations)
}

/// `pos [M]` repeated across `n` columns.
fn broadcast_cols<'t>(tape: &'t Tape, pos: Var<'t>, n: usize) -> Var<'t> {
    let m = pos.shape()[0];
    pos.reshape(&[m, 1]).matmul(tape.constant_matrix(Array2::ones((1, n))))
}

/// Baseline loss averaged over positives, from cosines.
pub fn baseline_graph<'t>(
    tape: &'t Tape,
    kind: BaselineLoss,
    pos: Var<'t>,
    neg: Var<'t>,
    param: f64,
) -> Var<'t> {
    match kind {
        BaselineLoss::TripletMargin => {
            let n = neg.shape()[1];
            neg.sub(broadcast_cols(tape, pos, n)).add_scalar(param).relu().mean()
        }
        BaselineLoss::Logistic => pos
            .scale(-1.0 / param)
            .softplus()
            .mean()
            .add(neg.scale(1.0 / param).softplus().mean()),
        BaselineLoss::InfoNce => pos
            .scale(-1.0 / param)
            .mean()
            .add(neg.scale(1.0 / param).logsumexp_rows().mean()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rc_closed_forms() {
        let e20 = (-20.0f64).exp();
        let v = relation_contrastive_loss(&[1.0], &array![[e20, e20]], false).unwrap();
        assert!((v.loss - 4.12e-9).abs() < 1e-11);
        assert!((v.loss - 2.0 * e20).abs() < 1e-16);
        assert!((v.loss + 2.0 * (-e20).ln_1p()).abs() < 1e-22);
        let v = relation_contrastive_loss(&[(-1.0f64).exp()], &Array2::zeros((1, 0)), false).unwrap();
        assert!((v.loss - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rc_matches_term_by_term_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let pos: f64 = rng.random_range(0.01..1.0);
        let negs: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..0.99)).collect();
        let mut expect = -pos.ln();
        for h in &negs {
            expect += -(1.0 - h).ln();
        }
        let got = relation_contrastive_loss(&[pos], &Array2::from_shape_vec((1, 5), negs).unwrap(), false)
            .unwrap()
            .loss;
        assert!((got - expect).abs() <= 1e-10 * expect.abs());
    }

    #[test]
    fn rc_literal_n_scales_negative_sum() {
        let plain = relation_contrastive_loss(&[1.0], &array![[0.5, 0.5, 0.5]], false).unwrap();
        let lit = relation_contrastive_loss(&[1.0], &array![[0.5, 0.5, 0.5]], true).unwrap();
        assert!((lit.loss - 3.0 * plain.loss).abs() < 1e-12);
    }

    #[test]
    fn rc_saturation_is_clamped_and_counted() {
        let v = relation_contrastive_loss(&[0.5], &array![[1.0, 0.2]], false).unwrap();
        assert_eq!(v.saturations, 1);
        assert!(v.loss.is_finite());
        let expect = -(0.5f64).ln() - SATURATION_EPS.ln() - (0.8f64).ln();
        assert!((v.loss - expect).abs() < 1e-12);
    }

    #[test]
    fn rc_rejects_bad_scores() {
        assert!(relation_contrastive_loss(&[0.0], &array![[0.5]], false).is_err());
        assert!(relation_contrastive_loss(&[1.5], &array![[0.5]], false).is_err());
        assert!(relation_contrastive_loss(&[0.5], &array![[0.5], [0.5]], false).is_err());
    }

    #[test]
    fn rc_graph_matches_numeric() {
        let tau = 0.3;
        let pos = array![0.9, -0.2];
        let neg = array![[0.1, 0.5, -0.3], [0.8, 0.0, 0.2]];
        let tape = Tape::new();
        let (l, sat) = rc_graph(
            tape.constant(pos.clone().into_dyn()),
            tape.constant(neg.clone().into_dyn()),
            tau,
            false,
        );
        let hp: Vec<f64> = pos.iter().map(|d| ((d - 1.0) / tau).exp()).collect();
        let hn = neg.mapv(|d| ((d - 1.0) / tau).exp());
        let num = relation_contrastive_loss(&hp, &hn, false).unwrap();
        assert!((l.scalar() - num.loss).abs() < 1e-12);
        assert_eq!(sat, 0);
    }

    fn unit(v: &[f64]) -> Array1<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn baseline_closed_forms() {
        let u = unit(&[1.0, 0.0]);
        let t = baseline_contrastive_loss(BaselineLoss::TripletMargin, &u, &u, &array![[0.0, 1.0]], 0.4).unwrap();
        assert_eq!(t, 0.0);
        let n = baseline_contrastive_loss(BaselineLoss::InfoNce, &u, &u, &array![[1.0, 0.0]], 1.0).unwrap();
        assert!(n.abs() < 1e-15);
        let o = unit(&[0.0, 1.0]);
        let l = baseline_contrastive_loss(BaselineLoss::Logistic, &u, &o, &array![[0.0, 1.0]], 0.05).unwrap();
        assert!((l - 1.3863).abs() < 1e-4);
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn unknown_baseline_is_usage_error() {
        assert!(matches!("hinge".parse::<BaselineLoss>(), Err(CrcdError::Usage(_))));
        assert_eq!("info_nce".parse::<BaselineLoss>().unwrap(), BaselineLoss::InfoNce);
    }

    #[test]
    fn baseline_graph_matches_numeric() {
        let pos = array![0.7, -0.1];
        let neg = array![[0.2, 0.9], [-0.5, 0.3]];
        for (kind, p) in [
            (BaselineLoss::TripletMargin, 0.4),
            (BaselineLoss::Logistic, 0.05),
            (BaselineLoss::InfoNce, 0.05),
        ] {
            let tape = Tape::new();
            let g = baseline_graph(
                &tape,
                kind,
                tape.constant(pos.clone().into_dyn()),
                tape.constant(neg.clone().into_dyn()),
                p,
            )
            .scalar();
            let expect = (0..2)
                .map(|r| baseline_from_dots(kind, pos[r], &neg.row(r).to_vec(), p))
                .sum::<f64>()
                / 2.0;
            assert!((g - expect).abs() < 1e-10 * expect.abs().max(1.0), "{kind}");
        }
    }

    fn entropy(z: &[f64]) -> f64 {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        -e.iter().map(|x| x / s).map(|p| p * p.ln()).sum::<f64>()
    }

    #[test]
    fn kd_uniform_and_entropy() {
        let z = Array2::zeros((3, 4));
        assert!((kd_loss(&z, &z, 1.0).unwrap() - 4f64.ln()).abs() < 1e-12);
        let z = array![[2.0, -1.0, 0.5]];
        let h = entropy(&[2.0, -1.0, 0.5]);
        assert!((kd_loss(&z, &z, 1.0).unwrap() - h).abs() <= 1e-6 * h);
    }

    #[test]
    fn kd_temperature_scaling_two_class() {
        let z = array![[3.0, 1.0]];
        for rho in [2.0, 4.0] {
            let a: f64 = 3.0 / rho;
            let b = 1.0 / rho;
            let p = 1.0 / (1.0 + (b - a).exp());
            let q = 1.0 - p;
            let expect = rho * rho * -(p * p.ln() + q * q.ln());
            assert!((kd_loss(&z, &z, rho).unwrap() - expect).abs() < 1e-12);
        }
        assert!(kd_loss(&z, &array![[1.0, 2.0, 3.0]], 1.0).is_err());
    }

    #[test]
    fn total_objective_arithmetic() {
        let w = LossWeights::default();
        // 1 + 1·1 + 0.5·1 + 0.5·1
        assert_eq!(total_objective(1.0, 1.0, 1.0, 1.0, w).unwrap().total, 3.0);
        assert!((total_objective(0.7, 0.3, 0.2, 0.1, w).unwrap().total - 1.15).abs() < 1e-12);
        let kd_only = LossWeights {
            beta1: 0.0,
            beta2: 0.0,
            ..w
        };
        assert_eq!(total_objective(0.7, 0.3, 9.0, 9.0, kd_only).unwrap().total, 1.0);
        let err = total_objective(0.7, f64::NAN, 0.0, 0.0, w).unwrap_err();
        assert!(err.to_string().contains("l_kd"));
    }

    #[test]
    fn cross_entropy_graph_value() {
        let tape = Tape::new();
        let z = array![[0.0, 0.0], [1.0, 0.0]];
        let l = cross_entropy_graph(tape.constant_matrix(z), &[0, 0]).scalar();
        let expect = (2f64.ln() + (1.0 + (-1.0f64).exp()).ln()) / 2.0;
        assert!((l - expect).abs() < 1e-14);
    }
}
