//! Classification losses and the KL feature regularizer between global and
//! unified-local representations.
//!
//! Every loss takes row-stacked inputs (`[B, d]`, or `[d]` for a single row)
//! and returns the SUM over rows as a one-element tensor; callers divide by
//! the batch size.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

/// Which side of the KL term is the target distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `KL(local || global)`: the unified local representation is the target.
    #[default]
    LocalToGlobal,
    /// `KL(global || local)`.
    GlobalToLocal,
}

impl fmt::Display for KlDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KlDirection::LocalToGlobal => "local-to-global",
            KlDirection::GlobalToLocal => "global-to-local",
        })
    }
}

impl FromStr for KlDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local-to-global" => Ok(KlDirection::LocalToGlobal),
            "global-to-local" => Ok(KlDirection::GlobalToLocal),
            other => Err(Error::Config(format!("unknown kl direction '{other}'"))),
        }
    }
}

fn last_axis<T: Scalar>(g: &Graph<T>, v: Var) -> usize {
    g.shape(v).len() - 1
}

/// `KL(softmax(p / tau) || softmax(q / tau))`, summed over rows, computed
/// from log-probabilities.
pub fn kl_div<T: Scalar>(g: &mut Graph<T>, p_logits: Var, q_logits: Var, tau: f64) -> Result<Var> {
    let terms = kl_div_terms(g, p_logits, q_logits, tau)?;
    Ok(g.sum(terms))
}

/// Elementwise `p * (log p - log q)`; sums to [`kl_div`].
pub fn kl_div_terms<T: Scalar>(g: &mut Graph<T>, p_logits: Var, q_logits: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if g.shape(p_logits) != g.shape(q_logits) {
        return Err(Error::ShapeMismatch {
            op: "kl_div",
            lhs: g.shape(p_logits).to_vec(),
            rhs: g.shape(q_logits).to_vec(),
        });
    }
    let axis = last_axis(g, p_logits);
    let p = g.scale(p_logits, 1.0 / tau);
    let q = g.scale(q_logits, 1.0 / tau);
    let log_p = g.log_softmax(p, axis)?;
    let log_q = g.log_softmax(q, axis)?;
    let prob_p = g.exp(log_p);
    let diff = g.sub(log_p, log_q)?;
    g.mul(prob_p, diff)
}

/// Sum over stages of the KL term between each stage's global representation
/// and the unified local representation.
pub fn reg_loss<T: Scalar>(
    g: &mut Graph<T>,
    global: &[Var],
    unified: &[Var],
    tau: f64,
    direction: KlDirection,
) -> Result<Var> {
    let terms = reg_terms(g, global, unified, tau, direction)?;
    let sums: Vec<Var> = terms.into_iter().map(|t| g.sum(t)).collect();
    sum_scalars(g, &sums)
}

/// Per-stage elementwise KL terms behind [`reg_loss`].
pub fn reg_terms<T: Scalar>(
    g: &mut Graph<T>,
    global: &[Var],
    unified: &[Var],
    tau: f64,
    direction: KlDirection,
) -> Result<Vec<Var>> {
    if global.is_empty() || global.len() != unified.len() {
        return Err(Error::StageCount {
            expected: global.len(),
            got: unified.len(),
        });
    }
    global
        .iter()
        .zip(unified)
        .map(|(&gl, &lo)| match direction {
            KlDirection::LocalToGlobal => kl_div_terms(g, lo, gl, tau),
            KlDirection::GlobalToLocal => kl_div_terms(g, gl, lo, tau),
        })
        .collect()
}

/// `-log softmax(logits)[label]`, summed over rows. `labels` has one entry
/// per row.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let rows = cross_entropy_rows(g, logits, labels)?;
    Ok(g.sum(rows))
}

/// Per-row `-log softmax(logits)[label]`, shape `[rows]`.
pub fn cross_entropy_rows<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let classes = *shape.last().unwrap_or(&0);
    let rows = shape.iter().product::<usize>() / classes.max(1);
    if rows != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let log_p = g.log_softmax(logits, shape.len() - 1)?;
    let index = labels
        .iter()
        .enumerate()
        .map(|(r, &l)| r * classes + l)
        .collect();
    let picked = g.gather(log_p, index, &[rows])?;
    Ok(g.scale(picked, -1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub reg: f64,
    pub part: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { reg: 1.0, part: 1.0 }
    }
}

/// `sum_s CE(global_s) + w.part * sum_n CE(part_n) + w.reg * reg`.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    stage_logits: &[Var],
    part_logits: &[Var],
    reg: Var,
    labels: &[usize],
    part_labels: &[usize],
    weights: LossWeights,
) -> Result<Var> {
    let mut stage_ce = Vec::with_capacity(stage_logits.len());
    for &l in stage_logits {
        stage_ce.push(cross_entropy(g, l, labels)?);
    }
    let mut part_ce = Vec::with_capacity(part_logits.len());
    for &l in part_logits {
        part_ce.push(cross_entropy(g, l, part_labels)?);
    }
    let part = sum_scalars(g, &part_ce)?;
    combine(g, &stage_ce, part, reg, weights)
}

/// Weighted sum of already computed loss terms.
pub fn combine<T: Scalar>(
    g: &mut Graph<T>,
    stage_ce: &[Var],
    part_ce: Var,
    reg: Var,
    weights: LossWeights,
) -> Result<Var> {
    if weights.reg < 0.0 || weights.part < 0.0 {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }
    let mut terms = stage_ce.to_vec();
    if weights.part > 0.0 {
        terms.push(g.scale(part_ce, weights.part));
    }
    if weights.reg > 0.0 {
        terms.push(g.scale(reg, weights.reg));
    }
    sum_scalars(g, &terms)
}

/// Elementwise sum of equally shaped variables.
pub fn sum_vars<T: Scalar>(g: &mut Graph<T>, vars: &[Var]) -> Result<Var> {
    let (&first, rest) = vars.split_first().ok_or(Error::StageCount { expected: 1, got: 0 })?;
    rest.iter().try_fold(first, |acc, &v| g.add(acc, v))
}

pub fn sum_scalars<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    match terms {
        [] => Ok(g.input(crate::tensor::Tensor::scalar(T::zero()))),
        [one] => Ok(*one),
        many => {
            let stacked = g.concat(many, 0)?;
            Ok(g.sum(stacked))
        }
    }
}
