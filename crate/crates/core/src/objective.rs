//! Selection risk, the comp-sum surrogate and its regularizers.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::domain::TaskId;
use crate::error::{Error, Result};
use crate::selector::{BatchForward, SelectionDistribution};

/// Per-slot costs of one panel; entries at invalid slots are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelCosts {
    pub costs: Vec<f64>,
    pub valid: Vec<bool>,
}

impl PanelCosts {
    pub fn new(costs: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if costs.len() != valid.len() {
            return Err(Error::Shape { op: "panel_costs", detail: format!("{} costs, {} flags", costs.len(), valid.len()) });
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::NoValidCandidate);
        }
        if costs.iter().zip(&valid).any(|(c, &v)| v && !(0.0..=1.0).contains(c)) {
            return Err(Error::Contract("panel cost outside [0, 1]".into()));
        }
        Ok(PanelCosts { costs, valid })
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Cheapest valid slot, ties to the lowest index.
    pub fn oracle_slot(&self) -> usize {
        let mut best: Option<usize> = None;
        for (j, (&c, &v)) in self.costs.iter().zip(&self.valid).enumerate() {
            if v && best.is_none_or(|b| c < self.costs[b]) {
                best = Some(j);
            }
        }
        best.expect("PanelCosts holds at least one valid slot")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// Task weights λ_t on the simplex.
    pub task_weights: Vec<f64>,
    pub entropy_weight: f64,
    /// L2 coefficient on valid-slot scores.
    pub score_l2: f64,
    pub coverage_weight: f64,
    /// Probability clamp inside logarithms.
    pub eps: f64,
}

impl ObjectiveConfig {
    pub fn uniform(n_tasks: usize) -> Self {
        ObjectiveConfig {
            task_weights: vec![1.0 / n_tasks as f64; n_tasks],
            entropy_weight: 0.05,
            score_l2: 1e-4,
            coverage_weight: 1.0,
            eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.task_weights.iter().sum();
        if self.task_weights.is_empty() || self.task_weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("task weights {:?} are not on the simplex", self.task_weights)));
        }
        if self.entropy_weight < 0.0 || self.score_l2 < 0.0 || self.coverage_weight < 0.0 || self.eps <= 0.0 {
            return Err(Error::Config("objective coefficients must be non-negative".into()));
        }
        Ok(())
    }
}

/// Cost of the selected slot.
pub fn selection_loss(pc: &PanelCosts, dist: &SelectionDistribution) -> Result<f64> {
    match pc.valid.get(dist.selected) {
        Some(true) => Ok(pc.costs[dist.selected]),
        _ => Err(Error::Contract(format!("selected slot {} is not valid", dist.selected))),
    }
}

/// `w_j = Σ_{j'≠j, valid} c_j' − m_valid + 2` for valid slots, 0 elsewhere.
pub fn compsum_weights(pc: &PanelCosts) -> Result<Vec<f64>> {
    if pc.costs.len() < 2 {
        return Err(Error::Contract(format!("panel of {} slots; need at least 2", pc.costs.len())));
    }
    let m_valid = pc.valid_count() as f64;
    let total: f64 = pc.costs.iter().zip(&pc.valid).filter(|(_, &v)| v).map(|(c, _)| c).sum();
    Ok(pc
        .costs
        .iter()
        .zip(&pc.valid)
        .map(|(&c, &v)| if v { total - c - m_valid + 2.0 } else { 0.0 })
        .collect())
}

fn psi(p: f64, eps: f64) -> f64 {
    -p.max(eps).ln()
}

/// `Σ_valid w_j·Ψ(π_j)` with `Ψ(u) = −ln max(u, ε)`.
pub fn compsum_loss(dist: &SelectionDistribution, weights: &[f64], eps: f64) -> f64 {
    dist.probs
        .iter()
        .zip(weights)
        .zip(&dist.mask)
        .filter(|(_, &v)| v)
        .map(|((&p, &w), _)| w * psi(p, eps))
        .sum()
}

/// Shannon entropy of the selection distribution over valid slots.
pub fn entropy(dist: &SelectionDistribution, eps: f64) -> f64 {
    dist.probs
        .iter()
        .zip(&dist.mask)
        .filter(|(_, &v)| v)
        .map(|(&p, _)| -p * p.max(eps).ln())
        .sum()
}

/// Binary cross-entropy of the coverage estimate against target `1 − c`.
pub fn coverage_loss(s: f64, cost: f64) -> f64 {
    let eps = 1e-12;
    -(1.0 - cost) * s.max(eps).ln() - cost * (1.0 - s).max(eps).ln()
}

/// The task-marginalized training loss for one batch, as a differentiable scalar:
/// mean over examples of `λ_t·|T|·(L_Ψ − λ_H·H + λ_r·mean r² + λ_cov·mean BCE)`.
pub fn batch_objective(tape: &mut Tape, cfg: &ObjectiveConfig, fwd: &BatchForward, costs: &[PanelCosts], tasks: &[TaskId]) -> Result<Var> {
    if costs.is_empty() || costs.len() != fwd.segments.len() || tasks.len() != costs.len() {
        return Err(Error::Contract(format!(
            "objective over {} examples with {} cost rows and {} tasks",
            fwd.segments.len(),
            costs.len(),
            tasks.len()
        )));
    }
    let n = tape.value(fwd.probs).numel();
    let n_tasks = cfg.task_weights.len() as f64;
    let batch = costs.len() as f64;
    let (mut w_ce, mut w_ent, mut w_l2, mut w_log_s, mut w_log_1ms) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for ((seg, pc), task) in fwd.segments.iter().zip(costs).zip(tasks) {
        let lambda = *cfg
            .task_weights
            .get(task.0)
            .ok_or_else(|| Error::Contract(format!("no task weight for task {}", task.0)))?;
        let a = lambda * n_tasks / batch;
        let weights = compsum_weights(pc)?;
        let per_slot = 1.0 / seg.len() as f64;
        for pos in seg.clone() {
            let j = fwd.slot_of[pos];
            if !pc.valid[j] {
                return Err(Error::Contract(format!("cost row marks scored slot {j} invalid")));
            }
            let c = pc.costs[j];
            w_ce[pos] = -a * weights[j];
            w_ent[pos] = a * cfg.entropy_weight;
            w_l2[pos] = a * cfg.score_l2 * per_slot;
            w_log_s[pos] = -a * cfg.coverage_weight * per_slot * (1.0 - c);
            w_log_1ms[pos] = -a * cfg.coverage_weight * per_slot * c;
        }
    }
    let logp = tape.log_clamp(fwd.probs, cfg.eps);
    let surrogate = tape.weighted_sum(logp, w_ce)?;
    // −λ_H·H = λ_H·Σ π log π
    let plogp = tape.mul(fwd.probs, logp)?;
    let ent = tape.weighted_sum(plogp, w_ent)?;
    let sq = tape.square(fwd.scores);
    let l2 = tape.weighted_sum(sq, w_l2)?;
    let log_s = tape.log_clamp(fwd.coverage, cfg.eps);
    let ones = tape.constant(Tensor::vector(vec![1.0; n]));
    let one_minus = tape.sub(ones, fwd.coverage)?;
    let log_1ms = tape.log_clamp(one_minus, cfg.eps);
    let bce_a = tape.weighted_sum(log_s, w_log_s)?;
    let bce_b = tape.weighted_sum(log_1ms, w_log_1ms)?;
    let total = tape.add(surrogate, ent)?;
    let total = tape.add(total, l2)?;
    let total = tape.add(total, bce_a)?;
    tape.add(total, bce_b)
}
