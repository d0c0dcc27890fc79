//! Attentive-neural-process selector.
//!
//! Each panel slot is scored from the fused query encoding `u`, a query-dependent
//! descriptor `ψ` obtained by cross-attending from `u` into the tool's reference
//! set, the tool's own aligned prediction on the query, and tool metadata. Scores
//! of supported tools go through a masked softmax; unsupported tools never enter
//! the computation.

mod params;

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::domain::{argmax_lowest, AlignedPayload, AlignedPrediction, GroundTruth, Query, ReferenceSet, TaskId, Tool, ToolId};
use crate::error::{Error, Result};

pub use params::{param_name, ParamVars, SelectorConfig, SelectorParams};
pub(crate) use params::P;

/// Training-mode dropout drawing masks from the run's seeded stream.
pub enum Dropout<'a> {
    Off,
    On { rate: f64, rng: &'a mut ChaCha8Rng },
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Dropout::Off => Ok(x),
            Dropout::On { rate, rng } => {
                if *rate <= 0.0 {
                    return Ok(x);
                }
                let keep = 1.0 - *rate;
                let n = tape.value(x).numel();
                let mask = (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                tape.mul_const(x, mask)
            }
        }
    }
}

/// Encodes an aligned prediction into the fixed-width head slot: categorical
/// probabilities zero-padded, box corners, or a per-finding indicator.
pub fn slot_vector(pred: &AlignedPrediction, width: usize) -> Vec<f64> {
    let mut v = vec![0.0; width];
    match &pred.payload {
        AlignedPayload::Probs(p) => {
            for (o, &x) in v.iter_mut().zip(p) {
                *o = x;
            }
        }
        AlignedPayload::Box(b) => {
            for (o, x) in v.iter_mut().zip(b.coords()) {
                *o = x;
            }
        }
        AlignedPayload::Findings(set) => {
            for p in set {
                if let Some(o) = v.get_mut(p.finding as usize) {
                    *o = 1.0;
                }
            }
        }
    }
    v
}

/// Input row for a task's ground-truth embedding table: one-hot for labels,
/// numeric encodings for boxes and finding sets.
pub fn target_encoding(gt: &GroundTruth, rows: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; rows];
    match gt {
        GroundTruth::Class(c) | GroundTruth::Choice(c) => {
            *v.get_mut(*c).ok_or_else(|| Error::Contract(format!("label {c} outside canonical space of {rows}")))? = 1.0;
        }
        GroundTruth::Box(b) => {
            if rows < 4 {
                return Err(Error::Contract("box encoding needs 4 rows".into()));
            }
            v[..4].copy_from_slice(&b.coords());
        }
        GroundTruth::Findings(set) => {
            for p in set {
                *v.get_mut(p.finding as usize)
                    .ok_or_else(|| Error::Contract(format!("finding {} outside {rows}", p.finding)))? = 1.0;
            }
        }
    }
    Ok(v)
}

fn matrix(rows: &[Vec<f64>]) -> Result<Tensor> {
    Tensor::from_rows(rows)
}

impl ParamVars {
    pub fn phi_x(&self, tape: &mut Tape, xs: Var) -> Result<Var> {
        tape.linear(xs, self.get(P::PhiXW), self.get(P::PhiXB))
    }

    /// `u = U·[φx(x) ‖ φq(q)]` for every row of `xs`/`qs`.
    pub fn encode_queries(&self, tape: &mut Tape, xs: Var, qs: Var) -> Result<Var> {
        let px = self.phi_x(tape, xs)?;
        let pq = tape.linear(qs, self.get(P::PhiQW), self.get(P::PhiQB))?;
        let cat = tape.concat_cols(&[px, pq])?;
        tape.linear(cat, self.get(P::FuseW), self.get(P::FuseB))
    }

    /// Embeds every reference element: returns `(T, keys)` where row b of `T` is
    /// `W_c[φx(x_b) ‖ e^t(y_b) ‖ ρ_m(m_b)]` and row b of `keys` is `φx(x_b)`.
    pub fn encode_reference_set(&self, tape: &mut Tape, cfg: &SelectorConfig, task: TaskId, refs: &ReferenceSet) -> Result<(Var, Var)> {
        if refs.is_empty() {
            return Err(Error::EmptyReferenceSet);
        }
        let table = self
            .label_table(task.0)
            .ok_or_else(|| Error::Contract(format!("no label table for task {}", task.0)))?;
        let rows = cfg.label_rows[task.0];
        let xs: Vec<Vec<f64>> = refs.0.iter().map(|e| e.x.clone()).collect();
        let ys = refs.0.iter().map(|e| target_encoding(&e.y, rows)).collect::<Result<Vec<_>>>()?;
        let ms: Vec<Vec<f64>> = refs.0.iter().map(|e| slot_vector(&e.m, cfg.slot_width)).collect();
        let xs = tape.constant(matrix(&xs)?);
        let ys = tape.constant(matrix(&ys)?);
        let ms = tape.constant(matrix(&ms)?);
        let keys = self.phi_x(tape, xs)?;
        let ey = tape.matmul(ys, table)?;
        let rho = tape.linear(ms, self.get(P::RhoW), self.get(P::RhoB))?;
        let cat = tape.concat_cols(&[keys, ey, rho])?;
        let t = tape.linear(cat, self.get(P::RefW), self.get(P::RefB))?;
        Ok((t, keys))
    }

    /// Single-head self-attention over reference embeddings, no residual or norm.
    pub fn self_attend_refs(&self, tape: &mut Tape, t: Var, dropout: &mut Dropout) -> Result<Var> {
        let q = tape.matmul(t, self.get(P::SelfQ))?;
        let k = tape.matmul(t, self.get(P::SelfK))?;
        let v = tape.matmul(t, self.get(P::SelfV))?;
        let out = tape.attend(q, k, v)?;
        dropout.apply(tape, out)
    }

    /// `ψ = softmax((W_Q u)(W_K keys)ᵀ/√d_k)·(W_V T̃)` for every row of `u_rows`.
    pub fn cross_attend(&self, tape: &mut Tape, u_rows: Var, keys: Var, t_tilde: Var) -> Result<Var> {
        let q = tape.matmul(u_rows, self.get(P::CrossQ))?;
        self.cross_attend_projected(tape, q, keys, t_tilde)
    }

    fn cross_attend_projected(&self, tape: &mut Tape, q: Var, keys: Var, t_tilde: Var) -> Result<Var> {
        let k = tape.matmul(keys, self.get(P::CrossK))?;
        let v = tape.matmul(t_tilde, self.get(P::CrossV))?;
        tape.attend(q, k, v)
    }

    /// `r = g_θ([u ‖ ψ ‖ m̃ ‖ η])`, one score per row; returns shape `[n]`.
    pub fn score(&self, tape: &mut Tape, u: Var, psi: Var, slot: Var, eta: Var, dropout: &mut Dropout) -> Result<Var> {
        let cat = tape.concat_cols(&[u, psi, slot, eta])?;
        let h = tape.linear(cat, self.get(P::HeadW1), self.get(P::HeadB1))?;
        let h = tape.gelu(h);
        let h = dropout.apply(tape, h)?;
        let r = tape.linear(h, self.get(P::HeadW2), self.get(P::HeadB2))?;
        let n = tape.value(r).numel();
        tape.reshape(r, vec![n])
    }

    /// `s = σ(h([u ‖ ψ]))`, shape `[n]`.
    pub fn coverage(&self, tape: &mut Tape, u: Var, psi: Var) -> Result<Var> {
        let cat = tape.concat_cols(&[u, psi])?;
        let h = tape.linear(cat, self.get(P::CovW1), self.get(P::CovB1))?;
        let h = tape.gelu(h);
        let z = tape.linear(h, self.get(P::CovW2), self.get(P::CovB2))?;
        let s = tape.sigmoid(z);
        let n = tape.value(s).numel();
        tape.reshape(s, vec![n])
    }
}

/// One panel slot as seen by the selector.
#[derive(Clone, Copy, Debug)]
pub struct SlotInput<'a> {
    pub tool: &'a Tool,
    /// The tool's aligned prediction on the query; ignored for unsupported tools.
    pub prediction: &'a AlignedPrediction,
}

#[derive(Clone, Debug)]
pub struct RoutingExample<'a> {
    pub query: &'a Query,
    pub slots: Vec<SlotInput<'a>>,
}

impl RoutingExample<'_> {
    pub fn mask(&self) -> Vec<bool> {
        self.slots.iter().map(|s| s.tool.supports(self.query.task)).collect()
    }
}

/// Tape outputs for a batch of examples. Only valid slots are present, ordered
/// example-major; `segments[e]` is example `e`'s range in the flat vectors.
#[derive(Debug)]
pub struct BatchForward {
    pub scores: Var,
    pub probs: Var,
    pub coverage: Var,
    pub segments: Vec<Range<usize>>,
    /// Panel slot index of each flat position.
    pub slot_of: Vec<usize>,
    pub masks: Vec<Vec<bool>>,
}

/// Runs the full selector on a batch. Reference sets shared by several slots
/// are encoded and self-attended once.
pub fn forward_batch(tape: &mut Tape, pv: &ParamVars, cfg: &SelectorConfig, batch: &[RoutingExample], dropout: &mut Dropout) -> Result<BatchForward> {
    if batch.is_empty() {
        return Err(Error::Contract("empty routing batch".into()));
    }
    let mut masks = Vec::with_capacity(batch.len());
    let mut segments = Vec::with_capacity(batch.len());
    let mut slot_of = Vec::new();
    let mut example_of = Vec::new();
    let mut preds = Vec::new();
    let mut etas = Vec::new();
    // (tool, task) → (tool ref, flat positions using it)
    let mut groups: BTreeMap<(ToolId, TaskId), (&Tool, Vec<usize>)> = BTreeMap::new();
    for (e, ex) in batch.iter().enumerate() {
        if ex.slots.len() < 2 {
            return Err(Error::Contract(format!("panel of {} slots; need at least 2", ex.slots.len())));
        }
        let mask = ex.mask();
        if !mask.iter().any(|&m| m) {
            return Err(Error::NoValidCandidate);
        }
        let start = slot_of.len();
        for (j, slot) in ex.slots.iter().enumerate().filter(|(j, _)| mask[*j]) {
            if slot.tool.eta.len() != cfg.eta_dim {
                return Err(Error::Shape { op: "score", detail: format!("eta width {} vs {}", slot.tool.eta.len(), cfg.eta_dim) });
            }
            let pos = slot_of.len();
            slot_of.push(j);
            example_of.push(e);
            preds.push(slot_vector(slot.prediction, cfg.slot_width));
            etas.push(slot.tool.eta.clone());
            groups.entry((slot.tool.id, ex.query.task)).or_insert((slot.tool, Vec::new())).1.push(pos);
        }
        segments.push(start..slot_of.len());
        masks.push(mask);
    }

    let xs = tape.constant(matrix(&batch.iter().map(|ex| ex.query.x.clone()).collect::<Vec<_>>())?);
    let qs = tape.constant(matrix(&batch.iter().map(|ex| ex.query.q.clone()).collect::<Vec<_>>())?);
    let u = pv.encode_queries(tape, xs, qs)?;
    let uq = tape.matmul(u, pv.get(P::CrossQ))?;

    let mut psi_parts = Vec::with_capacity(groups.len());
    let mut order = Vec::with_capacity(slot_of.len());
    for ((_, task), (tool, positions)) in &groups {
        let refs = tool.reference_sets.get(task).ok_or(Error::EmptyReferenceSet)?;
        let (t, keys) = pv.encode_reference_set(tape, cfg, *task, refs)?;
        let t_tilde = pv.self_attend_refs(tape, t, dropout)?;
        let rows: Vec<usize> = positions.iter().map(|&p| example_of[p]).collect();
        let q = tape.gather_rows(uq, &rows)?;
        psi_parts.push(pv.cross_attend_projected(tape, q, keys, t_tilde)?);
        order.extend_from_slice(positions);
    }
    let psi_grouped = tape.concat_rows(&psi_parts)?;
    // order[k] = flat position of grouped row k; invert it.
    let mut inverse = vec![0; order.len()];
    for (k, &p) in order.iter().enumerate() {
        inverse[p] = k;
    }
    let psi = tape.gather_rows(psi_grouped, &inverse)?;
    let u_slots = tape.gather_rows(u, &example_of)?;
    let slot = tape.constant(matrix(&preds)?);
    let eta = tape.constant(matrix(&etas)?);
    let scores = pv.score(tape, u_slots, psi, slot, eta, dropout)?;
    let coverage = pv.coverage(tape, u_slots, psi)?;
    let all = vec![true; slot_of.len()];
    let probs = tape.segment_masked_softmax(scores, &segments, &all)?;
    Ok(BatchForward { scores, probs, coverage, segments, slot_of, masks })
}

/// Selection outcome for one panel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionDistribution {
    /// Per-slot scores; invalid slots carry 0.
    pub scores: Vec<f64>,
    pub mask: Vec<bool>,
    pub probs: Vec<f64>,
    pub selected: usize,
    /// Coverage-head success estimate per slot; 0 for invalid slots.
    pub coverage: Vec<f64>,
}

impl SelectionDistribution {
    /// Builds the distribution from raw per-slot scores via the masked softmax.
    pub fn from_scores(scores: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::vector(scores.clone()));
        let p = tape.masked_softmax(s, &mask)?;
        let probs = tape.value(p).data().to_vec();
        let selected = argmax_lowest(&probs);
        let coverage = vec![0.0; scores.len()];
        Ok(SelectionDistribution { scores, mask, probs, selected, coverage })
    }
}

impl BatchForward {
    /// Expands flat tape outputs back into per-panel distributions.
    pub fn distributions(&self, tape: &Tape) -> Vec<SelectionDistribution> {
        let scores = tape.value(self.scores).data();
        let probs = tape.value(self.probs).data();
        let cov = tape.value(self.coverage).data();
        self.segments
            .iter()
            .zip(&self.masks)
            .map(|(seg, mask)| {
                let m = mask.len();
                let (mut r, mut p, mut s) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
                for pos in seg.clone() {
                    let j = self.slot_of[pos];
                    r[j] = scores[pos];
                    p[j] = probs[pos];
                    s[j] = cov[pos];
                }
                let selected = argmax_lowest(&p);
                SelectionDistribution { scores: r, mask: mask.clone(), probs: p, selected, coverage: s }
            })
            .collect()
    }
}

/// Inference over a batch of panels (dropout off).
pub fn select_batch(params: &SelectorParams, batch: &[RoutingExample]) -> Result<Vec<SelectionDistribution>> {
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let fwd = forward_batch(&mut tape, &pv, &params.config, batch, &mut Dropout::Off)?;
    Ok(fwd.distributions(&tape))
}

/// Routes one query over its panel.
pub fn select(params: &SelectorParams, query: &Query, slots: &[SlotInput]) -> Result<SelectionDistribution> {
    let ex = RoutingExample { query, slots: slots.to_vec() };
    Ok(select_batch(params, std::slice::from_ref(&ex))?.remove(0))
}

/// Fused query encoding `u` (inference).
pub fn encode_query(params: &SelectorParams, query: &Query) -> Result<Vec<f64>> {
    let c = &params.config;
    if query.x.len() != c.d_x || query.q.len() != c.d_q {
        return Err(Error::Shape {
            op: "encode_query",
            detail: format!("features ({}, {}) vs config ({}, {})", query.x.len(), query.q.len(), c.d_x, c.d_q),
        });
    }
    let mut tape = Tape::new();
    let pv = params.register(&mut tape);
    let xs = tape.constant(Tensor::matrix(1, c.d_x, query.x.clone())?);
    let qs = tape.constant(Tensor::matrix(1, c.d_q, query.q.clone())?);
    let u = pv.encode_queries(&mut tape, xs, qs)?;
    Ok(tape.value(u).data().to_vec())
}
