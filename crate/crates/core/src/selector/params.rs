use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub d_x: usize,
    pub d_q: usize,
    /// Width of the image encoder output.
    pub dx_enc: usize,
    /// Width of the instruction encoder output.
    pub dq_enc: usize,
    pub d_u: usize,
    /// Reference embedding width.
    pub d_ref: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub hidden: usize,
    pub coverage_hidden: usize,
    pub dropout: f64,
    pub ref_size: usize,
    pub label_embed_dim: usize,
    /// Fixed width of the aligned-prediction slot fed to the head.
    pub slot_width: usize,
    pub eta_dim: usize,
    /// Rows of each task's ground-truth embedding table.
    pub label_rows: Vec<usize>,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            d_x: 16,
            d_q: 8,
            dx_enc: 16,
            dq_enc: 8,
            d_u: 32,
            d_ref: 32,
            d_k: 16,
            d_v: 32,
            hidden: 512,
            coverage_hidden: 512,
            dropout: 0.1,
            ref_size: 16,
            label_embed_dim: 8,
            slot_width: 5,
            eta_dim: 2,
            label_rows: vec![5, 4, 5, 4],
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_x, self.d_q, self.dx_enc, self.dq_enc, self.d_u, self.d_ref, self.d_k, self.d_v,
            self.hidden, self.coverage_hidden, self.ref_size, self.label_embed_dim, self.slot_width, self.eta_dim,
        ];
        if dims.contains(&0) || self.label_rows.is_empty() || self.label_rows.contains(&0) {
            return Err(Error::Config("selector dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_input(&self) -> usize {
        self.d_u + self.d_v + self.slot_width + self.eta_dim
    }
}

/// Index of each fixed parameter tensor; per-task label tables follow `LABEL_BASE`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(usize)]
pub(crate) enum P {
    PhiXW,
    PhiXB,
    PhiQW,
    PhiQB,
    FuseW,
    FuseB,
    RhoW,
    RhoB,
    RefW,
    RefB,
    SelfQ,
    SelfK,
    SelfV,
    CrossQ,
    CrossK,
    CrossV,
    HeadW1,
    HeadB1,
    HeadW2,
    HeadB2,
    CovW1,
    CovB1,
    CovW2,
    CovB2,
}

pub(crate) const LABEL_BASE: usize = 24;

const NAMES: [&str; LABEL_BASE] = [
    "phi_x.weight", "phi_x.bias", "phi_q.weight", "phi_q.bias", "fuse.weight", "fuse.bias",
    "rho_m.weight", "rho_m.bias", "ref_embed.weight", "ref_embed.bias",
    "self_attn.query", "self_attn.key", "self_attn.value",
    "cross_attn.query", "cross_attn.key", "cross_attn.value",
    "head.fc1.weight", "head.fc1.bias", "head.fc2.weight", "head.fc2.bias",
    "coverage.fc1.weight", "coverage.fc1.bias", "coverage.fc2.weight", "coverage.fc2.bias",
];

/// Every trainable tensor of the selector, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectorParams {
    pub config: SelectorConfig,
    tensors: Vec<Tensor>,
}

fn shapes(c: &SelectorConfig) -> Vec<Vec<usize>> {
    let mut s = vec![
        vec![c.d_x, c.dx_enc],
        vec![c.dx_enc],
        vec![c.d_q, c.dq_enc],
        vec![c.dq_enc],
        vec![c.dx_enc + c.dq_enc, c.d_u],
        vec![c.d_u],
        vec![c.slot_width, c.label_embed_dim],
        vec![c.label_embed_dim],
        vec![c.dx_enc + 2 * c.label_embed_dim, c.d_ref],
        vec![c.d_ref],
        vec![c.d_ref, c.d_ref],
        vec![c.d_ref, c.d_ref],
        vec![c.d_ref, c.d_ref],
        vec![c.d_u, c.d_k],
        vec![c.dx_enc, c.d_k],
        vec![c.d_ref, c.d_v],
        vec![c.head_input(), c.hidden],
        vec![c.hidden],
        vec![c.hidden, 1],
        vec![1],
        vec![c.d_u + c.d_v, c.coverage_hidden],
        vec![c.coverage_hidden],
        vec![c.coverage_hidden, 1],
        vec![1],
    ];
    s.extend(c.label_rows.iter().map(|&r| vec![r, c.label_embed_dim]));
    s
}

impl SelectorParams {
    /// Glorot-uniform weights, zero biases, deterministic in `seed`.
    pub fn init(config: &SelectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = shapes(config)
            .into_iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let data = if shape.len() == 1 {
                    vec![0.0; n]
                } else {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                };
                Tensor::raw(shape, data).with_grad()
            })
            .collect();
        Ok(SelectorParams { config: config.clone(), tensors })
    }

    /// Rebuilds params from named tensors (checkpoint load), checking every shape.
    pub fn from_named(config: SelectorConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = shapes(&config);
        if named.len() != expected.len() {
            return Err(Error::Shape {
                op: "load_params",
                detail: format!("{} tensors for {} slots", named.len(), expected.len()),
            });
        }
        let mut tensors = Vec::with_capacity(named.len());
        for (i, ((name, t), shape)) in named.into_iter().zip(expected).enumerate() {
            if name != param_name(i) || t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "load_params",
                    detail: format!("{name} {:?} where {} {shape:?} expected", t.shape(), param_name(i)),
                });
            }
            tensors.push(t.with_grad());
        }
        Ok(SelectorParams { config, tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (String, &Tensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (param_name(i), t))
    }

    #[cfg(test)]
    pub(crate) fn get(&self, p: P) -> &Tensor {
        &self.tensors[p as usize]
    }

    #[cfg(test)]
    pub(crate) fn get_mut(&mut self, p: P) -> &mut Tensor {
        &mut self.tensors[p as usize]
    }

    pub fn label_table(&self, task: usize) -> Option<&Tensor> {
        self.tensors.get(LABEL_BASE + task)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor on `tape`.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars { vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

pub fn param_name(i: usize) -> String {
    NAMES.get(i).map_or_else(|| format!("label_embed.task{}", i - LABEL_BASE), |s| s.to_string())
}

/// Tape handles for a registered [`SelectorParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub(crate) vars: Vec<Var>,
}

impl ParamVars {
    /// Wraps tape handles recorded in [`SelectorParams::tensors`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        ParamVars { vars }
    }

    pub(crate) fn get(&self, p: P) -> Var {
        self.vars[p as usize]
    }

    pub(crate) fn label_table(&self, task: usize) -> Option<Var> {
        self.vars.get(LABEL_BASE + task).copied()
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}
