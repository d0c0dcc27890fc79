//! Reference routers: Random, Oracle, GlobalBest, KNN, an index-output MLP, and
//! the trained selector behind the same interface.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor};
use crate::domain::{Query, ToolId};
use crate::error::{Error, Result};
use crate::selector::{select_batch, RoutingExample, SelectorParams};
use crate::simworld::{SimWorld, Split};
use crate::trainer::{AdamParams, AdamW, PanelOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RouterKind {
    Random,
    Oracle,
    GlobalBest,
    Knn,
    MlpIndex,
    ToolSelect,
}

impl RouterKind {
    pub const ALL: [RouterKind; 6] =
        [RouterKind::Random, RouterKind::Oracle, RouterKind::GlobalBest, RouterKind::Knn, RouterKind::MlpIndex, RouterKind::ToolSelect];

    pub fn name(self) -> &'static str {
        match self {
            RouterKind::Random => "Random",
            RouterKind::Oracle => "Oracle",
            RouterKind::GlobalBest => "GlobalBest",
            RouterKind::Knn => "KNN",
            RouterKind::MlpIndex => "MLPIndex",
            RouterKind::ToolSelect => "ToolSelect",
        }
    }
}

impl std::str::FromStr for RouterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RouterKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown router {s:?}")))
    }
}

/// A query with the cost of every tool in its population that supports it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub query: Query,
    pub costs: BTreeMap<ToolId, f64>,
}

impl TrainRecord {
    /// Cheapest tool, ties to the lowest id.
    pub fn best_tool(&self) -> Option<ToolId> {
        let mut best: Option<(ToolId, f64)> = None;
        for (&id, &c) in &self.costs {
            if best.is_none_or(|(_, b)| c < b) {
                best = Some((id, c));
            }
        }
        best.map(|(id, _)| id)
    }
}

/// Panel-free training records for a split.
pub fn train_records(world: &SimWorld, split: Split) -> Result<Vec<TrainRecord>> {
    world
        .split(split)
        .iter()
        .map(|lq| {
            let mut costs = BTreeMap::new();
            for &id in world.population(lq.query.task) {
                if let Some(c) = world.cost(id, lq)? {
                    costs.insert(id, c);
                }
            }
            Ok(TrainRecord { query: lq.query.clone(), costs })
        })
        .collect()
}

/// What a router sees for one query: the panel and its executed outcomes. The
/// costs inside `outcome` are ground truth and only the Oracle reads them.
#[derive(Clone, Copy)]
pub struct RouteInput<'a> {
    pub world: &'a SimWorld,
    pub query: &'a Query,
    pub outcome: &'a PanelOutcome,
}

impl RouteInput<'_> {
    fn valid(&self) -> &[bool] {
        &self.outcome.costs.valid
    }
}

#[derive(Clone, Debug)]
pub struct MlpIndex {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpIndex {
    pub fn num_tools(&self) -> usize {
        self.b2.numel()
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let (d_in, h) = (self.w1.shape()[0], self.w1.shape()[1]);
        let hidden: Vec<f64> = (0..h)
            .map(|k| {
                let z = self.b1.data()[k] + (0..d_in).map(|i| x[i] * self.w1.data()[i * h + k]).sum::<f64>();
                crate::diffcore::gelu_scalar(z)
            })
            .collect();
        let n = self.num_tools();
        (0..n).map(|o| self.b2.data()[o] + (0..h).map(|k| hidden[k] * self.w2.data()[k * n + o]).sum::<f64>()).collect()
    }
}

/// Fitting hyperparameters for the learned baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub knn_k: usize,
    pub mlp_hidden: usize,
    pub mlp_epochs: usize,
    pub mlp_batch: usize,
    pub mlp_lr: f64,
    pub mlp_weight_decay: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { knn_k: 5, mlp_hidden: 64, mlp_epochs: 30, mlp_batch: 64, mlp_lr: 3e-3, mlp_weight_decay: 1e-4 }
    }
}

#[derive(Clone, Debug)]
pub enum Router {
    Random,
    /// Evaluation only: reads true costs.
    Oracle,
    GlobalBest { mean_cost: BTreeMap<ToolId, f64> },
    Knn { k: usize, bank: Vec<TrainRecord> },
    MlpIndex(MlpIndex),
    ToolSelect(SelectorParams),
}

fn features(q: &Query) -> Vec<f64> {
    q.x.iter().chain(&q.q).copied().collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lowest-ranked valid slot; `key` returns `None` for tools the router knows
/// nothing about, which sort after every known tool. Ties go to the lowest slot.
fn pick_min(valid: &[bool], mut key: impl FnMut(usize) -> Option<f64>) -> Result<usize> {
    let mut best: Option<(usize, Option<f64>)> = None;
    for j in (0..valid.len()).filter(|&j| valid[j]) {
        let k = key(j);
        let better = match (best, k) {
            (None, _) => true,
            (Some((_, None)), Some(_)) => true,
            (Some((_, Some(b))), Some(v)) => v < b,
            _ => false,
        };
        if better {
            best = Some((j, k));
        }
    }
    best.map(|(j, _)| j).ok_or(Error::NoValidCandidate)
}

impl Router {
    pub fn kind(&self) -> RouterKind {
        match self {
            Router::Random => RouterKind::Random,
            Router::Oracle => RouterKind::Oracle,
            Router::GlobalBest { .. } => RouterKind::GlobalBest,
            Router::Knn { .. } => RouterKind::Knn,
            Router::MlpIndex(_) => RouterKind::MlpIndex,
            Router::ToolSelect(_) => RouterKind::ToolSelect,
        }
    }

    /// Fits a router from panel-free records. ToolSelect is trained by the
    /// trainer and wrapped with [`Router::ToolSelect`] instead.
    pub fn fit(kind: RouterKind, records: &[TrainRecord], cfg: &BaselineConfig, seed: u64) -> Result<Router> {
        match kind {
            RouterKind::Random => return Ok(Router::Random),
            RouterKind::Oracle => return Ok(Router::Oracle),
            RouterKind::ToolSelect => return Err(Error::Contract("ToolSelect is fitted by the trainer".into())),
            _ => {}
        }
        if records.iter().all(|r| r.costs.is_empty()) {
            return Err(Error::EmptyTrainSet);
        }
        Ok(match kind {
            RouterKind::GlobalBest => {
                let mut sums: BTreeMap<ToolId, (f64, usize)> = BTreeMap::new();
                for r in records {
                    for (&id, &c) in &r.costs {
                        let e = sums.entry(id).or_insert((0.0, 0));
                        e.0 += c;
                        e.1 += 1;
                    }
                }
                Router::GlobalBest { mean_cost: sums.into_iter().map(|(id, (s, n))| (id, s / n as f64)).collect() }
            }
            RouterKind::Knn => {
                if cfg.knn_k == 0 {
                    return Err(Error::Config("knn_k must be at least 1".into()));
                }
                Router::Knn { k: cfg.knn_k, bank: records.iter().filter(|r| !r.costs.is_empty()).cloned().collect() }
            }
            RouterKind::MlpIndex => Router::MlpIndex(fit_mlp(records, cfg, seed)?),
            _ => unreachable!(),
        })
    }

    /// Picks a slot for one query. `rng` is only drawn from by Random.
    pub fn route(&self, input: &RouteInput, rng: &mut impl Rng) -> Result<usize> {
        let valid = input.valid();
        let tools = &input.outcome.tools;
        match self {
            Router::Random => {
                let slots: Vec<usize> = (0..valid.len()).filter(|&j| valid[j]).collect();
                slots.choose(rng).copied().ok_or(Error::NoValidCandidate)
            }
            Router::Oracle => {
                let costs = &input.outcome.costs.costs;
                pick_min(valid, |j| Some(costs[j]))
            }
            Router::GlobalBest { mean_cost } => pick_min(valid, |j| mean_cost.get(&tools[j]).copied()),
            Router::Knn { k, bank } => {
                let f = features(input.query);
                let mut near: Vec<(f64, usize)> = bank
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| r.query.task == input.query.task)
                    .map(|(i, r)| (dist2(&f, &features(&r.query)), i))
                    .collect();
                near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                near.truncate(*k);
                pick_min(valid, |j| {
                    let cs: Vec<f64> = near.iter().filter_map(|&(_, i)| bank[i].costs.get(&tools[j]).copied()).collect();
                    (!cs.is_empty()).then(|| cs.iter().sum::<f64>() / cs.len() as f64)
                })
            }
            Router::MlpIndex(mlp) => {
                let logits = mlp.logits(&features(input.query));
                pick_min(valid, |j| logits.get(tools[j].0).map(|l| -l))
            }
            Router::ToolSelect(_) => Ok(self.route_batch(std::slice::from_ref(input), rng)?[0]),
        }
    }

    /// Routes many queries; ToolSelect batches its forward passes.
    pub fn route_batch(&self, inputs: &[RouteInput], rng: &mut impl Rng) -> Result<Vec<usize>> {
        let Router::ToolSelect(params) = self else {
            return inputs.iter().map(|i| self.route(i, rng)).collect();
        };
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(64) {
            let batch: Vec<RoutingExample> = chunk.iter().map(|i| i.outcome.example(i.world, i.query)).collect();
            out.extend(select_batch(params, &batch)?.into_iter().map(|d| d.selected));
        }
        Ok(out)
    }
}

fn fit_mlp(records: &[TrainRecord], cfg: &BaselineConfig, seed: u64) -> Result<MlpIndex> {
    let data: Vec<(Vec<f64>, usize)> = records.iter().filter_map(|r| r.best_tool().map(|t| (features(&r.query), t.0))).collect();
    if cfg.mlp_hidden == 0 || cfg.mlp_batch == 0 || cfg.mlp_epochs == 0 {
        return Err(Error::Config("MLP hidden width, batch and epochs must be at least 1".into()));
    }
    let Some(d_in) = data.first().map(|d| d.0.len()) else {
        return Err(Error::EmptyTrainSet);
    };
    let n_out = records.iter().flat_map(|r| r.costs.keys()).map(|t| t.0 + 1).max().unwrap_or(1);
    let h = cfg.mlp_hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut glorot = |rows: usize, cols: usize| {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let u = Uniform::new_inclusive(-a, a);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| u.sample(&mut rng)).collect())
    };
    let mut params: Vec<Tensor> =
        vec![glorot(d_in, h)?, Tensor::zeros(vec![h]), glorot(h, n_out)?, Tensor::zeros(vec![n_out])].into_iter().map(Tensor::with_grad).collect();
    let mut opt = AdamW::new(&params);
    let hp = AdamParams { lr: cfg.mlp_lr, weight_decay: cfg.mlp_weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle = ChaCha8Rng::seed_from_u64(seed);
    shuffle.set_stream(1);
    for _ in 0..cfg.mlp_epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.mlp_batch) {
            let mut tape = Tape::new();
            let vars: Vec<_> = params.iter().map(|p| tape.leaf(p.clone())).collect();
            let rows: Vec<Vec<f64>> = chunk.iter().map(|&i| data[i].0.clone()).collect();
            let x = tape.constant(Tensor::from_rows(&rows)?);
            let z = tape.linear(x, vars[0], vars[1])?;
            let a = tape.gelu(z);
            let logits = tape.linear(a, vars[2], vars[3])?;
            let p = tape.softmax_rows(logits)?;
            let lp = tape.log_clamp(p, 1e-12);
            let mut w = vec![0.0; chunk.len() * n_out];
            for (r, &i) in chunk.iter().enumerate() {
                w[r * n_out + data[i].1] = -1.0 / chunk.len() as f64;
            }
            let loss = tape.weighted_sum(lp, w)?;
            let grads = tape.backward(loss)?;
            let g: Vec<Vec<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();
            opt.apply(&mut params, &g, hp)?;
        }
    }
    let mut it = params.into_iter();
    let (w1, b1, w2, b2) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    Ok(MlpIndex { w1, b1, w2, b2 })
}
