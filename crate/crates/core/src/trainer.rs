//! Training loop: task sampling, panel sampling, AdamW, early stopping.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor};
use crate::domain::{AlignedPrediction, Panel, Query, TaskId, Tool, ToolId};
use crate::error::{Error, Result};
use crate::objective::{batch_objective, selection_loss, ObjectiveConfig, PanelCosts};
use crate::selector::{forward_batch, select_batch, Dropout, RoutingExample, SelectorConfig, SelectorParams, SlotInput};
use crate::simworld::{LabeledQuery, SimWorld, Split};

/// Panel redraws allowed before giving up on a query.
pub const MAX_PANEL_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub batch_size: usize,
    /// Panel size for training batches.
    pub panel_size: usize,
    /// Panel size for the per-epoch validation routed cost.
    pub val_panel_size: usize,
    pub entropy_weight: f64,
    pub score_l2: f64,
    pub coverage_weight: f64,
    pub eps: f64,
    /// Task weights λ; `None` means uniform.
    pub task_weights: Option<Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    /// Optimizer steps per epoch; `None` means one pass over the train split.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-5,
            weight_decay: 1e-4,
            max_epochs: 50,
            patience: 10,
            min_delta: 1e-4,
            batch_size: 16,
            panel_size: 2,
            val_panel_size: 6,
            entropy_weight: 0.05,
            score_l2: 1e-4,
            coverage_weight: 1.0,
            eps: 1e-12,
            task_weights: None,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.eps, self.eps_opt];
        if positive.iter().any(|&v| !(v > 0.0)) || self.weight_decay < 0.0 || self.min_delta < 0.0 {
            return Err(Error::Config("lr, eps and eps_opt must be positive; weight decay and min_delta non-negative".into()));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 || self.steps_per_epoch == Some(0) {
            return Err(Error::Config("epochs, patience, batch size and steps must be at least 1".into()));
        }
        if self.panel_size < 2 || self.val_panel_size < 2 {
            return Err(Error::Config(format!("panel sizes ({}, {}) must be at least 2", self.panel_size, self.val_panel_size)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams { lr: self.lr, weight_decay: self.weight_decay, beta1: self.beta1, beta2: self.beta2, eps: self.eps_opt }
    }

    pub fn objective(&self, n_tasks: usize) -> ObjectiveConfig {
        ObjectiveConfig {
            task_weights: self.task_weights.clone().unwrap_or_else(|| vec![1.0 / n_tasks as f64; n_tasks]),
            entropy_weight: self.entropy_weight,
            score_l2: self.score_l2,
            coverage_weight: self.coverage_weight,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_cost: f64,
    pub best: bool,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!("epoch={} train_loss={:.6} val_cost={:.6} best={}", self.epoch, self.train_loss, self.val_cost, u8::from(self.best))
    }
}

/// AdamW first and second moments for a list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

/// Optimizer hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(tensors: &[Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamW { m: zeros.clone(), v: zeros, step: 0 }
    }

    /// One decoupled-weight-decay Adam update with bias correction. The step is
    /// rejected untouched if any gradient entry is non-finite.
    pub fn apply(&mut self, tensors: &mut [Tensor], grads: &[Vec<f64>], hp: AdamParams) -> Result<()> {
        if grads.len() != tensors.len() || self.m.len() != tensors.len() || grads.iter().zip(tensors.iter()).any(|(g, t)| g.len() != t.numel()) {
            return Err(Error::Shape { op: "adamw_step", detail: "gradients not shaped like params".into() });
        }
        if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of tensor {i} at step {}", self.step + 1)));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        for (((theta, g), m), v) in tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in theta.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
                *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
                let (mh, vh) = (*m / bc1, *v / bc2);
                *p -= hp.lr * (mh / (vh.sqrt() + hp.eps)) + hp.lr * hp.weight_decay * *p;
            }
        }
        Ok(())
    }
}

/// Selector parameters with their optimizer state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: SelectorParams,
    pub optimizer: AdamW,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(params: SelectorParams) -> Self {
        let optimizer = AdamW::new(params.tensors());
        TrainState { params, optimizer, history: Vec::new() }
    }
}

pub fn sample_task(weights: &[f64], rng: &mut impl Rng) -> Result<TaskId> {
    let dist = WeightedIndex::new(weights).map_err(|e| Error::Config(format!("task weights: {e}")))?;
    Ok(TaskId(dist.sample(rng)))
}

/// Draws `m` tools uniformly with replacement; the whole panel is redrawn while
/// it holds no tool valid for the query.
pub fn sample_panel(population: &[&Tool], query: &Query, m: usize, rng: &mut impl Rng) -> Result<Panel> {
    if population.is_empty() || m < 2 {
        return Err(Error::Contract(format!("panel of {m} from a population of {}", population.len())));
    }
    for _ in 0..MAX_PANEL_ATTEMPTS {
        let picks: Vec<&Tool> = (0..m).map(|_| population[rng.gen_range(0..population.len())]).collect();
        if picks.iter().any(|t| t.supports(query.task)) {
            return Ok(Panel { task: query.task, tools: picks.iter().map(|t| t.id).collect() });
        }
    }
    Err(Error::NoValidPanel { uid: query.uid, attempts: MAX_PANEL_ATTEMPTS })
}

/// Draws a panel for `lq` from its task's population in `world`.
pub fn sample_world_panel(world: &SimWorld, query: &Query, m: usize, rng: &mut impl Rng) -> Result<Panel> {
    let pop: Vec<&Tool> = world.population(query.task).iter().map(|&id| &world.tool(id).tool).collect();
    sample_panel(&pop, query, m, rng)
}

/// Everything the selector and the losses need about one panel on one query.
#[derive(Clone, Debug)]
pub struct PanelOutcome {
    pub tools: Vec<ToolId>,
    /// Aligned prediction per slot; uniform null for unsupported slots.
    pub predictions: Vec<AlignedPrediction>,
    pub costs: PanelCosts,
}

impl PanelOutcome {
    pub fn compute(world: &SimWorld, lq: &LabeledQuery, panel: &Panel) -> Result<Self> {
        let n = world.space(lq.query.task).size();
        let mut predictions = Vec::with_capacity(panel.tools.len());
        let mut costs = Vec::with_capacity(panel.tools.len());
        let mut valid = Vec::with_capacity(panel.tools.len());
        for &id in &panel.tools {
            match world.outcome(id, lq)? {
                Some((p, c)) => {
                    predictions.push(p);
                    costs.push(c);
                    valid.push(true);
                }
                None => {
                    predictions.push(AlignedPrediction::null(n));
                    costs.push(0.0);
                    valid.push(false);
                }
            }
        }
        Ok(PanelOutcome { tools: panel.tools.clone(), predictions, costs: PanelCosts::new(costs, valid)? })
    }

    pub fn example<'a>(&'a self, world: &'a SimWorld, query: &'a Query) -> RoutingExample<'a> {
        RoutingExample {
            query,
            slots: self
                .tools
                .iter()
                .zip(&self.predictions)
                .map(|(&id, p)| SlotInput { tool: &world.tool(id).tool, prediction: p })
                .collect(),
        }
    }
}

pub fn adamw_step(state: &mut TrainState, grads: &[Vec<f64>], cfg: &TrainConfig) -> Result<()> {
    state.optimizer.apply(state.params.tensors_mut(), grads, cfg.adam())
}

/// True once the best validation cost has gone `patience` epochs without
/// improving by more than `min_delta`.
pub fn early_stop(history: &[f64], patience: usize, min_delta: f64) -> bool {
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for &v in history {
        if best - v > min_delta || best.is_infinite() {
            best = v;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    stale >= patience
}

/// Mean routed cost of the selector over a split, with panels drawn from a fixed stream.
pub fn routed_cost(params: &SelectorParams, world: &SimWorld, split: Split, m: usize, seed: u64) -> Result<f64> {
    let queries = world.split(split);
    if queries.is_empty() {
        return Err(Error::Contract(format!("{} split is empty", split.name())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outcomes = queries
        .iter()
        .map(|lq| PanelOutcome::compute(world, lq, &sample_world_panel(world, &lq.query, m, &mut rng)?))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for (chunk, outs) in queries.chunks(64).zip(outcomes.chunks(64)) {
        let batch: Vec<RoutingExample> = chunk.iter().zip(outs).map(|(lq, o)| o.example(world, &lq.query)).collect();
        for (d, o) in select_batch(params, &batch)?.iter().zip(outs) {
            total += selection_loss(&o.costs, d)?;
        }
    }
    Ok(total / queries.len() as f64)
}

/// Seed of the fixed validation panel stream used by [`fit`].
pub fn validation_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_0f_7a1
}

pub struct FitResult {
    /// Best-validation snapshot.
    pub params: SelectorParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Trains a selector on `world`'s train split, selecting on validation routed cost.
pub fn fit(cfg: &TrainConfig, selector: &SelectorConfig, world: &SimWorld, seed: u64, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<FitResult> {
    cfg.validate()?;
    let n_tasks = world.num_tasks();
    let obj = cfg.objective(n_tasks);
    obj.validate()?;
    let train = world.split(Split::Train);
    if train.is_empty() || world.split(Split::Val).is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    let mut by_task: Vec<Vec<&LabeledQuery>> = vec![Vec::new(); n_tasks];
    for lq in train {
        by_task[lq.query.task.0].push(lq);
    }
    // Tasks without training data cannot be sampled.
    let weights: Vec<f64> = obj.task_weights.iter().zip(&by_task).map(|(&w, qs)| if qs.is_empty() { 0.0 } else { w }).collect();

    let mut state = TrainState::new(SelectorParams::init(selector, seed)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    dropout_rng.set_stream(2);
    let val_seed = validation_seed(seed);
    let steps = cfg.steps_per_epoch.unwrap_or_else(|| train.len().div_ceil(cfg.batch_size));

    let mut best = (f64::INFINITY, state.params.clone(), 0usize);
    let mut val_history = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        for step in 0..steps {
            let task = sample_task(&weights, &mut rng)?;
            let pool = &by_task[task.0];
            let batch: Vec<&LabeledQuery> = (0..cfg.batch_size).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
            let outcomes = batch
                .iter()
                .map(|lq| PanelOutcome::compute(world, lq, &sample_world_panel(world, &lq.query, cfg.panel_size, &mut rng)?))
                .collect::<Result<Vec<_>>>()?;
            let examples: Vec<RoutingExample> = batch.iter().zip(&outcomes).map(|(lq, o)| o.example(world, &lq.query)).collect();
            let costs: Vec<PanelCosts> = outcomes.iter().map(|o| o.costs.clone()).collect();
            let tasks = vec![task; batch.len()];

            let mut tape = Tape::new();
            let pv = state.params.register(&mut tape);
            let mut dropout = Dropout::On { rate: selector.dropout, rng: &mut dropout_rng };
            let fwd = forward_batch(&mut tape, &pv, selector, &examples, &mut dropout)?;
            let loss = batch_objective(&mut tape, &obj, &fwd, &costs, &tasks)?;
            let value = tape.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch} step {}", step + 1)));
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Vec<f64>> = pv.all().iter().map(|&v| grads.wrt(v)).collect();
            adamw_step(&mut state, &g, cfg).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} (epoch {epoch})")),
                e => e,
            })?;
            loss_sum += value;
        }
        let val_cost = routed_cost(&state.params, world, Split::Val, cfg.val_panel_size, val_seed)?;
        let improved = best.0 - val_cost > cfg.min_delta || best.0.is_infinite();
        if improved {
            best = (val_cost, state.params.clone(), epoch);
        }
        let rec = EpochRecord { epoch, train_loss: loss_sum / steps as f64, val_cost, best: improved };
        on_epoch(&rec);
        state.history.push(rec);
        val_history.push(val_cost);
        if early_stop(&val_history, cfg.patience, cfg.min_delta) {
            break;
        }
    }
    Ok(FitResult { params: best.1, history: state.history, best_epoch: best.2 })
}
