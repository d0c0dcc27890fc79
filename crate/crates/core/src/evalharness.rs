//! Paired-panel evaluation of routers, per-task metrics and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::baselines::{RouteInput, Router, RouterKind};
use crate::domain::{findings_f1, AlignedPayload, GroundTruth, Panel, TaskFamily, TaskId, ToolId};
use crate::error::{Error, Result};
use crate::simworld::{SimWorld, Split};
use crate::trainer::{sample_world_panel, PanelOutcome};

/// Panel size used at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PanelSize {
    Sampled(usize),
    /// Every tool of the query's task population, in id order.
    Full,
}

impl std::fmt::Display for PanelSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PanelSize::Sampled(m) => write!(f, "{m}"),
            PanelSize::Full => write!(f, "full"),
        }
    }
}

impl std::str::FromStr for PanelSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(PanelSize::Full);
        }
        match s.parse::<usize>() {
            Ok(m) if m >= 2 => Ok(PanelSize::Sampled(m)),
            _ => Err(Error::Config(format!("panel size {s:?}: expected an integer >= 2 or \"full\""))),
        }
    }
}

/// The executed panels of one evaluation run, shared by every router in it.
#[derive(Clone, Debug)]
pub struct EvalPanels {
    pub split: Split,
    pub panel_size: PanelSize,
    pub seed: u64,
    pub outcomes: Vec<PanelOutcome>,
}

impl EvalPanels {
    pub fn sample(world: &SimWorld, split: Split, panel_size: PanelSize, seed: u64) -> Result<Self> {
        let queries = world.split(split);
        if queries.is_empty() {
            return Err(Error::Contract(format!("{} split is empty", split.name())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let outcomes = queries
            .iter()
            .map(|lq| {
                let panel = match panel_size {
                    PanelSize::Sampled(m) => sample_world_panel(world, &lq.query, m, &mut rng)?,
                    PanelSize::Full => Panel { task: lq.query.task, tools: world.population(lq.query.task).to_vec() },
                };
                PanelOutcome::compute(world, lq, &panel)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalPanels { split, panel_size, seed, outcomes })
    }

    /// Hex SHA-256 over the panel tool ids in query order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for o in &self.outcomes {
            for t in &o.tools {
                h.update((t.0 as u64).to_le_bytes());
            }
            h.update(u64::MAX.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Per-task aggregate for one router.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskReport {
    pub task: usize,
    pub family: TaskFamily,
    pub queries: usize,
    pub mean_cost: f64,
    /// Named task metrics; the set depends on the family.
    pub metrics: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub router: String,
    pub split: Split,
    pub panel_size: PanelSize,
    pub seed: u64,
    pub queries: usize,
    pub mean_cost: f64,
    /// Standard error of the mean routed cost.
    pub cost_se: f64,
    pub per_task: Vec<TaskReport>,
    /// Selections per tool.
    pub histogram: BTreeMap<ToolId, usize>,
    pub gap_closure: Option<f64>,
    pub panel_digest: String,
    /// Routed cost per query, in split order.
    pub query_costs: Vec<f64>,
    /// Selected slot per query, in split order.
    pub selections: Vec<usize>,
}

/// Fraction of the Random-to-Oracle cost gap a method closes; `None` when the
/// gap is empty or inverted.
pub fn gap_closure(c_method: f64, c_random: f64, c_oracle: f64) -> Option<f64> {
    (c_random > c_oracle).then(|| (c_random - c_method) / (c_random - c_oracle))
}

/// Recursive pairwise summation.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let (a, b) = v.split_at(v.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = pairwise_sum(v) / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = v.iter().map(|c| (c - mean) * (c - mean)).collect();
    (mean, (pairwise_sum(&dev) / (n - 1.0) / n).sqrt())
}

/// Confusion counts over `k` labels, rows = truth, columns = prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    pub k: usize,
    pub counts: Vec<usize>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Confusion { k, counts: vec![0; k * k] }
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.k + pred] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let diag: usize = (0..self.k).map(|i| self.counts[i * self.k + i]).sum();
        diag as f64 / self.total().max(1) as f64
    }

    /// Macro precision, recall and F1 over labels that occur as truth or prediction.
    /// Undefined per-label ratios count as 0.
    pub fn macro_prf(&self) -> (f64, f64, f64) {
        let k = self.k;
        let (mut p, mut r, mut f, mut n) = (0.0, 0.0, 0.0, 0usize);
        for c in 0..k {
            let tp = self.counts[c * k + c] as f64;
            let row: usize = (0..k).map(|j| self.counts[c * k + j]).sum();
            let col: usize = (0..k).map(|i| self.counts[i * k + c]).sum();
            if row == 0 && col == 0 {
                continue;
            }
            let pc = if col > 0 { tp / col as f64 } else { 0.0 };
            let rc = if row > 0 { tp / row as f64 } else { 0.0 };
            p += pc;
            r += rc;
            f += if pc + rc > 0.0 { 2.0 * pc * rc / (pc + rc) } else { 0.0 };
            n += 1;
        }
        if n == 0 {
            return (0.0, 0.0, 0.0);
        }
        let n = n as f64;
        (p / n, r / n, f / n)
    }
}

/// Metric names reported for a family, in column order.
pub fn metric_names(family: TaskFamily) -> &'static [&'static str] {
    match family {
        TaskFamily::Classification => &["acc", "precision", "recall", "f1"],
        TaskFamily::Grounding => &["iou"],
        TaskFamily::ReportGeneration => &["findings_f1"],
        TaskFamily::MultipleChoice => &["acc"],
    }
}

enum TaskAccum {
    Labels(Confusion),
    Mean(Vec<f64>),
}

/// Routes every query of the shared panels with `router` and aggregates.
pub fn evaluate_on(name: &str, router: &Router, world: &SimWorld, panels: &EvalPanels) -> Result<MetricsReport> {
    let queries = world.split(panels.split);
    if queries.len() != panels.outcomes.len() {
        return Err(Error::Contract("panels were sampled for a different split".into()));
    }
    let inputs: Vec<RouteInput> =
        queries.iter().zip(&panels.outcomes).map(|(lq, o)| RouteInput { world, query: &lq.query, outcome: o }).collect();
    // Random draws from its own stream so the panel sequence stays shared.
    let mut rng = ChaCha8Rng::seed_from_u64(panels.seed);
    rng.set_stream(7);
    let selections = router.route_batch(&inputs, &mut rng)?;

    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.sort_by_key(|&i| queries[i].query.uid);

    let mut histogram = BTreeMap::new();
    let mut query_costs = vec![0.0; queries.len()];
    let mut tasks: BTreeMap<usize, (Vec<f64>, TaskAccum)> = BTreeMap::new();
    for &i in &order {
        let (lq, o, j) = (&queries[i], &panels.outcomes[i], selections[i]);
        if !o.costs.valid[j] {
            return Err(Error::Contract(format!("{name} selected masked slot {j} for query {}", lq.query.uid)));
        }
        query_costs[i] = o.costs.costs[j];
        *histogram.entry(o.tools[j]).or_insert(0) += 1;
        let t = lq.query.task.0;
        let family = world.family(lq.query.task);
        let entry = tasks.entry(t).or_insert_with(|| {
            let acc = match family {
                TaskFamily::Classification => TaskAccum::Labels(Confusion::new(world.space(lq.query.task).size())),
                _ => TaskAccum::Mean(Vec::new()),
            };
            (Vec::new(), acc)
        });
        entry.0.push(query_costs[i]);
        let pred = &o.predictions[j];
        match (&mut entry.1, &pred.payload, &lq.gt) {
            (TaskAccum::Labels(cm), AlignedPayload::Probs(_), GroundTruth::Class(y)) => {
                cm.add(*y, pred.argmax().unwrap_or(0));
            }
            (TaskAccum::Mean(v), AlignedPayload::Probs(_), GroundTruth::Choice(y)) => v.push(f64::from(pred.argmax() == Some(*y))),
            (TaskAccum::Mean(v), AlignedPayload::Box(b), GroundTruth::Box(g)) => v.push(b.iou(g)),
            (TaskAccum::Mean(v), AlignedPayload::Findings(f), GroundTruth::Findings(g)) => v.push(findings_f1(f, g)),
            _ => return Err(Error::Contract(format!("prediction for query {} does not match its task", lq.query.uid))),
        }
    }
    let per_task = tasks
        .into_iter()
        .map(|(t, (costs, acc))| {
            let metrics = match acc {
                TaskAccum::Labels(cm) => {
                    let (p, r, f) = cm.macro_prf();
                    vec![("acc".into(), cm.accuracy()), ("precision".into(), p), ("recall".into(), r), ("f1".into(), f)]
                }
                TaskAccum::Mean(v) => {
                    let name = metric_names(world.family(TaskId(t)))[0];
                    vec![(name.to_string(), pairwise_sum(&v) / v.len() as f64)]
                }
            };
            TaskReport { task: t, family: world.family(TaskId(t)), queries: costs.len(), mean_cost: mean_se(&costs).0, metrics }
        })
        .collect();
    let ordered: Vec<f64> = order.iter().map(|&i| query_costs[i]).collect();
    let (mean_cost, cost_se) = mean_se(&ordered);
    Ok(MetricsReport {
        router: name.to_string(),
        split: panels.split,
        panel_size: panels.panel_size,
        seed: panels.seed,
        queries: queries.len(),
        mean_cost,
        cost_se,
        per_task,
        histogram,
        gap_closure: None,
        panel_digest: panels.digest(),
        query_costs,
        selections,
    })
}

/// Evaluates one router on freshly sampled panels. Any two calls with the same
/// world, split, panel size and seed see identical panels.
pub fn evaluate(name: &str, router: &Router, world: &SimWorld, split: Split, panel_size: PanelSize, seed: u64) -> Result<MetricsReport> {
    evaluate_on(name, router, world, &EvalPanels::sample(world, split, panel_size, seed)?)
}

/// Evaluates several routers on one set of panels and fills in gap closure
/// from the Random and Oracle rows, evaluating those two if absent.
pub fn compare(routers: &[(&str, &Router)], world: &SimWorld, split: Split, panel_size: PanelSize, seed: u64) -> Result<Vec<MetricsReport>> {
    let panels = EvalPanels::sample(world, split, panel_size, seed)?;
    let mut reports = routers.iter().map(|(n, r)| evaluate_on(n, r, world, &panels)).collect::<Result<Vec<_>>>()?;
    let reference = |kind: RouterKind, reports: &[MetricsReport]| -> Result<f64> {
        match routers.iter().position(|(_, r)| r.kind() == kind) {
            Some(i) => Ok(reports[i].mean_cost),
            None => Ok(evaluate_on(kind.name(), &fixed(kind), world, &panels)?.mean_cost),
        }
    };
    let c_random = reference(RouterKind::Random, &reports)?;
    let c_oracle = reference(RouterKind::Oracle, &reports)?;
    for r in &mut reports {
        r.gap_closure = gap_closure(r.mean_cost, c_random, c_oracle);
    }
    Ok(reports)
}

fn fixed(kind: RouterKind) -> Router {
    match kind {
        RouterKind::Oracle => Router::Oracle,
        _ => Router::Random,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |g| format!("{g:.4}"))
}

/// Fixed-width table (rows: routers; columns: cost, gap closure, per-task
/// metrics) followed by one `record` line per (router, task).
pub fn render_report(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    let Some(first) = reports.first() else {
        return out;
    };
    let _ = writeln!(out, "split={} panel_size={} seed={} queries={} panels={}", first.split.name(), first.panel_size, first.seed, first.queries, first.panel_digest);
    let mut header = format!("{:<12} {:>8} {:>8}", "router", "cost", "gap");
    for t in &first.per_task {
        for name in metric_names(t.family) {
            header.push_str(&format!(" {:>14}", format!("t{}:{}", t.task, name)));
        }
    }
    let _ = writeln!(out, "{header}");
    let _ = writeln!(out, "{}", "-".repeat(header.len()));
    for r in reports {
        let mut row = format!("{:<12} {:>8.4} {:>8}", r.router, r.mean_cost, fmt_opt(r.gap_closure));
        for t in &r.per_task {
            for (_, v) in &t.metrics {
                row.push_str(&format!(" {:>14.4}", v));
            }
        }
        let _ = writeln!(out, "{row}");
    }
    for r in reports {
        for t in &r.per_task {
            let mut line = format!(
                "record router={} task={} family={} n={} mean_cost={}",
                r.router,
                t.task,
                t.family.tag(),
                t.queries,
                t.mean_cost
            );
            for (k, v) in &t.metrics {
                let _ = write!(line, " {k}={v}");
            }
            if let Some(g) = r.gap_closure {
                let _ = write!(line, " gap_closure={g}");
            }
            let _ = writeln!(out, "{line}");
        }
    }
    out
}

/// A parsed `record` line: key order preserved, numbers parsed where possible.
pub fn parse_record(line: &str) -> Result<Vec<(String, String)>> {
    let rest = line.strip_prefix("record ").ok_or_else(|| Error::Parse { line: 1, msg: "missing record prefix".into() })?;
    rest.split(' ')
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Parse { line: 1, msg: format!("field {kv:?} lacks '='") })
        })
        .collect()
}
