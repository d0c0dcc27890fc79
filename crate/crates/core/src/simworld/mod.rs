//! Synthetic tool zoo.
//!
//! Every task draws queries from a mixture of class centroids in feature space.
//! Every tool has an expertise centroid `μ`; its competence on a query decays
//! radially with `‖x − μ‖²`, so which tool is best changes from query to query.
//! Instruction features carry the task code plus a noisy hint of the answer.
//! Tool outputs are frozen: the noise behind a tool's answer to a query is a
//! pure function of the tool's noise stream and the query uid.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{
    align, cost, AlignedPrediction, BBox, CanonicalLabelSpace, ClassificationCost, FindingPair, GroundTruth,
    LabelAlignment, OutputDomain, Query, RawPrediction, ReferenceElement, ReferenceSet, TaskFamily, TaskId,
    TaskRegistry, Tool, ToolId,
};
use crate::error::{Error, Result};
use crate::io::{from_ndjson, to_ndjson, write_atomic};
use crate::selector::{target_encoding, SelectorConfig};


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    /// Task count per family, in [`TaskFamily::ALL`] order.
    pub tasks_per_family: Vec<usize>,
    pub d_x: usize,
    pub d_q: usize,
    pub tools_per_task: usize,
    pub class_labels: usize,
    pub mcq_options: usize,
    pub findings: usize,
    pub locations: usize,
    pub p_max: f64,
    /// Competence floor; `None` means `1/|Y_t|` per task.
    pub p_floor: Option<f64>,
    pub beta: f64,
    pub support_prob: f64,
    /// Probability that a tool uses a coarsened classification label space.
    pub coarsen_prob: f64,
    /// Class centroids are drawn from `U[-s, s]^{d_x}`.
    pub centroid_scale: f64,
    pub query_noise: f64,
    /// Probability that the instruction hint names the true answer.
    pub hint_accuracy: f64,
    pub hint_scale: f64,
    pub instruction_noise: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Reference-set size per (tool, supported task).
    pub ref_size: usize,
    /// Cost of a classification prediction.
    pub classification_cost: ClassificationCost,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            tasks_per_family: vec![1, 1, 1, 1],
            d_x: 16,
            d_q: 8,
            tools_per_task: 12,
            class_labels: 5,
            mcq_options: 4,
            findings: 5,
            locations: 3,
            p_max: 0.95,
            p_floor: None,
            beta: 4.0,
            support_prob: 0.8,
            coarsen_prob: 0.5,
            centroid_scale: 0.5,
            query_noise: 0.3,
            hint_accuracy: 0.85,
            hint_scale: 1.0,
            instruction_noise: 0.1,
            n_train: 5000,
            n_val: 500,
            n_test: 1000,
            ref_size: 16,
            classification_cost: ClassificationCost::ZeroOne,
        }
    }
}

impl WorldConfig {
    fn families(&self) -> Vec<TaskFamily> {
        TaskFamily::ALL
            .iter()
            .zip(&self.tasks_per_family)
            .flat_map(|(&f, &n)| std::iter::repeat(f).take(n))
            .collect()
    }

    fn space_size(&self, family: TaskFamily) -> usize {
        match family {
            TaskFamily::Classification => self.class_labels,
            TaskFamily::Grounding => 4,
            TaskFamily::ReportGeneration => self.findings,
            TaskFamily::MultipleChoice => self.mcq_options,
        }
    }

    fn floor(&self, family: TaskFamily) -> f64 {
        self.p_floor.unwrap_or(1.0 / self.space_size(family) as f64)
    }

    /// Width of the head's aligned-prediction slot and of the instruction hint.
    pub fn slot_width(&self) -> usize {
        self.families().into_iter().map(|f| self.space_size(f)).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let families = self.families();
        if self.tasks_per_family.len() != 4 || families.is_empty() {
            return fail("tasks_per_family needs 4 entries with at least one task".into());
        }
        if self.d_x == 0 || self.tools_per_task == 0 || self.ref_size == 0 || self.locations == 0 {
            return fail("dimensions and counts must be positive".into());
        }
        if self.class_labels < 2 || self.mcq_options < 2 || self.findings < 1 {
            return fail("label spaces need at least two labels".into());
        }
        if self.d_q <= self.slot_width() {
            return fail(format!("d_q {} must exceed the hint width {}", self.d_q, self.slot_width()));
        }
        for f in families {
            let floor = self.floor(f);
            if !(0.0 <= floor && floor < self.p_max && self.p_max <= 1.0) {
                return fail(format!("need 0 <= p_floor ({floor}) < p_max ({}) <= 1", self.p_max));
            }
        }
        if !(self.beta > 0.0) {
            return fail(format!("beta {} must be positive", self.beta));
        }
        for (name, p) in [
            ("support_prob", self.support_prob),
            ("coarsen_prob", self.coarsen_prob),
            ("hint_accuracy", self.hint_accuracy),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(self.query_noise >= 0.0 && self.instruction_noise >= 0.0 && self.centroid_scale >= 0.0) {
            return fail("noise scales must be non-negative".into());
        }
        Ok(())
    }
}

/// A tool together with the hidden parameters that drive its behavior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTool {
    pub tool: Tool,
    /// Task whose population the tool belongs to.
    pub home_task: TaskId,
    pub mu: Vec<f64>,
    pub beta: f64,
    pub p_max: f64,
    /// 0: identity label space, 1: coarsened classification labels.
    pub variant: usize,
    pub noise_stream: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledQuery {
    pub query: Query,
    pub gt: GroundTruth,
}

/// Dataset record: one labeled query per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub uid: u64,
    pub task: TaskId,
    pub family: TaskFamily,
    pub x: Vec<f64>,
    pub q: Vec<f64>,
    pub gt: GroundTruth,
}

impl From<&LabeledQuery> for QueryRecord {
    fn from(lq: &LabeledQuery) -> Self {
        QueryRecord {
            uid: lq.query.uid,
            task: lq.query.task,
            family: lq.gt.family(),
            x: lq.query.x.clone(),
            q: lq.query.q.clone(),
            gt: lq.gt.clone(),
        }
    }
}

impl QueryRecord {
    pub fn into_labeled(self) -> Result<LabeledQuery> {
        if self.gt.family() != self.family {
            return Err(Error::Contract(format!("record {} is tagged {} but carries {:?}", self.uid, self.family, self.gt)));
        }
        Ok(LabeledQuery { query: Query { uid: self.uid, task: self.task, x: self.x, q: self.q }, gt: self.gt })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Hidden generative parameters of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TaskModel {
    family: TaskFamily,
    centroids: Vec<Vec<f64>>,
    /// Grounding: box centre and size as functions of `x`.
    center_map: Vec<Vec<f64>>,
    size_map: Vec<Vec<f64>>,
    /// Report generation: per finding, one scoring row per location.
    location_maps: Vec<Vec<Vec<f64>>>,
    code: Vec<f64>,
    floor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimWorld {
    pub config: WorldConfig,
    pub seed: u64,
    pub registry: TaskRegistry,
    pub spaces: Vec<CanonicalLabelSpace>,
    models: Vec<TaskModel>,
    /// Indexed by tool id.
    pub tools: Vec<SimTool>,
    populations: Vec<Vec<ToolId>>,
    train: Vec<LabeledQuery>,
    val: Vec<LabeledQuery>,
    test: Vec<LabeledQuery>,
    /// `(κ, σ)` pairs mapping target IoU to box noise, sorted by κ.
    box_noise: Vec<(f64, f64)>,
    next_ref_uid: u64,
}

const REF_UID_BASE: u64 = 1 << 40;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn gaussian_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| scale * normal(rng)).collect()).collect()
}

/// Applies centre/size noise of scale `sigma` to a box, clamped to the unit square.
fn perturb_box(b: &BBox, sigma: f64, z: [f64; 4]) -> BBox {
    let (w, h) = (b.x2 - b.x1, b.y2 - b.y1);
    let cx = (b.x1 + b.x2) / 2.0 + sigma * w * z[0];
    let cy = (b.y1 + b.y2) / 2.0 + sigma * h * z[1];
    let w2 = w * (0.5 * sigma * z[2]).exp();
    let h2 = h * (0.5 * sigma * z[3]).exp();
    let c = |v: f64| v.clamp(0.0, 1.0);
    BBox::new(c(cx - w2 / 2.0), c(cy - h2 / 2.0), c(cx + w2 / 2.0), c(cy + h2 / 2.0))
}

impl TaskModel {
    fn generate(cfg: &WorldConfig, family: TaskFamily, rng: &mut ChaCha8Rng) -> Self {
        let modes = match family {
            TaskFamily::MultipleChoice => cfg.mcq_options,
            TaskFamily::ReportGeneration => cfg.findings,
            _ => cfg.class_labels,
        };
        let s = cfg.centroid_scale;
        let centroids = (0..modes).map(|_| (0..cfg.d_x).map(|_| rng.gen_range(-s..=s)).collect()).collect();
        let gain = 2.0 / (cfg.d_x as f64).sqrt();
        let (center_map, size_map) = if family == TaskFamily::Grounding {
            (gaussian_rows(rng, 2, cfg.d_x, gain), gaussian_rows(rng, 2, cfg.d_x, gain))
        } else {
            (Vec::new(), Vec::new())
        };
        let location_maps = if family == TaskFamily::ReportGeneration {
            (0..cfg.findings).map(|_| gaussian_rows(rng, cfg.locations, cfg.d_x, 1.0)).collect()
        } else {
            Vec::new()
        };
        let code = (0..cfg.d_q - cfg.slot_width()).map(|_| normal(rng)).collect();
        TaskModel { family, centroids, center_map, size_map, location_maps, code, floor: cfg.floor(family) }
    }

    fn sample_x(&self, cfg: &WorldConfig, mode: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.centroids[mode].iter().map(|c| c + cfg.query_noise * normal(rng)).collect()
    }

    fn box_for(&self, x: &[f64]) -> BBox {
        let cx = 0.5 + 0.3 * dot(&self.center_map[0], x).tanh();
        let cy = 0.5 + 0.3 * dot(&self.center_map[1], x).tanh();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let w = 0.1 + 0.2 * sig(dot(&self.size_map[0], x));
        let h = 0.1 + 0.2 * sig(dot(&self.size_map[1], x));
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    fn findings_for(&self, x: &[f64], k: usize) -> BTreeSet<FindingPair> {
        let mut order: Vec<usize> = (0..self.centroids.len()).collect();
        order.sort_by(|&a, &b| sq_dist(x, &self.centroids[a]).total_cmp(&sq_dist(x, &self.centroids[b])));
        order
            .into_iter()
            .take(k)
            .map(|f| {
                let scores: Vec<f64> = self.location_maps[f].iter().map(|row| dot(row, x)).collect();
                let loc = crate::domain::argmax_lowest(&scores);
                FindingPair { finding: f as u16, location: loc as u16 }
            })
            .collect()
    }

    /// Draws a label and features, plus a decoy answer for the instruction hint.
    fn sample_gt(&self, cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> (Vec<f64>, GroundTruth) {
        let mode = rng.gen_range(0..self.centroids.len());
        let x = self.sample_x(cfg, mode, rng);
        let gt = match self.family {
            TaskFamily::Classification => GroundTruth::Class(mode),
            TaskFamily::MultipleChoice => GroundTruth::Choice(mode),
            TaskFamily::Grounding => GroundTruth::Box(self.box_for(&x)),
            TaskFamily::ReportGeneration => {
                let k = rng.gen_range(1..=3usize).min(self.centroids.len());
                GroundTruth::Findings(self.findings_for(&x, k))
            }
        };
        (x, gt)
    }

    fn decoy(&self, cfg: &WorldConfig, gt: &GroundTruth, rng: &mut ChaCha8Rng) -> GroundTruth {
        match gt {
            GroundTruth::Class(y) | GroundTruth::Choice(y) => {
                let n = self.centroids.len();
                let other = (y + rng.gen_range(1..n)) % n;
                if matches!(gt, GroundTruth::Class(_)) {
                    GroundTruth::Class(other)
                } else {
                    GroundTruth::Choice(other)
                }
            }
            GroundTruth::Box(_) => {
                let mode = rng.gen_range(0..self.centroids.len());
                GroundTruth::Box(self.box_for(&self.sample_x(cfg, mode, rng)))
            }
            GroundTruth::Findings(set) => {
                let mut out = set.clone();
                for _ in 0..16 {
                    let k = rng.gen_range(1..=3usize).min(cfg.findings);
                    let mut fs: Vec<usize> = (0..cfg.findings).collect();
                    fs.shuffle(rng);
                    out = fs[..k]
                        .iter()
                        .map(|&f| FindingPair { finding: f as u16, location: rng.gen_range(0..cfg.locations) as u16 })
                        .collect();
                    if &out != set {
                        break;
                    }
                }
                GroundTruth::Findings(out)
            }
        }
    }
}

impl SimWorld {
    pub fn num_tasks(&self) -> usize {
        self.registry.len()
    }

    pub fn family(&self, task: TaskId) -> TaskFamily {
        self.models[task.0].family
    }

    pub fn space(&self, task: TaskId) -> &CanonicalLabelSpace {
        &self.spaces[task.0]
    }

    /// Tool population `P_t(E)` of a task.
    pub fn population(&self, task: TaskId) -> &[ToolId] {
        &self.populations[task.0]
    }

    pub fn tool(&self, id: ToolId) -> &SimTool {
        &self.tools[id.0]
    }

    pub fn split(&self, split: Split) -> &[LabeledQuery] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Selector dimensions matching this world's features and label spaces.
    pub fn selector_config(&self) -> SelectorConfig {
        SelectorConfig {
            d_x: self.config.d_x,
            d_q: self.config.d_q,
            ref_size: self.config.ref_size,
            slot_width: self.config.slot_width(),
            eta_dim: 2,
            label_rows: self.spaces.iter().map(CanonicalLabelSpace::size).collect(),
            ..SelectorConfig::default()
        }
    }

    /// Draws a labeled query for `task`; the instruction carries a hint that is
    /// correct with probability `hint_accuracy`.
    pub fn sample_query(&self, task: TaskId, uid: u64, rng: &mut ChaCha8Rng) -> Result<LabeledQuery> {
        let model = self.models.get(task.0).ok_or_else(|| Error::Contract(format!("no task {}", task.0)))?;
        let cfg = &self.config;
        let (x, gt) = model.sample_gt(cfg, rng);
        let hinted = if rng.gen::<f64>() < cfg.hint_accuracy { gt.clone() } else { model.decoy(cfg, &gt, rng) };
        let hint = target_encoding(&hinted, cfg.slot_width())?;
        let q = hint
            .iter()
            .map(|h| cfg.hint_scale * h)
            .chain(model.code.iter().copied())
            .map(|v| v + cfg.instruction_noise * normal(rng))
            .collect();
        Ok(LabeledQuery { query: Query { uid, task, x, q }, gt })
    }

    /// Competence `κ = p_floor + (p_max,E − p_floor)·exp(−β_E‖x−μ‖²/d_x)`.
    pub fn competence(&self, tool: &SimTool, task: TaskId, x: &[f64]) -> f64 {
        let floor = self.models[task.0].floor;
        floor + (tool.p_max - floor) * (-tool.beta * sq_dist(x, &tool.mu) / x.len() as f64).exp()
    }

    fn box_sigma(&self, kappa: f64) -> f64 {
        let t = &self.box_noise;
        if kappa <= t[0].0 {
            return t[0].1;
        }
        for w in t.windows(2) {
            let ((k0, s0), (k1, s1)) = (w[0], w[1]);
            if kappa <= k1 {
                return s0 + (s1 - s0) * (kappa - k0) / (k1 - k0);
            }
        }
        t[t.len() - 1].1
    }

    /// Raw tool output on a labeled query, drawing noise from `rng`.
    pub fn tool_predict(&self, tool: &SimTool, lq: &LabeledQuery, rng: &mut ChaCha8Rng) -> RawPrediction {
        let task = lq.query.task;
        if !tool.tool.supports(task) {
            return RawPrediction::Null;
        }
        let kappa = self.competence(tool, task, &lq.query.x);
        let cfg = &self.config;
        match &lq.gt {
            GroundTruth::Class(y) | GroundTruth::Choice(y) => {
                let rho = tool.tool.alignments.get(&task).cloned().unwrap_or_else(|| LabelAlignment::identity(self.space(task).size()));
                let n = rho.tool_labels();
                let correct = rho.0.iter().position(|t| t.contains(y)).unwrap_or(0);
                let chosen = if n == 1 || rng.gen::<f64>() < kappa {
                    correct
                } else {
                    (correct + rng.gen_range(1..n)) % n
                };
                if n == 1 {
                    return RawPrediction::Scores(vec![1.0]);
                }
                let rest = 0.1 / (n - 1) as f64;
                RawPrediction::Scores((0..n).map(|i| if i == chosen { 0.9 } else { rest }).collect())
            }
            GroundTruth::Box(b) => {
                let z = [normal(rng), normal(rng), normal(rng), normal(rng)];
                RawPrediction::Box(perturb_box(b, self.box_sigma(kappa), z))
            }
            GroundTruth::Findings(set) => {
                let mut out: BTreeSet<FindingPair> = set.iter().copied().filter(|_| rng.gen::<f64>() < kappa).collect();
                if rng.gen::<f64>() < 1.0 - kappa && set.len() < cfg.findings * cfg.locations {
                    loop {
                        let p = FindingPair {
                            finding: rng.gen_range(0..cfg.findings) as u16,
                            location: rng.gen_range(0..cfg.locations) as u16,
                        };
                        if !set.contains(&p) {
                            out.insert(p);
                            break;
                        }
                    }
                }
                RawPrediction::Findings(out)
            }
        }
    }

    /// The frozen output of tool `id` on `lq`: the same query uid always gets the same answer.
    pub fn predict_raw(&self, id: ToolId, lq: &LabeledQuery) -> RawPrediction {
        let tool = self.tool(id);
        let mut rng = stream(tool.noise_stream, lq.query.uid);
        self.tool_predict(tool, lq, &mut rng)
    }

    pub fn predict(&self, id: ToolId, lq: &LabeledQuery) -> Result<AlignedPrediction> {
        let task = lq.query.task;
        align(&self.tool(id).tool, task, self.space(task), &self.predict_raw(id, lq))
    }

    /// Aligned prediction and its cost, or `None` when the tool does not support the task.
    pub fn outcome(&self, id: ToolId, lq: &LabeledQuery) -> Result<Option<(AlignedPrediction, f64)>> {
        if !self.tool(id).tool.supports(lq.query.task) {
            return Ok(None);
        }
        let pred = self.predict(id, lq)?;
        let c = cost(self.family(lq.query.task), &pred, &lq.gt, self.config.classification_cost)?;
        Ok(Some((pred, c.value())))
    }

    pub fn cost(&self, id: ToolId, lq: &LabeledQuery) -> Result<Option<f64>> {
        Ok(self.outcome(id, lq)?.map(|(_, c)| c))
    }

    fn new_tool(&self, home: TaskId, id: usize, rng: &mut ChaCha8Rng) -> SimTool {
        let cfg = &self.config;
        let n_tasks = self.num_tasks();
        let mu: Vec<f64> = (0..cfg.d_x).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let beta = cfg.beta * rng.gen_range(0.5..1.5);
        let size_proxy: f64 = rng.gen();
        let top_floor = self.models.iter().map(|m| m.floor).fold(0.0, f64::max);
        let p_max = cfg.p_max - (cfg.p_max - top_floor) * 0.4 * (1.0 - size_proxy);
        let mut supported: BTreeSet<TaskId> =
            (0..n_tasks).filter(|_| rng.gen::<f64>() < cfg.support_prob).map(TaskId).collect();
        if supported.is_empty() {
            supported.insert(TaskId(rng.gen_range(0..n_tasks)));
        }
        let variant = usize::from(rng.gen::<f64>() < cfg.coarsen_prob);
        let mut alignments = BTreeMap::new();
        for &t in &supported {
            let n = self.space(t).size();
            let family = self.family(t);
            let rho = if family == TaskFamily::Classification && variant == 1 && n >= 3 {
                let a = rng.gen_range(0..n - 1);
                let b = rng.gen_range(a + 1..n);
                LabelAlignment((0..n).filter(|&c| c != b).map(|c| if c == a { vec![a, b] } else { vec![c] }).collect())
            } else if family.is_categorical() {
                LabelAlignment::identity(n)
            } else {
                continue;
            };
            alignments.insert(t, rho);
        }
        let eta = vec![supported.len() as f64 / n_tasks as f64, size_proxy];
        SimTool {
            tool: Tool { id: ToolId(id), supported_tasks: supported, alignments, eta, reference_sets: BTreeMap::new() },
            home_task: home,
            mu,
            beta,
            p_max,
            variant,
            noise_stream: rng.gen(),
        }
    }

    fn fill_reference_sets(&mut self, ids: &[ToolId], b: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        for &id in ids {
            let tasks: Vec<TaskId> = self.tool(id).tool.supported_tasks.iter().copied().collect();
            for task in tasks {
                let mut set = Vec::with_capacity(b);
                for _ in 0..b {
                    let uid = self.next_ref_uid;
                    self.next_ref_uid += 1;
                    let lq = self.sample_query(task, uid, rng)?;
                    let m = self.predict(id, &lq)?;
                    set.push(ReferenceElement { uid, x: lq.query.x, y: lq.gt, m });
                }
                self.tools[id.0].tool.reference_sets.insert(task, ReferenceSet(set));
            }
        }
        Ok(())
    }

    /// Records a fresh reference set of `b` elements for every (tool, supported task).
    /// Reference queries come from a uid range disjoint from every split.
    pub fn build_reference_sets(&mut self, b: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        if b == 0 {
            return Err(Error::Config("reference-set size must be at least 1".into()));
        }
        let ids: Vec<ToolId> = (0..self.tools.len()).map(ToolId).collect();
        self.fill_reference_sets(&ids, b, rng)
    }

    /// A copy of this world in which `fraction` of every task population is
    /// replaced by newly drawn tools with their own reference sets.
    pub fn with_fresh_tools(&self, fraction: f64, seed: u64) -> Result<SimWorld> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!("fresh-tool fraction {fraction} outside [0, 1]")));
        }
        let mut w = self.clone();
        let mut rng = stream(self.seed ^ seed.rotate_left(17), 11);
        let mut fresh = Vec::new();
        for t in 0..w.num_tasks() {
            let n = (fraction * w.populations[t].len() as f64).round() as usize;
            let mut slots: Vec<usize> = (0..w.populations[t].len()).collect();
            slots.shuffle(&mut rng);
            for &slot in &slots[..n] {
                let id = w.tools.len();
                let tool = w.new_tool(TaskId(t), id, &mut rng);
                w.tools.push(tool);
                w.populations[t][slot] = ToolId(id);
                fresh.push(ToolId(id));
            }
        }
        w.fill_reference_sets(&fresh, self.config.ref_size, &mut rng)?;
        Ok(w)
    }

    /// Hex SHA-256 over the canonical serialization of the whole world.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("world serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn export_dataset(&self, split: Split, path: &Path) -> Result<()> {
        write_atomic(path, &to_ndjson(self.split(split).iter().map(QueryRecord::from))?)
    }

    pub fn export_tools(&self, path: &Path) -> Result<()> {
        write_atomic(path, &to_ndjson(&self.tools)?)
    }
}

pub fn import_dataset(path: &Path) -> Result<Vec<LabeledQuery>> {
    let recs: Vec<QueryRecord> = from_ndjson(std::fs::File::open(path)?)?;
    recs.into_iter().map(QueryRecord::into_labeled).collect()
}

pub fn import_tools(path: &Path) -> Result<Vec<SimTool>> {
    from_ndjson(std::fs::File::open(path)?)
}

/// Target IoU → box noise scale, by bisection on a fixed probe sample.
fn calibrate_box_noise(model: &TaskModel, cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let probes: Vec<(BBox, [f64; 4])> = (0..4000)
        .map(|_| {
            let (_, gt) = model.sample_gt(cfg, rng);
            let GroundTruth::Box(b) = gt else { unreachable!("grounding model yields boxes") };
            (b, [normal(rng), normal(rng), normal(rng), normal(rng)])
        })
        .collect();
    let mean_iou = |sigma: f64| probes.iter().map(|(b, z)| b.iou(&perturb_box(b, sigma, *z))).sum::<f64>() / probes.len() as f64;
    (0..=20)
        .map(|k| {
            let target = k as f64 / 20.0;
            let (mut lo, mut hi) = (0.0, 20.0);
            for _ in 0..50 {
                let mid = 0.5 * (lo + hi);
                if mean_iou(mid) > target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            (target, 0.5 * (lo + hi))
        })
        .collect()
}

fn sample_split(w: &SimWorld, n: usize, uid0: u64, rng: &mut ChaCha8Rng) -> Result<Vec<LabeledQuery>> {
    (0..n)
        .map(|i| {
            let task = TaskId(rng.gen_range(0..w.num_tasks()));
            w.sample_query(task, uid0 + i as u64, rng)
        })
        .collect()
}

/// Builds label spaces, task models, tool populations, data splits and reference sets.
pub fn generate_world(cfg: &WorldConfig, seed: u64) -> Result<SimWorld> {
    cfg.validate()?;
    let families = cfg.families();
    let mut spaces = Vec::with_capacity(families.len());
    for (t, &f) in families.iter().enumerate() {
        let domain = match f {
            TaskFamily::Classification => OutputDomain::Labels((0..cfg.class_labels).map(|i| format!("class{i}")).collect()),
            TaskFamily::MultipleChoice => {
                OutputDomain::Labels((0..cfg.mcq_options).map(|i| char::from(b'A' + (i % 26) as u8).to_string()).collect())
            }
            TaskFamily::Grounding => OutputDomain::Box,
            TaskFamily::ReportGeneration => OutputDomain::FindingPairs {
                findings: (0..cfg.findings).map(|i| format!("finding{i}")).collect(),
                locations: (0..cfg.locations).map(|i| format!("loc{i}")).collect(),
            },
        };
        spaces.push(CanonicalLabelSpace::new(TaskId(t), f, domain)?);
    }
    let mut task_rng = stream(seed, 0);
    let models: Vec<TaskModel> = families.iter().map(|&f| TaskModel::generate(cfg, f, &mut task_rng)).collect();
    let mut cal_rng = stream(seed, 6);
    let box_noise = models
        .iter()
        .find(|m| m.family == TaskFamily::Grounding)
        .map(|m| calibrate_box_noise(m, cfg, &mut cal_rng))
        .unwrap_or_else(|| vec![(0.0, 0.0), (1.0, 0.0)]);

    let mut world = SimWorld {
        config: cfg.clone(),
        seed,
        registry: TaskRegistry::new(families.clone()),
        spaces,
        models,
        tools: Vec::new(),
        populations: vec![Vec::new(); families.len()],
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        box_noise,
        next_ref_uid: REF_UID_BASE,
    };

    let mut tool_rng = stream(seed, 1);
    for t in 0..families.len() {
        for _ in 0..cfg.tools_per_task {
            let id = world.tools.len();
            let tool = world.new_tool(TaskId(t), id, &mut tool_rng);
            world.tools.push(tool);
            world.populations[t].push(ToolId(id));
        }
    }

    world.train = sample_split(&world, cfg.n_train, 0, &mut stream(seed, 2))?;
    world.val = sample_split(&world, cfg.n_val, cfg.n_train as u64, &mut stream(seed, 3))?;
    world.test = sample_split(&world, cfg.n_test, (cfg.n_train + cfg.n_val) as u64, &mut stream(seed, 4))?;
    world.build_reference_sets(cfg.ref_size, &mut stream(seed, 5))?;
    Ok(world)
}
