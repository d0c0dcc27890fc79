//! Routing vocabulary: tasks, queries, tools, panels, label alignment and costs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Classification,
    Grounding,
    ReportGeneration,
    MultipleChoice,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 4] = [
        TaskFamily::Classification,
        TaskFamily::Grounding,
        TaskFamily::ReportGeneration,
        TaskFamily::MultipleChoice,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            TaskFamily::Classification => "classification",
            TaskFamily::Grounding => "grounding",
            TaskFamily::ReportGeneration => "report_generation",
            TaskFamily::MultipleChoice => "multiple_choice",
        }
    }

    /// Whether outputs are distributions over a finite label set.
    pub fn is_categorical(self) -> bool {
        matches!(self, TaskFamily::Classification | TaskFamily::MultipleChoice)
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskFamily::ALL
            .into_iter()
            .find(|f| f.tag() == s)
            .ok_or_else(|| Error::UnknownTask(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ToolId(pub usize);

impl fmt::Display for ToolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tool-{}", self.0)
    }
}

/// Output domain of a task's canonical space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputDomain {
    Labels(Vec<String>),
    /// Normalized `(x1, y1, x2, y2)` boxes.
    Box,
    FindingPairs { findings: Vec<String>, locations: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanonicalLabelSpace {
    pub task: TaskId,
    pub family: TaskFamily,
    pub domain: OutputDomain,
}

impl CanonicalLabelSpace {
    pub fn new(task: TaskId, family: TaskFamily, domain: OutputDomain) -> Result<Self> {
        let ok = match (&domain, family) {
            (OutputDomain::Labels(l), f) if f.is_categorical() => {
                !l.is_empty() && l.iter().collect::<BTreeSet<_>>().len() == l.len()
            }
            (OutputDomain::Box, TaskFamily::Grounding) => true,
            (OutputDomain::FindingPairs { findings, locations }, TaskFamily::ReportGeneration) => {
                !findings.is_empty() && !locations.is_empty()
            }
            _ => false,
        };
        if !ok {
            return Err(Error::Contract(format!("invalid canonical space for {family}")));
        }
        Ok(CanonicalLabelSpace { task, family, domain })
    }

    /// Number of canonical labels (categorical) or the natural encoding width otherwise.
    pub fn size(&self) -> usize {
        match &self.domain {
            OutputDomain::Labels(l) => l.len(),
            OutputDomain::Box => 4,
            OutputDomain::FindingPairs { findings, .. } => findings.len(),
        }
    }
}

/// Structured prompt metadata handed to the task selector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptDescriptor {
    pub family: String,
    pub task_index: usize,
}

/// Deterministic prompt → task map over a fixed task list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRegistry {
    families: Vec<TaskFamily>,
}

impl TaskRegistry {
    pub fn new(families: Vec<TaskFamily>) -> Self {
        TaskRegistry { families }
    }

    pub fn len(&self) -> usize {
        self.families.len()
    }

    pub fn is_empty(&self) -> bool {
        self.families.is_empty()
    }

    pub fn family(&self, task: TaskId) -> Option<TaskFamily> {
        self.families.get(task.0).copied()
    }

    pub fn tasks(&self) -> impl Iterator<Item = (TaskId, TaskFamily)> + '_ {
        self.families.iter().enumerate().map(|(i, &f)| (TaskId(i), f))
    }

    pub fn assign_task(&self, desc: &PromptDescriptor) -> Result<TaskId> {
        let family: TaskFamily = desc.family.parse()?;
        match self.families.get(desc.task_index) {
            Some(&f) if f == family => Ok(TaskId(desc.task_index)),
            _ => Err(Error::UnknownTask(format!("{}#{}", desc.family, desc.task_index))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub uid: u64,
    pub task: TaskId,
    /// Image features.
    pub x: Vec<f64>,
    /// Instruction features.
    pub q: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    /// Intersection over union; a zero-area box has IoU 0 with everything.
    pub fn iou(&self, other: &BBox) -> f64 {
        let (a, b) = (self.area(), other.area());
        if a <= 0.0 || b <= 0.0 {
            return 0.0;
        }
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = w * h;
        inter / (a + b - inter)
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FindingPair {
    pub finding: u16,
    pub location: u16,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruth {
    Class(usize),
    Box(BBox),
    Findings(BTreeSet<FindingPair>),
    Choice(usize),
}

impl GroundTruth {
    pub fn family(&self) -> TaskFamily {
        match self {
            GroundTruth::Class(_) => TaskFamily::Classification,
            GroundTruth::Box(_) => TaskFamily::Grounding,
            GroundTruth::Findings(_) => TaskFamily::ReportGeneration,
            GroundTruth::Choice(_) => TaskFamily::MultipleChoice,
        }
    }

    pub fn label(&self) -> Option<usize> {
        match self {
            GroundTruth::Class(c) | GroundTruth::Choice(c) => Some(*c),
            _ => None,
        }
    }
}

/// Maps every tool-space label to a non-empty set of canonical labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelAlignment(pub Vec<Vec<usize>>);

impl LabelAlignment {
    pub fn identity(n: usize) -> Self {
        LabelAlignment((0..n).map(|i| vec![i]).collect())
    }

    pub fn tool_labels(&self) -> usize {
        self.0.len()
    }

    pub fn is_bijective(&self, canonical: usize) -> bool {
        self.0.len() == canonical
            && self.0.iter().all(|t| t.len() == 1)
            && self.0.iter().map(|t| t[0]).collect::<BTreeSet<_>>().len() == canonical
    }
}

/// Aligned prediction recorded for one reference element.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceElement {
    pub uid: u64,
    pub x: Vec<f64>,
    pub y: GroundTruth,
    pub m: AlignedPrediction,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReferenceSet(pub Vec<ReferenceElement>);

impl ReferenceSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A frozen specialist as seen by the router.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tool {
    pub id: ToolId,
    pub supported_tasks: BTreeSet<TaskId>,
    /// Label alignment for each supported categorical task.
    pub alignments: BTreeMap<TaskId, LabelAlignment>,
    /// Metadata: declared support breadth, training-set size proxy.
    pub eta: Vec<f64>,
    pub reference_sets: BTreeMap<TaskId, ReferenceSet>,
}

impl Tool {
    pub fn supports(&self, task: TaskId) -> bool {
        self.supported_tasks.contains(&task)
    }
}

/// Task-conditional validity indicator.
pub fn validity(tool: &Tool, query: &Query) -> bool {
    tool.supports(query.task)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub task: TaskId,
    pub tools: Vec<ToolId>,
}

/// Output of a tool in its own label space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawPrediction {
    /// Abstention.
    Null,
    /// Probabilities over the tool's own labels.
    Scores(Vec<f64>),
    Box(BBox),
    Findings(BTreeSet<FindingPair>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignedPayload {
    Probs(Vec<f64>),
    Box(BBox),
    Findings(BTreeSet<FindingPair>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedPrediction {
    pub payload: AlignedPayload,
    pub is_null: bool,
}

impl AlignedPrediction {
    /// Uniform uninformative prediction over `n` canonical entries.
    pub fn null(n: usize) -> Self {
        AlignedPrediction { payload: AlignedPayload::Probs(vec![1.0 / n as f64; n]), is_null: true }
    }

    /// Argmax over categorical probabilities, ties to the lowest index.
    pub fn argmax(&self) -> Option<usize> {
        match &self.payload {
            AlignedPayload::Probs(p) => Some(argmax_lowest(p)),
            _ => None,
        }
    }
}

pub(crate) fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Maps a raw tool prediction into the task's canonical space.
///
/// Categorical scores are summed over pre-images and renormalized onto the simplex.
pub fn align(tool: &Tool, task: TaskId, space: &CanonicalLabelSpace, raw: &RawPrediction) -> Result<AlignedPrediction> {
    let n = space.size();
    if !tool.supports(task) {
        return Ok(AlignedPrediction::null(n));
    }
    let payload = match (raw, space.family) {
        (RawPrediction::Null, _) => return Ok(AlignedPrediction::null(n)),
        (RawPrediction::Scores(p), fam) if fam.is_categorical() => {
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::InvalidPrediction(format!("tool probabilities sum to {sum}")));
            }
            let identity;
            let rho = match tool.alignments.get(&task) {
                Some(r) => r,
                None => {
                    identity = LabelAlignment::identity(p.len());
                    &identity
                }
            };
            if rho.tool_labels() != p.len() {
                return Err(Error::InvalidPrediction(format!(
                    "{} scores for {} tool labels",
                    p.len(),
                    rho.tool_labels()
                )));
            }
            let mut canon = vec![0.0; n];
            for (prob, targets) in p.iter().zip(&rho.0) {
                for &y in targets {
                    let slot = canon.get_mut(y).ok_or_else(|| {
                        Error::InvalidPrediction(format!("alignment target {y} outside {n} canonical labels"))
                    })?;
                    *slot += prob;
                }
            }
            let total: f64 = canon.iter().sum();
            if total <= 0.0 {
                return Ok(AlignedPrediction::null(n));
            }
            canon.iter_mut().for_each(|v| *v /= total);
            AlignedPayload::Probs(canon)
        }
        (RawPrediction::Box(b), TaskFamily::Grounding) => AlignedPayload::Box(*b),
        (RawPrediction::Findings(f), TaskFamily::ReportGeneration) => AlignedPayload::Findings(f.clone()),
        (raw, fam) => {
            return Err(Error::InvalidPrediction(format!("payload {raw:?} does not fit family {fam}")))
        }
    };
    Ok(AlignedPrediction { payload, is_null: false })
}

/// Bounded task cost in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Cost(f64);

impl Cost {
    pub fn new(v: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&v) {
            Ok(Cost(v))
        } else {
            Err(Error::Contract(format!("cost {v} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassificationCost {
    /// `1[argmax ≠ y]`
    #[default]
    ZeroOne,
    /// `min(1, −ln m̃[y])`
    ClippedCrossEntropy,
}

/// F1 between two finding-pair sets; two empty sets score 1.
pub fn findings_f1(pred: &BTreeSet<FindingPair>, gt: &BTreeSet<FindingPair>) -> f64 {
    if pred.is_empty() && gt.is_empty() {
        return 1.0;
    }
    let tp = pred.intersection(gt).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / pred.len() as f64;
    let recall = tp / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn cost(family: TaskFamily, pred: &AlignedPrediction, gt: &GroundTruth, variant: ClassificationCost) -> Result<Cost> {
    if pred.is_null {
        return Err(Error::Contract("cost requested for a null prediction".into()));
    }
    if gt.family() != family {
        return Err(Error::Contract(format!("ground truth {:?} does not match family {family}", gt.family())));
    }
    let v = match (&pred.payload, gt) {
        (AlignedPayload::Probs(p), GroundTruth::Class(y)) => match variant {
            ClassificationCost::ZeroOne => f64::from(argmax_lowest(p) != *y),
            ClassificationCost::ClippedCrossEntropy => {
                let py = p.get(*y).copied().unwrap_or(0.0);
                (-py.max(1e-300).ln()).clamp(0.0, 1.0)
            }
        },
        (AlignedPayload::Probs(p), GroundTruth::Choice(y)) => f64::from(argmax_lowest(p) != *y),
        (AlignedPayload::Box(b), GroundTruth::Box(g)) => 1.0 - b.iou(g),
        (AlignedPayload::Findings(f), GroundTruth::Findings(g)) => 1.0 - findings_f1(f, g),
        _ => return Err(Error::Contract(format!("prediction payload does not match {family}"))),
    };
    Cost::new(v.clamp(0.0, 1.0))
}
