//! Preference-anchored rationale generation and SFT dataset assembly.
//!
//! Stages, each reading and writing line-delimited JSON:
//!
//! 1. `rationalize`: the teacher explains a known preference (anchored prompt).
//! 2. `filter`: the teacher re-reads only the rationale, without the label, and
//!    must recover the preference; everything else is dropped.
//! 3. `project`: each retained pair becomes two single-image assessments,
//!    using the pairwise rationale as a reference comment.
//! 4. `emit-sft`: label-free training records for both formats.
//!
//! Per-item failures never abort a batch; they are returned as
//! [`FailureRecord`]s.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::future::Future;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use tokio::task::JoinSet;

use crate::gateway::{ChatMessage, Gateway, ImageRef};
use crate::prompts::{PromptError, PromptForge, PromptRequest, TaskKind, IMAGE_LABEL_A, IMAGE_LABEL_B};
use crate::rationale::{
    emit_pairwise, emit_pointwise, parse_consistency_answer, parse_pairwise, parse_pointwise, ConsistencyAnswer,
    PairwiseRationale, PointwiseAssessment, Winner,
};
use crate::reward::DimensionScores;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("line {line}: {reason}")]
    Input { line: usize, reason: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid pipeline config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Name of the `[endpoint.*]` section acting as teacher.
    pub teacher: String,
    /// Anchored rationales drawn per comparison.
    pub samples_per_pair: usize,
    pub rationale_temperature: f64,
    pub consistency_temperature: f64,
    pub projection_temperature: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            teacher: "teacher".into(),
            samples_per_pair: 1,
            rationale_temperature: 0.7,
            consistency_temperature: 0.0,
            projection_temperature: 0.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.samples_per_pair == 0 {
            return Err(PipelineError::Config("pipeline.samples_per_pair must be >= 1".into()));
        }
        for (name, t) in [
            ("rationale_temperature", self.rationale_temperature),
            ("consistency_temperature", self.consistency_temperature),
            ("projection_temperature", self.projection_temperature),
        ] {
            if !(0.0..=2.0).contains(&t) {
                return Err(PipelineError::Config(format!("pipeline.{name} must be in [0, 2], got {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTuple {
    pub id: String,
    pub kind: TaskKind,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<ImageRef>,
    pub image_a: ImageRef,
    pub image_b: ImageRef,
}

impl ComparisonTuple {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("id is empty".into());
        }
        if self.instruction.trim().is_empty() {
            return Err("instruction is empty".into());
        }
        match (self.kind, &self.source) {
            (TaskKind::ImageEditing, None) => return Err("image editing requires a source image".into()),
            (TaskKind::TextToImage, Some(_)) => return Err("text-to-image takes no source image".into()),
            _ => {}
        }
        if self.image_a == self.image_b {
            return Err("image_a and image_b are the same image".into());
        }
        Ok(())
    }

    fn request(&self) -> PromptRequest {
        PromptRequest::new(self.kind, self.instruction.clone())
    }

    /// Source (when present) followed by both candidates.
    pub fn pair_images(&self) -> Vec<ImageRef> {
        self.source
            .iter()
            .chain([&self.image_a, &self.image_b])
            .cloned()
            .collect()
    }

    /// Source (when present) followed by the candidate named by `label`.
    pub fn single_images(&self, image_label: &str) -> Vec<ImageRef> {
        let img = if image_label == IMAGE_LABEL_A { &self.image_a } else { &self.image_b };
        self.source.iter().chain([img]).cloned().collect()
    }
}

/// One line of the pipeline input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputRecord {
    pub id: String,
    /// Inferred from the presence of `source` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<TaskKind>,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<ImageRef>,
    pub image_a: ImageRef,
    pub image_b: ImageRef,
    pub label: Winner,
}

impl InputRecord {
    pub fn tuple(&self) -> ComparisonTuple {
        ComparisonTuple {
            id: self.id.clone(),
            kind: self.kind.unwrap_or(if self.source.is_some() {
                TaskKind::ImageEditing
            } else {
                TaskKind::TextToImage
            }),
            instruction: self.instruction.clone(),
            source: self.source.clone(),
            image_a: self.image_a.clone(),
            image_b: self.image_b.clone(),
        }
    }
}

/// Parses line-delimited JSON, skipping blank lines. Line numbers are 1-based.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line).map_err(|e| PipelineError::Input {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Parses and validates pipeline input; ids must be unique.
pub fn parse_inputs(text: &str) -> Result<Vec<InputRecord>, PipelineError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| PipelineError::Input { line: i + 1, reason };
        let rec: InputRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        rec.tuple().validate().map_err(err)?;
        if !seen.insert(rec.id.clone()) {
            return Err(err(format!("duplicate id {:?}", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("record serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Rationalize,
    Filter,
    Project,
    EmitSft,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FailureRecord {
    pub id: String,
    pub phase: Phase,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Consistency {
    /// Rationale parsed, not yet checked.
    Pending,
    Passed,
    Failed {
        predicted: Option<ConsistencyAnswer>,
        reason: String,
    },
    /// The anchored reply could not be obtained or parsed.
    Malformed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationalizedSample {
    pub tuple: ComparisonTuple,
    pub sample_index: usize,
    pub label: Winner,
    pub rationale: Option<PairwiseRationale>,
    pub consistency: Consistency,
}

impl RationalizedSample {
    fn key(&self) -> (String, usize) {
        (self.tuple.id.clone(), self.sample_index)
    }

    pub fn is_retained(&self) -> bool {
        matches!(self.consistency, Consistency::Passed) && self.rationale.is_some()
    }

    fn failure_id(&self) -> String {
        if self.sample_index == 0 {
            self.tuple.id.clone()
        } else {
            format!("{}#{}", self.tuple.id, self.sample_index)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub generated: usize,
    pub malformed: usize,
    pub passed: usize,
    pub failed: usize,
    pub retention: f64,
}

impl PipelineStats {
    pub fn from_samples(samples: &[RationalizedSample]) -> Self {
        let mut s = PipelineStats::default();
        for x in samples {
            s.generated += 1;
            match x.consistency {
                Consistency::Malformed { .. } => s.malformed += 1,
                Consistency::Passed => s.passed += 1,
                Consistency::Failed { .. } | Consistency::Pending => s.failed += 1,
            }
        }
        s.retention = if s.generated == 0 {
            0.0
        } else {
            s.passed as f64 / s.generated as f64
        };
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub id: String,
    pub sample_index: usize,
    pub image_label: String,
    pub assessment: PointwiseAssessment,
}

#[derive(Debug, Clone)]
pub struct StageOutput<T> {
    pub items: Vec<T>,
    pub failures: Vec<FailureRecord>,
}

impl<T> Default for StageOutput<T> {
    fn default() -> Self {
        StageOutput {
            items: Vec::new(),
            failures: Vec::new(),
        }
    }
}

/// Planned teacher calls for each stage, for dry runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CallPlan {
    pub calls: usize,
    pub skipped: usize,
}

pub fn plan_rationalize(inputs: &[InputRecord], cfg: &PipelineConfig) -> CallPlan {
    let ties = inputs.iter().filter(|r| r.label == Winner::Tie).count();
    CallPlan {
        calls: (inputs.len() - ties) * cfg.samples_per_pair,
        skipped: ties,
    }
}

pub fn plan_filter(samples: &[RationalizedSample]) -> CallPlan {
    let n = samples.iter().filter(|s| s.rationale.is_some()).count();
    CallPlan {
        calls: n,
        skipped: samples.len() - n,
    }
}

pub fn plan_project(samples: &[RationalizedSample]) -> CallPlan {
    let n = samples.iter().filter(|s| s.is_retained()).count();
    CallPlan {
        calls: 2 * n,
        skipped: samples.len() - n,
    }
}

/// Runs every future concurrently (the gateway enforces the in-flight cap)
/// and returns results in input order.
async fn fan_out<R, Fut>(futures: Vec<Fut>) -> Vec<R>
where
    R: Send + 'static,
    Fut: Future<Output = R> + Send + 'static,
{
    let mut set = JoinSet::new();
    for (i, f) in futures.into_iter().enumerate() {
        set.spawn(async move { (i, f.await) });
    }
    let mut out = Vec::with_capacity(set.len());
    while let Some(joined) = set.join_next().await {
        match joined {
            Ok(r) => out.push(r),
            Err(e) => std::panic::resume_unwind(e.into_panic()),
        }
    }
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, r)| r).collect()
}

#[derive(Clone)]
pub struct Pipeline {
    teacher: Gateway,
    forge: Arc<PromptForge>,
    cfg: PipelineConfig,
}

impl Pipeline {
    pub fn new(teacher: Gateway, forge: PromptForge, cfg: PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Pipeline {
            teacher,
            forge: Arc::new(forge),
            cfg,
        })
    }

    pub async fn rationalize(&self, inputs: &[InputRecord]) -> StageOutput<RationalizedSample> {
        let mut failures = Vec::new();
        let mut jobs = Vec::new();
        for rec in inputs {
            if rec.label == Winner::Tie {
                failures.push(FailureRecord {
                    id: rec.id.clone(),
                    phase: Phase::Rationalize,
                    reason: "tie label excluded from anchoring".into(),
                });
                continue;
            }
            for sample_index in 0..self.cfg.samples_per_pair {
                let (gw, forge, temp) = (self.teacher.clone(), self.forge.clone(), self.cfg.rationale_temperature);
                let tuple = rec.tuple();
                let label = rec.label;
                jobs.push(async move {
                    let outcome = async {
                        let prompt = forge
                            .build_pairwise_prompt(&tuple.request().with_label(label))
                            .map_err(|e| format!("prompt: {e}"))?;
                        let msg = ChatMessage::user_with_images(&tuple.pair_images(), prompt);
                        let reply = gw.complete_at(&[msg], temp).await.map_err(|e| format!("gateway: {e}"))?;
                        parse_pairwise(&reply.text).map_err(|e| format!("parse: {e}"))
                    }
                    .await;
                    let (rationale, consistency) = match outcome {
                        Ok(r) => (Some(r), Consistency::Pending),
                        Err(reason) => (None, Consistency::Malformed { reason }),
                    };
                    RationalizedSample {
                        tuple,
                        sample_index,
                        label,
                        rationale,
                        consistency,
                    }
                });
            }
        }
        let mut items = fan_out(jobs).await;
        items.sort_by_key(RationalizedSample::key);
        for s in &items {
            if let Consistency::Malformed { reason } = &s.consistency {
                failures.push(FailureRecord {
                    id: s.failure_id(),
                    phase: Phase::Rationalize,
                    reason: reason.clone(),
                });
            }
        }
        failures.sort();
        StageOutput { items, failures }
    }

    /// Sets the consistency outcome of every sample that has a rationale.
    pub async fn filter(&self, samples: Vec<RationalizedSample>) -> (StageOutput<RationalizedSample>, PipelineStats) {
        let jobs: Vec<_> = samples
            .into_iter()
            .map(|mut s| {
                let (gw, forge, temp) = (self.teacher.clone(), self.forge.clone(), self.cfg.consistency_temperature);
                async move {
                    let Some(rationale) = &s.rationale else {
                        return s;
                    };
                    let outcome = async {
                        let req = s.tuple.request().with_rationale(emit_pairwise(rationale));
                        let prompt = forge.build_consistency_prompt(&req).map_err(|e| format!("prompt: {e}"))?;
                        let msg = ChatMessage::user_with_images(&s.tuple.pair_images(), prompt);
                        let reply = gw.complete_at(&[msg], temp).await.map_err(|e| format!("gateway: {e}"))?;
                        parse_consistency_answer(&reply.text).map_err(|e| format!("answer: {e}"))
                    }
                    .await;
                    s.consistency = match outcome {
                        Ok(ans) if ans.winner() == s.label => Consistency::Passed,
                        Ok(ans) => Consistency::Failed {
                            predicted: Some(ans),
                            reason: format!("predicted {:?}, label {}", ans.as_str(), s.label),
                        },
                        Err(reason) => Consistency::Failed { predicted: None, reason },
                    };
                    s
                }
            })
            .collect();
        let mut items = fan_out(jobs).await;
        items.sort_by_key(RationalizedSample::key);
        let stats = PipelineStats::from_samples(&items);
        let mut failures: Vec<FailureRecord> = items
            .iter()
            .filter_map(|s| match &s.consistency {
                Consistency::Failed { reason, .. } => Some(FailureRecord {
                    id: s.failure_id(),
                    phase: Phase::Filter,
                    reason: reason.clone(),
                }),
                _ => None,
            })
            .collect();
        failures.sort();
        tracing::info!(?stats, "consistency filter done");
        (StageOutput { items, failures }, stats)
    }

    /// Two single-image assessments per retained sample.
    pub async fn project(&self, samples: &[RationalizedSample]) -> StageOutput<Projection> {
        let mut jobs = Vec::new();
        for s in samples.iter().filter(|s| s.is_retained()) {
            for label in [IMAGE_LABEL_A, IMAGE_LABEL_B] {
                let (gw, forge, temp) = (self.teacher.clone(), self.forge.clone(), self.cfg.projection_temperature);
                let s = s.clone();
                jobs.push(async move {
                    let outcome = async {
                        let rationale = s.rationale.as_ref().expect("retained samples have rationales");
                        let req = s.tuple.request().with_reference(label, emit_pairwise(rationale));
                        let prompt = forge.build_pointwise_prompt(&req).map_err(|e| format!("prompt: {e}"))?;
                        let msg = ChatMessage::user_with_images(&s.tuple.single_images(label), prompt);
                        let reply = gw.complete_at(&[msg], temp).await.map_err(|e| format!("gateway: {e}"))?;
                        parse_pointwise(&reply.text).map_err(|e| format!("parse: {e}"))
                    }
                    .await;
                    match outcome {
                        Ok(assessment) => Ok(Projection {
                            id: s.tuple.id.clone(),
                            sample_index: s.sample_index,
                            image_label: label.to_string(),
                            assessment,
                        }),
                        Err(reason) => Err(FailureRecord {
                            id: s.failure_id(),
                            phase: Phase::Project,
                            reason: format!("{label}: {reason}"),
                        }),
                    }
                });
            }
        }
        let mut out = StageOutput::default();
        for r in fan_out(jobs).await {
            match r {
                Ok(p) => out.items.push(p),
                Err(f) => out.failures.push(f),
            }
        }
        out.items
            .sort_by(|a, b| (&a.id, a.sample_index, &a.image_label).cmp(&(&b.id, b.sample_index, &b.image_label)));
        out.failures.sort();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SftKind {
    Pairwise,
    Pointwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftMeta {
    pub id: String,
    pub sample_index: usize,
    pub images: Vec<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Winner>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<DimensionScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub kind: SftKind,
    pub prompt: String,
    pub target: String,
    pub meta: SftMeta,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SftDataset {
    pub pairwise: Vec<SftRecord>,
    pub pointwise: Vec<SftRecord>,
    pub failures: Vec<FailureRecord>,
}

/// Builds label-free training records. Pairwise prompts are the anchored
/// prompt minus its anchor line; pointwise prompts are the single-image
/// critique prompt without the refinement stanza.
pub fn build_sft(forge: &PromptForge, samples: &[RationalizedSample], projections: &[Projection]) -> Result<SftDataset, PipelineError> {
    let mut ds = SftDataset::default();
    let mut retained = BTreeMap::new();
    for s in samples {
        match &s.consistency {
            Consistency::Malformed { reason } => ds.failures.push(FailureRecord {
                id: s.failure_id(),
                phase: Phase::Rationalize,
                reason: reason.clone(),
            }),
            Consistency::Failed { reason, .. } => ds.failures.push(FailureRecord {
                id: s.failure_id(),
                phase: Phase::Filter,
                reason: reason.clone(),
            }),
            Consistency::Pending => ds.failures.push(FailureRecord {
                id: s.failure_id(),
                phase: Phase::Filter,
                reason: "consistency not checked".into(),
            }),
            Consistency::Passed => {
                let Some(r) = &s.rationale else { continue };
                retained.insert(s.key(), s);
                ds.pairwise.push(SftRecord {
                    kind: SftKind::Pairwise,
                    prompt: forge.build_foresight_prompt(&s.tuple.request())?,
                    target: emit_pairwise(r),
                    meta: SftMeta {
                        id: s.tuple.id.clone(),
                        sample_index: s.sample_index,
                        images: s.tuple.pair_images(),
                        image_label: None,
                        label: Some(s.label),
                        scores: None,
                    },
                });
            }
        }
    }
    let mut covered = BTreeSet::new();
    for p in projections {
        let Some(s) = retained.get(&(p.id.clone(), p.sample_index)) else {
            ds.failures.push(FailureRecord {
                id: p.id.clone(),
                phase: Phase::EmitSft,
                reason: format!("{}: projection has no retained pairwise sample", p.image_label),
            });
            continue;
        };
        if !covered.insert((p.id.clone(), p.sample_index, p.image_label.clone())) {
            continue;
        }
        let mut a = p.assessment.clone();
        a.refinement = None;
        ds.pointwise.push(SftRecord {
            kind: SftKind::Pointwise,
            prompt: forge.build_pointwise_student_prompt(&s.tuple.request())?,
            target: emit_pointwise(&a),
            meta: SftMeta {
                id: p.id.clone(),
                sample_index: p.sample_index,
                images: s.tuple.single_images(&p.image_label),
                image_label: Some(p.image_label.clone()),
                label: None,
                scores: Some(DimensionScores::from_assessment(&a, s.tuple.kind)),
            },
        });
    }
    for ((id, idx), s) in &retained {
        for label in [IMAGE_LABEL_A, IMAGE_LABEL_B] {
            if !covered.contains(&(id.clone(), *idx, label.to_string())) {
                ds.failures.push(FailureRecord {
                    id: s.failure_id(),
                    phase: Phase::Project,
                    reason: format!("{label}: no pointwise projection"),
                });
            }
        }
    }
    let key = |r: &SftRecord| (r.meta.id.clone(), r.meta.sample_index, r.meta.image_label.clone());
    ds.pairwise.sort_by_key(key);
    ds.pointwise.sort_by_key(key);
    ds.failures.sort();
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SftPaths {
    pub pairwise: PathBuf,
    pub pointwise: PathBuf,
    pub failures: PathBuf,
}

impl SftPaths {
    pub fn in_dir(dir: &Path) -> Self {
        SftPaths {
            pairwise: dir.join("pairwise.jsonl"),
            pointwise: dir.join("pointwise.jsonl"),
            failures: dir.join("failures.jsonl"),
        }
    }
}

/// Writes all three files or none: contents go to temporary files beside
/// the targets, which are renamed into place only once all are written.
pub fn write_files(files: &[(&Path, String)]) -> Result<(), PipelineError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PipelineError::Io { path, source }
    };
    let mut staged = Vec::new();
    for (path, content) in files {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io(path))?;
        tmp.write_all(content.as_bytes()).map_err(io(path))?;
        tmp.flush().map_err(io(path))?;
        staged.push((tmp, *path));
    }
    let mut done: Vec<&Path> = Vec::new();
    for (tmp, path) in staged {
        if let Err(e) = tmp.persist(path) {
            for p in done {
                let _ = std::fs::remove_file(p);
            }
            return Err(PipelineError::Io {
                path: path.to_path_buf(),
                source: e.error,
            });
        }
        done.push(path);
    }
    Ok(())
}

pub fn write_sft(paths: &SftPaths, ds: &SftDataset) -> Result<(), PipelineError> {
    write_files(&[
        (&paths.pairwise, to_jsonl(&ds.pairwise)),
        (&paths.pointwise, to_jsonl(&ds.pointwise)),
        (&paths.failures, to_jsonl(&ds.failures)),
    ])
}
