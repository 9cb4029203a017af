//! Generate, critique, refine.
//!
//! Each round generates an image for the current request, has the judge
//! critique it against the user's original request, and decides whether to
//! accept it or regenerate from the judge's refined request. The image from
//! the last round is final; it is critiqued like every other.

use serde::{Deserialize, Serialize};
use std::time::Duration;

use crate::gateway::{ChatMessage, Gateway, GatewayError, GenerationRequest, ImageRef};
use crate::prompts::{PromptError, PromptForge, PromptRequest, TaskKind};
use crate::rationale::{parse_pointwise, GrammarError, PointwiseAssessment};

pub const DEFAULT_THRESHOLD: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcrConfig {
    /// Any applicable score strictly below this triggers refinement.
    pub threshold: f64,
    /// Refinement rounds allowed after the first generation.
    pub max_iterations: usize,
    /// Name of the `[endpoint.*]` section used for critique.
    pub judge: String,
    /// Name of the `[endpoint.*]` section used for image generation.
    pub generator: String,
}

impl Default for GcrConfig {
    fn default() -> Self {
        GcrConfig {
            threshold: DEFAULT_THRESHOLD,
            max_iterations: 1,
            judge: "judge".into(),
            generator: "generator".into(),
        }
    }
}

impl GcrConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.threshold > 1.0 && self.threshold < 4.0) {
            return Err(format!("gcr.threshold must be in (1, 4), got {}", self.threshold));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Refine,
}

/// Smallest applicable score, `None` when every aspect is N/A.
pub fn min_applicable(a: &PointwiseAssessment) -> Option<f64> {
    a.applicable_scores().map(|(_, v)| v).reduce(f64::min)
}

pub fn decide(a: &PointwiseAssessment, threshold: f64) -> Verdict {
    match min_applicable(a) {
        Some(m) if m < threshold => Verdict::Refine,
        _ => Verdict::Accept,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Refine { refined_request: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GcrWarning {
    /// Every aspect was N/A, so nothing could fall below the threshold.
    AllNotApplicable,
    /// Refinement was due but the critique carried no refined request.
    MissingRefinement,
    /// Refinement was due but no rounds were left.
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcrStep {
    pub iteration: usize,
    /// Request sent to the generator this round.
    pub request: String,
    pub image: ImageRef,
    pub critique: String,
    pub assessment: PointwiseAssessment,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<GcrWarning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcrTrace {
    pub initial_request: String,
    pub source: Option<ImageRef>,
    pub steps: Vec<GcrStep>,
    pub final_image: Option<ImageRef>,
    #[serde(skip)]
    pub latency: Duration,
}

impl GcrTrace {
    pub fn generator_calls(&self) -> usize {
        self.steps.len()
    }

    /// One JSON object per step, then a closing `{"final_image": ...}` line.
    /// Latency is left out so identical runs give identical bytes.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("step serializes"));
            out.push('\n');
        }
        out.push_str(&serde_json::json!({ "final_image": self.final_image }).to_string());
        out.push('\n');
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GcrError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("gateway error at step {step}: {source}")]
    Gateway {
        step: usize,
        #[source]
        source: GatewayError,
        partial: Box<GcrTrace>,
    },
    #[error("unparseable critique at step {step}: {source}")]
    Critique {
        step: usize,
        #[source]
        source: GrammarError,
        partial: Box<GcrTrace>,
    },
}

impl GcrError {
    pub fn partial_trace(&self) -> Option<&GcrTrace> {
        match self {
            GcrError::Gateway { partial, .. } | GcrError::Critique { partial, .. } => Some(partial),
            _ => None,
        }
    }
}

pub struct GcrEngine<'a> {
    pub judge: &'a Gateway,
    pub generator: &'a Gateway,
    pub forge: &'a PromptForge,
    pub config: &'a GcrConfig,
}

impl GcrEngine<'_> {
    /// Image editing when a source image is given, text-to-image otherwise.
    pub async fn run(&self, request: &str, source: Option<&ImageRef>, seed: u64) -> Result<GcrTrace, GcrError> {
        if request.trim().is_empty() {
            return Err(GcrError::InvalidRequest("request is empty".into()));
        }
        let kind = if source.is_some() {
            TaskKind::ImageEditing
        } else {
            TaskKind::TextToImage
        };
        let prompt = self.forge.build_gcr_prompt(&PromptRequest::new(kind, request))?;
        let started = std::time::Instant::now();
        let mut trace = GcrTrace {
            initial_request: request.to_string(),
            source: source.cloned(),
            steps: Vec::new(),
            final_image: None,
            latency: Duration::ZERO,
        };
        let mut current = request.to_string();
        for iteration in 0..=self.config.max_iterations {
            let generated = self
                .generator
                .generate_image(&GenerationRequest {
                    prompt: current.clone(),
                    source: source.cloned(),
                    seed: seed.wrapping_add(iteration as u64),
                })
                .await;
            let image = match generated {
                Ok(g) => g.image,
                Err(source) => return Err(self.fail_gateway(trace, iteration, source, started)),
            };
            trace.final_image = Some(image.clone());

            let images: Vec<&ImageRef> = source.into_iter().chain([&image]).collect();
            let critique = match self.judge.complete(&[ChatMessage::user_with_images(images, prompt.clone())]).await {
                Ok(c) => c.text,
                Err(source) => return Err(self.fail_gateway(trace, iteration, source, started)),
            };
            let assessment = match parse_pointwise(&critique) {
                Ok(a) => a,
                Err(source) => {
                    trace.latency = started.elapsed();
                    return Err(GcrError::Critique {
                        step: iteration,
                        source,
                        partial: Box::new(trace),
                    });
                }
            };

            let mut warnings = Vec::new();
            if min_applicable(&assessment).is_none() {
                tracing::warn!(iteration, "every aspect is N/A; accepting");
                warnings.push(GcrWarning::AllNotApplicable);
            }
            let refined = assessment
                .refinement
                .as_ref()
                .map(|r| r.refined_request.trim())
                .filter(|r| !r.is_empty())
                .map(str::to_string);
            let decision = match decide(&assessment, self.config.threshold) {
                Verdict::Accept => Decision::Accept,
                Verdict::Refine if iteration == self.config.max_iterations => {
                    warnings.push(GcrWarning::BudgetExhausted);
                    Decision::Accept
                }
                Verdict::Refine => match refined {
                    Some(r) => Decision::Refine { refined_request: r },
                    None => {
                        tracing::warn!(iteration, "refinement required but missing; accepting");
                        warnings.push(GcrWarning::MissingRefinement);
                        Decision::Accept
                    }
                },
            };
            let next = match &decision {
                Decision::Refine { refined_request } => Some(refined_request.clone()),
                Decision::Accept => None,
            };
            trace.steps.push(GcrStep {
                iteration,
                request: current.clone(),
                image,
                critique,
                assessment,
                decision,
                warnings,
            });
            match next {
                Some(r) => current = r,
                None => break,
            }
        }
        trace.latency = started.elapsed();
        Ok(trace)
    }

    fn fail_gateway(&self, mut trace: GcrTrace, step: usize, source: GatewayError, started: std::time::Instant) -> GcrError {
        trace.latency = started.elapsed();
        GcrError::Gateway {
            step,
            source,
            partial: Box::new(trace),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rationale::{Aspect, AspectAssessment, Score};

    fn assessment(scores: [Option<f64>; 4]) -> PointwiseAssessment {
        PointwiseAssessment {
            understanding: String::new(),
            per_aspect: Aspect::ALL.map(|aspect| AspectAssessment {
                aspect,
                score: scores[aspect as usize]
                    .map(|v| Score::numeric(v).unwrap())
                    .unwrap_or(Score::NotApplicable),
                justification: "j".into(),
            }),
            summary: "s".into(),
            refinement: None,
        }
    }

    #[test]
    fn decision_rule() {
        let t = DEFAULT_THRESHOLD;
        assert_eq!(decide(&assessment([Some(3.2), Some(3.5), Some(2.8), None]), t), Verdict::Refine);
        assert_eq!(decide(&assessment([Some(3.0), Some(3.0), Some(3.0), None]), t), Verdict::Accept);
        assert_eq!(decide(&assessment([None, None, Some(2.0), None]), t), Verdict::Refine);
        assert_eq!(decide(&assessment([None; 4]), t), Verdict::Accept);
        assert_eq!(decide(&assessment([Some(4.0); 4]), t), Verdict::Accept);
        assert_eq!(min_applicable(&assessment([None, Some(1.5), None, Some(3.5)])), Some(1.5));
    }

    #[test]
    fn threshold_range() {
        let mut c = GcrConfig::default();
        assert!(c.validate().is_ok());
        c.threshold = 4.0;
        assert!(c.validate().is_err());
        c.threshold = 1.0;
        assert!(c.validate().is_err());
    }
}
