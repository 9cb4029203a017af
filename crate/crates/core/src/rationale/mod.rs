//! Structured rationale formats: pairwise comparisons, pointwise assessments,
//! consistency answers and the critique-with-refinement block.
//!
//! Parsing is tolerant of header case and internal whitespace. Emission is
//! canonical: `parse(emit(x)) == x` for every value the parser can produce.

mod emit;
mod parse;
mod score;

use serde::{Deserialize, Serialize};
use std::fmt;

pub use emit::{emit_pairwise, emit_pointwise};
pub use parse::{parse_consistency_answer, parse_pairwise, parse_pointwise};
pub use score::{Score, ScoreValue};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrammarError {
    #[error("malformed rationale at byte {offset}: {reason}")]
    MalformedRationale { reason: String, offset: usize },
    #[error("score {text:?} for {aspect} at byte {offset} is outside [1, 4]")]
    ScoreOutOfRange {
        aspect: Aspect,
        text: String,
        offset: usize,
    },
    #[error("ambiguous consistency answer: {matches} allowed answers found")]
    AmbiguousAnswer { matches: usize },
}

impl GrammarError {
    pub(crate) fn malformed(reason: impl Into<String>, offset: usize) -> Self {
        GrammarError::MalformedRationale {
            reason: reason.into(),
            offset,
        }
    }
}

/// The four rubric dimensions, in template order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aspect {
    TextFaithfulness,
    ImageFaithfulness,
    PhysicalVisualQuality,
    TextRendering,
}

impl Aspect {
    pub const ALL: [Aspect; 4] = [
        Aspect::TextFaithfulness,
        Aspect::ImageFaithfulness,
        Aspect::PhysicalVisualQuality,
        Aspect::TextRendering,
    ];

    /// 1-based position used in the numbered template headers.
    pub fn number(self) -> usize {
        self as usize + 1
    }

    pub fn title(self) -> &'static str {
        match self {
            Aspect::TextFaithfulness => "Text Faithfulness",
            Aspect::ImageFaithfulness => "Image Faithfulness",
            Aspect::PhysicalVisualQuality => "Physical and Visual Quality",
            Aspect::TextRendering => "Text Rendering",
        }
    }

    /// Short key used in line-delimited score records.
    pub fn key(self) -> &'static str {
        match self {
            Aspect::TextFaithfulness => "tf",
            Aspect::ImageFaithfulness => "if",
            Aspect::PhysicalVisualQuality => "pq",
            Aspect::TextRendering => "tr",
        }
    }

    /// Image faithfulness has no meaning without a source image, and text
    /// rendering only applies when text was requested.
    pub fn allows_not_applicable(self) -> bool {
        matches!(self, Aspect::ImageFaithfulness | Aspect::TextRendering)
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.title())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Winner {
    A,
    B,
    Tie,
}

impl Winner {
    pub fn as_str(self) -> &'static str {
        match self {
            Winner::A => "A",
            Winner::B => "B",
            Winner::Tie => "Tie",
        }
    }
}

impl fmt::Display for Winner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectJudgement {
    pub aspect: Aspect,
    pub justification: String,
    pub score_a: Score,
    pub score_b: Score,
    pub winner: Winner,
}

impl AspectJudgement {
    /// Value recorded when the model omits the conditional text-rendering block.
    pub fn omitted(aspect: Aspect) -> Self {
        AspectJudgement {
            aspect,
            justification: String::new(),
            score_a: Score::NotApplicable,
            score_b: Score::NotApplicable,
            winner: Winner::Tie,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseRationale {
    pub understanding: String,
    pub judgements: [AspectJudgement; 4],
    pub summary: String,
}

impl PairwiseRationale {
    pub fn judgement(&self, aspect: Aspect) -> &AspectJudgement {
        &self.judgements[aspect as usize]
    }

    /// Winner implied by the mean of the applicable per-aspect scores.
    pub fn overall_winner(&self) -> Winner {
        let mut sum_a = 0.0;
        let mut sum_b = 0.0;
        for j in &self.judgements {
            if let (Some(a), Some(b)) = (j.score_a.as_f64(), j.score_b.as_f64()) {
                sum_a += a;
                sum_b += b;
            }
        }
        if sum_a > sum_b {
            Winner::A
        } else if sum_b > sum_a {
            Winner::B
        } else {
            Winner::Tie
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectAssessment {
    pub aspect: Aspect,
    pub score: Score,
    pub justification: String,
}

impl AspectAssessment {
    pub fn omitted(aspect: Aspect) -> Self {
        AspectAssessment {
            aspect,
            score: Score::NotApplicable,
            justification: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub comments: String,
    pub refined_request: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointwiseAssessment {
    pub understanding: String,
    pub per_aspect: [AspectAssessment; 4],
    pub summary: String,
    pub refinement: Option<Refinement>,
}

impl PointwiseAssessment {
    pub fn score(&self, aspect: Aspect) -> Score {
        self.per_aspect[aspect as usize].score
    }

    /// Numeric scores of the applicable aspects, in canonical order.
    pub fn applicable_scores(&self) -> impl Iterator<Item = (Aspect, f64)> + '_ {
        self.per_aspect
            .iter()
            .filter_map(|a| a.score.as_f64().map(|v| (a.aspect, v)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConsistencyAnswer {
    APreferred,
    BPreferred,
    Tie,
}

impl ConsistencyAnswer {
    pub const ALL: [ConsistencyAnswer; 3] = [
        ConsistencyAnswer::APreferred,
        ConsistencyAnswer::BPreferred,
        ConsistencyAnswer::Tie,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConsistencyAnswer::APreferred => "A is preferred",
            ConsistencyAnswer::BPreferred => "B is preferred",
            ConsistencyAnswer::Tie => "Tie",
        }
    }

    pub fn winner(self) -> Winner {
        match self {
            ConsistencyAnswer::APreferred => Winner::A,
            ConsistencyAnswer::BPreferred => Winner::B,
            ConsistencyAnswer::Tie => Winner::Tie,
        }
    }
}

impl fmt::Display for ConsistencyAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An aspect whose numeric scores strictly disagree with the declared winner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contradiction {
    pub aspect: Aspect,
    pub score_a: Score,
    pub score_b: Score,
    pub declared: Winner,
    pub implied: Winner,
}

/// Flags aspects where `score_a > score_b` but the winner is not A (or the
/// mirror case). Equal scores never contradict any declared winner.
pub fn lint_rationale(rationale: &PairwiseRationale) -> Vec<Contradiction> {
    rationale
        .judgements
        .iter()
        .filter_map(|j| {
            let (a, b) = (j.score_a.value()?, j.score_b.value()?);
            let implied = match a.cmp(&b) {
                std::cmp::Ordering::Greater => Winner::A,
                std::cmp::Ordering::Less => Winner::B,
                std::cmp::Ordering::Equal => return None,
            };
            (implied != j.winner).then_some(Contradiction {
                aspect: j.aspect,
                score_a: j.score_a,
                score_b: j.score_b,
                declared: j.winner,
                implied,
            })
        })
        .collect()
}
