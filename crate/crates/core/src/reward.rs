//! Scalar rewards from per-aspect assessments.
//!
//! * [`aggregate`]: weighted mean over the applicable aspects (uniform weights
//!   by default), so N/A aspects never move the reward.
//! * [`normalize_group`]: `0.5 + 0.5 * clip((r - mean) / Z, -1, 1)` within a
//!   group of generations for the same prompt, with `Z = max(std, eps)`.
//! * [`quality_filter`]: skips groups that are already near-solved or carry no
//!   signal.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

use crate::prompts::TaskKind;
use crate::rationale::{Aspect, PointwiseAssessment, Score, Winner};

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_MEAN_THRESHOLD: f64 = 0.9;
pub const DEFAULT_STD_THRESHOLD: f64 = 0.05;
pub const DEFAULT_SELECTION_THRESHOLD: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error("no applicable dimensions to aggregate")]
    NoActiveDimensions,
    #[error("group normalization needs at least 2 members, got {0}")]
    GroupTooSmall(usize),
    #[error("benchmark is empty")]
    EmptyBenchmark,
    #[error("invalid reward option: {0}")]
    InvalidOption(String),
}

impl Default for Score {
    fn default() -> Self {
        Score::NotApplicable
    }
}

/// Per-aspect scores of one image, keyed as in line-delimited score records.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimensionScores {
    #[serde(default)]
    pub tf: Score,
    #[serde(default, rename = "if")]
    pub image: Score,
    #[serde(default)]
    pub pq: Score,
    #[serde(default)]
    pub tr: Score,
}

impl DimensionScores {
    pub fn from_array(scores: [Score; 4]) -> Self {
        let [tf, image, pq, tr] = scores;
        DimensionScores { tf, image, pq, tr }
    }

    pub fn to_array(self) -> [Score; 4] {
        [self.tf, self.image, self.pq, self.tr]
    }

    pub fn get(&self, aspect: Aspect) -> Score {
        self.to_array()[aspect as usize]
    }

    /// Text-to-image tasks have no source image, so image faithfulness is
    /// forced to N/A regardless of what the judge wrote.
    pub fn from_assessment(a: &PointwiseAssessment, kind: TaskKind) -> Self {
        let mut s = DimensionScores::from_array(Aspect::ALL.map(|asp| a.score(asp)));
        if kind == TaskKind::TextToImage {
            s.image = Score::NotApplicable;
        }
        s
    }

    pub fn active(&self) -> impl Iterator<Item = (Aspect, f64)> {
        let scores = self.to_array();
        Aspect::ALL
            .into_iter()
            .filter_map(move |a| scores[a as usize].as_f64().map(|v| (a, v)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AspectWeights(pub [f64; 4]);

impl Default for AspectWeights {
    fn default() -> Self {
        AspectWeights([1.0; 4])
    }
}

impl AspectWeights {
    pub fn validate(&self) -> Result<(), RewardError> {
        if self.0.iter().all(|w| w.is_finite() && *w > 0.0) {
            Ok(())
        } else {
            Err(RewardError::InvalidOption("aspect weights must be finite and > 0".into()))
        }
    }
}

/// Equal-weight mean of the applicable aspect scores.
pub fn aggregate(scores: &DimensionScores) -> Result<f64, RewardError> {
    aggregate_weighted(scores, &AspectWeights::default())
}

pub fn aggregate_weighted(scores: &DimensionScores, weights: &AspectWeights) -> Result<f64, RewardError> {
    let (num, den) = scores
        .active()
        .fold((0.0, 0.0), |(n, d), (a, v)| (n + weights.0[a as usize] * v, d + weights.0[a as usize]));
    if den == 0.0 {
        return Err(RewardError::NoActiveDimensions);
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Population standard deviation (divides by K).
    #[default]
    PopulationStd,
    /// Sample standard deviation (divides by K - 1).
    SampleStd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizeOptions {
    pub scale: ScaleMode,
    pub epsilon: f64,
}

impl Default for NormalizeOptions {
    fn default() -> Self {
        NormalizeOptions {
            scale: ScaleMode::PopulationStd,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedGroup {
    pub normalized: Vec<f64>,
    pub mean: f64,
    /// The `Z` actually divided by, after the epsilon floor.
    pub scale: f64,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn normalize_group(raw: &[f64], opts: &NormalizeOptions) -> Result<NormalizedGroup, RewardError> {
    let k = raw.len();
    if k < 2 {
        return Err(RewardError::GroupTooSmall(k));
    }
    let m = mean(raw);
    let ss: f64 = raw.iter().map(|x| (x - m).powi(2)).sum();
    let std = match opts.scale {
        ScaleMode::PopulationStd => (ss / k as f64).sqrt(),
        ScaleMode::SampleStd => (ss / (k - 1) as f64).sqrt(),
    };
    let scale = std.max(opts.epsilon);
    let normalized = raw
        .iter()
        .map(|r| 0.5 + 0.5 * ((r - m) / scale).clamp(-1.0, 1.0))
        .collect();
    tracing::trace!(mean = m, scale, "normalized group");
    Ok(NormalizedGroup {
        normalized,
        mean: m,
        scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityThresholds {
    /// Groups whose normalized mean exceeds this are treated as solved.
    pub mean_max: f64,
    /// Groups whose normalized std falls below this carry no signal.
    pub std_min: f64,
}

impl Default for QualityThresholds {
    fn default() -> Self {
        QualityThresholds {
            mean_max: DEFAULT_MEAN_THRESHOLD,
            std_min: DEFAULT_STD_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    MeanAboveThreshold { mean: f64, threshold: f64 },
    StdBelowThreshold { std: f64, threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum QualityDecision {
    Keep,
    Skip(SkipReason),
}

impl QualityDecision {
    pub fn is_keep(&self) -> bool {
        matches!(self, QualityDecision::Keep)
    }
}

/// Applied to normalized rewards; either threshold alone skips the group.
pub fn quality_filter(normalized: &[f64], thresholds: &QualityThresholds) -> QualityDecision {
    if normalized.is_empty() {
        return QualityDecision::Skip(SkipReason::StdBelowThreshold {
            std: 0.0,
            threshold: thresholds.std_min,
        });
    }
    let m = mean(normalized);
    if m > thresholds.mean_max {
        return QualityDecision::Skip(SkipReason::MeanAboveThreshold {
            mean: m,
            threshold: thresholds.mean_max,
        });
    }
    let std = population_std(normalized);
    if std < thresholds.std_min {
        return QualityDecision::Skip(SkipReason::StdBelowThreshold {
            std,
            threshold: thresholds.std_min,
        });
    }
    QualityDecision::Keep
}

/// Prompts whose mean raw score is strictly below `threshold`.
pub fn select_training_prompts<'a, I>(mean_scores: I, threshold: f64) -> BTreeSet<String>
where
    I: IntoIterator<Item = (&'a String, &'a f64)>,
{
    mean_scores
        .into_iter()
        .filter(|(_, m)| **m < threshold)
        .map(|(p, _)| p.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub id: String,
    pub gold: Winner,
    pub verdict: Winner,
}

/// Fraction of verdicts equal to the gold label. A `Tie` verdict only
/// counts when the gold label is itself `Tie`.
pub fn pairwise_accuracy(items: &[BenchmarkItem]) -> Result<f64, RewardError> {
    if items.is_empty() {
        return Err(RewardError::EmptyBenchmark);
    }
    let correct = items.iter().filter(|i| i.verdict == i.gold).count();
    Ok(correct as f64 / items.len() as f64)
}

/// One line of a score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub prompt_id: String,
    pub image: String,
    pub scores: DimensionScores,
    #[serde(default)]
    pub r_raw: Option<f64>,
    #[serde(default)]
    pub r_norm: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardOptions {
    pub weights: AspectWeights,
    pub normalize: NormalizeOptions,
    pub quality: QualityThresholds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMember {
    pub image: String,
    pub scores: DimensionScores,
    pub r_raw: f64,
    pub r_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardGroup {
    pub prompt_id: String,
    pub members: Vec<GroupMember>,
    pub mean: f64,
    pub scale: f64,
    pub decision: QualityDecision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBatch {
    pub records: Vec<ScoreRecord>,
    pub groups: Vec<RewardGroup>,
    /// Prompts whose group could not be normalized, with the reason.
    pub skipped: Vec<(String, RewardError)>,
}

/// Fills `r_raw` and `r_norm` for every record, grouping by `prompt_id`.
/// Output order is sorted by prompt id, then input order within a prompt.
pub fn score_records(records: Vec<ScoreRecord>, opts: &RewardOptions) -> ScoredBatch {
    let mut by_prompt: BTreeMap<String, Vec<ScoreRecord>> = BTreeMap::new();
    for r in records {
        by_prompt.entry(r.prompt_id.clone()).or_default().push(r);
    }
    let mut out = ScoredBatch {
        records: Vec::new(),
        groups: Vec::new(),
        skipped: Vec::new(),
    };
    for (prompt_id, mut group) in by_prompt {
        let mut raws = Vec::with_capacity(group.len());
        let mut failed = None;
        for rec in &mut group {
            match aggregate_weighted(&rec.scores, &opts.weights) {
                Ok(r) => {
                    rec.r_raw = Some(r);
                    raws.push(r);
                }
                Err(e) => {
                    rec.r_raw = None;
                    failed.get_or_insert(e);
                }
            }
        }
        let normalized = match failed {
            Some(e) => Err(e),
            None => normalize_group(&raws, &opts.normalize),
        };
        match normalized {
            Ok(n) => {
                for (rec, r) in group.iter_mut().zip(&n.normalized) {
                    rec.r_norm = Some(*r);
                }
                out.groups.push(RewardGroup {
                    prompt_id: prompt_id.clone(),
                    members: group
                        .iter()
                        .map(|r| GroupMember {
                            image: r.image.clone(),
                            scores: r.scores,
                            r_raw: r.r_raw.unwrap_or_default(),
                            r_norm: r.r_norm.unwrap_or_default(),
                        })
                        .collect(),
                    mean: n.mean,
                    scale: n.scale,
                    decision: quality_filter(&n.normalized, &opts.quality),
                });
            }
            Err(e) => {
                tracing::warn!(prompt_id, error = %e, "group not normalized");
                out.skipped.push((prompt_id, e));
            }
        }
        out.records.extend(group);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Score {
        Score::numeric(v).unwrap()
    }
    const NA: Score = Score::NotApplicable;

    #[test]
    fn aggregate_examples() {
        let d = DimensionScores::from_array([s(4.0), s(3.0), s(2.0), NA]);
        assert_eq!(aggregate(&d).unwrap(), 3.0);
        let d = DimensionScores::from_array([s(4.0); 4]);
        assert_eq!(aggregate(&d).unwrap(), 4.0);
        let d = DimensionScores::from_array([s(3.5), NA, s(2.5), NA]);
        assert_eq!(aggregate(&d).unwrap(), 3.0);
        assert_eq!(
            aggregate(&DimensionScores::from_array([NA; 4])),
            Err(RewardError::NoActiveDimensions)
        );
    }

    #[test]
    fn weights_apply_to_active_only() {
        let d = DimensionScores::from_array([s(4.0), NA, s(2.0), NA]);
        let w = AspectWeights([3.0, 100.0, 1.0, 100.0]);
        assert_eq!(aggregate_weighted(&d, &w).unwrap(), 3.5);
    }

    #[test]
    fn normalize_worked_examples() {
        let opts = NormalizeOptions::default();
        let g = normalize_group(&[1.0, 2.0, 3.0, 4.0, 5.0], &opts).unwrap();
        assert_eq!(g.mean, 3.0);
        assert!((g.scale - 2f64.sqrt()).abs() < 1e-15);
        let expected = [0.0, 0.5 - 0.5 / 2f64.sqrt(), 0.5, 0.5 + 0.5 / 2f64.sqrt(), 1.0];
        for (a, b) in g.normalized.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let g = normalize_group(&[3.0, 3.0, 3.0], &opts).unwrap();
        assert_eq!(g.normalized, vec![0.5; 3]);
        assert_eq!(g.scale, DEFAULT_EPSILON);
        let g = normalize_group(&[0.0, 10.0], &opts).unwrap();
        assert_eq!((g.mean, g.scale), (5.0, 5.0));
        assert_eq!(g.normalized, vec![0.0, 1.0]);
        assert_eq!(normalize_group(&[1.0], &opts), Err(RewardError::GroupTooSmall(1)));
    }

    #[test]
    fn sample_std_mode() {
        let opts = NormalizeOptions {
            scale: ScaleMode::SampleStd,
            ..Default::default()
        };
        let g = normalize_group(&[0.0, 10.0], &opts).unwrap();
        assert!((g.scale - 50f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn quality_filter_examples() {
        let t = QualityThresholds::default();
        assert!(matches!(
            quality_filter(&[0.95, 0.95, 0.92], &t),
            QualityDecision::Skip(SkipReason::MeanAboveThreshold { .. })
        ));
        match quality_filter(&[0.5, 0.52, 0.49], &t) {
            QualityDecision::Skip(SkipReason::StdBelowThreshold { std, .. }) => {
                assert!((std - 0.012472).abs() < 1e-5)
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(quality_filter(&[0.1, 0.5, 0.9], &t), QualityDecision::Keep);
    }

    #[test]
    fn prompt_selection_is_strict() {
        let m: BTreeMap<String, f64> = [("p1", 2.9), ("p2", 3.0), ("p3", 3.5)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let picked = select_training_prompts(&m, DEFAULT_SELECTION_THRESHOLD);
        assert_eq!(picked.into_iter().collect::<Vec<_>>(), vec!["p1".to_string()]);
        assert!(select_training_prompts(&BTreeMap::new(), 3.0).is_empty());
        let all = select_training_prompts(&m, 10.0);
        assert_eq!(all.len(), 3);
    }

    #[test]
    fn accuracy_rules() {
        let item = |gold, verdict| BenchmarkItem {
            id: String::new(),
            gold,
            verdict,
        };
        let items = vec![
            item(Winner::A, Winner::A),
            item(Winner::B, Winner::B),
            item(Winner::A, Winner::A),
            item(Winner::B, Winner::A),
        ];
        assert_eq!(pairwise_accuracy(&items).unwrap(), 0.75);
        let ties = vec![item(Winner::A, Winner::Tie), item(Winner::B, Winner::Tie)];
        assert_eq!(pairwise_accuracy(&ties).unwrap(), 0.0);
        assert_eq!(pairwise_accuracy(&[]), Err(RewardError::EmptyBenchmark));
    }

    #[test]
    fn score_records_groups_by_prompt() {
        let rec = |p: &str, img: &str, v: f64| ScoreRecord {
            prompt_id: p.into(),
            image: img.into(),
            scores: DimensionScores::from_array([s(v), NA, s(v), NA]),
            r_raw: None,
            r_norm: None,
        };
        let batch = score_records(
            vec![rec("b", "1", 2.0), rec("a", "1", 1.0), rec("b", "2", 4.0), rec("c", "1", 3.0)],
            &RewardOptions::default(),
        );
        let ids: Vec<_> = batch.records.iter().map(|r| (r.prompt_id.as_str(), r.image.as_str())).collect();
        assert_eq!(ids, vec![("a", "1"), ("b", "1"), ("b", "2"), ("c", "1")]);
        assert_eq!(batch.records[1].r_norm, Some(0.0));
        assert_eq!(batch.records[2].r_norm, Some(1.0));
        assert_eq!(batch.records[0].r_raw, Some(1.0));
        assert_eq!(batch.records[0].r_norm, None);
        assert_eq!(batch.skipped.len(), 2);
        assert_eq!(batch.groups.len(), 1);
    }

    #[test]
    fn score_record_json_shape() {
        let line = r#"{"prompt_id":"p","image":"x.png","scores":{"tf":3.5,"if":"N/A","pq":2,"tr":null}}"#;
        let r: ScoreRecord = serde_json::from_str(line).unwrap();
        assert_eq!(r.scores.image, NA);
        assert_eq!(aggregate(&r.scores).unwrap(), 2.75);
    }
}
