//! Prompt construction by literal placeholder substitution.
//!
//! Templates are plain-text assets with `{name}` placeholders (`[a-z_]+`).
//! Substitution is a single literal pass: values are inserted verbatim and are
//! never re-scanned, so there is no escaping and no injection protection.

use serde::{Deserialize, Serialize};

use crate::rationale::Winner;

pub const PAIRWISE_EDIT: &str = include_str!("../templates/pairwise_edit.txt");
pub const PAIRWISE_T2I: &str = include_str!("../templates/pairwise_t2i.txt");
pub const CONSISTENCY: &str = include_str!("../templates/consistency.txt");
pub const POINTWISE_EDIT: &str = include_str!("../templates/pointwise_edit.txt");
pub const POINTWISE_T2I: &str = include_str!("../templates/pointwise_t2i.txt");
pub const GCR_EDIT: &str = include_str!("../templates/gcr_edit.txt");
pub const GCR_T2I: &str = include_str!("../templates/gcr_t2i.txt");

/// Prefix of the preference-anchor line in the pairwise template.
pub const ANCHOR_PREFIX: &str = "Hint: human preference is:";
const ANCHOR_LINE: &str = "Hint: human preference is: {label}\n\n";
const REFINEMENT_STANZA: &str = "\n# User Request Refinement:";

pub const IMAGE_LABEL_A: &str = "Edited Image A";
pub const IMAGE_LABEL_B: &str = "Edited Image B";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("missing required field `{0}`")]
    MissingField(&'static str),
    #[error("template references unknown placeholder `{0}`")]
    UnknownPlaceholder(String),
    #[error("invalid image label {0:?}")]
    InvalidImageLabel(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    ImageEditing,
    TextToImage,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub kind: TaskKind,
    pub instruction: String,
    pub preference_label: Option<Winner>,
    pub rationale_text: Option<String>,
    pub image_label: Option<String>,
    pub reference_comment: Option<String>,
}

impl PromptRequest {
    pub fn new(kind: TaskKind, instruction: impl Into<String>) -> Self {
        PromptRequest {
            kind,
            instruction: instruction.into(),
            ..Default::default()
        }
    }

    pub fn with_label(mut self, label: Winner) -> Self {
        self.preference_label = Some(label);
        self
    }

    pub fn with_rationale(mut self, text: impl Into<String>) -> Self {
        self.rationale_text = Some(text.into());
        self
    }

    pub fn with_reference(mut self, image_label: impl Into<String>, comment: impl Into<String>) -> Self {
        self.image_label = Some(image_label.into());
        self.reference_comment = Some(comment.into());
        self
    }

    fn instruction(&self) -> Result<&str, PromptError> {
        nonempty(Some(&self.instruction), "instruction")
    }
}

fn nonempty<'a>(value: Option<&'a String>, field: &'static str) -> Result<&'a str, PromptError> {
    match value {
        Some(v) if !v.trim().is_empty() => Ok(v.as_str()),
        _ => Err(PromptError::MissingField(field)),
    }
}

/// Surface form of the preference label in the anchor line. Defaults to the
/// consistency-answer vocabulary so both phases speak the same words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelVocabulary {
    pub a: String,
    pub b: String,
    pub tie: String,
}

impl Default for LabelVocabulary {
    fn default() -> Self {
        LabelVocabulary {
            a: "A is preferred".into(),
            b: "B is preferred".into(),
            tie: "Tie".into(),
        }
    }
}

impl LabelVocabulary {
    pub fn render(&self, label: Winner) -> &str {
        match label {
            Winner::A => &self.a,
            Winner::B => &self.b,
            Winner::Tie => &self.tie,
        }
    }
}

/// Substitutes every `{name}` placeholder in one pass.
pub fn render(template: &str, values: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let name_len = after
            .bytes()
            .take_while(|b| b.is_ascii_lowercase() || *b == b'_')
            .count();
        if name_len > 0 && after.as_bytes().get(name_len) == Some(&b'}') {
            let name = &after[..name_len];
            let value = values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| PromptError::UnknownPlaceholder(name.to_string()))?;
            out.push_str(value);
            rest = &after[name_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct PromptForge {
    pub labels: LabelVocabulary,
}

impl PromptForge {
    pub fn new(labels: LabelVocabulary) -> Self {
        PromptForge { labels }
    }

    fn pairwise_template(kind: TaskKind) -> &'static str {
        match kind {
            TaskKind::ImageEditing => PAIRWISE_EDIT,
            TaskKind::TextToImage => PAIRWISE_T2I,
        }
    }

    /// Phase-1 prompt: the full pairwise template with the preference anchor.
    pub fn build_pairwise_prompt(&self, req: &PromptRequest) -> Result<String, PromptError> {
        let instruction = req.instruction()?;
        let label = req
            .preference_label
            .ok_or(PromptError::MissingField("preference_label"))?;
        render(
            Self::pairwise_template(req.kind),
            &[("instruction", instruction), ("label", self.labels.render(label))],
        )
    }

    /// The same pairwise prompt with only the anchor line removed; this is
    /// what the student sees.
    pub fn build_foresight_prompt(&self, req: &PromptRequest) -> Result<String, PromptError> {
        let instruction = req.instruction()?;
        let template = Self::pairwise_template(req.kind).replacen(ANCHOR_LINE, "", 1);
        render(&template, &[("instruction", instruction)])
    }

    pub fn build_consistency_prompt(&self, req: &PromptRequest) -> Result<String, PromptError> {
        let instruction = req.instruction()?;
        let rationale = nonempty(req.rationale_text.as_ref(), "rationale_text")?;
        render(
            CONSISTENCY,
            &[("instruction", instruction), ("rationale_z", rationale)],
        )
    }

    pub fn build_pointwise_prompt(&self, req: &PromptRequest) -> Result<String, PromptError> {
        let instruction = req.instruction()?;
        let image_label = nonempty(req.image_label.as_ref(), "image_label")?;
        let comment = nonempty(req.reference_comment.as_ref(), "reference_comment")?;
        if image_label != IMAGE_LABEL_A && image_label != IMAGE_LABEL_B {
            return Err(PromptError::InvalidImageLabel(image_label.to_string()));
        }
        let template = match req.kind {
            TaskKind::ImageEditing => POINTWISE_EDIT,
            TaskKind::TextToImage => POINTWISE_T2I,
        };
        render(
            template,
            &[
                ("instruction", instruction),
                ("image_label", image_label),
                ("reference_comment", comment),
            ],
        )
    }

    fn gcr_template(kind: TaskKind) -> &'static str {
        match kind {
            TaskKind::ImageEditing => GCR_EDIT,
            TaskKind::TextToImage => GCR_T2I,
        }
    }

    /// Critique prompt that always requests the refinement block.
    pub fn build_gcr_prompt(&self, req: &PromptRequest) -> Result<String, PromptError> {
        let instruction = req.instruction()?;
        render(Self::gcr_template(req.kind), &[("instruction", instruction)])
    }

    /// Label-free single-image prompt used as the input of pointwise training
    /// records: the critique prompt without the refinement stanza.
    pub fn build_pointwise_student_prompt(&self, req: &PromptRequest) -> Result<String, PromptError> {
        let instruction = req.instruction()?;
        let template = Self::gcr_template(req.kind);
        let cut = template.find(REFINEMENT_STANZA).unwrap_or(template.len());
        render(&template[..cut], &[("instruction", instruction)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forge() -> PromptForge {
        PromptForge::default()
    }

    #[test]
    fn render_is_single_pass_and_literal() {
        let out = render("a {x} b {y}", &[("x", "{y}"), ("y", "Y")]).unwrap();
        assert_eq!(out, "a {y} b Y");
        assert_eq!(render("{ not } {A}", &[]).unwrap(), "{ not } {A}");
        assert_eq!(
            render("{missing}", &[]),
            Err(PromptError::UnknownPlaceholder("missing".into()))
        );
    }

    #[test]
    fn anchor_line_rendering() {
        let req = PromptRequest::new(TaskKind::ImageEditing, "add a red hat").with_label(Winner::A);
        let out = forge().build_pairwise_prompt(&req).unwrap();
        assert!(out.lines().any(|l| l == "Hint: human preference is: A is preferred"));
        assert!(out.starts_with("User Instruction: add a red hat\n"));
    }

    #[test]
    fn vocabulary_is_overridable() {
        let labels = LabelVocabulary {
            a: "A ≻ B".into(),
            ..Default::default()
        };
        let req = PromptRequest::new(TaskKind::ImageEditing, "x").with_label(Winner::A);
        let out = PromptForge::new(labels).build_pairwise_prompt(&req).unwrap();
        assert!(out.contains("Hint: human preference is: A ≻ B\n"));
    }

    #[test]
    fn missing_fields() {
        let f = forge();
        let empty = PromptRequest::new(TaskKind::ImageEditing, "  ").with_label(Winner::B);
        assert_eq!(f.build_pairwise_prompt(&empty), Err(PromptError::MissingField("instruction")));
        let no_label = PromptRequest::new(TaskKind::ImageEditing, "x");
        assert_eq!(
            f.build_pairwise_prompt(&no_label),
            Err(PromptError::MissingField("preference_label"))
        );
        assert_eq!(
            f.build_consistency_prompt(&no_label),
            Err(PromptError::MissingField("rationale_text"))
        );
        let no_comment = PromptRequest {
            image_label: Some(IMAGE_LABEL_B.into()),
            ..PromptRequest::new(TaskKind::ImageEditing, "x")
        };
        assert_eq!(
            f.build_pointwise_prompt(&no_comment),
            Err(PromptError::MissingField("reference_comment"))
        );
        let bad_label = PromptRequest::new(TaskKind::ImageEditing, "x").with_reference("Image C", "c");
        assert!(matches!(
            f.build_pointwise_prompt(&bad_label),
            Err(PromptError::InvalidImageLabel(_))
        ));
    }

    #[test]
    fn foresight_differs_only_by_anchor_line() {
        let req = PromptRequest::new(TaskKind::TextToImage, "a cat").with_label(Winner::B);
        let anchored = forge().build_pairwise_prompt(&req).unwrap();
        let foresight = forge().build_foresight_prompt(&req).unwrap();
        assert!(!foresight.contains(ANCHOR_PREFIX));
        assert_eq!(
            anchored.replacen("Hint: human preference is: B is preferred\n\n", "", 1),
            foresight
        );
    }

    #[test]
    fn image_label_appears_twice() {
        let req = PromptRequest::new(TaskKind::ImageEditing, "x").with_reference(IMAGE_LABEL_B, "comment");
        let out = forge().build_pointwise_prompt(&req).unwrap();
        assert_eq!(out.matches("Edited Image B").count(), 2);
    }

    #[test]
    fn gcr_prompt_ends_with_refinement_stanza() {
        let req = PromptRequest::new(TaskKind::TextToImage, "a sign reading OPEN");
        let out = forge().build_gcr_prompt(&req).unwrap();
        assert!(out.ends_with(
            "## Refined Request: [Improved, more specific instruction that addresses identified deficiencies]"
        ));
        let student = forge().build_pointwise_student_prompt(&req).unwrap();
        assert!(student.ends_with("# Summary: [Summary of the evaluation]"));
        assert!(out.starts_with(&student));
    }

    #[test]
    fn t2i_variants_drop_source_image() {
        for t in [PAIRWISE_T2I, POINTWISE_T2I, GCR_T2I] {
            assert!(!t.contains("Source Image"), "{t}");
            assert!(t.contains("2. Image Faithfulness: N/A"));
        }
        assert!(PAIRWISE_T2I.contains("Your task is to compare two generated images against the User Instruction."));
    }
}
