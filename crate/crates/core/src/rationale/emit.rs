use std::fmt::Write;

use super::{Aspect, AspectAssessment, AspectJudgement, PairwiseRationale, PointwiseAssessment};

fn line(out: &mut String, head: &str, value: &str) {
    out.push_str(head);
    if !value.is_empty() {
        out.push(' ');
        out.push_str(value);
    }
    out.push('\n');
}

fn preamble(out: &mut String, understanding: &str) {
    if !understanding.is_empty() {
        out.push_str(understanding);
        out.push('\n');
    }
    out.push_str("# Detailed Judgement\n");
}

fn aspect_header(out: &mut String, aspect: Aspect) {
    let _ = writeln!(out, "{}. {}:", aspect.number(), aspect.title());
}

/// Canonical text form of a pairwise rationale. A text-rendering block
/// equal to [`AspectJudgement::omitted`] is left out, mirroring the parser.
pub fn emit_pairwise(r: &PairwiseRationale) -> String {
    let mut out = String::new();
    preamble(&mut out, &r.understanding);
    for j in &r.judgements {
        if j.aspect == Aspect::TextRendering && *j == AspectJudgement::omitted(j.aspect) {
            continue;
        }
        aspect_header(&mut out, j.aspect);
        line(&mut out, "## Justification:", &j.justification);
        let _ = writeln!(
            out,
            "## Score A: {} ## Score B: {} ## Winner: {}",
            j.score_a, j.score_b, j.winner
        );
    }
    out.push_str("# Summary: ");
    out.push_str(&r.summary);
    out
}

pub fn emit_pointwise(a: &PointwiseAssessment) -> String {
    let mut out = String::new();
    preamble(&mut out, &a.understanding);
    for p in &a.per_aspect {
        if p.aspect == Aspect::TextRendering && *p == AspectAssessment::omitted(p.aspect) {
            continue;
        }
        aspect_header(&mut out, p.aspect);
        let _ = writeln!(out, "## Score: {}", p.score);
        line(&mut out, "## Justification:", &p.justification);
    }
    out.push_str("# Summary: ");
    out.push_str(&a.summary);
    if let Some(r) = &a.refinement {
        out.push_str("\n# User Request Refinement:\n");
        line(&mut out, "## Refinement Comments:", &r.comments);
        out.push_str("## Refined Request:");
        if !r.refined_request.is_empty() {
            out.push(' ');
            out.push_str(&r.refined_request);
        }
    }
    out
}
