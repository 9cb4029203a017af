use regex::{Regex, RegexBuilder};
use std::sync::LazyLock;

use super::score::ScoreTokenError;
use super::{
    Aspect, AspectAssessment, AspectJudgement, ConsistencyAnswer, GrammarError, PairwiseRationale,
    PointwiseAssessment, Refinement, Score, Winner,
};

fn header(pattern: &str) -> Regex {
    RegexBuilder::new(pattern)
        .case_insensitive(true)
        .multi_line(true)
        .build()
        .expect("static header pattern")
}

static DETAILED: LazyLock<Regex> =
    LazyLock::new(|| header(r"^[ \t]*#+[ \t]*detailed[ \t]+judge?ment[ \t]*:?"));
static SUMMARY: LazyLock<Regex> = LazyLock::new(|| header(r"^[ \t]*#+[ \t]*summary[ \t]*:"));
static JUSTIFICATION: LazyLock<Regex> =
    LazyLock::new(|| header(r"#+[ \t]*justification[ \t]*:"));
static PAIR_SCORES: LazyLock<Regex> = LazyLock::new(|| {
    header(
        r"#+[ \t]*score[ \t]*a[ \t]*:(?P<a>[^#\n]*)\s*#+[ \t]*score[ \t]*b[ \t]*:(?P<b>[^#\n]*)\s*#+[ \t]*winner[ \t]*:[ \t]*\[?[ \t]*(?P<w>tie|a|b)\b[ \t]*\]?",
    )
});
static POINT_SCORE: LazyLock<Regex> =
    LazyLock::new(|| header(r"#+[ \t]*score[ \t]*:(?P<v>[^#\n]*)"));
static REFINEMENT: LazyLock<Regex> = LazyLock::new(|| {
    header(r"^[ \t]*#+[ \t]*user[ \t]+request[ \t]+refinement[ \t]*:?")
});
static REFINEMENT_COMMENTS: LazyLock<Regex> =
    LazyLock::new(|| header(r"#+[ \t]*refinement[ \t]+comments[ \t]*:"));
static REFINED_REQUEST: LazyLock<Regex> =
    LazyLock::new(|| header(r"#+[ \t]*refined[ \t]+request[ \t]*:"));
static ASPECT_HEADERS: LazyLock<[Regex; 4]> = LazyLock::new(|| {
    Aspect::ALL.map(|aspect| {
        let words: Vec<_> = aspect.title().split(' ').map(regex::escape).collect();
        header(&format!(
            r"^[ \t]*(?:#+[ \t]*)?{}[ \t]*\.[ \t]*{}[ \t]*:?",
            aspect.number(),
            words.join(r"[ \t]+")
        ))
    })
});
static ANSWER_PATTERNS: LazyLock<[Regex; 3]> = LazyLock::new(|| {
    ConsistencyAnswer::ALL.map(|a| {
        let words: Vec<_> = a.as_str().split(' ').map(regex::escape).collect();
        header(&format!(r"\b{}\b", words.join(r"\s+")))
    })
});

/// A located header: `start` is where the header begins, `end` where its
/// content begins. Offsets are absolute within the parsed text.
#[derive(Debug, Clone, Copy)]
struct Span {
    start: usize,
    end: usize,
}

fn find(re: &Regex, raw: &str, from: usize, until: usize) -> Option<Span> {
    re.find_at(&raw[..until], from).map(|m| Span {
        start: m.start(),
        end: m.end(),
    })
}

fn require(re: &Regex, raw: &str, from: usize, until: usize, what: &str) -> Result<Span, GrammarError> {
    find(re, raw, from, until).ok_or_else(|| GrammarError::malformed(format!("missing {what}"), from))
}

/// Locations of the four aspect blocks and the summary header. A missing
/// text-rendering block yields `None` in the last slot.
struct Layout {
    understanding: String,
    blocks: [Option<(usize, usize)>; 4],
    summary: Span,
}

fn layout(raw: &str) -> Result<Layout, GrammarError> {
    let detailed = require(&DETAILED, raw, 0, raw.len(), "'# Detailed Judgement' header")?;
    let understanding = raw[..detailed.start].trim().to_string();

    let mut headers: [Option<Span>; 4] = [None; 4];
    let mut cursor = detailed.end;
    for aspect in &Aspect::ALL[..3] {
        let re = &ASPECT_HEADERS[*aspect as usize];
        let what = format!("'{}. {}' header", aspect.number(), aspect.title());
        let span = require(re, raw, cursor, raw.len(), &what)?;
        headers[*aspect as usize] = Some(span);
        cursor = span.end;
    }
    let summary = require(&SUMMARY, raw, cursor, raw.len(), "'# Summary' header")?;
    let rendering = &ASPECT_HEADERS[Aspect::TextRendering as usize];
    headers[3] = find(rendering, raw, cursor, summary.start);

    let mut blocks = [None; 4];
    for i in 0..4 {
        if let Some(h) = headers[i] {
            let end = headers[i + 1..]
                .iter()
                .flatten()
                .map(|s| s.start)
                .next()
                .unwrap_or(summary.start);
            blocks[i] = Some((h.end, end));
        }
    }
    Ok(Layout {
        understanding,
        blocks,
        summary,
    })
}

fn read_score(aspect: Aspect, token: &str, offset: usize) -> Result<Score, GrammarError> {
    match Score::parse_token(token) {
        Ok(Score::NotApplicable) if !aspect.allows_not_applicable() => Err(GrammarError::malformed(
            format!("N/A is not permitted for {aspect}"),
            offset,
        )),
        Ok(score) => Ok(score),
        Err(ScoreTokenError::OutOfRange) => Err(GrammarError::ScoreOutOfRange {
            aspect,
            text: token.trim().to_string(),
            offset,
        }),
        Err(ScoreTokenError::Unparseable) => Err(GrammarError::malformed(
            format!("unparseable score {:?} for {aspect}", token.trim()),
            offset,
        )),
    }
}

/// Text following `header` up to `score` if the score line comes after it,
/// otherwise up to the end of the block.
fn justification_text(raw: &str, header: Span, score: Span, block_end: usize) -> String {
    let end = if score.start >= header.end { score.start } else { block_end };
    raw[header.end..end].trim().to_string()
}

fn parse_pair_block(
    raw: &str,
    aspect: Aspect,
    (start, end): (usize, usize),
) -> Result<AspectJudgement, GrammarError> {
    let scores = PAIR_SCORES
        .captures_at(&raw[..end], start)
        .ok_or_else(|| {
            GrammarError::malformed(format!("missing score/winner line for {aspect}"), start)
        })?;
    let whole = scores.get(0).unwrap();
    let score_span = Span {
        start: whole.start(),
        end: whole.end(),
    };
    let a = scores.name("a").unwrap();
    let b = scores.name("b").unwrap();
    let score_a = read_score(aspect, a.as_str(), a.start())?;
    let score_b = read_score(aspect, b.as_str(), b.start())?;
    let winner = match scores["w"].to_ascii_lowercase().as_str() {
        "a" => Winner::A,
        "b" => Winner::B,
        _ => Winner::Tie,
    };

    let just = require(&JUSTIFICATION, raw, start, end, &format!("justification for {aspect}"))?;
    let justification = justification_text(raw, just, score_span, end);
    if justification.is_empty() {
        return Err(GrammarError::malformed(
            format!("empty justification for {aspect}"),
            just.end,
        ));
    }
    Ok(AspectJudgement {
        aspect,
        justification,
        score_a,
        score_b,
        winner,
    })
}

fn parse_point_block(
    raw: &str,
    aspect: Aspect,
    (start, end): (usize, usize),
) -> Result<AspectAssessment, GrammarError> {
    let caps = POINT_SCORE.captures_at(&raw[..end], start).ok_or_else(|| {
        GrammarError::malformed(format!("missing score for {aspect}"), start)
    })?;
    let whole = caps.get(0).unwrap();
    let value = caps.name("v").unwrap();
    let score = read_score(aspect, value.as_str(), value.start())?;
    let score_span = Span {
        start: whole.start(),
        end: whole.end(),
    };
    let justification = find(&JUSTIFICATION, raw, start, end)
        .map(|h| justification_text(raw, h, score_span, end))
        .unwrap_or_default();
    Ok(AspectAssessment {
        aspect,
        score,
        justification,
    })
}

fn nonempty_summary(text: &str, offset: usize) -> Result<String, GrammarError> {
    let summary = text.trim();
    if summary.is_empty() {
        return Err(GrammarError::malformed("empty summary", offset));
    }
    Ok(summary.to_string())
}

/// Parses the pairwise comparison format (four aspect blocks, each with a
/// justification and a `## Score A: .. ## Score B: .. ## Winner: ..` line).
pub fn parse_pairwise(raw: &str) -> Result<PairwiseRationale, GrammarError> {
    let layout = layout(raw)?;
    let mut judgements = Vec::with_capacity(4);
    for aspect in Aspect::ALL {
        let judgement = match layout.blocks[aspect as usize] {
            Some(block) => parse_pair_block(raw, aspect, block)?,
            None => AspectJudgement::omitted(aspect),
        };
        judgements.push(judgement);
    }
    let summary = nonempty_summary(&raw[layout.summary.end..], layout.summary.end)?;
    Ok(PairwiseRationale {
        understanding: layout.understanding,
        judgements: judgements.try_into().expect("four aspects"),
        summary,
    })
}

/// Parses the single-image format, including the optional
/// `# User Request Refinement:` block produced by the critique prompt.
pub fn parse_pointwise(raw: &str) -> Result<PointwiseAssessment, GrammarError> {
    let layout = layout(raw)?;
    let mut per_aspect = Vec::with_capacity(4);
    for aspect in Aspect::ALL {
        let assessment = match layout.blocks[aspect as usize] {
            Some(block) => parse_point_block(raw, aspect, block)?,
            None => AspectAssessment::omitted(aspect),
        };
        per_aspect.push(assessment);
    }

    let after_summary = layout.summary.end;
    let refinement_header = find(&REFINEMENT, raw, after_summary, raw.len());
    let summary_end = refinement_header.map_or(raw.len(), |h| h.start);
    let summary = nonempty_summary(&raw[after_summary..summary_end], after_summary)?;

    let refinement = refinement_header.map(|h| {
        let comments = find(&REFINEMENT_COMMENTS, raw, h.end, raw.len());
        let refined = find(&REFINED_REQUEST, raw, comments.map_or(h.end, |c| c.end), raw.len());
        let comments = comments
            .map(|c| raw[c.end..refined.map_or(raw.len(), |r| r.start)].trim().to_string())
            .unwrap_or_default();
        let refined_request = refined
            .map(|r| raw[r.end..].trim().to_string())
            .unwrap_or_default();
        Refinement {
            comments,
            refined_request,
        }
    });

    Ok(PointwiseAssessment {
        understanding: layout.understanding,
        per_aspect: per_aspect.try_into().expect("four aspects"),
        summary,
        refinement,
    })
}

const QUOTES: &[char] = &['"', '\'', '`', '\u{201c}', '\u{201d}', '\u{2018}', '\u{2019}'];

/// Reads a consistency verdict. An exact match (after trimming whitespace,
/// quotes and a trailing period) wins; otherwise exactly one of the allowed
/// answers must occur as a whole phrase somewhere in the reply.
pub fn parse_consistency_answer(raw: &str) -> Result<ConsistencyAnswer, GrammarError> {
    let stripped = raw
        .trim()
        .trim_matches(QUOTES)
        .trim()
        .trim_end_matches('.')
        .trim_matches(QUOTES)
        .trim();
    if let Some(exact) = ConsistencyAnswer::ALL
        .into_iter()
        .find(|a| a.as_str().eq_ignore_ascii_case(stripped))
    {
        return Ok(exact);
    }
    let found: Vec<_> = ConsistencyAnswer::ALL
        .into_iter()
        .zip(ANSWER_PATTERNS.iter())
        .filter(|(_, re)| re.is_match(raw))
        .map(|(a, _)| a)
        .collect();
    match found.as_slice() {
        [only] => Ok(*only),
        _ => Err(GrammarError::AmbiguousAnswer {
            matches: found.len(),
        }),
    }
}
