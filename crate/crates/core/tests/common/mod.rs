//! Helpers shared by the integration tests.
#![allow(dead_code)]

use parrot_core::rationale::*;
use rand::seq::IndexedRandom;
use rand::Rng;

const WORDS: &[&str] = &[
    "the", "edited", "image", "shows", "a", "red", "umbrella", "while", "lighting", "stays", "consistent", "but",
    "texture", "on", "sleeve", "is", "smeared", "Image", "A", "B", "keeps", "background", "intact", "cat's",
    "whiskers", "3.5", "(minor)", "artifacts", "near", "edge", "score", "winner", "summary", "50%", "sign", "\"SALE\"",
    "café", "naïve", "→", "looks", "better", "worse", "tie", "request", "refined", "comments",
];

fn sentence<R: Rng>(rng: &mut R) -> String {
    let n = rng.random_range(3..14);
    let words: Vec<&str> = (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect();
    format!("{}.", words.join(" "))
}

/// One to three sentences, sometimes split across lines.
pub fn prose<R: Rng>(rng: &mut R) -> String {
    let n = rng.random_range(1..4);
    let mut out = sentence(rng);
    for _ in 1..n {
        out.push(if rng.random_bool(0.3) { '\n' } else { ' ' });
        out.push_str(&sentence(rng));
    }
    out
}

pub fn score<R: Rng>(rng: &mut R, aspect: Aspect) -> Score {
    if aspect.allows_not_applicable() && rng.random_bool(0.2) {
        return Score::NotApplicable;
    }
    let h = if rng.random_bool(0.5) {
        rng.random_range(2..=8u16) * 50
    } else {
        rng.random_range(100..=400u16)
    };
    Score::Value(ScoreValue::from_hundredths(h).unwrap())
}

pub fn pairwise<R: Rng>(rng: &mut R) -> PairwiseRationale {
    let judgements = Aspect::ALL.map(|aspect| {
        if aspect == Aspect::TextRendering && rng.random_bool(0.25) {
            return AspectJudgement::omitted(aspect);
        }
        AspectJudgement {
            aspect,
            justification: prose(rng),
            score_a: score(rng, aspect),
            score_b: score(rng, aspect),
            winner: *[Winner::A, Winner::B, Winner::Tie].choose(rng).unwrap(),
        }
    });
    PairwiseRationale {
        understanding: prose(rng),
        judgements,
        summary: prose(rng),
    }
}

pub fn pointwise<R: Rng>(rng: &mut R) -> PointwiseAssessment {
    let per_aspect = Aspect::ALL.map(|aspect| {
        if aspect == Aspect::TextRendering && rng.random_bool(0.25) {
            return AspectAssessment::omitted(aspect);
        }
        AspectAssessment {
            aspect,
            score: score(rng, aspect),
            justification: prose(rng),
        }
    });
    let refinement = rng.random_bool(0.5).then(|| Refinement {
        comments: prose(rng),
        refined_request: prose(rng),
    });
    PointwiseAssessment {
        understanding: prose(rng),
        per_aspect,
        summary: prose(rng),
        refinement,
    }
}

/// Two-sample Kolmogorov-Smirnov test; returns `(D, p)` with the asymptotic
/// p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k as f64).powi(2) * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    (d, p.clamp(0.0, 1.0))
}

use parrot_core::gateway::mock::{MockRule, MockScript};

pub const CONSISTENCY_MARKER: &str = "which image is preferred overall";

pub fn fixed_pairwise_text() -> String {
    emit_pairwise(&PairwiseRationale {
        understanding: "The user asks for a single change.".into(),
        judgements: Aspect::ALL.map(|aspect| AspectJudgement {
            aspect,
            justification: format!("{} differs between the two candidates.", aspect.title()),
            score_a: Score::numeric(3.5).unwrap(),
            score_b: if aspect == Aspect::TextRendering {
                Score::numeric(3.5).unwrap()
            } else {
                Score::numeric(2.5).unwrap()
            },
            winner: if aspect == Aspect::TextRendering { Winner::Tie } else { Winner::A },
        }),
        summary: "One candidate follows the request more closely.".into(),
    })
}

pub fn fixed_pointwise_text(score: f64) -> String {
    emit_pointwise(&PointwiseAssessment {
        understanding: "Single image assessment.".into(),
        per_aspect: Aspect::ALL.map(|aspect| AspectAssessment {
            aspect,
            score: if aspect == Aspect::TextRendering {
                Score::NotApplicable
            } else {
                Score::numeric(score).unwrap()
            },
            justification: "Consistent with the reference comment.".into(),
        }),
        summary: "Acceptable.".into(),
        refinement: None,
    })
}

/// How the mocked teacher treats one comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fate {
    Agree,
    Disagree,
    TieAnswer,
    Malformed,
}

pub fn pair_id(i: usize) -> String {
    format!("pair-{i:03}")
}

/// Input lines plus a strict mock script. Every rule is keyed on the
/// item's instruction, so the outcome never depends on request order.
pub fn pipeline_fixture(fates: &[Fate]) -> (String, MockScript) {
    let mut lines = String::new();
    let mut rules = Vec::new();
    for (i, fate) in fates.iter().enumerate() {
        let id = pair_id(i);
        let label = if i % 2 == 0 { "A" } else { "B" };
        let instruction = format!("Apply edit {id}.");
        let img = |tag: u8| format!("data:image/png;base64,{}", base64_of(&[tag, i as u8, (i >> 8) as u8]));
        let source = if i % 3 == 0 { String::new() } else { format!(r#","source":"{}""#, img(0)) };
        lines.push_str(&format!(
            r#"{{"id":"{id}","instruction":"{instruction}"{source},"image_a":"{}","image_b":"{}","label":"{label}"}}"#,
            img(1),
            img(2)
        ));
        lines.push('\n');
        let phase1 = if *fate == Fate::Malformed { "I cannot help with that.".to_string() } else { fixed_pairwise_text() };
        rules.push(MockRule::text(&["Hint: human preference is:", &instruction], phase1));
        let answer = match fate {
            Fate::Agree => format!("{label} is preferred"),
            Fate::Disagree => format!("{} is preferred", if label == "A" { "B" } else { "A" }),
            Fate::TieAnswer | Fate::Malformed => "Tie".to_string(),
        };
        rules.push(MockRule::text(&[CONSISTENCY_MARKER, &instruction], answer));
    }
    rules.push(MockRule::text(&["as \"Edited Image A\""], fixed_pointwise_text(3.5)));
    rules.push(MockRule::text(&["as \"Edited Image B\""], fixed_pointwise_text(2.5)));
    (lines, MockScript::strict(rules))
}

fn base64_of(bytes: &[u8]) -> String {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

/// 72 agreeing, 20 disagreeing, 5 Tie answers, 3 malformed.
pub fn fates_72_of_100() -> Vec<Fate> {
    (0..100)
        .map(|i| match i {
            _ if i % 25 == 24 && i < 75 => Fate::Malformed,
            _ if i % 20 == 19 => Fate::TieAnswer,
            _ => Fate::Agree,
        })
        .collect::<Vec<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, f)| if f == Fate::Agree && agree_rank(i) >= 72 { Fate::Disagree } else { f })
        .collect()
}

fn agree_rank(i: usize) -> usize {
    (0..i)
        .filter(|&j| !(j % 25 == 24 && j < 75) && j % 20 != 19)
        .count()
}
