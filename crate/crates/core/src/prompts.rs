//! Prompt rendering and structured reply parsing.
//!
//! Templates are plain text with `{name}` placeholders (`{{` and `}}` for
//! literal braces). The defaults are compiled in; a venue can override any
//! of them by dropping a file with the same name into a template directory.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use rust_decimal::{Decimal, RoundingStrategy};
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::corpus::normalize_whitespace;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("malformed reply: {0}")]
    MalformedReply(String),
    #[error("reply has no entry for paper '{0}'")]
    MissingPaper(String),
    #[error("score {value} for paper '{title}' is outside 0..=100")]
    ScoreOutOfRange { title: String, value: String },
    #[error("advance quota {quota} is too large for a batch of {batch}")]
    QuotaTooLarge { quota: usize, batch: usize },
    #[error("advance quota must be at least 1")]
    ZeroQuota,
    #[error("batch has no papers")]
    EmptyBatch,
    #[error("template {template} uses unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("invalid template {0}: {1}")]
    InvalidTemplate(String, String),
    #[error("cannot read template {0}: {1}")]
    Io(String, std::io::Error),
}

/// Renders `template` in one pass; substituted values are never rescanned.
pub fn render_template(name: &str, template: &str, vars: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() + vars.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            out.push_str(&tail[..1]);
            rest = &tail[2..];
            continue;
        }
        if let Some(inner) = tail.strip_prefix('{') {
            if let Some(end) = inner.find('}') {
                let ident = &inner[..end];
                if !ident.is_empty() && ident.chars().all(|c| c.is_ascii_lowercase() || c == '_') {
                    let value = vars
                        .iter()
                        .find(|(k, _)| *k == ident)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| PromptError::UnknownPlaceholder {
                            template: name.to_string(),
                            name: ident.to_string(),
                        })?;
                    out.push_str(value);
                    rest = &tail[end + 2..];
                    continue;
                }
            }
        }
        out.push_str(&tail[..1]);
        rest = &tail[1..];
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Reviewer,
    Chair,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Reviewer => "reviewer",
            Role::Chair => "chair",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionQuestion {
    pub criterion_id: u8,
    pub criterion_text: String,
    /// Contains a `{title}` placeholder.
    pub question_template: String,
}

impl CriterionQuestion {
    pub fn render(&self, title: &str) -> String {
        // Validated at construction: only `{title}` is present.
        render_template("question", &self.question_template, &[("title", title)])
            .expect("question template validated on load")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct RoleTemplate {
    system: String,
    steps: Vec<String>,
}

impl RoleTemplate {
    fn parse(name: &str, text: &str) -> Result<Self, PromptError> {
        let mut system = None;
        let mut steps: Vec<(usize, String)> = Vec::new();
        let mut current: Option<(String, Vec<&str>)> = None;
        let mut flush = |cur: Option<(String, Vec<&str>)>| -> Result<(), PromptError> {
            if let Some((label, lines)) = cur {
                let body = lines.join("\n").trim().to_string();
                if label == "system" {
                    system = Some(body);
                } else if let Some(n) = label.strip_prefix("step ").and_then(|n| n.trim().parse().ok()) {
                    steps.push((n, body));
                } else {
                    return Err(PromptError::InvalidTemplate(name.into(), format!("unknown block '{label}'")));
                }
            }
            Ok(())
        };
        for line in text.lines() {
            let t = line.trim();
            if let Some(label) = t.strip_prefix("===").and_then(|l| l.strip_suffix("===")) {
                flush(current.take())?;
                current = Some((label.trim().to_string(), Vec::new()));
            } else if let Some((_, lines)) = current.as_mut() {
                lines.push(line);
            }
        }
        flush(current.take())?;
        let system = system.ok_or_else(|| PromptError::InvalidTemplate(name.into(), "missing system block".into()))?;
        steps.sort_by_key(|(n, _)| *n);
        if steps.iter().map(|(n, _)| *n).ne(1..=7) {
            return Err(PromptError::InvalidTemplate(name.into(), "expected exactly steps 1 to 7".into()));
        }
        Ok(Self {
            system,
            steps: steps.into_iter().map(|(_, s)| s).collect(),
        })
    }
}

/// A rendered role prompt: system text plus the seven steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub role: Role,
    pub system_text: String,
    pub step_texts: Vec<String>,
    pub paper_titles: Vec<String>,
}

impl PromptBundle {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.system_text);
        for step in &self.step_texts {
            out.push_str("\n\n");
            out.push_str(step);
        }
        out.push_str("\n\nPapers in this batch:");
        for (i, t) in self.paper_titles.iter().enumerate() {
            out.push_str(&format!("\n{}. '{}'", i + 1, t));
        }
        out
    }
}

const DEFAULT_FORMAT_CHECK: &str = include_str!("../templates/format_check.txt");
const DEFAULT_EXAGGERATION: &str = include_str!("../templates/exaggeration.txt");
const DEFAULT_REVIEWER: &str = include_str!("../templates/reviewer.txt");
const DEFAULT_CHAIR: &str = include_str!("../templates/chair.txt");
const DEFAULT_CRITERIA: &str = include_str!("../templates/criteria.txt");
const DEFAULT_QUESTIONS: &str = include_str!("../templates/questions.txt");
const DEFAULT_ANSWER_QUESTION: &str = include_str!("../templates/answer_question.txt");

/// All prompt templates used by the engine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    format_check: String,
    exaggeration: String,
    reviewer: RoleTemplate,
    chair: RoleTemplate,
    answer_question: String,
    questions: Vec<CriterionQuestion>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::from_texts(&HashMap::new()).expect("built-in templates are valid")
    }
}

impl PromptSet {
    pub const FILES: [&'static str; 7] = [
        "format_check.txt",
        "exaggeration.txt",
        "reviewer.txt",
        "chair.txt",
        "criteria.txt",
        "questions.txt",
        "answer_question.txt",
    ];

    pub fn builtin() -> &'static PromptSet {
        static SET: OnceLock<PromptSet> = OnceLock::new();
        SET.get_or_init(PromptSet::default)
    }

    /// Loads overrides from `dir`; files that are absent keep the default.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut texts = HashMap::new();
        for name in Self::FILES {
            let path = dir.join(name);
            if path.is_file() {
                let text = std::fs::read_to_string(&path).map_err(|e| PromptError::Io(path.display().to_string(), e))?;
                texts.insert(name, text);
            }
        }
        Self::from_texts(&texts)
    }

    fn from_texts(texts: &HashMap<&str, String>) -> Result<Self, PromptError> {
        let get = |name: &str, default: &'static str| texts.get(name).map(String::as_str).unwrap_or(default);
        let criteria: Vec<&str> = get("criteria.txt", DEFAULT_CRITERIA)
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect();
        let question_lines: Vec<&str> = get("questions.txt", DEFAULT_QUESTIONS)
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect();
        if criteria.is_empty() || criteria.len() != question_lines.len() || criteria.len() > u8::MAX as usize {
            return Err(PromptError::InvalidTemplate(
                "questions.txt".into(),
                format!("{} criteria but {} questions", criteria.len(), question_lines.len()),
            ));
        }
        let mut questions = Vec::with_capacity(criteria.len());
        for (i, (c, q)) in criteria.iter().zip(&question_lines).enumerate() {
            // Must embed the title and nothing else.
            let probe = render_template("questions.txt", q, &[("title", "\u{0}")])?;
            if !probe.contains('\u{0}') {
                return Err(PromptError::InvalidTemplate("questions.txt".into(), format!("line {} lacks {{title}}", i + 1)));
            }
            questions.push(CriterionQuestion {
                criterion_id: (i + 1) as u8,
                criterion_text: c.to_string(),
                question_template: q.to_string(),
            });
        }
        let set = Self {
            format_check: get("format_check.txt", DEFAULT_FORMAT_CHECK).to_string(),
            exaggeration: get("exaggeration.txt", DEFAULT_EXAGGERATION).to_string(),
            reviewer: RoleTemplate::parse("reviewer.txt", get("reviewer.txt", DEFAULT_REVIEWER))?,
            chair: RoleTemplate::parse("chair.txt", get("chair.txt", DEFAULT_CHAIR))?,
            answer_question: get("answer_question.txt", DEFAULT_ANSWER_QUESTION).to_string(),
            questions,
        };
        // Render every template once so placeholder typos fail at load time.
        set.try_format_prompt("x", "x")?;
        set.try_exaggeration_prompt("x")?;
        set.try_answer_prompt("x", "x", "x")?;
        set.role_bundle(Role::Reviewer, &["x".to_string(), "y".to_string()], 1)?;
        set.role_bundle(Role::Chair, &["x".to_string(), "y".to_string()], 1)?;
        Ok(set)
    }

    pub fn questions(&self) -> &[CriterionQuestion] {
        &self.questions
    }

    pub fn criterion_ids(&self) -> Vec<u8> {
        self.questions.iter().map(|q| q.criterion_id).collect()
    }

    fn try_format_prompt(&self, template_description: &str, image_ref: &str) -> Result<String, PromptError> {
        render_template(
            "format_check.txt",
            &self.format_check,
            &[("templatestr", template_description), ("image_ref", image_ref)],
        )
    }

    fn try_exaggeration_prompt(&self, abstract_text: &str) -> Result<String, PromptError> {
        render_template("exaggeration.txt", &self.exaggeration, &[("abstract", abstract_text)])
    }

    fn try_answer_prompt(&self, title: &str, question: &str, context: &str) -> Result<String, PromptError> {
        render_template(
            "answer_question.txt",
            &self.answer_question,
            &[("title", title), ("question", question), ("context", context)],
        )
    }

    pub fn format_prompt(&self, template_description: &str, image_ref: &str) -> String {
        self.try_format_prompt(template_description, image_ref)
            .expect("validated on load")
    }

    pub fn exaggeration_prompt(&self, abstract_text: &str) -> String {
        self.try_exaggeration_prompt(abstract_text).expect("validated on load")
    }

    /// Single-question prompt used by the ablation probe.
    pub fn answer_prompt(&self, title: &str, question: &str, context: &str) -> String {
        self.try_answer_prompt(title, question, context).expect("validated on load")
    }

    pub fn reviewer_prompt(&self, titles: &[String], advance_quota: usize) -> Result<PromptBundle, PromptError> {
        self.role_bundle(Role::Reviewer, titles, advance_quota)
    }

    pub fn chair_prompt(&self, titles: &[String], final_quota: usize) -> Result<PromptBundle, PromptError> {
        self.role_bundle(Role::Chair, titles, final_quota)
    }

    fn role_bundle(&self, role: Role, titles: &[String], quota: usize) -> Result<PromptBundle, PromptError> {
        render_role_prompt(
            role,
            match role {
                Role::Reviewer => &self.reviewer,
                Role::Chair => &self.chair,
            },
            titles,
            &self.questions,
            quota,
        )
    }
}

fn check_quota(batch: usize, quota: usize) -> Result<(), PromptError> {
    if batch == 0 {
        return Err(PromptError::EmptyBatch);
    }
    if quota == 0 {
        return Err(PromptError::ZeroQuota);
    }
    if (batch == 1 && quota > 1) || (batch > 1 && quota >= batch) {
        return Err(PromptError::QuotaTooLarge { quota, batch });
    }
    Ok(())
}

fn render_role_prompt(
    role: Role,
    template: &RoleTemplate,
    titles: &[String],
    questions: &[CriterionQuestion],
    quota: usize,
) -> Result<PromptBundle, PromptError> {
    check_quota(titles.len(), quota)?;
    let criteria = questions
        .iter()
        .map(|q| format!("{}. {}", q.criterion_id, q.criterion_text))
        .collect::<Vec<_>>()
        .join("\n");
    let mut rendered_questions = Vec::new();
    for title in titles {
        rendered_questions.push(format!("Questions for '{title}':"));
        for q in questions {
            rendered_questions.push(format!("Q{}: {}", q.criterion_id, q.render(title)));
        }
    }
    let rendered_questions = rendered_questions.join("\n");
    let quota_s = quota.to_string();
    let count_s = questions.len().to_string();
    let vars = [
        ("criteria", criteria.as_str()),
        ("questions", rendered_questions.as_str()),
        ("quota", quota_s.as_str()),
        ("criteria_count", count_s.as_str()),
    ];
    let name = format!("{role}.txt");
    let system_text = render_template(&name, &template.system, &vars)?;
    let step_texts = template
        .steps
        .iter()
        .map(|s| render_template(&name, s, &vars))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PromptBundle {
        role,
        system_text,
        step_texts,
        paper_titles: titles.to_vec(),
    })
}

/// The format-check prompt with the built-in template.
pub fn render_format_prompt(template_description: &str, image_ref: &str) -> String {
    PromptSet::builtin().format_prompt(template_description, image_ref)
}

pub fn render_reviewer_prompt(
    batch_titles: &[String],
    questions: &[CriterionQuestion],
    advance_quota: usize,
) -> Result<PromptBundle, PromptError> {
    render_role_prompt(Role::Reviewer, &PromptSet::builtin().reviewer, batch_titles, questions, advance_quota)
}

pub fn render_chair_prompt(
    advanced_titles: &[String],
    questions: &[CriterionQuestion],
    final_quota: usize,
) -> Result<PromptBundle, PromptError> {
    render_role_prompt(Role::Chair, &PromptSet::builtin().chair, advanced_titles, questions, final_quota)
}

pub fn render_exaggeration_prompt(abstract_text: &str) -> String {
    PromptSet::builtin().exaggeration_prompt(abstract_text)
}

/// A review score in hundredths, 0.00 to 100.00.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Score(u32);

impl Score {
    pub const MAX: Score = Score(10_000);

    pub fn from_hundredths(h: u32) -> Option<Score> {
        (h <= 10_000).then_some(Score(h))
    }

    pub fn hundredths(self) -> u32 {
        self.0
    }

    pub fn as_decimal(self) -> Decimal {
        Decimal::new(self.0 as i64, 2)
    }

    /// Quantizes half-up to two places; `None` if outside 0..=100.
    pub fn from_decimal(d: Decimal) -> Option<Score> {
        let q = d.round_dp_with_strategy(2, RoundingStrategy::MidpointAwayFromZero);
        if q.is_sign_negative() && !q.is_zero() {
            return None;
        }
        let h = (q * Decimal::ONE_HUNDRED).trunc();
        let h: u32 = h.try_into().ok()?;
        Score::from_hundredths(h)
    }

    fn parse_literal(s: &str) -> Option<Decimal> {
        let s = s.trim();
        Decimal::from_str(s).ok().or_else(|| Decimal::from_scientific(s).ok())
    }

    fn as_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

impl Serialize for Score {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Score {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Score;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a score between 0 and 100")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Score, E> {
                let d = Score::parse_literal(&v.to_string()).ok_or_else(|| E::custom("bad score"))?;
                Score::from_decimal(d).ok_or_else(|| E::custom(format!("score {v} out of range")))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Score, E> {
                Score::from_decimal(Decimal::from(v)).ok_or_else(|| E::custom(format!("score {v} out of range")))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Score, E> {
                Score::from_decimal(Decimal::from(v)).ok_or_else(|| E::custom(format!("score {v} out of range")))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Score, E> {
                let d = Score::parse_literal(v).ok_or_else(|| E::custom("bad score"))?;
                Score::from_decimal(d).ok_or_else(|| E::custom(format!("score {v} out of range")))
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionAnswer {
    pub criterion_id: u8,
    pub answer: String,
    pub justification: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewOutcome {
    pub paper_id: String,
    pub title: String,
    pub answers: Vec<CriterionAnswer>,
    pub comments: String,
    pub score: Score,
    pub score_rationale: String,
}

/// A paper the reply is expected to cover.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpectedPaper {
    pub paper_id: String,
    pub title: String,
}

impl ExpectedPaper {
    pub fn new(paper_id: impl Into<String>, title: impl Into<String>) -> Self {
        Self {
            paper_id: paper_id.into(),
            title: title.into(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct ReplyItem {
    title: String,
    review: String,
    score: Box<RawValue>,
    score_rationale: String,
    answers: Vec<CriterionAnswer>,
}

#[derive(Serialize)]
struct ReplyItemOut<'a> {
    title: &'a str,
    review: &'a str,
    score: Score,
    score_rationale: &'a str,
    answers: &'a [CriterionAnswer],
}

/// Serializes outcomes into the reply grammar the reviewer prompt asks for.
pub fn render_reply(outcomes: &[ReviewOutcome]) -> String {
    let items: Vec<ReplyItemOut<'_>> = outcomes
        .iter()
        .map(|o| ReplyItemOut {
            title: &o.title,
            review: &o.comments,
            score: o.score,
            score_rationale: &o.score_rationale,
            answers: &o.answers,
        })
        .collect();
    serde_json::to_string_pretty(&items).expect("reply items serialize")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedReply {
    pub outcomes: Vec<ReviewOutcome>,
    /// Whether the lenient repair pass was needed.
    pub repaired: bool,
}

pub fn parse_review_reply(
    reply_text: &str,
    expected: &[ExpectedPaper],
    criterion_ids: &[u8],
) -> Result<Vec<ReviewOutcome>, PromptError> {
    parse_review_reply_detailed(reply_text, expected, criterion_ids).map(|p| p.outcomes)
}

/// Parses the reply grammar, trying one repair pass (code fences, leading
/// or trailing prose, trailing commas) before giving up. Outcomes follow
/// the order of `expected`.
pub fn parse_review_reply_detailed(
    reply_text: &str,
    expected: &[ExpectedPaper],
    criterion_ids: &[u8],
) -> Result<ParsedReply, PromptError> {
    let (items, repaired) = match serde_json::from_str::<Vec<ReplyItem>>(reply_text.trim()) {
        Ok(items) => (items, false),
        Err(first) => {
            let fixed = repair_reply(reply_text);
            let items = serde_json::from_str::<Vec<ReplyItem>>(&fixed)
                .map_err(|e| PromptError::MalformedReply(format!("{first}; after repair: {e}")))?;
            (items, true)
        }
    };
    let mut by_title: HashMap<String, &ReplyItem> = HashMap::new();
    for item in &items {
        by_title.entry(title_key(&item.title)).or_insert(item);
    }
    let mut outcomes = Vec::with_capacity(expected.len());
    for exp in expected {
        let item = by_title
            .get(&title_key(&exp.title))
            .ok_or_else(|| PromptError::MissingPaper(exp.title.clone()))?;
        let raw = item.score.get();
        let literal = raw.trim().trim_matches('"');
        let value = Score::parse_literal(literal)
            .ok_or_else(|| PromptError::MalformedReply(format!("score {raw} for '{}' is not a number", exp.title)))?;
        let score = Score::from_decimal(value).ok_or_else(|| PromptError::ScoreOutOfRange {
            title: exp.title.clone(),
            value: literal.to_string(),
        })?;
        let mut answers = Vec::with_capacity(criterion_ids.len());
        for &cid in criterion_ids {
            let a = item
                .answers
                .iter()
                .find(|a| a.criterion_id == cid)
                .ok_or_else(|| PromptError::MalformedReply(format!("no answer to criterion {cid} for '{}'", exp.title)))?;
            if a.answer.trim().is_empty() || is_non_answer(&a.answer) {
                return Err(PromptError::MalformedReply(format!(
                    "criterion {cid} for '{}' has no substantive answer",
                    exp.title
                )));
            }
            answers.push(a.clone());
        }
        outcomes.push(ReviewOutcome {
            paper_id: exp.paper_id.clone(),
            title: exp.title.clone(),
            answers,
            comments: item.review.clone(),
            score,
            score_rationale: item.score_rationale.clone(),
        });
    }
    Ok(ParsedReply { outcomes, repaired })
}

fn title_key(title: &str) -> String {
    normalize_whitespace(title).to_lowercase()
}

fn is_non_answer(answer: &str) -> bool {
    let a = answer.trim().trim_end_matches(['.', '!']).replace('\u{2019}', "'");
    a.eq_ignore_ascii_case("i don't know") || a.eq_ignore_ascii_case("i do not know")
}

/// Strips code fences and surrounding prose, then drops trailing commas
/// before `]` or `}` outside of strings. Fences count only at the start of
/// a line; JSON strings cannot hold raw newlines, so backticks inside
/// values are left alone.
fn repair_reply(text: &str) -> String {
    let mut body = text.trim();
    let fences: Vec<(usize, usize)> = body
        .split_inclusive('\n')
        .scan(0, |pos, line| {
            let start = *pos;
            *pos += line.len();
            Some((start, *pos, line))
        })
        .filter(|(_, _, line)| line.trim_start().starts_with("```"))
        .map(|(start, end, _)| (start, end))
        .collect();
    if let Some(&(_, open_end)) = fences.first() {
        body = match fences.last() {
            Some(&(close_start, _)) if fences.len() > 1 => &body[open_end..close_start],
            _ => &body[open_end..],
        };
    }
    if let (Some(a), Some(b)) = (body.find('['), body.rfind(']')) {
        if a < b {
            body = &body[a..=b];
        }
    }
    let mut out = String::with_capacity(body.len());
    let chars: Vec<char> = body.chars().collect();
    let mut in_string = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => {
                in_string = true;
                out.push(c);
            }
            ',' => {
                let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
                if !matches!(next, Some(']') | Some('}')) {
                    out.push(c);
                }
            }
            _ => out.push(c),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn titles(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("Paper Title {i}")).collect()
    }

    #[test]
    fn format_prompt_substitutes_both_slots() {
        let p = render_format_prompt("T", "img/p1.jpg");
        assert!(p.contains("<img src=\"img/p1.jpg\">"));
        assert!(p.ends_with("At last, just need to reply YES or NO."));
        assert!(p.starts_with("This is the standard template for papers.\nT\n"));
        assert_eq!(p, render_format_prompt("T", "img/p1.jpg"));
        let big = "x".repeat(10 * 1024);
        assert!(render_format_prompt(&big, "a.jpg").contains(&big));
    }

    #[test]
    fn exaggeration_prompt_is_single_pass() {
        let p = render_exaggeration_prompt("X");
        assert!(p.contains("This is an abstract of a paper:X\n"));
        assert!(p.ends_with("do not involve specific data."));
        let braces = render_exaggeration_prompt("{abstract} and {{x}}");
        assert!(braces.contains("paper:{abstract} and {{x}}\n"));
    }

    #[test]
    fn template_escapes_and_unknowns() {
        assert_eq!(render_template("t", "{{a}} {a}", &[("a", "1")]).unwrap(), "{a} 1");
        assert!(matches!(
            render_template("t", "{missing}", &[]),
            Err(PromptError::UnknownPlaceholder { .. })
        ));
        assert_eq!(render_template("t", "{\"json\": 1}", &[]).unwrap(), "{\"json\": 1}");
    }

    #[test]
    fn reviewer_prompt_has_all_questions() {
        let set = PromptSet::builtin();
        let b = render_reviewer_prompt(&titles(3), set.questions(), 2).unwrap();
        assert_eq!(b.role, Role::Reviewer);
        assert_eq!(b.step_texts.len(), 7);
        let step2 = &b.step_texts[1];
        let question_lines: Vec<&str> = step2.lines().filter(|l| l.starts_with('Q') && l.contains(": ")).collect();
        assert_eq!(question_lines.len(), 24);
        for t in titles(3) {
            assert_eq!(question_lines.iter().filter(|l| l.contains(&format!("'{t}'"))).count(), 8);
            assert!(b.render().matches(&t).count() >= 8);
        }
        for c in set.questions() {
            assert!(step2.contains(&c.criterion_text));
        }
        assert!(b.step_texts[4].contains("from 0 to 100, with precision up to two decimal places"));
        assert!(b.step_texts[4].contains("the 2 highest-scoring"));
        assert!(b.step_texts[6].contains("\"score_rationale\""));
    }

    #[test]
    fn quota_rules() {
        let q = PromptSet::builtin().questions();
        assert!(matches!(
            render_reviewer_prompt(&titles(3), q, 3),
            Err(PromptError::QuotaTooLarge { quota: 3, batch: 3 })
        ));
        assert!(render_reviewer_prompt(&titles(1), q, 1).unwrap().step_texts.len() == 7);
        assert!(matches!(render_chair_prompt(&[], q, 1), Err(PromptError::EmptyBatch)));
    }

    #[test]
    fn chair_prompt_role_and_determinism() {
        let q = PromptSet::builtin().questions();
        let a = render_chair_prompt(&titles(4), q, 2).unwrap();
        assert_eq!(a.role, Role::Chair);
        assert!(a.system_text.contains("chair"));
        assert!(!a.system_text.contains("reviewer for"));
        assert_eq!(a, render_chair_prompt(&titles(4), q, 2).unwrap());
    }

    #[test]
    fn builtin_criteria_are_verbatim() {
        let q = PromptSet::builtin().questions();
        assert_eq!(q.len(), 8);
        assert_eq!(q[1].criterion_text, "The paper should have a complete structure.");
        assert_eq!(
            q[0].render("Gossip Protocols for Sparse Meshes"),
            "Does the paper 'Gossip Protocols for Sparse Meshes' have a strong research background and address an important question?"
        );
    }

    #[test]
    fn no_unresolved_placeholders() {
        let re = regex::Regex::new(r"\{[a-z_]+\}").unwrap();
        let set = PromptSet::builtin();
        let b = set.reviewer_prompt(&titles(2), 1).unwrap().render();
        assert!(!re.is_match(&b), "{b}");
        assert!(!re.is_match(&set.chair_prompt(&titles(2), 1).unwrap().render()));
        assert!(!re.is_match(&set.format_prompt("t", "i")));
        assert!(!re.is_match(&set.answer_prompt("t", "q", "c")));
    }

    #[test]
    fn template_dir_overrides() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("criteria.txt"), "Only one.\n").unwrap();
        std::fs::write(dir.path().join("questions.txt"), "Is '{title}' good?\n").unwrap();
        let set = PromptSet::from_dir(dir.path()).unwrap();
        assert_eq!(set.criterion_ids(), vec![1]);
        std::fs::write(dir.path().join("questions.txt"), "No title here?\n").unwrap();
        assert!(PromptSet::from_dir(dir.path()).is_err());
    }

    fn outcome(id: &str, title: &str, score: u32) -> ReviewOutcome {
        ReviewOutcome {
            paper_id: id.into(),
            title: title.into(),
            answers: (1..=8)
                .map(|c| CriterionAnswer {
                    criterion_id: c,
                    answer: format!("yes {c}"),
                    justification: "because".into(),
                })
                .collect(),
            comments: "fine".into(),
            score: Score::from_hundredths(score).unwrap(),
            score_rationale: "ok".into(),
        }
    }

    fn expected(outcomes: &[ReviewOutcome]) -> Vec<ExpectedPaper> {
        outcomes.iter().map(|o| ExpectedPaper::new(&o.paper_id, &o.title)).collect()
    }

    const IDS: [u8; 8] = [1, 2, 3, 4, 5, 6, 7, 8];

    #[test]
    fn happy_path_follows_expected_order() {
        let outs = vec![outcome("a", "A", 9100), outcome("b", "B", 8550), outcome("c", "C", 0)];
        let reply = render_reply(&[outs[2].clone(), outs[0].clone(), outs[1].clone()]);
        let parsed = parse_review_reply_detailed(&reply, &expected(&outs), &IDS).unwrap();
        assert_eq!(parsed.outcomes, outs);
        assert!(!parsed.repaired);
    }

    #[test]
    fn out_of_range_scores() {
        let outs = vec![outcome("a", "A", 100)];
        let reply = render_reply(&outs).replace("1.0", "101");
        assert!(matches!(
            parse_review_reply(&reply, &expected(&outs), &IDS),
            Err(PromptError::ScoreOutOfRange { .. })
        ));
        let reply = render_reply(&outs).replace("1.0", "100.005");
        assert!(matches!(
            parse_review_reply(&reply, &expected(&outs), &IDS),
            Err(PromptError::ScoreOutOfRange { value, .. }) if value == "100.005"
        ));
        let reply = render_reply(&outs).replace("1.0", "99.995");
        assert_eq!(parse_review_reply(&reply, &expected(&outs), &IDS).unwrap()[0].score.to_string(), "100.00");
        let reply = render_reply(&outs).replace("1.0", "85.125");
        assert_eq!(parse_review_reply(&reply, &expected(&outs), &IDS).unwrap()[0].score.to_string(), "85.13");
    }

    #[test]
    fn fenced_reply_is_repaired() {
        let outs = vec![outcome("a", "A", 7000), outcome("b", "B", 6000)];
        let fenced = format!("Here you go:\n```json\n{}\n```\nThanks", render_reply(&outs));
        let parsed = parse_review_reply_detailed(&fenced, &expected(&outs), &IDS).unwrap();
        assert!(parsed.repaired);
        assert_eq!(parsed.outcomes, outs);
        let trailing = render_reply(&outs).replace("\n  }\n]", "\n  },\n]");
        assert!(parse_review_reply_detailed(&trailing, &expected(&outs), &IDS).unwrap().repaired);
    }

    #[test]
    fn backticks_inside_values_survive_repair() {
        let mut outs = vec![outcome("a", "A", 7000)];
        outs[0].comments = "see ```code``` and\n```more```".into();
        let fenced = format!("```json\n{}\n```", render_reply(&outs));
        assert_eq!(parse_review_reply(&fenced, &expected(&outs), &IDS).unwrap(), outs);
    }

    #[test]
    fn missing_and_unusable_answers() {
        let outs = vec![outcome("a", "A", 7000)];
        assert!(matches!(
            parse_review_reply(&render_reply(&outs), &[ExpectedPaper::new("z", "Z")], &IDS),
            Err(PromptError::MissingPaper(t)) if t == "Z"
        ));
        let mut bad = outs.clone();
        bad[0].answers[3].answer = "I don't know.".into();
        assert!(matches!(
            parse_review_reply(&render_reply(&bad), &expected(&outs), &IDS),
            Err(PromptError::MalformedReply(_))
        ));
        let mut bad = outs.clone();
        bad[0].answers.pop();
        assert!(parse_review_reply(&render_reply(&bad), &expected(&outs), &IDS).is_err());
        assert!(matches!(
            parse_review_reply("not json at all", &expected(&outs), &IDS),
            Err(PromptError::MalformedReply(_))
        ));
    }

    #[test]
    fn score_serde() {
        let s = Score::from_hundredths(8550).unwrap();
        assert_eq!(serde_json::to_string(&s).unwrap(), "85.5");
        assert_eq!(serde_json::from_str::<Score>("85.5").unwrap(), s);
        assert_eq!(serde_json::from_str::<Score>("\"85.50\"").unwrap(), s);
        assert!(serde_json::from_str::<Score>("100.01").is_err());
    }

    fn text() -> impl Strategy<Value = String> {
        "[A-Za-z0-9 ,.\"'{}\\[\\]\\\\\n-]{0,40}".prop_map(|s| format!("t{s}"))
    }

    proptest! {
        #[test]
        fn reply_round_trip(
            items in proptest::collection::vec((text(), text(), text(), 0u32..=10_000, proptest::collection::vec((text(), text()), 8)), 1..5)
        ) {
            let outs: Vec<ReviewOutcome> = items
                .into_iter()
                .enumerate()
                .map(|(i, (review, rationale, _t, score, answers))| ReviewOutcome {
                    paper_id: format!("p{i}"),
                    title: format!("Title {i}"),
                    answers: answers
                        .into_iter()
                        .enumerate()
                        .map(|(c, (a, j))| CriterionAnswer { criterion_id: c as u8 + 1, answer: a, justification: j })
                        .collect(),
                    comments: review,
                    score: Score::from_hundredths(score).unwrap(),
                    score_rationale: rationale,
                })
                .collect();
            let parsed = parse_review_reply_detailed(&render_reply(&outs), &expected(&outs), &IDS).unwrap();
            prop_assert!(!parsed.repaired);
            prop_assert_eq!(parsed.outcomes, outs);
        }
    }
}
