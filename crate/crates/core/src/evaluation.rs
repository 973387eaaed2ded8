//! Decision metrics, run reports, and the two robustness probes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{accumulate_cost, CallError, CompletionRequest, Pricing, Usage};
use crate::config::{Config, SimilarityMetric};
use crate::corpus::{inject_sentence, make_variant, Corpus, CorpusError, PaperRecord, SectionKind, VariantKind};
use crate::pipeline::decision::FinalDecision;
use crate::pipeline::partition::BatchAssignment;
use crate::pipeline::{review_batch, Deps, PipelineError, ReviewEnv};
use crate::prompts::{Role, Score};
use crate::retrieval::{assemble_context, IsolatedIndex, RetrievalError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference set is empty")]
    EmptyReference,
    #[error("no scores to average")]
    EmptyList,
    #[error("paper lacks a {0} section")]
    MissingSection(SectionKind),
    #[error("trials must be at least 1")]
    InvalidTrials,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// An exact ratio `hits / total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Similarity {
    pub hits: usize,
    pub total: usize,
}

impl Similarity {
    pub fn fraction(&self) -> Decimal {
        Decimal::from(self.hits) / Decimal::from(self.total)
    }

    pub fn as_f64(&self) -> f64 {
        self.hits as f64 / self.total as f64
    }

    /// Percentage with two decimals, e.g. `50.00%`.
    pub fn percent(&self) -> String {
        format_percent(self.fraction())
    }
}

pub fn format_percent(fraction: Decimal) -> String {
    let p = (fraction * Decimal::ONE_HUNDRED).round_dp_with_strategy(2, RoundingStrategy::MidpointAwayFromZero);
    format!("{p:.2}%")
}

/// `|selected ∩ reference| / |reference|`.
pub fn overlap_similarity(selected: &BTreeSet<String>, reference: &BTreeSet<String>) -> Result<Similarity, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    Ok(Similarity {
        hits: selected.intersection(reference).count(),
        total: reference.len(),
    })
}

/// `|selected ∩ reference| / |selected ∪ reference|`.
pub fn jaccard_similarity(selected: &BTreeSet<String>, reference: &BTreeSet<String>) -> Result<Similarity, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    Ok(Similarity {
        hits: selected.intersection(reference).count(),
        total: selected.union(reference).count(),
    })
}

pub fn similarity(metric: SimilarityMetric, selected: &BTreeSet<String>, reference: &BTreeSet<String>) -> Result<Similarity, EvalError> {
    match metric {
        SimilarityMetric::Overlap => overlap_similarity(selected, reference),
        SimilarityMetric::Jaccard => jaccard_similarity(selected, reference),
    }
}

/// Exact arithmetic mean.
pub fn mean_score(scores: &[Decimal]) -> Result<Decimal, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptyList);
    }
    let sum: Decimal = scores.iter().sum();
    Ok((sum / Decimal::from(scores.len())).normalize())
}

/// One decimal place, half away from zero.
pub fn display_mean(mean: Decimal) -> String {
    let m = mean.round_dp_with_strategy(1, RoundingStrategy::MidpointAwayFromZero);
    format!("{m:.1}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchStat {
    pub batch_id: usize,
    pub papers: usize,
    pub advanced: usize,
    pub usage: Usage,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub metric: SimilarityMetric,
    pub first_round: Option<Similarity>,
    pub final_similarity: Similarity,
    #[serde(with = "rust_decimal::serde::str")]
    pub wall_time_hours: Decimal,
    #[serde(with = "rust_decimal::serde::str")]
    pub cost_usd: Decimal,
    pub usage: Usage,
    pub per_batch: Vec<BatchStat>,
}

pub fn summarize_run(
    decision: &FinalDecision,
    reference_first_round: Option<&BTreeSet<String>>,
    reference_final: &BTreeSet<String>,
    pricing: &Pricing,
    metric: SimilarityMetric,
) -> Result<RunReport, EvalError> {
    let final_similarity = similarity(metric, &decision.accepted_ids, reference_final)?;
    let first_round = reference_first_round
        .map(|r| similarity(metric, &decision.first_round_ids, r))
        .transpose()?;
    Ok(RunReport {
        run_id: decision.run_id.clone(),
        metric,
        first_round,
        final_similarity,
        wall_time_hours: Decimal::from(decision.totals.wall_time_ms) / Decimal::from(3_600_000),
        cost_usd: accumulate_cost(&[decision.totals.usage], pricing),
        usage: decision.totals.usage,
        per_batch: decision
            .batches
            .iter()
            .map(|b| BatchStat {
                batch_id: b.batch_id,
                papers: b.paper_ids.len(),
                advanced: b.advanced_ids.len(),
                usage: b.usage,
                wall_time_ms: b.wall_time_ms,
            })
            .collect(),
    })
}

/// Column means over several runs, as in an "Average" table row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportAverage {
    pub runs: usize,
    #[serde(with = "rust_decimal::serde::str_option")]
    pub first_round_similarity: Option<Decimal>,
    #[serde(with = "rust_decimal::serde::str")]
    pub final_similarity: Decimal,
    #[serde(with = "rust_decimal::serde::str")]
    pub wall_time_hours: Decimal,
    #[serde(with = "rust_decimal::serde::str")]
    pub cost_usd: Decimal,
}

pub fn average_reports(reports: &[RunReport]) -> Result<ReportAverage, EvalError> {
    let col = |f: &dyn Fn(&RunReport) -> Decimal| mean_score(&reports.iter().map(f).collect::<Vec<_>>());
    let first: Option<Vec<Decimal>> = reports.iter().map(|r| r.first_round.map(|s| s.fraction())).collect();
    Ok(ReportAverage {
        runs: reports.len(),
        first_round_similarity: first.map(|v| mean_score(&v)).transpose()?,
        final_similarity: col(&|r| r.final_similarity.fraction())?,
        wall_time_hours: col(&|r| r.wall_time_hours)?,
        cost_usd: col(&|r| r.cost_usd)?.round_dp_with_strategy(2, RoundingStrategy::MidpointAwayFromZero),
    })
}

/// Plain-text table of runs with an average row.
pub fn render_run_table(reports: &[RunReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<20} {:>20} {:>16} {:>12} {:>10}",
        "Run", "FirstRoundSimilarity", "FinalSimilarity", "Time(hour)", "Cost(USD)"
    );
    let row = |out: &mut String, name: &str, first: Option<Decimal>, fin: Decimal, hours: Decimal, cost: Decimal| {
        let _ = writeln!(
            out,
            "{:<20} {:>20} {:>16} {:>12} {:>10}",
            name,
            first.map(format_percent).unwrap_or_else(|| "-".into()),
            format_percent(fin),
            format!("{:.2}", hours.round_dp_with_strategy(2, RoundingStrategy::MidpointAwayFromZero)),
            format!("{cost:.2}"),
        );
    };
    for r in reports {
        row(
            &mut out,
            &r.run_id,
            r.first_round.map(|s| s.fraction()),
            r.final_similarity.fraction(),
            r.wall_time_hours,
            r.cost_usd,
        );
    }
    if reports.len() > 1 {
        if let Ok(avg) = average_reports(reports) {
            row(&mut out, "Average", avg.first_round_similarity, avg.final_similarity, avg.wall_time_hours, avg.cost_usd);
        }
    }
    out
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "does", "for", "from", "has", "have", "in", "is", "it", "its",
    "of", "on", "or", "that", "the", "this", "to", "was", "were", "which", "with",
];

fn content_words(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect()
}

/// Jaccard index of lowercased content-word sets; two empty texts score 1.
pub fn answer_similarity(a: &str, b: &str) -> f64 {
    let (x, y) = (content_words(a), content_words(b));
    let union = x.union(&y).count();
    if union == 0 {
        return 1.0;
    }
    x.intersection(&y).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum VariantStatus {
    Ok,
    MissingSection { section: SectionKind },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionAnswer {
    pub criterion_id: u8,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsolationAudit {
    pub chunks_checked: usize,
    /// Chunks that did not come from this variant's own text.
    pub leaked: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantAnswers {
    pub variant: VariantKind,
    pub status: VariantStatus,
    pub answers: Vec<QuestionAnswer>,
    pub audit: IsolationAudit,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSimilarity {
    pub a: VariantKind,
    pub b: VariantKind,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub paper_id: String,
    pub variants: Vec<VariantAnswers>,
    pub pairwise: Vec<PairSimilarity>,
}

impl AblationReport {
    pub fn pair(&self, a: VariantKind, b: VariantKind) -> Option<f64> {
        self.pairwise
            .iter()
            .find(|p| (p.a == a && p.b == b) || (p.a == b && p.b == a))
            .map(|p| p.similarity)
    }

    pub fn variant(&self, kind: VariantKind) -> Option<&VariantAnswers> {
        self.variants.iter().find(|v| v.variant == kind)
    }
}

fn ask_variant(variant: &PaperRecord, title: &str, deps: &Deps, config: &Config) -> Result<VariantAnswers, EvalError> {
    let r = &config.retrieval;
    let index = IsolatedIndex::new(deps.embedder.dimension());
    index.index_paper(variant, deps.embedder.as_ref(), r.chunk_size, r.overlap)?;
    let own_texts: Vec<String> = variant.sections.iter().map(|s| s.text()).collect();
    let mut audit = IsolationAudit {
        chunks_checked: 0,
        leaked: 0,
    };
    let mut answers = Vec::new();
    let mut usage = Usage::default();
    for q in deps.prompts.questions() {
        let question = q.render(title);
        let hits = index.retrieve(&variant.paper_id, &question, r.k, deps.embedder.as_ref())?;
        for h in &hits {
            audit.chunks_checked += 1;
            if h.entry.paper_id != variant.paper_id || !own_texts.iter().any(|t| t.contains(&h.entry.text)) {
                audit.leaked += 1;
            }
        }
        let context = assemble_context(&hits, r.context_budget);
        let prompt = deps.prompts.answer_prompt(title, &question, &context);
        let request = CompletionRequest::new(prompt, format!("ablation-{}-q{}", variant.paper_id, q.criterion_id));
        let out = deps.caller.call(&request, |text| {
            let t = text.trim();
            if t.is_empty() {
                Err(CallError::Ambiguous("empty answer".into()))
            } else {
                Ok(t.to_string())
            }
        });
        usage += out.usage;
        match out.value {
            Ok(answer) => answers.push(QuestionAnswer {
                criterion_id: q.criterion_id,
                question,
                answer,
            }),
            Err(e) => {
                return Ok(VariantAnswers {
                    variant: VariantKind::Full,
                    status: VariantStatus::Failed {
                        error: PipelineError::from_call(e).to_string(),
                    },
                    answers,
                    audit,
                    usage,
                })
            }
        }
    }
    Ok(VariantAnswers {
        variant: VariantKind::Full,
        status: VariantStatus::Ok,
        answers,
        audit,
        usage,
    })
}

/// Asks every criterion question against each content variant of `paper`,
/// each variant in its own fresh index, and compares the answers.
pub fn run_ablation(paper: &PaperRecord, deps: &Deps, config: &Config) -> Result<AblationReport, EvalError> {
    let mut variants = Vec::new();
    for kind in VariantKind::ALL {
        let va = match make_variant(paper, kind) {
            Ok(v) => VariantAnswers {
                variant: kind,
                ..ask_variant(&v, &paper.title, deps, config)?
            },
            Err(CorpusError::MissingSection(section)) => VariantAnswers {
                variant: kind,
                status: VariantStatus::MissingSection { section },
                answers: Vec::new(),
                audit: IsolationAudit {
                    chunks_checked: 0,
                    leaked: 0,
                },
                usage: Usage::default(),
            },
            Err(e) => return Err(e.into()),
        };
        variants.push(va);
    }
    let complete: Vec<&VariantAnswers> = variants.iter().filter(|v| v.status == VariantStatus::Ok).collect();
    let mut pairwise = Vec::new();
    for (i, a) in complete.iter().enumerate() {
        for b in &complete[i + 1..] {
            let by_id: BTreeMap<u8, &str> = b.answers.iter().map(|x| (x.criterion_id, x.answer.as_str())).collect();
            let sims: Vec<f64> = a
                .answers
                .iter()
                .filter_map(|x| by_id.get(&x.criterion_id).map(|y| answer_similarity(&x.answer, y)))
                .collect();
            let similarity = if sims.is_empty() { 0.0 } else { sims.iter().sum::<f64>() / sims.len() as f64 };
            pairwise.push(PairSimilarity {
                a: a.variant,
                b: b.variant,
                similarity,
            });
        }
    }
    Ok(AblationReport {
        paper_id: paper.paper_id.clone(),
        variants,
        pairwise,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExaggerationReport {
    pub paper_id: String,
    pub injected_sentence: String,
    pub original_scores: Vec<Score>,
    pub modified_scores: Vec<Score>,
    #[serde(with = "rust_decimal::serde::str")]
    pub original_mean: Decimal,
    #[serde(with = "rust_decimal::serde::str")]
    pub modified_mean: Decimal,
    #[serde(with = "rust_decimal::serde::str")]
    pub mean_delta: Decimal,
    pub usage: Usage,
}

fn score_single(paper: &PaperRecord, label: String, deps: &Deps, config: &Config) -> Result<(Score, Usage), EvalError> {
    let r = &config.retrieval;
    let corpus = Corpus::from_records(format!("probe-{}", paper.paper_id), vec![paper.clone()])?;
    let index = IsolatedIndex::new(deps.embedder.dimension());
    index.index_paper(paper, deps.embedder.as_ref(), r.chunk_size, r.overlap)?;
    let assignment = BatchAssignment {
        batch_id: 0,
        reviewer_label: label,
        paper_ids: vec![paper.paper_id.clone()],
        advance_quota: 1,
    };
    let env = ReviewEnv {
        corpus: &corpus,
        index: &index,
        deps,
        config,
        prior: None,
    };
    let result = review_batch(&assignment, Role::Reviewer, &env).map_err(|f| f.error)?;
    Ok((result.outcomes[0].score, result.usage))
}

/// Scores `paper` and an exaggerated copy `trials` times each.
pub fn run_exaggeration(paper: &PaperRecord, trials: usize, deps: &Deps, config: &Config) -> Result<ExaggerationReport, EvalError> {
    if trials == 0 {
        return Err(EvalError::InvalidTrials);
    }
    let abstract_text = paper
        .section(SectionKind::Abstract)
        .ok_or(EvalError::MissingSection(SectionKind::Abstract))?
        .body
        .trim()
        .to_string();
    if !paper.sections.has(SectionKind::Conclusion) {
        return Err(EvalError::MissingSection(SectionKind::Conclusion));
    }
    let pristine = paper.clone();
    let request = CompletionRequest::new(
        deps.prompts.exaggeration_prompt(&abstract_text),
        format!("exaggerate-{}", paper.paper_id),
    );
    let out = deps.caller.call(&request, |text| {
        let t = text.trim();
        if t.is_empty() {
            Err(CallError::Ambiguous("empty rewrite".into()))
        } else {
            Ok(t.to_string())
        }
    });
    let mut usage = out.usage;
    let reply = out.value.map_err(PipelineError::from_call)?;
    let sentence = match reply.strip_prefix(abstract_text.as_str()) {
        Some(rest) if !rest.trim().is_empty() => rest.trim().to_string(),
        _ => reply,
    };
    let targets: BTreeSet<SectionKind> = [SectionKind::Abstract, SectionKind::Conclusion].into_iter().collect();
    let modified = inject_sentence(&pristine, &sentence, &targets)?;

    let mut original_scores = Vec::with_capacity(trials);
    let mut modified_scores = Vec::with_capacity(trials);
    for t in 0..trials {
        let fresh = pristine.clone();
        let (s, u) = score_single(&fresh, format!("probe-original-{t}"), deps, config)?;
        original_scores.push(s);
        usage += u;
        let (s, u) = score_single(&modified, format!("probe-injected-{t}"), deps, config)?;
        modified_scores.push(s);
        usage += u;
    }
    debug_assert_eq!(&pristine, paper);
    let dec = |v: &[Score]| v.iter().map(|s| s.as_decimal()).collect::<Vec<_>>();
    let original_mean = mean_score(&dec(&original_scores))?;
    let modified_mean = mean_score(&dec(&modified_scores))?;
    Ok(ExaggerationReport {
        paper_id: paper.paper_id.clone(),
        injected_sentence: sentence,
        original_scores,
        modified_scores,
        original_mean,
        modified_mean,
        mean_delta: (modified_mean - original_mean).normalize(),
        usage,
    })
}

/// Plain-text table of both arms' trial scores and means.
pub fn render_score_table(report: &ExaggerationReport) -> String {
    let mut out = String::new();
    let n = report.original_scores.len();
    let _ = write!(out, "{:<10}", "Paper");
    for i in 1..=n {
        let _ = write!(out, " {:>8}", format!("Score{i}"));
    }
    let _ = writeln!(out, " {:>8}", "Average");
    for (name, scores, mean) in [
        ("Origin", &report.original_scores, report.original_mean),
        ("Changed", &report.modified_scores, report.modified_mean),
    ] {
        let _ = write!(out, "{name:<10}");
        for s in scores {
            let _ = write!(out, " {:>8}", s.as_decimal().normalize());
        }
        let _ = writeln!(out, " {:>8}", display_mean(mean));
    }
    out
}
