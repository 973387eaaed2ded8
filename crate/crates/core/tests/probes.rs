mod common;

use common::Fixture;
use paper_review::corpus::{SectionKind, VariantKind};
use paper_review::evaluation::{render_score_table, run_ablation, run_exaggeration, VariantStatus};
use rust_decimal::Decimal;
use serde_json::json;

const SAME: &str = "It proposes a scheduler that lowers latency under a fixed energy budget.";

#[test]
fn ablation_answers_agree_across_informative_variants() {
    let script = json!({
        "rules": [
            { "contains": "[p000#title_only/", "reply": "The excerpts only give the title." },
            { "contains": "[p000#title_abstract/", "reply": SAME },
            { "contains": "[p000#title_abstract_intro/", "reply": SAME },
            { "contains": "[p000#title_conclusion/", "reply": SAME },
            { "contains": "[p000#full/", "reply": SAME }
        ]
    });
    let fx = Fixture::new(2, 1, &script);
    let config = fx.config();
    let corpus = fx.corpus();
    let mock = fx.mock();
    let deps = common::deps(&config, &mock);
    let report = run_ablation(corpus.get("p000").unwrap(), &deps, &config).unwrap();

    let q = deps.prompts.questions().len();
    assert_eq!(mock.call_count(), 5 * q);
    for v in &report.variants {
        assert_eq!(v.status, VariantStatus::Ok, "{:?}", v.variant);
        assert_eq!(v.answers.len(), q);
        assert!(v.audit.chunks_checked > 0);
        assert_eq!(v.audit.leaked, 0, "{:?}", v.variant);
    }
    use VariantKind::*;
    for (a, b) in [(TitleAbstract, TitleAbstractIntro), (TitleAbstract, Full), (TitleAbstractIntro, Full)] {
        assert_eq!(report.pair(a, b), Some(1.0), "{a:?} {b:?}");
    }
    assert!(report.pair(TitleOnly, Full).unwrap() < 0.5);
    assert_eq!(report.pairwise.len(), 10);
}

#[test]
fn exaggeration_shifts_the_mean() {
    let fx = Fixture::new(2, 1, &json!({}));
    let corpus = fx.corpus();
    let paper = corpus.get("p000").unwrap();
    let abstract_text = paper.section(SectionKind::Abstract).unwrap().body.trim().to_string();
    let boast = "This groundbreaking framework dramatically outperforms every prior approach.";
    let script = json!({
        "rules": [
            { "contains": "Please add a sentence", "reply": format!("{abstract_text} {boast}") },
            { "contains": "[p000#injected/", "reply": { "sequence": [
                { "score": 85 }, { "score": 92 }, { "score": 92 }, { "score": 85 }, { "score": 88 } ] } },
            { "contains": "[p000/", "reply": { "sequence": [
                { "score": 85 }, { "score": 85 }, { "score": 87 }, { "score": 87 }, { "score": 85 } ] } }
        ]
    });
    std::fs::write(&fx.script_path, script.to_string()).unwrap();
    let config = fx.config();
    let mock = fx.mock();
    let deps = common::deps(&config, &mock);
    let before = paper.clone();
    let report = run_exaggeration(paper, 5, &deps, &config).unwrap();

    assert_eq!(paper, &before);
    assert_eq!(report.injected_sentence, boast);
    assert_eq!(mock.call_count(), 11);
    assert_eq!(report.original_mean, Decimal::new(858, 1));
    assert_eq!(report.modified_mean, Decimal::new(884, 1));
    assert_eq!(report.mean_delta, Decimal::new(26, 1));
    let table = render_score_table(&report);
    assert!(table.lines().any(|l| l.starts_with("Origin") && l.trim_end().ends_with("85.8")), "{table}");
    assert!(table.lines().any(|l| l.starts_with("Changed") && l.trim_end().ends_with("88.4")), "{table}");
}

#[test]
fn exaggeration_rejects_zero_trials() {
    let fx = Fixture::new(1, 1, &json!({}));
    let config = fx.config();
    let corpus = fx.corpus();
    let mock = fx.mock();
    let deps = common::deps(&config, &mock);
    assert!(run_exaggeration(corpus.get("p000").unwrap(), 0, &deps, &config).is_err());
    assert_eq!(mock.call_count(), 0);
}
