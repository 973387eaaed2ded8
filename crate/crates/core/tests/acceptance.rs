//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails or overruns its time limit.

mod common;

use std::collections::BTreeSet;
use std::panic::AssertUnwindSafe;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{deps, Fixture, FAVORED};
use paper_review::backend::{Clock, LimiterConfig, RateLimiter, Usage, VirtualClock};
use paper_review::config::SimilarityMetric;
use paper_review::corpus::{synthetic, SectionKind, VariantKind};
use paper_review::evaluation::{average_reports, format_percent, mean_score, run_ablation, run_exaggeration, RunReport, Similarity};
use paper_review::pipeline::partition::{partition, slice_sizes};
use paper_review::pipeline::{plan_run, run_pipeline, PipelineError, RunOptions};
use paper_review::prompts::{
    parse_review_reply, parse_review_reply_detailed, render_reply, CriterionAnswer, ExpectedPaper, PromptError,
    ReviewOutcome, Score,
};
use paper_review::retrieval::{mock_embed, ChunkEntry, IsolatedIndex, MockEmbedder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rust_decimal::Decimal;
use serde_json::json;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn criterion(name: &str, limit: Duration, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = std::panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let took = start.elapsed();
    let (ok, detail) = match outcome {
        Ok(d) if took <= limit => (true, d),
        Ok(d) => (false, format!("{d}; over time limit")),
        Err(e) => (false, e),
    };
    println!(
        "{} {name} [{:.3}s / limit {}s] {detail}",
        if ok { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        limit.as_secs()
    );
    ok
}

fn table_ii_arithmetic() -> Check {
    let arms: [([i64; 5], &str); 2] = [([85, 85, 87, 87, 85], "85.8"), ([85, 92, 92, 85, 88], "88.4")];
    let mut got = Vec::new();
    for (scores, want) in arms {
        // Oracle: integer sum, scaled by ten before the exact division by five.
        let tenths = scores.iter().sum::<i64>() * 10 / 5;
        let oracle = Decimal::new(tenths, 1);
        let mean = mean_score(&scores.map(Decimal::from)).map_err(|e| e.to_string())?;
        ensure(mean == oracle && mean.to_string() == want, || format!("mean {mean}, oracle {oracle}, want {want}"))?;
        got.push(mean.to_string());
    }
    Ok(format!("means {}", got.join(" / ")))
}

fn table_i_averaging() -> Check {
    let finals = ["35.08", "50.88", "38.6", "42.11", "26.32"];
    let reports: Vec<RunReport> = finals
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let hundredths: usize = (p.parse::<f64>().unwrap() * 100.0).round() as usize;
            RunReport {
                run_id: format!("run{}", i + 1),
                metric: SimilarityMetric::Overlap,
                first_round: None,
                final_similarity: Similarity {
                    hits: hundredths,
                    total: 10_000,
                },
                wall_time_hours: Decimal::ZERO,
                cost_usd: Decimal::ZERO,
                usage: Usage::default(),
                per_batch: Vec::new(),
            }
        })
        .collect();
    let avg = average_reports(&reports).map_err(|e| e.to_string())?;
    let shown = format_percent(avg.final_similarity);
    let oracle = finals.iter().map(|p| p.parse::<f64>().unwrap()).sum::<f64>() / finals.len() as f64;
    let value: f64 = shown.trim_end_matches('%').parse().unwrap();
    ensure((value - 38.60).abs() <= 0.005 && (oracle - 38.60).abs() <= 0.005, || {
        format!("report {shown}, oracle {oracle:.4}")
    })?;
    Ok(format!("average {shown} (oracle {oracle:.3}%)"))
}

fn run_fixture(concurrency: usize) -> Result<(String, usize, u64), String> {
    let fx = Fixture::twelve(concurrency);
    let config = fx.config();
    let mock = fx.mock();
    let d = deps(&config, &mock);
    let decision = run_pipeline(&fx.corpus(), &config, &d, &RunOptions::new("e2e", &fx.runs_dir)).map_err(|e| e.to_string())?;
    let on_disk = common::read(&fx.runs_dir.join("e2e").join("decision.json"));
    ensure(on_disk == decision.to_canonical_json(), || "decision.json is not canonical".into())?;
    let favored: BTreeSet<String> = FAVORED.iter().map(|s| s.to_string()).collect();
    ensure(decision.accepted_ids == favored, || format!("accepted {:?}", decision.accepted_ids))?;
    ensure(mock.peak_concurrency() <= concurrency, || "concurrency bound exceeded".into())?;
    Ok((on_disk, mock.call_count(), mock.unpermitted_calls()))
}

fn e2e_determinism() -> Check {
    let mut reference: Option<String> = None;
    let mut runs = 0;
    for c in [1, 4, 16] {
        for _ in 0..10 {
            let (json, calls, unpermitted) = run_fixture(c)?;
            ensure(unpermitted == 0, || format!("{unpermitted} calls without a permit"))?;
            ensure(calls == 5, || format!("{calls} backend calls"))?;
            match &reference {
                None => reference = Some(json),
                Some(r) => ensure(*r == json, || format!("decision differs at concurrency {c}"))?,
            }
            runs += 1;
        }
    }
    Ok(format!("{runs} runs byte-identical"))
}

fn resume_equivalence() -> Check {
    let (reference, total, _) = run_fixture(2)?;
    for k in 0..4 {
        let fx = Fixture::twelve(2);
        let config = fx.config();
        let corpus = fx.corpus();
        let mut opts = RunOptions::new("e2e", &fx.runs_dir);
        opts.halt_after_batches = Some(k);
        let first = fx.mock();
        match run_pipeline(&corpus, &config, &deps(&config, &first), &opts) {
            Err(PipelineError::Interrupted { checkpointed }) if checkpointed == k => {}
            other => return Err(format!("k={k}: expected interruption, got {:?}", other.map(|_| ())))?,
        }
        let second = fx.mock();
        let mut opts = RunOptions::new("e2e", &fx.runs_dir);
        opts.resume = true;
        let decision = run_pipeline(&corpus, &config, &deps(&config, &second), &opts).map_err(|e| e.to_string())?;
        let on_disk = common::read(&fx.runs_dir.join("e2e").join("decision.json"));
        ensure(on_disk == reference && decision.to_canonical_json() == reference, || {
            format!("k={k}: resumed decision differs")
        })?;
        ensure(second.call_count() == total - k, || {
            format!("k={k}: {} calls after resume, want {}", second.call_count(), total - k)
        })?;
    }
    Ok(format!("k=0..3 reproduce the decision, calls {total}-k"))
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn retrieval_isolation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut oracle_checked = 0;
    let mut returned = 0;
    for round in 0..1000 {
        let dim = rng.random_range(2..24);
        let index = IsolatedIndex::new(dim);
        let embedder = MockEmbedder::new(dim);
        let papers = rng.random_range(2..8);
        let mut total = 0;
        for p in 0..papers {
            let pid = format!("r{round}p{p}");
            let n = rng.random_range(1..40);
            let entries: Vec<ChunkEntry> = (0..n)
                .map(|i| ChunkEntry {
                    chunk_id: format!("{pid}:{i:05}"),
                    paper_id: pid.clone(),
                    section_kind: SectionKind::BodyOther,
                    text: format!("{pid} chunk {i}"),
                    vector: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                })
                .collect();
            total += n;
            index.replace(&pid, entries).map_err(|e| e.to_string())?;
        }
        let target = format!("r{round}p{}", rng.random_range(0..papers));
        let query = format!("query {round} {}", rng.random::<u32>());
        let k = rng.random_range(1..12);
        let hits = index.retrieve(&target, &query, k, &embedder).map_err(|e| e.to_string())?;
        let own = index.entries(&target).unwrap();
        returned += hits.len();
        ensure(hits.len() == k.min(own.len()), || format!("round {round}: {} hits for k={k}", hits.len()))?;
        for h in &hits {
            ensure(h.entry.paper_id == target && own.iter().any(|e| e.chunk_id == h.entry.chunk_id), || {
                format!("round {round}: chunk {} leaked into {target}", h.entry.chunk_id)
            })?;
        }
        if total <= 200 {
            let qv = mock_embed(&query, dim);
            let mut scan: Vec<(f64, String)> = own.iter().map(|e| (oracle_cosine(&qv, &e.vector), e.chunk_id.clone())).collect();
            scan.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
            scan.truncate(k);
            for (h, (s, id)) in hits.iter().zip(&scan) {
                ensure(h.entry.chunk_id == *id && (h.score - s).abs() < 1e-9, || {
                    format!("round {round}: got {} ({}), oracle {id} ({s})", h.entry.chunk_id, h.score)
                })?;
            }
            oracle_checked += 1;
        }
    }
    Ok(format!("1000 scoped queries, {returned} chunks, 0 leaked, {oracle_checked} indexes match the full scan"))
}

fn grants_for(schedule: &[Duration], capacity: u32, rate: f64) -> Result<Vec<Duration>, String> {
    let clock = Arc::new(VirtualClock::new());
    let cfg = LimiterConfig {
        capacity,
        refill_rate: rate,
        max_concurrency: 1,
    };
    let limiter = RateLimiter::new(&cfg, clock.clone() as Arc<dyn Clock>).map_err(|e| e.to_string())?;
    for &at in schedule {
        if at > clock.now() {
            clock.advance(at - clock.now());
        }
        drop(limiter.acquire().map_err(|e| e.to_string())?);
    }
    Ok(limiter.grants())
}

fn rate_limiter() -> Check {
    let trace = grants_for(&[Duration::ZERO; 5], 3, 1.0)?;
    let want = [0.0, 0.0, 0.0, 1.0, 2.0];
    ensure(
        trace.len() == 5 && trace.iter().zip(want).all(|(g, w)| (g.as_secs_f64() - w).abs() <= 0.05),
        || format!("trace {trace:?}"),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x11317);
    let mut grants_total = 0;
    for s in 0..10_000 {
        let capacity = rng.random_range(1..8u32);
        let rate = [0.5, 1.0, 2.0, 3.0, 7.5, 10.0][rng.random_range(0..6)];
        let n = rng.random_range(1..40);
        let mut t = 0u64;
        let schedule: Vec<Duration> = (0..n)
            .map(|_| {
                if rng.random_bool(0.6) {
                    t += rng.random_range(0..2_000_000_000u64);
                }
                Duration::from_nanos(t)
            })
            .collect();
        let g = grants_for(&schedule, capacity, rate)?;
        ensure(g.len() == n, || format!("schedule {s}: {} grants for {n} requests", g.len()))?;
        grants_total += g.len();
        for i in 0..g.len() {
            for j in i..g.len() {
                let w = (g[j] - g[i]).as_secs_f64();
                let count = (j - i + 1) as f64;
                ensure(count <= capacity as f64 + rate * w + 1e-9, || {
                    format!("schedule {s}: {count} grants in {w}s with capacity {capacity}, rate {rate}")
                })?;
            }
        }
    }
    Ok(format!("trace {:?}; 10000 schedules, {grants_total} grants within bound", trace.iter().map(|d| d.as_secs_f64()).collect::<Vec<_>>()))
}

fn partition_arithmetic() -> Check {
    let n = 290;
    let b = 3;
    // Closed form: a trailing slice of one folds into its neighbour.
    let closed = n / b + usize::from(n % b >= 2);
    let ids: Vec<String> = (0..n).map(synthetic::paper_id).collect();
    let batches = partition(&ids, b, 7);
    let sizes: Vec<usize> = batches.iter().map(|x| x.paper_ids.len()).collect();
    ensure(batches.len() == closed && closed == 97, || format!("{} batches, closed form {closed}", batches.len()))?;
    ensure(sizes.iter().filter(|&&s| s == 3).count() == 96 && sizes.iter().filter(|&&s| s == 2).count() == 1, || {
        format!("sizes {sizes:?}")
    })?;
    let seen: BTreeSet<&String> = batches.iter().flat_map(|x| &x.paper_ids).collect();
    ensure(seen.len() == n, || "papers lost or duplicated".into())?;
    ensure(slice_sizes(289, 3) == [vec![3; 95], vec![4]].concat(), || "289 should fold the last single".into())?;

    let fx = Fixture::new(n, 1, &json!({}));
    let plan = plan_run(&fx.corpus(), &fx.config()).map_err(|e| e.to_string())?;
    ensure(plan.batches.len() == closed && plan.excluded_ids.is_empty(), || {
        format!("dry-run plan has {} batches", plan.batches.len())
    })?;
    ensure(!fx.runs_dir.exists(), || "dry run wrote a run directory".into())?;
    Ok(format!("{closed} batches = 96x3 + 1x2; dry-run plan agrees"))
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    const PIECES: [&str; 14] = [
        "novel", "method", "\"quoted\"", "back\\slash", "{brace}", "[bracket]", "comma,", "line\nbreak", "tab\t",
        "ünïcödé", "日本語", "emoji 🎉", "```fence```", "trailing,]",
    ];
    let n = rng.random_range(1..8);
    let words: Vec<&str> = (0..n).map(|_| PIECES[rng.random_range(0..PIECES.len())]).collect();
    format!("x {}", words.join(" "))
}

fn random_outcomes(rng: &mut ChaCha8Rng, ids: &[u8]) -> Vec<ReviewOutcome> {
    let n = rng.random_range(1..6);
    (0..n)
        .map(|i| ReviewOutcome {
            paper_id: format!("p{i:03}"),
            title: format!("Paper {i}: {}", random_text(rng).replace('\n', " ")),
            answers: ids
                .iter()
                .map(|&c| CriterionAnswer {
                    criterion_id: c,
                    answer: random_text(rng),
                    justification: random_text(rng),
                })
                .collect(),
            comments: random_text(rng),
            score: Score::from_hundredths(rng.random_range(0..=10_000)).unwrap(),
            score_rationale: random_text(rng),
        })
        .collect()
}

fn expected(outcomes: &[ReviewOutcome]) -> Vec<ExpectedPaper> {
    outcomes.iter().map(|o| ExpectedPaper::new(&o.paper_id, &o.title)).collect()
}

fn reply_round_trip() -> Check {
    let ids: Vec<u8> = (1..=8).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0xfeed);
    for case in 0..1000 {
        let outs = random_outcomes(&mut rng, &ids);
        let parsed = parse_review_reply_detailed(&render_reply(&outs), &expected(&outs), &ids).map_err(|e| format!("case {case}: {e}"))?;
        ensure(!parsed.repaired && parsed.outcomes == outs, || format!("case {case}: round trip changed the outcomes"))?;
    }

    let mut repaired = 0;
    for case in 0..200 {
        let outs = random_outcomes(&mut rng, &ids);
        let clean = serde_json::to_string(&serde_json::from_str::<serde_json::Value>(&render_reply(&outs)).unwrap()).unwrap();
        let with_commas = clean.replace("}]", "},]").replace("\"}", "\",}");
        let broken = match case % 3 {
            0 => format!("```json\n{clean}\n```"),
            1 => with_commas,
            _ => format!("Here are the reviews:\n```\n{with_commas}\n```\nThanks."),
        };
        let parsed = parse_review_reply_detailed(&broken, &expected(&outs), &ids).map_err(|e| format!("repair case {case}: {e}"))?;
        ensure(parsed.repaired && parsed.outcomes == outs, || format!("repair case {case}: wrong result"))?;
        repaired += 1;
    }
    let truncated = "```json\n[{\"title\": \"A\", \"review\": \"r\"";
    ensure(parse_review_reply(truncated, &[ExpectedPaper::new("p0", "A")], &ids).is_err(), || {
        "truncated reply survived the repair pass".into()
    })?;

    let mut outs = random_outcomes(&mut rng, &ids);
    outs.truncate(1);
    let over = render_reply(&outs).replacen(&format!("\"score\": {}", outs[0].score), "\"score\": 100.005", 1);
    ensure(over.contains("100.005"), || "fixture did not inject the score".into())?;
    match parse_review_reply(&over, &expected(&outs), &ids) {
        Err(PromptError::ScoreOutOfRange { .. }) => {}
        other => return Err(format!("100.005 gave {other:?}")),
    }
    Ok(format!("1000 round trips, {repaired} repaired once, 100.005 rejected"))
}

fn probe_shape() -> Check {
    const SAME: &str = "It proposes a scheduler that lowers latency under a fixed energy budget.";
    let fx = Fixture::new(2, 1, &json!({ "default": SAME }));
    let config = fx.config();
    let corpus = fx.corpus();
    let paper = corpus.get("p000").unwrap();
    let mock = fx.mock();
    let d = deps(&config, &mock);
    let ablation = run_ablation(paper, &d, &config).map_err(|e| e.to_string())?;
    use VariantKind::*;
    for (a, b) in [(TitleAbstract, TitleAbstractIntro), (TitleAbstract, Full), (TitleAbstractIntro, Full)] {
        ensure(ablation.pair(a, b) == Some(1.0), || format!("{a:?}/{b:?} = {:?}", ablation.pair(a, b)))?;
    }
    ensure(ablation.variants.iter().all(|v| v.audit.leaked == 0), || "ablation context leaked".into())?;

    let abstract_text = paper.section(SectionKind::Abstract).unwrap().body.trim().to_string();
    let script = json!({
        "rules": [
            { "contains": "Please add a sentence", "reply": format!("{abstract_text} This framework is a breakthrough that outperforms all prior work.") },
            { "contains": "[p000#injected/", "reply": { "sequence": [
                { "score": 85 }, { "score": 92 }, { "score": 92 }, { "score": 85 }, { "score": 88 } ] } },
            { "contains": "[p000/", "reply": { "sequence": [
                { "score": 85 }, { "score": 85 }, { "score": 87 }, { "score": 87 }, { "score": 85 } ] } }
        ]
    });
    std::fs::write(&fx.script_path, script.to_string()).unwrap();
    let mock = fx.mock();
    let d = deps(&config, &mock);
    let ex = run_exaggeration(paper, 5, &d, &config).map_err(|e| e.to_string())?;
    ensure(ex.mean_delta > Decimal::ZERO && ex.mean_delta == Decimal::new(26, 1), || format!("delta {}", ex.mean_delta))?;
    Ok(format!(
        "ablation pairs 1.0; exaggeration {} -> {} (delta +{})",
        ex.original_mean, ex.modified_mean, ex.mean_delta
    ))
}

fn main() {
    let secs = Duration::from_secs;
    let results = [
        criterion("table-ii-arithmetic", secs(1), table_ii_arithmetic),
        criterion("table-i-averaging", secs(1), table_i_averaging),
        criterion("end-to-end-determinism", secs(30), e2e_determinism),
        criterion("resume-equivalence", secs(60), resume_equivalence),
        criterion("retrieval-isolation", secs(60), retrieval_isolation),
        criterion("rate-limiter", secs(30), rate_limiter),
        criterion("partition-arithmetic", secs(1), partition_arithmetic),
        criterion("reply-grammar-round-trip", secs(10), reply_round_trip),
        criterion("probe-harness-shape", secs(30), probe_shape),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
