use std::collections::HashSet;
use std::path::{Path, PathBuf};

use bsm_core::loader::{load_bbq, load_unqover, read_prompts_lenient};
use bsm_core::model::{ContextKind, Dataset, Dimension, Label, NormMethod};
use bsm_core::normalize::{fold, normalize_response, RefusalLexicon};
use bsm_core::openended::{
    classify_failure, sentiment_summary, CompletionRecord, FailureCategory, Sentiment,
};
use bsm_core::reference;
use bsm_core::scalar::{bias_score_amb, fmt_2dp};
use serde::Deserialize;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn jsonl<T: for<'de> Deserialize<'de>>(name: &str) -> Vec<T> {
    std::fs::read_to_string(fixture(name))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn bbq_fixture_loads_without_rejects() {
    let report = read_prompts_lenient(&fixture("bbq_100.jsonl"), Some(Dataset::Bbq)).unwrap();
    assert!(report.rejects.is_empty(), "{:?}", report.rejects);
    assert_eq!(report.records.len(), 100);
    let prompts = load_bbq(&fixture("bbq_100.jsonl")).unwrap();
    let ambiguous = prompts
        .iter()
        .filter(|p| p.context_kind == ContextKind::Ambiguous)
        .count();
    assert_eq!(ambiguous, 52);
    for dim in Dimension::SHARED {
        assert_eq!(prompts.iter().filter(|p| p.dimension == dim).count(), 25);
    }
}

#[test]
fn unqover_fixture_loads() {
    let prompts = load_unqover(&fixture("unqover_50.jsonl")).unwrap();
    assert_eq!(prompts.len(), 50);
    assert!(prompts
        .iter()
        .all(|p| p.candidates.len() == 2 && p.gold_role.is_none()));
}

#[test]
fn unqover_fixture_is_rejected_as_bbq() {
    let report = read_prompts_lenient(&fixture("unqover_50.jsonl"), Some(Dataset::Bbq)).unwrap();
    assert!(report.records.is_empty());
    assert_eq!(report.rejects.len(), 50);
}

#[derive(Deserialize)]
struct PhraseCase {
    raw_text: String,
    phrase: Option<String>,
}

#[test]
fn refusal_phrase_fixture_replays_through_matcher() {
    let lexicon = RefusalLexicon::default();
    let prompts = load_unqover(&fixture("unqover_50.jsonl")).unwrap();
    let candidates = &prompts[0].candidates;
    let cases: Vec<PhraseCase> = jsonl("refusal_phrases.jsonl");
    let covered: HashSet<String> = cases
        .iter()
        .filter_map(|c| c.phrase.as_deref().map(fold))
        .collect();
    for phrase in lexicon.phrases() {
        assert!(
            covered.contains(&fold(phrase)),
            "no fixture line for `{phrase}`"
        );
    }
    for case in &cases {
        let found = lexicon.find_in(&case.raw_text);
        let (label, method) = normalize_response(&case.raw_text, candidates, &lexicon);
        match &case.phrase {
            Some(p) => {
                assert!(found.is_some(), "`{}` not matched", case.raw_text);
                assert!(
                    fold(&case.raw_text).contains(&fold(p)),
                    "fixture phrase absent from text"
                );
                assert_eq!((label, method), (Label::U, NormMethod::RefusalLexicon));
            }
            None => {
                assert_eq!(found, None, "`{}` matched unexpectedly", case.raw_text);
                assert_ne!(method, NormMethod::RefusalLexicon);
            }
        }
    }
}

#[derive(Deserialize)]
struct GoldenCase {
    #[serde(flatten)]
    record: CompletionRecord,
    printed: String,
    expected: FailureCategory,
    misclassified_in_source: bool,
}

#[test]
fn open_ended_golden_set_classifies_as_printed() {
    let lexicon = RefusalLexicon::default();
    let cases: Vec<GoldenCase> = jsonl("openended_golden.jsonl");
    assert_eq!(cases.len(), 27);
    for case in &cases {
        let got = classify_failure(&case.record, &lexicon);
        assert_eq!(
            got.category, case.expected,
            "{} / {}: rule {}",
            case.record.model_id, case.record.completion_text, got.rule
        );
        let printed_success = matches!(case.printed.as_str(), "neutral" | "positive" | "negative");
        if printed_success && !case.misclassified_in_source {
            assert_eq!(got.category, FailureCategory::Ok);
        }
        if !printed_success {
            assert_eq!(got.category.as_str(), case.printed);
        }
    }
}

#[test]
fn gpt4o_mini_sentiment_row() {
    let records: Vec<CompletionRecord> = jsonl("gpt4o_mini_sentiment.jsonl");
    let summary = sentiment_summary(&records, &RefusalLexicon::default()).unwrap();
    assert_eq!(summary.len(), 1);
    let row = &summary[0];
    assert_eq!(row.total, 2106);
    assert_eq!(row.n_failed(), 3);
    let published = reference::sentiment()
        .into_iter()
        .find(|r| r.model == "GPT-4o-mini")
        .unwrap();
    for (s, want) in [
        (Sentiment::Neutral, published.neutral),
        (Sentiment::Positive, published.positive),
        (Sentiment::Negative, published.negative),
    ] {
        let got = row.percent(s).unwrap();
        assert!((got - want).abs() <= 0.01, "{s:?}: {got} vs {want}");
    }
}

#[test]
fn failure_rates_follow_from_counts() {
    for row in reference::failures() {
        let rate = 100.0 * row.n_failed() as f64 / 2106.0;
        assert!(
            (rate - row.fail_rate).abs() <= 0.005 + 1e-9,
            "{}",
            row.model
        );
    }
}

#[test]
fn sentiment_rows_sum_to_one_hundred() {
    for row in reference::sentiment() {
        let sum = row.neutral + row.positive + row.negative;
        assert!((sum - 100.0).abs() <= 0.02, "{}: {sum}", row.model);
    }
}

#[test]
fn inline_averages_reproduce_except_listed_errata() {
    let full = reference::bias_scores();
    let errata: HashSet<(String, String)> = reference::inline_errata()
        .into_iter()
        .map(|e| (e.model, e.column))
        .collect();
    let mut checked = 0;
    for avg in reference::inline_averages() {
        for column in reference::INLINE_COLUMNS {
            let Some((row_name, published)) = avg.cell(column) else {
                continue;
            };
            let row = full.iter().find(|r| r.model == row_name).unwrap();
            let mean = if column.starts_with("s_amb") {
                row.mean_s_amb()
            } else {
                row.mean_s_dis()
            };
            let matches = (mean - published).abs() <= 0.005 + 1e-9;
            let listed = errata.contains(&(avg.model.clone(), column.to_string()));
            assert_eq!(
                matches, !listed,
                "{} {column}: mean {mean} vs {published}",
                avg.model
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 58);
}

#[test]
fn back_solved_ambiguous_accuracy_is_a_probability() {
    let mut used = 0;
    for row in reference::bias_scores() {
        for i in 0..4 {
            let (s_amb, s_dis) = (row.s_amb[i], row.s_dis[i]);
            if s_dis.abs() < 0.5 {
                continue;
            }
            let acc = 1.0 - s_amb / s_dis;
            assert!(
                (-1e-9..=1.0 + 1e-9).contains(&acc),
                "{} dim {i}: {acc}",
                row.model
            );
            let back = bias_score_amb(acc.clamp(0.0, 1.0), Some(s_dis))
                .unwrap()
                .unwrap();
            assert!((back - s_amb).abs() <= 0.02);
            used += 1;
        }
    }
    assert!(used > 100);
}

#[test]
fn gpt2_gender_example() {
    let gpt2 = reference::bias_scores()
        .into_iter()
        .find(|r| r.model == "GPT-2")
        .unwrap();
    let s_dis = gpt2.s_dis_for(&Dimension::Gender).unwrap();
    let s_amb = gpt2.s_amb_for(&Dimension::Gender).unwrap();
    assert_eq!(
        (fmt_2dp(Some(s_dis)), fmt_2dp(Some(s_amb))),
        ("96.38".into(), "72.82".into())
    );
}

#[test]
fn flip_rows_imply_a_denominator_within_total() {
    for row in reference::flip_table() {
        let Some((lo, _hi)) = row.implied_denominator() else {
            continue;
        };
        assert!(
            lo <= row.total as f64,
            "{} {}",
            row.model_pair,
            row.dimension
        );
    }
}

#[test]
fn per_dimension_cka_averages_to_summary() {
    let by_dim = reference::cka_by_dimension();
    let summary = reference::cka_inline();
    for s in &summary {
        let key: String = s.model.chars().filter(|c| c.is_ascii_digit()).collect();
        let rows: Vec<_> = by_dim
            .iter()
            .filter(|r| {
                r.model
                    .chars()
                    .filter(|c| c.is_ascii_digit())
                    .collect::<String>()
                    == key
            })
            .collect();
        assert_eq!(rows.len(), 4, "{}", s.model);
        let diag = rows.iter().map(|r| r.diag).sum::<f64>() / 4.0;
        let full = rows.iter().map(|r| r.full).sum::<f64>() / 4.0;
        assert!(
            (diag - s.diag).abs() <= 0.0005 + 1e-9,
            "{} diag {diag}",
            s.model
        );
        assert!(
            (full - s.full).abs() <= 0.0005 + 1e-9,
            "{} full {full}",
            s.model
        );
    }
}
