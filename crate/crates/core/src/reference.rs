//! Published reference tables bundled as CSV fixtures.
//!
//! The tables are embedded at compile time so tests and the CLI can replay
//! them without touching the filesystem. Numbers are kept as printed (two
//! decimals for bias scores, one for flip rates, four for per-dimension CKA).

use serde::Deserialize;

use crate::model::Dimension;
use crate::scalar::mean_present;

const BIAS_SCORES: &str = include_str!("../data/reference/bias_scores.csv");
const INLINE_AVERAGES: &str = include_str!("../data/reference/inline_averages.csv");
const INLINE_ERRATA: &str = include_str!("../data/reference/inline_errata.csv");
const FLIP_TABLE: &str = include_str!("../data/reference/flip_table.csv");
const CKA_BY_DIMENSION: &str = include_str!("../data/reference/cka_by_dimension.csv");
const CKA_INLINE: &str = include_str!("../data/reference/cka_inline.csv");
const SENTIMENT: &str = include_str!("../data/reference/sentiment.csv");
const FAILURES: &str = include_str!("../data/reference/failures.csv");

fn parse<T: for<'de> Deserialize<'de>>(name: &str, text: &str) -> Vec<T> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .unwrap_or_else(|e| panic!("embedded table {name} is malformed: {e}"))
}

/// Per-dimension bias scores for one model, columns in [`Dimension::SHARED`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasRow {
    pub model: String,
    pub s_amb: [f64; 4],
    pub s_dis: [f64; 4],
}

#[derive(Deserialize)]
struct RawBiasRow {
    model: String,
    s_amb_gender: f64,
    s_amb_nationality: f64,
    s_amb_ethnicity: f64,
    s_amb_religion: f64,
    s_dis_gender: f64,
    s_dis_nationality: f64,
    s_dis_ethnicity: f64,
    s_dis_religion: f64,
}

impl BiasRow {
    pub fn s_amb_for(&self, dim: &Dimension) -> Option<f64> {
        Dimension::SHARED
            .iter()
            .position(|d| d == dim)
            .map(|i| self.s_amb[i])
    }

    pub fn s_dis_for(&self, dim: &Dimension) -> Option<f64> {
        Dimension::SHARED
            .iter()
            .position(|d| d == dim)
            .map(|i| self.s_dis[i])
    }

    /// Unweighted mean of the four per-dimension s_amb values.
    pub fn mean_s_amb(&self) -> f64 {
        mean_present(self.s_amb.iter().copied().map(Some)).unwrap_or(f64::NAN)
    }

    /// Unweighted mean of the four per-dimension s_dis values.
    pub fn mean_s_dis(&self) -> f64 {
        mean_present(self.s_dis.iter().copied().map(Some)).unwrap_or(f64::NAN)
    }
}

pub fn bias_scores() -> Vec<BiasRow> {
    parse::<RawBiasRow>("bias_scores", BIAS_SCORES)
        .into_iter()
        .map(|r| BiasRow {
            model: r.model,
            s_amb: [
                r.s_amb_gender,
                r.s_amb_nationality,
                r.s_amb_ethnicity,
                r.s_amb_religion,
            ],
            s_dis: [
                r.s_dis_gender,
                r.s_dis_nationality,
                r.s_dis_ethnicity,
                r.s_dis_religion,
            ],
        })
        .collect()
}

/// One line of the averaged table: a model family with its base and tuned
/// variants. `base_row`/`tuned_row` name the matching rows of [`bias_scores`];
/// a missing row or value means the variant is not reported.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct InlineAverage {
    pub model: String,
    pub base_row: Option<String>,
    pub tuned_row: Option<String>,
    pub s_amb_base: Option<f64>,
    pub s_amb_tuned: Option<f64>,
    pub s_dis_base: Option<f64>,
    pub s_dis_tuned: Option<f64>,
}

impl InlineAverage {
    /// The (row name, published value) pairs for a column such as `s_amb_base`.
    pub fn cell(&self, column: &str) -> Option<(&str, f64)> {
        let (row, value) = match column {
            "s_amb_base" => (&self.base_row, self.s_amb_base),
            "s_dis_base" => (&self.base_row, self.s_dis_base),
            "s_amb_tuned" => (&self.tuned_row, self.s_amb_tuned),
            "s_dis_tuned" => (&self.tuned_row, self.s_dis_tuned),
            _ => return None,
        };
        Some((row.as_deref()?, value?))
    }
}

pub const INLINE_COLUMNS: [&str; 4] = ["s_amb_base", "s_amb_tuned", "s_dis_base", "s_dis_tuned"];

pub fn inline_averages() -> Vec<InlineAverage> {
    parse("inline_averages", INLINE_AVERAGES)
}

/// A published average that does not match the mean of its per-dimension row.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct InlineErratum {
    pub model: String,
    pub column: String,
    pub published: f64,
}

pub fn inline_errata() -> Vec<InlineErratum> {
    parse("inline_errata", INLINE_ERRATA)
}

/// Base-to-tuned transition counts with the printed rates (percent).
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct FlipRow {
    pub model_pair: String,
    pub dimension: String,
    pub total: u64,
    pub a_to_s: u64,
    pub s_to_a: u64,
    pub a_to_u: u64,
    pub s_to_u: u64,
    pub ret_a: f64,
    pub ret_s: f64,
    pub unk_flip: f64,
}

impl FlipRow {
    /// Denominator implied by the printed flip rate, as an interval that
    /// accounts for the one-decimal rounding. `None` when no flips occurred.
    pub fn implied_denominator(&self) -> Option<(f64, f64)> {
        let flips = (self.a_to_u + self.s_to_u) as f64;
        if flips == 0.0 {
            return None;
        }
        let hi_rate = self.unk_flip + 0.05;
        let lo_rate = self.unk_flip - 0.05;
        let lo = 100.0 * flips / hi_rate;
        let hi = if lo_rate > 0.0 {
            100.0 * flips / lo_rate
        } else {
            f64::INFINITY
        };
        Some((lo, hi))
    }

    /// Lower bounds on the anti-stereotype and stereotype base counts obtained
    /// from the retention rates: `n_a >= a_to_s + a_to_u + retained_a`, where
    /// the retained count follows from `ret_a`.
    pub fn retention_lower_bounds(&self) -> (f64, f64) {
        let moved_a = (self.a_to_s + self.a_to_u) as f64;
        let moved_s = (self.s_to_a + self.s_to_u) as f64;
        let n_a = if self.ret_a < 100.0 {
            moved_a / (1.0 - self.ret_a / 100.0)
        } else {
            moved_a
        };
        let n_s = if self.ret_s < 100.0 {
            moved_s / (1.0 - self.ret_s / 100.0)
        } else {
            moved_s
        };
        (n_a, n_s)
    }
}

pub fn flip_table() -> Vec<FlipRow> {
    parse("flip_table", FLIP_TABLE)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CkaDimensionRow {
    pub model: String,
    pub dimension: String,
    pub diag: f64,
    pub full: f64,
}

pub fn cka_by_dimension() -> Vec<CkaDimensionRow> {
    parse("cka_by_dimension", CKA_BY_DIMENSION)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CkaSummaryRow {
    pub model: String,
    pub diag: f64,
    pub full: f64,
}

pub fn cka_inline() -> Vec<CkaSummaryRow> {
    parse("cka_inline", CKA_INLINE)
}

/// Sentiment shares (percent) over successful completions.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SentimentRow {
    pub model: String,
    pub neutral: f64,
    pub positive: f64,
    pub negative: f64,
}

pub fn sentiment() -> Vec<SentimentRow> {
    parse("sentiment", SENTIMENT)
}

/// Failure counts per category with the printed failure rate (percent).
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct FailureRow {
    pub model: String,
    pub fail_rate: f64,
    pub empty: u64,
    pub incomplete: u64,
    pub format: u64,
    pub template: u64,
    pub mcq: u64,
}

impl FailureRow {
    pub fn n_failed(&self) -> u64 {
        self.empty + self.incomplete + self.format + self.template + self.mcq
    }
}

pub fn failures() -> Vec<FailureRow> {
    parse("failures", FAILURES)
}
