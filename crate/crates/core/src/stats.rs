//! Paired pre/post statistics: the Wilcoxon signed-rank test, descriptive
//! statistics and the cohort outcome report.
//!
//! Signed ranks are handled internally in doubled units (a tie group spanning
//! positions `i..=j` gets doubled mid-rank `i + j`), which keeps the exact
//! null distribution in integer arithmetic even when ties produce half ranks.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// Largest effective sample size for which the exact null distribution is
/// enumerated.
pub const DEFAULT_EXACT_CUTOFF: usize = 12;

/// Exact enumeration keeps counts in `u64`.
const MAX_EXACT_CUTOFF: usize = 62;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("pre and post lengths differ ({pre} vs {post})")]
    LengthMismatch { pre: usize, post: usize },
    #[error("sample is empty")]
    EmptySample,
    #[error("sample contains a non-finite value")]
    NonFinite,
    #[error("every paired difference is zero")]
    NoEffectiveSamples,
    #[error("need at least {needed} values, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("cohort is missing measure {0}")]
    MissingMeasure(Measure),
    #[error("measure {measure} has {found} participants, expected {expected}")]
    CohortSizeMismatch {
        measure: Measure,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
}

impl PairedSample {
    pub fn new(pre: Vec<f64>, post: Vec<f64>) -> Result<Self, StatsError> {
        let s = Self { pre, post };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.pre.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pre.is_empty()
    }

    pub fn swapped(&self) -> Self {
        Self {
            pre: self.post.clone(),
            post: self.pre.clone(),
        }
    }

    fn validate(&self) -> Result<(), StatsError> {
        if self.pre.len() != self.post.len() {
            return Err(StatsError::LengthMismatch {
                pre: self.pre.len(),
                post: self.post.len(),
            });
        }
        if self.pre.is_empty() {
            return Err(StatsError::EmptySample);
        }
        if self.pre.iter().chain(&self.post).any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonOptions {
    /// Exact enumeration is used while `n_effective <= exact_cutoff`.
    pub exact_cutoff: usize,
    pub continuity_correction: bool,
}

impl Default for WilcoxonOptions {
    fn default() -> Self {
        Self {
            exact_cutoff: DEFAULT_EXACT_CUTOFF,
            continuity_correction: false,
        }
    }
}

impl WilcoxonOptions {
    pub fn normal_only() -> Self {
        Self {
            exact_cutoff: 0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub n_input: usize,
    pub n_effective: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Normal-theory z with tie-corrected variance; reported for both methods.
    pub z: f64,
    pub p_two_sided: f64,
    pub method: WilcoxonMethod,
}

impl WilcoxonResult {
    pub fn n_dropped(&self) -> usize {
        self.n_input - self.n_effective
    }
}

/// Signed ranks of the nonzero differences `post - pre`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedRanks {
    /// Doubled mid-ranks of `|d|`, one per nonzero difference.
    pub doubled_ranks: Vec<u64>,
    pub positive: Vec<bool>,
    /// Sizes of tie groups among `|d|`.
    pub tie_groups: Vec<usize>,
}

impl SignedRanks {
    pub fn from_sample(s: &PairedSample) -> Self {
        let mut diffs: Vec<f64> = s
            .pre
            .iter()
            .zip(&s.post)
            .map(|(a, b)| b - a)
            .filter(|d| *d != 0.0)
            .collect();
        diffs.sort_by(|a, b| a.abs().total_cmp(&b.abs()));

        let n = diffs.len();
        let mut doubled_ranks = vec![0u64; n];
        let mut tie_groups = Vec::new();
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && diffs[j + 1].abs() == diffs[i].abs() {
                j += 1;
            }
            // 1-based positions i+1 ..= j+1
            let doubled = (i + 1 + j + 1) as u64;
            doubled_ranks[i..=j].fill(doubled);
            tie_groups.push(j - i + 1);
            i = j + 1;
        }
        let positive = diffs.iter().map(|d| *d > 0.0).collect();
        Self {
            doubled_ranks,
            positive,
            tie_groups,
        }
    }

    pub fn n(&self) -> usize {
        self.doubled_ranks.len()
    }

    pub fn doubled_w_plus(&self) -> u64 {
        self.doubled_ranks
            .iter()
            .zip(&self.positive)
            .filter(|(_, p)| **p)
            .map(|(r, _)| r)
            .sum()
    }

    pub fn doubled_total(&self) -> u64 {
        let n = self.n() as u64;
        n * (n + 1)
    }

    pub fn null_variance(&self) -> f64 {
        let n = self.n() as f64;
        let ties: f64 = self
            .tie_groups
            .iter()
            .map(|&t| {
                let t = t as f64;
                t * t * t - t
            })
            .sum();
        n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - ties / 48.0
    }
}

/// Number of the `2^n` equally likely sign assignments whose doubled rank sum
/// lies at least as far from the null mean as `observed` does.
fn exact_tail_count(doubled_ranks: &[u64], observed: u64) -> u64 {
    let total: u64 = doubled_ranks.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            let c = counts[s];
            if c != 0 {
                counts[s + r] += c;
            }
        }
        reach += r;
    }
    let dev = (2 * observed as i64 - total as i64).abs();
    counts
        .iter()
        .enumerate()
        .filter(|(s, _)| (2 * *s as i64 - total as i64).abs() >= dev)
        .map(|(_, c)| *c)
        .sum()
}

pub fn wilcoxon_signed_rank(s: &PairedSample) -> Result<WilcoxonResult, StatsError> {
    wilcoxon_signed_rank_with(s, &WilcoxonOptions::default())
}

pub fn wilcoxon_signed_rank_with(
    s: &PairedSample,
    opts: &WilcoxonOptions,
) -> Result<WilcoxonResult, StatsError> {
    s.validate()?;
    let ranks = SignedRanks::from_sample(s);
    let n = ranks.n();
    if n == 0 {
        return Err(StatsError::NoEffectiveSamples);
    }

    let doubled_plus = ranks.doubled_w_plus();
    let doubled_total = ranks.doubled_total();
    let w_plus = doubled_plus as f64 / 2.0;
    let w_minus = (doubled_total - doubled_plus) as f64 / 2.0;

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let sigma = ranks.null_variance().sqrt();
    let mut dev = w_plus - mean;
    if opts.continuity_correction {
        dev = dev.signum() * (dev.abs() - 0.5).max(0.0);
    }
    let z = if sigma > 0.0 { dev / sigma } else { 0.0 };

    let (p, method) = if n <= opts.exact_cutoff.min(MAX_EXACT_CUTOFF) {
        let hits = exact_tail_count(&ranks.doubled_ranks, doubled_plus);
        (hits as f64 / 2f64.powi(n as i32), WilcoxonMethod::Exact)
    } else {
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        ((2.0 * normal.sf(z.abs())).min(1.0), WilcoxonMethod::NormalApprox)
    };

    Ok(WilcoxonResult {
        n_input: s.len(),
        n_effective: n,
        w_plus,
        w_minus,
        z,
        p_two_sided: p.clamp(0.0, 1.0),
        method,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Descriptive {
    pub mean: f64,
    pub sd: f64,
}

pub fn mean(values: &[f64]) -> Result<f64, StatsError> {
    if values.is_empty() {
        return Err(StatsError::InsufficientData { needed: 1, got: 0 });
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Arithmetic mean and sample standard deviation (n - 1 denominator).
pub fn descriptive(values: &[f64]) -> Result<Descriptive, StatsError> {
    if values.len() < 2 {
        return Err(StatsError::InsufficientData {
            needed: 2,
            got: values.len(),
        });
    }
    let m = mean(values)?;
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    Ok(Descriptive {
        mean: m,
        sd: (ss / (values.len() - 1) as f64).sqrt(),
    })
}

// ---------------------------------------------------------------------------
// Outcome report

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Measure {
    #[serde(rename = "SAS-A")]
    SasA,
    #[serde(rename = "UCLA")]
    Ucla,
    Contravene,
    Fear,
    Isolation,
}

impl Measure {
    pub const ALL: [Measure; 5] = [
        Measure::SasA,
        Measure::Ucla,
        Measure::Contravene,
        Measure::Fear,
        Measure::Isolation,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Measure::SasA => "SAS-A",
            Measure::Ucla => "UCLA",
            Measure::Contravene => "Contravene",
            Measure::Fear => "Fear",
            Measure::Isolation => "Isolation",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// `***` below .01, `**` below .05, empty otherwise. These are the tiers the
/// published outcome table actually prints.
pub fn significance_marks(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else {
        ""
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub measure: Measure,
    pub pre_mean: f64,
    pub pre_sd: f64,
    pub post_mean: f64,
    pub post_sd: f64,
    pub z: f64,
    pub p: f64,
    pub method: WilcoxonMethod,
    pub n_effective: usize,
    pub significance_marks: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeReport {
    pub n: usize,
    pub rows: Vec<OutcomeRow>,
}

impl OutcomeReport {
    pub fn row(&self, m: Measure) -> Option<&OutcomeRow> {
        self.rows.iter().find(|r| r.measure == m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table: measure, pre Mean(SD), post Mean(SD), Z, p, Sig.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12} {:<18} {:<18} {:>8} {:>7}  {}",
            "Measure", "Before Mean(SD)", "After Mean(SD)", "Z", "p", "Sig."
        );
        for r in &self.rows {
            let before = format!("{:.2} ({:.2})", r.pre_mean, r.pre_sd);
            let after = format!("{:.2} ({:.2})", r.post_mean, r.post_sd);
            let _ = writeln!(
                out,
                "{:<12} {:<18} {:<18} {:>8.3} {:>7.3}  {}",
                r.measure.label(),
                before,
                after,
                r.z,
                r.p,
                r.significance_marks
            );
        }
        let _ = writeln!(out, "Wilcoxon signed-rank test; N = {}", self.n);
        out
    }
}

pub fn build_outcome_report(
    cohort: &BTreeMap<Measure, PairedSample>,
) -> Result<OutcomeReport, StatsError> {
    build_outcome_report_with(cohort, &WilcoxonOptions::default())
}

pub fn build_outcome_report_with(
    cohort: &BTreeMap<Measure, PairedSample>,
    opts: &WilcoxonOptions,
) -> Result<OutcomeReport, StatsError> {
    let mut expected = None;
    let mut rows = Vec::with_capacity(Measure::ALL.len());
    for measure in Measure::ALL {
        let sample = cohort
            .get(&measure)
            .ok_or(StatsError::MissingMeasure(measure))?;
        sample.validate()?;
        let n = *expected.get_or_insert(sample.len());
        if sample.len() != n {
            return Err(StatsError::CohortSizeMismatch {
                measure,
                expected: n,
                found: sample.len(),
            });
        }
        let pre = descriptive(&sample.pre)?;
        let post = descriptive(&sample.post)?;
        let w = wilcoxon_signed_rank_with(sample, opts)?;
        rows.push(OutcomeRow {
            measure,
            pre_mean: pre.mean,
            pre_sd: pre.sd,
            post_mean: post.mean,
            post_sd: post.sd,
            z: w.z,
            p: w.p_two_sided,
            method: w.method,
            n_effective: w.n_effective,
            significance_marks: significance_marks(w.p_two_sided).to_string(),
        });
    }
    Ok(OutcomeReport {
        n: expected.unwrap_or(0),
        rows,
    })
}
