//! Bias and performance metrics for multi-domain binary classification.
//!
//! Label convention: 1 = fake (the positive class), 0 = real. Bias is
//! measured as equality of error rates across domains: FPED sums the
//! absolute deviation of each domain's false-positive rate from the
//! overall one, FNED does the same for false-negative rates, and
//! `total = fned + fped` is the headline number (lower is better, 0 means
//! every domain errs at exactly the overall rate).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl ConfusionCounts {
    fn observe(&mut self, truth: u8, pred: u8) {
        match (truth, pred) {
            (1, 1) => self.true_pos += 1,
            (0, 1) => self.false_pos += 1,
            (0, 0) => self.true_neg += 1,
            (1, 0) => self.false_neg += 1,
            _ => unreachable!("labels validated before counting"),
        }
    }

    pub fn support(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    /// FNR = FN / (FN + TP); `None` when the domain has no positives.
    pub fn fnr(&self) -> Option<f64> {
        let denom = self.false_neg + self.true_pos;
        (denom > 0).then(|| self.false_neg as f64 / denom as f64)
    }

    /// FPR = FP / (FP + TN); `None` when the domain has no negatives.
    pub fn fpr(&self) -> Option<f64> {
        let denom = self.false_pos + self.true_neg;
        (denom > 0).then(|| self.false_pos as f64 / denom as f64)
    }
}

/// Macro F1: the mean of the fake-class and real-class F1 scores. A class
/// with nothing to find and nothing predicted scores a vacuous 1.0.
pub fn macro_f1(c: &ConfusionCounts) -> f64 {
    let f1 = |tp: usize, fp: usize, fneg: usize| -> f64 {
        let denom = 2 * tp + fp + fneg;
        if denom == 0 {
            1.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    let fake = f1(c.true_pos, c.false_pos, c.false_neg);
    let real = f1(c.true_neg, c.false_neg, c.false_pos);
    (fake + real) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: usize,
    pub counts: ConfusionCounts,
    /// Per-domain rates; undefined rates are reported as the overall rate
    /// (contributing zero to the deviation sums) and flagged below.
    pub fnr: f64,
    pub fpr: f64,
    pub fnr_defined: bool,
    pub fpr_defined: bool,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_domains: usize,
    /// One entry per domain that appears in the data, ascending by id.
    pub domains: Vec<DomainReport>,
    pub overall: ConfusionCounts,
    pub overall_fnr: f64,
    pub overall_fpr: f64,
    pub f1: f64,
    pub fned: f64,
    pub fped: f64,
    /// Always `fned + fped`.
    pub total: f64,
    pub warnings: Vec<String>,
}

/// Counts errors per domain and overall, then folds them into equality
/// deviations. `domains[i]` must be `< num_domains`; labels and
/// predictions must be 0 or 1.
pub fn bias_report(
    y_true: &[u8],
    y_pred: &[u8],
    domains: &[usize],
    num_domains: usize,
) -> Result<MetricsReport> {
    if y_true.len() != y_pred.len() || y_true.len() != domains.len() {
        return Err(Error::Input(format!(
            "length mismatch: {} labels, {} predictions, {} domain ids",
            y_true.len(),
            y_pred.len(),
            domains.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::Input("bias_report needs at least one sample".into()));
    }
    let mut per_domain = vec![ConfusionCounts::default(); num_domains];
    let mut overall = ConfusionCounts::default();
    for (i, ((&t, &p), &d)) in y_true.iter().zip(y_pred).zip(domains).enumerate() {
        if t > 1 || p > 1 {
            return Err(Error::Input(format!(
                "sample {i}: labels must be 0 or 1 (got truth {t}, prediction {p})"
            )));
        }
        if d >= num_domains {
            return Err(Error::Input(format!(
                "sample {i}: domain id {d} out of range for {num_domains} domains"
            )));
        }
        per_domain[d].observe(t, p);
        overall.observe(t, p);
    }

    let mut warnings = Vec::new();
    let overall_fnr = overall.fnr().unwrap_or_else(|| {
        warnings.push("overall FNR undefined (no positive samples); reported as 0".into());
        0.0
    });
    let overall_fpr = overall.fpr().unwrap_or_else(|| {
        warnings.push("overall FPR undefined (no negative samples); reported as 0".into());
        0.0
    });

    let mut reports = Vec::new();
    let mut fned = 0.0;
    let mut fped = 0.0;
    for (d, counts) in per_domain.iter().enumerate() {
        if counts.support() == 0 {
            warnings.push(format!("domain {d} has no samples; excluded from deviation sums"));
            continue;
        }
        let (fnr, fnr_defined) = match counts.fnr() {
            Some(r) => (r, true),
            None => {
                warnings.push(format!(
                    "domain {d}: FNR undefined (no positive samples); treated as the overall rate"
                ));
                (overall_fnr, false)
            }
        };
        let (fpr, fpr_defined) = match counts.fpr() {
            Some(r) => (r, true),
            None => {
                warnings.push(format!(
                    "domain {d}: FPR undefined (no negative samples); treated as the overall rate"
                ));
                (overall_fpr, false)
            }
        };
        fned += (overall_fnr - fnr).abs();
        fped += (overall_fpr - fpr).abs();
        reports.push(DomainReport {
            domain: d,
            counts: *counts,
            fnr,
            fpr,
            fnr_defined,
            fpr_defined,
            f1: macro_f1(counts),
        });
    }

    debug_assert!(fned <= reports.len() as f64 + 1e-9);
    debug_assert!(fped <= reports.len() as f64 + 1e-9);

    Ok(MetricsReport {
        num_domains,
        domains: reports,
        overall,
        overall_fnr,
        overall_fpr,
        f1: macro_f1(&overall),
        fned,
        fped,
        total: fned + fped,
        warnings,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairCheck {
    pub domain_a: usize,
    pub domain_b: usize,
    pub fnr_gap: f64,
    pub fpr_gap: f64,
    pub pass: bool,
}

/// Pairwise disparate-mistreatment audit: a pair fails when either error
/// rate differs by more than `epsilon` between the two domains.
pub fn disparate_mistreatment_check(report: &MetricsReport, epsilon: f64) -> Result<Vec<PairCheck>> {
    if !(epsilon >= 0.0) {
        return Err(Error::Input(format!("epsilon must be non-negative, got {epsilon}")));
    }
    let mut out = Vec::new();
    for (i, a) in report.domains.iter().enumerate() {
        for b in &report.domains[i + 1..] {
            let fnr_gap = (a.fnr - b.fnr).abs();
            let fpr_gap = (a.fpr - b.fpr).abs();
            out.push(PairCheck {
                domain_a: a.domain,
                domain_b: b.domain,
                fnr_gap,
                fpr_gap,
                pass: fnr_gap <= epsilon && fpr_gap <= epsilon,
            });
        }
    }
    Ok(out)
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let report: MetricsReport = serde_json::from_str(s)?;
        let seen: BTreeSet<usize> = report.domains.iter().map(|d| d.domain).collect();
        if seen.len() != report.domains.len() {
            return Err(Error::Input("report lists a domain twice".into()));
        }
        if report.domains.iter().any(|d| d.domain >= report.num_domains) {
            return Err(Error::Input("report domain id out of range".into()));
        }
        Ok(report)
    }

    /// Single-report Markdown table: one row per domain plus an overall
    /// row carrying the deviation sums.
    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        md.push_str("| domain | support | FNR | FPR | F1 |\n");
        md.push_str("|---|---|---|---|---|\n");
        for d in &self.domains {
            md.push_str(&format!(
                "| {} | {} | {:.4}{} | {:.4}{} | {:.4} |\n",
                d.domain,
                d.counts.support(),
                d.fnr,
                if d.fnr_defined { "" } else { "*" },
                d.fpr,
                if d.fpr_defined { "" } else { "*" },
                d.f1,
            ));
        }
        md.push_str(&format!(
            "| overall | {} | {:.4} | {:.4} | {:.4} |\n",
            self.overall.support(),
            self.overall_fnr,
            self.overall_fpr,
            self.f1,
        ));
        md.push_str(&format!(
            "\nFNED {:.4}, FPED {:.4}, Total {:.4}\n",
            self.fned, self.fped, self.total
        ));
        if self.domains.iter().any(|d| !d.fnr_defined || !d.fpr_defined) {
            md.push_str("\n\\* rate undefined for this domain; shown as the overall rate\n");
        }
        md
    }
}
