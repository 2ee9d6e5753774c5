//! Comparison tables over finished runs: one row per run, per-domain F1
//! columns, then overall F1, FNED, FPED and Total. The Markdown renderer
//! bolds the best value in every column (highest F1, lowest bias) and
//! rounds to four decimals; the CSV renderer keeps full float precision
//! so downstream tooling can recompute anything.

use crate::metrics::MetricsReport;
use crate::{Error, Result};

/// A run's evaluation report under the label it should carry in tables.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedReport {
    pub name: String,
    pub report: MetricsReport,
}

impl NamedReport {
    pub fn new(name: impl Into<String>, report: MetricsReport) -> Self {
        Self { name: name.into(), report }
    }
}

/// Checks the table is renderable: at least one report, every report over
/// the same domain set, and every Total actually equal to FNED + FPED.
/// Returns the shared domain id list.
fn table_domains(reports: &[NamedReport]) -> Result<Vec<usize>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Render("no reports to render".into()))?;
    let domains: Vec<usize> = first.report.domains.iter().map(|d| d.domain).collect();
    for named in reports {
        let r = &named.report;
        let ids: Vec<usize> = r.domains.iter().map(|d| d.domain).collect();
        if r.num_domains != first.report.num_domains || ids != domains {
            return Err(Error::Render(format!(
                "domain sets differ: `{}` covers {:?} of {}, `{}` covers {:?} of {}",
                first.name, domains, first.report.num_domains, named.name, ids, r.num_domains
            )));
        }
        if (r.total - (r.fned + r.fped)).abs() > 1e-9 {
            return Err(Error::Render(format!(
                "`{}` reports total {} but fned + fped = {}",
                named.name,
                r.total,
                r.fned + r.fped
            )));
        }
    }
    Ok(domains)
}

/// Column values for one run, in table order: per-domain F1s, then
/// overall F1, FNED, FPED, Total.
fn row_values(report: &MetricsReport) -> Vec<f64> {
    let mut vals: Vec<f64> = report.domains.iter().map(|d| d.f1).collect();
    vals.extend([report.f1, report.fned, report.fped, report.total]);
    vals
}

/// Which columns want the largest value (true) vs the smallest (false).
fn column_wants_max(num_domains: usize) -> Vec<bool> {
    let mut wants = vec![true; num_domains + 1];
    wants.extend([false, false, false]);
    wants
}

fn best_per_column(rows: &[Vec<f64>], wants_max: &[bool]) -> Vec<f64> {
    let mut best = rows[0].clone();
    for row in rows.iter().skip(1) {
        for (b, (&v, &max)) in best.iter_mut().zip(row.iter().zip(wants_max)) {
            if (max && v > *b) || (!max && v < *b) {
                *b = v;
            }
        }
    }
    best
}

fn headers(domains: &[usize]) -> Vec<String> {
    let mut h: Vec<String> = domains.iter().map(|d| format!("F1 d{d}")).collect();
    h.extend(["F1", "FNED", "FPED", "Total"].map(String::from));
    h
}

/// Markdown comparison table. Cells show four decimals; the best value
/// per column is bold, ties bolding every holder.
pub fn render_markdown(reports: &[NamedReport]) -> Result<String> {
    let domains = table_domains(reports)?;
    let rows: Vec<Vec<f64>> = reports.iter().map(|n| row_values(&n.report)).collect();
    let wants_max = column_wants_max(domains.len());
    let best = best_per_column(&rows, &wants_max);

    let mut out = String::new();
    out.push_str("| Run |");
    for h in headers(&domains) {
        out.push_str(&format!(" {h} |"));
    }
    out.push('\n');
    out.push_str("| --- |");
    for _ in 0..domains.len() + 4 {
        out.push_str(" ---: |");
    }
    out.push('\n');
    for (named, row) in reports.iter().zip(&rows) {
        out.push_str(&format!("| {} |", named.name));
        for (&v, &b) in row.iter().zip(&best) {
            if v == b {
                out.push_str(&format!(" **{v:.4}** |"));
            } else {
                out.push_str(&format!(" {v:.4} |"));
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// CSV version of the same table: header row, then one row per run with
/// full-precision values and no bolding.
pub fn render_csv(reports: &[NamedReport]) -> Result<String> {
    let domains = table_domains(reports)?;
    let mut out = String::new();
    out.push_str("run");
    for d in &domains {
        out.push_str(&format!(",f1_d{d}"));
    }
    out.push_str(",f1,fned,fped,total\n");
    for named in reports {
        out.push_str(&named.name);
        for v in row_values(&named.report) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}
