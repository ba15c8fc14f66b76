//! Table rendering: CSV (full precision, round-trippable) and markdown
//! (4-decimal presentation with best-per-organ markers, DSC highest and
//! HD95 lowest).

use std::fmt::Write as _;

use crate::error::{OarsegError, Result};
use crate::metrics::MetricRow;

pub const REPORT_HEADER: &str =
    "target,model,dsc_mean,dsc_min,dsc_max,hd95_mean,hd95_min,hd95_max,n_patients,n_undefined_slices";

/// Full-precision CSV; `{}` formatting of f64 round-trips exactly.
pub fn render_table_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.target,
            r.model,
            r.dsc_mean,
            r.dsc_min,
            r.dsc_max,
            r.hd95_mean,
            r.hd95_min,
            r.hd95_max,
            r.n_patients,
            r.n_undefined_slices
        )
        .expect("string write");
    }
    out
}

pub fn parse_table_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != REPORT_HEADER {
                return Err(OarsegError::InvalidConfig(format!(
                    "unexpected report header {line:?}"
                )));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(OarsegError::InvalidConfig(format!(
                "report line {} has {} fields",
                i + 1,
                f.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| OarsegError::InvalidConfig(format!("report parse: {e}")))
        };
        rows.push(MetricRow {
            target: f[0].to_string(),
            model: f[1].to_string(),
            dsc_mean: num(f[2])?,
            dsc_min: num(f[3])?,
            dsc_max: num(f[4])?,
            hd95_mean: num(f[5])?,
            hd95_min: num(f[6])?,
            hd95_max: num(f[7])?,
            n_patients: f[8]
                .parse()
                .map_err(|e| OarsegError::InvalidConfig(format!("report parse: {e}")))?,
            n_undefined_slices: f[9]
                .parse()
                .map_err(|e| OarsegError::InvalidConfig(format!("report parse: {e}")))?,
        });
    }
    Ok(rows)
}

/// "mean / (min, max)" at report precision.
pub fn format_metric_cell(mean: f64, min: f64, max: f64) -> String {
    format!("{mean:.4} / ({min:.4}, {max:.4})")
}

/// Markdown rendering grouped by target; per target, the best DSC mean
/// (highest) and best HD95 mean (lowest) are bolded, ties bolding all
/// winners, and a trailing column names the metrics each row wins.
pub fn render_table_markdown(rows: &[MetricRow]) -> String {
    let mut out = String::new();
    let mut targets: Vec<&str> = Vec::new();
    for r in rows {
        if !targets.contains(&r.target.as_str()) {
            targets.push(&r.target);
        }
    }
    for target in targets {
        let group: Vec<&MetricRow> = rows.iter().filter(|r| r.target == target).collect();
        let best_dsc = group
            .iter()
            .map(|r| r.dsc_mean)
            .fold(f64::NEG_INFINITY, f64::max);
        let defined_hd: Vec<f64> = group
            .iter()
            .map(|r| r.hd95_mean)
            .filter(|v| v.is_finite())
            .collect();
        let best_hd = defined_hd.iter().copied().fold(f64::INFINITY, f64::min);

        writeln!(out, "### {target}\n").expect("string write");
        writeln!(out, "| Model | DSC | HD95 | Best |").expect("string write");
        writeln!(out, "|---|---|---|---|").expect("string write");
        for r in &group {
            let dsc_cell = format_metric_cell(r.dsc_mean, r.dsc_min, r.dsc_max);
            let hd_cell = if r.hd95_mean.is_finite() {
                format_metric_cell(r.hd95_mean, r.hd95_min, r.hd95_max)
            } else {
                "undefined".to_string()
            };
            let dsc_best = r.dsc_mean == best_dsc;
            let hd_best = r.hd95_mean.is_finite() && r.hd95_mean == best_hd;
            let dsc_cell = if dsc_best { format!("**{dsc_cell}**") } else { dsc_cell };
            let hd_cell = if hd_best { format!("**{hd_cell}**") } else { hd_cell };
            let marks = match (dsc_best, hd_best) {
                (true, true) => "dsc, hd95",
                (true, false) => "dsc",
                (false, true) => "hd95",
                (false, false) => "",
            };
            writeln!(out, "| {} | {} | {} | {} |", r.model, dsc_cell, hd_cell, marks)
                .expect("string write");
        }
        out.push('\n');
    }
    out
}

/// Table-2-style ensemble rendering: organs as rows, ensembles as columns,
/// unweighted mean as the final row, best per row bolded.
pub fn render_ensemble_markdown(columns: &[(String, [f64; 6], f64)]) -> String {
    use crate::organs::OrganId;
    let mut out = String::new();
    write!(out, "| Target |").expect("string write");
    for (name, _, _) in columns {
        write!(out, " {name} |").expect("string write");
    }
    out.push('\n');
    write!(out, "|---|").expect("string write");
    for _ in columns {
        write!(out, "---|").expect("string write");
    }
    out.push('\n');
    for organ in OrganId::ALL {
        let idx = organ.code() as usize - 1;
        let best = columns
            .iter()
            .map(|(_, v, _)| v[idx])
            .fold(f64::NEG_INFINITY, f64::max);
        write!(out, "| {} |", organ.name()).expect("string write");
        for (_, v, _) in columns {
            if v[idx] == best {
                write!(out, " **{:.4}** |", v[idx]).expect("string write");
            } else {
                write!(out, " {:.4} |", v[idx]).expect("string write");
            }
        }
        out.push('\n');
    }
    let best_mean = columns
        .iter()
        .map(|(_, _, m)| *m)
        .fold(f64::NEG_INFINITY, f64::max);
    write!(out, "| Mean |").expect("string write");
    for (_, _, m) in columns {
        if *m == best_mean {
            write!(out, " **{m:.4}** |").expect("string write");
        } else {
            write!(out, " {m:.4} |").expect("string write");
        }
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(target: &str, model: &str, dsc: f64, hd: f64) -> MetricRow {
        MetricRow {
            target: target.into(),
            model: model.into(),
            dsc_mean: dsc,
            dsc_min: dsc - 0.02,
            dsc_max: dsc + 0.02,
            hd95_mean: hd,
            hd95_min: hd - 0.5,
            hd95_max: hd + 0.5,
            n_patients: 5,
            n_undefined_slices: 0,
        }
    }

    #[test]
    fn csv_round_trips_exactly() {
        let rows = vec![
            row("right_lung", "gan-prod", 0.9704, 1.1293),
            row("right_lung", "unet", 0.966912345678901, 1.3),
            MetricRow {
                hd95_mean: f64::NAN,
                hd95_min: f64::NAN,
                hd95_max: f64::NAN,
                ..row("heart", "unet", 0.5, 0.0)
            },
        ];
        let parsed = parse_table_csv(&render_table_csv(&rows)).unwrap();
        assert_eq!(parsed.len(), rows.len());
        for (a, b) in rows.iter().zip(&parsed) {
            assert_eq!(a.target, b.target);
            assert_eq!(a.model, b.model);
            assert_eq!(a.dsc_mean.to_bits(), b.dsc_mean.to_bits());
            // NaN round-trips as NaN
            assert_eq!(a.hd95_mean.is_nan(), b.hd95_mean.is_nan());
            if !a.hd95_mean.is_nan() {
                assert_eq!(a.hd95_mean.to_bits(), b.hd95_mean.to_bits());
            }
        }
    }

    #[test]
    fn published_row_renders_as_expected() {
        let cell = format_metric_cell(0.9704, 0.9563, 0.9959);
        assert_eq!(cell, "0.9704 / (0.9563, 0.9959)");
    }

    #[test]
    fn best_markers() {
        let rows = vec![
            row("heart", "a", 0.93, 2.2),
            row("heart", "b", 0.90, 1.8),
        ];
        let md = render_table_markdown(&rows);
        // model a wins dsc, model b wins hd95 (lowest)
        assert!(md.contains("| a | **0.9300 / (0.9100, 0.9500)** | 2.2000 / (1.7000, 2.7000) | dsc |"));
        assert!(md.contains("| b | 0.9000 / (0.8800, 0.9200) | **1.8000 / (1.3000, 2.3000)** | hd95 |"));

        // single model is trivially best at both
        let md = render_table_markdown(&rows[..1]);
        assert!(md.contains("dsc, hd95"));

        // equal means are both marked
        let rows = vec![row("heart", "a", 0.9, 2.0), row("heart", "b", 0.9, 2.0)];
        let md = render_table_markdown(&rows);
        assert_eq!(md.matches("**0.9000").count(), 2);
    }
}
