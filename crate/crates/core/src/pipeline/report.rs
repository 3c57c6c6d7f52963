use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::state::{ModelState, PipelineState};
use crate::error::{Error, Result};
use crate::metrics::{Hd95Convention, MetricsSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub iteration: usize,
    /// e.g. `"10 labeled + 10 pseudo"`.
    pub data_size: String,
    pub labeled: usize,
    pub pseudo: usize,
    pub heldout: MetricsSummary,
}

/// Per-iteration heldout accuracy. Carries no paths, ids or timings, so two
/// runs with the same inputs and seed serialize to identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub hd95_convention: Hd95Convention,
}

fn data_size(labeled: usize, pseudo: usize, iteration: usize) -> String {
    if iteration == 0 {
        format!("{labeled} labeled")
    } else {
        format!("{labeled} labeled + {pseudo} pseudo")
    }
}

fn row(iteration: usize, m: &ModelState) -> SummaryRow {
    SummaryRow {
        iteration,
        data_size: data_size(m.labeled, m.pseudo, iteration),
        labeled: m.labeled,
        pseudo: m.pseudo,
        heldout: MetricsSummary::of(m.heldout.iter().map(|c| &c.report)),
    }
}

pub fn report(state: &PipelineState) -> Result<Summary> {
    let mut rows = Vec::new();
    if let Some(b) = &state.baseline {
        rows.push(row(0, b));
    }
    for it in &state.iterations {
        if let Some(s) = &it.student {
            rows.push(row(it.index, s));
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyState);
    }
    Ok(Summary {
        rows,
        hd95_convention: state.config.hd95_convention,
    })
}

impl Summary {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }

    /// Plain-text table: iteration, data size, DSC and HD95 as mean ± std.
    pub fn table(&self) -> String {
        let cells: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                let dsc = r.heldout.dsc.map_or("n/a".to_string(), |m| m.to_string());
                let mut hd = r.heldout.hd95_mm.map_or("n/a".to_string(), |m| m.to_string());
                if r.heldout.hd95_undefined > 0 {
                    hd.push_str(" *");
                }
                [r.iteration.to_string(), r.data_size.clone(), dsc, hd]
            })
            .collect();
        let header = ["Iteration", "Data Size", "DSC", "HD95 (mm)"];
        let width: Vec<usize> = (0..4)
            .map(|c| cells.iter().map(|r| r[c].chars().count()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, cols: [&str; 4]| {
            let padded: Vec<String> = cols.iter().zip(&width).map(|(s, w)| format!("{s:<w$}")).collect();
            let _ = writeln!(out, "{}", padded.join(" | ").trim_end());
        };
        line(&mut out, header);
        let rule: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
        let _ = writeln!(out, "{}", rule.join("-|-"));
        for c in &cells {
            line(&mut out, [&c[0], &c[1], &c[2], &c[3]]);
        }
        for r in self.rows.iter().filter(|r| r.heldout.hd95_undefined > 0) {
            let _ = writeln!(
                out,
                "* iteration {}: {} of {} heldout cases have an empty mask; HD95 is averaged over the rest",
                r.iteration, r.heldout.hd95_undefined, r.heldout.cases
            );
        }
        out
    }
}
