//! The proposal ablation: single-map baselines against pyramid variants.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::{RpnSource, RunConfig};
use crate::data::Scene;
use crate::error::Result;
use crate::eval::{evaluate_proposals, Evaluation};
use crate::fpn::PyramidVariant;
use crate::train::{train_rpn, TrainOptions};

/// One row of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationRow {
    pub tag: char,
    pub name: &'static str,
    pub source: RpnSource,
    pub variant: PyramidVariant,
}

pub const ROWS: [AblationRow; 6] = [
    AblationRow {
        tag: 'a',
        name: "baseline_c4",
        source: RpnSource::C4,
        variant: PyramidVariant::FullFpn,
    },
    AblationRow {
        tag: 'b',
        name: "baseline_c5",
        source: RpnSource::C5,
        variant: PyramidVariant::FullFpn,
    },
    AblationRow {
        tag: 'c',
        name: "fpn",
        source: RpnSource::Pyramid,
        variant: PyramidVariant::FullFpn,
    },
    AblationRow {
        tag: 'd',
        name: "bottom_up_only",
        source: RpnSource::Pyramid,
        variant: PyramidVariant::BottomUpOnly,
    },
    AblationRow {
        tag: 'e',
        name: "top_down_no_lateral",
        source: RpnSource::Pyramid,
        variant: PyramidVariant::TopDownNoLateral,
    },
    AblationRow {
        tag: 'f',
        name: "finest_only",
        source: RpnSource::Pyramid,
        variant: PyramidVariant::FinestOnly,
    },
];

impl AblationRow {
    /// `base` with this row's feature source and pyramid variant.
    pub fn config(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.rpn.source = self.source;
        c.fpn.variant = self.variant;
        c
    }

    pub fn dir_name(&self) -> String {
        format!("{}_{}", self.tag, self.name)
    }
}

/// Trains and evaluates every row; with `out`, each row writes its run and
/// report under `out/<tag>_<name>/`.
pub fn run_ablation(base: &RunConfig, train: &[Scene], eval: &[Scene], out: Option<&Path>) -> Result<Vec<(AblationRow, Evaluation)>> {
    base.validate()?;
    let mut results = Vec::new();
    for row in ROWS {
        let cfg = row.config(base);
        let dir = out.map(|o| o.join(row.dir_name()));
        let opts = TrainOptions {
            resume: None,
            out_dir: dir.as_deref(),
        };
        let run = train_rpn(&cfg, train, &opts)?;
        let ev = evaluate_proposals(&cfg, &run.network, eval)?;
        if let Some(d) = &dir {
            ev.write(d)?;
        }
        results.push((row, ev));
    }
    Ok(results)
}

/// Fixed-width table of AR metrics (in percent), one line per row: overall
/// AR at every budget, then the size bins at the largest budget.
pub fn format_table(results: &[(AblationRow, Evaluation)]) -> String {
    let names: Vec<&str> = results
        .first()
        .map(|(_, ev)| ev.report.metrics.iter().map(|(k, _)| k.as_str()).collect())
        .unwrap_or_default();
    let overall: Vec<&str> = names.iter().copied().filter(|k| k.split('_').count() == 2).collect();
    let largest = overall.last().and_then(|k| k.strip_prefix("ar_")).unwrap_or("1k");
    let mut cols = overall;
    let binned: Vec<String> = ["s", "m", "l"].iter().map(|b| format!("ar_{b}_{largest}")).collect();
    cols.extend(binned.iter().map(String::as_str));
    let mut s = format!("{:<26}", "row");
    for c in &cols {
        write!(s, "{c:>9}").expect("write to String");
    }
    s.push('\n');
    for (row, ev) in results {
        write!(s, "{:<26}", format!("({}) {}", row.tag, row.name)).expect("write to String");
        for c in &cols {
            let v = ev.report.get(c).map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
            write!(s, "{v:>9}").expect("write to String");
        }
        s.push('\n');
    }
    s
}
