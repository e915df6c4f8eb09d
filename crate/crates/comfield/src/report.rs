//! CSV reports and plain-text tables.

use std::fmt::Write as _;

use comfield_core::lab::{AblationTable, RunReport};
use comfield_core::training::TraceRow;

fn num(v: f64) -> String {
    format!("{v:.6}")
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("iteration,source_id,loss_rec,loss_guide,loss_total\n");
    for r in trace {
        let guide = r.loss_guide.map(num).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{}", r.iteration, r.source, num(r.loss_rec), guide, num(r.loss_total));
    }
    s
}

/// One `metric,value` row per quantity.
pub fn run_csv(label: &str, r: &RunReport) -> String {
    let mut s = String::from("config,seed,metric,value\n");
    let mut row = |m: &str, v: String| {
        let _ = writeln!(s, "{label},{},{m},{v}", r.seed);
    };
    row("miou", num(r.miou));
    row("pixel_accuracy", num(r.accuracy));
    row("delta1", num(r.delta1));
    for (c, iou) in r.per_class_iou.iter().enumerate() {
        row(&format!("iou_class_{c}"), iou.map(num).unwrap_or_else(|| "absent".into()));
    }
    for c in &r.absent_classes {
        row("warning", format!("class {c} absent from probe training labels"));
    }
    s
}

pub fn ablation_csv(t: &AblationTable) -> String {
    let mut s = String::from("suite,config,seed,miou,pixel_accuracy,delta1,status\n");
    for row in &t.rows {
        match (&row.report, &row.error) {
            (Some(r), _) => {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},ok",
                    t.suite.tag(),
                    row.config,
                    row.seed,
                    num(r.miou),
                    num(r.accuracy),
                    num(r.delta1)
                );
            }
            (None, e) => {
                let msg = e.clone().unwrap_or_default().replace(',', ";");
                let _ = writeln!(s, "{},{},{},,,,excluded: {msg}", t.suite.tag(), row.config, row.seed);
            }
        }
    }
    s
}

/// Mean ± population std per configuration.
pub fn ablation_table(t: &AblationTable) -> String {
    let mut s = format!("suite {}\n", t.suite.tag());
    let _ = writeln!(s, "{:<12} {:>5} {:>18} {:>18}", "config", "runs", "mIoU", "delta1");
    for m in t.summaries() {
        let flag = if m.excluded > 0 { format!("  ({} excluded)", m.excluded) } else { String::new() };
        let _ = writeln!(
            s,
            "{:<12} {:>5} {:>9.4} ± {:<6.4} {:>9.4} ± {:<6.4}{flag}",
            m.config, m.runs, m.miou_mean, m.miou_std, m.delta1_mean, m.delta1_std
        );
    }
    s
}
