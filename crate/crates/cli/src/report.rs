//! Deterministic table rendering: every artifact is regenerated purely from
//! persisted records, so re-running `report` reproduces files byte for byte.

use std::collections::BTreeSet;
use std::path::Path;

use panlab_core::analysis::stability_plasticity;
use panlab_core::io::{fmt_opt, write_csv};
use panlab_core::metrics::MetricReport;
use panlab_core::panoptic::ClassId;

use crate::experiment::{AblationReport, RunRecord, SweepReport};

fn report_row(
    step: usize,
    split: &str,
    report: &MetricReport,
    class_cols: &[ClassId],
) -> Vec<String> {
    let mut row = vec![
        step.to_string(),
        split.to_string(),
        fmt_opt(report.pq_base),
        fmt_opt(report.pq_new),
        fmt_opt(report.pq_all),
        fmt_opt(report.miou_base),
        fmt_opt(report.miou_new),
        fmt_opt(report.miou_all),
    ];
    for c in class_cols {
        row.push(fmt_opt(report.per_class_pq.get(c).copied()));
    }
    row
}

/// Write `metrics.csv`, `metrics.json`, `diagnostics.csv`, `train_log.csv`,
/// and (for complete runs) `trajectory.csv` under the run directory.
pub fn render_run(out: &Path, run: &RunRecord) -> anyhow::Result<()> {
    // class columns: union over reports, ascending
    let class_cols: Vec<ClassId> = run
        .steps
        .iter()
        .flat_map(|s| {
            s.val
                .per_class_pq
                .keys()
                .chain(s.test.per_class_pq.keys())
                .copied()
                .collect::<BTreeSet<_>>()
        })
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let mut header: Vec<String> = [
        "step", "split", "pq_base", "pq_new", "pq_all", "miou_base", "miou_new", "miou_all",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(class_cols.iter().map(|c| format!("pq_class_{c}")));
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();

    let mut rows = Vec::new();
    for step in &run.steps {
        rows.push(report_row(step.step, "val", &step.val, &class_cols));
        rows.push(report_row(step.step, "test", &step.test, &class_cols));
    }
    write_csv(&out.join("metrics.csv"), &header_refs, &rows)?;

    // flat JSON rendering of the same table
    let mut json_rows = Vec::new();
    for step in &run.steps {
        for (split, report) in [("val", &step.val), ("test", &step.test)] {
            let mut obj = serde_json::Map::new();
            obj.insert("step".into(), serde_json::json!(step.step));
            obj.insert("split".into(), serde_json::json!(split));
            for (k, v) in report.kv_pairs() {
                obj.insert(k, serde_json::json!(v));
            }
            json_rows.push(serde_json::Value::Object(obj));
        }
    }
    std::fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&serde_json::Value::Array(json_rows))?,
    )?;

    // diagnostics: confusion profile, congruence, retention
    let base_ref = run.steps.first().and_then(|s| s.val.pq_base);
    let diag_header = [
        "step",
        "conf_to_old",
        "conf_to_bg",
        "conf_to_future",
        "proto_congruence_mean",
        "classifier_congruence_mean",
        "retention",
        "pq_new",
    ];
    let mut diag_rows = Vec::new();
    for step in &run.steps {
        let retention = match (step.val.pq_base, base_ref) {
            (Some(now), Some(first)) if first != 0.0 => Some(now / first),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        diag_rows.push(vec![
            step.step.to_string(),
            fmt_opt(step.confusion_val.as_ref().map(|c| c.fraction_to_old)),
            fmt_opt(step.confusion_val.as_ref().map(|c| c.fraction_to_background)),
            fmt_opt(step.confusion_val.as_ref().map(|c| c.fraction_to_future)),
            fmt_opt(step.congruence.as_ref().and_then(|c| c.mean)),
            fmt_opt(step.classifier_congruence.as_ref().and_then(|c| c.mean)),
            fmt_opt(retention),
            fmt_opt(step.val.pq_new),
        ]);
    }
    write_csv(&out.join("diagnostics.csv"), &diag_header, &diag_rows)?;

    // raw training trace
    let log_header = [
        "global_step",
        "protocol_step",
        "loss_total",
        "loss_pan",
        "loss_contrast",
        "loss_repulsion",
        "loss_aux",
        "num_regions",
        "num_unlabeled",
    ];
    let mut log_rows = Vec::new();
    for step in &run.steps {
        for r in &step.train_records {
            log_rows.push(vec![
                r.global_step.to_string(),
                r.protocol_step.to_string(),
                r.loss_total.to_string(),
                r.loss_pan.to_string(),
                r.loss_contrast.to_string(),
                r.loss_repulsion.to_string(),
                r.loss_aux.to_string(),
                r.num_regions.to_string(),
                r.num_unlabeled.to_string(),
            ]);
        }
    }
    write_csv(&out.join("train_log.csv"), &log_header, &log_rows)?;

    // stability/plasticity trajectory, only meaningful for complete runs
    if run.steps.len() == run.num_steps && run.num_steps >= 2 {
        let reports: Vec<MetricReport> = run.steps.iter().map(|s| s.val.clone()).collect();
        if let Ok(points) = stability_plasticity(&reports) {
            let rows: Vec<Vec<String>> = points
                .iter()
                .map(|p| {
                    vec![p.step.to_string(), p.retention.to_string(), p.pq_new.to_string()]
                })
                .collect();
            write_csv(&out.join("trajectory.csv"), &["step", "retention", "pq_new"], &rows)?;
        }
    }
    Ok(())
}

pub fn render_ablation(out: &Path, table: &AblationReport) -> anyhow::Result<()> {
    let header = [
        "variant",
        "rc",
        "kfr",
        "overlap_pq_base",
        "overlap_pq_new",
        "overlap_pq_all",
        "disjoint_pq_base",
        "disjoint_pq_new",
        "disjoint_pq_all",
        "avg_pq_all",
    ];
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            vec![
                r.variant.clone(),
                r.rc.to_string(),
                r.kfr.to_string(),
                fmt_opt(r.overlap.pq_base),
                fmt_opt(r.overlap.pq_new),
                fmt_opt(r.overlap.pq_all),
                fmt_opt(r.disjoint.pq_base),
                fmt_opt(r.disjoint.pq_new),
                fmt_opt(r.disjoint.pq_all),
                fmt_opt(r.avg_pq_all),
            ]
        })
        .collect();
    write_csv(&out.join("ablation.csv"), &header, &rows)?;
    Ok(())
}

pub fn render_sweep(out: &Path, table: &SweepReport) -> anyhow::Result<()> {
    let header = ["fraction", "stream", "pq_all", "images_per_step"];
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            vec![
                r.fraction.to_string(),
                r.stream.clone(),
                fmt_opt(r.pq_all),
                r.images_per_step
                    .iter()
                    .map(|n| n.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
            ]
        })
        .collect();
    write_csv(&out.join("sweep.csv"), &header, &rows)?;
    Ok(())
}

/// Regenerate every table a directory supports from its persisted records.
pub fn render_dir(dir: &Path) -> anyhow::Result<bool> {
    let mut rendered = false;
    if dir.join("manifest.json").exists() {
        let (_, run) = crate::experiment::load_run(dir)?;
        render_run(dir, &run)?;
        rendered = true;
    }
    if dir.join("ablation.json").exists() {
        let table: AblationReport =
            serde_json::from_str(&std::fs::read_to_string(dir.join("ablation.json"))?)?;
        render_ablation(dir, &table)?;
        rendered = true;
    }
    if dir.join("sweep.json").exists() {
        let table: SweepReport =
            serde_json::from_str(&std::fs::read_to_string(dir.join("sweep.json"))?)?;
        render_sweep(dir, &table)?;
        rendered = true;
    }
    // recurse one level for suite directories
    if dir.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        for sub in entries {
            if sub.join("manifest.json").exists() {
                let (_, run) = crate::experiment::load_run(&sub)?;
                render_run(&sub, &run)?;
                rendered = true;
            }
        }
    }
    Ok(rendered)
}
