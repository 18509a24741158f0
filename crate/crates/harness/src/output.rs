//! CSV and JSON artifacts, written atomically.

use std::io::Write as _;
use std::path::Path;

use serde::Serialize;
use spd_core::optim::StepReport;

use crate::error::{HarnessError, Result};
use crate::train::MetricsRow;

/// `%.9g`-style rendering: 9 significant digits, trailing zeros trimmed,
/// scientific notation outside `1e-5 ≤ |x| < 1e9`.
pub fn fmt_float(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| HarnessError::io(dir, e))?;
    tmp.write_all(bytes)
        .map_err(|e| HarnessError::io(path, e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| HarnessError::io(path, e))?;
    tmp.persist(path)
        .map_err(|e| HarnessError::io(path, e.error))?;
    Ok(())
}

fn metrics_header(first: &MetricsRow) -> Vec<String> {
    let mut h: Vec<String> = [
        "run_id",
        "seed",
        "optimizer",
        "lambda",
        "epoch",
        "train_loss",
        "id_acc",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((1..=first.ood_acc.len()).map(|i| format!("ood_acc_{i}")));
    h.push("ood_avg".into());
    h.push("deviation_total".into());
    h.extend(
        first
            .layer_deviations
            .iter()
            .map(|(id, _)| format!("deviation_{id}")),
    );
    h
}

/// metrics.csv (and sweep.csv) content. All rows must share the OOD count
/// and layer set of the first.
pub fn metrics_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let Some(first) = rows.first() else {
        return Err(HarnessError::Config("no metrics rows to write".into()));
    };
    w.write_record(metrics_header(first))?;
    for r in rows {
        let same_layers = r.layer_deviations.len() == first.layer_deviations.len()
            && r.layer_deviations
                .iter()
                .zip(&first.layer_deviations)
                .all(|(a, b)| a.0 == b.0);
        if r.ood_acc.len() != first.ood_acc.len() || !same_layers {
            return Err(HarnessError::Config(format!(
                "row `{}` has different columns from row `{}`",
                r.run_id, first.run_id
            )));
        }
        let mut rec = vec![
            r.run_id.clone(),
            r.seed.to_string(),
            r.optimizer.clone(),
            fmt_float(r.lambda),
            r.epoch.to_string(),
            fmt_float(r.train_loss),
            fmt_float(r.id_acc),
        ];
        rec.extend(r.ood_acc.iter().map(|&v| fmt_float(v)));
        rec.push(fmt_float(r.ood_avg));
        rec.push(fmt_float(r.deviation_total));
        rec.extend(r.layer_deviations.iter().map(|(_, d)| fmt_float(*d)));
        w.write_record(rec)?;
    }
    w.into_inner()
        .map_err(|e| HarnessError::Csv(e.into_error().into()))
}

/// layers.csv content: one line per (step, layer) record.
pub fn layers_csv(run_id: &str, reports: &[StepReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "run_id",
        "step",
        "layer_id",
        "c_t",
        "fired",
        "gamma_t",
        "gamma_prev",
        "r_t",
        "coeff",
        "post_deviation",
    ])?;
    for (i, report) in reports.iter().enumerate() {
        for rec in &report.records {
            w.write_record([
                run_id.to_string(),
                (i + 1).to_string(),
                rec.layer_id.clone(),
                fmt_float(rec.c_t),
                u8::from(rec.fired).to_string(),
                fmt_float(rec.gamma_t),
                fmt_float(rec.gamma_prev),
                fmt_float(rec.r_t),
                fmt_float(rec.coeff),
                fmt_float(rec.post_deviation),
            ])?;
        }
    }
    w.into_inner()
        .map_err(|e| HarnessError::Csv(e.into_error().into()))
}

pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}
