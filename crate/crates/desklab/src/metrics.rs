//! Training metrics as CSV: `step,tokens,loss,grad_norm,lr,skipped,stage`.

use std::path::Path;

use desklab_core::trainer::MetricRow;

use crate::error::{Error, Result};

pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "tokens", "loss", "grad_norm", "lr", "skipped", "stage"]).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.tokens.to_string(),
            format!("{:?}", r.loss),
            format!("{:?}", r.grad_norm),
            format!("{:?}", r.lr),
            (r.skipped as u8).to_string(),
            r.stage.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii csv")
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(format!("metrics csv: {e}")))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::Format("metrics csv: short row".into()));
        let num = |i: usize| -> Result<f64> { field(i)?.parse().map_err(|_| Error::Format("metrics csv: bad number".into())) };
        let int = |i: usize| -> Result<u64> { field(i)?.parse().map_err(|_| Error::Format("metrics csv: bad integer".into())) };
        rows.push(MetricRow {
            step: int(0)?,
            tokens: int(1)?,
            loss: num(2)?,
            grad_norm: num(3)?,
            lr: num(4)?,
            skipped: int(5)? != 0,
            stage: int(6)? as usize,
        });
    }
    Ok(rows)
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    std::fs::write(path.as_ref(), metrics_to_csv(rows)).map_err(|e| Error::io(path, e))
}
