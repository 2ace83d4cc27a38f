//! Per-epoch metrics CSV and its long-format plotting export.

use std::io::{Read, Write};

use ncl_core::EpochReport;

use crate::CliError;

pub const METRICS_COLUMNS: [&str; 9] = [
    "epoch",
    "loss_c",
    "loss_n",
    "loss_pse",
    "loss_ent",
    "clean_count",
    "noisy_count",
    "val_rsum",
    "seconds",
];

/// Writes one metrics row per epoch and flushes after each, so a run that
/// stops early leaves every finished epoch on disk.
pub struct MetricsWriter<W: Write> {
    out: csv::Writer<W>,
    timing: bool,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W, timing: bool) -> Result<Self, CliError> {
        let mut out = csv::Writer::from_writer(out);
        out.write_record(METRICS_COLUMNS).map_err(csv_io)?;
        out.flush().map_err(CliError::io("writing metrics"))?;
        Ok(Self { out, timing })
    }

    pub fn write(&mut self, r: &EpochReport) -> Result<(), CliError> {
        let seconds = if self.timing {
            r.seconds.to_string()
        } else {
            String::new()
        };
        self.out
            .write_record([
                r.epoch.to_string(),
                r.loss_c.to_string(),
                r.loss_n.to_string(),
                r.loss_pse.to_string(),
                r.loss_ent.to_string(),
                r.clean_count.to_string(),
                r.noisy_count.to_string(),
                r.val_rsum.to_string(),
                seconds,
            ])
            .map_err(csv_io)?;
        self.out.flush().map_err(CliError::io("writing metrics"))
    }
}

fn csv_io(e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::Io {
            context: "writing metrics".into(),
            source,
        },
        other => CliError::Malformed(format!("{other:?}")),
    }
}

/// One `(epoch, series, value)` row of the long-format export.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlotRow {
    pub epoch: String,
    pub series: String,
    pub value: String,
}

/// Converts a metrics CSV into long format. Series follow the column order
/// of the input, one row per epoch and numeric column. A column that is
/// blank in every row is not numeric and is left out; values are copied
/// verbatim.
pub fn plot_rows<R: Read>(input: R) -> Result<Vec<PlotRow>, CliError> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| CliError::Malformed(format!("metrics header: {e}")))?
        .clone();
    if headers.get(0) != Some("epoch") {
        return Err(CliError::Malformed(
            "first metrics column must be `epoch`".into(),
        ));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Malformed(format!("metrics row {}: {e}", i + 1)))?;
        rows.push(rec);
    }
    let mut numeric = Vec::new();
    for (col, name) in headers.iter().enumerate().skip(1) {
        let blank = rows.iter().filter(|r| r[col].is_empty()).count();
        if !rows.is_empty() && blank == rows.len() {
            continue;
        }
        if blank > 0 {
            return Err(CliError::Malformed(format!(
                "column `{name}` is partly blank"
            )));
        }
        for (i, r) in rows.iter().enumerate() {
            if r[col].parse::<f64>().is_err() {
                return Err(CliError::Malformed(format!(
                    "row {}: `{name}` value `{}` is not a number",
                    i + 1,
                    &r[col]
                )));
            }
        }
        numeric.push((col, name.to_string()));
    }
    let mut out = Vec::with_capacity(rows.len() * numeric.len());
    for (i, r) in rows.iter().enumerate() {
        if r[0].parse::<u64>().is_err() {
            return Err(CliError::Malformed(format!(
                "row {}: bad epoch `{}`",
                i + 1,
                &r[0]
            )));
        }
        for (col, name) in &numeric {
            out.push(PlotRow {
                epoch: r[0].to_string(),
                series: name.clone(),
                value: r[*col].to_string(),
            });
        }
    }
    Ok(out)
}

pub fn write_plot_rows<W: Write>(out: W, rows: &[PlotRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "series", "value"])
        .map_err(csv_io)?;
    for r in rows {
        w.write_record([&r.epoch, &r.series, &r.value])
            .map_err(csv_io)?;
    }
    w.flush().map_err(CliError::io("writing plot data"))
}
