use std::fmt::Write as _;
use std::path::Path;

use super::{GatedModel, StreamBatch};
use crate::corpus::{build_context_window, Corpus, StreamRef, StreamSet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GateReportRow {
    pub stream: StreamRef,
    pub mean_abs_weight: f64,
    pub n: usize,
}

/// Average absolute gate weight per stream, in slot order (reference first).
#[derive(Clone, Debug, PartialEq)]
pub struct GateReport {
    pub rows: Vec<GateReportRow>,
}

/// Averages `|w|` per stream over every prediction target in `corpus`.
pub fn export_gate_report(model: &GatedModel, corpus: &Corpus) -> Result<GateReport> {
    if corpus.n_utterances() == 0 {
        return Err(Error::usage("gate report over an empty corpus"));
    }
    let n_slots = model.n_streams();
    let mut sums = vec![0.0f64; n_slots];
    let mut n = 0usize;
    let frames = model.config().frames;
    let sets: Vec<StreamSet> = corpus
        .dialogues()
        .iter()
        .flat_map(|d| (0..d.len()).map(move |t| build_context_window(d, t, frames)))
        .collect();
    for chunk in sets.chunks(256) {
        let batch = StreamBatch::from_sets(chunk)?;
        for row in model.gate_weights(&batch)? {
            for (s, w) in sums.iter_mut().zip(row) {
                *s += w.abs();
            }
            n += 1;
        }
    }
    let rows = (0..n_slots)
        .map(|slot| GateReportRow {
            stream: StreamRef::from_slot(slot),
            mean_abs_weight: if slot == 0 { 1.0 } else { sums[slot] / n as f64 },
            n,
        })
        .collect();
    Ok(GateReport { rows })
}

impl GateReport {
    pub fn reference(&self) -> &GateReportRow {
        &self.rows[0]
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format(format!("gate report csv: {e}"));
        w.write_record(["role", "modality", "frame", "mean_abs_weight", "n"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.stream.role.as_str().to_string(),
                r.stream.modality.as_str().to_string(),
                r.stream.frame.to_string(),
                format!("{:.6}", r.mean_abs_weight),
                r.n.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    /// Horizontal bar chart, one bar per stream.
    pub fn to_svg(&self) -> String {
        let bar_h = 22.0;
        let left = 90.0;
        let width = 420.0;
        let height = 40.0 + bar_h * self.rows.len() as f64;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{height:.0}" font-family="sans-serif" font-size="12">"#,
            left + width + 70.0
        );
        let _ = writeln!(s, r#"<text x="{left}" y="16">mean |gate weight|</text>"#);
        for (i, r) in self.rows.iter().enumerate() {
            let y = 28.0 + bar_h * i as f64;
            let fill = match r.stream.modality {
                crate::corpus::Modality::Audio => "#3b6ea5",
                crate::corpus::Modality::Text => "#c9812d",
            };
            let _ = writeln!(
                s,
                r#"<text x="{:.0}" y="{:.1}" text-anchor="end">{}</text>"#,
                left - 6.0,
                y + 14.0,
                r.stream.short_label()
            );
            let _ = writeln!(
                s,
                r#"<rect x="{left}" y="{y:.1}" width="{:.2}" height="{:.1}" fill="{fill}"/>"#,
                width * r.mean_abs_weight.clamp(0.0, 1.0),
                bar_h - 4.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.1}">{:.3}</text>"#,
                left + width * r.mean_abs_weight.clamp(0.0, 1.0) + 4.0,
                y + 14.0,
                r.mean_abs_weight
            );
        }
        s.push_str("</svg>\n");
        s
    }
}
