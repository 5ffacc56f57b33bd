use std::fmt::Write as _;
use std::path::Path;

use super::config::{DecoderKind, RunConfig};
use super::metrics::MetricsReport;
use super::train::{evaluate, train, TrainOutcome};
use crate::corpus::{split_dialogues, Corpus, Split, SplitRatios};
use crate::error::{Error, Result};
use crate::gated::{export_gate_report, ModelMode};

/// `"x.xx ± y.yy"`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2} ± {std:.2}")
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub metric: String,
    pub n: usize,
    /// In percent.
    pub mean: f64,
    pub std: f64,
}

/// Mean and spread of each headline metric over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

type MetricGetter = fn(&MetricsReport) -> f64;

impl Summary {
    pub fn from_reports(reports: &[&MetricsReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::usage("summary over zero runs"));
        }
        let metrics: [(&str, MetricGetter); 3] = [
            ("weighted_accuracy", |r| r.weighted_accuracy),
            ("weighted_f1", |r| r.weighted_f1),
            ("balanced_accuracy", |r| r.balanced_accuracy),
        ];
        let rows = metrics
            .iter()
            .map(|(name, get)| {
                let values: Vec<f64> = reports.iter().map(|r| 100.0 * get(r)).collect();
                let (mean, std) = mean_std(&values);
                SummaryRow {
                    metric: name.to_string(),
                    n: values.len(),
                    mean,
                    std,
                }
            })
            .collect();
        Ok(Summary { rows })
    }

    pub fn get(&self, metric: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,n,mean,std,summary\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{}",
                r.metric,
                r.n,
                r.mean,
                r.std,
                format_mean_std(r.mean, r.std)
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("summary csv: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some("metric,n,mean,std,summary") {
            return Err(bad("unexpected header".into()));
        }
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let cells: Vec<&str> = line.split(',').collect();
                let [metric, n, mean, std, _] = cells[..] else {
                    return Err(bad(format!("{line:?} does not have 5 fields")));
                };
                let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
                Ok(SummaryRow {
                    metric: metric.to_string(),
                    n: n.parse().map_err(|e| bad(format!("{n:?}: {e}")))?,
                    mean: num(mean)?,
                    std: num(std)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Summary { rows })
    }
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub report: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct ProtocolResult {
    pub split: Split,
    pub runs: Vec<SeedRun>,
    pub summary: Summary,
}

impl ProtocolResult {
    /// One row per seed with its test metrics (percent).
    pub fn seeds_csv(&self) -> String {
        let mut s = String::from("seed,best_epoch,weighted_accuracy,weighted_f1,balanced_accuracy\n");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6}",
                r.seed,
                r.outcome.checkpoint.epoch,
                100.0 * r.report.weighted_accuracy,
                100.0 * r.report.weighted_f1,
                100.0 * r.report.balanced_accuracy
            );
        }
        s
    }

    /// Writes `summary.csv`, `seeds.csv`, `split.csv` and per-seed
    /// directories (`seed-<n>/`) with metrics, confusion matrix, gate report
    /// and checkpoint.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("summary.csv"), self.summary.to_csv())?;
        std::fs::write(dir.join("seeds.csv"), self.seeds_csv())?;
        std::fs::write(dir.join("split.csv"), split_csv(&self.split))?;
        for run in &self.runs {
            let sub = dir.join(format!("seed-{}", run.seed));
            write_run_artifacts(&sub, &run.outcome, &run.report, &self.split.test)?;
        }
        Ok(())
    }
}

/// `dialogue_id,subset` for every dialogue.
pub fn split_csv(split: &Split) -> String {
    let mut s = String::from("dialogue_id,subset\n");
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for d in part.dialogues() {
            let _ = writeln!(s, "{},{name}", d.id());
        }
    }
    s
}

/// Writes metrics, confusion, gate report (CSV and SVG), training history
/// and the checkpoint for one run into `dir`.
pub fn write_run_artifacts(
    dir: &Path,
    outcome: &TrainOutcome,
    report: &MetricsReport,
    gate_corpus: &Corpus,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.csv"), report.to_csv())?;
    std::fs::write(dir.join("confusion.csv"), report.confusion_csv())?;
    let gates = export_gate_report(&outcome.checkpoint.model, gate_corpus)?;
    gates.write_csv(dir.join("gates.csv"))?;
    std::fs::write(dir.join("gates.svg"), gates.to_svg())?;
    let mut history = String::from("epoch,train_loss,val_weighted_accuracy,val_weighted_f1\n");
    for h in &outcome.history {
        let _ = writeln!(
            history,
            "{},{:.6},{:.6},{:.6}",
            h.epoch, h.train_loss, h.val_weighted_accuracy, h.val_weighted_f1
        );
    }
    std::fs::write(dir.join("history.csv"), history)?;
    outcome.checkpoint.save(dir.join("checkpoint.bin"))
}

/// Splits the corpus once with `split_seed` and runs every seed.
pub fn run_protocol_on(config: &RunConfig, corpus: &Corpus) -> Result<ProtocolResult> {
    config.validate()?;
    let split = split_dialogues(corpus, SplitRatios::default(), config.split_seed)?;
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let outcome = train(config, &split, seed)?;
        let report = evaluate(&outcome.checkpoint, &split.test, config.decoder)?.report;
        runs.push(SeedRun {
            seed,
            outcome,
            report,
        });
    }
    let summary = Summary::from_reports(&runs.iter().map(|r| &r.report).collect::<Vec<_>>())?;
    Ok(ProtocolResult {
        split,
        runs,
        summary,
    })
}

pub fn run_protocol(config: &RunConfig) -> Result<ProtocolResult> {
    run_protocol_on(config, &config.load_corpus()?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub feature: String,
    pub model: ModelMode,
    pub decoder: DecoderKind,
    /// Per-seed test weighted accuracy / F1 (fractions), in seed order.
    pub weighted_accuracy: Vec<f64>,
    pub weighted_f1: Vec<f64>,
}

impl AblationRow {
    pub fn mean_wa(&self) -> f64 {
        mean_std(&self.weighted_accuracy).0
    }

    pub fn mean_wf1(&self) -> f64 {
        mean_std(&self.weighted_f1).0
    }
}

/// Base/gated x none/DED grid on one split; the first row is the base.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub test_utterances: usize,
}

impl AblationTable {
    pub fn row(&self, model: ModelMode, decoder: DecoderKind) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.model == model && r.decoder == decoder)
    }

    /// Means in percent with deltas against the first row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("feature,model,decoder,w_acc,w_f1,delta_w_acc,delta_w_f1\n");
        let base = &self.rows[0];
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.2},{:.2},{:+.2},{:+.2}",
                r.feature,
                r.model.as_str(),
                r.decoder.as_str(),
                100.0 * r.mean_wa(),
                100.0 * r.mean_wf1(),
                100.0 * (r.mean_wa() - base.mean_wa()),
                100.0 * (r.mean_wf1() - base.mean_wf1()),
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<12}{:<14}{:<9}{:>16}{:>16}\n",
            "feature", "model", "decoder", "W-Acc(%)", "W-F1(%)"
        );
        let base = &self.rows[0];
        for r in &self.rows {
            let cell = |v: f64, b: f64| {
                if std::ptr::eq(r, base) {
                    format!("{:.2}", 100.0 * v)
                } else {
                    format!("{:.2} ({:+.2})", 100.0 * v, 100.0 * (v - b))
                }
            };
            let _ = writeln!(
                s,
                "{:<12}{:<14}{:<9}{:>16}{:>16}",
                r.feature,
                r.model.as_str(),
                r.decoder.as_str(),
                cell(r.mean_wa(), base.mean_wa()),
                cell(r.mean_wf1(), base.mean_wf1())
            );
        }
        s
    }
}

/// Trains base and gated models for every seed on the same split and scores
/// each with and without DED on the same test utterances.
pub fn ablate_on(config: &RunConfig, corpus: &Corpus) -> Result<AblationTable> {
    config.validate()?;
    let split = split_dialogues(corpus, SplitRatios::default(), config.split_seed)?;
    let feature = config.feature_mode.as_str().to_string();
    let mut rows = Vec::new();
    for mode in [ModelMode::BaseXlstm, ModelMode::GatedXlstm] {
        let mut arm = config.clone();
        arm.model.mode = mode;
        let mut plain = AblationRow {
            feature: feature.clone(),
            model: mode,
            decoder: DecoderKind::None,
            weighted_accuracy: Vec::new(),
            weighted_f1: Vec::new(),
        };
        let mut decoded = AblationRow {
            decoder: DecoderKind::Ded,
            ..plain.clone()
        };
        for &seed in &config.seeds {
            let ck = train(&arm, &split, seed)?.checkpoint;
            for (row, decoder) in [(&mut plain, DecoderKind::None), (&mut decoded, DecoderKind::Ded)] {
                let r = evaluate(&ck, &split.test, decoder)?.report;
                row.weighted_accuracy.push(r.weighted_accuracy);
                row.weighted_f1.push(r.weighted_f1);
            }
        }
        rows.push(plain);
        rows.push(decoded);
    }
    Ok(AblationTable {
        rows,
        test_utterances: split.test.n_utterances(),
    })
}

pub fn ablate(config: &RunConfig) -> Result<AblationTable> {
    ablate_on(config, &config.load_corpus()?)
}
