use crate::corpus::EmotionLabel;
use crate::error::{Error, Result};

const N: usize = EmotionLabel::COUNT;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub label: EmotionLabel,
    pub support: usize,
    /// Recall.
    pub accuracy: f64,
    pub precision: f64,
    pub f1: f64,
}

/// Classification metrics derived from a 4x4 confusion matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// `confusion[gold][predicted]`.
    pub confusion: [[usize; N]; N],
    pub per_class: [ClassMetrics; N],
    /// Support-weighted recall; equal to plain accuracy.
    pub weighted_accuracy: f64,
    pub weighted_f1: f64,
    /// Unweighted mean recall over classes present in the gold labels.
    pub balanced_accuracy: f64,
    pub n: usize,
    pub warnings: Vec<String>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub fn from_predictions(gold: &[EmotionLabel], predicted: &[EmotionLabel]) -> Result<Self> {
        if gold.len() != predicted.len() {
            return Err(Error::usage(format!(
                "{} gold labels for {} predictions",
                gold.len(),
                predicted.len()
            )));
        }
        let mut confusion = [[0usize; N]; N];
        for (g, p) in gold.iter().zip(predicted) {
            confusion[g.index()][p.index()] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn from_confusion(confusion: [[usize; N]; N]) -> Result<Self> {
        let n: usize = confusion.iter().flatten().sum();
        if n == 0 {
            return Err(Error::usage("metrics over an empty prediction set"));
        }
        let mut warnings = Vec::new();
        let per_class: [ClassMetrics; N] = std::array::from_fn(|c| {
            let support: usize = confusion[c].iter().sum();
            let predicted: usize = (0..N).map(|g| confusion[g][c]).sum();
            let tp = confusion[c][c];
            let recall = ratio(tp, support);
            let precision = ratio(tp, predicted);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                label: EmotionLabel::ALL[c],
                support,
                accuracy: recall,
                precision,
                f1,
            }
        });
        for m in &per_class {
            if m.support == 0 {
                warnings.push(format!("class {} absent from the gold labels; weight 0", m.label));
            }
        }
        let weight = |m: &ClassMetrics| m.support as f64 / n as f64;
        let weighted_accuracy: f64 = per_class.iter().map(|m| weight(m) * m.accuracy).sum();
        let weighted_f1: f64 = per_class.iter().map(|m| weight(m) * m.f1).sum();
        let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
        let balanced_accuracy =
            present.iter().map(|m| m.accuracy).sum::<f64>() / present.len() as f64;

        let correct: usize = (0..N).map(|c| confusion[c][c]).sum();
        let micro = correct as f64 / n as f64;
        if (micro - weighted_accuracy).abs() > 1e-12 {
            return Err(Error::Validation(format!(
                "weighted accuracy {weighted_accuracy} disagrees with accuracy {micro}"
            )));
        }
        Ok(MetricsReport {
            confusion,
            per_class,
            weighted_accuracy,
            weighted_f1,
            balanced_accuracy,
            n,
            warnings,
        })
    }

    /// Per-class rows followed by `weighted` and `balanced` summary rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,support,accuracy,precision,f1\n");
        for m in &self.per_class {
            s += &format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                m.label, m.support, m.accuracy, m.precision, m.f1
            );
        }
        let weighted_precision: f64 = self
            .per_class
            .iter()
            .map(|m| m.support as f64 / self.n as f64 * m.precision)
            .sum();
        s += &format!(
            "weighted,{},{:.6},{:.6},{:.6}\n",
            self.n, self.weighted_accuracy, weighted_precision, self.weighted_f1
        );
        let macro_of = |f: fn(&ClassMetrics) -> f64| self.per_class.iter().map(f).sum::<f64>() / N as f64;
        s += &format!(
            "balanced,{},{:.6},{:.6},{:.6}\n",
            self.n,
            self.balanced_accuracy,
            macro_of(|m| m.precision),
            macro_of(|m| m.f1)
        );
        s
    }

    /// Gold labels down, predictions across.
    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("gold");
        for l in EmotionLabel::ALL {
            s += &format!(",{l}");
        }
        s.push('\n');
        for (g, row) in self.confusion.iter().enumerate() {
            s += EmotionLabel::ALL[g].as_str();
            for v in row {
                s += &format!(",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse_confusion_csv(text: &str) -> Result<[[usize; N]; N]> {
        let bad = |m: String| Error::Format(format!("confusion csv: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty".into()))?;
        let expected: Vec<&str> = std::iter::once("gold")
            .chain(EmotionLabel::ALL.iter().map(|l| l.as_str()))
            .collect();
        if header.split(',').collect::<Vec<_>>() != expected {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let mut m = [[0usize; N]; N];
        for (g, row) in m.iter_mut().enumerate() {
            let line = lines.next().ok_or_else(|| bad(format!("missing row {g}")))?;
            let mut cells = line.split(',');
            let name = cells.next().unwrap_or_default();
            if name != EmotionLabel::ALL[g].as_str() {
                return Err(bad(format!("row {g} is {name:?}")));
            }
            for slot in row.iter_mut() {
                let cell = cells.next().ok_or_else(|| bad(format!("short row {name}")))?;
                *slot = cell.trim().parse().map_err(|e| bad(format!("{cell:?}: {e}")))?;
            }
        }
        Ok(m)
    }

    /// Plain-text table in the per-class layout (percentages).
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12}{:>10}{:>10}{:>8}\n", "class", "acc(%)", "f1(%)", "n");
        for m in &self.per_class {
            s += &format!(
                "{:<12}{:>10.2}{:>10.2}{:>8}\n",
                m.label.as_str(),
                100.0 * m.accuracy,
                100.0 * m.f1,
                m.support
            );
        }
        s += &format!(
            "{:<12}{:>10.2}{:>10.2}{:>8}\n",
            "weighted",
            100.0 * self.weighted_accuracy,
            100.0 * self.weighted_f1,
            self.n
        );
        s += &format!("{:<12}{:>10.2}\n", "balanced", 100.0 * self.balanced_accuracy);
        s
    }
}
