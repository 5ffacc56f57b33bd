//! JSON-lines posterior interchange: one utterance per line.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ded_decode, DecodeConfig, DecodeInput, ShiftModel};
use crate::corpus::EmotionLabel;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtterancePosterior {
    pub dialogue_id: String,
    pub index: usize,
    pub speaker_id: String,
    /// Class probabilities in label-index order.
    pub posterior: [f64; EmotionLabel::COUNT],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<EmotionLabel>,
}

impl UtterancePosterior {
    fn validate(&self) -> Result<()> {
        let p = &self.posterior;
        let sum: f64 = p.iter().sum();
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "{}#{}: posterior {p:?} is not a distribution",
                self.dialogue_id, self.index
            )));
        }
        Ok(())
    }
}

pub fn read_posteriors(reader: impl BufRead) -> Result<Vec<UtterancePosterior>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtterancePosterior = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("posterior line {}: {e}", n + 1)))?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_posteriors_file(path: impl AsRef<Path>) -> Result<Vec<UtterancePosterior>> {
    let file = std::fs::File::open(path)?;
    read_posteriors(std::io::BufReader::new(file))
}

pub fn write_posteriors(mut writer: impl Write, records: &[UtterancePosterior]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

/// Groups records by dialogue (first-appearance order), orders each dialogue
/// by index and decodes it. Returns the records in that order with their
/// decoded labels.
pub fn decode_posterior_records(
    records: &[UtterancePosterior],
    config: &DecodeConfig,
    shift: &ShiftModel,
) -> Result<Vec<(UtterancePosterior, EmotionLabel)>> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&UtterancePosterior>> = HashMap::new();
    for r in records {
        groups
            .entry(&r.dialogue_id)
            .or_insert_with(|| {
                order.push(&r.dialogue_id);
                Vec::new()
            })
            .push(r);
    }
    let mut out = Vec::with_capacity(records.len());
    for id in order {
        let mut utts = groups.remove(id).expect("grouped above");
        utts.sort_by_key(|r| r.index);
        for (i, r) in utts.iter().enumerate() {
            if r.index != i {
                return Err(Error::Validation(format!(
                    "dialogue {id}: expected utterance index {i}, found {}",
                    r.index
                )));
            }
        }
        let speakers: Vec<&str> = utts.iter().map(|r| r.speaker_id.as_str()).collect();
        let input = DecodeInput::new(utts.iter().map(|r| r.posterior).collect(), &speakers)?;
        let decoded = ded_decode(&input, config, shift)?;
        out.extend(utts.into_iter().cloned().zip(decoded.labels));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(d: &str, i: usize, s: &str, p: [f64; 4]) -> UtterancePosterior {
        UtterancePosterior {
            dialogue_id: d.into(),
            index: i,
            speaker_id: s.into(),
            posterior: p,
            gold: None,
        }
    }

    #[test]
    fn round_trip() {
        let mut a = rec("d1", 0, "A", [0.1, 0.2, 0.3, 0.4]);
        a.gold = Some(EmotionLabel::Sadness);
        let recs = vec![a, rec("d1", 1, "B", [0.25; 4])];
        let mut buf = Vec::new();
        write_posteriors(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains(r#""gold":"sadness""#));
        assert!(!text.lines().nth(1).unwrap().contains("gold"));
        assert_eq!(read_posteriors(&buf[..]).unwrap(), recs);
    }

    #[test]
    fn bad_lines_are_reported() {
        assert!(matches!(read_posteriors(&b"{not json"[..]), Err(Error::Format(_))));
        let line = r#"{"dialogue_id":"d","index":0,"speaker_id":"A","posterior":[0.5,0.5,0.5,0.5]}"#;
        assert!(matches!(read_posteriors(line.as_bytes()), Err(Error::Validation(_))));
    }

    #[test]
    fn decoding_groups_and_orders_dialogues() {
        let recs = vec![
            rec("y", 1, "A", [0.1, 0.7, 0.1, 0.1]),
            rec("x", 0, "A", [0.7, 0.1, 0.1, 0.1]),
            rec("y", 0, "B", [0.1, 0.1, 0.1, 0.7]),
        ];
        let shift = ShiftModel::new(0.3).unwrap();
        let out = decode_posterior_records(&recs, &DecodeConfig::default(), &shift).unwrap();
        let keys: Vec<(&str, usize)> = out.iter().map(|(r, _)| (r.dialogue_id.as_str(), r.index)).collect();
        assert_eq!(keys, [("y", 0), ("y", 1), ("x", 0)]);
        assert_eq!(out[2].1, EmotionLabel::Anger);
    }

    #[test]
    fn index_gaps_are_rejected() {
        let recs = vec![rec("d", 0, "A", [0.25; 4]), rec("d", 2, "A", [0.25; 4])];
        let shift = ShiftModel::new(0.3).unwrap();
        let err = decode_posterior_records(&recs, &DecodeConfig::default(), &shift).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
