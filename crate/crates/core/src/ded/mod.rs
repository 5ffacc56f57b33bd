//! Dialogical emotion decoding.
//!
//! Re-scores per-utterance posteriors over a whole dialogue with two priors:
//! a Bernoulli emotion-shift model against the same speaker's previous label
//! and a Chinese-restaurant-style block prior whose table sizes are the label
//! counts assigned so far. The joint is maximized by beam search; an
//! exhaustive decoder is provided as a reference for short dialogues.

mod io;

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use io::{
    decode_posterior_records, read_posteriors, read_posteriors_file, write_posteriors, UtterancePosterior,
};

use crate::corpus::{Corpus, EmotionLabel};
use crate::error::{Error, Result};

pub const P0_EPSILON: f64 = 1e-6;
const N_LABELS: usize = EmotionLabel::COUNT;

/// Probability that an utterance's emotion differs from the same speaker's
/// previous one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftModel {
    p0: f64,
}

impl ShiftModel {
    /// Clamps `p0` into `[1e-6, 1 - 1e-6]`.
    pub fn new(p0: f64) -> Result<Self> {
        if !p0.is_finite() {
            return Err(Error::usage(format!("shift probability {p0} is not finite")));
        }
        Ok(ShiftModel {
            p0: p0.clamp(P0_EPSILON, 1.0 - P0_EPSILON),
        })
    }

    pub fn p0(&self) -> f64 {
        self.p0
    }
}

/// Counts `(shifts, pairs)` over same-speaker consecutive utterances.
fn shift_counts<'a>(
    dialogues: impl Iterator<Item = Vec<(&'a str, EmotionLabel)>>,
) -> HashMap<&'a str, (usize, usize)> {
    let mut per_speaker: HashMap<&str, (usize, usize)> = HashMap::new();
    for turns in dialogues {
        let mut last: HashMap<&str, EmotionLabel> = HashMap::new();
        for (speaker, label) in turns {
            if let Some(prev) = last.insert(speaker, label) {
                let e = per_speaker.entry(speaker).or_default();
                e.0 += (prev != label) as usize;
                e.1 += 1;
            }
        }
    }
    per_speaker
}

fn turns(corpus: &Corpus) -> impl Iterator<Item = Vec<(&str, EmotionLabel)>> {
    corpus.dialogues().iter().map(|d| {
        d.utterances()
            .iter()
            .map(|u| (u.speaker_id.as_str(), u.label))
            .collect()
    })
}

/// Pooled shift rate over every dialogue and speaker, clamped away from 0
/// and 1.
pub fn estimate_p0(train: &Corpus) -> Result<f64> {
    let (shifts, pairs) = shift_counts(turns(train))
        .values()
        .fold((0, 0), |(s, n), &(a, b)| (s + a, n + b));
    if pairs == 0 {
        return Err(Error::usage("no same-speaker consecutive utterances to estimate p0"));
    }
    Ok((shifts as f64 / pairs as f64).clamp(P0_EPSILON, 1.0 - P0_EPSILON))
}

/// Shift rate per speaker id (pooled over dialogues), clamped like
/// [`estimate_p0`]. Speakers without a consecutive pair are omitted.
pub fn estimate_p0_by_speaker(train: &Corpus) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = shift_counts(turns(train))
        .into_iter()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(s, (k, n))| {
            (s.to_string(), (k as f64 / n as f64).clamp(P0_EPSILON, 1.0 - P0_EPSILON))
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Emotion-block sizes assigned so far in one hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockState {
    /// Block size per label index. Integral unless a decay is configured.
    pub counts: [f64; N_LABELS],
    pub alpha: f64,
}

impl BlockState {
    pub fn new(alpha: f64) -> Self {
        BlockState {
            counts: [0.0; N_LABELS],
            alpha,
        }
    }

    pub fn from_counts(counts: [usize; N_LABELS], alpha: f64) -> Self {
        BlockState {
            counts: counts.map(|c| c as f64),
            alpha,
        }
    }

    /// Adds one utterance to `label`'s block, after scaling existing blocks
    /// by `decay` (1 keeps every past utterance at full weight).
    pub fn assign(&mut self, label: EmotionLabel, decay: f64) {
        if decay != 1.0 {
            self.counts.iter_mut().for_each(|c| *c *= decay);
        }
        self.counts[label.index()] += 1.0;
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// Prior over the four labels for the next block assignment.
///
/// Seen labels get mass proportional to their block size; `alpha` is split
/// evenly over unseen labels, and dropped once every label has been seen.
pub fn ddcrp_prior(blocks: &BlockState) -> [f64; N_LABELS] {
    let unseen = blocks.counts.iter().filter(|&&c| c <= 0.0).count();
    let seen_mass = blocks.total();
    let mut p = [0.0; N_LABELS];
    if unseen == 0 {
        for (p, c) in p.iter_mut().zip(blocks.counts) {
            *p = c / seen_mass;
        }
        return p;
    }
    let total = seen_mass + blocks.alpha;
    let fresh = blocks.alpha / unseen as f64 / total;
    for (p, c) in p.iter_mut().zip(blocks.counts) {
        *p = if c > 0.0 { c / total } else { fresh };
    }
    p
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub alpha: f64,
    /// Use this shift probability instead of the estimated one.
    pub p0: Option<f64>,
    /// Per-utterance decay of earlier block sizes; 1 counts the whole
    /// dialogue equally.
    pub decay: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 16,
            alpha: 1.0,
            p0: None,
            decay: 1.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::usage("beam width must be >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::usage(format!("alpha {} must be > 0", self.alpha)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::usage(format!("decay {} must be in (0, 1]", self.decay)));
        }
        Ok(())
    }

    /// The shift model to use: the override if set, else `estimated`.
    pub fn shift_model(&self, estimated: ShiftModel) -> Result<ShiftModel> {
        match self.p0 {
            Some(p) => ShiftModel::new(p),
            None => Ok(estimated),
        }
    }
}

/// One decoding instance: per-utterance posteriors (label-index order) and
/// speaker ids.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeInput {
    pub posteriors: Vec<[f64; N_LABELS]>,
    /// Dense speaker indices, `0..n_speakers`.
    pub speakers: Vec<usize>,
}

impl DecodeInput {
    pub fn new(posteriors: Vec<[f64; N_LABELS]>, speaker_ids: &[&str]) -> Result<Self> {
        if posteriors.len() != speaker_ids.len() {
            return Err(Error::usage(format!(
                "{} posteriors for {} speaker ids",
                posteriors.len(),
                speaker_ids.len()
            )));
        }
        let mut index: HashMap<&str, usize> = HashMap::new();
        let speakers = speaker_ids
            .iter()
            .map(|s| {
                let n = index.len();
                *index.entry(s).or_insert(n)
            })
            .collect();
        Ok(DecodeInput {
            posteriors,
            speakers,
        })
    }

    pub fn len(&self) -> usize {
        self.posteriors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posteriors.is_empty()
    }

    fn n_speakers(&self) -> usize {
        self.speakers.iter().max().map_or(0, |m| m + 1)
    }

    /// Per-utterance argmax, ties to the lower label index.
    pub fn argmax_labels(&self) -> Vec<EmotionLabel> {
        self.posteriors
            .iter()
            .map(|p| {
                let mut best = 0;
                for l in 1..N_LABELS {
                    if p[l] > p[best] {
                        best = l;
                    }
                }
                EmotionLabel::ALL[best]
            })
            .collect()
    }
}

/// A partial decode.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    pub labels: Vec<EmotionLabel>,
    /// `shifts[k]`: utterance k changed its speaker's emotion (false for a
    /// speaker's first utterance).
    pub shifts: Vec<bool>,
    /// Last label per speaker index.
    pub last_by_speaker: Vec<Option<EmotionLabel>>,
    pub blocks: BlockState,
    pub log_score: f64,
}

impl BeamHypothesis {
    pub fn empty(n_speakers: usize, alpha: f64) -> Self {
        BeamHypothesis {
            labels: Vec::new(),
            shifts: Vec::new(),
            last_by_speaker: vec![None; n_speakers],
            blocks: BlockState::new(alpha),
            log_score: 0.0,
        }
    }

    fn extend(&self, label: EmotionLabel, increment: f64, speaker: usize, decay: f64) -> Self {
        let mut next = self.clone();
        let prev = next.last_by_speaker[speaker].replace(label);
        next.shifts.push(prev.is_some_and(|p| p != label));
        next.labels.push(label);
        next.blocks.assign(label, decay);
        next.log_score += increment;
        next
    }
}

/// Log-score increment for assigning `label` to the next utterance.
///
/// Continuation of the speaker's previous emotion scores `log(1 - p0)`; a
/// shift scores `log p0 + log prior(label)`; a speaker's first utterance
/// scores the prior alone.
pub fn step_score(
    hyp: &BeamHypothesis,
    label: EmotionLabel,
    posterior: f64,
    shift: &ShiftModel,
    speaker: usize,
) -> f64 {
    let evidence = posterior.ln();
    let prior = || ddcrp_prior(&hyp.blocks)[label.index()].ln();
    match hyp.last_by_speaker.get(speaker).copied().flatten() {
        Some(prev) if prev == label => evidence + (1.0 - shift.p0()).ln(),
        Some(_) => evidence + shift.p0().ln() + prior(),
        None => evidence + prior(),
    }
}

/// Full-sequence objective: the sum of [`step_score`] increments.
pub fn sequence_log_score(
    input: &DecodeInput,
    labels: &[EmotionLabel],
    shift: &ShiftModel,
    alpha: f64,
    decay: f64,
) -> f64 {
    let mut hyp = BeamHypothesis::empty(input.n_speakers(), alpha);
    for (k, &label) in labels.iter().enumerate() {
        let speaker = input.speakers[k];
        let inc = step_score(&hyp, label, input.posteriors[k][label.index()], shift, speaker);
        hyp = hyp.extend(label, inc, speaker, decay);
    }
    hyp.log_score
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub labels: Vec<EmotionLabel>,
    pub log_score: f64,
}

fn better(a: &DecodeResult, b: &DecodeResult) -> bool {
    match a.log_score.total_cmp(&b.log_score) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a.labels < b.labels,
    }
}

/// One beam pass at a fixed width: expand every hypothesis by the four
/// labels, keep the `width` best (higher score, then lexicographically
/// smaller labels), and return the top survivor.
pub fn beam_search(
    input: &DecodeInput,
    width: usize,
    shift: &ShiftModel,
    alpha: f64,
    decay: f64,
) -> Result<DecodeResult> {
    if width == 0 {
        return Err(Error::usage("beam width must be >= 1"));
    }
    let mut beam = vec![BeamHypothesis::empty(input.n_speakers(), alpha)];
    for (k, post) in input.posteriors.iter().enumerate() {
        let speaker = input.speakers[k];
        // score (parent, label) pairs first; only survivors are materialized
        let mut scored: Vec<(usize, EmotionLabel, f64)> = Vec::with_capacity(beam.len() * N_LABELS);
        for (i, hyp) in beam.iter().enumerate() {
            for label in EmotionLabel::ALL {
                let inc = step_score(hyp, label, post[label.index()], shift, speaker);
                scored.push((i, label, hyp.log_score + inc));
            }
        }
        scored.sort_by(|a, b| {
            b.2.total_cmp(&a.2)
                .then_with(|| beam[a.0].labels.cmp(&beam[b.0].labels))
                .then_with(|| a.1.cmp(&b.1))
        });
        scored.truncate(width);
        beam = scored
            .into_iter()
            .map(|(i, label, total)| {
                let parent = &beam[i];
                let mut next = parent.extend(label, 0.0, speaker, decay);
                next.log_score = total;
                next
            })
            .collect();
    }
    let best = beam.swap_remove(0);
    Ok(DecodeResult {
        labels: best.labels,
        log_score: best.log_score,
    })
}

/// Dialogue-level decode.
///
/// Returns the best sequence found by beam passes at every width from 1 to
/// `beam_width`, or the per-utterance argmax sequence if that scores higher.
/// Plain beam search at a single width can do worse with a wider beam and
/// can miss the argmax path; taking the best over the nested widths makes
/// the result non-decreasing in `beam_width` and never below the argmax.
/// Widths of `4^(K-1)` and above never prune before the last step, so they
/// are exact and the sweep stops there. Widths from `4^(K-2)` up only
/// truncate the last two steps, where the result is a running best over
/// ranked prefixes and already monotone, so one pass at the largest of them
/// covers the rest.
pub fn ded_decode(input: &DecodeInput, config: &DecodeConfig, shift: &ShiftModel) -> Result<DecodeResult> {
    config.validate()?;
    let shift = config.shift_model(*shift)?;
    if input.is_empty() {
        return Ok(DecodeResult {
            labels: Vec::new(),
            log_score: 0.0,
        });
    }
    let full_width = |steps: usize| {
        u32::try_from(steps)
            .ok()
            .and_then(|e| N_LABELS.checked_pow(e))
            .unwrap_or(usize::MAX)
    };
    let k = input.len();
    let widest = config.beam_width.min(full_width(k - 1));
    let tail_start = if k >= 2 { full_width(k - 2) } else { 1 };
    let argmax = input.argmax_labels();
    let mut best = DecodeResult {
        log_score: sequence_log_score(input, &argmax, &shift, config.alpha, config.decay),
        labels: argmax,
    };
    let mut widths: Vec<usize> = (1..tail_start.min(widest + 1)).collect();
    widths.push(widest);
    for width in widths {
        let found = beam_search(input, width, &shift, config.alpha, config.decay)?;
        if better(&found, &best) {
            best = found;
        }
    }
    Ok(best)
}

pub const BRUTE_FORCE_MAX_LEN: usize = 10;

/// Exact maximizer by enumerating all `4^K` sequences (K <= 10), with the
/// same tie-break as [`ded_decode`].
pub fn brute_force_decode(
    input: &DecodeInput,
    shift: &ShiftModel,
    alpha: f64,
    decay: f64,
) -> Result<DecodeResult> {
    let k = input.len();
    if k > BRUTE_FORCE_MAX_LEN {
        return Err(Error::usage(format!(
            "exhaustive decoding is limited to {BRUTE_FORCE_MAX_LEN} utterances, got {k}"
        )));
    }
    let mut best: Option<DecodeResult> = None;
    let mut labels = vec![EmotionLabel::Anger; k];
    for code in 0..N_LABELS.pow(k as u32) {
        // most significant digit first, so codes run in lexicographic order
        let mut rest = code;
        for pos in (0..k).rev() {
            labels[pos] = EmotionLabel::ALL[rest % N_LABELS];
            rest /= N_LABELS;
        }
        let candidate = DecodeResult {
            log_score: sequence_log_score(input, &labels, shift, alpha, decay),
            labels: labels.clone(),
        };
        if best.as_ref().is_none_or(|b| better(&candidate, b)) {
            best = Some(candidate);
        }
    }
    Ok(best.expect("at least the empty sequence"))
}
