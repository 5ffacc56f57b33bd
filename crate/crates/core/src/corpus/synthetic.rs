//! Seeded two-speaker conversations with Markov emotion dynamics.
//!
//! Each speaker's label sequence is a Markov chain that keeps the previous
//! label with probability `self_transition_prob` and otherwise jumps
//! uniformly to one of the other three classes. An utterance's embedding in
//! modality `m` is `signal[m] * mean[label] + N(0, noise_sigma^2)` per
//! coordinate, with one set of class means shared by both modalities.
//!
//! Speaker chains are independent, so an interlocutor stream says nothing
//! about the target's label, and earlier self frames are informative only
//! through the chain's persistence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Corpus, Dialogue, EmotionLabel, Utterance};
use crate::error::{Error, Result};

/// Class-mean scale per modality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySignal {
    pub audio: f64,
    pub text: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_dialogues: usize,
    pub min_utterances: usize,
    pub max_utterances: usize,
    /// Probability a speaker keeps their previous emotion.
    pub self_transition_prob: f64,
    /// Probability the turn passes to the other speaker.
    pub turn_switch_prob: f64,
    pub signal: ModalitySignal,
    /// Standard deviation of the class-mean coordinates.
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_dialogues: 200,
            min_utterances: 8,
            max_utterances: 16,
            self_transition_prob: 0.8,
            turn_switch_prob: 0.7,
            signal: ModalitySignal {
                audio: 1.0,
                text: 0.5,
            },
            class_separation: 1.0,
            noise_sigma: 1.0,
            embedding_dim: 64,
            seed: 42,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.self_transition_prob) {
            return Err(Error::usage(format!(
                "self_transition_prob {} outside [0, 1]",
                self.self_transition_prob
            )));
        }
        if !unit(self.turn_switch_prob) {
            return Err(Error::usage(format!(
                "turn_switch_prob {} outside [0, 1]",
                self.turn_switch_prob
            )));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::usage(format!("noise_sigma {} must be > 0", self.noise_sigma)));
        }
        for (name, v) in [
            ("signal.audio", self.signal.audio),
            ("signal.text", self.signal.text),
            ("class_separation", self.class_separation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::usage(format!("{name} {v} must be finite and >= 0")));
            }
        }
        if self.embedding_dim == 0 {
            return Err(Error::usage("embedding_dim must be positive"));
        }
        if self.min_utterances == 0 || self.min_utterances > self.max_utterances {
            return Err(Error::usage(format!(
                "utterance range {}..={} is empty",
                self.min_utterances, self.max_utterances
            )));
        }
        Ok(())
    }

    /// The four class means (indexed by label) the generator uses.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        (0..EmotionLabel::COUNT)
            .map(|_| {
                (0..self.embedding_dim)
                    .map(|_| self.class_separation * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }
}

/// A generated corpus together with the class means that produced it.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub class_means: Vec<Vec<f64>>,
}

impl SyntheticCorpus {
    pub fn generate(config: &SyntheticConfig) -> Result<Self> {
        Ok(SyntheticCorpus {
            corpus: generate_synthetic(config)?,
            class_means: config.class_means(),
        })
    }
}

fn next_label(rng: &mut ChaCha8Rng, prev: Option<EmotionLabel>, q: f64) -> EmotionLabel {
    match prev {
        None => EmotionLabel::ALL[rng.random_range(0..4)],
        Some(p) => {
            if rng.random::<f64>() < q {
                p
            } else {
                let others: Vec<_> = EmotionLabel::ALL.into_iter().filter(|&l| l != p).collect();
                others[rng.random_range(0..others.len())]
            }
        }
    }
}

/// Pure function of `config` (including its seed).
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Corpus> {
    config.validate()?;
    let means = config.class_means();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let speakers = ["A", "B"];
    let dim = config.embedding_dim;
    let sigma = config.noise_sigma;

    let mut dialogues = Vec::with_capacity(config.n_dialogues);
    for di in 0..config.n_dialogues {
        let id = format!("syn{di:05}");
        let n = rng.random_range(config.min_utterances..=config.max_utterances);
        let mut speaker = rng.random_range(0..2usize);
        let mut last: [Option<EmotionLabel>; 2] = [None, None];
        let mut utterances = Vec::with_capacity(n);
        for index in 0..n {
            if index > 0 && rng.random::<f64>() < config.turn_switch_prob {
                speaker = 1 - speaker;
            }
            let label = next_label(&mut rng, last[speaker], config.self_transition_prob);
            last[speaker] = Some(label);
            let mean = &means[label.index()];
            let mut emit = |scale: f64| -> Vec<f32> {
                (0..dim)
                    .map(|k| {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        (scale * mean[k] + sigma * noise) as f32
                    })
                    .collect()
            };
            let audio_embedding = emit(config.signal.audio);
            let text_embedding = emit(config.signal.text);
            utterances.push(Utterance {
                dialogue_id: id.clone(),
                index,
                speaker_id: speakers[speaker].to_string(),
                label,
                audio_embedding,
                text_embedding,
            });
        }
        dialogues.push(Dialogue::new(id, utterances)?);
    }
    Corpus::new(dialogues, dim)
}
