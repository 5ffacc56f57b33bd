//! Conversational data model and everything that turns a corpus into model
//! inputs: file I/O, context windows, splits and the synthetic generator.

mod context;
mod format;
mod split;
mod synthetic;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use context::{
    build_context_window, find_interlocutor, Modality, Role, StreamRef, StreamSet, STREAMS_PER_FRAME,
};
pub use format::{load_corpus, read_corpus, write_corpus, write_corpus_to, GXEB_MAGIC, GXEB_VERSION};
pub use split::{split_dialogues, Split, SplitRatios};
pub use synthetic::{generate_synthetic, ModalitySignal, SyntheticConfig, SyntheticCorpus};

/// The four emotion classes, in the canonical (alphabetical) order used for
/// class indices and for every deterministic tie-break.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Anger,
    Happiness,
    Neutrality,
    Sadness,
}

impl EmotionLabel {
    pub const COUNT: usize = 4;
    pub const ALL: [EmotionLabel; 4] = [
        EmotionLabel::Anger,
        EmotionLabel::Happiness,
        EmotionLabel::Neutrality,
        EmotionLabel::Sadness,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EmotionLabel::Anger => "anger",
            EmotionLabel::Happiness => "happiness",
            EmotionLabel::Neutrality => "neutrality",
            EmotionLabel::Sadness => "sadness",
        }
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmotionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EmotionLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown emotion label {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub dialogue_id: String,
    pub index: usize,
    pub speaker_id: String,
    pub label: EmotionLabel,
    pub audio_embedding: Vec<f32>,
    pub text_embedding: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    id: String,
    utterances: Vec<Utterance>,
}

impl Dialogue {
    /// Validates index contiguity, dialogue ids and embedding dimensions.
    pub fn new(id: impl Into<String>, utterances: Vec<Utterance>) -> Result<Self> {
        let id = id.into();
        let mut dim = None;
        for (i, u) in utterances.iter().enumerate() {
            if u.index != i {
                return Err(Error::Validation(format!(
                    "dialogue {id}: utterance at position {i} has index {}",
                    u.index
                )));
            }
            if u.dialogue_id != id {
                return Err(Error::Validation(format!(
                    "dialogue {id}: utterance {i} claims dialogue {}",
                    u.dialogue_id
                )));
            }
            if u.audio_embedding.len() != u.text_embedding.len() {
                return Err(Error::Validation(format!(
                    "dialogue {id}: utterance {i} audio dim {} != text dim {}",
                    u.audio_embedding.len(),
                    u.text_embedding.len()
                )));
            }
            match dim {
                None => dim = Some(u.audio_embedding.len()),
                Some(d) if d != u.audio_embedding.len() => {
                    return Err(Error::Validation(format!(
                        "dialogue {id}: utterance {i} has dim {}, expected {d}",
                        u.audio_embedding.len()
                    )))
                }
                _ => {}
            }
        }
        Ok(Dialogue { id, utterances })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn speakers(&self) -> BTreeSet<&str> {
        self.utterances.iter().map(|u| u.speaker_id.as_str()).collect()
    }

    pub fn labels(&self) -> Vec<EmotionLabel> {
        self.utterances.iter().map(|u| u.label).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    dialogues: Vec<Dialogue>,
    embedding_dim: usize,
    label_histogram: [usize; 4],
}

impl Corpus {
    pub fn new(dialogues: Vec<Dialogue>, embedding_dim: usize) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut hist = [0usize; 4];
        for d in &dialogues {
            if !seen.insert(d.id.as_str()) {
                return Err(Error::Validation(format!("duplicate dialogue id {}", d.id)));
            }
            for u in &d.utterances {
                if u.audio_embedding.len() != embedding_dim {
                    return Err(Error::Validation(format!(
                        "dialogue {} utterance {}: dim {} != corpus dim {embedding_dim}",
                        d.id,
                        u.index,
                        u.audio_embedding.len()
                    )));
                }
                hist[u.label.index()] += 1;
            }
        }
        Ok(Corpus {
            dialogues,
            embedding_dim,
            label_histogram: hist,
        })
    }

    pub fn dialogues(&self) -> &[Dialogue] {
        &self.dialogues
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    /// Per-class utterance counts, indexed by [`EmotionLabel::index`].
    pub fn label_histogram(&self) -> [usize; 4] {
        self.label_histogram
    }

    pub fn n_utterances(&self) -> usize {
        self.label_histogram.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn dialogue(&self, id: &str) -> Option<&Dialogue> {
        self.dialogues.iter().find(|d| d.id == id)
    }

    /// A new corpus holding the dialogues at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        let dialogues: Vec<Dialogue> = indices.iter().map(|&i| self.dialogues[i].clone()).collect();
        Corpus::new(dialogues, self.embedding_dim).expect("subset of a valid corpus is valid")
    }
}
