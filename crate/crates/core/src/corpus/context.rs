//! Interlocutor lookup and per-target stream construction.
//!
//! Every prediction target `t` gets `4 * frames` streams. Frame 0 is anchored
//! at `t` itself; frame `f` is anchored at the `f`-th earlier utterance of the
//! same speaker. Each frame carries (self audio, self text, interlocutor audio,
//! interlocutor text), where the interlocutor is the latest earlier utterance
//! by a different speaker than the anchor. Missing streams are zero vectors.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::Dialogue;

pub const STREAMS_PER_FRAME: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    #[serde(rename = "self")]
    SelfSpeaker,
    Interlocutor,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::SelfSpeaker => "self",
            Role::Interlocutor => "interlocutor",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }
}

/// Identifies one input stream of a prediction target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamRef {
    pub role: Role,
    pub modality: Modality,
    pub frame: usize,
    /// Source utterance; `None` when the stream is zero padding.
    pub utterance_index: Option<usize>,
}

impl StreamRef {
    /// Canonical slot: frame-major, then role (self before interlocutor),
    /// then modality (audio before text). Slot 0 is the reference stream.
    pub fn slot(&self) -> usize {
        let role = match self.role {
            Role::SelfSpeaker => 0,
            Role::Interlocutor => 1,
        };
        let modality = match self.modality {
            Modality::Audio => 0,
            Modality::Text => 1,
        };
        self.frame * STREAMS_PER_FRAME + role * 2 + modality
    }

    /// Inverse of [`StreamRef::slot`] (with no source utterance).
    pub fn from_slot(slot: usize) -> StreamRef {
        let within = slot % STREAMS_PER_FRAME;
        StreamRef {
            role: if within < 2 {
                Role::SelfSpeaker
            } else {
                Role::Interlocutor
            },
            modality: if within.is_multiple_of(2) {
                Modality::Audio
            } else {
                Modality::Text
            },
            frame: slot / STREAMS_PER_FRAME,
            utterance_index: None,
        }
    }

    pub fn is_reference(&self) -> bool {
        self.slot() == 0
    }

    pub fn is_padded(&self) -> bool {
        self.utterance_index.is_none()
    }

    /// Short label in the style `0A_k0`: role digit (0 self, 1 interlocutor),
    /// modality letter, frame.
    pub fn short_label(&self) -> String {
        let role = match self.role {
            Role::SelfSpeaker => 0,
            Role::Interlocutor => 1,
        };
        let m = match self.modality {
            Modality::Audio => 'A',
            Modality::Text => 'T',
        };
        format!("{role}{m}_k{}", self.frame)
    }
}

impl fmt::Display for StreamRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.short_label())
    }
}

/// The gated input streams for one prediction target, in canonical slot order.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamSet {
    pub refs: Vec<StreamRef>,
    pub embeddings: Vec<Vec<f32>>,
}

impl StreamSet {
    pub fn frames(&self) -> usize {
        self.refs.len() / STREAMS_PER_FRAME
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn reference(&self) -> &StreamRef {
        &self.refs[0]
    }

    /// Puts streams into canonical slot order, whatever order they arrived in.
    pub fn canonicalize(&mut self) {
        let mut pairs: Vec<(StreamRef, Vec<f32>)> = self
            .refs
            .drain(..)
            .zip(self.embeddings.drain(..))
            .collect();
        pairs.sort_by_key(|(r, _)| r.slot());
        for (r, e) in pairs {
            self.refs.push(r);
            self.embeddings.push(e);
        }
    }
}

/// Latest utterance before `t` whose speaker differs from the speaker at `t`.
pub fn find_interlocutor(dialogue: &Dialogue, t: usize) -> Option<usize> {
    let utts = dialogue.utterances();
    let speaker = &utts.get(t)?.speaker_id;
    (0..t).rev().find(|&j| utts[j].speaker_id != *speaker)
}

fn previous_same_speaker(dialogue: &Dialogue, anchor: usize) -> Option<usize> {
    let utts = dialogue.utterances();
    let speaker = &utts[anchor].speaker_id;
    (0..anchor).rev().find(|&j| utts[j].speaker_id == *speaker)
}

/// Builds the `4 * frames` streams for target `t` (see module docs).
///
/// Panics if `t` is out of range or `frames == 0`.
pub fn build_context_window(dialogue: &Dialogue, t: usize, frames: usize) -> StreamSet {
    assert!(t < dialogue.len(), "target {t} outside dialogue of {}", dialogue.len());
    assert!(frames >= 1, "at least one frame is required");
    let utts = dialogue.utterances();
    let dim = utts[t].audio_embedding.len();

    let mut refs = Vec::with_capacity(frames * STREAMS_PER_FRAME);
    let mut embeddings = Vec::with_capacity(frames * STREAMS_PER_FRAME);
    let mut anchor = Some(t);
    for frame in 0..frames {
        let partner = anchor.and_then(|a| find_interlocutor(dialogue, a));
        for (role, src) in [(Role::SelfSpeaker, anchor), (Role::Interlocutor, partner)] {
            for modality in [Modality::Audio, Modality::Text] {
                refs.push(StreamRef {
                    role,
                    modality,
                    frame,
                    utterance_index: src,
                });
                embeddings.push(match src {
                    Some(i) => match modality {
                        Modality::Audio => utts[i].audio_embedding.clone(),
                        Modality::Text => utts[i].text_embedding.clone(),
                    },
                    None => vec![0.0; dim],
                });
            }
        }
        anchor = anchor.and_then(|a| previous_same_speaker(dialogue, a));
    }
    StreamSet { refs, embeddings }
}
