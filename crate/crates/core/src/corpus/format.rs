//! GXEB embedding corpus files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GXEB"                 4 bytes
//! version                u16 (= 1)
//! embedding_dim          u32
//! n_dialogues            u32
//! n_utterances           u64
//! metadata_len           u64
//! metadata               metadata_len bytes of UTF-8 JSON lines, one per
//!                        utterance: {"dialogue_id","index","speaker_id","label"}
//! payload                per utterance in metadata order: audio (dim x f32)
//!                        then text (dim x f32)
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, Dialogue, EmotionLabel, Utterance};
use crate::error::{Error, Result};

pub const GXEB_MAGIC: &[u8; 4] = b"GXEB";
pub const GXEB_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 8;

#[derive(Serialize, Deserialize)]
struct MetaLine {
    dialogue_id: String,
    index: usize,
    speaker_id: String,
    label: EmotionLabel,
}

/// Serializes `corpus` into canonical GXEB bytes.
pub fn write_corpus_to<W: Write>(corpus: &Corpus, mut out: W) -> Result<()> {
    let mut meta = Vec::new();
    for d in corpus.dialogues() {
        for u in d.utterances() {
            let line = MetaLine {
                dialogue_id: u.dialogue_id.clone(),
                index: u.index,
                speaker_id: u.speaker_id.clone(),
                label: u.label,
            };
            serde_json::to_writer(&mut meta, &line)
                .map_err(|e| Error::Format(format!("metadata encode: {e}")))?;
            meta.push(b'\n');
        }
    }

    let dim = u32::try_from(corpus.embedding_dim())
        .map_err(|_| Error::usage("embedding dim exceeds u32"))?;
    let n_dialogues = u32::try_from(corpus.dialogues().len())
        .map_err(|_| Error::usage("dialogue count exceeds u32"))?;

    out.write_all(GXEB_MAGIC)?;
    out.write_all(&GXEB_VERSION.to_le_bytes())?;
    out.write_all(&dim.to_le_bytes())?;
    out.write_all(&n_dialogues.to_le_bytes())?;
    out.write_all(&(corpus.n_utterances() as u64).to_le_bytes())?;
    out.write_all(&(meta.len() as u64).to_le_bytes())?;
    out.write_all(&meta)?;
    for d in corpus.dialogues() {
        for u in d.utterances() {
            for x in u.audio_embedding.iter().chain(&u.text_embedding) {
                out.write_all(&x.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let file = fs::File::create(path)?;
    write_corpus_to(corpus, BufWriter::new(file))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    read_corpus(&fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corruption(format!(
                "truncated {what}: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses GXEB bytes and validates every corpus invariant.
pub fn read_corpus(bytes: &[u8]) -> Result<Corpus> {
    if bytes.len() < 4 || &bytes[..4] != GXEB_MAGIC {
        return Err(Error::Format("missing GXEB magic".into()));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u16("header")?;
    if version != GXEB_VERSION {
        return Err(Error::Format(format!("unsupported GXEB version {version}")));
    }
    let dim = r.u32("header")? as usize;
    let n_dialogues = r.u32("header")? as usize;
    let n_utterances = r.u64("header")? as usize;
    let meta_len = r.u64("metadata length")? as usize;
    debug_assert_eq!(r.pos, HEADER_LEN + 8);

    let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::Format(format!("metadata is not UTF-8: {e}")))?;
    let lines: Vec<MetaLine> = meta
        .lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("metadata line {}: {e}", i + 1)))
        })
        .collect::<Result<_>>()?;
    if lines.len() != n_utterances {
        return Err(Error::Corruption(format!(
            "header declares {n_utterances} utterances, metadata has {}",
            lines.len()
        )));
    }

    let payload_len = n_utterances
        .checked_mul(dim)
        .and_then(|x| x.checked_mul(8))
        .ok_or_else(|| Error::Corruption("payload size overflows".into()))?;
    let payload = r.take(payload_len, "payload")?;
    if r.pos != bytes.len() {
        return Err(Error::Corruption(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        )));
    }

    let floats = |chunk: &[u8]| -> Vec<f32> {
        chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect()
    };

    let mut dialogues: Vec<Dialogue> = Vec::new();
    let mut current: Option<(String, Vec<Utterance>)> = None;
    for (k, line) in lines.into_iter().enumerate() {
        let base = k * dim * 8;
        let utt = Utterance {
            dialogue_id: line.dialogue_id,
            index: line.index,
            speaker_id: line.speaker_id,
            label: line.label,
            audio_embedding: floats(&payload[base..base + dim * 4]),
            text_embedding: floats(&payload[base + dim * 4..base + dim * 8]),
        };
        match &mut current {
            Some((id, utts)) if *id == utt.dialogue_id => utts.push(utt),
            _ => {
                if let Some((id, utts)) = current.take() {
                    dialogues.push(Dialogue::new(id, utts)?);
                }
                current = Some((utt.dialogue_id.clone(), vec![utt]));
            }
        }
    }
    if let Some((id, utts)) = current {
        dialogues.push(Dialogue::new(id, utts)?);
    }
    if dialogues.len() != n_dialogues {
        return Err(Error::Validation(format!(
            "header declares {n_dialogues} dialogues, metadata groups into {}",
            dialogues.len()
        )));
    }
    Corpus::new(dialogues, dim)
}
