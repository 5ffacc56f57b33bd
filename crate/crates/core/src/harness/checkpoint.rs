//! GXCK checkpoint files.
//!
//! Layout (all integers little-endian, reals as f64):
//!
//! ```text
//! "GXCK"            4 bytes
//! version           u16 (= 1)
//! config_len        u64, then the run config as UTF-8 JSON
//! seed, epoch       u64, u64
//! has_p0            u8, then p0 f64
//! n_params          u64
//! per parameter     name_len u32, name, rank u32, dims u64 x rank, values
//! adam step         u64
//! adam settings     learning_rate, beta1, beta2, epsilon
//! adam moments      per parameter: first moment values, second moment values
//! ```

use std::path::Path;

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::gated::GatedModel;
use crate::numerics::{AdamConfig, AdamState, Tensor};

pub const GXCK_MAGIC: &[u8; 4] = b"GXCK";
pub const GXCK_VERSION: u16 = 1;

/// A trained (or freshly initialized) model with everything needed to
/// resume or evaluate it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub seed: u64,
    /// Epochs completed when this state was taken; 0 for an untrained model.
    pub epoch: usize,
    pub model: GatedModel,
    pub optimizer: AdamState,
    /// Shift probability estimated from the training split, if it had any
    /// same-speaker pairs.
    pub p0: Option<f64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(GXCK_MAGIC);
        out.extend_from_slice(&GXCK_VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        put_u64(&mut out, config.len() as u64);
        out.extend_from_slice(&config);
        put_u64(&mut out, self.seed);
        put_u64(&mut out, self.epoch as u64);
        out.push(self.p0.is_some() as u8);
        put_f64s(&mut out, &[self.p0.unwrap_or(0.0)]);

        let params = self.model.params();
        put_u64(&mut out, params.len() as u64);
        for (_, name, t) in params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            put_f64s(&mut out, t.data());
        }

        let adam = &self.optimizer;
        put_u64(&mut out, adam.step);
        let c = adam.config;
        put_f64s(&mut out, &[c.learning_rate, c.beta1, c.beta2, c.epsilon]);
        for (m, v) in adam.first_moment.iter().zip(&adam.second_moment) {
            put_f64s(&mut out, m.data());
            put_f64s(&mut out, v.data());
        }
        Ok(out)
    }

    /// Parses a checkpoint, rebuilding the model from the stored config and
    /// then overwriting every parameter with the stored values.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != GXCK_MAGIC {
            return Err(Error::Format("missing GXCK magic".into()));
        }
        let mut r = Reader { buf: bytes, pos: 4 };
        let version = u16::from_le_bytes(r.take(2, "header")?.try_into().unwrap());
        if version != GXCK_VERSION {
            return Err(Error::Format(format!("unsupported GXCK version {version}")));
        }
        let config_len = r.len("config length")?;
        let config: RunConfig = serde_json::from_slice(r.take(config_len, "config")?)
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let seed = r.u64("seed")?;
        let epoch = r.len("epoch")?;
        let has_p0 = r.take(1, "p0 flag")?[0];
        let p0_value = r.f64("p0")?;
        let p0 = match has_p0 {
            0 => None,
            1 => Some(p0_value),
            other => return Err(Error::Corruption(format!("p0 flag {other}"))),
        };

        let mut model = GatedModel::new(config.model.clone(), seed)
            .map_err(|e| Error::Validation(format!("checkpoint config: {e}")))?;
        let n_params = r.len("parameter count")?;
        if n_params != model.params().len() {
            return Err(Error::Validation(format!(
                "checkpoint has {n_params} parameters, its config builds {}",
                model.params().len()
            )));
        }
        let ids: Vec<_> = model.params().ids().collect();
        for id in &ids {
            let name_len = r.u32("parameter name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
                .map_err(|e| Error::Format(format!("parameter name: {e}")))?;
            let rank = r.u32("parameter rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.len("parameter shape"))
                .collect::<Result<Vec<_>>>()?;
            let expected = model.params().get(*id);
            if name != model.params().name(*id) || shape != expected.shape() {
                return Err(Error::Validation(format!(
                    "parameter {name:?} {shape:?} does not match {:?} {:?}",
                    model.params().name(*id),
                    expected.shape()
                )));
            }
            let values = r.f64s(expected.len(), name)?;
            model.params_mut().get_mut(*id).data_mut().copy_from_slice(&values);
        }

        let step = r.u64("optimizer step")?;
        let s = r.f64s(4, "optimizer settings")?;
        let mut optimizer = AdamState::new(
            AdamConfig {
                learning_rate: s[0],
                beta1: s[1],
                beta2: s[2],
                epsilon: s[3],
            },
            model.params(),
        );
        optimizer.step = step;
        for (i, id) in ids.iter().enumerate() {
            let shape = model.params().get(*id).shape().to_vec();
            let n = model.params().get(*id).len();
            optimizer.first_moment[i] = Tensor::new(shape.clone(), r.f64s(n, "first moment")?)?;
            optimizer.second_moment[i] = Tensor::new(shape, r.f64s(n, "second moment")?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Corruption(format!(
                "{} trailing bytes after optimizer state",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            seed,
            epoch,
            model,
            optimizer,
            p0,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
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

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Corruption(format!("{what} overflows")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Corruption(format!("{what} size overflows")))?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gated::tests::{random_sets_padded, tiny_config};
    use crate::gated::StreamBatch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn checkpoint() -> Checkpoint {
        let config = RunConfig {
            model: tiny_config(),
            ..RunConfig::default()
        };
        let mut model = GatedModel::new(config.model.clone(), 5).unwrap();
        // move every parameter off its initial value
        let ids: Vec<_> = model.params().ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            for (j, v) in model.params_mut().get_mut(id).data_mut().iter_mut().enumerate() {
                *v += ((k * 31 + j) as f64).sin() * 0.1;
            }
        }
        let mut optimizer = AdamState::new(AdamConfig::default(), model.params());
        optimizer.step = 7;
        optimizer.first_moment[0].data_mut()[0] = 0.25;
        Checkpoint {
            config,
            seed: 5,
            epoch: 3,
            model,
            optimizer,
            p0: Some(0.2),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = checkpoint();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!((back.seed, back.epoch, back.p0), (5, 3, Some(0.2)));
        assert_eq!(back.optimizer, ck.optimizer);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sets = random_sets_padded(&mut rng, 5, 2, 8, true);
        let batch = StreamBatch::from_sets(&sets).unwrap();
        let a = ck.model.logits(&batch).unwrap();
        let b = back.model.logits(&batch).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    }

    #[test]
    fn damaged_files_are_classified() {
        let bytes = checkpoint().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(b"NOPE"), Err(Error::Format(_))));
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::Format(_))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Corruption(_))
        ));
        let mut v = bytes.clone();
        v.push(0);
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::Corruption(_))));
    }

    #[test]
    fn mismatched_parameters_are_rejected() {
        let mut ck = checkpoint();
        let bytes = ck.to_bytes().unwrap();
        // same bytes, but a config that builds a different model
        ck.config.model.hidden_dim = 6;
        let mut other = ck.to_bytes().unwrap();
        let cfg_end = 4 + 2 + 8 + u64::from_le_bytes(other[6..14].try_into().unwrap()) as usize;
        let orig_end = 4 + 2 + 8 + u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        other.truncate(cfg_end);
        other.extend_from_slice(&bytes[orig_end..]);
        assert!(matches!(Checkpoint::from_bytes(&other), Err(Error::Validation(_))));
    }
}
