use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use super::checkpoint::Checkpoint;
use super::config::{DecoderKind, RunConfig};
use super::metrics::MetricsReport;
use crate::corpus::{build_context_window, Corpus, EmotionLabel, Split, StreamSet};
use crate::ded::{ded_decode, estimate_p0, DecodeConfig, DecodeInput, ShiftModel};
use crate::error::{Error, Result};
use crate::gated::{GatedModel, StreamBatch};
use crate::numerics::{AdamConfig, AdamState, Graph};

const SHUFFLE_STREAM: u64 = 7;
const NOISE_STREAM: u64 = 11;

/// Every utterance of `corpus` as a prediction target, in corpus order.
pub fn prediction_targets(corpus: &Corpus, frames: usize) -> (Vec<StreamSet>, Vec<EmotionLabel>) {
    let mut sets = Vec::with_capacity(corpus.n_utterances());
    let mut labels = Vec::with_capacity(corpus.n_utterances());
    for d in corpus.dialogues() {
        for (t, u) in d.utterances().iter().enumerate() {
            sets.push(build_context_window(d, t, frames));
            labels.push(u.label);
        }
    }
    (sets, labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_weighted_accuracy: f64,
    pub val_weighted_f1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// State at the epoch with the best validation weighted F1.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
}

/// Mini-batch training on `split.train` with early stopping on validation
/// weighted F1. Parameter init and batch order depend only on `seed`.
///
/// The untrained model counts as epoch 0, so with `epochs = 0` (or if no
/// epoch beats it) the initial state is returned.
pub fn train(config: &RunConfig, split: &Split, seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    if split.train.n_utterances() == 0 || split.val.n_utterances() == 0 {
        return Err(Error::usage("training needs non-empty train and validation splits"));
    }
    let mut model = GatedModel::new(config.model.clone(), seed)?;
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let frames = config.model.frames;
    let (sets, labels) = prediction_targets(&split.train, frames);
    let (val_sets, val_labels) = prediction_targets(&split.val, frames);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM);

    let validate = |model: &GatedModel| -> Result<MetricsReport> {
        let predicted: Vec<EmotionLabel> =
            model.posteriors_for(&val_sets)?.iter().map(argmax).collect();
        MetricsReport::from_predictions(&val_labels, &predicted)
    };
    let initial = validate(&model)?;
    let mut best = (initial.weighted_f1, 0usize, model.clone(), adam.clone());
    let mut history = Vec::new();
    let mut stale = 0;

    let mut order: Vec<usize> = (0..sets.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let where_ = || format!("epoch {epoch}, batch {b}");
            let batch_sets: Vec<StreamSet> = chunk.iter().map(|&i| sets[i].clone()).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i].index()).collect();
            let batch = StreamBatch::from_sets(&batch_sets)?;
            let mut g = Graph::new();
            let out = model
                .forward_with(&mut g, model.params(), &batch, None)
                .map_err(|e| e.with_context(where_()))?;
            let loss = g.softmax_cross_entropy(out.logits, &targets)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    op: "loss",
                    context: Some(where_()),
                });
            }
            let grads = g.backward_for(loss, model.params())?;
            adam.step(model.params_mut(), &grads)
                .map_err(|e| e.with_context(where_()))?;
            loss_sum += value * chunk.len() as f64;
        }
        let val = validate(&model)?;
        history.push(EpochLog {
            epoch,
            train_loss: loss_sum / sets.len() as f64,
            val_weighted_accuracy: val.weighted_accuracy,
            val_weighted_f1: val.weighted_f1,
        });
        if val.weighted_f1 > best.0 {
            best = (val.weighted_f1, epoch, model.clone(), adam.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    let (_, epoch, model, optimizer) = best;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: config.clone(),
            seed,
            epoch,
            model,
            optimizer,
            p0: estimate_p0(&split.train).ok(),
        },
        history,
    })
}

/// Index of the largest entry, ties to the lower label.
pub fn argmax(p: &[f64; 4]) -> EmotionLabel {
    let mut best = 0;
    for c in 1..4 {
        if p[c] > p[best] {
            best = c;
        }
    }
    EmotionLabel::ALL[best]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub dialogue_id: String,
    pub index: usize,
    pub speaker_id: String,
    pub gold: EmotionLabel,
    pub posterior: [f64; 4],
    pub label: EmotionLabel,
}

/// How to turn posteriors into labels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictOptions {
    pub decoder: DecoderKind,
    pub decode: DecodeConfig,
    /// Estimated shift probability; needed for DED unless `decode.p0` is set.
    pub p0: Option<f64>,
    /// Mixing weight of a random distribution into every posterior.
    pub noise: f64,
    pub noise_seed: u64,
}

impl PredictOptions {
    pub fn for_checkpoint(ck: &Checkpoint, decoder: DecoderKind) -> Self {
        PredictOptions {
            decoder,
            decode: ck.config.decode,
            p0: ck.p0,
            noise: ck.config.posterior_noise,
            noise_seed: ck.seed,
        }
    }
}

/// Mixes `weight` of a flat-Dirichlet draw into each posterior, in order.
pub fn add_posterior_noise(posteriors: &mut [[f64; 4]], weight: f64, seed: u64) {
    if weight == 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(NOISE_STREAM);
    for p in posteriors {
        let draw: [f64; 4] = std::array::from_fn(|_| Exp1.sample(&mut rng));
        let total: f64 = draw.iter().sum();
        for (v, d) in p.iter_mut().zip(draw) {
            *v = (1.0 - weight) * *v + weight * d / total;
        }
    }
}

/// Posteriors (optionally noised) and final labels for every utterance.
pub fn predict(model: &GatedModel, corpus: &Corpus, opts: &PredictOptions) -> Result<Vec<Prediction>> {
    let (sets, gold) = prediction_targets(corpus, model.config().frames);
    let mut posteriors = model.posteriors_for(&sets)?;
    add_posterior_noise(&mut posteriors, opts.noise, opts.noise_seed);

    let mut out = Vec::with_capacity(gold.len());
    let mut offset = 0;
    let shift = match (opts.decoder, opts.decode.p0.or(opts.p0)) {
        (DecoderKind::Ded, None) => {
            return Err(Error::usage("DED needs a p0 estimate or a decode.p0 override"))
        }
        (_, p0) => p0.map(ShiftModel::new).transpose()?,
    };
    for d in corpus.dialogues() {
        let post = &posteriors[offset..offset + d.len()];
        let labels = match (opts.decoder, shift) {
            (DecoderKind::Ded, Some(shift)) => {
                let speakers: Vec<&str> = d.utterances().iter().map(|u| u.speaker_id.as_str()).collect();
                let input = DecodeInput::new(post.to_vec(), &speakers)?;
                ded_decode(&input, &opts.decode, &shift)?.labels
            }
            _ => post.iter().map(argmax).collect(),
        };
        for (k, u) in d.utterances().iter().enumerate() {
            out.push(Prediction {
                dialogue_id: u.dialogue_id.clone(),
                index: u.index,
                speaker_id: u.speaker_id.clone(),
                gold: gold[offset + k],
                posterior: post[k],
                label: labels[k],
            });
        }
        offset += d.len();
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<Prediction>,
}

/// Scores a checkpoint on `corpus` with the given decoder. DED uses the
/// checkpoint's training-split p0 and its config's posterior noise.
pub fn evaluate(checkpoint: &Checkpoint, corpus: &Corpus, decoder: DecoderKind) -> Result<Evaluation> {
    let opts = PredictOptions::for_checkpoint(checkpoint, decoder);
    let predictions = predict(&checkpoint.model, corpus, &opts)?;
    let gold: Vec<EmotionLabel> = predictions.iter().map(|p| p.gold).collect();
    let labels: Vec<EmotionLabel> = predictions.iter().map(|p| p.label).collect();
    Ok(Evaluation {
        report: MetricsReport::from_predictions(&gold, &labels)?,
        predictions,
    })
}
