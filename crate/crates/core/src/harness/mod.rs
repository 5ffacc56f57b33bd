//! Training, evaluation, the multi-seed protocol, ablations, checkpoints
//! and result files.

mod checkpoint;
mod config;
mod metrics;
mod protocol;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::{Checkpoint, GXCK_MAGIC, GXCK_VERSION};
pub use config::{DecoderKind, FeatureMode, FfActivation, RunConfig};
pub use metrics::{ClassMetrics, MetricsReport};
pub use protocol::{
    ablate, ablate_on, format_mean_std, mean_std, run_protocol, run_protocol_on, split_csv,
    write_run_artifacts, AblationRow, AblationTable, ProtocolResult, SeedRun, Summary, SummaryRow,
};
pub use train::{
    add_posterior_noise, argmax, evaluate, predict, prediction_targets, train, EpochLog, Evaluation,
    PredictOptions, Prediction, TrainOutcome,
};

use crate::corpus::{StreamRef, StreamSet};
use crate::error::Result;
use crate::gated::{GatedModel, ModelConfig, StreamBatch};
use crate::numerics::{finite_diff_grad_check, GradCheckConfig, GradCheckReport};

/// Stream sets with every stream present and uniform(-1, 1) embeddings.
pub fn random_stream_sets(rng: &mut impl Rng, rows: usize, frames: usize, dim: usize) -> Vec<StreamSet> {
    (0..rows)
        .map(|_| {
            let refs: Vec<StreamRef> = (0..frames * 4)
                .map(|s| StreamRef {
                    utterance_index: Some(s),
                    ..StreamRef::from_slot(s)
                })
                .collect();
            let embeddings = refs
                .iter()
                .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
                .collect();
            StreamSet { refs, embeddings }
        })
        .collect()
}

/// End-to-end gradient check of the cross-entropy loss of a gated model.
///
/// Every parameter is first moved by N(0, 0.1^2) noise so the zero-initialized
/// head and gate maps do not hide the encoders' gradients. Inputs are fully
/// populated random streams with random labels.
pub fn model_grad_check(
    config: &ModelConfig,
    rows: usize,
    seed: u64,
    check: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut model = GatedModel::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let noise = Normal::new(0.0, 0.1).expect("valid normal");
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        for v in model.params_mut().get_mut(id).data_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let sets = random_stream_sets(&mut rng, rows, config.frames, config.embedding_dim);
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..4)).collect();
    let batch = StreamBatch::from_sets(&sets)?;
    finite_diff_grad_check(
        model.params(),
        |g, store| {
            let out = model.forward_with(g, store, &batch, None)?;
            g.softmax_cross_entropy(out.logits, &labels)
        },
        check,
    )
}
