//! Runs every acceptance criterion at its stated tolerance and prints one
//! PASS/FAIL line per criterion. Exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use gatedxlstm::corpus::{
    generate_synthetic, split_dialogues, ModalitySignal, SplitRatios, SyntheticCorpus,
};
use gatedxlstm::ded::{
    brute_force_decode, ddcrp_prior, ded_decode, estimate_p0, BlockState, DecodeConfig,
    DecodeInput, ShiftModel,
};
use gatedxlstm::gated::{export_gate_report, StreamBatch};
use gatedxlstm::harness::{
    ablate_on, evaluate, model_grad_check, random_stream_sets, run_protocol_on, train, DecoderKind,
    RunConfig,
};
use gatedxlstm::numerics::GradCheckConfig;
use gatedxlstm::xlstm::{ForcedGates, GateActivation, MlstmCell, MlstmState, SlstmCell, SlstmState};
use gatedxlstm::{GatedModel, Graph, ModelConfig, ParamStore, SyntheticConfig, Tensor};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, budget_s: f64) -> bool {
    elapsed.as_secs_f64() < budget_s
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn gradient_correctness() -> Outcome {
    let config = ModelConfig {
        embedding_dim: 64,
        hidden_dim: 8,
        layers: 2,
        frames: 2,
        heads: 2,
        qkv_blocks: 2,
        ..ModelConfig::default()
    };
    let check_config = GradCheckConfig {
        max_coords_per_tensor: 3,
        ..GradCheckConfig::default()
    };
    let start = Instant::now();
    let report = model_grad_check(&config, 2, 0, &check_config).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    check(
        report.max_rel_error < 1e-4 && report.coords_checked >= 500 && within(elapsed, 60.0),
        format!(
            "max rel error {:.2e} over {} coordinates in {:.1?}",
            report.max_rel_error, report.coords_checked, elapsed
        ),
    )
}

fn cell_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let mlstm = MlstmCell::new(&mut store, "m", 8, 8, 2, 2, GateActivation::Exponential, &mut rng)
        .map_err(|e| e.to_string())?;
    let slstm = SlstmCell::new(&mut store, "s", 8, 8, 2, &mut rng).map_err(|e| e.to_string())?;

    // 10,000 mLSTM steps: 100 sequences of 100 steps on fresh graphs
    let mut min_denominator = f64::INFINITY;
    let mut steps = 0;
    for _ in 0..100 {
        let mut g = Graph::new();
        let cell = mlstm.bind(&mut g, &store).map_err(|e| e.to_string())?;
        let mut state = MlstmState::zeros(&mut g, 1, 8, 2);
        for _ in 0..100 {
            let x = g.input(random_matrix(&mut rng, 1, 8, 4.0));
            let out = cell.step(&mut g, &state, x).map_err(|e| e.to_string())?;
            for d in &out.denominators {
                min_denominator = g.value(*d).data().iter().fold(min_denominator, |m, &v| m.min(v));
            }
            state = out.state;
            steps += 1;
        }
    }

    let mut g = Graph::new();
    let cell = mlstm.bind(&mut g, &store).map_err(|e| e.to_string())?;
    let mut state = MlstmState::zeros(&mut g, 2, 8, 2);
    for _ in 0..3 {
        let x = g.input(random_matrix(&mut rng, 2, 8, 1.0));
        state = cell.step(&mut g, &state, x).map_err(|e| e.to_string())?.state;
    }
    let start = state.clone();
    for _ in 0..100 {
        let x = g.input(random_matrix(&mut rng, 2, 8, 1.0));
        state = cell.step_forced(&mut g, &state, x, ForcedGates::CARRY).map_err(|e| e.to_string())?.state;
    }
    let mlstm_carry = (0..2).all(|h| {
        g.value(state.memory[h]) == g.value(start.memory[h])
            && g.value(state.normalizer[h]) == g.value(start.normalizer[h])
    });

    let cell = slstm.bind(&mut g, &store).map_err(|e| e.to_string())?;
    let mut state = SlstmState::zeros(&mut g, 2, 8);
    for _ in 0..3 {
        let x = g.input(random_matrix(&mut rng, 2, 8, 1.0));
        state = cell.step(&mut g, &state, x).map_err(|e| e.to_string())?.state;
    }
    let start = state.clone();
    for _ in 0..100 {
        let x = g.input(random_matrix(&mut rng, 2, 8, 1.0));
        state = cell.step_forced(&mut g, &state, x, ForcedGates::CARRY).map_err(|e| e.to_string())?.state;
    }
    let slstm_carry = g.value(state.cell) == g.value(start.cell)
        && g.value(state.normalizer) == g.value(start.normalizer);

    check(
        steps == 10_000 && min_denominator >= 1.0 && mlstm_carry && slstm_carry,
        format!(
            "{steps} mLSTM steps, min denominator {min_denominator}; \
             carry-through exact: mLSTM {mlstm_carry}, sLSTM {slstm_carry}"
        ),
    )
}

fn gate_contract() -> Outcome {
    let config = ModelConfig {
        embedding_dim: 16,
        steps: 4,
        hidden_dim: 4,
        layers: 1,
        heads: 2,
        qkv_blocks: 2,
        frames: 2,
        ..ModelConfig::default()
    };
    let mut model = GatedModel::new(config.clone(), 3).map_err(|e| e.to_string())?;
    // move off the zero-initialized head and gate maps
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        for v in model.params_mut().get_mut(id).data_mut() {
            *v += noise.sample(&mut rng);
        }
    }

    let mut reference_exact = true;
    let mut learned_in_unit = true;
    for _ in 0..1000 {
        let sets = random_stream_sets(&mut rng, 1, config.frames, config.embedding_dim);
        let batch = StreamBatch::from_sets(&sets).map_err(|e| e.to_string())?;
        for row in model.gate_weights(&batch).map_err(|e| e.to_string())? {
            reference_exact &= row[0] == 1.0;
            learned_in_unit &= row[1..].iter().all(|&w| w > 0.0 && w < 1.0);
        }
    }

    let mut max_diff: f64 = 0.0;
    let sets = random_stream_sets(&mut rng, 4, config.frames, config.embedding_dim);
    let base = StreamBatch::from_sets(&sets).map_err(|e| e.to_string())?;
    for slot in 1..model.n_streams() {
        let mut forced = vec![None; model.n_streams()];
        forced[slot] = Some(0.0);
        let mut perturbed = base.clone();
        perturbed.embeddings[slot] = random_matrix(&mut rng, 4, config.embedding_dim, 5.0);
        let logits = |batch: &StreamBatch| -> Result<Tensor, String> {
            let mut g = Graph::new();
            let out = model
                .forward_with(&mut g, model.params(), batch, Some(&forced))
                .map_err(|e| e.to_string())?;
            Ok(g.value(out.logits).clone())
        };
        let a = logits(&base)?;
        let b = logits(&perturbed)?;
        for (x, y) in a.data().iter().zip(b.data()) {
            max_diff = max_diff.max((x - y).abs());
        }
    }
    check(
        reference_exact && learned_in_unit && max_diff < 1e-12,
        format!(
            "reference == 1 in 1000 forwards: {reference_exact}; learned in (0,1): {learned_in_unit}; \
             forced-zero perturbation max |dlogit| {max_diff:.1e}"
        ),
    )
}

fn random_decode_instance(rng: &mut ChaCha8Rng, k: usize) -> (DecodeInput, ShiftModel, f64) {
    let posteriors = (0..k)
        .map(|_| {
            let mut p = [0.0; 4];
            for v in &mut p {
                *v = rng.random_range(0.01..1.0f64).powi(3);
            }
            let z: f64 = p.iter().sum();
            p.map(|v| v / z)
        })
        .collect();
    let n_speakers = rng.random_range(1..=3);
    let names = ["a", "b", "c"];
    let speakers: Vec<&str> = (0..k).map(|_| names[rng.random_range(0..n_speakers)]).collect();
    let input = DecodeInput::new(posteriors, &speakers).unwrap();
    let shift = ShiftModel::new(rng.random_range(0.05..0.95)).unwrap();
    (input, shift, rng.random_range(0.1..5.0))
}

fn ded_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = Instant::now();
    let (mut exact, mut monotone) = (0, 0);
    for _ in 0..100 {
        let k = rng.random_range(1..=6);
        let (input, shift, alpha) = random_decode_instance(&mut rng, k);
        let decode = |b: usize| {
            let config = DecodeConfig {
                beam_width: b,
                alpha,
                ..DecodeConfig::default()
            };
            ded_decode(&input, &config, &shift).unwrap()
        };
        let truth = brute_force_decode(&input, &shift, alpha, 1.0).map_err(|e| e.to_string())?;
        let full = decode(4usize.pow(k as u32));
        exact += (full.labels == truth.labels && full.log_score == truth.log_score) as usize;

        let mut widths: Vec<usize> = (1..=16).collect();
        widths.extend((2..=k as u32).map(|e| 4usize.pow(e)).filter(|&b| b > 16));
        let scores: Vec<f64> = widths.iter().map(|&b| decode(b).log_score).collect();
        monotone += scores.windows(2).all(|w| w[1] >= w[0]) as usize;
    }
    let elapsed = start.elapsed();
    check(
        exact == 100 && monotone == 100 && within(elapsed, 30.0),
        format!("exact {exact}/100, monotone {monotone}/100 in {elapsed:.1?}"),
    )
}

fn ddcrp_validity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let mut counts = [0usize; 4];
        for c in &mut counts {
            if rng.random_bool(0.6) {
                *c = rng.random_range(1..20);
            }
        }
        let prior = ddcrp_prior(&BlockState::from_counts(counts, rng.random_range(0.01..10.0)));
        worst = worst.max((prior.iter().sum::<f64>() - 1.0).abs());
    }
    // label order: anger, happiness, neutrality, sadness
    let hand = ddcrp_prior(&BlockState::from_counts([2, 0, 0, 1], 1.0));
    let expected = [0.5, 0.125, 0.125, 0.25];
    let hand_ok = hand.iter().zip(expected).all(|(a, b)| (a - b).abs() < 1e-15);
    check(
        worst < 1e-12 && hand_ok,
        format!("max |sum - 1| {worst:.1e}; hand case {hand:?}"),
    )
}

fn learnability_config() -> RunConfig {
    let synthetic = SyntheticConfig {
        n_dialogues: 200,
        self_transition_prob: 0.8,
        signal: ModalitySignal {
            audio: 1.0,
            text: 0.5,
        },
        noise_sigma: 1.0,
        embedding_dim: 64,
        ..SyntheticConfig::default()
    };
    RunConfig {
        model: ModelConfig {
            embedding_dim: 64,
            steps: 16,
            hidden_dim: 8,
            layers: 2,
            heads: 2,
            qkv_blocks: 2,
            frames: 3,
            ..ModelConfig::default()
        },
        synthetic,
        epochs: 10,
        seeds: vec![42],
        ..RunConfig::default()
    }
}

/// Accuracy of the Bayes classifier that knows the generator's class means,
/// using the target's own audio and text embeddings.
fn plug_in_accuracy(synthetic: &SyntheticCorpus, signal: ModalitySignal) -> f64 {
    let mut correct = 0;
    let mut n = 0;
    for d in synthetic.corpus.dialogues() {
        for u in d.utterances() {
            let score = |c: usize| -> f64 {
                let mean = &synthetic.class_means[c];
                let dist = |e: &[f32], s: f64| -> f64 {
                    e.iter().zip(mean).map(|(&x, m)| (x as f64 - s * m).powi(2)).sum()
                };
                -dist(&u.audio_embedding, signal.audio) - dist(&u.text_embedding, signal.text)
            };
            let best = (0..4).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap();
            correct += (best == u.label.index()) as usize;
            n += 1;
        }
    }
    correct as f64 / n as f64
}

fn synthetic_learnability() -> Outcome {
    let config = learnability_config();
    let synthetic = SyntheticCorpus::generate(&config.synthetic).map_err(|e| e.to_string())?;
    let bayes = plug_in_accuracy(&synthetic, config.synthetic.signal);
    let start = Instant::now();
    let split = split_dialogues(&synthetic.corpus, SplitRatios::default(), config.split_seed)
        .map_err(|e| e.to_string())?;
    let outcome = train(&config, &split, 42).map_err(|e| e.to_string())?;
    let eval = evaluate(&outcome.checkpoint, &split.test, DecoderKind::None).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let wa = eval.report.weighted_accuracy;
    check(
        wa >= 0.90 && bayes > 0.97 && within(elapsed, 300.0),
        format!("test W-Acc {wa:.4}, plug-in Bayes rate {bayes:.4}, {elapsed:.1?}"),
    )
}

fn gate_config(seed: u64) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            embedding_dim: 64,
            steps: 8,
            hidden_dim: 8,
            layers: 2,
            heads: 2,
            qkv_blocks: 2,
            frames: 3,
            share_frames: true,
            ..ModelConfig::default()
        },
        synthetic: SyntheticConfig {
            n_dialogues: 200,
            self_transition_prob: 0.95,
            signal: ModalitySignal {
                audio: 1.0,
                text: 0.0,
            },
            noise_sigma: 2.0,
            embedding_dim: 64,
            ..SyntheticConfig::default()
        },
        learning_rate: 1e-2,
        epochs: 10,
        patience: 10,
        seeds: vec![seed],
        ..RunConfig::default()
    }
}

fn gate_interpretability() -> Outcome {
    let seeds = [42u64, 43, 45, 46, 50];
    let corpus = generate_synthetic(&gate_config(0).synthetic).map_err(|e| e.to_string())?;
    let split = split_dialogues(&corpus, SplitRatios::default(), 42).map_err(|e| e.to_string())?;
    let mut wins = 0;
    let mut margins = Vec::new();
    for seed in seeds {
        let outcome = train(&gate_config(seed), &split, seed).map_err(|e| e.to_string())?;
        let report = export_gate_report(&outcome.checkpoint.model, &split.test).map_err(|e| e.to_string())?;
        let is_self_audio = |r: &&gatedxlstm::gated::GateReportRow| {
            r.stream.role.as_str() == "self" && r.stream.modality.as_str() == "audio"
        };
        let lowest_self_audio = report
            .rows
            .iter()
            .filter(is_self_audio)
            .map(|r| r.mean_abs_weight)
            .fold(f64::INFINITY, f64::min);
        let highest_other = report
            .rows
            .iter()
            .filter(|r| !is_self_audio(r))
            .map(|r| r.mean_abs_weight)
            .fold(f64::NEG_INFINITY, f64::max);
        wins += (lowest_self_audio > highest_other) as usize;
        margins.push(format!("{:+.3}", lowest_self_audio - highest_other));
    }
    check(
        wins >= 4,
        format!("self-audio ranked first in {wins}/5 seeds (margins {})", margins.join(", ")),
    )
}

fn ablation_config() -> RunConfig {
    let mut config = RunConfig::from_toml_str(include_str!("../../../configs/small.toml")).unwrap();
    config.seeds = vec![42, 43, 45, 46, 50];
    config
}

fn ablation_trend() -> Outcome {
    let config = ablation_config();
    let corpus = generate_synthetic(&config.synthetic).map_err(|e| e.to_string())?;
    let table = ablate_on(&config, &corpus).map_err(|e| e.to_string())?;
    let mean = |model: &str, decoder: DecoderKind| -> f64 {
        table
            .rows
            .iter()
            .find(|r| r.model.as_str() == model && r.decoder == decoder)
            .map(|r| r.mean_wa())
            .unwrap_or(f64::NAN)
    };
    let base = mean("base-xlstm", DecoderKind::None);
    let gated = mean("gated-xlstm", DecoderKind::None);
    let gated_ded = mean("gated-xlstm", DecoderKind::Ded);
    check(
        gated >= base && gated_ded >= gated,
        format!(
            "mean W-Acc base {:.2}%, gated {:.2}%, gated+DED {:.2}%",
            100.0 * base,
            100.0 * gated,
            100.0 * gated_ded
        ),
    )
}

fn p0_estimation() -> Outcome {
    let corpus = generate_synthetic(&SyntheticConfig {
        self_transition_prob: 0.8,
        ..SyntheticConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let p0 = estimate_p0(&corpus).map_err(|e| e.to_string())?;
    check((0.17..=0.23).contains(&p0), format!("estimated p0 {p0:.4}"))
}

fn determinism() -> Outcome {
    let mut config = ablation_config();
    config.epochs = 2;
    config.synthetic.n_dialogues = 30;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let corpus = generate_synthetic(&config.synthetic).map_err(|e| e.to_string())?;
        run_protocol_on(&config, &corpus)
            .and_then(|r| r.write_to(dir.path()))
            .map_err(|e| e.to_string())?;
    }
    let a = std::fs::read(dirs[0].path().join("summary.csv")).map_err(|e| e.to_string())?;
    let b = std::fs::read(dirs[1].path().join("summary.csv")).map_err(|e| e.to_string())?;
    check(
        a == b && !a.is_empty(),
        format!("summary.csv {} bytes, identical: {}", a.len(), a == b),
    )
}

fn main() {
    // `cargo test -- --list` and filters: this target has a single entry
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let filter = args.iter().find(|a| !a.starts_with('-')).cloned();

    let criteria: [Criterion; 10] = [
        ("gradient correctness", gradient_correctness),
        ("cell invariants", cell_invariants),
        ("gate contract", gate_contract),
        ("DED oracle equivalence", ded_oracle),
        ("ddCRP distribution validity", ddcrp_validity),
        ("synthetic learnability", synthetic_learnability),
        ("gate interpretability", gate_interpretability),
        ("ablation trend", ablation_trend),
        ("p0 estimation", p0_estimation),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        match run() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
