use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use gatedxlstm::corpus::{generate_synthetic, load_corpus, split_dialogues, write_corpus, SplitRatios};
use gatedxlstm::ded::{decode_posterior_records, read_posteriors_file, ShiftModel, UtterancePosterior};
use gatedxlstm::gated::export_gate_report;
use gatedxlstm::harness::{
    ablate, evaluate, model_grad_check, run_protocol, split_csv, train, write_run_artifacts,
    Checkpoint, DecoderKind, RunConfig,
};
use gatedxlstm::numerics::GradCheckConfig;
use gatedxlstm::{Corpus, Error, ModelConfig, Result};

#[derive(Parser, Debug)]
#[command(name = "gxlstm", version, about = "Gated xLSTM emotion recognition in conversation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seeds (and the synthetic generator seed for gen-data).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out_dir)?;
        Ok(&self.out_dir)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DecoderArg {
    None,
    Ded,
}

impl From<DecoderArg> for DecoderKind {
    fn from(d: DecoderArg) -> Self {
        match d {
            DecoderArg::None => DecoderKind::None,
            DecoderArg::Ded => DecoderKind::Ded,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic GXEB corpus from the `[synthetic]` settings.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output file name inside the output directory.
        #[arg(long, default_value = "corpus.gxeb")]
        output: String,
    },
    /// Train one seed and write metrics, gates and the checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on its test split (or on --corpus).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate every dialogue of this GXEB file instead.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum)]
        decoder: Option<DecoderArg>,
        /// Also write per-utterance posteriors as JSON lines.
        #[arg(long)]
        posteriors: Option<PathBuf>,
    },
    /// Re-decode a posterior JSON-lines file with DED.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Shift probability; falls back to `decode.p0` in the config.
        #[arg(long)]
        p0: Option<f64>,
        #[arg(long)]
        beam_width: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value = "decoded.jsonl")]
        output: String,
    },
    /// Base/gated x none/DED grid over all seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate every seed and write the mean ± std summary.
    Protocol {
        #[command(flatten)]
        common: Common,
    },
    /// Mean absolute gate weight per stream, as CSV and SVG.
    ReportGates {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Finite-difference check of the full model's gradients.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 64)]
        embedding_dim: usize,
        #[arg(long, default_value_t = 8)]
        hidden_dim: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 2)]
        frames: usize,
        #[arg(long, default_value_t = 2)]
        rows: usize,
        #[arg(long, default_value_t = 3)]
        coords_per_tensor: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            eprintln!();
            let _ = Cli::command().write_long_help(&mut std::io::stderr());
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, output } => gen_data(&common, &output),
        Command::Train { common } => train_cmd(&common),
        Command::Eval {
            common,
            checkpoint,
            corpus,
            decoder,
            posteriors,
        } => eval_cmd(&common, &checkpoint, corpus.as_deref(), decoder, posteriors.as_deref()),
        Command::Decode {
            common,
            input,
            p0,
            beam_width,
            alpha,
            output,
        } => decode_cmd(&common, &input, p0, beam_width, alpha, &output),
        Command::Ablate { common } => ablate_cmd(&common),
        Command::Protocol { common } => protocol_cmd(&common),
        Command::ReportGates {
            common,
            checkpoint,
            corpus,
        } => report_gates_cmd(&common, &checkpoint, corpus.as_deref()),
        Command::GradCheck {
            common,
            embedding_dim,
            hidden_dim,
            layers,
            frames,
            rows,
            coords_per_tensor,
        } => {
            let model = ModelConfig {
                embedding_dim,
                hidden_dim,
                layers,
                frames,
                heads: 2,
                qkv_blocks: 2,
                ..ModelConfig::default()
            };
            let check = GradCheckConfig {
                max_coords_per_tensor: coords_per_tensor,
                ..GradCheckConfig::default()
            };
            let report = model_grad_check(&model, rows, common.seed.unwrap_or(0), &check)?;
            println!("coordinates checked: {}", report.coords_checked);
            println!("max relative error:  {:.3e}", report.max_rel_error);
            if let Some(w) = &report.worst {
                println!(
                    "worst: {}[{}] analytic {:.6e} numeric {:.6e}",
                    w.param, w.index, w.analytic, w.numeric
                );
            }
            if report.passed() {
                println!("PASS (tolerance {:.0e})", report.tolerance);
                Ok(())
            } else {
                println!("FAIL (tolerance {:.0e})", report.tolerance);
                Err(Error::NonFinite {
                    op: "grad-check",
                    context: Some(format!("max relative error {:.3e}", report.max_rel_error)),
                })
            }
        }
    }
}

fn gen_data(common: &Common, output: &str) -> Result<()> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.synthetic.seed = seed;
    }
    let corpus = generate_synthetic(&cfg.synthetic)?;
    let path = common.out_dir()?.join(output);
    write_corpus(&corpus, &path)?;
    println!(
        "wrote {} ({} dialogues, {} utterances, dim {})",
        path.display(),
        corpus.dialogues().len(),
        corpus.n_utterances(),
        corpus.embedding_dim()
    );
    Ok(())
}

fn train_cmd(common: &Common) -> Result<()> {
    let cfg = common.run_config()?;
    let seed = cfg.seeds[0];
    let corpus = cfg.load_corpus()?;
    let split = split_dialogues(&corpus, SplitRatios::default(), cfg.split_seed)?;
    let outcome = train(&cfg, &split, seed)?;
    for h in &outcome.history {
        println!(
            "epoch {:>3}  loss {:.4}  val W-Acc {:.4}  val W-F1 {:.4}",
            h.epoch, h.train_loss, h.val_weighted_accuracy, h.val_weighted_f1
        );
    }
    println!("best epoch {}", outcome.checkpoint.epoch);
    let eval = evaluate(&outcome.checkpoint, &split.test, cfg.decoder)?;
    warn_all(&eval.report.warnings);
    print!("{}", eval.report.to_table());
    let dir = common.out_dir()?;
    write_run_artifacts(dir, &outcome, &eval.report, &split.test)?;
    fs::write(dir.join("split.csv"), split_csv(&split))?;
    Ok(())
}

/// The corpus to evaluate on: an explicit file, or the checkpoint's own test
/// split.
fn eval_corpus(ck: &Checkpoint, corpus: Option<&Path>) -> Result<Corpus> {
    match corpus {
        Some(path) => load_corpus(path),
        None => {
            let full = ck.config.load_corpus()?;
            Ok(split_dialogues(&full, SplitRatios::default(), ck.config.split_seed)?.test)
        }
    }
}

fn eval_cmd(
    common: &Common,
    checkpoint: &Path,
    corpus: Option<&Path>,
    decoder: Option<DecoderArg>,
    posteriors: Option<&Path>,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let corpus = eval_corpus(&ck, corpus)?;
    let decoder = decoder.map_or(ck.config.decoder, DecoderKind::from);
    let eval = evaluate(&ck, &corpus, decoder)?;
    warn_all(&eval.report.warnings);
    print!("{}", eval.report.to_table());
    let dir = common.out_dir()?;
    fs::write(dir.join("metrics.csv"), eval.report.to_csv())?;
    fs::write(dir.join("confusion.csv"), eval.report.confusion_csv())?;
    if let Some(path) = posteriors {
        let records: Vec<UtterancePosterior> = eval
            .predictions
            .iter()
            .map(|p| UtterancePosterior {
                dialogue_id: p.dialogue_id.clone(),
                index: p.index,
                speaker_id: p.speaker_id.clone(),
                posterior: p.posterior,
                gold: Some(p.gold),
            })
            .collect();
        let file = BufWriter::new(fs::File::create(path)?);
        gatedxlstm::ded::write_posteriors(file, &records)?;
    }
    Ok(())
}

fn decode_cmd(
    common: &Common,
    input: &Path,
    p0: Option<f64>,
    beam_width: Option<usize>,
    alpha: Option<f64>,
    output: &str,
) -> Result<()> {
    let cfg = common.run_config()?;
    let mut decode = cfg.decode;
    if let Some(b) = beam_width {
        decode.beam_width = b;
    }
    if let Some(a) = alpha {
        decode.alpha = a;
    }
    let p0 = p0
        .or(decode.p0)
        .ok_or_else(|| Error::Usage("decode needs --p0 or decode.p0 in the config".into()))?;
    decode.p0 = None;
    let records = read_posteriors_file(input)?;
    let decoded = decode_posterior_records(&records, &decode, &ShiftModel::new(p0)?)?;

    let path = common.out_dir()?.join(output);
    let mut out = BufWriter::new(fs::File::create(&path)?);
    let (mut correct, mut with_gold) = (0usize, 0usize);
    for (rec, label) in &decoded {
        let line = serde_json::json!({
            "dialogue_id": rec.dialogue_id,
            "index": rec.index,
            "speaker_id": rec.speaker_id,
            "label": label,
        });
        writeln!(out, "{line}")?;
        if let Some(g) = rec.gold {
            with_gold += 1;
            correct += (g == *label) as usize;
        }
    }
    out.flush()?;
    println!("decoded {} utterances to {}", decoded.len(), path.display());
    if with_gold > 0 {
        println!("accuracy against gold: {:.4}", correct as f64 / with_gold as f64);
    }
    Ok(())
}

fn ablate_cmd(common: &Common) -> Result<()> {
    let cfg = common.run_config()?;
    let table = ablate(&cfg)?;
    print!("{}", table.to_table());
    fs::write(common.out_dir()?.join("ablation.csv"), table.to_csv())?;
    Ok(())
}

fn protocol_cmd(common: &Common) -> Result<()> {
    let cfg = common.run_config()?;
    let result = run_protocol(&cfg)?;
    for r in &result.runs {
        warn_all(&r.report.warnings);
    }
    print!("{}", result.seeds_csv());
    print!("{}", result.summary.to_csv());
    result.write_to(common.out_dir()?)
}

fn report_gates_cmd(common: &Common, checkpoint: &Path, corpus: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let corpus = eval_corpus(&ck, corpus)?;
    let report = export_gate_report(&ck.model, &corpus)?;
    let dir = common.out_dir()?;
    report.write_csv(dir.join("gates.csv"))?;
    fs::write(dir.join("gates.svg"), report.to_svg())?;
    print!("{}", report.to_csv()?);
    Ok(())
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}
