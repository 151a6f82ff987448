//! Command-line harness: corpus synthesis, vocabulary building, training,
//! decoding, scoring, parameter accounting, gradient auditing, and the
//! paired embedding comparison.
//!
//! Everything written to stdout and to files is a deterministic function of
//! the arguments and the config file; wall-clock timings appear only on
//! stderr. Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! I/O error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use caaed::config::ExperimentConfig;
use caaed::data::{read_dataset, relabel, write_dataset, Utterance};
use caaed::decoding::{
    corpus_wer, greedy_decode, parse_hypothesis_file, wer, write_hypothesis_file, ScoredLine,
};
use caaed::error::{Error, Result};
use caaed::experiment;
use caaed::model::{
    count_breakdown, fd_check, init_params, parameter_reduction_rate, read_checkpoint,
    write_checkpoint, EmbeddingKind, Model, ModelConfig, MIXED_UNIT_INVENTORY,
    WORD_PIECE_INVENTORY,
};
use caaed::tensor::{Mode, Tensor};
use caaed::training::{forward_utterance, train};
use caaed::vocab::Vocab;

#[derive(Parser)]
#[command(
    name = "caaed",
    version,
    about = "Attention-based encoder-decoder speech recognition with \
             interchangeable output-unit embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the seeded corpus: datasets plus transcript files
    SynthData {
        /// Experiment configuration file
        #[arg(long)]
        config: PathBuf,
        /// Directory for train.bin, test.bin, train.txt, test.txt
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Build a unit inventory from a transcript file
    BuildVocab {
        /// Experiment configuration file
        #[arg(long)]
        config: PathBuf,
        /// Transcript file, one utterance per line
        #[arg(long)]
        corpus: PathBuf,
        /// Output vocabulary file
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes best.ckpt, final.ckpt, and log.tsv
    Train {
        /// Experiment configuration file
        #[arg(long)]
        config: PathBuf,
        /// Vocabulary file from build-vocab
        #[arg(long)]
        vocab: PathBuf,
        /// Output directory for checkpoints and the training log
        #[arg(long)]
        out_dir: PathBuf,
        /// Override the embedding provider from the config file
        /// (lookup | char-aware)
        #[arg(long)]
        embedding: Option<String>,
    },
    /// Greedy-decode a dataset with a trained checkpoint
    Decode {
        /// Experiment configuration file
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint from train
        #[arg(long)]
        ckpt: PathBuf,
        /// Vocabulary file the checkpoint was trained with
        #[arg(long)]
        vocab: PathBuf,
        /// Dataset to decode
        #[arg(long)]
        data: PathBuf,
        /// Output hypothesis file (tab-separated)
        #[arg(long)]
        out: PathBuf,
        /// Compose each embedding on the fly instead of precomputing the
        /// whole inventory once (same results, different path)
        #[arg(long)]
        on_the_fly: bool,
    },
    /// Score a hypothesis file: pooled word error rate and edit mix
    Score {
        /// Hypothesis file from decode
        #[arg(long)]
        hyps: PathBuf,
    },
    /// Report parameter budgets for both embedding providers
    CountParams {
        /// Score this experiment's model instead of the built-in
        /// reference configurations
        #[arg(long)]
        config: Option<PathBuf>,
        /// Vocabulary file sizing the inventory (required with --config)
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Audit analytic gradients against central finite differences
    Gradcheck,
    /// Train both providers at several seeds and print the comparison table
    Compare {
        /// Experiment configuration file
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated training seeds (at least three, distinct)
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Also write the table to this file
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Render clap's message ourselves so bad usage exits 1 (clap
            // defaults to 2, which this tool reserves for data errors);
            // --help and --version still exit 0.
            let code = i32::from(e.use_stderr());
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthData { config, out_dir } => synth_data(&config, &out_dir),
        Command::BuildVocab { config, corpus, out } => build_vocab(&config, &corpus, &out),
        Command::Train { config, vocab, out_dir, embedding } => {
            run_train(&config, &vocab, &out_dir, embedding.as_deref())
        }
        Command::Decode { config, ckpt, vocab, data, out, on_the_fly } => {
            decode(&config, &ckpt, &vocab, &data, &out, on_the_fly)
        }
        Command::Score { hyps } => score(&hyps),
        Command::CountParams { config, vocab } => count_params(config.as_deref(), vocab.as_deref()),
        Command::Gradcheck => gradcheck(),
        Command::Compare { config, seeds, out } => compare(&config, &seeds, out.as_deref()),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

fn load_vocab(path: &Path) -> Result<Vocab> {
    Vocab::from_text(&read_text(path)?)
}

fn synth_data(config: &Path, out_dir: &Path) -> Result<()> {
    let cfg = ExperimentConfig::from_file(config)?;
    if cfg.data.train_path.is_some() || cfg.data.test_path.is_some() {
        return Err(Error::Config(
            "synth-data generates data; clear train_path/test_path in [data]".into(),
        ));
    }
    let (train_set, test_set) = cfg.data.datasets()?;
    std::fs::create_dir_all(out_dir)?;
    write_dataset(&out_dir.join("train.bin"), &train_set)?;
    write_dataset(&out_dir.join("test.bin"), &test_set)?;
    for (name, set) in [("train.txt", &train_set), ("test.txt", &test_set)] {
        let mut text = String::new();
        for u in set.iter() {
            text.push_str(&u.transcript);
            text.push('\n');
        }
        std::fs::write(out_dir.join(name), text)?;
    }
    let d_x = train_set.first().map_or(0, |u| u.features.shape()[1]);
    println!(
        "wrote {} train / {} test utterances ({d_x} feature dims) to {}",
        train_set.len(),
        test_set.len(),
        out_dir.display()
    );
    Ok(())
}

fn build_vocab(config: &Path, corpus: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::from_file(config)?;
    let lines: Vec<String> = read_text(corpus)?.lines().map(str::to_string).collect();
    let vocab = cfg.vocab.build(&lines)?;
    std::fs::write(out, vocab.to_text())?;
    println!("built {} vocabulary: {} units -> {}", vocab.kind().as_str(), vocab.size(), out.display());
    Ok(())
}

fn run_train(config: &Path, vocab: &Path, out_dir: &Path, embedding: Option<&str>) -> Result<()> {
    let cfg = ExperimentConfig::from_file(config)?;
    let vocab = load_vocab(vocab)?;
    let (mut train_set, mut dev_set) = cfg.data.datasets()?;
    relabel(&mut train_set, &vocab);
    relabel(&mut dev_set, &vocab);
    let embedding = match embedding {
        Some(s) => EmbeddingKind::parse(s)?,
        None => cfg.model.embedding,
    };
    let Some(first) = train_set.first() else {
        return Err(Error::Data("training set is empty".into()));
    };
    let d_x = first.features.shape()[1];
    let model_config = cfg.model.to_model_config(&vocab, d_x, embedding);
    let model = Model::new(model_config.clone(), &vocab)?;
    let params = init_params(&model_config, cfg.train.seed);

    std::fs::create_dir_all(out_dir)?;
    let start = Instant::now();
    let epochs = cfg.train.epochs;
    let outcome = train(&model, &vocab, params, &train_set, &dev_set, &cfg.train, |s| {
        eprintln!(
            "epoch {:>3}/{epochs}: train {:.4} dev {:.4} wer {:.4} p {:.2} [{:.1}s]",
            s.epoch + 1,
            s.train_loss,
            s.dev_loss,
            s.dev_wer,
            s.sampling_p,
            start.elapsed().as_secs_f64()
        );
    })?;

    let mut log = String::from("# epoch\ttrain_loss\tdev_loss\tdev_wer\tsampling_p\n");
    for s in &outcome.log {
        log.push_str(&s.tsv_line());
        log.push('\n');
    }
    std::fs::write(out_dir.join("log.tsv"), log)?;
    write_checkpoint(&out_dir.join("best.ckpt"), &model_config, &outcome.best_params)?;
    write_checkpoint(&out_dir.join("final.ckpt"), &model_config, &outcome.final_params)?;

    let best = &outcome.log[outcome.best_epoch];
    println!("trained {} model: {} epochs, {} utterances", embedding.as_str(), epochs, train_set.len());
    println!("best epoch {}: dev loss {:.6}, dev wer {:.6}", best.epoch, best.dev_loss, best.dev_wer);
    println!("wrote best.ckpt, final.ckpt, log.tsv to {}", out_dir.display());
    eprintln!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn decode(
    config: &Path,
    ckpt: &Path,
    vocab: &Path,
    data: &Path,
    out: &Path,
    on_the_fly: bool,
) -> Result<()> {
    let cfg = ExperimentConfig::from_file(config)?;
    let ckpt = read_checkpoint(ckpt)?;
    let vocab = load_vocab(vocab)?;
    let model = Model::new(ckpt.config.clone(), &vocab)?;
    let utterances = read_dataset(data)?;
    let start = Instant::now();
    let table = if on_the_fly { None } else { Some(model.precompute_table(&ckpt.params)?) };

    let mut lines = Vec::with_capacity(utterances.len());
    for (index, utt) in utterances.iter().enumerate() {
        let hyp = greedy_decode(
            &model,
            &ckpt.params,
            &vocab,
            &utt.features,
            cfg.decode.max_len,
            table.as_ref(),
        )?;
        lines.push(ScoredLine {
            index,
            rate: wer(&utt.transcript, &hyp.text).rate,
            reference: utt.transcript.clone(),
            hypothesis: hyp.text,
        });
    }
    write_hypothesis_file(out, &lines)?;
    let pairs: Vec<(String, String)> =
        lines.iter().map(|l| (l.reference.clone(), l.hypothesis.clone())).collect();
    println!("decoded {} utterances -> {}", lines.len(), out.display());
    println!("corpus_wer\t{:.6}", corpus_wer(&pairs));
    eprintln!(
        "embeddings {} [{:.1}s]",
        if on_the_fly { "composed on the fly" } else { "precomputed" },
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn score(hyps: &Path) -> Result<()> {
    let lines = parse_hypothesis_file(&read_text(hyps)?)?;
    let (mut subs, mut dels, mut inss, mut words) = (0usize, 0usize, 0usize, 0usize);
    for l in &lines {
        let s = wer(&l.reference, &l.hypothesis);
        subs += s.substitutions;
        dels += s.deletions;
        inss += s.insertions;
        words += s.ref_len;
    }
    let edits = subs + dels + inss;
    println!("utterances\t{}", lines.len());
    println!("reference_words\t{words}");
    println!("substitutions\t{subs}");
    println!("deletions\t{dels}");
    println!("insertions\t{inss}");
    println!("corpus_wer\t{:.6}", edits as f64 / words.max(1) as f64);
    Ok(())
}

fn print_count_block(label: &str, lookup: &ModelConfig, composed: &ModelConfig) {
    let a = count_breakdown(lookup);
    let b = count_breakdown(composed);
    println!("{label}: {} units, {} encoder layers", lookup.vocab_size, lookup.encoder_layers);
    for (kind, c) in [("lookup", &a), ("char-aware", &b)] {
        println!(
            "  {kind:<10} total {:>11} (encoder {}, attention {}, decoder {}, output {}, embedding {})",
            c.total(),
            c.encoder,
            c.attention,
            c.decoder,
            c.output,
            c.embedding
        );
    }
    println!(
        "  savings {} parameters, reduction {:.2}%",
        a.total() as i64 - b.total() as i64,
        parameter_reduction_rate(a.total(), b.total())
    );
}

fn count_params(config: Option<&Path>, vocab: Option<&Path>) -> Result<()> {
    match (config, vocab) {
        (None, None) => {
            for (label, size) in
                [("word-piece", WORD_PIECE_INVENTORY), ("mixed-unit", MIXED_UNIT_INVENTORY)]
            {
                for layers in [4usize, 6] {
                    let lookup = ModelConfig::reference(size, layers, EmbeddingKind::Lookup);
                    let composed = ModelConfig::reference(size, layers, EmbeddingKind::CharAware);
                    print_count_block(label, &lookup, &composed);
                }
            }
            Ok(())
        }
        (Some(config), Some(vocab)) => {
            let cfg = ExperimentConfig::from_file(config)?;
            let vocab = load_vocab(vocab)?;
            let d_x = cfg.data.language()?.d_x();
            let lookup = cfg.model.to_model_config(&vocab, d_x, EmbeddingKind::Lookup);
            let composed = cfg.model.to_model_config(&vocab, d_x, EmbeddingKind::CharAware);
            lookup.validate()?;
            composed.validate()?;
            print_count_block("configured model", &lookup, &composed);
            Ok(())
        }
        _ => Err(Error::Usage("--config and --vocab must be given together".into())),
    }
}

/// The fixed miniature model the gradient audit runs on: both providers,
/// every parameter, one full teacher-forced utterance loss.
fn gradcheck() -> Result<()> {
    const TOLERANCE: f64 = 1e-4;
    let vocab = Vocab::character();
    let transcript = "ab";
    let mut rng = caaed::rng::stream(2027, "gradcheck/features");
    let frames = 3;
    let d_x = 2;
    let mut features = Tensor::from_vec(
        vec![frames, d_x],
        (0..frames * d_x).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect(),
    )?;
    features.quantize_f32();
    let utt = Utterance {
        features,
        labels: vocab.tokenize(transcript),
        transcript: transcript.into(),
    };

    let mut worst_overall = 0.0f64;
    for kind in [EmbeddingKind::Lookup, EmbeddingKind::CharAware] {
        let config = ModelConfig {
            vocab_size: vocab.size(),
            n_chars: vocab.char_inventory().len(),
            d_x,
            encoder_layers: 2,
            decoder_layers: 2,
            hidden: 3,
            char_embed_dim: 2,
            ca_layers: 2,
            attn_filter_len: 3,
            dropout_p: 0.0,
            embedding: kind,
        };
        let model = Model::new(config.clone(), &vocab)?;
        let params = init_params(&config, 2027);
        let worst = fd_check(&params, 1e-5, |g, binder| {
            let mut unused = caaed::rng::stream(0, "gradcheck/unused");
            let fwd =
                forward_utterance(&model, g, binder, &utt, 0.0, 0.1, Mode::Eval, &mut unused)?;
            Ok(fwd.loss)
        })?;
        println!(
            "{:<10} worst relative error {:.3e} over {} parameters",
            kind.as_str(),
            worst,
            count_breakdown(&config).total()
        );
        worst_overall = worst_overall.max(worst);
    }
    if worst_overall < TOLERANCE {
        println!("gradcheck passed: worst {worst_overall:.3e} < {TOLERANCE:.1e}");
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient audit failed: worst relative error {worst_overall:.3e} >= {TOLERANCE:.1e}"
        )))
    }
}

fn compare(config: &Path, seeds: &[u64], out: Option<&Path>) -> Result<()> {
    let cfg = ExperimentConfig::from_file(config)?;
    let start = Instant::now();
    let report = experiment::compare(&cfg, seeds, &mut |msg| {
        eprintln!("[{:7.1}s] {msg}", start.elapsed().as_secs_f64());
    })?;
    let text = report.render();
    if let Some(out) = out {
        std::fs::write(out, &text)?;
    }
    print!("{text}");
    Ok(())
}
