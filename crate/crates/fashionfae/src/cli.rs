//! Single command-line entry point for the whole pipeline:
//! corpus generation, tokenizer training, pre-training, fine-tuning,
//! evaluation, gradient checking, and report emission.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use rand::RngCore;

use crate::autodiff::checkpoint::{load_parameters, save_parameters};
use crate::corpus::{
    build_vocabulary, generate_corpus, load_corpus, load_vocabulary, save_corpus,
    save_vocabulary, GeneratorConfig, Vocabulary,
};
use crate::error::{Error, Result};
use crate::eval::{
    embed_corpus, load_eval_run, protocol_full, protocol_random_m, save_eval_run, write_report,
    Direction, EvalRun,
};
use crate::model::{FashionFae, ModelConfig};
use crate::patches::{collect_patches, load_codebook, save_codebook, train_codebook, Codebook};
use crate::training::{
    finetune_classifier, load_config, load_loss_log, pretrain, save_loss_log, FinetuneConfig,
    LabelField, PreparedCorpus, RunConfig, TrainState,
};
use crate::verify::{loss_grad_checks_exhaustive, GRAD_CHECK_TOLERANCE};

pub const DATA_DIR_ENV: &str = "FFAE_DATA_DIR";

#[derive(Parser)]
#[command(
    name = "ffae",
    version,
    about = "Attribute-enhanced multimodal pre-training on a synthetic fashion corpus"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (items.jsonl, images/, vocab.txt).
    GenCorpus {
        /// Number of items, spread over the closed category set.
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// PRNG seed; drawn and printed when omitted.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults under the data root).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        #[arg(long, default_value_t = 8)]
        patch_size: usize,
    },
    /// Train the patch codebook on a corpus.
    TrainTokenizer {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Codebook size K.
        #[arg(long, default_value_t = 64)]
        k: usize,
        #[arg(long, default_value_t = 25)]
        iters: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Output codebook file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        patch_size: usize,
    },
    /// Run pre-training with task sampling, loss logging, checkpoints.
    Pretrain {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// key=value run configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoints and the loss log.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Overrides the config seed; drawn and printed when both absent.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Resume from a checkpoint stem (expects <stem>.ffck and
        /// <stem>.ffos).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a recognition head on the fused CLS state.
    Finetune {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// Directory holding model.cfg and checkpoint_final.ffck.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// category or subcategory.
        #[arg(long, default_value = "category")]
        label_field: String,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = false)]
        freeze_backbone: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the head checkpoint and metrics.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Cross-modal retrieval evaluation.
    Evaluate {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        codebook: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// random_m or full.
        #[arg(long, default_value = "full")]
        protocol: String,
        /// Candidate pool size for the random_m protocol.
        #[arg(long, default_value_t = 100)]
        m: usize,
        /// i2t, t2i, or both.
        #[arg(long, default_value = "both")]
        direction: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the EvalRun JSON files.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Finite-difference verification of every loss gradient.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Number of consecutive seeds to check.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Collect EvalRun JSONs (and optionally a loss log) into metrics.csv
    /// and summary.txt.
    Report {
        /// EvalRun JSON files, in row order.
        #[arg(long, num_args = 1..)]
        eval: Vec<PathBuf>,
        #[arg(long)]
        loss_log: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("ffae-data"))
}

fn or_default(path: Option<PathBuf>, default: impl FnOnce() -> PathBuf) -> PathBuf {
    path.unwrap_or_else(default)
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    match seed {
        Some(s) => s,
        None => {
            let s = rand::thread_rng().next_u64();
            println!("seed: {s} (drawn; pass --seed {s} to reproduce)");
            s
        }
    }
}

fn load_codebook_and_patch_size(path: &Path) -> Result<(Codebook, usize)> {
    let codebook = load_codebook(path)?;
    let dim = codebook.dim();
    if dim % 3 != 0 {
        return Err(Error::format(path, "codebook dim is not divisible by 3 channels"));
    }
    let per_channel = dim / 3;
    let patch_size = (per_channel as f64).sqrt().round() as usize;
    if patch_size * patch_size != per_channel {
        return Err(Error::format(path, "codebook dim is not a square patch"));
    }
    Ok((codebook, patch_size))
}

fn load_pipeline_inputs(
    corpus_dir: &Path,
    codebook_path: &Path,
) -> Result<(Vec<crate::corpus::ItemRecord>, Vocabulary, Codebook, PreparedCorpus)> {
    let corpus = load_corpus(corpus_dir)?;
    let vocab = load_vocabulary(&corpus_dir.join("vocab.txt"))?;
    let (codebook, patch_size) = load_codebook_and_patch_size(codebook_path)?;
    let data = PreparedCorpus::prepare(&corpus, &vocab, patch_size)?;
    Ok((corpus, vocab, codebook, data))
}

fn model_from_run_dir(run_dir: &Path, vocab: &Vocabulary, codebook: &Codebook) -> Result<FashionFae> {
    let cfg = ModelConfig::load(&run_dir.join("model.cfg"))?;
    if cfg.vocab_size != vocab.len() {
        return Err(Error::invalid(format!(
            "checkpoint vocab size {} does not match corpus vocabulary {}",
            cfg.vocab_size,
            vocab.len()
        )));
    }
    if cfg.patch_labels != codebook.k() {
        return Err(Error::invalid(format!(
            "checkpoint expects {} patch labels, codebook has {}",
            cfg.patch_labels,
            codebook.k()
        )));
    }
    let model = FashionFae::new(cfg, 0)?;
    load_parameters(&run_dir.join("checkpoint_final.ffck"), model.params())?;
    Ok(model)
}

fn run_command(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus {
            n,
            seed,
            out,
            image_size,
            patch_size,
        } => {
            let seed = resolve_seed(seed);
            let out = or_default(out, || data_root().join("corpus"));
            let config = GeneratorConfig::with_total(n, image_size, patch_size);
            let corpus = generate_corpus(&config, seed)?;
            save_corpus(&out, &corpus)?;
            let vocab = build_vocabulary(&corpus)?;
            save_vocabulary(&out.join("vocab.txt"), &vocab)?;
            println!(
                "wrote {} items ({} tokens in vocabulary) to {}",
                corpus.len(),
                vocab.len(),
                out.display()
            );
        }
        Command::TrainTokenizer {
            corpus,
            k,
            iters,
            seed,
            out,
            patch_size,
        } => {
            let seed = resolve_seed(seed);
            let corpus_dir = or_default(corpus, || data_root().join("corpus"));
            let out = or_default(out, || data_root().join("codebook.ffvq"));
            let items = load_corpus(&corpus_dir)?;
            let grids: Vec<_> = items
                .iter()
                .map(|it| crate::patches::extract_patches(&it.image, patch_size))
                .collect::<Result<_>>()?;
            let refs = collect_patches(&grids);
            let codebook = train_codebook(&refs, k, iters, seed)?;
            save_codebook(&out, &codebook)?;
            println!(
                "trained codebook: k={} dim={} on {} patches -> {}",
                codebook.k(),
                codebook.dim(),
                refs.len(),
                out.display()
            );
        }
        Command::Pretrain {
            corpus,
            codebook,
            config,
            out_dir,
            seed,
            steps,
            resume,
        } => {
            let corpus_dir = or_default(corpus, || data_root().join("corpus"));
            let codebook_path = or_default(codebook, || data_root().join("codebook.ffvq"));
            let out_dir = or_default(out_dir, || data_root().join("run"));
            let mut cfg = match config {
                Some(path) => load_config(&path)?,
                None => RunConfig::default(),
            };
            if let Some(s) = steps {
                cfg.steps = s;
            }
            cfg.seed = match seed {
                Some(s) => s,
                None => resolve_seed(Some(cfg.seed)),
            };

            let (_corpus, vocab, codebook, data) =
                load_pipeline_inputs(&corpus_dir, &codebook_path)?;
            let max_text_len = data.inputs.iter().map(|t| t.len()).max().unwrap_or(8);
            let max_patches = data.grids.first().map(|g| g.patch_count()).unwrap_or(16);
            let patch_size = data.grids.first().map(|g| g.patch_size).unwrap_or(8);
            let model_cfg = ModelConfig {
                embed_dim: cfg.embed_dim,
                n_layers_text_fusion: cfg.n_layers_text_fusion,
                split_point: cfg.split_point,
                n_layers_image: cfg.n_layers_image,
                n_heads: cfg.n_heads,
                vocab_size: vocab.len(),
                patch_labels: codebook.k(),
                max_text_len,
                max_patches,
                patch_size,
            };
            let model = FashionFae::new(model_cfg, cfg.seed)?;

            let (mut state, mut rows) = match resume {
                Some(stem) => {
                    let ffck = stem.with_extension("ffck");
                    let ffos = stem.with_extension("ffos");
                    load_parameters(&ffck, model.params())?;
                    let state = TrainState::load(&ffos, model.params(), &cfg)?;
                    let log_path = out_dir.join("loss_log.csv");
                    let rows = if log_path.exists() {
                        load_loss_log(&log_path)?
                    } else {
                        Vec::new()
                    };
                    println!("resumed at step {}", state.step);
                    (state, rows)
                }
                None => (TrainState::fresh(model.params(), &cfg), Vec::new()),
            };

            let remaining = cfg.steps.saturating_sub(state.step as usize);
            let new_rows = pretrain(
                &model,
                &data,
                &codebook,
                vocab.mask_id(),
                &cfg,
                &mut state,
                remaining,
                Some(&out_dir),
            )?;
            rows.extend(new_rows);
            save_loss_log(&out_dir.join("loss_log.csv"), &rows)?;
            save_parameters(&out_dir.join("checkpoint_final.ffck"), model.params())?;
            state.save(&out_dir.join("checkpoint_final.ffos"), model.params())?;
            std::fs::write(out_dir.join("run.cfg"), cfg.to_kv_string())
                .map_err(|e| Error::io(out_dir.join("run.cfg"), e))?;
            for (task, (count, sum)) in &state.loss_stats {
                println!("{task}: {} draws, mean loss {:.4}", count, sum / *count as f64);
            }
            println!(
                "pretrained to step {} -> {}",
                state.step,
                out_dir.display()
            );
        }
        Command::Finetune {
            corpus,
            codebook,
            run_dir,
            label_field,
            steps,
            lr,
            batch_size,
            freeze_backbone,
            seed,
            out_dir,
        } => {
            let seed = resolve_seed(seed);
            let corpus_dir = or_default(corpus, || data_root().join("corpus"));
            let codebook_path = or_default(codebook, || data_root().join("codebook.ffvq"));
            let run_dir = or_default(run_dir, || data_root().join("run"));
            let out_dir = or_default(out_dir, || data_root().join("finetune"));
            let field = LabelField::parse(&label_field)?;
            let (items, vocab, codebook, data) =
                load_pipeline_inputs(&corpus_dir, &codebook_path)?;
            let model = model_from_run_dir(&run_dir, &vocab, &codebook)?;
            let out = finetune_classifier(
                &model,
                &data,
                &items,
                field,
                &FinetuneConfig {
                    steps,
                    lr,
                    batch_size,
                    freeze_backbone,
                    seed,
                },
            )?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let metrics = serde_json::json!({
                "label_field": field.as_str(),
                "classes": out.classes,
                "accuracy": out.accuracy,
                "macro_f1": out.macro_f1,
            });
            let metrics_path = out_dir.join(format!("finetune_{}.json", field.as_str()));
            std::fs::write(&metrics_path, serde_json::to_string_pretty(&metrics).expect("json"))
                .map_err(|e| Error::io(&metrics_path, e))?;
            save_parameters(
                &out_dir.join(format!("head_{}.ffck", field.as_str())),
                &{
                    let mut ps = crate::autodiff::ParameterSet::new();
                    ps.create("finetune_head.w", out.head_w.clone())?;
                    ps.create("finetune_head.b", out.head_b.clone())?;
                    ps
                },
            )?;
            println!(
                "finetuned {}: accuracy {:.4}, macro-F1 {:.4} -> {}",
                field.as_str(),
                out.accuracy,
                out.macro_f1,
                out_dir.display()
            );
        }
        Command::Evaluate {
            corpus,
            codebook,
            run_dir,
            protocol,
            m,
            direction,
            seed,
            out_dir,
        } => {
            let corpus_dir = or_default(corpus, || data_root().join("corpus"));
            let codebook_path = or_default(codebook, || data_root().join("codebook.ffvq"));
            let run_dir = or_default(run_dir, || data_root().join("run"));
            let out_dir = or_default(out_dir, || data_root().join("eval"));
            let (_items, vocab, codebook, data) =
                load_pipeline_inputs(&corpus_dir, &codebook_path)?;
            let model = model_from_run_dir(&run_dir, &vocab, &codebook)?;
            let features = embed_corpus(&model, &data.inputs, &data.grids)?;

            let directions: Vec<Direction> = match direction.as_str() {
                "both" => vec![Direction::I2T, Direction::T2I],
                other => vec![Direction::parse(other)?],
            };
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            for dir in directions {
                let run: EvalRun = match protocol.as_str() {
                    "full" => protocol_full(&features, &data.ids, dir)?,
                    "random_m" => {
                        let seed = resolve_seed(seed);
                        protocol_random_m(&features, &data.ids, &data.categories, m, dir, seed)?
                    }
                    other => {
                        return Err(Error::invalid(format!("unknown protocol `{other}`")));
                    }
                };
                println!(
                    "{} {}: R@1 {:.2}  R@5 {:.2}  R@10 {:.2}  mean {:.2}",
                    run.protocol, run.direction, run.r_at_1, run.r_at_5, run.r_at_10, run.mean
                );
                let path = out_dir.join(format!("eval_{}_{}.json", run.protocol, run.direction));
                save_eval_run(&path, &run)?;
            }
            println!("eval runs written to {}", out_dir.display());
        }
        Command::Gradcheck { seed, seeds } => {
            let start = resolve_seed(seed);
            let mut overall: f64 = 0.0;
            for s in start..start + seeds.max(1) {
                for report in loss_grad_checks_exhaustive(s)? {
                    println!(
                        "seed {} {}: max relative error {:.3e}",
                        report.seed, report.loss, report.max_rel_err
                    );
                    overall = overall.max(report.max_rel_err);
                }
            }
            println!("max relative error: {overall:.3e} (tolerance {GRAD_CHECK_TOLERANCE:.0e})");
            if overall >= GRAD_CHECK_TOLERANCE {
                return Err(Error::invalid(format!(
                    "gradient check failed: {overall:.3e} >= {GRAD_CHECK_TOLERANCE:.0e}"
                )));
            }
        }
        Command::Report {
            eval,
            loss_log,
            out_dir,
        } => {
            let out_dir = or_default(out_dir, || data_root().join("report"));
            let runs: Vec<EvalRun> = eval
                .iter()
                .map(|p| load_eval_run(p))
                .collect::<Result<_>>()?;
            let rows = match loss_log {
                Some(path) => load_loss_log(&path)?,
                None => Vec::new(),
            };
            write_report(&out_dir, &runs, &rows)?;
            println!(
                "report ({} runs) written to {}",
                runs.len(),
                out_dir.display()
            );
        }
    }
    Ok(())
}

/// Parses argv and dispatches; returns the process exit code.
///
/// Exit codes: 0 success, 1 runtime failure (single-line error on stderr),
/// 2 usage errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match run_command(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
