//! Command-line driver for the word-discovery pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use word_discovery::corpus::Corpus;
use word_discovery::model::Seq2SeqModel;
use word_discovery::alignment::read_segmentations;
use word_discovery::pipeline::{self, PipelineConfig, PreparedCorpora};
use word_discovery::synth::{generate, SynthSpec};

/// Environment variable naming the default output root.
const OUT_ENV: &str = "WORD_DISCOVERY_OUT";

#[derive(Parser)]
#[command(
    name = "word-discovery",
    about = "Unsupervised and semi-supervised word discovery from unsegmented text",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every pipeline stage; values override the config file.
#[derive(Args, Clone)]
struct CommonOpts {
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    gold: Option<PathBuf>,
    #[arg(long)]
    inventory: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Model preset: base (symbols to words) or reverse (words to symbols).
    #[arg(long)]
    preset: Option<String>,
    /// Alignment temperature (values above 1 flatten the exported rows).
    #[arg(long)]
    temperature: Option<f64>,
    /// Attention temperature inside the model, when it should differ from
    /// the alignment temperature.
    #[arg(long)]
    model_temperature: Option<f64>,
    /// Apply alignment smoothing before segmentation.
    #[arg(long)]
    smooth: bool,
    /// Inject the k most frequent gold words as supervision.
    #[arg(long)]
    supervise_k: Option<usize>,
    #[arg(long)]
    dev_fraction: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    min_delta: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Matrices of the opposite direction to fuse with.
    #[arg(long)]
    fuse_with: Option<PathBuf>,
    /// Output directory (default: $WORD_DISCOVERY_OUT or ./out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus.
    Synth {
        #[arg(long, default_value_t = 30)]
        lexicon: usize,
        #[arg(long, default_value_t = 10)]
        alphabet: usize,
        #[arg(long, default_value_t = 2)]
        word_len_min: usize,
        #[arg(long, default_value_t = 4)]
        word_len_max: usize,
        #[arg(long, default_value_t = 3)]
        sent_len_min: usize,
        #[arg(long, default_value_t = 8)]
        sent_len_max: usize,
        #[arg(long, default_value_t = 3000)]
        sentences: usize,
        #[arg(long, default_value_t = 1.0)]
        zipf: f64,
        #[arg(long, default_value_t = 0.0)]
        swap_noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Directory for corpus.src, corpus.tgt and corpus.gold.
        #[arg(long)]
        out: PathBuf,
    },
    /// Load, validate, split and encode the corpus.
    Prepare(CommonOpts),
    /// Train the translation model on the prepared corpus.
    Train(CommonOpts),
    /// Force-decode the training corpus and write alignment matrices.
    Extract(CommonOpts),
    /// Smooth extracted matrices.
    Smooth {
        #[command(flatten)]
        common: CommonOpts,
        /// Matrices to smooth (default: the extract stage output).
        #[arg(long)]
        matrices: Option<PathBuf>,
    },
    /// Fuse base-direction and reverse-direction matrices.
    Fuse {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        base_matrices: PathBuf,
        #[arg(long)]
        reverse_matrices: PathBuf,
    },
    /// Infer a segmentation from alignment matrices.
    Segment {
        #[command(flatten)]
        common: CommonOpts,
        /// Matrices to segment from (default: smoothed if --smooth,
        /// otherwise extracted).
        #[arg(long)]
        matrices: Option<PathBuf>,
    },
    /// Score a segmentation against the gold standard.
    Evaluate {
        #[command(flatten)]
        common: CommonOpts,
        /// Segmentation file (default: the segment stage output).
        #[arg(long)]
        segmentation: Option<PathBuf>,
    },
    /// Vocabulary analyses: rank-frequency table and length histogram.
    Analyze {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        segmentation: Option<PathBuf>,
    },
    /// Export one sentence's matrix as a grayscale image plus a table.
    Heatmap {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        matrices: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sentence: usize,
        #[arg(long, default_value_t = 16)]
        cell_px: usize,
    },
    /// Run the full pipeline: prepare, train, extract, post-process,
    /// segment, evaluate, analyze.
    RunAll(CommonOpts),
}

fn resolve_config(opts: &CommonOpts) -> word_discovery::Result<PipelineConfig> {
    let mut cfg = match &opts.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => PipelineConfig::default(),
    };
    if cfg.out_dir == PathBuf::from("out") {
        if let Ok(root) = std::env::var(OUT_ENV) {
            cfg.out_dir = PathBuf::from(root);
        }
    }
    if let Some(p) = &opts.source {
        cfg.source_path = p.clone();
    }
    if let Some(p) = &opts.target {
        cfg.target_path = p.clone();
    }
    if let Some(p) = &opts.gold {
        cfg.gold_path = Some(p.clone());
    }
    if let Some(p) = &opts.inventory {
        cfg.inventory_path = Some(p.clone());
    }
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(p) = &opts.preset {
        cfg.preset = p.parse()?;
    }
    if let Some(t) = opts.temperature {
        cfg.temperature = t;
    }
    if let Some(t) = opts.model_temperature {
        cfg.model_temperature = Some(t);
    }
    if opts.smooth {
        cfg.smooth = true;
    }
    if let Some(k) = opts.supervise_k {
        cfg.supervise_k = Some(k);
    }
    if let Some(f) = opts.dev_fraction {
        cfg.dev_fraction = f;
    }
    if let Some(b) = opts.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = opts.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(p) = opts.patience {
        cfg.patience = p;
    }
    if let Some(d) = opts.min_delta {
        cfg.min_delta = d;
    }
    if let Some(m) = opts.max_epochs {
        cfg.max_epochs = m;
    }
    if let Some(g) = opts.grad_clip {
        cfg.grad_clip = Some(g);
    }
    if let Some(p) = &opts.fuse_with {
        cfg.fuse_with = Some(p.clone());
    }
    if let Some(p) = &opts.out {
        cfg.out_dir = p.clone();
    }
    Ok(cfg)
}

fn load_prepared(cfg: &PipelineConfig) -> word_discovery::Result<PreparedCorpora> {
    let dir = cfg.out_dir.join("prepare");
    Ok(PreparedCorpora {
        train: Corpus::load(&dir.join("train.json"))?,
        dev: Corpus::load(&dir.join("dev.json"))?,
    })
}

fn default_matrices(cfg: &PipelineConfig) -> PathBuf {
    if cfg.smooth {
        cfg.out_dir.join("smooth/matrices.txt")
    } else {
        cfg.out_dir.join("extract/matrices.txt")
    }
}

fn run(cli: Cli) -> word_discovery::Result<()> {
    match cli.command {
        Command::Synth {
            lexicon,
            alphabet,
            word_len_min,
            word_len_max,
            sent_len_min,
            sent_len_max,
            sentences,
            zipf,
            swap_noise,
            seed,
            out,
        } => {
            let spec = SynthSpec {
                lexicon_size: lexicon,
                alphabet_size: alphabet,
                word_len: (word_len_min, word_len_max),
                sentence_len: (sent_len_min, sent_len_max),
                sentences,
                zipf_exponent: zipf,
                seed,
                swap_noise,
            };
            let corpus = generate(&spec)?;
            let paths = corpus.write_files(&out)?;
            println!(
                "wrote {} sentences to {}, {}, {}",
                sentences,
                paths.source.display(),
                paths.target.display(),
                paths.gold.display()
            );
        }
        Command::Prepare(opts) => {
            let cfg = resolve_config(&opts)?;
            cfg.validate()?;
            let prepared = pipeline::prepare(&cfg)?;
            println!(
                "prepared {} training and {} development pairs under {}",
                prepared.train.pairs.len(),
                prepared.dev.pairs.len(),
                cfg.out_dir.join("prepare").display()
            );
        }
        Command::Train(opts) => {
            let cfg = resolve_config(&opts)?;
            cfg.validate()?;
            let prepared = load_prepared(&cfg)?;
            let artifacts = pipeline::train_stage(&cfg, &prepared)?;
            let (epoch, loss) = artifacts.trace.last().expect("at least one epoch");
            println!(
                "trained to epoch {epoch} (mean loss {loss:.4}); checkpoint at {}",
                artifacts.checkpoint.display()
            );
        }
        Command::Extract(opts) => {
            let cfg = resolve_config(&opts)?;
            cfg.validate()?;
            let prepared = load_prepared(&cfg)?;
            let model = Seq2SeqModel::load(&cfg.out_dir.join("train/checkpoint.json"))?;
            let path = pipeline::extract_stage(&cfg, &model, &prepared.train)?;
            println!("wrote matrices to {}", path.display());
        }
        Command::Smooth { common, matrices } => {
            let cfg = resolve_config(&common)?;
            let input = matrices.unwrap_or_else(|| cfg.out_dir.join("extract/matrices.txt"));
            let path = pipeline::smooth_stage(&cfg, &input)?;
            println!("wrote smoothed matrices to {}", path.display());
        }
        Command::Fuse {
            common,
            base_matrices,
            reverse_matrices,
        } => {
            let cfg = resolve_config(&common)?;
            let path = pipeline::fuse_stage(&cfg, &base_matrices, &reverse_matrices)?;
            println!("wrote fused matrices to {}", path.display());
        }
        Command::Segment { common, matrices } => {
            let cfg = resolve_config(&common)?;
            let prepared = load_prepared(&cfg)?;
            let input = matrices.unwrap_or_else(|| default_matrices(&cfg));
            let (path, segmentations) = pipeline::segment_stage(&cfg, &prepared.train, &input)?;
            println!(
                "segmented {} sentences into {}",
                segmentations.len(),
                path.display()
            );
        }
        Command::Evaluate {
            common,
            segmentation,
        } => {
            let cfg = resolve_config(&common)?;
            let prepared = load_prepared(&cfg)?;
            let seg_path =
                segmentation.unwrap_or_else(|| cfg.out_dir.join("segment/segmentation.txt"));
            let hypothesis = read_segmentations(&seg_path)?;
            let report = pipeline::evaluate_stage(&cfg, &prepared, &hypothesis)?;
            println!(
                "tokens: P {:.4} R {:.4} F {:.4}",
                report.tokens.precision, report.tokens.recall, report.tokens.f_score
            );
            println!(
                "types:  P {:.4} R {:.4} F {:.4} ({} generated, {} gold)",
                report.types.prf.precision,
                report.types.prf.recall,
                report.types.prf.f_score,
                report.types.generated_types,
                report.types.gold_types
            );
        }
        Command::Analyze {
            common,
            segmentation,
        } => {
            let cfg = resolve_config(&common)?;
            let seg_path =
                segmentation.unwrap_or_else(|| cfg.out_dir.join("segment/segmentation.txt"));
            let hypothesis = read_segmentations(&seg_path)?;
            pipeline::analyze_stage(&cfg, &hypothesis)?;
            println!(
                "wrote analyses under {}",
                cfg.out_dir.join("analyze").display()
            );
        }
        Command::Heatmap {
            common,
            matrices,
            sentence,
            cell_px,
        } => {
            let cfg = resolve_config(&common)?;
            let input = matrices.unwrap_or_else(|| default_matrices(&cfg));
            let (pgm, table) = pipeline::heatmap_stage(&cfg, &input, sentence, cell_px)?;
            println!("wrote {} and {}", pgm.display(), table.display());
        }
        Command::RunAll(opts) => {
            let cfg = resolve_config(&opts)?;
            let summary = pipeline::run_all(&cfg)?;
            if let Some((epoch, loss)) = summary.trace.last() {
                println!("training stopped at epoch {epoch} (mean loss {loss:.4})");
            }
            println!("segmentation: {}", summary.segmentation_path.display());
            println!(
                "tokens: P {:.4} R {:.4} F {:.4}",
                summary.report.tokens.precision,
                summary.report.tokens.recall,
                summary.report.tokens.f_score
            );
            println!(
                "types:  P {:.4} R {:.4} F {:.4} ({} generated, {} gold)",
                summary.report.types.prf.precision,
                summary.report.types.prf.recall,
                summary.report.types.prf.f_score,
                summary.report.types.generated_types,
                summary.report.types.gold_types
            );
        }
    }
    Ok(())
}

// Exit statuses: 0 success, 1 validation failure, 2 runtime failure.
fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut cause = std::error::Error::source(&e);
            while let Some(c) = cause {
                eprintln!("  caused by: {c}");
                cause = c.source();
            }
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
