//! Pipeline stages behind the command-line interface: prepare, train,
//! extract, smooth, fuse, segment, evaluate, analyze, heatmap. Every stage
//! writes its artifacts plus a manifest carrying the resolved
//! configuration, its hash and the seed, so a stage can be re-run
//! bit-identically and a completed stage can be skipped on resume.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{
    self, hard_align, read_matrices, read_segmentations, segment_mixed, smooth_for_segmentation,
    write_lexicon, write_matrices, write_segmentations, AlignmentMatrix, Segmentation,
};
use crate::corpus::{Corpus, Side};
use crate::error::Error;
use crate::evaluation::{
    self, evaluate, length_histogram, rank_frequency, type_set, write_length_histogram,
    write_rank_frequency, write_report_kv, write_report_text, EvalReport,
};
use crate::model::{Direction, ModelConfig, Seq2SeqModel};
use crate::training::{extract_alignments_at, train, write_loss_trace, TrainConfig};
use crate::Result;

/// Which gold vocabulary feeds type recall: the segmented (training)
/// portion or the full corpus including the development split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoldTypeScope {
    Segmented,
    Full,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub source_path: PathBuf,
    pub target_path: PathBuf,
    pub gold_path: Option<PathBuf>,
    pub inventory_path: Option<PathBuf>,
    pub preset: Direction,
    /// Temperature of the smoothing variation: extracted matrices carry
    /// the attention scores re-softmaxed at this value. Values above 1
    /// flatten rows and boost many-to-one alignments ahead of the
    /// neighbor averaging.
    pub temperature: f64,
    /// Temperature of the attention softmax inside the model, applied
    /// during training and decoding. Defaults to `temperature`; set it
    /// separately to train sharp and export flattened.
    pub model_temperature: Option<f64>,
    pub smooth: bool,
    pub supervise_k: Option<usize>,
    pub dev_fraction: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub max_epochs: usize,
    pub grad_clip: Option<f64>,
    pub gold_type_scope: GoldTypeScope,
    /// Matrices of the opposite direction to fuse with after extraction.
    pub fuse_with: Option<PathBuf>,
    /// Apply a second smoothing pass after fusion.
    pub fuse_post_smooth: bool,
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            source_path: PathBuf::new(),
            target_path: PathBuf::new(),
            gold_path: None,
            inventory_path: None,
            preset: Direction::Reverse,
            temperature: 1.0,
            model_temperature: None,
            smooth: false,
            supervise_k: None,
            dev_fraction: 0.1,
            seed: 0,
            batch_size: 32,
            learning_rate: 0.001,
            patience: 3,
            min_delta: 1e-4,
            max_epochs: 200,
            grad_clip: None,
            gold_type_scope: GoldTypeScope::Segmented,
            fuse_with: None,
            fuse_post_smooth: false,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl PipelineConfig {
    /// Parses a plain `key = value` file (# starts a comment).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected key = value".into(),
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    /// Sets one option by key, as written in config files.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("invalid {what}: {value:?}"));
        match key {
            "source_path" => self.source_path = PathBuf::from(value),
            "target_path" => self.target_path = PathBuf::from(value),
            "gold_path" => self.gold_path = Some(PathBuf::from(value)),
            "inventory_path" => self.inventory_path = Some(PathBuf::from(value)),
            "preset" => self.preset = value.parse()?,
            "temperature" => {
                self.temperature = value.parse().map_err(|_| bad("temperature"))?
            }
            "model_temperature" => {
                self.model_temperature =
                    Some(value.parse().map_err(|_| bad("model_temperature"))?)
            }
            "smooth" => self.smooth = value.parse().map_err(|_| bad("smooth"))?,
            "supervise_k" => {
                self.supervise_k = Some(value.parse().map_err(|_| bad("supervise_k"))?)
            }
            "dev_fraction" => {
                self.dev_fraction = value.parse().map_err(|_| bad("dev_fraction"))?
            }
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
            "learning_rate" => {
                self.learning_rate = value.parse().map_err(|_| bad("learning_rate"))?
            }
            "patience" => self.patience = value.parse().map_err(|_| bad("patience"))?,
            "min_delta" => self.min_delta = value.parse().map_err(|_| bad("min_delta"))?,
            "max_epochs" => self.max_epochs = value.parse().map_err(|_| bad("max_epochs"))?,
            "grad_clip" => self.grad_clip = Some(value.parse().map_err(|_| bad("grad_clip"))?),
            "gold_type_scope" => {
                self.gold_type_scope = match value {
                    "segmented" => GoldTypeScope::Segmented,
                    "full" => GoldTypeScope::Full,
                    _ => return Err(bad("gold_type_scope")),
                }
            }
            "fuse_with" => self.fuse_with = Some(PathBuf::from(value)),
            "fuse_post_smooth" => {
                self.fuse_post_smooth = value.parse().map_err(|_| bad("fuse_post_smooth"))?
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown option {other:?}"))),
        }
        Ok(())
    }

    /// Validates paths and numeric ranges before any stage runs.
    pub fn validate(&self) -> Result<()> {
        for (label, path) in [
            ("source_path", Some(&self.source_path)),
            ("target_path", Some(&self.target_path)),
            ("gold_path", self.gold_path.as_ref()),
            ("inventory_path", self.inventory_path.as_ref()),
            ("fuse_with", self.fuse_with.as_ref()),
        ] {
            if let Some(p) = path {
                if p.as_os_str().is_empty() {
                    return Err(Error::Config(format!("{label} is not set")));
                }
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "{label} {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        if self.supervise_k.is_some() && self.gold_path.is_none() {
            return Err(Error::Config(
                "supervision requires a gold segmentation file".into(),
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::NonPositiveTemperature(self.temperature));
        }
        if let Some(t) = self.model_temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::NonPositiveTemperature(t));
            }
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            patience: self.patience,
            min_delta: self.min_delta,
            max_epochs: self.max_epochs,
            seed: self.seed,
            grad_clip: self.grad_clip,
        }
    }

    /// Hash of the resolved configuration, recorded in every manifest.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_digest(&hasher.finalize())
    }

    fn stage_dir(&self, stage: &str) -> PathBuf {
        self.out_dir.join(stage)
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    stage: String,
    config_hash: String,
    seed: u64,
    config: PipelineConfig,
    outputs: Vec<PathBuf>,
}

fn write_manifest(cfg: &PipelineConfig, stage: &str, outputs: &[PathBuf]) -> Result<()> {
    let dir = cfg.stage_dir(stage);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("manifest.json");
    let manifest = Manifest {
        stage: stage.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        config: cfg.clone(),
        outputs: outputs.to_vec(),
    };
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &manifest)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// A stage is complete when its manifest exists, matches the current
/// configuration hash, and all recorded outputs are present.
fn stage_complete(cfg: &PipelineConfig, stage: &str) -> bool {
    let path = cfg.stage_dir(stage).join("manifest.json");
    let Ok(text) = fs::read_to_string(&path) else {
        return false;
    };
    let Ok(manifest) = serde_json::from_str::<Manifest>(&text) else {
        return false;
    };
    manifest.config_hash == cfg.hash() && manifest.outputs.iter().all(|p| p.exists())
}

fn staged<E>(stage: &'static str, result: std::result::Result<E, Error>) -> Result<E> {
    result.map_err(|e| Error::Stage {
        stage,
        source: Box::new(e),
    })
}

pub struct PreparedCorpora {
    pub train: Corpus,
    pub dev: Corpus,
}

/// Loads, validates, splits and (optionally) injects supervision. The
/// vocabularies are built on the training portion; development tokens
/// missing from them map to the unknown id.
pub fn prepare(cfg: &PipelineConfig) -> Result<PreparedCorpora> {
    let inner = || -> Result<PreparedCorpora> {
        let full = Corpus::load_parallel(
            &cfg.source_path,
            &cfg.target_path,
            cfg.gold_path.as_deref(),
            cfg.inventory_path.as_deref(),
        )?;
        let (train_raw, dev_raw) = full.split_train_dev(cfg.dev_fraction, cfg.seed)?;
        let src_vocab = train_raw.build_vocab(Side::Source)?;
        let tgt_vocab = train_raw.build_vocab(Side::Target)?;
        let mut train = train_raw.reencoded(src_vocab.clone(), tgt_vocab.clone());
        let mut dev = dev_raw.reencoded(src_vocab, tgt_vocab);
        if let Some(k) = cfg.supervise_k {
            train = train.inject_supervision(k)?;
            dev = dev.inject_types(&train.injected)?;
        }
        train.validate()?;
        dev.validate()?;

        let dir = cfg.stage_dir("prepare");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let train_path = dir.join("train.json");
        let dev_path = dir.join("dev.json");
        train.save(&train_path)?;
        dev.save(&dev_path)?;
        let stats_path = dir.join("stats.kv");
        write_corpus_stats(&stats_path, &train, &dev)?;
        write_manifest(cfg, "prepare", &[train_path, dev_path, stats_path])?;
        Ok(PreparedCorpora { train, dev })
    };
    staged("prepare", inner())
}

fn write_corpus_stats(path: &Path, train: &Corpus, dev: &Corpus) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    for (name, corpus) in [("train", train), ("dev", dev)] {
        let stats = corpus.stats();
        writeln!(w, "{name}_sentences={}", stats.sentences).map_err(io_err)?;
        if let Some(gold) = &stats.source_gold_words {
            writeln!(w, "{name}_source_types={}", gold.types).map_err(io_err)?;
            writeln!(w, "{name}_source_tokens={}", gold.tokens).map_err(io_err)?;
            writeln!(
                w,
                "{name}_source_avg_tokens_per_sentence={:.1}",
                gold.avg_tokens_per_sentence
            )
            .map_err(io_err)?;
        }
        writeln!(w, "{name}_source_symbols={}", stats.source_symbols.tokens).map_err(io_err)?;
        writeln!(
            w,
            "{name}_source_symbol_types={}",
            stats.source_symbols.types
        )
        .map_err(io_err)?;
        writeln!(w, "{name}_target_types={}", stats.target_words.types).map_err(io_err)?;
        writeln!(w, "{name}_target_tokens={}", stats.target_words.tokens).map_err(io_err)?;
        writeln!(
            w,
            "{name}_target_avg_tokens_per_sentence={:.1}",
            stats.target_words.avg_tokens_per_sentence
        )
        .map_err(io_err)?;
    }
    Ok(())
}

/// Model configuration for a prepared corpus under this pipeline config.
pub fn model_config_for(cfg: &PipelineConfig, corpus: &Corpus) -> ModelConfig {
    let (enc, dec) = match cfg.preset {
        Direction::Base => (corpus.source_vocab.len(), corpus.target_vocab.len()),
        Direction::Reverse => (corpus.target_vocab.len(), corpus.source_vocab.len()),
    };
    ModelConfig::preset(cfg.preset, enc, dec)
        .with_temperature(cfg.model_temperature.unwrap_or(cfg.temperature))
}

pub struct TrainArtifacts {
    pub model: Seq2SeqModel,
    pub trace: Vec<(usize, f64)>,
    pub checkpoint: PathBuf,
}

pub fn train_stage(cfg: &PipelineConfig, prepared: &PreparedCorpora) -> Result<TrainArtifacts> {
    let inner = || -> Result<TrainArtifacts> {
        let model_config = model_config_for(cfg, &prepared.train);
        let outcome = train(&prepared.train, &model_config, &cfg.train_config())?;
        let dir = cfg.stage_dir("train");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let checkpoint = dir.join("checkpoint.json");
        outcome.model.save(&checkpoint)?;
        let trace_path = dir.join("loss_trace.tsv");
        write_loss_trace(&trace_path, &outcome.trace)?;
        write_manifest(cfg, "train", &[checkpoint.clone(), trace_path])?;
        Ok(TrainArtifacts {
            model: outcome.model,
            trace: outcome.trace,
            checkpoint,
        })
    };
    staged("train", inner())
}

pub fn extract_stage(
    cfg: &PipelineConfig,
    model: &Seq2SeqModel,
    corpus: &Corpus,
) -> Result<PathBuf> {
    let inner = || -> Result<PathBuf> {
        let matrices = extract_alignments_at(model, corpus, cfg.temperature)?;
        let dir = cfg.stage_dir("extract");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("matrices.txt");
        write_matrices(&path, &matrices)?;
        write_manifest(cfg, "extract", &[path.clone()])?;
        Ok(path)
    };
    staged("extract", inner())
}

pub fn smooth_stage(cfg: &PipelineConfig, matrices_path: &Path) -> Result<PathBuf> {
    let inner = || -> Result<PathBuf> {
        let matrices = read_matrices(matrices_path)?;
        let smoothed: Vec<AlignmentMatrix> =
            matrices.iter().map(smooth_for_segmentation).collect();
        let dir = cfg.stage_dir("smooth");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("matrices.txt");
        write_matrices(&path, &smoothed)?;
        write_manifest(cfg, "smooth", &[path.clone()])?;
        Ok(path)
    };
    staged("smooth", inner())
}

/// Fuses base-direction and reverse-direction matrix files into
/// reverse-oriented matrices, optionally smoothing the result.
pub fn fuse_stage(
    cfg: &PipelineConfig,
    base_path: &Path,
    reverse_path: &Path,
) -> Result<PathBuf> {
    let inner = || -> Result<PathBuf> {
        let base = read_matrices(base_path)?;
        let reverse = read_matrices(reverse_path)?;
        if base.len() != reverse.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot fuse {} base matrices with {} reverse matrices",
                base.len(),
                reverse.len()
            )));
        }
        let mut fused = Vec::with_capacity(base.len());
        for (b, r) in base.iter().zip(&reverse) {
            let mut m = alignment::fuse(b, r)?;
            if cfg.fuse_post_smooth {
                m = smooth_for_segmentation(&m);
            }
            fused.push(m);
        }
        let dir = cfg.stage_dir("fuse");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("matrices.txt");
        write_matrices(&path, &fused)?;
        write_manifest(cfg, "fuse", &[path.clone()])?;
        Ok(path)
    };
    staged("fuse", inner())
}

/// Converts matrices into segmentations with bilingual clues. Injected
/// word tokens are kept atomic so supervised types survive intact.
pub fn segment_stage(
    cfg: &PipelineConfig,
    corpus: &Corpus,
    matrices_path: &Path,
) -> Result<(PathBuf, Vec<Segmentation>)> {
    let inner = || -> Result<(PathBuf, Vec<Segmentation>)> {
        let matrices = read_matrices(matrices_path)?;
        if matrices.len() != corpus.pairs.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} matrices for {} sentences",
                matrices.len(),
                corpus.pairs.len()
            )));
        }
        let mut segmentations = Vec::with_capacity(matrices.len());
        for (matrix, pair) in matrices.iter().zip(&corpus.pairs) {
            let alignment = hard_align(matrix);
            let tokens = corpus.source_surfaces(pair);
            let lens = corpus.source_symbol_lens(pair);
            let atomic = pair
                .injected_mask
                .clone()
                .unwrap_or_else(|| vec![false; tokens.len()]);
            segmentations.push(segment_mixed(&tokens, &lens, &atomic, &alignment)?);
        }
        let dir = cfg.stage_dir("segment");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("segmentation.txt");
        write_segmentations(&path, &segmentations)?;
        let lexicon_path = dir.join("lexicon.tsv");
        let target_words: Vec<Vec<String>> = corpus
            .pairs
            .iter()
            .map(|p| corpus.target_surfaces(p))
            .collect();
        write_lexicon(&lexicon_path, &segmentations, &target_words)?;
        write_manifest(cfg, "segment", &[path.clone(), lexicon_path])?;
        Ok((path, segmentations))
    };
    staged("segment", inner())
}

/// Gold segmentations of a corpus in symbol coordinates.
pub fn gold_segmentations(corpus: &Corpus) -> Result<Vec<Segmentation>> {
    corpus
        .gold_segmentations()
        .map(|sentences| {
            sentences
                .iter()
                .map(|tokens| Segmentation::from_surfaces(tokens))
                .collect()
        })
        .ok_or(Error::MissingGold)
}

pub fn evaluate_stage(
    cfg: &PipelineConfig,
    prepared: &PreparedCorpora,
    hypothesis: &[Segmentation],
) -> Result<EvalReport> {
    let inner = || -> Result<EvalReport> {
        let gold = gold_segmentations(&prepared.train)?;
        let supervised = if prepared.train.injected.is_empty() {
            None
        } else {
            Some(prepared.train.injected.as_slice())
        };
        let mut report = evaluate(hypothesis, &gold, supervised)?;
        if cfg.gold_type_scope == GoldTypeScope::Full {
            // Recompute the type block against the full-corpus vocabulary.
            let mut gold_types = type_set(&gold);
            gold_types.extend(type_set(&gold_segmentations(&prepared.dev)?));
            let hyp_types = type_set(hypothesis);
            report.types = evaluation::type_metrics(&hyp_types, &gold_types);
        }
        let dir = cfg.stage_dir("evaluate");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let text_path = dir.join("report.txt");
        let kv_path = dir.join("report.kv");
        write_report_text(&text_path, &report)?;
        write_report_kv(&kv_path, &report)?;
        write_manifest(cfg, "evaluate", &[text_path, kv_path])?;
        Ok(report)
    };
    staged("evaluate", inner())
}

pub fn analyze_stage(cfg: &PipelineConfig, hypothesis: &[Segmentation]) -> Result<()> {
    let inner = || -> Result<()> {
        let dir = cfg.stage_dir("analyze");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let rank_path = dir.join("rank_frequency.tsv");
        write_rank_frequency(&rank_path, &rank_frequency(hypothesis))?;
        let hist_path = dir.join("length_histogram.tsv");
        let (bins, mean) = length_histogram(&type_set(hypothesis));
        write_length_histogram(&hist_path, &bins, mean)?;
        write_manifest(cfg, "analyze", &[rank_path, hist_path])?;
        Ok(())
    };
    staged("analyze", inner())
}

/// Exports one matrix as a grayscale image (darker = more probable, linear
/// map from [0,1]) plus a labeled tab-separated table that round-trips the
/// probabilities at 17 significant digits.
pub fn export_heatmap(
    matrix: &AlignmentMatrix,
    pgm_path: &Path,
    table_path: &Path,
    cell_px: usize,
) -> Result<()> {
    matrix.validate()?;
    let cell = cell_px.max(1);
    let width = matrix.n_cols() * cell;
    let height = matrix.n_rows() * cell;
    let mut pgm = String::new();
    pgm.push_str(&format!("P2\n{width} {height}\n255\n"));
    for row in &matrix.rows {
        let mut line = String::new();
        for &v in row {
            let gray = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
            for _ in 0..cell {
                line.push_str(&format!("{gray} "));
            }
        }
        let line = line.trim_end();
        for _ in 0..cell {
            pgm.push_str(line);
            pgm.push('\n');
        }
    }
    fs::write(pgm_path, pgm).map_err(|e| Error::io(pgm_path, e))?;

    let file = File::create(table_path).map_err(|e| Error::io(table_path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(table_path, e);
    writeln!(w, "\t{}", matrix.col_surfaces.join("\t")).map_err(io_err)?;
    for (surface, row) in matrix.row_surfaces.iter().zip(&matrix.rows) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(w, "{surface}\t{}", cells.join("\t")).map_err(io_err)?;
    }
    Ok(())
}

pub fn heatmap_stage(
    cfg: &PipelineConfig,
    matrices_path: &Path,
    sentence: usize,
    cell_px: usize,
) -> Result<(PathBuf, PathBuf)> {
    let inner = || -> Result<(PathBuf, PathBuf)> {
        let matrices = read_matrices(matrices_path)?;
        let matrix = matrices.get(sentence).ok_or_else(|| {
            Error::Config(format!(
                "sentence {sentence} out of range, file has {} matrices",
                matrices.len()
            ))
        })?;
        let dir = cfg.stage_dir("heatmap");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let pgm = dir.join(format!("sentence_{sentence}.pgm"));
        let table = dir.join(format!("sentence_{sentence}.tsv"));
        export_heatmap(matrix, &pgm, &table, cell_px)?;
        write_manifest(cfg, "heatmap", &[pgm.clone(), table.clone()])?;
        Ok((pgm, table))
    };
    staged("heatmap", inner())
}

/// Summary of a full pipeline run.
pub struct RunSummary {
    pub report: EvalReport,
    pub segmentation_path: PathBuf,
    pub trace: Vec<(usize, f64)>,
}

/// Runs every requested stage in order, resuming from on-disk artifacts
/// whose manifests match the configuration.
pub fn run_all(cfg: &PipelineConfig) -> Result<RunSummary> {
    cfg.validate()?;

    let prepared = if stage_complete(cfg, "prepare") {
        let dir = cfg.stage_dir("prepare");
        PreparedCorpora {
            train: Corpus::load(&dir.join("train.json"))?,
            dev: Corpus::load(&dir.join("dev.json"))?,
        }
    } else {
        prepare(cfg)?
    };

    let (model, trace) = if stage_complete(cfg, "train") {
        let dir = cfg.stage_dir("train");
        let model = Seq2SeqModel::load(&dir.join("checkpoint.json"))?;
        let trace = read_loss_trace(&dir.join("loss_trace.tsv"))?;
        (model, trace)
    } else {
        let artifacts = train_stage(cfg, &prepared)?;
        (artifacts.model, artifacts.trace)
    };

    let extracted = if stage_complete(cfg, "extract") {
        cfg.stage_dir("extract").join("matrices.txt")
    } else {
        extract_stage(cfg, &model, &prepared.train)?
    };

    let mut matrices_path = extracted;
    if cfg.smooth {
        matrices_path = if stage_complete(cfg, "smooth") {
            cfg.stage_dir("smooth").join("matrices.txt")
        } else {
            smooth_stage(cfg, &matrices_path)?
        };
    }
    if let Some(other) = &cfg.fuse_with {
        // The configured preset produced one side; the fused pair needs
        // the opposite direction's matrices from `fuse_with`.
        let (base_path, reverse_path) = match cfg.preset {
            Direction::Base => (matrices_path.clone(), other.clone()),
            Direction::Reverse => (other.clone(), matrices_path.clone()),
        };
        matrices_path = if stage_complete(cfg, "fuse") {
            cfg.stage_dir("fuse").join("matrices.txt")
        } else {
            fuse_stage(cfg, &base_path, &reverse_path)?
        };
    }

    let (segmentation_path, segmentations) = if stage_complete(cfg, "segment") {
        let path = cfg.stage_dir("segment").join("segmentation.txt");
        let segs = read_segmentations(&path)?;
        (path, segs)
    } else {
        segment_stage(cfg, &prepared.train, &matrices_path)?
    };

    let report = evaluate_stage(cfg, &prepared, &segmentations)?;
    analyze_stage(cfg, &segmentations)?;

    Ok(RunSummary {
        report,
        segmentation_path,
        trace,
    })
}

pub fn read_loss_trace(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let (epoch, loss) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected epoch TAB loss".into(),
            })?;
            Ok((
                epoch.parse().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "bad epoch".into(),
                })?,
                loss.parse().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "bad loss".into(),
                })?,
            ))
        })
        .collect()
}
