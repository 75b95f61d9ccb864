//! Optimization loop with early stopping and corpus-wide alignment
//! extraction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentMatrix;
use crate::corpus::Corpus;
use crate::error::Error;
use crate::model::{Direction, ModelConfig, Seq2SeqModel};
use crate::numerics::{adam_step, batch_mean, AdamHyper, AdamOutcome, AdamState, Tape};
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without sufficient improvement before stopping.
    pub patience: usize,
    /// Minimum decrease of the mean epoch loss that counts as improvement.
    pub min_delta: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Optional global gradient-norm clip; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 0.001,
            patience: 3,
            min_delta: 1e-4,
            max_epochs: 200,
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch size, patience and max epochs must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StopReason {
    Plateau,
    MaxEpochs,
}

/// Outcome of [`train`]: the parameters from the best-loss epoch, the full
/// per-epoch loss trace (1-based epoch, mean per-sentence loss), and why
/// training stopped.
pub struct Trained {
    pub model: Seq2SeqModel,
    pub trace: Vec<(usize, f64)>,
    pub best_epoch: usize,
    pub stop: StopReason,
}

/// Trains a fresh model on the corpus: one epoch is a seeded shuffled pass
/// in batches of `batch_size`, stopping once the mean epoch training loss
/// has not improved by `min_delta` for `patience` consecutive epochs or at
/// `max_epochs`. A non-finite loss aborts with the trace collected so far.
pub fn train(
    corpus: &Corpus,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<Trained> {
    config.validate()?;
    model_config.validate()?;
    check_vocabularies(model_config, corpus)?;
    if corpus.pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut model = Seq2SeqModel::new(model_config.clone(), &mut rng)?;
    let mut adam = AdamState::new(
        &model.params,
        AdamHyper {
            learning_rate: config.learning_rate,
            ..AdamHyper::default()
        },
    );

    let n = corpus.pairs.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace: Vec<(usize, f64)> = Vec::new();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = model.params.clone();
    let mut bad_epochs = 0usize;
    let mut stop = StopReason::MaxEpochs;
    let mut tape = Tape::new();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            tape.clear();
            let leaves = model.place(&mut tape);
            let mut sentence_losses = Vec::with_capacity(batch.len());
            let mut loss_nodes = Vec::with_capacity(batch.len());
            for &idx in batch {
                let pair = &corpus.pairs[idx];
                let (enc_ids, dec_ids) = model.oriented(pair);
                let decode = model.force_decode_graph(&mut tape, &leaves, enc_ids, dec_ids)?;
                sentence_losses.push(tape.scalar(decode.loss));
                loss_nodes.push(decode.loss);
            }
            let batch_loss = batch_mean(&sentence_losses);
            if !batch_loss.is_finite() {
                trace.push((epoch, f64::NAN));
                return Err(Error::Divergence { epoch, trace });
            }
            epoch_loss_sum += sentence_losses.iter().sum::<f64>();

            let total = tape.sum_all(&loss_nodes);
            let mean = tape.scale(total, 1.0 / batch.len() as f64);
            tape.backward(mean);
            model.params.zero_grads();
            tape.accumulate_param_grads(&mut model.params);
            if let Some(max_norm) = config.grad_clip {
                model.params.clip_grad_norm(max_norm)?;
            }
            if let AdamOutcome::SkippedNonFinite { param } =
                adam_step(&mut model.params, &mut adam)?
            {
                eprintln!(
                    "epoch {epoch}: non-finite gradient in {param}; update skipped"
                );
            }
        }

        let mean_epoch_loss = epoch_loss_sum / n as f64;
        trace.push((epoch, mean_epoch_loss));
        if !mean_epoch_loss.is_finite() {
            return Err(Error::Divergence { epoch, trace });
        }

        if mean_epoch_loss < best_loss - config.min_delta {
            best_loss = mean_epoch_loss;
            best_epoch = epoch;
            best_params = model.params.clone();
            bad_epochs = 0;
        } else {
            // Keep the best parameters up to date even for improvements
            // smaller than the stopping delta.
            if mean_epoch_loss < best_loss {
                best_loss = mean_epoch_loss;
                best_epoch = epoch;
                best_params = model.params.clone();
            }
            bad_epochs += 1;
            if bad_epochs >= config.patience {
                stop = StopReason::Plateau;
                break;
            }
        }
    }

    model.params = best_params;
    Ok(Trained {
        model,
        trace,
        best_epoch,
        stop,
    })
}

/// Force-decodes the whole corpus in order, one matrix per sentence.
pub fn extract_alignments(model: &Seq2SeqModel, corpus: &Corpus) -> Result<Vec<AlignmentMatrix>> {
    extract_alignments_at(model, corpus, model.config.attention_temperature)
}

/// Extraction with the exported rows re-softmaxed at `export_temperature`
/// (the smoothing variation's flattening step).
pub fn extract_alignments_at(
    model: &Seq2SeqModel,
    corpus: &Corpus,
    export_temperature: f64,
) -> Result<Vec<AlignmentMatrix>> {
    check_vocabularies(&model.config, corpus)?;
    corpus
        .pairs
        .iter()
        .map(|pair| {
            model
                .force_decode_at(
                    pair,
                    &corpus.source_vocab,
                    &corpus.target_vocab,
                    export_temperature,
                )
                .map(|(_, matrix)| matrix)
        })
        .collect()
}

fn check_vocabularies(config: &ModelConfig, corpus: &Corpus) -> Result<()> {
    let (enc, dec) = match config.direction {
        Direction::Base => (corpus.source_vocab.len(), corpus.target_vocab.len()),
        Direction::Reverse => (corpus.target_vocab.len(), corpus.source_vocab.len()),
    };
    if config.source_vocab_size != enc || config.target_vocab_size != dec {
        return Err(Error::VocabMismatch(format!(
            "model expects encoder/decoder vocabularies of {}/{}, corpus has {}/{}",
            config.source_vocab_size, config.target_vocab_size, enc, dec
        )));
    }
    Ok(())
}

/// Writes the loss trace as tab-separated `(epoch, mean loss)` lines.
pub fn write_loss_trace(path: &std::path::Path, trace: &[(usize, f64)]) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (epoch, loss) in trace {
        writeln!(w, "{epoch}\t{loss:.16e}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
