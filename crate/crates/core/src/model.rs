//! Attention-based encoder-decoder translation model.
//!
//! A bidirectional LSTM encoder reads the input sequence and produces one
//! state per position (forward and backward halves concatenated, so each
//! state has dimension `2n`). The decoder is driven with teacher forcing:
//! at step `t` it attends over the encoder states with its previous state,
//! predicts the step's output from `state ⊕ prev-word-embedding ⊕ context`
//! through a maxout layer and a linear projection, and then advances its
//! LSTM with `cur-word-embedding ⊕ context`. The generated symbol (argmax
//! of the logits) is never fed back.
//!
//! The base direction translates unsegmented symbols to words; the reverse
//! direction translates words to symbols, which constrains the attention to
//! spend probability mass on every symbol row.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentMatrix;
use crate::corpus::{SentencePair, Vocabulary, BOS_ID, EOS_ID};
use crate::error::Error;
use crate::numerics::{
    load_checkpoint, lstm_cell, save_checkpoint, LstmGates, ParamId, ParamSet, Tape, TensorId,
    PROB_FLOOR,
};
use crate::Result;

/// Translation direction relative to the corpus sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Unsegmented symbols in, words out.
    Base,
    /// Words in, unsegmented symbols out.
    Reverse,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::Base => write!(f, "base"),
            Direction::Reverse => write!(f, "reverse"),
        }
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Direction::Base),
            "reverse" => Ok(Direction::Reverse),
            other => Err(Error::Config(format!(
                "unknown direction {other:?}, expected base or reverse"
            ))),
        }
    }
}

/// Shape configuration of a [`Seq2SeqModel`]. `source_vocab_size` refers to
/// the encoder side and `target_vocab_size` to the decoder side, after the
/// direction has been applied to the corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub direction: Direction,
    pub embed_size: usize,
    pub cell_size: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Temperature of the attention softmax, applied during both training
    /// and extraction. Values above 1 flatten the alignment distribution.
    pub attention_temperature: f64,
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
}

impl ModelConfig {
    /// Base preset: embedding and cell size 12, two stacked bidirectional
    /// encoder layers, one decoder layer.
    pub fn base_preset(source_vocab_size: usize, target_vocab_size: usize) -> Self {
        Self {
            direction: Direction::Base,
            embed_size: 12,
            cell_size: 12,
            encoder_layers: 2,
            decoder_layers: 1,
            attention_temperature: 1.0,
            source_vocab_size,
            target_vocab_size,
        }
    }

    /// Reverse preset: embedding and cell size 64, single bidirectional
    /// encoder layer, one decoder layer.
    pub fn reverse_preset(source_vocab_size: usize, target_vocab_size: usize) -> Self {
        Self {
            direction: Direction::Reverse,
            embed_size: 64,
            cell_size: 64,
            encoder_layers: 1,
            decoder_layers: 1,
            attention_temperature: 1.0,
            source_vocab_size,
            target_vocab_size,
        }
    }

    pub fn preset(
        direction: Direction,
        source_vocab_size: usize,
        target_vocab_size: usize,
    ) -> Self {
        match direction {
            Direction::Base => Self::base_preset(source_vocab_size, target_vocab_size),
            Direction::Reverse => Self::reverse_preset(source_vocab_size, target_vocab_size),
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.attention_temperature = temperature;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_size == 0 || self.cell_size == 0 {
            return Err(Error::Config(
                "embedding and cell size must be positive".into(),
            ));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("layer counts must be at least 1".into()));
        }
        if !(self.attention_temperature > 0.0 && self.attention_temperature.is_finite()) {
            return Err(Error::NonPositiveTemperature(self.attention_temperature));
        }
        if self.source_vocab_size == 0 || self.target_vocab_size == 0 {
            return Err(Error::Config("vocabulary sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone)]
struct LstmSlots {
    w_input: ParamId,
    w_forget: ParamId,
    w_cell: ParamId,
    w_output: ParamId,
    b_input: ParamId,
    b_forget: ParamId,
    b_cell: ParamId,
    b_output: ParamId,
}

#[derive(Clone)]
struct Slots {
    src_embed: ParamId,
    tgt_embed: ParamId,
    encoder: Vec<(LstmSlots, LstmSlots)>,
    init: Vec<(ParamId, ParamId)>,
    decoder: Vec<LstmSlots>,
    attn_w1: ParamId,
    attn_w2: ParamId,
    attn_b2: ParamId,
    attn_v: ParamId,
    maxout_w: ParamId,
    maxout_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// All learned parameters plus shape configuration.
#[derive(Clone)]
pub struct Seq2SeqModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    slots: Slots,
}

/// Uniform initialization range for non-forget-gate weights.
const INIT_RANGE: f64 = 0.08;
/// Forget-gate biases start saturated open so early gradients flow.
const FORGET_BIAS_INIT: f64 = 1.0;

fn uniform(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
        .collect()
}

fn add_lstm(
    params: &mut ParamSet,
    rng: &mut impl Rng,
    prefix: &str,
    cell: usize,
    input_dim: usize,
) -> LstmSlots {
    let d = input_dim + cell;
    let mut w = |name: &str| {
        params.add(
            format!("{prefix}.{name}"),
            vec![cell, d],
            uniform(rng, cell * d),
        )
    };
    let w_input = w("w_i");
    let w_forget = w("w_f");
    let w_cell = w("w_g");
    let w_output = w("w_o");
    let b_input = params.add(format!("{prefix}.b_i"), vec![cell], uniform(rng, cell));
    let b_forget = params.add(
        format!("{prefix}.b_f"),
        vec![cell],
        vec![FORGET_BIAS_INIT; cell],
    );
    let b_cell = params.add(format!("{prefix}.b_g"), vec![cell], uniform(rng, cell));
    let b_output = params.add(format!("{prefix}.b_o"), vec![cell], uniform(rng, cell));
    LstmSlots {
        w_input,
        w_forget,
        w_cell,
        w_output,
        b_input,
        b_forget,
        b_cell,
        b_output,
    }
}

impl Seq2SeqModel {
    /// Fresh model with weights drawn uniformly from the given source of
    /// randomness (forget-gate biases start at 1.0). Parameter creation
    /// order is fixed, so a seeded generator reproduces the model exactly.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let e = config.embed_size;
        let n = config.cell_size;
        let mut params = ParamSet::new();

        let src_embed = params.add(
            "src_embed",
            vec![config.source_vocab_size, e],
            uniform(rng, config.source_vocab_size * e),
        );
        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for l in 0..config.encoder_layers {
            let input_dim = if l == 0 { e } else { 2 * n };
            let fwd = add_lstm(&mut params, rng, &format!("enc{l}.fwd"), n, input_dim);
            let bwd = add_lstm(&mut params, rng, &format!("enc{l}.bwd"), n, input_dim);
            encoder.push((fwd, bwd));
        }
        let mut init = Vec::with_capacity(config.decoder_layers);
        for l in 0..config.decoder_layers {
            let w = params.add(
                format!("init{l}.w"),
                vec![n, 2 * n],
                uniform(rng, n * 2 * n),
            );
            let b = params.add(format!("init{l}.b"), vec![n], uniform(rng, n));
            init.push((w, b));
        }
        let mut decoder = Vec::with_capacity(config.decoder_layers);
        for l in 0..config.decoder_layers {
            let input_dim = if l == 0 { e + 2 * n } else { n };
            decoder.push(add_lstm(&mut params, rng, &format!("dec{l}"), n, input_dim));
        }
        let attn_w1 = params.add("attn.w1", vec![n, 2 * n], uniform(rng, n * 2 * n));
        let attn_w2 = params.add("attn.w2", vec![n, n], uniform(rng, n * n));
        let attn_b2 = params.add("attn.b2", vec![n], uniform(rng, n));
        let attn_v = params.add("attn.v", vec![n], uniform(rng, n));
        let tgt_embed = params.add(
            "tgt_embed",
            vec![config.target_vocab_size, e],
            uniform(rng, config.target_vocab_size * e),
        );
        // Maxout with pool size 2 and hidden width equal to the cell size.
        let out_in = n + e + 2 * n;
        let maxout_w = params.add(
            "maxout.w",
            vec![2 * n, out_in],
            uniform(rng, 2 * n * out_in),
        );
        let maxout_b = params.add("maxout.b", vec![2 * n], uniform(rng, 2 * n));
        let out_w = params.add(
            "out.w",
            vec![config.target_vocab_size, n],
            uniform(rng, config.target_vocab_size * n),
        );
        let out_b = params.add(
            "out.b",
            vec![config.target_vocab_size],
            uniform(rng, config.target_vocab_size),
        );

        Ok(Self {
            config,
            params,
            slots: Slots {
                src_embed,
                tgt_embed,
                encoder,
                init,
                decoder,
                attn_w1,
                attn_w2,
                attn_b2,
                attn_v,
                maxout_w,
                maxout_b,
                out_w,
                out_b,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.config, &self.params)
    }

    /// Rebuilds a model from a checkpoint, verifying that the stored
    /// parameters cover every slot with the right shapes.
    pub fn load(path: &Path) -> Result<Self> {
        use rand::SeedableRng;
        let (config, records) = load_checkpoint::<ModelConfig>(path)?;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
        let mut model = Self::new(config, &mut rng)?;
        if records.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model needs {}",
                records.len(),
                model.params.len()
            )));
        }
        for record in records {
            let id = model.params.find(&record.name).ok_or_else(|| {
                Error::Checkpoint(format!("unexpected parameter {:?}", record.name))
            })?;
            if model.params.get(id).shape != record.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {:?} has shape {:?}, expected {:?}",
                    record.name,
                    record.shape,
                    model.params.get(id).shape
                )));
            }
            model.params.values_mut(id).copy_from_slice(&record.values);
        }
        Ok(model)
    }

    /// Sentence ids oriented for this model: `(encoder side, decoder side)`.
    pub fn oriented<'a>(&self, pair: &'a SentencePair) -> (&'a [u32], &'a [u32]) {
        match self.config.direction {
            Direction::Base => (&pair.source, &pair.target),
            Direction::Reverse => (&pair.target, &pair.source),
        }
    }

    /// Places every parameter on a tape.
    pub fn place(&self, tape: &mut Tape) -> ModelLeaves {
        let p = &self.params;
        let lstm = |tape: &mut Tape, s: &LstmSlots| LstmGates {
            w_input: tape.param_leaf(p, s.w_input),
            w_forget: tape.param_leaf(p, s.w_forget),
            w_cell: tape.param_leaf(p, s.w_cell),
            w_output: tape.param_leaf(p, s.w_output),
            b_input: tape.param_leaf(p, s.b_input),
            b_forget: tape.param_leaf(p, s.b_forget),
            b_cell: tape.param_leaf(p, s.b_cell),
            b_output: tape.param_leaf(p, s.b_output),
        };
        ModelLeaves {
            src_embed: tape.param_leaf(p, self.slots.src_embed),
            tgt_embed: tape.param_leaf(p, self.slots.tgt_embed),
            encoder: self
                .slots
                .encoder
                .iter()
                .map(|(f, b)| (lstm(tape, f), lstm(tape, b)))
                .collect(),
            init: self
                .slots
                .init
                .iter()
                .map(|&(w, b)| (tape.param_leaf(p, w), tape.param_leaf(p, b)))
                .collect(),
            decoder: self.slots.decoder.iter().map(|s| lstm(tape, s)).collect(),
            attn_w1: tape.param_leaf(p, self.slots.attn_w1),
            attn_w2: tape.param_leaf(p, self.slots.attn_w2),
            attn_b2: tape.param_leaf(p, self.slots.attn_b2),
            attn_v: tape.param_leaf(p, self.slots.attn_v),
            maxout_w: tape.param_leaf(p, self.slots.maxout_w),
            maxout_b: tape.param_leaf(p, self.slots.maxout_b),
            out_w: tape.param_leaf(p, self.slots.out_w),
            out_b: tape.param_leaf(p, self.slots.out_b),
        }
    }

    /// Runs the (stacked) bidirectional encoder. Returns one state of
    /// dimension `2n` per input position.
    pub fn encode(
        &self,
        tape: &mut Tape,
        leaves: &ModelLeaves,
        ids: &[u32],
    ) -> Result<Vec<TensorId>> {
        if ids.is_empty() {
            return Err(Error::ShapeMismatch("encode: empty input sequence".into()));
        }
        for &id in ids {
            if id as usize >= self.config.source_vocab_size {
                return Err(Error::InvalidId {
                    id,
                    vocab: self.config.source_vocab_size,
                });
            }
        }
        let n = self.config.cell_size;
        let mut inputs: Vec<TensorId> = ids
            .iter()
            .map(|&id| tape.row(leaves.src_embed, id as usize))
            .collect();
        for (fwd, bwd) in &leaves.encoder {
            let forward = run_lstm_direction(tape, &inputs, fwd, n, false)?;
            let backward = run_lstm_direction(tape, &inputs, bwd, n, true)?;
            inputs = forward
                .iter()
                .zip(&backward)
                .map(|(&f, &b)| tape.concat(&[f, b]))
                .collect();
        }
        Ok(inputs)
    }

    /// Initial decoder state: a non-linear transform of the last encoder
    /// state, per decoder layer; cell states start at zero.
    pub fn initial_state(
        &self,
        tape: &mut Tape,
        leaves: &ModelLeaves,
        encoder_states: &[TensorId],
    ) -> DecoderState {
        let last = *encoder_states.last().expect("encode rejects empty input");
        let layers = leaves
            .init
            .iter()
            .map(|&(w, b)| {
                let a = tape.matvec(w, last);
                let ab = tape.add(a, b);
                let h = tape.tanh(ab);
                let c = tape.zeros(self.config.cell_size);
                (h, c)
            })
            .collect();
        DecoderState { layers }
    }

    /// Attention: scores `e_i = v^T tanh(W1 h_i + W2 s + b2)` are
    /// temperature-softmaxed into weights, and the context is the weighted
    /// sum of the encoder states. Masked positions get weight exactly 0.
    pub fn attend(
        &self,
        tape: &mut Tape,
        leaves: &ModelLeaves,
        states: &[TensorId],
        query: TensorId,
        mask: Option<&[bool]>,
    ) -> Result<(TensorId, TensorId)> {
        let w1h: Vec<TensorId> = states
            .iter()
            .map(|&h| tape.matvec(leaves.attn_w1, h))
            .collect();
        self.attend_cached(tape, leaves, states, &w1h, query, mask)
    }

    fn attend_cached(
        &self,
        tape: &mut Tape,
        leaves: &ModelLeaves,
        states: &[TensorId],
        w1h: &[TensorId],
        query: TensorId,
        mask: Option<&[bool]>,
    ) -> Result<(TensorId, TensorId)> {
        let q = tape.matvec(leaves.attn_w2, query);
        let qb = tape.add(q, leaves.attn_b2);
        let scores: Vec<TensorId> = w1h
            .iter()
            .map(|&u| {
                let s = tape.add(u, qb);
                let t = tape.tanh(s);
                tape.dot(leaves.attn_v, t)
            })
            .collect();
        let score_vec = tape.stack(&scores);
        let weights = tape.softmax(score_vec, self.config.attention_temperature, mask)?;
        let context = tape.weighted_sum(weights, states);
        Ok((context, weights))
    }

    /// One teacher-forced decoder step. `prev_word` feeds the output
    /// function, `cur_word` advances the LSTM state; the generated symbol
    /// (argmax of the logits) is reported but never fed back.
    pub fn decoder_step(
        &self,
        tape: &mut Tape,
        leaves: &ModelLeaves,
        encoder_states: &[TensorId],
        state: &DecoderState,
        prev_word: u32,
        cur_word: u32,
    ) -> Result<StepOutput> {
        let w1h: Vec<TensorId> = encoder_states
            .iter()
            .map(|&h| tape.matvec(leaves.attn_w1, h))
            .collect();
        let art = self.step_graph(
            tape,
            leaves,
            encoder_states,
            &w1h,
            state,
            prev_word,
            Some(cur_word),
            None,
        )?;
        Ok(StepOutput {
            logits: art.logits,
            probs: art.probs,
            state: art.next_state.expect("cur_word was provided"),
            weights: art.weights,
            generated: argmax(tape.value(art.logits)),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn step_graph(
        &self,
        tape: &mut Tape,
        leaves: &ModelLeaves,
        encoder_states: &[TensorId],
        w1h: &[TensorId],
        state: &DecoderState,
        prev_word: u32,
        cur_word: Option<u32>,
        mask: Option<&[bool]>,
    ) -> Result<StepArtifacts> {
        for w in [Some(prev_word), cur_word].into_iter().flatten() {
            if w as usize >= self.config.target_vocab_size {
                return Err(Error::InvalidId {
                    id: w,
                    vocab: self.config.target_vocab_size,
                });
            }
        }
        let query = state.top_hidden();
        let q = tape.matvec(leaves.attn_w2, query);
        let qb = tape.add(q, leaves.attn_b2);
        let score_nodes: Vec<TensorId> = w1h
            .iter()
            .map(|&u| {
                let s = tape.add(u, qb);
                let t = tape.tanh(s);
                tape.dot(leaves.attn_v, t)
            })
            .collect();
        let scores = tape.stack(&score_nodes);
        let weights = tape.softmax(scores, self.config.attention_temperature, mask)?;
        let context = tape.weighted_sum(weights, encoder_states);

        let prev_emb = tape.row(leaves.tgt_embed, prev_word as usize);
        let out_in = tape.concat(&[query, prev_emb, context]);
        let mo = tape.matvec(leaves.maxout_w, out_in);
        let mob = tape.add(mo, leaves.maxout_b);
        let pooled = tape.max_pairs(mob);
        let proj = tape.matvec(leaves.out_w, pooled);
        let logits = tape.add(proj, leaves.out_b);
        let probs = tape.softmax(logits, 1.0, None)?;

        let next_state = match cur_word {
            Some(w) => {
                let emb = tape.row(leaves.tgt_embed, w as usize);
                let mut input = tape.concat(&[emb, context]);
                let mut layers = Vec::with_capacity(state.layers.len());
                for (gates, &(h, c)) in leaves.decoder.iter().zip(&state.layers) {
                    let (h2, c2) = lstm_cell(tape, input, h, c, gates)?;
                    layers.push((h2, c2));
                    input = h2;
                }
                Some(DecoderState { layers })
            }
            None => None,
        };
        Ok(StepArtifacts {
            logits,
            probs,
            weights,
            scores,
            next_state,
        })
    }

    /// Builds the full forced-decoding graph for one sentence on an
    /// existing tape: the decoder runs over the reference target plus the
    /// end-of-sentence symbol. Returns the loss node, the attention rows
    /// (end-of-sentence row last) and the per-step probability nodes.
    pub(crate) fn force_decode_graph(
        &self,
        tape: &mut Tape,
        leaves: &ModelLeaves,
        encoder_ids: &[u32],
        decoder_ids: &[u32],
    ) -> Result<ForcedDecode> {
        let states = self.encode(tape, leaves, encoder_ids)?;
        let w1h: Vec<TensorId> = states
            .iter()
            .map(|&h| tape.matvec(leaves.attn_w1, h))
            .collect();
        let mut state = self.initial_state(tape, leaves, &states);

        let mut refs: Vec<u32> = decoder_ids.to_vec();
        refs.push(EOS_ID);

        let mut prev = BOS_ID;
        let mut log_terms = Vec::with_capacity(refs.len());
        let mut alpha_rows = Vec::with_capacity(refs.len());
        let mut score_rows = Vec::with_capacity(refs.len());
        let mut prob_nodes = Vec::with_capacity(refs.len());
        for (t, &w) in refs.iter().enumerate() {
            let advance = if t + 1 < refs.len() { Some(w) } else { None };
            let art =
                self.step_graph(tape, leaves, &states, &w1h, &state, prev, advance, None)?;
            let p_ref = tape.index(art.probs, w as usize);
            log_terms.push(tape.ln_clamped(p_ref, PROB_FLOOR));
            alpha_rows.push(tape.value(art.weights).to_vec());
            score_rows.push(tape.value(art.scores).to_vec());
            prob_nodes.push(art.probs);
            if let Some(next) = art.next_state {
                state = next;
            }
            prev = w;
        }
        let total = tape.sum_all(&log_terms);
        let loss = tape.scale(total, -1.0);
        Ok(ForcedDecode {
            loss,
            alpha_rows,
            score_rows,
            prob_nodes,
        })
    }

    /// Forced-decoding loss of one pair, without assembling the matrix.
    pub fn sentence_loss(&self, pair: &SentencePair) -> Result<f64> {
        let (enc_ids, dec_ids) = self.oriented(pair);
        let mut tape = Tape::new();
        let leaves = self.place(&mut tape);
        let decode = self.force_decode_graph(&mut tape, &leaves, enc_ids, dec_ids)?;
        Ok(tape.scalar(decode.loss))
    }

    /// Runs a backward pass on the forced-decoding loss of one pair and
    /// accumulates the gradients into the model parameters. Returns the
    /// loss value.
    pub fn accumulate_loss_gradients(&mut self, pair: &SentencePair) -> Result<f64> {
        let mut tape = Tape::new();
        let decode = {
            let leaves = self.place(&mut tape);
            let (enc_ids, dec_ids) = self.oriented(pair);
            self.force_decode_graph(&mut tape, &leaves, enc_ids, dec_ids)?
        };
        tape.backward(decode.loss);
        tape.accumulate_param_grads(&mut self.params);
        Ok(tape.scalar(decode.loss))
    }

    /// Force-decodes one sentence pair and returns the loss together with
    /// the soft-alignment matrix: one row per reference position plus a
    /// flagged end-of-sentence row, one column per encoder position.
    pub fn force_decode(
        &self,
        pair: &SentencePair,
        source_vocab: &Vocabulary,
        target_vocab: &Vocabulary,
    ) -> Result<(f64, AlignmentMatrix)> {
        self.force_decode_at(
            pair,
            source_vocab,
            target_vocab,
            self.config.attention_temperature,
        )
    }

    /// Like [`Seq2SeqModel::force_decode`], but the exported rows are the
    /// attention scores re-softmaxed at `export_temperature`. The model
    /// itself (contexts, states, loss) still runs at its configured
    /// temperature; since a temperature change is a monotone transform of
    /// one row, the per-row ranking is preserved.
    pub fn force_decode_at(
        &self,
        pair: &SentencePair,
        source_vocab: &Vocabulary,
        target_vocab: &Vocabulary,
        export_temperature: f64,
    ) -> Result<(f64, AlignmentMatrix)> {
        let (enc_ids, dec_ids) = self.oriented(pair);
        let (enc_vocab, dec_vocab) = match self.config.direction {
            Direction::Base => (source_vocab, target_vocab),
            Direction::Reverse => (target_vocab, source_vocab),
        };
        let mut tape = Tape::new();
        let leaves = self.place(&mut tape);
        let decode = self.force_decode_graph(&mut tape, &leaves, enc_ids, dec_ids)?;

        let rows = if export_temperature == self.config.attention_temperature {
            decode.alpha_rows
        } else {
            decode
                .score_rows
                .iter()
                .map(|scores| crate::numerics::softmax_temperature(scores, export_temperature))
                .collect::<Result<_>>()?
        };

        let mut row_surfaces: Vec<String> = dec_ids
            .iter()
            .map(|&id| dec_vocab.surface(id).to_string())
            .collect();
        row_surfaces.push(dec_vocab.surface(EOS_ID).to_string());
        let col_surfaces: Vec<String> = enc_ids
            .iter()
            .map(|&id| enc_vocab.surface(id).to_string())
            .collect();

        let matrix = AlignmentMatrix {
            rows,
            row_surfaces,
            col_surfaces,
            eos_row: true,
            direction: self.config.direction,
        };
        matrix.validate()?;
        Ok((tape.scalar(decode.loss), matrix))
    }
}

pub(crate) struct ForcedDecode {
    pub loss: TensorId,
    pub alpha_rows: Vec<Vec<f64>>,
    pub score_rows: Vec<Vec<f64>>,
    #[allow(dead_code)] // read by the oracle tests
    pub prob_nodes: Vec<TensorId>,
}

/// Per-layer decoder hidden and cell states on a tape.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub layers: Vec<(TensorId, TensorId)>,
}

impl DecoderState {
    /// The state that queries attention and feeds the output function.
    pub fn top_hidden(&self) -> TensorId {
        self.layers.last().expect("at least one decoder layer").0
    }
}

/// Result of a public [`Seq2SeqModel::decoder_step`].
pub struct StepOutput {
    pub logits: TensorId,
    pub probs: TensorId,
    pub state: DecoderState,
    pub weights: TensorId,
    /// Argmax of the logits: the symbol the model would emit. Reported
    /// only; teacher forcing never feeds it back.
    pub generated: usize,
}

struct StepArtifacts {
    logits: TensorId,
    probs: TensorId,
    weights: TensorId,
    scores: TensorId,
    next_state: Option<DecoderState>,
}

/// Parameter leaves of one model placed on one tape.
pub struct ModelLeaves {
    pub src_embed: TensorId,
    pub tgt_embed: TensorId,
    pub encoder: Vec<(LstmGates, LstmGates)>,
    pub init: Vec<(TensorId, TensorId)>,
    pub decoder: Vec<LstmGates>,
    pub attn_w1: TensorId,
    pub attn_w2: TensorId,
    pub attn_b2: TensorId,
    pub attn_v: TensorId,
    pub maxout_w: TensorId,
    pub maxout_b: TensorId,
    pub out_w: TensorId,
    pub out_b: TensorId,
}

fn run_lstm_direction(
    tape: &mut Tape,
    inputs: &[TensorId],
    gates: &LstmGates,
    cell_size: usize,
    reversed: bool,
) -> Result<Vec<TensorId>> {
    let mut hidden = tape.zeros(cell_size);
    let mut cell = tape.zeros(cell_size);
    let mut out = vec![None; inputs.len()];
    let indices: Vec<usize> = if reversed {
        (0..inputs.len()).rev().collect()
    } else {
        (0..inputs.len()).collect()
    };
    for i in indices {
        let (h, c) = lstm_cell(tape, inputs[i], hidden, cell, gates)?;
        hidden = h;
        cell = c;
        out[i] = Some(h);
    }
    Ok(out
        .into_iter()
        .map(|o| o.expect("all positions visited"))
        .collect())
}

/// Index of the largest value; ties break toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-token mean of forced-decoding losses over a corpus slice, counting
/// the end-of-sentence step.
pub fn mean_per_token_loss(
    model: &Seq2SeqModel,
    pairs: &[SentencePair],
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for pair in pairs {
        let (loss, _) = model.force_decode(pair, source_vocab, target_vocab)?;
        let (_, dec_ids) = model.oriented(pair);
        total += loss;
        tokens += dec_ids.len() + 1;
    }
    Ok(total / tokens.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cross_entropy, gradient_check, sample_coords, DEFAULT_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            direction: Direction::Base,
            embed_size: 8,
            cell_size: 8,
            encoder_layers: 2,
            decoder_layers: 1,
            attention_temperature: 2.0,
            source_vocab_size: 7,
            target_vocab_size: 7,
        }
    }

    fn new_model(config: ModelConfig, seed: u64) -> Seq2SeqModel {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Seq2SeqModel::new(config, &mut rng).unwrap()
    }

    #[test]
    fn encoder_states_have_dimension_2n() {
        let mut config = small_config();
        config.embed_size = 12;
        config.cell_size = 12;
        let model = new_model(config, 1);
        let mut tape = Tape::new();
        let leaves = model.place(&mut tape);
        let states = model.encode(&mut tape, &leaves, &[4, 5, 6, 4, 5]).unwrap();
        assert_eq!(states.len(), 5);
        for s in &states {
            assert_eq!(tape.shape(*s), &[24]);
        }
    }

    #[test]
    fn empty_input_is_rejected() {
        let model = new_model(small_config(), 1);
        let mut tape = Tape::new();
        let leaves = model.place(&mut tape);
        assert!(model.encode(&mut tape, &leaves, &[]).is_err());
    }

    #[test]
    fn invalid_ids_are_rejected() {
        let model = new_model(small_config(), 1);
        let mut tape = Tape::new();
        let leaves = model.place(&mut tape);
        assert!(matches!(
            model.encode(&mut tape, &leaves, &[99]),
            Err(Error::InvalidId { .. })
        ));
    }

    /// With identical forward and backward cells, reversing the input
    /// mirrors the state sequence with its halves swapped.
    #[test]
    fn reversed_input_swaps_state_halves_when_directions_share_weights() {
        let mut config = small_config();
        config.encoder_layers = 1;
        let mut model = new_model(config, 3);
        for gate in ["w_i", "w_f", "w_g", "w_o", "b_i", "b_f", "b_g", "b_o"] {
            let fwd = model.params.find(&format!("enc0.fwd.{gate}")).unwrap();
            let bwd = model.params.find(&format!("enc0.bwd.{gate}")).unwrap();
            let values = model.params.values(fwd).to_vec();
            model.params.values_mut(bwd).copy_from_slice(&values);
        }
        let n = model.config.cell_size;
        let mut tape = Tape::new();
        let leaves = model.place(&mut tape);
        let fwd_states = model.encode(&mut tape, &leaves, &[4, 5]).unwrap();
        let rev_states = model.encode(&mut tape, &leaves, &[5, 4]).unwrap();
        for i in 0..2 {
            let a = tape.value(fwd_states[i]).to_vec();
            let b = tape.value(rev_states[1 - i]).to_vec();
            for j in 0..n {
                assert!((a[j] - b[n + j]).abs() < 1e-12);
                assert!((a[n + j] - b[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_with_equal_scores_is_uniform_and_averages_states() {
        let mut model = new_model(small_config(), 5);
        // A zero score vector makes every position score 0.
        let v = model.params.find("attn.v").unwrap();
        for x in model.params.values_mut(v) {
            *x = 0.0;
        }
        let mut tape = Tape::new();
        let leaves = model.place(&mut tape);
        let states = model.encode(&mut tape, &leaves, &[4, 5, 6]).unwrap();
        let query = tape.zeros(model.config.cell_size);
        let (ctx, weights) = model
            .attend(&mut tape, &leaves, &states, query, None)
            .unwrap();
        for w in tape.value(weights) {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        let mean: Vec<f64> = (0..16)
            .map(|j| states.iter().map(|&s| tape.value(s)[j]).sum::<f64>() / 3.0)
            .collect();
        for (a, b) in tape.value(ctx).iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let model = new_model(small_config(), 6);
        let mut tape = Tape::new();
        let leaves = model.place(&mut tape);
        let states = model.encode(&mut tape, &leaves, &[4, 5, 6, 5]).unwrap();
        let query = tape.leaf(vec![8], vec![0.3; 8]);
        let (_, weights) = model
            .attend(&mut tape, &leaves, &states, query, None)
            .unwrap();
        let sum: f64 = tape.value(weights).iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    /// A score 50 above the rest yields a (numerically) one-hot weight
    /// vector and a context equal to the winning state.
    #[test]
    fn dominant_score_gives_one_hot_attention() {
        let mut config = small_config();
        config.cell_size = 2;
        config.embed_size = 2;
        config.attention_temperature = 1.0;
        let mut model = new_model(config, 7);
        // Scores become v[0] * tanh(h_i[0]) with v[0] = 50 / tanh(3).
        let set = |params: &mut ParamSet, name: &str, values: Vec<f64>| {
            let id = params.find(name).unwrap();
            params.values_mut(id).copy_from_slice(&values);
        };
        set(
            &mut model.params,
            "attn.w1",
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        );
        set(&mut model.params, "attn.w2", vec![0.0; 4]);
        set(&mut model.params, "attn.b2", vec![0.0, 0.0]);
        set(&mut model.params, "attn.v", vec![50.0 / 3.0f64.tanh(), 0.0]);

        let mut tape = Tape::new();
        let leaves = model.place(&mut tape);
        let s1 = tape.leaf(vec![4], vec![3.0, 0.5, -0.2, 0.8]);
        let s2 = tape.leaf(vec![4], vec![0.0, 1.0, 0.3, -0.4]);
        let s3 = tape.leaf(vec![4], vec![0.0, -1.0, 0.6, 0.1]);
        let query = tape.zeros(2);
        let (ctx, weights) = model
            .attend(&mut tape, &leaves, &[s1, s2, s3], query, None)
            .unwrap();
        let w = tape.value(weights);
        assert!((w[0] - 1.0).abs() < 1e-9);
        assert!(w[1] < 1e-9 && w[2] < 1e-9);
        for (c, s) in tape.value(ctx).iter().zip(tape.value(s1)) {
            assert!((c - s).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_attention_gives_masked_positions_zero_weight() {
        let model = new_model(small_config(), 8);
        let mut tape = Tape::new();
        let leaves = model.place(&mut tape);
        let states = model.encode(&mut tape, &leaves, &[4, 5, 6]).unwrap();
        let query = tape.zeros(8);
        let mask = vec![true, false, true];
        let (_, weights) = model
            .attend(&mut tape, &leaves, &states, query, Some(&mask))
            .unwrap();
        let w = tape.value(weights);
        assert_eq!(w[1], 0.0);
        assert!((w[0] + w[2] - 1.0).abs() < 1e-12);

        let all = vec![false, false, false];
        assert!(matches!(
            model.attend(&mut tape, &leaves, &states, query, Some(&all)),
            Err(Error::AllMasked)
        ));
    }

    #[test]
    fn logits_have_vocabulary_size() {
        let model = new_model(small_config(), 9);
        let mut tape = Tape::new();
        let leaves = model.place(&mut tape);
        let states = model.encode(&mut tape, &leaves, &[4, 5]).unwrap();
        let state = model.initial_state(&mut tape, &leaves, &states);
        let out = model
            .decoder_step(&mut tape, &leaves, &states, &state, BOS_ID, 4)
            .unwrap();
        assert_eq!(tape.shape(out.logits), &[7]);
        assert!(out.generated < 7);
    }

    /// The output head influences only the logits: corrupting it changes
    /// neither the attention rows nor later decoder states, because the
    /// generated symbol is never fed back.
    #[test]
    fn generated_symbol_does_not_leak_into_the_state() {
        let model = new_model(small_config(), 10);
        let source = vec![4u32, 5, 6, 4];
        let target = vec![4u32, 5, 6];
        let run = |model: &Seq2SeqModel| -> (Vec<Vec<f64>>, f64) {
            let mut tape = Tape::new();
            let leaves = model.place(&mut tape);
            let decode = model
                .force_decode_graph(&mut tape, &leaves, &source, &target)
                .unwrap();
            (decode.alpha_rows.clone(), tape.scalar(decode.loss))
        };
        let (alpha_before, loss_before) = run(&model);

        let mut corrupted = new_model(small_config(), 10);
        let out_w = corrupted.params.find("out.w").unwrap();
        for x in corrupted.params.values_mut(out_w) {
            *x = -*x * 3.0 + 0.1;
        }
        let (alpha_after, loss_after) = run(&corrupted);

        assert_ne!(loss_before, loss_after);
        for (a, b) in alpha_before.iter().zip(&alpha_after) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x, y, "attention must not depend on the output head");
            }
        }
    }

    /// Hand-unrolled two-step scalar computation at cell size 1.
    #[test]
    fn two_decoder_steps_match_a_scalar_oracle() {
        let config = ModelConfig {
            direction: Direction::Base,
            embed_size: 1,
            cell_size: 1,
            encoder_layers: 1,
            decoder_layers: 1,
            attention_temperature: 1.5,
            source_vocab_size: 6,
            target_vocab_size: 6,
        };
        let model = new_model(config, 11);
        let p = &model.params;
        let get = |name: &str| p.values(p.find(name).unwrap()).to_vec();

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        // Scalar encoder LSTM with one unit: input [x, h].
        let lstm = |prefix: &str, x: f64, h: f64, c: f64| -> (f64, f64) {
            let gate = |g: &str| {
                let w = get(&format!("{prefix}.w_{g}"));
                let b = get(&format!("{prefix}.b_{g}"));
                w[0] * x + w[1] * h + b[0]
            };
            let i = sig(gate("i"));
            let f = sig(gate("f"));
            let g = gate("g").tanh();
            let o = sig(gate("o"));
            let c2 = f * c + i * g;
            (o * c2.tanh(), c2)
        };

        let src = [4u32, 5u32];
        let tgt = [4u32, 5u32];
        let src_emb = get("src_embed");
        let tgt_emb = get("tgt_embed");
        let x1 = src_emb[4];
        let x2 = src_emb[5];

        let (f1, fc1) = lstm("enc0.fwd", x1, 0.0, 0.0);
        let (f2, _) = lstm("enc0.fwd", x2, f1, fc1);
        let (b2, bc2) = lstm("enc0.bwd", x2, 0.0, 0.0);
        let (b1, _) = lstm("enc0.bwd", x1, b2, bc2);
        let h = [[f1, b1], [f2, b2]];

        let init_w = get("init0.w");
        let init_b = get("init0.b");
        let s0 = (init_w[0] * h[1][0] + init_w[1] * h[1][1] + init_b[0]).tanh();

        let w1 = get("attn.w1");
        let w2 = get("attn.w2");
        let b2p = get("attn.b2");
        let v = get("attn.v");
        let attend = |s: f64| -> (f64, [f64; 2]) {
            let score = |hi: [f64; 2]| {
                v[0] * (w1[0] * hi[0] + w1[1] * hi[1] + w2[0] * s + b2p[0]).tanh()
            };
            let (e1, e2) = (score(h[0]), score(h[1]));
            let t = 1.5;
            let m = e1.max(e2);
            let (z1, z2) = (((e1 - m) / t).exp(), ((e2 - m) / t).exp());
            let sum = z1 + z2;
            let (a1, a2) = (z1 / sum, z2 / sum);
            let c = [a1 * h[0][0] + a2 * h[1][0], a1 * h[0][1] + a2 * h[1][1]];
            (a1, c)
        };

        let maxout_w = get("maxout.w"); // 2 x 4
        let maxout_b = get("maxout.b");
        let out_w = get("out.w"); // 6 x 1
        let out_b = get("out.b");
        let output = |s: f64, w_prev_emb: f64, c: [f64; 2]| -> Vec<f64> {
            let input = [s, w_prev_emb, c[0], c[1]];
            let row = |r: usize| -> f64 {
                let mut acc = maxout_b[r];
                for (k, x) in input.iter().enumerate() {
                    acc += maxout_w[r * 4 + k] * x;
                }
                acc
            };
            let pooled = row(0).max(row(1));
            (0..6).map(|j| out_w[j] * pooled + out_b[j]).collect()
        };

        // Decoder LSTM input is [word-embedding, context0, context1].
        let dlstm = |x: [f64; 3], hprev: f64, cprev: f64| -> (f64, f64) {
            let gate = |g: &str| {
                let w = get(&format!("dec0.w_{g}"));
                let b = get(&format!("dec0.b_{g}"));
                w[0] * x[0] + w[1] * x[1] + w[2] * x[2] + w[3] * hprev + b[0]
            };
            let i = sig(gate("i"));
            let f = sig(gate("f"));
            let g = gate("g").tanh();
            let o = sig(gate("o"));
            let c2 = f * cprev + i * g;
            (o * c2.tanh(), c2)
        };

        // Step 1: query s0, previous word BOS, current word tgt[0].
        let (a1, c1) = attend(s0);
        let logits1 = output(s0, tgt_emb[BOS_ID as usize], c1);
        let (s1, sc1) = dlstm([tgt_emb[tgt[0] as usize], c1[0], c1[1]], s0, 0.0);

        // Step 2: query s1, previous word tgt[0], current word tgt[1].
        let (a2, c2v) = attend(s1);
        let logits2 = output(s1, tgt_emb[tgt[0] as usize], c2v);
        let (s2, _) = dlstm([tgt_emb[tgt[1] as usize], c2v[0], c2v[1]], s1, sc1);

        // Model side.
        let mut tape = Tape::new();
        let leaves = model.place(&mut tape);
        let states = model.encode(&mut tape, &leaves, &src).unwrap();
        let state0 = model.initial_state(&mut tape, &leaves, &states);
        assert!((tape.value(state0.layers[0].0)[0] - s0).abs() < 1e-12);

        let step1 = model
            .decoder_step(&mut tape, &leaves, &states, &state0, BOS_ID, tgt[0])
            .unwrap();
        for (got, want) in tape.value(step1.logits).iter().zip(&logits1) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((tape.value(step1.weights)[0] - a1).abs() < 1e-12);
        assert!((tape.value(step1.state.layers[0].0)[0] - s1).abs() < 1e-12);

        let step2 = model
            .decoder_step(&mut tape, &leaves, &states, &step1.state, tgt[0], tgt[1])
            .unwrap();
        for (got, want) in tape.value(step2.logits).iter().zip(&logits2) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((tape.value(step2.weights)[0] - a2).abs() < 1e-12);
        assert!((tape.value(step2.state.layers[0].0)[0] - s2).abs() < 1e-12);
    }

    #[test]
    fn force_decode_rows_sum_to_one_and_shapes_match() {
        let model = new_model(small_config(), 12);
        let source = vec![4u32, 5, 6, 4, 5, 6, 4, 5, 6, 4];
        let target = vec![4u32, 5, 6, 5];
        let mut tape = Tape::new();
        let leaves = model.place(&mut tape);
        let decode = model
            .force_decode_graph(&mut tape, &leaves, &source, &target)
            .unwrap();
        // A 4-word target over 10 symbols gives a 5 x 10 matrix.
        assert_eq!(decode.alpha_rows.len(), 5);
        for row in &decode.alpha_rows {
            assert_eq!(row.len(), 10);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn force_decode_loss_equals_cross_entropy_of_step_probabilities() {
        let model = new_model(small_config(), 13);
        let source = vec![4u32, 5, 6];
        let target = vec![5u32, 6];
        let mut tape = Tape::new();
        let leaves = model.place(&mut tape);
        let decode = model
            .force_decode_graph(&mut tape, &leaves, &source, &target)
            .unwrap();
        let probs: Vec<Vec<f64>> = decode
            .prob_nodes
            .iter()
            .map(|&p| tape.value(p).to_vec())
            .collect();
        let refs: Vec<usize> = target
            .iter()
            .map(|&w| w as usize)
            .chain([EOS_ID as usize])
            .collect();
        let reference = cross_entropy(&probs, &refs).unwrap();
        assert!((tape.scalar(decode.loss) - reference).abs() < 1e-12);
    }

    /// Doubling the temperature preserves the ranking within each row.
    #[test]
    fn temperature_change_preserves_row_ranking() {
        let source = vec![4u32, 5, 6, 4, 6];
        let target = vec![4u32, 6];
        let run = |temperature: f64| -> Vec<Vec<f64>> {
            let mut config = small_config();
            config.attention_temperature = temperature;
            let model = new_model(config, 14);
            let mut tape = Tape::new();
            let leaves = model.place(&mut tape);
            model
                .force_decode_graph(&mut tape, &leaves, &source, &target)
                .unwrap()
                .alpha_rows
        };
        let rows_t = run(2.0);
        let rows_2t = run(4.0);
        let rank = |row: &[f64]| {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
            idx
        };
        for (a, b) in rows_t.iter().zip(&rows_2t) {
            assert_eq!(rank(a), rank(b));
        }
    }

    #[test]
    fn force_decode_gradients_match_finite_differences() {
        // Small end-to-end configuration: A=5, T=4, |V|=7, n=8.
        let mut model = new_model(small_config(), 15);
        let enc: Vec<u32> = vec![4, 5, 6, 4, 5];
        let dec: Vec<u32> = vec![5, 6, 4, 6];

        let mut tape = Tape::new();
        let leaves = model.place(&mut tape);
        let decode = model
            .force_decode_graph(&mut tape, &leaves, &enc, &dec)
            .unwrap();
        tape.backward(decode.loss);
        model.params.zero_grads();
        tape.accumulate_param_grads(&mut model.params);

        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let coords = sample_coords(&model.params, 220, &mut rng);
        let config = model.config.clone();
        let slots = model.slots.clone();
        let report = gradient_check(
            &mut model.params,
            |p| {
                let probe_model = Seq2SeqModel {
                    config: config.clone(),
                    params: p.clone(),
                    slots: slots.clone(),
                };
                let mut probe = Tape::new();
                let leaves = probe_model.place(&mut probe);
                let d = probe_model
                    .force_decode_graph(&mut probe, &leaves, &enc, &dec)
                    .unwrap();
                probe.scalar(d.loss)
            },
            &coords,
            DEFAULT_STEP,
            1e-4,
        );
        assert!(
            report.passed(),
            "max relative error {} at {:?}",
            report.max_rel_err,
            report.failures().next().map(|c| (c.param.clone(), c.index))
        );
    }

    #[test]
    fn checkpoint_round_trip_preserves_behaviour() {
        let model = new_model(small_config(), 16);
        let dir = std::env::temp_dir().join(format!("model-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        model.save(&path).unwrap();
        let loaded = Seq2SeqModel::load(&path).unwrap();

        let source = vec![4u32, 5, 6];
        let target = vec![6u32, 4];
        let run = |m: &Seq2SeqModel| {
            let mut tape = Tape::new();
            let leaves = m.place(&mut tape);
            let d = m
                .force_decode_graph(&mut tape, &leaves, &source, &target)
                .unwrap();
            (tape.scalar(d.loss), d.alpha_rows)
        };
        let (l1, a1) = run(&model);
        let (l2, a2) = run(&loaded);
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(a1, a2);
        std::fs::remove_dir_all(&dir).ok();
    }
}
