//! Deterministic synthetic-language generator: a bijective lexicon of
//! symbol-string words with Zipf-sampled sentences, emitted in the corpus
//! file formats (unsegmented source, segmented gold, translated target).

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub lexicon_size: usize,
    pub alphabet_size: usize,
    /// Inclusive word length range in symbols.
    pub word_len: (usize, usize),
    /// Inclusive sentence length range in words.
    pub sentence_len: (usize, usize),
    pub sentences: usize,
    /// Exponent of the Zipf law used for word sampling.
    pub zipf_exponent: f64,
    pub seed: u64,
    /// Probability of swapping each adjacent translation pair, breaking
    /// strict monotone order. 0 keeps word order parallel.
    pub swap_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            lexicon_size: 30,
            alphabet_size: 10,
            word_len: (2, 4),
            sentence_len: (3, 8),
            sentences: 3000,
            zipf_exponent: 1.0,
            seed: 7,
            swap_noise: 0.0,
        }
    }
}

/// Generated corpus text plus the bijective lexicon behind it.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub source_lines: Vec<String>,
    pub gold_lines: Vec<String>,
    pub target_lines: Vec<String>,
    /// `(source word, translation)` pairs, most frequent rank first.
    pub lexicon: Vec<(String, String)>,
}

impl SynthCorpus {
    pub fn write_files(&self, dir: &Path) -> Result<SynthPaths> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, lines: &[String]| -> Result<PathBuf> {
            let path = dir.join(name);
            let mut text = lines.join("\n");
            text.push('\n');
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        };
        Ok(SynthPaths {
            source: write("corpus.src", &self.source_lines)?,
            target: write("corpus.tgt", &self.target_lines)?,
            gold: write("corpus.gold", &self.gold_lines)?,
        })
    }

    /// The oracle segmentation of one sentence, recovered from the target
    /// line alone through the bijective lexicon. Only meaningful for
    /// monotone (swap-free) corpora, where it must equal the gold line.
    pub fn oracle_from_target(&self, target_line: &str) -> Option<String> {
        let words: Option<Vec<&str>> = target_line
            .split_whitespace()
            .map(|t| {
                self.lexicon
                    .iter()
                    .find(|(_, translation)| translation == t)
                    .map(|(word, _)| word.as_str())
            })
            .collect();
        words.map(|w| w.join(" "))
    }
}

pub struct SynthPaths {
    pub source: PathBuf,
    pub target: PathBuf,
    pub gold: PathBuf,
}

/// Number of distinct strings available for the lexicon.
fn available_strings(alphabet: usize, word_len: (usize, usize)) -> usize {
    let mut total = 0usize;
    for len in word_len.0..=word_len.1 {
        let mut count = 1usize;
        for _ in 0..len {
            count = count.saturating_mul(alphabet);
            if count > 10_000_000 {
                return usize::MAX;
            }
        }
        total = total.saturating_add(count);
    }
    total
}

/// Samples ranks 1..=n from a Zipf law by inverse-CDF lookup.
struct ZipfSampler {
    cumulative: Vec<f64>,
}

impl ZipfSampler {
    fn new(n: usize, exponent: f64) -> Self {
        let weights: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-exponent)).collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        Self { cumulative }
    }

    /// Zero-based rank.
    fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        self.cumulative
            .partition_point(|&c| c < u)
            .min(self.cumulative.len() - 1)
    }
}

/// Generates a corpus from the spec: each sentence draws Zipf-distributed
/// words; the source line concatenates their symbols without whitespace,
/// the gold line keeps the separations, and the target line carries the
/// mapped translations in the same order (unless swap noise is enabled).
/// Deterministic for a fixed spec.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    if spec.lexicon_size == 0 || spec.sentences == 0 {
        return Err(Error::Config(
            "lexicon size and sentence count must be positive".into(),
        ));
    }
    if spec.alphabet_size == 0 || spec.alphabet_size > 26 {
        return Err(Error::Config(
            "alphabet size must lie in 1..=26 (lowercase letters)".into(),
        ));
    }
    if spec.word_len.0 == 0 || spec.word_len.0 > spec.word_len.1 {
        return Err(Error::Config("invalid word length range".into()));
    }
    if spec.sentence_len.0 == 0 || spec.sentence_len.0 > spec.sentence_len.1 {
        return Err(Error::Config("invalid sentence length range".into()));
    }
    let available = available_strings(spec.alphabet_size, spec.word_len);
    if available < spec.lexicon_size {
        return Err(Error::InfeasibleSpec {
            requested: spec.lexicon_size,
            available,
        });
    }

    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let alphabet: Vec<char> = (0..spec.alphabet_size)
        .map(|i| char::from(b'a' + i as u8))
        .collect();

    // Rejection-sample a unique lexicon; feasibility was checked above.
    let mut seen = BTreeSet::new();
    let mut lexicon = Vec::with_capacity(spec.lexicon_size);
    while lexicon.len() < spec.lexicon_size {
        let len = rng.gen_range(spec.word_len.0..=spec.word_len.1);
        let word: String = (0..len)
            .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
            .collect();
        if seen.insert(word.clone()) {
            let translation = format!("t{:02}", lexicon.len());
            lexicon.push((word, translation));
        }
    }

    let sampler = ZipfSampler::new(spec.lexicon_size, spec.zipf_exponent);
    let mut source_lines = Vec::with_capacity(spec.sentences);
    let mut gold_lines = Vec::with_capacity(spec.sentences);
    let mut target_lines = Vec::with_capacity(spec.sentences);
    for _ in 0..spec.sentences {
        let len = rng.gen_range(spec.sentence_len.0..=spec.sentence_len.1);
        let ranks: Vec<usize> = (0..len).map(|_| sampler.sample(&mut rng)).collect();
        let words: Vec<&str> = ranks.iter().map(|&r| lexicon[r].0.as_str()).collect();
        let mut translations: Vec<&str> =
            ranks.iter().map(|&r| lexicon[r].1.as_str()).collect();
        // One draw per adjacent position, taken up front, so corpora with
        // different noise rates share the same word stream per seed.
        let draws: Vec<f64> = (0..translations.len().saturating_sub(1))
            .map(|_| rng.gen())
            .collect();
        let mut i = 0;
        while i + 1 < translations.len() {
            if draws[i] < spec.swap_noise {
                translations.swap(i, i + 1);
                i += 2;
            } else {
                i += 1;
            }
        }
        source_lines.push(words.concat());
        gold_lines.push(words.join(" "));
        target_lines.push(translations.join(" "));
    }

    Ok(SynthCorpus {
        source_lines,
        gold_lines,
        target_lines,
        lexicon,
    })
}
