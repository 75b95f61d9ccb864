//! Parallel corpus loading, validation, splitting, and the semi-supervised
//! mixed representation.
//!
//! Source text arrives unsegmented: each line is NFC-normalized, stripped
//! of all whitespace, and split into symbols (one Unicode codepoint each
//! unless a symbol inventory supplies multi-codepoint graphemes, matched
//! longest-first). Target text is whitespace-tokenized words. An optional
//! gold file carries the reference segmentation of the source side.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::Error;
use crate::Result;

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Bidirectional token/id mapping with four reserved ids at the front.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn with_reserved() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    /// Builds a vocabulary from token counts: ids beyond the reserved block
    /// are assigned frequency-descending with lexicographic tie-breaks, so
    /// the assignment is reproducible.
    pub fn from_counts(counts: &BTreeMap<String, usize>) -> Self {
        let mut vocab = Self::with_reserved();
        let mut entries: Vec<(&String, &usize)> = counts.iter().collect();
        entries.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        for (token, _) in entries {
            vocab.push(token.clone());
        }
        vocab
    }

    fn push(&mut self, token: String) -> u32 {
        if let Some(&id) = self.index.get(&token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Id of a token, falling back to the reserved unknown id.
    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn surface(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// Total size including the reserved block.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn non_reserved_len(&self) -> usize {
        self.tokens.len() - RESERVED.len()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Non-reserved surfaces in id order.
    pub fn non_reserved(&self) -> impl Iterator<Item = &str> {
        self.tokens[RESERVED.len()..].iter().map(|s| s.as_str())
    }

    /// Extends the vocabulary with additional tokens (already-present
    /// surfaces keep their id) and returns the resulting ids.
    pub fn extend_with(&mut self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.push(t.clone())).collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || tokens[..RESERVED.len()] != RESERVED.map(|s| s.to_string())
        {
            return Err(Error::VocabMismatch(
                "serialized vocabulary does not start with the reserved ids".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::VocabMismatch(format!(
                    "duplicate token {t:?} in serialized vocabulary"
                )));
            }
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// One source/target sentence pair, as ids into the corpus vocabularies.
/// `gold` spans, when present, tile the source token sequence exactly. For
/// injected corpora, `injected_mask` marks positions holding a supervised
/// word token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injected_mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub source_path: Option<PathBuf>,
    pub target_path: Option<PathBuf>,
    pub gold_path: Option<PathBuf>,
    pub inventory_path: Option<PathBuf>,
    pub normalization: String,
}

/// A loaded, immutable parallel corpus. Safe to share across readers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub pairs: Vec<SentencePair>,
    pub source_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
    /// Surfaces of word types merged into the source side by
    /// [`Corpus::inject_supervision`], in selection order.
    #[serde(default)]
    pub injected: Vec<String>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

/// Per-side corpus statistics (types, tokens, average tokens per sentence).
#[derive(Debug, Clone, Serialize)]
pub struct SideStats {
    pub types: usize,
    pub tokens: usize,
    pub avg_tokens_per_sentence: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusStats {
    pub sentences: usize,
    /// Source symbols (the unsegmented representation).
    pub source_symbols: SideStats,
    /// Source words from the gold segmentation, when available.
    pub source_gold_words: Option<SideStats>,
    pub target_words: SideStats,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    file.read_to_string(&mut text)
        .map_err(|e| Error::io(path, e))?;
    let mut lines: Vec<String> = text.split('\n').map(|s| s.to_string()).collect();
    if lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    Ok(lines)
}

/// Splits an unsegmented string into symbols: inventory graphemes matched
/// longest-first, single codepoints otherwise.
fn symbolize(text: &str, inventory: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = text;
    'outer: while !rest.is_empty() {
        for g in inventory {
            if rest.starts_with(g.as_str()) {
                out.push(g.clone());
                rest = &rest[g.len()..];
                continue 'outer;
            }
        }
        let c = rest.chars().next().unwrap();
        out.push(c.to_string());
        rest = &rest[c.len_utf8()..];
    }
    out
}

fn remove_whitespace(text: &str) -> String {
    text.chars().filter(|c| !c.is_whitespace()).collect()
}

impl Corpus {
    /// Loads a parallel corpus. All files must be UTF-8 with one sentence
    /// per line and equal line counts. When `gold_path` is given, each gold
    /// line must reproduce the source line once whitespace is removed, and
    /// gold spans are derived from the word lengths.
    pub fn load_parallel(
        source_path: &Path,
        target_path: &Path,
        gold_path: Option<&Path>,
        inventory_path: Option<&Path>,
    ) -> Result<Corpus> {
        let source_lines = read_lines(source_path)?;
        let target_lines = read_lines(target_path)?;
        if source_lines.len() != target_lines.len() {
            return Err(Error::LineCountMismatch {
                left: source_path.to_path_buf(),
                left_lines: source_lines.len(),
                right: target_path.to_path_buf(),
                right_lines: target_lines.len(),
            });
        }
        let gold_lines = match gold_path {
            Some(p) => {
                let lines = read_lines(p)?;
                if lines.len() != source_lines.len() {
                    return Err(Error::LineCountMismatch {
                        left: source_path.to_path_buf(),
                        left_lines: source_lines.len(),
                        right: p.to_path_buf(),
                        right_lines: lines.len(),
                    });
                }
                Some(lines)
            }
            None => None,
        };
        if source_lines.is_empty() {
            return Err(Error::EmptyCorpus);
        }

        let mut inventory: Vec<String> = match inventory_path {
            Some(p) => read_lines(p)?
                .into_iter()
                .map(|l| l.nfc().collect::<String>())
                .filter(|l| !l.is_empty())
                .collect(),
            None => Vec::new(),
        };
        // Longest-first matching.
        inventory.sort_by(|a, b| b.chars().count().cmp(&a.chars().count()).then(a.cmp(b)));

        let mut sentences = Vec::with_capacity(source_lines.len());
        for (i, (src_line, tgt_line)) in source_lines.iter().zip(&target_lines).enumerate() {
            let line_no = i + 1;
            let src: String = src_line.nfc().collect();
            let tgt: String = tgt_line.nfc().collect();
            let src_stripped = remove_whitespace(&src);
            if src_stripped.is_empty() {
                return Err(Error::EmptyLine {
                    path: source_path.to_path_buf(),
                    line: line_no,
                });
            }
            let target_words: Vec<String> =
                tgt.split_whitespace().map(|w| w.to_string()).collect();
            if target_words.is_empty() {
                return Err(Error::EmptyLine {
                    path: target_path.to_path_buf(),
                    line: line_no,
                });
            }
            let symbols = symbolize(&src_stripped, &inventory);

            let gold = match &gold_lines {
                Some(lines) => {
                    let gline: String = lines[i].nfc().collect();
                    let gold_words: Vec<String> =
                        gline.split_whitespace().map(|w| w.to_string()).collect();
                    if gold_words.is_empty() {
                        return Err(Error::EmptyLine {
                            path: gold_path.unwrap().to_path_buf(),
                            line: line_no,
                        });
                    }
                    let joined: String = gold_words.concat();
                    if joined != src_stripped {
                        return Err(Error::GoldMismatch {
                            line: line_no,
                            source_text: src_stripped.clone(),
                            gold: joined,
                        });
                    }
                    let mut spans = Vec::with_capacity(gold_words.len());
                    let mut start = 0usize;
                    let mut word_symbols = Vec::new();
                    for w in &gold_words {
                        let ws = symbolize(w, &inventory);
                        let end = start + ws.len();
                        spans.push((start, end));
                        start = end;
                        word_symbols.extend(ws);
                    }
                    if word_symbols != symbols {
                        return Err(Error::GoldMismatch {
                            line: line_no,
                            source_text: src_stripped.clone(),
                            gold: joined,
                        });
                    }
                    Some(spans)
                }
                None => None,
            };
            sentences.push((symbols, target_words, gold));
        }

        let mut src_counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut tgt_counts: BTreeMap<String, usize> = BTreeMap::new();
        for (symbols, words, _) in &sentences {
            for s in symbols {
                *src_counts.entry(s.clone()).or_default() += 1;
            }
            for w in words {
                *tgt_counts.entry(w.clone()).or_default() += 1;
            }
        }
        let source_vocab = Vocabulary::from_counts(&src_counts);
        let target_vocab = Vocabulary::from_counts(&tgt_counts);

        let pairs = sentences
            .into_iter()
            .map(|(symbols, words, gold)| SentencePair {
                source: symbols
                    .iter()
                    .map(|s| source_vocab.id(s).expect("symbol just counted"))
                    .collect(),
                target: words
                    .iter()
                    .map(|w| target_vocab.id(w).expect("word just counted"))
                    .collect(),
                gold,
                injected_mask: None,
            })
            .collect();

        Ok(Corpus {
            pairs,
            source_vocab,
            target_vocab,
            injected: Vec::new(),
            provenance: Provenance {
                source_path: Some(source_path.to_path_buf()),
                target_path: Some(target_path.to_path_buf()),
                gold_path: gold_path.map(|p| p.to_path_buf()),
                inventory_path: inventory_path.map(|p| p.to_path_buf()),
                normalization: "nfc".into(),
            },
        })
    }

    /// Recounts tokens of one side and builds a fresh vocabulary from them.
    pub fn build_vocab(&self, side: Side) -> Result<Vocabulary> {
        if self.pairs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for pair in &self.pairs {
            let (ids, vocab) = match side {
                Side::Source => (&pair.source, &self.source_vocab),
                Side::Target => (&pair.target, &self.target_vocab),
            };
            for &id in ids {
                *counts.entry(vocab.surface(id).to_string()).or_default() += 1;
            }
        }
        Ok(Vocabulary::from_counts(&counts))
    }

    /// Re-encodes every pair against the given vocabularies; tokens missing
    /// from a vocabulary map to the reserved unknown id.
    pub fn reencoded(&self, source_vocab: Vocabulary, target_vocab: Vocabulary) -> Corpus {
        let pairs = self
            .pairs
            .iter()
            .map(|p| SentencePair {
                source: p
                    .source
                    .iter()
                    .map(|&id| source_vocab.id_or_unk(self.source_vocab.surface(id)))
                    .collect(),
                target: p
                    .target
                    .iter()
                    .map(|&id| target_vocab.id_or_unk(self.target_vocab.surface(id)))
                    .collect(),
                gold: p.gold.clone(),
                injected_mask: p.injected_mask.clone(),
            })
            .collect();
        Corpus {
            pairs,
            source_vocab,
            target_vocab,
            injected: self.injected.clone(),
            provenance: self.provenance.clone(),
        }
    }

    /// Deterministic seeded split. The development side gets
    /// `round(dev_fraction * len)` pairs; the partition is exact and both
    /// sides keep the original corpus order.
    pub fn split_train_dev(&self, dev_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
        if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
            return Err(Error::InvalidFraction(dev_fraction));
        }
        let n = self.pairs.len();
        let dev_n = (dev_fraction * n as f64).round() as usize;
        if dev_n == 0 || dev_n >= n {
            return Err(Error::SplitTooSmall {
                total: n,
                fraction: dev_fraction,
            });
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut rng);
        let mut dev_idx: Vec<usize> = indices[..dev_n].to_vec();
        let mut train_idx: Vec<usize> = indices[dev_n..].to_vec();
        dev_idx.sort_unstable();
        train_idx.sort_unstable();

        let take = |idx: &[usize]| Corpus {
            pairs: idx.iter().map(|&i| self.pairs[i].clone()).collect(),
            source_vocab: self.source_vocab.clone(),
            target_vocab: self.target_vocab.clone(),
            injected: self.injected.clone(),
            provenance: self.provenance.clone(),
        };
        Ok((take(&train_idx), take(&dev_idx)))
    }

    /// Builds the semi-supervised mixed representation: the `k` most
    /// frequent gold word types (token count descending, lexicographic
    /// ties) are merged into single source tokens at every gold occurrence;
    /// all other positions stay single symbols. The source vocabulary is
    /// extended with the selected types.
    pub fn inject_supervision(&self, k: usize) -> Result<Corpus> {
        if k == 0 {
            return Err(Error::SupervisionZero);
        }
        if self.pairs.iter().any(|p| p.gold.is_none()) {
            return Err(Error::MissingGold);
        }

        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for pair in &self.pairs {
            for &(s, e) in pair.gold.as_ref().unwrap() {
                let surface = self.span_surface(pair, s, e);
                *counts.entry(surface).or_default() += 1;
            }
        }
        if k > counts.len() {
            return Err(Error::SupervisionK {
                k,
                available: counts.len(),
            });
        }
        let mut entries: Vec<(&String, &usize)> = counts.iter().collect();
        entries.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let selected: Vec<String> = entries[..k].iter().map(|(t, _)| (*t).clone()).collect();
        self.inject_types(&selected)
    }

    /// Merges every gold occurrence of the given word types, extending the
    /// source vocabulary in the given order. Used to apply one corpus's
    /// supervision selection to another (the development split).
    pub fn inject_types(&self, selected: &[String]) -> Result<Corpus> {
        if self.pairs.iter().any(|p| p.gold.is_none()) {
            return Err(Error::MissingGold);
        }
        let selected: Vec<String> = selected.to_vec();
        let selected_set: std::collections::BTreeSet<&str> =
            selected.iter().map(|s| s.as_str()).collect();

        let mut source_vocab = self.source_vocab.clone();
        source_vocab.extend_with(&selected);

        let pairs = self
            .pairs
            .iter()
            .map(|pair| {
                let gold = pair.gold.as_ref().unwrap();
                let mut source = Vec::new();
                let mut mask = Vec::new();
                let mut new_gold = Vec::new();
                let mut pos = 0usize;
                for &(s, e) in gold {
                    let surface = self.span_surface(pair, s, e);
                    if selected_set.contains(surface.as_str()) {
                        source.push(source_vocab.id(&surface).expect("just extended"));
                        mask.push(true);
                        new_gold.push((pos, pos + 1));
                        pos += 1;
                    } else {
                        for &id in &pair.source[s..e] {
                            source.push(id);
                            mask.push(false);
                        }
                        new_gold.push((pos, pos + (e - s)));
                        pos += e - s;
                    }
                }
                SentencePair {
                    source,
                    target: pair.target.clone(),
                    gold: Some(new_gold),
                    injected_mask: Some(mask),
                }
            })
            .collect();

        Ok(Corpus {
            pairs,
            source_vocab,
            target_vocab: self.target_vocab.clone(),
            injected: selected,
            provenance: self.provenance.clone(),
        })
    }

    /// Surface of a source token span (concatenated token surfaces).
    pub fn span_surface(&self, pair: &SentencePair, start: usize, end: usize) -> String {
        pair.source[start..end]
            .iter()
            .map(|&id| self.source_vocab.surface(id))
            .collect()
    }

    pub fn source_surfaces(&self, pair: &SentencePair) -> Vec<String> {
        pair.source
            .iter()
            .map(|&id| self.source_vocab.surface(id).to_string())
            .collect()
    }

    pub fn target_surfaces(&self, pair: &SentencePair) -> Vec<String> {
        pair.target
            .iter()
            .map(|&id| self.target_vocab.surface(id).to_string())
            .collect()
    }

    /// Concatenated source surfaces: the original unsegmented line.
    pub fn detokenized_source(&self, pair: &SentencePair) -> String {
        self.span_surface(pair, 0, pair.source.len())
    }

    /// Symbol count under each source token: plain tokens count their
    /// codepoints (1 for loader-produced symbols), injected word tokens
    /// their full length.
    pub fn source_symbol_lens(&self, pair: &SentencePair) -> Vec<usize> {
        pair.source
            .iter()
            .map(|&id| self.source_vocab.surface(id).chars().count().max(1))
            .collect()
    }

    pub fn stats(&self) -> CorpusStats {
        let n = self.pairs.len();
        let side = |tokens: Vec<String>, sentences: usize| {
            let total = tokens.len();
            let types: std::collections::BTreeSet<&String> = tokens.iter().collect();
            SideStats {
                types: types.len(),
                tokens: total,
                avg_tokens_per_sentence: if sentences == 0 {
                    0.0
                } else {
                    total as f64 / sentences as f64
                },
            }
        };
        let mut src_tokens = Vec::new();
        let mut tgt_tokens = Vec::new();
        let mut gold_tokens = Vec::new();
        let mut have_gold = true;
        for pair in &self.pairs {
            src_tokens.extend(self.source_surfaces(pair));
            tgt_tokens.extend(self.target_surfaces(pair));
            match &pair.gold {
                Some(spans) => {
                    for &(s, e) in spans {
                        gold_tokens.push(self.span_surface(pair, s, e));
                    }
                }
                None => have_gold = false,
            }
        }
        CorpusStats {
            sentences: n,
            source_symbols: side(src_tokens, n),
            source_gold_words: if have_gold {
                Some(side(gold_tokens, n))
            } else {
                None
            },
            target_words: side(tgt_tokens, n),
        }
    }

    /// Gold segmentations as token surface lists, one per sentence.
    pub fn gold_segmentations(&self) -> Option<Vec<Vec<String>>> {
        self.pairs
            .iter()
            .map(|pair| {
                pair.gold.as_ref().map(|spans| {
                    spans
                        .iter()
                        .map(|&(s, e)| self.span_surface(pair, s, e))
                        .collect()
                })
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), self)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Corpus> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Verifies internal invariants: ids resolve, gold spans tile, masks
    /// align.
    pub fn validate(&self) -> Result<()> {
        for (i, pair) in self.pairs.iter().enumerate() {
            if pair.source.is_empty() || pair.target.is_empty() {
                return Err(Error::EmptyLine {
                    path: PathBuf::from("<corpus>"),
                    line: i + 1,
                });
            }
            for &id in &pair.source {
                if id as usize >= self.source_vocab.len() {
                    return Err(Error::InvalidId {
                        id,
                        vocab: self.source_vocab.len(),
                    });
                }
            }
            for &id in &pair.target {
                if id as usize >= self.target_vocab.len() {
                    return Err(Error::InvalidId {
                        id,
                        vocab: self.target_vocab.len(),
                    });
                }
            }
            if let Some(spans) = &pair.gold {
                let mut pos = 0usize;
                for &(s, e) in spans {
                    if s != pos || e <= s {
                        return Err(Error::VocabMismatch(format!(
                            "pair {i}: gold spans do not tile the source sequence"
                        )));
                    }
                    pos = e;
                }
                if pos != pair.source.len() {
                    return Err(Error::VocabMismatch(format!(
                        "pair {i}: gold spans cover {pos} of {} tokens",
                        pair.source.len()
                    )));
                }
            }
            if let Some(mask) = &pair.injected_mask {
                if mask.len() != pair.source.len() {
                    return Err(Error::VocabMismatch(format!(
                        "pair {i}: injected mask length mismatch"
                    )));
                }
            }
        }
        Ok(())
    }
}
