//! Token and type precision/recall/F-score against a gold segmentation,
//! plus rank-frequency and type-length analyses of the generated
//! vocabulary.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::alignment::Segmentation;
use crate::error::Error;
use crate::Result;

/// Precision, recall and F-score. `F = 2PR / (P + R)` when `P + R > 0`,
/// otherwise 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

impl Prf {
    pub fn new(correct: usize, generated: usize, gold: usize) -> Prf {
        let precision = if generated > 0 {
            correct as f64 / generated as f64
        } else {
            0.0
        };
        let recall = if gold > 0 {
            correct as f64 / gold as f64
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f_score: f_score(precision, recall),
        }
    }
}

pub fn f_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Type metrics with the underlying counts.
#[derive(Debug, Clone, Serialize)]
pub struct TypeMetrics {
    pub prf: Prf,
    pub correct_types: usize,
    pub generated_types: usize,
    pub gold_types: usize,
}

/// Full evaluation report. When supervised types were injected, a second
/// type block excludes them from both vocabularies.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub tokens: Prf,
    pub types: TypeMetrics,
    pub types_excluding_supervised: Option<TypeMetrics>,
    pub supervised_type_recall: Option<f64>,
}

/// Token-level scores: a hypothesis token is correct iff its `(start, end)`
/// span appears in the gold tiling of the same sentence. Requires the same
/// sentence count and identical underlying symbol sequences.
pub fn token_metrics(hypothesis: &[Segmentation], gold: &[Segmentation]) -> Result<Prf> {
    if hypothesis.len() != gold.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} hypothesis sentences vs {} gold",
            hypothesis.len(),
            gold.len()
        )));
    }
    let mut correct = 0usize;
    let mut generated = 0usize;
    let mut gold_total = 0usize;
    for (i, (hyp, ref_seg)) in hypothesis.iter().zip(gold).enumerate() {
        if hyp.underlying() != ref_seg.underlying() {
            return Err(Error::SymbolSequenceMismatch { sentence: i });
        }
        let gold_spans: HashSet<(usize, usize)> =
            ref_seg.tokens.iter().map(|t| t.span).collect();
        generated += hyp.tokens.len();
        gold_total += ref_seg.tokens.len();
        correct += hyp
            .tokens
            .iter()
            .filter(|t| gold_spans.contains(&t.span))
            .count();
    }
    Ok(Prf::new(correct, generated, gold_total))
}

/// Type-level scores over surface-string sets: `correct = |H ∩ G|`.
pub fn type_metrics(hypothesis: &BTreeSet<String>, gold: &BTreeSet<String>) -> TypeMetrics {
    let correct = hypothesis.intersection(gold).count();
    TypeMetrics {
        prf: Prf::new(correct, hypothesis.len(), gold.len()),
        correct_types: correct,
        generated_types: hypothesis.len(),
        gold_types: gold.len(),
    }
}

/// The set of distinct token surfaces in a segmented corpus.
pub fn type_set(segmentations: &[Segmentation]) -> BTreeSet<String> {
    segmentations
        .iter()
        .flat_map(|s| s.tokens.iter().map(|t| t.surface.clone()))
        .collect()
}

/// Builds the full report. `supervised` types, when given, are removed
/// from both vocabularies for the exclusion block, and their own recall
/// (fraction appearing intact in the hypothesis vocabulary) is reported.
pub fn evaluate(
    hypothesis: &[Segmentation],
    gold: &[Segmentation],
    supervised: Option<&[String]>,
) -> Result<EvalReport> {
    let tokens = token_metrics(hypothesis, gold)?;
    let hyp_types = type_set(hypothesis);
    let gold_types = type_set(gold);
    let types = type_metrics(&hyp_types, &gold_types);
    let (types_excluding_supervised, supervised_type_recall) = match supervised {
        Some(list) if !list.is_empty() => {
            let sup: BTreeSet<String> = list.iter().cloned().collect();
            let hyp_rest: BTreeSet<String> = hyp_types.difference(&sup).cloned().collect();
            let gold_rest: BTreeSet<String> = gold_types.difference(&sup).cloned().collect();
            let found = sup.iter().filter(|t| hyp_types.contains(*t)).count();
            (
                Some(type_metrics(&hyp_rest, &gold_rest)),
                Some(found as f64 / sup.len() as f64),
            )
        }
        _ => (None, None),
    };
    Ok(EvalReport {
        tokens,
        types,
        types_excluding_supervised,
        supervised_type_recall,
    })
}

/// Type frequencies sorted descending (lexicographic ties), 1-based ranks.
pub fn rank_frequency(segmentations: &[Segmentation]) -> Vec<(usize, String, usize)> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for seg in segmentations {
        for token in &seg.tokens {
            *counts.entry(token.surface.clone()).or_default() += 1;
        }
    }
    let mut entries: Vec<(String, usize)> = counts.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries
        .into_iter()
        .enumerate()
        .map(|(i, (ty, count))| (i + 1, ty, count))
        .collect()
}

/// Normalized histogram over type length in symbols (codepoints), plus the
/// mean type length. Bins sum to 1.
pub fn length_histogram(vocabulary: &BTreeSet<String>) -> (BTreeMap<usize, f64>, f64) {
    if vocabulary.is_empty() {
        return (BTreeMap::new(), 0.0);
    }
    let mut bins: BTreeMap<usize, usize> = BTreeMap::new();
    let mut total_len = 0usize;
    for ty in vocabulary {
        let len = ty.chars().count();
        *bins.entry(len).or_default() += 1;
        total_len += len;
    }
    let n = vocabulary.len() as f64;
    (
        bins.into_iter().map(|(l, c)| (l, c as f64 / n)).collect(),
        total_len as f64 / n,
    )
}

fn pct(x: f64) -> f64 {
    100.0 * x
}

/// Writes the human-readable report.
pub fn write_report_text(path: &Path, report: &EvalReport) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    writeln!(w, "tokens:").map_err(io_err)?;
    writeln!(
        w,
        "  precision {:6.2}%  recall {:6.2}%  f-score {:6.2}%",
        pct(report.tokens.precision),
        pct(report.tokens.recall),
        pct(report.tokens.f_score)
    )
    .map_err(io_err)?;
    let type_block = |w: &mut BufWriter<File>, label: &str, t: &TypeMetrics| {
        writeln!(w, "{label}:")?;
        writeln!(
            w,
            "  precision {:6.2}%  recall {:6.2}%  f-score {:6.2}%",
            pct(t.prf.precision),
            pct(t.prf.recall),
            pct(t.prf.f_score)
        )?;
        writeln!(
            w,
            "  correct types {}  generated types {}  gold types {}",
            t.correct_types, t.generated_types, t.gold_types
        )
    };
    type_block(&mut w, "types", &report.types).map_err(io_err)?;
    if let Some(t) = &report.types_excluding_supervised {
        type_block(&mut w, "types (supervised excluded)", t).map_err(io_err)?;
    }
    if let Some(r) = report.supervised_type_recall {
        writeln!(w, "supervised-type recall {:6.2}%", pct(r)).map_err(io_err)?;
    }
    Ok(())
}

/// Writes the machine-readable key-value lines.
pub fn write_report_kv(path: &Path, report: &EvalReport) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    let mut kv = |k: &str, v: String| writeln!(w, "{k}={v}").map_err(io_err);
    kv("token_precision", format!("{:.6}", report.tokens.precision))?;
    kv("token_recall", format!("{:.6}", report.tokens.recall))?;
    kv("token_f", format!("{:.6}", report.tokens.f_score))?;
    kv("type_precision", format!("{:.6}", report.types.prf.precision))?;
    kv("type_recall", format!("{:.6}", report.types.prf.recall))?;
    kv("type_f", format!("{:.6}", report.types.prf.f_score))?;
    kv("correct_types", report.types.correct_types.to_string())?;
    kv("generated_types", report.types.generated_types.to_string())?;
    kv("gold_types", report.types.gold_types.to_string())?;
    if let Some(t) = &report.types_excluding_supervised {
        kv(
            "type_precision_excl_supervised",
            format!("{:.6}", t.prf.precision),
        )?;
        kv("type_recall_excl_supervised", format!("{:.6}", t.prf.recall))?;
        kv("type_f_excl_supervised", format!("{:.6}", t.prf.f_score))?;
        kv(
            "generated_types_excl_supervised",
            t.generated_types.to_string(),
        )?;
    }
    if let Some(r) = report.supervised_type_recall {
        kv("supervised_type_recall", format!("{:.6}", r))?;
    }
    Ok(())
}

/// Writes a `rank TAB type TAB count` table.
pub fn write_rank_frequency(path: &Path, table: &[(usize, String, usize)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (rank, ty, count) in table {
        writeln!(w, "{rank}\t{ty}\t{count}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Writes a `length TAB fraction` table with the mean length in a trailing
/// comment line.
pub fn write_length_histogram(
    path: &Path,
    bins: &BTreeMap<usize, f64>,
    mean: f64,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (len, frac) in bins {
        writeln!(w, "{len}\t{frac:.6}").map_err(|e| Error::io(path, e))?;
    }
    writeln!(w, "# mean_type_length\t{mean:.6}").map_err(|e| Error::io(path, e))?;
    Ok(())
}
