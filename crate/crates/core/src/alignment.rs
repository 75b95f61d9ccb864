//! Post-processing of soft-alignment matrices into segmentations.
//!
//! A matrix has one row per decoder step and one column per encoder
//! position; the last row belongs to the end-of-sentence step when flagged
//! and is excluded from hard alignment and segmentation. The direction tag
//! records the row axis: base matrices have word rows over symbol columns,
//! reverse matrices symbol rows over word columns.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::Error;
use crate::model::{argmax, Direction};
use crate::Result;

/// Soft-alignment probabilities for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    /// Row-major probabilities; every non-flagged row sums to 1 before
    /// smoothing and all entries stay non-negative.
    pub rows: Vec<Vec<f64>>,
    pub row_surfaces: Vec<String>,
    pub col_surfaces: Vec<String>,
    /// Whether the last row is the end-of-sentence step.
    pub eos_row: bool,
    pub direction: Direction,
}

impl AlignmentMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }

    /// Rows excluding a flagged end-of-sentence row.
    pub fn content_rows(&self) -> &[Vec<f64>] {
        if self.eos_row {
            &self.rows[..self.rows.len() - 1]
        } else {
            &self.rows
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cols = self.n_cols();
        if self.rows.is_empty() || cols == 0 {
            return Err(Error::ShapeMismatch("empty alignment matrix".into()));
        }
        if self.rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged alignment matrix".into()));
        }
        if self.row_surfaces.len() != self.rows.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} row surfaces for {} rows",
                self.row_surfaces.len(),
                self.rows.len()
            )));
        }
        if self.col_surfaces.len() != cols {
            return Err(Error::ShapeMismatch(format!(
                "{} column surfaces for {} columns",
                self.col_surfaces.len(),
                cols
            )));
        }
        for row in &self.rows {
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::NonFinite("alignment matrix entry".into()));
            }
        }
        Ok(())
    }
}

/// Low-pass filter along each row: every score is averaged with its two
/// in-row neighbors, `a'[i] = (a[i-1] + a[i] + a[i+1]) / 3`, out-of-range
/// neighbors counting as 0. Applied once; no renormalization (only the
/// argmax is consumed downstream).
pub fn smooth(matrix: &AlignmentMatrix) -> AlignmentMatrix {
    let rows = matrix.rows.iter().map(|row| smooth_row(row)).collect();
    AlignmentMatrix {
        rows,
        ..matrix.clone()
    }
}

fn smooth_row(row: &[f64]) -> Vec<f64> {
    let n = row.len();
    (0..n)
        .map(|i| {
            let left = if i > 0 { row[i - 1] } else { 0.0 };
            let right = if i + 1 < n { row[i + 1] } else { 0.0 };
            (left + row[i] + right) / 3.0
        })
        .collect()
}

/// Smoothing as used ahead of segmentation: the average always runs along
/// the unsegmented-symbol axis. Base matrices carry symbols in their rows,
/// so this is plain row smoothing. Reverse matrices carry symbols down the
/// columns; their content rows are smoothed column-wise (a flagged
/// end-of-sentence row passes through unchanged and stays out of the
/// neighbor windows).
pub fn smooth_for_segmentation(matrix: &AlignmentMatrix) -> AlignmentMatrix {
    match matrix.direction {
        Direction::Base => smooth(matrix),
        Direction::Reverse => {
            let content = matrix.content_rows();
            let m = content.len();
            let cols = matrix.n_cols();
            let mut rows: Vec<Vec<f64>> = (0..m)
                .map(|r| {
                    (0..cols)
                        .map(|c| {
                            let up = if r > 0 { content[r - 1][c] } else { 0.0 };
                            let down = if r + 1 < m { content[r + 1][c] } else { 0.0 };
                            (up + content[r][c] + down) / 3.0
                        })
                        .collect()
                })
                .collect();
            if matrix.eos_row {
                rows.push(matrix.rows.last().expect("flagged row exists").clone());
            }
            AlignmentMatrix {
                rows,
                ..matrix.clone()
            }
        }
    }
}

/// Symmetrization by probability averaging: `fused[i][t] = (alpha[t][i] +
/// beta[i][t]) / 2` where `alpha` comes from the base model (word rows over
/// symbol columns) and `beta` from the reverse model (symbol rows over word
/// columns). Flagged end-of-sentence rows are dropped before fusing; the
/// output follows the reverse orientation used downstream.
pub fn fuse(base: &AlignmentMatrix, reverse: &AlignmentMatrix) -> Result<AlignmentMatrix> {
    if base.direction != Direction::Base || reverse.direction != Direction::Reverse {
        return Err(Error::ShapeMismatch(format!(
            "fuse expects a base and a reverse matrix, got {} and {}",
            base.direction, reverse.direction
        )));
    }
    let alpha = base.content_rows(); // words x symbols
    let beta = reverse.content_rows(); // symbols x words
    let words = alpha.len();
    let symbols = beta.len();
    if base.n_cols() != symbols || reverse.n_cols() != words {
        return Err(Error::ShapeMismatch(format!(
            "fuse: base is {}x{}, reverse is {}x{}; expected transposes",
            words,
            base.n_cols(),
            symbols,
            reverse.n_cols()
        )));
    }
    let rows: Vec<Vec<f64>> = (0..symbols)
        .map(|i| (0..words).map(|t| 0.5 * (beta[i][t] + alpha[t][i])).collect())
        .collect();
    let row_surfaces = reverse.row_surfaces[..symbols].to_vec();
    Ok(AlignmentMatrix {
        rows,
        row_surfaces,
        col_surfaces: reverse.col_surfaces.clone(),
        eos_row: false,
        direction: Direction::Reverse,
    })
}

/// For each symbol position, the index of its aligned word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardAlignment(pub Vec<usize>);

/// Soft-to-hard alignment: each symbol picks the word with the highest
/// probability (per row in reverse matrices, per column in base matrices);
/// ties break toward the lowest index. The flagged end-of-sentence row is
/// excluded.
pub fn hard_align(matrix: &AlignmentMatrix) -> HardAlignment {
    match matrix.direction {
        Direction::Reverse => {
            HardAlignment(matrix.content_rows().iter().map(|row| argmax(row)).collect())
        }
        Direction::Base => {
            let rows = matrix.content_rows();
            let cols = matrix.n_cols();
            HardAlignment(
                (0..cols)
                    .map(|c| {
                        let column: Vec<f64> = rows.iter().map(|r| r[c]).collect();
                        argmax(&column)
                    })
                    .collect(),
            )
        }
    }
}

/// One output token of a segmentation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegToken {
    /// Half-open span over the symbol sequence.
    pub span: (usize, usize),
    pub surface: String,
    /// Aligned word index, the bilingual clue.
    pub word: Option<usize>,
}

/// Ordered token spans tiling one symbol sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    pub tokens: Vec<SegToken>,
}

impl Segmentation {
    pub fn surfaces(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.surface.as_str()).collect()
    }

    /// Total symbol count covered by the spans.
    pub fn symbol_len(&self) -> usize {
        self.tokens.last().map_or(0, |t| t.span.1)
    }

    /// The concatenation of all token surfaces.
    pub fn underlying(&self) -> String {
        self.tokens.iter().map(|t| t.surface.as_str()).collect()
    }

    /// Builds a segmentation from token surfaces alone (spans derived from
    /// codepoint counts); `word` clues are left empty.
    pub fn from_surfaces<S: AsRef<str>>(surfaces: &[S]) -> Segmentation {
        let mut tokens = Vec::with_capacity(surfaces.len());
        let mut pos = 0usize;
        for s in surfaces {
            let len = s.as_ref().chars().count();
            tokens.push(SegToken {
                span: (pos, pos + len),
                surface: s.as_ref().to_string(),
                word: None,
            });
            pos += len;
        }
        Segmentation { tokens }
    }
}

/// Groups consecutive symbols aligned to the same word into tokens: a
/// boundary falls exactly between positions whose aligned word indices
/// differ.
pub fn segment<S: AsRef<str>>(symbols: &[S], alignment: &HardAlignment) -> Result<Segmentation> {
    let atomic = vec![false; symbols.len()];
    segment_mixed(symbols, &vec![1; symbols.len()], &atomic, alignment)
}

/// Segmentation over a mixed token sequence (plain symbols plus injected
/// word tokens). `symbol_lens` maps each position to its width in symbols
/// so output spans stay in symbol coordinates. Positions marked `atomic`
/// are supervised word tokens: they always form their own output token, so
/// known words survive intact.
pub fn segment_mixed<S: AsRef<str>>(
    tokens: &[S],
    symbol_lens: &[usize],
    atomic: &[bool],
    alignment: &HardAlignment,
) -> Result<Segmentation> {
    if tokens.len() != alignment.0.len() {
        return Err(Error::ShapeMismatch(format!(
            "segment: {} tokens but alignment covers {}",
            tokens.len(),
            alignment.0.len()
        )));
    }
    if tokens.len() != symbol_lens.len() || tokens.len() != atomic.len() {
        return Err(Error::ShapeMismatch(
            "segment: token metadata lengths differ".into(),
        ));
    }
    let mut out = Vec::new();
    let mut start_sym = 0usize;
    let mut pos_sym = 0usize;
    let mut surface = String::new();
    let mut word: Option<usize> = None;
    for (i, token) in tokens.iter().enumerate() {
        let boundary_before = i > 0
            && (atomic[i] || atomic[i - 1] || alignment.0[i] != alignment.0[i - 1]);
        if boundary_before {
            out.push(SegToken {
                span: (start_sym, pos_sym),
                surface: std::mem::take(&mut surface),
                word,
            });
            start_sym = pos_sym;
        }
        surface.push_str(token.as_ref());
        word = Some(alignment.0[i]);
        pos_sym += symbol_lens[i];
    }
    if !surface.is_empty() {
        out.push(SegToken {
            span: (start_sym, pos_sym),
            surface,
            word,
        });
    }
    Ok(Segmentation { tokens: out })
}

fn fmt_f64(v: f64) -> String {
    // 17 significant digits: enough for exact f64 round-trips.
    format!("{v:.16e}")
}

/// Writes matrices as text blocks: sentence index, direction, flag, row and
/// column token surfaces, then row-major probabilities as tab-separated
/// decimals with 17 significant digits.
pub fn write_matrices(path: &Path, matrices: &[AlignmentMatrix]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    for (i, m) in matrices.iter().enumerate() {
        writeln!(w, "sentence\t{i}").map_err(io_err)?;
        writeln!(w, "direction\t{}", m.direction).map_err(io_err)?;
        writeln!(w, "eos_row\t{}", m.eos_row).map_err(io_err)?;
        writeln!(w, "rows\t{}", m.row_surfaces.join("\t")).map_err(io_err)?;
        writeln!(w, "cols\t{}", m.col_surfaces.join("\t")).map_err(io_err)?;
        for row in &m.rows {
            let line: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
            writeln!(w, "{}", line.join("\t")).map_err(io_err)?;
        }
        writeln!(w).map_err(io_err)?;
    }
    Ok(())
}

pub fn read_matrices(path: &Path) -> Result<Vec<AlignmentMatrix>> {
    let mut text = String::new();
    File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_string(&mut text)
        .map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: &str| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    };

    let mut matrices = Vec::new();
    let mut lines = text.lines().enumerate().peekable();
    while let Some((_, first)) = lines.next() {
        if first.is_empty() {
            continue;
        }
        let expect_tag = |line: &str, tag: &str, no: usize| -> Result<String> {
            line.strip_prefix(tag)
                .and_then(|s| s.strip_prefix('\t'))
                .map(|s| s.to_string())
                .ok_or_else(|| parse_err(no + 1, &format!("expected {tag} line")))
        };
        let _sentence = expect_tag(first, "sentence", 0)?;
        let (no, dline) = lines.next().ok_or_else(|| parse_err(0, "truncated block"))?;
        let direction: Direction = expect_tag(dline, "direction", no)?.parse()?;
        let (no, eline) = lines.next().ok_or_else(|| parse_err(no, "truncated block"))?;
        let eos_row = expect_tag(eline, "eos_row", no)? == "true";
        let (no, rline) = lines.next().ok_or_else(|| parse_err(no, "truncated block"))?;
        let row_surfaces: Vec<String> = expect_tag(rline, "rows", no)?
            .split('\t')
            .map(|s| s.to_string())
            .collect();
        let (no, cline) = lines.next().ok_or_else(|| parse_err(no, "truncated block"))?;
        let col_surfaces: Vec<String> = expect_tag(cline, "cols", no)?
            .split('\t')
            .map(|s| s.to_string())
            .collect();
        let mut rows = Vec::with_capacity(row_surfaces.len());
        for _ in 0..row_surfaces.len() {
            let (no, vline) = lines
                .next()
                .ok_or_else(|| parse_err(0, "missing probability row"))?;
            let row: Vec<f64> = vline
                .split('\t')
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| parse_err(no + 1, "bad probability"))
                })
                .collect::<Result<_>>()?;
            rows.push(row);
        }
        let matrix = AlignmentMatrix {
            rows,
            row_surfaces,
            col_surfaces,
            eos_row,
            direction,
        };
        matrix.validate()?;
        matrices.push(matrix);
    }
    Ok(matrices)
}

/// One line per sentence, tokens space-separated.
pub fn write_segmentations(path: &Path, segmentations: &[Segmentation]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for seg in segmentations {
        writeln!(w, "{}", seg.surfaces().join(" ")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_segmentations(path: &Path) -> Result<Vec<Segmentation>> {
    let mut text = String::new();
    File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_string(&mut text)
        .map_err(|e| Error::io(path, e))?;
    let mut lines: Vec<&str> = text.split('\n').collect();
    if lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    Ok(lines
        .iter()
        .map(|l| {
            let surfaces: Vec<&str> = l.split_whitespace().collect();
            Segmentation::from_surfaces(&surfaces)
        })
        .collect())
}

/// Companion bilingual-lexicon file: one `token TAB word` line per output
/// token, using the aligned target word surface.
pub fn write_lexicon(
    path: &Path,
    segmentations: &[Segmentation],
    target_words: &[Vec<String>],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (seg, words) in segmentations.iter().zip(target_words) {
        for token in &seg.tokens {
            let word = token
                .word
                .and_then(|i| words.get(i))
                .map(|s| s.as_str())
                .unwrap_or("");
            writeln!(w, "{}\t{}", token.surface, word).map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: Vec<Vec<f64>>, direction: Direction, eos_row: bool) -> AlignmentMatrix {
        let n_rows = rows.len();
        let n_cols = rows[0].len();
        AlignmentMatrix {
            rows,
            row_surfaces: (0..n_rows).map(|i| format!("r{i}")).collect(),
            col_surfaces: (0..n_cols).map(|i| format!("c{i}")).collect(),
            eos_row,
            direction,
        }
    }

    #[test]
    fn smooth_spreads_a_spike_over_its_neighbors() {
        let m = matrix(vec![vec![0.0, 1.0, 0.0]], Direction::Base, false);
        let s = smooth(&m);
        for v in &s.rows[0] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn smooth_loses_mass_at_the_edges() {
        let m = matrix(
            vec![vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]],
            Direction::Base,
            false,
        );
        let s = smooth(&m);
        assert!((s.rows[0][0] - 2.0 / 9.0).abs() < 1e-15);
        assert!((s.rows[0][1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.rows[0][2] - 2.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn smooth_single_column() {
        let m = matrix(vec![vec![1.0]], Direction::Base, false);
        let s = smooth(&m);
        assert!((s.rows[0][0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn smooth_mass_conservation_condition() {
        // Total mass drops by (first + last) / 3, so it stays 1 exactly
        // when both endpoints carry zero mass.
        let m = matrix(vec![vec![0.0, 0.4, 0.6, 0.0]], Direction::Base, false);
        let s = smooth(&m);
        assert!((s.rows[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let m2 = matrix(vec![vec![0.5, 0.0, 0.5]], Direction::Base, false);
        let s2 = smooth(&m2);
        assert!(s2.rows[0].iter().sum::<f64>() < 1.0);
    }

    #[test]
    fn segmentation_smoothing_runs_down_reverse_columns() {
        // Reverse orientation: rows are symbols, columns words. The
        // segmentation smoother averages across neighboring symbols.
        let m = matrix(
            vec![
                vec![0.9, 0.1],
                vec![0.3, 0.7],
                vec![0.8, 0.2],
                vec![0.1, 0.9], // flagged end-of-sentence row
            ],
            Direction::Reverse,
            true,
        );
        let s = smooth_for_segmentation(&m);
        // First content row: (0 + 0.9 + 0.3) / 3.
        assert!((s.rows[0][0] - 0.4).abs() < 1e-15);
        // Middle row averages all three content rows.
        assert!((s.rows[1][0] - (0.9 + 0.3 + 0.8) / 3.0).abs() < 1e-15);
        // Last content row ignores the flagged row.
        assert!((s.rows[2][0] - (0.3 + 0.8) / 3.0).abs() < 1e-15);
        // Flagged row passes through untouched.
        assert_eq!(s.rows[3], m.rows[3]);
    }

    #[test]
    fn fuse_averages_matching_matrices() {
        let base = matrix(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            Direction::Base,
            false,
        );
        let reverse = matrix(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            Direction::Reverse,
            false,
        );
        let fused = fuse(&base, &reverse).unwrap();
        assert_eq!(fused.rows, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(fused.direction, Direction::Reverse);
    }

    #[test]
    fn fuse_blends_disagreeing_matrices() {
        let base = matrix(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            Direction::Base,
            false,
        );
        let reverse = matrix(
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            Direction::Reverse,
            false,
        );
        let fused = fuse(&base, &reverse).unwrap();
        assert_eq!(fused.rows, vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
    }

    #[test]
    fn fuse_rejects_incompatible_shapes() {
        let base = matrix(
            vec![vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5]],
            Direction::Base,
            false,
        );
        let reverse = matrix(
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            Direction::Reverse,
            false,
        );
        assert!(matches!(
            fuse(&base, &reverse),
            Err(Error::ShapeMismatch(_))
        ));
    }

    /// Orientation symmetry: fusing is the same elementwise average seen
    /// from either side, so the fused matrix equals the transpose of the
    /// base-oriented average.
    #[test]
    fn fuse_is_symmetric_up_to_orientation() {
        let base = matrix(
            vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.3, 0.6]],
            Direction::Base,
            false,
        );
        let reverse = matrix(
            vec![vec![0.5, 0.5], vec![0.4, 0.6], vec![0.9, 0.1]],
            Direction::Reverse,
            false,
        );
        let fused = fuse(&base, &reverse).unwrap();
        for t in 0..2 {
            for i in 0..3 {
                let expected = 0.5 * (base.rows[t][i] + reverse.rows[i][t]);
                assert!((fused.rows[i][t] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hard_align_reverse_takes_row_argmax() {
        let m = matrix(
            vec![vec![0.7, 0.3], vec![0.6, 0.4], vec![0.2, 0.8]],
            Direction::Reverse,
            false,
        );
        assert_eq!(hard_align(&m).0, vec![0, 0, 1]);
    }

    #[test]
    fn hard_align_ties_break_low() {
        let m = matrix(vec![vec![0.5, 0.5]], Direction::Reverse, false);
        assert_eq!(hard_align(&m).0, vec![0]);
    }

    #[test]
    fn hard_align_one_hot_reads_off_exactly() {
        let m = matrix(
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            Direction::Reverse,
            false,
        );
        assert_eq!(hard_align(&m).0, vec![1, 0]);
    }

    #[test]
    fn hard_align_base_takes_column_argmax() {
        // Base orientation: rows words, columns symbols; each symbol
        // column picks its best word row.
        let m = matrix(
            vec![vec![0.9, 0.2, 0.1], vec![0.1, 0.8, 0.9]],
            Direction::Base,
            false,
        );
        assert_eq!(hard_align(&m).0, vec![0, 1, 1]);
    }

    #[test]
    fn hard_align_excludes_flagged_row() {
        let m = matrix(
            vec![vec![0.6, 0.4], vec![0.1, 0.9]],
            Direction::Reverse,
            true,
        );
        assert_eq!(hard_align(&m).0, vec![0]);
    }

    #[test]
    fn segment_groups_by_aligned_word() {
        let seg = segment(&["a", "b", "c", "d"], &HardAlignment(vec![0, 0, 1, 1])).unwrap();
        assert_eq!(seg.surfaces(), vec!["ab", "cd"]);
        assert_eq!(seg.tokens[0].span, (0, 2));
        assert_eq!(seg.tokens[1].span, (2, 4));
        assert_eq!(seg.tokens[0].word, Some(0));
        assert_eq!(seg.tokens[1].word, Some(1));
    }

    #[test]
    fn segment_is_sensitive_to_consecutiveness_only() {
        let seg = segment(&["a", "b", "c"], &HardAlignment(vec![0, 1, 0])).unwrap();
        assert_eq!(seg.surfaces(), vec!["a", "b", "c"]);
    }

    #[test]
    fn segment_rejects_length_mismatch() {
        assert!(segment(&["a", "b"], &HardAlignment(vec![0])).is_err());
    }

    /// The heatmap example sentence: a hard alignment that splits the
    /// second and fourth gold words reproduces the over-segmentation
    /// reported for this sentence.
    #[test]
    fn example_sentence_segments_by_alignment_groups() {
        let symbols: Vec<String> = "ngáímokώsώm'ébώli".chars().map(String::from).collect();
        // ngá | ímo | kώsώ | m' | é | bώli
        let alignment = HardAlignment(vec![
            0, 0, 0, // ngá
            1, 1, 1, // ímo
            2, 2, 2, 2, // kώsώ
            3, 3, // m'
            4, // é
            5, 5, 5, 5, // bώli
        ]);
        let seg = segment(&symbols, &alignment).unwrap();
        assert_eq!(
            seg.surfaces(),
            vec!["ngá", "ímo", "kώsώ", "m'", "é", "bώli"]
        );
        let gold = ["ngá", "ímokώsώ", "m'", "ébώli"];
        assert_eq!(seg.underlying(), gold.concat());
    }

    #[test]
    fn atomic_tokens_stay_intact() {
        // Mixed sequence: [ab] c d with "ab" injected. Even though the
        // alignment would merge everything into one token, the supervised
        // token keeps its boundaries.
        let seg = segment_mixed(
            &["ab", "c", "d"],
            &[2, 1, 1],
            &[true, false, false],
            &HardAlignment(vec![0, 0, 0]),
        )
        .unwrap();
        assert_eq!(seg.surfaces(), vec!["ab", "cd"]);
        assert_eq!(seg.tokens[0].span, (0, 2));
        assert_eq!(seg.tokens[1].span, (2, 4));
    }

    #[test]
    fn matrices_round_trip_bit_exactly() {
        let m1 = matrix(
            vec![vec![0.1, 0.9], vec![1.0 / 3.0, 2.0 / 3.0], vec![0.5, 0.5]],
            Direction::Reverse,
            true,
        );
        let m2 = matrix(vec![vec![0.25, 0.75]], Direction::Base, false);
        let dir = std::env::temp_dir().join(format!("mat-rt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("matrices.txt");
        write_matrices(&path, &[m1.clone(), m2.clone()]).unwrap();
        let loaded = read_matrices(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in [&m1, &m2].into_iter().zip(&loaded) {
            assert_eq!(a.row_surfaces, b.row_surfaces);
            assert_eq!(a.col_surfaces, b.col_surfaces);
            assert_eq!(a.eos_row, b.eos_row);
            assert_eq!(a.direction, b.direction);
            for (ra, rb) in a.rows.iter().zip(&b.rows) {
                for (x, y) in ra.iter().zip(rb) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn smoothed_argmax_is_invariant_under_row_rescaling() {
        // Exact power-of-two scaling cannot perturb float comparisons.
        let rows = vec![vec![0.05, 0.3, 0.45, 0.2]];
        let m = matrix(rows.clone(), Direction::Reverse, false);
        let scaled = matrix(
            vec![rows[0].iter().map(|v| v * 4.0).collect()],
            Direction::Reverse,
            false,
        );
        assert_eq!(hard_align(&smooth(&m)), hard_align(&smooth(&scaled)));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn prob_row(len: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(0.0..1.0f64, len).prop_map(|mut v| {
                let sum: f64 = v.iter().sum();
                if sum > 0.0 {
                    for x in &mut v {
                        *x /= sum;
                    }
                } else {
                    let n = v.len();
                    for x in &mut v {
                        *x = 1.0 / n as f64;
                    }
                }
                v
            })
        }

        proptest! {
            /// Smoothing preserves non-negativity; the total row mass never
            /// exceeds 1 and equals 1 exactly when both endpoints are 0.
            #[test]
            fn smooth_mass_bounds(row in (2usize..12).prop_flat_map(prob_row)) {
                let m = matrix(vec![row.clone()], Direction::Base, false);
                let s = smooth(&m);
                prop_assert!(s.rows[0].iter().all(|&v| v >= 0.0));
                let mass: f64 = s.rows[0].iter().sum();
                prop_assert!(mass <= 1.0 + 1e-12);
                let expected = 1.0 - (row[0] + row[row.len() - 1]) / 3.0;
                prop_assert!((mass - expected).abs() < 1e-12);
            }

            /// Segmenting the hard alignment of a block-diagonal one-hot
            /// matrix recovers the block structure exactly.
            #[test]
            fn block_structure_recovered(blocks in proptest::collection::vec(1usize..4, 1..5)) {
                let words = blocks.len();
                let mut rows = Vec::new();
                for (w, &len) in blocks.iter().enumerate() {
                    for _ in 0..len {
                        let mut row = vec![0.0; words];
                        row[w] = 1.0;
                        rows.push(row);
                    }
                }
                let symbols: Vec<String> =
                    (0..rows.len()).map(|i| ((b'a' + (i % 26) as u8) as char).to_string()).collect();
                let m = AlignmentMatrix {
                    rows,
                    row_surfaces: symbols.clone(),
                    col_surfaces: (0..words).map(|w| format!("w{w}")).collect(),
                    eos_row: false,
                    direction: Direction::Reverse,
                };
                let seg = segment(&symbols, &hard_align(&m)).unwrap();
                let lens: Vec<usize> = seg.tokens.iter().map(|t| t.span.1 - t.span.0).collect();
                prop_assert_eq!(lens, blocks);
            }

            /// Fusing is symmetric up to orientation: the fused entry is the
            /// same elementwise average seen from either side.
            #[test]
            fn fuse_symmetry(
                alpha in proptest::collection::vec(prob_row(3), 2),
                beta in proptest::collection::vec(prob_row(2), 3),
            ) {
                let base = AlignmentMatrix {
                    rows: alpha.clone(),
                    row_surfaces: vec!["t0".into(), "t1".into()],
                    col_surfaces: vec!["s0".into(), "s1".into(), "s2".into()],
                    eos_row: false,
                    direction: Direction::Base,
                };
                let reverse = AlignmentMatrix {
                    rows: beta.clone(),
                    row_surfaces: vec!["s0".into(), "s1".into(), "s2".into()],
                    col_surfaces: vec!["t0".into(), "t1".into()],
                    eos_row: false,
                    direction: Direction::Reverse,
                };
                let fused = fuse(&base, &reverse).unwrap();
                for i in 0..3 {
                    for t in 0..2 {
                        let expected = 0.5 * (alpha[t][i] + beta[i][t]);
                        prop_assert!((fused.rows[i][t] - expected).abs() < 1e-15);
                    }
                }
            }
        }
    }
}
