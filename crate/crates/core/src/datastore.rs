//! On-disk formats and the validated in-memory containers shared by the
//! rest of the crate.
//!
//! Binary layouts (all multi-byte fields little-endian, payload floats are
//! IEEE-754 `f32`):
//!
//! | magic  | contents                 | header after magic + `u32` version                    |
//! |--------|--------------------------|-------------------------------------------------------|
//! | `UHSM` | image–concept scores     | `n: u64`, `m: u64`, `m` names (`u32` len + UTF-8)     |
//! | `UHSD` | concept distributions    | same as `UHSM`                                        |
//! | `UHSF` | feature vectors          | `n: u64`, `d: u64`                                    |
//! | `UHSB` | packed binary codes      | `k: u64`, `n: u64`, then `n * ceil(k/64)` `u64` words |
//!
//! Labels are a TSV text file: `index \t id,id,...` per line.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

pub const SCORE_MAGIC: [u8; 4] = *b"UHSM";
pub const FEATURE_MAGIC: [u8; 4] = *b"UHSF";
pub const DISTRIBUTION_MAGIC: [u8; 4] = *b"UHSD";
pub const CODE_MAGIC: [u8; 4] = *b"UHSB";
pub const FORMAT_VERSION: u32 = 1;

/// Tolerance on row sums of a [`DistributionMatrix`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Image–concept similarity scores, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    concept_names: Vec<String>,
    scores: DenseMatrix,
}

impl ScoreMatrix {
    pub fn new(concept_names: Vec<String>, scores: DenseMatrix) -> Result<Self> {
        if scores.rows() < 1 {
            return Err(Error::InvalidData(
                "score matrix needs at least one image".into(),
            ));
        }
        if scores.cols() < 2 {
            return Err(Error::InvalidData(format!(
                "score matrix needs at least two concepts, got {}",
                scores.cols()
            )));
        }
        validate_names(&concept_names, scores.cols())?;
        if let Some(pos) = scores.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "non-finite score at image {}, concept {}",
                pos / scores.cols(),
                pos % scores.cols()
            )));
        }
        Ok(ScoreMatrix {
            concept_names,
            scores,
        })
    }

    pub fn n(&self) -> usize {
        self.scores.rows()
    }

    pub fn m(&self) -> usize {
        self.scores.cols()
    }

    pub fn concept_names(&self) -> &[String] {
        &self.concept_names
    }

    pub fn scores(&self) -> &DenseMatrix {
        &self.scores
    }

    /// Keeps only the listed concept columns.
    pub fn restrict_concepts(&self, keep: &[usize]) -> Result<ScoreMatrix> {
        let names = keep
            .iter()
            .map(|&j| self.concept_names[j].clone())
            .collect();
        ScoreMatrix::new(names, self.scores.select_cols(keep))
    }

    pub fn select_images(&self, idx: &[usize]) -> Result<ScoreMatrix> {
        ScoreMatrix::new(self.concept_names.clone(), self.scores.select_rows(idx))
    }
}

/// Per-image feature vectors fed to the hashing head.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    features: DenseMatrix,
}

impl FeatureMatrix {
    pub fn new(features: DenseMatrix) -> Result<Self> {
        if features.rows() < 1 || features.cols() < 1 {
            return Err(Error::InvalidData(format!(
                "feature matrix must be at least 1x1, got {}x{}",
                features.rows(),
                features.cols()
            )));
        }
        if !features.all_finite() {
            return Err(Error::InvalidData("non-finite feature value".into()));
        }
        Ok(FeatureMatrix { features })
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn select_images(&self, idx: &[usize]) -> Result<FeatureMatrix> {
        FeatureMatrix::new(self.features.select_rows(idx))
    }
}

/// Row-stochastic concept distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionMatrix {
    concept_names: Vec<String>,
    dist: DenseMatrix,
}

impl DistributionMatrix {
    pub fn new(concept_names: Vec<String>, dist: DenseMatrix) -> Result<Self> {
        if dist.rows() < 1 || dist.cols() < 1 {
            return Err(Error::InvalidData("empty distribution matrix".into()));
        }
        validate_names(&concept_names, dist.cols())?;
        for (i, row) in dist.iter_rows().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::InvalidData(format!(
                    "distribution row {i} has an entry outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidData(format!(
                    "distribution row {i} sums to {sum}, not 1"
                )));
            }
        }
        Ok(DistributionMatrix {
            concept_names,
            dist,
        })
    }

    pub fn n(&self) -> usize {
        self.dist.rows()
    }

    pub fn m(&self) -> usize {
        self.dist.cols()
    }

    pub fn concept_names(&self) -> &[String] {
        &self.concept_names
    }

    pub fn dist(&self) -> &DenseMatrix {
        &self.dist
    }
}

fn validate_names(names: &[String], m: usize) -> Result<()> {
    if names.len() != m {
        return Err(Error::Shape(format!(
            "{} concept names for {m} concept columns",
            names.len()
        )));
    }
    let mut seen = HashSet::with_capacity(m);
    for name in names {
        if name.is_empty() {
            return Err(Error::InvalidData("empty concept name".into()));
        }
        if !seen.insert(name.as_str()) {
            return Err(Error::InvalidData(format!(
                "duplicate concept name {name:?}"
            )));
        }
    }
    Ok(())
}

/// Per-item label sets. Stored sorted and deduplicated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTable {
    labels: Vec<Vec<u32>>,
}

impl LabelTable {
    pub fn new(labels: Vec<Vec<u32>>) -> Result<Self> {
        let mut labels = labels;
        for (i, set) in labels.iter_mut().enumerate() {
            if set.is_empty() {
                return Err(Error::InvalidData(format!(
                    "item {i} has an empty label set"
                )));
            }
            set.sort_unstable();
            set.dedup();
        }
        Ok(LabelTable { labels })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, i: usize) -> &[u32] {
        &self.labels[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u32]> {
        self.labels.iter().map(Vec::as_slice)
    }

    pub fn select(&self, idx: &[usize]) -> LabelTable {
        LabelTable {
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }
}

/// `n` binary codes of `k` bits, 64 bits per word. Bit `j` of code `i`
/// is word `j / 64`, bit `j % 64`; a set bit means `+1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodeSet {
    n: usize,
    k: usize,
    words: Vec<u64>,
}

#[inline]
pub fn words_per_code(k: usize) -> usize {
    k.div_ceil(64)
}

/// Mask of the live bits in the last word of a `k`-bit code.
#[inline]
pub fn last_word_mask(k: usize) -> u64 {
    match k % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

impl PackedCodeSet {
    /// All-zero (all `-1`) codes.
    pub fn zeros(n: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument(
                "code length must be at least 1".into(),
            ));
        }
        Ok(PackedCodeSet {
            n,
            k,
            words: vec![0; n * words_per_code(k)],
        })
    }

    pub fn from_words(n: usize, k: usize, words: Vec<u64>) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument(
                "code length must be at least 1".into(),
            ));
        }
        let w = words_per_code(k);
        if words.len() != n * w {
            return Err(Error::Shape(format!(
                "{} words for {n} codes of {k} bits (need {})",
                words.len(),
                n * w
            )));
        }
        let mask = last_word_mask(k);
        for i in 0..n {
            if words[i * w + w - 1] & !mask != 0 {
                return Err(Error::InvalidData(format!(
                    "code {i} has nonzero padding bits beyond bit {k}"
                )));
            }
        }
        Ok(PackedCodeSet { n, k, words })
    }

    /// Packs rows of booleans (`true` means `+1`).
    pub fn from_bits<R: AsRef<[bool]>>(k: usize, rows: &[R]) -> Result<Self> {
        let mut set = PackedCodeSet::zeros(rows.len(), k)?;
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != k {
                return Err(Error::Shape(format!(
                    "code {i} has {} bits, expected {k}",
                    row.len()
                )));
            }
            for (j, &b) in row.iter().enumerate() {
                if b {
                    set.set_bit(i, j);
                }
            }
        }
        Ok(set)
    }

    #[inline]
    pub(crate) fn set_bit(&mut self, i: usize, j: usize) {
        let w = words_per_code(self.k);
        self.words[i * w + j / 64] |= 1u64 << (j % 64);
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn words_per_code(&self) -> usize {
        words_per_code(self.k)
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn code(&self, i: usize) -> &[u64] {
        let w = words_per_code(self.k);
        &self.words[i * w..(i + 1) * w]
    }

    #[inline]
    pub fn bit(&self, i: usize, j: usize) -> bool {
        self.code(i)[j / 64] >> (j % 64) & 1 == 1
    }

    /// Expands code `i` to a `±1` vector.
    pub fn signs(&self, i: usize) -> Vec<i8> {
        (0..self.k)
            .map(|j| if self.bit(i, j) { 1 } else { -1 })
            .collect()
    }

    pub fn select(&self, idx: &[usize]) -> PackedCodeSet {
        let mut words = Vec::with_capacity(idx.len() * self.words_per_code());
        for &i in idx {
            words.extend_from_slice(self.code(i));
        }
        PackedCodeSet {
            n: idx.len(),
            k: self.k,
            words,
        }
    }
}

// ---------------------------------------------------------------------------
// binary helpers

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, len: usize, what: &'static str) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if len > available {
            return Err(Error::Truncated {
                what,
                needed: len,
                available,
            });
        }
        let out = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &'static str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn usize(&mut self, what: &'static str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in memory")))
    }

    pub(crate) fn header(&mut self, magic: [u8; 4]) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != magic {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(&magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::BadVersion {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        Ok(())
    }

    /// Reads `count` f32 values, checking the byte budget before allocating.
    pub(crate) fn f32s(&mut self, count: usize, what: &'static str) -> Result<Vec<f64>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("{what} size overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn write_header<W: Write>(w: &mut W, magic: [u8; 4]) -> Result<()> {
    w.write_all(&magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: usize) -> Result<()> {
    w.write_all(&(v as u64).to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for &v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn write_names<W: Write>(w: &mut W, names: &[String]) -> Result<()> {
    for name in names {
        let len = u32::try_from(name.len()).map_err(|_| {
            Error::InvalidData(format!("concept name too long: {} bytes", name.len()))
        })?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
    }
    Ok(())
}

fn read_names(r: &mut ByteReader<'_>, m: usize) -> Result<Vec<String>> {
    let mut names = Vec::with_capacity(m.min(1 << 16));
    for _ in 0..m {
        let len = r.u32("concept name length")? as usize;
        let raw = r.take(len, "concept name")?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| Error::Format("concept name is not valid UTF-8".into()))?;
        names.push(name.to_owned());
    }
    Ok(names)
}

// The f32 narrowing happens on write; values that overflow f32 are rejected
// before the file is created.
fn check_f32_range(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !(*v as f32).is_finite()) {
        return Err(Error::InvalidData(format!(
            "{what} value does not fit in f32"
        )));
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn named_matrix_to_file(
    path: &Path,
    magic: [u8; 4],
    names: &[String],
    values: &DenseMatrix,
) -> Result<()> {
    check_f32_range(values.as_slice(), "matrix")?;
    let mut w = create(path)?;
    write_header(&mut w, magic)?;
    write_u64(&mut w, values.rows())?;
    write_u64(&mut w, values.cols())?;
    write_names(&mut w, names)?;
    write_f32s(&mut w, values.as_slice())?;
    w.flush()?;
    Ok(())
}

fn named_matrix_from_bytes(buf: &[u8], magic: [u8; 4]) -> Result<(Vec<String>, DenseMatrix)> {
    let mut r = ByteReader::new(buf);
    r.header(magic)?;
    let n = r.usize("row count")?;
    let m = r.usize("column count")?;
    let names = read_names(&mut r, m)?;
    let count = n
        .checked_mul(m)
        .ok_or_else(|| Error::Format("matrix size overflows".into()))?;
    let values = r.f32s(count, "matrix payload")?;
    r.finish()?;
    Ok((names, DenseMatrix::from_vec(n, m, values)?))
}

pub fn write_score_matrix(path: impl AsRef<Path>, s: &ScoreMatrix) -> Result<()> {
    // re-validate so hand-built values cannot reach the disk
    ScoreMatrix::new(s.concept_names.clone(), s.scores.clone())?;
    named_matrix_to_file(path.as_ref(), SCORE_MAGIC, &s.concept_names, &s.scores)
}

pub fn read_score_matrix(path: impl AsRef<Path>) -> Result<ScoreMatrix> {
    let buf = fs::read(path)?;
    let (names, scores) = named_matrix_from_bytes(&buf, SCORE_MAGIC)?;
    ScoreMatrix::new(names, scores)
}

pub fn write_distribution_matrix(path: impl AsRef<Path>, d: &DistributionMatrix) -> Result<()> {
    named_matrix_to_file(path.as_ref(), DISTRIBUTION_MAGIC, &d.concept_names, &d.dist)
}

/// Reads a `UHSD` file. Rows are renormalized in `f64` after the `f32`
/// decode so the row-sum invariant holds at full precision.
pub fn read_distribution_matrix(path: impl AsRef<Path>) -> Result<DistributionMatrix> {
    let buf = fs::read(path)?;
    let (names, mut dist) = named_matrix_from_bytes(&buf, DISTRIBUTION_MAGIC)?;
    for i in 0..dist.rows() {
        let row = dist.row_mut(i);
        let sum: f64 = row.iter().sum();
        if !(sum.is_finite() && sum > 0.0) {
            return Err(Error::InvalidData(format!(
                "distribution row {i} has no mass"
            )));
        }
        row.iter_mut().for_each(|p| *p /= sum);
    }
    DistributionMatrix::new(names, dist)
}

pub fn write_feature_matrix(path: impl AsRef<Path>, f: &FeatureMatrix) -> Result<()> {
    let values = f.features();
    check_f32_range(values.as_slice(), "feature")?;
    let mut w = create(path.as_ref())?;
    write_header(&mut w, FEATURE_MAGIC)?;
    write_u64(&mut w, values.rows())?;
    write_u64(&mut w, values.cols())?;
    write_f32s(&mut w, values.as_slice())?;
    w.flush()?;
    Ok(())
}

pub fn read_feature_matrix(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let buf = fs::read(path)?;
    let mut r = ByteReader::new(&buf);
    r.header(FEATURE_MAGIC)?;
    let n = r.usize("row count")?;
    let d = r.usize("column count")?;
    let count = n
        .checked_mul(d)
        .ok_or_else(|| Error::Format("matrix size overflows".into()))?;
    let values = r.f32s(count, "feature payload")?;
    r.finish()?;
    FeatureMatrix::new(DenseMatrix::from_vec(n, d, values)?)
}

pub fn write_codes(path: impl AsRef<Path>, c: &PackedCodeSet) -> Result<()> {
    let w = c.words_per_code();
    let mask = last_word_mask(c.k);
    if (0..c.n).any(|i| c.words[i * w + w - 1] & !mask != 0) {
        return Err(Error::InvalidData(
            "nonzero padding bits in code set".into(),
        ));
    }
    let mut out = create(path.as_ref())?;
    write_header(&mut out, CODE_MAGIC)?;
    write_u64(&mut out, c.k)?;
    write_u64(&mut out, c.n)?;
    for word in &c.words {
        out.write_all(&word.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_codes(path: impl AsRef<Path>) -> Result<PackedCodeSet> {
    let buf = fs::read(path)?;
    let mut r = ByteReader::new(&buf);
    r.header(CODE_MAGIC)?;
    let k = r.usize("code length")?;
    let n = r.usize("code count")?;
    if k == 0 {
        return Err(Error::Format("code length 0".into()));
    }
    let bytes = n
        .checked_mul(words_per_code(k))
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| Error::Format("code payload size overflows".into()))?;
    let raw = r.take(bytes, "code payload")?;
    r.finish()?;
    let words = raw
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    PackedCodeSet::from_words(n, k, words)
}

/// Parses the labels TSV. Lines may appear in any order; every index in
/// `0..n` must occur exactly once.
pub fn parse_labels(text: &str) -> Result<LabelTable> {
    let mut rows: Vec<Option<Vec<u32>>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let lineno = lineno + 1;
        let (idx, ids) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("line {lineno}: expected `index<TAB>labels`")))?;
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("line {lineno}: bad item index {idx:?}")))?;
        let ids = ids.trim();
        if ids.is_empty() {
            return Err(Error::InvalidData(format!(
                "line {lineno}: item {idx} has an empty label set"
            )));
        }
        let set = ids
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<u32>()
                    .map_err(|_| Error::Format(format!("line {lineno}: bad label id {t:?}")))
            })
            .collect::<Result<Vec<u32>>>()?;
        if idx >= rows.len() {
            rows.resize(idx + 1, None);
        }
        if rows[idx].is_some() {
            return Err(Error::InvalidData(format!("duplicate item index {idx}")));
        }
        rows[idx] = Some(set);
    }
    let labels = rows
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.ok_or_else(|| Error::InvalidData(format!("missing item index {i}"))))
        .collect::<Result<Vec<_>>>()?;
    LabelTable::new(labels)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelTable> {
    parse_labels(&fs::read_to_string(path)?)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelTable) -> Result<()> {
    let mut w = create(path.as_ref())?;
    for (i, set) in labels.iter().enumerate() {
        let ids: Vec<String> = set.iter().map(u32::to_string).collect();
        writeln!(w, "{i}\t{}", ids.join(","))?;
    }
    w.flush()?;
    Ok(())
}
