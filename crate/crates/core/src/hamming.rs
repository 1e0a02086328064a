//! Binarization and Hamming-space search over packed codes.

use rayon::prelude::*;

use crate::datastore::{last_word_mask, words_per_code, PackedCodeSet};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Packs `sgn(Z)`: bit set iff the entry is strictly positive.
pub fn binarize(z: &DenseMatrix) -> Result<PackedCodeSet> {
    if !z.all_finite() {
        return Err(Error::InvalidData("non-finite relaxed code".into()));
    }
    let mut codes = PackedCodeSet::zeros(z.rows(), z.cols())?;
    for i in 0..z.rows() {
        for (j, &v) in z.row(i).iter().enumerate() {
            if v > 0.0 {
                codes.set_bit(i, j);
            }
        }
    }
    Ok(codes)
}

/// Popcount of `a ^ b` over the `k` live bits.
#[inline]
pub fn hamming_words(a: &[u64], b: &[u64], k: usize) -> u32 {
    let w = words_per_code(k);
    let mut dist = 0;
    for i in 0..w - 1 {
        dist += (a[i] ^ b[i]).count_ones();
    }
    dist + ((a[w - 1] ^ b[w - 1]) & last_word_mask(k)).count_ones()
}

pub fn hamming_distance(codes: &PackedCodeSet, i: usize, j: usize) -> Result<usize> {
    let n = codes.n();
    if i >= n || j >= n {
        return Err(Error::InvalidArgument(format!(
            "code index ({i}, {j}) out of range for {n} codes"
        )));
    }
    Ok(hamming_words(codes.code(i), codes.code(j), codes.k()) as usize)
}

fn check_query(query: &[u64], db: &PackedCodeSet) -> Result<()> {
    if query.len() != db.words_per_code() {
        return Err(Error::Shape(format!(
            "query has {} words, database codes have {}",
            query.len(),
            db.words_per_code()
        )));
    }
    Ok(())
}

/// Distance from `query` to every database code, in database order.
pub fn distances(query: &[u64], db: &PackedCodeSet) -> Result<Vec<u32>> {
    check_query(query, db)?;
    Ok((0..db.n())
        .map(|i| hamming_words(query, db.code(i), db.k()))
        .collect())
}

/// The `n` closest database indices, by ascending distance and then
/// ascending index.
///
/// Distances live in `0..=k`, so selection is a two-pass bucket count: find
/// the cutoff distance from the histogram, then collect in index order.
pub fn rank_topn(query: &[u64], db: &PackedCodeSet, n: usize) -> Result<Vec<usize>> {
    if n > db.n() {
        return Err(Error::InvalidArgument(format!(
            "cannot return top {n} of {} database codes",
            db.n()
        )));
    }
    let dist = distances(query, db)?;
    let k = db.k();
    let mut hist = vec![0usize; k + 1];
    for &d in &dist {
        hist[d as usize] += 1;
    }
    // offsets[d] = first output slot for distance d
    let mut offsets = vec![0usize; k + 2];
    for d in 0..=k {
        offsets[d + 1] = offsets[d] + hist[d];
    }
    let cutoff = (0..=k).find(|&d| offsets[d + 1] >= n).unwrap_or(k);

    let mut out = vec![usize::MAX; n];
    let mut cursor = offsets;
    for (i, &d) in dist.iter().enumerate() {
        let d = d as usize;
        if d > cutoff {
            continue;
        }
        let slot = cursor[d];
        if slot < n {
            out[slot] = i;
            cursor[d] += 1;
        }
    }
    Ok(out)
}

/// [`rank_topn`] for every query, in parallel; results are in query order.
pub fn rank_topn_many(
    queries: &PackedCodeSet,
    db: &PackedCodeSet,
    n: usize,
) -> Result<Vec<Vec<usize>>> {
    if queries.k() != db.k() {
        return Err(Error::Shape(format!(
            "query codes have {} bits, database codes {}",
            queries.k(),
            db.k()
        )));
    }
    (0..queries.n())
        .into_par_iter()
        .map(|q| rank_topn(queries.code(q), db, n))
        .collect()
}

/// Counts for one Hamming distance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RadiusBucket {
    pub retrieved: usize,
    pub relevant: usize,
}

/// Per-distance retrieved and relevant counts for `d = 0..=k`.
pub fn radius_histogram(
    query: &[u64],
    db: &PackedCodeSet,
    relevance: &[bool],
) -> Result<Vec<RadiusBucket>> {
    if relevance.len() != db.n() {
        return Err(Error::Shape(format!(
            "{} relevance flags for {} database codes",
            relevance.len(),
            db.n()
        )));
    }
    let dist = distances(query, db)?;
    let mut buckets = vec![RadiusBucket::default(); db.k() + 1];
    for (&d, &rel) in dist.iter().zip(relevance) {
        let b = &mut buckets[d as usize];
        b.retrieved += 1;
        b.relevant += rel as usize;
    }
    Ok(buckets)
}
