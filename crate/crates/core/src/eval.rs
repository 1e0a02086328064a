//! Retrieval metrics: MAP over the top `n`, precision at `N`, and
//! precision–recall over Hamming radius. Two items are relevant when their
//! label sets intersect.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::datastore::{LabelTable, PackedCodeSet};
use crate::error::{Error, Result};
use crate::hamming::{radius_histogram, rank_topn, RadiusBucket};

/// True iff two sorted label sets share an id.
pub fn relevant(a: &[u32], b: &[u32]) -> bool {
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

/// Average precision of a ranked relevance list, `(1 / N) * sum_i I(i) * P@i`;
/// 0 when nothing is relevant.
///
/// The `1 / N` factor is applied once at the end so a perfect ranking is
/// exactly 1 and rounding never pushes the result above 1.
pub fn average_precision(rel: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in rel.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

fn check_inputs(
    queries: &PackedCodeSet,
    q_labels: &LabelTable,
    db: &PackedCodeSet,
    db_labels: &LabelTable,
) -> Result<()> {
    if queries.n() != q_labels.n() {
        return Err(Error::Shape(format!(
            "{} query codes but {} query label rows",
            queries.n(),
            q_labels.n()
        )));
    }
    if db.n() != db_labels.n() {
        return Err(Error::Shape(format!(
            "{} database codes but {} database label rows",
            db.n(),
            db_labels.n()
        )));
    }
    if queries.k() != db.k() {
        return Err(Error::Shape(format!(
            "query codes have {} bits, database codes {}",
            queries.k(),
            db.k()
        )));
    }
    Ok(())
}

fn check_depth(n: usize, db: &PackedCodeSet) -> Result<()> {
    if n > db.n() {
        return Err(Error::InvalidArgument(format!(
            "requested top {n} but the database holds only {} codes",
            db.n()
        )));
    }
    Ok(())
}

fn ranked_relevance(
    q: usize,
    queries: &PackedCodeSet,
    q_labels: &LabelTable,
    db: &PackedCodeSet,
    db_labels: &LabelTable,
    n: usize,
) -> Result<Vec<bool>> {
    let ranked = rank_topn(queries.code(q), db, n)?;
    Ok(ranked
        .iter()
        .map(|&i| relevant(q_labels.get(q), db_labels.get(i)))
        .collect())
}

/// Mean over queries of the AP of their top-`n` Hamming ranking.
pub fn map_at_n(
    queries: &PackedCodeSet,
    q_labels: &LabelTable,
    db: &PackedCodeSet,
    db_labels: &LabelTable,
    n: usize,
) -> Result<f64> {
    check_inputs(queries, q_labels, db, db_labels)?;
    check_depth(n, db)?;
    if queries.n() == 0 {
        return Err(Error::InvalidArgument("no queries".into()));
    }
    let aps = (0..queries.n())
        .into_par_iter()
        .map(|q| {
            ranked_relevance(q, queries, q_labels, db, db_labels, n).map(|r| average_precision(&r))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Mean precision within the top `N` for each requested `N`.
pub fn precision_at_n_curve(
    queries: &PackedCodeSet,
    q_labels: &LabelTable,
    db: &PackedCodeSet,
    db_labels: &LabelTable,
    points: &[usize],
) -> Result<Vec<(usize, f64)>> {
    check_inputs(queries, q_labels, db, db_labels)?;
    let deepest = points.iter().copied().max().unwrap_or(0);
    check_depth(deepest, db)?;
    if queries.n() == 0 {
        return Err(Error::InvalidArgument("no queries".into()));
    }
    if points.contains(&0) {
        return Err(Error::InvalidArgument(
            "precision at N = 0 is undefined".into(),
        ));
    }
    // per query: cumulative relevant count at each depth
    let cumulative = (0..queries.n())
        .into_par_iter()
        .map(|q| {
            let rel = ranked_relevance(q, queries, q_labels, db, db_labels, deepest)?;
            let mut acc = 0;
            Ok(rel
                .iter()
                .map(|&r| {
                    acc += r as usize;
                    acc
                })
                .collect::<Vec<usize>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(points
        .iter()
        .map(|&n| {
            let sum: f64 = cumulative.iter().map(|c| c[n - 1] as f64 / n as f64).sum();
            (n, sum / queries.n() as f64)
        })
        .collect())
}

/// How per-query counts combine into one PR curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PrAveraging {
    /// Pool counts over queries, then divide.
    #[default]
    Micro,
    /// Average per-query precision and recall.
    Macro,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub radius: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    /// Queries with no relevant database item; they are left out of the
    /// recall denominator.
    pub queries_without_relevant: usize,
}

/// Precision and recall of hash lookup within radius `0..=k`.
///
/// Precision at a radius where nothing is retrieved is 1. Recall is 0 when
/// no query has any relevant item.
pub fn pr_curve_hamming(
    queries: &PackedCodeSet,
    q_labels: &LabelTable,
    db: &PackedCodeSet,
    db_labels: &LabelTable,
    averaging: PrAveraging,
) -> Result<PrCurve> {
    check_inputs(queries, q_labels, db, db_labels)?;
    let k = db.k();
    let per_query = (0..queries.n())
        .into_par_iter()
        .map(|q| {
            let rel: Vec<bool> = db_labels
                .iter()
                .map(|l| relevant(q_labels.get(q), l))
                .collect();
            let total = rel.iter().filter(|&&r| r).count();
            let buckets = radius_histogram(queries.code(q), db, &rel)?;
            Ok((buckets, total))
        })
        .collect::<Result<Vec<(Vec<RadiusBucket>, usize)>>>()?;

    let without = per_query.iter().filter(|(_, total)| *total == 0).count();
    let with = per_query.len() - without;
    let mut points = Vec::with_capacity(k + 1);
    match averaging {
        PrAveraging::Micro => {
            let total_relevant: usize = per_query.iter().map(|(_, t)| t).sum();
            let (mut retrieved, mut hits) = (0usize, 0usize);
            for r in 0..=k {
                for (buckets, _) in &per_query {
                    retrieved += buckets[r].retrieved;
                    hits += buckets[r].relevant;
                }
                let precision = if retrieved == 0 {
                    1.0
                } else {
                    hits as f64 / retrieved as f64
                };
                let recall = if total_relevant == 0 {
                    0.0
                } else {
                    hits as f64 / total_relevant as f64
                };
                points.push(PrPoint {
                    radius: r,
                    precision,
                    recall,
                });
            }
        }
        PrAveraging::Macro => {
            let mut cum: Vec<(usize, usize)> = vec![(0, 0); per_query.len()];
            for r in 0..=k {
                let (mut p_sum, mut r_sum) = (0.0, 0.0);
                for (c, (buckets, total)) in cum.iter_mut().zip(&per_query) {
                    c.0 += buckets[r].retrieved;
                    c.1 += buckets[r].relevant;
                    p_sum += if c.0 == 0 {
                        1.0
                    } else {
                        c.1 as f64 / c.0 as f64
                    };
                    if *total > 0 {
                        r_sum += c.1 as f64 / *total as f64;
                    }
                }
                let precision = if cum.is_empty() {
                    1.0
                } else {
                    p_sum / cum.len() as f64
                };
                let recall = if with == 0 { 0.0 } else { r_sum / with as f64 };
                points.push(PrPoint {
                    radius: r,
                    precision,
                    recall,
                });
            }
        }
    }
    Ok(PrCurve {
        points,
        queries_without_relevant: without,
    })
}

/// Everything the evaluator reports for one query/database pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub map: f64,
    pub map_n: usize,
    pub p_at_n: Vec<(usize, f64)>,
    pub pr_curve: Vec<PrPoint>,
    pub queries_without_relevant: usize,
}

pub fn evaluate(
    queries: &PackedCodeSet,
    q_labels: &LabelTable,
    db: &PackedCodeSet,
    db_labels: &LabelTable,
    map_n: usize,
    p_at_n_points: &[usize],
    averaging: PrAveraging,
) -> Result<RetrievalReport> {
    let map = map_at_n(queries, q_labels, db, db_labels, map_n)?;
    let p_at_n = precision_at_n_curve(queries, q_labels, db, db_labels, p_at_n_points)?;
    let pr = pr_curve_hamming(queries, q_labels, db, db_labels, averaging)?;
    Ok(RetrievalReport {
        map,
        map_n,
        p_at_n,
        pr_curve: pr.points,
        queries_without_relevant: pr.queries_without_relevant,
    })
}

/// Formats with 9 significant digits, trailing zeros trimmed.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-5..9).contains(&exp) {
        return format!("{v:.8e}");
    }
    let decimals = (8 - exp).max(0) as usize;
    let s = format!("{v:.decimals$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Writes `map.csv`, `p_at_n.csv` and `pr.csv` into `dir`.
pub fn write_report_csv(dir: impl AsRef<Path>, report: &RetrievalReport) -> Result<()> {
    let dir = dir.as_ref();
    let mut w = BufWriter::new(File::create(dir.join("map.csv"))?);
    writeln!(w, "map,n,queries_without_relevant")?;
    writeln!(
        w,
        "{},{},{}",
        format_sig9(report.map),
        report.map_n,
        report.queries_without_relevant
    )?;
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join("p_at_n.csv"))?);
    writeln!(w, "n,precision")?;
    for (n, p) in &report.p_at_n {
        writeln!(w, "{n},{}", format_sig9(*p))?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join("pr.csv"))?);
    writeln!(w, "radius,precision,recall")?;
    for p in &report.pr_curve {
        writeln!(
            w,
            "{},{},{}",
            p.radius,
            format_sig9(p.precision),
            format_sig9(p.recall)
        )?;
    }
    w.flush()?;
    Ok(())
}
