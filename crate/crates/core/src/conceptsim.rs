//! Concept distributions, concept denoising and pairwise semantic
//! similarity.
//!
//! The pipeline is: scores `S` → temperature softmax `D` → argmax
//! frequency per concept → keep-mask → softmax over the kept columns `D'`
//! → cosine similarity between rows of `D'`. The similarity matrix is
//! never materialized; [`similarity_block`] computes any rectangular block
//! on demand.

use std::fmt::Write as _;

use crate::datastore::{DistributionMatrix, FeatureMatrix, ScoreMatrix};
use crate::error::{Error, Result};
use crate::matrix::{dot, norm, DenseMatrix};

/// Softmax temperature rule. `PerConcept(r)` means `tau = r * m` for the
/// concept count `m` of the matrix it is applied to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Temperature {
    PerConcept(f64),
    Fixed(f64),
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature::PerConcept(3.0)
    }
}

impl Temperature {
    pub fn resolve(self, m: usize) -> f64 {
        match self {
            Temperature::PerConcept(r) => r * m as f64,
            Temperature::Fixed(t) => t,
        }
    }
}

/// Temperature used for the second softmax pass over the kept concepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DenoisedTemperature {
    /// `tau' = tau / m * m'`, preserving the per-concept scale.
    #[default]
    Rescale,
    /// `tau' = tau`.
    Keep,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be a positive finite number, got {tau}"
        )));
    }
    Ok(())
}

/// Writes `softmax(tau * scores)` into `out`, subtracting the row max first.
pub fn softmax_into(scores: &[f64], tau: f64, out: &mut [f64]) {
    let max = scores
        .iter()
        .fold(f64::NEG_INFINITY, |a, &s| a.max(tau * s));
    let mut sum = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (tau * s - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn concept_distributions(s: &ScoreMatrix, tau: f64) -> Result<DistributionMatrix> {
    check_tau(tau)?;
    let scores = s.scores();
    if !scores.all_finite() {
        return Err(Error::InvalidData("non-finite score".into()));
    }
    let mut dist = DenseMatrix::zeros(s.n(), s.m());
    for i in 0..s.n() {
        softmax_into(scores.row(i), tau, dist.row_mut(i));
    }
    DistributionMatrix::new(s.concept_names().to_vec(), dist)
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Number of images whose most probable concept is each concept.
pub fn concept_frequencies(d: &DistributionMatrix) -> Vec<usize> {
    frequencies_of(d.dist())
}

fn frequencies_of(dist: &DenseMatrix) -> Vec<usize> {
    let mut f = vec![0; dist.cols()];
    for row in dist.iter_rows() {
        f[argmax(row)] += 1;
    }
    f
}

fn thresholds(n: usize, m: usize) -> (f64, f64) {
    (0.5 * n as f64 / m as f64, 0.5 * n as f64)
}

/// Keep-mask: concept `i` survives iff `0.5 n / m <= f[i] <= 0.5 n`.
pub fn discard_mask(f: &[usize], n: usize, m: usize) -> Vec<bool> {
    let (lo, hi) = thresholds(n, m);
    f.iter()
        .map(|&fi| {
            let fi = fi as f64;
            lo <= fi && fi <= hi
        })
        .collect()
}

/// Outcome of concept denoising.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseReport {
    /// Retained concept indices into the original score matrix, ascending.
    pub kept: Vec<usize>,
    /// Argmax frequency of every original concept.
    pub frequencies: Vec<usize>,
    pub lower_threshold: f64,
    pub upper_threshold: f64,
    /// Temperature of the first pass over all concepts.
    pub tau: f64,
    /// Temperature of the second pass over the kept concepts.
    pub denoised_tau: f64,
}

impl DenoiseReport {
    pub fn n(&self) -> usize {
        self.frequencies.iter().sum()
    }

    pub fn m(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_kept(&self, concept: usize) -> bool {
        self.kept.binary_search(&concept).is_ok()
    }

    /// Human-readable report: a `key = value` header followed by one
    /// tab-separated line per concept.
    pub fn render_text(&self, concept_names: &[String]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# concept denoising report");
        let _ = writeln!(out, "n = {}", self.n());
        let _ = writeln!(out, "m = {}", self.m());
        let _ = writeln!(out, "tau = {}", self.tau);
        let _ = writeln!(out, "lower_threshold = {}", self.lower_threshold);
        let _ = writeln!(out, "upper_threshold = {}", self.upper_threshold);
        let _ = writeln!(out, "kept = {}", self.kept.len());
        let _ = writeln!(out, "denoised_tau = {}", self.denoised_tau);
        let _ = writeln!(out, "concept\tfrequency\tstatus");
        for (i, f) in self.frequencies.iter().enumerate() {
            let name = concept_names.get(i).map_or("?", String::as_str);
            let status = if self.is_kept(i) { "kept" } else { "discarded" };
            let _ = writeln!(out, "{name}\t{f}\t{status}");
        }
        out
    }
}

/// Denoises one score matrix with `tau' = tau / m * m'`.
pub fn denoise(s: &ScoreMatrix, tau: f64) -> Result<(DenoiseReport, DistributionMatrix)> {
    let (report, mut dists) =
        denoise_many(std::slice::from_ref(s), tau, DenoisedTemperature::Rescale)?;
    Ok((report, dists.pop().expect("one input, one output")))
}

/// Denoises one or more score matrices over the same images and concepts
/// (one per prompt template). Frequencies are counted on the mean of the
/// per-template distributions so every template keeps the same concepts.
pub fn denoise_many(
    scores: &[ScoreMatrix],
    tau: f64,
    second_pass: DenoisedTemperature,
) -> Result<(DenoiseReport, Vec<DistributionMatrix>)> {
    check_tau(tau)?;
    let first = scores
        .first()
        .ok_or_else(|| Error::InvalidArgument("no score matrices to denoise".into()))?;
    let (n, m) = (first.n(), first.m());
    for s in scores {
        if s.n() != n || s.concept_names() != first.concept_names() {
            return Err(Error::Shape(
                "template score matrices must share images and concept names".into(),
            ));
        }
    }

    let mut mean = DenseMatrix::zeros(n, m);
    for s in scores {
        let d = concept_distributions(s, tau)?;
        for (acc, &p) in mean.as_mut_slice().iter_mut().zip(d.dist().as_slice()) {
            *acc += p;
        }
    }
    // argmax is unaffected by the 1/len scale, so the sum suffices
    let frequencies = frequencies_of(&mean);
    let mask = discard_mask(&frequencies, n, m);
    let kept: Vec<usize> = (0..m).filter(|&i| mask[i]).collect();
    if kept.len() < 2 {
        return Err(Error::TooFewConcepts {
            kept: kept.len(),
            total: m,
        });
    }

    let denoised_tau = match second_pass {
        DenoisedTemperature::Rescale => tau / m as f64 * kept.len() as f64,
        DenoisedTemperature::Keep => tau,
    };
    let dists = scores
        .iter()
        .map(|s| concept_distributions(&s.restrict_concepts(&kept)?, denoised_tau))
        .collect::<Result<Vec<_>>>()?;

    let (lower_threshold, upper_threshold) = thresholds(n, m);
    let report = DenoiseReport {
        kept,
        frequencies,
        lower_threshold,
        upper_threshold,
        tau,
        denoised_tau,
    };
    Ok((report, dists))
}

/// Where pairwise similarities come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityMode {
    /// Cosine between denoised concept distributions.
    Concept,
    /// Cosine between distributions over the full concept set.
    ConceptNoDenoise,
    /// Cosine between raw feature vectors.
    FeatureCosine,
}

impl SimilarityMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SimilarityMode::Concept => "concept",
            SimilarityMode::ConceptNoDenoise => "concept-no-denoise",
            SimilarityMode::FeatureCosine => "feature-cosine",
        }
    }
}

impl std::str::FromStr for SimilarityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concept" => Ok(SimilarityMode::Concept),
            "concept-no-denoise" => Ok(SimilarityMode::ConceptNoDenoise),
            "feature-cosine" => Ok(SimilarityMode::FeatureCosine),
            other => Err(Error::InvalidArgument(format!(
                "unknown similarity mode {other:?} (expected concept, concept-no-denoise or feature-cosine)"
            ))),
        }
    }
}

/// Similarity provider. Payload rows are stored unit-normalized so a block
/// entry is a plain dot product, averaged over payloads when several
/// template distributions are supplied.
#[derive(Debug, Clone)]
pub struct SimilaritySource {
    mode: SimilarityMode,
    units: Vec<DenseMatrix>,
}

fn unit_rows(m: &DenseMatrix) -> Result<DenseMatrix> {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let len = norm(row);
        if !(len > 0.0 && len.is_finite()) {
            return Err(Error::ZeroNorm { row: i });
        }
        row.iter_mut().for_each(|v| *v /= len);
    }
    Ok(out)
}

impl SimilaritySource {
    /// Concept-mode source from one or more distribution matrices.
    pub fn concept(mode: SimilarityMode, dists: &[DistributionMatrix]) -> Result<Self> {
        if mode == SimilarityMode::FeatureCosine {
            return Err(Error::InvalidArgument(
                "feature-cosine similarity needs a feature matrix".into(),
            ));
        }
        let first = dists
            .first()
            .ok_or_else(|| Error::InvalidArgument("no distribution matrices".into()))?;
        if dists
            .iter()
            .any(|d| d.n() != first.n() || d.m() != first.m())
        {
            return Err(Error::Shape(
                "distribution matrices must share image and concept counts".into(),
            ));
        }
        let units = dists
            .iter()
            .map(|d| unit_rows(d.dist()))
            .collect::<Result<Vec<_>>>()?;
        Ok(SimilaritySource { mode, units })
    }

    pub fn feature_cosine(features: &FeatureMatrix) -> Result<Self> {
        Ok(SimilaritySource {
            mode: SimilarityMode::FeatureCosine,
            units: vec![unit_rows(features.features())?],
        })
    }

    pub fn mode(&self) -> SimilarityMode {
        self.mode
    }

    pub fn n(&self) -> usize {
        self.units[0].rows()
    }

    pub fn payload_count(&self) -> usize {
        self.units.len()
    }

    /// Similarity of a single pair.
    pub fn pair(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 1.0;
        }
        let sum: f64 = self.units.iter().map(|u| dot(u.row(i), u.row(j))).sum();
        let (lo, hi) = match self.mode {
            SimilarityMode::FeatureCosine => (-1.0, 1.0),
            _ => (0.0, 1.0),
        };
        (sum / self.units.len() as f64).clamp(lo, hi)
    }
}

/// Dense `rows.len() x cols.len()` block of pairwise similarities.
pub fn similarity_block(
    src: &SimilaritySource,
    rows: &[usize],
    cols: &[usize],
) -> Result<DenseMatrix> {
    let n = src.n();
    if let Some(&bad) = rows.iter().chain(cols).find(|&&i| i >= n) {
        return Err(Error::InvalidArgument(format!(
            "index {bad} out of range for {n} images"
        )));
    }
    let mut block = DenseMatrix::zeros(rows.len(), cols.len());
    for (a, &i) in rows.iter().enumerate() {
        let out = block.row_mut(a);
        for (b, &j) in cols.iter().enumerate() {
            out[b] = src.pair(i, j);
        }
    }
    Ok(block)
}

/// Builds a similarity source straight from template score matrices,
/// denoising first in [`SimilarityMode::Concept`].
pub fn source_from_scores(
    scores: &[ScoreMatrix],
    mode: SimilarityMode,
    temperature: Temperature,
    second_pass: DenoisedTemperature,
) -> Result<(SimilaritySource, Option<DenoiseReport>)> {
    let m = scores
        .first()
        .ok_or_else(|| Error::InvalidArgument("no score matrices".into()))?
        .m();
    let tau = temperature.resolve(m);
    match mode {
        SimilarityMode::Concept => {
            let (report, dists) = denoise_many(scores, tau, second_pass)?;
            Ok((SimilaritySource::concept(mode, &dists)?, Some(report)))
        }
        SimilarityMode::ConceptNoDenoise => {
            let dists = scores
                .iter()
                .map(|s| concept_distributions(s, tau))
                .collect::<Result<Vec<_>>>()?;
            Ok((SimilaritySource::concept(mode, &dists)?, None))
        }
        SimilarityMode::FeatureCosine => Err(Error::InvalidArgument(
            "feature-cosine similarity is built from features, not scores".into(),
        )),
    }
}
