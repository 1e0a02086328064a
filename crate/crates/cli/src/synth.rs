//! Seeded synthetic clusters with matching concept scores and labels.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use semhash::datastore::{
    write_feature_matrix, write_labels, write_score_matrix, FeatureMatrix, LabelTable, ScoreMatrix,
};
use semhash::DenseMatrix;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub clusters: usize,
    pub per_cluster: usize,
    pub concepts: usize,
    pub dim: usize,
    pub noise: f64,
    pub seed: u64,
    /// Points per cluster moved to the query split; 0 writes no split.
    pub holdout: usize,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub scores: ScoreMatrix,
    pub features: FeatureMatrix,
    pub labels: LabelTable,
}

impl SynthData {
    fn select(&self, idx: &[usize]) -> CliResult<SynthData> {
        Ok(SynthData {
            scores: self.scores.select_images(idx)?,
            features: self.features.select_images(idx)?,
            labels: self.labels.select(idx),
        })
    }

    fn write(&self, dir: &Path, prefix: &str) -> CliResult<()> {
        write_score_matrix(dir.join(format!("{prefix}scores.uhsm")), &self.scores)?;
        write_feature_matrix(dir.join(format!("{prefix}features.uhsf")), &self.features)?;
        write_labels(dir.join(format!("{prefix}labels.tsv")), &self.labels)?;
        Ok(())
    }
}

impl SynthSpec {
    fn check(&self) -> CliResult<()> {
        if self.clusters < 2 {
            return Err(CliError::Usage("synth needs at least 2 clusters".into()));
        }
        if self.concepts < self.clusters {
            return Err(CliError::Usage(format!(
                "synth needs at least as many concepts as clusters ({} < {})",
                self.concepts, self.clusters
            )));
        }
        if self.per_cluster == 0 || self.dim == 0 {
            return Err(CliError::Usage(
                "per-cluster count and dimension must be positive".into(),
            ));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(CliError::Usage(format!(
                "noise must be non-negative, got {}",
                self.noise
            )));
        }
        if self.holdout >= self.per_cluster && self.holdout > 0 {
            return Err(CliError::Usage(format!(
                "holdout {} leaves no database points in a cluster of {}",
                self.holdout, self.per_cluster
            )));
        }
        Ok(())
    }

    /// Images are stored cluster-major: cluster `c` owns rows
    /// `c * per_cluster .. (c + 1) * per_cluster`.
    pub fn generate(&self) -> CliResult<SynthData> {
        self.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut normal = || -> f64 { rng.sample(StandardNormal) };

        let mut centers = Vec::with_capacity(self.clusters);
        for _ in 0..self.clusters {
            let mut c: Vec<f64> = (0..self.dim).map(|_| normal()).collect();
            let len = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            c.iter_mut().for_each(|v| *v /= len);
            centers.push(c);
        }

        let n = self.clusters * self.per_cluster;
        let mut features = Vec::with_capacity(n * self.dim);
        let mut scores = Vec::with_capacity(n * self.concepts);
        let mut labels = Vec::with_capacity(n);
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..self.per_cluster {
                features.extend(center.iter().map(|v| v + self.noise * normal()));
                scores.extend((0..self.concepts).map(|j| {
                    let base = if j == c { 1.0 } else { 0.0 };
                    base + self.noise * normal()
                }));
                labels.push(vec![c as u32]);
            }
        }

        let names = (0..self.concepts)
            .map(|j| format!("concept_{j:02}"))
            .collect();
        Ok(SynthData {
            scores: ScoreMatrix::new(names, DenseMatrix::from_vec(n, self.concepts, scores)?)?,
            features: FeatureMatrix::new(DenseMatrix::from_vec(n, self.dim, features)?)?,
            labels: LabelTable::new(labels)?,
        })
    }

    /// `(query, db)` image indices: the first `holdout` points of each
    /// cluster are queries.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let (mut q, mut db) = (Vec::new(), Vec::new());
        for c in 0..self.clusters {
            for p in 0..self.per_cluster {
                let i = c * self.per_cluster + p;
                if p < self.holdout {
                    q.push(i);
                } else {
                    db.push(i);
                }
            }
        }
        (q, db)
    }

    /// Writes `scores.uhsm`, `features.uhsf`, `labels.tsv` and, with a
    /// holdout, the same three files prefixed `query_` and `db_`.
    pub fn write(&self, dir: impl AsRef<Path>) -> CliResult<SynthData> {
        let dir = dir.as_ref();
        let data = self.generate()?;
        std::fs::create_dir_all(dir)?;
        data.write(dir, "")?;
        if self.holdout > 0 {
            let (q, db) = self.split();
            data.select(&q)?.write(dir, "query_")?;
            data.select(&db)?.write(dir, "db_")?;
        }
        Ok(data)
    }
}
