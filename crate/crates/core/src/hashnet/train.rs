//! Mini-batch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conceptsim::{similarity_block, SimilaritySource};
use crate::datastore::FeatureMatrix;
use crate::error::{Error, Result};
use crate::hashnet::head::backward_from_trace;
use crate::hashnet::{
    forward_trace, init_params, loss_and_grad, sgd_step, HashHeadParams, SgdState, TrainConfig,
};

/// Mean loss terms over the batches of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    pub total: f64,
    pub l2: f64,
    pub contrastive: f64,
    pub quant: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: HashHeadParams,
    pub history: Vec<EpochStats>,
}

/// Trains a head on `features` against similarities from `src`.
///
/// Each epoch reshuffles the images and runs `floor(n / batch)` batches;
/// the remainder is dropped. Weights come from `init_params(cfg.seed)`,
/// the shuffle from stream 1 of the same seed.
pub fn train(
    features: &FeatureMatrix,
    src: &SimilaritySource,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = features.n();
    if src.n() != n {
        return Err(Error::Shape(format!(
            "{n} feature rows but the similarity source covers {} images",
            src.n()
        )));
    }
    let mut params = init_params(features.d(), cfg.hidden, cfg.k, cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { params, history });
    }
    if n < cfg.batch {
        return Err(Error::InvalidArgument(format!(
            "batch size {} exceeds the {n} training images",
            cfg.batch
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut state = SgdState::new(&params);
    let mut order: Vec<usize> = (0..n).collect();
    let batches = n / cfg.batch;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        for b in 0..batches {
            let idx = &order[b * cfg.batch..(b + 1) * cfg.batch];
            let x = features.features().select_rows(idx);
            let q = similarity_block(src, idx, idx)?;
            let trace = forward_trace(&params, &x)?;
            let (lb, dz) = match loss_and_grad(&trace.z, &q, cfg) {
                Ok(v) => v,
                Err(Error::ZeroNorm { .. }) => {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: b + 1,
                    })
                }
                Err(e) => return Err(e),
            };
            if !lb.total.is_finite() || !dz.all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                });
            }
            let grads = backward_from_trace(&params, &x, &trace, &dz)?;
            sgd_step(&mut params, &grads, &mut state, cfg)?;
            if !params.all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b + 1,
                });
            }
            sums[0] += lb.total;
            sums[1] += lb.l2_term;
            sums[2] += lb.contrastive_term;
            sums[3] += lb.quant_term;
        }
        let nb = batches as f64;
        let stats = EpochStats {
            epoch,
            total: sums[0] / nb,
            l2: sums[1] / nb,
            contrastive: sums[2] / nb,
            quant: sums[3] / nb,
        };
        log::debug!(
            "epoch {epoch}: loss {:.6} (l2 {:.6}, contrastive {:.6}, quant {:.6})",
            stats.total,
            stats.l2,
            stats.contrastive,
            stats.quant
        );
        history.push(stats);
    }
    Ok(TrainOutcome { params, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conceptsim::SimilarityMode;
    use crate::datastore::DistributionMatrix;
    use crate::hashnet::{backward, forward, loss};
    use crate::matrix::DenseMatrix;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// `clusters` separable Gaussian blobs with matching one-hot-ish
    /// concept distributions.
    fn toy(clusters: usize, per: usize, d: usize, seed: u64) -> (FeatureMatrix, SimilaritySource) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f64>> = (0..clusters)
            .map(|_| {
                (0..d)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let mut feats = Vec::new();
        let mut dist = Vec::new();
        for c in 0..clusters {
            for _ in 0..per {
                feats.push(
                    centers[c]
                        .iter()
                        .map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal))
                        .collect::<Vec<f64>>(),
                );
                let mut row = vec![0.02 / (clusters - 1) as f64; clusters];
                row[c] = 0.98;
                dist.push(row);
            }
        }
        let names = (0..clusters).map(|i| format!("c{i}")).collect();
        let dm = DistributionMatrix::new(names, DenseMatrix::from_rows(&dist).unwrap()).unwrap();
        (
            FeatureMatrix::new(DenseMatrix::from_rows(&feats).unwrap()).unwrap(),
            SimilaritySource::concept(SimilarityMode::Concept, &[dm]).unwrap(),
        )
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            k: 16,
            hidden: 32,
            batch: 16,
            epochs: 10,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases_on_separable_data() {
        let (f, src) = toy(4, 20, 8, 1);
        let out = train(&f, &src, &small_cfg()).unwrap();
        assert_eq!(out.history.len(), 10);
        assert!(
            out.history[9].total < out.history[0].total,
            "{:?}",
            out.history
        );
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (f, src) = toy(3, 5, 4, 2);
        let cfg = TrainConfig {
            epochs: 0,
            ..small_cfg()
        };
        let out = train(&f, &src, &cfg).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.params, init_params(4, cfg.hidden, cfg.k, cfg.seed));
    }

    #[test]
    fn deterministic() {
        let (f, src) = toy(3, 12, 6, 4);
        let cfg = TrainConfig {
            epochs: 3,
            batch: 8,
            ..small_cfg()
        };
        let a = train(&f, &src, &cfg).unwrap();
        let b = train(&f, &src, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let (f, _) = toy(3, 6, 4, 5);
        let (_, src) = toy(3, 5, 4, 5);
        assert!(matches!(
            train(&f, &src, &small_cfg()),
            Err(Error::Shape(_))
        ));
        let (f, src) = toy(2, 4, 4, 5);
        assert!(train(&f, &src, &small_cfg()).is_err());
    }

    #[test]
    fn exploding_learning_rate_is_reported() {
        let (f, src) = toy(4, 20, 8, 1);
        let cfg = TrainConfig {
            lr: 1e300,
            ..small_cfg()
        };
        assert!(matches!(
            train(&f, &src, &cfg),
            Err(Error::NonFiniteLoss { epoch: 1, .. })
        ));
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let (f, src) = toy(3, 4, 5, 9);
        let cfg = TrainConfig {
            k: 6,
            hidden: 7,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = init_params(5, 7, 6, 11);
        // non-zero biases so the check also covers them
        for b in p.b1.iter_mut().chain(p.b2.iter_mut()) {
            *b = rng.random_range(-0.1..0.1);
        }
        let idx: Vec<usize> = (0..12).collect();
        let x = f.features().select_rows(&idx);
        let q = similarity_block(&src, &idx, &idx).unwrap();
        let objective =
            |p: &HashHeadParams| loss(&forward(p, &x).unwrap(), &q, &cfg).unwrap().total;
        let z = forward(&p, &x).unwrap();
        let dz = crate::hashnet::loss_grad(&z, &q, &cfg).unwrap();
        let g = backward(&p, &x, &dz).unwrap();
        let h = 1e-5;
        let mut max_err: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for b in 0..4 {
            for i in 0..p.blocks()[b].len() {
                let mut plus = p.clone();
                plus.blocks_mut()[b][i] += h;
                let mut minus = p.clone();
                minus.blocks_mut()[b][i] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = g.blocks()[b][i];
                max_err = max_err.max((fd - an).abs());
                scale = scale.max(fd.abs()).max(an.abs());
            }
        }
        assert!(max_err / scale < 1e-4, "{max_err} / {scale}");
    }
}
