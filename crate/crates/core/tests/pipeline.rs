use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use semhash::conceptsim::{source_from_scores, DenoisedTemperature, SimilarityMode, Temperature};
use semhash::datastore::{
    read_codes, read_distribution_matrix, read_feature_matrix, read_labels, read_score_matrix,
    write_codes, write_distribution_matrix, write_feature_matrix, write_labels, write_score_matrix,
    FeatureMatrix, LabelTable, PackedCodeSet, ScoreMatrix,
};
use semhash::eval::{average_precision, map_at_n, pr_curve_hamming, PrAveraging};
use semhash::hamming::binarize;
use semhash::hashnet::{forward, read_model, train, write_model, TrainConfig};
use semhash::DenseMatrix;

struct Clusters {
    scores: ScoreMatrix,
    features: FeatureMatrix,
    labels: LabelTable,
}

fn clusters(c: usize, per: usize, d: usize, seed: u64) -> Clusters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let centers: Vec<Vec<f64>> = (0..c).map(|_| (0..d).map(|_| normal()).collect()).collect();
    let (mut f, mut s, mut l) = (Vec::new(), Vec::new(), Vec::new());
    for (ci, center) in centers.iter().enumerate() {
        for _ in 0..per {
            f.push(
                center
                    .iter()
                    .map(|v| v + 0.05 * normal())
                    .collect::<Vec<_>>(),
            );
            s.push(
                (0..c + 2)
                    .map(|j| if j == ci { 1.0 } else { 0.0 } + 0.05 * normal())
                    .collect::<Vec<_>>(),
            );
            l.push(vec![ci as u32]);
        }
    }
    let names = (0..c + 2).map(|j| format!("concept {j}")).collect();
    Clusters {
        scores: ScoreMatrix::new(names, DenseMatrix::from_rows(&s).unwrap()).unwrap(),
        features: FeatureMatrix::new(DenseMatrix::from_rows(&f).unwrap()).unwrap(),
        labels: LabelTable::new(l).unwrap(),
    }
}

#[test]
fn files_survive_a_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = clusters(3, 5, 4, 1);
    write_score_matrix(dir.path().join("s.uhsm"), &data.scores).unwrap();
    write_feature_matrix(dir.path().join("f.uhsf"), &data.features).unwrap();
    write_labels(dir.path().join("l.tsv"), &data.labels).unwrap();

    let s = read_score_matrix(dir.path().join("s.uhsm")).unwrap();
    assert_eq!(s.concept_names(), data.scores.concept_names());
    for (a, b) in s
        .scores()
        .as_slice()
        .iter()
        .zip(data.scores.scores().as_slice())
    {
        assert_eq!(*a, *b as f32 as f64);
    }
    assert_eq!(
        read_feature_matrix(dir.path().join("f.uhsf")).unwrap().n(),
        15
    );
    assert_eq!(read_labels(dir.path().join("l.tsv")).unwrap(), data.labels);

    let (src, report) = source_from_scores(
        &[s],
        SimilarityMode::Concept,
        Temperature::default(),
        DenoisedTemperature::default(),
    )
    .unwrap();
    let report = report.unwrap();
    assert_eq!(report.kept, vec![0, 1, 2]);
    assert_eq!(src.n(), 15);
}

#[test]
fn distribution_file_keeps_rows_stochastic() {
    let dir = tempfile::tempdir().unwrap();
    let data = clusters(4, 6, 3, 2);
    let d = semhash::conceptsim::concept_distributions(&data.scores, 18.0).unwrap();
    write_distribution_matrix(dir.path().join("d.uhsd"), &d).unwrap();
    let back = read_distribution_matrix(dir.path().join("d.uhsd")).unwrap();
    for i in 0..back.n() {
        let sum: f64 = back.dist().row(i).iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn trained_codes_retrieve_their_cluster() {
    let dir = tempfile::tempdir().unwrap();
    let data = clusters(4, 30, 16, 3);
    let (src, _) = source_from_scores(
        std::slice::from_ref(&data.scores),
        SimilarityMode::Concept,
        Temperature::default(),
        DenoisedTemperature::default(),
    )
    .unwrap();
    let cfg = TrainConfig {
        k: 16,
        hidden: 32,
        batch: 40,
        epochs: 20,
        seed: 5,
        ..TrainConfig::default()
    };
    let out = train(&data.features, &src, &cfg).unwrap();
    assert!(out.history.last().unwrap().total < out.history[0].total);

    write_model(dir.path().join("m.uhsw"), &out.params).unwrap();
    let params = read_model(dir.path().join("m.uhsw")).unwrap();
    let codes = binarize(&forward(&params, data.features.features()).unwrap()).unwrap();
    write_codes(dir.path().join("c.uhsb"), &codes).unwrap();
    let codes = read_codes(dir.path().join("c.uhsb")).unwrap();

    let q: Vec<usize> = (0..4).map(|c| c * 30).collect();
    let db: Vec<usize> = (0..120).filter(|i| i % 30 != 0).collect();
    let (qc, dc) = (codes.select(&q), codes.select(&db));
    let (ql, dl) = (data.labels.select(&q), data.labels.select(&db));
    let map = map_at_n(&qc, &ql, &dc, &dl, 29).unwrap();
    assert!(map > 0.9, "MAP@29 = {map}");
    let pr = pr_curve_hamming(&qc, &ql, &dc, &dl, PrAveraging::Micro).unwrap();
    assert_eq!(pr.points[16].recall, 1.0);
}

#[test]
fn map_matches_brute_force_on_random_codes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let k = 16;
    let bits: Vec<Vec<bool>> = (0..50)
        .map(|_| (0..k).map(|_| rng.random_bool(0.5)).collect())
        .collect();
    let labels: Vec<Vec<u32>> = (0..50).map(|_| vec![rng.random_range(0..5)]).collect();
    let codes = PackedCodeSet::from_bits(k, &bits).unwrap();
    let table = LabelTable::new(labels.clone()).unwrap();
    let q = [0usize, 1, 2, 3, 4];
    let db: Vec<usize> = (5..50).collect();

    let mut sum = 0.0;
    for &qi in &q {
        let mut order: Vec<usize> = db.clone();
        let dist = |i: usize| {
            bits[qi]
                .iter()
                .zip(&bits[i])
                .filter(|(a, b)| a != b)
                .count()
        };
        order.sort_by_key(|&i| dist(i));
        let rel: Vec<bool> = order[..20]
            .iter()
            .map(|&i| labels[i] == labels[qi])
            .collect();
        sum += average_precision(&rel);
    }
    let want = sum / q.len() as f64;
    let got = map_at_n(
        &codes.select(&q),
        &table.select(&q),
        &codes.select(&db),
        &table.select(&db),
        20,
    )
    .unwrap();
    assert_eq!(got, want);
}
