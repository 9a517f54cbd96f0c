mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use plab::corpus::FoldPlan;
use plab::dissonance::{
    cross_validate, extract_features, feature_importance, schema_for, train_classifier, ClassLabel,
    ClassifierKind, FeatureConfig, FeatureInfo, FeatureOrigin, FeatureSource, FeatureVector, Hyper,
    Normalization, OutputBlock, OutputKind, Schema, SearchConfig, Tuning,
};
use plab::model::Model;
use plab::tracking::HistoricalProfile;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const DIM: usize = 10;
const PER_CLASS: usize = 100;

fn schema(d: usize) -> Schema {
    Arc::new(
        (0..d)
            .map(|i| FeatureInfo {
                name: format!("x{i}"),
                origin: FeatureOrigin::Output {
                    block: OutputBlock::Feat1,
                    point: 0,
                    index: i,
                },
            })
            .collect(),
    )
}

/// Three unit-variance Gaussian blobs whose centers sit `sep` apart on
/// distinct axes.
fn blobs(sep: f64, seed: u64) -> Vec<FeatureVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = schema(DIM);
    let mut out = Vec::new();
    for label in ClassLabel::ALL {
        for _ in 0..PER_CLASS {
            let mut values: Vec<f64> = (0..DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
            values[label.index()] += sep;
            out.push(FeatureVector {
                fact_id: out.len() as u64,
                values,
                schema: s.clone(),
                label: Some(label),
            });
        }
    }
    out
}

fn plan(n: usize, k: usize) -> FoldPlan {
    FoldPlan {
        k,
        assignments: (0..n as u64)
            .map(|i| (i, (i as usize * 7 + i as usize / 3) % k))
            .collect::<BTreeMap<_, _>>(),
    }
}

/// Cross-validated accuracy of assigning each test point to the closest
/// training-class mean.
fn nearest_centroid_accuracy(data: &[FeatureVector], plan: &FoldPlan) -> f64 {
    let mut correct = 0;
    for fold in 0..plan.k {
        let mut sums = [[0.0; DIM]; 3];
        let mut counts = [0usize; 3];
        for v in data
            .iter()
            .filter(|v| plan.fold_of(v.fact_id) != Some(fold))
        {
            let c = v.label.unwrap().index();
            counts[c] += 1;
            for (s, x) in sums[c].iter_mut().zip(&v.values) {
                *s += x;
            }
        }
        for v in data
            .iter()
            .filter(|v| plan.fold_of(v.fact_id) == Some(fold))
        {
            let dist = |c: usize| -> f64 {
                v.values
                    .iter()
                    .zip(&sums[c])
                    .map(|(x, s)| (x - s / counts[c] as f64).powi(2))
                    .sum()
            };
            let best = (0..3).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
            correct += usize::from(best == v.label.unwrap().index());
        }
    }
    correct as f64 / data.len() as f64
}

#[test]
fn classifiers_match_the_centroid_oracle_on_separable_blobs() {
    let data = blobs(5.0, 1);
    let plan = plan(data.len(), 5);
    let oracle = nearest_centroid_accuracy(&data, &plan);
    assert!(
        oracle >= 0.95,
        "blobs are not separable enough: oracle {oracle}"
    );
    for kind in [ClassifierKind::RandomForest, ClassifierKind::LinearSvm] {
        let cv = cross_validate(
            &data,
            &plan,
            kind,
            &Tuning::Fixed(Hyper::default_for(kind)),
            0,
        )
        .unwrap();
        assert!(
            cv.accuracy_mean >= 0.95,
            "{} accuracy {} (oracle {oracle})",
            kind.name(),
            cv.accuracy_mean
        );
        assert!(
            cv.macro_f1_mean >= 0.95,
            "{} macro-F1 {}",
            kind.name(),
            cv.macro_f1_mean
        );
        let total: usize = cv.confusion.iter().flatten().flatten().sum();
        assert_eq!(total, data.len());
    }
}

#[test]
fn shuffled_labels_fall_to_chance() {
    let mut data = blobs(5.0, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut labels: Vec<_> = data.iter().map(|v| v.label).collect();
    for i in (1..labels.len()).rev() {
        labels.swap(i, rng.random_range(0..=i));
    }
    for (v, l) in data.iter_mut().zip(labels) {
        v.label = l;
    }
    let plan = plan(data.len(), 5);
    for kind in [ClassifierKind::RandomForest, ClassifierKind::LinearSvm] {
        let cv = cross_validate(
            &data,
            &plan,
            kind,
            &Tuning::Fixed(Hyper::default_for(kind)),
            0,
        )
        .unwrap();
        assert!(
            (0.23..=0.43).contains(&cv.accuracy_mean),
            "{} accuracy {} on shuffled labels",
            kind.name(),
            cv.accuracy_mean
        );
    }
}

#[test]
fn importance_concentrates_on_the_only_informative_feature() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = schema(4);
    let data: Vec<FeatureVector> = (0..300)
        .map(|i| {
            let label = ClassLabel::from_index(i % 3);
            let mut values: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
            values[2] = label.index() as f64 + 0.1 * rng.random::<f64>();
            FeatureVector {
                fact_id: i as u64,
                values,
                schema: s.clone(),
                label: Some(label),
            }
        })
        .collect();
    let model =
        train_classifier(&data, &Hyper::default_for(ClassifierKind::RandomForest), 0).unwrap();
    let imp = feature_importance(&model, &s).unwrap();
    let total: f64 = imp.features.iter().map(|(_, v)| v).sum();
    assert!((total - 1.0).abs() < 1e-9);
    let x2 = imp.features.iter().find(|(n, _)| n == "x2").unwrap().1;
    assert!(x2 > 0.9, "informative feature importance {x2}");
}

#[test]
fn training_and_search_are_deterministic() {
    let data = blobs(1.5, 5);
    let plan = plan(data.len(), 3);
    let search = Tuning::Search(SearchConfig {
        draws: 4,
        holdout_fraction: 0.2,
    });
    for kind in [ClassifierKind::RandomForest, ClassifierKind::LinearSvm] {
        let a = cross_validate(&data, &plan, kind, &search, 9).unwrap();
        let b = cross_validate(&data, &plan, kind, &search, 9).unwrap();
        assert_eq!(a, b);
        let h = Hyper::default_for(kind);
        let m1 = train_classifier(&data, &h, 1).unwrap();
        let m2 = train_classifier(&data, &h, 1).unwrap();
        assert_eq!(m1.fingerprint(), m2.fingerprint());
    }
}

#[test]
fn feature_extraction_leaves_the_model_untouched() {
    let (_, facts, config) = common::small_setup(2);
    let model = Model::<f32>::init(config.clone()).unwrap();
    let mut profile = HistoricalProfile::new(&config, Default::default());
    profile
        .hg
        .iter_mut()
        .chain(profile.ha.iter_mut())
        .for_each(|v| *v = 2.0);
    let before = model.fingerprint();
    for source in [
        FeatureSource::both(),
        FeatureSource::Output {
            kind: OutputKind::Concat,
        },
    ] {
        for normalization in [
            Normalization::Raw,
            Normalization::Layer,
            Normalization::Historical,
        ] {
            let fc = FeatureConfig {
                source: source.clone(),
                normalization,
                ..FeatureConfig::default()
            };
            let s = schema_for(&fc, &config);
            for f in facts.iter().take(5) {
                let v = extract_features(&model, f, &fc, Some(&profile), &s).unwrap();
                assert_eq!(v.values.len(), s.len());
                assert!(v.values.iter().all(|x| x.is_finite()));
            }
        }
    }
    assert_eq!(model.fingerprint(), before);
}
