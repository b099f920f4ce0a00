use std::collections::BTreeSet;

use countlab::mcd::{
    apply_strategy, base_split, carve_validation, count_histogram, dataset_labels, replay_split, split_report,
    DatasetSplit, DistributionStats, McdError, SplitProvenance, SplitStrategy, StrategyKind,
};
use countlab::scene::{generate_corpus, generate_dataset, Dataset, SceneSpec};

fn corpus() -> Dataset {
    generate_corpus(&SceneSpec::default(), (3000, 11), (1000, 12)).unwrap()
}

/// Spreads `total` over labels of one parity with a decaying profile.
fn spread(total: usize, labels: &[usize]) -> Vec<(usize, usize)> {
    let w: Vec<f64> = (0..labels.len()).map(|i| 0.6f64.powi(i as i32)).collect();
    let q = countlab::scene::label_quotas(&w, total).unwrap();
    labels.iter().copied().zip(q).collect()
}

/// A label table with the given per-parity sizes for train, validation, test.
fn synthetic_split(sizes: [(usize, usize); 3]) -> (DatasetSplit, Vec<usize>) {
    let odd: Vec<usize> = (1..16).step_by(2).collect();
    let even: Vec<usize> = (0..16).step_by(2).collect();
    let mut labels = Vec::new();
    let mut sets: [Vec<usize>; 3] = Default::default();
    for (s, &(n_odd, n_even)) in sizes.iter().enumerate() {
        for (label, n) in spread(n_odd, &odd).into_iter().chain(spread(n_even, &even)) {
            for _ in 0..n {
                sets[s].push(labels.len());
                labels.push(label);
            }
        }
    }
    let [train, validation, test] = sets;
    let split = DatasetSplit {
        provenance: SplitProvenance {
            dataset_hash: "synthetic".into(),
            val_fraction: 0.1,
            carve_seed: 0,
            strategy: None,
            strategy_seed: 0,
        },
        train,
        validation,
        test,
    };
    (split, labels)
}

fn parity_counts(ids: &[usize], labels: &[usize]) -> (usize, usize) {
    let odd = ids.iter().filter(|&&i| labels[i] % 2 == 1).count();
    (odd, ids.len() - odd)
}

#[test]
fn split_counts_match_published_odd_even_table() {
    let (base, labels) = synthetic_split([(87_289, 137_102), (9_635, 15_292), (23_138, 15_451)]);
    let run = |p: f64| {
        let s = SplitStrategy::new(StrategyKind::OddEven, p).unwrap();
        apply_strategy(&base, &labels, s, 5).unwrap()
    };
    let half = run(50.0);
    let (odd, even) = parity_counts(&half.train, &labels);
    assert_eq!(odd, 87_289);
    assert!(even.abs_diff(68_549) <= 2, "even train at 50%: {even}");

    let ninety = run(90.0);
    let (_, even) = parity_counts(&ninety.train, &labels);
    assert!(even.abs_diff(13_707) <= 5, "even train at 90%: {even}");

    let full = run(100.0);
    assert_eq!(parity_counts(&full.train, &labels), (87_289, 0));
    assert_eq!(parity_counts(&full.validation, &labels), (9_635, 0));
    assert_eq!(parity_counts(&full.test, &labels), (0, 15_451));

    // Even-odd mirrors the parities.
    let s = SplitStrategy::new(StrategyKind::EvenOdd, 100.0).unwrap();
    let mirror = apply_strategy(&base, &labels, s, 5).unwrap();
    assert_eq!(parity_counts(&mirror.train, &labels), (0, 137_102));
    assert_eq!(parity_counts(&mirror.test, &labels), (23_138, 0));
}

#[test]
fn retained_even_train_is_monotone_in_p() {
    let (base, labels) = synthetic_split([(800, 1200), (90, 150), (230, 150)]);
    let mut last = usize::MAX;
    for p in (0..=100).step_by(5) {
        let s = SplitStrategy::new(StrategyKind::OddEven, p as f64).unwrap();
        let out = apply_strategy(&base, &labels, s, 1).unwrap();
        let (_, even) = parity_counts(&out.train, &labels);
        assert!(even <= last, "p={p}: {even} > {last}");
        last = even;
    }
}

#[test]
fn p_zero_is_identity() {
    let d = corpus();
    let base = base_split(&d, 0.1, 3).unwrap();
    let s = SplitStrategy::new(StrategyKind::OddEven, 0.0).unwrap();
    let out = apply_strategy(&base, &dataset_labels(&d), s, 9).unwrap();
    assert_eq!(out.train, base.train);
    assert_eq!(out.validation, base.validation);
    assert_eq!(out.test, base.test);
}

#[test]
fn carve_holds_out_exactly_ten_percent_of_images() {
    let spec = SceneSpec {
        questions_per_image: 1,
        ..SceneSpec::default()
    };
    let d = generate_dataset(&spec, 100, 2).unwrap();
    let images: BTreeSet<u64> = d.triplets.iter().map(|t| t.image_id).collect();
    assert_eq!(images.len(), 100);
    let (train, val) = carve_validation(&d, 0.10, 4).unwrap();
    let val_images: BTreeSet<u64> = val.iter().map(|&i| d.triplets[i].image_id).collect();
    assert_eq!(val_images.len(), 10);
    assert_eq!(train.len() + val.len(), 100);
}

#[test]
fn tiny_fraction_still_holds_out_one_image() {
    let spec = SceneSpec {
        questions_per_image: 1,
        ..SceneSpec::default()
    };
    let d = generate_dataset(&spec, 1000, 2).unwrap();
    let (_, val) = carve_validation(&d, 1e-9, 4).unwrap();
    let val_images: BTreeSet<u64> = val.iter().map(|&i| d.triplets[i].image_id).collect();
    assert_eq!(val_images.len(), 1);
}

#[test]
fn carve_rejects_single_image_and_bad_fraction() {
    let spec = SceneSpec {
        questions_per_image: 1,
        ..SceneSpec::default()
    };
    let d = generate_dataset(&spec, 1, 2).unwrap();
    assert!(matches!(carve_validation(&d, 0.1, 0), Err(McdError::TooFewImages(1))));
    let d = generate_dataset(&spec, 10, 2).unwrap();
    assert!(matches!(
        carve_validation(&d, 1.0, 0),
        Err(McdError::InvalidFraction(_))
    ));
}

#[test]
fn image_disjointness_survives_every_strategy() {
    let d = corpus();
    let labels = dataset_labels(&d);
    let base = base_split(&d, 0.1, 7).unwrap();
    base.check_invariants(&d).unwrap();
    for kind in [StrategyKind::OddEven, StrategyKind::EvenOdd] {
        for p in [0.0, 50.0, 90.0, 100.0] {
            let out = apply_strategy(&base, &labels, SplitStrategy::new(kind, p).unwrap(), 1).unwrap();
            out.check_invariants(&d).unwrap();
            let train_images: BTreeSet<u64> = out.train.iter().map(|&i| d.triplets[i].image_id).collect();
            let val_images: BTreeSet<u64> = out.validation.iter().map(|&i| d.triplets[i].image_id).collect();
            assert!(train_images.is_disjoint(&val_images));
        }
    }
}

#[test]
fn parity_purity_at_full_removal() {
    let d = corpus();
    let labels = dataset_labels(&d);
    let base = base_split(&d, 0.1, 7).unwrap();
    let s = SplitStrategy::new(StrategyKind::OddEven, 100.0).unwrap();
    let out = apply_strategy(&base, &labels, s, 1).unwrap();
    assert!(out.train.iter().chain(&out.validation).all(|&i| labels[i] % 2 == 1));
    assert!(out.test.iter().all(|&i| labels[i].is_multiple_of(2)));
    assert!(!out.test.is_empty());
}

#[test]
fn histogram_of_all_sets_equals_dataset_histogram() {
    let d = corpus();
    let labels = dataset_labels(&d);
    let base = base_split(&d, 0.1, 7).unwrap();
    let mut all: Vec<usize> = base.train.clone();
    all.extend(&base.validation);
    all.extend(&base.test);
    let from_split = count_histogram(&all, &labels, 11).unwrap();
    let mut direct = vec![0usize; 11];
    d.triplets.iter().for_each(|t| direct[t.count] += 1);
    assert_eq!(from_split, direct);
}

#[test]
fn report_coefficients() {
    let d = corpus();
    let labels = dataset_labels(&d);
    let base = base_split(&d, 0.1, 7).unwrap();

    let identity = apply_strategy(
        &base,
        &labels,
        SplitStrategy::new(StrategyKind::OddEven, 0.0).unwrap(),
        1,
    )
    .unwrap();
    let r = split_report(&identity, &d).unwrap();
    for s in [&r.train, &r.validation, &r.test] {
        assert_eq!(s.label_similarity, 1.0);
        assert_eq!(s.token_similarity, 1.0);
        assert_eq!(s.concept_similarity, 1.0);
    }

    let full = apply_strategy(
        &base,
        &labels,
        SplitStrategy::new(StrategyKind::OddEven, 100.0).unwrap(),
        1,
    )
    .unwrap();
    let r = split_report(&full, &d).unwrap();
    assert!(r.train.token_similarity >= 0.97, "{}", r.train.token_similarity);
    assert!(r.train.concept_similarity >= 0.97, "{}", r.train.concept_similarity);
    assert!(r.train.label_similarity < 0.9);
    assert_eq!(r.train.labels.iter().sum::<usize>(), r.train.size);
    for s in [&r.train, &r.validation, &r.test] {
        for c in [s.label_similarity, s.token_similarity, s.concept_similarity] {
            assert!((0.0..=1.0).contains(&c));
        }
    }
}

#[test]
fn replay_from_provenance_reproduces_split_and_report() {
    let d = corpus();
    let base = base_split(&d, 0.1, 21).unwrap();
    let s = SplitStrategy::new(StrategyKind::EvenOdd, 90.0).unwrap();
    let split = apply_strategy(&base, &dataset_labels(&d), s, 33).unwrap();
    let replayed = replay_split(&d, &split.provenance).unwrap();
    assert_eq!(replayed, split);
    let a = split_report(&split, &d).unwrap().to_json().unwrap();
    let b = split_report(&replayed, &d).unwrap().to_json().unwrap();
    assert_eq!(a, b);

    let mut other = d.clone();
    other.triplets.pop();
    other.header.pools[1].len -= 1;
    assert!(matches!(
        replay_split(&other, &split.provenance),
        Err(McdError::HashMismatch { .. })
    ));
}

#[test]
fn split_and_stats_files_round_trip() {
    let d = corpus();
    let base = base_split(&d, 0.1, 21).unwrap();
    let split = apply_strategy(
        &base,
        &dataset_labels(&d),
        SplitStrategy::new(StrategyKind::OddEven, 50.0).unwrap(),
        3,
    )
    .unwrap();
    let text = split.to_json().unwrap();
    let back = DatasetSplit::from_json(&text).unwrap();
    assert_eq!(back, split);
    assert_eq!(back.to_json().unwrap(), text);

    let stats = split_report(&split, &d).unwrap();
    let text = stats.to_json().unwrap();
    let back = DistributionStats::from_json(&text).unwrap();
    assert_eq!(back, stats);
    assert_eq!(back.to_json().unwrap(), text);
}
