mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use hierplace::engine::Tensor;
use hierplace::grid::{GridSpec, HierarchicalVocabulary};
use hierplace::hier_embedding::{average_tensor_slices, make_partition, Method};
use hierplace::trajectories::{split_dataset, split_sizes, Step, TokenizedTrajectory};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vocabulary_layout(seed in any::<u64>()) {
        let spec = GridSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = common::random_cells(&mut rng, &spec, 600);
        let vocab = HierarchicalVocabulary::build(cells.iter().copied(), &spec).unwrap();
        common::check_layout(&vocab, &cells).map_err(TestCaseError::fail)?;
        // Input order does not matter.
        let mut shuffled = cells.clone();
        shuffled.reverse();
        prop_assert_eq!(HierarchicalVocabulary::build(shuffled, &spec).unwrap(), vocab.clone());
        let rebuilt = HierarchicalVocabulary::from_ordered(vocab.tokens().to_vec(), &spec).unwrap();
        prop_assert_eq!(rebuilt, vocab);
    }

    #[test]
    fn averaging_matches_brute_force(seed in any::<u64>(), d in prop::sample::select(vec![8usize, 16, 24, 64]),
                                     method in prop::sample::select(Method::ALL.to_vec())) {
        let spec = GridSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Arc::new(HierarchicalVocabulary::build(common::random_cells(&mut rng, &spec, 300), &spec).unwrap());
        let partition = make_partition(method, d, spec.num_levels()).unwrap();
        let original = Tensor::from_fn(vocab.len(), d, |_, _| rng.random_range(-3.0..3.0));
        let mut bulk = original.clone();
        average_tensor_slices(&mut bulk, &partition, &vocab).unwrap();
        let oracle = common::brute_force_average(&original, &partition, &vocab);
        prop_assert!(bulk.data() == oracle.data());
        for r in 0..vocab.len() {
            prop_assert_eq!(&bulk.row(r)[partition.place_columns()], &original.row(r)[partition.place_columns()]);
        }
        let once = bulk.clone();
        average_tensor_slices(&mut bulk, &partition, &vocab).unwrap();
        prop_assert!(bulk.data() == once.data());
    }

    #[test]
    fn split_partitions_trajectories(n in 10usize..3000, a in 0.1f64..10.0, b in 0.0f64..3.0, c in 0.0f64..3.0,
                                     seed in any::<u64>()) {
        let trajs: Vec<TokenizedTrajectory> = (0..n as u32)
            .map(|i| TokenizedTrajectory {
                steps: vec![Step { place: i, dow: 0, tod: 0, dur: 0 }; 2],
            })
            .collect();
        let ratios = [a, b, c];
        let split = split_dataset(trajs, ratios, seed).unwrap();
        let total = a + b + c;
        let sizes = [split.train.len(), split.validation.len(), split.test.len()];
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        for (size, r) in sizes.iter().zip(ratios) {
            prop_assert!((*size as f64 - n as f64 * r / total).abs() <= 1.0, "{:?} for {:?}", sizes, ratios);
        }
        let (t, v, s) = split_sizes(n, ratios);
        prop_assert_eq!([t, v, s], sizes);
        let ids: BTreeSet<u32> = split.train.iter().chain(&split.validation).chain(&split.test)
            .map(|t| t.steps[0].place).collect();
        prop_assert_eq!(ids.len(), n);
    }
}

#[test]
fn split_is_seeded() {
    let trajs: Vec<TokenizedTrajectory> = (0..100u32)
        .map(|i| TokenizedTrajectory {
            steps: vec![
                Step {
                    place: i,
                    dow: 0,
                    tod: 0,
                    dur: 0
                };
                3
            ],
        })
        .collect();
    let ratios = [0.8, 0.1, 0.1];
    let a = split_dataset(trajs.clone(), ratios, 5).unwrap();
    let b = split_dataset(trajs.clone(), ratios, 5).unwrap();
    let c = split_dataset(trajs, ratios, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.test, c.test);
}
