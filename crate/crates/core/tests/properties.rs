#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wsfc_core::synthgen::{generate_corpus, GeneratorSpec};
use wsfc_core::trainer::distribute_residuals;
use wsfc_core::wcg::weight_from_sigmoid;
use wsfc_core::*;

fn recovery_spec() -> GeneratorSpec {
    GeneratorSpec::load(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/recovery.toml")).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_stay_in_open_interval(seed in any::<u64>(), range in 0.01f64..200.0, bits in prop::collection::vec(0u8..2, 5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = DenseNet::random_in(&[5, 8, 1], OutputActivation::Sigmoid, range, &mut rng).unwrap();
        let ctx: Vec<f64> = bits.iter().map(|&b| f64::from(b)).collect();
        let w = weight_from_sigmoid(net.forward(&ctx).unwrap()[0]);
        prop_assert!(w > 0.0 && w < 2.0, "{}", w);
    }

    #[test]
    fn corpus_round_trips(seed in any::<u64>(), n in 1usize..12, sigma in 0.0f64..2.0) {
        let mut spec = recovery_spec();
        spec.seed = seed;
        spec.n_utterances = n;
        spec.noise_sigma = sigma;
        spec.nucleus_probability = 0.7;
        let (corpus, truth) = generate_corpus(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.wsfc");
        save_corpus(&corpus, &path).unwrap();
        prop_assert_eq!(load_corpus(&path).unwrap(), corpus);
        truth.save(dir.path().join("gt")).unwrap();
        prop_assert_eq!(GroundTruth::load(dir.path().join("gt")).unwrap(), truth);
    }

    #[test]
    fn targets_telescope(seed in any::<u64>(), model_seed in any::<u64>()) {
        let mut spec = recovery_spec();
        spec.seed = seed;
        spec.n_utterances = 5;
        let (corpus, _) = generate_corpus(&spec).unwrap();
        let model = ModelSet::new(&corpus.registry, ContextMode::Overlap, &spec.model_config(), model_seed).unwrap();
        for u in &corpus.utterances {
            let parts = decompose(&model, u).unwrap();
            let targets = distribute_residuals(&model, u).unwrap();
            let mut sum = vec![[0.0; 4]; u.len()];
            for (p, t) in parts.iter().zip(&targets) {
                for (k, f) in t.iter().enumerate() {
                    for c in 0..4 {
                        sum[p.start + k][c] += f.to_array()[c];
                    }
                }
            }
            // the attitude covers every unit, so every unit telescopes
            for (s, unit) in sum.iter().zip(&u.units) {
                for (x, y) in s.iter().zip(unit.observed.to_array()) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn split_partitions_corpus(n in 3usize..60, seed in any::<u64>()) {
        let mut spec = recovery_spec();
        spec.n_utterances = n;
        let (corpus, _) = generate_corpus(&spec).unwrap();
        let (a, b, c) = split_corpus(&corpus, (0.7, 0.15, 0.15), seed).unwrap();
        prop_assert_eq!(a.len() + b.len() + c.len(), n);
        let mut ids: Vec<_> = a.utterances.iter().chain(&b.utterances).chain(&c.utterances).map(|u| u.id.clone()).collect();
        ids.sort();
        let mut all: Vec<_> = corpus.utterances.iter().map(|u| u.id.clone()).collect();
        all.sort();
        prop_assert_eq!(ids, all);
    }
}

#[test]
fn generation_is_independent_of_thread_count() {
    let spec = recovery_spec();
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| generate_corpus(&spec).unwrap());
    let b = four.install(|| generate_corpus(&spec).unwrap());
    assert_eq!(a, b);
}

#[test]
fn training_is_independent_of_thread_count() {
    let mut spec = recovery_spec();
    spec.n_utterances = 60;
    let (corpus, _) = generate_corpus(&spec).unwrap();
    let (train, val, _) = split_corpus(&corpus, (0.7, 0.15, 0.15), 3).unwrap();
    let cfg = TrainingConfig {
        max_iterations: 2,
        inner_epochs: 3,
        batch_size: 16,
        ..TrainingConfig::default()
    };
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let m = ModelSet::new(&corpus.registry, ContextMode::Attitude, &spec.model_config(), 1).unwrap();
            analysis_by_synthesis(m, &train, &val, &cfg).unwrap().0
        })
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let spec = recovery_spec();
    let (corpus, _) = generate_corpus(&GeneratorSpec {
        n_utterances: 10,
        ..spec.clone()
    })
    .unwrap();
    let m = ModelSet::new(&corpus.registry, ContextMode::Emphasis, &spec.model_config(), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    save_checkpoint(&m, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, m);
    for u in &corpus.utterances {
        assert_eq!(synthesize(&back, u).unwrap(), synthesize(&m, u).unwrap());
    }
}
