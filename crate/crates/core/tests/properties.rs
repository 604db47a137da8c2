mod common;

use advlora::adapter::{AdapterSet, LayerId, LoraAdapter, Tower};
use advlora::attack::{self, AttackSpec};
use advlora::dataset::{generate, DatasetSplit};
use advlora::encoder::{similarity_matrix, DualEncoder};
use advlora::eval::{recall_at_k, reports_from_similarity, RECALL_KS};
use advlora::kmeans::{kmeans, KMeansParams};
use advlora::{rng, ArchConfig, GeneratorParams, Tensor};
use common::*;
use proptest::prelude::*;

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Tensor> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tape_gradients_match_finite_differences(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let graph = loop {
            let g = RandomGraph::sample(&mut r);
            if g.build(&g.leaves).is_ok() && !g.near_kink(1e-4) {
                break g;
            }
        };
        let err = gradient_check(&graph, 1e-6, 1e-3);
        prop_assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn attacks_stay_in_budget_and_range(
        v in matrix(1..=3, 1..=6).prop_map(|t| t.map(|x| (x + 3.0) / 6.0)),
        eps in 0.0f64..0.2,
        xi in 1e-3f64..0.1,
        steps in 1usize..4,
        family in 0u8..3,
        seed in any::<u64>(),
    ) {
        let spec = match family {
            0 => AttackSpec::fgsm(eps),
            1 => AttackSpec::bim(eps, xi, steps),
            _ => AttackSpec { random_start: true, ..AttackSpec::pgd(eps, xi, steps) },
        };
        // pushes every coordinate away from 0.3
        let objective = |x: &Tensor| -> advlora::Result<(f64, Tensor)> {
            Ok((x.data().iter().map(|a| (a - 0.3).powi(2)).sum(), x.map(|a| 2.0 * (a - 0.3))))
        };
        let adv = attack::run(&objective, &v, &spec, &mut rng::stream(seed, rng::ATTACK)).unwrap();
        for (a, b) in v.data().iter().zip(adv.v_adv.data()) {
            prop_assert!((b - a).abs() <= eps, "|{b} - {a}| > {eps}");
            prop_assert!((0.0..=1.0).contains(b));
        }
        prop_assert!(adv.delta.bitwise_eq(&adv.v_adv.sub(&v).unwrap()));
    }

    #[test]
    fn recall_is_monotone_and_bounded(sim in matrix(10..=14, 10..=14).prop_filter("square", |t| t.rows() == t.cols())) {
        let reps = reports_from_similarity(&sim, "m", "natural", 0).unwrap();
        for rep in &reps {
            let values: Vec<f64> = RECALL_KS.iter().map(|&k| rep.recall(k)).collect();
            prop_assert!(values.windows(2).all(|p| p[0] <= p[1]));
            prop_assert!(values.iter().all(|x| (0.0..=1.0).contains(x)));
            prop_assert!((rep.r_mean - values.iter().sum::<f64>() / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn recall_is_invariant_to_joint_permutation(sim in matrix(6..=6, 6..=6), perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        // distinct values so ties cannot depend on order
        let sim = Tensor::matrix(6, 6, sim.data().iter().enumerate().map(|(i, x)| x + i as f64 * 1e-9).collect()).unwrap();
        let permuted = Tensor::matrix(6, 6, (0..36).map(|e| sim.get(perm[e / 6], perm[e % 6])).collect()).unwrap();
        for k in 1..=6 {
            prop_assert_eq!(recall_at_k(&sim, k).unwrap(), recall_at_k(&permuted, k).unwrap());
        }
    }

    #[test]
    fn kmeans_invariants_and_scale_equivariance(w in matrix(3..=10, 1..=4), k in 1usize..=3, c in 0.1f64..10.0, seed in any::<u64>()) {
        let k = k.min(w.rows());
        let p = KMeansParams::default();
        let res = kmeans(&w, k, &p, &mut rng::stream(seed, "k")).unwrap();
        for i in 0..w.rows() {
            let row = res.distances.row(i);
            prop_assert!(row.iter().all(|&d| d >= 0.0));
            let best = (0..k).fold(0, |b, j| if row[j] < row[b] { j } else { b });
            prop_assert_eq!(res.assignment[i], best);
        }
        prop_assert!(res.objective_history.windows(2).all(|h| h[1] <= h[0] * (1.0 + 1e-12)));

        let scaled = kmeans(&w.scale(c), k, &p, &mut rng::stream(seed, "k")).unwrap();
        prop_assert_eq!(&res.assignment, &scaled.assignment);
        for (a, b) in res.distances.data().iter().zip(scaled.distances.data()) {
            prop_assert!((a * c - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn adapter_containers_round_trip(k in 1usize..4, alpha in -2.0f64..2.0, trainable in any::<bool>(), seed in any::<u64>()) {
        let mut r = rng::stream(seed, "rt");
        let mut ad = LoraAdapter::standard(LayerId { tower: Tower::Text, index: 2 }, 5, 4, k, 0.1, &mut r).unwrap();
        ad.alpha = alpha;
        ad.alpha_trainable = trainable;
        ad.b = ad.b.map(|_| alpha * 0.5);
        let set = AdapterSet { adapters: vec![ad] };
        prop_assert_eq!(AdapterSet::from_bytes(&set.to_bytes()).unwrap(), set);
    }

    #[test]
    fn dataset_round_trip_and_truncation(seed in any::<u64>(), cut in 0usize..200) {
        let params = GeneratorParams {
            num_classes: 3,
            d_latent: 2,
            d_v: 4,
            d_w: 3,
            n_train: 5,
            n_val: 2,
            n_test: 2,
            ..GeneratorParams::default()
        };
        let ds = generate(&params, seed).unwrap();
        let bytes = ds.train.to_bytes();
        prop_assert_eq!(&DatasetSplit::from_bytes(&bytes).unwrap(), &ds.train);
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(DatasetSplit::from_bytes(&bytes[..cut]).is_err());
    }

    #[test]
    fn embeddings_are_unit_norm(seed in any::<u64>(), batch in matrix(2..=5, 6..=6).prop_map(|t| t.map(|x| (x + 3.0) / 6.0))) {
        let arch = ArchConfig { d_v: 6, d_w: 5, hidden: 7, d_emb: 3 };
        let model = DualEncoder::init(&arch, 0.07, seed).unwrap();
        let z = model.vision.encode(&batch, &[]).unwrap();
        for i in 0..z.rows() {
            let n = z.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
        }
        let sim = similarity_matrix(&z, &z).unwrap();
        prop_assert!(sim.data().iter().all(|s| (-1.0..=1.0).contains(s)));
    }
}
