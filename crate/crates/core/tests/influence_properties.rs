use fedc2i::aggregation::{
    aggregate_classifier, aggregate_repr, fedavg_aggregate, weighted_average, AggregationWeights,
    ClassifierRule,
};
use fedc2i::influence::{
    class_loss_matrix, client_loss_vector, influence_matrix, influence_vector, loo_class_vector,
    loo_repr, InfluenceMatrix, InfluenceVector, LossMatrix, LossVector,
};
use fedc2i::model::{Activation, Architecture, Batch, Dense, ModelParams};
use fedc2i::rng::{stream, Purpose};
use ndarray::{array, Array2};
use proptest::prelude::*;

fn lv(values: Vec<f64>) -> LossVector {
    LossVector {
        values,
        probe_id: 0,
    }
}

fn arch(d: usize, h: usize, c: usize) -> Architecture {
    Architecture {
        input_dim: d,
        hidden: vec![h],
        classes: c,
        activation: Activation::Tanh,
    }
}

fn models(n: usize, seed: u64) -> Vec<ModelParams> {
    (0..n)
        .map(|i| ModelParams::init(&arch(3, 4, 3), &mut stream(seed, Purpose::Init, i, 0)))
        .collect()
}

fn losses(min_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..10.0, min_len..8)
}

proptest! {
    #[test]
    fn weights_are_a_distribution(ls in losses(1), gamma in 0.0f64..12.0) {
        let w = influence_vector(&lv(ls), gamma).unwrap();
        prop_assert!(w.weights().iter().all(|&v| v >= 0.0));
        prop_assert!((w.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn larger_loss_gets_larger_weight(ls in losses(2), gamma in 0.1f64..10.0) {
        let w = influence_vector(&lv(ls.clone()), gamma).unwrap();
        for i in 0..ls.len() {
            for j in 0..ls.len() {
                if ls[i] > ls[j] * (1.0 + 1e-9) {
                    prop_assert!(w.weights()[i] > w.weights()[j], "{:?} -> {:?}", ls, w.weights());
                }
            }
        }
    }

    #[test]
    fn scaling_losses_changes_nothing(ls in losses(1), gamma in 0.0f64..10.0, k in 1e-3f64..1e3) {
        let a = influence_vector(&lv(ls.clone()), gamma).unwrap();
        let b = influence_vector(&lv(ls.iter().map(|l| l * k).collect()), gamma).unwrap();
        for (x, y) in a.weights().iter().zip(b.weights()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn temperature_sharpens_the_maximum(ls in losses(2), g1 in 0.0f64..8.0, dg in 0.0f64..8.0) {
        let maxw = |g: f64| influence_vector(&lv(ls.clone()), g).unwrap().weights().iter().cloned().fold(0.0, f64::max);
        prop_assert!(maxw(g1 + dg) >= maxw(g1) - 1e-15);
    }

    #[test]
    fn matrix_columns_normalize_independently(m in 1usize..6, c in 1usize..5, seed in any::<u64>(), gamma in 0.0f64..10.0) {
        let mut rng = stream(seed, Purpose::Data, 0, 0);
        let values = Array2::from_shape_simple_fn((m, c), || rand::Rng::random_range(&mut rng, 0.01..5.0));
        let mat = influence_matrix(&LossMatrix { values: values.clone(), probe_id: 0 }, gamma).unwrap();
        for col in 0..c {
            let column: Vec<f64> = (0..m).map(|i| mat.get(i, col)).collect();
            prop_assert!((column.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let alone = influence_vector(&lv(values.column(col).to_vec()), gamma).unwrap();
            prop_assert_eq!(alone.weights(), &column[..]);
        }
    }

    #[test]
    fn aggregates_stay_inside_the_client_range(n in 1usize..6, seed in any::<u64>(), gamma in 0.0f64..10.0) {
        let ms = models(n, seed);
        let ls: Vec<f64> = (0..n).map(|i| 0.5 + i as f64 * 0.37).collect();
        let lam = influence_vector(&lv(ls), gamma).unwrap();
        let repr = aggregate_repr(&ms, &lam).unwrap();
        let inside = |got: f64, pick: &dyn Fn(&ModelParams) -> f64| {
            let lo = ms.iter().map(pick).fold(f64::INFINITY, f64::min);
            let hi = ms.iter().map(pick).fold(f64::NEG_INFINITY, f64::max);
            got >= lo - 1e-15 && got <= hi + 1e-15
        };
        for ((r, cidx), &got) in repr[0].weights.indexed_iter() {
            prop_assert!(inside(got, &|p: &ModelParams| p.repr[0].weights[[r, cidx]]));
        }
        let cols = (0..3).map(|_| lam.as_aggregation().clone()).collect();
        let cls = aggregate_classifier(0, &ms, &InfluenceMatrix::from_columns(cols).unwrap(), ClassifierRule::Corrected).unwrap();
        for ((r, cidx), &got) in cls.weights.indexed_iter() {
            prop_assert!(inside(got, &|p: &ModelParams| p.classifier.weights[[r, cidx]]));
        }
        let sizes: Vec<usize> = (0..n).map(|i| 10 + 7 * i).collect();
        let avg = fedavg_aggregate(&ms, &sizes).unwrap();
        for ((r, cidx), &got) in avg.classifier.weights.indexed_iter() {
            prop_assert!(inside(got, &|p: &ModelParams| p.classifier.weights[[r, cidx]]));
        }
    }

    #[test]
    fn identical_models_aggregate_to_themselves(n in 1usize..6, seed in any::<u64>(), ws in prop::collection::vec(0.0f64..1.0, 6)) {
        let p = models(1, seed).pop().unwrap();
        let all = vec![p.clone(); n];
        let lam = AggregationWeights::tempered(&ws[..n].iter().map(|w| w + 0.01).collect::<Vec<_>>(), 1.0).unwrap();
        prop_assert_eq!(weighted_average(&all, &lam).unwrap(), p.clone());
        let cols = (0..3).map(|_| lam.clone()).collect();
        let mat = InfluenceMatrix::from_columns(cols).unwrap();
        prop_assert_eq!(aggregate_classifier(0, &all, &mat, ClassifierRule::Corrected).unwrap(), p.classifier);
    }

    #[test]
    fn leave_one_out_removes_one_client_algebraically(n in 2usize..7, seed in any::<u64>()) {
        let ms = models(n, seed);
        let mf = n as f64;
        for i in 0..n {
            let loo = loo_repr(&ms, i).unwrap();
            for ((r, c), &got) in loo[0].weights.indexed_iter() {
                let total: f64 = ms.iter().map(|p| p.repr[0].weights[[r, c]]).sum();
                let want = (total - ms[i].repr[0].weights[[r, c]]) / (mf - 1.0);
                prop_assert!((got - want).abs() < 1e-12);
            }
            for class in 0..3 {
                let (_, b) = loo_class_vector(&ms, i, class).unwrap();
                let total: f64 = ms.iter().map(|p| p.classifier.bias[class]).sum();
                prop_assert!((b - (total - ms[i].classifier.bias[class]) / (mf - 1.0)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn uniform_influence_reproduces_fedavg_with_equal_sizes() {
    let ms = models(4, 9);
    let avg = fedavg_aggregate(&ms, &[50; 4]).unwrap();
    let lam = influence_vector(&lv(vec![0.3, 2.0, 1.1, 0.7]), 0.0).unwrap();
    let mat = influence_matrix(
        &LossMatrix {
            values: Array2::from_elem((4, 3), 1.7),
            probe_id: 0,
        },
        0.0,
    )
    .unwrap();
    for m in 0..4 {
        let repr = aggregate_repr(&ms, &lam).unwrap();
        let cls = aggregate_classifier(m, &ms, &mat, ClassifierRule::Corrected).unwrap();
        assert_eq!(repr, avg.repr);
        assert_eq!(cls, avg.classifier);
    }
}

#[test]
fn temperature_drives_the_maximum_to_one() {
    let w = influence_vector(&lv(vec![1.0, 1.5, 2.0]), 200.0).unwrap();
    assert!(w.weights()[2] > 1.0 - 1e-12);
    assert!(w.weights()[0] < 1e-40);
    let w = influence_vector(&lv(vec![2.0, 1.0]), 0.0).unwrap();
    assert_eq!(w.weights(), &[0.5, 0.5]);
}

/// Three one-unit models; losses checked against a straight-line evaluation.
#[test]
fn crafted_scalar_losses_match_hand_evaluation() {
    let model = |theta: f64| ModelParams {
        activation: Activation::Tanh,
        repr: vec![Dense {
            weights: array![[theta]],
            bias: array![0.0],
        }],
        classifier: Dense {
            weights: array![[1.0], [-1.0]],
            bias: array![0.0, 0.5],
        },
    };
    let all = vec![model(0.5), model(1.5), model(-1.0)];
    let probe = Batch::new(array![[1.0], [-2.0]], vec![0, 1]).unwrap();
    let ce = |theta: f64| {
        let mut total = 0.0;
        for (x, y) in [(1.0f64, 0usize), (-2.0, 1)] {
            let h = (theta * x).tanh();
            let z = [h, -h + 0.5];
            let lse = (z[0].exp() + z[1].exp()).ln();
            total += lse - z[y];
        }
        total / 2.0
    };
    let got = client_loss_vector(0, &all, &probe, 0).unwrap();
    let want = [
        ce((1.5 - 1.0) / 2.0),
        ce((0.5 - 1.0) / 2.0),
        ce((0.5 + 1.5) / 2.0),
    ];
    for (g, w) in got.values.iter().zip(want) {
        assert!((g - w).abs() < 1e-14, "{g} vs {w}");
    }
}

/// Two clients whose data disagree: each one measures the other differently.
#[test]
fn influence_can_be_asymmetric() {
    let a = ModelParams::init(&arch(2, 3, 2), &mut stream(1, Purpose::Init, 0, 0));
    let b = ModelParams::init(&arch(2, 3, 2), &mut stream(2, Purpose::Init, 0, 0));
    let c = ModelParams::init(&arch(2, 3, 2), &mut stream(3, Purpose::Init, 0, 0));
    let all = vec![a, b, c];
    let probes = [
        Batch::new(array![[1.0, 0.5], [-0.3, 2.0], [0.8, -1.0]], vec![0, 1, 0]).unwrap(),
        Batch::new(array![[-1.5, 0.2], [0.4, 0.4], [2.0, 1.0]], vec![1, 1, 0]).unwrap(),
        Batch::new(array![[0.0, -0.7], [1.1, 0.3]], vec![0, 1]).unwrap(),
    ];
    let lams: Vec<InfluenceVector> = (0..3)
        .map(|m| {
            influence_vector(&client_loss_vector(m, &all, &probes[m], 0).unwrap(), 5.0).unwrap()
        })
        .collect();
    let asym =
        (0..3).any(|m| (0..3).any(|i| (lams[m].weights()[i] - lams[i].weights()[m]).abs() > 1e-3));
    assert!(asym, "{lams:?}");
    let mats: Vec<_> = (0..3)
        .map(|m| {
            influence_matrix(&class_loss_matrix(m, &all, &probes[m], 0).unwrap(), 5.0).unwrap()
        })
        .collect();
    assert!((0..3).any(|m| (mats[m].get(1, 0) - mats[1].get(m, 0)).abs() > 1e-3));
}
