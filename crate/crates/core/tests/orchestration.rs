mod common;

use common::{bits, small_config};
use fedc2i::aggregation::{weighted_average, AggregationWeights};
use fedc2i::config::RunConfig;
use fedc2i::data::{DatasetShard, Split, SplitKind};
use fedc2i::model::ModelParams;
use fedc2i::orchestration::{run_experiment, train_standalone, Federation, Method, Phase};
use fedc2i::report::{run_single, write_metrics_csv, METRICS_FILE};
use fedc2i::Error;
use ndarray::Array2;

#[test]
fn zero_rounds_keep_the_initial_model() {
    let mut cfg = small_config(Method::FedC2I);
    cfg.rounds = 0;
    let out = run_experiment(&cfg, 0).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.records[0].round, 0);
    let fed = Federation::new(cfg, 0).unwrap();
    for (p, c) in out.final_params.iter().zip(fed.clients()) {
        assert_eq!(p, &c.params);
    }
}

#[test]
fn server_initializes_one_shared_model() {
    let fed = Federation::new(small_config(Method::FedAvg), 3).unwrap();
    let first = &fed.clients()[0].params;
    assert!(fed.clients().iter().all(|c| &c.params == first));
}

#[test]
fn local_method_equals_standalone_training() {
    let cfg = small_config(Method::Local);
    let fed_out = run_experiment(&cfg, 4).unwrap();
    let fed = Federation::new(cfg.clone(), 4).unwrap();
    for (m, shard) in fed.shards().iter().enumerate() {
        let alone = train_standalone(&cfg, 4, shard).unwrap();
        assert_eq!(bits(&alone), bits(&fed_out.final_params[m]), "client {m}");
    }
}

#[test]
fn zero_local_epochs_return_the_aggregate() {
    for method in Method::ALL {
        let mut cfg = small_config(method);
        cfg.local_epochs = 0;
        let mut fed = Federation::new(cfg, 1).unwrap();
        for _ in 0..2 {
            let (_, stage1) = fed.step().unwrap();
            for (s, c) in stage1.iter().zip(fed.clients()) {
                assert_eq!(s, &c.params, "{method}");
            }
        }
    }
}

#[test]
fn first_round_is_symmetric() {
    let cfg = small_config(Method::FedC2I);
    let mut fed = Federation::new(cfg.clone(), 2).unwrap();
    let init = fed.clients()[0].params.clone();
    let (rec, stage1) = fed.step().unwrap();
    let m = cfg.clients as f64;
    for c in &rec.clients {
        for &v in c.influence_vector.as_ref().unwrap() {
            assert!((v - 1.0 / m).abs() < 1e-15);
        }
        for row in c.influence_matrix.as_ref().unwrap() {
            assert!(row.iter().all(|&v| (v - 1.0 / m).abs() < 1e-15));
        }
    }
    for s in &stage1 {
        assert_eq!(s, &init);
    }
    // stage two is then plain local training
    let mut local = Federation::new(
        RunConfig {
            method: Method::Local,
            ..cfg
        },
        2,
    )
    .unwrap();
    local.step().unwrap();
    for (a, b) in fed.clients().iter().zip(local.clients()) {
        assert_eq!(bits(&a.params), bits(&b.params));
    }
}

#[test]
fn variants_touch_only_their_parts() {
    for method in [
        Method::FedC2ILambdaOnly,
        Method::FedC2IMatrixLocalRepr,
        Method::FedC2IMatrixGlobalRepr,
    ] {
        let mut fed = Federation::new(small_config(method), 5).unwrap();
        for _ in 0..3 {
            let snapshot: Vec<ModelParams> =
                fed.clients().iter().map(|c| c.params.clone()).collect();
            let sizes: Vec<usize> = fed.shards().iter().map(|s| s.train_size()).collect();
            let global =
                weighted_average(&snapshot, &AggregationWeights::from_sizes(&sizes).unwrap())
                    .unwrap();
            let (rec, stage1) = fed.step().unwrap();
            for (m, s) in stage1.iter().enumerate() {
                match method {
                    Method::FedC2ILambdaOnly => {
                        assert_eq!(s.classifier, snapshot[m].classifier);
                        assert!(rec.clients[m].influence_matrix.is_none());
                    }
                    Method::FedC2IMatrixLocalRepr => {
                        assert_eq!(s.repr, snapshot[m].repr);
                        assert!(rec.clients[m].influence_vector.is_none());
                    }
                    _ => assert_eq!(s.repr, global.repr),
                }
            }
        }
    }
}

#[test]
fn literal_classifier_rule_leaves_the_classifier_alone() {
    let mut cfg = small_config(Method::FedC2I);
    cfg.literal_eq10 = true;
    let mut fed = Federation::new(cfg, 6).unwrap();
    for _ in 0..3 {
        let before: Vec<_> = fed
            .clients()
            .iter()
            .map(|c| c.params.classifier.clone())
            .collect();
        let (_, stage1) = fed.step().unwrap();
        for (s, b) in stage1.iter().zip(&before) {
            assert_eq!(&s.classifier, b);
        }
    }
}

#[test]
fn single_client_influence_methods_train_locally() {
    for method in [
        Method::FedC2I,
        Method::FedC2IMatrixLocalRepr,
        Method::FedC2ILambdaOnly,
    ] {
        let mut cfg = small_config(method);
        cfg.clients = 1;
        cfg.data.groups = vec![vec![0]];
        let out = run_experiment(&cfg, 0).unwrap();
        let mut local = cfg.clone();
        local.method = Method::Local;
        let base = run_experiment(&local, 0).unwrap();
        assert_eq!(
            bits(&out.final_params[0]),
            bits(&base.final_params[0]),
            "{method}"
        );
        if method.uses_influence_vector() {
            assert_eq!(out.records[1].clients[0].influence_vector, Some(vec![1.0]));
        }
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    for method in [Method::FedC2I, Method::FedProx] {
        let mut cfg = small_config(method);
        let mut csvs = Vec::new();
        for threads in [1, 3, 1] {
            cfg.threads = threads;
            let out = run_experiment(&cfg, 8).unwrap();
            let mut buf = Vec::new();
            write_metrics_csv(&out.records, &mut buf).unwrap();
            csvs.push(buf);
        }
        assert_eq!(csvs[0], csvs[1]);
        assert_eq!(csvs[0], csvs[2]);
    }
}

#[test]
fn shapes_never_change() {
    let cfg = small_config(Method::FedC2I);
    let out = run_experiment(&cfg, 0).unwrap();
    let arch = cfg.architecture();
    assert!(out.final_params.iter().all(|p| p.architecture() == arch));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(Method::FedC2I);
    cfg.rounds = 4;
    run_single(&cfg, 3, &dir.path().join("full"), false).unwrap();

    let mut partial = cfg.clone();
    partial.rounds = 2;
    partial.checkpoint = true;
    let resumed = dir.path().join("resumed");
    run_single(&partial, 3, &resumed, false).unwrap();
    let mut rest = cfg.clone();
    rest.checkpoint = true;
    run_single(&rest, 3, &resumed, true).unwrap();

    let a = std::fs::read(dir.path().join("full").join(METRICS_FILE)).unwrap();
    let b = std::fs::read(resumed.join(METRICS_FILE)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn diverging_training_aborts_with_diagnostics() {
    let mut cfg = small_config(Method::FedAvg);
    cfg.learning_rate = 1e308;
    let err = run_experiment(&cfg, 0).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert!(err.to_string().contains("client"), "{err}");
}

#[test]
fn both_phases_are_recorded_every_round() {
    let out = run_experiment(&small_config(Method::FedAvg), 0).unwrap();
    for rec in &out.records[1..] {
        for c in &rec.clients {
            assert!(c.metric(Phase::PostAgg, SplitKind::Test).is_some());
            assert!(c.metric(Phase::PostTrain, SplitKind::Test).is_some());
            assert!(c.metric(Phase::PostTrain, SplitKind::Train).is_some());
        }
    }
    // FedAvg clients start every round from the same global model
    let r2 = &out.records[2];
    let post_agg: Vec<_> = r2
        .clients
        .iter()
        .map(|c| c.metric(Phase::PostAgg, SplitKind::Test).unwrap())
        .collect();
    assert!(post_agg.iter().all(|r| r.accuracy.is_finite()));
}

// ---------------------------------------------------------------------------
// Hand-stepped oracle for a two-client, 1-1-2 tanh network.

#[derive(Clone, Copy, Debug)]
struct Scalar {
    w: f64,
    b: f64,
    v: [f64; 2],
    c: [f64; 2],
}

impl Scalar {
    fn from(p: &ModelParams) -> Self {
        let f = p.flatten();
        // flatten order: repr weight, repr bias, classifier rows, classifier bias
        Scalar {
            w: f[0],
            b: f[1],
            v: [f[2], f[3]],
            c: [f[4], f[5]],
        }
    }

    fn to_vec(self) -> [f64; 6] {
        [self.w, self.b, self.v[0], self.v[1], self.c[0], self.c[1]]
    }
}

fn scalar_loss_and_grad(p: Scalar, xs: &[f64], ys: &[usize]) -> (f64, [f64; 6]) {
    let n = xs.len() as f64;
    let (mut loss, mut g) = (0.0, [0.0; 6]);
    for (&x, &y) in xs.iter().zip(ys) {
        let h = (p.w * x + p.b).tanh();
        let z = [p.v[0] * h + p.c[0], p.v[1] * h + p.c[1]];
        let zmax = z[0].max(z[1]);
        let e = [(z[0] - zmax).exp(), (z[1] - zmax).exp()];
        let s = e[0] + e[1];
        loss += -(e[y] / s).ln() / n;
        let dz = [
            (e[0] / s - if y == 0 { 1.0 } else { 0.0 }) / n,
            (e[1] / s - if y == 1 { 1.0 } else { 0.0 }) / n,
        ];
        let dh = dz[0] * p.v[0] + dz[1] * p.v[1];
        let da = dh * (1.0 - h * h);
        g[0] += da * x;
        g[1] += da;
        g[2] += dz[0] * h;
        g[3] += dz[1] * h;
        g[4] += dz[0];
        g[5] += dz[1];
    }
    (loss, g)
}

fn normalize(ls: &[f64], gamma: f64) -> Vec<f64> {
    let pw: Vec<f64> = ls.iter().map(|l| l.powf(gamma)).collect();
    let s: f64 = pw.iter().sum();
    pw.iter().map(|p| p / s).collect()
}

struct AdamScalar {
    m: [f64; 6],
    v: [f64; 6],
    t: i32,
}

impl AdamScalar {
    fn step(&mut self, p: &mut [f64; 6], g: &[f64; 6], lr: f64) {
        self.t += 1;
        for k in 0..6 {
            self.m[k] = 0.9 * self.m[k] + 0.1 * g[k];
            self.v[k] = 0.999 * self.v[k] + 0.001 * g[k] * g[k];
            let mh = self.m[k] / (1.0 - 0.9f64.powi(self.t));
            let vh = self.v[k] / (1.0 - 0.999f64.powi(self.t));
            p[k] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }
}

fn scalar_shard(owner: usize, xs: &[f64], ys: &[usize]) -> DatasetShard {
    let split = Split::new(
        Array2::from_shape_vec((xs.len(), 1), xs.to_vec()).unwrap(),
        ys.to_vec(),
    )
    .unwrap();
    DatasetShard {
        owner,
        train: split.clone(),
        val: Split::empty(1),
        test: split,
    }
}

fn scalar_fixture(method: Method) -> (RunConfig, Vec<DatasetShard>) {
    let mut cfg = RunConfig {
        method,
        clients: 2,
        classes: 2,
        hidden: vec![1],
        batch_size: 8,
        local_epochs: 1,
        rounds: 2,
        gamma: 2.0,
        learning_rate: 0.05,
        ..RunConfig::default()
    };
    cfg.data.latent_dim = 1;
    cfg.data.feature_dim = 1;
    cfg.data.groups = vec![vec![0], vec![1]];
    let shards = vec![
        scalar_shard(0, &[-1.0, -0.5, 0.4, 1.2], &[0, 0, 1, 1]),
        scalar_shard(1, &[0.8, 0.3, -0.6, -1.1, 0.1], &[0, 0, 1, 1, 0]),
    ];
    (cfg, shards)
}

const XS: [&[f64]; 2] = [&[-1.0, -0.5, 0.4, 1.2], &[0.8, 0.3, -0.6, -1.1, 0.1]];
const YS: [&[usize]; 2] = [&[0, 0, 1, 1], &[0, 0, 1, 1, 0]];

/// Stage one for client `m` under the full method or the global-representation variant.
fn oracle_stage1(all: &[Scalar; 2], m: usize, gamma: f64, global_repr: bool) -> (Scalar, Vec<f64>) {
    let other = 1 - m;
    let (xs, ys) = (XS[m], YS[m]);
    // with two clients, leaving out i leaves exactly the other one
    let loo = |i: usize| all[1 - i];
    let ls: Vec<f64> = (0..2)
        .map(|i| {
            let mut p = all[m];
            p.w = loo(i).w;
            p.b = loo(i).b;
            scalar_loss_and_grad(p, xs, ys).0
        })
        .collect();
    let lam = normalize(&ls, gamma);
    let mut out = all[m];
    if global_repr {
        // equal weights would be wrong here: shard sizes are 4 and 5
        let (a, b) = (4.0 / 9.0, 5.0 / 9.0);
        out.w = a * all[0].w + b * all[1].w;
        out.b = a * all[0].b + b * all[1].b;
    } else {
        out.w = lam[0] * all[0].w + lam[1] * all[1].w;
        out.b = lam[0] * all[0].b + lam[1] * all[1].b;
    }
    for c in 0..2 {
        let lc: Vec<f64> = (0..2)
            .map(|i| {
                let mut p = all[m];
                p.v[c] = loo(i).v[c];
                p.c[c] = loo(i).c[c];
                scalar_loss_and_grad(p, xs, ys).0
            })
            .collect();
        let col = normalize(&lc, gamma);
        out.v[c] = col[m] * all[m].v[c] + col[other] * all[other].v[c];
        out.c[c] = col[m] * all[m].c[c] + col[other] * all[other].c[c];
    }
    (out, lam)
}

fn check_trace(method: Method) {
    let (cfg, shards) = scalar_fixture(method);
    let mut fed = Federation::with_shards(cfg.clone(), 11, shards).unwrap();
    let init = Scalar::from(&fed.clients()[0].params);
    let mut state = [init, init];
    let mut adam = [
        AdamScalar {
            m: [0.0; 6],
            v: [0.0; 6],
            t: 0,
        },
        AdamScalar {
            m: [0.0; 6],
            v: [0.0; 6],
            t: 0,
        },
    ];
    for round in 1..=2 {
        let (rec, stage1) = fed.step().unwrap();
        let snapshot = state;
        for m in 0..2 {
            let (agg, lam) = oracle_stage1(
                &snapshot,
                m,
                cfg.gamma,
                method == Method::FedC2IMatrixGlobalRepr,
            );
            for (got, want) in Scalar::from(&stage1[m]).to_vec().iter().zip(agg.to_vec()) {
                assert!(
                    (got - want).abs() < 1e-12,
                    "round {round} client {m} stage1: {got} vs {want}"
                );
            }
            if method == Method::FedC2I {
                let rec_lam = rec.clients[m].influence_vector.as_ref().unwrap();
                for (a, b) in rec_lam.iter().zip(&lam) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            // one epoch with batch size above the shard size is one full-batch step
            let (_, g) = scalar_loss_and_grad(agg, XS[m], YS[m]);
            let mut p = agg.to_vec();
            adam[m].step(&mut p, &g, cfg.learning_rate);
            for (got, want) in fed.clients()[m].params.flatten().iter().zip(p) {
                assert!(
                    (got - want).abs() < 1e-12,
                    "round {round} client {m} trained: {got} vs {want}"
                );
            }
            state[m] = Scalar {
                w: p[0],
                b: p[1],
                v: [p[2], p[3]],
                c: [p[4], p[5]],
            };
        }
    }
}

#[test]
fn two_round_trace_matches_hand_stepped_oracle() {
    check_trace(Method::FedC2I);
}

#[test]
fn global_repr_variant_matches_hand_stepped_oracle() {
    check_trace(Method::FedC2IMatrixGlobalRepr);
}
