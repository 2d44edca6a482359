//! Sequential vs parallel per-utterance passes over the demo-sized corpus.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use flatstart::corpus::{generate_synthetic, Corpus, SyntheticSpec};
use flatstart::dnn::{init_network, Network};
use flatstart::exec::Executor;
use flatstart::flatstart::{network_features, realign};
use flatstart::hmm::{build_denominator_graph, build_numerator_graph, GraphStage, StateGraph};
use flatstart::statetying::accumulate_stats;
use flatstart::training::{holdout_error, HoldoutMetric, HoldoutUtt};

fn setup() -> (Corpus, Network) {
    let corpus = generate_synthetic(&SyntheticSpec::default()).unwrap().corpus;
    let d = corpus.feature_dim();
    let net = init_network(&[3 * d, 64, 64, corpus.phones.num_states()], 1).unwrap();
    (corpus, net)
}

fn executors() -> Vec<(String, Executor)> {
    // at least a few workers so the parallel path is exercised on small machines
    let n = std::thread::available_parallelism().map_or(1, |n| n.get()).max(4);
    vec![
        ("sequential".to_string(), Executor::sequential()),
        (format!("parallel_{n}"), Executor::with_workers(n)),
    ]
}

fn bench_realign(c: &mut Criterion) {
    let (corpus, net) = setup();
    let mut group = c.benchmark_group("realign");
    group.sample_size(10);
    for (name, exec) in executors() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| realign(&exec, &net, &corpus, GraphStage::Refined).unwrap())
        });
    }
    group.finish();
}

fn bench_holdout(c: &mut Criterion) {
    let (corpus, net) = setup();
    let feats = network_features(&corpus, &net).unwrap();
    let graphs: Vec<StateGraph> = corpus
        .utterances
        .iter()
        .map(|u| build_numerator_graph(&u.transcript, &corpus.lexicon, &corpus.phones, GraphStage::Refined).unwrap())
        .collect();
    let hold: Vec<HoldoutUtt> = corpus
        .utterances
        .iter()
        .zip(&feats)
        .zip(&graphs)
        .map(|((u, f), g)| HoldoutUtt {
            id: &u.id,
            features: f.view(),
            numerator: g,
        })
        .collect();
    let den = build_denominator_graph(&corpus.phones).unwrap();
    let mut group = c.benchmark_group("holdout_error");
    group.sample_size(10);
    for metric in [HoldoutMetric::FrameCe, HoldoutMetric::MmiDisagreement] {
        for (name, exec) in executors() {
            group.bench_function(BenchmarkId::new(format!("{metric:?}"), &name), |b| {
                b.iter(|| holdout_error(&exec, &net, &hold, &den, &corpus.phones, metric).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_stats(c: &mut Criterion) {
    let (corpus, net) = setup();
    let gt = corpus.ground_truth().unwrap();
    let mut group = c.benchmark_group("accumulate_stats");
    group.sample_size(10);
    for (name, exec) in executors() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| accumulate_stats(&exec, &net, &corpus, &gt).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_realign, bench_holdout, bench_stats);
criterion_main!(benches);
