//! Acceptance suite: one test per criterion, each printing a PASS line
//! (run with `--nocapture` to see them on success). Training-dependent
//! criteria share one trained fixture built on first use.

use std::collections::HashSet;
use std::sync::OnceLock;

use grank_core::config::{AppConfig, ServingConfig, ServingMode};
use grank_core::data::{synth_generate, BatchIterator, Dataset};
use grank_core::eval::{evaluate, flops_report, ndcg_at_k, recall_at_k};
use grank_core::generator::AttentionKind;
use grank_core::mips::{
    build_index, overlap, quantize, topk_exact, topk_quantized, IndexedCorpus,
};
use grank_core::model::Model;
use grank_core::serving::{bench, retrieve, user_query_vector, BenchOptions, ServingIndex};
use grank_core::trainer::{train_step, Adam, StepLosses};
use grank_core::verify;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ── shared trained fixture ──────────────────────────────────────────────

const FIXTURE_ITEMS: usize = 4096;
const FIXTURE_USERS: usize = 2000;
const FIXTURE_TOPICS: usize = 16;
const FIXTURE_SEQ_LEN: usize = 72;
const FIXTURE_BATCH: usize = 64;
const FIXTURE_STEPS: usize = 200;
const FIXTURE_LR: f64 = 0.01;
const FIXTURE_TAU: f64 = 0.2;

struct Fixture {
    dataset: Dataset,
    model: Model<f32>,
    index: ServingIndex,
    losses_at_200: StepLosses,
}

fn fixture_app(n_items: usize, seed: u64) -> AppConfig {
    let mut app = AppConfig::default();
    app.model.n_items = n_items;
    app.model.generator.d = 32;
    app.model.generator.d_top = 32;
    app.model.generator.mlp_hidden = 32;
    app.model.generator.l_short = 16;
    app.model.generator.layers = 2;
    app.model.generator.tau = FIXTURE_TAU;
    app.model.ranker.long_len = 64;
    app.model.ranker.d_k = 32;
    app.trainer.batch_size = FIXTURE_BATCH;
    app.trainer.learning_rate = FIXTURE_LR;
    app.trainer.seed = seed;
    app
}

fn train_steps(
    model: &mut Model<f32>,
    train: &Dataset,
    app: &AppConfig,
    steps: usize,
) -> StepLosses {
    assert!(steps >= 1);
    let mut opt = Adam::new(&model.params);
    let mut step = 0usize;
    let mut epoch = 0u64;
    loop {
        let batches =
            BatchIterator::new(train, app.trainer.batch_size, app.trainer.seed + epoch).unwrap();
        for batch in batches {
            let losses = train_step(
                model,
                train,
                &batch,
                &app.trainer,
                &mut opt,
                AttentionKind::Decomposed,
            )
            .unwrap();
            step += 1;
            if step >= steps {
                return losses;
            }
        }
        epoch += 1;
    }
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dataset =
            synth_generate(7, FIXTURE_ITEMS, FIXTURE_USERS, FIXTURE_TOPICS, FIXTURE_SEQ_LEN)
                .unwrap();
        let (train, _) = dataset.split_chronological(0.9).unwrap();
        let app = fixture_app(dataset.n_items, 1);
        let mut model: Model<f32> = Model::new(app.model.clone(), 1).unwrap();
        let losses_at_200 = train_steps(&mut model, &train, &app, FIXTURE_STEPS);
        let exact = build_index(&model).unwrap();
        let quantized = quantize(&exact, 8).unwrap();
        Fixture {
            dataset,
            model,
            index: ServingIndex {
                exact,
                quantized: Some(quantized),
            },
            losses_at_200,
        }
    })
}

// ── criterion 1: attention decomposition equivalence ────────────────────

#[test]
fn criterion_1_decomposition_equivalence() {
    let d32 = verify::equivalence_max_diff::<f32>(
        &verify::EQUIV_LS,
        &verify::EQUIV_BS,
        &verify::EQUIV_DS,
        verify::EQUIV_SEEDS,
    )
    .unwrap();
    assert!(
        d32 <= verify::EQUIV_TOL_32,
        "32-bit max |decomposed - full| = {d32:.3e} exceeds 1e-5"
    );
    let d64 = verify::equivalence_max_diff::<f64>(
        &verify::EQUIV_LS,
        &verify::EQUIV_BS,
        &verify::EQUIV_DS,
        verify::EQUIV_SEEDS,
    )
    .unwrap();
    assert!(
        d64 <= verify::EQUIV_TOL_64,
        "64-bit max |decomposed - full| = {d64:.3e} exceeds 1e-10"
    );
    println!(
        "[ACCEPTANCE] PASS criterion 1: decomposition equivalence, max diff {d32:.2e} (32-bit) / {d64:.2e} (64-bit)"
    );
}

// ── criterion 2: FLOPs reduction ────────────────────────────────────────

#[test]
fn criterion_2_flops_reduction() {
    let r = flops_report(64, 300, 128);
    assert!(
        (r.reduction - 0.822).abs() <= 0.0005,
        "reduction {} outside 0.822 +- 0.0005",
        r.reduction
    );
    println!(
        "[ACCEPTANCE] PASS criterion 2: score-FLOPs reduction {:.4} at (L=64, B=300, d=128)",
        r.reduction
    );
}

// ── criterion 3: gradient correctness ───────────────────────────────────

#[test]
fn criterion_3_gradient_correctness() {
    let results = verify::gradient_check_losses().unwrap();
    assert_eq!(results.len(), 4);
    for (name, err) in &results {
        assert!(
            *err <= verify::GRAD_TOL,
            "{name}: max rel err {err:.3e} exceeds 1e-4"
        );
    }
    let worst = results.iter().map(|(_, e)| *e).fold(0.0f64, f64::max);
    println!(
        "[ACCEPTANCE] PASS criterion 3: all loss gradients match finite differences, worst rel err {worst:.2e}"
    );
}

// ── criterion 4: training-serving consistency / zero leakage ────────────

#[test]
fn criterion_4_zero_leakage() {
    for check in verify::leakage_check::<f32>()
        .unwrap()
        .into_iter()
        .chain(verify::leakage_check::<f64>().unwrap())
    {
        assert!(check.passed, "{}: {}", check.name, check.detail);
    }
    println!(
        "[ACCEPTANCE] PASS criterion 4: h_u bitwise-stable under candidates; candidate perturbations isolated"
    );
}

// ── criterion 5: cascade containment over 1,000 users ───────────────────

#[test]
fn criterion_5_cascade_containment() {
    let fx = fixture();
    let cfg = ServingConfig {
        k1: 2000,
        k2: 500,
        quantized: false,
        mode: ServingMode::Full,
    };
    let mut contained = 0usize;
    let mut recall_final = 0.0;
    let mut recall_stage1 = 0.0;
    let users = &fx.dataset.users[..1000];
    for user in users {
        let r = retrieve(&fx.model, &fx.index, user, &cfg).unwrap();
        let stage1: HashSet<usize> = r.stage1.entries.iter().map(|(i, _)| *i).collect();
        if r.final_.entries.iter().all(|(i, _)| stage1.contains(i)) {
            contained += 1;
        }
        recall_final += recall_at_k(&r.final_.entries, user.target.item_id, 500).unwrap();
        recall_stage1 += recall_at_k(&r.stage1.entries, user.target.item_id, 2000).unwrap();
    }
    assert_eq!(contained, users.len(), "containment must hold for every request");
    let rf = recall_final / users.len() as f64;
    let rs = recall_stage1 / users.len() as f64;
    assert!(
        rf <= rs,
        "Recall@500(final) = {rf} must not exceed Recall@2000(stage-1) = {rs}"
    );
    println!(
        "[ACCEPTANCE] PASS criterion 5: containment 1000/1000; Recall@500 {rf:.4} <= Recall@2000 {rs:.4}"
    );
}

// ── criterion 6: ablation ordering at desk scale ─────────────────────────

#[test]
fn criterion_6_ablation_ordering() {
    let mut margins = Vec::new();
    for seed in 0..3u64 {
        let ds = synth_generate(100 + seed, 10_000, 5_000, 16, FIXTURE_SEQ_LEN).unwrap();
        let (train, test) = ds.split_chronological(0.9).unwrap();

        // Desk-scale serving pool: production retrieves a vanishing fraction
        // of the corpus, so 256-of-10k is the proportionally honest cascade.
        let run = |lambdas: (f64, f64, f64), mode: ServingMode| -> f64 {
            let mut app = fixture_app(ds.n_items, seed);
            app.trainer.batch_size = 24;
            app.trainer.lambda0 = lambdas.0;
            app.trainer.lambda1 = lambdas.1;
            app.trainer.lambda2 = lambdas.2;
            let mut model: Model<f32> = Model::new(app.model.clone(), seed).unwrap();
            let steps = 3 * (train.users.len() / app.trainer.batch_size);
            train_steps(&mut model, &train, &app, steps);
            let index = ServingIndex {
                exact: build_index(&model).unwrap(),
                quantized: None,
            };
            let cfg = ServingConfig {
                k1: 256,
                k2: 64,
                quantized: false,
                mode,
            };
            evaluate(&model, &index, &test, &cfg, 50, "acceptance")
                .unwrap()
                .final_report
                .recall
        };

        let pure = run((1.0, 0.0, 0.0), ServingMode::PureGenerator);
        let full = run((1.0, 1.0, 1.0), ServingMode::Full);
        println!(
            "[ACCEPTANCE] criterion 6 seed {seed}: full {full:.4} vs pure {pure:.4} (margin {:.4})",
            full - pure
        );
        margins.push(full - pure);
    }
    margins.sort_by(|a, b| a.total_cmp(b));
    let median = margins[1];
    assert!(
        median >= 0.02,
        "median Recall@50 margin {median:.4} below 0.02 (margins {margins:?})"
    );
    println!(
        "[ACCEPTANCE] PASS criterion 6: full beats pure generator by median Recall@50 margin {median:.4}"
    );
}

// ── criterion 7: learning sanity after 200 steps ────────────────────────

#[test]
fn criterion_7_learning_sanity() {
    let fx = fixture();
    let chance = (FIXTURE_BATCH as f64).ln();
    let target = 0.8 * chance;
    let l = fx.losses_at_200;
    for (name, value) in [("NTP", l.ntp), ("SA-info", l.sa), ("CA-info", l.ca)] {
        assert!(
            value <= target,
            "{name} loss {value:.3} has not fallen 20% below chance ln({FIXTURE_BATCH}) = {chance:.3}"
        );
    }
    println!(
        "[ACCEPTANCE] PASS criterion 7: after 200 steps losses (ntp {:.2}, sa {:.2}, ca {:.2}) all <= {target:.2}",
        l.ntp, l.sa, l.ca
    );
}

// ── criterion 8: MIPS exactness and quantized overlap ───────────────────

#[test]
fn criterion_8_mips_exactness() {
    // full-sort oracle over 100 random instances
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    for trial in 0..100 {
        let n = rng.gen_range(2..=1000usize);
        let d = rng.gen_range(2..=32usize);
        let k = rng.gen_range(1..=100.min(n));
        let mut vectors = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            vectors.push(rng.gen_range(-1.0f32..1.0));
        }
        let corpus = IndexedCorpus {
            n_items: n,
            d_top: d,
            vectors,
        };
        let query: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let fast = topk_exact(&corpus, &query, k).unwrap();
        let mut oracle: Vec<(usize, f32)> = (0..n)
            .map(|i| {
                let s: f32 = corpus
                    .row(i)
                    .iter()
                    .zip(query.iter())
                    .map(|(a, b)| a * b)
                    .sum();
                (i, s)
            })
            .collect();
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        oracle.truncate(k);
        assert_eq!(fast, oracle, "trial {trial}: n={n} d={d} k={k}");
    }

    // quantized overlap at k = 2000 on the trained corpus
    let fx = fixture();
    let q = fx.index.quantized.as_ref().unwrap();
    let mut min_overlap = 1.0f64;
    for user in fx.dataset.users.iter().take(50) {
        let query = user_query_vector(&fx.model, user).unwrap();
        let exact = topk_exact(&fx.index.exact, &query, 2000).unwrap();
        let approx = topk_quantized(q, &query, 2000).unwrap();
        min_overlap = min_overlap.min(overlap(&exact, &approx));
    }
    assert!(
        min_overlap >= 0.95,
        "quantized overlap@2000 fell to {min_overlap}"
    );
    println!(
        "[ACCEPTANCE] PASS criterion 8: top-k matches full sort on 100 instances; quantized overlap@2000 >= {min_overlap:.3}"
    );
}

// ── criterion 9: metric oracles ─────────────────────────────────────────

#[test]
fn criterion_9_metric_oracles() {
    fn naive_recall(e: &[(usize, f64)], target: usize, k: usize) -> f64 {
        let mut hit = false;
        for (rank, (id, _)) in e.iter().enumerate() {
            if rank < k && *id == target {
                hit = true;
            }
        }
        if hit {
            1.0
        } else {
            0.0
        }
    }
    fn naive_ndcg(e: &[(usize, f64)], target: usize, k: usize) -> f64 {
        for (rank0, (id, _)) in e.iter().enumerate().take(k) {
            if *id == target {
                return 1.0 / ((rank0 as f64) + 2.0).log2();
            }
        }
        0.0
    }

    let mut rng = ChaCha8Rng::seed_from_u64(909);
    for _ in 0..100 {
        let n = rng.gen_range(1..60usize);
        let mut ids: Vec<usize> = (0..300).collect();
        for i in 0..n {
            let j = rng.gen_range(i..300);
            ids.swap(i, j);
        }
        let entries: Vec<(usize, f64)> = ids[..n]
            .iter()
            .enumerate()
            .map(|(rank, &id)| (id, 50.0 - rank as f64))
            .collect();
        let k = rng.gen_range(1..=n);
        let target = rng.gen_range(0..320);
        assert_eq!(
            recall_at_k(&entries, target, k).unwrap(),
            naive_recall(&entries, target, k)
        );
        let a = ndcg_at_k(&entries, target, k).unwrap();
        let b = naive_ndcg(&entries, target, k);
        assert!((a - b).abs() < 1e-12);
    }

    // closed forms
    let e: Vec<(usize, f64)> = vec![(9, 3.0), (4, 2.0), (7, 1.0)];
    assert_eq!(ndcg_at_k(&e, 9, 3).unwrap(), 1.0);
    assert_eq!(ndcg_at_k(&e, 7, 3).unwrap(), 0.5);
    assert_eq!(recall_at_k(&e, 4, 1).unwrap(), 0.0);
    println!(
        "[ACCEPTANCE] PASS criterion 9: recall/NDCG match the naive oracle on 100 random lists; closed forms exact"
    );
}

// ── criterion 10: benchmark harness integrity ───────────────────────────

#[test]
fn criterion_10_bench_harness() {
    let fx = fixture();
    let cfg = ServingConfig {
        k1: 256,
        k2: 64,
        quantized: false,
        mode: ServingMode::Full,
    };
    // per-request stage accounting
    for user in fx.dataset.users.iter().take(10) {
        let r = retrieve(&fx.model, &fx.index, user, &cfg).unwrap();
        assert!(r.timing.stage1_us + r.timing.stage2_us <= r.timing.total_us);
    }
    let report = bench(
        &fx.model,
        &fx.index,
        &fx.dataset,
        &cfg,
        &BenchOptions {
            concurrency: 2,
            requests: 24,
            warmup: 4,
            seed: 5,
        },
    )
    .unwrap();
    assert!(report.p50_ms <= report.p99_ms, "P50 must not exceed P99");
    assert_eq!(report.requests, 24);
    assert_eq!(report.warmup_excluded, 4);
    // schema validates: serialize then re-parse and spot-check fields
    let json = serde_json::to_string(&report).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
    for key in [
        "requests",
        "warmup_excluded",
        "concurrency",
        "duration_ms",
        "qps",
        "mean_ms",
        "p50_ms",
        "p99_ms",
        "stage1_mean_us",
        "stage2_mean_us",
        "sla_ms",
        "sla_violated",
    ] {
        assert!(parsed.get(key).is_some(), "schema missing field {key}");
    }
    println!(
        "[ACCEPTANCE] PASS criterion 10: stage sums bounded by totals, P50 {:.2}ms <= P99 {:.2}ms, schema valid",
        report.p50_ms, report.p99_ms
    );
}

// ── extra trained-model invariants that ride the fixture ────────────────

#[test]
fn trained_ranker_prefers_planted_target() {
    use grank_core::model::UserFeatures;
    use grank_core::numeric::Session;
    use grank_core::ranker::{cross_attention_score, encode_long_history};

    let fx = fixture();
    let mut hits = 0usize;
    let mut trials = 0usize;
    for user in fx.dataset.users.iter().take(100) {
        let feats = UserFeatures::from_record(user, &fx.model.cfg);
        let target = user.target.item_id;
        if feats.long_items.contains(&target) {
            continue; // need a clean "absent" baseline
        }
        let mut planted = feats.long_items.clone();
        planted[0] = target;

        let mut sess = Session::new(&fx.model.params);
        let enc_base = encode_long_history(&mut sess, &fx.model, &feats.long_items).unwrap();
        let s_base = cross_attention_score(&mut sess, &fx.model, target, &enc_base).unwrap();
        let enc_planted = encode_long_history(&mut sess, &fx.model, &planted).unwrap();
        let s_planted =
            cross_attention_score(&mut sess, &fx.model, target, &enc_planted).unwrap();
        trials += 1;
        if sess.scalar_value(s_planted) > sess.scalar_value(s_base) {
            hits += 1;
        }
    }
    let frac = hits as f64 / trials.max(1) as f64;
    assert!(
        frac >= 0.95,
        "planting the target raised its score in only {frac:.2} of {trials} trials"
    );
    println!("[ACCEPTANCE] trained-ranker monotone relevance: {frac:.2} over {trials} trials");
}

#[test]
fn stage1_recall_beats_chance_after_training() {
    let fx = fixture();
    let cfg = ServingConfig {
        k1: 400,
        k2: 100,
        quantized: false,
        mode: ServingMode::PureGenerator,
    };
    let (_, test) = fx.dataset.split_chronological(0.9).unwrap();
    let outcome = evaluate(&fx.model, &fx.index, &test, &cfg, 50, "fixture").unwrap();
    // chance level for recall@k1 is k1 / |I|
    let chance = 400.0 / FIXTURE_ITEMS as f64;
    assert!(
        outcome.stage1_recall_at_k1 > 2.0 * chance,
        "stage-1 recall {:.4} is not clearly above chance {chance:.4}",
        outcome.stage1_recall_at_k1
    );
    println!(
        "[ACCEPTANCE] trained stage-1 recall@400 = {:.4} (chance {chance:.4})",
        outcome.stage1_recall_at_k1
    );
}
