// Scratch calibration harness (deleted before release): checks loss
// trajectories and the full-vs-pure recall margin on synthetic data.

use std::time::Instant;

use grank_core::config::{AppConfig, ServingConfig, ServingMode};
use grank_core::data::{synth_generate, Dataset};
use grank_core::eval::evaluate;
use grank_core::generator::AttentionKind;
use grank_core::mips::{build_index, quantize, topk_exact, topk_quantized, overlap};
use grank_core::model::Model;
use grank_core::serving::ServingIndex;
use grank_core::trainer::{train_step, Adam};
use grank_core::data::BatchIterator;

fn app_for(n_items: usize, d: usize, l: usize, long_len: usize, batch: usize, tau: f64) -> AppConfig {
    let mut app = AppConfig::default();
    app.model.n_items = n_items;
    app.model.generator.d = d;
    app.model.generator.d_top = d;
    app.model.generator.mlp_hidden = d;
    app.model.generator.l_short = l;
    app.model.generator.layers = 2;
    app.model.generator.tau = tau;
    app.model.ranker.long_len = long_len;
    app.model.ranker.d_k = d;
    app.trainer.batch_size = batch;
    app
}

fn train_n_steps(
    model: &mut Model<f32>,
    ds: &Dataset,
    app: &AppConfig,
    steps: usize,
    report_every: usize,
) {
    let mut opt = Adam::new(&model.params);
    let mut step = 0usize;
    let mut epoch = 0u64;
    let t0 = Instant::now();
    'outer: loop {
        let batches = BatchIterator::new(ds, app.trainer.batch_size, app.trainer.seed + epoch).unwrap();
        for batch in batches {
            let losses = train_step(model, ds, &batch, &app.trainer, &mut opt, AttentionKind::Decomposed).unwrap();
            step += 1;
            if step % report_every == 0 {
                println!(
                    "  step {step:4}  total {:.3}  ntp {:.3}  sa {:.3}  ca {:.3}  ({:.1}s)",
                    losses.total, losses.ntp, losses.sa, losses.ca,
                    t0.elapsed().as_secs_f64()
                );
            }
            if step >= steps {
                break 'outer;
            }
        }
        epoch += 1;
    }
}

fn diagnose(model: &Model<f32>, test: &Dataset, k1: usize) {
    use grank_core::model::UserFeatures;
    use grank_core::numeric::Session;
    use grank_core::ranker::{batch_score, encode_long_history};
    use grank_core::serving::user_query_vector;

    let index = build_index(model).unwrap();
    let mut in_hist_scores = Vec::new();
    let mut out_hist_scores = Vec::new();
    let mut target_in_scores = Vec::new();
    let mut truncation_hits = 0usize;
    let mut ca_hits = 0usize;
    let mut verbatim_hits = 0usize;
    let mut target_visible_and_retrieved = 0usize;
    let n_users = 200.min(test.users.len());

    for user in test.users.iter().take(n_users) {
        let feats = UserFeatures::from_record(user, &model.cfg);
        let target = user.target.item_id;
        let query = user_query_vector(model, user).unwrap();
        let stage1 = topk_exact(&index, &query, k1).unwrap();
        let cand_ids: Vec<usize> = stage1.iter().map(|(i, _)| *i).collect();
        let hist: std::collections::HashSet<usize> = feats.long_items.iter().copied().collect();

        // truncation recall@50
        if cand_ids[..50].contains(&target) {
            truncation_hits += 1;
        }
        // CA rerank recall@50
        let mut sess = Session::new(&model.params);
        let enc = encode_long_history(&mut sess, model, &feats.long_items).unwrap();
        let scores = batch_score(&mut sess, model, &cand_ids, &enc).unwrap();
        let mut rescored: Vec<(usize, f32)> = cand_ids
            .iter()
            .enumerate()
            .map(|(row, &item)| (item, sess.value(scores).get(row, 0)))
            .collect();
        rescored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        if rescored[..50].iter().any(|(i, _)| *i == target) {
            ca_hits += 1;
        }
        // verbatim-oracle rerank: in-history candidates first (stable)
        let mut verb: Vec<usize> = cand_ids
            .iter()
            .copied()
            .filter(|i| hist.contains(i))
            .chain(cand_ids.iter().copied().filter(|i| !hist.contains(i)))
            .collect();
        verb.truncate(50);
        if verb.contains(&target) {
            verbatim_hits += 1;
        }
        if hist.contains(&target) && cand_ids.contains(&target) {
            target_visible_and_retrieved += 1;
        }
        // score stats over first 200 candidates
        for (row, &item) in cand_ids.iter().enumerate().take(200) {
            let s = sess.value(scores).get(row, 0);
            if item == target {
                target_in_scores.push(s);
            } else if hist.contains(&item) {
                in_hist_scores.push(s);
            } else {
                out_hist_scores.push(s);
            }
        }
    }

    // attention-spike and z-norm diagnostics on a few users
    {
        use grank_core::ranker::{encode_ranker_queries, ranker_kv};
        let mut spike_match = Vec::new();
        let mut spike_other = Vec::new();
        let mut znorm_rerank_hits = 0usize;
        let n2 = 100.min(test.users.len());
        for user in test.users.iter().take(n2) {
            let feats = UserFeatures::from_record(user, &model.cfg);
            let target = user.target.item_id;
            let query = user_query_vector(model, user).unwrap();
            let stage1 = topk_exact(&index, &query, k1).unwrap();
            let cand_ids: Vec<usize> = stage1.iter().map(|(i, _)| *i).collect();
            let hist: std::collections::HashSet<usize> =
                feats.long_items.iter().copied().collect();
            let mut sess = Session::new(&model.params);
            let enc = encode_long_history(&mut sess, model, &feats.long_items).unwrap();
            let kv = ranker_kv(&mut sess, model, &enc).unwrap();
            let queries = encode_ranker_queries(&mut sess, model, &cand_ids).unwrap();
            let scores_raw = sess.matmul_tb(queries, kv.keys).unwrap();
            let scaled = sess.scale(scores_raw, 1.0 / (model.cfg.ranker.d_k as f64).sqrt());
            let attn = sess.softmax_rows(scaled, None).unwrap();
            let ctx = sess.matmul(attn, kv.values).unwrap();
            let mut znorm: Vec<(usize, f32)> = Vec::new();
            for (row, &item) in cand_ids.iter().enumerate() {
                let amax = sess
                    .value(attn)
                    .row(row)
                    .iter()
                    .cloned()
                    .fold(f32::MIN, f32::max);
                if hist.contains(&item) {
                    spike_match.push(amax);
                } else {
                    spike_other.push(amax);
                }
                let n: f32 = sess.value(ctx).row(row).iter().map(|v| v * v).sum::<f32>().sqrt();
                znorm.push((item, n));
            }
            znorm.sort_by(|a, b| b.1.total_cmp(&a.1));
            if znorm[..50].iter().any(|(i, _)| *i == target) {
                znorm_rerank_hits += 1;
            }
        }
        let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len().max(1) as f32;
        println!(
            "  attn max-weight: in-hist {:.4} ({})  out-hist {:.4} ({})   znorm-rerank recall@50 {:.4}",
            mean(&spike_match),
            spike_match.len(),
            mean(&spike_other),
            spike_other.len(),
            znorm_rerank_hits as f64 / n2 as f64
        );
    }
    let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len().max(1) as f32;
    println!("diagnose over {n_users} users:");
    println!("  recall@50  truncation {:.4}  ca-rerank {:.4}  verbatim-oracle {:.4}",
        truncation_hits as f64 / n_users as f64,
        ca_hits as f64 / n_users as f64,
        verbatim_hits as f64 / n_users as f64);
    println!("  P(target in history AND in stage1) = {:.4}",
        target_visible_and_retrieved as f64 / n_users as f64);
    println!("  mean CA score: target {:.4} ({})  in-hist {:.4} ({})  out-hist {:.4} ({})",
        mean(&target_in_scores), target_in_scores.len(),
        mean(&in_hist_scores), in_hist_scores.len(),
        mean(&out_hist_scores), out_hist_scores.len());
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "losses".into());

    if mode == "losses" {
        // criterion-7 shape: 200 steps, B=32, ln(32)=3.466, target <= 2.77
        println!("== loss trajectories (4096 items, 1600 users, d=32) ==");
        let topics: usize = std::env::args()
            .nth(4)
            .and_then(|s| s.parse().ok())
            .unwrap_or(16);
        let ds = synth_generate(7, 4096, 1600, topics, 72).unwrap();
        let (train, _) = ds.split_chronological(0.9).unwrap();
        let batch: usize = std::env::args()
            .nth(3)
            .and_then(|s| s.parse().ok())
            .unwrap_or(32);
        let long_len: usize = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(64);
        let mut app = app_for(ds.n_items, 32, 16, long_len, batch, 0.05);
        app.trainer.learning_rate = std::env::args()
            .nth(2)
            .and_then(|s| s.parse().ok())
            .unwrap_or(1e-3);
        println!("lr = {}, batch = {batch}", app.trainer.learning_rate);
        let mut model: Model<f32> = Model::new(app.model.clone(), 1).unwrap();
        let t = Instant::now();
        train_n_steps(&mut model, &train, &app, 200, 20);
        println!("200 steps took {:.1}s", t.elapsed().as_secs_f64());

        println!("== quantized overlap on the trained corpus ==");
        let index = build_index(&model).unwrap();
        let q = quantize(&index, 8).unwrap();
        let mut worst: f64 = 1.0;
        for u in 0..20 {
            let query = grank_core::serving::user_query_vector(&model, &train.users[u]).unwrap();
            let ex = topk_exact(&index, &query, 2000).unwrap();
            let qx = topk_quantized(&q, &query, 2000).unwrap();
            worst = worst.min(overlap(&ex, &qx));
        }
        println!("worst overlap@2000 over 20 users: {worst:.4}");
    }

    if mode == "ablation" {
        println!("== ablation margin (10k items, 5k users, 3 epochs, d=32) ==");
        let seed = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0u64);
        let tau: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.2);
        let lr: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(0.01);
        println!("seed {seed}, tau {tau}, lr {lr}");
        let ds = synth_generate(100 + seed, 10_000, 5_000, 16, 72).unwrap();
        let (train, test) = ds.split_chronological(0.9).unwrap();
        println!("train {} users, test {} users", train.users.len(), test.users.len());

        let k1: usize = std::env::var("CAL_K1").ok().and_then(|v| v.parse().ok()).unwrap_or(2000);
        let k2: usize = std::env::var("CAL_K2").ok().and_then(|v| v.parse().ok()).unwrap_or(500);
        let serving_full = ServingConfig { k1, k2, quantized: false, mode: ServingMode::Full };
        let serving_pure = ServingConfig { k1, k2, quantized: false, mode: ServingMode::PureGenerator };

        for (name, lambdas, serve) in [
            ("pure", (1.0, 0.0, 0.0), &serving_pure),
            ("full", (1.0, 1.0, 1.0), &serving_full),
        ] {
            let batch: usize = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(24);
            let long_len: usize = std::env::var("CAL_LONG").ok().and_then(|v| v.parse().ok()).unwrap_or(64);
            let lambda2: f64 = std::env::var("CAL_L2").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
            let hidden: usize = std::env::var("CAL_HIDDEN").ok().and_then(|v| v.parse().ok()).unwrap_or(32);
            let mut app = app_for(ds.n_items, 32, 16, long_len, batch, tau);
            app.model.generator.mlp_hidden = hidden;
            app.trainer.learning_rate = lr;
            app.trainer.lambda0 = lambdas.0;
            app.trainer.lambda1 = lambdas.1;
            app.trainer.lambda2 = lambdas.2 * lambda2;
            app.trainer.epochs = 3;
            app.trainer.seed = seed;
            let mut model: Model<f32> = Model::new(app.model.clone(), seed).unwrap();
            let steps_per_epoch = train.users.len() / app.trainer.batch_size;
            let t = Instant::now();
            train_n_steps(&mut model, &train, &app, 3 * steps_per_epoch, 100);
            let train_secs = t.elapsed().as_secs_f64();
            let index = ServingIndex { exact: build_index(&model).unwrap(), quantized: None };
            let t = Instant::now();
            let out = evaluate(&model, &index, &test, serve, 50, "cal").unwrap();
            println!(
                "{name}: recall@50 {:.4}  ndcg@50 {:.4}  stage1 recall@2000 {:.4}  (train {train_secs:.0}s eval {:.0}s)",
                out.final_report.recall, out.final_report.ndcg, out.stage1_recall_at_k1,
                t.elapsed().as_secs_f64()
            );
            if name == "full" && std::env::var("CAL_DIAG").is_ok() {
                diagnose(&model, &test, k1);
            }
        }
    }
}
