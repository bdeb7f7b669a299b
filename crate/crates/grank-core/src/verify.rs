//! Self-verification suites: decomposition equivalence over a size grid,
//! finite-difference gradient checks on every loss, leakage and isolation
//! checks, and the complexity-claim arithmetic. Shared by the `verify` CLI
//! command and the acceptance tests.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::{synth_generate, BatchIterator, Dataset};
use crate::error::Result;
use crate::eval::flops_report;
use crate::generator::{
    candidate_mask, decomposed_attention, encode_candidates, full_attention_oracle,
    full_sequence_mask, generator_forward, loss_ntp, loss_sa_info, user_token_mask,
    AttentionKind, AttentionParams, CandidateBatch, ForwardMode,
};
use crate::model::{Model, UserFeatures};
use crate::numeric::{grad_check, Init, Matrix, ParamSet, Scalar, Session};
use crate::ranker::{batch_score, cross_attention_score, encode_long_history, loss_ca_info};
use crate::trainer::batch_forward;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Check {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Worst-case |decomposed - full| over the requested grid in one precision.
pub fn equivalence_max_diff<S: Scalar>(
    ls: &[usize],
    bs: &[usize],
    ds: &[usize],
    seeds: u64,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for &l in ls {
        for &b in bs {
            for &d in ds {
                for seed in 0..seeds {
                    let mut rng = ChaCha8Rng::seed_from_u64(
                        seed ^ (l as u64) << 40 ^ (b as u64) << 20 ^ d as u64,
                    );
                    let mut ps: ParamSet<S> = ParamSet::new();
                    let attn = AttentionParams {
                        w_q: ps.register("wq", d, d, Init::FanIn(d), &mut rng),
                        w_k: ps.register("wk", d, d, Init::FanIn(d), &mut rng),
                        w_v: ps.register("wv", d, d, Init::FanIn(d), &mut rng),
                        heads: 1,
                    };
                    let x = Matrix::uniform(l + 1, d, 1.0, &mut rng);
                    let c = Matrix::uniform(b, d, 1.0, &mut rng);
                    let user_mask = Arc::new(user_token_mask(l, 0));
                    let cmask = Arc::new(candidate_mask(l, 0, b));
                    let fmask = Arc::new(full_sequence_mask(l, 0, b));

                    let mut sess = Session::new(&ps);
                    let xv = sess.constant(x);
                    let cv = sess.constant(c);
                    let (ox_d, oc_d) = decomposed_attention(
                        &mut sess,
                        xv,
                        Some(cv),
                        &attn,
                        &user_mask,
                        Some(&cmask),
                    )?;
                    let (ox_f, oc_f) =
                        full_attention_oracle(&mut sess, xv, Some(cv), &attn, &fmask)?;
                    worst = worst.max(sess.value(ox_d).max_abs_diff(sess.value(ox_f)));
                    worst = worst.max(
                        sess.value(oc_d.expect("candidates present"))
                            .max_abs_diff(sess.value(oc_f.expect("candidates present"))),
                    );
                }
            }
        }
    }
    Ok(worst)
}

pub const EQUIV_LS: [usize; 3] = [2, 8, 64];
pub const EQUIV_BS: [usize; 3] = [1, 16, 300];
pub const EQUIV_DS: [usize; 3] = [4, 32, 128];
pub const EQUIV_SEEDS: u64 = 20;
pub const EQUIV_TOL_32: f64 = 1e-5;
pub const EQUIV_TOL_64: f64 = 1e-10;

fn equivalence_checks(quick: bool) -> Result<Vec<Check>> {
    let seeds = if quick { 3 } else { EQUIV_SEEDS };
    let d32 = equivalence_max_diff::<f32>(&EQUIV_LS, &EQUIV_BS, &EQUIV_DS, seeds)?;
    let d64 = equivalence_max_diff::<f64>(&EQUIV_LS, &EQUIV_BS, &EQUIV_DS, seeds)?;
    Ok(vec![
        Check::new(
            "attention decomposition equivalence (32-bit)",
            d32 <= EQUIV_TOL_32,
            format!("max |decomposed - full| = {d32:.3e}, tolerance {EQUIV_TOL_32:.0e}"),
        ),
        Check::new(
            "attention decomposition equivalence (64-bit)",
            d64 <= EQUIV_TOL_64,
            format!("max |decomposed - full| = {d64:.3e}, tolerance {EQUIV_TOL_64:.0e}"),
        ),
    ])
}

pub fn tiny_model_config(d: usize, l: usize, n_items: usize) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.n_items = n_items;
    cfg.generator.d = d;
    cfg.generator.d_top = d;
    cfg.generator.mlp_hidden = d;
    cfg.generator.l_short = l;
    cfg.generator.layers = 1;
    cfg.generator.tau = 0.5;
    cfg.ranker.long_len = l;
    cfg.ranker.d_k = d;
    cfg
}

fn tiny_dataset() -> Result<Dataset> {
    synth_generate(5, 20, 4, 2, 6)
}

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;

/// Finite-difference checks for every loss head and the joint loss on a
/// tiny model (64-bit). Returns (name, max relative error) per loss.
pub fn gradient_check_losses() -> Result<Vec<(String, f64)>> {
    let ds = tiny_dataset()?;
    let cfg = tiny_model_config(8, 4, ds.n_items);
    let mut out = Vec::new();

    // L_NTP through the full generator forward
    {
        let model: Model<f64> = Model::new(cfg.clone(), 101)?;
        let mut params = model.params.clone();
        let feats = UserFeatures::from_record(&ds.users[0], &model.cfg);
        let target = ds.users[0].target.item_id;
        let negatives = [ds.users[1].target.item_id, ds.users[2].target.item_id];
        let report = grad_check(&mut params, GRAD_STEP, |sess| {
            let run = generator_forward(
                sess,
                &model,
                &feats,
                None,
                ForwardMode::Inference,
                AttentionKind::Decomposed,
            )?;
            loss_ntp(sess, &model, run.h_ntp, target, &negatives)
        })?;
        out.push(("L_NTP".to_string(), report.max_rel_err));
    }

    // L_SA-info through the candidate pathway
    {
        let model: Model<f64> = Model::new(cfg.clone(), 102)?;
        let mut params = model.params.clone();
        let feats = UserFeatures::from_record(&ds.users[0], &model.cfg);
        let cands = CandidateBatch::from_batch_targets(&[
            ds.users[0].target.item_id,
            ds.users[1].target.item_id,
            ds.users[2].target.item_id,
        ]);
        let report = grad_check(&mut params, GRAD_STEP, |sess| {
            let enc = encode_candidates(sess, &model, &cands)?;
            let run = generator_forward(
                sess,
                &model,
                &feats,
                Some(enc),
                ForwardMode::Training,
                AttentionKind::Decomposed,
            )?;
            loss_sa_info(sess, &model, run.h_candidates.expect("training run"), 0)
        })?;
        out.push(("L_SA-info".to_string(), report.max_rel_err));
    }

    // L_CA-info through the ranker
    {
        let model: Model<f64> = Model::new(cfg.clone(), 103)?;
        let mut params = model.params.clone();
        let feats = UserFeatures::from_record(&ds.users[1], &model.cfg);
        let candidates = [
            ds.users[0].target.item_id,
            ds.users[1].target.item_id,
            ds.users[3].target.item_id,
        ];
        let report = grad_check(&mut params, GRAD_STEP, |sess| {
            let enc = encode_long_history(sess, &model, &feats.long_items)?;
            let scores = batch_score(sess, &model, &candidates, &enc)?;
            loss_ca_info(sess, scores, 1)
        })?;
        out.push(("L_CA-info".to_string(), report.max_rel_err));
    }

    // L_total on a 3-user batch
    {
        let model: Model<f64> = Model::new(cfg, 104)?;
        let mut params = model.params.clone();
        let batch = BatchIterator::new(&ds, 3, 0)?.next().expect("one batch");
        let mut tc = crate::config::TrainingConfig::default();
        tc.batch_size = 3;
        let report = grad_check(&mut params, GRAD_STEP, |sess| {
            let (total, _) =
                batch_forward(sess, &model, &ds, &batch, &tc, AttentionKind::Decomposed)?;
            Ok(total)
        })?;
        out.push(("L_total".to_string(), report.max_rel_err));
    }

    Ok(out)
}

fn gradient_checks() -> Result<Vec<Check>> {
    Ok(gradient_check_losses()?
        .into_iter()
        .map(|(name, err)| {
            Check::new(
                format!("gradient check {name}"),
                err <= GRAD_TOL,
                format!("max rel err {err:.3e}, tolerance {GRAD_TOL:.0e}"),
            )
        })
        .collect())
}

/// Bitwise identity of `h_u` with and without candidate tokens, plus
/// candidate isolation under perturbation, in one precision.
pub fn leakage_check<S: Scalar>() -> Result<Vec<Check>> {
    let ds = tiny_dataset()?;
    let cfg = tiny_model_config(8, 4, ds.n_items);
    let model: Model<S> = Model::new(cfg, 105)?;
    let feats = UserFeatures::from_record(&ds.users[0], &model.cfg);
    let targets = [
        ds.users[0].target.item_id,
        ds.users[1].target.item_id,
        ds.users[2].target.item_id,
    ];
    let bits = S::BITS;
    let mut checks = Vec::new();

    for kind in [AttentionKind::Decomposed, AttentionKind::FullOracle] {
        let mut clean_sess = Session::new(&model.params);
        let clean = generator_forward(
            &mut clean_sess,
            &model,
            &feats,
            None,
            ForwardMode::Inference,
            kind,
        )?;
        let mut cand_sess = Session::new(&model.params);
        let enc = encode_candidates(
            &mut cand_sess,
            &model,
            &CandidateBatch::from_batch_targets(&targets),
        )?;
        let with = generator_forward(
            &mut cand_sess,
            &model,
            &feats,
            Some(enc),
            ForwardMode::Training,
            kind,
        )?;
        let a: Vec<u64> = clean_sess
            .value(clean.h_u)
            .data()
            .iter()
            .map(|v| v.to_f64().to_bits())
            .collect();
        let b: Vec<u64> = cand_sess
            .value(with.h_u)
            .data()
            .iter()
            .map(|v| v.to_f64().to_bits())
            .collect();
        checks.push(Check::new(
            format!("zero candidate leakage into h_u ({kind:?}, {bits}-bit)"),
            a == b,
            if a == b {
                "h_u bitwise identical with and without candidates".to_string()
            } else {
                "h_u changed when candidates were appended".to_string()
            },
        ));
    }

    // perturbation isolation: moving candidate 1 leaves user outputs and
    // other candidates' outputs untouched
    let run = |targets: &[usize]| -> Result<(Matrix<S>, Matrix<S>)> {
        let mut sess = Session::new(&model.params);
        let enc = encode_candidates(
            &mut sess,
            &model,
            &CandidateBatch::from_batch_targets(targets),
        )?;
        let r = generator_forward(
            &mut sess,
            &model,
            &feats,
            Some(enc),
            ForwardMode::Training,
            AttentionKind::Decomposed,
        )?;
        Ok((
            sess.value(r.h_u).clone(),
            sess.value(r.h_candidates.expect("training")).clone(),
        ))
    };
    let (hu_a, hc_a) = run(&targets)?;
    let mut perturbed = targets;
    perturbed[1] = ds.users[3].target.item_id;
    let (hu_b, hc_b) = run(&perturbed)?;
    let user_fixed = hu_a == hu_b;
    let others_fixed = hc_a.row(0) == hc_b.row(0) && hc_a.row(2) == hc_b.row(2);
    checks.push(Check::new(
        format!("candidate isolation under perturbation ({bits}-bit)"),
        user_fixed && others_fixed,
        format!("user outputs fixed: {user_fixed}, other candidates fixed: {others_fixed}"),
    ));

    // padding must never change a ranker score
    {
        let mut sess = Session::new(&model.params);
        let short = encode_long_history(&mut sess, &model, &feats.long_items)?;
        let s_short = cross_attention_score(&mut sess, &model, targets[0], &short)?;
        let padded = model.with_long_len(model.cfg.ranker.long_len * 4);
        let mut sess2 = Session::new(&padded.params);
        let long = encode_long_history(&mut sess2, &padded, &feats.long_items)?;
        let s_long = cross_attention_score(&mut sess2, &padded, targets[0], &long)?;
        let diff = (sess.scalar_value(s_short) - sess2.scalar_value(s_long)).abs();
        checks.push(Check::new(
            format!("ranker score invariant to padding capacity ({bits}-bit)"),
            diff == 0.0,
            format!("score delta {diff:.3e}"),
        ));
    }

    Ok(checks)
}

fn flops_check() -> Check {
    let r = flops_report(64, 300, 128);
    let ok = (r.reduction - 0.822).abs() <= 0.0005;
    Check::new(
        "attention complexity reduction at (L=64, B=300, d=128)",
        ok,
        format!("reduction {:.4} (target 0.822 +- 0.0005)", r.reduction),
    )
}

/// Run every verification suite. `quick` trims the equivalence grid seeds.
pub fn run_all(quick: bool) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    checks.extend(equivalence_checks(quick)?);
    checks.push(flops_check());
    checks.extend(gradient_checks()?);
    checks.extend(leakage_check::<f32>()?);
    checks.extend(leakage_check::<f64>()?);
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_equivalence_grid() {
        let d32 = equivalence_max_diff::<f32>(&[2, 8], &[1, 4], &[4, 16], 3).unwrap();
        let d64 = equivalence_max_diff::<f64>(&[2, 8], &[1, 4], &[4, 16], 3).unwrap();
        assert!(d32 <= EQUIV_TOL_32, "{d32}");
        assert!(d64 <= EQUIV_TOL_64, "{d64}");
    }

    #[test]
    fn leakage_suite_passes() {
        for check in leakage_check::<f32>().unwrap() {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
    }
}
