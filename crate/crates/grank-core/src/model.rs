//! Parameter registry for the whole model: shared item embedding, generator
//! tower, and ranker tower, with stable names for checkpointing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::data::{ItemId, UserRecord, FEATURE_DIM};
use crate::error::Result;
use crate::numeric::{Activation, Init, Mlp, ParamId, ParamSet, Scalar};

#[derive(Debug, Clone)]
pub struct DecoderLayerHandles {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub ffn: Mlp,
}

#[derive(Debug, Clone)]
pub struct GeneratorHandles {
    /// Interaction encoder: `[e_t; f_t]` (d + d_f) -> d.
    pub input_mlp: Mlp,
    /// Query token builder: `[u; pools]` (d_u + 3d) -> d.
    pub query_mlp: Mlp,
    /// Learned absolute positions for the short sequence, L x d.
    pub pos_embedding: ParamId,
    pub layers: Vec<DecoderLayerHandles>,
    /// Candidate-token encoder, d -> d (training only).
    pub aux_mlp: Mlp,
    /// Item side of the retrieval head, d -> d_top.
    pub ntp_item_mlp: Mlp,
    /// User side of the retrieval head, d -> d_top (linear).
    pub ntp_user_proj: Mlp,
    /// Auxiliary score head on candidate outputs, d -> 1.
    pub sa_mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct RankerHandles {
    /// Long-history row encoder, d -> d.
    pub long_mlp: Mlp,
    /// Candidate encoder, d -> d.
    pub query_mlp: Mlp,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    /// Context-to-score head, d -> 1.
    pub ca_mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamSet<S>,
    /// Shared item embedding table, |I| x d.
    pub embedding: ParamId,
    pub generator: GeneratorHandles,
    pub ranker: RankerHandles,
}

impl<S: Scalar> Model<S> {
    /// Register all parameters with fan-in uniform init (seeded).
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model<S>> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = cfg.generator.d;
        let hidden = cfg.generator.mlp_hidden;
        let act = cfg.generator.mlp_activation;

        // The table holds activations, not projection weights: rows are read
        // out directly, so they get an activation-scale init rather than the
        // fan-in rule. Too small and every downstream attention kernel
        // starts flat; full unit variance stalls the score heads early.
        let embedding = params.register(
            "shared.item_embedding",
            cfg.n_items,
            d,
            Init::Uniform(1.0),
            &mut rng,
        );

        let input_mlp = Mlp::register(
            &mut params,
            &mut rng,
            "generator.input_mlp",
            &[d + cfg.d_f, hidden, d],
            act,
            Activation::Identity,
        );
        let query_mlp = Mlp::register(
            &mut params,
            &mut rng,
            "generator.query_token_mlp",
            &[cfg.d_u + 3 * d, hidden, d],
            act,
            Activation::Identity,
        );
        let pos_embedding = params.register(
            "generator.pos_embedding",
            cfg.generator.l_short,
            d,
            Init::UnitVariance,
            &mut rng,
        );
        let mut layers = Vec::new();
        for i in 0..cfg.generator.layers {
            let p = format!("generator.layer{i}");
            layers.push(DecoderLayerHandles {
                ln1_gain: params.register(&format!("{p}.ln1.gain"), 1, d, Init::Ones, &mut rng),
                ln1_bias: params.register(&format!("{p}.ln1.bias"), 1, d, Init::Zeros, &mut rng),
                ln2_gain: params.register(&format!("{p}.ln2.gain"), 1, d, Init::Ones, &mut rng),
                ln2_bias: params.register(&format!("{p}.ln2.bias"), 1, d, Init::Zeros, &mut rng),
                w_q: params.register(&format!("{p}.wq"), d, d, Init::FanIn(d), &mut rng),
                w_k: params.register(&format!("{p}.wk"), d, d, Init::FanIn(d), &mut rng),
                w_v: params.register(&format!("{p}.wv"), d, d, Init::FanIn(d), &mut rng),
                ffn: Mlp::register(
                    &mut params,
                    &mut rng,
                    &format!("{p}.ffn"),
                    &[d, 4 * d, d],
                    Activation::Gelu,
                    Activation::Identity,
                ),
            });
        }
        let aux_mlp = Mlp::register(
            &mut params,
            &mut rng,
            "generator.aux_mlp",
            &[d, hidden, d],
            act,
            Activation::Identity,
        );
        let ntp_item_mlp = Mlp::register(
            &mut params,
            &mut rng,
            "generator.ntp_item_mlp",
            &[d, hidden, cfg.generator.d_top],
            act,
            Activation::Identity,
        );
        let ntp_user_proj = Mlp::register(
            &mut params,
            &mut rng,
            "generator.ntp_user_proj",
            &[d, cfg.generator.d_top],
            Activation::Identity,
            Activation::Identity,
        );
        let sa_mlp = Mlp::register(
            &mut params,
            &mut rng,
            "generator.sa_head",
            &[d, hidden, 1],
            act,
            Activation::Identity,
        );

        let ranker = RankerHandles {
            long_mlp: Mlp::register(
                &mut params,
                &mut rng,
                "ranker.long_mlp",
                &[d, hidden, d],
                act,
                Activation::Identity,
            ),
            query_mlp: Mlp::register(
                &mut params,
                &mut rng,
                "ranker.query_mlp",
                &[d, hidden, d],
                act,
                Activation::Identity,
            ),
            w_q: params.register("ranker.wq", d, cfg.ranker.d_k, Init::FanIn(d), &mut rng),
            w_k: params.register("ranker.wk", d, cfg.ranker.d_k, Init::FanIn(d), &mut rng),
            w_v: params.register("ranker.wv", d, d, Init::FanIn(d), &mut rng),
            ca_mlp: Mlp::register(
                &mut params,
                &mut rng,
                "ranker.ca_head",
                &[d, hidden, 1],
                act,
                Activation::Identity,
            ),
        };
        // Seed both sides of the cross-attention identically so candidate-
        // to-history logits start out as a similarity kernel over the shared
        // embedding; the sides train independently afterwards. Same draw
        // distribution, tied realization.
        {
            let q_ids: Vec<_> = ranker.query_mlp.layers.iter().map(|l| (l.weight, l.bias)).collect();
            let l_ids: Vec<_> = ranker.long_mlp.layers.iter().map(|l| (l.weight, l.bias)).collect();
            for ((qw, qb), (lw, lb)) in q_ids.into_iter().zip(l_ids) {
                params.get_mut(qw).value = params.value(lw).clone();
                params.get_mut(qb).value = params.value(lb).clone();
            }
            params.get_mut(ranker.w_k).value = params.value(ranker.w_q).clone();
        }

        Ok(Model {
            cfg,
            params,
            embedding,
            generator: GeneratorHandles {
                input_mlp,
                query_mlp,
                pos_embedding,
                layers,
                aux_mlp,
                ntp_item_mlp,
                ntp_user_proj,
                sa_mlp,
            },
            ranker,
        })
    }

    pub fn convert<T: Scalar>(&self) -> Model<T> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.convert(),
            embedding: self.embedding,
            generator: self.generator.clone(),
            ranker: self.ranker.clone(),
        }
    }

    /// Same parameters with a different ranker history capacity (sweeps).
    pub fn with_long_len(&self, long_len: usize) -> Model<S> {
        let mut m = self.clone();
        m.cfg.ranker.long_len = long_len;
        m
    }
}

/// Model-facing view of one user: trimmed sequences and fixed-width vectors.
#[derive(Debug, Clone)]
pub struct UserFeatures {
    /// Last `l_short` interactions, oldest first: ids and feature rows.
    pub short_items: Vec<ItemId>,
    pub short_features: Vec<[f64; FEATURE_DIM]>,
    /// Demographics zero-filled or truncated to the configured width.
    pub demographics: Vec<f64>,
    pub seq_rs: Vec<ItemId>,
    pub seq_click: Vec<ItemId>,
    pub seq_long_view: Vec<ItemId>,
    /// Last `long_len` item ids, oldest first.
    pub long_items: Vec<ItemId>,
}

impl UserFeatures {
    pub fn from_record(rec: &UserRecord, cfg: &ModelConfig) -> UserFeatures {
        let l = cfg.generator.l_short;
        let start = rec.history.len().saturating_sub(l);
        let recent = &rec.history[start..];
        let mut demographics = rec.demographics.clone();
        demographics.resize(cfg.d_u, 0.0);
        UserFeatures {
            short_items: recent.iter().map(|i| i.item_id).collect(),
            short_features: recent.iter().map(|i| i.features()).collect(),
            demographics,
            seq_rs: rec.seq_rs(),
            seq_click: rec.seq_click(),
            seq_long_view: rec.seq_long_view(),
            long_items: rec.long_history_ids(cfg.ranker.long_len),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::Interaction;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.n_items = 10;
        cfg.generator.d = 8;
        cfg.generator.d_top = 8;
        cfg.generator.mlp_hidden = 8;
        cfg.generator.l_short = 4;
        cfg.generator.layers = 1;
        cfg.ranker.long_len = 6;
        cfg.ranker.d_k = 8;
        cfg
    }

    #[test]
    fn builds_with_stable_names() {
        let m: Model<f32> = Model::new(tiny_cfg(), 1).unwrap();
        assert!(m.params.lookup("shared.item_embedding").is_some());
        assert!(m.params.lookup("generator.layer0.wq").is_some());
        assert!(m.params.lookup("ranker.ca_head.w0").is_some());
        // deterministic given seed
        let m2: Model<f32> = Model::new(tiny_cfg(), 1).unwrap();
        for (id, p) in m.params.iter() {
            assert_eq!(p.value, m2.params.get(id).value, "{}", p.name);
        }
    }

    #[test]
    fn user_features_trim_and_pad() {
        let cfg = tiny_cfg();
        let history: Vec<Interaction> = (0..6)
            .map(|t| Interaction {
                item_id: t,
                timestamp: t as i64,
                dwell: 0.8,
                engagement: 2,
            })
            .collect();
        let rec = UserRecord {
            user_id: 0,
            demographics: vec![1.0],
            history,
            target: Interaction {
                item_id: 9,
                timestamp: 99,
                dwell: 0.5,
                engagement: 1,
            },
        };
        let f = UserFeatures::from_record(&rec, &cfg);
        assert_eq!(f.short_items, vec![2, 3, 4, 5]);
        assert_eq!(f.demographics.len(), cfg.d_u);
        assert_eq!(f.long_items, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(f.seq_long_view.len(), 6);
    }
}
