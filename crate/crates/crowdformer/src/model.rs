//! The assembled crowd counter: tokenizer -> encoder -> TAM -> decoder, with
//! RTM and auxiliary decoders hanging off the training graph.

use crate::backbone;
use crate::config::RunConfig;
use crate::heads;
use crate::optim::{Binding, ParamStore};
use crate::tape::{Tape, Var};
use crate::tokenizer;
use rand::Rng;

pub struct CrowdModel {
    pub store: ParamStore,
    pub cfg: RunConfig,
}

pub struct ForwardOut {
    /// Main density map [h_d, w_d].
    pub density: Var,
    /// Auxiliary density maps from tap layers, ascending layer order.
    pub aux: Vec<Var>,
    /// RTM count estimate, present when the model was built with RTM.
    pub d_hat: Option<Var>,
}

impl CrowdModel {
    /// Initializes all parameter subgraphs selected by the config. The
    /// position embedding is sized for the training crop.
    pub fn init<R: Rng>(cfg: &RunConfig, rng: &mut R) -> Result<CrowdModel, String> {
        cfg.validate()?;
        let n_tokens = cfg.crop_tokens()?;
        let mut store = ParamStore::new();
        tokenizer::init_params(&mut store, &cfg.tokenizer, 3, rng);
        backbone::init_params(&mut store, &cfg.backbone, n_tokens, rng);
        if cfg.use_tam {
            heads::init_tam_params(&mut store, cfg.backbone.d, &cfg.tam, rng);
        }
        if cfg.use_rtm {
            heads::init_rtm_params(&mut store, cfg.backbone.d, rng);
        }
        heads::init_decoder_params(&mut store, "decoder", cfg.backbone.d, &cfg.decoder, rng);
        for &tap in &cfg.backbone.tap_layers {
            heads::init_decoder_params(
                &mut store,
                &format!("aux{tap}"),
                cfg.backbone.d,
                &cfg.decoder,
                rng,
            );
        }
        Ok(CrowdModel {
            store,
            cfg: cfg.clone(),
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        self.store.names().map(|s| s.to_string()).collect()
    }

    /// Full training-graph forward pass on one image [3, h, w].
    pub fn forward(&self, tape: &mut Tape, binding: &Binding, image: Var) -> ForwardOut {
        forward_with(tape, binding, image, &self.cfg)
    }
}

/// Forward pass driven by a config alone, for callers holding the parameter
/// store mutably elsewhere.
pub fn forward_with(tape: &mut Tape, binding: &Binding, image: Var, cfg: &RunConfig) -> ForwardOut {
    let grid = tokenizer::tokens_reduction(tape, binding, image, &cfg.tokenizer)
        .unwrap_or_else(|e| panic!("tokenization failed: {e}"));
    let enc = backbone::encode(tape, binding, &grid, &cfg.backbone);
    let d = cfg.backbone.d;
    let to_image = |tape: &mut Tape, tokens: Var| {
        let t = tape.transpose(tokens);
        tape.reshape(t, &[d, enc.grid_h, enc.grid_w])
    };
    let f_p = to_image(tape, enc.f_p);
    let features = if cfg.use_tam {
        let gate = heads::tam_gate(tape, binding, enc.f_c);
        heads::tam_recalibrate(tape, binding, f_p, gate)
    } else {
        f_p
    };
    let density = heads::decode_density(tape, binding, "decoder", features, &cfg.decoder);
    let mut aux = Vec::with_capacity(enc.taps.len());
    for (layer, tokens) in enc.taps {
        let img = to_image(tape, tokens);
        aux.push(heads::decode_density(
            tape,
            binding,
            &format!("aux{layer}"),
            img,
            &cfg.decoder,
        ));
    }
    let d_hat = cfg
        .use_rtm
        .then(|| heads::rtm_predict(tape, binding, enc.f_c));
    ForwardOut {
        density,
        aux,
        d_hat,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.tokenizer.reduction_dim = 8;
        cfg.tokenizer.final_dim = 8;
        cfg.backbone = crate::backbone::BackboneConfig {
            d: 8,
            l: 2,
            heads: 2,
            mlp_ratio: 2,
            tap_layers: vec![1],
        };
        cfg.augment.crop_h = 32;
        cfg.augment.crop_w = 32;
        cfg
    }

    fn model(cfg: &RunConfig, seed: u64) -> CrowdModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CrowdModel::init(cfg, &mut rng).unwrap()
    }

    #[test]
    fn forward_shapes_match_config() {
        let cfg = tiny_config();
        let m = model(&cfg, 0);
        let mut tape = Tape::new();
        let binding = m.store.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let image = tape.leaf(Tensor::randn(&[3, 32, 32], 0.3, &mut rng), false);
        let out = m.forward(&mut tape, &binding, image);
        // 32 px at output stride 4 -> 8x8 map
        assert_eq!(tape.value(out.density).shape(), &[8, 8]);
        assert_eq!(out.aux.len(), 1);
        assert_eq!(tape.value(out.aux[0]).shape(), &[8, 8]);
        assert_eq!(tape.value(out.d_hat.unwrap()).shape(), &[1]);
        assert!(tape.value(out.density).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn ablation_switches_control_parameter_sets() {
        let full = model(&tiny_config(), 0);
        let mut no_tam_cfg = tiny_config();
        no_tam_cfg.use_tam = false;
        let no_tam = model(&no_tam_cfg, 0);
        let mut base_cfg = tiny_config();
        base_cfg.use_tam = false;
        base_cfg.use_rtm = false;
        let base = model(&base_cfg, 0);

        let names = |m: &CrowdModel| m.param_names();
        let full_n = names(&full);
        let no_tam_n = names(&no_tam);
        let base_n = names(&base);
        let only_in = |a: &[String], b: &[String]| -> Vec<String> {
            a.iter().filter(|n| !b.contains(n)).cloned().collect()
        };
        assert!(only_in(&full_n, &no_tam_n)
            .iter()
            .all(|n| n.starts_with("tam.")));
        assert!(!only_in(&full_n, &no_tam_n).is_empty());
        assert!(only_in(&no_tam_n, &base_n)
            .iter()
            .all(|n| n.starts_with("rtm.")));
        assert!(only_in(&base_n, &full_n).is_empty());
        let mut no_rtm = model(&base_cfg, 0);
        no_rtm.cfg.use_rtm = false;
        let mut tape = Tape::new();
        let binding = no_rtm.store.bind(&mut tape);
        let image = tape.leaf(Tensor::full(&[3, 32, 32], 0.5), false);
        let out = no_rtm.forward(&mut tape, &binding, image);
        assert!(out.d_hat.is_none());
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_config();
        let m = model(&cfg, 3);
        let run = || {
            let mut tape = Tape::new();
            let binding = m.store.bind(&mut tape);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let image = tape.leaf(Tensor::randn(&[3, 32, 32], 0.3, &mut rng), false);
            let out = m.forward(&mut tape, &binding, image);
            tape.value(out.density).clone()
        };
        assert_eq!(run(), run());
    }
}
