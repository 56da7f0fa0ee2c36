//! Main transformer encoder with an appended context token.
//!
//! The token sequence T gets a learned context token appended at position N
//! and a learned position embedding added, then runs through `l` pre-norm
//! residual layers of multi-head self-attention and a GELU MLP. The output
//! splits into per-patch features F_p (rows 0..N) and the context feature
//! F_c (row N). Patch-token slices at configured intermediate layers are
//! exposed for auxiliary supervision.

use crate::nn::{linear, mhsa, AttentionWeights};
use crate::optim::{Binding, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::TokenGrid;
use rand::Rng;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub d: usize,
    pub l: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub tap_layers: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { d: 64, l: 4, heads: 4, mlp_ratio: 2, tap_layers: vec![2, 3] }
    }
}

impl BackboneConfig {
    /// Paper-shape variant: 14 layers with taps at 5, 8 and 11.
    pub fn paper_shape() -> Self {
        BackboneConfig { d: 384, l: 14, heads: 6, mlp_ratio: 3, tap_layers: vec![5, 8, 11] }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(format!("d={} must be divisible by heads={}", self.d, self.heads));
        }
        for &t in &self.tap_layers {
            if t < 1 || t > self.l {
                return Err(format!("tap layer {t} outside [1, {}]", self.l));
            }
        }
        Ok(())
    }
}

/// Registers context token, position embedding and all layer parameters under
/// "backbone.*". `n_tokens` is the configured patch-token count N.
pub fn init_params<R: Rng>(
    store: &mut ParamStore,
    cfg: &BackboneConfig,
    n_tokens: usize,
    rng: &mut R,
) {
    let d = cfg.d;
    store.register("backbone.t_con", Tensor::randn(&[1, d], 0.02, rng));
    store.register("backbone.pos_embed", Tensor::randn(&[n_tokens + 1, d], 0.02, rng));
    let std = (2.0 / (2 * d) as f64).sqrt();
    for i in 1..=cfg.l {
        let pre = format!("backbone.layer{i}");
        store.register(&format!("{pre}.ln1_g"), Tensor::full(&[d], 1.0));
        store.register(&format!("{pre}.ln1_b"), Tensor::zeros(&[d]));
        for name in ["wq", "wk", "wv", "wo"] {
            store.register(&format!("{pre}.{name}"), Tensor::randn(&[d, d], std, rng));
            store.register(&format!("{pre}.b{}", &name[1..]), Tensor::zeros(&[d]));
        }
        store.register(&format!("{pre}.ln2_g"), Tensor::full(&[d], 1.0));
        store.register(&format!("{pre}.ln2_b"), Tensor::zeros(&[d]));
        let hidden = cfg.mlp_ratio * d;
        let std1 = (2.0 / (d + hidden) as f64).sqrt();
        store.register(&format!("{pre}.mlp.w1"), Tensor::randn(&[d, hidden], std1, rng));
        store.register(&format!("{pre}.mlp.b1"), Tensor::zeros(&[hidden]));
        store.register(&format!("{pre}.mlp.w2"), Tensor::randn(&[hidden, d], std1, rng));
        store.register(&format!("{pre}.mlp.b2"), Tensor::zeros(&[d]));
    }
}

/// Bilinear resize of the patch rows of a position embedding to a new grid.
/// The context row (last) is kept as-is.
pub fn resize_pos_embed(e: &Tensor, old: (usize, usize), new: (usize, usize)) -> Tensor {
    let d = e.shape()[1];
    assert_eq!(e.shape()[0], old.0 * old.1 + 1);
    let (oh, ow) = old;
    let (nh, nw) = new;
    let mut out = Tensor::zeros(&[nh * nw + 1, d]);
    for y in 0..nh {
        let fy = if nh == 1 { 0.0 } else { y as f64 * (oh - 1) as f64 / (nh - 1) as f64 };
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(oh - 1);
        let ty = fy - y0 as f64;
        for x in 0..nw {
            let fx = if nw == 1 { 0.0 } else { x as f64 * (ow - 1) as f64 / (nw - 1) as f64 };
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(ow - 1);
            let tx = fx - x0 as f64;
            for c in 0..d {
                let g = |yy: usize, xx: usize| e.data()[(yy * ow + xx) * d + c];
                let top = g(y0, x0) * (1.0 - tx) + g(y0, x1) * tx;
                let bot = g(y1, x0) * (1.0 - tx) + g(y1, x1) * tx;
                out.data_mut()[(y * nw + x) * d + c] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    let last_src = (oh * ow) * d;
    let last_dst = (nh * nw) * d;
    out.data_mut()[last_dst..last_dst + d].copy_from_slice(&e.data()[last_src..last_src + d]);
    out
}

/// T0 = [T; t_con] + E
pub fn append_context(tape: &mut Tape, tokens: Var, t_con: Var, e: Var) -> Var {
    let n = tape.value(tokens).shape()[0];
    let en = tape.value(e).shape()[0];
    assert_eq!(en, n + 1, "position embedding rows {en} vs N+1 = {}", n + 1);
    let seq = tape.concat_rows(tokens, t_con);
    tape.add(seq, e)
}

fn attention_weights(binding: &Binding, prefix: &str) -> AttentionWeights {
    AttentionWeights {
        wq: binding.get(&format!("{prefix}.wq")),
        bq: binding.get(&format!("{prefix}.bq")),
        wk: binding.get(&format!("{prefix}.wk")),
        bk: binding.get(&format!("{prefix}.bk")),
        wv: binding.get(&format!("{prefix}.wv")),
        bv: binding.get(&format!("{prefix}.bv")),
    }
}

/// One pre-norm residual block: x + proj(MHSA(LN(x))), then x + MLP(LN(x)).
pub fn encoder_layer(
    tape: &mut Tape,
    binding: &Binding,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Var {
    let ln1_g = binding.get(&format!("{prefix}.ln1_g"));
    let ln1_b = binding.get(&format!("{prefix}.ln1_b"));
    let h = tape.layer_norm(x, ln1_g, ln1_b);
    let w = attention_weights(binding, prefix);
    let a = mhsa(tape, h, &w, heads);
    let wo = binding.get(&format!("{prefix}.wo"));
    let bo = binding.get(&format!("{prefix}.bo"));
    let a = linear(tape, a, wo, bo);
    let x = tape.add(x, a);
    let ln2_g = binding.get(&format!("{prefix}.ln2_g"));
    let ln2_b = binding.get(&format!("{prefix}.ln2_b"));
    let h2 = tape.layer_norm(x, ln2_g, ln2_b);
    let w1 = binding.get(&format!("{prefix}.mlp.w1"));
    let b1 = binding.get(&format!("{prefix}.mlp.b1"));
    let w2 = binding.get(&format!("{prefix}.mlp.w2"));
    let b2 = binding.get(&format!("{prefix}.mlp.b2"));
    let m = linear(tape, h2, w1, b1);
    let m = tape.gelu(m);
    let m = linear(tape, m, w2, b2);
    tape.add(x, m)
}

pub struct EncodeOut {
    /// Patch features, [N, d]; reshapeable to [d, grid_h, grid_w].
    pub f_p: Var,
    /// Context feature, [1, d].
    pub f_c: Var,
    /// Patch-token slices at tap layers, ascending layer order.
    pub taps: Vec<(usize, Var)>,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Runs the full encoder and splits the result per patch/context.
pub fn encode(
    tape: &mut Tape,
    binding: &Binding,
    t: &TokenGrid,
    cfg: &BackboneConfig,
) -> EncodeOut {
    let n = t.len();
    let t_con = binding.get("backbone.t_con");
    let e_param = binding.get("backbone.pos_embed");
    let e = if tape.value(e_param).shape()[0] == n + 1 {
        e_param
    } else {
        // Inference at a resolution other than the training one: interpolate
        // the stored grid. Non-differentiable by construction.
        let stored = tape.value(e_param).clone();
        let rows = stored.shape()[0] - 1;
        let side = (rows as f64).sqrt().round() as usize;
        assert_eq!(side * side, rows, "stored position embedding is not square");
        eprintln!(
            "warning: interpolating position embedding {side}x{side} -> {}x{}",
            t.grid_h, t.grid_w
        );
        let resized = resize_pos_embed(&stored, (side, side), (t.grid_h, t.grid_w));
        tape.constant(resized)
    };
    let mut x = append_context(tape, t.tokens, t_con, e);
    let mut taps = Vec::new();
    for i in 1..=cfg.l {
        x = encoder_layer(tape, binding, &format!("backbone.layer{i}"), x, cfg.heads);
        if cfg.tap_layers.contains(&i) {
            taps.push((i, tape.slice_rows(x, 0, n)));
        }
    }
    let f_p = tape.slice_rows(x, 0, n);
    let f_c = tape.slice_rows(x, n, n + 1);
    EncodeOut { f_p, f_c, taps, grid_h: t.grid_h, grid_w: t.grid_w }
}
