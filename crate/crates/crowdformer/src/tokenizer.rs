//! Overlapping split and two-stage tokens reduction.
//!
//! An image is unfolded into overlapping k x k windows, each window flattened
//! channel-major/row/column into one token. A small single-head transformer
//! layer mixes tokens, the token grid is reassembled into an image-shaped
//! tensor, and the split repeats. After the third split the tokens are
//! linearly projected to the final model width.

use crate::nn::{linear, mhsa, AttentionWeights};
use crate::optim::{Binding, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{window_count, Tensor};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TokenizerError {
    #[error("invalid split spec (k={k}, s={s}, p={p}): {reason}")]
    InvalidSpec { k: usize, s: usize, p: usize, reason: String },
    #[error("stage {stage} collapses the {axis} axis: {len}+2*{p} < k={k}")]
    StageCollapse { stage: usize, axis: &'static str, len: usize, k: usize, p: usize },
}

/// Sliding-window geometry for one split stage. Overlap (s < k) is enforced
/// at construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitSpec {
    pub k: usize,
    pub s: usize,
    pub p: usize,
}

impl SplitSpec {
    pub fn new(k: usize, s: usize, p: usize) -> Result<SplitSpec, TokenizerError> {
        let fail = |reason: &str| TokenizerError::InvalidSpec {
            k,
            s,
            p,
            reason: reason.to_string(),
        };
        if k < 1 || s < 1 {
            return Err(fail("k and s must be >= 1"));
        }
        if s >= k {
            return Err(fail("stride must be smaller than the window (overlap required)"));
        }
        Ok(SplitSpec { k, s, p })
    }

    /// Grid size after applying this split to a length: floor((len+2p-k)/s)+1.
    pub fn out_len(&self, len: usize) -> Option<usize> {
        window_count(len, self.k, self.s, self.p)
    }
}

/// Token sequence plus the 2-D grid it reshapes to.
pub struct TokenGrid {
    pub tokens: Var,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub stage_specs: [SplitSpec; 3],
    pub reduction_dim: usize,
    pub final_dim: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            stage_specs: [
                SplitSpec { k: 7, s: 4, p: 3 },
                SplitSpec { k: 3, s: 2, p: 1 },
                SplitSpec { k: 3, s: 2, p: 1 },
            ],
            reduction_dim: 64,
            final_dim: 64,
        }
    }
}

impl TokenizerConfig {
    /// Grid shape after each stage; fails with the offending stage index if a
    /// stage would collapse an axis.
    pub fn plan(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>, TokenizerError> {
        let mut dims = Vec::with_capacity(3);
        let (mut ch, mut cw) = (h, w);
        for (stage, spec) in self.stage_specs.iter().enumerate() {
            let collapse = |axis, len| TokenizerError::StageCollapse {
                stage,
                axis,
                len,
                k: spec.k,
                p: spec.p,
            };
            ch = spec.out_len(ch).ok_or_else(|| collapse("height", ch))?;
            cw = spec.out_len(cw).ok_or_else(|| collapse("width", cw))?;
            dims.push((ch, cw));
        }
        Ok(dims)
    }

    /// Final token count; depends only on the input shape.
    pub fn token_count(&self, h: usize, w: usize) -> Result<usize, TokenizerError> {
        let dims = self.plan(h, w)?;
        let (h2, w2) = dims[2];
        Ok(h2 * w2)
    }

    fn stage_in_dim(&self, stage: usize, channels: usize) -> usize {
        let k2 = self.stage_specs[stage].k * self.stage_specs[stage].k;
        if stage == 0 {
            channels * k2
        } else {
            self.reduction_dim * k2
        }
    }
}

/// Registers tokenizer parameters under "tokenizer.*".
pub fn init_params<R: Rng>(
    store: &mut ParamStore,
    cfg: &TokenizerConfig,
    channels: usize,
    rng: &mut R,
) {
    let d = cfg.reduction_dim;
    for stage in 0..2 {
        let in_dim = cfg.stage_in_dim(stage, channels);
        let pre = format!("tokenizer.stage{stage}");
        let std = (2.0 / (in_dim + d) as f64).sqrt();
        for name in ["wq", "wk", "wv"] {
            store.register(&format!("{pre}.{name}"), Tensor::randn(&[in_dim, d], std, rng));
            store.register(&format!("{pre}.b{}", &name[1..]), Tensor::zeros(&[d]));
        }
        store.register(&format!("{pre}.ln_g"), Tensor::full(&[d], 1.0));
        store.register(&format!("{pre}.ln_b"), Tensor::zeros(&[d]));
        let hidden = 2 * d;
        let std1 = (2.0 / (d + hidden) as f64).sqrt();
        store.register(&format!("{pre}.mlp.w1"), Tensor::randn(&[d, hidden], std1, rng));
        store.register(&format!("{pre}.mlp.b1"), Tensor::zeros(&[hidden]));
        store.register(&format!("{pre}.mlp.w2"), Tensor::randn(&[hidden, d], std1, rng));
        store.register(&format!("{pre}.mlp.b2"), Tensor::zeros(&[d]));
    }
    let proj_in = cfg.stage_in_dim(2, channels);
    let std = (2.0 / (proj_in + cfg.final_dim) as f64).sqrt();
    store.register("tokenizer.proj.w", Tensor::randn(&[proj_in, cfg.final_dim], std, rng));
    store.register("tokenizer.proj.b", Tensor::zeros(&[cfg.final_dim]));
}

/// Unfold one split stage; rows are flattened windows in row-major grid order.
pub fn overlapping_split(
    tape: &mut Tape,
    x: Var,
    spec: &SplitSpec,
) -> Result<TokenGrid, TokenizerError> {
    let shape = tape.value(x).shape().to_vec();
    assert_eq!(shape.len(), 3, "overlapping_split expects [c, h, w]");
    let grid_h = spec.out_len(shape[1]).ok_or(TokenizerError::StageCollapse {
        stage: 0,
        axis: "height",
        len: shape[1],
        k: spec.k,
        p: spec.p,
    })?;
    let grid_w = spec.out_len(shape[2]).ok_or(TokenizerError::StageCollapse {
        stage: 0,
        axis: "width",
        len: shape[2],
        k: spec.k,
        p: spec.p,
    })?;
    let tokens = tape.unfold(x, spec.k, spec.s, spec.p);
    Ok(TokenGrid { tokens, grid_h, grid_w })
}

/// One tokens-reduction transformer layer: single-head attention projecting
/// the (wide) window tokens down to the reduction width, then a residual MLP
/// behind a layer norm.
pub fn reduction_layer(
    tape: &mut Tape,
    binding: &Binding,
    prefix: &str,
    z: TokenGrid,
) -> TokenGrid {
    let w = AttentionWeights {
        wq: binding.get(&format!("{prefix}.wq")),
        bq: binding.get(&format!("{prefix}.bq")),
        wk: binding.get(&format!("{prefix}.wk")),
        bk: binding.get(&format!("{prefix}.bk")),
        wv: binding.get(&format!("{prefix}.wv")),
        bv: binding.get(&format!("{prefix}.bv")),
    };
    let attn = mhsa(tape, z.tokens, &w, 1);
    let ln_g = binding.get(&format!("{prefix}.ln_g"));
    let ln_b = binding.get(&format!("{prefix}.ln_b"));
    let normed = tape.layer_norm(attn, ln_g, ln_b);
    let w1 = binding.get(&format!("{prefix}.mlp.w1"));
    let b1 = binding.get(&format!("{prefix}.mlp.b1"));
    let w2 = binding.get(&format!("{prefix}.mlp.w2"));
    let b2 = binding.get(&format!("{prefix}.mlp.b2"));
    let h = linear(tape, normed, w1, b1);
    let h = tape.gelu(h);
    let m = linear(tape, h, w2, b2);
    let tokens = tape.add(attn, m);
    TokenGrid { tokens, grid_h: z.grid_h, grid_w: z.grid_w }
}

/// Token grid [N, d] -> image-shaped [d, grid_h, grid_w] for the next split.
fn grid_to_image(tape: &mut Tape, z: &TokenGrid) -> Var {
    let d = tape.value(z.tokens).shape()[1];
    let t = tape.transpose(z.tokens);
    tape.reshape(t, &[d, z.grid_h, z.grid_w])
}

/// Full pipeline: split, reduce, split, reduce, split, project. Returns T
/// with N = N2 tokens of width `final_dim`.
pub fn tokens_reduction(
    tape: &mut Tape,
    binding: &Binding,
    image: Var,
    cfg: &TokenizerConfig,
) -> Result<TokenGrid, TokenizerError> {
    let shape = tape.value(image).shape().to_vec();
    cfg.plan(shape[1], shape[2])?;
    let z0 = overlapping_split(tape, image, &cfg.stage_specs[0])?;
    let z1 = reduction_layer(tape, binding, "tokenizer.stage0", z0);
    let img1 = grid_to_image(tape, &z1);
    let z1s = overlapping_split(tape, img1, &cfg.stage_specs[1])?;
    let z2 = reduction_layer(tape, binding, "tokenizer.stage1", z1s);
    let img2 = grid_to_image(tape, &z2);
    let z2s = overlapping_split(tape, img2, &cfg.stage_specs[2])?;
    let w = binding.get("tokenizer.proj.w");
    let b = binding.get("tokenizer.proj.b");
    let tokens = linear(tape, z2s.tokens, w, b);
    Ok(TokenGrid { tokens, grid_h: z2s.grid_h, grid_w: z2s.grid_w })
}
