//! Prediction heads: channel recalibration from the context token (TAM),
//! count regression from the context token (RTM), and the upsampling decoder
//! that turns patch features into a nonnegative density map.

use crate::nn::linear;
use crate::optim::{Binding, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

/// Gate MLP bottleneck ratio and the recalibration conv shape.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TamConfig {
    pub reduction_ratio: usize,
}

impl Default for TamConfig {
    fn default() -> Self {
        TamConfig { reduction_ratio: 4 }
    }
}

/// Decoder geometry: how far the token grid is below input resolution and
/// the target density-map stride. The ratio must be a power of two; each
/// upsampling stage is a stride-2 transposed convolution halving the gap.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub token_downsample: usize,
    pub output_stride: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { token_downsample: 16, output_stride: 4 }
    }
}

impl DecoderConfig {
    pub fn up_stages(&self) -> usize {
        let ratio = self.token_downsample / self.output_stride;
        assert!(
            ratio >= 1 && ratio.is_power_of_two() && self.token_downsample % self.output_stride == 0,
            "token downsample {} vs output stride {} must give a power-of-two ratio",
            self.token_downsample,
            self.output_stride
        );
        ratio.trailing_zeros() as usize
    }

    fn stage_channels(&self, d: usize) -> Vec<usize> {
        let mut chans = vec![d];
        for _ in 0..self.up_stages() {
            chans.push((chans.last().unwrap() / 2).max(8));
        }
        chans
    }
}

pub fn init_tam_params<R: Rng>(store: &mut ParamStore, d: usize, cfg: &TamConfig, rng: &mut R) {
    let hidden = (d / cfg.reduction_ratio).max(1);
    let std1 = (2.0 / (d + hidden) as f64).sqrt();
    store.register("tam.gate.w1", Tensor::randn(&[d, hidden], std1, rng));
    store.register("tam.gate.b1", Tensor::zeros(&[hidden]));
    store.register("tam.gate.w2", Tensor::randn(&[hidden, d], std1, rng));
    store.register("tam.gate.b2", Tensor::zeros(&[d]));
    let std_c = (2.0 / (d * 9) as f64).sqrt();
    store.register("tam.conv.w", Tensor::randn(&[d, d, 3, 3], std_c, rng));
    store.register("tam.conv.b", Tensor::zeros(&[d]));
}

pub fn init_rtm_params<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) {
    let std = (2.0 / (2 * d) as f64).sqrt();
    store.register("rtm.w1", Tensor::randn(&[d, d], std, rng));
    store.register("rtm.b1", Tensor::zeros(&[d]));
    store.register("rtm.w2", Tensor::randn(&[d, 1], (2.0 / (d + 1) as f64).sqrt(), rng));
    store.register("rtm.b2", Tensor::zeros(&[1]));
}

/// Registers one decoder stack under `prefix` (e.g. "decoder", "aux2").
pub fn init_decoder_params<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    cfg: &DecoderConfig,
    rng: &mut R,
) {
    let chans = cfg.stage_channels(d);
    for j in 0..cfg.up_stages() {
        let (cin, cout) = (chans[j], chans[j + 1]);
        let std = (2.0 / (cin * 16) as f64).sqrt();
        store.register(&format!("{prefix}.deconv{j}.w"), Tensor::randn(&[cin, cout, 4, 4], std, rng));
        // Small positive bias: every ReLU layer starts strictly off its kink,
        // even where the incoming features are dead.
        store.register(&format!("{prefix}.deconv{j}.b"), Tensor::full(&[cout], 0.01));
    }
    let last = *chans.last().unwrap();
    store.register(
        &format!("{prefix}.out.w"),
        Tensor::randn(&[1, last, 1, 1], (2.0 / last as f64).sqrt(), rng),
    );
    store.register(&format!("{prefix}.out.b"), Tensor::full(&[1], 0.01));
}

/// F_c' = sigmoid(MLP(F_c)); components strictly inside (0, 1).
pub fn tam_gate(tape: &mut Tape, binding: &Binding, f_c: Var) -> Var {
    let w1 = binding.get("tam.gate.w1");
    let b1 = binding.get("tam.gate.b1");
    let w2 = binding.get("tam.gate.w2");
    let b2 = binding.get("tam.gate.b2");
    let h = linear(tape, f_c, w1, b1);
    let h = tape.relu(h);
    let z = linear(tape, h, w2, b2);
    tape.sigmoid(z)
}

/// F_f = F_p + conv(F_p) * gate, broadcast per channel. `f_p` is the spatial
/// reshape [d, h, w]; `gate` has one entry per channel.
pub fn tam_recalibrate(tape: &mut Tape, binding: &Binding, f_p: Var, gate: Var) -> Var {
    let shape = tape.value(f_p).shape().to_vec();
    assert_eq!(shape.len(), 3, "tam_recalibrate expects [d, h, w]");
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    assert_eq!(tape.value(gate).numel(), d, "gate length {} vs {d} channels", tape.value(gate).numel());
    let cw = binding.get("tam.conv.w");
    let cb = binding.get("tam.conv.b");
    let fp_prime = tape.conv2d(f_p, cw, cb, 1, 1);
    let flat = tape.reshape(fp_prime, &[d, h * w]);
    let gate_vec = tape.reshape(gate, &[d]);
    let scaled = tape.scale_rows(flat, gate_vec);
    let scaled = tape.reshape(scaled, &[d, h, w]);
    tape.add(f_p, scaled)
}

/// Scalar count estimate from the context feature; unconstrained sign.
pub fn rtm_predict(tape: &mut Tape, binding: &Binding, f_c: Var) -> Var {
    let w1 = binding.get("rtm.w1");
    let b1 = binding.get("rtm.b1");
    let w2 = binding.get("rtm.w2");
    let b2 = binding.get("rtm.b2");
    let h = linear(tape, f_c, w1, b1);
    let h = tape.relu(h);
    let out = linear(tape, h, w2, b2);
    tape.reshape(out, &[1])
}

/// Upsampling decoder: stride-2 transposed convolutions with ReLU between
/// stages, a 1x1 convolution to one channel, and a final ReLU enforcing a
/// nonnegative map. Returns [h_d, w_d].
pub fn decode_density(
    tape: &mut Tape,
    binding: &Binding,
    prefix: &str,
    features: Var,
    cfg: &DecoderConfig,
) -> Var {
    let mut x = features;
    for j in 0..cfg.up_stages() {
        let w = binding.get(&format!("{prefix}.deconv{j}.w"));
        let b = binding.get(&format!("{prefix}.deconv{j}.b"));
        x = tape.conv_transpose2d(x, w, b, 2, 1);
        x = tape.relu(x);
    }
    let w = binding.get(&format!("{prefix}.out.w"));
    let b = binding.get(&format!("{prefix}.out.b"));
    let x = tape.conv2d(x, w, b, 1, 0);
    let x = tape.relu(x);
    let shape = tape.value(x).shape().to_vec();
    tape.reshape(x, &[shape[1], shape[2]])
}
