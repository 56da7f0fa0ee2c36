//! Drivers behind the CLI subcommands: dataset generation, the training
//! loop, evaluation, single-image inference, and the gradient-check harness.

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{self, CrowdSample};
use crate::gradcheck::{self, CheckRow};
use crate::losses::{self, GroundTruthGrid};
use crate::model::CrowdModel;
use crate::optim::Adam;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl RunError {
    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Numeric(_) => 3,
            RunError::Data(_) | RunError::Checkpoint(_) | RunError::Io { .. } => 4,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> RunError {
    RunError::Io { path: path.display().to_string(), source }
}

/// Generates `cfg.gen.scenes` synthetic scenes and writes them as a dataset.
pub fn gen_data(cfg: &RunConfig, seed: u64, out_dir: &Path) -> Result<usize, RunError> {
    cfg.validate().map_err(RunError::Config)?;
    let g = &cfg.gen;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<CrowdSample> = (0..g.scenes)
        .map(|_| {
            let scene = data::generate_scene(
                rng.gen(),
                (g.count_min, g.count_max),
                g.size_gradient,
                g.image_h,
                g.image_w,
            );
            let dots = scene.persons.iter().map(|p| (p.x, p.y)).collect();
            data::CrowdSample::new(data::render(&scene), dots, cfg.decoder.output_stride)
        })
        .collect();
    data::write_dataset(out_dir, &samples, cfg.decoder.output_stride)?;
    Ok(samples.len())
}

#[derive(Debug, serde::Serialize)]
struct StepRecord {
    step: u64,
    count: f64,
    ot: f64,
    tv: f64,
    rtm: f64,
    aux: Vec<f64>,
    total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: u64,
    pub final_loss: f64,
    pub train_mae: f64,
    pub best_val_mae: Option<f64>,
    pub loss_totals: Vec<f64>,
}

/// Gradient accumulation over a batch of already-augmented samples. Returns
/// the averaged per-term breakdown; the caller applies the optimizer step.
fn batch_grads(
    cfg: &RunConfig,
    store: &mut crate::optim::ParamStore,
    batch: &[CrowdSample],
    step: u64,
) -> StepRecord {
    let scale = 1.0 / batch.len() as f64;
    let mut rec = StepRecord {
        step,
        count: 0.0,
        ot: 0.0,
        tv: 0.0,
        rtm: 0.0,
        aux: vec![],
        total: 0.0,
    };
    store.zero_grads();
    for sample in batch {
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let image = tape.leaf(sample.image.clone(), false);
        let out = crate::model::forward_with(&mut tape, &binding, image, cfg);
        let (loss, bd) = losses::total_loss(
            &mut tape,
            out.density,
            &out.aux,
            &sample.gt,
            out.d_hat,
            &cfg.loss,
            &cfg.sinkhorn,
        );
        tape.backward(loss);
        store.accumulate_grads(&tape, &binding, scale);
        rec.count += scale * bd.count;
        rec.ot += scale * bd.ot;
        rec.tv += scale * bd.tv;
        rec.rtm += scale * bd.rtm;
        rec.total += scale * bd.total;
        if rec.aux.is_empty() {
            rec.aux = vec![0.0; bd.aux.len()];
        }
        for (acc, v) in rec.aux.iter_mut().zip(&bd.aux) {
            *acc += scale * v;
        }
    }
    rec
}

/// Learning rate at `step` (1-based): linear warmup to `peak`, then cosine
/// decay to 1% of peak over the remaining steps (or constant if disabled).
fn scheduled_lr(cfg: &RunConfig, peak: f64, step: u64, total_steps: u64) -> f64 {
    let warm = cfg.warmup_steps as u64;
    if warm > 0 && step <= warm {
        return peak * step as f64 / warm as f64;
    }
    if !cfg.cosine_lr {
        return peak;
    }
    let span = total_steps.saturating_sub(warm).max(1) as f64;
    let t = ((step - warm) as f64 / span).min(1.0);
    let floor = 0.01 * peak;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Scales all accumulated gradients so their global L2 norm is at most
/// `max_norm`.
fn clip_global_norm(store: &mut crate::optim::ParamStore, max_norm: f64) {
    let mut sq = 0.0;
    for (_, p) in store.iter() {
        if let Some(g) = &p.grad {
            sq += g.data().iter().map(|v| v * v).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, p) in store.iter_mut() {
            if let Some(g) = &mut p.grad {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
        }
    }
}

/// Predicted count for one sample under the current parameters.
fn predict_count(model: &CrowdModel, image: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let binding = model.store.bind(&mut tape);
    let image = tape.leaf(image.clone(), false);
    let out = model.forward(&mut tape, &binding, image);
    tape.value(out.density).sum()
}

fn train_mae(model: &CrowdModel, samples: &[CrowdSample]) -> f64 {
    let pred: Vec<f64> = samples.iter().map(|s| predict_count(model, &s.image)).collect();
    let gt: Vec<f64> = samples.iter().map(|s| s.gt.total()).collect();
    losses::metrics(&pred, &gt).mae
}

/// Full training loop; writes checkpoints under `cfg.checkpoint_dir` and a
/// JSON-lines loss log at `cfg.log_path`.
pub fn train(
    cfg: &RunConfig,
    train_samples: &[CrowdSample],
    val_samples: Option<&[CrowdSample]>,
) -> Result<TrainReport, RunError> {
    cfg.validate().map_err(RunError::Config)?;
    if train_samples.is_empty() {
        return Err(RunError::Config("empty training set".to_string()));
    }
    let ckpt_dir = Path::new(&cfg.checkpoint_dir);
    std::fs::create_dir_all(ckpt_dir).map_err(|e| io_err(ckpt_dir, e))?;
    let log_path = Path::new(&cfg.log_path);
    if let Some(parent) = log_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(log_path).map_err(|e| io_err(log_path, e))?,
    );

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = CrowdModel::init(cfg, &mut rng).map_err(RunError::Config)?;
    let mut adam = Adam::new(cfg.adam);
    let config_text = cfg.to_toml();
    let mut step: u64 = 0;
    let mut loss_totals = Vec::new();
    let mut final_loss = f64::NAN;
    let mut best_val_mae: Option<f64> = None;
    let mut indices: Vec<usize> = (0..train_samples.len()).collect();
    let steps_per_epoch = train_samples.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let peak_lr = cfg.adam.lr;

    for epoch in 1..=cfg.epochs {
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(cfg.batch_size) {
            let batch: Vec<CrowdSample> = chunk
                .iter()
                .map(|&i| data::augment(&train_samples[i], &cfg.augment, &mut rng))
                .collect();
            step += 1;
            let store = &mut model.store;
            let rec = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                batch_grads(cfg, store, &batch, step)
            }))
            .map_err(|payload| {
                let msg = payload
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "non-finite value in training step".to_string());
                RunError::Numeric(format!("step {step}: {msg}"))
            })?;
            if !rec.total.is_finite() {
                return Err(RunError::Numeric(format!("step {step}: loss {}", rec.total)));
            }
            if cfg.clip_grad_norm > 0.0 {
                clip_global_norm(&mut model.store, cfg.clip_grad_norm);
            }
            adam.cfg.lr = scheduled_lr(cfg, peak_lr, step, total_steps);
            adam.step(&mut model.store);
            final_loss = rec.total;
            loss_totals.push(rec.total);
            writeln!(log, "{}", serde_json::to_string(&rec).unwrap())
                .map_err(|e| io_err(log_path, e))?;
        }
        log.flush().map_err(|e| io_err(log_path, e))?;
        if epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs {
            checkpoint::quantize_store(&mut model.store);
            let path = ckpt_dir.join(format!("epoch{epoch:04}.ckpt"));
            checkpoint::save(&path, &model.store, &adam, &config_text)?;
            checkpoint::save(&ckpt_dir.join("last.ckpt"), &model.store, &adam, &config_text)?;
            if let Some(val) = val_samples {
                let mae = train_mae(&model, val);
                if best_val_mae.is_none_or(|b| mae < b) {
                    best_val_mae = Some(mae);
                    checkpoint::save(&ckpt_dir.join("best.ckpt"), &model.store, &adam, &config_text)?;
                }
            }
        }
    }
    Ok(TrainReport {
        steps: step,
        final_loss,
        train_mae: train_mae(&model, train_samples),
        best_val_mae,
        loss_totals,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalRow {
    pub id: String,
    pub pred: f64,
    pub gt: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mae: f64,
    pub mse: f64,
    pub nae: f64,
    pub nae_excluded: usize,
}

/// Rebuilds the model from the checkpoint's embedded config and restores the
/// saved parameters into it.
pub fn load_model(ckpt_path: &Path) -> Result<(CrowdModel, Adam), RunError> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let config_text = checkpoint::embedded_config(&ckpt)?;
    let cfg = RunConfig::from_toml(&config_text).map_err(RunError::Config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = CrowdModel::init(&cfg, &mut rng).map_err(RunError::Config)?;
    let mut adam = Adam::new(cfg.adam);
    checkpoint::restore(&ckpt, &mut model.store, &mut adam)?;
    Ok((model, adam))
}

pub fn evaluate(ckpt_path: &Path, dataset_dir: &Path) -> Result<EvalReport, RunError> {
    let (model, _) = load_model(ckpt_path)?;
    let samples = data::read_dataset(dataset_dir)?;
    if samples.is_empty() {
        return Err(RunError::Config("empty evaluation set".to_string()));
    }
    let rows: Vec<EvalRow> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| EvalRow {
            id: format!("{i:04}"),
            pred: predict_count(&model, &s.image),
            gt: s.gt.total(),
        })
        .collect();
    let pred: Vec<f64> = rows.iter().map(|r| r.pred).collect();
    let gt: Vec<f64> = rows.iter().map(|r| r.gt).collect();
    let m = losses::metrics(&pred, &gt);
    Ok(EvalReport { rows, mae: m.mae, mse: m.mse, nae: m.nae, nae_excluded: m.nae_excluded })
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct InferSidecar {
    pub count: f64,
    pub h_d: usize,
    pub w_d: usize,
    /// Exported 16-bit values are density * scale, rounded.
    pub scale: f64,
}

/// Runs the model on one P6 image and writes `out_base`.pgm (16-bit P5
/// density map) and `out_base`.json.
pub fn infer(ckpt_path: &Path, image_path: &Path, out_base: &Path) -> Result<InferSidecar, RunError> {
    let (model, _) = load_model(ckpt_path)?;
    let image = data::read_ppm(image_path)?;
    let mut tape = Tape::new();
    let binding = model.store.bind(&mut tape);
    let image_var = tape.leaf(image, false);
    let out = model.forward(&mut tape, &binding, image_var);
    let density = tape.value(out.density);
    let (h_d, w_d) = (density.shape()[0], density.shape()[1]);
    let max = density.data().iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 65535.0 / max } else { 1.0 };

    let pgm_path = out_base.with_extension("pgm");
    let mut bytes = format!("P5\n{w_d} {h_d}\n65535\n").into_bytes();
    let mut exported_sum = 0.0;
    for &v in density.data() {
        let q = (v * scale).round().clamp(0.0, 65535.0) as u16;
        exported_sum += q as f64;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    std::fs::write(&pgm_path, bytes).map_err(|e| io_err(&pgm_path, e))?;

    let sidecar = InferSidecar { count: exported_sum / scale, h_d, w_d, scale };
    let json_path = out_base.with_extension("json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&sidecar).unwrap())
        .map_err(|e| io_err(&json_path, e))?;
    Ok(sidecar)
}

fn tiny_gradcheck_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.tokenizer.reduction_dim = 8;
    cfg.tokenizer.final_dim = 8;
    cfg.backbone =
        crate::backbone::BackboneConfig { d: 8, l: 1, heads: 2, mlp_ratio: 2, tap_layers: vec![1] };
    cfg.augment.crop_h = 16;
    cfg.augment.crop_w = 16;
    cfg.sinkhorn = losses::SinkhornConfig { epsilon: 0.1, max_iters: 30, tol: 0.0 };
    cfg
}

/// Finite-difference checks over every tape primitive plus end-to-end
/// objective gradients w.r.t. the context token, position embedding, and a
/// sample of weights from each subgraph.
pub fn gradcheck_report(seed: u64) -> Vec<CheckRow> {
    let mut rows = gradcheck::primitive_checks(seed);

    let cfg = tiny_gradcheck_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = CrowdModel::init(&cfg, &mut rng).unwrap();
    let image = Tensor::randn(&[3, 16, 16], 0.3, &mut rng);
    let mut gt_grid = Tensor::zeros(&[4, 4]);
    gt_grid.data_mut()[5] = 2.0;
    gt_grid.data_mut()[10] = 1.0;
    let gt = GroundTruthGrid::new(gt_grid);

    let sampled = [
        "backbone.t_con",
        "backbone.pos_embed",
        "backbone.layer1.wq",
        "tokenizer.proj.b",
        "tam.gate.w2",
        "tam.conv.b",
        "rtm.w2",
        "decoder.out.w",
        "decoder.deconv0.b",
        "aux1.out.b",
    ];
    for name in sampled {
        let build = |tape: &mut Tape, vars: &[crate::tape::Var]| {
            let mut binding = model.store.bind(tape);
            binding.insert(name, vars[0]);
            let image = tape.leaf(image.clone(), false);
            let out = model.forward(tape, &binding, image);
            let (loss, _) = losses::total_loss(
                tape,
                out.density,
                &out.aux,
                &gt,
                out.d_hat,
                &cfg.loss,
                &cfg.sinkhorn,
            );
            loss
        };
        let threshold = 1e-3; // every end-to-end path crosses the OT term
        // Finer step than the primitive checks: the end-to-end objective has
        // much stronger curvature (unrolled Sinkhorn), and 1e-6 keeps the
        // difference quotient well clear of roundoff at this loss scale.
        rows.push(CheckRow {
            name: format!("e2e \u{2202}L/\u{2202}{name}"),
            max_rel_err: gradcheck::max_rel_error(build, &[model.store.get(name).value.clone()], 1e-6),
            threshold,
        });
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn quick_cfg(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.tokenizer.reduction_dim = 8;
        cfg.tokenizer.final_dim = 8;
        cfg.backbone =
            crate::backbone::BackboneConfig { d: 8, l: 1, heads: 2, mlp_ratio: 2, tap_layers: vec![] };
        cfg.augment.crop_h = 32;
        cfg.augment.crop_w = 32;
        cfg.gen.scenes = 3;
        cfg.gen.image_h = 32;
        cfg.gen.image_w = 32;
        cfg.gen.count_min = 2;
        cfg.gen.count_max = 6;
        cfg.sinkhorn.max_iters = 40;
        cfg.epochs = 2;
        cfg.batch_size = 2;
        cfg.checkpoint_every = 1;
        cfg.checkpoint_dir = dir.join("ckpt").display().to_string();
        cfg.log_path = dir.join("loss.jsonl").display().to_string();
        cfg
    }

    #[test]
    fn gen_data_writes_readable_dataset() {
        let dir = tempdir().unwrap();
        let cfg = quick_cfg(dir.path());
        let n = gen_data(&cfg, 7, &dir.path().join("data")).unwrap();
        assert_eq!(n, 3);
        let samples = data::read_dataset(&dir.path().join("data")).unwrap();
        assert_eq!(samples.len(), 3);
        for s in &samples {
            assert!((2.0..=6.0).contains(&s.gt.total()));
        }
    }

    #[test]
    fn train_writes_log_and_checkpoints_and_is_deterministic() {
        let dir = tempdir().unwrap();
        let cfg = quick_cfg(dir.path());
        gen_data(&cfg, 7, &dir.path().join("data")).unwrap();
        let samples = data::read_dataset(&dir.path().join("data")).unwrap();
        let r1 = train(&cfg, &samples, None).unwrap();
        let log1 = std::fs::read_to_string(dir.path().join("loss.jsonl")).unwrap();
        let r2 = train(&cfg, &samples, None).unwrap();
        let log2 = std::fs::read_to_string(dir.path().join("loss.jsonl")).unwrap();
        assert_eq!(log1, log2);
        assert_eq!(r1.loss_totals, r2.loss_totals);
        assert_eq!(r1.steps, 4); // 3 samples, batch 2 -> 2 steps/epoch x 2
        assert!(dir.path().join("ckpt/last.ckpt").exists());
        assert!(dir.path().join("ckpt/epoch0002.ckpt").exists());
        assert_eq!(log1.lines().count(), 4);
        for line in log1.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            for key in ["step", "count", "ot", "tv", "rtm", "aux", "total"] {
                assert!(v.get(key).is_some(), "missing {key}");
            }
        }
    }

    #[test]
    fn zero_weight_log_total_equals_count_loss() {
        let dir = tempdir().unwrap();
        let mut cfg = quick_cfg(dir.path());
        cfg.loss.lambda = 0.0;
        cfg.loss.lambda1 = 0.0;
        cfg.loss.lambda2 = 0.0;
        cfg.epochs = 1;
        gen_data(&cfg, 8, &dir.path().join("data")).unwrap();
        let samples = data::read_dataset(&dir.path().join("data")).unwrap();
        train(&cfg, &samples, None).unwrap();
        let log = std::fs::read_to_string(dir.path().join("loss.jsonl")).unwrap();
        for line in log.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["total"], v["count"]);
        }
    }

    #[test]
    fn evaluate_round_trips_checkpoint() {
        let dir = tempdir().unwrap();
        let cfg = quick_cfg(dir.path());
        gen_data(&cfg, 9, &dir.path().join("data")).unwrap();
        let samples = data::read_dataset(&dir.path().join("data")).unwrap();
        train(&cfg, &samples, None).unwrap();
        let ckpt = Path::new(&cfg.checkpoint_dir).join("last.ckpt");
        let r1 = evaluate(&ckpt, &dir.path().join("data")).unwrap();
        let r2 = evaluate(&ckpt, &dir.path().join("data")).unwrap();
        assert_eq!(r1.rows.len(), 3);
        for (a, b) in r1.rows.iter().zip(&r2.rows) {
            assert_eq!(a.pred, b.pred);
        }
        let pred: Vec<f64> = r1.rows.iter().map(|r| r.pred).collect();
        let gtc: Vec<f64> = r1.rows.iter().map(|r| r.gt).collect();
        let m = losses::metrics(&pred, &gtc);
        assert_eq!((m.mae, m.mse, m.nae), (r1.mae, r1.mse, r1.nae));
    }

    #[test]
    fn infer_sidecar_matches_exported_map() {
        let dir = tempdir().unwrap();
        let cfg = quick_cfg(dir.path());
        gen_data(&cfg, 10, &dir.path().join("data")).unwrap();
        let samples = data::read_dataset(&dir.path().join("data")).unwrap();
        train(&cfg, &samples, None).unwrap();
        let ckpt = Path::new(&cfg.checkpoint_dir).join("last.ckpt");
        let image = dir.path().join("data/images/0000.ppm");
        let out = dir.path().join("density");
        let s1 = infer(&ckpt, &image, &out).unwrap();
        let direct = {
            let (model, _) = load_model(&ckpt).unwrap();
            predict_count(&model, &samples[0].image)
        };
        assert!(
            (s1.count - direct).abs() <= 0.005 * direct.max(1.0),
            "sidecar {} vs direct {direct}",
            s1.count
        );
        let bytes = std::fs::read(dir.path().join("density.pgm")).unwrap();
        assert!(bytes.starts_with(b"P5\n"));
        let s2 = infer(&ckpt, &image, &out).unwrap();
        assert_eq!(s1.count, s2.count);
    }

    #[test]
    fn error_exit_codes() {
        assert_eq!(RunError::Config("x".into()).exit_code(), 2);
        assert_eq!(RunError::Numeric("x".into()).exit_code(), 3);
        let io = RunError::Io {
            path: "p".into(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "gone"),
        };
        assert_eq!(io.exit_code(), 4);
    }
}
