use crowdformer::losses::{self, GroundTruthGrid, SinkhornConfig};
use crowdformer::tape::Tape;
use crowdformer::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut gt_grid = Tensor::zeros(&[16, 16]);
    for _ in 0..12 {
        let i = rng.gen_range(0..256);
        gt_grid.data_mut()[i] += 1.0;
    }
    let gt = GroundTruthGrid::new(gt_grid);
    let pred_v = {
        let mut t = Tensor::zeros(&[16, 16]);
        for v in t.data_mut() {
            *v = rng.gen_range(0.0..0.2);
        }
        t
    };
    let cfg = SinkhornConfig::default();
    let t0 = Instant::now();
    let mut tape = Tape::new();
    let pred = tape.leaf(pred_v.clone(), true);
    let (l, iters, err) = losses::ot_loss(&mut tape, pred, &gt, &cfg).unwrap();
    let fwd = t0.elapsed();
    let t1 = Instant::now();
    tape.backward(l);
    let bwd = t1.elapsed();
    println!("iters={iters} marginal_err={err:.2e} fwd={fwd:?} bwd={bwd:?} loss={}", tape.value(l).item());
}
