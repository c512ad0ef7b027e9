use guidecode::tensor::{Param, Tape, Tensor};
use guidecode::util::seeded_rng;
use std::time::Instant;

fn main() {
    let mut rng = seeded_rng(2);
    let logits = Tensor::<f32>::randn(&[131072, 16], 1.0, &mut rng);
    let targets = vec![3usize; 131072];

    // forward only
    let t0 = Instant::now();
    let reps = 20;
    let mut sink = 0.0;
    for _ in 0..reps {
        let mut t = Tape::new();
        let x = t.constant(logits.clone());
        let loss = t.softmax_cross_entropy(x, &targets).unwrap();
        sink += t.value(loss).scalar_value().unwrap();
    }
    println!("CE forward only: {:?} (sink {sink})", t0.elapsed() / reps);

    // forward + backward
    let xp = Param::new("x", logits.clone());
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut t = Tape::new();
        let x = t.param(&xp);
        let loss = t.softmax_cross_entropy(x, &targets).unwrap();
        let g = t.backward(loss).unwrap();
        sink += g.get(&xp).unwrap().data()[0];
    }
    println!("CE fwd+bwd: {:?} (sink {sink})", t0.elapsed() / reps);

    // gelu via tape, forward only
    let hidden = Tensor::<f32>::randn(&[32, 128, 512], 1.0, &mut rng);
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut t = Tape::new();
        let x = t.constant(hidden.clone());
        let gl = t.gelu(x);
        sink += t.value(gl).data()[0];
    }
    println!("gelu fwd only: {:?} (sink {sink})", t0.elapsed() / reps);

    // softmax via tape, forward only
    let att = Tensor::<f32>::randn(&[32, 4, 128, 128], 1.0, &mut rng);
    let t0 = Instant::now();
    for _ in 0..reps {
        let mut t = Tape::new();
        let x = t.constant(att.clone());
        let s = t.softmax(x, 3).unwrap();
        sink += t.value(s).data()[0];
    }
    println!("softmax fwd only: {:?} (sink {sink})", t0.elapsed() / reps);
}
