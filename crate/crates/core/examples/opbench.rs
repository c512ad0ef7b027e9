use guidecode::tensor::{Param, Tape, Tensor};
use guidecode::util::seeded_rng;
use std::time::Instant;

fn bench(name: &str, mut f: impl FnMut()) {
    // warmup
    f();
    let n = 20;
    let t0 = Instant::now();
    for _ in 0..n { f(); }
    println!("{name}: {:?}", t0.elapsed() / n);
}

fn main() {
    let mut rng = seeded_rng(1);
    let x_seq = Tensor::<f32>::randn(&[32, 128, 128], 1.0, &mut rng);   // oracle seq
    let w = Param::new("w", Tensor::<f32>::randn(&[128, 128], 1.0, &mut rng));
    let wmlp = Param::new("wm", Tensor::<f32>::randn(&[128, 512], 1.0, &mut rng));
    let bias = Param::new("b", Tensor::<f32>::randn(&[128], 1.0, &mut rng));
    let gain = Param::new("g", Tensor::<f32>::full(&[128], 1.0));
    let hidden = Tensor::<f32>::randn(&[32, 128, 512], 1.0, &mut rng);
    let logits = Tensor::<f32>::randn(&[32, 4, 128, 128], 1.0, &mut rng);
    let qk = Tensor::<f32>::randn(&[32, 4, 128, 32], 1.0, &mut rng);
    let kt = Tensor::<f32>::randn(&[32, 4, 32, 128], 1.0, &mut rng);
    let img = Tensor::<f32>::randn(&[32, 8, 8, 8, 8, 3], 1.0, &mut rng);
    let head_in = Tensor::<f32>::randn(&[32, 64, 128], 1.0, &mut rng);
    let whead = Param::new("wh", Tensor::<f32>::randn(&[128, 1024], 1.0, &mut rng));
    let onehot = Tensor::<f32>::randn(&[32, 64, 1024], 1.0, &mut rng);
    let wembed = Param::new("we", Tensor::<f32>::randn(&[1024, 128], 1.0, &mut rng));

    bench("linear128 fwd [4096,128]x[128,128]", || {
        let mut t = Tape::new();
        let x = t.constant(x_seq.clone());
        let wv = t.param(&w);
        let _ = t.matmul(x, wv).unwrap();
    });
    bench("mlp fwd [4096,128]x[128,512]", || {
        let mut t = Tape::new();
        let x = t.constant(x_seq.clone());
        let wv = t.param(&wmlp);
        let _ = t.matmul(x, wv).unwrap();
    });
    bench("bias add [32,128,128]+[128]", || {
        let mut t = Tape::new();
        let x = t.constant(x_seq.clone());
        let bv = t.param(&bias);
        let _ = t.add(x, bv).unwrap();
    });
    bench("residual add same-shape", || {
        let mut t = Tape::new();
        let x = t.constant(x_seq.clone());
        let y = t.constant(x_seq.clone());
        let _ = t.add(x, y).unwrap();
    });
    bench("layer_norm [32,128,128]", || {
        let mut t = Tape::new();
        let x = t.constant(x_seq.clone());
        let gv = t.param(&gain);
        let bv = t.param(&bias);
        let _ = t.layer_norm(x, gv, bv, 1e-6).unwrap();
    });
    bench("gelu [32,128,512]", || {
        let mut t = Tape::new();
        let x = t.constant(hidden.clone());
        let _ = t.gelu(x);
    });
    bench("softmax [32,4,128,128] axis3", || {
        let mut t = Tape::new();
        let x = t.constant(logits.clone());
        let _ = t.softmax(x, 3).unwrap();
    });
    bench("batched matmul qk", || {
        let mut t = Tape::new();
        let a = t.constant(qk.clone());
        let b = t.constant(kt.clone());
        let _ = t.matmul(a, b).unwrap();
    });
    bench("permute [32,128,4,32]->0213", || {
        let mut t = Tape::new();
        let x = t.constant(qk.reshaped(&[32,128,4,32]).unwrap());
        let _ = t.permute(x, &[0,2,1,3]).unwrap();
    });
    bench("patchify permute rank6", || {
        let mut t = Tape::new();
        let x = t.constant(img.clone());
        let _ = t.permute(x, &[0,1,3,2,4,5]).unwrap();
    });
    bench("head fwd [2048,128]x[128,1024]", || {
        let mut t = Tape::new();
        let x = t.constant(head_in.clone());
        let wv = t.param(&whead);
        let _ = t.matmul(x, wv).unwrap();
    });
    bench("label embed [2048,1024]x[1024,128] fwd+bwd", || {
        let mut t = Tape::new();
        let x = t.constant(onehot.clone());
        let wv = t.param(&wembed);
        let h = t.matmul(x, wv).unwrap();
        let loss = t.mean_all(h);
        let _ = t.backward(loss).unwrap();
    });
    bench("linear128 fwd+bwd", || {
        let mut t = Tape::new();
        let x = t.constant(x_seq.clone());
        let wv = t.param(&w);
        let h = t.matmul(x, wv).unwrap();
        let loss = t.mean_all(h);
        let _ = t.backward(loss).unwrap();
    });
    bench("softmax fwd+bwd", || {
        let mut t = Tape::new();
        let xp = Param::new("x", logits.clone());
        let x = t.param(&xp);
        let s = t.softmax(x, 3).unwrap();
        let loss = t.mean_all(s);
        let _ = t.backward(loss).unwrap();
    });
    bench("gelu fwd+bwd", || {
        let mut t = Tape::new();
        let xp = Param::new("x", hidden.clone());
        let x = t.param(&xp);
        let s = t.gelu(x);
        let loss = t.mean_all(s);
        let _ = t.backward(loss).unwrap();
    });
    bench("CE 131072 rows x 16", || {
        let mut t = Tape::new();
        let xp = Param::new("x", Tensor::<f32>::randn(&[131072, 16], 1.0, &mut seeded_rng(2)));
        let x = t.param(&xp);
        let loss = t.softmax_cross_entropy(x, &vec![3usize; 131072]).unwrap();
        let _ = t.backward(loss).unwrap();
    });
}
