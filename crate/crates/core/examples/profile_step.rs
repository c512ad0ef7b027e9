use guidecode::config::RunConfig;
use guidecode::models::{BaseModel, OracleModel};
use guidecode::tensor::{ParamContainer, Tape};
use guidecode::training::*;
use guidecode::util::{derive_seed, seeded_rng};
use std::time::Instant;

fn main() {
    let config = RunConfig::default();
    let task = config.task_spec().unwrap();
    let mc = config.model_config();
    let ds = guidecode::synthdata::SceneDataset::new(1, 64, task);

    let mut oracle = OracleModel::<f32>::init(&mc, &task, 1).unwrap();
    let mut base = BaseModel::<f32>::init(&mc, &task, 2).unwrap();
    let mut opt = OptimizerState::new(config.optimizer_config());
    let schedule = Schedule::new(4e-4, 10, 1000).unwrap();
    let mut rng = seeded_rng(3);

    // data prep timing
    let t0 = Instant::now();
    let examples: Vec<_> = (0..32).map(|i| ds.augmented(i, 0)).collect();
    println!("data gen+augment: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for ex in &examples {
        let (img, label) = guidecode::synthdata::task_io(&task, ex);
        images.push(guidecode::models::image_to_tensor::<f32>(&img));
        labels.push(guidecode::tasks::encode_label(&task, &label).unwrap());
    }
    let images = guidecode::models::stack_images(&images).unwrap();
    println!("encode batch: {:?}", t0.elapsed());

    // forward pieces
    let t0 = Instant::now();
    let mut tape = Tape::new();
    let enc = oracle.encode_on_tape(&mut tape, &labels, Some(&images)).unwrap();
    println!("oracle forward: {:?} ({} nodes)", t0.elapsed(), tape.len());

    let t0 = Instant::now();
    let logits = base.forward_on_tape(&mut tape, &images, Some(enc.z_q)).unwrap();
    println!("base forward: {:?} ({} nodes)", t0.elapsed(), tape.len());

    let t0 = Instant::now();
    let recon = guidecode::tasks::task_reconstruction_loss(&mut tape, &task, logits, &labels).unwrap();
    let commit = guidecode::vq::commitment_loss(&mut tape, enc.z_e, &enc.z_q_value, 0.25).unwrap();
    let loss = tape.add(recon, commit).unwrap();
    println!("loss: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let grads = tape.backward(loss).unwrap();
    println!("backward: {:?} ({} grads)", t0.elapsed(), grads.len());

    let t0 = Instant::now();
    opt.apply(&mut [&mut base as &mut dyn ParamContainer<f32>, &mut oracle], &grads, 1e-4);
    println!("optimizer: {:?}", t0.elapsed());

    // full steps
    for s in 1..=3u64 {
        let t0 = Instant::now();
        let examples: Vec<_> = (0..32).map(|i| ds.augmented(i, s)).collect();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for ex in &examples {
            let (img, label) = guidecode::synthdata::task_io(&task, ex);
            images.push(guidecode::models::image_to_tensor::<f32>(&img));
            labels.push(guidecode::tasks::encode_label(&task, &label).unwrap());
        }
        let batch = Stage1Batch { images: guidecode::models::stack_images(&images).unwrap(), labels };
        let m = stage1_step(&mut base, Some(&mut oracle), &task, &batch, &mut opt, &schedule, s,
            Stage1Options { code_dropout: true, no_image: false }, &mut rng).unwrap();
        println!("full step {s}: {:?} (loss {:.3})", t0.elapsed(), m.loss);
    }
}
