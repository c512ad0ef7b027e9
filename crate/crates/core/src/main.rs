//! Command-line harness: data generation, two-stage training, evaluation,
//! prediction, sample grids, code-masking probes, ablations, and the
//! code-size sweep.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use guidecode::checkpoint::Checkpoint;
use guidecode::config::RunConfig;
use guidecode::inference::{
    predict, probe_masked_code, sample_code, MaskMode, MaskProbeSpec, SamplingParams,
};
use guidecode::models::image_to_tensor;
use guidecode::run::{
    self, evaluate_end_to_end, evaluate_stage1, load_stage1_models, load_stage2_models,
    run_ablations, run_code_sweep, run_stage1, run_stage2, Stage1Run,
};
use guidecode::synthdata::{task_io, SceneDataset, Split};
use guidecode::tasks::{pixel_accuracy_in_region, TaskLabel};
use guidecode::util::{derive_seed, seeded_rng};
use guidecode::viz;

#[derive(Parser)]
#[command(
    name = "guidecode",
    about = "Two-stage vision modeling with a learned discrete guiding code",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints, metrics, and images.
    #[arg(long, default_value = "runs/out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset to disk as raster files plus metadata.
    GenData(Common),
    /// Stage-I training: base model + restricted oracle.
    TrainStage1(Common),
    /// Stage-II training: language model over frozen stage-I codes.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        /// Stage-I checkpoint to start from.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// End-to-end prediction on held-out scenes.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Stage-II checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        /// Number of held-out scenes to predict.
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sample grid: rows of ground truth, input, greedy prediction, and
    /// temperature-1 samples.
    SampleGrid {
        #[command(flatten)]
        common: Common,
        /// Stage-II checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Columns (held-out scenes).
        #[arg(long, default_value_t = 6)]
        count: usize,
        /// Temperature-1 sample rows.
        #[arg(long, default_value_t = 3)]
        samples: usize,
    },
    /// Mask progressively larger code regions and decode each variant.
    ProbeMask {
        #[command(flatten)]
        common: Common,
        /// Stage-II checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Held-out scene index to probe.
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
    /// Run every ablation arm with identical budgets and data seed.
    Ablate(Common),
    /// Cross product of code lengths and dictionary sizes.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated code lengths (perfect squares).
        #[arg(long, default_value = "4,16,64")]
        lengths: String,
        /// Comma-separated dictionary sizes.
        #[arg(long, default_value = "64")]
        dict_sizes: String,
        /// Also train stage II per cell.
        #[arg(long, default_value_t = false)]
        stage2: bool,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(common) => {
            let config = load_config(&common)?;
            run::generate_dataset(&config, &common.out_dir)?;
            println!(
                "wrote {} train and {} eval examples under {}",
                config.train_examples,
                config.eval_examples,
                common.out_dir.display()
            );
        }
        Command::TrainStage1(common) => {
            let config = load_config(&common)?;
            let run = run_stage1::<f32>(&config, Some(&common.out_dir))?;
            let (name, _) = run.task.kind.metric();
            println!(
                "stage 1 done: eval {name} = {:.4} ({} steps); checkpoint at {}",
                run.eval_metric,
                config.stage1_steps,
                common.out_dir.join("stage1.ckpt").display()
            );
        }
        Command::TrainStage2 { common, checkpoint } => {
            let config = load_config(&common)?;
            let ckpt = Checkpoint::<f32>::load(&checkpoint)?;
            let stage1 = Stage1Run::from_checkpoint(&ckpt)?;
            let run = run_stage2::<f32>(&config, stage1, Some(&common.out_dir))?;
            let (name, _) = run.task.kind.metric();
            println!(
                "stage 2 done: eval {name} = {:.4}, final nll = {:.4} nats; checkpoint at {}",
                run.eval_metric,
                run.final_nll,
                common.out_dir.join("stage2.ckpt").display()
            );
        }
        Command::Predict {
            common,
            checkpoint,
            temperature,
            count,
        } => {
            let ckpt = Checkpoint::<f32>::load(&checkpoint)?;
            let (config, task, oracle, base, lm) = load_stage2_models(&ckpt)?;
            let ds = SceneDataset::new(derive_seed(config.seed, "dataset", 0), config.input_size, task);
            let seed = common.seed.unwrap_or(config.seed);
            let mut mean = 0.0;
            for i in 0..count {
                let ex = ds.example(Split::Eval, i);
                let (img, label) = task_io(&task, &ex);
                let x = image_to_tensor::<f32>(&img);
                let params = SamplingParams {
                    temperature,
                    seed: derive_seed(seed, "predict", i as u64),
                    num_samples: 1,
                };
                let (pred, _) =
                    predict(&x, &base, &lm, &oracle.codebook, &task, &params, config.no_image)?;
                let m = guidecode::tasks::evaluate_metric(&task, &pred, &label)?;
                mean += m;
                let frame = viz::frame_from_label(&task, &pred);
                viz::save_png(&frame, &common.out_dir.join(format!("pred_{i:03}.png")))?;
                println!("scene {i}: {} = {m:.4}", task.kind.metric().0);
            }
            println!("mean {} over {count} scenes: {:.4}", task.kind.metric().0, mean / count as f64);
        }
        Command::Eval { common, checkpoint } => {
            let ckpt = Checkpoint::<f32>::load(&checkpoint)?;
            let mut config = ckpt.config.clone();
            if let Some(seed) = common.seed {
                config.seed = seed;
            }
            let (metric_name, _) = config.task_spec()?.kind.metric();
            if ckpt.stage == "stage2" {
                let (config, task, oracle, base, lm) = load_stage2_models(&ckpt)?;
                let (s1, acc) = evaluate_stage1(&config, &task, Some(&oracle), &base)?;
                let s2 = evaluate_end_to_end(&config, &task, &base, &lm, &oracle.codebook)?;
                println!("stage-1 (oracle code) {metric_name} = {s1:.4}");
                if let Some(acc) = acc {
                    println!("stage-1 pixel accuracy = {acc:.4}");
                }
                println!("stage-2 (sampled code, T=0) {metric_name} = {s2:.4}");
            } else {
                let (config, task, oracle, base) = load_stage1_models(&ckpt)?;
                let (s1, acc) = evaluate_stage1(&config, &task, oracle.as_ref(), &base)?;
                println!("stage-1 (oracle code) {metric_name} = {s1:.4}");
                if let Some(acc) = acc {
                    println!("stage-1 pixel accuracy = {acc:.4}");
                }
            }
        }
        Command::SampleGrid {
            common,
            checkpoint,
            count,
            samples,
        } => {
            let ckpt = Checkpoint::<f32>::load(&checkpoint)?;
            let (config, task, oracle, base, lm) = load_stage2_models(&ckpt)?;
            let ds = SceneDataset::new(derive_seed(config.seed, "dataset", 0), config.input_size, task);
            let seed = common.seed.unwrap_or(config.seed);

            let mut gt_row = Vec::new();
            let mut input_row = Vec::new();
            let mut greedy_row = Vec::new();
            let mut sample_rows = vec![Vec::new(); samples];
            for i in 0..count {
                let ex = ds.example(Split::Eval, i);
                let (img, label) = task_io(&task, &ex);
                let x = image_to_tensor::<f32>(&img);
                gt_row.push(viz::frame_from_label(&task, &label));
                input_row.push(viz::frame_from_rgb(&img));
                let (pred, _) = predict(
                    &x,
                    &base,
                    &lm,
                    &oracle.codebook,
                    &task,
                    &SamplingParams::greedy(),
                    config.no_image,
                )?;
                greedy_row.push(viz::frame_from_label(&task, &pred));
                for (s, row) in sample_rows.iter_mut().enumerate() {
                    let params = SamplingParams {
                        temperature: 1.0,
                        seed: derive_seed(seed, "grid", (i * samples + s) as u64),
                        num_samples: 1,
                    };
                    let (pred, _) = predict(
                        &x,
                        &base,
                        &lm,
                        &oracle.codebook,
                        &task,
                        &params,
                        config.no_image,
                    )?;
                    row.push(viz::frame_from_label(&task, &pred));
                }
            }
            let mut rows = vec![gt_row, input_row, greedy_row];
            rows.extend(sample_rows);
            let grid = viz::compose_grid(&rows)?;
            let path = common.out_dir.join("sample_grid.png");
            viz::save_png(&grid, &path)?;
            println!("wrote {}", path.display());
        }
        Command::ProbeMask {
            common,
            checkpoint,
            scene,
        } => {
            let ckpt = Checkpoint::<f32>::load(&checkpoint)?;
            let (config, task, oracle, base, lm) = load_stage2_models(&ckpt)?;
            let ds = SceneDataset::new(derive_seed(config.seed, "dataset", 0), config.input_size, task);
            let ex = ds.example(Split::Eval, scene);
            let (img, label) = task_io(&task, &ex);
            let x = image_to_tensor::<f32>(&img);
            let code = sample_code(&x, &lm, &SamplingParams::greedy())?;
            let side = guidecode::vq::integer_sqrt(config.code_len)
                .context("code length must be a perfect square")?;

            let modes = [
                ("zero_embedding", MaskMode::ZeroEmbedding),
                ("random_codeword", MaskMode::RandomCodeword),
                ("constant_codeword", MaskMode::ConstantCodeword(0)),
            ];
            let mut rng = seeded_rng(derive_seed(config.seed, "probe", scene as u64));
            let mut rows = Vec::new();
            let mut csv = String::from("mode,region,inside_accuracy,outside_accuracy\n");
            for (mode_name, mode) in modes {
                let mut row = Vec::new();
                for size in 0..=side {
                    let spec = MaskProbeSpec {
                        top: 0,
                        left: 0,
                        height: size,
                        width: size,
                        mode,
                    };
                    let pred = probe_masked_code(
                        &x,
                        &code,
                        &spec,
                        &base,
                        &oracle.codebook,
                        &task,
                        &mut rng,
                    )?;
                    if let (TaskLabel::Panoptic(p), TaskLabel::Panoptic(g)) = (&pred, &label) {
                        if size > 0 && size < side {
                            let region = spec.pixel_mask(config.code_len, config.input_size)?;
                            let outside: Vec<bool> = region.iter().map(|&r| !r).collect();
                            let inside = pixel_accuracy_in_region(p, g, Some(&region));
                            let out = pixel_accuracy_in_region(p, g, Some(&outside));
                            csv.push_str(&format!("{mode_name},{size}x{size},{inside},{out}\n"));
                        }
                    }
                    row.push(viz::frame_from_label(&task, &pred));
                }
                rows.push(row);
            }
            std::fs::create_dir_all(&common.out_dir)?;
            let grid = viz::compose_grid(&rows)?;
            viz::save_png(&grid, &common.out_dir.join("probe_mask.png"))?;
            std::fs::write(common.out_dir.join("probe_mask.csv"), csv)?;
            println!("wrote probe grid and region accuracies under {}", common.out_dir.display());
        }
        Command::Ablate(common) => {
            let config = load_config(&common)?;
            let rows = run_ablations::<f32>(&config, Some(&common.out_dir))?;
            print!("{}", run::ablation_csv(&rows));
        }
        Command::Sweep {
            common,
            lengths,
            dict_sizes,
            stage2,
        } => {
            let config = load_config(&common)?;
            let lengths = parse_list(&lengths)?;
            let dict_sizes = parse_list(&dict_sizes)?;
            let rows = run_code_sweep::<f32>(&config, &lengths, &dict_sizes, stage2, Some(&common.out_dir))?;
            print!("{}", run::sweep_csv(&rows));
        }
    }
    Ok(())
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .with_context(|| format!("bad list entry '{p}'"))
        })
        .collect()
}

