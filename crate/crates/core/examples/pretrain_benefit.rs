//! Fine-tuning from contrastive pretraining versus from a random init on
//! the synthetic clustered textures: 2000 unlabeled 64x64 images, 50 labels
//! per class, 10 classes.
//!
//! Both arms start fine-tuning with a zeroed classifier head, get the same
//! epoch budget, and pick their learning rate from the same grid by accuracy
//! on a separate validation draw. Test accuracy of the picked run is reported.
//!
//! ```text
//! cargo run --release --example pretrain_benefit -- [seeds]
//! ```

use std::time::Instant;

use spatial_contrast::data::synth_clustered;
use spatial_contrast::model::{init_params, ModelSpec, ModelState};
use spatial_contrast::trainer::{eval, finetune, pretrain, reset_head, LrSchedule, TrainConfig};

const FINETUNE_LRS: [f64; 3] = [0.01, 0.003, 0.001];

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seeds: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(3);
    let started = Instant::now();
    let mut gains = Vec::new();
    for seed in 0..seeds {
        let unlabeled = synth_clustered(10, 200, 64, 100 + seed)?.unlabeled();
        let labeled = synth_clustered(10, 50, 64, 200 + seed)?;
        let val = synth_clustered(10, 20, 64, 300 + seed)?;
        let test = synth_clustered(10, 100, 64, 400 + seed)?;
        let spec = ModelSpec::reference(3, 32, 10);
        let init = init_params::<f32>(&spec, seed)?;

        let pre = pretrain(
            &spec,
            &init,
            &unlabeled,
            &TrainConfig {
                epochs: 6,
                lr: LrSchedule::constant(0.01),
                seed,
                ..TrainConfig::pretrain()
            },
        )?;
        let last = pre.losses().last().copied().unwrap_or(f64::NAN);
        println!(
            "seed {seed}: pretrained {} steps, final loss {last:.3}",
            pre.steps
        );

        let best =
            |start: &ModelState<f32>, arm: &str| -> Result<f64, Box<dyn std::error::Error>> {
                let mut start = start.clone();
                reset_head(&spec, &mut start)?;
                let mut pick = (f64::NEG_INFINITY, 0.0, 0.0);
                for lr in FINETUNE_LRS {
                    let config = TrainConfig {
                        batch_size: 16,
                        epochs: 8,
                        lr: LrSchedule::constant(lr),
                        seed,
                        ..TrainConfig::finetune()
                    };
                    let state = finetune(&spec, &start, &labeled, None, &config)?.state;
                    let (v, t) = (eval(&spec, &state, &val)?, eval(&spec, &state, &test)?);
                    println!("  {arm:<6} lr {lr:<6} val {v:.3} test {t:.3}");
                    if v > pick.0 {
                        pick = (v, t, lr);
                    }
                }
                Ok(pick.1)
            };
        let sc = best(&pre.state, "sc")?;
        let random = best(&init, "random")?;
        println!("seed {seed}: sc {sc:.3} random {random:.3}");
        gains.push(sc - random);
    }
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    println!(
        "mean gain {:+.1} points in {:.0}s",
        100.0 * mean,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
