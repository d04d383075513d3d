//! Two-phase training on a small synthetic set: contrastive pretraining on
//! unlabeled images, then supervised fine-tuning and evaluation.

use spatial_contrast::data::synth_clustered;
use spatial_contrast::model::{init_params, ModelSpec};
use spatial_contrast::trainer::{
    finetune_with, pretrain_with, reset_head, LrSchedule, TrainConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let unlabeled = synth_clustered(4, 60, 32, 1)?.unlabeled();
    let labeled = synth_clustered(4, 15, 32, 2)?;
    let test = synth_clustered(4, 25, 32, 3)?;
    let spec = ModelSpec::reference(3, 16, 4);
    let init = init_params::<f32>(&spec, 0)?;

    let pre = TrainConfig {
        epochs: 8,
        batch_size: 24,
        steps_per_epoch: Some(40),
        lr: LrSchedule::constant(0.01),
        ..TrainConfig::pretrain()
    };
    let report = pretrain_with(&spec, &init, &unlabeled, &pre, |r| {
        println!("{}", r.to_json_line())
    })?;

    let mut state = report.state;
    reset_head(&spec, &mut state)?;
    let ft = TrainConfig {
        epochs: 12,
        batch_size: 10,
        lr: LrSchedule::constant(0.001),
        ..TrainConfig::finetune()
    };
    let tuned = finetune_with(&spec, &state, &labeled, Some(&test), &ft, |r| {
        println!("{}", r.to_json_line())
    })?;
    println!("test accuracy {:.3}", tuned.eval_accuracy.unwrap_or(0.0));
    Ok(())
}
