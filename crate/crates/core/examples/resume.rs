//! Stops a run halfway, resumes from its checkpoint, and compares the result
//! with an uninterrupted run.

use fpn::config::RunConfig;
use fpn::model::{Checkpoint, Task};
use fpn::train::{train_rpn, TrainOptions};

fn main() -> fpn::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data.train_images = 12;
    cfg.train.steps = 40;
    cfg.train.warmup_steps = 5;
    cfg.train.decay_step = 30;
    let scenes = cfg.train_scenes()?;

    let full = train_rpn(&cfg, &scenes, &TrainOptions::default())?;
    let full_ck = Checkpoint::capture(Task::Proposals, full.step, &full.network.store, &full.optimizer);

    let mut half = cfg.clone();
    half.train.steps = 20;
    let first = train_rpn(&half, &scenes, &TrainOptions::default())?;
    let mid = Checkpoint::capture(Task::Proposals, first.step, &first.network.store, &first.optimizer);
    let opts = TrainOptions {
        resume: Some(&mid),
        out_dir: None,
    };
    let second = train_rpn(&cfg, &scenes, &opts)?;
    let resumed = Checkpoint::capture(Task::Proposals, second.step, &second.network.store, &second.optimizer);

    let same = full_ck.to_records() == resumed.to_records();
    println!("uninterrupted and resumed checkpoints identical: {same}");
    Ok(())
}
