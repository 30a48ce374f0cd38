//! Trains the pyramid RPN briefly and reports average recall.
//!
//!     cargo run --release --example train_proposals -- [steps]

use fpn::config::RunConfig;
use fpn::eval::evaluate_proposals;
use fpn::train::{train_rpn, TrainOptions};

fn main() -> fpn::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let mut cfg = RunConfig::default();
    cfg.data.train_images = 100;
    cfg.data.eval_images = 20;
    cfg.train.steps = steps;
    cfg.train.decay_step = steps * 3 / 4;

    let run = train_rpn(&cfg, &cfg.train_scenes()?, &TrainOptions::default())?;
    for row in run.losses.iter().step_by((steps / 6).max(1)) {
        println!("{}", row.to_line());
    }
    let ev = evaluate_proposals(&cfg, &run.network, &cfg.eval_scenes()?)?;
    print!("{}", ev.report.to_text());
    println!("{:.4} s per image", ev.seconds_per_image);
    Ok(())
}
