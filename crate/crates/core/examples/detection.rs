//! RPN, then a box detector on its fixed proposals, then COCO-style AP.
//!
//!     cargo run --release --example detection -- [steps]

use fpn::config::RunConfig;
use fpn::eval::evaluate_detection;
use fpn::train::{train_detector, train_rpn, TrainOptions};

fn main() -> fpn::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let mut cfg = RunConfig::default();
    cfg.data.train_images = 100;
    cfg.data.eval_images = 20;
    cfg.train.steps = steps;
    cfg.train.decay_step = steps * 3 / 4;

    let train = cfg.train_scenes()?;
    let rpn = train_rpn(&cfg, &train, &TrainOptions::default())?;
    let det = train_detector(&cfg, &train, &rpn.network, &TrainOptions::default())?;
    if let Some(last) = det.losses.last() {
        println!("{}", last.to_line());
    }
    let ev = evaluate_detection(&cfg, &det.network, &rpn.network, &cfg.eval_scenes()?)?;
    print!("{}", ev.report.to_text());
    Ok(())
}
