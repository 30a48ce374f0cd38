//! Object scales mapped onto the mask heads, then a short training run and
//! segment average recall.
//!
//!     cargo run --release --example segment_proposals -- [steps]

use fpn::config::RunConfig;
use fpn::eval::evaluate_masks;
use fpn::mask::MaskGeometry;
use fpn::train::{train_masks, TrainOptions};

fn main() -> fpn::Result<()> {
    // the default 32px base; the training config below uses a smaller one
    let geometry = MaskGeometry::default();
    for side in [20.0, 32.0, 45.0, 64.0, 90.0, 181.0, 512.0, 800.0] {
        match geometry.scale_to_level(side, side)? {
            Some((level, head)) => println!(
                "{side:>5}px object -> P{level}, {} head, window {:.0}px",
                head.name(),
                geometry.region_size(level, head)
            ),
            None => println!("{side:>5}px object -> outside the scale grid"),
        }
    }

    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let mut cfg = RunConfig::default();
    cfg.data.train_images = 100;
    cfg.data.eval_images = 20;
    cfg.train.steps = steps;
    cfg.train.decay_step = steps * 3 / 4;
    let run = train_masks(&cfg, &cfg.train_scenes()?, &TrainOptions::default())?;
    if let Some(last) = run.losses.last() {
        println!("{}", last.to_line());
    }
    let ev = evaluate_masks(&cfg, &run.network, &cfg.eval_scenes()?)?;
    print!("{}", ev.report.to_text());
    Ok(())
}
