//! The six-row proposal ablation at toy scale.
//!
//!     cargo run --release --example ablation -- [steps] [out_dir]

use std::path::PathBuf;

use fpn::ablation::{format_table, run_ablation};
use fpn::config::RunConfig;

fn main() -> fpn::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let out = args.next().map(PathBuf::from);
    let mut cfg = RunConfig::default();
    cfg.data.train_images = 100;
    cfg.data.eval_images = 20;
    cfg.train.steps = steps;
    cfg.train.decay_step = steps * 3 / 4;
    let results = run_ablation(&cfg, &cfg.train_scenes()?, &cfg.eval_scenes()?, out.as_deref())?;
    print!("{}", format_table(&results));
    Ok(())
}
