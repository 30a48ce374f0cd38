//! Generates a few synthetic scenes, writes them to disk and reads them back.

use fpn::config::RunConfig;
use fpn::data::{read_dataset, rle_encode, write_dataset};

fn main() -> fpn::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data.train_images = 6;
    let scenes = cfg.train_scenes()?;
    for s in &scenes {
        let desc: Vec<String> = s
            .objects
            .iter()
            .map(|o| format!("{} {:.0}x{:.0}", o.class.name(), o.bbox.width(), o.bbox.height()))
            .collect();
        println!("image {}: {}", s.id, desc.join(", "));
    }
    let first = &scenes[0].objects[0];
    let rle = rle_encode(&first.mask);
    println!("first mask: area {}, rle starts {}", first.mask.area(), &rle[..rle.len().min(40)]);

    let dir = std::env::temp_dir().join("fpn_synthetic_example");
    write_dataset(&dir, &scenes)?;
    let back = read_dataset(&dir)?;
    println!(
        "round trip through {}: {}",
        dir.display(),
        if back == scenes { "identical" } else { "DIFFERENT" }
    );
    Ok(())
}
