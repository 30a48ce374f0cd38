//! Builds every pyramid variant on the same backbone and prints its levels.

use fpn::backbone::{Backbone, BackboneConfig};
use fpn::fpn::{PyramidBuilder, PyramidVariant};
use fpn::tensor::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fpn::Result<()> {
    let cfg = BackboneConfig::default();
    let image = Tensor::<f32>::full(&[1, 3, 128, 128], 0.25)?;
    for variant in PyramidVariant::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &cfg, &mut rng)?;
        let before = store.len();
        let pyramid = PyramidBuilder::new(&mut store, "fpn", cfg.stage_channels, 64, variant, true, &mut rng)?;
        let p = pyramid.forward(&backbone.forward(&image)?)?;
        println!(
            "{variant:<10} {} pyramid tensors, {} lateral 1x1 convs",
            store.len() - before,
            pyramid.lateral_count()
        );
        for (k, t) in &p.levels {
            println!("    P{k}  stride {:>3}  {:?}", 1 << k, t.shape());
        }
    }
    Ok(())
}
