//! Anchors per pyramid level, their labels against two boxes, and greedy NMS.

use std::collections::BTreeMap;

use fpn::geometry::{generate_anchors, iou, nms, BBox};
use fpn::rpn::{assign_anchor_labels, AnchorSet};

fn main() -> fpn::Result<()> {
    let size = 128;
    let shapes: BTreeMap<usize, (usize, usize)> = (2..=6).map(|k| (k, (size >> k, size >> k))).collect();
    let grids = generate_anchors(&shapes, 16.0)?;
    for (k, g) in &grids {
        let b = g.boxes[0];
        println!("P{k}: {:>5} anchors, first {:.1}x{:.1}", g.len(), b.width(), b.height());
    }

    let anchors = AnchorSet::new(grids);
    let gt = [BBox::new(10.0, 12.0, 40.0, 38.0), BBox::new(60.0, 50.0, 124.0, 120.0)];
    let labels = assign_anchor_labels(&anchors.boxes(), &gt, 0.7, 0.3)?;
    println!(
        "{} positive, {} negative of {}",
        labels.positives().len(),
        labels.negatives().len(),
        anchors.len()
    );

    let boxes = [
        BBox::new(0.0, 0.0, 10.0, 10.0),
        BBox::new(1.0, 1.0, 11.0, 11.0),
        BBox::new(20.0, 20.0, 30.0, 30.0),
        BBox::new(0.5, 0.0, 10.0, 10.5),
    ];
    let scores = [0.9, 0.95, 0.5, 0.7];
    println!("iou(0, 1) = {:.3}", iou(&boxes[0], &boxes[1]));
    println!("kept after NMS at 0.5: {:?}", nms(&boxes, &scores, 0.5, 10));
    Ok(())
}
