//! Average recall and average precision on hand-made boxes.

use fpn::geometry::BBox;
use fpn::metrics::{average_precision, box_average_recall, Detection, EvalConfig, GroundTruth};

fn main() -> fpn::Result<()> {
    let cfg = EvalConfig::default();
    let gt = vec![
        vec![BBox::new(10.0, 10.0, 30.0, 30.0), BBox::new(40.0, 40.0, 140.0, 140.0)],
        vec![BBox::new(0.0, 0.0, 50.0, 60.0)],
    ];
    let proposals = vec![
        vec![BBox::new(11.0, 10.0, 31.0, 30.0), BBox::new(50.0, 45.0, 140.0, 140.0)],
        vec![BBox::new(0.0, 0.0, 25.0, 60.0)],
    ];
    for budget in [1, 2] {
        let r = box_average_recall(&proposals, &gt, budget, &cfg)?;
        println!(
            "AR@{budget}: {:.3} (small {:.3}, medium {:.3}, large {:.3})",
            r.ar, r.ar_s, r.ar_m, r.ar_l
        );
    }

    let truth: Vec<GroundTruth> = gt
        .iter()
        .enumerate()
        .flat_map(|(image, boxes)| boxes.iter().map(move |&bbox| GroundTruth { image, class: 1, bbox }))
        .collect();
    let dets: Vec<Detection> = proposals
        .iter()
        .enumerate()
        .flat_map(|(image, boxes)| {
            boxes.iter().enumerate().map(move |(i, &bbox)| Detection {
                image,
                class: 1,
                score: 0.9 - 0.1 * i as f64 - 0.05 * image as f64,
                bbox,
            })
        })
        .collect();
    let p = average_precision(&dets, &truth, &cfg);
    println!(
        "AP {:.3}  AP50 {:.3}  AP_s {:.3}  AP_m {:.3}  AP_l {:.3}",
        p.ap, p.ap50, p.ap_s, p.ap_m, p.ap_l
    );
    Ok(())
}
