//! Suppress overlapping boxes, then score detections with COCO-style AP and
//! the duplicate-rate proxy.

use cgdet::data::{duplicate_rate, evaluate, Annotation, EvalParams, ImageDetections};
use cgdet::geometry::{nms, BBox};

fn main() -> cgdet::Result<()> {
    let gt = vec![BBox::new(10.0, 10.0, 30.0, 30.0, 0)?, BBox::new(40.0, 8.0, 60.0, 40.0, 1)?];
    let raw = vec![
        BBox::new(10.0, 10.0, 30.0, 30.0, 0)?.with_score(0.9),
        BBox::new(11.0, 11.0, 31.0, 31.0, 0)?.with_score(0.8),
        BBox::new(41.0, 9.0, 60.0, 40.0, 1)?.with_score(0.7),
        BBox::new(0.0, 44.0, 12.0, 60.0, 2)?.with_score(0.4),
    ];
    let kept = nms(&raw, 0.65, 0.01);
    println!("nms kept {} of {} boxes", kept.len(), raw.len());

    let annotations = vec![Annotation { image_id: 0, boxes: gt }];
    let params = EvalParams::coco(3, 64.0 * 64.0);
    for (name, boxes) in [("raw", raw), ("after nms", kept)] {
        let dets = vec![ImageDetections { image_id: 0, boxes }];
        let report = evaluate(&dets, &annotations, &params)?;
        let dup = duplicate_rate(&dets, &annotations, 0.5, 0.3)?;
        println!("{name:>9}: mAP {:.3}  mAP50 {:.3}  duplicate_rate {dup:.3}", report.map, report.map50);
    }
    Ok(())
}
