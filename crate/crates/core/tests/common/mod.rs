#![allow(dead_code)]

pub mod fixtures;
pub mod oracle;

use cgdet::data::{evaluate, Annotation, EvalParams, EvalReport, ImageDetections};
use cgdet::geometry::BBox;
use serde::Deserialize;

#[derive(Deserialize)]
pub struct FixtureImage {
    pub id: u64,
    pub gt: Vec<[f64; 5]>,
    pub dets: Vec<[f64; 6]>,
}

#[derive(Deserialize)]
pub struct Expected {
    pub map: f64,
    pub map50: f64,
    pub map75: f64,
    pub map_s: f64,
    pub map_m: f64,
    pub map_l: f64,
    pub mar: f64,
    pub per_class_ap: Vec<Option<f64>>,
}

#[derive(Deserialize)]
pub struct EvalFixture {
    pub name: String,
    pub image_area: f64,
    pub num_classes: usize,
    pub images: Vec<FixtureImage>,
    pub expected: Expected,
}

pub fn eval_fixtures() -> Vec<EvalFixture> {
    let text = include_str!("../fixtures/eval_fixtures.json");
    serde_json::from_str(text).expect("fixture file parses")
}

impl EvalFixture {
    pub fn run(&self) -> EvalReport {
        let gt_box = |g: &[f64; 5]| BBox::new(g[0], g[1], g[2], g[3], g[4] as usize).unwrap();
        let det_box = |d: &[f64; 6]| BBox::new(d[0], d[1], d[2], d[3], d[4] as usize).unwrap().with_score(d[5]);
        let annotations: Vec<Annotation> = self
            .images
            .iter()
            .map(|i| Annotation { image_id: i.id, boxes: i.gt.iter().map(gt_box).collect() })
            .collect();
        let detections: Vec<ImageDetections> = self
            .images
            .iter()
            .map(|i| ImageDetections { image_id: i.id, boxes: i.dets.iter().map(det_box).collect() })
            .collect();
        evaluate(&detections, &annotations, &EvalParams::coco(self.num_classes, self.image_area)).unwrap()
    }

    /// Largest absolute difference over every reported metric.
    pub fn max_abs_diff(&self, r: &EvalReport) -> f64 {
        let e = &self.expected;
        let mut d = [
            (r.map, e.map),
            (r.map50, e.map50),
            (r.map75, e.map75),
            (r.map_s, e.map_s),
            (r.map_m, e.map_m),
            (r.map_l, e.map_l),
            (r.mar, e.mar),
        ]
        .iter()
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
        for (a, b) in r.per_class_ap.iter().zip(&e.per_class_ap) {
            d = d.max(match (a, b) {
                (Some(a), Some(b)) => (a - b).abs(),
                (None, None) => 0.0,
                _ => f64::INFINITY,
            });
        }
        d
    }
}
