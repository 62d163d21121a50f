//! Small fixed inputs evaluated both by the library and by [`super::oracle`].
//! Each function returns `(library value, oracle value)`.

use cgdet::cmg::{cms_loss, CmgConfig, CmgMode, CosineVariant};
use cgdet::detector::{detection_loss, DetLossConfig, LevelOutput};
use cgdet::geometry::{BBox, FeaturePyramid, PyramidSpec, PyramidTensors};
use cgdet::numeric::{Tape, Tensor};
use cgdet::rcs::{build_sets, supcon_loss, MemoryQueue, RoiEmbedding, Source};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::{self, HeadLevel, Map};

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn supcon_pair(z: &[Vec<f64>], classes: &[usize], queue: &[(Vec<f64>, usize)], tau: f64) -> (f64, f64) {
    let d = z[0].len();
    let mut q = MemoryQueue::<f64>::new(queue.len().max(1));
    let entries: Vec<RoiEmbedding<f64>> = queue
        .iter()
        .map(|(z, c)| RoiEmbedding { z: z.clone(), class_id: *c, source: Source::Queue })
        .collect();
    q.push(&entries);
    let mut tape = Tape::<f64>::new();
    let zv = tape.constant(Tensor::from_vec(vec![z.len(), d], z.concat()).unwrap());
    let cb = build_sets(classes, &q);
    let loss = supcon_loss(&mut tape, zv, &cb, &q, tau).unwrap();
    (tape.value(loss).item(), oracle::supcon(z, classes, queue, tau))
}

/// Two identical unit vectors of one class and an orthogonal one of another,
/// `τ = 1`: each anchor's loss is `log(1 + e^{-1})`.
pub fn supcon_closed_form() -> (f64, f64) {
    let z = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
    let ours = supcon_pair(&z, &[0, 0, 1], &[], 1.0).0;
    (ours, (1.0 + (-1.0f64).exp()).ln())
}

/// 12 embeddings in 3 classes with an 8-entry mixed-class queue.
pub fn supcon_random(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Vec<Vec<f64>> = (0..12).map(|_| unit(&mut rng, 6)).collect();
    let classes: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let queue: Vec<(Vec<f64>, usize)> = (0..8).map(|k| (unit(&mut rng, 6), k % 3)).collect();
    supcon_pair(&z, &classes, &queue, 0.1)
}

fn random_map(rng: &mut ChaCha8Rng, dims: [usize; 4], lo: f64, hi: f64) -> Map {
    Map { dims, data: (0..dims.iter().product()).map(|_| rng.gen_range(lo..hi)).collect() }
}

fn tensor(m: &Map) -> Tensor<f64> {
    Tensor::from_vec(m.dims.to_vec(), m.data.clone()).unwrap()
}

fn pyramids(seed: u64, n: usize, c: usize) -> (Vec<Map>, Vec<Map>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let student = [8, 4, 2].map(|s| random_map(&mut rng, [n, c, s, s], -1.0, 1.0)).into_iter().collect();
    let teacher = [8, 4, 2].map(|s| random_map(&mut rng, [n, c, s, s], -1.0, 1.0)).into_iter().collect();
    (student, teacher)
}

fn b(x1: f64, y1: f64, x2: f64, y2: f64, c: usize) -> BBox {
    BBox::new(x1, y1, x2, y2, c).unwrap()
}

fn cms_pair(cfg: &CmgConfig, student: &[Map], teacher: &[Map], gt: &[Vec<BBox>]) -> f64 {
    let spec = PyramidSpec::standard(student[0].dims[1]);
    let mut tape = Tape::<f64>::new();
    let levels = student.iter().map(|m| tape.constant(tensor(m))).collect();
    let sp = FeaturePyramid { spec: spec.clone(), levels };
    let tp = PyramidTensors { spec, levels: teacher.iter().map(tensor).collect() };
    let loss = cms_loss(&mut tape, &sp, &tp, gt, cfg).unwrap();
    tape.value(loss).item()
}

/// 64 x 64 images, two per batch; boxes span all three levels, one crosses
/// the border and one is too small to pool.
pub fn cms_roi() -> (f64, f64) {
    let (student, teacher) = pyramids(11, 2, 5);
    let gt = vec![
        vec![b(3.0, 4.0, 17.5, 19.0, 0), b(20.0, 8.0, 58.0, 40.0, 1), b(30.0, 30.0, 32.0, 40.0, 2)],
        vec![b(-6.0, 10.0, 70.0, 63.0, 2), b(40.0, 41.0, 51.0, 60.0, 0)],
    ];
    let cfg = CmgConfig {
        enabled: true,
        level_weights: vec![1.0, 0.5, 2.0],
        cosine_weight: 0.7,
        mode: CmgMode::Roi,
        roi_output_size: 3,
        ..CmgConfig::default()
    };
    let ours = cms_pair(&cfg, &student, &teacher, &gt);
    let want = oracle::cms_roi(&student, &teacher, &gt, &cfg.level_weights, 0.7, 3, 3.0, (64.0, 64.0));
    (ours, want)
}

pub fn cms_full_map(variant: CosineVariant) -> (f64, f64) {
    let (student, teacher) = pyramids(12, 2, 4);
    let cfg = CmgConfig {
        enabled: true,
        level_weights: vec![0.25, 1.0, 1.5],
        cosine_weight: 1.3,
        mode: CmgMode::FullMap,
        cosine_variant: variant,
        ..CmgConfig::default()
    };
    let ours = cms_pair(&cfg, &student, &teacher, &[vec![], vec![]]);
    let per_location = variant == CosineVariant::PerLocation;
    (ours, oracle::cms_full_map(&student, &teacher, &cfg.level_weights, 1.3, per_location))
}

/// Two 64 x 64 images, three classes: boxes on every level and two
/// overlapping small boxes competing for locations.
pub fn detection() -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (n, classes) = (2, 3);
    let levels: Vec<HeadLevel> = [8, 4, 2]
        .map(|s| HeadLevel {
            cls: random_map(&mut rng, [n, classes, s, s], -3.0, 3.0),
            obj: random_map(&mut rng, [n, 1, s, s], -3.0, 3.0),
            reg: random_map(&mut rng, [n, 4, s, s], -0.5, 1.5),
        })
        .into_iter()
        .collect();
    let gt = vec![
        vec![b(12.0, 12.0, 28.0, 28.0, 0), b(4.0, 30.0, 60.0, 62.0, 2)],
        vec![b(0.0, 0.0, 64.0, 64.0, 1), b(14.0, 14.0, 29.0, 29.0, 1), b(10.0, 10.0, 26.0, 27.0, 0)],
    ];
    let cfg = DetLossConfig { cls_weight: 1.0, obj_weight: 1.5, iou_weight: 5.0, radius: 1.5, assign_grid: 2 };
    let spec = PyramidSpec::standard(4);
    let mut tape = Tape::<f64>::new();
    let outs: Vec<LevelOutput> = levels
        .iter()
        .map(|l| LevelOutput {
            cls: tape.constant(tensor(&l.cls)),
            obj: tape.constant(tensor(&l.obj)),
            reg: tape.constant(tensor(&l.reg)),
        })
        .collect();
    let loss = detection_loss(&mut tape, &outs, &spec, &gt, &cfg).unwrap();
    let ours = tape.value(loss.total).item();
    (ours, oracle::detection(&levels, &gt, [1.0, 1.5, 5.0], 1.5, 2))
}

/// Every loss fixture by name, for reporting.
pub fn loss_fixtures() -> Vec<(&'static str, (f64, f64))> {
    vec![
        ("supcon closed form", supcon_closed_form()),
        ("supcon 12x6, queue 8 (seed 1)", supcon_random(1)),
        ("supcon 12x6, queue 8 (seed 2)", supcon_random(2)),
        ("cms roi", cms_roi()),
        ("cms full map, per-location cosine", cms_full_map(CosineVariant::PerLocation)),
        ("cms full map, flattened cosine", cms_full_map(CosineVariant::GlobalFlatten)),
        ("detection", detection()),
    ]
}
