//! The gradient-check suite behind `cgdet gradcheck`: every differentiable
//! op, the contrastive and consistency losses, the detection loss and the
//! full training objective, each over several random seeds in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cmg::{cms_loss, CmgConfig, CmgMode, CosineVariant};
use crate::detector::{detection_loss, objective, DetLossConfig, DetectorModel, LevelOutput, ModelConfig, ObjectiveConfig};
use crate::detector::model::FeatureNet;
use crate::error::Result;
use crate::geometry::{roi_align, BBox, FeaturePyramid, PyramidSpec};
use crate::numeric::gradcheck::ParamReport;
use crate::numeric::{gradcheck, GradcheckOptions, GradcheckReport, ParamId, ParamSet, ParamStore, Tape, Tensor, Var};
use crate::rcs::{build_sets, supcon_loss, MemoryQueue, RcsConfig, RcsHead, RoiEmbedding, Source};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    pub seeds: u64,
    pub h: f64,
    pub tol: f64,
    /// Coordinates sampled per parameter in the network-sized fixtures.
    pub max_coords: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seeds: 10,
            h: 1e-5,
            tol: 1e-4,
            max_coords: 6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ItemReport {
    pub name: &'static str,
    pub seeds: u64,
    pub coords: usize,
    pub max_rel_err: f64,
    /// Frozen parameters that picked up a gradient (must be empty).
    pub frozen_with_grad: Vec<String>,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub h: f64,
    pub tol: f64,
    pub items: Vec<ItemReport>,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Check = fn(&mut ChaCha8Rng, GradcheckOptions) -> Result<GradcheckReport>;

const ITEMS: &[(&str, Check)] = &[
    ("conv2d", check_conv2d),
    ("relu", check_relu),
    ("silu", check_silu),
    ("add", check_add),
    ("mul", check_mul),
    ("scale_sum_mean", check_reductions),
    ("weighted_sum", check_weighted_sum),
    ("concat_channels", check_concat_channels),
    ("concat_rows", check_concat_rows),
    ("global_avg_pool", check_gap),
    ("linear", check_linear),
    ("l2_normalize", check_l2_normalize),
    ("upsample_nearest2x", check_upsample),
    ("roi_align", check_roi_align),
    ("supcon_loss", check_supcon),
    ("cms_loss_full_map", check_cms_full),
    ("cms_loss_roi", check_cms_roi),
    ("detection_loss", check_detection),
    ("total_objective", check_total),
    ("teacher_zero_grad", check_teacher_frozen),
];

pub fn item_names() -> Vec<&'static str> {
    ITEMS.iter().map(|(n, _)| *n).collect()
}

/// Run every item over `opts.seeds` seeds.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut items = Vec::with_capacity(ITEMS.len());
    for (k, &(name, check)) in ITEMS.iter().enumerate() {
        let mut worst = 0.0f64;
        let mut coords = 0;
        let mut frozen = Vec::new();
        for seed in 0..opts.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gradcheck", k as u64));
            let go = GradcheckOptions {
                h: opts.h,
                tol: opts.tol,
                max_coords: Some(opts.max_coords),
                seed,
            };
            let r = check(&mut rng, go)?;
            worst = worst.max(r.max_rel_err);
            coords += r.params.iter().map(|p| p.coords).sum::<usize>();
            for f in r.frozen_with_grad {
                if !frozen.contains(&f) {
                    frozen.push(f);
                }
            }
        }
        items.push(ItemReport {
            name,
            seeds: opts.seeds,
            coords,
            max_rel_err: worst,
            passed: worst < opts.tol && frozen.is_empty(),
            frozen_with_grad: frozen,
        });
    }
    let max_rel_err = items.iter().map(|i| i.max_rel_err).fold(0.0, f64::max);
    let passed = items.iter().all(|i| i.passed);
    Ok(SuiteReport {
        h: opts.h,
        tol: opts.tol,
        items,
        max_rel_err,
        passed,
    })
}

fn random(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape")
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output element receives a
/// distinct upstream gradient.
fn project(tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(r.clone());
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

/// A store with one random tensor per shape, plus the matching projections.
fn fixture(rng: &mut impl Rng, shapes: &[&[usize]]) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("x{i}"), random(rng, s, 1.0)))
        .collect();
    (store, ids)
}

fn unary(
    rng: &mut ChaCha8Rng,
    opts: GradcheckOptions,
    shape: &[usize],
    op: fn(&mut Tape<f64>, Var) -> Result<Var>,
    keep_off_zero: bool,
) -> Result<GradcheckReport> {
    let (mut store, ids) = fixture(rng, &[shape]);
    if keep_off_zero {
        // Keep away from the kink at zero, where finite differences straddle it.
        let p = store.get_mut(ids[0]);
        p.tensor = p.tensor.map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v });
    }
    let out_shape = {
        let mut tape = Tape::no_grad();
        let x = tape.param(&store, ids[0]);
        let y = op(&mut tape, x)?;
        tape.value(y).shape().to_vec()
    };
    let r = random(rng, &out_shape, 1.0);
    gradcheck(
        &mut store,
        |tape, s| {
            let x = tape.param(s, ids[0]);
            let y = op(tape, x)?;
            project(tape, y, &r)
        },
        GradcheckOptions { max_coords: None, ..opts },
    )
}

fn check_conv2d(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let (mut store, ids) = fixture(rng, &[&[2, 3, 6, 6], &[4, 3, 3, 3], &[4], &[2, 3, 1, 1], &[2]]);
    let r1 = random(rng, &[2, 4, 6, 6], 1.0);
    let r2 = random(rng, &[2, 2, 3, 3], 1.0);
    gradcheck(
        &mut store,
        |tape, s| {
            let [x, w, b, w2, b2] = [0, 1, 2, 3, 4].map(|i| tape.param(s, ids[i]));
            let same = tape.conv2d(x, w, b, 1, 1)?;
            let down = tape.conv2d(x, w2, b2, 2, 0)?;
            let a = project(tape, same, &r1)?;
            let c = project(tape, down, &r2)?;
            tape.add(a, c)
        },
        GradcheckOptions { max_coords: None, ..opts },
    )
}

fn check_relu(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    unary(rng, opts, &[2, 3, 4, 4], |t, x| t.relu(x), true)
}

fn check_silu(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    unary(rng, opts, &[2, 3, 4, 4], |t, x| t.silu(x), false)
}

fn check_add(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    binary(rng, opts, |t, a, b| t.add(a, b))
}

fn check_mul(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    binary(rng, opts, |t, a, b| t.mul(a, b))
}

fn binary(
    rng: &mut ChaCha8Rng,
    opts: GradcheckOptions,
    op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>,
) -> Result<GradcheckReport> {
    let shape = [2, 2, 3, 3];
    let (mut store, ids) = fixture(rng, &[&shape, &shape]);
    let r = random(rng, &shape, 1.0);
    gradcheck(
        &mut store,
        |tape, s| {
            let a = tape.param(s, ids[0]);
            let b = tape.param(s, ids[1]);
            // `a` appears twice so gradient accumulation is exercised.
            let y = op(tape, a, b)?;
            let y = op(tape, y, a)?;
            project(tape, y, &r)
        },
        GradcheckOptions { max_coords: None, ..opts },
    )
}

fn check_reductions(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let (mut store, ids) = fixture(rng, &[&[3, 5]]);
    let c = rng.gen_range(-2.0..2.0);
    gradcheck(
        &mut store,
        |tape, s| {
            let x = tape.param(s, ids[0]);
            let sq = tape.mul(x, x)?;
            let m = tape.mean(sq)?;
            let scaled = tape.scale(x, c)?;
            let t = tape.sum(scaled)?;
            let p = tape.mul(m, t)?;
            tape.add(p, m)
        },
        GradcheckOptions { max_coords: None, ..opts },
    )
}

fn check_weighted_sum(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let (mut store, ids) = fixture(rng, &[&[4], &[4], &[4]]);
    let w: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let r = random(rng, &[4], 1.0);
    gradcheck(
        &mut store,
        |tape, s| {
            let terms = ids
                .iter()
                .zip(&w)
                .map(|(&id, &w)| {
                    let x = tape.param(s, id);
                    let y = tape.mul(x, x)?;
                    Ok((project(tape, y, &r)?, w))
                })
                .collect::<Result<Vec<_>>>()?;
            tape.weighted_sum(&terms)
        },
        GradcheckOptions { max_coords: None, ..opts },
    )
}

fn check_concat_channels(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let (mut store, ids) = fixture(rng, &[&[2, 2, 3, 3], &[2, 3, 3, 3]]);
    let r = random(rng, &[2, 5, 3, 3], 1.0);
    gradcheck(
        &mut store,
        |tape, s| {
            let a = tape.param(s, ids[0]);
            let b = tape.param(s, ids[1]);
            let y = tape.concat_channels(&[a, b])?;
            let y = tape.silu(y)?;
            project(tape, y, &r)
        },
        GradcheckOptions { max_coords: None, ..opts },
    )
}

fn check_concat_rows(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let (mut store, ids) = fixture(rng, &[&[2, 4], &[3, 4]]);
    let r = random(rng, &[5, 4], 1.0);
    gradcheck(
        &mut store,
        |tape, s| {
            let a = tape.param(s, ids[0]);
            let b = tape.param(s, ids[1]);
            let y = tape.concat_rows(&[a, b])?;
            let y = tape.silu(y)?;
            project(tape, y, &r)
        },
        GradcheckOptions { max_coords: None, ..opts },
    )
}

fn check_gap(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    unary(rng, opts, &[2, 3, 4, 4], |t, x| t.global_avg_pool(x), false)
}

fn check_linear(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let (mut store, ids) = fixture(rng, &[&[3, 5], &[4, 5], &[4]]);
    let r = random(rng, &[3, 4], 1.0);
    gradcheck(
        &mut store,
        |tape, s| {
            let [x, w, b] = [0, 1, 2].map(|i| tape.param(s, ids[i]));
            let y = tape.linear(x, w, b)?;
            project(tape, y, &r)
        },
        GradcheckOptions { max_coords: None, ..opts },
    )
}

fn check_l2_normalize(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    unary(rng, opts, &[3, 5], |t, x| t.l2_normalize(x), false)
}

fn check_upsample(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    unary(rng, opts, &[2, 2, 3, 3], |t, x| t.upsample_nearest2x(x), false)
}

fn random_box(rng: &mut impl Rng, size: f64, min_side: f64, class_id: usize) -> BBox {
    let w = rng.gen_range(min_side..size * 0.7);
    let h = rng.gen_range(min_side..size * 0.7);
    let x1 = rng.gen_range(0.0..size - w);
    let y1 = rng.gen_range(0.0..size - h);
    BBox::new(x1, y1, x1 + w, y1 + h, class_id).expect("valid box")
}

fn check_roi_align(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let (mut store, ids) = fixture(rng, &[&[2, 3, 8, 8]]);
    let boxes: Vec<(usize, BBox)> = (0..4).map(|k| (k % 2, random_box(rng, 32.0, 3.0, 0))).collect();
    let rs: Vec<Tensor<f64>> = boxes.iter().map(|_| random(rng, &[1, 3, 3, 3], 1.0)).collect();
    gradcheck(
        &mut store,
        |tape, s| {
            let f = tape.param(s, ids[0]);
            let mut terms = Vec::new();
            for ((n, b), r) in boxes.iter().zip(&rs) {
                if let Some(p) = roi_align(tape, f, *n, b, 3, 4)? {
                    terms.push((project(tape, p, r)?, 1.0));
                }
            }
            tape.weighted_sum(&terms)
        },
        GradcheckOptions { max_coords: None, ..opts },
    )
}

fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

fn random_queue(rng: &mut impl Rng, len: usize, d: usize, classes: usize) -> MemoryQueue<f64> {
    let mut q = MemoryQueue::new(len);
    let entries: Vec<RoiEmbedding<f64>> = (0..len)
        .map(|_| RoiEmbedding {
            z: unit(rng, d),
            class_id: rng.gen_range(0..classes),
            source: Source::Queue,
        })
        .collect();
    q.push(&entries);
    q
}

fn check_supcon(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let (m, d) = (8, 6);
    let (mut store, ids) = fixture(rng, &[&[m, d]]);
    let mut classes: Vec<usize> = (0..m).map(|_| rng.gen_range(0..3)).collect();
    classes[1] = classes[0];
    let queue = random_queue(rng, 5, d, 3);
    let cb = build_sets(&classes, &queue);
    let tau = rng.gen_range(0.1..1.0);
    gradcheck(
        &mut store,
        |tape, s| {
            let x = tape.param(s, ids[0]);
            let z = tape.l2_normalize(x)?;
            supcon_loss(tape, z, &cb, &queue, tau)
        },
        GradcheckOptions { max_coords: None, ..opts },
    )
}

fn two_level_spec() -> PyramidSpec {
    let mut spec = PyramidSpec::standard(3);
    spec.levels.truncate(2);
    spec
}

fn check_cms(rng: &mut ChaCha8Rng, opts: GradcheckOptions, mode: CmgMode) -> Result<GradcheckReport> {
    let spec = two_level_spec();
    let shapes: Vec<[usize; 4]> = spec.levels.iter().map(|l| [2, 3, 32 / l.stride, 32 / l.stride]).collect();
    let (mut store, ids) = fixture(rng, &[&shapes[0], &shapes[1]]);
    let teacher = crate::geometry::PyramidTensors {
        spec: spec.clone(),
        levels: shapes.iter().map(|s| random(rng, s, 1.0)).collect(),
    };
    let gt = vec![
        vec![random_box(rng, 32.0, 6.0, 0), random_box(rng, 32.0, 6.0, 1)],
        vec![random_box(rng, 32.0, 6.0, 2)],
    ];
    let variant = if rng.gen_bool(0.5) {
        CosineVariant::PerLocation
    } else {
        CosineVariant::GlobalFlatten
    };
    let cfg = CmgConfig {
        enabled: true,
        level_weights: vec![rng.gen_range(0.2..1.5), rng.gen_range(0.2..1.5)],
        cosine_weight: rng.gen_range(0.1..2.0),
        mode,
        cosine_variant: variant,
        roi_output_size: 3,
        min_roi_side: 3.0,
        weight: 1.0,
    };
    gradcheck(
        &mut store,
        |tape, s| {
            let levels = ids.iter().map(|&id| tape.param(s, id)).collect();
            let student = FeaturePyramid { spec: spec.clone(), levels };
            cms_loss(tape, &student, &teacher, &gt, &cfg)
        },
        GradcheckOptions { max_coords: Some(opts.max_coords.unwrap_or(6) * 5), ..opts },
    )
}

fn check_cms_full(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    check_cms(rng, opts, CmgMode::FullMap)
}

fn check_cms_roi(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    check_cms(rng, opts, CmgMode::Roi)
}

fn check_detection(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let spec = PyramidSpec::standard(4);
    let classes = 3;
    let mut store = ParamStore::new();
    let mut heads = Vec::new();
    for l in &spec.levels {
        let side = 64 / l.stride;
        let mut add = |name: String, c: usize, scale: f64, shift: f64| {
            let t = random(rng, &[2, c, side, side], scale).map(|v| v + shift);
            store.add(name, t)
        };
        let cls = add(format!("cls{}", l.index), classes, 1.0, -2.0);
        let obj = add(format!("obj{}", l.index), 1, 1.0, -2.0);
        let reg = add(format!("reg{}", l.index), 4, 0.5, 0.3);
        heads.push([cls, obj, reg]);
    }
    let gt = vec![
        vec![random_box(rng, 64.0, 6.0, 0), random_box(rng, 64.0, 12.0, 1)],
        vec![random_box(rng, 64.0, 6.0, 2)],
    ];
    let cfg = DetLossConfig::default();
    gradcheck(
        &mut store,
        |tape, s| {
            let levels: Vec<LevelOutput> = heads
                .iter()
                .map(|&[c, o, r]| LevelOutput {
                    cls: tape.param(s, c),
                    obj: tape.param(s, o),
                    reg: tape.param(s, r),
                })
                .collect();
            Ok(detection_loss(tape, &levels, &spec, &gt, &cfg)?.total)
        },
        GradcheckOptions { max_coords: Some(opts.max_coords.unwrap_or(6) * 10), ..opts },
    )
}

/// Student, contrastive head and frozen teacher of the composite fixture.
struct Composite {
    model: DetectorModel<f64>,
    head: RcsHead<f64>,
    teacher: FeatureNet<f64>,
}

impl ParamSet for Composite {
    fn param_stores(&self) -> Vec<&ParamStore<f64>> {
        vec![&self.model.net.store, &self.model.head.store, &self.head.store, &self.teacher.store]
    }

    fn param_stores_mut(&mut self) -> Vec<&mut ParamStore<f64>> {
        vec![
            &mut self.model.net.store,
            &mut self.model.head.store,
            &mut self.head.store,
            &mut self.teacher.store,
        ]
    }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        in_channels: 1,
        base_width: 2,
        pyramid_channels: 4,
        num_classes: 3,
    }
}

fn composite(rng: &mut ChaCha8Rng) -> Result<Composite> {
    let cfg = tiny_config();
    let model = DetectorModel::new(&cfg, rng)?;
    let head = RcsHead::new(cfg.pyramid_channels, 5, rng);
    let mut teacher = FeatureNet::new(&ModelConfig { in_channels: 3, ..cfg }, rng)?;
    teacher.store.freeze_all();
    Ok(Composite { model, head, teacher })
}

/// `L_det + λ_rcs L_rcs + λ_cms L_cms` through the whole student network,
/// with the teacher evaluated on the same tape.
fn composite_fixture(
    rng: &mut ChaCha8Rng,
    opts: GradcheckOptions,
) -> Result<GradcheckReport> {
    let mut set = composite(rng)?;
    let thermal = random(rng, &[2, 1, 32, 32], 1.0);
    let visible = random(rng, &[2, 3, 32, 32], 1.0);
    let gt = vec![
        vec![random_box(rng, 32.0, 6.0, 0), random_box(rng, 32.0, 6.0, 0)],
        vec![random_box(rng, 32.0, 6.0, 1), random_box(rng, 32.0, 8.0, 2)],
    ];
    let queue = random_queue(rng, 4, 5, 3);
    let cfg = ObjectiveConfig {
        det: DetLossConfig::default(),
        rcs: RcsConfig {
            enabled: true,
            grid_size: 3,
            embed_dim: 5,
            temperature: 0.5,
            queue_capacity: 4,
            weight: rng.gen_range(0.2..1.5),
        },
        cmg: CmgConfig {
            enabled: true,
            roi_output_size: 3,
            weight: rng.gen_range(0.2..1.5),
            mode: if rng.gen_bool(0.5) { CmgMode::Roi } else { CmgMode::FullMap },
            ..CmgConfig::default()
        },
    };
    gradcheck(
        &mut set,
        |tape, s| {
            let v = tape.constant(visible.clone());
            let tp = s.teacher.forward(tape, v)?;
            let teacher = tp.detach(tape);
            let x = tape.constant(thermal.clone());
            Ok(objective(tape, &s.model, &s.head, &queue, Some(&teacher), x, &gt, &cfg)?.total)
        },
        opts,
    )
}

fn check_total(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    composite_fixture(rng, opts)
}

/// The teacher's parameters sit on the tape as frozen leaves; after a
/// backward pass through the full objective none of them may hold a
/// gradient. Reported as its own item so the contract has a line.
fn check_teacher_frozen(rng: &mut ChaCha8Rng, opts: GradcheckOptions) -> Result<GradcheckReport> {
    let set = composite(rng)?;
    let thermal = random(rng, &[1, 1, 32, 32], 1.0);
    let visible = random(rng, &[1, 3, 32, 32], 1.0);
    let gt = vec![vec![random_box(rng, 32.0, 8.0, 0), random_box(rng, 32.0, 8.0, 1)]];
    let cfg = ObjectiveConfig {
        cmg: CmgConfig { enabled: true, roi_output_size: 3, ..CmgConfig::default() },
        ..ObjectiveConfig::default()
    };
    let mut tape = Tape::new();
    let v = tape.constant(visible);
    let teacher = set.teacher.forward(&mut tape, v)?.detach(&tape);
    let x = tape.constant(thermal);
    let total = objective(&mut tape, &set.model, &set.head, &MemoryQueue::new(0), Some(&teacher), x, &gt, &cfg)?.total;
    let grads = tape.backward(total)?;
    let store = &set.teacher.store;
    let frozen_with_grad = store
        .ids()
        .filter(|&id| grads.get(id).is_some())
        .map(|id| store.get(id).name.clone())
        .collect();
    Ok(GradcheckReport {
        max_rel_err: 0.0,
        params: vec![ParamReport {
            name: "teacher".into(),
            coords: store.len(),
            max_rel_err: 0.0,
        }],
        frozen_with_grad,
        tol: opts.tol,
    })
}
