//! Acceptance run: one PASS/FAIL line per headline criterion.
//!
//! Runs without the libtest harness so the report is always printed;
//! exits non-zero when any criterion fails.

mod common;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use cgdet::checks::{run_suite, SuiteOptions};
use cgdet::cli::{mean_std, RunConfig};
use cgdet::cmg::{pretrain_teacher, TeacherBundle};
use cgdet::data::{make_split, Sample, Split};
use cgdet::detector::{detection_loss, infer, init_model, Batch, ObjectiveConfig, TrainConfig, TrainState};
use cgdet::experiment::{run_cell, CellResult, CellSetup, Preset};
use cgdet::numeric::{probe, Sgd, Tape};
use common::fixtures::loss_fixtures;
use common::oracle::rel_err;

/// Margins for the directional checks, fixed after the calibration run
/// recorded in `fixtures/directional_calibration.json`: only the direction
/// of each comparison is required.
const SILHOUETTE_MARGIN: f64 = 0.0;
const MAP50_MARGIN: f64 = 0.0;
const DUPLICATE_MARGIN: f64 = 0.0;

const REFERENCE_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Report {
    lines: Vec<(bool, String, String)>,
}

impl Report {
    fn record(&mut self, name: &str, pass: bool, detail: String) {
        println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((pass, name.to_string(), detail));
    }
}

/// Reference configuration: 128 x 128 images, 400 train / 100 val.
fn reference_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("data.image_size", "128"),
        ("data.n_train", "400"),
        ("data.n_val", "100"),
        ("train.epochs", "100"),
        ("teacher.epochs", "100"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

struct Reference {
    cfg: RunConfig,
    train: Split,
    val: Split,
    teacher: TeacherBundle<f32>,
    teacher_secs: f64,
}

fn reference() -> Reference {
    let cfg = reference_config();
    let spec = cfg.scene().unwrap();
    let seed = cfg.uint("data.seed");
    let train = make_split(&spec, seed, "train", cfg.usize("data.n_train")).unwrap();
    let val = make_split(&spec, seed, "val", cfg.usize("data.n_val")).unwrap();
    let t0 = Instant::now();
    let (teacher, _) = pretrain_teacher(&train, &cfg.model().unwrap(), &cfg.train().unwrap(), cfg.usize("teacher.epochs"), |_| {}).unwrap();
    Reference { cfg, train, val, teacher, teacher_secs: t0.elapsed().as_secs_f64() }
}

fn objective_for(cfg: &RunConfig, preset: Preset) -> ObjectiveConfig {
    let mut obj = cfg.objective().unwrap();
    preset.apply(&mut obj);
    obj
}

fn state_for(r: &Reference, preset: Preset, train: TrainConfig) -> TrainState {
    let teacher = preset.uses_cmg().then(|| r.teacher.clone());
    TrainState::new(&r.cfg.model().unwrap(), train, objective_for(&r.cfg, preset), teacher).unwrap()
}

fn batch(samples: &[Sample], with_visible: bool) -> Batch<f32> {
    Batch::from_samples(&samples.iter().collect::<Vec<_>>(), with_visible).unwrap()
}

fn gradient_correctness(rep: &mut Report) -> bool {
    let t0 = Instant::now();
    let suite = run_suite(&SuiteOptions::default()).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let worst = suite.items.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
    let pass = suite.passed && suite.items.len() >= 12 && secs < 120.0;
    rep.record(
        "gradient correctness",
        pass,
        format!(
            "{} items x {} seeds, h {:e}, max rel err {:.2e} ({}) < {:e}, {secs:.1}s < 120s",
            suite.items.len(),
            SuiteOptions::default().seeds,
            suite.h,
            suite.max_rel_err,
            worst.name,
            suite.tol
        ),
    );
    suite.items.iter().any(|i| i.name == "teacher_zero_grad" && i.passed && i.frozen_with_grad.is_empty())
}

fn loss_oracles(rep: &mut Report) {
    let mut worst = (0.0f64, "");
    let mut detail = String::new();
    for (name, (ours, want)) in loss_fixtures() {
        let e = rel_err(ours, want);
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, name);
        }
        if name == "supcon closed form" {
            let _ = write!(detail, "closed form {ours:.6} (log(1+e^-1) = {want:.6}); ");
        }
    }
    let _ = write!(detail, "{} fixtures, max rel err {:.1e} ({}) < 1e-6", loss_fixtures().len(), worst.0, worst.1);
    rep.record("loss oracles", worst.0 < 1e-6, detail);
}

fn frozen_teacher(rep: &mut Report, r: &Reference, zero_grads: bool) {
    let before = r.teacher.checksum();
    let mut state = state_for(r, Preset::Cmg, r.cfg.train().unwrap());
    state.plan(&r.train, 1).unwrap();
    let mut steps = 0;
    let mut max_cms = 0.0f64;
    while steps < 100 {
        let recs = state.run_epoch(&r.train, steps, |_| {}).unwrap();
        for rec in recs.iter().take(100 - steps) {
            max_cms = max_cms.max(rec.l_cms);
        }
        steps += recs.len().min(100 - steps);
    }
    let after = state.teacher.as_ref().unwrap().checksum();
    let pass = before == after && zero_grads && max_cms > 0.0 && state.teacher.as_ref().unwrap().is_frozen();
    rep.record(
        "frozen teacher",
        pass,
        format!(
            "checksum {}.. unchanged after {} cmg steps (max l_cms {max_cms:.3}); gradcheck teacher grads zero: {zero_grads}",
            &before[..12],
            state.step
        ),
    );
}

fn inference_parity(rep: &mut Report, r: &Reference) {
    let tcfg = r.cfg.train().unwrap();
    let mut full = state_for(r, Preset::Full, tcfg.clone());
    full.total_steps = 20;
    let train_batch = batch(&r.train.samples[..4], true);
    let (_, training) = probe::count(|| full.train_step(&train_batch).unwrap());
    let mut baseline = state_for(r, Preset::Baseline, tcfg);
    baseline.model = full.model.clone();
    let infer_cfg = r.cfg.infer().unwrap();
    let input = batch(&r.val.samples[..4], false).thermal;
    let (dets_full, c_full) = probe::count(|| infer(&full.model, &input, &infer_cfg).unwrap());
    let (dets_base, c_base) = probe::count(|| infer(&baseline.model, &input, &infer_cfg).unwrap());
    let pass = c_full == c_base && c_full.rcs_calls == 0 && c_full.cmg_calls == 0 && dets_full == dets_base && training.rcs_calls > 0 && training.cmg_calls > 0;
    rep.record(
        "inference parity",
        pass,
        format!(
            "{} ops each ({} kinds), identical: {}; rcs/cmg calls at inference {}/{} (training step: {}/{})",
            c_full.total_ops(),
            c_full.ops.len(),
            c_full == c_base,
            c_full.rcs_calls,
            c_full.cmg_calls,
            training.rcs_calls,
            training.cmg_calls
        ),
    );
}

/// 50 steps of the full trainer with both auxiliary weights at zero against
/// a loop that only knows the detection loss.
fn reduction(rep: &mut Report, r: &Reference) {
    let steps = 50;
    let tcfg = r.cfg.train().unwrap();
    let mut obj = objective_for(&r.cfg, Preset::Full);
    obj.rcs.weight = 0.0;
    obj.cmg.weight = 0.0;
    let mcfg = r.cfg.model().unwrap();
    let mut state = TrainState::new(&mcfg, tcfg.clone(), obj, Some(r.teacher.clone())).unwrap();
    state.total_steps = steps as u64;

    let mut model = init_model(&mcfg, tcfg.seed).unwrap();
    let sgd = Sgd::new(tcfg.lr, tcfg.momentum);
    let det_cfg = r.cfg.objective().unwrap().det;
    let mut identical_steps = 0;
    for step in 0..steps {
        let start = (step * tcfg.batch_size) % r.train.len();
        let b = batch(&r.train.samples[start..start + tcfg.batch_size], true);
        state.train_step(&b).unwrap();

        let lr = tcfg.lr_at(step as u64, steps as u64);
        let mut tape = Tape::new();
        let x = tape.constant(b.thermal.clone());
        let out = model.forward(&mut tape, x).unwrap();
        let det = detection_loss(&mut tape, &out.levels, &model.spec(), &b.gt, &det_cfg).unwrap();
        let mut grads = tape.backward(det.total).unwrap();
        let norm = grads.global_norm();
        if tcfg.grad_clip > 0.0 && norm > tcfg.grad_clip {
            grads.scale((tcfg.grad_clip / norm) as f32);
        }
        for store in model.stores_mut() {
            store.accumulate(&grads);
            sgd.step(store, lr);
        }
        if model.checksum() == state.model.checksum() {
            identical_steps += 1;
        }
    }
    let bits = |m: &cgdet::detector::DetectorModel<f32>| -> Vec<u32> {
        m.stores().iter().flat_map(|s| s.iter().flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits()))).collect()
    };
    let pass = identical_steps == steps && bits(&model) == bits(&state.model) && state.queue.is_empty();
    rep.record(
        "objective reduction",
        pass,
        format!("lambda_rcs = lambda_cms = 0: parameters bit-identical to a detection-only loop at {identical_steps}/{steps} steps"),
    );
}

fn overfit(rep: &mut Report, r: &Reference) {
    let t0 = Instant::now();
    let frozen = batch(&r.train.samples[..4], true);
    let mut parts = Vec::new();
    let mut pass = true;
    for preset in Preset::ALL {
        let mut state = state_for(r, preset, r.cfg.train().unwrap());
        state.total_steps = 200;
        let l0 = state.train_step(&frozen).unwrap().l_total;
        for _ in 1..200 {
            state.train_step(&frozen).unwrap();
        }
        // Loss after 200 updates.
        let l200 = state.train_step(&frozen).unwrap().l_total;
        pass &= l200 < 0.5 * l0;
        parts.push(format!("{} {l0:.3}->{l200:.3}", preset.name()));
    }
    let secs = t0.elapsed().as_secs_f64();
    pass &= secs < 300.0;
    rep.record("single-batch overfit", pass, format!("L200 < 0.5 L0: {}; {secs:.0}s < 300s", parts.join(", ")));
}

fn directional(rep: &mut Report, r: &Reference) {
    let t0 = Instant::now();
    let (mcfg, tcfg, obj, icfg, ecfg) = (r.cfg.model().unwrap(), r.cfg.train().unwrap(), r.cfg.objective().unwrap(), r.cfg.infer().unwrap(), r.cfg.eval());
    let setup = CellSetup { model: &mcfg, train: &tcfg, objective: &obj, infer: &icfg, eval: &ecfg };
    let presets = [Preset::Baseline, Preset::Rcs, Preset::Full];
    let mut cells: Vec<CellResult> = Vec::new();
    for &seed in &REFERENCE_SEEDS {
        for preset in presets {
            let (cell, _) = run_cell(&setup, preset, seed, Some(&r.teacher), &r.train, &r.val, |_| {}).unwrap();
            println!(
                "      {:<8} seed {seed}: mAP50 {:.4}  duplicate_rate {:.4}  silhouette {}",
                preset.name(),
                cell.map50,
                cell.duplicate_rate,
                cell.silhouette.map_or("n/a".into(), |s| format!("{s:.4}"))
            );
            cells.push(cell);
        }
    }
    let stat = |p: Preset, f: &dyn Fn(&CellResult) -> f64| mean_std(&cells.iter().filter(|c| c.preset == p).map(f).collect::<Vec<_>>());
    let sil = |c: &CellResult| c.silhouette.unwrap_or(f64::NAN);
    let (sil_b, sil_r) = (stat(Preset::Baseline, &sil), stat(Preset::Rcs, &sil));
    let (map_b, map_f) = (stat(Preset::Baseline, &|c| c.map50), stat(Preset::Full, &|c| c.map50));
    let (dup_b, dup_f) = (stat(Preset::Baseline, &|c| c.duplicate_rate), stat(Preset::Full, &|c| c.duplicate_rate));
    let secs = t0.elapsed().as_secs_f64() + r.teacher_secs;
    let budget = secs < 3600.0;
    let n = REFERENCE_SEEDS.len();
    rep.record(
        "directional (a) silhouette",
        sil_r.0 - sil_b.0 > SILHOUETTE_MARGIN && budget,
        format!("+RCS {:.4} ± {:.4} vs baseline {:.4} ± {:.4} ({n} seeds)", sil_r.0, sil_r.1, sil_b.0, sil_b.1),
    );
    rep.record(
        "directional (b) mAP50",
        map_f.0 - map_b.0 >= MAP50_MARGIN && budget,
        format!("full {:.4} ± {:.4} vs baseline {:.4} ± {:.4} ({n} seeds)", map_f.0, map_f.1, map_b.0, map_b.1),
    );
    rep.record(
        "directional (c) duplicate_rate",
        dup_f.0 - dup_b.0 <= DUPLICATE_MARGIN && budget,
        format!(
            "full {:.4} ± {:.4} vs baseline {:.4} ± {:.4} ({n} seeds); total {:.1} min incl. teacher < 60 min",
            dup_f.0,
            dup_f.1,
            dup_b.0,
            dup_b.1,
            secs / 60.0
        ),
    );
}

fn evaluator(rep: &mut Report) {
    let fixtures = common::eval_fixtures();
    let mut worst = (0.0f64, String::new());
    for f in &fixtures {
        let d = f.max_abs_diff(&f.run());
        if d >= worst.0 {
            worst = (d, f.name.clone());
        }
    }
    let get = |n: &str| fixtures.iter().find(|f| f.name == n).unwrap().run();
    let (perfect, empty) = (get("perfect"), get("empty_detections"));
    let pass = fixtures.len() == 20 && worst.0 <= 1e-4 && (perfect.map - 1.0).abs() < 1e-12 && empty.map == 0.0;
    rep.record(
        "evaluator conformance",
        pass,
        format!(
            "{} fixtures vs pycocotools, max |diff| {:.1e} ({}) <= 1e-4; perfect mAP {}, empty mAP {}",
            fixtures.len(),
            worst.0,
            worst.1,
            perfect.map,
            empty.map
        ),
    );
}

fn cgdet(args: &[&str]) -> (i32, Vec<u8>) {
    let o = Command::new(env!("CARGO_BIN_EXE_cgdet")).args(args).env_remove("CGDET_SEED").output().unwrap();
    if !o.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&o.stderr));
    }
    (o.status.code().unwrap_or(-1), o.stdout)
}

/// Every command twice into separate directories; stdout JSON and written
/// JSON files must match byte for byte.
fn determinism(rep: &mut Report) {
    let tmp = tempfile::TempDir::new().unwrap();
    let small = [
        "--data.image_size", "64", "--detector.base_width", "8", "--detector.pyramid_channels", "16", "--rcs.embed_dim", "32",
        "--train.epochs", "2", "--teacher.epochs", "2",
    ];
    let mut checked = Vec::new();
    let mut pass = true;
    for run in ["a", "b"] {
        let root = tmp.path().join(run);
        let p = |x: &str| root.join(x).to_str().unwrap().to_string();
        let (data, teacher, out, abl) = (p("data"), p("teacher"), p("out"), p("abl"));
        let final_ck = p("out/final");
        let commands: Vec<(&str, Vec<&str>)> = vec![
            ("gen", vec!["gen", "--out", &data, "--n-train", "16", "--n-val", "8"]),
            ("teacher", vec!["teacher", "--data", &data, "--teacher", &teacher]),
            ("train", vec!["train", "--preset", "full", "--data", &data, "--teacher", &teacher, "--out", &out]),
            ("eval", vec!["eval", "--checkpoint", &final_ck, "--data", &data, "--json", "--duplicate-rate"]),
            ("gradcheck", vec!["gradcheck", "--gradcheck.seeds", "1", "--json"]),
            ("ablate", vec!["ablate", "--data", &data, "--teacher", &teacher, "--out", &abl, "--seeds", "0", "--train.epochs", "1"]),
        ];
        for (name, args) in commands {
            let args: Vec<&str> = args.into_iter().chain(small).collect();
            let (code, stdout) = cgdet(&args);
            pass &= code == 0;
            checked.push((run, name, stdout));
        }
    }
    let half = checked.len() / 2;
    let mut names = Vec::new();
    for (a, b) in checked[..half].iter().zip(&checked[half..]) {
        pass &= a.2 == b.2 && !a.2.is_empty();
        names.push(a.1);
    }
    let files = ["data/dataset.json", "teacher/report.json", "out/report.json", "out/metrics.jsonl", "abl/ablation.json"];
    for f in files {
        let read = |run: &str| fs::read(Path::new(tmp.path()).join(run).join(f)).unwrap_or_default();
        pass &= read("a") == read("b") && !read("a").is_empty();
    }
    rep.record(
        "determinism",
        pass,
        format!("byte-identical stdout JSON for {} and {} written JSON files across reruns", names.join("/"), files.len()),
    );
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut rep = Report { lines: Vec::new() };
    println!("acceptance criteria");
    let teacher_grads_zero = gradient_correctness(&mut rep);
    loss_oracles(&mut rep);
    evaluator(&mut rep);
    determinism(&mut rep);
    let r = reference();
    println!("      reference teacher pretrained in {:.0}s", r.teacher_secs);
    frozen_teacher(&mut rep, &r, teacher_grads_zero);
    inference_parity(&mut rep, &r);
    reduction(&mut rep, &r);
    overfit(&mut rep, &r);
    directional(&mut rep, &r);

    let failed: Vec<&str> = rep.lines.iter().filter(|l| !l.0).map(|l| l.1.as_str()).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.1} min",
        rep.lines.len() - failed.len(),
        rep.lines.len(),
        start.elapsed().as_secs_f64() / 60.0
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
