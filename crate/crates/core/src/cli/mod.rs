//! `cgdet <gen|teacher|train|eval|gradcheck|ablate> [--config FILE] [--key value ...]`
//!
//! Configuration resolves in this order, later steps winning: built-in
//! defaults, `--preset`, the `--config` file, the `CGDET_SEED` environment
//! variable (for `train.seed`), then individual `--key value` flags.
//! Exit codes: 0 success, 1 failed check, 2 configuration error, 3 I/O or
//! malformed file.

mod config;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde_json::{json, Map, Value};

pub use config::RunConfig;

use crate::checks::{run_suite, SuiteOptions};
use crate::cmg::{pretrain_teacher, TeacherBundle};
use crate::data::{generate_dataset, load_split, Split};
use crate::detector::checkpoint;
use crate::detector::{DetectorModel, StepRecord, TrainState};
use crate::error::{Error, Result};
use crate::experiment::{evaluate_model, run_cell, CellResult, CellSetup, Preset};
use crate::numeric::inject_backward_fault;

pub const COMMANDS: [&str; 6] = ["gen", "teacher", "train", "eval", "gradcheck", "ablate"];

/// Identifies the build in every JSON output.
pub fn build_id() -> String {
    match option_env!("CGDET_BUILD_ID") {
        Some(id) => id.to_string(),
        None => format!("cgdet-{}", env!("CARGO_PKG_VERSION")),
    }
}

/// A parsed command line.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: String,
    pub config: RunConfig,
    pub json: bool,
    pub duplicate_rate: bool,
    pub force: bool,
    pub inject_fault: Option<&'static str>,
}

const FAULTABLE: &[&str] = &[
    "conv2d",
    "relu",
    "silu",
    "add",
    "mul",
    "scale",
    "sum",
    "concat_channels",
    "concat_rows",
    "global_avg_pool",
    "linear",
    "l2_normalize",
    "upsample_nearest2x",
    "bilinear_gather",
    "supcon_loss",
    "cms_loss",
    "detection_loss",
];

/// Flag spellings that stand for a config key. `--seed` and `--out` point
/// at the dataset for `gen`.
fn alias(command: &str, flag: &str) -> Option<&'static str> {
    Some(match (command, flag) {
        ("gen", "seed") => "data.seed",
        ("gen", "out") => "io.data",
        (_, "seed") => "train.seed",
        (_, "out") => "io.out",
        (_, "n-train") => "data.n_train",
        (_, "n-val") => "data.n_val",
        (_, "data") => "io.data",
        (_, "checkpoint") => "io.checkpoint",
        (_, "teacher") => "cmg.teacher_checkpoint",
        (_, "split") => "eval.split",
        (_, "seeds") => "ablate.seeds",
        (_, "presets") => "ablate.presets",
        (_, "epochs") => "train.epochs",
        (_, "jobs") => "ablate.jobs",
        _ => return None,
    })
}

fn usage() -> String {
    format!(
        "usage: cgdet <{}> [--config FILE] [--preset baseline|rcs|cmg|full] [--key value ...]\n\
         flags: --json --force --duplicate-rate --seed N --n-train N --n-val N --out DIR --data DIR\n\
         \x20      --checkpoint DIR --teacher DIR --split train|val --seeds 0,1,2 --epochs N --jobs N",
        COMMANDS.join("|")
    )
}

/// Parse arguments (without the program name). `env_seed` is the value of
/// `CGDET_SEED`, if set.
pub fn parse(args: &[String], env_seed: Option<&str>) -> Result<Invocation> {
    let command = args.first().ok_or_else(|| Error::config(usage()))?.clone();
    if !COMMANDS.contains(&command.as_str()) {
        return Err(Error::config(format!("unknown command '{command}'\n{}", usage())));
    }
    let mut inv = Invocation {
        command: command.clone(),
        config: RunConfig::default(),
        json: false,
        duplicate_rate: false,
        force: false,
        inject_fault: None,
    };
    let mut preset = None;
    let mut file = None;
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut it = args[1..].iter();
    while let Some(arg) = it.next() {
        let name = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::config(format!("unexpected argument '{arg}'\n{}", usage())))?;
        let (name, inline) = match name.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (name, None),
        };
        match name {
            "json" => inv.json = true,
            "force" => inv.force = true,
            "duplicate-rate" => inv.duplicate_rate = true,
            _ => {
                let value = match inline {
                    Some(v) => v,
                    None => it
                        .next()
                        .cloned()
                        .ok_or_else(|| Error::config(format!("--{name} needs a value")))?,
                };
                match name {
                    "config" => file = Some(value),
                    "preset" => preset = Some(value),
                    "inject-fault" => {
                        let op = FAULTABLE
                            .iter()
                            .find(|&&o| o == value)
                            .ok_or_else(|| Error::config(format!("--inject-fault: unknown op '{value}'")))?;
                        inv.inject_fault = Some(op);
                    }
                    _ => {
                        let key = alias(&command, name).map(str::to_string).unwrap_or_else(|| name.to_string());
                        overrides.push((key, value));
                    }
                }
            }
        }
    }
    if let Some(p) = preset {
        inv.config.apply_preset(&p)?;
    }
    if let Some(f) = file {
        inv.config.load_file(Path::new(&f))?;
    }
    if let Some(s) = env_seed {
        inv.config
            .set("train.seed", s)
            .map_err(|e| Error::config(format!("CGDET_SEED: {e}")))?;
    }
    for (k, v) in overrides {
        inv.config.set(&k, &v)?;
    }
    Ok(inv)
}

/// Entry point used by the binary. Returns the process exit code.
pub fn main_with(args: &[String], env_seed: Option<&str>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    if matches!(args.first().map(String::as_str), Some("-h" | "--help" | "help")) {
        let _ = writeln!(out, "{}", usage());
        return 0;
    }
    let inv = match parse(args, env_seed) {
        Ok(inv) => inv,
        Err(e) => {
            let _ = writeln!(err, "cgdet: {e}");
            return e.exit_code();
        }
    };
    match run(&inv, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "cgdet {}: {e}", inv.command);
            e.exit_code()
        }
    }
}

/// Execute a parsed invocation; `Ok(1)` signals a failed check.
pub fn run(inv: &Invocation, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match inv.command.as_str() {
        "gen" => cmd_gen(inv, out),
        "teacher" => cmd_teacher(inv, out, err),
        "train" => cmd_train(inv, out, err),
        "eval" => cmd_eval(inv, out),
        "gradcheck" => cmd_gradcheck(inv, out),
        "ablate" => cmd_ablate(inv, out, err),
        other => Err(Error::config(format!("unknown command '{other}'"))),
    }
}

/// `{command, config_digest, seed, git_or_build_id}` followed by `body`.
fn envelope(cfg: &RunConfig, command: &str, seed: u64, body: Value) -> Value {
    let mut m = Map::new();
    m.insert("command".into(), json!(command));
    m.insert("config_digest".into(), json!(cfg.digest()));
    m.insert("seed".into(), json!(seed));
    m.insert("git_or_build_id".into(), json!(build_id()));
    if let Value::Object(b) = body {
        m.extend(b);
    }
    Value::Object(m)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn emit(out: &mut dyn Write, v: &Value) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string(v).expect("serialisable")).map_err(|e| Error::io("<stdout>", e))
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

/// Dataset splits named by the config, as a configuration error when absent.
fn load_data(cfg: &RunConfig, split: &str, limit: Option<usize>) -> Result<Split> {
    let root = cfg.path("io.data");
    match load_split(&root, split, limit) {
        Err(Error::Io { path, source }) if source.kind() == std::io::ErrorKind::NotFound => Err(Error::config(format!(
            "dataset split '{split}' not found under {} (run `cgdet gen` first): {}",
            root.display(),
            path.display()
        ))),
        other => other,
    }
}

fn load_teacher(cfg: &RunConfig) -> Result<TeacherBundle<f32>> {
    let dir = cfg.path("cmg.teacher_checkpoint");
    if !dir.join(checkpoint::MANIFEST).exists() {
        return Err(Error::config(format!(
            "cmg.enabled needs a teacher checkpoint, none at {} (run `cgdet teacher`)",
            dir.display()
        )));
    }
    let (model, manifest) = checkpoint::load(&dir)?;
    if manifest.kind != "teacher" {
        return Err(Error::config(format!("{} holds a '{}' checkpoint, not a teacher", dir.display(), manifest.kind)));
    }
    Ok(TeacherBundle::new(model.net))
}

fn cmd_gen(inv: &Invocation, out: &mut dyn Write) -> Result<i32> {
    let cfg = &inv.config;
    let spec = cfg.scene()?;
    let root = cfg.path("io.data");
    let seed = cfg.uint("data.seed");
    let (n_train, n_val) = (cfg.usize("data.n_train"), cfg.usize("data.n_val"));
    generate_dataset(&spec, n_train, n_val, seed, &root, inv.force)?;
    let mut counts = Map::new();
    for split in ["train", "val"] {
        let s = load_split(&root, split, None)?;
        let boxes: usize = s.samples.iter().map(|x| x.gt.len()).sum();
        counts.insert(split.into(), json!({"images": s.len(), "boxes": boxes}));
    }
    let v = envelope(cfg, "gen", seed, json!({"image_size": spec.size, "splits": counts}));
    write_file(&root.join("dataset.json"), &format!("{}\n", serde_json::to_string_pretty(&v).expect("json")))?;
    emit(out, &v)?;
    Ok(0)
}

struct MetricsLog {
    text: String,
}

impl MetricsLog {
    fn push(&mut self, epoch: usize, r: &StepRecord) {
        let mut v = serde_json::to_value(r).expect("serialisable");
        v["epoch"] = json!(epoch);
        self.text.push_str(&serde_json::to_string(&v).expect("json"));
        self.text.push('\n');
    }
}

fn cmd_teacher(inv: &Invocation, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let cfg = &inv.config;
    let train_split = load_data(cfg, "train", cfg.train_limit())?;
    let val = load_data(cfg, "val", None)?;
    let tcfg = cfg.train()?;
    let epochs = cfg.usize("teacher.epochs");
    let per_epoch = train_split.len().div_ceil(tcfg.batch_size);
    let mut log = MetricsLog { text: String::new() };
    let (_, model) = pretrain_teacher(&train_split, &cfg.model()?, &tcfg, epochs, |r| {
        let epoch = r.step as usize / per_epoch.max(1);
        log.push(epoch, r);
        if (r.step as usize + 1).is_multiple_of(per_epoch) {
            let _ = writeln!(err, "teacher epoch {} l_det {:.4}", epoch + 1, r.l_det);
        }
    })?;
    let dir = cfg.path("cmg.teacher_checkpoint");
    let steps = (per_epoch * epochs) as u64;
    checkpoint::save(&dir, &model, steps, tcfg.seed, &cfg.digest(), "teacher")?;
    write_file(&dir.join("metrics.jsonl"), &log.text)?;
    let ev = evaluate_model(&model, &val.visible(), &cfg.infer()?, &cfg.eval())?;
    let v = envelope(
        cfg,
        "teacher",
        tcfg.seed,
        json!({"steps": steps, "checksum": model.checksum(), "visible_val": ev.report}),
    );
    write_file(&dir.join("report.json"), &format!("{}\n", serde_json::to_string_pretty(&v).expect("json")))?;
    emit(out, &v)?;
    Ok(0)
}

fn cmd_train(inv: &Invocation, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let cfg = &inv.config;
    let obj = cfg.objective()?;
    let tcfg = cfg.train()?;
    let model_cfg = cfg.model()?;
    let teacher = if obj.cmg.enabled { Some(load_teacher(cfg)?) } else { None };
    let train_split = load_data(cfg, "train", cfg.train_limit())?;
    let val = load_data(cfg, "val", None)?;
    let dir = cfg.path("io.out");
    let mut state = TrainState::new(&model_cfg, tcfg.clone(), obj.clone(), teacher)?;
    state.plan(&train_split, tcfg.epochs)?;
    let every = cfg.usize("train.checkpoint_every");
    let digest = cfg.digest();
    let mut log = MetricsLog { text: String::new() };
    for epoch in 0..tcfg.epochs {
        let records = state.run_epoch(&train_split, epoch, |r| log.push(epoch, r))?;
        if let Some(last) = records.last() {
            let _ = writeln!(
                err,
                "epoch {} l_det {:.4} l_rcs {:.4} l_cms {:.4}",
                epoch + 1,
                last.l_det,
                last.l_rcs,
                last.l_cms
            );
        }
        if every > 0 && (epoch + 1) % every == 0 && epoch + 1 < tcfg.epochs {
            let ck = dir.join("checkpoints").join(format!("epoch_{:04}", epoch + 1));
            checkpoint::save(&ck, &state.model, state.step, tcfg.seed, &digest, "detector")?;
        }
    }
    write_file(&dir.join("metrics.jsonl"), &log.text)?;
    checkpoint::save(&dir.join("final"), &state.model, state.step, tcfg.seed, &digest, "detector")?;
    write_file(&dir.join("config.txt"), &cfg.render())?;
    let ev = evaluate_model(&state.model, &val, &cfg.infer()?, &cfg.eval())?;
    let v = envelope(
        cfg,
        "train",
        tcfg.seed,
        json!({
            "steps": state.step,
            "checksum": state.model.checksum(),
            "rcs_enabled": obj.rcs.enabled,
            "cmg_enabled": obj.cmg.enabled,
            "val": ev.report,
            "duplicate_rate_proxy": ev.duplicate_rate,
        }),
    );
    write_file(&dir.join("report.json"), &format!("{}\n", serde_json::to_string_pretty(&v).expect("json")))?;
    emit(out, &v)?;
    Ok(0)
}

fn cmd_eval(inv: &Invocation, out: &mut dyn Write) -> Result<i32> {
    let cfg = &inv.config;
    let dir = cfg.path("io.checkpoint");
    let (model, manifest) = checkpoint::load(&dir)?;
    let mut expected_cfg = cfg.model()?;
    expected_cfg.in_channels = manifest.model.in_channels;
    let expected = DetectorModel::<f32>::new(&expected_cfg, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?.arch_hash();
    if expected != manifest.arch_hash {
        return Err(Error::config(format!(
            "checkpoint {} has architecture {} but the configuration describes {expected}",
            dir.display(),
            manifest.arch_hash
        )));
    }
    let split_name = cfg.get("eval.split").to_string();
    let mut split = load_data(cfg, &split_name, None)?;
    if manifest.kind == "teacher" {
        split = split.visible();
    }
    let ev = evaluate_model(&model, &split, &cfg.infer()?, &cfg.eval())?;
    let mut body = serde_json::to_value(&ev.report).expect("serialisable");
    body["split"] = json!(split_name);
    body["checkpoint_step"] = json!(manifest.step);
    body["checksum"] = json!(model.checksum());
    if inv.duplicate_rate {
        body["duplicate_rate"] = json!(ev.duplicate_rate);
        body["duplicate_rate_note"] = json!("proxy for redundant same-class overlapping detections");
    }
    let v = envelope(cfg, "eval", manifest.seed, body);
    if inv.json {
        emit(out, &v)?;
    } else {
        let r = &ev.report;
        say(out, format!("split {split_name}  checkpoint step {}", manifest.step))?;
        say(out, format!("mAP {:.4}  mAP50 {:.4}  mAP75 {:.4}", r.map, r.map50, r.map75))?;
        say(out, format!("mAP_s {:.4}  mAP_m {:.4}  mAP_l {:.4}  mAR {:.4}", r.map_s, r.map_m, r.map_l, r.mar))?;
        for (c, ap) in r.per_class_ap.iter().enumerate() {
            let ap = ap.map_or("n/a".to_string(), |a| format!("{a:.4}"));
            say(out, format!("  class {c} ({}) AP {ap}", crate::data::scene::CLASS_NAMES.get(c).unwrap_or(&"?")))?;
        }
        if inv.duplicate_rate {
            say(out, format!("duplicate_rate (proxy) {:.4}", ev.duplicate_rate))?;
        }
        say(out, format!("config_digest {}", cfg.digest()))?;
    }
    Ok(0)
}

fn cmd_gradcheck(inv: &Invocation, out: &mut dyn Write) -> Result<i32> {
    let cfg = &inv.config;
    let opts = SuiteOptions {
        seeds: cfg.uint("gradcheck.seeds"),
        h: cfg.float("gradcheck.h"),
        tol: cfg.float("gradcheck.tol"),
        ..SuiteOptions::default()
    };
    inject_backward_fault(inv.inject_fault);
    let report = run_suite(&opts);
    inject_backward_fault(None);
    let report = report?;
    let v = envelope(cfg, "gradcheck", opts.seeds, serde_json::to_value(&report).expect("serialisable"));
    if inv.json {
        emit(out, &v)?;
    } else {
        for item in &report.items {
            say(
                out,
                format!(
                    "{:<20} seeds {:>3}  coords {:>6}  max_rel_err {:.3e}  {}",
                    item.name,
                    item.seeds,
                    item.coords,
                    item.max_rel_err,
                    if item.passed { "ok" } else { "FAIL" }
                ),
            )?;
        }
        say(
            out,
            format!(
                "{} items, max_rel_err {:.3e} (tol {:e}): {}",
                report.items.len(),
                report.max_rel_err,
                report.tol,
                if report.passed { "PASS" } else { "FAIL" }
            ),
        )?;
    }
    Ok(if report.passed { 0 } else { 1 })
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate(preset: Preset, cells: &[&CellResult]) -> Value {
    let stat = |f: &dyn Fn(&CellResult) -> Option<f64>| {
        let xs: Vec<f64> = cells.iter().filter_map(|c| f(c)).collect();
        let (m, s) = mean_std(&xs);
        json!({"mean": if xs.is_empty() { Value::Null } else { json!(m) }, "std": if xs.is_empty() { Value::Null } else { json!(s) }})
    };
    json!({
        "preset": preset.name(),
        "cells": cells.len(),
        "map": stat(&|c| Some(c.map)),
        "map50": stat(&|c| Some(c.map50)),
        "duplicate_rate": stat(&|c| Some(c.duplicate_rate)),
        "silhouette": stat(&|c| c.silhouette),
    })
}

fn cmd_ablate(inv: &Invocation, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let cfg = &inv.config;
    let presets = cfg.presets();
    let seeds = cfg.uint_list("ablate.seeds");
    let model_cfg = cfg.model()?;
    let tcfg = cfg.train()?;
    let obj = cfg.objective()?;
    let infer_cfg = cfg.infer()?;
    let eval_cfg = cfg.eval();
    let teacher = if presets.iter().any(|p| p.uses_cmg()) { Some(load_teacher(cfg)?) } else { None };
    let train_split = load_data(cfg, "train", cfg.train_limit())?;
    let val = load_data(cfg, "val", None)?;
    let setup = CellSetup {
        model: &model_cfg,
        train: &tcfg,
        objective: &obj,
        infer: &infer_cfg,
        eval: &eval_cfg,
    };
    let cells: Vec<(u64, Preset)> = seeds.iter().flat_map(|&s| presets.iter().map(move |&p| (s, p))).collect();
    let run_one = |&(seed, preset): &(u64, Preset)| -> Result<CellResult> {
        run_cell(&setup, preset, seed, teacher.as_ref(), &train_split, &val, |_| {}).map(|(cell, _)| cell)
    };
    let mut rows = Vec::new();
    let mut done: Vec<CellResult> = Vec::new();
    let mut failed = false;
    let mut record = |(seed, preset): (u64, Preset), result: Result<CellResult>, err: &mut dyn Write| match result {
        Ok(cell) => {
            let _ = writeln!(
                err,
                "{:<8} seed {seed}: mAP {:.4} mAP50 {:.4} dup {:.4} silhouette {}",
                preset.name(),
                cell.map,
                cell.map50,
                cell.duplicate_rate,
                cell.silhouette.map_or("n/a".into(), |s| format!("{s:.4}"))
            );
            rows.push(serde_json::to_value(&cell).expect("serialisable"));
            done.push(cell);
        }
        Err(e) => {
            failed = true;
            let _ = writeln!(err, "{:<8} seed {seed}: FAILED: {e}", preset.name());
            rows.push(json!({"preset": preset.name(), "seed": seed, "failed": true, "error": e.to_string()}));
        }
    };
    let jobs = cfg.usize("ablate.jobs").min(cells.len().max(1));
    if jobs <= 1 {
        for cell in &cells {
            record(*cell, run_one(cell), err);
        }
    } else {
        // Cells are independent; workers pull the next index and results are
        // reported in the serial order.
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<Result<CellResult>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
        thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(cell) = cells.get(i) else { break };
                    let r = run_one(cell);
                    results.lock().expect("no worker panicked")[i] = Some(r);
                });
            }
        });
        let results = results.into_inner().expect("no worker panicked");
        for (cell, r) in cells.iter().zip(results) {
            record(*cell, r.expect("every cell ran"), err);
        }
    }
    let aggregates: Vec<Value> = presets
        .iter()
        .map(|&p| aggregate(p, &done.iter().filter(|c| c.preset == p).collect::<Vec<_>>()))
        .collect();
    let v = envelope(
        cfg,
        "ablate",
        tcfg.seed,
        json!({
            "seeds": seeds,
            "rows": rows,
            "aggregates": aggregates,
            "duplicate_rate_note": "proxy for redundant same-class overlapping detections",
            "failed": failed,
        }),
    );
    let dir = cfg.path("io.out");
    write_file(&dir.join("ablation.json"), &format!("{}\n", serde_json::to_string_pretty(&v).expect("json")))?;
    emit(out, &v)?;
    Ok(if failed { 1 } else { 0 })
}
