//! Small ablation grid: each objective preset over a few seeds, reported
//! as mean and standard deviation.

use cgdet::cli::mean_std;
use cgdet::cmg::pretrain_teacher;
use cgdet::data::{make_split, SceneSpec};
use cgdet::detector::{InferConfig, ModelConfig, ObjectiveConfig, TrainConfig};
use cgdet::experiment::{run_cell, CellSetup, EvalConfig, Preset};

fn main() -> cgdet::Result<()> {
    let spec = SceneSpec::default();
    let train = make_split(&spec, 0, "train", 48)?;
    let val = make_split(&spec, 0, "val", 16)?;
    let model = ModelConfig { base_width: 8, pyramid_channels: 16, ..Default::default() };
    let tcfg = TrainConfig { epochs: 3, ..Default::default() };
    let (teacher, _) = pretrain_teacher(&train, &model, &TrainConfig { seed: 1000, ..tcfg.clone() }, 3, |_| {})?;
    let (objective, infer, eval) = (ObjectiveConfig::default(), InferConfig::default(), EvalConfig::default());
    let setup = CellSetup { model: &model, train: &tcfg, objective: &objective, infer: &infer, eval: &eval };

    println!("{:<9} {:>16} {:>16} {:>16}", "preset", "mAP50", "duplicate_rate", "silhouette");
    for preset in Preset::ALL {
        let mut rows = Vec::new();
        for seed in 0..2 {
            rows.push(run_cell(&setup, preset, seed, Some(&teacher), &train, &val, |_| {})?.0);
        }
        let fmt = |xs: Vec<f64>| {
            let (m, s) = mean_std(&xs);
            format!("{m:.3} ± {s:.3}")
        };
        let sil: Vec<f64> = rows.iter().filter_map(|r| r.silhouette).collect();
        println!(
            "{:<9} {:>16} {:>16} {:>16}",
            preset.name(),
            fmt(rows.iter().map(|r| r.map50).collect()),
            fmt(rows.iter().map(|r| r.duplicate_rate).collect()),
            if sil.is_empty() { "-".to_string() } else { fmt(sil) }
        );
    }
    Ok(())
}
