//! Train the thermal detector alone on synthetic data and evaluate it.

use cgdet::data::{make_split, SceneSpec};
use cgdet::detector::{InferConfig, ModelConfig, ObjectiveConfig, TrainConfig};
use cgdet::experiment::{run_cell, CellSetup, EvalConfig, Preset};

fn main() -> cgdet::Result<()> {
    let spec = SceneSpec::default();
    let train = make_split(&spec, 0, "train", 64)?;
    let val = make_split(&spec, 0, "val", 16)?;
    let model = ModelConfig { base_width: 8, pyramid_channels: 16, ..Default::default() };
    let tcfg = TrainConfig { epochs: 5, ..Default::default() };
    let (objective, infer, eval) = (ObjectiveConfig::default(), InferConfig::default(), EvalConfig::default());
    let setup = CellSetup { model: &model, train: &tcfg, objective: &objective, infer: &infer, eval: &eval };
    let (cell, _) = run_cell(&setup, Preset::Baseline, 0, None, &train, &val, |r| {
        if r.step % 16 == 0 {
            println!("step {:>3}  l_det {:.4}  lr {:.4}", r.step, r.l_det, r.lr);
        }
    })?;
    println!("val mAP {:.3}  mAP50 {:.3}  duplicate_rate {:.3}", cell.map, cell.map50, cell.duplicate_rate);
    Ok(())
}
