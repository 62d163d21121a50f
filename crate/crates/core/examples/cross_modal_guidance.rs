//! Pretrain a visible-light teacher, freeze it, and train the thermal
//! student with feature-consistency guidance.

use cgdet::cmg::pretrain_teacher;
use cgdet::data::{make_split, SceneSpec};
use cgdet::detector::{InferConfig, ModelConfig, ObjectiveConfig, TrainConfig};
use cgdet::experiment::{run_cell, CellSetup, EvalConfig, Preset};

fn main() -> cgdet::Result<()> {
    let spec = SceneSpec::default();
    let train = make_split(&spec, 0, "train", 64)?;
    let val = make_split(&spec, 0, "val", 16)?;
    let model = ModelConfig { base_width: 8, pyramid_channels: 16, ..Default::default() };
    let tcfg = TrainConfig { epochs: 4, ..Default::default() };

    let (teacher, _) = pretrain_teacher(&train, &model, &TrainConfig { seed: 1000, ..tcfg.clone() }, 4, |_| {})?;
    let before = teacher.checksum();
    println!("teacher frozen: {}, checksum {}", teacher.is_frozen(), &before[..16]);

    let (objective, infer, eval) = (ObjectiveConfig::default(), InferConfig::default(), EvalConfig::default());
    let setup = CellSetup { model: &model, train: &tcfg, objective: &objective, infer: &infer, eval: &eval };
    let (cell, state) = run_cell(&setup, Preset::Cmg, 0, Some(&teacher), &train, &val, |r| {
        if r.step % 16 == 0 {
            println!("step {:>3}  l_det {:.4}  l_cms {:.4}", r.step, r.l_det, r.l_cms);
        }
    })?;
    assert_eq!(state.teacher.as_ref().map(|t| t.checksum()), Some(before));
    println!("teacher unchanged; student mAP50 {:.3}, max l_cms {:.3}", cell.map50, cell.max_l_cms);
    Ok(())
}
