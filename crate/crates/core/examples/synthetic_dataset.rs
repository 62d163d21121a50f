//! Generate a small paired thermal/visible dataset, write it to disk and
//! read it back.

use cgdet::data::{generate_dataset, load_split, make_split, SceneSpec};

fn main() -> cgdet::Result<()> {
    let spec = SceneSpec::default();
    let train = make_split(&spec, 7, "train", 4)?;
    for s in &train.samples {
        let classes: Vec<usize> = s.gt.iter().map(|b| b.class_id).collect();
        let mean = s.thermal.data().iter().sum::<f32>() / s.thermal.len() as f32;
        println!("image {}: {} objects {classes:?}, thermal mean {mean:.3}", s.image_id, s.gt.len());
    }

    let root = std::env::temp_dir().join("cgdet-example-data");
    generate_dataset(&spec, 8, 4, 7, &root, true)?;
    let back = load_split(&root, "train", Some(4))?;
    assert_eq!(back.samples[0].gt, train.samples[0].gt);
    println!("wrote {} and reloaded {} training images", root.display(), back.len());
    Ok(())
}
