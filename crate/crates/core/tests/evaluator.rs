//! COCO metrics against answers recorded from pycocotools
//! (see `fixtures/make_eval_fixtures.py`).

mod common;

use common::eval_fixtures;

#[test]
fn matches_pycocotools_on_every_fixture() {
    let fixtures = eval_fixtures();
    assert_eq!(fixtures.len(), 20);
    for f in &fixtures {
        let r = f.run();
        let d = f.max_abs_diff(&r);
        assert!(d <= 1e-4, "{}: max |diff| {d:.2e}\nours {r:?}", f.name);
    }
}

#[test]
fn perfect_and_empty_extremes() {
    let fixtures = eval_fixtures();
    let get = |n: &str| fixtures.iter().find(|f| f.name == n).unwrap().run();
    let perfect = get("perfect");
    assert!((perfect.map - 1.0).abs() < 1e-9 && (perfect.mar - 1.0).abs() < 1e-9);
    let empty = get("empty_detections");
    assert_eq!((empty.map, empty.map50, empty.mar), (0.0, 0.0, 0.0));
}

#[test]
fn evaluation_ignores_input_order_of_images() {
    let fixtures = eval_fixtures();
    let mut f = fixtures.into_iter().find(|f| f.name == "random_3").unwrap();
    let before = f.run();
    f.images.reverse();
    assert_eq!(before, f.run());
}
