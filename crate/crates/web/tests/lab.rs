use codistill_web::{frame_count, grid_size, render_clip, speedup, Lab};

#[test]
fn speedup_matches_the_formula() {
    assert!((speedup(4, 0.7).ok().unwrap() - 35.714_285).abs() < 1e-5);
}

#[test]
fn clips_have_one_value_per_pixel_and_frame() {
    let n = (grid_size() * grid_size() * frame_count()) as usize;
    assert_eq!(render_clip(3, 0.5, 2.0).ok().unwrap().len(), n);
}

#[test]
fn lab_trains_scores_and_samples() {
    let mut lab = Lab::new(3).ok().unwrap();
    let first = lab.train(40).ok().unwrap();
    let second = lab.train(40).ok().unwrap();
    assert!(second < first, "loss {first} -> {second}");
    let scores = lab.score_blocks(2).ok().unwrap();
    assert_eq!(scores.len(), 4);
    assert_eq!(lab.kept_blocks().len(), 2);
    let a = lab.sample(1, 4, 1.0, true, 9).ok().unwrap();
    assert_eq!(a, lab.sample(1, 4, 1.0, true, 9).ok().unwrap());
    assert!(a.iter().all(|v| v.is_finite()));
    assert_eq!(lab.sample(1, 8, 2.0, false, 9).ok().unwrap().len(), a.len());
}
