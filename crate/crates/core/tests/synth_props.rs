use std::fs;

use heattrack::synth::{
    generate_sequence, read_dataset, read_ppm, reflect, render_clean, tiling_windows, windows, write_dataset,
    write_ppm, Occluder, SceneConfig, Sequence,
};
use heattrack::Tensor4;
use proptest::prelude::*;

/// Closed-form bounce: fold the free position into one period of a triangle wave.
fn triangle(x0: f64, v: f64, t: usize, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    let p = (x0 - lo + v * t as f64).rem_euclid(2.0 * span);
    lo + if p <= span { p } else { 2.0 * span - p }
}

fn occluded_scene(seed: u64) -> SceneConfig {
    SceneConfig {
        frames: 40,
        seed,
        ..SceneConfig::default()
    }
}

#[test]
fn bounce_matches_triangle_wave() {
    let cfg = SceneConfig {
        start: Some((5.0, 20.0)),
        velocity: Some((2.0, 0.0)),
        frames: 40,
        ..SceneConfig::plain(64, 48, 40)
    };
    let ((lo, hi), _) = cfg.bounds();
    let frames = generate_sequence(&cfg).unwrap();
    for (t, f) in frames.iter().enumerate() {
        assert!((f.center.0 - triangle(5.0, 2.0, t, lo, hi)).abs() < 1e-9, "frame {t}");
        assert_eq!(f.center.1, 20.0);
        assert!(f.visible);
    }
    // the ball must actually have bounced off the right wall
    assert!(frames.windows(2).any(|w| w[1].center.0 < w[0].center.0));
}

#[test]
fn motionless_plain_scene_is_static() {
    let cfg = SceneConfig {
        velocity: Some((0.0, 0.0)),
        ..SceneConfig::plain(32, 24, 6)
    };
    let frames = generate_sequence(&cfg).unwrap();
    assert!(frames.iter().all(|f| f.image == frames[0].image && f.center == frames[0].center));
}

#[test]
fn oversized_ball_is_rejected() {
    let cfg = SceneConfig {
        ball_radius: 12.0,
        ..SceneConfig::plain(32, 24, 6)
    };
    assert!(generate_sequence(&cfg).is_err());
    assert!(generate_sequence(&SceneConfig::plain(32, 24, 2)).is_err());
}

#[test]
fn dataset_layout_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = occluded_scene(3);
    cfg.frames = 12;
    let frames = generate_sequence(&cfg).unwrap();
    let seq = Sequence {
        name: "clip".into(),
        frames,
    };
    let m = write_dataset(std::slice::from_ref(&seq), dir.path()).unwrap();
    assert_eq!(m.total_frames(), 12);
    let mut names: Vec<String> = fs::read_dir(dir.path().join("clip/frames"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let expect: Vec<String> = (0..12).map(|k| format!("{k:06}.ppm")).collect();
    assert_eq!(names, expect);
    let csv = fs::read_to_string(dir.path().join("clip/labels.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 13);
    assert_eq!(lines[0], "frame,visibility,x,y");
    for (k, f) in seq.frames.iter().enumerate() {
        if !f.visible {
            assert_eq!(lines[k + 1], format!("{k},0,,"));
        } else {
            assert!(lines[k + 1].starts_with(&format!("{k},1,")));
        }
    }
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 1);
    for (a, b) in seq.frames.iter().zip(&back[0].frames) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.visible, b.visible);
        if a.visible {
            assert!((a.center.0 - b.center.0).abs() < 1e-9 && (a.center.1 - b.center.1).abs() < 1e-9);
        }
    }
}

#[test]
fn split_generates_occlusion_windows() {
    let (_, val) = heattrack::synth::generate_split(&Default::default()).unwrap();
    let hidden: usize = val.iter().map(|s| s.frames.iter().filter(|f| !f.visible).count()).sum();
    assert!(hidden > 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn reflection_oracle(x0 in 2.0f64..60.0, v in -4.0f64..4.0, t in 0usize..200) {
        let (lo, hi) = (2.0, 61.0);
        prop_assert!((reflect(x0, v, t, lo, hi) - triangle(x0, v, t, lo, hi)).abs() < 1e-8);
    }

    #[test]
    fn same_seed_same_sequence(seed in any::<u64>()) {
        let a = generate_sequence(&occluded_scene(seed)).unwrap();
        let b = generate_sequence(&occluded_scene(seed)).unwrap();
        prop_assert!(a == b);
    }

    #[test]
    fn ball_stays_in_bounds_and_visibility_matches_occluders(seed in any::<u64>()) {
        let cfg = occluded_scene(seed);
        let ((x0, x1), (y0, y1)) = cfg.bounds();
        for (t, f) in generate_sequence(&cfg).unwrap().iter().enumerate() {
            prop_assert!(f.center.0 >= x0 && f.center.0 <= x1 && f.center.1 >= y0 && f.center.1 <= y1);
            let covered = cfg.occluders.iter().any(|o| o.covers(t, cfg.width, cfg.height, f.center.0, f.center.1));
            prop_assert_eq!(f.visible, !covered);
        }
    }

    #[test]
    fn label_fidelity(seed in any::<u64>()) {
        let cfg = SceneConfig {
            occluders: Vec::new(),
            noise: 0.0,
            frames: 10,
            seed,
            ..SceneConfig::default()
        };
        for f in generate_sequence(&cfg).unwrap() {
            let clean = render_clean(&cfg, f.center).unwrap();
            prop_assert_eq!(clean.max_abs_diff(&f.image), 0.0);
        }
    }

    #[test]
    fn ppm_round_trip(vals in prop::collection::vec(0u8..=255, 3 * 5 * 7)) {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor4::from_vec([1, 3, 5, 7], vals.iter().map(|&v| v as f64 / 255.0).collect()).unwrap();
        let p = dir.path().join("x.ppm");
        write_ppm(&p, &img).unwrap();
        prop_assert_eq!(read_ppm(&p).unwrap(), img);
    }

    #[test]
    fn window_counts(n in 3usize..300) {
        prop_assert_eq!(windows(n).len(), n - 2);
        let tiles = tiling_windows(n);
        let mut covered = vec![0usize; n];
        for &s in &tiles {
            for c in &mut covered[s..s + 3] {
                *c += 1;
            }
        }
        prop_assert!(covered.iter().all(|&c| c >= 1));
        prop_assert_eq!(tiles.len(), n.div_ceil(3));
    }
}

#[test]
fn occluder_hides_center() {
    let occ = Occluder {
        x: 10.0,
        y: 0.0,
        width: 8.0,
        height: 24.0,
        vx: 0.0,
        vy: 0.0,
        color: [0.0; 3],
    };
    let cfg = SceneConfig {
        start: Some((14.0, 12.0)),
        velocity: Some((0.0, 0.0)),
        occluders: vec![occ],
        ..SceneConfig::plain(32, 24, 3)
    };
    let frames = generate_sequence(&cfg).unwrap();
    assert!(frames.iter().all(|f| !f.visible));
}
