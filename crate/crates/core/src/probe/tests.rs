use super::*;
use crate::model::ModelConfig;
use crate::scene::{sample_scene, QaKind, Split};
use crate::train::build_pool;

fn tiny(seed: u64) -> ModelParams {
    ModelParams::init(&ModelConfig {
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        d_ff: 64,
        d_vision: 32,
        vision_ff: 64,
        vision_heads: 2,
        d_aux: 16,
        init_seed: seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

#[test]
fn probe_returns_sorted_top_k_per_patch() {
    let p = tiny(1);
    let scene = sample_scene(4, 3).unwrap();
    let img = render(&scene, 32).unwrap();
    let map = probe_patches(&p, &img, 5, Some(scene.id)).unwrap();
    assert_eq!(map.patches.len(), 16);
    for pp in &map.patches {
        assert_eq!(pp.top.len(), 5);
        assert!(pp.top.windows(2).all(|w| w[0].1 >= w[1].1));
        assert!(pp.top.iter().all(|&(_, pr)| (0.0..=1.0).contains(&pr)));
    }
    let all = probe_patches(&p, &img, 10_000, None).unwrap();
    let v = p.config().vocab_size;
    assert_eq!(all.patches[0].top.len(), v);
    let mass: f32 = all.patches[0].top.iter().map(|t| t.1).sum();
    assert!((mass - 1.0).abs() < 1e-4);
    assert!(probe_patches(&p, &img, 0, None).is_err());
}

#[test]
fn labels_mark_objects_and_background() {
    let p = tiny(1);
    let scene = sample_scene(4, 9).unwrap();
    let labels = patch_labels(&p, &scene).unwrap();
    let vocab = Vocab::standard();
    let bg = vocab.id(BACKGROUND_TOKEN).unwrap();
    assert_eq!(labels.iter().filter(|&&l| l != bg).count(), scene.placements.len());
    for pl in &scene.placements {
        assert_eq!(vocab.token(labels[pl.row * 4 + pl.col]), Some(pl.object.name().as_str()));
    }
    let big = sample_scene(8, 9).unwrap();
    assert!(patch_labels(&p, &big).is_err());
    assert!(patch_label_accuracy(&p, &[big]).is_err());
}

#[test]
fn batched_accuracy_matches_a_per_patch_loop() {
    let p = tiny(2);
    let scenes: Vec<Scene> = (0..40).map(|s| sample_scene(4, s).unwrap()).collect();
    let (mut hit, mut n) = (0usize, 0usize);
    for s in &scenes {
        let img = render(s, 32).unwrap();
        let map = probe_patches(&p, &img, 1, None).unwrap();
        let labels = patch_labels(&p, s).unwrap();
        for (pp, l) in map.patches.iter().zip(labels) {
            n += 1;
            hit += usize::from(pp.top[0].0 == l);
        }
    }
    let got = patch_label_accuracy(&p, &scenes).unwrap();
    assert!((got - hit as f64 / n as f64).abs() < 1e-12, "{got}");
}

#[test]
fn overlay_scales_the_image_and_draws_text() {
    let p = tiny(1);
    let scene = sample_scene(4, 5).unwrap();
    let img = render(&scene, 32).unwrap();
    let map = probe_patches(&p, &img, 1, None).unwrap();
    let out = overlay(&img, &map).unwrap();
    assert_eq!(out.size(), 256);
    let white = out.raw().chunks_exact(3).filter(|c| c == &[255, 255, 255]).count();
    assert!(white > 0);
    let wrong = ProbeMap {
        patch_grid: 3,
        ..map
    };
    assert!(overlay(&img, &wrong).is_err());
}

#[test]
fn token_report_bolds_the_lowest_loss() {
    let a = tiny(1);
    let b = tiny(2);
    let samples = build_pool(&a, &[QaKind::Distance], 4, 3, Split::HeldOut, 0).unwrap();
    let report = token_loss_report(&[("a", &a), ("b", &b)], &samples).unwrap();
    let want: usize = samples.iter().map(|s| s.answer().len() + 1).sum();
    assert_eq!(report.rows.len(), want);
    for r in &report.rows {
        let min = r.losses.iter().copied().fold(f32::INFINITY, f32::min);
        assert_eq!(r.losses[r.best], min);
    }
    let md = report.to_markdown();
    assert_eq!(md.lines().count(), want + 2);
    assert_eq!(md.matches("**").count(), want * 2);

    let same = token_loss_report(&[("x", &a), ("y", &a)], &samples).unwrap();
    assert!(same.rows.iter().all(|r| r.best == 0));
}

#[test]
fn token_report_rejects_mismatched_vocabularies() {
    let a = tiny(1);
    let odd = ModelParams::init(&ModelConfig {
        vocab_size: a.config().vocab_size + 1,
        ..a.config().clone()
    })
    .unwrap();
    let samples = build_pool(&a, &[QaKind::Distance], 4, 1, Split::HeldOut, 0).unwrap();
    let err = token_loss_report(&[("a", &a), ("odd", &odd)], &samples).unwrap_err();
    assert!(err.to_string().contains("odd"));
    assert!(token_loss_report(&[("a", &a)], &samples).is_err());
}
