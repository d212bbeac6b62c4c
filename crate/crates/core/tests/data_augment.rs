mod common;

use common::*;
use crossmatch::augment::*;
use crossmatch::datasets::*;
use crossmatch::raster::Image;
use crossmatch::rng::rng_from;
use proptest::prelude::*;

#[test]
fn synth_png_round_trip_is_lossless() {
    let recs = tiny_records(6, 3);
    let dir = tempfile::tempdir().unwrap();
    save_folder(&recs, dir.path()).unwrap();
    let back = load_folder(&dir.path().join("images"), Some(&dir.path().join("masks")), 2).unwrap();
    assert_eq!(back.len(), recs.len());
    for (a, b) in recs.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
    }
}

#[test]
fn desk_set_has_sensible_foreground() {
    let (train, val) = desk_data(7);
    assert_eq!((train.len(), val.len()), (200, 50));
    let frac: f64 = train
        .iter()
        .map(|r| {
            let m = r.mask.as_ref().unwrap();
            m.foreground_pixels() as f64 / m.data.len() as f64
        })
        .sum::<f64>()
        / train.len() as f64;
    assert!((0.03..0.5).contains(&frac), "mean foreground fraction {frac}");
    assert!(train.iter().all(|r| r.mask.as_ref().unwrap().foreground_pixels() > 0));
}

#[test]
fn split_hides_unlabeled_masks_from_training() {
    let recs = tiny_records(20, 1);
    let split = make_split(&recs, &SplitSpec { labeled_fraction: 0.25, seed: 4, num_classes: 2 }).unwrap();
    assert_eq!(split.labeled.len(), 5);
    assert_eq!(split.unlabeled.len(), 15);
    assert!(split.unlabeled.iter().all(|u| u.evaluation_mask().is_some()));
    let again = make_split(&recs, &SplitSpec { labeled_fraction: 0.25, seed: 4, num_classes: 2 }).unwrap();
    assert_eq!(split, again);
}

#[test]
fn batch_views_are_seeded_by_step() {
    let recs = tiny_records(4, 2);
    let imgs: Vec<&Image> = recs.iter().map(|r| &r.image).collect();
    let cfg = AugmentConfig::default();
    let a = make_batch_views(&imgs, &cfg, 9, 3).unwrap();
    let b = make_batch_views(&imgs, &cfg, 9, 3).unwrap();
    let c = make_batch_views(&imgs, &cfg, 9, 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    for (i, (m1, m2)) in a.mix_s1.iter().zip(&a.mix_s2).enumerate() {
        for m in [m1, m2].into_iter().flatten() {
            assert_eq!(m.partner, (i + 1) % imgs.len());
        }
    }
}

#[test]
fn identity_augment_keeps_batch_unchanged() {
    let recs = tiny_records(3, 2);
    let imgs: Vec<&Image> = recs.iter().map(|r| &r.image).collect();
    let v = make_batch_views(&imgs, &AugmentConfig::identity(), 1, 0).unwrap();
    for (i, im) in imgs.iter().enumerate() {
        assert_eq!(&v.weak[i], *im);
        assert_eq!(&v.strong1[i], *im);
        assert_eq!(&v.strong2[i], *im);
    }
    assert!(v.mix_s1.iter().chain(&v.mix_s2).all(Option::is_none));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weak_replay_moves_image_and_mask_together(seed in 0u64..10_000) {
        let rec = &tiny_records(1, seed)[0];
        let mask = rec.mask.as_ref().unwrap();
        let mut rng = rng_from(seed, &[1]);
        let (img, m, trace) = weak_augment(&rec.image, Some(mask), &WeakConfig::default(), &mut rng).unwrap();
        let m = m.unwrap();
        prop_assert_eq!((img.height, img.width), (m.height, m.width));
        prop_assert!(trace.ops.iter().all(AugmentOp::is_geometric));
        let (img2, m2) = replay(&trace, &rec.image, Some(mask), None).unwrap();
        prop_assert_eq!(img2, img);
        prop_assert_eq!(m2.unwrap(), m);
    }

    #[test]
    fn cut_boxes_fit_inside_the_image(seed in 0u64..10_000, h in 2usize..40, w in 2usize..40) {
        let cfg = StrongConfig::default();
        let b = sample_cut_box(&cfg, h, w, &mut rng_from(seed, &[]));
        prop_assert!(b.height >= 1 && b.width >= 1);
        prop_assert!(b.top + b.height <= h && b.left + b.width <= w);
    }

    #[test]
    fn synth_is_a_pure_function_of_its_spec(seed in 0u64..1000) {
        let spec = SynthSpec::new(2, 16, 16, 2, seed);
        prop_assert_eq!(synth_generate(&spec).unwrap(), synth_generate(&spec).unwrap());
    }
}
