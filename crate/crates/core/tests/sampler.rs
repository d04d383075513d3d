mod common;

use std::collections::HashMap;

use common::rng;
use spatial_contrast::data::{synth_clustered, Dataset};
use spatial_contrast::sampler::*;
use spatial_contrast::tensor::Tensor;

fn ramp_image(c: usize, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(vec![c, h, w], |i| i as f32 / (c * h * w) as f32).unwrap()
}

#[test]
fn crop_origins_are_uniform() {
    let img = ramp_image(1, 8, 8);
    let mut r = rng(21);
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    let draws = 10_000;
    for _ in 0..draws / 2 {
        let pair: PatchPair<f32> = sample_pair(&img, 0, 4, &mut r).unwrap();
        for rect in pair.rects {
            *counts.entry((rect.top, rect.left)).or_default() += 1;
        }
    }
    assert_eq!(counts.len(), 25);
    let p = 1.0 / 25.0;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (&origin, &n) in &counts {
        assert!((n as f64 - mean).abs() < 4.0 * sigma, "{origin:?}: {n}");
    }
}

#[test]
fn every_crop_lies_inside_the_image() {
    let mut r = rng(3);
    for h in 1..7 {
        for w in 1..7 {
            let img = ramp_image(2, h, w);
            for patch in 1..=h.min(w) {
                for _ in 0..20 {
                    let pair: PatchPair<f64> = sample_pair(&img, 0, patch, &mut r).unwrap();
                    for (rect, t) in pair.rects.iter().zip([&pair.anchor, &pair.positive]) {
                        assert!(rect.fits(h, w));
                        assert_eq!(t.shape(), &[2, patch, patch]);
                        let expect: Tensor<f64> = crop(&img, *rect).unwrap();
                        assert_eq!(t, &expect);
                    }
                }
            }
            let err = sample_pair::<f32, _>(&img, 0, h.min(w) + 1, &mut r).unwrap_err();
            assert!(matches!(err, SampleError::PatchTooLarge { .. }));
        }
    }
}

#[test]
fn crop_copies_the_right_pixels() {
    let img = ramp_image(1, 5, 5);
    let t: Tensor<f32> = crop(
        &img,
        CropRect {
            top: 1,
            left: 2,
            size: 2,
        },
    )
    .unwrap();
    let at = |y: usize, x: usize| img.data()[y * 5 + x];
    assert_eq!(t.data(), &[at(1, 2), at(1, 3), at(2, 2), at(2, 3)]);
}

fn small_set() -> Dataset {
    synth_clustered(3, 10, 12, 5).unwrap()
}

#[test]
fn batches_use_distinct_images() {
    let ds = small_set();
    let mut r = rng(9);
    for n in [2, 7, 30] {
        let b: ScBatch<f32> = make_batch(&ds, n, 6, &mut r).unwrap();
        let mut idx = b.image_indices.clone();
        idx.sort();
        idx.dedup();
        assert_eq!(idx.len(), n);
        assert_eq!(b.anchors.shape(), &[n, 3, 6, 6]);
        assert_eq!(b.positives.shape(), &[n, 3, 6, 6]);
    }
    assert!(make_batch::<f32, _>(&ds, 31, 6, &mut r).is_err());
    assert!(make_batch::<f32, _>(&ds, 1, 6, &mut r).is_err());
}

#[test]
fn default_patch_is_half_the_short_side() {
    assert_eq!(default_patch_size(64, 64), 32);
    assert_eq!(default_patch_size(32, 40), 16);
    assert_eq!(default_patch_size(7, 9), 4);
}

#[test]
fn single_worker_stream_is_reproducible() {
    let ds = small_set();
    let take = |seed| {
        with_batch_stream::<f32, _, _>(&ds, 4, 6, seed, 1, |s| {
            (0..5).map(|_| s.next_batch().unwrap()).collect::<Vec<_>>()
        })
    };
    assert_eq!(take(1), take(1));
    assert_ne!(take(1), take(2));
}

#[test]
fn worker_stream_delivers_valid_batches() {
    let ds = small_set();
    let batches = with_batch_stream::<f32, _, _>(&ds, 5, 4, 0, 3, |s| {
        (0..12).map(|_| s.next_batch().unwrap()).collect::<Vec<_>>()
    });
    assert_eq!(batches.len(), 12);
    for b in batches {
        assert_eq!(b.len(), 5);
        assert!(b.rects.iter().flatten().all(|r| r.fits(12, 12)));
    }
}
