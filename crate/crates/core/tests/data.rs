mod common;

use common::rng;
use rand::Rng;
use spatial_contrast::data::*;
use spatial_contrast::sampler::{crop, CropRect};
use spatial_contrast::tensor::Tensor;

fn grey(t: &Tensor<f64>) -> Vec<f64> {
    let (c, p) = (t.shape()[0], t.shape()[1]);
    (0..p * p)
        .map(|i| (0..c).map(|ch| t.data()[ch * p * p + i]).sum::<f64>() / c as f64)
        .collect()
}

/// Normalized autocorrelation of a patch at a fixed set of small lags: a
/// texture signature that ignores where inside the texture the patch sits.
fn lag_signature(t: &Tensor<f64>) -> Vec<f64> {
    let p = t.shape()[1] as isize;
    let g = grey(t);
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    let c: Vec<f64> = g.iter().map(|v| v - mean).collect();
    let var = c.iter().map(|v| v * v).sum::<f64>().max(1e-12);
    let mut sig = Vec::new();
    for dy in 0..=3isize {
        for dx in -3..=3isize {
            if dy == 0 && dx <= 0 {
                continue;
            }
            let mut acc = 0.0;
            for y in 0..p - dy {
                for x in 0.max(-dx)..p.min(p - dx) {
                    acc += c[(y * p + x) as usize] * c[((y + dy) * p + x + dx) as usize];
                }
            }
            sig.push(acc / var);
        }
    }
    sig
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn random_patch(ds: &Dataset, i: usize, p: usize, r: &mut impl Rng) -> Tensor<f64> {
    let side = ds.image(i).shape()[1];
    let rect = CropRect {
        top: r.random_range(0..=side - p),
        left: r.random_range(0..=side - p),
        size: p,
    };
    crop(ds.image(i), rect).unwrap()
}

#[test]
fn patches_of_one_image_share_texture_statistics() {
    let ds = synth_clustered(10, 20, 64, 17).unwrap();
    let labels = ds.labels().unwrap().to_vec();
    let mut r = rng(2);
    let (mut within, mut cross) = (0.0, 0.0);
    let pairs = 1000;
    for _ in 0..pairs {
        let i = r.random_range(0..ds.len());
        let a = lag_signature(&random_patch(&ds, i, 32, &mut r));
        let b = lag_signature(&random_patch(&ds, i, 32, &mut r));
        within += pearson(&a, &b);
        let j = loop {
            let j = r.random_range(0..ds.len());
            if labels[j] != labels[i] {
                break j;
            }
        };
        let c = lag_signature(&random_patch(&ds, j, 32, &mut r));
        cross += pearson(&a, &c);
    }
    let (within, cross) = (within / pairs as f64, cross / pairs as f64);
    assert!(within > cross, "within {within} cross {cross}");
}

#[test]
fn synth_empty_and_deterministic() {
    assert!(synth_clustered(4, 0, 8, 1).unwrap().is_empty());
    assert_eq!(
        synth_clustered(2, 3, 8, 1).unwrap(),
        synth_clustered(2, 3, 8, 1).unwrap()
    );
    let ds = synth_clustered(3, 5, 8, 1).unwrap();
    assert_eq!(ds.class_histogram().unwrap(), vec![5, 5, 5]);
    assert!(ds
        .images()
        .iter()
        .all(|t| t.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
}

#[test]
fn cifar_records_round_trip_at_byte_precision() {
    let ds = synth_clustered(10, 3, 32, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batch.bin");
    write_cifar10_binary(&path, &ds).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 30 * 3073);
    let back = load_cifar10_binary(&path).unwrap();
    assert_eq!(back.labels(), ds.labels());
    for (a, b) in back.images().iter().zip(ds.images()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, (y * 255.0).round() / 255.0);
        }
    }
    write_cifar10_binary(&path, &back).unwrap();
    assert_eq!(load_cifar10_binary(&path).unwrap(), back);
    assert_eq!(
        encode_cifar10_records(&back).unwrap(),
        std::fs::read(&path).unwrap()
    );
}

#[test]
fn cifar_directory_concatenates_batches_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut parts = Vec::new();
    for b in 1..=5 {
        let ds = synth_clustered(10, 1, 32, b).unwrap();
        write_cifar10_binary(&dir.path().join(format!("data_batch_{b}.bin")), &ds).unwrap();
        parts.push(ds);
    }
    std::fs::write(dir.path().join("test_batch.bin"), []).unwrap();
    let files = cifar10_train_files(dir.path());
    assert_eq!(files.len(), 5);
    let all = load_cifar10_batches(&files).unwrap();
    assert_eq!(all.len(), 50);
}

#[test]
fn labeled_subsample_is_class_balanced() {
    let ds = synth_clustered(10, 450, 4, 0).unwrap();
    let sub = subsample_labeled(&ds, PerClass::Count(400), 3).unwrap();
    assert_eq!(sub.len(), 4000);
    assert_eq!(sub.class_histogram().unwrap(), vec![400; 10]);
    assert_eq!(
        sub,
        subsample_labeled(&ds, PerClass::Count(400), 3).unwrap()
    );
    assert_ne!(
        sub,
        subsample_labeled(&ds, PerClass::Count(400), 4).unwrap()
    );
    assert_eq!(
        subsample_labeled(&ds, PerClass::All, 3).unwrap().len(),
        4500
    );
    assert!(subsample_labeled(&ds, PerClass::Count(451), 3).is_err());
    assert!(subsample_labeled(&ds.unlabeled(), PerClass::Count(1), 3).is_err());
}

#[test]
fn ppm_directory_round_trip() {
    let ds = synth_clustered(3, 2, 8, 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_ppm_dir(dir.path(), &ds).unwrap();
    let back = load_ppm_dir(dir.path()).unwrap();
    assert_eq!(back.labels(), ds.labels());
    for (a, b) in back.images().iter().zip(ds.images()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, (y * 255.0).round() / 255.0);
        }
    }
}

#[test]
fn malformed_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("short.bin");
    std::fs::write(&path, vec![0u8; 3072]).unwrap();
    assert!(load_cifar10_binary(&path).is_err());
    let ppm = dir.path().join("0_1.ppm");
    std::fs::write(&ppm, b"P5\n2 2\n255\n\0\0\0\0").unwrap();
    assert!(read_ppm(&ppm).is_err());
}
