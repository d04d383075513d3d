//! Anchor/positive patch sampling and contrastive batch assembly.

use std::sync::mpsc;
use std::thread;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Dataset;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error("patch size {patch} does not fit a {h}x{w} image")]
    PatchTooLarge { patch: usize, h: usize, w: usize },
    #[error("patch size must be at least 1")]
    ZeroPatch,
    #[error("batch of {requested} distinct images requested from a dataset of {available}")]
    BatchTooLarge { requested: usize, available: usize },
    #[error("contrastive batches need at least 2 images, got {0}")]
    BatchTooSmall(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = SampleError> = std::result::Result<T, E>;

/// Square crop `[top, top + size) x [left, left + size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

impl CropRect {
    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.top + self.size <= h && self.left + self.size <= w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair<T> {
    pub anchor: Tensor<T>,
    pub positive: Tensor<T>,
    pub image_index: usize,
    pub rects: [CropRect; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScBatch<T> {
    /// `[N, C, P, P]`
    pub anchors: Tensor<T>,
    /// `[N, C, P, P]`
    pub positives: Tensor<T>,
    pub image_indices: Vec<usize>,
    pub rects: Vec<[CropRect; 2]>,
}

impl<T> ScBatch<T> {
    pub fn len(&self) -> usize {
        self.image_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_indices.is_empty()
    }
}

/// Half the shorter side, rounded up.
pub fn default_patch_size(h: usize, w: usize) -> usize {
    h.min(w).div_ceil(2)
}

pub fn crop<T: Scalar>(image: &Tensor<f32>, rect: CropRect) -> Result<Tensor<T>> {
    let (c, h, w) = image.dims3("crop")?;
    if rect.size == 0 {
        return Err(SampleError::ZeroPatch);
    }
    if !rect.fits(h, w) {
        return Err(SampleError::PatchTooLarge {
            patch: rect.size,
            h,
            w,
        });
    }
    let p = rect.size;
    let src = image.data();
    let mut out = Vec::with_capacity(c * p * p);
    for ch in 0..c {
        for y in rect.top..rect.top + p {
            let row = (ch * h + y) * w + rect.left;
            out.extend(src[row..row + p].iter().map(|&v| T::of(v as f64)));
        }
    }
    Ok(Tensor::new(vec![c, p, p], out)?)
}

fn random_rect<R: Rng + ?Sized>(h: usize, w: usize, patch: usize, rng: &mut R) -> CropRect {
    CropRect {
        top: rng.random_range(0..=h - patch),
        left: rng.random_range(0..=w - patch),
        size: patch,
    }
}

/// Two independent uniform crops of one image. The crops may overlap or
/// coincide.
pub fn sample_pair<T: Scalar, R: Rng + ?Sized>(
    image: &Tensor<f32>,
    image_index: usize,
    patch: usize,
    rng: &mut R,
) -> Result<PatchPair<T>> {
    let (_, h, w) = image.dims3("sample_pair")?;
    if patch == 0 {
        return Err(SampleError::ZeroPatch);
    }
    if patch > h || patch > w {
        return Err(SampleError::PatchTooLarge { patch, h, w });
    }
    let rects = [random_rect(h, w, patch, rng), random_rect(h, w, patch, rng)];
    Ok(PatchPair {
        anchor: crop(image, rects[0])?,
        positive: crop(image, rects[1])?,
        image_index,
        rects,
    })
}

/// `n` distinct images drawn without replacement, one patch pair each.
pub fn make_batch<T: Scalar, R: Rng + ?Sized>(
    dataset: &Dataset,
    n: usize,
    patch: usize,
    rng: &mut R,
) -> Result<ScBatch<T>> {
    if n < 2 {
        return Err(SampleError::BatchTooSmall(n));
    }
    if n > dataset.len() {
        return Err(SampleError::BatchTooLarge {
            requested: n,
            available: dataset.len(),
        });
    }
    let picks = index::sample(rng, dataset.len(), n).into_vec();
    let mut anchors = Vec::with_capacity(n);
    let mut positives = Vec::with_capacity(n);
    let mut rects = Vec::with_capacity(n);
    for &i in &picks {
        let pair = sample_pair::<T, _>(dataset.image(i), i, patch, rng)?;
        anchors.push(pair.anchor);
        positives.push(pair.positive);
        rects.push(pair.rects);
    }
    Ok(ScBatch {
        anchors: Tensor::stack(&anchors)?,
        positives: Tensor::stack(&positives)?,
        image_indices: picks,
        rects,
    })
}

/// Feeds contrastive batches to a single consumer.
///
/// With one worker, batches are drawn inline from one ChaCha8 stream seeded
/// with `seed`, so the sequence is fully reproducible. With more workers,
/// each thread draws from its own stream and sends through a bounded queue;
/// arrival order across workers is not deterministic.
pub struct BatchStream<'a, T> {
    inner: Inner<'a, T>,
}

enum Inner<'a, T> {
    Inline {
        dataset: &'a Dataset,
        n: usize,
        patch: usize,
        rng: ChaCha8Rng,
    },
    Queue(mpsc::Receiver<Result<ScBatch<T>>>),
}

impl<T: Scalar> BatchStream<'_, T> {
    pub fn next_batch(&mut self) -> Result<ScBatch<T>> {
        match &mut self.inner {
            Inner::Inline {
                dataset,
                n,
                patch,
                rng,
            } => make_batch(dataset, *n, *patch, rng),
            Inner::Queue(rx) => rx.recv().expect("sampler workers outlive the stream"),
        }
    }
}

/// Worker count from `SC_NUM_WORKERS`, defaulting to 1.
pub fn workers_from_env() -> usize {
    std::env::var("SC_NUM_WORKERS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .map_or(1, |n| n.max(1))
}

/// Runs `body` with a batch stream backed by `workers` sampler threads.
/// Workers stop once `body` returns and the stream is dropped.
pub fn with_batch_stream<T: Scalar, F, Out>(
    dataset: &Dataset,
    n: usize,
    patch: usize,
    seed: u64,
    workers: usize,
    body: F,
) -> Out
where
    F: FnOnce(&mut BatchStream<'_, T>) -> Out,
{
    if workers <= 1 {
        let mut stream = BatchStream {
            inner: Inner::Inline {
                dataset,
                n,
                patch,
                rng: ChaCha8Rng::seed_from_u64(seed),
            },
        };
        return body(&mut stream);
    }
    thread::scope(|scope| {
        let (tx, rx) = mpsc::sync_channel(2 * workers);
        for w in 0..workers {
            let tx = tx.clone();
            scope.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(w as u64 + 1);
                loop {
                    let batch = make_batch(dataset, n, patch, &mut rng);
                    let failed = batch.is_err();
                    if tx.send(batch).is_err() || failed {
                        break;
                    }
                }
            });
        }
        drop(tx);
        let mut stream = BatchStream {
            inner: Inner::Queue(rx),
        };
        let out = body(&mut stream);
        // Dropping the receiver unblocks workers waiting on a full queue.
        drop(stream);
        out
    })
}
