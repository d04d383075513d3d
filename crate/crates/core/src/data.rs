//! Image datasets: the CIFAR-10 binary record format, directories of binary
//! PPM files, labeled subsampling, and a procedural texture generator.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PLANE: usize = CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_PLANE;
/// One label byte followed by the red, green and blue planes.
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("label {label} at example {index} is outside [0, {num_classes})")]
    Label {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Images `[C, H, W]` with pixel values in `[0, 1]`, optionally labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    images: Vec<Tensor<f32>>,
    labels: Option<Vec<usize>>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        images: Vec<Tensor<f32>>,
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        if let Some(first) = images.first() {
            first.dims3("dataset image")?;
            if let Some((i, img)) = images
                .iter()
                .enumerate()
                .find(|(_, t)| t.shape() != first.shape())
            {
                return Err(DataError::Invalid(format!(
                    "image {i} has shape {:?}, expected {:?}",
                    img.shape(),
                    first.shape()
                )));
            }
        }
        for (i, img) in images.iter().enumerate() {
            if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(DataError::Invalid(format!(
                    "image {i} has pixel values outside [0, 1]"
                )));
            }
        }
        if let Some(labels) = &labels {
            if labels.len() != images.len() {
                return Err(DataError::Invalid(format!(
                    "{} labels for {} images",
                    labels.len(),
                    images.len()
                )));
            }
            if let Some((index, &label)) =
                labels.iter().enumerate().find(|(_, &l)| l >= num_classes)
            {
                return Err(DataError::Label {
                    index,
                    label,
                    num_classes,
                });
            }
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor<f32>] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &Tensor<f32> {
        &self.images[i]
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `[C, H, W]` shared by every image, `None` when empty.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.images
            .first()
            .map(|t| t.dims3("dataset image").expect("validated"))
    }

    pub fn class_histogram(&self) -> Option<Vec<usize>> {
        let labels = self.labels.as_ref()?;
        let mut h = vec![0; self.num_classes];
        for &l in labels {
            h[l] += 1;
        }
        Some(h)
    }

    /// Same images with labels removed.
    pub fn unlabeled(&self) -> Dataset {
        Dataset {
            name: format!("{} (unlabeled)", self.name),
            images: self.images.clone(),
            labels: None,
            num_classes: self.num_classes,
        }
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
        }
    }

    /// Per-channel pixel mean, as used by the `mean` model directive.
    pub fn channel_means(&self) -> Option<Vec<f64>> {
        let (c, h, w) = self.image_shape()?;
        let plane = h * w;
        let mut sums = vec![0.0f64; c];
        for img in &self.images {
            for (ch, chunk) in img.data().chunks_exact(plane).enumerate() {
                sums[ch] += chunk.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        let count = (self.images.len() * plane) as f64;
        Some(sums.into_iter().map(|s| s / count).collect())
    }

    pub fn concat(name: impl Into<String>, parts: Vec<Dataset>) -> Result<Dataset> {
        let num_classes = parts.iter().map(|d| d.num_classes).max().unwrap_or(0);
        let labeled = parts.iter().all(|d| d.labels.is_some());
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for part in parts {
            if let Some(l) = part.labels {
                labels.extend(l);
            }
            images.extend(part.images);
        }
        Dataset::new(name, images, labeled.then_some(labels), num_classes)
    }
}

fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Parses CIFAR-10 binary records. The buffer must hold a whole number of
/// 3073-byte records.
pub fn parse_cifar10_records(bytes: &[u8], origin: &Path) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(format_err(
            origin,
            format!(
                "size {} is not a multiple of the {CIFAR_RECORD}-byte record length",
                bytes.len()
            ),
        ));
    }
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(images.capacity());
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(format_err(
                origin,
                format!("record {i} has label byte {label} > 9"),
            ));
        }
        let pixels = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
        images.push(Tensor::new(vec![3, CIFAR_SIDE, CIFAR_SIDE], pixels)?);
        labels.push(label);
    }
    let name = origin.file_name().map_or_else(
        || "cifar10".to_string(),
        |n| n.to_string_lossy().into_owned(),
    );
    Dataset::new(name, images, Some(labels), CIFAR_CLASSES)
}

pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_cifar10_records(&bytes, path)
}

/// Loads and concatenates several batch files.
pub fn load_cifar10_batches(paths: &[PathBuf]) -> Result<Dataset> {
    let parts = paths
        .iter()
        .map(|p| load_cifar10_binary(p))
        .collect::<Result<Vec<_>>>()?;
    Dataset::concat("cifar10", parts)
}

/// The five `data_batch_<k>.bin` training files present in a CIFAR-10
/// binary directory, in order.
pub fn cifar10_train_files(dir: &Path) -> Vec<PathBuf> {
    (1..=5)
        .map(|k| dir.join(format!("data_batch_{k}.bin")))
        .filter(|p| p.is_file())
        .collect()
}

pub fn encode_cifar10_records(dataset: &Dataset) -> Result<Vec<u8>> {
    let labels = dataset
        .labels()
        .ok_or_else(|| DataError::Invalid("CIFAR-10 records need labels".into()))?;
    if let Some(shape) = dataset.image_shape() {
        if shape != (3, CIFAR_SIDE, CIFAR_SIDE) {
            return Err(DataError::Invalid(format!(
                "CIFAR-10 records hold 3x32x32 images, dataset has {shape:?}"
            )));
        }
    }
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for (img, &label) in dataset.images().iter().zip(labels) {
        if label >= CIFAR_CLASSES {
            return Err(DataError::Invalid(format!(
                "label {label} does not fit a CIFAR-10 record"
            )));
        }
        out.push(label as u8);
        out.extend(img.data().iter().map(|&v| quantize(v)));
    }
    Ok(out)
}

pub fn write_cifar10_binary(path: &Path, dataset: &Dataset) -> Result<()> {
    let bytes = encode_cifar10_records(dataset)?;
    fs::write(path, bytes).map_err(io_err(path))
}

fn ppm_tokens(bytes: &[u8], count: usize, path: &Path) -> Result<(Vec<usize>, usize)> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(count);
    while tokens.len() < count {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let tok = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| format_err(path, "non-ASCII PPM header"))?;
        if tok.is_empty() {
            return Err(format_err(path, "truncated PPM header"));
        }
        if tokens.is_empty() {
            if tok != "P6" {
                return Err(format_err(
                    path,
                    format!("expected binary PPM magic `P6`, got `{tok}`"),
                ));
            }
            tokens.push(0);
        } else {
            tokens.push(
                tok.parse()
                    .map_err(|_| format_err(path, format!("bad PPM header field `{tok}`")))?,
            );
        }
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((tokens, pos + 1))
}

/// Reads an 8-bit binary PPM as a `[3, H, W]` tensor in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (hdr, start) = ppm_tokens(&bytes, 4, path)?;
    let (w, h, maxval) = (hdr[1], hdr[2], hdr[3]);
    if maxval != 255 {
        return Err(format_err(
            path,
            format!("only 8-bit PPM is supported, maxval is {maxval}"),
        ));
    }
    let raster = bytes.get(start..).unwrap_or(&[]);
    if raster.len() != 3 * w * h {
        return Err(format_err(
            path,
            format!(
                "raster holds {} bytes, {w}x{h} needs {}",
                raster.len(),
                3 * w * h
            ),
        ));
    }
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (p, rgb) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = rgb[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data)?)
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = image.dims3("write_ppm")?;
    if c != 3 {
        return Err(DataError::Invalid(format!(
            "PPM needs 3 channels, image has {c}"
        )));
    }
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..plane {
        for ch in 0..3 {
            out.push(quantize(image.data()[ch * plane + p]));
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&out).map_err(io_err(path))
}

/// Loads every `<label>_<id>.ppm` in `dir`, ordered by (label, id).
/// Classes are counted as `max label + 1`.
pub fn load_ppm_dir(dir: &Path) -> Result<Dataset> {
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("ppm") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let parsed = stem
            .split_once('_')
            .and_then(|(l, id)| Some((l.parse::<usize>().ok()?, id.to_string())));
        let Some((label, id)) = parsed else {
            return Err(format_err(
                &path,
                "file name must look like `<label>_<id>.ppm`",
            ));
        };
        entries.push((label, id, path));
    }
    entries.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    let num_classes = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
    let mut images = Vec::with_capacity(entries.len());
    let mut labels = Vec::with_capacity(entries.len());
    for (label, _, path) in entries {
        images.push(read_ppm(&path)?);
        labels.push(label);
    }
    let name = dir.display().to_string();
    Dataset::new(name, images, Some(labels), num_classes)
}

pub fn write_ppm_dir(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let labels = dataset
        .labels()
        .ok_or_else(|| DataError::Invalid("PPM directories encode labels in file names".into()))?;
    for (i, (img, &label)) in dataset.images().iter().zip(labels).enumerate() {
        write_ppm(&dir.join(format!("{label}_{i:06}.ppm")), img)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerClass {
    All,
    Count(usize),
}

/// Keeps exactly `per_class` examples of every class, drawn without
/// replacement. The result preserves the original relative order.
pub fn subsample_labeled(dataset: &Dataset, per_class: PerClass, seed: u64) -> Result<Dataset> {
    let labels = dataset
        .labels()
        .ok_or_else(|| DataError::Invalid("subsampling needs a labeled dataset".into()))?;
    let count = match per_class {
        PerClass::All => return Ok(dataset.clone()),
        PerClass::Count(n) => n,
    };
    let mut by_class: BTreeMap<usize, Vec<usize>> = (0..dataset.num_classes())
        .map(|k| (k, Vec::new()))
        .collect();
    for (i, &l) in labels.iter().enumerate() {
        by_class.get_mut(&l).expect("validated label").push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(count * by_class.len());
    for (class, mut idx) in by_class {
        if idx.len() < count {
            return Err(DataError::Invalid(format!(
                "class {class} has {} examples, {count} requested",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        keep.extend_from_slice(&idx[..count]);
    }
    keep.sort_unstable();
    let mut out = dataset.select(&keep);
    out.name = format!("{} ({count}/class)", dataset.name);
    Ok(out)
}

/// Texture family parameters for one class of [`synth_clustered`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureFamily {
    /// Grating orientation in radians.
    pub orientation: f64,
    /// Spatial frequency in cycles per pixel.
    pub frequency: f64,
}

/// Orientation/frequency band of class `k` out of `num_classes`: classes
/// alternate between two frequency bands and spread evenly over orientations.
pub fn texture_family(k: usize, num_classes: usize) -> TextureFamily {
    let bands = [0.09, 0.19];
    let per_band = num_classes.div_ceil(bands.len()).max(1);
    TextureFamily {
        orientation: PI * (k / bands.len()) as f64 / per_band as f64,
        frequency: bands[k % bands.len()],
    }
}

const BLOBS: usize = 6;

/// A localized grating patch of random orientation and frequency.
struct Blob {
    cx: f64,
    cy: f64,
    inv_two_var: f64,
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

impl Blob {
    fn draw<R: Rng + ?Sized>(rng: &mut R, side: usize) -> Self {
        let sigma = rng.random_range(0.06..0.14) * side as f64;
        let theta: f64 = rng.random_range(0.0..PI);
        let freq = rng.random_range(0.05..0.25);
        Blob {
            cx: rng.random_range(0.0..side as f64),
            cy: rng.random_range(0.0..side as f64),
            inv_two_var: 1.0 / (2.0 * sigma * sigma),
            kx: 2.0 * PI * freq * theta.cos(),
            ky: 2.0 * PI * freq * theta.sin(),
            phase: rng.random_range(0.0..2.0 * PI),
            amp: rng.random_range(0.1..0.25),
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let r2 = (x - self.cx).powi(2) + (y - self.cy).powi(2);
        self.amp * (-r2 * self.inv_two_var).exp() * (self.kx * x + self.ky * y + self.phase).sin()
    }
}

/// Procedural clustered images: each class is a family of oriented sinusoid
/// textures (see [`texture_family`]). Every image draws its own phase,
/// orientation and frequency jitter, contrast, tint and brightness, plus a
/// weaker distractor grating and pixel noise. Patches inside one image share
/// texture statistics; images of different classes do not.
///
/// Output is ordered class by class and is a pure function of the arguments.
pub fn synth_clustered(
    num_classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || image_size == 0 {
        return Err(DataError::Invalid(
            "synth_clustered needs >= 1 class and a positive image size".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.06).expect("valid sigma");
    let side = image_size;
    let plane = side * side;
    let mut images = Vec::with_capacity(num_classes * per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for k in 0..num_classes {
        let fam = texture_family(k, num_classes);
        for _ in 0..per_class {
            let theta = fam.orientation + rng.random_range(-0.12..0.12);
            let freq = fam.frequency * rng.random_range(0.9..1.1);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = rng.random_range(0.08..0.16);
            let (s, c) = theta.sin_cos();
            // Illumination and tint drift across the image along a random axis.
            let axis = rng.random_range(0.0..2.0 * PI);
            let (ay, ax) = axis.sin_cos();
            let base = rng.random_range(0.4..0.6);
            let slope = rng.random_range(0.0..0.3) / side as f64;
            let tint_a: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
            let tint_b: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
            let blobs: Vec<Blob> = (0..BLOBS).map(|_| Blob::draw(&mut rng, side)).collect();
            let mid = (side as f64 - 1.0) / 2.0;
            let mut data = vec![0.0f32; 3 * plane];
            for y in 0..side {
                for x in 0..side {
                    let (xf, yf) = (x as f64, y as f64);
                    let t = ((xf - mid) * ax + (yf - mid) * ay) / side as f64 + 0.5;
                    let light = base + slope * (t - 0.5) * side as f64;
                    let g = amp * (2.0 * PI * freq * (xf * c + yf * s) + phase).sin();
                    let clutter: f64 = blobs.iter().map(|b| b.at(xf, yf)).sum();
                    for ch in 0..3 {
                        let tint = tint_a[ch] + (tint_b[ch] - tint_a[ch]) * t.clamp(0.0, 1.0);
                        let v = light + tint * (g + clutter) + noise.sample(&mut rng);
                        data[ch * plane + y * side + x] = v.clamp(0.0, 1.0) as f32;
                    }
                }
            }
            images.push(Tensor::new(vec![3, side, side], data)?);
            labels.push(k);
        }
    }
    Dataset::new(
        format!("synth-{num_classes}x{per_class}-{side}px-seed{seed}"),
        images,
        Some(labels),
        num_classes,
    )
}
