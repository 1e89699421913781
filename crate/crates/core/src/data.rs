//! Datasets: CIFAR binary files, netpbm image folders, synthetic gratings,
//! global contrast normalisation, augmentation and seeded mini-batching.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::mix_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Labelled images `[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let (n, _, _, _) = images.dims4("dataset images")?;
        if labels.len() != n {
            return Err(Error::Data(format!("{} labels for {n} images", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        if !images.all_finite() {
            return Err(Error::Data("non-finite pixel values".into()));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)` of one image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let images = self.images.gather_batch(indices)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// The first `n` samples (or all of them if `n` is 0 or too large).
    pub fn head(&self, n: usize) -> Result<Self> {
        if n == 0 || n >= self.len() {
            return Ok(self.clone());
        }
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&idx)?;
        Dataset::new(images, labels, self.classes, self.split)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.push("images", self.images.clone())?;
        ck.push(
            "labels",
            Tensor::<f64>::from_vec(
                &[self.len()],
                self.labels.iter().map(|&l| l as f64).collect(),
            )?,
        )?;
        ck.push("classes", Tensor::<f64>::scalar(self.classes as f64))?;
        ck.push(
            "split",
            Tensor::<f64>::scalar(match self.split {
                Split::Train => 0.0,
                Split::Test => 1.0,
            }),
        )?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let images = ck.require("images")?.to_real::<f32>();
        let labels = ck
            .require("labels")?
            .to_real::<f64>()
            .data()
            .iter()
            .map(|&l| l as usize)
            .collect();
        let classes = ck.require("classes")?.to_real::<f64>().data()[0] as usize;
        let split = match ck.get("split").map(|t| t.to_real::<f64>().data()[0]) {
            Some(1.0) => Split::Test,
            _ => Split::Train,
        };
        Dataset::new(images, labels, classes, split)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_size(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 3073,
            CifarVariant::Cifar100 => 3074,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Decodes CIFAR binary records. Pixels are scaled to `[0, 1]`; no
/// normalisation is applied. CIFAR-100 records use the fine label.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant, split: Split) -> Result<Dataset> {
    let record = variant.record_size();
    if bytes.is_empty() || !bytes.len().is_multiple_of(record) {
        return Err(Error::RecordSize {
            len: bytes.len(),
            record,
            offset: bytes.len() / record * record,
        });
    }
    let n = bytes.len() / record;
    let label_bytes = record - CIFAR_PIXELS;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[label_bytes - 1] as usize;
        if label >= variant.classes() {
            return Err(Error::Data(format!(
                "label byte {label} at offset {} exceeds {} classes",
                i * record + label_bytes - 1,
                variant.classes()
            )));
        }
        labels.push(label);
        pixels.extend(rec[label_bytes..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(
        Tensor::from_vec(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?,
        labels,
        variant.classes(),
        split,
    )
}

pub fn load_cifar10(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_cifar(&fs::read(path)?, CifarVariant::Cifar10, Split::Train)
}

pub fn load_cifar100(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_cifar(&fs::read(path)?, CifarVariant::Cifar100, Split::Train)
}

/// Loads a split from the canonical directory layout
/// (`data_batch_{1..5}.bin` / `test_batch.bin`, or `train.bin` / `test.bin`).
pub fn load_cifar_dir(dir: impl AsRef<Path>, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let files: Vec<String> = match (variant, split) {
        (CifarVariant::Cifar10, Split::Train) => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        (CifarVariant::Cifar10, Split::Test) => vec!["test_batch.bin".into()],
        (CifarVariant::Cifar100, Split::Train) => vec!["train.bin".into()],
        (CifarVariant::Cifar100, Split::Test) => vec!["test.bin".into()],
    };
    let mut bytes = Vec::new();
    for f in files {
        bytes.extend(fs::read(dir.join(&f))?);
    }
    parse_cifar(&bytes, variant, split)
}

/// Per-image global contrast normalisation: subtract the image mean over all
/// channels and pixels, then divide by `max(std, 1e-8)` (population std).
pub fn gcn_normalize(images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let n = images.shape()[0];
    let per = images.len() / n;
    let mut out = Vec::with_capacity(images.len());
    for img in images.data().chunks_exact(per) {
        let mut sum = 0.0f64;
        for &v in img {
            sum += v as f64;
        }
        let mean = sum / per as f64;
        let mut ss = 0.0f64;
        for &v in img {
            let d = v as f64 - mean;
            ss += d * d;
        }
        let std = (ss / per as f64).sqrt().max(1e-8);
        out.extend(img.iter().map(|&v| ((v as f64 - mean) / std) as f32));
    }
    Tensor::from_vec(images.shape(), out)
}

/// Padding used by [`augment`] on each side.
pub const AUGMENT_PAD: usize = 4;

/// Zero-pads by `AUGMENT_PAD`, crops back to the original size at offset
/// `(dy, dx)` of the padded image, and optionally mirrors horizontally.
/// `image` is `[C, H, W]`; `dy, dx ∈ 0..=2·AUGMENT_PAD`.
pub fn augment_with(image: &Tensor<f32>, dy: usize, dx: usize, flip: bool) -> Result<Tensor<f32>> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape(format!("augment expects [C, H, W], got {:?}", image.shape()))),
    };
    if dy > 2 * AUGMENT_PAD || dx > 2 * AUGMENT_PAD {
        return Err(Error::shape(format!("crop offset ({dy}, {dx}) outside the padded image")));
    }
    let src = image.data();
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - AUGMENT_PAD as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let ox = if flip { w - 1 - x } else { x };
                let sx = (ox + dx) as isize - AUGMENT_PAD as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    Tensor::from_vec(image.shape(), out)
}

/// Random pad-crop and horizontal flip, both drawn from `seed`.
pub fn augment(image: &Tensor<f32>, seed: u64) -> Result<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dy = rng.gen_range(0..=2 * AUGMENT_PAD);
    let dx = rng.gen_range(0..=2 * AUGMENT_PAD);
    let flip = rng.gen_bool(0.5);
    augment_with(image, dy, dx, flip)
}

/// Augments every image of a batch `[N, C, H, W]`; image `i` uses `seeds[i]`.
pub fn augment_batch(images: &Tensor<f32>, seeds: &[u64]) -> Result<Tensor<f32>> {
    let (n, c, h, w) = images.dims4("augment batch")?;
    let per = c * h * w;
    let mut out = Vec::with_capacity(images.len());
    for (i, &seed) in seeds.iter().enumerate().take(n) {
        let img = Tensor::from_vec(&[c, h, w], images.data()[i * per..(i + 1) * per].to_vec())?;
        out.extend(augment(&img, seed)?.into_data());
    }
    Tensor::from_vec(images.shape(), out)
}

/// Class-conditional oriented gratings plus uniform noise, GCN-normalised.
///
/// Class `c` of `C` uses orientation `π·c/C`, a spatial frequency of
/// `2 + c mod 3` cycles per image and a class-specific colour gain. The phase
/// is drawn from `[0, π/2)` per image so class means stay distinct. Labels
/// cycle `0, 1, …, C-1`, keeping classes balanced.
pub fn make_synthetic(classes: usize, n: usize, size: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Data(format!("need at least 2 classes, got {classes}")));
    }
    if n == 0 || size == 0 {
        return Err(Error::Data("synthetic set needs n ≥ 1 and size ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(n * 3 * size * size);
    let mut labels = Vec::with_capacity(n);
    let tau = std::f64::consts::TAU;
    for i in 0..n {
        let c = i % classes;
        let theta = std::f64::consts::PI * c as f64 / classes as f64;
        let freq = 2.0 + (c % 3) as f64;
        let phase = rng.gen_range(0.0..std::f64::consts::FRAC_PI_2);
        let (sin_t, cos_t) = theta.sin_cos();
        for ch in 0..3 {
            let gain = 0.5 + 0.25 * ((c + ch) % 3) as f64;
            for y in 0..size {
                for x in 0..size {
                    let u = (x as f64 * cos_t + y as f64 * sin_t) / size as f64;
                    let v = gain * (tau * freq * u + phase).sin() + rng.gen_range(-0.5..0.5);
                    pixels.push(v as f32);
                }
            }
        }
        labels.push(c);
    }
    let images = Tensor::from_vec(&[n, 3, size, size], pixels)?;
    Dataset::new(gcn_normalize(&images)?, labels, classes, Split::Train)
}

/// Reads a binary netpbm image (`P5` grey or `P6` RGB, maxval ≤ 255) as `[3, H, W]` in `[0, 1]`.
pub fn read_netpbm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated netpbm header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let num = |t: String| -> Result<usize> {
        t.parse()
            .map_err(|_| Error::Data(format!("bad netpbm header field {t:?}")))
    };
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Data(format!("unsupported netpbm type {other:?}"))),
    };
    if maxval == 0 || maxval > 255 {
        return Err(Error::Data(format!("unsupported maxval {maxval}")));
    }
    let data = bytes
        .get(pos + 1..pos + 1 + w * h * channels)
        .ok_or_else(|| Error::Data("truncated netpbm payload".into()))?;
    let mut out = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let src = if channels == 1 { 0 } else { ch };
                out[(ch * h + y) * w + x] =
                    data[(y * w + x) * channels + src] as f32 / maxval as f32;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], out)
}

/// Loads `dir/<class>/*.{ppm,pgm}`; classes are subdirectories in sorted order.
/// All images must share one size. Pixels are GCN-normalised.
pub fn load_image_folder(dir: impl AsRef<Path>) -> Result<(Dataset, Vec<String>)> {
    let mut class_dirs: Vec<_> = fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(Error::Data("image folder needs at least two class directories".into()));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut names = Vec::new();
    for (label, cdir) in class_dirs.iter().enumerate() {
        names.push(cdir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        let mut files: Vec<_> = fs::read_dir(cdir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
            .collect();
        files.sort();
        for f in files {
            let img = read_netpbm(&fs::read(&f)?)?;
            match &shape {
                Some(s) if s.as_slice() != img.shape() => {
                    return Err(Error::Data(format!(
                        "{} has shape {:?}, expected {s:?}",
                        f.display(),
                        img.shape()
                    )))
                }
                None => shape = Some(img.shape().to_vec()),
                _ => {}
            }
            pixels.extend(img.into_data());
            labels.push(label);
        }
    }
    let s = shape.ok_or_else(|| Error::Data("image folder contains no images".into()))?;
    let images = Tensor::from_vec(&[labels.len(), s[0], s[1], s[2]], pixels)?;
    let ds = Dataset::new(gcn_normalize(&images)?, labels, names.len(), Split::Train)?;
    Ok((ds, names))
}

/// Seeded epoch-wise shuffling into mini-batches; the final short batch is kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchStream {
    pub len: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl BatchStream {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch_size == 0 {
            return Err(Error::Data("batch stream needs a nonempty dataset and batch size".into()));
        }
        Ok(BatchStream {
            len,
            batch_size: batch_size.min(len),
            seed,
        })
    }

    /// Sample order of `epoch`, a pure function of `(seed, epoch)`.
    pub fn order(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, epoch as u64 + 1));
        idx.shuffle(&mut rng);
        idx
    }

    pub fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        self.order(epoch)
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }
}
