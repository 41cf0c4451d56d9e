//! Labelled image datasets: CIFAR-10 binary batches, MNIST IDX files and
//! class-per-folder PGM/PPM trees.

use std::f32::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pnm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetFormat {
    #[serde(rename = "cifar10-binary")]
    Cifar10Binary,
    #[serde(rename = "mnist-idx")]
    MnistIdx,
    #[serde(rename = "image-folder-subset")]
    ImageFolderSubset,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10-binary" => Ok(Self::Cifar10Binary),
            "mnist-idx" => Ok(Self::MnistIdx),
            "image-folder-subset" => Ok(Self::ImageFolderSubset),
            other => Err(Error::InvalidArgument(format!("unknown dataset format '{other}'"))),
        }
    }
}

/// Images in `[0, 1]`, channel-first, with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    shape: [usize; 3],
    num_classes: usize,
}

pub const CIFAR10_RECORD: usize = 1 + 3 * 32 * 32;

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, shape: [usize; 3], num_classes: usize) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::dim(
                "dataset",
                format!("{} values for {} images of {shape:?}", images.len(), labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(Self {
            images,
            labels,
            shape,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.per_image();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn image_tensor(&self, i: usize) -> Tensor {
        Tensor::new(self.shape.to_vec(), self.image(i).to_vec()).expect("image shape")
    }

    fn per_image(&self) -> usize {
        self.shape.iter().product()
    }

    /// `N×C×H×W` batch and labels for the given indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.per_image();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let shape = vec![indices.len(), self.shape[0], self.shape[1], self.shape[2]];
        (
            Tensor::new(shape, data).expect("batch shape"),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let (batch, labels) = self.batch(indices);
        Dataset {
            images: batch.into_data(),
            labels,
            shape: self.shape,
            num_classes: self.num_classes,
        }
    }

    /// The first `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Exactly `per_class` samples of every class, drawn without replacement
    /// under `seed`, kept in original order. Fails if a class is too small.
    pub fn subsample_per_class(&self, per_class: usize, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::with_capacity(per_class * self.num_classes);
        for class in 0..self.num_classes {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            if members.len() < per_class {
                return Err(Error::InvalidArgument(format!(
                    "class {class} has {} samples, fewer than {per_class}",
                    members.len()
                )));
            }
            members.shuffle(&mut rng);
            keep.extend_from_slice(&members[..per_class]);
        }
        keep.sort_unstable();
        Ok(self.select(&keep))
    }

    /// Writes the dataset as CIFAR-10 binary records. Requires 3×32×32 images.
    pub fn write_cifar10_binary(&self, path: &Path) -> Result<()> {
        if self.shape != [3, 32, 32] || self.num_classes > 256 {
            return Err(Error::InvalidArgument("CIFAR-10 records need 3×32×32 images".into()));
        }
        let mut bytes = Vec::with_capacity(self.len() * CIFAR10_RECORD);
        for i in 0..self.len() {
            bytes.push(self.labels[i] as u8);
            bytes.extend(self.image(i).iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Loads a dataset.
///
/// * `cifar10-binary`: a record file, or a directory whose `data_batch_*.bin`
///   files are concatenated in name order.
/// * `mnist-idx`: an `*-images-idx3-ubyte` file; labels are read from the
///   sibling `*-labels-idx1-ubyte` file.
/// * `image-folder-subset`: a directory with one sub-directory per class (in
///   name order) containing `.pgm`/`.ppm` files.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    match format {
        DatasetFormat::Cifar10Binary => load_cifar10(path),
        DatasetFormat::MnistIdx => load_mnist(path),
        DatasetFormat::ImageFolderSubset => load_image_folder(path),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn load_cifar10(path: &Path) -> Result<Dataset> {
    let files = if path.is_dir() {
        let files: Vec<PathBuf> = sorted_entries(path)?
            .into_iter()
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
            })
            .collect();
        if files.is_empty() {
            return Err(Error::InvalidArgument(format!("no data_batch_*.bin in {}", path.display())));
        }
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for file in files {
        let bytes = read(&file)?;
        parse_cifar10(&bytes, &mut images, &mut labels)?;
    }
    Dataset::new(images, labels, [3, 32, 32], 10)
}

/// Appends the records of one CIFAR-10 binary file.
pub fn parse_cifar10(bytes: &[u8], images: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR10_RECORD) {
        let offset = (bytes.len() / CIFAR10_RECORD * CIFAR10_RECORD) as u64;
        return Err(Error::Malformed {
            format: "cifar10-binary",
            offset,
            detail: format!("{} bytes is not a multiple of the {CIFAR10_RECORD}-byte record", bytes.len()),
        });
    }
    for (r, record) in bytes.chunks(CIFAR10_RECORD).enumerate() {
        let label = usize::from(record[0]);
        if label >= 10 {
            return Err(Error::Malformed {
                format: "cifar10-binary",
                offset: (r * CIFAR10_RECORD) as u64,
                detail: format!("label {label} out of range for 10 classes"),
            });
        }
        labels.push(label);
        images.extend(record[1..].iter().map(|&b| f32::from(b) / 255.0));
    }
    Ok(())
}

fn be_u32(bytes: &[u8], offset: usize, format: &'static str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Malformed {
            format,
            offset: offset as u64,
            detail: "truncated header".into(),
        })
}

fn load_mnist(path: &Path) -> Result<Dataset> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad path {}", path.display())))?;
    if !name.contains("images-idx3") {
        return Err(Error::InvalidArgument(format!(
            "expected an *-images-idx3-ubyte file, got {name}"
        )));
    }
    let label_path = path.with_file_name(name.replace("images-idx3", "labels-idx1"));
    parse_mnist(&read(path)?, &read(&label_path)?)
}

/// Parses an IDX3 image file and its IDX1 label file.
pub fn parse_mnist(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    const FMT: &str = "mnist-idx";
    let magic = be_u32(image_bytes, 0, FMT)?;
    if magic != 0x0000_0803 {
        return Err(Error::Malformed {
            format: FMT,
            offset: 0,
            detail: format!("image magic {magic:#010x}, expected 0x00000803"),
        });
    }
    let count = be_u32(image_bytes, 4, FMT)? as usize;
    let rows = be_u32(image_bytes, 8, FMT)? as usize;
    let cols = be_u32(image_bytes, 12, FMT)? as usize;
    let need = 16 + count * rows * cols;
    if image_bytes.len() != need {
        return Err(Error::Malformed {
            format: FMT,
            offset: image_bytes.len().min(need) as u64,
            detail: format!("image file has {} bytes, header implies {need}", image_bytes.len()),
        });
    }
    let label_magic = be_u32(label_bytes, 0, FMT)?;
    if label_magic != 0x0000_0801 {
        return Err(Error::Malformed {
            format: FMT,
            offset: 0,
            detail: format!("label magic {label_magic:#010x}, expected 0x00000801"),
        });
    }
    let label_count = be_u32(label_bytes, 4, FMT)? as usize;
    if label_count != count || label_bytes.len() != 8 + count {
        return Err(Error::Malformed {
            format: FMT,
            offset: 4,
            detail: format!("{label_count} labels ({} bytes) for {count} images", label_bytes.len()),
        });
    }
    let labels: Vec<usize> = label_bytes[8..].iter().map(|&b| usize::from(b)).collect();
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= 10) {
        return Err(Error::Malformed {
            format: FMT,
            offset: (8 + i) as u64,
            detail: format!("label {l} out of range for 10 classes"),
        });
    }
    let images = image_bytes[16..].iter().map(|&b| f32::from(b) / 255.0).collect();
    Dataset::new(images, labels, [1, rows, cols], 10)
}

fn load_image_folder(root: &Path) -> Result<Dataset> {
    let classes: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(Error::InvalidArgument(format!("no class folders in {}", root.display())));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut shape: Option<[usize; 3]> = None;
    for (label, dir) in classes.iter().enumerate() {
        for file in sorted_entries(dir)? {
            let ext = file.extension().and_then(|e| e.to_str()).unwrap_or("");
            if !matches!(ext, "pgm" | "ppm") {
                continue;
            }
            let img = pnm::read_image(&file)?;
            let s = [img.shape()[0], img.shape()[1], img.shape()[2]];
            match shape {
                None => shape = Some(s),
                Some(prev) if prev != s => {
                    return Err(Error::dim(
                        "image-folder-subset",
                        format!("{} is {s:?}, earlier images are {prev:?}", file.display()),
                    ))
                }
                _ => {}
            }
            images.extend_from_slice(img.data());
            labels.push(label);
        }
    }
    let shape = shape.ok_or_else(|| Error::InvalidArgument(format!("no images under {}", root.display())))?;
    Dataset::new(images, labels, shape, classes.len())
}

/// Procedural 10-class 3×32×32 image set: each class is an oriented colour
/// grating (orientation, frequency and hue differ by class) with random
/// phase, contrast, a random blob occluder and pixel noise.
pub fn synthetic_cifar_like(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (32usize, 32usize);
    let mut images = Vec::with_capacity(n * 3 * h * w);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.gen_range(0..10usize);
        let theta = (class % 5) as f32 * PI / 5.0 + rng.gen_range(-0.3..0.3);
        let freq = if class < 5 { 2.5 } else { 4.0 } * rng.gen_range(0.75..1.25) / w as f32;
        let phase = rng.gen_range(0.0..TAU);
        let contrast = rng.gen_range(0.1..0.3);
        let hue = class as f32 / 10.0 + rng.gen_range(-0.08..0.08);
        let tint = [0.0, 1.0 / 3.0, 2.0 / 3.0].map(|o| 0.5 + 0.5 * (TAU * (hue + o)).cos());
        let background = rng.gen_range(0.3..0.7);
        // Distractor grating with a random orientation.
        let (ds, dc) = rng.gen_range(0.0..PI).sin_cos();
        let (dfreq, dphase, damp) = (rng.gen_range(1.5..5.0) / w as f32, rng.gen_range(0.0..TAU), rng.gen_range(0.0..0.15));
        let (bx, by, br) = (
            rng.gen_range(0.0..w as f32),
            rng.gen_range(0.0..h as f32),
            rng.gen_range(4.0..10.0f32),
        );
        let blob = rng.gen_range(0.0..1.0f32);
        let (s, c) = theta.sin_cos();
        for (ch, &t) in tint.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let (xf, yf) = (x as f32, y as f32);
                    let wave = (TAU * freq * (xf * c + yf * s) + phase).sin();
                    let distractor = (TAU * dfreq * (xf * dc + yf * ds) + dphase).sin();
                    let mut v = background + contrast * wave * (0.4 + 0.6 * t) + damp * distractor;
                    if (xf - bx).powi(2) + (yf - by).powi(2) < br * br {
                        v = blob + 0.1 * ch as f32;
                    }
                    v += rng.gen_range(-0.15..0.15);
                    images.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(class);
    }
    Dataset::new(images, labels, [3, h, w], 10).expect("synthetic shape")
}
