//! Labeled image datasets: class-folder ingestion, procedural shapes, and a
//! deterministic train/eval split.

pub mod ppm;
mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use synth::{synth_dataset, SHAPE_NAMES};

/// One of every `EVAL_BLOCK` consecutive samples goes to the evaluation split.
pub const EVAL_BLOCK: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    All,
    Train,
    Eval,
}

/// Where a dataset came from; recorded in the dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        per_class: usize,
        classes: usize,
        resolution: usize,
        seed: u64,
    },
    Folder {
        path: PathBuf,
        resolution: usize,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Synthetic {
                per_class,
                classes,
                resolution,
                seed,
            } => synth_dataset(*per_class, *classes, *resolution, *seed),
            DataSource::Folder { path, resolution } => load_folder(path, *resolution),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: DataSource,
    pub image_shape: [usize; 3],
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub len: usize,
    pub split: Split,
    pub split_seed: Option<u64>,
}

/// Images of one shape with labels. Pixels live in one contiguous buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    image_shape: [usize; 3],
    pixels: Vec<f64>,
    labels: Vec<usize>,
    class_names: Vec<String>,
    source: DataSource,
    split: Split,
    split_seed: Option<u64>,
}

impl Dataset {
    /// Builds a dataset from `[C, H, W]` images in `[0, 1]`. Every class named
    /// in `class_names` must have at least one image.
    pub fn new(
        images: Vec<Tensor>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        source: DataSource,
    ) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::invalid("dataset has no images"))?;
        let image_shape: [usize; 3] = match *first.shape() {
            [c, h, w] => [c, h, w],
            ref s => return Err(Error::shape("dataset", format!("images must be [C, H, W], got {s:?}"))),
        };
        if labels.len() != images.len() {
            return Err(Error::shape("dataset", format!("{} labels for {} images", labels.len(), images.len())));
        }
        let classes = class_names.len();
        let mut pixels = Vec::with_capacity(images.len() * first.len());
        for (img, &label) in images.iter().zip(&labels) {
            if img.shape() != image_shape {
                return Err(Error::shape("dataset", format!("image {:?} differs from {image_shape:?}", img.shape())));
            }
            if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid("pixel values must lie in [0, 1]"));
            }
            if label >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            pixels.extend_from_slice(img.data());
        }
        let ds = Self {
            image_shape,
            pixels,
            labels,
            class_names,
            source,
            split: Split::All,
            split_seed: None,
        };
        if let Some(c) = (0..classes).find(|&c| ds.class_indices(c).is_empty()) {
            return Err(Error::EmptyClass(c));
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn split_kind(&self) -> Split {
        self.split
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn image_tensor(&self, i: usize) -> Tensor {
        Tensor::from_parts(self.image_shape.to_vec(), self.image(i).to_vec())
    }

    fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    /// Indices of all samples labeled `class`, in dataset order.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Stacks the selected samples into an `[N, C, H, W]` batch plus labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample {i} out of range for {} samples", self.len())));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.image_shape);
        Ok((Tensor::from_parts(shape, data), labels))
    }

    fn subset(&self, indices: &[usize], split: Split, seed: u64) -> Self {
        let n = self.image_len();
        let mut pixels = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Self {
            image_shape: self.image_shape,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            source: self.source.clone(),
            split,
            split_seed: Some(seed),
        }
    }

    /// Whether sample `index` belongs to the evaluation split. Within each block
    /// of [`EVAL_BLOCK`] consecutive indices exactly one is held out, chosen by
    /// hashing `(seed, block)`.
    pub fn is_eval_index(index: usize, seed: u64) -> bool {
        let block = (index / EVAL_BLOCK) as u64;
        let slot = splitmix64(seed ^ splitmix64(block)) % EVAL_BLOCK as u64;
        index % EVAL_BLOCK == slot as usize
    }

    /// Disjoint, exhaustive 80/20 split into `(train, eval)`.
    pub fn split(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let (mut train, mut eval) = (Vec::new(), Vec::new());
        for i in 0..self.len() {
            if Self::is_eval_index(i, seed) {
                eval.push(i);
            } else {
                train.push(i);
            }
        }
        if train.is_empty() || eval.is_empty() {
            return Err(Error::invalid(format!("{} samples are too few to split", self.len())));
        }
        Ok((
            self.subset(&train, Split::Train, seed),
            self.subset(&eval, Split::Eval, seed),
        ))
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            source: self.source.clone(),
            image_shape: self.image_shape,
            num_classes: self.num_classes(),
            class_names: self.class_names.clone(),
            len: self.len(),
            split: self.split,
            split_seed: self.split_seed,
        }
    }

    /// Writes the class-folder layout read by [`load_folder`] plus `manifest.json`.
    pub fn write_folder(&self, dir: &Path) -> Result<()> {
        for name in &self.class_names {
            let sub = dir.join(name);
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        }
        for i in 0..self.len() {
            let path = dir
                .join(&self.class_names[self.labels[i]])
                .join(format!("{i:06}.ppm"));
            ppm::write(&path, &self.image_tensor(i))?;
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_vec_pretty(&self.manifest())?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

/// Stateless 64-bit mixer used to derive independent seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Nearest-neighbor resize of a `[C, H, W]` image to `h x w`.
pub fn resize_nearest(image: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, sh, sw) = match *image.shape() {
        [c, sh, sw] => (c, sh, sw),
        ref s => return Err(Error::shape("resize", format!("expected [C, H, W], got {s:?}"))),
    };
    if h == 0 || w == 0 {
        return Err(Error::invalid("resize to an empty image"));
    }
    let src_of = |dst: usize, from: usize, to: usize| ((2 * dst + 1) * from / (2 * to)).min(from - 1);
    let rows: Vec<usize> = (0..h).map(|y| src_of(y, sh, h)).collect();
    let cols: Vec<usize> = (0..w).map(|x| src_of(x, sw, w)).collect();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for &sy in &rows {
            let line = &image.data()[(ch * sh + sy) * sw..(ch * sh + sy + 1) * sw];
            out.extend(cols.iter().map(|&sx| line[sx]));
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Nearest-neighbor downsampling so the image covers `h x w`, then a center crop.
pub fn resize_crop(image: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, sh, sw) = match *image.shape() {
        [c, sh, sw] => (c, sh, sw),
        ref s => return Err(Error::shape("resize", format!("expected [C, H, W], got {s:?}"))),
    };
    // scale = max(h / sh, w / sw), applied with integer rounding up
    let (th, tw) = if h * sw >= w * sh {
        (h, (sw * h).div_ceil(sh).max(w))
    } else {
        ((sh * w).div_ceil(sw).max(h), w)
    };
    let scaled = resize_nearest(image, th, tw)?;
    let (top, left) = ((th - h) / 2, (tw - w) / 2);
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let s = (ch * th + top + y) * tw + left;
            out.extend_from_slice(&scaled.data()[s..s + w]);
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("ppm" | "pgm" | "pnm" | "png")
    )
}

fn decode_image(path: &Path) -> Result<Tensor> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    if ext.as_deref() == Some("png") {
        return decode_png(path);
    }
    ppm::read(path)
}

#[cfg(feature = "png")]
fn decode_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

#[cfg(not(feature = "png"))]
fn decode_png(path: &Path) -> Result<Tensor> {
    Err(Error::format(path, "PNG support is not compiled in (enable the `png` feature)"))
}

fn to_rgb(image: Tensor) -> Tensor {
    if image.shape()[0] == 3 {
        return image;
    }
    let data = image.data().repeat(3);
    let [_, h, w] = [image.shape()[0], image.shape()[1], image.shape()[2]];
    Tensor::from_parts(vec![3, h, w], data)
}

/// Loads `path/<class>/<image>` files. Classes are subdirectories in sorted
/// order; images are PPM/PGM (and PNG with the `png` feature), converted to RGB
/// and resized to `resolution x resolution` by nearest neighbor. Files with
/// other extensions are ignored.
pub fn load_folder(path: &Path, resolution: usize) -> Result<Dataset> {
    let mut classes: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::format(path, "no class subdirectories"));
    }
    let (mut images, mut labels, mut names) = (Vec::new(), Vec::new(), Vec::new());
    for (label, dir) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::format(dir, "class directory contains no images"));
        }
        for f in files {
            let img = to_rgb(decode_image(&f)?);
            images.push(resize_nearest(&img, resolution, resolution)?);
            labels.push(label);
        }
        names.push(dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    }
    Dataset::new(
        images,
        labels,
        names,
        DataSource::Folder {
            path: path.to_path_buf(),
            resolution,
        },
    )
}
