//! Threat models: translated universal patches that overwrite an image
//! region, and additive perturbations bounded in L-infinity norm.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ppm;
use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

const PATCH_MAGIC: &[u8; 8] = b"MPPATCH\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbationSpec {
    /// A `channels x height x width` patch pasted at the image center shifted
    /// by at most `max_dy`/`max_dx` pixels.
    Patch {
        channels: usize,
        height: usize,
        width: usize,
        max_dy: usize,
        max_dx: usize,
    },
    /// A full-image perturbation with `|xi|_inf <= epsilon`, added then clamped to `[0, 1]`.
    Additive { epsilon: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Placement {
    pub dy: i64,
    pub dx: i64,
}

/// A feasible perturbation for some [`PerturbationSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct Patch(Tensor);

impl Patch {
    /// Wraps `values` after checking shape and feasibility against `spec`.
    pub fn new(values: Tensor, spec: &PerturbationSpec, image: [usize; 3]) -> Result<Self> {
        if values.shape() != spec.patch_shape(image).as_slice() {
            return Err(Error::shape(
                "patch",
                format!("{:?}, expected {:?}", values.shape(), spec.patch_shape(image)),
            ));
        }
        let (lo, hi) = spec.bounds();
        if values.data().iter().any(|v| *v < lo || *v > hi) {
            return Err(Error::invalid(format!("patch values outside [{lo}, {hi}]")));
        }
        Ok(Self(values))
    }

    pub(crate) fn from_tensor_unchecked(values: Tensor) -> Self {
        Self(values)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }
}

impl PerturbationSpec {
    pub fn is_patch(&self) -> bool {
        matches!(self, PerturbationSpec::Patch { .. })
    }

    pub fn mode_name(&self) -> &'static str {
        match self {
            PerturbationSpec::Patch { .. } => "patch",
            PerturbationSpec::Additive { .. } => "additive",
        }
    }

    /// Checks the spec against an image shape `[C, H, W]`.
    pub fn validate(&self, image: [usize; 3]) -> Result<()> {
        let [c, h, w] = image;
        match *self {
            PerturbationSpec::Patch {
                channels,
                height,
                width,
                max_dy,
                max_dx,
            } => {
                if channels != c {
                    return Err(Error::Config(format!("patch has {channels} channels, images have {c}")));
                }
                if height == 0 || width == 0 || height > h || width > w {
                    return Err(Error::Config(format!("patch {height}x{width} does not fit {h}x{w}")));
                }
                let (room_y, room_x) = ((h - height) / 2, (w - width) / 2);
                if max_dy > room_y || max_dx > room_x {
                    return Err(Error::Config(format!(
                        "translation ({max_dy}, {max_dx}) would leave the image; at most ({room_y}, {room_x})"
                    )));
                }
                Ok(())
            }
            PerturbationSpec::Additive { epsilon } => {
                if !(epsilon > 0.0 && epsilon <= 1.0) {
                    return Err(Error::Config(format!("epsilon {epsilon} not in (0, 1]")));
                }
                Ok(())
            }
        }
    }

    pub fn patch_shape(&self, image: [usize; 3]) -> Vec<usize> {
        match *self {
            PerturbationSpec::Patch {
                channels,
                height,
                width,
                ..
            } => vec![channels, height, width],
            PerturbationSpec::Additive { .. } => image.to_vec(),
        }
    }

    /// Element-wise feasible range.
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            PerturbationSpec::Patch { .. } => (0.0, 1.0),
            PerturbationSpec::Additive { epsilon } => (-epsilon, epsilon),
        }
    }

    /// Uniform offsets over the translation box; the null offset in additive mode.
    pub fn sample_randomness<R: Rng + ?Sized>(&self, rng: &mut R) -> Placement {
        match *self {
            PerturbationSpec::Patch { max_dy, max_dx, .. } => Placement {
                dy: rng.gen_range(-(max_dy as i64)..=max_dy as i64),
                dx: rng.gen_range(-(max_dx as i64)..=max_dx as i64),
            },
            PerturbationSpec::Additive { .. } => Placement::default(),
        }
    }

    /// Uniform sample from the feasible set.
    pub fn random_patch<R: Rng + ?Sized>(&self, image: [usize; 3], rng: &mut R) -> Patch {
        let shape = self.patch_shape(image);
        let (lo, hi) = self.bounds();
        let n = shape.iter().product();
        let data = (0..n).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect();
        Patch(Tensor::from_parts(shape, data))
    }

    /// Element-wise clamp onto the feasible set.
    pub fn project(&self, values: &Tensor, image: [usize; 3]) -> Result<Patch> {
        let expect = self.patch_shape(image);
        if values.shape() != expect.as_slice() {
            return Err(Error::shape(
                "project",
                format!("{:?}, expected {expect:?}", values.shape()),
            ));
        }
        let (lo, hi) = self.bounds();
        Ok(Patch(values.map(|v| v.clamp(lo, hi))))
    }

    /// Top-left corner of the patch window for a placement.
    pub fn window(&self, image: [usize; 3], r: Placement) -> Result<(usize, usize)> {
        let [_, h, w] = image;
        let PerturbationSpec::Patch { height, width, .. } = *self else {
            return Ok((0, 0));
        };
        let top = ((h - height) / 2) as i64 + r.dy;
        let left = ((w - width) / 2) as i64 + r.dx;
        if top < 0 || left < 0 || top as usize + height > h || left as usize + width > w {
            return Err(Error::invalid(format!("placement {r:?} puts the patch outside the image")));
        }
        Ok((top as usize, left as usize))
    }

    /// Writes `F(x, xi, r)` for one `[C, H, W]` image into `out`.
    fn apply_into(&self, x: &[f64], patch: &Patch, r: Placement, image: [usize; 3], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(x);
        match *self {
            PerturbationSpec::Patch { channels, height, width, .. } => {
                let (top, left) = self.window(image, r)?;
                let [_, h, w] = image;
                for c in 0..channels {
                    for i in 0..height {
                        let dst = (c * h + top + i) * w + left;
                        let src = (c * height + i) * width;
                        out[dst..dst + width].copy_from_slice(&patch.data()[src..src + width]);
                    }
                }
            }
            PerturbationSpec::Additive { .. } => {
                for (o, p) in out.iter_mut().zip(patch.data()) {
                    *o = (*o + p).clamp(0.0, 1.0);
                }
            }
        }
        Ok(())
    }

    /// Applies a patch to one `[C, H, W]` image. The input is not modified.
    pub fn apply(&self, x: &Tensor, patch: &Patch, r: Placement) -> Result<Tensor> {
        let image = image_shape(x.shape())?;
        self.check_patch(patch, image)?;
        let mut out = vec![0.0; x.len()];
        self.apply_into(x.data(), patch, r, image, &mut out)?;
        Ok(Tensor::from_parts(x.shape().to_vec(), out))
    }

    /// Perturbs every image of an `[N, C, H, W]` batch with its own patch and placement.
    pub fn apply_batch(&self, batch: &Tensor, patches: &[&Patch], placements: &[Placement]) -> Result<Tensor> {
        let (n, image) = batch_shape(batch.shape())?;
        if patches.len() != n || placements.len() != n {
            return Err(Error::invalid(format!(
                "{n} images, {} patches, {} placements",
                patches.len(),
                placements.len()
            )));
        }
        let per: usize = image.iter().product();
        let mut out = vec![0.0; batch.len()];
        for (i, (p, r)) in patches.iter().zip(placements).enumerate() {
            self.check_patch(p, image)?;
            let span = i * per..(i + 1) * per;
            self.apply_into(&batch.data()[span.clone()], p, *r, image, &mut out[span])?;
        }
        Ok(Tensor::from_parts(batch.shape().to_vec(), out))
    }

    /// Turns a datapoint into a feasible perturbation: resized and center-cropped
    /// to the patch size, or intensities rescaled into `[-eps, eps]`.
    pub fn patch_from_datapoint(&self, x: &Tensor) -> Result<Patch> {
        let image = image_shape(x.shape())?;
        match *self {
            PerturbationSpec::Patch { height, width, .. } => {
                let values = crate::data::resize_crop(x, height, width)?;
                Patch::new(values, self, image)
            }
            PerturbationSpec::Additive { epsilon } => {
                Ok(Patch(x.map(|v| (epsilon * (2.0 * v - 1.0)).clamp(-epsilon, epsilon))))
            }
        }
    }

    /// Chain rule through [`PerturbationSpec::apply`]: maps the gradient with
    /// respect to the perturbed image onto the patch. In additive mode the clamp
    /// passes gradient where `0 <= x + xi <= 1`.
    pub fn patch_gradient(&self, grad_x: &[f64], x: &[f64], patch: &Patch, r: Placement, image: [usize; 3]) -> Result<Tensor> {
        let shape = self.patch_shape(image);
        let mut out = vec![0.0; shape.iter().product()];
        match *self {
            PerturbationSpec::Patch { channels, height, width, .. } => {
                let (top, left) = self.window(image, r)?;
                let [_, h, w] = image;
                for c in 0..channels {
                    for i in 0..height {
                        let src = (c * h + top + i) * w + left;
                        let dst = (c * height + i) * width;
                        out[dst..dst + width].copy_from_slice(&grad_x[src..src + width]);
                    }
                }
            }
            PerturbationSpec::Additive { .. } => {
                for (((o, g), xv), p) in out.iter_mut().zip(grad_x).zip(x).zip(patch.data()) {
                    let v = xv + p;
                    *o = if (0.0..=1.0).contains(&v) { *g } else { 0.0 };
                }
            }
        }
        Ok(Tensor::from_parts(shape, out))
    }

    fn check_patch(&self, patch: &Patch, image: [usize; 3]) -> Result<()> {
        if patch.shape() != self.patch_shape(image).as_slice() {
            return Err(Error::shape(
                "patch",
                format!("{:?}, expected {:?}", patch.shape(), self.patch_shape(image)),
            ));
        }
        Ok(())
    }

    fn mode_byte(&self) -> u8 {
        match self {
            PerturbationSpec::Patch { .. } => 0,
            PerturbationSpec::Additive { .. } => 1,
        }
    }
}

pub(crate) fn batch_shape(shape: &[usize]) -> Result<(usize, [usize; 3])> {
    match *shape {
        [n, c, h, w] => Ok((n, [c, h, w])),
        ref s => Err(Error::shape("batch", format!("expected [N, C, H, W], got {s:?}"))),
    }
}

pub(crate) fn image_shape(shape: &[usize]) -> Result<[usize; 3]> {
    match *shape {
        [c, h, w] => Ok([c, h, w]),
        ref s => Err(Error::shape("image", format!("expected [C, H, W], got {s:?}"))),
    }
}

/// Serializes a patch: 8-byte magic, mode byte (0 patch, 1 additive), rank
/// byte, u32 LE dimensions, then f64 LE values.
pub fn encode_patch(patch: &Patch, spec: &PerturbationSpec) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + patch.data().len() * 8);
    out.extend_from_slice(PATCH_MAGIC);
    out.push(spec.mode_byte());
    out.push(patch.shape().len() as u8);
    for &d in patch.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in patch.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses [`encode_patch`] output and checks it against `spec`.
pub fn decode_patch(origin: &Path, bytes: &[u8], spec: &PerturbationSpec, image: [usize; 3]) -> Result<Patch> {
    let bad = |d: String| Error::format(origin, d);
    if bytes.len() < 10 || &bytes[..8] != PATCH_MAGIC {
        return Err(bad("bad magic".into()));
    }
    if bytes[8] != spec.mode_byte() {
        return Err(bad(format!("mode byte {} does not match {} mode", bytes[8], spec.mode_name())));
    }
    let rank = bytes[9] as usize;
    let header = 10 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated shape header".into()));
    }
    let shape: Vec<usize> = bytes[10..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let payload = &bytes[header..];
    if payload.len() != shape.iter().product::<usize>() * 8 {
        return Err(bad("payload length does not match shape".into()));
    }
    let values = Tensor::new(shape, io::read_f64s(payload)).map_err(|e| bad(e.to_string()))?;
    Patch::new(values, spec, image).map_err(|e| bad(e.to_string()))
}

pub fn save_patch(path: &Path, patch: &Patch, spec: &PerturbationSpec) -> Result<()> {
    io::write_file(path, &encode_patch(patch, spec))
}

pub fn load_patch(path: &Path, spec: &PerturbationSpec, image: [usize; 3]) -> Result<Patch> {
    decode_patch(path, &io::read_file(path)?, spec, image)
}

/// Writes a patch as an 8-bit PPM (3 channels) or PGM (1 channel). Additive
/// perturbations are mapped from `[-eps, eps]` to the full intensity range.
pub fn export_ppm(path: &Path, patch: &Patch, spec: &PerturbationSpec) -> Result<()> {
    let (lo, hi) = spec.bounds();
    let shown = patch.tensor().map(|v| (v - lo) / (hi - lo));
    ppm::write(path, &shown)
}
