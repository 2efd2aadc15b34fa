//! Label-preserving image augmentation and eager training-set expansion.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::image::to_u8;
use crate::data::{DatasetSplit, Image, Label, LabeledImage, Provenance};
use crate::error::{Error, Result};
use crate::par;
use crate::seeds::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Rotation drawn uniformly from `[-r, r]` degrees.
    pub rotation_range_degrees: f64,
    /// Shifts drawn uniformly from `[-f, f]` of the image extent, per axis.
    pub shift_fraction: f64,
    pub scale_range: (f64, f64),
    /// Horizontal shear angle drawn uniformly from `[-s, s]` degrees.
    pub shear_degrees: f64,
    pub flip_probability: f64,
    pub expansion_factor: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_range_degrees: 20.0,
            shift_fraction: 0.1,
            scale_range: (0.9, 1.1),
            shear_degrees: 10.0,
            flip_probability: 0.5,
            expansion_factor: 2,
        }
    }
}

impl AugmentConfig {
    /// All ranges zero, no flipping.
    pub fn identity() -> Self {
        Self {
            rotation_range_degrees: 0.0,
            shift_fraction: 0.0,
            scale_range: (1.0, 1.0),
            shear_degrees: 0.0,
            flip_probability: 0.0,
            expansion_factor: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation_range_degrees >= 0.0
            && (0.0..1.0).contains(&self.shift_fraction)
            && self.scale_range.0 > 0.0
            && self.scale_range.0 <= self.scale_range.1
            && (0.0..90.0).contains(&self.shear_degrees)
            && (0.0..=1.0).contains(&self.flip_probability)
            && self.expansion_factor >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation config {self:?}")))
        }
    }
}

/// One concrete draw of the augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    /// Counter-clockwise as displayed.
    pub rotation_degrees: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub scale: f64,
    pub shear_degrees: f64,
    pub flip: bool,
}

impl AffineParams {
    pub const IDENTITY: Self = Self {
        rotation_degrees: 0.0,
        shift_x: 0.0,
        shift_y: 0.0,
        scale: 1.0,
        shear_degrees: 0.0,
        flip: false,
    };
}

/// Draws parameters for an image of `width` x `height`. Every field is
/// drawn on every call so that the stream stays aligned across configs.
pub fn sample_params(config: &AugmentConfig, width: usize, height: usize, rng: &mut dyn RngCore) -> AffineParams {
    let r = config.rotation_range_degrees;
    let f = config.shift_fraction;
    let s = config.shear_degrees;
    let rotation_degrees = rng.random_range(-r..=r);
    let shift_x = rng.random_range(-f..=f) * width as f64;
    let shift_y = rng.random_range(-f..=f) * height as f64;
    let scale = rng.random_range(config.scale_range.0..=config.scale_range.1);
    let shear_degrees = rng.random_range(-s..=s);
    let flip = rng.random_bool(config.flip_probability);
    AffineParams {
        rotation_degrees,
        shift_x,
        shift_y,
        scale,
        shear_degrees,
        flip,
    }
}

/// Applies rotation, shear, and scale about the image center, then the
/// shift, as one inverse-mapped transform with bilinear sampling and
/// replicated edges. The flip comes last.
pub fn apply_affine(image: &Image, p: &AffineParams) -> Image {
    let (w, h) = (image.width, image.height);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    // Forward map on offsets from the center: rotate(shear(scale * v)).
    let th = p.rotation_degrees.to_radians();
    let (sin, cos) = th.sin_cos();
    let k = p.shear_degrees.to_radians().tan();
    let s = p.scale;
    let m = [[s * cos, s * (cos * k + sin)], [-s * sin, s * (cos - sin * k)]];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 + 0.5 - cx - p.shift_x;
            let dy = y as f64 + 0.5 - cy - p.shift_y;
            let sx = cx + inv[0][0] * dx + inv[0][1] * dy;
            let sy = cy + inv[1][0] * dx + inv[1][1] * dy;
            data.extend(image.sample_bilinear(sx, sy).iter().map(|&v| to_u8(v)));
        }
    }
    let out = Image { width: w, height: h, data };
    if p.flip {
        out.flip_horizontal()
    } else {
        out
    }
}

pub fn augment_image(image: &Image, config: &AugmentConfig, rng: &mut dyn RngCore) -> Image {
    let p = sample_params(config, image.width, image.height, rng);
    apply_affine(image, &p)
}

/// Adds `expansion_factor - 1` augmented copies of every training sample,
/// keeping the originals first. Copy `k` of sample `i` gets id
/// `"{id}#aug{k}"` and its own seed derived from `seed`, so the result does
/// not depend on thread scheduling. Validation and test are returned as is.
pub fn expand_dataset(split: &DatasetSplit, config: &AugmentConfig, seed: u64) -> Result<DatasetSplit> {
    config.validate()?;
    for s in &split.train {
        if s.provenance != Provenance::Train {
            return Err(Error::Data(format!(
                "refusing to augment {:?}: provenance is {:?}",
                s.id, s.provenance
            )));
        }
        if !matches!(s.label, Label::Class(_)) {
            return Err(Error::Data(format!("augmentation needs class labels, {:?} has boxes", s.id)));
        }
    }
    let n = split.train.len();
    let extra = (config.expansion_factor - 1) * n;
    let copies = par::map_range(extra, |j| {
        let (k, i) = (j / n + 1, j % n);
        let src = &split.train[i];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, j as u64));
        LabeledImage {
            id: format!("{}#aug{k}", src.id),
            image: augment_image(&src.image, config, &mut rng),
            label: src.label.clone(),
            provenance: Provenance::Train,
        }
    });
    let mut train = split.train.clone();
    train.extend(copies);
    Ok(DatasetSplit {
        class_names: split.class_names.clone(),
        train,
        val: split.val.clone(),
        test: split.test.clone(),
    })
}
