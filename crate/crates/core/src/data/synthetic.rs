//! Deterministic synthetic stand-ins for the fish datasets.
//!
//! Backgrounds are grayscale clutter (every pixel has R = G = B). Fish are
//! filled ellipses or rectangles painted in two saturated tones of a
//! species-specific hue, striped at a species-specific angle, so the
//! species can be told apart and fish pixels can be recovered by a
//! saturation test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Label, LabeledImage, Provenance};
use super::image::Image;
use crate::detect::BoundingBox;
use crate::error::{Error, Result};
use crate::seeds::derive_seed;

/// Minimum channel spread (max - min) of every painted fish pixel.
pub const FISH_SATURATION: u8 = 90;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FishShape {
    Ellipse,
    Rectangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Species {
    pub hue: u16,
    pub stripe_angle: u16,
}

/// Appearance of species `index` among `count`: hues spread around the
/// wheel, stripes cycling through four orientations.
pub fn species(index: usize, count: usize) -> Species {
    let count = count.max(1);
    Species {
        hue: ((index * 360) / count) as u16,
        stripe_angle: ((index % 4) * 45) as u16,
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h / 60.0) % 6.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn gray_clutter(width: usize, height: usize, rng: &mut ChaCha8Rng) -> Image {
    let base: f64 = rng.random_range(60.0..180.0);
    let mut plane = vec![base; width * height];
    for _ in 0..rng.random_range(3..9) {
        let w = rng.random_range(2..=width.max(3) / 3 + 2);
        let h = rng.random_range(2..=height.max(3) / 3 + 2);
        let x0 = rng.random_range(0..width);
        let y0 = rng.random_range(0..height);
        let v: f64 = rng.random_range(30.0..220.0);
        for y in y0..(y0 + h).min(height) {
            for x in x0..(x0 + w).min(width) {
                plane[y * width + x] = v;
            }
        }
    }
    let data = plane
        .iter()
        .flat_map(|&v| {
            let g = (v + rng.random_range(-15.0..15.0)).round().clamp(0.0, 255.0) as u8;
            [g, g, g]
        })
        .collect();
    Image { width, height, data }
}

fn inside(shape: FishShape, x0: usize, y0: usize, w: usize, h: usize, x: usize, y: usize) -> bool {
    match shape {
        FishShape::Rectangle => true,
        FishShape::Ellipse => {
            let dx = (x as f64 + 0.5 - x0 as f64 - w as f64 / 2.0) / (w as f64 / 2.0);
            let dy = (y as f64 + 0.5 - y0 as f64 - h as f64 / 2.0) / (h as f64 / 2.0);
            dx * dx + dy * dy <= 1.0
        }
    }
}

/// Paints a fish over the `w x h` pixel block at `(x0, y0)` and returns the
/// tight bounds of the pixels actually painted.
fn paint_fish(img: &mut Image, sp: Species, shape: FishShape, x0: usize, y0: usize, w: usize, h: usize, rng: &mut ChaCha8Rng) -> BoundingBox {
    let light = hsv(sp.hue as f64, 1.0, 0.95);
    let dark = hsv(sp.hue as f64, 1.0, 0.6);
    let theta = (sp.stripe_angle as f64).to_radians();
    let (ct, st) = (theta.cos(), theta.sin());
    let period = (w.min(h) as f64 / 3.0).max(3.0);
    let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            if !inside(shape, x0, y0, w, h, x, y) {
                continue;
            }
            let u = ((x - x0) as f64 * ct + (y - y0) as f64 * st) / period;
            let base = if (u.floor() as i64).rem_euclid(2) == 0 { light } else { dark };
            let jitter: f64 = rng.random_range(-8.0..8.0);
            let mut px = [0u8; 3];
            for c in 0..3 {
                px[c] = (base[c] + jitter).round().clamp(0.0, 255.0) as u8;
            }
            img.set_pixel(x, y, px);
            bx0 = bx0.min(x);
            by0 = by0.min(y);
            bx1 = bx1.max(x + 1);
            by1 = by1.max(y + 1);
        }
    }
    BoundingBox {
        x_min: bx0 as f64,
        y_min: by0 as f64,
        x_max: bx1 as f64,
        y_max: by1 as f64,
    }
}

fn random_shape(rng: &mut ChaCha8Rng) -> FishShape {
    if rng.random_bool(0.5) {
        FishShape::Ellipse
    } else {
        FishShape::Rectangle
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSynth {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
}

/// One fish per image filling most of the frame, like a detector crop.
pub fn generate_classification(cfg: &ClassificationSynth, seed: u64) -> Result<Dataset> {
    if cfg.classes < 2 || cfg.per_class == 0 || cfg.image_size < 8 {
        return Err(Error::Config(format!("invalid synthetic classification config {cfg:?}")));
    }
    let s = cfg.image_size;
    let mut samples = Vec::with_capacity(cfg.classes * cfg.per_class);
    for c in 0..cfg.classes {
        for k in 0..cfg.per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (c * cfg.per_class + k) as u64));
            let mut img = gray_clutter(s, s, &mut rng);
            let margin = (s / 10).max(1);
            let l = rng.random_range(0..=margin);
            let t = rng.random_range(0..=margin);
            let w = s - l - rng.random_range(0..=margin);
            let h = s - t - rng.random_range(0..=margin);
            let shape = random_shape(&mut rng);
            paint_fish(&mut img, species(c, cfg.classes), shape, l, t, w, h, &mut rng);
            samples.push(LabeledImage {
                id: format!("syn_c{c:02}_{k:04}"),
                image: img,
                label: Label::Class(c),
                provenance: Provenance::Unsplit,
            });
        }
    }
    Dataset::new((0..cfg.classes).map(|c| format!("species_{c:02}")).collect(), samples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSynth {
    pub images: usize,
    pub image_size: usize,
    pub min_fish: usize,
    pub max_fish: usize,
    /// Fish edge lengths are drawn from this range (pixels).
    pub min_extent: usize,
    pub max_extent: usize,
    /// Number of species to draw fish from.
    pub species: usize,
}

impl DetectionSynth {
    pub fn new(images: usize) -> Self {
        Self {
            images,
            image_size: 128,
            min_fish: 1,
            max_fish: 4,
            min_extent: 18,
            max_extent: 48,
            species: 1,
        }
    }
}

/// Detection frames plus the species of every annotated fish.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDetection {
    pub dataset: Dataset,
    /// `species[i][j]` is the species index of box `j` in image `i`.
    pub species: Vec<Vec<usize>>,
}

fn overlaps(a: &BoundingBox, b: &BoundingBox, gap: f64) -> bool {
    a.x_min < b.x_max + gap && b.x_min < a.x_max + gap && a.y_min < b.y_max + gap && b.y_min < a.y_max + gap
}

pub fn generate_detection(cfg: &DetectionSynth, seed: u64) -> Result<SyntheticDetection> {
    let s = cfg.image_size;
    if cfg.min_fish == 0 && cfg.max_fish == 0
        || cfg.min_fish > cfg.max_fish
        || cfg.min_extent < 2
        || cfg.min_extent > cfg.max_extent
        || cfg.max_extent > s
        || cfg.species == 0
    {
        return Err(Error::Config(format!("invalid synthetic detection config {cfg:?}")));
    }
    let mut samples = Vec::with_capacity(cfg.images);
    let mut species_out = Vec::with_capacity(cfg.images);
    for i in 0..cfg.images {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let mut img = gray_clutter(s, s, &mut rng);
        let want = rng.random_range(cfg.min_fish..=cfg.max_fish);
        let mut placed: Vec<BoundingBox> = Vec::new();
        let mut boxes = Vec::new();
        let mut kinds = Vec::new();
        for _ in 0..want {
            for _attempt in 0..50 {
                let w = rng.random_range(cfg.min_extent..=cfg.max_extent);
                let h = rng.random_range(cfg.min_extent..=cfg.max_extent);
                let x0 = rng.random_range(0..=s - w);
                let y0 = rng.random_range(0..=s - h);
                let block = BoundingBox {
                    x_min: x0 as f64,
                    y_min: y0 as f64,
                    x_max: (x0 + w) as f64,
                    y_max: (y0 + h) as f64,
                };
                if placed.iter().any(|p| overlaps(p, &block, 3.0)) {
                    continue;
                }
                let k = rng.random_range(0..cfg.species);
                let shape = random_shape(&mut rng);
                boxes.push(paint_fish(&mut img, species(k, cfg.species), shape, x0, y0, w, h, &mut rng));
                kinds.push(k);
                placed.push(block);
                break;
            }
        }
        samples.push(LabeledImage {
            id: format!("frame_{i:05}"),
            image: img,
            label: Label::Boxes(boxes),
            provenance: Provenance::Unsplit,
        });
        species_out.push(kinds);
    }
    let names = if cfg.species == 1 {
        vec!["fish".to_string()]
    } else {
        (0..cfg.species).map(|c| format!("species_{c:02}")).collect()
    };
    Ok(SyntheticDetection {
        dataset: Dataset::new(names, samples)?,
        species: species_out,
    })
}

/// One classification sample per annotated fish: the crop of its box,
/// labeled with its species. Each box edge is moved by up to `jitter` times
/// the box extent (0 crops exactly), which mimics imprecise detector boxes.
/// Ids are `"{frame}_fish{j}"`.
pub fn species_crops(syn: &SyntheticDetection, jitter: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..0.5).contains(&jitter) {
        return Err(Error::Config(format!("crop jitter must be in [0, 0.5), got {jitter}")));
    }
    let k = syn.species.iter().flatten().max().map_or(1, |m| m + 1);
    let names = (0..k.max(syn.dataset.class_names.len())).map(|c| format!("species_{c:02}")).collect();
    let mut samples = Vec::new();
    for (i, (s, kinds)) in syn.dataset.samples.iter().zip(&syn.species).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let boxes = s.boxes().unwrap_or_default();
        for (j, (b, &kind)) in boxes.iter().zip(kinds).enumerate() {
            let (w, h) = (b.width(), b.height());
            let mut d = || if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
            let moved = BoundingBox {
                x_min: b.x_min + d() * w,
                y_min: b.y_min + d() * h,
                x_max: b.x_max + d() * w,
                y_max: b.y_max + d() * h,
            }
            .clamp(s.image.width as f64, s.image.height as f64);
            samples.push(LabeledImage {
                id: format!("{}_fish{j}", s.id),
                image: s.image.crop(&moved),
                label: Label::Class(kind),
                provenance: Provenance::Unsplit,
            });
        }
    }
    Dataset::new(names, samples)
}
