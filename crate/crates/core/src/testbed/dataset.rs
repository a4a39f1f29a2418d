//! Synthetic two-concept dataset: flat colored shapes on flat backgrounds.
//!
//! Every image is a single parametric shape of a fixed per-concept color over
//! a per-image background color, so the foreground mask is exact by
//! construction. Colors are quantized to the 8-bit grid at generation time,
//! which makes disk round-trips lossless and same-seed regeneration
//! byte-identical.
//!
//! Images live on the same 16x16 grid as the latent space; pixels map to
//! latent rows in row-major order. Latent channels are `2(c - 1/2)` for RGB
//! plus the same affine map of luminance.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Mat;
use crate::{Error, Result, Scalar};

use super::{derive_seed, LATENT_CHANNELS, LATENT_PIXELS, LATENT_SIDE};

/// Parametric foreground shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Star,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] =
        [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Star, ShapeKind::Cross];

    fn covers(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Triangle => {
                let v = dy + r; // 0 at apex, 2r at base
                (0.0..=2.0 * r).contains(&v) && dx.abs() <= v / 2.0
            }
            ShapeKind::Star => {
                let up = dy + r;
                let down = r - dy;
                ((0.0..=2.0 * r).contains(&up) && dx.abs() <= up / 2.0)
                    || ((0.0..=2.0 * r).contains(&down) && dx.abs() <= down / 2.0)
            }
            ShapeKind::Cross => {
                let arm = (r / 3.0).max(1.0);
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Star => "star",
            ShapeKind::Cross => "cross",
        };
        f.write_str(s)
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "circle" => Ok(ShapeKind::Circle),
            "square" => Ok(ShapeKind::Square),
            "triangle" => Ok(ShapeKind::Triangle),
            "star" => Ok(ShapeKind::Star),
            "cross" => Ok(ShapeKind::Cross),
            other => Err(Error::config(format!("unknown shape '{other}'"))),
        }
    }
}

/// Appearance of one concept in the dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConceptImageSpec {
    /// Concept name as used in prompts (`<name>`).
    pub name: String,
    /// Base-vocabulary class word.
    pub class_word: String,
    pub shape: ShapeKind,
    /// Foreground RGB in `[0, 1]`.
    pub color: [f64; 3],
}

/// What to generate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub concepts: Vec<ConceptImageSpec>,
    pub images_per_concept: usize,
}

impl DatasetSpec {
    /// Two-concept default: a red circle and a blue square.
    pub fn default_pair(images_per_concept: usize) -> Self {
        DatasetSpec {
            concepts: vec![
                ConceptImageSpec {
                    name: "ciroA".into(),
                    class_word: "circle".into(),
                    shape: ShapeKind::Circle,
                    color: [0.85, 0.1, 0.1],
                },
                ConceptImageSpec {
                    name: "quadB".into(),
                    class_word: "square".into(),
                    shape: ShapeKind::Square,
                    color: [0.1, 0.2, 0.9],
                },
            ],
            images_per_concept,
        }
    }
}

/// One (image, mask, prompt) triple.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem<S: Scalar> {
    /// `256 x 3` RGB in `[0, 1]`, rows in row-major grid order.
    pub image: Mat<S>,
    /// `256 x 1`, exactly 0 or 1.
    pub mask: Mat<S>,
    pub prompt: String,
    pub concept: String,
}

/// A generated or loaded dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConceptDataset<S: Scalar> {
    pub items: Vec<DatasetItem<S>>,
}

impl<S: Scalar> SynthConceptDataset<S> {
    /// Items belonging to one concept.
    pub fn for_concept(&self, name: &str) -> Vec<&DatasetItem<S>> {
        self.items.iter().filter(|it| it.concept == name).collect()
    }
}

fn quantize<S: Scalar>(v: f64) -> S {
    S::of((v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Maps an RGB image (`256 x 3`) into the `256 x 4` latent space.
pub fn latent_from_image<S: Scalar>(image: &Mat<S>) -> Mat<S> {
    assert_eq!(image.shape(), (LATENT_PIXELS, 3), "image shape");
    let half = S::of(0.5);
    let two = S::of(2.0);
    Mat::from_fn(LATENT_PIXELS, LATENT_CHANNELS, |i, j| {
        if j < 3 {
            two * (image[(i, j)] - half)
        } else {
            let lum = S::of(0.2126) * image[(i, 0)]
                + S::of(0.7152) * image[(i, 1)]
                + S::of(0.0722) * image[(i, 2)];
            two * (lum - half)
        }
    })
}

/// Maps a latent back to a clamped RGB image (`256 x 3`).
pub fn image_from_latent<S: Scalar>(z: &Mat<S>) -> Mat<S> {
    assert_eq!(z.shape(), (LATENT_PIXELS, LATENT_CHANNELS), "latent shape");
    let half = S::of(0.5);
    Mat::from_fn(LATENT_PIXELS, 3, |i, j| (z[(i, j)] * half + half).clamp(S::zero(), S::one()))
}

fn render_item<S: Scalar>(
    spec: &ConceptImageSpec,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> DatasetItem<S> {
    let side = LATENT_SIDE;
    // flat background, kept away from the foreground color
    let bg = loop {
        let c = [
            rng.gen_range(0u32..=255) as f64 / 255.0,
            rng.gen_range(0u32..=255) as f64 / 255.0,
            rng.gen_range(0u32..=255) as f64 / 255.0,
        ];
        let d2: f64 =
            (0..3).map(|k| (c[k] - spec.color[k]) * (c[k] - spec.color[k])).sum();
        if d2 > 0.08 {
            break c;
        }
    };
    let r = rng.gen_range(3..=5) as f64;
    let margin = r.ceil() as usize + 1;
    let cx = rng.gen_range(margin..side - margin) as f64;
    let cy = rng.gen_range(margin..side - margin) as f64;

    let mut image = Mat::zeros(LATENT_PIXELS, 3);
    let mut mask = Mat::zeros(LATENT_PIXELS, 1);
    for y in 0..side {
        for x in 0..side {
            let i = y * side + x;
            let inside = spec.shape.covers(x as f64 - cx, y as f64 - cy, r);
            let color = if inside { &spec.color } else { &bg };
            for j in 0..3 {
                image[(i, j)] = quantize::<S>(color[j]);
            }
            mask[(i, 0)] = if inside { S::one() } else { S::zero() };
        }
    }
    let article = ["a photo of", "a picture of", "an image of"][index % 3];
    DatasetItem {
        image,
        mask,
        prompt: format!("{article} <{}>", spec.name),
        concept: spec.name.clone(),
    }
}

/// Generates the dataset deterministically from `seed`.
pub fn make_dataset<S: Scalar>(spec: &DatasetSpec, seed: u64) -> Result<SynthConceptDataset<S>> {
    if spec.concepts.is_empty() {
        return Err(Error::config("dataset spec lists no concepts"));
    }
    if spec.images_per_concept == 0 {
        return Err(Error::config("images_per_concept must be at least 1"));
    }
    for c in &spec.concepts {
        if c.color.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::config(format!("concept '{}' color outside [0, 1]", c.name)));
        }
    }
    let mut items = Vec::with_capacity(spec.concepts.len() * spec.images_per_concept);
    for (ci, c) in spec.concepts.iter().enumerate() {
        for i in 0..spec.images_per_concept {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                (ci * 10_000 + i) as u64,
            ));
            items.push(render_item(c, i, &mut rng));
        }
    }
    Ok(SynthConceptDataset { items })
}

fn to_u8<S: Scalar>(v: S) -> u8 {
    (v.to_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an RGB matrix (`256 x 3`) as a PNG.
pub fn save_image_png<S: Scalar>(image: &Mat<S>, path: &Path) -> Result<()> {
    let side = LATENT_SIDE as u32;
    let img = image::RgbImage::from_fn(side, side, |x, y| {
        let i = (y * side + x) as usize;
        image::Rgb([to_u8(image[(i, 0)]), to_u8(image[(i, 1)]), to_u8(image[(i, 2)])])
    });
    img.save(path)?;
    Ok(())
}

fn save_mask_png<S: Scalar>(mask: &Mat<S>, path: &Path) -> Result<()> {
    let side = LATENT_SIDE as u32;
    let img = image::GrayImage::from_fn(side, side, |x, y| {
        let i = (y * side + x) as usize;
        image::Luma([to_u8(mask[(i, 0)])])
    });
    img.save(path)?;
    Ok(())
}

/// Reads an RGB PNG back into a `256 x 3` matrix in `[0, 1]`.
pub fn load_image_png<S: Scalar>(path: &Path) -> Result<Mat<S>> {
    let img = image::open(path)?.to_rgb8();
    if (img.width(), img.height()) != (LATENT_SIDE as u32, LATENT_SIDE as u32) {
        return Err(Error::data(format!(
            "{}: expected {LATENT_SIDE}x{LATENT_SIDE} image, got {}x{}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    Ok(Mat::from_fn(LATENT_PIXELS, 3, |i, j| {
        let (x, y) = ((i % LATENT_SIDE) as u32, (i / LATENT_SIDE) as u32);
        S::of(img.get_pixel(x, y).0[j] as f64 / 255.0)
    }))
}

/// Reads a grayscale PNG into a `256 x 1` matrix in `[0, 1]`.
pub fn load_gray_png<S: Scalar>(path: &Path) -> Result<Mat<S>> {
    let img = image::open(path)?.to_luma8();
    if (img.width(), img.height()) != (LATENT_SIDE as u32, LATENT_SIDE as u32) {
        return Err(Error::data(format!(
            "{}: expected {LATENT_SIDE}x{LATENT_SIDE} mask, got {}x{}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    Ok(Mat::from_fn(LATENT_PIXELS, 1, |i, _| {
        let (x, y) = ((i % LATENT_SIDE) as u32, (i / LATENT_SIDE) as u32);
        S::of(img.get_pixel(x, y).0[0] as f64 / 255.0)
    }))
}

impl<S: Scalar> SynthConceptDataset<S> {
    /// Writes images, masks, and a line-per-image index under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("masks"))?;
        let mut index = String::new();
        for (i, item) in self.items.iter().enumerate() {
            let image_rel = format!("images/{}_{i:03}.png", item.concept);
            let mask_rel = format!("masks/{}_{i:03}.png", item.concept);
            save_image_png(&item.image, &dir.join(&image_rel))?;
            save_mask_png(&item.mask, &dir.join(&mask_rel))?;
            index.push_str(&format!(
                "{image_rel}\t{mask_rel}\t{}\t{}\n",
                item.concept, item.prompt
            ));
        }
        fs::write(dir.join("index.txt"), index)?;
        Ok(())
    }

    /// Loads a dataset previously written by [`save`](Self::save).
    pub fn load(dir: &Path) -> Result<Self> {
        let index = fs::read_to_string(dir.join("index.txt"))?;
        let mut items = Vec::new();
        for (lineno, line) in index.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.splitn(4, '\t').collect();
            if parts.len() != 4 {
                return Err(Error::data(format!(
                    "index.txt line {}: expected 4 tab-separated fields",
                    lineno + 1
                )));
            }
            let image = load_image_png(&dir.join(parts[0]))?;
            let mask = load_gray_png(&dir.join(parts[1]))?;
            items.push(DatasetItem {
                image,
                mask,
                concept: parts[2].to_string(),
                prompt: parts[3].to_string(),
            });
        }
        Ok(SynthConceptDataset { items })
    }
}
