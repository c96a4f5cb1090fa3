//! Image datasets: a synthetic corpus of Gaussian shapes with exact
//! keypoints, and folders of PNG/JPEG files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Real, Tensor};

/// Row-major RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Image {
            height,
            width,
            data: rgb.iter().copied().cycle().take(height * width * 3).collect(),
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn hflip(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(&self.pixel(y, x));
            }
        }
        Image {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// From a `[H, W, 3]` tensor, clamping into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        match t.shape() {
            [h, w, 3] => Image::new(
                *h,
                *w,
                t.data().iter().map(|v| v.as_f64().clamp(0.0, 1.0) as f32).collect(),
            ),
            s => Err(Error::invalid(format!("expected [H, W, 3] image, got {s:?}"))),
        }
    }

    /// Split a `[B, H, W, 3]` batch into images.
    pub fn from_batch<T: Real>(t: &Tensor<T>) -> Result<Vec<Image>> {
        let s = t.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::invalid(format!("expected [B, H, W, 3] batch, got {s:?}")));
        }
        let n = s[1] * s[2] * 3;
        t.data()
            .chunks(n)
            .map(|c| {
                Image::new(
                    s[1],
                    s[2],
                    c.iter().map(|v| v.as_f64().clamp(0.0, 1.0) as f32).collect(),
                )
            })
            .collect()
    }

    /// Stack same-sized images into `[B, H, W, 3]`.
    pub fn to_batch<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("cannot batch zero images"))?;
        let (h, w) = (first.height, first.width);
        if images.iter().any(|i| i.height != h || i.width != w) {
            return Err(Error::invalid("images in a batch must share one size"));
        }
        let data = images
            .iter()
            .flat_map(|i| i.data.iter().map(|&v| T::of(v as f64)))
            .collect();
        Ok(Tensor::new(vec![images.len(), h, w, 3], data))
    }

    /// Brightness-weighted centroid in `[0, 1]²` coordinates, or the
    /// image centre for an all-black image.
    pub fn center_of_mass(&self) -> [f64; 2] {
        let (mut sx, mut sy, mut total) = (0.0f64, 0.0f64, 0.0f64);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.pixel(y, x);
                let v = (p[0] + p[1] + p[2]) as f64;
                sx += v * (x as f64 + 0.5) / self.width as f64;
                sy += v * (y as f64 + 0.5) / self.height as f64;
                total += v;
            }
        }
        if total <= 0.0 {
            [0.5, 0.5]
        } else {
            [sx / total, sy / total]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// Isotropic Gaussian.
    Blob,
    /// Rotated anisotropic Gaussian.
    Ellipse,
    #[default]
    Mixed,
}

/// Generator of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticShapeSpec {
    pub resolution: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub kind: ShapeKind,
    /// Range of the Gaussian standard deviation, as a fraction of the side.
    pub sigma_range: [f64; 2],
    /// Range of each colour channel.
    pub color_range: [f64; 2],
    /// Range of centre coordinates.
    pub position_range: [f64; 2],
    /// Set from the root seed rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SyntheticShapeSpec {
    fn default() -> Self {
        SyntheticShapeSpec {
            resolution: 32,
            min_shapes: 1,
            max_shapes: 3,
            kind: ShapeKind::Mixed,
            sigma_range: [0.06, 0.14],
            color_range: [0.35, 1.0],
            position_range: [0.2, 0.8],
            seed: 0,
        }
    }
}

impl SyntheticShapeSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if self.resolution == 0
            || self.min_shapes == 0
            || self.min_shapes > self.max_shapes
            || !ordered(self.sigma_range)
            || self.sigma_range[0] <= 0.0
            || !ordered(self.color_range)
            || self.color_range[0] < 0.0
            || self.color_range[1] > 1.0
            || !ordered(self.position_range)
            || self.position_range[0] < 0.0
            || self.position_range[1] > 1.0
        {
            return Err(Error::invalid(format!("invalid synthetic spec {self:?}")));
        }
        Ok(())
    }
}

/// One rendered shape; all lengths in unit-square coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub center: [f64; 2],
    pub sigma: [f64; 2],
    pub angle: f64,
    pub color: [f64; 3],
}

impl Shape {
    /// Opacity at `p`: a Gaussian bump equal to 1 at the centre.
    pub fn alpha(&self, p: [f64; 2]) -> f64 {
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (-0.5 * ((u / self.sigma[0]).powi(2) + (v / self.sigma[1]).powi(2))).exp()
    }

    /// Opacity sampled at pixel centres.
    pub fn mask(&self, resolution: usize) -> Vec<f64> {
        let r = resolution as f64;
        (0..resolution * resolution)
            .map(|i| {
                let (y, x) = (i / resolution, i % resolution);
                self.alpha([(x as f64 + 0.5) / r, (y as f64 + 0.5) / r])
            })
            .collect()
    }
}

/// Shapes composited in order over black with alpha blending.
pub fn render(shapes: &[Shape], resolution: usize) -> Image {
    let mut img = Image::filled(resolution, resolution, [0.0; 3]);
    let mut acc = vec![0.0f64; resolution * resolution * 3];
    for s in shapes {
        for (i, a) in s.mask(resolution).into_iter().enumerate() {
            for c in 0..3 {
                let v = &mut acc[i * 3 + c];
                *v = s.color[c] * a + *v * (1.0 - a);
            }
        }
    }
    for (d, v) in img.data.iter_mut().zip(acc) {
        *d = v.clamp(0.0, 1.0) as f32;
    }
    img
}

/// An in-memory dataset of square images.
#[derive(Debug, Clone)]
pub struct ImageDataset {
    pub resolution: usize,
    pub images: Vec<Image>,
    pub augment_hflip: bool,
    /// Per-image shape centres, for synthetic corpora.
    pub keypoints: Option<Vec<Vec<[f64; 2]>>>,
    /// Files skipped during loading.
    pub skipped: Vec<PathBuf>,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Batch for training step `step`: indices drawn uniformly and a flip
    /// mask, both from the `(seed, "batch", step)` stream.
    pub fn batch<T: Real>(&self, size: usize, seed: u64, step: u64) -> Result<Tensor<T>> {
        if self.is_empty() || size == 0 {
            return Err(Error::invalid("batch from an empty dataset or of size zero"));
        }
        let mut rng = seed::stream(seed, "batch", step);
        let picks: Vec<(usize, bool)> = (0..size)
            .map(|_| {
                let i = rng.random_range(0..self.len());
                let flip = self.augment_hflip && rng.random::<bool>();
                (i, flip)
            })
            .collect();
        let flipped: Vec<Image> = picks
            .iter()
            .map(|&(i, f)| if f { self.images[i].hflip() } else { self.images[i].clone() })
            .collect();
        Image::to_batch(&flipped.iter().collect::<Vec<_>>())
    }

    /// Deterministic permutation of all indices.
    pub fn order(&self, seed: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seed::stream(seed, "order", 0));
        idx
    }

    /// Keypoint table as CSV: `image_index, kp0_x, kp0_y, ...`; images
    /// with fewer shapes leave trailing cells empty.
    pub fn keypoints_csv(&self) -> Result<String> {
        let kps = self
            .keypoints
            .as_ref()
            .ok_or_else(|| Error::invalid("dataset has no keypoints"))?;
        let width = kps.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = String::from("image_index");
        for k in 0..width {
            write!(out, ",kp{k}_x,kp{k}_y").unwrap();
        }
        out.push('\n');
        for (i, row) in kps.iter().enumerate() {
            write!(out, "{i}").unwrap();
            for k in 0..width {
                match row.get(k) {
                    Some(p) => write!(out, ",{},{}", p[0], p[1]).unwrap(),
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// Sample the shapes of image `index` of the corpus.
pub fn sample_shapes(spec: &SyntheticShapeSpec, index: u64) -> Vec<Shape> {
    let mut rng = seed::stream(spec.seed, "synthetic", index);
    let count = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let uni = |rng: &mut rand_chacha::ChaCha8Rng, r: [f64; 2]| {
        if r[0] == r[1] {
            r[0]
        } else {
            rng.random_range(r[0]..r[1])
        }
    };
    (0..count)
        .map(|_| {
            let center = [uni(&mut rng, spec.position_range), uni(&mut rng, spec.position_range)];
            let s0 = uni(&mut rng, spec.sigma_range);
            let ellipse = match spec.kind {
                ShapeKind::Blob => false,
                ShapeKind::Ellipse => true,
                ShapeKind::Mixed => rng.random::<bool>(),
            };
            let (sigma, angle) = if ellipse {
                let s1 = uni(&mut rng, spec.sigma_range);
                ([s0, s1], rng.random_range(0.0..std::f64::consts::PI))
            } else {
                ([s0, s0], 0.0)
            };
            let color = [
                uni(&mut rng, spec.color_range),
                uni(&mut rng, spec.color_range),
                uni(&mut rng, spec.color_range),
            ];
            Shape {
                center,
                sigma,
                angle,
                color,
            }
        })
        .collect()
}

/// Render `count` images with their keypoint table.
pub fn make_synthetic(spec: &SyntheticShapeSpec, count: usize, augment_hflip: bool) -> Result<ImageDataset> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::invalid("synthetic corpus needs at least one image"));
    }
    let mut images = Vec::with_capacity(count);
    let mut keypoints = Vec::with_capacity(count);
    for i in 0..count {
        let shapes = sample_shapes(spec, i as u64);
        images.push(render(&shapes, spec.resolution));
        keypoints.push(shapes.iter().map(|s| s.center).collect());
    }
    Ok(ImageDataset {
        resolution: spec.resolution,
        images,
        augment_hflip,
        keypoints: Some(keypoints),
        skipped: Vec::new(),
    })
}

/// Mirror keypoints the way [`Image::hflip`] mirrors pixels.
pub fn hflip_keypoints(kps: &[[f64; 2]]) -> Vec<[f64; 2]> {
    kps.iter().map(|p| [1.0 - p[0], p[1]]).collect()
}

/// Centre-crop to a square and resize with bilinear filtering.
pub fn square_resize(img: &image::RgbImage, resolution: usize) -> Image {
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let cropped = image::imageops::crop_imm(img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let r = resolution as u32;
    let sized = if side == r {
        cropped
    } else {
        image::imageops::resize(&cropped, r, r, image::imageops::FilterType::Triangle)
    };
    Image {
        height: resolution,
        width: resolution,
        data: sized.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
    }
}

/// Every decodable image directly inside `path`, in file-name order.
pub fn load_folder(path: &Path, resolution: usize, augment_hflip: bool) -> Result<ImageDataset> {
    if resolution == 0 {
        return Err(Error::invalid("resolution must be positive"));
    }
    let entries = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for f in files {
        match image::open(&f) {
            Ok(img) => images.push(square_resize(&img.to_rgb8(), resolution)),
            Err(e) => {
                log::warn!("skipping {}: {e}", f.display());
                skipped.push(f);
            }
        }
    }
    if images.is_empty() {
        let listed: Vec<String> = skipped.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::Ingestion {
            path: path.to_path_buf(),
            message: if listed.is_empty() {
                "no files".into()
            } else {
                format!("no decodable images; rejected: {}", listed.join(", "))
            },
        });
    }
    Ok(ImageDataset {
        resolution,
        images,
        augment_hflip,
        keypoints: None,
        skipped,
    })
}
