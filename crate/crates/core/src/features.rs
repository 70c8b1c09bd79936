//! Dense descriptor maps and attention heatmaps at three pyramid scales.
//!
//! A [`FeaturePyramid`] holds one [`DenseFeatureLevel`] per scale `s` in
//! `{2, 4, 8}`. Pyramids come either from the built-in gradient extractor or
//! from tensor files written by an external network (see [`import_pyramid`]).
//!
//! Pyramid file layout, little-endian throughout:
//!
//! ```text
//! "ALFP" | version u16 | image width u32 | image height u32
//! 3 x { scale u8 | width_s u32 | height_s u32 | D u8
//!       | descriptors f32 [v][u][d] | heatmap f32 [v][u] }
//! ```

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

/// Descriptor dimension.
pub const DESCRIPTOR_DIM: usize = 8;

/// Pyramid scales, fine to coarse.
pub const SCALES: [u8; 3] = [2, 4, 8];

/// Smallest accepted image side, in pixels.
pub const MIN_IMAGE_SIDE: u32 = 16;

const PYRAMID_MAGIC: &[u8; 4] = b"ALFP";
const PYRAMID_VERSION: u16 = 1;
const HEAT_SLACK: f32 = 1e-6;

/// One pyramid level: `height x width` descriptor cells and heatmap values.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFeatureLevel {
    scale: u8,
    width: usize,
    height: usize,
    descriptors: Vec<f32>,
    heatmap: Vec<f32>,
}

impl DenseFeatureLevel {
    pub fn zeros(scale: u8, width: usize, height: usize) -> Self {
        Self {
            scale,
            width,
            height,
            descriptors: vec![0.0; width * height * DESCRIPTOR_DIM],
            heatmap: vec![0.0; width * height],
        }
    }

    /// Build from raw row-major buffers, validating shapes and values.
    pub fn from_parts(
        scale: u8,
        width: usize,
        height: usize,
        descriptors: Vec<f32>,
        heatmap: Vec<f32>,
    ) -> Result<Self> {
        let level = Self {
            scale,
            width,
            height,
            descriptors,
            heatmap,
        };
        level.validate()?;
        Ok(level)
    }

    pub fn scale(&self) -> u8 {
        self.scale
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn descriptor(&self, u: usize, v: usize) -> &[f32] {
        let o = (v * self.width + u) * DESCRIPTOR_DIM;
        &self.descriptors[o..o + DESCRIPTOR_DIM]
    }

    #[inline]
    pub fn descriptor_mut(&mut self, u: usize, v: usize) -> &mut [f32] {
        let o = (v * self.width + u) * DESCRIPTOR_DIM;
        &mut self.descriptors[o..o + DESCRIPTOR_DIM]
    }

    #[inline]
    pub fn heat(&self, u: usize, v: usize) -> f32 {
        self.heatmap[v * self.width + u]
    }

    #[inline]
    pub fn set_heat(&mut self, u: usize, v: usize, value: f32) {
        self.heatmap[v * self.width + u] = value;
    }

    pub fn descriptors(&self) -> &[f32] {
        &self.descriptors
    }

    pub fn heatmap(&self) -> &[f32] {
        &self.heatmap
    }

    /// Check shapes, heatmap range (with `1e-6` slack) and finiteness.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str| format!("level s={} {name}", self.scale);
        if !SCALES.contains(&self.scale) {
            return Err(Error::format(field("scale"), format!("{} not in {{2,4,8}}", self.scale)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::format(field("dimensions"), "empty level"));
        }
        let cells = self.width * self.height;
        if self.descriptors.len() != cells * DESCRIPTOR_DIM {
            return Err(Error::format(
                field("descriptors"),
                format!("expected {} values, got {}", cells * DESCRIPTOR_DIM, self.descriptors.len()),
            ));
        }
        if self.heatmap.len() != cells {
            return Err(Error::format(
                field("heatmap"),
                format!("expected {cells} values, got {}", self.heatmap.len()),
            ));
        }
        if let Some(i) = self.descriptors.iter().position(|d| !d.is_finite()) {
            let cell = i / DESCRIPTOR_DIM;
            return Err(Error::format(
                field("descriptors"),
                format!("non-finite value at cell (u={}, v={})", cell % self.width, cell / self.width),
            ));
        }
        if let Some(i) = self
            .heatmap
            .iter()
            .position(|h| !(*h >= -HEAT_SLACK && *h <= 1.0 + HEAT_SLACK))
        {
            return Err(Error::format(
                field("heatmap"),
                format!(
                    "value {} outside [0,1] at cell index {i} (u={}, v={})",
                    self.heatmap[i],
                    i % self.width,
                    i / self.width
                ),
            ));
        }
        Ok(())
    }
}

/// Three levels at scales 2, 4 and 8 computed from one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    image_width: u32,
    image_height: u32,
    levels: [DenseFeatureLevel; 3],
}

impl FeaturePyramid {
    pub fn new(image_width: u32, image_height: u32, levels: [DenseFeatureLevel; 3]) -> Result<Self> {
        let p = Self {
            image_width,
            image_height,
            levels,
        };
        p.validate()?;
        Ok(p)
    }

    /// All-zero pyramid sized for an image.
    pub fn zeros(image_width: u32, image_height: u32) -> Self {
        let levels = SCALES.map(|s| {
            DenseFeatureLevel::zeros(s, (image_width / u32::from(s)) as usize, (image_height / u32::from(s)) as usize)
        });
        Self {
            image_width,
            image_height,
            levels,
        }
    }

    pub fn image_width(&self) -> u32 {
        self.image_width
    }

    pub fn image_height(&self) -> u32 {
        self.image_height
    }

    /// Levels ordered fine to coarse (s = 2, 4, 8).
    pub fn levels(&self) -> &[DenseFeatureLevel; 3] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [DenseFeatureLevel; 3] {
        &mut self.levels
    }

    pub fn level(&self, scale: u8) -> Option<&DenseFeatureLevel> {
        self.levels.iter().find(|l| l.scale == scale)
    }

    pub fn validate(&self) -> Result<()> {
        for (level, scale) in self.levels.iter().zip(SCALES) {
            if level.scale != scale {
                return Err(Error::format(
                    "levels",
                    format!("expected scale {scale}, found {}", level.scale),
                ));
            }
            let (w, h) = (
                (self.image_width / u32::from(scale)) as usize,
                (self.image_height / u32::from(scale)) as usize,
            );
            if level.width != w || level.height != h {
                return Err(Error::format(
                    format!("level s={scale} dimensions"),
                    format!(
                        "{}x{} inconsistent with image {}x{} (expected {w}x{h})",
                        level.width, level.height, self.image_width, self.image_height
                    ),
                ));
            }
            level.validate()?;
        }
        Ok(())
    }
}

/// Single-channel raster with `f32` intensities, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayRaster {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<f32>,
}

impl GrayRaster {
    pub fn new(width: u32, height: u32, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width as usize * height as usize {
            return Err(Error::Config(format!(
                "raster {width}x{height} needs {} pixels, got {}",
                width as usize * height as usize,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, value: f32) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width as usize * height as usize],
        }
    }

    /// Luminance in `[0, 1]` from any decoded image (grayscale or RGB).
    pub fn from_image(img: &image::DynamicImage) -> Self {
        let luma = img.to_luma32f();
        Self {
            width: luma.width(),
            height: luma.height(),
            pixels: luma.into_raw(),
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_image(&image::open(path)?))
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width as usize + x]
    }

    #[inline]
    fn clamped(&self, x: isize, y: isize) -> f32 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.at(xc, yc)
    }
}

/// Anything that turns an image into a feature pyramid.
pub trait FeatureExtractor {
    fn extract(&self, image: &GrayRaster) -> Result<FeaturePyramid>;
}

/// Deterministic hand-crafted extractor used in place of a trained network.
///
/// Each cell of level `s` summarizes the `(2s-1) x (2s-1)` pixel patch centred
/// on image pixel `(s*u, s*v)` with eight statistics: mean intensity, mean
/// horizontal, vertical and two diagonal gradients, intensity spread,
/// mean gradient magnitude and intensity range. The vector is L2-normalized
/// (flat black patches stay zero). The heatmap is the mean squared gradient
/// magnitude over the patch divided by the per-level maximum.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradientExtractor;

struct GradientField {
    gx: Vec<f32>,
    gy: Vec<f32>,
    d1: Vec<f32>,
    d2: Vec<f32>,
}

impl GradientField {
    fn new(img: &GrayRaster) -> Self {
        let (w, h) = (img.width as usize, img.height as usize);
        let mut field = Self {
            gx: vec![0.0; w * h],
            gy: vec![0.0; w * h],
            d1: vec![0.0; w * h],
            d2: vec![0.0; w * h],
        };
        for y in 0..h {
            for x in 0..w {
                let (xi, yi) = (x as isize, y as isize);
                let i = y * w + x;
                field.gx[i] = 0.5 * (img.clamped(xi + 1, yi) - img.clamped(xi - 1, yi));
                field.gy[i] = 0.5 * (img.clamped(xi, yi + 1) - img.clamped(xi, yi - 1));
                field.d1[i] = 0.5 * (img.clamped(xi + 1, yi + 1) - img.clamped(xi - 1, yi - 1));
                field.d2[i] = 0.5 * (img.clamped(xi + 1, yi - 1) - img.clamped(xi - 1, yi + 1));
            }
        }
        field
    }
}

impl GradientExtractor {
    fn level(&self, img: &GrayRaster, grad: &GradientField, scale: u8) -> DenseFeatureLevel {
        let s = scale as isize;
        let (iw, ih) = (img.width as isize, img.height as isize);
        let mut level = DenseFeatureLevel::zeros(
            scale,
            (img.width / u32::from(scale)) as usize,
            (img.height / u32::from(scale)) as usize,
        );
        let mut max_energy = 0.0f64;
        let mut energy = vec![0.0f64; level.width * level.height];
        for cv in 0..level.height {
            for cu in 0..level.width {
                let (px, py) = (cu as isize * s, cv as isize * s);
                let mut n = 0.0f64;
                let mut sums = [0.0f64; 6]; // I, gx, gy, d1, d2, |g|
                let mut sum_sq = 0.0f64;
                let mut e = 0.0f64;
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for y in (py - s + 1).max(0)..(py + s).min(ih) {
                    for x in (px - s + 1).max(0)..(px + s).min(iw) {
                        let i = y as usize * img.width as usize + x as usize;
                        let intensity = f64::from(img.pixels[i]);
                        let (gx, gy) = (f64::from(grad.gx[i]), f64::from(grad.gy[i]));
                        let mag2 = gx * gx + gy * gy;
                        sums[0] += intensity;
                        sums[1] += gx;
                        sums[2] += gy;
                        sums[3] += f64::from(grad.d1[i]);
                        sums[4] += f64::from(grad.d2[i]);
                        sums[5] += mag2.sqrt();
                        sum_sq += intensity * intensity;
                        e += mag2;
                        lo = lo.min(intensity);
                        hi = hi.max(intensity);
                        n += 1.0;
                    }
                }
                let mean = sums[0] / n;
                let var = (sum_sq / n - mean * mean).max(0.0);
                let raw = [
                    mean,
                    sums[1] / n,
                    sums[2] / n,
                    sums[3] / n,
                    sums[4] / n,
                    var.sqrt(),
                    sums[5] / n,
                    hi - lo,
                ];
                let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                let d = level.descriptor_mut(cu, cv);
                if norm > 0.0 {
                    for (slot, r) in d.iter_mut().zip(raw) {
                        *slot = (r / norm) as f32;
                    }
                }
                let cell_energy = e / n;
                energy[cv * level.width + cu] = cell_energy;
                max_energy = max_energy.max(cell_energy);
            }
        }
        if max_energy > 0.0 {
            for (h, e) in level.heatmap.iter_mut().zip(energy) {
                *h = ((e / max_energy) as f32).clamp(0.0, 1.0);
            }
        }
        level
    }
}

impl FeatureExtractor for GradientExtractor {
    fn extract(&self, image: &GrayRaster) -> Result<FeaturePyramid> {
        if image.width < MIN_IMAGE_SIDE || image.height < MIN_IMAGE_SIDE {
            return Err(Error::ImageTooSmall {
                width: image.width,
                height: image.height,
                min: MIN_IMAGE_SIDE,
            });
        }
        if image.pixels.len() != image.width as usize * image.height as usize {
            return Err(Error::Config("raster buffer does not match its dimensions".into()));
        }
        let grad = GradientField::new(image);
        let levels = SCALES.map(|s| self.level(image, &grad, s));
        FeaturePyramid::new(image.width, image.height, levels)
    }
}

/// Run `extractor` on `image`.
pub fn extract_pyramid(image: &GrayRaster, extractor: &dyn FeatureExtractor) -> Result<FeaturePyramid> {
    extractor.extract(image)
}

/// Write a pyramid file, atomically replacing any existing file at `path`.
pub fn export_pyramid(pyramid: &FeaturePyramid, path: impl AsRef<Path>) -> Result<()> {
    pyramid.validate()?;
    crate::io::write_atomic(path.as_ref(), |w| write_pyramid(pyramid, w))
}

pub fn write_pyramid<W: Write>(pyramid: &FeaturePyramid, w: &mut W) -> Result<()> {
    w.write_all(PYRAMID_MAGIC)?;
    w.write_u16::<LittleEndian>(PYRAMID_VERSION)?;
    w.write_u32::<LittleEndian>(pyramid.image_width)?;
    w.write_u32::<LittleEndian>(pyramid.image_height)?;
    for level in &pyramid.levels {
        w.write_u8(level.scale)?;
        w.write_u32::<LittleEndian>(level.width as u32)?;
        w.write_u32::<LittleEndian>(level.height as u32)?;
        w.write_u8(DESCRIPTOR_DIM as u8)?;
        for d in &level.descriptors {
            w.write_f32::<LittleEndian>(*d)?;
        }
        for h in &level.heatmap {
            w.write_f32::<LittleEndian>(*h)?;
        }
    }
    Ok(())
}

/// Load and validate a pyramid file.
pub fn import_pyramid(path: impl AsRef<Path>) -> Result<FeaturePyramid> {
    let mut r = BufReader::new(File::open(path)?);
    read_pyramid(&mut r)
}

pub fn read_pyramid<R: Read>(r: &mut R) -> Result<FeaturePyramid> {
    let field_err = |field: &str| {
        let field = field.to_string();
        move |e: std::io::Error| Error::format(field, format!("truncated or unreadable ({e})"))
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(field_err("magic"))?;
    if &magic != PYRAMID_MAGIC {
        return Err(Error::format("magic", format!("expected \"ALFP\", found {magic:?}")));
    }
    let version = r.read_u16::<LittleEndian>().map_err(field_err("version"))?;
    if version != PYRAMID_VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let image_width = r.read_u32::<LittleEndian>().map_err(field_err("image width"))?;
    let image_height = r.read_u32::<LittleEndian>().map_err(field_err("image height"))?;

    let mut levels = Vec::with_capacity(3);
    for expected in SCALES {
        let name = |f: &str| format!("level s={expected} {f}");
        let scale = r.read_u8().map_err(field_err(&name("scale")))?;
        if scale != expected {
            return Err(Error::format(name("scale"), format!("expected {expected}, found {scale}")));
        }
        let width = r.read_u32::<LittleEndian>().map_err(field_err(&name("width")))? as usize;
        let height = r.read_u32::<LittleEndian>().map_err(field_err(&name("height")))? as usize;
        let (ew, eh) = (
            (image_width / u32::from(scale)) as usize,
            (image_height / u32::from(scale)) as usize,
        );
        if width != ew || height != eh {
            return Err(Error::format(
                name("dimensions"),
                format!("{width}x{height} inconsistent with image {image_width}x{image_height}"),
            ));
        }
        let dim = r.read_u8().map_err(field_err(&name("D")))?;
        if dim as usize != DESCRIPTOR_DIM {
            return Err(Error::format(name("D"), format!("expected {DESCRIPTOR_DIM}, found {dim}")));
        }
        let mut descriptors = vec![0.0f32; width * height * DESCRIPTOR_DIM];
        r.read_f32_into::<LittleEndian>(&mut descriptors)
            .map_err(field_err(&name("descriptors")))?;
        let mut heatmap = vec![0.0f32; width * height];
        r.read_f32_into::<LittleEndian>(&mut heatmap)
            .map_err(field_err(&name("heatmap")))?;
        levels.push(DenseFeatureLevel::from_parts(scale, width, height, descriptors, heatmap)?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("trailer", "unexpected bytes after last level"));
    }
    let levels: [DenseFeatureLevel; 3] = levels.try_into().expect("three levels read");
    FeaturePyramid::new(image_width, image_height, levels)
}
