//! Image augmentation: the 16-op pool, the weak teacher view and the
//! patch-mosaic strong view.
//!
//! Magnitudes live in `[0, 1]` and map to op parameters as follows:
//!
//! | op            | parameter at magnitude `m`                          |
//! |---------------|-----------------------------------------------------|
//! | invert        | none (`v ↦ 255 − v`)                                |
//! | rotate        | `±30°·m` about the image center                     |
//! | brightness    | factor `0.1 + 1.8m` (`m = 0.5` is the identity)     |
//! | shearX/Y      | `±0.3m` about the image center                      |
//! | translateX/Y  | `±round(0.3m·W)` / `±round(0.3m·H)` pixels          |
//! | contrast      | factor `0.1 + 1.8m`, blend with mean gray           |
//! | color         | factor `0.1 + 1.8m`, blend with grayscale           |
//! | sharpness     | factor `0.1 + 1.8m`, blend with 3×3 smoothing       |
//! | cutout        | gray square of side `round(0.25m·min(W,H))`         |
//! | equalize      | none (per-channel histogram equalization)           |
//! | flip          | none (left-right mirror)                            |
//! | posterize     | keep `8 − round(4m)` high bits                      |
//! | solarize      | invert values `> round(255(1 − m))`                 |
//! | solarizeAdd   | add `round(110m)` to values `< 128`                 |
//!
//! Signs of the signed geometric ops and the cutout position are drawn from
//! the generator passed to [`apply_aug`]. Geometric ops use nearest-neighbour
//! sampling and fill exposed pixels with mid-gray.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;
pub const FILL: [u8; 3] = [128, 128, 128];

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageTensor {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ImageTensor {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::Shape(format!("image must be at least 2×2, got {width}×{height}")));
        }
        if data.len() != width * height * CHANNELS {
            return Err(Error::Shape(format!(
                "{width}×{height}×3 image needs {} bytes, got {}",
                width * height * CHANNELS,
                data.len()
            )));
        }
        Ok(ImageTensor { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width * height * CHANNELS).collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + CHANNELS].copy_from_slice(&rgb);
    }

    fn map_bytes(&self, f: impl Fn(u8) -> u8) -> Self {
        ImageTensor {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Builds an image by asking, for each output pixel, which source pixel
    /// to read; `None` means fill.
    fn remap(&self, src: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let mut out = ImageTensor::filled(self.width, self.height, FILL).expect("valid dims");
        for y in 0..self.height {
            for x in 0..self.width {
                let (sx, sy) = src(x as f64, y as f64);
                let (sx, sy) = (sx.round(), sy.round());
                if sx >= 0.0 && sy >= 0.0 && (sx as usize) < self.width && (sy as usize) < self.height {
                    out.set_pixel(x, y, self.pixel(sx as usize, sy as usize));
                }
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AugKind {
    Invert,
    Rotate,
    Brightness,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Contrast,
    Color,
    Cutout,
    Equalize,
    Flip,
    Posterize,
    Sharpness,
    Solarize,
    SolarizeAdd,
}

impl AugKind {
    pub const ALL: [AugKind; 16] = [
        AugKind::Invert,
        AugKind::Rotate,
        AugKind::Brightness,
        AugKind::ShearX,
        AugKind::ShearY,
        AugKind::TranslateX,
        AugKind::TranslateY,
        AugKind::Contrast,
        AugKind::Color,
        AugKind::Cutout,
        AugKind::Equalize,
        AugKind::Flip,
        AugKind::Posterize,
        AugKind::Sharpness,
        AugKind::Solarize,
        AugKind::SolarizeAdd,
    ];

    /// Default pool: the ops that keep the object outline intact.
    pub const SELECTED: [AugKind; 7] = [
        AugKind::Invert,
        AugKind::Rotate,
        AugKind::Brightness,
        AugKind::ShearX,
        AugKind::ShearY,
        AugKind::TranslateX,
        AugKind::TranslateY,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugKind::Invert => "invert",
            AugKind::Rotate => "rotate",
            AugKind::Brightness => "brightness",
            AugKind::ShearX => "shearX",
            AugKind::ShearY => "shearY",
            AugKind::TranslateX => "translateX",
            AugKind::TranslateY => "translateY",
            AugKind::Contrast => "contrast",
            AugKind::Color => "color",
            AugKind::Cutout => "cutout",
            AugKind::Equalize => "equalize",
            AugKind::Flip => "flip",
            AugKind::Posterize => "posterize",
            AugKind::Sharpness => "sharpness",
            AugKind::Solarize => "solarize",
            AugKind::SolarizeAdd => "solarizeAdd",
        }
    }
}

impl fmt::Display for AugKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugKind::ALL
            .iter()
            .copied()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown augmentation '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugOp {
    pub kind: AugKind,
    pub magnitude: f64,
}

impl AugOp {
    pub fn new(kind: AugKind, magnitude: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&magnitude) {
            return Err(Error::InvalidArgument(format!("magnitude {magnitude} outside [0, 1]")));
        }
        Ok(AugOp { kind, magnitude })
    }
}

/// Ops eligible for per-patch sampling. `magnitude = None` draws a fresh
/// magnitude uniformly from `[0, 1]` for every patch.
#[derive(Debug, Clone, PartialEq)]
pub struct AugPool {
    ops: Vec<AugKind>,
    magnitude: Option<f64>,
}

impl AugPool {
    pub fn new(ops: Vec<AugKind>) -> Result<Self> {
        if ops.is_empty() {
            return Err(Error::Config("augmentation pool is empty".into()));
        }
        let mut seen = ops.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != ops.len() {
            return Err(Error::Config("augmentation pool has duplicate ops".into()));
        }
        Ok(AugPool { ops, magnitude: None })
    }

    pub fn selected7() -> Self {
        AugPool::new(AugKind::SELECTED.to_vec()).expect("static pool")
    }

    pub fn all16() -> Self {
        AugPool::new(AugKind::ALL.to_vec()).expect("static pool")
    }

    pub fn with_fixed_magnitude(mut self, m: f64) -> Result<Self> {
        AugOp::new(self.ops[0], m)?;
        self.magnitude = Some(m);
        Ok(self)
    }

    pub fn ops(&self) -> &[AugKind] {
        &self.ops
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AugOp {
        let kind = self.ops[rng.random_range(0..self.ops.len())];
        let magnitude = self.magnitude.unwrap_or_else(|| rng.random_range(0.0..=1.0));
        AugOp { kind, magnitude }
    }
}

impl FromStr for AugPool {
    type Err = Error;

    /// `selected7`, `all16`, or a comma-separated list of op names.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "selected7" => Ok(AugPool::selected7()),
            "all16" => Ok(AugPool::all16()),
            list => AugPool::new(list.split(',').map(str::parse).collect::<Result<Vec<_>>>()?),
        }
    }
}

fn factor(m: f64) -> f64 {
    0.1 + 1.8 * m
}

fn sign<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    if rng.random_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// `degenerate + f·(img − degenerate)`, clamped.
fn blend(img: &ImageTensor, degenerate: &[f64], f: f64) -> ImageTensor {
    let data = img
        .data
        .iter()
        .zip(degenerate)
        .map(|(&v, &d)| to_u8(d + f * (v as f64 - d)))
        .collect();
    ImageTensor { data, ..img.clone() }
}

fn luma(rgb: &[u8]) -> f64 {
    (299.0 * rgb[0] as f64 + 587.0 * rgb[1] as f64 + 114.0 * rgb[2] as f64) / 1000.0
}

fn equalize(img: &ImageTensor) -> ImageTensor {
    let mut out = img.clone();
    for c in 0..CHANNELS {
        let mut hist = [0usize; 256];
        for px in img.data.chunks_exact(CHANNELS) {
            hist[px[c] as usize] += 1;
        }
        let last = hist.iter().rposition(|&h| h > 0).map_or(0, |i| hist[i]);
        let step = (hist.iter().sum::<usize>() - last) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0u8; 256];
        let mut n = step / 2;
        for (i, h) in hist.iter().enumerate() {
            lut[i] = (n / step).min(255) as u8;
            n += h;
        }
        for px in out.data.chunks_exact_mut(CHANNELS) {
            px[c] = lut[px[c] as usize];
        }
    }
    out
}

fn smoothed(img: &ImageTensor) -> Vec<f64> {
    const K: [[f64; 3]; 3] = [[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]];
    let (w, h) = (img.width, img.height);
    let mut out: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (dy, row) in K.iter().enumerate() {
                    for (dx, k) in row.iter().enumerate() {
                        acc += k * img.data[((y + dy - 1) * w + x + dx - 1) * CHANNELS + c] as f64;
                    }
                }
                out[(y * w + x) * CHANNELS + c] = (acc / 13.0).round();
            }
        }
    }
    out
}

/// Applies one op. Output has the input's dimensions.
pub fn apply_aug<R: Rng + ?Sized>(op: AugOp, img: &ImageTensor, rng: &mut R) -> ImageTensor {
    let m = op.magnitude;
    let (w, h) = (img.width as f64, img.height as f64);
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    match op.kind {
        AugKind::Invert => img.map_bytes(|v| 255 - v),
        AugKind::Rotate => {
            let theta = sign(rng) * 30.0 * m * std::f64::consts::PI / 180.0;
            let (s, c) = theta.sin_cos();
            // inverse rotation maps output back into the source
            img.remap(|x, y| {
                let (dx, dy) = (x - cx, y - cy);
                (cx + c * dx + s * dy, cy - s * dx + c * dy)
            })
        }
        AugKind::Brightness => {
            let f = factor(m);
            img.map_bytes(|v| to_u8(v as f64 * f))
        }
        AugKind::ShearX => {
            let k = sign(rng) * 0.3 * m;
            img.remap(|x, y| (x - k * (y - cy), y))
        }
        AugKind::ShearY => {
            let k = sign(rng) * 0.3 * m;
            img.remap(|x, y| (x, y - k * (x - cx)))
        }
        AugKind::TranslateX => {
            let d = sign(rng) * (0.3 * m * w).round();
            img.remap(|x, y| (x - d, y))
        }
        AugKind::TranslateY => {
            let d = sign(rng) * (0.3 * m * h).round();
            img.remap(|x, y| (x, y - d))
        }
        AugKind::Contrast => {
            let n = (img.width * img.height) as f64;
            let mean = (img.data.chunks_exact(CHANNELS).map(luma).sum::<f64>() / n).round();
            blend(img, &vec![mean; img.data.len()], factor(m))
        }
        AugKind::Color => {
            let gray: Vec<f64> = img
                .data
                .chunks_exact(CHANNELS)
                .flat_map(|px| {
                    let l = luma(px).round();
                    [l, l, l]
                })
                .collect();
            blend(img, &gray, factor(m))
        }
        AugKind::Sharpness => blend(img, &smoothed(img), factor(m)),
        AugKind::Cutout => {
            let side = (0.25 * m * w.min(h)).round() as usize;
            let mut out = img.clone();
            if side > 0 {
                let x0 = rng.random_range(0..img.width) as isize - (side / 2) as isize;
                let y0 = rng.random_range(0..img.height) as isize - (side / 2) as isize;
                for y in y0.max(0)..(y0 + side as isize).min(img.height as isize) {
                    for x in x0.max(0)..(x0 + side as isize).min(img.width as isize) {
                        out.set_pixel(x as usize, y as usize, FILL);
                    }
                }
            }
            out
        }
        AugKind::Equalize => equalize(img),
        AugKind::Flip => img.remap(|x, y| (w - 1.0 - x, y)),
        AugKind::Posterize => {
            let bits = 8 - (4.0 * m).round() as u32;
            let mask = (0xFFu16 << (8 - bits)) as u8;
            img.map_bytes(|v| v & mask)
        }
        AugKind::Solarize => {
            let threshold = (255.0 * (1.0 - m)).round() as u8;
            img.map_bytes(|v| if v > threshold { 255 - v } else { v })
        }
        AugKind::SolarizeAdd => {
            let add = (110.0 * m).round() as u16;
            img.map_bytes(|v| if v < 128 { (v as u16 + add).min(255) as u8 } else { v })
        }
    }
}

/// All `(a, b)` with `a·b = n`, ascending in `a`.
pub fn split_pairs(n: usize) -> Result<Vec<(usize, usize)>> {
    if n == 0 {
        return Err(Error::InvalidArgument("patch count must be ≥ 1".into()));
    }
    Ok((1..=n).filter(|i| n % i == 0).map(|i| (i, n / i)).collect())
}

/// Pixel rectangle `[x0, x1) × [y0, y1)` of patch `i` in an `a × b` grid
/// (`a` rows over the height, `b` columns over the width). Boundaries are
/// floored, so the last row/column absorbs any remainder.
pub fn patch_rect(i: usize, a: usize, b: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let (p, q) = (i % b, i / b);
    (p * width / b, (p + 1) * width / b, q * height / a, (q + 1) * height / a)
}

/// How a mosaic was assembled; enough to regenerate every patch.
#[derive(Debug, Clone, PartialEq)]
pub struct MosaicTrace {
    pub rows: usize,
    pub cols: usize,
    /// Per-patch generator seed; patch `i` is
    /// `apply_aug(pool.sample(r), img, r)` with `r = ChaCha8Rng::seed_from_u64(seed)`.
    pub patch_seeds: Vec<u64>,
    pub patch_ops: Vec<AugOp>,
}

/// Tiles the image with patches taken from `n` independently augmented
/// copies of itself.
pub fn pose_mosaic<R: Rng + ?Sized>(img: &ImageTensor, n: usize, pool: &AugPool, rng: &mut R) -> Result<ImageTensor> {
    pose_mosaic_traced(img, n, pool, rng).map(|(out, _)| out)
}

pub fn pose_mosaic_traced<R: Rng + ?Sized>(
    img: &ImageTensor,
    n: usize,
    pool: &AugPool,
    rng: &mut R,
) -> Result<(ImageTensor, MosaicTrace)> {
    let pairs = split_pairs(n)?;
    let (a, b) = pairs[rng.random_range(0..pairs.len())];
    let mut out = img.clone();
    let mut trace = MosaicTrace {
        rows: a,
        cols: b,
        patch_seeds: Vec::with_capacity(n),
        patch_ops: Vec::with_capacity(n),
    };
    let row_bytes = img.width * CHANNELS;
    for i in 0..n {
        let seed = rng.random::<u64>();
        let mut patch_rng = ChaCha8Rng::seed_from_u64(seed);
        let op = pool.sample(&mut patch_rng);
        let aug = apply_aug(op, img, &mut patch_rng);
        let (x0, x1, y0, y1) = patch_rect(i, a, b, img.width, img.height);
        for y in y0..y1 {
            let (s, e) = (y * row_bytes + x0 * CHANNELS, y * row_bytes + x1 * CHANNELS);
            out.data[s..e].copy_from_slice(&aug.data[s..e]);
        }
        trace.patch_seeds.push(seed);
        trace.patch_ops.push(op);
    }
    Ok((out, trace))
}

/// Parameters of one weak augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakParams {
    pub dx: i64,
    pub dy: i64,
    pub brightness: f64,
}

impl WeakParams {
    pub fn sample<R: Rng + ?Sized>(width: usize, height: usize, rng: &mut R) -> Self {
        let mx = (0.04 * width as f64).round() as i64;
        let my = (0.04 * height as f64).round() as i64;
        WeakParams {
            dx: rng.random_range(-mx..=mx),
            dy: rng.random_range(-my..=my),
            brightness: rng.random_range(0.9..=1.1),
        }
    }
}

/// Translate by `(dx, dy)` pixels, then scale brightness.
pub fn weak_augment_with(img: &ImageTensor, p: WeakParams) -> ImageTensor {
    let (dx, dy) = (p.dx as f64, p.dy as f64);
    let shifted = if p.dx == 0 && p.dy == 0 {
        img.clone()
    } else {
        img.remap(|x, y| (x - dx, y - dy))
    };
    if p.brightness == 1.0 {
        shifted
    } else {
        shifted.map_bytes(|v| to_u8(v as f64 * p.brightness))
    }
}

/// Random translation of up to 4% of each dimension plus a brightness
/// factor in `[0.9, 1.1]`.
pub fn weak_augment<R: Rng + ?Sized>(img: &ImageTensor, rng: &mut R) -> ImageTensor {
    let p = WeakParams::sample(img.width, img.height, rng);
    weak_augment_with(img, p)
}
