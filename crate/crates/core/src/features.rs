//! Image decoding, stripe partitioning and the 430-dim per-stripe descriptor
//! (uniform LBP texture histograms followed by eight colour-channel histograms).

use std::sync::OnceLock;

use log::warn;
use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const STRIPES_PER_IMAGE: usize = 6;
pub const DESCRIPTOR_DIM: usize = 430;
const COLOR_BINS: usize = 16;
const COLOR_CHANNELS: usize = 8;

/// Lengths of the independently normalised histogram blocks, in order:
/// LBP(8,1), LBP(16,2), then R, G, B, H, S, Y, U, V.
pub const DESCRIPTOR_BLOCKS: [usize; 10] = [59, 243, 16, 16, 16, 16, 16, 16, 16, 16];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config(format!("empty image {width}x{height}")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "{width}x{height} image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn rows(&self, start: usize, end: usize) -> ImageRgb {
        let stride = self.width * 3;
        ImageRgb {
            width: self.width,
            height: end - start,
            pixels: self.pixels[start * stride..end * stride].to_vec(),
        }
    }

    /// BT.601 luma, one matrix row per image row.
    pub fn to_gray(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.height, self.width, |y, x| {
            let [r, g, b] = self.pixel(x, y);
            luma(f64::from(r), f64::from(g), f64::from(b))
        })
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// One 430-dim stripe histogram feature.
#[derive(Debug, Clone, PartialEq)]
pub struct StripeDescriptor(Vec<f64>);

impl StripeDescriptor {
    /// Validates length and non-negativity; block sums are not re-checked
    /// so that degenerate (all-zero) blocks can round-trip through files.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != DESCRIPTOR_DIM {
            return Err(Error::Dimension(format!(
                "descriptor length {} != {DESCRIPTOR_DIM}",
                values.len()
            )));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!(
                "descriptor entry {i} = {v} is not a finite non-negative value"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Sum of each histogram block, in [`DESCRIPTOR_BLOCKS`] order.
    pub fn block_sums(&self) -> Vec<f64> {
        block_ranges().map(|r| self.0[r].iter().sum()).collect()
    }
}

pub fn block_ranges() -> impl Iterator<Item = std::ops::Range<usize>> {
    DESCRIPTOR_BLOCKS.iter().scan(0usize, |start, len| {
        let r = *start..*start + len;
        *start += len;
        Some(r)
    })
}

/// l1-normalise every descriptor block in place; all-zero blocks stay zero.
pub fn normalize_blocks(values: &mut [f64]) {
    for r in block_ranges() {
        l1_normalize(&mut values[r]);
    }
}

fn l1_normalize(h: &mut [f64]) {
    let s: f64 = h.iter().sum();
    if s > 0.0 {
        h.iter_mut().for_each(|v| *v /= s);
    }
}

/// Decode a binary P6 PPM with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<ImageRgb> {
    let mut pos = 0usize;
    let err = |offset: usize, message: &str| Error::Decode {
        offset,
        message: message.to_string(),
    };

    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(err(0, "missing P6 magic"));
    }
    pos += 2;

    let mut fields = [0usize; 3];
    for (k, name) in ["width", "height", "maxval"].iter().enumerate() {
        // whitespace and comments
        let start = pos;
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        if pos == start {
            return Err(err(pos, &format!("expected whitespace before {name}")));
        }
        let digits = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if pos == digits {
            return Err(err(pos, &format!("expected decimal {name}")));
        }
        fields[k] = std::str::from_utf8(&bytes[digits..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(digits, &format!("{name} out of range")))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(err(pos, &format!("maxval {maxval} unsupported, expected 255")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(err(pos, "expected single whitespace after maxval"));
    }
    pos += 1;
    if width == 0 || height == 0 {
        return Err(err(pos, "zero image dimension"));
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| err(pos, "image dimensions overflow"))?;
    let have = bytes.len() - pos;
    if have < need {
        return Err(err(bytes.len(), &format!("truncated payload: {have} of {need} bytes")));
    }
    ImageRgb::new(width, height, bytes[pos..pos + need].to_vec())
}

/// Row boundaries of `n` stripes: stripe `i` covers `[round(i·H/n), round((i+1)·H/n))`.
pub fn stripe_bounds(height: usize, n: usize) -> Result<Vec<(usize, usize)>> {
    if n == 0 || height < n {
        return Err(Error::Config(format!("cannot split {height} rows into {n} stripes")));
    }
    // round half up, in integers
    let edge = |i: usize| (2 * i * height + n) / (2 * n);
    Ok((0..n).map(|i| (edge(i), edge(i + 1))).collect())
}

pub fn split_stripes(img: &ImageRgb, n: usize) -> Result<Vec<ImageRgb>> {
    Ok(stripe_bounds(img.height, n)?
        .into_iter()
        .map(|(a, b)| img.rows(a, b))
        .collect())
}

/// Uniform-pattern bin index for every `P`-bit code; non-uniform codes share
/// the last bin.
fn uniform_table(neighbors: usize) -> &'static [u16] {
    static T8: OnceLock<Vec<u16>> = OnceLock::new();
    static T16: OnceLock<Vec<u16>> = OnceLock::new();
    let build = || {
        let p = neighbors as u32;
        let mask = (1u32 << p) - 1;
        let non_uniform = (neighbors * (neighbors - 1) + 2) as u16;
        let mut next = 0u16;
        (0..=mask)
            .map(|code| {
                let rotated = ((code >> 1) | ((code & 1) << (p - 1))) & mask;
                if (code ^ rotated).count_ones() <= 2 {
                    next += 1;
                    next - 1
                } else {
                    non_uniform
                }
            })
            .collect()
    };
    match neighbors {
        8 => T8.get_or_init(build),
        16 => T16.get_or_init(build),
        _ => unreachable!("validated by caller"),
    }
}

pub fn lbp_bins(neighbors: usize) -> usize {
    neighbors * (neighbors - 1) + 3
}

/// Bin of the all-ones pattern (every neighbour ≥ centre).
pub fn lbp_all_ones_bin(neighbors: usize) -> usize {
    uniform_table(neighbors)[(1usize << neighbors) - 1] as usize
}

/// Bilinear sample that returns the exact pixel value when the coordinate is
/// integral and the exact constant on flat neighbourhoods.
fn bilinear(gray: &DMatrix<f64>, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as usize, x0 as usize);
    let y1 = if fy > 0.0 { y0 + 1 } else { y0 };
    let x1 = if fx > 0.0 { x0 + 1 } else { x0 };
    let v00 = gray[(y0, x0)];
    let v01 = gray[(y0, x1)];
    let v10 = gray[(y1, x0)];
    let v11 = gray[(y1, x1)];
    v00 + fx * (v01 - v00) + fy * (v10 - v00) + fx * fy * (v00 - v01 - v10 + v11)
}

/// Uniform (u2) LBP histogram, l1-normalised. Supports (8,1) and (16,2).
///
/// Neighbour `p` sits at angle `2πp/P` (counter-clockwise from +x), sampled
/// bilinearly; bit `p` is set when the neighbour is ≥ the centre. Pixels
/// closer than `radius` to the border are not used as centres. A matrix too
/// small to host any centre yields an all-zero histogram.
pub fn lbp_histogram(gray: &DMatrix<f64>, neighbors: usize, radius: usize) -> Result<Vec<f64>> {
    if !matches!((neighbors, radius), (8, 1) | (16, 2)) {
        return Err(Error::Config(format!(
            "unsupported LBP configuration P={neighbors}, R={radius}"
        )));
    }
    let mut hist = vec![0.0; lbp_bins(neighbors)];
    let (h, w) = gray.shape();
    if h <= 2 * radius || w <= 2 * radius {
        warn!("stripe {w}x{h} too small for LBP radius {radius}; empty block");
        return Ok(hist);
    }
    let table = uniform_table(neighbors);
    let r = radius as f64;
    let offsets: Vec<(f64, f64)> = (0..neighbors)
        .map(|p| {
            let theta = 2.0 * std::f64::consts::PI * p as f64 / neighbors as f64;
            let snap = |v: f64| {
                let rounded = v.round();
                if (v - rounded).abs() < 1e-9 {
                    rounded
                } else {
                    v
                }
            };
            (snap(-r * theta.sin()), snap(r * theta.cos()))
        })
        .collect();

    for y in radius..h - radius {
        for x in radius..w - radius {
            let center = gray[(y, x)];
            let mut code = 0usize;
            for (p, (dy, dx)) in offsets.iter().enumerate() {
                if bilinear(gray, y as f64 + dy, x as f64 + dx) >= center {
                    code |= 1 << p;
                }
            }
            hist[table[code] as usize] += 1.0;
        }
    }
    l1_normalize(&mut hist);
    Ok(hist)
}

fn bin_of(v: f64) -> usize {
    ((v / COLOR_BINS as f64).floor().max(0.0) as usize).min(COLOR_BINS - 1)
}

/// Channel values in [0,255] for one pixel, in R, G, B, H, S, Y, U, V order.
pub fn color_channels([r, g, b]: [u8; 3]) -> [f64; COLOR_CHANNELS] {
    let (r, g, b) = (f64::from(r), f64::from(g), f64::from(b));
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue_deg = if delta == 0.0 {
        0.0
    } else if max == r {
        (60.0 * (g - b) / delta).rem_euclid(360.0)
    } else if max == g {
        60.0 * (b - r) / delta + 120.0
    } else {
        60.0 * (r - g) / delta + 240.0
    };
    let sat = if max == 0.0 { 0.0 } else { 255.0 * delta / max };
    let y = luma(r, g, b);
    let u = (0.492 * (b - y) + 128.0).clamp(0.0, 255.0);
    let v = (0.877 * (r - y) + 128.0).clamp(0.0, 255.0);
    [r, g, b, hue_deg * 255.0 / 360.0, sat, y, u, v]
}

/// Eight 16-bin histograms (R, G, B, H, S, Y, U, V), each l1-normalised.
pub fn color_histograms(stripe: &ImageRgb) -> Vec<f64> {
    let mut hist = vec![0.0; COLOR_CHANNELS * COLOR_BINS];
    for px in stripe.pixels.chunks_exact(3) {
        let ch = color_channels([px[0], px[1], px[2]]);
        for (c, v) in ch.iter().enumerate() {
            hist[c * COLOR_BINS + bin_of(*v)] += 1.0;
        }
    }
    for block in hist.chunks_mut(COLOR_BINS) {
        l1_normalize(block);
    }
    hist
}

pub fn stripe_descriptor(stripe: &ImageRgb) -> Result<StripeDescriptor> {
    let gray = stripe.to_gray();
    let mut values = lbp_histogram(&gray, 8, 1)?;
    values.extend(lbp_histogram(&gray, 16, 2)?);
    values.extend(color_histograms(stripe));
    StripeDescriptor::new(values)
}

/// Split into [`STRIPES_PER_IMAGE`] stripes and describe each.
pub fn image_descriptors(img: &ImageRgb) -> Result<Vec<StripeDescriptor>> {
    split_stripes(img, STRIPES_PER_IMAGE)?
        .iter()
        .map(stripe_descriptor)
        .collect()
}
