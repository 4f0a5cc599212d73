//! Condition extractors and controllability metrics.

use serde::{Deserialize, Serialize};

use super::{Image, PairMeta};
use crate::error::{dim_err, Error, Result};

/// Luminance-gradient threshold for edge extraction.
pub const EDGE_THRESHOLD: f64 = 0.25;
/// Pixels further than this (Euclidean RGB) from the background are foreground.
pub const FOREGROUND_DISTANCE: f64 = 0.2;
/// RGB distance at which the color score reaches zero.
pub const COLOR_TOLERANCE: f64 = 0.5;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn luminance(px: &[f64]) -> f64 {
    match px {
        [v] => *v,
        [r, g, b] if r == g && g == b => *r,
        [r, g, b] => LUMA[0] * r + LUMA[1] * g + LUMA[2] * b,
        _ => px.iter().sum::<f64>() / px.len() as f64,
    }
}

/// Grayscale copy (luminance replicated over three channels).
pub fn extract_gray(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let data = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .flat_map(|(r, c)| [luminance(img.pixel(r, c)); 3])
        .collect();
    Image::new(h, w, 3, data).expect("gray dims")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeMap {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl EdgeMap {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return dim_err(format!("{} bits for a {height}x{width} map", bits.len()));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Three-channel `{0, 1}` image.
    pub fn to_image(&self) -> Image {
        let data = self
            .bits
            .iter()
            .flat_map(|&b| [f64::from(u8::from(b)); 3])
            .collect();
        Image::new(self.height, self.width, 3, data).expect("edge dims")
    }
}

/// `|dL/dx| + |dL/dy| > EDGE_THRESHOLD` with central differences and
/// replicated borders.
pub fn extract_edges(img: &Image) -> EdgeMap {
    let (h, w) = (img.height(), img.width());
    let lum: Vec<f64> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .map(|(r, c)| luminance(img.pixel(r, c)))
        .collect();
    let at = |r: usize, c: usize| lum[r * w + c];
    let mut bits = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let gx = (at(r, (c + 1).min(w - 1)) - at(r, c.saturating_sub(1))) / 2.0;
            let gy = (at((r + 1).min(h - 1), c) - at(r.saturating_sub(1), c)) / 2.0;
            bits.push(gx.abs() + gy.abs() > EDGE_THRESHOLD);
        }
    }
    EdgeMap {
        height: h,
        width: w,
        bits,
    }
}

/// Pixel-exact F1. Both maps empty scores 1; an empty prediction against a
/// nonempty truth scores 0.
pub fn edge_f1(pred: &EdgeMap, truth: &EdgeMap) -> Result<f64> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return dim_err(format!(
            "edge maps {}x{} vs {}x{}",
            pred.height, pred.width, truth.height, truth.width
        ));
    }
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.bits.iter().zip(&truth.bits) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            _ => {}
        }
    }
    if tp + fp + fne == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fne) as f64)
}

/// Mean squared difference over every pixel and channel.
pub fn pixel_mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    let n = a.data().len().max(1);
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n as f64)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// A 4-connected foreground component.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub area: usize,
    pub mean_color: Vec<f64>,
}

/// Foreground components against the border-median background.
pub fn find_blobs(img: &Image) -> Vec<Blob> {
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    if h == 0 || w == 0 {
        return Vec::new();
    }
    let border: Vec<(usize, usize)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| r == 0 || c == 0 || r == h - 1 || c == w - 1)
        .collect();
    let bg: Vec<f64> = (0..ch)
        .map(|k| median(border.iter().map(|&(r, c)| img.pixel(r, c)[k]).collect()))
        .collect();
    let fg: Vec<bool> = (0..h * w)
        .map(|i| dist(img.pixel(i / w, i % w), &bg) > FOREGROUND_DISTANCE)
        .collect();
    let mut seen = vec![false; h * w];
    let mut blobs = Vec::new();
    for start in 0..h * w {
        if !fg[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut sum = vec![0.0; ch];
        let mut area = 0;
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            area += 1;
            sum.iter_mut().zip(img.pixel(r, c)).for_each(|(s, v)| *s += v);
            let mut visit = |j: usize| {
                if fg[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        blobs.push(Blob {
            area,
            mean_color: sum.iter().map(|s| s / area as f64).collect(),
        });
    }
    blobs
}

/// Best blob's `color_score * size_score` against the subject in `meta`, where
/// `color_score = 1 - min(1, |mean - color| / COLOR_TOLERANCE)` and
/// `size_score = min(area, subject_area) / max(area, subject_area)`.
pub fn subject_fidelity(generated: &Image, meta: &PairMeta) -> Result<f64> {
    let subject = meta
        .subject
        .ok_or_else(|| Error::Argument("metadata carries no subject".into()))?;
    let target_area = subject.area(generated.height(), generated.width()).max(1) as f64;
    Ok(find_blobs(generated)
        .iter()
        .map(|b| {
            let color = 1.0 - (dist(&b.mean_color, &subject.color) / COLOR_TOLERANCE).min(1.0);
            let a = b.area as f64;
            color * a.min(target_area) / a.max(target_area)
        })
        .fold(0.0, f64::max))
}
