use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Row-major `H x W x C` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height * width * channels != data.len() {
            return dim_err(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, color: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| color).collect();
        Self {
            height,
            width,
            channels: 3,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, r: usize, c: usize) -> &[f64] {
        let i = (r * self.width + c) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, r: usize, c: usize) -> &mut [f64] {
        let i = (r * self.width + c) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_dims(&self, other: &Image) -> Result<()> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels)
        {
            return dim_err(format!(
                "image dims {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            ));
        }
        Ok(())
    }

    /// Plain-text portable pixmap (`P3`, maxval 255). Grayscale images are
    /// written with the value replicated over three channels.
    pub fn to_ppm(&self) -> String {
        let mut s = format!("P3\n{} {}\n255\n", self.width, self.height);
        for r in 0..self.height {
            let mut line = Vec::with_capacity(self.width * 3);
            for c in 0..self.width {
                let px = self.pixel(r, c);
                for ch in 0..3 {
                    let v = px[ch.min(self.channels - 1)];
                    line.push(((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string());
                }
            }
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn from_ppm(text: &str) -> Result<Self> {
        let mut toks = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        if toks.next() != Some("P3") {
            return Err(Error::Format("missing P3 magic".into()));
        }
        let mut num = || -> Result<usize> {
            toks.next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::Format("truncated or malformed pixmap".into()))
        };
        let (w, h, maxval) = (num()?, num()?, num()?);
        if maxval == 0 {
            return Err(Error::Format("pixmap maxval is zero".into()));
        }
        let data = (0..w * h * 3)
            .map(|_| num().map(|v| v as f64 / maxval as f64))
            .collect::<Result<Vec<_>>>()?;
        Image::new(h, w, 3, data)
    }
}
