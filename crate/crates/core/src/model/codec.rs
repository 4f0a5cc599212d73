//! Linear patch codec standing in for a frozen image autoencoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::tasks::Image;
use crate::tensor::Tensor;

/// `encode: [p*p*c, d]` with orthonormal rows and `decode = encode^T`, so
/// decoding inverts encoding exactly on the patch space.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchCodec {
    patch: usize,
    channels: usize,
    encode: Tensor,
    decode: Tensor,
}

impl PatchCodec {
    /// Orthonormalizes `patch_dim` Gaussian rows of width `d_model`.
    pub fn orthonormal(patch: usize, channels: usize, d_model: usize, seed: u64) -> Result<Self> {
        let pd = patch * patch * channels;
        if pd == 0 || pd > d_model {
            return Err(Error::Config(format!(
                "patch dimension {pd} must be in 1..={d_model}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(pd);
        while rows.len() < pd {
            let mut v = Tensor::randn(&[d_model], 1.0, &mut rng).into_data();
            for u in &rows {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-6 {
                v.iter_mut().for_each(|a| *a /= n);
                rows.push(v);
            }
        }
        let encode = Tensor::from_rows(&rows)?;
        Self::from_projections(patch, channels, encode.clone(), encode.transpose()?)
    }

    pub fn from_projections(
        patch: usize,
        channels: usize,
        encode: Tensor,
        decode: Tensor,
    ) -> Result<Self> {
        let pd = patch * patch * channels;
        let (a, d) = encode.matrix_dims()?;
        let (d2, b) = decode.matrix_dims()?;
        if a != pd || b != pd || d != d2 {
            return dim_err(format!(
                "codec projections {:?} / {:?} do not fit patch dim {pd}",
                encode.shape(),
                decode.shape()
            ));
        }
        Ok(Self {
            patch,
            channels,
            encode,
            decode,
        })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn d_model(&self) -> usize {
        self.encode.cols()
    }

    pub fn encode_matrix(&self) -> &Tensor {
        &self.encode
    }

    pub fn decode_matrix(&self) -> &Tensor {
        &self.decode
    }

    /// Row-major patch tokens `[N, p*p*c]`, pixels mapped to `[-1, 1]`.
    pub fn patchify(&self, img: &Image) -> Result<Tensor> {
        let p = self.patch;
        if img.channels() != self.channels
            || img.height() % p != 0
            || img.width() % p != 0
            || img.height() == 0
            || img.width() == 0
        {
            return Err(Error::Config(format!(
                "{}x{}x{} image does not tile into {p}x{p}x{} patches",
                img.height(),
                img.width(),
                img.channels(),
                self.channels
            )));
        }
        let (gh, gw) = (img.height() / p, img.width() / p);
        let mut data = Vec::with_capacity(img.data().len());
        for gi in 0..gh {
            for gj in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        let px = img.pixel(gi * p + dy, gj * p + dx);
                        data.extend(px.iter().map(|v| 2.0 * v - 1.0));
                    }
                }
            }
        }
        Tensor::new(vec![gh * gw, self.patch_dim()], data)
    }

    /// Inverse of [`PatchCodec::patchify`] for a square token grid; values are
    /// mapped back to `[0, 1]` and clamped.
    pub fn unpatchify(&self, patches: &Tensor) -> Result<Image> {
        let (n, pd) = patches.matrix_dims()?;
        let g = (n as f64).sqrt().round() as usize;
        if pd != self.patch_dim() || g * g != n {
            return dim_err(format!(
                "cannot unpatchify {:?} into a square grid",
                patches.shape()
            ));
        }
        let p = self.patch;
        let side = g * p;
        let mut img = Image::new(side, side, self.channels, vec![0.0; side * side * self.channels])?;
        for t in 0..n {
            let (gi, gj) = (t / g, t % g);
            let row = patches.row(t);
            for dy in 0..p {
                for dx in 0..p {
                    let src = &row[(dy * p + dx) * self.channels..][..self.channels];
                    for (dst, v) in img.pixel_mut(gi * p + dy, gj * p + dx).iter_mut().zip(src) {
                        *dst = ((v + 1.0) / 2.0).clamp(0.0, 1.0);
                    }
                }
            }
        }
        Ok(img)
    }

    /// Patch tokens to latent tokens `[N, d]`.
    pub fn project(&self, patches: &Tensor) -> Result<Tensor> {
        patches.matmul(&self.encode)
    }

    /// Latent tokens back to patch tokens.
    pub fn unproject(&self, latent: &Tensor) -> Result<Tensor> {
        latent.matmul(&self.decode)
    }

    pub fn encode_image(&self, img: &Image) -> Result<Tensor> {
        self.project(&self.patchify(img)?)
    }

    pub fn decode_image(&self, latent: &Tensor) -> Result<Image> {
        self.unpatchify(&self.unproject(latent)?)
    }
}
