//! Standard preprocessing applied to every image before the network sees it.

use image::{imageops, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::hflip;
use crate::diff::Tensor;
use crate::real::Real;

/// Per-channel statistics on the unit-interval scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl Normalizer {
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0u64;
        for img in images {
            for p in img.pixels() {
                for c in 0..3 {
                    let v = p.0[c] as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Normalizer::default();
        }
        let mut out = Normalizer::default();
        for c in 0..3 {
            let mean = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - mean * mean).max(0.0);
            out.mean[c] = mean;
            out.std[c] = var.sqrt().max(1e-3);
        }
        out
    }

    /// `[3,H,W]` tensor of standardized unit-interval values.
    pub fn to_tensor<T: Real>(&self, img: &RgbImage) -> Tensor<T> {
        let (w, h) = img.dimensions();
        let plane = (w * h) as usize;
        let mut data = vec![T::zero(); 3 * plane];
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                let v = p.0[c] as f64 / 255.0;
                data[c * plane + i] = T::of((v - self.mean[c]) / self.std[c]);
            }
        }
        Tensor::new(vec![3, h as usize, w as usize], data).expect("3*H*W values")
    }
}

/// Resizes to `res`×`res` (bilinear) unless already that size.
pub fn resize(img: &RgbImage, res: u32) -> RgbImage {
    if img.dimensions() == (res, res) {
        img.clone()
    } else {
        imageops::resize(img, res, res, imageops::FilterType::Triangle)
    }
}

/// Horizontal flip with probability 0.5.
pub fn random_flip(img: RgbImage, rng: &mut impl Rng) -> RgbImage {
    if rng.random::<bool>() {
        hflip(&img)
    } else {
        img
    }
}
