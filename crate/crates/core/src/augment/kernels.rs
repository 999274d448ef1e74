//! Pixel-level image transforms on 8-bit RGB buffers.
//!
//! Geometric transforms resample bilinearly with a constant mid-gray fill;
//! photometric transforms follow the usual PIL `ImageOps`/`ImageEnhance`
//! definitions. All outputs are rounded and clamped to `0..=255`.

use image::{imageops, Rgb, RgbImage};

/// Fill for pixels that map outside the source image.
pub const FILL: u8 = 128;

#[inline]
fn clamp_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn map_pixels(img: &RgbImage, f: impl Fn(u8, usize) -> u8) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        for c in 0..3 {
            p.0[c] = f(p.0[c], c);
        }
    }
    out
}

fn apply_lut(img: &RgbImage, luts: &[[u8; 256]; 3]) -> RgbImage {
    map_pixels(img, |v, c| luts[c][v as usize])
}

/// Blend `a + factor * (b - a)` per channel, where `a` is the degenerate image.
fn blend(degenerate: &RgbImage, img: &RgbImage, factor: f32) -> RgbImage {
    let mut out = img.clone();
    for (o, (d, s)) in out.pixels_mut().zip(degenerate.pixels().zip(img.pixels())) {
        for c in 0..3 {
            let dv = d.0[c] as f32;
            o.0[c] = clamp_u8(dv + factor * (s.0[c] as f32 - dv));
        }
    }
    out
}

fn sample_bilinear(img: &RgbImage, sx: f32, sy: f32) -> [u8; 3] {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = sx.floor();
    let y0 = sy.floor();
    let (fx, fy) = (sx - x0, sy - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let fetch = |x: i64, y: i64, c: usize| -> f32 {
        if x < 0 || y < 0 || x >= w || y >= h {
            FILL as f32
        } else {
            img.get_pixel(x as u32, y as u32).0[c] as f32
        }
    };
    let mut px = [0u8; 3];
    for (c, out) in px.iter_mut().enumerate() {
        let top = fetch(x0, y0, c) * (1.0 - fx) + fetch(x0 + 1, y0, c) * fx;
        let bottom = fetch(x0, y0 + 1, c) * (1.0 - fx) + fetch(x0 + 1, y0 + 1, c) * fx;
        *out = clamp_u8(top * (1.0 - fy) + bottom * fy);
    }
    px
}

/// Inverse-maps every output pixel through `src(x, y)` (in pixel coordinates
/// relative to the image center).
fn warp(img: &RgbImage, src: impl Fn(f32, f32) -> (f32, f32)) -> RgbImage {
    let (w, h) = img.dimensions();
    let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
    RgbImage::from_fn(w, h, |x, y| {
        let (dx, dy) = (x as f32 - cx, y as f32 - cy);
        let (sx, sy) = src(dx, dy);
        Rgb(sample_bilinear(img, sx + cx, sy + cy))
    })
}

pub fn shear_x(img: &RgbImage, factor: f32) -> RgbImage {
    if factor == 0.0 {
        return img.clone();
    }
    warp(img, |x, y| (x + factor * y, y))
}

pub fn shear_y(img: &RgbImage, factor: f32) -> RgbImage {
    if factor == 0.0 {
        return img.clone();
    }
    warp(img, |x, y| (x, y + factor * x))
}

/// Shifts content right by `pixels` (negative: left).
pub fn translate_x(img: &RgbImage, pixels: f32) -> RgbImage {
    if pixels == 0.0 {
        return img.clone();
    }
    warp(img, |x, y| (x - pixels, y))
}

pub fn translate_y(img: &RgbImage, pixels: f32) -> RgbImage {
    if pixels == 0.0 {
        return img.clone();
    }
    warp(img, |x, y| (x, y - pixels))
}

/// Counter-clockwise rotation about the image center.
pub fn rotate(img: &RgbImage, degrees: f32) -> RgbImage {
    if degrees == 0.0 {
        return img.clone();
    }
    let (s, c) = degrees.to_radians().sin_cos();
    // image y grows downward, so CCW on screen is (x,y) -> (c x + s y, -s x + c y)
    warp(img, |x, y| (c * x - s * y, s * x + c * y))
}

pub fn auto_contrast(img: &RgbImage) -> RgbImage {
    let mut luts = [[0u8; 256]; 3];
    for (c, lut) in luts.iter_mut().enumerate() {
        let (mut lo, mut hi) = (255u8, 0u8);
        for p in img.pixels() {
            lo = lo.min(p.0[c]);
            hi = hi.max(p.0[c]);
        }
        for (i, slot) in lut.iter_mut().enumerate() {
            *slot = if hi <= lo {
                i as u8
            } else {
                let scale = 255.0 / (hi - lo) as f32;
                clamp_u8((i as f32 - lo as f32) * scale)
            };
        }
    }
    apply_lut(img, &luts)
}

pub fn invert(img: &RgbImage) -> RgbImage {
    map_pixels(img, |v, _| 255 - v)
}

/// Per-channel histogram equalization (PIL's algorithm).
pub fn equalize(img: &RgbImage) -> RgbImage {
    let mut luts = [[0u8; 256]; 3];
    for (c, lut) in luts.iter_mut().enumerate() {
        let mut hist = [0u64; 256];
        for p in img.pixels() {
            hist[p.0[c] as usize] += 1;
        }
        let nonzero: Vec<u64> = hist.iter().copied().filter(|&h| h > 0).collect();
        let step = if nonzero.len() <= 1 {
            0
        } else {
            (nonzero.iter().sum::<u64>() - nonzero[nonzero.len() - 1]) / 255
        };
        if step == 0 {
            for (i, slot) in lut.iter_mut().enumerate() {
                *slot = i as u8;
            }
            continue;
        }
        let mut n = step / 2;
        for (i, slot) in lut.iter_mut().enumerate() {
            *slot = (n / step).min(255) as u8;
            n += hist[i];
        }
    }
    apply_lut(img, &luts)
}

/// Inverts every channel value at or above `threshold` (256 leaves the image unchanged).
pub fn solarize(img: &RgbImage, threshold: u16) -> RgbImage {
    map_pixels(img, |v, _| if v as u16 >= threshold { 255 - v } else { v })
}

/// Keeps the top `bits` bits of each channel.
pub fn posterize(img: &RgbImage, bits: u8) -> RgbImage {
    let bits = bits.clamp(1, 8);
    let mask: u8 = !((1u16 << (8 - bits)) - 1) as u8;
    map_pixels(img, |v, _| v & mask)
}

fn grayscale(img: &RgbImage) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        let [r, g, b] = p.0;
        let l = ((r as u32 * 299 + g as u32 * 587 + b as u32 * 114) as f32 / 1000.0).round() as u8;
        p.0 = [l, l, l];
    }
    out
}

/// Saturation: factor 0 gives grayscale, 1 the original.
pub fn color(img: &RgbImage, factor: f32) -> RgbImage {
    blend(&grayscale(img), img, factor)
}

/// Factor 0 gives black, 1 the original.
pub fn brightness(img: &RgbImage, factor: f32) -> RgbImage {
    map_pixels(img, |v, _| clamp_u8(v as f32 * factor))
}

/// Factor 0 gives the smoothed image, 1 the original, 2 a sharpened one.
pub fn sharpness(img: &RgbImage, factor: f32) -> RgbImage {
    let (w, h) = img.dimensions();
    let mut smooth = img.clone();
    if w >= 3 && h >= 3 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut acc = [0u32; 3];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let wgt = if dx == 1 && dy == 1 { 5 } else { 1 };
                        let p = img.get_pixel(x + dx - 1, y + dy - 1);
                        for c in 0..3 {
                            acc[c] += wgt * p.0[c] as u32;
                        }
                    }
                }
                let px = smooth.get_pixel_mut(x, y);
                for c in 0..3 {
                    px.0[c] = clamp_u8(acc[c] as f32 / 13.0);
                }
            }
        }
    }
    blend(&smooth, img, factor)
}

/// `(1 - weight) * img + weight * partner`; the partner is resized if needed.
pub fn sample_pairing(img: &RgbImage, partner: &RgbImage, weight: f32) -> RgbImage {
    let resized;
    let partner = if partner.dimensions() == img.dimensions() {
        partner
    } else {
        resized = imageops::resize(partner, img.width(), img.height(), imageops::FilterType::Triangle);
        &resized
    };
    let mut out = img.clone();
    for (o, p) in out.pixels_mut().zip(partner.pixels()) {
        for c in 0..3 {
            o.0[c] = clamp_u8((1.0 - weight) * o.0[c] as f32 + weight * p.0[c] as f32);
        }
    }
    out
}

pub fn hflip(img: &RgbImage) -> RgbImage {
    imageops::flip_horizontal(img)
}
