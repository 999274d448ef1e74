//! Procedural place-recognition data.
//!
//! Each place is a textured ground with a random layout of coloured shapes.
//! Its variants are shifted crops of the scene with an illumination gain and
//! a few occluding rectangles.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{write_manifest, PlaceDataset, Record, Split, MANIFEST_NAME};
use crate::error::{Error, Result};
use crate::rngs::derive_seed;

pub const PLACE_SPACING: f64 = 4.0;
pub const PLACE_JITTER: f64 = 0.25;
pub const VARIANT_SPREAD: f64 = 0.25;
pub const DEFAULT_RADIUS: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub places: usize,
    pub variants: usize,
    pub resolution: u32,
    pub seed: u64,
}

#[derive(Clone, Copy)]
enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
    Stripe { a: f64, b: f64, c: f64, width: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Stripe { a, b, c, width } => (a * x + b * y + c).abs() <= width,
        }
    }
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random_range(0.0..255.0), rng.random_range(0.0..255.0), rng.random_range(0.0..255.0)]
}

/// Full scene canvas for one place; variants crop out of it.
pub fn render_scene(rng: &mut impl Rng, side: u32) -> RgbImage {
    let s = side as f64;
    let base = random_color(rng);
    let tint = random_color(rng);
    let freq = rng.random_range(0.05..0.35);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let n_shapes = rng.random_range(5..10);
    let shapes: Vec<(Shape, [f64; 3])> = (0..n_shapes)
        .map(|_| {
            let shape = match rng.random_range(0..3) {
                0 => {
                    let (x0, y0) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
                    let (w, h) = (rng.random_range(0.1..0.4) * s, rng.random_range(0.1..0.4) * s);
                    Shape::Rect {
                        x0,
                        y0,
                        x1: x0 + w,
                        y1: y0 + h,
                    }
                }
                1 => Shape::Disc {
                    cx: rng.random_range(0.0..s),
                    cy: rng.random_range(0.0..s),
                    r: rng.random_range(0.05..0.2) * s,
                },
                _ => {
                    let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
                    Shape::Stripe {
                        a: t.cos(),
                        b: t.sin(),
                        c: -rng.random_range(0.0..s) * (t.cos() + t.sin()) / 2.0,
                        width: rng.random_range(0.02..0.06) * s,
                    }
                }
            };
            (shape, random_color(rng))
        })
        .collect();
    let mut img = RgbImage::new(side, side);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let wave = 0.5 + 0.5 * ((fx * ca + fy * sa) * freq).sin();
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = base[k] * (1.0 - wave * 0.5) + tint[k] * wave * 0.5;
        }
        for (shape, col) in shapes.iter() {
            if shape.contains(fx, fy) {
                c = *col;
            }
        }
        let noise = rng.random_range(-12.0..12.0);
        *px = Rgb(c.map(|v| (v + noise).clamp(0.0, 255.0) as u8));
    }
    img
}

/// One observed view of a scene: shifted crop, gain and occluders.
pub fn render_variant(scene: &RgbImage, res: u32, rng: &mut impl Rng) -> RgbImage {
    let max_off = scene.width().saturating_sub(res);
    let ox = rng.random_range(0..=max_off);
    let oy = rng.random_range(0..=max_off);
    let gain: f64 = rng.random_range(0.6..1.4);
    let mut img = RgbImage::from_fn(res, res, |x, y| {
        let p = scene.get_pixel(x + ox, y + oy);
        Rgb(p.0.map(|v| (v as f64 * gain).round().clamp(0.0, 255.0) as u8))
    });
    let occluders = rng.random_range(0..=2);
    let r = res as f64;
    for _ in 0..occluders {
        let w = (rng.random_range(0.1..0.25) * r) as u32;
        let h = (rng.random_range(0.1..0.25) * r) as u32;
        let x0 = rng.random_range(0..res.saturating_sub(w).max(1));
        let y0 = rng.random_range(0..res.saturating_sub(h).max(1));
        let g: u8 = rng.random_range(30..220);
        for y in y0..(y0 + h).min(res) {
            for x in x0..(x0 + w).min(res) {
                img.put_pixel(x, y, Rgb([g, g, g]));
            }
        }
    }
    img
}

/// Place centres on a jittered grid; any two are at least
/// `PLACE_SPACING - 2*PLACE_JITTER` apart.
pub fn place_centres(places: usize, rng: &mut impl Rng) -> Vec<(f64, f64)> {
    let cols = (places as f64).sqrt().ceil().max(1.0) as usize;
    (0..places)
        .map(|p| {
            let gx = (p % cols) as f64 * PLACE_SPACING + rng.random_range(-PLACE_JITTER..=PLACE_JITTER);
            let gy = (p / cols) as f64 * PLACE_SPACING + rng.random_range(-PLACE_JITTER..=PLACE_JITTER);
            (gx, gy)
        })
        .collect()
}

/// Writes `places × variants` PNGs and a manifest; variant 0 of every place is
/// the query.
pub fn gen_data(cfg: &SynthConfig, out: &Path) -> Result<PlaceDataset> {
    if cfg.places == 0 || cfg.variants < 2 || cfg.resolution < 8 {
        return Err(Error::Config(format!(
            "gen-data needs places >= 1, variants >= 2 and res >= 8, got {cfg:?}"
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let res = cfg.resolution;
    let canvas = (res as f64 * 1.2).ceil() as u32;
    let centres = place_centres(cfg.places, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "layout", &[])));
    let per_place = crate::exec::try_map_range(cfg.places, |p| -> Result<Vec<Record>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "place", &[p as u64]));
        let scene = render_scene(&mut rng, canvas);
        let mut rows = Vec::with_capacity(cfg.variants);
        for v in 0..cfg.variants {
            let img = render_variant(&scene, res, &mut rng);
            let name = format!("p{p:04}_v{v}.png");
            let path = out.join(&name);
            img.save(&path).map_err(|source| Error::Image { path, source })?;
            let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let rad: f64 = rng.random_range(0.0..=VARIANT_SPREAD);
            rows.push(Record {
                path: name,
                place_id: p,
                x: centres[p].0 + rad * ang.cos(),
                y: centres[p].1 + rad * ang.sin(),
                split: if v == 0 { Split::Query } else { Split::Database },
            });
        }
        Ok(rows)
    })?;
    let records: Vec<Record> = per_place.into_iter().flatten().collect();
    write_manifest(&out.join(MANIFEST_NAME), &records)?;
    Ok(PlaceDataset::new(out, records, DEFAULT_RADIUS))
}
