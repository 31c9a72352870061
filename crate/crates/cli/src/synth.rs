//! Seeded synthetic rosette scenes: elliptical leaves fanned around the canvas
//! center, with a label raster, tight boxes, and a coarse feature grid.
//!
//! Leaf i sits at angle 2*pi*i/n plus a small jitter, as an ellipse whose
//! major axis points away from the center. At `overlap = 0` the minor radius
//! is capped so every leaf stays inside its own angular cone: any ellipse
//! point deviates from the axis by at most atan(b / (r0 - a)), so keeping that
//! below half the worst-case angular gap makes the leaves pairwise disjoint no
//! matter what the jitters draw. Positive `overlap` widens the leaves past the
//! cap. Later ids paint over earlier ones where they do collide.
//!
//! All randomness comes from one seeded stream with a fixed draw order (two
//! draws per leaf, then the feature noise), so a seed pins every output byte.

use masklab_core::assembly::BoundingBox;
use masklab_core::init::seeded_rng;
use masklab_core::metrics::LabelImage;
use masklab_core::Tensor;
use rand::Rng;

use crate::error::{CliError, Result};

const ANGLE_JITTER: f64 = 0.04;
const SIZE_JITTER: f64 = 0.03;
const RADIUS_FRAC: f64 = 0.30;
const MAJOR_FRAC: f64 = 0.18;
const MINOR_FRAC: f64 = 0.10;
const CONE_SAFETY: f64 = 0.9;
const FEATURE_NOISE: f64 = 0.01;
/// Feature grid cells are this many pixels square.
pub const FEATURE_STRIDE: usize = 4;
pub const FEATURE_CHANNELS: usize = 6;

#[derive(Debug, Clone, Copy)]
pub struct SynthParams {
    pub seed: u64,
    pub leaves: usize,
    pub size: usize,
    pub overlap: f64,
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.leaves == 0 || self.leaves > 64 {
            return Err(CliError::input(format!(
                "leaves must be 1..=64, got {}",
                self.leaves
            )));
        }
        if self.size < 16 || self.size > 2048 || !self.size.is_multiple_of(FEATURE_STRIDE) {
            return Err(CliError::input(format!(
                "size must be a multiple of {FEATURE_STRIDE} in 16..=2048, got {}",
                self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.overlap) || !self.overlap.is_finite() {
            return Err(CliError::input(format!(
                "overlap must be in [0, 1], got {}",
                self.overlap
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub labels: LabelImage,
    pub boxes: Vec<BoundingBox>,
    /// `(6, size/4, size/4)`: block foreground fraction, normalized x and y,
    /// normalized center distance, sine and cosine of the angle around the
    /// center, all lightly dithered.
    pub features: Tensor<f32>,
    /// Pixels claimed by more than one leaf before occlusion resolved them.
    pub contested_pixels: usize,
}

struct Leaf {
    center: (f64, f64),
    axis: (f64, f64),
    a: f64,
    b: f64,
}

impl Leaf {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        let along = (dx * self.axis.0 + dy * self.axis.1) / self.a;
        let across = (-dx * self.axis.1 + dy * self.axis.0) / self.b;
        along * along + across * across <= 1.0
    }
}

/// Largest minor radius that keeps every jittered leaf inside its cone.
fn disjoint_minor_cap(n: usize, r0: f64, a_max: f64) -> f64 {
    if n < 2 || r0 <= a_max {
        return f64::INFINITY;
    }
    let min_gap = std::f64::consts::TAU / n as f64 - 2.0 * ANGLE_JITTER;
    if min_gap <= 0.0 {
        return 0.0;
    }
    let half = (min_gap / 2.0).min(std::f64::consts::FRAC_PI_2 - 1e-6);
    CONE_SAFETY * (r0 - a_max) * half.tan() / (1.0 + SIZE_JITTER)
}

pub fn generate(params: &SynthParams) -> Result<SynthScene> {
    params.validate()?;
    let s = params.size as f64;
    let n = params.leaves;
    let mut rng = seeded_rng(params.seed);

    let r0 = RADIUS_FRAC * s;
    let a_nominal = MAJOR_FRAC * s;
    let cap = disjoint_minor_cap(n, r0, a_nominal * (1.0 + SIZE_JITTER));
    let b_base = (MINOR_FRAC * s).min(cap);
    let b_nominal = if params.overlap == 0.0 {
        b_base
    } else {
        b_base * (1.0 + 3.0 * params.overlap)
    };

    let mut leaves = Vec::with_capacity(n);
    for i in 0..n {
        let angle = std::f64::consts::TAU * i as f64 / n as f64
            + rng.gen_range(-ANGLE_JITTER..ANGLE_JITTER);
        let scale = 1.0 + rng.gen_range(-SIZE_JITTER..SIZE_JITTER);
        let axis = (angle.cos(), angle.sin());
        leaves.push(Leaf {
            center: (s / 2.0 + r0 * axis.0, s / 2.0 + r0 * axis.1),
            axis,
            a: a_nominal * scale,
            b: b_nominal * scale,
        });
    }

    let size = params.size;
    let mut ids = vec![0u32; size * size];
    let mut contested_pixels = 0;
    for y in 0..size {
        for x in 0..size {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut claims = 0usize;
            for (i, leaf) in leaves.iter().enumerate() {
                if leaf.contains(cx, cy) {
                    claims += 1;
                    ids[y * size + x] = i as u32 + 1;
                }
            }
            if claims > 1 {
                contested_pixels += 1;
            }
        }
    }

    let mut boxes = Vec::with_capacity(n);
    for id in 1..=n as u32 {
        let mut lo = (usize::MAX, usize::MAX);
        let mut hi = (0usize, 0usize);
        let mut seen = false;
        for y in 0..size {
            for x in 0..size {
                if ids[y * size + x] == id {
                    seen = true;
                    lo = (lo.0.min(x), lo.1.min(y));
                    hi = (hi.0.max(x), hi.1.max(y));
                }
            }
        }
        if seen {
            boxes.push(BoundingBox::new(
                lo.0 as f64,
                lo.1 as f64,
                (hi.0 + 1) as f64,
                (hi.1 + 1) as f64,
                1.0,
            )?);
        }
    }

    let grid = size / FEATURE_STRIDE;
    let mut fdata = vec![0f32; FEATURE_CHANNELS * grid * grid];
    for gy in 0..grid {
        for gx in 0..grid {
            let mut fg = 0usize;
            for dy in 0..FEATURE_STRIDE {
                for dx in 0..FEATURE_STRIDE {
                    let x = gx * FEATURE_STRIDE + dx;
                    let y = gy * FEATURE_STRIDE + dy;
                    if ids[y * size + x] != 0 {
                        fg += 1;
                    }
                }
            }
            let cx = (gx as f64 + 0.5) * FEATURE_STRIDE as f64;
            let cy = (gy as f64 + 0.5) * FEATURE_STRIDE as f64;
            let dx = cx - s / 2.0;
            let dy = cy - s / 2.0;
            let dist = (dx * dx + dy * dy).sqrt();
            let angle = dy.atan2(dx);
            let vals = [
                fg as f64 / (FEATURE_STRIDE * FEATURE_STRIDE) as f64,
                cx / s,
                cy / s,
                dist / (s / 2.0),
                angle.sin(),
                angle.cos(),
            ];
            for (c, v) in vals.into_iter().enumerate() {
                fdata[(c * grid + gy) * grid + gx] = v as f32;
            }
        }
    }
    for v in &mut fdata {
        *v += rng.gen_range(-FEATURE_NOISE..FEATURE_NOISE) as f32;
    }
    let features = Tensor::new(vec![FEATURE_CHANNELS, grid, grid], fdata)?;

    Ok(SynthScene {
        labels: LabelImage::new(size, size, ids)?,
        boxes,
        features,
        contested_pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(seed: u64, leaves: usize, overlap: f64) -> SynthParams {
        SynthParams {
            seed,
            leaves,
            size: 64,
            overlap,
        }
    }

    #[test]
    fn a_seed_pins_the_scene() {
        let a = generate(&params(7, 4, 0.0)).unwrap();
        let b = generate(&params(7, 4, 0.0)).unwrap();
        assert_eq!(a.labels.ids(), b.labels.ids());
        assert_eq!(a.features.data(), b.features.data());
        assert_eq!(a.boxes.len(), b.boxes.len());
        for (x, y) in a.boxes.iter().zip(&b.boxes) {
            assert_eq!((x.x1, x.y1, x.x2, x.y2), (y.x1, y.y1, y.x2, y.y2));
        }
        let c = generate(&params(8, 4, 0.0)).unwrap();
        assert_ne!(a.labels.ids(), c.labels.ids());
    }

    #[test]
    fn zero_overlap_keeps_leaves_disjoint() {
        for seed in 0..20 {
            for leaves in [2, 3, 4, 5, 8] {
                let scene = generate(&params(seed, leaves, 0.0)).unwrap();
                assert_eq!(
                    scene.contested_pixels, 0,
                    "seed {seed}, {leaves} leaves collided"
                );
            }
        }
    }

    #[test]
    fn heavy_overlap_produces_collisions() {
        let scene = generate(&params(3, 6, 0.9)).unwrap();
        assert!(scene.contested_pixels > 0);
    }

    #[test]
    fn every_leaf_gets_an_id_and_a_box() {
        let scene = generate(&params(5, 5, 0.0)).unwrap();
        let mut present: Vec<u32> = scene
            .labels
            .ids()
            .iter()
            .copied()
            .filter(|&v| v != 0)
            .collect();
        present.sort_unstable();
        present.dedup();
        assert_eq!(present, vec![1, 2, 3, 4, 5]);
        assert_eq!(scene.boxes.len(), 5);
    }

    #[test]
    fn boxes_are_tight_around_their_pixels() {
        let scene = generate(&params(11, 4, 0.0)).unwrap();
        let size = scene.labels.width();
        for (i, b) in scene.boxes.iter().enumerate() {
            let id = i as u32 + 1;
            let xs: Vec<usize> = (0..size * size)
                .filter(|&p| scene.labels.ids()[p] == id)
                .map(|p| p % size)
                .collect();
            let ys: Vec<usize> = (0..size * size)
                .filter(|&p| scene.labels.ids()[p] == id)
                .map(|p| p / size)
                .collect();
            assert_eq!(b.x1, *xs.iter().min().unwrap() as f64);
            assert_eq!(b.x2, (*xs.iter().max().unwrap() + 1) as f64);
            assert_eq!(b.y1, *ys.iter().min().unwrap() as f64);
            assert_eq!(b.y2, (*ys.iter().max().unwrap() + 1) as f64);
            assert_eq!(b.score, 1.0);
        }
    }

    #[test]
    fn features_have_the_documented_shape_and_ranges() {
        let scene = generate(&params(2, 4, 0.0)).unwrap();
        assert_eq!(scene.features.shape(), &[6, 16, 16]);
        for gy in 0..16 {
            for gx in 0..16 {
                let fg = scene.features.at3(0, gy, gx);
                assert!((-0.02..=1.02).contains(&fg), "foreground fraction {fg}");
            }
        }
    }

    #[test]
    fn bad_parameters_are_rejected() {
        assert!(generate(&params(0, 0, 0.0)).is_err());
        assert!(generate(&SynthParams { seed: 0, leaves: 3, size: 15, overlap: 0.0 }).is_err());
        assert!(generate(&params(0, 3, 1.5)).is_err());
    }
}
