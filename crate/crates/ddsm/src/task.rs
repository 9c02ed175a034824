//! Synthetic segmentation data: random star polygons rasterized onto a
//! small label grid, rendered into a 3-channel image with a fixed per-class
//! palette plus seeded noise. Everything is deterministic in the seed.

use crate::error::{DdsmError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct SyntheticTask {
    pub num_classes: usize,
    pub h: usize,
    pub w: usize,
    /// Uniform pixel noise amplitude added to the palette colors.
    pub noise: f64,
}

impl SyntheticTask {
    pub fn new(num_classes: usize, h: usize, w: usize, noise: f64) -> Result<Self> {
        if num_classes < 2 {
            return Err(DdsmError::Config(
                "a segmentation task needs at least two classes".into(),
            ));
        }
        if h == 0 || w == 0 || !noise.is_finite() || noise < 0.0 {
            return Err(DdsmError::Config(format!(
                "bad task geometry {h}x{w} / noise {noise}"
            )));
        }
        Ok(Self {
            num_classes,
            h,
            w,
            noise,
        })
    }

    /// One (image, per-pixel labels) pair. Labels are row-major.
    pub fn sample(&self, rng: &mut Rng) -> (Tensor, Vec<usize>) {
        let mut labels = vec![0usize; self.h * self.w];
        // Paint one star polygon per non-background class, later classes
        // over earlier ones.
        for class in 1..self.num_classes {
            let poly = self.random_polygon(rng);
            for y in 0..self.h {
                for x in 0..self.w {
                    if point_in_polygon(&poly, y as f64 + 0.5, x as f64 + 0.5) {
                        labels[y * self.w + x] = class;
                    }
                }
            }
        }
        let mut image = Tensor::zeros(&[3, self.h, self.w]).expect("valid shape");
        for y in 0..self.h {
            for x in 0..self.w {
                let class = labels[y * self.w + x];
                for ch in 0..3 {
                    let v = palette(class, ch) + self.noise * rng.uniform(-1.0, 1.0);
                    image.set3(ch, y, x, v);
                }
            }
        }
        (image, labels)
    }

    pub fn dataset(&self, rng: &mut Rng, count: usize) -> Vec<(Tensor, Vec<usize>)> {
        (0..count).map(|_| self.sample(rng)).collect()
    }

    /// Star polygon: 3-5 vertices at sorted angles around a random center,
    /// radii jittered, so edges never self-intersect.
    fn random_polygon(&self, rng: &mut Rng) -> Vec<(f64, f64)> {
        let (hf, wf) = (self.h as f64, self.w as f64);
        let cy = rng.uniform(0.25 * hf, 0.75 * hf);
        let cx = rng.uniform(0.25 * wf, 0.75 * wf);
        let base_r = rng.uniform(hf.min(wf) / 6.0, hf.min(wf) / 3.0);
        let vertices = 3 + rng.below(3);
        let mut angles: Vec<f64> = (0..vertices)
            .map(|_| rng.uniform(0.0, std::f64::consts::TAU))
            .collect();
        angles.sort_by(|a, b| a.partial_cmp(b).expect("finite angles"));
        angles
            .into_iter()
            .map(|t| {
                let r = base_r * rng.uniform(0.6, 1.2);
                (cy + r * t.sin(), cx + r * t.cos())
            })
            .collect()
    }
}

/// Even-odd ray casting against the polygon edges.
fn point_in_polygon(poly: &[(f64, f64)], y: f64, x: f64) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (y1, x1) = poly[i];
        let (y2, x2) = poly[(i + 1) % n];
        if (y1 > y) != (y2 > y) {
            let x_cross = x1 + (y - y1) / (y2 - y1) * (x2 - x1);
            if x < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

/// Fixed, seed-independent class color in [-1, 1] per channel.
pub fn palette(class: usize, ch: usize) -> f64 {
    let mut rng = Rng::new(0x7a11_e77e ^ ((class * 3 + ch) as u64).wrapping_mul(0x9e37));
    rng.uniform(-1.0, 1.0)
}
