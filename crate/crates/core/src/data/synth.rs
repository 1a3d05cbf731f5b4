use std::f32::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{normalize, Dataset, Item, Source};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SHAPES: [&str; 4] = ["disk", "square", "triangle", "cross"];

/// The (silhouette, stripe orientation) pair that defines one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthClass {
    pub shape: usize,
    /// Stripe direction in radians, in `[0, π)`.
    pub angle: f32,
}

impl SynthClass {
    /// Class `c` of `classes`. Shapes cycle fastest and orientations are
    /// offset per cycle, so every pair is distinct and any two of the
    /// first four classes differ in both cues.
    pub fn of(c: usize, classes: usize) -> Self {
        let orientations = classes.div_ceil(SHAPES.len()).max(4);
        let shape = c % SHAPES.len();
        let j = (shape + c / SHAPES.len()) % orientations;
        Self {
            shape,
            angle: PI * j as f32 / orientations as f32,
        }
    }

    pub fn name(&self, index: usize) -> String {
        format!(
            "c{index:02}_{}_{:03}deg",
            SHAPES[self.shape],
            (self.angle.to_degrees()).round() as u32
        )
    }

    fn inside(&self, dx: f32, dy: f32, r: f32) -> bool {
        match self.shape {
            0 => dx * dx + dy * dy <= r * r,
            1 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            2 => dy <= 0.5 * r && dy >= -r + 1.7 * dx.abs(),
            _ => {
                let (ax, ay) = (dx.abs(), dy.abs());
                (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r)
            }
        }
    }
}

/// One `[3, side, side]` image in `[0, 1]`: a striped silhouette on a
/// noisy background with random placement, size, phase and tint.
pub fn render_synthetic(class: SynthClass, side: usize, rng: &mut impl Rng) -> Tensor {
    let s = side as f32;
    let background: f32 = rng.gen_range(0.3..0.7);
    let (cx, cy) = (s * rng.gen_range(0.38..0.62), s * rng.gen_range(0.38..0.62));
    let r = s * rng.gen_range(0.22..0.32);
    let wavelength = s / 10.0;
    let phase: f32 = rng.gen_range(0.0..2.0 * PI);
    let tint: [f32; 3] = [
        rng.gen_range(0.7..1.0),
        rng.gen_range(0.7..1.0),
        rng.gen_range(0.7..1.0),
    ];
    let (cos, sin) = (class.angle.cos(), class.angle.sin());
    let plane = side * side;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..side {
        for x in 0..side {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let base = if class.inside(dx, dy, r) {
                let u = dx * cos + dy * sin;
                Some(0.35 * (2.0 * PI * u / wavelength + phase).sin())
            } else {
                None
            };
            for c in 0..3 {
                let noise: f32 = rng.gen_range(-0.08..0.08);
                let v = match base {
                    Some(stripe) => 0.5 + stripe * tint[c],
                    None => background,
                };
                data[c * plane + y * side + x] = (v + noise).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(&[3, side, side], data).expect("sized")
}

/// `classes × per_class` normalized images, class-major.
pub fn gen_synthetic(classes: usize, per_class: usize, side: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument(
            "synthetic set needs at least two classes".into(),
        ));
    }
    if side < 8 {
        return Err(Error::InvalidArgument(
            "synthetic images need side ≥ 8".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let defs: Vec<SynthClass> = (0..classes).map(|c| SynthClass::of(c, classes)).collect();
    let mut items = Vec::with_capacity(classes * per_class);
    for (label, def) in defs.iter().enumerate() {
        for _ in 0..per_class {
            let mut img = render_synthetic(*def, side, &mut rng);
            normalize(&mut img);
            items.push(Item {
                source: Source::Memory(Arc::new(img)),
                label,
            });
        }
    }
    Ok(Dataset {
        items,
        class_names: defs.iter().enumerate().map(|(i, d)| d.name(i)).collect(),
        resolution: side,
    })
}
