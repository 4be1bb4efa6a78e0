//! Synthetic shape dataset: class identity is carried by one global shape
//! per image, while textures (grating + noise) are drawn identically for
//! every class. A fixed vertical luminance ramp gives orientation
//! prediction something to latch onto without leaking class information,
//! since every class shares it.

use super::LabeledDataset;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{Error, Result};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::TAU;

/// The four shape classes the generator can draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Disk,
    Square,
    Cross,
    Bar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Cross,
        ShapeKind::Bar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Cross => "cross",
            ShapeKind::Bar => "bar",
        }
    }
}

impl core::str::FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disk" => Ok(ShapeKind::Disk),
            "square" => Ok(ShapeKind::Square),
            "cross" => Ok(ShapeKind::Cross),
            "bar" => Ok(ShapeKind::Bar),
            other => Err(Error::InvalidArgument {
                op: "ShapeKind::from_str",
                detail: alloc::format!(
                    "unknown shape kind {other:?}; expected disk, square, cross, or bar"
                ),
            }),
        }
    }
}

/// Signed distance to the shape boundary in the shape's own frame,
/// negative inside. `half` is the nominal half-extent in pixels.
fn signed_distance(kind: ShapeKind, px: f64, py: f64, half: f64) -> f64 {
    let (ax, ay) = (libm::fabs(px), libm::fabs(py));
    match kind {
        ShapeKind::Disk => libm::hypot(px, py) - 0.95 * half,
        ShapeKind::Square => ax.max(ay) - 0.80 * half,
        ShapeKind::Bar => (ax - 1.55 * half).max(ay - 0.28 * half),
        ShapeKind::Cross => {
            let horizontal = (ax - 1.35 * half).max(ay - 0.34 * half);
            let vertical = (ay - 1.35 * half).max(ax - 0.34 * half);
            horizontal.min(vertical)
        }
    }
}

/// One grayscale image. Draw order: center x, center y, half-extent,
/// shape angle, grating angle, grating wavelength, grating phase, then one
/// normal noise draw per pixel in row-major order.
fn render(kind: ShapeKind, size: usize, rng: &mut Rng) -> Tensor {
    let s = size as f64;
    let cx = rng.uniform_in(0.36, 0.64) * s;
    let cy = rng.uniform_in(0.36, 0.64) * s;
    let half = rng.uniform_in(0.20, 0.28) * s;
    let angle = rng.uniform_in(0.0, TAU);
    let grating_angle = rng.uniform_in(0.0, TAU);
    let wavelength = rng.uniform_in(0.22, 0.50) * s;
    let phase = rng.uniform_in(0.0, TAU);

    let (ca, sa) = (libm::cos(angle), libm::sin(angle));
    let (gx, gy) = (libm::cos(grating_angle), libm::sin(grating_angle));

    let mut data = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let x = c as f64 + 0.5;
            let y = r as f64 + 0.5;
            let (dx, dy) = (x - cx, y - cy);
            let sd = signed_distance(kind, ca * dx + sa * dy, -sa * dx + ca * dy, half);
            let coverage = (0.5 - sd / 1.2).clamp(0.0, 1.0);
            // The ramp brightens toward the bottom row in every image.
            let ramp = 0.18 * (y / s - 0.5);
            let grating = 0.07 * libm::sin(TAU * (gx * x + gy * y) / wavelength + phase);
            let v = 0.32 + ramp + grating + 0.42 * coverage + 0.02 * rng.normal();
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Tensor::new(&[1, size, size], data).expect("render output matches its own shape")
}

/// Generates `n_per_class` images for each entry of `classes`, labeled by
/// position in the list, in class-major order.
pub fn synth_shapes(
    n_per_class: usize,
    classes: &[ShapeKind],
    image_size: usize,
    rng: &mut Rng,
) -> Result<LabeledDataset> {
    if image_size < 16 {
        return Err(Error::InvalidArgument {
            op: "synth_shapes",
            detail: alloc::format!("image_size must be ≥ 16, got {image_size}"),
        });
    }
    if classes.is_empty() {
        return Err(Error::InvalidArgument {
            op: "synth_shapes",
            detail: "classes list is empty".into(),
        });
    }
    let mut images = Vec::with_capacity(classes.len() * n_per_class);
    let mut labels = Vec::with_capacity(classes.len() * n_per_class);
    for (label, &kind) in classes.iter().enumerate() {
        for _ in 0..n_per_class {
            images.push(render(kind, image_size, rng));
            labels.push(label);
        }
    }
    let names: Vec<String> = classes.iter().map(|k| k.name().to_string()).collect();
    LabeledDataset::new(images, labels, names)
}
