//! Image transforms: quarter-turn rotations for the orientation pretext
//! task, the random-center mask control, and pad-crop-flip augmentation.
//!
//! Every transform allocates a fresh output tensor; inputs are never
//! mutated. Randomized transforms document their draw order so that seeded
//! runs stay reproducible across refactors.

use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{Error, Result};
use alloc::vec::Vec;

fn chw(image: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = image.shape_ref();
    if s.len() != 3 {
        return Err(Error::InvalidArgument {
            op,
            detail: alloc::format!("expected C×H×W image, got {s:?}"),
        });
    }
    Ok((s[0], s[1], s[2]))
}

/// Counter-clockwise rotation by `quarter_turns` × 90°. Labels follow the
/// same convention: 0 → identity, 1 → 90° CCW, 2 → 180°, 3 → 270° CCW.
/// Requires a square image so every orientation keeps the shape.
pub fn rotate90(image: &Tensor, quarter_turns: usize) -> Result<Tensor> {
    let (c, h, w) = chw(image, "rotate90")?;
    if h != w {
        return Err(Error::InvalidArgument {
            op: "rotate90",
            detail: alloc::format!("image must be square, got {h}×{w}"),
        });
    }
    let s = h;
    let src = image.data();
    let mut out = Vec::with_capacity(c * s * s);
    for ch in 0..c {
        let plane = &src[ch * s * s..(ch + 1) * s * s];
        for r in 0..s {
            for col in 0..s {
                let v = match quarter_turns % 4 {
                    0 => plane[r * s + col],
                    1 => plane[col * s + (s - 1 - r)],
                    2 => plane[(s - 1 - r) * s + (s - 1 - col)],
                    _ => plane[(s - 1 - col) * s + r],
                };
                out.push(v);
            }
        }
    }
    drop(src);
    Tensor::new(&[c, s, s], out)
}

/// How [`rotate_batch`] assigns orientations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RotationMode {
    /// Emit every image four times, once per orientation (labels 0..4 in
    /// order, grouped by source image).
    AllFour,
    /// Emit every image once with a uniformly drawn orientation.
    Sampled,
}

/// Rotated images paired with their orientation labels.
#[derive(Clone, Debug)]
pub struct RotationBatch {
    pub images: Vec<Tensor>,
    pub rotation_labels: Vec<usize>,
}

/// Builds the orientation-prediction batch. In `Sampled` mode one label is
/// drawn per image, in input order; `AllFour` mode draws nothing.
pub fn rotate_batch(images: &[Tensor], rng: &mut Rng, mode: RotationMode) -> Result<RotationBatch> {
    let mut out = RotationBatch { images: Vec::new(), rotation_labels: Vec::new() };
    for image in images {
        match mode {
            RotationMode::AllFour => {
                for label in 0..4 {
                    out.images.push(rotate90(image, label)?);
                    out.rotation_labels.push(label);
                }
            }
            RotationMode::Sampled => {
                let label = rng.below(4);
                out.images.push(rotate90(image, label)?);
                out.rotation_labels.push(label);
            }
        }
    }
    Ok(out)
}

/// Zeroes one 16×16 block, uniformly placed so it stays inside the central
/// 21×21 window (window top-left at floor((dim − 21) / 2)). The row offset
/// is drawn before the column offset. All channels share the block.
pub fn random_center_mask(image: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    const WINDOW: usize = 21;
    const BLOCK: usize = 16;
    let (c, h, w) = chw(image, "random_center_mask")?;
    if h < 26 || w < 26 {
        return Err(Error::InvalidArgument {
            op: "random_center_mask",
            detail: alloc::format!("spatial dims must be ≥ 26, got {h}×{w}"),
        });
    }
    let top0 = (h - WINDOW) / 2;
    let left0 = (w - WINDOW) / 2;
    let top = top0 + rng.below(WINDOW - BLOCK + 1);
    let left = left0 + rng.below(WINDOW - BLOCK + 1);

    let mut out = image.data().to_vec();
    for ch in 0..c {
        for r in top..top + BLOCK {
            let row = ch * h * w + r * w;
            out[row + left..row + left + BLOCK].fill(0.0);
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Mirrors columns in place: out[r][c] = in[r][W−1−c].
pub fn flip_horizontal(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(image, "flip_horizontal")?;
    let src = image.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for r in 0..h {
            let row = ch * h * w + r * w;
            out.extend((0..w).map(|col| src[row + (w - 1 - col)]));
        }
    }
    drop(src);
    Tensor::new(&[c, h, w], out)
}

/// Zero-pads by `pad` on every side, crops back to the original size at a
/// uniform offset, then mirrors horizontally with probability 1/2. Draw
/// order: row offset, column offset, flip. With pad = 0 both offsets are
/// forced to 0 and only the flip can change the image.
pub fn augment_crop_flip(image: &Tensor, pad: usize, rng: &mut Rng) -> Result<Tensor> {
    let (c, h, w) = chw(image, "augment_crop_flip")?;
    let dr = rng.below(2 * pad + 1);
    let dc = rng.below(2 * pad + 1);
    let flip = rng.bernoulli(0.5);

    let src = image.data();
    let mut out = alloc::vec![0.0; c * h * w];
    // Crop offset (dr, dc) into the padded image maps output pixel (r, c)
    // to source pixel (r + dr − pad, c + dc − pad) when that lands inside.
    for ch in 0..c {
        for r in 0..h {
            let sr = r + dr;
            if sr < pad || sr >= h + pad {
                continue;
            }
            for col in 0..w {
                let sc = col + dc;
                if sc < pad || sc >= w + pad {
                    continue;
                }
                out[ch * h * w + r * w + col] = src[ch * h * w + (sr - pad) * w + (sc - pad)];
            }
        }
    }
    drop(src);
    let cropped = Tensor::new(&[c, h, w], out)?;
    if flip {
        flip_horizontal(&cropped)
    } else {
        Ok(cropped)
    }
}
