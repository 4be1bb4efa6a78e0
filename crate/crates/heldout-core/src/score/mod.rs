//! Anomaly scorers: higher score = more anomalous.
//!
//! Two families live here. Classifier-based scorers read a frozen
//! multi-head model: plain predictive confidence ([`msp_score`]) and its
//! perturbed, temperature-scaled refinement ([`odin_score`]). Pixel-level
//! baselines need no model at all: a channel-wise mixture of three
//! Gaussians over pixel values ([`fit_pixel_gmm`], [`gmm_score`]) and the
//! mean edge-gradient energy ([`edge_energy_score`]). The baselines exist
//! to keep the benchmark honest: a detector that loses to raw pixel
//! statistics is not detecting semantics.

use crate::data::{stack_images, HoldOutSplit};
use crate::model::MultiHeadModel;
use crate::tensor::{Graph, Tensor};
use crate::{Error, Result};
use alloc::vec::Vec;

/// A scored test example, ready for threshold-free evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredExample {
    pub score: f64,
    pub is_anomaly: bool,
}

/// Convenience constructor used by scorer implementations and tests.
pub fn scored(pairs: impl IntoIterator<Item = (f64, bool)>) -> Vec<ScoredExample> {
    pairs
        .into_iter()
        .map(|(score, is_anomaly)| ScoredExample { score, is_anomaly })
        .collect()
}

/// Temperature and perturbation magnitude for [`odin_score`]. The defaults
/// are fixed once for all experiments rather than tuned per anomaly set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdinConfig {
    pub temperature: f64,
    pub epsilon: f64,
}

impl Default for OdinConfig {
    fn default() -> Self {
        OdinConfig { temperature: 1000.0, epsilon: 5e-5 }
    }
}

impl OdinConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument {
                op: "odin",
                detail: alloc::format!("temperature must be positive, got {}", self.temperature),
            });
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument {
                op: "odin",
                detail: alloc::format!("epsilon must be ≥ 0, got {}", self.epsilon),
            });
        }
        Ok(())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    let _ = row[best];
    best
}

/// Max softmax probability of `row / t`, computed against the shifted
/// maximum so the exponentials never overflow.
fn max_prob_at_temperature(row: &[f64], t: f64) -> f64 {
    let m = row[argmax(row)];
    let mut denom = 0.0;
    for &v in row {
        denom += libm::exp((v - m) / t);
    }
    1.0 / denom
}

/// Forward the image and return 1 − max softmax(logits / t).
fn confidence_score(model: &MultiHeadModel, image: &Tensor, t: f64) -> Result<f64> {
    let x = stack_images(&[image])?;
    let mut g = Graph::inference();
    let logits = model.class_logits(&mut g, &x)?;
    let row = logits.data();
    Ok(1.0 - max_prob_at_temperature(&row, t))
}

/// Predictive-confidence anomaly score: 1 − max softmax probability of the
/// class logits. Higher = more anomalous.
pub fn msp_score(model: &MultiHeadModel, image: &Tensor) -> Result<f64> {
    confidence_score(model, image, 1.0)
}

/// The perturbed input ODIN rescores: one signed-gradient descent step on
/// the negative log max-probability of the temperature-scaled softmax,
/// clamped back to the pixel range. With ε = 0 this is the input itself.
pub fn odin_perturb(
    model: &MultiHeadModel,
    image: &Tensor,
    cfg: &OdinConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        return Ok(image.clone());
    }
    // The backward pass below accumulates into every tensor that asks for
    // gradients; a model still in training would silently collect stray
    // gradient from the scoring pass.
    if model.named_params().iter().any(|(_, p)| p.requires_grad()) {
        return Err(Error::InvalidArgument {
            op: "odin",
            detail: "model must be frozen before scoring".into(),
        });
    }

    let x = stack_images(&[image])?;
    x.set_requires_grad(true);
    let mut g = Graph::new();
    let logits = model.class_logits(&mut g, &x)?;
    let target = argmax(&logits.data());
    let scaled = g.scale(&logits, 1.0 / cfg.temperature)?;
    let lp = g.log_softmax(&scaled)?;
    let k = model.n_classes;
    let mut pick = alloc::vec![0.0; k];
    pick[target] = 1.0;
    let mask = Tensor::new(&[1, k], pick)?;
    let picked = g.mul(&lp, &mask)?;
    let total = g.sum(&picked)?;
    let loss = g.scale(&total, -1.0)?;
    g.backward(&loss)?;

    let grad = x.grad().ok_or(Error::MissingGrad { param: "input image".into() })?;
    let data = x.data();
    let perturbed: Vec<f64> = data
        .iter()
        .zip(&grad)
        .map(|(&v, &gv)| {
            let s = if gv > 0.0 {
                1.0
            } else if gv < 0.0 {
                -1.0
            } else {
                0.0
            };
            (v - cfg.epsilon * s).clamp(0.0, 1.0)
        })
        .collect();
    drop(data);
    Tensor::new(image.shape_ref(), perturbed)
}

/// Perturbation-refined confidence score: perturb the input toward higher
/// confidence, then return 1 − max softmax of the temperature-scaled
/// logits of the perturbed input. At T = 1, ε = 0 this is exactly
/// [`msp_score`].
pub fn odin_score(model: &MultiHeadModel, image: &Tensor, cfg: &OdinConfig) -> Result<f64> {
    let perturbed = odin_perturb(model, image, cfg)?;
    confidence_score(model, &perturbed, cfg.temperature)
}

/// Smallest variance a mixture component may report; also the clamp that
/// keeps degenerate (constant) channels finite.
pub const VARIANCE_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.8378770664093453;

/// Three-component scalar Gaussian mixture over one channel's pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelMixture {
    pub weights: [f64; 3],
    pub means: [f64; 3],
    pub variances: [f64; 3],
}

impl ChannelMixture {
    /// Log-likelihood of one pixel value under the mixture.
    pub fn log_likelihood(&self, v: f64) -> f64 {
        let mut lp = [0.0; 3];
        for k in 0..3 {
            let d = v - self.means[k];
            lp[k] = libm::log(self.weights[k].max(f64::MIN_POSITIVE))
                - 0.5 * (LN_2PI + libm::log(self.variances[k]))
                - d * d / (2.0 * self.variances[k]);
        }
        let m = lp[0].max(lp[1]).max(lp[2]);
        m + libm::log(libm::exp(lp[0] - m) + libm::exp(lp[1] - m) + libm::exp(lp[2] - m))
    }
}

/// Channel-wise pixel-value mixture model.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelGmm {
    pub channels: Vec<ChannelMixture>,
}

impl PixelGmm {
    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }
}

fn fit_channel(values: &[f64], max_iters: usize, tol: f64) -> (ChannelMixture, Vec<f64>) {
    let n = values.len();
    let nf = n as f64;

    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let quantile = |p: f64| sorted[libm::round((n - 1) as f64 * p) as usize];
    let mean_all = values.iter().sum::<f64>() / nf;
    let var_all = values.iter().map(|&v| (v - mean_all) * (v - mean_all)).sum::<f64>() / nf;

    let mut mix = ChannelMixture {
        weights: [1.0 / 3.0; 3],
        means: [quantile(0.1), quantile(0.5), quantile(0.9)],
        variances: [var_all.max(VARIANCE_FLOOR); 3],
    };

    let mut trace = Vec::new();
    let mut resp = alloc::vec![[0.0f64; 3]; n];
    for iter in 0..max_iters {
        // E step: responsibilities and the mean log-likelihood under the
        // current parameters.
        let mut ll_sum = 0.0;
        for (i, &v) in values.iter().enumerate() {
            let mut lp = [0.0; 3];
            for k in 0..3 {
                let d = v - mix.means[k];
                lp[k] = libm::log(mix.weights[k].max(f64::MIN_POSITIVE))
                    - 0.5 * (LN_2PI + libm::log(mix.variances[k]))
                    - d * d / (2.0 * mix.variances[k]);
            }
            let m = lp[0].max(lp[1]).max(lp[2]);
            let lse =
                m + libm::log(libm::exp(lp[0] - m) + libm::exp(lp[1] - m) + libm::exp(lp[2] - m));
            ll_sum += lse;
            for k in 0..3 {
                resp[i][k] = libm::exp(lp[k] - lse);
            }
        }
        let ll = ll_sum / nf;
        let converged = iter > 0 && ll - trace[iter - 1] < tol;
        trace.push(ll);
        if converged {
            break;
        }

        // M step. Components that claim (numerically) no points keep their
        // parameters instead of dividing by ~0.
        for k in 0..3 {
            let rs: f64 = resp.iter().map(|r| r[k]).sum();
            mix.weights[k] = rs / nf;
            if rs < 1e-12 {
                mix.variances[k] = mix.variances[k].max(VARIANCE_FLOOR);
                continue;
            }
            let rx: f64 = resp.iter().zip(values).map(|(r, &v)| r[k] * v).sum();
            let mean = rx / rs;
            let rv: f64 = resp
                .iter()
                .zip(values)
                .map(|(r, &v)| r[k] * (v - mean) * (v - mean))
                .sum();
            mix.means[k] = mean;
            mix.variances[k] = (rv / rs).max(VARIANCE_FLOOR);
        }
    }
    (mix, trace)
}

/// [`fit_pixel_gmm`], additionally returning each channel's per-iteration
/// mean log-likelihood trajectory (non-decreasing by EM's ascent property;
/// tests assert it).
pub fn fit_pixel_gmm_traced(
    train_images: &[Tensor],
    max_iters: usize,
    tol: f64,
) -> Result<(PixelGmm, Vec<Vec<f64>>)> {
    if train_images.is_empty() || max_iters == 0 {
        return Err(Error::InvalidArgument {
            op: "fit_pixel_gmm",
            detail: "need at least one image and one iteration".into(),
        });
    }
    let first = train_images[0].shape();
    if first.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "fit_pixel_gmm",
            detail: alloc::format!("expected C×H×W images, got {first:?}"),
        });
    }
    let c = first[0];
    for img in train_images {
        let s = img.shape_ref();
        if s.len() != 3 || s[0] != c {
            return Err(Error::ShapeMismatch {
                op: "fit_pixel_gmm",
                detail: alloc::format!("every image must have {c} channels, got {s:?}"),
            });
        }
    }

    let mut channels = Vec::with_capacity(c);
    let mut traces = Vec::with_capacity(c);
    for ch in 0..c {
        let mut values = Vec::new();
        for img in train_images {
            let s = img.shape_ref();
            let per = s[1] * s[2];
            let data = img.data();
            values.extend_from_slice(&data[ch * per..(ch + 1) * per]);
        }
        let (mix, trace) = fit_channel(&values, max_iters, tol);
        channels.push(mix);
        traces.push(trace);
    }
    Ok((PixelGmm { channels }, traces))
}

/// Fits one 3-component scalar Gaussian mixture per channel over all pixel
/// values of that channel, by EM from deterministic quantile seeds
/// (10%/50%/90%). Stops after `max_iters` or when the mean log-likelihood
/// gain drops below `tol`.
pub fn fit_pixel_gmm(train_images: &[Tensor], max_iters: usize, tol: f64) -> Result<PixelGmm> {
    fit_pixel_gmm_traced(train_images, max_iters, tol).map(|(gmm, _)| gmm)
}

/// Negative mean per-pixel log-likelihood, summed over channels. Higher =
/// more anomalous.
pub fn gmm_score(gmm: &PixelGmm, image: &Tensor) -> Result<f64> {
    let s = image.shape();
    if s.len() != 3 || s[0] != gmm.n_channels() {
        return Err(Error::ShapeMismatch {
            op: "gmm_score",
            detail: alloc::format!(
                "model covers {} channels but the image is {s:?}",
                gmm.n_channels()
            ),
        });
    }
    let per = s[1] * s[2];
    let data = image.data();
    let mut total = 0.0;
    for (ch, mix) in gmm.channels.iter().enumerate() {
        let mut ll = 0.0;
        for &v in &data[ch * per..(ch + 1) * per] {
            ll += mix.log_likelihood(v);
        }
        total += ll / per as f64;
    }
    Ok(-total)
}

/// Whether low or high edge energy counts as anomalous for
/// [`edge_energy_score`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgePolarity {
    LowIsAnomalous,
    HighIsAnomalous,
}

impl core::str::FromStr for EdgePolarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low_is_anomalous" => Ok(EdgePolarity::LowIsAnomalous),
            "high_is_anomalous" => Ok(EdgePolarity::HighIsAnomalous),
            other => Err(Error::InvalidArgument {
                op: "EdgePolarity::from_str",
                detail: alloc::format!(
                    "unknown polarity {other:?}; expected low_is_anomalous or high_is_anomalous"
                ),
            }),
        }
    }
}

/// Mean gradient magnitude of the channel-mean image under a 3×3 Sobel
/// operator with edge-reflected boundary (index −1 reads pixel 0, index H
/// reads pixel H−1, matching the convolution padding convention).
pub fn edge_energy(image: &Tensor) -> Result<f64> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "edge_energy",
            detail: alloc::format!("expected C×H×W image, got {s:?}"),
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if h < 3 || w < 3 {
        return Err(Error::InvalidArgument {
            op: "edge_energy",
            detail: alloc::format!("image must be at least 3×3, got {h}×{w}"),
        });
    }
    let data = image.data();
    let per = h * w;
    let mut mean = alloc::vec![0.0f64; per];
    for ch in 0..c {
        for (m, &v) in mean.iter_mut().zip(&data[ch * per..(ch + 1) * per]) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= c as f64;
    }

    let reflect = |i: isize, n: usize| -> usize {
        if i < 0 {
            0
        } else if i as usize >= n {
            n - 1
        } else {
            i as usize
        }
    };
    let at = |r: isize, col: isize| mean[reflect(r, h) * w + reflect(col, w)];

    let mut total = 0.0;
    for r in 0..h as isize {
        for col in 0..w as isize {
            let gx = (at(r - 1, col + 1) - at(r - 1, col - 1))
                + 2.0 * (at(r, col + 1) - at(r, col - 1))
                + (at(r + 1, col + 1) - at(r + 1, col - 1));
            let gy = (at(r + 1, col - 1) - at(r - 1, col - 1))
                + 2.0 * (at(r + 1, col) - at(r - 1, col))
                + (at(r + 1, col + 1) - at(r - 1, col + 1));
            total += libm::sqrt(gx * gx + gy * gy);
        }
    }
    Ok(total / per as f64)
}

/// Edge-energy baseline score under the chosen polarity.
pub fn edge_energy_score(image: &Tensor, polarity: EdgePolarity) -> Result<f64> {
    let energy = edge_energy(image)?;
    Ok(match polarity {
        EdgePolarity::LowIsAnomalous => -energy,
        EdgePolarity::HighIsAnomalous => energy,
    })
}

/// Scores every test example of a split with `scorer`, preserving order
/// and copying the anomaly flags unmodified.
pub fn score_test_set<F>(mut scorer: F, split: &HoldOutSplit) -> Result<Vec<ScoredExample>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    split
        .test_examples
        .iter()
        .map(|e| {
            Ok(ScoredExample {
                score: scorer(&e.image)?,
                is_anomaly: e.is_anomaly,
            })
        })
        .collect()
}
