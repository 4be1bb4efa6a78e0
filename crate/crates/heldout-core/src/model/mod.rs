//! Multi-head CNN construction and its loss heads: a shared convolutional
//! trunk, a classification head, and optional self-supervised heads
//! (orientation prediction, within-image contrastive patch prediction).
//!
//! Every normalization layer carries one scale/shift set per task, so the
//! primary task and the auxiliary task normalize through disjoint
//! parameters while sharing all convolution weights. Contrastive models
//! additionally switch all trunk padding from zero to edge-reflection so
//! that patch positions are not given away by border zeros.

mod trainer;

pub use trainer::{
    default_lr_schedule, train, train_with_observer, AuxBatch, CpcTrainSettings, EpochStats,
    StepPhase, StepStats, TrainConfig, TrainLog, Trainer,
};

use crate::rng::SeedTree;
use crate::tensor::{fan_in_normal_init, Graph, PadMode, Tensor};
use crate::{Error, Result};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

/// Which auxiliary objective a model carries next to classification.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxTask {
    None,
    Rotation,
    Cpc,
}

impl AuxTask {
    pub fn name(self) -> &'static str {
        match self {
            AuxTask::None => "none",
            AuxTask::Rotation => "rotation",
            AuxTask::Cpc => "cpc",
        }
    }
}

impl core::str::FromStr for AuxTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AuxTask::None),
            "rotation" => Ok(AuxTask::Rotation),
            "cpc" => Ok(AuxTask::Cpc),
            other => Err(Error::InvalidArgument {
                op: "AuxTask::from_str",
                detail: alloc::format!(
                    "unknown auxiliary task {other:?}; expected none, rotation, or cpc"
                ),
            }),
        }
    }
}

/// Which head's normalization parameters a forward pass runs through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskId {
    Primary,
    Aux,
}

impl TaskId {
    fn index(self) -> usize {
        match self {
            TaskId::Primary => 0,
            TaskId::Aux => 1,
        }
    }
}

/// Trunk descriptor: 3×3 conv blocks at the given channel widths, each
/// followed by normalization and relu, with 2×2 max pooling after every
/// block whose spatial extent is still ≥ 8, and a global average pool at
/// the end. `cpc_steps` sizes the contrastive head's bank of per-step
/// prediction maps (ignored unless the model is built with that task).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CnnConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub cpc_steps: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig { in_channels: 3, widths: alloc::vec![16, 32, 64, 64], cpc_steps: 1 }
    }
}

/// Fully-connected map with bias.
#[derive(Clone, Debug)]
pub struct Linear {
    /// [in, out]
    pub weight: Tensor,
    /// [out]
    pub bias: Tensor,
}

impl Linear {
    fn init(tree: &SeedTree, name: &str, d_in: usize, d_out: usize) -> Linear {
        let mut rng = tree.child(name).rng();
        Linear {
            weight: fan_in_normal_init(&[d_in, d_out], d_in, &mut rng).expect("linear shape"),
            bias: Tensor::param(&[d_out], alloc::vec![0.0; d_out]).expect("bias shape"),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: &Tensor) -> Result<Tensor> {
        let prod = g.matmul(x, &self.weight)?;
        g.add(&prod, &self.bias)
    }
}

/// One trunk stage: 3×3 convolution (pad 1) with per-task normalization.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    /// [out, in, 3, 3]
    pub weight: Tensor,
    /// [out]
    pub bias: Tensor,
    /// One scale vector per task.
    pub gammas: Vec<Tensor>,
    /// One shift vector per task.
    pub betas: Vec<Tensor>,
}

/// Contrastive head: a context map over trunk features plus one zero-
/// initialized prediction map per look-ahead step. Zero init makes every
/// candidate score 0 at the start, so the initial loss is exactly ln(M)
/// for M candidates.
#[derive(Clone, Debug)]
pub struct CpcHead {
    pub context: Linear,
    /// predictors[d−1] maps context features to the predicted encoding of
    /// the patch d grid rows below; each is [d_feat, d_feat].
    pub predictors: Vec<Tensor>,
}

/// Patch layout for the contrastive task: `rows`×`cols` patches of side
/// `patch`, top-left corners `stride` apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub stride: usize,
}

impl PatchGrid {
    pub fn n_patches(&self) -> usize {
        self.rows * self.cols
    }

    fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.patch == 0 || self.stride == 0 {
            return Err(Error::InvalidArgument {
                op: "cpc_loss",
                detail: "grid dimensions must all be ≥ 1".into(),
            });
        }
        let need_h = (self.rows - 1) * self.stride + self.patch;
        let need_w = (self.cols - 1) * self.stride + self.patch;
        if need_h > h || need_w > w {
            return Err(Error::InvalidArgument {
                op: "cpc_loss",
                detail: alloc::format!(
                    "grid needs {need_h}×{need_w} pixels but the image is {h}×{w}"
                ),
            });
        }
        Ok(())
    }
}

/// Number of (context, target) prediction terms the contrastive loss sums
/// over: for each step d there is one term per grid position with a patch
/// d rows below.
pub fn cpc_term_count(grid: &PatchGrid, n_pred_steps: usize) -> usize {
    (1..=n_pred_steps)
        .map(|d| grid.rows.saturating_sub(d) * grid.cols)
        .sum()
}

/// Eq-style combination of the two objectives: primary + λ·aux.
pub fn combined_loss(primary_loss: f64, aux_loss: f64, lambda: f64) -> f64 {
    primary_loss + lambda * aux_loss
}

/// Shared-trunk classifier with optional auxiliary heads.
#[derive(Clone, Debug)]
pub struct MultiHeadModel {
    pub arch: CnnConfig,
    pub n_classes: usize,
    pub aux_task: AuxTask,
    pub blocks: Vec<ConvBlock>,
    pub class_head: Linear,
    pub rot_head: Option<Linear>,
    pub cpc_head: Option<CpcHead>,
    pad_mode: PadMode,
    norm_eps: f64,
}

/// Builds and initializes the model. Every parameter draws from its own
/// named seed substream, so two models built from the same tree share
/// bitwise-identical trunk and classifier weights regardless of which
/// auxiliary head is attached.
pub fn build_model(
    arch: &CnnConfig,
    n_classes: usize,
    aux_task: AuxTask,
    tree: &SeedTree,
) -> Result<MultiHeadModel> {
    if n_classes < 2 {
        return Err(Error::InvalidArgument {
            op: "build_model",
            detail: alloc::format!("need at least 2 classes, got {n_classes}"),
        });
    }
    if arch.widths.is_empty() || arch.in_channels == 0 {
        return Err(Error::InvalidArgument {
            op: "build_model",
            detail: "trunk needs at least one block and one input channel".into(),
        });
    }
    if aux_task == AuxTask::Cpc && arch.cpc_steps == 0 {
        return Err(Error::InvalidArgument {
            op: "build_model",
            detail: "contrastive model needs cpc_steps ≥ 1".into(),
        });
    }

    let n_tasks = if aux_task == AuxTask::None { 1 } else { 2 };
    let mut blocks = Vec::with_capacity(arch.widths.len());
    let mut c_in = arch.in_channels;
    for (b, &c_out) in arch.widths.iter().enumerate() {
        let mut rng = tree.child(&alloc::format!("block{b}.weight")).rng();
        let weight = fan_in_normal_init(&[c_out, c_in, 3, 3], c_in * 9, &mut rng)?;
        let bias = Tensor::param(&[c_out], alloc::vec![0.0; c_out]).expect("bias shape");
        let gammas = (0..n_tasks)
            .map(|_| Tensor::param(&[c_out], alloc::vec![1.0; c_out]).expect("gamma shape"))
            .collect();
        let betas = (0..n_tasks)
            .map(|_| Tensor::param(&[c_out], alloc::vec![0.0; c_out]).expect("beta shape"))
            .collect();
        blocks.push(ConvBlock { weight, bias, gammas, betas });
        c_in = c_out;
    }

    let d_feat = *arch.widths.last().expect("nonempty widths");
    let class_head = Linear::init(tree, "class_head", d_feat, n_classes);
    let rot_head =
        (aux_task == AuxTask::Rotation).then(|| Linear::init(tree, "rot_head", d_feat, 4));
    let cpc_head = (aux_task == AuxTask::Cpc).then(|| CpcHead {
        context: Linear::init(tree, "cpc.context", d_feat, d_feat),
        predictors: (0..arch.cpc_steps)
            .map(|_| {
                Tensor::param(&[d_feat, d_feat], alloc::vec![0.0; d_feat * d_feat])
                    .expect("predictor shape")
            })
            .collect(),
    });

    Ok(MultiHeadModel {
        arch: arch.clone(),
        n_classes,
        aux_task,
        blocks,
        class_head,
        rot_head,
        cpc_head,
        pad_mode: if aux_task == AuxTask::Cpc { PadMode::Symmetric } else { PadMode::Zero },
        norm_eps: 1e-5,
    })
}

impl MultiHeadModel {
    pub fn pad_mode(&self) -> PadMode {
        self.pad_mode
    }

    /// Scale/shift sets per normalization layer (1 without an auxiliary
    /// task, 2 with one).
    pub fn norm_sets(&self) -> usize {
        self.blocks[0].gammas.len()
    }

    /// Trunk feature dimensionality (the last block's width).
    pub fn feature_dim(&self) -> usize {
        *self.arch.widths.last().expect("nonempty widths")
    }

    fn norm_index(&self, task: TaskId) -> Result<usize> {
        let i = task.index();
        if i >= self.norm_sets() {
            return Err(Error::MissingHead { head: "auxiliary" });
        }
        Ok(i)
    }

    /// Runs the trunk: conv blocks under the task's normalization
    /// parameters, then a global average pool to [n, d_feat]. Requires
    /// square spatial input; 2×2 max pooling applies after each block
    /// while the spatial side is still ≥ 8.
    pub fn features(&self, g: &mut Graph, x: &Tensor, task: TaskId) -> Result<Tensor> {
        let t = self.norm_index(task)?;
        let shape = x.shape();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "features",
                detail: alloc::format!("expected N×C×H×W, got {shape:?}"),
            });
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        if h != w {
            return Err(Error::ShapeMismatch {
                op: "features",
                detail: alloc::format!("trunk expects square inputs, got {h}×{w}"),
            });
        }
        if shape[1] != self.arch.in_channels {
            return Err(Error::ShapeMismatch {
                op: "features",
                detail: alloc::format!(
                    "model expects {} input channels, got {}",
                    self.arch.in_channels,
                    shape[1]
                ),
            });
        }
        let mut cur = x.clone();
        let mut side = h;
        for block in &self.blocks {
            cur = g.conv2d(&cur, &block.weight, Some(&block.bias), 1, 1, self.pad_mode)?;
            cur = g.normalize(&cur, &block.gammas[t], &block.betas[t], self.norm_eps)?;
            cur = g.relu(&cur)?;
            if side >= 8 {
                cur = g.maxpool2d(&cur, 2, 2)?;
                side /= 2;
            }
        }
        let pooled = g.avgpool2d(&cur, side, side)?;
        g.reshape(&pooled, &[n, self.feature_dim()])
    }

    /// Class logits [n, n_classes] under the primary task's normalization.
    pub fn class_logits(&self, g: &mut Graph, x: &Tensor) -> Result<Tensor> {
        let feats = self.features(g, x, TaskId::Primary)?;
        self.class_head.forward(g, &feats)
    }

    /// Orientation logits [n, 4] under the auxiliary normalization.
    pub fn rot_logits(&self, g: &mut Graph, x: &Tensor) -> Result<Tensor> {
        let head = self.rot_head.as_ref().ok_or(Error::MissingHead { head: "rotation" })?;
        let feats = self.features(g, x, TaskId::Aux)?;
        head.forward(g, &feats)
    }

    /// All parameters in a stable named order (checkpoint layout).
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            out.push((alloc::format!("block{b}.weight"), block.weight.clone()));
            out.push((alloc::format!("block{b}.bias"), block.bias.clone()));
            for (t, (gamma, beta)) in block.gammas.iter().zip(&block.betas).enumerate() {
                out.push((alloc::format!("block{b}.norm{t}.gamma"), gamma.clone()));
                out.push((alloc::format!("block{b}.norm{t}.beta"), beta.clone()));
            }
        }
        out.push(("class_head.weight".to_string(), self.class_head.weight.clone()));
        out.push(("class_head.bias".to_string(), self.class_head.bias.clone()));
        if let Some(rot) = &self.rot_head {
            out.push(("rot_head.weight".to_string(), rot.weight.clone()));
            out.push(("rot_head.bias".to_string(), rot.bias.clone()));
        }
        if let Some(cpc) = &self.cpc_head {
            out.push(("cpc.context.weight".to_string(), cpc.context.weight.clone()));
            out.push(("cpc.context.bias".to_string(), cpc.context.bias.clone()));
            for (d, p) in cpc.predictors.iter().enumerate() {
                out.push((alloc::format!("cpc.predict{}.weight", d + 1), p.clone()));
            }
        }
        out
    }

    /// Parameters the classification step updates: trunk convolutions, the
    /// primary normalization set, and the class head.
    pub fn primary_params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for block in &self.blocks {
            out.push(block.weight.clone());
            out.push(block.bias.clone());
            out.push(block.gammas[0].clone());
            out.push(block.betas[0].clone());
        }
        out.push(self.class_head.weight.clone());
        out.push(self.class_head.bias.clone());
        out
    }

    /// Parameters the auxiliary step updates: trunk convolutions, the
    /// auxiliary normalization set, and the auxiliary head. Empty when the
    /// model has no auxiliary task.
    pub fn aux_params(&self) -> Vec<Tensor> {
        if self.aux_task == AuxTask::None {
            return Vec::new();
        }
        let mut out = Vec::new();
        for block in &self.blocks {
            out.push(block.weight.clone());
            out.push(block.bias.clone());
            out.push(block.gammas[1].clone());
            out.push(block.betas[1].clone());
        }
        if let Some(rot) = &self.rot_head {
            out.push(rot.weight.clone());
            out.push(rot.bias.clone());
        }
        if let Some(cpc) = &self.cpc_head {
            out.push(cpc.context.weight.clone());
            out.push(cpc.context.bias.clone());
            out.extend(cpc.predictors.iter().cloned());
        }
        out
    }

    /// Marks every parameter as no longer accumulating gradients.
    pub fn freeze(&self) {
        for (_, p) in self.named_params() {
            p.set_requires_grad(false);
        }
    }
}

/// Mean cross-entropy of logits [n, k] against integer labels, as a graph
/// node so gradients flow back to the logits.
pub fn cross_entropy_mean(g: &mut Graph, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            detail: alloc::format!("logits {shape:?} vs {} labels", labels.len()),
        });
    }
    let (n, k) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument {
            op: "cross_entropy",
            detail: alloc::format!("label {bad} out of range for {k} logits"),
        });
    }
    let mut one_hot = alloc::vec![0.0; n * k];
    for (row, &l) in labels.iter().enumerate() {
        one_hot[row * k + l] = 1.0;
    }
    let targets = Tensor::new(&[n, k], one_hot)?;
    let lp = g.log_softmax(logits)?;
    let picked = g.mul(&lp, &targets)?;
    let total = g.sum(&picked)?;
    g.scale(&total, -1.0 / n as f64)
}

/// Fraction of rows whose argmax logit matches the label. Ties resolve to
/// the earliest index, matching the scorer convention.
pub fn accuracy(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for (row, &label) in labels.iter().enumerate() {
        let r = &logits[row * k..(row + 1) * k];
        let mut best = 0usize;
        for (j, &v) in r.iter().enumerate() {
            if v > r[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Graph-node version of the orientation loss; used by the trainer.
pub fn rotation_loss_node(
    g: &mut Graph,
    model: &MultiHeadModel,
    batch: &crate::data::RotationBatch,
) -> Result<Tensor> {
    if batch.images.is_empty() {
        return Err(Error::InvalidArgument {
            op: "rotation_loss",
            detail: "empty rotation batch".into(),
        });
    }
    let refs: Vec<&Tensor> = batch.images.iter().collect();
    let x = crate::data::stack_images(&refs)?;
    let logits = model.rot_logits(g, &x)?;
    cross_entropy_mean(g, &logits, &batch.rotation_labels)
}

/// Mean 4-way cross-entropy of the orientation head on a rotation batch.
pub fn rotation_loss(model: &MultiHeadModel, batch: &crate::data::RotationBatch) -> Result<f64> {
    let mut g = Graph::inference();
    Ok(rotation_loss_node(&mut g, model, batch)?.item())
}

fn extract_patches(image: &Tensor, grid: &PatchGrid) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "cpc_loss",
            detail: alloc::format!("expected C×H×W image, got {shape:?}"),
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    grid.validate(h, w)?;
    let src = image.data();
    let p = grid.patch;
    let mut data = Vec::with_capacity(grid.n_patches() * c * p * p);
    for gr in 0..grid.rows {
        for gc in 0..grid.cols {
            let (r0, c0) = (gr * grid.stride, gc * grid.stride);
            for ch in 0..c {
                for r in r0..r0 + p {
                    let row = ch * h * w + r * w;
                    data.extend_from_slice(&src[row + c0..row + c0 + p]);
                }
            }
        }
    }
    drop(src);
    Tensor::new(&[grid.n_patches(), c, p, p], data)
}

/// Graph-node version of the contrastive loss over a set of images; the
/// loss is the mean over all prediction terms of all images.
pub fn cpc_loss_node(
    g: &mut Graph,
    model: &MultiHeadModel,
    images: &[Tensor],
    grid: &PatchGrid,
    n_pred_steps: usize,
) -> Result<Tensor> {
    let head = model.cpc_head.as_ref().ok_or(Error::MissingHead { head: "contrastive" })?;
    if images.is_empty() {
        return Err(Error::InvalidArgument {
            op: "cpc_loss",
            detail: "no images given".into(),
        });
    }
    if n_pred_steps == 0 || n_pred_steps > head.predictors.len() {
        return Err(Error::InvalidArgument {
            op: "cpc_loss",
            detail: alloc::format!(
                "n_pred_steps {n_pred_steps} outside 1..={}",
                head.predictors.len()
            ),
        });
    }
    if n_pred_steps >= grid.rows {
        return Err(Error::InvalidArgument {
            op: "cpc_loss",
            detail: alloc::format!(
                "grid has {} rows; cannot predict {n_pred_steps} rows ahead",
                grid.rows
            ),
        });
    }

    let m = grid.n_patches();
    let terms_per_image = cpc_term_count(grid, n_pred_steps);
    let mut total: Option<Tensor> = None;
    for image in images {
        let patches = extract_patches(image, grid)?;
        let feats = model.features(g, &patches, TaskId::Aux)?;
        let ctx = head.context.forward(g, &feats)?;
        for d in 1..=n_pred_steps {
            let pred = g.matmul(&ctx, &head.predictors[d - 1])?;
            // scores[i][j] = ⟨prediction from patch i, encoding of patch j⟩;
            // every patch of the same image is a candidate.
            let scores = g.matmul_bt(&pred, &feats)?;
            let lp = g.log_softmax(&scores)?;
            // Valid contexts are grid positions with a patch d rows below;
            // the target mask picks exactly that patch's log-probability.
            let mut mask = alloc::vec![0.0; m * m];
            for gr in 0..grid.rows - d {
                for gc in 0..grid.cols {
                    let ctx_i = gr * grid.cols + gc;
                    let tgt_j = (gr + d) * grid.cols + gc;
                    mask[ctx_i * m + tgt_j] = 1.0;
                }
            }
            let mask = Tensor::new(&[m, m], mask)?;
            let picked = g.mul(&lp, &mask)?;
            let contrib = g.sum(&picked)?;
            total = Some(match total {
                None => contrib,
                Some(t) => g.add(&t, &contrib)?,
            });
        }
    }
    let denom = (terms_per_image * images.len()) as f64;
    g.scale(&total.expect("at least one image and one step"), -1.0 / denom)
}

/// Mean InfoNCE-style contrastive loss for one image: each prediction must
/// pick the true patch below its context out of all patches of the same
/// image.
pub fn cpc_loss(
    model: &MultiHeadModel,
    image: &Tensor,
    grid: &PatchGrid,
    n_pred_steps: usize,
) -> Result<f64> {
    let mut g = Graph::inference();
    Ok(cpc_loss_node(&mut g, model, core::slice::from_ref(image), grid, n_pred_steps)?.item())
}
