//! Datasets, the hold-one-class-out split protocol, synthetic shape images,
//! and the image transforms training consumes (rotation batches,
//! random-center masking, pad-crop-flip augmentation).

mod split;
mod synth;
mod transform;

pub use split::{make_holdout_splits, HoldOutSplit, TestExample};
pub use synth::{synth_shapes, ShapeKind};
pub use transform::{
    augment_crop_flip, flip_horizontal, random_center_mask, rotate90, rotate_batch,
    RotationBatch, RotationMode,
};

use crate::tensor::Tensor;
use crate::{Error, Result};
use alloc::string::String;
use alloc::vec::Vec;

/// Images with class labels. Every image is a C×H×W tensor with values in
/// [0, 1]; all images in one dataset share a single shape.
///
/// Image tensors are reference-counted, so cloning a dataset (or slicing
/// it into splits) shares pixel storage. Treat stored tensors as
/// immutable; transforms always allocate fresh outputs.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    images: Vec<Tensor>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<Tensor>,
        labels: Vec<usize>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Protocol(alloc::format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if class_names.is_empty() {
            return Err(Error::Protocol("dataset needs at least one class name".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Protocol(alloc::format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        if let Some(first) = images.first() {
            if first.shape_ref().len() != 3 {
                return Err(Error::Protocol(alloc::format!(
                    "images must be C×H×W, got {:?}",
                    first.shape_ref()
                )));
            }
            if let Some(odd) = images.iter().find(|im| im.shape_ref() != first.shape_ref()) {
                return Err(Error::Protocol(alloc::format!(
                    "mixed image shapes: {:?} vs {:?}",
                    first.shape_ref(),
                    odd.shape_ref()
                )));
            }
        }
        for (i, im) in images.iter().enumerate() {
            if im.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::Protocol(alloc::format!(
                    "image {i} has pixels outside [0, 1]"
                )));
            }
        }
        Ok(LabeledDataset { images, labels, class_names })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// (C, H, W) of the shared image shape; None when the dataset is empty.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(|im| {
            let s = im.shape_ref();
            (s[0], s[1], s[2])
        })
    }

    /// Examples per class id.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = alloc::vec![0usize; self.class_names.len()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Copies the chosen examples into one N×C×H×W batch tensor plus a
    /// parallel label vector. Index order is preserved.
    pub fn stack(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images: Vec<&Tensor> = idx.iter().map(|&i| &self.images[i]).collect();
        let batch = stack_images(&images)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((batch, labels))
    }
}

/// Copies same-shape C×H×W tensors into one N×C×H×W batch.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::InvalidArgument {
        op: "stack_images",
        detail: "empty batch".into(),
    })?;
    let shape = first.shape_ref();
    if shape.len() != 3 {
        return Err(Error::InvalidArgument {
            op: "stack_images",
            detail: alloc::format!("expected C×H×W images, got {shape:?}"),
        });
    }
    let mut data = Vec::with_capacity(images.len() * first.len());
    for im in images {
        if im.shape_ref() != shape {
            return Err(Error::ShapeMismatch {
                op: "stack_images",
                detail: alloc::format!("{:?} vs {:?}", shape, im.shape_ref()),
            });
        }
        data.extend_from_slice(&im.data());
    }
    Tensor::new(&[images.len(), shape[0], shape[1], shape[2]], data)
}
