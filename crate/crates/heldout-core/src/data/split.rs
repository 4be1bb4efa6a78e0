//! The hold-one-class-out protocol: one split per class, where the held-out
//! class vanishes from training and becomes the anomaly at test time.

use super::LabeledDataset;
use crate::tensor::Tensor;
use crate::{Error, Result};
use alloc::string::String;
use alloc::vec::Vec;

/// One test-time example of a split. `label` carries the remapped in-
/// distribution class for normal examples (handy for accuracy logging) and
/// is None for anomalies, which have no in-distribution class.
#[derive(Clone, Debug)]
pub struct TestExample {
    pub image: Tensor,
    pub is_anomaly: bool,
    pub label: Option<usize>,
}

/// One trial family of the protocol: training data without the held-out
/// class (labels remapped, order-preserving, to 0..K−2) and the full test
/// set with anomaly flags.
#[derive(Clone, Debug)]
pub struct HoldOutSplit {
    pub held_out_class: usize,
    pub train: LabeledDataset,
    pub test_examples: Vec<TestExample>,
    /// Anomalous fraction of the test set; the AP of a random scorer.
    pub skew: f64,
    /// How many independently seeded trials this split is meant to run.
    pub trials: usize,
}

impl HoldOutSplit {
    pub fn anomaly_count(&self) -> usize {
        self.test_examples.iter().filter(|e| e.is_anomaly).count()
    }
}

fn observed_classes(ds: &LabeledDataset) -> Vec<bool> {
    let mut seen = alloc::vec![false; ds.n_classes()];
    for &l in ds.labels() {
        seen[l] = true;
    }
    seen
}

/// Builds the K splits of the protocol, one per class in id order, each
/// tagged to run `trials_per_class` trials.
pub fn make_holdout_splits(
    train: &LabeledDataset,
    test: &LabeledDataset,
    trials_per_class: usize,
) -> Result<Vec<HoldOutSplit>> {
    if trials_per_class == 0 {
        return Err(Error::Protocol("trials_per_class must be at least 1".into()));
    }
    if train.class_names() != test.class_names() {
        return Err(Error::Protocol(
            "train and test class names differ; they must describe one class set".into(),
        ));
    }
    let k = train.n_classes();
    if k < 2 {
        return Err(Error::Protocol(
            "hold-out protocol needs at least 2 classes".into(),
        ));
    }
    for (class, present) in observed_classes(train).into_iter().enumerate() {
        if !present {
            return Err(Error::Protocol(alloc::format!(
                "class {class} ({}) has no training examples",
                train.class_names()[class]
            )));
        }
    }
    for (class, present) in observed_classes(test).into_iter().enumerate() {
        if !present {
            return Err(Error::Protocol(alloc::format!(
                "class {class} ({}) has no test examples",
                test.class_names()[class]
            )));
        }
    }

    let mut splits = Vec::with_capacity(k);
    for held_out in 0..k {
        // Order-preserving remap over the remaining classes: ids below the
        // held-out class keep their value, ids above shift down by one.
        let remap = |l: usize| if l < held_out { l } else { l - 1 };

        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (im, &l) in train.images().iter().zip(train.labels()) {
            if l != held_out {
                images.push(im.clone());
                labels.push(remap(l));
            }
        }
        let names: Vec<String> = train
            .class_names()
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != held_out)
            .map(|(_, n)| n.clone())
            .collect();
        let split_train = LabeledDataset::new(images, labels, names)?;

        let test_examples: Vec<TestExample> = test
            .images()
            .iter()
            .zip(test.labels())
            .map(|(im, &l)| TestExample {
                image: im.clone(),
                is_anomaly: l == held_out,
                label: (l != held_out).then(|| remap(l)),
            })
            .collect();
        let n_anomalous = test_examples.iter().filter(|e| e.is_anomaly).count();
        let skew = n_anomalous as f64 / test_examples.len() as f64;

        splits.push(HoldOutSplit {
            held_out_class: held_out,
            train: split_train,
            test_examples,
            skew,
            trials: trials_per_class,
        });
    }
    Ok(splits)
}
