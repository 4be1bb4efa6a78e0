//! Acceptance suite: one test per release gate, each printing a single
//! pass/fail line. Run with `--nocapture` to see the lines as they pass.

use std::collections::BTreeSet;
use std::time::Instant;

use heldout_cli::experiment::{
    run_experiment, DatasetSpec, ExperimentConfig, ModelSpec, ScorerSpec, SynthSpec, TrainSpec,
};
use heldout_core::data::{
    make_holdout_splits, random_center_mask, synth_shapes, LabeledDataset, ShapeKind,
};
use heldout_core::gradcheck::{run_suite, CHECKED_OPS};
use heldout_core::metrics::average_precision;
use heldout_core::model::{build_model, train_with_observer, AuxTask, CnnConfig, StepPhase};
use heldout_core::rng::SeedTree;
use heldout_core::score::{
    edge_energy, fit_pixel_gmm_traced, msp_score, odin_perturb, odin_score, scored, OdinConfig,
    ScoredExample,
};
use heldout_core::tensor::Tensor;

fn criterion(n: usize, ok: bool, detail: &str) {
    println!("criterion {n}: {} - {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

// -------------------------------------------------------------------------
// 1. Average precision equals a brute-force threshold-enumeration oracle.
// -------------------------------------------------------------------------

fn oracle_ap(examples: &[ScoredExample]) -> f64 {
    let n_pos = examples.iter().filter(|s| s.is_anomaly).count();
    let mut thresholds: Vec<f64> = examples.iter().map(|s| s.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &t in &thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for s in examples {
            if s.score >= t {
                if s.is_anomaly {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let precision = if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = tp as f64 / n_pos as f64;
        ap += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    ap
}

#[test]
fn criterion_01_ap_matches_brute_force_oracle() {
    let start = Instant::now();
    let tree = SeedTree::new(101).child("ap-oracle");
    let skews = [0.1, 0.25, 0.5];
    let mut worst: f64 = 0.0;
    for i in 0..200u64 {
        let mut rng = tree.child_index(i).rng();
        let n = rng.range(1, 65);
        let skew = skews[(i % 3) as usize];
        let mut pairs = Vec::with_capacity(n);
        for _ in 0..n {
            let score = if rng.bernoulli(0.5) {
                rng.below(8) as f64 / 8.0
            } else {
                rng.uniform()
            };
            pairs.push((score, rng.bernoulli(skew)));
        }
        if pairs.iter().all(|(_, a)| !a) {
            let fix = rng.below(n);
            pairs[fix].1 = true;
        }
        let examples = scored(pairs);
        let got = average_precision(&examples).unwrap().average_precision;
        worst = worst.max((got - oracle_ap(&examples)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    criterion(
        1,
        worst <= 1e-12 && secs < 5.0,
        &format!("ap equals the threshold-enumeration oracle on 200 sets (max |diff| {worst:.2e}, {secs:.2}s)"),
    );
}

// -------------------------------------------------------------------------
// 2. A random detector scores its skew.
// -------------------------------------------------------------------------

#[test]
fn criterion_02_random_detector_calibration() {
    let start = Instant::now();
    let tree = SeedTree::new(102).child("calibration");
    let n = 10_000;
    let n_pos = 1_000;
    let mut sum = 0.0;
    for seed in 0..20u64 {
        let mut rng = tree.child_index(seed).rng();
        let pairs: Vec<(f64, bool)> = (0..n).map(|i| (rng.uniform(), i < n_pos)).collect();
        sum += average_precision(&scored(pairs)).unwrap().average_precision;
    }
    let mean = sum / 20.0;
    let secs = start.elapsed().as_secs_f64();
    criterion(
        2,
        (0.08..=0.12).contains(&mean) && secs < 5.0,
        &format!("uniform scores at skew 0.1 average ap {mean:.4} over 20 seeds ({secs:.2}s)"),
    );
}

// -------------------------------------------------------------------------
// 3. Every autodiff op passes central-difference gradient checks.
// -------------------------------------------------------------------------

#[test]
fn criterion_03_gradient_suite() {
    let start = Instant::now();
    let reports = run_suite(103, 20);
    let secs = start.elapsed().as_secs_f64();
    let all_ops = reports.len() == CHECKED_OPS.len();
    let enough = reports.iter().all(|r| r.instances >= 20);
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .unwrap();
    criterion(
        3,
        all_ops && enough && worst.max_rel_err < 1e-6 && secs < 30.0,
        &format!(
            "{} ops x 20 instances, worst rel err {:.2e} ({}) in {secs:.2}s",
            reports.len(),
            worst.max_rel_err,
            worst.op
        ),
    );
}

// -------------------------------------------------------------------------
// 4. ODIN at T=1, eps=0 is exactly the max-softmax score, and the default
//    perturbation stays inside the pixel range.
// -------------------------------------------------------------------------

#[test]
fn criterion_04_odin_reduces_to_msp() {
    let tree = SeedTree::new(104).child("odin");
    let arch = CnnConfig {
        in_channels: 1,
        widths: vec![4, 8],
        cpc_steps: 1,
    };
    let model = build_model(&arch, 3, AuxTask::None, &tree.child("model")).unwrap();
    model.freeze();
    let reduced = OdinConfig {
        temperature: 1.0,
        epsilon: 0.0,
    };
    let defaults = OdinConfig::default();
    let mut rng = tree.child("inputs").rng();
    let mut bit_mismatches = 0usize;
    let mut out_of_bounds = 0usize;
    for _ in 0..100 {
        let data: Vec<f64> = (0..64).map(|_| rng.uniform()).collect();
        let image = Tensor::new(&[1, 8, 8], data).unwrap();
        let msp = msp_score(&model, &image).unwrap();
        let odin = odin_score(&model, &image, &reduced).unwrap();
        if msp.to_bits() != odin.to_bits() {
            bit_mismatches += 1;
        }
        let perturbed = odin_perturb(&model, &image, &defaults).unwrap();
        if perturbed.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            out_of_bounds += 1;
        }
    }
    criterion(
        4,
        bit_mismatches == 0 && out_of_bounds == 0,
        &format!(
            "T=1 eps=0 scores bitwise equal msp on 100 inputs ({bit_mismatches} mismatches); default perturbation in [0,1] ({out_of_bounds} violations)"
        ),
    );
}

// -------------------------------------------------------------------------
// 5. EM recovers a well-separated mixture and never decreases likelihood.
// -------------------------------------------------------------------------

#[test]
fn criterion_05_em_recovers_mixture_means() {
    let start = Instant::now();
    let mut rng = SeedTree::new(105).child("em").rng();
    let targets = [0.1, 0.5, 0.9];
    let per_image = 1_000;
    let images: Vec<Tensor> = (0..50)
        .map(|_| {
            let data: Vec<f64> = (0..per_image)
                .map(|_| {
                    let comp = rng.below(3);
                    targets[comp] + 0.02 * rng.normal()
                })
                .collect();
            Tensor::new(&[1, 10, 100], data).unwrap()
        })
        .collect();
    let (gmm, traces) = fit_pixel_gmm_traced(&images, 500, 1e-7).unwrap();
    let mut means = gmm.channels[0].means;
    means.sort_by(f64::total_cmp);
    let worst_mean = means
        .iter()
        .zip(&targets)
        .map(|(m, t)| (m - t).abs())
        .fold(0.0f64, f64::max);
    let mut min_gain = f64::INFINITY;
    for trace in &traces {
        for w in trace.windows(2) {
            min_gain = min_gain.min(w[1] - w[0]);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    criterion(
        5,
        worst_mean <= 0.01 && min_gain >= -1e-9 && secs < 20.0,
        &format!(
            "50k-sample fit recovers means within {worst_mean:.4}; smallest log-likelihood step {min_gain:.2e} ({secs:.2}s)"
        ),
    );
}

// -------------------------------------------------------------------------
// 6. Hold-out protocol invariants on a 10-class balanced dataset.
// -------------------------------------------------------------------------

#[test]
fn criterion_06_protocol_invariants() {
    let k = 10;
    let class_image = |label: usize| {
        Tensor::new(&[1, 4, 4], vec![label as f64 / 10.0; 16]).unwrap()
    };
    let build = |per_class: usize| {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for label in 0..k {
            for _ in 0..per_class {
                images.push(class_image(label));
                labels.push(label);
            }
        }
        let names = (0..k).map(|i| format!("class{i}")).collect();
        LabeledDataset::new(images, labels, names).unwrap()
    };
    let train = build(20);
    let test = build(10);
    let splits = make_holdout_splits(&train, &test, 3).unwrap();

    let right_count = splits.len() == k;
    let mut exclusion_ok = true;
    let mut skew_ok = true;
    let mut held = BTreeSet::new();
    for split in &splits {
        held.insert(split.held_out_class);
        let held_value = split.held_out_class as f64 / 10.0;
        let counts = split.train.class_counts();
        exclusion_ok &= split.train.n_classes() == k - 1
            && counts.iter().all(|&c| c == 20)
            && split
                .train
                .images()
                .iter()
                .all(|img| img.data()[0] != held_value);
        skew_ok &= split.skew == 0.10;
    }
    let union_ok = held == (0..k).collect::<BTreeSet<_>>();
    criterion(
        6,
        right_count && exclusion_ok && skew_ok && union_ok,
        &format!(
            "10 splits, each excluding exactly its held-out class, skew 0.10 exactly, held-out union covers all {k} classes"
        ),
    );
}

// -------------------------------------------------------------------------
// 7. Auxiliary steps never touch the class head; primary steps never touch
//    the rotation head.
// -------------------------------------------------------------------------

fn tensor_bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn criterion_07_update_masking() {
    let tree = SeedTree::new(107).child("masking");
    let mut data_rng = tree.child("data").rng();
    let train_set = synth_shapes(8, &ShapeKind::ALL, 16, &mut data_rng).unwrap();
    let test_set = synth_shapes(4, &ShapeKind::ALL, 16, &mut data_rng).unwrap();
    let split = make_holdout_splits(&train_set, &test_set, 1)
        .unwrap()
        .swap_remove(0);

    let arch = CnnConfig {
        in_channels: 1,
        widths: vec![4, 8],
        cpc_steps: 1,
    };
    let model = build_model(&arch, 3, AuxTask::Rotation, &tree.child("model")).unwrap();
    let cfg = heldout_core::model::TrainConfig {
        lambda: 1.0,
        epochs: 2,
        batch_size: 4,
        learning_rate: 0.05,
        lr_schedule: vec![],
        aux_task: AuxTask::Rotation,
        seed: 14,
        ..heldout_core::model::TrainConfig::default()
    };

    let mut prev_class = (
        tensor_bits(&model.class_head.weight),
        tensor_bits(&model.class_head.bias),
    );
    let rot0 = model.rot_head.as_ref().unwrap();
    let mut prev_rot = (tensor_bits(&rot0.weight), tensor_bits(&rot0.bias));
    let class_init = prev_class.clone();
    let rot_init = prev_rot.clone();

    let mut class_violations = 0usize;
    let mut rot_violations = 0usize;
    let mut steps = 0usize;
    let (trained, _) = train_with_observer(model, &split, &cfg, |phase, m| {
        steps += 1;
        let class_now = (
            tensor_bits(&m.class_head.weight),
            tensor_bits(&m.class_head.bias),
        );
        let rot = m.rot_head.as_ref().unwrap();
        let rot_now = (tensor_bits(&rot.weight), tensor_bits(&rot.bias));
        match phase {
            StepPhase::Aux => {
                if class_now != prev_class {
                    class_violations += 1;
                }
            }
            StepPhase::Primary => {
                if rot_now != prev_rot {
                    rot_violations += 1;
                }
            }
        }
        prev_class = class_now;
        prev_rot = rot_now;
    })
    .unwrap();

    let class_moved = tensor_bits(&trained.class_head.weight) != class_init.0;
    let rot_trained = trained.rot_head.as_ref().unwrap();
    let rot_moved = tensor_bits(&rot_trained.weight) != rot_init.0;
    criterion(
        7,
        class_violations == 0 && rot_violations == 0 && class_moved && rot_moved && steps > 0,
        &format!(
            "over {steps} observed steps in a 2-epoch rotation run, aux steps left the class head bitwise unchanged ({class_violations} violations) and primary steps left the rotation head unchanged ({rot_violations} violations); both heads trained overall"
        ),
    );
}

// -------------------------------------------------------------------------
// 8 and 9. End-to-end desk runs: the classifier-confidence detector beats
// the random baseline, and rotation augmentation does not hurt it.
// -------------------------------------------------------------------------

fn desk_config(seed: u64, aux: AuxTask, lambda: f64) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec::Synth(SynthSpec {
            classes: ShapeKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            n_train_per_class: 200,
            n_test_per_class: 50,
            image_size: 16,
        }),
        model: ModelSpec {
            widths: vec![8, 16, 32],
            cpc_steps: 1,
        },
        train: TrainSpec {
            aux_task: aux.name().to_string(),
            lambda,
            ..TrainSpec::default()
        },
        scorers: vec![ScorerSpec::Msp],
        trials_per_split: 3,
        seed,
    }
}

fn grand_msp_ap(cfg: &ExperimentConfig) -> f64 {
    let dir = tempfile::tempdir().unwrap();
    let (record, stats) = run_experiment(cfg, dir.path(), false).unwrap();
    assert_eq!(stats.failed, 0, "desk run had failing cells");
    record.summary("msp").unwrap().grand_mean.unwrap()
}

#[test]
fn criteria_08_09_desk_runs() {
    let seeds: Vec<u64> = (0..5).collect();
    let skew = 0.25;

    let start = Instant::now();
    let base: Vec<f64> = seeds
        .iter()
        .map(|&s| grand_msp_ap(&desk_config(s, AuxTask::None, 0.0)))
        .collect();
    let base_secs = start.elapsed().as_secs_f64();
    let trials = seeds.len() * 4 * 3;
    let per_trial = base_secs / trials as f64;
    let above = base.iter().filter(|&&ap| ap >= skew + 0.05).count();
    criterion(
        8,
        above >= 4 && per_trial < 600.0,
        &format!(
            "classification-only grand ap {:?} exceeds skew 0.25 by 0.05 in {above}/5 seeds; {per_trial:.1}s per trial ({trials} trials, {base_secs:.0}s)",
            base.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    );

    let rot: Vec<f64> = seeds
        .iter()
        .map(|&s| grand_msp_ap(&desk_config(s, AuxTask::Rotation, 1.0)))
        .collect();
    let deltas: Vec<f64> = rot.iter().zip(&base).map(|(r, b)| r - b).collect();
    let never_much_worse = deltas.iter().all(|&d| d >= -0.02);
    let mean_delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
    criterion(
        9,
        never_much_worse && mean_delta >= 0.0,
        &format!(
            "rotation-augmented minus classification-only ap per seed {:?}, mean {mean_delta:+.3}",
            deltas.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    );
}

// -------------------------------------------------------------------------
// 10. The random center mask hits every legal position and nothing else.
// -------------------------------------------------------------------------

#[test]
fn criterion_10_mask_positions() {
    let mut rng = SeedTree::new(110).child("mask").rng();
    let image = Tensor::new(&[3, 32, 32], vec![1.0; 3 * 32 * 32]).unwrap();
    let mut positions = BTreeSet::new();
    let mut bad_shape = 0usize;
    for _ in 0..10_000 {
        let masked = random_center_mask(&image, &mut rng).unwrap();
        let data = masked.data();
        let mut min_r = 32;
        let mut min_c = 32;
        let mut zeros = 0usize;
        for ch in 0..3 {
            for r in 0..32 {
                for c in 0..32 {
                    if data[ch * 1024 + r * 32 + c] == 0.0 {
                        zeros += 1;
                        min_r = min_r.min(r);
                        min_c = min_c.min(c);
                    }
                }
            }
        }
        let mut block_ok =
            zeros == 3 * 256 && (5..=10).contains(&min_r) && (5..=10).contains(&min_c);
        if block_ok {
            for ch in 0..3 {
                for r in min_r..min_r + 16 {
                    for c in min_c..min_c + 16 {
                        if data[ch * 1024 + r * 32 + c] != 0.0 {
                            block_ok = false;
                        }
                    }
                }
            }
        }
        if block_ok {
            positions.insert((min_r, min_c));
        } else {
            bad_shape += 1;
        }
    }
    criterion(
        10,
        bad_shape == 0 && positions.len() == 36,
        &format!(
            "10000 draws zero one in-window 16x16 block across channels ({bad_shape} malformed); {} of 36 positions seen",
            positions.len()
        ),
    );
}

// -------------------------------------------------------------------------
// 11. Edge-energy oracles.
// -------------------------------------------------------------------------

#[test]
fn criterion_11_edge_energy_oracles() {
    let flat = Tensor::new(&[1, 6, 6], vec![0.4; 36]).unwrap();
    let flat_energy = edge_energy(&flat).unwrap();

    let mut step_data = vec![0.0; 36];
    for r in 0..6 {
        for c in 3..6 {
            step_data[r * 6 + c] = 1.0;
        }
    }
    let step = Tensor::new(&[1, 6, 6], step_data).unwrap();
    let step_energy = edge_energy(&step).unwrap();

    let mut center = vec![0.0; 9];
    center[4] = 1.0;
    let hand = Tensor::new(&[1, 3, 3], center).unwrap();
    let hand_energy = edge_energy(&hand).unwrap();
    let expected = (8.0 + 4.0 * 2.0f64.sqrt()) / 9.0;
    let hand_err = (hand_energy - expected).abs();

    criterion(
        11,
        flat_energy == 0.0 && step_energy > flat_energy && hand_err <= 1e-12,
        &format!(
            "constant image scores {flat_energy}; step edge scores {step_energy:.3} > 0; bright-center case off by {hand_err:.1e}"
        ),
    );
}

// -------------------------------------------------------------------------
// 12. Identical config and seed give byte-identical records; resume does
//     zero recompute.
// -------------------------------------------------------------------------

#[test]
fn criterion_12_reproducibility_and_resume() {
    let cfg = ExperimentConfig {
        dataset: DatasetSpec::Synth(SynthSpec {
            classes: vec!["disk".into(), "square".into(), "cross".into()],
            n_train_per_class: 8,
            n_test_per_class: 4,
            image_size: 16,
        }),
        model: ModelSpec {
            widths: vec![4],
            cpc_steps: 1,
        },
        train: TrainSpec {
            epochs: 1,
            batch_size: 8,
            lr_schedule: Some(vec![]),
            ..TrainSpec::default()
        },
        scorers: vec![ScorerSpec::Msp],
        trials_per_split: 2,
        seed: 77,
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run_experiment(&cfg, dir_a.path(), false).unwrap();
    run_experiment(&cfg, dir_b.path(), false).unwrap();
    let bytes_a = std::fs::read(dir_a.path().join("record.json")).unwrap();
    let bytes_b = std::fs::read(dir_b.path().join("record.json")).unwrap();
    let identical = bytes_a == bytes_b;

    let (_, stats) = run_experiment(&cfg, dir_a.path(), true).unwrap();
    let bytes_resumed = std::fs::read(dir_a.path().join("record.json")).unwrap();
    criterion(
        12,
        identical && stats.computed == 0 && stats.reused == 6 && bytes_resumed == bytes_a,
        &format!(
            "fresh reruns agree byte for byte ({} bytes); resume reused {} of 6 cells and recomputed {}",
            bytes_a.len(),
            stats.reused,
            stats.computed
        ),
    );
}
