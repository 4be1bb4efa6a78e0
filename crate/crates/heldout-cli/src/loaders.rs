//! Dataset file formats: CIFAR-10 binary batches, IDX image/label pairs,
//! and the crate's own SEMT raw-tensor container.

use std::fs;
use std::path::Path;

use heldout_core::data::LabeledDataset;
use heldout_core::tensor::Tensor;

use crate::error::{CliError, Result};

const CIFAR_RECORD: usize = 3073;
const CIFAR_NAMES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn byte_pixels_to_tensor(shape: [usize; 3], bytes: &[u8]) -> Tensor {
    let data: Vec<f64> = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(&shape, data).expect("shape matches byte count")
}

/// Load one CIFAR-10 binary batch: 3073-byte records, one label byte
/// followed by 3072 pixel bytes (1024 red, 1024 green, 1024 blue,
/// each row-major 32x32). Pixels are scaled to [0,1].
pub fn load_cifar_binary(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(CliError::format(
            path,
            format!(
                "truncated record: {} bytes is not a multiple of {CIFAR_RECORD}",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let rec = &bytes[i * CIFAR_RECORD..(i + 1) * CIFAR_RECORD];
        let label = usize::from(rec[0]);
        if label > 9 {
            return Err(CliError::format(
                path,
                format!("record {i} has label byte {label}, valid labels are 0..=9"),
            ));
        }
        labels.push(label);
        images.push(byte_pixels_to_tensor([3, 32, 32], &rec[1..]));
    }
    let names = CIFAR_NAMES.iter().map(|s| s.to_string()).collect();
    LabeledDataset::new(images, labels, names).map_err(CliError::from)
}

fn read_u32_be(path: &Path, bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(CliError::format(path, format!("file too short for {what}")));
    }
    let mut buf = [0u8; 4];
    buf.copy_from_slice(&bytes[offset..end]);
    Ok(u32::from_be_bytes(buf))
}

/// Load an IDX image file plus its IDX label file (the MNIST container:
/// big-endian header, unsigned byte payload). Images come back as
/// 1xHxW tensors scaled to [0,1].
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<LabeledDataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let img_bytes = read_file(images_path)?;
    let lab_bytes = read_file(labels_path)?;

    let img_magic = read_u32_be(images_path, &img_bytes, 0, "magic")?;
    if img_magic != 0x0000_0803 {
        return Err(CliError::format(
            images_path,
            format!("magic {img_magic:#010x}, expected 0x00000803 for an image file"),
        ));
    }
    let lab_magic = read_u32_be(labels_path, &lab_bytes, 0, "magic")?;
    if lab_magic != 0x0000_0801 {
        return Err(CliError::format(
            labels_path,
            format!("magic {lab_magic:#010x}, expected 0x00000801 for a label file"),
        ));
    }

    let n = read_u32_be(images_path, &img_bytes, 4, "image count")? as usize;
    let h = read_u32_be(images_path, &img_bytes, 8, "row count")? as usize;
    let w = read_u32_be(images_path, &img_bytes, 12, "column count")? as usize;
    let n_labels = read_u32_be(labels_path, &lab_bytes, 4, "label count")? as usize;
    if n != n_labels {
        return Err(CliError::format(
            images_path,
            format!("count mismatch: {n} images but {n_labels} labels in {labels_path:?}"),
        ));
    }
    let expected = 16 + n * h * w;
    if img_bytes.len() != expected {
        return Err(CliError::format(
            images_path,
            format!("{} bytes, header implies {expected}", img_bytes.len()),
        ));
    }
    if lab_bytes.len() != 8 + n {
        return Err(CliError::format(
            labels_path,
            format!("{} bytes, header implies {}", lab_bytes.len(), 8 + n),
        ));
    }

    let labels: Vec<usize> = lab_bytes[8..].iter().map(|&b| usize::from(b)).collect();
    let k = labels.iter().max().map_or(1, |&m| m + 1);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let start = 16 + i * h * w;
        images.push(byte_pixels_to_tensor([1, h, w], &img_bytes[start..start + h * w]));
    }
    let names = (0..k).map(|i| format!("class{i}")).collect();
    LabeledDataset::new(images, labels, names).map_err(CliError::from)
}

const SEMT_MAGIC: &[u8; 4] = b"SEMT";
const SEMT_VERSION: u32 = 1;

fn read_u32_le(path: &Path, bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(CliError::format(path, format!("file too short for {what}")));
    }
    let mut buf = [0u8; 4];
    buf.copy_from_slice(&bytes[offset..end]);
    Ok(u32::from_le_bytes(buf))
}

/// Load a SEMT raw-tensor dataset:
/// `"SEMT" | u32-LE version=1 | u32-LE N | u32-LE C,H,W | u32-LE K |
/// N label bytes | N*C*H*W pixel bytes`, pixels scaled to [0,1].
pub fn load_raw_tensor(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    if bytes.len() < 4 || &bytes[..4] != SEMT_MAGIC {
        return Err(CliError::format(path, "bad magic, expected \"SEMT\""));
    }
    let version = read_u32_le(path, &bytes, 4, "version")?;
    if version != SEMT_VERSION {
        return Err(CliError::format(
            path,
            format!("unsupported version {version}, expected {SEMT_VERSION}"),
        ));
    }
    let n = read_u32_le(path, &bytes, 8, "example count")? as usize;
    let c = read_u32_le(path, &bytes, 12, "channel count")? as usize;
    let h = read_u32_le(path, &bytes, 16, "height")? as usize;
    let w = read_u32_le(path, &bytes, 20, "width")? as usize;
    let k = read_u32_le(path, &bytes, 24, "class count")? as usize;
    let header = 28;
    let expected = header + n + n * c * h * w;
    if bytes.len() != expected {
        return Err(CliError::format(
            path,
            format!(
                "size mismatch: header implies {expected} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let labels: Vec<usize> = bytes[header..header + n].iter().map(|&b| usize::from(b)).collect();
    let px = header + n;
    let per = c * h * w;
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let start = px + i * per;
        images.push(byte_pixels_to_tensor([c, h, w], &bytes[start..start + per]));
    }
    let names = (0..k).map(|i| format!("class{i}")).collect();
    LabeledDataset::new(images, labels, names).map_err(CliError::from)
}

/// Write a dataset as SEMT. Pixels are quantized to bytes
/// (`round(v * 255)`); a read-back equals the original exactly when every
/// pixel already lies on the 1/255 grid, as loader outputs do.
pub fn save_raw_tensor(path: impl AsRef<Path>, ds: &LabeledDataset) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = ds.image_shape().ok_or_else(|| {
        CliError::format(path, "refusing to write an empty dataset")
    })?;
    if ds.n_classes() > 255 || ds.len() > u32::MAX as usize {
        return Err(CliError::format(path, "dataset too large for the SEMT header"));
    }
    let mut bytes = Vec::with_capacity(28 + ds.len() * (1 + c * h * w));
    bytes.extend_from_slice(SEMT_MAGIC);
    for v in [SEMT_VERSION, ds.len() as u32, c as u32, h as u32, w as u32, ds.n_classes() as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend(ds.labels().iter().map(|&l| l as u8));
    for img in ds.images() {
        bytes.extend(img.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Concatenate datasets that share a class set (multi-file loads).
pub fn merge_datasets(parts: Vec<LabeledDataset>) -> Result<LabeledDataset> {
    let Some(first) = parts.first() else {
        return Err(CliError::Config("no dataset files given".into()));
    };
    let names = first.class_names().to_vec();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for part in &parts {
        if part.class_names() != names {
            return Err(CliError::Config(
                "dataset files disagree on the class set".into(),
            ));
        }
        images.extend(part.images().iter().cloned());
        labels.extend_from_slice(part.labels());
    }
    LabeledDataset::new(images, labels, names).map_err(CliError::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn cifar_single_record_scales_pixels_to_unit_range() {
        let dir = tmp();
        let path = dir.path().join("batch.bin");
        let mut rec = vec![255u8; CIFAR_RECORD];
        rec[0] = 7;
        fs::write(&path, &rec).unwrap();
        let ds = load_cifar_binary(&path).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.label(0), 7);
        assert_eq!(ds.image_shape(), Some((3, 32, 32)));
        assert!(ds.image(0).data().iter().all(|&v| v == 1.0));
        assert_eq!(ds.class_names()[7], "horse");
    }

    #[test]
    fn cifar_two_records_make_two_examples() {
        let dir = tmp();
        let path = dir.path().join("batch.bin");
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[CIFAR_RECORD] = 3;
        fs::write(&path, &bytes).unwrap();
        let ds = load_cifar_binary(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), &[0, 3]);
    }

    #[test]
    fn cifar_truncated_file_reports_truncated_record() {
        let dir = tmp();
        let path = dir.path().join("batch.bin");
        fs::write(&path, vec![0u8; 3072]).unwrap();
        let err = load_cifar_binary(&path).unwrap_err();
        assert!(err.to_string().contains("truncated record"), "{err}");
    }

    #[test]
    fn cifar_label_byte_above_nine_is_rejected() {
        let dir = tmp();
        let path = dir.path().join("batch.bin");
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 10;
        fs::write(&path, &rec).unwrap();
        let err = load_cifar_binary(&path).unwrap_err();
        assert!(err.to_string().contains("label byte 10"), "{err}");
    }

    #[test]
    fn cifar_channel_planes_land_in_tensor_channel_order() {
        let dir = tmp();
        let path = dir.path().join("batch.bin");
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[1] = 255;
        rec[1 + 1024] = 51;
        rec[1 + 2048] = 102;
        fs::write(&path, &rec).unwrap();
        let ds = load_cifar_binary(&path).unwrap();
        let img = ds.image(0);
        let d = img.data();
        assert_eq!(d[0], 1.0);
        assert_eq!(d[1024], 0.2);
        assert_eq!(d[2048], 0.4);
    }

    fn write_idx_pair(dir: &Path, pixels: &[u8], labels: &[u8], h: u32, w: u32) -> (PathBuf, PathBuf) {
        let images = dir.join("images.idx");
        let labs = dir.join("labels.idx");
        let n = labels.len() as u32;
        let mut img = Vec::new();
        img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        img.extend_from_slice(&n.to_be_bytes());
        img.extend_from_slice(&h.to_be_bytes());
        img.extend_from_slice(&w.to_be_bytes());
        img.extend_from_slice(pixels);
        fs::write(&images, img).unwrap();
        let mut lab = Vec::new();
        lab.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lab.extend_from_slice(&n.to_be_bytes());
        lab.extend_from_slice(labels);
        fs::write(&labs, lab).unwrap();
        (images, labs)
    }

    use std::path::PathBuf;

    #[test]
    fn idx_pair_loads_grayscale_images() {
        let dir = tmp();
        let (images, labels) = write_idx_pair(dir.path(), &[0, 128, 255, 0], &[1], 2, 2);
        let ds = load_idx(&images, &labels).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.image_shape(), Some((1, 2, 2)));
        let img = ds.image(0);
        let d = img.data();
        assert_eq!(&d[..], &[0.0, 128.0 / 255.0, 1.0, 0.0]);
        assert_eq!(ds.label(0), 1);
        assert_eq!(ds.n_classes(), 2);
    }

    #[test]
    fn idx_count_mismatch_is_rejected() {
        let dir = tmp();
        let (images, _) = write_idx_pair(dir.path(), &[0; 4], &[0], 2, 2);
        let labs = dir.path().join("other.idx");
        let mut lab = Vec::new();
        lab.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lab.extend_from_slice(&2u32.to_be_bytes());
        lab.extend_from_slice(&[0, 1]);
        fs::write(&labs, lab).unwrap();
        let err = load_idx(&images, &labs).unwrap_err();
        assert!(err.to_string().contains("count mismatch"), "{err}");
    }

    #[test]
    fn idx_wrong_magic_is_rejected() {
        let dir = tmp();
        let (images, labels) = write_idx_pair(dir.path(), &[0; 4], &[0], 2, 2);
        let err = load_idx(&labels, &images).unwrap_err();
        assert!(err.to_string().contains("expected 0x00000803"), "{err}");
    }

    fn semt_bytes(n: u32, c: u32, h: u32, w: u32, k: u32, labels: &[u8], pixels: &[u8]) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"SEMT");
        for v in [1u32, n, c, h, w, k] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(labels);
        bytes.extend_from_slice(pixels);
        bytes
    }

    #[test]
    fn semt_minimal_file_parses() {
        let dir = tmp();
        let path = dir.path().join("d.semt");
        fs::write(&path, semt_bytes(1, 1, 1, 1, 2, &[1], &[0])).unwrap();
        let ds = load_raw_tensor(&path).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.label(0), 1);
        assert_eq!(ds.n_classes(), 2);
        assert_eq!(ds.image(0).data()[0], 0.0);
    }

    #[test]
    fn semt_header_claiming_more_records_than_present_is_rejected() {
        let dir = tmp();
        let path = dir.path().join("d.semt");
        fs::write(&path, semt_bytes(2, 1, 1, 1, 2, &[1], &[0])).unwrap();
        let err = load_raw_tensor(&path).unwrap_err();
        assert!(err.to_string().contains("size mismatch"), "{err}");
    }

    #[test]
    fn semt_bad_magic_and_version_are_rejected() {
        let dir = tmp();
        let path = dir.path().join("d.semt");
        fs::write(&path, b"SEMX\x01\x00\x00\x00").unwrap();
        assert!(load_raw_tensor(&path).unwrap_err().to_string().contains("bad magic"));
        let mut v2 = semt_bytes(1, 1, 1, 1, 2, &[1], &[0]);
        v2[4] = 2;
        fs::write(&path, v2).unwrap();
        assert!(load_raw_tensor(&path).unwrap_err().to_string().contains("version 2"));
    }

    #[test]
    fn semt_round_trip_preserves_byte_quantized_data() {
        let dir = tmp();
        let path = dir.path().join("d.semt");
        let images = vec![
            Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 128.0 / 255.0, 17.0 / 255.0]).unwrap(),
            Tensor::new(&[1, 2, 2], vec![0.5_f64.round() / 255.0, 0.0, 0.0, 1.0]).unwrap(),
        ];
        let ds = LabeledDataset::new(
            images,
            vec![0, 1],
            vec!["class0".into(), "class1".into()],
        )
        .unwrap();
        save_raw_tensor(&path, &ds).unwrap();
        let back = load_raw_tensor(&path).unwrap();
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.class_names(), ds.class_names());
        for (a, b) in back.images().iter().zip(ds.images()) {
            assert_eq!(&a.data()[..], &b.data()[..]);
        }
    }

    #[test]
    fn merge_concatenates_batches_with_one_class_set() {
        let mk = |label: usize| {
            LabeledDataset::new(
                vec![Tensor::zeros(&[1, 2, 2])],
                vec![label],
                vec!["a".into(), "b".into()],
            )
            .unwrap()
        };
        let merged = merge_datasets(vec![mk(0), mk(1), mk(1)]).unwrap();
        assert_eq!(merged.len(), 3);
        assert_eq!(merged.labels(), &[0, 1, 1]);
    }

    #[test]
    fn missing_file_error_names_the_path() {
        let err = load_cifar_binary("/nonexistent/batch.bin").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/batch.bin"), "{err}");
    }
}
