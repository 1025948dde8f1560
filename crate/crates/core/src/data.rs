//! Datasets: IDX ingestion, binary class-pair selection, the 2-D ring
//! generator, pad-and-crop augmentation and CSV serialization.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::class::{require_both_classes, Class};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::All => "all",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Labelled binary dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<Class>,
    pub split: Split,
    pub provenance: String,
    /// `(rows, cols)` when inputs are flattened greyscale images.
    pub image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<Class>, split: Split, provenance: impl Into<String>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(first) = inputs.first() {
            let d = first.len();
            for (i, x) in inputs.iter().enumerate() {
                if x.rank() != 1 || x.len() != d {
                    return Err(Error::Consistency(format!(
                        "sample {i} has shape {:?}, expected [{d}]",
                        x.shape()
                    )));
                }
            }
        }
        Ok(Dataset {
            inputs,
            labels,
            split,
            provenance: provenance.into(),
            image_shape: None,
        })
    }

    pub fn with_image_shape(mut self, rows: usize, cols: usize) -> Self {
        self.image_shape = Some((rows, cols));
        self
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Tensor::len)
    }

    pub fn count(&self, class: Class) -> usize {
        self.labels.iter().filter(|&&c| c == class).count()
    }

    pub fn require_both_classes(&self) -> Result<()> {
        require_both_classes(&self.labels, &format!("{} dataset", self.split))
    }

    /// True when every value lies in `[0, 1]`.
    pub fn is_unit_range(&self) -> bool {
        self.inputs
            .iter()
            .all(|x| x.data().iter().all(|v| (0.0..=1.0).contains(v)))
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        Dataset {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split,
            provenance: self.provenance.clone(),
            image_shape: self.image_shape,
        }
    }

    /// First `n` samples (or all when `n ≥ len`).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.split)
    }

    pub fn inputs_of(&self, class: Class) -> Vec<&Tensor> {
        self.inputs
            .iter()
            .zip(&self.labels)
            .filter(|(_, &c)| c == class)
            .map(|(x, _)| x)
            .collect()
    }

    /// Stratified split: `val_fraction` of each class (rounded, at least
    /// one sample when the class has two or more) goes to validation.
    pub fn split_stratified(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Config(format!(
                "validation fraction {val_fraction} must lie in [0, 1)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for class in [Class::Sensitive, Class::Other] {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            idx.shuffle(&mut rng);
            let mut n_val = (idx.len() as f64 * val_fraction).round() as usize;
            if val_fraction > 0.0 && n_val == 0 && idx.len() >= 2 {
                n_val = 1;
            }
            val.extend_from_slice(&idx[..n_val]);
            train.extend_from_slice(&idx[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        Ok((self.subset(&train, Split::Train), self.subset(&val, Split::Val)))
    }

    /// CSV with one row per sample: label, then `d` values.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["label".to_string()];
        header.extend((0..self.dim()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for (x, c) in self.inputs.iter().zip(&self.labels) {
            let mut row = vec![c.to_string()];
            row.extend(x.data().iter().map(|v| format!("{v}")));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path)?;
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse_err = |what: &str| Error::Format(format!("{}: row {i}: bad {what}", path.display()));
            let label: u8 = rec.get(0).ok_or_else(|| parse_err("label"))?.trim().parse().map_err(|_| parse_err("label"))?;
            labels.push(Class::from_u8(label)?);
            let values = rec
                .iter()
                .skip(1)
                .map(|s| s.trim().parse::<f32>().map_err(|_| parse_err("value")))
                .collect::<Result<Vec<f32>>>()?;
            inputs.push(Tensor::vector(values)?);
        }
        Dataset::new(inputs, labels, split, format!("csv:{}", path.display()))
    }
}

/// Multi-class greyscale images as read from IDX files, scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImages {
    pub images: Vec<Tensor>,
    pub labels: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
    pub provenance: String,
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Parse {
            offset: bytes.len() as u64,
            message: format!("truncated IDX header while reading {what} at offset {offset}"),
        })
}

fn check_magic(found: u32, expected: u32, what: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Format(format!(
            "{what}: bad IDX magic 0x{found:08x}, expected 0x{expected:08x}"
        )));
    }
    Ok(())
}

fn payload<'b>(bytes: &'b [u8], offset: usize, len: usize, what: &str) -> Result<&'b [u8]> {
    bytes.get(offset..offset + len).ok_or_else(|| Error::Parse {
        offset: bytes.len() as u64,
        message: format!(
            "truncated {what}: expected {len} bytes from offset {offset}, file has {}",
            bytes.len()
        ),
    })
}

/// Parses an IDX image file body (magic `0x00000803`) into `[0,1]` tensors.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Vec<Tensor>, usize, usize)> {
    check_magic(be_u32(bytes, 0, "magic")?, IDX_IMAGES_MAGIC, "images")?;
    let n = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    let d = rows * cols;
    let body = payload(bytes, 16, n * d, "image data")?;
    if bytes.len() != 16 + n * d {
        return Err(Error::Parse {
            offset: (16 + n * d) as u64,
            message: "trailing bytes after image data".into(),
        });
    }
    let images = body
        .chunks_exact(d.max(1))
        .take(n)
        .map(|px| Tensor::from_parts(vec![d], px.iter().map(|&b| b as f32 / 255.0).collect()))
        .collect();
    Ok((images, rows, cols))
}

/// Parses an IDX label file body (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(be_u32(bytes, 0, "magic")?, IDX_LABELS_MAGIC, "labels")?;
    let n = be_u32(bytes, 4, "label count")? as usize;
    let body = payload(bytes, 8, n, "label data")?;
    if bytes.len() != 8 + n {
        return Err(Error::Parse {
            offset: (8 + n) as u64,
            message: "trailing bytes after label data".into(),
        });
    }
    Ok(body.to_vec())
}

/// Reads an IDX image/label file pair. Gzip-compressed files are accepted.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<RawImages> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (images, rows, cols) = parse_idx_images(&read_maybe_gz(ip)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(lp)?)?;
    if images.len() != labels.len() {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    Ok(RawImages {
        images,
        labels,
        rows,
        cols,
        provenance: format!("idx:{}", ip.display()),
    })
}

/// Loads the training or test pair of a directory holding the four
/// standard IDX files, gzipped or not.
pub fn load_idx_dir(dir: impl AsRef<Path>, split: Split) -> Result<RawImages> {
    let dir = dir.as_ref();
    let prefix = match split {
        Split::Test => "t10k",
        Split::Train | Split::Val | Split::All => "train",
    };
    let find = |kind: &str| {
        let base = format!("{prefix}-{kind}");
        [format!("{base}.gz"), base.clone()]
            .into_iter()
            .map(|name| dir.join(name))
            .find(|p| p.is_file())
            .ok_or_else(|| Error::io(dir.join(&base), std::io::Error::from(std::io::ErrorKind::NotFound)))
    };
    load_idx(find("images-idx3-ubyte")?, find("labels-idx1-ubyte")?)
}

/// Keeps two classes; `class_a` becomes the sensitive class 1, `class_b` class 2.
pub fn select_pair(raw: &RawImages, class_a: u8, class_b: u8, split: Split) -> Result<Dataset> {
    if class_a == class_b {
        return Err(Error::Config(format!("class pair ({class_a}, {class_b}) must be distinct")));
    }
    for c in [class_a, class_b] {
        if !raw.labels.contains(&c) {
            return Err(Error::Config(format!("class {c} does not occur in {}", raw.provenance)));
        }
    }
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (x, &l) in raw.images.iter().zip(&raw.labels) {
        let class = if l == class_a {
            Class::Sensitive
        } else if l == class_b {
            Class::Other
        } else {
            continue;
        };
        inputs.push(x.clone());
        labels.push(class);
    }
    Ok(Dataset::new(
        inputs,
        labels,
        split,
        format!("{} classes {class_a}-vs-{class_b}", raw.provenance),
    )?
    .with_image_shape(raw.rows, raw.cols))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingSpec {
    pub n_inner: usize,
    pub n_outer: usize,
    pub r_inner: f64,
    pub r_ring: f64,
    /// Half-width of the uniform radial jitter on the ring.
    pub noise: f64,
    pub seed: u64,
    /// Which group is labelled class 1.
    pub inner_sensitive: bool,
}

impl Default for RingSpec {
    fn default() -> Self {
        RingSpec {
            n_inner: 100,
            n_outer: 100,
            r_inner: 1.0,
            r_ring: 2.0,
            noise: 0.1,
            seed: 0,
            inner_sensitive: true,
        }
    }
}

/// Inner points uniform in a disk, outer points evenly spread (random phase)
/// around a ring with uniform radial jitter.
pub fn make_ring(spec: &RingSpec) -> Result<Dataset> {
    if !(0.0 < spec.r_inner && spec.r_inner < spec.r_ring) {
        return Err(Error::Config("ring needs 0 < r_inner < r_ring".into()));
    }
    if spec.noise < 0.0 {
        return Err(Error::Config("ring noise must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tau = std::f64::consts::TAU;
    let (inner_class, outer_class) = if spec.inner_sensitive {
        (Class::Sensitive, Class::Other)
    } else {
        (Class::Other, Class::Sensitive)
    };
    let mut inputs = Vec::with_capacity(spec.n_inner + spec.n_outer);
    let mut labels = Vec::with_capacity(inputs.capacity());
    for _ in 0..spec.n_inner {
        let r = spec.r_inner * rng.random::<f64>().sqrt();
        let t = tau * rng.random::<f64>();
        inputs.push(Tensor::from(vec![(r * t.cos()) as f32, (r * t.sin()) as f32]));
        labels.push(inner_class);
    }
    let phase = tau * rng.random::<f64>();
    for k in 0..spec.n_outer {
        let t = phase + tau * k as f64 / spec.n_outer as f64;
        let r = spec.r_ring + spec.noise * (2.0 * rng.random::<f64>() - 1.0);
        inputs.push(Tensor::from(vec![(r * t.cos()) as f32, (r * t.sin()) as f32]));
        labels.push(outer_class);
    }
    Dataset::new(
        inputs,
        labels,
        Split::All,
        format!(
            "ring(n_inner={}, n_outer={}, r_inner={}, r_ring={}, noise={}, seed={})",
            spec.n_inner, spec.n_outer, spec.r_inner, spec.r_ring, spec.noise, spec.seed
        ),
    )
}

/// Zero-pads an `rows × cols` image by `pad` pixels and crops the window
/// whose top-left corner sits at `(dy, dx)` in padded coordinates.
pub fn pad_crop_at(image: &Tensor, rows: usize, cols: usize, pad: usize, dy: usize, dx: usize) -> Result<Tensor> {
    image.expect_vector(rows * cols, "pad/crop image")?;
    if dy > 2 * pad || dx > 2 * pad {
        return Err(Error::Config(format!("crop offset ({dy}, {dx}) exceeds 2·pad = {}", 2 * pad)));
    }
    let src = image.data();
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        // source row in unpadded coordinates
        let Some(sr) = (r + dy).checked_sub(pad).filter(|&s| s < rows) else { continue };
        for c in 0..cols {
            if let Some(sc) = (c + dx).checked_sub(pad).filter(|&s| s < cols) {
                out[r * cols + c] = src[sr * cols + sc];
            }
        }
    }
    Ok(Tensor::from_parts(vec![rows * cols], out))
}

/// Random pad-and-crop augmentation; `pad = 0` is the identity.
pub fn augment_pad_crop<R: Rng + ?Sized>(image: &Tensor, rows: usize, cols: usize, pad: usize, rng: &mut R) -> Result<Tensor> {
    if pad == 0 {
        image.expect_vector(rows * cols, "pad/crop image")?;
        return Ok(image.clone());
    }
    let dy = rng.random_range(0..=2 * pad);
    let dx = rng.random_range(0..=2 * pad);
    pad_crop_at(image, rows, cols, pad, dy, dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, px: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(px);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn parses_two_image_fixture() {
        let bytes = idx_images(2, 2, 2, &[0, 255, 51, 102, 255, 0, 0, 255]);
        let (imgs, rows, cols) = parse_idx_images(&bytes).unwrap();
        assert_eq!((rows, cols), (2, 2));
        assert_eq!(imgs[0].data(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(imgs[1].data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn wrong_label_magic_is_format_error() {
        let mut bytes = idx_labels(&[1, 2]);
        bytes[3] = 0x03;
        assert!(matches!(parse_idx_labels(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_images_report_offset() {
        let bytes = idx_images(2, 2, 2, &[0, 1, 2]);
        assert!(matches!(parse_idx_images(&bytes), Err(Error::Parse { offset: 19, .. })));
        assert!(matches!(parse_idx_images(&bytes[..10]), Err(Error::Parse { .. })));
    }

    #[test]
    fn count_mismatch_is_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        fs::write(&ip, idx_images(2, 1, 1, &[0, 1])).unwrap();
        fs::write(&lp, idx_labels(&[3])).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Consistency(_))));
    }

    fn raw() -> RawImages {
        RawImages {
            images: (0..5u8).map(|i| Tensor::from(vec![i as f32 / 10.0])).collect(),
            labels: vec![3, 8, 1, 8, 3],
            rows: 1,
            cols: 1,
            provenance: "fixture".into(),
        }
    }

    #[test]
    fn select_pair_relabels_and_preserves_data() {
        let ds = select_pair(&raw(), 3, 8, Split::Train).unwrap();
        assert_eq!(ds.labels, [Class::Sensitive, Class::Other, Class::Other, Class::Sensitive]);
        assert_eq!(ds.inputs[0], raw().images[0]);
        assert_eq!(ds.inputs[3], raw().images[4]);
        let swapped = select_pair(&raw(), 8, 3, Split::Train).unwrap();
        assert_eq!(swapped.labels, [Class::Other, Class::Sensitive, Class::Sensitive, Class::Other]);
        assert!(matches!(select_pair(&raw(), 3, 9, Split::Train), Err(Error::Config(_))));
    }

    #[test]
    fn ring_radii_without_noise() {
        let spec = RingSpec { noise: 0.0, n_inner: 50, n_outer: 40, ..RingSpec::default() };
        let ds = make_ring(&spec).unwrap();
        for (x, c) in ds.inputs.iter().zip(&ds.labels) {
            let r = (x.data()[0] as f64).hypot(x.data()[1] as f64);
            match c {
                Class::Sensitive => assert!(r <= spec.r_inner + 1e-6),
                Class::Other => assert!((r - spec.r_ring).abs() < 1e-6),
            }
        }
        assert_eq!(make_ring(&spec).unwrap(), ds);
    }

    #[test]
    fn pad_crop_identities() {
        let img = Tensor::from((0..12).map(|v| v as f32 / 12.0).collect::<Vec<_>>());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment_pad_crop(&img, 3, 4, 0, &mut rng).unwrap(), img);
        assert_eq!(pad_crop_at(&img, 3, 4, 1, 1, 1).unwrap(), img);
        let shifted = pad_crop_at(&img, 3, 4, 1, 0, 0).unwrap();
        // top row and left column come from the zero border
        assert_eq!(&shifted.data()[..4], &[0.0; 4]);
        assert_eq!(shifted.data()[5], img.data()[0]);
        for _ in 0..20 {
            assert_eq!(augment_pad_crop(&img, 3, 4, 2, &mut rng).unwrap().len(), 12);
        }
    }

    #[test]
    fn stratified_split_keeps_both_classes() {
        let ds = make_ring(&RingSpec { n_inner: 10, n_outer: 10, ..RingSpec::default() }).unwrap();
        let (train, val) = ds.split_stratified(0.2, 3).unwrap();
        assert_eq!(train.len() + val.len(), 20);
        assert_eq!(val.count(Class::Sensitive), 2);
        assert_eq!(val.count(Class::Other), 2);
    }

    #[test]
    fn csv_round_trip() {
        let ds = make_ring(&RingSpec { n_inner: 3, n_outer: 4, ..RingSpec::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ring.csv");
        ds.write_csv(&p).unwrap();
        let back = Dataset::read_csv(&p, Split::All).unwrap();
        assert_eq!(back.inputs, ds.inputs);
        assert_eq!(back.labels, ds.labels);
    }
}
