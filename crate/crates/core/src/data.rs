//! Image datasets: IDX ingestion, a synthetic seven-segment digit set, and the
//! public/private label split.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use thiserror::Error;

use crate::numerics::{NumericsError, Rng, Tensor};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("wrong magic for {kind}: expected {expected:#010x}, found {found:#010x} at offset 0")]
    WrongMagic {
        kind: &'static str,
        expected: u32,
        found: u32,
    },
    #[error("truncated {kind} file: needed {needed} bytes at offset {offset}, only {available} available")]
    Truncated {
        kind: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Images (`n × rows × cols`, values in `[0, 1]`) with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if images.shape().len() != 3 {
            return Err(DataError::Invalid(format!("images must be n×rows×cols, got {:?}", images.shape())));
        }
        let n = images.shape()[0];
        if n != labels.len() {
            return Err(DataError::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if images.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(DataError::Invalid("pixel outside [0, 1]".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Invalid(format!("label {bad} >= class count {num_classes}")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.images.shape()[1], self.images.shape()[2])
    }

    /// Images flattened to `n × (rows·cols)`.
    pub fn flat_images(&self) -> Tensor {
        let (r, c) = self.image_dims();
        self.images.reshape(vec![self.len(), r * c]).expect("same element count")
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self, DataError> {
        let images = self.images.select_rows(idx)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Self::new(images, labels, self.num_classes)
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_insert(0) += 1;
        }
        counts
    }

    /// Seeded `(train, held_out)` partition with `held_out_fraction` of the items held out.
    pub fn train_holdout(&self, held_out_fraction: f64, seed: u64) -> Result<(Self, Self), DataError> {
        if self.len() < 2 {
            return Err(DataError::Invalid("need at least two items to hold some out".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        Rng::new(seed).shuffle(&mut order);
        let n_hold = ((self.len() as f64) * held_out_fraction).round() as usize;
        let n_hold = n_hold.clamp(1, self.len() - 1);
        let (hold, train) = order.split_at(n_hold);
        Ok((self.subset(train)?, self.subset(hold)?))
    }
}

/// Disjoint, non-empty public and private label sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    public: BTreeSet<usize>,
    private: BTreeSet<usize>,
}

impl SplitSpec {
    pub fn new(public: impl IntoIterator<Item = usize>, private: impl IntoIterator<Item = usize>) -> Result<Self, DataError> {
        let public: BTreeSet<_> = public.into_iter().collect();
        let private: BTreeSet<_> = private.into_iter().collect();
        if public.is_empty() || private.is_empty() {
            return Err(DataError::Split("label sets must be non-empty".into()));
        }
        if let Some(shared) = public.intersection(&private).next() {
            return Err(DataError::Split(format!("label {shared} is both public and private")));
        }
        Ok(Self { public, private })
    }

    /// Public digits 5–9, private digits 0–4.
    pub fn mnist_default() -> Self {
        Self::new(5..10, 0..5).expect("disjoint")
    }

    pub fn public(&self) -> &BTreeSet<usize> {
        &self.public
    }

    pub fn private(&self) -> &BTreeSet<usize> {
        &self.private
    }
}

/// Result of [`split_public_private`].
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// Items with public labels; labels keep their original values.
    pub public: Dataset,
    /// Items with private labels re-indexed densely to `0..K`.
    pub private: Dataset,
    /// `private_to_original[k]` is the original label of private class `k`.
    pub private_to_original: Vec<usize>,
}

pub fn split_public_private(ds: &Dataset, spec: &SplitSpec) -> Result<Split, DataError> {
    let present: BTreeSet<usize> = ds.labels().iter().copied().collect();
    for label in spec.public.iter().chain(&spec.private) {
        if !present.contains(label) {
            return Err(DataError::Split(format!("label {label} does not occur in the dataset")));
        }
    }
    let private_to_original: Vec<usize> = spec.private.iter().copied().collect();
    let reindex: BTreeMap<usize, usize> = private_to_original.iter().enumerate().map(|(k, &l)| (l, k)).collect();

    let public_idx: Vec<usize> = (0..ds.len()).filter(|&i| spec.public.contains(&ds.labels()[i])).collect();
    let private_idx: Vec<usize> = (0..ds.len()).filter(|&i| reindex.contains_key(&ds.labels()[i])).collect();
    if public_idx.is_empty() || private_idx.is_empty() {
        return Err(DataError::Split("a side of the split is empty".into()));
    }
    let public = ds.subset(&public_idx)?;
    let private_images = ds.images().select_rows(&private_idx)?;
    let private_labels = private_idx.iter().map(|&i| reindex[&ds.labels()[i]]).collect();
    let private = Dataset::new(private_images, private_labels, private_to_original.len())?;
    Ok(Split {
        public,
        private,
        private_to_original,
    })
}

struct Reader<'a> {
    kind: &'static str,
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.bytes.len() - self.offset < n {
            return Err(DataError::Truncated {
                kind: self.kind,
                offset: self.offset,
                needed: n,
                available: self.bytes.len() - self.offset,
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<(), DataError> {
        let found = self.u32()?;
        if found != expected {
            return Err(DataError::WrongMagic {
                kind: self.kind,
                expected,
                found,
            });
        }
        Ok(())
    }
}

/// Parses an IDX image file; pixels are scaled by `1/255`. Returns `n × rows × cols`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor, DataError> {
    let mut r = Reader {
        kind: "images",
        bytes,
        offset: 0,
    };
    r.magic(IMAGE_MAGIC)?;
    let n = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(DataError::Invalid(format!("image file dimensions {n}×{rows}×{cols}")));
    }
    let payload = r.take(n * rows * cols)?;
    let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Tensor::new(vec![n, rows, cols], data)?)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    let mut r = Reader {
        kind: "labels",
        bytes,
        offset: 0,
    };
    r.magic(LABEL_MAGIC)?;
    let n = r.u32()? as usize;
    Ok(r.take(n)?.iter().map(|&b| usize::from(b)).collect())
}

pub fn load_idx(image_path: &Path, label_path: &Path) -> Result<Dataset, DataError> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|source| DataError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    let images = parse_idx_images(&read(image_path)?)?;
    let labels = parse_idx_labels(&read(label_path)?)?;
    if images.shape()[0] != labels.len() {
        return Err(DataError::CountMismatch {
            images: images.shape()[0],
            labels: labels.len(),
        });
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(images, labels, k)
}

/// IDX bytes for the images of `ds`; pixels are stored as `round(255·v)`.
pub fn encode_idx_images(ds: &Dataset) -> Vec<u8> {
    let (rows, cols) = ds.image_dims();
    let mut out = Vec::with_capacity(16 + ds.images().numel());
    for v in [IMAGE_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(ds.images().data().iter().map(|&p| (p * 255.0).round() as u8));
    out
}

pub fn encode_idx_labels(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + ds.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    out.extend(ds.labels().iter().map(|&l| l as u8));
    out
}

type Segment = ((f64, f64), (f64, f64));

// Seven-segment layout on the 28×28 canvas: a top, b upper right, c lower
// right, d bottom, e lower left, f upper left, g middle.
const SEG_A: Segment = ((8.0, 5.0), (20.0, 5.0));
const SEG_B: Segment = ((20.0, 5.0), (20.0, 14.0));
const SEG_C: Segment = ((20.0, 14.0), (20.0, 23.0));
const SEG_D: Segment = ((8.0, 23.0), (20.0, 23.0));
const SEG_E: Segment = ((8.0, 14.0), (8.0, 23.0));
const SEG_F: Segment = ((8.0, 5.0), (8.0, 14.0));
const SEG_G: Segment = ((8.0, 14.0), (20.0, 14.0));

fn glyph(digit: usize) -> &'static [Segment] {
    match digit {
        0 => &[SEG_A, SEG_B, SEG_C, SEG_D, SEG_E, SEG_F],
        1 => &[SEG_B, SEG_C],
        2 => &[SEG_A, SEG_B, SEG_G, SEG_E, SEG_D],
        3 => &[SEG_A, SEG_B, SEG_G, SEG_C, SEG_D],
        4 => &[SEG_F, SEG_G, SEG_B, SEG_C],
        5 => &[SEG_A, SEG_F, SEG_G, SEG_C, SEG_D],
        6 => &[SEG_A, SEG_F, SEG_G, SEG_E, SEG_D, SEG_C],
        7 => &[SEG_A, SEG_B, SEG_C],
        8 => &[SEG_A, SEG_B, SEG_C, SEG_D, SEG_E, SEG_F, SEG_G],
        _ => &[SEG_A, SEG_B, SEG_C, SEG_D, SEG_F, SEG_G],
    }
}

fn segment_distance(px: f64, py: f64, ((x0, y0), (x1, y1)): Segment) -> f64 {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let t = (((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (cx, cy) = (x0 + t * dx, y0 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

const MAX_SHIFT: f64 = 2.0;
const NOISE_STD: f64 = 0.05;
const STROKE_HALF_WIDTH: f64 = 1.5;

/// Renders one digit template translated by `(dx, dy)` pixels, without noise.
pub fn render_digit(digit: usize, dx: f64, dy: f64) -> Vec<f64> {
    let segments = glyph(digit);
    let mut img = vec![0.0; PIXELS];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let (px, py) = (x as f64 + 0.5 - dx, y as f64 + 0.5 - dy);
            let d = segments
                .iter()
                .map(|&s| segment_distance(px, py, s))
                .fold(f64::INFINITY, f64::min);
            img[y * SIDE + x] = (STROKE_HALF_WIDTH + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    img
}

/// Deterministic synthetic digits: `n_per_class` jittered renderings of each
/// of the first `classes` seven-segment templates.
///
/// Each sample is translated by up to ±2 px on each axis (continuous offsets)
/// and receives additive `N(0, 0.05²)` noise before clamping to `[0, 1]`.
pub fn synth_digits(rng: &mut Rng, n_per_class: usize, classes: usize) -> Result<Dataset, DataError> {
    if classes == 0 || classes > 10 {
        return Err(DataError::Invalid(format!("classes must be in 1..=10, got {classes}")));
    }
    if n_per_class == 0 {
        return Err(DataError::Invalid("n_per_class must be positive".into()));
    }
    let n = n_per_class * classes;
    let mut data = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % classes;
        let dx = (rng.uniform() * 2.0 - 1.0) * MAX_SHIFT;
        let dy = (rng.uniform() * 2.0 - 1.0) * MAX_SHIFT;
        data.extend(
            render_digit(digit, dx, dy)
                .into_iter()
                .map(|v| (v + NOISE_STD * rng.normal()).clamp(0.0, 1.0)),
        );
        labels.push(digit);
    }
    let images = Tensor::new(vec![n, SIDE, SIDE], data)?;
    Dataset::new(images, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        std::iter::once(magic).chain(dims.iter().copied()).flat_map(u32::to_be_bytes).collect()
    }

    #[test]
    fn decodes_labels() {
        let mut bytes = header(LABEL_MAGIC, &[2]);
        bytes.extend([7, 2]);
        assert_eq!(parse_idx_labels(&bytes).unwrap(), vec![7, 2]);
    }

    #[test]
    fn decodes_hand_built_image() {
        let mut bytes = header(IMAGE_MAGIC, &[1, 2, 2]);
        bytes.extend([0, 255, 128, 64]);
        let t = parse_idx_images(&bytes).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        let want = [0.0, 1.0, 0.50196, 0.25098];
        for (got, want) in t.data().iter().zip(want) {
            assert!((got - want).abs() < 5e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn wrong_magic_is_named() {
        let mut bytes = header(LABEL_MAGIC, &[1, 2, 2]);
        bytes.extend([0, 0, 0, 0]);
        let err = parse_idx_images(&bytes).unwrap_err();
        assert!(err.to_string().starts_with("wrong magic for images"), "{err}");
    }

    #[test]
    fn truncation_reports_offset() {
        let mut bytes = header(IMAGE_MAGIC, &[2, 2, 2]);
        bytes.extend([1, 2, 3]);
        match parse_idx_images(&bytes).unwrap_err() {
            DataError::Truncated { offset, needed, available, .. } => {
                assert_eq!((offset, needed, available), (16, 8, 3));
            }
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(parse_idx_labels(&[0, 0]), Err(DataError::Truncated { offset: 0, .. })));
    }

    #[test]
    fn count_mismatch_between_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(IMAGE_MAGIC, &[2, 1, 1]);
        img.extend([0, 255]);
        let mut lab = header(LABEL_MAGIC, &[3]);
        lab.extend([0, 1, 2]);
        std::fs::write(dir.path().join("i"), img).unwrap();
        std::fs::write(dir.path().join("l"), lab).unwrap();
        let err = load_idx(&dir.path().join("i"), &dir.path().join("l")).unwrap_err();
        assert!(matches!(err, DataError::CountMismatch { images: 2, labels: 3 }));
    }

    fn tiny(labels: Vec<usize>) -> Dataset {
        let n = labels.len();
        let images = Tensor::from_fn(vec![n, 2, 2], |i| (i / 4) as f64 / n as f64).unwrap();
        Dataset::new(images, labels, 10).unwrap()
    }

    #[test]
    fn split_partitions_and_reindexes() {
        let ds = tiny(vec![0, 5, 1, 9]);
        let spec = SplitSpec::new([5, 9], [0, 1]).unwrap();
        let split = split_public_private(&ds, &spec).unwrap();
        assert_eq!(split.public.labels(), &[5, 9]);
        assert_eq!(split.public.images().row(0), ds.images().row(1));
        assert_eq!(split.public.images().row(1), ds.images().row(3));
        assert_eq!(split.private.labels(), &[0, 1]);
        assert_eq!(split.private.images().row(1), ds.images().row(2));
        assert_eq!(split.private_to_original, vec![0, 1]);
        assert_eq!(split.private.num_classes(), 2);
    }

    #[test]
    fn overlapping_or_empty_specs_rejected() {
        assert!(SplitSpec::new([1, 2], [2, 3]).is_err());
        assert!(SplitSpec::new([], [2, 3]).is_err());
    }

    #[test]
    fn split_requires_present_labels() {
        let ds = tiny(vec![0, 5]);
        assert!(split_public_private(&ds, &SplitSpec::new([5, 6], [0]).unwrap()).is_err());
    }

    #[test]
    fn synthetic_digits_are_deterministic_and_clamped() {
        let a = synth_digits(&mut Rng::new(1), 20, 10).unwrap();
        let b = synth_digits(&mut Rng::new(1), 20, 10).unwrap();
        assert_eq!(a, b);
        assert!(a.images().data().iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(a.class_counts().values().copied().collect::<Vec<_>>(), vec![20; 10]);
        assert!(synth_digits(&mut Rng::new(1), 2, 11).is_err());
    }

    #[test]
    fn templates_are_distinct() {
        let t: Vec<Vec<f64>> = (0..10).map(|d| render_digit(d, 0.0, 0.0)).collect();
        for i in 0..10 {
            for j in i + 1..10 {
                let diff: f64 = t[i].iter().zip(&t[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(diff > 10.0, "digits {i} and {j} nearly identical");
            }
        }
    }

    proptest! {
        #[test]
        fn idx_round_trip_is_bit_exact(pixels in proptest::collection::vec(any::<u8>(), 4 * 3),
                                       labels in proptest::collection::vec(0usize..10, 4)) {
            let images = Tensor::new(vec![4, 3, 1], pixels.iter().map(|&b| f64::from(b) / 255.0).collect()).unwrap();
            let ds = Dataset::new(images, labels, 10).unwrap();
            let img = parse_idx_images(&encode_idx_images(&ds)).unwrap();
            let lab = parse_idx_labels(&encode_idx_labels(&ds)).unwrap();
            prop_assert_eq!(img.data(), ds.images().data());
            prop_assert_eq!(img.shape(), ds.images().shape());
            prop_assert_eq!(lab, ds.labels().to_vec());
        }

        #[test]
        fn split_preserves_class_counts(extra in proptest::collection::vec(0usize..10, 0..50)) {
            let ds = tiny((0..10).chain(extra).collect());
            let split = split_public_private(&ds, &SplitSpec::mnist_default()).unwrap();
            prop_assert_eq!(split.public.len() + split.private.len(), ds.len());
            let counts = ds.class_counts();
            for (l, c) in split.public.class_counts() {
                prop_assert_eq!(counts[&l], c);
            }
            for (k, c) in split.private.class_counts() {
                prop_assert_eq!(counts[&split.private_to_original[k]], c);
            }
        }
    }
}
