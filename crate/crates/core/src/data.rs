//! Dataset ingestion, augmentation, rotation, and batch construction.
//!
//! Two sources: IDX ubyte files and a seeded synthetic generator of oriented
//! patterns. Images are square so quarter-turn rotation is a pure index
//! permutation. True labels ride along for evaluation only; the training
//! entry points accept bare image tensors plus a pseudo-label table, so the
//! training path cannot read them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

use crate::cluster::PseudoLabelTable;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pad width for the pad-then-crop augmentation.
pub const AUG_PAD: usize = 4;
/// Unique images per rotation batch; with four rotations each, the rotation
/// batch holds 64 rows.
pub const ROTATION_UNIQUE: usize = 16;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug)]
pub struct RasterDataset<T> {
    /// `[n, c, h, w]` pixels in `[0, 1]`.
    pub images: Tensor<T>,
    /// Evaluation-only class labels; never consumed by training.
    pub true_labels: Option<Vec<usize>>,
    /// Stable per-sample ids (row index at creation).
    pub ids: Vec<u64>,
}

impl<T: Scalar> RasterDataset<T> {
    pub fn new(images: Tensor<T>, true_labels: Option<Vec<usize>>) -> Result<Self> {
        let (n, _, h, w) = images.dims4()?;
        if h != w {
            return Err(Error::Dimension(format!(
                "dataset images must be square, got {h}x{w}"
            )));
        }
        if let Some(labels) = &true_labels {
            if labels.len() != n {
                return Err(Error::Argument(format!(
                    "{} labels for {} images",
                    labels.len(),
                    n
                )));
            }
        }
        Ok(RasterDataset {
            images,
            true_labels,
            ids: (0..n as u64).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (c, h, w) of one image.
    pub fn geometry(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }
}

fn read_be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| {
            Error::Format(format!(
                "{what}: file truncated at byte {at}, have {} bytes",
                bytes.len()
            ))
        })
}

/// Parses IDX ubyte files: big-endian magic (0x803 for images, 0x801 for
/// labels), big-endian extents, then the unsigned-byte payload. Pixels are
/// scaled to `[0, 1]`.
pub fn load_idx<T: Scalar>(
    images_path: &Path,
    labels_path: Option<&Path>,
) -> Result<RasterDataset<T>> {
    let bytes = std::fs::read(images_path)?;
    let magic = read_be_u32(&bytes, 0, "idx images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "idx images: bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = read_be_u32(&bytes, 4, "idx images")? as usize;
    let h = read_be_u32(&bytes, 8, "idx images")? as usize;
    let w = read_be_u32(&bytes, 12, "idx images")? as usize;
    let expected = 16 + n * h * w;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "idx images: header promises {expected} bytes ({n} images of {h}x{w}), file has {}",
            bytes.len()
        )));
    }
    let scale = T::from_f64(1.0 / 255.0);
    let data: Vec<T> = bytes[16..]
        .iter()
        .map(|&b| T::from_f64(f64::from(b)) * scale)
        .collect();
    let images = Tensor::new(vec![n, 1, h, w], data)?;

    let true_labels = match labels_path {
        None => None,
        Some(path) => {
            let lbytes = std::fs::read(path)?;
            let magic = read_be_u32(&lbytes, 0, "idx labels")?;
            if magic != IDX_LABELS_MAGIC {
                return Err(Error::Format(format!(
                    "idx labels: bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
                )));
            }
            let ln = read_be_u32(&lbytes, 4, "idx labels")? as usize;
            if ln != n {
                return Err(Error::Format(format!(
                    "idx labels: {ln} labels for {n} images"
                )));
            }
            if lbytes.len() != 8 + ln {
                return Err(Error::Format(format!(
                    "idx labels: header promises {} bytes, file has {}",
                    8 + ln,
                    lbytes.len()
                )));
            }
            Some(lbytes[8..].iter().map(|&b| b as usize).collect())
        }
    };
    RasterDataset::new(images, true_labels)
}

// Synthetic pattern constants. Each class is a sinusoidal grating at the
// class angle with a class-specific frequency. Two orthogonal intensity
// ramps make the pattern chiral: no rotation of any image coincides with a
// flip or a different rotation, so the four quarter turns stay decodable.
const GRATING_AMP: f64 = 0.22;
const RAMP_MAIN_AMP: f64 = 0.34;
const RAMP_ORTHO_AMP: f64 = 0.18;
const NOISE_SIGMA: f64 = 0.05;
const FREQ_BASE: f64 = 1.5;
const FREQ_STEP: f64 = 0.5;

/// Seeded oriented-pattern generator: class `c` draws its grating at angle
/// `c * 180/classes` degrees with frequency `FREQ_BASE + FREQ_STEP * c`,
/// random phase per sample, and Gaussian pixel noise.
pub fn synth_dataset<T: Scalar>(
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> Result<RasterDataset<T>> {
    if classes == 0 || per_class == 0 {
        return Err(Error::Argument("synth_dataset: empty dataset requested".into()));
    }
    if size < 16 {
        return Err(Error::Argument(format!(
            "synth_dataset: size must be >= 16, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for class in 0..classes {
        let theta = class as f64 * std::f64::consts::PI / classes as f64;
        let freq = FREQ_BASE + FREQ_STEP * class as f64;
        let (dir_x, dir_y) = (theta.cos(), theta.sin());
        // ramp coordinates normalized to [0,1] over the image square
        let corners = [
            (0.0, 0.0),
            (size as f64 - 1.0, 0.0),
            (0.0, size as f64 - 1.0),
            (size as f64 - 1.0, size as f64 - 1.0),
        ];
        let span = |dx: f64, dy: f64| -> (f64, f64) {
            let vals = corners.map(|(x, y)| (x * dx + y * dy) / size as f64);
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, (hi - lo).max(f64::EPSILON))
        };
        let (main_lo, main_span) = span(dir_x, dir_y);
        let (ortho_lo, ortho_span) = span(-dir_y, dir_x);
        for _ in 0..per_class {
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            for y in 0..size {
                for x in 0..size {
                    let t = (x as f64 * dir_x + y as f64 * dir_y) / size as f64;
                    let u = (x as f64 * -dir_y + y as f64 * dir_x) / size as f64;
                    let main_ramp = (t - main_lo) / main_span - 0.5;
                    let ortho_ramp = (u - ortho_lo) / ortho_span - 0.5;
                    let v = 0.5
                        + GRATING_AMP * (std::f64::consts::TAU * freq * t + phase).sin()
                        + RAMP_MAIN_AMP * main_ramp
                        + RAMP_ORTHO_AMP * ortho_ramp
                        + noise.sample(&mut rng);
                    data.push(T::from_f64(v.clamp(0.0, 1.0)));
                }
            }
            labels.push(class);
        }
    }
    RasterDataset::new(Tensor::new(vec![n, 1, size, size], data)?, Some(labels))
}

/// Zero-pads by [`AUG_PAD`], crops back to the original size at offset
/// `(dy, dx)`, and optionally mirrors horizontally. Offsets `(4, 4)` with no
/// flip reproduce the input.
pub fn augment_with<T: Scalar>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    dy: usize,
    dx: usize,
    flip: bool,
) -> Vec<T> {
    debug_assert!(dy <= 2 * AUG_PAD && dx <= 2 * AUG_PAD);
    let mut out = vec![T::zero(); img.len()];
    for ch in 0..c {
        for y in 0..h {
            // crop row y reads padded row y + dy, i.e. source row y + dy - PAD
            let sy = (y + dy) as isize - AUG_PAD as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - AUG_PAD as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let dst_x = if flip { w - 1 - x } else { x };
                out[(ch * h + y) * w + dst_x] = img[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Random crop-and-flip keyed by a derived seed; callers make the seed a
/// function of (experiment seed, sample id, epoch).
pub fn augment<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dy = rng.random_range(0..=2 * AUG_PAD);
    let dx = rng.random_range(0..=2 * AUG_PAD);
    let flip = rng.random_bool(0.5);
    augment_with(img, c, h, w, dy, dx, flip)
}

/// `q` quarter-turns clockwise by index permutation; exact, no interpolation.
pub fn rotate90<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, q: usize) -> Result<Vec<T>> {
    if h != w {
        return Err(Error::Argument(format!(
            "rotate90: image must be square, got {h}x{w}"
        )));
    }
    let q = q % 4;
    if q == 0 {
        return Ok(img.to_vec());
    }
    let mut out = vec![T::zero(); img.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for r in 0..h {
            for col in 0..w {
                let (sr, sc) = match q {
                    1 => (h - 1 - col, r),
                    2 => (h - 1 - r, w - 1 - col),
                    _ => (col, w - 1 - r),
                };
                out[base + r * w + col] = img[base + sr * w + sc];
            }
        }
    }
    Ok(out)
}

/// Class-balanced metric batch: `p` distinct clusters chosen uniformly, `m`
/// members each (without replacement when the cluster is big enough, with
/// replacement otherwise). The result has exactly `p * m` indices grouped by
/// cluster.
pub fn sample_pk_batch<T: Scalar>(
    pseudo: &PseudoLabelTable<T>,
    p: usize,
    m: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if p == 0 || m == 0 {
        return Err(Error::Argument("sample_pk_batch: p and m must be >= 1".into()));
    }
    let members = pseudo.members();
    let nonempty: Vec<usize> = (0..members.len()).filter(|&c| !members[c].is_empty()).collect();
    if nonempty.len() < p {
        return Err(Error::Argument(format!(
            "sample_pk_batch: {} nonempty clusters, need {p}",
            nonempty.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = nonempty;
    for i in 0..p {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut out = Vec::with_capacity(p * m);
    for &cluster in &pool[..p] {
        let ids = &members[cluster];
        if ids.len() >= m {
            let mut pick: Vec<usize> = ids.clone();
            for i in 0..m {
                let j = rng.random_range(i..pick.len());
                pick.swap(i, j);
            }
            out.extend_from_slice(&pick[..m]);
        } else {
            for _ in 0..m {
                out.push(ids[rng.random_range(0..ids.len())]);
            }
        }
    }
    Ok(out)
}

/// Stacks the four quarter-turn copies of each listed image, copies of one
/// image contiguous, with rotation-class labels.
pub fn build_rotation_batch<T: Scalar>(
    images: &Tensor<T>,
    indices: &[usize],
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = images.dims4()?;
    let mut seen = indices.to_vec();
    seen.sort_unstable();
    if seen.windows(2).any(|p| p[0] == p[1]) {
        return Err(Error::Argument("build_rotation_batch: duplicate indices".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::Index(format!(
            "build_rotation_batch: index {bad} outside dataset of {n}"
        )));
    }
    let per = c * h * w;
    let mut data = Vec::with_capacity(indices.len() * 4 * per);
    let mut z = Vec::with_capacity(indices.len() * 4);
    for &idx in indices {
        let img = &images.data()[idx * per..(idx + 1) * per];
        for q in 0..4 {
            data.extend(rotate90(img, c, h, w, q)?);
            z.push(q);
        }
    }
    Ok((Tensor::new(vec![indices.len() * 4, c, h, w], data)?, z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{kmeans, KmeansOpts};

    #[test]
    fn synth_counts_and_determinism() {
        let a = synth_dataset::<f64>(8, 20, 32, 1).unwrap();
        assert_eq!(a.len(), 160);
        assert_eq!(a.geometry(), (1, 32, 32));
        let labels = a.true_labels.as_ref().unwrap();
        let distinct: std::collections::BTreeSet<_> = labels.iter().collect();
        assert_eq!(distinct.len(), 8);
        let b = synth_dataset::<f64>(8, 20, 32, 1).unwrap();
        assert_eq!(a.images, b.images);
        let c = synth_dataset::<f64>(8, 20, 32, 2).unwrap();
        assert_ne!(a.images, c.images);
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn synth_rejects_tiny_sizes() {
        assert!(matches!(
            synth_dataset::<f64>(2, 2, 8, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn synth_within_class_distance_below_between_class() {
        let ds = synth_dataset::<f64>(4, 6, 32, 7).unwrap();
        let labels = ds.true_labels.as_ref().unwrap();
        let per = 32 * 32;
        let dist = |a: usize, b: usize| -> f64 {
            let xa = &ds.images.data()[a * per..(a + 1) * per];
            let xb = &ds.images.data()[b * per..(b + 1) * per];
            xa.iter()
                .zip(xb)
                .map(|(&p, &q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
        };
        let (mut within, mut wn, mut between, mut bn) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..ds.len() {
            for j in (i + 1)..ds.len() {
                if labels[i] == labels[j] {
                    within += dist(i, j);
                    wn += 1;
                } else {
                    between += dist(i, j);
                    bn += 1;
                }
            }
        }
        assert!(within / wn as f64 < between / bn as f64);
    }

    #[test]
    fn augment_center_offsets_are_identity() {
        let img: Vec<f64> = (0..2 * 9).map(|v| v as f64).collect();
        let out = augment_with(&img, 2, 3, 3, AUG_PAD, AUG_PAD, false);
        assert_eq!(out, img);
    }

    #[test]
    fn flip_twice_is_identity_and_shape_preserved() {
        let img: Vec<f64> = (0..16).map(|v| v as f64 * 0.3).collect();
        let once = augment_with(&img, 1, 4, 4, AUG_PAD, AUG_PAD, true);
        assert_ne!(once, img);
        assert_eq!(once.len(), img.len());
        let twice = augment_with(&once, 1, 4, 4, AUG_PAD, AUG_PAD, true);
        assert_eq!(twice, img);
    }

    #[test]
    fn augment_is_seed_deterministic() {
        let img: Vec<f64> = (0..64).map(|v| v as f64 / 64.0).collect();
        assert_eq!(augment(&img, 1, 8, 8, 5), augment(&img, 1, 8, 8, 5));
    }

    #[test]
    fn rotate90_matches_hand_permutation() {
        let img = vec![1.0f64, 2.0, 3.0, 4.0];
        assert_eq!(rotate90(&img, 1, 2, 2, 0).unwrap(), img);
        assert_eq!(rotate90(&img, 1, 2, 2, 1).unwrap(), vec![3.0, 1.0, 4.0, 2.0]);
    }

    #[test]
    fn rotate90_group_laws() {
        let img: Vec<f64> = (0..25).map(|v| v as f64).collect();
        let twice = rotate90(&rotate90(&img, 1, 5, 5, 2).unwrap(), 1, 5, 5, 2).unwrap();
        assert_eq!(twice, img);
        let mut four = img.clone();
        for _ in 0..4 {
            four = rotate90(&four, 1, 5, 5, 1).unwrap();
        }
        assert_eq!(four, img);
    }

    #[test]
    fn rotate90_rejects_non_square() {
        let img = vec![0.0f64; 6];
        assert!(matches!(
            rotate90(&img, 1, 2, 3, 1),
            Err(Error::Argument(_))
        ));
    }

    fn table_from_labels(labels: Vec<usize>, k: usize) -> PseudoLabelTable<f64> {
        PseudoLabelTable {
            labels,
            centroids: Tensor::zeros(vec![k, 2]),
            inertia: 0.0,
            epoch_stamp: 0,
        }
    }

    #[test]
    fn pk_batch_is_class_balanced() {
        let labels = vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 3, 3, 3, 3, 3];
        let table = table_from_labels(labels.clone(), 4);
        let batch = sample_pk_batch(&table, 4, 5, 3).unwrap();
        assert_eq!(batch.len(), 20);
        let mut per_class = vec![0usize; 4];
        for &i in &batch {
            per_class[labels[i]] += 1;
        }
        assert_eq!(per_class, vec![5, 5, 5, 5]);
        assert_eq!(batch, sample_pk_batch(&table, 4, 5, 3).unwrap());
    }

    #[test]
    fn pk_batch_small_cluster_samples_with_replacement() {
        let table = table_from_labels(vec![0, 0, 1], 2);
        let batch = sample_pk_batch(&table, 2, 5, 1).unwrap();
        assert_eq!(batch.len(), 10);
        // the singleton cluster contributes only its one member
        let ones = batch.iter().filter(|&&i| i == 2).count();
        assert_eq!(ones, 5);
    }

    #[test]
    fn pk_batch_rejects_too_few_clusters() {
        let table = table_from_labels(vec![0, 0, 0], 1);
        assert!(matches!(
            sample_pk_batch(&table, 2, 2, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn rotation_batch_layout() {
        let ds = synth_dataset::<f64>(2, 10, 16, 0).unwrap();
        let indices: Vec<usize> = (0..16).collect();
        let (batch, z) = build_rotation_batch(&ds.images, &indices).unwrap();
        assert_eq!(batch.shape(), &[64, 1, 16, 16]);
        let mut hist = [0usize; 4];
        for &q in &z {
            hist[q] += 1;
        }
        assert_eq!(hist, [16, 16, 16, 16]);
        // rows 0..4 are the four rotations of the first listed image
        let per = 16 * 16;
        let img = &ds.images.data()[..per];
        for q in 0..4 {
            let expect = rotate90(img, 1, 16, 16, q).unwrap();
            assert_eq!(&batch.data()[q * per..(q + 1) * per], expect.as_slice());
            assert_eq!(z[q], q);
        }
    }

    #[test]
    fn rotation_batch_rejects_duplicates() {
        let ds = synth_dataset::<f64>(2, 10, 16, 0).unwrap();
        let mut indices: Vec<usize> = (0..16).collect();
        indices[3] = 0;
        assert!(matches!(
            build_rotation_batch(&ds.images, &indices),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn idx_round_trip_via_handwritten_files() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("images.idx");
        let lbl_path = dir.path().join("labels.idx");
        // two 2x2 images
        let mut img_bytes = Vec::new();
        img_bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img_bytes.extend_from_slice(&2u32.to_be_bytes());
        img_bytes.extend_from_slice(&2u32.to_be_bytes());
        img_bytes.extend_from_slice(&2u32.to_be_bytes());
        img_bytes.extend_from_slice(&[0, 128, 255, 64, 1, 2, 3, 4]);
        std::fs::write(&img_path, &img_bytes).unwrap();
        let mut lbl_bytes = Vec::new();
        lbl_bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lbl_bytes.extend_from_slice(&2u32.to_be_bytes());
        lbl_bytes.extend_from_slice(&[7, 3]);
        std::fs::write(&lbl_path, &lbl_bytes).unwrap();

        let ds = load_idx::<f64>(&img_path, Some(&lbl_path)).unwrap();
        assert_eq!(ds.images.shape(), &[2, 1, 2, 2]);
        assert_eq!(ds.images.data()[2], 1.0); // byte 255 scales to exactly 1.0
        assert_eq!(ds.true_labels, Some(vec![7, 3]));

        // truncated payload
        std::fs::write(&img_path, &img_bytes[..20]).unwrap();
        let err = load_idx::<f64>(&img_path, None).unwrap_err().to_string();
        assert!(err.contains("24") && err.contains("20"), "{err}");

        // bad magic
        let mut bad = img_bytes.clone();
        bad[3] = 0x01;
        std::fs::write(&img_path, &bad).unwrap();
        assert!(matches!(
            load_idx::<f64>(&img_path, None),
            Err(Error::Format(_))
        ));

        // label count mismatch
        std::fs::write(&img_path, &img_bytes).unwrap();
        let mut short = Vec::new();
        short.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        short.extend_from_slice(&1u32.to_be_bytes());
        short.push(7);
        std::fs::write(&lbl_path, &short).unwrap();
        assert!(matches!(
            load_idx::<f64>(&img_path, Some(&lbl_path)),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn synth_clusters_recover_classes_with_kmeans_on_pixels() {
        // coarse sanity: pixel-space k-means on a tiny set is class-aligned
        // often enough to confirm the classes are geometrically separated
        let ds = synth_dataset::<f64>(2, 12, 16, 3).unwrap();
        let n = ds.len();
        let flat = Tensor::new(vec![n, 256], ds.images.data().to_vec()).unwrap();
        let t = kmeans(&flat, 2, 0, &KmeansOpts::default()).unwrap();
        let labels = ds.true_labels.as_ref().unwrap();
        let mut agree = 0usize;
        let mut total = 0usize;
        for i in 0..n {
            for j in (i + 1)..n {
                total += 1;
                if (labels[i] == labels[j]) == (t.labels[i] == t.labels[j]) {
                    agree += 1;
                }
            }
        }
        assert!(agree as f64 / total as f64 > 0.8, "{agree}/{total}");
    }
}
