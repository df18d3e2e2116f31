//! Datasets: synthetic generators and the IDX image format.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::{substream, Rng, Stream};

/// Observed samples, optionally with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Tensor,
    pub labels: Option<Vec<usize>>,
    pub num_classes: Option<usize>,
    /// Where the data came from, for logs and output metadata.
    pub provenance: String,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Option<(Vec<usize>, usize)>, provenance: impl Into<String>) -> Result<Self> {
        if samples.rank() != 2 || samples.rows() == 0 {
            return Err(Error::contract("dataset needs at least one sample"));
        }
        let (labels, num_classes) = match labels {
            Some((ys, k)) => {
                if ys.len() != samples.rows() {
                    return Err(Error::dim(format!("{} labels for {} samples", ys.len(), samples.rows())));
                }
                if let Some(bad) = ys.iter().find(|&&y| y >= k) {
                    return Err(Error::contract(format!("label {bad} outside [0, {k})")));
                }
                (Some(ys), Some(k))
            }
            None => (None, None),
        };
        Ok(Self { samples, labels, num_classes, provenance: provenance.into() })
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    /// Fraction of samples in each class.
    pub fn class_frequencies(&self) -> Option<Vec<f64>> {
        let (ys, k) = (self.labels.as_ref()?, self.num_classes?);
        let mut counts = vec![0.0; k];
        for &y in ys {
            counts[y] += 1.0;
        }
        Some(counts.into_iter().map(|c| c / ys.len() as f64).collect())
    }

    /// Mean sample of each class, `k × d`.
    pub fn class_centroids(&self) -> Result<Tensor> {
        let (ys, k) = match (&self.labels, self.num_classes) {
            (Some(ys), Some(k)) => (ys, k),
            _ => return Err(Error::contract("centroids need a labeled dataset")),
        };
        let d = self.dim();
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (row, &y) in self.samples.iter_rows().zip(ys) {
            counts[y] += 1;
            for (s, v) in sums[y * d..(y + 1) * d].iter_mut().zip(row) {
                *s += v;
            }
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::contract(format!("class {empty} has no samples")));
        }
        for (c, chunk) in counts.iter().zip(sums.chunks_mut(d)) {
            chunk.iter_mut().for_each(|s| *s /= *c as f64);
        }
        Tensor::matrix(k, d, sums)
    }

    /// Uniform draw of `m` rows with replacement, with their labels.
    pub fn sample_batch(&self, m: usize, rng: &mut Rng) -> (Tensor, Option<Vec<usize>>) {
        let idx: Vec<usize> = (0..m).map(|_| rng.random_range(0..self.len())).collect();
        let labels = self.labels.as_ref().map(|ys| idx.iter().map(|&i| ys[i]).collect());
        (self.samples.select_rows(&idx), labels)
    }
}

/// Index of the nearest centroid (squared Euclidean distance).
pub fn nearest_centroid(centroids: &Tensor, x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter_rows().enumerate() {
        let d: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

fn default_centers() -> Vec<Vec<f64>> {
    vec![vec![-2.0, 0.0], vec![2.0, 0.0]]
}

fn default_cluster_std() -> f64 {
    0.3
}

fn default_moon_noise() -> f64 {
    0.1
}

fn default_flip() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticSpec {
    /// Isotropic Gaussian clusters with equal weights; labels are cluster ids.
    Clusters {
        n: usize,
        #[serde(default = "default_centers")]
        centers: Vec<Vec<f64>>,
        #[serde(default = "default_cluster_std")]
        std: f64,
    },
    TwoMoons {
        n: usize,
        #[serde(default = "default_moon_noise")]
        noise: f64,
    },
    /// 8×8 binary digit glyphs with random pixel flips.
    Glyphs {
        n: usize,
        /// Class frequencies; defaults to uniform over all ten glyphs.
        #[serde(default)]
        frequencies: Option<Vec<f64>>,
        #[serde(default = "default_flip")]
        flip_prob: f64,
    },
}

pub const GLYPH_SIDE: usize = 8;

const GLYPHS: [[&str; 8]; 10] = [
    ["..####..", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", "..####.."],
    ["...##...", "..###...", "...##...", "...##...", "...##...", "...##...", "...##...", "..####.."],
    ["..####..", ".#....#.", "......#.", ".....#..", "....#...", "...#....", "..#.....", ".######."],
    ["..####..", ".#....#.", "......#.", "...###..", "......#.", "......#.", ".#....#.", "..####.."],
    ["....##..", "...#.#..", "..#..#..", ".#...#..", ".######.", ".....#..", ".....#..", ".....#.."],
    [".######.", ".#......", ".#......", ".#####..", "......#.", "......#.", ".#....#.", "..####.."],
    ["..####..", ".#......", ".#......", ".#####..", ".#....#.", ".#....#.", ".#....#.", "..####.."],
    [".######.", "......#.", ".....#..", "....#...", "...#....", "...#....", "...#....", "...#...."],
    ["..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", ".#....#.", "..####.."],
    ["..####..", ".#....#.", ".#....#.", ".#....#.", "..#####.", "......#.", "......#.", "..####.."],
];

/// Clean 64-pixel bitmap of digit `k` with values in {0, 1}.
pub fn glyph(k: usize) -> Vec<f64> {
    GLYPHS[k].iter().flat_map(|row| row.bytes().map(|b| if b == b'#' { 1.0 } else { 0.0 })).collect()
}

fn draw_class(freqs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, f) in freqs.iter().enumerate() {
        acc += f;
        if u < acc {
            return k;
        }
    }
    freqs.len() - 1
}

/// Generates a synthetic dataset from the `Data` substream of `seed`.
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    let mut rng = substream(seed, Stream::Data);
    match spec {
        SyntheticSpec::Clusters { n, centers, std } => {
            if *n == 0 {
                return Err(Error::Config("dataset size must be positive".into()));
            }
            let d = centers.first().map_or(0, Vec::len);
            if d == 0 || centers.iter().any(|c| c.len() != d) {
                return Err(Error::Config("cluster centers must be non-empty and share a dimension".into()));
            }
            if !(*std > 0.0) {
                return Err(Error::Config("cluster std must be positive".into()));
            }
            let k = centers.len();
            let mut data = Vec::with_capacity(n * d);
            let mut labels = Vec::with_capacity(*n);
            for _ in 0..*n {
                let c = rng.random_range(0..k);
                labels.push(c);
                for m in &centers[c] {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(m + std * z);
                }
            }
            Dataset::new(Tensor::matrix(*n, d, data)?, Some((labels, k)), format!("clusters(k={k}, std={std})"))
        }
        SyntheticSpec::TwoMoons { n, noise } => {
            if *n == 0 {
                return Err(Error::Config("dataset size must be positive".into()));
            }
            if !(*noise >= 0.0) {
                return Err(Error::Config("moon noise must be non-negative".into()));
            }
            let mut data = Vec::with_capacity(n * 2);
            let mut labels = Vec::with_capacity(*n);
            for _ in 0..*n {
                let upper = rng.random_bool(0.5);
                let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let (x, y) = if upper { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
                let (zx, zy): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
                data.extend([x + noise * zx, y + noise * zy]);
                labels.push(usize::from(!upper));
            }
            Dataset::new(Tensor::matrix(*n, 2, data)?, Some((labels, 2)), format!("two_moons(noise={noise})"))
        }
        SyntheticSpec::Glyphs { n, frequencies, flip_prob } => {
            if *n == 0 {
                return Err(Error::Config("dataset size must be positive".into()));
            }
            let freqs = frequencies.clone().unwrap_or_else(|| vec![0.1; 10]);
            if freqs.is_empty() || freqs.len() > GLYPHS.len() {
                return Err(Error::Config(format!("glyph frequencies need 1 to {} classes", GLYPHS.len())));
            }
            if freqs.iter().any(|f| !(*f >= 0.0)) || (freqs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config("glyph frequencies must be non-negative and sum to 1".into()));
            }
            if !(0.0..=1.0).contains(flip_prob) {
                return Err(Error::Config("flip probability must be in [0, 1]".into()));
            }
            let k = freqs.len();
            let clean: Vec<Vec<f64>> = (0..k).map(glyph).collect();
            let d = GLYPH_SIDE * GLYPH_SIDE;
            let mut data = Vec::with_capacity(n * d);
            let mut labels = Vec::with_capacity(*n);
            for _ in 0..*n {
                let c = draw_class(&freqs, &mut rng);
                labels.push(c);
                for &v in &clean[c] {
                    data.push(if rng.random_bool(*flip_prob) { 1.0 - v } else { v });
                }
            }
            Dataset::new(Tensor::matrix(*n, d, data)?, Some((labels, k)), format!("glyphs(k={k}, flip={flip_prob})"))
        }
    }
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Optional preprocessing applied to IDX images after loading.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxTransform {
    /// Side of the centered square crop.
    #[serde(default)]
    pub crop: Option<usize>,
    /// Side length after nearest-neighbour resampling.
    #[serde(default)]
    pub side: Option<usize>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Parse { offset: bytes.len(), detail: format!("truncated header, need byte {}", at + 4) })
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES {
        return Err(Error::Parse { offset: 0, detail: format!("bad image magic {magic:#010x}") });
    }
    let (n, r, c) = (be_u32(bytes, 4)? as usize, be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize);
    let need = n.checked_mul(r).and_then(|v| v.checked_mul(c)).ok_or_else(|| Error::Parse {
        offset: 4,
        detail: "image dimensions overflow".into(),
    })?;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            detail: format!("truncated image data: {} of {need} pixel bytes", body.len()),
        });
    }
    if body.len() > need {
        return Err(Error::Parse { offset: 16 + need, detail: "trailing bytes after image data".into() });
    }
    Ok((n, r, c, body))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::Parse { offset: 0, detail: format!("bad label magic {magic:#010x}") });
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Parse {
            offset: bytes.len(),
            detail: format!("truncated label data: {} of {n} bytes", body.len()),
        });
    }
    if body.len() > n {
        return Err(Error::Parse { offset: 8 + n, detail: "trailing bytes after label data".into() });
    }
    Ok(body)
}

/// Center crop then nearest-neighbour resample of one `rows × cols` image.
fn transform_image(px: &[u8], rows: usize, cols: usize, t: IdxTransform) -> (Vec<f64>, usize, usize) {
    let (mut r0, mut c0, mut h, mut w) = (0, 0, rows, cols);
    if let Some(s) = t.crop {
        let s = s.min(rows).min(cols);
        r0 = (rows - s) / 2;
        c0 = (cols - s) / 2;
        h = s;
        w = s;
    }
    let (oh, ow) = t.side.map_or((h, w), |s| (s, s));
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let si = r0 + (i * h + h / 2) / oh.max(1);
        for j in 0..ow {
            let sj = c0 + (j * w + w / 2) / ow.max(1);
            out.push(f64::from(px[si.min(rows - 1) * cols + sj.min(cols - 1)]) / 255.0);
        }
    }
    (out, oh, ow)
}

/// Loads IDX images (and optional labels), scaling pixels to `[0, 1]`.
pub fn load_idx(images: &Path, labels: Option<&Path>, transform: IdxTransform) -> Result<Dataset> {
    let ibytes = std::fs::read(images)?;
    let (n, rows, cols, px) = parse_idx_images(&ibytes)?;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Parse { offset: 4, detail: "IDX file holds no pixels".into() });
    }
    if transform.crop == Some(0) || transform.side == Some(0) {
        return Err(Error::Config("crop and side must be positive".into()));
    }
    let mut data = Vec::new();
    let mut d = 0;
    for k in 0..n {
        let (img, h, w) = transform_image(&px[k * rows * cols..(k + 1) * rows * cols], rows, cols, transform);
        d = h * w;
        data.extend(img);
    }
    let samples = Tensor::matrix(n, d, data)?;
    let labels = match labels {
        Some(p) => {
            let lbytes = std::fs::read(p)?;
            let ys = parse_idx_labels(&lbytes)?;
            if ys.len() != n {
                return Err(Error::dim(format!("{} labels for {n} images", ys.len())));
            }
            let ys: Vec<usize> = ys.iter().map(|&b| usize::from(b)).collect();
            let k = ys.iter().max().map_or(1, |m| m + 1);
            Some((ys, k))
        }
        None => None,
    };
    Dataset::new(samples, labels, format!("idx:{}", images.display()))
}

/// Writes an IDX image file from `count × rows × cols` pixel bytes.
pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    if rows == 0 || cols == 0 || pixels.len() % (rows * cols) != 0 {
        return Err(Error::dim("pixel count is not a multiple of the image size"));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES.to_be_bytes());
    out.extend_from_slice(&((pixels.len() / (rows * cols)) as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clusters_are_balanced() {
        let ds = gen_synthetic(&SyntheticSpec::Clusters { n: 2000, centers: default_centers(), std: 0.3 }, 7).unwrap();
        let f = ds.class_frequencies().unwrap();
        assert!((f[0] - 0.5).abs() <= 0.03, "{f:?}");
        assert_eq!(ds.dim(), 2);
        let c = ds.class_centroids().unwrap();
        assert!((c.get(0, 0) + 2.0).abs() < 0.05 && (c.get(1, 0) - 2.0).abs() < 0.05);
    }

    #[test]
    fn empty_specs_are_rejected() {
        assert!(gen_synthetic(&SyntheticSpec::Clusters { n: 0, centers: default_centers(), std: 0.3 }, 1).is_err());
        assert!(gen_synthetic(&SyntheticSpec::TwoMoons { n: 0, noise: 0.1 }, 1).is_err());
        assert!(gen_synthetic(&SyntheticSpec::Glyphs { n: 0, frequencies: None, flip_prob: 0.0 }, 1).is_err());
    }

    #[test]
    fn glyph_labels_follow_frequencies() {
        let freqs = vec![0.3, 0.05, 0.05, 0.1, 0.1, 0.1, 0.1, 0.1, 0.05, 0.05];
        let ds = gen_synthetic(&SyntheticSpec::Glyphs { n: 10_000, frequencies: Some(freqs.clone()), flip_prob: 0.05 }, 3)
            .unwrap();
        for (got, want) in ds.class_frequencies().unwrap().iter().zip(&freqs) {
            assert!((got - want).abs() <= 0.02, "{got} vs {want}");
        }
        assert_eq!(ds.dim(), 64);
    }

    #[test]
    fn glyphs_are_distinct_and_classifiable() {
        let clean: Vec<Vec<f64>> = (0..10).map(glyph).collect();
        for a in 0..10 {
            for b in a + 1..10 {
                assert_ne!(clean[a], clean[b]);
            }
        }
        let ds = gen_synthetic(&SyntheticSpec::Glyphs { n: 2000, frequencies: None, flip_prob: 0.05 }, 4).unwrap();
        let c = ds.class_centroids().unwrap();
        let ys = ds.labels.as_ref().unwrap();
        let acc = ds.samples.iter_rows().zip(ys).filter(|(x, &y)| nearest_centroid(&c, x) == y).count() as f64
            / ds.len() as f64;
        assert!(acc > 0.99, "{acc}");
    }

    #[test]
    fn synthetic_data_is_deterministic() {
        let spec = SyntheticSpec::TwoMoons { n: 100, noise: 0.1 };
        assert_eq!(gen_synthetic(&spec, 5).unwrap(), gen_synthetic(&spec, 5).unwrap());
        assert_ne!(gen_synthetic(&spec, 5).unwrap(), gen_synthetic(&spec, 6).unwrap());
    }

    #[test]
    fn idx_round_trip_with_labels() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
        let pixels: Vec<u8> = (0..3 * 4 * 4).map(|v| (v * 5) as u8).collect();
        write_idx_images(&ip, 4, 4, &pixels).unwrap();
        write_idx_labels(&lp, &[2, 0, 1]).unwrap();
        let ds = load_idx(&ip, Some(&lp), IdxTransform::default()).unwrap();
        assert_eq!((ds.len(), ds.dim()), (3, 16));
        assert_eq!(ds.labels, Some(vec![2, 0, 1]));
        assert_eq!(ds.num_classes, Some(3));
        assert_eq!(ds.samples.get(1, 3), f64::from(pixels[19]) / 255.0);
        let unlabeled = load_idx(&ip, None, IdxTransform::default()).unwrap();
        assert!(unlabeled.labels.is_none());
    }

    #[test]
    fn idx_crop_and_downsample() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        // 6×6 image whose pixel value encodes its position.
        let pixels: Vec<u8> = (0..36).map(|v| v as u8).collect();
        write_idx_images(&ip, 6, 6, &pixels).unwrap();
        let ds = load_idx(&ip, None, IdxTransform { crop: Some(4), side: Some(2) }).unwrap();
        assert_eq!(ds.dim(), 4);
        // Crop covers rows/cols 1..5; samples taken at offsets 1 and 3 within it.
        let want: Vec<f64> = [14u8, 16, 26, 28].iter().map(|&v| f64::from(v) / 255.0).collect();
        assert_eq!(ds.samples.row(0), want.as_slice());
    }

    #[test]
    fn idx_errors_report_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img.idx");
        write_idx_images(&ip, 2, 2, &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes.truncate(bytes.len() - 3);
        match parse_idx_images(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, bytes.len()),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_idx_images(&[0, 0, 8, 1, 0, 0, 0, 0]), Err(Error::Parse { offset: 0, .. })));
        let lp = dir.path().join("lab.idx");
        write_idx_labels(&lp, &[1, 2, 3]).unwrap();
        assert!(matches!(load_idx(&ip, Some(&lp), IdxTransform::default()), Err(Error::Dimension(_))));
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        let x = Tensor::zeros(&[2, 1]);
        assert!(Dataset::new(x.clone(), Some((vec![0, 2], 2)), "t").is_err());
        assert!(Dataset::new(x, Some((vec![0], 2)), "t").is_err());
        assert!(Dataset::new(Tensor::zeros(&[0, 1]), None, "t").is_err());
    }
}
