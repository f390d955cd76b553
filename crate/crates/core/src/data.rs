//! Datasets: seeded synthetic generators and IDX / CSV file loaders.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples `x` (`[n, ...shape]`) with class labels `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    /// Gathers the listed rows into a batch.
    pub fn gather(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        let row_len = self.x.row_len();
        let mut data = Vec::with_capacity(rows.len() * row_len);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(self.x.row(r));
            labels.push(self.y[r]);
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(self.sample_shape());
        (Tensor::from_vec(&shape, data).expect("gather shape"), labels)
    }

    fn subset(&self, rows: &[usize]) -> Split {
        let (x, y) = self.gather(rows);
        Split { x, y }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub classes: usize,
}

impl Dataset {
    pub fn sample_shape(&self) -> &[usize] {
        self.train.sample_shape()
    }
}

fn default_separation() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    1.0
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    Idx,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Class-conditional Gaussian clusters for `[d]` shapes, blob images for
    /// `[c, h, w]` shapes. Larger `separation` or smaller `noise` is easier.
    Synthetic {
        classes: usize,
        shape: Vec<usize>,
        train: usize,
        test: usize,
        seed: u64,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    /// IDX needs `labels`; CSV rows are `label,x0,x1,...`. `shape` reshapes
    /// each sample. A seeded shuffle splits off `test_fraction` for testing.
    File {
        format: FileFormat,
        path: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
        #[serde(default)]
        shape: Option<Vec<usize>>,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl DatasetSpec {
    /// Rewrites relative file paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let DatasetSpec::File { path, labels, .. } = self {
            if path.is_relative() {
                *path = base.join(&*path);
            }
            if let Some(l) = labels {
                if l.is_relative() {
                    *l = base.join(&*l);
                }
            }
        }
    }
}

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::Synthetic {
            classes,
            shape,
            train,
            test,
            seed,
            separation,
            noise,
        } => synthetic(*classes, shape, *train, *test, *seed, *separation, *noise),
        DatasetSpec::File {
            format,
            path,
            labels,
            shape,
            test_fraction,
            seed,
        } => {
            if !(0.0..1.0).contains(test_fraction) {
                return Err(Error::Config(format!(
                    "test_fraction {test_fraction} must lie in [0, 1)"
                )));
            }
            let (x, y) = match format {
                FileFormat::Csv => read_csv(path)?,
                FileFormat::Idx => {
                    let labels = labels.as_ref().ok_or_else(|| {
                        Error::Config("idx datasets need a `labels` file".into())
                    })?;
                    let (dims, x) = read_idx(path)?;
                    let (ldims, y) = read_idx(labels)?;
                    if ldims.len() != 1 || ldims[0] != dims[0] {
                        return Err(Error::Dataset(format!(
                            "{}: {} labels for {} samples",
                            labels.display(),
                            ldims.first().copied().unwrap_or(0),
                            dims[0]
                        )));
                    }
                    let mut shape = dims;
                    let x = Tensor::from_vec(&shape, x)?;
                    shape.truncate(1);
                    (x, y.iter().map(|&v| v as usize).collect())
                }
            };
            let x = match shape {
                Some(s) => {
                    let mut full = vec![x.shape()[0]];
                    full.extend_from_slice(s);
                    x.reshape(&full)?
                }
                None => x,
            };
            split_file(Split { x, y }, *test_fraction, *seed)
        }
    }
}

fn split_file(all: Split, test_fraction: f64, seed: u64) -> Result<Dataset> {
    if all.is_empty() {
        return Err(Error::Dataset("dataset is empty".into()));
    }
    let classes = all.y.iter().max().unwrap() + 1;
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (all.len() as f64 * test_fraction).round() as usize;
    let (test, train) = order.split_at(n_test);
    Ok(Dataset {
        train: all.subset(train),
        test: all.subset(test),
        classes,
    })
}

fn synthetic(
    classes: usize,
    shape: &[usize],
    train: usize,
    test: usize,
    seed: u64,
    separation: f64,
    noise: f64,
) -> Result<Dataset> {
    if classes < 2 || train == 0 || shape.is_empty() || shape.contains(&0) {
        return Err(Error::Config(
            "synthetic data needs >= 2 classes, a non-empty shape and train samples".into(),
        ));
    }
    if !(noise >= 0.0 && separation > 0.0) {
        return Err(Error::Config("noise must be >= 0 and separation > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f32>> = match shape.len() {
        1 => cluster_means(classes, shape[0], separation, &mut rng),
        3 => blob_templates(classes, shape, separation, &mut rng),
        _ => {
            return Err(Error::Config(format!(
                "synthetic shape {shape:?} must be [d] or [c, h, w]"
            )))
        }
    };
    let jitter = shape.len() == 3;
    let mut make = |n: usize| -> Result<Split> {
        let normal = Normal::new(0.0, noise).map_err(|e| Error::Config(e.to_string()))?;
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n * len);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % classes;
            let t = &templates[c];
            if jitter {
                let (h, w) = (shape[1] as isize, shape[2] as isize);
                let dy = rng.random_range(-1..=1i64) as isize;
                let dx = rng.random_range(-1..=1i64) as isize;
                let gain = rng.random_range(0.8..1.2f32);
                for ch in 0..shape[0] {
                    for yy in 0..h {
                        for xx in 0..w {
                            let (sy, sx) = (yy - dy, xx - dx);
                            let v = if sy >= 0 && sy < h && sx >= 0 && sx < w {
                                t[ch * (h * w) as usize + (sy * w + sx) as usize]
                            } else {
                                0.0
                            };
                            data.push(gain * v + normal.sample(&mut rng) as f32);
                        }
                    }
                }
            } else {
                data.extend(t.iter().map(|&m| m + normal.sample(&mut rng) as f32));
            }
            y.push(c);
        }
        let mut full = vec![n];
        full.extend_from_slice(shape);
        let x = Tensor::from_vec(&full, data)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(Split { x, y }.subset(&order))
    };
    let train = make(train)?;
    let test = make(test)?;
    Ok(Dataset {
        train,
        test,
        classes,
    })
}

fn cluster_means<R: Rng>(classes: usize, dim: usize, separation: f64, rng: &mut R) -> Vec<Vec<f32>> {
    let normal = Normal::new(0.0, separation).unwrap();
    (0..classes)
        .map(|_| (0..dim).map(|_| normal.sample(rng) as f32).collect())
        .collect()
}

/// Each class is a sum of three Gaussian blobs with class-specific centres,
/// widths and per-channel signed amplitudes.
fn blob_templates<R: Rng>(classes: usize, shape: &[usize], separation: f64, rng: &mut R) -> Vec<Vec<f32>> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    (0..classes)
        .map(|_| {
            let mut t = vec![0.0f32; c * h * w];
            for _ in 0..3 {
                let cy = rng.random_range(0.0..h as f64);
                let cx = rng.random_range(0.0..w as f64);
                let sigma = rng.random_range(0.08..0.25) * h.min(w) as f64;
                let amps: Vec<f64> = (0..c)
                    .map(|_| rng.random_range(-1.0..1.0) * separation)
                    .collect();
                for (ch, &a) in amps.iter().enumerate() {
                    for y in 0..h {
                        for x in 0..w {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            t[ch * h * w + y * w + x] += (a * (-d2 / (2.0 * sigma * sigma)).exp()) as f32;
                        }
                    }
                }
            }
            t
        })
        .collect()
}

/// Reads `label,x0,x1,...` rows. Blank lines are skipped; all rows must have
/// the column count of the first.
pub fn read_csv(path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text).map_err(|e| match e {
        Error::Dataset(msg) => Error::Dataset(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_csv(text: &str) -> Result<(Tensor, Vec<usize>)> {
    let mut cols = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let expected = *cols.get_or_insert(fields.len());
        if fields.len() != expected || expected < 2 {
            return Err(Error::Dataset(format!(
                "line {line_no}: expected {expected} columns, found {}",
                fields.len()
            )));
        }
        let label: usize = fields[0].parse().map_err(|_| {
            Error::Dataset(format!("line {line_no}: bad label {:?}", fields[0]))
        })?;
        labels.push(label);
        for (j, f) in fields[1..].iter().enumerate() {
            let v: f32 = f.parse().map_err(|_| {
                Error::Dataset(format!("line {line_no}, column {}: bad value {f:?}", j + 2))
            })?;
            if !v.is_finite() {
                return Err(Error::Dataset(format!(
                    "line {line_no}, column {}: non-finite value",
                    j + 2
                )));
            }
            data.push(v);
        }
    }
    let Some(cols) = cols else {
        return Err(Error::Dataset("no rows".into()));
    };
    let x = Tensor::from_vec(&[labels.len(), cols - 1], data)?;
    Ok((x, labels))
}

const IDX_U8: u8 = 0x08;
const IDX_F32: u8 = 0x0D;

/// Reads an IDX file with unsigned-byte or float32 payload.
pub fn read_idx(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes).map_err(|e| match e {
        Error::Dataset(msg) => Error::Dataset(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_idx(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let err = |offset: usize, msg: &str| Error::Dataset(format!("byte offset {offset}: {msg}"));
    if bytes.len() < 4 {
        return Err(err(bytes.len(), "truncated header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(err(0, "bad magic"));
    }
    let dtype = bytes[2];
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(err(3, "zero dimensions"));
    }
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        let off = 4 + 4 * d;
        let raw = bytes
            .get(off..off + 4)
            .ok_or_else(|| err(bytes.len(), "truncated dimension list"))?;
        dims.push(u32::from_be_bytes(raw.try_into().unwrap()) as usize);
    }
    let start = 4 + 4 * ndims;
    let count: usize = dims.iter().product();
    let width = match dtype {
        IDX_U8 => 1,
        IDX_F32 => 4,
        other => return Err(err(2, &format!("unsupported element type 0x{other:02x}"))),
    };
    let payload = &bytes[start..];
    if payload.len() != count * width {
        return Err(err(
            start + payload.len().min(count * width),
            &format!(
                "payload holds {} bytes, dimensions {dims:?} need {}",
                payload.len(),
                count * width
            ),
        ));
    }
    let data = match dtype {
        IDX_U8 => payload.iter().map(|&b| b as f32).collect(),
        _ => payload
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok((dims, data))
}

/// Writes float32 IDX.
pub fn write_idx_f32(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    write_idx(path, IDX_F32, dims, &data.iter().flat_map(|v| v.to_be_bytes()).collect::<Vec<_>>())
}

/// Writes unsigned-byte IDX.
pub fn write_idx_u8(path: &Path, dims: &[usize], data: &[u8]) -> Result<()> {
    write_idx(path, IDX_U8, dims, data)
}

fn write_idx(path: &Path, dtype: u8, dims: &[usize], payload: &[u8]) -> Result<()> {
    let mut buf = vec![0, 0, dtype, dims.len() as u8];
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_be_bytes());
    }
    buf.extend_from_slice(payload);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth(shape: Vec<usize>, seed: u64) -> DatasetSpec {
        DatasetSpec::Synthetic {
            classes: 10,
            shape,
            train: 1000,
            test: 200,
            seed,
            separation: 1.0,
            noise: 1.0,
        }
    }

    #[test]
    fn synthetic_is_reproducible() {
        let a = load_dataset(&synth(vec![16], 7)).unwrap();
        let b = load_dataset(&synth(vec![16], 7)).unwrap();
        assert_eq!(a, b);
        let c = load_dataset(&synth(vec![16], 8)).unwrap();
        assert_ne!(a.train.x, c.train.x);
        assert_eq!(a.train.len(), 1000);
        assert_eq!(a.classes, 10);
    }

    #[test]
    fn synthetic_images_have_image_shape() {
        let d = load_dataset(&synth(vec![3, 8, 8], 1)).unwrap();
        assert_eq!(d.train.x.shape(), &[1000, 3, 8, 8]);
        assert!(d.train.x.all_finite());
    }

    #[test]
    fn csv_wrong_column_count_names_line() {
        let err = parse_csv("0,1.0,2.0\n1,3.0\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = parse_csv("0,1.0\nx,2.0\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn csv_parses_rows() {
        let (x, y) = parse_csv("1, 0.5, -1\n\n0,2,3\n").unwrap();
        assert_eq!(x.shape(), &[2, 2]);
        assert_eq!(y, vec![1, 0]);
        assert_eq!(x.data(), &[0.5, -1.0, 2.0, 3.0]);
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.idx");
        let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.25 - 2.0).collect();
        write_idx_f32(&path, &[2, 3, 4], &data).unwrap();
        assert_eq!(read_idx(&path).unwrap(), (vec![2, 3, 4], data));
        let bytes: Vec<u8> = (0..6).collect();
        write_idx_u8(&path, &[6], &bytes).unwrap();
        assert_eq!(read_idx(&path).unwrap().1, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn idx_truncation_reports_offset() {
        let mut buf = vec![0, 0, IDX_U8, 1, 0, 0, 0, 5];
        buf.extend_from_slice(&[1, 2, 3]);
        let err = parse_idx(&buf).unwrap_err();
        assert!(err.to_string().contains("byte offset 11"), "{err}");
        let err = parse_idx(&[1, 0, 8, 1]).unwrap_err();
        assert!(err.to_string().contains("byte offset 0"), "{err}");
    }
}
