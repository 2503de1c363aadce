//! Datasets: the two-moons generator, MNIST IDX ingestion and seeded
//! minibatching.

use std::f64::consts::PI;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Environment variable naming the base URL MNIST files are fetched from.
pub const MNIST_MIRROR_ENV: &str = "LSA_MNIST_MIRROR";

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Labeled inputs: `N x features` or `N x C x H x W`, one class id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    /// Human-readable note on how inputs were scaled.
    pub normalization: String,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if inputs.batch() != targets.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} targets",
                inputs.batch(),
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::TargetOutOfRange { target: t as f64, classes });
        }
        Ok(Self { inputs, targets, classes, split, normalization: "none".into() })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select(indices),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            classes: self.classes,
            split: self.split,
            normalization: self.normalization.clone(),
        }
    }

    /// Seeded subset of `n` distinct samples, kept in storage order.
    pub fn subset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::InvalidArgument(format!("subset of {n} from {} samples", self.len())));
        }
        if n == self.len() {
            return Ok(self.clone());
        }
        let mut idx = sample_indices(self.len(), n, seed);
        idx.sort_unstable();
        Ok(self.select(&idx))
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Writes a 2-D dataset as `x1,x2,label` CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if self.sample_shape() != [2] {
            return Err(Error::InvalidArgument("CSV export needs 2-D inputs".into()));
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x1", "x2", "label"])?;
        for (i, &t) in self.targets.iter().enumerate() {
            let s = self.inputs.sample(i);
            w.write_record([s[0].to_string(), s[1].to_string(), t.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Seeded sample of `k` distinct indices from `0..n`, in draw order.
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    index::sample(&mut rng, n, k).into_vec()
}

/// Two interleaving half circles: class 0 on the upper unit arc, class 1 on
/// the lower arc shifted by (1, -0.5), plus isotropic Gaussian jitter.
/// Rows are shuffled with the same seed.
pub fn make_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidArgument("make_moons needs n >= 2".into()));
    }
    if !(noise >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise std must be >= 0, got {noise}")));
    }
    let n_out = n / 2;
    let n_in = n - n_out;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arc = |i: usize, count: usize| if count > 1 { PI * i as f64 / (count - 1) as f64 } else { 0.0 };
    let mut points: Vec<([f64; 2], usize)> = Vec::with_capacity(n);
    for i in 0..n_out {
        let t = arc(i, n_out);
        points.push(([t.cos(), t.sin()], 0));
    }
    for i in 0..n_in {
        let t = arc(i, n_in);
        points.push(([1.0 - t.cos(), 0.5 - t.sin()], 1));
    }
    points.shuffle(&mut rng);
    let mut data = Vec::with_capacity(2 * n);
    let mut targets = Vec::with_capacity(n);
    for (p, label) in points {
        for v in p {
            let jitter: f64 = StandardNormal.sample(&mut rng);
            data.push(v + noise * jitter);
        }
        targets.push(label);
    }
    let mut ds = Dataset::new(Tensor::new(vec![n, 2], data)?, targets, 2, Split::Train)?;
    ds.normalization = format!("none (moons, noise={noise})");
    Ok(ds)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::IdxTruncated { path: path.into(), detail: format!("header ends before byte {}", at + 4) })
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxMagic { path: path.into(), expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::IdxTruncated {
            path: path.into(),
            detail: format!("expected {need} pixel bytes, found {}", body.len()),
        });
    }
    Ok((n, rows, cols, body[..need].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxMagic { path: path.into(), expected: IDX_LABELS_MAGIC, found: magic });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::IdxTruncated {
            path: path.into(),
            detail: format!("expected {n} labels, found {}", body.len()),
        });
    }
    Ok(body[..n].to_vec())
}

/// Loads an IDX image/label pair, scaling pixels to `[0, 1]`.
pub fn load_mnist_idx(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(image_path)?;
    let labels = read_idx_labels(label_path)?;
    if labels.len() != n {
        return Err(Error::IdxCountMismatch { images: n, labels: labels.len() });
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let inputs = Tensor::new(vec![n, 1, rows, cols], data)?;
    let targets = labels.iter().map(|&l| l as usize).collect();
    let mut ds = Dataset::new(inputs, targets, 10, Split::Train)?;
    ds.normalization = "pixels / 255".into();
    Ok(ds)
}

/// Loads the train and test splits from a directory holding the four
/// standard MNIST IDX files.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let p = |name: &str| dir.join(name);
    let train = load_mnist_idx(&p(MNIST_FILES[0]), &p(MNIST_FILES[1]))?.with_split(Split::Train);
    let test = load_mnist_idx(&p(MNIST_FILES[2]), &p(MNIST_FILES[3]))?.with_split(Split::Test);
    Ok((train, test))
}

pub fn mnist_present(dir: &Path) -> bool {
    MNIST_FILES.iter().all(|f| dir.join(f).is_file())
}

/// Downloads any missing MNIST file from `mirror` (a base URL serving the
/// four files, optionally gzip-compressed with a `.gz` suffix) into `dir`.
pub fn fetch_mnist(mirror: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let base = mirror.trim_end_matches('/');
    let mut written = Vec::new();
    for name in MNIST_FILES {
        let dest = dir.join(name);
        if dest.is_file() {
            continue;
        }
        let bytes = match http_get(&format!("{base}/{name}")) {
            Ok(b) => b,
            Err(_) => {
                let gz = http_get(&format!("{base}/{name}.gz"))?;
                let mut out = Vec::new();
                flate2::read::GzDecoder::new(&gz[..])
                    .read_to_end(&mut out)
                    .map_err(|e| Error::io(&dest, e))?;
                out
            }
        };
        fs::write(&dest, bytes).map_err(|e| Error::io(&dest, e))?;
        written.push(dest);
    }
    Ok(written)
}

fn http_get(url: &str) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    ureq::get(url)
        .call()
        .map_err(|e| Error::InvalidArgument(format!("GET {url}: {e}")))?
        .into_reader()
        .read_to_end(&mut body)
        .map_err(|e| Error::io(url, e))?;
    Ok(body)
}

/// Epoch iterator over `(inputs, targets)` minibatches. Every sample appears
/// exactly once; the last batch may be short.
pub struct Batches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let targets = idx.iter().map(|&i| self.dataset.targets[i]).collect();
        Some((self.dataset.inputs.select(idx), targets))
    }
}

/// Sample order for one epoch: storage order, or a permutation seeded by
/// `seed` when shuffling.
pub fn epoch_order(n: usize, shuffle: bool, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

pub fn batches(dataset: &Dataset, batch_size: usize, shuffle: bool, seed: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    Ok(Batches { dataset, order: epoch_order(dataset.len(), shuffle, seed), batch_size, pos: 0 })
}
