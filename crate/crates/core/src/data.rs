//! Dataset provisioning: synthetic blobs, MNIST IDX files, removal scenarios
//! and the embedding-manifest import path.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distance::{FeatureSet, Split};
use crate::error::{Error, Result};
use crate::filter::ScenarioKind;
use crate::numkit::{self, derive_seed, Matrix, SeededRng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Fraction of the dataset carved off as the test split.
pub const TEST_FRACTION: f64 = 0.1;

const TAG_HOLDOUT: u64 = 1;
const TAG_REMOVAL: u64 = 2;
const TAG_CLASS: u64 = 3;

/// Inputs with dense labels in `[0, n_classes)`. Sample ids are row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub provenance: String,
}

impl RawDataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, provenance: impl Into<String>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Dimension { expected: inputs.rows(), actual: labels.len() });
        }
        if labels.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let n_classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; n_classes];
        for &l in &labels {
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("labels are not dense: class {missing} has no samples")));
        }
        if let Some(pos) = inputs.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("input row {}", pos / inputs.cols().max(1))));
        }
        Ok(Self { inputs, labels, n_classes, provenance: provenance.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Inputs and labels for the given ids, in the given order.
    pub fn subset(&self, ids: &[usize]) -> (Matrix, Vec<usize>) {
        (self.inputs.select_rows(ids), ids.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn input(&self, id: usize) -> &[f64] {
        self.inputs.row(id)
    }
}

/// `classes` isotropic Gaussian blobs of `per_class` samples each. Centers
/// are standard-normal draws; samples are `center + spread * N(0, I)`.
/// Rows are grouped by class.
pub fn synth_blobs(classes: usize, per_class: usize, dims: usize, spread: f64, seed: u64) -> Result<RawDataset> {
    if classes < 2 || per_class < 2 || dims == 0 || !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::Config(format!(
            "blobs need classes>=2, per_class>=2, dims>=1, spread>0 (got {classes}, {per_class}, {dims}, {spread})"
        )));
    }
    let mut rng = SeededRng::new(seed);
    let centers: Vec<Vec<f64>> = (0..classes).map(|_| (0..dims).map(|_| rng.normal()).collect()).collect();
    let mut data = Vec::with_capacity(classes * per_class * dims);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(center.iter().map(|m| m + spread * rng.normal()));
            labels.push(c);
        }
    }
    let inputs = Matrix::from_vec(classes * per_class, dims, data)?;
    RawDataset::new(inputs, labels, format!("blobs(c={classes},n={per_class},d={dims},spread={spread},seed={seed})"))
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses an IDX image file into `(count, rows*cols, pixels scaled to [0, 1])`.
pub fn parse_idx_images(bytes: &[u8], limit: usize) -> Result<(usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("images: bad magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let pixels = rows * cols;
    let body = &bytes[16..];
    if body.len() < n * pixels {
        return Err(Error::Format(format!("images: truncated, {} of {} pixel bytes", body.len(), n * pixels)));
    }
    let keep = n.min(limit);
    let data = body[..keep * pixels].iter().map(|&p| f64::from(p) / 255.0).collect();
    Ok((n, pixels, data))
}

/// Parses an IDX label file into `(count, labels)`.
pub fn parse_idx_labels(bytes: &[u8], limit: usize) -> Result<(usize, Vec<usize>)> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("labels: bad magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Format(format!("labels: truncated, {} of {n} bytes", body.len())));
    }
    Ok((n, body[..n.min(limit)].iter().map(|&l| l as usize).collect()))
}

pub fn load_mnist_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>, limit: usize) -> Result<RawDataset> {
    let (n_img, pixels, data) = parse_idx_images(&fs::read(images.as_ref())?, limit)?;
    let (n_lab, labs) = parse_idx_labels(&fs::read(labels.as_ref())?, limit)?;
    if n_img != n_lab {
        return Err(Error::Format(format!("image count {n_img} != label count {n_lab}")));
    }
    let inputs = Matrix::from_vec(labs.len(), pixels, data)?;
    RawDataset::new(inputs, labs, format!("mnist({}, limit={limit})", images.as_ref().display()))
}

/// Encodes an IDX image file (for fixtures and exports).
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// A removal-request workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RemovalScenario {
    /// `size` requests drawn uniformly from the training portion.
    Random { size: usize, seed: u64 },
    /// `round(fraction * |class|)` requests from one class; the class is
    /// drawn from the seed when not given.
    ClassRemoval {
        #[serde(default)]
        class: Option<usize>,
        fraction: f64,
        seed: u64,
    },
}

impl RemovalScenario {
    pub fn kind(&self) -> ScenarioKind {
        match self {
            Self::Random { .. } => ScenarioKind::Random,
            Self::ClassRemoval { .. } => ScenarioKind::ClassRemoval,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Self::Random { seed, .. } | Self::ClassRemoval { seed, .. } => *seed,
        }
    }
}

/// Disjoint id lists (each sorted) covering the whole dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSplits {
    pub remaining: Vec<usize>,
    pub removal: Vec<usize>,
    pub test: Vec<usize>,
    /// Class targeted by a class-removal scenario.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub removed_class: Option<usize>,
}

impl ScenarioSplits {
    /// `remaining ∪ removal`, sorted.
    pub fn training(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.remaining.iter().chain(&self.removal).copied().collect();
        all.sort_unstable();
        all
    }

    pub fn split_of(&self, n: usize) -> Vec<Split> {
        let mut tags = vec![Split::Remaining; n];
        for &i in &self.removal {
            tags[i] = Split::Removal;
        }
        for &i in &self.test {
            tags[i] = Split::Test;
        }
        tags
    }
}

/// Carves a seeded test holdout, then draws the removal set from the rest.
/// The holdout depends only on the scenario seed, so scenarios sharing a
/// seed share a test split.
pub fn make_scenario(data: &RawDataset, sc: &RemovalScenario) -> Result<ScenarioSplits> {
    let n = data.len();
    let seed = sc.seed();
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(derive_seed(seed, &[TAG_HOLDOUT])).shuffle(&mut order);
    let n_test = (n as f64 * TEST_FRACTION).round() as usize;
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    train.sort_unstable();

    let mut removed_class = None;
    let mut removal = match *sc {
        RemovalScenario::Random { size, .. } => {
            if size > train.len() {
                return Err(Error::Config(format!("removal size {size} exceeds {} training samples", train.len())));
            }
            let mut pool = train.clone();
            SeededRng::new(derive_seed(seed, &[TAG_REMOVAL])).shuffle(&mut pool);
            pool.truncate(size);
            pool
        }
        RemovalScenario::ClassRemoval { class, fraction, .. } => {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::Config(format!("class-removal fraction must be in (0, 1], got {fraction}")));
            }
            let class = match class {
                Some(c) if c >= data.n_classes => {
                    return Err(Error::LabelOutOfRange { label: c, n_classes: data.n_classes })
                }
                Some(c) => c,
                None => SeededRng::new(derive_seed(seed, &[TAG_CLASS])).below(data.n_classes),
            };
            removed_class = Some(class);
            let class_total = data.labels.iter().filter(|&&l| l == class).count();
            let size = (fraction * class_total as f64).round() as usize;
            let mut pool: Vec<usize> = train.iter().copied().filter(|&i| data.labels[i] == class).collect();
            if size > pool.len() {
                return Err(Error::Config(format!(
                    "class {class}: removing {size} of {class_total} samples but only {} are outside the test split",
                    pool.len()
                )));
            }
            SeededRng::new(derive_seed(seed, &[TAG_REMOVAL])).shuffle(&mut pool);
            pool.truncate(size);
            pool
        }
    };
    removal.sort_unstable();
    test.sort_unstable();
    let mut is_removed = vec![false; n];
    for &i in &removal {
        is_removed[i] = true;
    }
    let remaining = train.into_iter().filter(|&i| !is_removed[i]).collect();
    Ok(ScenarioSplits { remaining, removal, test, removed_class })
}

/// Embedding manifest: raw little-endian binaries next to a JSON header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingManifest {
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    /// Row-major f32 LE, `n * d` values.
    pub features_file: PathBuf,
    /// u32 LE, `n` values.
    pub labels_file: PathBuf,
    pub normalized: bool,
}

fn resolve(manifest: &Path, file: &Path) -> PathBuf {
    if file.is_absolute() {
        file.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(file)
    }
}

/// Reads the manifest's binaries as `(features, labels, manifest)` without
/// normalizing.
pub fn read_embeddings(manifest_path: impl AsRef<Path>) -> Result<(Matrix, Vec<usize>, EmbeddingManifest)> {
    let path = manifest_path.as_ref();
    let manifest: EmbeddingManifest = serde_json::from_slice(&fs::read(path)?)?;
    let fbytes = fs::read(resolve(path, &manifest.features_file))?;
    let expected = manifest.n * manifest.d * 4;
    if fbytes.len() != expected {
        return Err(Error::Format(format!("features file is {} bytes, manifest requires {expected}", fbytes.len())));
    }
    let lbytes = fs::read(resolve(path, &manifest.labels_file))?;
    if lbytes.len() != manifest.n * 4 {
        return Err(Error::Format(format!(
            "labels file is {} bytes, manifest requires {}",
            lbytes.len(),
            manifest.n * 4
        )));
    }
    let mut values = Vec::with_capacity(manifest.n * manifest.d);
    for (i, c) in fbytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("feature row {}", i / manifest.d.max(1))));
        }
        values.push(f64::from(v));
    }
    let labels: Vec<usize> = lbytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= manifest.classes) {
        return Err(Error::LabelOutOfRange { label: bad, n_classes: manifest.classes });
    }
    Ok((Matrix::from_vec(manifest.n, manifest.d, values)?, labels, manifest))
}

/// Loads an embedding manifest as a feature set with ids `0..n`.
pub fn import_embeddings(manifest_path: impl AsRef<Path>) -> Result<FeatureSet> {
    let (features, labels, manifest) = read_embeddings(manifest_path)?;
    let n = manifest.n;
    let ids = (0..n).collect();
    let split = vec![Split::Remaining; n];
    if manifest.normalized {
        for (i, row) in features.iter_rows().enumerate() {
            let norm = numkit::norm(row);
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::Format(format!("row {i} has norm {norm} but manifest says normalized")));
            }
        }
        FeatureSet::from_normalized(features, labels, ids, split, 1e-6)
    } else {
        FeatureSet::from_raw(&features, labels, ids, split)
    }
}

/// Writes `<stem>.json`, `<stem>.f32` and `<stem>.labels.u32` into `dir`.
pub fn export_embeddings(
    dir: impl AsRef<Path>,
    stem: &str,
    features: &Matrix,
    labels: &[usize],
    classes: usize,
    normalized: bool,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let features_file = PathBuf::from(format!("{stem}.f32"));
    let labels_file = PathBuf::from(format!("{stem}.labels.u32"));
    let mut fbytes = Vec::with_capacity(features.as_slice().len() * 4);
    for &v in features.as_slice() {
        fbytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut lbytes = Vec::with_capacity(labels.len() * 4);
    for &l in labels {
        lbytes.extend_from_slice(&(l as u32).to_le_bytes());
    }
    fs::write(dir.join(&features_file), fbytes)?;
    fs::write(dir.join(&labels_file), lbytes)?;
    let manifest = EmbeddingManifest {
        n: features.rows(),
        d: features.cols(),
        classes,
        features_file,
        labels_file,
        normalized,
    };
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}
