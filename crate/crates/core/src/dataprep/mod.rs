//! Dataset manifests, per-category capping, synthetic hierarchical data,
//! class splits and near-duplicate detection.

mod ncc;
mod splits;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

pub use ncc::{comparison_view, find_overlaps, normalized_correlation, write_overlap_csv, Overlap, OverlapReport, COMPARE_SIZE, DEFAULT_NCC_THRESHOLD};
pub use splits::random_class_splits;
pub use synth::{generate_synthetic, SynthDataset, SynthSpec};

use crate::error::{Error, Result};
use crate::nnkernel::{DType, Tensor};
use crate::rng::rng_from_seed;
use crate::taxonomy::{ClassLabels, LabelMap, Level};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    /// File path (relative to the manifest's directory) or a synthetic descriptor.
    pub path: String,
    pub leaf_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub samples: Vec<Sample>,
    pub split_tag: SplitTag,
}

impl DatasetManifest {
    pub fn new(samples: Vec<Sample>, split_tag: SplitTag) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &samples {
            if !seen.insert(s.sample_id.as_str()) {
                return Err(Error::Validation(format!("duplicate sample id `{}`", s.sample_id)));
            }
        }
        Ok(DatasetManifest { samples, split_tag })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Keep samples passing `keep`, in order.
    pub fn filtered(&self, keep: impl Fn(&Sample) -> bool) -> DatasetManifest {
        DatasetManifest {
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
            split_tag: self.split_tag,
        }
    }

    pub fn with_tag(mut self, tag: SplitTag) -> Self {
        self.split_tag = tag;
        self
    }

    /// Sample count per leaf id.
    pub fn leaf_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for s in &self.samples {
            *out.entry(s.leaf_id.clone()).or_insert(0) += 1;
        }
        out
    }

    /// CSV `sample_id,path,leaf_id`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["sample_id", "path", "leaf_id"])?;
        for s in &self.samples {
            wr.write_record([&s.sample_id, &s.path, &s.leaf_id])?;
        }
        wr.flush().map_err(|e| Error::io("<manifest csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, split_tag: SplitTag) -> Result<Self> {
        let mut samples = Vec::new();
        for row in csv::Reader::from_reader(r).deserialize() {
            samples.push(row?);
        }
        DatasetManifest::new(samples, split_tag)
    }

    pub fn load(path: &Path, split_tag: SplitTag) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(f, split_tag)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }
}

/// A `[C, H, W]` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let t = Tensor::from_vec(&[channels, height, width], values)?;
        Self::from_tensor(t)
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::Shape(format!("image must be [C,H,W], got {:?}", t.shape())));
        }
        if let Some(bad) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("image value {bad} outside [0,1]")));
        }
        Ok(ImageTensor(t))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Raw 32-bit little-endian tensor file.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.0.to_bytes(DType::F32)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (t, _) = Tensor::read_from(&bytes[..])
            .map_err(|msg| Error::Format { path: path.to_path_buf(), msg })?;
        Self::from_tensor(t)
    }
}

/// Pixel data for manifest samples, keyed by sample id.
#[derive(Debug, Clone, Default)]
pub struct ImageBank {
    images: BTreeMap<String, ImageTensor>,
}

impl ImageBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, img: ImageTensor) {
        self.images.insert(id.into(), img);
    }

    pub fn get(&self, id: &str) -> Option<&ImageTensor> {
        self.images.get(id)
    }

    pub fn require(&self, id: &str) -> Result<&ImageTensor> {
        self.get(id).ok_or_else(|| Error::Validation(format!("no pixel data for sample `{id}`")))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Read every sample's tensor file; relative paths resolve against `root`.
    pub fn load_manifest(manifest: &DatasetManifest, root: &Path) -> Result<Self> {
        let mut bank = ImageBank::new();
        for s in &manifest.samples {
            let p = PathBuf::from(&s.path);
            let p = if p.is_absolute() { p } else { root.join(p) };
            bank.insert(s.sample_id.clone(), ImageTensor::load(&p)?);
        }
        Ok(bank)
    }

    /// Merge another bank in; entries in `other` win on id collisions.
    pub fn extend(&mut self, other: ImageBank) {
        self.images.extend(other.images);
    }

    /// Stack the images of `ids` into an `[N, C, H, W]` batch.
    pub fn batch<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Tensor> {
        let imgs: Vec<&Tensor> = ids
            .into_iter()
            .map(|id| self.require(id).map(|i| i.tensor()))
            .collect::<Result<_>>()?;
        Tensor::stack(&imgs)
    }
}

/// Keep at most `cap` samples per category at `level`, sampled uniformly
/// without replacement; retained samples keep their relative order.
pub fn cap_per_category(
    manifest: &DatasetManifest,
    labelmap: &LabelMap,
    level: Level,
    cap: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    cap_per_class(manifest, &labelmap.labels(level), cap, seed)
}

/// [`cap_per_category`] for an arbitrary leaf-to-class mapping.
pub fn cap_per_class(manifest: &DatasetManifest, labels: &ClassLabels, cap: usize, seed: u64) -> Result<DatasetManifest> {
    if cap == 0 {
        return Err(Error::InvalidArgument("cap must be at least 1".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        let class = labels
            .class_of(&s.leaf_id)
            .ok_or_else(|| Error::Validation(format!("sample `{}` has unknown leaf `{}`", s.sample_id, s.leaf_id)))?;
        by_class.entry(class).or_default().push(i);
    }
    let mut rng = rng_from_seed(seed);
    let mut keep = vec![false; manifest.len()];
    for members in by_class.values() {
        if members.len() <= cap {
            members.iter().for_each(|&i| keep[i] = true);
        } else {
            for j in sample_indices(&mut rng, members.len(), cap) {
                keep[members[j]] = true;
            }
        }
    }
    Ok(DatasetManifest {
        samples: manifest
            .samples
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(s, _)| s.clone())
            .collect(),
        split_tag: manifest.split_tag,
    })
}

/// Per-category sample counts at `level`, by category name.
pub fn category_counts(manifest: &DatasetManifest, labelmap: &LabelMap, level: Level) -> Result<BTreeMap<String, usize>> {
    let labels = labelmap.labels(level);
    let mut out = BTreeMap::new();
    for s in &manifest.samples {
        let c = labels
            .class_of(&s.leaf_id)
            .ok_or_else(|| Error::Validation(format!("sample `{}` has unknown leaf `{}`", s.sample_id, s.leaf_id)))?;
        *out.entry(labels.names[c].clone()).or_insert(0) += 1;
    }
    Ok(out)
}
