//! Synthetic two-level image hierarchy.
//!
//! Basic prototypes are mid-gray plus Gaussian noise of scale `σ_b`; each
//! subordinate prototype perturbs its basic prototype by `σ_s`; each sample
//! perturbs its subordinate prototype by `σ_n`. Every stage is clipped to
//! `[0, 1]` and rounded to `f32` so in-memory and on-disk data agree.

use std::collections::BTreeSet;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, ImageBank, ImageTensor, Sample, SplitTag};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::taxonomy::SynsetGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_basic: usize,
    pub subs_per_basic: usize,
    /// `[channels, height, width]`
    pub image_size: [usize; 3],
    pub prototype_scale: f64,
    pub subordinate_scale: f64,
    pub noise_scale: f64,
    pub samples_per_sub: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// 4 basic categories × 3 subordinates × 50 samples.
    pub fn standard(seed: u64) -> Self {
        SynthSpec {
            n_basic: 4,
            subs_per_basic: 3,
            image_size: [3, 16, 16],
            prototype_scale: 0.25,
            subordinate_scale: 0.05,
            noise_scale: 0.2,
            samples_per_sub: 50,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("synth spec: {m}")));
        if self.n_basic == 0 || self.subs_per_basic == 0 || self.samples_per_sub == 0 {
            return bad("all counts must be positive".into());
        }
        if self.image_size.iter().any(|&d| d == 0) {
            return bad(format!("image size {:?} has a zero dimension", self.image_size));
        }
        if !(self.prototype_scale > 0.0 && self.prototype_scale.is_finite()) {
            return bad(format!("prototype_scale {} must be positive", self.prototype_scale));
        }
        if !(self.subordinate_scale >= 0.0 && self.subordinate_scale < self.prototype_scale) {
            return bad(format!(
                "subordinate_scale {} must be in [0, prototype_scale={})",
                self.subordinate_scale, self.prototype_scale
            ));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise_scale {} must be non-negative", self.noise_scale));
        }
        Ok(())
    }

    pub fn basic_id(i: usize) -> String {
        format!("b{i:02}")
    }

    pub fn sub_id(i: usize, j: usize) -> String {
        format!("b{i:02}s{j:02}")
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    pub graph: SynsetGraph,
    pub basic_marks: BTreeSet<String>,
    pub bank: ImageBank,
    pub basic_prototypes: Vec<ImageTensor>,
    /// Indexed `[basic][sub]`.
    pub sub_prototypes: Vec<Vec<ImageTensor>>,
}

impl SynthDataset {
    /// Write one `images/<id>.tensor` file per sample plus `manifest.csv`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for s in &self.manifest.samples {
            self.bank.require(&s.sample_id)?.save(&dir.join(&s.path))?;
        }
        self.manifest.save(&dir.join("manifest.csv"))
    }

    /// The hierarchy as `parent>child` lines.
    pub fn synset_text(&self) -> String {
        self.graph.edges().map(|(p, c)| format!("{p}>{c}\n")).collect()
    }
}

fn perturb(base: &[f64], scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    base.iter()
        .map(|&b| {
            let z: f64 = StandardNormal.sample(&mut rng);
            ((b + scale * z).clamp(0.0, 1.0) as f32) as f64
        })
        .collect()
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let [c, h, w] = spec.image_size;
    let gray = vec![0.5; c * h * w];
    let mut edges = Vec::new();
    let mut samples = Vec::new();
    let mut bank = ImageBank::new();
    let mut basic_prototypes = Vec::new();
    let mut sub_prototypes = Vec::new();
    for i in 0..spec.n_basic {
        let bid = SynthSpec::basic_id(i);
        edges.push(("root".to_string(), bid.clone()));
        let proto = perturb(&gray, spec.prototype_scale, derive_seed(spec.seed, "basic", i as u64));
        let mut subs = Vec::new();
        for j in 0..spec.subs_per_basic {
            let sid = SynthSpec::sub_id(i, j);
            edges.push((bid.clone(), sid.clone()));
            let sub_seed = derive_seed(spec.seed, "sub", (i * spec.subs_per_basic + j) as u64);
            let sub = perturb(&proto, spec.subordinate_scale, sub_seed);
            for k in 0..spec.samples_per_sub {
                let id = format!("{sid}_{k:04}");
                let px = perturb(&sub, spec.noise_scale, derive_seed(sub_seed, "sample", k as u64));
                bank.insert(id.clone(), ImageTensor::new(c, h, w, px)?);
                samples.push(Sample { sample_id: id.clone(), path: format!("images/{id}.tensor"), leaf_id: sid.clone() });
            }
            subs.push(ImageTensor::new(c, h, w, sub)?);
        }
        basic_prototypes.push(ImageTensor::new(c, h, w, proto)?);
        sub_prototypes.push(subs);
    }
    let graph = SynsetGraph::from_edges(&edges)?;
    let basic_marks = (0..spec.n_basic).map(SynthSpec::basic_id).collect();
    Ok(SynthDataset {
        manifest: DatasetManifest::new(samples, SplitTag::Train)?,
        graph,
        basic_marks,
        bank,
        basic_prototypes,
        sub_prototypes,
    })
}
