//! Frozen-feature transfer evaluation: activations of a trained body feed a
//! freshly trained softmax layer, scored by mean class recall over random
//! train/test splits.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataprep::{random_class_splits, DatasetManifest, ImageBank};
use crate::error::{Error, Result};
use crate::model::{forward_to_layer, Checkpoint};
use crate::nnkernel::{fc_backward, fc_forward, sgd_step, softmax_xent, ParamEntry, ParamSet, SgdConfig, Tensor};
use crate::rng::{derive_seed, rng_from_seed};
use crate::taxonomy::ClassLabels;

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    /// `[N, D]`
    pub rows: Tensor,
    pub sample_ids: Vec<String>,
    pub source_layer: String,
}

impl FeatureMatrix {
    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Tensor> {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.rows.row(i));
        }
        Tensor::from_vec(&[indices.len(), d], data)
    }
}

/// Eval-mode activations at `layer` for every manifest sample, in order.
pub fn extract_features(ckpt: &Checkpoint, manifest: &DatasetManifest, bank: &ImageBank, layer: &str) -> Result<FeatureMatrix> {
    if manifest.is_empty() {
        return Err(Error::InvalidArgument("no samples to extract features from".into()));
    }
    match ckpt.spec.layers.iter().position(|l| l.name == layer) {
        None => return Err(Error::Validation(format!("unknown layer `{layer}`"))),
        Some(i) if i + 1 == ckpt.spec.layers.len() => {
            return Err(Error::Validation(format!("`{layer}` is the output head, not a feature layer")))
        }
        Some(_) => {}
    }
    let mut data = Vec::new();
    let mut d = 0;
    for chunk in manifest.samples.chunks(EVAL_CHUNK) {
        let batch = bank.batch(chunk.iter().map(|s| s.sample_id.as_str()))?;
        let f = forward_to_layer(&ckpt.spec, &ckpt.params, &batch, layer)?;
        d = f.shape()[1];
        data.extend_from_slice(f.data());
    }
    let rows = Tensor::from_vec(&[manifest.len(), d], data)?;
    if let Some(i) = rows.first_non_finite() {
        return Err(Error::NumericFault { iteration: ckpt.iteration, what: format!("non-finite feature at flat index {i}") });
    }
    Ok(FeatureMatrix {
        rows,
        sample_ids: manifest.samples.iter().map(|s| s.sample_id.clone()).collect(),
        source_layer: layer.to_string(),
    })
}

/// A single fully connected softmax layer over frozen features.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxProbe {
    /// `[K, D]`
    pub weight: Tensor,
    /// `[K]`
    pub bias: Tensor,
}

impl SoftmaxProbe {
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        Ok(fc_forward(features, &self.weight, &self.bias)?.0)
    }

    /// Arg-max class per row, ties to the lower index.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(features)?;
        Ok((0..logits.shape()[0])
            .map(|i| {
                let row = logits.row(i);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }
}

/// Train a softmax layer from zero weights with minibatch momentum SGD;
/// batches come from a seeded shuffle per epoch.
pub fn train_softmax_probe(
    features: &Tensor,
    labels: &[usize],
    n_classes: usize,
    cfg: &SgdConfig,
    iterations: u64,
    seed: u64,
) -> Result<SoftmaxProbe> {
    cfg.validate()?;
    if features.rank() != 2 || features.shape()[0] != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!("features {:?} do not align with {} labels", features.shape(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {n_classes} classes")));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::InvalidArgument("probe training set holds a single class".into()));
    }
    let (n, d) = (labels.len(), features.shape()[1]);
    let mut params = ParamSet::new();
    params.push(ParamEntry::new("probe.weight", Tensor::zeros(&[n_classes, d])))?;
    params.push(ParamEntry::new("probe.bias", Tensor::zeros(&[n_classes])))?;
    let mut rng = rng_from_seed(derive_seed(seed, "probe", 0));
    let mut order: Vec<usize> = (0..n).collect();
    let mut pos = n;
    for it in 0..iterations {
        if pos >= n {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let idx = &order[pos..(pos + cfg.batch_size).min(n)];
        pos += idx.len();
        let mut x = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            x.extend_from_slice(features.row(i));
        }
        let x = Tensor::from_vec(&[idx.len(), d], x)?;
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        params.zero_grads();
        let (logits, cache) = fc_forward(&x, &params.entry(0).weight, &params.entry(1).weight)?;
        let (loss, dlogits) = softmax_xent(&logits, &y)?;
        if !loss.is_finite() {
            return Err(Error::NumericFault { iteration: it, what: format!("probe loss {loss}") });
        }
        let g = fc_backward(&cache, &params.entry(0).weight, &dlogits)?;
        params.entry_mut(0).grad = g.weight;
        params.entry_mut(1).grad = g.bias;
        sgd_step(&mut params, cfg, it);
    }
    Ok(SoftmaxProbe { weight: params.entry(0).weight.clone(), bias: params.entry(1).weight.clone() })
}

/// Per-class recall (`None` for classes absent from `labels`) and its mean
/// over the present classes.
pub fn mean_class_recall(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<(f64, Vec<Option<f64>>)> {
    if labels.is_empty() || predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "need equal, non-zero numbers of predictions ({}) and labels ({})",
            predictions.len(),
            labels.len()
        )));
    }
    let mut total = vec![0usize; n_classes];
    let mut correct = vec![0usize; n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if l >= n_classes {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {n_classes} classes")));
        }
        total[l] += 1;
        correct[l] += usize::from(p == l);
    }
    let recalls: Vec<Option<f64>> =
        total.iter().zip(&correct).map(|(&t, &c)| (t > 0).then(|| c as f64 / t as f64)).collect();
    let absent = recalls.iter().filter(|r| r.is_none()).count();
    if absent > 0 {
        log::warn!("{absent} of {n_classes} classes have no test samples and are excluded from mean class recall");
    }
    let present: Vec<f64> = recalls.iter().flatten().copied().collect();
    Ok((present.iter().sum::<f64>() / present.len() as f64, recalls))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub sgd: SgdConfig,
    #[serde(default = "default_probe_iterations")]
    pub iterations: u64,
    pub n_train_per_class: usize,
    #[serde(default = "default_max_test")]
    pub max_test_per_class: usize,
    #[serde(default = "default_n_splits")]
    pub n_splits: usize,
    pub seed: u64,
    /// Feature layer; the layer feeding the head when absent.
    #[serde(default)]
    pub layer: Option<String>,
}

fn default_probe_iterations() -> u64 {
    1000
}

fn default_max_test() -> usize {
    50
}

fn default_n_splits() -> usize {
    3
}

impl ProbeConfig {
    pub fn standard(n_train_per_class: usize, seed: u64) -> Self {
        ProbeConfig {
            sgd: SgdConfig { batch_size: 64, dropout_rate: 0.0, ..SgdConfig::reference() },
            iterations: default_probe_iterations(),
            n_train_per_class,
            max_test_per_class: default_max_test(),
            n_splits: default_n_splits(),
            seed,
            layer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecall {
    pub split: usize,
    pub mean_class_recall: f64,
    pub per_class: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub per_split: Vec<SplitRecall>,
    pub mean: f64,
    /// Sample standard deviation across splits; 0 for a single split.
    pub std: f64,
    pub n_train_per_class: usize,
    pub class_names: Vec<String>,
}

impl ProbeResult {
    fn aggregate(per_split: Vec<SplitRecall>, n_train_per_class: usize, class_names: Vec<String>) -> Self {
        let n = per_split.len() as f64;
        let mean = per_split.iter().map(|s| s.mean_class_recall).sum::<f64>() / n;
        let std = if per_split.len() > 1 {
            (per_split.iter().map(|s| (s.mean_class_recall - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        ProbeResult { per_split, mean, std, n_train_per_class, class_names }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    /// CSV `split,class,recall`; classes absent from a split's test set are
    /// left out.
    pub fn write_per_class_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["split", "class", "recall"])?;
        for s in &self.per_split {
            for (name, r) in self.class_names.iter().zip(&s.per_class) {
                if let Some(r) = r {
                    wr.write_record([s.split.to_string().as_str(), name, &format!("{r:.6}")])?;
                }
            }
        }
        wr.flush().map_err(|e| Error::io("<per-class recall csv>", e))?;
        Ok(())
    }
}

/// Fail if any training image is pixel-identical to a test image.
fn refuse_spanning_duplicates(train: &DatasetManifest, test: &DatasetManifest, bank: &ImageBank, split: usize) -> Result<()> {
    let key = |id: &str| -> Result<Vec<u64>> { Ok(bank.require(id)?.values().iter().map(|v| v.to_bits()).collect()) };
    let mut seen = BTreeMap::new();
    for s in &train.samples {
        seen.insert(key(&s.sample_id)?, s.sample_id.as_str());
    }
    for s in &test.samples {
        if let Some(t) = seen.get(&key(&s.sample_id)?) {
            return Err(Error::Validation(format!(
                "split {split}: test sample `{}` duplicates training sample `{t}`; remove overlaps first",
                s.sample_id
            )));
        }
    }
    Ok(())
}

/// Frozen-feature probe over `cfg.n_splits` random class splits of
/// `manifest`. The checkpoint is only read.
pub fn evaluate_probe(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    bank: &ImageBank,
    labels: &ClassLabels,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let layer = match &cfg.layer {
        Some(l) => l.clone(),
        None => ckpt.spec.feature_layer().ok_or_else(|| Error::Validation("model has no feature layer".into()))?.to_string(),
    };
    let splits = random_class_splits(manifest, cfg.n_train_per_class, cfg.max_test_per_class, cfg.n_splits, cfg.seed)?;
    let class_of = |m: &DatasetManifest| -> Result<Vec<usize>> {
        m.samples
            .iter()
            .map(|s| {
                labels.class_of(&s.leaf_id).ok_or_else(|| {
                    Error::Validation(format!("sample `{}` has leaf `{}` outside the probe labels", s.sample_id, s.leaf_id))
                })
            })
            .collect()
    };
    class_of(manifest)?;
    for (i, (train, test)) in splits.iter().enumerate() {
        refuse_spanning_duplicates(train, test, bank, i)?;
    }
    let features = extract_features(ckpt, manifest, bank, &layer)?;
    let row_of: BTreeMap<&str, usize> = features.sample_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let rows = |m: &DatasetManifest| -> Result<Tensor> {
        features.select(&m.samples.iter().map(|s| row_of[s.sample_id.as_str()]).collect::<Vec<_>>())
    };
    let per_split: Vec<SplitRecall> = splits
        .par_iter()
        .enumerate()
        .map(|(i, (train, test))| {
            let probe = train_softmax_probe(
                &rows(train)?,
                &class_of(train)?,
                labels.n_classes(),
                &cfg.sgd,
                cfg.iterations,
                derive_seed(cfg.seed, "probe-split", i as u64),
            )?;
            let preds = probe.predict(&rows(test)?)?;
            let (mean, per_class) = mean_class_recall(&preds, &class_of(test)?, labels.n_classes())?;
            Ok(SplitRecall { split: i, mean_class_recall: mean, per_class })
        })
        .collect::<Result<_>>()?;
    Ok(ProbeResult::aggregate(per_split, cfg.n_train_per_class, labels.names.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataprep::{Sample, SplitTag};
    use crate::model::{build_model, ModelSpec};
    use proptest::prelude::*;

    fn sgd(lr: f64) -> SgdConfig {
        SgdConfig { base_lr: lr, batch_size: 8, dropout_rate: 0.0, weight_decay: 0.0, ..SgdConfig::reference() }
    }

    #[test]
    fn recall_hand_count() {
        let (mean, per) = mean_class_recall(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
        assert_eq!(per, vec![Some(0.5), Some(1.0)]);
        assert_eq!(mean, 0.75);
        assert_eq!(mean_class_recall(&[0, 0, 0, 0], &[0, 1, 0, 1], 2).unwrap().0, 0.5);
        assert_eq!(mean_class_recall(&[2, 1], &[2, 1], 3).unwrap().0, 1.0);
        assert!(mean_class_recall(&[], &[], 2).is_err());
    }

    #[test]
    fn absent_classes_are_excluded() {
        let (mean, per) = mean_class_recall(&[0, 0], &[0, 0], 3).unwrap();
        assert_eq!(per, vec![Some(1.0), None, None]);
        assert_eq!(mean, 1.0);
    }

    #[test]
    fn separable_2d_reaches_full_training_accuracy() {
        let mut rng = rng_from_seed(4);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let c = i % 2;
            let sign = if c == 0 { -1.0 } else { 1.0 };
            x.push(sign * (0.5 + rand::Rng::random::<f64>(&mut rng)));
            x.push(rand::Rng::random::<f64>(&mut rng) - 0.5);
            y.push(c);
        }
        let x = Tensor::from_vec(&[40, 2], x).unwrap();
        let probe = train_softmax_probe(&x, &y, 2, &sgd(0.1), 500, 1).unwrap();
        assert_eq!(probe.predict(&x).unwrap(), y);
    }

    #[test]
    fn zero_rate_leaves_zero_weights_and_single_class_fails() {
        let x = Tensor::from_vec(&[2, 1], vec![1.0, -1.0]).unwrap();
        let p = train_softmax_probe(&x, &[0, 1], 2, &sgd(0.0), 10, 1).unwrap();
        assert!(p.weight.data().iter().chain(p.bias.data()).all(|&v| v == 0.0));
        assert!(train_softmax_probe(&x, &[1, 1], 2, &sgd(0.1), 10, 1).is_err());
    }

    #[test]
    fn probe_training_is_reproducible() {
        let x = Tensor::from_vec(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.1, 0.1, 1.0]).unwrap();
        let a = train_softmax_probe(&x, &[0, 1, 0, 1], 2, &sgd(0.1), 30, 3).unwrap();
        assert_eq!(a, train_softmax_probe(&x, &[0, 1, 0, 1], 2, &sgd(0.1), 30, 3).unwrap());
    }

    fn tiny_set(n_per_class: usize) -> (DatasetManifest, ImageBank, ClassLabels) {
        let mut bank = ImageBank::new();
        let mut samples = Vec::new();
        for c in 0..2 {
            for k in 0..n_per_class {
                let id = format!("c{c}_{k}");
                let mut rng = rng_from_seed(derive_seed(c as u64, "img", k as u64));
                let v: Vec<f64> = (0..3 * 16 * 16).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
                bank.insert(id.clone(), crate::dataprep::ImageTensor::new(3, 16, 16, v).unwrap());
                samples.push(Sample { sample_id: id, path: String::new(), leaf_id: format!("c{c}") });
            }
        }
        let labels = ClassLabels {
            names: vec!["c0".into(), "c1".into()],
            leaf_to_class: [("c0".to_string(), 0), ("c1".to_string(), 1)].into_iter().collect(),
        };
        (DatasetManifest::new(samples, SplitTag::Train).unwrap(), bank, labels)
    }

    #[test]
    fn features_are_deterministic_and_nonnegative_after_relu() {
        let ck = build_model(&ModelSpec::desk_with_input([3, 16, 16], 2), 1).unwrap();
        let (m, bank, _) = tiny_set(3);
        let a = extract_features(&ck, &m, &bank, "drop4").unwrap();
        assert_eq!(a.dim(), 256);
        assert_eq!(a, extract_features(&ck, &m, &bank, "drop4").unwrap());
        assert!(extract_features(&ck, &m, &bank, "relu3").unwrap().rows.data().iter().all(|&v| v >= 0.0));
        assert!(extract_features(&ck, &m, &bank, "nope").is_err());
        assert!(extract_features(&ck, &m, &bank, "fc5").is_err());
    }

    #[test]
    fn probe_leaves_checkpoint_untouched_and_aggregates_exactly() {
        let ck = build_model(&ModelSpec::desk_with_input([3, 16, 16], 2), 1).unwrap();
        let before = ck.digest();
        let (m, bank, labels) = tiny_set(12);
        let cfg = ProbeConfig { iterations: 20, ..ProbeConfig::standard(4, 9) };
        let r = evaluate_probe(&ck, &m, &bank, &labels, &cfg).unwrap();
        assert_eq!(ck.digest(), before);
        assert_eq!(r.per_split.len(), 3);
        let mean = r.per_split.iter().map(|s| s.mean_class_recall).sum::<f64>() / 3.0;
        assert!((r.mean - mean).abs() < 1e-12);
        assert_eq!(r, evaluate_probe(&ck, &m, &bank, &labels, &cfg).unwrap());
    }

    #[test]
    fn duplicate_across_train_and_test_is_refused() {
        let ck = build_model(&ModelSpec::desk_with_input([3, 16, 16], 2), 1).unwrap();
        let (m, mut bank, labels) = tiny_set(12);
        let copy = bank.get("c0_0").unwrap().clone();
        for k in 1..12 {
            bank.insert(format!("c0_{k}"), copy.clone());
        }
        let err = evaluate_probe(&ck, &m, &bank, &labels, &ProbeConfig::standard(4, 1)).unwrap_err();
        assert!(err.to_string().contains("duplicates"), "{err}");
    }

    #[test]
    fn per_class_csv_lists_present_classes() {
        let r = ProbeResult::aggregate(
            vec![SplitRecall { split: 0, mean_class_recall: 0.5, per_class: vec![Some(0.5), None] }],
            5,
            vec!["a,b".into(), "c".into()],
        );
        let mut buf = Vec::new();
        r.write_per_class_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "split,class,recall\n0,\"a,b\",0.500000\n");
        assert_eq!(r.std, 0.0);
    }

    proptest! {
        #[test]
        fn recall_bounds(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60)) {
            let (p, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let (mean, per) = mean_class_recall(&p, &l, 4).unwrap();
            prop_assert!((0.0..=1.0).contains(&mean));
            prop_assert!(per.iter().flatten().all(|r| (0.0..=1.0).contains(r)));
        }
    }
}
