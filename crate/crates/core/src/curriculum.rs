//! Two-phase training: an optional pretraining phase followed by a
//! subordinate-level phase, with the control regimes used to isolate the
//! effect of basic-level pretraining.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataprep::{cap_per_class, DatasetManifest, ImageBank};
use crate::error::{Error, Result};
use crate::model::{backward, build_model, forward_logits, forward_train, replace_head, set_layer_lr_mults, Checkpoint, HeadInit, ModelSpec, PhaseTag};
use crate::nnkernel::{sgd_step, softmax_xent, SgdConfig, Tensor};
use crate::rng::{derive_seed, rng_from_state_bytes, rng_state_bytes};
use crate::taxonomy::{allocate_to_categories, random_nonbasic_categories, ClassLabels, LabelMap, Level, Taxonomy};
use crate::transfer::{evaluate_probe, ProbeConfig};

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub max_iterations: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub task_level: Level,
    /// Number of leading conv layers trained at `lowered_mult` times the rate.
    #[serde(default)]
    pub lowered_prefix: usize,
    #[serde(default = "one")]
    pub lowered_mult: f64,
    /// Check every parameter for NaN/Inf after each step, not only the loss.
    #[serde(default)]
    pub checked: bool,
}

fn one() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        let bad = |m: String| Err(Error::Validation(format!("train config: {m}")));
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive".into());
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return bad("eval_every and checkpoint_every must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.lowered_mult) {
            return bad(format!("lowered_mult {} not in [0,1]", self.lowered_mult));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    /// Subordinate-level training from scratch.
    Reference,
    /// Subordinate-level training for the same total number of iterations
    /// as the pretrained regimes, head kept across the phase boundary.
    ReferenceExtended,
    /// Pretraining on random non-basic categories, then a fresh head.
    RandomSubsetPretrain,
    /// Basic-level pretraining, then a fresh random head.
    FacilitatedRandomHead,
    /// Basic-level pretraining, then subordinate outputs copied from their
    /// basic category's output.
    FacilitatedReplicatedHead,
}

impl RegimeKind {
    pub const ALL: [RegimeKind; 5] = [
        RegimeKind::Reference,
        RegimeKind::ReferenceExtended,
        RegimeKind::RandomSubsetPretrain,
        RegimeKind::FacilitatedRandomHead,
        RegimeKind::FacilitatedReplicatedHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RegimeKind::Reference => "reference",
            RegimeKind::ReferenceExtended => "reference_extended",
            RegimeKind::RandomSubsetPretrain => "random_subset_pretrain",
            RegimeKind::FacilitatedRandomHead => "facilitated_random_head",
            RegimeKind::FacilitatedReplicatedHead => "facilitated_replicated_head",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regime {
    pub kind: RegimeKind,
    #[serde(default)]
    pub phase_a: Option<TrainConfig>,
    pub phase_b: TrainConfig,
    /// Per-category sample cap for phase A, at its task level.
    #[serde(default)]
    pub cap: Option<usize>,
    /// Category count for random-subset pretraining; defaults to the number
    /// of basic categories.
    #[serde(default)]
    pub subset_size: Option<usize>,
}

impl Regime {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("regime {}: {m}", self.kind.name())));
        self.phase_b.validate()?;
        if self.phase_b.task_level != Level::Sub {
            return bad("phase B trains at the subordinate level".into());
        }
        match (self.kind, &self.phase_a) {
            (RegimeKind::Reference, Some(_)) => return bad("has no phase A".into()),
            (RegimeKind::Reference, None) => {}
            (_, None) => return bad("needs a phase A".into()),
            (kind, Some(a)) => {
                a.validate()?;
                let want = match kind {
                    RegimeKind::ReferenceExtended => Some(Level::Sub),
                    RegimeKind::FacilitatedRandomHead | RegimeKind::FacilitatedReplicatedHead => Some(Level::Basic),
                    _ => None,
                };
                if let Some(level) = want {
                    if a.task_level != level {
                        return bad(format!("phase A must train at the {level:?} level"));
                    }
                }
            }
        }
        if self.cap == Some(0) || self.subset_size == Some(0) {
            return bad("cap and subset_size must be positive when given".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunReport {
    pub curves: Vec<CurvePoint>,
    pub final_metrics: BTreeMap<String, f64>,
    pub regime: Option<RegimeKind>,
    pub checkpoints: Vec<PathBuf>,
}

impl RunReport {
    fn push(&mut self, iteration: u64, split: &str, metric: &str, value: f64) {
        self.curves.push(CurvePoint { iteration, split: split.into(), metric: metric.into(), value });
        self.final_metrics.insert(format!("{split}/{metric}"), value);
    }

    fn merge(&mut self, other: RunReport) {
        self.curves.extend(other.curves);
        self.final_metrics.extend(other.final_metrics);
        self.checkpoints.extend(other.checkpoints);
    }

    /// Values of one `(split, metric)` series, in recording order.
    pub fn series(&self, split: &str, metric: &str) -> Vec<(u64, f64)> {
        self.curves
            .iter()
            .filter(|p| p.split == split && p.metric == metric)
            .map(|p| (p.iteration, p.value))
            .collect()
    }

    /// CSV `iteration,split,metric,value`.
    pub fn write_curves_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["iteration", "split", "metric", "value"])?;
        for p in &self.curves {
            wr.write_record([p.iteration.to_string().as_str(), &p.split, &p.metric, &p.value.to_string()])?;
        }
        wr.flush().map_err(|e| Error::io("<curves csv>", e))?;
        Ok(())
    }

    /// `curves.csv` and `final.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let curves = dir.join("curves.csv");
        self.write_curves_csv(std::fs::File::create(&curves).map_err(|e| Error::io(&curves, e))?)?;
        let fin = dir.join("final.json");
        let f = std::fs::File::create(&fin).map_err(|e| Error::io(&fin, e))?;
        serde_json::to_writer_pretty(
            f,
            &serde_json::json!({
                "regime": self.regime.map(|r| r.name()),
                "final": self.final_metrics,
                "checkpoints": self.checkpoints,
            }),
        )?;
        Ok(())
    }
}

/// Fraction of rows whose label ranks among the `k` largest logits. A class
/// tied with the label outranks it when its index is lower.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!("logits {:?} do not align with {} labels", logits.shape(), labels.len())));
    }
    let n_classes = logits.shape()[1];
    if k == 0 || k > n_classes {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={n_classes}")));
    }
    let mut hits = 0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(Error::InvalidArgument(format!("label {y} out of range for {n_classes} classes")));
        }
        let row = logits.row(i);
        let rank = (0..n_classes).filter(|&j| row[j] > row[y] || (row[j] == row[y] && j < y)).count();
        hits += usize::from(rank < k);
    }
    Ok(hits as f64 / labels.len() as f64)
}

fn class_indices(manifest: &DatasetManifest, labels: &ClassLabels) -> Result<Vec<usize>> {
    manifest
        .samples
        .iter()
        .map(|s| {
            labels.class_of(&s.leaf_id).ok_or_else(|| {
                Error::Validation(format!("sample `{}` has leaf `{}` with no class at this level", s.sample_id, s.leaf_id))
            })
        })
        .collect()
}

/// Loss, top-1 and top-5 (top-K when fewer than five classes) in eval mode.
pub fn evaluate(ckpt: &Checkpoint, manifest: &DatasetManifest, bank: &ImageBank, labels: &ClassLabels) -> Result<[f64; 3]> {
    let y = class_indices(manifest, labels)?;
    let mut loss = 0.0;
    let mut top1 = 0.0;
    let mut top5 = 0.0;
    let k5 = 5.min(ckpt.spec.n_outputs);
    for (chunk, yc) in manifest.samples.chunks(EVAL_CHUNK).zip(y.chunks(EVAL_CHUNK)) {
        let batch = bank.batch(chunk.iter().map(|s| s.sample_id.as_str()))?;
        let logits = forward_logits(&ckpt.spec, &ckpt.params, &batch)?;
        let w = yc.len() as f64;
        loss += softmax_xent(&logits, yc)?.0 * w;
        top1 += topk_accuracy(&logits, yc, 1)? * w;
        top5 += topk_accuracy(&logits, yc, k5)? * w;
    }
    let n = y.len() as f64;
    Ok([loss / n, top1 / n, top5 / n])
}

/// Output locations for one training phase.
#[derive(Debug, Clone, Copy)]
pub struct PhaseOutput<'a> {
    /// Curve split prefix, e.g. `phase_a`.
    pub name: &'a str,
    /// Directory for periodic checkpoints; none are written when absent.
    pub checkpoint_dir: Option<&'a Path>,
}

/// Minibatch SGD for `cfg.max_iterations` steps. Batches come from a fresh
/// shuffle each epoch (last partial batch kept) drawn from the checkpoint's
/// RNG stream, which also drives dropout. The learning-rate schedule starts
/// over at the beginning of the phase.
pub fn train_phase(
    ckpt: &Checkpoint,
    cfg: &TrainConfig,
    train: &DatasetManifest,
    val: &DatasetManifest,
    bank: &ImageBank,
    labels: &ClassLabels,
    out: PhaseOutput<'_>,
) -> Result<(Checkpoint, RunReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training manifest is empty".into()));
    }
    if labels.n_classes() != ckpt.spec.n_outputs {
        return Err(Error::Validation(format!(
            "task has {} classes but the model head has {} outputs",
            labels.n_classes(),
            ckpt.spec.n_outputs
        )));
    }
    let y = class_indices(train, labels)?;
    if !val.is_empty() {
        class_indices(val, labels)?;
    }
    let mut ck = set_layer_lr_mults(ckpt, cfg.lowered_prefix, cfg.lowered_mult)?;
    let mut rng = rng_from_state_bytes(&ck.rng_state)
        .ok_or_else(|| Error::Validation("checkpoint RNG state is malformed".into()))?;
    let mut report = RunReport::default();
    let train_split = format!("{}/train", out.name);
    let val_split = format!("{}/val", out.name);
    if let Some(dir) = out.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let n = train.len();
    log::info!(
        "{}: {} iterations of batch {} over {n} samples ({:.1} epochs)",
        out.name,
        cfg.max_iterations,
        cfg.sgd.batch_size,
        (cfg.max_iterations as f64 * cfg.sgd.batch_size as f64) / n as f64
    );
    let mut order: Vec<usize> = (0..n).collect();
    let mut pos = n;
    let start = ck.iteration;
    for it in 0..cfg.max_iterations {
        if pos >= n {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let idx = &order[pos..(pos + cfg.sgd.batch_size).min(n)];
        pos += idx.len();
        let batch = bank.batch(idx.iter().map(|&i| train.samples[i].sample_id.as_str()))?;
        let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        ck.params.zero_grads();
        let (logits, trace) = forward_train(&ck.spec, &ck.params, &batch, Some(cfg.sgd.dropout_rate), &mut rng)?;
        let (loss, dlogits) = softmax_xent(&logits, &yb)?;
        let global = start + it + 1;
        if !loss.is_finite() {
            return Err(Error::NumericFault { iteration: global, what: format!("training loss {loss}") });
        }
        backward(&ck.spec, &mut ck.params, &trace, &dlogits)?;
        sgd_step(&mut ck.params, &cfg.sgd, it);
        if cfg.checked {
            if let Some(e) = ck.params.iter().find(|e| e.weight.first_non_finite().is_some()) {
                return Err(Error::NumericFault { iteration: global, what: format!("parameter `{}` became non-finite", e.name) });
            }
        }
        ck.iteration = global;
        report.push(global, &train_split, "loss", loss);
        let last = it + 1 == cfg.max_iterations;
        if !val.is_empty() && ((it + 1) % cfg.eval_every == 0 || last) {
            let [l, t1, t5] = evaluate(&ck, val, bank, labels)?;
            report.push(global, &val_split, "loss", l);
            report.push(global, &val_split, "top1", t1);
            report.push(global, &val_split, "top5", t5);
        }
        if let Some(dir) = out.checkpoint_dir {
            if (it + 1) % cfg.checkpoint_every == 0 || last {
                ck.rng_state = rng_state_bytes(&rng);
                let path = dir.join(format!("{}_iter{global:08}.hcck", out.name));
                ck.save(&path)?;
                report.checkpoints.push(path);
            }
        }
    }
    ck.rng_state = rng_state_bytes(&rng);
    Ok((ck, report))
}

/// Everything a regime trains and validates on.
#[derive(Debug, Clone)]
pub struct DataBundle {
    /// Full training set; phase A derives its capped or subset view from it.
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub bank: ImageBank,
    pub taxonomy: Taxonomy,
    pub labelmap: LabelMap,
}

/// Run one regime end to end. `model` supplies the layer stack; its head
/// width is set from the first phase's task. Checkpoints land in
/// `checkpoint_dir` when given.
pub fn run_regime(regime: &Regime, model: &ModelSpec, data: &DataBundle, checkpoint_dir: Option<&Path>) -> Result<(Checkpoint, RunReport)> {
    regime.validate()?;
    let sub = data.labelmap.labels(Level::Sub);
    let mut report = RunReport { regime: Some(regime.kind), ..Default::default() };
    let out = |name| PhaseOutput { name, checkpoint_dir };

    let ckpt = match &regime.phase_a {
        None => {
            let mut spec = model.clone();
            set_head_width(&mut spec, sub.n_classes());
            let mut ck = build_model(&spec, regime.phase_b.seed)?;
            ck.phase_tag = PhaseTag::Subordinate;
            ck
        }
        Some(a) => {
            let labels = match regime.kind {
                RegimeKind::RandomSubsetPretrain => {
                    let count = regime.subset_size.unwrap_or(data.labelmap.basic_names().len());
                    let cats = random_nonbasic_categories(&data.taxonomy, count, derive_seed(a.seed, "subset", 0))?;
                    let overlap: BTreeSet<&String> = cats.intersection(data.taxonomy.basic_marks()).collect();
                    assert!(overlap.is_empty(), "pretraining categories overlap basic marks: {overlap:?}");
                    allocate_to_categories(data.taxonomy.graph(), &cats)?
                }
                _ => data.labelmap.labels(a.task_level),
            };
            let in_task = |m: &DatasetManifest| m.filtered(|s| labels.class_of(&s.leaf_id).is_some());
            let mut train = in_task(&data.train);
            if let Some(cap) = regime.cap {
                train = cap_per_class(&train, &labels, cap, derive_seed(a.seed, "cap", 0))?;
            }
            let val = in_task(&data.val);
            let mut spec = model.clone();
            set_head_width(&mut spec, labels.n_classes());
            let mut ck = build_model(&spec, a.seed)?;
            if a.task_level == Level::Sub && regime.kind == RegimeKind::ReferenceExtended {
                ck.phase_tag = PhaseTag::Subordinate;
            }
            let (ck, rep) = train_phase(&ck, a, &train, &val, &data.bank, &labels, out("phase_a"))?;
            report.merge(rep);
            match regime.kind {
                RegimeKind::ReferenceExtended => ck,
                RegimeKind::FacilitatedReplicatedHead => {
                    replace_head(&ck, sub.n_classes(), HeadInit::Replicate, &data.labelmap, regime.phase_b.seed)?
                }
                _ => replace_head(&ck, sub.n_classes(), HeadInit::Random, &data.labelmap, regime.phase_b.seed)?,
            }
        }
    };
    let (ck, rep) = train_phase(&ckpt, &regime.phase_b, &data.train, &data.val, &data.bank, &sub, out("phase_b"))?;
    report.merge(rep);
    Ok((ck, report))
}

fn set_head_width(spec: &mut ModelSpec, n: usize) {
    spec.n_outputs = n;
    if let Some(crate::model::LayerSpec { kind: crate::model::LayerKind::Fc { units }, .. }) = spec.layers.last_mut() {
        *units = n;
    }
}

/// Probe accuracy of each checkpoint, as a series keyed by the checkpoint's
/// stored iteration.
pub fn checkpoint_sweep(
    checkpoints: &[Checkpoint],
    manifest: &DatasetManifest,
    bank: &ImageBank,
    labels: &ClassLabels,
    probe: &ProbeConfig,
    split_name: &str,
) -> Result<RunReport> {
    if checkpoints.windows(2).any(|w| w[0].iteration >= w[1].iteration) {
        return Err(Error::InvalidArgument("checkpoints must be in strictly ascending iteration order".into()));
    }
    let mut report = RunReport::default();
    for ck in checkpoints {
        let r = evaluate_probe(ck, manifest, bank, labels, probe)?;
        report.push(ck.iteration, split_name, "mean_class_recall", r.mean);
        report.push(ck.iteration, split_name, "mean_class_recall_std", r.std);
    }
    Ok(report)
}
