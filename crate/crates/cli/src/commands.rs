//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use hiercurric::curriculum::{checkpoint_sweep, run_regime, DataBundle, Regime};
use hiercurric::dataprep::{
    cap_per_category, category_counts, find_overlaps, generate_synthetic, write_overlap_csv, DatasetManifest, ImageBank,
    SplitTag, SynthSpec,
};
use hiercurric::model::{Checkpoint, ModelSpec};
use hiercurric::taxonomy::{
    allocate_descendants, category_height_histogram, parse_marks_file, parse_synset_file, validate_basic_marks, ClassLabels,
    HeightMode, LabelMap, Level, Taxonomy,
};
use hiercurric::transfer::{evaluate_probe, ProbeConfig, ProbeResult};

use crate::config::ExperimentConfig;
use crate::{output_dir, CliError};

type Result<T> = std::result::Result<T, CliError>;

/// Missing inputs are a usage error, not an I/O failure.
fn require_input(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::config(format!("input file {} does not exist", path.display())))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError { code: 4, msg: e.to_string() };
    wr.write_record(header).map_err(fail)?;
    for r in rows {
        wr.write_record(&r).map_err(fail)?;
    }
    wr.into_inner().map_err(|e| CliError { code: 4, msg: e.to_string() })
}

fn load_taxonomy(synsets: &Path, marks: &Path) -> Result<Taxonomy> {
    require_input(synsets)?;
    require_input(marks)?;
    let graph = parse_synset_file(synsets)?;
    let marks = parse_marks_file(marks)?;
    Ok(validate_basic_marks(graph, &marks)?)
}

/// Load a manifest and its images; relative image paths resolve against the
/// manifest's directory.
fn load_manifest(path: &Path, tag: SplitTag) -> Result<(DatasetManifest, ImageBank)> {
    require_input(path)?;
    let m = DatasetManifest::load(path, tag)?;
    let bank = ImageBank::load_manifest(&m, manifest_root(path))?;
    Ok((m, bank))
}

fn manifest_root(path: &Path) -> &Path {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn absolutize(m: &DatasetManifest, root: &Path) -> Result<DatasetManifest> {
    let root = std::path::absolute(root).map_err(|e| CliError::io(root, e))?;
    let mut out = m.clone();
    for s in &mut out.samples {
        if Path::new(&s.path).is_relative() {
            s.path = root.join(&s.path).to_string_lossy().into_owned();
        }
    }
    Ok(out)
}

fn labelmap_bytes(lm: &LabelMap) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    lm.write_csv(&mut buf)?;
    Ok(buf)
}

pub fn taxonomy(synsets: &Path, marks: &Path, mode: HeightMode, out: &Path) -> Result<()> {
    let tax = load_taxonomy(synsets, marks)?;
    let lm = allocate_descendants(&tax);
    let labelmap = labelmap_bytes(&lm)?;
    let heights = csv_bytes(
        &["height", "count"],
        category_height_histogram(&tax, mode).into_iter().map(|(h, c)| vec![h.to_string(), c.to_string()]),
    )?;
    create_dir(out)?;
    write_file(&out.join("labelmap.csv"), labelmap)?;
    write_file(&out.join("heights.csv"), heights)?;
    log::info!("{} leaves in {} basic categories", lm.entries().len(), lm.basic_names().len());
    Ok(())
}

pub fn prepare(manifest: &Path, synsets: &Path, marks: &Path, level: Level, cap: usize, seed: u64, out: &Path) -> Result<()> {
    let tax = load_taxonomy(synsets, marks)?;
    require_input(manifest)?;
    let m = DatasetManifest::load(manifest, SplitTag::Train)?;
    let lm = allocate_descendants(&tax);
    let capped = absolutize(&cap_per_category(&m, &lm, level, cap, seed)?, manifest_root(manifest))?;
    let counts = category_counts(&capped, &lm, level)?;
    for (cat, n) in &counts {
        log::info!("{cat}: {n}");
    }
    log::info!("{} of {} samples retained across {} categories", capped.len(), m.len(), counts.len());
    create_dir(out)?;
    capped.save(&out.join("manifest.csv"))?;
    write_file(
        &out.join("category_counts.csv"),
        csv_bytes(&["category", "count"], counts.iter().map(|(c, n)| vec![c.clone(), n.to_string()]))?,
    )?;
    write_file(&out.join("labelmap.csv"), labelmap_bytes(&lm)?)
}

#[derive(Debug, Default, Clone)]
pub struct SynthOverrides {
    pub n_basic: Option<usize>,
    pub subs_per_basic: Option<usize>,
    pub samples_per_sub: Option<usize>,
    pub image_size: Option<[usize; 3]>,
    pub prototype_scale: Option<f64>,
    pub subordinate_scale: Option<f64>,
    pub noise_scale: Option<f64>,
}

/// Synthetic-data file: any subset of the spec's fields except the seed.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthFile {
    n_basic: Option<usize>,
    subs_per_basic: Option<usize>,
    samples_per_sub: Option<usize>,
    image_size: Option<[usize; 3]>,
    prototype_scale: Option<f64>,
    subordinate_scale: Option<f64>,
    noise_scale: Option<f64>,
}

impl SynthOverrides {
    fn apply(&self, spec: &mut SynthSpec) {
        if let Some(v) = self.n_basic {
            spec.n_basic = v;
        }
        if let Some(v) = self.subs_per_basic {
            spec.subs_per_basic = v;
        }
        if let Some(v) = self.samples_per_sub {
            spec.samples_per_sub = v;
        }
        if let Some(v) = self.image_size {
            spec.image_size = v;
        }
        if let Some(v) = self.prototype_scale {
            spec.prototype_scale = v;
        }
        if let Some(v) = self.subordinate_scale {
            spec.subordinate_scale = v;
        }
        if let Some(v) = self.noise_scale {
            spec.noise_scale = v;
        }
    }
}

pub fn synth(config: Option<&Path>, flags: SynthOverrides, seed: u64, out: &Path) -> Result<()> {
    let mut spec = SynthSpec::standard(seed);
    if let Some(path) = config {
        require_input(path)?;
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let f: SynthFile = toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        SynthOverrides {
            n_basic: f.n_basic,
            subs_per_basic: f.subs_per_basic,
            samples_per_sub: f.samples_per_sub,
            image_size: f.image_size,
            prototype_scale: f.prototype_scale,
            subordinate_scale: f.subordinate_scale,
            noise_scale: f.noise_scale,
        }
        .apply(&mut spec);
    }
    flags.apply(&mut spec);
    let d = generate_synthetic(&spec)?;
    create_dir(out)?;
    d.write_to(out)?;
    write_file(&out.join("synsets.txt"), d.synset_text())?;
    let marks: String = d.basic_marks.iter().map(|m| format!("{m}\n")).collect();
    write_file(&out.join("marks.txt"), marks)?;
    let json = serde_json::to_vec_pretty(&spec).map_err(|e| CliError::config(e.to_string()))?;
    write_file(&out.join("synth.json"), json)?;
    log::info!("{} samples in {} subordinate categories", d.manifest.len(), d.graph.leaf_set().len());
    Ok(())
}

pub fn dedup(set_a: &Path, set_b: &Path, threshold: f64, out: &Path) -> Result<()> {
    let (a, bank_a) = load_manifest(set_a, SplitTag::Train)?;
    let (b, bank_b) = load_manifest(set_b, SplitTag::Test)?;
    let report = find_overlaps(&a, &bank_a, &b, &bank_b, threshold)?;
    for id in &report.skipped {
        log::warn!("{id}: constant image skipped");
    }
    log::info!("{} overlapping pairs; {} of {} samples of set A kept", report.pairs.len(), report.filtered_a.len(), a.len());
    create_dir(out)?;
    let mut buf = Vec::new();
    write_overlap_csv(&report.pairs, &mut buf)?;
    write_file(&out.join("overlaps.csv"), buf)?;
    absolutize(&report.filtered_a, manifest_root(set_a))?.save(&out.join("filtered_a.csv"))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct RunManifest {
    config_hash: String,
    version: String,
    config: ExperimentConfig,
}

/// Synthetic data split by sample index: the last `holdout` samples of every
/// subordinate category are validation data.
fn synth_bundle(spec: &SynthSpec, holdout: usize) -> Result<DataBundle> {
    let d = generate_synthetic(spec)?;
    let first_val = spec.samples_per_sub - holdout;
    let index = |id: &str| id.rsplit('_').next().and_then(|k| k.parse::<usize>().ok()).expect("synthetic ids end in _k");
    let taxonomy = validate_basic_marks(d.graph.clone(), &d.basic_marks)?;
    let labelmap = allocate_descendants(&taxonomy);
    Ok(DataBundle {
        train: d.manifest.filtered(|s| index(&s.sample_id) < first_val),
        val: d.manifest.filtered(|s| index(&s.sample_id) >= first_val).with_tag(SplitTag::Val),
        bank: d.bank,
        taxonomy,
        labelmap,
    })
}

fn data_bundle(cfg: &ExperimentConfig) -> Result<DataBundle> {
    if let Some(spec) = &cfg.data.synth {
        return synth_bundle(spec, cfg.data.holdout_per_sub.expect("validated"));
    }
    let t = cfg.taxonomy.as_ref().expect("validated");
    let taxonomy = load_taxonomy(&t.synsets, &t.marks)?;
    let labelmap = allocate_descendants(&taxonomy);
    let (train, mut bank) = load_manifest(cfg.data.train_manifest.as_ref().expect("validated"), SplitTag::Train)?;
    let (val, vbank) = load_manifest(cfg.data.val_manifest.as_ref().expect("validated"), SplitTag::Val)?;
    bank.extend(vbank);
    Ok(DataBundle { train, val, bank, taxonomy, labelmap })
}

fn check_inputs(cfg: &ExperimentConfig) -> Result<()> {
    if let Some(t) = &cfg.taxonomy {
        require_input(&t.synsets)?;
        require_input(&t.marks)?;
    }
    for p in [&cfg.data.train_manifest, &cfg.data.val_manifest].into_iter().flatten() {
        require_input(p)?;
    }
    if let Some(m) = cfg.transfer.as_ref().and_then(|t| t.manifest.as_ref()) {
        require_input(m)?;
    }
    Ok(())
}

/// `(basic, subordinate)` category counts without loading any images.
fn class_counts(cfg: &ExperimentConfig) -> Result<(usize, usize)> {
    if let Some(s) = &cfg.data.synth {
        return Ok((s.n_basic, s.n_basic * s.subs_per_basic));
    }
    let t = cfg.taxonomy.as_ref().expect("validated");
    let lm = allocate_descendants(&load_taxonomy(&t.synsets, &t.marks)?);
    Ok((lm.basic_names().len(), lm.sub_names().len()))
}

fn print_shape_chain(title: &str, spec: &ModelSpec) -> Result<()> {
    println!("{title}: {} parameters", spec.param_count()?);
    for (name, shape) in spec.shape_chain()? {
        println!("  {name:<10} {shape:?}");
    }
    Ok(())
}

fn with_head(spec: &ModelSpec, n: usize) -> ModelSpec {
    let mut s = spec.clone();
    s.n_outputs = n;
    if let Some(hiercurric::model::LayerSpec { kind: hiercurric::model::LayerKind::Fc { units }, .. }) = s.layers.last_mut() {
        *units = n;
    }
    s
}

pub fn train(config: &Path, seed: Option<u64>, dry_run: bool, out: Option<PathBuf>) -> Result<()> {
    require_input(config)?;
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    cfg.validate()?;
    check_inputs(&cfg)?;
    let spec = cfg.model_spec();
    if dry_run {
        let (n_basic, n_sub) = class_counts(&cfg)?;
        print_shape_chain(&format!("subordinate head ({n_sub} classes)"), &with_head(&spec, n_sub))?;
        if cfg.regimes.iter().any(|r| r.phase_a.as_ref().is_some_and(|a| a.task_level == Level::Basic)) {
            print_shape_chain(&format!("basic head ({n_basic} classes)"), &with_head(&spec, n_basic))?;
        }
        for r in &cfg.regimes {
            println!("regime {}: ok", r.kind.name());
        }
        return Ok(());
    }
    let out = output_dir(out, cfg.output.as_ref().map(|o| o.directory.clone()))?;
    let hash = cfg.hash();
    let manifest_path = out.join("MANIFEST.json");
    if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| CliError::io(&manifest_path, e))?;
        let prev: RunManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", manifest_path.display())))?;
        if prev.config_hash != hash {
            return Err(CliError::config(format!(
                "{} was produced by a different config (hash {}); choose another output directory",
                out.display(),
                prev.config_hash
            )));
        }
    }
    let data = data_bundle(&cfg)?;
    let transfer = match &cfg.transfer {
        None => None,
        Some(t) => {
            let (m, bank) = match (&t.synth, &t.manifest) {
                (Some(s), _) => {
                    let d = generate_synthetic(s)?;
                    (d.manifest, d.bank)
                }
                (None, Some(p)) => load_manifest(p, SplitTag::Test)?,
                (None, None) => unreachable!("validated"),
            };
            let labels = ClassLabels::from_leaves(m.samples.iter().map(|s| s.leaf_id.as_str()));
            Some((t.probe.clone(), m, bank, labels))
        }
    };
    create_dir(&out)?;
    let run = RunManifest { config_hash: hash, version: env!("CARGO_PKG_VERSION").to_string(), config: cfg.clone() };
    write_file(&manifest_path, serde_json::to_vec_pretty(&run).map_err(|e| CliError::config(e.to_string()))?)?;

    let results: Vec<Result<()>> = cfg
        .regimes
        .par_iter()
        .map(|regime: &Regime| {
            let dir = out.join(regime.kind.name());
            let ckpt_dir = dir.join("checkpoints");
            create_dir(&ckpt_dir)?;
            log::info!("training {}", regime.kind.name());
            let (ckpt, report) = run_regime(regime, &spec, &data, Some(&ckpt_dir))?;
            report.save(&dir)?;
            if let Some((probe, m, bank, labels)) = &transfer {
                let r = evaluate_probe(&ckpt, m, bank, labels, probe)?;
                write_probe(&r, &dir)?;
            }
            Ok(())
        })
        .collect();
    results.into_iter().collect()
}

fn write_probe(r: &ProbeResult, dir: &Path) -> Result<()> {
    r.write_json(&dir.join("probe.json"))?;
    let mut buf = Vec::new();
    r.write_per_class_csv(&mut buf)?;
    write_file(&dir.join("per_class_recall.csv"), buf)
}

pub struct ProbeOptions {
    pub max_test: usize,
    pub splits: usize,
    pub iterations: u64,
    pub layer: Option<String>,
    pub seed: u64,
}

impl ProbeOptions {
    fn config(&self, n_train: usize) -> ProbeConfig {
        ProbeConfig {
            iterations: self.iterations,
            max_test_per_class: self.max_test,
            n_splits: self.splits,
            layer: self.layer.clone(),
            ..ProbeConfig::standard(n_train, self.seed)
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    require_input(path)?;
    Ok(Checkpoint::load(path)?)
}

pub fn probe(checkpoint: &Path, manifest: &Path, n_train: &[usize], opts: &ProbeOptions, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let (m, bank) = load_manifest(manifest, SplitTag::Test)?;
    let labels = ClassLabels::from_leaves(m.samples.iter().map(|s| s.leaf_id.as_str()));
    let mut results = BTreeMap::new();
    for &n in n_train {
        let r = evaluate_probe(&ckpt, &m, &bank, &labels, &opts.config(n))?;
        log::info!("n_train {n}: mean class recall {:.4} ± {:.4}", r.mean, r.std);
        results.insert(n, r);
    }
    create_dir(out)?;
    for (n, r) in &results {
        let dir = out.join(format!("probe_n{n}"));
        create_dir(&dir)?;
        write_probe(r, &dir)?;
    }
    let summary = csv_bytes(
        &["n_train", "mean", "std"],
        results.iter().map(|(n, r)| vec![n.to_string(), format!("{:.6}", r.mean), format!("{:.6}", r.std)]),
    )?;
    write_file(&out.join("summary.csv"), summary)
}

pub fn sweep(checkpoints: &[PathBuf], manifest: &Path, n_train: usize, dataset: &str, opts: &ProbeOptions, out: &Path) -> Result<()> {
    let mut loaded = checkpoints
        .iter()
        .map(|p| Ok((p.clone(), load_checkpoint(p)?)))
        .collect::<Result<Vec<_>>>()?;
    loaded.sort_by_key(|(_, c)| c.iteration);
    if let Some(w) = loaded.windows(2).find(|w| w[0].1.iteration == w[1].1.iteration) {
        return Err(CliError::config(format!(
            "{} and {} share iteration {}",
            w[0].0.display(),
            w[1].0.display(),
            w[0].1.iteration
        )));
    }
    let (m, bank) = load_manifest(manifest, SplitTag::Test)?;
    let labels = ClassLabels::from_leaves(m.samples.iter().map(|s| s.leaf_id.as_str()));
    let (paths, ckpts): (Vec<PathBuf>, Vec<Checkpoint>) = loaded.into_iter().unzip();
    let report = checkpoint_sweep(&ckpts, &m, &bank, &labels, &opts.config(n_train), dataset)?;
    let means = report.series(dataset, "mean_class_recall");
    let stds = report.series(dataset, "mean_class_recall_std");
    let rows = paths.iter().zip(means.iter().zip(&stds)).map(|(p, ((it, mean), (_, std)))| {
        vec![
            dataset.to_string(),
            it.to_string(),
            p.display().to_string(),
            format!("{mean:.6}"),
            format!("{std:.6}"),
        ]
    });
    let bytes = csv_bytes(&["dataset", "iteration", "checkpoint", "mean_class_recall", "std"], rows)?;
    create_dir(out)?;
    write_file(&out.join("sweep.csv"), bytes)
}
