//! End-to-end experiments: configuration, per-fold training and evaluation,
//! and cross-validation with reports.
//!
//! Configuration is a TOML document. Every field can be overridden with a
//! dotted `key=value` pair (`train.base_lr=0.005`); values are parsed as TOML
//! and fall back to plain strings. `[train]` holds overrides applied on top
//! of the preset named by `train_preset`. Sub-seeds (`augment.seed`,
//! `train.seed`, `tta.seed`) default to the top-level `seed`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{
    self, build_training_set, channel_means, plan_augmentation, AugmentConfig, AugmentPlan, Provenance,
};
use crate::data::{decode_all, load_manifest_with, CellRecord, DatasetManifest, LabelColorMap, ManifestOptions, Task};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_fold, predict_fold, predictions_csv, CellPrediction, EvalReport, FoldEval, Predictor, TTAConfig,
};
use crate::nn::{init_weights, presets, Checkpoint, InitPolicy, Network, NetworkSpec};
use crate::rng;
use crate::split::{audit_leakage, fold_split, make_folds, FoldPlan, LeakageReport};
use crate::train::{train, History, TrainConfig, TrainData};

/// Environment variables with this prefix override config fields:
/// `CELLMORPH__TRAIN__BASE_LR=0.005` sets `train.base_lr`.
pub const ENV_PREFIX: &str = "CELLMORPH__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub manifest: PathBuf,
    /// Treat every cell as its own patient (no `patient` column needed).
    pub cell_as_patient: bool,
    /// 3 (RGB) or 5 (RGB, nucleus, cytoplasm).
    pub channels: usize,
    pub task: Task,
    /// Preset name (`cellnet-s`, `cellnet-i`) or path to a JSON network spec.
    pub network: String,
    pub output: PathBuf,
    /// Fold plan to reuse; created there when missing.
    #[serde(default)]
    pub fold_plan: Option<PathBuf>,
    pub k: usize,
    /// Subset of folds to run; all when absent.
    #[serde(default)]
    pub folds: Option<Vec<usize>>,
    /// Worker threads; 0 uses every core, 1 runs single-threaded.
    pub threads: usize,
    pub train_preset: String,
    #[serde(default)]
    pub colors: LabelColorMap,
    #[serde(default)]
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub init: InitPolicy,
    #[serde(default)]
    pub tta: TTAConfig,
}

fn default_table() -> toml::Table {
    let text = r#"
        seed = 0
        manifest = "manifest.csv"
        cell_as_patient = false
        channels = 5
        task = "2class"
        network = "cellnet-s"
        output = "runs/experiment"
        k = 5
        threads = 0
        train_preset = "cellnet-s"
        [augment]
        patch_size = 64
        max_translation = 4
        target_per_class = 600
        out_size = 64
        [init]
        gaussian_std = 0.1
    "#;
    text.parse().expect("default table parses")
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let entry = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// `key=value` pairs from environment variables carrying [`ENV_PREFIX`].
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            Some((rest.split("__").map(str::to_lowercase).collect::<Vec<_>>().join("."), v))
        })
        .collect();
    out.sort();
    out
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not of the form key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// A `key=value` override whose value is always taken as a string.
pub fn string_override(key: &str, value: &str) -> (String, String) {
    (key.to_string(), toml::Value::String(value.to_string()).to_string())
}

impl ExperimentConfig {
    /// Parses a config document and applies overrides in order.
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut table = default_table();
        merge(&mut table, user);
        for (k, v) in overrides {
            set_dotted(&mut table, k, parse_value(v))?;
        }
        Self::resolve(table)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    fn resolve(mut table: toml::Table) -> Result<Self> {
        let preset_name = table
            .get("train_preset")
            .and_then(toml::Value::as_str)
            .unwrap_or("cellnet-s")
            .to_string();
        let preset = TrainConfig::preset(&preset_name)
            .ok_or_else(|| Error::Config(format!("train_preset: unknown preset `{preset_name}`")))?;
        let seed = table.get("seed").cloned().unwrap_or(toml::Value::Integer(0));
        let mut train_table = toml::Table::try_from(&preset).map_err(|e| Error::Config(e.to_string()))?;
        train_table.insert("seed".into(), seed.clone());
        match table.remove("train") {
            Some(toml::Value::Table(t)) => merge(&mut train_table, t),
            Some(_) => return Err(Error::Config("train: must be a table".into())),
            None => {}
        }
        table.insert("train".into(), toml::Value::Table(train_table));

        for section in ["augment", "train", "tta"] {
            let t = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if let Some(t) = t.as_table_mut() {
                t.entry("seed".to_string()).or_insert(seed.clone());
            }
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 3 && self.channels != 5 {
            return Err(Error::Config(format!(
                "channels: must be 3 or 5, got {}",
                self.channels
            )));
        }
        if self.k < 2 {
            return Err(Error::Config(format!("k: must be at least 2, got {}", self.k)));
        }
        if let Some(bad) = self.folds.iter().flatten().find(|&&f| f >= self.k) {
            return Err(Error::Config(format!(
                "folds: fold {bad} out of range for k = {}",
                self.k
            )));
        }
        self.augment.validate()?;
        self.train.validate(self.augment.out_size)?;
        self.tta.validate()?;
        let spec = self.network_spec()?;
        let n = spec.validate()?;
        if spec.input.channels != self.channels {
            return Err(Error::Config(format!(
                "network: input has {} channels but channels = {}",
                spec.input.channels, self.channels
            )));
        }
        if n != self.task.n_classes() {
            return Err(Error::Config(format!(
                "network: {n} outputs but task {} needs {}",
                self.task,
                self.task.n_classes()
            )));
        }
        if spec.input.height != self.train.crop || spec.input.width != self.train.crop {
            return Err(Error::Config(format!(
                "network: input is {}x{} but train.crop = {}",
                spec.input.height, spec.input.width, self.train.crop
            )));
        }
        Ok(())
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        match presets::by_name(&self.network, self.train.crop, self.channels, self.task.n_classes()) {
            Some(spec) => Ok(spec),
            None => NetworkSpec::load(Path::new(&self.network)),
        }
    }

    pub fn manifest_options(&self) -> ManifestOptions {
        ManifestOptions {
            cell_as_patient: self.cell_as_patient,
            ..Default::default()
        }
    }

    pub fn fold_indices(&self) -> Vec<usize> {
        self.folds.clone().unwrap_or_else(|| (0..self.k).collect())
    }
}

/// A loaded manifest with its decoded cells.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<CellRecord>,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let manifest = load_manifest_with(&cfg.manifest, cfg.manifest_options())?;
    let records = decode_all(&manifest, &cfg.colors)?;
    Ok(Dataset { manifest, records })
}

/// Reuses `cfg.fold_plan` when it exists, otherwise builds a plan (and saves
/// it there when a path is configured).
pub fn load_or_make_folds(cfg: &ExperimentConfig, manifest: &DatasetManifest) -> Result<FoldPlan> {
    if let Some(path) = &cfg.fold_plan {
        if path.exists() {
            let plan = FoldPlan::load(path)?;
            if plan.k != cfg.k {
                return Err(Error::Config(format!(
                    "fold_plan: {} has k = {}, config has k = {}",
                    path.display(),
                    plan.k,
                    cfg.k
                )));
            }
            for e in &manifest.entries {
                plan.fold_of(&e.patient_id)?;
            }
            return Ok(plan);
        }
    }
    let plan = make_folds(manifest, cfg.k, cfg.seed)?;
    if let Some(path) = &cfg.fold_plan {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        plan.save(path)?;
    }
    Ok(plan)
}

/// Augmentation plan keyed by task target, for the given training cells.
pub fn plan_for(cfg: &ExperimentConfig, records: &[CellRecord], cells: &[usize]) -> Result<AugmentPlan> {
    let mut counts = BTreeMap::new();
    for &c in cells {
        *counts
            .entry(cfg.task.target(records[c].class_label) as u8)
            .or_insert(0usize) += 1;
    }
    plan_augmentation(&counts, &cfg.augment)
}

#[derive(Debug, Clone)]
pub struct FoldRun {
    pub fold: usize,
    pub history: History,
    pub best_epoch: usize,
    pub best: Checkpoint,
    pub predictions: Vec<CellPrediction>,
    pub eval: FoldEval,
    pub leakage: LeakageReport,
    pub plan: AugmentPlan,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

/// Trains on every fold but `fold`, evaluates on `fold`, and writes the
/// fold's artifacts to `dir`.
pub fn run_fold(cfg: &ExperimentConfig, ds: &Dataset, folds: &FoldPlan, fold: usize, dir: &Path) -> Result<FoldRun> {
    let (train_cells, val_cells) = fold_split(folds, &ds.manifest, fold)?;
    if train_cells.is_empty() || val_cells.is_empty() {
        return Err(Error::Config(format!(
            "fold {fold} leaves an empty training or validation side"
        )));
    }
    let plan = plan_for(cfg, &ds.records, &train_cells)?;
    let task = cfg.task;
    let set = build_training_set(
        &ds.records,
        &train_cells,
        |r| task.target(r.class_label) as u8,
        &plan,
        &cfg.augment,
    )?;

    let val_prov: Vec<Provenance> = val_cells
        .iter()
        .map(|&c| Provenance {
            cell: c,
            patient_id: ds.records[c].patient_id.clone(),
            rotation_deg: 0.0,
            translation: (0, 0),
        })
        .collect();
    let leakage = audit_leakage(folds, &set.provenance(&ds.records, &cfg.augment), &val_prov)?;
    if !leakage.is_clean() {
        return Err(Error::Leakage(format!("fold {fold}: {leakage:?}")));
    }

    let means = channel_means(&ds.records, &train_cells, &cfg.augment)?;
    let mut net = Network::build(&cfg.network_spec()?)?;
    init_weights(
        &mut net,
        &cfg.init,
        &mut rng::stream(cfg.seed, &[rng::TAG_INIT, fold as u64]),
    )?;
    let data = TrainData {
        records: &ds.records,
        train: &set,
        val_cells: &val_cells,
        augment: &cfg.augment,
        task,
        channels: cfg.channels,
        means,
    };
    log::info!(
        "fold {fold}: {} training samples from {} cells, {} validation cells",
        set.len(),
        train_cells.len(),
        val_cells.len()
    );
    let mut outcome = train(&mut net, &data, &cfg.train)?;
    if let serde_json::Value::Object(m) = &mut outcome.best.metadata {
        m.insert("fold".into(), fold.into());
    }
    let best_net = outcome.best.to_network()?;
    let predictor = Predictor {
        net: &best_net,
        augment: &cfg.augment,
        means: &means,
        tta: &cfg.tta,
    };
    let predictions = predict_fold(&predictor, &ds.records, &val_cells, task)?;
    let eval = evaluate_fold(fold, task, &predictions)?;

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    outcome.history.write_csv(&dir.join("history.csv"))?;
    outcome.best.save(&dir.join("best.ckpt"))?;
    write(&dir.join("predictions.csv"), predictions_csv(&predictions))?;
    write(&dir.join("augment_plan.json"), json(&plan))?;
    write(&dir.join("leakage.json"), json(&leakage))?;
    Ok(FoldRun {
        fold,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        best: outcome.best,
        predictions,
        eval,
        leakage,
        plan,
    })
}

/// Runs `f` on a pool with `threads` workers (0 keeps the global pool).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("threads: {e}")))?;
    Ok(pool.install(f))
}

fn prepare_output(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    write(&cfg.output.join("config.toml"), cfg.to_toml())
}

#[derive(Debug, Clone)]
pub struct CrossvalResult {
    pub folds: FoldPlan,
    pub runs: Vec<FoldRun>,
    pub report: EvalReport,
}

/// Split, then per fold augment, train and evaluate; aggregate into a report
/// written under `cfg.output`.
pub fn run_crossval(cfg: &ExperimentConfig) -> Result<CrossvalResult> {
    cfg.validate()?;
    with_threads(cfg.threads, || {
        prepare_output(cfg)?;
        let ds = load_dataset(cfg)?;
        let folds = load_or_make_folds(cfg, &ds.manifest)?;
        folds.save(&cfg.output.join("folds.json"))?;
        let runs = cfg
            .fold_indices()
            .par_iter()
            .map(|&f| run_fold(cfg, &ds, &folds, f, &cfg.output.join(format!("fold_{f}"))))
            .collect::<Result<Vec<_>>>()?;
        let report = EvalReport::new(cfg.task, cfg.channels, runs.iter().map(|r| r.eval.clone()).collect());
        report.write(&cfg.output)?;
        write(&cfg.output.join("summary.txt"), report.to_string())?;
        Ok(CrossvalResult { folds, runs, report })
    })?
}

/// Trains and evaluates a single fold under `cfg.output/fold_N`.
pub fn run_train(cfg: &ExperimentConfig, fold: usize) -> Result<FoldRun> {
    cfg.validate()?;
    with_threads(cfg.threads, || {
        prepare_output(cfg)?;
        let ds = load_dataset(cfg)?;
        let folds = load_or_make_folds(cfg, &ds.manifest)?;
        folds.save(&cfg.output.join("folds.json"))?;
        let run = run_fold(cfg, &ds, &folds, fold, &cfg.output.join(format!("fold_{fold}")))?;
        let report = EvalReport::new(cfg.task, cfg.channels, vec![run.eval.clone()]);
        report.write(&cfg.output.join(format!("fold_{fold}")))?;
        Ok(run)
    })?
}

/// Evaluates a saved checkpoint on the validation cells of `fold`, writing
/// the report to `out`.
pub fn run_eval(cfg: &ExperimentConfig, checkpoint: &Path, fold: usize, out: &Path) -> Result<EvalReport> {
    with_threads(cfg.threads, || {
        let ckpt = Checkpoint::load(checkpoint)?;
        let net = ckpt.to_network()?;
        let means = ckpt
            .norm_means
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no normalization means".into()))?;
        let ds = load_dataset(cfg)?;
        let folds = load_or_make_folds(cfg, &ds.manifest)?;
        let (_, val) = fold_split(&folds, &ds.manifest, fold)?;
        let predictor = Predictor {
            net: &net,
            augment: &cfg.augment,
            means: &means,
            tta: &cfg.tta,
        };
        let task = if net.n_classes() == 2 {
            Task::TwoClass
        } else {
            Task::SevenClass
        };
        let preds = predict_fold(&predictor, &ds.records, &val, task)?;
        let report = EvalReport::new(task, net.input_channels(), vec![evaluate_fold(fold, task, &preds)?]);
        report.write(out)?;
        write(&out.join("predictions.csv"), predictions_csv(&preds))?;
        Ok(report)
    })?
}

/// Builds the full augmented set of all cells and writes it to `dir`.
pub fn materialize_dataset(cfg: &ExperimentConfig, ds: &Dataset, dir: &Path) -> Result<usize> {
    let cells: Vec<usize> = (0..ds.records.len()).collect();
    let plan = plan_for(cfg, &ds.records, &cells)?;
    let task = cfg.task;
    let set = build_training_set(
        &ds.records,
        &cells,
        |r| task.target(r.class_label) as u8,
        &plan,
        &cfg.augment,
    )?;
    let index = augment::materialize(&ds.records, &set, &cfg.augment, dir)?;
    Ok(index.samples.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_resolve() {
        let cfg = ExperimentConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(cfg.channels, 5);
        assert_eq!(
            cfg.train,
            TrainConfig {
                seed: 0,
                ..TrainConfig::preset("cellnet-s").unwrap()
            }
        );
        assert_eq!(cfg.init.gaussian_std, 0.1);
    }

    #[test]
    fn sub_seeds_follow_seed_unless_given() {
        let cfg = ExperimentConfig::from_toml_str("seed = 9\n[tta]\nseed = 3\n", &[]).unwrap();
        assert_eq!((cfg.augment.seed, cfg.train.seed, cfg.tta.seed), (9, 9, 3));
    }

    #[test]
    fn overrides_apply_in_order_on_top_of_preset() {
        let cfg = ExperimentConfig::from_toml_str(
            "[train]\nepochs = 3\n",
            &ov(&[
                ("train.base_lr", "0.5"),
                ("train.base_lr", "0.25"),
                ("task", "7class"),
                ("channels", "3"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.base_lr, 0.25);
        assert_eq!(
            cfg.train.batch_size,
            TrainConfig::preset("cellnet-s").unwrap().batch_size
        );
        assert_eq!(cfg.task, Task::SevenClass);
        assert_eq!(cfg.network_spec().unwrap().input.channels, 3);
    }

    #[test]
    fn env_keys_map_to_dotted_paths() {
        let vars = vec![
            ("CELLMORPH__TRAIN__BASE_LR".to_string(), "0.1".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ];
        assert_eq!(env_overrides(vars), ov(&[("train.base_lr", "0.1")]));
    }

    #[test]
    fn field_level_errors() {
        let msg =
            |text: &str, o: &[(&str, &str)]| ExperimentConfig::from_toml_str(text, &ov(o)).unwrap_err().to_string();
        assert!(msg("channels = 4", &[]).contains("channels"));
        assert!(msg("", &[("train.crop", "70")]).contains("crop"));
        assert!(msg("bogus = 1", &[]).contains("bogus"));
        assert!(msg("", &[("train.momentum", "1.5")]).contains("momentum"));
        assert!(msg("train_preset = \"vgg\"", &[]).contains("train_preset"));
        assert!(msg("k = 3\nfolds = [3]", &[]).contains("folds"));
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg =
            ExperimentConfig::from_toml_str("seed = 4\nfold_plan = \"f.json\"", &ov(&[("tta.n_crops", "1")])).unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn tiny_crossval_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_cells: 48,
            image_size: 32,
            ..Default::default()
        };
        generate_synthetic(&spec, &LabelColorMap::default(), &dir.path().join("data")).unwrap();
        let out = dir.path().join("out");
        let cfg = ExperimentConfig::from_toml_str(
            "",
            &ov(&[
                (
                    "manifest",
                    &format!("\"{}\"", dir.path().join("data/manifest.csv").display()),
                ),
                ("output", &format!("\"{}\"", out.display())),
                ("k", "2"),
                ("threads", "1"),
                ("augment.patch_size", "32"),
                ("augment.out_size", "32"),
                ("augment.max_translation", "2"),
                ("augment.target_per_class", "30"),
                ("train.crop", "28"),
                ("train.epochs", "2"),
                ("train.batch_size", "16"),
                ("tta.n_random_views", "2"),
                ("tta.n_crops", "1"),
            ]),
        )
        .unwrap();
        let res = run_crossval(&cfg).unwrap();
        assert_eq!(res.runs.len(), 2);
        let validated: usize = res.runs.iter().map(|r| r.predictions.len()).sum();
        assert_eq!(validated, 48);
        for f in [
            "config.toml",
            "folds.json",
            "report.json",
            "summary.csv",
            "summary.txt",
            "fold_0/history.csv",
            "fold_1/best.ckpt",
        ] {
            assert!(out.join(f).exists(), "{f}");
        }
        let back = ExperimentConfig::load(Some(&out.join("config.toml")), &[]).unwrap();
        assert_eq!(back, cfg);
    }
}
