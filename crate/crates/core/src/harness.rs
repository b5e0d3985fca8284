//! Experiment orchestration: scenario files, drop caches, baseline and policy
//! evaluation, training runs, self-validation and result export.
//!
//! Every file written here carries the configuration hash (a `# config_hash=`
//! comment line in CSV files, a `config_hash` field in JSON files, the header
//! of checkpoints). Nothing time-dependent is written, so reruns with the same
//! configuration reproduce identical bytes.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{ExperimentConfig, Scenario};
use crate::metrics::ObjectiveSpec;
use crate::neural::ModelParams;
use crate::rng::{self, tag};
use crate::scalable::{build_neighborhoods, DistributedPolicy, DistributedTrainer, Template};
use crate::strategy::{Learned, MasterOnly, PilotBased, ResultRecord, Strategy, TopM, DEFAULT_MU};
use crate::training::{epoch_summaries, evaluate_policy, EvalSummary, PolicyConfig, TrainConfig, Trainer};
use crate::validation;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 1000,
            n_test: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalableConfig {
    pub distributed: bool,
    /// `"3x3"`, `"5x5"`, ... or `"full"`.
    pub template: String,
}

impl Default for ScalableConfig {
    fn default() -> Self {
        Self {
            distributed: false,
            template: "5x5".into(),
        }
    }
}

/// Complete run configuration as read from a scenario file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub data: DataConfig,
    pub model: PolicyConfig,
    pub train: TrainConfig,
    pub scalable: ScalableConfig,
}

const EXPERIMENT_KEYS: &[&str] = &[
    "area_side",
    "num_aps",
    "num_ues",
    "antennas",
    "carrier_ghz",
    "bandwidth_hz",
    "tau_c",
    "tau_p",
    "sigma_sf_db",
    "delta_sf",
    "height_diff",
    "noise_power_dbm",
    "eta",
    "rho_max",
    "grid_jitter_frac",
    "seed",
];
const DATA_KEYS: &[&str] = &["n_train", "n_test"];
const MODEL_KEYS: &[&str] = &["hidden", "fc_hidden", "pilot_input"];
const TRAIN_KEYS: &[&str] = &["epochs", "batch_size", "objective", "lr", "master_forcing", "eval_every", "seed"];
const OBJECTIVE_KEYS: &[&str] = &["kind", "weights", "lambda"];
const SCALABLE_KEYS: &[&str] = &["distributed", "template"];

/// Dotted paths of every key not understood by [`RunConfig`].
fn unknown_keys(doc: &toml::Table) -> Vec<String> {
    let mut out = Vec::new();
    let sections: [(&str, &[&str]); 5] = [
        ("experiment", EXPERIMENT_KEYS),
        ("data", DATA_KEYS),
        ("model", MODEL_KEYS),
        ("train", TRAIN_KEYS),
        ("scalable", SCALABLE_KEYS),
    ];
    for (key, value) in doc {
        let Some((_, known)) = sections.iter().find(|(s, _)| s == key) else {
            out.push(key.clone());
            continue;
        };
        let Some(table) = value.as_table() else { continue };
        for (k, v) in table {
            if !known.contains(&k.as_str()) {
                out.push(format!("{key}.{k}"));
            } else if key == "train" && k == "objective" {
                if let Some(obj) = v.as_table() {
                    out.extend(
                        obj.keys()
                            .filter(|o| !OBJECTIVE_KEYS.contains(&o.as_str()))
                            .map(|o| format!("train.objective.{o}")),
                    );
                }
            }
        }
    }
    out
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e| Error::Parse(format!("scenario file: {e}")))?;
        let unknown = unknown_keys(&doc);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let cfg: RunConfig = doc.try_into().map_err(|e| Error::Parse(format!("scenario file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment.validate()?;
        self.train.validate()?;
        if self.model.hidden == 0 || self.model.fc_hidden.contains(&0) {
            return Err(Error::Config("model widths must be >= 1".into()));
        }
        if self.data.n_test == 0 {
            return Err(Error::Config("data.n_test must be >= 1".into()));
        }
        if let ObjectiveSpec::Sum { weights: Some(w) } = &self.train.objective {
            if w.len() != self.experiment.num_ues {
                return Err(Error::Config(format!(
                    "{} SUM weights for {} UEs",
                    w.len(),
                    self.experiment.num_ues
                )));
            }
        }
        self.template()?;
        Ok(())
    }

    pub fn template(&self) -> Result<Template> {
        self.scalable.template.parse()
    }

    /// SHA-256 of the canonical (sorted-key) JSON form.
    pub fn hash(&self) -> String {
        canonical_hash(self)
    }

    /// Hash of the parts that determine the drop cache.
    pub fn data_hash(&self) -> String {
        canonical_hash(&(&self.experiment, &self.data))
    }
}

fn canonical_hash<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("plain data serializes");
    let text = serde_json::to_string(&v).expect("JSON value serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn hash_bytes(hex_hash: &str) -> [u8; 32] {
    let mut out = [0u8; 32];
    if let Ok(bytes) = hex::decode(hex_hash) {
        let n = bytes.len().min(32);
        out[..n].copy_from_slice(&bytes[..n]);
    }
    out
}

/// Command-line adjustments applied on top of the scenario file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strategy: Option<String>,
    pub m: Option<usize>,
    pub objective: Option<String>,
    pub lambda: Option<f64>,
    pub tau_p: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub distributed: bool,
    pub template: Option<String>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            cfg.experiment.seed = seed;
            cfg.train.seed = seed;
        }
        if let Some(t) = self.tau_p {
            cfg.experiment.tau_p = t;
        }
        if let Some(name) = &self.objective {
            cfg.train.objective = match name.as_str() {
                "sum" => ObjectiveSpec::sum(),
                "balance" => ObjectiveSpec::Balance {
                    lambda: self.lambda.unwrap_or(0.04),
                },
                "min" => ObjectiveSpec::Min,
                other => {
                    return Err(Error::Config(format!(
                        "unknown objective '{other}' (expected sum, balance or min)"
                    )))
                }
            };
        } else if let (Some(l), ObjectiveSpec::Balance { lambda }) = (self.lambda, &mut cfg.train.objective) {
            *lambda = l;
        }
        if self.distributed {
            cfg.scalable.distributed = true;
        }
        if let Some(t) = &self.template {
            cfg.scalable.template = t.clone();
        }
        cfg.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Generate,
    Baseline,
    Train,
    Eval,
    Validate,
}

/// Baseline strategies by registry name: `pilot`, `master`, `top` (with `m`)
/// or `topN`.
pub fn baseline_strategy(name: &str, m: Option<usize>) -> Result<Box<dyn Strategy>> {
    match name {
        "pilot" => Ok(Box::new(PilotBased)),
        "master" => Ok(Box::new(MasterOnly)),
        "top" => Ok(Box::new(TopM(m.unwrap_or(4)))),
        other => match other.strip_prefix("top").and_then(|n| n.parse().ok()) {
            Some(n) => Ok(Box::new(TopM(n))),
            None => Err(Error::Config(format!(
                "unknown strategy '{other}' (expected pilot, master, top, topN or all)"
            ))),
        },
    }
}

/// Standard right-continuous empirical CDF: `(value, fraction <= value)` at
/// every distinct value.
pub fn empirical_cdf(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::Domain("empirical CDF of an empty sample".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Domain("empirical CDF of a sample containing NaN".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *x => last.1 = frac,
            _ => out.push((*x, frac)),
        }
    }
    Ok(out)
}

/// Per-strategy means, in order of first appearance.
pub fn summarize(records: &[ResultRecord]) -> Vec<EvalSummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in records {
        if !names.contains(&r.strategy.as_str()) {
            names.push(&r.strategy);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let group: Vec<ResultRecord> = records.iter().filter(|r| r.strategy == name).cloned().collect();
            EvalSummary::from_records(name, &group)
        })
        .collect()
}

/// Aligned plain-text table of summaries.
pub fn render_table(summaries: &[EvalSummary]) -> String {
    let width = summaries.iter().map(|s| s.strategy.len()).max().unwrap_or(8).max(8);
    let mut out = format!(
        "{:<width$}  {:>6}  {:>10}  {:>10}  {:>11}  {:>10}\n",
        "strategy", "drops", "SE sum", "SE min", "connections", "objective"
    );
    for s in summaries {
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>10.4}  {:>10.4}  {:>11.3}  {:>10.4}",
            s.strategy, s.drops, s.mean_se_sum, s.mean_se_min, s.mean_connections, s.mean_objective
        );
    }
    out
}

pub fn records_csv(records: &[ResultRecord], hash: &str) -> String {
    let k = records.first().map_or(0, |r| r.se.len());
    let mut s = format!("# config_hash={hash}\ndrop,strategy,seed,se_sum,se_min,connections,objective");
    for i in 0..k {
        let _ = write!(s, ",se_{i}");
    }
    s.push('\n');
    for r in records {
        let _ = write!(
            s,
            "{},{},{},{:.17e},{:.17e},{},{:.17e}",
            r.drop, r.strategy, r.seed, r.se_sum, r.se_min, r.connections, r.objective
        );
        for v in &r.se {
            let _ = write!(s, ",{v:.17e}");
        }
        s.push('\n');
    }
    s
}

/// CDFs of SE sum, minimum SE, per-UE SE and connection count per strategy.
pub fn cdf_csv(records: &[ResultRecord], hash: &str) -> Result<String> {
    let mut s = format!("# config_hash={hash}\nstrategy,metric,value,fraction\n");
    for summary in summarize(records) {
        let group: Vec<&ResultRecord> = records.iter().filter(|r| r.strategy == summary.strategy).collect();
        let metrics: [(&str, Vec<f64>); 4] = [
            ("se_sum", group.iter().map(|r| r.se_sum).collect()),
            ("se_min", group.iter().map(|r| r.se_min).collect()),
            ("ue_se", group.iter().flat_map(|r| r.se.iter().copied()).collect()),
            ("connections", group.iter().map(|r| r.connections as f64).collect()),
        ];
        for (name, values) in metrics {
            for (v, f) in empirical_cdf(&values)? {
                let _ = writeln!(s, "{},{name},{v:.17e},{f:.17e}", summary.strategy);
            }
        }
    }
    Ok(s)
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    config_hash: &'a str,
    seed: u64,
    objective: &'a ObjectiveSpec,
    summaries: &'a [EvalSummary],
}

fn write_file(path: &Path, contents: &[u8]) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, hash: &str) -> Result<PathBuf> {
    write_file(path, &params.encode(&hash_bytes(hash)))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (params, hash) = ModelParams::decode(&bytes)?;
    Ok((params, hex::encode(hash)))
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    data_hash: String,
    scenario: Scenario,
}

pub const CACHE_FILE: &str = "scenario.json";

fn load_cache(cfg: &RunConfig, out_dir: &Path) -> Result<Scenario> {
    let path = out_dir.join(CACHE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Config(format!(
            "no drop cache at {}; run the `generate` command with the same config and --out-dir first",
            path.display()
        )),
        _ => Error::io(&path, e),
    })?;
    let cache: CacheFile =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if cache.data_hash != cfg.data_hash() {
        return Err(Error::Config(format!(
            "drop cache {} was generated with a different experiment/data configuration; rerun `generate`",
            path.display()
        )));
    }
    Ok(cache.scenario)
}

fn distributed_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("policy_distributed")
}

fn ap_checkpoint(dir: &Path, l: usize) -> PathBuf {
    dir.join(format!("ap_{l:03}.ckpt"))
}

/// Everything a command produced.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub files: Vec<PathBuf>,
    pub summaries: Vec<EvalSummary>,
    pub checks: Vec<validation::CheckResult>,
    pub config_hash: String,
}

fn export_evaluation(
    records: &[ResultRecord],
    cfg: &RunConfig,
    hash: &str,
    out_dir: &Path,
    prefix: &str,
    art: &mut Artifacts,
) -> Result<()> {
    let summaries = summarize(records);
    art.files
        .push(write_file(&out_dir.join(format!("{prefix}_records.csv")), records_csv(records, hash).as_bytes())?);
    art.files
        .push(write_file(&out_dir.join(format!("{prefix}_cdf.csv")), cdf_csv(records, hash)?.as_bytes())?);
    let json = serde_json::to_string_pretty(&SummaryFile {
        config_hash: hash,
        seed: cfg.experiment.seed,
        objective: &cfg.train.objective,
        summaries: &summaries,
    })
    .expect("plain data serializes");
    art.files
        .push(write_file(&out_dir.join(format!("{prefix}_summary.json")), json.as_bytes())?);
    art.summaries = summaries;
    Ok(())
}

/// Runs one command. `config_path = None` uses the built-in defaults.
pub fn run_experiment(
    config_path: Option<&Path>,
    command: Command,
    overrides: &Overrides,
    out_dir: &Path,
) -> Result<Artifacts> {
    let mut cfg = match config_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    run_with_config(&cfg, command, overrides, out_dir)
}

pub fn run_with_config(cfg: &RunConfig, command: Command, overrides: &Overrides, out_dir: &Path) -> Result<Artifacts> {
    let hash = cfg.hash();
    let mut art = Artifacts {
        config_hash: hash.clone(),
        ..Default::default()
    };
    let exp = &cfg.experiment;
    match command {
        Command::Generate => {
            let scenario = Scenario::generate(exp, cfg.data.n_train, cfg.data.n_test)?;
            let json = serde_json::to_string(&CacheFile {
                data_hash: cfg.data_hash(),
                scenario,
            })
            .expect("plain data serializes");
            art.files.push(write_file(&out_dir.join(CACHE_FILE), json.as_bytes())?);
        }
        Command::Baseline => {
            let scenario = load_cache(cfg, out_dir)?;
            let names: Vec<String> = match overrides.strategy.as_deref() {
                None | Some("all") => vec!["pilot".into(), "top4".into(), "top3".into()],
                Some(one) => vec![one.to_string()],
            };
            let mut records = Vec::new();
            for name in names {
                let strategy = baseline_strategy(&name, overrides.m)?;
                let (_, r) = evaluate_policy(strategy.as_ref(), &scenario, exp, &cfg.train.objective, cfg.data.n_test)?;
                records.extend(r);
            }
            export_evaluation(&records, cfg, &hash, out_dir, "baseline", &mut art)?;
        }
        Command::Train => {
            let scenario = load_cache(cfg, out_dir)?;
            if cfg.scalable.distributed {
                train_distributed(cfg, &hash, &scenario, out_dir, &mut art)?;
            } else {
                train_centralized(cfg, &hash, &scenario, out_dir, &mut art)?;
            }
        }
        Command::Eval => {
            let scenario = load_cache(cfg, out_dir)?;
            let strategy = load_policy(cfg, overrides.checkpoint.as_deref(), &scenario, out_dir)?;
            let (_, records) = evaluate_policy(strategy.as_ref(), &scenario, exp, &cfg.train.objective, cfg.data.n_test)?;
            export_evaluation(&records, cfg, &hash, out_dir, "eval", &mut art)?;
        }
        Command::Validate => {
            let checks = validation::run_all(exp.seed)?;
            #[derive(Serialize)]
            struct ValidateFile<'a> {
                config_hash: &'a str,
                seed: u64,
                checks: &'a [validation::CheckResult],
            }
            let json = serde_json::to_string_pretty(&ValidateFile {
                config_hash: &hash,
                seed: exp.seed,
                checks: &checks,
            })
            .expect("plain data serializes");
            art.files.push(write_file(&out_dir.join("validate.json"), json.as_bytes())?);
            art.checks = checks;
        }
    }
    Ok(art)
}

fn train_centralized(cfg: &RunConfig, hash: &str, scenario: &Scenario, out_dir: &Path, art: &mut Artifacts) -> Result<()> {
    let exp = &cfg.experiment;
    let shape = cfg.model.shape(exp.num_aps, exp.tau_p);
    log::info!("policy with {} parameters", shape.param_count());
    let params = ModelParams::init(&shape, &mut rng::stream(cfg.train.seed, &[tag::INIT]))?;
    let mut trainer = Trainer::new(exp.clone(), cfg.train.clone(), params)?;
    let mut written = Vec::new();
    let outcome = trainer.run(scenario, |epoch, params| {
        if epoch + 1 < cfg.train.epochs {
            written.push(save_checkpoint(&out_dir.join(format!("policy_epoch{epoch:04}.ckpt")), params, hash)?);
        }
        Ok(())
    });
    art.files.extend(written);
    art.files
        .push(write_file(&out_dir.join("train_log.csv"), with_hash(&trainer.log_csv(), hash).as_bytes())?);
    // On divergence this is the last finite parameter set.
    art.files
        .push(save_checkpoint(&out_dir.join("policy.ckpt"), &trainer.params, hash)?);
    outcome?;
    write_train_summary(cfg, hash, &trainer.log, out_dir, art)?;
    let (summary, records) = evaluate_policy(
        &Learned::new(trainer.params.clone(), format!("learned-{}", cfg.train.objective.name())),
        scenario,
        exp,
        &cfg.train.objective,
        cfg.data.n_test,
    )?;
    log::info!("test mean SE sum {:.4}", summary.mean_se_sum);
    export_evaluation(&records, cfg, hash, out_dir, "train_eval", art)
}

fn train_distributed(cfg: &RunConfig, hash: &str, scenario: &Scenario, out_dir: &Path, art: &mut Artifacts) -> Result<()> {
    let exp = &cfg.experiment;
    let map = build_neighborhoods(exp.num_aps, cfg.template()?)?;
    art.files
        .push(write_file(&out_dir.join("topology.json"), map.topology_json().as_bytes())?);
    let mut trainer = DistributedTrainer::new(exp.clone(), cfg.train.clone(), map.clone(), &cfg.model)?;
    let mut written = Vec::new();
    let outcome = trainer.run(scenario, |epoch, models| {
        if epoch + 1 < cfg.train.epochs {
            let dir = out_dir.join(format!("policy_distributed_epoch{epoch:04}"));
            for (l, m) in models.iter().enumerate() {
                written.push(save_checkpoint(&ap_checkpoint(&dir, l), m, hash)?);
            }
        }
        Ok(())
    });
    art.files.extend(written);
    art.files
        .push(write_file(&out_dir.join("train_log.csv"), with_hash(&log_csv(&trainer.log), hash).as_bytes())?);
    let dir = distributed_dir(out_dir);
    for (l, m) in trainer.models.iter().enumerate() {
        art.files.push(save_checkpoint(&ap_checkpoint(&dir, l), m, hash)?);
    }
    outcome?;
    write_train_summary(cfg, hash, &trainer.log, out_dir, art)?;
    let policy = DistributedPolicy {
        map,
        models: trainer.models.clone(),
        ap_xy: scenario.ap_xy.clone(),
        mu: DEFAULT_MU,
        label: format!("distributed-{}", cfg.train.objective.name()),
    };
    let (_, records) = evaluate_policy(&policy, scenario, exp, &cfg.train.objective, cfg.data.n_test)?;
    export_evaluation(&records, cfg, hash, out_dir, "train_eval", art)
}

fn log_csv(log: &[crate::training::StepLog]) -> String {
    let mut s = String::from(crate::training::STEP_LOG_HEADER);
    s.push('\n');
    for e in log {
        s.push_str(&e.csv_row());
        s.push('\n');
    }
    s
}

fn with_hash(csv: &str, hash: &str) -> String {
    format!("# config_hash={hash}\n{csv}")
}

fn write_train_summary(
    cfg: &RunConfig,
    hash: &str,
    log: &[crate::training::StepLog],
    out_dir: &Path,
    art: &mut Artifacts,
) -> Result<()> {
    #[derive(Serialize)]
    struct TrainSummary<'a> {
        config_hash: &'a str,
        seed: u64,
        epochs: Vec<crate::training::EpochSummary>,
    }
    let json = serde_json::to_string_pretty(&TrainSummary {
        config_hash: hash,
        seed: cfg.train.seed,
        epochs: epoch_summaries(log),
    })
    .expect("plain data serializes");
    art.files
        .push(write_file(&out_dir.join("train_summary.json"), json.as_bytes())?);
    Ok(())
}

/// Loads a centralized checkpoint or a directory of per-AP checkpoints and
/// checks its structure against the configuration.
fn load_policy(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    scenario: &Scenario,
    out_dir: &Path,
) -> Result<Box<dyn Strategy>> {
    let exp = &cfg.experiment;
    let label = |kind: &str| format!("{kind}-{}", cfg.train.objective.name());
    if cfg.scalable.distributed {
        let template = cfg.template()?;
        let dir = checkpoint.map_or_else(|| distributed_dir(out_dir), Path::to_path_buf);
        let expected = cfg.model.shape(template.slots(exp.num_aps), exp.tau_p);
        let mut models = Vec::with_capacity(exp.num_aps);
        for l in 0..exp.num_aps {
            let (p, _) = load_checkpoint(&ap_checkpoint(&dir, l))?;
            check_shape(&p, &expected)?;
            models.push(p);
        }
        Ok(Box::new(DistributedPolicy {
            map: build_neighborhoods(exp.num_aps, template)?,
            models,
            ap_xy: scenario.ap_xy.clone(),
            mu: DEFAULT_MU,
            label: label("distributed"),
        }))
    } else {
        let path = checkpoint.map_or_else(|| out_dir.join("policy.ckpt"), Path::to_path_buf);
        let (p, stored) = load_checkpoint(&path)?;
        check_shape(&p, &cfg.model.shape(exp.num_aps, exp.tau_p))?;
        if stored != cfg.hash() {
            log::warn!("checkpoint {} was trained under config {stored}", path.display());
        }
        Ok(Box::new(Learned::new(p, label("learned"))))
    }
}

fn check_shape(p: &ModelParams, expected: &crate::neural::ModelShape) -> Result<()> {
    if p.shape() != expected {
        return Err(Error::Config(format!(
            "checkpoint structure {:?} does not match the configured model {:?}",
            p.shape(),
            expected
        )));
    }
    Ok(())
}

/// Names of every registered baseline strategy.
pub fn registered_strategies() -> BTreeSet<&'static str> {
    ["pilot", "master", "top", "topN", "all"].into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_listed_together() {
        let text = "[experiment]\nnum_ues = 4\nbogus = 1\n[train]\nlr = 0.1\nobjective = { kind = \"sum\", extra = 2 }\n[nope]\nx = 1\n";
        let err = RunConfig::from_toml_str(text).unwrap_err().to_string();
        assert!(err.contains("experiment.bogus"), "{err}");
        assert!(err.contains("train.objective.extra"), "{err}");
        assert!(err.contains("nope"), "{err}");
    }

    #[test]
    fn scenario_file_round_trip_and_hash() {
        let text = "[experiment]\ntau_p = 4\n[train]\nobjective = { kind = \"balance\", lambda = 0.04 }\n[scalable]\ntemplate = \"3x3\"\n";
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.experiment.tau_p, 4);
        assert_eq!(cfg.train.objective, ObjectiveSpec::Balance { lambda: 0.04 });
        assert_eq!(cfg.template().unwrap(), Template::Window(3));
        assert_eq!(cfg.hash(), cfg.clone().hash());
        assert_eq!(cfg.hash().len(), 64);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
        assert!(RunConfig::from_toml_str("[experiment]\nnum_aps = 10\n").is_err());
        assert!(RunConfig::from_toml_str("[scalable]\ntemplate = \"2x2\"\n").is_err());
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::default();
        let ov = Overrides {
            seed: Some(9),
            objective: Some("balance".into()),
            lambda: Some(0.1),
            tau_p: Some(4),
            ..Default::default()
        };
        ov.apply(&mut cfg).unwrap();
        assert_eq!((cfg.experiment.seed, cfg.train.seed, cfg.experiment.tau_p), (9, 9, 4));
        assert_eq!(cfg.train.objective, ObjectiveSpec::Balance { lambda: 0.1 });
        let bad = Overrides {
            objective: Some("max".into()),
            ..Default::default()
        };
        assert!(bad.apply(&mut cfg).is_err());
    }

    #[test]
    fn cdf_points() {
        let c = empirical_cdf(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(c, vec![(1.0, 1.0 / 3.0), (2.0, 2.0 / 3.0), (3.0, 1.0)]);
        assert_eq!(empirical_cdf(&[5.0; 4]).unwrap(), vec![(5.0, 1.0)]);
        assert!(empirical_cdf(&[]).is_err());
    }

    fn rec(strategy: &str, se_sum: f64, connections: usize) -> ResultRecord {
        ResultRecord {
            drop: 0,
            strategy: strategy.into(),
            se_sum,
            se_min: se_sum / 10.0,
            connections,
            objective: se_sum,
            se: vec![se_sum],
            seed: 1,
        }
    }

    #[test]
    fn summaries_and_table() {
        let s = summarize(&[rec("a", 2.0, 10)]);
        assert_eq!(s[0].mean_se_sum, 2.0);
        assert_eq!(s[0].mean_connections, 10.0);
        let s = summarize(&[rec("a", 2.0, 10), rec("b", 1.0, 5), rec("a", 4.0, 20)]);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].strategy, "a");
        assert_eq!(s[0].mean_se_sum, 3.0);
        let table = render_table(&s);
        assert_eq!(table.lines().count(), 3);
        assert!(table.lines().all(|l| l.len() == table.lines().next().unwrap().len()));
    }

    #[test]
    fn strategy_registry() {
        assert_eq!(baseline_strategy("top", Some(3)).unwrap().name(), "top3");
        assert_eq!(baseline_strategy("top4", None).unwrap().name(), "top4");
        assert_eq!(baseline_strategy("pilot", None).unwrap().name(), "pilot");
        assert!(baseline_strategy("best", None).is_err());
        assert!(registered_strategies().contains("pilot"));
    }

    #[test]
    fn missing_cache_is_explained() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_with_config(&RunConfig::default(), Command::Baseline, &Overrides::default(), dir.path())
            .unwrap_err()
            .to_string();
        assert!(err.contains("generate"), "{err}");
    }
}
