//! Experiment orchestration: feature preparation, head pre-training,
//! continual-learning runs over scenarios, evaluation and report output.
//!
//! Runs are independent per (seed, scenario, algorithm) and execute on the
//! rayon pool. Results are merged by sorted key so the report never depends
//! on completion order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audio::{FrontendConfig, LogMelFrontend};
use crate::bnn::{self, BnnModel};
use crate::cl::{self, Algorithm, ClConfig, ClError, ClHead, ClState, PredictMode};
use crate::dataset::{self, DatasetIndex, IndexOptions, KwsClass, Scenario, Splits};
use crate::flops::{self, FlopQuery};
use crate::rng;
use crate::synthetic::{self, SyntheticConfig};

/// Stream lengths of the data-volume sweep.
pub const SWEEP_BUDGETS: [usize; 9] = [64, 128, 256, 512, 1024, 2048, 4096, 8192, 16384];

const FEATURE_CACHE_MAGIC: &[u8; 8] = b"KWSF0001";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{failed} of {total} runs failed; first error: {first}")]
    Partial {
        report: Box<RunReport>,
        failed: usize,
        total: usize,
        first: Box<HarnessError>,
    },
}

impl HarnessError {
    /// Process exit code: 1 config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Data(_) | HarnessError::Io(_) => 2,
            HarnessError::Numeric(_) => 3,
            HarnessError::Partial { first, .. } => first.exit_code(),
        }
    }
}

impl From<ClError> for HarnessError {
    fn from(e: ClError) -> Self {
        match e {
            ClError::NonFinite(_) => HarnessError::Numeric(e.to_string()),
            ClError::InvalidConfig(_) | ClError::UnknownAlgorithm(_) => HarnessError::Config(e.to_string()),
            other => HarnessError::Data(other.to_string()),
        }
    }
}

impl From<dataset::DatasetError> for HarnessError {
    fn from(e: dataset::DatasetError) -> Self {
        match e {
            dataset::DatasetError::Fractions(_) | dataset::DatasetError::ScenarioSize(_) => {
                HarnessError::Config(e.to_string())
            }
            other => HarnessError::Data(other.to_string()),
        }
    }
}

impl From<bnn::BnnError> for HarnessError {
    fn from(e: bnn::BnnError) -> Self {
        HarnessError::Data(e.to_string())
    }
}

impl From<crate::audio::FrontendError> for HarnessError {
    fn from(e: crate::audio::FrontendError) -> Self {
        match e {
            crate::audio::FrontendError::InvalidConfig(_) => HarnessError::Config(e.to_string()),
            other => HarnessError::Data(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Bnn,
    Cache,
    Synthetic,
}

impl FromStr for FeatureSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bnn" | "bnn_model" => Ok(FeatureSource::Bnn),
            "cache" | "cached_features" => Ok(FeatureSource::Cache),
            "synthetic" => Ok(FeatureSource::Synthetic),
            other => Err(format!("unknown feature source {other:?}")),
        }
    }
}

/// Number of samples drawn into each stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Budget {
    All,
    Samples(usize),
}

impl Budget {
    pub fn limit(self) -> Option<usize> {
        match self {
            Budget::All => None,
            Budget::Samples(n) => Some(n),
        }
    }
}

impl std::fmt::Display for Budget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Budget::All => f.write_str("all"),
            Budget::Samples(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for Budget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Budget::All);
        }
        s.parse()
            .map(Budget::Samples)
            .map_err(|_| format!("budget must be a sample count or \"all\", got {s:?}"))
    }
}

impl Serialize for Budget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Budget::All => s.serialize_str("all"),
            Budget::Samples(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(usize),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(Budget::Samples(n)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Which new-class combinations to run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioSpec {
    /// Every combination of this many numeric keywords.
    NewClassCount(usize),
    /// Explicit combinations.
    Explicit(Vec<Vec<KwsClass>>),
}

impl ScenarioSpec {
    pub fn scenarios(&self) -> Result<Vec<Scenario>, HarnessError> {
        Ok(match self {
            ScenarioSpec::NewClassCount(k) => dataset::enumerate_scenarios(*k)?,
            ScenarioSpec::Explicit(sets) => sets
                .iter()
                .map(|s| Scenario::new(s.clone()))
                .collect::<Result<_, _>>()?,
        })
    }
}

impl FromStr for ScenarioSpec {
    type Err = String;

    /// `3` for all combinations of three, or `one,three;two` for explicit sets.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Ok(k) = s.trim().parse() {
            return Ok(ScenarioSpec::NewClassCount(k));
        }
        s.split(';')
            .map(|set| set.split([',', '+']).map(str::parse).collect::<Result<Vec<_>, _>>())
            .collect::<Result<Vec<_>, _>>()
            .map(ScenarioSpec::Explicit)
    }
}

/// Full-batch gradient descent settings for fitting the initial head. The
/// default stops well before convergence, like a head that was trained jointly
/// with its extractor and never saw the new classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadFitConfig {
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for HeadFitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset_root: Option<PathBuf>,
    pub model_path: Option<PathBuf>,
    pub manifest_path: Option<PathBuf>,
    pub feature_cache: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub feature_source: FeatureSource,
    pub frontend: FrontendConfig,
    pub cl: ClConfig,
    pub algorithms: Vec<Algorithm>,
    pub scenarios: ScenarioSpec,
    pub budget: Budget,
    pub seeds: Vec<u64>,
    pub pretrain_fraction: f64,
    pub test_fraction: f64,
    pub index_seed: u64,
    pub synthetic: SyntheticConfig,
    pub head_fit: HeadFitConfig,
    /// Also evaluate every this many stream samples.
    pub eval_every: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_root: None,
            model_path: None,
            manifest_path: None,
            feature_cache: None,
            output_dir: PathBuf::from("out"),
            feature_source: FeatureSource::Synthetic,
            frontend: FrontendConfig::default(),
            cl: ClConfig::default(),
            algorithms: Algorithm::ALL.to_vec(),
            scenarios: ScenarioSpec::NewClassCount(1),
            budget: Budget::All,
            seeds: vec![0],
            pretrain_fraction: 0.40,
            test_fraction: 0.03,
            index_seed: 0,
            synthetic: SyntheticConfig::default(),
            head_fit: HeadFitConfig::default(),
            eval_every: None,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.algorithms.is_empty() {
            return Err(HarnessError::Config("select at least one algorithm".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("select at least one seed".into()));
        }
        if self.eval_every == Some(0) {
            return Err(HarnessError::Config("eval_every must be positive".into()));
        }
        self.cl.validate()?;
        self.scenarios.scenarios()?;
        let need = |p: &Option<PathBuf>, what: &str| -> Result<(), HarnessError> {
            match p {
                Some(p) if p.exists() => Ok(()),
                Some(p) => Err(HarnessError::Config(format!("{what} {} does not exist", p.display()))),
                None => Err(HarnessError::Config(format!("{what} is required for this feature source"))),
            }
        };
        match self.feature_source {
            FeatureSource::Synthetic => {
                if self.synthetic.feature_dim == 0 || self.synthetic.samples_per_class == 0 {
                    return Err(HarnessError::Config("synthetic dims and counts must be positive".into()));
                }
            }
            FeatureSource::Cache => need(&self.feature_cache, "feature cache")?,
            FeatureSource::Bnn => {
                need(&self.model_path, "model weights")?;
                if self.manifest_path.is_none() {
                    need(&self.dataset_root, "dataset root")?;
                }
                self.frontend.validate()?;
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring where outputs go.
    pub fn digest(&self) -> String {
        let canonical = RunConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Labels and extractor features for every indexed sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub classes: Vec<KwsClass>,
    pub features: Vec<Vec<f64>>,
}

impl FeatureTable {
    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Runs every indexed clip through the front-end and the frozen extractor.
    pub fn from_model(
        index: &DatasetIndex,
        root: &Path,
        model: &BnnModel,
        frontend: &FrontendConfig,
    ) -> Result<Self, HarnessError> {
        let fe = LogMelFrontend::new(frontend.clone())?;
        let features = index
            .entries
            .par_iter()
            .map(|e| -> Result<Vec<f64>, HarnessError> {
                let clip = e.source.load(root)?;
                Ok(model.forward_features(&fe.compute(&clip))?)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            classes: index.classes(),
            features,
        })
    }

    /// Cache layout: `KWSF0001`, rows u64, dim u32, then per row a class u8 and dim f64.
    pub fn write_cache(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(FEATURE_CACHE_MAGIC)?;
        w.write_all(&(self.features.len() as u64).to_le_bytes())?;
        w.write_all(&(self.feature_dim() as u32).to_le_bytes())?;
        for (c, f) in self.classes.iter().zip(&self.features) {
            w.write_all(&[c.index() as u8])?;
            for v in f {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_cache(mut r: impl Read) -> Result<Self, HarnessError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let bad = |m: &str| HarnessError::Data(format!("feature cache: {m}"));
        if bytes.len() < 20 || &bytes[..8] != FEATURE_CACHE_MAGIC {
            return Err(bad("bad magic"));
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let row_len = 1 + 8 * dim;
        if rows.checked_mul(row_len).and_then(|n| n.checked_add(20)) != Some(bytes.len()) {
            return Err(bad("length does not match header"));
        }
        let mut classes = Vec::with_capacity(rows);
        let mut features = Vec::with_capacity(rows);
        for row in bytes[20..].chunks_exact(row_len) {
            classes.push(*KwsClass::ALL.get(row[0] as usize).ok_or_else(|| bad("class id"))?);
            features.push(
                row[1..]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            );
        }
        Ok(Self { classes, features })
    }
}

/// Fits a softmax head on `samples` with full-batch gradient descent from zero.
pub fn fit_head(
    table: &FeatureTable,
    samples: &[usize],
    head_classes: &[KwsClass],
    cfg: &HeadFitConfig,
) -> Result<ClHead, HarnessError> {
    let labels: Vec<String> = head_classes.iter().map(|c| c.name().to_string()).collect();
    let dim = table.feature_dim();
    let head = ClHead::zeros(dim, labels)?;
    let column: BTreeMap<KwsClass, usize> = head_classes.iter().enumerate().map(|(j, &c)| (c, j)).collect();
    let data: Vec<(&[f64], usize)> = samples
        .iter()
        .filter_map(|&i| column.get(&table.classes[i]).map(|&j| (table.features[i].as_slice(), j)))
        .collect();
    if data.is_empty() {
        return Err(HarnessError::Data("no samples to fit the initial head".into()));
    }
    let n = head_classes.len();
    let (mut w, mut b) = (vec![0.0; dim * n], vec![0.0; n]);
    let (mut gw, mut gb) = (vec![0.0; dim * n], vec![0.0; n]);
    let mut z = vec![0.0; n];
    let step = cfg.learning_rate / data.len() as f64;
    for _ in 0..cfg.epochs {
        gw.fill(0.0);
        gb.fill(0.0);
        for (f, y) in &data {
            z.copy_from_slice(&b);
            for (i, fi) in f.iter().enumerate() {
                z.iter_mut().zip(&w[i * n..(i + 1) * n]).for_each(|(z, w)| *z += fi * w);
            }
            let p = cl::softmax(&z);
            for j in 0..n {
                let d = p[j] - if j == *y { 1.0 } else { 0.0 };
                gb[j] += d;
                for (i, fi) in f.iter().enumerate() {
                    gw[i * n + j] += fi * d;
                }
            }
        }
        w.iter_mut().zip(&gw).for_each(|(w, g)| *w -= step * g);
        b.iter_mut().zip(&gb).for_each(|(b, g)| *b -= step * g);
    }
    let head = ClHead::from_parts(dim, w, b, head.class_labels().to_vec())?;
    if !head.is_finite() {
        return Err(HarnessError::Numeric("initial head fit diverged".into()));
    }
    Ok(head)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// The twelve pre-training classes.
    Old,
    /// The scenario's new classes.
    New,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Fraction of test samples in `partition` that the evaluation head gets right.
pub fn evaluate(
    state: &ClState,
    table: &FeatureTable,
    test: &[usize],
    scenario: &Scenario,
    partition: Partition,
) -> Result<Accuracy, HarnessError> {
    let head = state.evaluation_head();
    let mut acc = Accuracy::default();
    for &i in test {
        let class = table.classes[i];
        let included = match partition {
            Partition::Old => !class.is_numeric(),
            Partition::New => scenario.new_classes.contains(&class),
            Partition::All => scenario.contains(class),
        };
        if !included {
            continue;
        }
        let Some(truth) = head.class_index(class.name()) else {
            continue;
        };
        acc.total += 1;
        if state.predict(&table.features[i], PredictMode::Evaluation)? == truth {
            acc.correct += 1;
        }
    }
    if acc.total == 0 {
        return Err(HarnessError::Data(format!("empty {partition:?} partition for scenario {scenario}")));
    }
    Ok(acc)
}

/// Everything a run needs for one seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    pub splits: Splits,
    pub pretrained: ClHead,
}

pub fn load_features(cfg: &RunConfig, seed: u64) -> Result<FeatureTable, HarnessError> {
    match cfg.feature_source {
        FeatureSource::Synthetic => {
            let data = synthetic::generate(&cfg.synthetic, seed);
            Ok(FeatureTable {
                classes: data.classes,
                features: data.features,
            })
        }
        FeatureSource::Cache => {
            let path = cfg.feature_cache.as_ref().ok_or_else(|| HarnessError::Config("no feature cache".into()))?;
            FeatureTable::read_cache(File::open(path)?)
        }
        FeatureSource::Bnn => {
            let model = bnn::load_model(cfg.model_path.as_ref().expect("validated"))?;
            let root = cfg.dataset_root.clone().unwrap_or_default();
            let index = match &cfg.manifest_path {
                Some(m) => dataset::read_manifest(std::io::BufReader::new(File::open(m)?))?.0,
                None => dataset::index_dataset(
                    &root,
                    IndexOptions {
                        seed: cfg.index_seed,
                        balance: true,
                    },
                )?,
            };
            let table = FeatureTable::from_model(&index, &root, &model, &cfg.frontend)?;
            if let Some(cache) = &cfg.feature_cache {
                let mut w = BufWriter::new(File::create(cache)?);
                table.write_cache(&mut w)?;
                w.flush()?;
            }
            Ok(table)
        }
    }
}

pub fn prepare(cfg: &RunConfig, table: &FeatureTable, seed: u64) -> Result<Prepared, HarnessError> {
    if table.feature_dim() == 0 {
        return Err(HarnessError::Data("feature table is empty".into()));
    }
    let splits = dataset::split_dataset(&table.classes, seed, cfg.pretrain_fraction, cfg.test_fraction)?;
    let pretrained = fit_head(table, &splits.pretrain, &KwsClass::KNOWN, &cfg.head_fit)?;
    Ok(Prepared {
        seed,
        splits,
        pretrained,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub samples: usize,
    pub acc_all: f64,
}

/// Result of one run, or an aggregate over scenarios and/or seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Algorithm name, or `pretrained` for the no-update baseline.
    pub algorithm: String,
    /// Scenario name, or `avg` for the mean over combinations.
    pub scenario: String,
    pub k_new: usize,
    pub budget: Budget,
    /// `None` for the mean over seeds.
    pub seed: Option<u64>,
    pub acc_old: f64,
    pub acc_new: f64,
    pub acc_all: f64,
    pub n_old: usize,
    pub n_new: usize,
    pub stream_len: usize,
    pub backprop_flops: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub curve: Vec<CurvePoint>,
}

impl ReportRow {
    /// Sort order: k, budget, baseline before algorithms, scenarios in class order with `avg` last, seeds with the mean last.
    fn key(&self) -> (usize, Budget, usize, Vec<usize>, u64) {
        let algo_rank = Algorithm::ALL
            .iter()
            .position(|a| a.name() == self.algorithm)
            .map_or(0, |p| p + 1);
        let scenario = self
            .scenario
            .split('+')
            .map(|n| n.parse::<KwsClass>().map_or(usize::MAX, KwsClass::index))
            .collect();
        (self.k_new, self.budget, algo_rank, scenario, self.seed.unwrap_or(u64::MAX))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_digest: String,
    pub rng: String,
    pub rows: Vec<ReportRow>,
}

impl RunReport {
    pub fn empty(cfg: &RunConfig) -> Self {
        Self {
            config_digest: cfg.digest(),
            rng: rng::RNG_NAME.to_string(),
            rows: Vec::new(),
        }
    }

    pub fn find(&self, algorithm: &str, scenario: &str, seed: Option<u64>, budget: Budget) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.algorithm == algorithm && r.scenario == scenario && r.seed == seed && r.budget == budget)
    }
}

struct RunOutcome {
    old: Accuracy,
    new: Accuracy,
    all: Accuracy,
    stream_len: usize,
    curve: Vec<CurvePoint>,
}

fn run_single(
    cfg: &RunConfig,
    table: &FeatureTable,
    prep: &Prepared,
    scenario: &Scenario,
    algorithm: Option<Algorithm>,
    budget: Budget,
) -> Result<RunOutcome, HarnessError> {
    let new_labels: Vec<String> = scenario.new_classes.iter().map(|c| c.name().to_string()).collect();
    let head = prep.pretrained.expand(&new_labels)?;
    let mut cl_cfg = cfg.cl.clone();
    cl_cfg.initial_class_count = KwsClass::KNOWN.len();
    let mut state = ClState::new(algorithm.unwrap_or(Algorithm::TinyOl), head, cl_cfg)?;
    let mut stream_len = 0;
    let mut curve = Vec::new();
    if let Some(algorithm) = algorithm {
        let stream_seed = rng::derive(prep.seed, &format!("stream/{scenario}/{budget}"));
        let stream = dataset::build_stream(&table.classes, &prep.splits, scenario, budget.limit(), stream_seed)?;
        stream_len = stream.len();
        let columns = scenario.head_classes();
        for (t, event) in stream.events.iter().enumerate() {
            let label = columns.iter().position(|&c| c == event.class).expect("stream is closed over the scenario");
            state.step(&table.features[event.sample], label)?;
            if let Some(every) = cfg.eval_every {
                if (t + 1) % every == 0 {
                    let all = evaluate(&state, table, &prep.splits.test, scenario, Partition::All)?;
                    curve.push(CurvePoint {
                        samples: t + 1,
                        acc_all: all.value(),
                    });
                }
            }
        }
        state.finish()?;
        debug_assert_eq!(state.algorithm(), algorithm);
    }
    Ok(RunOutcome {
        old: evaluate(&state, table, &prep.splits.test, scenario, Partition::Old)?,
        new: evaluate(&state, table, &prep.splits.test, scenario, Partition::New)?,
        all: evaluate(&state, table, &prep.splits.test, scenario, Partition::All)?,
        stream_len,
        curve,
    })
}

fn mean_row(rows: &[&ReportRow], scenario: String, seed: Option<u64>) -> ReportRow {
    let n = rows.len() as f64;
    let avg = |f: fn(&ReportRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    let avg_n = |f: fn(&ReportRow) -> usize| (rows.iter().map(|r| f(r)).sum::<usize>() as f64 / n).round() as usize;
    ReportRow {
        algorithm: rows[0].algorithm.clone(),
        scenario,
        k_new: rows[0].k_new,
        budget: rows[0].budget,
        seed,
        acc_old: avg(|r| r.acc_old),
        acc_new: avg(|r| r.acc_new),
        acc_all: avg(|r| r.acc_all),
        n_old: avg_n(|r| r.n_old),
        n_new: avg_n(|r| r.n_new),
        stream_len: avg_n(|r| r.stream_len),
        backprop_flops: rows[0].backprop_flops,
        curve: Vec::new(),
    }
}

/// Adds scenario-averaged (`avg`) and seed-averaged (`seed = None`) rows.
fn add_aggregates(rows: &mut Vec<ReportRow>) {
    type Group = (String, usize, Budget);
    let mut by_seed: BTreeMap<(Group, u64), Vec<&ReportRow>> = BTreeMap::new();
    for r in rows.iter() {
        by_seed
            .entry(((r.algorithm.clone(), r.k_new, r.budget), r.seed.unwrap_or(0)))
            .or_default()
            .push(r);
    }
    let mut extra: Vec<ReportRow> = by_seed
        .iter()
        .filter(|(_, v)| v.len() > 1)
        .map(|((_, seed), v)| mean_row(v, "avg".into(), Some(*seed)))
        .collect();
    let seeds: std::collections::BTreeSet<u64> = rows.iter().filter_map(|r| r.seed).collect();
    if seeds.len() > 1 {
        let mut by_scenario: BTreeMap<(Group, String), Vec<&ReportRow>> = BTreeMap::new();
        for r in rows.iter().chain(&extra) {
            by_scenario
                .entry(((r.algorithm.clone(), r.k_new, r.budget), r.scenario.clone()))
                .or_default()
                .push(r);
        }
        let seed_means: Vec<ReportRow> = by_scenario
            .iter()
            .map(|((_, scenario), v)| mean_row(v, scenario.clone(), None))
            .collect();
        extra.extend(seed_means);
    }
    rows.extend(extra);
}

/// Runs every (seed, scenario, algorithm) combination at the configured budget.
pub fn run_continual(cfg: &RunConfig) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    run_budgets(cfg, &[cfg.budget], &cfg.scenarios.scenarios()?)
}

/// Sensitivity sweep: the four-new-class scenario at every budget in [`SWEEP_BUDGETS`].
pub fn sensitivity_sweep(cfg: &RunConfig) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    let scenarios = dataset::enumerate_scenarios(4)?;
    let largest = SWEEP_BUDGETS[SWEEP_BUDGETS.len() - 1];
    let table = load_features(cfg, cfg.seeds[0])?;
    for &seed in &cfg.seeds {
        let splits = dataset::split_dataset(&table.classes, seed, cfg.pretrain_fraction, cfg.test_fraction)?;
        if splits.cl_pool.len() < largest {
            return Err(HarnessError::Data(format!(
                "sweep needs {largest} stream samples but the CL pool holds {}",
                splits.cl_pool.len()
            )));
        }
    }
    let budgets: Vec<Budget> = SWEEP_BUDGETS.iter().map(|&n| Budget::Samples(n)).collect();
    run_budgets(cfg, &budgets, &scenarios)
}

fn run_budgets(cfg: &RunConfig, budgets: &[Budget], scenarios: &[Scenario]) -> Result<RunReport, HarnessError> {
    let mut prepared = Vec::with_capacity(cfg.seeds.len());
    let mut shared_table = None;
    for &seed in &cfg.seeds {
        let table = match cfg.feature_source {
            FeatureSource::Synthetic => load_features(cfg, seed)?,
            _ => match &shared_table {
                Some(t) => Clone::clone(t),
                None => {
                    let t = load_features(cfg, seed)?;
                    shared_table = Some(t.clone());
                    t
                }
            },
        };
        let prep = prepare(cfg, &table, seed)?;
        prepared.push((table, prep));
    }

    let mut jobs = Vec::new();
    for (p, _) in prepared.iter().enumerate() {
        for scenario in scenarios {
            for &budget in budgets {
                jobs.push((p, scenario.clone(), None, budget));
                for &a in &cfg.algorithms {
                    jobs.push((p, scenario.clone(), Some(a), budget));
                }
            }
        }
    }
    // the no-update baseline does not depend on the budget
    jobs.retain(|(_, _, a, b)| a.is_some() || *b == budgets[0]);

    let results: Vec<Result<ReportRow, HarnessError>> = jobs
        .par_iter()
        .map(|(p, scenario, algorithm, budget)| {
            let (table, prep) = &prepared[*p];
            let out = run_single(cfg, table, prep, scenario, *algorithm, *budget)?;
            let k = scenario.k();
            let backprop_flops = match algorithm {
                Some(a) => flops::backprop_flops(FlopQuery {
                    method: *a,
                    m: KwsClass::KNOWN.len() as u64,
                    n: (KwsClass::KNOWN.len() + k) as u64,
                    batch_size: cfg.cl.batch_size as u64,
                })
                .map_err(|e| HarnessError::Config(e.to_string()))?,
                None => 0,
            };
            Ok(ReportRow {
                algorithm: algorithm.map_or("pretrained".to_string(), |a| a.name().to_string()),
                scenario: scenario.name(),
                k_new: k,
                budget: *budget,
                seed: Some(prep.seed),
                acc_old: out.old.value(),
                acc_new: out.new.value(),
                acc_all: out.all.value(),
                n_old: out.old.total,
                n_new: out.new.total,
                stream_len: out.stream_len,
                backprop_flops,
                curve: out.curve,
            })
        })
        .collect();

    let total = results.len();
    let mut rows = Vec::with_capacity(total);
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => errors.push(e),
        }
    }
    add_aggregates(&mut rows);
    rows.sort_by_key(ReportRow::key);
    let report = RunReport {
        config_digest: cfg.digest(),
        rng: rng::RNG_NAME.to_string(),
        rows,
    };
    match errors.into_iter().next() {
        None => Ok(report),
        Some(first) => Err(HarnessError::Partial {
            failed: total - report.rows.iter().filter(|r| r.seed.is_some() && r.scenario != "avg").count(),
            total,
            report: Box::new(report),
            first: Box::new(first),
        }),
    }
}

pub const CSV_HEADER: &str = "algorithm,scenario,k_new,budget,seed,acc_old,acc_new,acc_all,backprop_flops";

pub fn report_csv(report: &RunReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6},{}\n",
            r.algorithm,
            r.scenario,
            r.k_new,
            r.budget,
            r.seed.map_or("mean".to_string(), |s| s.to_string()),
            r.acc_old,
            r.acc_new,
            r.acc_all,
            r.backprop_flops
        ));
    }
    out
}

pub fn report_json(report: &RunReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown format {other:?}")),
        }
    }
}

/// Writes `<dir>/<stem>.csv` or `.json` and returns the path.
pub fn emit_report(report: &RunReport, dir: &Path, stem: &str, format: ReportFormat) -> Result<PathBuf, HarnessError> {
    std::fs::create_dir_all(dir)?;
    let (ext, body) = match format {
        ReportFormat::Csv => ("csv", report_csv(report)),
        ReportFormat::Json => ("json", report_json(report)),
    };
    let path = dir.join(format!("{stem}.{ext}"));
    std::fs::write(&path, body)?;
    Ok(path)
}
