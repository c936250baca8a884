//! Speech Commands V2 indexing, the test / pre-train / continual-learning
//! split, new-class scenarios and shuffled training streams.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio;
use crate::rng;

pub const NOISE_DIR: &str = "_background_noise_";

/// The 35 keywords of Speech Commands V2.
pub const GSC_KEYWORDS: [&str; 35] = [
    "backward", "bed", "bird", "cat", "dog", "down", "eight", "five", "follow", "forward",
    "four", "go", "happy", "house", "learn", "left", "marvin", "nine", "no", "off", "on", "one",
    "right", "seven", "sheila", "six", "stop", "three", "tree", "two", "up", "visual", "wow",
    "yes", "zero",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset directory {0} does not exist")]
    MissingDirectory(PathBuf),
    #[error("no recognized keyword folders under {0}")]
    NoKeywords(PathBuf),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("audio error: {0}")]
    Audio(#[from] audio::FrontendError),
    #[error("invalid split fractions: {0}")]
    Fractions(String),
    #[error("split leaves class {class} empty in {split}")]
    EmptyClass { class: KwsClass, split: &'static str },
    #[error("scenario needs between 1 and 4 new classes, got {0}")]
    ScenarioSize(usize),
    #[error("stream budget {budget} exceeds the {available} available samples")]
    Budget { budget: usize, available: usize },
    #[error("class {0} has no samples in the continual-learning pool")]
    MissingPoolClass(KwsClass),
    #[error("bad manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
}

/// The sixteen target classes. Declaration order is the head's column order:
/// the twelve pre-training classes first, then the four numeric keywords.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KwsClass {
    Yes,
    No,
    Up,
    Down,
    Left,
    Right,
    On,
    Off,
    Stop,
    Go,
    Silence,
    Unknown,
    One,
    Two,
    Three,
    Four,
}

impl KwsClass {
    pub const ALL: [KwsClass; 16] = [
        KwsClass::Yes,
        KwsClass::No,
        KwsClass::Up,
        KwsClass::Down,
        KwsClass::Left,
        KwsClass::Right,
        KwsClass::On,
        KwsClass::Off,
        KwsClass::Stop,
        KwsClass::Go,
        KwsClass::Silence,
        KwsClass::Unknown,
        KwsClass::One,
        KwsClass::Two,
        KwsClass::Three,
        KwsClass::Four,
    ];

    /// Classes the extractor and initial head are trained on.
    pub const KNOWN: [KwsClass; 12] = [
        KwsClass::Yes,
        KwsClass::No,
        KwsClass::Up,
        KwsClass::Down,
        KwsClass::Left,
        KwsClass::Right,
        KwsClass::On,
        KwsClass::Off,
        KwsClass::Stop,
        KwsClass::Go,
        KwsClass::Silence,
        KwsClass::Unknown,
    ];

    pub const NUMERIC: [KwsClass; 4] = [KwsClass::One, KwsClass::Two, KwsClass::Three, KwsClass::Four];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            KwsClass::Yes => "yes",
            KwsClass::No => "no",
            KwsClass::Up => "up",
            KwsClass::Down => "down",
            KwsClass::Left => "left",
            KwsClass::Right => "right",
            KwsClass::On => "on",
            KwsClass::Off => "off",
            KwsClass::Stop => "stop",
            KwsClass::Go => "go",
            KwsClass::Silence => "silence",
            KwsClass::Unknown => "unknown",
            KwsClass::One => "one",
            KwsClass::Two => "two",
            KwsClass::Three => "three",
            KwsClass::Four => "four",
        }
    }

    pub fn is_numeric(self) -> bool {
        self.index() >= 12
    }

    /// One of the ten command words.
    pub fn is_command(self) -> bool {
        self.index() < 10
    }
}

impl fmt::Display for KwsClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KwsClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown class {s:?}"))
    }
}

/// Class for a raw GSC keyword folder; `None` for folders outside the vocabulary.
pub fn map_keyword(keyword: &str) -> Option<KwsClass> {
    if !GSC_KEYWORDS.contains(&keyword) {
        return None;
    }
    Some(
        KwsClass::ALL
            .into_iter()
            .find(|c| c.name() == keyword)
            .unwrap_or(KwsClass::Unknown),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleSource {
    /// Keyword recording, relative to the dataset root.
    File(PathBuf),
    /// One-second crop of a background-noise recording starting at `offset` samples.
    NoiseCrop { file: PathBuf, offset: usize },
}

impl SampleSource {
    /// Manifest spelling: the relative path, with `@offset` for noise crops.
    pub fn manifest_key(&self) -> String {
        match self {
            SampleSource::File(p) => p.to_string_lossy().replace('\\', "/"),
            SampleSource::NoiseCrop { file, offset } => {
                format!("{}@{}", file.to_string_lossy().replace('\\', "/"), offset)
            }
        }
    }

    pub fn parse_manifest_key(key: &str) -> Self {
        if let Some((file, offset)) = key.rsplit_once('@') {
            if let Ok(offset) = offset.parse() {
                return SampleSource::NoiseCrop {
                    file: PathBuf::from(file),
                    offset,
                };
            }
        }
        SampleSource::File(PathBuf::from(key))
    }

    /// Loads the clip from the dataset root.
    pub fn load(&self, root: &Path) -> Result<audio::PcmClip, audio::FrontendError> {
        match self {
            SampleSource::File(p) => audio::load_wav(root.join(p)),
            SampleSource::NoiseCrop { file, offset } => {
                let (samples, rate) = audio::read_wav_mono(
                    &root.join(file),
                    Some((*offset, audio::CLIP_SAMPLES)),
                )?;
                audio::PcmClip::from_samples(samples, rate)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub source: SampleSource,
    pub raw_keyword: String,
    pub class: KwsClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexOptions {
    pub seed: u64,
    /// Down-sample "unknown" and size "silence" to the mean command-class count.
    pub balance: bool,
}

impl Default for IndexOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            balance: true,
        }
    }
}

/// How the index was balanced; written into run metadata.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub target_per_class: Option<usize>,
    pub unknown_candidates: usize,
    pub unknown_kept: usize,
    pub silence_crops: usize,
    pub rule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
    pub balance: BalanceReport,
}

impl DatasetIndex {
    /// Index with one synthetic entry per class label; for tests and synthetic runs.
    pub fn from_classes(classes: &[KwsClass]) -> Self {
        let entries = classes
            .iter()
            .enumerate()
            .map(|(i, &class)| IndexEntry {
                source: SampleSource::File(PathBuf::from(format!("{}/{:06}.wav", class, i))),
                raw_keyword: class.name().to_string(),
                class,
            })
            .collect();
        Self {
            entries,
            balance: BalanceReport::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn classes(&self) -> Vec<KwsClass> {
        self.entries.iter().map(|e| e.class).collect()
    }

    pub fn class_histogram(&self) -> BTreeMap<KwsClass, usize> {
        histogram(self.entries.iter().map(|e| e.class))
    }
}

pub fn histogram(classes: impl IntoIterator<Item = KwsClass>) -> BTreeMap<KwsClass, usize> {
    let mut h = BTreeMap::new();
    for c in classes {
        *h.entry(c).or_insert(0) += 1;
    }
    h
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    out.sort();
    Ok(out)
}

fn is_wav(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

/// Walks a GSC-style directory: keyword sub-folders plus `_background_noise_`.
///
/// With balancing on, "unknown" keeps a seeded sample of the 21 leftover
/// keywords and "silence" gets the same number of seeded one-second noise
/// crops, both equal to the rounded mean count of the command classes present.
pub fn index_dataset(root: &Path, opts: IndexOptions) -> Result<DatasetIndex, DatasetError> {
    if !root.is_dir() {
        return Err(DatasetError::MissingDirectory(root.to_path_buf()));
    }
    let mut by_class: BTreeMap<KwsClass, Vec<IndexEntry>> = BTreeMap::new();
    let mut noise_files = Vec::new();
    let mut recognized = false;
    for dir in sorted_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().to_string();
        if name == NOISE_DIR {
            noise_files = sorted_dir(&dir)?.into_iter().filter(|p| is_wav(p)).collect();
            continue;
        }
        let Some(class) = map_keyword(&name) else {
            continue;
        };
        recognized = true;
        for file in sorted_dir(&dir)?.into_iter().filter(|p| is_wav(p)) {
            let rel = file.strip_prefix(root).unwrap_or(&file).to_path_buf();
            by_class.entry(class).or_default().push(IndexEntry {
                source: SampleSource::File(rel),
                raw_keyword: name.clone(),
                class,
            });
        }
    }
    if !recognized {
        return Err(DatasetError::NoKeywords(root.to_path_buf()));
    }

    let commands: Vec<usize> = by_class
        .iter()
        .filter(|(c, _)| c.is_command())
        .map(|(_, v)| v.len())
        .collect();
    let target = (!commands.is_empty())
        .then(|| (commands.iter().sum::<usize>() as f64 / commands.len() as f64).round() as usize);
    let mut balance = BalanceReport {
        target_per_class: target.filter(|_| opts.balance),
        rule: if opts.balance {
            "unknown down-sampled and silence cropped to the rounded mean command-class count".into()
        } else {
            "no balancing".into()
        },
        ..Default::default()
    };

    if let (true, Some(target)) = (opts.balance, target) {
        if let Some(unknown) = by_class.get_mut(&KwsClass::Unknown) {
            balance.unknown_candidates = unknown.len();
            if unknown.len() > target {
                let mut rng = rng::seeded(rng::derive(opts.seed, "index/unknown"));
                let mut keep: Vec<usize> = (0..unknown.len()).collect();
                keep.shuffle(&mut rng);
                keep.truncate(target);
                keep.sort_unstable();
                let all = std::mem::take(unknown);
                *unknown = keep.into_iter().map(|i| all[i].clone()).collect();
            }
            balance.unknown_kept = unknown.len();
        }
        let crops = noise_crops(root, &noise_files, target, opts.seed)?;
        balance.silence_crops = crops.len();
        if !crops.is_empty() {
            by_class.insert(KwsClass::Silence, crops);
        }
    } else if let Some(unknown) = by_class.get(&KwsClass::Unknown) {
        balance.unknown_candidates = unknown.len();
        balance.unknown_kept = unknown.len();
    }

    let entries = KwsClass::ALL
        .iter()
        .filter_map(|c| by_class.remove(c))
        .flatten()
        .collect();
    Ok(DatasetIndex { entries, balance })
}

fn noise_crops(
    root: &Path,
    files: &[PathBuf],
    count: usize,
    seed: u64,
) -> Result<Vec<IndexEntry>, DatasetError> {
    let mut usable = Vec::new();
    for f in files {
        let frames = audio::wav_frame_count(f)?;
        if frames >= audio::CLIP_SAMPLES {
            usable.push((f.strip_prefix(root).unwrap_or(f).to_path_buf(), frames));
        }
    }
    if usable.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = rng::seeded(rng::derive(seed, "index/silence"));
    Ok((0..count)
        .map(|k| {
            let (file, frames) = &usable[k % usable.len()];
            let offset = rng.random_range(0..=frames - audio::CLIP_SAMPLES);
            IndexEntry {
                source: SampleSource::NoiseCrop {
                    file: file.clone(),
                    offset,
                },
                raw_keyword: NOISE_DIR.to_string(),
                class: KwsClass::Silence,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Test,
    Pretrain,
    ClPool,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Test => "test",
            SplitName::Pretrain => "pretrain",
            SplitName::ClPool => "cl_pool",
        }
    }
}

impl FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "test" => Ok(SplitName::Test),
            "pretrain" => Ok(SplitName::Pretrain),
            "cl_pool" => Ok(SplitName::ClPool),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Entry indices per split, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub test: Vec<usize>,
    pub pretrain: Vec<usize>,
    pub cl_pool: Vec<usize>,
    pub seed: u64,
    pub test_fraction: f64,
    pub pretrain_fraction: f64,
}

impl Splits {
    /// Split of every entry index, or `None` for indices outside all three.
    pub fn assignment(&self, len: usize) -> Vec<Option<SplitName>> {
        let mut out = vec![None; len];
        for (name, ids) in [
            (SplitName::Test, &self.test),
            (SplitName::Pretrain, &self.pretrain),
            (SplitName::ClPool, &self.cl_pool),
        ] {
            for &i in ids {
                out[i] = Some(name);
            }
        }
        out
    }
}

/// Distributes `total` over buckets proportionally to `weights` by largest remainder.
fn apportion(weights: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut quotas: Vec<usize> = weights.iter().map(|&w| w * total / sum).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // larger remainder first, earlier bucket on ties
    order.sort_by_key(|&i| std::cmp::Reverse(weights[i] * total % sum));
    let short = total - quotas.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        quotas[i] += 1;
    }
    quotas
}

/// Stratified seeded split.
///
/// `|test| = round(test_fraction · |index|)`, apportioned over classes. The
/// pre-training split takes `round(pretrain_fraction · |index|)` samples from
/// the remainder of the twelve non-numeric classes, apportioned by what each
/// has left. Everything else lands in the continual-learning pool.
pub fn split_dataset(
    classes: &[KwsClass],
    seed: u64,
    pretrain_fraction: f64,
    test_fraction: f64,
) -> Result<Splits, DatasetError> {
    let in_unit = |f: f64| f > 0.0 && f < 1.0;
    if !in_unit(pretrain_fraction) || !in_unit(test_fraction) || pretrain_fraction + test_fraction >= 1.0 {
        return Err(DatasetError::Fractions(format!(
            "pretrain {pretrain_fraction} and test {test_fraction} must lie in (0,1) with sum < 1"
        )));
    }
    let total = classes.len();
    let mut members: BTreeMap<KwsClass, Vec<usize>> = BTreeMap::new();
    for (i, &c) in classes.iter().enumerate() {
        members.entry(c).or_default().push(i);
    }
    let present: Vec<KwsClass> = members.keys().copied().collect();
    let counts: Vec<usize> = present.iter().map(|c| members[c].len()).collect();

    let n_test = (test_fraction * total as f64).round() as usize;
    let test_quota = apportion(&counts, n_test);
    let remaining: Vec<usize> = counts.iter().zip(&test_quota).map(|(n, t)| n - t).collect();
    let known_remaining: Vec<usize> = present
        .iter()
        .zip(&remaining)
        .map(|(c, &r)| if c.is_numeric() { 0 } else { r })
        .collect();
    let n_pre = (pretrain_fraction * total as f64).round() as usize;
    let available: usize = known_remaining.iter().sum();
    if n_pre > available {
        return Err(DatasetError::Fractions(format!(
            "pre-training needs {n_pre} samples but only {available} non-numeric samples remain"
        )));
    }
    let pre_quota = apportion(&known_remaining, n_pre);

    let mut rng = rng::seeded(rng::derive(seed, "split"));
    let mut splits = Splits {
        test: Vec::with_capacity(n_test),
        pretrain: Vec::with_capacity(n_pre),
        cl_pool: Vec::new(),
        seed,
        test_fraction,
        pretrain_fraction,
    };
    for (k, class) in present.iter().enumerate() {
        let mut ids = members[class].clone();
        ids.shuffle(&mut rng);
        let (t, p) = (test_quota[k], pre_quota[k]);
        let checks = [
            ("test", t),
            ("cl_pool", ids.len() - t - p),
            ("pretrain", if class.is_numeric() { 1 } else { p }),
        ];
        if let Some((split, _)) = checks.iter().find(|(_, n)| *n == 0) {
            return Err(DatasetError::EmptyClass {
                class: *class,
                split,
            });
        }
        splits.test.extend_from_slice(&ids[..t]);
        splits.pretrain.extend_from_slice(&ids[t..t + p]);
        splits.cl_pool.extend_from_slice(&ids[t + p..]);
    }
    splits.test.sort_unstable();
    splits.pretrain.sort_unstable();
    splits.cl_pool.sort_unstable();
    Ok(splits)
}

/// Writes the replay manifest: a commented header then one
/// `path<TAB>class<TAB>split` record per indexed sample.
pub fn write_manifest(index: &DatasetIndex, splits: &Splits, mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "# kwscl splits v1")?;
    writeln!(w, "# seed={}", splits.seed)?;
    writeln!(w, "# test_fraction={}", splits.test_fraction)?;
    writeln!(w, "# pretrain_fraction={}", splits.pretrain_fraction)?;
    writeln!(w, "# rng={}", rng::RNG_NAME)?;
    for (entry, split) in index.entries.iter().zip(splits.assignment(index.len())) {
        let split = split.map_or("none", SplitName::as_str);
        writeln!(w, "{}\t{}\t{}", entry.source.manifest_key(), entry.class, split)?;
    }
    Ok(())
}

/// Parses a manifest back into an index (raw keywords are not preserved) and splits.
pub fn read_manifest(r: impl BufRead) -> Result<(DatasetIndex, Splits), DatasetError> {
    let mut entries = Vec::new();
    let mut splits = Splits {
        test: Vec::new(),
        pretrain: Vec::new(),
        cl_pool: Vec::new(),
        seed: 0,
        test_fraction: 0.0,
        pretrain_fraction: 0.0,
    };
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let bad = |reason: String| DatasetError::Manifest {
            line: lineno + 1,
            reason,
        };
        if let Some(header) = line.strip_prefix('#') {
            if let Some((key, value)) = header.trim().split_once('=') {
                let parse_err = |e: &dyn fmt::Display| bad(format!("{key}: {e}"));
                match key {
                    "seed" => splits.seed = value.parse().map_err(|e| parse_err(&e))?,
                    "test_fraction" => splits.test_fraction = value.parse().map_err(|e| parse_err(&e))?,
                    "pretrain_fraction" => {
                        splits.pretrain_fraction = value.parse().map_err(|e| parse_err(&e))?
                    }
                    _ => {}
                }
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [path, class, split] = fields[..] else {
            return Err(bad(format!("expected 3 tab-separated fields, got {}", fields.len())));
        };
        let class: KwsClass = class.parse().map_err(bad)?;
        let source = SampleSource::parse_manifest_key(path);
        let raw_keyword = match &source {
            SampleSource::NoiseCrop { .. } => NOISE_DIR.to_string(),
            SampleSource::File(p) => p
                .parent()
                .and_then(|d| d.file_name())
                .map(|d| d.to_string_lossy().to_string())
                .unwrap_or_default(),
        };
        let id = entries.len();
        match split {
            "none" => {}
            s => match s.parse::<SplitName>().map_err(bad)? {
                SplitName::Test => splits.test.push(id),
                SplitName::Pretrain => splits.pretrain.push(id),
                SplitName::ClPool => splits.cl_pool.push(id),
            },
        }
        entries.push(IndexEntry {
            source,
            raw_keyword,
            class,
        });
    }
    Ok((
        DatasetIndex {
            entries,
            balance: BalanceReport::default(),
        },
        splits,
    ))
}

/// A set of numeric keywords added on top of the twelve known classes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Scenario {
    pub new_classes: Vec<KwsClass>,
}

impl Scenario {
    pub fn new(new_classes: Vec<KwsClass>) -> Result<Self, DatasetError> {
        if new_classes.is_empty() || new_classes.len() > 4 {
            return Err(DatasetError::ScenarioSize(new_classes.len()));
        }
        if let Some(c) = new_classes.iter().find(|c| !c.is_numeric()) {
            return Err(DatasetError::Manifest {
                line: 0,
                reason: format!("{c} is not a numeric keyword"),
            });
        }
        let mut dedup = new_classes.clone();
        dedup.sort();
        dedup.dedup();
        if dedup.len() != new_classes.len() {
            return Err(DatasetError::ScenarioSize(dedup.len()));
        }
        Ok(Self { new_classes })
    }

    pub fn k(&self) -> usize {
        self.new_classes.len()
    }

    /// Head column order: known classes, then the new ones.
    pub fn head_classes(&self) -> Vec<KwsClass> {
        KwsClass::KNOWN
            .iter()
            .chain(&self.new_classes)
            .copied()
            .collect()
    }

    pub fn contains(&self, class: KwsClass) -> bool {
        !class.is_numeric() || self.new_classes.contains(&class)
    }

    pub fn name(&self) -> String {
        self.new_classes
            .iter()
            .map(|c| c.name())
            .collect::<Vec<_>>()
            .join("+")
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Every `k`-subset of the numeric keywords, in lexicographic index order.
pub fn enumerate_scenarios(k: usize) -> Result<Vec<Scenario>, DatasetError> {
    if !(1..=4).contains(&k) {
        return Err(DatasetError::ScenarioSize(k));
    }
    let pool = KwsClass::NUMERIC;
    let mut out = Vec::new();
    for mask in 0u32..16 {
        if mask.count_ones() as usize == k {
            let subset: Vec<usize> = (0..4).filter(|b| mask >> b & 1 == 1).collect();
            out.push(subset);
        }
    }
    out.sort();
    Ok(out
        .into_iter()
        .map(|ids| Scenario {
            new_classes: ids.into_iter().map(|i| pool[i]).collect(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamEvent {
    /// Index into the dataset entries.
    pub sample: usize,
    pub class: KwsClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stream {
    pub events: Vec<StreamEvent>,
    pub seed: u64,
}

impl Stream {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Shuffled stream over the continual-learning pool restricted to the
/// scenario's classes. A budget keeps a uniform random subset; known and new
/// classes are interleaved uniformly.
pub fn build_stream(
    classes: &[KwsClass],
    splits: &Splits,
    scenario: &Scenario,
    budget: Option<usize>,
    seed: u64,
) -> Result<Stream, DatasetError> {
    let mut events: Vec<StreamEvent> = splits
        .cl_pool
        .iter()
        .map(|&sample| StreamEvent {
            sample,
            class: classes[sample],
        })
        .filter(|e| scenario.contains(e.class))
        .collect();
    let present = histogram(events.iter().map(|e| e.class));
    if let Some(missing) = scenario.head_classes().into_iter().find(|c| !present.contains_key(c)) {
        return Err(DatasetError::MissingPoolClass(missing));
    }
    if let Some(budget) = budget {
        if budget > events.len() {
            return Err(DatasetError::Budget {
                budget,
                available: events.len(),
            });
        }
    }
    let mut rng = rng::seeded(rng::derive(seed, "stream"));
    events.shuffle(&mut rng);
    if let Some(budget) = budget {
        events.truncate(budget);
    }
    Ok(Stream { events, seed })
}
