//! Interaction-log ingestion, k-core filtering, leave-one-out splitting and
//! padded sequence batches.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{seq::index::sample, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Item index reserved for padding.
pub const PAD: usize = 0;

pub const DATASET_TSV: &str = "dataset.tsv";
pub const DATASET_HEADER: &str = "dataset.json";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("input contains no interactions")]
    EmptyInput,
    #[error("filtering with min_count {0} removed every interaction")]
    EmptyAfterFiltering(usize),
    #[error("maximum sequence length must be at least 2, got {0}")]
    SequenceLength(usize),
    #[error("invalid dataset file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawInteraction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogFormat {
    /// `user::item::rating::timestamp`
    MovielensDat,
    /// `user<TAB>item<TAB>timestamp`
    Tsv,
}

impl std::str::FromStr for LogFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "movielens_dat" | "movielens-dat" | "dat" => Ok(Self::MovielensDat),
            "tsv" => Ok(Self::Tsv),
            other => Err(format!("unknown log format `{other}` (expected dat or tsv)")),
        }
    }
}

pub fn load_interactions(path: &Path, format: LogFormat) -> Result<Vec<RawInteraction>, DatasetError> {
    let file = fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_interactions(BufReader::new(file), format).map_err(|e| match e {
        DatasetError::Io { source, .. } => DatasetError::Io {
            path: path.to_owned(),
            source,
        },
        other => other,
    })
}

/// Parses one interaction per non-blank line. Ratings are discarded.
pub fn parse_interactions(
    reader: impl BufRead,
    format: LogFormat,
) -> Result<Vec<RawInteraction>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: PathBuf::new(),
            source,
        })?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(line, format).map_err(|message| DatasetError::Parse {
            line: i + 1,
            message,
        })?);
    }
    if out.is_empty() {
        return Err(DatasetError::EmptyInput);
    }
    Ok(out)
}

fn parse_line(line: &str, format: LogFormat) -> Result<RawInteraction, String> {
    let fields: Vec<&str> = match format {
        LogFormat::MovielensDat => line.split("::").collect(),
        LogFormat::Tsv => line.split('\t').collect(),
    };
    let (user, item, ts) = match (format, fields.as_slice()) {
        (LogFormat::MovielensDat, [u, i, _rating, t]) => (*u, *i, *t),
        (LogFormat::Tsv, [u, i, t]) => (*u, *i, *t),
        _ => {
            return Err(format!(
                "expected {} fields, found {}",
                if format == LogFormat::Tsv { 3 } else { 4 },
                fields.len()
            ))
        }
    };
    let (user, item) = (user.trim(), item.trim());
    if user.is_empty() || item.is_empty() {
        return Err("empty user or item id".into());
    }
    let timestamp = ts
        .trim()
        .parse::<u64>()
        .map_err(|e| format!("bad timestamp `{ts}`: {e}"))?;
    Ok(RawInteraction {
        user_id: user.to_owned(),
        item_id: item.to_owned(),
        timestamp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Repeat user/item filtering until nothing changes.
    #[default]
    FixedPoint,
    /// Count once on the raw log and drop in a single sweep.
    SinglePass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Users and items need at least this many interactions.
    pub min_count: usize,
    pub filter: FilterMode,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_count: 5,
            filter: FilterMode::FixedPoint,
        }
    }
}

/// Chronological per-user item sequences with dense item indices in `1..=num_items`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionDataset {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    sequences: Vec<Vec<usize>>,
}

/// Leave-one-out split of one user's sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Split<'a> {
    pub train: &'a [usize],
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub num_users: usize,
    pub num_items: usize,
    pub num_interactions: usize,
    pub avg_length: f64,
}

pub fn preprocess(
    raw: &[RawInteraction],
    cfg: &PreprocessConfig,
) -> Result<InteractionDataset, DatasetError> {
    if raw.is_empty() {
        return Err(DatasetError::EmptyInput);
    }
    // Users need three interactions for a non-empty train/valid/test split.
    let user_min = cfg.min_count.max(3);
    let item_min = cfg.min_count;

    let mut user_index: HashMap<&str, usize> = HashMap::new();
    let mut item_index: HashMap<&str, usize> = HashMap::new();
    let mut users = Vec::with_capacity(raw.len());
    let mut items = Vec::with_capacity(raw.len());
    for r in raw {
        let n = user_index.len();
        users.push(*user_index.entry(&r.user_id).or_insert(n));
        let n = item_index.len();
        items.push(*item_index.entry(&r.item_id).or_insert(n));
    }
    let mut alive = vec![true; raw.len()];
    loop {
        let mut user_count = vec![0usize; user_index.len()];
        let mut item_count = vec![0usize; item_index.len()];
        for i in (0..raw.len()).filter(|&i| alive[i]) {
            user_count[users[i]] += 1;
            item_count[items[i]] += 1;
        }
        let mut changed = false;
        for i in 0..raw.len() {
            if alive[i] && (user_count[users[i]] < user_min || item_count[items[i]] < item_min) {
                alive[i] = false;
                changed = true;
            }
        }
        if !changed || cfg.filter == FilterMode::SinglePass {
            break;
        }
    }
    if cfg.filter == FilterMode::SinglePass {
        // a single sweep can leave users too short to split
        let mut user_count = vec![0usize; user_index.len()];
        for i in (0..raw.len()).filter(|&i| alive[i]) {
            user_count[users[i]] += 1;
        }
        for i in 0..raw.len() {
            if user_count[users[i]] < 3 {
                alive[i] = false;
            }
        }
    }

    // group surviving records per user in order of first appearance
    let mut per_user: Vec<Vec<usize>> = vec![Vec::new(); user_index.len()];
    for i in (0..raw.len()).filter(|&i| alive[i]) {
        per_user[users[i]].push(i);
    }
    let mut user_ids = Vec::new();
    let mut item_ids: Vec<String> = Vec::new();
    let mut dense: HashMap<usize, usize> = HashMap::new();
    let mut sequences = Vec::new();
    for mut records in per_user.into_iter().filter(|r| !r.is_empty()) {
        records.sort_by_key(|&i| (raw[i].timestamp, i));
        user_ids.push(raw[records[0]].user_id.clone());
        let seq = records
            .iter()
            .map(|&i| {
                *dense.entry(items[i]).or_insert_with(|| {
                    item_ids.push(raw[i].item_id.clone());
                    item_ids.len()
                })
            })
            .collect();
        sequences.push(seq);
    }
    if sequences.is_empty() {
        return Err(DatasetError::EmptyAfterFiltering(cfg.min_count));
    }
    Ok(InteractionDataset {
        user_ids,
        item_ids,
        sequences,
    })
}

pub fn dataset_stats(ds: &InteractionDataset) -> DatasetStats {
    let num_interactions = ds.num_interactions();
    DatasetStats {
        num_users: ds.num_users(),
        num_items: ds.num_items(),
        num_interactions,
        avg_length: num_interactions as f64 / ds.num_users() as f64,
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    num_users: usize,
    num_items: usize,
    num_interactions: usize,
    /// Original user id per user index.
    user_ids: Vec<String>,
    /// Original item id per item index, starting at index 1.
    item_ids: Vec<String>,
}

impl InteractionDataset {
    /// Builds a dataset directly from dense sequences (items in `1..=num_items`).
    pub fn from_sequences(sequences: Vec<Vec<usize>>, num_items: usize) -> Result<Self, DatasetError> {
        if sequences.is_empty() {
            return Err(DatasetError::EmptyInput);
        }
        for (u, s) in sequences.iter().enumerate() {
            if s.len() < 3 {
                return Err(DatasetError::Format(format!(
                    "user {u} has {} interactions, need at least 3",
                    s.len()
                )));
            }
            if let Some(bad) = s.iter().find(|&&i| i == PAD || i > num_items) {
                return Err(DatasetError::Format(format!(
                    "user {u} references item {bad} outside 1..={num_items}"
                )));
            }
        }
        Ok(Self {
            user_ids: (0..sequences.len()).map(|u| u.to_string()).collect(),
            item_ids: (1..=num_items).map(|i| i.to_string()).collect(),
            sequences,
        })
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn sequence(&self, user: usize) -> &[usize] {
        &self.sequences[user]
    }

    pub fn sequences(&self) -> &[Vec<usize>] {
        &self.sequences
    }

    pub fn user_id(&self, user: usize) -> &str {
        &self.user_ids[user]
    }

    /// Original id of a dense item index (`1..=num_items`).
    pub fn item_id(&self, item: usize) -> &str {
        &self.item_ids[item - 1]
    }

    pub fn split(&self, user: usize) -> Split<'_> {
        let s = &self.sequences[user];
        let n = s.len();
        Split {
            train: &s[..n - 2],
            valid: s[n - 2],
            test: s[n - 1],
        }
    }

    /// Re-expands into raw records, with sequence positions as timestamps.
    pub fn to_raw(&self) -> Vec<RawInteraction> {
        self.sequences
            .iter()
            .enumerate()
            .flat_map(|(u, seq)| {
                seq.iter().enumerate().map(move |(pos, &item)| RawInteraction {
                    user_id: self.user_ids[u].clone(),
                    item_id: self.item_ids[item - 1].clone(),
                    timestamp: pos as u64,
                })
            })
            .collect()
    }

    /// Keeps `count` users chosen with `seed` (original order preserved) and
    /// re-runs preprocessing on what remains.
    pub fn subsample_users(
        &self,
        count: usize,
        seed: u64,
        cfg: &PreprocessConfig,
    ) -> Result<InteractionDataset, DatasetError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = sample(&mut rng, self.num_users(), count.min(self.num_users())).into_vec();
        chosen.sort_unstable();
        let raw: Vec<RawInteraction> = chosen
            .into_iter()
            .flat_map(|u| {
                self.sequences[u]
                    .iter()
                    .enumerate()
                    .map(move |(pos, &item)| RawInteraction {
                        user_id: self.user_ids[u].clone(),
                        item_id: self.item_ids[item - 1].clone(),
                        timestamp: pos as u64,
                    })
            })
            .collect();
        preprocess(&raw, cfg)
    }

    /// Writes `dataset.tsv` (`user_idx<TAB>item_idx<TAB>position`) and a JSON header.
    pub fn write(&self, dir: &Path) -> Result<(), DatasetError> {
        let io = |path: &Path| {
            let path = path.to_owned();
            move |source| DatasetError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let tsv = dir.join(DATASET_TSV);
        let mut w = BufWriter::new(fs::File::create(&tsv).map_err(io(&tsv))?);
        for (u, seq) in self.sequences.iter().enumerate() {
            for (pos, item) in seq.iter().enumerate() {
                writeln!(w, "{u}\t{item}\t{pos}").map_err(io(&tsv))?;
            }
        }
        w.flush().map_err(io(&tsv))?;
        let header = DatasetHeader {
            num_users: self.num_users(),
            num_items: self.num_items(),
            num_interactions: self.num_interactions(),
            user_ids: self.user_ids.clone(),
            item_ids: self.item_ids.clone(),
        };
        let json = dir.join(DATASET_HEADER);
        let text = serde_json::to_string_pretty(&header)
            .map_err(|e| DatasetError::Format(e.to_string()))?;
        fs::write(&json, text).map_err(io(&json))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<InteractionDataset, DatasetError> {
        let io = |path: &Path| {
            let path = path.to_owned();
            move |source| DatasetError::Io { path, source }
        };
        let json = dir.join(DATASET_HEADER);
        let header: DatasetHeader =
            serde_json::from_str(&fs::read_to_string(&json).map_err(io(&json))?)
                .map_err(|e| DatasetError::Format(format!("{}: {e}", json.display())))?;
        if header.user_ids.len() != header.num_users || header.item_ids.len() != header.num_items {
            return Err(DatasetError::Format("header counts disagree with id maps".into()));
        }
        let tsv = dir.join(DATASET_TSV);
        let file = fs::File::open(&tsv).map_err(io(&tsv))?;
        let mut sequences: Vec<Vec<usize>> = vec![Vec::new(); header.num_users];
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io(&tsv))?;
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| DatasetError::Parse {
                line: i + 1,
                message,
            };
            let f: Vec<usize> = line
                .split('\t')
                .map(|v| v.parse::<usize>().map_err(|e| parse_err(e.to_string())))
                .collect::<Result<_, _>>()?;
            let [u, item, pos] = f[..] else {
                return Err(parse_err(format!("expected 3 fields, found {}", f.len())));
            };
            if u >= header.num_users || item == PAD || item > header.num_items {
                return Err(parse_err(format!("index out of range: {line}")));
            }
            if pos != sequences[u].len() {
                return Err(parse_err(format!("position {pos} out of order for user {u}")));
            }
            sequences[u].push(item);
        }
        if sequences.iter().map(Vec::len).sum::<usize>() != header.num_interactions {
            return Err(DatasetError::Format("interaction count mismatch".into()));
        }
        let mut ds = InteractionDataset::from_sequences(sequences, header.num_items)?;
        ds.user_ids = header.user_ids;
        ds.item_ids = header.item_ids;
        Ok(ds)
    }
}

/// Deterministic next-item log: each user starts at a random item and walks
/// `item → item + 1 (mod num_items)` for `length` steps.
pub fn cyclic_interactions(
    num_items: usize,
    num_users: usize,
    length: usize,
    seed: u64,
) -> Vec<RawInteraction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(num_users * length);
    for u in 0..num_users {
        let start = rng.random_range(0..num_items);
        for t in 0..length {
            out.push(RawInteraction {
                user_id: format!("u{u}"),
                item_id: format!("i{}", (start + t) % num_items),
                timestamp: t as u64,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Valid,
    Test,
}

/// `B x n` left-padded inputs with next-item targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceBatch {
    pub users: Vec<usize>,
    pub seq_len: usize,
    /// Row-major `B x n`.
    pub inputs: Vec<usize>,
    /// Row-major `B x n`; `PAD` where there is no next item.
    pub targets: Vec<usize>,
    pub valid_mask: Vec<bool>,
}

impl SequenceBatch {
    pub fn from_rows(seq_len: usize, rows: &[(Vec<usize>, Vec<usize>)]) -> Self {
        let mut batch = SequenceBatch {
            users: (0..rows.len()).collect(),
            seq_len,
            inputs: Vec::with_capacity(rows.len() * seq_len),
            targets: Vec::with_capacity(rows.len() * seq_len),
            valid_mask: Vec::with_capacity(rows.len() * seq_len),
        };
        for (i, t) in rows {
            assert_eq!((i.len(), t.len()), (seq_len, seq_len), "row length");
            batch.inputs.extend_from_slice(i);
            batch.targets.extend_from_slice(t);
            batch
                .valid_mask
                .extend(t.iter().zip(i).map(|(&t, &i)| t != PAD && i != PAD));
        }
        batch
    }

    pub fn batch_size(&self) -> usize {
        self.users.len()
    }

    pub fn input(&self, b: usize, t: usize) -> usize {
        self.inputs[b * self.seq_len + t]
    }

    pub fn target(&self, b: usize, t: usize) -> usize {
        self.targets[b * self.seq_len + t]
    }

    pub fn num_valid(&self) -> usize {
        self.valid_mask.iter().filter(|&&v| v).count()
    }
}

/// Left-padded `(inputs, targets)` for one user in the given phase.
pub fn sequence_row(split: &Split<'_>, n: usize, phase: Phase) -> (Vec<usize>, Vec<usize>) {
    let mut full: Vec<usize> = split.train.to_vec();
    match phase {
        Phase::Train => {}
        Phase::Valid => full.push(split.valid),
        Phase::Test => full.extend([split.valid, split.test]),
    }
    let len = full.len();
    let inputs = &full[..len - 1];
    let targets = &full[1..];
    let keep = inputs.len().min(n);
    let mut row_in = vec![PAD; n];
    let mut row_tg = vec![PAD; n];
    row_in[n - keep..].copy_from_slice(&inputs[inputs.len() - keep..]);
    row_tg[n - keep..].copy_from_slice(&targets[targets.len() - keep..]);
    (row_in, row_tg)
}

/// Streams batches over `users` in the given order.
pub struct SequenceBatches<'a> {
    ds: &'a InteractionDataset,
    users: Vec<usize>,
    n: usize,
    phase: Phase,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for SequenceBatches<'_> {
    type Item = SequenceBatch;

    fn next(&mut self) -> Option<SequenceBatch> {
        if self.cursor >= self.users.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.users.len());
        let users = self.users[self.cursor..end].to_vec();
        self.cursor = end;
        let rows: Vec<_> = users
            .iter()
            .map(|&u| sequence_row(&self.ds.split(u), self.n, self.phase))
            .collect();
        let mut batch = SequenceBatch::from_rows(self.n, &rows);
        batch.users = users;
        Some(batch)
    }
}

pub fn build_sequences(
    ds: &InteractionDataset,
    n: usize,
    phase: Phase,
    batch_size: usize,
) -> Result<SequenceBatches<'_>, DatasetError> {
    build_sequences_for(ds, (0..ds.num_users()).collect(), n, phase, batch_size)
}

pub fn build_sequences_for(
    ds: &InteractionDataset,
    users: Vec<usize>,
    n: usize,
    phase: Phase,
    batch_size: usize,
) -> Result<SequenceBatches<'_>, DatasetError> {
    if n < 2 {
        return Err(DatasetError::SequenceLength(n));
    }
    Ok(SequenceBatches {
        ds,
        users,
        n,
        phase,
        batch_size: batch_size.max(1),
        cursor: 0,
    })
}
