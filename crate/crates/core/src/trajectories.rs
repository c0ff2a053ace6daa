//! Staypoint trajectories: parsing, tokenization and train/validation/test splits.

use std::collections::BTreeMap;
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{GridError, GridSpec, HierarchicalVocabulary};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read staypoints: {0}")]
    Io(#[from] std::io::Error),
    #[error("{malformed} malformed lines exceed the limit of {limit} (first at line {first_line}: {reason})")]
    TooManyMalformed {
        malformed: usize,
        limit: usize,
        first_line: usize,
        reason: String,
    },
    #[error("cell ({col}, {row}) is not in the vocabulary")]
    UnknownCell { col: u32, row: u32 },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("need at least {needed} trajectories to split, got {got}")]
    TooFewTrajectories { needed: usize, got: usize },
    #[error("invalid bucket configuration: {0}")]
    Buckets(String),
    #[error("invalid split ratios {0:?}")]
    Ratios([f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Staypoint {
    pub x: f64,
    pub y: f64,
    pub t_entry: i64,
    pub t_exit: i64,
}

impl Staypoint {
    pub fn duration(&self) -> i64 {
        self.t_exit - self.t_entry
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTrajectory {
    pub user_id: String,
    pub stays: Vec<Staypoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedStaypoints {
    pub trajectories: Vec<RawTrajectory>,
    pub malformed: usize,
}

fn parse_line(line: &str) -> Result<(String, Staypoint), String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 {
        return Err(format!(
            "expected 5 tab-separated fields, found {}",
            fields.len()
        ));
    }
    if fields[0].is_empty() {
        return Err("empty user id".into());
    }
    let t_entry: i64 = fields[1]
        .trim()
        .parse()
        .map_err(|e| format!("t_entry: {e}"))?;
    let t_exit: i64 = fields[2]
        .trim()
        .parse()
        .map_err(|e| format!("t_exit: {e}"))?;
    let x: f64 = fields[3].trim().parse().map_err(|e| format!("x: {e}"))?;
    let y: f64 = fields[4].trim().parse().map_err(|e| format!("y: {e}"))?;
    if !x.is_finite() || !y.is_finite() {
        return Err("non-finite coordinate".into());
    }
    if t_exit < t_entry {
        return Err("t_exit precedes t_entry".into());
    }
    Ok((
        fields[0].to_string(),
        Staypoint {
            x,
            y,
            t_entry,
            t_exit,
        },
    ))
}

/// Reads `user_id\tt_entry\tt_exit\tx\ty` records, grouping by user (users in
/// lexicographic order) and sorting each user's stays by entry time.
///
/// Blank lines are ignored. Lines that fail to parse are counted; more than
/// `max_malformed` of them is an error.
pub fn parse_staypoints<R: BufRead>(
    reader: R,
    max_malformed: usize,
) -> Result<ParsedStaypoints, DataError> {
    let mut by_user: BTreeMap<String, Vec<Staypoint>> = BTreeMap::new();
    let mut malformed = 0;
    let mut first_bad: Option<(usize, String)> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line) {
            Ok((user, stay)) => by_user.entry(user).or_default().push(stay),
            Err(reason) => {
                malformed += 1;
                first_bad.get_or_insert((lineno + 1, reason));
            }
        }
    }
    if malformed > max_malformed {
        let (first_line, reason) = first_bad.unwrap_or_default();
        return Err(DataError::TooManyMalformed {
            malformed,
            limit: max_malformed,
            first_line,
            reason,
        });
    }
    let trajectories = by_user
        .into_iter()
        .map(|(user_id, mut stays)| {
            stays.sort_by_key(|s| (s.t_entry, s.t_exit));
            RawTrajectory { user_id, stays }
        })
        .collect();
    Ok(ParsedStaypoints {
        trajectories,
        malformed,
    })
}

/// Time discretization for the attribute tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketConfig {
    /// Fixed offset of local time from UTC, seconds.
    pub utc_offset_s: i64,
    pub tod_bins: u32,
    /// Ascending duration edges in seconds; `edges.len() + 1` buckets.
    pub dur_edges_s: Vec<i64>,
}

impl Default for BucketConfig {
    fn default() -> Self {
        Self {
            utc_offset_s: 9 * 3600,
            tod_bins: 24,
            dur_edges_s: vec![600, 1800, 3600, 7200, 14_400, 28_800, 57_600],
        }
    }
}

impl BucketConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.tod_bins == 0 || 86_400 % self.tod_bins != 0 {
            return Err(DataError::Buckets(format!(
                "tod_bins {} must divide 86400",
                self.tod_bins
            )));
        }
        if self.dur_edges_s.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DataError::Buckets("duration edges must ascend".into()));
        }
        if self.dur_edges_s.len() > 254 {
            return Err(DataError::Buckets("too many duration edges".into()));
        }
        Ok(())
    }

    pub fn dow_count(&self) -> usize {
        7
    }

    pub fn tod_count(&self) -> usize {
        self.tod_bins as usize
    }

    pub fn dur_count(&self) -> usize {
        self.dur_edges_s.len() + 1
    }

    /// Day of week in local time, Monday = 0.
    pub fn dow(&self, t: i64) -> u8 {
        let day = (t + self.utc_offset_s).div_euclid(86_400);
        // 1970-01-01 was a Thursday.
        ((day + 3).rem_euclid(7)) as u8
    }

    pub fn tod(&self, t: i64) -> u8 {
        let sec = (t + self.utc_offset_s).rem_euclid(86_400);
        (sec / (86_400 / i64::from(self.tod_bins))) as u8
    }

    /// Half-open buckets `[edge_{k-1}, edge_k)`; bucket 0 is below the first edge.
    pub fn dur(&self, seconds: i64) -> u8 {
        self.dur_edges_s
            .iter()
            .take_while(|&&e| seconds >= e)
            .count() as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Step {
    pub place: u32,
    pub dow: u8,
    pub tod: u8,
    pub dur: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedTrajectory {
    pub steps: Vec<Step>,
}

impl TokenizedTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Number of next-place targets.
    pub fn predictions(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }
}

/// Maps every stay of `traj` onto place and attribute tokens.
pub fn tokenize(
    traj: &RawTrajectory,
    vocab: &HierarchicalVocabulary,
    buckets: &BucketConfig,
) -> Result<TokenizedTrajectory, DataError> {
    let spec = vocab.spec();
    let finest = spec.finest();
    let steps = traj
        .stays
        .iter()
        .map(|s| {
            let cell = spec.cell_at(s.x, s.y, finest)?;
            let place = vocab.id_of(cell).ok_or(DataError::UnknownCell {
                col: cell.col,
                row: cell.row,
            })?;
            Ok(Step {
                place,
                dow: buckets.dow(s.t_entry),
                tod: buckets.tod(s.t_entry),
                dur: buckets.dur(s.duration()),
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(TokenizedTrajectory { steps })
}

/// Tokenizes and cuts each trajectory into consecutive pieces of at most
/// `max_len` steps, dropping pieces with fewer than two steps.
pub fn tokenize_all(
    trajs: &[RawTrajectory],
    vocab: &HierarchicalVocabulary,
    buckets: &BucketConfig,
    max_len: usize,
) -> Result<Vec<TokenizedTrajectory>, DataError> {
    let max_len = max_len.max(2);
    let mut out = Vec::with_capacity(trajs.len());
    for traj in trajs {
        let tokens = tokenize(traj, vocab, buckets)?;
        for chunk in tokens.steps.chunks(max_len) {
            if chunk.len() >= 2 {
                out.push(TokenizedTrajectory {
                    steps: chunk.to_vec(),
                });
            }
        }
    }
    Ok(out)
}

/// Every finest-level cell visited by any of the trajectories.
pub fn observed_cells(
    trajs: &[RawTrajectory],
    spec: &GridSpec,
) -> Result<Vec<crate::grid::CellIndex>, GridError> {
    let finest = spec.finest();
    let mut cells = Vec::new();
    for t in trajs {
        for s in &t.stays {
            cells.push(spec.cell_at(s.x, s.y, finest)?);
        }
    }
    cells.sort_unstable();
    cells.dedup();
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<TokenizedTrajectory>,
    pub validation: Vec<TokenizedTrajectory>,
    pub test: Vec<TokenizedTrajectory>,
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

/// Sizes of the (train, validation, test) parts for `n` items.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> (usize, usize, usize) {
    let total: f64 = ratios.iter().sum();
    let val = ((n as f64) * ratios[1] / total).round() as usize;
    let test = ((n as f64) * ratios[2] / total).round() as usize;
    let val = val.min(n);
    let test = test.min(n - val);
    (n - val - test, val, test)
}

/// Seeded shuffle then cut by whole trajectory.
pub fn split_dataset(
    mut trajs: Vec<TokenizedTrajectory>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(DataError::Ratios(ratios));
    }
    if trajs.len() < 10 {
        return Err(DataError::TooFewTrajectories {
            needed: 10,
            got: trajs.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    trajs.shuffle(&mut rng);
    let (n_train, n_val, _) = split_sizes(trajs.len(), ratios);
    let mut rest = trajs.split_off(n_train);
    let test = rest.split_off(n_val);
    Ok(DatasetSplit {
        train: trajs,
        validation: rest,
        test,
    })
}

/// Visits per place token, counted over `trajs`.
pub fn visit_counts(trajs: &[TokenizedTrajectory], vocab_size: usize) -> Vec<u64> {
    let mut counts = vec![0u64; vocab_size];
    for t in trajs {
        for s in &t.steps {
            counts[s.place as usize] += 1;
        }
    }
    counts
}
