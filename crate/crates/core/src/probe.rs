//! Land-use probe: label merging and aggregation, a linear classifier over
//! frozen place embeddings, and accuracy by visit-count stratum.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::EmbeddingExport;
use crate::engine::{affine, affine_backward, softmax_cross_entropy_rows, Adam, Parameter, Tensor};
use crate::stats::percentile;
use crate::trajectories::{split_sizes, DEFAULT_RATIOS};

pub const RAW_CODES: u8 = 17;
pub const CLASSES: usize = 15;

pub const CLASS_NAMES: [&str; CLASSES] = [
    "farmland",
    "forest",
    "waste",
    "high-rise",
    "factories",
    "low-rise",
    "roads",
    "railroads",
    "public facilities",
    "vacant ground",
    "parks",
    "rivers/lakes",
    "seashore",
    "sea areas",
    "golf courses",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbeError {
    #[error("unknown land-use code {0} (expected 1..=17)")]
    UnknownCode(u32),
    #[error("invalid label merge: {0}")]
    Merge(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("no embedded place has a land-use label")]
    NoOverlap,
    #[error("split `{0}` is empty")]
    EmptySplit(&'static str),
    #[error("stratum `{0}` has no test examples")]
    EmptyStratum(Stratum),
    #[error("probe training diverged at epoch {0}")]
    Divergence(usize),
    #[error("{0} visit counts for {1} tokens")]
    VisitCounts(usize, usize),
}

/// Raw code (1..=17) to merged class (0..15).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMerge {
    map: [u8; RAW_CODES as usize],
}

impl Default for LabelMerge {
    /// Rice fields and other farmland become farmland; dense and ordinary
    /// low-rise buildings become low-rise; every other code keeps its place.
    fn default() -> Self {
        let mut map = [0u8; RAW_CODES as usize];
        let mut class = 0u8;
        for code in 1..=RAW_CODES {
            map[code as usize - 1] = class;
            if code != 1 && code != 7 {
                class += 1;
            }
        }
        Self { map }
    }
}

impl LabelMerge {
    /// `map[code - 1]` is the class of `code`; must cover all 15 classes.
    pub fn new(map: [u8; RAW_CODES as usize]) -> Result<Self, ProbeError> {
        if let Some(c) = map.iter().find(|&&c| c as usize >= CLASSES) {
            return Err(ProbeError::Merge(format!("class {c} out of range")));
        }
        for class in 0..CLASSES as u8 {
            if !map.contains(&class) {
                return Err(ProbeError::Merge(format!(
                    "class {class} has no source code"
                )));
            }
        }
        Ok(Self { map })
    }

    /// Lines of `code class`; codes not listed keep the default mapping.
    pub fn parse(text: &str) -> Result<Self, ProbeError> {
        let mut map = Self::default().map;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| ProbeError::Parse {
                line: i + 1,
                msg: msg.to_string(),
            };
            let mut f = line.split_whitespace();
            let code: u32 = f
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad code"))?;
            let class: u8 = f
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad class"))?;
            if !(1..=u32::from(RAW_CODES)).contains(&code) {
                return Err(ProbeError::UnknownCode(code));
            }
            map[code as usize - 1] = class;
        }
        Self::new(map)
    }

    pub fn class_of(&self, code: u32) -> Result<u8, ProbeError> {
        if !(1..=u32::from(RAW_CODES)).contains(&code) {
            return Err(ProbeError::UnknownCode(code));
        }
        Ok(self.map[code as usize - 1])
    }
}

/// Raw land-use codes of 100 m cells keyed by (col, row).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LandUseGrid {
    pub cells: BTreeMap<(u32, u32), u8>,
}

impl LandUseGrid {
    pub fn insert(&mut self, col: u32, row: u32, code: u32) -> Result<(), ProbeError> {
        if !(1..=u32::from(RAW_CODES)).contains(&code) {
            return Err(ProbeError::UnknownCode(code));
        }
        self.cells.insert((col, row), code as u8);
        Ok(())
    }

    /// Lines `col<TAB>row<TAB>code`.
    pub fn parse<R: BufRead>(input: R) -> Result<Self, ProbeError> {
        let mut grid = Self::default();
        for (i, line) in input.lines().enumerate() {
            let bad = |msg: String| ProbeError::Parse { line: i + 1, msg };
            let line = line.map_err(|e| bad(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad(format!("expected 3 fields, found {}", f.len())));
            }
            let num =
                |s: &str| u32::from_str(s.trim()).map_err(|_| bad(format!("not a number: {s:?}")));
            grid.insert(num(f[0])?, num(f[1])?, num(f[2])?)?;
        }
        Ok(grid)
    }
}

/// Majority merged class per 500 m cell (5 x 5 blocks of 100 m cells);
/// ties go to the smallest class index.
pub fn aggregate_to_500m(grid: &LandUseGrid, merge: &LabelMerge) -> BTreeMap<(u32, u32), u8> {
    let mut counts: BTreeMap<(u32, u32), [u32; CLASSES]> = BTreeMap::new();
    for (&(col, row), &code) in &grid.cells {
        let class = merge
            .class_of(u32::from(code))
            .expect("codes validated on insert");
        counts.entry((col / 5, row / 5)).or_insert([0; CLASSES])[class as usize] += 1;
    }
    counts
        .into_iter()
        .map(|(cell, c)| {
            let mut best = 0;
            for k in 1..CLASSES {
                if c[k] > c[best] {
                    best = k;
                }
            }
            (cell, best as u8)
        })
        .collect()
}

/// Label of each token from the 500 m cell containing it (4 x 4 nesting of
/// 125 m cells).
pub fn token_labels_500m(
    cells: &[(u32, u32)],
    labels500: &BTreeMap<(u32, u32), u8>,
) -> Vec<Option<u8>> {
    cells
        .iter()
        .map(|&(c, r)| labels500.get(&(c / 4, r / 4)).copied())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stratum {
    All,
    /// Visit count at or below the 30th percentile.
    Rural,
}

impl Stratum {
    pub fn name(self) -> &'static str {
        match self {
            Stratum::All => "all",
            Stratum::Rural => "rural",
        }
    }
}

impl std::fmt::Display for Stratum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeExample {
    pub token: usize,
    pub cell: (u32, u32),
    pub features: Vec<f32>,
    pub class: u8,
    pub visits: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub examples: Vec<ProbeExample>,
    /// Indices into `examples`.
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    /// Examples with at most this many visits form the rural stratum.
    pub rural_threshold: f64,
}

impl ProbeDataset {
    /// One example per labeled token. The split depends only on the labeled
    /// token IDs and `seed`, so every method's embeddings see the same one.
    /// `visits[t]` is the training-split visit count of token `t`.
    pub fn build(
        export: &EmbeddingExport,
        labels: &[Option<u8>],
        visits: &[u64],
        seed: u64,
    ) -> Result<Self, ProbeError> {
        let n = export.cells.len();
        if visits.len() != n || labels.len() != n {
            return Err(ProbeError::VisitCounts(visits.len().min(labels.len()), n));
        }
        let examples: Vec<ProbeExample> = (0..n)
            .filter_map(|t| {
                labels[t].map(|class| ProbeExample {
                    token: t,
                    cell: export.cells[t],
                    features: export.values.row(t).to_vec(),
                    class,
                    visits: visits[t],
                })
            })
            .collect();
        if examples.is_empty() {
            return Err(ProbeError::NoOverlap);
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (n_train, n_val, _) = split_sizes(order.len(), DEFAULT_RATIOS);
        let mut test = order.split_off(n_train + n_val);
        let mut validation = order.split_off(n_train);
        let mut train = order;
        train.sort_unstable();
        validation.sort_unstable();
        test.sort_unstable();
        // Over every place of the dataset, labeled or not.
        let counts: Vec<f64> = visits.iter().map(|&v| v as f64).collect();
        Ok(Self {
            rural_threshold: percentile(&counts, 30.0),
            examples,
            train,
            validation,
            test,
        })
    }

    pub fn in_stratum(&self, i: usize, stratum: Stratum) -> bool {
        match stratum {
            Stratum::All => true,
            Stratum::Rural => self.examples[i].visits as f64 <= self.rural_threshold,
        }
    }

    fn d(&self) -> usize {
        self.examples[0].features.len()
    }

    fn features(&self, idx: &[usize]) -> Tensor<f64> {
        let d = self.d();
        Tensor::from_fn(idx.len(), d, |r, c| {
            f64::from(self.examples[idx[r]].features[c])
        })
    }

    fn targets(&self, idx: &[usize]) -> Vec<u32> {
        idx.iter()
            .map(|&i| u32::from(self.examples[i].class))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub optimizer: Adam,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            optimizer: Adam {
                lr: 1e-2,
                ..Adam::default()
            },
            seed: 0,
        }
    }
}

/// A single affine layer over the embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub weight: Tensor<f64>,
    pub bias: Tensor<f64>,
    /// Epoch (1-based) with the best validation accuracy.
    pub selected_epoch: usize,
    pub val_accuracy: f64,
}

impl LinearProbe {
    pub fn predict(&self, features: &[f32]) -> u8 {
        let mut best = (f64::NEG_INFINITY, 0);
        for k in 0..self.weight.cols() {
            let mut z = self.bias.get(0, k);
            for (j, &x) in features.iter().enumerate() {
                z += f64::from(x) * self.weight.get(j, k);
            }
            if z > best.0 {
                best = (z, k);
            }
        }
        best.1 as u8
    }
}

fn accuracy_of(logits: &Tensor<f64>, targets: &[u32]) -> f64 {
    let correct = (0..logits.rows())
        .filter(|&r| {
            let row = logits.row(r);
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best as u32 == targets[r]
        })
        .count();
    correct as f64 / targets.len() as f64
}

/// Full-batch training; keeps the weights of the best validation accuracy
/// (earliest epoch on ties).
pub fn train_probe(ds: &ProbeDataset, cfg: &ProbeConfig) -> Result<LinearProbe, ProbeError> {
    if ds.train.is_empty() {
        return Err(ProbeError::EmptySplit("train"));
    }
    if ds.validation.is_empty() {
        return Err(ProbeError::EmptySplit("validation"));
    }
    let d = ds.d();
    let bound = 1.0 / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = Parameter::new(
        "probe.weight",
        Tensor::from_fn(d, CLASSES, |_, _| rng.random_range(-bound..bound)),
    );
    let mut b = Parameter::new("probe.bias", Tensor::zeros(1, CLASSES));
    let x = ds.features(&ds.train);
    let y = ds.targets(&ds.train);
    let xv = ds.features(&ds.validation);
    let yv = ds.targets(&ds.validation);
    let scale = 1.0 / y.len() as f64;
    let mut best: Option<LinearProbe> = None;
    for epoch in 1..=cfg.epochs {
        w.zero_grad();
        b.zero_grad();
        let mut logits = affine(&x, &w, &b).expect("probe shapes");
        let loss = softmax_cross_entropy_rows(&mut logits, &y, Some(scale)).expect("probe targets");
        if !loss.is_finite() {
            return Err(ProbeError::Divergence(epoch));
        }
        affine_backward(&x, &logits, &mut w, &mut b);
        cfg.optimizer
            .step(&mut [&mut w, &mut b])
            .map_err(|_| ProbeError::Divergence(epoch))?;
        let acc = accuracy_of(&affine(&xv, &w, &b).expect("probe shapes"), &yv);
        if best.as_ref().is_none_or(|p| acc > p.val_accuracy) {
            best = Some(LinearProbe {
                weight: w.value.clone(),
                bias: b.value.clone(),
                selected_epoch: epoch,
                val_accuracy: acc,
            });
        }
    }
    best.ok_or(ProbeError::EmptySplit("epochs"))
}

/// 15 x 15 counts, rows = truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; CLASSES]; CLASSES],
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self {
            counts: [[0; CLASSES]; CLASSES],
        }
    }
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..CLASSES).map(|k| self.counts[k][k]).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("truth\\predicted");
        for name in CLASS_NAMES {
            let _ = write!(out, ",{name}");
        }
        out.push('\n');
        for (k, row) in self.counts.iter().enumerate() {
            out.push_str(CLASS_NAMES[k]);
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeEvaluation {
    pub stratum: Stratum,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Accuracy over the test examples of a stratum.
pub fn evaluate_probe(
    probe: &LinearProbe,
    ds: &ProbeDataset,
    stratum: Stratum,
) -> Result<ProbeEvaluation, ProbeError> {
    let mut confusion = ConfusionMatrix::default();
    for &i in ds.test.iter().filter(|&&i| ds.in_stratum(i, stratum)) {
        let e = &ds.examples[i];
        confusion.counts[e.class as usize][probe.predict(&e.features) as usize] += 1;
    }
    if confusion.total() == 0 {
        return Err(ProbeError::EmptyStratum(stratum));
    }
    Ok(ProbeEvaluation {
        stratum,
        accuracy: confusion.correct() as f64 / confusion.total() as f64,
        confusion,
    })
}

/// Lines `col<TAB>row<TAB>class` with the probe's prediction for every example.
pub fn predicted_classes(probe: &LinearProbe, ds: &ProbeDataset) -> String {
    let mut out = String::new();
    for e in &ds.examples {
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            e.cell.0,
            e.cell.1,
            probe.predict(&e.features)
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyRow {
    pub city: String,
    pub method: String,
    pub stratum: Stratum,
    pub mean: f64,
    pub std: f64,
}

pub fn accuracy_csv(rows: &[AccuracyRow]) -> String {
    let mut out = String::from("city,method,stratum,mean,std\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6}",
            r.city, r.method, r.stratum, r.mean, r.std
        );
    }
    out
}
