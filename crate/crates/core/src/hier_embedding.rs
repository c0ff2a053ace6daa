//! Place embedding matrix with per-level column slices.
//!
//! Columns `[0, d)` of every place row are split into one slice per upper
//! grid level (coarsest first) followed by the place's own slice. Averaging
//! replaces, for each region on a level, that level's slice of every member
//! row with the region mean. Because the vocabulary keeps each region's rows
//! contiguous, a region is one block of consecutive rows.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Parameter, Scalar, Tensor};
use crate::grid::HierarchicalVocabulary;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("unknown method `{0}` (expected hier, hier1km, hier10km or nonhier)")]
    UnknownMethod(String),
    #[error("slice widths {widths:?} leave no place columns in d = {d}")]
    WidthsExceed { widths: Vec<usize>, d: usize },
    #[error("method {method} needs a grid with at least {needed} levels, found {found}")]
    GridTooShallow {
        method: Method,
        needed: usize,
        found: usize,
    },
    #[error("slice levels must be distinct upper levels in coarse-to-fine order")]
    BadLevels,
    #[error("embedding matrix is {got:?}, expected [{rows}, {cols}]")]
    Shape {
        got: [usize; 2],
        rows: usize,
        cols: usize,
    },
    #[error("region rows {start}..{end} exceed the matrix")]
    NotContiguous { start: usize, end: usize },
}

/// Which upper levels share embedding slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Coarse (10 km) and fine (1 km) upper levels.
    Hier,
    /// Fine upper level only.
    Hier1km,
    /// Coarse upper level only.
    Hier10km,
    /// No sharing.
    Nonhier,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Hier,
        Method::Hier1km,
        Method::Hier10km,
        Method::Nonhier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Hier => "hier",
            Method::Hier1km => "hier1km",
            Method::Hier10km => "hier10km",
            Method::Nonhier => "nonhier",
        }
    }

    /// (uses coarse level, uses fine upper level) and their widths at d = 64.
    fn slices_at_64(self) -> (Option<usize>, Option<usize>) {
        match self {
            Method::Hier => (Some(12), Some(20)),
            Method::Hier1km => (None, Some(20)),
            Method::Hier10km => (Some(12), None),
            Method::Nonhier => (None, None),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = EmbeddingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| EmbeddingError::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSlice {
    /// Grid level index (0 = coarsest).
    pub level: usize,
    pub width: usize,
}

/// Column layout of an embedding row: level slices then the place slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlicePartition {
    d: usize,
    levels: Vec<LevelSlice>,
}

impl SlicePartition {
    pub fn new(d: usize, levels: Vec<LevelSlice>) -> Result<Self, EmbeddingError> {
        let widths: Vec<usize> = levels.iter().map(|l| l.width).collect();
        if widths.iter().sum::<usize>() >= d {
            return Err(EmbeddingError::WidthsExceed { widths, d });
        }
        if levels.windows(2).any(|w| w[0].level >= w[1].level)
            || levels.iter().any(|l| l.width == 0)
        {
            return Err(EmbeddingError::BadLevels);
        }
        Ok(Self { d, levels })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn levels(&self) -> &[LevelSlice] {
        &self.levels
    }

    pub fn place_width(&self) -> usize {
        self.d - self.levels.iter().map(|l| l.width).sum::<usize>()
    }

    /// Columns of the `i`-th level slice.
    pub fn columns(&self, i: usize) -> Range<usize> {
        let start: usize = self.levels[..i].iter().map(|l| l.width).sum();
        start..start + self.levels[i].width
    }

    pub fn place_columns(&self) -> Range<usize> {
        self.d - self.place_width()..self.d
    }

    /// Widths in column order, the place slice last.
    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.levels.iter().map(|l| l.width).collect();
        w.push(self.place_width());
        w
    }

    /// `name:width` pairs joined by commas, e.g. `10km:12,1km:20,place:32`.
    pub fn describe(&self, level_names: &[String]) -> String {
        let mut parts: Vec<String> = self
            .levels
            .iter()
            .map(|l| format!("{}:{}", level_names[l.level], l.width))
            .collect();
        parts.push(format!("place:{}", self.place_width()));
        parts.join(",")
    }

    /// Inverse of [`describe`](Self::describe).
    pub fn parse(d: usize, text: &str, level_names: &[String]) -> Result<Self, EmbeddingError> {
        let mut levels = Vec::new();
        let mut place = None;
        for part in text.split(',') {
            let (name, width) = part.split_once(':').ok_or(EmbeddingError::BadLevels)?;
            let width: usize = width.parse().map_err(|_| EmbeddingError::BadLevels)?;
            if name == "place" {
                place = Some(width);
            } else {
                let level = level_names
                    .iter()
                    .position(|n| n == name)
                    .ok_or(EmbeddingError::BadLevels)?;
                levels.push(LevelSlice { level, width });
            }
        }
        let partition = Self::new(d, levels)?;
        if place != Some(partition.place_width()) {
            return Err(EmbeddingError::BadLevels);
        }
        Ok(partition)
    }
}

/// Slice layout of `method` for width `d` on a grid with `num_levels` levels.
///
/// At `d = 64` the widths are hier (12, 20 | 32), hier1km (20 | 44),
/// hier10km (12 | 52), nonhier (| 64). Other `d` scale the level widths
/// proportionally, rounding half to even.
pub fn make_partition(
    method: Method,
    d: usize,
    num_levels: usize,
) -> Result<SlicePartition, EmbeddingError> {
    let (coarse, fine) = method.slices_at_64();
    let needed = match (coarse, fine) {
        (Some(_), Some(_)) => 3,
        (None, None) => 1,
        _ => 2,
    };
    if num_levels < needed {
        return Err(EmbeddingError::GridTooShallow {
            method,
            needed,
            found: num_levels,
        });
    }
    let scale = |w: usize| ((w * d) as f64 / 64.0).round_ties_even() as usize;
    let mut levels = Vec::new();
    if let Some(w) = coarse {
        levels.push(LevelSlice {
            level: 0,
            width: scale(w),
        });
    }
    if let Some(w) = fine {
        levels.push(LevelSlice {
            level: num_levels - 2,
            width: scale(w),
        });
    }
    levels.retain(|l| l.width > 0);
    SlicePartition::new(d, levels)
}

/// The `|V| x d` place embedding with its slice partition and vocabulary.
#[derive(Debug, Clone)]
pub struct HierEmbedding<F> {
    pub matrix: Parameter<F>,
    partition: SlicePartition,
    vocab: Arc<HierarchicalVocabulary>,
    /// Also average the Adam moments of level slices.
    pub average_moments: bool,
}

impl<F: Scalar> HierEmbedding<F> {
    pub fn new(
        matrix: Parameter<F>,
        partition: SlicePartition,
        vocab: Arc<HierarchicalVocabulary>,
    ) -> Result<Self, EmbeddingError> {
        let [rows, cols] = matrix.value.shape();
        if rows != vocab.len() || cols != partition.d() {
            return Err(EmbeddingError::Shape {
                got: [rows, cols],
                rows: vocab.len(),
                cols: partition.d(),
            });
        }
        if partition
            .levels()
            .iter()
            .any(|l| l.level >= vocab.spec().finest())
        {
            return Err(EmbeddingError::BadLevels);
        }
        Ok(Self {
            matrix,
            partition,
            vocab,
            average_moments: false,
        })
    }

    /// Uniform initialization in `[-bound, bound]`.
    pub fn random<R: Rng>(
        partition: SlicePartition,
        vocab: Arc<HierarchicalVocabulary>,
        bound: f64,
        rng: &mut R,
    ) -> Result<Self, EmbeddingError> {
        let value = Tensor::from_fn(vocab.len(), partition.d(), |_, _| {
            F::from_f64_lossy(rng.random_range(-bound..=bound))
        });
        Self::new(Parameter::new("places", value), partition, vocab)
    }

    pub fn partition(&self) -> &SlicePartition {
        &self.partition
    }

    pub fn vocab(&self) -> &Arc<HierarchicalVocabulary> {
        &self.vocab
    }

    /// Region-wise slice averaging over every level of the partition.
    pub fn average_slices(&mut self) -> Result<(), EmbeddingError> {
        let mut tensors = vec![&mut self.matrix.value];
        if self.average_moments {
            tensors.push(&mut self.matrix.adam_m);
            tensors.push(&mut self.matrix.adam_v);
        }
        for t in tensors {
            average_tensor_slices(t, &self.partition, &self.vocab)?;
        }
        Ok(())
    }

    /// Largest absolute difference inside any (region, level slice) block.
    pub fn max_region_spread(&self) -> f64 {
        let m = &self.matrix.value;
        let mut worst = 0.0f64;
        for (i, slice) in self.partition.levels().iter().enumerate() {
            let cols = self.partition.columns(i);
            for (_, rows) in self.vocab.regions(slice.level) {
                for c in cols.clone() {
                    let first = m.get(rows.start, c).as_f64();
                    for r in rows.clone() {
                        worst = worst.max((m.get(r, c).as_f64() - first).abs());
                    }
                }
            }
        }
        worst
    }
}

/// Averages the level slices of a `|V| x d` tensor region by region.
///
/// Each region block is read once to form the column means and written once.
/// The mean is taken as `x_first + sum(x - x_first) / n`, which returns
/// `x_first` exactly when a column is already uniform, so a second pass
/// changes nothing.
pub fn average_tensor_slices<F: Scalar>(
    t: &mut Tensor<F>,
    partition: &SlicePartition,
    vocab: &HierarchicalVocabulary,
) -> Result<(), EmbeddingError> {
    let d = t.cols();
    let n_rows = t.rows();
    let mut acc: Vec<F> = Vec::new();
    for (i, slice) in partition.levels().iter().enumerate() {
        let cols = partition.columns(i);
        let w = cols.len();
        for (_, rows) in vocab.regions(slice.level) {
            if rows.end > n_rows || rows.start >= rows.end {
                return Err(EmbeddingError::NotContiguous {
                    start: rows.start,
                    end: rows.end,
                });
            }
            let n = rows.len();
            if n == 1 {
                continue;
            }
            let block = t.rows_slice_mut(rows.start, rows.end);
            acc.clear();
            acc.resize(w, F::zero());
            let (first, rest) = block.split_at_mut(d);
            let base = &first[cols.clone()];
            for row in rest.chunks_exact(d) {
                for ((a, &x), &b) in acc.iter_mut().zip(&row[cols.clone()]).zip(base) {
                    *a += x - b;
                }
            }
            let inv_n = F::from_usize(n).expect("row count fits").recip();
            for (a, &b) in acc.iter_mut().zip(base) {
                *a = b + *a * inv_n;
            }
            for row in block.chunks_exact_mut(d) {
                row[cols.clone()].copy_from_slice(&acc);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{CellIndex, GridSpec};

    fn names() -> Vec<String> {
        vec!["10km".into(), "1km".into(), "125m".into()]
    }

    #[test]
    fn paper_partitions() {
        let p = make_partition(Method::Hier, 64, 3).unwrap();
        assert_eq!(p.widths(), vec![12, 20, 32]);
        assert_eq!(p.levels()[0].level, 0);
        assert_eq!(p.levels()[1].level, 1);
        assert_eq!(p.columns(1), 12..32);
        assert_eq!(p.place_columns(), 32..64);
        let p = make_partition(Method::Hier1km, 64, 3).unwrap();
        assert_eq!(p.widths(), vec![20, 44]);
        assert_eq!(p.levels()[0].level, 1);
        assert_eq!(
            make_partition(Method::Hier10km, 64, 3).unwrap().widths(),
            vec![12, 52]
        );
        assert_eq!(
            make_partition(Method::Nonhier, 64, 3).unwrap().widths(),
            vec![64]
        );
    }

    #[test]
    fn scaled_partition_and_guards() {
        assert_eq!(
            make_partition(Method::Hier, 8, 3).unwrap().widths(),
            vec![2, 2, 4]
        );
        assert!(matches!(
            SlicePartition::new(
                64,
                vec![
                    LevelSlice {
                        level: 0,
                        width: 40
                    },
                    LevelSlice {
                        level: 1,
                        width: 40
                    }
                ]
            ),
            Err(EmbeddingError::WidthsExceed { .. })
        ));
        assert!(SlicePartition::new(
            64,
            vec![LevelSlice {
                level: 0,
                width: 64
            }]
        )
        .is_err());
        assert!(matches!(
            make_partition(Method::Hier, 64, 2),
            Err(EmbeddingError::GridTooShallow { .. })
        ));
        assert!("hier2km".parse::<Method>().is_err());
        assert_eq!("hier10km".parse::<Method>().unwrap(), Method::Hier10km);
    }

    #[test]
    fn describe_round_trip() {
        for m in Method::ALL {
            let p = make_partition(m, 64, 3).unwrap();
            let text = p.describe(&names());
            assert_eq!(SlicePartition::parse(64, &text, &names()).unwrap(), p);
        }
        assert_eq!(
            make_partition(Method::Hier, 64, 3)
                .unwrap()
                .describe(&names()),
            "10km:12,1km:20,place:32"
        );
    }

    fn vocab(cells: &[(u32, u32)]) -> Arc<HierarchicalVocabulary> {
        let spec = GridSpec::default();
        Arc::new(
            HierarchicalVocabulary::build(
                cells.iter().map(|&(c, r)| CellIndex::new(2, c, r)),
                &spec,
            )
            .unwrap(),
        )
    }

    #[test]
    fn single_place_region_unchanged() {
        let v = vocab(&[(0, 0)]);
        let p = make_partition(Method::Hier, 8, 3).unwrap();
        let m = Tensor::<f64>::from_fn(1, 8, |_, c| c as f64 + 0.5);
        let mut e = HierEmbedding::new(Parameter::new("e", m.clone()), p, v).unwrap();
        e.average_slices().unwrap();
        assert_eq!(e.matrix.value, m);
    }

    #[test]
    fn two_place_mean() {
        let v = vocab(&[(0, 0), (1, 0)]);
        let p = make_partition(Method::Hier, 8, 3).unwrap();
        let m = Tensor::<f64>::from_fn(
            2,
            8,
            |r, c| if r == 0 { 1.0 } else { 3.0 } + 10.0 * c as f64,
        );
        let mut e = HierEmbedding::new(Parameter::new("e", m.clone()), p, v).unwrap();
        e.average_slices().unwrap();
        for c in 0..4 {
            assert_eq!(e.matrix.value.get(0, c), 2.0 + 10.0 * c as f64);
            assert_eq!(e.matrix.value.get(1, c), 2.0 + 10.0 * c as f64);
        }
        for c in 4..8 {
            assert_eq!(e.matrix.value.get(0, c), m.get(0, c));
            assert_eq!(e.matrix.value.get(1, c), m.get(1, c));
        }
        assert_eq!(e.max_region_spread(), 0.0);
    }

    #[test]
    fn moments_untouched_unless_enabled() {
        let v = vocab(&[(0, 0), (1, 0)]);
        let p = make_partition(Method::Hier1km, 8, 3).unwrap();
        let m = Tensor::<f64>::from_fn(2, 8, |r, c| (r * 8 + c) as f64);
        let mut e = HierEmbedding::new(Parameter::new("e", m.clone()), p, v).unwrap();
        e.matrix.adam_m = m.clone();
        e.average_slices().unwrap();
        assert_eq!(e.matrix.adam_m, m);
        e.average_moments = true;
        e.average_slices().unwrap();
        assert_eq!(e.matrix.adam_m.get(0, 0), 4.0);
    }

    #[test]
    fn shape_checked() {
        let v = vocab(&[(0, 0), (1, 0)]);
        let p = make_partition(Method::Hier, 8, 3).unwrap();
        assert!(matches!(
            HierEmbedding::new(Parameter::new("e", Tensor::<f64>::zeros(3, 8)), p, v),
            Err(EmbeddingError::Shape { .. })
        ));
    }
}
