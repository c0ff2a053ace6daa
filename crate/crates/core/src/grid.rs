//! Planar hierarchical grids and the region-grouped place vocabulary.
//!
//! Levels are ordered coarsest first. Every coarser cell is tiled exactly by
//! finer cells, so a fine cell has exactly one parent on each upper level.
//! The vocabulary orders place tokens so that the places of any upper-level
//! region occupy one contiguous run of token IDs.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid needs at least one level")]
    NoLevels,
    #[error("unknown grid level `{0}`")]
    UnknownLevel(String),
    #[error(
        "level `{coarse}` ({coarse_size} m) is not strictly coarser than `{fine}` ({fine_size} m)"
    )]
    NotDecreasing {
        coarse: String,
        coarse_size: u32,
        fine: String,
        fine_size: u32,
    },
    #[error("cell size {coarse_size} m is not an integer multiple of {fine_size} m")]
    Misaligned { coarse_size: u32, fine_size: u32 },
    #[error("cell size must be positive (level `{0}`)")]
    ZeroCellSize(String),
    #[error("duplicate level name `{0}`")]
    DuplicateLevel(String),
    #[error("point ({x}, {y}) lies below the grid origin")]
    BelowOrigin { x: f64, y: f64 },
    #[error("target level {to} is not coarser than level {from}")]
    NotCoarser { from: usize, to: usize },
    #[error("cell is not on the finest level")]
    NotFinest,
    #[error("cannot build a vocabulary from an empty cell set")]
    EmptyVocabulary,
    #[error("region ({col}, {row}) is not present on level {level}")]
    UnknownRegion { level: usize, col: u32, row: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridLevel {
    pub name: String,
    pub cell_size: u32,
}

impl GridLevel {
    pub fn new(name: impl Into<String>, cell_size: u32) -> Self {
        Self {
            name: name.into(),
            cell_size,
        }
    }
}

/// Aligned planar grid levels sharing one origin, coarsest level first.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    origin_x: f64,
    origin_y: f64,
    levels: Vec<GridLevel>,
}

impl Default for GridSpec {
    /// 10 km / 1 km / 125 m at origin (0, 0).
    fn default() -> Self {
        Self::new(
            0.0,
            0.0,
            vec![
                GridLevel::new("10km", 10_000),
                GridLevel::new("1km", 1_000),
                GridLevel::new("125m", 125),
            ],
        )
        .expect("default grid is valid")
    }
}

impl GridSpec {
    pub fn new(origin_x: f64, origin_y: f64, levels: Vec<GridLevel>) -> Result<Self, GridError> {
        if levels.is_empty() {
            return Err(GridError::NoLevels);
        }
        for (i, level) in levels.iter().enumerate() {
            if level.cell_size == 0 {
                return Err(GridError::ZeroCellSize(level.name.clone()));
            }
            if levels[..i].iter().any(|l| l.name == level.name) {
                return Err(GridError::DuplicateLevel(level.name.clone()));
            }
        }
        for pair in levels.windows(2) {
            let (coarse, fine) = (&pair[0], &pair[1]);
            if coarse.cell_size <= fine.cell_size {
                return Err(GridError::NotDecreasing {
                    coarse: coarse.name.clone(),
                    coarse_size: coarse.cell_size,
                    fine: fine.name.clone(),
                    fine_size: fine.cell_size,
                });
            }
        }
        // Adjacent divisibility implies divisibility for every coarse/fine pair.
        for pair in levels.windows(2) {
            if pair[0].cell_size % pair[1].cell_size != 0 {
                return Err(GridError::Misaligned {
                    coarse_size: pair[0].cell_size,
                    fine_size: pair[1].cell_size,
                });
            }
        }
        Ok(Self {
            origin_x,
            origin_y,
            levels,
        })
    }

    pub fn origin(&self) -> (f64, f64) {
        (self.origin_x, self.origin_y)
    }

    pub fn levels(&self) -> &[GridLevel] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn finest(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level_index(&self, name: &str) -> Result<usize, GridError> {
        self.levels
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| GridError::UnknownLevel(name.to_string()))
    }

    pub fn level(&self, index: usize) -> &GridLevel {
        &self.levels[index]
    }

    /// Number of `fine` cells along one side of a `coarse` cell.
    pub fn ratio(&self, coarse: usize, fine: usize) -> u32 {
        self.levels[coarse].cell_size / self.levels[fine].cell_size
    }

    /// Cell containing `(x, y)` on the named level. Cells are half-open.
    pub fn cell_of(&self, x: f64, y: f64, level: &str) -> Result<CellIndex, GridError> {
        let index = self.level_index(level)?;
        self.cell_at(x, y, index)
    }

    pub fn cell_at(&self, x: f64, y: f64, level: usize) -> Result<CellIndex, GridError> {
        let dx = x - self.origin_x;
        let dy = y - self.origin_y;
        if !(dx >= 0.0 && dy >= 0.0) {
            return Err(GridError::BelowOrigin { x, y });
        }
        let size = f64::from(self.levels[level].cell_size);
        Ok(CellIndex {
            level,
            col: (dx / size).floor() as u32,
            row: (dy / size).floor() as u32,
        })
    }

    /// Enclosing cell of `cell` on the strictly coarser level `to_level`.
    pub fn parent(&self, cell: CellIndex, to_level: usize) -> Result<CellIndex, GridError> {
        if to_level >= cell.level {
            return Err(GridError::NotCoarser {
                from: cell.level,
                to: to_level,
            });
        }
        let r = self.ratio(to_level, cell.level);
        Ok(CellIndex {
            level: to_level,
            col: cell.col / r,
            row: cell.row / r,
        })
    }

    pub fn parent_named(&self, cell: CellIndex, to_level: &str) -> Result<CellIndex, GridError> {
        let to = self.level_index(to_level)?;
        self.parent(cell, to)
    }

    /// South-west corner and center of a cell, in meters.
    pub fn cell_center(&self, cell: CellIndex) -> (f64, f64) {
        let size = f64::from(self.levels[cell.level].cell_size);
        (
            self.origin_x + (f64::from(cell.col) + 0.5) * size,
            self.origin_y + (f64::from(cell.row) + 0.5) * size,
        )
    }
}

/// Integer address of a grid cell; `level` indexes [`GridSpec::levels`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellIndex {
    pub level: usize,
    pub col: u32,
    pub row: u32,
}

impl CellIndex {
    pub fn new(level: usize, col: u32, row: u32) -> Self {
        Self { level, col, row }
    }

    fn row_major(self) -> (u32, u32) {
        (self.row, self.col)
    }
}

/// Equirectangular projection of WGS84 degrees onto meters around a reference latitude.
pub fn project_lonlat(lon: f64, lat: f64, ref_lat: f64) -> (f64, f64) {
    const EARTH_RADIUS_M: f64 = 6_371_008.8;
    let x = EARTH_RADIUS_M * lon.to_radians() * ref_lat.to_radians().cos();
    let y = EARTH_RADIUS_M * lat.to_radians();
    (x, y)
}

/// Place tokens on the finest level, ordered so upper-level regions are contiguous.
#[derive(Debug, Clone)]
pub struct HierarchicalVocabulary {
    spec: GridSpec,
    tokens: Vec<CellIndex>,
    id_of: HashMap<CellIndex, u32>,
    // One map per upper level (index = level).
    region_ranges: Vec<BTreeMap<CellIndex, Range<usize>>>,
}

impl PartialEq for HierarchicalVocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.tokens == other.tokens
    }
}

impl HierarchicalVocabulary {
    /// Orders tokens by (level-1 parent, level-2 parent, ..., cell), each key
    /// component compared as (row, col).
    pub fn build<I>(observed: I, spec: &GridSpec) -> Result<Self, GridError>
    where
        I: IntoIterator<Item = CellIndex>,
    {
        let finest = spec.finest();
        let mut keyed = Vec::new();
        for cell in observed {
            if cell.level != finest {
                return Err(GridError::NotFinest);
            }
            let mut key = Vec::with_capacity(spec.num_levels());
            for level in 0..finest {
                key.push(spec.parent(cell, level)?.row_major());
            }
            key.push(cell.row_major());
            keyed.push((key, cell));
        }
        if keyed.is_empty() {
            return Err(GridError::EmptyVocabulary);
        }
        keyed.sort_unstable();
        keyed.dedup_by(|a, b| a.1 == b.1);
        let tokens: Vec<CellIndex> = keyed.into_iter().map(|(_, c)| c).collect();
        Self::from_ordered(tokens, spec)
    }

    /// Rebuilds a vocabulary from a token list that is already in layout order
    /// (e.g. read back from a checkpoint). Fails if any region is not contiguous.
    pub fn from_ordered(tokens: Vec<CellIndex>, spec: &GridSpec) -> Result<Self, GridError> {
        if tokens.is_empty() {
            return Err(GridError::EmptyVocabulary);
        }
        let finest = spec.finest();
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (i, &cell) in tokens.iter().enumerate() {
            if cell.level != finest {
                return Err(GridError::NotFinest);
            }
            id_of.insert(cell, i as u32);
        }
        let mut region_ranges = Vec::with_capacity(finest);
        for level in 0..finest {
            let mut ranges: BTreeMap<CellIndex, Range<usize>> = BTreeMap::new();
            let mut start = 0;
            while start < tokens.len() {
                let region = spec.parent(tokens[start], level)?;
                let mut end = start + 1;
                while end < tokens.len() && spec.parent(tokens[end], level)? == region {
                    end += 1;
                }
                if ranges.insert(region, start..end).is_some() {
                    // The same region appeared in two separate runs.
                    return Err(GridError::UnknownRegion {
                        level,
                        col: region.col,
                        row: region.row,
                    });
                }
                start = end;
            }
            region_ranges.push(ranges);
        }
        Ok(Self {
            spec: spec.clone(),
            tokens,
            id_of,
            region_ranges,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn tokens(&self) -> &[CellIndex] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> CellIndex {
        self.tokens[id]
    }

    pub fn id_of(&self, cell: CellIndex) -> Option<u32> {
        self.id_of.get(&cell).copied()
    }

    /// Token-ID interval of the places inside `region` (a cell on an upper level).
    pub fn region_interval(&self, region: CellIndex) -> Result<Range<usize>, GridError> {
        self.region_ranges
            .get(region.level)
            .and_then(|m| m.get(&region))
            .cloned()
            .ok_or(GridError::UnknownRegion {
                level: region.level,
                col: region.col,
                row: region.row,
            })
    }

    pub fn region_interval_named(
        &self,
        level: &str,
        col: u32,
        row: u32,
    ) -> Result<Range<usize>, GridError> {
        let level = self.spec.level_index(level)?;
        self.region_interval(CellIndex::new(level, col, row))
    }

    /// All (region, interval) pairs on an upper level, in token order.
    pub fn regions(&self, level: usize) -> Vec<(CellIndex, Range<usize>)> {
        let mut out: Vec<_> = self
            .region_ranges
            .get(level)
            .map(|m| m.iter().map(|(k, v)| (*k, v.clone())).collect())
            .unwrap_or_default();
        out.sort_by_key(|(_, r)| r.start);
        out
    }

    pub fn parent_of_token(&self, id: usize, level: usize) -> CellIndex {
        self.spec
            .parent(self.tokens[id], level)
            .expect("upper level is coarser than the finest level")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn spec() -> GridSpec {
        GridSpec::default()
    }

    #[test]
    fn cell_of_examples() {
        let s = spec();
        assert_eq!(
            s.cell_of(0.0, 0.0, "125m").unwrap(),
            CellIndex::new(2, 0, 0)
        );
        assert_eq!(
            s.cell_of(999.0, 0.0, "1km").unwrap(),
            CellIndex::new(1, 0, 0)
        );
        assert_eq!(
            s.cell_of(1000.0, 0.0, "1km").unwrap(),
            CellIndex::new(1, 1, 0)
        );
        // floor(1100/125) = 8, floor(8300/125) = 66
        assert_eq!(
            s.cell_of(1100.0, 8300.0, "125m").unwrap(),
            CellIndex::new(2, 8, 66)
        );
    }

    #[test]
    fn cell_of_errors() {
        let s = spec();
        assert_eq!(
            s.cell_of(0.0, 0.0, "500m"),
            Err(GridError::UnknownLevel("500m".into()))
        );
        assert!(matches!(
            s.cell_of(-1.0, 5.0, "1km"),
            Err(GridError::BelowOrigin { .. })
        ));
        assert!(matches!(
            s.cell_of(f64::NAN, 5.0, "1km"),
            Err(GridError::BelowOrigin { .. })
        ));
    }

    #[test]
    fn parent_examples() {
        let s = spec();
        assert_eq!(
            s.parent(CellIndex::new(2, 0, 0), 1).unwrap(),
            CellIndex::new(1, 0, 0)
        );
        assert_eq!(
            s.parent(CellIndex::new(2, 9, 9), 1).unwrap(),
            CellIndex::new(1, 1, 1)
        );
        assert_eq!(
            s.parent(CellIndex::new(1, 25, 3), 0).unwrap(),
            CellIndex::new(0, 2, 0)
        );
        assert_eq!(
            s.parent(CellIndex::new(1, 25, 3), 2),
            Err(GridError::NotCoarser { from: 1, to: 2 })
        );
        assert!(s.parent(CellIndex::new(1, 25, 3), 1).is_err());
    }

    #[test]
    fn spec_validation() {
        assert_eq!(GridSpec::new(0.0, 0.0, vec![]), Err(GridError::NoLevels));
        assert!(matches!(
            GridSpec::new(
                0.0,
                0.0,
                vec![GridLevel::new("a", 100), GridLevel::new("b", 200)]
            ),
            Err(GridError::NotDecreasing { .. })
        ));
        assert!(matches!(
            GridSpec::new(
                0.0,
                0.0,
                vec![GridLevel::new("a", 1000), GridLevel::new("b", 300)]
            ),
            Err(GridError::Misaligned { .. })
        ));
        assert!(GridSpec::new(
            0.0,
            0.0,
            vec![GridLevel::new("a", 1000), GridLevel::new("a", 100)]
        )
        .is_err());
        let s = GridSpec::new(
            500.0,
            -200.0,
            vec![GridLevel::new("big", 1000), GridLevel::new("small", 250)],
        )
        .unwrap();
        assert_eq!(
            s.cell_of(500.0, -200.0, "small").unwrap(),
            CellIndex::new(1, 0, 0)
        );
        assert_eq!(s.ratio(0, 1), 4);
    }

    #[test]
    fn single_region_is_adjacent() {
        let s = spec();
        let v =
            HierarchicalVocabulary::build([CellIndex::new(2, 3, 1), CellIndex::new(2, 0, 5)], &s)
                .unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.region_interval_named("1km", 0, 0).unwrap(), 0..2);
        assert_eq!(v.region_interval_named("10km", 0, 0).unwrap(), 0..2);
    }

    #[test]
    fn interleaved_regions_are_grouped() {
        let s = spec();
        // Finest-level columns 79 and 80 straddle the 10 km boundary at col 80.
        let cells = [
            CellIndex::new(2, 80, 0),
            CellIndex::new(2, 79, 1),
            CellIndex::new(2, 81, 0),
            CellIndex::new(2, 78, 2),
        ];
        let v = HierarchicalVocabulary::build(cells, &s).unwrap();
        assert_eq!(v.region_interval_named("10km", 0, 0).unwrap(), 0..2);
        assert_eq!(v.region_interval_named("10km", 1, 0).unwrap(), 2..4);
        for id in 0..4 {
            assert_eq!(v.id_of(v.token(id)), Some(id as u32));
        }
    }

    #[test]
    fn two_equal_regions() {
        let s = spec();
        let mut cells = Vec::new();
        for i in 0..5 {
            cells.push(CellIndex::new(2, i, 0));
            cells.push(CellIndex::new(2, 8 + i, 0));
        }
        let v = HierarchicalVocabulary::build(cells, &s).unwrap();
        assert_eq!(v.region_interval_named("1km", 0, 0).unwrap(), 0..5);
        assert_eq!(v.region_interval_named("1km", 1, 0).unwrap(), 5..10);
        assert!(matches!(
            v.region_interval_named("1km", 7, 7),
            Err(GridError::UnknownRegion { .. })
        ));
    }

    #[test]
    fn vocabulary_errors_and_dedup() {
        let s = spec();
        assert_eq!(
            HierarchicalVocabulary::build(Vec::new(), &s),
            Err(GridError::EmptyVocabulary)
        );
        assert_eq!(
            HierarchicalVocabulary::build([CellIndex::new(1, 0, 0)], &s),
            Err(GridError::NotFinest)
        );
        let v =
            HierarchicalVocabulary::build([CellIndex::new(2, 1, 1), CellIndex::new(2, 1, 1)], &s)
                .unwrap();
        assert_eq!(v.len(), 1);
    }

    #[test]
    fn from_ordered_rejects_split_regions() {
        let s = spec();
        let tokens = vec![
            CellIndex::new(2, 0, 0),
            CellIndex::new(2, 100, 0),
            CellIndex::new(2, 1, 0),
        ];
        assert!(HierarchicalVocabulary::from_ordered(tokens, &s).is_err());
    }

    fn random_cells(rng: &mut ChaCha8Rng, n: usize) -> Vec<CellIndex> {
        (0..n)
            .map(|_| CellIndex::new(2, rng.random_range(0..240), rng.random_range(0..240)))
            .collect()
    }

    #[test]
    fn deterministic_build() {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cells = random_cells(&mut rng, 1000);
        let a = HierarchicalVocabulary::build(cells.clone(), &s).unwrap();
        let mut reversed = cells;
        reversed.reverse();
        let b = HierarchicalVocabulary::build(reversed, &s).unwrap();
        assert_eq!(a.tokens(), b.tokens());
    }

    #[test]
    fn interval_matches_parent_filter() {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = HierarchicalVocabulary::build(random_cells(&mut rng, 200), &s).unwrap();
        for level in 0..2 {
            for (region, range) in v.regions(level) {
                let brute: BTreeSet<usize> = (0..v.len())
                    .filter(|&i| s.parent(v.token(i), level).unwrap() == region)
                    .collect();
                let got: BTreeSet<usize> = range.collect();
                assert_eq!(brute, got);
            }
        }
    }

    #[test]
    fn projection_scales_by_latitude() {
        let (x0, y0) = project_lonlat(0.0, 0.0, 0.0);
        assert_eq!((x0, y0), (0.0, 0.0));
        let (x_eq, _) = project_lonlat(1.0, 0.0, 0.0);
        let (x_60, _) = project_lonlat(1.0, 60.0, 60.0);
        assert!((x_60 / x_eq - 0.5).abs() < 1e-12);
        assert!((x_eq - 111_195.08).abs() < 1.0);
    }
}
