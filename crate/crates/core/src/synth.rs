//! Synthetic staypoint trajectories with planted hierarchical structure.
//!
//! The world is a square of top-level regions. Each region activates a number
//! of leaf cells (the level just above places) and each leaf a number of
//! place cells. Every region draws a small set of function classes, every leaf
//! one of them, and every place the leaf's class with probability `alpha`
//! (a uniform class otherwise). Place popularity follows a Zipf law over a
//! random global ranking.
//!
//! A move from place `p` goes, with probability `alpha`, to a class drawn from
//! the region's class transition profile for `class(p)`, then to a leaf of that
//! class in the same region (the current leaf is favoured by `stickiness`),
//! then to a place of that leaf by popularity. Otherwise the next place is
//! uniform over all places.

use std::collections::BTreeMap;
use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Poisson};
use thiserror::Error;

use crate::grid::{CellIndex, GridSpec};
use crate::trajectories::{RawTrajectory, Staypoint};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Top-level regions along each side of the square world.
    pub regions_per_side: u32,
    /// Active leaf cells per top-level region.
    pub leaves_per_region: u32,
    /// Active place cells per leaf.
    pub places_per_leaf: u32,
    pub users: usize,
    /// Mean number of stays per user trajectory (at least 2).
    pub mean_len: f64,
    pub zipf_exponent: f64,
    /// Structure strength; 0 gives uniform random movement.
    pub alpha: f64,
    pub classes: u32,
    pub classes_per_region: u32,
    /// Relative weight of staying in the current leaf.
    pub stickiness: f64,
    /// Concentration of the per-region class transition profiles.
    pub profile_concentration: f64,
    /// Unix time of the earliest trajectory start.
    pub start_time: i64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            regions_per_side: 2,
            leaves_per_region: 16,
            places_per_leaf: 62,
            users: 20_000,
            mean_len: 12.0,
            zipf_exponent: 1.0,
            alpha: 0.9,
            classes: 15,
            classes_per_region: 4,
            stickiness: 8.0,
            profile_concentration: 0.5,
            // 2024-01-01 00:00 JST
            start_time: 1_704_034_800,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, spec: &GridSpec) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if spec.num_levels() < 2 {
            return bad("grid needs at least two levels".into());
        }
        if self.regions_per_side == 0
            || self.leaves_per_region == 0
            || self.places_per_leaf == 0
            || self.users == 0
            || self.classes == 0
            || self.classes_per_region == 0
        {
            return bad("all counts must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if self.classes_per_region > self.classes {
            return bad("classes_per_region exceeds classes".into());
        }
        if !(self.mean_len >= 2.0 && self.mean_len.is_finite()) {
            return bad("mean_len must be at least 2".into());
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return bad("zipf exponent must be non-negative".into());
        }
        if !(self.stickiness > 0.0 && self.profile_concentration > 0.0) {
            return bad("stickiness and profile concentration must be positive".into());
        }
        let leaf = spec.finest() - 1;
        let leaf_cells = u64::from(spec.ratio(0, leaf)).pow(2);
        if u64::from(self.leaves_per_region) > leaf_cells {
            return bad(format!("at most {leaf_cells} leaves fit in a region"));
        }
        let place_cells = u64::from(spec.ratio(leaf, spec.finest())).pow(2);
        if u64::from(self.places_per_leaf) > place_cells {
            return bad(format!("at most {place_cells} places fit in a leaf"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPlace {
    pub cell: CellIndex,
    pub region: usize,
    pub leaf: usize,
    pub class: u32,
    pub popularity: f64,
}

/// The sampled world: places, classes and transition tables.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    cfg: SynthConfig,
    spec: GridSpec,
    places: Vec<SynthPlace>,
    leaf_class: Vec<u32>,
    leaf_places: Vec<Vec<usize>>,
    leaf_sampler: Vec<WeightedIndex<f64>>,
    // (region, class) -> leaves of that class in the region
    region_class_leaves: Vec<BTreeMap<u32, Vec<usize>>>,
    // (region, from class) -> (next classes, probabilities, sampler)
    region_profile: Vec<Vec<(Vec<u32>, Vec<f64>, WeightedIndex<f64>)>>,
    popularity: WeightedIndex<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub trajectories: Vec<RawTrajectory>,
    pub world: SynthWorld,
}

fn class_durations(class: u32) -> f64 {
    // Median stay between 20 minutes and ~5 hours depending on class.
    1200.0 * 2f64.powi((class % 5) as i32)
}

impl SynthWorld {
    pub fn build(cfg: &SynthConfig, spec: &GridSpec) -> Result<Self, SynthError> {
        cfg.validate(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let finest = spec.finest();
        let leaf_level = finest - 1;
        let leaf_ratio = spec.ratio(0, leaf_level);
        let place_ratio = spec.ratio(leaf_level, finest);

        let mut places = Vec::new();
        let mut leaf_class = Vec::new();
        let mut leaf_places = Vec::new();
        let mut region_classes = Vec::new();
        let n_regions = (cfg.regions_per_side * cfg.regions_per_side) as usize;
        for region in 0..n_regions {
            let rcol = region as u32 % cfg.regions_per_side;
            let rrow = region as u32 / cfg.regions_per_side;
            let own: Vec<u32> = sample(
                &mut rng,
                cfg.classes as usize,
                cfg.classes_per_region as usize,
            )
            .into_iter()
            .map(|c| c as u32)
            .collect();
            let leaves = sample(
                &mut rng,
                (leaf_ratio * leaf_ratio) as usize,
                cfg.leaves_per_region as usize,
            )
            .into_vec();
            let mut leaves = leaves;
            leaves.sort_unstable();
            let mut present = Vec::new();
            for l in leaves {
                let lcol = rcol * leaf_ratio + l as u32 % leaf_ratio;
                let lrow = rrow * leaf_ratio + l as u32 / leaf_ratio;
                let class = own[rng.random_range(0..own.len())];
                if !present.contains(&class) {
                    present.push(class);
                }
                let leaf_id = leaf_class.len();
                leaf_class.push(class);
                let mut members = sample(
                    &mut rng,
                    (place_ratio * place_ratio) as usize,
                    cfg.places_per_leaf as usize,
                )
                .into_vec();
                members.sort_unstable();
                let mut ids = Vec::with_capacity(members.len());
                for p in members {
                    let cell = CellIndex::new(
                        finest,
                        lcol * place_ratio + p as u32 % place_ratio,
                        lrow * place_ratio + p as u32 / place_ratio,
                    );
                    let class = if rng.random::<f64>() < cfg.alpha {
                        class
                    } else {
                        rng.random_range(0..cfg.classes)
                    };
                    ids.push(places.len());
                    places.push(SynthPlace {
                        cell,
                        region,
                        leaf: leaf_id,
                        class,
                        popularity: 0.0,
                    });
                }
                leaf_places.push(ids);
            }
            present.sort_unstable();
            region_classes.push(present);
        }

        // Zipf popularity over a random global ranking.
        let ranks = sample(&mut rng, places.len(), places.len()).into_vec();
        for (place, rank) in places.iter_mut().zip(ranks) {
            place.popularity = 1.0 / ((rank + 1) as f64).powf(cfg.zipf_exponent);
        }
        let popularity = WeightedIndex::new(places.iter().map(|p| p.popularity))
            .map_err(|e| SynthError::Invalid(e.to_string()))?;
        let leaf_sampler = leaf_places
            .iter()
            .map(|ids| {
                WeightedIndex::new(ids.iter().map(|&i| places[i].popularity))
                    .map_err(|e| SynthError::Invalid(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;

        let mut region_class_leaves = vec![BTreeMap::<u32, Vec<usize>>::new(); n_regions];
        for (leaf, &class) in leaf_class.iter().enumerate() {
            let region = places[leaf_places[leaf][0]].region;
            region_class_leaves[region]
                .entry(class)
                .or_default()
                .push(leaf);
        }

        let gamma = Gamma::new(cfg.profile_concentration, 1.0)
            .map_err(|e| SynthError::Invalid(e.to_string()))?;
        let mut region_profile = Vec::with_capacity(n_regions);
        for present in &region_classes {
            let mut rows = Vec::with_capacity(cfg.classes as usize);
            for _ in 0..cfg.classes {
                let weights: Vec<f64> = present
                    .iter()
                    .map(|_| gamma.sample(&mut rng).max(1e-12))
                    .collect();
                let sampler =
                    WeightedIndex::new(&weights).map_err(|e| SynthError::Invalid(e.to_string()))?;
                let total: f64 = weights.iter().sum();
                let probs = weights.iter().map(|w| w / total).collect();
                rows.push((present.clone(), probs, sampler));
            }
            region_profile.push(rows);
        }

        Ok(Self {
            cfg: cfg.clone(),
            spec: spec.clone(),
            places,
            leaf_class,
            leaf_places,
            leaf_sampler,
            region_class_leaves,
            region_profile,
            popularity,
        })
    }

    pub fn places(&self) -> &[SynthPlace] {
        &self.places
    }

    pub fn leaf_class(&self, leaf: usize) -> u32 {
        self.leaf_class[leaf]
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn sample_by_popularity<R: Rng>(&self, rng: &mut R) -> usize {
        self.popularity.sample(rng)
    }

    fn sample_start<R: Rng>(&self, rng: &mut R) -> usize {
        if rng.random::<f64>() < self.cfg.alpha {
            self.sample_by_popularity(rng)
        } else {
            rng.random_range(0..self.places.len())
        }
    }

    /// One transition of the generative model.
    pub fn next_place<R: Rng>(&self, from: usize, rng: &mut R) -> usize {
        if rng.random::<f64>() >= self.cfg.alpha {
            return rng.random_range(0..self.places.len());
        }
        let here = &self.places[from];
        let (classes, _, profile) = &self.region_profile[here.region][here.class as usize];
        let next_class = classes[profile.sample(rng)];
        let leaves = &self.region_class_leaves[here.region][&next_class];
        let leaf = if leaves.contains(&here.leaf) {
            let stay = self.cfg.stickiness / (self.cfg.stickiness + (leaves.len() - 1) as f64);
            if leaves.len() == 1 || rng.random::<f64>() < stay {
                here.leaf
            } else {
                let others: Vec<usize> =
                    leaves.iter().copied().filter(|&l| l != here.leaf).collect();
                others[rng.random_range(0..others.len())]
            }
        } else {
            leaves[rng.random_range(0..leaves.len())]
        };
        self.leaf_places[leaf][self.leaf_sampler[leaf].sample(rng)]
    }

    /// Exact distribution of [`next_place`](Self::next_place) from `from`.
    pub fn transition_probabilities(&self, from: usize) -> Vec<f64> {
        let n = self.places.len();
        let alpha = self.cfg.alpha;
        let mut p = vec![(1.0 - alpha) / n as f64; n];
        if alpha == 0.0 {
            return p;
        }
        let here = &self.places[from];
        let (classes, probs, _) = &self.region_profile[here.region][here.class as usize];
        for (&class, &pc) in classes.iter().zip(probs) {
            let leaves = &self.region_class_leaves[here.region][&class];
            let k = leaves.len();
            for &leaf in leaves {
                let pl = if leaves.contains(&here.leaf) {
                    let stay = if k == 1 {
                        1.0
                    } else {
                        self.cfg.stickiness / (self.cfg.stickiness + (k - 1) as f64)
                    };
                    if leaf == here.leaf {
                        stay
                    } else {
                        (1.0 - stay) / (k - 1) as f64
                    }
                } else {
                    1.0 / k as f64
                };
                let members = &self.leaf_places[leaf];
                let total: f64 = members.iter().map(|&q| self.places[q].popularity).sum();
                for &q in members {
                    p[q] += alpha * pc * pl * self.places[q].popularity / total;
                }
            }
        }
        p
    }

    /// Index of the place at `cell`, if any.
    pub fn place_at(&self, cell: CellIndex) -> Option<usize> {
        self.places.iter().position(|p| p.cell == cell)
    }

    fn stay_at<R: Rng>(&self, place: usize, t_entry: i64, rng: &mut R) -> Staypoint {
        let cell = self.places[place].cell;
        let size = f64::from(self.spec.level(cell.level).cell_size);
        let (cx, cy) = self.spec.cell_center(cell);
        let x = cx + (rng.random::<f64>() - 0.5) * 0.8 * size;
        let y = cy + (rng.random::<f64>() - 0.5) * 0.8 * size;
        let median = class_durations(self.places[place].class);
        let dur = LogNormal::new(median.ln(), 0.6)
            .expect("finite lognormal parameters")
            .sample(rng)
            .min(3.0 * 86_400.0) as i64;
        Staypoint {
            x,
            y,
            t_entry,
            t_exit: t_entry + dur,
        }
    }

    /// Trajectory of user `index`, drawn from its own RNG stream.
    pub fn user_trajectory(&self, index: usize) -> RawTrajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(index as u64 + 1);
        let extra = Poisson::new(self.cfg.mean_len - 2.0)
            .map(|p| p.sample(&mut rng) as usize)
            .unwrap_or(0);
        let len = 2 + extra;
        let mut t = self.cfg.start_time + rng.random_range(0..7 * 86_400);
        let mut place = self.sample_start(&mut rng);
        let mut stays = Vec::with_capacity(len);
        for step in 0..len {
            if step > 0 {
                place = self.next_place(place, &mut rng);
            }
            let stay = self.stay_at(place, t, &mut rng);
            t = stay.t_exit + rng.random_range(300..3600);
            stays.push(stay);
        }
        RawTrajectory {
            user_id: format!("u{index:07}"),
            stays,
        }
    }

    /// Ground-truth class of every place, sorted by (row, col).
    pub fn ground_truth(&self) -> Vec<(CellIndex, u32)> {
        let mut out: Vec<(CellIndex, u32)> =
            self.places.iter().map(|p| (p.cell, p.class)).collect();
        out.sort_by_key(|(c, _)| (c.row, c.col));
        out
    }
}

pub fn synth_generate(cfg: &SynthConfig, spec: &GridSpec) -> Result<SynthOutput, SynthError> {
    let world = SynthWorld::build(cfg, spec)?;
    let trajectories = (0..cfg.users).map(|u| world.user_trajectory(u)).collect();
    Ok(SynthOutput {
        trajectories,
        world,
    })
}

/// Writes trajectories in the staypoint file format.
pub fn write_staypoints<W: Write>(mut out: W, trajs: &[RawTrajectory]) -> std::io::Result<()> {
    for t in trajs {
        for s in &t.stays {
            writeln!(
                out,
                "{}\t{}\t{}\t{:.3}\t{:.3}",
                t.user_id, s.t_entry, s.t_exit, s.x, s.y
            )?;
        }
    }
    Ok(())
}

/// Writes `col\trow\tclass_id` ground-truth lines.
pub fn write_ground_truth<W: Write>(mut out: W, truth: &[(CellIndex, u32)]) -> std::io::Result<()> {
    for (cell, class) in truth {
        writeln!(out, "{}\t{}\t{}", cell.col, cell.row, class)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn small(alpha: f64) -> SynthConfig {
        SynthConfig {
            regions_per_side: 2,
            leaves_per_region: 4,
            places_per_leaf: 10,
            users: 200,
            mean_len: 6.0,
            alpha,
            seed: 42,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn transition_probabilities_match_sampling() {
        let spec = GridSpec::default();
        let world = SynthWorld::build(&small(0.8), &spec).unwrap();
        let n = world.places().len();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for from in [0, 17, n - 1] {
            let p = world.transition_probabilities(from);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let draws = 200_000;
            let mut hits = vec![0usize; n];
            for _ in 0..draws {
                hits[world.next_place(from, &mut rng)] += 1;
            }
            for q in 0..n {
                let sd = (p[q] * (1.0 - p[q]) / draws as f64).sqrt();
                let freq = hits[q] as f64 / draws as f64;
                assert!(
                    (freq - p[q]).abs() < 5.0 * sd + 1e-4,
                    "{from}->{q}: {freq} vs {}",
                    p[q]
                );
            }
        }
        let uniform = SynthWorld::build(&small(0.0), &spec).unwrap();
        assert!(uniform
            .transition_probabilities(5)
            .iter()
            .all(|&x| x == 1.0 / n as f64));
    }

    #[test]
    fn validation() {
        let spec = GridSpec::default();
        assert!(small(0.5).validate(&spec).is_ok());
        assert!(small(1.5).validate(&spec).is_err());
        let mut c = small(0.5);
        c.places_per_leaf = 65;
        assert!(c.validate(&spec).is_err());
        c.places_per_leaf = 64;
        assert!(c.validate(&spec).is_ok());
        c.users = 0;
        assert!(c.validate(&spec).is_err());
    }

    #[test]
    fn deterministic() {
        let spec = GridSpec::default();
        let a = synth_generate(&small(0.7), &spec).unwrap();
        let b = synth_generate(&small(0.7), &spec).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
        assert_eq!(a.world.ground_truth(), b.world.ground_truth());
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        write_staypoints(&mut buf_a, &a.trajectories).unwrap();
        write_staypoints(&mut buf_b, &b.trajectories).unwrap();
        assert_eq!(buf_a, buf_b);
    }

    #[test]
    fn places_lie_in_their_cells() {
        let spec = GridSpec::default();
        let out = synth_generate(&small(0.9), &spec).unwrap();
        let by_cell: HashMap<CellIndex, usize> = out
            .world
            .places()
            .iter()
            .enumerate()
            .map(|(i, p)| (p.cell, i))
            .collect();
        assert_eq!(by_cell.len(), 4 * 4 * 10);
        for t in &out.trajectories {
            assert!(t.stays.len() >= 2);
            for w in t.stays.windows(2) {
                assert!(w[0].t_exit <= w[1].t_entry);
            }
            for s in &t.stays {
                let cell = spec.cell_at(s.x, s.y, 2).unwrap();
                assert!(by_cell.contains_key(&cell));
            }
        }
    }

    #[test]
    fn degenerate_alpha_one_stays_in_class() {
        let spec = GridSpec::default();
        let cfg = SynthConfig {
            classes_per_region: 1,
            ..small(1.0)
        };
        let out = synth_generate(&cfg, &spec).unwrap();
        let places = out.world.places();
        let by_cell: HashMap<CellIndex, &SynthPlace> = places.iter().map(|p| (p.cell, p)).collect();
        for p in places {
            assert_eq!(p.class, out.world.leaf_class(p.leaf));
        }
        for t in &out.trajectories {
            for w in t.stays.windows(2) {
                let a = by_cell[&spec.cell_at(w[0].x, w[0].y, 2).unwrap()];
                let b = by_cell[&spec.cell_at(w[1].x, w[1].y, 2).unwrap()];
                assert_eq!(a.region, b.region);
                assert_eq!(a.class, b.class);
            }
        }
    }
}
