//! Brute-force oracles shared by the property tests and the acceptance run.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use hierplace::engine::Tensor;
use hierplace::grid::{CellIndex, GridSpec, HierarchicalVocabulary};
use hierplace::hier_embedding::SlicePartition;
use rand::Rng;

/// Finest-level cells in clusters, so that regions at every level hold
/// several places but many cells stay empty.
pub fn random_cells<R: Rng>(rng: &mut R, spec: &GridSpec, max_cells: usize) -> Vec<CellIndex> {
    let finest = spec.finest();
    let side = spec.ratio(0, finest) * 3;
    let n = rng.random_range(1..=max_cells);
    let clusters: Vec<(u32, u32)> = (0..rng.random_range(1..=6))
        .map(|_| (rng.random_range(0..side), rng.random_range(0..side)))
        .collect();
    (0..n)
        .map(|_| {
            let (cx, cy) = clusters[rng.random_range(0..clusters.len())];
            let spread = rng.random_range(1..=40u32);
            let c = (cx + rng.random_range(0..spread)).min(side - 1);
            let r = (cy + rng.random_range(0..spread)).min(side - 1);
            CellIndex::new(finest, c, r)
        })
        .collect()
}

/// Checks the vocabulary layout against membership computed by filtering
/// every token's parent, with no use of the stored intervals' construction.
pub fn check_layout(vocab: &HierarchicalVocabulary, cells: &[CellIndex]) -> Result<(), String> {
    let spec = vocab.spec();
    let expected: BTreeSet<CellIndex> = cells.iter().copied().collect();
    let got: BTreeSet<CellIndex> = vocab.tokens().iter().copied().collect();
    if got != expected || vocab.len() != expected.len() {
        return Err(format!(
            "token set differs: {} tokens for {} cells",
            vocab.len(),
            expected.len()
        ));
    }
    for (id, &cell) in vocab.tokens().iter().enumerate() {
        if vocab.id_of(cell) != Some(id as u32) {
            return Err(format!("id_of disagrees at token {id}"));
        }
    }
    for level in 0..spec.finest() {
        let mut members: BTreeMap<CellIndex, Vec<usize>> = BTreeMap::new();
        for (id, &cell) in vocab.tokens().iter().enumerate() {
            members
                .entry(spec.parent(cell, level).unwrap())
                .or_default()
                .push(id);
        }
        let mut covered = vec![false; vocab.len()];
        for (region, ids) in &members {
            let lo = ids[0];
            let hi = *ids.last().unwrap();
            if hi - lo + 1 != ids.len() {
                return Err(format!("region {region:?} is not contiguous: {ids:?}"));
            }
            let interval = vocab.region_interval(*region).map_err(|e| e.to_string())?;
            if interval != (lo..hi + 1) {
                return Err(format!(
                    "region {region:?}: interval {interval:?}, members {lo}..={hi}"
                ));
            }
            for &i in ids {
                if covered[i] {
                    return Err(format!("token {i} in two regions at level {level}"));
                }
                covered[i] = true;
            }
            // Nesting: the whole interval sits inside its parent's interval.
            if level > 0 {
                let parent = spec.parent(*region, level - 1).unwrap();
                let outer = vocab.region_interval(parent).map_err(|e| e.to_string())?;
                if interval.start < outer.start || interval.end > outer.end {
                    return Err(format!(
                        "{region:?} {interval:?} escapes parent {parent:?} {outer:?}"
                    ));
                }
            }
        }
        if covered.iter().any(|c| !c) {
            return Err(format!("level {level} intervals do not cover every token"));
        }
        if vocab.regions(level).len() != members.len() {
            return Err(format!(
                "level {level}: {} listed regions, {} by filtering",
                vocab.regions(level).len(),
                members.len()
            ));
        }
    }
    Ok(())
}

/// Per-token slice averaging by explicit set membership. For each token the
/// region members are found by scanning every token's parent; the mean uses
/// the same shifted form as the bulk routine (first member as the shift) so
/// the two agree bit for bit.
pub fn brute_force_average(
    t: &Tensor<f64>,
    partition: &SlicePartition,
    vocab: &HierarchicalVocabulary,
) -> Tensor<f64> {
    let spec = vocab.spec();
    let mut out = t.clone();
    for (i, slice) in partition.levels().iter().enumerate() {
        let cols = partition.columns(i);
        for tok in 0..vocab.len() {
            let region = spec.parent(vocab.token(tok), slice.level).unwrap();
            let members: Vec<usize> = (0..vocab.len())
                .filter(|&u| spec.parent(vocab.token(u), slice.level).unwrap() == region)
                .collect();
            if members.len() == 1 {
                continue;
            }
            let inv_n = 1.0 / members.len() as f64;
            for c in cols.clone() {
                let base = t.get(members[0], c);
                let mut acc = 0.0;
                for &u in &members[1..] {
                    acc += t.get(u, c) - base;
                }
                out.set(tok, c, base + acc * inv_n);
            }
        }
    }
    out
}
