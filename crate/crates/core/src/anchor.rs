//! Sparse 4D anchor grid: point-cloud initialization, voxel occupancy,
//! gradient statistics for anchor growing, growing itself and pruning.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifies a neural Gaussian by its anchor and offset slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GaussianKey {
    pub anchor: u64,
    pub slot: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub id: u64,
    /// `(x, y, z, t)`, on the cell centers of the 4D grid.
    pub position: [f64; 4],
    pub feature: Vec<f64>,
    pub offsets: Vec<[f64; 4]>,
}

impl Anchor {
    pub fn gaussian_position(&self, slot: usize) -> [f64; 4] {
        let o = self.offsets[slot];
        [
            self.position[0] + o[0],
            self.position[1] + o[1],
            self.position[2] + o[2],
            self.position[3] + o[3],
        ]
    }
}

/// Anchors in creation order. Ids strictly increase along the list.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub k: usize,
    pub feature_dim: usize,
    anchors: Vec<Anchor>,
    next_id: u64,
}

impl AnchorSet {
    pub fn new(k: usize, feature_dim: usize) -> Self {
        AnchorSet {
            k,
            feature_dim,
            anchors: Vec::new(),
            next_id: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn as_slice(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn as_mut_slice(&mut self) -> &mut [Anchor] {
        &mut self.anchors
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Anchor> {
        self.anchors.iter()
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    /// Appends an anchor and returns its id.
    pub fn push(&mut self, position: [f64; 4], feature: Vec<f64>, offsets: Vec<[f64; 4]>) -> u64 {
        debug_assert_eq!(feature.len(), self.feature_dim);
        debug_assert_eq!(offsets.len(), self.k);
        let id = self.next_id;
        self.next_id += 1;
        self.anchors.push(Anchor {
            id,
            position,
            feature,
            offsets,
        });
        id
    }

    /// Rebuilds a set from stored anchors, renumbering ids in order.
    pub fn from_parts(k: usize, feature_dim: usize, parts: Vec<([f64; 4], Vec<f64>, Vec<[f64; 4]>)>) -> Self {
        let mut set = AnchorSet::new(k, feature_dim);
        for (p, f, o) in parts {
            set.push(p, f, o);
        }
        set
    }

    /// Keeps anchors where `keep[i]` holds; returns the removed ids.
    pub fn retain_mask(&mut self, keep: &[bool]) -> Vec<u64> {
        assert_eq!(keep.len(), self.anchors.len());
        let mut removed = Vec::new();
        let mut i = 0;
        self.anchors.retain(|a| {
            let k = keep[i];
            i += 1;
            if !k {
                removed.push(a.id);
            }
            k
        });
        removed
    }

    pub fn gaussian_count(&self) -> usize {
        self.anchors.len() * self.k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid4D {
    pub spatial: f64,
    pub temporal: f64,
    cells: HashMap<[i64; 4], u64>,
}

impl VoxelGrid4D {
    pub fn new(spatial: f64, temporal: f64) -> Result<Self> {
        if !(spatial > 0.0 && temporal > 0.0 && spatial.is_finite() && temporal.is_finite()) {
            return Err(Error::invalid("voxel sizes must be positive"));
        }
        Ok(VoxelGrid4D {
            spatial,
            temporal,
            cells: HashMap::new(),
        })
    }

    pub fn cell_of(&self, p: &[f64; 4]) -> [i64; 4] {
        [
            (p[0] / self.spatial).floor() as i64,
            (p[1] / self.spatial).floor() as i64,
            (p[2] / self.spatial).floor() as i64,
            (p[3] / self.temporal).floor() as i64,
        ]
    }

    pub fn center_of(&self, cell: &[i64; 4]) -> [f64; 4] {
        [
            (cell[0] as f64 + 0.5) * self.spatial,
            (cell[1] as f64 + 0.5) * self.spatial,
            (cell[2] as f64 + 0.5) * self.spatial,
            (cell[3] as f64 + 0.5) * self.temporal,
        ]
    }

    pub fn is_occupied(&self, cell: &[i64; 4]) -> bool {
        self.cells.contains_key(cell)
    }

    /// Marks `cell` as held by `id`; false if already occupied.
    pub fn occupy(&mut self, cell: [i64; 4], id: u64) -> bool {
        match self.cells.entry(cell) {
            std::collections::hash_map::Entry::Occupied(_) => false,
            std::collections::hash_map::Entry::Vacant(v) => {
                v.insert(id);
                true
            }
        }
    }

    pub fn release(&mut self, cell: &[i64; 4]) -> Option<u64> {
        self.cells.remove(cell)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn anchor_at(&self, cell: &[i64; 4]) -> Option<u64> {
        self.cells.get(cell).copied()
    }

    /// Rebuilds occupancy from anchor positions.
    pub fn rebuild(&mut self, anchors: &AnchorSet) -> Result<()> {
        self.cells.clear();
        for a in anchors.iter() {
            let cell = self.cell_of(&a.position);
            if !self.occupy(cell, a.id) {
                return Err(Error::Data(format!("two anchors share 4D cell {cell:?}")));
            }
        }
        Ok(())
    }
}

/// Uniform random subset of at most `max_points` points, in input order.
pub fn downsample_points<R: Rng>(points: &[[f64; 3]], max_points: usize, rng: &mut R) -> Vec<[f64; 3]> {
    if points.len() <= max_points {
        return points.to_vec();
    }
    let mut idx = rand::seq::index::sample(rng, points.len(), max_points).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i]).collect()
}

fn noise_offsets<R: Rng>(k: usize, half_extent: [f64; 4], rng: &mut R) -> Vec<[f64; 4]> {
    (0..k)
        .map(|_| {
            let mut o = [0.0; 4];
            for (v, h) in o.iter_mut().zip(half_extent) {
                *v = if h > 0.0 { rng.gen_range(-h..h) } else { 0.0 };
            }
            o
        })
        .collect()
}

/// Parameters for anchor creation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorInit {
    pub k: usize,
    pub feature_dim: usize,
    pub max_points: usize,
    /// Offset noise half-width for initial anchors, in cells.
    pub init_offset_cells: f64,
    /// Offset noise half-width for grown anchors, in cells.
    pub grow_offset_cells: f64,
}

impl Default for AnchorInit {
    fn default() -> Self {
        AnchorInit {
            k: 10,
            feature_dim: 32,
            max_points: 100_000,
            init_offset_cells: 0.5,
            grow_offset_cells: 0.25,
        }
    }
}

/// One anchor per occupied spatial voxel, placed at `(voxel center, t0)`
/// with `t0` snapped to the center of its temporal cell.
pub fn init_anchors<R: Rng>(
    points: &[[f64; 3]],
    t0: f64,
    grid: &mut VoxelGrid4D,
    init: &AnchorInit,
    rng: &mut R,
) -> Result<AnchorSet> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let pts = downsample_points(points, init.max_points, rng);
    let mut set = AnchorSet::new(init.k, init.feature_dim);
    let half = [
        init.init_offset_cells * grid.spatial,
        init.init_offset_cells * grid.spatial,
        init.init_offset_cells * grid.spatial,
        init.init_offset_cells * grid.temporal,
    ];
    for p in pts {
        if p.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let cell = grid.cell_of(&[p[0], p[1], p[2], t0]);
        if grid.is_occupied(&cell) {
            continue;
        }
        let id = set.push(
            grid.center_of(&cell),
            vec![0.0; init.feature_dim],
            noise_offsets(init.k, half, rng),
        );
        grid.occupy(cell, id);
    }
    Ok(set)
}

/// `α′·(1/σ)^γ`.
pub fn growing_weight(activation: f64, sigma: f64, gamma: f64) -> f64 {
    activation * (1.0 / sigma).powf(gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LedgerEntry {
    pub weighted_sum: f64,
    pub weight_total: f64,
    pub naive_sum: f64,
    pub naive_count: u64,
    /// σ at the most recent active accumulation.
    pub last_sigma: f64,
}

impl LedgerEntry {
    /// `Σ w‖∇2D‖ / Σ w`.
    pub fn weighted_mean(&self) -> f64 {
        if self.weight_total > 0.0 {
            self.weighted_sum / self.weight_total
        } else {
            0.0
        }
    }

    /// `Σ ‖∇2D‖ / N`.
    pub fn naive_mean(&self) -> f64 {
        if self.naive_count > 0 {
            self.naive_sum / self.naive_count as f64
        } else {
            0.0
        }
    }
}

/// Which statistic decides growth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrowthStatistic {
    Weighted,
    Naive,
}

/// Writes ledger entries as `anchor_id,slot,grad_weighted,grad_naive,sigma`.
pub fn write_ledger_csv<W: Write>(entries: &[(GaussianKey, LedgerEntry)], mut w: W) -> std::io::Result<()> {
    writeln!(w, "anchor_id,slot,grad_weighted,grad_naive,sigma")?;
    for (k, e) in entries {
        writeln!(
            w,
            "{},{},{},{},{}",
            k.anchor,
            k.slot,
            e.weighted_mean(),
            e.naive_mean(),
            e.last_sigma
        )?;
    }
    Ok(())
}

/// Per-Gaussian running sums for anchor growing.
///
/// Accumulation is sequential in the caller's order, which is fixed by the
/// renderer's deterministic record order.
#[derive(Debug, Clone, Default)]
pub struct GradientLedger {
    entries: HashMap<GaussianKey, LedgerEntry>,
}

impl GradientLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn for_anchors(anchors: &AnchorSet) -> Self {
        let mut l = Self::new();
        for a in anchors.iter() {
            l.register_anchor(a.id, anchors.k);
        }
        l
    }

    pub fn register_anchor(&mut self, id: u64, k: usize) {
        for slot in 0..k as u32 {
            self.entries.insert(GaussianKey { anchor: id, slot }, LedgerEntry::default());
        }
    }

    pub fn remove_anchor(&mut self, id: u64, k: usize) {
        for slot in 0..k as u32 {
            self.entries.remove(&GaussianKey { anchor: id, slot });
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Records one iteration in which the Gaussian was active.
    pub fn accumulate(
        &mut self,
        key: GaussianKey,
        grad2d_norm: f64,
        activation: f64,
        sigma: f64,
        gamma: f64,
    ) -> Result<()> {
        let e = self.entries.get_mut(&key).ok_or(Error::UnknownGaussian(key))?;
        let w = growing_weight(activation, sigma, gamma);
        e.weighted_sum += w * grad2d_norm;
        e.weight_total += w;
        e.naive_sum += grad2d_norm;
        e.naive_count += 1;
        e.last_sigma = sigma;
        Ok(())
    }

    /// Records an iteration in which the Gaussian was rasterized but
    /// temporally inactive: counts toward the naive mean only.
    pub fn accumulate_inactive(&mut self, key: GaussianKey) -> Result<()> {
        let e = self.entries.get_mut(&key).ok_or(Error::UnknownGaussian(key))?;
        e.naive_count += 1;
        Ok(())
    }

    pub fn get(&self, key: &GaussianKey) -> Option<&LedgerEntry> {
        self.entries.get(key)
    }

    pub fn statistic(&self, key: &GaussianKey, stat: GrowthStatistic) -> Option<f64> {
        self.entries.get(key).map(|e| match stat {
            GrowthStatistic::Weighted => e.weighted_mean(),
            GrowthStatistic::Naive => e.naive_mean(),
        })
    }

    /// Entries sorted by key.
    pub fn entries(&self) -> Vec<(GaussianKey, LedgerEntry)> {
        let mut v: Vec<_> = self.entries.iter().map(|(k, e)| (*k, *e)).collect();
        v.sort_unstable_by_key(|(k, _)| *k);
        v
    }

    pub fn reset(&mut self) {
        for e in self.entries.values_mut() {
            *e = LedgerEntry::default();
        }
    }

    /// CSV dump with columns `anchor_id,slot,grad_weighted,grad_naive,sigma`.
    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        write_ledger_csv(&self.entries(), w)
    }
}

/// Places one new anchor at the center of every unoccupied 4D cell holding a
/// Gaussian whose growth statistic exceeds `threshold`. Cells come from the
/// Gaussians' canonical positions `(x_xyz, x_t)`. A new anchor takes the
/// feature of the anchor owning the cell's highest-scoring Gaussian. Resets
/// the ledger and registers the new anchors in it. Returns the new anchor ids.
#[allow(clippy::too_many_arguments)]
pub fn grow_anchors<R: Rng>(
    ledger: &mut GradientLedger,
    positions: &[(GaussianKey, [f64; 4])],
    anchors: &mut AnchorSet,
    grid: &mut VoxelGrid4D,
    threshold: f64,
    stat: GrowthStatistic,
    init: &AnchorInit,
    rng: &mut R,
) -> Vec<u64> {
    let mut cells: BTreeMap<[i64; 4], (f64, GaussianKey)> = BTreeMap::new();
    let mut sorted: Vec<_> = positions.to_vec();
    sorted.sort_unstable_by_key(|(k, _)| *k);
    for (key, pos) in &sorted {
        let Some(v) = ledger.statistic(key, stat) else {
            continue;
        };
        if v > threshold && pos.iter().all(|c| c.is_finite()) {
            let cell = grid.cell_of(pos);
            if !grid.is_occupied(&cell) {
                let best = cells.entry(cell).or_insert((v, *key));
                if v > best.0 {
                    *best = (v, *key);
                }
            }
        }
    }
    let half = [
        init.grow_offset_cells * grid.spatial,
        init.grow_offset_cells * grid.spatial,
        init.grow_offset_cells * grid.spatial,
        init.grow_offset_cells * grid.temporal,
    ];
    ledger.reset();
    let features: HashMap<u64, Vec<f64>> = cells
        .values()
        .map(|(_, key)| {
            let f = anchors
                .iter()
                .find(|a| a.id == key.anchor)
                .map_or_else(|| vec![0.0; anchors.feature_dim], |a| a.feature.clone());
            (key.anchor, f)
        })
        .collect();
    let mut added = Vec::with_capacity(cells.len());
    for (cell, (_, parent)) in cells {
        let id = anchors.push(grid.center_of(&cell), features[&parent.anchor].clone(), noise_offsets(anchors.k, half, rng));
        grid.occupy(cell, id);
        ledger.register_anchor(id, anchors.k);
        added.push(id);
    }
    added
}

/// Keep mask: an anchor is invalid when every one of its `k` base opacities
/// (row-major in `base_opacities`) is negative.
pub fn valid_anchor_mask(base_opacities: &[f64], k: usize) -> Vec<bool> {
    base_opacities
        .chunks_exact(k)
        .map(|rho| rho.iter().any(|&r| r >= 0.0))
        .collect()
}

/// Removes anchors all of whose Gaussians have negative base opacity.
/// Returns the removed ids.
pub fn prune_invalid_anchors(
    anchors: &mut AnchorSet,
    grid: &mut VoxelGrid4D,
    base_opacities: &[f64],
) -> Vec<u64> {
    assert_eq!(base_opacities.len(), anchors.len() * anchors.k);
    let keep = valid_anchor_mask(base_opacities, anchors.k);
    for (a, &k) in anchors.iter().zip(&keep) {
        if !k {
            let cell = grid.cell_of(&a.position);
            grid.release(&cell);
        }
    }
    anchors.retain_mask(&keep)
}
