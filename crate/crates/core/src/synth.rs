//! Deterministic synthetic layouts for desk-scale experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::rudy_map;
use crate::grid::{make_grid, CapacityReport, Cell, GridError, Layout, Net, Pin, Rect, TileCapacity};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible profile: {0}")]
    InfeasibleProfile(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthProfile {
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub tile_size: f64,
    pub macro_count: usize,
    pub cell_count: usize,
    pub net_count: usize,
    pub min_pins: usize,
    pub max_pins: usize,
    pub total_tracks: u32,
    /// Target fraction of tiles whose demand exceeds capacity.
    pub overflow_fraction: f64,
    /// Fraction of nets drawn with a layout-scale pin spread.
    pub global_net_fraction: f64,
}

impl Default for SynthProfile {
    fn default() -> Self {
        SynthProfile::small()
    }
}

impl SynthProfile {
    pub fn tiny() -> Self {
        SynthProfile {
            tiles_x: 32,
            tiles_y: 32,
            tile_size: 1.0,
            macro_count: 2,
            cell_count: 400,
            net_count: 120,
            min_pins: 2,
            max_pins: 6,
            total_tracks: 20,
            overflow_fraction: 0.1,
            global_net_fraction: 0.1,
        }
    }

    pub fn small() -> Self {
        SynthProfile {
            tiles_x: 64,
            tiles_y: 64,
            macro_count: 3,
            cell_count: 1600,
            net_count: 500,
            ..SynthProfile::tiny()
        }
    }

    /// Full CircuitNet-sized 256x256 grid.
    pub fn n28() -> Self {
        SynthProfile {
            tiles_x: 256,
            tiles_y: 256,
            macro_count: 6,
            cell_count: 25_000,
            net_count: 8_000,
            ..SynthProfile::tiny()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "small" => Some(Self::small()),
            "n28" => Some(Self::n28()),
            _ => None,
        }
    }

    fn check(&self) -> Result<(), SynthError> {
        let fail = |m: &str| Err(SynthError::InfeasibleProfile(m.to_string()));
        if self.tiles_x == 0 || self.tiles_y == 0 {
            return fail("grid must have at least one tile per axis");
        }
        if !(self.tile_size > 0.0) || !self.tile_size.is_finite() {
            return fail("tile size must be positive");
        }
        if self.min_pins == 0 || self.min_pins > self.max_pins {
            return fail("pins per net must satisfy 1 <= min_pins <= max_pins");
        }
        if !(self.overflow_fraction > 0.0 && self.overflow_fraction < 1.0) {
            return fail("overflow_fraction must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.global_net_fraction) {
            return fail("global_net_fraction must lie in [0, 1]");
        }
        if self.total_tracks == 0 {
            return fail("total_tracks must be positive");
        }
        let (min_side, _) = self.macro_side_range();
        let min_area = (min_side * min_side) as f64;
        let layout_area = (self.tiles_x * self.tiles_y) as f64;
        if self.macro_count as f64 * min_area > 0.5 * layout_area {
            return fail("macros cannot fit in half of the layout area");
        }
        Ok(())
    }

    /// Macro side range in tiles.
    fn macro_side_range(&self) -> (usize, usize) {
        let small = self.tiles_x.min(self.tiles_y);
        let lo = (small / 10).max(1);
        let hi = (small / 5).max(lo);
        (lo, hi)
    }
}

/// Generates a layout as a pure function of `(seed, profile)`.
///
/// The capacity report uses a constant `total_tracks` per tile and a demand
/// proportional to RUDY, scaled so that tiles above the
/// `1 - overflow_fraction` quantile overflow.
pub fn synth_layout(seed: u64, profile: &SynthProfile) -> Result<Layout, SynthError> {
    profile.check()?;
    let l = profile.tile_size;
    let grid = make_grid(profile.tiles_x as f64 * l, profile.tiles_y as f64 * l, l)?;
    let (w, h) = (grid.layout_width, grid.layout_height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layout = Layout::empty(grid);

    let (lo, hi) = profile.macro_side_range();
    for _ in 0..profile.macro_count {
        let mw = rng.gen_range(lo..=hi) as f64 * l;
        let mh = rng.gen_range(lo..=hi) as f64 * l;
        let x0 = rng.gen_range(0.0..=(w - mw));
        let y0 = rng.gen_range(0.0..=(h - mh));
        layout.macros.push(Rect::new(x0, y0, x0 + mw, y0 + mh));
    }

    for _ in 0..profile.cell_count {
        let cw = rng.gen_range(0.2..0.8) * l;
        let ch = rng.gen_range(0.2..0.8) * l;
        let x0 = rng.gen_range(0.0..(w - cw));
        let y0 = rng.gen_range(0.0..(h - ch));
        layout.cells.push(Cell { rect: Rect::new(x0, y0, x0 + cw, y0 + ch) });
    }

    for id in 0..profile.net_count as u32 {
        let cx = rng.gen_range(0.0..w);
        let cy = rng.gen_range(0.0..h);
        let radius = if rng.gen_bool(profile.global_net_fraction) {
            rng.gen_range(0.1..0.35) * w.min(h)
        } else {
            rng.gen_range(0.5..4.0) * l
        };
        let pins = rng.gen_range(profile.min_pins..=profile.max_pins);
        let pins = (0..pins)
            .map(|_| Pin {
                x: (cx + rng.gen_range(-radius..=radius)).clamp(0.0, w),
                y: (cy + rng.gen_range(-radius..=radius)).clamp(0.0, h),
                net_id: id,
            })
            .collect();
        layout.nets.push(Net { id, pins });
    }

    layout.capacity = Some(synthetic_capacity(&layout, profile));
    layout.validate()?;
    Ok(layout)
}

fn synthetic_capacity(layout: &Layout, profile: &SynthProfile) -> CapacityReport {
    let grid = layout.grid;
    let total = profile.total_tracks;
    let demand = rudy_map(layout, &grid).expect("grid matches").map.data;
    let mut sorted = demand.clone();
    sorted.sort_by(f64::total_cmp);
    let k = (((1.0 - profile.overflow_fraction) * sorted.len() as f64).floor() as usize).min(sorted.len() - 1);
    let q = sorted[k];
    let tiles = demand
        .iter()
        .map(|&d| {
            let used = if q > 0.0 { ((d / q) * total as f64).ceil() as u32 } else { 0 };
            TileCapacity {
                total_tracks: total,
                remaining_tracks: total - used.min(total),
                overflow: used.saturating_sub(total),
            }
        })
        .collect();
    CapacityReport { tiles }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let p = SynthProfile::tiny();
        assert_eq!(synth_layout(7, &p).unwrap(), synth_layout(7, &p).unwrap());
        assert_ne!(synth_layout(7, &p).unwrap(), synth_layout(8, &p).unwrap());
    }

    #[test]
    fn counts_follow_profile() {
        let p = SynthProfile { net_count: 50, macro_count: 0, ..SynthProfile::tiny() };
        let l = synth_layout(7, &p).unwrap();
        assert_eq!(l.nets.len(), 50);
        assert!(l.macros.is_empty());
        assert_eq!(l.cells.len(), p.cell_count);
        l.validate().unwrap();
        for n in &l.nets {
            assert!((p.min_pins..=p.max_pins).contains(&n.pins.len()));
        }
    }

    #[test]
    fn overflow_fraction_near_target() {
        for seed in 0..5 {
            let l = synth_layout(seed, &SynthProfile::small()).unwrap();
            let cap = l.capacity.unwrap();
            let over = cap.tiles.iter().filter(|t| t.overflow > 0).count() as f64 / cap.tiles.len() as f64;
            assert!((0.05..=0.15).contains(&over), "seed {seed}: {over}");
        }
    }

    #[test]
    fn rejects_infeasible_profiles() {
        let too_many = SynthProfile { macro_count: 1000, ..SynthProfile::tiny() };
        assert!(matches!(synth_layout(1, &too_many), Err(SynthError::InfeasibleProfile(_))));
        let pins = SynthProfile { min_pins: 5, max_pins: 2, ..SynthProfile::tiny() };
        assert!(matches!(synth_layout(1, &pins), Err(SynthError::InfeasibleProfile(_))));
        let empty = SynthProfile { tiles_x: 0, ..SynthProfile::tiny() };
        assert!(matches!(synth_layout(1, &empty), Err(SynthError::InfeasibleProfile(_))));
    }
}
