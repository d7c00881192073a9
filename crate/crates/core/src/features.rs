//! Hand-crafted per-tile feature maps and the per-task input stacks.
//!
//! RC input: `[macro_region, rudy, pin_rudy]`.
//! DRC input: the RC channels, cell density, and five channels derived from
//! the routing capacity report (see [`DRC_CHANNELS`]).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridSpec, Layout, Net, Rect};
use crate::map::Map2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("layout carries no routing capacity report")]
    MissingCapacity,
    #[error("layout grid does not match requested grid")]
    GridMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Rc,
    Drc,
}

impl Task {
    pub fn channels(self) -> usize {
        match self {
            Task::Rc => RC_CHANNELS.len(),
            Task::Drc => DRC_CHANNELS.len(),
        }
    }

    pub fn channel_names(self) -> &'static [&'static str] {
        match self {
            Task::Rc => &RC_CHANNELS,
            Task::Drc => &DRC_CHANNELS,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Rc => "rc",
            Task::Drc => "drc",
        })
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rc" => Ok(Task::Rc),
            "drc" => Ok(Task::Drc),
            other => Err(format!("unknown task `{other}` (expected rc or drc)")),
        }
    }
}

pub const RC_CHANNELS: [&str; 3] = ["macro_region", "rudy", "pin_rudy"];

pub const DRC_CHANNELS: [&str; 9] = [
    "macro_region",
    "rudy",
    "pin_rudy",
    "cell_density",
    "congestion_overflow",
    "congestion_utilization",
    "congestion_total_norm",
    "congestion_remaining_norm",
    "congestion_demand_norm",
];

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub name: &'static str,
    pub grid: GridSpec,
    /// Shape `(tiles_y, tiles_x)`.
    pub map: Map2,
}

impl FeatureMap {
    fn new(name: &'static str, grid: &GridSpec, map: Map2) -> Self {
        FeatureMap { name, grid: *grid, map }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub grid: GridSpec,
    pub task: Task,
    pub channels: Vec<FeatureMap>,
}

impl FeatureStack {
    /// Channel-first `(C, h, w)` buffer in 32-bit floats.
    pub fn to_f32(&self) -> Vec<f32> {
        self.channels.iter().flat_map(|c| c.map.data.iter().map(|&v| v as f32)).collect()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels.len(), self.grid.tiles_y, self.grid.tiles_x)
    }
}

fn check_grid(layout: &Layout, grid: &GridSpec) -> Result<(), FeatureError> {
    if layout.grid != *grid {
        return Err(FeatureError::GridMismatch);
    }
    Ok(())
}

/// Net bounding box with each side clamped to at least one tile side,
/// growing symmetrically and shifted back inside the layout.
pub fn clamped_net_box(net: &Net, grid: &GridSpec) -> Option<Rect> {
    let bb = net.bbox()?;
    let l = grid.tile_size;
    let widen = |lo: f64, hi: f64, extent: f64| -> (f64, f64) {
        if hi - lo >= l {
            return (lo, hi);
        }
        let mid = 0.5 * (lo + hi);
        let (a, b) = (mid - 0.5 * l, mid + 0.5 * l);
        if a < 0.0 {
            (0.0, l.min(extent))
        } else if b > extent {
            ((extent - l).max(0.0), extent)
        } else {
            (a, b)
        }
    };
    let (x0, x1) = widen(bb.x_min, bb.x_max, grid.layout_width);
    let (y0, y1) = widen(bb.y_min, bb.y_max, grid.layout_height);
    Some(Rect::new(x0, y0, x1, y1))
}

/// RUDY wire density `(w + h) / (w * h)` of a net's clamped bounding box.
pub fn net_density(net: &Net, grid: &GridSpec) -> Option<(Rect, f64)> {
    let b = clamped_net_box(net, grid)?;
    let (w, h) = (b.width(), b.height());
    Some((b, (w + h) / (w * h)))
}

/// Fraction of every tile covered by the union of macros.
pub fn macro_region_map(layout: &Layout, grid: &GridSpec) -> Result<FeatureMap, FeatureError> {
    check_grid(layout, grid)?;
    let mut per_tile: Vec<Vec<usize>> = vec![Vec::new(); grid.num_tiles()];
    for (k, m) in layout.macros.iter().enumerate() {
        if let Some((i0, i1, j0, j1)) = grid.tile_span(m) {
            for j in j0..=j1 {
                for i in i0..=i1 {
                    per_tile[grid.index(i, j)].push(k);
                }
            }
        }
    }
    let mut map = Map2::zeros(grid.tiles_y, grid.tiles_x);
    let area = grid.tile_area();
    for j in 0..grid.tiles_y {
        for i in 0..grid.tiles_x {
            let idx = grid.index(i, j);
            if per_tile[idx].is_empty() {
                continue;
            }
            let tile = grid.tile_rect(i, j);
            let clipped: Vec<Rect> = per_tile[idx]
                .iter()
                .filter_map(|&k| layout.macros[k].intersect(&tile))
                .filter(|r| r.area() > 0.0)
                .collect();
            map.data[idx] = (union_area(&clipped) / area).min(1.0);
        }
    }
    Ok(FeatureMap::new("macro_region", grid, map))
}

/// Exact area of a union of axis-aligned rectangles.
fn union_area(rects: &[Rect]) -> f64 {
    match rects {
        [] => 0.0,
        [r] => r.area(),
        _ => {
            let mut xs: Vec<f64> = rects.iter().flat_map(|r| [r.x_min, r.x_max]).collect();
            xs.sort_by(f64::total_cmp);
            xs.dedup();
            let mut total = 0.0;
            let mut spans: Vec<(f64, f64)> = Vec::with_capacity(rects.len());
            for w in xs.windows(2) {
                let (xa, xb) = (w[0], w[1]);
                spans.clear();
                spans.extend(rects.iter().filter(|r| r.x_min <= xa && r.x_max >= xb).map(|r| (r.y_min, r.y_max)));
                if spans.is_empty() {
                    continue;
                }
                spans.sort_by(|a, b| a.0.total_cmp(&b.0));
                let mut covered = 0.0;
                let (mut lo, mut hi) = spans[0];
                for &(a, b) in &spans[1..] {
                    if a > hi {
                        covered += hi - lo;
                        lo = a;
                        hi = b;
                    } else {
                        hi = hi.max(b);
                    }
                }
                covered += hi - lo;
                total += covered * (xb - xa);
            }
            total
        }
    }
}

/// RUDY: every net spreads its density over its clamped bounding box,
/// weighted per tile by the overlapped fraction of the tile area.
pub fn rudy_map(layout: &Layout, grid: &GridSpec) -> Result<FeatureMap, FeatureError> {
    check_grid(layout, grid)?;
    let mut map = Map2::zeros(grid.tiles_y, grid.tiles_x);
    let area = grid.tile_area();
    for net in &layout.nets {
        let Some((bbox, d)) = net_density(net, grid) else { continue };
        let Some((i0, i1, j0, j1)) = grid.tile_span(&bbox) else { continue };
        for j in j0..=j1 {
            for i in i0..=i1 {
                let frac = bbox.overlap_area(&grid.tile_rect(i, j)) / area;
                map.data[grid.index(i, j)] += d * frac;
            }
        }
    }
    Ok(FeatureMap::new("rudy", grid, map))
}

/// Pin RUDY: each pin deposits its net's density into the tile holding it.
pub fn pin_rudy_map(layout: &Layout, grid: &GridSpec) -> Result<FeatureMap, FeatureError> {
    check_grid(layout, grid)?;
    let mut map = Map2::zeros(grid.tiles_y, grid.tiles_x);
    for net in &layout.nets {
        let Some((_, d)) = net_density(net, grid) else { continue };
        for p in &net.pins {
            // validated layouts keep pins in bounds
            if let Ok((i, j)) = grid.tile_of(p.x, p.y) {
                map.data[grid.index(i, j)] += d;
            }
        }
    }
    Ok(FeatureMap::new("pin_rudy", grid, map))
}

/// Number of cells whose lower-left corner falls in each tile.
pub fn cell_density_map(layout: &Layout, grid: &GridSpec) -> Result<FeatureMap, FeatureError> {
    check_grid(layout, grid)?;
    let mut map = Map2::zeros(grid.tiles_y, grid.tiles_x);
    for c in &layout.cells {
        let (x, y) = c.position();
        if let Ok((i, j)) = grid.tile_of(x, y) {
            map.data[grid.index(i, j)] += 1.0;
        }
    }
    Ok(FeatureMap::new("cell_density", grid, map))
}

fn capacity_map(
    layout: &Layout,
    grid: &GridSpec,
    name: &'static str,
    f: impl Fn(&crate::grid::TileCapacity) -> f64,
) -> Result<FeatureMap, FeatureError> {
    check_grid(layout, grid)?;
    let cap = layout.capacity.as_ref().ok_or(FeatureError::MissingCapacity)?;
    let data = cap.tiles.iter().map(f).collect();
    Ok(FeatureMap::new(name, grid, Map2::from_vec(grid.tiles_y, grid.tiles_x, data)))
}

/// Overflow field of the capacity report.
pub fn congestion_overflow_map(layout: &Layout, grid: &GridSpec) -> Result<FeatureMap, FeatureError> {
    capacity_map(layout, grid, "congestion_overflow", |t| t.overflow as f64)
}

fn congestion_channels(layout: &Layout, grid: &GridSpec) -> Result<Vec<FeatureMap>, FeatureError> {
    Ok(vec![
        congestion_overflow_map(layout, grid)?,
        capacity_map(layout, grid, "congestion_utilization", |t| {
            if t.total_tracks == 0 {
                0.0
            } else {
                (t.total_tracks - t.remaining_tracks) as f64 / t.total_tracks as f64
            }
        })?,
        capacity_map(layout, grid, "congestion_total_norm", |t| t.total_tracks as f64)?,
        capacity_map(layout, grid, "congestion_remaining_norm", |t| t.remaining_tracks as f64)?,
        capacity_map(layout, grid, "congestion_demand_norm", |t| {
            (t.total_tracks - t.remaining_tracks) as f64 + t.overflow as f64
        })?,
    ])
}

/// Raw (unnormalized) channels for a task, in the documented order.
pub fn raw_features(task: Task, layout: &Layout, grid: &GridSpec) -> Result<Vec<FeatureMap>, FeatureError> {
    let mut channels = vec![
        macro_region_map(layout, grid)?,
        rudy_map(layout, grid)?,
        pin_rudy_map(layout, grid)?,
    ];
    if task == Task::Drc {
        channels.push(cell_density_map(layout, grid)?);
        channels.extend(congestion_channels(layout, grid)?);
    }
    Ok(channels)
}

/// Per-task input stack with every channel min-max normalized to `[0, 1]`.
pub fn stack_features(task: Task, layout: &Layout, grid: &GridSpec) -> Result<FeatureStack, FeatureError> {
    let channels = raw_features(task, layout, grid)?
        .into_iter()
        .map(|c| FeatureMap { map: c.map.min_max_normalized(), ..c })
        .collect();
    Ok(FeatureStack { grid: *grid, task, channels })
}

/// Label map derived from a layout's capacity report, values in `[0, 1]`.
///
/// RC: overflow scaled by its maximum. DRC: overflow-weighted pin density,
/// nonzero only on overflowing tiles (the positive class for ROC).
pub fn label_map(task: Task, layout: &Layout, grid: &GridSpec) -> Result<Map2, FeatureError> {
    let overflow = congestion_overflow_map(layout, grid)?.map;
    let (_, max_over) = overflow.min_max();
    let scaled: Vec<f64> = if max_over > 0.0 {
        overflow.data.iter().map(|v| v / max_over).collect()
    } else {
        vec![0.0; overflow.data.len()]
    };
    let data = match task {
        Task::Rc => scaled,
        Task::Drc => {
            let pins = pin_rudy_map(layout, grid)?.map.min_max_normalized();
            scaled
                .iter()
                .zip(&pins.data)
                .map(|(&o, &p)| if o > 0.0 { (o * (0.5 + 0.5 * p)).clamp(0.0, 1.0) } else { 0.0 })
                .collect()
        }
    };
    Ok(Map2::from_vec(grid.tiles_y, grid.tiles_x, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, CapacityReport, Cell, Pin, TileCapacity};

    fn net(id: u32, pts: &[(f64, f64)]) -> Net {
        Net { id, pins: pts.iter().map(|&(x, y)| Pin { x, y, net_id: id }).collect() }
    }

    #[test]
    fn empty_layout_gives_zero_maps() {
        let g = make_grid(8.0, 8.0, 1.0).unwrap();
        let l = Layout::empty(g);
        for m in [
            macro_region_map(&l, &g).unwrap(),
            rudy_map(&l, &g).unwrap(),
            pin_rudy_map(&l, &g).unwrap(),
            cell_density_map(&l, &g).unwrap(),
        ] {
            assert!(m.map.data.iter().all(|&v| v == 0.0), "{} not zero", m.name);
        }
        assert_eq!(congestion_overflow_map(&l, &g), Err(FeatureError::MissingCapacity));
        assert_eq!(stack_features(Task::Drc, &l, &g).unwrap_err(), FeatureError::MissingCapacity);
    }

    #[test]
    fn macro_cover_cases() {
        let g = make_grid(2.0, 2.0, 1.0).unwrap();
        let mut l = Layout::empty(g);
        l.macros.push(Rect::new(0.0, 0.0, 1.0, 1.0));
        assert_eq!(macro_region_map(&l, &g).unwrap().map.data, vec![1.0, 0.0, 0.0, 0.0]);
        l.macros = vec![Rect::new(0.0, 0.0, 1.0, 2.0)];
        // row-major (j, i): column 0 is covered
        assert_eq!(macro_region_map(&l, &g).unwrap().map.data, vec![1.0, 0.0, 1.0, 0.0]);
        // overlapping macros never exceed full coverage
        l.macros = vec![Rect::new(0.0, 0.0, 2.0, 2.0), Rect::new(0.5, 0.5, 1.5, 1.5)];
        assert!(macro_region_map(&l, &g).unwrap().map.data.iter().all(|&v| v == 1.0));
        l.macros = vec![Rect::new(0.0, 0.0, 0.5, 1.0), Rect::new(0.25, 0.0, 0.75, 0.5)];
        let v = macro_region_map(&l, &g).unwrap().map.data[0];
        assert!((v - 0.625).abs() < 1e-15, "{v}");
    }

    #[test]
    fn rudy_full_layout_net_is_uniform() {
        let g = make_grid(16.0, 8.0, 2.0).unwrap();
        let mut l = Layout::empty(g);
        l.nets.push(net(0, &[(0.0, 0.0), (16.0, 8.0)]));
        let m = rudy_map(&l, &g).unwrap();
        let expect = (16.0 + 8.0) / (16.0 * 8.0);
        assert!(m.map.data.iter().all(|&v| (v - expect).abs() < 1e-15));
        l.nets.push(net(1, &[(0.0, 0.0), (16.0, 8.0)]));
        let twice = rudy_map(&l, &g).unwrap();
        for (a, b) in m.map.data.iter().zip(&twice.map.data) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn degenerate_net_is_clamped_to_tile() {
        let g = make_grid(4.0, 4.0, 1.0).unwrap();
        let n = net(0, &[(0.0, 0.0)]);
        let (b, d) = net_density(&n, &g).unwrap();
        assert_eq!(b, Rect::new(0.0, 0.0, 1.0, 1.0));
        assert_eq!(d, 2.0);
        let n = net(0, &[(1.5, 1.0), (1.5, 3.0)]);
        let (b, d) = net_density(&n, &g).unwrap();
        assert_eq!(b, Rect::new(1.0, 1.0, 2.0, 3.0));
        assert_eq!(d, 1.5);
    }

    #[test]
    fn pin_rudy_and_cells() {
        let g = make_grid(4.0, 4.0, 1.0).unwrap();
        let mut l = Layout::empty(g);
        l.nets.push(net(0, &[(0.2, 0.2), (0.7, 0.9)]));
        let m = pin_rudy_map(&l, &g).unwrap();
        assert_eq!(m.map.data[0], 2.0 * 2.0);
        for _ in 0..5 {
            l.cells.push(Cell { rect: Rect::new(2.5, 1.5, 3.0, 2.0) });
        }
        let c = cell_density_map(&l, &g).unwrap();
        assert_eq!(c.map.data[g.index(2, 1)], 5.0);
        assert_eq!(c.map.sum(), 5.0);
    }

    #[test]
    fn overflow_passthrough_and_stack_shapes() {
        let g = make_grid(2.0, 2.0, 1.0).unwrap();
        let mut l = Layout::empty(g);
        let mut tiles = vec![TileCapacity { total_tracks: 10, remaining_tracks: 10, overflow: 0 }; 4];
        l.capacity = Some(CapacityReport { tiles: tiles.clone() });
        assert!(congestion_overflow_map(&l, &g).unwrap().map.data.iter().all(|&v| v == 0.0));
        tiles[3] = TileCapacity { total_tracks: 10, remaining_tracks: 0, overflow: 5 };
        l.capacity = Some(CapacityReport { tiles });
        assert_eq!(congestion_overflow_map(&l, &g).unwrap().map.data, vec![0.0, 0.0, 0.0, 5.0]);
        let rc = stack_features(Task::Rc, &l, &g).unwrap();
        let drc = stack_features(Task::Drc, &l, &g).unwrap();
        assert_eq!(rc.channels.len(), 3);
        assert_eq!(drc.channels.len(), 9);
        for (c, name) in drc.channels.iter().zip(DRC_CHANNELS) {
            assert_eq!(c.name, name);
        }
        // constant total-tracks channel normalizes to zeros
        assert!(drc.channels[6].map.data.iter().all(|&v| v == 0.0));
        assert_eq!(label_map(Task::Rc, &l, &g).unwrap().data, vec![0.0, 0.0, 0.0, 1.0]);
    }
}
