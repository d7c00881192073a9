//! Physical layout model and tile decomposition.
//!
//! A layout of size `W x H` is cut into square tiles of side `l`, giving a
//! `w x h` grid. Every feature map and label is a `w x h` array of tile values
//! stored row-major with the row index `j` (y) outermost.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("layout dimensions must be positive: W={width}, H={height}, l={tile}")]
    NonPositive { width: f64, height: f64, tile: f64 },
    #[error("layout {width}x{height} is not an integer multiple of tile size {tile}")]
    NonDivisible { width: f64, height: f64, tile: f64 },
    #[error("point ({x}, {y}) lies outside the {width}x{height} layout")]
    OutOfBounds { x: f64, y: f64, width: f64, height: f64 },
    #[error("invalid layout: {0}")]
    Invalid(String),
}

/// Grid decomposition of a layout into `tiles_x x tiles_y` square tiles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub layout_width: f64,
    pub layout_height: f64,
    pub tile_size: f64,
    pub tiles_x: usize,
    pub tiles_y: usize,
}

/// Builds a grid with `w = W / l` and `h = H / l`, both of which must be exact.
pub fn make_grid(width: f64, height: f64, tile: f64) -> Result<GridSpec, GridError> {
    let all_finite = width.is_finite() && height.is_finite() && tile.is_finite();
    if !all_finite || width <= 0.0 || height <= 0.0 || tile <= 0.0 {
        return Err(GridError::NonPositive { width, height, tile });
    }
    let exact = |extent: f64| {
        let n = (extent / tile).round();
        (n >= 1.0 && n * tile == extent).then_some(n as usize)
    };
    match (exact(width), exact(height)) {
        (Some(tiles_x), Some(tiles_y)) => Ok(GridSpec {
            layout_width: width,
            layout_height: height,
            tile_size: tile,
            tiles_x,
            tiles_y,
        }),
        _ => Err(GridError::NonDivisible { width, height, tile }),
    }
}

impl GridSpec {
    pub fn num_tiles(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    /// Row-major index of tile `(i, j)`.
    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.tiles_x + i
    }

    pub fn tile_area(&self) -> f64 {
        self.tile_size * self.tile_size
    }

    pub fn tile_rect(&self, i: usize, j: usize) -> Rect {
        let l = self.tile_size;
        Rect::new(i as f64 * l, j as f64 * l, (i + 1) as f64 * l, (j + 1) as f64 * l)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..=self.layout_width).contains(&x) && (0.0..=self.layout_height).contains(&y)
    }

    pub fn bounds(&self) -> Rect {
        Rect::new(0.0, 0.0, self.layout_width, self.layout_height)
    }

    /// Tile containing `(x, y)` under half-open tiling; the maximal edge
    /// clamps into the last tile.
    pub fn tile_of(&self, x: f64, y: f64) -> Result<(usize, usize), GridError> {
        if !self.contains(x, y) {
            return Err(GridError::OutOfBounds {
                x,
                y,
                width: self.layout_width,
                height: self.layout_height,
            });
        }
        let i = ((x / self.tile_size).floor() as usize).min(self.tiles_x - 1);
        let j = ((y / self.tile_size).floor() as usize).min(self.tiles_y - 1);
        Ok((i, j))
    }

    /// Inclusive tile index range `(i0, i1, j0, j1)` touched by a rectangle
    /// with nonzero overlap. `None` when the rectangle has no area inside the grid.
    pub fn tile_span(&self, r: &Rect) -> Option<(usize, usize, usize, usize)> {
        let r = r.intersect(&self.bounds())?;
        if r.area() <= 0.0 {
            return None;
        }
        let l = self.tile_size;
        let lo = |v: f64, n: usize| ((v / l).floor() as usize).min(n - 1);
        // Exclusive upper edge: a box ending exactly on a tile boundary does not touch the next tile.
        let hi = |v: f64, n: usize| (((v / l).ceil() as usize).max(1) - 1).min(n - 1);
        Some((
            lo(r.x_min, self.tiles_x),
            hi(r.x_max, self.tiles_x),
            lo(r.y_min, self.tiles_y),
            hi(r.y_max, self.tiles_y),
        ))
    }
}

/// Tile containing `point`. Free-function form of [`GridSpec::tile_of`].
pub fn tile_of(point: (f64, f64), grid: &GridSpec) -> Result<(usize, usize), GridError> {
    grid.tile_of(point.0, point.1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Rect { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max.is_finite()
            && self.y_max.is_finite()
            && self.x_min <= self.x_max
            && self.y_min <= self.y_max
    }

    pub fn within(&self, outer: &Rect) -> bool {
        self.x_min >= outer.x_min
            && self.y_min >= outer.y_min
            && self.x_max <= outer.x_max
            && self.y_max <= outer.y_max
    }

    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        let r = Rect::new(
            self.x_min.max(other.x_min),
            self.y_min.max(other.y_min),
            self.x_max.min(other.x_max),
            self.y_max.min(other.y_max),
        );
        (r.x_min <= r.x_max && r.y_min <= r.y_max).then_some(r)
    }

    pub fn overlap_area(&self, other: &Rect) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pin {
    pub x: f64,
    pub y: f64,
    pub net_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub id: u32,
    pub pins: Vec<Pin>,
}

impl Net {
    /// Pin bounding box. Zero-area boxes are returned as-is.
    pub fn bbox(&self) -> Option<Rect> {
        let first = self.pins.first()?;
        let mut r = Rect::new(first.x, first.y, first.x, first.y);
        for p in &self.pins[1..] {
            r.x_min = r.x_min.min(p.x);
            r.y_min = r.y_min.min(p.y);
            r.x_max = r.x_max.max(p.x);
            r.y_max = r.y_max.max(p.y);
        }
        Some(r)
    }
}

/// A placed standard cell. Its reference position is the lower-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub rect: Rect,
}

impl Cell {
    pub fn position(&self) -> (f64, f64) {
        (self.rect.x_min, self.rect.y_min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TileCapacity {
    pub total_tracks: u32,
    pub remaining_tracks: u32,
    pub overflow: u32,
}

/// Per-tile routing resource report, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CapacityReport {
    pub tiles: Vec<TileCapacity>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub grid: GridSpec,
    pub macros: Vec<Rect>,
    pub cells: Vec<Cell>,
    pub nets: Vec<Net>,
    pub capacity: Option<CapacityReport>,
}

impl Layout {
    pub fn empty(grid: GridSpec) -> Self {
        Layout { grid, macros: Vec::new(), cells: Vec::new(), nets: Vec::new(), capacity: None }
    }

    pub fn pin_count(&self) -> usize {
        self.nets.iter().map(|n| n.pins.len()).sum()
    }

    /// Checks every structural invariant of the layout.
    pub fn validate(&self) -> Result<(), GridError> {
        let bounds = self.grid.bounds();
        let bad = |msg: String| Err(GridError::Invalid(msg));
        for (k, m) in self.macros.iter().enumerate() {
            if !m.is_valid() || !m.within(&bounds) {
                return bad(format!("macro {k} {m:?} is malformed or outside the layout"));
            }
        }
        for (k, c) in self.cells.iter().enumerate() {
            if !c.rect.is_valid() || !c.rect.within(&bounds) {
                return bad(format!("cell {k} {:?} is malformed or outside the layout", c.rect));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for net in &self.nets {
            if !seen.insert(net.id) {
                return bad(format!("duplicate net id {}", net.id));
            }
            if net.pins.is_empty() {
                return bad(format!("net {} has no pins", net.id));
            }
            for p in &net.pins {
                if p.net_id != net.id {
                    return bad(format!("pin of net {} tagged with net {}", net.id, p.net_id));
                }
                if !p.x.is_finite() || !p.y.is_finite() || !self.grid.contains(p.x, p.y) {
                    return bad(format!("pin ({}, {}) of net {} outside the layout", p.x, p.y, net.id));
                }
            }
        }
        if let Some(cap) = &self.capacity {
            if cap.tiles.len() != self.grid.num_tiles() {
                return bad(format!(
                    "capacity report covers {} tiles, grid has {}",
                    cap.tiles.len(),
                    self.grid.num_tiles()
                ));
            }
            if let Some(k) = cap.tiles.iter().position(|t| t.remaining_tracks > t.total_tracks) {
                return bad(format!("tile {k}: remaining tracks exceed total tracks"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn make_grid_examples() {
        let g = make_grid(256.0, 256.0, 1.0).unwrap();
        assert_eq!((g.tiles_x, g.tiles_y), (256, 256));
        let g = make_grid(512.0, 256.0, 2.0).unwrap();
        assert_eq!((g.tiles_x, g.tiles_y), (256, 128));
        assert!(matches!(make_grid(100.0, 100.0, 3.0), Err(GridError::NonDivisible { .. })));
        assert!(matches!(make_grid(0.0, 100.0, 1.0), Err(GridError::NonPositive { .. })));
        assert!(matches!(make_grid(10.0, 10.0, -1.0), Err(GridError::NonPositive { .. })));
    }

    #[test]
    fn tile_of_examples() {
        let g = make_grid(256.0, 256.0, 1.0).unwrap();
        assert_eq!(tile_of((0.0, 0.0), &g).unwrap(), (0, 0));
        assert_eq!(tile_of((255.5, 3.2), &g).unwrap(), (255, 3));
        assert_eq!(tile_of((256.0, 256.0), &g).unwrap(), (255, 255));
        assert!(matches!(tile_of((256.1, 0.0), &g), Err(GridError::OutOfBounds { .. })));
        assert!(matches!(tile_of((-0.1, 0.0), &g), Err(GridError::OutOfBounds { .. })));
    }

    #[test]
    fn tile_span_excludes_touching_edges() {
        let g = make_grid(4.0, 4.0, 1.0).unwrap();
        assert_eq!(g.tile_span(&Rect::new(0.0, 0.0, 2.0, 1.0)), Some((0, 1, 0, 0)));
        assert_eq!(g.tile_span(&Rect::new(0.5, 0.5, 0.5, 3.0)), None);
        assert_eq!(g.tile_span(&Rect::new(0.0, 0.0, 4.0, 4.0)), Some((0, 3, 0, 3)));
    }

    #[test]
    fn validate_rejects_bad_capacity() {
        let g = make_grid(2.0, 2.0, 1.0).unwrap();
        let mut layout = Layout::empty(g);
        layout.validate().unwrap();
        let bad = TileCapacity { total_tracks: 1, remaining_tracks: 2, overflow: 0 };
        layout.capacity = Some(CapacityReport { tiles: vec![bad; 4] });
        assert!(layout.validate().is_err());
        layout.capacity = Some(CapacityReport { tiles: vec![TileCapacity::default(); 3] });
        assert!(layout.validate().is_err());
    }

    proptest! {
        #[test]
        fn tile_contains_point(x in 0.0f64..=48.0, y in 0.0f64..=32.0) {
            let g = make_grid(48.0, 32.0, 4.0).unwrap();
            let (i, j) = g.tile_of(x, y).unwrap();
            let t = g.tile_rect(i, j);
            let in_x = (t.x_min <= x && x < t.x_max) || (i == g.tiles_x - 1 && x == t.x_max);
            let in_y = (t.y_min <= y && y < t.y_max) || (j == g.tiles_y - 1 && y == t.y_max);
            prop_assert!(in_x && in_y);
        }
    }
}
