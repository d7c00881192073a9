//! Line-oriented layout text format.
//!
//! ```text
//! # comment
//! GRID W H l
//! MACRO x0 y0 x1 y1
//! CELL x0 y0 x1 y1
//! NET id
//! PIN net_id x y
//! CAP i j total remaining overflow
//! ```
//!
//! `GRID` must precede every other record. A `CAP` report, when present,
//! must cover every tile exactly once.

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

use crate::grid::{make_grid, CapacityReport, Cell, GridError, Layout, Net, Pin, Rect, TileCapacity};

#[derive(Debug, Error)]
pub enum LayoutIoError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown record tag `{tag}`")]
    UnknownTag { line: usize, tag: String },
    #[error("missing GRID record")]
    MissingGrid,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fields<T: std::str::FromStr>(line: usize, parts: &[&str], n: usize) -> Result<Vec<T>, LayoutIoError> {
    if parts.len() != n {
        return Err(LayoutIoError::Parse {
            line,
            msg: format!("expected {n} fields, found {}", parts.len()),
        });
    }
    parts
        .iter()
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| LayoutIoError::Parse { line, msg: format!("bad number `{s}`") })
        })
        .collect()
}

pub fn parse_layout(text: &str) -> Result<Layout, LayoutIoError> {
    let mut layout: Option<Layout> = None;
    let mut nets: IndexMap<u32, Net> = IndexMap::new();
    let mut caps: Vec<Option<TileCapacity>> = Vec::new();
    let mut any_cap = false;

    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let tag = parts.next().unwrap_or_default();
        let rest: Vec<&str> = parts.collect();

        if tag == "GRID" {
            if layout.is_some() {
                return Err(LayoutIoError::Parse { line, msg: "duplicate GRID record".into() });
            }
            let v: Vec<f64> = fields(line, &rest, 3)?;
            let grid = make_grid(v[0], v[1], v[2])?;
            caps = vec![None; grid.num_tiles()];
            layout = Some(Layout::empty(grid));
            continue;
        }
        let lay = match layout.as_mut() {
            Some(l) => l,
            None if matches!(tag, "MACRO" | "CELL" | "NET" | "PIN" | "CAP") => {
                return Err(LayoutIoError::Parse { line, msg: format!("{tag} before GRID") })
            }
            None => return Err(LayoutIoError::UnknownTag { line, tag: tag.to_string() }),
        };
        match tag {
            "MACRO" => {
                let v: Vec<f64> = fields(line, &rest, 4)?;
                lay.macros.push(Rect::new(v[0], v[1], v[2], v[3]));
            }
            "CELL" => {
                let v: Vec<f64> = fields(line, &rest, 4)?;
                lay.cells.push(Cell { rect: Rect::new(v[0], v[1], v[2], v[3]) });
            }
            "NET" => {
                let v: Vec<u32> = fields(line, &rest, 1)?;
                if nets.insert(v[0], Net { id: v[0], pins: Vec::new() }).is_some() {
                    return Err(LayoutIoError::Parse { line, msg: format!("duplicate NET {}", v[0]) });
                }
            }
            "PIN" => {
                if rest.len() != 3 {
                    return Err(LayoutIoError::Parse { line, msg: "expected 3 fields".into() });
                }
                let id: Vec<u32> = fields(line, &rest[..1], 1)?;
                let xy: Vec<f64> = fields(line, &rest[1..], 2)?;
                let net = nets.get_mut(&id[0]).ok_or_else(|| LayoutIoError::Parse {
                    line,
                    msg: format!("PIN references undeclared net {}", id[0]),
                })?;
                net.pins.push(Pin { x: xy[0], y: xy[1], net_id: id[0] });
            }
            "CAP" => {
                let v: Vec<u64> = fields(line, &rest, 5)?;
                let (i, j) = (v[0] as usize, v[1] as usize);
                let grid = lay.grid;
                if i >= grid.tiles_x || j >= grid.tiles_y {
                    return Err(LayoutIoError::Parse { line, msg: format!("CAP tile ({i}, {j}) outside grid") });
                }
                let to_u32 = |x: u64| {
                    u32::try_from(x).map_err(|_| LayoutIoError::Parse { line, msg: "track count too large".into() })
                };
                let slot = &mut caps[grid.index(i, j)];
                if slot.is_some() {
                    return Err(LayoutIoError::Parse { line, msg: format!("duplicate CAP for tile ({i}, {j})") });
                }
                *slot = Some(TileCapacity {
                    total_tracks: to_u32(v[2])?,
                    remaining_tracks: to_u32(v[3])?,
                    overflow: to_u32(v[4])?,
                });
                any_cap = true;
            }
            other => return Err(LayoutIoError::UnknownTag { line, tag: other.to_string() }),
        }
    }

    let mut layout = layout.ok_or(LayoutIoError::MissingGrid)?;
    layout.nets = nets.into_values().collect();
    if any_cap {
        let tiles: Option<Vec<TileCapacity>> = caps.into_iter().collect();
        let tiles = tiles.ok_or_else(|| {
            GridError::Invalid("capacity report does not cover every tile".to_string())
        })?;
        layout.capacity = Some(CapacityReport { tiles });
    }
    layout.validate()?;
    Ok(layout)
}

/// Serializes a layout. Floats use shortest round-trip formatting so
/// `parse_layout(&write_layout(l)) == l`.
pub fn write_layout(layout: &Layout) -> String {
    let mut out = String::new();
    let g = &layout.grid;
    let _ = writeln!(out, "GRID {} {} {}", g.layout_width, g.layout_height, g.tile_size);
    for m in &layout.macros {
        let _ = writeln!(out, "MACRO {} {} {} {}", m.x_min, m.y_min, m.x_max, m.y_max);
    }
    for c in &layout.cells {
        let r = &c.rect;
        let _ = writeln!(out, "CELL {} {} {} {}", r.x_min, r.y_min, r.x_max, r.y_max);
    }
    for net in &layout.nets {
        let _ = writeln!(out, "NET {}", net.id);
        for p in &net.pins {
            let _ = writeln!(out, "PIN {} {} {}", net.id, p.x, p.y);
        }
    }
    if let Some(cap) = &layout.capacity {
        for j in 0..g.tiles_y {
            for i in 0..g.tiles_x {
                let t = cap.tiles[g.index(i, j)];
                let _ = writeln!(out, "CAP {i} {j} {} {} {}", t.total_tracks, t.remaining_tracks, t.overflow);
            }
        }
    }
    out
}

pub fn read_layout_file(path: impl AsRef<Path>) -> Result<Layout, LayoutIoError> {
    parse_layout(&std::fs::read_to_string(path)?)
}

pub fn write_layout_file(path: impl AsRef<Path>, layout: &Layout) -> Result<(), LayoutIoError> {
    std::fs::write(path, write_layout(layout))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# tiny layout
GRID 4 4 2
MACRO 0 0 2 2
CELL 2.5 2.5 3 3
NET 7
PIN 7 0.5 0.5
PIN 7 3.5 1
CAP 0 0 10 4 0
CAP 1 0 10 0 3
CAP 0 1 10 10 0
CAP 1 1 10 9 0
";

    #[test]
    fn parses_all_record_kinds() {
        let l = parse_layout(SAMPLE).unwrap();
        assert_eq!((l.grid.tiles_x, l.grid.tiles_y), (2, 2));
        assert_eq!(l.macros.len(), 1);
        assert_eq!(l.cells.len(), 1);
        assert_eq!(l.nets[0].pins.len(), 2);
        assert_eq!(l.capacity.as_ref().unwrap().tiles[1].overflow, 3);
    }

    #[test]
    fn write_then_parse_is_identity() {
        let l = parse_layout(SAMPLE).unwrap();
        let again = parse_layout(&write_layout(&l)).unwrap();
        assert_eq!(l, again);
    }

    #[test]
    fn rejects_unknown_tag_and_bad_input() {
        let err = parse_layout("GRID 4 4 2\nVIA 1 2\n").unwrap_err();
        assert!(matches!(err, LayoutIoError::UnknownTag { line: 2, .. }));
        assert!(matches!(parse_layout("MACRO 0 0 1 1\n"), Err(LayoutIoError::Parse { .. })));
        assert!(matches!(parse_layout("# nothing\n"), Err(LayoutIoError::MissingGrid)));
        assert!(parse_layout("GRID 4 4 2\nCAP 0 0 1 1 0\n").is_err());
        assert!(parse_layout("GRID 4 4 2\nPIN 3 1 1\n").is_err());
        assert!(parse_layout("GRID 4 4 2\nMACRO 0 0 5 1\n").is_err());
        assert!(matches!(parse_layout("GRID 10 10 3\n"), Err(LayoutIoError::Grid(GridError::NonDivisible { .. }))));
    }
}
