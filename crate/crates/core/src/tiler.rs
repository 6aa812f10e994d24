// SPDX-License-Identifier: Apache-2.0

//! Splitting a layout into work elements and merging corrected tiles.
//!
//! Cores form a row-major grid over the layout bounding box. Each element
//! carries, unclipped, every polygon of every interaction component that
//! touches its core. Two polygons interact when their bounding boxes are
//! within [`interaction_distance`]: beyond that, no intensity sample taken
//! for one can see any moved rectangle of the other. Independent components
//! evolve independently under correction, so a tile reproduces the
//! monolithic offsets of the polygons it owns exactly.
//!
//! Ownership is decided per target fragment: a fragment belongs to the tile
//! whose half-open core contains its midpoint (the last row and column also
//! own the bounding box's max edges). Stitching collects owned offsets from
//! each result and rebuilds the merged layout from the original fragments.

use std::collections::BTreeSet;
use std::sync::Arc;

use thiserror::Error;

use crate::layout::{apply_offsets, fragment_shared, FragmentSet, Layout, LayoutError, MoveError, Rect};
use crate::litho::OpticalModel;
use crate::opc::{CorrectionStats, OpcParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TileError {
    #[error("tile size must be at least 1, got {0}")]
    TileSize(i64),
    #[error("unknown tile id {0}")]
    UnknownTile(u32),
    #[error("duplicate result for tile {0}")]
    Duplicate(u32),
    #[error("no result for tiles {0:?}")]
    Missing(Vec<u32>),
    #[error("fragment {fragment} of polygon {polygon} is owned by tile {tile} but absent from it")]
    Unclaimed { fragment: usize, polygon: usize, tile: u32 },
    #[error("tile {tile}: {reason}")]
    Mismatch { tile: u32, reason: String },
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Move(#[from] MoveError),
}

/// Bounding-box gap (L-infinity, grid units) beyond which two polygons can
/// never influence each other's correction.
pub fn interaction_distance(model: &OpticalModel, params: &OpcParams) -> f64 {
    // moved geometry stays within max_total_offset of the target (plus the
    // quarter-unit rounding); samples stay within search_radius of it
    model.cull_radius() + model.search_radius() + params.max_total_offset + 0.25
}

/// Minimum halo every element gets, whatever its contents.
pub fn min_halo(model: &OpticalModel, params: &OpcParams) -> f64 {
    model.cull_radius() + params.max_total_offset
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkElement {
    pub tile_id: u32,
    pub core: Rect,
    /// Polygons of every component touching the core, in original order.
    pub halo_geom: Layout,
    pub halo_width: f64,
    /// Original polygon index of each polygon in `halo_geom`.
    pub origin: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileResult {
    pub tile_id: u32,
    pub corrected: Layout,
    pub stats: CorrectionStats,
    /// Final quarter-unit offsets of the tile's fragments.
    pub offsets: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tiling {
    pub bbox: Rect,
    pub tile_size: i64,
    pub cols: usize,
    pub rows: usize,
    pub elements: Vec<WorkElement>,
}

impl Tiling {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Tile owning the point given in doubled coordinates, if it lies in
    /// the bounding box.
    pub fn owner(&self, x2: i64, y2: i64) -> Option<u32> {
        let b = self.bbox;
        if x2 < 2 * b.x0 || x2 > 2 * b.x1 || y2 < 2 * b.y0 || y2 > 2 * b.y1 {
            return None;
        }
        let col = (((x2 - 2 * b.x0) / (2 * self.tile_size)) as usize).min(self.cols - 1);
        let row = (((y2 - 2 * b.y0) / (2 * self.tile_size)) as usize).min(self.rows - 1);
        Some((row * self.cols + col) as u32)
    }
}

fn core_rect(bbox: Rect, ts: i64, col: usize, row: usize) -> Rect {
    let x0 = bbox.x0 + col as i64 * ts;
    let y0 = bbox.y0 + row as i64 * ts;
    Rect::new(x0, y0, (x0 + ts).min(bbox.x1), (y0 + ts).min(bbox.y1))
}

/// Connected components of the "bounding boxes within `reach`" relation.
fn components(bounds: &[Rect], reach: f64) -> Vec<usize> {
    let n = bounds.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (bounds[i].x0, i));
    for (k, &i) in order.iter().enumerate() {
        for &j in &order[k + 1..] {
            if (bounds[j].x0 - bounds[i].x1) as f64 > reach {
                break;
            }
            if bounds[i].gap(&bounds[j]) as f64 <= reach {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}

/// Splits `layout` into a row-major grid of `tile_size` cores.
pub fn partition(
    layout: &Layout,
    tile_size: i64,
    model: &OpticalModel,
    params: &OpcParams,
) -> Result<Tiling, TileError> {
    if tile_size < 1 {
        return Err(TileError::TileSize(tile_size));
    }
    let bbox = layout.bbox();
    let cols = ((bbox.width() + tile_size - 1) / tile_size) as usize;
    let rows = ((bbox.height() + tile_size - 1) / tile_size) as usize;
    let polys = layout.polygons();
    let bounds: Vec<Rect> = polys.iter().map(|p| p.bounds()).collect();
    let comp = components(&bounds, interaction_distance(model, params));
    let floor = min_halo(model, params);

    let mut elements = Vec::with_capacity(cols * rows);
    for row in 0..rows {
        for col in 0..cols {
            let core = core_rect(bbox, tile_size, col, row);
            let touched: BTreeSet<usize> = (0..polys.len())
                .filter(|&i| bounds[i].touches(&core))
                .map(|i| comp[i])
                .collect();
            let origin: Vec<usize> = (0..polys.len()).filter(|&i| touched.contains(&comp[i])).collect();
            let reach = origin
                .iter()
                .map(|&i| {
                    let b = bounds[i];
                    (core.x0 - b.x0).max(b.x1 - core.x1).max(core.y0 - b.y0).max(b.y1 - core.y1)
                })
                .max()
                .unwrap_or(0);
            let halo_width = floor.max(reach as f64);
            let region = core.expand(halo_width.ceil() as i64).intersect(&bbox);
            let halo_geom = Layout::new(
                layout.grid(),
                region,
                origin.iter().map(|&i| polys[i].clone()).collect(),
            )?;
            elements.push(WorkElement {
                tile_id: (row * cols + col) as u32,
                core,
                halo_geom,
                halo_width,
                origin,
            });
        }
    }
    Ok(Tiling {
        bbox,
        tile_size,
        cols,
        rows,
        elements,
    })
}

/// Incremental, order-independent merge of tile results.
#[derive(Debug)]
pub struct Stitcher {
    fragments: FragmentSet,
    frag_len: i64,
    owner: Vec<u32>,
    offsets: Vec<Option<i64>>,
    origins: Vec<Vec<usize>>,
    received: BTreeSet<u32>,
}

impl Stitcher {
    pub fn new(original: Arc<Layout>, tiling: &Tiling, frag_len: i64) -> Result<Self, TileError> {
        let fragments = fragment_shared(original, frag_len)?;
        let mut owner = Vec::with_capacity(fragments.len());
        for (k, f) in fragments.fragments().iter().enumerate() {
            let (x2, y2) = f.mid2();
            let t = tiling.owner(x2, y2).ok_or(TileError::Mismatch {
                tile: u32::MAX,
                reason: format!("fragment {k} lies outside the tiled area"),
            })?;
            owner.push(t);
        }
        // every owned fragment must be present in its owner's element
        for e in &tiling.elements {
            let present: BTreeSet<usize> = e.origin.iter().copied().collect();
            for (k, f) in fragments.fragments().iter().enumerate() {
                if owner[k] == e.tile_id && !present.contains(&f.polygon_id) {
                    return Err(TileError::Unclaimed {
                        fragment: k,
                        polygon: f.polygon_id,
                        tile: e.tile_id,
                    });
                }
            }
        }
        let n = fragments.len();
        Ok(Self {
            fragments,
            frag_len,
            owner,
            offsets: vec![None; n],
            origins: tiling.elements.iter().map(|e| e.origin.clone()).collect(),
            received: BTreeSet::new(),
        })
    }

    pub fn tile_count(&self) -> usize {
        self.origins.len()
    }

    pub fn is_complete(&self) -> bool {
        self.received.len() == self.origins.len()
    }

    pub fn missing(&self) -> Vec<u32> {
        (0..self.origins.len() as u32)
            .filter(|t| !self.received.contains(t))
            .collect()
    }

    /// Checks `result` against its element and takes the offsets of the
    /// fragments the tile owns.
    pub fn accept(&mut self, element: &WorkElement, result: &TileResult) -> Result<(), TileError> {
        let t = result.tile_id;
        if t as usize >= self.origins.len() || element.tile_id != t {
            return Err(TileError::UnknownTile(t));
        }
        if self.received.contains(&t) {
            return Err(TileError::Duplicate(t));
        }
        let origin = &self.origins[t as usize];
        let expected: usize = origin.iter().map(|&p| self.fragments.polygon_range(p).len()).sum();
        if result.offsets.len() != expected {
            return Err(TileError::Mismatch {
                tile: t,
                reason: format!("{} offsets for {expected} fragments", result.offsets.len()),
            });
        }
        // the returned geometry must be what the offsets describe
        let mut local = fragment_shared(Arc::new(element.halo_geom.clone()), self.frag_len)?;
        local.set_quantized(&result.offsets);
        if apply_offsets(&local)? != result.corrected {
            return Err(TileError::Mismatch {
                tile: t,
                reason: "corrected geometry disagrees with the reported offsets".into(),
            });
        }
        let mut cursor = 0;
        for &p in origin {
            for k in self.fragments.polygon_range(p) {
                if self.owner[k] == t {
                    self.offsets[k] = Some(result.offsets[cursor]);
                }
                cursor += 1;
            }
        }
        self.received.insert(t);
        Ok(())
    }

    /// The merged corrected layout.
    pub fn finish(mut self) -> Result<Layout, TileError> {
        let missing = self.missing();
        if !missing.is_empty() {
            return Err(TileError::Missing(missing));
        }
        let mut q = Vec::with_capacity(self.offsets.len());
        for (k, o) in self.offsets.iter().enumerate() {
            q.push(o.ok_or(TileError::Unclaimed {
                fragment: k,
                polygon: self.fragments.fragments()[k].polygon_id,
                tile: self.owner[k],
            })?);
        }
        self.fragments.set_quantized(&q);
        Ok(apply_offsets(&self.fragments)?)
    }
}

/// Merges a complete set of results in one call.
pub fn stitch(
    results: &[TileResult],
    original: &Layout,
    tiling: &Tiling,
    frag_len: i64,
) -> Result<Layout, TileError> {
    let mut s = Stitcher::new(Arc::new(original.clone()), tiling, frag_len)?;
    for r in results {
        let e = tiling
            .elements
            .get(r.tile_id as usize)
            .ok_or(TileError::UnknownTile(r.tile_id))?;
        s.accept(e, r)?;
    }
    s.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{write_layout, GridPitch, Polygon};
    use crate::opc::{correct_tile, DEFAULT_FRAG_LEN};

    fn rect_layout(bbox: Rect, rects: &[Rect]) -> Layout {
        Layout::new(
            GridPitch::from_nm(1).unwrap(),
            bbox,
            rects.iter().map(|&r| Polygon::rect(r).unwrap()).collect(),
        )
        .unwrap()
    }

    fn run(e: &WorkElement) -> TileResult {
        let c = correct_tile(&e.halo_geom, &OpticalModel::default(), &OpcParams::default(), DEFAULT_FRAG_LEN)
            .unwrap();
        TileResult {
            tile_id: e.tile_id,
            corrected: c.layout,
            stats: c.stats,
            offsets: c.offsets,
        }
    }

    #[test]
    fn single_tile_holds_everything() {
        let l = rect_layout(Rect::new(0, 0, 200, 200), &[Rect::new(50, 50, 150, 90)]);
        let t = partition(&l, 400, &OpticalModel::default(), &OpcParams::default()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.elements[0].core, l.bbox());
        assert_eq!(t.elements[0].halo_geom, l);
        let r = run(&t.elements[0]);
        let merged = stitch(std::slice::from_ref(&r), &l, &t, DEFAULT_FRAG_LEN).unwrap();
        assert_eq!(write_layout(&merged), write_layout(&r.corrected));
    }

    #[test]
    fn grid_cores_partition_bbox() {
        let l = rect_layout(Rect::new(0, 0, 400, 400), &[]);
        let t = partition(&l, 200, &OpticalModel::default(), &OpcParams::default()).unwrap();
        assert_eq!((t.cols, t.rows, t.len()), (2, 2, 4));
        let cores: Vec<Rect> = t.elements.iter().map(|e| e.core).collect();
        assert_eq!(cores[0], Rect::new(0, 0, 200, 200));
        assert_eq!(cores[1], Rect::new(200, 0, 400, 200));
        assert_eq!(cores[2], Rect::new(0, 200, 200, 400));
        assert_eq!(cores.iter().map(Rect::area).sum::<i64>(), 400 * 400);
        for (i, a) in cores.iter().enumerate() {
            for b in &cores[i + 1..] {
                assert!(a.intersect(b).is_empty());
            }
        }
        // ragged last column
        let l = rect_layout(Rect::new(0, 0, 450, 100), &[]);
        let t = partition(&l, 200, &OpticalModel::default(), &OpcParams::default()).unwrap();
        assert_eq!((t.cols, t.rows), (3, 1));
        assert_eq!(t.elements[2].core, Rect::new(400, 0, 450, 100));
    }

    #[test]
    fn straddling_polygon_is_in_both_elements() {
        let l = rect_layout(Rect::new(0, 0, 400, 200), &[Rect::new(150, 50, 250, 150)]);
        let t = partition(&l, 200, &OpticalModel::default(), &OpcParams::default()).unwrap();
        assert_eq!(t.elements[0].origin, vec![0]);
        assert_eq!(t.elements[1].origin, vec![0]);
        for e in &t.elements {
            assert!(e.halo_width >= min_halo(&OpticalModel::default(), &OpcParams::default()));
        }
    }

    #[test]
    fn owner_is_half_open_with_closed_far_edges() {
        let l = rect_layout(Rect::new(0, 0, 400, 400), &[]);
        let t = partition(&l, 200, &OpticalModel::default(), &OpcParams::default()).unwrap();
        assert_eq!(t.owner(0, 0), Some(0));
        assert_eq!(t.owner(399, 0), Some(0));
        assert_eq!(t.owner(400, 0), Some(1));
        assert_eq!(t.owner(800, 800), Some(3));
        assert_eq!(t.owner(400, 400), Some(3));
        assert_eq!(t.owner(801, 0), None);
    }

    #[test]
    fn far_shapes_are_independent() {
        let l = rect_layout(
            Rect::new(0, 0, 2000, 200),
            &[Rect::new(20, 50, 120, 150), Rect::new(1800, 50, 1900, 150)],
        );
        let t = partition(&l, 1000, &OpticalModel::default(), &OpcParams::default()).unwrap();
        assert_eq!(t.elements[0].origin, vec![0]);
        assert_eq!(t.elements[1].origin, vec![1]);
        // a shape just inside the interaction distance joins the component
        let l = rect_layout(
            Rect::new(0, 0, 2000, 200),
            &[Rect::new(800, 50, 900, 150), Rect::new(1100, 50, 1200, 150)],
        );
        let t = partition(&l, 1000, &OpticalModel::default(), &OpcParams::default()).unwrap();
        assert_eq!(t.elements[0].origin, vec![0, 1]);
        assert_eq!(t.elements[1].origin, vec![0, 1]);
    }

    #[test]
    fn duplicates_and_gaps_are_errors() {
        let l = rect_layout(
            Rect::new(0, 0, 2000, 200),
            &[Rect::new(20, 50, 120, 150), Rect::new(1800, 50, 1900, 150)],
        );
        let t = partition(&l, 1000, &OpticalModel::default(), &OpcParams::default()).unwrap();
        let r0 = run(&t.elements[0]);
        assert_eq!(
            stitch(&[r0.clone(), r0.clone()], &l, &t, DEFAULT_FRAG_LEN),
            Err(TileError::Duplicate(0))
        );
        assert_eq!(
            stitch(std::slice::from_ref(&r0), &l, &t, DEFAULT_FRAG_LEN),
            Err(TileError::Missing(vec![1]))
        );
        let mut bad = run(&t.elements[1]);
        bad.offsets[0] += 4;
        assert!(matches!(
            stitch(&[r0, bad], &l, &t, DEFAULT_FRAG_LEN),
            Err(TileError::Mismatch { tile: 1, .. })
        ));
        assert_eq!(
            partition(&l, 0, &OpticalModel::default(), &OpcParams::default()),
            Err(TileError::TileSize(0))
        );
    }
}
