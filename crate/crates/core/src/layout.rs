// SPDX-License-Identifier: Apache-2.0

//! Rectilinear design layouts.
//!
//! A [`Layout`] is an ordered set of Manhattan polygons on an integer grid.
//! Polygons are stored in canonical form (counter-clockwise, starting at the
//! lexicographically smallest vertex) so that parsing and writing are exact
//! inverses. This module also owns edge fragmentation and the reconstruction
//! of moved fragments back into polygons.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const LAYOUT_MAGIC: &str = "LAYOUTv1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LayoutError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("polygon {polygon}: edge {edge} is not axis-parallel")]
    NonManhattan { polygon: usize, edge: usize },
    #[error("polygon {polygon}: edge {edge} has zero length")]
    ZeroLengthEdge { polygon: usize, edge: usize },
    #[error("polygon {polygon}: edges {edge} and {next} do not alternate horizontal/vertical")]
    NotAlternating {
        polygon: usize,
        edge: usize,
        next: usize,
    },
    #[error("polygon {polygon}: needs at least 4 vertices, got {count}")]
    TooFewVertices { polygon: usize, count: usize },
    #[error("polygon {polygon} is self-intersecting")]
    SelfIntersection { polygon: usize },
    #[error("polygon {polygon} has a vertex outside the bounding box")]
    OutsideBbox { polygon: usize },
    #[error("degenerate bounding box")]
    BadBbox,
    #[error("invalid grid pitch {0:?}")]
    BadGrid(String),
    #[error("max_frag_len must be at least 2, got {0}")]
    FragmentLength(i64),
    #[error("could not place polygon {placed} of {requested} after {tries} attempts")]
    PlacementExhausted {
        placed: usize,
        requested: usize,
        tries: usize,
    },
    #[error("invalid generator parameters: {0}")]
    Generator(String),
}

pub type Result<T, E = LayoutError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Point {
    pub x: i64,
    pub y: i64,
}

impl Point {
    pub const fn new(x: i64, y: i64) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]` in integer grid units.
/// The derived ordering is the lexicographic `(x0, y0, x1, y1)` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rect {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl Rect {
    pub const fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> i64 {
        self.width() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }

    pub fn contains_point(&self, p: Point) -> bool {
        p.x >= self.x0 && p.x <= self.x1 && p.y >= self.y0 && p.y <= self.y1
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.x0 >= self.x0 && other.x1 <= self.x1 && other.y0 >= self.y0 && other.y1 <= self.y1
    }

    pub fn expand(&self, by: i64) -> Rect {
        Rect::new(self.x0 - by, self.y0 - by, self.x1 + by, self.y1 + by)
    }

    pub fn intersect(&self, other: &Rect) -> Rect {
        Rect::new(
            self.x0.max(other.x0),
            self.y0.max(other.y0),
            self.x1.min(other.x1),
            self.y1.min(other.y1),
        )
    }

    pub fn union(&self, other: &Rect) -> Rect {
        Rect::new(
            self.x0.min(other.x0),
            self.y0.min(other.y0),
            self.x1.max(other.x1),
            self.y1.max(other.y1),
        )
    }

    /// Closed rectangles overlap or touch.
    pub fn touches(&self, other: &Rect) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1 && self.y0 <= other.y1 && other.y0 <= self.y1
    }

    /// Rectilinear separation: the larger of the x gap and the y gap
    /// (zero or negative when the rectangles overlap in both axes).
    pub fn gap(&self, other: &Rect) -> i64 {
        let gx = (other.x0 - self.x1).max(self.x0 - other.x1);
        let gy = (other.y0 - self.y1).max(self.y0 - other.y1);
        gx.max(gy)
    }

    pub fn scale(&self, k: i64) -> Rect {
        Rect::new(self.x0 * k, self.y0 * k, self.x1 * k, self.y1 * k)
    }
}

/// Physical size of one grid unit, kept as an exact decimal so the
/// quarter-grid refinement of corrected layouts never rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridPitch {
    mantissa: u64,
    decimals: u32,
}

impl GridPitch {
    pub fn from_nm(nm: u64) -> Result<Self> {
        if nm == 0 {
            return Err(LayoutError::BadGrid(nm.to_string()));
        }
        Ok(Self {
            mantissa: nm,
            decimals: 0,
        })
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || LayoutError::BadGrid(s.to_string());
        let (int, frac) = match s.split_once('.') {
            Some((i, f)) => (i, f),
            None => (s, ""),
        };
        if int.is_empty()
            || !int.bytes().all(|b| b.is_ascii_digit())
            || !frac.bytes().all(|b| b.is_ascii_digit())
            || (s.contains('.') && frac.is_empty())
            || frac.len() > 18
        {
            return Err(bad());
        }
        let digits = format!("{int}{frac}");
        let mantissa: u64 = digits.parse().map_err(|_| bad())?;
        if mantissa == 0 {
            return Err(bad());
        }
        Ok(Self {
            mantissa,
            decimals: frac.len() as u32,
        }
        .normalized())
    }

    fn normalized(mut self) -> Self {
        while self.decimals > 0 && self.mantissa.is_multiple_of(10) {
            self.mantissa /= 10;
            self.decimals -= 1;
        }
        self
    }

    /// The pitch of the x4 sub-grid used for corrected output.
    pub fn quarter(&self) -> Self {
        Self {
            mantissa: self.mantissa * 25,
            decimals: self.decimals + 2,
        }
        .normalized()
    }

    pub fn as_nm(&self) -> f64 {
        self.mantissa as f64 / 10f64.powi(self.decimals as i32)
    }
}

impl fmt::Display for GridPitch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.decimals == 0 {
            return write!(f, "{}", self.mantissa);
        }
        let digits = format!("{:0>width$}", self.mantissa, width = self.decimals as usize + 1);
        let split = digits.len() - self.decimals as usize;
        write!(f, "{}.{}", &digits[..split], &digits[split..])
    }
}

/// Outward edge normal of a counter-clockwise polygon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Normal {
    PosX,
    NegX,
    PosY,
    NegY,
}

impl Normal {
    /// Outward normal of the directed edge `a -> b` on a CCW polygon.
    fn of_edge(a: Point, b: Point) -> Normal {
        // rotate the direction clockwise
        match ((b.x - a.x).signum(), (b.y - a.y).signum()) {
            (1, 0) => Normal::NegY,
            (-1, 0) => Normal::PosY,
            (0, 1) => Normal::PosX,
            (0, -1) => Normal::NegX,
            _ => unreachable!("edges are axis-parallel and non-degenerate"),
        }
    }

    pub fn vector(self) -> (i64, i64) {
        match self {
            Normal::PosX => (1, 0),
            Normal::NegX => (-1, 0),
            Normal::PosY => (0, 1),
            Normal::NegY => (0, -1),
        }
    }

    pub fn is_vertical(self) -> bool {
        matches!(self, Normal::PosY | Normal::NegY)
    }
}

/// A simple Manhattan polygon in canonical form.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Polygon {
    vertices: Vec<Point>,
}

fn is_horizontal(a: Point, b: Point) -> bool {
    a.y == b.y
}

fn signed_area2(vs: &[Point]) -> i128 {
    let n = vs.len();
    (0..n)
        .map(|i| {
            let a = vs[i];
            let b = vs[(i + 1) % n];
            a.x as i128 * b.y as i128 - b.x as i128 * a.y as i128
        })
        .sum()
}

fn segments_intersect(a0: Point, a1: Point, b0: Point, b1: Point) -> bool {
    let (ax0, ax1) = (a0.x.min(a1.x), a0.x.max(a1.x));
    let (ay0, ay1) = (a0.y.min(a1.y), a0.y.max(a1.y));
    let (bx0, bx1) = (b0.x.min(b1.x), b0.x.max(b1.x));
    let (by0, by1) = (b0.y.min(b1.y), b0.y.max(b1.y));
    ax0 <= bx1 && bx0 <= ax1 && ay0 <= by1 && by0 <= ay1
}

impl Polygon {
    /// Validates a vertex ring and brings it into canonical form. Clockwise
    /// input is reversed; the ring is rotated to start at its smallest vertex.
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        Self::validated(vertices, 0, false)
    }

    /// Like [`Polygon::new`] but rejects clockwise rings as self-intersecting;
    /// used for rings produced by moving edges, where a reversal means the
    /// outline folded over itself.
    pub(crate) fn new_ccw(vertices: Vec<Point>, id: usize) -> Result<Self> {
        Self::validated(vertices, id, true)
    }

    fn validated(mut vs: Vec<Point>, id: usize, require_ccw: bool) -> Result<Self> {
        let n = vs.len();
        if n < 4 {
            return Err(LayoutError::TooFewVertices {
                polygon: id,
                count: n,
            });
        }
        for i in 0..n {
            let (a, b) = (vs[i], vs[(i + 1) % n]);
            if a == b {
                return Err(LayoutError::ZeroLengthEdge { polygon: id, edge: i });
            }
            if a.x != b.x && a.y != b.y {
                return Err(LayoutError::NonManhattan { polygon: id, edge: i });
            }
        }
        for i in 0..n {
            let (a, b, c) = (vs[i], vs[(i + 1) % n], vs[(i + 2) % n]);
            if is_horizontal(a, b) == is_horizontal(b, c) {
                return Err(LayoutError::NotAlternating {
                    polygon: id,
                    edge: i,
                    next: (i + 1) % n,
                });
            }
        }
        if !ring_is_simple(&vs) {
            return Err(LayoutError::SelfIntersection { polygon: id });
        }
        if signed_area2(&vs) < 0 {
            if require_ccw {
                return Err(LayoutError::SelfIntersection { polygon: id });
            }
            vs.reverse();
        }
        let start = vs
            .iter()
            .enumerate()
            .min_by_key(|(_, p)| **p)
            .map(|(i, _)| i)
            .unwrap_or(0);
        vs.rotate_left(start);
        Ok(Self { vertices: vs })
    }

    /// Axis-aligned rectangle as a polygon.
    pub fn rect(r: Rect) -> Result<Self> {
        Self::new(vec![
            Point::new(r.x0, r.y0),
            Point::new(r.x1, r.y0),
            Point::new(r.x1, r.y1),
            Point::new(r.x0, r.y1),
        ])
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Directed edges in winding order.
    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn area(&self) -> i64 {
        (signed_area2(&self.vertices) / 2) as i64
    }

    pub fn bounds(&self) -> Rect {
        let mut r = Rect::new(i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        for p in &self.vertices {
            r.x0 = r.x0.min(p.x);
            r.y0 = r.y0.min(p.y);
            r.x1 = r.x1.max(p.x);
            r.y1 = r.y1.max(p.y);
        }
        r
    }

    /// Even-odd containment for a point that is not on the boundary.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if a.x != b.x {
                continue;
            }
            let (y0, y1) = (a.y.min(b.y) as f64, a.y.max(b.y) as f64);
            if (a.x as f64) > x && y >= y0 && y < y1 {
                inside = !inside;
            }
        }
        inside
    }

    pub fn scaled(&self, k: i64) -> Polygon {
        Polygon {
            vertices: self
                .vertices
                .iter()
                .map(|p| Point::new(p.x * k, p.y * k))
                .collect(),
        }
    }
}

fn ring_is_simple(vs: &[Point]) -> bool {
    let n = vs.len();
    for i in 0..n {
        let (a0, a1) = (vs[i], vs[(i + 1) % n]);
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            let (b0, b1) = (vs[j], vs[(j + 1) % n]);
            if segments_intersect(a0, a1, b0, b1) {
                return false;
            }
        }
    }
    true
}

/// A rectilinear layout: grid pitch, bounding box, and polygons in file order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Layout {
    grid: GridPitch,
    bbox: Rect,
    polygons: Vec<Polygon>,
}

impl Layout {
    pub fn new(grid: GridPitch, bbox: Rect, polygons: Vec<Polygon>) -> Result<Self> {
        if bbox.x0 >= bbox.x1 || bbox.y0 >= bbox.y1 {
            return Err(LayoutError::BadBbox);
        }
        for (i, p) in polygons.iter().enumerate() {
            if !bbox.contains_rect(&p.bounds()) {
                return Err(LayoutError::OutsideBbox { polygon: i });
            }
        }
        Ok(Self {
            grid,
            bbox,
            polygons,
        })
    }

    pub fn grid(&self) -> GridPitch {
        self.grid
    }

    pub fn bbox(&self) -> Rect {
        self.bbox
    }

    pub fn polygons(&self) -> &[Polygon] {
        &self.polygons
    }

    pub fn total_area(&self) -> i64 {
        self.polygons.iter().map(Polygon::area).sum()
    }
}

fn syntax(line: usize, message: impl Into<String>) -> LayoutError {
    LayoutError::Syntax {
        line,
        message: message.into(),
    }
}

fn parse_ints(line: usize, toks: &[&str]) -> Result<Vec<i64>> {
    toks.iter()
        .map(|t| {
            t.parse::<i64>()
                .map_err(|_| syntax(line, format!("expected integer, found {t:?}")))
        })
        .collect()
}

/// Parses LAYOUTv1 text. Whitespace runs, blank lines and CRLF endings are
/// accepted; the result is in canonical form.
pub fn parse_layout(text: &str) -> Result<Layout> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split_whitespace().collect::<Vec<_>>()))
        .filter(|(_, toks)| !toks.is_empty());

    let (ln, toks) = lines.next().ok_or_else(|| syntax(1, "empty input"))?;
    if toks != [LAYOUT_MAGIC] {
        return Err(syntax(ln, "expected LAYOUTv1 header"));
    }
    let (ln, toks) = lines.next().ok_or_else(|| syntax(ln + 1, "missing grid_nm"))?;
    if toks.len() != 2 || toks[0] != "grid_nm" {
        return Err(syntax(ln, "expected `grid_nm <value>`"));
    }
    let grid = GridPitch::parse(toks[1]).map_err(|e| syntax(ln, e.to_string()))?;
    let (ln, toks) = lines.next().ok_or_else(|| syntax(ln + 1, "missing bbox"))?;
    if toks.len() != 5 || toks[0] != "bbox" {
        return Err(syntax(ln, "expected `bbox <x0> <y0> <x1> <y1>`"));
    }
    let b = parse_ints(ln, &toks[1..])?;
    let bbox = Rect::new(b[0], b[1], b[2], b[3]);
    if bbox.x0 >= bbox.x1 || bbox.y0 >= bbox.y1 {
        return Err(syntax(ln, "degenerate bounding box"));
    }

    let mut polygons = Vec::new();
    for (ln, toks) in lines {
        if toks[0] != "poly" || toks.len() < 2 {
            return Err(syntax(ln, format!("unexpected token {:?}", toks[0])));
        }
        let n: usize = toks[1]
            .parse()
            .map_err(|_| syntax(ln, "bad vertex count"))?;
        if toks.len() != 2 + 2 * n {
            return Err(syntax(
                ln,
                format!("declared {n} vertices, found {} coordinates", toks.len() - 2),
            ));
        }
        let c = parse_ints(ln, &toks[2..])?;
        let vs = c.chunks(2).map(|p| Point::new(p[0], p[1])).collect();
        let id = polygons.len();
        let poly = Polygon::validated(vs, id, false)?;
        if !bbox.contains_rect(&poly.bounds()) {
            return Err(LayoutError::OutsideBbox { polygon: id });
        }
        polygons.push(poly);
    }
    Layout::new(grid, bbox, polygons)
}

/// Canonical LAYOUTv1 text.
pub fn write_layout(layout: &Layout) -> String {
    use std::fmt::Write;
    let b = layout.bbox;
    let mut out = String::with_capacity(64 + layout.polygons.len() * 48);
    let _ = writeln!(out, "{LAYOUT_MAGIC}");
    let _ = writeln!(out, "grid_nm {}", layout.grid);
    let _ = writeln!(out, "bbox {} {} {} {}", b.x0, b.y0, b.x1, b.y1);
    for p in &layout.polygons {
        let _ = write!(out, "poly {}", p.len());
        for v in p.vertices() {
            let _ = write!(out, " {} {}", v.x, v.y);
        }
        out.push('\n');
    }
    out
}

/// One movable piece of a polygon edge.
#[derive(Debug, Clone, PartialEq)]
pub struct Fragment {
    pub polygon_id: usize,
    pub edge_id: usize,
    /// Position along the edge, counted in winding order.
    pub index: usize,
    pub a: Point,
    pub b: Point,
    pub normal: Normal,
    /// Accumulated movement along `normal`, in grid units.
    pub offset: f64,
}

impl Fragment {
    pub fn len(&self) -> i64 {
        (self.b.x - self.a.x).abs() + (self.b.y - self.a.y).abs()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Midpoint in doubled coordinates, exact on the integer grid.
    pub fn mid2(&self) -> (i64, i64) {
        (self.a.x + self.b.x, self.a.y + self.b.y)
    }

    pub fn midpoint(&self) -> (f64, f64) {
        let (x, y) = self.mid2();
        (x as f64 / 2.0, y as f64 / 2.0)
    }

    pub fn is_horizontal(&self) -> bool {
        self.a.y == self.b.y
    }

    /// Offset in quarter grid units, the resolution of the output grid.
    pub fn quantized(&self) -> i64 {
        (self.offset * 4.0).round() as i64
    }
}

/// The fragments of every edge of a layout, in (polygon, edge, index) order.
#[derive(Debug, Clone)]
pub struct FragmentSet {
    layout: Arc<Layout>,
    fragments: Vec<Fragment>,
    ranges: Vec<std::ops::Range<usize>>,
    max_frag_len: i64,
}

impl FragmentSet {
    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn fragments(&self) -> &[Fragment] {
        &self.fragments
    }

    pub fn fragments_mut(&mut self) -> &mut [Fragment] {
        &mut self.fragments
    }

    pub fn max_frag_len(&self) -> i64 {
        self.max_frag_len
    }

    pub fn len(&self) -> usize {
        self.fragments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fragments.is_empty()
    }

    /// Index range of the fragments belonging to polygon `id`.
    pub fn polygon_range(&self, id: usize) -> std::ops::Range<usize> {
        self.ranges[id].clone()
    }

    /// Sets every offset from quarter-grid values, in fragment order.
    pub fn set_quantized(&mut self, offsets: &[i64]) {
        for (f, q) in self.fragments.iter_mut().zip(offsets) {
            f.offset = *q as f64 / 4.0;
        }
    }

    pub fn quantized_offsets(&self) -> Vec<i64> {
        self.fragments.iter().map(Fragment::quantized).collect()
    }
}

/// Splits every edge into `ceil(L / max_frag_len)` near-equal fragments,
/// the first `L mod n` of which are one unit longer.
pub fn fragment(layout: &Layout, max_frag_len: i64) -> Result<FragmentSet> {
    fragment_shared(Arc::new(layout.clone()), max_frag_len)
}

pub fn fragment_shared(layout: Arc<Layout>, max_frag_len: i64) -> Result<FragmentSet> {
    if max_frag_len < 2 {
        return Err(LayoutError::FragmentLength(max_frag_len));
    }
    let mut fragments = Vec::new();
    let mut ranges = Vec::with_capacity(layout.polygons.len());
    for (pid, poly) in layout.polygons.iter().enumerate() {
        let start = fragments.len();
        for (eid, (a, b)) in poly.edges().enumerate() {
            let (dx, dy) = ((b.x - a.x).signum(), (b.y - a.y).signum());
            let len = (b.x - a.x).abs() + (b.y - a.y).abs();
            let n = (len + max_frag_len - 1) / max_frag_len;
            let (base, rem) = (len / n, len % n);
            let normal = Normal::of_edge(a, b);
            let mut cur = a;
            for k in 0..n {
                let l = base + i64::from(k < rem);
                let next = Point::new(cur.x + dx * l, cur.y + dy * l);
                fragments.push(Fragment {
                    polygon_id: pid,
                    edge_id: eid,
                    index: k as usize,
                    a: cur,
                    b: next,
                    normal,
                    offset: 0.0,
                });
                cur = next;
            }
        }
        ranges.push(start..fragments.len());
    }
    Ok(FragmentSet {
        layout,
        fragments,
        ranges,
        max_frag_len,
    })
}

/// Rebuilds one polygon ring (in x4 coordinates) from its moved fragments.
fn moved_ring(frags: &[Fragment]) -> Vec<Point> {
    let m = frags.len();
    // perpendicular coordinate of each moved fragment, x4 units
    let line: Vec<i64> = frags
        .iter()
        .map(|f| {
            let (nx, ny) = f.normal.vector();
            let q = f.quantized();
            if f.is_horizontal() {
                4 * f.a.y + q * ny
            } else {
                4 * f.a.x + q * nx
            }
        })
        .collect();
    let mut ring = Vec::with_capacity(2 * m);
    for i in 0..m {
        let j = (i + 1) % m;
        let (f, g) = (&frags[i], &frags[j]);
        if f.edge_id == g.edge_id {
            if line[i] != line[j] {
                let s = f.b;
                if f.is_horizontal() {
                    ring.push(Point::new(4 * s.x, line[i]));
                    ring.push(Point::new(4 * s.x, line[j]));
                } else {
                    ring.push(Point::new(line[i], 4 * s.y));
                    ring.push(Point::new(line[j], 4 * s.y));
                }
            }
        } else if f.is_horizontal() {
            ring.push(Point::new(line[j], line[i]));
        } else {
            ring.push(Point::new(line[i], line[j]));
        }
    }
    ring
}

/// Drops repeated vertices and straight-through vertices. Returns `None` when
/// the ring doubles back on itself.
fn simplify_ring(mut ring: Vec<Point>) -> Option<Vec<Point>> {
    loop {
        let n = ring.len();
        if n < 3 {
            return Some(ring);
        }
        let mut changed = false;
        let mut out: Vec<Point> = Vec::with_capacity(n);
        for &p in &ring {
            if out.last() == Some(&p) {
                changed = true;
                continue;
            }
            out.push(p);
        }
        while out.len() > 1 && out.first() == out.last() {
            out.pop();
            changed = true;
        }
        let n = out.len();
        let mut keep = vec![true; n];
        for i in 0..n {
            let (a, b, c) = (out[(i + n - 1) % n], out[i], out[(i + 1) % n]);
            let collinear = (a.x == b.x && b.x == c.x) || (a.y == b.y && b.y == c.y);
            if collinear {
                let forward = (b.x - a.x).signum() == (c.x - b.x).signum()
                    && (b.y - a.y).signum() == (c.y - b.y).signum();
                if !forward {
                    return None;
                }
                keep[i] = false;
                changed = true;
                break;
            }
        }
        ring = out
            .into_iter()
            .zip(keep)
            .filter_map(|(p, k)| k.then_some(p))
            .collect();
        if !changed {
            return Some(ring);
        }
    }
}

/// Error from [`apply_offsets`]: the moved outline of a polygon is not simple.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("polygon {polygon_id} self-intersects after edge movement")]
pub struct MoveError {
    pub polygon_id: usize,
}

/// Moves every fragment along its normal by its quantized offset and joins
/// the pieces with rectilinear jogs. The result lives on the x4 sub-grid.
pub fn apply_offsets(fs: &FragmentSet) -> Result<Layout, MoveError> {
    let src = &fs.layout;
    let mut polygons = Vec::with_capacity(src.polygons.len());
    let mut bbox = src.bbox.scale(4);
    for pid in 0..src.polygons.len() {
        let frags = &fs.fragments[fs.ranges[pid].clone()];
        let ring = simplify_ring(moved_ring(frags)).ok_or(MoveError { polygon_id: pid })?;
        let poly = Polygon::new_ccw(ring, pid).map_err(|_| MoveError { polygon_id: pid })?;
        bbox = bbox.union(&poly.bounds());
        polygons.push(poly);
    }
    Ok(Layout {
        grid: src.grid.quarter(),
        bbox,
        polygons,
    })
}

/// Parameters of the random layout generator.
///
/// Every shape dimension and position offset is a multiple of `snap`, and
/// each edge of an L or T is at least half the minimum size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenParams {
    pub seed: u64,
    pub n_polys: usize,
    pub bbox: Rect,
    pub size_min: i64,
    pub size_max: i64,
    pub min_spacing: i64,
    pub snap: i64,
}

impl GenParams {
    /// The regression corpus shape: 200 polygons on a 10000 x 10000 field,
    /// drawn on a 20 unit pitch.
    pub fn regression(seed: u64) -> Self {
        Self {
            seed,
            n_polys: 200,
            bbox: Rect::new(0, 0, 10000, 10000),
            size_min: 160,
            size_max: 400,
            min_spacing: 120,
            snap: 20,
        }
    }
}

const PLACEMENT_TRIES: usize = 2000;

/// Shape as a union of rectangles (for spacing checks) plus its outline.
/// Works in units of `snap` and scales at the end.
fn random_shape(rng: &mut ChaCha8Rng, p: &GenParams) -> (Vec<Rect>, Vec<Point>) {
    let u = p.snap;
    let (smin, smax) = ((p.size_min + u - 1) / u, p.size_max / u);
    let w = rng.gen_range(smin..=smax);
    let h = rng.gen_range(smin..=smax);
    let x = rng.gen_range(0..=p.bbox.width() / u - w);
    let y = rng.gen_range(0..=p.bbox.height() / u - h);
    let lo = (smin / 2).max(1);
    let arm = |rng: &mut ChaCha8Rng, span: i64| rng.gen_range(lo..=span - lo);
    let mut kind = rng.gen_range(0..4u8);
    if kind == 3 && w < 3 * lo {
        kind = 2;
    }
    // local (u, v) in [0, w] x [0, h], outline plus covering rectangles
    type Outline = Vec<(i64, i64)>;
    let (outline, rects): (Outline, Vec<(i64, i64, i64, i64)>) = match kind {
        0 | 1 => (vec![(0, 0), (w, 0), (w, h), (0, h)], vec![(0, 0, w, h)]),
        2 => {
            // L: foot of height t, stem of width s
            let t = arm(rng, h);
            let s = arm(rng, w);
            (
                vec![(0, 0), (w, 0), (w, t), (s, t), (s, h), (0, h)],
                vec![(0, 0, w, t), (0, 0, s, h)],
            )
        }
        _ => {
            // T: bar of height t along the top, centred stem
            let t = arm(rng, h);
            let k = rng.gen_range(lo..=(w - lo) / 2);
            let top = h - t;
            (
                vec![
                    (k, 0),
                    (w - k, 0),
                    (w - k, top),
                    (w, top),
                    (w, h),
                    (0, h),
                    (0, top),
                    (k, top),
                ],
                vec![(0, top, w, h), (k, 0, w - k, h)],
            )
        }
    };
    // mirror into one of four orientations
    let flip_x = kind == 2 && rng.gen_bool(0.5);
    let flip_y = kind >= 2 && rng.gen_bool(0.5);
    let map = |a: i64, b: i64| {
        let a = if flip_x { w - a } else { a };
        let b = if flip_y { h - b } else { b };
        Point::new(p.bbox.x0 + (x + a) * u, p.bbox.y0 + (y + b) * u)
    };
    let pts = outline.iter().map(|&(a, b)| map(a, b)).collect();
    let rs = rects
        .iter()
        .map(|&(a0, b0, a1, b1)| {
            let (c, d) = (map(a0, b0), map(a1, b1));
            Rect::new(c.x.min(d.x), c.y.min(d.y), c.x.max(d.x), c.y.max(d.y))
        })
        .collect();
    (rs, pts)
}

/// Deterministic random layout of rectangles, L- and T-shapes with pairwise
/// rectilinear spacing of at least `min_spacing`.
pub fn gen_random(p: &GenParams) -> Result<Layout> {
    if p.n_polys == 0 && p.bbox.is_empty() {
        return Err(LayoutError::BadBbox);
    }
    if p.snap < 1 {
        return Err(LayoutError::Generator("snap must be >= 1".into()));
    }
    let (smin, smax) = ((p.size_min + p.snap - 1) / p.snap, p.size_max / p.snap);
    if smin < 2 || smax < smin {
        return Err(LayoutError::Generator(format!(
            "size range {}..{} holds no two-pitch size at snap {}",
            p.size_min, p.size_max, p.snap
        )));
    }
    if p.min_spacing < 1 {
        return Err(LayoutError::Generator("min_spacing must be >= 1".into()));
    }
    if p.bbox.width() < p.size_max || p.bbox.height() < p.size_max {
        return Err(LayoutError::Generator(
            "bounding box smaller than the largest shape".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut placed: Vec<Vec<Rect>> = Vec::with_capacity(p.n_polys);
    let mut polygons = Vec::with_capacity(p.n_polys);
    while polygons.len() < p.n_polys {
        let mut ok = false;
        for _ in 0..PLACEMENT_TRIES {
            let (rects, outline) = random_shape(&mut rng, p);
            let clear = placed.iter().flatten().all(|other| {
                rects.iter().all(|r| r.gap(other) >= p.min_spacing)
            });
            if clear {
                polygons.push(Polygon::new(outline)?);
                placed.push(rects);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(LayoutError::PlacementExhausted {
                placed: polygons.len(),
                requested: p.n_polys,
                tries: PLACEMENT_TRIES,
            });
        }
    }
    Layout::new(GridPitch::from_nm(1)?, p.bbox, polygons)
}
