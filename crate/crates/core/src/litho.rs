// SPDX-License-Identifier: Apache-2.0

//! Aerial-image forward model.
//!
//! Mask geometry is decomposed into interior-disjoint rectangles and blurred
//! with an isotropic Gaussian point-spread function. The blur of a rectangle
//! has a closed form as a product of error-function differences, so the
//! intensity at a point is a finite sum over the rectangles within the cull
//! radius. Culling is by nearest distance and summation follows the canonical
//! rectangle order, which makes intensity a deterministic function of the
//! local geometry alone.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::layout::{Fragment, Layout, Polygon, Rect};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("sigma must be positive and finite, got {0}")]
    Sigma(f64),
    #[error("threshold must lie in (0, 1), got {0}")]
    Threshold(f64),
    #[error("cull radius {cull} is below 6 sigma ({min})")]
    Cull { cull: f64, min: f64 },
    #[error("search radius {search} exceeds half the cull radius ({max})")]
    Search { search: f64, max: f64 },
}

/// Gaussian imaging model. All lengths are in grid units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpticalModel {
    sigma: f64,
    threshold: f64,
    cull_radius: f64,
    search_radius: f64,
}

impl Default for OpticalModel {
    fn default() -> Self {
        Self::with_sigma(20.0, 0.5).expect("default model is valid")
    }
}

impl OpticalModel {
    // negated comparisons so NaN is rejected
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn new(
        sigma: f64,
        threshold: f64,
        cull_radius: f64,
        search_radius: f64,
    ) -> Result<Self, ModelError> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(ModelError::Sigma(sigma));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(ModelError::Threshold(threshold));
        }
        if !(cull_radius >= 6.0 * sigma) {
            return Err(ModelError::Cull {
                cull: cull_radius,
                min: 6.0 * sigma,
            });
        }
        if !(search_radius > 0.0 && search_radius <= cull_radius / 2.0) {
            return Err(ModelError::Search {
                search: search_radius,
                max: cull_radius / 2.0,
            });
        }
        Ok(Self {
            sigma,
            threshold,
            cull_radius,
            search_radius,
        })
    }

    /// Default radii for a given blur: cull at 8 sigma, search at 4 sigma.
    pub fn with_sigma(sigma: f64, threshold: f64) -> Result<Self, ModelError> {
        Self::new(sigma, threshold, 8.0 * sigma, 4.0 * sigma)
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn cull_radius(&self) -> f64 {
        self.cull_radius
    }

    pub fn search_radius(&self) -> f64 {
        self.search_radius
    }
}

/// Interior-disjoint rectangles covering the union of a layout's polygons,
/// sorted lexicographically. `unit` converts coordinates to grid units
/// (0.25 for corrected layouts on the x4 sub-grid).
#[derive(Debug, Clone, PartialEq)]
pub struct RectDecomposition {
    rects: Vec<Rect>,
    unit: f64,
}

impl RectDecomposition {
    pub fn rects(&self) -> &[Rect] {
        &self.rects
    }

    pub fn unit(&self) -> f64 {
        self.unit
    }

    /// Total area in squared grid units.
    pub fn area(&self) -> f64 {
        let a: i64 = self.rects.iter().map(Rect::area).sum();
        a as f64 * self.unit * self.unit
    }
}

pub fn decompose(layout: &Layout) -> RectDecomposition {
    decompose_with_unit(layout, 1.0)
}

/// Vertical-slab decomposition of the union of `layout`'s polygons.
///
/// Polygons are grouped into clusters of touching bounding boxes; each
/// cluster is swept on its own x-breaks and equal y-intervals of adjacent
/// slabs are merged, so a rectangle depends only on its own cluster.
pub fn decompose_with_unit(layout: &Layout, unit: f64) -> RectDecomposition {
    let polys = layout.polygons();
    let mut rects = Vec::new();
    for cluster in clusters(polys) {
        sweep_cluster(&cluster.iter().map(|&i| &polys[i]).collect::<Vec<_>>(), &mut rects);
    }
    rects.sort_unstable();
    RectDecomposition { rects, unit }
}

fn clusters(polys: &[Polygon]) -> Vec<Vec<usize>> {
    let n = polys.len();
    let bounds: Vec<Rect> = polys.iter().map(Polygon::bounds).collect();
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
            if bounds[j].x0 > bounds[i].x1 {
                break;
            }
            if bounds[i].touches(&bounds[j]) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups.into_values().collect()
}

fn merge_intervals(mut iv: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    iv.sort_unstable();
    let mut out: Vec<(i64, i64)> = Vec::with_capacity(iv.len());
    for (a, b) in iv {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

fn sweep_cluster(polys: &[&Polygon], out: &mut Vec<Rect>) {
    let mut xs: Vec<i64> = polys
        .iter()
        .flat_map(|p| p.vertices().iter().map(|v| v.x))
        .collect();
    xs.sort_unstable();
    xs.dedup();
    // horizontal edges per polygon as (x_lo, x_hi, y)
    let hedges: Vec<Vec<(i64, i64, i64)>> = polys
        .iter()
        .map(|p| {
            p.edges()
                .filter(|(a, b)| a.y == b.y)
                .map(|(a, b)| (a.x.min(b.x), a.x.max(b.x), a.y))
                .collect()
        })
        .collect();
    let mut open: BTreeMap<(i64, i64), i64> = BTreeMap::new();
    for w in xs.windows(2) {
        let (xl, xr) = (w[0], w[1]);
        let mut iv = Vec::new();
        for edges in &hedges {
            let mut ys: Vec<i64> = edges
                .iter()
                .filter(|(lo, hi, _)| *lo <= xl && *hi >= xr)
                .map(|e| e.2)
                .collect();
            ys.sort_unstable();
            iv.extend(ys.chunks_exact(2).map(|c| (c[0], c[1])));
        }
        let mut next = BTreeMap::new();
        for key in merge_intervals(iv) {
            let x0 = open.remove(&key).unwrap_or(xl);
            next.insert(key, x0);
        }
        for ((y0, y1), x0) in std::mem::replace(&mut open, next) {
            out.push(Rect::new(x0, y0, xl, y1));
        }
    }
    if let Some(&xr) = xs.last() {
        for ((y0, y1), x0) in open {
            out.push(Rect::new(x0, y0, xr, y1));
        }
    }
}

/// Squared nearest distance from `(px, py)` to a rectangle in grid units.
#[inline]
fn dist2(r: &Rect, unit: f64, px: f64, py: f64) -> f64 {
    let dx = (r.x0 as f64 * unit - px).max(0.0).max(px - r.x1 as f64 * unit);
    let dy = (r.y0 as f64 * unit - py).max(0.0).max(py - r.y1 as f64 * unit);
    dx * dx + dy * dy
}

#[inline]
fn contribution(r: &Rect, unit: f64, px: f64, py: f64, k: f64) -> f64 {
    let ex = libm::erf((r.x1 as f64 * unit - px) * k) - libm::erf((r.x0 as f64 * unit - px) * k);
    let ey = libm::erf((r.y1 as f64 * unit - py) * k) - libm::erf((r.y0 as f64 * unit - py) * k);
    0.25 * ex * ey
}

fn erf_scale(model: &OpticalModel) -> f64 {
    1.0 / (model.sigma * std::f64::consts::SQRT_2)
}

/// Intensity at `(px, py)` by a linear scan over all rectangles.
pub fn intensity_at(rects: &RectDecomposition, px: f64, py: f64, model: &OpticalModel) -> f64 {
    let k = erf_scale(model);
    let c2 = model.cull_radius * model.cull_radius;
    let mut sum = 0.0;
    for r in &rects.rects {
        if dist2(r, rects.unit, px, py) <= c2 {
            sum += contribution(r, rects.unit, px, py, k);
        }
    }
    sum
}

/// A decomposition bound to a model, with a bucket index so that each
/// evaluation only visits nearby rectangles. Produces the same bits as
/// [`intensity_at`].
pub struct AerialImage<'a> {
    rects: &'a RectDecomposition,
    model: OpticalModel,
    k: f64,
    cull2: f64,
    origin: (f64, f64),
    cell: f64,
    dims: (usize, usize),
    buckets: Vec<Vec<u32>>,
}

impl<'a> AerialImage<'a> {
    pub fn new(rects: &'a RectDecomposition, model: &OpticalModel) -> Self {
        let unit = rects.unit;
        let cull = model.cull_radius;
        let cell = cull;
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for r in &rects.rects {
            x0 = x0.min(r.x0 as f64 * unit);
            y0 = y0.min(r.y0 as f64 * unit);
            x1 = x1.max(r.x1 as f64 * unit);
            y1 = y1.max(r.y1 as f64 * unit);
        }
        let (origin, dims) = if rects.rects.is_empty() {
            ((0.0, 0.0), (0, 0))
        } else {
            let origin = (x0 - cull, y0 - cull);
            let nx = ((x1 + cull - origin.0) / cell).floor() as usize + 1;
            let ny = ((y1 + cull - origin.1) / cell).floor() as usize + 1;
            (origin, (nx, ny))
        };
        let mut buckets = vec![Vec::new(); dims.0 * dims.1];
        for (i, r) in rects.rects.iter().enumerate() {
            let cx0 = ((r.x0 as f64 * unit - cull - origin.0) / cell).floor().max(0.0) as usize;
            let cy0 = ((r.y0 as f64 * unit - cull - origin.1) / cell).floor().max(0.0) as usize;
            let cx1 = (((r.x1 as f64 * unit + cull - origin.0) / cell).floor() as usize).min(dims.0 - 1);
            let cy1 = (((r.y1 as f64 * unit + cull - origin.1) / cell).floor() as usize).min(dims.1 - 1);
            for cy in cy0..=cy1 {
                for cx in cx0..=cx1 {
                    buckets[cy * dims.0 + cx].push(i as u32);
                }
            }
        }
        Self {
            rects,
            model: *model,
            k: erf_scale(model),
            cull2: cull * cull,
            origin,
            cell,
            dims,
            buckets,
        }
    }

    pub fn model(&self) -> &OpticalModel {
        &self.model
    }

    pub fn intensity(&self, px: f64, py: f64) -> f64 {
        let fx = ((px - self.origin.0) / self.cell).floor();
        let fy = ((py - self.origin.1) / self.cell).floor();
        if !(fx >= 0.0 && fy >= 0.0) || fx as usize >= self.dims.0 || fy as usize >= self.dims.1 {
            return 0.0;
        }
        let unit = self.rects.unit;
        let mut sum = 0.0;
        // bucket lists are in ascending rectangle order
        for &i in &self.buckets[fy as usize * self.dims.0 + fx as usize] {
            let r = &self.rects.rects[i as usize];
            if dist2(r, unit, px, py) <= self.cull2 {
                sum += contribution(r, unit, px, py, self.k);
            }
        }
        sum
    }
}

/// Signed edge placement error of one fragment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Epe {
    pub fragment_id: usize,
    /// Positive when the printed contour lies outside the target edge.
    pub value: f64,
    pub clamped: bool,
}

const SCAN_STEP: f64 = 0.5;
const BISECTIONS: u32 = 40;

/// Locates the printed contour along the outward normal through the target
/// midpoint of `frag`. Samples at half-unit steps outward from the midpoint
/// (nearest bracket wins, positive side first at equal distance), then
/// bisects a fixed number of times.
pub fn epe(fragment_id: usize, frag: &Fragment, field: &AerialImage<'_>) -> Epe {
    let model = field.model();
    let (mx, my) = frag.midpoint();
    let (nx, ny) = frag.normal.vector();
    let (nx, ny) = (nx as f64, ny as f64);
    let thr = model.threshold;
    let g = |t: f64| field.intensity(mx + t * nx, my + t * ny) - thr;
    let s = model.search_radius;

    let g0 = g(0.0);
    if g0 == 0.0 {
        return Epe {
            fragment_id,
            value: 0.0,
            clamped: false,
        };
    }
    let (mut tp, mut gp) = (0.0, g0);
    let (mut tn, mut gn) = (0.0, g0);
    let mut k = 1u32;
    while tp < s || tn > -s {
        let step = k as f64 * SCAN_STEP;
        if tp < s {
            let t = step.min(s);
            let gt = g(t);
            if let Some(v) = bracket(&g, tp, gp, t, gt) {
                return Epe {
                    fragment_id,
                    value: v,
                    clamped: false,
                };
            }
            (tp, gp) = (t, gt);
        }
        if tn > -s {
            let t = (-step).max(-s);
            let gt = g(t);
            if let Some(v) = bracket(&g, t, gt, tn, gn) {
                return Epe {
                    fragment_id,
                    value: v,
                    clamped: false,
                };
            }
            (tn, gn) = (t, gt);
        }
        k += 1;
    }
    Epe {
        fragment_id,
        value: if g0 > 0.0 { s } else { -s },
        clamped: true,
    }
}

/// Root of `g` in `[lo, hi]` if the endpoint signs differ.
fn bracket(g: &impl Fn(f64) -> f64, lo: f64, glo: f64, hi: f64, ghi: f64) -> Option<f64> {
    if ghi == 0.0 {
        return Some(hi);
    }
    if glo == 0.0 {
        return Some(lo);
    }
    if (glo > 0.0) == (ghi > 0.0) {
        return None;
    }
    let (mut lo, mut hi) = (lo, hi);
    let lo_positive = glo > 0.0;
    for _ in 0..BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let gm = g(mid);
        if (gm > 0.0) == lo_positive {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}
