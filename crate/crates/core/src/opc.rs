// SPDX-License-Identifier: Apache-2.0

//! Iterative edge-placement correction.
//!
//! Each iteration rebuilds the moved layout, images it, measures the EPE of
//! every fragment at its target midpoint, and applies a damped proportional
//! update. Fragments already within tolerance are left where they are, so a
//! region that has converged stays fixed for as long as its surroundings do.

use std::sync::Arc;

use thiserror::Error;

use crate::layout::{apply_offsets, fragment_shared, FragmentSet, Layout, LayoutError, MoveError};
use crate::litho::{decompose_with_unit, epe, AerialImage, Epe, OpticalModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpcError {
    #[error("invalid correction parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("polygon {polygon_id} still self-intersects after halving its offsets")]
    Unresolvable { polygon_id: usize },
    #[error("cost of an empty EPE list")]
    EmptyCost,
    #[error("correction state is already converged or at the iteration cap")]
    Finished,
}

/// Fragment length used when none is given. Shorter fragments put the
/// corner midpoints too close to the corner for the offset cap to reach.
pub const DEFAULT_FRAG_LEN: i64 = 40;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpcParams {
    pub max_iter: u32,
    pub epe_tol: f64,
    pub gain: f64,
    pub max_step: f64,
    pub max_total_offset: f64,
}

impl Default for OpcParams {
    fn default() -> Self {
        Self {
            max_iter: 20,
            epe_tol: 0.25,
            gain: 0.7,
            max_step: 2.0,
            max_total_offset: 8.0,
        }
    }
}

impl OpcParams {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), OpcError> {
        let bad = |m: &str| Err(OpcError::Params(m.to_string()));
        if !(self.epe_tol > 0.0) {
            return bad("epe_tol must be positive");
        }
        if !(self.gain > 0.0 && self.gain <= 1.0) {
            return bad("gain must lie in (0, 1]");
        }
        if !(self.max_step > 0.0 && self.max_total_offset > 0.0) {
            return bad("movement limits must be positive");
        }
        if self.max_step > self.max_total_offset {
            return bad("max_step exceeds max_total_offset");
        }
        if self.epe_tol >= self.max_step {
            return bad("epe_tol must be below max_step");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CorrectionState {
    pub iter: u32,
    pub fragments: FragmentSet,
    pub max_abs_epe: f64,
    pub converged: bool,
    pub clamp_count: usize,
}

impl CorrectionState {
    pub fn new(fragments: FragmentSet) -> Self {
        let converged = fragments.is_empty();
        Self {
            iter: 0,
            fragments,
            max_abs_epe: 0.0,
            converged,
            clamp_count: 0,
        }
    }
}

/// Largest absolute EPE.
pub fn cost(epes: &[Epe]) -> Result<f64, OpcError> {
    if epes.is_empty() {
        return Err(OpcError::EmptyCost);
    }
    Ok(epes.iter().fold(0.0, |m, e| f64::max(m, e.value.abs())))
}

/// Moved layout for the current offsets. A polygon that folds over is
/// retried once with its offsets halved (the halving sticks).
fn realize(fs: &mut FragmentSet) -> Result<Layout, OpcError> {
    match apply_offsets(fs) {
        Ok(l) => Ok(l),
        Err(MoveError { polygon_id }) => {
            log::debug!("polygon {polygon_id} folded; halving its offsets");
            let range = fs.polygon_range(polygon_id);
            for f in &mut fs.fragments_mut()[range] {
                f.offset *= 0.5;
            }
            apply_offsets(fs).map_err(|e| OpcError::Unresolvable {
                polygon_id: e.polygon_id,
            })
        }
    }
}

/// EPE of every fragment against the image of `moved`.
pub fn measure(fs: &FragmentSet, moved: &Layout, model: &OpticalModel) -> Vec<Epe> {
    let rects = decompose_with_unit(moved, 0.25);
    let image = AerialImage::new(&rects, model);
    fs.fragments()
        .iter()
        .enumerate()
        .map(|(i, f)| epe(i, f, &image))
        .collect()
}

/// One simulate-measure-move step.
pub fn opc_iterate(
    mut state: CorrectionState,
    model: &OpticalModel,
    params: &OpcParams,
) -> Result<CorrectionState, OpcError> {
    if state.converged || state.iter >= params.max_iter {
        return Err(OpcError::Finished);
    }
    let moved = realize(&mut state.fragments)?;
    let epes = measure(&state.fragments, &moved, model);
    state.iter += 1;
    state.max_abs_epe = cost(&epes)?;
    state.clamp_count = epes.iter().filter(|e| e.clamped).count();
    state.converged = state.max_abs_epe <= params.epe_tol;
    if state.converged {
        return Ok(state);
    }
    let limit = params.max_total_offset;
    for (f, e) in state.fragments.fragments_mut().iter_mut().zip(&epes) {
        if e.value.abs() <= params.epe_tol {
            continue;
        }
        let step = (-params.gain * e.value).clamp(-params.max_step, params.max_step);
        f.offset = (f.offset + step).clamp(-limit, limit);
    }
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionStats {
    pub iterations: u32,
    pub max_abs_epe: f64,
    pub clamp_count: u32,
    pub converged: bool,
}

/// Output of [`correct_tile`]: the corrected geometry (x4 sub-grid) and the
/// final per-fragment offsets in quarter grid units, in fragment order.
#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub layout: Layout,
    pub stats: CorrectionStats,
    pub offsets: Vec<i64>,
}

/// Fragments `target` and iterates until converged or the cap is reached.
pub fn correct_tile(
    target: &Layout,
    model: &OpticalModel,
    params: &OpcParams,
    frag_len: i64,
) -> Result<Correction, OpcError> {
    params.validate()?;
    let fs = fragment_shared(Arc::new(target.clone()), frag_len)?;
    let mut state = CorrectionState::new(fs);
    while !state.converged && state.iter < params.max_iter {
        state = opc_iterate(state, model, params)?;
    }
    let layout = realize(&mut state.fragments)?;
    let mut stats = CorrectionStats {
        iterations: state.iter,
        max_abs_epe: state.max_abs_epe,
        clamp_count: state.clamp_count as u32,
        converged: state.converged,
    };
    if !state.converged && !state.fragments.is_empty() {
        // offsets moved after the last measurement; report the final quality
        let epes = measure(&state.fragments, &layout, model);
        stats.max_abs_epe = cost(&epes)?;
        stats.clamp_count = epes.iter().filter(|e| e.clamped).count() as u32;
    }
    Ok(Correction {
        layout,
        stats,
        offsets: state.fragments.quantized_offsets(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{fragment, write_layout, GridPitch, Normal, Polygon, Rect};

    fn single(r: Rect) -> Layout {
        Layout::new(
            GridPitch::from_nm(1).unwrap(),
            r.expand(50),
            vec![Polygon::rect(r).unwrap()],
        )
        .unwrap()
    }

    fn e(v: f64) -> Epe {
        Epe {
            fragment_id: 0,
            value: v,
            clamped: false,
        }
    }

    #[test]
    fn cost_is_max_abs() {
        assert_eq!(cost(&[e(0.1), e(-0.3), e(0.2)]).unwrap(), 0.3);
        assert_eq!(cost(&[e(0.0), e(0.0)]).unwrap(), 0.0);
        assert_eq!(cost(&[e(-80.0)]).unwrap(), 80.0);
        assert_eq!(cost(&[]), Err(OpcError::EmptyCost));
    }

    #[test]
    fn params_validation() {
        assert!(OpcParams::default().validate().is_ok());
        let p = OpcParams {
            max_step: 9.0,
            ..OpcParams::default()
        };
        assert!(p.validate().is_err());
        let p = OpcParams {
            epe_tol: 2.0,
            ..OpcParams::default()
        };
        assert!(p.validate().is_err());
        let p = OpcParams {
            gain: 0.0,
            ..OpcParams::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn long_edge_converges_immediately() {
        // only the middle of the bottom edge matters here: run one iteration
        // on a very wide bar and look at the central fragments
        let l = single(Rect::new(0, 0, 2000, 400));
        let fs = fragment(&l, 40).unwrap();
        let state = CorrectionState::new(fs);
        let state = opc_iterate(state, &OpticalModel::default(), &OpcParams::default()).unwrap();
        let mid: Vec<_> = state
            .fragments
            .fragments()
            .iter()
            .filter(|f| f.normal == Normal::NegY && f.a.x >= 400 && f.b.x <= 1600)
            .collect();
        assert!(!mid.is_empty());
        assert!(mid.iter().all(|f| f.offset.abs() < 0.25));
    }

    #[test]
    fn negative_epe_moves_edge_outward() {
        let l = single(Rect::new(0, 0, 100, 100));
        let fs = fragment(&l, 30).unwrap();
        let state = opc_iterate(
            CorrectionState::new(fs),
            &OpticalModel::default(),
            &OpcParams::default(),
        )
        .unwrap();
        // corner fragment printed inside the target
        assert!(state.fragments.fragments()[0].offset > 0.0);
        assert_eq!(state.iter, 1);
    }

    #[test]
    fn square_converges_with_serifs() {
        let l = single(Rect::new(0, 0, 100, 100));
        let c = correct_tile(&l, &OpticalModel::default(), &OpcParams::default(), DEFAULT_FRAG_LEN)
            .unwrap();
        assert!(c.stats.converged, "{:?}", c.stats);
        assert!(c.stats.max_abs_epe <= 0.25);
        assert!(c.stats.iterations <= 20);
        let fs = fragment(&l, DEFAULT_FRAG_LEN).unwrap();
        for (f, q) in fs.fragments().iter().zip(&c.offsets) {
            if f.index == 0 || f.index == 2 {
                assert!(*q > 0, "corner fragment {f:?} offset {q}");
            }
        }
    }

    #[test]
    fn rectangle_converges_and_is_deterministic() {
        let l = single(Rect::new(0, 0, 100, 40));
        let m = OpticalModel::default();
        let p = OpcParams::default();
        let a = correct_tile(&l, &m, &p, DEFAULT_FRAG_LEN).unwrap();
        let b = correct_tile(&l, &m, &p, DEFAULT_FRAG_LEN).unwrap();
        assert!(a.stats.converged, "{:?}", a.stats);
        assert!(a.stats.max_abs_epe <= 0.25);
        assert_eq!(write_layout(&a.layout), write_layout(&b.layout));
    }

    #[test]
    fn empty_tile_is_vacuously_converged() {
        let l = Layout::new(GridPitch::from_nm(1).unwrap(), Rect::new(0, 0, 10, 10), vec![]).unwrap();
        let c = correct_tile(&l, &OpticalModel::default(), &OpcParams::default(), 30).unwrap();
        assert!(c.stats.converged);
        assert_eq!(c.stats.iterations, 0);
        assert!(c.layout.polygons().is_empty());
    }

    #[test]
    fn zero_iteration_cap_returns_input() {
        let l = single(Rect::new(0, 0, 100, 40));
        let p = OpcParams {
            max_iter: 0,
            ..OpcParams::default()
        };
        let c = correct_tile(&l, &OpticalModel::default(), &p, 30).unwrap();
        assert!(!c.stats.converged);
        assert_eq!(c.stats.iterations, 0);
        assert_eq!(c.layout.polygons()[0], l.polygons()[0].scaled(4));
    }
}
