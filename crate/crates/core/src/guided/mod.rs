//! Decoders that consult a value model: value-guided beam search and
//! Monte-Carlo tree search with PUCT selection.

mod mcts;
mod vgbs;

pub use mcts::{mcts_decode, LeafEval, MctsParams};
pub use vgbs::{vgbs_decode, VgbsParams};

use crate::error::{Error, Result};

/// Grid of likelihood weights for value-guided beam search.
pub const ALPHA_GRID: [f64; 5] = [0.01, 0.25, 0.5, 0.75, 0.99];
/// Grid of PUCT exploration constants.
pub const C_PUCT_GRID: [f64; 3] = [0.25, 1.25, 3.0];

/// Evaluates every grid point and returns `(point, objective)` for the
/// best one. Ties go to the smaller point.
pub fn hyperparam_search(grid: &[f64], mut objective: impl FnMut(f64) -> Result<f64>) -> Result<(f64, f64)> {
    let mut points = grid.to_vec();
    points.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    for p in points {
        let score = objective(p)?;
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((p, score));
        }
    }
    best.ok_or_else(|| Error::InvalidParameter("empty hyperparameter grid".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_grid() {
        assert_eq!(hyperparam_search(&[0.5], |_| Ok(0.1)).unwrap(), (0.5, 0.1));
    }

    #[test]
    fn ties_go_to_smaller() {
        assert_eq!(hyperparam_search(&[3.0, 1.25], |_| Ok(0.7)).unwrap().0, 1.25);
        assert_eq!(
            hyperparam_search(&ALPHA_GRID, |a| Ok(if a > 0.3 { 1.0 } else { 0.0 }))
                .unwrap()
                .0,
            0.5
        );
    }

    #[test]
    fn empty_grid_is_an_error() {
        assert!(hyperparam_search(&[], |_| Ok(0.0)).is_err());
    }
}
