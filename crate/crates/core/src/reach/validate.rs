//! Sign agreement between a fitted value function and the grid oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grid::ValueGrid;
use crate::value::{lift, ValueSource};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub samples: usize,
    /// Draws rejected for lying inside the `|V_oracle| < band` shell.
    pub excluded: usize,
    pub agreement: f64,
    /// Oracle-unsafe samples and the fraction the fit also marks unsafe.
    pub positives: usize,
    pub positive_recall: f64,
    pub band: f64,
}

/// Draw `n` reduced states uniformly over the grid box, skipping those with
/// `|V_oracle| < band`, and compare signs.
pub fn sign_agreement(grid: &ValueGrid, fit: &dyn ValueSource, n: usize, band: f64, seed: u64) -> AgreementReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sp = &grid.spec;
    let (mut kept, mut excluded, mut agree, mut pos, mut pos_agree) = (0, 0, 0, 0, 0);
    // Bound the rejection loop in case the band swallows the whole box.
    let max_draws = n.saturating_mul(1000).max(1000);
    while kept < n && kept + excluded < max_draws {
        let s = [
            rng.random_range(sp.x.min..=sp.x.max()),
            rng.random_range(sp.y.min..=sp.y.max()),
            rng.random_range(sp.phi.min..=sp.phi.max()),
            rng.random_range(sp.v.min..=sp.v.max()),
        ];
        let vo = grid.value(&s);
        if vo.abs() < band {
            excluded += 1;
            continue;
        }
        kept += 1;
        let unsafe_fit = fit.v(&lift(&s)) > 0.0;
        if (vo > 0.0) == unsafe_fit {
            agree += 1;
        }
        if vo > 0.0 {
            pos += 1;
            pos_agree += unsafe_fit as usize;
        }
    }
    AgreementReport {
        samples: kept,
        excluded,
        agreement: if kept > 0 { agree as f64 / kept as f64 } else { 0.0 },
        positives: pos,
        positive_recall: if pos > 0 { pos_agree as f64 / pos as f64 } else { 0.0 },
        band,
    }
}
