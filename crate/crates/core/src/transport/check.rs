//! Seeded comparison of IPOT against the exact solver.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{exact_ot, ipot_solve, uniform, CostMatrix, CostMetric, IpotConfig};
use crate::autograd::Mat;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IpotCheckReport {
    pub trials: usize,
    pub max_size: usize,
    pub seed: u64,
    /// Largest `(ipot - exact) / exact`; an absolute gap when the optimum is zero.
    pub max_rel_gap: f64,
    pub max_marginal_violation: f64,
}

/// `trials` cost matrices with sides drawn from `1..=max_size` and entries
/// uniform in `[0, 1)`, uniform marginals.
pub fn ipot_check(trials: usize, max_size: usize, seed: u64, cfg: &IpotConfig) -> Result<IpotCheckReport> {
    if trials == 0 {
        return Err(Error::invalid("trials", "must be positive"));
    }
    if max_size == 0 || max_size * max_size > super::EXACT_MAX_CELLS {
        return Err(Error::invalid(
            "max_size",
            format!("{max_size} is outside 1..=8 (the exact solver handles at most 64 cells)"),
        ));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = IpotCheckReport {
        trials,
        max_size,
        seed,
        max_rel_gap: 0.0,
        max_marginal_violation: 0.0,
    };
    for _ in 0..trials {
        let m = rng.random_range(1..=max_size);
        let r = rng.random_range(1..=max_size);
        let values = Mat::from_shape_simple_fn((m, r), || rng.random::<f64>());
        let c = CostMatrix::new(values, CostMetric::Cosine)?;
        let plan = ipot_solve(&c, cfg)?;
        let exact = exact_ot(&c, &uniform(m), &uniform(r))?.cost(&c);
        let gap = plan.cost(&c) - exact;
        let rel = if exact > 1e-12 { gap / exact } else { gap.abs() };
        report.max_rel_gap = report.max_rel_gap.max(rel);
        report.max_marginal_violation = report.max_marginal_violation.max(plan.marginal_violation());
    }
    Ok(report)
}
