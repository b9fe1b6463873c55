//! Filtering, efficiency, hinge and ramp losses for one example.
//!
//! Survival is strict everywhere: an assignment survives iff its
//! max-marginal is `> τ`, so the efficiency loss counts strict survivors.

use crate::inference::{max_marginals, MaxMarginalTable};
use crate::lattice::SparseLattice;
use crate::model::{score_output_at_order, LinearModel, Output, SequenceInput};
use crate::threshold::{cutoff, mean_max, Cutoff, ThresholdParams};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub filter_loss: f64,
    pub efficiency_loss: f64,
    pub hinge: f64,
    pub ramp_filter: f64,
    pub ramp_efficiency: f64,
}

/// Margin `ℓⁱ` defaults to the example length.
pub fn default_margin(length: usize) -> f64 {
    length as f64
}

/// `r_γ(z)`: 1 below 0, linear down to 0 at `γ`, 0 above.
pub fn ramp(z: f64, gamma: f64) -> f64 {
    if z < 0.0 {
        1.0
    } else if z <= gamma {
        1.0 - z / gamma
    } else {
        0.0
    }
}

/// Truth score under the lattice's clique decomposition, or `None` if the
/// truth was pruned from the lattice.
pub fn truth_score(
    model: &LinearModel,
    input: &SequenceInput,
    truth: &Output,
    lattice: &SparseLattice,
) -> Result<Option<f64>> {
    if !lattice.contains_output(truth) {
        return Ok(None);
    }
    let s = score_output_at_order(
        model.weights(),
        model.templates(),
        model.dimension(),
        input,
        truth,
        lattice.order(),
    )?;
    Ok(Some(s))
}

/// `1[score(y) ≤ τ]`, with 1 when the truth is already absent and 0 when
/// the cutoff keeps everything.
pub fn filtering_loss_from(truth_score: Option<f64>, cut: Cutoff) -> f64 {
    match truth_score {
        None => 1.0,
        Some(_) if cut.degenerate => 0.0,
        Some(s) => f64::from(u8::from(s <= cut.tau)),
    }
}

pub fn filtering_loss(
    model: &LinearModel,
    input: &SequenceInput,
    truth: &Output,
    lattice: &SparseLattice,
    params: ThresholdParams,
) -> Result<f64> {
    let Some(score) = truth_score(model, input, truth, lattice)? else {
        return Ok(1.0);
    };
    let table = max_marginals(model, input, lattice)?;
    let cut = cutoff(table.global_max(), table.mean(), params.alpha());
    Ok(filtering_loss_from(Some(score), cut))
}

/// Fraction of assignments with max-marginal strictly above `tau`.
pub fn efficiency_loss(table: &MaxMarginalTable, tau: f64) -> f64 {
    if table.is_empty() {
        return 0.0;
    }
    table.all_values().iter().filter(|&&m| m > tau).count() as f64 / table.len() as f64
}

/// `max{0, ℓ + τ(x; θ, α) − θᵀf(x, y)}`.
pub fn hinge(
    model: &LinearModel,
    input: &SequenceInput,
    truth: &Output,
    lattice: &SparseLattice,
    params: ThresholdParams,
    margin: f64,
) -> Result<f64> {
    if margin.is_nan() || margin <= 0.0 {
        return Err(Error::Config(alloc::format!(
            "margin {margin} must be positive"
        )));
    }
    let table = max_marginals(model, input, lattice)?;
    let score = score_output_at_order(
        model.weights(),
        model.templates(),
        model.dimension(),
        input,
        truth,
        lattice.order(),
    )?;
    Ok(hinge_from(
        score,
        mean_max(table.global_max(), table.mean(), params.alpha()),
        margin,
    ))
}

pub fn hinge_from(truth_score: f64, tau: f64, margin: f64) -> f64 {
    (margin + tau - truth_score).max(0.0)
}

/// Margin-augmented filtering and efficiency losses.
pub fn ramp_losses(
    model: &LinearModel,
    input: &SequenceInput,
    truth: &Output,
    table: &MaxMarginalTable,
    params: ThresholdParams,
    gamma: f64,
) -> Result<(f64, f64)> {
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(Error::Config(alloc::format!(
            "gamma {gamma} must be positive"
        )));
    }
    if table.is_empty() {
        return Err(Error::Empty("max-marginal table".into()));
    }
    let tau = mean_max(table.global_max(), table.mean(), params.alpha());
    let score = score_output_at_order(
        model.weights(),
        model.templates(),
        model.dimension(),
        input,
        truth,
        table.order(),
    )?;
    let consistent = (0..table.num_anchors()).all(|j| {
        table
            .codes(j)
            .binary_search(&crate::lattice::encode(
                &truth.labels[j..j + table.order()],
                table.num_states(),
            ))
            .is_ok()
    });
    let ramp_filter = if consistent {
        ramp(score - tau, gamma)
    } else {
        1.0
    };
    let ramp_efficiency = table
        .all_values()
        .iter()
        .map(|&m| ramp(tau - m, gamma))
        .sum::<f64>()
        / table.len() as f64;
    Ok((ramp_filter, ramp_efficiency))
}

/// Every loss of one example at once.
pub fn loss_report(
    model: &LinearModel,
    input: &SequenceInput,
    truth: &Output,
    lattice: &SparseLattice,
    params: ThresholdParams,
    margin: f64,
    gamma: f64,
) -> Result<LossReport> {
    let table = max_marginals(model, input, lattice)?;
    let score = truth_score(model, input, truth, lattice)?;
    let cut = cutoff(table.global_max(), table.mean(), params.alpha());
    let (ramp_filter, ramp_efficiency) = ramp_losses(model, input, truth, &table, params, gamma)?;
    let raw_score = score_output_at_order(
        model.weights(),
        model.templates(),
        model.dimension(),
        input,
        truth,
        lattice.order(),
    )?;
    Ok(LossReport {
        filter_loss: filtering_loss_from(score, cut),
        efficiency_loss: if cut.degenerate {
            1.0
        } else {
            efficiency_loss(&table, cut.tau)
        },
        hinge: hinge_from(
            raw_score,
            mean_max(table.global_max(), table.mean(), params.alpha()),
            margin,
        ),
        ramp_filter,
        ramp_efficiency,
    })
}
