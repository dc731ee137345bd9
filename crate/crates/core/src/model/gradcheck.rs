//! Finite-difference verification of the analytic gradients.

use super::{forward, ModelConfig, Params, TrainSample};
use crate::error::{Error, Result};
use crate::matching::{
    build_cost_matrix, hungarian_assign, loss_for_assignment, Assignment, LossWeights,
};
use crate::text::SoftTokenMap;

fn loss_at(
    params: &Params,
    config: &ModelConfig,
    sample: &TrainSample,
    weights: &LossWeights,
    assignment: &Assignment,
) -> Result<f64> {
    let trace = forward(params, config, &sample.features, &sample.masks, None)?;
    let maps: Vec<&SoftTokenMap> = sample.target_maps.iter().collect();
    let breakdown = loss_for_assignment(
        &trace.output,
        &sample.target_box,
        &maps,
        weights,
        assignment.clone(),
    )?;
    Ok(breakdown.total)
}

/// Compare the analytic gradient of the total loss against central finite
/// differences `(f(p + eps) - f(p - eps)) / (2 eps)` for every parameter,
/// with gate noise disabled and the query-target assignment held fixed.
/// Returns the maximum relative error
/// `|g_a - g_n| / max(|g_a|, |g_n|, 1e-8)`.
pub fn gradient_check(
    params: &Params,
    config: &ModelConfig,
    sample: &TrainSample,
    weights: &LossWeights,
    epsilon: f64,
) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside [1e-6, 1e-3]"
        )));
    }

    // Fix the assignment at the center point.
    let trace = forward(params, config, &sample.features, &sample.masks, None)?;
    let maps: Vec<&SoftTokenMap> = sample.target_maps.iter().collect();
    let costs = build_cost_matrix(&trace.output, &sample.target_box, &maps, weights)?;
    let assignment = hungarian_assign(&costs)?;

    let (result, _) = super::sample_gradients(
        params,
        config,
        sample,
        weights,
        None,
        Some(assignment.clone()),
    )?;
    if !result.breakdown.total.is_finite() {
        return Err(Error::NumericalFailure("loss is not finite".into()));
    }
    let analytic = result.grads.flatten();

    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    for (i, &g_a) in analytic.iter().enumerate() {
        work.perturb(i, epsilon);
        let plus = loss_at(&work, config, sample, weights, &assignment)?;
        work.perturb(i, -2.0 * epsilon);
        let minus = loss_at(&work, config, sample, weights, &assignment)?;
        work.perturb(i, epsilon);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "finite differences produced non-finite loss at parameter {i}"
            )));
        }
        let g_n = (plus - minus) / (2.0 * epsilon);
        let rel = (g_a - g_n).abs() / g_a.abs().max(g_n.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
