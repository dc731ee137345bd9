//! Query-target matching: alignment loss, pair costs, Hungarian assignment
//! over co-located pseudo-targets, and the total training loss.

use crate::boxes::{giou_with_grad, BoxXYWH};
use crate::error::{Error, Result};
use crate::model::QueryOutput;
use crate::text::SoftTokenMap;

/// Cost weights balancing box regression against token alignment.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub beta_box: f64,
    pub beta_attr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { beta_box: 2.0, beta_attr: 1.0 }
    }
}

/// One ground-truth box duplicated over the four attribute token maps.
/// Empty maps must have been replaced by the public-context fallback upstream.
#[derive(Debug, Clone)]
pub struct PseudoTargetSet {
    pub gt_box: BoxXYWH,
    pub token_maps: [SoftTokenMap; 4],
}

/// Query-by-target cost table.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub queries: usize,
    pub targets: usize,
    /// Query-major storage: entry `(n, i)` at `n * targets + i`.
    values: Vec<f64>,
    pub weights: LossWeights,
}

impl CostMatrix {
    pub fn new(queries: usize, targets: usize, values: Vec<f64>, weights: LossWeights) -> Result<Self> {
        if values.len() != queries * targets {
            return Err(Error::InvalidArgument("cost matrix size mismatch".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure("cost matrix has non-finite entries".into()));
        }
        Ok(CostMatrix { queries, targets, values, weights })
    }

    pub fn get(&self, query: usize, target: usize) -> f64 {
        self.values[query * self.targets + target]
    }
}

/// An injective map from targets to queries, minimizing total cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `pairs[i]` is the query assigned to target `i`.
    pub pairs: Vec<usize>,
    pub total_cost: f64,
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// `log(sum(exp(logits)))` with max-shift stabilization.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy of a soft token map against token logits:
/// `-sum_j target_j * log(softmax(logits)_j)`.
pub fn attr_alignment_loss(logits: &[f64], target: &SoftTokenMap) -> Result<f64> {
    if logits.len() != target.probs.len() {
        return Err(Error::InvalidArgument(format!(
            "logit length {} differs from target length {}",
            logits.len(),
            target.probs.len()
        )));
    }
    let mass: f64 = target.probs.iter().sum();
    if mass == 0.0 {
        return Err(Error::InvalidTarget(
            "target map is all-zero; the public-context fallback should have replaced it".into(),
        ));
    }
    let lse = log_sum_exp(logits);
    let mut loss = 0.0;
    for (l, t) in logits.iter().zip(&target.probs) {
        if *t > 0.0 {
            loss += t * (lse - l);
        }
    }
    Ok(loss)
}

/// Gradient of [`attr_alignment_loss`] w.r.t. the logits:
/// `softmax(logits) * sum(target) - target`.
pub fn attr_alignment_grad(logits: &[f64], target: &SoftTokenMap) -> Vec<f64> {
    let probs = softmax(logits);
    let mass: f64 = target.probs.iter().sum();
    probs
        .iter()
        .zip(&target.probs)
        .map(|(&p, &t)| p * mass - t)
        .collect()
}

/// Eq.-style pair cost: `beta_box * (L1 + (1 - GIoU)) + beta_attr * alignment`.
pub fn pair_cost(
    query_box: &BoxXYWH,
    query_logits: &[f64],
    target_box: &BoxXYWH,
    target_map: &SoftTokenMap,
    weights: &LossWeights,
) -> Result<f64> {
    let l1 = (query_box.cx - target_box.cx).abs()
        + (query_box.cy - target_box.cy).abs()
        + (query_box.w - target_box.w).abs()
        + (query_box.h - target_box.h).abs();
    let g = crate::boxes::giou(query_box, target_box);
    let attr = attr_alignment_loss(query_logits, target_map)?;
    Ok(weights.beta_box * (l1 + (1.0 - g)) + weights.beta_attr * attr)
}

/// Per-term breakdown of one assigned pair.
#[derive(Debug, Clone, Copy)]
pub struct PairTerms {
    pub l1: f64,
    pub giou_term: f64,
    pub attr: f64,
}

/// Pair cost together with its gradient w.r.t. the query box and logits.
pub fn pair_cost_with_grad(
    query_box: &BoxXYWH,
    query_logits: &[f64],
    target_box: &BoxXYWH,
    target_map: &SoftTokenMap,
    weights: &LossWeights,
) -> Result<(f64, PairTerms, [f64; 4], Vec<f64>)> {
    let diffs = [
        query_box.cx - target_box.cx,
        query_box.cy - target_box.cy,
        query_box.w - target_box.w,
        query_box.h - target_box.h,
    ];
    let l1: f64 = diffs.iter().map(|d| d.abs()).sum();
    let (g, g_grad) = giou_with_grad(query_box, target_box);
    let attr = attr_alignment_loss(query_logits, target_map)?;
    let cost = weights.beta_box * (l1 + (1.0 - g)) + weights.beta_attr * attr;
    let terms = PairTerms { l1, giou_term: 1.0 - g, attr };

    let mut box_grad = [0.0; 4];
    for k in 0..4 {
        let sign = if diffs[k] > 0.0 {
            1.0
        } else if diffs[k] < 0.0 {
            -1.0
        } else {
            0.0
        };
        box_grad[k] = weights.beta_box * (sign - g_grad[k]);
    }
    let logit_grad: Vec<f64> = attr_alignment_grad(query_logits, target_map)
        .into_iter()
        .map(|g| weights.beta_attr * g)
        .collect();
    Ok((cost, terms, box_grad, logit_grad))
}

/// Minimum-cost assignment of `rows` (targets) to distinct columns (queries)
/// by the Hungarian algorithm with potentials. Requires `rows <= cols`.
/// Returns, per row, the assigned column.
fn hungarian_core(cost: &dyn Fn(usize, usize) -> f64, rows: usize, cols: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1]; // 1-based row matched to column j; 0 = free
    let mut way = vec![0usize; cols + 1];

    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; rows];
    for j in 1..=cols {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Ordered total of an assignment, summed by target index.
fn assignment_cost(costs: &CostMatrix, pairs: &[usize]) -> f64 {
    pairs.iter().enumerate().map(|(i, &n)| costs.get(n, i)).sum()
}

/// Optimal cost of assigning targets `first_target..targets` to queries
/// outside `used`, or `None` when too few queries remain.
fn remainder_cost(costs: &CostMatrix, first_target: usize, used: &[bool]) -> Option<f64> {
    let rows = costs.targets - first_target;
    let free: Vec<usize> = (0..costs.queries).filter(|&q| !used[q]).collect();
    if free.len() < rows {
        return None;
    }
    if rows == 0 {
        return Some(0.0);
    }
    let lookup = |i: usize, j: usize| costs.get(free[j], first_target + i);
    let sub = hungarian_core(&lookup, rows, free.len());
    Some(
        sub.iter()
            .enumerate()
            .map(|(i, &j)| costs.get(free[j], first_target + i))
            .sum(),
    )
}

/// Minimum-cost injective target-to-query assignment.
///
/// Among cost-minimizing assignments, the lexicographically smallest
/// `(target index, query index)` sequence is returned, so tie-breaking is
/// deterministic.
pub fn hungarian_assign(costs: &CostMatrix) -> Result<Assignment> {
    if costs.targets == 0 {
        return Err(Error::InvalidConfiguration("no targets to assign".into()));
    }
    if costs.queries < costs.targets {
        return Err(Error::InvalidConfiguration(format!(
            "{} queries cannot cover {} targets",
            costs.queries, costs.targets
        )));
    }
    let lookup = |i: usize, j: usize| costs.get(j, i);
    let base = hungarian_core(&lookup, costs.targets, costs.queries);
    let optimum = assignment_cost(costs, &base);

    // Canonicalize: greedily fix the smallest query per target that still
    // reaches the optimum.
    let mut pairs = Vec::with_capacity(costs.targets);
    let mut used = vec![false; costs.queries];
    let mut prefix = 0.0;
    for i in 0..costs.targets {
        let mut chosen = None;
        for q in 0..costs.queries {
            if used[q] {
                continue;
            }
            used[q] = true;
            let candidate = prefix + costs.get(q, i);
            if let Some(rest) = remainder_cost(costs, i + 1, &used) {
                if candidate + rest == optimum {
                    chosen = Some(q);
                    used[q] = false;
                    break;
                }
            }
            used[q] = false;
        }
        // Fall back to the base solution's query if float round-off hid the tie.
        let q = chosen.unwrap_or(base[i]);
        used[q] = true;
        prefix += costs.get(q, i);
        pairs.push(q);
    }
    let total_cost = assignment_cost(costs, &pairs);
    Ok(Assignment { pairs, total_cost })
}

/// Total loss with per-pair breakdown and the (fixed) assignment used.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1: f64,
    pub giou_term: f64,
    pub attr: f64,
    pub assignment: Assignment,
}

/// Build the cost matrix between every query and the token maps, choose the
/// minimum-cost assignment, and sum the assigned pair costs.
pub fn total_loss(
    output: &QueryOutput,
    targets: &PseudoTargetSet,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let maps: Vec<&SoftTokenMap> = targets.token_maps.iter().collect();
    total_loss_general(output, &targets.gt_box, &maps, weights)
}

/// As [`total_loss`] but over an arbitrary number of co-located pseudo-targets.
pub fn total_loss_general(
    output: &QueryOutput,
    gt_box: &BoxXYWH,
    maps: &[&SoftTokenMap],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let costs = build_cost_matrix(output, gt_box, maps, weights)?;
    let assignment = hungarian_assign(&costs)?;
    loss_for_assignment(output, gt_box, maps, weights, assignment)
}

/// Cost matrix of [`pair_cost`] values for every `(query, target)` pair.
pub fn build_cost_matrix(
    output: &QueryOutput,
    gt_box: &BoxXYWH,
    maps: &[&SoftTokenMap],
    weights: &LossWeights,
) -> Result<CostMatrix> {
    let q = output.boxes.len();
    let mut values = Vec::with_capacity(q * maps.len());
    for n in 0..q {
        for map in maps {
            values.push(pair_cost(&output.boxes[n], &output.token_logits[n], gt_box, map, weights)?);
        }
    }
    CostMatrix::new(q, maps.len(), values, *weights)
}

/// Total loss under a fixed assignment; this is the differentiable view used
/// by backpropagation and finite differences.
pub fn loss_for_assignment(
    output: &QueryOutput,
    gt_box: &BoxXYWH,
    maps: &[&SoftTokenMap],
    weights: &LossWeights,
    assignment: Assignment,
) -> Result<LossBreakdown> {
    let mut breakdown =
        LossBreakdown { total: 0.0, l1: 0.0, giou_term: 0.0, attr: 0.0, assignment };
    for (i, &n) in breakdown.assignment.pairs.clone().iter().enumerate() {
        let (cost, terms, _, _) = pair_cost_with_grad(
            &output.boxes[n],
            &output.token_logits[n],
            gt_box,
            maps[i],
            weights,
        )?;
        breakdown.total += cost;
        breakdown.l1 += terms.l1;
        breakdown.giou_term += terms.giou_term;
        breakdown.attr += terms.attr;
    }
    if !breakdown.total.is_finite() {
        return Err(Error::NumericalFailure("total loss is not finite".into()));
    }
    Ok(breakdown)
}
