//! Test-time late fusion: score every query against each attribute's soft
//! token map and select the best box.

use crate::boxes::BoxXYWH;
use crate::error::{Error, Result};
use crate::matching::softmax;
use crate::model::{GateWeights, QueryOutput};
use crate::text::{AttributeKind, SoftTokenMap};

/// Per-(query, attribute) dot-product scores.
#[derive(Debug, Clone)]
pub struct GroundScore {
    pub queries: usize,
    /// Query-major `queries x 4` table; inactive attribute slots hold 0.
    pub values: Vec<f64>,
    /// Attributes that actually carried a map.
    pub active: Vec<AttributeKind>,
}

impl GroundScore {
    pub fn get(&self, query: usize, attribute: AttributeKind) -> f64 {
        self.values[query * 4 + attribute.index()]
    }

    /// Highest-scoring attribute for one query, ties broken by attribute order.
    pub fn best_for_query(&self, query: usize) -> (AttributeKind, f64) {
        let mut best = (self.active[0], f64::NEG_INFINITY);
        for kind in &self.active {
            let v = self.get(query, *kind);
            if v > best.1 {
                best = (*kind, v);
            }
        }
        best
    }
}

/// The selected box with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingResult {
    pub bbox: BoxXYWH,
    pub query_index: usize,
    pub attribute: AttributeKind,
    pub score: f64,
    /// Gate weights of the forward pass, recorded for interpretability.
    pub gate_weights: [f64; 4],
    /// Set when every attribute map was empty and the public-context
    /// fallback was used for all slots.
    pub fallback_warning: bool,
}

/// Score every query against each attribute map:
/// `score(n, i) = <softmax(token_logits_n), map_i>`.
///
/// Maps must already carry the public-context fallback for empty attributes;
/// if every supplied map is still empty the sample carries no signal at all.
pub fn score_queries(
    output: &QueryOutput,
    maps: &[(AttributeKind, &SoftTokenMap)],
) -> Result<GroundScore> {
    if maps.is_empty() {
        return Err(Error::InvalidArgument("no attribute maps supplied".into()));
    }
    if maps.iter().all(|(_, m)| m.empty || m.probs.iter().all(|&p| p == 0.0)) {
        return Err(Error::NoSignal(
            "all attribute maps are empty even after the public-context fallback".into(),
        ));
    }
    let queries = output.boxes.len();
    let mut values = vec![0.0; queries * 4];
    let mut active = Vec::new();
    for (kind, _) in maps {
        active.push(*kind);
    }
    for n in 0..queries {
        let logits = &output.token_logits[n];
        for (_, map) in maps {
            if logits.len() != map.probs.len() {
                return Err(Error::InvalidArgument(format!(
                    "map length {} does not match {} token logits",
                    map.probs.len(),
                    logits.len()
                )));
            }
        }
        let probs = softmax(logits);
        for (kind, map) in maps {
            let score: f64 = probs.iter().zip(&map.probs).map(|(p, m)| p * m).sum();
            values[n * 4 + kind.index()] = score;
        }
    }
    Ok(GroundScore { queries, values, active })
}

/// Pick the box of the globally best (query, attribute) score. Ties break
/// toward the lower query index, then the lower attribute index.
pub fn select_box(table: &GroundScore, output: &QueryOutput) -> Result<GroundingResult> {
    if table.queries == 0 {
        return Err(Error::InvalidArgument("empty score table".into()));
    }
    let mut best_query = 0usize;
    let mut best_kind = table.active[0];
    let mut best_score = f64::NEG_INFINITY;
    for n in 0..table.queries {
        for kind in &table.active {
            let v = table.get(n, *kind);
            if v > best_score {
                best_score = v;
                best_query = n;
                best_kind = *kind;
            }
        }
    }
    Ok(GroundingResult {
        bbox: output.boxes[best_query],
        query_index: best_query,
        attribute: best_kind,
        score: best_score,
        gate_weights: [0.0; 4],
        fallback_warning: false,
    })
}

/// Score, select, and annotate with the recorded gate weights.
pub fn ground(
    output: &QueryOutput,
    maps: &[(AttributeKind, &SoftTokenMap)],
    gate: &GateWeights,
    fallback_used: bool,
) -> Result<GroundingResult> {
    let table = score_queries(output, maps)?;
    let mut result = select_box(&table, output)?;
    result.gate_weights = gate.lambda;
    result.fallback_warning = fallback_used;
    Ok(result)
}
