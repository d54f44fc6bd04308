//! Per-layer bit-width allocation.
//!
//! Maximizes `sum_i theta_i * b_i` subject to one linear budget
//! `sum_i cost_i * b_i <= limit` and box bounds on each `b_i`. With a single
//! constraint the continuous optimum is the fractional-knapsack greedy: raise
//! layers to `b_max` in order of `theta_i / cost_i` until the budget runs out,
//! leaving at most one layer at a fractional value.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

/// Bytes per megabyte in size budgets and reports.
pub const BYTES_PER_MB: f64 = 1024.0 * 1024.0;

/// Largest number of free layers [`brute_force_allocation`] accepts.
pub const BRUTE_FORCE_MAX_LAYERS: usize = 8;

/// Relative slack when comparing a cost against its limit.
const BUDGET_RTOL: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AllocError {
    #[error("importance overflow: exp({beta} * {alpha}) is not finite for layer {layer}; use a smaller beta")]
    Overflow { layer: usize, alpha: f64, beta: f64 },
    #[error("non-finite separability score for layer {layer}")]
    NonFiniteAlpha { layer: usize },
    #[error("invalid bit range {min}:{max}")]
    BitRange { min: u32, max: u32 },
    #[error("budget limit must be positive and finite, got {0}")]
    BudgetLimit(f64),
    #[error("layer `{0}`: param_count must be at least 1")]
    ZeroParams(String),
    #[error("{importance} importance values for {profiles} layer profiles")]
    LengthMismatch { importance: usize, profiles: usize },
    #[error("infeasible budget: limit {limit} is below the minimum achievable {minimum} {kind}")]
    Infeasible { kind: BudgetKind, limit: f64, minimum: f64 },
    #[error("brute force is limited to {max} free layers, got {got}")]
    TooManyLayers { got: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub layer_id: String,
    pub param_count: u64,
    pub mac_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pinned_bits: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector {
    pub theta: Vec<f64>,
    pub beta: f64,
    pub alpha: Vec<f64>,
}

/// `theta_i = exp(beta * alpha_i)`.
pub fn importance(alpha: &[f64], beta: f64) -> Result<ImportanceVector, AllocError> {
    let theta = alpha
        .iter()
        .enumerate()
        .map(|(layer, &a)| {
            if !a.is_finite() {
                return Err(AllocError::NonFiniteAlpha { layer });
            }
            let t = (beta * a).exp();
            if !t.is_finite() {
                return Err(AllocError::Overflow { layer, alpha: a, beta });
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ImportanceVector {
        theta,
        beta,
        alpha: alpha.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetKind {
    ModelSizeBytes,
    Bops,
}

impl std::fmt::Display for BudgetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BudgetKind::ModelSizeBytes => "bytes",
            BudgetKind::Bops => "BOPs",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub kind: BudgetKind,
    pub limit: f64,
    /// Enters the BOPs cost and the reported BOPs.
    pub activation_bits: u32,
}

impl Budget {
    pub fn size_bytes(limit: f64, activation_bits: u32) -> Self {
        Self {
            kind: BudgetKind::ModelSizeBytes,
            limit,
            activation_bits,
        }
    }

    pub fn size_mb(mb: f64, activation_bits: u32) -> Self {
        Self::size_bytes(mb * BYTES_PER_MB, activation_bits)
    }

    pub fn bops(limit: f64, activation_bits: u32) -> Self {
        Self {
            kind: BudgetKind::Bops,
            limit,
            activation_bits,
        }
    }

    /// Cost of one bit of `profile` under this budget.
    pub fn cost_per_bit(&self, profile: &LayerProfile) -> f64 {
        match self.kind {
            BudgetKind::ModelSizeBytes => profile.param_count as f64 / 8.0,
            BudgetKind::Bops => profile.mac_count as f64 * self.activation_bits as f64,
        }
    }

    pub fn cost(&self, bits: &[u32], profiles: &[LayerProfile]) -> f64 {
        match self.kind {
            BudgetKind::ModelSizeBytes => model_size(bits, profiles),
            BudgetKind::Bops => bops(bits, profiles, self.activation_bits),
        }
    }

    pub fn admits(&self, cost: f64) -> bool {
        cost <= self.limit * (1.0 + BUDGET_RTOL)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitRange {
    pub min: u32,
    pub max: u32,
}

impl BitRange {
    pub fn new(min: u32, max: u32) -> Result<Self, AllocError> {
        if min == 0 || min > max {
            return Err(AllocError::BitRange { min, max });
        }
        Ok(Self { min, max })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitConfig {
    pub bits: Vec<u32>,
    pub objective: f64,
    pub relaxed_objective: f64,
    pub size_bytes: f64,
    pub bops: f64,
    pub feasible: bool,
}

/// Total weight storage in bytes: `sum_i param_count_i * bits_i / 8`.
pub fn model_size(bits: &[u32], profiles: &[LayerProfile]) -> f64 {
    assert_eq!(bits.len(), profiles.len(), "bits/profile length");
    let total_bits: u128 = bits
        .iter()
        .zip(profiles)
        .map(|(&b, p)| p.param_count as u128 * b as u128)
        .sum();
    total_bits as f64 / 8.0
}

/// Bit operations: `sum_i mac_count_i * bits_i * activation_bits`.
pub fn bops(bits: &[u32], profiles: &[LayerProfile], activation_bits: u32) -> f64 {
    assert_eq!(bits.len(), profiles.len(), "bits/profile length");
    let total: u128 = bits
        .iter()
        .zip(profiles)
        .map(|(&b, p)| p.mac_count as u128 * b as u128)
        .sum();
    (total * activation_bits as u128) as f64
}

fn objective(theta: &[f64], bits: &[u32]) -> f64 {
    theta.iter().zip(bits).map(|(t, &b)| t * b as f64).sum()
}

fn validate(
    theta: &ImportanceVector,
    profiles: &[LayerProfile],
    budget: &Budget,
    range: BitRange,
) -> Result<(), AllocError> {
    BitRange::new(range.min, range.max)?;
    if !(budget.limit > 0.0 && budget.limit.is_finite()) {
        return Err(AllocError::BudgetLimit(budget.limit));
    }
    if theta.theta.len() != profiles.len() {
        return Err(AllocError::LengthMismatch {
            importance: theta.theta.len(),
            profiles: profiles.len(),
        });
    }
    if let Some(p) = profiles.iter().find(|p| p.param_count == 0) {
        return Err(AllocError::ZeroParams(p.layer_id.clone()));
    }
    Ok(())
}

/// Pinned bits where present, `b_min` elsewhere.
fn floor_config(profiles: &[LayerProfile], range: BitRange) -> Vec<u32> {
    profiles.iter().map(|p| p.pinned_bits.unwrap_or(range.min)).collect()
}

fn finish(
    bits: Vec<u32>,
    theta: &[f64],
    relaxed_objective: f64,
    profiles: &[LayerProfile],
    budget: &Budget,
) -> BitConfig {
    let size_bytes = model_size(&bits, profiles);
    let bops = bops(&bits, profiles, budget.activation_bits);
    let feasible = budget.admits(budget.cost(&bits, profiles));
    BitConfig {
        objective: objective(theta, &bits),
        relaxed_objective,
        size_bytes,
        bops,
        feasible,
        bits,
    }
}

/// Solves the continuous allocation exactly and floors the fractional pivot.
///
/// Pinned layers keep their bits and count against the budget. Free layers
/// start at `b_min` and are raised to `b_max` in decreasing `theta / cost`
/// order, lower layer index first on ties. Zero-cost layers (e.g. no MACs
/// under a BOPs budget) have unbounded density and always reach `b_max`.
pub fn solve_lp(
    theta: &ImportanceVector,
    profiles: &[LayerProfile],
    budget: &Budget,
    range: BitRange,
) -> Result<BitConfig, AllocError> {
    validate(theta, profiles, budget, range)?;
    let base = floor_config(profiles, range);
    let minimum = budget.cost(&base, profiles);
    if !budget.admits(minimum) {
        return Err(AllocError::Infeasible {
            kind: budget.kind,
            limit: budget.limit,
            minimum,
        });
    }

    let mut free: Vec<(usize, f64)> = profiles
        .iter()
        .enumerate()
        .filter(|(_, p)| p.pinned_bits.is_none())
        .map(|(i, p)| {
            let cpb = budget.cost_per_bit(p);
            let density = if cpb > 0.0 { theta.theta[i] / cpb } else { f64::INFINITY };
            (i, density)
        })
        .collect();
    free.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));

    let mut bits = base;
    let mut relaxed: Vec<f64> = bits.iter().map(|&b| b as f64).collect();
    let mut remaining = (budget.limit - minimum).max(0.0);
    let span = (range.max - range.min) as f64;
    for &(i, _) in &free {
        let cpb = budget.cost_per_bit(&profiles[i]);
        let room = span * cpb;
        if room <= remaining {
            remaining -= room;
            bits[i] = range.max;
            relaxed[i] = range.max as f64;
            continue;
        }
        // Pivot: the only fractional variable.
        let extra = remaining / cpb;
        relaxed[i] = range.min as f64 + extra;
        let mut whole = range.min + (extra.floor() as u32).min(range.max - range.min);
        bits[i] = whole;
        while whole > range.min && !budget.admits(budget.cost(&bits, profiles)) {
            whole -= 1;
            bits[i] = whole;
        }
        break;
    }

    let relaxed_objective = theta.theta.iter().zip(&relaxed).map(|(t, b)| t * b).sum();
    Ok(finish(bits, &theta.theta, relaxed_objective, profiles, budget))
}

/// Exhaustive integer search. Test oracle for [`solve_lp`].
///
/// Among configurations of equal objective, the lexicographically smallest
/// bits vector wins. `relaxed_objective` is set to the integer optimum.
pub fn brute_force_allocation(
    theta: &ImportanceVector,
    profiles: &[LayerProfile],
    budget: &Budget,
    range: BitRange,
) -> Result<BitConfig, AllocError> {
    validate(theta, profiles, budget, range)?;
    let free: Vec<usize> = (0..profiles.len())
        .filter(|&i| profiles[i].pinned_bits.is_none())
        .collect();
    if free.len() > BRUTE_FORCE_MAX_LAYERS {
        return Err(AllocError::TooManyLayers {
            got: free.len(),
            max: BRUTE_FORCE_MAX_LAYERS,
        });
    }
    let mut bits = floor_config(profiles, range);
    let minimum = budget.cost(&bits, profiles);
    if !budget.admits(minimum) {
        return Err(AllocError::Infeasible {
            kind: budget.kind,
            limit: budget.limit,
            minimum,
        });
    }

    let mut best: Option<(f64, Vec<u32>)> = None;
    loop {
        if budget.admits(budget.cost(&bits, profiles)) {
            let obj = objective(&theta.theta, &bits);
            let better = match &best {
                None => true,
                Some((b, v)) => obj > *b || (obj == *b && bits < *v),
            };
            if better {
                best = Some((obj, bits.clone()));
            }
        }
        // Odometer over the free layers, last free layer fastest.
        let mut k = free.len();
        loop {
            if k == 0 {
                let (obj, bits) = best.expect("minimum configuration is feasible");
                return Ok(finish(bits, &theta.theta, obj, profiles, budget));
            }
            k -= 1;
            let i = free[k];
            if bits[i] < range.max {
                bits[i] += 1;
                break;
            }
            bits[i] = range.min;
        }
    }
}

/// Feasible configuration with every free layer at `bits`, if any.
pub fn uniform_config(
    bits: u32,
    theta: &ImportanceVector,
    profiles: &[LayerProfile],
    budget: &Budget,
) -> BitConfig {
    let config: Vec<u32> = profiles.iter().map(|p| p.pinned_bits.unwrap_or(bits)).collect();
    let obj = objective(&theta.theta, &config);
    finish(config, &theta.theta, obj, profiles, budget)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(id: &str, params: u64, macs: u64) -> LayerProfile {
        LayerProfile {
            layer_id: id.into(),
            param_count: params,
            mac_count: macs,
            pinned_bits: None,
        }
    }

    fn two_layers() -> (ImportanceVector, Vec<LayerProfile>) {
        let theta = ImportanceVector {
            theta: vec![1.0, 2.0],
            beta: 1.0,
            alpha: vec![0.0, 2f64.ln()],
        };
        (theta, vec![layer("a", 1000, 0), layer("b", 1000, 0)])
    }

    #[test]
    fn importance_values() {
        let v = importance(&[0.3, -2.0], 0.0).unwrap();
        assert_eq!(v.theta, vec![1.0, 1.0]);
        let v = importance(&[0.5, 1.0], 2.0).unwrap();
        assert!((v.theta[0] - std::f64::consts::E).abs() < 1e-6);
        assert!((v.theta[1] - 7.389056).abs() < 1e-6);
        let v = importance(&[0.1, 0.2, 0.7], 3.0).unwrap();
        assert!(v.theta.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn importance_overflow() {
        let err = importance(&[1.0, 800.0], 1.0).unwrap_err();
        assert!(matches!(err, AllocError::Overflow { layer: 1, .. }));
        assert!(err.to_string().contains("smaller beta"));
        assert!(importance(&[f64::NAN], 1.0).is_err());
    }

    #[test]
    fn lp_two_layer_example() {
        let (theta, profiles) = two_layers();
        let range = BitRange::new(4, 8).unwrap();
        let budget = Budget::size_bytes(1500.0, 8);
        let c = solve_lp(&theta, &profiles, &budget, range).unwrap();
        assert_eq!(c.bits, vec![4, 8]);
        assert_eq!(c.objective, 20.0);
        assert_eq!(c.relaxed_objective, 20.0);
        assert_eq!(c.size_bytes, 1500.0);
        assert!(c.feasible);
        let b = brute_force_allocation(&theta, &profiles, &budget, range).unwrap();
        assert_eq!(b.bits, vec![4, 8]);
        assert_eq!(b.objective, 20.0);
    }

    #[test]
    fn lp_slack_budget() {
        let (theta, profiles) = two_layers();
        let c = solve_lp(&theta, &profiles, &Budget::size_bytes(1e9, 8), BitRange::new(4, 8).unwrap()).unwrap();
        assert_eq!(c.bits, vec![8, 8]);
    }

    #[test]
    fn lp_infeasible() {
        let (theta, profiles) = two_layers();
        let range = BitRange::new(4, 8).unwrap();
        let err = solve_lp(&theta, &profiles, &Budget::size_bytes(999.0, 8), range).unwrap_err();
        assert_eq!(
            err,
            AllocError::Infeasible {
                kind: BudgetKind::ModelSizeBytes,
                limit: 999.0,
                minimum: 1000.0
            }
        );
        assert!(brute_force_allocation(&theta, &profiles, &Budget::size_bytes(999.0, 8), range).is_err());
    }

    #[test]
    fn lp_fractional_pivot_is_floored() {
        let (theta, profiles) = two_layers();
        // 1000 base + 125 * 4 for layer b + 190 left -> layer a at 4 + 1.52.
        let c = solve_lp(&theta, &profiles, &Budget::size_bytes(1690.0, 8), BitRange::new(4, 8).unwrap()).unwrap();
        assert_eq!(c.bits, vec![5, 8]);
        assert!((c.relaxed_objective - (5.52 + 16.0)).abs() < 1e-12);
        assert_eq!(c.objective, 21.0);
    }

    #[test]
    fn ties_raise_lower_index_first() {
        let theta = importance(&[0.0, 0.0, 0.0], 1.0).unwrap();
        let profiles = vec![layer("a", 8, 0), layer("b", 8, 0), layer("c", 8, 0)];
        // base 3 * 2 bytes; 4 bytes of slack raises two layers fully.
        let c = solve_lp(&theta, &profiles, &Budget::size_bytes(10.0, 8), BitRange::new(2, 4).unwrap()).unwrap();
        assert_eq!(c.bits, vec![4, 4, 2]);
    }

    #[test]
    fn pinned_layers_are_fixed_and_charged() {
        let theta = importance(&[5.0, 0.0, 5.0], 1.0).unwrap();
        let mut profiles = vec![layer("first", 100, 0), layer("mid", 800, 0), layer("last", 100, 0)];
        profiles[0].pinned_bits = Some(8);
        profiles[2].pinned_bits = Some(8);
        let range = BitRange::new(2, 4).unwrap();
        // pinned cost 200 bytes, mid at 2 bits = 200 bytes.
        let c = solve_lp(&theta, &profiles, &Budget::size_bytes(500.0, 8), range).unwrap();
        assert_eq!(c.bits, vec![8, 3, 8]);
        let err = solve_lp(&theta, &profiles, &Budget::size_bytes(399.0, 8), range).unwrap_err();
        assert!(matches!(err, AllocError::Infeasible { .. }));
    }

    #[test]
    fn brute_force_single_free_layer() {
        let theta = importance(&[0.0], 1.0).unwrap();
        let profiles = vec![layer("only", 8, 0)];
        let c = brute_force_allocation(&theta, &profiles, &Budget::size_bytes(6.0, 8), BitRange::new(2, 8).unwrap())
            .unwrap();
        assert_eq!(c.bits, vec![6]);
    }

    #[test]
    fn brute_force_all_pinned() {
        let theta = importance(&[0.0, 0.0], 1.0).unwrap();
        let mut profiles = vec![layer("a", 8, 0), layer("b", 8, 0)];
        profiles.iter_mut().for_each(|p| p.pinned_bits = Some(8));
        let c = brute_force_allocation(&theta, &profiles, &Budget::size_bytes(16.0, 8), BitRange::new(2, 4).unwrap())
            .unwrap();
        assert_eq!(c.bits, vec![8, 8]);
        assert!(c.feasible);
    }

    #[test]
    fn brute_force_guard() {
        let theta = importance(&[0.0; 9], 1.0).unwrap();
        let profiles: Vec<_> = (0..9).map(|i| layer(&format!("l{i}"), 8, 0)).collect();
        let err = brute_force_allocation(&theta, &profiles, &Budget::size_bytes(1e6, 8), BitRange::new(2, 4).unwrap())
            .unwrap_err();
        assert_eq!(err, AllocError::TooManyLayers { got: 9, max: 8 });
    }

    #[test]
    fn bops_budget_uses_macs() {
        let theta = importance(&[0.0, 1.0], 1.0).unwrap();
        let profiles = vec![layer("a", 10, 100), layer("b", 10, 0)];
        // Layer b has no MACs, so it is free under a BOPs budget.
        let budget = Budget::bops(100.0 * 4.0 * 4.0, 4);
        let c = solve_lp(&theta, &profiles, &budget, BitRange::new(4, 8).unwrap()).unwrap();
        assert_eq!(c.bits, vec![4, 8]);
        assert_eq!(c.bops, 1600.0);
    }

    #[test]
    fn size_and_bops_arithmetic() {
        let p = vec![layer("a", 1000, 10)];
        assert_eq!(model_size(&[4], &p), 500.0);
        assert_eq!(bops(&[4], &p, 0), 0.0);
        let p = vec![layer("a", 37, 11), layer("b", 5, 3)];
        assert_eq!(model_size(&[6, 8], &p) * 2.0, model_size(&[12, 16], &p));
        assert_eq!(bops(&[6, 8], &p, 4) * 2.0, bops(&[12, 16], &p, 4));
    }

    #[test]
    fn rejects_bad_inputs() {
        let (theta, profiles) = two_layers();
        assert!(BitRange::new(5, 4).is_err());
        assert!(solve_lp(&theta, &profiles, &Budget::size_bytes(0.0, 8), BitRange::new(4, 8).unwrap()).is_err());
        assert!(solve_lp(&theta, &profiles[..1], &Budget::size_bytes(1e3, 8), BitRange::new(4, 8).unwrap()).is_err());
    }
}
