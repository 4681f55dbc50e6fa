//! Training objective: task cross-entropy plus, for each MoE layer, the
//! negative mutual information between group labels and expert assignment.
//!
//! `P(E | C_j)` is estimated per minibatch as the mean selection-probability
//! vector of the batch's group-`j` samples (soft counts), so the estimate stays
//! differentiable in the router parameters. The joint is
//! `P(C_i, E_j) = P(E_j | C_i) P(C_i)` with dataset-level priors; groups that
//! are absent from a batch are dropped and the remaining priors renormalized.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::moe::GroupStats;
use crate::tensor::{Tensor, LOG_EPS};

const MASS_TOL: f64 = 1e-9;

/// `P(C_i, E_j)` with rows indexed by group and columns by expert.
#[derive(Debug, Clone)]
pub struct JointDistribution {
    joint: Tensor,
    group_priors: Vec<f64>,
    expert_marginals: Tensor,
}

impl JointDistribution {
    /// Constant joint from an explicit matrix; priors are its row sums.
    pub fn from_matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let groups = rows.len();
        let experts = rows.first().map_or(0, Vec::len);
        if groups == 0 || experts == 0 || rows.iter().any(|r| r.len() != experts) {
            return shape_err("JointDistribution", "matrix must be non-empty and rectangular");
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        if flat.iter().any(|v| !(*v >= 0.0)) {
            return invalid("JointDistribution", "entries must be nonnegative");
        }
        let total: f64 = flat.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return invalid("JointDistribution", format!("total mass {total} is not 1"));
        }
        let joint = Tensor::new(&[groups, experts], flat)?;
        let group_priors = rows.iter().map(|r| r.iter().sum()).collect();
        let expert_marginals = joint.sum_axis(0)?;
        Ok(Self {
            joint,
            group_priors,
            expert_marginals,
        })
    }

    pub fn joint(&self) -> &Tensor {
        &self.joint
    }

    pub fn matrix(&self) -> Vec<Vec<f64>> {
        let cols = self.joint.shape()[1];
        self.joint.data().chunks_exact(cols).map(<[f64]>::to_vec).collect()
    }

    pub fn group_priors(&self) -> &[f64] {
        &self.group_priors
    }

    pub fn expert_marginals(&self) -> Vec<f64> {
        self.expert_marginals.to_vec()
    }

    /// Swaps the roles of groups and experts (constant copy).
    pub fn transpose(&self) -> Result<Self> {
        let m = self.matrix();
        let t: Vec<Vec<f64>> = (0..m[0].len())
            .map(|j| m.iter().map(|row| row[j]).collect())
            .collect();
        Self::from_matrix(&t)
    }
}

/// Soft-count estimate of the group/expert joint from `[N, m]` selection
/// probabilities and the batch's group labels.
pub fn estimate_joint(probabilities: &Tensor, groups: &[usize], stats: &GroupStats) -> Result<JointDistribution> {
    let s = probabilities.shape();
    if s.len() != 2 {
        return shape_err("estimate_joint", format!("expected [N, m] probabilities, got {s:?}"));
    }
    let n = s[0];
    if groups.is_empty() {
        return invalid("estimate_joint", "empty batch");
    }
    if groups.len() != n {
        return invalid("estimate_joint", format!("{} group labels for {n} samples", groups.len()));
    }
    let m = stats.groups();
    if let Some(&bad) = groups.iter().find(|&&g| g >= m) {
        return invalid("estimate_joint", format!("group label {bad} outside [0, {m})"));
    }
    let mut counts = vec![0usize; m];
    for &g in groups {
        counts[g] += 1;
    }
    let priors = stats.priors();
    let present: f64 = (0..m).filter(|&i| counts[i] > 0).map(|i| priors[i]).sum();
    let group_priors: Vec<f64> = (0..m)
        .map(|i| if counts[i] > 0 { priors[i] / present } else { 0.0 })
        .collect();

    // Row i of the weight matrix averages group i's rows and scales by P(C_i).
    let mut weights = vec![0.0; m * n];
    for (col, &g) in groups.iter().enumerate() {
        weights[g * n + col] = group_priors[g] / counts[g] as f64;
    }
    let joint = Tensor::new(&[m, n], weights)?.matmul(probabilities)?;
    let expert_marginals = joint.sum_axis(0)?;
    Ok(JointDistribution {
        joint,
        group_priors,
        expert_marginals,
    })
}

/// `I(C; E)` in nats, differentiable through the joint.
pub fn mutual_information(joint: &JointDistribution, eps: f64) -> Result<Tensor> {
    let (groups, experts) = (joint.joint.shape()[0], joint.joint.shape()[1]);
    let pc = Tensor::new(&[groups, 1], joint.group_priors.clone())?;
    let pe = joint.expert_marginals.reshape(&[1, experts])?;
    let independent = pc.matmul(&pe)?;
    let log_ratio = joint.joint.log(eps).sub(&independent.log(eps))?;
    Ok(joint.joint.mul(&log_ratio)?.sum())
}

/// Weights of the composed loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub w_mi: f64,
    pub eps: f64,
    /// MoE layers that must contribute an MI term.
    pub moe_layers: Vec<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_mi: 0.01,
            eps: LOG_EPS,
            moe_layers: Vec::new(),
        }
    }
}

/// Total loss and its parts.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub cross_entropy: f64,
    /// `(layer index, I(C;E_Y))` in configured order.
    pub mutual_information: Vec<(usize, f64)>,
}

/// `CE(logits, targets) - w_MI * sum_Y I(C; E_Y)`.
pub fn total_loss(
    logits: &Tensor,
    targets: &[usize],
    joints: &[(usize, JointDistribution)],
    config: &LossConfig,
) -> Result<LossBreakdown> {
    if !(config.w_mi >= 0.0) {
        return invalid("total_loss", format!("w_MI must be nonnegative, got {}", config.w_mi));
    }
    let ce = logits.cross_entropy(targets)?;
    let cross_entropy = ce.item();
    let mut total = ce;
    let mut mis = Vec::with_capacity(config.moe_layers.len());
    for &layer in &config.moe_layers {
        let Some((_, joint)) = joints.iter().find(|(y, _)| *y == layer) else {
            return invalid("total_loss", format!("no joint distribution for MoE layer {layer}"));
        };
        let mi = mutual_information(joint, config.eps)?;
        mis.push((layer, mi.item()));
        if config.w_mi > 0.0 {
            total = total.add(&mi.scale(-config.w_mi))?;
        }
    }
    Ok(LossBreakdown {
        total,
        cross_entropy,
        mutual_information: mis,
    })
}
