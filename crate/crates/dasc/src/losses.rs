//! Loss terms and their per-configuration composition.
//!
//! The total loss is always `L = L_A + w_D * L_D`. Depending on the
//! configuration, each branch loss combines full-batch or half-batch
//! cross-entropy with a variance term on the opposite half: the first half of
//! a batch carries the plus mask (scene half exposed), the second half the
//! minus mask, and the variance terms push the head that lost its input half
//! toward uniform predictions.

use crate::error::{config_err, Result};
use crate::model::Predictions;
use crate::numerics::{NodeId, Scalar, Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub use crate::numerics::VarianceSign;

/// The six training configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConfigId {
    C0,
    C1,
    C2,
    C2M,
    C3,
    C3M,
}

impl ConfigId {
    pub const ALL: [ConfigId; 6] = [
        ConfigId::C0,
        ConfigId::C1,
        ConfigId::C2,
        ConfigId::C2M,
        ConfigId::C3,
        ConfigId::C3M,
    ];

    /// Masked configurations apply plus/minus embedding masks and double the
    /// embedding size.
    pub fn is_masked(&self) -> bool {
        matches!(self, ConfigId::C2M | ConfigId::C3M)
    }

    /// Whether the domain head is trained at all.
    pub fn trains_domain_head(&self) -> bool {
        !matches!(self, ConfigId::C0 | ConfigId::C1)
    }

    /// Batches draw from both source and target domains (C0 is source-only).
    pub fn uses_target_domain(&self) -> bool {
        !matches!(self, ConfigId::C0)
    }
}

impl fmt::Display for ConfigId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ConfigId::C0 => "C0",
            ConfigId::C1 => "C1",
            ConfigId::C2 => "C2",
            ConfigId::C2M => "C2M",
            ConfigId::C3 => "C3",
            ConfigId::C3M => "C3M",
        };
        f.write_str(s)
    }
}

impl FromStr for ConfigId {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "C0" => Ok(ConfigId::C0),
            "C1" => Ok(ConfigId::C1),
            "C2" => Ok(ConfigId::C2),
            "C2M" => Ok(ConfigId::C2M),
            "C3" => Ok(ConfigId::C3),
            "C3M" => Ok(ConfigId::C3M),
            other => config_err(format!(
                "unknown config id '{other}' (expected one of C0, C1, C2, C2M, C3, C3M)"
            )),
        }
    }
}

/// Branch and variance weighting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_domain: f64,
    pub w_variance: f64,
    pub variance_sign: VarianceSign,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_domain: 10.0,
            w_variance: 500.0,
            variance_sign: VarianceSign::Uncertainty,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_domain > 0.0) {
            return config_err(format!("w_domain {} must be positive", self.w_domain));
        }
        if !(self.w_variance >= 0.0) {
            return config_err(format!("w_variance {} must be non-negative", self.w_variance));
        }
        Ok(())
    }
}

/// Scalar values of the individual terms for one training step; terms that a
/// configuration does not compute stay `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub branch_a: f64,
    pub branch_d: f64,
    pub ce_up: Option<f64>,
    pub ce_down: Option<f64>,
    pub ce_full: Option<f64>,
    pub var_up: Option<f64>,
    pub var_down: Option<f64>,
}

impl LossBreakdown {
    /// Compose the total from the branch losses; `total = L_A + w_D * L_D`
    /// holds by construction.
    fn compose(branch_a: f64, branch_d: f64, w_domain: f64) -> (f64, f64, f64) {
        (branch_a + w_domain * branch_d, branch_a, branch_d)
    }
}

/// Targets and row participation flags for one batch, in row order.
pub struct LossInputs<'a, T: Scalar> {
    /// One-hot scene targets, rows x A.
    pub y_a: &'a Tensor<T>,
    /// One-hot domain targets, rows x D.
    pub y_d: &'a Tensor<T>,
    /// Rows whose scene label may be used by a cross-entropy term.
    pub asc_participates: &'a [bool],
}

/// Mean categorical cross-entropy over the active rows (log clamped at
/// 1e-12). `row_mask` of `None` means all rows.
pub fn cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    y_hat: NodeId,
    targets: &Tensor<T>,
    row_mask: Option<&[bool]>,
) -> Result<NodeId> {
    tape.cross_entropy(y_hat, targets.clone(), row_mask.map(|m| m.to_vec()))
}

/// Mean per-row variance of the predicted distributions over the active rows,
/// with the sign convention selected by `sign`.
pub fn variance_loss<T: Scalar>(
    tape: &mut Tape<T>,
    y_hat: NodeId,
    row_mask: Option<&[bool]>,
    sign: VarianceSign,
) -> Result<NodeId> {
    tape.variance_loss(y_hat, row_mask.map(|m| m.to_vec()), sign)
}

/// Build the total loss node for one configuration and report the term values.
///
/// Row layout contract (enforced): for half-batch configurations the first
/// half of the rows is the "up" half and the second the "down" half;
/// `asc_participates` must be true exactly on the rows each configuration
/// feeds to its scene cross-entropy term.
pub fn config_loss<T: Scalar>(
    tape: &mut Tape<T>,
    config: ConfigId,
    weights: &LossWeights,
    predictions: &Predictions,
    inputs: &LossInputs<'_, T>,
) -> Result<(NodeId, LossBreakdown)> {
    weights.validate()?;
    let rows = tape.value(predictions.y_hat_a).shape()[0];
    if inputs.asc_participates.len() != rows {
        return config_err(format!(
            "asc_participates has {} flags for {rows} rows",
            inputs.asc_participates.len()
        ));
    }
    let half_based = matches!(
        config,
        ConfigId::C2 | ConfigId::C2M | ConfigId::C3M
    );
    if half_based && rows % 2 != 0 {
        return config_err(format!(
            "config {config} needs an even row count, got {rows}"
        ));
    }
    let up_mask: Vec<bool> = (0..rows).map(|r| r < rows / 2).collect();
    let down_mask: Vec<bool> = (0..rows).map(|r| r >= rows / 2).collect();
    let all_participate = inputs.asc_participates.iter().all(|&p| p);
    let participation_is_up_half = inputs
        .asc_participates
        .iter()
        .enumerate()
        .all(|(r, &p)| p == (r < rows / 2));

    let w_d = T::from_f64(weights.w_domain);
    let w_v = T::from_f64(weights.w_variance);

    match config {
        ConfigId::C0 | ConfigId::C1 => {
            // scene cross-entropy over the full batch, no domain loss
            if !all_participate {
                return config_err(format!(
                    "config {config} expects every row to carry a usable scene label"
                ));
            }
            let ce = cross_entropy(tape, predictions.y_hat_a, inputs.y_a, None)?;
            let l_a = tape.scalar_value(ce)?;
            let (total, branch_a, branch_d) = LossBreakdown::compose(l_a, 0.0, weights.w_domain);
            Ok((
                ce,
                LossBreakdown {
                    total,
                    branch_a,
                    branch_d,
                    ce_full: Some(l_a),
                    ..Default::default()
                },
            ))
        }
        ConfigId::C2 => {
            // scene loss over the labeled (source) half, domain loss over all
            if !participation_is_up_half {
                return config_err(
                    "config C2 expects asc_participates true exactly on the first half".to_string(),
                );
            }
            let ce_a = cross_entropy(
                tape,
                predictions.y_hat_a,
                inputs.y_a,
                Some(inputs.asc_participates),
            )?;
            let ce_d = cross_entropy(tape, predictions.y_hat_d, inputs.y_d, None)?;
            let scaled_d = tape.scale(ce_d, w_d)?;
            let total_node = tape.add(ce_a, scaled_d)?;
            let l_a = tape.scalar_value(ce_a)?;
            let l_d = tape.scalar_value(ce_d)?;
            let (total, branch_a, branch_d) = LossBreakdown::compose(l_a, l_d, weights.w_domain);
            Ok((
                total_node,
                LossBreakdown {
                    total,
                    branch_a,
                    branch_d,
                    ce_up: Some(l_a),
                    ce_full: Some(l_d),
                    ..Default::default()
                },
            ))
        }
        ConfigId::C3 => {
            if !all_participate {
                return config_err(
                    "config C3 expects every row to carry a usable scene label".to_string(),
                );
            }
            let ce_a = cross_entropy(tape, predictions.y_hat_a, inputs.y_a, None)?;
            let ce_d = cross_entropy(tape, predictions.y_hat_d, inputs.y_d, None)?;
            let scaled_d = tape.scale(ce_d, w_d)?;
            let total_node = tape.add(ce_a, scaled_d)?;
            let l_a = tape.scalar_value(ce_a)?;
            let l_d = tape.scalar_value(ce_d)?;
            let (total, branch_a, branch_d) = LossBreakdown::compose(l_a, l_d, weights.w_domain);
            Ok((
                total_node,
                LossBreakdown {
                    total,
                    branch_a,
                    branch_d,
                    ce_full: Some(l_a + l_d), // both branches are full-batch terms
                    ..Default::default()
                },
            ))
        }
        ConfigId::C2M | ConfigId::C3M => {
            // L_A = ce over participating up-half rows + w_v * variance of the
            // scene head on the minus-masked half; L_D mirrors it.
            let up_participants: Vec<bool> = up_mask
                .iter()
                .zip(inputs.asc_participates)
                .map(|(&u, &p)| u && p)
                .collect();
            if !up_participants.iter().any(|&p| p) {
                return config_err(format!(
                    "config {config} has no ASC-labeled rows in the up half"
                ));
            }
            if inputs.asc_participates[rows / 2..].iter().any(|&p| p) {
                return config_err(format!(
                    "config {config} expects no ASC participation in the down half"
                ));
            }
            let ce_up = cross_entropy(
                tape,
                predictions.y_hat_a,
                inputs.y_a,
                Some(&up_participants),
            )?;
            let var_down = variance_loss(
                tape,
                predictions.y_hat_a,
                Some(&down_mask),
                weights.variance_sign,
            )?;
            let var_down_scaled = tape.scale(var_down, w_v)?;
            let branch_a_node = tape.add(ce_up, var_down_scaled)?;

            let ce_down = cross_entropy(tape, predictions.y_hat_d, inputs.y_d, Some(&down_mask))?;
            let var_up = variance_loss(
                tape,
                predictions.y_hat_d,
                Some(&up_mask),
                weights.variance_sign,
            )?;
            let var_up_scaled = tape.scale(var_up, w_v)?;
            let branch_d_node = tape.add(ce_down, var_up_scaled)?;

            let scaled_d = tape.scale(branch_d_node, w_d)?;
            let total_node = tape.add(branch_a_node, scaled_d)?;

            let l_a = tape.scalar_value(branch_a_node)?;
            let l_d = tape.scalar_value(branch_d_node)?;
            let (total, branch_a, branch_d) = LossBreakdown::compose(l_a, l_d, weights.w_domain);
            Ok((
                total_node,
                LossBreakdown {
                    total,
                    branch_a,
                    branch_d,
                    ce_up: Some(tape.scalar_value(ce_up)?),
                    ce_down: Some(tape.scalar_value(ce_down)?),
                    var_up: Some(tape.scalar_value(var_up)?),
                    var_down: Some(tape.scalar_value(var_down)?),
                    ..Default::default()
                },
            ))
        }
    }
}

/// One-hot encode labels against a class count.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (r, &c) in labels.iter().enumerate() {
        if c >= classes {
            return config_err(format!(
                "label {c} out of range for {classes} classes (row {r})"
            ));
        }
        data[r * classes + c] = T::one();
    }
    Tensor::new(vec![labels.len(), classes], data)
}
