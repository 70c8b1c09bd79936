//! Training losses, evaluated as diagnostics and fitness metrics.
//!
//! Three terms: an offset regression loss (absolute or squared form), a
//! concentration loss (mean absolute deviation of each axis distribution
//! about the ground truth), and a descriptor-similarity margin loss over the
//! per-keypoint costs at the ground-truth pose.

use crate::error::{Error, Result};
use crate::features::DenseFeatureLevel;
use crate::geometry::{wrap_angle, CameraModel, Pose3, PoseSE2Offset};
use crate::map::MapKeypoint;
use crate::matching::{build_cost_volume, regularize, AxisDistribution, CostVolumeConfig, MarginalDistributions, RegularizerWeights};

/// Functional form of the offset regression loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetLossVariant {
    /// `alpha * (|ex| + |ey| + |epsi|)`.
    #[default]
    Absolute,
    /// `alpha * (ex^2 + ey^2) + epsi^2`.
    Squared,
}

/// Which costs the similarity loss thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Costs after the regularizer, used as given.
    #[default]
    Regularized,
    /// Raw descriptor distances, squared before the margin is applied.
    RawSquared,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Balancing factor of the offset loss.
    pub alpha: f64,
    /// Scale of the concentration loss.
    pub beta: f64,
    /// Similarity margin `C`.
    pub margin: f64,
    pub offset_variant: OffsetLossVariant,
    pub similarity_mode: SimilarityMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            margin: 1.0,
            offset_variant: OffsetLossVariant::Absolute,
            similarity_mode: SimilarityMode::Regularized,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.margin >= 0.0) {
            return Err(Error::Config(format!(
                "loss factors must satisfy alpha > 0, beta > 0, margin >= 0 (got {}, {}, {})",
                self.alpha, self.beta, self.margin
            )));
        }
        Ok(())
    }
}

/// Offset regression loss; heading residuals are wrapped to `(-pi, pi]`.
pub fn loss_absolute(est: &PoseSE2Offset, gt: &PoseSE2Offset, cfg: &LossConfig) -> f64 {
    let ex = est.dx - gt.dx;
    let ey = est.dy - gt.dy;
    let epsi = wrap_angle(est.dpsi - gt.dpsi);
    match cfg.offset_variant {
        OffsetLossVariant::Absolute => cfg.alpha * (ex.abs() + ey.abs() + epsi.abs()),
        OffsetLossVariant::Squared => cfg.alpha * (ex * ex + ey * ey) + epsi * epsi,
    }
}

fn mad(axis: &AxisDistribution, truth: f64) -> f64 {
    axis.values
        .iter()
        .zip(&axis.probs)
        .map(|(z, p)| p * (z - truth).abs())
        .sum()
}

/// `beta * (sigma_x + sigma_y + sigma_psi)` with each sigma the mean absolute
/// deviation of the axis distribution about the ground-truth offset.
pub fn loss_concentration(m: &MarginalDistributions, gt: &PoseSE2Offset, cfg: &LossConfig) -> f64 {
    cfg.beta * (mad(&m.x, gt.dx) + mad(&m.y, gt.dy) + mad(&m.psi, gt.dpsi))
}

/// Sum of costs exceeding the margin.
pub fn loss_similarity(costs_at_gt: &[f64], cfg: &LossConfig) -> f64 {
    costs_at_gt
        .iter()
        .map(|&c| match cfg.similarity_mode {
            SimilarityMode::Regularized => c,
            SimilarityMode::RawSquared => c * c,
        })
        .map(|c| (c - cfg.margin).max(0.0))
        .sum()
}

/// Per-keypoint costs with the map keypoints projected under the ground-truth
/// pose. Keypoints falling outside the level are skipped. With
/// [`SimilarityMode::Regularized`] the costs pass through `weights`; otherwise
/// raw distances are returned.
pub fn costs_at_ground_truth(
    keypoints: &[MapKeypoint],
    level: &DenseFeatureLevel,
    gt_pose: &Pose3,
    cam: &CameraModel,
    weights: &RegularizerWeights,
    cfg: &LossConfig,
) -> Result<Vec<f64>> {
    let single = CostVolumeConfig::new([1, 1, 1], 1.0, 1.0, 1.0)?;
    let mut vol = build_cost_volume(keypoints, level, gt_pose, cam, &single)?;
    if cfg.similarity_mode == SimilarityMode::Regularized {
        vol = regularize(&vol, weights);
    }
    Ok(vol
        .raw
        .iter()
        .zip(&vol.valid)
        .filter(|(_, ok)| **ok)
        .map(|(c, _)| *c)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::{marginal_distributions, MarginalCosts};
    use std::f64::consts::PI;

    #[test]
    fn offset_loss_hand_cases() {
        let gt = PoseSE2Offset::new(0.3, -0.2, 0.1);
        let est = PoseSE2Offset::new(0.4, 0.0, 0.15);
        let mut cfg = LossConfig::default();
        assert!((loss_absolute(&est, &gt, &cfg) - 0.35).abs() < 1e-12);
        cfg.offset_variant = OffsetLossVariant::Squared;
        assert!((loss_absolute(&est, &gt, &cfg) - 0.0525).abs() < 1e-12);
        assert_eq!(loss_absolute(&gt, &gt, &cfg), 0.0);
    }

    #[test]
    fn full_turn_residual_wraps() {
        let gt = PoseSE2Offset { dx: 0.0, dy: 0.0, dpsi: 0.5 };
        let est = PoseSE2Offset { dx: 0.0, dy: 0.0, dpsi: 0.5 + 2.0 * PI };
        assert!(loss_absolute(&est, &gt, &LossConfig::default()) < 1e-12);
    }

    #[test]
    fn similarity_hand_cases() {
        let cfg = LossConfig::default();
        assert!((loss_similarity(&[1.5, 0.2], &cfg) - 0.5).abs() < 1e-12);
        assert_eq!(loss_similarity(&[], &cfg), 0.0);
        assert_eq!(loss_similarity(&[1.0, 0.3], &cfg), 0.0);
        let raw = LossConfig {
            similarity_mode: SimilarityMode::RawSquared,
            ..cfg
        };
        // 1.5^2 - 1 = 1.25; 0.9^2 < 1
        assert!((loss_similarity(&[1.5, 0.9], &raw) - 1.25).abs() < 1e-12);
    }

    #[test]
    fn concentration_uniform_closed_form() {
        let g = CostVolumeConfig::new([5, 5, 5], 0.5, 0.5, 0.01).unwrap();
        let m = marginal_distributions(&MarginalCosts::new(g, vec![0.0; 125]), 0.1).unwrap();
        let cfg = LossConfig { beta: 2.0, ..Default::default() };
        // mean |offset| over {-2,-1,0,1,2} steps is 6/5 steps
        let expected = 2.0 * (1.2 * 0.5 + 1.2 * 0.5 + 1.2 * 0.01);
        let got = loss_concentration(&m, &PoseSE2Offset::zero(), &cfg);
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn concentration_zero_for_delta_at_truth() {
        let g = CostVolumeConfig::new([3, 3, 3], 1.0, 1.0, 0.1).unwrap();
        let mut costs = vec![1e6; 27];
        costs[g.node_index(0, 2, 1)] = 0.0;
        let m = marginal_distributions(&MarginalCosts::new(g, costs), 0.1).unwrap();
        let gt = g.offset(0, 2, 1);
        assert_eq!(loss_concentration(&m, &gt, &LossConfig::default()), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { margin: -1.0, ..Default::default() }.validate().is_err());
    }
}
