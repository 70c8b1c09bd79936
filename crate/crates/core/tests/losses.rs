mod common;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use vloc::losses::*;
use vloc::matching::{marginal_distributions, AxisDistribution, CostVolumeConfig, MarginalCosts, MarginalDistributions};
use vloc::PoseSE2Offset;

fn distributions(seed: u64) -> (CostVolumeConfig, MarginalDistributions) {
    let mut r = rng(seed);
    let g = random_grid(&mut r);
    let costs = (0..g.node_count()).map(|_| rand::Rng::random_range(&mut r, 0.0..1.0)).collect();
    let m = marginal_distributions(&MarginalCosts::new(g, costs), 0.2).unwrap();
    (g, m)
}

prop_compose! {
    fn small_offset()(dx in -2.0..2.0f64, dy in -2.0..2.0f64, dpsi in -0.5..0.5f64) -> PoseSE2Offset {
        PoseSE2Offset::new(dx, dy, dpsi)
    }
}

proptest! {
    #[test]
    fn losses_are_non_negative(a in small_offset(), b in small_offset(), seed in any::<u64>(), costs in prop::collection::vec(0.0..3.0f64, 0..20)) {
        for variant in [OffsetLossVariant::Absolute, OffsetLossVariant::Squared] {
            let cfg = LossConfig { offset_variant: variant, ..Default::default() };
            prop_assert!(loss_absolute(&a, &b, &cfg) >= 0.0);
        }
        let (_, m) = distributions(seed);
        prop_assert!(loss_concentration(&m, &a, &LossConfig::default()) >= 0.0);
        for mode in [SimilarityMode::Regularized, SimilarityMode::RawSquared] {
            let cfg = LossConfig { similarity_mode: mode, ..Default::default() };
            prop_assert!(loss_similarity(&costs, &cfg) >= 0.0);
        }
    }

    #[test]
    fn absolute_loss_is_alpha_lipschitz_per_axis(a in small_offset(), gt in small_offset(), h in -0.3..0.3f64, alpha in 0.1..5.0f64, axis in 0usize..3) {
        let cfg = LossConfig { alpha, ..Default::default() };
        let mut b = a;
        match axis {
            0 => b.dx += h,
            1 => b.dy += h,
            _ => b.dpsi += h,
        }
        let diff = (loss_absolute(&a, &gt, &cfg) - loss_absolute(&b, &gt, &cfg)).abs();
        prop_assert!(diff <= alpha * h.abs() + 1e-12);
    }

    #[test]
    fn concentration_is_invariant_to_node_permutation(seed in any::<u64>(), gt in small_offset()) {
        let (_, m) = distributions(seed);
        let mut r = rng(seed ^ 1);
        let shuffle = |a: &AxisDistribution, r: &mut rand_chacha::ChaCha8Rng| {
            let mut pairs: Vec<(f64, f64)> = a.values.iter().copied().zip(a.probs.iter().copied()).collect();
            pairs.shuffle(r);
            AxisDistribution {
                values: pairs.iter().map(|p| p.0).collect(),
                probs: pairs.iter().map(|p| p.1).collect(),
                ..a.clone()
            }
        };
        let permuted = MarginalDistributions { x: shuffle(&m.x, &mut r), y: shuffle(&m.y, &mut r), psi: shuffle(&m.psi, &mut r) };
        let cfg = LossConfig::default();
        prop_assert!((loss_concentration(&m, &gt, &cfg) - loss_concentration(&permuted, &gt, &cfg)).abs() <= 1e-12);
    }

    #[test]
    fn shifting_truth_by_a_step_moves_concentration_by_at_most_a_step(seed in any::<u64>()) {
        let (g, m) = distributions(seed);
        let cfg = LossConfig::default();
        let base = loss_concentration(&m, &PoseSE2Offset::zero(), &cfg);
        for (shift, step) in [
            (PoseSE2Offset::new(g.step_x, 0.0, 0.0), g.step_x),
            (PoseSE2Offset::new(0.0, g.step_y, 0.0), g.step_y),
            (PoseSE2Offset::new(0.0, 0.0, g.step_psi), g.step_psi),
        ] {
            prop_assert!((loss_concentration(&m, &shift, &cfg) - base).abs() <= step + 1e-12);
        }
    }
}
