//! End-to-end gradient checks through the network and both losses.

mod support;

use consistent_point::assign::match_targets;
use consistent_point::consist::{build_consistent_labels, PAConfig};
use consistent_point::loss::{labeled_loss, unlabeled_loss};
use consistent_point::net::forward;
use support::{instance, network_check, neutral_teacher, weights};

#[test]
fn labeled_network_gradient() {
    for seed in 0..5 {
        let inst = instance(seed);
        let err = network_check(&inst, |props, fixed| {
            let m = fixed.cloned().unwrap_or_else(|| match_targets(&inst.gt, props, 0.05).unwrap());
            (labeled_loss(&inst.gt, props, &m, weights()).unwrap(), m)
        });
        assert!(err <= 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn unlabeled_network_gradient() {
    for seed in 10..15 {
        let inst = instance(seed);
        let (teacher, _) = forward(&neutral_teacher(seed + 100), &inst.field).unwrap();
        let pseudo = build_consistent_labels(&teacher, &PAConfig::default()).unwrap();
        assert!(!pseudo.is_empty(), "seed {seed}: teacher produced no pseudo-points");
        let err = network_check(&inst, |props, fixed| {
            let m = fixed
                .cloned()
                .unwrap_or_else(|| match_targets(&pseudo.points, props, 0.05).unwrap());
            (unlabeled_loss(&pseudo, props, &m, weights(), true).unwrap(), m)
        });
        assert!(err <= 1e-4, "seed {seed}: relative error {err:e}");
    }
}
