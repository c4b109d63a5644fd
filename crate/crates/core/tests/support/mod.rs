//! Shared fixtures for the network gradient checks.

#![allow(dead_code)]

use consistent_point::loss::{LossBreakdown, LossWeights};
use consistent_point::net::{backward, forward, ModelParams, NetHyper};
use consistent_point::synth::{render_field, Field};
use consistent_point::{MatchResult, Point2D, PointSet, ProposalSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

const H: f64 = 1e-5;

pub struct Instance {
    pub field: Field,
    pub params: ModelParams,
    pub gt: PointSet,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hyper = NetHyper {
        patch_size: 7,
        hidden_width: 8,
        stride: 4,
    };
    let size = 20;
    let heads: Vec<Point2D> = (0..4)
        .map(|_| Point2D::new(rng.random_range(2.0..18.0), rng.random_range(2.0..18.0)))
        .collect();
    let amps: Vec<f64> = heads.iter().map(|_| rng.random_range(0.6..1.0)).collect();
    let noise = Normal::new(0.0, 0.1).unwrap();
    let field = render_field(size, &heads, &amps, 2.0, Some(&noise), &mut rng);
    let mut params = ModelParams::init(hyper, &mut rng);
    // Move the logits away from the init bias so scores spread over (0, 1).
    for t in params.theta.iter_mut() {
        *t += rng.random_range(-0.2..0.2);
    }
    Instance {
        field,
        params,
        gt: PointSet::new(heads),
    }
}

/// A teacher with a neutral logit bias so that some anchors clear 0.5.
pub fn neutral_teacher(seed: u64) -> ModelParams {
    let mut p = instance(seed).params;
    *p.theta.last_mut().unwrap() = 0.0;
    p
}

pub fn weights() -> LossWeights {
    LossWeights {
        lambda1: 0.5,
        lambda2: 0.05,
    }
}

/// Central difference of `f` at `x` along every coordinate.
pub fn numeric_gradient(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut t = x.to_vec();
    (0..x.len())
        .map(|i| {
            t[i] = x[i] + h;
            let up = f(&t);
            t[i] = x[i] - h;
            let down = f(&t);
            t[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Max relative discrepancy between analytic parameter gradients and central
/// differences, with the matching held fixed at its unperturbed value.
pub fn network_check<L>(inst: &Instance, loss: L) -> f64
where
    L: Fn(&ProposalSet, Option<&MatchResult>) -> (LossBreakdown, MatchResult),
{
    let (props, cache) = forward(&inst.params, &inst.field).unwrap();
    let (l, matching) = loss(&props, None);
    let analytic = backward(&cache, &l.pos_grads, &l.score_grads).unwrap();
    let numeric = numeric_gradient(&inst.params.theta, H, |theta| {
        let p = ModelParams::from_theta(inst.params.hyper, theta.to_vec()).unwrap();
        let (props, _) = forward(&p, &inst.field).unwrap();
        loss(&props, Some(&matching)).0.total
    });
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
