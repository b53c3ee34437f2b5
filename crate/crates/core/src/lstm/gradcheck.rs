//! Central finite-difference check of the analytic gradients.

use super::{DropoutMasks, DropoutRates, Network, Topology};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// (tensor index in storage order, element index) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Denominator floor: below it the comparison is absolute. The central
/// difference of a loss near 1 carries roughly `ulp(L) / 2h ≈ 3e-12` of
/// rounding noise at `h = 1e-5`, so gradients smaller than about 1e-6 cannot
/// be resolved to a relative 1e-5 by any implementation.
pub const REL_FLOOR: f64 = 1e-6;

/// The tiny topology used by [`gradient_check`].
pub const TINY: Topology = Topology {
    input: 3,
    hidden1: 4,
    hidden2: 3,
    horizon: 2,
    timesteps: 5,
};

/// [`gradient_check_on`] for the [`TINY`] topology and a batch of 3.
pub fn gradient_check(seed: u64, h: f64) -> GradCheck {
    gradient_check_on(&TINY, 3, seed, h)
}

/// Fills a network of shape `topo` with random weights, draws a batch and
/// dropout masks from `seed`, and compares every parameter's analytic
/// gradient with the central difference `(L(θ + h) - L(θ - h)) / 2h`.
///
/// Targets sit at least 0.1 away from the predictions so no residual crosses
/// the kink of the absolute value within a step `h ≤ 1e-3`.
pub fn gradient_check_on(topo: &Topology, batch: usize, seed: u64, h: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topo = *topo;
    let mut net = Network::zeros(&topo);
    for t in net.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
    let x = Array3::from_shape_simple_fn((batch, topo.timesteps, topo.input), || rng.random_range(-1.5..1.5));
    let rates = DropoutRates {
        layer1_input: 0.2,
        layer1_recurrent: 0.2,
        layer2_input: 0.2,
        layer2_recurrent: 0.2,
    };
    let masks = DropoutMasks::sample(&rates, batch, &topo, &mut rng);
    let pred = net.forward_batch(x.view(), &masks).expect("finite forward");
    let y = pred.mapv(|p| {
        let off = rng.random_range(0.1..0.6);
        if rng.random::<bool>() {
            p + off
        } else {
            p - off
        }
    });

    let (_, grads) = net.loss_and_gradients(x.view(), y.view(), &masks).expect("shapes agree");
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();

    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (k, ana) in analytic.iter().enumerate() {
        for (i, a) in ana.iter().enumerate() {
            let orig = net.tensors()[k][i];
            net.tensors_mut()[k][i] = orig + h;
            let up = net.batch_loss(x.view(), y.view(), &masks);
            net.tensors_mut()[k][i] = orig - h;
            let down = net.batch_loss(x.view(), y.view(), &masks);
            net.tensors_mut()[k][i] = orig;
            let num = (up - down) / (2.0 * h);
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(REL_FLOOR);
            if rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst = (k, i);
            }
            out.checked += 1;
        }
    }
    out
}
