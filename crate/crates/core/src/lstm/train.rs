use super::{Adam, DropoutMasks, LstmError, LstmModel, Network, Result, Topology, TrainConfig, TrainingMeta};
use crate::features::{FeatureTensor, NormStats};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    /// Sample-weighted mean training loss of each epoch (dropout active).
    pub loss_trace: Vec<f64>,
}

fn gather(tensor: &FeatureTensor, rows: &[usize]) -> (Array3<f64>, Array2<f64>) {
    let (_, steps, feats) = tensor.design.dim();
    let horizon = tensor.target.ncols();
    let row = steps * feats;
    let src = tensor.design.as_slice().expect("standard layout design");
    let tgt = tensor.target.as_slice().expect("standard layout target");
    let mut x = Vec::with_capacity(rows.len() * row);
    let mut y = Vec::with_capacity(rows.len() * horizon);
    for &r in rows {
        x.extend_from_slice(&src[r * row..(r + 1) * row]);
        y.extend_from_slice(&tgt[r * horizon..(r + 1) * horizon]);
    }
    (
        Array3::from_shape_vec((rows.len(), steps, feats), x).expect("gathered design"),
        Array2::from_shape_vec((rows.len(), horizon), y).expect("gathered target"),
    )
}

/// Mini-batch training from `initial`. Rows are reshuffled every epoch and
/// dropout masks drawn per batch, both from a stream seeded by `config.seed`.
pub fn fit_network(initial: Network, tensor: &FeatureTensor, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if tensor.is_empty() {
        return Err(LstmError::EmptyTensor);
    }
    let topo = initial.topology(tensor.design.dim().1);
    if tensor.design.dim().2 != topo.input || tensor.target.ncols() != topo.horizon {
        return Err(LstmError::Shape(format!(
            "tensor {:?} / {:?} does not fit topology {topo:?}",
            tensor.design.dim(),
            tensor.target.dim()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut net = initial;
    let mut adam = Adam::new(&net, config.adam());
    let n = tensor.n_samples();
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch, rows) in order.chunks(config.batch_size).enumerate() {
            let (x, y) = gather(tensor, rows);
            let masks = DropoutMasks::sample(&config.dropout, rows.len(), &topo, &mut rng);
            let (loss, grads) = net.loss_and_gradients(x.view(), y.view(), &masks)?;
            if !loss.is_finite() {
                return Err(LstmError::NonFiniteLoss { epoch: epoch + 1, batch: batch + 1 });
            }
            adam.step(&mut net, &grads);
            total += loss * rows.len() as f64;
        }
        let mean = total / n as f64;
        if !mean.is_finite() || !net.is_finite() {
            return Err(LstmError::NonFiniteLoss { epoch: epoch + 1, batch: 0 });
        }
        trace.push(mean);
    }
    Ok(TrainOutcome { network: net, loss_trace: trace })
}

/// Initializes a default-topology network from `config.seed` and trains it.
pub fn train(
    tensor: &FeatureTensor,
    norm_stats: NormStats,
    train_hours: usize,
    config: &TrainConfig,
) -> Result<(LstmModel, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let network = Network::init(&Topology::default(), &mut rng);
    let outcome = fit_network(network, tensor, config)?;
    let meta = TrainingMeta {
        config: *config,
        train_hours,
        train_meter_ids: tensor.meter_ids.clone(),
    };
    Ok((LstmModel::new(outcome.network, norm_stats, meta), outcome.loss_trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::SampleKey;
    use crate::lstm::DropoutRates;
    use rand::Rng;

    fn tiny() -> Topology {
        Topology {
            input: 3,
            hidden1: 4,
            hidden2: 3,
            horizon: 2,
            timesteps: 6,
        }
    }

    /// Target = mean of the first input channel over the window, repeated.
    fn learnable(n: usize, seed: u64) -> FeatureTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let design = Array3::from_shape_simple_fn((n, 6, 3), || rng.random_range(-1.0..1.0));
        let mut target = Array2::zeros((n, 2));
        for s in 0..n {
            let m = design.slice(ndarray::s![s, .., 0]).mean().unwrap();
            target[[s, 0]] = m;
            target[[s, 1]] = -m;
        }
        FeatureTensor {
            design,
            target,
            meter_ids: vec!["m".into()],
            index: (0..n).map(|origin| SampleKey { meter: 0, origin }).collect(),
        }
    }

    fn cfg(epochs: usize, batch: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: batch,
            learning_rate: 0.01,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases_on_learnable_data() {
        let t = learnable(200, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = fit_network(Network::init(&tiny(), &mut rng), &t, &cfg(30, 32, 3)).unwrap();
        assert_eq!(out.loss_trace.len(), 30);
        assert!(out.loss_trace.iter().all(|l| l.is_finite()));
        assert!(out.loss_trace[29] < 0.7 * out.loss_trace[0], "{:?}", out.loss_trace);
    }

    #[test]
    fn fixed_seed_reproduces_trace_bit_for_bit() {
        let t = learnable(90, 4);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            fit_network(Network::init(&tiny(), &mut rng), &t, &cfg(5, 16, 6)).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.network, b.network);
    }

    #[test]
    fn full_batch_without_dropout_ignores_sample_order() {
        let t = learnable(64, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let init = Network::init(&tiny(), &mut rng);
        let base = TrainConfig {
            dropout: DropoutRates::NONE,
            ..cfg(4, 64, 0)
        };
        let a = fit_network(init.clone(), &t, &TrainConfig { seed: 1, ..base }).unwrap();
        let b = fit_network(init, &t, &TrainConfig { seed: 99, ..base }).unwrap();
        for (x, y) in a.loss_trace.iter().zip(&b.loss_trace) {
            assert!((x - y).abs() < 1e-9);
        }
        for (ta, tb) in a.network.tensors().iter().zip(b.network.tensors()) {
            for (x, y) in ta.iter().zip(tb) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn partial_last_batch_is_used() {
        // 10 rows, batch 4 -> 3 Adam steps per epoch.
        let t = learnable(10, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init = Network::init(&tiny(), &mut rng);
        let c = cfg(1, 4, 2);
        let out = fit_network(init.clone(), &t, &c).unwrap();
        let mut adam = Adam::new(&init, c.adam());
        let mut net = init;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        rng.set_stream(1);
        let mut order: Vec<usize> = (0..10).collect();
        order.shuffle(&mut rng);
        for rows in order.chunks(4) {
            let (x, y) = gather(&t, rows);
            let masks = DropoutMasks::sample(&c.dropout, rows.len(), &tiny(), &mut rng);
            let (_, g) = net.loss_and_gradients(x.view(), y.view(), &masks).unwrap();
            adam.step(&mut net, &g);
        }
        assert_eq!(adam.steps_taken(), 3);
        assert_eq!(net, out.network);
    }

    #[test]
    fn empty_tensor_is_rejected() {
        let t = learnable(0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            fit_network(Network::init(&tiny(), &mut rng), &t, &cfg(1, 4, 1)),
            Err(LstmError::EmptyTensor)
        ));
    }

    #[test]
    fn diverging_training_reports_location() {
        let mut t = learnable(20, 1);
        t.target[[3, 0]] = f64::INFINITY;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = fit_network(Network::init(&tiny(), &mut rng), &t, &cfg(2, 8, 1)).unwrap_err();
        assert!(matches!(err, LstmError::NonFiniteLoss { epoch: 1, .. }), "{err}");
    }
}
