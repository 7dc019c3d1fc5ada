//! Central finite-difference checks of every layer's backward pass in f64.
//! Shared by the gradient tests and the acceptance suite.
#![allow(dead_code)]

use filter_triage::nn::batchnorm::BatchNorm2d;
use filter_triage::nn::param::Param;
use filter_triage::nn::{softmax_xent, ArchitectureSpec, Layer, LayerSpec, Mode, Network};
use filter_triage::rng::{rng_from, Rng};
use filter_triage::Tensor64;
use rand::{Rng as _, SeedableRng};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const TRIALS: u64 = 20;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Uniform in ±1 but at least `gap` away from zero, so ReLU kinks and
/// max-pool ties stay out of the finite-difference stencil.
pub fn random_tensor(shape: &[usize], gap: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor64 {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor64::new(shape.to_vec(), data).unwrap()
}

pub fn fresh_rng() -> Rng {
    rng_from(99, &[1])
}

/// Projects the layer output onto `r`, giving a scalar loss.
pub fn project(layer: &mut Layer<f64>, x: &Tensor64, r: &Tensor64, mode: Mode) -> f64 {
    let (y, _) = layer.forward(x, mode, &mut fresh_rng()).unwrap();
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

pub fn check_layer(
    make: impl Fn(&mut rand_chacha::ChaCha8Rng) -> Layer<f64>,
    shape: &[usize],
    mode: Mode,
    gap: f64,
) -> f64 {
    let mut worst = 0.0f64;
    for trial in 0..TRIALS {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1000 + trial);
        let mut layer = make(&mut rng);
        let x = random_tensor(shape, gap, &mut rng);
        let (y, cache) = layer.forward(&x, mode, &mut fresh_rng()).unwrap();
        let r = random_tensor(y.shape(), 0.0, &mut rng);
        for (_, p) in layer.params_mut() {
            p.zero_grad();
        }
        let gi = layer.backward(&cache, &r).unwrap();

        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += H;
            let mut xm = x.clone();
            xm.data_mut()[i] -= H;
            let num = (project(&mut layer, &xp, &r, mode) - project(&mut layer, &xm, &r, mode)) / (2.0 * H);
            worst = worst.max(rel_err(gi.data()[i], num));
        }

        let n_params = layer.params().len();
        for pi in 0..n_params {
            let analytic = layer.params()[pi].1.grad.clone();
            for i in 0..analytic.len() {
                let orig = layer.params()[pi].1.value.data()[i];
                layer.params_mut()[pi].1.value.data_mut()[i] = orig + H;
                let fp = project(&mut layer, &x, &r, mode);
                layer.params_mut()[pi].1.value.data_mut()[i] = orig - H;
                let fm = project(&mut layer, &x, &r, mode);
                layer.params_mut()[pi].1.value.data_mut()[i] = orig;
                worst = worst.max(rel_err(analytic.data()[i], (fp - fm) / (2.0 * H)));
            }
        }
    }
    worst
}

pub fn random_param(shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng) -> Param<f64> {
    Param::new(random_tensor(shape, 0.0, rng))
}

pub fn conv2d() -> f64 {
    [(1, 0), (1, 1), (2, 1)]
        .into_iter()
        .map(|(stride, padding)| {
            check_layer(
                |rng| Layer::Conv2d {
                    weight: random_param(&[3, 2, 3, 3], rng),
                    bias: random_param(&[3], rng),
                    stride,
                    padding,
                },
                &[1, 2, 5, 5],
                Mode::Train,
                0.0,
            )
        })
        .fold(0.0, f64::max)
}

pub fn batched_conv2d() -> f64 {
    check_layer(
        |rng| Layer::Conv2d {
            weight: random_param(&[2, 3, 3, 3], rng),
            bias: random_param(&[2], rng),
            stride: 1,
            padding: 1,
        },
        &[3, 3, 4, 4],
        Mode::Train,
        0.0,
    )
}

pub fn batchnorm_train() -> f64 {
    check_layer(
        |rng| {
            let mut bn = BatchNorm2d::new(4);
            bn.gamma = random_param(&[4], rng);
            bn.beta = random_param(&[4], rng);
            Layer::BatchNorm(bn)
        },
        &[2, 4, 3, 3],
        Mode::Train,
        0.0,
    )
}

pub fn batchnorm_eval() -> f64 {
    check_layer(
        |rng| {
            let mut bn = BatchNorm2d::new(3);
            bn.gamma = random_param(&[3], rng);
            bn.beta = random_param(&[3], rng);
            bn.running_mean = vec![0.3, -0.2, 0.1];
            bn.running_var = vec![0.5, 2.0, 1.5];
            Layer::BatchNorm(bn)
        },
        &[2, 3, 2, 2],
        Mode::Eval,
        0.0,
    )
}

pub fn batchnorm_frozen_stats() -> f64 {
    check_layer(
        |rng| {
            let mut bn = BatchNorm2d::new(2);
            bn.gamma = random_param(&[2], rng);
            bn.running_var = vec![0.7, 1.3];
            bn.stats_frozen = true;
            Layer::BatchNorm(bn)
        },
        &[3, 2, 2, 3],
        Mode::Train,
        0.0,
    )
}

pub fn relu() -> f64 {
    check_layer(|_| Layer::Relu, &[2, 3, 4, 4], Mode::Train, 1e-3)
}

pub fn maxpool() -> f64 {
    [(2, 2, 0), (3, 2, 1), (3, 1, 0)]
        .into_iter()
        .map(|(kernel, stride, padding)| {
            check_layer(
                |_| Layer::MaxPool {
                    kernel,
                    stride,
                    padding,
                },
                &[2, 2, 6, 6],
                Mode::Train,
                1e-3,
            )
        })
        .fold(0.0, f64::max)
}

pub fn dense() -> f64 {
    check_layer(
        |rng| Layer::Dense {
            weight: random_param(&[5, 12], rng),
            bias: random_param(&[5], rng),
        },
        &[3, 3, 2, 2],
        Mode::Train,
        0.0,
    )
}

pub fn dropout() -> f64 {
    check_layer(|_| Layer::Dropout { p: 0.5 }, &[4, 20], Mode::Train, 0.0)
}

pub fn global_avg_pool() -> f64 {
    check_layer(|_| Layer::GlobalAvgPool, &[2, 3, 3, 4], Mode::Train, 0.0)
}

pub fn softmax_output() -> f64 {
    check_layer(|_| Layer::SoftmaxOutput, &[2, 7], Mode::Train, 0.0)
}

pub fn softmax_xent_loss() -> f64 {
    let mut worst = 0.0f64;
    for trial in 0..TRIALS {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7 + trial);
        let logits = Tensor64::new(vec![4, 10], (0..40).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..10)).collect();
        let (_, grad) = softmax_xent(&logits, &labels).unwrap();
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[i] += H;
            let mut m = logits.clone();
            m.data_mut()[i] -= H;
            let num = (softmax_xent(&p, &labels).unwrap().0 - softmax_xent(&m, &labels).unwrap().0) / (2.0 * H);
            worst = worst.max(rel_err(grad.data()[i], num));
        }
    }
    worst
}
pub fn small_net() -> ArchitectureSpec {
    ArchitectureSpec {
        name: "grad-net".into(),
        num_classes: 3,
        input_shape: [2, 8, 8],
        layers: vec![
            LayerSpec::Conv2d {
                out_channels: 3,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Batchnorm,
            LayerSpec::Relu,
            LayerSpec::Maxpool {
                kernel: 2,
                stride: 2,
                padding: 0,
            },
            LayerSpec::Conv2d {
                out_channels: 4,
                kernel: 3,
                stride: 1,
                padding: 0,
            },
            LayerSpec::Batchnorm,
            LayerSpec::Relu,
            LayerSpec::Dense { out_features: 6 },
            LayerSpec::Relu,
            LayerSpec::Dropout { p: 0.3 },
            LayerSpec::Dense { out_features: 3 },
            LayerSpec::SoftmaxOutput,
        ],
    }
}

pub fn net_loss(net: &mut Network<f64>, x: &Tensor64, labels: &[usize]) -> f64 {
    let logits = net.forward_train(x, &mut fresh_rng()).unwrap();
    softmax_xent(&logits, labels).unwrap().0
}

pub fn whole_network() -> f64 {
    let mut worst = 0.0f64;
    for trial in 0..4 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(500 + trial);
        let mut net = Network::<f64>::new(small_net(), trial).unwrap();
        // Zero biases can park a pre-activation exactly on a ReLU kink.
        for p in net.params_mut() {
            if p.value.ndim() == 1 {
                p.value = random_tensor(p.value.shape(), 0.1, &mut rng);
            }
        }
        let x = random_tensor(&[3, 2, 8, 8], 0.0, &mut rng);
        let labels = [0, 2, 1];
        net.zero_grad();
        let logits = net.forward_train(&x, &mut fresh_rng()).unwrap();
        let (_, g) = softmax_xent(&logits, &labels).unwrap();
        net.backward(&g).unwrap();
        let grads: Vec<Vec<f64>> = net.params_mut().iter().map(|p| p.grad.data().to_vec()).collect();
        for (pi, analytic) in grads.iter().enumerate() {
            // A strided subset keeps the test fast on the wide dense layer.
            for i in (0..analytic.len()).step_by(3) {
                let orig = net.params_mut()[pi].value.data()[i];
                net.params_mut()[pi].value.data_mut()[i] = orig + H;
                let fp = net_loss(&mut net, &x, &labels);
                net.params_mut()[pi].value.data_mut()[i] = orig - H;
                let fm = net_loss(&mut net, &x, &labels);
                net.params_mut()[pi].value.data_mut()[i] = orig;
                let num = (fp - fm) / (2.0 * H);
                worst = worst.max(rel_err(analytic[i], num));
            }
        }
    }
    worst
}

/// Every layer kind with its worst relative error.
pub fn suite() -> Vec<(&'static str, f64)> {
    vec![
        ("conv2d", conv2d().max(batched_conv2d())),
        (
            "batchnorm",
            batchnorm_train().max(batchnorm_eval()).max(batchnorm_frozen_stats()),
        ),
        ("relu", relu()),
        ("maxpool", maxpool()),
        ("dense", dense()),
        ("dropout", dropout()),
        ("global_avg_pool", global_avg_pool()),
        ("softmax_output", softmax_output()),
        ("softmax_xent", softmax_xent_loss()),
        ("network", whole_network()),
    ]
}
