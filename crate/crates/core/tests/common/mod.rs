//! Finite-difference gradient oracle shared by the integration tests and
//! the acceptance harness.
#![allow(dead_code)]

use leafnet::layers::activation::{cross_entropy, relu_backward, relu_forward, softmax_backward, softmax_forward};
use leafnet::layers::conv::{
    conv2d_backward, conv2d_forward, depthwise_backward, depthwise_forward, pointwise_backward,
    pointwise_forward, Padding,
};
use leafnet::layers::dense::{dense_backward, dense_forward};
use leafnet::layers::dropout::{apply_mask, dropout_mask};
use leafnet::layers::norm::{batchnorm_backward, batchnorm_forward_train};
use leafnet::layers::pool::{
    global_avg_pool_backward, global_avg_pool_forward, maxpool2d_backward, maxpool2d_forward,
};
use leafnet::layers::{ArchitectureBuilder, Graph, Op};
use leafnet::tensor::{concat, split};
use leafnet::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// `‖a − b‖ / max(‖a‖ + ‖b‖, FLOOR)`.
/// Norms below this are treated as zero gradients, so noise against an
/// exactly vanishing gradient is not reported as a relative error of one.
pub const FLOOR: f64 = 1e-4;

pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(FLOOR)
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + H;
            let up = f(&probe);
            probe.data_mut()[i] = orig - H;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

/// `Σ w ⊙ y`, whose gradient with respect to `y` is `w`.
pub fn dot(y: &Tensor, w: &Tensor) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

#[derive(Debug, Clone)]
pub struct Check {
    pub layer: &'static str,
    pub instances: usize,
    pub worst: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst <= TOL
    }
}

fn worst(layer: &'static str, instances: usize, mut one: impl FnMut(usize) -> f64) -> Check {
    let worst = (0..instances).map(&mut one).fold(0.0, f64::max);
    Check {
        layer,
        instances,
        worst,
    }
}

fn padding(rng: &mut ChaCha8Rng) -> Padding {
    match rng.gen_range(0..3) {
        0 => Padding::Valid,
        1 => Padding::Same,
        _ => Padding::Explicit(1),
    }
}

pub fn check_conv2d(instances: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    worst("conv2d", instances, |_| {
        let (n, c, f) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
        let (h, w) = (r.gen_range(4..7), r.gen_range(4..7));
        let k = r.gen_range(1..4);
        let stride = r.gen_range(1..3);
        let pad = padding(&mut r);
        let x = uniform(&mut r, &[n, c, h, w], -1.0, 1.0);
        let wt = uniform(&mut r, &[f, c, k, k], -1.0, 1.0);
        let b = uniform(&mut r, &[f], -1.0, 1.0);
        let y = conv2d_forward(&x, &wt, &b, stride, pad).unwrap();
        let g = uniform(&mut r, y.shape(), -1.0, 1.0);
        let (dx, dw, db) = conv2d_backward(&x, &wt, &g, stride, pad).unwrap();
        let nx = numeric_grad(&x, |x| dot(&conv2d_forward(x, &wt, &b, stride, pad).unwrap(), &g));
        let nw = numeric_grad(&wt, |wt| dot(&conv2d_forward(&x, wt, &b, stride, pad).unwrap(), &g));
        let nb = numeric_grad(&b, |b| dot(&conv2d_forward(&x, &wt, b, stride, pad).unwrap(), &g));
        rel_error(dx.data(), &nx)
            .max(rel_error(dw.data(), &nw))
            .max(rel_error(db.data(), &nb))
    })
}

pub fn check_depthwise_separable(instances: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    worst("depthwise_sep_conv", instances, |_| {
        let (n, c, f) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
        let (h, w) = (r.gen_range(4..7), r.gen_range(4..7));
        let k = r.gen_range(1..4);
        let stride = r.gen_range(1..3);
        let pad = padding(&mut r);
        let x = uniform(&mut r, &[n, c, h, w], -1.0, 1.0);
        let dk = uniform(&mut r, &[c, k, k], -1.0, 1.0);
        let pw = uniform(&mut r, &[f, c], -1.0, 1.0);
        let b = uniform(&mut r, &[f], -1.0, 1.0);
        let fwd = |x: &Tensor, dk: &Tensor, pw: &Tensor, b: &Tensor| {
            pointwise_forward(&depthwise_forward(x, dk, stride, pad).unwrap(), pw, b).unwrap()
        };
        let y = fwd(&x, &dk, &pw, &b);
        let g = uniform(&mut r, y.shape(), -1.0, 1.0);
        let z = depthwise_forward(&x, &dk, stride, pad).unwrap();
        let (dz, dpw, db) = pointwise_backward(&z, &pw, &g).unwrap();
        let (dx, ddk) = depthwise_backward(&x, &dk, &dz, stride, pad).unwrap();
        let nx = numeric_grad(&x, |x| dot(&fwd(x, &dk, &pw, &b), &g));
        let nk = numeric_grad(&dk, |dk| dot(&fwd(&x, dk, &pw, &b), &g));
        let np = numeric_grad(&pw, |pw| dot(&fwd(&x, &dk, pw, &b), &g));
        let nb = numeric_grad(&b, |b| dot(&fwd(&x, &dk, &pw, b), &g));
        [
            rel_error(dx.data(), &nx),
            rel_error(ddk.data(), &nk),
            rel_error(dpw.data(), &np),
            rel_error(db.data(), &nb),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    })
}

/// Inputs are a shuffled grid of values 0.05 apart, so no perturbation
/// changes which element wins a window.
pub fn check_maxpool(instances: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    worst("maxpool2d", instances, |_| {
        let (n, c) = (r.gen_range(1..3), r.gen_range(1..3));
        let (h, w) = (r.gen_range(4..8), r.gen_range(4..8));
        let (win, stride) = if r.gen_bool(0.5) { (2, 2) } else { (3, 1) };
        let len = n * c * h * w;
        let mut vals: Vec<f64> = (0..len).map(|i| i as f64 * 0.05).collect();
        vals.shuffle(&mut r);
        let x = Tensor::new(vec![n, c, h, w], vals).unwrap();
        let (y, arg) = maxpool2d_forward(&x, [win, win], [stride, stride]).unwrap();
        let g = uniform(&mut r, y.shape(), -1.0, 1.0);
        let dx = maxpool2d_backward(&g, &arg, x.shape()).unwrap();
        let nx = numeric_grad(&x, |x| {
            dot(&maxpool2d_forward(x, [win, win], [stride, stride]).unwrap().0, &g)
        });
        rel_error(dx.data(), &nx)
    })
}

pub fn check_global_avg_pool(instances: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    worst("global_avg_pool", instances, |_| {
        let shape = [r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..5)];
        let x = uniform(&mut r, &shape, -1.0, 1.0);
        let y = global_avg_pool_forward(&x).unwrap();
        let g = uniform(&mut r, y.shape(), -1.0, 1.0);
        let dx = global_avg_pool_backward(&g, x.shape()).unwrap();
        let nx = numeric_grad(&x, |x| dot(&global_avg_pool_forward(x).unwrap(), &g));
        rel_error(dx.data(), &nx)
    })
}

/// Inputs have variance far above `eps`, which keeps the normalization
/// well conditioned for finite differences.
pub fn check_batchnorm(instances: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    worst("batchnorm", instances, |i| {
        let c = r.gen_range(1..4);
        let shape = if i % 2 == 0 {
            vec![r.gen_range(3..6), c]
        } else {
            vec![r.gen_range(2..4), c, r.gen_range(2..4), r.gen_range(2..4)]
        };
        let x = uniform(&mut r, &shape, -5.0, 5.0);
        let gamma = uniform(&mut r, &[c], 0.5, 1.5);
        let beta = uniform(&mut r, &[c], -1.0, 1.0);
        let eps = 1e-5;
        let (y, cache, _) = batchnorm_forward_train(&x, &gamma, &beta, eps).unwrap();
        let g = uniform(&mut r, y.shape(), -1.0, 1.0);
        let (dx, dg, db) = batchnorm_backward(&g, &gamma, &cache).unwrap();
        let f = |x: &Tensor, gm: &Tensor, bt: &Tensor| {
            dot(&batchnorm_forward_train(x, gm, bt, eps).unwrap().0, &g)
        };
        let nx = numeric_grad(&x, |x| f(x, &gamma, &beta));
        let ng = numeric_grad(&gamma, |gm| f(&x, gm, &beta));
        let nb = numeric_grad(&beta, |bt| f(&x, &gamma, bt));
        rel_error(dx.data(), &nx)
            .max(rel_error(dg.data(), &ng))
            .max(rel_error(db.data(), &nb))
    })
}

pub fn check_dense(instances: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    worst("dense", instances, |_| {
        let (n, di, d) = (r.gen_range(1..5), r.gen_range(1..6), r.gen_range(1..6));
        let x = uniform(&mut r, &[n, di], -1.0, 1.0);
        let wt = uniform(&mut r, &[di, d], -1.0, 1.0);
        let b = uniform(&mut r, &[d], -1.0, 1.0);
        let y = dense_forward(&x, &wt, &b).unwrap();
        let g = uniform(&mut r, y.shape(), -1.0, 1.0);
        let (dx, dw, db) = dense_backward(&x, &wt, &g).unwrap();
        let nx = numeric_grad(&x, |x| dot(&dense_forward(x, &wt, &b).unwrap(), &g));
        let nw = numeric_grad(&wt, |wt| dot(&dense_forward(&x, wt, &b).unwrap(), &g));
        let nb = numeric_grad(&b, |b| dot(&dense_forward(&x, &wt, b).unwrap(), &g));
        rel_error(dx.data(), &nx)
            .max(rel_error(dw.data(), &nw))
            .max(rel_error(db.data(), &nb))
    })
}

/// Inputs keep at least 0.05 away from the kink at zero.
pub fn check_relu(instances: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    worst("relu", instances, |_| {
        let shape = [r.gen_range(1..4), r.gen_range(1..8)];
        let mut x = uniform(&mut r, &shape, 0.05, 1.0);
        for v in x.data_mut() {
            if r.gen_bool(0.5) {
                *v = -*v;
            }
        }
        let g = uniform(&mut r, &shape, -1.0, 1.0);
        let dx = relu_backward(&x, &g).unwrap();
        let nx = numeric_grad(&x, |x| dot(&relu_forward(x), &g));
        rel_error(dx.data(), &nx)
    })
}

pub fn check_softmax(instances: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    worst("softmax", instances, |_| {
        let shape = [r.gen_range(1..4), r.gen_range(2..6)];
        let z = uniform(&mut r, &shape, -3.0, 3.0);
        let y = softmax_forward(&z).unwrap();
        let g = uniform(&mut r, &shape, -1.0, 1.0);
        let dz = softmax_backward(&y, &g).unwrap();
        let nz = numeric_grad(&z, |z| dot(&softmax_forward(z).unwrap(), &g));
        rel_error(dz.data(), &nz)
    })
}

pub fn check_softmax_cross_entropy(instances: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    worst("softmax_cross_entropy", instances, |_| {
        let (n, k) = (r.gen_range(1..5), r.gen_range(2..6));
        let z = uniform(&mut r, &[n, k], -3.0, 3.0);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let (_, dz) = cross_entropy(&softmax_forward(&z).unwrap(), &labels).unwrap();
        let nz = numeric_grad(&z, |z| cross_entropy(&softmax_forward(z).unwrap(), &labels).unwrap().0);
        rel_error(dz.data(), &nz)
    })
}

pub fn check_dropout(instances: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    worst("dropout", instances, |_| {
        let shape = [r.gen_range(1..4), r.gen_range(1..10)];
        let x = uniform(&mut r, &shape, -1.0, 1.0);
        let p = r.gen_range(0.1..0.7);
        let mask = dropout_mask(x.len(), p, &mut r).unwrap();
        let g = uniform(&mut r, &shape, -1.0, 1.0);
        let dx = apply_mask(&g, &mask).unwrap();
        let nx = numeric_grad(&x, |x| dot(&apply_mask(x, &mask).unwrap(), &g));
        rel_error(dx.data(), &nx)
    })
}

pub fn check_concat(instances: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    worst("concat", instances, |_| {
        let n = r.gen_range(1..4);
        let (ca, cb) = (r.gen_range(1..4), r.gen_range(1..4));
        let a = uniform(&mut r, &[n, ca, 2, 2], -1.0, 1.0);
        let b = uniform(&mut r, &[n, cb, 2, 2], -1.0, 1.0);
        let y = concat(&[&a, &b], 1).unwrap();
        let g = uniform(&mut r, y.shape(), -1.0, 1.0);
        let parts = split(&g, 1, &[ca, cb]).unwrap();
        let na = numeric_grad(&a, |a| dot(&concat(&[a, &b], 1).unwrap(), &g));
        let nb = numeric_grad(&b, |b| dot(&concat(&[&a, b], 1).unwrap(), &g));
        rel_error(parts[0].data(), &na).max(rel_error(parts[1].data(), &nb))
    })
}

/// Largest relative error over all parameters of `graph` for a
/// cross-entropy loss on `(x, labels)` fed to input `input`.
pub fn graph_param_error(graph: &mut Graph, input: &str, x: &Tensor, labels: &[usize]) -> f64 {
    let loss = |g: &mut Graph| {
        let p = g.forward(&[(input, x)]).unwrap();
        cross_entropy(&p, labels).unwrap().0
    };
    let probs = graph.forward(&[(input, x)]).unwrap();
    let (_, dz) = cross_entropy(&probs, labels).unwrap();
    let grads = graph.backward_logits(&dz).unwrap();
    let names = graph.param_names();
    let mut worst: f64 = 0.0;
    for (name, analytic) in names.iter().zip(&grads.params) {
        let base = graph.param(name).unwrap().clone();
        let numeric = numeric_grad(&base, |p| {
            graph.set_param(name, p.clone()).unwrap();
            loss(graph)
        });
        graph.set_param(name, base).unwrap();
        worst = worst.max(rel_error(analytic.data(), &numeric));
    }
    worst
}

/// conv → batch norm → ReLU → flatten → dense → softmax, checked on every
/// parameter.
pub fn check_full_graph(seed: u64) -> Check {
    let mut r = rng(seed);
    let mut b = ArchitectureBuilder::new();
    let x = b.input("x", &[2, 5, 5]).unwrap();
    let c = b
        .add(
            "conv",
            Op::Conv2d {
                filters: 3,
                kernel: [3, 3],
                stride: 1,
                padding: Padding::Same,
            },
            &[x],
        )
        .unwrap();
    let n = b.add("bn", Op::batch_norm(), &[c]).unwrap();
    let a = b.add("relu", Op::Relu, &[n]).unwrap();
    let f = b.add("flatten", Op::Flatten, &[a]).unwrap();
    let d = b.add("fc", Op::Dense { units: 4 }, &[f]).unwrap();
    let s = b.add("softmax", Op::Softmax, &[d]).unwrap();
    let mut graph = Graph::new(b.build(s).unwrap(), seed).unwrap();
    let input = uniform(&mut r, &[3, 2, 5, 5], -1.0, 1.0);
    let labels = [0, 2, 3];
    let worst = graph_param_error(&mut graph, "x", &input, &labels);
    Check {
        layer: "full_graph",
        instances: 1,
        worst,
    }
}

/// Every layer check plus the full-graph check.
pub fn gradient_suite(instances: usize, seed: u64) -> Vec<Check> {
    vec![
        check_conv2d(instances, seed),
        check_depthwise_separable(instances, seed + 1),
        check_maxpool(instances, seed + 2),
        check_global_avg_pool(instances, seed + 3),
        check_batchnorm(instances, seed + 4),
        check_dense(instances, seed + 5),
        check_relu(instances, seed + 6),
        check_softmax(instances, seed + 7),
        check_softmax_cross_entropy(instances, seed + 8),
        check_dropout(instances, seed + 9),
        check_concat(instances, seed + 10),
        check_full_graph(seed + 11),
    ]
}

/// Dataset of 1×1 gray images with the given per-class counts.
pub fn counts_dataset(counts: &[usize]) -> leafnet::data::Dataset {
    let names = (0..counts.len()).map(|k| format!("c{k}")).collect();
    let samples = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| {
            (0..n).map(move |_| leafnet::data::Sample {
                image: leafnet::Image::filled(1, 1, 1, k as f64 / 4.0),
                label: k,
                source: None,
            })
        })
        .collect();
    leafnet::data::Dataset::new(names, samples).unwrap()
}
