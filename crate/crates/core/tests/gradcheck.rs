//! Analytic gradients against central finite differences.

use fairmoe_core::moe::{
    moe_forward, selection_probabilities_tensor, GroupStats, MoEConvLayer, MoeLayerSpec, RouteContext, RouteMode,
};
use fairmoe_core::objectives::{estimate_joint, mutual_information};
use fairmoe_core::tensor::{Tensor, LOG_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs() + 1e-12)
}

fn leaf(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Entries with magnitude in `[scale / 2, scale)` and random sign.
fn floored(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Vec<f64> {
    let n = shape.iter().product();
    (0..n)
        .map(|_| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * rng.random_range(scale / 2.0..scale)
        })
        .collect()
}

/// Worst relative error over every entry of every leaf.
fn check(leaves: &[Tensor], loss: impl Fn() -> Tensor) -> f64 {
    check_with_floor(leaves, loss, 0.0)
}

/// As `check`, but entries whose absolute disagreement is below `abs_floor`
/// are not counted.
fn check_with_floor(leaves: &[Tensor], loss: impl Fn() -> Tensor, abs_floor: f64) -> f64 {
    leaves.iter().for_each(Tensor::zero_grad);
    loss().backward().unwrap();
    let mut worst: f64 = 0.0;
    for t in leaves {
        let analytic = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
        for i in 0..t.numel() {
            let orig = t.data()[i];
            t.data_mut()[i] = orig + STEP;
            let up = loss().item();
            t.data_mut()[i] = orig - STEP;
            let down = loss().item();
            t.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            if (analytic[i] - numeric).abs() > abs_floor {
                worst = worst.max(rel_err(analytic[i], numeric));
            }
        }
    }
    worst
}

#[test]
fn conv_relu_dense_cross_entropy() {
    for seed in 0..24u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..4);
        let c = rng.random_range(1..3);
        let h = rng.random_range(4..7);
        let o = rng.random_range(2..4);
        let k = rng.random_range(2..4);
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..2);
        let classes = 3;
        let x = leaf(&mut rng, &[n, c, h, h], 1.0);
        let kern = leaf(&mut rng, &[o, c, k, k], 0.8);
        let bias = leaf(&mut rng, &[o], 0.3);
        let w = leaf(&mut rng, &[o, classes], 0.8);
        let b = leaf(&mut rng, &[classes], 0.3);
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let loss = || {
            x.conv2d(&kern, &bias, stride, pad)
                .unwrap()
                .relu()
                .global_avg_pool()
                .unwrap()
                .dense(&w, &b)
                .unwrap()
                .cross_entropy(&targets)
                .unwrap()
        };
        let worst = check(&[x.clone(), kern.clone(), bias.clone(), w.clone(), b.clone()], loss);
        assert!(worst < TOL, "seed {seed}: relative error {worst}");
    }
}

#[test]
fn softmax_log_reshape_matmul_chain() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = leaf(&mut rng, &[3, 4], 1.0);
        let w = leaf(&mut rng, &[4, 5], 0.8);
        let y = leaf(&mut rng, &[5, 3], 2.0);
        let c = Tensor::new(&[5], (1..=5).map(f64::from).collect()).unwrap();
        let loss = || {
            let s = x.matmul(&w).unwrap().softmax(1).unwrap();
            let t = s.reshape(&[5, 3]).unwrap().scale(3.0).mul(&y).unwrap().softmax(0).unwrap();
            let weighted = s.sum_axis(0).unwrap().mul(&c).unwrap().sum();
            t.log(LOG_EPS).scale(-1.0).mean().add(&weighted).unwrap()
        };
        let worst = check(&[x.clone(), w.clone(), y.clone()], loss);
        assert!(worst < TOL, "seed {seed}: relative error {worst}");
    }
}

#[test]
fn negative_mutual_information_wrt_router_logits() {
    for seed in 0..24u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let n = rng.random_range(4..9);
        let m = rng.random_range(2..4);
        let logits = leaf(&mut rng, &[n, m], 2.0);
        let mut groups: Vec<usize> = (0..n).map(|i| i % m).collect();
        groups.swap(0, n - 1);
        let sizes = (0..m).map(|_| rng.random_range(10..200)).collect();
        let stats = GroupStats::new(sizes).unwrap();
        let loss = || {
            let s = logits.softmax(1).unwrap();
            let p = selection_probabilities_tensor(&s, &stats).unwrap();
            let j = estimate_joint(&p, &groups, &stats).unwrap();
            mutual_information(&j, LOG_EPS).unwrap().scale(-1.0)
        };
        let worst = check(std::slice::from_ref(&logits), loss);
        assert!(worst < TOL, "seed {seed}: relative error {worst}");
    }
}

#[test]
fn moe_layer_hard_and_soft_routing() {
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let spec = MoeLayerSpec {
            layer_index: 1,
            in_channels: 2,
            out_channels: 3,
            kernel_size: 3,
            stride: 2,
            padding: 1,
            experts: 2,
            router_width: 2,
        };
        let layer = MoEConvLayer::new(spec, &mut rng).unwrap();
        // break the shared-init symmetry so experts differ
        for e in layer.experts() {
            for v in e.kernel.data_mut().iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        for v in layer.router().dense_weight.data_mut().iter_mut() {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            *v = sign * rng.random_range(0.5..1.0);
        }
        let x = Tensor::new(&[2, 2, 4, 4], floored(&mut rng, &[2, 2, 4, 4], 1.0)).unwrap();
        let head = Tensor::param(&[3, 2], floored(&mut rng, &[3, 2], 1.0)).unwrap();
        let hb = leaf(&mut rng, &[2], 0.2);
        let ids = [0, 1];
        let forced = [1, 0];
        let stats = GroupStats::new(vec![30, 50]).unwrap();
        let mut leaves = vec![head.clone(), hb.clone()];
        for e in layer.experts() {
            leaves.push(e.kernel.clone());
            leaves.push(e.bias.clone());
        }
        let r = layer.router();
        leaves.extend([r.conv_weight.clone(), r.conv_bias.clone(), r.dense_weight.clone(), r.dense_bias.clone()]);
        for mode in [RouteMode::Forced, RouteMode::SoftMixture] {
            let loss = || {
                let ctx = RouteContext { mode, seed, sample_ids: &ids, labels: Some(&forced) };
                let out = moe_forward(&x, &layer, &stats, &ctx).unwrap();
                out.output
                    .relu()
                    .global_avg_pool()
                    .unwrap()
                    .dense(&head, &hb)
                    .unwrap()
                    .cross_entropy(&[0, 1])
                    .unwrap()
            };
            // expert kernels reached by a single sample can have gradients near
            // the 1e-11 roundoff floor of the difference quotient
            let worst = check_with_floor(&leaves, loss, 1e-9);
            assert!(worst < TOL, "seed {seed} {mode:?}: relative error {worst}");
        }
    }
}
