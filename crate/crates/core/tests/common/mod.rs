//! Helpers shared by the integration tests: naive-loop oracles, central
//! finite-difference gradient checks and small fixtures.
#![allow(dead_code)]

use facecnn::network::{build_cnn, fused_logit_grad, Layer, MIN_INPUT_SIZE};
use facecnn::ops;
use facecnn::tensor::Scalar;
use facecnn::training::cross_entropy;
use facecnn::{Model, Tensor};
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;

pub fn rng(seed: u64) -> Pcg32 {
    Pcg32::seed_from_u64(seed)
}

pub fn uniform<T: Scalar>(rng: &mut Pcg32, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(lo..hi)))
}

// ---------------------------------------------------------------- oracles

pub fn naive_matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    Tensor::from_fn(&[m, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        let mut acc = T::zero();
        for t in 0..k {
            acc += a.at(&[i, t]) * b.at(&[t, j]);
        }
        acc
    })
}

pub fn naive_conv<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let &[n, c, h, w] = x.shape() else { panic!("rank") };
    let o = k.shape()[0];
    let (ho, wo) = (h - 2, w - 2);
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    for s in 0..n {
        for f in 0..o {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = bias.at(&[f]);
                    for ch in 0..c {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                acc += k.at(&[f, ch, dy, dx]) * x.at(&[s, ch, y + dy, xx + dx]);
                            }
                        }
                    }
                    let off = out.offset(&[s, f, y, xx]);
                    out.data_mut()[off] = acc;
                }
            }
        }
    }
    out
}

/// Max over each 2×2 window; the first maximum in row-major scan wins.
pub fn naive_maxpool<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let &[n, c, h, w] = x.shape() else { panic!("rank") };
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = Vec::new();
    for s in 0..n {
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut best = (T::neg_infinity(), 0);
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = [s, ch, 2 * y + dy, 2 * xx + dx];
                            let v = x.at(&idx);
                            if v > best.0 {
                                best = (v, x.offset(&idx));
                            }
                        }
                    }
                    let off = out.offset(&[s, ch, y, xx]);
                    out.data_mut()[off] = best.0;
                    arg.push(best.1);
                }
            }
        }
    }
    (out, arg)
}

pub fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

/// Largest absolute deviation from the naive oracles over `instances`
/// random problems each, as `(matmul, conv2d_valid, maxpool2)`.
pub fn oracle_suite(instances: usize, seed: u64) -> (f64, f64, f64) {
    let mut r = rng(seed);
    let (mut mm, mut cv, mut mp) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..instances {
        let (m, k, n) = (r.random_range(1..17), r.random_range(1..17), r.random_range(1..17));
        let a = uniform::<f32>(&mut r, &[m, k], -1.0, 1.0);
        let b = uniform::<f32>(&mut r, &[k, n], -1.0, 1.0);
        mm = mm.max(max_abs_diff(&ops::matmul(&a, &b).unwrap(), &naive_matmul(&a, &b)));

        let (bn, c, o) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..6));
        let (h, w) = (r.random_range(3..13), r.random_range(3..13));
        let x = uniform::<f32>(&mut r, &[bn, c, h, w], -1.0, 1.0);
        let kk = uniform::<f32>(&mut r, &[o, c, 3, 3], -1.0, 1.0);
        let bias = uniform::<f32>(&mut r, &[o], -1.0, 1.0);
        let got = ops::conv2d_valid(&x, &kk, &bias).unwrap();
        cv = cv.max(max_abs_diff(&got, &naive_conv(&x, &kk, &bias)));

        let (h, w) = (r.random_range(2..12), r.random_range(2..12));
        // Coarse values so that ties occur and the scan-order rule is exercised.
        let x = Tensor::<f32>::from_fn(&[bn, c, h, w], |_| r.random_range(0..4) as f32);
        let (got, mask) = ops::maxpool2(&x).unwrap();
        let (want, arg) = naive_maxpool(&x);
        assert_eq!(mask.argmax(), arg.as_slice(), "maxpool2 tie rule");
        mp = mp.max(max_abs_diff(&got, &want));
    }
    (mm, cv, mp)
}

// ------------------------------------------------------ gradient checking

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_INSTANCES: usize = 20;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-10 {
        return 0.0;
    }
    (analytic - numeric).abs() / denom
}

fn weighted_sum(y: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Central difference of `f` at every coordinate of `x`, compared with
/// `grad`. Returns the largest relative error.
fn fd_all(x: &Tensor<f64>, grad: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= FD_STEP;
        let numeric = (f(&xp) - f(&xm)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(grad.data()[i], numeric));
    }
    worst
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub name: &'static str,
    pub max_rel: f64,
    pub instances: usize,
}

pub fn check_conv_grad(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..GRAD_INSTANCES {
        let (n, c, o) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
        let (h, w) = (r.random_range(3..8), r.random_range(3..8));
        let x = uniform::<f64>(&mut r, &[n, c, h, w], -1.0, 1.0);
        let k = uniform::<f64>(&mut r, &[o, c, 3, 3], -1.0, 1.0);
        let b = uniform::<f64>(&mut r, &[o], -1.0, 1.0);
        let g = uniform::<f64>(&mut r, &[n, o, h - 2, w - 2], -1.0, 1.0);
        let (gx, gk, gb) = ops::conv2d_valid_backward(&x, &k, &g).unwrap();
        let loss = |x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>| {
            weighted_sum(&ops::conv2d_valid(x, k, b).unwrap(), &g)
        };
        worst = worst.max(fd_all(&x, &gx, |v| loss(v, &k, &b)));
        worst = worst.max(fd_all(&k, &gk, |v| loss(&x, v, &b)));
        worst = worst.max(fd_all(&b, &gb, |v| loss(&x, &k, v)));
    }
    GradCheck {
        name: "conv2d_valid",
        max_rel: worst,
        instances: GRAD_INSTANCES,
    }
}

pub fn check_maxpool_grad(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..GRAD_INSTANCES {
        let (n, c) = (r.random_range(1..3), r.random_range(1..4));
        let (h, w) = (r.random_range(2..9), r.random_range(2..9));
        // Distinct values at least 1e-3 apart, so a step of 1e-5 cannot
        // change which element wins a window.
        let len = n * c * h * w;
        let mut levels: Vec<usize> = (0..len).collect();
        rand::seq::SliceRandom::shuffle(levels.as_mut_slice(), &mut r);
        let x = Tensor::new(&[n, c, h, w], levels.iter().map(|&l| l as f64 * 1e-3).collect()).unwrap();
        let (_, mask) = ops::maxpool2(&x).unwrap();
        let g = uniform::<f64>(&mut r, mask.output_shape(), -1.0, 1.0);
        let gx = ops::maxpool2_backward(&mask, &g).unwrap();
        worst = worst.max(fd_all(&x, &gx, |v| weighted_sum(&ops::maxpool2(v).unwrap().0, &g)));
    }
    GradCheck {
        name: "maxpool2",
        max_rel: worst,
        instances: GRAD_INSTANCES,
    }
}

pub fn check_relu_grad(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..GRAD_INSTANCES {
        let shape = [r.random_range(1..3), r.random_range(1..4), r.random_range(1..6), r.random_range(1..6)];
        // Keep inputs away from the kink at zero.
        let x = Tensor::<f64>::from_fn(&shape, |_| {
            let mag = r.random_range(1e-3..1.0);
            if r.random::<bool>() {
                mag
            } else {
                -mag
            }
        });
        let g = uniform::<f64>(&mut r, &shape, -1.0, 1.0);
        let gx = ops::relu_backward(&x, &g).unwrap();
        worst = worst.max(fd_all(&x, &gx, |v| weighted_sum(&ops::relu(v), &g)));
    }
    GradCheck {
        name: "relu",
        max_rel: worst,
        instances: GRAD_INSTANCES,
    }
}

pub fn check_softmax_ce_grad(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..GRAD_INSTANCES {
        let n = r.random_range(1..6);
        let z = uniform::<f64>(&mut r, &[n, 2], -5.0, 5.0);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        let g = fused_logit_grad(&ops::softmax2(&z).unwrap(), &labels).unwrap();
        worst = worst.max(fd_all(&z, &g, |v| {
            cross_entropy(&ops::softmax2(v).unwrap(), &labels).unwrap()
        }));
    }
    GradCheck {
        name: "softmax2+cross_entropy",
        max_rel: worst,
        instances: GRAD_INSTANCES,
    }
}

/// Backward through a dense layer: gradient of `Σ w ⊙ logits` with respect
/// to the inputs of both dense layers of a small network.
pub fn check_dense_grad(seed: u64) -> GradCheck {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for inst in 0..GRAD_INSTANCES {
        let model = build_cnn::<f64>(MIN_INPUT_SIZE, seed.wrapping_add(inst as u64)).unwrap();
        let dense: Vec<usize> = model
            .layers()
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Dense { .. }))
            .map(|(i, _)| i)
            .collect();
        let x = uniform::<f64>(&mut r, &[2, 3, MIN_INPUT_SIZE, MIN_INPUT_SIZE], 0.0, 1.0);
        let (_, cache) = model.forward(&x).unwrap();
        let w = uniform::<f64>(&mut r, &[2, 2], -1.0, 1.0);
        for &layer in &dense {
            let a = cache.layer_input(layer).clone();
            let ga = model.input_grad(&cache, w.clone(), layer).unwrap();
            let base = pattern_of(&model, layer, &a);
            let mut local = 0.0f64;
            for i in 0..a.len() {
                let mut ap = a.clone();
                ap.data_mut()[i] += FD_STEP;
                let mut am = a.clone();
                am.data_mut()[i] -= FD_STEP;
                if pattern_of(&model, layer, &ap) != base || pattern_of(&model, layer, &am) != base {
                    continue;
                }
                let lp = weighted_sum(&model.logits_from(layer, &ap).unwrap(), &w);
                let lm = weighted_sum(&model.logits_from(layer, &am).unwrap(), &w);
                local = local.max(rel_err(ga.data()[i], (lp - lm) / (2.0 * FD_STEP)));
            }
            worst = worst.max(local);
        }
    }
    GradCheck {
        name: "dense",
        max_rel: worst,
        instances: GRAD_INSTANCES,
    }
}

/// Signs of every ReLU input from `layer` onwards; used to reject finite
/// differences that straddle a kink.
fn pattern_of(model: &Model<f64>, layer: usize, a: &Tensor<f64>) -> Vec<bool> {
    let mut x = a.clone();
    let mut signs = Vec::new();
    for i in layer..model.layers().len() - 1 {
        if matches!(model.layers()[i], Layer::Relu { .. }) {
            signs.extend(x.data().iter().map(|&v| v > 0.0));
        }
        x = apply_layer(&model.layers()[i], &x);
    }
    signs
}

fn apply_layer(layer: &Layer<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    match layer {
        Layer::Conv { kernels, bias } => ops::conv2d_valid(x, kernels, bias).unwrap(),
        Layer::Relu { .. } => ops::relu(x),
        Layer::MaxPool2 { .. } => ops::maxpool2(x).unwrap().0,
        Layer::Flatten { features, .. } => x.clone().reshape(&[x.shape()[0], *features]).unwrap(),
        Layer::Dense { weights, bias } => {
            let mut y = ops::matmul(x, weights).unwrap();
            let out = bias.len();
            for row in y.data_mut().chunks_mut(out) {
                for (v, b) in row.iter_mut().zip(bias.data()) {
                    *v += b;
                }
            }
            y
        }
        Layer::Softmax => ops::softmax2(x).unwrap(),
    }
}

/// ReLU signs and pooling winners of a whole forward pass.
fn activation_pattern(model: &Model<f64>, x: &Tensor<f64>) -> (Vec<bool>, Vec<usize>) {
    let (_, cache) = model.forward(x).unwrap();
    let mut signs = Vec::new();
    let mut winners = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        match layer {
            Layer::Relu { .. } => signs.extend(cache.layer_input(i).data().iter().map(|&v| v > 0.0)),
            Layer::MaxPool2 { .. } => winners.extend_from_slice(cache.pool_mask(i).unwrap().argmax()),
            _ => {}
        }
    }
    (signs, winners)
}

/// Full network at the smallest input size: mean cross-entropy gradients
/// for every parameter tensor and the input, on sampled coordinates.
/// Perturbations that flip a ReLU sign or a pooling winner are skipped.
pub fn check_network_grad(seed: u64, coords_per_tensor: usize) -> (GradCheck, usize) {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut rejected = 0;
    let s = MIN_INPUT_SIZE;
    for inst in 0..GRAD_INSTANCES {
        let model = build_cnn::<f64>(s, seed.wrapping_add(1000 + inst as u64)).unwrap();
        let x = uniform::<f64>(&mut r, &[2, 3, s, s], 0.0, 1.0);
        let labels = vec![r.random_range(0..2), r.random_range(0..2)];
        let (probs, cache) = model.forward(&x).unwrap();
        let grads = model.backward(&cache, &labels).unwrap();
        let dlogits = fused_logit_grad(&probs, &labels).unwrap();
        let gx = model.input_grad(&cache, dlogits, 0).unwrap();
        let base = activation_pattern(&model, &x);
        let loss = |m: &Model<f64>, x: &Tensor<f64>| cross_entropy(&m.forward(x).unwrap().0, &labels).unwrap();

        let n_params = model.params().len();
        for t in 0..=n_params {
            let len = if t < n_params { model.params()[t].len() } else { x.len() };
            for _ in 0..coords_per_tensor.min(len) {
                let i = r.random_range(0..len);
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    let mut xx = x.clone();
                    if t < n_params {
                        m.params_mut()[t].data_mut()[i] += delta;
                    } else {
                        xx.data_mut()[i] += delta;
                    }
                    let pat = activation_pattern(&m, &xx);
                    (loss(&m, &xx), pat)
                };
                let (lp, pp) = eval(FD_STEP);
                let (lm, pm) = eval(-FD_STEP);
                if pp != base || pm != base {
                    rejected += 1;
                    continue;
                }
                let analytic = if t < n_params {
                    grads.tensors[t].data()[i]
                } else {
                    gx.data()[i]
                };
                worst = worst.max(rel_err(analytic, (lp - lm) / (2.0 * FD_STEP)));
            }
        }
    }
    (
        GradCheck {
            name: "network (22x22)",
            max_rel: worst,
            instances: GRAD_INSTANCES,
        },
        rejected,
    )
}

pub fn gradient_suite(seed: u64) -> Vec<GradCheck> {
    vec![
        check_conv_grad(seed),
        check_maxpool_grad(seed + 1),
        check_relu_grad(seed + 2),
        check_softmax_ce_grad(seed + 3),
        check_dense_grad(seed + 4),
        check_network_grad(seed + 5, 12).0,
    ]
}

// ------------------------------------------------------------ softmax

/// Largest `|Σp − 1|` over `rows` random logit rows with magnitudes up to
/// 1e4, and whether every probability was finite.
pub fn softmax_normalization(rows: usize, seed: u64) -> (f64, bool) {
    let mut r = rng(seed);
    let z = Tensor::<f32>::from_fn(&[rows, 2], |_| {
        let mag = 10f64.powf(r.random_range(-2.0..4.0));
        (r.random_range(-1.0..1.0) * mag) as f32
    });
    let p = ops::softmax2(&z).unwrap();
    let finite = p.all_finite();
    let worst = p
        .data()
        .chunks(2)
        .map(|row| (row[0] as f64 + row[1] as f64 - 1.0).abs())
        .fold(0.0, f64::max);
    (worst, finite)
}
