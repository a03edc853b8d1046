//! Central-difference verification of the hand-written backward passes.
//!
//! Each check perturbs sampled coordinates (parameters or inputs) by
//! ±1e-4 in `f64` and compares `(f(x+h) - f(x-h)) / 2h` to the analytic
//! gradient. A coordinate whose perturbation flips any ReLU or changes a
//! pooling argmax sits on a kink; it is skipped and counted.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    batchnorm_backward, batchnorm_forward, conv3d_backward, conv3d_forward, maxpool2_backward,
    maxpool2_forward, relu_backward, relu_forward, upconv2_backward, upconv2_forward, BatchNorm,
    Conv3d, UpConv,
};
use super::{bce_loss, Mode, ParamKind, Tensor5, UNetConfig, UNetModel};

pub const STEP: f64 = 1e-4;

/// Linear maps: tolerance for conv and up-conv checks.
pub const LINEAR_TOLERANCE: f64 = 1e-7;
pub const NONLINEAR_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
}

pub struct Evaluation {
    pub loss: f64,
    pub signature: u64,
    /// Gradient per coordinate group; empty when not requested.
    pub grads: Vec<Vec<f64>>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compare analytic and numeric gradients on up to `samples` coordinates of
/// `groups`. `eval(groups, want_grads)` computes the scalar loss.
pub fn check<F>(groups: &mut [Vec<f64>], samples: usize, seed: u64, eval: F) -> GradCheckReport
where
    F: Fn(&[Vec<f64>], bool) -> Evaluation,
{
    let base = eval(groups, true);
    let total: usize = groups.iter().map(Vec::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if samples >= total {
        (0..total).collect()
    } else {
        let mut p = sample(&mut rng, total, samples).into_vec();
        p.sort_unstable();
        p
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
    };
    for flat in picks {
        let (g, i) = locate(groups, flat);
        let orig = groups[g][i];
        groups[g][i] = orig + STEP;
        let plus = eval(groups, false);
        groups[g][i] = orig - STEP;
        let minus = eval(groups, false);
        groups[g][i] = orig;
        if plus.signature != base.signature || minus.signature != base.signature {
            report.excluded += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * STEP);
        let err = relative_error(base.grads[g][i], numeric);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    report
}

fn locate(groups: &[Vec<f64>], mut flat: usize) -> (usize, usize) {
    for (g, v) in groups.iter().enumerate() {
        if flat < v.len() {
            return (g, flat);
        }
        flat -= v.len();
    }
    panic!("coordinate out of range");
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn tensor(rng: &mut ChaCha8Rng, c: usize, dims: [usize; 3]) -> Tensor5<f64> {
    let n = c * dims.iter().product::<usize>();
    Tensor5::from_vec(1, c, dims, uniform(rng, n, -1.0, 1.0)).expect("valid shape")
}

/// Linear layers are checked on strictly positive data so that no gradient
/// is a near-cancelling sum; central differences are then exact to rounding.
fn positive_tensor(rng: &mut ChaCha8Rng, c: usize, dims: [usize; 3]) -> Tensor5<f64> {
    let n = c * dims.iter().product::<usize>();
    Tensor5::from_vec(1, c, dims, uniform(rng, n, 0.5, 1.5)).expect("valid shape")
}

fn weighted_sum(y: &Tensor5<f64>, coeffs: &[f64]) -> f64 {
    y.data().iter().zip(coeffs).map(|(a, b)| a * b).sum()
}

fn with_data(t: &Tensor5<f64>, data: &[f64]) -> Tensor5<f64> {
    Tensor5::from_vec(t.batch(), t.channels(), t.dims(), data.to_vec()).expect("same shape")
}

fn relu_signature(t: &Tensor5<f64>) -> u64 {
    t.data().iter().enumerate().fold(0xcbf2_9ce4_8422_2325u64, |h, (i, &v)| {
        (h ^ ((v > 0.0) as u64).wrapping_add(i as u64)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// One entry of [`run_suite`].
#[derive(Clone, Debug)]
pub struct LayerCheck {
    pub name: &'static str,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_error <= self.tolerance
    }
}

pub fn check_conv3d(ksize: usize, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ic, oc, dims) = (2, 3, [5, 4, 3]);
    let x = positive_tensor(&mut rng, ic, dims);
    let conv = Conv3d::<f64>::zeros(ic, oc, ksize);
    let coeffs = uniform(&mut rng, oc * 60, 0.5, 1.5);
    let mut groups = vec![
        x.data().to_vec(),
        uniform(&mut rng, conv.weight.len(), 0.5, 1.5),
        uniform(&mut rng, oc, 0.5, 1.5),
    ];
    check(&mut groups, 400, seed, |g, want| {
        let xi = with_data(&x, &g[0]);
        let mut conv = conv.clone();
        conv.weight.clone_from(&g[1]);
        conv.bias.clone_from(&g[2]);
        let y = conv3d_forward(&xi, &conv).expect("shapes agree");
        let grads = if want {
            let go = with_data(&y, &coeffs);
            let cg = conv3d_backward(&xi, &conv, &go);
            vec![cg.input.into_data(), cg.weight, cg.bias]
        } else {
            Vec::new()
        };
        Evaluation {
            loss: weighted_sum(&y, &coeffs),
            signature: 0,
            grads,
        }
    })
}

pub fn check_upconv(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ic, oc, dims) = (3, 2, [3, 2, 2]);
    let x = positive_tensor(&mut rng, ic, dims);
    let up = UpConv::<f64>::zeros(ic, oc);
    let coeffs = uniform(&mut rng, oc * 96, 0.5, 1.5);
    let mut groups = vec![
        x.data().to_vec(),
        uniform(&mut rng, up.weight.len(), 0.5, 1.5),
        uniform(&mut rng, oc, 0.5, 1.5),
    ];
    check(&mut groups, 400, seed, |g, want| {
        let xi = with_data(&x, &g[0]);
        let mut up = up.clone();
        up.weight.clone_from(&g[1]);
        up.bias.clone_from(&g[2]);
        let y = upconv2_forward(&xi, &up).expect("shapes agree");
        let grads = if want {
            let cg = upconv2_backward(&xi, &up, &with_data(&y, &coeffs));
            vec![cg.input.into_data(), cg.weight, cg.bias]
        } else {
            Vec::new()
        };
        Evaluation {
            loss: weighted_sum(&y, &coeffs),
            signature: 0,
            grads,
        }
    })
}

pub fn check_maxpool(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = tensor(&mut rng, 2, [4, 4, 2]);
    let coeffs = uniform(&mut rng, x.data().len() / 8, -1.0, 1.0);
    let mut groups = vec![x.data().to_vec()];
    check(&mut groups, 400, seed, |g, want| {
        let xi = with_data(&x, &g[0]);
        let (y, idx) = maxpool2_forward(&xi).expect("even dims");
        let signature = idx.argmax.iter().fold(0u64, |h, &i| h.wrapping_mul(31).wrapping_add(i as u64));
        let grads = if want {
            vec![maxpool2_backward(&idx, &with_data(&y, &coeffs)).into_data()]
        } else {
            Vec::new()
        };
        Evaluation {
            loss: weighted_sum(&y, &coeffs),
            signature,
            grads,
        }
    })
}

pub fn check_relu(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = tensor(&mut rng, 2, [3, 3, 3]);
    let coeffs = uniform(&mut rng, 54, -1.0, 1.0);
    let mut groups = vec![x.data().to_vec()];
    check(&mut groups, 400, seed, |g, want| {
        let xi = with_data(&x, &g[0]);
        let y = relu_forward(&xi);
        let grads = if want {
            vec![relu_backward(&y, &with_data(&y, &coeffs)).into_data()]
        } else {
            Vec::new()
        };
        Evaluation {
            loss: weighted_sum(&y, &coeffs),
            signature: relu_signature(&xi),
            grads,
        }
    })
}

pub fn check_batchnorm(mode: Mode, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ch = 3;
    let x = tensor(&mut rng, ch, [4, 3, 3]).map(|v| 2.0 * v + 0.5);
    let coeffs = uniform(&mut rng, ch * 36, -1.0, 1.0);
    let mut bn = BatchNorm::<f64>::new(ch);
    bn.running_mean = uniform(&mut rng, ch, -0.5, 0.5);
    bn.running_var = uniform(&mut rng, ch, 0.5, 2.0);
    let mut groups = vec![
        x.data().to_vec(),
        uniform(&mut rng, ch, 0.5, 1.5),
        uniform(&mut rng, ch, -0.5, 0.5),
    ];
    check(&mut groups, 400, seed, |g, want| {
        let xi = with_data(&x, &g[0]);
        let mut bn = bn.clone();
        bn.gamma.clone_from(&g[1]);
        bn.beta.clone_from(&g[2]);
        let (y, cache) = batchnorm_forward(&xi, &bn, mode).expect("channels agree");
        let grads = if want {
            let (gi, dg, db) = batchnorm_backward(&cache, &bn, &with_data(&y, &coeffs));
            vec![gi.into_data(), dg, db]
        } else {
            Vec::new()
        };
        Evaluation {
            loss: weighted_sum(&y, &coeffs),
            signature: 0,
            grads,
        }
    })
}

pub fn check_bce(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = tensor(&mut rng, 1, [4, 4, 2]).map(|v| 4.0 * v);
    let y = Tensor5::from_vec(
        1,
        1,
        [4, 4, 2],
        (0..32).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect(),
    )
    .expect("valid shape");
    let mut groups = vec![z.data().to_vec()];
    check(&mut groups, 400, seed, |g, want| {
        let (loss, grad) = bce_loss(&with_data(&z, &g[0]), &y);
        Evaluation {
            loss,
            signature: 0,
            grads: if want { vec![grad.into_data()] } else { Vec::new() },
        }
    })
}

/// Composed U-Net under BCE loss with train-mode batch norm; checks
/// `samples` coordinates drawn from all trainable tensors and the input.
pub fn check_unet(config: UNetConfig, dims: [usize; 3], samples: usize, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = UNetModel::<f64>::new(config, seed).expect("valid config");
    let n = dims.iter().product::<usize>();
    let x = Tensor5::from_vec(1, config.in_channels, dims, uniform(&mut rng, n * config.in_channels, -1.0, 1.0))
        .expect("valid shape");
    let target = Tensor5::from_vec(
        1,
        1,
        dims,
        (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect(),
    )
    .expect("valid shape");

    let mut groups: Vec<Vec<f64>> = model
        .tensors()
        .into_iter()
        .filter(|t| t.kind == ParamKind::Trainable)
        .map(|t| t.data.to_vec())
        .collect();
    groups.push(x.data().to_vec());
    let n_params = groups.len() - 1;

    check(&mut groups, samples, seed, |g, want| {
        let mut m = model.clone();
        for (slot, values) in m.trainable_mut().into_iter().zip(&g[..n_params]) {
            slot.copy_from_slice(values);
        }
        let xi = with_data(&x, &g[n_params]);
        let (logits, cache) = m.forward_cached(&xi, Mode::Train).expect("valid input");
        let (loss, grad) = bce_loss(&logits, &target);
        let grads = if want {
            let (pg, gx) = m.backward(&cache, &grad);
            let mut out: Vec<Vec<f64>> = pg
                .tensors()
                .into_iter()
                .filter(|t| t.kind == ParamKind::Trainable)
                .map(|t| t.data.to_vec())
                .collect();
            out.push(gx.into_data());
            out
        } else {
            Vec::new()
        };
        Evaluation {
            loss,
            signature: cache.kink_signature(),
            grads,
        }
    })
}

/// Every layer type plus the tiny composed U-Net (input 16×16×8, two base
/// channels).
pub fn run_suite(seed: u64) -> Vec<LayerCheck> {
    vec![
        LayerCheck {
            name: "conv3d_3x3x3",
            tolerance: LINEAR_TOLERANCE,
            report: check_conv3d(3, seed),
        },
        LayerCheck {
            name: "conv3d_1x1x1",
            tolerance: LINEAR_TOLERANCE,
            report: check_conv3d(1, seed),
        },
        LayerCheck {
            name: "upconv2",
            tolerance: LINEAR_TOLERANCE,
            report: check_upconv(seed),
        },
        LayerCheck {
            name: "maxpool2",
            tolerance: NONLINEAR_TOLERANCE,
            report: check_maxpool(seed),
        },
        LayerCheck {
            name: "relu",
            tolerance: NONLINEAR_TOLERANCE,
            report: check_relu(seed),
        },
        LayerCheck {
            name: "batchnorm_train",
            tolerance: NONLINEAR_TOLERANCE,
            report: check_batchnorm(Mode::Train, seed),
        },
        LayerCheck {
            name: "batchnorm_eval",
            tolerance: NONLINEAR_TOLERANCE,
            report: check_batchnorm(Mode::Eval, seed),
        },
        LayerCheck {
            name: "bce_loss",
            tolerance: NONLINEAR_TOLERANCE,
            report: check_bce(seed),
        },
        LayerCheck {
            name: "unet_16x16x8_base2",
            tolerance: NONLINEAR_TOLERANCE,
            report: check_unet(UNetConfig::with_base_channels(2), [16, 16, 8], 300, seed),
        },
    ]
}
