//! Finite-difference verification of the backward pass: central differences
//! per parameter coordinate against the tape's analytic gradient, reported
//! as the worst relative error with denominator max(|a|, |n|, 1e-8).
//!
//! The suite covers every differentiable operation on three shapes each and
//! both networks end to end. Inputs are drawn from fixed streams and kept
//! away from kinks: magnitudes bounded below for leaky_relu, well-separated
//! values wherever a max compares neighbours, so a ±eps probe never crosses
//! a non-differentiable point.

use crate::cod::{cod_forward, init_cod, CodConfig};
use crate::confidence::{confidence_forward, init_conf, ConfConfig};
use crate::loss::{
    adversarial_confidence_loss, average_pair, confidence_loss, structure_loss,
};
use crate::params::{Fwd, Kind, ParamSet};
use crate::rng::stream;
use crate::tape::Var;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const GC_EPS: f64 = 1e-3;
const GC_SEED: u64 = 0x6C;

fn fresh_fwd<'p>(params: &'p mut ParamSet<f64>, rng: &'p mut ChaCha8Rng, grad: bool) -> Fwd<'p, f64> {
    Fwd::new(params, true, false, Some(rng), grad)
}

fn eval_loss<F>(params: &mut ParamSet<f64>, builder: &F) -> f64
where
    F: for<'p> Fn(&mut Fwd<'p, f64>) -> Var,
{
    let mut rng = stream(GC_SEED, "gradcheck-dropout", 0);
    let mut fwd = fresh_fwd(params, &mut rng, false);
    let loss = builder(&mut fwd);
    let t = fwd.tape.value(loss);
    assert_eq!(t.numel(), 1, "grad_check losses must be scalar");
    t.data()[0]
}

/// Worst relative error between analytic and central-difference gradients
/// over every coordinate of every parameter the builder touches.
pub fn grad_check<F>(params: &mut ParamSet<f64>, eps: f64, builder: F) -> f64
where
    F: for<'p> Fn(&mut Fwd<'p, f64>) -> Var,
{
    let mut rng = stream(GC_SEED, "gradcheck-dropout", 0);
    let mut fwd = fresh_fwd(params, &mut rng, true);
    let loss = builder(&mut fwd);
    assert_eq!(fwd.tape.value(loss).numel(), 1, "grad_check losses must be scalar");
    fwd.tape.backward(loss);
    let analytic = fwd.collect_grads();
    drop(fwd);

    let mut worst = 0.0f64;
    for (name, grads) in &analytic {
        for i in 0..grads.len() {
            let orig = params.get(name).data()[i];
            params.get_mut(name).data_mut()[i] = orig + eps;
            let fp = eval_loss(params, &builder);
            params.get_mut(name).data_mut()[i] = orig - eps;
            let fm = eval_loss(params, &builder);
            params.get_mut(name).data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let denom = grads[i].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((grads[i] - numeric).abs() / denom);
        }
    }
    worst
}

// ── input construction ──────────────────────────────────────────────────

/// Values with |v| in [0.15, 1.0]: a ±1e-3 probe cannot reach a kink at 0.
fn safe_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.15..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data)
}

/// Pairwise-distinct values on a shuffled grid with gaps of 2/n, so no two
/// entries can swap order when one moves by ±1e-3 (n kept ≤ 500).
fn spaced_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    assert!(n <= 500, "spacing guarantee needs n <= 500");
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let data = perm
        .iter()
        .map(|&k| -1.0 + 2.0 * (k as f64 + 0.5) / n as f64)
        .collect();
    Tensor::new(shape, data)
}

fn positive_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data)
}

fn binary_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
    Tensor::new(shape, data)
}

// ── the suite ───────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
}

fn op_rng(tag: &str, shape_idx: usize) -> ChaCha8Rng {
    stream(GC_SEED, tag, shape_idx as u64)
}

fn check_conv2d() -> f64 {
    let cases = [
        (vec![2, 3, 6, 5], vec![4, 3, 3, 3], 1, 1),
        (vec![1, 2, 8, 8], vec![3, 2, 3, 3], 2, 1),
        (vec![2, 4, 5, 5], vec![2, 4, 1, 1], 1, 0),
    ];
    let mut worst = 0.0f64;
    for (si, (xs, ws, stride, pad)) in cases.into_iter().enumerate() {
        let mut rng = op_rng("gc-conv", si);
        let o = ws[0];
        let mut p = ParamSet::new();
        p.insert("x", safe_tensor(&mut rng, xs), Kind::Param);
        p.insert("w", safe_tensor(&mut rng, ws), Kind::Param);
        p.insert("b", safe_tensor(&mut rng, vec![o]), Kind::Param);
        worst = worst.max(grad_check(&mut p, GC_EPS, |fwd| {
            let (x, w, b) = (fwd.leaf("x"), fwd.leaf("w"), fwd.leaf("b"));
            let y = fwd.tape.conv2d(x, w, Some(b), stride, pad);
            fwd.tape.mean_all(y)
        }));
    }
    worst
}

fn check_conv_transpose2d() -> f64 {
    let cases = [
        (vec![2, 3, 4, 4], vec![3, 2, 2, 2], 2),
        (vec![1, 4, 3, 5], vec![4, 3, 2, 2], 2),
        (vec![2, 2, 5, 4], vec![2, 3, 3, 3], 1),
    ];
    let mut worst = 0.0f64;
    for (si, (xs, ws, stride)) in cases.into_iter().enumerate() {
        let mut rng = op_rng("gc-tconv", si);
        let o = ws[1];
        let mut p = ParamSet::new();
        p.insert("x", safe_tensor(&mut rng, xs), Kind::Param);
        p.insert("w", safe_tensor(&mut rng, ws), Kind::Param);
        p.insert("b", safe_tensor(&mut rng, vec![o]), Kind::Param);
        worst = worst.max(grad_check(&mut p, GC_EPS, |fwd| {
            let (x, w, b) = (fwd.leaf("x"), fwd.leaf("w"), fwd.leaf("b"));
            let y = fwd.tape.conv_transpose2d(x, w, Some(b), stride);
            fwd.tape.mean_all(y)
        }));
    }
    worst
}

fn check_batch_norm() -> f64 {
    let cases = [vec![4, 3, 5, 5], vec![2, 2, 8, 3], vec![3, 4, 2, 2]];
    let mut worst = 0.0f64;
    for (si, xs) in cases.into_iter().enumerate() {
        let mut rng = op_rng("gc-bn", si);
        let c = xs[1];
        let mut p = ParamSet::new();
        p.insert("x", safe_tensor(&mut rng, xs), Kind::Param);
        p.insert("n.g", positive_tensor(&mut rng, vec![c], 0.4, 1.4), Kind::Param);
        p.insert("n.b", safe_tensor(&mut rng, vec![c]), Kind::Param);
        p.insert("n.rm", Tensor::zeros(vec![c]), Kind::Buffer);
        p.insert("n.rv", Tensor::full(vec![c], 1.0), Kind::Buffer);
        worst = worst.max(grad_check(&mut p, GC_EPS, |fwd| {
            let x = fwd.leaf("x");
            let y = fwd.bn("n", x);
            // square the output so the mean does not collapse to beta alone
            let y2 = fwd.tape.mul(y, y);
            fwd.tape.mean_all(y2)
        }));
    }
    worst
}

fn unary_check<G>(tag: &'static str, shapes: [Vec<usize>; 3], spaced: bool, g: G) -> f64
where
    G: for<'p> Fn(&mut Fwd<'p, f64>, Var) -> Var,
{
    let mut worst = 0.0f64;
    for (si, xs) in shapes.into_iter().enumerate() {
        let mut rng = op_rng(tag, si);
        let t = if spaced { spaced_tensor(&mut rng, xs) } else { safe_tensor(&mut rng, xs) };
        let mut p = ParamSet::new();
        p.insert("x", t, Kind::Param);
        worst = worst.max(grad_check(&mut p, GC_EPS, |fwd| {
            let x = fwd.leaf("x");
            let y = g(fwd, x);
            fwd.tape.mean_all(y)
        }));
    }
    worst
}

fn check_resize() -> f64 {
    let cases = [
        (vec![2, 3, 5, 4], 9, 7),
        (vec![1, 2, 8, 8], 5, 5),
        (vec![2, 1, 6, 6], 6, 6),
    ];
    let mut worst = 0.0f64;
    for (si, (xs, oh, ow)) in cases.into_iter().enumerate() {
        let mut rng = op_rng("gc-resize", si);
        let mut p = ParamSet::new();
        p.insert("x", safe_tensor(&mut rng, xs), Kind::Param);
        worst = worst.max(grad_check(&mut p, GC_EPS, |fwd| {
            let x = fwd.leaf("x");
            let y = fwd.tape.bilinear_resize(x, oh, ow);
            fwd.tape.mean_all(y)
        }));
    }
    worst
}

fn binary_op_check<G>(tag: &'static str, shapes: [(Vec<usize>, Vec<usize>); 3], spaced: bool, g: G) -> f64
where
    G: for<'p> Fn(&mut Fwd<'p, f64>, Var, Var) -> Var,
{
    let mut worst = 0.0f64;
    for (si, (sa, sb)) in shapes.into_iter().enumerate() {
        let mut rng = op_rng(tag, si);
        let (ta, tb) = if spaced {
            // one spaced pool split in two keeps a and b pairwise distinct
            let na: usize = sa.iter().product();
            let nb: usize = sb.iter().product();
            let pool = spaced_tensor(&mut rng, vec![na + nb]);
            (
                Tensor::new(sa, pool.data()[..na].to_vec()),
                Tensor::new(sb, pool.data()[na..].to_vec()),
            )
        } else {
            (safe_tensor(&mut rng, sa), safe_tensor(&mut rng, sb))
        };
        let mut p = ParamSet::new();
        p.insert("a", ta, Kind::Param);
        p.insert("b", tb, Kind::Param);
        worst = worst.max(grad_check(&mut p, GC_EPS, |fwd| {
            let (a, b) = (fwd.leaf("a"), fwd.leaf("b"));
            let y = g(fwd, a, b);
            fwd.tape.mean_all(y)
        }));
    }
    worst
}

fn check_concat() -> f64 {
    let cases = [
        [vec![2, 2, 4, 4], vec![2, 3, 4, 4], vec![2, 1, 4, 4]],
        [vec![1, 4, 3, 5], vec![1, 1, 3, 5], vec![1, 2, 3, 5]],
        [vec![3, 1, 2, 2], vec![3, 1, 2, 2], vec![3, 2, 2, 2]],
    ];
    let mut worst = 0.0f64;
    for (si, shapes) in cases.into_iter().enumerate() {
        let mut rng = op_rng("gc-concat", si);
        let mut p = ParamSet::new();
        for (k, s) in shapes.into_iter().enumerate() {
            p.insert(&format!("x{k}"), safe_tensor(&mut rng, s), Kind::Param);
        }
        worst = worst.max(grad_check(&mut p, GC_EPS, |fwd| {
            let xs = [fwd.leaf("x0"), fwd.leaf("x1"), fwd.leaf("x2")];
            let y = fwd.tape.concat_channels(&xs);
            // weight channels unevenly so permuted-placement bugs surface
            let shape = fwd.tape.value(y).shape().to_vec();
            let (b, c) = (shape[0], shape[1]);
            let n = fwd.tape.value(y).numel();
            let gate = Tensor::new(
                vec![b, c, 1, 1],
                (0..b * c).map(|i| 1.0 + (i % c) as f64).collect(),
            );
            let gv = fwd.constant(gate);
            let yg = fwd.tape.mul_chan(y, gv);
            let s = fwd.tape.sum_all(yg);
            fwd.tape.affine(s, 1.0 / n as f64, 0.0)
        }));
    }
    worst
}

fn check_dropout() -> f64 {
    let cases = [vec![2, 3, 5, 5], vec![1, 4, 6, 3], vec![3, 2, 4, 4]];
    let mut worst = 0.0f64;
    for (si, xs) in cases.into_iter().enumerate() {
        let mut rng = op_rng("gc-dropout", si);
        let mut p = ParamSet::new();
        p.insert("x", safe_tensor(&mut rng, xs), Kind::Param);
        worst = worst.max(grad_check(&mut p, GC_EPS, |fwd| {
            let x = fwd.leaf("x");
            let y = fwd.dropout(x, 0.5);
            fwd.tape.mean_all(y)
        }));
    }
    worst
}

fn check_div() -> f64 {
    let mut worst = 0.0f64;
    for si in 0..3 {
        let mut rng = op_rng("gc-div", si);
        let mut p = ParamSet::new();
        p.insert("a", safe_tensor(&mut rng, vec![1]), Kind::Param);
        p.insert("b", positive_tensor(&mut rng, vec![1], 0.3, 2.0), Kind::Param);
        worst = worst.max(grad_check(&mut p, GC_EPS, |fwd| {
            let (a, b) = (fwd.leaf("a"), fwd.leaf("b"));
            fwd.tape.div(a, b)
        }));
    }
    worst
}

fn check_cod_mean() -> f64 {
    let mut rng = op_rng("gc-cod", 0);
    let mut p = ParamSet::new();
    init_cod(&mut p, &mut rng, &CodConfig::tiny());
    let x = positive_tensor(&mut rng, vec![1, 3, 16, 16], 0.05, 0.95);
    grad_check(&mut p, GC_EPS, move |fwd| {
        let xv = fwd.input(x.clone());
        let out = cod_forward(fwd, xv, true);
        let mi = fwd.tape.mean_all(out.y_ini);
        let mr = fwd.tape.mean_all(out.y_ref);
        let mr2 = fwd.tape.affine(mr, 2.0, 0.0);
        fwd.tape.add(mi, mr2)
    })
}

fn check_cod_structure_loss() -> f64 {
    let mut rng = op_rng("gc-cod-loss", 0);
    let mut p = ParamSet::new();
    init_cod(&mut p, &mut rng, &CodConfig::tiny());
    let x = positive_tensor(&mut rng, vec![1, 3, 16, 16], 0.05, 0.95);
    let y = binary_tensor(&mut rng, vec![1, 1, 16, 16]);
    let w = positive_tensor(&mut rng, vec![1, 1, 16, 16], 1.0, 6.0);
    grad_check(&mut p, GC_EPS, move |fwd| {
        let xv = fwd.input(x.clone());
        let out = cod_forward(fwd, xv, true);
        let li = structure_loss(&mut fwd.tape, out.y_ini, &y, &w, 1.0);
        let lr = structure_loss(&mut fwd.tape, out.y_ref, &y, &w, 1.0);
        average_pair(&mut fwd.tape, li, lr)
    })
}

fn check_conf_mean() -> f64 {
    let mut rng = op_rng("gc-conf", 0);
    let mut p = ParamSet::new();
    init_conf(&mut p, &mut rng, &ConfConfig::tiny());
    let x = positive_tensor(&mut rng, vec![1, 3, 16, 16], 0.05, 0.95);
    let pred = positive_tensor(&mut rng, vec![1, 1, 16, 16], 0.05, 0.95);
    grad_check(&mut p, GC_EPS, move |fwd| {
        let xv = fwd.input(x.clone());
        let pv = fwd.input(pred.clone());
        let c = confidence_forward(fwd, xv, pv);
        fwd.tape.mean_all(c)
    })
}

fn check_conf_loss() -> f64 {
    let mut rng = op_rng("gc-conf-loss", 0);
    let mut p = ParamSet::new();
    init_conf(&mut p, &mut rng, &ConfConfig::tiny());
    let x = positive_tensor(&mut rng, vec![1, 3, 16, 16], 0.05, 0.95);
    let pi = positive_tensor(&mut rng, vec![1, 1, 16, 16], 0.05, 0.95);
    let pr = positive_tensor(&mut rng, vec![1, 1, 16, 16], 0.05, 0.95);
    let yi = positive_tensor(&mut rng, vec![1, 1, 16, 16], 0.0, 1.0);
    let yr = positive_tensor(&mut rng, vec![1, 1, 16, 16], 0.0, 1.0);
    grad_check(&mut p, GC_EPS, move |fwd| {
        let xv = fwd.input(x.clone());
        let pvi = fwd.input(pi.clone());
        let pvr = fwd.input(pr.clone());
        let ci = confidence_forward(fwd, xv, pvi);
        let cr = confidence_forward(fwd, xv, pvr);
        confidence_loss(&mut fwd.tape, ci, cr, &yi, &yr)
    })
}

fn check_conf_adversarial() -> f64 {
    let mut rng = op_rng("gc-conf-adv", 0);
    let mut p = ParamSet::new();
    init_conf(&mut p, &mut rng, &ConfConfig::tiny());
    let x = positive_tensor(&mut rng, vec![1, 3, 16, 16], 0.05, 0.95);
    let pi = positive_tensor(&mut rng, vec![1, 1, 16, 16], 0.05, 0.95);
    let pr = positive_tensor(&mut rng, vec![1, 1, 16, 16], 0.05, 0.95);
    let gt = positive_tensor(&mut rng, vec![1, 1, 16, 16], 0.99, 0.999);
    grad_check(&mut p, GC_EPS, move |fwd| {
        let xv = fwd.input(x.clone());
        let pvi = fwd.input(pi.clone());
        let pvr = fwd.input(pr.clone());
        let gv = fwd.input(gt.clone());
        let di = confidence_forward(fwd, xv, pvi);
        let dr = confidence_forward(fwd, xv, pvr);
        let dg = confidence_forward(fwd, xv, gv);
        adversarial_confidence_loss(&mut fwd.tape, di, dr, dg)
    })
}

pub fn check_linear() -> f64 {
    let mut rng = op_rng("gc-linear", 0);
    let mut p = ParamSet::new();
    p.insert("x", safe_tensor(&mut rng, vec![3, 4, 2, 2]), Kind::Param);
    grad_check(&mut p, GC_EPS, |fwd| {
        let x = fwd.leaf("x");
        fwd.tape.sum_all(x)
    })
}

/// The full verification table: all tape operations and both networks.
pub fn run_suite() -> Vec<CheckResult> {
    let s445 = [vec![2, 3, 4, 4], vec![1, 4, 5, 3], vec![3, 2, 2, 6]];
    let pool_shapes = [vec![1, 2, 6, 6], vec![2, 3, 4, 4], vec![1, 1, 8, 6]];
    vec![
        CheckResult { name: "linear", max_rel_err: check_linear() },
        CheckResult { name: "conv2d", max_rel_err: check_conv2d() },
        CheckResult { name: "conv_transpose2d", max_rel_err: check_conv_transpose2d() },
        CheckResult { name: "batch_norm", max_rel_err: check_batch_norm() },
        CheckResult {
            name: "leaky_relu",
            max_rel_err: unary_check("gc-lrelu", s445.clone(), false, |fwd, x| {
                fwd.tape.leaky_relu(x, 0.2)
            }),
        },
        CheckResult {
            name: "sigmoid",
            max_rel_err: unary_check("gc-sigmoid", s445.clone(), false, |fwd, x| {
                fwd.tape.sigmoid(x)
            }),
        },
        CheckResult { name: "dropout", max_rel_err: check_dropout() },
        CheckResult { name: "bilinear_resize", max_rel_err: check_resize() },
        CheckResult {
            name: "max_pool2d",
            max_rel_err: unary_check("gc-pool", pool_shapes, true, |fwd, x| {
                fwd.tape.max_pool2d(x, 2)
            }),
        },
        CheckResult { name: "concat_channels", max_rel_err: check_concat() },
        CheckResult {
            name: "add",
            max_rel_err: binary_op_check(
                "gc-add",
                [
                    (vec![2, 3, 4, 4], vec![2, 3, 4, 4]),
                    (vec![1, 4, 5, 3], vec![1, 4, 5, 3]),
                    (vec![3, 1, 2, 6], vec![3, 1, 2, 6]),
                ],
                false,
                |fwd, a, b| fwd.tape.add(a, b),
            ),
        },
        CheckResult {
            name: "mul",
            max_rel_err: binary_op_check(
                "gc-mul",
                [
                    (vec![2, 3, 4, 4], vec![2, 3, 4, 4]),
                    (vec![1, 4, 5, 3], vec![1, 4, 5, 3]),
                    (vec![3, 1, 2, 6], vec![3, 1, 2, 6]),
                ],
                false,
                |fwd, a, b| fwd.tape.mul(a, b),
            ),
        },
        CheckResult {
            name: "mul_map",
            max_rel_err: binary_op_check(
                "gc-mulmap",
                [
                    (vec![2, 3, 4, 4], vec![2, 1, 4, 4]),
                    (vec![1, 4, 5, 3], vec![1, 1, 5, 3]),
                    (vec![3, 2, 2, 6], vec![3, 1, 2, 6]),
                ],
                false,
                |fwd, a, b| fwd.tape.mul_map(a, b),
            ),
        },
        CheckResult {
            name: "mul_chan",
            max_rel_err: binary_op_check(
                "gc-mulchan",
                [
                    (vec![2, 3, 4, 4], vec![2, 3, 1, 1]),
                    (vec![1, 4, 5, 3], vec![1, 4, 1, 1]),
                    (vec![3, 2, 2, 6], vec![3, 2, 1, 1]),
                ],
                false,
                |fwd, a, b| fwd.tape.mul_chan(a, b),
            ),
        },
        CheckResult {
            name: "max_elem",
            max_rel_err: binary_op_check(
                "gc-maxelem",
                [
                    (vec![2, 3, 4, 4], vec![2, 3, 4, 4]),
                    (vec![1, 4, 5, 3], vec![1, 4, 5, 3]),
                    (vec![3, 1, 2, 6], vec![3, 1, 2, 6]),
                ],
                true,
                |fwd, a, b| fwd.tape.max_elem(a, b),
            ),
        },
        CheckResult {
            name: "global_avg_pool",
            max_rel_err: unary_check("gc-gap", s445.clone(), false, |fwd, x| {
                fwd.tape.global_avg_pool(x)
            }),
        },
        CheckResult {
            name: "affine",
            max_rel_err: unary_check("gc-affine", s445.clone(), false, |fwd, x| {
                fwd.tape.affine(x, 1.7, -0.3)
            }),
        },
        CheckResult {
            name: "log_clamped",
            max_rel_err: {
                let mut worst = 0.0f64;
                for si in 0..3 {
                    let mut rng = op_rng("gc-log", si);
                    let mut p = ParamSet::new();
                    p.insert(
                        "x",
                        positive_tensor(&mut rng, s445[si].clone(), 0.05, 1.0),
                        Kind::Param,
                    );
                    worst = worst.max(grad_check(&mut p, GC_EPS, |fwd| {
                        let x = fwd.leaf("x");
                        let y = fwd.tape.log_clamped(x);
                        fwd.tape.mean_all(y)
                    }));
                }
                worst
            },
        },
        CheckResult { name: "div", max_rel_err: check_div() },
        CheckResult { name: "cod_network_mean", max_rel_err: check_cod_mean() },
        CheckResult { name: "cod_structure_loss", max_rel_err: check_cod_structure_loss() },
        CheckResult { name: "confidence_mean", max_rel_err: check_conf_mean() },
        CheckResult { name: "confidence_loss", max_rel_err: check_conf_loss() },
        CheckResult { name: "adversarial_loss", max_rel_err: check_conf_adversarial() },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    #[test]
    fn linear_losses_are_exact() {
        assert!(check_linear() < 1e-9, "{}", check_linear());
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let mut rng = op_rng("gc-fault", 0);
        let mut p = ParamSet::new();
        p.insert("x", safe_tensor(&mut rng, vec![1, 2, 5, 5]), Kind::Param);
        p.insert("w", safe_tensor(&mut rng, vec![2, 2, 3, 3]), Kind::Param);
        let err = grad_check(&mut p, GC_EPS, |fwd| {
            fwd.tape.inject_fault();
            let (x, w) = (fwd.leaf("x"), fwd.leaf("w"));
            let y = fwd.tape.conv2d(x, w, None, 1, 1);
            fwd.tape.mean_all(y)
        });
        assert!(err > 1e-1, "fault slipped through: {err}");
    }

    #[test]
    fn full_suite_passes_within_budget() {
        let clock = Instant::now();
        let results = run_suite();
        let elapsed = clock.elapsed().as_secs_f64();
        for r in &results {
            assert!(
                r.max_rel_err < 1e-3,
                "{} failed: max relative error {}",
                r.name,
                r.max_rel_err
            );
        }
        assert!(results.len() >= 20);
        assert!(elapsed < 120.0, "suite took {elapsed:.1}s");
    }
}
