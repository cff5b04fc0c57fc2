//! Finite-difference gradient verification.
//!
//! Everything here runs in `f64`: central differences carry O(h^2) truncation
//! error, and f32 rounding would drown the comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::conv_out_dims;
use super::{batch_norm, bce_with_logits, conv2d, linear, mse, softmax, softmax_cross_entropy};
use super::{BnMode, Scalar, Tape, Tensor};

/// Central-difference gradient of a scalar-valued function. Step size is
/// scaled per element by max(1, |x|).
pub fn finite_diff_grad<F: Scalar>(
    f: &dyn Fn(&Tensor<F>) -> Tensor<F>,
    at: &Tensor<F>,
    eps: f64,
) -> Tensor<F> {
    let base: Vec<f64> = at.to_f64_vec();
    let mut grad = vec![F::ZERO; base.len()];
    for i in 0..base.len() {
        let h = eps * base[i].abs().max(1.0);
        let mut probe = base.clone();
        probe[i] = base[i] + h;
        let fp = eval_at(f, &probe, at.shape());
        probe[i] = base[i] - h;
        let fm = eval_at(f, &probe, at.shape());
        grad[i] = F::from_f64((fp - fm) / (2.0 * h));
    }
    Tensor::plain(grad, at.shape().to_vec())
}

fn eval_at<F: Scalar>(f: &dyn Fn(&Tensor<F>) -> Tensor<F>, data: &[f64], shape: &[usize]) -> f64 {
    let t = Tensor::plain(data.iter().map(|&v| F::from_f64(v)).collect(), shape.to_vec());
    f(&t).item().to_f64()
}

/// Compares the taped gradient of `f` at `at` against central differences.
/// Returns the worst relative error, or an error string on mismatch beyond
/// atol + rtol * max(|a|, |b|).
pub fn gradcheck<F: Scalar>(
    f: &dyn Fn(&Tensor<F>) -> Tensor<F>,
    at: &Tensor<F>,
    eps: f64,
    rtol: f64,
    atol: f64,
) -> Result<f64, String> {
    let tape: Tape<F> = Tape::new();
    let x = at.releaf();
    let loss = {
        let _scope = tape.scope();
        f(&x)
    };
    if loss.len() != 1 {
        return Err(format!("gradcheck needs scalar output, got {:?}", loss.shape()));
    }
    let grads = loss.backward(false).map_err(|e| e.to_string())?;
    let analytic = grads
        .wrt(&x)
        .unwrap_or_else(|| Tensor::zeros(at.shape()));
    let numeric = finite_diff_grad(f, at, eps);
    let mut worst = 0.0f64;
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let (a, n) = (a.to_f64(), n.to_f64());
        let diff = (a - n).abs();
        let rel = diff / a.abs().max(n.abs()).max(1.0);
        if rel > worst {
            worst = rel;
        }
        if diff > atol + rtol * a.abs().max(n.abs()) {
            return Err(format!(
                "element {}: analytic {:.9e} vs finite-diff {:.9e} (rel {:.3e})",
                i, a, n, rel
            ));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct CheckLine {
    pub op: String,
    pub max_rel: f64,
    pub passed: bool,
    pub detail: String,
}

const FD_EPS: f64 = 1e-6;
const RTOL: f64 = 1e-4;
const ATOL: f64 = 1e-7;

fn rt(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::plain(data, shape.to_vec())
}

/// Random tensor whose elements keep a margin away from each other and from
/// zero, so kink points (relu, max) don't sit inside the FD step.
fn rt_spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|i| (i as f64 - n as f64 / 2.0) * 0.15 + 0.07)
        .collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    for v in vals.iter_mut() {
        *v += rng.random_range(-0.02..0.02);
    }
    Tensor::plain(vals, shape.to_vec())
}

/// Fixed random projection turning a tensor output into a scalar loss.
fn proj(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    rt(rng, shape, -1.0, 1.0)
}

struct Suite<'a> {
    seed: u64,
    lines: &'a mut Vec<CheckLine>,
}

impl Suite<'_> {
    fn case(&mut self, op: &str, build: impl Fn(&mut ChaCha8Rng) -> (Box<dyn Fn(&Tensor<f64>) -> Tensor<f64>>, Tensor<f64>)) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fxhash(op));
        let (f, at) = build(&mut rng);
        let entry = match gradcheck(f.as_ref(), &at, FD_EPS, RTOL, ATOL) {
            Ok(rel) => CheckLine {
                op: op.to_string(),
                max_rel: rel,
                passed: true,
                detail: String::new(),
            },
            Err(msg) => CheckLine {
                op: op.to_string(),
                max_rel: f64::NAN,
                passed: false,
                detail: msg,
            },
        };
        self.lines.push(entry);
    }
}

fn fxhash(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Finite-difference check of every differentiable op, one line per op per
/// seed. All instances are f64 with small random shapes.
pub fn run_gradcheck_suite(seeds: &[u64]) -> Vec<CheckLine> {
    let mut lines = Vec::new();
    for &seed in seeds {
        let mut s = Suite {
            seed,
            lines: &mut lines,
        };

        s.case("add", |rng| {
            let b = rt(rng, &[3, 4], -1.0, 1.0);
            let p = proj(rng, &[3, 4]);
            let at = rt(rng, &[3, 4], -1.0, 1.0);
            (Box::new(move |x| x.add(&b).unwrap().mul(&p).unwrap().sum_all()), at)
        });
        s.case("sub", |rng| {
            let b = rt(rng, &[3, 4], -1.0, 1.0);
            let p = proj(rng, &[3, 4]);
            let at = rt(rng, &[3, 4], -1.0, 1.0);
            (Box::new(move |x| b.sub(x).unwrap().mul(&p).unwrap().sum_all()), at)
        });
        s.case("mul", |rng| {
            let b = rt(rng, &[3, 4], -1.0, 1.0);
            let p = proj(rng, &[3, 4]);
            let at = rt(rng, &[3, 4], -1.0, 1.0);
            (Box::new(move |x| x.mul(&b).unwrap().mul(&p).unwrap().sum_all()), at)
        });
        s.case("div_num", |rng| {
            let b = rt(rng, &[3, 4], 0.5, 1.5);
            let p = proj(rng, &[3, 4]);
            let at = rt(rng, &[3, 4], -1.0, 1.0);
            (Box::new(move |x| x.div(&b).unwrap().mul(&p).unwrap().sum_all()), at)
        });
        s.case("div_den", |rng| {
            let a = rt(rng, &[3, 4], -1.0, 1.0);
            let p = proj(rng, &[3, 4]);
            let at = rt(rng, &[3, 4], 0.5, 1.5);
            (Box::new(move |x| a.div(x).unwrap().mul(&p).unwrap().sum_all()), at)
        });
        s.case("neg_scale_shift", |rng| {
            let p = proj(rng, &[6]);
            let at = rt(rng, &[6], -1.0, 1.0);
            (
                Box::new(move |x| x.neg().scale(1.7).add_scalar(0.3).mul(&p).unwrap().sum_all()),
                at,
            )
        });
        s.case("exp", |rng| {
            let p = proj(rng, &[5]);
            let at = rt(rng, &[5], -1.5, 1.5);
            (Box::new(move |x| x.exp().mul(&p).unwrap().sum_all()), at)
        });
        s.case("ln", |rng| {
            let p = proj(rng, &[5]);
            let at = rt(rng, &[5], 0.3, 2.0);
            (Box::new(move |x| x.ln().mul(&p).unwrap().sum_all()), at)
        });
        s.case("sqrt", |rng| {
            let p = proj(rng, &[5]);
            let at = rt(rng, &[5], 0.3, 2.0);
            (Box::new(move |x| x.sqrt().mul(&p).unwrap().sum_all()), at)
        });
        s.case("sigmoid", |rng| {
            let p = proj(rng, &[5]);
            let at = rt(rng, &[5], -3.0, 3.0);
            (Box::new(move |x| x.sigmoid().mul(&p).unwrap().sum_all()), at)
        });
        s.case("relu", |rng| {
            let p = proj(rng, &[4, 4]);
            let at = rt_spaced(rng, &[4, 4]);
            (Box::new(move |x| x.relu().mul(&p).unwrap().sum_all()), at)
        });
        s.case("clamp_min", |rng| {
            let p = proj(rng, &[4, 4]);
            let at = rt_spaced(rng, &[4, 4]);
            (
                Box::new(move |x| x.clamp_min(0.1).mul(&p).unwrap().sum_all()),
                at,
            )
        });
        s.case("matmul_lhs", |rng| {
            let b = rt(rng, &[4, 3], -1.0, 1.0);
            let p = proj(rng, &[2, 3]);
            let at = rt(rng, &[2, 4], -1.0, 1.0);
            (
                Box::new(move |x| x.matmul(&b).unwrap().mul(&p).unwrap().sum_all()),
                at,
            )
        });
        s.case("matmul_rhs", |rng| {
            let a = rt(rng, &[2, 4], -1.0, 1.0);
            let p = proj(rng, &[2, 3]);
            let at = rt(rng, &[4, 3], -1.0, 1.0);
            (
                Box::new(move |x| a.matmul(x).unwrap().mul(&p).unwrap().sum_all()),
                at,
            )
        });
        s.case("transpose2", |rng| {
            let p = proj(rng, &[4, 3]);
            let at = rt(rng, &[3, 4], -1.0, 1.0);
            (
                Box::new(move |x| x.transpose2().mul(&p).unwrap().sum_all()),
                at,
            )
        });
        s.case("reshape", |rng| {
            let p = proj(rng, &[2, 6]);
            let at = rt(rng, &[3, 4], -1.0, 1.0);
            (
                Box::new(move |x| x.reshape(&[2, 6]).unwrap().mul(&p).unwrap().sum_all()),
                at,
            )
        });
        s.case("mean_all", |rng| {
            let at = rt(rng, &[3, 5], -1.0, 1.0);
            (Box::new(move |x| x.mean_all()), at)
        });
        s.case("sum_axis0", |rng| {
            let p = proj(rng, &[4]);
            let at = rt(rng, &[3, 4], -1.0, 1.0);
            (
                Box::new(move |x| x.sum_axis0().mul(&p).unwrap().sum_all()),
                at,
            )
        });
        s.case("sum_axis1", |rng| {
            let p = proj(rng, &[3]);
            let at = rt(rng, &[3, 4], -1.0, 1.0);
            (
                Box::new(move |x| x.sum_axis1().mul(&p).unwrap().sum_all()),
                at,
            )
        });
        s.case("broadcast_rows", |rng| {
            let p = proj(rng, &[5, 3]);
            let at = rt(rng, &[3], -1.0, 1.0);
            (
                Box::new(move |x| x.broadcast_rows(5).mul(&p).unwrap().sum_all()),
                at,
            )
        });
        s.case("broadcast_cols", |rng| {
            let p = proj(rng, &[3, 5]);
            let at = rt(rng, &[3], -1.0, 1.0);
            (
                Box::new(move |x| x.broadcast_cols(5).mul(&p).unwrap().sum_all()),
                at,
            )
        });
        s.case("gather_axis1", |rng| {
            let idx = vec![
                rng.random_range(0..4),
                rng.random_range(0..4),
                rng.random_range(0..4),
            ];
            let p = proj(rng, &[3]);
            let at = rt(rng, &[3, 4], -1.0, 1.0);
            (
                Box::new(move |x| x.gather_axis1(&idx).unwrap().mul(&p).unwrap().sum_all()),
                at,
            )
        });
        s.case("scatter_axis1", |rng| {
            let idx = vec![1usize, 3, 1];
            let p = proj(rng, &[3, 4]);
            let at = rt(rng, &[3], -1.0, 1.0);
            (
                Box::new(move |x| x.scatter_axis1(&idx, 4).mul(&p).unwrap().sum_all()),
                at,
            )
        });
        s.case("select_rows_dup", |rng| {
            let idx = vec![2usize, 0, 2, 1];
            let p = proj(rng, &[4, 3]);
            let at = rt(rng, &[3, 3], -1.0, 1.0);
            (
                Box::new(move |x| x.select_rows(&idx).unwrap().mul(&p).unwrap().sum_all()),
                at,
            )
        });
        s.case("scatter_rows", |rng| {
            let idx = vec![4usize, 1, 1];
            let p = proj(rng, &[5, 2]);
            let at = rt(rng, &[3, 2], -1.0, 1.0);
            (
                Box::new(move |x| x.scatter_rows(&idx, 5).mul(&p).unwrap().sum_all()),
                at,
            )
        });
        s.case("concat_rows", |rng| {
            let b = rt(rng, &[2, 3], -1.0, 1.0);
            let p = proj(rng, &[5, 3]);
            let at = rt(rng, &[3, 3], -1.0, 1.0);
            (
                Box::new(move |x| {
                    Tensor::concat_rows(&[x, &b]).unwrap().mul(&p).unwrap().sum_all()
                }),
                at,
            )
        });
        s.case("concat_ch", |rng| {
            let b = rt(rng, &[2, 1, 3, 3], -1.0, 1.0);
            let p = proj(rng, &[2, 3, 3, 3]);
            let at = rt(rng, &[2, 2, 3, 3], -1.0, 1.0);
            (
                Box::new(move |x| x.concat_ch(&b).unwrap().mul(&p).unwrap().sum_all()),
                at,
            )
        });
        s.case("slice_ch", |rng| {
            let p = proj(rng, &[2, 2, 3, 3]);
            let at = rt(rng, &[2, 4, 3, 3], -1.0, 1.0);
            (
                Box::new(move |x| x.slice_ch(1, 3).unwrap().mul(&p).unwrap().sum_all()),
                at,
            )
        });
        s.case("max_pool2d", |rng| {
            let p = proj(rng, &[1, 2, 2, 2]);
            let at = rt_spaced(rng, &[1, 2, 5, 5]);
            (
                Box::new(move |x| x.max_pool2d(2).unwrap().mul(&p).unwrap().sum_all()),
                at,
            )
        });
        s.case("conv2d_input", |rng| {
            let w = rt(rng, &[3, 2, 3, 3], -0.5, 0.5);
            let b = rt(rng, &[3], -0.5, 0.5);
            let (oh, ow) = conv_out_dims(6, 6, 3, 3, 1, 1).unwrap();
            let p = proj(rng, &[2, 3, oh, ow]);
            let at = rt(rng, &[2, 2, 6, 6], -1.0, 1.0);
            (
                Box::new(move |x| {
                    conv2d(x, &w, Some(&b), 1, 1).unwrap().mul(&p).unwrap().sum_all()
                }),
                at,
            )
        });
        s.case("conv2d_weight", |rng| {
            let x = rt(rng, &[2, 2, 6, 6], -1.0, 1.0);
            let (oh, ow) = conv_out_dims(6, 6, 3, 3, 1, 0).unwrap();
            let p = proj(rng, &[2, 3, oh, ow]);
            let at = rt(rng, &[3, 2, 3, 3], -0.5, 0.5);
            (
                Box::new(move |w| {
                    conv2d(&x, w, None, 1, 0).unwrap().mul(&p).unwrap().sum_all()
                }),
                at,
            )
        });
        s.case("conv2d_stride2", |rng| {
            let w = rt(rng, &[2, 1, 2, 2], -0.5, 0.5);
            let (oh, ow) = conv_out_dims(6, 6, 2, 2, 2, 0).unwrap();
            let p = proj(rng, &[1, 2, oh, ow]);
            let at = rt(rng, &[1, 1, 6, 6], -1.0, 1.0);
            (
                Box::new(move |x| {
                    conv2d(x, &w, None, 2, 0).unwrap().mul(&p).unwrap().sum_all()
                }),
                at,
            )
        });
        s.case("conv2d_bias", |rng| {
            let x = rt(rng, &[2, 2, 4, 4], -1.0, 1.0);
            let w = rt(rng, &[3, 2, 3, 3], -0.5, 0.5);
            let (oh, ow) = conv_out_dims(4, 4, 3, 3, 1, 1).unwrap();
            let p = proj(rng, &[2, 3, oh, ow]);
            let at = rt(rng, &[3], -0.5, 0.5);
            (
                Box::new(move |b| {
                    conv2d(&x, &w, Some(b), 1, 1).unwrap().mul(&p).unwrap().sum_all()
                }),
                at,
            )
        });
        s.case("batch_norm_x", |rng| {
            let gamma = rt(rng, &[2], 0.5, 1.5);
            let beta = rt(rng, &[2], -0.5, 0.5);
            let p = proj(rng, &[3, 2, 2, 2]);
            let at = rt(rng, &[3, 2, 2, 2], -1.0, 1.0);
            (
                Box::new(move |x| {
                    let (y, _) = batch_norm(
                        x,
                        &gamma,
                        &beta,
                        &[0.0, 0.0],
                        &[1.0, 1.0],
                        1e-5,
                        0.1,
                        BnMode::Train {
                            update_running: false,
                        },
                    )
                    .unwrap();
                    y.mul(&p).unwrap().sum_all()
                }),
                at,
            )
        });
        s.case("batch_norm_gamma", |rng| {
            let x = rt(rng, &[3, 2, 2, 2], -1.0, 1.0);
            let beta = rt(rng, &[2], -0.5, 0.5);
            let p = proj(rng, &[3, 2, 2, 2]);
            let at = rt(rng, &[2], 0.5, 1.5);
            (
                Box::new(move |gamma| {
                    let (y, _) = batch_norm(
                        &x,
                        gamma,
                        &beta,
                        &[0.0, 0.0],
                        &[1.0, 1.0],
                        1e-5,
                        0.1,
                        BnMode::Train {
                            update_running: false,
                        },
                    )
                    .unwrap();
                    y.mul(&p).unwrap().sum_all()
                }),
                at,
            )
        });
        s.case("batch_norm_eval", |rng| {
            let gamma = rt(rng, &[2], 0.5, 1.5);
            let beta = rt(rng, &[2], -0.5, 0.5);
            let p = proj(rng, &[2, 2, 2, 2]);
            let at = rt(rng, &[2, 2, 2, 2], -1.0, 1.0);
            (
                Box::new(move |x| {
                    let (y, _) = batch_norm(
                        x,
                        &gamma,
                        &beta,
                        &[0.1, -0.2],
                        &[0.9, 1.1],
                        1e-5,
                        0.1,
                        BnMode::Eval,
                    )
                    .unwrap();
                    y.mul(&p).unwrap().sum_all()
                }),
                at,
            )
        });
        s.case("softmax", |rng| {
            let p = proj(rng, &[3, 4]);
            let at = rt(rng, &[3, 4], -2.0, 2.0);
            (
                Box::new(move |x| softmax(x).mul(&p).unwrap().sum_all()),
                at,
            )
        });
        s.case("softmax_cross_entropy", |rng| {
            let labels = vec![
                rng.random_range(0..4),
                rng.random_range(0..4),
                rng.random_range(0..4),
            ];
            let at = rt(rng, &[3, 4], -2.0, 2.0);
            (
                Box::new(move |x| softmax_cross_entropy(x, &labels).unwrap()),
                at,
            )
        });
        s.case("mse", |rng| {
            let t = rt(rng, &[3, 4], -1.0, 1.0);
            let at = rt(rng, &[3, 4], -1.0, 1.0);
            (Box::new(move |x| mse(x, &t).unwrap()), at)
        });
        s.case("bce_with_logits", |rng| {
            let t = rt(rng, &[3, 4], 0.0, 1.0).map_plain(|v| if v > 0.5 { 1.0 } else { 0.0 });
            let at = rt(rng, &[3, 4], -4.0, 4.0);
            (Box::new(move |x| bce_with_logits(x, &t).unwrap()), at)
        });
        s.case("linear", |rng| {
            let w = rt(rng, &[3, 4], -0.7, 0.7);
            let b = rt(rng, &[3], -0.5, 0.5);
            let p = proj(rng, &[2, 3]);
            let at = rt(rng, &[2, 4], -1.0, 1.0);
            (
                Box::new(move |x| linear(x, &w, Some(&b)).unwrap().mul(&p).unwrap().sum_all()),
                at,
            )
        });
        s.case("mlp_pipeline", |rng| {
            let w1 = rt(rng, &[6, 4], -0.7, 0.7);
            let b1 = rt(rng, &[6], -0.3, 0.3);
            let w2 = rt(rng, &[3, 6], -0.7, 0.7);
            let labels = vec![rng.random_range(0..3), rng.random_range(0..3)];
            let at = rt(rng, &[2, 4], -1.0, 1.0);
            (
                Box::new(move |x| {
                    let h = linear(x, &w1, Some(&b1)).unwrap().relu();
                    let logits = linear(&h, &w2, None).unwrap();
                    softmax_cross_entropy(&logits, &labels).unwrap()
                }),
                at,
            )
        });
        s.case("conv_block_pipeline", |rng| {
            let w = rt(rng, &[2, 1, 3, 3], -0.6, 0.6);
            let gamma = rt(rng, &[2], 0.5, 1.5);
            let beta = rt(rng, &[2], -0.3, 0.3);
            let labels = vec![0usize, 1];
            let wh = rt(rng, &[2, 2 * 3 * 3], -0.5, 0.5);
            let at = rt(rng, &[2, 1, 6, 6], -1.0, 1.0);
            (
                Box::new(move |x| {
                    let y = conv2d(x, &w, None, 1, 1).unwrap();
                    let (y, _) = batch_norm(
                        &y,
                        &gamma,
                        &beta,
                        &[0.0, 0.0],
                        &[1.0, 1.0],
                        1e-5,
                        0.1,
                        BnMode::Train {
                            update_running: false,
                        },
                    )
                    .unwrap();
                    let y = y.relu().max_pool2d(2).unwrap().flatten2();
                    let logits = linear(&y, &wh, None).unwrap();
                    softmax_cross_entropy(&logits, &labels).unwrap()
                }),
                at,
            )
        });
    }
    lines
}
