//! Plain-update optimizers over flat parameter lists.
//!
//! Steps happen outside any tape: each returns fresh leaf tensors so the next
//! forward pass starts a clean graph. Parameters whose gradient is absent are
//! returned unchanged. Moment buffers accumulate in f64 regardless of the
//! working precision.

use crate::tensor::{no_grad, Gradients, Scalar, Tensor};

/// Looks up the gradient of each parameter, in parameter order.
pub fn collect<F: Scalar>(params: &[Tensor<F>], grads: &Gradients<F>) -> Vec<Option<Tensor<F>>> {
    params.iter().map(|p| grads.wrt(p)).collect()
}

/// Accumulates `delta` into `acc` elementwise (used when outer updates sum
/// gradients over several episodes before stepping).
pub fn accumulate<F: Scalar>(acc: &mut Vec<Option<Tensor<F>>>, delta: &[Option<Tensor<F>>]) {
    let _quiet = no_grad();
    for (a, d) in acc.iter_mut().zip(delta) {
        match (a.as_mut(), d) {
            (_, None) => {}
            (None, Some(t)) => *a = Some(t.detach()),
            (Some(t), Some(u)) => *a = Some(t.add(u).expect("gradient shapes").detach()),
        }
    }
}

pub fn sgd_step<F: Scalar>(
    params: &[Tensor<F>],
    grads: &[Option<Tensor<F>>],
    lr: f64,
) -> Vec<Tensor<F>> {
    assert_eq!(params.len(), grads.len());
    params
        .iter()
        .zip(grads)
        .map(|(p, g)| match g {
            None => p.releaf(),
            Some(g) => {
                let data: Vec<F> = p
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&pv, &gv)| F::from_f64(pv.to_f64() - lr * gv.to_f64()))
                    .collect();
                Tensor::plain(data, p.shape().to_vec()).releaf()
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<F: Scalar>(params: &[Tensor<F>], lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            first_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One Adam update with bias correction. Parameters without a gradient are
/// skipped entirely (their moments do not decay).
pub fn adam_step<F: Scalar>(
    params: &[Tensor<F>],
    grads: &[Option<Tensor<F>>],
    state: &mut AdamState,
) -> Vec<Tensor<F>> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.first_moment.len());
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    params
        .iter()
        .zip(grads)
        .enumerate()
        .map(|(pi, (p, g))| match g {
            None => p.releaf(),
            Some(g) => {
                let m = &mut state.first_moment[pi];
                let v = &mut state.second_moment[pi];
                let data: Vec<F> = p
                    .data()
                    .iter()
                    .zip(g.data())
                    .enumerate()
                    .map(|(i, (&pv, &gv))| {
                        let gf = gv.to_f64();
                        m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gf;
                        v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gf * gf;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        F::from_f64(pv.to_f64() - state.lr * mhat / (vhat.sqrt() + state.eps))
                    })
                    .collect();
                Tensor::plain(data, p.shape().to_vec()).releaf()
            }
        })
        .collect()
}

/// Optimizer selection for training loops.
#[derive(Debug)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(AdamState),
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn adam<F: Scalar>(params: &[Tensor<F>], lr: f64) -> Self {
        Optimizer::Adam(AdamState::new(params, lr))
    }

    pub fn step<F: Scalar>(
        &mut self,
        params: &[Tensor<F>],
        grads: &[Option<Tensor<F>>],
    ) -> Vec<Tensor<F>> {
        match self {
            Optimizer::Sgd { lr } => sgd_step(params, grads, *lr),
            Optimizer::Adam(state) => adam_step(params, grads, state),
        }
    }
}
