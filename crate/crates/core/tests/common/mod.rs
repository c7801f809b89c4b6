//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reform::nn::{Mlp, Tape, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(FD_FLOOR)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FdReport {
    pub max_rel: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl FdReport {
    pub fn merge(&mut self, other: FdReport) {
        self.max_rel = self.max_rel.max(other.max_rel);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

/// Five-point central difference `[-f(2h) + 8 f(h) - 8 f(-h) + f(-2h)] / 12h`
/// at `h = FD_STEP`, where `f(e)` evaluates with the entry shifted by `e`.
/// Returns `None` if the branch signature is not the same at all four
/// points.
fn central_difference(mut f: impl FnMut(f64) -> (f64, u64)) -> Option<f64> {
    let h = FD_STEP;
    let (f2p, s2p) = f(2.0 * h);
    let (f1p, s1p) = f(h);
    let (f1m, s1m) = f(-h);
    let (f2m, s2m) = f(-2.0 * h);
    if s2p != s1p || s1p != s1m || s1m != s2m {
        return None;
    }
    Some((-f2p + 8.0 * f1p - 8.0 * f1m + f2m) / (12.0 * h))
}

/// Central differences of `eval` over every parameter entry of the network
/// `net(state)`, compared with `ad` (one tensor per parameter, in
/// `Mlp::params` order). `eval` returns the loss and a branch signature;
/// entries whose signatures differ across the stencil are skipped.
pub fn fd_check_net<T>(
    state: &mut T,
    net: fn(&mut T) -> &mut Mlp,
    ad: &[Tensor],
    mut eval: impl FnMut(&T) -> (f64, u64),
) -> FdReport {
    let mut rep = FdReport::default();
    let n_params = net(state).params().len();
    assert_eq!(n_params, ad.len());
    for (pi, g) in ad.iter().enumerate() {
        for j in 0..g.len() {
            let orig = net(state).params_mut()[pi].value.data()[j];
            let fd = central_difference(|e| {
                net(state).params_mut()[pi].value.data_mut()[j] = orig + e;
                eval(state)
            });
            net(state).params_mut()[pi].value.data_mut()[j] = orig;
            match fd {
                Some(fd) => {
                    rep.max_rel = rep.max_rel.max(rel_err(g.data()[j], fd));
                    rep.checked += 1;
                }
                None => rep.skipped += 1,
            }
        }
    }
    rep
}

/// Central differences of `eval` over the entries of `x`, compared with `ad`.
pub fn fd_check_tensor(x: &Tensor, ad: &Tensor, mut eval: impl FnMut(&Tensor) -> (f64, u64)) -> FdReport {
    assert_eq!(x.shape(), ad.shape());
    let mut rep = FdReport::default();
    let mut y = x.clone();
    for j in 0..x.len() {
        let orig = x.data()[j];
        let fd = central_difference(|e| {
            y.data_mut()[j] = orig + e;
            eval(&y)
        });
        y.data_mut()[j] = orig;
        match fd {
            Some(fd) => {
                rep.max_rel = rep.max_rel.max(rel_err(ad.data()[j], fd));
                rep.checked += 1;
            }
            None => rep.skipped += 1,
        }
    }
    rep
}

/// Gradients of `loss` for every parameter of `net`, zeros where the loss
/// does not reach.
pub fn param_grads(tape: &Tape, loss: reform::nn::Var, net: &Mlp) -> Vec<Tensor> {
    let g = tape.backward(loss).unwrap();
    net.params()
        .iter()
        .map(|p| g.param(p).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
        .collect()
}

/// Random `[rows, cols]` tensor with entries in `[-scale, scale]`.
pub fn uniform(rng: &mut impl rand::Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
    Tensor::matrix(rows, cols, data)
}
