#![allow(dead_code)]

use osar_core::tensor::{Tape, Var};
use osar_core::{Result, Rng, Tensor};

/// Central-difference step used by every gradient oracle.
pub const FD_STEP: f64 = 1e-3;

/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(-scale, scale))
}

/// Compares tape gradients of `loss_fn` against central finite differences.
///
/// `coords` limits how many coordinates per parameter are probed (chosen at
/// random); `None` probes every element. Returns the worst relative error
/// and the number of coordinates checked.
pub fn check_gradients<F>(
    params: &[Tensor<f64>],
    loss_fn: F,
    coords: Option<usize>,
    rng: &mut Rng,
) -> (f64, usize)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |ps: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = ps.iter().map(|p| tape.param(p)).collect();
        loss_fn(&tape, &vars).unwrap().item().unwrap()
    };

    let tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.param(p)).collect();
    let loss = loss_fn(&tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            grads
                .wrt(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let idxs: Vec<usize> = match coords {
            None => (0..p.numel()).collect(),
            Some(k) => (0..k.min(p.numel()))
                .map(|_| rng.below(p.numel()))
                .collect(),
        };
        for i in idxs {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + FD_STEP;
            let up = eval(&work);
            work[pi].data_mut()[i] = orig - FD_STEP;
            let down = eval(&work);
            work[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[pi][i], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Like [`check_gradients`] with `Some(per_tensor)`, but for piecewise-smooth
/// losses: a probe whose central differences at `FD_STEP` and `FD_STEP / 2`
/// disagree straddles a kink and is replaced by another random coordinate.
/// Returns the worst relative error, the coordinates checked and the number
/// of probes replaced.
pub fn check_gradients_smooth<F>(
    params: &[Tensor<f64>],
    loss_fn: F,
    per_tensor: usize,
    rng: &mut Rng,
) -> (f64, usize, usize)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |ps: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = ps.iter().map(|p| tape.param(p)).collect();
        loss_fn(&tape, &vars).unwrap().item().unwrap()
    };
    let tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.param(p)).collect();
    let grads = tape.backward(loss_fn(&tape, &vars).unwrap()).unwrap();

    let mut work = params.to_vec();
    let mut central = |pi: usize, i: usize, h: f64| {
        let orig = work[pi].data()[i];
        work[pi].data_mut()[i] = orig + h;
        let up = eval(&work);
        work[pi].data_mut()[i] = orig - h;
        let down = eval(&work);
        work[pi].data_mut()[i] = orig;
        (up - down) / (2.0 * h)
    };
    let (mut worst, mut checked, mut replaced) = (0.0f64, 0, 0);
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads
            .wrt(vars[pi])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; p.numel()]);
        let mut done = 0;
        let mut attempts = 0;
        while done < per_tensor.min(p.numel()) && attempts < 20 * per_tensor {
            attempts += 1;
            let i = rng.below(p.numel());
            let numeric = central(pi, i, FD_STEP);
            let half = central(pi, i, FD_STEP / 2.0);
            if rel_err(numeric, half) > 1e-6 {
                replaced += 1;
                continue;
            }
            worst = worst.max(rel_err(analytic[i], numeric));
            checked += 1;
            done += 1;
        }
    }
    (worst, checked, replaced)
}
