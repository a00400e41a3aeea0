use crate::error::{Error, Result};
use crate::tensor::{kernels, Real, Tape, Tensor, Var};

pub const ARTIFACT_THRESHOLD: f64 = 0.01;
/// Weights of `MSE(A1, M)` and `MSE(A2, M)`.
pub const ATTENTION_WEIGHTS: [f64; 2] = [0.8, 1.0];
/// Weights of the quarter, half and full resolution outputs.
pub const SCALE_WEIGHTS: [f64; 3] = [0.6, 0.8, 1.0];

/// `1` where `|dirty - clean| > threshold`, else `0`.
pub fn binary_map<T: Real>(dirty: &[T], clean: &[T], threshold: f64) -> Result<Vec<T>> {
    if dirty.len() != clean.len() {
        return Err(Error::dim(format!(
            "binary map of {} vs {} values",
            dirty.len(),
            clean.len()
        )));
    }
    let t = T::lit(threshold);
    Ok(dirty
        .iter()
        .zip(clean)
        .map(|(&d, &c)| {
            if (d - c).abs() > t {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect())
}

/// `0.8 * MSE(A1, M) + MSE(A2, M)`.
pub fn attention_loss<T: Real>(a1: &Tensor<T>, a2: &Tensor<T>, m: &Tensor<T>) -> Result<T> {
    Ok(T::lit(ATTENTION_WEIGHTS[0]) * kernels::mse(a1, m)?
        + T::lit(ATTENTION_WEIGHTS[1]) * kernels::mse(a2, m)?)
}

/// Weighted MSE of the three side outputs against their targets, coarse to fine.
pub fn multiscale_loss<T: Real>(outputs: [&Tensor<T>; 3], targets: [&Tensor<T>; 3]) -> Result<T> {
    let mut total = T::zero();
    for ((f, t), w) in outputs.iter().zip(&targets).zip(SCALE_WEIGHTS) {
        total += T::lit(w) * kernels::mse(f, t)?;
    }
    Ok(total)
}

pub fn total_loss<T: Real>(
    a1: &Tensor<T>,
    a2: &Tensor<T>,
    m: &Tensor<T>,
    outputs: [&Tensor<T>; 3],
    targets: [&Tensor<T>; 3],
) -> Result<T> {
    Ok(attention_loss(a1, a2, m)? + multiscale_loss(outputs, targets)?)
}

/// Clean batch average-pooled to quarter, half and full resolution.
pub fn scale_targets<T: Real>(clean: &Tensor<T>) -> Result<[Tensor<T>; 3]> {
    let half = kernels::avg_pool_2x(clean)?;
    let quarter = kernels::avg_pool_2x(&half)?;
    Ok([quarter, half, clean.clone()])
}

fn weighted_sum<'t, T: Real>(tape: &'t Tape<T>, terms: &[(Var<'t, T>, f64)]) -> Result<Var<'t, T>> {
    let mut acc: Option<Var<'t, T>> = None;
    for &(v, w) in terms {
        let term = if w == 1.0 { v } else { tape.scale(v, w)? };
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::Contract("empty loss".into()))
}

pub fn tape_attention_loss<'t, T: Real>(
    tape: &'t Tape<T>,
    a1: Var<'t, T>,
    a2: Var<'t, T>,
    m: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let l1 = tape.mse(a1, m)?;
    let l2 = tape.mse(a2, m)?;
    weighted_sum(
        tape,
        &[(l1, ATTENTION_WEIGHTS[0]), (l2, ATTENTION_WEIGHTS[1])],
    )
}

pub fn tape_multiscale_loss<'t, T: Real>(
    tape: &'t Tape<T>,
    outputs: [Var<'t, T>; 3],
    targets: [Var<'t, T>; 3],
) -> Result<Var<'t, T>> {
    let mut terms = Vec::with_capacity(3);
    for ((f, t), w) in outputs.into_iter().zip(targets).zip(SCALE_WEIGHTS) {
        terms.push((tape.mse(f, t)?, w));
    }
    weighted_sum(tape, &terms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: f64) -> Tensor<f64> {
        Tensor::full(&[1, 1, 4, 4], v)
    }

    #[test]
    fn threshold_is_strict() {
        let clean = [0.5f64; 4];
        let dirty = [0.5, 0.51, 0.52, 0.48];
        let m = binary_map(&[0.0, 0.01, 0.02, 0.010001], &[0.0; 4], ARTIFACT_THRESHOLD).unwrap();
        assert_eq!(m, vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(binary_map(&clean, &clean, 0.01).unwrap(), vec![0.0; 4]);
        assert_eq!(binary_map(&dirty, &clean, 0.01).unwrap()[2..], [1.0, 1.0]);
        assert!(binary_map(&[0.0; 3], &[0.0; 4], 0.01).is_err());
    }

    #[test]
    fn attention_identities() {
        let m = t(0.0);
        assert_eq!(attention_loss(&m, &m, &m).unwrap(), 0.0);
        assert_eq!(attention_loss(&m, &t(1.0), &m).unwrap(), 1.0);
        assert!((attention_loss(&t(1.0), &m, &m).unwrap() - 0.8).abs() < 1e-15);
    }

    fn r(a: &[Tensor<f64>; 3]) -> [&Tensor<f64>; 3] {
        [&a[0], &a[1], &a[2]]
    }

    #[test]
    fn multiscale_identities() {
        let z = [t(0.0), t(0.0), t(0.0)];
        let o = [t(1.0), t(1.0), t(1.0)];
        assert_eq!(multiscale_loss(r(&z), r(&z)).unwrap(), 0.0);
        assert!((multiscale_loss(r(&o), r(&z)).unwrap() - 2.4).abs() < 1e-12);
        let fine = [t(0.0), t(0.0), Tensor::full(&[1, 1, 4, 4], 0.5f64.sqrt())];
        assert!((multiscale_loss(r(&fine), r(&z)).unwrap() - 0.5).abs() < 1e-12);
        let small = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(multiscale_loss([&small, &z[1], &z[2]], r(&z)).is_err());
    }

    #[test]
    fn targets_pool_clean() {
        let clean = Tensor::<f64>::from_fn(&[1, 1, 32, 32], |i| (i % 32) as f64);
        let [q, h, f] = scale_targets(&clean).unwrap();
        assert_eq!(q.shape(), &[1, 1, 8, 8]);
        assert_eq!(h.shape(), &[1, 1, 16, 16]);
        assert_eq!(f.data(), clean.data());
        assert_eq!(q.data()[0], 1.5);
    }

    #[test]
    fn tape_losses_match_direct() {
        let tape = Tape::<f64>::new();
        let a1 = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64 / 16.0);
        let a2 = Tensor::from_fn(&[1, 1, 4, 4], |i| 1.0 - i as f64 / 20.0);
        let m = Tensor::from_fn(&[1, 1, 4, 4], |i| (i % 2) as f64);
        let direct = attention_loss(&a1, &a2, &m).unwrap();
        let v = tape_attention_loss(
            &tape,
            tape.constant(a1.clone()),
            tape.constant(a2.clone()),
            tape.constant(m.clone()),
        )
        .unwrap();
        assert!((v.item().unwrap() - direct).abs() < 1e-15);

        let ms = multiscale_loss([&a1, &a2, &m], [&m, &a1, &a2]).unwrap();
        let c = |x: &Tensor<f64>| tape.constant(x.clone());
        let v =
            tape_multiscale_loss(&tape, [c(&a1), c(&a2), c(&m)], [c(&m), c(&a1), c(&a2)]).unwrap();
        assert!((v.item().unwrap() - ms).abs() < 1e-15);
    }
}
