use rand::distr::Distribution;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Seeded, platform-independent random stream.
///
/// [`Rng::derive`] gives an independent stream per work item, so parallel
/// producers can draw without sharing state and still be reproducible.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream `index` of the family rooted at `seed`.
    pub fn derive(seed: u64, index: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(index);
        Rng { seed, inner }
    }

    /// A child stream of this generator, consuming one draw from it.
    pub fn fork(&mut self) -> Self {
        Rng::new(self.inner.next_u64())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.inner.random::<f64>() < p
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        rand_distr::Normal::new(mean, std)
            .expect("finite std")
            .sample(&mut self.inner)
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

/// Fan-in / fan-out of a conv kernel (`Cout x Cin x kh x kw`) or FC weight (`M x N`).
fn fans(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [m, n] => Ok((n, m)),
        [cout, cin, kh, kw] => Ok((cin * kh * kw, cout * kh * kw)),
        _ => Err(Error::dim(format!(
            "xavier init needs a 2-D or 4-D weight shape, got {shape:?}"
        ))),
    }
}

pub fn xavier_bound(shape: &[usize]) -> Result<f64> {
    let (fan_in, fan_out) = fans(shape)?;
    Ok((6.0 / (fan_in + fan_out) as f64).sqrt())
}

/// Glorot-uniform weights in `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]`.
pub fn xavier_init<T: Real>(shape: &[usize], rng: &mut Rng) -> Result<Tensor<T>> {
    let bound = xavier_bound(shape)?;
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::lit(rng.uniform(-bound, bound)))
        .collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_for_square_fc() {
        let t: Tensor<f64> = xavier_init(&[3, 3], &mut Rng::new(1)).unwrap();
        assert_eq!(xavier_bound(&[3, 3]).unwrap(), 1.0);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn conv_fans() {
        assert_eq!(fans(&[16, 8, 3, 3]).unwrap(), (72, 144));
        assert!(fans(&[5]).is_err());
    }

    #[test]
    fn empirical_variance() {
        // Var(U(-a, a)) = a^2 / 3 = 2 / (fan_in + fan_out)
        let t: Tensor<f64> = xavier_init(&[1000, 1000], &mut Rng::new(7)).unwrap();
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / 2000.0;
        assert!((var - expected).abs() / expected < 0.05, "var {var}");
    }

    #[test]
    fn same_seed_same_tensor() {
        let a: Tensor<f32> = xavier_init(&[4, 2, 3, 3], &mut Rng::new(42)).unwrap();
        let b: Tensor<f32> = xavier_init(&[4, 2, 3, 3], &mut Rng::new(42)).unwrap();
        let c: Tensor<f32> = xavier_init(&[4, 2, 3, 3], &mut Rng::new(43)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn derived_streams_are_distinct_and_stable() {
        let a = Rng::derive(9, 0).uniform(0.0, 1.0);
        let b = Rng::derive(9, 1).uniform(0.0, 1.0);
        assert_ne!(a, b);
        assert_eq!(a, Rng::derive(9, 0).uniform(0.0, 1.0));
    }
}
