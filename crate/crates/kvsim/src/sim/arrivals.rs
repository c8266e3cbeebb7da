//! Poisson arrival generation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};

/// `n` arrival timestamps with i.i.d. exponential gaps of mean `1/rate`,
/// starting from the first gap after time zero. Non-decreasing by
/// construction and fully determined by the seed.
pub fn gen_poisson_arrivals(rate: f64, n: usize, seed: u64) -> Result<Vec<f64>> {
    if rate <= 0.0 || !rate.is_finite() {
        return Err(Error::invalid(format!(
            "arrival rate must be > 0, got {rate}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exp = Exp::new(rate).expect("positive rate");
    let mut arrivals = Vec::with_capacity(n);
    let mut t = 0.0;
    for _ in 0..n {
        t += exp.sample(&mut rng);
        arrivals.push(t);
    }
    Ok(arrivals)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_count_gives_empty_list() {
        assert!(gen_poisson_arrivals(10.0, 0, 1).unwrap().is_empty());
    }

    #[test]
    fn same_seed_same_sequence() {
        let a = gen_poisson_arrivals(5.0, 100, 42).unwrap();
        let b = gen_poisson_arrivals(5.0, 100, 42).unwrap();
        assert_eq!(a, b);
        let c = gen_poisson_arrivals(5.0, 100, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn arrivals_never_decrease() {
        let a = gen_poisson_arrivals(100.0, 1000, 7).unwrap();
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn mean_gap_matches_rate() {
        // Law of large numbers at a fixed seed: 10k gaps at rate 10
        // average to 0.1s within 5%.
        let a = gen_poisson_arrivals(10.0, 10_000, 123).unwrap();
        let mean_gap = a.last().unwrap() / 10_000.0;
        assert!(
            (0.095..=0.105).contains(&mean_gap),
            "mean gap {mean_gap} outside [0.095, 0.105]"
        );
    }

    #[test]
    fn bad_rate_rejected() {
        assert!(gen_poisson_arrivals(0.0, 1, 1).is_err());
        assert!(gen_poisson_arrivals(-1.0, 1, 1).is_err());
    }
}
