//! Counter-addressed random draws.
//!
//! Every `(seed, stream, pixel)` triple maps to a fixed position in a ChaCha8
//! keystream, so draws do not depend on evaluation order and row-parallel
//! evaluation is bit-identical to a sequential pass.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erf_inv;
use statrs::function::gamma::{gamma_ur, ln_gamma};

/// Stream id reserved for per-pixel quantities sampled once at initialization.
pub(crate) const INIT_STREAM: u64 = u64::MAX;

/// Number of 64-bit words every pixel consumes from a step stream.
pub(crate) const WORDS_PER_PIXEL: usize = 4;

/// Generator positioned at `pixel` within `stream` of `seed`.
pub(crate) fn substream(seed: u64, stream: u64, pixel: usize, words_per_pixel: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    // word position counts 32-bit words
    rng.set_word_pos((pixel as u128) * (words_per_pixel as u128) * 2);
    rng
}

/// Mixes a trial index into a base seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in `[0, 1)` with 53 bits of resolution.
#[inline]
pub(crate) fn unit(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Two independent standard normals from two uniform words (Box-Muller).
#[inline]
pub(crate) fn normal_pair(a: u64, b: u64) -> (f64, f64) {
    let u1 = 1.0 - unit(a); // (0, 1]
    let u2 = unit(b);
    let r = (-2.0 * u1.ln()).sqrt();
    let phi = std::f64::consts::TAU * u2;
    (r * phi.cos(), r * phi.sin())
}

#[inline]
pub(crate) fn next_normal_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let a = rng.next_u64();
    let b = rng.next_u64();
    normal_pair(a, b)
}

/// Poisson quantile: the smallest `k` with `P(N <= k) > u` for `N ~ Pois(lambda)`.
///
/// Inverse-transform sampling keeps draws monotone in `lambda` for a fixed `u`,
/// which common-random-number comparisons rely on.
pub fn poisson_quantile(lambda: f64, u: f64) -> f64 {
    if !(lambda > 0.0) {
        return 0.0;
    }
    if lambda < 30.0 {
        let cap = (lambda + 40.0 * lambda.sqrt() + 100.0) as u64;
        let mut k = 0u64;
        let mut p = (-lambda).exp();
        let mut cdf = p;
        while cdf <= u && k < cap {
            k += 1;
            p *= lambda / k as f64;
            cdf += p;
        }
        return k as f64;
    }
    let sd = lambda.sqrt();
    let z = std::f64::consts::SQRT_2 * erf_inv((2.0 * u - 1.0).clamp(-1.0 + 1e-16, 1.0 - 1e-16));
    if lambda > 1e12 {
        return (lambda + z * sd).round().max(0.0);
    }
    // Cornish-Fisher start, then walk with the pmf recursion.
    let start = (lambda + z * sd + (z * z - 1.0) / 6.0).floor().max(0.0);
    let mut k = start;
    let mut p = (k * lambda.ln() - lambda - ln_gamma(k + 1.0)).exp();
    let mut cdf = gamma_ur(k + 1.0, lambda);
    if cdf > u {
        while k > 0.0 && cdf - p > u {
            cdf -= p;
            p *= k / lambda;
            k -= 1.0;
        }
    } else {
        while cdf <= u && p > 0.0 {
            k += 1.0;
            p *= lambda / k;
            cdf += p;
        }
    }
    k
}
