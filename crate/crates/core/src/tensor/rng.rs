//! Counter-based random numbers.
//!
//! Every variate is a pure function of a [`NoiseKey`] and an element index,
//! so a stochastic forward pass can be replayed exactly and filling a buffer
//! in parallel gives the same bytes as filling it sequentially.
//!
//! The block function is Philox4x32 with 10 rounds. Gaussian variates come
//! from the inverse normal CDF (Wichura's AS241) applied to a 53-bit uniform.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

/// Identifies one independent stream of noise.
///
/// `(seed, layer, step, draw, element)` maps to exactly one variate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoiseKey {
    pub seed: u64,
    pub layer: u32,
    pub step: u64,
    pub draw: u32,
}

impl NoiseKey {
    pub fn new(seed: u64, layer: u32, step: u64, draw: u32) -> Self {
        Self {
            seed,
            layer,
            step,
            draw,
        }
    }

    pub fn with_draw(self, draw: u32) -> Self {
        Self { draw, ..self }
    }

    pub fn with_layer(self, layer: u32) -> Self {
        Self { layer, ..self }
    }

    fn philox_key(&self) -> [u32; 2] {
        let mut h = splitmix64(self.seed);
        h = splitmix64(h ^ u64::from(self.layer));
        h = splitmix64(h ^ (u64::from(self.draw) << 32 | 0x5bd1));
        [h as u32, (h >> 32) as u32]
    }

    fn counter(&self, index: u64) -> [u32; 4] {
        [
            index as u32,
            (index >> 32) as u32,
            self.step as u32,
            (self.step >> 32) as u32,
        ]
    }

    /// Uniform variate in the open interval (0, 1) for one element.
    pub fn uniform(&self, index: u64) -> f64 {
        let out = philox4x32_10(self.counter(index), self.philox_key());
        let bits = ((u64::from(out[0]) << 32) | u64::from(out[1])) >> 11;
        (bits as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal variate for one element.
    pub fn normal(&self, index: u64) -> f64 {
        inverse_normal_cdf(self.uniform(index))
    }
}

/// SplitMix64 finalizer, used to derive keys and sub-seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from a base seed and a tag.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(base) ^ tag.rotate_left(17))
}

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

/// The Philox4x32 block function with 10 rounds.
pub fn philox4x32_10(mut ctr: [u32; 4], mut key: [u32; 2]) -> [u32; 4] {
    for round in 0..10 {
        if round > 0 {
            key[0] = key[0].wrapping_add(PHILOX_W0);
            key[1] = key[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, ctr[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, ctr[2]);
        ctr = [hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0];
    }
    ctr
}

/// Inverse of the standard normal CDF (AS241, about 1e-16 relative accuracy).
// Coefficients are kept exactly as published.
#[allow(clippy::excessive_precision, clippy::inconsistent_digit_grouping)]
pub fn inverse_normal_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2509.080_928_730_122_7 * r + 33430.575_583_588_128) * r + 67265.770_927_008_7) * r
            + 45921.953_931_549_87)
            * r
            + 13731.693_765_509_461)
            * r
            + 1971.590_950_306_551_4)
            * r
            + 133.141_667_891_784_38)
            * r
            + 3.387_132_872_796_366_6;
        let den = ((((((5226.495_278_852_546 * r + 28729.085_735_721_943) * r + 39307.895_800_092_71) * r
            + 21213.794_301_586_597)
            * r
            + 5394.196_021_424_751)
            * r
            + 687.187_007_492_057_9)
            * r
            + 42.313_330_701_600_91)
            * r
            + 1.0;
        return q * num / den;
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 0.022_723_844_989_269_184) * r + 0.241_780_725_177_450_6)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_8e-9 * r + 5.475_938_084_995_345e-4) * r + 0.015_198_666_563_616_457)
            * r
            + 0.148_103_976_427_480_08)
            * r
            + 0.689_767_334_985_1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_759)
            * r
            + 1.0;
        num / den
    } else {
        r -= 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 0.001_242_660_947_388_078_4)
            * r
            + 0.026_532_189_526_576_124)
            * r
            + 0.296_560_571_828_504_9)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den =
            ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r + 1.846_318_317_510_054_8e-5) * r
                + 7.868_691_311_456_133e-4)
                * r
                + 0.014_875_361_290_850_615)
                * r
                + 0.136_929_880_922_735_8)
                * r
                + 0.599_832_206_555_888)
                * r
                + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// i.i.d. standard normal tensor; a pure function of `(key, shape)`.
pub fn sample_standard_normal<T: Scalar>(shape: &[usize], key: NoiseKey) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut data = vec![T::zero(); n];
    data.par_iter_mut()
        .with_min_len(4096)
        .enumerate()
        .for_each(|(i, v)| *v = T::of(key.normal(i as u64)));
    Tensor::from_parts(shape.to_vec(), data)
}

/// i.i.d. uniform (0, 1) tensor; a pure function of `(key, shape)`.
pub fn sample_uniform<T: Scalar>(shape: &[usize], key: NoiseKey) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let mut data = vec![T::zero(); n];
    data.par_iter_mut()
        .with_min_len(4096)
        .enumerate()
        .for_each(|(i, v)| *v = T::of(key.uniform(i as u64)));
    Tensor::from_parts(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Known-answer vectors from the Random123 distribution.
    #[test]
    fn philox_known_answers() {
        assert_eq!(
            philox4x32_10([0, 0, 0, 0], [0, 0]),
            [0x6627_e8d5, 0xe169_c58d, 0xbc57_ac4c, 0x9b00_dbd8]
        );
        assert_eq!(
            philox4x32_10([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f_276d, 0x41c8_3b0e, 0xa20b_c7c6, 0x6d54_51fd]
        );
        assert_eq!(
            philox4x32_10(
                [0x243f_6a88, 0x85a3_08d3, 0x1319_8a2e, 0x0370_7344],
                [0xa409_3822, 0x299f_31d0]
            ),
            [0xd16c_fe09, 0x94fd_cceb, 0x5001_e420, 0x2412_6ea1]
        );
    }

    #[test]
    fn inverse_cdf_matches_statrs() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let n = Normal::new(0.0, 1.0).unwrap();
        for &p in &[1e-300, 1e-12, 1e-6, 0.01, 0.2, 0.4, 0.5, 0.6, 0.975, 1.0 - 1e-9] {
            let ours = inverse_normal_cdf(p);
            // round-trip through the oracle CDF
            let back = n.cdf(ours);
            assert!(
                ((back - p) / p.min(1.0 - p)).abs() < 1e-9,
                "p={p} ours={ours} back={back}"
            );
        }
        assert_eq!(inverse_normal_cdf(0.5), 0.0);
    }

    #[test]
    fn uniform_is_open_interval() {
        let key = NoiseKey::new(1, 2, 3, 4);
        for i in 0..10_000 {
            let u = key.uniform(i);
            assert!(u > 0.0 && u < 1.0);
        }
    }

    #[test]
    fn same_key_same_bytes() {
        let key = NoiseKey::new(9, 1, 77, 0);
        let a = sample_standard_normal::<f32>(&[3, 5, 7], key);
        let b = sample_standard_normal::<f32>(&[3, 5, 7], key);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn thread_count_invariance() {
        let key = NoiseKey::new(5, 0, 11, 2);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| sample_standard_normal::<f64>(&[50_000], key));
        let b = four.install(|| sample_standard_normal::<f64>(&[50_000], key));
        assert_eq!(a.data(), b.data());
    }
}
