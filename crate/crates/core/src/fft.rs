//! Radix-2 complex FFT and the full real cross-correlation built on it.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
#[allow(unused_imports)] // inherent f64 math shadows it when std is linked
use num_traits::Float;

/// In-place iterative radix-2 FFT over split real/imaginary buffers.
/// `inverse` computes the unnormalized inverse transform.
pub fn fft_in_place(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    assert!(n.is_power_of_two() && im.len() == n);
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        let half = len / 2;
        let twiddles: Vec<(f64, f64)> = (0..half)
            .map(|k| {
                let a = ang * k as f64;
                (a.cos(), a.sin())
            })
            .collect();
        for start in (0..n).step_by(len) {
            for (k, &(wr, wi)) in twiddles.iter().enumerate() {
                let a = start + k;
                let b = a + half;
                let xr = re[b] * wr - im[b] * wi;
                let xi = re[b] * wi + im[b] * wr;
                re[b] = re[a] - xr;
                im[b] = im[a] - xi;
                re[a] += xr;
                im[a] += xi;
            }
        }
        len <<= 1;
    }
}

/// Spectrum of a zero-padded real sequence, ready for repeated correlation.
pub struct PaddedSpectrum {
    re: Vec<f64>,
    im: Vec<f64>,
}

impl PaddedSpectrum {
    pub fn new(x: &[f64], padded_len: usize) -> Self {
        let mut re = vec![0.0; padded_len];
        let mut im = vec![0.0; padded_len];
        re[..x.len()].copy_from_slice(x);
        fft_in_place(&mut re, &mut im, false);
        Self { re, im }
    }
}

/// FFT length that makes circular correlation of two length-`len` signals
/// equal to the linear one.
pub fn correlation_len(len: usize) -> usize {
    (2 * len).next_power_of_two().max(2)
}

/// Full linear cross-correlation `c[lag] = Σ_n a[n + lag] · b[n]` for lags
/// `-(len-1) ..= len-1`, returned in that order (length `2·len − 1`).
pub fn cross_correlation(a: &PaddedSpectrum, b: &PaddedSpectrum, len: usize) -> Vec<f64> {
    let n = a.re.len();
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for k in 0..n {
        // A · conj(B)
        re[k] = a.re[k] * b.re[k] + a.im[k] * b.im[k];
        im[k] = a.im[k] * b.re[k] - a.re[k] * b.im[k];
    }
    fft_in_place(&mut re, &mut im, true);
    let scale = 1.0 / n as f64;
    let mut out = Vec::with_capacity(2 * len - 1);
    for lag in (1..len).rev() {
        out.push(re[n - lag] * scale);
    }
    for lag in 0..len {
        out.push(re[lag] * scale);
    }
    out
}
