//! 2D discrete Fourier transforms and the Hilbert-transform augmentation.
//!
//! Forward transforms are unnormalized and inverses divide by `H·W`. The DC
//! bin sits at index `(0, 0)`; bin `u` on an axis of length `n` has signed
//! frequency `u` for `u <= n/2` and `u - n` otherwise.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Add, Mul, Sub};

use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub const ZERO: Complex = Complex { re: 0.0, im: 0.0 };

    pub fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    pub fn from_polar(r: f64, theta: f64) -> Self {
        Self { re: r * libm::cos(theta), im: r * libm::sin(theta) }
    }

    pub fn norm(self) -> f64 {
        libm::hypot(self.re, self.im)
    }

    pub fn arg(self) -> f64 {
        libm::atan2(self.im, self.re)
    }

    pub fn conj(self) -> Self {
        Self { re: self.re, im: -self.im }
    }

    pub fn scale(self, s: f64) -> Self {
        Self { re: self.re * s, im: self.im * s }
    }
}

impl Add for Complex {
    type Output = Complex;
    fn add(self, o: Complex) -> Complex {
        Complex::new(self.re + o.re, self.im + o.im)
    }
}

impl Sub for Complex {
    type Output = Complex;
    fn sub(self, o: Complex) -> Complex {
        Complex::new(self.re - o.re, self.im - o.im)
    }
}

impl Mul for Complex {
    type Output = Complex;
    fn mul(self, o: Complex) -> Complex {
        Complex::new(self.re * o.re - self.im * o.im, self.re * o.im + self.im * o.re)
    }
}

/// Complex coefficients on an `h × w` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub h: usize,
    pub w: usize,
    pub bins: Vec<Complex>,
}

impl Spectrum {
    pub fn at(&self, u: usize, v: usize) -> Complex {
        self.bins[u * self.w + v]
    }

    pub fn amplitudes(&self) -> Vec<f64> {
        self.bins.iter().map(|c| c.norm()).collect()
    }
}

/// In-place 1D DFT. Radix-2 for powers of two, direct summation otherwise.
fn fft1d(buf: &mut [Complex], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    if !n.is_power_of_two() {
        let src = buf.to_vec();
        for (k, out) in buf.iter_mut().enumerate() {
            let mut acc = Complex::ZERO;
            for (t, &x) in src.iter().enumerate() {
                let theta = sign * core::f64::consts::TAU * ((k * t) % n) as f64 / n as f64;
                acc = acc + x * Complex::from_polar(1.0, theta);
            }
            *out = acc;
        }
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = Complex::from_polar(1.0, sign * core::f64::consts::TAU * k as f64 / len as f64);
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn fft2_complex(h: usize, w: usize, bins: &mut [Complex], inverse: bool) {
    for row in bins.chunks_mut(w) {
        fft1d(row, inverse);
    }
    let mut col = vec![Complex::ZERO; h];
    for v in 0..w {
        for u in 0..h {
            col[u] = bins[u * w + v];
        }
        fft1d(&mut col, inverse);
        for u in 0..h {
            bins[u * w + v] = col[u];
        }
    }
    if inverse {
        let s = 1.0 / (h * w) as f64;
        for b in bins.iter_mut() {
            *b = b.scale(s);
        }
    }
}

/// Forward transform of a real `h × w` plane.
pub fn fft2(plane: &[f64], h: usize, w: usize) -> Result<Spectrum> {
    if h < 2 || w < 2 || plane.len() != h * w {
        bail!(Dimension, "fft2 needs an h x w plane with h, w >= 2 (got {} values for {}x{})", plane.len(), h, w);
    }
    let mut bins: Vec<Complex> = plane.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fft2_complex(h, w, &mut bins, false);
    Ok(Spectrum { h, w, bins })
}

/// Inverse transform; returns the complex plane.
pub fn ifft2_complex(s: &Spectrum) -> Vec<Complex> {
    let mut bins = s.bins.clone();
    fft2_complex(s.h, s.w, &mut bins, true);
    bins
}

/// Inverse transform keeping the real part.
pub fn ifft2(s: &Spectrum) -> Vec<f64> {
    ifft2_complex(s).into_iter().map(|c| c.re).collect()
}

/// Signed frequency of bin `u` on an axis of length `n`, in `(-n/2, n/2]`.
pub fn signed_freq(u: usize, n: usize) -> i64 {
    if 2 * u <= n {
        u as i64
    } else {
        u as i64 - n as i64
    }
}

/// `sgn(s(u) + s(v))` as -1, 0 or 1.
pub fn hilbert_sign(u: usize, v: usize, h: usize, w: usize) -> i64 {
    (signed_freq(u, h) + signed_freq(v, w)).signum()
}

/// Multiplies every bin by `-i·sgn(ξ)`.
pub fn apply_hilbert_multiplier(s: &mut Spectrum) {
    for u in 0..s.h {
        for v in 0..s.w {
            let sg = hilbert_sign(u, v, s.h, s.w) as f64;
            let c = s.bins[u * s.w + v];
            // -i·sg·(re + i·im) = sg·im - i·sg·re
            s.bins[u * s.w + v] = Complex::new(sg * c.im, -sg * c.re);
        }
    }
}

fn hilbert_plane(plane: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    let mut s = fft2(plane, h, w)?;
    apply_hilbert_multiplier(&mut s);
    Ok(ifft2(&s))
}

fn check_image(image: &[f64], h: usize, w: usize, c: usize) -> Result<()> {
    if h < 2 || w < 2 || c == 0 || image.len() != h * w * c {
        bail!(Dimension, "image of {} values is not {}x{}x{}", image.len(), h, w, c);
    }
    Ok(())
}

fn channel(image: &[f64], c: usize, ch: usize) -> Vec<f64> {
    image.iter().skip(ch).step_by(c).copied().collect()
}

fn put_channel(image: &mut [f64], c: usize, ch: usize, plane: &[f64]) {
    for (dst, &v) in image.iter_mut().skip(ch).step_by(c).zip(plane) {
        *dst = v;
    }
}

/// Hilbert transform of an `h × w × c` channel-last image, channel by channel.
pub fn hilbert_transform(image: &[f64], h: usize, w: usize, c: usize) -> Result<Vec<f64>> {
    check_image(image, h, w, c)?;
    let mut out = vec![0.0; image.len()];
    for ch in 0..c {
        let plane = hilbert_plane(&channel(image, c, ch), h, w)?;
        put_channel(&mut out, c, ch, &plane);
    }
    Ok(out)
}

/// Hilbert phase with the original amplitude, before clipping.
pub fn ht_augment_unclipped(image: &[f64], h: usize, w: usize, c: usize) -> Result<Vec<f64>> {
    check_image(image, h, w, c)?;
    let mut out = vec![0.0; image.len()];
    for ch in 0..c {
        let plane = channel(image, c, ch);
        let orig = fft2(&plane, h, w)?;
        let ht = fft2(&hilbert_plane(&plane, h, w)?, h, w)?;
        let scale = orig.bins.iter().fold(0.0f64, |m, b| m.max(b.norm())).max(f64::MIN_POSITIVE);
        let tiny = 1e-10 * scale;
        let bins = orig
            .bins
            .iter()
            .zip(&ht.bins)
            .map(|(&o, &t)| {
                let phase = if t.norm() <= tiny { o.arg() } else { t.arg() };
                Complex::from_polar(o.norm(), phase)
            })
            .collect();
        let mixed = Spectrum { h, w, bins };
        put_channel(&mut out, c, ch, &ifft2(&mixed));
    }
    Ok(out)
}

/// Out-of-distribution augmentation: Hilbert phase, original amplitude, clipped to `[0, 1]`.
pub fn ht_augment(image: &[f64], h: usize, w: usize, c: usize) -> Result<Vec<f64>> {
    let mut out = ht_augment_unclipped(image, h, w, c)?;
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SaRng;

    fn random_plane(seed: u64, n: usize) -> Vec<f64> {
        let mut r = SaRng::new(seed);
        (0..n).map(|_| r.uniform()).collect()
    }

    #[test]
    fn constant_image_has_only_dc() {
        let s = fft2(&[0.3; 64], 8, 8).unwrap();
        assert!((s.at(0, 0).re - 0.3 * 64.0).abs() < 1e-12);
        for (i, b) in s.bins.iter().enumerate().skip(1) {
            assert!(b.norm() < 1e-12, "bin {i}");
        }
    }

    #[test]
    fn roundtrip_power_of_two_and_odd() {
        for (h, w) in [(16, 16), (8, 4), (6, 5)] {
            let p = random_plane(1, h * w);
            let back = ifft2(&fft2(&p, h, w).unwrap());
            for (a, b) in p.iter().zip(&back) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn radix2_matches_direct_dft() {
        let p = random_plane(2, 8 * 8);
        let fast = fft2(&p, 8, 8).unwrap();
        for u in 0..8 {
            for v in 0..8 {
                let mut acc = Complex::ZERO;
                for y in 0..8 {
                    for x in 0..8 {
                        let th = -core::f64::consts::TAU * ((u * y) as f64 / 8.0 + (v * x) as f64 / 8.0);
                        acc = acc + Complex::from_polar(p[y * 8 + x], th);
                    }
                }
                assert!((acc - fast.at(u, v)).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn single_cosine_has_two_bins() {
        // cos(2π·2x/8) along x: bins (0, 2) and (0, 6), each H·W/2.
        let (h, w) = (8, 8);
        let p: Vec<f64> =
            (0..h * w).map(|i| libm::cos(core::f64::consts::TAU * 2.0 * (i % w) as f64 / w as f64)).collect();
        let s = fft2(&p, h, w).unwrap();
        for u in 0..h {
            for v in 0..w {
                let expect = if u == 0 && (v == 2 || v == 6) { 32.0 } else { 0.0 };
                assert!((s.at(u, v).re - expect).abs() < 1e-9 && s.at(u, v).im.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn parseval() {
        let p = random_plane(3, 16 * 16);
        let s = fft2(&p, 16, 16).unwrap();
        let e_space: f64 = p.iter().map(|x| x * x).sum();
        let e_freq: f64 = s.bins.iter().map(|b| b.norm() * b.norm()).sum::<f64>() / 256.0;
        assert!((e_space - e_freq).abs() <= 1e-8 * e_space);
    }

    #[test]
    fn conjugate_symmetry_for_real_input() {
        let p = random_plane(4, 8 * 8);
        let s = fft2(&p, 8, 8).unwrap();
        for u in 0..8 {
            for v in 0..8 {
                let mirror = s.at((8 - u) % 8, (8 - v) % 8);
                assert!((s.at(u, v) - mirror.conj()).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn hilbert_of_constant_is_zero() {
        let out = hilbert_transform(&[0.7; 256], 16, 16, 1).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn hilbert_is_linear() {
        let a = random_plane(5, 256);
        let b = random_plane(6, 256);
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x - 0.5 * y).collect();
        let (ha, hb) = (hilbert_transform(&a, 16, 16, 1).unwrap(), hilbert_transform(&b, 16, 16, 1).unwrap());
        let hm = hilbert_transform(&mix, 16, 16, 1).unwrap();
        for i in 0..256 {
            assert!((hm[i] - (2.0 * ha[i] - 0.5 * hb[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn multiplier_twice_is_negated_mask() {
        let p = random_plane(7, 64);
        let s0 = fft2(&p, 8, 8).unwrap();
        let mut s = s0.clone();
        apply_hilbert_multiplier(&mut s);
        apply_hilbert_multiplier(&mut s);
        for u in 0..8 {
            for v in 0..8 {
                let sg = hilbert_sign(u, v, 8, 8);
                let expect = if sg == 0 { Complex::ZERO } else { s0.at(u, v).scale(-1.0) };
                assert!((s.at(u, v) - expect).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn sign_convention() {
        assert_eq!(signed_freq(8, 16), 8);
        assert_eq!(signed_freq(9, 16), -7);
        assert_eq!(hilbert_sign(0, 0, 16, 16), 0);
        assert_eq!(hilbert_sign(1, 15, 16, 16), 0);
        assert_eq!(hilbert_sign(0, 3, 16, 16), 1);
        assert_eq!(hilbert_sign(0, 13, 16, 16), -1);
    }

    #[test]
    fn augment_preserves_amplitude_and_changes_image() {
        let p = random_plane(8, 256);
        let out = ht_augment_unclipped(&p, 16, 16, 1).unwrap();
        let a0 = fft2(&p, 16, 16).unwrap().amplitudes();
        let a1 = fft2(&out, 16, 16).unwrap().amplitudes();
        for (x, y) in a0.iter().zip(&a1) {
            assert!((x - y).abs() <= 1e-6 * x.max(1e-12) || (x - y).abs() < 1e-9);
        }
        let dist: f64 = p.iter().zip(&out).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!(dist > 0.0);
    }

    #[test]
    fn augment_of_constant_is_identity() {
        let p = [0.4; 256];
        let out = ht_augment(&p, 16, 16, 1).unwrap();
        for v in out {
            assert!((v - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn channels_are_independent() {
        let a = random_plane(9, 64);
        let b = random_plane(10, 64);
        let mut rgb = vec![0.0; 128];
        put_channel(&mut rgb, 2, 0, &a);
        put_channel(&mut rgb, 2, 1, &b);
        let h = hilbert_transform(&rgb, 8, 8, 2).unwrap();
        assert_eq!(channel(&h, 2, 0), hilbert_transform(&a, 8, 8, 1).unwrap());
        assert_eq!(channel(&h, 2, 1), hilbert_transform(&b, 8, 8, 1).unwrap());
    }
}
