//! 2D discrete Fourier transform and the randomized Gaussian low-pass used to
//! degrade conditioning inputs during training.
//!
//! The forward transform is unnormalized, `X(k) = sum_n x(n) e^{-2 pi i k.n/N}`,
//! and the inverse carries the `1/(H W)` factor. Coefficients are stored in
//! natural FFT order; [`frequency`] maps a storage index to its zero-centered
//! integer frequency in `[-floor(N/2), ceil(N/2) - 1]`.

use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::Field;

pub const MAX_ALPHA: f64 = 0.8;

/// Zero-centered integer frequency of storage index `k` along an axis of length `n`.
pub fn frequency(k: usize, n: usize) -> i64 {
    if k < n - n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    height: usize,
    width: usize,
    coeffs: Vec<Complex64>,
}

impl Spectrum {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    /// Coefficient at zero-centered frequencies `(ky, kx)`.
    pub fn at(&self, ky: i64, kx: i64) -> Complex64 {
        let i = ky.rem_euclid(self.height as i64) as usize;
        let j = kx.rem_euclid(self.width as i64) as usize;
        self.coeffs[i * self.width + j]
    }

    /// `sum |X(k)|^2` over frequencies with `|k| > radius`.
    pub fn energy_above(&self, radius: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..self.height {
            let ky = frequency(i, self.height) as f64;
            for j in 0..self.width {
                let kx = frequency(j, self.width) as f64;
                if (kx * kx + ky * ky).sqrt() > radius {
                    total += self.coeffs[i * self.width + j].norm_sqr();
                }
            }
        }
        total
    }

    /// Elementwise product with a real filter in the same storage order.
    pub fn filtered(&self, filter: &[f64]) -> Result<Spectrum> {
        if filter.len() != self.coeffs.len() {
            return Err(Error::Shape(format!(
                "filter has {} entries, spectrum {}",
                filter.len(),
                self.coeffs.len()
            )));
        }
        Ok(Spectrum {
            height: self.height,
            width: self.width,
            coeffs: self.coeffs.iter().zip(filter).map(|(c, g)| c * g).collect(),
        })
    }

    /// Full complex inverse transform.
    pub fn inverse(&self) -> Vec<Complex64> {
        let mut data = self.coeffs.clone();
        transform_2d(&mut data, self.height, self.width, FftDirection::Inverse);
        let scale = 1.0 / (self.height * self.width) as f64;
        data.iter_mut().for_each(|v| *v *= scale);
        data
    }
}

/// Separable transform in place.
fn transform_2d(data: &mut [Complex64], h: usize, w: usize, direction: FftDirection) {
    let mut planner = FftPlanner::new();
    planner.plan_fft(w, direction).process(data);
    let col_fft = planner.plan_fft(h, direction);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = data[i * w + j];
        }
        col_fft.process(&mut col);
        for i in 0..h {
            data[i * w + j] = col[i];
        }
    }
}

/// Forward transform of one row-major `height x width` real channel.
pub fn dft2(values: &[f64], height: usize, width: usize) -> Result<Spectrum> {
    if height == 0 || width == 0 {
        return Err(Error::Argument("transform dimensions must be positive".into()));
    }
    if values.len() != height * width {
        return Err(Error::Shape(format!(
            "{} values for a {height}x{width} transform",
            values.len()
        )));
    }
    let mut coeffs: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform_2d(&mut coeffs, height, width, FftDirection::Forward);
    Ok(Spectrum {
        height,
        width,
        coeffs,
    })
}

/// Real part of the inverse transform.
pub fn idft2(spectrum: &Spectrum) -> Vec<f64> {
    spectrum.inverse().iter().map(|c| c.re).collect()
}

/// Smoothing strength in `[0, 0.8]`; zero means no smoothing.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct SmoothingStrength(f64);

impl SmoothingStrength {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=MAX_ALPHA).contains(&alpha) {
            return Err(Error::Argument(format!(
                "smoothing strength {alpha} outside [0, {MAX_ALPHA}]"
            )));
        }
        Ok(SmoothingStrength(alpha))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Filter bandwidth in integer-frequency units.
pub fn bandwidth(height: usize, width: usize, alpha: SmoothingStrength) -> f64 {
    let half_min = height.min(width) as f64 / 2.0;
    0.5 * (half_min * (1.0 - alpha.value())).max(1.0)
}

/// Isotropic Gaussian low-pass `exp(-(kx^2 + ky^2) / (2 s^2))` in storage order.
pub fn gaussian_lowpass(height: usize, width: usize, alpha: SmoothingStrength) -> Vec<f64> {
    let s = bandwidth(height, width, alpha);
    let denom = 2.0 * s * s;
    let mut out = Vec::with_capacity(height * width);
    for i in 0..height {
        let ky = frequency(i, height) as f64;
        for j in 0..width {
            let kx = frequency(j, width) as f64;
            out.push((-(kx * kx + ky * ky) / denom).exp());
        }
    }
    out
}

/// Low-pass every channel of `field`. `alpha = 0` returns the field untouched.
pub fn smooth(field: &Field, alpha: SmoothingStrength) -> Result<Field> {
    if alpha.value() == 0.0 {
        return Ok(field.clone());
    }
    let g = field.grid();
    let filter = gaussian_lowpass(g.height, g.width, alpha);
    let planes = field
        .planes()
        .iter()
        .map(|p| Ok(idft2(&dft2(p, g.height, g.width)?.filtered(&filter)?)))
        .collect::<Result<Vec<_>>>()?;
    Field::from_planes(*g, field.channels().to_vec(), &planes)
}

/// Uniform draw on `[0, 0.8]`.
pub fn sample_alpha<R: Rng + ?Sized>(rng: &mut R) -> SmoothingStrength {
    SmoothingStrength(rng.random_range(0.0..=MAX_ALPHA))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Channel, Grid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_plane(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn field_of(h: usize, w: usize, planes: &[Vec<f64>]) -> Field {
        let g = Grid::new(0.0, 0.0, 1.0, 1.0, h, w).unwrap();
        let ch = (0..planes.len()).map(|k| Channel::new(format!("c{k}"), "1")).collect();
        Field::from_planes(g, ch, planes).unwrap()
    }

    /// Textbook double sum, independent of the separable implementation.
    fn brute_dft(x: &[f64], h: usize, w: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        for ky in 0..h {
            for kx in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..h {
                    for j in 0..w {
                        let phase = -2.0
                            * std::f64::consts::PI
                            * ((ky * i) as f64 / h as f64 + (kx * j) as f64 / w as f64);
                        acc += x[i * w + j] * Complex64::from_polar(1.0, phase);
                    }
                }
                out[ky * w + kx] = acc;
            }
        }
        out
    }

    #[test]
    fn frequency_ranges() {
        let even: Vec<i64> = (0..4).map(|k| frequency(k, 4)).collect();
        assert_eq!(even, vec![0, 1, -2, -1]);
        let odd: Vec<i64> = (0..5).map(|k| frequency(k, 5)).collect();
        assert_eq!(odd, vec![0, 1, 2, -2, -1]);
    }

    #[test]
    fn constant_field_has_only_dc() {
        let s = dft2(&vec![2.5; 12], 3, 4).unwrap();
        assert!((s.at(0, 0) - Complex64::new(2.5 * 12.0, 0.0)).norm() < 1e-12);
        for (k, c) in s.coeffs().iter().enumerate().skip(1) {
            assert!(c.norm() < 1e-12, "coefficient {k} = {c}");
        }
    }

    #[test]
    fn matches_brute_force_dft() {
        let x = random_plane(6 * 5, 3);
        let fast = dft2(&x, 6, 5).unwrap();
        for (a, b) in fast.coeffs().iter().zip(brute_dft(&x, 6, 5)) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn roundtrip_and_parseval() {
        let x = random_plane(256, 11);
        let s = dft2(&x, 16, 16).unwrap();
        let inv = s.inverse();
        for (a, b) in inv.iter().zip(&x) {
            assert!((a.re - b).abs() <= 1e-9 * b.abs().max(1.0));
            assert!(a.im.abs() < 1e-9);
        }
        let spatial: f64 = x.iter().map(|v| v * v).sum();
        let spectral: f64 = brute_dft(&x, 16, 16).iter().map(|c| c.norm_sqr()).sum::<f64>() / 256.0;
        assert!((spatial - spectral).abs() < 1e-9 * spatial);
    }

    #[test]
    fn bandwidth_values() {
        let a0 = SmoothingStrength::new(0.0).unwrap();
        let a8 = SmoothingStrength::new(0.8).unwrap();
        assert_eq!(bandwidth(64, 64, a0), 16.0);
        assert!((bandwidth(64, 64, a8) - 3.2).abs() < 1e-12);
        // clamp kicks in on tiny grids
        assert_eq!(bandwidth(2, 2, a8), 0.5);
        for a in [a0, a8] {
            assert_eq!(gaussian_lowpass(8, 6, a)[0], 1.0);
        }
    }

    #[test]
    fn alpha_range_is_checked() {
        assert!(SmoothingStrength::new(-0.01).is_err());
        assert!(SmoothingStrength::new(0.81).is_err());
        assert!(SmoothingStrength::new(f64::NAN).is_err());
    }

    #[test]
    fn zero_alpha_is_bit_exact_bypass() {
        let f = field_of(8, 8, &[random_plane(64, 1), random_plane(64, 2)]);
        assert_eq!(smooth(&f, SmoothingStrength::new(0.0).unwrap()).unwrap(), f);
    }

    #[test]
    fn constant_field_is_unchanged() {
        let f = field_of(8, 6, &[vec![3.0; 48]]);
        let s = smooth(&f, SmoothingStrength::new(0.6).unwrap()).unwrap();
        assert!(s.data().iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn high_frequency_energy_decreases_with_alpha() {
        let n = 16;
        let f = field_of(n, n, &[random_plane(n * n, 5)]);
        let mut prev = f64::INFINITY;
        for alpha in [0.0, 0.2, 0.4, 0.6, 0.8] {
            let s = smooth(&f, SmoothingStrength::new(alpha).unwrap()).unwrap();
            let spec = brute_dft(s.data(), n, n);
            let energy: f64 = (0..n * n)
                .filter(|k| {
                    let ky = frequency(k / n, n) as f64;
                    let kx = frequency(k % n, n) as f64;
                    (kx * kx + ky * ky).sqrt() > n as f64 / 4.0
                })
                .map(|k| spec[k].norm_sqr())
                .sum();
            assert!(energy <= prev, "alpha {alpha}: {energy} > {prev}");
            prev = energy;
        }
    }

    #[test]
    fn smoothing_is_linear_and_mean_preserving() {
        let a = field_of(8, 8, &[random_plane(64, 7)]);
        let b = field_of(8, 8, &[random_plane(64, 8)]);
        let alpha = SmoothingStrength::new(0.5).unwrap();
        let combo = a.zip_with(&b, |x, y| 2.0 * x - 0.5 * y).unwrap();
        let lhs = smooth(&combo, alpha).unwrap();
        let rhs = smooth(&a, alpha)
            .unwrap()
            .zip_with(&smooth(&b, alpha).unwrap(), |x, y| 2.0 * x - 0.5 * y)
            .unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-9);
        }
        let mean = |f: &Field| f.data().iter().sum::<f64>() / 64.0;
        assert!((mean(&smooth(&a, alpha).unwrap()) - mean(&a)).abs() < 1e-9);
    }

    #[test]
    fn smoothing_twice_squares_the_filter() {
        let n = 8;
        let f = field_of(n, n, &[random_plane(n * n, 9)]);
        let alpha = SmoothingStrength::new(0.3).unwrap();
        let twice = smooth(&smooth(&f, alpha).unwrap(), alpha).unwrap();
        let g2: Vec<f64> = gaussian_lowpass(n, n, alpha).iter().map(|g| g * g).collect();
        let direct = idft2(&dft2(f.data(), n, n).unwrap().filtered(&g2).unwrap());
        for (x, y) in twice.data().iter().zip(&direct) {
            assert!((x - y).abs() < 1e-9);
        }
        let once = smooth(&f, alpha).unwrap();
        assert!(once.data().iter().zip(twice.data()).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn alpha_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_alpha(&mut rng).value()).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.4).abs() < 0.01);
        assert!(draws.iter().all(|&a| (0.0..=0.8).contains(&a)));

        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            assert_eq!(sample_alpha(&mut r1), sample_alpha(&mut r2));
        }
    }
}
