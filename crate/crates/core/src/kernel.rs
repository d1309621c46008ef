//! Periodic convolution with sampled Gaussian and box kernels.
//!
//! Every kernel is separable and even, so its periodic convolution operator is
//! a Kronecker product of two symmetric circulant matrices. The transfer
//! function is real and equals the outer product of the two 1D circulant
//! spectra; convolution is a pointwise product in the 2D DFT domain.
//!
//! The Gaussian parameter sits in the variance slot of the formula:
//! `g(k) = exp(-k²/2σ) / sqrt(2πσ)` per axis, sampled at integer offsets over one
//! full period. Offsets follow the circulant layout `0, 1, …, ⌊n/2⌋, ⌈n/2−1⌉, …, 1`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Result, SegError};
use crate::field::Field;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelSpec {
    /// Sampled Gaussian with variance-slot parameter `sigma` (pixels²).
    Gaussian { sigma: f64, normalized: bool },
    /// Unweighted, unnormalized sum over the `(2r+1)²` window.
    Box { radius: usize },
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        Self::checked_gaussian(sigma, true)
    }

    pub fn gaussian_raw(sigma: f64) -> Result<Self> {
        Self::checked_gaussian(sigma, false)
    }

    fn checked_gaussian(sigma: f64, normalized: bool) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(SegError::Contract(format!(
                "gaussian parameter must be positive, got {sigma}"
            )));
        }
        Ok(KernelSpec::Gaussian { sigma, normalized })
    }

    pub fn boxed(radius: usize) -> Result<Self> {
        if radius == 0 {
            return Err(SegError::Contract("box radius must be >= 1".into()));
        }
        Ok(KernelSpec::Box { radius })
    }

    /// Number of pixels in the box window, `(2r+1)²`. Zero for Gaussians.
    pub fn window_area(&self) -> usize {
        match *self {
            KernelSpec::Box { radius } => (2 * radius + 1).pow(2),
            KernelSpec::Gaussian { .. } => 0,
        }
    }

    fn key(&self) -> (u8, u64, bool) {
        match *self {
            KernelSpec::Gaussian { sigma, normalized } => (0, sigma.to_bits(), normalized),
            KernelSpec::Box { radius } => (1, radius as u64, false),
        }
    }
}

/// Unnormalized 1D Gaussian sample `g(k)`.
pub fn gaussian_sample(k: f64, sigma: f64) -> f64 {
    (-k * k / (2.0 * sigma)).exp() / (2.0 * PI * sigma).sqrt()
}

/// First column of the 1D circulant matrix realizing the kernel on a period `len`.
pub fn kernel_column(len: usize, spec: &KernelSpec) -> Vec<f64> {
    match *spec {
        KernelSpec::Gaussian { sigma, normalized } => {
            let mut col: Vec<f64> = (0..len)
                .map(|j| gaussian_sample(j.min(len - j) as f64, sigma))
                .collect();
            if normalized {
                let mass: f64 = col.iter().sum();
                col.iter_mut().for_each(|v| *v /= mass);
            }
            col
        }
        KernelSpec::Box { radius } => {
            let mut col = vec![0.0; len];
            for d in -(radius as isize)..=radius as isize {
                col[d.rem_euclid(len as isize) as usize] += 1.0;
            }
            col
        }
    }
}

/// Real eigenvalues of the symmetric circulant with first column `col`, in DFT order.
pub fn circulant_eigenvalues(col: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = col.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(col.len()).process(&mut buf);
    buf.into_iter().map(|z| z.re).collect()
}

/// Reusable periodic convolution engine for one grid shape.
///
/// Cache key: axis length and a hashable form of the kernel spec.
type SpectrumKey = (usize, (u8, u64, bool));

/// FFT plans and kernel spectra are cached; the cache is shared across threads.
pub struct PeriodicConvolver {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    spectra: Mutex<HashMap<SpectrumKey, Arc<Vec<f64>>>>,
}

impl PeriodicConvolver {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "empty grid");
        let mut planner = FftPlanner::new();
        PeriodicConvolver {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
            spectra: Mutex::new(HashMap::new()),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn spectrum(&self, len: usize, spec: &KernelSpec) -> Arc<Vec<f64>> {
        let key = (len, spec.key());
        if let Some(s) = self.spectra.lock().expect("spectrum cache poisoned").get(&key) {
            return Arc::clone(s);
        }
        let s = Arc::new(circulant_eigenvalues(&kernel_column(len, spec)));
        self.spectra
            .lock()
            .expect("spectrum cache poisoned")
            .entry(key)
            .or_insert(s)
            .clone()
    }

    fn check(&self, field: &Field) -> Result<()> {
        if field.shape() != (self.height, self.width) {
            return Err(SegError::Contract(format!(
                "field is {:?}, convolver expects {:?}",
                field.shape(),
                (self.height, self.width)
            )));
        }
        if !field.all_finite() {
            return Err(SegError::Contract("non-finite value in convolution input".into()));
        }
        Ok(())
    }

    pub fn convolve(&self, field: &Field, spec: &KernelSpec) -> Result<Field> {
        self.check(field)?;
        let (a, _) = self.convolve_pair(field, None, spec);
        Ok(a)
    }

    /// Convolves several fields with the same kernel.
    ///
    /// Inputs are packed two per complex transform (real and imaginary part);
    /// the even kernel keeps the two halves from mixing.
    pub fn convolve_many(&self, fields: &[&Field], spec: &KernelSpec) -> Result<Vec<Field>> {
        for f in fields {
            self.check(f)?;
        }
        let pairs: Vec<(Field, Option<Field>)> = fields
            .par_chunks(2)
            .map(|chunk| self.convolve_pair(chunk[0], chunk.get(1).copied(), spec))
            .collect();
        let mut out = Vec::with_capacity(fields.len());
        for (a, b) in pairs {
            out.push(a);
            out.extend(b);
        }
        Ok(out)
    }

    fn convolve_pair(&self, a: &Field, b: Option<&Field>, spec: &KernelSpec) -> (Field, Option<Field>) {
        let (h, w) = (self.height, self.width);
        let mut buf: Vec<Complex<f64>> = match b {
            Some(b) => a
                .as_slice()
                .iter()
                .zip(b.as_slice())
                .map(|(&re, &im)| Complex::new(re, im))
                .collect(),
            None => a.as_slice().iter().map(|&re| Complex::new(re, 0.0)).collect(),
        };
        let spec_rows = self.spectrum(h, spec);
        let spec_cols = self.spectrum(w, spec);

        self.row_fwd.process(&mut buf);
        let mut t = transpose(&buf, h, w);
        self.col_fwd.process(&mut t);
        for (q, column) in t.chunks_mut(h).enumerate() {
            let sq = spec_cols[q];
            for (p, z) in column.iter_mut().enumerate() {
                *z *= spec_rows[p] * sq;
            }
        }
        self.col_inv.process(&mut t);
        let mut buf = transpose(&t, w, h);
        self.row_inv.process(&mut buf);

        let scale = 1.0 / (h * w) as f64;
        let re = Field::from_vec(h, w, buf.iter().map(|z| z.re * scale).collect());
        let im = b.map(|_| Field::from_vec(h, w, buf.iter().map(|z| z.im * scale).collect()));
        (re, im)
    }
}

fn transpose(src: &[Complex<f64>], rows: usize, cols: usize) -> Vec<Complex<f64>> {
    let mut dst = vec![Complex::new(0.0, 0.0); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
    dst
}

/// One-shot periodic convolution; builds a throwaway [`PeriodicConvolver`].
pub fn convolve_periodic(field: &Field, spec: &KernelSpec) -> Result<Field> {
    if field.is_empty() {
        return Err(SegError::Contract("empty field".into()));
    }
    PeriodicConvolver::new(field.height(), field.width()).convolve(field, spec)
}

/// Spectrum of the raw-sample Gaussian circulant operator.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct SpectrumReport {
    /// `(m, n)`; 1D reports use `(n, 1)`.
    pub size: (usize, usize),
    pub sigma: f64,
    pub min_eigenvalue: f64,
    pub all_positive: bool,
    pub eigenvalues: Vec<f64>,
}

/// Lower bound on the raw Gaussian circulant spectrum valid for every size when
/// `sigma < 1/2`: `(1 − 2e²/(e³ − 1)) / √π`.
pub fn lemma_lower_bound() -> f64 {
    let e = std::f64::consts::E;
    (1.0 - 2.0 * e * e / (e.powi(3) - 1.0)) / PI.sqrt()
}

fn check_spectrum_args(sizes: &[usize], sigma: f64) -> Result<()> {
    if sizes.iter().any(|&n| n < 2) {
        return Err(SegError::Contract(format!("sizes must be >= 2, got {sizes:?}")));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(SegError::Contract(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

pub fn circulant_spectrum_1d(n: usize, sigma: f64) -> Result<SpectrumReport> {
    check_spectrum_args(&[n], sigma)?;
    let eigenvalues = circulant_eigenvalues(&kernel_column(n, &KernelSpec::gaussian_raw(sigma)?));
    let min_eigenvalue = eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(SpectrumReport {
        size: (n, 1),
        sigma,
        min_eigenvalue,
        all_positive: min_eigenvalue > 0.0,
        eigenvalues,
    })
}

/// Spectrum of `G_n ⊗ G_m`: all pairwise products of the two 1D spectra.
pub fn circulant_spectrum_2d(m: usize, n: usize, sigma: f64) -> Result<SpectrumReport> {
    check_spectrum_args(&[m, n], sigma)?;
    let rows = circulant_spectrum_1d(m, sigma)?;
    let cols = circulant_spectrum_1d(n, sigma)?;
    let eigenvalues: Vec<f64> = cols
        .eigenvalues
        .iter()
        .flat_map(|&b| rows.eigenvalues.iter().map(move |&a| a * b))
        .collect();
    // All 1D eigenvalues are positive in the regime of interest; when they are
    // not, the product set minimum is still taken directly.
    let min_eigenvalue = if rows.all_positive && cols.all_positive {
        rows.min_eigenvalue * cols.min_eigenvalue
    } else {
        eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    };
    Ok(SpectrumReport {
        size: (m, n),
        sigma,
        min_eigenvalue,
        all_positive: min_eigenvalue > 0.0,
        eigenvalues,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct periodic double loop over every offset in the period.
    fn brute(field: &Field, spec: &KernelSpec) -> Field {
        let (h, w) = field.shape();
        let weight = |len: usize, d: usize| -> f64 {
            match *spec {
                KernelSpec::Box { .. } => unreachable!(),
                KernelSpec::Gaussian { sigma, .. } => {
                    let k = d.min(len - d) as f64;
                    (-k * k / (2.0 * sigma)).exp() / (2.0 * PI * sigma).sqrt()
                }
            }
        };
        match *spec {
            KernelSpec::Box { radius } => {
                let r = radius as isize;
                Field::from_fn(h, w, |row, col| {
                    let mut s = 0.0;
                    for dr in -r..=r {
                        for dc in -r..=r {
                            let rr = (row as isize + dr).rem_euclid(h as isize) as usize;
                            let cc = (col as isize + dc).rem_euclid(w as isize) as usize;
                            s += field[(rr, cc)];
                        }
                    }
                    s
                })
            }
            KernelSpec::Gaussian { normalized, .. } => {
                let mass: f64 = (0..h).map(|d| weight(h, d)).sum::<f64>()
                    * (0..w).map(|d| weight(w, d)).sum::<f64>();
                Field::from_fn(h, w, |row, col| {
                    let mut s = 0.0;
                    for r2 in 0..h {
                        for c2 in 0..w {
                            let dr = (row + h - r2) % h;
                            let dc = (col + w - c2) % w;
                            s += weight(h, dr) * weight(w, dc) * field[(r2, c2)];
                        }
                    }
                    if normalized {
                        s / mass
                    } else {
                        s
                    }
                })
            }
        }
    }

    fn random_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Field {
        Field::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn box_of_constant_is_nine_c() {
        let f = Field::filled(6, 7, 2.5);
        let out = convolve_periodic(&f, &KernelSpec::boxed(1).unwrap()).unwrap();
        assert!(out.as_slice().iter().all(|v| (v - 22.5).abs() < 1e-12));
    }

    #[test]
    fn normalized_gaussian_fixes_constants() {
        let f = Field::filled(9, 5, 3.0);
        let out = convolve_periodic(&f, &KernelSpec::gaussian(1.7).unwrap()).unwrap();
        assert!(out.as_slice().iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn normalized_kernel_mass_is_one() {
        for len in [1, 2, 5, 16] {
            let s: f64 = kernel_column(len, &KernelSpec::gaussian(0.3).unwrap()).iter().sum();
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn matches_brute_force_on_odd_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let specs = [
            KernelSpec::boxed(1).unwrap(),
            KernelSpec::boxed(3).unwrap(),
            KernelSpec::gaussian(0.25).unwrap(),
            KernelSpec::gaussian_raw(2.0).unwrap(),
        ];
        for (h, w) in [(1, 1), (3, 5), (16, 16), (7, 2)] {
            let f = random_field(&mut rng, h, w);
            for spec in &specs {
                let fast = convolve_periodic(&f, spec).unwrap();
                let slow = brute(&f, spec);
                assert!(fast.max_abs_diff(&slow) < 1e-10, "{h}x{w} {spec:?}");
            }
        }
    }

    #[test]
    fn convolve_many_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fields: Vec<Field> = (0..5).map(|_| random_field(&mut rng, 6, 10)).collect();
        let refs: Vec<&Field> = fields.iter().collect();
        let conv = PeriodicConvolver::new(6, 10);
        let spec = KernelSpec::gaussian(0.8).unwrap();
        let many = conv.convolve_many(&refs, &spec).unwrap();
        assert_eq!(many.len(), 5);
        for (f, m) in fields.iter().zip(&many) {
            assert!(conv.convolve(f, &spec).unwrap().max_abs_diff(m) < 1e-12);
        }
    }

    #[test]
    fn rejects_non_finite_and_bad_shape() {
        let mut f = Field::zeros(3, 3);
        f[(1, 1)] = f64::NAN;
        assert!(convolve_periodic(&f, &KernelSpec::boxed(1).unwrap()).is_err());
        let conv = PeriodicConvolver::new(4, 4);
        assert!(conv.convolve(&Field::zeros(3, 3), &KernelSpec::boxed(1).unwrap()).is_err());
    }

    #[test]
    fn invalid_specs() {
        assert!(KernelSpec::gaussian(0.0).is_err());
        assert!(KernelSpec::gaussian(f64::NAN).is_err());
        assert!(KernelSpec::boxed(0).is_err());
    }

    #[test]
    fn spectrum_two_by_two_closed_form() {
        let rep = circulant_spectrum_1d(2, 0.25).unwrap();
        let g0 = 1.0 / (PI / 2.0).sqrt();
        let g1 = g0 * (-2.0f64).exp();
        assert!((g0 - 0.7979).abs() < 1e-4 && (g1 - 0.1080).abs() < 1e-4);
        assert!((rep.eigenvalues[0] - (g0 + g1)).abs() < 1e-14);
        assert!((rep.eigenvalues[1] - (g0 - g1)).abs() < 1e-14);
        assert!((rep.min_eigenvalue - (g0 - g1)).abs() < 1e-14);
    }

    #[test]
    fn lower_bound_value() {
        assert!((lemma_lower_bound() - 0.12733).abs() < 1e-5);
    }

    #[test]
    fn spectrum_positive_and_bounded() {
        for n in 2..70 {
            let rep = circulant_spectrum_1d(n, 0.25).unwrap();
            assert!(rep.min_eigenvalue >= lemma_lower_bound(), "n={n}");
        }
        assert!(circulant_spectrum_1d(64, 0.25).unwrap().all_positive);
    }

    #[test]
    fn spectrum_2d_is_product() {
        let one = circulant_spectrum_1d(8, 0.25).unwrap().min_eigenvalue;
        let two = circulant_spectrum_2d(8, 8, 0.25).unwrap();
        assert!((two.min_eigenvalue - one * one).abs() < 1e-15);
        assert!(circulant_spectrum_2d(8, 16, 0.25).unwrap().all_positive);
        for m in [4, 8, 32] {
            let rep = circulant_spectrum_2d(m, m, 0.25).unwrap();
            assert!(rep.min_eigenvalue >= 0.01621);
            let direct = rep.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
            assert!((direct - rep.min_eigenvalue).abs() < 1e-15);
        }
    }

    #[test]
    fn spectrum_preconditions() {
        assert!(circulant_spectrum_1d(1, 0.25).is_err());
        assert!(circulant_spectrum_2d(4, 1, 0.25).is_err());
        assert!(circulant_spectrum_1d(4, -1.0).is_err());
    }

    #[test]
    fn raw_quadratic_form_bound_1d() {
        // <U, G U> >= bound * |U|^2 for the raw kernel with sigma < 1/2.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [3usize, 8, 31] {
            let col = kernel_column(n, &KernelSpec::gaussian_raw(0.4).unwrap());
            for _ in 0..20 {
                let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut q = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        q += u[i] * col[(i + n - j) % n] * u[j];
                    }
                }
                let norm: f64 = u.iter().map(|v| v * v).sum();
                assert!(q >= lemma_lower_bound() * norm - 1e-12);
            }
        }
    }

    fn arb_field() -> impl Strategy<Value = Field> {
        (1usize..9, 1usize..9).prop_flat_map(|(h, w)| {
            proptest::collection::vec(-10.0f64..10.0, h * w)
                .prop_map(move |v| Field::from_vec(h, w, v))
        })
    }

    fn arb_spec() -> impl Strategy<Value = KernelSpec> {
        prop_oneof![
            (1usize..4).prop_map(|r| KernelSpec::Box { radius: r }),
            (0.05f64..5.0, any::<bool>())
                .prop_map(|(s, n)| KernelSpec::Gaussian { sigma: s, normalized: n }),
        ]
    }

    proptest! {
        #[test]
        fn linear(f in arb_field(), a in -3.0f64..3.0, b in -3.0f64..3.0, spec in arb_spec(), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_field(&mut rng, f.height(), f.width());
            let combo = f.zip_map(&g, |x, y| a * x + b * y);
            let lhs = convolve_periodic(&combo, &spec).unwrap();
            let cf = convolve_periodic(&f, &spec).unwrap();
            let cg = convolve_periodic(&g, &spec).unwrap();
            let rhs = cf.zip_map(&cg, |x, y| a * x + b * y);
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
        }

        #[test]
        fn shift_equivariant(f in arb_field(), spec in arb_spec(), dr in 0usize..9, dc in 0usize..9) {
            let (h, w) = f.shape();
            let shift = |x: &Field| Field::from_fn(h, w, |r, c| x[((r + dr) % h, (c + dc) % w)]);
            let a = convolve_periodic(&shift(&f), &spec).unwrap();
            let b = shift(&convolve_periodic(&f, &spec).unwrap());
            prop_assert!(a.max_abs_diff(&b) < 1e-10);
        }

        #[test]
        fn gaussian_self_adjoint(f in arb_field(), sigma in 0.05f64..5.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_field(&mut rng, f.height(), f.width());
            let spec = KernelSpec::gaussian(sigma).unwrap();
            let dot = |x: &Field, y: &Field| x.as_slice().iter().zip(y.as_slice()).map(|(a, b)| a * b).sum::<f64>();
            let lhs = dot(&convolve_periodic(&f, &spec).unwrap(), &g);
            let rhs = dot(&f, &convolve_periodic(&g, &spec).unwrap());
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }

        #[test]
        fn raw_gaussian_positive_2d(f in arb_field(), sigma in 0.05f64..0.5) {
            let out = convolve_periodic(&f, &KernelSpec::gaussian_raw(sigma).unwrap()).unwrap();
            let q: f64 = f.as_slice().iter().zip(out.as_slice()).map(|(a, b)| a * b).sum();
            let norm: f64 = f.as_slice().iter().map(|v| v * v).sum();
            prop_assert!(q >= lemma_lower_bound().powi(2) * norm - 1e-10);
        }
    }
}
