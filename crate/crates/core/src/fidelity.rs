//! Fidelity terms, their parameter updates, mean estimators and the local
//! variance force.
//!
//! Multi-channel images use the sum over channels of per-channel squared
//! residuals.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::field::{wrap, Field};
use crate::image::{ImageField, Partition};
use crate::kernel::{kernel_column, KernelSpec, PeriodicConvolver};

/// Denominators of the local fitting ratio below this fall back to the phase mean.
pub const LIF_DENOMINATOR_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FidelityModel {
    /// Piecewise constant (Chan–Vese).
    Cv,
    /// Local image fitting with Gaussian-weighted fitting fields.
    Lif,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanEstimator {
    GlobalMean,
    LocalGaussianMean,
}

/// A per-phase parameter: one value per channel, or one field per channel.
#[derive(Clone, Debug, PartialEq)]
pub enum PhaseParam {
    Constant(Vec<f64>),
    Field(Vec<Field>),
}

impl PhaseParam {
    /// Value for `channel` at flat pixel index `idx`.
    #[inline]
    pub fn at(&self, channel: usize, idx: usize) -> f64 {
        match self {
            PhaseParam::Constant(c) => c[channel],
            PhaseParam::Field(f) => f[channel].as_slice()[idx],
        }
    }

    pub fn as_constant(&self) -> Option<&[f64]> {
        match self {
            PhaseParam::Constant(c) => Some(c),
            PhaseParam::Field(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: FidelityModel,
    /// Per-phase fidelity weights; a single entry applies to every phase.
    pub lambdas: Vec<f64>,
    /// Gaussian parameter for the local fitting model and local means (pixels²).
    pub sigma: f64,
    pub lvf_radius: usize,
    /// Weight `p` of the local variance force; 0 disables it.
    pub lvf_weight: f64,
    pub mean_estimator: MeanEstimator,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: FidelityModel::Cv,
            lambdas: vec![1.0],
            sigma: 3.0,
            lvf_radius: 2,
            lvf_weight: 0.01,
            mean_estimator: MeanEstimator::GlobalMean,
        }
    }
}

impl ModelConfig {
    pub fn lambda(&self, phase: usize) -> f64 {
        if self.lambdas.len() == 1 {
            self.lambdas[0]
        } else {
            self.lambdas[phase]
        }
    }

    pub fn validate(&self, phases: usize) -> Result<()> {
        if self.lambdas.len() != 1 && self.lambdas.len() != phases {
            return Err(SegError::Config(format!(
                "expected 1 or {phases} fidelity weights, got {}",
                self.lambdas.len()
            )));
        }
        if let Some(bad) = self.lambdas.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(SegError::Config(format!("fidelity weights must be positive, got {bad}")));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(SegError::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.lvf_radius == 0 {
            return Err(SegError::Config("lvf radius must be >= 1".into()));
        }
        if !(self.lvf_weight.is_finite() && self.lvf_weight >= 0.0) {
            return Err(SegError::Config(format!(
                "lvf weight p must be non-negative, got {}",
                self.lvf_weight
            )));
        }
        Ok(())
    }

    fn gaussian(&self) -> KernelSpec {
        KernelSpec::Gaussian {
            sigma: self.sigma,
            normalized: true,
        }
    }
}

/// Fidelity parameters and mean estimates fitted to one partition.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub kind: FidelityModel,
    pub theta: Vec<PhaseParam>,
    pub means: Vec<PhaseParam>,
    /// Per-phase channel means, also the fallback for empty phases.
    pub phase_means: Vec<Vec<f64>>,
    /// Generation of the partition these were fitted to.
    pub generation: u64,
}

impl ModelState {
    pub fn ensure_fresh(&self, part: &Partition) -> Result<()> {
        if self.generation != part.generation() {
            return Err(SegError::Contract(format!(
                "model state was fitted to partition generation {}, not {}",
                self.generation,
                part.generation()
            )));
        }
        Ok(())
    }
}

fn check_shapes(img: &ImageField, part: &Partition) -> Result<()> {
    if img.shape() != part.shape() {
        return Err(SegError::Contract(format!(
            "image is {:?} but partition is {:?}",
            img.shape(),
            part.shape()
        )));
    }
    Ok(())
}

/// Per-phase channel means `∫u_i I / ∫u_i`.
///
/// Empty phases keep `previous[i]`, or the global image mean without one.
pub fn update_theta_cv(
    img: &ImageField,
    part: &Partition,
    previous: Option<&[Vec<f64>]>,
) -> Result<Vec<Vec<f64>>> {
    check_shapes(img, part)?;
    let n = part.phases();
    let channels = img.channels();
    let mut sums = vec![vec![0.0; channels]; n];
    let counts = part.phase_sizes();
    for c in 0..channels {
        for (&l, &v) in part.labels().iter().zip(img.channel(c)) {
            sums[l as usize][c] += v;
        }
    }
    let global = img.channel_means();
    Ok((0..n)
        .map(|i| {
            if counts[i] > 0 {
                sums[i].iter().map(|s| s / counts[i] as f64).collect()
            } else {
                previous.map_or_else(|| global.clone(), |prev| prev[i].clone())
            }
        })
        .collect())
}

/// Local fitting fields `f_i = G_σ*(u_i I) / G_σ*u_i`, per channel.
pub fn update_theta_lif(
    img: &ImageField,
    part: &Partition,
    sigma: f64,
    previous: Option<&[Vec<f64>]>,
) -> Result<Vec<Vec<Field>>> {
    check_shapes(img, part)?;
    let conv = PeriodicConvolver::new(img.height(), img.width());
    let constants = update_theta_cv(img, part, previous)?;
    local_fits(img, part, &KernelSpec::gaussian(sigma)?, &conv, &constants)
}

fn local_fits(
    img: &ImageField,
    part: &Partition,
    gauss: &KernelSpec,
    conv: &PeriodicConvolver,
    constants: &[Vec<f64>],
) -> Result<Vec<Vec<Field>>> {
    let (h, w) = img.shape();
    let channels = img.channels();
    (0..part.phases())
        .into_par_iter()
        .map(|i| {
            let u = part.indicator(i);
            let mut inputs = vec![u.clone()];
            for c in 0..channels {
                inputs.push(Field::from_vec(
                    h,
                    w,
                    u.as_slice().iter().zip(img.channel(c)).map(|(a, b)| a * b).collect(),
                ));
            }
            let refs: Vec<&Field> = inputs.iter().collect();
            let smoothed = conv.convolve_many(&refs, gauss)?;
            let den = &smoothed[0];
            Ok((0..channels)
                .map(|c| {
                    den.zip_map(&smoothed[c + 1], |d, num| {
                        if d < LIF_DENOMINATOR_FLOOR {
                            constants[i][c]
                        } else {
                            num / d
                        }
                    })
                })
                .collect())
        })
        .collect()
}

/// Image-dependent quantities shared by every iteration of one solve.
pub struct ModelWorkspace<'a> {
    img: &'a ImageField,
    cfg: ModelConfig,
    conv: PeriodicConvolver,
    /// `K_r * I_c` and `K_r * I_c²` per channel.
    box_sum: Vec<Field>,
    box_sum_sq: Vec<Field>,
    /// Total mass of the normalized Gaussian on this grid (`G*1`).
    gauss_mass: f64,
}

impl<'a> ModelWorkspace<'a> {
    pub fn new(img: &'a ImageField, cfg: &ModelConfig) -> Result<Self> {
        let conv = PeriodicConvolver::new(img.height(), img.width());
        let r = cfg.lvf_radius;
        let box_sum = (0..img.channels())
            .map(|c| window_sum(&img.channel_field(c), r))
            .collect();
        let box_sum_sq = (0..img.channels())
            .map(|c| window_sum(&img.channel_field(c).map(|v| v * v), r))
            .collect();
        let gauss = cfg.gaussian();
        let gauss_mass = kernel_column(img.height(), &gauss).iter().sum::<f64>()
            * kernel_column(img.width(), &gauss).iter().sum::<f64>();
        Ok(ModelWorkspace {
            img,
            cfg: cfg.clone(),
            conv,
            box_sum,
            box_sum_sq,
            gauss_mass,
        })
    }

    pub fn image(&self) -> &ImageField {
        self.img
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn convolver(&self) -> &PeriodicConvolver {
        &self.conv
    }

    /// Fits θ first, then the means, for `part`.
    pub fn update(&self, part: &Partition, previous: Option<&ModelState>) -> Result<ModelState> {
        check_shapes(self.img, part)?;
        let constants =
            update_theta_cv(self.img, part, previous.map(|p| p.phase_means.as_slice()))?;
        let theta: Vec<PhaseParam> = match self.cfg.kind {
            FidelityModel::Cv => constants.iter().cloned().map(PhaseParam::Constant).collect(),
            FidelityModel::Lif => local_fits(self.img, part, &self.cfg.gaussian(), &self.conv, &constants)?
                .into_iter()
                .map(PhaseParam::Field)
                .collect(),
        };
        let means = match (self.cfg.mean_estimator, self.cfg.kind) {
            (MeanEstimator::GlobalMean, _) => {
                constants.iter().cloned().map(PhaseParam::Constant).collect()
            }
            (MeanEstimator::LocalGaussianMean, FidelityModel::Lif) => theta.clone(),
            (MeanEstimator::LocalGaussianMean, FidelityModel::Cv) => {
                local_fits(self.img, part, &self.cfg.gaussian(), &self.conv, &constants)?
                    .into_iter()
                    .map(PhaseParam::Field)
                    .collect()
            }
        };
        Ok(ModelState {
            kind: self.cfg.kind,
            theta,
            means,
            phase_means: constants,
            generation: part.generation(),
        })
    }

    /// Per-pixel fidelity `F_i` (before the λ_i weight).
    pub fn fidelity_field(&self, state: &ModelState, phase: usize) -> Result<Field> {
        let img = self.img;
        let (h, w) = img.shape();
        match (&state.theta[phase], state.kind) {
            (PhaseParam::Constant(c), FidelityModel::Cv) => {
                let mut out = vec![0.0; h * w];
                for (ch, &ci) in c.iter().enumerate() {
                    for (o, &v) in out.iter_mut().zip(img.channel(ch)) {
                        *o += (v - ci) * (v - ci);
                    }
                }
                Ok(Field::from_vec(h, w, out))
            }
            (PhaseParam::Field(f), FidelityModel::Lif) => {
                // Σ_x G(x−y)(I(y) − f(x))² = I²(G*1) − 2I(G*f) + G*f².
                let squares: Vec<Field> = f.iter().map(|fc| fc.map(|v| v * v)).collect();
                let mut inputs: Vec<&Field> = f.iter().collect();
                inputs.extend(squares.iter());
                let smoothed = self.conv.convolve_many(&inputs, &self.cfg.gaussian())?;
                let channels = img.channels();
                let mut out = vec![0.0; h * w];
                for ch in 0..channels {
                    let gf = smoothed[ch].as_slice();
                    let gf2 = smoothed[channels + ch].as_slice();
                    for (idx, (o, &v)) in out.iter_mut().zip(img.channel(ch)).enumerate() {
                        *o += v * v * self.gauss_mass - 2.0 * v * gf[idx] + gf2[idx];
                    }
                }
                Ok(Field::from_vec(h, w, out))
            }
            _ => Err(SegError::Contract(
                "model state parameters do not match the model kind".into(),
            )),
        }
    }

    /// Window sum of squared deviations from the center pixel's mean estimate,
    /// `Σ_{y∈K_r(x)} |I(y) − m_i(x)|²`, summed over channels.
    pub fn lvf_field(&self, means: &PhaseParam) -> Field {
        let (h, w) = self.img.shape();
        let area = ((2 * self.cfg.lvf_radius + 1) * (2 * self.cfg.lvf_radius + 1)) as f64;
        let mut out = vec![0.0; h * w];
        for ch in 0..self.img.channels() {
            let s = self.box_sum[ch].as_slice();
            let s2 = self.box_sum_sq[ch].as_slice();
            for (idx, o) in out.iter_mut().enumerate() {
                let m = means.at(ch, idx);
                *o += s2[idx] - 2.0 * m * s[idx] + m * m * area;
            }
        }
        Field::from_vec(h, w, out)
    }
}

/// Periodic `(2r+1)²` window sum, computed directly as two separable passes.
///
/// Direct summation keeps integer-valued inputs exact, which the transform
/// path does not.
pub fn window_sum(field: &Field, radius: usize) -> Field {
    let (h, w) = field.shape();
    let r = radius as isize;
    let mut rows = Field::zeros(h, w);
    for row in 0..h {
        for col in 0..w {
            rows[(row, col)] = (-r..=r).map(|d| field[(row, wrap(col, d, w))]).sum();
        }
    }
    Field::from_fn(h, w, |row, col| (-r..=r).map(|d| rows[(wrap(row, d, h), col)]).sum())
}

/// Mean estimates `m_i = M(I, u_i)` for the local variance force.
pub fn estimate_means(
    img: &ImageField,
    part: &Partition,
    estimator: MeanEstimator,
    sigma: f64,
) -> Result<Vec<PhaseParam>> {
    Ok(match estimator {
        MeanEstimator::GlobalMean => update_theta_cv(img, part, None)?
            .into_iter()
            .map(PhaseParam::Constant)
            .collect(),
        MeanEstimator::LocalGaussianMean => update_theta_lif(img, part, sigma, None)?
            .into_iter()
            .map(PhaseParam::Field)
            .collect(),
    })
}

pub fn fidelity_field(
    img: &ImageField,
    state: &ModelState,
    cfg: &ModelConfig,
    phase: usize,
) -> Result<Field> {
    ModelWorkspace::new(img, cfg)?.fidelity_field(state, phase)
}

pub fn lvf_field(img: &ImageField, means: &[PhaseParam], radius: usize, phase: usize) -> Result<Field> {
    if radius == 0 {
        return Err(SegError::Contract("lvf radius must be >= 1".into()));
    }
    let cfg = ModelConfig {
        lvf_radius: radius,
        ..ModelConfig::default()
    };
    Ok(ModelWorkspace::new(img, &cfg)?.lvf_field(&means[phase]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, channels: usize) -> ImageField {
        let data = (0..h * w * channels).map(|_| rng.random_range(0.0..255.0)).collect();
        ImageField::new(h, w, channels, data).unwrap()
    }

    fn random_partition(rng: &mut ChaCha8Rng, h: usize, w: usize, n: usize) -> Partition {
        loop {
            let labels: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..n as u8)).collect();
            let part = Partition::new(h, w, n, labels).unwrap();
            if part.phase_sizes().iter().all(|&s| s > 0) {
                return part;
            }
        }
    }

    /// Normalized periodic Gaussian weight between two pixels, from the formula.
    fn gauss_weight(h: usize, w: usize, sigma: f64, a: usize, b: usize) -> f64 {
        let g = |len: usize, d: usize| {
            let k = d.min(len - d) as f64;
            (-k * k / (2.0 * sigma)).exp()
        };
        let mass: f64 = (0..h).map(|d| g(h, d)).sum::<f64>() * (0..w).map(|d| g(w, d)).sum::<f64>();
        let (ra, ca) = (a / w, a % w);
        let (rb, cb) = (b / w, b % w);
        g(h, (ra + h - rb) % h) * g(w, (ca + w - cb) % w) / mass
    }

    /// Brute-force local fitting energy of one phase, single channel.
    fn lif_energy(img: &ImageField, part: &Partition, phase: usize, f: &[f64], sigma: f64) -> f64 {
        let (h, w) = img.shape();
        let mut e = 0.0;
        for x in 0..h * w {
            for y in 0..h * w {
                if part.labels()[y] as usize == phase {
                    let d = img.channel(0)[y] - f[x];
                    e += gauss_weight(h, w, sigma, x, y) * d * d;
                }
            }
        }
        e
    }

    #[test]
    fn cv_constant_image() {
        let img = ImageField::gray(&Field::filled(4, 4, 77.0)).unwrap();
        let part = Partition::new(4, 4, 3, (0..16).map(|i| (i % 2) as u8).collect()).unwrap();
        let c = update_theta_cv(&img, &part, None).unwrap();
        assert_eq!(c[0], vec![77.0]);
        assert_eq!(c[1], vec![77.0]);
        // Empty phase 2 takes the global mean, or the previous value when given.
        assert_eq!(c[2], vec![77.0]);
        let prev = vec![vec![1.0], vec![2.0], vec![3.0]];
        assert_eq!(update_theta_cv(&img, &part, Some(&prev)).unwrap()[2], vec![3.0]);
    }

    #[test]
    fn cv_exact_two_value_means() {
        let img = ImageField::gray(&Field::from_fn(4, 4, |_, c| if c < 2 { 10.0 } else { 90.0 })).unwrap();
        let part = Partition::new(4, 4, 2, (0..16).map(|i| u8::from(i % 4 >= 2)).collect()).unwrap();
        assert_eq!(update_theta_cv(&img, &part, None).unwrap(), vec![vec![10.0], vec![90.0]]);
    }

    #[test]
    fn cv_means_brute_force_and_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 8, 8, 3);
        let part = random_partition(&mut rng, 8, 8, 3);
        let c = update_theta_cv(&img, &part, None).unwrap();
        let fid = |phase: usize, ch: usize, value: f64| -> f64 {
            (0..64)
                .filter(|&p| part.labels()[p] as usize == phase)
                .map(|p| (img.channel(ch)[p] - value).powi(2))
                .sum()
        };
        for i in 0..3 {
            for ch in 0..3 {
                let members: Vec<f64> = (0..64)
                    .filter(|&p| part.labels()[p] as usize == i)
                    .map(|p| img.channel(ch)[p])
                    .collect();
                let mean = members.iter().sum::<f64>() / members.len() as f64;
                assert!((c[i][ch] - mean).abs() < 1e-12);
                let base = fid(i, ch, c[i][ch]);
                assert!(fid(i, ch, c[i][ch] + 0.1) > base);
                assert!(fid(i, ch, c[i][ch] - 0.1) > base);
            }
        }
    }

    #[test]
    fn lif_constant_image_and_single_phase() {
        let img = ImageField::gray(&Field::filled(6, 6, 50.0)).unwrap();
        let part = Partition::new(6, 6, 2, (0..36).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
        let f = update_theta_lif(&img, &part, 1.5, None).unwrap();
        for phase in &f {
            assert!(phase[0].as_slice().iter().all(|v| (v - 50.0).abs() < 1e-9));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 6, 6, 1);
        let all = Partition::uniform(6, 6, 2, 0).unwrap();
        let f = update_theta_lif(&img, &all, 1.5, None).unwrap();
        let smooth = crate::kernel::convolve_periodic(&img.channel_field(0), &KernelSpec::gaussian(1.5).unwrap()).unwrap();
        assert!(f[0][0].max_abs_diff(&smooth) < 1e-9);
    }

    #[test]
    fn lif_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sigma = 2.0;
        let img = random_image(&mut rng, 8, 8, 1);
        let part = random_partition(&mut rng, 8, 8, 2);
        let f = update_theta_lif(&img, &part, sigma, None).unwrap();
        for phase in 0..2 {
            let fi = f[phase][0].as_slice().to_vec();
            let base = lif_energy(&img, &part, phase, &fi, sigma);
            for x in [0, 9, 37, 63] {
                for eps in [0.1, -0.1] {
                    let mut g = fi.clone();
                    g[x] += eps;
                    assert!(lif_energy(&img, &part, phase, &g, sigma) >= base - 1e-9);
                }
            }
        }
    }

    #[test]
    fn lif_fidelity_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let sigma = 1.3;
        let img = random_image(&mut rng, 8, 8, 1);
        let part = random_partition(&mut rng, 8, 8, 2);
        let cfg = ModelConfig { kind: FidelityModel::Lif, sigma, ..Default::default() };
        let ws = ModelWorkspace::new(&img, &cfg).unwrap();
        let state = ws.update(&part, None).unwrap();
        for phase in 0..2 {
            let field = ws.fidelity_field(&state, phase).unwrap();
            let PhaseParam::Field(f) = &state.theta[phase] else { panic!() };
            for y in 0..64 {
                let expected: f64 = (0..64)
                    .map(|x| gauss_weight(8, 8, sigma, x, y) * (img.channel(0)[y] - f[0].as_slice()[x]).powi(2))
                    .sum();
                assert!((field.as_slice()[y] - expected).abs() < 1e-8, "{y}");
            }
        }
    }

    #[test]
    fn cv_fidelity_examples() {
        let img = ImageField::gray(&Field::filled(3, 3, 0.0)).unwrap();
        let part = Partition::uniform(3, 3, 2, 0).unwrap();
        let state = ModelState {
            kind: FidelityModel::Cv,
            theta: vec![PhaseParam::Constant(vec![0.0]), PhaseParam::Constant(vec![255.0])],
            means: vec![PhaseParam::Constant(vec![0.0]), PhaseParam::Constant(vec![255.0])],
            phase_means: vec![vec![0.0], vec![255.0]],
            generation: part.generation(),
        };
        let cfg = ModelConfig::default();
        let f0 = fidelity_field(&img, &state, &cfg, 0).unwrap();
        let f1 = fidelity_field(&img, &state, &cfg, 1).unwrap();
        assert!(f0.as_slice().iter().all(|&v| v == 0.0));
        assert!(f1.as_slice().iter().all(|&v| v == 255.0 * 255.0));
    }

    #[test]
    fn lvf_constant_examples() {
        let img = ImageField::gray(&Field::filled(5, 5, 30.0)).unwrap();
        let same = [PhaseParam::Constant(vec![30.0])];
        let off = [PhaseParam::Constant(vec![31.0])];
        assert!(lvf_field(&img, &same, 1, 0).unwrap().as_slice().iter().all(|v| v.abs() < 1e-9));
        assert!(lvf_field(&img, &off, 1, 0).unwrap().as_slice().iter().all(|v| (v - 9.0).abs() < 1e-9));
        let rgb = ImageField::new(5, 5, 3, vec![30.0; 75]).unwrap();
        let off3 = [PhaseParam::Constant(vec![31.0; 3])];
        assert!(lvf_field(&rgb, &off3, 1, 0).unwrap().as_slice().iter().all(|v| (v - 27.0).abs() < 1e-9));
    }

    #[test]
    fn lvf_matches_window_sum_with_field_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, 8, 8, 1);
        let m = Field::from_fn(8, 8, |_, _| rng.random_range(0.0..255.0));
        let means = [PhaseParam::Field(vec![m.clone()])];
        let field = lvf_field(&img, &means, 1, 0).unwrap();
        for row in 0..8 {
            for col in 0..8 {
                let mut s = 0.0;
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let v = img.value(wrap(row, dr, 8), wrap(col, dc, 8), 0);
                        s += (v - m[(row, col)]).powi(2);
                    }
                }
                assert!((field[(row, col)] - s).abs() < 1e-9, "{} vs {s}", field[(row, col)]);
            }
        }
    }

    #[test]
    fn window_sum_matches_box_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = Field::from_fn(5, 9, |_, _| rng.random_range(-3.0..3.0));
        for r in [1, 2, 3, 6] {
            let direct = window_sum(&f, r);
            let fft = crate::kernel::convolve_periodic(&f, &KernelSpec::boxed(r).unwrap()).unwrap();
            assert!(direct.max_abs_diff(&fft) < 1e-9);
        }
    }

    #[test]
    fn estimators_agree_with_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random_image(&mut rng, 16, 16, 1);
        let part = random_partition(&mut rng, 16, 16, 2);
        let global = estimate_means(&img, &part, MeanEstimator::GlobalMean, 1.0).unwrap();
        let cv = update_theta_cv(&img, &part, None).unwrap();
        for i in 0..2 {
            assert_eq!(global[i], PhaseParam::Constant(cv[i].clone()));
        }
        // A very wide kernel is nearly flat, so local means approach global ones.
        let wide = estimate_means(&img, &part, MeanEstimator::LocalGaussianMean, 1e4).unwrap();
        for i in 0..2 {
            let PhaseParam::Field(f) = &wide[i] else { panic!() };
            for &v in f[0].as_slice() {
                assert!((v - cv[i][0]).abs() <= 0.01 * cv[i][0]);
            }
        }
    }

    #[test]
    fn mismatched_state_kind_is_contract_error() {
        let img = ImageField::gray(&Field::filled(3, 3, 1.0)).unwrap();
        let state = ModelState {
            kind: FidelityModel::Lif,
            theta: vec![PhaseParam::Constant(vec![0.0]); 2],
            means: vec![PhaseParam::Constant(vec![0.0]); 2],
            phase_means: vec![vec![0.0]; 2],
            generation: 0,
        };
        assert!(fidelity_field(&img, &state, &ModelConfig::default(), 0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::default();
        assert!(cfg.validate(3).is_ok());
        cfg.lambdas = vec![1.0, 2.0];
        assert!(cfg.validate(3).is_err());
        cfg.lambdas = vec![1.0, 2.0, 0.0];
        assert!(cfg.validate(3).is_err());
        let cfg = ModelConfig { lvf_radius: 0, ..Default::default() };
        assert!(cfg.validate(2).is_err());
        let cfg = ModelConfig { lvf_weight: -1.0, ..Default::default() };
        assert!(cfg.validate(2).is_err());
    }

    proptest! {
        #[test]
        fn fields_non_negative(seed in 0u64..500, lif in any::<bool>(), local in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_image(&mut rng, 6, 7, 3);
            let part = random_partition(&mut rng, 6, 7, 3);
            let cfg = ModelConfig {
                kind: if lif { FidelityModel::Lif } else { FidelityModel::Cv },
                mean_estimator: if local { MeanEstimator::LocalGaussianMean } else { MeanEstimator::GlobalMean },
                sigma: 1.0,
                ..Default::default()
            };
            let ws = ModelWorkspace::new(&img, &cfg).unwrap();
            let state = ws.update(&part, None).unwrap();
            for i in 0..3 {
                prop_assert!(ws.fidelity_field(&state, i).unwrap().as_slice().iter().all(|&v| v >= -1e-9));
                prop_assert!(ws.lvf_field(&state.means[i]).as_slice().iter().all(|&v| v >= -1e-9));
            }
        }

        #[test]
        fn lvf_shift_covariant(seed in 0u64..500, shift in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_image(&mut rng, 6, 6, 1);
            let m = rng.random_range(0.0..255.0);
            let shifted = ImageField::new(6, 6, 1, img.as_slice().iter().map(|v| v + shift).collect()).unwrap();
            let a = lvf_field(&img, &[PhaseParam::Constant(vec![m])], 2, 0).unwrap();
            let b = lvf_field(&shifted, &[PhaseParam::Constant(vec![m + shift])], 2, 0).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-9 * (1.0 + a.as_slice().iter().fold(0.0f64, |x, y| x.max(y.abs()))));
        }
    }
}
