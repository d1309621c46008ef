//! Convolution-thresholding loop with the local variance force.
//!
//! Each iteration fits θ then m to the current partition, assembles the
//! linearized per-phase coefficients φ, and reassigns every pixel to the phase
//! with the smallest φ.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::field::Field;
use crate::fidelity::{ModelConfig, ModelState, ModelWorkspace};
use crate::image::{ImageField, Partition};
use crate::kernel::KernelSpec;

/// Largest τ for which energy decay is proven.
pub const DECAY_TAU_LIMIT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopRule {
    NoPixelChange,
    EnergyRelTol { tolerance: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub mu: f64,
    /// Perimeter kernel parameter, in the variance slot (pixels²).
    pub tau: f64,
    pub max_iters: usize,
    pub stop_rule: StopRule,
    pub model: ModelConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            mu: 1.0,
            tau: 0.25,
            max_iters: 500,
            stop_rule: StopRule::NoPixelChange,
            model: ModelConfig::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, phases: usize) -> Result<()> {
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return Err(SegError::Config(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(SegError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.max_iters == 0 {
            return Err(SegError::Config("max_iters must be >= 1".into()));
        }
        if let StopRule::EnergyRelTol { tolerance } = self.stop_rule {
            if !(tolerance.is_finite() && tolerance > 0.0) {
                return Err(SegError::Config(format!(
                    "energy tolerance must be positive, got {tolerance}"
                )));
            }
        }
        self.model.validate(phases)
    }

    /// Whether τ satisfies the hypothesis of the energy-decay result.
    pub fn decay_guaranteed(&self) -> bool {
        self.tau < DECAY_TAU_LIMIT
    }

    fn perimeter_scale(&self) -> f64 {
        self.mu * (std::f64::consts::PI / self.tau).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    pub fidelity: f64,
    pub perimeter: f64,
    pub lvf: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub energy: EnergyBreakdown,
    pub pixels_changed: usize,
    pub seconds: f64,
}

/// Per-iteration energies. Row 0 is the initial partition.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EnergyTrace {
    pub records: Vec<IterationRecord>,
}

impl EnergyTrace {
    pub const CSV_HEADER: &'static str = "iter,fidelity,perimeter,lvf,total,pixels_changed,seconds";

    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.energy.total).collect()
    }

    /// Largest relative increase of the total between consecutive rows (0 if none).
    pub fn max_relative_increase(&self) -> f64 {
        self.records
            .windows(2)
            .map(|w| (w[1].energy.total - w[0].energy.total) / w[0].energy.total.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }

    pub fn is_nonincreasing(&self, rel_slack: f64) -> bool {
        self.max_relative_increase() <= rel_slack
    }

    /// CSV text; with `timing` off the seconds column is written as 0 so
    /// repeated runs produce identical files.
    pub fn to_csv(&self, timing: bool) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let e = &r.energy;
            let secs = if timing { r.seconds } else { 0.0 };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.iter, e.fidelity, e.perimeter, e.lvf, e.total, r.pixels_changed, secs
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, timing: bool) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv(timing)).map_err(|e| SegError::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct SolveOutput {
    pub partition: Partition,
    pub state: ModelState,
    pub trace: EnergyTrace,
    /// Number of threshold steps taken.
    pub iterations: usize,
    pub converged: bool,
}

/// Per-phase fields derived from one (partition, state) pair.
struct Terms {
    fidelity: Vec<Field>,
    lvf: Option<Vec<Field>>,
    /// `G_τ * (1 − u_i)`.
    outside: Vec<Field>,
}

/// Image and configuration data reused across iterations.
pub struct Solver<'a> {
    ws: ModelWorkspace<'a>,
    cfg: SolverConfig,
    gauss: KernelSpec,
}

impl<'a> Solver<'a> {
    pub fn new(img: &'a ImageField, cfg: &SolverConfig) -> Result<Self> {
        if !(cfg.tau.is_finite() && cfg.tau > 0.0) {
            return Err(SegError::Config(format!("tau must be positive, got {}", cfg.tau)));
        }
        Ok(Solver {
            ws: ModelWorkspace::new(img, &cfg.model)?,
            cfg: cfg.clone(),
            gauss: KernelSpec::gaussian(cfg.tau)?,
        })
    }

    pub fn workspace(&self) -> &ModelWorkspace<'a> {
        &self.ws
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    /// Fits θ and then m to `part`.
    pub fn fit(&self, part: &Partition, previous: Option<&ModelState>) -> Result<ModelState> {
        self.ws.update(part, previous)
    }

    fn terms(&self, part: &Partition, state: &ModelState) -> Result<Terms> {
        state.ensure_fresh(part)?;
        if part.shape() != self.ws.image().shape() {
            return Err(SegError::Contract("partition and image shapes differ".into()));
        }
        let n = part.phases();
        if state.theta.len() != n || state.means.len() != n {
            return Err(SegError::Contract(format!(
                "model state has {} phases, partition has {n}",
                state.theta.len()
            )));
        }
        let fidelity = (0..n)
            .into_par_iter()
            .map(|i| self.ws.fidelity_field(state, i))
            .collect::<Result<Vec<_>>>()?;
        let lvf = (self.cfg.model.lvf_weight > 0.0)
            .then(|| (0..n).into_par_iter().map(|i| self.ws.lvf_field(&state.means[i])).collect());
        let complements: Vec<Field> = (0..n).map(|i| part.indicator(i).map(|u| 1.0 - u)).collect();
        let refs: Vec<&Field> = complements.iter().collect();
        let outside = self.ws.convolver().convolve_many(&refs, &self.gauss)?;
        Ok(Terms {
            fidelity,
            lvf,
            outside,
        })
    }

    fn phi_from(&self, terms: &Terms) -> Vec<Field> {
        let scale = 2.0 * self.cfg.perimeter_scale();
        let p = self.cfg.model.lvf_weight;
        (0..terms.fidelity.len())
            .into_par_iter()
            .map(|i| {
                let lambda = self.cfg.model.lambda(i);
                let mut phi = terms.fidelity[i].zip_map(&terms.outside[i], |f, g| lambda * f + scale * g);
                if let Some(lvf) = &terms.lvf {
                    for (v, l) in phi.as_mut_slice().iter_mut().zip(lvf[i].as_slice()) {
                        *v += p * lambda * l;
                    }
                }
                phi
            })
            .collect()
    }

    fn energy_from(&self, part: &Partition, terms: &Terms) -> Result<EnergyBreakdown> {
        let labels = part.labels();
        let masked = |field: &Field, phase: usize| -> f64 {
            labels
                .iter()
                .zip(field.as_slice())
                .filter(|(&l, _)| l as usize == phase)
                .map(|(_, &v)| v)
                .sum()
        };
        let (mut fidelity, mut perimeter, mut lvf) = (0.0, 0.0, 0.0);
        for i in 0..part.phases() {
            let lambda = self.cfg.model.lambda(i);
            fidelity += lambda * masked(&terms.fidelity[i], i);
            perimeter += masked(&terms.outside[i], i);
            if let Some(l) = &terms.lvf {
                lvf += lambda * masked(&l[i], i);
            }
        }
        perimeter *= self.cfg.perimeter_scale();
        lvf *= self.cfg.model.lvf_weight;
        let total = fidelity + perimeter + lvf;
        if !total.is_finite() {
            return Err(SegError::Contract(format!("energy is not finite ({total})")));
        }
        Ok(EnergyBreakdown {
            fidelity,
            perimeter,
            lvf,
            total,
        })
    }

    pub fn assemble_phi(&self, part: &Partition, state: &ModelState) -> Result<Vec<Field>> {
        Ok(self.phi_from(&self.terms(part, state)?))
    }

    pub fn energy(&self, part: &Partition, state: &ModelState) -> Result<EnergyBreakdown> {
        self.energy_from(part, &self.terms(part, state)?)
    }

    pub fn solve(&self, init: &Partition) -> Result<SolveOutput> {
        self.cfg.validate(init.phases())?;
        if self.cfg.decay_guaranteed() {
            log::info!("tau = {} < 0.5: energy decay hypothesis satisfied", self.cfg.tau);
        } else {
            log::warn!("tau = {} >= 0.5: energy decay is not guaranteed", self.cfg.tau);
        }
        let start = Instant::now();
        let mut part = init.clone();
        let mut state = self.fit(&part, None)?;
        let mut terms = self.terms(&part, &state)?;
        let mut energy = self.energy_from(&part, &terms)?;
        let mut trace = EnergyTrace {
            records: vec![IterationRecord {
                iter: 0,
                energy,
                pixels_changed: 0,
                seconds: start.elapsed().as_secs_f64(),
            }],
        };
        let mut converged = false;
        let mut iterations = 0;
        while iterations < self.cfg.max_iters {
            iterations += 1;
            let tick = Instant::now();
            let next = threshold_step(&self.phi_from(&terms))?;
            let changed = next.count_changed(&part);
            if changed > 0 {
                part = next;
                state = self.fit(&part, Some(&state))?;
                terms = self.terms(&part, &state)?;
            }
            let prev_total = energy.total;
            energy = self.energy_from(&part, &terms)?;
            trace.records.push(IterationRecord {
                iter: iterations,
                energy,
                pixels_changed: changed,
                seconds: tick.elapsed().as_secs_f64(),
            });
            log::debug!("iter {iterations}: E = {} ({changed} changed)", energy.total);
            let stop = match self.cfg.stop_rule {
                StopRule::NoPixelChange => changed == 0,
                StopRule::EnergyRelTol { tolerance } => {
                    changed == 0 || (energy.total - prev_total).abs() <= tolerance * prev_total.abs()
                }
            };
            if stop {
                converged = true;
                break;
            }
        }
        if !converged {
            log::warn!("stopped at max_iters = {} without converging", self.cfg.max_iters);
        }
        Ok(SolveOutput {
            partition: part,
            state,
            trace,
            iterations,
            converged,
        })
    }
}

/// Per-pixel `min{argmin_l φ_l}`.
pub fn threshold_step(phi: &[Field]) -> Result<Partition> {
    let n = phi.len();
    if !(2..=256).contains(&n) {
        return Err(SegError::Contract(format!("need 2..=256 phase fields, got {n}")));
    }
    let (h, w) = phi[0].shape();
    if phi.iter().any(|f| f.shape() != (h, w)) {
        return Err(SegError::Contract("phase fields differ in shape".into()));
    }
    let labels = (0..h * w)
        .into_par_iter()
        .map(|idx| {
            let mut best = 0usize;
            let mut best_value = phi[0].as_slice()[idx];
            if best_value.is_nan() {
                return Err(SegError::Contract(format!("phi_0 is NaN at pixel {idx}")));
            }
            for (l, f) in phi.iter().enumerate().skip(1) {
                let v = f.as_slice()[idx];
                if v.is_nan() {
                    return Err(SegError::Contract(format!("phi_{l} is NaN at pixel {idx}")));
                }
                if v < best_value {
                    best = l;
                    best_value = v;
                }
            }
            Ok(best as u8)
        })
        .collect::<Result<Vec<u8>>>()?;
    Partition::new(h, w, n, labels)
}

pub fn assemble_phi(
    img: &ImageField,
    part: &Partition,
    state: &ModelState,
    scfg: &SolverConfig,
) -> Result<Vec<Field>> {
    Solver::new(img, scfg)?.assemble_phi(part, state)
}

pub fn total_energy(
    img: &ImageField,
    part: &Partition,
    state: &ModelState,
    scfg: &SolverConfig,
) -> Result<EnergyBreakdown> {
    Solver::new(img, scfg)?.energy(part, state)
}

pub fn solve(img: &ImageField, init: &Partition, scfg: &SolverConfig) -> Result<SolveOutput> {
    Solver::new(img, scfg)?.solve(init)
}
