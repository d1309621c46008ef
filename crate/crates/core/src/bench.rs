//! Synthetic phantoms, noise injection, segmentation scoring and the plain
//! versus local-variance comparison harness.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use pathfinding::prelude::{kuhn_munkres, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::iglim::{multi_iglim, IglimConfig};
use crate::image::{ImageField, Partition};
use crate::solver::{solve, EnergyTrace, SolverConfig};

pub const MIN_PHANTOM_SIZE: usize = 64;

/// Largest phase count scored by exhaustive permutation search.
pub const EXHAUSTIVE_MATCH_LIMIT: usize = 6;

/// Muted RGB palette for `shapes3_rgb`: background, disk, rectangle.
///
/// Channel sums differ between every pair, so the channel-summed graph
/// Laplacian sees every boundary.
pub const RGB_PALETTE: [[f64; 3]; 3] = [[100.0, 110.0, 130.0], [150.0, 100.0, 110.0], [110.0, 150.0, 120.0]];

/// Base intensities of the two `inhomog2` phases before the bias field.
pub const INHOMOG_LEVELS: [f64; 2] = [60.0, 160.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    /// Background, disk, rectangle; gray levels 0, 127.5, 255.
    Shapes3,
    /// Same geometry as `Shapes3` in three colors.
    Shapes3Rgb,
    /// Background, disk, rectangle, ring; gray levels 0, 85, 170, 255.
    Shapes4,
    /// Background and disk+rectangle under a smooth multiplicative bias.
    Inhomog2,
}

impl PhantomKind {
    pub fn phases(self) -> usize {
        match self {
            PhantomKind::Shapes3 | PhantomKind::Shapes3Rgb => 3,
            PhantomKind::Shapes4 => 4,
            PhantomKind::Inhomog2 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PhantomKind::Shapes3 => "shapes3",
            PhantomKind::Shapes3Rgb => "shapes3_rgb",
            PhantomKind::Shapes4 => "shapes4",
            PhantomKind::Inhomog2 => "inhomog2",
        }
    }
}

impl FromStr for PhantomKind {
    type Err = SegError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes3" => Ok(PhantomKind::Shapes3),
            "shapes3_rgb" | "shapes3-rgb" => Ok(PhantomKind::Shapes3Rgb),
            "shapes4" => Ok(PhantomKind::Shapes4),
            "inhomog2" => Ok(PhantomKind::Inhomog2),
            other => Err(SegError::Config(format!(
                "unknown phantom kind {other:?} (expected shapes3, shapes3_rgb, shapes4, inhomog2)"
            ))),
        }
    }
}

/// Shape geometry in pixel units; a pixel belongs to a shape when its
/// center `(row + 0.5, col + 0.5)` is inside.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Disk { center: [f64; 2], radius: f64 },
    Rect { top: f64, left: f64, bottom: f64, right: f64 },
    Ring { center: [f64; 2], inner: f64, outer: f64 },
}

impl Shape {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Disk { center, radius } => (y - center[0]).powi(2) + (x - center[1]).powi(2) <= radius * radius,
            Shape::Rect { top, left, bottom, right } => y >= top && y < bottom && x >= left && x < right,
            Shape::Ring { center, inner, outer } => {
                let d2 = (y - center[0]).powi(2) + (x - center[1]).powi(2);
                d2 >= inner * inner && d2 <= outer * outer
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhantomDescription {
    pub kind: PhantomKind,
    pub size: usize,
    pub seed: u64,
    /// `(phase, shape)` pairs, painted in order over the background phase 0.
    pub shapes: Vec<(usize, Shape)>,
    /// Noiseless per-phase values, one entry per channel.
    pub intensities: Vec<Vec<f64>>,
    /// Bias `1 + amplitude·sin(π x/size)·cos(π y/size)`, if any.
    pub bias_amplitude: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub image: ImageField,
    pub truth: Partition,
    pub description: PhantomDescription,
}

pub fn make_phantom(kind: PhantomKind, size: usize, seed: u64) -> Result<Phantom> {
    if size < MIN_PHANTOM_SIZE {
        return Err(SegError::Config(format!(
            "phantom size must be >= {MIN_PHANTOM_SIZE}, got {size}"
        )));
    }
    let s = size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = || rng.random_range(-0.03..=0.03) * s;
    let disk = Shape::Disk {
        center: [0.3 * s + jitter(), 0.3 * s + jitter()],
        radius: 0.16 * s,
    };
    let (dy, dx) = (jitter(), jitter());
    let rect = Shape::Rect {
        top: 0.58 * s + dy,
        left: 0.12 * s + dx,
        bottom: 0.85 * s + dy,
        right: 0.45 * s + dx,
    };
    let ring = Shape::Ring {
        center: [0.62 * s + jitter(), 0.70 * s + jitter()],
        inner: 0.1 * s,
        outer: 0.2 * s,
    };
    let evenly = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|i| vec![255.0 * i as f64 / (n - 1) as f64]).collect() };
    let (shapes, intensities, bias_amplitude) = match kind {
        PhantomKind::Shapes3 => (vec![(1, disk), (2, rect)], evenly(3), None),
        PhantomKind::Shapes3Rgb => (
            vec![(1, disk), (2, rect)],
            RGB_PALETTE.iter().map(|c| c.to_vec()).collect(),
            None,
        ),
        PhantomKind::Shapes4 => (vec![(1, disk), (2, rect), (3, ring)], evenly(4), None),
        PhantomKind::Inhomog2 => (
            vec![(1, disk), (1, rect)],
            INHOMOG_LEVELS.iter().map(|&v| vec![v]).collect(),
            Some(0.5),
        ),
    };
    let mut labels = vec![0u8; size * size];
    for (idx, label) in labels.iter_mut().enumerate() {
        let (y, x) = ((idx / size) as f64 + 0.5, (idx % size) as f64 + 0.5);
        for &(phase, shape) in &shapes {
            if shape.contains(y, x) {
                *label = phase as u8;
            }
        }
    }
    let channels = intensities[0].len();
    let mut data = vec![0.0; channels * size * size];
    for c in 0..channels {
        for (idx, &l) in labels.iter().enumerate() {
            let bias = bias_amplitude.map_or(1.0, |a| {
                let (y, x) = ((idx / size) as f64 + 0.5, (idx % size) as f64 + 0.5);
                1.0 + a * (std::f64::consts::PI * x / s).sin() * (std::f64::consts::PI * y / s).cos()
            });
            data[c * size * size + idx] = intensities[l as usize][c] * bias;
        }
    }
    Ok(Phantom {
        image: ImageField::new(size, size, channels, data)?,
        truth: Partition::new(size, size, kind.phases(), labels)?,
        description: PhantomDescription {
            kind,
            size,
            seed,
            shapes,
            intensities,
            bias_amplitude,
        },
    })
}

/// The iid N(0, variance) samples `add_gaussian_noise` uses, in channel-planar
/// order, drawn from ChaCha8 seeded with `seed`.
pub fn noise_samples(len: usize, variance: f64, seed: u64) -> Result<Vec<f64>> {
    if !(variance.is_finite() && variance >= 0.0) {
        return Err(SegError::Config(format!("noise variance must be >= 0, got {variance}")));
    }
    let normal = Normal::new(0.0, variance.sqrt()).map_err(|e| SegError::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len).map(|_| normal.sample(&mut rng)).collect())
}

/// Adds per-channel iid Gaussian noise, then clamps to `[0, 255]`.
pub fn add_gaussian_noise(img: &ImageField, variance: f64, seed: u64) -> Result<ImageField> {
    if variance == 0.0 {
        return Ok(img.clone());
    }
    let noise = noise_samples(img.as_slice().len(), variance, seed)?;
    let data = img
        .as_slice()
        .iter()
        .zip(noise)
        .map(|(v, n)| (v + n).clamp(0.0, 255.0))
        .collect();
    ImageField::new(img.height(), img.width(), img.channels(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub dice: Vec<f64>,
    pub jaccard: Vec<f64>,
    /// `confusion[t][p]`: pixels of truth phase `t` assigned to (matched) phase `p`.
    pub confusion: Vec<Vec<u64>>,
    /// `matching[r]`: truth phase that result label `r` was mapped to.
    pub matching: Vec<usize>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

fn best_permutation(raw: &[Vec<u64>]) -> Vec<usize> {
    // raw[r][t]: result label r against truth label t.
    let k = raw.len();
    if k <= EXHAUSTIVE_MATCH_LIMIT {
        let mut best = (0u64, (0..k).collect::<Vec<_>>());
        let mut current = Vec::with_capacity(k);
        let mut used = vec![false; k];
        fn search(raw: &[Vec<u64>], current: &mut Vec<usize>, used: &mut [bool], score: u64, best: &mut (u64, Vec<usize>)) {
            let r = current.len();
            if r == raw.len() {
                if score > best.0 {
                    *best = (score, current.clone());
                }
                return;
            }
            for t in 0..raw.len() {
                if !used[t] {
                    used[t] = true;
                    current.push(t);
                    search(raw, current, used, score + raw[r][t], best);
                    current.pop();
                    used[t] = false;
                }
            }
        }
        search(raw, &mut current, &mut used, 0, &mut best);
        best.1
    } else {
        let weights = Matrix::from_vec(k, k, raw.iter().flatten().map(|&v| v as i64).collect())
            .expect("square weight matrix");
        kuhn_munkres(&weights).1
    }
}

/// Scores `result` against `truth` under the label matching that maximizes
/// pixel accuracy.
pub fn score(result: &Partition, truth: &Partition) -> Result<MetricsReport> {
    if result.shape() != truth.shape() {
        return Err(SegError::Contract(format!(
            "result is {:?} but truth is {:?}",
            result.shape(),
            truth.shape()
        )));
    }
    if result.phases() > truth.phases() {
        return Err(SegError::Contract(format!(
            "result has {} phases, truth only {}",
            result.phases(),
            truth.phases()
        )));
    }
    let k = truth.phases();
    let mut raw = vec![vec![0u64; k]; k];
    for (&r, &t) in result.labels().iter().zip(truth.labels()) {
        raw[r as usize][t as usize] += 1;
    }
    let matching = best_permutation(&raw);
    let mut confusion = vec![vec![0u64; k]; k];
    for (r, row) in raw.iter().enumerate() {
        for (t, &count) in row.iter().enumerate() {
            confusion[t][matching[r]] += count;
        }
    }
    let total = result.labels().len() as f64;
    let correct: u64 = (0..k).map(|i| confusion[i][i]).sum();
    let mut dice = Vec::with_capacity(k);
    let mut jaccard = Vec::with_capacity(k);
    for i in 0..k {
        let tp = confusion[i][i] as f64;
        let truth_size: u64 = confusion[i].iter().sum();
        let pred_size: u64 = confusion.iter().map(|row| row[i]).sum();
        let (t, p) = (truth_size as f64, pred_size as f64);
        if truth_size + pred_size == 0 {
            dice.push(1.0);
            jaccard.push(1.0);
        } else {
            dice.push(2.0 * tp / (t + p));
            jaccard.push(tp / (t + p - tp));
        }
    }
    Ok(MetricsReport {
        accuracy: correct as f64 / total,
        dice,
        jaccard,
        confusion,
        matching: matching[..result.phases()].to_vec(),
    })
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub partition: Partition,
    pub metrics: MetricsReport,
    pub trace: EnergyTrace,
    pub iterations: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub noisy: ImageField,
    pub init: Partition,
    pub init_metrics: MetricsReport,
    pub plain: RunResult,
    pub lvf: RunResult,
}

pub fn solve_and_score(noisy: &ImageField, init: &Partition, truth: &Partition, scfg: &SolverConfig) -> Result<RunResult> {
    let start = Instant::now();
    let out = solve(noisy, init, scfg)?;
    let seconds = start.elapsed().as_secs_f64();
    Ok(RunResult {
        metrics: score(&out.partition, truth)?,
        partition: out.partition,
        trace: out.trace,
        iterations: out.iterations,
        seconds,
    })
}

/// Adds noise once, initializes once, and solves with both configurations.
///
/// `seed` drives both the noise field and the k-means seeding.
pub fn compare_lvf(
    phantom: &Phantom,
    variance: f64,
    plain: &SolverConfig,
    lvf: &SolverConfig,
    iglim: &IglimConfig,
    seed: u64,
) -> Result<Comparison> {
    let mut aligned = lvf.clone();
    aligned.model.lvf_weight = plain.model.lvf_weight;
    if &aligned != plain {
        return Err(SegError::Contract(
            "compared solver configs may differ only in the lvf weight".into(),
        ));
    }
    let noisy = add_gaussian_noise(&phantom.image, variance, seed)?;
    let init = multi_iglim(&noisy, iglim, seed)?;
    Ok(Comparison {
        init_metrics: score(&init, &phantom.truth)?,
        plain: solve_and_score(&noisy, &init, &phantom.truth, plain)?,
        lvf: solve_and_score(&noisy, &init, &phantom.truth, lvf)?,
        noisy,
        init,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub case: String,
    pub variance: f64,
    pub p: f64,
    pub accuracy: f64,
    pub iters: usize,
    pub seconds: f64,
}

pub const BENCH_CSV_HEADER: &str = "case,variance,p,accuracy,iters,seconds";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.case, r.variance, r.p, r.accuracy, r.iters, r.seconds);
    }
    out
}

pub fn write_bench_csv(rows: &[BenchRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, bench_csv(rows)).map_err(|e| SegError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn phantoms_are_constructive() {
        for kind in [PhantomKind::Shapes3, PhantomKind::Shapes3Rgb, PhantomKind::Shapes4] {
            let ph = make_phantom(kind, 128, 7).unwrap();
            assert!(ph.truth.phase_sizes().iter().all(|&s| s > 0), "{kind:?}");
            for (idx, &l) in ph.truth.labels().iter().enumerate() {
                assert_eq!(ph.image.pixel(idx), ph.description.intensities[l as usize]);
            }
        }
        let ph = make_phantom(PhantomKind::Shapes4, 128, 0).unwrap();
        assert_eq!(ph.description.intensities, vec![vec![0.0], vec![85.0], vec![170.0], vec![255.0]]);
        assert!(make_phantom(PhantomKind::Shapes3, 32, 0).is_err());
    }

    #[test]
    fn inhomogeneous_phantom_varies_within_phase() {
        let ph = make_phantom(PhantomKind::Inhomog2, 96, 1).unwrap();
        for phase in 0..2 {
            let values: Vec<f64> = (0..96 * 96)
                .filter(|&i| ph.truth.labels()[i] as usize == phase)
                .map(|i| ph.image.as_slice()[i])
                .collect();
            let base = INHOMOG_LEVELS[phase];
            let (lo, hi) = values.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            assert!(lo >= 0.5 * base - 1e-9 && hi <= 1.5 * base + 1e-9);
            assert!(hi - lo > 0.3 * base);
        }
    }

    #[test]
    fn phantom_geometry_depends_on_seed_only() {
        let a = make_phantom(PhantomKind::Shapes4, 64, 3).unwrap();
        let b = make_phantom(PhantomKind::Shapes4, 64, 3).unwrap();
        let c = make_phantom(PhantomKind::Shapes4, 64, 4).unwrap();
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.image, b.image);
        assert_ne!(a.description.shapes, c.description.shapes);
    }

    #[test]
    fn noise_statistics_and_clamping() {
        let img = ImageField::gray(&crate::field::Field::filled(256, 256, 128.0)).unwrap();
        assert_eq!(add_gaussian_noise(&img, 0.0, 1).unwrap(), img);
        let samples = noise_samples(256 * 256, 300.0, 11).unwrap();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
        assert!((var - 300.0).abs() < 10.0, "{var}");
        let noisy = add_gaussian_noise(&img, 300.0, 11).unwrap();
        for (n, s) in noisy.as_slice().iter().zip(&samples) {
            assert_eq!(*n, (128.0 + s).clamp(0.0, 255.0));
        }
        let white = ImageField::gray(&crate::field::Field::filled(32, 32, 255.0)).unwrap();
        assert!(add_gaussian_noise(&white, 500.0, 2).unwrap().as_slice().iter().all(|&v| v <= 255.0));
        assert!(noise_samples(4, -1.0, 0).is_err());
        assert_eq!(add_gaussian_noise(&img, 50.0, 9).unwrap(), add_gaussian_noise(&img, 50.0, 9).unwrap());
    }

    #[test]
    fn score_examples() {
        let truth = make_phantom(PhantomKind::Shapes4, 100, 0).unwrap().truth;
        let same = score(&truth, &truth).unwrap();
        assert_eq!(same.accuracy, 1.0);
        assert!(same.dice.iter().all(|&d| d == 1.0));
        let permuted = truth.relabel(&[3, 1, 0, 2]).unwrap();
        assert_eq!(score(&permuted, &truth).unwrap().accuracy, 1.0);

        // Flip exactly 1% of pixels (100 of 10000) to another phase.
        let mut labels = truth.labels().to_vec();
        for l in labels.iter_mut().step_by(100) {
            *l = (*l + 1) % 4;
        }
        let flipped = Partition::new(100, 100, 4, labels).unwrap();
        assert!((score(&flipped, &truth).unwrap().accuracy - 0.99).abs() < 1e-12);

        let small = Partition::uniform(10, 10, 2, 0).unwrap();
        assert!(score(&small, &truth).is_err());
    }

    #[test]
    fn hungarian_agrees_with_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let raw: Vec<Vec<u64>> = (0..6).map(|_| (0..6).map(|_| rng.random_range(0..50)).collect()).collect();
            let exhaustive = best_permutation(&raw);
            let weights = Matrix::from_vec(6, 6, raw.iter().flatten().map(|&v| v as i64).collect()).unwrap();
            let (total, _) = kuhn_munkres(&weights);
            let found: u64 = exhaustive.iter().enumerate().map(|(r, &t)| raw[r][t]).sum();
            assert_eq!(found as i64, total);
        }
        // Above the exhaustive limit: identity-heavy matrix is matched to itself.
        let raw: Vec<Vec<u64>> = (0..8).map(|r| (0..8).map(|t| if r == (t + 3) % 8 { 100 } else { 1 }).collect()).collect();
        let m = best_permutation(&raw);
        assert!((0..8).all(|r| r == (m[r] + 3) % 8));
    }

    #[test]
    fn bench_csv_layout() {
        let rows = vec![BenchRow {
            case: "shapes3".into(),
            variance: 50.0,
            p: 0.01,
            accuracy: 0.5,
            iters: 3,
            seconds: 0.25,
        }];
        assert_eq!(bench_csv(&rows), "case,variance,p,accuracy,iters,seconds\nshapes3,50,0.01,0.5,3,0.25\n");
    }

    #[test]
    fn compare_requires_matching_configs() {
        let ph = make_phantom(PhantomKind::Shapes3, 64, 0).unwrap();
        let plain = SolverConfig::default();
        let mut other = plain.clone();
        other.mu = 2.0;
        assert!(compare_lvf(&ph, 0.0, &plain, &other, &IglimConfig { phases: 3, ..Default::default() }, 0).is_err());
    }

    #[test]
    fn degenerate_comparison_is_identical() {
        let ph = make_phantom(PhantomKind::Shapes3, 64, 0).unwrap();
        let mut plain = SolverConfig::default();
        plain.mu = 50.0;
        plain.model.lvf_weight = 0.0;
        let iglim = IglimConfig { phases: 3, ..Default::default() };
        let cmp = compare_lvf(&ph, 50.0, &plain, &plain, &iglim, 5).unwrap();
        assert_eq!(cmp.plain.partition, cmp.lvf.partition);
        assert_eq!(cmp.plain.metrics, cmp.lvf.metrics);
        assert_eq!(cmp.plain.trace.totals(), cmp.lvf.trace.totals());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn score_is_symmetric_under_joint_relabeling(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..5usize);
            let mk = |rng: &mut ChaCha8Rng| Partition::new(6, 6, n, (0..36).map(|_| rng.random_range(0..n as u8)).collect()).unwrap();
            let (a, b) = (mk(&mut rng), mk(&mut rng));
            let mut perm: Vec<u8> = (0..n as u8).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let base = score(&a, &b).unwrap();
            let moved = score(&a.relabel(&perm).unwrap(), &b.relabel(&perm).unwrap()).unwrap();
            prop_assert!((base.accuracy - moved.accuracy).abs() < 1e-15);
            prop_assert!(base.accuracy >= 0.0 && base.accuracy <= 1.0);
            for (d, j) in base.dice.iter().zip(&base.jaccard) {
                prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
            }
        }
    }
}
