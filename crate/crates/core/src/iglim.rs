//! Multi-IGLIM initialization.
//!
//! Edge candidates come from an inhomogeneous graph Laplacian whose neighbor
//! weights grow exponentially with the intensity difference. Candidates are
//! split into phases by K-means on their channel vectors, thinned by the
//! diagonal-connectivity rule, and the remaining pixels are assigned to the
//! nearest K-means centroid.
//!
//! All neighborhoods wrap periodically, matching the solver's boundary handling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::field::{wrap, Field};
use crate::image::{ImageField, Partition};

/// Neighbor offsets `(drow, dcol)` in stencil order k = 1..8.
pub const STENCIL: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
];

const MAX_LLOYD_ROUNDS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IglimConfig {
    /// Weight sharpness; 0 gives the plain 8-neighbor Laplacian.
    pub lambda: f64,
    /// Edge threshold on |L|.
    pub alpha: f64,
    /// Number of diagonal-connectivity denoising sweeps.
    pub denoise_rounds: usize,
    pub phases: usize,
}

impl Default for IglimConfig {
    fn default() -> Self {
        IglimConfig {
            lambda: 0.003,
            alpha: 1.0,
            denoise_rounds: 2,
            phases: 2,
        }
    }
}

impl IglimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(SegError::Config(format!(
                "iglim lambda must be a finite non-negative number, got {}",
                self.lambda
            )));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(SegError::Config(format!(
                "iglim alpha must be a finite non-negative number, got {}",
                self.alpha
            )));
        }
        if !(2..=256).contains(&self.phases) {
            return Err(SegError::Config(format!(
                "phases must be in [2, 256], got {}",
                self.phases
            )));
        }
        Ok(())
    }
}

/// Phase-wise edge pixel sets with their K-means centroids.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSets {
    pub height: usize,
    pub width: usize,
    /// Sorted flat pixel indices, one set per phase; pairwise disjoint.
    pub sets: Vec<Vec<usize>>,
    /// Channel-space centroid per phase.
    pub centroids: Vec<Vec<f64>>,
}

impl EdgeSets {
    pub fn phases(&self) -> usize {
        self.sets.len()
    }

    /// Set index per pixel, `None` for non-members.
    pub fn membership(&self) -> Vec<Option<usize>> {
        let mut map = vec![None; self.height * self.width];
        for (i, set) in self.sets.iter().enumerate() {
            for &p in set {
                map[p] = Some(i);
            }
        }
        map
    }
}

fn require_interior(img: &ImageField) -> Result<()> {
    if img.height() < 3 || img.width() < 3 {
        return Err(SegError::Contract(format!(
            "graph Laplacian needs at least 3x3 pixels, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// Normalized neighbor weights `c_k` at one pixel.
///
/// The exponent `λ·d²` is shifted by its maximum before exponentiation, which
/// leaves the ratios unchanged.
pub fn laplacian_weights(img: &ImageField, lambda: f64, row: usize, col: usize) -> [f64; 8] {
    let (h, w) = img.shape();
    let channels = img.channels();
    let mut exps = [[0.0f64; 6]; 8];
    let mut max_exp = f64::NEG_INFINITY;
    for (k, &(dr, dc)) in STENCIL.iter().enumerate() {
        let (r2, c2) = (wrap(row, dr, h), wrap(col, dc, w));
        for (p, slot) in exps[k][..channels].iter_mut().enumerate() {
            let d = img.value(row, col, p) - img.value(r2, c2, p);
            *slot = lambda * d * d;
            max_exp = max_exp.max(*slot);
        }
    }
    let mut weights = [0.0; 8];
    for (k, row_exps) in exps.iter().enumerate() {
        weights[k] = row_exps[..channels].iter().map(|&e| (e - max_exp).exp()).sum();
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|c| *c /= total);
    weights
}

/// Inhomogeneous graph Laplacian `L(x) = Σ_k c_k Σ_p (I^k(p) − I(p))`.
pub fn graph_laplacian(img: &ImageField, lambda: f64) -> Result<Field> {
    require_interior(img)?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(SegError::Contract(format!(
            "lambda must be finite and non-negative, got {lambda}"
        )));
    }
    let (h, w) = img.shape();
    let mut out = vec![0.0; h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(row, line)| {
        for (col, slot) in line.iter_mut().enumerate() {
            let weights = laplacian_weights(img, lambda, row, col);
            let mut acc = 0.0;
            for (k, &(dr, dc)) in STENCIL.iter().enumerate() {
                let (r2, c2) = (wrap(row, dr, h), wrap(col, dc, w));
                let diff: f64 = (0..img.channels())
                    .map(|p| img.value(r2, c2, p) - img.value(row, col, p))
                    .sum();
                acc += weights[k] * diff;
            }
            *slot = acc;
        }
    });
    Ok(Field::from_vec(h, w, out))
}

/// Pixels with `|L(x)| >= alpha`, as sorted flat indices.
pub fn threshold_edges(lap: &Field, alpha: f64) -> Vec<usize> {
    lap.as_slice()
        .iter()
        .enumerate()
        .filter(|(_, v)| v.abs() >= alpha)
        .map(|(i, _)| i)
        .collect()
}

/// Binary IGLIM split: `(S_p, S_n) = ({L > α}, {L < −α})`.
pub fn split_by_sign(lap: &Field, alpha: f64) -> (Vec<usize>, Vec<usize>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, &v) in lap.as_slice().iter().enumerate() {
        if v > alpha {
            pos.push(i);
        } else if v < -alpha {
            neg.push(i);
        }
    }
    (pos, neg)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center, lowest index on ties.
fn nearest(point: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn mean_intensity(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// K-means (k-means++ seeding, then Lloyd) on the channel vectors of `points`.
///
/// Phases are numbered by ascending mean centroid intensity.
pub fn kmeans_split(points: &[usize], img: &ImageField, n: usize, seed: u64) -> Result<EdgeSets> {
    if points.len() < n {
        return Err(SegError::Init(format!(
            "only {} edge points for {n} phases; use a smaller alpha",
            points.len()
        )));
    }
    let data: Vec<Vec<f64>> = points.iter().map(|&p| img.pixel(p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers = vec![data[rng.random_range(0..data.len())].clone()];
    let mut dist: Vec<f64> = data.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < n {
        let total: f64 = dist.iter().sum();
        if total <= 0.0 {
            return Err(SegError::Init(format!(
                "edge points hold fewer than {n} distinct values; use a smaller alpha or fewer phases"
            )));
        }
        let target = rng.random_range(0.0..total);
        let mut acc = 0.0;
        let mut pick = data.len() - 1;
        for (i, &d) in dist.iter().enumerate() {
            acc += d;
            if acc > target && d > 0.0 {
                pick = i;
                break;
            }
        }
        let center = data[pick].clone();
        for (d, x) in dist.iter_mut().zip(&data) {
            *d = d.min(sq_dist(x, &center));
        }
        centers.push(center);
    }

    let mut assign: Vec<usize> = data.iter().map(|x| nearest(x, &centers)).collect();
    for _ in 0..MAX_LLOYD_ROUNDS {
        let dims = img.channels();
        let mut sums = vec![vec![0.0; dims]; n];
        let mut counts = vec![0usize; n];
        for (x, &a) in data.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x) {
                *s += v;
            }
        }
        for i in 0..n {
            // Empty clusters keep their previous center.
            if counts[i] > 0 {
                centers[i] = sums[i].iter().map(|s| s / counts[i] as f64).collect();
            }
        }
        let next: Vec<usize> = data.iter().map(|x| nearest(x, &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }

    let mut sets = vec![Vec::new(); n];
    for (&p, &a) in points.iter().zip(&assign) {
        sets[a].push(p);
    }
    if let Some(empty) = sets.iter().position(Vec::is_empty) {
        return Err(SegError::Init(format!(
            "K-means left cluster {empty} empty; use a smaller alpha or fewer phases"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| mean_intensity(&centers[a]).total_cmp(&mean_intensity(&centers[b])));
    Ok(EdgeSets {
        height: img.height(),
        width: img.width(),
        sets: order.iter().map(|&i| std::mem::take(&mut sets[i])).collect(),
        centroids: order.iter().map(|&i| centers[i].clone()).collect(),
    })
}

/// True if both corner groups of one diagonal pair contain a member of `set`.
fn diagonally_connected(member: &[Option<usize>], set: usize, h: usize, w: usize, row: usize, col: usize) -> bool {
    let hit = |group: &[(isize, isize)]| {
        group
            .iter()
            .any(|&(dr, dc)| member[wrap(row, dr, h) * w + wrap(col, dc, w)] == Some(set))
    };
    let s1 = [(-1, -1), (0, -1), (-1, 0)];
    let s2 = [(-1, 1), (0, 1), (-1, 0)];
    let s3 = [(1, -1), (0, -1), (1, 0)];
    let s4 = [(1, 1), (0, 1), (1, 0)];
    (hit(&s1) && hit(&s4)) || (hit(&s2) && hit(&s3))
}

/// Runs `rounds` synchronous sweeps removing pixels that are not diagonally
/// connected within their own set.
pub fn denoise_diagonal(sets: &EdgeSets, rounds: usize) -> EdgeSets {
    let (h, w) = (sets.height, sets.width);
    let mut current = sets.clone();
    for _ in 0..rounds {
        let member = current.membership();
        let mut removed = false;
        for (i, set) in current.sets.iter_mut().enumerate() {
            let before = set.len();
            set.retain(|&p| diagonally_connected(&member, i, h, w, p / w, p % w));
            removed |= set.len() != before;
        }
        if !removed {
            break;
        }
    }
    current
}

/// Labels set members by their set and every other pixel by the nearest centroid.
pub fn complete_partition(sets: &EdgeSets, img: &ImageField) -> Result<Partition> {
    if img.shape() != (sets.height, sets.width) {
        return Err(SegError::Contract("edge sets and image differ in shape".into()));
    }
    if let Some(empty) = sets.sets.iter().position(Vec::is_empty) {
        return Err(SegError::Init(format!(
            "edge set {empty} is empty; use a smaller alpha, fewer denoise rounds or fewer phases"
        )));
    }
    let member = sets.membership();
    let labels = (0..img.pixels())
        .map(|p| match member[p] {
            Some(i) => i as u8,
            None => nearest(&img.pixel(p), &sets.centroids) as u8,
        })
        .collect();
    Partition::new(img.height(), img.width(), sets.phases(), labels)
}

/// Multi-IGLIM: Laplacian, edge threshold, K-means, denoising, completion.
pub fn multi_iglim(img: &ImageField, cfg: &IglimConfig, seed: u64) -> Result<Partition> {
    cfg.validate()?;
    let lap = graph_laplacian(img, cfg.lambda)?;
    let edges = threshold_edges(&lap, cfg.alpha);
    if edges.is_empty() {
        return Err(SegError::Init(format!(
            "no edge points above alpha = {}; use a smaller alpha",
            cfg.alpha
        )));
    }
    let sets = kmeans_split(&edges, img, cfg.phases, seed)?;
    let sets = denoise_diagonal(&sets, cfg.denoise_rounds);
    complete_partition(&sets, img)
}

/// Two-phase IGLIM built from the sign split of the Laplacian.
pub fn binary_iglim(img: &ImageField, lambda: f64, alpha: f64, rounds: usize) -> Result<Partition> {
    let lap = graph_laplacian(img, lambda)?;
    let (pos, neg) = split_by_sign(&lap, alpha);
    if pos.is_empty() || neg.is_empty() {
        return Err(SegError::Init(format!(
            "no edge points above alpha = {alpha} on one side; use a smaller alpha"
        )));
    }
    let centroid = |set: &[usize]| -> Vec<f64> {
        let mut acc = vec![0.0; img.channels()];
        for &p in set {
            for (a, v) in acc.iter_mut().zip(img.pixel(p)) {
                *a += v;
            }
        }
        acc.iter().map(|a| a / set.len() as f64).collect()
    };
    let (cp, cn) = (centroid(&pos), centroid(&neg));
    let mut sets = EdgeSets {
        height: img.height(),
        width: img.width(),
        sets: vec![pos, neg],
        centroids: vec![cp, cn],
    };
    if mean_intensity(&sets.centroids[1]) < mean_intensity(&sets.centroids[0]) {
        sets.sets.swap(0, 1);
        sets.centroids.swap(0, 1);
    }
    complete_partition(&denoise_diagonal(&sets, rounds), img)
}
