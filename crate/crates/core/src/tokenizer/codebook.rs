use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 100;
pub const INERTIA_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookMode {
    /// Raw normalized patch pixels (low-level vocabulary).
    Pixel,
    /// Hidden states of a frozen, previously pretrained encoder.
    Feature,
}

impl CodebookMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CodebookMode::Pixel => "pixel",
            CodebookMode::Feature => "feature",
        }
    }

    pub(crate) fn byte(&self) -> u8 {
        match self {
            CodebookMode::Pixel => 0,
            CodebookMode::Feature => 1,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(CodebookMode::Pixel),
            1 => Some(CodebookMode::Feature),
            _ => None,
        }
    }
}

impl fmt::Display for CodebookMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CodebookMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(CodebookMode::Pixel),
            "feature" => Ok(CodebookMode::Feature),
            other => Err(Error::invalid(format!("unknown codebook mode `{other}`"))),
        }
    }
}

/// Scalar standardization applied to vectors before the distance search.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Default for Standardizer {
    fn default() -> Self {
        Standardizer {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl Standardizer {
    /// Mean and standard deviation over every coordinate of every sample.
    pub fn fit(samples: &[Vec<f64>]) -> Self {
        let n: usize = samples.iter().map(|s| s.len()).sum();
        if n == 0 {
            return Self::default();
        }
        let mean = samples.iter().flatten().sum::<f64>() / n as f64;
        let var = samples
            .iter()
            .flatten()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n as f64;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Standardizer { mean, std }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| (x - self.mean) / self.std).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.mean == 0.0 && self.std == 1.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub iterations: usize,
    pub inertia: f64,
}

/// `K` code vectors in `R^{d_c}`: the visual vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub mode: CodebookMode,
    pub dim: usize,
    pub codes: Vec<Vec<f64>>,
    pub standardizer: Standardizer,
    pub stats: FitStats,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest code; ties go to the lowest index.
fn nearest(codes: &[Vec<f64>], v: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in codes.iter().enumerate() {
        let d = sq_dist(c, v);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    (best, best_d)
}

fn distinct_count_at_least(samples: &[Vec<f64>], k: usize) -> bool {
    let mut keys: Vec<Vec<u64>> = samples
        .iter()
        .map(|s| s.iter().map(|v| v.to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len() >= k
}

/// k-means with k-means++ seeding.
///
/// Runs Lloyd iterations until the relative inertia change drops below
/// `1e-6` or 100 iterations. A cluster that empties is re-seeded with the
/// sample currently farthest from its assigned code.
pub fn build_codebook<R: Rng + ?Sized>(
    samples: &[Vec<f64>],
    k: usize,
    mode: CodebookMode,
    rng: &mut R,
) -> Result<Codebook> {
    if k < 2 {
        return Err(Error::invalid(format!("codebook size {k} < 2")));
    }
    if samples.len() < k {
        return Err(Error::invalid(format!(
            "{} samples cannot fit {k} codes",
            samples.len()
        )));
    }
    let dim = samples[0].len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(Error::shape("build_codebook", "samples differ in length"));
    }
    if samples.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite sample"));
    }
    if !distinct_count_at_least(samples, k) {
        return Err(Error::invalid(format!(
            "degenerate samples: fewer than {k} distinct vectors"
        )));
    }

    // k-means++: each new seed drawn with probability proportional to the
    // squared distance to the nearest existing seed.
    let mut codes: Vec<Vec<f64>> = Vec::with_capacity(k);
    codes.push(samples[rng.gen_range(0..samples.len())].clone());
    let mut d2: Vec<f64> = samples.iter().map(|s| sq_dist(s, &codes[0])).collect();
    while codes.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    chosen = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            chosen.expect("positive total weight")
        } else {
            unreachable!("distinct-count check guarantees a non-zero distance")
        };
        let c = samples[pick].clone();
        for (di, s) in d2.iter_mut().zip(samples) {
            *di = di.min(sq_dist(s, &c));
        }
        codes.push(c);
    }

    let mut assign = vec![0usize; samples.len()];
    let mut dists = vec![0.0; samples.len()];
    let mut inertia = f64::INFINITY;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut new_inertia = 0.0;
        for (i, s) in samples.iter().enumerate() {
            let (j, d) = nearest(&codes, s);
            assign[i] = j;
            dists[i] = d;
            new_inertia += d;
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (s, &j) in samples.iter().zip(&assign) {
            counts[j] += 1;
            for (a, v) in sums[j].iter_mut().zip(s) {
                *a += v;
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = dists
                    .iter()
                    .enumerate()
                    .fold((0, -1.0), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc })
                    .0;
                codes[j] = samples[far].clone();
                dists[far] = 0.0;
            } else {
                for (c, s) in codes[j].iter_mut().zip(&sums[j]) {
                    *c = s / counts[j] as f64;
                }
            }
        }

        let converged = if new_inertia == 0.0 {
            true
        } else {
            ((inertia - new_inertia) / new_inertia).abs() < INERTIA_TOLERANCE
        };
        inertia = new_inertia;
        if converged {
            break;
        }
    }
    // Report the inertia of the final codes.
    let final_inertia: f64 = samples.iter().map(|s| nearest(&codes, s).1).sum();
    Ok(Codebook {
        mode,
        dim,
        codes,
        standardizer: Standardizer::default(),
        stats: FitStats {
            iterations,
            inertia: final_inertia.min(inertia),
        },
    })
}

/// Standardizes `samples` with one scalar mean / std, then fits. The result
/// is rounded to on-disk precision so saved and in-memory codebooks agree.
pub fn fit_codebook<R: Rng + ?Sized>(
    samples: &[Vec<f64>],
    k: usize,
    mode: CodebookMode,
    rng: &mut R,
) -> Result<Codebook> {
    let standardizer = Standardizer::fit(samples);
    let normed: Vec<Vec<f64>> = samples.iter().map(|s| standardizer.apply(s)).collect();
    let mut cb = build_codebook(&normed, k, mode, rng)?;
    cb.standardizer = standardizer;
    cb.round_to_f32();
    Ok(cb)
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Nearest code by squared Euclidean distance, lowest index on ties.
    pub fn tokenize(&self, v: &[f64]) -> Result<usize> {
        if v.len() != self.dim {
            return Err(Error::shape(
                "tokenize",
                format!("vector of length {}, codebook dim {}", v.len(), self.dim),
            ));
        }
        if self.standardizer.is_identity() {
            Ok(nearest(&self.codes, v).0)
        } else {
            Ok(nearest(&self.codes, &self.standardizer.apply(v)).0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SeedStream;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn two_blobs_recover_means() {
        let mut rng = SeedStream::new(1).rng("blobs");
        let noise = Normal::new(0.0, 0.2).unwrap();
        let centers = [[-3.0, 1.0], [4.0, -2.0]];
        let mut samples = Vec::new();
        for c in centers.iter() {
            for _ in 0..200 {
                samples.push(vec![c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]);
            }
        }
        let mean_of = |range: std::ops::Range<usize>| {
            let n = range.len() as f64;
            let mut m = [0.0; 2];
            for s in &samples[range] {
                m[0] += s[0] / n;
                m[1] += s[1] / n;
            }
            m
        };
        let oracle = [mean_of(0..200), mean_of(200..400)];
        let cb = build_codebook(&samples, 2, CodebookMode::Pixel, &mut rng).unwrap();
        for o in oracle {
            let (j, _) = nearest(&cb.codes, &o);
            assert!(sq_dist(&cb.codes[j], &o).sqrt() < 0.1);
        }
    }

    #[test]
    fn repeated_points_are_recovered_exactly() {
        let pts = vec![vec![0.0, 0.0], vec![1.0, 5.0], vec![-2.0, 3.0]];
        let mut samples = Vec::new();
        for _ in 0..7 {
            samples.extend(pts.iter().cloned());
        }
        let mut rng = SeedStream::new(2).rng("k");
        let cb = build_codebook(&samples, 3, CodebookMode::Pixel, &mut rng).unwrap();
        assert_eq!(cb.stats.inertia, 0.0);
        let mut got = cb.codes.clone();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want = pts.clone();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn k_equals_m_is_a_permutation() {
        let mut rng = SeedStream::new(3).rng("k");
        let samples: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let cb = build_codebook(&samples, 12, CodebookMode::Pixel, &mut rng).unwrap();
        let mut got = cb.codes.clone();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want = samples.clone();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn rejects_too_few_and_degenerate() {
        let mut rng = SeedStream::new(4).rng("k");
        let few = vec![vec![0.0], vec![1.0]];
        assert!(build_codebook(&few, 3, CodebookMode::Pixel, &mut rng).is_err());
        let same = vec![vec![0.5, 0.5]; 10];
        assert!(build_codebook(&same, 2, CodebookMode::Pixel, &mut rng).is_err());
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let cb = Codebook {
            mode: CodebookMode::Pixel,
            dim: 1,
            codes: vec![vec![10.0], vec![20.0], vec![-1.0], vec![30.0], vec![40.0], vec![1.0]],
            standardizer: Standardizer::default(),
            stats: FitStats::default(),
        };
        assert_eq!(cb.tokenize(&[0.0]).unwrap(), 2);
        assert_eq!(cb.tokenize(&[20.0]).unwrap(), 1);
        assert!(cb.tokenize(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn fit_is_reproducible() {
        let mut rng = SeedStream::new(5).rng("data");
        let samples: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..4).map(|_| rng.gen_range(0.0..255.0)).collect())
            .collect();
        let a = fit_codebook(&samples, 8, CodebookMode::Pixel, &mut SeedStream::new(9).rng("km")).unwrap();
        let b = fit_codebook(&samples, 8, CodebookMode::Pixel, &mut SeedStream::new(9).rng("km")).unwrap();
        assert_eq!(a, b);
        for i in 0..a.codes.len() {
            for j in 0..i {
                assert_ne!(a.codes[i], a.codes[j]);
            }
        }
    }
}
