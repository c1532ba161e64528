//! Non-uniform scalar quantization with a reserved zero code.
//!
//! Nonzero values are clustered into at most `2^bits - 1` centers with
//! Lloyd's algorithm (k-means++ seeding). Code 0 always decodes to exactly
//! 0.0 so pruned entries survive quantization untouched; code `c >= 1` decodes
//! to `codebook[c - 1]`. Codes are packed little-end first: for 4 bits,
//! element `2i` sits in the low nibble of byte `i`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::name_seed;
use crate::tensor_store::numel;

pub const DEFAULT_SAMPLE_CAP: usize = 65_536;
pub const DEFAULT_MAX_ITERS: usize = 50;
pub const DEFAULT_REL_TOL: f64 = 1e-6;
pub const DEFAULT_RESTARTS: usize = 10;
const REFINE_ROUNDS: usize = 32;
const POLISH_WINDOW: usize = 16;
const MERGE_CANDIDATES: usize = 8;

fn default_restarts() -> usize {
    DEFAULT_RESTARTS
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    pub max_kmeans_iters: usize,
    pub sample_cap: usize,
    pub rng_seed: u64,
    /// Independent k-means++ seedings; the lowest-SSE fit wins.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 4,
            max_kmeans_iters: DEFAULT_MAX_ITERS,
            sample_cap: DEFAULT_SAMPLE_CAP,
            rng_seed: 0,
            restarts: DEFAULT_RESTARTS,
        }
    }
}

impl QuantConfig {
    pub fn with_bits(bits: u8) -> Self {
        Self {
            bits,
            ..Self::default()
        }
    }

    pub fn max_centers(&self) -> usize {
        (1usize << self.bits) - 1
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.bits, 2 | 4 | 8) {
            return Err(Error::InvalidConfig(format!("bits must be 2, 4 or 8, got {}", self.bits)));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidConfig("restarts must be positive".into()));
        }
        if self.max_kmeans_iters == 0 {
            return Err(Error::InvalidConfig("max_kmeans_iters must be positive".into()));
        }
        if self.sample_cap < (1usize << self.bits) {
            return Err(Error::InvalidConfig(format!(
                "sample_cap {} is below 2^bits",
                self.sample_cap
            )));
        }
        Ok(())
    }
}

/// Codebook plus packed codes for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub bits: u8,
    /// Strictly ascending centers; code `c` maps to `codebook[c - 1]`.
    pub codebook: Vec<f32>,
    pub packed: Vec<u8>,
}

impl QuantizedTensor {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn codes(&self) -> Result<Vec<u8>> {
        unpack_codes(&self.packed, self.bits, self.numel())
    }
}

/// Result of a codebook fit, with the per-iteration SSE on the fitting sample.
#[derive(Clone, Debug)]
pub struct CodebookFit {
    pub centers: Vec<f32>,
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

/// Index of the nearest center (ties to the lower index) in ascending `centers`.
fn nearest(x: f64, centers: &[f64]) -> usize {
    let j = centers.partition_point(|c| *c < x);
    if j == 0 {
        return 0;
    }
    if j == centers.len() {
        return j - 1;
    }
    if (x - centers[j]).abs() < (x - centers[j - 1]).abs() {
        j
    } else {
        j - 1
    }
}

/// Deterministic stride subsample, sorted.
fn fitting_sample(values: &[f32], cap: usize) -> Vec<f64> {
    let n = values.len();
    let mut sample: Vec<f64> = if n <= cap {
        values.iter().map(|v| f64::from(*v)).collect()
    } else {
        (0..cap)
            .map(|i| f64::from(values[(i as u128 * n as u128 / cap as u128) as usize]))
            .collect()
    };
    sample.sort_by(f64::total_cmp);
    sample
}

/// Fenwick tree over non-negative weights with prefix-mass search.
struct Fenwick {
    tree: Vec<f64>,
}

impl Fenwick {
    fn new(weights: &[f64]) -> Self {
        let n = weights.len();
        let mut tree = vec![0.0; n + 1];
        tree[1..].copy_from_slice(weights);
        for i in 1..=n {
            let parent = i + (i & i.wrapping_neg());
            if parent <= n {
                tree[parent] += tree[i];
            }
        }
        Self { tree }
    }

    fn add(&mut self, index: usize, delta: f64) {
        let mut i = index + 1;
        while i < self.tree.len() {
            self.tree[i] += delta;
            i += i & i.wrapping_neg();
        }
    }

    fn total(&self) -> f64 {
        let mut i = self.tree.len() - 1;
        let mut sum = 0.0;
        while i > 0 {
            sum += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        sum
    }

    /// Smallest index whose inclusive prefix mass exceeds `mass`.
    fn find(&self, mut mass: f64) -> usize {
        let n = self.tree.len() - 1;
        let mut pos = 0;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= mass {
                pos = next;
                mass -= self.tree[next];
            }
            step >>= 1;
        }
        pos.min(n - 1)
    }
}

/// Greedy k-means++: each new center is the best of `2 + ln k` candidates
/// drawn with probability proportional to squared distance. The sample is
/// sorted, so a candidate only changes distances between its neighbors.
fn kmeans_pp(sample: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let trials = 2 + (k as f64).ln() as usize;
    let mut centers = vec![sample[rng.random_range(0..sample.len())]];
    let mut d2: Vec<f64> = sample.iter().map(|x| (x - centers[0]).powi(2)).collect();
    let mut mass = Fenwick::new(&d2);
    // sample indices strictly between the existing centers around `c`
    let span = |centers: &[f64], c: f64| {
        let j = centers.partition_point(|x| *x < c);
        let lo = if j == 0 { 0 } else { sample.partition_point(|x| *x <= centers[j - 1]) };
        let hi = if j == centers.len() { sample.len() } else { sample.partition_point(|x| *x < centers[j]) };
        (lo, hi)
    };
    while centers.len() < k {
        let total = mass.total();
        if total <= 0.0 {
            break;
        }
        let mut best: Option<(f64, usize)> = None;
        for _ in 0..trials {
            let mut idx = mass.find(rng.random::<f64>() * total);
            // guard rounding: never pick an existing center
            if d2[idx] == 0.0 {
                idx = d2.iter().rposition(|w| *w > 0.0).unwrap_or(idx);
            }
            let c = sample[idx];
            let (lo, hi) = span(&centers, c);
            let gain: f64 = sample[lo..hi]
                .iter()
                .zip(&d2[lo..hi])
                .map(|(x, d)| (d - (x - c).powi(2)).max(0.0))
                .sum();
            if best.is_none_or(|(g, _)| gain > g) {
                best = Some((gain, idx));
            }
        }
        let c = sample[best.expect("at least two trials").1];
        let (lo, hi) = span(&centers, c);
        for i in lo..hi {
            let d = (sample[i] - c).powi(2);
            if d < d2[i] {
                mass.add(i, d - d2[i]);
                d2[i] = d;
            }
        }
        centers.insert(centers.partition_point(|x| *x < c), c);
    }
    centers
}

/// Prefix sums over a sorted sample; clusters are contiguous index ranges.
struct Prefix {
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl Prefix {
    fn new(sample: &[f64]) -> Self {
        let mut s1 = vec![0.0; sample.len() + 1];
        let mut s2 = vec![0.0; sample.len() + 1];
        for (i, x) in sample.iter().enumerate() {
            s1[i + 1] = s1[i] + x;
            s2[i + 1] = s2[i] + x * x;
        }
        Self { s1, s2 }
    }

    fn mean(&self, lo: usize, hi: usize) -> f64 {
        (self.s1[hi] - self.s1[lo]) / (hi - lo) as f64
    }

    /// Within-cluster SSE of `sample[lo..hi]`.
    fn cost(&self, lo: usize, hi: usize) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        let s = self.s1[hi] - self.s1[lo];
        (self.s2[hi] - self.s2[lo] - s * s / (hi - lo) as f64).max(0.0)
    }

    fn total(&self, bounds: &[usize]) -> f64 {
        bounds.windows(2).map(|w| self.cost(w[0], w[1])).sum()
    }
}

/// Cluster bounds of a sorted sample under nearest-center assignment, ties
/// to the lower center: cluster `j` is `sample[bounds[j]..bounds[j + 1]]`.
fn bounds_for(sample: &[f64], centers: &[f64]) -> Vec<usize> {
    let mut bounds = Vec::with_capacity(centers.len() + 1);
    bounds.push(0);
    for pair in centers.windows(2) {
        let from = bounds[bounds.len() - 1];
        let (a, b) = (pair[0], pair[1]);
        bounds.push(from + sample[from..].partition_point(|x| (x - a).abs() <= (x - b).abs()));
    }
    bounds.push(sample.len());
    bounds
}

/// A converged partition with its centers (cluster means) and SSE.
struct Fit {
    centers: Vec<f64>,
    bounds: Vec<usize>,
    sse: f64,
    history: Vec<f64>,
    iterations: usize,
}

impl Fit {
    /// Appends a later fit's trace, keeping the history non-increasing.
    fn then(mut self, next: Fit) -> Fit {
        let floor = self.history.last().copied().unwrap_or(f64::INFINITY);
        self.history.extend(next.history.into_iter().filter(|s| *s <= floor));
        Fit {
            history: self.history,
            iterations: self.iterations + next.iterations,
            ..next
        }
    }
}

fn lloyd(sample: &[f64], prefix: &Prefix, mut centers: Vec<f64>, max_iters: usize) -> Fit {
    let mut bounds = bounds_for(sample, &centers);
    let mut sse = prefix.total(&bounds);
    let mut history = vec![sse];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let k = centers.len();
        let empty: Vec<usize> = (0..k).filter(|c| bounds[c + 1] == bounds[*c]).collect();
        for c in 0..k {
            if bounds[c + 1] > bounds[c] {
                centers[c] = prefix.mean(bounds[c], bounds[c + 1]);
            }
        }
        if !empty.is_empty() {
            // move each empty center onto the worst-served point
            let mut errors: Vec<(f64, usize)> = Vec::with_capacity(sample.len());
            for c in 0..k {
                for i in bounds[c]..bounds[c + 1] {
                    errors.push(((sample[i] - centers[c]).powi(2), i));
                }
            }
            errors.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut taken = errors.iter().filter(|(e, _)| *e > 0.0).map(|(_, i)| sample[*i]);
            for c in &empty {
                if let Some(x) = taken.next() {
                    centers[*c] = x;
                }
            }
            centers.sort_by(f64::total_cmp);
            centers.dedup();
        }
        let previous = std::mem::replace(&mut bounds, bounds_for(sample, &centers));
        let new_sse = prefix.total(&bounds);
        history.push(new_sse);
        let converged = empty.is_empty() && bounds == previous;
        let improvement = if sse > 0.0 { (sse - new_sse) / sse } else { 0.0 };
        sse = new_sse;
        if converged || sse == 0.0 || (empty.is_empty() && improvement < DEFAULT_REL_TOL) {
            break;
        }
    }
    // final means of the final assignment
    bounds.dedup();
    let centers = bounds.windows(2).map(|w| prefix.mean(w[0], w[1])).collect();
    Fit {
        centers,
        bounds,
        sse,
        history,
        iterations,
    }
}

/// Best cut of `sample[lo..hi]` into two clusters: (cost, cut).
fn best_cut(sample: &[f64], prefix: &Prefix, lo: usize, hi: usize) -> Option<(f64, usize)> {
    best_cut_within(sample, prefix, lo, hi, (lo, hi))
}

/// Best cut of `sample[lo..hi]` with the cut restricted to `window`.
fn best_cut_within(sample: &[f64], prefix: &Prefix, lo: usize, hi: usize, window: (usize, usize)) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for m in (window.0 + 1).max(lo + 1)..window.1.min(hi) {
        if sample[m - 1] < sample[m] {
            let c = prefix.cost(lo, m) + prefix.cost(m, hi);
            if best.is_none_or(|(b, _)| c < b) {
                best = Some((c, m));
            }
        }
    }
    best
}

/// Re-cuts each adjacent pair of clusters at the best split near the current
/// boundary while the SSE drops, then settles with Lloyd.
fn polish(sample: &[f64], prefix: &Prefix, fit: Fit, max_iters: usize) -> Fit {
    let mut bounds = fit.bounds.clone();
    let mut moved = false;
    for _ in 0..max_iters {
        let mut again = false;
        for j in 0..bounds.len().saturating_sub(2) {
            let (lo, b, hi) = (bounds[j], bounds[j + 1], bounds[j + 2]);
            let before = prefix.cost(lo, b) + prefix.cost(b, hi);
            let window = (b.saturating_sub(POLISH_WINDOW).max(lo), (b + POLISH_WINDOW).min(hi));
            if let Some((after, cut)) = best_cut_within(sample, prefix, lo, hi, window) {
                if cut != b && after < before * (1.0 - DEFAULT_REL_TOL) {
                    bounds[j + 1] = cut;
                    again = true;
                }
            }
        }
        moved |= again;
        if !again {
            break;
        }
    }
    if !moved {
        return fit;
    }
    let seeded = bounds.windows(2).map(|w| prefix.mean(w[0], w[1])).collect();
    let settled = lloyd(sample, prefix, seeded, max_iters);
    fit.then(settled)
}

/// Escapes local minima in 1-D: merge an adjacent pair of clusters, split the
/// cluster with the largest two-way gain, settle, and keep the result if the
/// SSE drops.
fn refine(sample: &[f64], prefix: &Prefix, mut fit: Fit, max_iters: usize) -> Fit {
    for _ in 0..REFINE_ROUNDS {
        let k = fit.centers.len();
        if k < 3 {
            break;
        }
        let bounds = fit.bounds.clone();
        let mut merges: Vec<(f64, usize)> = (0..k - 1)
            .map(|j| {
                let (a, b, c) = (bounds[j], bounds[j + 1], bounds[j + 2]);
                (prefix.cost(a, c) - prefix.cost(a, b) - prefix.cost(b, c), j)
            })
            .collect();
        merges.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        // best two-way split of each cluster: (gain, cut)
        let splits: Vec<(f64, usize)> = (0..k)
            .map(|i| {
                let (lo, hi) = (bounds[i], bounds[i + 1]);
                match best_cut(sample, prefix, lo, hi) {
                    Some((c, m)) => (prefix.cost(lo, hi) - c, m),
                    None => (0.0, usize::MAX),
                }
            })
            .collect();
        let mut improved = None;
        for &(_, merge) in merges.iter().take(MERGE_CANDIDATES) {
            let (mut split, mut at, mut gain) = (usize::MAX, 0, 0.0);
            for i in (0..k).filter(|i| *i != merge && *i != merge + 1) {
                if splits[i].1 != usize::MAX && splits[i].0 > gain {
                    (split, at, gain) = (i, splits[i].1, splits[i].0);
                }
            }
            if split == usize::MAX {
                continue;
            }
            let mut proposal = Vec::with_capacity(k);
            for c in 0..k {
                let (lo, hi) = (bounds[c], bounds[c + 1]);
                if c == merge + 1 {
                    continue;
                } else if c == merge {
                    proposal.push(prefix.mean(lo, bounds[c + 2]));
                } else if c == split {
                    proposal.push(prefix.mean(lo, at));
                    proposal.push(prefix.mean(at, hi));
                } else {
                    proposal.push(prefix.mean(lo, hi));
                }
            }
            proposal.sort_by(f64::total_cmp);
            let candidate = polish(sample, prefix, lloyd(sample, prefix, proposal, max_iters), max_iters);
            if candidate.sse < fit.sse * (1.0 - DEFAULT_REL_TOL) {
                improved = Some(candidate);
                break;
            }
        }
        match improved {
            Some(candidate) => fit = fit.then(candidate),
            None => break,
        }
    }
    fit
}

/// Fits a codebook, returning the trace used by the monotonicity checks.
pub fn fit_codebook_traced(values: &[f32], cfg: &QuantConfig) -> Result<CodebookFit> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            tensor: "<codebook input>".into(),
            index,
        });
    }
    let sample = fitting_sample(values, cfg.sample_cap);
    let mut distinct = sample.clone();
    distinct.dedup();
    let k = cfg.max_centers().min(distinct.len());
    let (centers, sse_history, iterations) = if k == distinct.len() {
        // every distinct value gets its own center
        let zero_sse = vec![0.0];
        (distinct, zero_sse, 0)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let prefix = Prefix::new(&sample);
        let mut best: Option<Fit> = None;
        for _ in 0..cfg.restarts {
            let init = kmeans_pp(&sample, k, &mut rng);
            let settled = polish(&sample, &prefix, lloyd(&sample, &prefix, init, cfg.max_kmeans_iters), cfg.max_kmeans_iters);
            let fit = refine(&sample, &prefix, settled, cfg.max_kmeans_iters);
            if best.as_ref().is_none_or(|b| fit.sse < b.sse) {
                best = Some(fit);
            }
        }
        let best = best.expect("restarts is positive");
        // exact means of the winning partition
        let centers = best
            .bounds
            .windows(2)
            .map(|w| sample[w[0]..w[1]].iter().sum::<f64>() / (w[1] - w[0]) as f64)
            .collect();
        (centers, best.history, best.iterations)
    };
    let mut centers: Vec<f32> = centers.into_iter().map(|c| c as f32).collect();
    centers.sort_by(f32::total_cmp);
    centers.dedup();
    Ok(CodebookFit {
        centers,
        sse_history,
        iterations,
    })
}

/// Fits up to `2^bits - 1` ascending centers to nonzero finite values.
pub fn fit_codebook(values: &[f32], cfg: &QuantConfig) -> Result<Vec<f32>> {
    Ok(fit_codebook_traced(values, cfg)?.centers)
}

/// Code for one value: 0 for exact zero, else 1 + nearest center index.
pub fn assign_code(x: f32, centers: &[f64]) -> u8 {
    if x == 0.0 || centers.is_empty() {
        0
    } else {
        1 + nearest(f64::from(x), centers) as u8
    }
}

/// Sum of squared errors of `values` against their nearest centers.
pub fn sse(values: &[f32], centers: &[f32]) -> f64 {
    let c: Vec<f64> = centers.iter().map(|v| f64::from(*v)).collect();
    values
        .iter()
        .map(|x| {
            let x = f64::from(*x);
            (x - c[nearest(x, &c)]).powi(2)
        })
        .sum()
}

/// Quantizes one tensor's values. The fit seed mixes `cfg.rng_seed` with
/// the tensor name so results do not depend on processing order.
pub fn quantize(
    name: &str,
    shape: &[usize],
    values: &[f32],
    cfg: &QuantConfig,
) -> Result<QuantizedTensor> {
    cfg.validate()?;
    if values.len() != numel(shape) {
        return Err(Error::LengthMismatch {
            tensor: name.to_string(),
            shape: shape.to_vec(),
            expected: numel(shape),
            found: values.len(),
        });
    }
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            tensor: name.to_string(),
            index,
        });
    }
    let nonzero: Vec<f32> = values.iter().copied().filter(|v| *v != 0.0).collect();
    let codebook = if nonzero.is_empty() {
        Vec::new()
    } else {
        let seeded = QuantConfig {
            rng_seed: name_seed(cfg.rng_seed, name),
            ..*cfg
        };
        fit_codebook(&nonzero, &seeded)?
    };
    let wide: Vec<f64> = codebook.iter().map(|c| f64::from(*c)).collect();
    let codes: Vec<u8> = values.iter().map(|x| assign_code(*x, &wide)).collect();
    Ok(QuantizedTensor {
        name: name.to_string(),
        shape: shape.to_vec(),
        bits: cfg.bits,
        codebook,
        packed: pack_codes(&codes, cfg.bits)?,
    })
}

/// Gathers codebook values; code 0 is exact zero.
pub fn dequantize(q: &QuantizedTensor) -> Result<Vec<f32>> {
    let codes = q.codes()?;
    codes
        .iter()
        .map(|c| match *c {
            0 => Ok(0.0),
            c => q.codebook.get(c as usize - 1).copied().ok_or(Error::CodeOutOfRange {
                tensor: q.name.clone(),
                code: c,
                codebook_len: q.codebook.len(),
            }),
        })
        .collect()
}

pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

/// Packs sub-byte codes, lowest element in the lowest bits.
pub fn pack_codes(codes: &[u8], bits: u8) -> Result<Vec<u8>> {
    if !matches!(bits, 2 | 4 | 8) {
        return Err(Error::InvalidConfig(format!("cannot pack {bits}-bit codes")));
    }
    let limit = 1u16 << bits;
    if let Some(code) = codes.iter().find(|c| u16::from(**c) >= limit) {
        return Err(Error::CodeOverflow { code: *code, bits });
    }
    if bits == 8 {
        return Ok(codes.to_vec());
    }
    let per_byte = (8 / bits) as usize;
    Ok(codes
        .chunks(per_byte)
        .map(|chunk| {
            chunk
                .iter()
                .enumerate()
                .fold(0u8, |byte, (i, c)| byte | (c << (i * bits as usize)))
        })
        .collect())
}

pub fn unpack_codes(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u8>> {
    if !matches!(bits, 2 | 4 | 8) {
        return Err(Error::InvalidConfig(format!("cannot unpack {bits}-bit codes")));
    }
    if bytes.len() != packed_len(count, bits) {
        return Err(Error::Truncated(format!(
            "{} packed bytes for {count} codes of {bits} bits",
            bytes.len()
        )));
    }
    if bits == 8 {
        return Ok(bytes.to_vec());
    }
    let per_byte = (8 / bits) as usize;
    let mask = (1u8 << bits) - 1;
    Ok((0..count)
        .map(|i| (bytes[i / per_byte] >> ((i % per_byte) * bits as usize)) & mask)
        .collect())
}
