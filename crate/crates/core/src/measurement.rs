//! Measurement matrices linking the sparse architecture space to the
//! compressed search space, plus restricted-isometry diagnostics.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm2, Matrix};

/// Largest support count the exhaustive RIP scan will visit.
pub const EXHAUSTIVE_BUDGET: u128 = 1_000_000;
/// Number of random supports visited in sampled mode.
pub const SAMPLED_SUPPORTS: usize = 10_000;

/// A column-normalized Gaussian matrix `A` (m×n, m < n) with its cached
/// residual `E = AᵀA − I`.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementMatrix {
    a: Matrix,
    e: Matrix,
    seed: u64,
}

impl MeasurementMatrix {
    /// Wrap an existing matrix. Columns are used as given; only the
    /// compression requirement `m < n` is checked.
    pub fn from_matrix(a: Matrix, seed: u64) -> Result<Self> {
        if a.rows() >= a.cols() {
            return Err(Error::NotCompressed {
                m: a.rows(),
                n: a.cols(),
            });
        }
        let e = residual(&a);
        Ok(Self { a, e, seed })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn e(&self) -> &Matrix {
        &self.e
    }

    pub fn m(&self) -> usize {
        self.a.rows()
    }

    pub fn n(&self) -> usize {
        self.a.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rip(&self, s: usize, mode: RipMode) -> Result<RipDiagnostics> {
        estimate_rip_constant(&self.a, s, mode)
    }
}

fn residual(a: &Matrix) -> Matrix {
    let n = a.cols();
    let mut e = Matrix::zeros(n, n);
    for i in 0..n {
        let ci = a.column(i);
        for j in i..n {
            let g: f64 = (0..a.rows()).map(|r| ci[r] * a[(r, j)]).sum();
            let v = if i == j { g - 1.0 } else { g };
            e[(i, j)] = v;
            e[(j, i)] = v;
        }
    }
    e
}

/// Draw an m×n matrix with i.i.d. standard normal entries and rescale each
/// column to unit ℓ2 norm. The same seed always yields the same matrix.
pub fn sample_matrix(m: usize, n: usize, seed: u64) -> Result<MeasurementMatrix> {
    if m == 0 {
        return Err(Error::InvalidArgument("m must be positive".into()));
    }
    if m >= n {
        return Err(Error::NotCompressed { m, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Matrix::zeros(m, n);
    for v in a.as_mut_slice() {
        *v = StandardNormal.sample(&mut rng);
    }
    for j in 0..n {
        let norm = norm2(&a.column(j));
        for i in 0..m {
            a[(i, j)] /= norm;
        }
    }
    MeasurementMatrix::from_matrix(a, seed)
}

/// Serialized as `"default"` or as the overriding dimension in decimal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CompressionPolicy {
    /// `min(n − 1, max(4s, ⌈n/2⌉))`
    Default,
    Override(usize),
}

impl From<CompressionPolicy> for String {
    fn from(p: CompressionPolicy) -> Self {
        match p {
            CompressionPolicy::Default => "default".into(),
            CompressionPolicy::Override(m) => m.to_string(),
        }
    }
}

impl TryFrom<String> for CompressionPolicy {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        if s == "default" {
            return Ok(CompressionPolicy::Default);
        }
        s.parse()
            .map(CompressionPolicy::Override)
            .map_err(|_| format!("compression must be `default` or a dimension, got `{s}`"))
    }
}

pub fn compressed_dim(n: usize, s: usize, policy: CompressionPolicy) -> Result<usize> {
    if s == 0 || s >= n {
        return Err(Error::InvalidArgument(format!(
            "sparseness {s} must lie in 1..{n}"
        )));
    }
    match policy {
        CompressionPolicy::Default => Ok((n - 1).min((4 * s).max(n.div_ceil(2)))),
        CompressionPolicy::Override(0) => {
            Err(Error::InvalidArgument("compressed dimension must be positive".into()))
        }
        CompressionPolicy::Override(m) if m >= n => Err(Error::NotCompressed { m, n }),
        CompressionPolicy::Override(m) => Ok(m),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RipMode {
    Exhaustive,
    /// Random supports from the given seed; the result is a lower bound.
    Sampled { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RipDiagnostics {
    pub delta_hat: f64,
    pub coherence: f64,
    pub s: usize,
    pub supports_checked: u64,
    pub lower_bound: bool,
}

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Estimate δ₂ₛ as the worst deviation from isometry over column supports of
/// size 2s: `max(1 − σ_min², σ_max² − 1)` of each column submatrix.
pub fn estimate_rip_constant(a: &Matrix, s: usize, mode: RipMode) -> Result<RipDiagnostics> {
    let n = a.cols();
    let k = 2 * s;
    if s == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "2s = {k} must lie in 2..={n}"
        )));
    }
    let coherence = mutual_coherence(a);
    match mode {
        RipMode::Exhaustive => {
            let count = binomial(n, k);
            if count > EXHAUSTIVE_BUDGET {
                return Err(Error::BudgetExceeded {
                    count,
                    budget: EXHAUSTIVE_BUDGET,
                    hint: "use sampled mode",
                });
            }
            let delta_hat = Combinations::new(n, k)
                .par_bridge()
                .map(|support| isometry_defect(a, &support))
                .reduce(|| 0.0, f64::max);
            Ok(RipDiagnostics {
                delta_hat,
                coherence,
                s,
                supports_checked: count as u64,
                lower_bound: false,
            })
        }
        RipMode::Sampled { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let supports: Vec<Vec<usize>> = (0..SAMPLED_SUPPORTS)
                .map(|_| {
                    let mut idx = sample(&mut rng, n, k).into_vec();
                    idx.sort_unstable();
                    idx
                })
                .collect();
            let delta_hat = supports
                .par_iter()
                .map(|support| isometry_defect(a, support))
                .reduce(|| 0.0, f64::max);
            Ok(RipDiagnostics {
                delta_hat,
                coherence,
                s,
                supports_checked: SAMPLED_SUPPORTS as u64,
                lower_bound: true,
            })
        }
    }
}

/// `max(1 − σ_min², σ_max² − 1)` for the columns `support` of `a`.
pub fn isometry_defect(a: &Matrix, support: &[usize]) -> f64 {
    let sub = a.select_columns(support);
    let dm = DMatrix::from_row_slice(sub.rows(), sub.cols(), sub.as_slice());
    let sv = dm.singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    // a tall-enough submatrix has one singular value per column; missing ones are zero
    let smin = if sub.rows() < sub.cols() {
        0.0
    } else {
        sv.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    (1.0 - smin * smin).max(smax * smax - 1.0)
}

/// Largest `|⟨aᵢ, aⱼ⟩| / (‖aᵢ‖‖aⱼ‖)` over distinct columns.
pub fn mutual_coherence(a: &Matrix) -> f64 {
    let n = a.cols();
    let cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let norms: Vec<f64> = cols.iter().map(|c| norm2(c)).collect();
    let mut best = 0.0_f64;
    for i in 0..n {
        for j in i + 1..n {
            let denom = norms[i] * norms[j];
            if denom == 0.0 {
                continue;
            }
            let g: f64 = cols[i].iter().zip(&cols[j]).map(|(x, y)| x * y).sum();
            best = best.max((g / denom).abs().min(1.0));
        }
    }
    best
}

/// Lexicographic k-subsets of `0..n`.
#[derive(Clone, Debug)]
pub struct Combinations {
    n: usize,
    current: Option<Vec<usize>>,
}

impl Combinations {
    pub fn new(n: usize, k: usize) -> Self {
        let current = (k <= n).then(|| (0..k).collect());
        Self { n, current }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.clone()?;
        let k = out.len();
        let mut next = out.clone();
        let mut i = k;
        let advanced = loop {
            if i == 0 {
                break false;
            }
            i -= 1;
            if next[i] < self.n - k + i {
                next[i] += 1;
                for j in i + 1..k {
                    next[j] = next[j - 1] + 1;
                }
                break true;
            }
        };
        self.current = advanced.then_some(next);
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_are_unit_norm() {
        let mm = sample_matrix(8, 14, 42).unwrap();
        for j in 0..14 {
            assert!((norm2(&mm.a().column(j)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_matrix(8, 14, 42).unwrap();
        let b = sample_matrix(8, 14, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_matrix(8, 14, 1).unwrap();
        let d = sample_matrix(8, 14, 2).unwrap();
        assert_ne!(c.a(), d.a());
    }

    #[test]
    fn uncompressed_rejected() {
        assert!(matches!(
            sample_matrix(5, 5, 0),
            Err(Error::NotCompressed { m: 5, n: 5 })
        ));
    }

    #[test]
    fn residual_identity_holds() {
        let mm = sample_matrix(5, 9, 7).unwrap();
        let gram = mm.a().t_matmul(mm.a());
        for i in 0..9 {
            for j in 0..9 {
                let ident = gram[(i, j)] - mm.e()[(i, j)];
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((ident - expected).abs() <= 1e-14);
                assert_eq!(mm.e()[(i, j)], mm.e()[(j, i)]);
            }
            assert!(mm.e()[(i, i)].abs() <= 1e-14);
        }
    }

    #[test]
    fn compressed_dim_policy() {
        assert_eq!(compressed_dim(14, 2, CompressionPolicy::Default).unwrap(), 8);
        assert_eq!(compressed_dim(35, 2, CompressionPolicy::Default).unwrap(), 18);
        assert_eq!(compressed_dim(6, 2, CompressionPolicy::Default).unwrap(), 5);
        assert_eq!(compressed_dim(6, 2, CompressionPolicy::Override(3)).unwrap(), 3);
        assert!(compressed_dim(6, 2, CompressionPolicy::Override(6)).is_err());
        assert!(compressed_dim(6, 6, CompressionPolicy::Default).is_err());
    }

    #[test]
    fn orthonormal_columns_have_zero_delta() {
        let d = estimate_rip_constant(&Matrix::identity(4), 1, RipMode::Exhaustive).unwrap();
        assert!(d.delta_hat.abs() < 1e-15);
        assert_eq!(d.coherence, 0.0);
        assert_eq!(d.supports_checked, 6);
    }

    #[test]
    fn duplicate_columns_break_rip() {
        let a = Matrix::from_rows(&[
            vec![1.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let d = estimate_rip_constant(&a, 1, RipMode::Exhaustive).unwrap();
        assert!(d.delta_hat >= 1.0 - 1e-12);
        assert!((d.coherence - 1.0).abs() < 1e-15);
    }

    #[test]
    fn budget_exceeded_suggests_sampling() {
        let mm = sample_matrix(30, 60, 3).unwrap();
        let err = estimate_rip_constant(mm.a(), 4, RipMode::Exhaustive).unwrap_err();
        assert!(err.to_string().contains("sampled"));
        let d = estimate_rip_constant(mm.a(), 4, RipMode::Sampled { seed: 1 }).unwrap();
        assert!(d.lower_bound);
        assert!(d.delta_hat >= 0.0);
    }

    #[test]
    fn combinations_count_and_order() {
        let all: Vec<_> = Combinations::new(5, 2).collect();
        assert_eq!(all.len() as u128, binomial(5, 2));
        assert_eq!(all[0], vec![0, 1]);
        assert_eq!(all[9], vec![3, 4]);
        assert_eq!(Combinations::new(3, 3).count(), 1);
        assert_eq!(Combinations::new(2, 3).count(), 0);
        assert_eq!(binomial(14, 4), 1001);
    }

    #[test]
    fn coherence_in_unit_interval() {
        let mm = sample_matrix(6, 10, 11).unwrap();
        let c = mutual_coherence(mm.a());
        assert!((0.0..=1.0).contains(&c));
    }
}
