use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::supernet::OperationKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    GaussianBlobs,
    TwoSpirals,
    PlantedLinear,
}

impl TaskKind {
    pub fn tag(self) -> &'static str {
        match self {
            TaskKind::GaussianBlobs => "gaussian-blobs",
            TaskKind::TwoSpirals => "two-spirals",
            TaskKind::PlantedLinear => "planted-linear",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        [
            TaskKind::GaussianBlobs,
            TaskKind::TwoSpirals,
            TaskKind::PlantedLinear,
        ]
        .into_iter()
        .find(|k| k.tag() == tag)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub samples: usize,
    pub classes: usize,
    /// Raw feature width. Planted-linear tasks need an even width: the two
    /// halves are the inputs of the planted cell.
    pub input_dim: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

impl TaskConfig {
    pub fn new(kind: TaskKind, samples: usize, classes: usize, input_dim: usize, seed: u64) -> Self {
        Self {
            kind,
            samples,
            classes,
            input_dim,
            test_fraction: 0.25,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.samples < self.classes {
            problems.push(format!(
                "sample count {} below class count {}",
                self.samples, self.classes
            ));
        }
        if self.classes < 2 {
            problems.push("at least two classes are required".into());
        }
        if self.input_dim == 0 {
            problems.push("input_dim must be positive".into());
        }
        if self.kind == TaskKind::TwoSpirals && self.input_dim < 2 {
            problems.push("spirals need input_dim >= 2".into());
        }
        if self.kind == TaskKind::PlantedLinear && !self.input_dim.is_multiple_of(2) {
            problems.push("planted-linear needs an even input_dim".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            problems.push("test_fraction must lie in (0, 1)".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Rows of a feature matrix with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn gather(&self, rows: &[usize]) -> Split {
        Split {
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&r| self.y[r]).collect(),
        }
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &l in &self.y {
            counts[l] += 1;
        }
        counts
    }
}

/// A seeded synthetic classification dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub config: TaskConfig,
    pub train: Split,
    pub test: Split,
    /// Connections the planted-linear teacher is built from, as
    /// `(source input node, operation)`.
    pub planted: Option<Vec<(usize, OperationKind)>>,
}

impl Task {
    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Train split cut into two equal halves: weights train on the first,
    /// architecture variables on the second.
    pub fn search_split(&self) -> (Split, Split) {
        let n = self.train.len();
        let half = n / 2;
        let first: Vec<usize> = (0..half).collect();
        let second: Vec<usize> = (half..n).collect();
        (self.train.gather(&first), self.train.gather(&second))
    }

    /// Train split cut at `fraction` of its rows.
    pub fn split_train(&self, fraction: f64) -> (Split, Split) {
        let n = self.train.len();
        let cut = ((n as f64) * fraction).round() as usize;
        let first: Vec<usize> = (0..cut).collect();
        let second: Vec<usize> = (cut..n).collect();
        (self.train.gather(&first), self.train.gather(&second))
    }
}

/// Generate a dataset. Identical configs give identical tasks.
pub fn make_task(config: &TaskConfig) -> Result<Task> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (x, y, planted) = match config.kind {
        TaskKind::GaussianBlobs => blobs(config, &mut rng),
        TaskKind::TwoSpirals => spirals(config, &mut rng),
        TaskKind::PlantedLinear => planted_linear(config, &mut rng),
    };
    let mut order: Vec<usize> = (0..config.samples).collect();
    order.shuffle(&mut rng);
    let n_test = ((config.samples as f64) * config.test_fraction).round() as usize;
    let n_test = n_test.clamp(1, config.samples - 1);
    let all = Split { x, y };
    let test = all.gather(&order[..n_test]);
    let train = all.gather(&order[n_test..]);
    Ok(Task {
        config: config.clone(),
        train,
        test,
        planted,
    })
}

type Generated = (Matrix, Vec<usize>, Option<Vec<(usize, OperationKind)>>);

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn blobs(config: &TaskConfig, rng: &mut ChaCha8Rng) -> Generated {
    let p = config.input_dim;
    let centers: Vec<Vec<f64>> = (0..config.classes)
        .map(|_| (0..p).map(|_| 1.5 * normal(rng)).collect())
        .collect();
    let mut x = Matrix::zeros(config.samples, p);
    let mut y = Vec::with_capacity(config.samples);
    for i in 0..config.samples {
        let label = i % config.classes;
        for (v, c) in x.row_mut(i).iter_mut().zip(&centers[label]) {
            *v = c + normal(rng);
        }
        y.push(label);
    }
    (x, y, None)
}

fn spirals(config: &TaskConfig, rng: &mut ChaCha8Rng) -> Generated {
    let p = config.input_dim;
    // Fixed random embedding of the plane into the feature space.
    let embed: Vec<[f64; 2]> = (0..p)
        .map(|_| [normal(rng), normal(rng)])
        .collect();
    let mut x = Matrix::zeros(config.samples, p);
    let mut y = Vec::with_capacity(config.samples);
    for i in 0..config.samples {
        let label = i % config.classes;
        let t: f64 = rng.random_range(0.05..1.0);
        let angle = 3.0 * PI * t + 2.0 * PI * label as f64 / config.classes as f64;
        let u = [
            2.0 * t * angle.cos() + 0.05 * normal(rng),
            2.0 * t * angle.sin() + 0.05 * normal(rng),
        ];
        for (v, e) in x.row_mut(i).iter_mut().zip(&embed) {
            *v = e[0] * u[0] + e[1] * u[1];
        }
        y.push(label);
    }
    (x, y, None)
}

/// Unit vector `u` minimizing `‖Pu‖` for the circular width-3 moving
/// average `P` on `d` features, sign-normalized so the first nonzero entry
/// is positive. When `3` divides `d`, every pooling window of `u` sums to
/// zero; `P` is symmetric, so `u` is also orthogonal to every pooled readout.
pub fn pooling_blind_direction(d: usize) -> Vec<f64> {
    let p = nalgebra::DMatrix::from_fn(d, d, |i, j| {
        let mut w = vec![(i + d - 1) % d, i, (i + 1) % d];
        w.sort_unstable();
        w.dedup();
        if w.contains(&j) {
            1.0 / w.len() as f64
        } else {
            0.0
        }
    });
    let svd = p.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let k = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .expect("d > 0");
    let mut u: Vec<f64> = v_t.row(k).iter().copied().collect();
    let sign = u
        .iter()
        .find(|v| v.abs() > 1e-12)
        .map_or(1.0, |v| v.signum());
    let norm = crate::linalg::norm2(&u);
    for v in &mut u {
        *v *= sign / norm;
    }
    u
}

/// Labels come from `u·(x₀ + x₁)` cut at quantiles, where `x₀` and `x₁` are
/// the two halves of the input and `u` is [`pooling_blind_direction`]. A cell
/// connecting both inputs through the identity reproduces the teacher's
/// feature exactly, while pooled views of either input have (near) zero
/// linear covariance with it.
fn planted_linear(config: &TaskConfig, rng: &mut ChaCha8Rng) -> Generated {
    let d = config.input_dim / 2;
    let n = config.samples;
    let mut x = Matrix::zeros(n, 2 * d);
    for v in x.as_mut_slice() {
        *v = normal(rng);
    }
    let u = pooling_blind_direction(d);
    let scores: Vec<f64> = (0..n)
        .map(|r| {
            let row = x.row(r);
            (0..d).map(|c| u[c] * (row[c] + row[d + c])).sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(i.cmp(&j)));
    let mut y = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        y[i] = rank * config.classes / n;
    }
    (
        x,
        y,
        Some(vec![(0, OperationKind::Identity), (1, OperationKind::Identity)]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        for kind in [TaskKind::GaussianBlobs, TaskKind::TwoSpirals, TaskKind::PlantedLinear] {
            let cfg = TaskConfig::new(kind, 120, 2, 8, 3);
            assert_eq!(make_task(&cfg).unwrap(), make_task(&cfg).unwrap());
        }
    }

    #[test]
    fn blobs_are_balanced() {
        let task = make_task(&TaskConfig::new(TaskKind::GaussianBlobs, 400, 4, 6, 1)).unwrap();
        let mut counts = task.train.class_counts(4);
        for (c, t) in counts.iter_mut().zip(task.test.class_counts(4)) {
            *c += t;
        }
        assert_eq!(counts, vec![100; 4]);
    }

    #[test]
    fn search_split_halves_train() {
        let mut cfg = TaskConfig::new(TaskKind::GaussianBlobs, 500, 4, 6, 1);
        cfg.test_fraction = 0.2;
        let task = make_task(&cfg).unwrap();
        assert_eq!(task.train.len(), 400);
        let (a, b) = task.search_split();
        assert_eq!((a.len(), b.len()), (200, 200));
    }

    #[test]
    fn too_few_samples_rejected() {
        let cfg = TaskConfig::new(TaskKind::GaussianBlobs, 3, 4, 6, 1);
        assert!(matches!(make_task(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn blind_direction_is_annihilated_by_pooling() {
        let u = pooling_blind_direction(9);
        for i in 0..9 {
            let s = u[(i + 8) % 9] + u[i] + u[(i + 1) % 9];
            assert!(s.abs() < 1e-12, "window {i} sums to {s}");
        }
        assert!((crate::linalg::norm2(&u) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn planted_labels_balanced() {
        let task = make_task(&TaskConfig::new(TaskKind::PlantedLinear, 200, 2, 8, 5)).unwrap();
        let mut counts = task.train.class_counts(2);
        for (c, t) in counts.iter_mut().zip(task.test.class_counts(2)) {
            *c += t;
        }
        assert_eq!(counts, vec![100, 100]);
    }
}
