//! Gaussian mixtures with diagonal covariance and finite sample sets.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng64;

/// Anything that can hand out training batches.
pub trait SampleSource {
    fn dim(&self) -> usize;
    fn sample_batch(&self, n: usize, rng: &mut Rng64) -> Tensor;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    components: Vec<Component>,
    dim: usize,
}

impl MixtureSpec {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidSpec("mixture has no components".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::InvalidSpec("mixture dimension is zero".into()));
        }
        let mut total = 0.0;
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != dim || c.var.len() != dim {
                return Err(Error::InvalidSpec(format!(
                    "component {i} has dimension {}/{} (expected {dim})",
                    c.mean.len(),
                    c.var.len()
                )));
            }
            // Zero weights are tolerated so that a component can be switched
            // off without renumbering the rest.
            if !(c.weight >= 0.0) || !c.weight.is_finite() {
                return Err(Error::InvalidSpec(format!("component {i} weight {} invalid", c.weight)));
            }
            if c.var.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidSpec(format!("component {i} has a non-positive variance")));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::InvalidSpec(format!("component {i} mean is not finite")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self { components, dim })
    }

    /// Single isotropic Gaussian.
    pub fn gaussian(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(vec![Component {
            weight: 1.0,
            mean,
            var: vec![var; d],
        }])
    }

    /// `modes` equally weighted isotropic components on a circle.
    pub fn ring(modes: usize, radius: f64, var: f64) -> Result<Self> {
        Self::new(
            (0..modes)
                .map(|k| {
                    let a = 2.0 * std::f64::consts::PI * k as f64 / modes as f64;
                    Component {
                        weight: 1.0 / modes as f64,
                        mean: vec![radius * a.cos(), radius * a.sin()],
                        var: vec![var, var],
                    }
                })
                .collect(),
        )
    }

    /// Parses the compact text form used in configs:
    ///
    /// * `ring:<modes>:<radius>:<var>`
    /// * `w@m1,m2,...:v | w@m1,m2,...:v | ...` (isotropic variance `v`)
    /// * `w@m1,m2,...:v1,v2,... | ...` (diagonal variances)
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if let Some(rest) = text.strip_prefix("ring:") {
            let parts: Vec<&str> = rest.split(':').collect();
            if parts.len() != 3 {
                return Err(Error::InvalidSpec(format!("ring spec `{text}` needs modes:radius:var")));
            }
            let modes = parts[0]
                .trim()
                .parse()
                .map_err(|_| Error::InvalidSpec(format!("bad mode count in `{text}`")))?;
            return Self::ring(modes, parse_f(parts[1])?, parse_f(parts[2])?);
        }
        let mut comps = Vec::new();
        for part in text.split('|') {
            let (w, rest) = part
                .split_once('@')
                .ok_or_else(|| Error::InvalidSpec(format!("component `{part}` lacks `weight@`")))?;
            let (mean, var) = rest
                .split_once(':')
                .ok_or_else(|| Error::InvalidSpec(format!("component `{part}` lacks `:variance`")))?;
            let mean = mean.split(',').map(parse_f).collect::<Result<Vec<_>>>()?;
            let mut var = var.split(',').map(parse_f).collect::<Result<Vec<_>>>()?;
            if var.len() == 1 {
                var = vec![var[0]; mean.len()];
            }
            comps.push(Component {
                weight: parse_f(w)?,
                mean,
                var,
            });
        }
        Self::new(comps)
    }

    /// Inverse of [`parse`](Self::parse) for the explicit component form.
    pub fn to_text(&self) -> String {
        self.components
            .iter()
            .map(|c| {
                let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
                format!("{:?}@{}:{}", c.weight, join(&c.mean), join(&c.var))
            })
            .collect::<Vec<_>>()
            .join(" | ")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        self.components.iter().map(|c| c.mean.clone()).collect()
    }

    /// Index of the component whose mean is nearest to `x` (Euclidean).
    pub fn nearest_component(&self, x: &[f64]) -> usize {
        nearest(&self.means(), x)
    }

    fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                return i;
            }
        }
        // Rounding can leave `acc` a hair under 1; fall back to the last
        // component with positive weight.
        self.components
            .iter()
            .rposition(|c| c.weight > 0.0)
            .unwrap_or(self.components.len() - 1)
    }

    /// Draws `n` points together with the component each came from.
    pub fn sample_labeled<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let k = self.pick(rng);
            let c = &self.components[k];
            for j in 0..self.dim {
                let z: f64 = StandardNormal.sample(rng);
                data.push(c.mean[j] + c.var[j].sqrt() * z);
            }
            labels.push(k);
        }
        (
            Tensor::matrix(n, self.dim, data).expect("sized above"),
            labels,
        )
    }

    /// `n` i.i.d. draws as a sample set. Deterministic for a given seed.
    pub fn sample(&self, n: usize, seed: u64) -> Result<SampleSet> {
        if n == 0 {
            return Err(Error::Usage("sample_mixture needs n >= 1".into()));
        }
        let mut rng = crate::rng(seed);
        let (points, _) = self.sample_labeled(n, &mut rng);
        Ok(SampleSet::new(points, Origin::Real, Some(seed)))
    }
}

pub(crate) fn nearest(centers: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d: f64 = c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn parse_f(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::InvalidSpec(format!("`{}` is not a number", s.trim())))
}

impl SampleSource for MixtureSpec {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample_batch(&self, n: usize, rng: &mut Rng64) -> Tensor {
        self.sample_labeled(n, rng).0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Real,
    Generated,
}

/// A finite `n x d` set of points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub points: Tensor,
    pub provenance: Origin,
    pub seed: Option<u64>,
}

impl SampleSet {
    pub fn new(points: Tensor, provenance: Origin, seed: Option<u64>) -> Self {
        Self {
            points: points.as_matrix(),
            provenance,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Random subset of `n` distinct rows (all rows when `n >= len`).
    pub fn subset(&self, n: usize, rng: &mut Rng64) -> SampleSet {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        // Partial Fisher-Yates.
        for i in 0..n {
            let j = rng.random_range(i..idx.len());
            idx.swap(i, j);
        }
        idx.truncate(n);
        SampleSet::new(self.points.gather_rows(&idx), self.provenance, self.seed)
    }
}

impl SampleSource for SampleSet {
    fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Uniform draws with replacement, so sets smaller than `n` still work.
    fn sample_batch(&self, n: usize, rng: &mut Rng64) -> Tensor {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.len())).collect();
        self.points.gather_rows(&idx)
    }
}
