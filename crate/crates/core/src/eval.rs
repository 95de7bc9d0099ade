//! Sample-quality measures: Fréchet distance, KMMD, mean variance and
//! classifier error, plus report assembly.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::autodiff::{Activation, AdamConfig, AdamState, DenseNetwork, Graph, Init};
use crate::datakit::{Bandwidth, SampleSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Eigenvalues in `[-NEG_EIG_TOL, 0)` are treated as roundoff and set to 0.
pub const NEG_EIG_TOL: f64 = 1e-10;

/// Anything that can produce `n` samples from a seed.
pub trait Generative {
    fn generate(&self, n: usize, seed: u64) -> Result<Tensor>;
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// Sample mean and unbiased covariance.
pub fn moments(x: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::Usage(format!("covariance needs at least 2 samples, got {n}")));
    }
    let m = to_dmatrix(x);
    let mu = m.row_mean().transpose();
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mu, cov))
}

fn clamped_eigen(m: &DMatrix<f64>, what: &str) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut values = eig.eigenvalues;
    for v in values.iter_mut() {
        if *v < -NEG_EIG_TOL {
            return Err(Error::Numeric(format!(
                "{what} is not positive semidefinite: eigenvalue {v:e}"
            )));
        }
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok((values, eig.eigenvectors))
}

/// Principal square root of a symmetric PSD matrix.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, vecs) = clamped_eigen(m, "matrix")?;
    let d = DMatrix::from_diagonal(&vals.map(f64::sqrt));
    Ok(&vecs * d * vecs.transpose())
}

/// `Tr((A B)^{1/2})` for PSD `A`, `B`, computed as the trace of the square
/// root of the symmetric matrix `A^{1/2} B A^{1/2}`.
pub fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let ra = psd_sqrt(a)?;
    let inner = &ra * b * &ra;
    let (vals, _) = clamped_eigen(&inner, "covariance product")?;
    Ok(vals.iter().map(|v| v.sqrt()).sum())
}

/// `(A B)^{1/2}` for positive definite `A` and PSD `B`, as
/// `A^{1/2} (A^{1/2} B A^{1/2})^{1/2} A^{-1/2}`.
pub fn sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, vecs) = clamped_eigen(a, "left factor")?;
    if vals.iter().any(|&v| v <= 0.0) {
        return Err(Error::Numeric("left factor is singular".into()));
    }
    let ra = &vecs * DMatrix::from_diagonal(&vals.map(f64::sqrt)) * vecs.transpose();
    let ra_inv = &vecs * DMatrix::from_diagonal(&vals.map(|v| 1.0 / v.sqrt())) * vecs.transpose();
    let inner = psd_sqrt(&(&ra * b * &ra))?;
    Ok(ra * inner * ra_inv)
}

pub fn frechet_from_moments(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    if mu_a.len() != mu_b.len() {
        return Err(Error::dim("frechet feature dimension", mu_a.len(), mu_b.len()));
    }
    let diff = (mu_a - mu_b).norm_squared();
    let tr = cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt_product(cov_a, cov_b)?;
    // The trace term is a squared Bures distance; tiny negatives are roundoff.
    Ok(diff + tr.max(0.0))
}

pub fn frechet_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::dim("frechet feature dimension", a.cols(), b.cols()));
    }
    let (mu_a, cov_a) = moments(a)?;
    let (mu_b, cov_b) = moments(b)?;
    frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b)
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Median pairwise Euclidean distance over the pooled rows of `a` and `b`.
/// At most 1000 evenly strided pooled points are used.
pub fn median_bandwidth(a: &Tensor, b: &Tensor) -> f64 {
    let pooled: Vec<&[f64]> = (0..a.rows()).map(|i| a.row(i)).chain((0..b.rows()).map(|i| b.row(i))).collect();
    let stride = pooled.len().div_ceil(1000).max(1);
    let pts: Vec<&[f64]> = pooled.into_iter().step_by(stride).collect();
    let mut d = Vec::with_capacity(pts.len() * pts.len() / 2);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            d.push(sq_dist(pts[i], pts[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let med = if d.len() % 2 == 0 { 0.5 * (d[mid - 1] + d[mid]) } else { d[mid] };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

fn mean_kernel(x: &Tensor, y: &Tensor, gamma: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..x.rows() {
        let xi = x.row(i);
        let mut row = 0.0;
        for j in 0..y.rows() {
            row += (-gamma * sq_dist(xi, y.row(j))).exp();
        }
        total += row;
    }
    total / (x.rows() * y.rows()) as f64
}

/// Biased MMD² estimate under a Gaussian kernel with bandwidth `sigma`,
/// before any clamping.
pub fn mmd2_biased_raw(a: &Tensor, b: &Tensor, sigma: f64) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::dim("kmmd feature dimension", a.cols(), b.cols()));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Usage("kmmd needs non-empty sets".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Usage(format!("kernel bandwidth must be positive, got {sigma}")));
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    Ok(mean_kernel(a, a, gamma) + mean_kernel(b, b, gamma) - 2.0 * mean_kernel(a, b, gamma))
}

/// Biased MMD²; it is a squared RKHS norm, so roundoff below zero is floored.
pub fn mmd2_biased(a: &Tensor, b: &Tensor, sigma: f64) -> Result<f64> {
    Ok(mmd2_biased_raw(a, b, sigma)?.max(0.0))
}

pub fn resolve_bandwidth(a: &Tensor, b: &Tensor, bandwidth: Bandwidth) -> f64 {
    match bandwidth {
        Bandwidth::Median => median_bandwidth(a, b),
        Bandwidth::Fixed(s) => s,
    }
}

/// Square root of the biased MMD² estimate.
pub fn kmmd(a: &Tensor, b: &Tensor, bandwidth: Bandwidth) -> Result<f64> {
    let sigma = resolve_bandwidth(a, b, bandwidth);
    Ok(mmd2_biased(a, b, sigma)?.sqrt())
}

/// Coordinates of the centered rows of `x` along its top `k` principal
/// axes. Each axis is signed so its largest-magnitude entry is positive.
pub fn principal_projection(x: &Tensor, k: usize) -> Result<Tensor> {
    let d = x.cols();
    if k == 0 || k > d {
        return Err(Error::Usage(format!("cannot project {d}-dimensional data onto {k} axes")));
    }
    let (mu, cov) = moments(x)?;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = Vec::with_capacity(k);
    for &j in &order[..k] {
        let mut v: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|e| *e = -*e);
        }
        axes.push(v);
    }
    let mut out = Vec::with_capacity(x.rows() * k);
    for r in 0..x.rows() {
        let row = x.row(r);
        for axis in &axes {
            out.push(row.iter().zip(axis).enumerate().map(|(c, (xi, ai))| (xi - mu[c]) * ai).sum());
        }
    }
    Tensor::matrix(x.rows(), k, out)
}

/// Mean over features of the unbiased per-feature variance.
pub fn mean_variance(a: &Tensor) -> Result<f64> {
    let n = a.rows();
    if n < 2 {
        return Err(Error::Usage(format!("mean variance needs at least 2 samples, got {n}")));
    }
    let mu = a.column_means();
    let d = a.cols();
    let mut acc = vec![0.0; d];
    for i in 0..n {
        for (j, v) in a.row(i).iter().enumerate() {
            acc[j] += (v - mu[j]) * (v - mu[j]);
        }
    }
    Ok(acc.iter().map(|s| s / (n as f64 - 1.0)).sum::<f64>() / d as f64)
}

/// Something that assigns class indices to rows.
pub trait Classify {
    fn classes(&self) -> usize;
    fn predict(&self, x: &Tensor) -> Result<Vec<usize>>;
}

/// Dense softmax classifier over low-dimensional points.
#[derive(Debug, Clone)]
pub struct Classifier {
    net: DenseNetwork,
    trained: bool,
}

impl Classifier {
    pub fn new(dim: usize, classes: usize, hidden: usize, rng: &mut crate::Rng64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Usage("classifier needs at least 2 classes".into()));
        }
        let net = DenseNetwork::mlp(
            &[dim, hidden, hidden, classes],
            Activation::Relu,
            Activation::Linear,
            Init::He,
            rng,
        )?;
        Ok(Self { net, trained: false })
    }

    /// Wraps an already trained logit network.
    pub fn from_network(net: DenseNetwork) -> Self {
        Self { net, trained: true }
    }

    pub fn network(&self) -> &DenseNetwork {
        &self.net
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Minibatch Adam on softmax cross-entropy.
    pub fn fit(&mut self, x: &Tensor, labels: &[usize], steps: usize, batch: usize, seed: u64) -> Result<f64> {
        use rand::Rng;
        if x.rows() != labels.len() || x.rows() == 0 {
            return Err(Error::dim("classifier labels", x.rows(), labels.len()));
        }
        let mut rng = crate::rng(seed);
        let mut adam = AdamState::for_network(AdamConfig::new(1e-2, 0.9, 0.999), &self.net);
        let mut last = f64::NAN;
        for _ in 0..steps {
            let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..x.rows())).collect();
            let xb = x.gather_rows(&idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let bound = self.net.bind(&mut g);
            let xn = g.constant(xb);
            let logits = bound.forward(&mut g, xn)?;
            let loss = g.softmax_cross_entropy(logits, yb)?;
            last = g.value(loss).item();
            let grads = g.backward(loss)?;
            adam.step_network(&mut self.net, &bound.param_grads(&grads))?;
        }
        self.trained = true;
        Ok(last)
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let p = self.predict(x)?;
        Ok(p.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
    }
}

impl Classify for Classifier {
    fn classes(&self) -> usize {
        self.net.output_dim()
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        if !self.trained {
            return Err(Error::Usage("classifier has not been trained".into()));
        }
        let logits = self.net.infer(x)?;
        Ok((0..logits.rows())
            .map(|i| {
                let row = logits.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

/// Fraction of rows not assigned to `target_class`.
pub fn classifier_error(samples: &Tensor, target_class: usize, clf: &dyn Classify) -> Result<f64> {
    if target_class >= clf.classes() {
        return Err(Error::Usage(format!(
            "target class {target_class} out of range for {} classes",
            clf.classes()
        )));
    }
    if samples.rows() == 0 {
        return Err(Error::Usage("no samples to classify".into()));
    }
    let pred = clf.predict(samples)?;
    Ok(pred.iter().filter(|&&p| p != target_class).count() as f64 / pred.len() as f64)
}

/// Evaluation settings.
#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    pub cap: usize,
    pub bandwidth: Bandwidth,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cap: 10_000,
            bandwidth: Bandwidth::Median,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub frechet: f64,
    pub kmmd: f64,
    pub mean_variance: f64,
    pub classifier_error: Option<f64>,
    pub n_generated: usize,
    pub n_real: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

/// Evaluates `source` against `real`. At most `cap` real points are used
/// (a random subset when there are more), and the generated count equals
/// the real count used.
pub fn build_report(
    source: &dyn Generative,
    real: &SampleSet,
    config: &EvalConfig,
    classifier: Option<(&dyn Classify, usize)>,
) -> Result<EvalReport> {
    if config.cap == 0 {
        return Err(Error::Usage("evaluation cap must be at least 1".into()));
    }
    if real.is_empty() {
        return Err(Error::Usage("real set is empty".into()));
    }
    let mut rng = crate::rng(crate::derive_seed(config.seed, 1));
    let real_used = if real.len() > config.cap {
        real.subset(config.cap, &mut rng).points
    } else {
        real.points.clone()
    };
    let n = real_used.rows();
    let generated = source.generate(n, config.seed)?;
    if generated.rows() != n {
        return Err(Error::dim("generated sample count", n, generated.rows()));
    }
    let report = EvalReport {
        frechet: frechet_distance(&generated, &real_used)?,
        kmmd: kmmd(&generated, &real_used, config.bandwidth)?,
        mean_variance: mean_variance(&generated)?,
        classifier_error: classifier
            .map(|(c, k)| classifier_error(&generated, k, c))
            .transpose()?,
        n_generated: n,
        n_real: n,
        seed: config.seed,
    };
    for (name, v) in [
        ("frechet", report.frechet),
        ("kmmd", report.kmmd),
        ("mean_variance", report.mean_variance),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { context: format!("report field {name}") });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::Origin;
    use proptest::prelude::*;
    use rand::Rng;

    /// Four points with exact mean `m` and unbiased standard deviation `s`.
    fn fitted(m: f64, s: f64) -> Tensor {
        let a = s * 3f64.sqrt() / 2.0;
        Tensor::column(vec![m - a, m + a, m - a, m + a])
    }

    #[test]
    fn projection_recovers_dominant_axis() {
        let mut rng = crate::rng(4);
        let t = Tensor::randn(500, 1, 1.0, &mut rng);
        let noise = Tensor::randn(500, 3, 0.01, &mut rng);
        let mut data = Vec::new();
        for r in 0..500 {
            let s = t.get(r, 0);
            let n = noise.row(r);
            data.extend([3.0 * s + n[0], -4.0 * s + n[1], 1.0 + n[2]]);
        }
        let x = Tensor::matrix(500, 3, data).unwrap();
        let p = principal_projection(&x, 2).unwrap();
        assert_eq!(p.shape(), &[500, 2]);
        let t_mean = t.mean();
        for r in 0..500 {
            // axis is (3, -4, 0) / 5 with its -4 entry made positive
            assert!((p.get(r, 0) + 5.0 * (t.get(r, 0) - t_mean)).abs() < 0.1);
        }
        assert!(principal_projection(&x, 4).is_err());
    }

    #[test]
    fn fitted_helper_has_exact_moments() {
        let x = fitted(1.0, 2.0);
        let (mu, cov) = moments(&x).unwrap();
        assert!((mu[0] - 1.0).abs() < 1e-15);
        assert!((cov[(0, 0)] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn frechet_closed_forms() {
        let a = fitted(0.0, 1.0);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-12);
        let v = frechet_distance(&a, &fitted(1.0, 1.0)).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
        let v = frechet_distance(&a, &fitted(0.0, 2.0)).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn frechet_needs_two_rows() {
        assert!(frechet_distance(&Tensor::column(vec![1.0]), &fitted(0.0, 1.0)).is_err());
    }

    #[test]
    fn frechet_rejects_clearly_indefinite_covariance() {
        let mu = DVector::from_vec(vec![0.0, 0.0]);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-3]);
        let ok = DMatrix::identity(2, 2);
        let err = frechet_from_moments(&mu, &bad, &mu, &ok).unwrap_err();
        assert!(err.to_string().contains("eigenvalue"), "{err}");
        let nearly = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        assert!(frechet_from_moments(&mu, &nearly, &mu, &ok).is_ok());
    }

    #[test]
    fn kmmd_closed_forms() {
        let a = Tensor::column(vec![0.0]);
        let b = Tensor::column(vec![1.0]);
        let mmd2 = mmd2_biased(&a, &b, 1.0).unwrap();
        let expected = 2.0 - 2.0 * (-0.5f64).exp();
        assert!((mmd2 - expected).abs() < 1e-12);
        assert!((mmd2 - 0.786938).abs() < 1e-6);
        let k = kmmd(&a, &b, Bandwidth::Fixed(1.0)).unwrap();
        assert!((k - expected.sqrt()).abs() < 1e-12);
        assert!((k - 0.887096).abs() < 1e-6);
        let mut rng = crate::rng(0);
        let x = Tensor::randn(30, 3, 1.0, &mut rng);
        assert!(kmmd(&x, &x, Bandwidth::Median).unwrap() < 1e-6);
        assert!(mmd2_biased(&x, &x, 1.0).unwrap() < 1e-12);
    }

    #[test]
    fn median_bandwidth_of_three_points() {
        let a = Tensor::column(vec![0.0, 1.0]);
        let b = Tensor::column(vec![3.0]);
        // distances 1, 3, 2 -> median 2
        assert_eq!(median_bandwidth(&a, &b), 2.0);
    }

    #[test]
    fn mean_variance_examples() {
        assert_eq!(mean_variance(&Tensor::column(vec![0.0, 2.0])).unwrap(), 2.0);
        assert_eq!(mean_variance(&Tensor::filled(5, 3, 1.25)).unwrap(), 0.0);
        let mut rng = crate::rng(4);
        let x = Tensor::randn(50, 4, 1.0, &mut rng);
        let v = mean_variance(&x).unwrap();
        let v3 = mean_variance(&x.scale(3.0)).unwrap();
        assert!((v3 - 9.0 * v).abs() < 1e-12);
    }

    struct Always(usize, usize);

    impl Classify for Always {
        fn classes(&self) -> usize {
            self.1
        }
        fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
            Ok(vec![self.0; x.rows()])
        }
    }

    struct Chance(usize);

    impl Classify for Chance {
        fn classes(&self) -> usize {
            self.0
        }
        fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
            let mut rng = crate::rng(17);
            Ok((0..x.rows()).map(|_| rng.random_range(0..self.0)).collect())
        }
    }

    #[test]
    fn classifier_error_examples() {
        let x = Tensor::zeros(100, 2);
        assert_eq!(classifier_error(&x, 1, &Always(1, 3)).unwrap(), 0.0);
        let x = Tensor::zeros(20_000, 2);
        let e = classifier_error(&x, 2, &Chance(4)).unwrap();
        assert!((e - 0.75).abs() < 0.01, "{e}");
        let mut rng = crate::rng(0);
        let untrained = Classifier::new(2, 3, 8, &mut rng).unwrap();
        assert!(matches!(classifier_error(&x, 0, &untrained), Err(Error::Usage(_))));
    }

    #[test]
    fn classifier_learns_separated_clusters() {
        let spec = crate::datakit::MixtureSpec::ring(4, 2.0, 0.05).unwrap();
        let mut rng = crate::rng(1);
        let (x, y) = spec.sample_labeled(2000, &mut rng);
        let mut clf = Classifier::new(2, 4, 16, &mut rng).unwrap();
        clf.fit(&x, &y, 400, 64, 3).unwrap();
        let (xt, yt) = spec.sample_labeled(500, &mut rng);
        assert!(clf.accuracy(&xt, &yt).unwrap() > 0.98);
    }

    struct Fixed(Tensor);

    impl Generative for Fixed {
        fn generate(&self, n: usize, seed: u64) -> Result<Tensor> {
            let mut rng = crate::rng(seed);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.0.rows())).collect();
            Ok(self.0.gather_rows(&idx))
        }
    }

    #[test]
    fn report_caps_generated_count() {
        let mut rng = crate::rng(5);
        let real = SampleSet::new(Tensor::randn(100, 2, 1.0, &mut rng), Origin::Real, None);
        let src = Fixed(Tensor::randn(500, 2, 1.0, &mut rng));
        let cfg = EvalConfig { cap: 10_000, ..EvalConfig::default() };
        let r = build_report(&src, &real, &cfg, None).unwrap();
        assert_eq!((r.n_generated, r.n_real), (100, 100));
        assert_eq!(r.classifier_error, None);
        let r2 = build_report(&src, &real, &cfg, None).unwrap();
        assert_eq!(r.to_json(), r2.to_json());
        let small = EvalConfig { cap: 40, ..cfg };
        assert_eq!(build_report(&src, &real, &small, None).unwrap().n_generated, 40);
        let zero = EvalConfig { cap: 0, ..cfg };
        assert!(build_report(&src, &real, &zero, None).is_err());
    }

    #[test]
    fn report_json_key_order() {
        let r = EvalReport {
            frechet: 1.0,
            kmmd: 0.5,
            mean_variance: 2.0,
            classifier_error: Some(0.1),
            n_generated: 3,
            n_real: 3,
            seed: 9,
        };
        let json = r.to_json();
        let keys = ["frechet", "kmmd", "mean_variance", "classifier_error", "n_generated", "n_real", "seed"];
        let pos: Vec<usize> = keys.iter().map(|k| json.find(&format!("\"{k}\"")).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn frechet_separation_ordering() {
        let mut rng = crate::rng(6);
        let base = Tensor::randn(500, 2, 1.0, &mut rng);
        let shift = |dx: f64| base.map(|v| v + dx);
        let a = shift(0.0);
        let b = shift(2.0);
        let c = shift(5.0);
        assert!(frechet_distance(&a, &b).unwrap() < frechet_distance(&a, &c).unwrap());
    }

    #[test]
    fn kmmd_grows_with_separation() {
        let mut rng = crate::rng(12);
        let mut prev = -1.0;
        for t in [0.0, 1.0, 2.0, 4.0] {
            let a = Tensor::randn(2000, 2, 1.0, &mut rng);
            let mut b = Tensor::randn(2000, 2, 1.0, &mut rng);
            for i in 0..b.rows() {
                let v = b.get(i, 0);
                b.set(i, 0, v + t);
            }
            let k = kmmd(&a, &b, Bandwidth::Fixed(1.0)).unwrap();
            assert!(k > prev, "t={t}: {k} <= {prev}");
            prev = k;
        }
    }

    fn spd(d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = crate::rng(seed);
        let x = Tensor::randn(d, d, 1.0, &mut rng);
        let m = to_dmatrix(&x);
        &m * m.transpose() + DMatrix::identity(d, d) * 0.1
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn frechet_is_symmetric_and_nonnegative(seed in 0u64..10_000, d in 1usize..6) {
            let mut rng = crate::rng(seed);
            let a = Tensor::randn(40, d, 1.0, &mut rng);
            let b = Tensor::randn(30, d, 2.0, &mut rng);
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab));
        }

        #[test]
        fn sqrt_product_reconstructs(seed in 0u64..10_000, d in 1usize..=16) {
            let a = spd(d, seed);
            let b = spd(d, seed + 1);
            let s = sqrt_product(&a, &b).unwrap();
            let prod = &a * &b;
            let err = (&s * &s - &prod).norm() / prod.norm();
            prop_assert!(err < 1e-8, "relative error {}", err);
        }

        #[test]
        fn kmmd_is_symmetric(seed in 0u64..10_000) {
            let mut rng = crate::rng(seed);
            let a = Tensor::randn(20, 2, 1.0, &mut rng);
            let b = Tensor::randn(25, 2, 1.5, &mut rng);
            let ab = kmmd(&a, &b, Bandwidth::Median).unwrap();
            let ba = kmmd(&b, &a, Bandwidth::Median).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
        }
    }
}
