//! WGAN-GP generators and critics.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::{
    Activation, AdamConfig, AdamState, BoundNetwork, DenseNetwork, Graph, Init, NodeId,
};
use crate::datakit::{Checkpoint, ComponentTag, SampleSource};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Rng64;

/// Keeps the gradient-norm square root differentiable at zero.
pub const GP_EPS: f64 = 1e-12;

/// Diagonal Gaussian prior over the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl PriorSpec {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::dim("prior variance", mean.len(), var.len()));
        }
        if mean.is_empty() {
            return Err(Error::InvalidSpec("prior needs at least one dimension".into()));
        }
        if let Some(v) = var.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidSpec(format!("prior variance {v} is not positive")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidSpec("prior mean must be finite".into()));
        }
        Ok(Self { mean, var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let d = self.dim();
        let sd: Vec<f64> = self.var.iter().map(|v| v.sqrt()).collect();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            for j in 0..d {
                let e: f64 = StandardNormal.sample(rng);
                data.push(self.mean[j] + sd[j] * e);
            }
        }
        Tensor::matrix(n, d, data).expect("shape matches data")
    }
}

/// Network sizes for a generator/critic pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GanArch {
    pub latent_dim: usize,
    pub gen_width: usize,
    pub gen_depth: usize,
    pub critic_width: usize,
    pub critic_depth: usize,
}

impl Default for GanArch {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            gen_width: 64,
            gen_depth: 4,
            critic_width: 64,
            critic_depth: 3,
        }
    }
}

impl GanArch {
    pub fn from_config(cfg: &crate::datakit::RunConfig) -> Self {
        Self {
            latent_dim: cfg.latent_dim,
            gen_width: cfg.gen_width,
            gen_depth: cfg.gen_depth,
            critic_width: cfg.critic_width,
            critic_depth: cfg.critic_depth,
        }
    }

    pub(crate) fn widths(input: usize, width: usize, depth: usize, output: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(std::iter::repeat_n(width, depth.saturating_sub(1)));
        w.push(output);
        w
    }

    pub fn generator<R: Rng + ?Sized>(&self, data_dim: usize, rng: &mut R) -> Result<DenseNetwork> {
        DenseNetwork::mlp(
            &Self::widths(self.latent_dim, self.gen_width, self.gen_depth, data_dim),
            Activation::Relu,
            Activation::Linear,
            Init::He,
            rng,
        )
    }

    pub fn critic<R: Rng + ?Sized>(&self, input_dim: usize, rng: &mut R) -> Result<DenseNetwork> {
        DenseNetwork::mlp(
            &Self::widths(input_dim, self.critic_width, self.critic_depth, 1),
            Activation::LeakyRelu,
            Activation::Linear,
            Init::He,
            rng,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_critic: f64,
    pub lr_miner: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gp_weight: f64,
    pub n_critic: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        crate::datakit::RunConfig::default().train_config()
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if self.n_critic < 1 {
            return Err(Error::config("n_critic", "must be at least 1"));
        }
        if !(self.gp_weight >= 0.0) {
            return Err(Error::config("gp_weight", "must be >= 0"));
        }
        Ok(())
    }

    pub(crate) fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig::new(lr, self.beta1, self.beta2)
    }
}

/// A trained (or freshly initialized) generator/critic pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GanModel {
    pub generator: DenseNetwork,
    pub critic: DenseNetwork,
    pub prior: PriorSpec,
    pub iterations: usize,
    pub seed: u64,
    pub dataset: String,
}

impl GanModel {
    pub fn init<R: Rng + ?Sized>(arch: &GanArch, data_dim: usize, rng: &mut R) -> Result<Self> {
        let generator = arch.generator(data_dim, rng)?;
        let critic = arch.critic(data_dim, rng)?;
        Ok(Self {
            generator,
            critic,
            prior: PriorSpec::standard(arch.latent_dim),
            iterations: 0,
            seed: 0,
            dataset: String::new(),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn data_dim(&self) -> usize {
        self.generator.output_dim()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Tensor> {
        sample(self, n, seed)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(ComponentTag::Gan);
        self.write_into(&mut ck, "");
        ck
    }

    /// Writes the model under `prefix` so several models can share one file.
    pub fn write_into(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.put_network(&format!("{prefix}generator"), &self.generator);
        ck.put_network(&format!("{prefix}critic"), &self.critic);
        ck.push_tensor(format!("{prefix}prior.mean"), Tensor::row_vector(self.prior.mean.clone()));
        ck.push_tensor(format!("{prefix}prior.var"), Tensor::row_vector(self.prior.var.clone()));
        ck.set_meta(format!("{prefix}iterations"), self.iterations);
        ck.set_meta(format!("{prefix}seed"), self.seed);
        ck.set_meta(format!("{prefix}dataset"), &self.dataset);
    }

    pub fn read_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let model = Self {
            generator: ck.network(&format!("{prefix}generator"))?,
            critic: ck.network(&format!("{prefix}critic"))?,
            prior: PriorSpec::new(
                ck.tensor(&format!("{prefix}prior.mean"))?.data().to_vec(),
                ck.tensor(&format!("{prefix}prior.var"))?.data().to_vec(),
            )?,
            iterations: ck.meta_parse(&format!("{prefix}iterations"))?,
            seed: ck.meta_parse(&format!("{prefix}seed"))?,
            dataset: ck.meta(&format!("{prefix}dataset"))?.to_string(),
        };
        if model.generator.input_dim() != model.prior.dim() {
            return Err(Error::Integrity("generator input does not match prior".into()));
        }
        Ok(model)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.tag != ComponentTag::Gan {
            return Err(Error::Integrity(format!(
                "expected a gan checkpoint, found {}",
                ck.tag.name()
            )));
        }
        Self::read_from(ck, "")
    }
}

impl crate::eval::Generative for GanModel {
    fn generate(&self, n: usize, seed: u64) -> Result<Tensor> {
        sample(self, n, seed)
    }
}

/// One line of the training metric stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub stage: String,
    pub iteration: usize,
    pub critic_loss: f64,
    pub generator_loss: f64,
    pub gradient_penalty: f64,
    /// `E[D(real)] - E[D(fake)]` from the last critic step.
    pub wasserstein: f64,
}

impl MetricRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metric records serialize")
    }
}

/// Receives one record per training iteration.
pub type MetricSink<'a> = &'a mut dyn FnMut(&MetricRecord);

/// Graph nodes and values of one critic objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct CriticTerms {
    pub loss: NodeId,
    pub fake_score: f64,
    pub real_score: f64,
    pub gradient_penalty: f64,
}

/// `E[D(fake)] - E[D(real)] + lambda * GP` on an existing graph.
///
/// `alphas` holds one interpolation weight per row; the penalty is evaluated
/// at `alpha * real + (1 - alpha) * fake`. With `lambda == 0` the penalty is
/// not built at all.
pub fn critic_objective(
    g: &mut Graph,
    critic: &BoundNetwork,
    real: NodeId,
    fake: NodeId,
    alphas: &Tensor,
    lambda: f64,
) -> Result<CriticTerms> {
    let d_fake = critic.forward(g, fake)?;
    let d_real = critic.forward(g, real)?;
    let mf = g.mean(d_fake)?;
    let mr = g.mean(d_real)?;
    let w = g.sub(mf, mr)?;
    let (fake_score, real_score) = (g.value(mf).item(), g.value(mr).item());
    if lambda == 0.0 {
        return Ok(CriticTerms {
            loss: w,
            fake_score,
            real_score,
            gradient_penalty: 0.0,
        });
    }
    let gp = penalty_node(g, critic, real, fake, alphas)?;
    let gp_value = g.value(gp).item();
    let weighted = g.scale(gp, lambda)?;
    let loss = g.add(w, weighted)?;
    Ok(CriticTerms {
        loss,
        fake_score,
        real_score,
        gradient_penalty: gp_value,
    })
}

fn penalty_node(
    g: &mut Graph,
    critic: &BoundNetwork,
    real: NodeId,
    fake: NodeId,
    alphas: &Tensor,
) -> Result<NodeId> {
    let (vr, vf) = (g.value(real), g.value(fake));
    if !vr.same_shape(vf) {
        return Err(Error::dim(
            "gradient penalty batches",
            format!("{}x{}", vr.rows(), vr.cols()),
            format!("{}x{}", vf.rows(), vf.cols()),
        ));
    }
    if alphas.len() != vr.rows() {
        return Err(Error::dim("interpolation weights", vr.rows(), alphas.len()));
    }
    let a = g.constant(Tensor::column(alphas.data().to_vec()));
    let b = g.constant(Tensor::column(alphas.data().iter().map(|a| 1.0 - a).collect()));
    let xr = g.mul_column(real, a)?;
    let xf = g.mul_column(fake, b)?;
    let x_hat = g.add(xr, xf)?;
    let (_, grad) = critic.forward_with_input_gradient(g, x_hat)?;
    let sq = g.square(grad)?;
    let norm_sq = g.sum_cols(sq)?;
    let norm_sq = g.add_scalar(norm_sq, GP_EPS)?;
    let norm = g.sqrt(norm_sq)?;
    let dev = g.add_scalar(norm, -1.0)?;
    let dev_sq = g.square(dev)?;
    g.mean(dev_sq)
}

pub(crate) fn uniform_alphas(n: usize, rng: &mut Rng64) -> Tensor {
    Tensor::column((0..n).map(|_| rng.random::<f64>()).collect())
}

fn check_batches(real: &Tensor, noise: &Tensor) -> Result<()> {
    if real.rows() == 0 {
        return Err(Error::Usage("empty real batch".into()));
    }
    if real.rows() != noise.rows() {
        return Err(Error::dim("noise batch size", real.rows(), noise.rows()));
    }
    Ok(())
}

/// Critic loss value for real data against `G(noise)`.
pub fn critic_loss(
    critic: &DenseNetwork,
    generator: &DenseNetwork,
    real: &Tensor,
    noise: &Tensor,
    lambda: f64,
    rng: &mut Rng64,
) -> Result<f64> {
    check_batches(real, noise)?;
    let alphas = uniform_alphas(real.rows(), rng);
    let mut g = Graph::new();
    let bg = generator.bind(&mut g);
    let bd = critic.bind(&mut g);
    let z = g.constant(noise.clone());
    let fake = bg.forward(&mut g, z)?;
    let r = g.constant(real.clone());
    let terms = critic_objective(&mut g, &bd, r, fake, &alphas, lambda)?;
    Ok(g.value(terms.loss).item())
}

/// `-E[D(G(noise))]`.
pub fn generator_loss(critic: &DenseNetwork, generator: &DenseNetwork, noise: &Tensor) -> Result<f64> {
    let fake = generator.infer(noise)?;
    Ok(-critic.infer(&fake)?.mean())
}

/// `E[(|grad D(x_hat)| - 1)^2]` with uniform interpolation weights.
pub fn gradient_penalty(
    critic: &DenseNetwork,
    real: &Tensor,
    fake: &Tensor,
    rng: &mut Rng64,
) -> Result<f64> {
    if real.rows() == 0 {
        return Err(Error::Usage("empty real batch".into()));
    }
    let alphas = uniform_alphas(real.rows(), rng);
    gradient_penalty_at(critic, real, fake, &alphas)
}

pub fn gradient_penalty_at(
    critic: &DenseNetwork,
    real: &Tensor,
    fake: &Tensor,
    alphas: &Tensor,
) -> Result<f64> {
    let mut g = Graph::new();
    let bd = critic.bind(&mut g);
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let gp = penalty_node(&mut g, &bd, r, f, alphas)?;
    Ok(g.value(gp).item())
}

/// Outcome of one critic update.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CriticStats {
    pub loss: f64,
    pub gradient_penalty: f64,
    pub wasserstein: f64,
}

/// One Adam step on the critic against fixed fake samples.
pub(crate) fn critic_step(
    critic: &mut DenseNetwork,
    adam: &mut AdamState,
    real: &Tensor,
    fake: &Tensor,
    alphas: &Tensor,
    lambda: f64,
) -> Result<CriticStats> {
    let mut g = Graph::new();
    let bd = critic.bind(&mut g);
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let terms = critic_objective(&mut g, &bd, r, f, alphas, lambda)?;
    let loss = g.value(terms.loss).item();
    let grads = g.backward(terms.loss)?;
    adam.step_network(critic, &bd.param_grads(&grads))?;
    Ok(CriticStats {
        loss,
        gradient_penalty: terms.gradient_penalty,
        wasserstein: terms.real_score - terms.fake_score,
    })
}

/// Wraps numeric failures as a divergence carrying the last finite state.
pub(crate) fn diverged(err: Error, stage: &str, iteration: usize, state: impl FnOnce() -> Checkpoint) -> Error {
    match err {
        Error::NonFinite { .. } | Error::Numeric(_) => Error::Divergence {
            stage: stage.to_string(),
            iteration,
            last_finite: Some(Box::new(state())),
        },
        other => other,
    }
}

/// Trains a fresh model on `data`. Network initialization and every batch
/// draw come from one generator seeded with `config.seed`.
pub fn pretrain(
    config: &TrainConfig,
    arch: &GanArch,
    data: &dyn SampleSource,
    sink: MetricSink<'_>,
) -> Result<GanModel> {
    config.validate()?;
    let mut rng = crate::rng(config.seed);
    let mut model = GanModel::init(arch, data.dim(), &mut rng)?;
    model.seed = config.seed;
    train(&mut model, config, data, &mut rng, sink)?;
    Ok(model)
}

/// Continues adversarial training of `model` for `config.iterations` steps.
pub fn train(
    model: &mut GanModel,
    config: &TrainConfig,
    data: &dyn SampleSource,
    rng: &mut Rng64,
    sink: MetricSink<'_>,
) -> Result<()> {
    config.validate()?;
    if data.dim() != model.data_dim() {
        return Err(Error::dim("training data", model.data_dim(), data.dim()));
    }
    let mut adam_g = AdamState::for_network(config.adam(config.lr_generator), &model.generator);
    let mut adam_d = AdamState::for_network(config.adam(config.lr_critic), &model.critic);
    let k = config.batch_size;
    for it in 0..config.iterations {
        let mut step = || -> Result<MetricRecord> {
            let mut stats = CriticStats::default();
            for _ in 0..config.n_critic {
                let real = data.sample_batch(k, rng);
                let z = model.prior.sample(k, rng);
                let alphas = uniform_alphas(k, rng);
                let fake = model.generator.infer(&z)?;
                stats = critic_step(
                    &mut model.critic,
                    &mut adam_d,
                    &real,
                    &fake,
                    &alphas,
                    config.gp_weight,
                )?;
            }
            let z = model.prior.sample(k, rng);
            let mut g = Graph::new();
            let bg = model.generator.bind(&mut g);
            let bd = model.critic.bind(&mut g);
            let zn = g.constant(z);
            let fake = bg.forward(&mut g, zn)?;
            let s = bd.forward(&mut g, fake)?;
            let m = g.mean(s)?;
            let loss = g.neg(m)?;
            let gen_loss = g.value(loss).item();
            let grads = g.backward(loss)?;
            adam_g.step_network(&mut model.generator, &bg.param_grads(&grads))?;
            Ok(MetricRecord {
                stage: "pretrain".into(),
                iteration: it,
                critic_loss: stats.loss,
                generator_loss: gen_loss,
                gradient_penalty: stats.gradient_penalty,
                wasserstein: stats.wasserstein,
            })
        };
        match step() {
            Ok(rec) => sink(&rec),
            Err(e) => return Err(diverged(e, "pretrain", it, || model.to_checkpoint())),
        }
        model.iterations += 1;
    }
    Ok(())
}

/// `n` generated points, deterministic in `seed`.
pub fn sample(model: &GanModel, n: usize, seed: u64) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::Usage("sample count must be at least 1".into()));
    }
    let mut rng = crate::rng(seed);
    let z = model.prior.sample(n, &mut rng);
    model.generator.infer(&z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Layer;
    use crate::datakit::MixtureSpec;

    fn linear(weights: &[f64], bias: f64) -> DenseNetwork {
        let w = Tensor::matrix(weights.len(), 1, weights.to_vec()).unwrap();
        DenseNetwork::from_layers(vec![
            Layer::new(w, Tensor::scalar(bias), Activation::Linear).unwrap(),
        ])
        .unwrap()
    }

    /// Generator that ignores its input and emits `value`.
    fn constant_gen(latent: usize, value: f64) -> DenseNetwork {
        let w = Tensor::zeros(latent, 1);
        DenseNetwork::from_layers(vec![
            Layer::new(w, Tensor::scalar(value), Activation::Linear).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn identity_critic_values() {
        let d = linear(&[1.0], 0.0);
        let gen = constant_gen(1, 0.0);
        let real = Tensor::column(vec![2.0]);
        let z = Tensor::column(vec![0.3]);
        let mut rng = crate::rng(0);
        assert_eq!(critic_loss(&d, &gen, &real, &z, 0.0, &mut rng).unwrap(), -2.0);
        let v = critic_loss(&d, &gen, &real, &z, 10.0, &mut rng).unwrap();
        assert!((v + 2.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn constant_critic_leaves_only_penalty() {
        let d = linear(&[0.0], 1.5);
        let gen = constant_gen(2, 0.7);
        let mut rng = crate::rng(3);
        let real = Tensor::randn(6, 1, 1.0, &mut rng);
        let z = Tensor::randn(6, 2, 1.0, &mut rng);
        let v = critic_loss(&d, &gen, &real, &z, 10.0, &mut rng).unwrap();
        // Zero gradient: (sqrt(eps) - 1)^2 per row.
        let gp = (GP_EPS.sqrt() - 1.0).powi(2);
        assert!((v - 10.0 * gp).abs() < 1e-12, "{v}");
        assert_eq!(generator_loss(&d, &gen, &z).unwrap(), -1.5);
    }

    #[test]
    fn penalty_examples() {
        let mut rng = crate::rng(1);
        let real = Tensor::randn(5, 2, 1.0, &mut rng);
        let fake = Tensor::randn(5, 2, 1.0, &mut rng);
        let unit = linear(&[0.6, 0.8], 0.3);
        assert!(gradient_penalty(&unit, &real, &fake, &mut rng).unwrap() < 1e-20);
        let r1 = real.columns(0, 1);
        let f1 = fake.columns(0, 1);
        let two = linear(&[2.0], 0.0);
        let v = gradient_penalty(&two, &r1, &f1, &mut rng).unwrap();
        assert!((v - 1.0).abs() < 1e-11, "{v}");
        let zero = linear(&[0.0], 0.0);
        let v = gradient_penalty(&zero, &r1, &f1, &mut rng).unwrap();
        assert!((v - 1.0).abs() < 1e-5, "{v}");
    }

    #[test]
    fn generator_loss_of_shifted_generator() {
        let d = linear(&[1.0], 0.0);
        let gen = constant_gen(3, 3.0);
        let z = Tensor::zeros(4, 3);
        assert_eq!(generator_loss(&d, &gen, &z).unwrap(), -3.0);
    }

    #[test]
    fn one_generator_step_decreases_loss() {
        let d = linear(&[1.0], 0.0);
        let mut rng = crate::rng(5);
        let arch = GanArch { latent_dim: 2, gen_width: 8, gen_depth: 2, ..GanArch::default() };
        let mut gen = arch.generator(1, &mut rng).unwrap();
        let z = Tensor::randn(8, 2, 1.0, &mut rng);
        let before = generator_loss(&d, &gen, &z).unwrap();
        let mut g = Graph::new();
        let bg = gen.bind(&mut g);
        let bd = d.bind(&mut g);
        let zn = g.constant(z.clone());
        let f = bg.forward(&mut g, zn).unwrap();
        let s = bd.forward(&mut g, f).unwrap();
        let m = g.mean(s).unwrap();
        let loss = g.neg(m).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut adam = AdamState::for_network(AdamConfig::new(1e-3, 0.5, 0.9), &gen);
        adam.step_network(&mut gen, &bg.param_grads(&grads)).unwrap();
        assert!(generator_loss(&d, &gen, &z).unwrap() < before);
    }

    #[test]
    fn penalty_free_loss_is_mean_difference() {
        let mut rng = crate::rng(9);
        let arch = GanArch { latent_dim: 3, gen_width: 8, gen_depth: 2, critic_width: 8, critic_depth: 2 };
        let model = GanModel::init(&arch, 2, &mut rng).unwrap();
        let real = Tensor::randn(7, 2, 1.0, &mut rng);
        let z = Tensor::randn(7, 3, 1.0, &mut rng);
        let v = critic_loss(&model.critic, &model.generator, &real, &z, 0.0, &mut rng).unwrap();
        let fake = model.generator.infer(&z).unwrap();
        let direct = model.critic.infer(&fake).unwrap().mean() - model.critic.infer(&real).unwrap().mean();
        assert_eq!(v, direct);
    }

    #[test]
    fn zero_iterations_is_initialization() {
        let arch = GanArch::default();
        let cfg = TrainConfig { iterations: 0, seed: 4, ..TrainConfig::default() };
        let data = MixtureSpec::gaussian(vec![0.0, 0.0], 1.0).unwrap();
        let model = pretrain(&cfg, &arch, &data, &mut |_| {}).unwrap();
        let mut rng = crate::rng(4);
        let fresh = GanModel::init(&arch, 2, &mut rng).unwrap();
        assert_eq!(model.generator, fresh.generator);
        assert_eq!(model.critic, fresh.critic);
        assert_eq!(model.iterations, 0);
    }

    #[test]
    fn pretraining_is_deterministic_and_logs() {
        let arch = GanArch { latent_dim: 2, gen_width: 16, gen_depth: 2, critic_width: 16, critic_depth: 2 };
        let cfg = TrainConfig { iterations: 5, seed: 11, ..TrainConfig::default() };
        let data = MixtureSpec::gaussian(vec![1.0, -1.0], 0.5).unwrap();
        let mut records = Vec::new();
        let a = pretrain(&cfg, &arch, &data, &mut |r| records.push(r.clone())).unwrap();
        let b = pretrain(&cfg, &arch, &data, &mut |_| {}).unwrap();
        assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
        assert_eq!(records.len(), 5);
        assert!(records[0].to_json_line().contains("\"gradient_penalty\""));
        assert_eq!(a.iterations, 5);
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let arch = GanArch { latent_dim: 2, gen_width: 8, gen_depth: 2, critic_width: 8, critic_depth: 2 };
        let cfg = TrainConfig {
            iterations: 50,
            lr_generator: 1e300,
            lr_critic: 1e300,
            ..TrainConfig::default()
        };
        let data = MixtureSpec::gaussian(vec![0.0], 1.0).unwrap();
        match pretrain(&cfg, &arch, &data, &mut |_| {}) {
            Err(Error::Divergence { stage, last_finite, .. }) => {
                assert_eq!(stage, "pretrain");
                let ck = last_finite.expect("checkpoint attached");
                let m = GanModel::from_checkpoint(&ck).unwrap();
                assert!(m.generator.params().iter().all(|p| p.is_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut rng = crate::rng(2);
        let model = GanModel::init(&GanArch::default(), 2, &mut rng).unwrap();
        let a = model.sample(10, 7).unwrap();
        assert_eq!(a, model.sample(10, 7).unwrap());
        assert_eq!(model.sample(1, 0).unwrap().shape(), &[1, 2]);
        assert!(model.sample(0, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = crate::rng(2);
        let mut model = GanModel::init(&GanArch::default(), 3, &mut rng).unwrap();
        model.dataset = "ring".into();
        let ck = Checkpoint::from_bytes(&model.to_checkpoint().to_bytes()).unwrap();
        let back = GanModel::from_checkpoint(&ck).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.generator.param_hash(), model.generator.param_hash());
    }

    #[test]
    fn frozen_generator_untouched_by_critic_steps() {
        let mut rng = crate::rng(8);
        let arch = GanArch { latent_dim: 2, gen_width: 8, gen_depth: 2, critic_width: 8, critic_depth: 2 };
        let mut model = GanModel::init(&arch, 2, &mut rng).unwrap();
        model.generator.frozen = true;
        let before = model.generator.param_hash();
        let mut adam = AdamState::for_network(AdamConfig::new(1e-3, 0.5, 0.9), &model.critic);
        for _ in 0..5 {
            let real = Tensor::randn(4, 2, 1.0, &mut rng);
            let z = model.prior.sample(4, &mut rng);
            let fake = model.generator.infer(&z).unwrap();
            let alphas = uniform_alphas(4, &mut rng);
            critic_step(&mut model.critic, &mut adam, &real, &fake, &alphas, 10.0).unwrap();
        }
        assert_eq!(model.generator.param_hash(), before);
    }
}
