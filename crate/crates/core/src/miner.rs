//! Single-generator mining and the two-stage transfer schedule.
//!
//! Stage 1 trains a small miner `M` in front of a frozen generator so that
//! `G(M(u))` matches the target set. Stage 2 unfreezes everything and trains
//! miner, generator and critic together at a reduced rate for `G` and `D`.

use std::fmt;

use rand::Rng;

use crate::autodiff::{Activation, AdamState, BoundNetwork, DenseNetwork, Graph, Init, NodeId};
use crate::datakit::{Checkpoint, ComponentTag, SampleSet, SampleSource};
use crate::error::{Error, Result};
use crate::eval::Generative;
use crate::gan::{
    critic_objective, critic_step, diverged, uniform_alphas, CriticStats, GanArch, GanModel,
    MetricRecord, MetricSink, PriorSpec, TrainConfig,
};
use crate::tensor::Tensor;
use crate::Rng64;

/// Standard deviation of every initial miner weight and bias.
pub const MINER_INIT_STD: f64 = 0.01;

pub(crate) const STREAM_MINER_INIT: u64 = 11;
pub(crate) const STREAM_STAGE1: u64 = 21;
pub(crate) const STREAM_STAGE2: u64 = 22;

/// Residual latent map `M(u) = u + f(u)`, where `f` is a small MLP whose
/// last layer is linear. With small initial weights `M` starts close to the
/// identity.
#[derive(Debug, Clone, PartialEq)]
pub struct MinerNetwork {
    pub net: DenseNetwork,
}

impl MinerNetwork {
    /// `depth` layers; hidden layers have `width` units.
    pub fn new<R: Rng + ?Sized>(latent_dim: usize, depth: usize, width: usize, rng: &mut R) -> Result<Self> {
        Self::with_output(latent_dim, latent_dim, depth, width, rng)
    }

    pub(crate) fn with_output<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        depth: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidSpec("miner depth must be at least 1".into()));
        }
        let net = DenseNetwork::mlp(
            &GanArch::widths(input, width, depth, output),
            Activation::Relu,
            Activation::Linear,
            Init::Normal(MINER_INIT_STD),
            rng,
        )?;
        Ok(Self { net })
    }

    /// Exact identity map (all residual weights zero).
    pub fn identity(latent_dim: usize) -> Self {
        let mut m = Self::new(latent_dim, 1, latent_dim, &mut crate::rng(0)).expect("valid");
        for p in m.net.params_mut() {
            p.data_mut().fill(0.0);
        }
        m
    }

    pub fn latent_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn forward(&self, g: &mut Graph, bound: &BoundNetwork, u: NodeId) -> Result<NodeId> {
        let f = bound.forward(g, u)?;
        g.add(u, f)
    }

    pub fn infer(&self, u: &Tensor) -> Result<Tensor> {
        let f = self.net.infer(u)?;
        Ok(u.zip_map(&f, |a, b| a + b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Miner initialized, nothing trained yet.
    Initialized,
    /// Stage 1 done: miner trained, generator untouched.
    MineOnly,
    /// Stage 2 done: miner, generator and critic finetuned together.
    Full,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Initialized => "initialized",
            Stage::MineOnly => "mine_only",
            Stage::Full => "full",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "initialized" => Stage::Initialized,
            "mine_only" => Stage::MineOnly,
            "full" => Stage::Full,
            _ => return Err(Error::Integrity(format!("unknown stage `{s}`"))),
        })
    }
}

/// Miner architecture and stage schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinerConfig {
    pub depth: usize,
    pub width: usize,
    pub mine_iterations: usize,
    pub finetune_iterations: usize,
    /// Stage-2 learning rate for `G` and `D` relative to the miner rate.
    pub stage2_lr_scale: f64,
}

impl MinerConfig {
    pub fn from_config(cfg: &crate::datakit::RunConfig, data_dim: usize) -> Self {
        Self {
            depth: cfg.resolved_miner_depth(data_dim),
            width: cfg.resolved_miner_width(),
            mine_iterations: cfg.mine_iterations,
            finetune_iterations: cfg.finetune_iterations,
            stage2_lr_scale: cfg.stage2_lr_scale,
        }
    }
}

/// State of one source-to-target transfer.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferRun {
    pub generator: DenseNetwork,
    pub critic: DenseNetwork,
    pub prior: PriorSpec,
    pub miner: MinerNetwork,
    pub stage: Stage,
    pub target: SampleSet,
    pub mine_iterations: usize,
    pub finetune_iterations: usize,
    /// Parameter hash of the source generator this run started from.
    pub source_generator_hash: String,
    pub seed: u64,
}

impl TransferRun {
    /// Starts a run from `source`; the critic is copied from the source critic.
    pub fn new(source: &GanModel, target: SampleSet, depth: usize, width: usize, seed: u64) -> Result<Self> {
        if target.is_empty() {
            return Err(Error::Usage("target set is empty".into()));
        }
        if target.dim() != source.data_dim() {
            return Err(Error::dim("target samples", source.data_dim(), target.dim()));
        }
        let mut rng = crate::rng(crate::derive_seed(seed, STREAM_MINER_INIT));
        let miner = MinerNetwork::new(source.latent_dim(), depth, width, &mut rng)?;
        Ok(Self {
            generator: source.generator.clone(),
            critic: source.critic.clone(),
            prior: source.prior.clone(),
            miner,
            stage: Stage::Initialized,
            target,
            mine_iterations: 0,
            finetune_iterations: 0,
            source_generator_hash: source.generator.param_hash(),
            seed,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(ComponentTag::Miner);
        ck.put_network("generator", &self.generator);
        ck.put_network("critic", &self.critic);
        ck.put_network("miner", &self.miner.net);
        ck.push_tensor("prior.mean", Tensor::row_vector(self.prior.mean().to_vec()));
        ck.push_tensor("prior.var", Tensor::row_vector(self.prior.var().to_vec()));
        ck.push_tensor("target", self.target.points.clone());
        ck.set_meta("stage", self.stage);
        ck.set_meta("mine_iterations", self.mine_iterations);
        ck.set_meta("finetune_iterations", self.finetune_iterations);
        ck.set_meta("source_generator_hash", &self.source_generator_hash);
        ck.set_meta("critic_init", "source");
        ck.set_meta("seed", self.seed);
        ck.set_meta("target_seed", self.target.seed.map_or("none".into(), |s| s.to_string()));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.tag != ComponentTag::Miner {
            return Err(Error::Integrity(format!("expected a miner checkpoint, found {}", ck.tag.name())));
        }
        Ok(Self {
            generator: ck.network("generator")?,
            critic: ck.network("critic")?,
            prior: PriorSpec::new(
                ck.tensor("prior.mean")?.data().to_vec(),
                ck.tensor("prior.var")?.data().to_vec(),
            )?,
            miner: MinerNetwork { net: ck.network("miner")? },
            stage: ck.meta("stage")?.parse()?,
            target: SampleSet::new(
                ck.tensor("target")?.clone(),
                crate::datakit::Origin::Real,
                match ck.meta("target_seed")? {
                    "none" => None,
                    _ => Some(ck.meta_parse("target_seed")?),
                },
            ),
            mine_iterations: ck.meta_parse("mine_iterations")?,
            finetune_iterations: ck.meta_parse("finetune_iterations")?,
            source_generator_hash: ck.meta("source_generator_hash")?.to_string(),
            seed: ck.meta_parse("seed")?,
        })
    }

    /// Ratio of miner to generator parameter counts.
    pub fn miner_param_ratio(&self) -> f64 {
        self.miner.param_count() as f64 / self.generator.param_count() as f64
    }
}

impl Generative for TransferRun {
    fn generate(&self, n: usize, seed: u64) -> Result<Tensor> {
        mined_sample(self, n, seed)
    }
}

fn check_batches(u: &Tensor, target: &Tensor) -> Result<()> {
    if u.rows() == 0 {
        return Err(Error::Usage("empty noise batch".into()));
    }
    if u.rows() != target.rows() {
        return Err(Error::dim("target batch size", u.rows(), target.rows()));
    }
    Ok(())
}

/// `E[D(G(M(u)))] - E[D(x)] + lambda * GP`, interpolating between targets
/// and mined fakes with uniform weights drawn from `rng`.
pub fn mine_critic_loss(
    critic: &DenseNetwork,
    generator: &DenseNetwork,
    miner: &MinerNetwork,
    u: &Tensor,
    target: &Tensor,
    lambda: f64,
    rng: &mut Rng64,
) -> Result<f64> {
    check_batches(u, target)?;
    let alphas = uniform_alphas(u.rows(), rng);
    let mut g = Graph::new();
    let bg = generator.bind(&mut g);
    let bm = miner.net.bind(&mut g);
    let bd = critic.bind(&mut g);
    let un = g.constant(u.clone());
    let mu = miner.forward(&mut g, &bm, un)?;
    let fake = bg.forward(&mut g, mu)?;
    let real = g.constant(target.clone());
    let terms = critic_objective(&mut g, &bd, real, fake, &alphas, lambda)?;
    Ok(g.value(terms.loss).item())
}

/// Builds `-E[D(G(M(u)))]` on `g`.
pub(crate) fn mine_generator_objective(
    g: &mut Graph,
    critic: &BoundNetwork,
    generator: &BoundNetwork,
    miner: (&MinerNetwork, &BoundNetwork),
    u: &Tensor,
) -> Result<NodeId> {
    let un = g.constant(u.clone());
    let mu = miner.0.forward(g, miner.1, un)?;
    let fake = generator.forward(g, mu)?;
    let s = critic.forward(g, fake)?;
    let m = g.mean(s)?;
    g.neg(m)
}

/// `-E[D(G(M(u)))]`.
pub fn mine_generator_loss(
    critic: &DenseNetwork,
    generator: &DenseNetwork,
    miner: &MinerNetwork,
    u: &Tensor,
) -> Result<f64> {
    let mut g = Graph::new();
    let bg = generator.bind(&mut g);
    let bm = miner.net.bind(&mut g);
    let bd = critic.bind(&mut g);
    let loss = mine_generator_objective(&mut g, &bd, &bg, (miner, &bm), u)?;
    Ok(g.value(loss).item())
}

/// Stage 1: trains the miner against a critic while the generator stays
/// frozen. Gradients still pass through the generator to reach the miner.
pub fn train_miner(
    run: &mut TransferRun,
    config: &TrainConfig,
    iterations: usize,
    sink: MetricSink<'_>,
) -> Result<()> {
    run.generator.frozen = true;
    run.miner.net.frozen = false;
    run.critic.frozen = false;
    let lr = (config.lr_miner, config.lr_critic, config.lr_generator);
    let mut rng = crate::rng(crate::derive_seed(config.seed, STREAM_STAGE1));
    adversarial_loop(run, config, iterations, lr, Stage::MineOnly, &mut rng, sink)?;
    run.generator.frozen = false;
    if run.stage == Stage::Initialized {
        run.stage = Stage::MineOnly;
    }
    Ok(())
}

/// Stage 2: joint training of miner, generator and critic. `G` and `D` use
/// `lr_scale * config.lr_miner`.
pub fn finetune(
    run: &mut TransferRun,
    config: &TrainConfig,
    iterations: usize,
    lr_scale: f64,
    sink: MetricSink<'_>,
) -> Result<()> {
    if run.stage == Stage::Initialized {
        return Err(Error::Usage("finetuning requires a completed mining stage".into()));
    }
    run.generator.frozen = false;
    run.miner.net.frozen = false;
    run.critic.frozen = false;
    let reduced = lr_scale * config.lr_miner;
    let lr = (config.lr_miner, reduced, reduced);
    let mut rng = crate::rng(crate::derive_seed(config.seed, STREAM_STAGE2));
    adversarial_loop(run, config, iterations, lr, Stage::Full, &mut rng, sink)?;
    if iterations > 0 {
        run.stage = Stage::Full;
    }
    Ok(())
}

/// Both stages back to back.
pub fn transfer(
    run: &mut TransferRun,
    config: &TrainConfig,
    schedule: &MinerConfig,
    sink: MetricSink<'_>,
) -> Result<()> {
    train_miner(run, config, schedule.mine_iterations, sink)?;
    finetune(run, config, schedule.finetune_iterations, schedule.stage2_lr_scale, sink)
}

/// Learning rates are `(miner, critic, generator)`.
fn adversarial_loop(
    run: &mut TransferRun,
    config: &TrainConfig,
    iterations: usize,
    lr: (f64, f64, f64),
    stage: Stage,
    rng: &mut Rng64,
    sink: MetricSink<'_>,
) -> Result<()> {
    config.validate()?;
    let mut adam_m = AdamState::for_network(config.adam(lr.0), &run.miner.net);
    let mut adam_d = AdamState::for_network(config.adam(lr.1), &run.critic);
    let mut adam_g = AdamState::for_network(config.adam(lr.2), &run.generator);
    let k = config.batch_size;
    let stage_name = stage.to_string();
    for it in 0..iterations {
        let mut step = || -> Result<MetricRecord> {
            let mut stats = CriticStats::default();
            for _ in 0..config.n_critic {
                let real = run.target.sample_batch(k, rng);
                let u = run.prior.sample(k, rng);
                let alphas = uniform_alphas(k, rng);
                let fake = run.generator.infer(&run.miner.infer(&u)?)?;
                stats = critic_step(&mut run.critic, &mut adam_d, &real, &fake, &alphas, config.gp_weight)?;
            }
            let u = run.prior.sample(k, rng);
            let mut g = Graph::new();
            let bg = run.generator.bind(&mut g);
            let bm = run.miner.net.bind(&mut g);
            let bd = run.critic.bind(&mut g);
            let loss = mine_generator_objective(&mut g, &bd, &bg, (&run.miner, &bm), &u)?;
            let gen_loss = g.value(loss).item();
            let grads = g.backward(loss)?;
            adam_m.step_network(&mut run.miner.net, &bm.param_grads(&grads))?;
            adam_g.step_network(&mut run.generator, &bg.param_grads(&grads))?;
            Ok(MetricRecord {
                stage: stage_name.clone(),
                iteration: it,
                critic_loss: stats.loss,
                generator_loss: gen_loss,
                gradient_penalty: stats.gradient_penalty,
                wasserstein: stats.wasserstein,
            })
        };
        match step() {
            Ok(rec) => sink(&rec),
            Err(e) => return Err(diverged(e, &stage_name, it, || run.to_checkpoint())),
        }
        match stage {
            Stage::Full => run.finetune_iterations += 1,
            _ => run.mine_iterations += 1,
        }
    }
    Ok(())
}

/// `n` samples of `G(M(u))` with `u` from the full source prior.
pub fn mined_sample(run: &TransferRun, n: usize, seed: u64) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::Usage("sample count must be at least 1".into()));
    }
    let mut rng = crate::rng(seed);
    let u = run.prior.sample(n, &mut rng);
    run.generator.infer(&run.miner.infer(&u)?)
}

/// Baseline without a source model: a fresh GAN trained only on the target
/// for the same total number of iterations.
pub fn scratch_baseline(
    arch: &GanArch,
    target: &SampleSet,
    config: &TrainConfig,
    iterations: usize,
    sink: MetricSink<'_>,
) -> Result<GanModel> {
    let cfg = TrainConfig { iterations, ..*config };
    let mut model = crate::gan::pretrain(&cfg, arch, target, sink)?;
    model.dataset = "scratch".into();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Layer;
    use crate::datakit::{MixtureSpec, Origin};
    use crate::gan::{critic_loss, generator_loss};

    fn small_arch() -> GanArch {
        GanArch { latent_dim: 3, gen_width: 12, gen_depth: 3, critic_width: 12, critic_depth: 2 }
    }

    fn small_source(seed: u64) -> GanModel {
        GanModel::init(&small_arch(), 2, &mut crate::rng(seed)).unwrap()
    }

    fn target(n: usize, seed: u64) -> SampleSet {
        MixtureSpec::gaussian(vec![1.0, 1.0], 0.1).unwrap().sample(n, seed).unwrap()
    }

    #[test]
    fn identity_miner_reduces_to_plain_losses() {
        let src = small_source(1);
        let m = MinerNetwork::identity(3);
        let mut rng = crate::rng(2);
        let u = src.prior.sample(16, &mut rng);
        let x = target(16, 3).points;
        let a = mine_critic_loss(&src.critic, &src.generator, &m, &u, &x, 10.0, &mut crate::rng(7)).unwrap();
        let b = critic_loss(&src.critic, &src.generator, &x, &u, 10.0, &mut crate::rng(7)).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        let a = mine_generator_loss(&src.critic, &src.generator, &m, &u).unwrap();
        let b = generator_loss(&src.critic, &src.generator, &u).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn direct_mean_example() {
        let d = DenseNetwork::from_layers(vec![
            Layer::new(Tensor::scalar(1.0), Tensor::scalar(0.0), Activation::Linear).unwrap(),
        ])
        .unwrap();
        let g = DenseNetwork::from_layers(vec![
            Layer::new(Tensor::zeros(2, 1), Tensor::scalar(0.0), Activation::Linear).unwrap(),
        ])
        .unwrap();
        let m = MinerNetwork::new(2, 2, 2, &mut crate::rng(0)).unwrap();
        let u = Tensor::randn(2, 2, 1.0, &mut crate::rng(1));
        let x = Tensor::column(vec![2.0, 4.0]);
        let v = mine_critic_loss(&d, &g, &m, &u, &x, 0.0, &mut crate::rng(0)).unwrap();
        assert_eq!(v, -3.0);
    }

    #[test]
    fn freezing_does_not_change_loss_values() {
        let mut src = small_source(4);
        let m = MinerNetwork::new(3, 2, 3, &mut crate::rng(5)).unwrap();
        let u = src.prior.sample(8, &mut crate::rng(6));
        let x = target(8, 1).points;
        let a = mine_critic_loss(&src.critic, &src.generator, &m, &u, &x, 10.0, &mut crate::rng(9)).unwrap();
        src.generator.frozen = true;
        let b = mine_critic_loss(&src.critic, &src.generator, &m, &u, &x, 10.0, &mut crate::rng(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_critic_generator_loss() {
        let src = small_source(4);
        let d = DenseNetwork::from_layers(vec![
            Layer::new(Tensor::zeros(2, 1), Tensor::scalar(0.75), Activation::Linear).unwrap(),
        ])
        .unwrap();
        let m = MinerNetwork::new(3, 2, 3, &mut crate::rng(5)).unwrap();
        let u = src.prior.sample(8, &mut crate::rng(6));
        assert_eq!(mine_generator_loss(&d, &src.generator, &m, &u).unwrap(), -0.75);
    }

    #[test]
    fn one_miner_step_raises_critic_score_and_keeps_generator() {
        let src = small_source(8);
        let mut run = TransferRun::new(&src, target(20, 2), 2, 3, 0).unwrap();
        let u = run.prior.sample(32, &mut crate::rng(3));
        let before_score = -mine_generator_loss(&run.critic, &run.generator, &run.miner, &u).unwrap();
        let hash = run.generator.param_hash();
        run.generator.frozen = true;
        let mut g = Graph::new();
        let bg = run.generator.bind(&mut g);
        let bm = run.miner.net.bind(&mut g);
        let bd = run.critic.bind(&mut g);
        let loss = mine_generator_objective(&mut g, &bd, &bg, (&run.miner, &bm), &u).unwrap();
        let grads = g.backward(loss).unwrap();
        let cfg = TrainConfig::default();
        let mut am = AdamState::for_network(cfg.adam(1e-3), &run.miner.net);
        let mut ag = AdamState::for_network(cfg.adam(1e-3), &run.generator);
        am.step_network(&mut run.miner.net, &bm.param_grads(&grads)).unwrap();
        assert!(!ag.step_network(&mut run.generator, &bg.param_grads(&grads)).unwrap());
        assert_eq!(run.generator.param_hash(), hash);
        let after = -mine_generator_loss(&run.critic, &run.generator, &run.miner, &u).unwrap();
        assert!(after >= before_score, "{after} < {before_score}");
    }

    #[test]
    fn zero_iterations_keep_initialization() {
        let src = small_source(8);
        let mut run = TransferRun::new(&src, target(20, 2), 2, 3, 5).unwrap();
        let init = run.miner.clone();
        train_miner(&mut run, &TrainConfig::default(), 0, &mut |_| {}).unwrap();
        assert_eq!(run.miner, init);
        let fresh = MinerNetwork::new(3, 2, 3, &mut crate::rng(crate::derive_seed(5, STREAM_MINER_INIT))).unwrap();
        assert_eq!(run.miner, fresh);
        // weights drawn with the documented scale
        let w: Vec<f64> = run.miner.net.params().iter().flat_map(|p| p.data().to_vec()).collect();
        let sd = (w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        assert!(sd > 0.003 && sd < 0.03, "{sd}");
        let before = run.to_checkpoint().to_bytes();
        finetune(&mut run, &TrainConfig::default(), 0, 0.1, &mut |_| {}).unwrap();
        assert_eq!(run.stage, Stage::MineOnly);
        assert_eq!(run.to_checkpoint().to_bytes(), before);
    }

    #[test]
    fn stage_one_leaves_generator_bitwise_unchanged() {
        let src = small_source(8);
        let mut run = TransferRun::new(&src, target(10, 2), 2, 3, 1).unwrap();
        let cfg = TrainConfig { batch_size: 16, iterations: 0, ..TrainConfig::default() };
        train_miner(&mut run, &cfg, 5, &mut |_| {}).unwrap();
        assert_eq!(run.generator.param_hash(), run.source_generator_hash);
        assert_ne!(run.miner, MinerNetwork::new(3, 2, 3, &mut crate::rng(crate::derive_seed(1, STREAM_MINER_INIT))).unwrap());
        assert_eq!(run.stage, Stage::MineOnly);
        finetune(&mut run, &cfg, 3, 0.1, &mut |_| {}).unwrap();
        assert_ne!(run.generator.param_hash(), run.source_generator_hash);
        assert_eq!(run.stage, Stage::Full);
    }

    #[test]
    fn finetune_requires_stage_one() {
        let src = small_source(8);
        let mut run = TransferRun::new(&src, target(10, 2), 2, 3, 1).unwrap();
        assert!(finetune(&mut run, &TrainConfig::default(), 1, 0.1, &mut |_| {}).is_err());
    }

    #[test]
    fn default_miner_is_small_relative_to_generator() {
        let src = GanModel::init(&GanArch::default(), 2, &mut crate::rng(0)).unwrap();
        let run = TransferRun::new(&src, target(10, 0), 2, 8, 0).unwrap();
        assert!(run.miner_param_ratio() < 0.1, "{}", run.miner_param_ratio());
        assert_eq!(run.miner.net.output_dim(), src.latent_dim());
    }

    #[test]
    fn checkpoint_round_trip_and_sampling() {
        let src = small_source(8);
        let mut run = TransferRun::new(&src, target(10, 2), 2, 3, 1).unwrap();
        train_miner(&mut run, &TrainConfig { batch_size: 8, ..TrainConfig::default() }, 2, &mut |_| {}).unwrap();
        let back = TransferRun::from_checkpoint(&Checkpoint::from_bytes(&run.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, run);
        let a = mined_sample(&run, 5, 3).unwrap();
        assert_eq!(a.shape(), &[5, 2]);
        assert_eq!(a, mined_sample(&back, 5, 3).unwrap());
    }

    #[test]
    fn small_target_is_sampled_with_replacement() {
        let set = SampleSet::new(Tensor::column(vec![1.0, 2.0]), Origin::Real, None);
        let b = set.sample_batch(10, &mut crate::rng(0));
        assert_eq!(b.rows(), 10);
    }
}
