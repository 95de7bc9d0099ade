//! Mining from class-conditional generators.
//!
//! The generator here conditions every hidden layer on a class embedding
//! through a feature-wise scale and shift. Two ways to mine it:
//!
//! * a dual miner, where `M_z` moves the latent and `M_c` produces the
//!   embedding directly, replacing the table lookup;
//! * treating each class as its own generator and handing the resulting
//!   family to [`crate::multimine`].
//!
//! Neither path reads target labels.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{AdamState, BoundNetwork, DenseNetwork, Gradients, Graph, Layer, NodeId};
use crate::datakit::{Checkpoint, ComponentTag, MixtureSpec, Origin, SampleSet, SampleSource};
use crate::error::{Error, Result};
use crate::eval::Generative;
use crate::gan::{
    critic_step, diverged, uniform_alphas, CriticStats, GanArch, MetricRecord, MetricSink, PriorSpec,
    TrainConfig,
};
use crate::miner::{MinerNetwork, Stage, STREAM_MINER_INIT, STREAM_STAGE1, STREAM_STAGE2};
use crate::multimine::{FamilyConfig, GeneratorBank, GeneratorFamily};
use crate::tensor::Tensor;
use crate::Rng64;

/// Generator whose hidden layers compute
/// `act((x W + b) * (1 + e A_l) + e B_l)` for class embedding `e`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalGenerator {
    /// One row per class.
    pub embeddings: Tensor,
    pub backbone: DenseNetwork,
    /// `A_l`, embedding dim by layer width, one per hidden layer.
    pub scale: Vec<Tensor>,
    /// `B_l`, same shapes as `scale`.
    pub shift: Vec<Tensor>,
    pub prior: PriorSpec,
    /// Consulted by the optimizer only.
    pub frozen: bool,
}

/// Graph handles for a conditional generator.
#[derive(Debug, Clone)]
pub struct BoundConditional {
    embeddings: NodeId,
    backbone: BoundNetwork,
    scale: Vec<NodeId>,
    shift: Vec<NodeId>,
}

impl BoundConditional {
    pub fn embeddings(&self) -> NodeId {
        self.embeddings
    }

    /// Gradients in the order of [`ConditionalGenerator::params`].
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        let mut out = vec![grads.get(self.embeddings)];
        out.extend(self.backbone.param_grads(grads));
        out.extend(self.scale.iter().map(|&n| grads.get(n)));
        out.extend(self.shift.iter().map(|&n| grads.get(n)));
        out
    }
}

impl ConditionalGenerator {
    pub fn new<R: Rng + ?Sized>(
        arch: &GanArch,
        classes: usize,
        embedding_dim: usize,
        data_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if classes == 0 || embedding_dim == 0 {
            return Err(Error::InvalidSpec("conditional generator needs classes and an embedding".into()));
        }
        let backbone = arch.generator(data_dim, rng)?;
        let embeddings = Tensor::randn(classes, embedding_dim, 1.0, rng);
        let std = 1.0 / (embedding_dim as f64).sqrt();
        let hidden: Vec<usize> = backbone.layers()[..backbone.depth() - 1]
            .iter()
            .map(Layer::output_dim)
            .collect();
        let scale = hidden.iter().map(|&w| Tensor::randn(embedding_dim, w, std, rng)).collect();
        let shift = hidden.iter().map(|&w| Tensor::randn(embedding_dim, w, std, rng)).collect();
        Ok(Self {
            embeddings,
            backbone,
            scale,
            shift,
            prior: PriorSpec::standard(arch.latent_dim),
            frozen: false,
        })
    }

    pub fn classes(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn latent_dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn output_dim(&self) -> usize {
        self.backbone.output_dim()
    }

    fn check(&self) -> Result<()> {
        let hidden = self.backbone.depth() - 1;
        if self.scale.len() != hidden || self.shift.len() != hidden {
            return Err(Error::dim("modulated layers", hidden, self.scale.len()));
        }
        for (l, layer) in self.backbone.layers()[..hidden].iter().enumerate() {
            for t in [&self.scale[l], &self.shift[l]] {
                if t.rows() != self.embedding_dim() || t.cols() != layer.output_dim() {
                    return Err(Error::dim(
                        format!("modulation of layer {l}"),
                        format!("{}x{}", self.embedding_dim(), layer.output_dim()),
                        format!("{}x{}", t.rows(), t.cols()),
                    ));
                }
            }
        }
        if self.backbone.input_dim() != self.prior.dim() {
            return Err(Error::Integrity("generator input does not match prior".into()));
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.embeddings];
        p.extend(self.backbone.params());
        p.extend(self.scale.iter());
        p.extend(self.shift.iter());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.embeddings];
        p.extend(self.backbone.params_mut());
        p.extend(self.scale.iter_mut());
        p.extend(self.shift.iter_mut());
        p
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn feed_hash(&self, h: &mut Sha256) {
        for t in self.params() {
            t.feed_hash(h);
        }
    }

    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        self.feed_hash(&mut h);
        hex::encode(h.finalize())
    }

    pub fn bind(&self, g: &mut Graph) -> BoundConditional {
        BoundConditional {
            embeddings: g.variable(self.embeddings.clone()),
            backbone: self.backbone.bind(g),
            scale: self.scale.iter().map(|t| g.variable(t.clone())).collect(),
            shift: self.shift.iter().map(|t| g.variable(t.clone())).collect(),
        }
    }

    /// Forward pass with one embedding row per latent row.
    pub fn forward(&self, g: &mut Graph, bound: &BoundConditional, z: NodeId, e: NodeId) -> Result<NodeId> {
        self.check_batch(g.value(z), g.value(e))?;
        let layers = bound.backbone.layer_nodes();
        let acts = bound.backbone.activations();
        let mut h = z;
        for (l, (&(w, b), &act)) in layers.iter().zip(acts).enumerate() {
            let x = g.matmul(h, w)?;
            let mut x = g.add_bias(x, b)?;
            if l < bound.scale.len() {
                let s = g.matmul(e, bound.scale[l])?;
                let s = g.add_scalar(s, 1.0)?;
                x = g.mul(x, s)?;
                let t = g.matmul(e, bound.shift[l])?;
                x = g.add(x, t)?;
            }
            h = act.on_graph(g, x)?;
        }
        Ok(h)
    }

    fn check_batch(&self, z: &Tensor, e: &Tensor) -> Result<()> {
        if z.cols() != self.latent_dim() {
            return Err(Error::dim("conditional latent", self.latent_dim(), z.cols()));
        }
        if e.cols() != self.embedding_dim() {
            return Err(Error::dim("class embedding", self.embedding_dim(), e.cols()));
        }
        if e.rows() != z.rows() {
            return Err(Error::dim("embedding rows", z.rows(), e.rows()));
        }
        Ok(())
    }

    /// Graph-free forward pass; matches [`Self::forward`] bit for bit.
    pub fn infer(&self, z: &Tensor, e: &Tensor) -> Result<Tensor> {
        self.check_batch(z, e)?;
        let mut h = z.as_matrix();
        for (l, layer) in self.backbone.layers().iter().enumerate() {
            let mut x = h.matmul(&layer.weight)?;
            let m = x.cols();
            for (k, v) in x.data_mut().iter_mut().enumerate() {
                *v += layer.bias.data()[k % m];
            }
            if l < self.scale.len() {
                let s = e.matmul(&self.scale[l])?.map(|v| v + 1.0);
                let t = e.matmul(&self.shift[l])?;
                x = x.zip_map(&s, |a, b| a * b).zip_map(&t, |a, b| a + b);
            }
            let act = layer.activation;
            x = x.map(|v| act.apply(v));
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("conditional layer {l} output"),
                });
            }
            h = x;
        }
        Ok(h)
    }

    /// Class-conditional generation through the embedding table.
    pub fn generate_class(&self, z: &Tensor, classes: &[usize]) -> Result<Tensor> {
        if let Some(&c) = classes.iter().find(|&&c| c >= self.classes()) {
            return Err(Error::dim("class index", format!("< {}", self.classes()), c));
        }
        self.infer(z, &self.embeddings.gather_rows(classes))
    }

    pub fn write_into(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.push_tensor(format!("{prefix}embeddings"), self.embeddings.clone());
        ck.put_network(&format!("{prefix}backbone"), &self.backbone);
        ck.set_meta(format!("{prefix}modulated"), self.scale.len());
        for (l, (a, b)) in self.scale.iter().zip(&self.shift).enumerate() {
            ck.push_tensor(format!("{prefix}scale{l}"), a.clone());
            ck.push_tensor(format!("{prefix}shift{l}"), b.clone());
        }
        ck.push_tensor(format!("{prefix}prior.mean"), Tensor::row_vector(self.prior.mean().to_vec()));
        ck.push_tensor(format!("{prefix}prior.var"), Tensor::row_vector(self.prior.var().to_vec()));
    }

    pub fn read_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let n: usize = ck.meta_parse(&format!("{prefix}modulated"))?;
        let gen = Self {
            embeddings: ck.tensor(&format!("{prefix}embeddings"))?.clone(),
            backbone: ck.network(&format!("{prefix}backbone"))?,
            scale: (0..n)
                .map(|l| ck.tensor(&format!("{prefix}scale{l}")).cloned())
                .collect::<Result<_>>()?,
            shift: (0..n)
                .map(|l| ck.tensor(&format!("{prefix}shift{l}")).cloned())
                .collect::<Result<_>>()?,
            prior: PriorSpec::new(
                ck.tensor(&format!("{prefix}prior.mean"))?.data().to_vec(),
                ck.tensor(&format!("{prefix}prior.var"))?.data().to_vec(),
            )?,
            frozen: false,
        };
        gen.check().map_err(|e| Error::Integrity(e.to_string()))?;
        Ok(gen)
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(labels.len(), classes);
    for (r, &c) in labels.iter().enumerate() {
        t.set(r, c, 1.0);
    }
    t
}

/// A pretrained conditional source: generator plus a critic that sees
/// `x ⊕ onehot(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalGan {
    pub generator: ConditionalGenerator,
    pub critic: DenseNetwork,
    pub iterations: usize,
    pub seed: u64,
    pub dataset: String,
}

impl ConditionalGan {
    pub fn classes(&self) -> usize {
        self.generator.classes()
    }

    pub fn data_dim(&self) -> usize {
        self.generator.output_dim()
    }

    /// Mining critic: the source critic with the label inputs removed.
    pub fn unconditional_critic(&self) -> Result<DenseNetwork> {
        strip_label_inputs(&self.critic, self.data_dim())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(ComponentTag::Conditional);
        ck.set_meta("kind", "gan");
        self.generator.write_into(&mut ck, "cond.");
        ck.put_network("critic", &self.critic);
        ck.set_meta("iterations", self.iterations);
        ck.set_meta("seed", self.seed);
        ck.set_meta("dataset", &self.dataset);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        expect_kind(ck, "gan")?;
        Ok(Self {
            generator: ConditionalGenerator::read_from(ck, "cond.")?,
            critic: ck.network("critic")?,
            iterations: ck.meta_parse("iterations")?,
            seed: ck.meta_parse("seed")?,
            dataset: ck.meta("dataset")?.to_string(),
        })
    }
}

/// Classes are drawn uniformly per row.
impl Generative for ConditionalGan {
    fn generate(&self, n: usize, seed: u64) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::Usage("sample count must be at least 1".into()));
        }
        let mut rng = crate::rng(seed);
        let z = self.generator.prior.sample(n, &mut rng);
        let classes: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.classes())).collect();
        self.generator.generate_class(&z, &classes)
    }
}

fn expect_kind(ck: &Checkpoint, kind: &str) -> Result<()> {
    if ck.tag != ComponentTag::Conditional {
        return Err(Error::Integrity(format!("expected a conditional checkpoint, found {}", ck.tag.name())));
    }
    let found = ck.meta("kind")?;
    if found != kind {
        return Err(Error::Integrity(format!("expected conditional `{kind}`, found `{found}`")));
    }
    Ok(())
}

/// Copy of `critic` whose first layer only reads the first `data_dim` inputs.
pub fn strip_label_inputs(critic: &DenseNetwork, data_dim: usize) -> Result<DenseNetwork> {
    if critic.input_dim() < data_dim {
        return Err(Error::dim("critic input", format!(">= {data_dim}"), critic.input_dim()));
    }
    let mut layers = critic.layers().to_vec();
    let first = &layers[0];
    let keep: Vec<usize> = (0..data_dim).collect();
    layers[0] = Layer::new(first.weight.gather_rows(&keep), first.bias.clone(), first.activation)?;
    DenseNetwork::from_layers(layers)
}

/// Pretrains a conditional GAN on a labeled mixture, one class per
/// component. Initialization and batches share one generator seeded with
/// `config.seed`.
pub fn pretrain_conditional(
    config: &TrainConfig,
    arch: &GanArch,
    embedding_dim: usize,
    data: &MixtureSpec,
    sink: MetricSink<'_>,
) -> Result<ConditionalGan> {
    config.validate()?;
    let classes = data.components().len();
    let d = data.dim();
    let mut rng = crate::rng(config.seed);
    let generator = ConditionalGenerator::new(arch, classes, embedding_dim, d, &mut rng)?;
    let critic = arch.critic(d + classes, &mut rng)?;
    let mut model = ConditionalGan {
        generator,
        critic,
        iterations: 0,
        seed: config.seed,
        dataset: data.to_text(),
    };
    let mut adam_g = AdamState::new(config.adam(config.lr_generator), model.generator.params());
    let mut adam_d = AdamState::for_network(config.adam(config.lr_critic), &model.critic);
    let k = config.batch_size;
    for it in 0..config.iterations {
        let mut step = || -> Result<MetricRecord> {
            let mut stats = CriticStats::default();
            for _ in 0..config.n_critic {
                let (real, labels) = data.sample_labeled(k, &mut rng);
                let z = model.generator.prior.sample(k, &mut rng);
                let alphas = uniform_alphas(k, &mut rng);
                let fake = model.generator.generate_class(&z, &labels)?;
                let hot = one_hot(&labels, classes);
                stats = critic_step(
                    &mut model.critic,
                    &mut adam_d,
                    &Tensor::hstack(&[real, hot.clone()])?,
                    &Tensor::hstack(&[fake, hot])?,
                    &alphas,
                    config.gp_weight,
                )?;
            }
            let (_, labels) = data.sample_labeled(k, &mut rng);
            let z = model.generator.prior.sample(k, &mut rng);
            let mut g = Graph::new();
            let bg = model.generator.bind(&mut g);
            let bd = model.critic.bind(&mut g);
            let zn = g.constant(z);
            let hot = g.constant(one_hot(&labels, classes));
            let e = g.gather_rows(bg.embeddings(), labels)?;
            let fake = model.generator.forward(&mut g, &bg, zn, e)?;
            let input = g.hstack(vec![fake, hot])?;
            let s = bd.forward(&mut g, input)?;
            let m = g.mean(s)?;
            let loss = g.neg(m)?;
            let gen_loss = g.value(loss).item();
            let grads = g.backward(loss)?;
            adam_g.step(&mut model.generator.params_mut(), &bg.param_grads(&grads))?;
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
    Ok(model)
}

/// `M_z` (residual, latent to latent) and `M_c` (latent to embedding, no
/// residual path and a linear output).
#[derive(Debug, Clone, PartialEq)]
pub struct DualMiner {
    pub latent: MinerNetwork,
    pub class: DenseNetwork,
}

impl DualMiner {
    pub fn new<R: Rng + ?Sized>(
        latent_dim: usize,
        embedding_dim: usize,
        depth: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            latent: MinerNetwork::new(latent_dim, depth, width, rng)?,
            class: MinerNetwork::with_output(latent_dim, embedding_dim, depth, width, rng)?.net,
        })
    }

    /// `(M_z(u), M_c(u))`.
    pub fn infer(&self, u: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.latent.infer(u)?, self.class.infer(u)?))
    }

    /// Sets `M_c` to the constant map onto `embedding`.
    pub fn pin_class(&mut self, embedding: &[f64]) -> Result<()> {
        let last = self.class.depth() - 1;
        if embedding.len() != self.class.output_dim() {
            return Err(Error::dim("pinned embedding", self.class.output_dim(), embedding.len()));
        }
        for (i, layer) in self.class.layers_mut().iter_mut().enumerate() {
            layer.weight.data_mut().fill(0.0);
            if i == last {
                layer.bias.data_mut().copy_from_slice(embedding);
            } else {
                layer.bias.data_mut().fill(0.0);
            }
        }
        Ok(())
    }
}

/// `G(M_z(u), M_c(u))`: the class embedding comes from `M_c`, not the table.
pub fn cond_forward(gen: &ConditionalGenerator, dual: &DualMiner, u: &Tensor) -> Result<Tensor> {
    if u.cols() != gen.latent_dim() {
        return Err(Error::dim("dual miner input", gen.latent_dim(), u.cols()));
    }
    if dual.class.output_dim() != gen.embedding_dim() {
        return Err(Error::dim("M_c output", gen.embedding_dim(), dual.class.output_dim()));
    }
    let (z, e) = dual.infer(u)?;
    gen.infer(&z, &e)
}

/// Dual-miner transfer state for one conditional source.
#[derive(Debug, Clone, PartialEq)]
pub struct CondMiningRun {
    pub generator: ConditionalGenerator,
    pub critic: DenseNetwork,
    pub dual: DualMiner,
    pub target: SampleSet,
    pub stage: Stage,
    pub mine_iterations: usize,
    pub finetune_iterations: usize,
    pub source_generator_hash: String,
    pub seed: u64,
}

impl CondMiningRun {
    pub fn new(source: &ConditionalGan, target: SampleSet, depth: usize, width: usize, seed: u64) -> Result<Self> {
        if target.is_empty() {
            return Err(Error::Usage("target set is empty".into()));
        }
        if target.dim() != source.data_dim() {
            return Err(Error::dim("target samples", source.data_dim(), target.dim()));
        }
        let mut rng = crate::rng(crate::derive_seed(seed, STREAM_MINER_INIT));
        let g = &source.generator;
        Ok(Self {
            dual: DualMiner::new(g.latent_dim(), g.embedding_dim(), depth, width, &mut rng)?,
            critic: source.unconditional_critic()?,
            source_generator_hash: g.param_hash(),
            generator: g.clone(),
            target,
            stage: Stage::Initialized,
            mine_iterations: 0,
            finetune_iterations: 0,
            seed,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(ComponentTag::Conditional);
        ck.set_meta("kind", "dual");
        self.generator.write_into(&mut ck, "cond.");
        ck.put_network("critic", &self.critic);
        ck.put_network("miner_z", &self.dual.latent.net);
        ck.put_network("miner_c", &self.dual.class);
        ck.push_tensor("target", self.target.points.clone());
        ck.set_meta("target_seed", self.target.seed.map_or("none".into(), |s| s.to_string()));
        ck.set_meta("stage", self.stage);
        ck.set_meta("mine_iterations", self.mine_iterations);
        ck.set_meta("finetune_iterations", self.finetune_iterations);
        ck.set_meta("source_generator_hash", &self.source_generator_hash);
        ck.set_meta("seed", self.seed);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        expect_kind(ck, "dual")?;
        Ok(Self {
            generator: ConditionalGenerator::read_from(ck, "cond.")?,
            critic: ck.network("critic")?,
            dual: DualMiner {
                latent: MinerNetwork { net: ck.network("miner_z")? },
                class: ck.network("miner_c")?,
            },
            target: SampleSet::new(
                ck.tensor("target")?.clone(),
                Origin::Real,
                match ck.meta("target_seed")? {
                    "none" => None,
                    _ => Some(ck.meta_parse("target_seed")?),
                },
            ),
            stage: ck.meta("stage")?.parse()?,
            mine_iterations: ck.meta_parse("mine_iterations")?,
            finetune_iterations: ck.meta_parse("finetune_iterations")?,
            source_generator_hash: ck.meta("source_generator_hash")?.to_string(),
            seed: ck.meta_parse("seed")?,
        })
    }
}

impl Generative for CondMiningRun {
    fn generate(&self, n: usize, seed: u64) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::Usage("sample count must be at least 1".into()));
        }
        let u = self.generator.prior.sample(n, &mut crate::rng(seed));
        cond_forward(&self.generator, &self.dual, &u)
    }
}

/// Stage 1 for the dual miner: `M_z`, `M_c` and the critic train while the
/// generator, including its embedding table, stays fixed.
pub fn train_cond_miner(
    run: &mut CondMiningRun,
    config: &TrainConfig,
    iterations: usize,
    sink: MetricSink<'_>,
) -> Result<()> {
    let lr = (config.lr_miner, config.lr_critic, config.lr_generator);
    let mut rng = crate::rng(crate::derive_seed(config.seed, STREAM_STAGE1));
    run.generator.frozen = true;
    let out = dual_loop(run, config, iterations, lr, Stage::MineOnly, &mut rng, sink);
    run.generator.frozen = false;
    out?;
    if run.stage == Stage::Initialized {
        run.stage = Stage::MineOnly;
    }
    Ok(())
}

/// Stage 2 for the dual miner, with `G` and `D` at `lr_scale * lr_miner`.
pub fn finetune_cond(
    run: &mut CondMiningRun,
    config: &TrainConfig,
    iterations: usize,
    lr_scale: f64,
    sink: MetricSink<'_>,
) -> Result<()> {
    if run.stage == Stage::Initialized {
        return Err(Error::Usage("finetuning requires a completed mining stage".into()));
    }
    let reduced = lr_scale * config.lr_miner;
    let mut rng = crate::rng(crate::derive_seed(config.seed, STREAM_STAGE2));
    run.generator.frozen = false;
    dual_loop(run, config, iterations, (config.lr_miner, reduced, reduced), Stage::Full, &mut rng, sink)?;
    if iterations > 0 {
        run.stage = Stage::Full;
    }
    Ok(())
}

fn dual_objective(
    run: &CondMiningRun,
    g: &mut Graph,
    bound: (&BoundConditional, &BoundNetwork, &BoundNetwork, &BoundNetwork),
    u: Tensor,
) -> Result<NodeId> {
    let (bg, bz, bc, bd) = bound;
    let un = g.constant(u);
    let z = run.dual.latent.forward(g, bz, un)?;
    let e = bc.forward(g, un)?;
    let fake = run.generator.forward(g, bg, z, e)?;
    let s = bd.forward(g, fake)?;
    let m = g.mean(s)?;
    g.neg(m)
}

/// Learning rates are `(miner, critic, generator)`.
fn dual_loop(
    run: &mut CondMiningRun,
    config: &TrainConfig,
    iterations: usize,
    lr: (f64, f64, f64),
    stage: Stage,
    rng: &mut Rng64,
    sink: MetricSink<'_>,
) -> Result<()> {
    config.validate()?;
    let mut adam_z = AdamState::for_network(config.adam(lr.0), &run.dual.latent.net);
    let mut adam_c = AdamState::for_network(config.adam(lr.0), &run.dual.class);
    let mut adam_d = AdamState::for_network(config.adam(lr.1), &run.critic);
    let mut adam_g = AdamState::new(config.adam(lr.2), run.generator.params());
    let k = config.batch_size;
    let stage_name = stage.to_string();
    for it in 0..iterations {
        let mut step = || -> Result<MetricRecord> {
            let mut stats = CriticStats::default();
            for _ in 0..config.n_critic {
                let real = run.target.sample_batch(k, rng);
                let u = run.generator.prior.sample(k, rng);
                let alphas = uniform_alphas(k, rng);
                let fake = cond_forward(&run.generator, &run.dual, &u)?;
                stats = critic_step(&mut run.critic, &mut adam_d, &real, &fake, &alphas, config.gp_weight)?;
            }
            let u = run.generator.prior.sample(k, rng);
            let mut g = Graph::new();
            let bg = run.generator.bind(&mut g);
            let bz = run.dual.latent.net.bind(&mut g);
            let bc = run.dual.class.bind(&mut g);
            let bd = run.critic.bind(&mut g);
            let loss = dual_objective(run, &mut g, (&bg, &bz, &bc, &bd), u)?;
            let gen_loss = g.value(loss).item();
            let grads = g.backward(loss)?;
            adam_z.step_network(&mut run.dual.latent.net, &bz.param_grads(&grads))?;
            adam_c.step_network(&mut run.dual.class, &bc.param_grads(&grads))?;
            if !run.generator.frozen {
                adam_g.step(&mut run.generator.params_mut(), &bg.param_grads(&grads))?;
            }
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

/// Each class becomes one generator view of a shared backbone, ready for
/// multi-generator mining. The shared critic is the label-stripped source
/// critic.
pub fn as_family(source: &ConditionalGan, target: SampleSet, config: &FamilyConfig) -> Result<GeneratorFamily> {
    let bank = GeneratorBank::ClassViews {
        generator: source.generator.clone(),
        classes: (0..source.classes()).collect(),
    };
    let fam_config = FamilyConfig { critic_source: 0, ..*config };
    GeneratorFamily::assemble(bank, source.unconditional_critic()?, target, &fam_config)
}

/// Index of the embedding row with the highest cosine similarity to `v`.
pub fn nearest_embedding(gen: &ConditionalGenerator, v: &[f64]) -> usize {
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let cos = |r: usize| {
        let row = gen.embeddings.row(r);
        let dot: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
        dot / (norm(row) * norm(v)).max(f64::MIN_POSITIVE)
    };
    let sims: Vec<f64> = (0..gen.classes()).map(cos).collect();
    crate::multimine::argmax(&sims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multimine::{train_multi, FamilyConfig};
    use crate::Selection;

    fn arch() -> GanArch {
        GanArch { latent_dim: 4, gen_width: 16, gen_depth: 3, critic_width: 16, critic_depth: 2 }
    }

    fn source(seed: u64) -> ConditionalGan {
        let data = MixtureSpec::parse("0.25@-2,0:0.01 | 0.25@0,2:0.01 | 0.5@2,0:0.01").unwrap();
        let cfg = TrainConfig { iterations: 3, batch_size: 8, seed, ..TrainConfig::default() };
        pretrain_conditional(&cfg, &arch(), 5, &data, &mut |_| {}).unwrap()
    }

    fn target() -> SampleSet {
        MixtureSpec::gaussian(vec![2.0, 0.0], 0.01).unwrap().sample(30, 1).unwrap()
    }

    #[test]
    fn pinned_class_miner_matches_table_lookup() {
        let src = source(0);
        let gen = &src.generator;
        let mut dual = DualMiner::new(4, 5, 2, 4, &mut crate::rng(3)).unwrap();
        let u = gen.prior.sample(64, &mut crate::rng(4));
        for k in 0..gen.classes() {
            dual.pin_class(gen.embeddings.row(k)).unwrap();
            let mined = cond_forward(gen, &dual, &u).unwrap();
            let z = dual.latent.infer(&u).unwrap();
            let direct = gen.generate_class(&z, &vec![k; 64]).unwrap();
            assert_eq!(mined, direct, "class {k}");
        }
    }

    #[test]
    fn zero_embedding_is_the_plain_backbone() {
        let gen = source(1).generator;
        let z = gen.prior.sample(32, &mut crate::rng(0));
        let e = Tensor::zeros(32, gen.embedding_dim());
        assert_eq!(gen.infer(&z, &e).unwrap(), gen.backbone.infer(&z).unwrap());
    }

    #[test]
    fn graph_and_infer_agree() {
        let gen = source(2).generator;
        let z = gen.prior.sample(16, &mut crate::rng(0));
        let labels: Vec<usize> = (0..16).map(|i| i % 3).collect();
        let mut g = Graph::new();
        let b = gen.bind(&mut g);
        let zn = g.constant(z.clone());
        let e = g.gather_rows(b.embeddings(), labels.clone()).unwrap();
        let out = gen.forward(&mut g, &b, zn, e).unwrap();
        assert_eq!(g.value(out), &gen.generate_class(&z, &labels).unwrap());
    }

    #[test]
    fn fresh_dual_miner_is_near_unmodulated() {
        let src = source(3);
        let run = CondMiningRun::new(&src, target(), 2, 4, 0).unwrap();
        let u = run.generator.prior.sample(50, &mut crate::rng(7));
        let mined = cond_forward(&run.generator, &run.dual, &u).unwrap();
        let plain = run.generator.backbone.infer(&u).unwrap();
        assert!(mined.max_abs_diff(&plain) < 0.1, "{}", mined.max_abs_diff(&plain));
    }

    #[test]
    fn mining_critic_has_no_label_inputs() {
        let src = source(4);
        let c = src.unconditional_critic().unwrap();
        assert_eq!(c.input_dim(), 2);
        assert_eq!(src.critic.input_dim(), 5);
        assert_eq!(c.layers()[1..], src.critic.layers()[1..]);
    }

    #[test]
    fn mining_leaves_the_generator_alone() {
        let src = source(5);
        let mut run = CondMiningRun::new(&src, target(), 2, 4, 0).unwrap();
        let cfg = TrainConfig { batch_size: 8, ..TrainConfig::default() };
        let before = run.dual.clone();
        train_cond_miner(&mut run, &cfg, 5, &mut |_| {}).unwrap();
        assert_eq!(run.generator.param_hash(), run.source_generator_hash);
        assert_ne!(run.dual, before);
        assert_eq!(run.stage, Stage::MineOnly);
        finetune_cond(&mut run, &cfg, 2, 0.1, &mut |_| {}).unwrap();
        assert_ne!(run.generator.param_hash(), run.source_generator_hash);
    }

    #[test]
    fn family_views_share_one_backbone() {
        let src = source(6);
        let fc = FamilyConfig {
            miner_depth: 2,
            miner_width: 4,
            window: 50,
            critic_source: 0,
            selection: Selection::Max,
            seed: 0,
        };
        let mut fam = as_family(&src, target(), &fc).unwrap();
        assert_eq!(fam.len(), 3);
        let hashes = fam.bank.generator_hashes();
        assert!(hashes.iter().all(|h| h == &hashes[0]));
        let cfg = TrainConfig { batch_size: 8, ..TrainConfig::default() };
        train_multi(&mut fam, &cfg, 4, &mut |_| {}, &mut |_, _| {}).unwrap();
        assert_eq!(fam.bank.generator_hashes(), hashes);
        assert_eq!(hashes[0], src.generator.param_hash());
    }

    #[test]
    fn checkpoints_round_trip() {
        let src = source(7);
        let back = ConditionalGan::from_checkpoint(&Checkpoint::from_bytes(&src.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, src);
        let run = CondMiningRun::new(&src, target(), 2, 4, 9).unwrap();
        let back = CondMiningRun::from_checkpoint(&Checkpoint::from_bytes(&run.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, run);
        assert!(ConditionalGan::from_checkpoint(&run.to_checkpoint()).is_err());
    }

    #[test]
    fn nearest_embedding_by_cosine() {
        let gen = source(8).generator;
        for k in 0..gen.classes() {
            let v: Vec<f64> = gen.embeddings.row(k).iter().map(|x| 3.0 * x).collect();
            assert_eq!(nearest_embedding(&gen, &v), k);
        }
    }
}
