//! Mining from several pretrained generators at once.
//!
//! Every minibatch holds `K` supersamples, each with one fake per generator.
//! A single shared critic scores them; in max mode only the best-scoring
//! fake of each supersample carries gradient. How often each generator wins
//! is tracked over a sliding window of minibatches and becomes the sampling
//! distribution over generators at inference time.

use std::collections::VecDeque;

use rand::Rng;

use crate::autodiff::{AdamState, BoundNetwork, DenseNetwork, Graph, NodeId};
use crate::condmine::{BoundConditional, ConditionalGenerator};
use crate::datakit::{Checkpoint, ComponentTag, Origin, SampleSet, SampleSource, Selection, SelectorSnapshot};
use crate::error::{Error, Result};
use crate::eval::Generative;
use crate::gan::{
    critic_objective, critic_step, diverged, uniform_alphas, CriticStats, GanModel, MetricRecord,
    MetricSink, PriorSpec, TrainConfig,
};
use crate::miner::{MinerNetwork, Stage, STREAM_MINER_INIT, STREAM_STAGE1, STREAM_STAGE2};
use crate::tensor::Tensor;
use crate::Rng64;

/// One generator's contribution to a supersample.
#[derive(Debug, Clone, PartialEq)]
pub struct SupersampleEntry {
    pub generator: usize,
    pub latent: Vec<f64>,
    pub mined: Vec<f64>,
    pub output: Vec<f64>,
    pub score: f64,
}

/// Exactly one generated sample per generator, ordered by generator index.
#[derive(Debug, Clone, PartialEq)]
pub struct Supersample {
    pub entries: Vec<SupersampleEntry>,
}

impl Supersample {
    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    /// Index of the highest score; ties go to the lowest index.
    pub fn winner(&self) -> usize {
        argmax(&self.scores())
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Sliding window of per-minibatch win frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorState {
    capacity: usize,
    generators: usize,
    window: VecDeque<Vec<f64>>,
    probabilities: Vec<f64>,
    sealed: bool,
}

impl SelectorState {
    pub fn new(generators: usize, capacity: usize) -> Result<Self> {
        if generators == 0 || capacity == 0 {
            return Err(Error::InvalidSpec("selector needs generators and a non-empty window".into()));
        }
        Ok(Self {
            capacity,
            generators,
            window: VecDeque::with_capacity(capacity),
            probabilities: vec![1.0 / generators as f64; generators],
            sealed: false,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn generators(&self) -> usize {
        self.generators
    }

    pub fn window(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.window.iter()
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    /// Fixes the probabilities; further updates are rejected.
    pub fn seal(&mut self) {
        self.sealed = true;
    }

    pub(crate) fn unseal(&mut self) {
        self.sealed = false;
    }

    /// Current probabilities; uniform while the window is empty.
    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    /// Pushes the normalized win counts of one minibatch given its winners.
    pub fn push_winners(&mut self, winners: &[usize]) -> Result<()> {
        if self.sealed {
            return Err(Error::Usage("selector is sealed".into()));
        }
        if winners.is_empty() {
            return Err(Error::Usage("minibatch has no supersamples".into()));
        }
        let mut counts = vec![0.0; self.generators];
        for &w in winners {
            if w >= self.generators {
                return Err(Error::dim("winner index", format!("< {}", self.generators), w));
            }
            counts[w] += 1.0;
        }
        let k = winners.len() as f64;
        for c in &mut counts {
            *c /= k;
        }
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(counts);
        self.recompute();
        Ok(())
    }

    fn recompute(&mut self) {
        let mut p = vec![0.0; self.generators];
        for row in &self.window {
            for (acc, v) in p.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let total: f64 = p.iter().sum();
        for v in &mut p {
            *v /= total;
        }
        self.probabilities = p;
    }

    /// Draws a generator index with probability `p_i`.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let r: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in self.probabilities.iter().enumerate() {
            acc += p;
            if r < acc {
                return i;
            }
        }
        // r fell in the roundoff gap above the cumulative sum
        self.probabilities.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    pub fn snapshot(&self) -> SelectorSnapshot {
        SelectorSnapshot {
            capacity: self.capacity,
            generators: self.generators,
            window: self.window.iter().cloned().collect(),
            probabilities: self.probabilities.clone(),
            sealed: self.sealed,
        }
    }

    pub fn from_snapshot(s: &SelectorSnapshot) -> Result<Self> {
        let mut st = Self::new(s.generators, s.capacity)?;
        if s.window.len() > s.capacity || s.window.iter().any(|r| r.len() != s.generators) {
            return Err(Error::Integrity("selector window does not match its shape".into()));
        }
        if s.probabilities.len() != s.generators {
            return Err(Error::Integrity("selector probabilities do not match generator count".into()));
        }
        st.window = s.window.iter().cloned().collect();
        st.probabilities = s.probabilities.clone();
        st.sealed = s.sealed;
        Ok(st)
    }
}

/// Adds one minibatch of supersamples to the selector window.
pub fn selector_update(state: &mut SelectorState, supersamples: &[Supersample]) -> Result<()> {
    let winners: Vec<usize> = supersamples.iter().map(Supersample::winner).collect();
    state.push_winners(&winners)
}

pub fn selector_sample(state: &SelectorState, seed: u64) -> usize {
    state.sample_index(&mut crate::rng(seed))
}

/// The generators of a family.
#[derive(Debug, Clone, PartialEq)]
pub enum GeneratorBank {
    /// Separately pretrained models, each with its own prior.
    Independent(Vec<GanModel>),
    /// Fixed-class views of one conditional generator; all views share
    /// the backbone and embedding table.
    ClassViews {
        generator: ConditionalGenerator,
        classes: Vec<usize>,
    },
}

pub(crate) enum BoundBank {
    Independent(Vec<BoundNetwork>),
    Views(BoundConditional),
}

impl GeneratorBank {
    pub fn len(&self) -> usize {
        match self {
            GeneratorBank::Independent(m) => m.len(),
            GeneratorBank::ClassViews { classes, .. } => classes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn prior(&self, i: usize) -> &PriorSpec {
        match self {
            GeneratorBank::Independent(m) => &m[i].prior,
            GeneratorBank::ClassViews { generator, .. } => &generator.prior,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            GeneratorBank::Independent(m) => m[0].data_dim(),
            GeneratorBank::ClassViews { generator, .. } => generator.output_dim(),
        }
    }

    pub fn infer(&self, i: usize, z: &Tensor) -> Result<Tensor> {
        match self {
            GeneratorBank::Independent(m) => m[i].generator.infer(z),
            GeneratorBank::ClassViews { generator, classes } => {
                generator.generate_class(z, &vec![classes[i]; z.rows()])
            }
        }
    }

    pub(crate) fn bind(&self, g: &mut Graph) -> BoundBank {
        match self {
            GeneratorBank::Independent(m) => {
                BoundBank::Independent(m.iter().map(|m| m.generator.bind(g)).collect())
            }
            GeneratorBank::ClassViews { generator, .. } => BoundBank::Views(generator.bind(g)),
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, bound: &BoundBank, i: usize, z: NodeId) -> Result<NodeId> {
        match (self, bound) {
            (GeneratorBank::Independent(_), BoundBank::Independent(b)) => b[i].forward(g, z),
            (GeneratorBank::ClassViews { generator, classes }, BoundBank::Views(b)) => {
                let n = g.value(z).rows();
                let e = g.gather_rows(b.embeddings(), vec![classes[i]; n])?;
                generator.forward(g, b, z, e)
            }
            _ => unreachable!("bank bound by a different variant"),
        }
    }

    /// Hash of every generator parameter in the bank.
    pub fn param_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        match self {
            GeneratorBank::Independent(m) => m.iter().for_each(|m| m.generator.feed_hash(&mut h)),
            GeneratorBank::ClassViews { generator, .. } => generator.feed_hash(&mut h),
        }
        hex::encode(h.finalize())
    }

    /// Per-view hashes; class views of one generator all report the same one.
    pub fn generator_hashes(&self) -> Vec<String> {
        match self {
            GeneratorBank::Independent(m) => m.iter().map(|m| m.generator.param_hash()).collect(),
            GeneratorBank::ClassViews { generator, classes } => vec![generator.param_hash(); classes.len()],
        }
    }

    fn generator_param_count(&self) -> usize {
        match self {
            GeneratorBank::Independent(m) => m[0].generator.param_count(),
            GeneratorBank::ClassViews { generator, .. } => generator.param_count(),
        }
    }
}

/// Optimizer state for the generators during joint finetuning.
enum BankAdam {
    Independent(Vec<AdamState>),
    Views(AdamState),
}

impl BankAdam {
    fn new(bank: &GeneratorBank, config: crate::autodiff::AdamConfig) -> Self {
        match bank {
            GeneratorBank::Independent(m) => BankAdam::Independent(
                m.iter().map(|m| AdamState::for_network(config, &m.generator)).collect(),
            ),
            GeneratorBank::ClassViews { generator, .. } => {
                BankAdam::Views(AdamState::new(config, generator.params()))
            }
        }
    }

    /// Steps the generators in `update`; a shared backbone steps once if any
    /// of its views is included.
    fn step(&mut self, bank: &mut GeneratorBank, bound: &BoundBank, grads: &crate::autodiff::Gradients, update: &[bool]) -> Result<()> {
        match (self, bank, bound) {
            (BankAdam::Independent(adams), GeneratorBank::Independent(models), BoundBank::Independent(b)) => {
                for (i, m) in models.iter_mut().enumerate() {
                    if update[i] {
                        adams[i].step_network(&mut m.generator, &b[i].param_grads(grads))?;
                    }
                }
            }
            (BankAdam::Views(adam), GeneratorBank::ClassViews { generator, .. }, BoundBank::Views(b)) => {
                if update.iter().any(|&u| u) && !generator.frozen {
                    let g = b.param_grads(grads);
                    adam.step(&mut generator.params_mut(), &g)?;
                }
            }
            _ => unreachable!("optimizer built for a different bank"),
        }
        Ok(())
    }
}

/// Generators, their miners, the shared critic and the selector.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorFamily {
    pub bank: GeneratorBank,
    pub miners: Vec<MinerNetwork>,
    pub critic: DenseNetwork,
    /// Which source critic initialized `critic`.
    pub critic_source: usize,
    pub selector: SelectorState,
    pub selection: Selection,
    pub target: SampleSet,
    pub stage: Stage,
    pub mine_iterations: usize,
    pub finetune_iterations: usize,
    pub source_generator_hashes: Vec<String>,
    pub seed: u64,
}

/// Options for building a family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamilyConfig {
    pub miner_depth: usize,
    pub miner_width: usize,
    pub window: usize,
    pub critic_source: usize,
    pub selection: Selection,
    pub seed: u64,
}

impl GeneratorFamily {
    /// Family over independently pretrained models. The shared critic is a
    /// copy of `sources[config.critic_source].critic`.
    pub fn new(sources: Vec<GanModel>, target: SampleSet, config: &FamilyConfig) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Usage("a family needs at least one generator".into()));
        }
        let dim = sources[0].data_dim();
        if let Some(bad) = sources.iter().find(|m| m.data_dim() != dim) {
            return Err(Error::dim("family output dimension", dim, bad.data_dim()));
        }
        let critic = sources
            .get(config.critic_source)
            .ok_or_else(|| Error::config("critic_source", format!("index {} out of range", config.critic_source)))?
            .critic
            .clone();
        Self::assemble(GeneratorBank::Independent(sources), critic, target, config)
    }

    pub(crate) fn assemble(
        bank: GeneratorBank,
        critic: DenseNetwork,
        target: SampleSet,
        config: &FamilyConfig,
    ) -> Result<Self> {
        if bank.is_empty() {
            return Err(Error::Usage("a family needs at least one generator".into()));
        }
        if target.is_empty() {
            return Err(Error::Usage("target set is empty".into()));
        }
        if target.dim() != bank.output_dim() {
            return Err(Error::dim("target samples", bank.output_dim(), target.dim()));
        }
        let mut rng = crate::rng(crate::derive_seed(config.seed, STREAM_MINER_INIT));
        let miners = (0..bank.len())
            .map(|i| MinerNetwork::new(bank.prior(i).dim(), config.miner_depth, config.miner_width, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            selector: SelectorState::new(bank.len(), config.window)?,
            source_generator_hashes: bank.generator_hashes(),
            bank,
            miners,
            critic,
            critic_source: config.critic_source,
            selection: config.selection,
            target,
            stage: Stage::Initialized,
            mine_iterations: 0,
            finetune_iterations: 0,
            seed: config.seed,
        })
    }

    pub fn len(&self) -> usize {
        self.bank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bank.is_empty()
    }

    /// Fakes `G_i(M_i(u_i))` for every generator, without a graph.
    pub fn fakes(&self, latents: &[Tensor]) -> Result<Vec<Tensor>> {
        latents
            .iter()
            .enumerate()
            .map(|(i, u)| self.bank.infer(i, &self.miners[i].infer(u)?))
            .collect()
    }

    fn draw_latents(&self, k: usize, rng: &mut Rng64) -> Vec<Tensor> {
        (0..self.len()).map(|i| self.bank.prior(i).sample(k, rng)).collect()
    }

    /// `K` supersamples from per-generator latent batches (`K` rows each).
    pub fn supersamples(&self, latents: &[Tensor]) -> Result<Vec<Supersample>> {
        if latents.len() != self.len() {
            return Err(Error::dim("latent batches", self.len(), latents.len()));
        }
        let k = latents[0].rows();
        let fakes = self.fakes(latents)?;
        let mut scores = Vec::with_capacity(self.len());
        let mut mined = Vec::with_capacity(self.len());
        for (i, f) in fakes.iter().enumerate() {
            scores.push(self.critic.infer(f)?);
            mined.push(self.miners[i].infer(&latents[i])?);
        }
        Ok((0..k)
            .map(|r| Supersample {
                entries: (0..self.len())
                    .map(|i| SupersampleEntry {
                        generator: i,
                        latent: latents[i].row(r).to_vec(),
                        mined: mined[i].row(r).to_vec(),
                        output: fakes[i].row(r).to_vec(),
                        score: scores[i].data()[r],
                    })
                    .collect(),
            })
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(ComponentTag::Family);
        match &self.bank {
            GeneratorBank::Independent(models) => {
                ck.set_meta("bank", "independent");
                ck.set_meta("generators", models.len());
                for (i, m) in models.iter().enumerate() {
                    m.write_into(&mut ck, &format!("g{i}."));
                }
            }
            GeneratorBank::ClassViews { generator, classes } => {
                ck.set_meta("bank", "class_views");
                ck.set_meta("generators", classes.len());
                ck.set_meta(
                    "classes",
                    classes.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
                );
                generator.write_into(&mut ck, "cond.");
            }
        }
        for (i, m) in self.miners.iter().enumerate() {
            ck.put_network(&format!("miner{i}"), &m.net);
        }
        ck.put_network("critic", &self.critic);
        ck.push_tensor("target", self.target.points.clone());
        ck.set_meta("target_seed", self.target.seed.map_or("none".into(), |s| s.to_string()));
        ck.set_meta("critic_source", self.critic_source);
        ck.set_meta("selection", self.selection);
        ck.set_meta("stage", self.stage);
        ck.set_meta("mine_iterations", self.mine_iterations);
        ck.set_meta("finetune_iterations", self.finetune_iterations);
        ck.set_meta("source_generator_hashes", self.source_generator_hashes.join(","));
        ck.set_meta("seed", self.seed);
        ck.selector = Some(self.selector.snapshot());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.tag != ComponentTag::Family {
            return Err(Error::Integrity(format!("expected a family checkpoint, found {}", ck.tag.name())));
        }
        let n: usize = ck.meta_parse("generators")?;
        let bank = match ck.meta("bank")? {
            "independent" => GeneratorBank::Independent(
                (0..n)
                    .map(|i| GanModel::read_from(ck, &format!("g{i}.")))
                    .collect::<Result<_>>()?,
            ),
            "class_views" => GeneratorBank::ClassViews {
                generator: ConditionalGenerator::read_from(ck, "cond.")?,
                classes: ck
                    .meta("classes")?
                    .split(',')
                    .map(|c| c.parse().map_err(|_| Error::Integrity(format!("bad class `{c}`"))))
                    .collect::<Result<_>>()?,
            },
            other => return Err(Error::Integrity(format!("unknown bank `{other}`"))),
        };
        let selection = match ck.meta("selection")? {
            "max" => Selection::Max,
            "mean" => Selection::Mean,
            other => return Err(Error::Integrity(format!("unknown selection `{other}`"))),
        };
        let snapshot = ck
            .selector
            .as_ref()
            .ok_or_else(|| Error::Integrity("family checkpoint lacks a selector".into()))?;
        Ok(Self {
            miners: (0..n)
                .map(|i| ck.network(&format!("miner{i}")).map(|net| MinerNetwork { net }))
                .collect::<Result<_>>()?,
            critic: ck.network("critic")?,
            critic_source: ck.meta_parse("critic_source")?,
            selector: SelectorState::from_snapshot(snapshot)?,
            selection,
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
            source_generator_hashes: ck
                .meta("source_generator_hashes")?
                .split(',')
                .map(String::from)
                .collect(),
            seed: ck.meta_parse("seed")?,
            bank,
        })
    }

    /// Ratio of one miner's parameters to one generator's.
    pub fn miner_param_ratio(&self) -> f64 {
        self.miners[0].param_count() as f64 / self.bank.generator_param_count() as f64
    }
}

impl Generative for GeneratorFamily {
    /// Picks a generator per row from the selector, then samples it.
    fn generate(&self, n: usize, seed: u64) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::Usage("sample count must be at least 1".into()));
        }
        let mut rng = crate::rng(seed);
        let picks: Vec<usize> = (0..n).map(|_| self.selector.sample_index(&mut rng)).collect();
        let mut out = Tensor::zeros(n, self.bank.output_dim());
        for i in 0..self.len() {
            let rows: Vec<usize> = (0..n).filter(|&r| picks[r] == i).collect();
            if rows.is_empty() {
                continue;
            }
            let u = self.bank.prior(i).sample(rows.len(), &mut rng);
            let x = self.bank.infer(i, &self.miners[i].infer(&u)?)?;
            for (k, &r) in rows.iter().enumerate() {
                for (j, v) in x.row(k).iter().enumerate() {
                    out.set(r, j, *v);
                }
            }
        }
        Ok(out)
    }
}

/// A single supersample drawn with `seed`.
pub fn make_supersample(family: &GeneratorFamily, seed: u64) -> Result<Supersample> {
    let mut rng = crate::rng(seed);
    let latents = family.draw_latents(1, &mut rng);
    Ok(family.supersamples(&latents)?.remove(0))
}

fn latents_of(family: &GeneratorFamily, supersamples: &[Supersample]) -> Result<Vec<Tensor>> {
    if supersamples.is_empty() {
        return Err(Error::Usage("need at least one supersample".into()));
    }
    (0..family.len())
        .map(|i| {
            let rows: Vec<Vec<f64>> = supersamples
                .iter()
                .map(|s| {
                    s.entries
                        .get(i)
                        .filter(|e| e.generator == i)
                        .map(|e| e.latent.clone())
                        .ok_or_else(|| Error::InvalidSpec(format!("supersample lacks generator {i}")))
                })
                .collect::<Result<_>>()?;
            Tensor::from_rows(&rows)
        })
        .collect()
}

/// Fake, real and interpolation batches for one critic evaluation.
struct CriticBatch {
    fake: Tensor,
    real: Tensor,
    alphas: Tensor,
}

fn critic_batch(
    family: &GeneratorFamily,
    fakes: Vec<Tensor>,
    real: &Tensor,
    alphas: Tensor,
) -> Result<CriticBatch> {
    match family.selection {
        Selection::Max => {
            let scores = fakes
                .iter()
                .map(|f| family.critic.infer(f))
                .collect::<Result<Vec<_>>>()?;
            let k = real.rows();
            let d = fakes[0].cols();
            let mut fake = Tensor::zeros(k, d);
            for r in 0..k {
                let row: Vec<f64> = scores.iter().map(|s| s.data()[r]).collect();
                let w = argmax(&row);
                for j in 0..d {
                    fake.set(r, j, fakes[w].get(r, j));
                }
            }
            Ok(CriticBatch {
                fake,
                real: real.clone(),
                alphas,
            })
        }
        Selection::Mean => {
            let n = fakes.len();
            Ok(CriticBatch {
                fake: Tensor::vstack(&fakes)?,
                real: Tensor::vstack(&vec![real.clone(); n])?,
                alphas: Tensor::vstack(&vec![alphas; n])?,
            })
        }
    }
}

/// Shared-critic loss over `K` supersamples. In max mode the fake term is
/// the mean over supersamples of the best score, and the penalty
/// interpolates targets with the winning fakes. In mean mode every fake
/// counts and each target is paired with every generator's fake.
pub fn multi_critic_loss(
    family: &GeneratorFamily,
    supersamples: &[Supersample],
    target: &Tensor,
    lambda: f64,
    rng: &mut Rng64,
) -> Result<f64> {
    let latents = latents_of(family, supersamples)?;
    if target.rows() != supersamples.len() {
        return Err(Error::dim("target batch size", supersamples.len(), target.rows()));
    }
    let alphas = uniform_alphas(target.rows(), rng);
    let batch = critic_batch(family, family.fakes(&latents)?, target, alphas)?;
    let mut g = Graph::new();
    let bd = family.critic.bind(&mut g);
    let r = g.constant(batch.real);
    let f = g.constant(batch.fake);
    let terms = critic_objective(&mut g, &bd, r, f, &batch.alphas, lambda)?;
    Ok(g.value(terms.loss).item())
}

/// Miner objective on `g` and the winning generator per supersample.
fn miner_objective(
    family: &GeneratorFamily,
    g: &mut Graph,
    critic: &BoundNetwork,
    bank: &BoundBank,
    miners: &[BoundNetwork],
    latents: &[Tensor],
) -> Result<(NodeId, Vec<usize>)> {
    let mut scores = Vec::with_capacity(family.len());
    for (i, u) in latents.iter().enumerate() {
        let un = g.constant(u.clone());
        let mu = family.miners[i].forward(g, &miners[i], un)?;
        let fake = family.bank.forward(g, bank, i, mu)?;
        scores.push(critic.forward(g, fake)?);
    }
    let stacked = g.hstack(scores)?;
    let values = g.value(stacked).clone();
    let winners: Vec<usize> = (0..values.rows()).map(|r| argmax(values.row(r))).collect();
    let m = match family.selection {
        Selection::Max => {
            let mut mask = Tensor::zeros(values.rows(), values.cols());
            for (r, &w) in winners.iter().enumerate() {
                mask.set(r, w, 1.0);
            }
            let masked = g.mul_const(stacked, mask)?;
            let best = g.sum_cols(masked)?;
            g.mean(best)?
        }
        Selection::Mean => g.mean(stacked)?,
    };
    Ok((g.neg(m)?, winners))
}

/// `-E[max_i D(G_i(M_i(u_i)))]` (or the mean over generators in mean mode).
pub fn multi_miner_loss(family: &GeneratorFamily, supersamples: &[Supersample]) -> Result<f64> {
    let latents = latents_of(family, supersamples)?;
    let mut g = Graph::new();
    let bd = family.critic.bind(&mut g);
    let bb = family.bank.bind(&mut g);
    let bm: Vec<BoundNetwork> = family.miners.iter().map(|m| m.net.bind(&mut g)).collect();
    let (loss, _) = miner_objective(family, &mut g, &bd, &bb, &bm, &latents)?;
    Ok(g.value(loss).item())
}

/// One miner update on fixed latents; returns the winners. Exposed for
/// tests of the selective-gradient contract.
pub fn miner_step(
    family: &mut GeneratorFamily,
    latents: &[Tensor],
    adams: &mut [AdamState],
) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let bd = family.critic.bind(&mut g);
    let bb = family.bank.bind(&mut g);
    let bm: Vec<BoundNetwork> = family.miners.iter().map(|m| m.net.bind(&mut g)).collect();
    let (loss, winners) = miner_objective(family, &mut g, &bd, &bb, &bm, latents)?;
    let grads = g.backward(loss)?;
    let update = update_set(family.selection, family.len(), &winners);
    for (i, m) in family.miners.iter_mut().enumerate() {
        if update[i] {
            adams[i].step_network(&mut m.net, &bm[i].param_grads(&grads))?;
        }
    }
    Ok(winners)
}

fn update_set(selection: Selection, n: usize, winners: &[usize]) -> Vec<bool> {
    match selection {
        Selection::Mean => vec![true; n],
        Selection::Max => {
            let mut u = vec![false; n];
            for &w in winners {
                u[w] = true;
            }
            u
        }
    }
}

/// Receives `(iteration, probabilities)` after every selector update.
pub type SelectorTrace<'a> = &'a mut dyn FnMut(usize, &[f64]);

/// Stage 1 for a family: miners and shared critic train, generators stay
/// frozen. The selector is unsealed while training and sealed afterwards.
pub fn train_multi(
    family: &mut GeneratorFamily,
    config: &TrainConfig,
    iterations: usize,
    sink: MetricSink<'_>,
    trace: SelectorTrace<'_>,
) -> Result<()> {
    let lr = (config.lr_miner, config.lr_critic, config.lr_generator);
    let mut rng = crate::rng(crate::derive_seed(config.seed, STREAM_STAGE1));
    family_loop(family, config, iterations, lr, Stage::MineOnly, &mut rng, sink, trace)?;
    if family.stage == Stage::Initialized {
        family.stage = Stage::MineOnly;
    }
    Ok(())
}

/// Stage 2 for a family: winning generators are finetuned along with their
/// miners and the critic, with `G` and `D` at `lr_scale * lr_miner`.
pub fn finetune_multi(
    family: &mut GeneratorFamily,
    config: &TrainConfig,
    iterations: usize,
    lr_scale: f64,
    sink: MetricSink<'_>,
    trace: SelectorTrace<'_>,
) -> Result<()> {
    if family.stage == Stage::Initialized {
        return Err(Error::Usage("finetuning requires a completed mining stage".into()));
    }
    let reduced = lr_scale * config.lr_miner;
    let mut rng = crate::rng(crate::derive_seed(config.seed, STREAM_STAGE2));
    family_loop(family, config, iterations, (config.lr_miner, reduced, reduced), Stage::Full, &mut rng, sink, trace)?;
    if iterations > 0 {
        family.stage = Stage::Full;
    }
    Ok(())
}

fn set_bank_frozen(bank: &mut GeneratorBank, frozen: bool) {
    match bank {
        GeneratorBank::Independent(m) => m.iter_mut().for_each(|m| m.generator.frozen = frozen),
        GeneratorBank::ClassViews { generator, .. } => generator.frozen = frozen,
    }
}

/// Learning rates are `(miner, critic, generator)`.
#[allow(clippy::too_many_arguments)]
fn family_loop(
    family: &mut GeneratorFamily,
    config: &TrainConfig,
    iterations: usize,
    lr: (f64, f64, f64),
    stage: Stage,
    rng: &mut Rng64,
    sink: MetricSink<'_>,
    trace: SelectorTrace<'_>,
) -> Result<()> {
    config.validate()?;
    let train_generators = stage == Stage::Full;
    set_bank_frozen(&mut family.bank, !train_generators);
    family.selector.unseal();
    let mut adam_m: Vec<AdamState> = family
        .miners
        .iter()
        .map(|m| AdamState::for_network(config.adam(lr.0), &m.net))
        .collect();
    let mut adam_d = AdamState::for_network(config.adam(lr.1), &family.critic);
    let mut adam_g = BankAdam::new(&family.bank, config.adam(lr.2));
    let k = config.batch_size;
    let stage_name = stage.to_string();
    let mut result = Ok(());
    for it in 0..iterations {
        let mut step = || -> Result<MetricRecord> {
            let mut stats = CriticStats::default();
            for _ in 0..config.n_critic {
                let real = family.target.sample_batch(k, rng);
                let latents = family.draw_latents(k, rng);
                let alphas = uniform_alphas(k, rng);
                let batch = critic_batch(family, family.fakes(&latents)?, &real, alphas)?;
                stats = critic_step(
                    &mut family.critic,
                    &mut adam_d,
                    &batch.real,
                    &batch.fake,
                    &batch.alphas,
                    config.gp_weight,
                )?;
            }
            let latents = family.draw_latents(k, rng);
            let mut g = Graph::new();
            let bd = family.critic.bind(&mut g);
            let bb = family.bank.bind(&mut g);
            let bm: Vec<BoundNetwork> = family.miners.iter().map(|m| m.net.bind(&mut g)).collect();
            let (loss, winners) = miner_objective(family, &mut g, &bd, &bb, &bm, &latents)?;
            let gen_loss = g.value(loss).item();
            let grads = g.backward(loss)?;
            let update = update_set(family.selection, family.len(), &winners);
            for (i, m) in family.miners.iter_mut().enumerate() {
                if update[i] {
                    adam_m[i].step_network(&mut m.net, &bm[i].param_grads(&grads))?;
                }
            }
            if train_generators {
                adam_g.step(&mut family.bank, &bb, &grads, &update)?;
            }
            family.selector.push_winners(&winners)?;
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
            Ok(rec) => {
                sink(&rec);
                trace(it, family.selector.probabilities());
            }
            Err(e) => {
                family.selector.seal();
                set_bank_frozen(&mut family.bank, false);
                result = Err(diverged(e, &stage_name, it, || family.to_checkpoint()));
                break;
            }
        }
        match stage {
            Stage::Full => family.finetune_iterations += 1,
            _ => family.mine_iterations += 1,
        }
    }
    set_bank_frozen(&mut family.bank, false);
    family.selector.seal();
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Activation, Layer};
    use crate::datakit::MixtureSpec;
    use crate::gan::GanArch;
    use proptest::prelude::*;

    fn constant_model(latent: usize, value: f64) -> GanModel {
        let gen = DenseNetwork::from_layers(vec![
            Layer::new(Tensor::zeros(latent, 1), Tensor::scalar(value), Activation::Linear).unwrap(),
        ])
        .unwrap();
        let critic = DenseNetwork::from_layers(vec![
            Layer::new(Tensor::scalar(1.0), Tensor::scalar(0.0), Activation::Linear).unwrap(),
        ])
        .unwrap();
        GanModel {
            generator: gen,
            critic,
            prior: PriorSpec::standard(latent),
            iterations: 0,
            seed: 0,
            dataset: String::new(),
        }
    }

    fn cfg(selection: Selection) -> FamilyConfig {
        FamilyConfig {
            miner_depth: 2,
            miner_width: 2,
            window: 200,
            critic_source: 0,
            selection,
            seed: 0,
        }
    }

    fn ones_target(n: usize) -> SampleSet {
        SampleSet::new(Tensor::filled(n, 1, 1.0), Origin::Real, None)
    }

    #[test]
    fn max_critic_and_miner_loss_examples() {
        let fam = GeneratorFamily::new(
            vec![constant_model(2, 2.0), constant_model(2, 5.0)],
            ones_target(1),
            &cfg(Selection::Max),
        )
        .unwrap();
        let ss = make_supersample(&fam, 3).unwrap();
        assert_eq!(ss.scores(), vec![2.0, 5.0]);
        assert_eq!(ss.winner(), 1);
        let v = multi_critic_loss(&fam, &[ss.clone()], &Tensor::scalar(1.0), 0.0, &mut crate::rng(0)).unwrap();
        assert_eq!(v, 4.0);
        assert_eq!(multi_miner_loss(&fam, &[ss]).unwrap(), -5.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let fam = GeneratorFamily::new(
            vec![constant_model(2, 3.0), constant_model(2, 3.0)],
            ones_target(1),
            &cfg(Selection::Max),
        )
        .unwrap();
        let ss = make_supersample(&fam, 1).unwrap();
        assert_eq!(ss.winner(), 0);
        let v = multi_critic_loss(&fam, &[ss], &Tensor::scalar(1.0), 0.0, &mut crate::rng(0)).unwrap();
        assert_eq!(v, 2.0);
    }

    #[test]
    fn supersample_structure() {
        let arch = GanArch { latent_dim: 3, gen_width: 8, gen_depth: 2, critic_width: 8, critic_depth: 2 };
        let models: Vec<GanModel> = (0..3).map(|s| GanModel::init(&arch, 2, &mut crate::rng(s)).unwrap()).collect();
        let target = MixtureSpec::gaussian(vec![0.0, 0.0], 1.0).unwrap().sample(10, 0).unwrap();
        let fam = GeneratorFamily::new(models, target, &cfg(Selection::Max)).unwrap();
        let ss = make_supersample(&fam, 9).unwrap();
        let idx: Vec<usize> = ss.entries.iter().map(|e| e.generator).collect();
        assert_eq!(idx, vec![0, 1, 2]);
        assert_eq!(ss, make_supersample(&fam, 9).unwrap());
        let single = GeneratorFamily::new(
            vec![GanModel::init(&arch, 2, &mut crate::rng(0)).unwrap()],
            fam.target.clone(),
            &cfg(Selection::Max),
        )
        .unwrap();
        assert_eq!(make_supersample(&single, 0).unwrap().entries.len(), 1);
    }

    #[test]
    fn selector_counts_and_uniform_warmup() {
        let mut s = SelectorState::new(2, 200).unwrap();
        assert_eq!(s.probabilities(), &[0.5, 0.5]);
        s.push_winners(&[0, 0, 1, 0]).unwrap();
        assert_eq!(s.probabilities(), &[0.75, 0.25]);
        let mut one = SelectorState::new(1, 5).unwrap();
        for _ in 0..7 {
            one.push_winners(&[0, 0]).unwrap();
            assert_eq!(one.probabilities(), &[1.0]);
        }
        assert_eq!(one.window_len(), 5);
    }

    #[test]
    fn selector_sampling() {
        let mut s = SelectorState::new(2, 10).unwrap();
        s.push_winners(&[0, 0]).unwrap();
        assert!((0..1000).all(|seed| selector_sample(&s, seed) == 0));
        let mut s = SelectorState::new(2, 10).unwrap();
        s.push_winners(&[0, 1]).unwrap();
        let mut rng = crate::rng(1);
        let zeros = (0..10_000).filter(|_| s.sample_index(&mut rng) == 0).count();
        assert!((4500..=5500).contains(&zeros), "{zeros}");
        let s = SelectorState::new(4, 10).unwrap();
        let mut rng = crate::rng(2);
        let mut counts = [0usize; 4];
        for _ in 0..8000 {
            counts[s.sample_index(&mut rng)] += 1;
        }
        assert!(counts.iter().all(|&c| (1800..=2200).contains(&c)), "{counts:?}");
    }

    #[test]
    fn sealed_selector_rejects_updates() {
        let mut s = SelectorState::new(2, 3).unwrap();
        s.seal();
        assert!(s.push_winners(&[0]).is_err());
    }

    fn two_source_family(selection: Selection) -> GeneratorFamily {
        let arch = GanArch { latent_dim: 2, gen_width: 8, gen_depth: 2, critic_width: 8, critic_depth: 2 };
        let models: Vec<GanModel> = (0..2).map(|s| GanModel::init(&arch, 2, &mut crate::rng(s + 10)).unwrap()).collect();
        let target = MixtureSpec::gaussian(vec![1.0, 0.0], 0.1).unwrap().sample(20, 0).unwrap();
        GeneratorFamily::new(models, target, &cfg(selection)).unwrap()
    }

    #[test]
    fn only_winning_miners_change() {
        let mut fam = two_source_family(Selection::Max);
        let tc = TrainConfig::default();
        let mut adams: Vec<AdamState> = fam.miners.iter().map(|m| AdamState::for_network(tc.adam(1e-3), &m.net)).collect();
        for seed in 0..20 {
            let before = fam.miners.clone();
            let latents = fam.draw_latents(3, &mut crate::rng(seed));
            let winners = miner_step(&mut fam, &latents, &mut adams).unwrap();
            for i in 0..2 {
                let changed = fam.miners[i] != before[i];
                assert_eq!(changed, winners.contains(&i), "seed {seed} miner {i}");
            }
        }
    }

    #[test]
    fn mean_mode_moves_every_miner() {
        let mut fam = two_source_family(Selection::Mean);
        let tc = TrainConfig::default();
        let mut adams: Vec<AdamState> = fam.miners.iter().map(|m| AdamState::for_network(tc.adam(1e-3), &m.net)).collect();
        let before = fam.miners.clone();
        let latents = fam.draw_latents(1, &mut crate::rng(0));
        miner_step(&mut fam, &latents, &mut adams).unwrap();
        assert!(fam.miners.iter().zip(&before).all(|(a, b)| a != b));
    }

    #[test]
    fn training_keeps_generators_and_seals_selector() {
        let mut fam = two_source_family(Selection::Max);
        let hashes = fam.bank.generator_hashes();
        let tc = TrainConfig { batch_size: 8, ..TrainConfig::default() };
        let mut rows = Vec::new();
        train_multi(&mut fam, &tc, 4, &mut |_| {}, &mut |_, p| rows.push(p.to_vec())).unwrap();
        assert_eq!(fam.bank.generator_hashes(), hashes);
        assert!(fam.selector.is_sealed());
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-12));
        finetune_multi(&mut fam, &tc, 2, 0.1, &mut |_| {}, &mut |_, _| {}).unwrap();
        assert_eq!(fam.stage, Stage::Full);
    }

    #[test]
    fn family_checkpoint_round_trip() {
        let mut fam = two_source_family(Selection::Mean);
        let tc = TrainConfig { batch_size: 4, ..TrainConfig::default() };
        train_multi(&mut fam, &tc, 3, &mut |_| {}, &mut |_, _| {}).unwrap();
        let bytes = fam.to_checkpoint().to_bytes();
        let back = GeneratorFamily::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, fam);
        assert_eq!(back.selector.probabilities(), fam.selector.probabilities());
        assert_eq!(back.generate(20, 1).unwrap(), fam.generate(20, 1).unwrap());
    }

    #[test]
    fn critic_starts_from_chosen_source() {
        let arch = GanArch { latent_dim: 2, gen_width: 8, gen_depth: 2, critic_width: 8, critic_depth: 2 };
        let models: Vec<GanModel> = (0..3).map(|s| GanModel::init(&arch, 2, &mut crate::rng(s)).unwrap()).collect();
        let target = MixtureSpec::gaussian(vec![1.0, 0.0], 0.1).unwrap().sample(5, 0).unwrap();
        let fam = GeneratorFamily::new(models.clone(), target.clone(), &cfg(Selection::Max)).unwrap();
        assert_eq!(fam.critic, models[0].critic);
        let c2 = FamilyConfig { critic_source: 2, ..cfg(Selection::Max) };
        let fam = GeneratorFamily::new(models.clone(), target.clone(), &c2).unwrap();
        assert_eq!((fam.critic_source, &fam.critic), (2, &models[2].critic));
        let c9 = FamilyConfig { critic_source: 9, ..cfg(Selection::Max) };
        assert!(GeneratorFamily::new(models, target, &c9).is_err());
    }

    #[test]
    fn one_generator_matches_single_mining_exactly() {
        use crate::miner::{finetune, train_miner, TransferRun};
        let arch = GanArch { latent_dim: 2, gen_width: 8, gen_depth: 2, critic_width: 8, critic_depth: 2 };
        let model = GanModel::init(&arch, 2, &mut crate::rng(5)).unwrap();
        let target = MixtureSpec::gaussian(vec![1.0, 0.0], 0.1).unwrap().sample(20, 0).unwrap();
        let tc = TrainConfig { batch_size: 8, seed: 3, ..TrainConfig::default() };
        for selection in [Selection::Max, Selection::Mean] {
            let mut single = TransferRun::new(&model, target.clone(), 2, 2, 7).unwrap();
            let fc = FamilyConfig { seed: 7, ..cfg(selection) };
            let mut fam = GeneratorFamily::new(vec![model.clone()], target.clone(), &fc).unwrap();
            assert_eq!(fam.miners[0], single.miner);
            train_miner(&mut single, &tc, 6, &mut |_| {}).unwrap();
            train_multi(&mut fam, &tc, 6, &mut |_| {}, &mut |_, _| {}).unwrap();
            assert_eq!(fam.miners[0], single.miner);
            assert_eq!(fam.critic, single.critic);
            finetune(&mut single, &tc, 3, 0.1, &mut |_| {}).unwrap();
            finetune_multi(&mut fam, &tc, 3, 0.1, &mut |_| {}, &mut |_, _| {}).unwrap();
            let GeneratorBank::Independent(models) = &fam.bank else { unreachable!() };
            assert_eq!(models[0].generator, single.generator);
            assert_eq!(fam.miners[0], single.miner);
            assert_eq!(fam.selector.probabilities(), &[1.0]);
        }
    }

    proptest! {
        #[test]
        fn selector_is_a_distribution(batches in prop::collection::vec(prop::collection::vec(0usize..4, 1..9), 1..40), cap in 1usize..10) {
            let mut s = SelectorState::new(4, cap).unwrap();
            for b in &batches {
                s.push_winners(b).unwrap();
                let p = s.probabilities();
                prop_assert!(p.iter().all(|&v| v >= 0.0));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn window_slides_consistently(batches in prop::collection::vec(prop::collection::vec(0usize..3, 1..6), 2..30), cap in 1usize..8) {
            let mut s = SelectorState::new(3, cap).unwrap();
            for b in &batches {
                s.push_winners(b).unwrap();
            }
            // Rebuild from the last `cap` minibatches only.
            let start = batches.len().saturating_sub(cap);
            let mut fresh = SelectorState::new(3, cap).unwrap();
            for b in &batches[start..] {
                fresh.push_winners(b).unwrap();
            }
            prop_assert_eq!(s.probabilities(), fresh.probabilities());
            prop_assert_eq!(s.window_len(), batches.len().min(cap));
        }
    }
}
