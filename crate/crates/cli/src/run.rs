//! Subcommand implementations.

use std::path::{Path, PathBuf};

use latentmine::condmine::{
    as_family, finetune_cond, pretrain_conditional, train_cond_miner, CondMiningRun, ConditionalGan,
};
use latentmine::datakit::{
    load_idx, parse_config, parse_config_file, ComponentTag, CondStrategy, MixtureSpec, RunConfig,
    SampleSet,
};
use latentmine::eval::{build_report, principal_projection, Classifier, EvalConfig, Generative};
use latentmine::gan::{self, GanArch, MetricRecord, TrainConfig};
use latentmine::miner::{finetune, train_miner, TransferRun};
use latentmine::multimine::{finetune_multi, train_multi, FamilyConfig, GeneratorFamily};
use latentmine::{derive_seed, scenarios, Checkpoint, Error, GanModel, Result, Selection};

use crate::artifacts::{file_hash, points_csv, scatter_svg, OutDir};
use crate::{Cli, Command};

const STREAM_TARGET: u64 = 31;
const STREAM_HELD_OUT: u64 = 32;
const STREAM_CLASSIFIER: u64 = 33;

pub struct Invocation {
    command: String,
    args: Vec<PathBuf>,
    config: RunConfig,
    out: PathBuf,
}

impl Invocation {
    pub fn from_cli(cli: &Cli, cmd: &Command) -> Result<Self> {
        let mut config = match &cli.config {
            Some(p) => parse_config_file(p)?,
            None => RunConfig::default(),
        };
        let mut overrides = cli.set.clone();
        if let Some(s) = cli.seed {
            overrides.push(format!("seed={s}"));
        }
        config.apply_overrides(overrides.iter().map(String::as_str))?;
        let out = cli
            .out
            .clone()
            .ok_or_else(|| Error::Usage("--out is required".into()))?;
        let args = match cmd {
            Command::Report { inputs } => inputs.clone(),
            _ => Vec::new(),
        };
        Ok(Self { command: cmd.name().to_string(), args, config, out })
    }

    /// Files the run reads, as `(path, hash)`.
    fn input_hashes(&self) -> Result<Vec<(String, String)>> {
        let cfg = &self.config;
        let mut paths: Vec<PathBuf> = cfg.sources.iter().map(PathBuf::from).collect();
        for p in [&cfg.checkpoint, &cfg.target_file] {
            if !p.is_empty() {
                paths.push(PathBuf::from(p));
            }
        }
        paths.extend(self.args.iter().map(|p| report_path(p)));
        paths
            .into_iter()
            .map(|p| Ok((p.display().to_string(), file_hash(&p)?)))
            .collect()
    }

    pub fn execute(self) -> Result<()> {
        let inputs = self.input_hashes()?;
        let mut out = OutDir::create(&self.out)?;
        let result = self.dispatch(&mut out).and_then(|()| {
            let text = self.config.to_text();
            out.write("resolved.cfg", text.as_bytes())?;
            let manifest = serde_json::json!({
                "tool": "latentmine",
                "version": env!("CARGO_PKG_VERSION"),
                "subcommand": self.command,
                "args": self.args.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
                "config": text,
                "config_hash": self.config.content_hash(),
                "inputs": inputs.iter().map(|(p, h)| serde_json::json!({"path": p, "hash": h})).collect::<Vec<_>>(),
                "outputs": out.hashes()?.into_iter().map(|(f, h)| serde_json::json!({"file": f, "hash": h})).collect::<Vec<_>>(),
            });
            out.write("manifest.json", serde_json::to_string_pretty(&manifest).expect("json").as_bytes())
        });
        match result {
            Ok(()) => {
                out.commit()?;
                Ok(())
            }
            Err(e) => {
                if let Error::Divergence { last_finite: Some(ck), .. } = &e {
                    let _ = out.write("last_finite.ckpt", &ck.to_bytes());
                }
                let record = crate::error_record(&e);
                let _ = out.write("error.json", record.to_string().as_bytes());
                out.abandon();
                Err(e)
            }
        }
    }

    fn dispatch(&self, out: &mut OutDir) -> Result<()> {
        let cfg = &self.config;
        match self.command.as_str() {
            "pretrain" => pretrain_cmd(cfg, out),
            "mine" => mine_cmd(cfg, out),
            "finetune" => finetune_cmd(cfg, out),
            "sample" => sample_cmd(cfg, out),
            "eval" => eval_cmd(cfg, out),
            "ablate" => ablate_cmd(cfg, out),
            "report" => report_cmd(&self.args, out),
            other => Err(Error::Usage(format!("unknown subcommand `{other}`"))),
        }
    }
}

/// Re-runs the invocation recorded in `manifest`, after checking that its
/// inputs are unchanged.
pub fn replay(manifest: &Path, out: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::Io { path: manifest.into(), source: e })?;
    let m: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Format { offset: 0, message: format!("manifest: {e}") })?;
    let field = |k: &str| {
        m.get(k).ok_or_else(|| Error::Format { offset: 0, message: format!("manifest lacks `{k}`") })
    };
    let command = field("subcommand")?.as_str().unwrap_or_default().to_string();
    let config = parse_config(field("config")?.as_str().unwrap_or_default())?;
    let args = field("args")?
        .as_array()
        .map(|a| a.iter().filter_map(|v| v.as_str()).map(PathBuf::from).collect())
        .unwrap_or_default();
    let out = out.ok_or_else(|| Error::Usage("--out is required".into()))?.to_path_buf();
    let inv = Invocation { command, args, config, out };
    let recorded: Vec<(String, String)> = field("inputs")?
        .as_array()
        .map(|a| {
            a.iter()
                .map(|v| (v["path"].as_str().unwrap_or("").to_string(), v["hash"].as_str().unwrap_or("").to_string()))
                .collect()
        })
        .unwrap_or_default();
    if inv.input_hashes()? != recorded {
        return Err(Error::Integrity("inputs differ from the ones recorded in the manifest".into()));
    }
    inv.execute()
}

fn report_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("report.json")
    } else {
        p.to_path_buf()
    }
}

/// Runs `f` with a metric sink and writes the collected lines even when
/// `f` fails.
fn with_log<T>(out: &mut OutDir, every: usize, f: impl FnOnce(&mut dyn FnMut(&MetricRecord)) -> Result<T>) -> Result<T> {
    let mut lines = String::new();
    let r = f(&mut |rec: &MetricRecord| {
        if rec.iteration % every == 0 {
            lines.push_str(&rec.to_json_line());
            lines.push('\n');
        }
    });
    out.write("metrics.jsonl", lines.as_bytes())?;
    r
}

struct Trace {
    csv: String,
}

impl Trace {
    fn new(generators: usize) -> Self {
        Self { csv: format!("iteration,{}\n", crate::artifacts::csv_header("p", generators)) }
    }

    fn push(&mut self, it: usize, p: &[f64]) {
        let row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
        self.csv.push_str(&format!("{it},{}\n", row.join(",")));
    }
}

enum Loaded {
    Gan(GanModel),
    Miner(TransferRun),
    Family(GeneratorFamily),
    CondGan(ConditionalGan),
    Dual(CondMiningRun),
}

impl Loaded {
    fn load(path: &str) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        Ok(match ck.tag {
            ComponentTag::Gan => Loaded::Gan(GanModel::from_checkpoint(&ck)?),
            ComponentTag::Miner => Loaded::Miner(TransferRun::from_checkpoint(&ck)?),
            ComponentTag::Family => Loaded::Family(GeneratorFamily::from_checkpoint(&ck)?),
            ComponentTag::Conditional => match ck.meta("kind")? {
                "gan" => Loaded::CondGan(ConditionalGan::from_checkpoint(&ck)?),
                _ => Loaded::Dual(CondMiningRun::from_checkpoint(&ck)?),
            },
        })
    }

    fn generative(&self) -> &dyn Generative {
        match self {
            Loaded::Gan(m) => m,
            Loaded::Miner(r) => r,
            Loaded::Family(f) => f,
            Loaded::CondGan(c) => c,
            Loaded::Dual(d) => d,
        }
    }

    fn target(&self) -> Option<&SampleSet> {
        match self {
            Loaded::Miner(r) => Some(&r.target),
            Loaded::Family(f) => Some(&f.target),
            Loaded::Dual(d) => Some(&d.target),
            _ => None,
        }
    }
}

fn require_checkpoint(cfg: &RunConfig) -> Result<Loaded> {
    if cfg.checkpoint.is_empty() {
        return Err(Error::Config { key: "checkpoint".into(), message: "an input checkpoint is required".into() });
    }
    Loaded::load(&cfg.checkpoint)
}

fn training_target(cfg: &RunConfig) -> Result<SampleSet> {
    if !cfg.target_file.is_empty() {
        return Ok(load_idx(&cfg.target_file)?.set);
    }
    MixtureSpec::parse(&cfg.target_data)?.sample(cfg.target_samples, derive_seed(cfg.seed, STREAM_TARGET))
}

/// Real points for evaluation: a fresh draw from `target_data`, or the
/// target file itself.
fn held_out(cfg: &RunConfig) -> Result<SampleSet> {
    if !cfg.target_file.is_empty() {
        return Ok(load_idx(&cfg.target_file)?.set);
    }
    MixtureSpec::parse(&cfg.target_data)?.sample(cfg.eval_real_samples, derive_seed(cfg.seed, STREAM_HELD_OUT))
}

fn family_config(cfg: &RunConfig, data_dim: usize, selection: Selection, seed: u64) -> FamilyConfig {
    FamilyConfig {
        miner_depth: cfg.resolved_miner_depth(data_dim),
        miner_width: cfg.resolved_miner_width(),
        window: cfg.window,
        critic_source: cfg.critic_source,
        selection,
        seed,
    }
}

fn pretrain_cmd(cfg: &RunConfig, out: &mut OutDir) -> Result<()> {
    let spec = MixtureSpec::parse(&cfg.source_data)?;
    let tc = cfg.train_config();
    let arch = GanArch::from_config(cfg);
    let ck = with_log(out, cfg.log_every, |sink| {
        if cfg.conditional {
            let mut m = pretrain_conditional(&tc, &arch, cfg.embedding_dim, &spec, sink)?;
            m.dataset = cfg.source_data.clone();
            Ok(m.to_checkpoint())
        } else {
            let mut m = gan::pretrain(&tc, &arch, &spec, sink)?;
            m.dataset = cfg.source_data.clone();
            Ok(m.to_checkpoint())
        }
    })?;
    out.write("model.ckpt", &ck.to_bytes())
}

fn run_family(
    mut fam: GeneratorFamily,
    tc: &TrainConfig,
    iterations: usize,
    stage2: Option<f64>,
    every: usize,
    out: &mut OutDir,
) -> Result<Checkpoint> {
    let mut trace = Trace::new(fam.len());
    let r = with_log(out, every, |sink| match stage2 {
        None => train_multi(&mut fam, tc, iterations, sink, &mut |it, p| trace.push(it, p)),
        Some(scale) => finetune_multi(&mut fam, tc, iterations, scale, sink, &mut |it, p| trace.push(it, p)),
    });
    out.write("selector_trace.csv", trace.csv.as_bytes())?;
    r?;
    Ok(fam.to_checkpoint())
}

fn mine_cmd(cfg: &RunConfig, out: &mut OutDir) -> Result<()> {
    if cfg.sources.is_empty() {
        return Err(Error::Config { key: "sources".into(), message: "mining needs at least one source checkpoint".into() });
    }
    let loaded = cfg.sources.iter().map(|p| Loaded::load(p)).collect::<Result<Vec<_>>>()?;
    let target = training_target(cfg)?;
    let tc = cfg.train_config();
    let iters = cfg.mine_iterations;
    let width = cfg.resolved_miner_width();
    let ck = match loaded.as_slice() {
        [Loaded::Gan(m)] => {
            let depth = cfg.resolved_miner_depth(m.data_dim());
            let mut run = TransferRun::new(m, target, depth, width, cfg.seed)?;
            with_log(out, cfg.log_every, |sink| train_miner(&mut run, &tc, iters, sink))?;
            run.to_checkpoint()
        }
        [Loaded::CondGan(c)] => match cfg.cond_strategy {
            CondStrategy::DualMiner => {
                let depth = cfg.resolved_miner_depth(c.data_dim());
                let mut run = CondMiningRun::new(c, target, depth, width, cfg.seed)?;
                with_log(out, cfg.log_every, |sink| train_cond_miner(&mut run, &tc, iters, sink))?;
                run.to_checkpoint()
            }
            CondStrategy::AsFamily => {
                let fc = family_config(cfg, c.data_dim(), cfg.selection, cfg.seed);
                run_family(as_family(c, target, &fc)?, &tc, iters, None, cfg.log_every, out)?
            }
        },
        many if many.iter().all(|l| matches!(l, Loaded::Gan(_))) => {
            let models: Vec<GanModel> = loaded
                .into_iter()
                .map(|l| match l {
                    Loaded::Gan(m) => m,
                    _ => unreachable!(),
                })
                .collect();
            let fc = family_config(cfg, models[0].data_dim(), cfg.selection, cfg.seed);
            let fam = GeneratorFamily::new(models, target, &fc)?;
            run_family(fam, &tc, iters, None, cfg.log_every, out)?
        }
        _ => {
            return Err(Error::Config {
                key: "sources".into(),
                message: "expected pretrained GAN checkpoints or a single conditional GAN checkpoint".into(),
            })
        }
    };
    out.write("mined.ckpt", &ck.to_bytes())
}

fn finetune_cmd(cfg: &RunConfig, out: &mut OutDir) -> Result<()> {
    let tc = cfg.train_config();
    let (iters, scale) = (cfg.finetune_iterations, cfg.stage2_lr_scale);
    let ck = match require_checkpoint(cfg)? {
        Loaded::Miner(mut run) => {
            with_log(out, cfg.log_every, |sink| finetune(&mut run, &tc, iters, scale, sink))?;
            run.to_checkpoint()
        }
        Loaded::Dual(mut run) => {
            with_log(out, cfg.log_every, |sink| finetune_cond(&mut run, &tc, iters, scale, sink))?;
            run.to_checkpoint()
        }
        Loaded::Family(fam) => run_family(fam, &tc, iters, Some(scale), cfg.log_every, out)?,
        Loaded::Gan(_) | Loaded::CondGan(_) => {
            return Err(Error::Config {
                key: "checkpoint".into(),
                message: "finetuning needs a checkpoint written by `mine`".into(),
            })
        }
    };
    out.write("finetuned.ckpt", &ck.to_bytes())
}

fn sample_cmd(cfg: &RunConfig, out: &mut OutDir) -> Result<()> {
    let loaded = require_checkpoint(cfg)?;
    let x = loaded.generative().generate(cfg.samples, cfg.seed)?;
    out.write("samples.csv", points_csv(&x, "x").as_bytes())?;
    match x.cols() {
        2 => out.write("scatter.svg", scatter_svg(&x, loaded.target().map(|t| &t.points)).as_bytes()),
        d if d > 2 && x.rows() >= 2 => out.write("pca.csv", points_csv(&principal_projection(&x, 2)?, "pc").as_bytes()),
        _ => Ok(()),
    }
}

fn source_classifier(cfg: &RunConfig, k: usize) -> Result<Classifier> {
    let spec = MixtureSpec::parse(&cfg.source_data)?;
    let classes = spec.components().len();
    if k >= classes {
        return Err(Error::Config {
            key: "target_class".into(),
            message: format!("source_data has {classes} components"),
        });
    }
    let seed = derive_seed(cfg.seed, STREAM_CLASSIFIER);
    let (x, labels) = spec.sample_labeled(4000, &mut latentmine::rng(seed));
    let mut clf = Classifier::new(spec.dim(), classes, 32, &mut latentmine::rng(seed + 1))?;
    clf.fit(&x, &labels, 1500, 128, seed + 2)?;
    Ok(clf)
}

fn eval_cmd(cfg: &RunConfig, out: &mut OutDir) -> Result<()> {
    let loaded = require_checkpoint(cfg)?;
    let real = held_out(cfg)?;
    let clf = cfg.target_class.map(|k| source_classifier(cfg, k).map(|c| (c, k))).transpose()?;
    let ec = EvalConfig { cap: cfg.eval_cap, bandwidth: cfg.bandwidth, seed: cfg.seed };
    let report = build_report(
        loaded.generative(),
        &real,
        &ec,
        clf.as_ref().map(|(c, k)| (c as &dyn latentmine::eval::Classify, *k)),
    )?;
    out.write("report.json", report.to_json().as_bytes())
}

struct SweepData {
    sources: Vec<GanModel>,
    target: SampleSet,
    real: SampleSet,
}

enum Variant {
    Selection(Selection),
    Depth(usize),
}

struct AblationRow {
    sweep: &'static str,
    variant: String,
    seed: u64,
    frechet: f64,
    kmmd: f64,
    mean_variance: f64,
    p: Vec<f64>,
}

fn run_variant(cfg: &RunConfig, data: &SweepData, variant: &Variant, seed: u64) -> Result<AblationRow> {
    let tc = TrainConfig { seed, ..cfg.train_config() };
    let ec = EvalConfig { cap: cfg.eval_cap, bandwidth: cfg.bandwidth, seed };
    let dim = data.target.dim();
    let (sweep, name, report, p) = match *variant {
        Variant::Selection(sel) => {
            let fc = family_config(cfg, dim, sel, seed);
            let mut fam = GeneratorFamily::new(data.sources.clone(), data.target.clone(), &fc)?;
            train_multi(&mut fam, &tc, cfg.mine_iterations, &mut |_| {}, &mut |_, _| {})?;
            let r = build_report(&fam, &data.real, &ec, None)?;
            ("selection", sel.to_string(), r, fam.selector.probabilities().to_vec())
        }
        Variant::Depth(depth) => {
            let width = cfg.resolved_miner_width();
            let mut run = TransferRun::new(&data.sources[0], data.target.clone(), depth, width, seed)?;
            train_miner(&mut run, &tc, cfg.mine_iterations, &mut |_| {})?;
            let r = build_report(&run, &data.real, &ec, None)?;
            ("depth", depth.to_string(), r, Vec::new())
        }
    };
    Ok(AblationRow {
        sweep,
        variant: name,
        seed,
        frechet: report.frechet,
        kmmd: report.kmmd,
        mean_variance: report.mean_variance,
        p,
    })
}

/// Without `sources`, the selection sweep uses two cluster sources and a
/// 0.3:0.7 target, and the depth sweep a ring source with an off-manifold
/// target. With `sources`, both sweeps use them and `target_data`.
fn ablate_cmd(cfg: &RunConfig, out: &mut OutDir) -> Result<()> {
    let (multi, single) = if cfg.sources.is_empty() {
        let draw = |spec: &MixtureSpec| -> Result<(SampleSet, SampleSet)> {
            Ok((
                spec.sample(cfg.target_samples, derive_seed(cfg.seed, STREAM_TARGET))?,
                spec.sample(cfg.eval_real_samples, derive_seed(cfg.seed, STREAM_HELD_OUT))?,
            ))
        };
        let clusters = &scenarios::CLUSTERS[..2];
        let (target, real) = draw(&scenarios::cluster_mixture(clusters, &[0.3, 0.7])?)?;
        let multi = SweepData { sources: scenarios::cluster_sources(clusters, cfg.seed)?, target, real };
        let (target, real) = draw(&scenarios::off_manifold())?;
        let single = SweepData { sources: vec![scenarios::ring_source(cfg.seed)?], target, real };
        (Some(multi), single)
    } else {
        let sources = cfg
            .sources
            .iter()
            .map(|p| match Loaded::load(p)? {
                Loaded::Gan(m) => Ok(m),
                _ => Err(Error::Config { key: "sources".into(), message: "ablation needs unconditional GAN checkpoints".into() }),
            })
            .collect::<Result<Vec<_>>>()?;
        let (target, real) = (training_target(cfg)?, held_out(cfg)?);
        let multi = (sources.len() >= 2).then(|| SweepData { sources: sources.clone(), target: target.clone(), real: real.clone() });
        (multi, SweepData { sources: sources[..1].to_vec(), target, real })
    };

    let mut jobs: Vec<(&SweepData, Variant, u64)> = Vec::new();
    if let Some(m) = &multi {
        for (i, sel) in [Selection::Max, Selection::Mean].into_iter().enumerate() {
            jobs.push((m, Variant::Selection(sel), cfg.seed + i as u64));
        }
    }
    for depth in 1..=4 {
        jobs.push((&single, Variant::Depth(depth), cfg.seed + (depth - 1) as u64));
    }
    let rows = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(data, v, seed)| s.spawn(move || run_variant(cfg, data, v, *seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut csv = String::from("sweep,variant,seed,frechet,kmmd,mean_variance,p\n");
    for r in rows {
        let p: Vec<String> = r.p.iter().map(|v| v.to_string()).collect();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.sweep,
            r.variant,
            r.seed,
            r.frechet,
            r.kmmd,
            r.mean_variance,
            p.join(";")
        ));
    }
    out.write("ablate.csv", csv.as_bytes())
}

fn report_cmd(inputs: &[PathBuf], out: &mut OutDir) -> Result<()> {
    let mut csv = String::from("run,frechet,kmmd,mean_variance,classifier_error,n_generated,n_real,seed\n");
    for input in inputs {
        let path = report_path(input);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Format { offset: 0, message: format!("{}: {e}", path.display()) })?;
        let mut cells = vec![input.display().to_string()];
        for key in ["frechet", "kmmd", "mean_variance", "classifier_error", "n_generated", "n_real", "seed"] {
            cells.push(match v.get(key) {
                Some(serde_json::Value::Null) => String::new(),
                Some(x) => x.to_string(),
                None => {
                    return Err(Error::Format {
                        offset: 0,
                        message: format!("{} lacks `{key}`", path.display()),
                    })
                }
            });
        }
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    out.write("report.csv", csv.as_bytes())
}
