//! `dxp`: command-line driver for corpus generation, the four expansion
//! stages, evaluation and the end-to-end experiment.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use dxp_core::checkpoint::{Checkpoint, Role};
use dxp_core::config::RunConfig;
use dxp_core::data::{self, Dataset, SamplePair};
use dxp_core::expansion::{evaluate_segmenter, expand_and_evaluate, filter_pairs, proxy_fid, EvalConfig};
use dxp_core::export::{contact_sheet, save_png};
use dxp_core::lemmas::verify_lemmas;
use dxp_core::pipeline::{run_e2e, synthesize, train_dpm_stage, train_filter_stage, train_seg_stage};
use dxp_core::sampling::Method;

#[derive(Parser)]
#[command(name = "dxp", version, about = "Diffusion-based expansion of paired image/mask datasets")]
struct Cli {
    /// Worker threads for per-example parallelism (default: all cores).
    #[arg(long, global = true, env = "DXP_WORKERS")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Run configuration: file first, then `--set` overrides, then dedicated flags.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Plain-text config with `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set dpm.iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        self.apply(RunConfig::default())
    }

    fn apply(&self, mut cfg: RunConfig) -> anyhow::Result<RunConfig> {
        if let Some(p) = &self.config {
            if !p.exists() {
                bail!(Usage(format!("config `{}` not found", p.display())));
            }
            cfg.apply_text(&fs::read_to_string(p)?)
                .with_context(|| format!("reading config {}", p.display()))?;
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow!(Usage(format!("--set expects KEY=VALUE, got `{kv}`"))))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset whose train split is used.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss-curve CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic image/mask corpus.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 304)]
        count: usize,
        /// Image side length (32 or 64).
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Keep only this fraction of the train split.
        #[arg(long)]
        few_shot: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Contact sheet of the first train pairs.
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Stage I: train the mask-conditional denoiser.
    TrainDpm(TrainArgs),
    /// Stage II: train the noise-conditional segmenter.
    TrainSeg {
        #[command(flatten)]
        train: TrainArgs,
        /// Train the clean-image filter model used in Stage IV instead.
        #[arg(long)]
        clean: bool,
    },
    /// Stage III: synthesize image/mask pairs.
    Sample {
        #[arg(long)]
        denoiser: PathBuf,
        /// Segmenter for guidance; required unless `--no-guidance`.
        #[arg(long)]
        segmenter: Option<PathBuf>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        steps: Option<usize>,
        /// Temperature guidance `1/tau` on the segmenter logits.
        #[arg(long, conflicts_with_all = ["scale", "no_guidance"])]
        tau: Option<f64>,
        /// Gradient-scale guidance `s`.
        #[arg(long, conflicts_with = "no_guidance")]
        scale: Option<f64>,
        /// Condition embedding only.
        #[arg(long)]
        no_guidance: bool,
        #[arg(long)]
        no_y1: bool,
        #[arg(long)]
        no_y2: bool,
        /// Double the condition gradient.
        #[arg(long)]
        drop_half: bool,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        png: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Stage IV: keep pairs whose filter Dice loss is below eta.
    Filter {
        /// Checkpoint written by `train-seg --clean`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = dxp_core::expansion::DEFAULT_ETA)]
        eta: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        discarded: Option<PathBuf>,
        /// Per-pair `index,loss,kept` CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train validators on origin and origin + each synthetic set.
    Expand {
        /// Dataset with the origin train split and the test split.
        #[arg(long)]
        origin: PathBuf,
        /// Synthetic set as NAME=PATH; repeatable.
        #[arg(long = "arm", value_name = "NAME=PATH")]
        arms: Vec<String>,
        /// Also train on each synthetic set alone.
        #[arg(long)]
        synth_only: bool,
        /// Results CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Per-pair Dice of a segmenter and proxy-FID against a reference set.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Images compared by proxy-FID (all splits).
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Randomized checks of the guidance identities.
    VerifyLemmas {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Full pipeline with acceptance checks.
    E2e {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Start from the 32x32 smoke-test preset.
        #[arg(long)]
        small: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Debug)]
struct Failed(String);

impl std::fmt::Display for Failed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Failed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use dxp_core::Error as E;
    if err.downcast_ref::<Failed>().is_some() {
        return 3;
    }
    match err.downcast_ref::<E>() {
        Some(E::NonFinite(_) | E::SamplingDiverged { .. } | E::NonFiniteLoss(_) | E::DegenerateGeometry(_)) => 2,
        _ => 1,
    }
}

fn require(path: &Path, what: &str, producer: &str) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(anyhow!(Usage(format!(
            "{what} `{}` not found; create it with `dxp {producer}`",
            path.display()
        ))))
    }
}

fn load_dataset(path: &Path, producer: &str) -> anyhow::Result<Dataset> {
    require(path, "dataset", producer)?;
    Ok(data::load(path).with_context(|| format!("loading {}", path.display()))?)
}

fn load_checkpoint(path: &Path, producer: &str) -> anyhow::Result<Checkpoint> {
    require(path, "checkpoint", producer)?;
    Ok(Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn sheet(path: &Path, pairs: &[SamplePair]) -> anyhow::Result<()> {
    if pairs.is_empty() {
        eprintln!("no pairs to render; skipping {}", path.display());
        return Ok(());
    }
    save_png(&contact_sheet(&pairs[..pairs.len().min(24)], 6)?, path)?;
    Ok(())
}

fn all_pairs(ds: &Dataset) -> Vec<SamplePair> {
    ds.train.iter().chain(&ds.test).cloned().collect()
}

fn train_cmd(a: &TrainArgs, role: Role) -> anyhow::Result<()> {
    let mut cfg = a.config.resolve()?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(w) = a.width {
        cfg.model_width = w;
    }
    let (it, batch, lr) = (a.iterations, a.batch, a.lr);
    match role {
        Role::Denoiser => {
            cfg.dpm_iterations = it.unwrap_or(cfg.dpm_iterations);
            cfg.dpm_batch = batch.unwrap_or(cfg.dpm_batch);
            cfg.dpm_lr = lr.unwrap_or(cfg.dpm_lr);
        }
        Role::Segmenter => {
            cfg.seg_iterations = it.unwrap_or(cfg.seg_iterations);
            cfg.seg_batch = batch.unwrap_or(cfg.seg_batch);
            cfg.seg_lr = lr.unwrap_or(cfg.seg_lr);
        }
        Role::Filter => {
            cfg.filter_epochs = it.unwrap_or(cfg.filter_epochs);
            cfg.filter_batch = batch.unwrap_or(cfg.filter_batch);
            cfg.filter_lr = lr.unwrap_or(cfg.filter_lr);
        }
    }
    cfg.validate()?;
    let ds = load_dataset(&a.data, "gen-data")?;
    if ds.train.is_empty() {
        bail!(Usage(format!("{} has an empty train split", a.data.display())));
    }
    let (log, ck) = match role {
        Role::Denoiser => {
            let (_, log, ck) = train_dpm_stage(&cfg, &ds.train)?;
            (log, ck)
        }
        Role::Segmenter => {
            let (_, log, ck) = train_seg_stage(&cfg, &ds.train)?;
            (log, ck)
        }
        Role::Filter => {
            let (_, log, ck) = train_filter_stage(&cfg, &ds.train)?;
            (log, ck)
        }
    };
    ck.save(&a.out)?;
    if let Some(p) = &a.log {
        write(p, log.to_csv())?;
    }
    println!(
        "{} trained on {} pairs: {} steps, final loss {:.6}, wrote {}",
        role.name(),
        ds.train.len(),
        log.losses.len(),
        log.tail_mean(10),
        a.out.display()
    );
    Ok(())
}

fn histogram(values: &[f64], bins: usize) -> String {
    let bins = bins.max(1);
    let mut counts = vec![0usize; bins];
    for &v in values {
        counts[((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let peak = counts.iter().copied().max().unwrap_or(0).max(1);
    let mut s = String::new();
    for (i, c) in counts.iter().enumerate() {
        let bar = "#".repeat((c * 40).div_ceil(peak));
        let lo = i as f64 / bins as f64;
        writeln!(s, "  [{lo:.2}, {:.2}{} {c:>5} {bar}", lo + 1.0 / bins as f64, if i + 1 == bins { "]" } else { ")" })
            .expect("string write");
    }
    s
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData {
            seed,
            count,
            size,
            few_shot,
            out,
            png,
        } => {
            let mut ds = data::generate(seed, count, size, size)?;
            if let Some(f) = few_shot {
                if !(f > 0.0 && f <= 1.0) {
                    bail!(Usage(format!("--few-shot must be in (0, 1], got {f}")));
                }
                ds = ds.few_shot(f);
            }
            write(&out, data::encode(&ds))?;
            if let Some(p) = png {
                sheet(&p, &ds.train)?;
            }
            println!("wrote {} train / {} test pairs to {}", ds.train.len(), ds.test.len(), out.display());
        }
        Command::TrainDpm(a) => train_cmd(&a, Role::Denoiser)?,
        Command::TrainSeg { train, clean } => train_cmd(&train, if clean { Role::Filter } else { Role::Segmenter })?,
        Command::Sample {
            denoiser,
            segmenter,
            method,
            steps,
            tau,
            scale,
            no_guidance,
            no_y1,
            no_y2,
            drop_half,
            count,
            seed,
            size,
            out,
            png,
            config,
        } => {
            let mut cfg = config.resolve()?;
            if let Some(m) = method {
                cfg.solver_method = m;
            }
            if let Some(n) = steps {
                cfg.solver_steps = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = size {
                cfg.data_height = s;
                cfg.data_width = s;
            }
            if let Some(t) = tau {
                cfg.guidance_mode = "temperature".into();
                cfg.guidance_value = t;
            }
            if let Some(s) = scale {
                cfg.guidance_mode = "scale".into();
                cfg.guidance_value = s;
            }
            if no_guidance {
                cfg.guidance_mode = "off".into();
            }
            cfg.guidance_use_y1 &= !no_y1;
            cfg.guidance_use_y2 &= !no_y2;
            cfg.guidance_drop_half |= drop_half;
            cfg.validate()?;
            let spec = cfg.guidance()?.filter(|s| s.is_active());

            let dck = load_checkpoint(&denoiser, "train-dpm")?;
            let den = dck.denoiser()?;
            let seg = match (&segmenter, spec) {
                (Some(p), _) => Some(load_checkpoint(p, "train-seg")?.segmenter()?),
                (None, Some(_)) => bail!(Usage(
                    "guided sampling needs --segmenter (create one with `dxp train-seg`) or --no-guidance".into()
                )),
                (None, None) => None,
            };
            let res = synthesize(&cfg, &den, seg.as_ref(), spec, dck.schedule, "sample", count)?;
            let ds = Dataset::from_pairs(cfg.data_height, cfg.data_width, res.pairs);
            write(&out, data::encode(&ds))?;
            if let Some(p) = png {
                sheet(&p, &ds.train)?;
            }
            println!(
                "sampled {} pairs with {} ({} steps), {} mask phases rejected; wrote {}",
                ds.train.len(),
                cfg.solver_method,
                cfg.solver_steps,
                res.rejected.len(),
                out.display()
            );
        }
        Command::Filter {
            model,
            input,
            eta,
            out,
            discarded,
            report,
        } => {
            let ck = load_checkpoint(&model, "train-seg --clean")?;
            if ck.role != Role::Filter {
                eprintln!("warning: {} holds a {} model, not a filter", model.display(), ck.role.name());
            }
            let seg = ck.segmenter()?;
            let ds = load_dataset(&input, "sample")?;
            let pairs = all_pairs(&ds);
            let (kept, dropped, rep) = filter_pairs(&pairs, Some(&seg), eta)?;
            write(&out, data::encode(&Dataset::from_pairs(ds.height, ds.width, kept.clone())))?;
            if let Some(p) = discarded {
                write(&p, data::encode(&Dataset::from_pairs(ds.height, ds.width, dropped)))?;
            }
            if let Some(p) = report {
                let mut csv = String::from("index,loss,kept\n");
                for (i, l) in rep.losses.iter().enumerate() {
                    writeln!(csv, "{i},{l},{}", rep.kept_indices.binary_search(&i).is_ok()).expect("string write");
                }
                write(&p, csv)?;
            }
            println!("kept {} of {} pairs (eta {eta}); wrote {}", kept.len(), pairs.len(), out.display());
        }
        Command::Expand {
            origin,
            arms,
            synth_only,
            out,
            config,
        } => {
            let cfg = config.resolve()?;
            cfg.validate()?;
            let base = load_dataset(&origin, "gen-data")?;
            if base.test.is_empty() {
                bail!(Usage(format!("{} has no test split", origin.display())));
            }
            let mut named = Vec::new();
            for a in &arms {
                let (name, path) = a
                    .split_once('=')
                    .ok_or_else(|| anyhow!(Usage(format!("--arm expects NAME=PATH, got `{a}`"))))?;
                named.push((name.to_string(), all_pairs(&load_dataset(Path::new(path), "sample")?)));
            }
            let eval_cfg = EvalConfig {
                seeds: cfg.expansion_seeds.clone(),
                width: cfg.expansion_width,
                train: cfg.validator_train(),
                synth_only,
            };
            let rep = expand_and_evaluate(&base.train, &base.test, &named, &eval_cfg)?;
            print!("{}", rep.to_table());
            if let Some(p) = out {
                write(&p, rep.to_csv())?;
            }
        }
        Command::Evaluate {
            model,
            input,
            reference,
            bins,
            seed,
        } => {
            let seg = load_checkpoint(&model, "train-seg --clean")?.segmenter()?;
            let pairs = all_pairs(&load_dataset(&input, "sample")?);
            if pairs.is_empty() {
                bail!(Usage(format!("{} holds no pairs", input.display())));
            }
            let dice = evaluate_segmenter(&seg, &pairs)?;
            let mut sorted = dice.clone();
            sorted.sort_by(f64::total_cmp);
            let mean = dice.iter().sum::<f64>() / dice.len() as f64;
            println!("pairs: {}", dice.len());
            println!("dice mean {mean:.4}  min {:.4}  median {:.4}  max {:.4}", sorted[0], quantile(&sorted, 0.5), sorted[sorted.len() - 1]);
            println!(
                "quartiles {:.4} / {:.4} / {:.4}",
                quantile(&sorted, 0.25),
                quantile(&sorted, 0.5),
                quantile(&sorted, 0.75)
            );
            print!("{}", histogram(&dice, bins));
            if let Some(r) = reference {
                let refs = all_pairs(&load_dataset(&r, "gen-data")?);
                let a: Vec<_> = pairs.iter().map(|p| p.image.clone()).collect();
                let b: Vec<_> = refs.iter().map(|p| p.image.clone()).collect();
                let d = proxy_fid(&a, &b, seed)?;
                println!(
                    "proxy-FID vs {}: {:.6}{}",
                    r.display(),
                    d.value,
                    if d.ridge { " (ridge 1e-6)" } else { "" }
                );
            }
        }
        Command::VerifyLemmas { trials, seed } => {
            if trials == 0 {
                bail!(Usage("--trials must be positive".into()));
            }
            let rep = verify_lemmas(trials, seed)?;
            print!("{}", rep.to_text());
            if !rep.passed() {
                bail!(Failed("some guidance identities failed".into()));
            }
        }
        Command::E2e { out, small, config } => {
            let cfg = config.apply(if small { RunConfig::small() } else { RunConfig::default() })?;
            let rep = run_e2e(&cfg, out.as_deref(), &mut |m| eprintln!("{m}"))?;
            print!("{}", rep.text);
            if !rep.passed() {
                bail!(Failed("acceptance checks failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
