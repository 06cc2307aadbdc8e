//! The four stages plus evaluation, driven by one [`RunConfig`] and one
//! master seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dxp_autodiff::Tensor;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, Role};
use crate::config::RunConfig;
use crate::data::{self, Dataset, SamplePair};
use crate::error::{Error, Result};
use crate::expansion::{expand_and_evaluate, filter_pairs, proxy_fid, EvalConfig, EvalReport};
use crate::export::{contact_sheet, save_png};
use crate::guidance::GuidanceSpec;
use crate::models::{Denoiser, Segmenter};
use crate::rng::SeedStream;
use crate::sampling::PairSampler;
use crate::schedule::NoiseSchedule;
use crate::training::{train_clean_segmenter, train_denoiser, train_segmenter, TrainConfig, TrainLog};

pub const MIN_GAIN: f64 = 0.01;
pub const NON_INFERIORITY: f64 = 0.005;
pub const MIN_FILTER_PASS: f64 = 0.95;

/// Named seeds derived from the master seed.
pub struct Seeds(SeedStream);

impl Seeds {
    pub fn new(master: u64) -> Self {
        Seeds(SeedStream::new(master))
    }

    pub fn data(&self) -> u64 {
        self.0.substream("data").seed()
    }

    pub fn init(&self, model: &str) -> SeedStream {
        self.0.substream("init").substream(model)
    }

    pub fn training(&self, model: &str) -> u64 {
        self.0.substream("diffusion-times").substream(model).seed()
    }

    /// Seed of synthesized pair `index` in the named set.
    pub fn sampling(&self, set: &str, index: u64) -> u64 {
        self.0.substream("sampling").substream(set).child(index).seed()
    }
}

pub fn train_dpm_stage(cfg: &RunConfig, train: &[SamplePair]) -> Result<(Denoiser, TrainLog, Checkpoint)> {
    let seeds = Seeds::new(cfg.seed);
    let schedule = cfg.schedule()?;
    let tc = TrainConfig {
        seed: seeds.training("denoiser"),
        ..cfg.dpm_train()
    };
    let mut model = Denoiser::new(cfg.model_width, seeds.init("denoiser"));
    let log = train_denoiser(&mut model, train, &schedule, &tc)?;
    let ck = Checkpoint::new(Role::Denoiser, &model, schedule, tc);
    Ok((model, log, ck))
}

pub fn train_seg_stage(cfg: &RunConfig, train: &[SamplePair]) -> Result<(Segmenter, TrainLog, Checkpoint)> {
    let seeds = Seeds::new(cfg.seed);
    let schedule = cfg.schedule()?;
    let tc = TrainConfig {
        seed: seeds.training("segmenter"),
        ..cfg.seg_train()
    };
    let mut model = Segmenter::new(cfg.model_width, seeds.init("segmenter"));
    let log = train_segmenter(&mut model, train, &schedule, &tc)?;
    let ck = Checkpoint::new(Role::Segmenter, &model, schedule, tc);
    Ok((model, log, ck))
}

pub fn train_filter_stage(cfg: &RunConfig, train: &[SamplePair]) -> Result<(Segmenter, TrainLog, Checkpoint)> {
    let seeds = Seeds::new(cfg.seed);
    let tc = TrainConfig {
        seed: seeds.training("filter"),
        ..cfg.filter_train()
    };
    let mut model = Segmenter::new(cfg.model_width, seeds.init("filter"));
    let log = train_clean_segmenter(&mut model, train, &tc)?;
    let ck = Checkpoint::new(Role::Filter, &model, cfg.schedule()?, tc);
    Ok((model, log, ck))
}

pub struct SynthOutcome {
    pub pairs: Vec<SamplePair>,
    /// Seeds whose mask phase was rejected too often.
    pub rejected: Vec<u64>,
}

/// Synthesizes `count` pairs with per-pair seeds from the named set.
#[allow(clippy::too_many_arguments)]
pub fn synthesize(
    cfg: &RunConfig,
    denoiser: &Denoiser,
    segmenter: Option<&Segmenter>,
    spec: Option<GuidanceSpec>,
    schedule: NoiseSchedule,
    set: &str,
    count: usize,
) -> Result<SynthOutcome> {
    let seeds = Seeds::new(cfg.seed);
    let sampler = PairSampler {
        denoiser,
        segmenter,
        spec,
        solver: cfg.solver(),
        schedule,
        height: cfg.data_height,
        width: cfg.data_width,
    };
    let results: Vec<(u64, Result<SamplePair>)> = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let seed = seeds.sampling(set, i);
            (seed, sampler.sample(seed))
        })
        .collect();
    let mut out = SynthOutcome {
        pairs: Vec::new(),
        rejected: Vec::new(),
    };
    for (seed, r) in results {
        match r {
            Ok(p) => out.pairs.push(p),
            Err(Error::MaskRejected(_)) => out.rejected.push(seed),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct E2eReport {
    pub eval: EvalReport,
    pub checks: Vec<Check>,
    pub text: String,
}

impl E2eReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn images(pairs: &[SamplePair]) -> Vec<Tensor> {
    pairs.iter().map(|p| p.image.clone()).collect()
}

struct Outputs(Option<PathBuf>);

impl Outputs {
    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        if let Some(dir) = &self.0 {
            fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    }

    fn dataset(&self, name: &str, ds: &Dataset) -> Result<()> {
        self.write(name, data::encode(ds))
    }

    fn sheet(&self, name: &str, pairs: &[SamplePair]) -> Result<()> {
        match &self.0 {
            Some(dir) if !pairs.is_empty() => save_png(&contact_sheet(&pairs[..pairs.len().min(24)], 6)?, dir.join(name)),
            _ => Ok(()),
        }
    }
}

/// Runs data generation, Stages I to IV and validator evaluation. Artifacts
/// go to `out_dir` when given; `progress` receives stage messages.
pub fn run_e2e(cfg: &RunConfig, out_dir: Option<&Path>, progress: &mut dyn FnMut(&str)) -> Result<E2eReport> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let out = Outputs(out_dir.map(Path::to_path_buf));
    out.write("config.resolved.txt", cfg.to_text())?;
    let seeds = Seeds::new(cfg.seed);
    let schedule = cfg.schedule()?;
    let (h, w) = (cfg.data_height, cfg.data_width);

    progress("generating corpus");
    let full = data::generate(seeds.data(), cfg.data_count, h, w)?;
    let few = full.few_shot(cfg.few_shot);
    let origin = few.train.clone();
    let test = few.test.clone();
    out.dataset("origin.dxp", &few)?;

    progress("stage I: training denoiser");
    let (denoiser, log, ck) = train_dpm_stage(cfg, &origin)?;
    out.write("denoiser.dxck", ck.encode())?;
    out.write("denoiser_loss.csv", log.to_csv())?;

    progress("stage II: training segmenter");
    let (segmenter, log, ck) = train_seg_stage(cfg, &origin)?;
    out.write("segmenter.dxck", ck.encode())?;
    out.write("segmenter_loss.csv", log.to_csv())?;

    progress("stage IV model: training filter");
    let (filter, log, ck) = train_filter_stage(cfg, &origin)?;
    out.write("filter.dxck", ck.encode())?;
    out.write("filter_loss.csv", log.to_csv())?;
    let (clean_kept, _, _) = filter_pairs(&origin, Some(&filter), cfg.filter_eta)?;
    let clean_pass = clean_kept.len() as f64 / origin.len() as f64;

    progress("stage III: synthesizing condition-embedding pairs");
    let cf = synthesize(cfg, &denoiser, None, None, schedule, "cf", cfg.expansion_candidates)?;
    progress("stage III: synthesizing guided pairs");
    let spec = cfg.guidance()?;
    let cg = synthesize(cfg, &denoiser, Some(&segmenter), spec, schedule, "cg", cfg.expansion_candidates)?;

    progress("stage IV: filtering");
    let (mut cs, _, cs_report) = filter_pairs(&cg.pairs, Some(&filter), cfg.filter_eta)?;
    cs.truncate(cfg.expansion_budget);
    let mut cf_pairs = cf.pairs.clone();
    cf_pairs.truncate(cfg.expansion_budget);
    let mut cg_pairs = cg.pairs.clone();
    cg_pairs.truncate(cfg.expansion_budget);
    for (name, pairs) in [("synthetic_cf", &cf_pairs), ("synthetic_cg", &cg_pairs), ("synthetic_cs", &cs)] {
        out.dataset(&format!("{name}.dxp"), &Dataset::from_pairs(h, w, pairs.clone()))?;
        out.sheet(&format!("{name}.png"), pairs)?;
    }
    out.sheet("origin.png", &origin)?;

    progress("evaluating validators");
    let eval_cfg = EvalConfig {
        seeds: cfg.expansion_seeds.clone(),
        width: cfg.expansion_width,
        train: cfg.validator_train(),
        synth_only: false,
    };
    let arms = vec![
        ("CF".to_string(), cf_pairs.clone()),
        ("CF+CG".to_string(), cg_pairs.clone()),
        ("CF+CG+CS".to_string(), cs.clone()),
    ];
    let eval = expand_and_evaluate(&origin, &test, &arms, &eval_cfg)?;

    let test_images = images(&test);
    let mut fid_lines = String::new();
    for (name, pairs) in &arms {
        if pairs.is_empty() {
            writeln!(fid_lines, "{name:<16} {:>12}", "n/a").expect("string write");
            continue;
        }
        let d = proxy_fid(&images(pairs), &test_images, cfg.seed)?;
        let note = if d.ridge { " (ridge 1e-6)" } else { "" };
        writeln!(fid_lines, "{name:<16} {:>12.6}{note}", d.value).expect("string write");
    }

    let mean = |name: &str| eval.row(name).map_or(f64::NAN, |r| r.mean());
    let (o, cfm, csm) = (mean("origin"), mean("CF"), mean("CF+CG+CS"));
    let checks = vec![
        Check {
            name: "expansion gain (CF+CG+CS - origin)".into(),
            value: csm - o,
            threshold: MIN_GAIN,
            passed: csm - o >= MIN_GAIN,
        },
        Check {
            name: "guidance non-inferiority (CF+CG+CS - CF)".into(),
            value: csm - cfm,
            threshold: -NON_INFERIORITY,
            passed: csm - cfm >= -NON_INFERIORITY,
        },
        Check {
            name: "clean originals passing their filter".into(),
            value: clean_pass,
            threshold: MIN_FILTER_PASS,
            passed: clean_pass >= MIN_FILTER_PASS,
        },
    ];

    let mut text = String::new();
    let t = &mut text;
    writeln!(t, "dataset expansion report").expect("string write");
    writeln!(t, "corpus: {} pairs at {h}x{w}, few-shot train {} / test {}", cfg.data_count, origin.len(), test.len())
        .expect("string write");
    writeln!(
        t,
        "synthesized: CF {} (rejected {}), CG {} (rejected {}), kept after filter {} (eta {})",
        cf.pairs.len(),
        cf.rejected.len(),
        cg.pairs.len(),
        cg.rejected.len(),
        cs.len(),
        cfg.filter_eta
    )
    .expect("string write");
    let mean_loss = cs_report.losses.iter().sum::<f64>() / cs_report.losses.len().max(1) as f64;
    writeln!(t, "mean filter Dice loss of guided pairs: {mean_loss:.6}").expect("string write");
    writeln!(t, "\nvalidator Dice on the test split (seeds {:?}):", cfg.expansion_seeds).expect("string write");
    t.push_str(&eval.to_table());
    writeln!(t, "\nproxy-FID against test images (random-projection features, not Inception FID):").expect("string write");
    t.push_str(&fid_lines);
    writeln!(t, "\nchecks:").expect("string write");
    for c in &checks {
        writeln!(
            t,
            "  [{}] {}: {:.6} (threshold {})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold
        )
        .expect("string write");
    }
    out.write("report.txt", &text)?;
    out.write("report.csv", eval.to_csv())?;
    Ok(E2eReport { eval, checks, text })
}
