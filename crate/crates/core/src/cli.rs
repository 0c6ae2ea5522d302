//! Command-line operator surface: synth | train | sample | cleanup | eval |
//! bench over a shared JSON run configuration. Flags override config values.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta, LoadedModel, WeightKind};
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::eval::{
    self, train_eval_encoders, EvalEncoders, MetricStat, MetricsReport, EVAL_DIM,
};
use crate::footskate::{self, CleanupConfig, ContactConfig, InLoopParams};
use crate::motion::{
    load_motion_with_spec, save_motion_with_spec, MotionSequence, RepKind, RepresentationSpec,
};
use crate::sampling::{InferenceEngine, Precision, SamplerConfig, SamplerKind};
use crate::schedule::ScheduleParams;
use crate::skeleton::Skeleton;
use crate::synth::{synth_dataset, SynthConfig};
use crate::training::{Dataset, TrainConfig, Trainer};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// 2 for configuration/validation problems, 3 for runtime numerical
/// failures.
pub fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) | Error::Numerical(_) | Error::Candle(_) => EXIT_RUNTIME,
        _ => EXIT_CONFIG,
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Merged run configuration; every field has a documented default and
/// unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for training, sampling and evaluation.
    pub seed: u64,
    /// Feature representation for datasets and models.
    pub representation: RepKind,
    /// Padded sequence length used for training and the generation cap.
    pub target_len: usize,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    /// Denoiser architecture; vocab_size is always overwritten from the
    /// dataset vocabulary at training time.
    pub denoiser: Option<DenoiserConfig>,
    pub schedule: ScheduleParams,
    pub sampler: SamplerConfig,
    pub cleanup: CleanupConfig,
    pub contact: ContactConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            representation: RepKind::Positions,
            target_len: 64,
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            denoiser: None,
            schedule: ScheduleParams::default(),
            sampler: SamplerConfig::default(),
            cleanup: CleanupConfig::default(),
            contact: ContactConfig::default(),
        }
    }
}

fn load_run_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg: RunConfig = match path {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.synth.seed = s;
        cfg.sampler.seed = s;
    }
    Ok(cfg)
}

fn write_resolved(out: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("run_config.json"), serde_json::to_vec_pretty(cfg)?)?;
    Ok(())
}

fn rep_spec(cfg: &RunConfig, skeleton: &Skeleton) -> RepresentationSpec {
    RepresentationSpec { kind: cfg.representation, joint_count: skeleton.joint_count() }
}

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(name = "mofusion", version, about = "Diffusion motion-generation toolkit")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic labeled dataset.
    Synth,
    /// Train a denoiser checkpoint on a dataset directory.
    Train(TrainArgs),
    /// Sample a motion from a checkpoint.
    Sample(SampleArgs),
    /// Standalone footskate cleanup on a .mot file.
    Cleanup(CleanupArgs),
    /// Metric suite over a checkpoint and dataset.
    Eval(EvalArgs),
    /// Progressive efficiency-trick ablation table.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory produced by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Resume from an existing checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Iteration-count override.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Metrics-log cadence (JSON lines); 0 disables.
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum SamplerFlag {
    Ddpm,
    Dpmpp,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum PrecisionFlag {
    Full,
    Reduced,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "a person walks forward")]
    pub prompt: String,
    /// Frame count; defaults to the checkpoint's target length.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub sampler: Option<SamplerFlag>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// CFG scale.
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub precision: Option<PrecisionFlag>,
    /// Disable the batched cond+null forward pass.
    #[arg(long)]
    pub no_parallel_cfg: bool,
    /// Run footskate cleanup on x0 predictions during sampling.
    #[arg(long)]
    pub footskate_inloop: bool,
}

#[derive(Args, Debug)]
pub struct CleanupArgs {
    /// Input .mot file (must carry its representation header).
    #[arg(long)]
    pub input: PathBuf,
    /// Loss weights as "pose,foot,traj,vgrf".
    #[arg(long)]
    pub weights: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluation repetitions for the confidence intervals.
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    /// Number of generated motions.
    #[arg(long, default_value_t = 64)]
    pub gen_count: usize,
    /// Prior report to compare encoder versions against.
    #[arg(long)]
    pub compare: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "a person walks forward")]
    pub prompt: String,
    /// Generations per ablation row.
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    /// Solver step count for the accelerated rows.
    #[arg(long, default_value_t = 10)]
    pub solver_steps: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_run_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg, &cli.out),
        Command::Train(a) => cmd_train(&cfg, &a, &cli.out),
        Command::Sample(a) => cmd_sample(&cfg, &a, &cli.out),
        Command::Cleanup(a) => cmd_cleanup(&cfg, &a, &cli.out),
        Command::Eval(a) => cmd_eval(&cfg, &a, &cli.out),
        Command::Bench(a) => cmd_bench(&cfg, &a, &cli.out),
    }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    classes: Vec<String>,
    samples_per_class: usize,
    fps: f32,
    representation: RepresentationSpec,
    files: Vec<ManifestFile>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    path: String,
    class: String,
    frames: usize,
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let skeleton = Skeleton::desk_default();
    let spec = rep_spec(cfg, &skeleton);
    let seqs = synth_dataset(&cfg.synth, &skeleton, &spec)?;
    write_resolved(out, cfg)?;
    let mut files = Vec::with_capacity(seqs.len());
    for (i, seq) in seqs.iter().enumerate() {
        let class = &cfg.synth.classes[i / cfg.synth.samples_per_class];
        let name = format!("{class}_{:03}.mot", i % cfg.synth.samples_per_class);
        save_motion_with_spec(seq, Some(&spec), &out.join(&name))?;
        files.push(ManifestFile { path: name, class: class.clone(), frames: seq.frames() });
    }
    let manifest = DatasetManifest {
        classes: cfg.synth.classes.clone(),
        samples_per_class: cfg.synth.samples_per_class,
        fps: cfg.synth.fps,
        representation: spec,
        files,
    };
    std::fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    skeleton.save(&out.join("skeleton.json"))?;
    println!("wrote {} motions to {}", manifest.files.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn load_dataset_dir(dir: &Path) -> Result<(Vec<MotionSequence>, RepresentationSpec)> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("dataset directory {} not found", dir.display())));
    }
    let manifest: DatasetManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let mut seqs = Vec::with_capacity(manifest.files.len());
    for f in &manifest.files {
        let (seq, spec) = load_motion_with_spec(&dir.join(&f.path))?;
        if let Some(spec) = spec {
            if spec != manifest.representation {
                return Err(Error::Format(format!(
                    "{}: representation disagrees with the manifest",
                    f.path
                )));
            }
        }
        seqs.push(seq);
    }
    if seqs.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    Ok((seqs, manifest.representation))
}

fn cmd_train(cfg: &RunConfig, args: &TrainArgs, out: &Path) -> Result<()> {
    use crate::condition::Vocab;
    use crate::denoiser::CondUNet1D;
    use crate::schedule::NoiseSchedule;
    use crate::tensor::ParamStore;

    let (seqs, spec) = load_dataset_dir(&args.data)?;
    let skeleton = match Skeleton::load(&args.data.join("skeleton.json")) {
        Ok(s) => s,
        Err(_) => Skeleton::desk_default(),
    };
    if spec.joint_count != skeleton.joint_count() {
        return Err(Error::Config("dataset joint count disagrees with skeleton".into()));
    }
    let dataset = Dataset::new(&seqs, cfg.target_len)?;
    let mut train_cfg = cfg.train.clone();
    if let Some(it) = args.iterations {
        train_cfg.iterations = it;
    }

    write_resolved(out, cfg)?;
    let mut trainer = match &args.resume {
        Some(dir) => {
            let (_meta, mut t) = checkpoint::load_trainer(dir, &candle_core::Device::Cpu)?;
            if let Some(it) = args.iterations {
                t.config.iterations = it;
            }
            t
        }
        None => {
            let vocab = Vocab::build(dataset.prompts.iter().map(String::as_str));
            let mut den_cfg = cfg
                .denoiser
                .clone()
                .unwrap_or_else(|| DenoiserConfig::desk(vocab.len()));
            den_cfg.vocab_size = vocab.len();
            let mut ps = ParamStore::new(candle_core::Device::Cpu);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let model = CondUNet1D::new(&mut ps, &mut rng, &den_cfg, spec.feature_dim())?;
            let schedule = NoiseSchedule::from_params(&cfg.schedule)?;
            Trainer::new(model, ps, vocab, schedule, train_cfg.clone(), cfg.seed)?
        }
    };

    let mut log = std::fs::File::create(out.join("metrics.jsonl"))?;
    let history = trainer.run(&dataset, Some(&mut log), args.log_every)?;

    let den_cfg = cfg
        .denoiser
        .clone()
        .map(|mut d| {
            d.vocab_size = trainer.vocab.len();
            d
        })
        .unwrap_or_else(|| DenoiserConfig::desk(trainer.vocab.len()));
    let meta = CheckpointMeta {
        version: 1,
        denoiser: den_cfg,
        representation: spec,
        skeleton,
        schedule: cfg.schedule.clone(),
        norm: dataset.norm.clone(),
        vocab_words: trainer.vocab.words.clone(),
        fps: cfg.synth.fps,
        target_len: cfg.target_len,
    };
    checkpoint::save(out, &meta, &trainer)?;
    println!(
        "trained to iteration {} ({} steps this run), checkpoint in {}",
        trainer.iteration,
        history.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

fn load_for_inference(dir: &Path) -> Result<LoadedModel> {
    match checkpoint::load_model(dir, WeightKind::Ema, &candle_core::Device::Cpu) {
        Ok(m) => Ok(m),
        Err(_) => checkpoint::load_model(dir, WeightKind::Raw, &candle_core::Device::Cpu),
    }
}

fn apply_sampler_flags(sc: &mut SamplerConfig, args: &SampleArgs) {
    if let Some(kind) = args.sampler {
        sc.kind = match kind {
            SamplerFlag::Ddpm => SamplerKind::Ddpm,
            SamplerFlag::Dpmpp => SamplerKind::Dpmpp2mSde,
        };
    }
    if let Some(steps) = args.steps {
        sc.steps = steps;
    }
    if let Some(g) = args.guidance {
        sc.guidance_scale = g;
    }
    if let Some(p) = args.precision {
        sc.precision = match p {
            PrecisionFlag::Full => Precision::Full,
            PrecisionFlag::Reduced => Precision::Reduced,
        };
    }
    if args.no_parallel_cfg {
        sc.parallel_cfg = false;
    }
}

fn cmd_sample(cfg: &RunConfig, args: &SampleArgs, out: &Path) -> Result<()> {
    let loaded = load_for_inference(&args.checkpoint)?;
    let spec = loaded.meta.representation;
    let skeleton = loaded.meta.skeleton.clone();
    let norm = loaded.meta.norm.clone();
    let fps = loaded.meta.fps;
    let target_len = loaded.meta.target_len;
    let engine = InferenceEngine::new(loaded);

    let mut sc = cfg.sampler.clone();
    apply_sampler_flags(&mut sc, args);
    let frames = args.frames.unwrap_or(target_len);
    let total_steps = match sc.kind {
        SamplerKind::Ddpm => engine.loaded.schedule.len(),
        SamplerKind::Dpmpp2mSde => sc.steps,
    };

    let mut resolved = cfg.clone();
    resolved.sampler = sc.clone();
    write_resolved(out, &resolved)?;

    let mut hook = args.footskate_inloop.then(|| {
        let mut params =
            InLoopParams::with_defaults(spec, skeleton, norm, fps, total_steps);
        params.cleanup = CleanupConfig { iterations: 20, ..cfg.cleanup.clone() };
        params.contact = cfg.contact.clone();
        footskate::in_loop_cleanup(params)
    });

    let (motion, timing, counters) =
        engine.generate(&args.prompt, frames, &sc, hook.as_mut().map(|h| &mut **h as _))?;
    save_motion_with_spec(&motion, Some(&spec), &out.join("motion.mot"))?;
    let timing_json = serde_json::json!({
        "prompt": timing.prompt,
        "steps": timing.steps,
        "sampler": timing.sampler,
        "aits_seconds": timing.aits_seconds,
        "denoiser_calls": counters.denoiser_calls,
        "pair_evals": counters.pair_evals,
        "encoder_calls": counters.encoder_calls,
    });
    std::fs::write(out.join("timing.json"), serde_json::to_vec_pretty(&timing_json)?)?;
    println!("sampled {} frames to {}", frames, out.join("motion.mot").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// cleanup
// ---------------------------------------------------------------------------

fn cmd_cleanup(cfg: &RunConfig, args: &CleanupArgs, out: &Path) -> Result<()> {
    let mut cleanup_cfg = cfg.cleanup.clone();
    if let Some(w) = &args.weights {
        let parts: Vec<f64> = w
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad --weights: {e}")))?;
        if parts.len() != 4 {
            return Err(Error::Config("--weights needs pose,foot,traj,vgrf".into()));
        }
        cleanup_cfg.w_pose = parts[0];
        cleanup_cfg.w_foot = parts[1];
        cleanup_cfg.w_traj = parts[2];
        cleanup_cfg.w_vgrf = parts[3];
    }
    if let Some(it) = args.iterations {
        cleanup_cfg.iterations = it;
    }
    cleanup_cfg.validate()?;

    let (motion, spec) = load_motion_with_spec(&args.input)?;
    let spec = spec.ok_or_else(|| {
        Error::Config("input .mot lacks a representation header; cannot decode".into())
    })?;
    let skeleton = Skeleton::desk_default();
    if spec.joint_count != skeleton.joint_count() {
        return Err(Error::Config("motion joint count disagrees with the desk skeleton".into()));
    }

    let mut resolved = cfg.clone();
    resolved.cleanup = cleanup_cfg.clone();
    write_resolved(out, &resolved)?;
    let (fixed, report) =
        footskate::cleanup(&motion, &spec, &skeleton, &cleanup_cfg, &cfg.contact)?;
    save_motion_with_spec(&fixed, Some(&spec), &out.join("corrected.mot"))?;
    std::fs::write(out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    println!(
        "{} segments, skate ratio {:.4} -> {:.4}",
        report.segments.len(),
        report.skate_ratio_before,
        report.skate_ratio_after
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn encoder_cache_path(out: &Path, seed: u64) -> PathBuf {
    let base = std::env::var_os("MOFUSION_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| out.to_path_buf());
    base.join(format!("eval_encoders_seed{seed}.json"))
}

fn obtain_encoders(corpus: &[MotionSequence], seed: u64, out: &Path) -> Result<EvalEncoders> {
    let path = encoder_cache_path(out, seed);
    if path.exists() {
        if let Ok(enc) = EvalEncoders::load(&path) {
            return Ok(enc);
        }
    }
    let enc = train_eval_encoders(corpus, seed)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    enc.save(&path)?;
    Ok(enc)
}

fn bootstrap(features: &ndarray::Array2<f32>, rng: &mut ChaCha8Rng) -> ndarray::Array2<f32> {
    let n = features.nrows();
    let mut out = ndarray::Array2::zeros(features.dim());
    for i in 0..n {
        let j = rng.gen_range(0..n);
        out.row_mut(i).assign(&features.row(j));
    }
    out
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs, out: &Path) -> Result<()> {
    if args.reps == 0 {
        return Err(Error::Config("--reps must be positive".into()));
    }
    if args.gen_count < EVAL_DIM + 2 {
        return Err(Error::Config(format!(
            "--gen-count must be at least {} for a stable FID",
            EVAL_DIM + 2
        )));
    }
    let (corpus, _spec) = load_dataset_dir(&args.data)?;
    let loaded = load_for_inference(&args.checkpoint)?;
    let skeleton = loaded.meta.skeleton.clone();
    let spec = loaded.meta.representation;
    let target_len = loaded.meta.target_len;
    let engine = InferenceEngine::new(loaded);
    write_resolved(out, cfg)?;

    let encoders = obtain_encoders(&corpus, cfg.seed, out)?;
    if let Some(prior) = &args.compare {
        let prior: MetricsReport = serde_json::from_slice(&std::fs::read(prior)?)?;
        if prior.encoder_version != encoders.version {
            eprintln!(
                "warning: encoder version {} differs from compared report's {}; metrics are not comparable",
                encoders.version, prior.encoder_version
            );
        }
    }

    let prompts: Vec<String> = corpus
        .iter()
        .map(|s| s.label.as_ref().map(|t| t.join(" ")).unwrap_or_default())
        .collect();
    let unique: Vec<String> = {
        let mut u = Vec::new();
        for p in &prompts {
            if !u.contains(p) {
                u.push(p.clone());
            }
        }
        u
    };

    // generation: cycle prompts, one seed per sample
    let mut generated = Vec::with_capacity(args.gen_count);
    let mut gen_prompts = Vec::with_capacity(args.gen_count);
    for i in 0..args.gen_count {
        let prompt = &unique[i % unique.len()];
        let mut sc = cfg.sampler.clone();
        sc.seed = cfg.seed.wrapping_add(i as u64);
        let (motion, _t, _c) = engine.generate(prompt, target_len, &sc, None)?;
        generated.push(motion);
        gen_prompts.push(prompt.clone());
    }

    let real_refs: Vec<&MotionSequence> = corpus.iter().collect();
    let gen_refs: Vec<&MotionSequence> = generated.iter().collect();
    let real_feat = encoders.encode_motions(&real_refs)?;
    let gen_feat = encoders.encode_motions(&gen_refs)?;
    let text_feat =
        encoders.encode_texts(&gen_prompts.iter().map(String::as_str).collect::<Vec<_>>())?;

    // per-prompt groups for multi-modality
    let groups: Vec<ndarray::Array2<f32>> = unique
        .iter()
        .map(|u| {
            let rows: Vec<usize> =
                (0..gen_prompts.len()).filter(|&i| &gen_prompts[i] == u).collect();
            let mut g = ndarray::Array2::zeros((rows.len(), EVAL_DIM));
            for (k, &i) in rows.iter().enumerate() {
                g.row_mut(k).assign(&gen_feat.row(i));
            }
            g
        })
        .collect();

    let pool = 32.min(gen_feat.nrows());
    let mut fids = Vec::new();
    let mut r1 = Vec::new();
    let mut r2 = Vec::new();
    let mut r3 = Vec::new();
    let mut divs = Vec::new();
    let mut rdivs = Vec::new();
    let mut mms = Vec::new();
    let mut ridge = false;
    for rep in 0..args.reps {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1000 + rep as u64));
        let f = if args.reps == 1 {
            eval::fid(&real_feat, &gen_feat)?
        } else {
            eval::fid(&bootstrap(&real_feat, &mut rng), &bootstrap(&gen_feat, &mut rng))?
        };
        ridge |= f.ridge_used;
        fids.push(f.value);
        r1.push(eval::r_precision(&gen_feat, &text_feat, 1, pool, &mut rng)?);
        r2.push(eval::r_precision(&gen_feat, &text_feat, 2, pool, &mut rng)?);
        r3.push(eval::r_precision(&gen_feat, &text_feat, 3, pool, &mut rng)?);
        divs.push(eval::diversity(&gen_feat, eval::DEFAULT_N_PAIRS, &mut rng)?);
        rdivs.push(eval::diversity(&real_feat, eval::DEFAULT_N_PAIRS, &mut rng)?);
        mms.push(eval::multimodality(&groups, eval::DEFAULT_N_PAIRS, &mut rng)?);
    }

    // timing: batch-1 generations, warm-up discarded inside aits
    let timing_prompts: Vec<&str> =
        unique.iter().take(2).map(String::as_str).collect();
    let mut call_idx = 0u64;
    let (aits_mean, aits_std) = eval::aits(
        |p| {
            call_idx += 1;
            let mut sc = cfg.sampler.clone();
            sc.seed = cfg.seed.wrapping_add(5000 + call_idx);
            engine.generate(p, target_len, &sc, None).map(|_| ())
        },
        &timing_prompts,
        args.reps.min(3),
    )?;

    let skates: Vec<f64> = generated
        .iter()
        .map(|m| {
            let p = crate::codec::decode_features(m, &spec, &skeleton)?;
            footskate::skate_ratio(&p, &skeleton, &cfg.contact)
        })
        .collect::<Result<_>>()?;

    let report = MetricsReport {
        encoder_version: encoders.version.clone(),
        repetitions: args.reps,
        fid: MetricStat::from_samples(&fids),
        fid_ridge_used: ridge,
        r_precision_top1: MetricStat::from_samples(&r1),
        r_precision_top2: MetricStat::from_samples(&r2),
        r_precision_top3: MetricStat::from_samples(&r3),
        diversity: MetricStat::from_samples(&divs),
        real_diversity: MetricStat::from_samples(&rdivs),
        multimodality: MetricStat::from_samples(&mms),
        aits_seconds: MetricStat { mean: aits_mean, ci95: Some(1.96 * aits_std) },
        skate_ratio: MetricStat::from_samples(&skates),
    };
    std::fs::write(out.join("report.json"), report.to_json()?)?;
    std::fs::write(out.join("report.csv"), report.to_csv())?;
    println!(
        "fid {:.4}  top3 {:.3}  aits {:.3}s  skate {:.4}",
        report.fid.mean, report.r_precision_top3.mean, report.aits_seconds.mean, report.skate_ratio.mean
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

fn cmd_bench(cfg: &RunConfig, args: &BenchArgs, out: &Path) -> Result<()> {
    if args.reps == 0 {
        return Err(Error::Config("--reps must be positive".into()));
    }
    write_resolved(out, cfg)?;
    let frames_of = |m: &LoadedModel| m.meta.target_len;

    struct Row {
        trick: &'static str,
        kind: SamplerKind,
        parallel_cfg: bool,
        precision: Precision,
        shared_engine: bool,
    }
    let rows = [
        Row {
            trick: "ddpm",
            kind: SamplerKind::Ddpm,
            parallel_cfg: false,
            precision: Precision::Full,
            shared_engine: false,
        },
        Row {
            trick: "+solver10",
            kind: SamplerKind::Dpmpp2mSde,
            parallel_cfg: false,
            precision: Precision::Full,
            shared_engine: false,
        },
        Row {
            trick: "+cache",
            kind: SamplerKind::Dpmpp2mSde,
            parallel_cfg: false,
            precision: Precision::Full,
            shared_engine: true,
        },
        Row {
            trick: "+parallel-cfg",
            kind: SamplerKind::Dpmpp2mSde,
            parallel_cfg: true,
            precision: Precision::Full,
            shared_engine: true,
        },
        Row {
            trick: "+reduced",
            kind: SamplerKind::Dpmpp2mSde,
            parallel_cfg: true,
            precision: Precision::Reduced,
            shared_engine: true,
        },
    ];

    let mut csv = String::from(
        "trick,sampler,steps,aits_seconds,denoiser_calls_per_gen,encoder_calls_total\n",
    );
    for row in rows.iter() {
        let mut sc = cfg.sampler.clone();
        sc.kind = row.kind;
        sc.steps = args.solver_steps;
        sc.parallel_cfg = row.parallel_cfg;
        sc.precision = row.precision;

        let shared = if row.shared_engine {
            Some(InferenceEngine::new(load_for_inference(&args.checkpoint)?))
        } else {
            None
        };
        let mut times = Vec::with_capacity(args.reps);
        let mut denoiser_calls = 0usize;
        let mut encoder_calls = 0usize;
        let mut steps_reported = 0usize;
        for rep in 0..args.reps {
            let fresh;
            let engine = match &shared {
                Some(e) => e,
                None => {
                    fresh = InferenceEngine::new(load_for_inference(&args.checkpoint)?);
                    &fresh
                }
            };
            let mut sc_rep = sc.clone();
            sc_rep.seed = cfg.seed.wrapping_add(rep as u64);
            let (_m, timing, counters) =
                engine.generate(&args.prompt, frames_of(&engine.loaded), &sc_rep, None)?;
            times.push(timing.aits_seconds);
            denoiser_calls += counters.denoiser_calls;
            encoder_calls += counters.encoder_calls;
            steps_reported = timing.steps;
        }
        let mean_time = times.iter().sum::<f64>() / times.len() as f64;
        csv.push_str(&format!(
            "{},{},{},{:.6},{},{}\n",
            row.trick,
            match row.kind {
                SamplerKind::Ddpm => "ddpm",
                SamplerKind::Dpmpp2mSde => "dpmpp_2m_sde",
            },
            steps_reported,
            mean_time,
            denoiser_calls / args.reps,
            encoder_calls,
        ));
    }
    std::fs::write(out.join("bench.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
