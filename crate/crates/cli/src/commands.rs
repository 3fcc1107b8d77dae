use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::CommandFactory;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use moltx::analysis::{
    attention_by_token_type_pooled, attention_vs_distance, bucket_tokens, equivariance_cossim_with,
    fit_joint_scaling, fit_power_law, isoflop_curve, linear_fit, radius_vs_density, sequence_log_prob,
    six_n, Bucket, DistanceCurve, FrameAveraged, JointScalingFit, ModelForces,
};
use moltx::codebook::{fit_codebook, CodebookConfig, PositionEncoding, QuantileCodebook};
use moltx::data::{
    augment_rotate, generate_lj_dataset, parse_xyz, random_rotation, split_dataset, write_xyz,
    DatasetManifest, LennardJones, MolecularFrame,
};
use moltx::md::{
    energy_drift, h_mae, h_of_r, h_of_r_frames, maxwell_boltzmann, run_md, ForceKind, ForceProvider,
    Langevin, MdState, ModelProvider,
};
use moltx::model::{init_model, Model, ModelConfig, Precision, Prediction};
use moltx::nn::Real;
use moltx::tokenizer::{build_vocab, encode_frame, render_sequence, write_records, DualSequence, Mode, Vocabulary};
use moltx::train::{
    cross_entropy_loss, evaluate, finetune, load_checkpoint, metrics_from_predictions, pretrain,
    read_checkpoint_header, save_checkpoint, write_metrics_csv, Checkpoint, EvalMetrics, Stage,
    TrainConfig, TrainingSet,
};

use crate::config::resolve;
use crate::manifest::{peak_memory_kib, write_atomic, RunManifest};
use crate::{Cli, Command, RunArgs, OUT_ROOT_ENV};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys or values: exit code 1.
    Usage(String),
    /// Failure while running: exit code 2.
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(msg.to_string())
}

/// Per-invocation bookkeeping for the manifest.
pub struct Run {
    pub out_dir: PathBuf,
    pub workers: usize,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    prepared: bool,
}

impl Run {
    fn new(out_dir: PathBuf, workers: usize) -> Self {
        Self {
            out_dir,
            workers: workers.max(1),
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            prepared: false,
        }
    }

    /// Resolve the command config and create the run directory.
    fn configure<T: Serialize + DeserializeOwned>(&mut self, defaults: &T, args: &RunArgs) -> CliResult<T> {
        let cfg = resolve(defaults, args.config.as_deref(), &args.overrides).map_err(usage)?;
        if let Some(p) = &args.config {
            self.inputs.push(p.clone());
        }
        self.config = serde_json::to_value(&cfg)?;
        std::fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("cannot create run directory {}", self.out_dir.display()))?;
        self.prepared = true;
        Ok(cfg)
    }

    fn input(&mut self, path: &Option<PathBuf>, key: &str) -> CliResult<PathBuf> {
        let p = path.clone().ok_or_else(|| usage(format!("missing required key `{key}`")))?;
        if !p.exists() {
            return Err(anyhow!("input not found: {}", p.display()).into());
        }
        self.inputs.push(p.clone());
        Ok(p)
    }

    fn frames(&mut self, path: &Option<PathBuf>, key: &str) -> CliResult<Vec<MolecularFrame>> {
        let p = self.input(path, key)?;
        let text = std::fs::read_to_string(&p).with_context(|| format!("cannot read {}", p.display()))?;
        let frames = parse_xyz(&text).with_context(|| format!("cannot parse {}", p.display()))?;
        if frames.is_empty() {
            return Err(anyhow!("no frames in {}", p.display()).into());
        }
        Ok(frames)
    }

    fn codebook(&mut self, path: &Option<PathBuf>) -> CliResult<QuantileCodebook> {
        let p = self.input(path, "codebook")?;
        Ok(QuantileCodebook::load(&p).with_context(|| format!("cannot load codebook {}", p.display()))?)
    }

    fn checkpoint(&mut self, path: &Option<PathBuf>, codebook: Option<&QuantileCodebook>) -> CliResult<AnyCheckpoint> {
        let p = self.input(path, "checkpoint")?;
        let hash = codebook.map(|c| c.hash());
        load_any(&p, hash.as_deref())
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let p = self.out_dir.join(name);
        write_atomic(&p, contents.as_ref()).with_context(|| format!("cannot write {}", p.display()))?;
        self.outputs.push(p.clone());
        Ok(p)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        let text = serde_json::to_string_pretty(value)?;
        self.write(name, text)
    }
}

pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

macro_rules! with_checkpoint {
    ($ck:expr, $c:ident => $body:expr) => {
        match $ck {
            AnyCheckpoint::F32($c) => $body,
            AnyCheckpoint::F64($c) => $body,
        }
    };
}

fn load_any(path: &Path, hash: Option<&str>) -> CliResult<AnyCheckpoint> {
    let header = read_checkpoint_header(path).with_context(|| format!("cannot load {}", path.display()))?;
    let ctx = || format!("cannot load {}", path.display());
    Ok(match header.precision.as_str() {
        "f32" => AnyCheckpoint::F32(load_checkpoint(path, hash).with_context(ctx)?),
        "f64" => AnyCheckpoint::F64(load_checkpoint(path, hash).with_context(ctx)?),
        p => return Err(anyhow!("unsupported checkpoint precision {p}").into()),
    })
}

fn vocab_for<R>(ck: &Checkpoint<R>, cb: &QuantileCodebook) -> Vocabulary {
    ck.vocab
        .clone()
        .unwrap_or_else(|| build_vocab(&cb.config(), PositionEncoding::Joint))
}

/// Order-preserving map over scoped worker threads.
fn par_map<T: Sync, U: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    if workers <= 1 || items.len() < 2 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

fn table(rows: &[(&str, String)]) -> String {
    let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    rows.iter().map(|(k, v)| format!("{k:<w$}  {v}\n")).collect()
}

fn default_out_dir(command: &str) -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
        .join(command)
}

pub fn execute(command: &Command) -> ExitCode {
    let (name, args) = command.parts();
    let out_dir = args.out_dir.clone().unwrap_or_else(|| default_out_dir(name));
    let mut run = Run::new(out_dir, args.workers);
    let t0 = Instant::now();
    let result = match command {
        Command::GenData(a) => gen_data(&mut run, a),
        Command::FitCodebook(a) => fit_codebook_cmd(&mut run, a),
        Command::Tokenize(a) => tokenize(&mut run, a),
        Command::Pretrain(a) => train_cmd(&mut run, a, Stage::Pretrain),
        Command::Finetune(a) => train_cmd(&mut run, a, Stage::Finetune),
        Command::Eval(a) => eval_cmd(&mut run, a),
        Command::AttnAnalyze(a) => attn_analyze(&mut run, a),
        Command::ScalingFit(a) => scaling_fit(&mut run, a),
        Command::Isoflop(a) => isoflop(&mut run, a),
        Command::Logprob(a) => logprob(&mut run, a),
        Command::Md(a) => md_cmd(&mut run, a),
        Command::Equivariance(a) => equivariance(&mut run, a),
    };
    if run.prepared {
        let manifest = RunManifest {
            command: name.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: run.config.clone(),
            inputs: run.inputs.clone(),
            outputs: run.outputs.clone(),
            seed: run.seed,
            workers: run.workers,
            wall_clock_s: t0.elapsed().as_secs_f64(),
            peak_memory_kib: peak_memory_kib(),
            status: if result.is_ok() { "ok" } else { "failed" }.to_string(),
            error: result.as_ref().err().map(|e| match e {
                CliError::Usage(m) => m.clone(),
                CliError::Runtime(e) => format!("{e:#}"),
            }),
        };
        if let Err(e) = manifest.save(&run.out_dir) {
            eprintln!("error: cannot write manifest: {e}");
            return ExitCode::from(2);
        }
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n");
            let mut cmd = Cli::command();
            cmd.build();
            if let Some(sub) = cmd.find_subcommand_mut(name) {
                eprintln!("{}", sub.render_usage());
            }
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

// gen-data

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataConfig {
    n_frames: usize,
    atoms_min: usize,
    atoms_max: usize,
    /// train/val/test fractions.
    fractions: [f64; 3],
    seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            n_frames: 256,
            atoms_min: 3,
            atoms_max: 6,
            fractions: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

fn gen_data(run: &mut Run, args: &RunArgs) -> CliResult {
    let cfg = run.configure(&GenDataConfig::default(), args)?;
    run.seed = Some(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let frames = generate_lj_dataset(cfg.n_frames, cfg.atoms_min, cfg.atoms_max, &mut rng).map_err(usage)?;
    let split = split_dataset(frames.len(), cfg.fractions, &mut rng).map_err(usage)?;
    let all = run.write("frames.xyz", write_xyz(&frames))?;
    for (name, idx) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        let subset: Vec<MolecularFrame> = idx.iter().map(|&i| frames[i].clone()).collect();
        run.write(&format!("{name}.xyz"), write_xyz(&subset))?;
    }
    let manifest = DatasetManifest {
        files: vec![all],
        frames_per_file: vec![frames.len()],
        split: split.clone(),
    };
    run.write_json("split.json", &manifest)?;
    let (tr, va, te) = split.sizes();
    print!(
        "{}",
        table(&[
            ("frames", frames.len().to_string()),
            ("train/val/test", format!("{tr}/{va}/{te}")),
            ("out_dir", run.out_dir.display().to_string()),
        ])
    );
    Ok(())
}

// fit-codebook

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitCodebookConfig {
    input: Option<PathBuf>,
    /// Extra randomly rotated copies per frame, widening coordinate coverage.
    rotation_copies: usize,
    seed: u64,
    codebook: CodebookConfig,
}

fn fit_codebook_cmd(run: &mut Run, args: &RunArgs) -> CliResult {
    let cfg = run.configure(&FitCodebookConfig::default(), args)?;
    run.seed = Some(cfg.seed);
    let frames = run.frames(&cfg.input, "input")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut fit_frames = frames.clone();
    for f in &frames {
        for _ in 0..cfg.rotation_copies {
            fit_frames.push(augment_rotate(f, &random_rotation(&mut rng)));
        }
    }
    let cb = fit_codebook(&fit_frames, &cfg.codebook)?;
    run.write("codebook.json", cb.to_json())?;
    let vocab = build_vocab(&cb.config(), PositionEncoding::Joint);
    print!(
        "{}",
        table(&[
            ("frames", fit_frames.len().to_string()),
            ("grid cells", cfg.codebook.grid_cells().to_string()),
            ("vocab size", vocab.size().to_string()),
            ("hash", cb.hash()),
        ])
    );
    Ok(())
}

// tokenize

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenizeConfig {
    input: Option<PathBuf>,
    codebook: Option<PathBuf>,
    mode: Mode,
    position_encoding: PositionEncoding,
}

impl Default for TokenizeConfig {
    fn default() -> Self {
        Self {
            input: None,
            codebook: None,
            mode: Mode::Finetune,
            position_encoding: PositionEncoding::Joint,
        }
    }
}

fn tokenize(run: &mut Run, args: &RunArgs) -> CliResult {
    let cfg = run.configure(&TokenizeConfig::default(), args)?;
    let frames = run.frames(&cfg.input, "input")?;
    let cb = run.codebook(&cfg.codebook)?;
    let vocab = build_vocab(&cb.config(), cfg.position_encoding);
    let seqs = par_map(&frames, run.workers, |f| encode_frame(f, &cb, &vocab, cfg.mode))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let mut bytes = Vec::new();
    write_records(&mut bytes, &seqs)?;
    run.write("tokens.bin", bytes)?;
    let preview: String = seqs.iter().take(5).map(|s| render_sequence(s, &vocab) + "\n").collect();
    run.write("preview.txt", preview)?;
    let mean_len = seqs.iter().map(|s| s.len()).sum::<usize>() as f64 / seqs.len() as f64;
    run.write_json(
        "summary.json",
        &json!({"sequences": seqs.len(), "mean_length": mean_len, "vocab_size": vocab.size()}),
    )?;
    print!(
        "{}",
        table(&[
            ("sequences", seqs.len().to_string()),
            ("mean length", format!("{mean_len:.2}")),
            ("vocab size", vocab.size().to_string()),
        ])
    );
    Ok(())
}

// pretrain / finetune

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainCmdConfig {
    train: Option<PathBuf>,
    val: Option<PathBuf>,
    codebook: Option<PathBuf>,
    /// Starting checkpoint; its architecture and precision take precedence
    /// over `model`.
    init: Option<PathBuf>,
    position_encoding: PositionEncoding,
    model: ModelConfig,
    training: TrainConfig,
}

impl TrainCmdConfig {
    fn defaults(stage: Stage) -> Self {
        Self {
            train: None,
            val: None,
            codebook: None,
            init: None,
            position_encoding: PositionEncoding::Joint,
            model: ModelConfig::default(),
            training: TrainConfig::for_stage(stage),
        }
    }
}

struct StageInputs<'a> {
    stage: Stage,
    cfg: &'a TrainCmdConfig,
    frames: &'a [MolecularFrame],
    val: Option<&'a [MolecularFrame]>,
    codebook: &'a QuantileCodebook,
    vocab: &'a Vocabulary,
}

fn train_cmd(run: &mut Run, args: &RunArgs, stage: Stage) -> CliResult {
    let cfg = run.configure(&TrainCmdConfig::defaults(stage), args)?;
    if cfg.training.stage != stage {
        return Err(usage("training.stage does not match the command"));
    }
    cfg.training.validate().map_err(usage)?;
    run.seed = Some(cfg.training.seed);
    let frames = run.frames(&cfg.train, "train")?;
    let val = match cfg.val {
        Some(_) => Some(run.frames(&cfg.val, "val")?),
        None => None,
    };
    let cb = run.codebook(&cfg.codebook)?;
    let init = match cfg.init {
        Some(_) => Some(run.checkpoint(&cfg.init, Some(&cb))?),
        None => None,
    };
    let vocab = match &init {
        Some(ck) => with_checkpoint!(ck, c => vocab_for(c, &cb)),
        None => build_vocab(&cb.config(), cfg.position_encoding),
    };
    let inputs = StageInputs {
        stage,
        cfg: &cfg,
        frames: &frames,
        val: val.as_deref(),
        codebook: &cb,
        vocab: &vocab,
    };
    match init {
        Some(ck) => with_checkpoint!(ck, c => train_model(run, c.model, &inputs)),
        None => {
            let mut mc = cfg.model;
            mc.vocab_size = vocab.size();
            mc.validate().map_err(usage)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
            match mc.precision {
                Precision::F32 => train_model(run, init_model::<f32, _>(&mc, &mut rng)?, &inputs),
                Precision::F64 => train_model(run, init_model::<f64, _>(&mc, &mut rng)?, &inputs),
            }
        }
    }
}

fn train_model<R: Real>(run: &mut Run, mut model: Model<R>, inp: &StageInputs<'_>) -> CliResult {
    let data = TrainingSet {
        frames: inp.frames,
        codebook: inp.codebook,
        vocab: inp.vocab,
    };
    let report = match inp.stage {
        Stage::Pretrain => pretrain(&mut model, &data, &inp.cfg.training)?,
        Stage::Finetune => finetune(&mut model, &data, &inp.cfg.training)?,
    };
    let losses = report.losses();
    let mut ck = Checkpoint::new(model, inp.codebook.hash());
    ck.step = report.steps as u64;
    ck.optimizer = Some(report.optimizer);
    ck.vocab = Some(inp.vocab.clone());
    ck.history = report.history.clone();
    ck.train_config = Some(inp.cfg.training.clone());
    let path = run.out_dir.join("checkpoint.bin");
    save_checkpoint(&ck, &path)?;
    run.outputs.push(path);
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &report.history)?;
    run.write("metrics.csv", csv)?;

    let mut rows = vec![
        ("parameters", ck.model.count_params().0.to_string()),
        ("steps", report.steps.to_string()),
        ("first loss", format!("{:.6}", losses.first().copied().unwrap_or(f64::NAN))),
        ("final loss", format!("{:.6}", losses.last().copied().unwrap_or(f64::NAN))),
        ("skipped steps", report.guard.total_skips.to_string()),
    ];
    let mut summary = json!({
        "steps": report.steps,
        "final_loss": losses.last(),
        "skipped_steps": report.guard.total_skips,
        "lr_halvings": report.guard.halvings,
    });
    if let Some(val) = inp.val {
        match inp.stage {
            Stage::Pretrain => {
                let seqs = val
                    .iter()
                    .map(|f| encode_frame(f, inp.codebook, inp.vocab, Mode::Pretrain))
                    .collect::<Result<Vec<_>, _>>()?;
                let ce = cross_entropy_loss(&ck.model, &seqs)?;
                summary["val_cross_entropy"] = json!(ce);
                rows.push(("val cross-entropy", format!("{ce:.6}")));
            }
            Stage::Finetune => {
                let (m, _) = evaluate(&ck.model, val, inp.codebook, inp.vocab)?;
                rows.push(("val energy MAE (meV)", format!("{:.3}", m.energy_mae_mev)));
                rows.push(("val force MAE (meV/Å)", format!("{:.3}", m.force_mae_mev_per_a)));
                summary["val"] = serde_json::to_value(&m)?;
            }
        }
    }
    run.write_json("summary.json", &summary)?;
    print!("{}", table(&rows));
    Ok(())
}

// eval

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalConfig {
    /// Labelled reference frames.
    input: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    codebook: Option<PathBuf>,
    /// Frames whose energies/forces are taken as predictions instead of a model.
    predictions: Option<PathBuf>,
}

fn metrics_rows(m: &EvalMetrics) -> Vec<(&'static str, String)> {
    vec![
        ("frames", m.n_frames.to_string()),
        ("energy MAE (meV)", format!("{:.4}", m.energy_mae_mev)),
        ("force MAE (meV/Å)", format!("{:.4}", m.force_mae_mev_per_a)),
        ("force cosine", format!("{:.6}", m.force_cosine)),
        ("force std (meV/Å)", format!("{:.4}", m.force_std_mev_per_a)),
        ("net force (meV/Å)", format!("{:.4}", m.net_force_mev_per_a)),
    ]
}

fn eval_cmd(run: &mut Run, args: &RunArgs) -> CliResult {
    let cfg = run.configure(&EvalConfig::default(), args)?;
    let frames = run.frames(&cfg.input, "input")?;
    let (metrics, preds) = if cfg.predictions.is_some() {
        let given = run.frames(&cfg.predictions, "predictions")?;
        let preds = given
            .iter()
            .enumerate()
            .map(|(i, f)| match (f.energy, &f.forces) {
                (Some(energy), Some(forces)) => Ok(Prediction {
                    energy,
                    forces: forces.clone(),
                }),
                _ => Err(anyhow!("prediction frame {i} lacks energy or forces")),
            })
            .collect::<Result<Vec<_>, _>>()?;
        (metrics_from_predictions(&preds, &frames)?, preds)
    } else {
        let cb = run.codebook(&cfg.codebook)?;
        let ck = run.checkpoint(&cfg.checkpoint, Some(&cb))?;
        with_checkpoint!(&ck, c => evaluate(&c.model, &frames, &cb, &vocab_for(c, &cb))?)
    };
    run.write_json("metrics.json", &metrics)?;
    let mut csv = String::from("n_frames,energy_mae_mev,force_mae_mev_per_a,force_cosine,force_std_mev_per_a\n");
    writeln!(
        csv,
        "{},{},{},{},{}",
        metrics.n_frames,
        metrics.energy_mae_mev,
        metrics.force_mae_mev_per_a,
        metrics.force_cosine,
        metrics.force_std_mev_per_a
    )
    .expect("string write");
    run.write("metrics.csv", csv)?;
    let predicted: Vec<MolecularFrame> = frames
        .iter()
        .zip(&preds)
        .map(|(f, p)| MolecularFrame {
            energy: Some(p.energy),
            forces: Some(p.forces.clone()),
            ..f.clone()
        })
        .collect();
    run.write("predictions.xyz", write_xyz(&predicted))?;
    print!("{}", table(&metrics_rows(&metrics)));
    Ok(())
}

// attn-analyze

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttnConfig {
    input: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    codebook: Option<PathBuf>,
    mode: Mode,
    max_frames: usize,
    n_quantiles: usize,
    delta: f64,
    n_percentiles: usize,
}

impl Default for AttnConfig {
    fn default() -> Self {
        Self {
            input: None,
            checkpoint: None,
            codebook: None,
            mode: Mode::Pretrain,
            max_frames: 64,
            n_quantiles: 20,
            delta: 0.9,
            n_percentiles: 10,
        }
    }
}

fn curves_csv(header: &str, curves: &[DistanceCurve]) -> String {
    let mut s = format!("layer,{header},mean,count\n");
    for c in curves {
        for p in &c.points {
            writeln!(s, "{},{},{},{}", c.layer, p.x, p.mean, p.count).expect("string write");
        }
    }
    s
}

fn attn_analyze(run: &mut Run, args: &RunArgs) -> CliResult {
    let cfg = run.configure(&AttnConfig::default(), args)?;
    let mut frames = run.frames(&cfg.input, "input")?;
    frames.truncate(cfg.max_frames.max(1));
    let cb = run.codebook(&cfg.codebook)?;
    let ck = run.checkpoint(&cfg.checkpoint, Some(&cb))?;
    let (seqs, records) = with_checkpoint!(&ck, c => {
        let vocab = vocab_for(c, &cb);
        let out = par_map(&frames, run.workers, |f| -> anyhow::Result<_> {
            let seq = encode_frame(f, &cb, &vocab, cfg.mode)?;
            let (_, rec) = match cfg.mode {
                Mode::Pretrain => c.model.forward_causal(&seq, true)?,
                Mode::Finetune => c.model.forward_bidirectional(&seq, true)?,
            };
            Ok((seq, rec.expect("attention captured")))
        });
        out.into_iter().collect::<anyhow::Result<Vec<_>>>()?.into_iter().unzip::<_, _, Vec<DualSequence>, Vec<_>>()
    });
    let buckets: Vec<Vec<Bucket>> = seqs.iter().map(bucket_tokens).collect();
    let items: Vec<_> = records.iter().zip(&buckets).map(|(r, b)| (r, b.as_slice())).collect();
    let mass = attention_by_token_type_pooled(&items)?;
    let mut tt = String::from("layer,query,key,fraction\n");
    for (l, rows) in mass.layers.iter().enumerate() {
        for q in Bucket::ALL {
            if let Some(row) = rows[q.index()] {
                for k in Bucket::ALL {
                    writeln!(tt, "{l},{},{},{}", q.name(), k.name(), row[k.index()]).expect("string write");
                }
            }
        }
    }
    run.write("token_types.csv", tt)?;
    let dist = attention_vs_distance(&records, &seqs, &frames, cfg.n_quantiles)?;
    run.write("attention_distance.csv", curves_csv("distance", &dist))?;
    let radius = radius_vs_density(&records, &seqs, &frames, cfg.delta, cfg.n_percentiles)?;
    run.write("radius_density.csv", curves_csv("density", &radius))?;
    run.write_json(
        "analysis.json",
        &json!({"token_types": mass, "attention_distance": dist, "radius_density": radius}),
    )?;
    let mut rows = vec![("frames", frames.len().to_string())];
    let last = mass.layers.len().saturating_sub(1);
    if let Some(row) = mass.layers.get(last).and_then(|r| r[Bucket::Positions.index()]) {
        rows.push((
            "last-layer position→position",
            format!("{:.4}", row[Bucket::Positions.index()]),
        ));
    }
    print!("{}", table(&rows));
    Ok(())
}

// scaling-fit

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScalingConfig {
    /// CSV with header columns `n`, `loss` and optionally `d`.
    input: Option<PathBuf>,
}

fn read_loss_table(path: &Path) -> anyhow::Result<Vec<(f64, Option<f64>, f64)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| anyhow!("{} is empty", path.display()))?
        .split(',')
        .map(|h| h.trim().to_lowercase())
        .collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let n_col = col("n").ok_or_else(|| anyhow!("{}: missing column `n`", path.display()))?;
    let l_col = col("loss").ok_or_else(|| anyhow!("{}: missing column `loss`", path.display()))?;
    let d_col = col("d");
    lines
        .enumerate()
        .map(|(i, line)| {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            let get = |c: usize| -> anyhow::Result<f64> {
                cells
                    .get(c)
                    .ok_or_else(|| anyhow!("row {}: missing cell", i + 2))?
                    .parse()
                    .with_context(|| format!("row {}: not a number", i + 2))
            };
            Ok((get(n_col)?, d_col.map(get).transpose()?, get(l_col)?))
        })
        .collect()
}

fn scaling_fit(run: &mut Run, args: &RunArgs) -> CliResult {
    let cfg = run.configure(&ScalingConfig::default(), args)?;
    let path = run.input(&cfg.input, "input")?;
    let rows = read_loss_table(&path)?;
    if rows.iter().all(|r| r.1.is_some()) {
        let pts: Vec<(f64, f64, f64)> = rows.iter().map(|r| (r.0, r.1.expect("d present"), r.2)).collect();
        let fit = fit_joint_scaling(&pts)?;
        run.write_json("fit.json", &json!({"kind": "joint", "fit": fit}))?;
        print!(
            "{}",
            table(&[
                ("form", "L = L_inf + A/N^alpha + B/D^beta".into()),
                ("L_inf", format!("{:.6}", fit.l_inf)),
                ("A, alpha", format!("{:.4e}, {:.4}", fit.a, fit.alpha)),
                ("B, beta", format!("{:.4e}, {:.4}", fit.b, fit.beta)),
                ("rmse(log L)", format!("{:.4e}", fit.rmse_log)),
            ])
        );
    } else {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.0, r.2)).collect();
        let fit = fit_power_law(&pts)?;
        run.write_json("fit.json", &json!({"kind": "power_law", "fit": fit}))?;
        print!(
            "{}",
            table(&[
                ("form", "L = (N/N_c)^alpha".into()),
                ("alpha", format!("{:.5}", fit.alpha)),
                ("N_c", format!("{:.5e}", fit.n_c)),
                ("R^2", format!("{:.6}", fit.r_squared)),
            ])
        );
    }
    Ok(())
}

// isoflop

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IsoflopConfig {
    /// `fit.json` written by scaling-fit on an (N, D, loss) table.
    fit: Option<PathBuf>,
    budgets: Vec<f64>,
    grid_points: usize,
}

impl Default for IsoflopConfig {
    fn default() -> Self {
        Self {
            fit: None,
            budgets: vec![1e15, 1e16, 1e17, 1e18, 1e19],
            grid_points: 200,
        }
    }
}

#[derive(Deserialize)]
struct StoredJointFit {
    kind: String,
    fit: serde_json::Value,
}

fn isoflop(run: &mut Run, args: &RunArgs) -> CliResult {
    let cfg = run.configure(&IsoflopConfig::default(), args)?;
    let path = run.input(&cfg.fit, "fit")?;
    let stored: StoredJointFit = serde_json::from_str(&std::fs::read_to_string(&path)?)
        .with_context(|| format!("cannot parse {}", path.display()))?;
    if stored.kind != "joint" {
        return Err(anyhow!("{} holds a {} fit; isoflop needs a joint fit", path.display(), stored.kind).into());
    }
    let fit: JointScalingFit = serde_json::from_value(stored.fit)?;
    if cfg.budgets.is_empty() {
        return Err(usage("budgets must not be empty"));
    }
    let mut curves_csv = String::from("compute,n,d,loss\n");
    let mut optima_csv = String::from("compute,n_opt,d_opt,loss_opt\n");
    let mut curves = Vec::new();
    for &c in &cfg.budgets {
        let curve = isoflop_curve(&fit, c, &six_n, cfg.grid_points)?;
        for (n, d, l) in &curve.points {
            writeln!(curves_csv, "{c},{n},{d},{l}").expect("string write");
        }
        writeln!(optima_csv, "{c},{},{},{}", curve.n_opt, curve.d_opt, curve.l_opt).expect("string write");
        curves.push(curve);
    }
    run.write("isoflop.csv", curves_csv)?;
    run.write("optima.csv", optima_csv)?;
    let trend = if curves.len() >= 2 {
        let x: Vec<f64> = curves.iter().map(|c| c.compute.ln()).collect();
        let y: Vec<f64> = curves.iter().map(|c| c.n_opt.ln()).collect();
        let (slope, intercept, r2) = linear_fit(&x, &y)?;
        Some(json!({"exponent": slope, "log_prefactor": intercept, "r_squared": r2}))
    } else {
        None
    };
    run.write_json("isoflop.json", &json!({"optima": curves.iter().map(|c| json!({"compute": c.compute, "n_opt": c.n_opt, "d_opt": c.d_opt, "loss_opt": c.l_opt})).collect::<Vec<_>>(), "n_opt_trend": trend}))?;
    let mut out = String::from("compute       n_opt         d_opt         loss\n");
    for c in &curves {
        writeln!(out, "{:<12.4e}  {:<12.4e}  {:<12.4e}  {:.6}", c.compute, c.n_opt, c.d_opt, c.l_opt)
            .expect("string write");
    }
    print!("{out}");
    Ok(())
}

// logprob

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogprobConfig {
    input: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    codebook: Option<PathBuf>,
    /// Gaussian coordinate noise (Å) added before scoring.
    noise: f64,
    seed: u64,
}

fn logprob(run: &mut Run, args: &RunArgs) -> CliResult {
    let cfg = run.configure(&LogprobConfig::default(), args)?;
    run.seed = Some(cfg.seed);
    let mut frames = run.frames(&cfg.input, "input")?;
    if cfg.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let dist = Normal::new(0.0, cfg.noise).map_err(usage)?;
        for f in &mut frames {
            f.positions.iter_mut().flatten().for_each(|x| *x += rng.sample(dist));
        }
    } else if cfg.noise < 0.0 {
        return Err(usage("noise must be >= 0"));
    }
    let cb = run.codebook(&cfg.codebook)?;
    let ck = run.checkpoint(&cfg.checkpoint, Some(&cb))?;
    let scores = with_checkpoint!(&ck, c => {
        let vocab = vocab_for(c, &cb);
        par_map(&frames, run.workers, |f| -> anyhow::Result<(usize, f64)> {
            let seq = encode_frame(f, &cb, &vocab, Mode::Pretrain)?;
            Ok((seq.len(), sequence_log_prob(&c.model, &seq)?))
        })
        .into_iter()
        .collect::<anyhow::Result<Vec<_>>>()?
    });
    let mut csv = String::from("frame,n_atoms,tokens,log_prob\n");
    for (i, ((t, lp), f)) in scores.iter().zip(&frames).enumerate() {
        writeln!(csv, "{i},{},{t},{lp}", f.n_atoms()).expect("string write");
    }
    run.write("logprob.csv", csv)?;
    let mean = scores.iter().map(|s| s.1).sum::<f64>() / scores.len() as f64;
    run.write_json("summary.json", &json!({"frames": scores.len(), "mean_log_prob": mean, "noise": cfg.noise}))?;
    print!(
        "{}",
        table(&[("frames", scores.len().to_string()), ("mean log-prob", format!("{mean:.4}"))])
    );
    Ok(())
}

// md

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ProviderKind {
    Lj,
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Ensemble {
    Nve,
    Nvt,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdConfig {
    input: Option<PathBuf>,
    frame_index: usize,
    provider: ProviderKind,
    checkpoint: Option<PathBuf>,
    codebook: Option<PathBuf>,
    force_kind: ForceKind,
    freeze_tokens: bool,
    ensemble: Ensemble,
    dt_fs: f64,
    n_steps: usize,
    stride: usize,
    /// Initial Maxwell–Boltzmann and thermostat temperature (K).
    temperature: f64,
    /// fs⁻¹.
    friction: f64,
    seed: u64,
    r_max: f64,
    n_bins: usize,
    /// Trajectory (xyz) whose h(r) is compared against.
    reference: Option<PathBuf>,
}

impl Default for MdConfig {
    fn default() -> Self {
        Self {
            input: None,
            frame_index: 0,
            provider: ProviderKind::Lj,
            checkpoint: None,
            codebook: None,
            force_kind: ForceKind::Conservative,
            freeze_tokens: false,
            ensemble: Ensemble::Nvt,
            dt_fs: 1.0,
            n_steps: 1000,
            stride: 10,
            temperature: 300.0,
            friction: 0.01,
            seed: 0,
            r_max: 10.0,
            n_bins: 200,
            reference: None,
        }
    }
}

fn md_cmd(run: &mut Run, args: &RunArgs) -> CliResult {
    let cfg = run.configure(&MdConfig::default(), args)?;
    run.seed = Some(cfg.seed);
    if cfg.stride == 0 || !(cfg.dt_fs > 0.0) || cfg.n_bins == 0 || !(cfg.r_max > 0.0) {
        return Err(usage("stride, dt_fs, n_bins and r_max must be positive"));
    }
    let frames = run.frames(&cfg.input, "input")?;
    let frame = frames
        .get(cfg.frame_index)
        .ok_or_else(|| usage(format!("frame_index {} out of range ({} frames)", cfg.frame_index, frames.len())))?
        .clone();
    let reference = match cfg.reference {
        Some(_) => Some(run.frames(&cfg.reference, "reference")?),
        None => None,
    };
    match cfg.provider {
        ProviderKind::Lj => simulate(run, &cfg, &frame, reference.as_deref(), &LennardJones::default()),
        ProviderKind::Model => {
            let cb = run.codebook(&cfg.codebook)?;
            let ck = run.checkpoint(&cfg.checkpoint, Some(&cb))?;
            with_checkpoint!(&ck, c => {
                let vocab = vocab_for(c, &cb);
                let mut provider = ModelProvider::new(&c.model, &cb, &vocab, cfg.force_kind);
                if cfg.freeze_tokens {
                    provider = provider.frozen_at(&frame)?;
                }
                simulate(run, &cfg, &frame, reference.as_deref(), &provider)
            })
        }
    }
}

fn simulate<P: ForceProvider>(
    run: &mut Run,
    cfg: &MdConfig,
    frame: &MolecularFrame,
    reference: Option<&[MolecularFrame]>,
    provider: &P,
) -> CliResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = MdState::from_frame(frame, provider)?;
    if cfg.temperature > 0.0 {
        maxwell_boltzmann(&mut state, cfg.temperature, &mut rng);
    }
    let thermostat = (cfg.ensemble == Ensemble::Nvt).then_some(Langevin {
        temperature: cfg.temperature,
        friction: cfg.friction,
    });
    let (traj, _) = run_md(&state, provider, cfg.dt_fs, cfg.n_steps, cfg.stride, thermostat, &mut rng)?;
    run.write("trajectory.xyz", traj.to_xyz())?;
    let mut energy = String::from("step,time_fs,potential,kinetic,total\n");
    for s in &traj.samples {
        writeln!(
            energy,
            "{},{},{},{},{}",
            s.step,
            s.step as f64 * cfg.dt_fs,
            s.potential,
            s.kinetic,
            s.total()
        )
        .expect("string write");
    }
    run.write("energy.csv", energy)?;
    let h = h_of_r(&traj, cfg.r_max, cfg.n_bins)?;
    run.write("h_r.csv", h.to_csv())?;
    let drift = energy_drift(&traj)?;
    let n = traj.atomic_numbers.len() as f64;
    let temps: Vec<f64> = traj
        .samples
        .iter()
        .map(|s| 2.0 * s.kinetic / (3.0 * n * moltx::md::K_B))
        .collect();
    let t_mean = temps.iter().sum::<f64>() / temps.len() as f64;
    let t_std = (temps.iter().map(|t| (t - t_mean).powi(2)).sum::<f64>() / temps.len() as f64).sqrt();
    let mae = match reference {
        Some(r) => {
            let pos: Vec<_> = r.iter().map(|f| f.positions.clone()).collect();
            Some(h_mae(&h, &h_of_r_frames(&pos, cfg.r_max, cfg.n_bins)?)?)
        }
        None => None,
    };
    run.write_json(
        "summary.json",
        &json!({
            "samples": traj.samples.len(),
            "energy_drift": drift,
            "temperature_mean": t_mean,
            "temperature_std": t_std,
            "h_mae": mae,
            "unstable": traj.unstable,
        }),
    )?;
    let mut rows = vec![
        ("samples", traj.samples.len().to_string()),
        ("relative energy drift", format!("{drift:.3e}")),
        ("temperature (K)", format!("{t_mean:.2} ± {t_std:.2}")),
    ];
    if let Some(m) = mae {
        rows.push(("h(r) MAE", format!("{m:.4}")));
    }
    if let Some(u) = &traj.unstable {
        rows.push(("stopped early", u.clone()));
    }
    print!("{}", table(&rows));
    Ok(())
}

// equivariance

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EquivarianceConfig {
    input: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    codebook: Option<PathBuf>,
    n_rotations: usize,
    max_frames: usize,
    /// Rotations in the frame-averaged predictor; 0 disables it.
    frame_average: usize,
    seed: u64,
}

impl Default for EquivarianceConfig {
    fn default() -> Self {
        Self {
            input: None,
            checkpoint: None,
            codebook: None,
            n_rotations: 20,
            max_frames: 20,
            frame_average: 0,
            seed: 0,
        }
    }
}

fn equivariance(run: &mut Run, args: &RunArgs) -> CliResult {
    let cfg = run.configure(&EquivarianceConfig::default(), args)?;
    run.seed = Some(cfg.seed);
    if cfg.n_rotations == 0 {
        return Err(usage("n_rotations must be positive"));
    }
    let mut frames = run.frames(&cfg.input, "input")?;
    frames.truncate(cfg.max_frames.max(1));
    let cb = run.codebook(&cfg.codebook)?;
    let ck = run.checkpoint(&cfg.checkpoint, Some(&cb))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rotations: Vec<_> = (0..cfg.n_rotations).map(|_| random_rotation(&mut rng)).collect();
    let averaging: Vec<_> = (0..cfg.frame_average).map(|_| random_rotation(&mut rng)).collect();
    let results = with_checkpoint!(&ck, c => {
        let vocab = vocab_for(c, &cb);
        let plain = ModelForces { model: &c.model, codebook: &cb, vocab: &vocab };
        let averaged = FrameAveraged { inner: &plain, rotations: averaging.clone() };
        par_map(&frames, run.workers, |f| -> anyhow::Result<(f64, Option<f64>)> {
            let a = equivariance_cossim_with(&plain, f, &rotations)?.mean_cossim;
            let b = if cfg.frame_average > 0 {
                Some(equivariance_cossim_with(&averaged, f, &rotations)?.mean_cossim)
            } else {
                None
            };
            Ok((a, b))
        })
        .into_iter()
        .collect::<anyhow::Result<Vec<_>>>()?
    });
    let mut csv = String::from("frame,cossim,cossim_frame_averaged\n");
    for (i, (a, b)) in results.iter().enumerate() {
        let b = b.map(|v| v.to_string()).unwrap_or_default();
        writeln!(csv, "{i},{a},{b}").expect("string write");
    }
    run.write("equivariance.csv", csv)?;
    let mean = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
    let mean_avg = (cfg.frame_average > 0)
        .then(|| results.iter().filter_map(|r| r.1).sum::<f64>() / results.len() as f64);
    run.write_json(
        "summary.json",
        &json!({"frames": results.len(), "mean_cossim": mean, "mean_cossim_frame_averaged": mean_avg}),
    )?;
    let mut rows = vec![("frames", results.len().to_string()), ("mean cossim", format!("{mean:.6}"))];
    if let Some(m) = mean_avg {
        rows.push(("mean cossim (frame-averaged)", format!("{m:.6}")));
    }
    print!("{}", table(&rows));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_preserves_order() {
        let v: Vec<usize> = (0..37).collect();
        assert_eq!(par_map(&v, 4, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert_eq!(par_map(&v, 1, |x| x + 1)[36], 37);
    }

    #[test]
    fn loss_table_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "n,d,loss\n1e6,1e9,2.5\n2e6,1e9,2.1\n").unwrap();
        let rows = read_loss_table(&p).unwrap();
        assert_eq!(rows, vec![(1e6, Some(1e9), 2.5), (2e6, Some(1e9), 2.1)]);
        std::fs::write(&p, "n,loss\n1,x\n").unwrap();
        assert!(read_loss_table(&p).is_err());
    }

    #[test]
    fn table_alignment() {
        assert_eq!(table(&[("a", "1".into()), ("bbb", "2".into())]), "a    1\nbbb  2\n");
    }
}
