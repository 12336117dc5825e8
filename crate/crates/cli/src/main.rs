use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sttv_core::bitstream::Container;
use sttv_core::codec::{decode_sequence, encode_sequence, ExternalIntra, FrameKind, IntraCodec, Model, SequenceParams, VerbatimIntra};
use sttv_core::config::{Ablation, ModelConfig};
use sttv_core::eval::{
    bd_rate, curve_from_rows, curve_row, frame_rows, read_curve_csv, run_codec_eval_many, write_curve_csv, write_frame_csv, EvalSetup,
    FrameRow, Quality,
};
use sttv_core::frame::{read_sequence, write_png, write_raw_rgb24, PixelFrame};
use sttv_core::nn::Params;
use sttv_core::training::{train_loop, Checkpoint, Distortion, TrainConfig};

/// Learned inter-frame video codec.
#[derive(Parser)]
#[command(name = "sttv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model at one rate-distortion trade-off.
    Train(TrainArgs),
    /// Compress a sequence into a container.
    Encode(EncodeArgs),
    /// Reconstruct frames from a container.
    Decode(DecodeArgs),
    /// Run the GOP evaluation protocol, or score existing reconstructions.
    Eval(EvalArgs),
    /// BD-rate of one RD curve CSV against another.
    Bdrate(BdrateArgs),
    /// Check the fast kernels against their reference loops.
    Selftest,
}

#[derive(Args)]
struct InputArgs {
    /// PNG directory or raw RGB24 file.
    #[arg(long = "input", short = 'i', required = true)]
    inputs: Vec<PathBuf>,
    /// Frame width of raw input.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Frames read per sequence.
    #[arg(long, default_value_t = 96)]
    frames: usize,
}

impl InputArgs {
    fn dims(&self) -> Option<(usize, usize)> {
        self.width.zip(self.height)
    }

    fn read(&self, path: &Path) -> Result<Vec<PixelFrame>> {
        let frames = read_sequence(path, self.dims(), Some(self.frames)).with_context(|| format!("reading {}", path.display()))?;
        if frames.is_empty() {
            bail!("{} holds no frames", path.display());
        }
        Ok(frames)
    }
}

#[derive(Args)]
struct CheckpointArg {
    /// Checkpoint file; relative names are also looked up in the checkpoint directory.
    #[arg(long, short = 'c')]
    checkpoint: Option<PathBuf>,
    /// Select `lambda<N>.ckpt` from the checkpoint directory.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, env = "STTV_CHECKPOINT_DIR")]
    checkpoint_dir: Option<PathBuf>,
}

fn checkpoint_name(lambda: f64) -> String {
    format!("lambda{lambda}.ckpt")
}

impl CheckpointArg {
    fn resolve(&self) -> Result<PathBuf> {
        let candidate = match (&self.checkpoint, self.lambda) {
            (Some(p), _) => p.clone(),
            (None, Some(l)) => PathBuf::from(checkpoint_name(l)),
            (None, None) => bail!("pass --checkpoint or --lambda"),
        };
        if candidate.exists() || candidate.is_absolute() {
            return Ok(candidate);
        }
        match &self.checkpoint_dir {
            Some(dir) if dir.join(&candidate).exists() => Ok(dir.join(candidate)),
            _ => Ok(candidate),
        }
    }

    fn load(&self) -> Result<Loaded> {
        let path = self.resolve()?;
        let ckpt = Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        let model = ckpt.model()?;
        Ok(Loaded { ckpt, model })
    }
}

struct Loaded {
    ckpt: Checkpoint,
    model: Model,
}

#[derive(Args)]
struct IntraArgs {
    /// Shell command that turns `{in}` (PNG) into `{out}`; verbatim storage when absent.
    #[arg(long, requires = "intra_decode")]
    intra_encode: Option<String>,
    /// Shell command that turns `{in}` back into a PNG at `{out}`.
    #[arg(long, requires = "intra_encode")]
    intra_decode: Option<String>,
}

impl IntraArgs {
    fn codec(&self) -> Box<dyn IntraCodec> {
        match (&self.intra_encode, &self.intra_decode) {
            (Some(e), Some(d)) => Box::new(ExternalIntra {
                encode_cmd: e.clone(),
                decode_cmd: d.clone(),
            }),
            _ => Box::new(VerbatimIntra),
        }
    }
}

#[derive(Args)]
struct GopArgs {
    #[arg(long, default_value_t = 32)]
    intra_period: usize,
    /// Reference buffer capacity.
    #[arg(long, default_value_t = 3)]
    gop_refs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    Full,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    lambda: f64,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    preset: Preset,
    /// Components to switch off: rdt, mgp, sfd.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
    /// Frames per training clip.
    #[arg(long, default_value_t = 7)]
    clip_len: usize,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    /// Train on 1 - MS-SSIM instead of MSE.
    #[arg(long)]
    msssim: bool,
    /// Per-step CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Output checkpoint; defaults to `lambda<N>.ckpt` in the checkpoint directory.
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
    #[arg(long, env = "STTV_CHECKPOINT_DIR")]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    checkpoint: CheckpointArg,
    #[command(flatten)]
    gop: GopArgs,
    #[command(flatten)]
    intra: IntraArgs,
    #[arg(long, short = 'o')]
    output: PathBuf,
    /// Per-frame CSV of the encoder-side reconstructions.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long = "input", short = 'i')]
    input: PathBuf,
    #[command(flatten)]
    checkpoint: CheckpointArg,
    #[arg(long, default_value_t = 3)]
    gop_refs: usize,
    #[command(flatten)]
    intra: IntraArgs,
    /// PNG directory, or a raw RGB24 file when the name ends in `.rgb`.
    #[arg(long, short = 'o')]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    input: InputArgs,
    /// One checkpoint per curve point.
    #[arg(long = "checkpoint", short = 'c')]
    checkpoints: Vec<PathBuf>,
    #[arg(long, env = "STTV_CHECKPOINT_DIR")]
    checkpoint_dir: Option<PathBuf>,
    #[command(flatten)]
    gop: GopArgs,
    #[command(flatten)]
    intra: IntraArgs,
    /// Score this decoded sequence against the single input instead of coding.
    #[arg(long, conflicts_with = "checkpoints")]
    recon: Option<PathBuf>,
    /// Container whose record types and sizes label the `--recon` rows.
    #[arg(long, requires = "recon")]
    stream: Option<PathBuf>,
    /// Per-frame CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// RD curve CSV, one row per checkpoint.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Skip the decode-and-compare pass.
    #[arg(long)]
    no_verify: bool,
}

#[derive(Args)]
struct BdrateArgs {
    test: PathBuf,
    anchor: PathBuf,
    #[arg(long, value_enum, default_value_t = QualityArg::Psnr)]
    quality: QualityArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum QualityArg {
    Psnr,
    Msssim,
}

fn sequence_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn train(a: TrainArgs) -> Result<()> {
    let ablation = Ablation::disabling(&a.ablate).map_err(anyhow::Error::msg)?;
    let (cfg, mut tc) = match a.preset {
        Preset::Toy => (ModelConfig::toy(), TrainConfig::toy(a.lambda, a.steps, a.seed)),
        Preset::Full => (ModelConfig::full(), TrainConfig::new(a.lambda, a.steps, a.seed)),
    };
    tc.batch_size = a.batch_size.unwrap_or(tc.batch_size);
    tc.crop = a.crop.unwrap_or(tc.crop);
    tc.lr = a.lr.unwrap_or(tc.lr);
    tc.warmup_epochs = a.warmup_epochs.unwrap_or(tc.warmup_epochs);
    if a.msssim {
        tc.distortion = Distortion::MsSsim;
    }
    if a.clip_len < 2 {
        bail!("--clip-len must be at least 2");
    }
    let mut clips = Vec::new();
    for path in &a.input.inputs {
        let frames = a.input.read(path)?;
        clips.extend(frames.chunks(a.clip_len).filter(|c| c.len() >= 2).map(<[PixelFrame]>::to_vec));
    }
    let mut params = Params::default();
    let model = Model::new(&mut params, cfg.with_ablation(ablation), a.seed)?;
    let mut log = a.log.as_deref().map(create).transpose()?;
    let out = train_loop(&model, &params, &clips, &tc, log.as_mut().map(|w| w as &mut dyn Write))?;
    if let Some(last) = out.history.last() {
        eprintln!(
            "step {}: bpp_mv {:.4} bpp_resi {:.4} distortion {:.6} loss {:.4}",
            last.step, last.bpp_mv, last.bpp_resi, last.distortion, last.loss
        );
    }
    let path = match (a.output, a.checkpoint_dir) {
        (Some(p), _) => p,
        (None, Some(dir)) => dir.join(checkpoint_name(a.lambda)),
        (None, None) => PathBuf::from(checkpoint_name(a.lambda)),
    };
    Checkpoint::capture(&model, &out.params, a.lambda, a.steps as u64, Some(&out.rng)).save(&path)?;
    eprintln!("saved {}", path.display());
    Ok(())
}

fn sequence_params(gop: &GopArgs, lambda: f64) -> SequenceParams {
    SequenceParams {
        intra_period: gop.intra_period,
        gop_refs: gop.gop_refs,
        lambda,
    }
}

fn encode(a: EncodeArgs) -> Result<()> {
    let Loaded { ckpt, model } = a.checkpoint.load()?;
    let path = a.input.inputs.first().expect("clap requires an input");
    let frames = a.input.read(path)?;
    if frames.len() < a.input.frames {
        eprintln!("warning: {} frames requested, {} available", a.input.frames, frames.len());
    }
    let intra = a.intra.codec();
    let enc = encode_sequence(&model, &ckpt.params, &ckpt.tables, &frames, &sequence_params(&a.gop, ckpt.lambda), intra.as_ref())?;
    let bytes = enc.container.to_bytes();
    std::fs::write(&a.output, &bytes).with_context(|| format!("writing {}", a.output.display()))?;
    if let Some(csv) = &a.csv {
        let kinds: Vec<FrameKind> = enc.log.iter().map(|l| l.kind).collect();
        let sizes: Vec<usize> = enc.log.iter().map(|l| l.bytes).collect();
        write_frame_csv(create(csv)?, &frame_rows(&sequence_name(path), &frames, &enc.recon, &kinds, &sizes)?)?;
    }
    let px = frames.len() * frames[0].width() * frames[0].height();
    println!("{} frames, {} bytes, {:.4} bpp", frames.len(), bytes.len(), 8.0 * bytes.len() as f64 / px as f64);
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let Loaded { ckpt, model } = a.checkpoint.load()?;
    let bytes = std::fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let container = Container::from_bytes(&bytes)?;
    let intra = a.intra.codec();
    let frames = decode_sequence(&model, &ckpt.params, &ckpt.tables, &container, &ckpt.config_hash(), a.gop_refs, intra.as_ref())?;
    write_frames(&a.output, &frames)?;
    println!("{} frames decoded", frames.len());
    Ok(())
}

fn write_frames(out: &Path, frames: &[PixelFrame]) -> Result<()> {
    if out.extension().is_some_and(|e| e == "rgb") {
        write_raw_rgb24(out, frames)?;
        return Ok(());
    }
    std::fs::create_dir_all(out)?;
    for (i, f) in frames.iter().enumerate() {
        write_png(&out.join(format!("frame_{i:05}.png")), f)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if let Some(recon) = &a.recon {
        return eval_recon(&a, recon);
    }
    if a.checkpoints.is_empty() {
        bail!("pass at least one --checkpoint, or --recon");
    }
    let mut sequences = Vec::new();
    for path in &a.input.inputs {
        sequences.push((sequence_name(path), a.input.read(path)?));
    }
    let intra = a.intra.codec();
    let mut rows = Vec::new();
    let mut curve = Vec::new();
    for c in &a.checkpoints {
        let loaded = CheckpointArg {
            checkpoint: Some(c.clone()),
            lambda: None,
            checkpoint_dir: a.checkpoint_dir.clone(),
        }
        .load()?;
        let setup = EvalSetup {
            model: &loaded.model,
            params: &loaded.ckpt.params,
            tables: &loaded.ckpt.tables,
            sequence: sequence_params(&a.gop, loaded.ckpt.lambda),
            intra: intra.as_ref(),
            frames: a.input.frames,
            verify_decode: !a.no_verify,
        };
        let reports = run_codec_eval_many(&setup, &sequences)?;
        for r in &reports {
            r.warnings.iter().for_each(|w| eprintln!("warning: {w}"));
            println!(
                "lambda {} {}: {} I + {} P, {:.4} bpp, {:.3} dB, ms-ssim {:.5}",
                loaded.ckpt.lambda,
                r.name,
                r.count(FrameKind::Intra),
                r.count(FrameKind::Inter),
                r.bpp,
                r.psnr,
                r.msssim
            );
            rows.extend(r.rows.iter().cloned());
        }
        curve.push(curve_row(loaded.ckpt.lambda, &reports));
    }
    curve.sort_by(|x, y| x.bpp.total_cmp(&y.bpp));
    if let Some(p) = &a.csv {
        write_frame_csv(create(p)?, &rows)?;
    }
    if let Some(p) = &a.curve {
        write_curve_csv(create(p)?, &curve)?;
    }
    Ok(())
}

fn eval_recon(a: &EvalArgs, recon: &Path) -> Result<()> {
    let [path] = a.input.inputs.as_slice() else {
        bail!("--recon scores exactly one --input sequence");
    };
    let source = a.input.read(path)?;
    let decoded = read_sequence(recon, a.input.dims(), Some(source.len()))?;
    if decoded.len() != source.len() {
        bail!("{} reconstructed frames for {} source frames", decoded.len(), source.len());
    }
    let (kinds, sizes) = match &a.stream {
        Some(s) => {
            let c = Container::from_bytes(&std::fs::read(s)?)?;
            if c.records.len() != source.len() {
                bail!("stream holds {} records for {} frames", c.records.len(), source.len());
            }
            (c.records.iter().map(|r| r.kind).collect(), c.records.iter().map(|r| r.payload.len()).collect())
        }
        None => (
            sttv_core::codec::gop_frame_kinds(source.len(), a.gop.intra_period),
            vec![0; source.len()],
        ),
    };
    let rows: Vec<FrameRow> = frame_rows(&sequence_name(path), &source, &decoded, &kinds, &sizes)?;
    let n = rows.len() as f64;
    println!(
        "{} frames, {:.3} dB, ms-ssim {:.5}",
        rows.len(),
        rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        rows.iter().map(|r| r.msssim).sum::<f64>() / n
    );
    if let Some(p) = &a.csv {
        write_frame_csv(create(p)?, &rows)?;
    }
    Ok(())
}

fn bdrate(a: BdrateArgs) -> Result<()> {
    let quality = match a.quality {
        QualityArg::Psnr => Quality::Psnr,
        QualityArg::Msssim => Quality::MsSsim,
    };
    let load = |p: &Path| -> Result<_> {
        let rows = read_curve_csv(File::open(p).with_context(|| format!("opening {}", p.display()))?)?;
        Ok(curve_from_rows(&rows, quality)?)
    };
    let v = bd_rate(&load(&a.test)?, &load(&a.anchor)?)?;
    println!("BD-rate: {v:.2}%");
    Ok(())
}

fn selftest() -> bool {
    let checks = sttv_core::selftest::run_all();
    for c in &checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    checks.iter().all(|c| c.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::Bdrate(a) => bdrate(a),
        Command::Selftest => {
            return if selftest() { ExitCode::SUCCESS } else { ExitCode::FAILURE };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
