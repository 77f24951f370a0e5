use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;

use gssc::bitstream::{parse_pattern, read_container, write_container, CodedStream};
use gssc::error::{Error, Result};
use gssc::geometry::{load_targets, CameraRig};
use gssc::metrics::{bd_rate, emit_rd, read_rd_csv, QualityMetric};
use gssc::pipeline::codec::{decode_and_render, decode_sequence, encode_sequence};
use gssc::pipeline::eval::{evaluate_stream, rd_spearman, sweep};
use gssc::pipeline::synth::{load_frames, make_synthetic, read_dataset, tensor_to_png, write_dataset, SceneSpec, Sequence};
use gssc::pipeline::train::train_model;
use gssc::pipeline::{Model, RunConfig};

#[derive(Parser)]
#[command(name = "gssc", version, about = "Stereo semantic codec with Gaussian-splatting novel views")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Plain-text `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set gop=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Start from the toy preset instead of the full-size defaults.
    #[arg(long)]
    toy: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, self.toy) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, true) => RunConfig::toy(),
            (None, false) => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::InvalidArgument(format!("override `{kv}` is not KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Encode a rectified stereo sequence into a container.
    Encode {
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        #[arg(long)]
        cams: PathBuf,
        #[arg(long)]
        qp: u8,
        #[arg(long)]
        pattern: Option<String>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Decode a container to source frames and, with `--targets`, novel views.
    Decode {
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, value_parser = parse_background, default_value = "0,0,0")]
        background: [f64; 3],
    },
    /// Render novel views of a container without writing the source frames.
    Render {
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, value_parser = parse_background, default_value = "0,0,0")]
        background: [f64; 3],
    },
    /// Score a container, or sweep QPs over a dataset, against ground-truth target views.
    Eval {
        /// Dataset directory as written by `synth`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Score this container instead of encoding the dataset.
        #[arg(long)]
        stream: Option<PathBuf>,
        /// QPs to sweep when no stream is given.
        #[arg(long, default_value = "7,15,23,31,39,47")]
        qps: String,
        /// Write `<stem>.csv` and `<stem>.svg`.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long, default_value = "gssc")]
        label: String,
        /// Report per-frame encode and decode wall-clock time.
        #[arg(long)]
        timing: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a toy model on synthetic or on-disk datasets.
    TrainToy {
        #[arg(short, long)]
        output: PathBuf,
        /// Dataset directories; synthetic scenes are generated when none are given.
        #[arg(long)]
        data: Vec<PathBuf>,
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        #[arg(long, default_value_t = 4)]
        frames: usize,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// BD-rate of `test` against `anchor` from RD CSV files.
    Bdrate {
        anchor: PathBuf,
        test: PathBuf,
        #[arg(long, default_value = "psnr")]
        metric: String,
    },
    /// Render a synthetic dataset from a JSON scene file or `SEED[:FRAMES]`.
    Synth {
        spec: String,
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn parse_background(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string())).collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| "expected three comma-separated values".to_string())
}

/// Writes `bytes` next to `path` and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn read_stream(path: &Path) -> Result<CodedStream> {
    read_container(&std::fs::read(path)?)
}

fn write_views(dir: &Path, name: &str, frames: impl IntoIterator<Item = impl std::borrow::Borrow<gssc::tensor::Tensor>>) -> Result<()> {
    let sub = dir.join(name);
    std::fs::create_dir_all(&sub)?;
    for (t, img) in frames.into_iter().enumerate() {
        tensor_to_png(img.borrow(), sub.join(format!("{t:04}.png")))?;
    }
    Ok(())
}

fn write_novel(dir: &Path, novel: &[Vec<gssc::tensor::Tensor>]) -> Result<()> {
    let views = novel.first().map_or(0, Vec::len);
    for k in 0..views {
        write_views(dir, &format!("novel{k}"), novel.iter().map(|f| &f[k]))?;
    }
    Ok(())
}

fn synth_spec(spec: &str) -> Result<SceneSpec> {
    if Path::new(spec).is_file() {
        let text = std::fs::read_to_string(spec)?;
        return serde_json::from_str(&text).map_err(|e| Error::Format(format!("scene file: {e}")));
    }
    let bad = || Error::InvalidArgument(format!("scene `{spec}` is neither a file nor SEED[:FRAMES]"));
    let (seed, frames) = spec.split_once(':').unwrap_or((spec, "8"));
    Ok(SceneSpec::random(seed.parse().map_err(|_| bad())?, frames.parse().map_err(|_| bad())?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Encode { left, right, cams, qp, pattern, ckpt, output, config } => {
            let mut cfg = config.load()?;
            cfg.base_qp = qp;
            if let Some(p) = pattern {
                cfg.pattern = parse_pattern(&p)?;
            }
            cfg.validate()?;
            let model = Model::load(&ckpt)?;
            let rig = CameraRig::load(&cams)?;
            let (l, r) = (load_frames(&left)?, load_frames(&right)?);
            let enc = encode_sequence(&model, &rig, &cfg, &l, &r)?;
            let bytes = write_container(&enc.stream)?;
            write_atomic(&output, &bytes)?;
            info!("{} frames, {} bytes, {:.4} bpp", l.len(), bytes.len(), gssc::metrics::bpp(&enc.stream).1);
        }
        Command::Decode { input, ckpt, targets, output, background } => {
            let model = Model::load(&ckpt)?;
            let stream = read_stream(&input)?;
            std::fs::create_dir_all(&output)?;
            let sources = match targets {
                Some(t) => {
                    let out = decode_and_render(&model, &stream, &load_targets(t)?, background)?;
                    write_novel(&output, &out.novel)?;
                    out.sources
                }
                None => {
                    let (w, h) = (stream.header.width as usize, stream.header.height as usize);
                    decode_sequence(&model, &stream)?.recon.iter().map(|r| r.sources(h, w)).collect()
                }
            };
            write_views(&output, "left", sources.iter().map(|s| &s[0]))?;
            write_views(&output, "right", sources.iter().map(|s| &s[1]))?;
        }
        Command::Render { input, ckpt, targets, output, background } => {
            let model = Model::load(&ckpt)?;
            let out = decode_and_render(&model, &read_stream(&input)?, &load_targets(targets)?, background)?;
            std::fs::create_dir_all(&output)?;
            write_novel(&output, &out.novel)?;
        }
        Command::Eval { data, ckpt, stream, qps, output, label, timing, config } => {
            let cfg = config.load()?;
            let model = Model::load(&ckpt)?;
            let seq = read_dataset(&data)?;
            let points = match stream {
                Some(s) => {
                    let stream = read_stream(&s)?;
                    let (point, frames, src) = evaluate_stream(&model, &stream, &seq, cfg.background, &label)?;
                    for (t, f) in frames.iter().enumerate() {
                        println!("frame {t}: psnr {:.3} dB, ssim {:.4}", f.psnr, f.ssim);
                    }
                    println!("source psnr {src:.3} dB");
                    vec![point]
                }
                None => {
                    let qps: Vec<u8> = qps.split(',').map(|q| q.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad QP `{q}`")))).collect::<Result<_>>()?;
                    let points = sweep(&model, &cfg, std::slice::from_ref(&seq), &qps, &label)?;
                    if points.len() > 1 {
                        println!("spearman(bpp, psnr) {:.3}", rd_spearman(&points)?);
                    }
                    points
                }
            };
            for p in &points {
                println!("{}: {:.4} bpp, psnr {:.3} dB, ssim {:.4}", p.label, p.bpp, p.psnr, p.ssim);
            }
            if timing {
                report_timing(&model, &cfg, &seq)?;
            }
            if let Some(stem) = output {
                emit_rd(&points, stem)?;
            }
        }
        Command::TrainToy { output, data, scenes, frames, resume, config } => {
            let cfg = if config.config.is_none() && !config.toy {
                ConfigArgs { toy: true, ..config }.load()?
            } else {
                config.load()?
            };
            let seqs: Vec<Sequence> = if data.is_empty() {
                (0..scenes as u64).map(|i| make_synthetic(&SceneSpec::random(cfg.seed.wrapping_add(i), frames))).collect()
            } else {
                data.iter().map(read_dataset).collect::<Result<_>>()?
            };
            let mut model = match resume {
                Some(p) => Model::load(p)?,
                None => Model::init(&cfg)?,
            };
            let total = cfg.stage1_steps + cfg.stage2_steps;
            let report = train_model(&mut model, &cfg, &seqs, &mut |r| {
                if r.step % 50 == 0 || r.step + 1 == total {
                    info!("step {} ({:?}) loss {:.4}", r.step, r.stage, r.loss);
                }
            })?;
            let tmp = output.with_extension(format!("{}.tmp", std::process::id()));
            model.save(&tmp)?;
            std::fs::rename(&tmp, &output)?;
            println!("trained {total} steps in {:.1} s", report.seconds);
        }
        Command::Bdrate { anchor, test, metric } => {
            let metric = match metric.to_ascii_lowercase().as_str() {
                "psnr" => QualityMetric::Psnr,
                "ssim" => QualityMetric::Ssim,
                m => return Err(Error::InvalidArgument(format!("unknown metric `{m}`"))),
            };
            let v = bd_rate(&read_rd_csv(anchor)?, &read_rd_csv(test)?, metric)?;
            println!("{v:.3}%");
        }
        Command::Synth { spec, output } => {
            let scene = synth_spec(&spec)?;
            write_dataset(&make_synthetic(&scene), &output)?;
        }
    }
    Ok(())
}

fn report_timing(model: &Model, cfg: &RunConfig, seq: &Sequence) -> Result<()> {
    let t0 = Instant::now();
    let enc = encode_sequence(model, &seq.rig, cfg, &seq.left, &seq.right)?;
    let t1 = Instant::now();
    let out = decode_and_render(model, &enc.stream, &seq.rig.targets, cfg.background)?;
    let t2 = Instant::now();
    let n = out.sources.len().max(1) as f64;
    let (tx, rx) = ((t1 - t0).as_secs_f64() * 1e3 / n, (t2 - t1).as_secs_f64() * 1e3 / n);
    println!("timing: encode {tx:.1} ms/frame, decode+render {rx:.1} ms/frame, {:.2} FPS", 1e3 / rx);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("GSSC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("GSSC_THREADS ignored: {e}");
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
