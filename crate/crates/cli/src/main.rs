//! `skws`: build, convert, verify, benchmark and featurize from the
//! command line. Every command prints a JSON report on stdout; errors go to
//! stderr with class-specific exit codes (0 ok, 2 usage, 3 not streamable,
//! 4 verification failure, 5 i/o or format).

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use skws_core::error::Error;
use skws_core::format::{load_graph, save_graph, save_tensor};
use skws_core::frontend::{
    FeatureConfig, FeatureExtractor, StreamingFeatureExtractor, TransformKind,
};
use skws_core::rng::{uniform_tensor, SplitMix64};
use skws_core::runtime::{new_session, run_non_streaming, step_external, zero_states};
use skws_core::tensor::max_abs_diff;
use skws_core::zoo::{build, count_params, ModelId, ZooSpec};
use skws_core::{corpus, to_streaming, wav, Graph, Mode, StateMode, Tensor};

#[derive(Parser)]
#[command(name = "skws", version, about = "Streaming keyword-spotting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a zoo model with seeded weights and save it.
    Build {
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Training-time sequence length baked into whole-sequence layers.
        #[arg(long, default_value_t = 49)]
        frames: usize,
        #[arg(long, default_value_t = 20)]
        features: usize,
        #[arg(long, default_value_t = 12)]
        classes: usize,
    },
    /// Convert a non-streaming model file to streaming mode.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: StateModeArg,
        /// Sequence length used to size whole-sequence buffers.
        #[arg(long, default_value_t = 49)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a streaming model against its non-streaming source, or an
    /// internal-mode file against an external-mode one.
    Verify {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        stream: PathBuf,
        #[arg(long, default_value_t = 49)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Measure latency: one step for streaming models, a whole stored-length
    /// pass for non-streaming ones.
    Bench {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Include feature extraction in the timed region.
        #[arg(long)]
        end_to_end: bool,
    },
    /// Extract MFCC features from a mono 16 kHz WAV into a tensor file.
    Featurize {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long, value_enum, default_value_t = TransformArg::Fft)]
        transform: TransformArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the deterministic test corpus (WAVs plus golden features).
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StateModeArg {
    Internal,
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransformArg {
    Fft,
    Dft,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidSpec(_) | Error::WrongMode { .. } | Error::InvalidConfig(_) => 2,
        Error::NotStreamable { .. } => 3,
        Error::Io(_) | Error::Format { .. } | Error::UnsupportedWav(_) | Error::TooShort { .. } => {
            5
        }
        _ => 1,
    }
}

fn run(command: Command) -> Result<u8, Error> {
    match command {
        Command::Build {
            model,
            seed,
            out,
            frames,
            features,
            classes,
        } => cmd_build(&model, seed, &out, frames, features, classes),
        Command::Convert {
            input,
            mode,
            frames,
            out,
        } => cmd_convert(&input, mode, frames, &out),
        Command::Verify {
            input,
            stream,
            frames,
            seed,
        } => cmd_verify(&input, &stream, frames, seed),
        Command::Bench {
            input,
            trials,
            warmup,
            seed,
            end_to_end,
        } => cmd_bench(&input, trials, warmup, seed, end_to_end),
        Command::Featurize {
            wav: wav_path,
            transform,
            out,
        } => cmd_featurize(&wav_path, transform, &out),
        Command::GenCorpus { out } => {
            let files = corpus::generate(&out)?;
            let names: Vec<String> = files
                .iter()
                .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
                .collect();
            println!(
                "{}",
                json!({ "dir": out.display().to_string(), "files": names })
            );
            Ok(0)
        }
    }
}

fn cmd_build(
    model: &str,
    seed: u64,
    out: &PathBuf,
    frames: usize,
    features: usize,
    classes: usize,
) -> Result<u8, Error> {
    let Some(id) = ModelId::parse(model) else {
        let names: Vec<&str> = ModelId::ALL.iter().map(|m| m.name()).collect();
        return Err(Error::InvalidSpec(format!(
            "unknown model `{model}`; valid names: {}",
            names.join(", ")
        )));
    };
    let spec = ZooSpec {
        model: id,
        input_frames: frames,
        input_features: features,
        num_classes: classes,
        seed,
    };
    let graph = build(&spec)?.infer_shapes(frames)?;
    save_graph(&graph, out)?;
    println!(
        "{}",
        json!({
            "model": id.name(),
            "mode": graph.mode.name(),
            "params": count_params(&graph),
            "out": out.display().to_string(),
        })
    );
    Ok(0)
}

fn cmd_convert(
    input: &PathBuf,
    mode: StateModeArg,
    frames: usize,
    out: &PathBuf,
) -> Result<u8, Error> {
    let graph = load_graph(input)?;
    let state_mode = match mode {
        StateModeArg::Internal => StateMode::Internal,
        StateModeArg::External => StateMode::External,
    };
    let streamed = to_streaming(&graph, state_mode, frames)?;
    save_graph(&streamed, out)?;
    let states: Vec<serde_json::Value> = streamed
        .states
        .iter()
        .map(|s| json!({ "name": s.name(), "shape": s.shape() }))
        .collect();
    println!(
        "{}",
        json!({
            "mode": streamed.mode.name(),
            "params": count_params(&streamed),
            "states": states,
            "out": out.display().to_string(),
        })
    );
    Ok(0)
}

/// `[T, coeffs]` features reshaped to the graph's per-frame geometry when
/// the element counts agree.
fn fit_frames(features: &Tensor, g: &Graph) -> Result<Tensor, Error> {
    let frame_shape = g.input_frame_shape()?;
    let per_frame: usize = frame_shape.iter().product();
    if features.frame_numel() != per_frame {
        return Err(Error::ShapeMismatch(format!(
            "feature frames carry {} values, model wants {frame_shape:?}",
            features.frame_numel()
        )));
    }
    let mut dims = vec![features.shape()[0]];
    dims.extend_from_slice(&frame_shape);
    features.reshape(dims)
}

fn random_sequence(g: &Graph, frames: usize, seed: u64) -> Result<Tensor, Error> {
    let mut shape = vec![frames];
    shape.extend(g.input_frame_shape()?);
    let mut rng = SplitMix64::new(seed);
    Ok(uniform_tensor(&mut rng, &shape, -1.0, 1.0))
}

/// Per-frame streaming outputs, whichever state mode the file uses.
/// External mode starts from zero states and threads them through.
fn stream_outputs(g: &Graph, x: &Tensor) -> Result<Vec<Tensor>, Error> {
    match g.mode {
        Mode::StreamingInternal => {
            let mut session = new_session(g)?;
            session.run_sequence(x)
        }
        Mode::StreamingExternal => {
            let mut states = zero_states(g)?;
            let mut outputs = Vec::with_capacity(x.shape()[0]);
            for t in 0..x.shape()[0] {
                let frame = x.slice_time(t, 1)?;
                let r = step_external(g, &frame, &states)?;
                states = r.new_states;
                outputs.push(r.output);
            }
            Ok(outputs)
        }
        Mode::NonStreaming => Err(Error::WrongMode {
            expected: "a streaming graph".into(),
            found: g.mode.name().into(),
        }),
    }
}

fn cmd_verify(input: &PathBuf, stream: &PathBuf, frames: usize, seed: u64) -> Result<u8, Error> {
    const TOLERANCE: f32 = 1e-5;
    let a = load_graph(input)?;
    let b = load_graph(stream)?;
    match (a.mode, b.mode) {
        (Mode::NonStreaming, m) if m.is_streaming() => {
            let x = random_sequence(&b, frames, seed)?;
            let outputs = stream_outputs(&b, &x)?;
            let mut worst = 0.0f32;
            for (t, got) in outputs.iter().enumerate() {
                let prefix = x.slice_time(0, t + 1)?.zero_left_pad_time(frames)?;
                let want = run_non_streaming(&a, &prefix)?;
                let diff = max_abs_diff(got, &want);
                if diff > worst {
                    worst = diff;
                }
            }
            let pass = worst.is_finite() && worst < TOLERANCE;
            println!(
                "{}",
                json!({
                    "kind": "stream_vs_nonstream",
                    "frames": frames,
                    "max_abs_diff": worst,
                    "tolerance": 1e-5f64,
                    "pass": pass,
                })
            );
            Ok(if pass { 0 } else { 4 })
        }
        (ma, mb) if ma.is_streaming() && mb.is_streaming() && ma != mb => {
            let x = random_sequence(&a, frames, seed)?;
            let out_a = stream_outputs(&a, &x)?;
            let out_b = stream_outputs(&b, &x)?;
            let bit_equal = out_a.iter().zip(&out_b).all(|(p, q)| p.bits_eq(q));
            let worst = out_a
                .iter()
                .zip(&out_b)
                .map(|(p, q)| max_abs_diff(p, q))
                .fold(0.0f32, f32::max);
            println!(
                "{}",
                json!({
                    "kind": "internal_vs_external",
                    "frames": frames,
                    "max_abs_diff": worst,
                    "bit_equal": bit_equal,
                    "pass": bit_equal,
                })
            );
            Ok(if bit_equal { 0 } else { 4 })
        }
        (ma, mb) => Err(Error::InvalidSpec(format!(
            "verify wants (non_streaming, streaming) or (internal, external) files, got ({}, {})",
            ma.name(),
            mb.name()
        ))),
    }
}

struct Timing {
    median_ms: f64,
    p90_ms: f64,
}

/// Median/p90 over `trials` timed calls after `warmup` untimed ones,
/// monotonic clock.
fn time_trials(trials: usize, warmup: usize, mut f: impl FnMut()) -> Timing {
    for _ in 0..warmup {
        f();
    }
    let mut samples: Vec<f64> = (0..trials.max(1))
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    samples.sort_by(|x, y| x.total_cmp(y));
    let n = samples.len();
    let median_ms = if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    };
    let p90_ms = samples[((n as f64 * 0.9).ceil() as usize).clamp(1, n) - 1];
    Timing { median_ms, p90_ms }
}

fn cmd_bench(
    input: &PathBuf,
    trials: usize,
    warmup: usize,
    seed: u64,
    end_to_end: bool,
) -> Result<u8, Error> {
    let g = load_graph(input)?;
    let params = count_params(&g);
    let cfg = FeatureConfig::default();
    let mut sink = 0.0f32;

    let timing = if g.mode == Mode::NonStreaming {
        // The stored input shape pins the pass length the model was built
        // for.
        let frames = g
            .single_input()?
            .out_shape
            .as_ref()
            .map(|s| s.dims[0])
            .unwrap_or(49);
        if end_to_end {
            let mut rng = SplitMix64::new(seed);
            let n_samples = (frames - 1) * cfg.hop_samples() + cfg.window_samples();
            let clip = uniform_tensor(&mut rng, &[n_samples], -0.5, 0.5);
            let fx = FeatureExtractor::new(cfg)?;
            // Shape compatibility check before the timed loop.
            fit_frames(&fx.extract_clip(&clip)?, &g)?;
            time_trials(trials, warmup, || {
                let features = fx.extract_clip(&clip).unwrap();
                let x = fit_frames(&features, &g).unwrap();
                sink += run_non_streaming(&g, &x).unwrap().data()[0];
            })
        } else {
            let x = random_sequence(&g, frames, seed)?;
            run_non_streaming(&g, &x)?;
            time_trials(trials, warmup, || {
                sink += run_non_streaming(&g, &x).unwrap().data()[0];
            })
        }
    } else if end_to_end {
        let mut rng = SplitMix64::new(seed);
        let hop = uniform_tensor(&mut rng, &[cfg.hop_samples()], -0.5, 0.5);
        let mut fx = StreamingFeatureExtractor::new(cfg)?;
        fx.push_hop(&hop)?; // prime so every timed hop emits a frame
        let mut step: Box<dyn FnMut(&Tensor) -> f32> = match g.mode {
            Mode::StreamingInternal => {
                let mut session = new_session(&g)?;
                Box::new(move |x| session.step(x).unwrap().output.data()[0])
            }
            _ => {
                let graph = g.clone();
                let mut states = zero_states(&g)?;
                Box::new(move |x| {
                    let r = step_external(&graph, x, &states).unwrap();
                    states = r.new_states;
                    r.output.data()[0]
                })
            }
        };
        time_trials(trials, warmup, || {
            let features = fx.push_hop(&hop).unwrap().unwrap();
            let features = features.reshape(vec![1, features.numel()]).unwrap();
            let x = fit_frames(&features, &g).unwrap();
            sink += step(&x);
        })
    } else {
        let frame = random_sequence(&g, 1, seed)?;
        match g.mode {
            Mode::StreamingInternal => {
                let mut session = new_session(&g)?;
                session.step(&frame)?;
                time_trials(trials, warmup, || {
                    sink += session.step(&frame).unwrap().output.data()[0];
                })
            }
            _ => {
                let mut states = zero_states(&g)?;
                time_trials(trials, warmup, || {
                    let r = step_external(&g, &frame, &states).unwrap();
                    states = r.new_states;
                    sink += r.output.data()[0];
                })
            }
        }
    };
    std::hint::black_box(sink);

    println!(
        "{}",
        json!({
            "mode": g.mode.name(),
            "params": params,
            "trials": trials,
            "warmup": warmup,
            "end_to_end": end_to_end,
            "median_ms": timing.median_ms,
            "p90_ms": timing.p90_ms,
        })
    );
    Ok(0)
}

fn cmd_featurize(wav_path: &PathBuf, transform: TransformArg, out: &PathBuf) -> Result<u8, Error> {
    let samples = wav::read_wav_mono_16k(wav_path)?;
    let cfg = FeatureConfig {
        transform: match transform {
            TransformArg::Fft => TransformKind::Fft,
            TransformArg::Dft => TransformKind::Dft,
        },
        ..FeatureConfig::default()
    };
    let extractor = FeatureExtractor::new(cfg)?;
    let features = extractor.extract_clip(&samples)?;
    save_tensor(&features, out)?;
    println!(
        "{}",
        json!({
            "frames": features.shape()[0],
            "coeffs": features.shape()[1],
            "out": out.display().to_string(),
        })
    );
    Ok(0)
}
