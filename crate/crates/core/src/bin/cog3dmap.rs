use std::collections::BTreeMap;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cog3dmap::bench::{self, BuildConfig, FrameSource};
use cog3dmap::fusion::{export, PosEmbedConfig, Projector};
use cog3dmap::memory::DEFAULT_TOKEN_BUDGET;
use cog3dmap::patching::DEFAULT_PATCH_SIZE;
use cog3dmap::persistence::{export_ply, load_map, save_map, save_stream, WeightBlob};
use cog3dmap::{Error, GeomPatchEncoder, RenderOptions, SceneSpec, StepReport, ThresholdPolicy};

const EXIT_USAGE: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser)]
#[command(name = "cog3dmap", version, about = "Build and inspect compact 3D token maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate every frame in order and write the map.
    Build {
        #[command(flatten)]
        run: RunArgs,
        /// Map file to write.
        #[arg(long, default_value = "map.c3dm")]
        out: PathBuf,
        /// Token cap for the written map.
        #[arg(long, default_value_t = DEFAULT_TOKEN_BUDGET)]
        budget: usize,
        /// Add per-phase wall-clock columns to the report.
        #[arg(long)]
        timings: bool,
    },
    /// Compare the map's token count with concatenating every frame.
    Compare {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Build maps from several frame counts of the same trajectory.
    Framesweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated frame counts.
        #[arg(long, value_delimiter = ',', required = true)]
        counts: Vec<usize>,
    },
    /// Print a map's header and per-timestep token histogram.
    Stats {
        #[arg(long)]
        map: PathBuf,
    },
    /// Write a map as PLY, and optionally its fused token stream.
    Export {
        #[arg(long)]
        map: PathBuf,
        /// PLY file to write.
        #[arg(long)]
        out: PathBuf,
        /// Also write the time-ordered fused token stream here.
        #[arg(long)]
        stream: Option<PathBuf>,
        /// Weight blob with the projector and positional embedding; a zero
        /// projector and no embedding are used without it.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Directory of .c3df frame files, read in file-name order.
    #[arg(long, conflicts_with = "scene", required_unless_present = "scene")]
    frames: Option<PathBuf>,
    /// Synthetic scene description (TOML or JSON).
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Distance threshold: static:V or dynamic:RATIO,MIN,MAX.
    #[arg(long, default_value = "static:0.2")]
    delta: ThresholdPolicy,
    /// Patch edge in pixels; frame files default to their header value.
    #[arg(long)]
    patch: Option<usize>,
    /// Semantic feature width of rendered scenes.
    #[arg(long, default_value_t = 32)]
    dimf: usize,
    /// Geometric feature width of rendered scenes.
    #[arg(long, default_value_t = 8)]
    dimg: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ReportFormat::Csv)]
    report: ReportFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Json,
}

impl RunArgs {
    fn source(&self) -> Result<FrameSource, Error> {
        match (&self.frames, &self.scene) {
            (Some(dir), None) => {
                let src = FrameSource::from_dir(dir, self.patch)?;
                Ok(src)
            }
            (None, Some(path)) => Ok(FrameSource::Scene {
                spec: SceneSpec::load(path)?,
                opts: RenderOptions {
                    dim_f: self.dimf,
                    dim_g: self.dimg,
                    patch_size: self.patch.unwrap_or(DEFAULT_PATCH_SIZE),
                },
            }),
            _ => Err(Error::Config("exactly one of --frames or --scene is required".into())),
        }
    }

    fn config(&self) -> BuildConfig {
        BuildConfig { policy: self.delta, encoder: GeomPatchEncoder::MaskedMean, seed: self.seed }
    }
}

#[derive(Serialize)]
struct StepRow {
    step: u32,
    retained: usize,
    updated: usize,
    added: usize,
    total_before: usize,
    total_after: usize,
    delta: f64,
    skipped: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    timing_us: Option<[u128; 5]>,
}

impl StepRow {
    fn new(r: &StepReport, timings: bool) -> Self {
        let t = &r.timing;
        StepRow {
            step: r.step,
            retained: r.retained,
            updated: r.updated,
            added: r.added,
            total_before: r.total_before,
            total_after: r.total_after,
            delta: r.delta_used,
            skipped: r.skipped,
            timing_us: timings.then(|| {
                [t.index, t.distances, t.updates, t.additions, t.total].map(|d| d.as_micros())
            }),
        }
    }
}

fn write_steps(out: &mut impl Write, rows: &[StepRow], format: ReportFormat) -> io::Result<()> {
    match format {
        ReportFormat::Json => writeln!(out, "{}", serde_json::to_string_pretty(rows).map_err(io::Error::other)?),
        ReportFormat::Csv => {
            let timed = rows.first().is_some_and(|r| r.timing_us.is_some());
            write!(out, "step,retained,updated,added,total_before,total_after,delta,skipped")?;
            if timed {
                write!(out, ",index_us,distances_us,updates_us,additions_us,total_us")?;
            }
            writeln!(out)?;
            for r in rows {
                write!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    r.step, r.retained, r.updated, r.added, r.total_before, r.total_after, r.delta, r.skipped
                )?;
                if let Some(t) = r.timing_us {
                    write!(out, ",{},{},{},{},{}", t[0], t[1], t[2], t[3], t[4])?;
                }
                writeln!(out)?;
            }
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Build { run, out: path, budget, timings } => {
            let source = run.source()?;
            let (state, reports) = bench::build_all(&source, &run.config())?;
            let saved = state.subsample(budget, run.seed)?;
            save_map(&saved, &path)?;
            let rows: Vec<StepRow> = reports.iter().map(|r| StepRow::new(r, timings)).collect();
            write_steps(&mut out, &rows, run.report)?;
            log::info!("wrote {} of {} tokens to {}", saved.len(), state.len(), path.display());
        }
        Command::Compare { run } => {
            let source = run.source()?;
            let (report, _) = bench::compare(&source, &run.config())?;
            match run.report {
                ReportFormat::Json => writeln!(out, "{}", serde_json::to_string_pretty(&report).map_err(io::Error::other)?)?,
                ReportFormat::Csv => {
                    writeln!(out, "frames,patches_per_frame,baseline_tokens,map_tokens,reduction")?;
                    writeln!(
                        out,
                        "{},{},{},{},{}",
                        report.frames, report.patches_per_frame, report.baseline_tokens, report.map_tokens, report.reduction
                    )?;
                }
            }
        }
        Command::Framesweep { run, counts } => {
            let source = run.source()?;
            let rows = bench::framesweep(&source, &counts, &run.config())?;
            match run.report {
                ReportFormat::Json => writeln!(out, "{}", serde_json::to_string_pretty(&rows).map_err(io::Error::other)?)?,
                ReportFormat::Csv => {
                    writeln!(out, "frames,tokens,reduction,chamfer_to_previous")?;
                    for r in rows {
                        let c = r.chamfer_to_previous.map(|c| c.to_string()).unwrap_or_default();
                        writeln!(out, "{},{},{},{c}", r.frames, r.tokens, r.reduction)?;
                    }
                }
            }
        }
        Command::Stats { map } => {
            let state = load_map(&map)?;
            writeln!(out, "tokens: {}", state.len())?;
            writeln!(out, "step: {}", state.step)?;
            writeln!(out, "dims: {} semantic, {} geometric", state.dim_f, state.dim_g)?;
            writeln!(out, "delta: {}", state.policy)?;
            writeln!(out, "seed: {}", state.seed)?;
            let mut hist: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
            for t in &state.tokens {
                hist.entry(t.created_step).or_default().0 += 1;
                hist.entry(t.updated_step).or_default().1 += 1;
            }
            writeln!(out, "timestep,created,last_updated")?;
            for (ts, (c, u)) in hist {
                writeln!(out, "{ts},{c},{u}")?;
            }
        }
        Command::Export { map, out: path, stream, weights } => {
            let state = load_map(&map)?;
            export_ply(&state, &path)?;
            if let Some(stream_path) = stream {
                let (proj, pe) = match weights {
                    Some(w) => load_weights(&w, state.dim_f, state.dim_g)?,
                    None => (Projector::zeros(state.dim_f, state.dim_g), PosEmbedConfig::None),
                };
                save_stream(&export(&state, &proj, &pe)?, &stream_path)?;
            }
            writeln!(out, "{} vertices", state.len())?;
        }
    }
    Ok(())
}

fn load_weights(path: &Path, dim_f: usize, dim_g: usize) -> Result<(Projector, PosEmbedConfig), Error> {
    let blob = WeightBlob::load(path)?;
    Ok((blob.projector(dim_f, dim_g)?, blob.pos_embed()?))
}

fn configure_threads() {
    let Ok(raw) = std::env::var("COG3DMAP_THREADS") else { return };
    match raw.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("could not cap threads at {n}: {e}");
            }
        }
        _ => log::warn!("ignoring COG3DMAP_THREADS={raw:?}"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    configure_threads();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                ExitCode::from(EXIT_INPUT)
            } else {
                ExitCode::from(EXIT_INTERNAL)
            }
        }
    }
}
