//! The `naflow` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::flow::{build_flow, gray_base, montage, render_heatmap, write_maps, FlowSeed};
use crate::image::{load_input, read_support};
use crate::model::{forward_trace, load_model, predict, Prediction};
use crate::nabp::{compute_retention, count_neuron_times, dump_bpfm};
use crate::par::{with_thread_cap, Exec};
use crate::verify::verify_model;

pub const THREADS_ENV: &str = "NAFLOW_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "naflow",
    version,
    about = "Per-layer neuron-abandoning attention maps for small CNNs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the prediction (class and score, or the feature vector).
    Run {
        model_dir: PathBuf,
        image: PathBuf,
        /// Report this class's score instead of the argmax.
        #[arg(long)]
        class: Option<usize>,
    },
    /// Write one overlay per layer, a montage and the raw maps.
    Flow(FlowArgs),
    /// Run the Jacobian, round-trip, coefficient and contribution-weight checks.
    Verify {
        model_dir: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Neuron-time accounting for one layer.
    Count {
        model_dir: PathBuf,
        image: PathBuf,
        /// One-based layer index.
        #[arg(long)]
        layer: usize,
    },
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("seed").required(true).args(["class", "support"])))]
pub struct FlowArgs {
    pub model_dir: PathBuf,
    pub image: PathBuf,
    #[arg(long)]
    pub class: Option<usize>,
    /// Support feature vector: JSON array or raw little-endian f32.
    #[arg(long)]
    pub support: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Montage tiles per row (default: up to 4).
    #[arg(long)]
    pub columns: Option<usize>,
    /// Also write the back-propagated feature maps.
    #[arg(long)]
    pub dump_bpfm: bool,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let threads = match std::env::var(THREADS_ENV) {
        Err(_) => 0,
        Ok(s) if s.trim().is_empty() => 0,
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) => n,
            Err(_) => {
                eprintln!("error: {THREADS_ENV} must be a non-negative integer, got {s:?}");
                return 2;
            }
        },
    };
    match with_thread_cap(threads, |exec| execute(&cli.command, exec)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: &Command, exec: Exec) -> Result<i32> {
    let mut out = std::io::stdout().lock();
    let w = |e: std::io::Error| Error::io("<stdout>", e);
    match command {
        Command::Run {
            model_dir,
            image,
            class,
        } => {
            let model = load_model(model_dir)?;
            let input = load_input(image, model.input_shape())?;
            let trace = forward_trace(&model, &input.tensor, exec)?;
            match predict(&trace, model.head(), *class)? {
                Prediction::Score { class, score } => writeln!(out, "class {class} score {score:.6}").map_err(w)?,
                Prediction::Feature(v) => {
                    if class.is_some() {
                        return Err(Error::Format("--class needs a classifier model".into()));
                    }
                    let parts: Vec<String> = v.values().iter().map(|x| format!("{x:.6}")).collect();
                    writeln!(out, "feature [{}]", parts.join(", ")).map_err(w)?
                }
            }
        }
        Command::Flow(args) => cmd_flow(args, exec, &mut out)?,
        Command::Verify { model_dir, seed } => {
            let model = load_model(model_dir)?;
            let report = verify_model(&model, *seed, exec)?;
            for c in &report.checks {
                writeln!(
                    out,
                    "{} {}: residual {:.3e} (tolerance {:.0e})",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.residual,
                    c.tolerance
                )
                .map_err(w)?;
            }
            for n in &report.notes {
                writeln!(out, "note: {n}").map_err(w)?;
            }
            let failed = report.checks.iter().filter(|c| !c.passed).count();
            if failed == 0 {
                writeln!(out, "all {} checks passed", report.checks.len()).map_err(w)?;
            } else {
                writeln!(out, "{failed} of {} checks failed", report.checks.len()).map_err(w)?;
                return Ok(1);
            }
        }
        Command::Count {
            model_dir,
            image,
            layer,
        } => {
            let model = load_model(model_dir)?;
            let input = load_input(image, model.input_shape())?;
            let trace = forward_trace(&model, &input.tensor, exec)?;
            let retention = compute_retention(&model, &trace);
            let r = count_neuron_times(&model, &trace, &retention, *layer)?;
            writeln!(
                out,
                "layer {} ({}): total {}, decision {}, abandoned {}, distinct {}",
                r.layer, r.kind, r.total, r.decision, r.abandoned, r.distinct
            )
            .map_err(w)?;
        }
    }
    Ok(0)
}

fn cmd_flow(args: &FlowArgs, exec: Exec, out: &mut impl Write) -> Result<()> {
    let w = |e: std::io::Error| Error::io("<stdout>", e);
    let model = load_model(&args.model_dir)?;
    let input = load_input(&args.image, model.input_shape())?;
    let seed = match (&args.class, &args.support) {
        (Some(c), _) => FlowSeed::Class(*c),
        (None, Some(p)) => FlowSeed::Support(read_support(p)?),
        (None, None) => unreachable!("clap requires a seed"),
    };
    let trace = forward_trace(&model, &input.tensor, exec)?;
    let flow = build_flow(&model, &trace, &seed, exec)?;
    let base = match input.image {
        Some(img) => img,
        None => gray_base(&input.tensor)?,
    };
    let overlays = flow
        .maps
        .iter()
        .map(|m| render_heatmap(&m.normalized, Some(&base)))
        .collect::<Result<Vec<_>>>()?;
    let columns = args.columns.unwrap_or(flow.maps.len().min(4));
    let grid = montage(&flow, Some(&base), columns)?;

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".naflow-")
        .tempdir_in(&args.out)
        .map_err(|e| Error::io(&args.out, e))?;
    let dir = staging.path();
    let mut names = Vec::new();
    for (m, img) in flow.maps.iter().zip(&overlays) {
        let name = format!("layer_{:03}.ppm", m.layer);
        img.write_ppm(&dir.join(&name))?;
        names.push(name);
    }
    grid.write_ppm(&dir.join("montage.ppm"))?;
    names.push("montage.ppm".into());
    write_maps(&flow, dir)?;
    names.extend([crate::flow::MAPS_INDEX.to_string(), crate::flow::MAPS_BLOB.to_string()]);
    if args.dump_bpfm {
        dump_bpfm(&flow.bpfm, dir)?;
        names.extend([crate::nabp::BPFM_INDEX.to_string(), crate::nabp::BPFM_BLOB.to_string()]);
    }
    publish(dir, &args.out, &names)?;

    writeln!(
        out,
        "wrote {} layer maps and a montage to {}",
        flow.maps.len(),
        args.out.display()
    )
    .map_err(w)?;
    for d in flow.diagnostics.iter().filter(|d| d.fallback()) {
        writeln!(
            out,
            "note: layer {} ({}) used an approximate reconstruction",
            d.layer + 1,
            d.kind
        )
        .map_err(w)?;
    }
    Ok(())
}

/// Moves finished files out of the staging directory.
fn publish(staging: &Path, out: &Path, names: &[String]) -> Result<()> {
    for name in names {
        let target = out.join(name);
        fs::rename(staging.join(name), &target).map_err(|e| Error::io(&target, e))?;
    }
    Ok(())
}
