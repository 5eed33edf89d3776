//! Command-line entry point: run the odometry pipeline on a dataset,
//! synthesize datasets from scenario specs, and evaluate trajectories.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 estimator
//! divergence.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use livo::harness::{
    self, evaluate_ate, ingest, run_pipeline, Align, HarnessError, RunConfig,
    TrajectoryEstimate,
};
use livo::sim;

#[derive(Parser)]
#[command(name = "livo", about = "LiDAR-inertial-visual odometry pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MapFormat {
    Binary,
    Ascii,
}

#[derive(Subcommand)]
enum Command {
    /// Run the odometry pipeline over an on-disk dataset.
    Run {
        /// Dataset directory (imu.csv, lidar.bin, features/, …).
        #[arg(long)]
        dataset: PathBuf,
        /// Run configuration INI file.
        #[arg(long)]
        config: PathBuf,
        /// Output prefix; the trajectory is written to `PREFIX_traj.tum`.
        #[arg(long)]
        out: PathBuf,
        /// Also export the final map to `PREFIX_map.{bin,txt}`.
        #[arg(long, value_enum)]
        export_map: Option<MapFormat>,
        /// Print per-stage statistics and ingestion warnings.
        #[arg(long)]
        verbose: bool,
    },
    /// Synthesize a dataset from a scenario spec file.
    Sim {
        /// Scenario spec INI ([world], [trajectory], [noise], [rates]).
        #[arg(long)]
        spec: PathBuf,
        /// Noise / world seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset directory (created if missing).
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare an estimated trajectory against a reference.
    Eval {
        /// Estimated trajectory (TUM format).
        #[arg(long)]
        est: PathBuf,
        /// Reference trajectory (TUM format).
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Rigid alignment applied before the error is computed.
        #[arg(long, default_value = "se3")]
        align: String,
        /// Emit a machine-readable metrics object.
        #[arg(long)]
        json: bool,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

fn exit_for(err: &HarnessError) -> u8 {
    match err {
        HarnessError::Config(_) => EXIT_CONFIG,
        HarnessError::Diverged(_) => EXIT_DIVERGED,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run {
            dataset,
            config,
            out,
            export_map,
            verbose,
        } => cmd_run(&dataset, &config, &out, export_map, verbose),
        Command::Sim { spec, seed, out } => cmd_sim(&spec, seed, &out),
        Command::Eval {
            est,
            reference,
            align,
            json,
        } => cmd_eval(&est, &reference, &align, json),
    };
    match code {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}

fn cmd_run(
    dataset: &PathBuf,
    config: &PathBuf,
    out: &PathBuf,
    export_map: Option<MapFormat>,
    verbose: bool,
) -> Result<(), u8> {
    // Any failure to load the configuration file is a configuration error.
    let cfg = RunConfig::load(config).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })?;
    let streams = ingest(dataset).map_err(|e| {
        eprintln!("error: {e}");
        exit_for(&e)
    })?;
    if verbose {
        for w in &streams.report.warnings {
            eprintln!("warning: {w}");
        }
    }
    let output = run_pipeline(&streams, &cfg).map_err(|e| {
        eprintln!("error: {e}");
        exit_for(&e)
    })?;

    let traj_path = suffixed(out, "_traj.tum");
    output.trajectory.save_tum(&traj_path).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_DATA
    })?;
    eprintln!(
        "wrote {} poses to {}",
        output.trajectory.len(),
        traj_path.display()
    );

    if let Some(fmt) = export_map {
        let (path, res) = match fmt {
            MapFormat::Binary => {
                let p = suffixed(out, "_map.bin");
                let r = fs::File::create(&p)
                    .and_then(|mut f| output.map.write_binary(&mut f));
                (p, r)
            }
            MapFormat::Ascii => {
                let p = suffixed(out, "_map.txt");
                let r = fs::File::create(&p)
                    .and_then(|mut f| output.map.write_ascii(&mut f));
                (p, r)
            }
        };
        res.map_err(|e| {
            eprintln!("error: cannot write map: {e}");
            EXIT_DATA
        })?;
        eprintln!("wrote {} map points to {}", output.map.len(), path.display());
    }

    if verbose {
        print_stats(&output.stats);
    }

    if let Some(t) = output.diverged {
        eprintln!("error: estimator diverged at t={t:.3}; partial trajectory written");
        return Err(EXIT_DIVERGED);
    }
    Ok(())
}

fn print_stats(stats: &harness::RunStats) {
    eprintln!("frames:            {}", stats.frames);
    eprintln!("keyframes:         {}", stats.keyframes);
    eprintln!(
        "lidar updates:     {} ({} skipped)",
        stats.lidar_updates, stats.lidar_skipped
    );
    eprintln!(
        "visual updates:    {} ({} skipped)",
        stats.visual_updates, stats.visual_skipped
    );
    eprintln!(
        "depth association: {}/{}",
        stats.depth_associated, stats.depth_attempted
    );
    let t = &stats.timings;
    eprintln!("stage wall time (excludes queue wait):");
    eprintln!("  propagate: {:?}", t.propagate);
    eprintln!("  recombine: {:?}", t.recombine);
    eprintln!("  lidar:     {:?}", t.lidar);
    eprintln!("  depth:     {:?}", t.depth);
    eprintln!("  visual:    {:?}", t.visual);
}

fn cmd_sim(spec: &PathBuf, seed: u64, out: &PathBuf) -> Result<(), u8> {
    let text = fs::read_to_string(spec).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", spec.display());
        EXIT_CONFIG
    })?;
    let (world, traj, noise, pattern) = sim::load_scenario(&text, seed).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })?;
    fs::create_dir_all(out).map_err(|e| {
        eprintln!("error: cannot create {}: {e}", out.display());
        EXIT_DATA
    })?;
    let data =
        sim::generate_dataset(&world, &traj, &noise, &pattern, &sim::Rig::default(), out)
            .map_err(|e| {
                eprintln!("error: {e}");
                EXIT_DATA
            })?;
    eprintln!(
        "wrote {} IMU samples, {} LiDAR points, {} feature packets to {}",
        data.imu.len(),
        data.lidar.len(),
        data.packets.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(est: &PathBuf, reference: &PathBuf, align: &str, json: bool) -> Result<(), u8> {
    let align: Align = align.parse().map_err(|e: String| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })?;
    let est_traj = TrajectoryEstimate::load_tum(est).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_DATA
    })?;
    let ref_traj = TrajectoryEstimate::load_tum(reference).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_DATA
    })?;
    let report = evaluate_ate(&est_traj, &ref_traj, align).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_DATA
    })?;
    let end_to_end = harness::end_to_end_error(&est_traj).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_DATA
    })?;
    let mut stdout = std::io::stdout().lock();
    if json {
        writeln!(
            stdout,
            "{{\"rmse\": {:.9}, \"pairs\": {}, \"end_to_end\": {:.9}}}",
            report.rmse, report.pairs, end_to_end
        )
        .ok();
    } else {
        writeln!(
            stdout,
            "ATE RMSE: {:.6} m over {} pairs; end-to-end: {:.6} m",
            report.rmse, report.pairs, end_to_end
        )
        .ok();
    }
    Ok(())
}

fn suffixed(prefix: &PathBuf, suffix: &str) -> PathBuf {
    let mut s = prefix.clone().into_os_string();
    s.push(suffix);
    PathBuf::from(s)
}
