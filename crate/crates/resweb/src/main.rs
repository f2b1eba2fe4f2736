use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use resweb::pipeline::{RunConfig, Workspace};

/// Resonance webs, double-resonance normal forms, averaged channels and
/// weak-KAM barriers for convex nearly integrable Hamiltonians on T^3.
#[derive(Parser)]
#[command(name = "resweb", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: PathBuf,
    /// Restrict site-based stages to one double-resonance index.
    #[arg(long)]
    site: Option<usize>,
    /// Homology class for the channel stage, as "a,b".
    #[arg(long)]
    g: Option<String>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Trace the candidate resonance circles and their double resonances.
    Web(StageArgs),
    /// Verify the disc covering of the circles.
    Cover(StageArgs),
    /// Classify double resonances as strong or weak.
    Classify(StageArgs),
    /// Reduce the configured sites to planar normal forms.
    Reduce(StageArgs),
    /// Scan channels and alpha/beta data of the reduced sites.
    Channel(StageArgs),
    /// Elementary solutions and barrier fields on the double cover.
    Barrier(StageArgs),
    /// Deviation, symmetry, overlap and translation-identity checks.
    Verify(StageArgs),
}

impl Command {
    fn split(self) -> (&'static str, StageArgs) {
        match self {
            Command::Web(a) => ("web", a),
            Command::Cover(a) => ("cover", a),
            Command::Classify(a) => ("classify", a),
            Command::Reduce(a) => ("reduce", a),
            Command::Channel(a) => ("channel", a),
            Command::Barrier(a) => ("barrier", a),
            Command::Verify(a) => ("verify", a),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, args) = cli.command.split();
    if let Some(jobs) = args.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("resweb: could not set thread pool: {e}");
        }
    }
    let mut config = match RunConfig::from_path(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("resweb: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(site) = args.site {
        config.numerics.sites = vec![site];
    }
    if let Some(g) = &args.g {
        match parse_class(g) {
            Some(class) => config.targets.g = class,
            None => {
                eprintln!("resweb: --g expects two integers like \"0,1\"");
                return ExitCode::from(2);
            }
        }
    }
    let mut ws = match Workspace::open(config, args.out.as_deref()) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("resweb: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match ws.run_through(stage) {
        Ok(results) => {
            for (name, cached) in results {
                println!("stage {name}: {}", if cached { "cached" } else { "done" });
            }
            if stage == "verify" {
                match ws_verify_summary(&ws) {
                    Some(true) => println!("verify: all checks passed"),
                    Some(false) => {
                        println!("verify: FAILED (see verify.json)");
                        return ExitCode::from(3);
                    }
                    None => {}
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("resweb: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn parse_class(s: &str) -> Option<[i64; 2]> {
    let mut it = s.split(',').map(|x| x.trim().parse::<i64>());
    match (it.next(), it.next(), it.next()) {
        (Some(Ok(a)), Some(Ok(b)), None) => Some([a, b]),
        _ => None,
    }
}

fn ws_verify_summary(ws: &Workspace) -> Option<bool> {
    let text = std::fs::read_to_string(ws.artifact_path("verify.json")).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v.get("all_pass").and_then(|x| x.as_bool())
}
