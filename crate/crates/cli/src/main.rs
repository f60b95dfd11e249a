use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use splatedit::anchor::BrightSide;
use splatedit_cli::commands::{self, Runtime};
use splatedit_cli::config::PipelineConfig;

#[derive(Parser)]
#[command(name = "splatedit", version, about = "Object edits inside a box region of a Gaussian splatting scene")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Pipeline config (TOML).
    #[arg(long, global = true, default_value = "splatedit.toml")]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `avp.bright_side`.
    #[arg(long, global = true, value_parser = ["left", "right"])]
    bright_side: Option<String>,
    /// Worker threads; 1 runs every stage sequentially and makes outputs byte-reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Score the azimuth ring, pick the anchor view and export it for inpainting.
    Avp,
    /// Lift the inpainted anchor view to a 3D object.
    Lift,
    /// Refine the object's texture inside the scene.
    Enhance {
        /// Object PLY; `<out>/object.ply` by default.
        #[arg(long)]
        object: Option<PathBuf>,
    },
    /// Insert the object into the scene and render a gallery.
    Compose {
        /// Object PLY; `<out>/object_enhanced.ply`, else `<out>/object.ply`.
        #[arg(long)]
        object: Option<PathBuf>,
    },
    /// Render a scene around the edit box.
    Render {
        /// Scene PLY; the configured scene by default.
        #[arg(long)]
        scene: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = PipelineConfig::load(&cli.config, cli.out)?;
    cfg.apply_env()?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(side) = cli.bright_side {
        cfg.avp.bright_side = side.parse::<BrightSide>()?;
    }
    if let Some(n) = cli.threads {
        anyhow::ensure!(n > 0, "--threads must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let rt = Runtime {
        parallel: cli.threads != Some(1),
    };
    match cli.command {
        Command::Avp => commands::avp(&cfg, &rt),
        Command::Lift => commands::lift(&cfg, &rt),
        Command::Enhance { object } => commands::enhance(&cfg, &rt, object),
        Command::Compose { object } => commands::compose(&cfg, &rt, object),
        Command::Render { scene } => commands::render(&cfg, &rt, scene),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are configuration errors.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(splatedit_cli::exit_code(&e))
        }
    }
}
