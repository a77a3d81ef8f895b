use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msdetr::harness::{self, RunConfig};

#[derive(Parser)]
#[command(name = "msdetr", version, about = "Synthetic-defect detector: data, training, evaluation, fusion and benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic dataset to disk.
    Gen(Common),
    /// Train and write checkpoints plus the epoch log.
    Train(Common),
    /// Score predictions or a checkpoint and write metrics.json.
    Eval(Common),
    /// Fuse a checkpoint's RepConv blocks and report the divergence.
    Fuse(Common),
    /// Single-image latency before and after fusion.
    Bench(Common),
    /// Train all eight Rep/DA/CSFF combinations and tabulate them.
    Ablate(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (name, common, run): (&str, Common, fn(&RunConfig, &std::path::Path) -> msdetr::Result<String>) = match cli.cmd {
        Cmd::Gen(c) => ("gen", c, harness::cmd_gen),
        Cmd::Train(c) => ("train", c, harness::cmd_train),
        Cmd::Eval(c) => ("eval", c, harness::cmd_eval),
        Cmd::Fuse(c) => ("fuse", c, harness::cmd_fuse),
        Cmd::Bench(c) => ("bench", c, harness::cmd_bench),
        Cmd::Ablate(c) => ("ablate", c, harness::cmd_ablate),
    };
    let result = RunConfig::load(&common.config).and_then(|mut cfg| {
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        let out = match (common.out, name) {
            (Some(o), _) => o,
            (None, "gen") => cfg.paths.data.clone().unwrap_or_else(|| "data".into()),
            (None, n) => PathBuf::from("runs").join(n),
        };
        run(&cfg, &out)
    });
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("msdetr {name}: {e}");
            ExitCode::FAILURE
        }
    }
}
