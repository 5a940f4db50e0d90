//! `chunkflow`: validate, lower, plan, simulate and tune chunk schedules.
//!
//! Exit codes: 0 success, 1 validation or pipeline failure, 2 I/O or parse
//! error, 3 empty tuning space.

mod commands;
mod inputs;

use clap::{Args, Parser, Subcommand};
use inputs::InputArgs;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "chunkflow",
    version,
    about = "Chunk-level compute/communication co-scheduling"
)]
struct Cli {
    /// Only print errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone)]
pub struct RealizeArgs {
    /// Backend for plain transfers, optionally `,` backend for reductions.
    #[arg(long, default_value = "ldst_specialized")]
    pub backends: String,
    /// SMs reserved for specialized backends.
    #[arg(long, default_value_t = 16)]
    pub comm_sms: usize,
    /// Intra-chunk tile order.
    #[arg(long, default_value = "row_major")]
    pub intra: String,
    /// Kernel-partitioned baseline instead of the fused kernel.
    #[arg(long)]
    pub partitioned: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a schedule and kernel; writes validate.txt and validate.json.
    Validate(InputArgs),
    /// Lower an IR to a schedule; writes schedule.json.
    Lower(InputArgs),
    /// Plan and realize; writes plan.json, program.json and per-rank DOT graphs.
    Plan {
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        realize: RealizeArgs,
    },
    /// Run the pipeline end to end; writes trace.json, trace.csv and verdict.json.
    Simulate {
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        realize: RealizeArgs,
        /// Realized program from `plan` instead of planning here.
        #[arg(long)]
        program: Option<PathBuf>,
        /// Maximum random delay per tile and launch, in microseconds.
        #[arg(long)]
        jitter_us: Option<f64>,
        /// Remove the N-th wait of the program (mutation testing).
        #[arg(long)]
        drop_wait: Option<usize>,
    },
    /// Search the configuration space; writes tune.csv and best.json.
    Tune {
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        space: SpaceArgs,
    },
    /// Re-export a Chrome trace with its CSV summary.
    Trace {
        /// Chrome trace JSON to read.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
pub struct SpaceArgs {
    #[arg(long, default_value = "1,2,3,4,6,8,16")]
    pub splits: String,
    /// Backends used for every op.
    #[arg(long)]
    pub backends: Option<String>,
    /// Backends for plain transfers (crossed with --reduce-backends).
    #[arg(long, requires = "reduce_backends")]
    pub plain_backends: Option<String>,
    #[arg(long, requires = "plain_backends")]
    pub reduce_backends: Option<String>,
    #[arg(long, default_value = "16")]
    pub comm_sms: String,
    #[arg(long, default_value = "row_major")]
    pub intra: String,
    /// Tile shapes `BMxBNxBK[xSTAGES]`, comma separated.
    #[arg(long)]
    pub tiles: Option<String>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub stage: &'static str,
    pub msg: String,
}

impl CliError {
    pub fn io(msg: impl Into<String>) -> Self {
        CliError {
            code: 2,
            stage: "io",
            msg: msg.into(),
        }
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        CliError {
            code: 2,
            stage: "parse",
            msg: msg.into(),
        }
    }

    pub fn stage(stage: &'static str, msg: impl Into<String>) -> Self {
        CliError {
            code: 1,
            stage,
            msg: msg.into(),
        }
    }
}

pub struct Out {
    quiet: bool,
}

impl Out {
    pub fn say(&self, text: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", text.as_ref());
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = Out { quiet: cli.quiet };
    let res = match cli.cmd {
        Cmd::Validate(i) => commands::validate(&i, &out),
        Cmd::Lower(i) => commands::lower(&i, &out),
        Cmd::Plan { inputs, realize } => commands::plan(&inputs, &realize, &out),
        Cmd::Simulate {
            inputs,
            realize,
            program,
            jitter_us,
            drop_wait,
        } => commands::simulate(
            &inputs,
            &realize,
            program.as_deref(),
            jitter_us,
            drop_wait,
            &out,
        ),
        Cmd::Tune { inputs, space } => commands::tune(&inputs, &space, &out),
        Cmd::Trace { input, out: dir } => commands::trace(&input, &dir, &out),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error [{}]: {}", e.stage, e.msg);
            ExitCode::from(e.code)
        }
    }
}
