use clap::{Parser, ValueEnum};
use std::path::PathBuf;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Suite {
    OperatorsCheck,
    Carleman,
    Hum,
    Semilinear,
    DecaySweep,
}

impl Suite {
    fn name(self) -> &'static str {
        match self {
            Suite::OperatorsCheck => "operators-check",
            Suite::Carleman => "carleman",
            Suite::Hum => "hum",
            Suite::Semilinear => "semilinear",
            Suite::DecaySweep => "decay-sweep",
        }
    }
}

/// Run a numerical experiment suite from a JSON configuration.
#[derive(Parser, Debug)]
#[command(name = "phinull", version)]
struct Args {
    subcommand: Suite,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Refuse to run when any gate is violated.
    #[arg(long)]
    strict_gates: bool,
}

fn main() {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let code = phinull::cli::run(args.subcommand.name(), &args.config, &args.out, args.seed, args.strict_gates);
    std::process::exit(code);
}
