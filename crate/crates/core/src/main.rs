use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use conc_compose::harness::{
    self, matrix_run, report, report_emit, scenario_list, scenario_run, Format, HarnessConfig, Model, Property,
    ScenarioFilter, Sink, Which,
};
use conc_compose::Mode;

#[derive(Parser)]
#[command(name = "conc-compose", version, about = "Runs the nesting scenarios of the concurrency runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every scenario of one or both matrices and compare with the expected table.
    Matrix(Common),
    /// Run a single scenario.
    Run {
        #[arg(long)]
        scenario: String,
        #[command(flatten)]
        common: Common,
    },
    /// List scenario ids.
    List {
        #[arg(long, value_enum, default_value_t = PropArg::All)]
        property: PropArg,
        #[arg(long)]
        outer: Option<Model>,
        #[arg(long)]
        inner: Option<Model>,
    },
}

#[derive(clap::Args)]
struct Common {
    #[arg(long, value_enum, default_value_t = ModeArg::Faithful)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = PropArg::All)]
    property: PropArg,
    #[arg(long, value_enum, default_value_t = FormatArg::Text)]
    format: FormatArg,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    timeout_ms: u64,
    #[arg(long, default_value_t = 1000)]
    retry_threshold: u64,
    #[arg(long, default_value_t = 500)]
    quiescence_ms: u64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

impl Common {
    fn config(&self) -> HarnessConfig {
        HarnessConfig {
            timeout: Duration::from_millis(self.timeout_ms),
            retry_threshold: self.retry_threshold,
            quiescence: Duration::from_millis(self.quiescence_ms),
            seed: self.seed,
        }
    }

    fn sink(&self) -> Sink {
        self.out.clone().map_or(Sink::Stdout, Sink::Path)
    }

    fn format(&self) -> Format {
        match self.format {
            FormatArg::Text => Format::Text,
            FormatArg::Json => Format::Json,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Faithful,
    Guarded,
}

#[derive(Clone, Copy, ValueEnum)]
enum PropArg {
    Safety,
    Liveness,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Json,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Faithful => Mode::Faithful,
            ModeArg::Guarded => Mode::Guarded,
        }
    }
}

impl From<PropArg> for Which {
    fn from(p: PropArg) -> Self {
        match p {
            PropArg::Safety => Which::Safety,
            PropArg::Liveness => Which::Liveness,
            PropArg::All => Which::All,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Matrix(c) => {
            let rep = matrix_run(c.mode.into(), c.property.into(), &c.config());
            report_emit(&rep, c.format(), &c.sink()).map(|_| rep.pass)
        }
        Command::Run { scenario, common: c } => scenario_run(&scenario, c.mode.into(), &c.config())
            .and_then(|r| report::result_emit(&r, c.format(), &c.sink()).map(|_| r.matches())),
        Command::List { property, outer, inner } => {
            let property = match property {
                PropArg::Safety => Some(Property::Safety),
                PropArg::Liveness => Some(Property::Liveness),
                PropArg::All => None,
            };
            for id in scenario_list(ScenarioFilter { property, outer, inner }) {
                let s = harness::scenario_spec(id).expect("listed id exists");
                println!("{id:<28} {}", s.summary);
            }
            Ok(true)
        }
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ conc_compose::Error::UnknownScenario(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
