use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dana::harness::{cmd_design, cmd_run, cmd_table1, cmd_verify, CliError, CliResult, ExperimentConfig};

#[derive(Parser)]
#[command(name = "dana", version, about = "Distributed approximate-Newton dispatch experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Design Laplacian weights for a topology and cost vector.
    Design {
        /// Graph JSON: {"n", "edges", "weights"?}.
        #[arg(long)]
        graph: PathBuf,
        /// Problem JSON: {"a", "b", "d"}.
        #[arg(long)]
        problem: PathBuf,
        #[arg(long, default_value = "design.json")]
        out: PathBuf,
    },
    /// Convergence traces for each configured algorithm.
    Run(ExperimentArgs),
    /// Design statistics over seeded random instances.
    Table1(ExperimentArgs),
    /// Run the invariant suites and emit a JSON report.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Report path; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    /// Edge count.
    #[arg(long)]
    edges: Option<usize>,
    /// DANA orders, replacing those in the config.
    #[arg(long, value_delimiter = ',')]
    q: Option<Vec<usize>>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ExperimentArgs {
    fn resolve(self) -> CliResult<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(n) = self.n {
            c.n = n;
        }
        if let Some(m) = self.edges {
            c.m = m;
        }
        if let Some(qs) = &self.q {
            c.set_dana_orders(qs);
        }
        if let Some(a) = self.alpha {
            c.set_alpha(a);
        }
        if let Some(t) = self.trials {
            c.trials = t;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(o) = self.out {
            c.output_dir = o;
        }
        c.validate()?;
        Ok(c)
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> CliResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Input(e.to_string()))
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Design { graph, problem, out } => {
            let r = cmd_design(&graph, &problem, &out)?;
            println!("eps_L_star = {:.10}", r.eps_l_star);
            println!("eps_A      = {:.10}", r.eps_a);
            println!("gap        = {:.10}", r.gap);
            println!("beta       = {:.10}", r.beta);
        }
        Command::Run(args) => {
            let report = cmd_run(&args.resolve()?)?;
            for v in &report.variants {
                let reached = v.iterations_to_tol.map_or("-".to_string(), |k| k.to_string());
                println!(
                    "trial {:>3} {:<18} {:?} iterations={} to_tol={} final_gap={:.3e}",
                    v.trial, v.name, v.outcome, v.iterations, reached, v.final_gap
                );
            }
        }
        Command::Table1(args) => {
            let r = cmd_table1(&args.resolve()?)?;
            let s = &r.summary;
            println!(
                "n={} m={} trials={} excluded={} mu(eps_L*)={:.4} sigma(eps_L*)={:.4} mu(gap)={:.4} sigma(gap)={:.4}",
                s.n, s.m, s.trials, s.excluded, s.mean_eps_l_star, s.std_eps_l_star, s.mean_gap, s.std_gap
            );
        }
        Command::Verify { seed, out } => {
            let report = cmd_verify(seed)?;
            let text = to_json(&report)? + "\n";
            match out {
                Some(path) => std::fs::write(&path, &text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?,
                None => print!("{text}"),
            }
            if !report.all_pass() {
                let failed: Vec<&str> =
                    report.properties.iter().filter(|p| p.status == dana::harness::PropertyStatus::Fail).map(|p| p.name.as_str()).collect();
                return Err(CliError::Property(failed.join(", ")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dana: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
