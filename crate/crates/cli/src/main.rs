use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use osfl_core::datagen::{heterogeneity_summary, mean_label_entropy, Scenario};
use osfl_core::experiment::{
    build_seed_data, emit_results, plot_curves, plot_run_dir, run_ablation, run_experiment, stratify_seed,
    write_metrics_csv, ExperimentConfig, Method, MetricRow, ABLATION_GRID,
};
use osfl_core::Error;

#[derive(Parser)]
#[command(name = "osfl-lab", version, about = "One-shot federated learning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition the synthetic training set and report label heterogeneity.
    Partition(Common),
    /// Train the clients and write their capability matrices.
    Stratify(Common),
    /// Run every requested method, then write metrics, results and plots.
    Run(Common),
    /// Re-draw plots from an existing run directory.
    Plot {
        #[arg(long)]
        output: PathBuf,
    },
    /// Sweep the generator loss weights over the ablation grid.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    /// Flat TOML experiment config; omitted keys take the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Method to run (fedhydra, dense, fedavg); repeatable.
    #[arg(long = "method")]
    methods: Vec<String>,
    /// Dirichlet concentration; selects the Dirichlet scenario.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(o) = &self.output {
            cfg.output_dir = o.clone();
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if !self.methods.is_empty() {
            cfg.methods = self.methods.iter().map(|m| m.parse()).collect::<Result<Vec<Method>, _>>()?;
        }
        if let Some(a) = self.alpha {
            cfg.scenario = Scenario::Dirichlet;
            cfg.alpha = a;
        }
        if let Some(m) = self.clients {
            cfg.clients = m;
        }
        if let Some(r) = self.rounds {
            cfg.rounds = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn partition(cfg: &ExperimentConfig) -> Result<(), Error> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    for &seed in &cfg.seeds {
        let data = build_seed_data(cfg, seed)?;
        fs::write(dir.join(format!("partition_seed{seed}.json")), data.partition.to_json()?)?;
        let table = heterogeneity_summary(&data.partition, &data.train);
        let mut csv = String::from("client");
        for j in 0..cfg.classes {
            csv.push_str(&format!(",class_{j}"));
        }
        csv.push('\n');
        for (k, row) in table.rows().into_iter().enumerate() {
            csv.push_str(&k.to_string());
            for v in row {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
        fs::write(dir.join(format!("heterogeneity_seed{seed}.csv")), csv)?;
        println!(
            "seed {seed}: shard sizes {:?}, mean label entropy {:.4}",
            data.partition.shard_sizes(),
            mean_label_entropy(&table)
        );
    }
    Ok(())
}

fn stratify(cfg: &ExperimentConfig) -> Result<(), Error> {
    let mut timings = Vec::new();
    for &seed in &cfg.seeds {
        let (caps, _, elapsed) = stratify_seed(cfg, seed)?;
        let dir = cfg.output_dir.join(format!("seed{seed}"));
        fs::create_dir_all(&dir)?;
        caps.write_csvs(&dir)?;
        timings.push(MetricRow {
            method: Method::FedHydra.to_string(),
            seed,
            round: 0,
            epoch: 0,
            stage: "stratify".into(),
            metric: "seconds".into(),
            value: elapsed.as_secs_f64(),
        });
        println!("seed {seed}: {}×{} capability matrices in {:.2?}", caps.n_classes(), caps.n_clients(), elapsed);
    }
    let mut buf = Vec::new();
    write_metrics_csv(&timings, &mut buf)?;
    fs::write(cfg.output_dir.join("timings.csv"), buf)?;
    Ok(())
}

fn run(cfg: &ExperimentConfig) -> Result<(), Error> {
    let result = run_experiment(cfg)?;
    emit_results(&result, &cfg.output_dir)?;
    for path in plot_curves(&result, &cfg.output_dir)? {
        log::info!("wrote {}", path.display());
    }
    for method in &cfg.methods {
        if let Some(mean) = result.summary.mean(*method) {
            println!("{method:<9} mean top-1 {mean:.4}");
        }
    }
    println!("results in {}", cfg.output_dir.display());
    Ok(())
}

fn ablate(cfg: &ExperimentConfig) -> Result<(), Error> {
    let rows = run_ablation(cfg, &ABLATION_GRID)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut csv = String::from("lambda_bn,lambda_adv,seed,top1\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{}\n", r.lambda_bn, r.lambda_adv, r.seed, r.top1));
    }
    fs::write(cfg.output_dir.join("ablation.csv"), csv)?;
    for (lb, la) in ABLATION_GRID {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.lambda_bn == lb && r.lambda_adv == la)
            .map(|r| r.top1)
            .collect();
        println!(
            "lambda_bn {lb:.1} lambda_adv {la:.1}: mean top-1 {:.4}",
            vals.iter().sum::<f64>() / vals.len() as f64
        );
    }
    Ok(())
}

fn plot(dir: &Path) -> Result<(), Error> {
    for path in plot_run_dir(dir)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("OSFL_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("OSFL_LAB_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = configure_threads().and_then(|()| match &cli.command {
        Command::Partition(c) => c.resolve().and_then(|cfg| partition(&cfg)),
        Command::Stratify(c) => c.resolve().and_then(|cfg| stratify(&cfg)),
        Command::Run(c) => c.resolve().and_then(|cfg| run(&cfg)),
        Command::Plot { output } => plot(output),
        Command::Ablate(c) => c.resolve().and_then(|cfg| ablate(&cfg)),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let cli = Cli::try_parse_from([
            "osfl-lab", "run", "--seeds", "4,5", "--method", "fedavg", "--method", "dense", "--alpha", "0.3",
            "--clients", "4", "--rounds", "2",
        ])
        .unwrap();
        let Command::Run(c) = cli.command else { panic!("expected run") };
        let cfg = c.resolve().unwrap();
        assert_eq!(cfg.seeds, vec![4, 5]);
        assert_eq!(cfg.methods, vec![Method::FedAvg, Method::Dense]);
        assert_eq!((cfg.scenario, cfg.alpha, cfg.clients, cfg.rounds), (Scenario::Dirichlet, 0.3, 4, 2));
    }

    #[test]
    fn bad_method_is_rejected() {
        let cli = Cli::try_parse_from(["osfl-lab", "run", "--method", "fedprox"]).unwrap();
        let Command::Run(c) = cli.command else { panic!("expected run") };
        assert!(c.resolve().is_err());
    }
}
