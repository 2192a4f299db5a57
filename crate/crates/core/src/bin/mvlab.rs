use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mvlab::cli::{run, ExperimentConfig};
use mvlab::LabError;

/// Numerical experiments for mean-field SDEs with small noise.
#[derive(Debug, Parser)]
#[command(name = "mvlab", version)]
struct Args {
    /// One of: simulate, clt-rate, rate-fn, exit-rate, is-estimate,
    /// mdp-decay, exp-equiv, check-model.
    subcommand: String,

    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,

    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Worker threads. Changes speed only, never results.
    #[arg(long)]
    threads: Option<usize>,
}

fn execute(args: &Args) -> Result<Vec<PathBuf>, LabError> {
    if let Some(k) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k.max(1))
            .build_global()
            .map_err(|e| LabError::Validation(format!("thread pool: {e}")))?;
    }
    let config = ExperimentConfig::load(&args.config)?;
    run(&args.subcommand, &config, args.out.as_deref())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exit_code_for(subcommand: &str, config: &str) -> i32 {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, config).unwrap();
        let out = dir.path().join("out");
        let args = Args::parse_from([
            "mvlab",
            subcommand,
            "--config",
            path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        match execute(&args) {
            Ok(_) => 0,
            Err(e) => e.exit_code(),
        }
    }

    const MODEL: &str = r#""model": { "kind": "linear_mean_field", "a": 1.0, "c": 1.0, "s": 1.0 }"#;

    #[test]
    fn exit_statuses() {
        assert_eq!(exit_code_for("exit-rate", &format!(r#"{{ {MODEL}, "x0": 1.0, "steps": 10, "radius": 1.0, "seed": 1 }}"#)), 0);
        assert_eq!(exit_code_for("exit-rate", "{ \"model\": "), 2);
        assert_eq!(
            exit_code_for("mdp-decay", &format!(r#"{{ {MODEL}, "x0": 1.0, "alpha": 0.7, "seed": 1 }}"#)),
            3
        );
        assert_eq!(exit_code_for("exit-rate", &format!(r#"{{ {MODEL}, "x0": 1.0, "radius": 1.0 }}"#)), 3);
        assert_eq!(exit_code_for("no-such", &format!(r#"{{ {MODEL}, "x0": 1.0, "seed": 1 }}"#)), 3);
        let explosive = r#""model": { "kind": "linear_mean_field", "a": 1e100, "c": 0.0, "s": 1.0 }"#;
        assert_eq!(
            exit_code_for("simulate", &format!(r#"{{ {explosive}, "x0": 1.0, "horizon": 2.0, "steps": 10, "replicas": 4, "particles": 4, "epsilon": 0.1, "seed": 1 }}"#)),
            4
        );
    }

    #[test]
    fn clt_rate_writes_one_row_per_rung() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            format!(r#"{{ {MODEL}, "x0": 1.0, "steps": 50, "replicas": 64, "particles": 32, "epsilon_ladder": [0.1, 0.03, 0.01, 0.003], "seed": 5 }}"#),
        )
        .unwrap();
        let out = dir.path().join("out");
        let args = Args::parse_from(["mvlab", "clt-rate", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        execute(&args).unwrap();
        let csv = std::fs::read_to_string(out.join("clt-rate-5.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("epsilon,p,estimate,standard_error"));
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("clt-rate-5.json")).unwrap()).unwrap();
        assert!(summary["result"].get("fitted_slope").is_some());
        assert_eq!(summary["seed"], 5);
    }
}
