//! `zotune` — operator entry point.
//!
//! ```text
//! zotune <train|bench|verify|export> <config-path> [--out DIR] [--seed N]
//! ```
//!
//! One declarative TOML config drives everything; the only flags are the
//! output directory and a run-seed override, so a command line never
//! encodes state that the config file doesn't.
//!
//! Exit codes: 0 success · 2 usage/validation · 3 numeric or verification
//! failure · 4 I/O.

use std::path::{Path, PathBuf};
use std::process::exit;
use zotune::error::{Error, Result};
use zotune::runcfg::RunConfig;

const USAGE: &str = "\
usage: zotune <command> <config-path> [--out DIR] [--seed N]

commands:
  train    run the configured training loop; writes checkpoint + step records
  bench    run the configured benchmark grid; writes records + summary table
  verify   run the invariant battery; writes a pass/fail report
  export   write the task dataset (JSONL) and the initialized checkpoint

options:
  --out DIR   output directory (default: zotune-out)
  --seed N    override the config's run seed
  -h, --help  show this message
";

struct Args {
    command: String,
    config: PathBuf,
    out: PathBuf,
    seed: Option<u64>,
}

fn parse_args(argv: &[String]) -> Result<Option<Args>> {
    let mut command = None;
    let mut config = None;
    let mut out = None;
    let mut seed = None;
    let mut i = 0;
    while i < argv.len() {
        match argv[i].as_str() {
            "-h" | "--help" => return Ok(None),
            "--out" => {
                let v = argv
                    .get(i + 1)
                    .ok_or_else(|| Error::Config("--out needs a directory".into()))?;
                out = Some(PathBuf::from(v));
                i += 2;
            }
            "--seed" => {
                let v =
                    argv.get(i + 1).ok_or_else(|| Error::Config("--seed needs a value".into()))?;
                seed = Some(
                    v.parse::<u64>()
                        .map_err(|_| Error::Config(format!("--seed: not a u64: {v:?}")))?,
                );
                i += 2;
            }
            a if a.starts_with('-') => {
                return Err(Error::Config(format!("unknown option {a:?}")));
            }
            a if command.is_none() => {
                command = Some(a.to_string());
                i += 1;
            }
            a if config.is_none() => {
                config = Some(PathBuf::from(a));
                i += 1;
            }
            a => return Err(Error::Config(format!("unexpected argument {a:?}"))),
        }
    }
    let command = command.ok_or_else(|| Error::Config("missing command".into()))?;
    let config = config.ok_or_else(|| Error::Config("missing config path".into()))?;
    Ok(Some(Args {
        command,
        config,
        out: out.unwrap_or_else(|| PathBuf::from("zotune-out")),
        seed,
    }))
}

fn cmd_train(cfg: &RunConfig, out: &Path, seed: Option<u64>) -> Result<i32> {
    let outcome = zotune::train::train(cfg, out, seed)?;
    println!("trained {} steps", outcome.steps_run);
    if let (Some(l), Some(a)) = (outcome.final_eval_loss, outcome.final_eval_accuracy) {
        println!("final eval: loss {l:.4}, accuracy {a:.4}");
    }
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    println!("records:    {}", outcome.records_path.display());
    Ok(0)
}

fn cmd_bench(cfg: &RunConfig, out: &Path, seed: Option<u64>) -> Result<i32> {
    let sweep = zotune::bench::run_sweep(cfg, out, seed)?;
    print!("{}", std::fs::read_to_string(&sweep.summary_path)?);
    println!("records: {}", sweep.records_path.display());
    Ok(0)
}

fn cmd_verify(cfg: &RunConfig, out: &Path) -> Result<i32> {
    // Deliberate-defect hook for mutation-testing the battery (see the
    // verify module docs); unset in normal operation.
    let fault = match std::env::var("ZOTUNE_FAULT") {
        Ok(name) => Some(
            zotune::verify::Fault::from_name(&name)
                .ok_or_else(|| Error::Config(format!("ZOTUNE_FAULT: unknown fault {name:?}")))?,
        ),
        Err(_) => None,
    };
    let results = zotune::verify::run_and_write(cfg, out, fault)?;
    print!("{}", zotune::verify::report_text(&results));
    if results.iter().all(|r| r.pass) {
        Ok(0)
    } else {
        // Failed invariants are numeric failures of the system under test.
        Ok(3)
    }
}

fn cmd_export(cfg: &RunConfig, out: &Path, seed: Option<u64>) -> Result<i32> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let run_seed = seed.unwrap_or(cfg.seed);
    let dataset = zotune::tasks::generate(&cfg.task)?;
    let train_path = out.join("train.jsonl");
    let eval_path = out.join("eval.jsonl");
    zotune::tasks::export_examples(dataset.train(), &train_path)?;
    zotune::tasks::export_examples(dataset.eval(), &eval_path)?;
    let mut model = zotune::model::Model::init(&cfg.model, run_seed)?;
    if cfg.train.quantize {
        model.quantize_weights()?;
    }
    let ckpt_path = out.join(&cfg.paths.checkpoint);
    zotune::checkpoint::save(&model, &ckpt_path)?;
    println!("train examples: {}", train_path.display());
    println!("eval examples:  {}", eval_path.display());
    println!("checkpoint:     {}", ckpt_path.display());
    Ok(0)
}

fn dispatch(args: &Args) -> Result<i32> {
    let cfg = RunConfig::load(&args.config)?;
    match args.command.as_str() {
        "train" => cmd_train(&cfg, &args.out, args.seed),
        "bench" => cmd_bench(&cfg, &args.out, args.seed),
        "verify" => cmd_verify(&cfg, &args.out),
        "export" => cmd_export(&cfg, &args.out, args.seed),
        other => Err(Error::Config(format!(
            "unknown command {other:?} (expected train, bench, verify, or export)"
        ))),
    }
}

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let args = match parse_args(&argv) {
        Ok(Some(args)) => args,
        Ok(None) => {
            print!("{USAGE}");
            exit(0);
        }
        Err(e) => {
            eprintln!("zotune: {e}");
            eprintln!("{USAGE}");
            exit(e.exit_code());
        }
    };
    match dispatch(&args) {
        Ok(code) => exit(code),
        Err(e) => {
            eprintln!("zotune: {e}");
            exit(e.exit_code())
        }
    }
}
