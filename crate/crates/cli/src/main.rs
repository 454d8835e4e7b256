//! `cope` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 stage failure,
//! 4 checkpoint or input integrity failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use cope_core::corpus;
use cope_core::pipeline::{ablation_sweep, Pipeline, PipelineConfig, Stage, SweepAxis};
use cope_core::{Error, Result};

fn cli() -> Command {
    let mut cmd = Command::new("cope")
        .about("Personalized contrastive decoding pipeline for small language models")
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("flat key = value config file"),
        );
    for key in PipelineConfig::KEYS {
        cmd = cmd.arg(
            Arg::new(*key)
                .long(*key)
                .global(true)
                .value_name("VALUE")
                .help_heading("Config overrides"),
        );
    }
    let stage = |name: &'static str, about: &'static str| Command::new(name).about(about);
    cmd.subcommand(
        stage("gen-corpus", "write the synthetic multi-user corpus").arg(
            Arg::new("out")
                .long("out")
                .value_name("DIR")
                .help("write to DIR instead of the run directory"),
        ),
    )
    .subcommand(stage("train-task", "train the task-adapted model on pooled data"))
    .subcommand(stage("train-user", "train one adapter per user"))
    .subcommand(stage("synth-neg", "synthesize negatives for preference training"))
    .subcommand(stage("train-dpo", "refine user adapters with DPO"))
    .subcommand(stage("decode", "generate test responses with every method"))
    .subcommand(stage("eval", "score generations and write the evaluation report"))
    .subcommand(stage("diagnose-reward", "own-versus-other implicit reward table"))
    .subcommand(
        stage("sweep", "ablation over alpha, beta or base_contrast")
            .arg(Arg::new("axis").long("axis").required(true).value_name("AXIS"))
            .arg(
                Arg::new("values")
                    .long("values")
                    .required(true)
                    .value_name("V1,V2,..")
                    .value_delimiter(',')
                    .action(ArgAction::Append),
            ),
    )
    .subcommand(stage("run", "run every stage, resuming finished ones"))
}

fn load_config(m: &ArgMatches) -> Result<PipelineConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => PipelineConfig::load(&PathBuf::from(p))?,
        None => PipelineConfig::default(),
    };
    for key in PipelineConfig::KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(m: &ArgMatches) -> Result<()> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cfg = load_config(m)?;
    if name == "gen-corpus" {
        if let Some(out) = sub.get_one::<String>("out") {
            let specs = corpus::default_user_specs(&cfg.corpus_config())?;
            corpus::gen_corpus(&specs, &PathBuf::from(out))?;
            println!("corpus written to {out}");
            return Ok(());
        }
    }
    let mut p = Pipeline::open(cfg)?;
    println!("run directory: {}", p.run_dir().display());
    match name {
        "run" => {
            p.run_all()?;
            print!("{}", p.eval_report()?.aggregates_json());
        }
        "sweep" => {
            let axis: SweepAxis = sub.get_one::<String>("axis").expect("required").parse()?;
            let values: Vec<String> = sub
                .get_many::<String>("values")
                .expect("required")
                .cloned()
                .collect();
            print!("{}", ablation_sweep(&mut p, axis, &values)?.to_csv());
        }
        stage => {
            let stage: Stage = stage.parse()?;
            p.run_stage(stage)?;
            match stage {
                Stage::Eval => print!("{}", p.eval_report()?.aggregates_json()),
                Stage::DiagnoseReward => {
                    let path = p.report("reward_separation.csv");
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path, source: e })?;
                    print!("{text}");
                }
                _ => {}
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
