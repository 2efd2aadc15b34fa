//! `fishnet` command-line tool. Exit status: 0 on success, 1 on usage or
//! configuration errors, 2 on data or model errors.

mod args;
mod commands;
mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches};

use args::{find_config, merge_config, parse_config_file, strip_config, Cli, Command};
use manifest::{sha256_hex, Manifest, Run, MANIFEST_FILE};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failed(String),
}

impl From<fishnet::Error> for CliError {
    fn from(e: fishnet::Error) -> Self {
        match e {
            fishnet::Error::Config(m) => CliError::Usage(m),
            other => CliError::Failed(other.to_string()),
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(run(argv));
}

fn run(argv: Vec<String>) -> i32 {
    match execute(&argv) {
        Ok(code) => code,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(CliError::Failed(m)) => {
            eprintln!("error: {m}");
            2
        }
    }
}

/// Every argument value of the chosen subcommand, defaults included.
fn settings(matches: &clap::ArgMatches) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    if let Some((_, sub)) = matches.subcommand() {
        for id in sub.ids() {
            if let Ok(Some(raw)) = sub.try_get_raw(id.as_str()) {
                let vals: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
                out.insert(id.as_str().to_string(), vals.join(","));
            }
        }
    }
    out
}

fn with_out_dir(args: &[String], out_dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
        } else if a == "--out-dir" {
            skip = true;
        } else if !a.starts_with("--out-dir=") {
            out.push(a.clone());
        }
    }
    out.push("--out-dir".into());
    out.push(out_dir.to_string_lossy().into_owned());
    out
}

fn execute(argv: &[String]) -> Result<i32, CliError> {
    let file_settings = match find_config(argv) {
        Some(path) => {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            parse_config_file(&text, &path).map_err(CliError::Usage)?
        }
        None => Vec::new(),
    };
    let effective = merge_config(&strip_config(argv), &file_settings);
    let matches = match Cli::command().try_get_matches_from(&effective) {
        Ok(m) => m,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return Ok(code);
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::Usage(e.to_string()))?;

    if let Command::Replay(r) = &cli.command {
        return replay(&r.manifest, cli.common.out_dir.as_deref());
    }

    let out_dir = cli.common.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    let mut run = Run::new(out_dir, cli.common.seed)?;
    let mut code = 0;
    match &cli.command {
        Command::Pretrain(a) => commands::pretrain(&mut run, a)?,
        Command::Posttrain(a) => commands::posttrain(&mut run, a)?,
        Command::TrainDetector(a) => commands::train_detector_cmd(&mut run, a)?,
        Command::EvaluateClassifier(a) => commands::evaluate_classifier(&mut run, a)?,
        Command::EvaluateDetector(a) => commands::evaluate_detector(&mut run, a)?,
        Command::Augment(a) => commands::augment(&mut run, a)?,
        Command::RunPipeline(a) => commands::run_pipeline(&mut run, a)?,
        Command::GenSynthetic(a) => commands::gen_synthetic(&mut run, a)?,
        Command::Gradcheck(a) => {
            if !commands::gradcheck_cmd(&mut run, a)? {
                code = 2;
            }
        }
        Command::Replay(_) => unreachable!("handled above"),
    }
    let out_dir = run.out_dir.clone();
    run.finish(cli.command.name(), argv.to_vec(), effective, settings(&matches))?;
    println!("wrote {}", out_dir.join(MANIFEST_FILE).display());
    Ok(code)
}

/// Re-runs the recorded command into `out_dir` (default: the manifest's own
/// directory) and checks every output against the recorded checksums.
fn replay(manifest_path: &Path, out_dir: Option<&Path>) -> Result<i32, CliError> {
    let recorded = Manifest::load(manifest_path)?;
    let mut changed = Vec::new();
    for (path, hash) in &recorded.inputs {
        let now = std::fs::read(path).map(|b| sha256_hex(&b)).unwrap_or_default();
        if &now != hash {
            changed.push(path.clone());
        }
    }
    if !changed.is_empty() {
        return Err(CliError::Failed(format!("inputs changed since the recorded run: {changed:?}")));
    }
    let target = match out_dir {
        Some(d) => d.to_path_buf(),
        None => manifest_path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let args = with_out_dir(&recorded.effective_args, &target);
    let code = execute(&args)?;
    if code != 0 {
        return Ok(code);
    }
    let fresh = Manifest::load(&target.join(MANIFEST_FILE))?;
    let mut mismatched = Vec::new();
    for (rel, hash) in &recorded.outputs {
        if fresh.outputs.get(rel) != Some(hash) {
            mismatched.push(rel.clone());
        }
    }
    for rel in fresh.outputs.keys() {
        if !recorded.outputs.contains_key(rel) {
            mismatched.push(rel.clone());
        }
    }
    if mismatched.is_empty() {
        println!("replay reproduced all {} outputs", recorded.outputs.len());
        Ok(0)
    } else {
        eprintln!("replay differs in {} outputs:", mismatched.len());
        for m in &mismatched {
            eprintln!("  {m}");
        }
        Ok(2)
    }
}
