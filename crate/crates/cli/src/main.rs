//! `gencycle` command-line entry point.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use gencycle::config::{Config, KNOWN_KEYS};

/// Bad usage or configuration; exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

const SUBCOMMANDS: [(&str, &str); 5] = [
    ("gen-data", "Generate a procedural multi-view dataset"),
    ("train", "Train the denoiser and reconstructor"),
    ("sample", "Generate Gaussians with the sampling cycle"),
    ("eval", "Score a Gaussian cloud against a dataset scene"),
    ("turntable", "Render an orbit of a Gaussian cloud to PNG frames"),
];

fn cli() -> Command {
    let mut cmd = Command::new("gencycle")
        .about("Multi-view diffusion with a feed-forward 3D Gaussian reconstruction cycle")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in SUBCOMMANDS {
        let mut sub = Command::new(name)
            .about(about)
            .arg(Arg::new("config").long("config").short('c').value_name("FILE").help("key=value run config"));
        for key in KNOWN_KEYS {
            let mut arg = Arg::new(*key).long(*key).value_name("VALUE").action(ArgAction::Set);
            if key.contains('_') {
                arg = arg.alias(key.replace('_', "-"));
            }
            sub = sub.arg(arg);
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

/// The config file, then every flag on top of it.
fn build_config(m: &ArgMatches) -> anyhow::Result<Config> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => Config::load(path)?,
        None => Config::new(),
    };
    for key in KNOWN_KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<gencycle::Error>() {
        Some(
            gencycle::Error::Config { .. } | gencycle::Error::CheckpointMismatch(_) | gencycle::Error::UnknownToken(_),
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let result = build_config(sub).and_then(|cfg| commands::run(name, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "seed=1\nsteps=30\n").unwrap();
        let m = cli().try_get_matches_from(["gencycle", "sample", "--config", path.to_str().unwrap(), "--seed", "9"]).unwrap();
        let cfg = build_config(m.subcommand().unwrap().1).unwrap();
        assert_eq!(cfg.raw("seed"), Some("9"));
        assert_eq!(cfg.raw("steps"), Some("30"));
    }

    #[test]
    fn dashed_aliases_are_accepted() {
        let m = cli().try_get_matches_from(["gencycle", "gen-data", "--n-scenes", "3"]).unwrap();
        let cfg = build_config(m.subcommand().unwrap().1).unwrap();
        assert_eq!(cfg.raw("n_scenes"), Some("3"));
    }

    #[test]
    fn config_errors_map_to_usage_code() {
        let e = anyhow::Error::from(gencycle::Error::config("out_dir", "required key is missing"));
        assert_eq!(exit_code(&e), 2);
        let e = anyhow::Error::from(gencycle::Error::NonFinite("loss".into()));
        assert_eq!(exit_code(&e), 1);
    }
}
