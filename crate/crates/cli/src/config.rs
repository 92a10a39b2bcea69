//! Flat `key = value` config files. Keys are the long option names of the
//! chosen subcommand; values from the file are placed before the command
//! line arguments so that flags given explicitly win.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{ArgAction, Command};

use crate::error::CliError;

pub fn parse(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::validation("CONFIG", format!("line {}: expected key = value", n + 1)))?;
        let key = key.trim().replace('_', "-");
        if out.iter().any(|(k, _)| *k == key) {
            return Err(CliError::validation("CONFIG", format!("line {}: duplicate key '{key}'", n + 1)));
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

struct Scan {
    config: Option<PathBuf>,
    subcommand: Option<usize>,
}

/// Finds `--config` and the position of the subcommand name, skipping the
/// global options.
fn scan(argv: &[OsString]) -> Scan {
    let mut config = None;
    let mut subcommand = None;
    let mut i = 1;
    while i < argv.len() {
        let arg = argv[i].to_string_lossy();
        if arg == "--config" {
            config = argv.get(i + 1).map(PathBuf::from);
            i += 2;
            continue;
        }
        if let Some(path) = arg.strip_prefix("--config=") {
            config = Some(PathBuf::from(path));
        } else if subcommand.is_none() && !arg.starts_with('-') {
            subcommand = Some(i);
        }
        i += 1;
    }
    Scan { config, subcommand }
}

/// Returns `argv` with the config file's options spliced in after the
/// subcommand name, and the config path if one was given.
pub fn expand(argv: Vec<OsString>, cmd: &Command) -> Result<(Vec<OsString>, Option<PathBuf>), CliError> {
    let found = scan(&argv);
    let (Some(path), Some(at)) = (found.config.clone(), found.subcommand) else {
        return Ok((argv, found.config));
    };
    let name = argv[at].to_string_lossy().into_owned();
    let Some(sub) = cmd.find_subcommand(&name) else {
        return Ok((argv, found.config));
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::io(format!("reading config {}: {e}", path.display())))?;
    let mut inserted: Vec<OsString> = Vec::new();
    for (key, value) in parse(&text)? {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && a.get_id() != "help" && a.get_id() != "config")
            .ok_or_else(|| CliError::validation("CONFIG", format!("unknown key '{key}' for '{name}'")))?;
        match arg.get_action() {
            ArgAction::SetTrue => match value.as_str() {
                "true" => inserted.push(format!("--{key}").into()),
                "false" => {}
                _ => {
                    return Err(CliError::validation(
                        "CONFIG",
                        format!("key '{key}' expects true or false, got '{value}'"),
                    ))
                }
            },
            _ => {
                inserted.push(format!("--{key}").into());
                let many = arg.get_num_args().is_some_and(|r| r.max_values() > 1);
                if many {
                    inserted.extend(value.split_whitespace().map(OsString::from));
                } else {
                    inserted.push(value.into());
                }
            }
        }
    }
    let mut out = argv[..=at].to_vec();
    out.extend(inserted);
    out.extend_from_slice(&argv[at + 1..]);
    Ok((out, found.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Arg;

    fn cmd() -> Command {
        Command::new("t").arg(Arg::new("config").long("config").global(true)).subcommand(
            Command::new("run")
                .arg(Arg::new("seed").long("seed"))
                .arg(Arg::new("files").long("files").num_args(1..))
                .arg(Arg::new("fast").long("fast").action(ArgAction::SetTrue)),
        )
    }

    fn argv(s: &[&str]) -> Vec<OsString> {
        s.iter().map(OsString::from).collect()
    }

    #[test]
    fn parse_rejects_malformed_and_duplicate_lines() {
        assert_eq!(
            parse("# c\nseed = 3\n\nrun_count=2 # x\n").unwrap(),
            vec![("seed".into(), "3".into()), ("run-count".into(), "2".into())]
        );
        assert!(parse("seed 3").is_err());
        assert!(parse("a=1\na=2").is_err());
    }

    #[test]
    fn config_values_come_before_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "seed = 7\nfiles = a b\nfast = true\n").unwrap();
        let args = argv(&["t", "--config", path.to_str().unwrap(), "run", "--seed", "9"]);
        let (out, cfg) = expand(args, &cmd()).unwrap();
        assert_eq!(cfg.as_deref(), Some(path.as_path()));
        let words: Vec<String> = out.iter().map(|s| s.to_string_lossy().into_owned()).collect();
        assert_eq!(&words[3..], &["run", "--seed", "7", "--files", "a", "b", "--fast", "--seed", "9"]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "speed = 7\n").unwrap();
        let args = argv(&["t", "run", "--config", path.to_str().unwrap()]);
        let err = expand(args, &cmd()).unwrap_err();
        assert_eq!((err.code, err.exit_code()), ("CONFIG", 1));
    }

    #[test]
    fn missing_config_file_is_an_io_error() {
        let args = argv(&["t", "--config", "/nonexistent/c.txt", "run"]);
        assert_eq!(expand(args, &cmd()).unwrap_err().exit_code(), 2);
    }
}
