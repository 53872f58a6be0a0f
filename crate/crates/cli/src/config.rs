//! `--config` support: a JSON object whose keys are long flag names (dashes
//! or underscores) is turned into extra arguments for every flag that was
//! not given on the command line, and the command line is parsed again.

use std::ffi::OsString;
use std::path::Path;

use clap::parser::ValueSource;
use clap::{ArgAction, ArgMatches, Command};
use serde_json::Value;

#[derive(Debug)]
pub enum ConfigError {
    /// The file could not be read or parsed.
    Read(String),
    /// The file names a flag that does not exist or has an unusable value.
    Usage(String),
}

fn scalar(key: &str, v: &Value) -> Result<String, ConfigError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        Value::Array(items) => items
            .iter()
            .map(|x| scalar(key, x))
            .collect::<Result<Vec<_>, _>>()
            .map(|parts| parts.join(",")),
        _ => Err(ConfigError::Usage(format!(
            "config key `{key}` must be a string, number, boolean or list"
        ))),
    }
}

/// Arguments to append to `argv` for the config values in `path`.
pub fn config_args(
    path: &Path,
    cmd: &Command,
    matches: &ArgMatches,
) -> Result<Vec<OsString>, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Read(format!("{}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| ConfigError::Read(format!("{}: {e}", path.display())))?;
    let Value::Object(map) = value else {
        return Err(ConfigError::Read(format!(
            "{}: expected a JSON object",
            path.display()
        )));
    };

    let (sub_name, sub_matches) = matches
        .subcommand()
        .expect("a subcommand is required by the grammar");
    let sub = cmd
        .find_subcommand(sub_name)
        .expect("matched subcommand exists");

    let mut extra = Vec::new();
    for (key, v) in &map {
        let flag = key.replace('_', "-");
        if flag == "config" {
            return Err(ConfigError::Usage(
                "config files cannot nest `config`".into(),
            ));
        }
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(flag.as_str()))
            .ok_or_else(|| {
                ConfigError::Usage(format!("unknown config key `{key}` for `{sub_name}`"))
            })?;
        let id = arg.get_id().as_str();
        if sub_matches.value_source(id) == Some(ValueSource::CommandLine) {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue => match v {
                Value::Bool(true) => extra.push(format!("--{flag}").into()),
                Value::Bool(false) => {}
                _ => {
                    return Err(ConfigError::Usage(format!(
                        "config key `{key}` must be a boolean"
                    )))
                }
            },
            _ => {
                extra.push(format!("--{flag}={}", scalar(key, v)?).into());
            }
        }
    }
    Ok(extra)
}
