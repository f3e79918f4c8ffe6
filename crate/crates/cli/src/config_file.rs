//! `--config-file` support: TOML keys become flags spliced in right after
//! the subcommand name, so clap validates them like typed flags.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;

use clap::CommandFactory;

use crate::args::Cli;

const GLOBAL_WITH_VALUE: [&str; 2] = ["--config-file", "--threads"];

fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config-file" {
            return it.next().cloned();
        }
        if let Some(rest) = s.strip_prefix("--config-file=") {
            return Some(rest.into());
        }
    }
    None
}

fn subcommand_position(argv: &[OsString], names: &[String]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let s = argv[i].to_string_lossy();
        if GLOBAL_WITH_VALUE.contains(&s.as_ref()) {
            i += 2;
        } else if names.iter().any(|n| *n == s) {
            return Some(i);
        } else {
            i += 1;
        }
    }
    None
}

fn explicit_flags(argv: &[OsString]) -> Vec<String> {
    argv.iter()
        .filter_map(|a| a.to_str()?.strip_prefix("--").map(|f| f.split('=').next().unwrap_or(f).to_string()))
        .collect()
}

fn render(key: &str, value: &toml::Value, out: &mut Vec<OsString>) -> Result<(), String> {
    let flag = format!("--{key}");
    match value {
        toml::Value::Boolean(true) => out.push(flag.into()),
        toml::Value::Boolean(false) => {}
        toml::Value::String(s) => out.extend([flag.into(), s.into()]),
        toml::Value::Integer(n) => out.extend([flag.into(), n.to_string().into()]),
        toml::Value::Float(x) => out.extend([flag.into(), x.to_string().into()]),
        toml::Value::Array(items) => {
            for item in items {
                render(key, item, out)?;
            }
        }
        other => return Err(format!("config key {key:?}: unsupported value {other}")),
    }
    Ok(())
}

/// Returns `argv` with the config file's flags inserted. Flags already on
/// the command line are not taken from the file.
pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let mut cmd = Cli::command();
    cmd.build();
    let longs = |c: &clap::Command| -> Vec<String> { c.get_arguments().filter_map(|a| a.get_long().map(str::to_string)).collect() };
    let subcommands: Vec<(String, Vec<String>)> = cmd.get_subcommands().map(|s| (s.get_name().to_string(), longs(s))).collect();
    let names: Vec<String> = subcommands.iter().map(|s| s.0.clone()).collect();
    let Some(pos) = subcommand_position(&argv, &names) else {
        return Ok(argv);
    };
    let sub = argv[pos].to_string_lossy().into_owned();
    let accepted = &subcommands.iter().find(|s| s.0 == sub).unwrap().1;

    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read config file {}: {e}", path.to_string_lossy()))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| format!("config file {}: {e}", path.to_string_lossy()))?;
    let mut chosen: BTreeMap<String, toml::Value> = BTreeMap::new();
    for (key, value) in &table {
        if value.is_table() {
            if !names.contains(key) {
                return Err(format!("config file table [{key}] names no subcommand"));
            }
            continue;
        }
        let key = key.replace('_', "-");
        if key == "config-file" {
            return Err("config files cannot include other config files".into());
        }
        if accepted.contains(&key) {
            chosen.insert(key, value.clone());
        } else if !subcommands.iter().any(|s| s.1.contains(&key)) {
            return Err(format!("config key {key:?} is not a flag of any subcommand"));
        }
    }
    if let Some(toml::Value::Table(own)) = table.get(&sub) {
        for (key, value) in own {
            chosen.insert(key.replace('_', "-"), value.clone());
        }
    }
    let explicit = explicit_flags(&argv);
    let mut injected = Vec::new();
    for (key, value) in &chosen {
        if !explicit.contains(key) {
            render(key, value, &mut injected)?;
        }
    }
    let mut out = argv;
    out.splice(pos + 1..pos + 1, injected);
    Ok(out)
}
