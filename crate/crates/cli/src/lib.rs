//! Command-line front end. [`run`] parses arguments, dispatches to one
//! subcommand and maps failures onto the exit-code contract:
//!
//! - `0` success
//! - `1` user error (bad flags, invalid input, conflicts, missing objects)
//! - `2` internal error (I/O failure, corrupted project files)
//!
//! Every failure prints one line `error[<code>]: <message>` to stderr,
//! optionally followed by human-oriented detail.

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::Parser;
use serde::Deserialize;
use serde_json::Value;

use datadesign_core::familiarity::FamiliarityConfig;
use datadesign_core::monitor::{GapConfig, Thresholds};
use datadesign_core::refmodel::{LooConfig, Repeats, TrainConfig};
use datadesign_core::store::{init_project, ProjectStore};
use datadesign_core::Error;

mod args;
mod commands;
mod report;

pub use args::Cli;

pub const PROJECT_ENV: &str = "DATADESIGN_PROJECT";

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    /// Caller mistake detected by the CLI itself.
    User { code: &'static str, message: String },
    Internal(String),
}

impl CliError {
    pub fn user(code: &'static str, message: impl Into<String>) -> Self {
        CliError::User {
            code,
            message: message.into(),
        }
    }

    pub fn code(&self) -> &str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::User { code, .. } => code,
            CliError::Internal(_) => "internal",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_user_error() => 1,
            CliError::User { .. } => 1,
            _ => 2,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Core(e) => e.to_string(),
            CliError::User { message, .. } => message.clone(),
            CliError::Internal(m) => m.clone(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Defaults for every tunable, loaded from `--config`. Missing sections keep
/// their built-in values.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub familiarity: FamiliarityConfig,
    pub train: TrainConfig,
    pub repeats: Option<Repeats>,
    pub thresholds: Thresholds,
    pub gaps: GapConfig,
    pub loo: LooConfig,
}

/// Per-invocation context shared by the subcommands.
pub(crate) struct Ctx<'a> {
    pub project: PathBuf,
    pub seed: Option<u64>,
    pub config: Config,
    pub out_path: Option<PathBuf>,
    pub quiet: bool,
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
    pub input: &'a mut dyn BufRead,
}

impl Ctx<'_> {
    pub fn reader(&self) -> CliResult<ProjectStore> {
        Ok(ProjectStore::open(&self.project)?)
    }

    /// Open with the writer lock, creating the project when the directory is
    /// absent or empty.
    pub fn writer(&self) -> CliResult<ProjectStore> {
        if self.project.join("project.json").exists() {
            return Ok(ProjectStore::open_writer(&self.project)?);
        }
        let name = project_name(&self.project);
        Ok(init_project(&self.project, &name)?)
    }

    pub fn progress(&mut self, msg: &str) {
        if !self.quiet {
            let _ = writeln!(self.err, "{msg}");
        }
    }

    pub fn say(&mut self, text: &str) -> CliResult<()> {
        self.out.write_all(text.as_bytes())?;
        if !text.is_empty() && !text.ends_with('\n') {
            self.out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Print the human rendering and, with `--out`, write the structured
    /// document.
    pub fn emit(&mut self, human: &str, doc: &Value) -> CliResult<()> {
        self.say(human)?;
        if let Some(path) = &self.out_path {
            let mut text = serde_json::to_string_pretty(doc)?;
            text.push('\n');
            write_file(path, text.as_bytes())?;
        }
        Ok(())
    }
}

pub(crate) fn project_name(path: &Path) -> String {
    std::fs::canonicalize(path)
        .ok()
        .as_deref()
        .unwrap_or(path)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .filter(|n| !n.is_empty())
        .unwrap_or_else(|| "project".to_string())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Core(Error::NotFound(format!("file {}", path.display())))
        } else {
            e.into()
        }
    })
}

fn load_config(path: Option<&Path>) -> CliResult<Config> {
    match path {
        None => Ok(Config::default()),
        Some(p) => serde_json::from_str(&read_file(p)?)
            .map_err(|e| CliError::user("bad-config", format!("{}: {e}", p.display()))),
    }
}

/// Run with the process's stdio.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdin = std::io::stdin();
    let mut input = stdin.lock();
    run_with(args, &mut input, &mut std::io::stdout(), &mut std::io::stderr())
}

/// Run with explicit streams; returns the exit code.
pub fn run_with<I, T>(args: I, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    0
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = writeln!(err, "error[usage]: a subcommand is required");
                    let _ = write!(err, "{}", e.render());
                    1
                }
                _ => {
                    let rendered = e.render().to_string();
                    let first = rendered.lines().next().unwrap_or("").trim_start_matches("error: ");
                    let _ = writeln!(err, "error[usage]: {first}");
                    let _ = write!(err, "{rendered}");
                    1
                }
            };
        }
    };
    let result = load_config(cli.config.as_deref()).and_then(|config| {
        let mut ctx = Ctx {
            project: cli.project.clone(),
            seed: cli.seed,
            config,
            out_path: cli.out.clone(),
            quiet: cli.quiet,
            out,
            err,
            input,
        };
        commands::dispatch(&mut ctx, cli.command)
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error[{}]: {}", e.code(), e.message());
            e.exit_code()
        }
    }
}
