//! Configuration plumbing: the optional `key=value` defaults file, flag
//! resolution, shared argument enums, and the error type that maps every
//! failure onto the process exit codes (2 config, 3 resource guard,
//! 4 numerical).

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rdp_core::autodiff::AutodiffError;
use rdp_core::chain::ChainError;
use rdp_core::harness::{HarnessError, TailProfile};
use rdp_core::hypertree::TreeError;
use rdp_core::numerics::NumericsError;
use rdp_core::proposals::ProposalError;
use rdp_core::train::TrainError;

/// Process-level failure, tagged with the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Invalid invocation or settings (exit 2).
    Config(String),
    /// A resource guard refused the requested size (exit 3).
    Guard(String),
    /// The computation itself failed numerically (exit 4).
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Guard(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Guard(msg) => write!(f, "guard error: {msg}"),
            CliError::Numerical(msg) => write!(f, "numerical error: {msg}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Config(format!("i/o: {err}"))
    }
}

impl From<ChainError> for CliError {
    fn from(err: ChainError) -> Self {
        match err {
            ChainError::StateSpaceTooLarge { .. } => CliError::Guard(err.to_string()),
            ChainError::NanPotential { .. }
            | ChainError::UnreachableStep { .. }
            | ChainError::NonPositiveTemperature { .. }
            | ChainError::Sampling(_) => CliError::Numerical(err.to_string()),
            _ => CliError::Config(err.to_string()),
        }
    }
}

impl From<TreeError> for CliError {
    fn from(err: TreeError) -> Self {
        match err {
            TreeError::ParseSpaceTooLarge { .. } => CliError::Guard(err.to_string()),
            TreeError::NanPotential { .. }
            | TreeError::UnreachableRoot
            | TreeError::Sampling(_) => CliError::Numerical(err.to_string()),
            TreeError::Selection(inner) => inner.into(),
            _ => CliError::Config(err.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(err: HarnessError) -> Self {
        match err {
            HarnessError::ExactReferenceTooLarge { .. } => CliError::Guard(err.to_string()),
            HarnessError::Chain(inner) => inner.into(),
            HarnessError::Tree(inner) => inner.into(),
            HarnessError::Proposal(inner) => inner.into(),
            HarnessError::Numerics(inner) => inner.into(),
            _ => CliError::Config(err.to_string()),
        }
    }
}

impl From<ProposalError> for CliError {
    fn from(err: ProposalError) -> Self {
        match err {
            ProposalError::NanWeight { .. }
            | ProposalError::ZeroLocalMass { .. }
            | ProposalError::ZeroGlobalMass => CliError::Numerical(err.to_string()),
            _ => CliError::Config(err.to_string()),
        }
    }
}

impl From<NumericsError> for CliError {
    fn from(err: NumericsError) -> Self {
        CliError::Numerical(err.to_string())
    }
}

impl From<AutodiffError> for CliError {
    fn from(err: AutodiffError) -> Self {
        match err {
            AutodiffError::StepOutOfRange { .. } => CliError::Config(err.to_string()),
            AutodiffError::BackwardAlreadyRun => CliError::Numerical(err.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(err: TrainError) -> Self {
        match err {
            TrainError::Diverged { .. } => CliError::Numerical(err.to_string()),
            TrainError::Chain(inner) => inner.into(),
            TrainError::Proposal(inner) => inner.into(),
            _ => CliError::Config(err.to_string()),
        }
    }
}

/// Defaults loaded from a `key=value` file. Keys use the long flag names;
/// `#` starts a comment. Flags override file entries; entries for other
/// subcommands are ignored.
#[derive(Debug, Default)]
pub struct FileConfig {
    entries: HashMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|err| CliError::Config(format!("cannot read {}: {err}", path.display())))?;
        let mut entries = HashMap::new();
        for (number, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    number + 1
                )));
            };
            entries.insert(canon(key), value.trim().to_string());
        }
        Ok(FileConfig { entries })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(&canon(key)).map(String::as_str)
    }
}

/// Canonical key/value spelling: lowercase, `_` and `-` interchangeable.
fn canon(s: &str) -> String {
    s.trim().to_ascii_lowercase().replace('_', "-")
}

/// Flag > file entry > default.
pub fn resolve<T: FromStr + Clone>(
    flag: &Option<T>,
    file: &FileConfig,
    key: &str,
    default: T,
) -> Result<T, CliError>
where
    T::Err: fmt::Display,
{
    resolve_opt(flag, file, key).map(|v| v.unwrap_or(default))
}

/// Flag > file entry > absent.
pub fn resolve_opt<T: FromStr + Clone>(
    flag: &Option<T>,
    file: &FileConfig,
    key: &str,
) -> Result<Option<T>, CliError>
where
    T::Err: fmt::Display,
{
    if let Some(value) = flag {
        return Ok(Some(value.clone()));
    }
    match file.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse()
            .map(Some)
            .map_err(|err| CliError::Config(format!("config key {key}={raw}: {err}"))),
    }
}

/// Same precedence for values with a custom parser (the enums below).
pub fn resolve_with<T: Clone>(
    flag: &Option<T>,
    file: &FileConfig,
    key: &str,
    default: T,
    parse: fn(&str) -> Result<T, String>,
) -> Result<T, CliError> {
    if let Some(value) = flag {
        return Ok(value.clone());
    }
    match file.get(key) {
        None => Ok(default),
        Some(raw) => {
            parse(raw).map_err(|err| CliError::Config(format!("config key {key}={raw}: {err}")))
        }
    }
}

pub fn resolve_path(
    flag: &Option<PathBuf>,
    file: &FileConfig,
    key: &str,
) -> Option<PathBuf> {
    flag.clone().or_else(|| file.get(key).map(PathBuf::from))
}

/// Model structure an instance is simulated with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    Chain,
    Tree,
}

impl Model {
    pub fn name(self) -> &'static str {
        match self {
            Model::Chain => "chain",
            Model::Tree => "tree",
        }
    }
}

pub fn parse_model(s: &str) -> Result<Model, String> {
    match canon(s).as_str() {
        "chain" => Ok(Model::Chain),
        "tree" => Ok(Model::Tree),
        other => Err(format!("unknown model {other:?} (expected chain|tree)")),
    }
}

/// Quantity to estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantityArg {
    LogZ,
    Entropy,
}

impl QuantityArg {
    pub fn name(self) -> &'static str {
        match self {
            QuantityArg::LogZ => "logz",
            QuantityArg::Entropy => "entropy",
        }
    }
}

pub fn parse_quantity(s: &str) -> Result<QuantityArg, String> {
    match canon(s).as_str() {
        "logz" => Ok(QuantityArg::LogZ),
        "entropy" => Ok(QuantityArg::Entropy),
        other => Err(format!("unknown quantity {other:?} (expected logz|entropy)")),
    }
}

/// Proposal distribution family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalKind {
    Uniform,
    LocalGlobal,
    Oracle,
}

impl ProposalKind {
    pub fn name(self) -> &'static str {
        match self {
            ProposalKind::Uniform => "uniform",
            ProposalKind::LocalGlobal => "local-global",
            ProposalKind::Oracle => "oracle",
        }
    }
}

pub fn parse_proposal(s: &str) -> Result<ProposalKind, String> {
    match canon(s).as_str() {
        "uniform" => Ok(ProposalKind::Uniform),
        "local-global" => Ok(ProposalKind::LocalGlobal),
        "oracle" => Ok(ProposalKind::Oracle),
        other => {
            Err(format!("unknown proposal {other:?} (expected uniform|local-global|oracle)"))
        }
    }
}

pub fn parse_profile(s: &str) -> Result<TailProfile, String> {
    TailProfile::parse(&canon(s).replace('-', "_"))
        .ok_or_else(|| format!("unknown profile {s:?} (expected dense|intermediate|long-tail)"))
}

/// Shared count checks; every command with (n, t, k, runs) settings runs
/// these before touching the library.
pub fn validate_counts(
    n: usize,
    t: usize,
    k1: usize,
    k2: usize,
    runs: usize,
) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Config("n must be at least 1".into()));
    }
    if t == 0 {
        return Err(CliError::Config("t must be at least 1".into()));
    }
    if runs == 0 {
        return Err(CliError::Config("runs must be at least 1".into()));
    }
    if k1 + k2 > n {
        return Err(CliError::Config(format!("K exceeds N: K1 + K2 = {} > N = {n}", k1 + k2)));
    }
    Ok(())
}
