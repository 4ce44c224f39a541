use std::process::ExitCode;

use eraid_core::bench::BenchError;
use eraid_core::config::ConfigError;
use eraid_core::czdev::DeviceError;
use eraid_core::datagen::DatagenError;
use eraid_core::iopath::ArrayError;

/// Every failure the CLI reports, grouped into the three exit classes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("ConfigInvalid: {0}")]
    ConfigInvalid(String),
    #[error("DeviceError: {0}")]
    Device(String),
    #[error("Infeasible: {0}")]
    Infeasible(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::ConfigInvalid(_) => 2,
            CliError::Device(_) => 3,
            CliError::Infeasible(_) => 4,
        })
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::ConfigInvalid(msg.into())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::ConfigInvalid(format!("{e}; fix the config file or flags"))
    }
}

impl From<DeviceError> for CliError {
    fn from(e: DeviceError) -> Self {
        match e {
            DeviceError::OutOfSpace { .. } => {
                CliError::Infeasible(format!("{e}; lower alpha_exp or demote segments to RAID 5"))
            }
            other => CliError::Device(other.to_string()),
        }
    }
}

impl From<ArrayError> for CliError {
    fn from(e: ArrayError) -> Self {
        match e {
            ArrayError::Device(d) => d.into(),
            ArrayError::Config(m) => CliError::ConfigInvalid(m),
            ArrayError::Layout(l) => CliError::ConfigInvalid(l.to_string()),
            ArrayError::DegradedReject { .. } => {
                CliError::Device(format!("{e}; bring the device back with `degrade --restore`"))
            }
            other => CliError::Device(other.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        CliError::ConfigInvalid(e.to_string())
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        match e {
            DatagenError::UnreachableRatio { .. } => CliError::Infeasible(e.to_string()),
            other => CliError::ConfigInvalid(other.to_string()),
        }
    }
}
