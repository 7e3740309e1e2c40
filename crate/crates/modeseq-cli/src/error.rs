//! Error-to-exit-code policy. Everything user-facing funnels into
//! [`CliError`]; `main` prints the message and exits with the matching code.
//!
//! Codes: 0 success, 2 config error, 3 data error, 4 numeric failure,
//! 5 io failure. Usage errors also exit 2 (clap's default).

use modeseq::decoder::DecoderError;
use modeseq::loss::LossError;
use modeseq::model::ModelError;
use modeseq::metrics::MetricsError;
use modeseq::scene::SceneError;
use modeseq::synth::SynthError;
use modeseq::train::TrainError;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match &e {
            SynthError::InvalidSpec(_) => CliError::Config(e.to_string()),
            SynthError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match &e {
            ModelError::Invalid(_) => CliError::Config(e.to_string()),
            ModelError::Io(_) => CliError::Io(e.to_string()),
            ModelError::Decoder(d) => decoder_error(d),
            // Malformed, version-skewed, or architecture-incompatible
            // checkpoints are bad input data, not bad configuration.
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// NaNs surfacing from a decode are numeric failures (exit 4), whichever
/// command hits them; the remaining decoder errors are bad requests or bad
/// scenes (exit 3).
fn decoder_error(e: &DecoderError) -> CliError {
    match e {
        DecoderError::NanConfidence(_) | DecoderError::Num(_) => {
            CliError::Numeric(e.to_string())
        }
        _ => CliError::Data(e.to_string()),
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Invalid(_) => CliError::Config(e.to_string()),
            TrainError::Io(_) => CliError::Io(e.to_string()),
            TrainError::NoSamples => CliError::Data(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Scene(s) => s.into(),
            TrainError::Loss(_) | TrainError::Num(_) => CliError::Numeric(e.to_string()),
            TrainError::Decoder(d) => decoder_error(&d),
            TrainError::Nn(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(format!("json: {e}"))
    }
}
