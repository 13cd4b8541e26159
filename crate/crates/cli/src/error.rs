//! Exit-code classification.
//!
//! 1 means the request itself was wrong (bad flags, config, preconditions);
//! 2 means the run failed (diverged loss, unreadable or corrupt files).

use std::fmt;

use simclr_s2_core::contrastive::ContrastiveError;
use simclr_s2_core::eval::EvalError;
use simclr_s2_core::model::ModelError;
use simclr_s2_core::raster::RasterError;
use simclr_s2_core::train::TrainError;

pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

/// A request the CLI itself rejects.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn raster(e: &RasterError) -> u8 {
    match e {
        RasterError::OddLabeledCount(_) | RasterError::InvalidSynthParams(_) | RasterError::EmptyManifest => {
            EXIT_VALIDATION
        }
        RasterError::MissingBandStats(_) | RasterError::InconsistentBands(_) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn model(e: &ModelError) -> u8 {
    match e {
        ModelError::InvalidConfig(_) | ModelError::ConfigMismatch(_) | ModelError::StageViolation(_) => EXIT_VALIDATION,
        ModelError::Raster(r) => raster(r),
        _ => EXIT_RUNTIME,
    }
}

/// Exit code for an error chain. Unrecognized errors count as runtime
/// failures.
pub fn exit_code(error: &anyhow::Error) -> u8 {
    for cause in error.chain() {
        if cause.is::<Invalid>() || cause.is::<EvalError>() || cause.is::<toml::de::Error>() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::DivergedLoss { .. } | TrainError::Autodiff(_) => EXIT_RUNTIME,
                TrainError::Model(m) => model(m),
                TrainError::Raster(r) => raster(r),
                _ => EXIT_VALIDATION,
            };
        }
        if let Some(e) = cause.downcast_ref::<ContrastiveError>() {
            return match e {
                ContrastiveError::DivergedLoss { .. }
                | ContrastiveError::Autodiff(_)
                | ContrastiveError::Augment(_) => EXIT_RUNTIME,
                ContrastiveError::Model(m) => model(m),
                _ => EXIT_VALIDATION,
            };
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return model(e);
        }
        if let Some(e) = cause.downcast_ref::<RasterError>() {
            return raster(e);
        }
    }
    EXIT_RUNTIME
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification() {
        assert_eq!(exit_code(&invalid("x")), EXIT_VALIDATION);
        assert_eq!(
            exit_code(&TrainError::DivergedLoss { stage: "s", epoch: 1, detail: "nan".into() }.into()),
            EXIT_RUNTIME
        );
        assert_eq!(exit_code(&TrainError::Model(ModelError::StageViolation("x".into())).into()), EXIT_VALIDATION);
        assert_eq!(exit_code(&ModelError::DigestMismatch.into()), EXIT_RUNTIME);
        assert_eq!(exit_code(&anyhow::Error::from(RasterError::BadMagic).context("loading")), EXIT_RUNTIME);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), EXIT_RUNTIME);
    }
}
