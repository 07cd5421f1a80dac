//! Promptable segmentation backends.
//!
//! A backend receives one 2D intensity slice plus a box prompt and returns a
//! per-pixel foreground probability map of the same shape. Responses are
//! validated here regardless of where they came from.

mod process;
pub mod protocol;
mod synthetic;

use std::time::Duration;

use thiserror::Error;

use crate::prompt::Box2;
use crate::volume::{Dims, Grid, ProbMap, Spacing, VolumeError};

pub use process::{ProcessClient, ProcessPool};
pub use protocol::{ProtocolError, PROTOCOL};
pub use synthetic::{misalignment, synthetic_segment, SyntheticConfig, SyntheticSegmenter};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("backend failure: {0}")]
    Backend(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("backend process closed its output")]
    Exited,
    #[error("backend timed out after {0:?}")]
    Timeout(Duration),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Wire(#[from] ProtocolError),
    #[error("I/O error talking to backend: {0}")]
    Io(#[from] std::io::Error),
}

/// One slice plus one prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentRequest {
    pub id: u64,
    pub height: usize,
    pub width: usize,
    /// Row-major `height * width` intensities.
    pub slice: Vec<f32>,
    pub prompt: Box2,
}

impl SegmentRequest {
    pub fn validate(&self) -> Result<(), SegmentError> {
        if self.height == 0 || self.width == 0 {
            return Err(SegmentError::InvalidRequest("empty slice".into()));
        }
        if self.slice.len() != self.height * self.width {
            return Err(SegmentError::InvalidRequest(format!(
                "slice has {} values, expected {}",
                self.slice.len(),
                self.height * self.width
            )));
        }
        if let Some(i) = self.slice.iter().position(|v| !v.is_finite()) {
            return Err(SegmentError::InvalidRequest(format!("non-finite intensity at {i}")));
        }
        if !self.prompt.fits(self.height, self.width) {
            return Err(SegmentError::InvalidRequest(format!(
                "box {:?} outside {}x{} slice",
                <[usize; 4]>::from(self.prompt),
                self.height,
                self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentResponse {
    pub id: u64,
    pub height: usize,
    pub width: usize,
    pub prob: Vec<f32>,
}

impl SegmentResponse {
    /// Wraps the probabilities as a depth-1 map.
    pub fn into_prob_map(self, spacing: Spacing) -> Result<ProbMap<f32>, VolumeError> {
        let dims = Dims::new(1, self.height, self.width)?;
        ProbMap::from_grid(Grid::new(dims, spacing, self.prob)?)
    }
}

/// Checks that a response answers `req`: same id, same shape, finite values
/// in `[0, 1]`.
pub fn validate_response(req: &SegmentRequest, resp: &SegmentResponse) -> Result<(), SegmentError> {
    if resp.id != req.id {
        return Err(SegmentError::Protocol(format!(
            "response id {} does not match request id {}",
            resp.id, req.id
        )));
    }
    if resp.height != req.height || resp.width != req.width || resp.prob.len() != req.height * req.width {
        return Err(SegmentError::Protocol(format!(
            "response shape {}x{} ({} values) does not match request {}x{}",
            resp.height,
            resp.width,
            resp.prob.len(),
            req.height,
            req.width
        )));
    }
    if let Some(i) = resp.prob.iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(SegmentError::Protocol(format!(
            "probability {} at {i} outside [0, 1]",
            resp.prob[i]
        )));
    }
    Ok(())
}

/// A promptable segmentation model. Implementations must be deterministic
/// for identical requests.
pub trait Segmenter: Send + Sync {
    fn name(&self) -> &str;

    fn segment_unchecked(&self, req: &SegmentRequest) -> Result<SegmentResponse, SegmentError>;

    /// Validates the request, runs the backend and validates the response.
    fn segment(&self, req: &SegmentRequest) -> Result<SegmentResponse, SegmentError> {
        req.validate()?;
        let resp = self.segment_unchecked(req)?;
        validate_response(req, &resp)?;
        Ok(resp)
    }
}

/// Adapts a backend that only produces hard masks to the probability contract.
pub struct BinaryBackend<F> {
    name: String,
    f: F,
}

impl<F> BinaryBackend<F>
where
    F: Fn(&SegmentRequest) -> Result<Vec<bool>, SegmentError> + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { name: name.into(), f }
    }
}

impl<F> Segmenter for BinaryBackend<F>
where
    F: Fn(&SegmentRequest) -> Result<Vec<bool>, SegmentError> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn segment_unchecked(&self, req: &SegmentRequest) -> Result<SegmentResponse, SegmentError> {
        let bits = (self.f)(req)?;
        Ok(SegmentResponse {
            id: req.id,
            height: req.height,
            width: req.width,
            prob: bits.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect(),
        })
    }
}
