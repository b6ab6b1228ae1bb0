//! File formats, scene synthesis and batch jobs around `pbl-core`.

pub mod checkpoint;
pub mod cli;
pub mod intrinsics_io;
pub mod kitti;
pub mod manifest;
pub mod plot;
pub mod png_io;
pub mod poses_io;
pub mod report;
pub mod scene;

/// Tool-level failure split by exit code: configuration problems exit
/// with 2, numeric failures with 3.
#[derive(Debug, thiserror::Error)]
pub enum ToolError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numeric(String),
}

impl ToolError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ToolError::Config(_) => 2,
            ToolError::Numeric(_) => 3,
        }
    }
}

impl From<std::io::Error> for ToolError {
    fn from(e: std::io::Error) -> Self {
        ToolError::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, ToolError>;

pub(crate) fn config_err(msg: impl Into<String>) -> ToolError {
    ToolError::Config(msg.into())
}
