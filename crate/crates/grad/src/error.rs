use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("loss function is not deterministic: {first} then {second} at the same point")]
    NonDeterministic { first: f64, second: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

impl GradError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        GradError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
