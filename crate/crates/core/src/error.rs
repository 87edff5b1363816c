use alloc::string::String;

/// Errors raised by the scoring, training and evaluation routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("zero-norm vector has no direction ({context})")]
    ZeroNorm { context: &'static str },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("unknown attribute category `{name}` (known: {known})")]
    UnknownCategory { name: String, known: String },
    #[error("attribute text is empty")]
    EmptyAttributeText,
    #[error("attribute responses contain no attributes")]
    EmptyCatalog,
    #[error("non-finite loss during {stage} at epoch {epoch}")]
    NonFiniteLoss { stage: &'static str, epoch: usize },
    #[error("adaptation diverged after {step} steps (objective rose 10 consecutive steps); use a smaller learning rate")]
    Diverged { step: usize },
    #[error("class `{class}` has no exemplar surviving the IoU filter")]
    NoExemplars { class: String },
    #[error("class `{class}` has no instances")]
    ZeroInstances { class: String },
    #[error(
        "invalid box [{x1}, {y1}, {x2}, {y2}]: coordinates must be finite with x1 < x2 and y1 < y2"
    )]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("degenerate (zero-area) box")]
    DegenerateBox,
    #[error("class index {index} is outside the {context} (size {len})")]
    ClassOutOfRange {
        index: usize,
        len: usize,
        context: &'static str,
    },
    #[error("proposal-name set is empty after removing known class names")]
    EmptyProposalNames,
    #[error("no known-labeled detections")]
    NoKnownDetections,
    #[error("missing input for scorer `{kind}`: {what}")]
    MissingInput {
        kind: &'static str,
        what: &'static str,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("infeasible synthetic world: {0}")]
    InfeasibleWorld(String),
    #[error("invalid task specification: {0}")]
    InvalidTask(String),
    #[error("detections reference unknown image `{0}`")]
    UnknownImage(String),
}

pub type Result<T> = core::result::Result<T, Error>;
