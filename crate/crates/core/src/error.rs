use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape {shape:?} needs {expected} elements, got {got}")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("zero-sized extent in shape {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("constant tensors cannot be trainable")]
    TrainableConstant,
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: {msg}")]
    Attr { op: &'static str, msg: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {0} was never recorded on this tape")]
    UnknownNode(usize),
    #[error("backward on node {0} requires mark_closure on that node first")]
    ClosureNotMarked(usize),
    #[error("non-finite value at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("evaluation is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("hook replaced the backbone stream at {0} while running a non-inserting method")]
    StreamMutation(String),
    #[error("gradient supplied for `{0}`, which is not a trainable parameter")]
    GradNotTrainable(String),
    #[error("gradient for `{name}` has {got} elements, parameter has {expected}")]
    GradShape {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("symbolic/materialized mismatch in {group}: symbolic {symbolic}, built {built}")]
    CountMismatch {
        group: String,
        symbolic: u64,
        built: u64,
    },
    #[error("{0} exists; pass force to overwrite")]
    Exists(std::path::PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
