use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("manifold mismatch: expected {expected}, found {found}")]
    SpecMismatch { expected: String, found: String },

    #[error("points are antipodal on a sphere factor; the logarithmic map is undefined")]
    AntipodalPoint,

    #[error("tangent vector is not attached to the given base point")]
    BaseMismatch,

    #[error("invalid manifold point: {0}")]
    InvalidPoint(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("pose lies at the chart origin (radius {radius:.3e} below threshold)")]
    OriginSingularity { radius: f64 },

    #[error("chart base frame is singular at this pose")]
    FrameSingularity,

    #[error("chart index {index} is not valid for {space} space")]
    InvalidChart { space: &'static str, index: u8 },

    #[error("no samples with positive weight")]
    EmptySample,

    #[error("empty input")]
    EmptyInput,

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("chart singularity at timestep {timestep}")]
    ChartSingularity { timestep: usize },

    #[error("normal equations are singular (control weight is zero and the residual Jacobian is rank deficient)")]
    SingularSystem,

    #[error("plan horizon {found} does not match the task horizon {expected}")]
    HorizonMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("demonstration `{id}`, frame {frame}: {source}")]
    Demo {
        id: String,
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("phase {phase}, chart {chart}: {source}")]
    Fit {
        phase: usize,
        chart: String,
        #[source]
        source: Box<Error>,
    },

    #[error("trial {index}: {source}")]
    Trial {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
