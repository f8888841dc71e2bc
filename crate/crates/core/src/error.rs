use thiserror::Error;

/// Errors raised by the mesh, assembly, solver and reduction layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid mesh: {0}")]
    Mesh(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is singular or not positive definite: {0}")]
    Singular(String),

    #[error("unknown source id `{0}`")]
    UnknownSource(String),

    #[error("zero reference norm")]
    ZeroNorm,

    #[error("snapshot matrix is empty or identically zero")]
    EmptySnapshots,

    #[error("empty training set")]
    EmptyTraining,

    #[error("requested rank {requested} exceeds trained rank {available} for {what}")]
    RankExceeded {
        what: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("Dirichlet-Neumann iteration did not converge after {iters} iterations (gap {gap:.3e}) for mu = {mu}")]
    NotConverged { iters: usize, gap: f64, mu: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wraps the error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

/// Extension for tagging results with a stage label.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(stage))
    }
}
