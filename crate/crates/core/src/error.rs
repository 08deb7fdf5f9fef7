use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum ScopeError {
    #[error("mask selects no points")]
    EmptyMask,
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("vector norm {norm:e} is below the degeneracy threshold {epsilon:e}")]
    DegenerateVector { norm: f64, epsilon: f64 },
    #[error("attention requires at least one key")]
    EmptyContext,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("payload length mismatch: header implies {expected} bytes, file holds {found}")]
    TruncatedFile { expected: u64, found: u64 },
    #[error("non-finite value in {0}")]
    NonFiniteValue(&'static str),
    #[error("mask confidence {0} outside [0, 1]")]
    ConfidenceOutOfRange(f32),
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("unknown class id {0}")]
    UnknownClass(i32),
    #[error("insufficient classes: {0}")]
    InsufficientClasses(String),
    #[error("scene has no points")]
    EmptyScene,
    #[error("no support points labelled with class {0}")]
    EmptyClassSupport(i32),
    #[error("class {class_id} expects {expected} shots, got {found}")]
    ShotCountMismatch {
        class_id: i32,
        expected: usize,
        found: usize,
    },
    #[error("class {0} is already registered")]
    DuplicateClass(i32),
    #[error("classifier has no rows")]
    EmptyClassifier,
    #[error("prediction {0} is not a known class")]
    UnknownPrediction(i32),
    #[error("length mismatch: ground truth has {gt} points, prediction has {pred}")]
    LengthMismatch { gt: usize, pred: usize },
    #[error("run contains no stage reports")]
    EmptyRun,
    #[error("prototype bank is frozen")]
    BankFrozen,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: Box<ScopeError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ScopeError>;

impl ScopeError {
    /// Attach the offending file path to an error.
    pub fn at(self, path: impl Into<PathBuf>) -> Self {
        ScopeError::Path {
            path: path.into(),
            source: Box::new(self),
        }
    }

    /// Strip any path context.
    pub fn root(&self) -> &ScopeError {
        match self {
            ScopeError::Path { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 2 for input and configuration problems, 3 for internal invariant
    /// violations.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            ScopeError::BankFrozen | ScopeError::Invariant(_) => 3,
            _ => 2,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn at_path(self, path: &std::path::Path) -> Result<T>;
}

impl<T, E: Into<ScopeError>> ResultExt<T> for std::result::Result<T, E> {
    fn at_path(self, path: &std::path::Path) -> Result<T> {
        self.map_err(|e| e.into().at(path))
    }
}
