use std::fmt;

/// Why a command failed; decides the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad configuration, missing or malformed input. Exit code 2.
    Input {
        stage: Option<&'static str>,
        error: anyhow::Error,
    },
    /// A computation stage failed. Exit code 1.
    Stage { stage: &'static str, error: anyhow::Error },
}

impl Failure {
    pub fn input(error: impl Into<anyhow::Error>) -> Self {
        Failure::Input {
            stage: None,
            error: error.into(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Input { .. } => 2,
            Failure::Stage { .. } => 1,
        }
    }

    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Failure::Input { stage, .. } => *stage,
            Failure::Stage { stage, .. } => Some(stage),
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Input { error, .. } | Failure::Stage { error, .. } => error,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self {
            Failure::Input { .. } => "input error",
            Failure::Stage { .. } => "stage failed",
        };
        match self.stage() {
            Some(s) => write!(f, "[{s}] {kind}: {:#}", self.error()),
            None => write!(f, "{kind}: {:#}", self.error()),
        }
    }
}

impl std::error::Error for Failure {}

/// Tags an error with the stage it came from.
pub trait StageResult<T> {
    /// Input problem (exit 2).
    fn input_in(self, stage: &'static str) -> Result<T, Failure>;
    /// Computation problem (exit 1).
    fn failed_in(self, stage: &'static str) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> StageResult<T> for Result<T, E> {
    fn input_in(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure::Input {
            stage: Some(stage),
            error: e.into(),
        })
    }

    fn failed_in(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure::Stage {
            stage,
            error: e.into(),
        })
    }
}
