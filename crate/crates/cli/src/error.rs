use countnet::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for configuration and data problems, 3 for model or compatibility
    /// problems, 4 for numeric divergence.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Core(e) => match e {
                Error::Diverged { .. } => 4,
                Error::Build { .. } | Error::Shape(_) | Error::Checkpoint { .. } | Error::Fusion(_) => 3,
                _ => 2,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::from(Error::Diverged { epoch: 3, loss: f64::NAN }).exit_code(), 4);
        assert_eq!(CliError::from(Error::Build { layer: "fc1".into(), reason: "x".into() }).exit_code(), 3);
        assert_eq!(CliError::from(Error::Load { path: "p".into(), reason: "x".into() }).exit_code(), 2);
    }
}
