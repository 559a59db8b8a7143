use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] deepperson::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for data problems, 4 for numeric
    /// failures during training.
    pub fn exit_code(&self) -> u8 {
        use deepperson::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Core(e) => match e {
                E::Config(_)
                | E::FingerprintMismatch(_)
                | E::BranchDisabled(_)
                | E::BatchStructure(_)
                | E::LabelOutOfRange { .. } => 2,
                E::Data(_) | E::Image { .. } | E::Checkpoint(_) | E::Eval(_) | E::Io(_) => 3,
                E::NonFinite { .. } => 4,
                E::Shape { .. } => 1,
            },
        }
    }
}
