use std::fmt;

/// Command failure, classified for the exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or arguments.
    Usage(String),
    /// Unreadable, unparsable or unwritable files.
    Io(String),
    /// Estimation, prediction or bootstrap failure.
    Model(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Model(_) => 1,
            CliError::Usage(_) | CliError::Io(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io(m) => write!(f, "input/output error: {m}"),
            CliError::Model(m) => write!(f, "model error: {m}"),
        }
    }
}

impl From<smsn_nlme::Error> for CliError {
    fn from(e: smsn_nlme::Error) -> Self {
        use smsn_nlme::Error as E;
        match e {
            E::Parse { .. } | E::Input(_) | E::Io(_) | E::Json(_) => CliError::Io(e.to_string()),
            _ => CliError::Model(e.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::from(smsn_nlme::Error::Input("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(smsn_nlme::Error::Numerical("x".into())).exit_code(), 1);
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
    }
}
