use std::fmt::Display;
use std::path::Path;

/// Failure reported as one line: `error[kind]: message`.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Display) -> Self {
        Self {
            kind,
            message: message.to_string(),
        }
    }

    pub fn usage(what: impl Display, detail: impl Display) -> Self {
        Self::new("usage", format!("{what}: {detail}"))
    }

    pub fn io(path: &Path, e: impl Display) -> Self {
        Self::new("io", format!("{}: {e}", path.display()))
    }

    pub fn line(&self) -> String {
        let flat: String = self
            .message
            .chars()
            .map(|c| if c == '\n' || c == '\r' { ' ' } else { c })
            .collect();
        format!("error[{}]: {}", self.kind, flat)
    }

    pub fn exit_code(&self) -> u8 {
        if self.kind == "usage" {
            2
        } else {
            1
        }
    }
}
