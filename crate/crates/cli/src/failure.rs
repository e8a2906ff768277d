use mvl_core::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Class {
    Config,
    Runtime,
}

/// A failed command, reported on stderr as one JSON record.
#[derive(Debug)]
pub struct Failure {
    pub class: Class,
    pub kind: String,
    pub message: String,
}

impl Failure {
    pub fn runtime(kind: &str, message: String) -> Self {
        Self {
            class: Class::Runtime,
            kind: kind.to_string(),
            message,
        }
    }

    /// Any failure while reading or validating the configuration.
    pub fn config(e: Error) -> Self {
        Self {
            class: Class::Config,
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.class {
            Class::Config => 2,
            Class::Runtime => 3,
        }
    }

    pub fn record(&self) -> String {
        serde_json::json!({ "error": self.kind, "message": self.message }).to_string()
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::UnknownView(_) => Self::config(e),
            e => Self {
                class: Class::Runtime,
                kind: e.kind().to_string(),
                message: e.to_string(),
            },
        }
    }
}
