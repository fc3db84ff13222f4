use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

/// One line-delimited JSON record per command run.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: &'static str,
    pub arguments: Value,
    pub seeds: Vec<u64>,
    pub model_hash: Option<String>,
    pub output_hashes: Vec<String>,
    pub result: Value,
    pub elapsed_ms: f64,
}

impl Manifest {
    pub fn new(command: &'static str, arguments: &impl Serialize) -> Self {
        Self {
            command,
            arguments: serde_json::to_value(arguments).unwrap_or(Value::Null),
            seeds: Vec::new(),
            model_hash: None,
            output_hashes: Vec::new(),
            result: Value::Null,
            elapsed_ms: 0.0,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("manifest is plain data")
    }

    /// Appends to `path`, or prints to stdout when there is no path.
    pub fn emit(&self, path: Option<&Path>) -> std::io::Result<()> {
        match path {
            Some(p) => {
                let mut f = OpenOptions::new().create(true).append(true).open(p)?;
                writeln!(f, "{}", self.to_line())
            }
            None => {
                println!("{}", self.to_line());
                Ok(())
            }
        }
    }
}
