//! Deterministic text rendering: shortest round-trip floats, fixed column
//! order, provenance header.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::config::CliConfig;
use crate::Failure;

pub const TOOL: &str = "performa";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Shortest representation that parses back to the same `f64`.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

pub fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Coordinates joined by `;` so vectors stay in one CSV field.
pub fn vec_field(v: &[f64]) -> String {
    v.iter().map(|x| num(*x)).collect::<Vec<_>>().join(";")
}

pub struct Csv {
    text: String,
}

impl Csv {
    /// Starts with `#` lines naming the tool version and the resolved config.
    pub fn new(config: &CliConfig, header: &[String]) -> Self {
        let echo = serde_json::to_string(config).expect("config serializes");
        let mut text = format!("# {TOOL} {VERSION}\n# config {echo}\n");
        text.push_str(&header.join(","));
        text.push('\n');
        Self { text }
    }

    pub fn row(&mut self, fields: &[String]) {
        self.text.push_str(&fields.join(","));
        self.text.push('\n');
    }

    pub fn finish(self) -> String {
        self.text
    }
}

#[derive(Serialize)]
pub struct Envelope<'a, T: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub config: &'a CliConfig,
    #[serde(flatten)]
    pub body: T,
}

pub fn json<T: Serialize>(config: &CliConfig, body: T) -> String {
    let env = Envelope {
        tool: TOOL,
        version: VERSION,
        config,
        body,
    };
    let mut s = serde_json::to_string_pretty(&env).expect("output serializes");
    s.push('\n');
    s
}

/// Writes to `path`, or to stdout when absent.
pub fn emit(text: &str, path: Option<&Path>) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::config(format!("cannot write {}: {e}", p.display()))),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Failure::config(format!("cannot write stdout: {e}")))
        }
    }
}
