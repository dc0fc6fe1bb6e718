use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Map, Value};

pub const SCHEMA_VERSION: u32 = 1;

/// Failure class, mapped to the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    Input,
    Computation,
    Verification,
}

impl Class {
    pub fn exit_code(self) -> i32 {
        match self {
            Class::Input => 2,
            Class::Computation => 3,
            Class::Verification => 4,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub class: Class,
    pub stage: &'static str,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} failed: {}", self.stage, self.message)
    }
}

pub type CmdResult<T> = Result<T, Failure>;

/// Attaches a failure class and stage name to any error.
pub trait Stage<T> {
    fn stage(self, class: Class, stage: &'static str) -> CmdResult<T>;
}

impl<T, E: fmt::Display> Stage<T> for Result<T, E> {
    fn stage(self, class: Class, stage: &'static str) -> CmdResult<T> {
        self.map_err(|e| Failure {
            class,
            stage,
            message: e.to_string(),
        })
    }
}

/// Accumulates the JSON run report and the list of files written.
pub struct RunReport {
    out: PathBuf,
    fields: Map<String, Value>,
    manifest: Vec<String>,
}

impl RunReport {
    pub fn new(subcommand: &str, out: &Path) -> CmdResult<Self> {
        fs::create_dir_all(out).stage(Class::Input, "output directory")?;
        let mut fields = Map::new();
        fields.insert("schema_version".into(), json!(SCHEMA_VERSION));
        fields.insert("tool".into(), json!(env!("CARGO_PKG_NAME")));
        fields.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
        fields.insert("subcommand".into(), json!(subcommand));
        fields.insert("command".into(), json!(std::env::args().skip(1).collect::<Vec<_>>()));
        Ok(RunReport {
            out: out.to_path_buf(),
            fields,
            manifest: Vec::new(),
        })
    }

    pub fn set(&mut self, key: &str, value: impl serde::Serialize) {
        let v = serde_json::to_value(value).expect("report values serialize");
        self.fields.insert(key.into(), v);
    }

    /// Writes `name` into the output directory and records it.
    pub fn write_file(&mut self, name: &str, write: impl FnOnce(fs::File) -> Result<(), String>) -> CmdResult<()> {
        let path = self.out.join(name);
        let file = fs::File::create(&path).stage(Class::Input, "output")?;
        write(file).map_err(|message| Failure {
            class: Class::Input,
            stage: "output",
            message: format!("{}: {message}", path.display()),
        })?;
        self.manifest.push(name.to_string());
        Ok(())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> CmdResult<()> {
        self.write_file(name, |mut f| {
            use std::io::Write;
            f.write_all(text.as_bytes()).map_err(|e| e.to_string())
        })
    }

    /// Writes `report.json` last so the manifest lists every output.
    pub fn finish(mut self) -> CmdResult<()> {
        self.manifest.push("report.json".into());
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        self.fields.insert("timestamp_unix".into(), json!(ts));
        self.fields.insert("manifest".into(), json!(self.manifest));
        let text = serde_json::to_string_pretty(&Value::Object(self.fields)).expect("json");
        fs::write(self.out.join("report.json"), text + "\n").stage(Class::Input, "output")
    }
}
