use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Line-per-event experiment log: `event key=value ...`. Holds no clock
/// readings, so two identical runs produce identical logs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ExperimentLog {
    lines: Vec<String>,
    echo: bool,
}

impl ExperimentLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Also prints each event to stderr.
    pub fn echoing() -> Self {
        ExperimentLog {
            lines: Vec::new(),
            echo: true,
        }
    }

    pub fn event(&mut self, kind: &str, fields: &[(&str, String)]) {
        let mut line = kind.to_string();
        for (k, v) in fields {
            let _ = write!(line, " {k}={v}");
        }
        if self.echo {
            eprintln!("{line}");
        }
        self.lines.push(line);
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn text(&self) -> String {
        self.lines.iter().map(|l| format!("{l}\n")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.text()).map_err(|e| Error::io(path, e))
    }
}
