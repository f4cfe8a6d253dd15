use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

/// Line-delimited JSON metrics, appended to a file and optionally echoed to
/// standard output.
pub struct MetricsLog {
    file: Option<(PathBuf, BufWriter<File>)>,
    echo: bool,
}

impl MetricsLog {
    pub fn disabled() -> Self {
        Self { file: None, echo: false }
    }

    pub fn open(path: &Path, echo: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: Some((path.to_path_buf(), BufWriter::new(f))),
            echo,
        })
    }

    pub fn write(&mut self, record: Value) -> Result<()> {
        let line = record.to_string();
        if self.echo {
            println!("{line}");
        }
        if let Some((path, w)) = &mut self.file {
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }

    /// `{"event": .., "stage": .., "iteration": .., ..fields}`
    pub fn event(&mut self, event: &str, stage: &str, iteration: usize, fields: Value) -> Result<()> {
        let mut obj = Map::new();
        obj.insert("event".into(), json!(event));
        obj.insert("stage".into(), json!(stage));
        obj.insert("iteration".into(), json!(iteration));
        if let Value::Object(extra) = fields {
            obj.extend(extra);
        }
        self.write(Value::Object(obj))
    }
}
