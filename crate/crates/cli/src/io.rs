use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use kleinvae::tda::PersistenceDiagram;
use kleinvae::{Error, Result};
use serde::Serialize;

fn is_stdio(path: Option<&Path>) -> bool {
    path.is_none_or(|p| p.as_os_str() == "-")
}

/// Reads a file, or stdin for `None` and `-`.
pub fn read_input(path: Option<&Path>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    if is_stdio(path) {
        std::io::stdin().lock().read_to_end(&mut buf)?;
    } else {
        let path = path.unwrap();
        buf = std::fs::read(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    }
    Ok(buf)
}

/// Writes to a file, or stdout for `None` and `-`.
pub fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    if is_stdio(path) {
        let mut out = std::io::stdout().lock();
        out.write_all(bytes)?;
        out.flush()?;
    } else {
        std::fs::write(path.unwrap(), bytes)?;
    }
    Ok(())
}

/// `<out>.config.json` for file outputs; nothing for stdout.
pub fn config_path_for(out: Option<&Path>) -> Option<PathBuf> {
    if is_stdio(out) {
        return None;
    }
    let mut s = out.unwrap().as_os_str().to_owned();
    s.push(".config.json");
    Some(PathBuf::from(s))
}

#[derive(Serialize)]
pub struct RunConfig<'a, T: Serialize> {
    pub format_version: u32,
    pub tool_version: &'static str,
    pub threads: usize,
    #[serde(flatten)]
    pub command: &'a T,
}

pub fn write_config<T: Serialize>(path: &Path, command: &T) -> Result<()> {
    let record = RunConfig {
        format_version: 1,
        tool_version: env!("CARGO_PKG_VERSION"),
        threads: kleinvae::exec::worker_count(),
        command,
    };
    let mut text = serde_json::to_string_pretty(&record)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Diagrams from JSON lines or a JSON array of diagram objects.
pub fn parse_diagrams(bytes: &[u8]) -> Result<Vec<PersistenceDiagram>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        offset: e.valid_up_to() as u64,
        msg: "input is not UTF-8".into(),
    })?;
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        let docs: Vec<serde_json::Value> = serde_json::from_str(trimmed)?;
        return docs
            .iter()
            .map(|v| PersistenceDiagram::from_json(&v.to_string()))
            .collect();
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(PersistenceDiagram::from_json)
        .collect()
}

pub fn json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string(value)?;
    s.push('\n');
    Ok(s)
}
