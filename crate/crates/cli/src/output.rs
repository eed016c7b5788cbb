use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::CliError;

/// Numbers are written in one fixed, locale-free form.
pub fn num(x: f64) -> String {
    // no negative zero in output
    let x = if x == 0.0 { 0.0 } else { x };
    format!("{x:.16e}")
}

/// Output directory plus the comment line every file starts with.
pub struct Output {
    dir: PathBuf,
    header: String,
}

impl Output {
    pub fn new(dir: &Path, config_hash: &str, seed: u64) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| {
            CliError::Validation(format!("output directory {}: {e}", dir.display()))
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            header: format!("# config_hash={config_hash} seed={seed}"),
        })
    }

    /// Writes `lines` after the header, LF-terminated.
    pub fn write(
        &self,
        name: &str,
        lines: impl IntoIterator<Item = String>,
    ) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
        let mut w = BufWriter::new(File::create(&path).map_err(io)?);
        writeln!(w, "{}", self.header).map_err(io)?;
        for line in lines {
            w.write_all(line.as_bytes()).map_err(io)?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)?;
        Ok(path)
    }
}
