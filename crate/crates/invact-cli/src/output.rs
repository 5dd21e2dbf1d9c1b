//! Output-file plumbing: resolving the output directory and writing
//! text reports either to a file or stdout.

use std::io::Write;
use std::path::PathBuf;

use crate::CliResult;

pub struct OutputDir {
    dir: PathBuf,
}

impl OutputDir {
    /// Flag value, then `INVACT_OUT_DIR`, then the working directory.
    pub fn resolve(flag: Option<PathBuf>) -> OutputDir {
        let dir = flag
            .or_else(|| std::env::var_os("INVACT_OUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."));
        OutputDir { dir }
    }

    /// Writes `content` to `name` inside the output directory, or to stdout
    /// when `name` is `-`. Prints the destination path on file writes.
    pub fn write(&self, name: &str, content: &str) -> CliResult<()> {
        if name == "-" {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(content.as_bytes()).map_err(crate::CliError::from)?;
            return Ok(());
        }
        std::fs::create_dir_all(&self.dir).map_err(crate::CliError::from)?;
        let path = self.dir.join(name);
        std::fs::write(&path, content).map_err(crate::CliError::from)?;
        eprintln!("wrote {}", path.display());
        Ok(())
    }
}

/// Minimal CSV builder with a pinned, versioned schema line.
pub struct Csv {
    buf: String,
}

impl Csv {
    pub fn new(schema: &str, header: &str) -> Csv {
        Csv {
            buf: format!("# invact-csv v1 {schema}\n{header}\n"),
        }
    }

    pub fn row(&mut self, fields: &[String]) {
        self.buf.push_str(&fields.join(","));
        self.buf.push('\n');
    }

    pub fn finish(self) -> String {
        self.buf
    }
}
