use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use multistate::nonparam::CurveTable;
use serde::Serialize;

pub const EXIT_IO: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_CONVERGENCE: u8 = 3;
pub const EXIT_USAGE: u8 = 64;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Library(multistate::Error),
    Output { path: PathBuf, source: std::io::Error },
}

impl From<multistate::Error> for Failure {
    fn from(e: multistate::Error) -> Self {
        Failure::Library(e)
    }
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Output { .. } | Failure::Library(multistate::Error::Io { .. }) => EXIT_IO,
            Failure::Library(e) if e.is_convergence_failure() => EXIT_CONVERGENCE,
            Failure::Library(_) => EXIT_DATA,
        }
    }

    fn category(&self) -> &'static str {
        match self.code() {
            EXIT_USAGE => "usage",
            EXIT_IO => "io",
            EXIT_CONVERGENCE => "convergence",
            _ => "data",
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.trim_end().to_string(),
            Failure::Library(e) => e.to_string(),
            Failure::Output { path, source } => format!("cannot write {}: {source}", path.display()),
        }
    }

    pub fn report(self) -> ExitCode {
        self.emit(None)
    }

    pub fn report_with_kind(self, kind: &str) -> ExitCode {
        self.emit(Some(kind))
    }

    fn emit(self, kind: Option<&str>) -> ExitCode {
        let mut diag = serde_json::json!({
            "error": self.category(),
            "exit_code": self.code(),
            "message": self.message(),
        });
        if let Some(kind) = kind {
            diag["kind"] = kind.into();
        }
        eprintln!("{diag}");
        ExitCode::from(self.code())
    }
}

pub type Outcome<T> = std::result::Result<T, Failure>;

/// Collects the files written by one subcommand.
pub struct Sink {
    dir: PathBuf,
    pub written: Vec<PathBuf>,
}

impl Sink {
    pub fn new(dir: &Path) -> Outcome<Self> {
        std::fs::create_dir_all(dir).map_err(|source| Failure::Output {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Sink {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn create(&mut self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Outcome<()> {
        let path = self.dir.join(name);
        let fail = |source| Failure::Output {
            path: path.clone(),
            source,
        };
        let mut w = BufWriter::new(File::create(&path).map_err(fail)?);
        body(&mut w).and_then(|_| w.flush()).map_err(fail)?;
        self.written.push(path);
        Ok(())
    }

    pub fn json(&mut self, name: &str, value: &impl Serialize) -> Outcome<()> {
        self.create(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)
        })
    }

    pub fn curve(&mut self, name: &str, table: &CurveTable) -> Outcome<()> {
        self.create(name, |w| table.write_delimited(w, ','))
    }

    pub fn with_writer(&mut self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Outcome<()> {
        self.create(name, body)
    }
}

/// Makes a covariate value usable in a file name.
pub fn file_token(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}
