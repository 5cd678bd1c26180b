//! Header-indexed CSV row access shared by the file readers.

use std::collections::HashMap;
use std::fs::File;
use std::io;
use std::path::Path;

use csv::StringRecord;
use thiserror::Error;

/// Malformed content at a known location in a text file.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{path}:{line}: {message}")]
pub struct ParseError {
    pub path: String,
    pub line: u64,
    pub message: String,
}

pub(crate) struct CsvFile {
    path: String,
    reader: csv::Reader<Box<dyn io::Read>>,
    columns: HashMap<String, usize>,
}

impl CsvFile {
    pub(crate) fn open(path: &Path) -> io::Result<Self> {
        let file = File::open(path)?;
        Self::from_reader(Box::new(file), path.display().to_string())
    }

    pub(crate) fn from_reader(reader: Box<dyn io::Read>, label: String) -> io::Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(false).from_reader(reader);
        let headers = reader.headers().map_err(csv_to_io)?.clone();
        let columns = headers.iter().enumerate().map(|(i, h)| (h.to_string(), i)).collect();
        Ok(Self { path: label, reader, columns })
    }

    pub(crate) fn path(&self) -> &str {
        &self.path
    }

    pub(crate) fn error(&self, line: u64, message: impl Into<String>) -> ParseError {
        ParseError { path: self.path.clone(), line, message: message.into() }
    }

    /// Fails when any of `names` is missing from the header row.
    pub(crate) fn require(&self, names: &[&str]) -> Result<(), ParseError> {
        for name in names {
            if !self.columns.contains_key(*name) {
                return Err(self.error(1, format!("missing column `{name}`")));
            }
        }
        Ok(())
    }

    pub(crate) fn has(&self, name: &str) -> bool {
        self.columns.contains_key(name)
    }

    /// Calls `f` once per data row.
    pub(crate) fn for_each_row<F>(&mut self, mut f: F) -> Result<(), ParseError>
    where
        F: FnMut(&Row<'_>) -> Result<(), ParseError>,
    {
        let mut record = StringRecord::new();
        loop {
            let more = self.reader.read_record(&mut record).map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                ParseError { path: self.path.clone(), line, message: e.to_string() }
            })?;
            if !more {
                return Ok(());
            }
            let line = record.position().map_or(0, |p| p.line());
            let row = Row { record: &record, line, columns: &self.columns, path: &self.path };
            f(&row)?;
        }
    }
}

fn csv_to_io(e: csv::Error) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, e)
}

pub(crate) struct Row<'a> {
    record: &'a StringRecord,
    line: u64,
    columns: &'a HashMap<String, usize>,
    path: &'a str,
}

impl Row<'_> {
    pub(crate) fn line(&self) -> u64 {
        self.line
    }

    pub(crate) fn error(&self, message: impl Into<String>) -> ParseError {
        ParseError { path: self.path.to_string(), line: self.line, message: message.into() }
    }

    fn raw(&self, name: &str) -> Option<&str> {
        self.columns.get(name).and_then(|&i| self.record.get(i))
    }

    pub(crate) fn str(&self, name: &str) -> Result<&str, ParseError> {
        self.raw(name).ok_or_else(|| self.error(format!("missing field `{name}`")))
    }

    pub(crate) fn parse<T>(&self, name: &str) -> Result<T, ParseError>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        let s = self.str(name)?;
        s.parse().map_err(|e| self.error(format!("field `{name}`: cannot parse {s:?}: {e}")))
    }

    /// Finite float.
    pub(crate) fn f64(&self, name: &str) -> Result<f64, ParseError> {
        let v: f64 = self.parse(name)?;
        if !v.is_finite() {
            return Err(self.error(format!("field `{name}` is not finite")));
        }
        Ok(v)
    }

    /// Finite float, or `None` when the column is absent or the cell empty.
    pub(crate) fn opt_f64(&self, name: &str) -> Result<Option<f64>, ParseError> {
        match self.raw(name) {
            None | Some("") => Ok(None),
            Some(_) => self.f64(name).map(Some),
        }
    }
}

/// Writes `content` to `path`, creating parent directories.
pub(crate) fn write_text(path: &Path, content: &str) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, content)
}
