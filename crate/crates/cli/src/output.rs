//! CSV and JSON emitters plus an output directory with atomic writes.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{LabError, LabResult};

/// A column-oriented numeric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Table { columns: columns.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    fn check_finite(&self) -> LabResult<()> {
        for (k, row) in self.rows.iter().enumerate() {
            if row.len() != self.columns.len() {
                return Err(LabError::Numerical(format!(
                    "row {k} has {} values for {} columns",
                    row.len(),
                    self.columns.len()
                )));
            }
            if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                return Err(LabError::Numerical(format!(
                    "non-finite value in column '{}' at row {k}",
                    self.columns[c]
                )));
            }
        }
        Ok(())
    }
}

/// CSV with a header line and every value as `{:.16e}` (17 significant digits).
pub fn emit_csv(table: &Table) -> LabResult<String> {
    table.check_finite()?;
    let mut out = table.columns.join(",");
    out.push('\n');
    for row in &table.rows {
        // adding 0.0 turns -0.0 into 0.0
        let line: Vec<String> = row.iter().map(|v| format!("{:.16e}", v + 0.0)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_csv(text: &str) -> LabResult<Table> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| LabError::Config("empty CSV".into()))?;
    let mut table = Table::new(header.split(','));
    for (k, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|s| s.parse::<f64>().map_err(|e| LabError::Config(format!("CSV row {k}: {e}"))))
            .collect::<LabResult<Vec<f64>>>()?;
        table.push(row);
    }
    Ok(table)
}

/// Pretty printer that refuses to write `null`.
///
/// serde_json turns NaN and infinities into `null`; the summaries never hold
/// `Option::None` (those fields are skipped), so any `null` reaching the
/// writer is a non-finite number.
struct StrictFormatter(PrettyFormatter<'static>);

fn non_finite() -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, "non-finite number in summary")
}

impl Formatter for StrictFormatter {
    fn write_null<W: ?Sized + Write>(&mut self, _: &mut W) -> io::Result<()> {
        Err(non_finite())
    }
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        if !v.is_finite() {
            return Err(non_finite());
        }
        self.0.write_f64(w, v)
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn emit_json<T: Serialize>(value: &T) -> LabResult<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, StrictFormatter(PrettyFormatter::new()));
    value.serialize(&mut ser).map_err(|e| LabError::Numerical(e.to_string()))?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

pub fn parse_json<T: DeserializeOwned>(text: &str) -> LabResult<T> {
    serde_json::from_str(text).map_err(|e| LabError::Config(e.to_string()))
}

/// Output directory that writes each file through a temporary and a rename,
/// and removes everything it wrote unless [`OutputDir::commit`] is called.
#[derive(Debug)]
pub struct OutputDir {
    dir: PathBuf,
    written: Vec<PathBuf>,
    committed: bool,
}

impl OutputDir {
    pub fn create(dir: &Path) -> LabResult<Self> {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        Ok(OutputDir { dir: dir.to_path_buf(), written: Vec::new(), committed: false })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, contents: &str) -> LabResult<PathBuf> {
        let target = self.dir.join(name);
        let tmp = self.dir.join(format!(".{name}.tmp"));
        let res = (|| {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(contents.as_bytes())?;
            f.sync_all()?;
            fs::rename(&tmp, &target)
        })();
        if let Err(e) = res {
            let _ = fs::remove_file(&tmp);
            return Err(LabError::io(&target, e));
        }
        self.written.push(target.clone());
        Ok(target)
    }

    pub fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.written)
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.written {
                let _ = fs::remove_file(p);
            }
        }
    }
}
