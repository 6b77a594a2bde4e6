//! On-disk formats: JSON model files, sequence CSVs and distance-matrix CSVs.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use super::CliError;
use crate::distance::Method;
use crate::gaussian::Gaussian;
use crate::hmm::{GmmHmm, Sequence};

pub const MODEL_FORMAT_VERSION: &str = "1";

/// Floats are written with 17 significant digits so that every value
/// reads back to the same bits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Pretty JSON with 17-significant-digit floats.
struct ExactFloats<'a>(PrettyFormatter<'a>);

impl Formatter for ExactFloats<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        w.write_all(fmt_f64(value).as_bytes())
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

/// Serializes `value` as pretty JSON with exact floats and a trailing newline.
pub fn to_json_exact<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ExactFloats(PrettyFormatter::new()));
    value.serialize(&mut ser).expect("in-memory JSON serialization");
    buf.push(b'\n');
    String::from_utf8(buf).expect("JSON is UTF-8")
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_likelihood: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
}

/// JSON model file. Covariances are stored as full matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: String,
    pub dim: usize,
    pub states: usize,
    pub transition: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<ModelMetadata>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl ModelFile {
    pub fn from_model(h: &GmmHmm, metadata: Option<ModelMetadata>) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION.to_string(),
            dim: h.dim(),
            states: h.states(),
            transition: rows_of(h.transition()),
            means: h.components().iter().map(|g| g.mean().iter().copied().collect()).collect(),
            covariances: h.components().iter().map(|g| rows_of(g.cov())).collect(),
            metadata,
        }
    }

    /// Re-validates every model invariant.
    pub fn to_model(&self) -> Result<GmmHmm, String> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(format!(
                "format_version: unsupported version '{}' (expected '{MODEL_FORMAT_VERSION}')",
                self.format_version
            ));
        }
        let (d, m) = (self.dim, self.states);
        if d == 0 {
            return Err("dim: must be at least 1".into());
        }
        if m == 0 {
            return Err("states: must be at least 1".into());
        }
        if self.transition.len() != m {
            return Err(format!("transition: expected {m} rows, found {}", self.transition.len()));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != m {
                return Err(format!("transition[{i}]: expected {m} entries, found {}", row.len()));
            }
        }
        if self.means.len() != m {
            return Err(format!("means: expected {m} vectors, found {}", self.means.len()));
        }
        if self.covariances.len() != m {
            return Err(format!("covariances: expected {m} matrices, found {}", self.covariances.len()));
        }
        let mut components = Vec::with_capacity(m);
        for k in 0..m {
            let mean = &self.means[k];
            if mean.len() != d {
                return Err(format!("means[{k}]: expected {d} entries, found {}", mean.len()));
            }
            let cov = &self.covariances[k];
            if cov.len() != d || cov.iter().any(|r| r.len() != d) {
                return Err(format!("covariances[{k}]: expected a {d}x{d} matrix"));
            }
            let flat: Vec<f64> = cov.iter().flatten().copied().collect();
            let g = Gaussian::new(DVector::from_column_slice(mean), DMatrix::from_row_slice(d, d, &flat))
                .map_err(|e| format!("component {k}: {e}"))?;
            components.push(g);
        }
        let flat: Vec<f64> = self.transition.iter().flatten().copied().collect();
        GmmHmm::new(DMatrix::from_row_slice(m, m, &flat), components).map_err(|e| format!("transition: {e}"))
    }
}

pub fn save_model(path: &Path, h: &GmmHmm, metadata: Option<ModelMetadata>) -> Result<(), CliError> {
    write_file(path, &to_json_exact(&ModelFile::from_model(h, metadata)))
}

pub fn load_model(path: &Path) -> Result<GmmHmm, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let file: ModelFile =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    file.to_model().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>, CliError> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

/// Reads one observation sequence: one row per time step, `#` comments and
/// an optional header row allowed.
pub fn read_sequence(path: &Path) -> Result<Sequence, CliError> {
    let mut reader = csv_reader(path)?;
    let mut data = Vec::new();
    let mut dim = None;
    let mut first = true;
    for rec in reader.records() {
        let rec = rec.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let line = record_line(&rec);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<Result<f64, _>> = rec.iter().map(str::parse::<f64>).collect();
        if first && parsed.iter().any(Result::is_err) {
            first = false;
            continue;
        }
        first = false;
        let d = *dim.get_or_insert(rec.len());
        if rec.len() != d {
            return Err(CliError::Data(format!(
                "{}: row at line {line}: expected {d} columns, found {}",
                path.display(),
                rec.len()
            )));
        }
        for (k, (field, value)) in rec.iter().zip(parsed).enumerate() {
            match value {
                Ok(v) if v.is_finite() => data.push(v),
                Ok(_) => {
                    return Err(CliError::Data(format!(
                        "{}: row at line {line}, column {}: non-finite value '{field}'",
                        path.display(),
                        k + 1
                    )))
                }
                Err(_) => {
                    return Err(CliError::Data(format!(
                        "{}: row at line {line}, column {}: '{field}' is not a number",
                        path.display(),
                        k + 1
                    )))
                }
            }
        }
    }
    let dim = dim.ok_or_else(|| CliError::Data(format!("{}: no observations", path.display())))?;
    Sequence::new(dim, data).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Writes a sequence as headerless CSV.
pub fn write_sequence(path: &Path, s: &Sequence) -> Result<(), CliError> {
    let mut out = String::new();
    for row in s.rows() {
        let fields: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    write_file(path, &out)
}

/// Two-column `file,label` CSV; a header row is allowed.
pub fn read_labels(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let mut reader = csv_reader(path)?;
    let mut out = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if rec.len() != 2 {
            return Err(CliError::Data(format!(
                "{}: row at line {}: expected 'file,label'",
                path.display(),
                record_line(&rec)
            )));
        }
        if k == 0 && rec[0].eq_ignore_ascii_case("file") && rec[1].eq_ignore_ascii_case("label") {
            continue;
        }
        out.push((rec[0].to_string(), rec[1].to_string()));
    }
    Ok(out)
}

/// A distance matrix as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixFile {
    pub method: Option<Method>,
    pub names: Vec<String>,
    pub labels: Vec<String>,
    pub values: DMatrix<f64>,
}

/// `# key=value ...` metadata line, then `name,label,<names>` and one row per model.
pub fn write_matrix_csv(
    path: &Path,
    metadata: &str,
    names: &[String],
    labels: &[String],
    values: &DMatrix<f64>,
) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut buf = BufWriter::new(file);
    writeln!(buf, "# {metadata}").map_err(|e| CliError::io(path, e))?;
    let mut w = csv::Writer::from_writer(buf);
    let csv_err = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    let mut header = vec!["name".to_string(), "label".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..names.len() {
        let mut row = vec![names[i].clone(), labels[i].clone()];
        row.extend(values.row(i).iter().map(|&v| fmt_f64(v)));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<MatrixFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let method = text
        .lines()
        .filter_map(|l| l.strip_prefix('#'))
        .flat_map(str::split_whitespace)
        .find_map(|kv| kv.strip_prefix("method="))
        .map(|m| m.parse::<Method>())
        .transpose()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut reader = csv_reader(path)?;
    let data_err = |line: u64, msg: String| CliError::Data(format!("{}: row at line {line}: {msg}", path.display()));
    let mut records = reader.records();
    let header = records
        .next()
        .ok_or_else(|| CliError::Data(format!("{}: empty matrix file", path.display())))?
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    if header.len() < 2 || &header[0] != "name" || &header[1] != "label" {
        return Err(data_err(record_line(&header), "header must start with 'name,label'".into()));
    }
    let names: Vec<String> = header.iter().skip(2).map(String::from).collect();
    let n = names.len();
    let mut labels = Vec::with_capacity(n);
    let mut values = DMatrix::zeros(n, n);
    let mut i = 0;
    for rec in records {
        let rec = rec.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let line = record_line(&rec);
        if i == n {
            return Err(data_err(line, format!("more than {n} rows")));
        }
        if rec.len() != n + 2 {
            return Err(data_err(line, format!("expected {} fields, found {}", n + 2, rec.len())));
        }
        if rec[0] != names[i] {
            return Err(data_err(line, format!("row name '{}' does not match column '{}'", &rec[0], names[i])));
        }
        labels.push(rec[1].to_string());
        for j in 0..n {
            let field = &rec[j + 2];
            values[(i, j)] = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| data_err(line, format!("column {}: invalid distance '{field}'", j + 3)))?;
        }
        i += 1;
    }
    if i != n {
        return Err(CliError::Data(format!("{}: expected {n} rows, found {i}", path.display())));
    }
    Ok(MatrixFile { method, names, labels, values })
}
