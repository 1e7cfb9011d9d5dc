//! CSV ingestion and persistence for tables, square matrices and response vectors,
//! plus line-delimited JSON records.
//!
//! Every CSV has a header row whose first cell labels the id column, followed by one
//! row per sample (or taxon) with the id in the first column. Lines starting with `#`
//! are comments and are skipped on load. Reals are written with 17 significant digits.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{KprError, Result};
use crate::kernels::SquareMatrix;

/// Sample-by-taxon matrix with its identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceTable {
    sample_ids: Vec<String>,
    taxon_ids: Vec<String>,
    values: DMatrix<f64>,
}

impl AbundanceTable {
    pub fn new(sample_ids: Vec<String>, taxon_ids: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() != sample_ids.len() || values.ncols() != taxon_ids.len() {
            return Err(KprError::Schema(format!(
                "table is {}x{} but has {} sample ids and {} taxon ids",
                values.nrows(),
                values.ncols(),
                sample_ids.len(),
                taxon_ids.len()
            )));
        }
        if sample_ids.len() < 2 {
            return Err(KprError::Schema(format!("table needs at least 2 samples, got {}", sample_ids.len())));
        }
        if taxon_ids.is_empty() {
            return Err(KprError::Schema("table needs at least one taxon".into()));
        }
        ensure_unique(&sample_ids, "sample")?;
        ensure_unique(&taxon_ids, "taxon")?;
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (i, j) = (pos % values.nrows(), pos / values.nrows());
            return Err(KprError::Domain(format!(
                "non-finite entry at sample {} taxon {}",
                sample_ids[i], taxon_ids[j]
            )));
        }
        Ok(AbundanceTable {
            sample_ids,
            taxon_ids,
            values,
        })
    }

    /// Builds a table with generated ids `s0..`, `t0..`.
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        let samples = (0..values.nrows()).map(|i| format!("s{i}")).collect();
        let taxa = (0..values.ncols()).map(|j| format!("t{j}")).collect();
        AbundanceTable::new(samples, taxa, values)
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn taxon_ids(&self) -> &[String] {
        &self.taxon_ids
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_taxa(&self) -> usize {
        self.values.ncols()
    }

    /// Same ids, new values of the same shape.
    pub fn with_values(&self, values: DMatrix<f64>) -> Result<Self> {
        AbundanceTable::new(self.sample_ids.clone(), self.taxon_ids.clone(), values)
    }

    /// Reorders (or subsets) the taxon columns to follow `order`.
    pub fn select_taxa(&self, order: &[String]) -> Result<Self> {
        let idx = index_of_all(&self.taxon_ids, order, "taxon")?;
        let values = DMatrix::from_fn(self.n_samples(), idx.len(), |i, j| self.values[(i, idx[j])]);
        AbundanceTable::new(self.sample_ids.clone(), order.to_vec(), values)
    }

    pub fn select_samples(&self, order: &[String]) -> Result<Self> {
        let idx = index_of_all(&self.sample_ids, order, "sample")?;
        let values = DMatrix::from_fn(idx.len(), self.n_taxa(), |i, j| self.values[(idx[i], j)]);
        AbundanceTable::new(order.to_vec(), self.taxon_ids.clone(), values)
    }
}

/// Outcome per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseVector {
    sample_ids: Vec<String>,
    values: DVector<f64>,
}

impl ResponseVector {
    pub fn new(sample_ids: Vec<String>, values: DVector<f64>) -> Result<Self> {
        if sample_ids.len() != values.len() {
            return Err(KprError::Schema(format!(
                "response has {} values but {} ids",
                values.len(),
                sample_ids.len()
            )));
        }
        ensure_unique(&sample_ids, "sample")?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(KprError::Domain("response contains a non-finite value".into()));
        }
        Ok(ResponseVector { sample_ids, values })
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Reorders the response to follow the sample order of `table`.
    pub fn aligned_to(&self, table: &AbundanceTable) -> Result<Self> {
        if table.n_samples() != self.len() {
            return Err(KprError::Schema(format!(
                "response has {} samples, table has {}",
                self.len(),
                table.n_samples()
            )));
        }
        let idx = index_of_all(&self.sample_ids, table.sample_ids(), "sample")?;
        Ok(ResponseVector {
            sample_ids: table.sample_ids().to_vec(),
            values: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.values[i])),
        })
    }
}

pub(crate) fn ensure_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(KprError::Schema(format!("duplicate {what} id '{id}'")));
        }
    }
    Ok(())
}

pub(crate) fn index_of_all(haystack: &[String], wanted: &[String], what: &str) -> Result<Vec<usize>> {
    let pos: std::collections::HashMap<&str, usize> =
        haystack.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    wanted
        .iter()
        .map(|w| {
            pos.get(w.as_str())
                .copied()
                .ok_or_else(|| KprError::Schema(format!("unknown {what} id '{w}'")))
        })
        .collect()
}

/// What a CSV file is expected to contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableKind {
    Abundance,
    Distance,
    Kernel,
    Response,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Table {
    Abundance(AbundanceTable),
    Square(SquareMatrix),
    Response(ResponseVector),
}

struct RawCsv {
    header: Vec<String>,
    row_ids: Vec<String>,
    rows: Vec<Vec<f64>>,
}

fn read_raw_csv(path: &Path) -> Result<RawCsv> {
    let context = path.display().to_string();
    let file = File::open(path).map_err(|e| KprError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut header: Option<Vec<String>> = None;
    let mut row_ids = Vec::new();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            KprError::parse(&context, line, 0, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let Some(head) = &header else {
            header = Some(record.iter().map(str::to_string).collect());
            continue;
        };
        if record.len() != head.len() {
            return Err(KprError::parse(
                &context,
                line,
                record.len(),
                format!("ragged row: expected {} fields, found {}", head.len(), record.len()),
            ));
        }
        row_ids.push(record[0].to_string());
        let mut row = Vec::with_capacity(record.len() - 1);
        for (col, field) in record.iter().enumerate().skip(1) {
            let value: f64 = field.parse().map_err(|_| {
                KprError::parse(&context, line, col + 1, format!("non-numeric cell '{field}'"))
            })?;
            if !value.is_finite() {
                return Err(KprError::parse(&context, line, col + 1, format!("non-finite cell '{field}'")));
            }
            row.push(value);
        }
        rows.push(row);
    }
    let header = header.ok_or_else(|| KprError::parse(&context, 1, 0, "missing header row"))?;
    if header.len() < 2 {
        return Err(KprError::parse(&context, 1, 0, "header needs an id column and at least one data column"));
    }
    Ok(RawCsv {
        header: header[1..].to_vec(),
        row_ids,
        rows,
    })
}

fn raw_to_matrix(raw: &RawCsv) -> DMatrix<f64> {
    let ncols = raw.header.len();
    DMatrix::from_fn(raw.rows.len(), ncols, |i, j| raw.rows[i][j])
}

pub fn load_table(path: impl AsRef<Path>, kind: TableKind) -> Result<Table> {
    let path = path.as_ref();
    let raw = read_raw_csv(path)?;
    match kind {
        TableKind::Abundance => {
            let values = raw_to_matrix(&raw);
            Ok(Table::Abundance(AbundanceTable::new(raw.row_ids, raw.header, values)?))
        }
        TableKind::Distance | TableKind::Kernel => {
            if raw.row_ids != raw.header {
                return Err(KprError::Schema(format!(
                    "{}: square matrix row ids do not match column ids",
                    path.display()
                )));
            }
            let values = raw_to_matrix(&raw);
            Ok(Table::Square(SquareMatrix::new(raw.row_ids, values)?))
        }
        TableKind::Response => {
            if raw.header.len() != 1 {
                return Err(KprError::Schema(format!(
                    "{}: response file needs exactly one value column, found {}",
                    path.display(),
                    raw.header.len()
                )));
            }
            let values = DVector::from_iterator(raw.rows.len(), raw.rows.iter().map(|r| r[0]));
            Ok(Table::Response(ResponseVector::new(raw.row_ids, values)?))
        }
    }
}

pub fn load_abundance(path: impl AsRef<Path>) -> Result<AbundanceTable> {
    match load_table(path, TableKind::Abundance)? {
        Table::Abundance(t) => Ok(t),
        _ => unreachable!(),
    }
}

pub fn load_square(path: impl AsRef<Path>) -> Result<SquareMatrix> {
    match load_table(path, TableKind::Kernel)? {
        Table::Square(m) => Ok(m),
        _ => unreachable!(),
    }
}

pub fn load_response(path: impl AsRef<Path>) -> Result<ResponseVector> {
    match load_table(path, TableKind::Response)? {
        Table::Response(r) => Ok(r),
        _ => unreachable!(),
    }
}

/// Formats a real with 17 significant digits, which round-trips every `f64` exactly.
pub fn format_real(x: f64) -> String {
    if x == 0.0 {
        // keeps "-0" out of the files
        return "0".to_string();
    }
    format!("{x:.16e}")
}

fn write_matrix_csv(
    path: &Path,
    comments: &[String],
    corner: &str,
    col_ids: &[String],
    row_ids: &[String],
    values: &DMatrix<f64>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| KprError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| KprError::io(path, e);
    for c in comments {
        for line in c.lines() {
            writeln!(out, "# {line}").map_err(io)?;
        }
    }
    let mut header = vec![csv_field(corner)];
    header.extend(col_ids.iter().map(|s| csv_field(s)));
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for (i, id) in row_ids.iter().enumerate() {
        let mut line = csv_field(id);
        for j in 0..values.ncols() {
            line.push(',');
            line.push_str(&format_real(values[(i, j)]));
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) || s.starts_with('#') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn save_abundance(path: impl AsRef<Path>, table: &AbundanceTable, comments: &[String]) -> Result<()> {
    write_matrix_csv(
        path.as_ref(),
        comments,
        "sample",
        table.taxon_ids(),
        table.sample_ids(),
        table.values(),
    )
}

pub fn save_square(path: impl AsRef<Path>, ids: &[String], values: &DMatrix<f64>, comments: &[String]) -> Result<()> {
    write_matrix_csv(path.as_ref(), comments, "id", ids, ids, values)
}

/// Writes an arbitrary labelled matrix (e.g. PCoA coordinates or an edge matrix).
pub fn save_matrix(
    path: impl AsRef<Path>,
    row_ids: &[String],
    col_ids: &[String],
    values: &DMatrix<f64>,
    comments: &[String],
) -> Result<()> {
    write_matrix_csv(path.as_ref(), comments, "id", col_ids, row_ids, values)
}

pub fn save_response(path: impl AsRef<Path>, response: &ResponseVector, comments: &[String]) -> Result<()> {
    let values = DMatrix::from_column_slice(response.len(), 1, response.values().as_slice());
    write_matrix_csv(
        path.as_ref(),
        comments,
        "sample",
        &["y".to_string()],
        response.sample_ids(),
        &values,
    )
}

/// Column-centers a table; ids are unchanged.
pub fn center_columns(x: &AbundanceTable) -> AbundanceTable {
    AbundanceTable {
        sample_ids: x.sample_ids.clone(),
        taxon_ids: x.taxon_ids.clone(),
        values: center_matrix_columns(&x.values),
    }
}

pub fn center_matrix_columns(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    out
}

/// One JSON object per line. An empty slice produces an empty file.
pub fn save_records<T: Serialize>(records: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| KprError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| KprError::parse(path.display().to_string(), 0, 0, e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| KprError::io(path, e))?;
    }
    out.flush().map_err(|e| KprError::io(path, e))
}

pub fn load_records<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| KprError::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| KprError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| KprError::parse(path.display().to_string(), i + 1, e.column(), e.to_string()))?;
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn parses_abundance_with_header_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "x.csv", "# provenance\nsample,A,B\ns1,1,2\ns2,3,4\ns3,5,6.5\n");
        let t = load_abundance(&p).unwrap();
        assert_eq!(t.n_samples(), 3);
        assert_eq!(t.n_taxa(), 2);
        assert_eq!(t.sample_ids(), ["s1", "s2", "s3"]);
        assert_eq!(t.values()[(2, 1)], 6.5);
    }

    #[test]
    fn square_with_mismatched_ids_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.csv", "id,a,b\na,0,1\nc,1,0\n");
        assert!(matches!(load_table(&p, TableKind::Distance), Err(KprError::Schema(_))));
    }

    #[test]
    fn nan_and_garbage_are_parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "x.csv", "sample,A\ns1,1\ns2,NaN\n");
        match load_abundance(&p) {
            Err(KprError::Parse { line, column, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(column, 2);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let q = write(&dir, "y.csv", "sample,A\ns1,abc\ns2,1\n");
        assert!(matches!(load_abundance(&q), Err(KprError::Parse { .. })));
    }

    #[test]
    fn ragged_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "x.csv", "sample,A,B\ns1,1,2\ns2,3\n");
        assert!(matches!(load_abundance(&p), Err(KprError::Parse { .. })));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "x.csv", "sample,A,A\ns1,1,2\ns2,3,4\n");
        assert!(matches!(load_abundance(&p), Err(KprError::Schema(_))));
    }

    #[test]
    fn response_roundtrip_and_alignment() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "y.csv", "sample,y\ns2,2\ns1,1\n");
        let y = load_response(&p).unwrap();
        let t = AbundanceTable::new(
            vec!["s1".into(), "s2".into()],
            vec!["A".into()],
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        )
        .unwrap();
        let aligned = y.aligned_to(&t).unwrap();
        assert_eq!(aligned.values().as_slice(), &[1.0, 2.0]);

        let out = dir.path().join("y2.csv");
        save_response(&out, &aligned, &[]).unwrap();
        assert_eq!(load_response(&out).unwrap(), aligned);
    }

    #[test]
    fn centering_examples() {
        let t = AbundanceTable::from_matrix(DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0])).unwrap();
        let c = center_columns(&t);
        assert_eq!(c.values().as_slice(), &[-1.0, 0.0, 1.0]);
        let again = center_columns(&c);
        assert!((again.values() - c.values()).amax() < 1e-12);

        let k = AbundanceTable::from_matrix(DMatrix::from_column_slice(2, 1, &[5.0, 5.0])).unwrap();
        assert_eq!(center_columns(&k).values().as_slice(), &[0.0, 0.0]);
    }

    #[derive(Debug, PartialEq, serde::Serialize, serde::Deserialize)]
    struct Rec {
        name: String,
        esse: f64,
    }

    #[test]
    fn records_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        save_records::<Rec>(&[], &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "");

        let recs = vec![
            Rec { name: "a".into(), esse: 0.0 },
            Rec { name: "b".into(), esse: 0.1 + 0.2 },
        ];
        save_records(&recs, &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 2);
        let back: Vec<Rec> = load_records(&p).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn format_real_roundtrips_awkward_values() {
        for x in [0.1 + 0.2, 1e-300, -123456.789e10, f64::MAX, f64::MIN_POSITIVE, 1.0 / 3.0] {
            let s = format_real(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
    }
}
