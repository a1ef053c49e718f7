use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CubeParts, DataCube, Location, VariableNames};
use crate::error::{Error, Result};

/// Column mapping for long-format cube files.
///
/// When `treatments` or `covariates` is `None`, the columns are detected from
/// the header: `x<k>` columns are treatments and `w<k>` columns covariates,
/// in header order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CubeSchema {
    pub id: String,
    pub s1: String,
    pub s2: String,
    pub t: String,
    pub response: String,
    pub treatments: Option<Vec<String>>,
    pub covariates: Option<Vec<String>>,
    pub delimiter: char,
}

impl Default for CubeSchema {
    fn default() -> Self {
        Self {
            id: "loc_id".into(),
            s1: "s1".into(),
            s2: "s2".into(),
            t: "t".into(),
            response: "y".into(),
            treatments: None,
            covariates: None,
            delimiter: ',',
        }
    }
}

fn numbered(header: &str, prefix: char) -> bool {
    header.len() > 1
        && header.starts_with(prefix)
        && header[1..].bytes().all(|b| b.is_ascii_digit())
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column '{name}'"),
        })
}

fn parse_value(raw: &str, line: u64, col: &str) -> Result<Option<f64>> {
    if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    let v: f64 = raw.parse().map_err(|_| Error::Parse {
        line,
        message: format!("column '{col}': cannot parse '{raw}' as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("column '{col}': non-finite value '{raw}'"),
        });
    }
    Ok(Some(v))
}

fn parse_required(raw: &str, line: u64, col: &str) -> Result<f64> {
    parse_value(raw, line, col)?.ok_or_else(|| Error::Parse {
        line,
        message: format!("column '{col}' must not be empty"),
    })
}

struct LocRows {
    s1: f64,
    s2: f64,
    cells: HashMap<i64, Vec<Option<f64>>>,
}

/// Reads a long-format delimited file into a cube.
///
/// The (location, time) grid is the cross product of all ids and all time
/// labels in the file; rows absent from the file become missing cells.
pub fn read_cube(path: impl AsRef<Path>, schema: &CubeSchema) -> Result<DataCube> {
    if !schema.delimiter.is_ascii() {
        return Err(Error::Config(format!(
            "delimiter {:?} must be a single ASCII character",
            schema.delimiter
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|e| csv_error(e, 1))?;
    let headers = reader.headers().map_err(|e| csv_error(e, 1))?.clone();

    let id_col = column(&headers, &schema.id)?;
    let s1_col = column(&headers, &schema.s1)?;
    let s2_col = column(&headers, &schema.s2)?;
    let t_col = column(&headers, &schema.t)?;
    let y_col = column(&headers, &schema.response)?;
    let treatment_names: Vec<String> = match &schema.treatments {
        Some(v) => v.clone(),
        None => headers.iter().filter(|h| numbered(h, 'x')).map(String::from).collect(),
    };
    let covariate_names: Vec<String> = match &schema.covariates {
        Some(v) => v.clone(),
        None => headers.iter().filter(|h| numbered(h, 'w')).map(String::from).collect(),
    };
    let value_cols: Vec<(usize, &str)> = std::iter::once(Ok((y_col, schema.response.as_str())))
        .chain(
            treatment_names
                .iter()
                .chain(covariate_names.iter())
                .map(|name| column(&headers, name).map(|c| (c, name.as_str()))),
        )
        .collect::<Result<_>>()?;

    let mut locs: HashMap<String, LocRows> = HashMap::new();
    let mut times = BTreeSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(e, 0))?;
        let line = record.position().map_or(0, |p| p.line());
        let id = record[id_col].to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                line,
                message: format!("column '{}' must not be empty", schema.id),
            });
        }
        let s1 = parse_required(&record[s1_col], line, &schema.s1)?;
        let s2 = parse_required(&record[s2_col], line, &schema.s2)?;
        let t: i64 = record[t_col].parse().map_err(|_| Error::Parse {
            line,
            message: format!("column '{}': '{}' is not an integer time index", schema.t, &record[t_col]),
        })?;
        let values = value_cols
            .iter()
            .map(|&(c, name)| parse_value(&record[c], line, name))
            .collect::<Result<Vec<_>>>()?;

        let entry = locs.entry(id.clone()).or_insert_with(|| LocRows {
            s1,
            s2,
            cells: HashMap::new(),
        });
        if entry.s1 != s1 || entry.s2 != s2 {
            return Err(Error::Integrity(format!(
                "line {line}: location '{id}' has inconsistent coordinates"
            )));
        }
        if entry.cells.insert(t, values).is_some() {
            return Err(Error::Integrity(format!(
                "line {line}: duplicate row for location '{id}' at t={t}"
            )));
        }
        times.insert(t);
    }

    let (Some(&first), Some(&last)) = (times.first(), times.last()) else {
        return Err(Error::Integrity("file contains no data rows".into()));
    };
    if let Some(gap) = (first..=last).find(|t| !times.contains(t)) {
        return Err(Error::Integrity(format!(
            "time index is not contiguous: gap at t={gap}"
        )));
    }
    let m = (last - first + 1) as usize;
    let (d, p) = (treatment_names.len(), covariate_names.len());

    let mut ids: Vec<String> = locs.keys().cloned().collect();
    ids.sort();
    let n = ids.len();
    let mut response = Vec::with_capacity(n * m);
    let mut treatments = Vec::with_capacity(n * m * d);
    let mut covariates = Vec::with_capacity(n * m * p);
    let mut locations = Vec::with_capacity(n);
    for id in ids {
        let rows = &locs[&id];
        for t in first..=last {
            match rows.cells.get(&t) {
                Some(v) => {
                    response.push(v[0]);
                    treatments.extend_from_slice(&v[1..1 + d]);
                    covariates.extend_from_slice(&v[1 + d..]);
                }
                None => {
                    response.push(None);
                    treatments.extend(std::iter::repeat_n(None, d));
                    covariates.extend(std::iter::repeat_n(None, p));
                }
            }
        }
        locations.push(Location::new(id, rows.s1, rows.s2));
    }
    DataCube::from_parts(CubeParts {
        locations,
        m,
        time_origin: first,
        names: VariableNames {
            response: schema.response.clone(),
            treatments: treatment_names,
            covariates: covariate_names,
        },
        response,
        treatments,
        covariates,
    })
}

fn csv_error(e: csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            line,
            message: format!("{kind:?}"),
        },
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes a cube in the long format understood by [`read_cube`] with the
/// default schema (column names taken from the cube).
pub fn write_cube(cube: &DataCube, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    let names = cube.names();
    let mut header = vec!["loc_id".to_string(), "s1".into(), "s2".into(), "t".into(), names.response.clone()];
    header.extend(names.treatments.iter().cloned());
    header.extend(names.covariates.iter().cloned());
    writeln!(w, "{}", header.join(","))?;
    let (d, p) = (cube.d(), cube.p());
    for (s, loc) in cube.locations().iter().enumerate() {
        for t in 0..cube.m() {
            let mut row = vec![
                loc.id.clone(),
                loc.s1.to_string(),
                loc.s2.to_string(),
                (cube.time_origin() + t as i64).to_string(),
                fmt_opt(cube.y(s, t)),
            ];
            row.extend((0..d).map(|j| fmt_opt(cube.x(s, t, j))));
            row.extend((0..p).map(|j| fmt_opt(cube.w(s, t, j))));
            writeln!(w, "{}", row.join(","))?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_file(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    const COMPLETE: &str = "loc_id,s1,s2,t,y,x1\n\
        a,0,0,1,1.5,0\n\
        a,0,0,2,2.5,1\n\
        a,0,0,3,3.5,0\n\
        b,1,0,1,4.0,1\n\
        b,1,0,2,5.0,1\n\
        b,1,0,3,6.0,0\n";

    #[test]
    fn complete_file_has_no_missing_cells() {
        let dir = tempfile::tempdir().unwrap();
        let cube = read_cube(write_file(&dir, "c.csv", COMPLETE), &CubeSchema::default()).unwrap();
        assert_eq!((cube.n(), cube.m(), cube.d(), cube.p()), (2, 3, 1, 0));
        assert_eq!(cube.missing_cells(), 0);
        assert_eq!(cube.y(1, 2), Some(6.0));
        assert_eq!(cube.x(0, 1, 0), Some(1.0));
    }

    #[test]
    fn deleted_row_becomes_one_missing_cell() {
        let dir = tempfile::tempdir().unwrap();
        let full = read_cube(write_file(&dir, "c.csv", COMPLETE), &CubeSchema::default()).unwrap();
        let body: String = COMPLETE.lines().filter(|l| !l.starts_with("b,1,0,2")).map(|l| format!("{l}\n")).collect();
        let cube = read_cube(write_file(&dir, "d.csv", &body), &CubeSchema::default()).unwrap();
        assert_eq!((cube.n(), cube.m()), (2, 3));
        assert_eq!(cube.missing_cells(), 1);
        assert_eq!(cube.y(1, 1), None);
        assert_eq!(cube.x(1, 1, 0), None);
        let differing = (0..6).filter(|&c| cube.response()[c] != full.response()[c]).count();
        assert_eq!(differing, 1);
    }

    #[test]
    fn time_gap_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let body = "loc_id,s1,s2,t,y,x1\na,0,0,1,1,0\na,0,0,2,1,0\na,0,0,4,1,0\n";
        let err = read_cube(write_file(&dir, "g.csv", body), &CubeSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Integrity(ref m) if m.contains("gap at t=3")), "{err}");
    }

    #[test]
    fn duplicate_key_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let body = "loc_id,s1,s2,t,y,x1\na,0,0,1,1,0\na,0,0,1,2,0\n";
        let err = read_cube(write_file(&dir, "d.csv", body), &CubeSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Integrity(ref m) if m.contains("duplicate")), "{err}");
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let body = "loc_id,s1,s2,t,y,x1\na,0,0,1,1,0\na,0,0,2,1;5,0\n";
        let err = read_cube(write_file(&dir, "m.csv", body), &CubeSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let body = "loc_id,s1,s2,t,y,x1\na,0,0,1,1,0\na,0,0,2,1\n";
        let err = read_cube(write_file(&dir, "m2.csv", body), &CubeSchema::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn explicit_missing_values_and_covariates() {
        let dir = tempfile::tempdir().unwrap();
        let body = "loc_id;s1;s2;t;y;x1;w1\na;0;0;5;NA;1;0.25\na;0;0;6;2;;0.5\n";
        let schema = CubeSchema {
            delimiter: ';',
            ..CubeSchema::default()
        };
        let cube = read_cube(write_file(&dir, "w.csv", body), &schema).unwrap();
        assert_eq!(cube.time_origin(), 5);
        assert_eq!((cube.m(), cube.p()), (2, 1));
        assert_eq!(cube.y(0, 0), None);
        assert_eq!(cube.x(0, 1, 0), None);
        assert_eq!(cube.w(0, 1, 0), Some(0.5));
    }

    #[test]
    fn write_then_read_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let body = "loc_id,s1,s2,t,y,x1,w1\na,0.5,0,1,0.1,0,3\nb,1e-3,2,1,,1,\nb,1e-3,2,2,7,0,1\n";
        let cube = read_cube(write_file(&dir, "r.csv", body), &CubeSchema::default()).unwrap();
        let out = dir.path().join("out.csv");
        write_cube(&cube, &out).unwrap();
        let again = read_cube(&out, &CubeSchema::default()).unwrap();
        assert_eq!(cube, again);
    }
}
