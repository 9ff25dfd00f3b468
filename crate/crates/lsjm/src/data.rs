//! CSV input and output of datasets.
//!
//! Longitudinal file: `id,time,value` followed by covariate columns. Survival
//! file: `id`, optional `entry_time`, `event_time`, `status` (0, 1 or 2),
//! followed by covariate columns. Covariates are time-fixed; a covariate
//! present in both files must agree for every subject.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::Path;

use lsjm_core::{Dataset, SubjectData};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalRecord {
    pub id: String,
    pub time: f64,
    pub value: f64,
    pub covariates: BTreeMap<String, f64>,
    /// Line in the source file, for diagnostics.
    pub line: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalRecord {
    pub id: String,
    pub entry_time: f64,
    pub event_time: f64,
    pub status: u8,
    pub covariates: BTreeMap<String, f64>,
    pub line: u64,
}

struct Table {
    headers: Vec<String>,
    rows: Vec<(u64, csv::StringRecord)>,
}

fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        rows.push((line, record));
    }
    Ok(Table { headers, rows })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

fn column(path: &Path, headers: &[String], name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::file(path, format!("missing column `{name}`")))
}

fn parse_number(path: &Path, line: u64, name: &str, field: &str) -> Result<f64> {
    field.parse::<f64>().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("column `{name}`: `{field}` is not a number"),
    })
}

fn covariate_columns(headers: &[String], reserved: &[usize]) -> Vec<(usize, String)> {
    headers
        .iter()
        .enumerate()
        .filter(|(i, _)| !reserved.contains(i))
        .map(|(i, h)| (i, h.clone()))
        .collect()
}

fn parse_covariates(
    path: &Path,
    line: u64,
    record: &csv::StringRecord,
    columns: &[(usize, String)],
) -> Result<BTreeMap<String, f64>> {
    columns
        .iter()
        .map(|(i, name)| Ok((name.clone(), parse_number(path, line, name, &record[*i])?)))
        .collect()
}

/// Reads the longitudinal file. A file without any content yields no records.
pub fn read_longitudinal(path: impl AsRef<Path>) -> Result<Vec<LongitudinalRecord>> {
    let path = path.as_ref();
    let table = read_table(path)?;
    if table.headers.is_empty() && table.rows.is_empty() {
        return Ok(Vec::new());
    }
    let h = &table.headers;
    let (id, time, value) = (column(path, h, "id")?, column(path, h, "time")?, column(path, h, "value")?);
    let covs = covariate_columns(h, &[id, time, value]);
    table
        .rows
        .iter()
        .map(|(line, r)| {
            Ok(LongitudinalRecord {
                id: r[id].to_string(),
                time: parse_number(path, *line, "time", &r[time])?,
                value: parse_number(path, *line, "value", &r[value])?,
                covariates: parse_covariates(path, *line, r, &covs)?,
                line: *line,
            })
        })
        .collect()
}

/// Reads the survival file.
pub fn read_survival(path: impl AsRef<Path>) -> Result<Vec<SurvivalRecord>> {
    let path = path.as_ref();
    let table = read_table(path)?;
    let h = &table.headers;
    let id = column(path, h, "id")?;
    let entry = h.iter().position(|c| c == "entry_time");
    let event_time = column(path, h, "event_time")?;
    let status = column(path, h, "status")?;
    let mut reserved = vec![id, event_time, status];
    reserved.extend(entry);
    let covs = covariate_columns(h, &reserved);
    table
        .rows
        .iter()
        .map(|(line, r)| {
            let code = parse_number(path, *line, "status", &r[status])?;
            if ![0.0, 1.0, 2.0].contains(&code) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: *line,
                    message: format!("status must be 0, 1 or 2, found `{}`", &r[status]),
                });
            }
            Ok(SurvivalRecord {
                id: r[id].to_string(),
                entry_time: match entry {
                    Some(c) => parse_number(path, *line, "entry_time", &r[c])?,
                    None => 0.0,
                },
                event_time: parse_number(path, *line, "event_time", &r[event_time])?,
                status: code as u8,
                covariates: parse_covariates(path, *line, r, &covs)?,
                line: *line,
            })
        })
        .collect()
}

/// Joins the two record sets into subjects, in survival-file order, with
/// measurements sorted by time.
pub fn join_records(longitudinal: &[LongitudinalRecord], survival: &[SurvivalRecord]) -> Result<Dataset> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, s) in survival.iter().enumerate() {
        if index.insert(s.id.as_str(), i).is_some() {
            return Err(Error::Config(format!(
                "survival line {}: subject `{}` appears more than once",
                s.line, s.id
            )));
        }
    }
    let mut measurements: Vec<Vec<&LongitudinalRecord>> = vec![Vec::new(); survival.len()];
    for rec in longitudinal {
        let i = *index.get(rec.id.as_str()).ok_or_else(|| {
            Error::Config(format!(
                "longitudinal line {}: subject `{}` has no survival record",
                rec.line, rec.id
            ))
        })?;
        measurements[i].push(rec);
    }
    let mut subjects = Vec::with_capacity(survival.len());
    for (s, mut recs) in survival.iter().zip(measurements) {
        recs.sort_by(|a, b| a.time.total_cmp(&b.time));
        let mut covariates = s.covariates.clone();
        for rec in &recs {
            for (name, &v) in &rec.covariates {
                match covariates.get(name) {
                    Some(&old) if old != v => {
                        return Err(Error::Config(format!(
                            "longitudinal line {}: covariate `{name}` of subject `{}` is {v}, elsewhere {old}",
                            rec.line, s.id
                        )))
                    }
                    _ => {
                        covariates.insert(name.clone(), v);
                    }
                }
            }
        }
        subjects.push(SubjectData::new(
            s.id.clone(),
            recs.iter().map(|r| r.time).collect(),
            recs.iter().map(|r| r.value).collect(),
            covariates,
            s.entry_time,
            s.event_time,
            s.status,
        )?);
    }
    Ok(Dataset::new(subjects))
}

/// Reads and joins a longitudinal and a survival file.
pub fn read_dataset(longitudinal: impl AsRef<Path>, survival: impl AsRef<Path>) -> Result<Dataset> {
    join_records(&read_longitudinal(longitudinal)?, &read_survival(survival)?)
}

fn covariate_names(dataset: &Dataset) -> Vec<String> {
    let mut names: Vec<String> = dataset
        .subjects
        .iter()
        .flat_map(|s| s.covariates.keys().cloned())
        .collect();
    names.sort();
    names.dedup();
    names
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn write_error(path: &Path, e: csv::Error) -> Error {
    Error::file(path, e)
}

/// Writes `dataset` as a longitudinal and a survival file. Covariates go to
/// the survival file only.
pub fn write_dataset(dataset: &Dataset, longitudinal: impl AsRef<Path>, survival: impl AsRef<Path>) -> Result<()> {
    let (lpath, spath) = (longitudinal.as_ref(), survival.as_ref());
    let covs = covariate_names(dataset);
    let mut w = writer(lpath)?;
    w.write_record(["id", "time", "value"]).map_err(|e| write_error(lpath, e))?;
    for s in &dataset.subjects {
        for (t, y) in s.times.iter().zip(&s.values) {
            w.write_record([s.id.clone(), t.to_string(), y.to_string()])
                .map_err(|e| write_error(lpath, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(lpath, e))?;

    let mut w = writer(spath)?;
    let mut header = vec!["id".to_string(), "entry_time".into(), "event_time".into(), "status".into()];
    header.extend(covs.iter().cloned());
    w.write_record(&header).map_err(|e| write_error(spath, e))?;
    for s in &dataset.subjects {
        let mut row = vec![
            s.id.clone(),
            s.entry_time.to_string(),
            s.event_time.to_string(),
            s.event.to_string(),
        ];
        for name in &covs {
            let v = s.covariates.get(name).ok_or_else(|| {
                Error::Model(lsjm_core::Error::MissingCovariate {
                    subject: s.id.clone(),
                    covariate: name.clone(),
                })
            })?;
            row.push(v.to_string());
        }
        w.write_record(&row).map_err(|e| write_error(spath, e))?;
    }
    w.flush().map_err(|e| Error::io(spath, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(dir: &tempfile::TempDir, name: &str, content: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        File::create(&p).unwrap().write_all(content.as_bytes()).unwrap();
        p
    }

    #[test]
    fn joins_and_sorts_measurements() {
        let dir = tempfile::tempdir().unwrap();
        let l = file(&dir, "l.csv", "id,time,value\na,1,3.5\na,0,2\nb,0.5,1\n");
        let s = file(&dir, "s.csv", "id,event_time,status,trt\nb,2,1,0\na,3,0,1\n");
        let d = read_dataset(&l, &s).unwrap();
        assert_eq!(d.subjects[0].id, "b");
        assert_eq!(d.subjects[1].times, vec![0.0, 1.0]);
        assert_eq!(d.subjects[1].values, vec![2.0, 3.5]);
        assert_eq!(d.subjects[1].covariates["trt"], 1.0);
        assert_eq!(d.subjects[1].entry_time, 0.0);
    }

    #[test]
    fn empty_longitudinal_file_gives_survival_only_subjects() {
        let dir = tempfile::tempdir().unwrap();
        let l = file(&dir, "l.csv", "");
        let s = file(&dir, "s.csv", "id,event_time,status\na,3,1\n");
        let d = read_dataset(&l, &s).unwrap();
        assert_eq!(d.subjects[0].n_measurements(), 0);
    }

    #[test]
    fn non_numeric_field_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let l = file(&dir, "l.csv", "id,time,value\na,0,1\na,1,oops\n");
        let err = read_longitudinal(&l).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
        assert!(err.contains("oops"), "{err}");
    }

    #[test]
    fn status_three_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = file(&dir, "s.csv", "id,event_time,status\na,3,3\n");
        let err = read_survival(&s).unwrap_err().to_string();
        assert!(err.contains(":2:") && err.contains("status"), "{err}");
    }

    #[test]
    fn unknown_longitudinal_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let l = file(&dir, "l.csv", "id,time,value\nz,0,1\n");
        let s = file(&dir, "s.csv", "id,event_time,status\na,3,0\n");
        let err = read_dataset(&l, &s).unwrap_err().to_string();
        assert!(err.contains("`z`"), "{err}");
    }

    #[test]
    fn measurement_after_event_names_subject() {
        let dir = tempfile::tempdir().unwrap();
        let l = file(&dir, "l.csv", "id,time,value\nq7,4,1\n");
        let s = file(&dir, "s.csv", "id,event_time,status\nq7,3,1\n");
        let err = read_dataset(&l, &s).unwrap_err().to_string();
        assert!(err.contains("q7"), "{err}");
    }

    #[test]
    fn conflicting_covariates_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let l = file(&dir, "l.csv", "id,time,value,trt\na,0,1,0\n");
        let s = file(&dir, "s.csv", "id,event_time,status,trt\na,3,0,1\n");
        assert!(read_dataset(&l, &s).is_err());
    }

    #[test]
    fn missing_column_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let s = file(&dir, "s.csv", "id,status\na,1\n");
        let err = read_survival(&s).unwrap_err().to_string();
        assert!(err.contains("event_time"), "{err}");
    }
}
