//! Dataset files.
//!
//! CSV: header `dim1,…,dimk,y1,…,yd`, one row per unit, cluster labels
//! 1-based. JSON: `{"dims": [C1,…,Ck], "units": [{"cell": [j1,…,jk], "y": [...]}]}`,
//! also 1-based. In memory everything is 0-based.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bootstrap::format_float;
use crate::data::{load_sample_with_dim, ClusteredSample, Dimensions};
use crate::error::{Error, Result};

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// Resolves the design: the given one, or the largest label seen per dimension.
fn resolve_dims(dims: Option<&Dimensions>, k: usize, coords: &[(Vec<usize>, Vec<f64>)]) -> Result<Dimensions> {
    match dims {
        Some(d) if d.k() != k => Err(Error::Shape(format!(
            "file has {} cluster dimensions, design has {}",
            k,
            d.k()
        ))),
        Some(d) => Ok(d.clone()),
        None => {
            if coords.is_empty() {
                return Err(Error::EmptySample);
            }
            let mut c = vec![0; k];
            for (j, _) in coords {
                for (m, v) in c.iter_mut().zip(j) {
                    *m = (*m).max(v + 1);
                }
            }
            Dimensions::new(c)
        }
    }
}

fn label(field: &str, line: usize, col: &str) -> Result<usize> {
    let v: usize = field.trim().parse().map_err(|_| {
        parse_err(
            line,
            format!("`{field}` in column {col} is not a positive integer label"),
        )
    })?;
    if v == 0 {
        return Err(parse_err(
            line,
            format!("cluster labels are 1-based; found 0 in column {col}"),
        ));
    }
    Ok(v - 1)
}

/// Reads the CSV format. Without `dims`, `C_i` is the largest label in column `dim i`.
pub fn read_csv<R: Read>(reader: R, dims: Option<&Dimensions>) -> Result<ClusteredSample> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let k = header.iter().take_while(|h| h.starts_with("dim")).count();
    let d = header.len() - k;
    for (i, h) in header.iter().enumerate() {
        let expect = if i < k {
            format!("dim{}", i + 1)
        } else {
            format!("y{}", i - k + 1)
        };
        if h != expect {
            return Err(parse_err(
                1,
                format!("header column {} is `{}`, expected `{}`", i + 1, h, expect),
            ));
        }
    }
    if k == 0 || d == 0 {
        return Err(parse_err(1, "header needs at least one dim and one y column"));
    }
    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let coords = (0..k)
            .map(|i| label(&rec[i], line, &header[i]))
            .collect::<Result<Vec<_>>>()?;
        let y = (k..k + d)
            .map(|i| {
                rec[i].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    parse_err(
                        line,
                        format!("`{}` in column {} is not a finite number", &rec[i], &header[i]),
                    )
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(dd) = dims {
            for (i, (&j, &c)) in coords.iter().zip(dd.counts()).enumerate() {
                if j >= c {
                    return Err(parse_err(
                        line,
                        format!("label {} in dim{} exceeds C = {}", j + 1, i + 1, c),
                    ));
                }
            }
        }
        records.push((coords, y));
    }
    let dims = resolve_dims(dims, k, &records)?;
    load_sample_with_dim(&records, &dims, Some(d))
}

pub fn write_csv<W: Write>(sample: &ClusteredSample, mut w: W) -> Result<()> {
    let k = sample.dims().k();
    let header: Vec<String> = (1..=k)
        .map(|i| format!("dim{i}"))
        .chain((1..=sample.obs_dim()).map(|i| format!("y{i}")))
        .collect();
    let mut out = header.join(",");
    out.push('\n');
    for (lin, y) in sample.units() {
        let j = sample.dims().coords(lin);
        let fields: Vec<String> =
            j.0.iter()
                .map(|c| (c + 1).to_string())
                .chain(y.iter().map(|v| format_float(*v)))
                .collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct JsonUnit {
    cell: Vec<usize>,
    y: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct JsonSample {
    dims: Vec<usize>,
    units: Vec<JsonUnit>,
}

/// Reads the JSON format; `dims` overrides the file's design.
pub fn read_json(text: &str, dims: Option<&Dimensions>) -> Result<ClusteredSample> {
    let raw: JsonSample = serde_json::from_str(text).map_err(|e| parse_err(e.line(), e.to_string()))?;
    let file_dims = Dimensions::new(raw.dims)?;
    let dims = dims.cloned().unwrap_or(file_dims);
    let d = raw.units.first().map_or(1, |u| u.y.len());
    let records = raw
        .units
        .into_iter()
        .enumerate()
        .map(|(u, unit)| {
            if unit.cell.contains(&0) {
                return Err(Error::Index(format!("unit {u}: cluster labels are 1-based")));
            }
            Ok((unit.cell.iter().map(|c| c - 1).collect(), unit.y))
        })
        .collect::<Result<Vec<_>>>()?;
    load_sample_with_dim(&records, &dims, Some(d))
}

pub fn to_json(sample: &ClusteredSample) -> String {
    let units = sample
        .units()
        .map(|(lin, y)| JsonUnit {
            cell: sample.dims().coords(lin).0.iter().map(|c| c + 1).collect(),
            y: y.to_vec(),
        })
        .collect();
    let s = JsonSample {
        dims: sample.dims().counts().to_vec(),
        units,
    };
    serde_json::to_string(&s).expect("sample serializes") + "\n"
}

/// Reads a dataset, choosing the format by extension (`.json`, otherwise CSV).
pub fn read_sample(path: &Path, dims: Option<&Dimensions>) -> Result<ClusteredSample> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        read_json(&std::fs::read_to_string(path)?, dims)
    } else {
        read_csv(std::fs::File::open(path)?, dims)
    }
}

pub fn write_sample(path: &Path, sample: &ClusteredSample) -> Result<()> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        std::fs::write(path, to_json(sample))?;
    } else {
        write_csv(sample, std::fs::File::create(path)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let text = "dim1,dim2,y1,y2\n1,1,0.5,2\n2,3,-1,1e-3\n1,1,4,5\n";
        let s = read_csv(text.as_bytes(), None).unwrap();
        assert_eq!(s.dims().counts(), &[2, 3]);
        assert_eq!(s.cell_size(0), 2);
        let mut buf = Vec::new();
        write_csv(&s, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), Some(s.dims())).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn parse_errors_carry_lines() {
        let bad = "dim1,y1\n1,2\n2,x\n";
        match read_csv(bad.as_bytes(), None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let zero = "dim1,y1\n0,2\n";
        assert!(matches!(
            read_csv(zero.as_bytes(), None),
            Err(Error::Parse { line: 2, .. })
        ));
        let header = "c1,y1\n1,2\n";
        assert!(matches!(
            read_csv(header.as_bytes(), None),
            Err(Error::Parse { line: 1, .. })
        ));
        let ragged = "dim1,y1\n1,2,3\n";
        assert!(matches!(
            read_csv(ragged.as_bytes(), None),
            Err(Error::Parse { line: 2, .. })
        ));
        let over = "dim1,y1\n4,2\n";
        let d = Dimensions::new(vec![3]).unwrap();
        assert!(matches!(
            read_csv(over.as_bytes(), Some(&d)),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn json_round_trip() {
        let text = r#"{"dims":[2,2],"units":[{"cell":[1,2],"y":[3.0]},{"cell":[2,2],"y":[1.5]}]}"#;
        let s = read_json(text, None).unwrap();
        assert_eq!(s.cell_size(1), 1);
        assert_eq!(s.cell_size(3), 1);
        assert_eq!(read_json(&to_json(&s), None).unwrap(), s);
    }
}
