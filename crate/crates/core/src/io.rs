//! CSV formats.
//!
//! Datasets use the header `id,group_id[,group2_id][,true_group_size],y,x1[,x2,...]`;
//! optional fields may be left empty. Size histograms are two columns
//! `size,count`. Lines starting with `#` are skipped by both readers.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Dataset, Row};

fn parse<T: std::str::FromStr>(field: &str, what: &str, line: u64) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::data(format!("line {line}: cannot parse {what} from {field:?}")))
}

fn optional<T: std::str::FromStr>(field: Option<&str>, what: &str, line: u64) -> Result<Option<T>> {
    match field.map(str::trim) {
        None | Some("") => Ok(None),
        Some(f) => parse(f, what, line).map(Some),
    }
}

pub fn read_dataset<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| Error::data(format!("missing column '{name}'")));
    let id = need("id")?;
    let group = need("group_id")?;
    let y = need("y")?;
    let group2 = col("group2_id");
    let true_size = col("true_group_size");
    let xs: Vec<usize> = (1..)
        .map_while(|k| col(&format!("x{k}")))
        .collect();
    if xs.is_empty() {
        return Err(Error::data("missing column 'x1'"));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push(Row {
            id: parse(&rec[id], "id", line)?,
            group: parse(&rec[group], "group_id", line)?,
            group2: optional(group2.map(|c| &rec[c]), "group2_id", line)?,
            true_size: optional(true_size.map(|c| &rec[c]), "true_group_size", line)?,
            y: parse(&rec[y], "y", line)?,
            x: xs.iter().map(|&c| parse(&rec[c], "covariate", line)).collect::<Result<_>>()?,
        });
    }
    if rows.is_empty() {
        return Err(Error::data("dataset has no rows"));
    }
    Dataset::new(rows)
}

pub fn read_dataset_path(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    read_dataset(f)
}

/// Writes full-precision values; optional columns appear when any row has them.
pub fn write_dataset<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let with_g2 = data.has_group2();
    let with_size = data.rows().iter().any(|r| r.true_size.is_some());
    let mut header = vec!["id".to_string(), "group_id".to_string()];
    if with_g2 {
        header.push("group2_id".into());
    }
    if with_size {
        header.push("true_group_size".into());
    }
    header.push("y".into());
    header.extend((1..=data.k()).map(|k| format!("x{k}")));
    w.write_record(&header)?;
    for r in data.rows() {
        let mut rec = vec![r.id.to_string(), r.group.to_string()];
        if with_g2 {
            rec.push(r.group2.map_or(String::new(), |g| g.to_string()));
        }
        if with_size {
            rec.push(r.true_size.map_or(String::new(), |n| n.to_string()));
        }
        rec.push(format!("{:?}", r.y));
        rec.extend(r.x.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `size,count` rows (header optional) into a histogram indexed by `size - 1`.
pub fn read_size_counts<R: Read>(reader: R) -> Result<Vec<u64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut counts: Vec<u64> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 {
            return Err(Error::data(format!("line {line}: expected two columns size,count")));
        }
        if i == 0 && rec[0].parse::<u64>().is_err() {
            continue;
        }
        let size: u64 = parse(&rec[0], "size", line)?;
        let count: u64 = parse(&rec[1], "count", line)?;
        if size == 0 {
            return Err(Error::data(format!("line {line}: group size must be at least 1")));
        }
        if counts.len() < size as usize {
            counts.resize(size as usize, 0);
        }
        counts[size as usize - 1] += count;
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::data("size histogram is empty"));
    }
    Ok(counts)
}
