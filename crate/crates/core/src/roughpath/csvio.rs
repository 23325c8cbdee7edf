//! Path files: header `t,v0,...,v{dim-1}`, one row per grid node, values in
//! shortest round-trip decimal form.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;

use super::{SampledPath, TimeGrid};
use crate::{Error, Result};

const SPACING_RTOL: f64 = 1e-9;

pub fn write_csv<W: Write>(path: &SampledPath, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((0..path.dim()).map(|k| format!("v{k}")));
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(path.dim() + 1);
    for (i, v) in path.values().iter().enumerate() {
        row.clear();
        row.push(format!("{:?}", path.grid().time(i)));
        row.extend(v.iter().map(|c| format!("{c:?}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<SampledPath> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let dim = header.len().saturating_sub(1);
    if dim == 0 || &header[0] != "t" {
        return Err(Error::PathFile("header must be t,v0,...".into()));
    }
    for (k, name) in header.iter().skip(1).enumerate() {
        if name != format!("v{k}") {
            return Err(Error::PathFile(format!("unexpected column {name:?}")));
        }
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(|s| s.trim().parse::<f64>()).collect();
        let parsed = parsed.map_err(|e| Error::PathFile(format!("row {}: {e}", line + 1)))?;
        if parsed.len() != dim + 1 {
            return Err(Error::PathFile(format!("row {} has {} fields", line + 1, parsed.len())));
        }
        times.push(parsed[0]);
        values.push(DVector::from_column_slice(&parsed[1..]));
    }
    if times.len() < 2 {
        return Err(Error::PathFile("need at least two rows".into()));
    }
    let horizon = *times.last().unwrap();
    let grid = TimeGrid::new(horizon, times.len() - 1)?;
    for (i, &t) in times.iter().enumerate() {
        if (t - grid.time(i)).abs() > SPACING_RTOL * horizon {
            return Err(Error::PathFile(format!(
                "row {} has t = {t}, expected {} on a uniform grid",
                i + 1,
                grid.time(i)
            )));
        }
    }
    SampledPath::new(grid, values)
}

pub fn save_csv(path: &SampledPath, file: impl AsRef<Path>) -> Result<()> {
    let f = File::create(file)?;
    write_csv(path, std::io::BufWriter::new(f))
}

pub fn load_csv(file: impl AsRef<Path>) -> Result<SampledPath> {
    read_csv(std::io::BufReader::new(File::open(file)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roughpath::sample_wiener;

    #[test]
    fn round_trip_is_bit_exact() {
        let g = TimeGrid::new(0.7, 33).unwrap();
        let w = sample_wiener(g, 3, 1);
        let mut buf = Vec::new();
        write_csv(&w, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,v0,v1,v2\n"));
        assert_eq!(read_csv(buf.as_slice()).unwrap(), w);
    }

    #[test]
    fn rejects_non_uniform_spacing() {
        let text = "t,v0\n0.0,1.0\n0.5,2.0\n1.1,3.0\n";
        assert!(matches!(read_csv(text.as_bytes()), Err(Error::PathFile(_))));
    }

    #[test]
    fn rejects_bad_header() {
        assert!(read_csv("time,x\n0,1\n1,2\n".as_bytes()).is_err());
        assert!(read_csv("t,v1\n0,1\n1,2\n".as_bytes()).is_err());
    }
}
