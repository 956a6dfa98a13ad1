//! Sample CSVs and JSON artifacts.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::guidance::Provenance;

/// `# config_hash=<hex> seed=<u64>`, the first line of every samples CSV.
pub fn provenance_line(p: &Provenance) -> String {
    format!("# config_hash={} seed={}", p.config_hash, p.seed)
}

fn parse_provenance(line: &str) -> Option<Provenance> {
    let rest = line.strip_prefix('#')?.trim();
    let mut hash = None;
    let mut seed = None;
    for kv in rest.split_whitespace() {
        match kv.split_once('=') {
            Some(("config_hash", v)) => hash = Some(v.to_string()),
            Some(("seed", v)) => seed = v.parse().ok(),
            _ => {}
        }
    }
    Some(Provenance {
        config_hash: hash?,
        seed: seed?,
    })
}

/// One row per sample, columns `x_1..x_d`. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_samples<W: Write>(w: W, samples: &[DVector<f64>], prov: &Provenance) -> Result<()> {
    let d = samples.first().map_or(0, |x| x.len());
    let mut w = BufWriter::new(w);
    writeln!(w, "{}", provenance_line(prov))?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record((1..=d).map(|i| format!("x_{i}"))).map_err(csv_err)?;
    for x in samples {
        crate::error::check_dim(d, x.len())?;
        csv.write_record(x.iter().map(|v| format!("{v:?}"))).map_err(csv_err)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_samples_csv(path: &Path, samples: &[DVector<f64>], prov: &Provenance) -> Result<()> {
    write_samples(File::create(path)?, samples, prov)
}

/// Inverse of [`write_samples`]; the provenance line is optional on input.
pub fn read_samples<R: BufRead>(mut r: R) -> Result<(Vec<DVector<f64>>, Option<Provenance>)> {
    let mut first = String::new();
    r.read_line(&mut first)?;
    let (prov, pending) = if first.starts_with('#') {
        (parse_provenance(first.trim_end()), String::new())
    } else {
        (None, first)
    };
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(std::io::Cursor::new(pending).chain(r));
    let d = csv.headers().map_err(csv_err)?.len();
    if d == 0 {
        return Err(Error::Input("samples CSV has no columns".into()));
    }
    let mut out = Vec::new();
    for (i, rec) in csv.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Input(format!("samples CSV row {}: {e}", i + 1)))?;
        crate::error::check_dim(d, vals.len())?;
        out.push(DVector::from_vec(vals));
    }
    Ok((out, prov))
}

pub fn read_samples_csv(path: &Path) -> Result<(Vec<DVector<f64>>, Option<Provenance>)> {
    read_samples(BufReader::new(File::open(path)?))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Input(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_round_trip_bitwise() {
        let xs = vec![
            DVector::from_vec(vec![0.1, -1e-300]),
            DVector::from_vec(vec![1.0 / 3.0, 12345.678e20]),
        ];
        let prov = Provenance {
            config_hash: "ab12".into(),
            seed: 7,
        };
        let mut buf = Vec::new();
        write_samples(&mut buf, &xs, &prov).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# config_hash=ab12 seed=7\nx_1,x_2\n"));
        let (back, p) = read_samples(&buf[..]).unwrap();
        assert_eq!(back, xs);
        assert_eq!(p, Some(prov));
    }

    #[test]
    fn header_line_optional_and_ragged_rows_rejected() {
        let (xs, p) = read_samples(&b"x_1\n1.5\n-2\n"[..]).unwrap();
        assert_eq!(xs.len(), 2);
        assert!(p.is_none());
        assert!(read_samples(&b"x_1,x_2\n1,2\n3\n"[..]).is_err());
        assert!(read_samples(&b"x_1\nabc\n"[..]).is_err());
    }
}
