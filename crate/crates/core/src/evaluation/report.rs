use std::fs;
use std::path::Path;

use super::{EvalError, RACurve, RAPoint};

/// One row of `bdrate.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct BdRow {
    pub codec: String,
    pub metric: String,
    pub anchor: String,
    pub test: String,
    pub bdrate_pct: f64,
}

fn io_err(path: &Path, source: std::io::Error) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> EvalError {
    io_err(path, e.into())
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Writes `ra_points.csv`, `bdrate.csv` and one `<method>_<codec>_<metric>.dat`
/// per curve (whitespace-separated bpp and metric). Floats use the shortest
/// representation that parses back to the same value.
pub fn write_report(out_dir: &Path, curves: &[RACurve], rows: &[BdRow]) -> Result<(), EvalError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let points = curves
        .iter()
        .flat_map(|c| {
            c.points().iter().map(move |p| {
                vec![
                    c.method.clone(),
                    c.codec.clone(),
                    p.qp.to_string(),
                    p.bpp.to_string(),
                    c.metric.clone(),
                    p.value.to_string(),
                ]
            })
        })
        .collect();
    write_csv(
        &out_dir.join("ra_points.csv"),
        &["method", "codec", "qp", "bpp", "metric", "value"],
        points,
    )?;
    let bd = rows
        .iter()
        .map(|r| {
            vec![
                r.codec.clone(),
                r.metric.clone(),
                r.anchor.clone(),
                r.test.clone(),
                r.bdrate_pct.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out_dir.join("bdrate.csv"),
        &["codec", "metric", "anchor", "test", "bdrate_pct"],
        bd,
    )?;
    for c in curves {
        let path = out_dir.join(format!("{}_{}_{}.dat", c.method, c.codec, c.metric));
        let text: String = c.points().iter().map(|p| format!("{} {}\n", p.bpp, p.value)).collect();
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

/// Parses `ra_points.csv` back into curves, in order of first appearance.
pub fn read_ra_points(path: &Path) -> Result<Vec<RACurve>, EvalError> {
    let parse_err = |line: usize, reason: String| EvalError::Parse {
        path: path.display().to_string(),
        line,
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["method", "codec", "qp", "bpp", "metric", "value"] {
        return Err(parse_err(1, format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    type Key = (String, String, String);
    let mut groups: Vec<(Key, Vec<RAPoint>)> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| rec.get(i).ok_or_else(|| parse_err(line, format!("missing field {i}")));
        let num = |i: usize| -> Result<f64, EvalError> {
            let s = field(i)?;
            s.parse().map_err(|_| parse_err(line, format!("bad number {s:?}")))
        };
        let qp = field(2)?;
        let qp: u32 = qp.parse().map_err(|_| parse_err(line, format!("bad qp {qp:?}")))?;
        let key = (field(0)?.to_string(), field(1)?.to_string(), field(4)?.to_string());
        let point = RAPoint {
            bpp: num(3)?,
            value: num(5)?,
            qp,
        };
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, pts)) => pts.push(point),
            None => groups.push((key, vec![point])),
        }
    }
    groups
        .into_iter()
        .map(|((m, c, metric), pts)| RACurve::new(&m, &c, &metric, pts))
        .collect()
}
