use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result, RowError};

use super::{ContractType, Portfolio, PolicyRecord};

pub const CSV_HEADER: [&str; 10] =
    ["exposure", "x1", "x2", "x3", "x4", "x5", "bms", "loss_cost", "claim_count", "contract_type"];

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Skip invalid rows and report them instead of failing.
    pub lenient: bool,
}

#[derive(Debug, Clone)]
pub struct LoadReport {
    pub portfolio: Portfolio,
    pub rejected: Vec<RowError>,
    pub warnings: Vec<String>,
}

pub fn load_csv(path: impl AsRef<Path>, options: LoadOptions) -> Result<LoadReport> {
    let file = std::fs::File::open(path)?;
    read_csv(file, options)
}

pub fn read_csv<R: Read>(reader: R, options: LoadOptions) -> Result<LoadReport> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let missing: Vec<String> =
        CSV_HEADER.iter().filter(|c| !header.iter().any(|h| h == **c)).map(|c| c.to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingColumns(missing));
    }
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let idx: Vec<usize> = CSV_HEADER.iter().map(|c| col(c)).collect();

    let mut records = Vec::new();
    let mut rejected = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        match parse_row(&row, &idx) {
            Ok(r) => records.push(r),
            Err(message) => rejected.push(RowError { line, message }),
        }
    }
    if !rejected.is_empty() && !options.lenient {
        return Err(Error::InvalidRows(rejected));
    }
    let mut warnings = Vec::new();
    if records.is_empty() {
        warnings.push("no data rows".to_string());
    }
    if !rejected.is_empty() {
        warnings.push(format!("skipped {} invalid row(s)", rejected.len()));
    }
    Ok(LoadReport { portfolio: Portfolio::new(records), rejected, warnings })
}

fn parse_row(row: &csv::StringRecord, idx: &[usize]) -> std::result::Result<PolicyRecord, String> {
    let field = |k: usize| row.get(idx[k]).unwrap_or("");
    let num = |k: usize| -> std::result::Result<f64, String> {
        field(k).parse::<f64>().map_err(|_| format!("{}: cannot parse {:?}", CSV_HEADER[k], field(k)))
    };
    let exposure = num(0)?;
    let mut covariates = [0u8; 5];
    for (j, c) in covariates.iter_mut().enumerate() {
        *c = field(1 + j).parse::<u8>().map_err(|_| format!("x{}: expected 0 or 1, got {:?}", j + 1, field(1 + j)))?;
    }
    let bms = field(6).parse::<u8>().map_err(|_| format!("bms: cannot parse {:?}", field(6)))?;
    let loss_cost = num(7)?;
    let claim_count = match field(8) {
        "" => None,
        s => Some(s.parse::<u32>().map_err(|_| format!("claim_count: cannot parse {s:?}"))?),
    };
    let contract_type = match field(9) {
        "XX" => ContractType::XX,
        "XO" => ContractType::XO,
        other => return Err(format!("contract_type: expected XX or XO, got {other:?}")),
    };
    let record = PolicyRecord { exposure, covariates, bms, loss_cost, claim_count, contract_type };
    record.validate()?;
    Ok(record)
}

/// Writes the schema header and one row per record. Floats use Rust's
/// shortest round-trip formatting, so reading the file back is lossless.
pub fn write_csv<W: Write>(portfolio: &Portfolio, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for r in &portfolio.records {
        let mut row: Vec<String> = Vec::with_capacity(10);
        row.push(r.exposure.to_string());
        row.extend(r.covariates.iter().map(|c| c.to_string()));
        row.push(r.bms.to_string());
        row.push(r.loss_cost.to_string());
        row.push(r.claim_count.map(|n| n.to_string()).unwrap_or_default());
        row.push(r.contract_type.as_str().to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::portfolio::{simulate, SyntheticSpec};

    const HEADER: &str = "exposure,x1,x2,x3,x4,x5,bms,loss_cost,claim_count,contract_type\n";

    #[test]
    fn empty_data_section() {
        let rep = read_csv(HEADER.as_bytes(), LoadOptions::default()).unwrap();
        assert!(rep.portfolio.is_empty());
        assert_eq!(rep.warnings, vec!["no data rows".to_string()]);
    }

    #[test]
    fn rejects_bad_exposure_with_line_number() {
        let data = format!("{HEADER}1,0,1,0,1,0,100,0,0,XX\n1.2,0,0,0,0,0,100,0,0,XO\n");
        match read_csv(data.as_bytes(), LoadOptions::default()) {
            Err(Error::InvalidRows(rows)) => {
                assert_eq!(rows.len(), 1);
                assert_eq!(rows[0].line, 3);
                assert!(rows[0].message.contains("exposure"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let rep = read_csv(data.as_bytes(), LoadOptions { lenient: true }).unwrap();
        assert_eq!(rep.portfolio.len(), 1);
        assert_eq!(rep.rejected.len(), 1);
    }

    #[test]
    fn rejects_out_of_range_values() {
        for row in ["0.5,0,0,0,0,0,105,0,0,XO", "0.5,0,0,0,0,0,100,-1,,XO", "0,0,0,0,0,0,100,0,,XO", "0.5,2,0,0,0,0,100,0,,XO"] {
            let data = format!("{HEADER}{row}\n");
            assert!(read_csv(data.as_bytes(), LoadOptions::default()).is_err(), "{row}");
        }
    }

    #[test]
    fn missing_columns() {
        let data = "exposure,x1,bms\n1,0,100\n";
        match read_csv(data.as_bytes(), LoadOptions::default()) {
            Err(Error::MissingColumns(cols)) => assert!(cols.contains(&"loss_cost".to_string())),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn optional_claim_count() {
        let data = format!("{HEADER}0.25,1,0,0,0,1,97,12.5,,XO\n");
        let rep = read_csv(data.as_bytes(), LoadOptions::default()).unwrap();
        assert_eq!(rep.portfolio.records[0].claim_count, None);
        assert!(!rep.portfolio.has_claim_counts());
    }

    #[test]
    fn write_then_load_roundtrip() {
        let p = simulate(&SyntheticSpec { n: 500, seed: 21, ..SyntheticSpec::default() }).unwrap();
        let mut buf = Vec::new();
        write_csv(&p, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), LoadOptions::default()).unwrap().portfolio;
        assert_eq!(back, p);
    }
}
