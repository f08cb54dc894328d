//! One CSV row per (method, task, seed, checkpoint).

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 6] = ["method", "task", "seed", "checkpoint", "success_rate", "wall_time_seconds"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub method: String,
    pub task: String,
    pub seed: u64,
    pub checkpoint: usize,
    pub success_rate: f64,
    pub wall_time_seconds: f64,
}

impl RunRecord {
    fn sort_key(&self) -> (&str, &str, u64, usize) {
        (&self.method, &self.task, self.seed, self.checkpoint)
    }
}

pub fn sort_records(records: &mut [RunRecord]) {
    records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
}

/// Writes the header and `records` in the order given. Floats use the
/// shortest representation that parses back to the same value.
pub fn write_csv<W: Write>(out: W, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.method.clone(),
            r.task.clone(),
            r.seed.to_string(),
            r.checkpoint.to_string(),
            r.success_rate.to_string(),
            r.wall_time_seconds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<RunRecord>> {
    let mut reader = csv::Reader::from_reader(input);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::Parse {
            what: "csv header",
            detail: header.join(","),
        });
    }
    let field = |row: &csv::StringRecord, i: usize| row.get(i).unwrap_or("").to_string();
    let parse_err = |row: &csv::StringRecord| Error::Parse {
        what: "csv row",
        detail: row.iter().collect::<Vec<_>>().join(","),
    };
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let record = RunRecord {
            method: field(&row, 0),
            task: field(&row, 1),
            seed: field(&row, 2).parse().map_err(|_| parse_err(&row))?,
            checkpoint: field(&row, 3).parse().map_err(|_| parse_err(&row))?,
            success_rate: field(&row, 4).parse().map_err(|_| parse_err(&row))?,
            wall_time_seconds: field(&row, 5).parse().map_err(|_| parse_err(&row))?,
        };
        if !(0.0..=1.0).contains(&record.success_rate) {
            return Err(parse_err(&row));
        }
        records.push(record);
    }
    Ok(records)
}
