use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use super::ScenarioError;
use crate::system::TelemetryRecord;

/// Column header for an `n`-module pack.
pub fn csv_header(n: usize) -> String {
    let mut h = String::from("t_s,v_bus_V");
    for k in 1..=n {
        h.push_str(&format!(",mode{k},i_out{k}_A,i_cell{k}_A,v_cell{k}_V,soc{k},q_est{k}_Ah,kb{k}"));
    }
    h
}

/// One data row. Floats use Rust's shortest round-trip formatting, which is
/// locale-free and parses back to the identical value.
pub fn csv_row(rec: &TelemetryRecord) -> String {
    let mut row = format!("{},{}", rec.t, rec.v_bus);
    for m in &rec.modules {
        row.push_str(&format!(
            ",{},{},{},{},{},{},{}",
            m.status.label(),
            m.i_out,
            m.i_cell,
            m.v_cell,
            m.soc,
            m.q_est,
            m.k_b
        ));
    }
    row
}

/// Streaming CSV writer.
pub struct CsvWriter<W: Write> {
    out: W,
}

impl<W: Write> CsvWriter<W> {
    pub fn new(mut out: W, n_modules: usize) -> io::Result<Self> {
        out.write_all(csv_header(n_modules).as_bytes())?;
        out.write_all(b"\n")?;
        Ok(Self { out })
    }

    pub fn write(&mut self, rec: &TelemetryRecord) -> io::Result<()> {
        self.out.write_all(csv_row(rec).as_bytes())?;
        self.out.write_all(b"\n")
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Writes a whole telemetry stream to `path`.
pub fn emit_csv(telemetry: &[TelemetryRecord], n_modules: usize, path: &Path) -> Result<(), ScenarioError> {
    let io_err = |e: io::Error| ScenarioError::Io { path: path.display().to_string(), message: e.to_string() };
    let file = File::create(path).map_err(io_err)?;
    let mut w = CsvWriter::new(BufWriter::new(file), n_modules).map_err(io_err)?;
    for rec in telemetry {
        w.write(rec).map_err(io_err)?;
    }
    w.finish().map_err(io_err)?;
    Ok(())
}
