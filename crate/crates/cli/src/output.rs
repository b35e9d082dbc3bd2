//! Report envelopes and file writers. One writer per output directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cpsc_core::corrector::IterationRecord;
use cpsc_core::gluing::{GluedField, GluedManifold};
use cpsc_core::Result;
use serde::Serialize;

/// Every JSON report carries the code version and the resolved inputs.
#[derive(Debug, Serialize)]
pub struct Envelope<'a, C: Serialize, R: Serialize> {
    pub version: &'static str,
    pub command: &'a str,
    pub config: &'a C,
    pub result: &'a R,
}

pub struct Output {
    pub dir: PathBuf,
}

impl Output {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Output { dir: dir.to_path_buf() })
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    pub fn json<C: Serialize, R: Serialize>(&self, name: &str, command: &str, config: &C, result: &R) -> Result<String> {
        let env = Envelope {
            version: cpsc_core::VERSION,
            command,
            config,
            result,
        };
        let text = serde_json::to_string_pretty(&env)?;
        let mut w = self.create(name)?;
        w.write_all(text.as_bytes())?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(text)
    }

    pub fn with<F>(&self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let mut w = self.create(name)?;
        f(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// One CSV per chart: `{prefix}_body{b}.csv` and `{prefix}_neck{k}.csv`.
    pub fn glued_field(&self, prefix: &str, m: &GluedManifold, field: &GluedField) -> Result<()> {
        let nb = m.bodies.len();
        for (c, chart) in field.charts.iter().enumerate() {
            let name = if c < nb {
                format!("{prefix}_body{c}.csv")
            } else {
                format!("{prefix}_neck{}.csv", c - nb)
            };
            self.with(&name, |w| chart.write_csv(w))?;
        }
        Ok(())
    }

    pub fn iterations(&self, name: &str, records: &[IterationRecord]) -> Result<()> {
        self.with(name, |w| {
            writeln!(w, "iteration,residual,increment,ratio,damping")?;
            for r in records {
                let ratio = r.ratio.map_or(String::new(), |q| format!("{q:.17e}"));
                writeln!(w, "{},{:.17e},{:.17e},{},{}", r.iteration, r.residual, r.increment, ratio, r.damping)?;
            }
            Ok(())
        })
    }
}
