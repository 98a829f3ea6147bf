use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{Metric, ResultRow, SampleSeries, SimError};

fn io_error(path: &Path, e: impl std::fmt::Display) -> SimError {
    SimError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

const HEADER: [&str; 7] = ["experiment", "estimator", "snr_db", "metric", "value", "n_trials", "seed"];

/// Writes rows as LF-terminated CSV; floats use the shortest exact form.
pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .has_headers(false)
        .from_writer(out);
    w.write_record(HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<(), SimError> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| io_error(path, e))?;
    write_csv(rows, std::io::BufWriter::new(file)).map_err(|e| io_error(path, e))
}

pub fn parse_csv<R: Read>(input: R) -> csv::Result<Vec<ResultRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

fn write_lines(path: &Path, lines: &[String]) -> Result<(), SimError> {
    let mut text = lines.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

/// One `<experiment>_<estimator>_<metric>.dat` file per series, with
/// `snr_db value` columns. Returns the written paths.
pub fn emit_plot_data(rows: &[ResultRow], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, SimError> {
    let dir = dir.as_ref();
    let mut groups: BTreeMap<(String, String, Metric), Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.experiment.name().to_string(), r.estimator.clone(), r.metric))
            .or_default()
            .push((r.snr_db, r.value));
    }
    let mut written = Vec::new();
    for ((experiment, estimator, metric), mut points) in groups {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let name = metric.name();
        let path = dir.join(format!("{experiment}_{estimator}_{name}.dat"));
        let mut lines = vec![format!("# snr_db {name}")];
        lines.extend(points.iter().map(|(s, v)| format!("{s} {v}")));
        write_lines(&path, &lines)?;
        written.push(path);
    }
    Ok(written)
}

/// Per-sample files `mse_vs_bcrb_<estimator>_snr<snr>.dat` with columns
/// `k mse [bcrb]`, `k` starting at 1.
pub fn emit_sample_series(series: &[SampleSeries], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, SimError> {
    let dir = dir.as_ref();
    let mut written = Vec::new();
    for s in series {
        let path = dir.join(format!("mse_vs_bcrb_{}_snr{}.dat", s.estimator, s.snr_db));
        let mut lines = vec![if s.bcrb.is_some() { "# k mse bcrb" } else { "# k mse" }.to_string()];
        for (k, m) in s.mse.iter().enumerate() {
            lines.push(match &s.bcrb {
                Some(b) => format!("{} {m} {}", k + 1, b[k]),
                None => format!("{} {m}", k + 1),
            });
        }
        write_lines(&path, &lines)?;
        written.push(path);
    }
    Ok(written)
}
