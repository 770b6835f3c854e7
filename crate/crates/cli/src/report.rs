//! Output files. Every file is written to a temporary sibling and renamed
//! into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use dlsched_core::engine::MetricsReport;
use dlsched_core::lease::LeaseBenchRow;
use dlsched_core::synth::{SwitchRecord, SwitchRow};
use serde::Serialize;
use tempfile::NamedTempFile;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool_version: &'static str,
    pub seed: u64,
    pub command: &'a str,
    pub config: &'a BTreeMap<String, String>,
}

#[derive(Debug, Serialize)]
struct ReportDoc<'a> {
    #[serde(flatten)]
    report: &'a MetricsReport,
    config_echo: &'a Manifest<'a>,
}

#[derive(Debug, Serialize)]
struct JobRow {
    job_id: u32,
    arrival: f64,
    first_sched: f64,
    finish: f64,
    jct: f64,
    responsiveness: f64,
    preemptions: u32,
}

#[derive(Debug, Serialize)]
pub struct SummaryRow {
    pub param_value: String,
    pub avg_jct: f64,
    pub avg_responsiveness: f64,
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    // Temp files are created owner-only; outputs should be ordinary files.
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(fs::Permissions::from_mode(0o644))?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>, header: &[&str]) -> std::io::Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| e.into_error())
}

pub fn write_report(dir: &Path, report: &MetricsReport, manifest: &Manifest) -> std::io::Result<()> {
    let doc = ReportDoc { report, config_echo: manifest };
    let mut json = serde_json::to_vec_pretty(&doc)?;
    json.push(b'\n');
    write_atomic(&dir.join("report.json"), &json)?;
    let rows = report.per_job.iter().map(|j| JobRow {
        job_id: j.job_id.0,
        arrival: j.arrival,
        first_sched: j.first_sched,
        finish: j.finish,
        jct: j.jct,
        responsiveness: j.responsiveness,
        preemptions: j.preemptions,
    });
    let header = ["job_id", "arrival", "first_sched", "finish", "jct", "responsiveness", "preemptions"];
    write_atomic(&dir.join("jobs.csv"), &csv_bytes(rows, &header)?)
}

pub fn write_manifest(dir: &Path, text: &str) -> std::io::Result<()> {
    write_atomic(&dir.join("manifest.conf"), text.as_bytes())
}

pub fn write_summary(dir: &Path, rows: &[SummaryRow]) -> std::io::Result<()> {
    write_atomic(&dir.join("summary.csv"), &csv_bytes(rows, &["param_value", "avg_jct", "avg_responsiveness"])?)
}

pub fn write_switch_log(dir: &Path, log: &[SwitchRecord]) -> std::io::Result<()> {
    let header = ["round", "admission_kind", "admission_factor", "sched_kind"];
    write_atomic(&dir.join("switch_log.csv"), &csv_bytes(log.iter().map(SwitchRow::from), &header)?)
}

pub fn write_lease(dir: &Path, rows: &[LeaseBenchRow]) -> std::io::Result<()> {
    let header =
        ["mode", "workers", "rounds", "revocations", "central_messages", "total_messages", "max_exit_skew_iterations"];
    write_atomic(&dir.join("lease.csv"), &csv_bytes(rows, &header)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(d.path()).unwrap().count(), 1);
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            assert_eq!(fs::metadata(&p).unwrap().permissions().mode() & 0o777, 0o644);
        }
    }

    #[test]
    fn empty_tables_still_have_headers() {
        let d = tempfile::tempdir().unwrap();
        write_summary(d.path(), &[]).unwrap();
        assert_eq!(
            fs::read_to_string(d.path().join("summary.csv")).unwrap(),
            "param_value,avg_jct,avg_responsiveness\n"
        );
    }
}
