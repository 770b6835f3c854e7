use std::path::Path;

use serde::Serialize;

use super::WorkloadError;

/// One job submission from a trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub job_id: u32,
    /// `None` when the arrival time is to be generated.
    pub submit_time: Option<f64>,
    pub gpu_demand: u32,
    /// Runtime when run alone to completion, seconds.
    pub duration_isolated: f64,
    pub model_name: Option<String>,
}

pub const TRACE_HEADER: &str = "job_id,submit_time_s,gpu_demand,duration_s,model";

pub fn parse_trace(path: &Path) -> Result<Vec<TraceEntry>, WorkloadError> {
    let text = std::fs::read_to_string(path).map_err(|e| WorkloadError::Io(path.display().to_string(), e))?;
    parse_trace_str(&text)
}

#[derive(Clone, Copy)]
struct Columns {
    job_id: Option<usize>,
    submit: usize,
    demand: usize,
    duration: usize,
    model: Option<usize>,
}

impl Columns {
    fn from_header(header: &csv::StringRecord) -> Option<Self> {
        let find = |name: &str| header.iter().position(|h| h == name);
        let native = header.iter().collect::<Vec<_>>() == TRACE_HEADER.split(',').collect::<Vec<_>>();
        if native {
            return Some(Self { job_id: Some(0), submit: 1, demand: 2, duration: 3, model: Some(4) });
        }
        // Philly-derived schema published with the Tiresias simulator:
        // job_id,num_gpu,submit_time,iterations,model_name,duration,interval
        Some(Self {
            job_id: find("job_id"),
            submit: find("submit_time")?,
            demand: find("num_gpu")?,
            duration: find("duration")?,
            model: find("model_name"),
        })
    }
}

/// Parses trace CSV text. Job ids default to the row index when absent.
pub fn parse_trace_str(text: &str) -> Result<Vec<TraceEntry>, WorkloadError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| WorkloadError::parse(1, e))?.clone();
    let cols = Columns::from_header(&header)
        .ok_or_else(|| WorkloadError::parse(1, format!("unrecognised trace header; expected {TRACE_HEADER}")))?;
    let mut out = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| WorkloadError::parse(e.position().map_or(0, |p| p.line()), e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let err = |msg: &str| WorkloadError::parse(line, msg);
        let field = |i: usize| rec.get(i).unwrap_or("");
        let job_id = match cols.job_id.map(field) {
            Some(s) if !s.is_empty() => s.parse().map_err(|_| err("job_id must be a non-negative integer"))?,
            _ => idx as u32,
        };
        let submit_time = match field(cols.submit) {
            "" => None,
            s => {
                let t: f64 = s.parse().map_err(|_| err("submit time must be a number"))?;
                if !(t >= 0.0) {
                    return Err(err("submit time must be non-negative"));
                }
                Some(t)
            }
        };
        let gpu_demand: i64 = field(cols.demand).parse().map_err(|_| err("gpu_demand must be an integer"))?;
        if gpu_demand < 1 {
            return Err(err("gpu_demand must be at least 1"));
        }
        let duration: f64 = field(cols.duration).parse().map_err(|_| err("duration must be a number"))?;
        if !(duration > 0.0) {
            return Err(err("duration must be positive"));
        }
        let model_name = cols.model.map(field).filter(|s| !s.is_empty()).map(str::to_string);
        out.push(TraceEntry {
            job_id,
            submit_time,
            gpu_demand: gpu_demand as u32,
            duration_isolated: duration,
            model_name,
        });
    }
    Ok(out)
}

/// Serialises entries in the native trace format.
pub fn write_trace<W: std::io::Write>(entries: &[TraceEntry], w: W) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(TRACE_HEADER.split(','))?;
    for e in entries {
        wtr.write_record([
            e.job_id.to_string(),
            e.submit_time.map(|t| t.to_string()).unwrap_or_default(),
            e.gpu_demand.to_string(),
            e.duration_isolated.to_string(),
            e.model_name.clone().unwrap_or_default(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
