//! Plot data from a training trace.

use std::path::Path;

use super::train::{read_trace, TraceRow};
use crate::error::{Error, Result};

pub const PLOT_HEADER: &str = "epoch,last_step,mean_dp,mean_dn_star,gap";

/// Per-epoch means of `d_p` and `d_n*`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotRow {
    pub epoch: usize,
    /// Last optimization step of the epoch.
    pub last_step: usize,
    pub mean_dp: f64,
    pub mean_dn_star: f64,
}

impl PlotRow {
    pub fn gap(&self) -> f64 {
        self.mean_dp - self.mean_dn_star
    }
}

/// Groups rows by epoch. Fails on an empty trace or when steps do not
/// increase strictly.
pub fn plot_rows(trace: &[TraceRow]) -> Result<Vec<PlotRow>> {
    if trace.is_empty() {
        return Err(Error::Data("trace has no rows".into()));
    }
    if let Some(w) = trace.windows(2).find(|w| w[1].step <= w[0].step || w[1].epoch < w[0].epoch) {
        return Err(Error::Data(format!("trace is not monotone at step {}", w[1].step)));
    }
    let mut out: Vec<PlotRow> = Vec::new();
    let mut n = 0usize;
    for r in trace {
        match out.last_mut() {
            Some(p) if p.epoch == r.epoch => {
                p.last_step = r.step;
                p.mean_dp += r.mean_dp;
                p.mean_dn_star += r.mean_dn_star;
                n += 1;
            }
            _ => {
                if let Some(p) = out.last_mut() {
                    p.mean_dp /= n as f64;
                    p.mean_dn_star /= n as f64;
                }
                out.push(PlotRow {
                    epoch: r.epoch,
                    last_step: r.step,
                    mean_dp: r.mean_dp,
                    mean_dn_star: r.mean_dn_star,
                });
                n = 1;
            }
        }
    }
    if let Some(p) = out.last_mut() {
        p.mean_dp /= n as f64;
        p.mean_dn_star /= n as f64;
    }
    Ok(out)
}

pub fn plot_csv(rows: &[PlotRow]) -> String {
    let mut s = format!("{PLOT_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.9},{:.9},{:.9}\n",
            r.epoch,
            r.last_step,
            r.mean_dp,
            r.mean_dn_star,
            r.gap()
        ));
    }
    s
}

/// Reads `trace_path` and writes the per-epoch table to `out`.
pub fn plotdata(trace_path: &Path, out: &Path) -> Result<Vec<PlotRow>> {
    let rows = plot_rows(&read_trace(trace_path)?)?;
    std::fs::write(out, plot_csv(&rows)).map_err(|e| Error::io(out, e))?;
    Ok(rows)
}
