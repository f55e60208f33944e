//! Per-iteration, per-layer trace CSV.

use std::io::Write;

use crate::error::{Error, Result};
use crate::train::StepReport;

pub const HEADER: &str = "run_id,iter,layer,loss,dc,clip,lr_scale,eps_norm,ghat_sqnorm";

/// Nine significant digits in scientific notation.
pub fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.8e}")
    } else {
        format!("{v}")
    }
}

/// Joins fields with commas and terminates the line with LF.
pub fn csv_line(fields: &[String]) -> String {
    let mut s = fields.join(",");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub run_id: String,
    pub iter: u64,
    pub layer: usize,
    pub loss: f64,
    pub dc: f64,
    pub clip: f64,
    pub lr_scale: f64,
    pub eps_norm: f64,
    pub ghat_sqnorm: f64,
}

impl TraceRow {
    pub fn to_line(&self) -> String {
        csv_line(&[
            self.run_id.clone(),
            self.iter.to_string(),
            self.layer.to_string(),
            fmt_float(self.loss),
            fmt_float(self.dc),
            fmt_float(self.clip),
            fmt_float(self.lr_scale),
            fmt_float(self.eps_norm),
            fmt_float(self.ghat_sqnorm),
        ])
    }
}

pub fn rows_from_report(run_id: &str, r: &StepReport) -> Vec<TraceRow> {
    r.layers
        .iter()
        .map(|l| TraceRow {
            run_id: run_id.to_string(),
            iter: r.iter,
            layer: l.layer,
            loss: r.loss,
            dc: l.dc,
            clip: l.clip as f64,
            lr_scale: l.lr_scale,
            eps_norm: l.eps_norm,
            ghat_sqnorm: l.ghat_sqnorm,
        })
        .collect()
}

/// Streams trace rows; the header is written on creation.
pub struct TraceWriter<W: Write> {
    out: W,
    run_id: String,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, run_id: &str) -> Result<Self> {
        if run_id.is_empty() || run_id.contains([',', '\n', '\r', '"']) {
            return Err(Error::Config(format!("run id {run_id:?} must be nonempty without commas, quotes or newlines")));
        }
        out.write_all(HEADER.as_bytes())?;
        out.write_all(b"\n")?;
        Ok(TraceWriter { out, run_id: run_id.to_string() })
    }

    pub fn write_step(&mut self, r: &StepReport) -> Result<()> {
        for row in rows_from_report(&self.run_id, r) {
            self.out.write_all(row.to_line().as_bytes())?;
        }
        Ok(())
    }

    pub fn into_inner(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Parses a trace; errors carry the 1-based line number.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.split('\n');
    match lines.next() {
        Some(h) if h == HEADER => {}
        _ => return Err(Error::Format("line 1: missing trace header".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let ln = i + 2;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Format(format!("line {ln}: expected 9 fields, found {}", f.len())));
        }
        let int = |s: &str, what: &str| s.parse::<u64>().map_err(|_| Error::Format(format!("line {ln}: bad {what} {s:?}")));
        let flt = |s: &str, what: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("line {ln}: bad {what} {s:?}")));
        rows.push(TraceRow {
            run_id: f[0].to_string(),
            iter: int(f[1], "iter")?,
            layer: int(f[2], "layer")? as usize,
            loss: flt(f[3], "loss")?,
            dc: flt(f[4], "dc")?,
            clip: flt(f[5], "clip")?,
            lr_scale: flt(f[6], "lr_scale")?,
            eps_norm: flt(f[7], "eps_norm")?,
            ghat_sqnorm: flt(f[8], "ghat_sqnorm")?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::LayerReport;
    use std::time::Duration;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_float(0.1), "1.00000000e-1");
        assert_eq!(fmt_float(-123456789.0), "-1.23456789e8");
        assert_eq!(fmt_float(f64::NAN), "NaN");
        let v = 2.0f64 / 3.0;
        let back: f64 = fmt_float(v).parse().unwrap();
        assert!((back - v).abs() / v < 1e-8);
    }

    #[test]
    fn write_then_parse() {
        let report = StepReport {
            iter: 3,
            lr: 0.1,
            loss: 2.5,
            layers: vec![
                LayerReport { layer: 0, dc: 0.01, clip: 0.5, lr_scale: 0.8, eps_norm: 0.2, ghat_sqnorm: 4.0 },
                LayerReport { layer: 1, dc: f64::NAN, clip: 1.0, lr_scale: 1.0, eps_norm: 0.0, ghat_sqnorm: 1.0 },
            ],
            diverged: false,
            captures: vec![],
            clip_time: Duration::ZERO,
        };
        let mut w = TraceWriter::new(Vec::new(), "r1").unwrap();
        w.write_step(&report).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert!(text.starts_with(HEADER));
        assert!(!text.contains('\r'));
        let rows = parse_trace(&text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].lr_scale, 0.8);
        assert!(rows[1].dc.is_nan());
        assert!(TraceWriter::new(Vec::new(), "a,b").is_err());
    }

    #[test]
    fn corrupt_traces_are_rejected() {
        assert!(parse_trace("nope\n").is_err());
        let bad = format!("{HEADER}\nr,1,0,1.0,0.1\n");
        let err = parse_trace(&bad).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let bad = format!("{HEADER}\nr,x,0,1,1,1,1,1,1\n");
        assert!(parse_trace(&bad).is_err());
    }
}
