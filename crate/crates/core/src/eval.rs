//! Absolute trajectory error against a reference trajectory.

use std::fmt::Write as _;

use nalgebra::{Matrix3, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Mat3, Pose, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no poses share a timestamp")]
    EmptyAssociation,
    #[error("alignment needs at least three non-collinear positions")]
    DegenerateAlignment,
    #[error("timestamps must be strictly increasing (index {0})")]
    UnorderedTimestamps(usize),
    #[error("trajectory line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Stamped = (f64, Pose);

/// Estimate and reference, associated by identical timestamps.
#[derive(Debug, Clone)]
pub struct TrajectoryPair {
    estimate: Vec<Stamped>,
    reference: Vec<Stamped>,
}

fn check_order(t: &[Stamped]) -> Result<(), EvalError> {
    match t.windows(2).position(|w| !(w[1].0 > w[0].0)) {
        Some(i) => Err(EvalError::UnorderedTimestamps(i + 1)),
        None => Ok(()),
    }
}

impl TrajectoryPair {
    pub fn new(estimate: Vec<Stamped>, reference: Vec<Stamped>) -> Result<Self, EvalError> {
        check_order(&estimate)?;
        check_order(&reference)?;
        Ok(Self {
            estimate,
            reference,
        })
    }

    /// Matched `(estimate, reference)` poses in time order.
    pub fn associated(&self) -> Vec<(&Pose, &Pose)> {
        let mut out = Vec::new();
        let mut r = self.reference.iter().peekable();
        for (t, est) in &self.estimate {
            while r.next_if(|(tr, _)| tr < t).is_some() {}
            if let Some((_, reference)) = r.next_if(|(tr, _)| tr == t) {
                out.push((est, reference));
            }
        }
        out
    }
}

/// Rigid transform `T` minimizing `Σ‖T·p_est − p_ref‖²` (Kabsch, no scale).
pub fn align(t: &TrajectoryPair) -> Result<Pose, EvalError> {
    let pairs = t.associated();
    if pairs.len() < 3 {
        return Err(EvalError::DegenerateAlignment);
    }
    let n = pairs.len() as f64;
    let (mut ce, mut cr) = (Vec3::zeros(), Vec3::zeros());
    for (e, r) in &pairs {
        ce += e.translation;
        cr += r.translation;
    }
    ce /= n;
    cr /= n;
    let mut h = Mat3::zeros();
    let mut spread = Mat3::zeros();
    for (e, r) in &pairs {
        let de = e.translation - ce;
        h += (r.translation - cr) * de.transpose();
        spread += de * de.transpose();
    }
    let mut s = spread.symmetric_eigenvalues().as_slice().to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    if !(s[1] > 1e-12 * s[0].max(f64::MIN_POSITIVE)) {
        return Err(EvalError::DegenerateAlignment);
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let d = (u * v_t).determinant().signum();
    let rot = u * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * v_t;
    let q = UnitQuaternion::from_matrix(&rot);
    Ok(Pose::new(q, cr - q * ce))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub rmse: f64,
    /// Population standard deviation of the per-pose errors.
    pub std: f64,
    pub mean: f64,
    pub errors: Vec<f64>,
    pub aligned: bool,
}

impl AteReport {
    pub fn from_errors(errors: Vec<f64>, aligned: bool) -> Result<Self, EvalError> {
        if errors.is_empty() {
            return Err(EvalError::EmptyAssociation);
        }
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
        let std = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
        Ok(Self {
            rmse,
            std,
            mean,
            errors,
            aligned,
        })
    }
}

pub fn ate(t: &TrajectoryPair, do_align: bool) -> Result<AteReport, EvalError> {
    let pairs = t.associated();
    if pairs.is_empty() {
        return Err(EvalError::EmptyAssociation);
    }
    let fix = if do_align {
        align(t)?
    } else {
        Pose::identity()
    };
    let errors = pairs
        .iter()
        .map(|(e, r)| (fix.transform_point(&e.translation) - r.translation).norm())
        .collect();
    AteReport::from_errors(errors, do_align)
}

/// One (method, sequence) cell of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub sequence: String,
    pub aligned: AteSummary,
    pub unaligned: AteSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AteSummary {
    pub rmse: f64,
    pub std: f64,
}

impl From<&AteReport> for AteSummary {
    fn from(r: &AteReport) -> Self {
        Self {
            rmse: r.rmse,
            std: r.std,
        }
    }
}

/// Method-by-sequence table of aligned ATE RMSE and STD in meters.
pub fn metrics_table(rows: &[MetricsRow]) -> String {
    let mut sequences: Vec<&str> = Vec::new();
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !sequences.contains(&r.sequence.as_str()) {
            sequences.push(&r.sequence);
        }
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let width = methods.iter().map(|m| m.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}", "method");
    for s in &sequences {
        let _ = write!(out, " | {:>10} {:>10}", format!("{s} RMSE"), "STD");
    }
    out.push('\n');
    for m in &methods {
        let _ = write!(out, "{m:<width$}");
        for s in &sequences {
            match rows.iter().find(|r| r.method == *m && r.sequence == *s) {
                Some(r) => {
                    let _ = write!(out, " | {:>10.4} {:>10.4}", r.aligned.rmse, r.aligned.std);
                }
                None => {
                    let _ = write!(out, " | {:>10} {:>10}", "-", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// `t tx ty tz qx qy qz qw` per line, full precision.
pub fn write_tum(poses: &[Stamped]) -> String {
    let mut out = String::new();
    for (t, p) in poses {
        let (tr, q) = p.to_raw_parts();
        let _ = writeln!(
            out,
            "{:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e}",
            t, tr[0], tr[1], tr[2], q[0], q[1], q[2], q[3]
        );
    }
    out
}

/// Parses [`write_tum`] output; blank lines and `#` comments are skipped.
pub fn read_tum(text: &str) -> Result<Vec<Stamped>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| EvalError::Parse { line: i + 1, msg };
        let v = line
            .split_whitespace()
            .map(|f| f.parse::<f64>().map_err(|e| err(format!("{f:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if v.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", v.len())));
        }
        let q = [v[4], v[5], v[6], v[7]];
        if q.iter().map(|c| c * c).sum::<f64>() < 1e-12 {
            return Err(err("zero quaternion".into()));
        }
        out.push((v[0], Pose::from_raw_parts([v[1], v[2], v[3]], q)));
    }
    Ok(out)
}
