//! Trajectory CSV, JSON documents and minimal SVG line plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::adjoint::{AdjointState, AdjointTrajectory, SigmaSign};
use crate::error::{Error, Result};
use crate::integrator::{Atom, Dynamics, Trajectory, TrajectoryEvent};
use crate::model::SystemState;
use crate::SCHEMA;

/// Formats with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn csv_header(n: usize, m: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=n).map(|i| format!("x_{i}")));
    h.push("y".into());
    h.extend((1..=n).map(|i| format!("v_{i}")));
    h.push("w".into());
    h.extend((1..=m).map(|i| format!("u_{i}")));
    h.push("nu".into());
    h
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(csv_header(traj.n, traj.m))?;
    for i in 0..traj.len() {
        let mut rec = vec![fmt17(traj.times[i])];
        rec.extend(traj.states[i].to_flat().into_iter().map(fmt17));
        rec.extend(traj.controls[i].iter().copied().map(fmt17));
        rec.push(fmt17(traj.nu[i]));
        // Flat order is (x, y, v, w), which is also the column order.
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_trajectory_csv`]. Dimensions come from the
/// header; atoms are rebuilt from duplicated times with a drop in `w`.
pub fn read_trajectory_csv(path: &Path, dynamics: Dynamics) -> Result<Trajectory> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let n = header.iter().filter(|h| h.starts_with("x_")).count();
    let m = header.iter().filter(|h| h.starts_with("u_")).count();
    if header != csv_header(n, m) {
        return Err(Error::config(
            path.display().to_string(),
            format!("unexpected trajectory columns {header:?}"),
        ));
    }
    let mut traj = Trajectory {
        dynamics,
        n,
        m,
        times: Vec::new(),
        states: Vec::new(),
        controls: Vec::new(),
        nu: Vec::new(),
        contact: Vec::new(),
        atoms: Vec::new(),
        events: Vec::new(),
    };
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::config(format!("{}:{}", path.display(), line + 2), e.to_string()))?;
        let t = vals[0];
        let s = SystemState::from_flat(n, &vals[1..2 * n + 3])?;
        let u = vals[2 * n + 3..2 * n + 3 + m].to_vec();
        let nu = vals[2 * n + 3 + m];
        if let (Some(&tp), Some(sp)) = (traj.times.last(), traj.states.last()) {
            if tp == t && sp.w > s.w {
                traj.atoms.push(Atom {
                    time: t,
                    mass: sp.w - s.w,
                });
            }
        }
        let c = s.y >= -1e-9;
        traj.times.push(t);
        traj.states.push(s);
        traj.controls.push(u);
        traj.nu.push(nu);
        traj.contact.push(c);
    }
    if traj.is_empty() {
        return Err(Error::config(path.display().to_string(), "trajectory file has no rows"));
    }
    Ok(traj)
}

pub fn adjoint_csv_header(n: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=n).map(|i| format!("q_{i}")));
    h.push("sigma".into());
    h.extend((1..=n).map(|i| format!("p_{i}")));
    h.extend(["r", "s", "mu", "H", "h_y", "h_w"].map(String::from));
    h
}

pub fn write_adjoint_csv(path: &Path, adj: &AdjointTrajectory) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(adjoint_csv_header(adj.n))?;
    for i in 0..adj.len() {
        let mut rec = vec![fmt17(adj.times[i])];
        rec.extend(adj.adjoints[i].to_flat().into_iter().map(fmt17));
        for v in [adj.s[i], adj.mu_cumulative[i], adj.hamiltonian[i], adj.h_y[i], adj.h_w[i]] {
            rec.push(fmt17(v));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_adjoint_csv`].
pub fn read_adjoint_csv(path: &Path, sigma_sign: SigmaSign) -> Result<AdjointTrajectory> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let n = header.iter().filter(|h| h.starts_with("q_")).count();
    if header != adjoint_csv_header(n) {
        return Err(Error::config(
            path.display().to_string(),
            format!("unexpected adjoint columns {header:?}"),
        ));
    }
    let mut adj = AdjointTrajectory {
        n,
        times: Vec::new(),
        adjoints: Vec::new(),
        s: Vec::new(),
        mu_cumulative: Vec::new(),
        hamiltonian: Vec::new(),
        h_y: Vec::new(),
        h_w: Vec::new(),
        sigma_sign,
    };
    for (line, rec) in r.records().enumerate() {
        let vals: Vec<f64> = rec?
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::config(format!("{}:{}", path.display(), line + 2), e.to_string()))?;
        let d = 2 * n + 2;
        adj.times.push(vals[0]);
        adj.adjoints.push(AdjointState::from_flat(n, &vals[1..1 + d]));
        adj.s.push(vals[1 + d]);
        adj.mu_cumulative.push(vals[2 + d]);
        adj.hamiltonian.push(vals[3 + d]);
        adj.h_y.push(vals[4 + d]);
        adj.h_w.push(vals[5 + d]);
    }
    if adj.is_empty() {
        return Err(Error::config(path.display().to_string(), "adjoint file has no rows"));
    }
    Ok(adj)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrajectorySummary {
    pub dynamics: Dynamics,
    pub t_final: f64,
    pub final_state: SystemState,
    pub final_nu: f64,
    pub max_y: f64,
    pub nodes: usize,
    pub atoms: Vec<Atom>,
    pub events: Vec<TrajectoryEvent>,
}

pub fn summarize(traj: &Trajectory) -> TrajectorySummary {
    TrajectorySummary {
        dynamics: traj.dynamics,
        t_final: traj.t_final(),
        final_state: traj.final_state().clone(),
        final_nu: traj.final_nu(),
        max_y: traj.max_y(),
        nodes: traj.len(),
        atoms: traj.atoms.clone(),
        events: traj.events.clone(),
    }
}

/// Serializes `body` as a JSON object tagged with the schema version and a
/// document kind.
pub fn document<T: Serialize>(kind: &str, body: &T) -> Result<Value> {
    let mut v = serde_json::to_value(body)?;
    match &mut v {
        Value::Object(map) => {
            map.insert("schema".into(), json!(SCHEMA));
            map.insert("kind".into(), json!(kind));
            Ok(v)
        }
        _ => Ok(json!({ "schema": SCHEMA, "kind": kind, "value": v })),
    }
}

pub fn write_json<T: Serialize>(path: &Path, kind: &str, body: &T) -> Result<()> {
    let v = document(kind, body)?;
    fs::write(path, serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Draw markers instead of a polyline.
    pub markers: bool,
}

impl Series {
    pub fn line(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            label: label.into(),
            points,
            markers: false,
        }
    }

    pub fn dots(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            label: label.into(),
            points,
            markers: true,
        }
    }
}

/// A single-panel line plot rendered as a standalone SVG.
#[derive(Debug, Clone)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
    /// Vertical guide lines (e.g. impact times) drawn dashed.
    pub vlines: Vec<f64>,
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

impl Plot {
    pub fn new(title: impl Into<String>, x_label: impl Into<String>, y_label: impl Into<String>) -> Self {
        Plot {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            log_x: false,
            log_y: false,
            series: Vec::new(),
            vlines: Vec::new(),
        }
    }

    pub fn log_log(mut self) -> Self {
        self.log_x = true;
        self.log_y = true;
        self
    }

    pub fn with(mut self, s: Series) -> Self {
        self.series.push(s);
        self
    }

    fn tx(&self, v: f64) -> Option<f64> {
        let r = if self.log_x { v.log10() } else { v };
        r.is_finite().then_some(r)
    }

    fn ty(&self, v: f64) -> Option<f64> {
        let r = if self.log_y { v.log10() } else { v };
        r.is_finite().then_some(r)
    }

    pub fn render(&self) -> String {
        let (w, h) = (640.0, 420.0);
        let (l, r, t, b) = (70.0, 20.0, 40.0, 50.0);
        let pts: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter())
            .filter_map(|&(x, y)| Some((self.tx(x)?, self.ty(y)?)))
            .collect();
        let (mut x0, mut x1, mut y0, mut y1) = pts.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
            |a, p| (a.0.min(p.0), a.1.max(p.0), a.2.min(p.1), a.3.max(p.1)),
        );
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 - x0 <= 0.0 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 <= 0.0 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let pad = 0.05 * (y1 - y0);
        y0 -= pad;
        y1 += pad;
        let px = |x: f64| l + (x - x0) / (x1 - x0) * (w - l - r);
        let py = |y: f64| h - b - (y - y0) / (y1 - y0) * (h - t - b);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            w / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            w - l - r,
            h - t - b
        );
        for k in 0..=4 {
            let fx = x0 + (x1 - x0) * k as f64 / 4.0;
            let fy = y0 + (y1 - y0) * k as f64 / 4.0;
            let lx = if self.log_x { format!("1e{fx:.1}") } else { tick(fx) };
            let ly = if self.log_y { format!("1e{fy:.1}") } else { tick(fy) };
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{lx}</text>"#,
                px(fx),
                h - b + 16.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{ly}</text>"#,
                l - 6.0,
                py(fy) + 4.0
            );
        }
        if y0 < 0.0 && y1 > 0.0 && !self.log_y {
            let _ = writeln!(
                s,
                r##"<line x1="{l}" x2="{}" y1="{:.1}" y2="{:.1}" stroke="#999" stroke-width="0.5"/>"##,
                w - r,
                py(0.0),
                py(0.0)
            );
        }
        for &v in &self.vlines {
            if let Some(x) = self.tx(v) {
                let _ = writeln!(
                    s,
                    r##"<line x1="{:.1}" x2="{:.1}" y1="{t}" y2="{}" stroke="#888" stroke-dasharray="4 3"/>"##,
                    px(x),
                    px(x),
                    h - b
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (l + w - r) / 2.0,
            h - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            (t + h - b) / 2.0,
            (t + h - b) / 2.0,
            escape(&self.y_label)
        );
        for (i, ser) in self.series.iter().enumerate() {
            let c = COLORS[i % COLORS.len()];
            let mapped: Vec<(f64, f64)> = ser
                .points
                .iter()
                .filter_map(|&(x, y)| Some((px(self.tx(x)?), py(self.ty(y)?))))
                .collect();
            if ser.markers {
                for (x, y) in &mapped {
                    let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{c}"/>"#);
                }
            } else if !mapped.is_empty() {
                let mut d = String::new();
                for (x, y) in thin(&mapped, 4000) {
                    let _ = write!(d, "{x:.2},{y:.2} ");
                }
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#,
                    d.trim_end()
                );
            }
            let ly = t + 16.0 + 16.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{ly}" fill="{c}">{}</text>"#,
                l + 10.0,
                escape(&ser.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }
}

fn thin(p: &[(f64, f64)], max: usize) -> Vec<(f64, f64)> {
    if p.len() <= max {
        return p.to_vec();
    }
    let stride = p.len().div_ceil(max);
    let mut out: Vec<_> = p.iter().step_by(stride).copied().collect();
    if out.last() != p.last() {
        out.push(*p.last().unwrap());
    }
    out
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
