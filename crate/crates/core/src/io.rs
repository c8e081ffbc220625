//! Trajectory CSV, JSON and SVG rendering.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde_json::Value;

use crate::dynamics::{Termination, Trajectory};
use crate::error::{Error, Result};
use crate::model::CorrelationMatrix;

/// Format used for every float in CSV output (17 significant digits).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn trajectory_header(r: usize, with_drift: bool) -> String {
    let mut cols = vec!["t".to_string()];
    for prefix in if with_drift { &["m", "d"][..] } else { &["m"][..] } {
        for i in 1..=r {
            for j in 1..=r {
                cols.push(format!("{prefix}_{i}_{j}"));
            }
        }
    }
    cols.join(",")
}

pub fn write_trajectory_csv<W: Write>(mut out: W, traj: &Trajectory) -> Result<()> {
    let r = traj.r();
    let drift = traj.noise_drift_snapshots.as_ref();
    writeln!(out, "{}", trajectory_header(r, drift.is_some()))?;
    let mut line = String::new();
    for (k, (&t, m)) in traj.times.iter().zip(&traj.snapshots).enumerate() {
        line.clear();
        line.push_str(&fmt_f64(t));
        let mut push_matrix = |a: &DMatrix<f64>| {
            for i in 0..r {
                for j in 0..r {
                    line.push(',');
                    line.push_str(&fmt_f64(a[(i, j)]));
                }
            }
        };
        push_matrix(m.matrix());
        if let Some(ds) = drift {
            push_matrix(&ds[k]);
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Parses a trajectory CSV written by [`write_trajectory_csv`]. The
/// termination status is not stored and comes back as `Horizon`.
pub fn read_trajectory_csv<R: BufRead>(input: R) -> Result<Trajectory> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty trajectory CSV".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"t") {
        return Err(Error::Format("first column must be `t`".into()));
    }
    let n_m = cols.iter().filter(|c| c.starts_with("m_")).count();
    let n_d = cols.iter().filter(|c| c.starts_with("d_")).count();
    let r = (n_m as f64).sqrt().round() as usize;
    if r == 0 || r * r != n_m || (n_d != 0 && n_d != n_m) || cols.len() != 1 + n_m + n_d {
        return Err(Error::Format(format!("unrecognised trajectory header `{header}`")));
    }
    if header != trajectory_header(r, n_d > 0) {
        return Err(Error::Format(format!("unexpected column order in `{header}`")));
    }
    let to_matrix = |vals: &[f64]| DMatrix::from_row_slice(r, r, vals);
    let mut traj: Option<Trajectory> = None;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let vals = line
            .split(',')
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 2)))?;
        if vals.len() != cols.len() {
            return Err(Error::Format(format!(
                "line {}: {} fields, expected {}",
                lineno + 2,
                vals.len(),
                cols.len()
            )));
        }
        let m = CorrelationMatrix::new_unchecked(to_matrix(&vals[1..1 + n_m]));
        let d = (n_d > 0).then(|| to_matrix(&vals[1 + n_m..]));
        match traj.as_mut() {
            None => traj = Some(Trajectory::new(vals[0], m, d)),
            Some(tr) => tr.push(vals[0], m, d),
        }
    }
    let mut traj = traj.ok_or_else(|| Error::Format("trajectory CSV has no rows".into()))?;
    traj.termination = Termination::Horizon;
    Ok(traj)
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Line chart of every `m_ij(t)`. Pairs in `highlight` are drawn in colour and
/// listed first in the legend; the rest are thin grey lines. With `log_time`
/// the x axis is `log₁₀ t` and `t = 0` samples are dropped.
pub fn svg_line_chart(traj: &Trajectory, highlight: &[(usize, usize)], log_time: bool, title: &str) -> String {
    let (w, h) = (860.0, 520.0);
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 60.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let r = traj.r();

    let xs: Vec<Option<f64>> = traj
        .times
        .iter()
        .map(|&t| match (log_time, t > 0.0) {
            (false, _) => Some(t),
            (true, true) => Some(t.log10()),
            (true, false) => None,
        })
        .collect();
    let valid: Vec<f64> = xs.iter().flatten().copied().collect();
    let (x0, mut x1) = valid
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    if !x0.is_finite() {
        return format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\"></svg>\n");
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let lo = traj
        .snapshots
        .iter()
        .flat_map(|m| m.matrix().iter().copied())
        .fold(0.0f64, f64::min)
        .max(-1.0);
    let (y0, y1) = (if lo < 0.0 { -1.0 } else { 0.0 }, 1.0);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>", left + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        "<rect x=\"{left}\" y=\"{top}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>"
    );
    for k in 0..=4 {
        let y = y0 + (y1 - y0) * k as f64 / 4.0;
        let py = sy(y);
        let _ = writeln!(s, "<line x1=\"{left}\" y1=\"{py:.2}\" x2=\"{}\" y2=\"{py:.2}\" stroke=\"#ddd\"/>", left + pw);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{y:.2}</text>", left - 6.0, py + 4.0);
    }
    for k in 0..=5 {
        let x = x0 + (x1 - x0) * k as f64 / 5.0;
        let px = sx(x);
        let label = if log_time { format!("1e{x:.1}") } else { format!("{x:.3}") };
        let _ = writeln!(s, "<text x=\"{px:.2}\" y=\"{}\" text-anchor=\"middle\">{label}</text>", top + ph + 18.0);
    }
    let xlabel = if log_time { "t (log scale)" } else { "t" };
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{xlabel}</text>", left + pw / 2.0, h - 15.0);
    let _ = writeln!(
        s,
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">m_ij</text>",
        top + ph / 2.0,
        top + ph / 2.0
    );

    let mut order: Vec<(usize, usize)> = highlight.to_vec();
    for i in 0..r {
        for j in 0..r {
            if !highlight.contains(&(i, j)) {
                order.push((i, j));
            }
        }
    }
    // grey lines underneath
    for &(i, j) in order.iter().rev() {
        let hl = highlight.iter().position(|&p| p == (i, j));
        let (color, width) = match hl {
            Some(k) => (PALETTE[k % PALETTE.len()], 2.5),
            None => ("#999", 1.0),
        };
        let mut pts = String::new();
        for (x, m) in xs.iter().zip(&traj.snapshots) {
            if let Some(x) = x {
                let _ = write!(pts, "{:.2},{:.2} ", sx(*x), sy(m.get(i, j).clamp(y0, y1)));
            }
        }
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\" points=\"{}\"/>",
            pts.trim_end()
        );
    }
    for (k, &(i, j)) in order.iter().enumerate() {
        let ly = top + 10.0 + 18.0 * k as f64;
        let lx = left + pw + 15.0;
        let hl = highlight.iter().position(|&p| p == (i, j));
        let color = hl.map_or("#999", |k| PALETTE[k % PALETTE.len()]);
        let tag = if hl.is_some() { " *" } else { "" };
        let _ = writeln!(s, "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2.5\"/>", lx + 22.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">({}, {}){tag}</text>", lx + 28.0, ly + 4.0, i + 1, j + 1);
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_traj(with_drift: bool) -> Trajectory {
        let m = |a: f64| CorrelationMatrix::new_unchecked(DMatrix::from_fn(2, 2, |i, j| a * (i as f64 + 1.0) / (j as f64 + 3.0)));
        let d = |a: f64| with_drift.then(|| DMatrix::from_element(2, 2, a / 7.0));
        let mut tr = Trajectory::new(0.0, m(0.1), d(0.1));
        tr.push(0.1, m(1.0 / 3.0), d(0.2));
        tr.push(0.2, m(-0.7), d(1e-300));
        tr
    }

    #[test]
    fn header_layout() {
        assert_eq!(trajectory_header(2, false), "t,m_1_1,m_1_2,m_2_1,m_2_2");
        assert_eq!(
            trajectory_header(1, true),
            "t,m_1_1,d_1_1"
        );
    }

    #[test]
    fn csv_round_trip_is_exact() {
        for drift in [false, true] {
            let tr = sample_traj(drift);
            let mut buf = Vec::new();
            write_trajectory_csv(&mut buf, &tr).unwrap();
            let text = String::from_utf8(buf.clone()).unwrap();
            assert!(!text.contains(",\n") && !text.contains('\r'));
            let back = read_trajectory_csv(&buf[..]).unwrap();
            assert_eq!(back.times, tr.times);
            assert_eq!(back.snapshots, tr.snapshots);
            assert_eq!(back.noise_drift_snapshots, tr.noise_drift_snapshots);
        }
    }

    #[test]
    fn svg_mentions_pairs() {
        let s = svg_line_chart(&sample_traj(false), &[(0, 1)], true, "demo");
        assert!(s.starts_with("<svg"));
        assert!(s.contains("(1, 2) *"));
        assert!(s.contains("(2, 2)"));
        assert_eq!(s.matches("<polyline").count(), 4);
    }
}
