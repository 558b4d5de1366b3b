//! SVG line charts of a run.

use std::path::Path;

use anyhow::{anyhow, Result};
use hetalloc_core::sim::RunTrace;
use plotters::prelude::*;

/// Values below this are drawn at this level on log axes.
const LOG_FLOOR: f64 = 1e-12;

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// One chart with a shared time axis. `log_y` plots on a log10 scale.
pub fn line_chart(path: &Path, title: &str, y_label: &str, series: &[Series], log_y: bool) -> Result<()> {
    let err = |e: &dyn std::fmt::Display| anyhow!("drawing {}: {e}", path.display());
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut t0, mut t1, mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(t, y) in pts {
        let y = if log_y { y.max(LOG_FLOOR) } else { y };
        if !y.is_finite() {
            continue;
        }
        t0 = t0.min(t);
        t1 = t1.max(t);
        lo = lo.min(y);
        hi = hi.max(y);
    }
    if !t0.is_finite() {
        (t0, t1, lo, hi) = (0.0, 1.0, 0.0, 1.0);
    }
    if t1 <= t0 {
        t1 = t0 + 1.0;
    }
    if hi <= lo {
        hi = if log_y { lo * 10.0 } else { lo + 1.0 };
    }
    let root = SVGBackend::new(path, (900, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut builder = ChartBuilder::on(&root);
    builder
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(70);
    let colors = [&BLUE, &RED, &GREEN, &MAGENTA, &CYAN, &BLACK];
    macro_rules! draw {
        ($chart:expr, $map:expr) => {{
            let mut chart = $chart;
            chart
                .configure_mesh()
                .x_desc("t [s]")
                .y_desc(y_label)
                .draw()
                .map_err(|e| err(&e))?;
            for (k, s) in series.iter().enumerate() {
                let color = colors[k % colors.len()];
                chart
                    .draw_series(LineSeries::new(s.points.iter().map(|&(t, y)| (t, $map(y))), color))
                    .map_err(|e| err(&e))?
                    .label(s.label.clone())
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            }
            if series.len() > 1 {
                chart
                    .configure_series_labels()
                    .background_style(WHITE.mix(0.8))
                    .border_style(BLACK)
                    .draw()
                    .map_err(|e| err(&e))?;
            }
        }};
    }
    if log_y {
        let chart = builder
            .build_cartesian_2d(t0..t1, (lo..hi).log_scale())
            .map_err(|e| err(&e))?;
        draw!(chart, |y: f64| y.max(LOG_FLOOR));
    } else {
        let pad = 0.05 * (hi - lo);
        let chart = builder
            .build_cartesian_2d(t0..t1, (lo - pad)..(hi + pad))
            .map_err(|e| err(&e))?;
        draw!(chart, |y: f64| y);
    }
    root.present().map_err(|e| err(&e))?;
    Ok(())
}

/// `lyapunov.svg`, `specialization.svg` and, for compare runs, `input_gap.svg`.
pub fn write_plots(dir: &Path, trace: &RunTrace) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();
    let v = Series {
        label: "V".into(),
        points: trace.rows.iter().map(|r| (r.t, r.v)).collect(),
    };
    let p = dir.join("lyapunov.svg");
    line_chart(&p, "Lyapunov function", "V", &[v], true)?;
    written.push(p);

    let n_r = trace.rows.first().map_or(0, |r| r.s.len());
    let n_t = trace.rows.first().and_then(|r| r.s.first()).map_or(0, Vec::len);
    let mut spec = Vec::new();
    for i in 0..n_r {
        for m in 0..n_t {
            let points: Vec<(f64, f64)> = trace.rows.iter().map(|r| (r.t, r.s[i][m])).collect();
            // Flat lines at 1 say nothing; keep the ones that move.
            if points.iter().any(|&(_, s)| s != points[0].1) {
                spec.push(Series {
                    label: format!("robot {i}, task {m}"),
                    points,
                });
            }
        }
    }
    let p = dir.join("specialization.svg");
    line_chart(&p, "Specialization", "s", &spec, false)?;
    written.push(p);

    let gap: Vec<(f64, f64)> = trace
        .rows
        .iter()
        .zip(trace.input_gap())
        .filter_map(|(r, g)| g.map(|g| (r.t, g)))
        .collect();
    if !gap.is_empty() {
        let p = dir.join("input_gap.svg");
        line_chart(
            &p,
            "Mixed vs up-to-date allocation",
            "max |u - u_ref|",
            &[Series {
                label: "gap".into(),
                points: gap,
            }],
            true,
        )?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::bundled;
    use hetalloc_core::sim::{run_mixed, MixedOptions};

    #[test]
    fn plots_are_svg_files() {
        let mut file = bundled::get("example2").unwrap();
        file.sim.duration = 1.0;
        let sc = file.build().unwrap();
        let trace = run_mixed(&sc, &MixedOptions { latency: 5, compare: true }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_plots(dir.path(), &trace).unwrap();
        assert_eq!(files.len(), 3);
        for f in files {
            let text = std::fs::read_to_string(&f).unwrap();
            assert!(text.starts_with("<svg"), "{}", f.display());
            assert!(text.contains("<polyline") || text.contains("<path"), "{}", f.display());
        }
    }

    #[test]
    fn empty_series_still_draw() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.svg");
        line_chart(&p, "nothing", "y", &[], false).unwrap();
        assert!(p.exists());
    }
}
