//! PNG charts: training loss curves and a per-run mAP comparison.

use std::path::Path;
use std::sync::OnceLock;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::trainer::LossReport;

const FONT_FAMILY: &str = "sans-serif";
const FONT_PATHS: [&str; 2] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
];

/// Registers a TrueType font once per process. `OMNIDET_FONT` overrides the search path.
fn ensure_font() -> Result<()> {
    static FONT: OnceLock<std::result::Result<(), String>> = OnceLock::new();
    FONT.get_or_init(|| {
        let candidates: Vec<String> = std::env::var("OMNIDET_FONT")
            .into_iter()
            .chain(FONT_PATHS.iter().map(|s| s.to_string()))
            .collect();
        for path in &candidates {
            if let Ok(bytes) = std::fs::read(path) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                return plotters::style::register_font(FONT_FAMILY, FontStyle::Normal, bytes)
                    .map_err(|_| format!("{path} is not a usable font"));
            }
        }
        Err(format!("no font found (tried {candidates:?}); set OMNIDET_FONT"))
    })
    .clone()
    .map_err(Error::Plot)
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

/// Trailing moving average with window `w`.
fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if i >= w {
            acc -= values[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// Every loss component against step (moving average over 25 steps), log-scaled.
pub fn plot_loss_curves(reports: &[LossReport], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Invalid("no loss rows to plot".into()));
    }
    ensure_font()?;
    let series: [(&str, fn(&LossReport) -> f64, RGBColor); 7] = [
        ("total", |r| r.total, BLACK),
        ("focal", |r| r.focal, RGBColor(31, 119, 180)),
        ("reg", |r| r.reg, RGBColor(255, 127, 14)),
        ("bce", |r| r.bce, RGBColor(44, 160, 44)),
        ("intra", |r| r.intra, RGBColor(214, 39, 40)),
        ("inter", |r| r.inter, RGBColor(148, 103, 189)),
        ("sfl", |r| r.sfl, RGBColor(140, 86, 75)),
    ];
    let floor = 1e-6;
    let curves: Vec<(&str, Vec<(f64, f64)>, RGBColor)> = series
        .iter()
        .filter(|(_, f, _)| reports.iter().any(|r| f(r) > 0.0))
        .map(|(name, f, color)| {
            let ys = smooth(&reports.iter().map(f).collect::<Vec<_>>(), 25);
            let pts = reports.iter().zip(ys).map(|(r, y)| (r.step as f64, y.max(floor))).collect();
            (*name, pts, *color)
        })
        .collect();
    let x_max = reports.last().map_or(1.0, |r| r.step as f64).max(1.0);
    let y_max = curves
        .iter()
        .flat_map(|(_, p, _)| p.iter().map(|q| q.1))
        .fold(floor, f64::max)
        * 1.5;
    let y_min = curves
        .iter()
        .flat_map(|(_, p, _)| p.iter().map(|q| q.1))
        .fold(f64::INFINITY, f64::min)
        .max(floor);

    let root = BitMapBackend::new(path, (900, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training losses", (FONT_FAMILY, 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(64)
        .build_cartesian_2d(0.0..x_max, (y_min..y_max).log_scale())
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .x_label_formatter(&|v| format!("{v:.0}"))
        .y_desc("loss (25-step mean)")
        .label_style((FONT_FAMILY, 13))
        .draw()
        .map_err(plot_err)?;
    for (name, pts, color) in curves {
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .label_font((FONT_FAMILY, 13))
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Bar chart of mAP (in points) per labelled run.
pub fn plot_map_comparison(entries: &[(String, f64)], path: &Path) -> Result<()> {
    if entries.is_empty() {
        return Err(Error::Invalid("no runs to compare".into()));
    }
    ensure_font()?;
    let top = entries.iter().map(|e| 100.0 * e.1).fold(10.0, f64::max) * 1.2;
    let n = entries.len();
    let root = BitMapBackend::new(path, (240 + 140 * n as u32, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("mAP by annotation mix", (FONT_FAMILY, 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d((0..n - 1).into_segmented(), 0.0..top)
        .map_err(plot_err)?;
    let labels: Vec<String> = entries.iter().map(|e| e.0.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .y_desc("mAP, points (IoU 0.40-0.75)")
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) => labels.get(*i).cloned().unwrap_or_default(),
            _ => String::new(),
        })
        .label_style((FONT_FAMILY, 13))
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(entries.iter().enumerate().map(|(i, (_, v))| {
            let mut bar = Rectangle::new(
                [(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), 100.0 * v)],
                RGBColor(31, 119, 180).filled(),
            );
            bar.set_margin(0, 0, 18, 18);
            bar
        }))
        .map_err(plot_err)?;
    chart
        .draw_series(entries.iter().enumerate().map(|(i, (_, v))| {
            Text::new(
                format!("{:.1}", 100.0 * v),
                (SegmentValue::CenterOf(i), 100.0 * v + top * 0.02),
                (FONT_FAMILY, 14),
            )
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_is_trailing_mean() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn renders_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let reports: Vec<LossReport> = (0..60)
            .map(|s| LossReport {
                step: s,
                lr: 1e-3,
                focal: 1.0 / (1.0 + s as f64),
                reg: 0.5,
                bce: 0.0,
                intra: 0.1,
                inter: 0.05,
                sfl: 1e-3,
                total: 1.0,
            })
            .collect();
        let a = dir.path().join("loss.png");
        plot_loss_curves(&reports, &a).unwrap();
        let b = dir.path().join("map.png");
        plot_map_comparison(&[("full".into(), 0.31), ("full+weak".into(), 0.35)], &b).unwrap();
        for p in [a, b] {
            let img = image::open(&p).unwrap();
            assert!(img.width() > 100);
        }
    }
}
