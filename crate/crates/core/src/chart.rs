//! SVG charts: accuracy bars and per-layer flow curves.

use plotters::prelude::*;

use crate::error::{Error, Result};

fn chart_err(e: impl std::fmt::Display) -> Error {
    Error::invalid(format!("chart: {e}"))
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// Vertical bars in `[0, 1]`, one per label.
pub fn accuracy_bars_svg(title: &str, bars: &[(String, f64)]) -> Result<String> {
    let mut out = String::new();
    {
        let width = (120 + 60 * bars.len() as u32).max(320);
        let root = SVGBackend::with_string(&mut out, (width, 360)).into_drawing_area();
        root.fill(&WHITE).map_err(chart_err)?;
        let n = bars.len().max(1);
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(48)
            .build_cartesian_2d((0..n).into_segmented(), 0.0..1.0)
            .map_err(chart_err)?;
        let labels: Vec<String> = bars.iter().map(|(l, _)| l.clone()).collect();
        chart
            .configure_mesh()
            .disable_x_mesh()
            .y_desc("accuracy")
            .x_labels(n)
            .x_label_formatter(&|v| match v {
                SegmentValue::CenterOf(i) => labels.get(*i).cloned().unwrap_or_default(),
                _ => String::new(),
            })
            .draw()
            .map_err(chart_err)?;
        chart
            .draw_series(bars.iter().enumerate().map(|(i, (_, v))| {
                let color = PALETTE[i % PALETTE.len()];
                let mut bar = Rectangle::new(
                    [(SegmentValue::Exact(i), 0.0), (SegmentValue::Exact(i + 1), v.clamp(0.0, 1.0))],
                    color.filled(),
                );
                bar.set_margin(0, 0, 6, 6);
                bar
            }))
            .map_err(chart_err)?;
        root.present().map_err(chart_err)?;
    }
    Ok(out)
}

/// One polyline per named curve over layer index.
pub fn curves_svg(title: &str, y_desc: &str, curves: &[(String, Vec<f64>)]) -> Result<String> {
    let layers = curves.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    if layers == 0 {
        return Err(Error::EmptyInput);
    }
    let finite = curves.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo < hi { (lo.min(0.0), hi) } else { (lo.min(0.0) - 0.5, hi + 0.5) };
    let pad = 0.05 * (hi - lo);
    let mut out = String::new();
    {
        let root = SVGBackend::with_string(&mut out, (640, 400)).into_drawing_area();
        root.fill(&WHITE).map_err(chart_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(56)
            .build_cartesian_2d(0.0..(layers.max(2) - 1) as f64, (lo - pad)..(hi + pad))
            .map_err(chart_err)?;
        chart
            .configure_mesh()
            .x_desc("layer")
            .y_desc(y_desc)
            .draw()
            .map_err(chart_err)?;
        for (i, (name, values)) in curves.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            chart
                .draw_series(LineSeries::new(
                    values.iter().enumerate().map(|(l, &v)| (l as f64, v)),
                    color.stroke_width(2),
                ))
                .map_err(chart_err)?
                .label(name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(chart_err)?;
        root.present().map_err(chart_err)?;
    }
    Ok(out)
}
