//! SVG plot emission: smoothed reward curves with stderr bands and
//! attention heatmaps.

use ndarray::Array2;
use plotters::prelude::*;
use std::path::Path;

/// One curve: points plus an optional (lower, upper) band.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub band: Option<(Vec<(f64, f64)>, Vec<(f64, f64)>)>,
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// Line chart with optional shaded bands, one color per series.
pub fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<(), Box<dyn std::error::Error>> {
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, y) in &s.points {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
        if let Some((lo, hi)) = &s.band {
            for &(_, y) in lo.iter().chain(hi.iter()) {
                y_min = y_min.min(y);
                y_max = y_max.max(y);
            }
        }
    }
    if !x_min.is_finite() {
        x_min = 0.0;
        x_max = 1.0;
        y_min = 0.0;
        y_max = 1.0;
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let margin = (y_max - y_min) * 0.05;
    let root = SVGBackend::new(path, (900, 540)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x_min..x_max, (y_min - margin)..(y_max + margin))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()?;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if let Some((lo, hi)) = &s.band {
            let mut polygon: Vec<(f64, f64)> = lo.clone();
            polygon.extend(hi.iter().rev().copied());
            chart.draw_series(std::iter::once(Polygon::new(
                polygon,
                color.mix(0.18).filled(),
            )))?;
        }
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))?
            .label(s.label.clone())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
            });
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.85))
        .draw()?;
    root.present()?;
    Ok(())
}

/// Row-normalized heatmap of an attention matrix; cell text shows the
/// normalized weight.
pub fn attention_heatmap(
    path: &Path,
    title: &str,
    matrix: &Array2<f64>,
) -> Result<(), Box<dyn std::error::Error>> {
    let n = matrix.nrows();
    let mut normalized = matrix.clone();
    for i in 0..n {
        let total: f64 = (0..n).filter(|&j| j != i).map(|j| matrix[[i, j]]).sum();
        if total > 0.0 {
            for j in 0..n {
                normalized[[i, j]] = matrix[[i, j]] / total;
            }
        }
    }
    let size = 120 * n as u32 + 120;
    let root = SVGBackend::new(path, (size, size)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(40)
        .build_cartesian_2d(0f64..n as f64, 0f64..n as f64)?;
    chart
        .configure_mesh()
        .disable_mesh()
        .x_labels(n)
        .y_labels(n)
        .x_label_formatter(&|v| format!("{}", *v as usize))
        .y_label_formatter(&|v| format!("{}", *v as usize))
        .x_desc("attended agent j")
        .y_desc("agent i")
        .draw()?;
    for i in 0..n {
        for j in 0..n {
            let v = normalized[[i, j]];
            let intensity = (v.clamp(0.0, 1.0) * 255.0) as u8;
            let color = RGBColor(255 - intensity, 255 - intensity / 3, 255);
            let y = (n - 1 - i) as f64;
            chart.draw_series(std::iter::once(Rectangle::new(
                [(j as f64, y), (j as f64 + 1.0, y + 1.0)],
                color.filled(),
            )))?;
            chart.draw_series(std::iter::once(Text::new(
                format!("{v:.2}"),
                (j as f64 + 0.32, y + 0.55),
                ("sans-serif", 16),
            )))?;
        }
    }
    root.present()?;
    Ok(())
}

/// Trailing moving average over `window` samples.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i.min(window - 1) + 1) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_is_trailing_average() {
        let v = vec![1.0, 2.0, 3.0, 4.0];
        let s = smooth(&v, 2);
        assert_eq!(s, vec![1.0, 1.5, 2.5, 3.5]);
        let s1 = smooth(&v, 1);
        assert_eq!(s1, v);
    }

    #[test]
    fn charts_render_to_svg() {
        let dir = tempfile::tempdir().unwrap();
        let line = dir.path().join("line.svg");
        line_chart(
            &line,
            "demo",
            "episode",
            "return",
            &[Series {
                label: "run".into(),
                points: vec![(0.0, 1.0), (1.0, 2.0), (2.0, 1.5)],
                band: Some((
                    vec![(0.0, 0.8), (1.0, 1.8), (2.0, 1.3)],
                    vec![(0.0, 1.2), (1.0, 2.2), (2.0, 1.7)],
                )),
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&line).unwrap();
        assert!(text.contains("<svg"));

        let heat = dir.path().join("heat.svg");
        let m = ndarray::array![[0.0, 3.0, 1.0], [2.0, 0.0, 2.0], [0.5, 0.5, 0.0]];
        attention_heatmap(&heat, "attention", &m).unwrap();
        assert!(std::fs::read_to_string(&heat).unwrap().contains("<svg"));
    }
}
