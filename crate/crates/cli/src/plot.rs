//! Static SVG figures: loss curves and the ablation bar chart.

use std::path::Path;

use anyhow::anyhow;
use plotters::prelude::*;
use shape_transfer::losses::LossReport;

fn plot_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e:?}")
}

/// Per-epoch means of the adversarial, cycle and shape terms.
pub fn loss_curves(path: &Path, epoch_means: &[LossReport]) -> anyhow::Result<()> {
    let series: [(&str, fn(&LossReport) -> f64, RGBColor); 4] = [
        ("l_gan", |r| r.l_gan, RED),
        ("l_cyc", |r| r.l_cyc, BLUE),
        ("l_shape", |r| r.l_shape, GREEN),
        ("l_total", |r| r.l_total, BLACK),
    ];
    let (lo, hi) = epoch_means
        .iter()
        .flat_map(|r| series.iter().map(move |(_, f, _)| f(r)))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0) - 1.0, hi.max(0.0) + 1.0) };
    let pad = 0.05 * (hi - lo);
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training losses (epoch means)", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .build_cartesian_2d(1f64..(epoch_means.len().max(2)) as f64, (lo - pad)..(hi + pad))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("epoch").draw().map_err(plot_err)?;
    for (name, f, color) in series {
        chart
            .draw_series(LineSeries::new(epoch_means.iter().enumerate().map(|(i, r)| ((i + 1) as f64, f(r))), color))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Grouped bars: one group per structure, one bar per method.
pub fn ablation_bars(path: &Path, methods: &[&str], structures: &[&str], means: &[Vec<f64>]) -> anyhow::Result<()> {
    let colors = [RGBColor(128, 128, 128), RGBColor(70, 130, 180), RGBColor(200, 60, 60)];
    let groups = structures.len();
    let width = methods.len() as f64 + 1.0;
    let root = SVGBackend::new(path, (720, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("target Dice by method", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(48)
        .build_cartesian_2d(0f64..groups as f64 * width, 0f64..1.0)
        .map_err(plot_err)?;
    let names: Vec<String> = structures.iter().map(|s| s.to_string()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(groups * 4)
        .x_label_formatter(&|x| {
            let g = (x / width).floor() as usize;
            let centre = g as f64 * width + width / 2.0;
            if (x - centre).abs() < width / 4.0 {
                names.get(g).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc("Dice")
        .draw()
        .map_err(plot_err)?;
    for (m, name) in methods.iter().enumerate() {
        let color = colors[m % colors.len()];
        let bars = (0..groups).map(|g| {
            let x0 = g as f64 * width + 0.5 + m as f64;
            Rectangle::new([(x0, 0.0), (x0 + 0.9, means[m][g].clamp(0.0, 1.0))], color.filled())
        });
        chart
            .draw_series(bars)
            .map_err(plot_err)?
            .label(*name)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}
