//! Convergence curves from a training log, as SVG.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::train::EpochLog;

fn draw_err<E: std::fmt::Debug>(e: E) -> Error {
    Error::Data(format!("plot: {e:?}"))
}

/// Loss curves on the left and training-set AP50 on the right.
pub fn plot_log(logs: &[EpochLog], out: impl AsRef<Path>) -> Result<()> {
    if logs.is_empty() {
        return Err(Error::Data("plot: the log has no rows".into()));
    }
    let root = SVGBackend::new(out.as_ref(), (1000, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let (left, right) = root.split_horizontally(500);
    let last = logs.iter().map(|l| l.epoch).max().unwrap_or(1).max(1) as f64;

    let top = logs
        .iter()
        .flat_map(|l| [l.mean_loss, l.cls_loss, l.reg_loss])
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-6)
        * 1.05;
    let mut chart = ChartBuilder::on(&left)
        .caption("training loss", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(0.0..last, 0.0..top)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("loss")
        .draw()
        .map_err(draw_err)?;
    let series: [(&str, fn(&EpochLog) -> f64, RGBColor); 3] = [
        ("total", |l| l.mean_loss, BLACK),
        ("classification", |l| l.cls_loss, BLUE),
        ("regression", |l| l.reg_loss, RED),
    ];
    for (label, get, color) in series {
        chart
            .draw_series(LineSeries::new(logs.iter().map(|l| (l.epoch as f64, get(l))), color))
            .map_err(draw_err)?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(draw_err)?;

    let mut ap_chart = ChartBuilder::on(&right)
        .caption("AP50", ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(0.0..last, 0.0..1.0)
        .map_err(draw_err)?;
    ap_chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("AP50")
        .draw()
        .map_err(draw_err)?;
    let points: Vec<(f64, f64)> = logs
        .iter()
        .filter_map(|l| l.ap50.map(|a| (l.epoch as f64, a)))
        .collect();
    ap_chart
        .draw_series(LineSeries::new(points.iter().copied(), GREEN))
        .map_err(draw_err)?;
    ap_chart
        .draw_series(points.iter().map(|&p| Circle::new(p, 3, GREEN.filled())))
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(())
}
