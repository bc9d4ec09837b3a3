use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// A named `(layer, value)` curve.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotSeries {
    pub name: String,
    pub points: Vec<(usize, f64)>,
}

#[derive(Serialize)]
struct Row<'a> {
    series: &'a str,
    layer: usize,
    value: f64,
}

/// Long-format CSV with columns `series,layer,value`.
pub fn write_plot_csv(path: &Path, series: &[PlotSeries]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in series {
        for &(layer, value) in &s.points {
            w.serialize(Row {
                series: &s.name,
                layer,
                value,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}
