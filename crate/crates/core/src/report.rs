//! Comparison grids of visualizations and the per-cell report table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width of the white rule between and around cells, in pixels.
pub const SEPARATOR: usize = 2;

/// Composites `[3, h, w]` cells row-major onto a white canvas of
/// `cols·w + (cols+1)·SEPARATOR` by `rows·h + (rows+1)·SEPARATOR` pixels.
pub fn render_grid(cells: &[Vec<Tensor>]) -> Result<Tensor> {
    let first = cells
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::InvalidArgument("grid needs at least one cell".into()))?;
    let cell_shape = first.shape().to_vec();
    if cell_shape.len() != 3 || cell_shape[0] != 3 {
        return Err(Error::shape("render_grid", "cell", format!("expected [3, h, w], got {cell_shape:?}")));
    }
    let (h, w) = (cell_shape[1], cell_shape[2]);
    let cols = cells[0].len();
    for (r, row) in cells.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::shape("render_grid", "columns", format!("row {r} has {} cells, row 0 has {cols}", row.len())));
        }
        if let Some((c, cell)) = row.iter().enumerate().find(|(_, t)| t.shape() != cell_shape.as_slice()) {
            return Err(Error::shape(
                "render_grid",
                "resolution",
                format!("cell ({r}, {c}) is {:?}, expected {cell_shape:?}", cell.shape()),
            ));
        }
    }
    let rows = cells.len();
    let gw = cols * w + (cols + 1) * SEPARATOR;
    let gh = rows * h + (rows + 1) * SEPARATOR;
    let mut out = vec![1.0f32; 3 * gw * gh];
    for (r, row) in cells.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let (oy, ox) = (SEPARATOR + r * (h + SEPARATOR), SEPARATOR + c * (w + SEPARATOR));
            let d = cell.data();
            for ch in 0..3 {
                for y in 0..h {
                    let src = &d[ch * h * w + y * w..ch * h * w + (y + 1) * w];
                    let dst = ch * gw * gh + (oy + y) * gw + ox;
                    out[dst..dst + w].copy_from_slice(src);
                }
            }
        }
    }
    Tensor::new([3, gh, gw], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    /// Path of the visualization this cell shows, relative to the output root.
    pub source: String,
    pub checkpoint_id: String,
    pub foreground_energy: f64,
}

/// Sidecar describing a rendered grid: labels, geometry and cell provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub caption: String,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub cell_width: usize,
    pub cell_height: usize,
    pub separator: usize,
    pub cells: Vec<Vec<GridCell>>,
}

impl GridReport {
    pub fn image_size(&self) -> (usize, usize) {
        (
            self.columns.len() * self.cell_width + (self.columns.len() + 1) * self.separator,
            self.rows.len() * self.cell_height + (self.rows.len() + 1) * self.separator,
        )
    }
}

/// `report.csv`: one line per grid cell.
pub fn report_csv(grids: &[(&str, &GridReport)]) -> String {
    let mut out = String::from("figure,row,class,foreground_energy,source\n");
    for (figure, grid) in grids {
        for (row, cells) in grid.rows.iter().zip(&grid.cells) {
            for (class, cell) in grid.columns.iter().zip(cells) {
                writeln!(out, "{figure},{row},{class},{},{}", cell.foreground_energy, cell.source).expect("write to string");
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_gets_a_border() {
        let cell = Tensor::zeros([3, 3, 2]);
        let g = render_grid(&[vec![cell]]).unwrap();
        assert_eq!(g.shape(), &[3, 7, 6]);
        let plane = &g.data()[..42];
        let dark = plane.iter().filter(|&&v| v == 0.0).count();
        assert_eq!(dark, 6);
        assert_eq!(plane[2 * 6 + 2], 0.0);
        assert_eq!(plane[6 + 2], 1.0);
    }

    #[test]
    fn four_by_four_geometry() {
        let cells: Vec<Vec<Tensor>> = (0..4).map(|_| (0..4).map(|_| Tensor::zeros([3, 64, 64])).collect()).collect();
        let g = render_grid(&cells).unwrap();
        assert_eq!(g.shape(), &[3, 4 * 64 + 5 * 2, 4 * 64 + 5 * 2]);
    }

    #[test]
    fn cells_land_in_order() {
        let cells = vec![(0..3).map(|i| Tensor::full([3, 1, 1], i as f32 / 4.0)).collect::<Vec<_>>()];
        let g = render_grid(&cells).unwrap();
        let w = 3 + 4 * SEPARATOR;
        let row = &g.data()[SEPARATOR * w..SEPARATOR * w + w];
        assert_eq!((row[2], row[5], row[8]), (0.0, 0.25, 0.5));
    }

    #[test]
    fn mixed_resolutions_are_rejected() {
        let cells = vec![vec![Tensor::zeros([3, 4, 4]), Tensor::zeros([3, 5, 4])]];
        assert!(render_grid(&cells).is_err());
        assert!(render_grid(&[]).is_err());
    }
}
