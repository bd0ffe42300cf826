//! Coarse-graining cells and cell-averaged densities.

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GridError {
    #[error("grids must have at least 2 cells per axis, got {0}")]
    TooFewCells(usize),
    #[error("grid bounds must be increasing")]
    BadBounds,
    #[error("field has {got} values but the grid has {want} cells")]
    LengthMismatch { got: usize, want: usize },
    #[error("negative density {value:.3e} in cell {cell}")]
    NegativeValue { cell: usize, value: f64 },
    #[error("field mass {mass} deviates from 1 by more than 1e-9")]
    NotNormalized { mass: f64 },
}

/// A uniform partition of an axis-aligned box into coarse-graining cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseGrid<const D: usize> {
    lo: [f64; D],
    hi: [f64; D],
    cells: [usize; D],
}

impl<const D: usize> CoarseGrid<D> {
    pub fn new(lo: [f64; D], hi: [f64; D], cells: [usize; D]) -> Result<Self, GridError> {
        for d in 0..D {
            if cells[d] < 2 {
                return Err(GridError::TooFewCells(cells[d]));
            }
            if !(hi[d] > lo[d]) {
                return Err(GridError::BadBounds);
            }
        }
        Ok(CoarseGrid { lo, hi, cells })
    }

    /// Square grid with `cells` per axis.
    pub fn square(lo: f64, hi: f64, cells: usize) -> Result<Self, GridError> {
        Self::new([lo; D], [hi; D], [cells; D])
    }

    pub fn lo(&self) -> [f64; D] {
        self.lo
    }

    pub fn hi(&self) -> [f64; D] {
        self.hi
    }

    pub fn cells_per_axis(&self) -> [usize; D] {
        self.cells
    }

    pub fn cell_count(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn cell_widths(&self) -> [f64; D] {
        std::array::from_fn(|d| (self.hi[d] - self.lo[d]) / self.cells[d] as f64)
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_widths().iter().product()
    }

    pub fn domain_volume(&self) -> f64 {
        (0..D).map(|d| self.hi[d] - self.lo[d]).product()
    }

    /// Flat index of the cell containing `q`, or `None` outside the grid.
    /// The upper boundary belongs to the last cell.
    pub fn cell_of(&self, q: [f64; D]) -> Option<usize> {
        let mut flat = 0usize;
        for d in 0..D {
            if q[d] < self.lo[d] || q[d] > self.hi[d] {
                return None;
            }
            let w = (self.hi[d] - self.lo[d]) / self.cells[d] as f64;
            let i = (((q[d] - self.lo[d]) / w) as usize).min(self.cells[d] - 1);
            flat = flat * self.cells[d] + i;
        }
        Some(flat)
    }

    /// Bounds of the cell with flat index `idx`.
    pub fn cell_bounds(&self, idx: usize) -> ([f64; D], [f64; D]) {
        let mut rem = idx;
        let mut coord = [0usize; D];
        for d in (0..D).rev() {
            coord[d] = rem % self.cells[d];
            rem /= self.cells[d];
        }
        let w = self.cell_widths();
        let lo = std::array::from_fn(|d| self.lo[d] + coord[d] as f64 * w[d]);
        let hi = std::array::from_fn(|d| self.lo[d] + (coord[d] + 1) as f64 * w[d]);
        (lo, hi)
    }

    /// Grid with twice the cells per axis over the same bounds.
    pub fn refined(&self) -> Self {
        CoarseGrid {
            lo: self.lo,
            hi: self.hi,
            cells: std::array::from_fn(|d| self.cells[d] * 2),
        }
    }
}

/// Nonnegative per-cell densities normalized over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField<const D: usize> {
    grid: CoarseGrid<D>,
    values: Vec<f64>,
}

impl<const D: usize> DensityField<D> {
    /// Validates nonnegativity and unit mass (to 1e-9).
    pub fn new(grid: CoarseGrid<D>, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.cell_count() {
            return Err(GridError::LengthMismatch {
                got: values.len(),
                want: grid.cell_count(),
            });
        }
        let vol = grid.cell_volume();
        let mut mass = 0.0;
        for (i, &v) in values.iter().enumerate() {
            if v < 0.0 {
                return Err(GridError::NegativeValue { cell: i, value: v });
            }
            mass += v * vol;
        }
        if (mass - 1.0).abs() > 1e-9 {
            return Err(GridError::NotNormalized { mass });
        }
        Ok(DensityField { grid, values })
    }

    pub fn grid(&self) -> &CoarseGrid<D> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}
