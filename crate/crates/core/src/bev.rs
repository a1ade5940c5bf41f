//! Multi-channel bird's-eye-view occupancy rasters.

use crate::nn::Tensor;

/// `channels × rows × cols` binary occupancy. Rows run along +y and columns
/// along +x; `origin` is the (x, y) of the outer corner of cell (0, 0).
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub cell: f64,
    pub origin: (f64, f64),
    pub data: Vec<f64>,
    /// Points that fell outside the window.
    pub dropped: usize,
}

impl BevGrid {
    pub fn new(channels: usize, rows: usize, cols: usize, cell: f64, origin: (f64, f64)) -> Self {
        Self {
            channels,
            rows,
            cols,
            cell,
            origin,
            data: vec![0.0; channels * rows * cols],
            dropped: 0,
        }
    }

    /// Window of `rows × cols` cells centered on `(cx, cy)`.
    pub fn centered(channels: usize, rows: usize, cols: usize, cell: f64, cx: f64, cy: f64) -> Self {
        let origin = (cx - 0.5 * cols as f64 * cell, cy - 0.5 * rows as f64 * cell);
        Self::new(channels, rows, cols, cell, origin)
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.origin.0) / self.cell).floor();
        let r = ((y - self.origin.1) / self.cell).floor();
        if c < 0.0 || r < 0.0 || c >= self.cols as f64 || r >= self.rows as f64 {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }

    /// Marks the cell under `(x, y)` in `channel`; returns false and counts a
    /// drop when the point is outside the window.
    pub fn mark(&mut self, channel: usize, x: f64, y: f64) -> bool {
        match self.cell_of(x, y) {
            Some((r, c)) => {
                self.data[(channel * self.rows + r) * self.cols + c] = 1.0;
                true
            }
            None => {
                self.dropped += 1;
                false
            }
        }
    }

    pub fn get(&self, channel: usize, r: usize, c: usize) -> f64 {
        self.data[(channel * self.rows + r) * self.cols + c]
    }

    /// Continuous (column, row) index of a point, with cell centers at integers.
    pub fn continuous_index(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin.0) / self.cell - 0.5,
            (y - self.origin.1) / self.cell - 0.5,
        )
    }

    pub fn occupied(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.channels, self.rows, self.cols], self.data.clone())
            .expect("grid dimensions match data")
    }
}

/// Occupied-cell list of a [`BevGrid`], for holding many rasters in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrid {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub cell: f64,
    pub origin: (f64, f64),
    pub on: Vec<u32>,
    pub dropped: usize,
}

impl SparseGrid {
    pub fn from_grid(g: &BevGrid) -> Self {
        Self {
            channels: g.channels,
            rows: g.rows,
            cols: g.cols,
            cell: g.cell,
            origin: g.origin,
            on: g
                .data
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(i, _)| i as u32)
                .collect(),
            dropped: g.dropped,
        }
    }

    pub fn to_grid(&self) -> BevGrid {
        let mut g = BevGrid::new(self.channels, self.rows, self.cols, self.cell, self.origin);
        for &i in &self.on {
            g.data[i as usize] = 1.0;
        }
        g.dropped = self.dropped;
        g
    }
}

/// Uniform height bin over `[0, z_max]`; heights outside are clamped to the end bins.
pub fn height_bin(z: f64, bins: usize, z_max: f64) -> usize {
    let b = (z / z_max * bins as f64).floor();
    if b < 0.0 {
        0
    } else {
        (b as usize).min(bins - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_round_trip() {
        let mut g = BevGrid::centered(3, 8, 16, 0.5, 1.0, -2.0);
        g.mark(0, 1.1, -2.2);
        g.mark(2, -2.0, -1.0);
        g.mark(1, 100.0, 0.0);
        let s = SparseGrid::from_grid(&g);
        assert_eq!(s.on.len(), 2);
        assert_eq!(s.to_grid(), g);
    }

    #[test]
    fn binning() {
        assert_eq!(height_bin(0.0, 4, 3.0), 0);
        assert_eq!(height_bin(0.76, 4, 3.0), 1);
        assert_eq!(height_bin(2.99, 4, 3.0), 3);
        assert_eq!(height_bin(5.0, 4, 3.0), 3);
        assert_eq!(height_bin(-1.0, 4, 3.0), 0);
    }

    #[test]
    fn centered_window_indexing() {
        let mut g = BevGrid::centered(1, 4, 6, 0.5, 10.0, -2.0);
        assert_eq!(g.origin, (8.5, -3.0));
        assert_eq!(g.cell_of(10.0, -2.0), Some((2, 3)));
        assert_eq!(g.continuous_index(10.0, -2.0), (2.5, 1.5));
        assert!(!g.mark(0, 100.0, 0.0));
        assert_eq!(g.dropped, 1);
        assert!(g.mark(0, 8.6, -2.9));
        assert_eq!(g.get(0, 0, 0), 1.0);
    }
}
