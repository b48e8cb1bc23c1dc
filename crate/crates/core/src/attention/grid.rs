use crate::tensor::{Result, Tensor, TensorError};

/// Patch coordinates of a `grid_h × grid_w` raster with all pairwise offsets
/// and their quadratic encodings.
///
/// Coordinates are `(row, col)` in patch units; patch `i` sits at
/// `(i / grid_w, i % grid_w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    grid_h: usize,
    grid_w: usize,
    positions: Vec<[i64; 2]>,
    delta: Vec<[i64; 2]>,
    encoding: Tensor,
}

impl PatchGrid {
    pub fn new(grid_h: usize, grid_w: usize) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 {
            return Err(TensorError::Dimension {
                op: "build_patch_grid",
                msg: format!("grid must be at least 1×1, got {grid_h}×{grid_w}"),
            });
        }
        let positions: Vec<[i64; 2]> = (0..grid_h * grid_w)
            .map(|i| [(i / grid_w) as i64, (i % grid_w) as i64])
            .collect();
        let n = positions.len();
        let mut delta = Vec::with_capacity(n * n);
        let mut enc = Vec::with_capacity(n * n * 3);
        for pi in &positions {
            for pj in &positions {
                let d = [pj[0] - pi[0], pj[1] - pi[1]];
                delta.push(d);
                enc.extend_from_slice(&[(d[0] * d[0] + d[1] * d[1]) as f64, d[0] as f64, d[1] as f64]);
            }
        }
        Ok(Self {
            grid_h,
            grid_w,
            positions,
            delta,
            encoding: Tensor::new(vec![n, n, 3], enc)?,
        })
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[i64; 2]] {
        &self.positions
    }

    /// `δ_ij = p_j − p_i`.
    pub fn delta(&self, i: usize, j: usize) -> [i64; 2] {
        self.delta[i * self.len() + j]
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let d = self.delta(i, j);
        ((d[0] * d[0] + d[1] * d[1]) as f64).sqrt()
    }

    /// `r_ij = [‖δ_ij‖², δ_ij,0, δ_ij,1]`.
    pub fn encoding(&self, i: usize, j: usize) -> [f64; 3] {
        let k = (i * self.len() + j) * 3;
        let e = &self.encoding.data()[k..k + 3];
        [e[0], e[1], e[2]]
    }

    /// N×N×3 encoding tensor.
    pub fn encodings(&self) -> &Tensor {
        &self.encoding
    }

    /// Encodings flattened to an N²×3 matrix, row `i·N + j` holding `r_ij`.
    pub fn encodings_flat(&self) -> Tensor {
        let n = self.len();
        self.encoding
            .reshaped(vec![n * n, 3])
            .expect("encoding buffer is N·N·3")
    }

    /// Index of the patch at `position_i + offset`, if it lies on the grid.
    pub fn offset_target(&self, i: usize, offset: [i64; 2]) -> Option<usize> {
        let p = self.positions[i];
        let (r, c) = (p[0] + offset[0], p[1] + offset[1]);
        if r < 0 || c < 0 || r >= self.grid_h as i64 || c >= self.grid_w as i64 {
            None
        } else {
            Some(r as usize * self.grid_w + c as usize)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_patch() {
        let g = PatchGrid::new(1, 1).unwrap();
        assert_eq!(g.encodings().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(PatchGrid::new(0, 3).is_err());
        assert!(PatchGrid::new(3, 0).is_err());
    }

    #[test]
    fn encoding_of_unit_diagonal_offset() {
        // patch 1 at (0,1), patch 4 at (1,0) on a 3×3 grid: δ = (1, −1)
        let g = PatchGrid::new(3, 3).unwrap();
        assert_eq!(g.delta(1, 3), [1, -1]);
        assert_eq!(g.encoding(1, 3), [2.0, 1.0, -1.0]);
    }

    #[test]
    fn two_by_two_symmetry_all_pairs() {
        let g = PatchGrid::new(2, 2).unwrap();
        for i in 0..4 {
            assert_eq!(g.delta(i, i), [0, 0]);
            for j in 0..4 {
                let (a, b) = (g.encoding(i, j), g.encoding(j, i));
                assert_eq!(a[0], b[0]);
                assert_eq!(a[1], -b[1]);
                assert_eq!(a[2], -b[2]);
                let d = g.delta(i, j);
                assert_eq!(a[0], (d[0] * d[0] + d[1] * d[1]) as f64);
            }
        }
    }

    #[test]
    fn raster_positions() {
        let g = PatchGrid::new(2, 3).unwrap();
        assert_eq!(g.positions(), &[[0, 0], [0, 1], [0, 2], [1, 0], [1, 1], [1, 2]]);
        assert_eq!(g.offset_target(0, [1, 2]), Some(5));
        assert_eq!(g.offset_target(0, [-1, 0]), None);
    }
}
