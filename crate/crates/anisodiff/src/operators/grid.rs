//! Uniform periodic grids (the torus surrogate for R^N) and real fields.

use std::io::{Read, Write};

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"ANIF";
const VERSION: u32 = 1;
const CSV_NODE_CAP: usize = 1_000_000;

/// Uniform tensor grid on the torus prod_j [-L_j/2, L_j/2), row-major
/// flattening with the last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicGrid {
    dims: Vec<usize>,
    lengths: Vec<f64>,
}

impl PeriodicGrid {
    pub fn new(dims: Vec<usize>, lengths: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 {
            return Err(Error::InvalidGrid(format!(
                "grid dimension {} outside the supported range 1..=3",
                dims.len()
            )));
        }
        if dims.len() != lengths.len() {
            return Err(Error::InvalidGrid(format!(
                "{} axis counts vs {} extents",
                dims.len(),
                lengths.len()
            )));
        }
        for &n in &dims {
            if n < 8 || n % 2 != 0 {
                return Err(Error::InvalidGrid(format!(
                    "axis count {n} must be even and at least 8"
                )));
            }
        }
        for &l in &lengths {
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::InvalidGrid(format!("extent {l} must be positive")));
            }
        }
        Ok(Self { dims, lengths })
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    /// Total number of nodes.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.lengths[axis] / self.dims[axis] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.ndim()).map(|a| self.spacing(a)).product()
    }

    /// Node coordinate along `axis`: x = -L/2 + i dx.
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        -0.5 * self.lengths[axis] + i as f64 * self.spacing(axis)
    }

    /// Physical Fourier frequency 2 pi kappa / L with kappa wrapped to
    /// -n/2 .. n/2 - 1.
    pub fn freq(&self, axis: usize, k: usize) -> f64 {
        let n = self.dims[axis] as i64;
        let k = k as i64;
        let kappa = if k < (n + 1) / 2 { k } else { k - n };
        2.0 * std::f64::consts::PI * kappa as f64 / self.lengths[axis]
    }

    pub fn index_to_multi(&self, flat: usize) -> Vec<usize> {
        let mut multi = vec![0usize; self.ndim()];
        let mut rest = flat;
        for axis in (0..self.ndim()).rev() {
            multi[axis] = rest % self.dims[axis];
            rest /= self.dims[axis];
        }
        multi
    }

    pub fn multi_to_index(&self, multi: &[usize]) -> usize {
        let mut flat = 0usize;
        for (axis, &i) in multi.iter().enumerate() {
            flat = flat * self.dims[axis] + i;
        }
        flat
    }

    /// Coordinates of the node at flat index.
    pub fn node_coords(&self, flat: usize) -> Vec<f64> {
        let multi = self.index_to_multi(flat);
        (0..self.ndim()).map(|a| self.coord(a, multi[a])).collect()
    }
}

/// Compensated (Kahan) sum; the accumulation error stays O(eps) independent
/// of the number of terms.
pub(crate) fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for v in values {
        let y = v - carry;
        let t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Real scalar field on a periodic grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub grid: PeriodicGrid,
    pub data: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: PeriodicGrid) -> Self {
        let n = grid.len();
        Self {
            grid,
            data: vec![0.0; n],
        }
    }

    pub fn from_fn(grid: PeriodicGrid, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(grid.len());
        for flat in 0..grid.len() {
            let v = f(&grid.node_coords(flat));
            if !v.is_finite() {
                return Err(Error::NonFinite("field construction"));
            }
            data.push(v);
        }
        Ok(Self { grid, data })
    }

    pub fn mass(&self) -> f64 {
        kahan_sum(self.data.iter().copied()) * self.grid.cell_volume()
    }

    pub fn mean(&self) -> f64 {
        kahan_sum(self.data.iter().copied()) / self.data.len() as f64
    }

    pub fn l1_norm(&self) -> f64 {
        kahan_sum(self.data.iter().map(|v| v.abs())) * self.grid.cell_volume()
    }

    pub fn l2_norm(&self) -> f64 {
        (kahan_sum(self.data.iter().map(|v| v * v)) * self.grid.cell_volume()).sqrt()
    }

    pub fn linf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.data.iter().fold(f64::INFINITY, |m, v| m.min(*v))
    }

    pub fn max(&self) -> f64 {
        self.data.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v))
    }

    /// Flat binary serialization: magic, version, dims, counts, extents,
    /// little-endian f64 payload in row-major order.
    pub fn write_binary<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(self.grid.ndim() as u32).to_le_bytes())?;
        for &n in self.grid.dims() {
            out.write_all(&(n as u64).to_le_bytes())?;
        }
        for &l in self.grid.lengths() {
            out.write_all(&l.to_le_bytes())?;
        }
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(input: &mut R) -> Result<Self> {
        let bad = |msg: &str| Error::InvalidGrid(format!("field deserialization: {msg}"));
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32buf = [0u8; 4];
        input.read_exact(&mut u32buf)?;
        if u32::from_le_bytes(u32buf) != VERSION {
            return Err(bad("unsupported version"));
        }
        input.read_exact(&mut u32buf)?;
        let ndim = u32::from_le_bytes(u32buf) as usize;
        if ndim == 0 || ndim > 3 {
            return Err(bad("dimension out of range"));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut u64buf = [0u8; 8];
        for _ in 0..ndim {
            input.read_exact(&mut u64buf)?;
            dims.push(u64::from_le_bytes(u64buf) as usize);
        }
        let mut lengths = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            input.read_exact(&mut u64buf)?;
            lengths.push(f64::from_le_bytes(u64buf));
        }
        let grid = PeriodicGrid::new(dims, lengths)?;
        let mut data = Vec::with_capacity(grid.len());
        for _ in 0..grid.len() {
            input.read_exact(&mut u64buf)?;
            let v = f64::from_le_bytes(u64buf);
            if !v.is_finite() {
                return Err(Error::NonFinite("field deserialization"));
            }
            data.push(v);
        }
        Ok(Self { grid, data })
    }

    /// CSV dump (coordinates then value); refused on large grids where the
    /// binary format is the right tool.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        if self.grid.len() > CSV_NODE_CAP {
            return Err(Error::InvalidParameter(format!(
                "CSV export capped at {CSV_NODE_CAP} nodes, grid has {}",
                self.grid.len()
            )));
        }
        for axis in 0..self.grid.ndim() {
            write!(out, "x{axis},")?;
        }
        writeln!(out, "u")?;
        for (flat, v) in self.data.iter().enumerate() {
            for x in self.grid.node_coords(flat) {
                write!(out, "{x:.16e},")?;
            }
            writeln!(out, "{v:.16e}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_validation() {
        assert!(PeriodicGrid::new(vec![16], vec![1.0]).is_ok());
        assert!(PeriodicGrid::new(vec![7], vec![1.0]).is_err());
        assert!(PeriodicGrid::new(vec![10], vec![-1.0]).is_err());
        assert!(PeriodicGrid::new(vec![16, 16], vec![1.0]).is_err());
        assert!(PeriodicGrid::new(vec![], vec![]).is_err());
        assert!(PeriodicGrid::new(vec![8, 8, 8, 8], vec![1.0; 4]).is_err());
    }

    #[test]
    fn indexing_round_trip() {
        let g = PeriodicGrid::new(vec![8, 10, 12], vec![1.0, 2.0, 3.0]).unwrap();
        for flat in [0usize, 1, 959, 500, 123] {
            assert_eq!(g.multi_to_index(&g.index_to_multi(flat)), flat);
        }
        // Last axis fastest.
        assert_eq!(g.index_to_multi(1), vec![0, 0, 1]);
        assert_eq!(g.index_to_multi(12), vec![0, 1, 0]);
    }

    #[test]
    fn frequencies_wrap_symmetrically() {
        let g = PeriodicGrid::new(vec![8], vec![2.0 * std::f64::consts::PI]).unwrap();
        let freqs: Vec<f64> = (0..8).map(|k| g.freq(0, k)).collect();
        assert_eq!(freqs, vec![0.0, 1.0, 2.0, 3.0, -4.0, -3.0, -2.0, -1.0]);
    }

    #[test]
    fn coords_span_symmetric_box() {
        let g = PeriodicGrid::new(vec![8], vec![4.0]).unwrap();
        assert_eq!(g.coord(0, 0), -2.0);
        assert_eq!(g.coord(0, 4), 0.0);
        assert!(g.coord(0, 7) < 2.0);
    }

    #[test]
    fn mass_uses_cell_volume() {
        let g = PeriodicGrid::new(vec![16, 8], vec![2.0, 4.0]).unwrap();
        let f = Field::from_fn(g, |_| 3.0).unwrap();
        assert!((f.mass() - 3.0 * 8.0).abs() < 1e-13);
        assert!((f.mean() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn kahan_sum_is_stable() {
        let n = 10_000_000usize;
        let v = 0.1f64;
        let sum = kahan_sum((0..n).map(|_| v));
        assert!((sum - n as f64 * v).abs() < 1e-6);
    }

    #[test]
    fn binary_round_trip() {
        let g = PeriodicGrid::new(vec![8, 10], vec![1.5, 2.5]).unwrap();
        let f = Field::from_fn(g, |x| (x[0] + 2.0 * x[1]).sin()).unwrap();
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        let g2 = Field::read_binary(&mut buf.as_slice()).unwrap();
        assert_eq!(f, g2);
    }

    #[test]
    fn binary_rejects_corruption() {
        let g = PeriodicGrid::new(vec![8], vec![1.0]).unwrap();
        let f = Field::zeros(g);
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(Field::read_binary(&mut buf.as_slice()).is_err());
        let mut buf2 = Vec::new();
        f.write_binary(&mut buf2).unwrap();
        buf2.truncate(buf2.len() - 4);
        assert!(Field::read_binary(&mut buf2.as_slice()).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let g = PeriodicGrid::new(vec![8], vec![1.0]).unwrap();
        let f = Field::from_fn(g, |x| x[0]).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x0,u\n"));
        assert_eq!(text.lines().count(), 9);
    }
}
