//! Dense row-major tensor of 32-bit floats.
//!
//! Axis 0 is time for sequence data: a `[T, F]` tensor holds `T` frames of
//! `F` features each, with frames contiguous in memory so streaming can
//! append whole frames cheaply. Tensors are immutable values after
//! construction and safe to share across threads.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// All-zero tensor. Every shape entry must be >= 1.
    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        check_shape(shape)?;
        let numel = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        })
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        check_shape(&shape)?;
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::InvalidShape(format!(
                "data length {} does not match shape {:?} (= {} elements)",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Shape of a single frame: all axes but the leading (time) one.
    pub fn frame_shape(&self) -> &[usize] {
        &self.shape[1..]
    }

    /// Number of elements in one frame (product of the non-time axes).
    pub fn frame_numel(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Row-major element access; index length must equal the rank.
    pub fn at(&self, index: &[usize]) -> f32 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat]
    }

    /// Frames `[start, start+len)` along axis 0; other axes unchanged.
    pub fn slice_time(&self, start: usize, len: usize) -> Result<Tensor> {
        let t = self.shape[0];
        if len == 0 || start + len > t {
            return Err(Error::OutOfRange(format!(
                "time slice [{start}, {}) of a length-{t} sequence",
                start + len
            )));
        }
        let row = self.frame_numel();
        let mut shape = self.shape.clone();
        shape[0] = len;
        let data = self.data[start * row..(start + len) * row].to_vec();
        Tensor::from_vec(shape, data)
    }

    /// Pads with zero frames on the left (past side) up to `total_len` frames.
    pub fn zero_left_pad_time(&self, total_len: usize) -> Result<Tensor> {
        let t = self.shape[0];
        if total_len < t {
            return Err(Error::OutOfRange(format!(
                "cannot pad a length-{t} sequence down to {total_len} frames"
            )));
        }
        let row = self.frame_numel();
        let mut shape = self.shape.clone();
        shape[0] = total_len;
        let mut data = vec![0.0; total_len * row];
        data[(total_len - t) * row..].copy_from_slice(&self.data);
        Tensor::from_vec(shape, data)
    }

    /// Same data viewed under a different shape (element counts must match).
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    /// True when both tensors have identical shape and bit-identical data.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::InvalidShape(
            "shape must have at least one axis".into(),
        ));
    }
    if let Some(bad) = shape.iter().position(|&d| d == 0) {
        return Err(Error::InvalidShape(format!(
            "shape {shape:?} has a zero-sized axis {bad}"
        )));
    }
    Ok(())
}

/// Largest elementwise absolute difference. Returns infinity when shapes
/// differ or any compared value is not finite, so callers comparing against
/// a tolerance fail closed.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    if a.shape != b.shape {
        return f32::INFINITY;
    }
    let mut worst = 0.0f32;
    for (x, y) in a.data.iter().zip(&b.data) {
        if !x.is_finite() || !y.is_finite() {
            return f32::INFINITY;
        }
        let d = (x - y).abs();
        if d > worst {
            worst = d;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_fills_with_zero() {
        let t = Tensor::zeros(&[3, 3]).unwrap();
        assert_eq!(t.shape(), &[3, 3]);
        assert!(t.data().iter().all(|&x| x == 0.0));

        let one = Tensor::zeros(&[1]).unwrap();
        assert_eq!(one.data(), &[0.0]);
    }

    #[test]
    fn zeros_rejects_degenerate_shapes() {
        assert!(matches!(
            Tensor::zeros(&[2, 0]),
            Err(Error::InvalidShape(_))
        ));
        assert!(matches!(Tensor::zeros(&[]), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn from_vec_rejects_length_mismatch() {
        assert!(Tensor::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn row_major_indexing_matches_naive_reader() {
        // (i, j) of a [T, F] tensor must live at data[i*F + j].
        let data: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let t = Tensor::from_vec(vec![4, 3], data.clone()).unwrap();
        let mut flat = 0;
        for i in 0..4 {
            for j in 0..3 {
                assert_eq!(t.at(&[i, j]), data[flat]);
                flat += 1;
            }
        }
    }

    #[test]
    fn slice_time_identity() {
        let t = Tensor::from_vec(vec![6, 3], (0..18).map(|i| i as f32).collect()).unwrap();
        let s = t.slice_time(0, 6).unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn slice_time_window() {
        // Last 3 frames of a 6-frame sequence: the window a 3-wide kernel
        // sees at the final step.
        let t = Tensor::from_vec(vec![6, 3], (0..18).map(|i| i as f32).collect()).unwrap();
        let s = t.slice_time(3, 3).unwrap();
        assert_eq!(s.shape(), &[3, 3]);
        assert_eq!(s.data(), &t.data()[9..]);
    }

    #[test]
    fn slice_time_out_of_range() {
        let t = Tensor::zeros(&[6, 3]).unwrap();
        assert!(matches!(t.slice_time(5, 2), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn zero_left_pad_prepends_zero_frames() {
        let t = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = t.zero_left_pad_time(4).unwrap();
        assert_eq!(p.shape(), &[4, 2]);
        assert_eq!(p.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        assert!(t.zero_left_pad_time(1).is_err());
    }

    #[test]
    fn max_abs_diff_fails_closed() {
        let a = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![1.0, 2.5]).unwrap();
        assert_eq!(max_abs_diff(&a, &b), 0.5);

        let c = Tensor::from_vec(vec![3], vec![0.0; 3]).unwrap();
        assert_eq!(max_abs_diff(&a, &c), f32::INFINITY);

        let n = Tensor::from_vec(vec![2], vec![f32::NAN, 0.0]).unwrap();
        assert_eq!(max_abs_diff(&a, &n), f32::INFINITY);
    }
}
