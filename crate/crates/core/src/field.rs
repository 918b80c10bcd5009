//! Dense per-time, per-path storage.
//!
//! Values are stored time-major so that every regression slice is a
//! contiguous `&[f64]` of length `n_paths`.

use std::ops::{AddAssign, SubAssign};

#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    n_times: usize,
    n_paths: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(n_times: usize, n_paths: usize) -> Self {
        Self { n_times, n_paths, data: vec![0.0; n_times * n_paths] }
    }

    pub fn constant(n_times: usize, n_paths: usize, value: f64) -> Self {
        Self { n_times, n_paths, data: vec![value; n_times * n_paths] }
    }

    /// Builds a field from `f(time_index, path_index)`.
    pub fn from_fn(n_times: usize, n_paths: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n_times * n_paths);
        for i in 0..n_times {
            for p in 0..n_paths {
                data.push(f(i, p));
            }
        }
        Self { n_times, n_paths, data }
    }

    /// Wraps time-major data. Panics if the length does not match.
    pub fn from_vec(n_times: usize, n_paths: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n_times * n_paths, "field data has the wrong length");
        Self { n_times, n_paths, data }
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, time: usize, path: usize) -> f64 {
        self.data[time * self.n_paths + path]
    }

    #[inline]
    pub fn set(&mut self, time: usize, path: usize, value: f64) {
        self.data[time * self.n_paths + path] = value;
    }

    #[inline]
    pub fn slice(&self, time: usize) -> &[f64] {
        &self.data[time * self.n_paths..(time + 1) * self.n_paths]
    }

    #[inline]
    pub fn slice_mut(&mut self, time: usize) -> &mut [f64] {
        &mut self.data[time * self.n_paths..(time + 1) * self.n_paths]
    }

    /// Values of one path across all times.
    pub fn path(&self, path: usize) -> Vec<f64> {
        (0..self.n_times).map(|i| self.get(i, path)).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field { n_times: self.n_times, n_paths: self.n_paths, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scaled(&self, c: f64) -> Field {
        self.map(|v| c * v)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Field) -> bool {
        self.n_times == other.n_times && self.n_paths == other.n_paths
    }

    pub fn difference(&self, other: &Field) -> Field {
        assert!(self.same_shape(other), "field shapes differ");
        Field {
            n_times: self.n_times,
            n_paths: self.n_paths,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl AddAssign<&Field> for Field {
    fn add_assign(&mut self, rhs: &Field) {
        assert!(self.same_shape(rhs), "field shapes differ");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }
}

impl SubAssign<&Field> for Field {
    fn sub_assign(&mut self, rhs: &Field) {
        assert!(self.same_shape(rhs), "field shapes differ");
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a -= b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_time_major() {
        let f = Field::from_fn(3, 2, |i, p| (10 * i + p) as f64);
        assert_eq!(f.slice(1), &[10.0, 11.0]);
        assert_eq!(f.path(1), vec![1.0, 11.0, 21.0]);
        assert_eq!(f.get(2, 0), 20.0);
    }

    #[test]
    fn arithmetic() {
        let mut a = Field::constant(2, 2, 1.5);
        let b = Field::constant(2, 2, 0.5);
        a += &b;
        assert_eq!(a.max_abs(), 2.0);
        a -= &b;
        assert_eq!(a.difference(&b).as_slice(), &[1.0; 4]);
        assert_eq!(a.scaled(-2.0).max_abs(), 3.0);
    }
}
