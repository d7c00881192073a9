/// Dense 2-D map of `f64`, row-major, shape `(height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Map2 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Map2 {
    pub fn zeros(height: usize, width: usize) -> Self {
        Map2 { height, width, data: vec![0.0; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width, "map data length does not match shape");
        Map2 { height, width, data }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Min-max normalization into `[0, 1]`. A constant map becomes all zeros.
    pub fn min_max_normalized(&self) -> Map2 {
        let (lo, hi) = self.min_max();
        let range = hi - lo;
        let data = if self.data.is_empty() || !(range > 0.0) {
            vec![0.0; self.data.len()]
        } else {
            self.data.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
        };
        Map2 { height: self.height, width: self.width, data }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_normalizes_to_zero() {
        let m = Map2::from_vec(2, 2, vec![3.0; 4]);
        assert_eq!(m.min_max_normalized().data, vec![0.0; 4]);
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent_and_bounded(v in prop::collection::vec(-1e3f64..1e3, 1..64)) {
            let m = Map2::from_vec(1, v.len(), v);
            let once = m.min_max_normalized();
            prop_assert!(once.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
            let twice = once.min_max_normalized();
            for (a, b) in once.data.iter().zip(&twice.data) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
