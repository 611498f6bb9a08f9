use crate::config::DerivedDims;
use crate::error::Error;
use crate::numcore::Scalar;

/// Six parallel flat parameter arrays in persisted order.
///
/// The same shape backs weights, gradient accumulators and both Adam
/// moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T = f32> {
    pub conv1_w: Vec<T>,
    pub conv1_b: Vec<T>,
    pub conv2_w: Vec<T>,
    pub conv2_b: Vec<T>,
    pub output_w: Vec<T>,
    pub output_b: Vec<T>,
}

/// Names of the six arrays, matching the exported header symbols.
pub const ARRAY_NAMES: [&str; 6] = [
    "conv1_w", "conv1_b", "conv2_w", "conv2_b", "output_w", "output_b",
];

impl<T: Scalar> ParamSet<T> {
    pub fn zeros(dims: &DerivedDims) -> Self {
        let [a, b, c, d, e, f] = dims.layer_counts();
        Self {
            conv1_w: vec![T::zero(); a],
            conv1_b: vec![T::zero(); b],
            conv2_w: vec![T::zero(); c],
            conv2_b: vec![T::zero(); d],
            output_w: vec![T::zero(); e],
            output_b: vec![T::zero(); f],
        }
    }

    /// Splits a flat parameter vector into the six arrays.
    pub fn from_flat(dims: &DerivedDims, flat: &[T]) -> Result<Self, Error> {
        if flat.len() != dims.total_params {
            return Err(Error::Shape {
                name: "parameters",
                expected: dims.total_params,
                actual: flat.len(),
            });
        }
        let mut set = Self::zeros(dims);
        let mut offset = 0;
        for arr in set.arrays_mut() {
            let n = arr.len();
            arr.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(set)
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.len());
        for arr in self.arrays() {
            out.extend_from_slice(arr);
        }
        out
    }

    pub fn arrays(&self) -> [&[T]; 6] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.output_w,
            &self.output_b,
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut Vec<T>; 6] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.output_w,
            &mut self.output_b,
        ]
    }

    pub fn len(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fill(&mut self, value: T) {
        for arr in self.arrays_mut() {
            arr.fill(value);
        }
    }

    /// Checks every array has the length `dims` requires.
    pub fn check_shape(&self, dims: &DerivedDims) -> Result<(), Error> {
        for ((arr, expected), name) in self
            .arrays()
            .iter()
            .zip(dims.layer_counts())
            .zip(ARRAY_NAMES)
        {
            if arr.len() != expected {
                return Err(Error::Shape {
                    name,
                    expected,
                    actual: arr.len(),
                });
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.arrays()
            .iter()
            .all(|a| a.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> T {
        self.arrays()
            .iter()
            .flat_map(|a| a.iter())
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Converts every element to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let conv = |a: &[T]| {
            a.iter()
                .map(|&v| U::from(v).expect("finite cast"))
                .collect()
        };
        ParamSet {
            conv1_w: conv(&self.conv1_w),
            conv1_b: conv(&self.conv1_b),
            conv2_w: conv(&self.conv2_w),
            conv2_b: conv(&self.conv2_b),
            output_w: conv(&self.output_w),
            output_b: conv(&self.output_b),
        }
    }
}
