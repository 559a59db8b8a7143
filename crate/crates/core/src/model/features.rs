use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};

/// Shared backbone feature map, `H x W x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Array3<f64>);

impl FeatureMap {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: "feature map".into(),
                value: *bad,
            });
        }
        Ok(Self(values))
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.0.dim()
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }

    /// Mean of each row over the width axis: the part sequence, top row first.
    pub fn row_average_pool(&self) -> PartSequence {
        PartSequence(self.0.mean_axis(Axis(1)).expect("non-empty width"))
    }

    /// Mean over all spatial positions, one value per channel.
    pub fn global_average_pool(&self) -> Array1<f64> {
        let (h, w, c) = self.0.dim();
        self.0
            .to_shape((h * w, c))
            .expect("contiguous map")
            .mean_axis(Axis(0))
            .expect("non-empty map")
    }

    /// Channel-wise L2 norm at every spatial position, `H x W`.
    pub fn energy(&self) -> Array2<f64> {
        self.0.map_axis(Axis(2), |v| v.dot(&v).sqrt())
    }
}

/// Row-pooled slices `S_1..S_H` of a feature map, stored `H x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartSequence(pub Array2<f64>);

impl PartSequence {
    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn step(&self, t: usize) -> ndarray::ArrayView1<'_, f64> {
        self.0.row(t)
    }
}

/// Spreads a gradient on the part sequence back over the feature map.
pub fn row_average_pool_backward(
    grad: ArrayView2<f64>,
    dims: (usize, usize, usize),
    out: &mut Array3<f64>,
) {
    let (_, w, _) = dims;
    let scale = 1.0 / w as f64;
    for (mut row, g) in out.outer_iter_mut().zip(grad.outer_iter()) {
        for mut cell in row.outer_iter_mut() {
            cell.scaled_add(scale, &g);
        }
    }
}

/// Spreads a gradient on a globally pooled vector back over the feature map.
pub fn global_average_pool_backward(
    grad: &Array1<f64>,
    dims: (usize, usize, usize),
    out: &mut Array3<f64>,
) {
    let (h, w, _) = dims;
    let scale = 1.0 / (h * w) as f64;
    for mut row in out.outer_iter_mut() {
        for mut cell in row.outer_iter_mut() {
            cell.scaled_add(scale, grad);
        }
    }
}
