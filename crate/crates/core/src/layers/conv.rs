use ndarray::linalg::general_mat_mul;
use ndarray::{
    Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayViewMut1, ArrayViewMut2, Axis,
};
use rand::Rng;

use crate::params::{fan_in_normal, Grads, ParamId, ParamStore};

/// Square-kernel 2-D convolution over height x width x channel tensors,
/// evaluated as an im2col matrix product.
///
/// The kernel is stored as a `(k*k*in_channels) x out_channels` matrix whose
/// row index is `(ky * k + kx) * in_channels + ci`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    input_dims: (usize, usize, usize),
    output_dims: (usize, usize),
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        let weight = store.add(
            format!("{name}.weight"),
            vec![fan_in, out_channels],
            fan_in_normal(rng, fan_in * out_channels, fan_in, 2.0),
        );
        let bias = store.add(
            format!("{name}.bias"),
            vec![out_channels],
            vec![0.0; out_channels],
        );
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let out = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (out(height), out(width))
    }

    fn weight_view<'a>(&self, store: &'a ParamStore) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape(
            (
                self.kernel * self.kernel * self.in_channels,
                self.out_channels,
            ),
            store.get(self.weight),
        )
        .expect("conv weight shape")
    }

    fn im2col(&self, input: &ArrayView3<f64>) -> (Array2<f64>, (usize, usize)) {
        let (h, w, c) = input.dim();
        let (ho, wo) = self.output_size(h, w);
        let k = self.kernel;
        let row_len = k * k * c;
        let mut cols = Array2::<f64>::zeros((ho * wo, row_len));
        let standard = input.as_standard_layout();
        let src = standard.as_slice().expect("standard layout");
        let dst = cols.as_slice_mut().expect("fresh array");
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &mut dst[(oy * wo + ox) * row_len..][..row_len];
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let from = (iy as usize * w + ix as usize) * c;
                        let to = (ky * k + kx) * c;
                        row[to..to + c].copy_from_slice(&src[from..from + c]);
                    }
                }
            }
        }
        (cols, (ho, wo))
    }

    /// Pre-activation output of shape `ho x wo x out_channels`.
    pub fn forward(&self, store: &ParamStore, input: ArrayView3<f64>) -> (Array3<f64>, ConvCache) {
        let input_dims = input.dim();
        let (cols, (ho, wo)) = self.im2col(&input);
        let mut out = cols.dot(&self.weight_view(store));
        out += &ArrayView1::from(store.get(self.bias));
        let out = out
            .into_shape_with_order((ho, wo, self.out_channels))
            .expect("conv output shape");
        (
            out,
            ConvCache {
                cols,
                input_dims,
                output_dims: (ho, wo),
            },
        )
    }

    /// `grad_out` is the gradient w.r.t. the pre-activation output.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ConvCache,
        grad_out: ArrayView3<f64>,
        grads: &mut Grads,
        want_input_grad: bool,
    ) -> Option<Array3<f64>> {
        let (ho, wo) = cache.output_dims;
        let dy = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((ho * wo, self.out_channels))
            .expect("conv grad shape");
        {
            let mut dw = ArrayViewMut2::from_shape(
                (
                    self.kernel * self.kernel * self.in_channels,
                    self.out_channels,
                ),
                grads.get_mut(self.weight),
            )
            .expect("conv weight grad shape");
            general_mat_mul(1.0, &cache.cols.t(), &dy, 1.0, &mut dw);
        }
        {
            let mut db = ArrayViewMut1::from(grads.get_mut(self.bias));
            db += &dy.sum_axis(Axis(0));
        }
        if !want_input_grad {
            return None;
        }
        let dcols = dy.dot(&self.weight_view(store).t());
        let (h, w, c) = cache.input_dims;
        let k = self.kernel;
        let row_len = k * k * c;
        let mut dx = Array3::<f64>::zeros((h, w, c));
        let dst = dx.as_slice_mut().expect("fresh array");
        let src = dcols.as_slice().expect("standard layout");
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &src[(oy * wo + ox) * row_len..][..row_len];
                for ky in 0..k {
                    let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let to = (iy as usize * w + ix as usize) * c;
                        let from = (ky * k + kx) * c;
                        for (d, s) in dst[to..to + c].iter_mut().zip(&row[from..from + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
        Some(dx)
    }
}
