//! Feature-map heatmaps: per-position channel energy of `f_b`, scaled to
//! `[0, 1]`, upsampled to the input size and drawn over the image.

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView2, ArrayView3};

use crate::error::{Error, Result};
use crate::model::{Backbone, DeepPerson, FeatureMap};

/// L2 norm over channels at each spatial position.
pub fn energy_map(f_b: &FeatureMap) -> Array2<f64> {
    f_b.energy()
}

/// Min-max scaling to `[0, 1]`. A constant map has no range and becomes all zeros.
pub fn normalize_min_max(map: ArrayView2<f64>) -> Array2<f64> {
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return Array2::zeros(map.dim());
    }
    map.mapv(|v| (v - lo) / range)
}

/// Bilinear resize with aligned corners: output corners sample input corners exactly.
pub fn upsample_bilinear(map: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_out <= 1 || n_in <= 1 {
            return (0, 0, 0.0);
        }
        let src = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, ty) = coord(y, h, out_h);
        let (x0, x1, tx) = coord(x, w, out_w);
        let top = map[[y0, x0]] * (1.0 - tx) + map[[y0, x1]] * tx;
        let bottom = map[[y1, x0]] * (1.0 - tx) + map[[y1, x1]] * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

/// Jet colormap: blue at 0, through cyan, yellow, to red at 1.
pub fn jet(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let channel = |center: f64| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0);
    [channel(3.0), channel(2.0), channel(1.0)].map(|c| (c * 255.0).round() as u8)
}

/// Blends the colored heatmap over `base` with the given opacity.
pub fn render_overlay(base: &RgbImage, heat: ArrayView2<f64>, opacity: f64) -> Result<RgbImage> {
    let (w, h) = base.dimensions();
    if heat.dim() != (h as usize, w as usize) {
        return Err(Error::shape("heatmap", (h, w), heat.dim()));
    }
    if !(0.0..=1.0).contains(&opacity) {
        return Err(Error::Config(format!(
            "heatmap opacity must be in [0, 1], got {opacity}"
        )));
    }
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let color = jet(heat[[y as usize, x as usize]]);
        let px = base.get_pixel(x, y).0;
        Rgb(std::array::from_fn(|c| {
            (px[c] as f64 * (1.0 - opacity) + color[c] as f64 * opacity)
                .round()
                .clamp(0.0, 255.0) as u8
        }))
    }))
}

/// Normalized energy of `f_b` at the input resolution.
pub fn heatmap<B: Backbone>(model: &DeepPerson<B>, image: ArrayView3<f64>) -> Result<Array2<f64>> {
    let f_b = model.backbone_forward(image)?;
    let (h, w, _) = image.dim();
    Ok(upsample_bilinear(
        normalize_min_max(energy_map(&f_b).view()).view(),
        h,
        w,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    #[test]
    fn constant_map_normalizes_to_zero() {
        let f = FeatureMap::new(Array3::from_elem((8, 4, 5), 0.7)).unwrap();
        let e = energy_map(&f);
        assert!(e.iter().all(|&v| (v - e[[0, 0]]).abs() < 1e-15));
        assert!(normalize_min_max(e.view()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalization_spans_unit_interval() {
        let n = normalize_min_max(array![[1.0, 3.0], [2.0, 5.0]].view());
        assert_eq!(n, array![[0.0, 0.5], [0.25, 1.0]]);
    }

    #[test]
    fn corners_survive_upsampling() {
        let grid = Array2::from_shape_fn((8, 4), |(y, x)| (y * 4 + x) as f64 * 0.37 - 1.0);
        let up = upsample_bilinear(grid.view(), 256, 128);
        assert_eq!(up.dim(), (256, 128));
        assert_eq!(up[[0, 0]], grid[[0, 0]]);
        assert_eq!(up[[0, 127]], grid[[0, 3]]);
        assert_eq!(up[[255, 0]], grid[[7, 0]]);
        assert_eq!(up[[255, 127]], grid[[7, 3]]);
    }

    #[test]
    fn upsampling_interpolates_linearly() {
        let up = upsample_bilinear(array![[0.0, 1.0], [2.0, 3.0]].view(), 3, 3);
        assert_eq!(
            up,
            array![[0.0, 0.5, 1.0], [1.0, 1.5, 2.0], [2.0, 2.5, 3.0]]
        );
    }

    #[test]
    fn jet_endpoints() {
        assert_eq!(jet(0.0), [0, 0, 128]);
        assert_eq!(jet(1.0), [128, 0, 0]);
        assert_eq!(jet(0.5), [128, 255, 128]);
    }

    #[test]
    fn overlay_opacity_bounds() {
        let base = RgbImage::from_pixel(2, 2, Rgb([10, 20, 30]));
        let heat = Array2::zeros((2, 2));
        assert_eq!(render_overlay(&base, heat.view(), 0.0).unwrap(), base);
        let full = render_overlay(&base, heat.view(), 1.0).unwrap();
        assert_eq!(full.get_pixel(0, 0).0, jet(0.0));
        assert!(render_overlay(&base, heat.view(), 1.5).is_err());
        assert!(render_overlay(&base, Array2::zeros((3, 2)).view(), 0.5).is_err());
    }
}
