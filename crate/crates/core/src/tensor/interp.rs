//! Bilinear and nearest-neighbour resampling.

use super::{Float, Tensor};
use crate::error::{Error, Result};
use crate::geometry::PixelBox;

/// Source coordinate of output index `o` when mapping `n_in` samples onto
/// `n_out` samples with the first and last samples aligned.
fn source_coord(o: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out <= 1 || n_in <= 1 {
        0.0
    } else {
        (o * (n_in - 1)) as f64 / (n_out - 1) as f64
    }
}

fn lerp<T: Float>(a: T, b: T, t: T) -> T {
    let v = a + (b - a) * t;
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

/// Source coordinate of output index `o` when source sample `i` sits at output
/// position `i·n_out/n_in`; positions past the last sample clamp to it.
fn strided_coord(o: usize, n_in: usize, n_out: usize) -> f64 {
    (o as f64 * n_in as f64 / n_out as f64).min((n_in - 1) as f64)
}

/// Samples the `[H,W]` plane `src` (row stride `stride`) over `region` onto an
/// `out_h × out_w` grid.
fn sample_plane<T: Float>(
    src: &[T],
    stride: usize,
    region: PixelBox,
    out_h: usize,
    out_w: usize,
    out: &mut [T],
) {
    sample_plane_with(src, stride, region, out_h, out_w, out, source_coord)
}

fn sample_plane_with<T: Float>(
    src: &[T],
    stride: usize,
    region: PixelBox,
    out_h: usize,
    out_w: usize,
    out: &mut [T],
    coord: fn(usize, usize, usize) -> f64,
) {
    let (rh, rw) = (region.height(), region.width());
    let xs: Vec<(usize, usize, T)> = (0..out_w)
        .map(|ox| {
            let sx = coord(ox, rw, out_w);
            let x0 = (sx.floor() as usize).min(rw - 1);
            let x1 = (x0 + 1).min(rw - 1);
            (region.x0 + x0, region.x0 + x1, T::from_f64(sx - x0 as f64))
        })
        .collect();
    for oy in 0..out_h {
        let sy = coord(oy, rh, out_h);
        let y0 = (sy.floor() as usize).min(rh - 1);
        let y1 = (y0 + 1).min(rh - 1);
        let fy = T::from_f64(sy - y0 as f64);
        let row0 = &src[(region.y0 + y0) * stride..];
        let row1 = &src[(region.y0 + y1) * stride..];
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let top = lerp(row0[x0], row0[x1], fx);
            let bottom = lerp(row1[x0], row1[x1], fx);
            out[oy * out_w + ox] = lerp(top, bottom, fy);
        }
    }
}

/// Bilinear upsampling of an `[H,W]` map with the align-corners convention.
pub fn bilinear_upsample<T: Float>(
    map: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    if map.ndim() != 2 {
        return Err(Error::Shape(format!(
            "bilinear_upsample expects an [H,W] map, got {:?}",
            map.shape()
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "target size must be positive, got {out_h}x{out_w}"
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = vec![T::ZERO; out_h * out_w];
    sample_plane(map.data(), w, PixelBox::full(w, h), out_h, out_w, &mut out);
    Tensor::new(vec![out_h, out_w], out)
}

/// Bilinear upsampling of a feature map onto the input grid it was computed
/// from: cell `(i, j)` lands on pixel `(i·out_h/H, j·out_w/W)`, the centre of
/// its receptive field for stride-`out/H` convolutions with `(k−1)/2`
/// padding. Pixels beyond the last cell repeat it.
pub fn upsample_to_input<T: Float>(
    map: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    if map.ndim() != 2 {
        return Err(Error::Shape(format!(
            "upsample_to_input expects an [H,W] map, got {:?}",
            map.shape()
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "target size must be positive, got {out_h}x{out_w}"
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = vec![T::ZERO; out_h * out_w];
    sample_plane_with(
        map.data(),
        w,
        PixelBox::full(w, h),
        out_h,
        out_w,
        &mut out,
        strided_coord,
    );
    Tensor::new(vec![out_h, out_w], out)
}

/// Nearest-neighbour upsampling: output pixel `(y, x)` copies source cell
/// `(⌊y·H/out_h⌋, ⌊x·W/out_w⌋)`.
pub fn nearest_upsample<T: Float>(
    map: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    if map.ndim() != 2 {
        return Err(Error::Shape(format!(
            "nearest_upsample expects an [H,W] map, got {:?}",
            map.shape()
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "target size must be positive, got {out_h}x{out_w}"
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let src = map.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = y * h / out_h;
        for x in 0..out_w {
            out.push(src[sy * w + x * w / out_w]);
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

/// Crops `region` out of a `[C,H,W]` image and resizes it bilinearly
/// (align-corners) to `[C,out_h,out_w]`.
pub fn resize_region<T: Float>(
    image: &Tensor<T>,
    region: PixelBox,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    if image.ndim() != 3 {
        return Err(Error::Shape(format!(
            "resize_region expects a [C,H,W] image, got {:?}",
            image.shape()
        )));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if !region.within(w, h) {
        return Err(Error::InvalidArgument(format!(
            "crop {region:?} exceeds image {w}x{h}"
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(
            "target size must be positive".into(),
        ));
    }
    let mut out = vec![T::ZERO; c * out_h * out_w];
    for ch in 0..c {
        sample_plane(
            &image.data()[ch * h * w..(ch + 1) * h * w],
            w,
            region,
            out_h,
            out_w,
            &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w],
        );
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_stays_constant() {
        let m = Tensor::full(&[3, 5], 0.37f32).unwrap();
        let up = bilinear_upsample(&m, 7, 11).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn midpoint_column() {
        let m = Tensor::new(vec![2, 2], vec![0.0f64, 1.0, 0.0, 1.0]).unwrap();
        let up = bilinear_upsample(&m, 2, 3).unwrap();
        assert_eq!(up.data(), &[0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn rejects_zero_target() {
        let m = Tensor::full(&[2, 2], 1.0f32).unwrap();
        assert!(bilinear_upsample(&m, 0, 3).is_err());
    }

    #[test]
    fn nearest_keeps_binary_values() {
        let m = Tensor::new(vec![2, 2], vec![0.0f32, 1.0, 1.0, 0.0]).unwrap();
        let up = nearest_upsample(&m, 4, 4).unwrap();
        assert_eq!(
            up.data(),
            &[0., 0., 1., 1., 0., 0., 1., 1., 1., 1., 0., 0., 1., 1., 0., 0.]
        );
    }

    #[test]
    fn full_region_resize_is_identity() {
        let img = Tensor::new(vec![2, 3, 4], (0..24).map(|v| v as f32 * 0.1).collect()).unwrap();
        let out = resize_region(&img, PixelBox::full(4, 3), 3, 4).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn input_grid_upsampling_places_cells_at_stride_multiples() {
        let mut m = Tensor::<f64>::zeros(&[8, 8]).unwrap();
        m.data_mut()[2 * 8 + 5] = 1.0;
        let up = upsample_to_input(&m, 64, 64).unwrap();
        assert_eq!(up.at(&[16, 40]), 1.0);
        assert_eq!(up.at(&[20, 44]), 0.25);
        assert_eq!(up.at(&[24, 40]), 0.0);
        let same = upsample_to_input(&m, 8, 8).unwrap();
        assert_eq!(same, m);
    }
}
