use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Align-corners bilinear resize of a rank-2 map.
///
/// Destination index `i` samples source coordinate `i·(src−1)/(dst−1)`;
/// a one-pixel axis on either side samples source coordinate 0.
pub fn bilinear_upsample(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = match map.shape().dims() {
        &[h, w] => (h, w),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "bilinear resampling needs a rank-2 map, got {other:?}"
            )))
        }
    };
    let out_shape = Shape::new(vec![out_h, out_w])?;
    let ys: Vec<(usize, usize, f64)> = (0..out_h).map(|i| axis_sample(i, h, out_h)).collect();
    let xs: Vec<(usize, usize, f64)> = (0..out_w).map(|j| axis_sample(j, w, out_w)).collect();
    let src = map.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            let top = lerp(src[y0 * w + x0], src[y0 * w + x1], tx);
            let bottom = lerp(src[y1 * w + x0], src[y1 * w + x1], tx);
            out.push(lerp(top, bottom, ty));
        }
    }
    Tensor::new(out_shape, out)
}

fn axis_sample(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    if src_len == 1 || dst_len == 1 {
        return (0, 0, 0.0);
    }
    let pos = dst as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64;
    let lo = (pos.floor() as usize).min(src_len - 1);
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map2(h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(Shape::new(vec![h, w]).unwrap(), data).unwrap()
    }

    #[test]
    fn single_pixel_broadcasts() {
        let out = bilinear_upsample(&map2(1, 1, vec![5.0]), 3, 3).unwrap();
        assert_eq!(out.data(), &[5.0; 9]);
    }

    #[test]
    fn horizontal_midpoint() {
        let out = bilinear_upsample(&map2(2, 2, vec![0.0, 1.0, 0.0, 1.0]), 2, 3).unwrap();
        assert_eq!(out.data(), &[0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn same_size_is_identity() {
        let m = map2(2, 3, vec![1.0, -2.0, 3.5, 0.0, 7.0, 2.0]);
        assert_eq!(bilinear_upsample(&m, 2, 3).unwrap(), m);
    }

    #[test]
    fn exact_on_affine_ramp() {
        let m = map2(
            3,
            4,
            (0..12).map(|k| 2.0 * (k / 4) as f64 - 0.5 * (k % 4) as f64).collect(),
        );
        let out = bilinear_upsample(&m, 7, 10).unwrap();
        for i in 0..7 {
            for j in 0..10 {
                let y = i as f64 * 2.0 / 6.0;
                let x = j as f64 * 3.0 / 9.0;
                assert!((out.get(&[i, j]) - (2.0 * y - 0.5 * x)).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn output_within_input_bounds(
            h in 1usize..6, w in 1usize..6, oh in 1usize..12, ow in 1usize..12,
            vals in prop::collection::vec(-10.0f64..10.0, 36),
        ) {
            let m = map2(h, w, vals[..h * w].to_vec());
            let (lo, hi) = m.min_max();
            let out = bilinear_upsample(&m, oh, ow).unwrap();
            for &v in out.data() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
