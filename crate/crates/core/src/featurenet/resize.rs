use crate::math;
use crate::tensor::Array3;

/// Bilinear resampling with half-pixel centres and edge clamping.
///
/// Interpolation is written as `a + t·(b − a)` so that constant regions stay
/// bitwise constant.
pub fn resize_bilinear(src: &Array3, out_h: usize, out_w: usize) -> Array3 {
    let (c, h, w) = src.shape();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let ys = sample_positions(h, out_h);
    let xs = sample_positions(w, out_w);
    let mut out = Array3::zeros(c, out_h, out_w);
    for ci in 0..c {
        let plane = src.plane(ci);
        let dst = out.plane_mut(ci);
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], tx);
                let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], tx);
                dst[oy * out_w + ox] = lerp(top, bottom, ty);
            }
        }
    }
    out
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

fn sample_positions(input: usize, output: usize) -> alloc::vec::Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (math::floor(src) as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let t = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_averages_two_by_two_blocks() {
        let data: alloc::vec::Vec<f64> = (0..16).map(|v| v as f64).collect();
        let a = Array3::from_vec(1, 4, 4, data).unwrap();
        let r = resize_bilinear(&a, 2, 2);
        // block (0,0) holds 0,1,4,5
        assert_eq!(r.get(0, 0, 0), 2.5);
        assert_eq!(r.get(0, 1, 1), 12.5);
    }

    #[test]
    fn constant_stays_constant_for_odd_ratios() {
        let a = Array3::filled(3, 13, 7, 0.1 + 0.2);
        for &(h, w) in &[(5, 3), (26, 14), (9, 11), (1, 1)] {
            let r = resize_bilinear(&a, h, w);
            assert!(r.data().iter().all(|&v| v == 0.1 + 0.2));
        }
    }
}
