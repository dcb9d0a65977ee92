//! Grid-to-pixel geometry and vector distance.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::{ActivationMap, PixelBox, SpatialCell};

/// Pixel rectangle covered by `cell` when an `(h, w)` grid is stretched over an
/// `(H, W)` image by uniform floor tiling: rows `floor(i*H/h)..floor((i+1)*H/h)`.
pub fn upsample_cell_to_box(
    cell: SpatialCell,
    map_shape: (usize, usize),
    image_shape: (usize, usize),
) -> Result<PixelBox> {
    let (h, w) = map_shape;
    let (img_h, img_w) = image_shape;
    if h == 0 || w == 0 {
        return Err(Error::Bounds("empty map shape".into()));
    }
    if img_h < h || img_w < w {
        return Err(Error::Bounds(format!(
            "image {img_h}x{img_w} smaller than map {h}x{w}"
        )));
    }
    if cell.row >= h || cell.col >= w {
        return Err(Error::Bounds(format!(
            "cell ({},{}) outside {h}x{w} map",
            cell.row, cell.col
        )));
    }
    PixelBox::new(
        cell.row * img_h / h,
        cell.col * img_w / w,
        (cell.row + 1) * img_h / h,
        (cell.col + 1) * img_w / w,
    )
}

/// Source coordinate and blend weight for half-pixel-centred resampling.
#[inline]
fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let pos = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5;
    let pos = pos.clamp(0.0, (src_len - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, pos - lo as f64)
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn upsample_map_bilinear<T: Scalar>(
    map: &ActivationMap<T>,
    image_shape: (usize, usize),
) -> Result<ActivationMap<T>> {
    let (h, w) = map.shape();
    let (img_h, img_w) = image_shape;
    if img_h < h || img_w < w {
        return Err(Error::Bounds(format!(
            "target {img_h}x{img_w} smaller than map {h}x{w}"
        )));
    }
    let cols: Vec<_> = (0..img_w).map(|x| source_coord(x, w, img_w)).collect();
    let mut out = Vec::with_capacity(img_h * img_w);
    for y in 0..img_h {
        let (r0, r1, fy) = source_coord(y, h, img_h);
        let fy = T::of(fy);
        for &(c0, c1, fx) in &cols {
            let fx = T::of(fx);
            let top = map.get(r0, c0) * (T::one() - fx) + map.get(r0, c1) * fx;
            let bottom = map.get(r1, c0) * (T::one() - fx) + map.get(r1, c1) * fx;
            out.push(top * (T::one() - fy) + bottom * fy);
        }
    }
    ActivationMap::new(out, img_h, img_w)
}

/// Euclidean distance `||a - b||_2`.
pub fn l2_distance<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::dim("l2 operand", a.len(), b.len()));
    }
    Ok(l2_unchecked(a, b))
}

#[inline]
pub(crate) fn l2_unchecked<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (x, y)| {
            let d = *x - *y;
            acc + d * d
        })
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_cell_covers_image() {
        let b = upsample_cell_to_box(SpatialCell::new(0, 0), (1, 1), (224, 224)).unwrap();
        assert_eq!(b, PixelBox::new(0, 0, 224, 224).unwrap());
    }

    #[test]
    fn uniform_tiling_7x7() {
        let b = upsample_cell_to_box(SpatialCell::new(0, 0), (7, 7), (224, 224)).unwrap();
        assert_eq!(b, PixelBox::new(0, 0, 32, 32).unwrap());
    }

    #[test]
    fn floor_tiling_matches_hand_loop() {
        // rows: 3*210/7 = 90 .. 4*210/7 = 120; cols: 5*30 = 150 .. 180
        let b = upsample_cell_to_box(SpatialCell::new(3, 5), (7, 7), (210, 210)).unwrap();
        assert_eq!(b, PixelBox::new(90, 150, 120, 180).unwrap());
    }

    #[test]
    fn out_of_range_cell_is_bounds_error() {
        let err = upsample_cell_to_box(SpatialCell::new(7, 0), (7, 7), (224, 224)).unwrap_err();
        assert!(matches!(err, Error::Bounds(_)));
        let err = upsample_cell_to_box(SpatialCell::new(0, 0), (7, 7), (5, 224)).unwrap_err();
        assert!(matches!(err, Error::Bounds(_)));
    }

    #[test]
    fn bilinear_constant_map_stays_constant() {
        let m = ActivationMap::new(vec![2.5f64; 6], 2, 3).unwrap();
        let up = upsample_map_bilinear(&m, (7, 11)).unwrap();
        assert!(up.values().iter().all(|v| *v == 2.5));
    }

    #[test]
    fn bilinear_preserves_endpoints() {
        let m = ActivationMap::new(vec![0.0f64, 1.0], 1, 2).unwrap();
        let up = upsample_map_bilinear(&m, (3, 8)).unwrap();
        for r in 0..3 {
            assert_eq!(up.get(r, 0), 0.0);
            assert_eq!(up.get(r, 7), 1.0);
        }
    }

    #[test]
    fn bilinear_checkerboard_centre() {
        let m = ActivationMap::new(vec![0.0f64, 1.0, 1.0, 0.0], 2, 2).unwrap();
        // 4x4: half-pixel sources for the centre block sit at 0.25 / 0.75,
        // so (1,1) = 2*0.75*0.25 = 0.375 and (1,2) = 0.75^2 + 0.25^2 = 0.625.
        let up = upsample_map_bilinear(&m, (4, 4)).unwrap();
        let centre = [up.get(1, 1), up.get(1, 2), up.get(2, 1), up.get(2, 2)];
        assert!((centre[0] - 0.375).abs() < 1e-12);
        assert!((centre[1] - 0.625).abs() < 1e-12);
        assert!((centre.iter().sum::<f64>() / 4.0 - 0.5).abs() < 1e-12);
        // odd target puts a sample exactly on the geometric centre
        let up = upsample_map_bilinear(&m, (3, 3)).unwrap();
        assert!((up.get(1, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bilinear_rejects_shrinking() {
        let m = ActivationMap::new(vec![0.0f32; 4], 2, 2).unwrap();
        assert!(matches!(upsample_map_bilinear(&m, (1, 4)), Err(Error::Bounds(_))));
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_distance(&[1.0f32, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(l2_distance(&[0.0f64, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(matches!(
            l2_distance(&[0.0f32], &[0.0, 1.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn l2_matches_f64_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let a: Vec<f32> = (0..512).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f32> = (0..512).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut acc = 0.0f64;
            for k in 0..512 {
                let d = a[k] as f64 - b[k] as f64;
                acc += d * d;
            }
            let oracle = acc.sqrt();
            let got = l2_distance(&a, &b).unwrap() as f64;
            assert!((got - oracle).abs() <= 1e-6 * oracle.max(1.0), "{got} vs {oracle}");
        }
    }

    proptest! {
        #[test]
        fn boxes_tile_the_image(h in 1usize..12, w in 1usize..12, eh in 0usize..40, ew in 0usize..40) {
            let (img_h, img_w) = (h + eh, w + ew);
            let mut cover = vec![0u32; img_h * img_w];
            for i in 0..h {
                for j in 0..w {
                    let b = upsample_cell_to_box(SpatialCell::new(i, j), (h, w), (img_h, img_w)).unwrap();
                    prop_assert!(b.fits_within(img_h, img_w));
                    for r in b.top..b.bottom {
                        for c in b.left..b.right {
                            cover[r * img_w + c] += 1;
                        }
                    }
                }
            }
            // half-open boxes: every pixel claimed exactly once
            prop_assert!(cover.iter().all(|&n| n == 1));
        }

        #[test]
        fn l2_triangle_inequality(v in proptest::collection::vec(-100.0f32..100.0, 24)) {
            let (a, rest) = v.split_at(8);
            let (b, c) = rest.split_at(8);
            let ab = l2_distance(a, b).unwrap();
            let bc = l2_distance(b, c).unwrap();
            let ac = l2_distance(a, c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-6 * (ab + bc).max(1.0));
            prop_assert_eq!(ab, l2_distance(b, a).unwrap());
        }

        #[test]
        fn bilinear_is_homogeneous_and_bounded(
            vals in proptest::collection::vec(-5.0f64..5.0, 12),
            scale in 0.1f64..10.0,
            th in 3usize..20, tw in 4usize..20,
        ) {
            let m = ActivationMap::new(vals.clone(), 3, 4).unwrap();
            let scaled = ActivationMap::new(vals.iter().map(|v| v * scale).collect(), 3, 4).unwrap();
            let up = upsample_map_bilinear(&m, (th, tw)).unwrap();
            let up_scaled = upsample_map_bilinear(&scaled, (th, tw)).unwrap();
            for (a, b) in up.values().iter().zip(up_scaled.values()) {
                prop_assert!((a * scale - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
            prop_assert!(up.min() >= m.min() - 1e-12);
            prop_assert!(up.max() <= m.max() + 1e-12);
        }
    }
}
