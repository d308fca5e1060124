//! Binary morphology with Euclidean disk structuring elements.
//!
//! Pixels outside the image read as unset for both operators, so dilation
//! never invents off-image support and erosion eats into the border.

use rayon::prelude::*;

use crate::mask::Mask;

/// All offsets `(dx, dy)` with `dx² + dy² ≤ r²`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiskElement {
    radius: u32,
    offsets: Vec<(i32, i32)>,
}

impl DiskElement {
    pub fn new(radius: u32) -> Self {
        let r = radius as i64;
        let mut offsets = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    offsets.push((dx as i32, dy as i32));
                }
            }
        }
        Self { radius, offsets }
    }

    pub fn radius(&self) -> u32 {
        self.radius
    }

    pub fn offsets(&self) -> &[(i32, i32)] {
        &self.offsets
    }

    /// Half-width of the disk's horizontal span at row offset `dy`.
    fn half_span(&self, dy: i64) -> i64 {
        let r = self.radius as i64;
        let mut hw = ((r * r - dy * dy) as f64).sqrt() as i64;
        // fix up float rounding in either direction
        while hw * hw + dy * dy > r * r {
            hw -= 1;
        }
        while (hw + 1) * (hw + 1) + dy * dy <= r * r {
            hw += 1;
        }
        hw
    }
}

/// Per-row prefix counts of set bits; `prefix[y][x]` counts bits in `[0, x)`.
fn row_prefix(mask: &Mask) -> Vec<u32> {
    let w = mask.width() as usize;
    let mut out = vec![0u32; (w + 1) * mask.height() as usize];
    for (y, row) in mask.bits().chunks(w).enumerate() {
        let base = y * (w + 1);
        for (x, &b) in row.iter().enumerate() {
            out[base + x + 1] = out[base + x] + b as u32;
        }
    }
    out
}

#[derive(Clone, Copy)]
enum Op {
    Dilate,
    Erode,
}

fn morph(mask: &Mask, radius: u32, op: Op) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let el = DiskElement::new(radius);
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    let r = radius as i64;
    let spans: Vec<(i64, i64)> = (-r..=r).map(|dy| (dy, el.half_span(dy))).collect();
    let prefix = row_prefix(mask);
    let stride = w as usize + 1;

    // count of set bits in row y, columns [x0, x1] clipped to the image
    let count = |y: i64, x0: i64, x1: i64| -> i64 {
        let a = x0.max(0) as usize;
        let b = (x1 + 1).min(w) as usize;
        if a >= b {
            return 0;
        }
        let base = y as usize * stride;
        (prefix[base + b] - prefix[base + a]) as i64
    };

    let mut bits = vec![false; (w * h) as usize];
    bits.par_chunks_mut(w as usize).enumerate().for_each(|(y, row)| {
        let y = y as i64;
        for (x, out) in row.iter_mut().enumerate() {
            let x = x as i64;
            *out = match op {
                Op::Dilate => spans.iter().any(|&(dy, hw)| {
                    let yy = y + dy;
                    yy >= 0 && yy < h && count(yy, x - hw, x + hw) > 0
                }),
                Op::Erode => spans.iter().all(|&(dy, hw)| {
                    let yy = y + dy;
                    yy >= 0 && yy < h && x - hw >= 0 && x + hw < w && count(yy, x - hw, x + hw) == 2 * hw + 1
                }),
            };
        }
    });
    Mask::new(mask.width(), mask.height(), bits).expect("same dims")
}

/// Set every pixel whose disk neighbourhood touches a set bit.
pub fn dilate(mask: &Mask, radius: u32) -> Mask {
    morph(mask, radius, Op::Dilate)
}

/// Keep only pixels whose whole disk neighbourhood is set and inside the image.
pub fn erode(mask: &Mask, radius: u32) -> Mask {
    morph(mask, radius, Op::Erode)
}

/// `dilate(mask, r_out) ∧ ¬erode(mask, r_in)`: a band straddling the contour.
pub fn edge_band(mask: &Mask, r_out: u32, r_in: u32) -> Mask {
    if mask.is_empty() {
        return mask.clone();
    }
    dilate(mask, r_out)
        .and_not(&erode(mask, r_in))
        .expect("same dims")
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn disk_shape() {
        assert_eq!(DiskElement::new(0).offsets(), &[(0, 0)]);
        assert_eq!(DiskElement::new(1).offsets().len(), 5);
        assert_eq!(DiskElement::new(2).offsets().len(), 13);
        for r in 0..8 {
            let el = DiskElement::new(r);
            assert!(el.offsets().contains(&(0, 0)));
            for &(dx, dy) in el.offsets() {
                assert!(el.offsets().contains(&(-dx, -dy)));
            }
        }
    }

    #[test]
    fn radius_zero_is_identity() {
        let mask = Mask::from_fn(7, 5, |x, y| (x * 3 + y) % 4 == 0);
        assert_eq!(dilate(&mask, 0), mask);
        assert_eq!(erode(&mask, 0), mask);
    }

    #[test]
    fn dilate_center_pixel() {
        let mut mask = Mask::empty(5, 5);
        mask.set(2, 2, true);
        let d = dilate(&mask, 1);
        assert_eq!(d, oracle::dilate(&mask, 1));
        assert_eq!(d.count(), 5);
        for (x, y) in [(2, 2), (1, 2), (3, 2), (2, 1), (2, 3)] {
            assert!(d.get(x, y));
        }
    }

    #[test]
    fn full_mask_dilates_to_itself() {
        for r in 0..5 {
            assert!(dilate(&Mask::filled(9, 6, true), r).is_full());
        }
    }

    #[test]
    fn erode_cases() {
        let mut single = Mask::empty(5, 5);
        single.set(2, 2, true);
        assert!(erode(&single, 1).is_empty());
        let e = erode(&Mask::filled(5, 5, true), 1);
        assert_eq!(e, oracle::erode(&Mask::filled(5, 5, true), 1));
        assert_eq!(e, Mask::from_fn(5, 5, |x, y| (1..4).contains(&x) && (1..4).contains(&y)));
    }

    #[test]
    fn band_of_centered_square() {
        let mask = Mask::from_fn(8, 8, |x, y| (2..6).contains(&x) && (2..6).contains(&y));
        let band = edge_band(&mask, 1, 1);
        assert_eq!(band, oracle::band(&mask, 1, 1));
        // plus-shaped dilation of a 4x4 square is the 6x6 square minus its corners
        let dilated = Mask::from_fn(8, 8, |x, y| {
            let inx = (1..7).contains(&x);
            let iny = (1..7).contains(&y);
            let corner = (x == 1 || x == 6) && (y == 1 || y == 6);
            inx && iny && !corner
        });
        let core = Mask::from_fn(8, 8, |x, y| (3..5).contains(&x) && (3..5).contains(&y));
        assert_eq!(band, dilated.and_not(&core).unwrap());
        assert!(edge_band(&Mask::empty(8, 8), 3, 2).is_empty());
    }

    #[test]
    fn exhaustive_3x3_against_oracle() {
        for code in 0u32..512 {
            let mask = Mask::from_fn(3, 3, |x, y| code >> (y * 3 + x) & 1 == 1);
            for r in 0..=2 {
                assert_eq!(dilate(&mask, r), oracle::dilate(&mask, r), "dilate {code} r={r}");
                assert_eq!(erode(&mask, r), oracle::erode(&mask, r), "erode {code} r={r}");
            }
        }
    }

    #[test]
    fn random_32x32_against_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let p = rng.gen_range(0.1..0.9);
            let mask = Mask::from_fn(32, 32, |_, _| rng.gen_bool(p));
            for r in 1..=3 {
                assert_eq!(dilate(&mask, r), oracle::dilate(&mask, r));
                assert_eq!(erode(&mask, r), oracle::erode(&mask, r));
            }
        }
    }

    fn arb_mask() -> impl Strategy<Value = Mask> {
        (1u32..=20, 1u32..=20, any::<u64>(), 0.05f64..0.95).prop_map(|(w, h, seed, p)| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            Mask::from_fn(w, h, |_, _| rng.gen_bool(p))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn extensive_and_anti_extensive(mask in arb_mask(), r in 0u32..4) {
            prop_assert!(mask.is_subset_of(&dilate(&mask, r)));
            prop_assert!(erode(&mask, r).is_subset_of(&mask));
        }

        #[test]
        fn monotone(a in arb_mask(), seed in any::<u64>(), r in 0u32..4) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let extra = Mask::from_fn(a.width(), a.height(), |_, _| rng.gen_bool(0.3));
            let b = a.or(&extra).unwrap();
            prop_assert!(dilate(&a, r).is_subset_of(&dilate(&b, r)));
            prop_assert!(erode(&a, r).is_subset_of(&erode(&b, r)));
        }

        #[test]
        fn duality_away_from_border(mask in arb_mask(), r in 0u32..4) {
            let lhs = erode(&mask, r);
            let rhs = dilate(&mask.not(), r).not();
            let (w, h) = mask.dims();
            for y in r..h.saturating_sub(r) {
                for x in r..w.saturating_sub(r) {
                    prop_assert_eq!(lhs.get(x, y), rhs.get(x, y));
                }
            }
        }

        #[test]
        fn band_grows_with_radius(mask in arb_mask(), r in 1u32..5) {
            prop_assert!(edge_band(&mask, r - 1, r - 1).is_subset_of(&edge_band(&mask, r, r)));
        }
    }
}
