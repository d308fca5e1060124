use crate::mask::{mask_bbox, BBox, MaskSequence};
use crate::pose::{Joint, Keypoint, PoseSequence, Skeleton};

/// Fixed-proportion skeleton inside a bounding box.
///
/// With `cx` the box centre, `w`/`h` the inclusive-coordinate extents
/// (`x_max − x_min`, `y_max − y_min`) and "left" meaning the subject's left
/// (image right, subject facing the camera):
///
/// | joint     | x              | y                  |
/// |-----------|----------------|--------------------|
/// | nose      | cx             | y_min + 0.08 h     |
/// | eyes      | cx ± 0.05 w    | y_min + 0.06 h     |
/// | ears      | cx ± 0.10 w    | y_min + 0.07 h     |
/// | shoulders | cx ± 0.20 w    | y_min + 0.20 h     |
/// | elbows    | shoulder/wrist midpoint             ||
/// | wrists    | shoulder x     | hip y              |
/// | hips      | cx ± 0.12 w    | y_min + 0.55 h     |
/// | knees     | hip/ankle midpoint                  ||
/// | ankles    | cx ± 0.12 w    | y_max              |
pub fn skeleton_from_bbox(b: &BBox) -> Skeleton {
    let y0 = b.y_min as f64;
    let (w, h) = ((b.x_max - b.x_min) as f64, (b.y_max - b.y_min) as f64);
    let cx = (b.x_min as f64 + b.x_max as f64) / 2.0;
    let at = |dx: f64, fy: f64| (cx + dx * w, y0 + fy * h);
    let mid = |a: (f64, f64), b: (f64, f64)| ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);

    let nose = at(0.0, 0.08);
    let (l_eye, r_eye) = (at(0.05, 0.06), at(-0.05, 0.06));
    let (l_ear, r_ear) = (at(0.10, 0.07), at(-0.10, 0.07));
    let (l_sh, r_sh) = (at(0.20, 0.20), at(-0.20, 0.20));
    let (l_hip, r_hip) = (at(0.12, 0.55), at(-0.12, 0.55));
    let (l_ank, r_ank) = (at(0.12, 1.0), at(-0.12, 1.0));
    let (l_wr, r_wr) = ((l_sh.0, l_hip.1), (r_sh.0, r_hip.1));
    let (l_el, r_el) = (mid(l_sh, l_wr), mid(r_sh, r_wr));
    let (l_kn, r_kn) = (mid(l_hip, l_ank), mid(r_hip, r_ank));

    let coords = [
        nose, l_eye, r_eye, l_ear, r_ear, l_sh, r_sh, l_el, r_el, l_wr, r_wr, l_hip, r_hip, l_kn,
        r_kn, l_ank, r_ank,
    ];
    Joint::ALL
        .iter()
        .zip(coords)
        .map(|(&name, (x, y))| Keypoint { name, x, y, confidence: 1.0 })
        .collect()
}

fn absent_skeleton() -> Skeleton {
    Joint::ALL
        .iter()
        .map(|&name| Keypoint { name, x: 0.0, y: 0.0, confidence: 0.0 })
        .collect()
}

/// Bounding-box skeleton per frame; empty masks give all-zero confidence.
pub fn stub_pose(masks: &MaskSequence) -> PoseSequence {
    PoseSequence {
        dims: masks.dims(),
        frames: masks
            .masks()
            .iter()
            .map(|m| mask_bbox(m).map_or_else(absent_skeleton, |b| skeleton_from_bbox(&b)))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Mask;
    use crate::pose::joint;
    use proptest::prelude::*;

    fn square(x0: u32, y0: u32, x1: u32, y1: u32) -> Mask {
        Mask::from_fn(48, 48, |x, y| (x0..=x1).contains(&x) && (y0..=y1).contains(&y))
    }

    #[test]
    fn empty_mask_gives_zero_confidence() {
        let poses = stub_pose(&MaskSequence::new(vec![Mask::empty(8, 8)]).unwrap());
        assert_eq!(poses.frames[0].len(), 17);
        assert!(poses.frames[0].iter().all(|k| k.confidence == 0.0));
        poses.validate().unwrap();
    }

    #[test]
    fn square_box_formulas() {
        let poses = stub_pose(&MaskSequence::new(vec![square(10, 10, 19, 19)]).unwrap());
        let s = &poses.frames[0];
        assert_eq!(joint(s, Joint::Nose).x, 14.5);
        assert!((joint(s, Joint::Nose).y - (10.0 + 0.08 * 9.0)).abs() < 1e-12);
        assert!((joint(s, Joint::LeftShoulder).x - (14.5 + 0.2 * 9.0)).abs() < 1e-12);
        assert!((joint(s, Joint::RightHip).x - (14.5 - 0.12 * 9.0)).abs() < 1e-12);
        assert_eq!(joint(s, Joint::LeftAnkle).y, 19.0);
        poses.validate().unwrap();
    }

    proptest! {
        #[test]
        fn translation_moves_every_keypoint(
            x0 in 0u32..20, y0 in 0u32..20, w in 0u32..10, h in 0u32..10,
            dx in 0u32..15, dy in 0u32..15,
        ) {
            let a = stub_pose(&MaskSequence::new(vec![square(x0, y0, x0 + w, y0 + h)]).unwrap());
            let b = stub_pose(&MaskSequence::new(vec![square(x0 + dx, y0 + dy, x0 + w + dx, y0 + h + dy)]).unwrap());
            for (ka, kb) in a.frames[0].iter().zip(&b.frames[0]) {
                prop_assert!((kb.x - ka.x - dx as f64).abs() < 1e-9);
                prop_assert!((kb.y - ka.y - dy as f64).abs() < 1e-9);
            }
        }
    }
}
