use crate::datasets::LandmarkSet;
use crate::{Error, Result};

/// Fraction of the longer image side.
pub const PCK_THRESHOLD: f64 = 0.05;

/// Mean point error over visible landmarks as a percentage of the ground
/// truth inter-ocular distance.
pub fn iod_error(pred: &LandmarkSet, gt: &LandmarkSet) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Invalid(format!("{} predicted landmarks vs {} ground truth", pred.len(), gt.len())));
    }
    let (l, r) = gt.eye_indices.ok_or_else(|| Error::Invalid("ground truth has no eye indices".into()))?;
    let (a, b) = (gt.points[l], gt.points[r]);
    let iod = (a.0 - b.0).hypot(a.1 - b.1);
    if !(iod > 0.0) {
        return Err(Error::Degenerate("inter-ocular distance is zero".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, g), &v) in pred.points.iter().zip(&gt.points).zip(&gt.visible) {
        if v {
            sum += (p.0 - g.0).hypot(p.1 - g.1);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Invalid("no visible landmarks".into()));
    }
    Ok(100.0 * sum / n as f64 / iod)
}

/// Per-image IOD error, then the mean over images.
pub fn mean_iod(preds: &[LandmarkSet], gts: &[&LandmarkSet]) -> Result<f64> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Invalid(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    let mut sum = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        sum += iod_error(p, g)?;
    }
    Ok(sum / preds.len() as f64)
}

/// Percentage of visible keypoints within `threshold_frac * max(H, W)` pixels.
pub fn pck(preds: &[LandmarkSet], gts: &[&LandmarkSet], sizes: &[(usize, usize)], threshold_frac: f64) -> Result<f64> {
    if preds.len() != gts.len() || gts.len() != sizes.len() {
        return Err(Error::Invalid("pck inputs differ in length".into()));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for ((p, g), &(h, w)) in preds.iter().zip(gts).zip(sizes) {
        if p.len() != g.len() {
            return Err(Error::Invalid(format!("{} predicted landmarks vs {} ground truth", p.len(), g.len())));
        }
        let thr = threshold_frac * h.max(w) as f64;
        for ((a, b), &v) in p.points.iter().zip(&g.points).zip(&g.visible) {
            if v {
                total += 1;
                if (a.0 - b.0).hypot(a.1 - b.1) <= thr {
                    hit += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::Invalid("no visible keypoints".into()));
    }
    Ok(100.0 * hit as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: Vec<(f64, f64)>) -> LandmarkSet {
        LandmarkSet::new(points, Some((0, 1))).unwrap()
    }

    #[test]
    fn iod_hand_cases() {
        let gt = set(vec![(0.0, 0.0), (10.0, 0.0), (5.0, 5.0)]);
        assert_eq!(iod_error(&gt, &gt).unwrap(), 0.0);
        let off = set(vec![(0.0, 10.0), (10.0, 10.0), (5.0, 15.0)]);
        assert_eq!(iod_error(&off, &gt).unwrap(), 100.0);

        let gt = LandmarkSet::with_visibility(vec![(0.0, 0.0), (10.0, 0.0), (5.0, 5.0)], vec![false, false, true], Some((0, 1))).unwrap();
        let pred = set(vec![(0.0, 0.0), (10.0, 0.0), (8.0, 9.0)]);
        assert_eq!(iod_error(&pred, &gt).unwrap(), 50.0);
    }

    #[test]
    fn iod_errors() {
        let gt = set(vec![(1.0, 1.0), (1.0, 1.0)]);
        assert!(iod_error(&gt, &gt).is_err());
        let no_eyes = LandmarkSet::new(vec![(0.0, 0.0), (1.0, 0.0)], None).unwrap();
        assert!(iod_error(&no_eyes, &no_eyes).is_err());
    }

    #[test]
    fn pck_threshold_boundary() {
        let gt = LandmarkSet::new(vec![(10.0, 10.0)], None).unwrap();
        let near = LandmarkSet::new(vec![(15.0, 10.0)], None).unwrap();
        let far = LandmarkSet::new(vec![(15.1, 10.0)], None).unwrap();
        // 100 wide, 50 tall: threshold 5 px
        assert_eq!(pck(&[near], &[&gt], &[(50, 100)], PCK_THRESHOLD).unwrap(), 100.0);
        assert_eq!(pck(&[far], &[&gt], &[(50, 100)], PCK_THRESHOLD).unwrap(), 0.0);
        assert_eq!(pck(&[gt.clone()], &[&gt], &[(50, 100)], PCK_THRESHOLD).unwrap(), 100.0);
    }

    #[test]
    fn pck_needs_visible_points() {
        let gt = LandmarkSet::with_visibility(vec![(1.0, 1.0)], vec![false], None).unwrap();
        assert!(pck(&[gt.clone()], &[&gt], &[(8, 8)], PCK_THRESHOLD).is_err());
    }
}
