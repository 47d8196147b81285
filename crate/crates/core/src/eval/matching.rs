use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::datasets::{ImageSample, MatchingPair};
use crate::encoder::FeatureMap;
use crate::hypercolumn::{heatmap_overlay, mark, match_landmarks_maps, match_point, pixel_to_cell, FeatureExtractor};
use crate::image::Image;
use crate::{Error, Result};

use super::metrics::iod_error;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairRecord {
    pub reference: usize,
    pub query: usize,
    pub same_identity: bool,
    /// Percent of the query inter-ocular distance.
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchingReport {
    pub same_identity_err: f64,
    pub diff_identity_err: f64,
    pub n_same: usize,
    pub n_diff: usize,
    pub records: Vec<PairRecord>,
}

impl MatchingReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn features_for(
    extractor: &dyn FeatureExtractor,
    samples: &[ImageSample],
    pairs: &[MatchingPair],
) -> Result<BTreeMap<usize, FeatureMap<f32>>> {
    let mut wanted: Vec<usize> = pairs.iter().flat_map(|p| [p.reference, p.query]).collect();
    wanted.sort_unstable();
    wanted.dedup();
    if let Some(&i) = wanted.iter().find(|&&i| i >= samples.len()) {
        return Err(Error::Invalid(format!("pair index {i} out of range for {} samples", samples.len())));
    }
    let mut out = BTreeMap::new();
    for chunk in wanted.chunks(32) {
        let imgs: Vec<&Image> = chunk.iter().map(|&i| &samples[i].image).collect();
        for (&i, m) in chunk.iter().zip(extractor.extract(&imgs)?) {
            out.insert(i, m);
        }
    }
    Ok(out)
}

/// Transfer reference landmarks to each query and score them against the
/// query annotation, separately for same and different identity pairs.
pub fn eval_matching(extractor: &dyn FeatureExtractor, samples: &[ImageSample], pairs: &[MatchingPair]) -> Result<MatchingReport> {
    let feats = features_for(extractor, samples, pairs)?;
    let mut records = Vec::with_capacity(pairs.len());
    for p in pairs {
        let annotated = |i: usize| {
            samples[i].landmarks.as_ref().ok_or_else(|| Error::Invalid(format!("sample {i} is not annotated")))
        };
        let (ref_lm, query_lm) = (annotated(p.reference)?, annotated(p.query)?);
        let pred = match_landmarks_maps(ref_lm, &feats[&p.reference], &feats[&p.query])?;
        // only score points visible in both images
        let mut gt = query_lm.clone();
        for (v, &rv) in gt.visible.iter_mut().zip(&ref_lm.visible) {
            *v &= rv;
        }
        records.push(PairRecord {
            reference: p.reference,
            query: p.query,
            same_identity: p.same_identity,
            error: iod_error(&pred, &gt)?,
        });
    }
    let mean = |same: bool| {
        let e: Vec<f64> = records.iter().filter(|r| r.same_identity == same).map(|r| r.error).collect();
        (if e.is_empty() { f64::NAN } else { e.iter().sum::<f64>() / e.len() as f64 }, e.len())
    };
    let ((same_identity_err, n_same), (diff_identity_err, n_diff)) = (mean(true), mean(false));
    Ok(MatchingReport { same_identity_err, diff_identity_err, n_same, n_diff, records })
}

/// Heatmap overlay for the first visible reference landmark of the first
/// `limit` pairs, reference and query side by side.
pub fn write_matching_overlays(
    extractor: &dyn FeatureExtractor,
    samples: &[ImageSample],
    pairs: &[MatchingPair],
    dir: &Path,
    limit: usize,
) -> Result<usize> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pairs = &pairs[..limit.min(pairs.len())];
    let feats = features_for(extractor, samples, pairs)?;
    let mut written = 0;
    for (n, p) in pairs.iter().enumerate() {
        let (r, q) = (&samples[p.reference], &samples[p.query]);
        let Some(lm) = r.landmarks.as_ref() else { continue };
        let Some(k) = lm.visible.iter().position(|&v| v) else { continue };
        let fr = &feats[&p.reference];
        let uv = pixel_to_cell(lm.points[k], fr.downscale, fr.width(), fr.height());
        let (dist, hit) = match_point(fr, uv, &feats[&p.query], 0.05)?;
        let mut left = r.image.clone();
        mark(&mut left, lm.points[k], [1.0, 1.0, 1.0]);
        let mut right = heatmap_overlay(&q.image, &dist, 0.5)?;
        mark(&mut right, hit, [1.0, 1.0, 1.0]);
        if let Some(g) = q.landmarks.as_ref() {
            mark(&mut right, g.points[k], [0.0, 1.0, 0.0]);
        }
        let (w, h) = (left.width() + right.width(), left.height().max(right.height()));
        let both = Image::from_fn(w, h, |x, y| {
            if x < left.width() {
                if y < left.height() { left.get(x, y) } else { [0.0; 3] }
            } else if y < right.height() {
                right.get(x - left.width(), y)
            } else {
                [0.0; 3]
            }
        });
        both.save_png(&dir.join(format!("pair_{n:04}.png")))?;
        written += 1;
    }
    Ok(written)
}
