use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{derive_seed, zoom_out, ImageSample};
use crate::hypercolumn::FeatureExtractor;
use crate::landmark::{extract_features, train_regressor_on_features, AnnotatedFeatures, FeatureCache, RegressorConfig};
use crate::{Error, Result};

use super::metrics::mean_iod;
use super::plot::{line_plot, Series};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleSweepConfig {
    pub train_zoom_range: (f64, f64),
    pub eval_zoom_grid: Vec<f64>,
    /// Zoomed copies of each training image.
    pub train_copies: usize,
    pub seed: u64,
}

impl Default for ScaleSweepConfig {
    fn default() -> Self {
        Self {
            train_zoom_range: (1.0, 1.5),
            eval_zoom_grid: vec![1.0, 1.25, 1.5, 1.75, 2.0],
            train_copies: 2,
            seed: 0,
        }
    }
}

impl ScaleSweepConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.train_zoom_range;
        let ok = |v: f64| (1.0..=2.0).contains(&v);
        if !(ok(lo) && ok(hi) && lo <= hi) {
            return Err(Error::Config(format!("train_zoom_range ({lo}, {hi}) must lie in [1, 2]")));
        }
        if self.eval_zoom_grid.is_empty() || !self.eval_zoom_grid.iter().all(|&v| ok(v)) {
            return Err(Error::Config("eval_zoom_grid must be non-empty with values in [1, 2]".into()));
        }
        if self.train_copies == 0 {
            return Err(Error::Config("train_copies must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScaleCurve {
    /// `(zoom factor, mean IOD)` per grid value.
    pub rows: Vec<(f64, f64)>,
}

impl ScaleCurve {
    pub fn at(&self, zoom: f64) -> Option<f64> {
        self.rows.iter().find(|r| (r.0 - zoom).abs() < 1e-9).map(|r| r.1)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("zoom,iod\n");
        for (z, v) in &self.rows {
            s += &format!("{z},{v}\n");
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn write_plot(curves: &[(&str, &ScaleCurve)], path: &Path) -> Result<()> {
        let series: Vec<Series> =
            curves.iter().map(|(label, c)| Series { label: label.to_string(), points: c.rows.clone() }).collect();
        line_plot(&series, 480, 320, path)
    }
}

/// Train on zoomed-out copies drawn from the training range, then evaluate
/// on the validation set zoomed by each grid factor.
pub fn scale_sweep(
    extractor: &dyn FeatureExtractor,
    train: &[ImageSample],
    val: &[ImageSample],
    cfg: &ScaleSweepConfig,
    reg_cfg: &RegressorConfig,
    cache: Option<&FeatureCache>,
) -> Result<ScaleCurve> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5CA, 0));
    let (lo, hi) = cfg.train_zoom_range;
    let mut zoomed = Vec::with_capacity(train.len() * cfg.train_copies);
    for s in train {
        for _ in 0..cfg.train_copies {
            let z = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            zoomed.push(zoom_out(s, z)?);
        }
    }
    let tf = extract_features(extractor, &zoomed, cache)?;
    let vf = extract_features(extractor, val, cache)?;
    let train_set = AnnotatedFeatures::new(&tf, &zoomed)?;
    let (reg, _) = train_regressor_on_features(&train_set, &AnnotatedFeatures::new(&vf, val)?, zoomed.len(), reg_cfg)?;

    let mut rows = Vec::with_capacity(cfg.eval_zoom_grid.len());
    for &z in &cfg.eval_zoom_grid {
        let vz = val.iter().map(|s| zoom_out(s, z)).collect::<Result<Vec<_>>>()?;
        let feats = extract_features(extractor, &vz, cache)?;
        let preds = reg.predict(&feats.iter().collect::<Vec<_>>())?;
        let gts = vz
            .iter()
            .map(|s| s.landmarks.as_ref().ok_or_else(|| Error::Invalid("validation sample is not annotated".into())))
            .collect::<Result<Vec<_>>>()?;
        rows.push((z, mean_iod(&preds, &gts)?));
    }
    Ok(ScaleCurve { rows })
}
