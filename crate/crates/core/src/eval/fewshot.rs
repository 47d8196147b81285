use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::datasets::ImageSample;
use crate::hypercolumn::FeatureExtractor;
use crate::landmark::{extract_features, train_regressor_on_features, AnnotatedFeatures, FeatureCache, RegressorConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FewshotRun {
    pub count: usize,
    pub seed: u64,
    pub val_iod: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FewshotRow {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
    /// Set when fewer than two seeds ran and `std` is reported as 0.
    pub single_seed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FewshotResult {
    pub rows: Vec<FewshotRow>,
    pub runs: Vec<FewshotRun>,
}

impl FewshotResult {
    pub fn mean_at(&self, count: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.count == count).map(|r| r.mean)
    }
}

/// Train one regressor per (count, seed) on precomputed features.
pub fn fewshot_sweep_features(
    train: &AnnotatedFeatures<'_>,
    val: &AnnotatedFeatures<'_>,
    counts: &[usize],
    seeds: &[u64],
    cfg: &RegressorConfig,
) -> Result<FewshotResult> {
    if counts.is_empty() || seeds.is_empty() {
        return Err(Error::Config("few-shot sweep needs at least one count and one seed".into()));
    }
    let mut rows = Vec::with_capacity(counts.len());
    let mut runs = Vec::new();
    for &count in counts {
        let mut vals = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let (_, s) = train_regressor_on_features(train, val, count, &RegressorConfig { seed, ..cfg.clone() })?;
            runs.push(FewshotRun { count, seed, val_iod: s.val_iod });
            vals.push(s.val_iod);
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = if vals.len() < 2 {
            0.0
        } else {
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        rows.push(FewshotRow { count, mean, std, n_seeds: vals.len(), single_seed: vals.len() < 2 });
    }
    Ok(FewshotResult { rows, runs })
}

pub fn fewshot_sweep(
    extractor: &dyn FeatureExtractor,
    train: &[ImageSample],
    val: &[ImageSample],
    counts: &[usize],
    seeds: &[u64],
    cfg: &RegressorConfig,
    cache: Option<&FeatureCache>,
) -> Result<FewshotResult> {
    let tf = extract_features(extractor, train, cache)?;
    let vf = extract_features(extractor, val, cache)?;
    fewshot_sweep_features(&AnnotatedFeatures::new(&tf, train)?, &AnnotatedFeatures::new(&vf, val)?, counts, seeds, cfg)
}

/// `fewshot_runs.csv` (one line per run) and `fewshot.csv` (one row per
/// method, one `mean±std` column per count).
pub fn write_fewshot_csv(result: &FewshotResult, method: &str, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut long = String::from("count,seed,val_iod\n");
    for r in &result.runs {
        long += &format!("{},{},{}\n", r.count, r.seed, r.val_iod);
    }
    let path = dir.join("fewshot_runs.csv");
    fs::write(&path, long).map_err(|e| Error::io(&path, e))?;

    let header: Vec<String> = result.rows.iter().map(|r| r.count.to_string()).collect();
    let cells: Vec<String> = result
        .rows
        .iter()
        .map(|r| if r.single_seed { format!("{:.2}", r.mean) } else { format!("{:.2}±{:.2}", r.mean, r.std) })
        .collect();
    let wide = format!("method,{}\n{},{}\n", header.join(","), method, cells.join(","));
    let path = dir.join("fewshot.csv");
    fs::write(&path, wide).map_err(|e| Error::io(&path, e))
}
