//! On-disk layout: `root/images/*.png|jpg`, optional `landmarks.csv` with
//! header `file,x0,y0,...` (an empty cell marks an invisible point), and
//! optional `pairs.txt` with lines `ref_file query_file same|diff`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use super::{ImageSample, LandmarkSet, MatchingPair};
use crate::image::Image;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairLine {
    pub reference: String,
    pub query: String,
    pub same_identity: bool,
}

/// Lazily decoding view of a dataset directory.
#[derive(Clone, Debug)]
pub struct DatasetReader {
    images_dir: PathBuf,
    files: Vec<String>,
    landmarks: Option<Vec<LandmarkSet>>,
}

fn is_image(name: &str) -> bool {
    let lower = name.to_ascii_lowercase();
    lower.ends_with(".png") || lower.ends_with(".jpg") || lower.ends_with(".jpeg")
}

/// Open `root`. With `annotations`, only rows of that CSV are samples and
/// every row must name an existing image; without, every image file is a
/// sample and landmarks are absent.
pub fn load_dataset(
    root: &Path,
    annotations: Option<&Path>,
    eye_indices: Option<(usize, usize)>,
) -> Result<DatasetReader> {
    let images_dir = root.join("images");
    if !images_dir.is_dir() {
        return Err(Error::MissingArtifact(images_dir));
    }
    match annotations {
        None => {
            let mut files = Vec::new();
            for entry in fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))? {
                let entry = entry.map_err(|e| Error::io(&images_dir, e))?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if is_image(&name) {
                    files.push(name);
                }
            }
            files.sort();
            Ok(DatasetReader { images_dir, files, landmarks: None })
        }
        Some(csv_path) => {
            let (files, landmarks) = read_annotations(csv_path, eye_indices)?;
            for (row, file) in files.iter().enumerate() {
                if !images_dir.join(file).is_file() {
                    return Err(Error::MissingImage { file: file.clone(), row: row + 1 });
                }
            }
            Ok(DatasetReader { images_dir, files, landmarks: Some(landmarks) })
        }
    }
}

fn read_annotations(path: &Path, eye_indices: Option<(usize, usize)>) -> Result<(Vec<String>, Vec<LandmarkSet>)> {
    let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| parse_err(0, e.to_string()))?;
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.get(0) != Some("file") || header.len() < 3 || (header.len() - 1) % 2 != 0 {
        return Err(parse_err(1, "header must be file,x0,y0,...,x{K-1},y{K-1}".into()));
    }
    let k = (header.len() - 1) / 2;
    let mut files = Vec::new();
    let mut sets = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        let mut points = Vec::with_capacity(k);
        let mut visible = Vec::with_capacity(k);
        for p in 0..k {
            let (xs, ys) = (record[1 + 2 * p].trim(), record[2 + 2 * p].trim());
            if xs.is_empty() && ys.is_empty() {
                points.push((0.0, 0.0));
                visible.push(false);
                continue;
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(line, format!("malformed coordinate {s:?} for landmark {p}")))
            };
            points.push((parse(xs)?, parse(ys)?));
            visible.push(true);
        }
        let set = LandmarkSet::with_visibility(points, visible, eye_indices).map_err(|e| parse_err(line, e.to_string()))?;
        files.push(record[0].to_string());
        sets.push(set);
    }
    Ok((files, sets))
}

impl DatasetReader {
    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn is_annotated(&self) -> bool {
        self.landmarks.is_some()
    }

    /// Decode sample `i`; its identity id is its position.
    pub fn get(&self, i: usize) -> Result<ImageSample> {
        let file = self
            .files
            .get(i)
            .ok_or_else(|| Error::Invalid(format!("sample {i} out of range for {} samples", self.files.len())))?;
        let path = self.images_dir.join(file);
        let image = Image::load(&path)?;
        let landmarks = self.landmarks.as_ref().map(|l| l[i].clone());
        if let Some(lm) = &landmarks {
            if !lm.within(image.width(), image.height()) {
                return Err(Error::Image {
                    path,
                    message: format!("visible landmark outside the {}x{} image", image.width(), image.height()),
                });
            }
        }
        Ok(ImageSample { image, landmarks, identity_id: i as u64, source_path: Some(file.clone()) })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<ImageSample>> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    pub fn load_all(&self) -> Result<Vec<ImageSample>> {
        self.iter().collect()
    }

    /// Position of a file name.
    pub fn index_of(&self, file: &str) -> Option<usize> {
        self.files.iter().position(|f| f == file)
    }
}

fn file_name(i: usize) -> String {
    format!("{i:05}.png")
}

/// Write samples (and optionally matching pairs) in the dataset layout.
pub fn materialize(samples: &[ImageSample], root: &Path, pairs: Option<&[MatchingPair]>) -> Result<()> {
    let images_dir = root.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        s.image.save_png(&images_dir.join(file_name(i)))?;
    }
    if let Some(k) = samples.iter().find_map(|s| s.landmarks.as_ref().map(LandmarkSet::len)) {
        let path = root.join("landmarks.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        let mut header = vec!["file".to_string()];
        for p in 0..k {
            header.push(format!("x{p}"));
            header.push(format!("y{p}"));
        }
        let csv_err = |e: csv::Error| Error::Invalid(format!("{}: {e}", path.display()));
        w.write_record(&header).map_err(csv_err)?;
        for (i, s) in samples.iter().enumerate() {
            let Some(lm) = &s.landmarks else { continue };
            if lm.len() != k {
                return Err(Error::Invalid(format!("sample {i} has {} landmarks, expected {k}", lm.len())));
            }
            let mut row = vec![file_name(i)];
            for (&(x, y), &v) in lm.points.iter().zip(&lm.visible) {
                if v {
                    row.push(format!("{x}"));
                    row.push(format!("{y}"));
                } else {
                    row.push(String::new());
                    row.push(String::new());
                }
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(pairs) = pairs {
        let lines: Vec<PairLine> = pairs
            .iter()
            .map(|p| PairLine {
                reference: file_name(p.reference),
                query: file_name(p.query),
                same_identity: p.same_identity,
            })
            .collect();
        write_pairs(&root.join("pairs.txt"), &lines)?;
    }
    Ok(())
}

pub fn write_pairs(path: &Path, pairs: &[PairLine]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for p in pairs {
        let tag = if p.same_identity { "same" } else { "diff" };
        writeln!(f, "{} {} {tag}", p.reference, p.query).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairLine>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let same_identity = match parts.as_slice() {
            [_, _, "same"] => true,
            [_, _, "diff"] => false,
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    message: format!("expected `ref query same|diff`, got {line:?}"),
                })
            }
        };
        out.push(PairLine { reference: parts[0].into(), query: parts[1].into(), same_identity });
    }
    Ok(out)
}
