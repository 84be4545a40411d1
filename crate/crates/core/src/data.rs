//! Dataset manifests, stratified folds and the synthetic fundus generator.

use std::collections::{BTreeMap, HashSet};
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::Image;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub filename: String,
    pub label: usize,
    /// Pinned fold from the manifest, if it has a `fold` column.
    pub fold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
    pub num_classes: usize,
}

/// Parse manifest CSV text (`filename,label[,fold]` header) without touching the file system.
pub fn parse_manifest(reader: impl Read) -> Result<Vec<Record>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Manifest(format!("header: {e}")))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(fi), Some(li)) = (col("filename"), col("label")) else {
        return Err(Error::Manifest(format!(
            "header must contain `filename,label`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    };
    let foldi = col("fold");
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        // Line 1 is the header.
        let line = i + 2;
        let row = row.map_err(|e| Error::Manifest(format!("line {line}: {e}")))?;
        let filename = row.get(fi).unwrap_or("").to_string();
        if filename.is_empty() {
            return Err(Error::Manifest(format!("line {line}: empty filename")));
        }
        let raw = row.get(li).unwrap_or("");
        let label = raw
            .parse::<usize>()
            .map_err(|_| Error::Manifest(format!("line {line}: bad label `{raw}`")))?;
        let fold = match foldi.and_then(|k| row.get(k)) {
            Some("") | None => None,
            Some(v) => Some(
                v.parse::<usize>()
                    .map_err(|_| Error::Manifest(format!("line {line}: bad fold `{v}`")))?,
            ),
        };
        if !seen.insert(filename.clone()) {
            return Err(Error::Manifest(format!("line {line}: duplicate filename `{filename}`")));
        }
        out.push(Record {
            filename,
            label,
            fold,
        });
    }
    if out.is_empty() {
        return Err(Error::Manifest("manifest has no records".into()));
    }
    Ok(out)
}

impl Manifest {
    pub fn from_records(root: impl Into<PathBuf>, records: Vec<Record>) -> Self {
        let num_classes = records.iter().map(|r| r.label + 1).max().unwrap_or(0);
        Self {
            root: root.into(),
            records,
            num_classes,
        }
    }

    /// Load and validate a manifest; every referenced image must exist under `root`.
    pub fn load(csv_path: &Path, root: &Path) -> Result<Self> {
        let file = std::fs::File::open(csv_path).map_err(|e| Error::io(csv_path, e))?;
        let records = parse_manifest(file)?;
        let missing: Vec<PathBuf> = records
            .iter()
            .map(|r| root.join(&r.filename))
            .filter(|p| !p.is_file())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingFiles(missing));
        }
        Ok(Self::from_records(root, records))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn path(&self, i: usize) -> PathBuf {
        self.root.join(&self.records[i].filename)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for r in &self.records {
            c[r.label] += 1;
        }
        c
    }

    /// Collapse grades to referable (`grade >= threshold` → 1) vs non-referable (0).
    pub fn binarize(&self, threshold: usize) -> Self {
        let records = self
            .records
            .iter()
            .map(|r| Record {
                label: usize::from(r.label >= threshold),
                ..r.clone()
            })
            .collect();
        Self {
            root: self.root.clone(),
            records,
            num_classes: 2,
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            root: self.root.clone(),
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Manifest(e.to_string()))?;
        let pinned = self.records.iter().any(|r| r.fold.is_some());
        let header: &[&str] = if pinned {
            &["filename", "label", "fold"]
        } else {
            &["filename", "label"]
        };
        let werr = |e: csv::Error| Error::Manifest(e.to_string());
        w.write_record(header).map_err(werr)?;
        for r in &self.records {
            let mut row = vec![r.filename.clone(), r.label.to_string()];
            if pinned {
                row.push(r.fold.map(|f| f.to_string()).unwrap_or_default());
            }
            w.write_record(&row).map_err(werr)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Fold index per manifest record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: Vec<usize>,
}

impl FoldPlan {
    /// `(train, held_out)` record indices for fold `f`.
    pub fn split(&self, f: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.assignment.len()).partition(|&i| self.assignment[i] != f)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &a in &self.assignment {
            s[a] += 1;
        }
        s
    }
}

/// Stratified k-fold: per class, a seeded shuffle followed by round-robin
/// assignment. Each class starts where the previous one stopped so total
/// fold sizes stay balanced too.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut assignment = vec![0; labels.len()];
    let mut offset = 0;
    for (&class, members) in &mut by_class {
        if members.len() < k {
            log::warn!("class {class} has {} samples for {k} folds", members.len());
        }
        let mut rng = rng::stream(seed, Stream::Folds, &[class as u64]);
        members.shuffle(&mut rng);
        for (j, &i) in members.iter().enumerate() {
            assignment[i] = (offset + j) % k;
        }
        offset = (offset + members.len()) % k;
    }
    Ok(FoldPlan {
        k,
        seed,
        assignment,
    })
}

/// Use the manifest's pinned folds if every record has one, else a stratified plan.
pub fn fold_plan(manifest: &Manifest, k: usize, seed: u64) -> Result<FoldPlan> {
    if manifest.records.iter().all(|r| r.fold.is_some()) {
        let assignment: Vec<usize> = manifest.records.iter().map(|r| r.fold.unwrap()).collect();
        if let Some(&bad) = assignment.iter().find(|&&f| f >= k) {
            return Err(Error::Manifest(format!("pinned fold {bad} outside 0..{k}")));
        }
        return Ok(FoldPlan {
            k,
            seed,
            assignment,
        });
    }
    stratified_kfold(&manifest.labels(), k, seed)
}

/// Blob count for class `g` of the synthetic set.
pub fn synth_lesions(class: usize) -> usize {
    3 * class
}

/// Render one synthetic fundus image: an orange disk on a dark background
/// with `synth_lesions(class)` bright red spots inside the disk.
pub fn synth_image(size: usize, class: usize, rng: &mut rng::Rng) -> Image {
    let s = size as f32;
    let mut img = Image::filled(size, size, [0.03, 0.02, 0.02]);
    let (cy, cx) = (s / 2.0 + rng.random_range(-0.03..0.03) * s, s / 2.0 + rng.random_range(-0.03..0.03) * s);
    let radius = s * 0.44;
    let tone = rng.random_range(0.9f32..1.1);
    let base = [0.55 * tone, 0.30 * tone, 0.14 * tone];
    for y in 0..size {
        for x in 0..size {
            let d = ((y as f32 + 0.5 - cy).powi(2) + (x as f32 + 0.5 - cx).powi(2)).sqrt();
            if d <= radius {
                // Slight vignetting towards the rim.
                let shade = 1.0 - 0.25 * (d / radius).powi(2);
                for c in 0..3 {
                    img.set(c, y, x, base[c] * shade);
                }
            }
        }
    }
    let blob_r = (s * 0.06).max(1.0);
    for _ in 0..synth_lesions(class) {
        let ang = rng.random_range(0.0..std::f32::consts::TAU);
        let dist = rng.random_range(0.0..(radius - blob_r).max(0.0));
        let (by, bx) = (cy + dist * ang.sin(), cx + dist * ang.cos());
        let y0 = (by - blob_r).floor().max(0.0) as usize;
        let x0 = (bx - blob_r).floor().max(0.0) as usize;
        let y1 = ((by + blob_r).ceil() as usize).min(size);
        let x1 = ((bx + blob_r).ceil() as usize).min(size);
        for y in y0..y1 {
            for x in x0..x1 {
                if ((y as f32 + 0.5 - by).powi(2) + (x as f32 + 0.5 - bx).powi(2)).sqrt() <= blob_r {
                    img.set(0, y, x, 0.95);
                    img.set(1, y, x, 0.12);
                    img.set(2, y, x, 0.08);
                }
            }
        }
    }
    img
}

/// Write `n_per_class * num_classes` PNGs and `manifest.csv` into `out_dir`.
pub fn synth_generate(
    out_dir: &Path,
    n_per_class: usize,
    num_classes: usize,
    image_size: usize,
    seed: u64,
) -> Result<Manifest> {
    if n_per_class == 0 || num_classes < 2 || image_size < 8 {
        return Err(Error::Config(format!(
            "synthetic set needs per_class >= 1, classes >= 2, size >= 8 (got {n_per_class}, {num_classes}, {image_size})"
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::new();
    for class in 0..num_classes {
        for i in 0..n_per_class {
            let mut rng = rng::stream(seed, Stream::Synth, &[class as u64, i as u64]);
            let img = synth_image(image_size, class, &mut rng);
            let filename = format!("c{class}_{i:04}.png");
            img.save_png(&out_dir.join(&filename))?;
            records.push(Record {
                filename,
                label: class,
                fold: None,
            });
        }
    }
    let manifest = Manifest::from_records(out_dir, records);
    manifest.write_csv(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_valid_and_infers_k() {
        let recs = parse_manifest("filename,label\na.png,0\nb.png,2\nc.png,1\n".as_bytes()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(Manifest::from_records("/", recs).num_classes, 3);
    }

    #[test]
    fn bad_label_names_line() {
        let err = parse_manifest("filename,label\na.png,0\nb.png,x\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn duplicate_rejected() {
        assert!(parse_manifest("filename,label\na.png,0\na.png,1\n".as_bytes()).is_err());
    }

    #[test]
    fn pinned_folds_parsed() {
        let recs = parse_manifest("filename,label,fold\na.png,0,1\nb.png,1,0\n".as_bytes()).unwrap();
        assert_eq!(recs[0].fold, Some(1));
        let m = Manifest::from_records("/", recs);
        let plan = fold_plan(&m, 2, 0).unwrap();
        assert_eq!(plan.assignment, vec![1, 0]);
    }

    #[test]
    fn single_class_even_folds() {
        let plan = stratified_kfold(&[0; 10], 5, 3).unwrap();
        assert_eq!(plan.fold_sizes(), vec![2; 5]);
        assert!(stratified_kfold(&[0; 10], 1, 3).is_err());
    }

    #[test]
    fn class_zero_has_no_blobs() {
        let mut rng = rng::stream(1, Stream::Synth, &[0]);
        let img = synth_image(32, 0, &mut rng);
        assert!(img.channel(0).iter().all(|&v| v < 0.9));
    }

    #[test]
    fn binarize_referable() {
        let m = Manifest::from_records(
            "/",
            (0..4)
                .map(|g| Record {
                    filename: format!("{g}"),
                    label: g,
                    fold: None,
                })
                .collect(),
        );
        assert_eq!(m.binarize(2).labels(), vec![0, 0, 1, 1]);
    }
}
