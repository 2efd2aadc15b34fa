//! Labeled images, on-disk dataset layouts, and deterministic splitting.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::detect::BoundingBox;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Train,
    Val,
    Test,
    Unsplit,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    /// Index into the dataset's class names.
    Class(usize),
    Boxes(Vec<BoundingBox>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: Image,
    pub label: Label,
    pub provenance: Provenance,
}

impl LabeledImage {
    pub fn class(&self) -> Option<usize> {
        match self.label {
            Label::Class(c) => Some(c),
            Label::Boxes(_) => None,
        }
    }

    pub fn boxes(&self) -> Option<&[BoundingBox]> {
        match &self.label {
            Label::Boxes(b) => Some(b),
            Label::Class(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<LabeledImage>,
}

impl Dataset {
    /// Errors on duplicate sample ids.
    pub fn new(class_names: Vec<String>, samples: Vec<LabeledImage>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate image id {:?}", s.id)));
            }
            if let Some(c) = s.class() {
                if c >= class_names.len() {
                    return Err(Error::Data(format!("image {:?} has class {c} of {}", s.id, class_names.len())));
                }
            }
        }
        Ok(Self { class_names, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample count per class index.
    pub fn class_histogram(&self) -> Vec<usize> {
        histogram(&self.samples, self.class_names.len())
    }
}

pub fn histogram(samples: &[LabeledImage], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for c in samples.iter().filter_map(LabeledImage::class) {
        h[c] += 1;
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub class_names: Vec<String>,
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

impl DatasetSplit {
    /// Checks that no id is shared between parts and that every sample's
    /// provenance matches its part.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (part, tag) in [(&self.train, Provenance::Train), (&self.val, Provenance::Val), (&self.test, Provenance::Test)] {
            for s in part {
                if s.provenance != tag {
                    return Err(Error::Data(format!("sample {:?} tagged {:?} in {tag:?} split", s.id, s.provenance)));
                }
                if !seen.insert(s.id.as_str()) {
                    return Err(Error::Data(format!("sample {:?} appears in more than one split", s.id)));
                }
            }
        }
        Ok(())
    }
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads `root/<class_name>/<images>`. Classes are the subdirectory names
/// in sorted order; sample ids are file stems.
pub fn load_classification_dataset(root: &Path) -> Result<Dataset> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("no class directories under {}", root.display())));
    }
    let mut names = Vec::new();
    let mut samples = Vec::new();
    for (c, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| is_image_file(p)).collect();
        if files.is_empty() {
            return Err(Error::Data(format!("class directory {name:?} has no images")));
        }
        for f in files {
            samples.push(LabeledImage {
                id: stem(&f),
                image: Image::load(&f)?,
                label: Label::Class(c),
                provenance: Provenance::Unsplit,
            });
        }
        names.push(name);
    }
    Dataset::new(names, samples)
}

/// Parses `class_id cx cy w h` lines with geometry normalized to the image.
pub fn parse_annotations(text: &str, width: usize, height: usize) -> Result<Vec<(BoundingBox, usize)>> {
    let (w, h) = (width as f64, height as f64);
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Data(format!("annotation line {}: expected `class cx cy w h`, got {line:?}", n + 1));
        if fields.len() != 5 {
            return Err(bad());
        }
        let class: usize = fields[0].parse().map_err(|_| bad())?;
        let v: Vec<f64> = fields[1..].iter().map(|s| s.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Data(format!("annotation line {}: values must lie in [0, 1]", n + 1)));
        }
        let bbox = BoundingBox::new((v[0] - v[2] / 2.0) * w, (v[1] - v[3] / 2.0) * h, (v[0] + v[2] / 2.0) * w, (v[1] + v[3] / 2.0) * h)?;
        out.push((bbox.clamp(w, h), class));
    }
    Ok(out)
}

pub fn format_annotations(boxes: &[BoundingBox], width: usize, height: usize) -> String {
    let (w, h) = (width as f64, height as f64);
    boxes
        .iter()
        .map(|b| {
            let (cx, cy) = b.center();
            format!("0 {} {} {} {}\n", cx / w, cy / h, b.width() / w, b.height() / h)
        })
        .collect()
}

/// Loads `root/images/*` with annotations from `root/labels/<stem>.txt`.
/// Every image needs a label file; an empty file means no fish.
pub fn load_detection_dataset(root: &Path) -> Result<Dataset> {
    let files: Vec<PathBuf> = sorted_entries(&root.join("images"))?.into_iter().filter(|p| is_image_file(p)).collect();
    let mut samples = Vec::new();
    for f in files {
        let id = stem(&f);
        let image = Image::load(&f)?;
        let label_path = root.join("labels").join(format!("{id}.txt"));
        let text = fs::read_to_string(&label_path).map_err(|e| Error::Data(format!("{}: {e}", label_path.display())))?;
        let boxes = parse_annotations(&text, image.width, image.height)
            .map_err(|e| Error::Data(format!("{}: {e}", label_path.display())))?
            .into_iter()
            .map(|(b, _)| b)
            .collect();
        samples.push(LabeledImage {
            id,
            image,
            label: Label::Boxes(boxes),
            provenance: Provenance::Unsplit,
        });
    }
    Dataset::new(vec!["fish".into()], samples)
}

/// Writes a classification dataset in the directory-per-class layout.
pub fn save_classification_dataset(dataset: &Dataset, root: &Path, ext: &str) -> Result<()> {
    for name in &dataset.class_names {
        fs::create_dir_all(root.join(name))?;
    }
    for s in &dataset.samples {
        let c = s.class().ok_or_else(|| Error::Data(format!("{:?} is not a classification sample", s.id)))?;
        s.image.save(&root.join(&dataset.class_names[c]).join(format!("{}.{ext}", s.id)))?;
    }
    Ok(())
}

/// Writes a detection dataset as `images/` plus `labels/`.
pub fn save_detection_dataset(dataset: &Dataset, root: &Path, ext: &str) -> Result<()> {
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("labels"))?;
    for s in &dataset.samples {
        let boxes = s.boxes().ok_or_else(|| Error::Data(format!("{:?} is not a detection sample", s.id)))?;
        s.image.save(&root.join("images").join(format!("{}.{ext}", s.id)))?;
        fs::write(
            root.join("labels").join(format!("{}.txt", s.id)),
            format_annotations(boxes, s.image.width, s.image.height),
        )?;
    }
    Ok(())
}

/// Fractions for train, validation, and test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub const CLASSIFICATION: Self = Self {
        train: 0.70,
        val: 0.15,
        test: 0.15,
    };
    /// Detection uses a single held-out part, stored as validation.
    pub const DETECTION: Self = Self {
        train: 0.70,
        val: 0.30,
        test: 0.0,
    };

    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {parts:?} must be in [0, 1] and sum to 1")));
        }
        Ok(())
    }
}

/// Deterministic shuffle-and-partition. Validation and test sizes are
/// `floor(n * fraction)`; the remainder goes to train. With `stratified`,
/// each class is partitioned separately. A group smaller than the number of
/// non-empty parts goes entirely to train with a warning.
pub fn split(dataset: &Dataset, fractions: SplitFractions, seed: u64, stratified: bool) -> Result<DatasetSplit> {
    fractions.validate()?;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        let key = if stratified { s.class().unwrap_or(0) } else { 0 };
        groups.entry(key).or_default().push(i);
    }
    let parts = [fractions.train, fractions.val, fractions.test].iter().filter(|&&f| f > 0.0).count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DatasetSplit {
        class_names: dataset.class_names.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (key, mut idx) in groups {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let (n_val, n_test) = if n < parts {
            let name = dataset.class_names.get(key).map(String::as_str).unwrap_or("?");
            log::warn!("class {name:?} has {n} samples for {parts} split parts; all go to train");
            (0, 0)
        } else {
            ((n as f64 * fractions.val).floor() as usize, (n as f64 * fractions.test).floor() as usize)
        };
        let tag = |i: usize, p: Provenance| LabeledImage {
            provenance: p,
            ..dataset.samples[i].clone()
        };
        out.val.extend(idx[..n_val].iter().map(|&i| tag(i, Provenance::Val)));
        out.test.extend(idx[n_val..n_val + n_test].iter().map(|&i| tag(i, Provenance::Test)));
        out.train.extend(idx[n_val + n_test..].iter().map(|&i| tag(i, Provenance::Train)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy(n_per_class: &[usize]) -> Dataset {
        let mut samples = Vec::new();
        for (c, &n) in n_per_class.iter().enumerate() {
            for k in 0..n {
                samples.push(LabeledImage {
                    id: format!("c{c}_{k}"),
                    image: Image::filled(1, 1, [c as u8, 0, 0]),
                    label: Label::Class(c),
                    provenance: Provenance::Unsplit,
                });
            }
        }
        let names = (0..n_per_class.len()).map(|c| format!("class{c}")).collect();
        Dataset::new(names, samples).unwrap()
    }

    #[test]
    fn detection_split_of_619() {
        let d = dummy(&[619]);
        let s = split(&d, SplitFractions::DETECTION, 3, false).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (434, 185, 0));
        s.validate().unwrap();
    }

    #[test]
    fn same_seed_same_partition() {
        let d = dummy(&[30, 12, 7]);
        let a = split(&d, SplitFractions::CLASSIFICATION, 9, true).unwrap();
        let b = split(&d, SplitFractions::CLASSIFICATION, 9, true).unwrap();
        assert_eq!(a, b);
        let c = split(&d, SplitFractions::CLASSIFICATION, 10, true).unwrap();
        assert_ne!(a.train.iter().map(|s| &s.id).collect::<Vec<_>>(), c.train.iter().map(|s| &s.id).collect::<Vec<_>>());
    }

    #[test]
    fn tiny_class_falls_back_to_train() {
        let d = dummy(&[20, 2]);
        let s = split(&d, SplitFractions::CLASSIFICATION, 1, true).unwrap();
        assert_eq!(histogram(&s.train, 2)[1], 2);
        assert_eq!(histogram(&s.val, 2)[1], 0);
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let f = SplitFractions {
            train: 0.7,
            val: 0.2,
            test: 0.2,
        };
        assert!(split(&dummy(&[5]), f, 0, true).is_err());
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut d = dummy(&[1, 1]);
        d.samples[1].id = d.samples[0].id.clone();
        assert!(Dataset::new(d.class_names.clone(), d.samples).is_err());
    }

    #[test]
    fn annotation_round_trip() {
        let boxes = vec![BoundingBox::new(10.0, 20.0, 50.0, 44.0).unwrap()];
        let text = format_annotations(&boxes, 128, 96);
        let back = parse_annotations(&text, 128, 96).unwrap();
        let b = back[0].0;
        for (x, y) in [(b.x_min, 10.0), (b.y_min, 20.0), (b.x_max, 50.0), (b.y_max, 44.0)] {
            assert!((x - y).abs() < 1e-9);
        }
        assert!(parse_annotations("0 0.5 0.5 0.1", 10, 10).is_err());
        assert!(parse_annotations("0 1.5 0.5 0.1 0.1", 10, 10).is_err());
    }
}
