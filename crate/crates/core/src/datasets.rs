//! Caption datasets: a deterministic synthetic generator and a loader for
//! the LEVIR-CC directory layout.
//!
//! On-disk layout (shared by the loader and the toy exporter):
//!
//! ```text
//! root/
//!   LevirCCcaptions.json
//!   images/{train,val,test}/A/<filename>   before images
//!   images/{train,val,test}/B/<filename>   after images
//! ```
//!
//! The caption index is `{"images": [record, ...]}` with records of the form
//! `{"filepath", "filename", "imgid", "split", "changeflag", "sentids",
//! "sentences": [{"tokens", "raw", "imgid", "sentid"}]}`.
//!
//! Toy scenes are a textured bare-land background. A changed pair adds one
//! of: a gray square building, a straight road strip, or the removal of a
//! green vegetation patch present in the before image. Unchanged pairs are
//! two identical images, possibly with vegetation. Pixel values lie on the
//! 8-bit grid.

use std::path::{Path, PathBuf};

use log::warn;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textspace::{tokenize, Vocabulary};
use crate::vision::Image;

pub const CAPTION_INDEX: &str = "LevirCCcaptions.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const UNCHANGED_CAPTION: &str = "the scene is the same as before";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeLabel {
    Unchanged,
    Building,
    Road,
    VegetationRemoved,
    /// Changed pair of unknown type (loaded from a caption index).
    Changed,
}

impl ChangeLabel {
    pub fn is_change(self) -> bool {
        self != ChangeLabel::Unchanged
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.height && x >= self.x0 && x < self.x0 + self.width
    }
}

#[derive(Debug, Clone)]
pub struct CaptionedPair {
    pub id: String,
    pub before: Image,
    pub after: Image,
    /// Reference captions in index order.
    pub captions: Vec<Vec<String>>,
    pub label: ChangeLabel,
    /// Pixels rendered differently in the after image (toy pairs only).
    pub region: Option<Region>,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub name: String,
    pub pairs: Vec<CaptionedPair>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn captions(&self) -> impl Iterator<Item = &Vec<String>> {
        self.pairs.iter().flat_map(|p| p.captions.iter())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&DatasetSplit> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }

    pub fn splits(&self) -> [&DatasetSplit; 3] {
        [&self.train, &self.val, &self.test]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Square side in pixels; a multiple of 8.
    pub image_size: usize,
    /// Fraction of changed pairs.
    pub change_ratio: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            train: 64,
            val: 16,
            test: 16,
            image_size: 32,
            change_ratio: 0.5,
            seed: 0,
        }
    }
}

const BARE_LAND: [f64; 3] = [0.62, 0.52, 0.38];
const TEXTURE: f64 = 0.05;
const BUILDING: [f64; 3] = [0.5, 0.5, 0.5];
const ROAD: [f64; 3] = [0.28, 0.28, 0.3];
const VEGETATION: [f64; 3] = [0.15, 0.45, 0.15];

/// Snap to the 8-bit grid so PNG export is lossless.
fn quantize(mut img: Array3<f64>) -> Image {
    img.mapv_inplace(|v| (v * 255.0).round().clamp(0.0, 255.0) / 255.0);
    Image::new(img).expect("rendered pixels are valid")
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> Array3<f64> {
    Array3::from_shape_fn((size, size, 3), |(_, _, c)| {
        BARE_LAND[c] + rng.gen_range(-TEXTURE..TEXTURE)
    })
}

fn paint(img: &mut Array3<f64>, r: Region, color: [f64; 3], rng: &mut ChaCha8Rng, jitter: f64) {
    for y in r.y0..r.y0 + r.height {
        for x in r.x0..r.x0 + r.width {
            for c in 0..3 {
                let j = if jitter > 0.0 {
                    rng.gen_range(-jitter..jitter)
                } else {
                    0.0
                };
                img[[y, x, c]] = color[c] + j;
            }
        }
    }
}

fn random_square(rng: &mut ChaCha8Rng, size: usize, lo: usize, hi: usize) -> Region {
    let s = rng.gen_range(lo..=hi).min(size - 2);
    Region {
        y0: rng.gen_range(1..=size - s - 1),
        x0: rng.gen_range(1..=size - s - 1),
        height: s,
        width: s,
    }
}

fn quadrant(r: Region, size: usize) -> &'static str {
    let cy = 2 * r.y0 + r.height;
    let cx = 2 * r.x0 + r.width;
    match (cy < size, cx < size) {
        (true, true) => "top left",
        (true, false) => "top right",
        (false, true) => "bottom left",
        (false, false) => "bottom right",
    }
}

fn render_pair(
    rng: &mut ChaCha8Rng,
    size: usize,
    changed: bool,
) -> (Image, Image, ChangeLabel, Option<Region>, String) {
    let scale = size as f64 / 32.0;
    let px = |v: f64| ((v * scale).round() as usize).max(1);
    let mut before = background(rng, size);
    if !changed {
        if rng.gen_bool(0.3) {
            let r = random_square(rng, size, px(5.0), px(9.0));
            paint(&mut before, r, VEGETATION, rng, 0.03);
        }
        let img = quantize(before);
        return (
            img.clone(),
            img,
            ChangeLabel::Unchanged,
            None,
            UNCHANGED_CAPTION.to_string(),
        );
    }
    let kind = rng.gen_range(0..3);
    let mut after = before.clone();
    let (label, region, caption) = match kind {
        0 => {
            let r = random_square(rng, size, px(6.0), px(9.0));
            paint(&mut after, r, BUILDING, rng, 0.0);
            let c = format!("a building appears at the {}", quadrant(r, size));
            (ChangeLabel::Building, r, c)
        }
        1 => {
            let w = px(3.0);
            let offset = rng.gen_range(px(2.0)..=size - w - px(2.0));
            let horizontal = rng.gen_bool(0.5);
            let r = if horizontal {
                Region {
                    y0: offset,
                    x0: 0,
                    height: w,
                    width: size,
                }
            } else {
                Region {
                    y0: 0,
                    x0: offset,
                    height: size,
                    width: w,
                }
            };
            paint(&mut after, r, ROAD, rng, 0.0);
            let dir = if horizontal { "horizontal" } else { "vertical" };
            (
                ChangeLabel::Road,
                r,
                format!("a {dir} road is built across the bare land"),
            )
        }
        _ => {
            let r = random_square(rng, size, px(6.0), px(10.0));
            paint(&mut before, r, VEGETATION, rng, 0.03);
            let c = format!("the trees at the {} are removed", quadrant(r, size));
            (ChangeLabel::VegetationRemoved, r, c)
        }
    };
    (
        quantize(before),
        quantize(after),
        label,
        Some(region),
        caption,
    )
}

/// Deterministic synthetic dataset. Exactly `round(change_ratio * size)`
/// pairs of each split are changed, at positions drawn from the seed.
pub fn generate_toy_dataset(spec: &ToySpec) -> Result<Dataset> {
    if spec.train == 0 || spec.val == 0 || spec.test == 0 {
        return Err(Error::Config("toy split sizes must be at least 1".into()));
    }
    if spec.image_size < 16 || !spec.image_size.is_multiple_of(8) {
        return Err(Error::Config(format!(
            "toy image_size {} must be a multiple of 8 and at least 16",
            spec.image_size
        )));
    }
    if !(0.0..=1.0).contains(&spec.change_ratio) {
        return Err(Error::Config(format!(
            "change_ratio {} outside [0, 1]",
            spec.change_ratio
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut make = |name: &str, count: usize| {
        let n_changed = (spec.change_ratio * count as f64).round() as usize;
        let mut flags: Vec<bool> = (0..count).map(|i| i < n_changed).collect();
        rand::seq::SliceRandom::shuffle(flags.as_mut_slice(), &mut rng);
        let pairs = flags
            .into_iter()
            .enumerate()
            .map(|(i, changed)| {
                let (before, after, label, region, caption) =
                    render_pair(&mut rng, spec.image_size, changed);
                CaptionedPair {
                    id: format!("{name}_{i:06}"),
                    before,
                    after,
                    captions: vec![tokenize(&caption)],
                    label,
                    region,
                }
            })
            .collect();
        DatasetSplit {
            name: name.to_string(),
            pairs,
        }
    };
    Ok(Dataset {
        train: make("train", spec.train),
        val: make("val", spec.val),
        test: make("test", spec.test),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    #[serde(default)]
    pub tokens: Vec<String>,
    #[serde(default)]
    pub raw: Option<String>,
    #[serde(default)]
    pub imgid: Option<usize>,
    #[serde(default)]
    pub sentid: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub filepath: String,
    pub filename: String,
    #[serde(default)]
    pub imgid: Option<usize>,
    pub split: String,
    #[serde(default)]
    pub changeflag: Option<u8>,
    #[serde(default)]
    pub sentids: Vec<usize>,
    pub sentences: Vec<SentenceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionIndex {
    pub images: Vec<ImageRecord>,
}

fn image_path(root: &Path, filepath: &str, side: &str, filename: &str) -> PathBuf {
    root.join("images").join(filepath).join(side).join(filename)
}

/// Write PNG pairs and the caption index under `root`.
pub fn export_levir(dataset: &Dataset, root: &Path) -> Result<()> {
    let mut records = Vec::new();
    let (mut imgid, mut sentid) = (0, 0);
    for split in dataset.splits() {
        for side in ["A", "B"] {
            let dir = root.join("images").join(&split.name).join(side);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for pair in &split.pairs {
            let filename = format!("{}.png", pair.id);
            pair.before
                .save_png(&image_path(root, &split.name, "A", &filename))?;
            pair.after
                .save_png(&image_path(root, &split.name, "B", &filename))?;
            let mut sentences = Vec::new();
            let mut sentids = Vec::new();
            for cap in &pair.captions {
                sentences.push(SentenceRecord {
                    tokens: cap.clone(),
                    raw: Some(format!(" {} .", cap.join(" "))),
                    imgid: Some(imgid),
                    sentid: Some(sentid),
                });
                sentids.push(sentid);
                sentid += 1;
            }
            records.push(ImageRecord {
                filepath: split.name.clone(),
                filename,
                imgid: Some(imgid),
                split: split.name.clone(),
                changeflag: Some(pair.label.is_change() as u8),
                sentids,
                sentences,
            });
            imgid += 1;
        }
    }
    let path = root.join(CAPTION_INDEX);
    let json = serde_json::to_string_pretty(&CaptionIndex { images: records })?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

fn read_index(root: &Path) -> Result<CaptionIndex> {
    let index_path = root.join(CAPTION_INDEX);
    if !index_path.is_file() {
        return Err(Error::MissingDataset(index_path));
    }
    let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", index_path.display())))
}

fn split_slot(rec: &ImageRecord) -> Result<usize> {
    SPLITS
        .iter()
        .position(|s| *s == rec.split)
        .ok_or_else(|| Error::Data(format!("{}: unknown split `{}`", rec.filename, rec.split)))
}

/// Pair id: the file name without its extension.
fn record_id(rec: &ImageRecord) -> String {
    rec.filename
        .rsplit_once('.')
        .map_or(rec.filename.as_str(), |(stem, _)| stem)
        .to_string()
}

/// Captions of a record in index order, re-tokenized from `raw` (or the
/// joined `tokens` when `raw` is absent).
fn record_captions(rec: &ImageRecord) -> Result<Vec<Vec<String>>> {
    let captions = rec
        .sentences
        .iter()
        .map(|s| {
            let words = match &s.raw {
                Some(raw) => tokenize(raw),
                None => tokenize(&s.tokens.join(" ")),
            };
            if words.is_empty() {
                Err(Error::Data(format!("{}: empty caption", rec.filename)))
            } else {
                Ok(words)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if captions.is_empty() {
        return Err(Error::Data(format!("{}: no captions", rec.filename)));
    }
    Ok(captions)
}

/// Pair ids and reference captions of one split, without loading images.
pub fn load_references(root: &Path, split: &str) -> Result<Vec<(String, Vec<Vec<String>>)>> {
    if !SPLITS.contains(&split) {
        return Err(Error::Config(format!("unknown split `{split}`")));
    }
    let index = read_index(root)?;
    let mut out = Vec::new();
    for rec in &index.images {
        if SPLITS[split_slot(rec)?] == split {
            out.push((record_id(rec), record_captions(rec)?));
        }
    }
    Ok(out)
}

/// Load the three splits and build the vocabulary from the training
/// captions. Captions are re-tokenized from `raw` with [`tokenize`].
pub fn load_levir_cc(root: &Path) -> Result<(Dataset, Vocabulary)> {
    let index = read_index(root)?;
    let mut splits: Vec<DatasetSplit> = SPLITS
        .iter()
        .map(|s| DatasetSplit {
            name: s.to_string(),
            pairs: Vec::new(),
        })
        .collect();
    let mut odd_counts = 0;
    for rec in &index.images {
        let slot = split_slot(rec)?;
        let captions = record_captions(rec)?;
        if captions.len() != 5 {
            odd_counts += 1;
        }
        let load = |side| {
            let p = image_path(root, &rec.filepath, side, &rec.filename);
            if !p.is_file() {
                return Err(Error::MissingDataset(p));
            }
            Image::load_png(&p)
        };
        let (before, after) = (load("A")?, load("B")?);
        if before.pixels.dim() != after.pixels.dim() {
            return Err(Error::Data(format!(
                "{}: before/after shapes differ",
                rec.filename
            )));
        }
        splits[slot].pairs.push(CaptionedPair {
            id: record_id(rec),
            before,
            after,
            captions,
            label: match rec.changeflag {
                Some(0) => ChangeLabel::Unchanged,
                _ => ChangeLabel::Changed,
            },
            region: None,
        });
    }
    if odd_counts > 0 {
        warn!("{odd_counts} image pairs do not have exactly five captions; kept as is");
    }
    let mut it = splits.into_iter();
    let dataset = Dataset {
        train: it.next().unwrap(),
        val: it.next().unwrap(),
        test: it.next().unwrap(),
    };
    let corpus: Vec<Vec<String>> = dataset.train.captions().cloned().collect();
    let vocab = Vocabulary::build(&corpus)?;
    Ok((dataset, vocab))
}
