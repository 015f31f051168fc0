//! Synthetic audio-visual datasets with known classes and boxes, plus the
//! on-disk formats for samples, features, boxes and class labels.
//!
//! Each sample draws a class, places a square object painted with the class
//! colour at a random position in a noisy image, and pairs it with an audio
//! grid holding the class template plus noise. Object position varies per
//! sample while the class signature does not.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::encoders::{AudioFeature, VisionFeature, IMAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::textio::{parse_dim, parse_real, push_reals, Tokens};

/// Axis-aligned box in pixel coordinates, inclusive-exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        (self.x1.saturating_sub(self.x0)) * (self.y1.saturating_sub(self.y0))
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: usize,
    /// `3 × H_v × W_v`.
    pub image: Grid3,
    /// `1 × H_a × W_a`.
    pub audio: Grid3,
    /// Class in `1..=C` when known.
    pub latent_class: Option<usize>,
    pub gt_box: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<SamplePair>,
}

impl Dataset {
    pub fn new(samples: Vec<SamplePair>) -> Result<Self> {
        let d = Self { samples };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.image.height, s.image.width))
    }

    pub fn audio_size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.audio.height, s.audio.width))
    }

    pub fn classes(&self) -> Vec<Option<usize>> {
        self.samples.iter().map(|s| s.latent_class).collect()
    }

    /// Checks uniform positive dimensions and in-bounds, non-empty boxes.
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.samples.first() else {
            return Ok(());
        };
        let img = first.image.shape();
        let aud = first.audio.shape();
        if img.0 != IMAGE_CHANNELS || img.1 == 0 || img.2 == 0 {
            return Err(Error::shape("3 x H_v x W_v image", format!("{img:?}")));
        }
        if aud.0 != 1 || aud.1 == 0 || aud.2 == 0 {
            return Err(Error::shape("1 x H_a x W_a audio", format!("{aud:?}")));
        }
        for s in &self.samples {
            if s.image.shape() != img || s.audio.shape() != aud {
                return Err(Error::shape(
                    format!("{img:?}/{aud:?}"),
                    format!("sample {}: {:?}/{:?}", s.id, s.image.shape(), s.audio.shape()),
                ));
            }
            if let Some(b) = s.gt_box {
                if b.x1 <= b.x0 || b.y1 <= b.y0 || b.x1 > img.2 || b.y1 > img.1 {
                    return Err(Error::InvalidConfig(format!("sample {}: box {b:?} out of bounds", s.id)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_classes: usize,
    /// `(H_v, W_v)`.
    pub image_size: (usize, usize),
    /// `(H_a, W_a)`.
    pub audio_size: (usize, usize),
    pub object_size: usize,
    /// Silent objects of other classes drawn under the sounding one.
    pub distractors: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 200,
            n_classes: 10,
            image_size: (32, 32),
            audio_size: (8, 8),
            object_size: 16,
            distractors: 1,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_samples == 0 {
            return bad("n_samples must be positive".into());
        }
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        let (h, w) = self.image_size;
        let (ah, aw) = self.audio_size;
        if h == 0 || w == 0 || ah == 0 || aw == 0 {
            return bad("image and audio sizes must be positive".into());
        }
        if self.object_size == 0 || self.object_size > h.min(w) {
            return bad(format!(
                "object size {} does not fit a {h}x{w} image",
                self.object_size
            ));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad(format!("noise_std must be finite and nonnegative, got {}", self.noise_std));
        }
        Ok(())
    }
}

/// 2x2 sign tiles (Walsh patterns), mutually orthogonal.
const SIGN_TILES: [[[f64; 2]; 2]; 4] = [
    [[1.0, 1.0], [1.0, 1.0]],
    [[1.0, -1.0], [1.0, -1.0]],
    [[1.0, 1.0], [-1.0, -1.0]],
    [[1.0, -1.0], [-1.0, 1.0]],
];

/// Visual signature of a class: a colour laid out in a 2x2 sign tile.
///
/// The tile is anchored to absolute pixel coordinates, so every fully covered
/// patch of an even-sized patch grid sees the same pattern wherever the object
/// sits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassSignature {
    pub color: [f64; 3],
    pub tile: [[f64; 2]; 2],
}

impl ClassSignature {
    pub fn value(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.color[ch] * self.tile[y % 2][x % 2]
    }
}

/// Signature of class `z` (1-based). Tiles cycle fastest; colours run through
/// the nonzero vectors of `{0, 1}^3`, one-hot first, then two-hot, then
/// three-hot, scaled by `1 + wraps` once all 28 combinations are used.
/// Classes 1..=12 are mutually orthogonal.
pub fn class_signature(z: usize) -> ClassSignature {
    let mut colors: Vec<[f64; 3]> = Vec::with_capacity(7);
    for hot in 1..=3 {
        for code in (1..8usize).rev() {
            if code.count_ones() as usize == hot {
                colors.push([(code >> 2) & 1, (code >> 1) & 1, code & 1].map(|b| b as f64));
            }
        }
    }
    let tile = (z - 1) % SIGN_TILES.len();
    let c = (z - 1) / SIGN_TILES.len();
    let scale = 1.0 + (c / colors.len()) as f64;
    ClassSignature {
        color: colors[c % colors.len()].map(|x| x * scale),
        tile: SIGN_TILES[tile],
    }
}

/// Audio template of class `z` (1-based): ones on the flattened cells whose
/// index is congruent to `z - 1` modulo `n_classes`. Templates of distinct
/// classes have disjoint support.
pub fn audio_template(z: usize, n_classes: usize, audio_size: (usize, usize)) -> Vec<f64> {
    let len = audio_size.0 * audio_size.1;
    (0..len)
        .map(|cell| if cell % n_classes == (z - 1) % n_classes { 1.0 } else { 0.0 })
        .collect()
}

fn paint(image: &mut Grid3, b: &BBox, z: usize) {
    let sig = class_signature(z);
    for ch in 0..IMAGE_CHANNELS {
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                image.set(ch, y, x, sig.value(ch, y, x));
            }
        }
    }
}

/// Generates a dataset. Classes are drawn first for every sample, then each
/// sample draws its object position, each distractor's class and position,
/// image noise and audio noise in that order. The sounding object is painted
/// last, so distractors never cover it.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let classes: Vec<usize> = (0..config.n_samples)
        .map(|_| rng.random_range(1..=config.n_classes))
        .collect();
    let (h, w) = config.image_size;
    let (ah, aw) = config.audio_size;
    let s = config.object_size;
    let mut samples = Vec::with_capacity(config.n_samples);
    for (idx, &z) in classes.iter().enumerate() {
        let y0 = rng.random_range(0..=h - s);
        let x0 = rng.random_range(0..=w - s);
        let gt = BBox {
            x0,
            y0,
            x1: x0 + s,
            y1: y0 + s,
        };
        let mut image = Grid3::zeros(IMAGE_CHANNELS, h, w);
        for _ in 0..config.distractors {
            // Uniform over the other classes.
            let mut d = rng.random_range(1..config.n_classes);
            if d >= z {
                d += 1;
            }
            let dy = rng.random_range(0..=h - s);
            let dx = rng.random_range(0..=w - s);
            paint(&mut image, &BBox { x0: dx, y0: dy, x1: dx + s, y1: dy + s }, d);
        }
        paint(&mut image, &gt, z);
        let mut audio = Grid3::from_vec(1, ah, aw, audio_template(z, config.n_classes, config.audio_size))
            .expect("template length matches audio size");
        if config.noise_std > 0.0 {
            for v in image.data.iter_mut().chain(audio.data.iter_mut()) {
                let e: f64 = rng.sample(StandardNormal);
                *v += config.noise_std * e;
            }
        }
        samples.push(SamplePair {
            id: idx + 1,
            image,
            audio,
            latent_class: Some(z),
            gt_box: Some(gt),
        });
    }
    Dataset::new(samples)
}

/// Encoded features for a dataset, in the order of the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub records: Vec<FeatureRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: usize,
    pub audio: AudioFeature,
    pub vision: VisionFeature,
}

impl FeatureSet {
    pub fn new(records: Vec<FeatureRecord>) -> Result<Self> {
        let (c, h, w) = records
            .first()
            .map(|r| r.vision.0.shape())
            .ok_or_else(|| Error::InvalidConfig("empty feature set".into()))?;
        for r in &records {
            if r.vision.0.shape() != (c, h, w) || r.audio.channels() != c {
                return Err(Error::shape(
                    format!("({c}, {h}, {w})"),
                    format!("record {}: {:?} / {}", r.id, r.vision.0.shape(), r.audio.channels()),
                ));
            }
        }
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            records,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "AVF1 {} {} {} {}\n",
            self.records.len(),
            self.channels,
            self.height,
            self.width
        );
        for r in &self.records {
            out.push_str(&format!("A {}", r.id));
            push_reals(&mut out, &r.audio.0);
            out.push('\n');
            out.push_str(&format!("V {}", r.id));
            push_reals(&mut out, &r.vision.0.data);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut toks = Tokens::new(text);
        let header = toks
            .next_line()
            .ok_or_else(|| Error::MalformedHeader("empty feature file".into()))?;
        if header.len() != 5 || header[0] != "AVF1" {
            return Err(Error::MalformedHeader(format!(
                "expected `AVF1 <n> <c> <h> <w>`, found {:?}",
                header.join(" ")
            )));
        }
        let n = parse_dim(header[1], "n")?;
        let c = parse_dim(header[2], "c")?;
        let h = parse_dim(header[3], "h")?;
        let w = parse_dim(header[4], "w")?;
        let mut records = Vec::with_capacity(n);
        while records.len() < n {
            let truncated = Error::TruncatedPayload {
                expected: n,
                found: records.len(),
            };
            let Some(a_line) = toks.next_line() else {
                return Err(truncated);
            };
            let (id, audio) = parse_record(&a_line, "A", c, toks.line())?;
            let Some(v_line) = toks.next_line() else {
                return Err(truncated);
            };
            let (vid, vision) = parse_record(&v_line, "V", c * h * w, toks.line())?;
            if vid != id {
                return Err(Error::RecordShape {
                    line: toks.line(),
                    msg: format!("V record id {vid} does not follow A record id {id}"),
                });
            }
            records.push(FeatureRecord {
                id,
                audio: AudioFeature(audio),
                vision: VisionFeature(Grid3::from_vec(c, h, w, vision).expect("length checked")),
            });
        }
        if toks.next_line().is_some() {
            return Err(Error::RecordShape {
                line: toks.line(),
                msg: format!("more than the {n} records declared in the header"),
            });
        }
        Self::new(records)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Parses `<tag> <id> v1 ... v_len` from one line.
fn parse_record(toks: &[&str], tag: &str, len: usize, line: usize) -> Result<(usize, Vec<f64>)> {
    if toks[0] != tag {
        return Err(Error::Parse {
            line,
            msg: format!("expected `{tag} <id>` record, found {:?}", toks[0]),
        });
    }
    let id = toks
        .get(1)
        .and_then(|t| t.parse::<usize>().ok())
        .ok_or_else(|| Error::Parse {
            line,
            msg: "missing or invalid record id".into(),
        })?;
    let values = &toks[2..];
    if values.len() != len {
        return Err(Error::RecordShape {
            line,
            msg: format!("`{tag} {id}` has {} values, expected {len}", values.len()),
        });
    }
    let values = values.iter().map(|t| parse_real(t, line)).collect::<Result<_>>()?;
    Ok((id, values))
}

pub fn save_features(features: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    features.save(path)
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    FeatureSet::load(path)
}

/// Raw sample file: header `AVD1 <n> <H_v> <W_v> <H_a> <W_a>`, then per sample a
/// line `I <id>` with `3·H_v·W_v` reals and a line `S <id>` with `H_a·W_a` reals.
pub fn samples_to_text(dataset: &Dataset) -> Result<String> {
    let (h, w) = dataset
        .image_size()
        .ok_or_else(|| Error::InvalidConfig("empty dataset".into()))?;
    let (ah, aw) = dataset.audio_size().unwrap();
    let mut out = format!("AVD1 {} {h} {w} {ah} {aw}\n", dataset.len());
    for s in &dataset.samples {
        out.push_str(&format!("I {}", s.id));
        push_reals(&mut out, &s.image.data);
        out.push('\n');
        out.push_str(&format!("S {}", s.id));
        push_reals(&mut out, &s.audio.data);
        out.push('\n');
    }
    Ok(out)
}

pub fn samples_from_text(text: &str) -> Result<Dataset> {
    let mut toks = Tokens::new(text);
    let header = toks
        .next_line()
        .ok_or_else(|| Error::MalformedHeader("empty sample file".into()))?;
    if header.len() != 6 || header[0] != "AVD1" {
        return Err(Error::MalformedHeader(format!(
            "expected `AVD1 <n> <H_v> <W_v> <H_a> <W_a>`, found {:?}",
            header.join(" ")
        )));
    }
    let n = parse_dim(header[1], "n")?;
    let h = parse_dim(header[2], "H_v")?;
    let w = parse_dim(header[3], "W_v")?;
    let ah = parse_dim(header[4], "H_a")?;
    let aw = parse_dim(header[5], "W_a")?;
    let mut samples = Vec::with_capacity(n);
    while samples.len() < n {
        let truncated = Error::TruncatedPayload {
            expected: n,
            found: samples.len(),
        };
        let Some(i_line) = toks.next_line() else {
            return Err(truncated);
        };
        let (id, image) = parse_record(&i_line, "I", IMAGE_CHANNELS * h * w, toks.line())?;
        let Some(s_line) = toks.next_line() else {
            return Err(truncated);
        };
        let (sid, audio) = parse_record(&s_line, "S", ah * aw, toks.line())?;
        if sid != id {
            return Err(Error::RecordShape {
                line: toks.line(),
                msg: format!("S record id {sid} does not follow I record id {id}"),
            });
        }
        samples.push(SamplePair {
            id,
            image: Grid3::from_vec(IMAGE_CHANNELS, h, w, image).expect("length checked"),
            audio: Grid3::from_vec(1, ah, aw, audio).expect("length checked"),
            latent_class: None,
            gt_box: None,
        });
    }
    if toks.next_line().is_some() {
        return Err(Error::RecordShape {
            line: toks.line(),
            msg: format!("more than the {n} records declared in the header"),
        });
    }
    Dataset::new(samples)
}

pub fn boxes_to_csv(dataset: &Dataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "x0", "y0", "x1", "y1"])?;
    for s in &dataset.samples {
        if let Some(b) = s.gt_box {
            w.write_record([s.id, b.x0, b.y0, b.x1, b.y1].map(|v| v.to_string()))?;
        }
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("ascii csv"))
}

pub fn classes_to_csv(dataset: &Dataset) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "class"])?;
    for s in &dataset.samples {
        if let Some(z) = s.latent_class {
            w.write_record([s.id.to_string(), z.to_string()])?;
        }
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("ascii csv"))
}

fn read_int_csv(text: &str, columns: &[&str]) -> Result<Vec<Vec<usize>>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    if headers.iter().map(str::trim).ne(columns.iter().copied()) {
        return Err(Error::MalformedHeader(format!(
            "expected CSV header {:?}, found {:?}",
            columns.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|t| {
                t.trim().parse::<usize>().map_err(|_| Error::Parse {
                    line: n + 2,
                    msg: format!("expected a nonnegative integer, found {t:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Parses a boxes CSV into `id -> box`.
pub fn boxes_from_csv(text: &str) -> Result<HashMap<usize, BBox>> {
    read_int_csv(text, &["id", "x0", "y0", "x1", "y1"]).map(|rows| {
        rows.into_iter()
            .map(|r| {
                (
                    r[0],
                    BBox {
                        x0: r[1],
                        y0: r[2],
                        x1: r[3],
                        y1: r[4],
                    },
                )
            })
            .collect()
    })
}

pub fn classes_from_csv(text: &str) -> Result<HashMap<usize, usize>> {
    read_int_csv(text, &["id", "class"]).map(|rows| rows.into_iter().map(|r| (r[0], r[1])).collect())
}

pub const SAMPLES_FILE: &str = "samples.avd";
pub const BOXES_FILE: &str = "boxes.csv";
pub const CLASSES_FILE: &str = "classes.csv";
pub const FEATURES_FILE: &str = "features.avf";

/// Writes `samples.avd`, `boxes.csv` and `classes.csv` into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(SAMPLES_FILE), samples_to_text(dataset)?)?;
    fs::write(dir.join(BOXES_FILE), boxes_to_csv(dataset)?)?;
    fs::write(dir.join(CLASSES_FILE), classes_to_csv(dataset)?)?;
    Ok(())
}

/// Loads a dataset directory. Boxes and classes files are optional.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut dataset = samples_from_text(&fs::read_to_string(dir.join(SAMPLES_FILE))?)?;
    let boxes = dir.join(BOXES_FILE);
    if boxes.exists() {
        let map = boxes_from_csv(&fs::read_to_string(boxes)?)?;
        for s in &mut dataset.samples {
            s.gt_box = map.get(&s.id).copied();
        }
    }
    let classes = dir.join(CLASSES_FILE);
    if classes.exists() {
        let map = classes_from_csv(&fs::read_to_string(classes)?)?;
        for s in &mut dataset.samples {
            s.latent_class = map.get(&s.id).copied();
        }
    }
    dataset.validate()?;
    Ok(dataset)
}
