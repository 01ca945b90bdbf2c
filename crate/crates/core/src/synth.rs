//! Seeded generator of confounded toy scenes.
//!
//! A scene is a grid of square blocks, each filled by one object. Unused
//! blocks show the background object. Each class places a pair of objects
//! in adjacent blocks and may scatter optional distractors elsewhere. Image
//! pixels are the object's colour (which may depend on the class) plus
//! Gaussian noise; score pixels are one-hot on the true object except for
//! a fraction of "confused" pixels that favour a random wrong object.
//!
//! The default spec has two class pairs that histogram features cannot
//! separate. Classes 0 and 1 hold the same objects in the same layouts and
//! differ only in which of the two objects is red. Classes 2 and 3 hold
//! two objects painted in the background colour, side by side or stacked,
//! so only the score tensor shows them.

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::filtering::{LabelMap, ScoreTensor};
use crate::io::{Manifest, ManifestEntry, TensorFile};
use crate::rng::RngState;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Horizontal,
    Vertical,
}

/// Two objects in neighbouring blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRule {
    pub first: usize,
    pub second: usize,
    pub orientation: Orientation,
    /// Randomly swap the two positions.
    #[serde(default)]
    pub mirror: bool,
}

/// With `probability`, place the object in `1..=max_count` free blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScatterRule {
    pub object: usize,
    pub probability: f64,
    pub max_count: usize,
}

/// Class-specific colour for one object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColourOverride {
    pub object: usize,
    pub colour: [f64; 3],
    pub spread: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub pair: Option<PairRule>,
    #[serde(default)]
    pub scatter: Vec<ScatterRule>,
    #[serde(default)]
    pub colours: Vec<ColourOverride>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Side of a layout block in pixels.
    pub block: usize,
    /// Image sides must be multiples of this (filter kernel times backbone factors).
    pub divisor: usize,
    pub objects: usize,
    pub background: usize,
    /// Probability that a score pixel is confused.
    pub noise: f64,
    /// Default per-pixel colour noise.
    pub spread: f64,
    /// Default colour for each object.
    pub colours: Vec<[f64; 3]>,
    pub classes: Vec<ClassSpec>,
}

const WALL: [f64; 3] = [0.0, 0.0, 0.0];
const RED: [f64; 3] = [0.9, -0.6, -0.6];
const BLUE: [f64; 3] = [-0.6, -0.6, 0.9];

impl SceneSpec {
    /// 64×64 scenes, 8 objects, 4 classes in two confounded pairs.
    pub fn desk_default() -> Self {
        let scatter = || {
            [3, 6, 7]
                .into_iter()
                .map(|object| ScatterRule { object, probability: 0.5, max_count: 2 })
                .collect::<Vec<_>>()
        };
        let pair = |first, second, orientation| PairRule { first, second, orientation, mirror: true };
        Self {
            seed: 7,
            height: 64,
            width: 64,
            block: 16,
            divisor: 32,
            objects: 8,
            background: 0,
            noise: 0.15,
            spread: 0.1,
            colours: vec![
                WALL,
                RED,
                BLUE,
                RED,
                WALL,
                WALL,
                [0.9, 0.9, -0.6],
                [-0.6, 0.9, 0.9],
            ],
            classes: vec![
                ClassSpec {
                    name: "red-left-object".into(),
                    pair: Some(pair(1, 2, Orientation::Horizontal)),
                    scatter: scatter(),
                    colours: vec![],
                },
                ClassSpec {
                    name: "blue-left-object".into(),
                    pair: Some(pair(1, 2, Orientation::Horizontal)),
                    scatter: scatter(),
                    colours: vec![
                        ColourOverride { object: 1, colour: BLUE, spread: None },
                        ColourOverride { object: 2, colour: RED, spread: None },
                    ],
                },
                ClassSpec {
                    name: "side-by-side".into(),
                    pair: Some(pair(4, 5, Orientation::Horizontal)),
                    scatter: scatter(),
                    colours: vec![],
                },
                ClassSpec {
                    name: "stacked".into(),
                    pair: Some(pair(4, 5, Orientation::Vertical)),
                    scatter: scatter(),
                    colours: vec![],
                },
            ],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| {
            Error::parse(e.span().map_or(0, |s| s.start), e.message().trim().to_string())
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene spec is always serialisable")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::from_toml(&text).map_err(|e| e.in_file(path))
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn grid(&self) -> (usize, usize) {
        (self.height / self.block, self.width / self.block)
    }

    /// Probability that `object` appears in a scene of class `t`.
    pub fn occurrence(&self, t: usize, object: usize) -> f64 {
        let c = &self.classes[t];
        if c.pair.as_ref().is_some_and(|p| p.first == object || p.second == object) {
            return 1.0;
        }
        let miss: f64 = c
            .scatter
            .iter()
            .filter(|s| s.object == object)
            .map(|s| 1.0 - s.probability)
            .product();
        1.0 - miss
    }

    /// Mean colour and spread of `object` in class `t`.
    pub fn appearance(&self, t: usize, object: usize) -> ([f64; 3], f64) {
        match self.classes[t].colours.iter().find(|o| o.object == object) {
            Some(o) => (o.colour, o.spread.unwrap_or(self.spread)),
            None => (self.colours[object], self.spread),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.objects;
        if l < 2 || l > u16::MAX as usize {
            return Err(Error::config("objects", format!("need 2..=65535 object classes, got {l}")));
        }
        if self.classes.len() < 2 {
            return Err(Error::config("classes", "need at least two scene classes"));
        }
        for (k, v) in [("height", self.height), ("width", self.width), ("block", self.block), ("divisor", self.divisor)] {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        for (k, v) in [("height", self.height), ("width", self.width)] {
            if v % self.divisor != 0 {
                return Err(Error::config(k, format!("{v} is not a multiple of divisor {}", self.divisor)));
            }
            if v % self.block != 0 {
                return Err(Error::config(k, format!("{v} is not a multiple of block {}", self.block)));
            }
        }
        if self.background >= l {
            return Err(Error::config("background", format!("object {} out of range", self.background)));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::config("noise", format!("confusion probability must be in [0, 1), got {}", self.noise)));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(Error::config("spread", "must be finite and non-negative"));
        }
        if self.colours.len() != l {
            return Err(Error::config("colours", format!("need one colour per object ({l}), got {}", self.colours.len())));
        }
        let (gh, gw) = self.grid();
        for (t, c) in self.classes.iter().enumerate() {
            let key = |f: &str| format!("classes[{t}].{f}");
            let mut blocks = 0;
            if let Some(p) = &c.pair {
                for o in [p.first, p.second] {
                    if o >= l || o == self.background {
                        return Err(Error::config(key("pair"), format!("object {o} is out of range or the background")));
                    }
                }
                if p.first == p.second {
                    return Err(Error::config(key("pair"), "pair objects must differ"));
                }
                let fits = match p.orientation {
                    Orientation::Horizontal => gw >= 2,
                    Orientation::Vertical => gh >= 2,
                };
                if !fits {
                    return Err(Error::config(key("pair"), "block grid too small for the pair"));
                }
                blocks += 2;
            }
            for s in &c.scatter {
                if s.object >= l || s.object == self.background {
                    return Err(Error::config(key("scatter"), format!("object {} is out of range or the background", s.object)));
                }
                if !(0.0..=1.0).contains(&s.probability) || s.max_count == 0 {
                    return Err(Error::config(key("scatter"), "probability must be in [0, 1] and max_count positive"));
                }
                blocks += s.max_count;
            }
            if blocks > gh * gw {
                return Err(Error::config(key("scatter"), format!("layout needs up to {blocks} blocks, grid has {}", gh * gw)));
            }
            for o in &c.colours {
                if o.object >= l {
                    return Err(Error::config(key("colours"), format!("object {} out of range", o.object)));
                }
                if o.spread.is_some_and(|s| !(s >= 0.0 && s.is_finite())) {
                    return Err(Error::config(key("colours"), "spread must be finite and non-negative"));
                }
            }
        }
        let shared = (0..self.classes.len()).any(|a| {
            (a + 1..self.classes.len()).any(|b| {
                (0..l).any(|o| o != self.background && self.occurrence(a, o) >= 0.5 && self.occurrence(b, o) >= 0.5)
            })
        });
        if !shared {
            return Err(Error::config(
                "classes",
                "no two classes share a likely (p >= 0.5) non-background object; the confound is mandatory",
            ));
        }
        Ok(())
    }

    /// Block-level layout for one scene of class `t`.
    fn layout<R: Rng + ?Sized>(&self, t: usize, rng: &mut R) -> Vec<usize> {
        let (gh, gw) = self.grid();
        let mut grid = vec![self.background; gh * gw];
        let mut free = vec![true; gh * gw];
        let c = &self.classes[t];
        if let Some(p) = &c.pair {
            let (a, b) = match p.orientation {
                Orientation::Horizontal => {
                    let r = rng.random_range(0..gh);
                    let col = rng.random_range(0..gw - 1);
                    (r * gw + col, r * gw + col + 1)
                }
                Orientation::Vertical => {
                    let r = rng.random_range(0..gh - 1);
                    let col = rng.random_range(0..gw);
                    (r * gw + col, (r + 1) * gw + col)
                }
            };
            let (a, b) = if p.mirror && rng.random_bool(0.5) { (b, a) } else { (a, b) };
            grid[a] = p.first;
            grid[b] = p.second;
            free[a] = false;
            free[b] = false;
        }
        for s in &c.scatter {
            if !rng.random_bool(s.probability) {
                continue;
            }
            let count = rng.random_range(1..=s.max_count);
            let mut open: Vec<usize> = (0..free.len()).filter(|&i| free[i]).collect();
            open.shuffle(rng);
            for &i in open.iter().take(count) {
                grid[i] = s.object;
                free[i] = false;
            }
        }
        grid
    }
}

/// One scene of class `t`. Every value is rounded to f32 so a sample read
/// back from disk equals the in-memory one.
pub fn render_sample<R: Rng + ?Sized>(spec: &SceneSpec, t: usize, rng: &mut R) -> Result<Sample> {
    if t >= spec.num_classes() {
        return Err(Error::Argument(format!("class {t} out of range for {} classes", spec.num_classes())));
    }
    let (h, w, l) = (spec.height, spec.width, spec.objects);
    let (_, gw) = spec.grid();
    let blocks = spec.layout(t, rng);
    let mut labels = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            labels.push(blocks[(r / spec.block) * gw + c / spec.block] as u16);
        }
    }
    let appearance: Vec<([f64; 3], f64)> = (0..l).map(|o| spec.appearance(t, o)).collect();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let f32r = |v: f64| v as f32 as f64;
    let mut image = Vec::with_capacity(h * w * 3);
    let mut scores = vec![0.0; h * w * l];
    for (i, &label) in labels.iter().enumerate() {
        let o = label as usize;
        let (mean, spread) = appearance[o];
        for m in mean {
            image.push(f32r(m + spread * unit.sample(rng)));
        }
        let cell = &mut scores[i * l..(i + 1) * l];
        if spec.noise > 0.0 && rng.random_bool(spec.noise) {
            let mut wrong = rng.random_range(0..l - 1);
            if wrong >= o {
                wrong += 1;
            }
            cell[wrong] = f32r(rng.random_range(0.5..0.95));
            cell[o] = f32r(rng.random_range(0.0..0.45));
        } else {
            cell[o] = 1.0;
        }
    }
    Ok(Sample {
        image: Tensor::new(vec![h, w, 3], image)?,
        scores: ScoreTensor::new(Tensor::new(vec![h, w, l], scores)?)?,
        labels: Some(LabelMap::new(h, w, l, labels)?),
        class: t,
        features: None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDataset {
    pub train: Dataset,
    pub test: Dataset,
}

fn split(spec: &SceneSpec, stream: u64, n: usize) -> Result<Dataset> {
    let root = RngState::new(spec.seed);
    let t = spec.num_classes();
    // classes cycle 0..t so counts differ by at most one
    let samples = (0..n)
        .map(|i| render_sample(spec, i % t, &mut root.stream(&[stream, i as u64])))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(t, spec.objects, samples)
}

/// Balanced train and test splits drawn from disjoint random streams.
pub fn generate_dataset(spec: &SceneSpec, n_train: usize, n_test: usize) -> Result<GeneratedDataset> {
    spec.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::Argument("both splits need at least one sample".into()));
    }
    Ok(GeneratedDataset {
        train: split(spec, 0, n_train)?,
        test: split(spec, 1, n_test)?,
    })
}

/// Writes `<dir>/<split>/NNNNNN.{image,scores,labels}.spc`, one manifest per
/// split (`train.manifest`, `test.manifest`) and the spec as `spec.toml`.
pub fn write_dataset(data: &GeneratedDataset, spec: &SceneSpec, dir: &Path) -> Result<()> {
    for (name, ds) in [("train", &data.train), ("test", &data.test)] {
        let mut entries = Vec::with_capacity(ds.len());
        for (i, s) in ds.samples.iter().enumerate() {
            let image = format!("{name}/{i:06}.image.spc");
            let scores = format!("{name}/{i:06}.scores.spc");
            TensorFile::from_tensor_f32(&s.image).write(&dir.join(&image))?;
            TensorFile::from_tensor_f32(s.scores.tensor()).write(&dir.join(&scores))?;
            if let Some(l) = &s.labels {
                TensorFile::from_labels(l).write(&dir.join(format!("{name}/{i:06}.labels.spc")))?;
            }
            entries.push(ManifestEntry { image: image.into(), scores: scores.into(), class: s.class });
        }
        Manifest { classes: ds.classes, objects: ds.objects, entries }.write(&dir.join(format!("{name}.manifest")))?;
    }
    crate::io::write_atomic(&dir.join("spec.toml"), spec.to_toml().as_bytes())
}
