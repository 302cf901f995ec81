//! Labelled sliding-contact datasets: sampling, splitting and persistence.
//!
//! Each sample draws a labelled pose uniformly from the label ranges and a
//! slide perturbation uniformly from the slide ranges, then renders the
//! image at (pose, slide). Only the pose enters the label.
//!
//! On disk a dataset is a directory:
//!
//! ```text
//! manifest.toml   format/version, plan, sensor, split, checksum
//! labels.csv      index,offset_mm,angle_deg,depth_mm,slide_x_mm,slide_y_mm,slide_angle_deg
//! images/NNNNNN.pgm  8-bit binary greymaps, one per sample
//! ```
//!
//! The checksum is the SHA-256 of the manifest serialised with an empty
//! checksum, followed by the label CSV bytes and every PGM in index order.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::pgm;
use crate::rng;
use crate::tactsim::{ContactParams, Renderer, SensorSpec, SimError, TactileImage, Task};

pub const FORMAT: &str = "tacservo-dataset";
pub const VERSION: u32 = 1;
pub const LABEL_HEADER: &str = "index,offset_mm,angle_deg,depth_mm,slide_x_mm,slide_y_mm,slide_angle_deg";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported dataset format `{found}` (expected {FORMAT} v{VERSION})")]
    Version { found: String },
    #[error("checksum mismatch: manifest says {expected}, content hashes to {actual}")]
    Checksum { expected: String, actual: String },
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("invalid collection plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Closed interval `[lo, hi]`; serialised as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    pub fn lo(&self) -> f64 {
        self.0
    }

    pub fn hi(&self) -> f64 {
        self.1
    }

    pub fn width(&self) -> f64 {
        self.1 - self.0
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.0 + self.1)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.0 && v <= self.1
    }

    pub fn within(&self, outer: &Range) -> bool {
        self.0 >= outer.0 && self.1 <= outer.1
    }

    pub fn sample(&self, rng: &mut impl rand::RngCore) -> f64 {
        rng::uniform(rng, self.0, self.1)
    }
}

/// Sampling plan for one stimulus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectionPlan {
    pub task: Task,
    /// Labelled offset (edge: across the edge; surface: contact depth), mm.
    pub offset: Range,
    /// Unlabelled contact height, mm (edge only).
    pub depth: Range,
    /// Labelled angle, degrees.
    pub angle: Range,
    pub slide_x: Range,
    pub slide_y: Range,
    pub slide_angle: Range,
    pub n_samples: usize,
    pub seed: u64,
}

impl CollectionPlan {
    /// Label and slide ranges for sliding contacts on a straight edge or a
    /// flat surface, 5000 samples.
    pub fn defaults(task: Task) -> Self {
        match task {
            Task::Edge => CollectionPlan {
                task,
                offset: Range(-5.0, 5.0),
                depth: Range(-1.0, 1.0),
                angle: Range(-45.0, 45.0),
                slide_x: Range(-5.0, 5.0),
                slide_y: Range(-5.0, 5.0),
                slide_angle: Range(-5.0, 5.0),
                n_samples: 5000,
                seed: 0,
            },
            Task::Surface => CollectionPlan {
                task,
                offset: Range(-5.0, -1.0),
                depth: Range(0.0, 0.0),
                angle: Range(-30.0, 30.0),
                slide_x: Range(-5.0, 5.0),
                slide_y: Range(0.0, 0.0),
                slide_angle: Range(-5.0, 5.0),
                n_samples: 5000,
                seed: 0,
            },
        }
    }

    pub fn with_samples(mut self, n: usize) -> Self {
        self.n_samples = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Same plan with every slide range collapsed to zero.
    pub fn without_slides(mut self) -> Self {
        self.slide_x = Range(0.0, 0.0);
        self.slide_y = Range(0.0, 0.0);
        self.slide_angle = Range(0.0, 0.0);
        self
    }

    /// Ranges of the two regression targets, (offset, angle).
    pub fn label_ranges(&self) -> [Range; 2] {
        [self.offset, self.angle]
    }

    fn named_ranges(&self) -> [(&'static str, Range); 6] {
        [
            ("offset", self.offset),
            ("depth", self.depth),
            ("angle", self.angle),
            ("slide_x", self.slide_x),
            ("slide_y", self.slide_y),
            ("slide_angle", self.slide_angle),
        ]
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::Plan(m));
        for (name, r) in self.named_ranges() {
            if !(r.0.is_finite() && r.1.is_finite()) || r.0 > r.1 {
                return err(format!("{name}: need finite lo <= hi, got [{}, {}]", r.0, r.1));
            }
        }
        if !Range(-180.0, 180.0).contains(self.angle.0) || !Range(-180.0, 180.0).contains(self.angle.1) {
            return err(format!("angle: [{}, {}] outside [-180, 180]", self.angle.0, self.angle.1));
        }
        let mm = Range(-crate::tactsim::MAX_SLIDE_MM, crate::tactsim::MAX_SLIDE_MM);
        let deg = Range(-crate::tactsim::MAX_SLIDE_DEG, crate::tactsim::MAX_SLIDE_DEG);
        for (name, r, lim) in [
            ("slide_x", self.slide_x, mm),
            ("slide_y", self.slide_y, mm),
            ("slide_angle", self.slide_angle, deg),
        ] {
            if !r.within(&lim) {
                return err(format!("{name}: [{}, {}] outside [{}, {}]", r.0, r.1, lim.0, lim.1));
            }
        }
        if self.task == Task::Surface && self.slide_y != Range(0.0, 0.0) {
            return err("slide_y: surface contacts slide only tangentially, range must be [0, 0]".into());
        }
        if self.task == Task::Surface && self.depth != Range(0.0, 0.0) {
            return err("depth: surface contacts have no separate nuisance depth, range must be [0, 0]".into());
        }
        if self.n_samples == 0 {
            return err("n_samples must be > 0".into());
        }
        Ok(())
    }

    /// Names of ranges that exceed the defaults for this task.
    pub fn exceeds_defaults(&self) -> Vec<&'static str> {
        let def = CollectionPlan::defaults(self.task);
        self.named_ranges()
            .iter()
            .zip(def.named_ranges().iter())
            .filter(|((_, r), (_, d))| !r.within(d))
            .map(|((n, _), _)| *n)
            .collect()
    }

    /// Contact and render seed of the `index`-th sample.
    pub fn draw(&self, index: usize) -> (ContactParams, u64) {
        let mut r = rng::rng(rng::item_seed(self.seed, index as u64));
        let offset = self.offset.sample(&mut r);
        let depth = self.depth.sample(&mut r);
        let angle = self.angle.sample(&mut r);
        let slide_x = self.slide_x.sample(&mut r);
        let slide_y = self.slide_y.sample(&mut r);
        let slide_angle = self.slide_angle.sample(&mut r);
        let contact = ContactParams {
            task: self.task,
            offset,
            depth,
            angle,
            slide_x,
            slide_y,
            slide_angle,
        };
        (contact, rand::RngCore::next_u64(&mut r))
    }

    /// Whether a contact lies inside every range (boundaries included).
    pub fn admits(&self, c: &ContactParams) -> bool {
        c.task == self.task
            && self.offset.contains(c.offset)
            && self.depth.contains(c.depth)
            && self.angle.contains(c.angle)
            && self.slide_x.contains(c.slide_x)
            && self.slide_y.contains(c.slide_y)
            && self.slide_angle.contains(c.slide_angle)
    }
}

/// Regression target: the labelled pose only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub offset: f64,
    pub angle: f64,
}

impl Label {
    pub fn as_array(&self) -> [f64; 2] {
        [self.offset, self.angle]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: TactileImage,
    pub label: Label,
    /// Full contact record, slides included, for audit.
    pub contact: ContactParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub plan: CollectionPlan,
    pub sensor: SensorSpec,
    pub samples: Vec<Sample>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.75;

/// Samples, renders and splits a dataset. Deterministic in `(plan, spec)`.
pub fn collect(plan: &CollectionPlan, spec: &SensorSpec) -> Result<Dataset, DataError> {
    plan.validate()?;
    let renderer = Renderer::new(spec)?;
    let rendered = crate::par::map_range(plan.n_samples, |i| {
        let (contact, seed) = plan.draw(i);
        renderer.render(&contact, seed).map(|img| Sample {
            image: img.quantized(),
            label: Label {
                offset: contact.offset,
                angle: contact.angle,
            },
            contact,
        })
    });
    let samples = rendered.into_iter().collect::<Result<Vec<_>, _>>()?;
    let d = Dataset {
        plan: plan.clone(),
        sensor: spec.clone(),
        samples,
        train: Vec::new(),
        test: Vec::new(),
    };
    Ok(split(d, DEFAULT_TRAIN_FRACTION, plan.seed))
}

/// Seeded permutation split into disjoint, exhaustive train/test index sets
/// (each sorted ascending); the train set holds `round(n·fraction)` samples.
pub fn split(mut d: Dataset, train_fraction: f64, seed: u64) -> Dataset {
    assert!(
        train_fraction > 0.0 && train_fraction < 1.0,
        "train fraction must lie in (0, 1)"
    );
    let n = d.samples.len();
    let mut idx: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut rng::derived(seed, "split"), &mut idx);
    let n_train = (n as f64 * train_fraction).round() as usize;
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    d.train = train;
    d.test = test;
    d
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    n_samples: usize,
    image_width: usize,
    image_height: usize,
    checksum: String,
    train: Vec<usize>,
    test: Vec<usize>,
    plan: CollectionPlan,
    sensor: SensorSpec,
}

fn label_csv(samples: &[Sample]) -> String {
    let mut out = String::with_capacity(64 * (samples.len() + 1));
    out.push_str(LABEL_HEADER);
    out.push('\n');
    for (i, s) in samples.iter().enumerate() {
        let c = &s.contact;
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{},{}",
            c.offset, c.angle, c.depth, c.slide_x, c.slide_y, c.slide_angle
        );
    }
    out
}

fn manifest_text(d: &Dataset, checksum: &str) -> String {
    let (w, h) = d
        .samples
        .first()
        .map(|s| (s.image.width(), s.image.height()))
        .unwrap_or((d.sensor.image_width, d.sensor.image_height));
    let m = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        n_samples: d.samples.len(),
        image_width: w,
        image_height: h,
        checksum: checksum.into(),
        train: d.train.clone(),
        test: d.test.clone(),
        plan: d.plan.clone(),
        sensor: d.sensor.clone(),
    };
    toml::to_string(&m).expect("manifest serialises")
}

fn checksum_of(manifest_blank: &str, labels: &str, images: &[Vec<u8>]) -> String {
    let mut h = Sha256::new();
    h.update(manifest_blank.as_bytes());
    h.update(labels.as_bytes());
    for img in images {
        h.update(img);
    }
    to_hex(&h.finalize())
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(2 * bytes.len()), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn train_samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().map(|&i| &self.samples[i])
    }

    pub fn test_samples(&self) -> impl Iterator<Item = &Sample> {
        self.test.iter().map(|&i| &self.samples[i])
    }

    /// SHA-256 content hash over plan, sensor, split, labels and images.
    pub fn content_hash(&self) -> String {
        let images: Vec<Vec<u8>> = self.samples.iter().map(|s| pgm::encode(&s.image)).collect();
        checksum_of(&manifest_text(self, ""), &label_csv(&self.samples), &images)
    }

    pub fn save(&self, dir: &Path) -> Result<String, DataError> {
        let images: Vec<Vec<u8>> = self.samples.iter().map(|s| pgm::encode(&s.image)).collect();
        let labels = label_csv(&self.samples);
        let checksum = checksum_of(&manifest_text(self, ""), &labels, &images);
        fs::create_dir_all(dir.join("images"))?;
        for (i, bytes) in images.iter().enumerate() {
            fs::write(dir.join("images").join(format!("{i:06}.pgm")), bytes)?;
        }
        fs::write(dir.join("labels.csv"), labels)?;
        fs::write(dir.join("manifest.toml"), manifest_text(self, &checksum))?;
        Ok(checksum)
    }

    pub fn load(dir: &Path) -> Result<Dataset, DataError> {
        let text = fs::read_to_string(dir.join("manifest.toml"))?;
        let raw: toml::Table = toml::from_str(&text).map_err(|e| DataError::Format(e.to_string()))?;
        let format = raw.get("format").and_then(|v| v.as_str()).unwrap_or_default();
        let version = raw.get("version").and_then(|v| v.as_integer()).unwrap_or(-1);
        if format != FORMAT || version != VERSION as i64 {
            return Err(DataError::Version {
                found: format!("{format} v{version}"),
            });
        }
        let m: Manifest = toml::from_str(&text).map_err(|e| DataError::Format(e.to_string()))?;
        let labels_text = fs::read_to_string(dir.join("labels.csv"))?;
        let mut images = Vec::with_capacity(m.n_samples);
        for i in 0..m.n_samples {
            images.push(fs::read(dir.join("images").join(format!("{i:06}.pgm")))?);
        }
        let mut lines = labels_text.lines();
        if lines.next() != Some(LABEL_HEADER) {
            return Err(DataError::Format("labels.csv header mismatch".into()));
        }
        let mut samples = Vec::with_capacity(m.n_samples);
        for (i, (line, bytes)) in lines.zip(&images).enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 || f[0].parse::<usize>().ok() != Some(i) {
                return Err(DataError::Format(format!("labels.csv row {}: bad record", i + 2)));
            }
            let num = |k: usize| {
                f[k].parse::<f64>()
                    .map_err(|_| DataError::Format(format!("labels.csv row {}: bad number `{}`", i + 2, f[k])))
            };
            let contact = ContactParams {
                task: m.plan.task,
                offset: num(1)?,
                angle: num(2)?,
                depth: num(3)?,
                slide_x: num(4)?,
                slide_y: num(5)?,
                slide_angle: num(6)?,
            };
            let image = pgm::decode(bytes).map_err(|e| DataError::Format(format!("image {i}: {e}")))?;
            if image.width() != m.image_width || image.height() != m.image_height {
                return Err(DataError::Format(format!("image {i}: unexpected size")));
            }
            samples.push(Sample {
                image,
                label: Label {
                    offset: contact.offset,
                    angle: contact.angle,
                },
                contact,
            });
        }
        if samples.len() != m.n_samples {
            return Err(DataError::Format(format!(
                "labels.csv has {} rows, manifest says {}",
                samples.len(),
                m.n_samples
            )));
        }
        let d = Dataset {
            plan: m.plan,
            sensor: m.sensor,
            samples,
            train: m.train,
            test: m.test,
        };
        let actual = checksum_of(&manifest_text(&d, ""), &labels_text, &images);
        if actual != m.checksum {
            return Err(DataError::Checksum {
                expected: m.checksum,
                actual,
            });
        }
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: Task, n: usize) -> Dataset {
        collect(&CollectionPlan::defaults(task).with_samples(n).with_seed(9), &SensorSpec::tactip()).unwrap()
    }

    #[test]
    fn defaults_match_collection_table() {
        let e = CollectionPlan::defaults(Task::Edge);
        assert_eq!((e.offset, e.depth, e.angle), (Range(-5.0, 5.0), Range(-1.0, 1.0), Range(-45.0, 45.0)));
        assert_eq!((e.slide_x, e.slide_y, e.slide_angle), (Range(-5.0, 5.0), Range(-5.0, 5.0), Range(-5.0, 5.0)));
        let s = CollectionPlan::defaults(Task::Surface);
        assert_eq!((s.offset, s.angle), (Range(-5.0, -1.0), Range(-30.0, 30.0)));
        assert_eq!((s.slide_x, s.slide_y, s.slide_angle), (Range(-5.0, 5.0), Range(0.0, 0.0), Range(-5.0, 5.0)));
        assert_eq!(e.n_samples, 5000);
        assert!(e.exceeds_defaults().is_empty());
    }

    #[test]
    fn labels_are_pose_only_and_within_ranges() {
        let d = small(Task::Edge, 64);
        for s in &d.samples {
            assert!(d.plan.admits(&s.contact));
            assert_eq!(s.label.offset, s.contact.offset);
            assert_eq!(s.label.angle, s.contact.angle);
        }
        let label_fields: Vec<&str> = LABEL_HEADER.split(',').collect();
        assert_eq!(&label_fields[1..3], &["offset_mm", "angle_deg"]);
        assert_eq!(std::mem::size_of::<Label>(), 2 * std::mem::size_of::<f64>());
    }

    #[test]
    fn drawn_labels_are_uniform() {
        // One-sample Kolmogorov-Smirnov against U(lo, hi) at alpha = 0.01.
        let plan = CollectionPlan::defaults(Task::Edge).with_seed(4);
        let n = plan.n_samples;
        let crit = 1.628 / (n as f64).sqrt();
        for (pick, r) in [(0usize, plan.offset), (1, plan.angle)] {
            let mut v: Vec<f64> = (0..n)
                .map(|i| {
                    let c = plan.draw(i).0;
                    if pick == 0 {
                        c.offset
                    } else {
                        c.angle
                    }
                })
                .collect();
            assert!(v.iter().all(|x| r.contains(*x)));
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let d = v
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let f = (x - r.lo()) / r.width();
                    (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
                })
                .fold(0.0, f64::max);
            assert!(d < crit, "KS statistic {d} >= {crit}");
        }
    }

    #[test]
    fn collection_is_deterministic() {
        let a = small(Task::Surface, 1);
        let b = small(Task::Surface, 1);
        assert_eq!(a, b);
        assert_eq!(pgm::encode(&a.samples[0].image), pgm::encode(&b.samples[0].image));
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.samples[0].contact.slide_y, 0.0);
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let d = small(Task::Edge, 4);
        assert_eq!((d.train.len(), d.test.len()), (3, 1));
        let d = split(d, 0.75, 5);
        let again = split(d.clone(), 0.75, 5);
        assert_eq!((d.train.clone(), d.test.clone()), (again.train, again.test));
        let mut all: Vec<usize> = d.train.iter().chain(&d.test).copied().collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn five_thousand_split_three_to_one() {
        let d = Dataset {
            plan: CollectionPlan::defaults(Task::Edge),
            sensor: SensorSpec::tactip(),
            samples: vec![
                Sample {
                    image: TactileImage::new(1, 1, 0.0),
                    label: Label { offset: 0.0, angle: 0.0 },
                    contact: ContactParams::edge(0.0, 0.0, 0.0),
                };
                5000
            ],
            train: vec![],
            test: vec![],
        };
        let d = split(d, 0.75, 1);
        assert_eq!((d.train.len(), d.test.len()), (3750, 1250));
    }

    #[test]
    fn save_load_round_trip_and_checksum() {
        let d = small(Task::Edge, 6);
        let dir = tempfile::tempdir().unwrap();
        let sum = d.save(dir.path()).unwrap();
        assert_eq!(sum, d.content_hash());
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.content_hash(), sum);

        // Flip one pixel.
        let p = dir.path().join("images/000003.pgm");
        let mut bytes = fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(DataError::Checksum { .. })));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let d = small(Task::Edge, 2);
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let m = dir.path().join("manifest.toml");
        let text = fs::read_to_string(&m).unwrap().replace("version = 1", "version = 7");
        fs::write(&m, text).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(DataError::Version { .. })));
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let mut p = CollectionPlan::defaults(Task::Edge);
        p.angle = Range(-200.0, 45.0);
        assert!(matches!(p.validate(), Err(DataError::Plan(m)) if m.starts_with("angle")));
        let mut p = CollectionPlan::defaults(Task::Surface);
        p.slide_y = Range(-1.0, 1.0);
        assert!(p.validate().is_err());
        let mut p = CollectionPlan::defaults(Task::Edge);
        p.offset = Range(-8.0, 5.0);
        assert_eq!(p.exceeds_defaults(), vec!["offset"]);
    }
}
