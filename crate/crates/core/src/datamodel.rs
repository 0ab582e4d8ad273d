//! Samples, validity masks, the on-disk dataset layout, the synthetic scene
//! generator and batching.
//!
//! Dataset directory layout (all binary payloads little-endian, row-major):
//!
//! ```text
//! manifest.json
//! image_%05d.f32    3·H·W float32, CHW
//! label_%05d.i32    H·W int32, -1 = unlabeled
//! depth_%05d.f32    H·W float32 metres, 0 = missing
//! normal_%05d.f32   3·H·W float32, CHW, zero vector = missing
//! ```

use std::fmt;
use std::fs;
use std::ops::{Index, IndexMut};
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, invalid, Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Tolerance on the length of a stored (non-missing) normal.
pub const NORMAL_UNIT_TOL: f32 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Segmentation = 0,
    Depth = 1,
    Normals = 2,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Segmentation, TaskId::Depth, TaskId::Normals];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Segmentation => "segmentation",
            TaskId::Depth => "depth",
            TaskId::Normals => "normals",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            TaskId::Segmentation => "seg",
            TaskId::Depth => "depth",
            TaskId::Normals => "normals",
        }
    }

    /// The other two tasks, in fixed order.
    pub fn auxiliaries(self) -> impl Iterator<Item = TaskId> {
        TaskId::ALL.into_iter().filter(move |t| *t != self)
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segmentation" | "seg" | "semantic" => Ok(TaskId::Segmentation),
            "depth" => Ok(TaskId::Depth),
            "normals" | "normal" => Ok(TaskId::Normals),
            _ => Err(invalid!("unknown task {s:?}")),
        }
    }
}

/// One value per task, indexed by [`TaskId`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerTask<T>(pub [T; 3]);

impl<T> Index<TaskId> for PerTask<T> {
    type Output = T;

    fn index(&self, t: TaskId) -> &T {
        &self.0[t.index()]
    }
}

impl<T> IndexMut<TaskId> for PerTask<T> {
    fn index_mut(&mut self, t: TaskId) -> &mut T {
        &mut self.0[t.index()]
    }
}

impl<T> PerTask<T> {
    pub fn try_from_fn<E>(
        mut f: impl FnMut(TaskId) -> std::result::Result<T, E>,
    ) -> std::result::Result<Self, E> {
        let [a, b, c] = TaskId::ALL;
        Ok(PerTask([f(a)?, f(b)?, f(c)?]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (TaskId, &T)> {
        TaskId::ALL.into_iter().zip(self.0.iter())
    }
}

impl<T: Copy> PerTask<T> {
    pub fn splat(v: T) -> Self {
        PerTask([v; 3])
    }

    pub fn from_fn(f: impl Fn(TaskId) -> T) -> Self {
        PerTask(TaskId::ALL.map(f))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(invalid!("unknown split {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub root_path: PathBuf,
    pub split: Split,
    pub image_height: usize,
    pub image_width: usize,
    pub num_classes: usize,
}

impl DatasetSpec {
    pub fn new(
        root_path: impl Into<PathBuf>,
        split: Split,
        height: usize,
        width: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            root_path: root_path.into(),
            split,
            image_height: height,
            image_width: width,
            num_classes,
        }
    }

    /// NYUv2-shaped: 288×384, 13 classes.
    pub fn nyuv2(root_path: impl Into<PathBuf>, split: Split) -> Self {
        Self::new(root_path, split, 288, 384, 13)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.image_height, self.image_width);
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(invalid!(
                "image size {h}x{w} must be positive and divisible by 32"
            ));
        }
        if self.num_classes < 2 {
            return Err(invalid!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            ));
        }
        Ok(())
    }
}

/// One RGB image with its three dense targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(3, H, W)`, values in `[0, 1]`.
    pub image: Tensor,
    /// `H·W` labels, `-1` = unlabeled.
    pub labels: Vec<i32>,
    /// `(1, H, W)` metres, `0` = missing.
    pub depth: Tensor,
    /// `(3, H, W)` unit vectors, zero vector = missing.
    pub normals: Tensor,
}

/// Per-pixel validity of each target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMasks {
    pub seg: Vec<bool>,
    pub depth: Vec<bool>,
    pub normals: Vec<bool>,
}

impl ValidityMasks {
    /// Derives masks from raw targets laid out as `n` planes of `hw` pixels.
    pub fn from_targets(
        labels: &[i32],
        depth: &[f32],
        normals: &[f32],
        n: usize,
        hw: usize,
    ) -> Self {
        let seg = labels.iter().map(|&l| l != -1).collect();
        let depth = depth.iter().map(|&d| d > 0.0).collect();
        let mut nm = vec![false; n * hw];
        for b in 0..n {
            for p in 0..hw {
                let sq: f32 = (0..3).map(|c| normals[(b * 3 + c) * hw + p].powi(2)).sum();
                nm[b * hw + p] = sq.sqrt() > 0.5;
            }
        }
        Self {
            seg,
            depth,
            normals: nm,
        }
    }

    /// `(N_S, N_D, N_N)`.
    pub fn counts(&self) -> (usize, usize, usize) {
        let c = |m: &[bool]| m.iter().filter(|&&v| v).count();
        (c(&self.seg), c(&self.depth), c(&self.normals))
    }
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn masks(&self) -> ValidityMasks {
        let hw = self.height() * self.width();
        ValidityMasks::from_targets(&self.labels, self.depth.data(), self.normals.data(), 1, hw)
    }

    /// Checks shapes and value contracts.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let hw = h * w;
        if self.image.shape() != [3, h, w] {
            return Err(format_err!("image shape {:?}", self.image.shape()));
        }
        if self.labels.len() != hw
            || self.depth.shape() != [1, h, w]
            || self.normals.shape() != [3, h, w]
        {
            return Err(format_err!(
                "target shapes disagree with image {h}x{w}: labels {}, depth {:?}, normals {:?}",
                self.labels.len(),
                self.depth.shape(),
                self.normals.shape()
            ));
        }
        if let Some(v) = self.image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(format_err!("image value {v} outside [0, 1]"));
        }
        if let Some(l) = self
            .labels
            .iter()
            .find(|&&l| l < -1 || l >= num_classes as i32)
        {
            return Err(format_err!("label {l} outside -1..{}", num_classes - 1));
        }
        if let Some(d) = self
            .depth
            .data()
            .iter()
            .find(|d| !d.is_finite() || **d < 0.0)
        {
            return Err(format_err!("depth value {d} is negative or non-finite"));
        }
        let nd = self.normals.data();
        for p in 0..hw {
            let norm = (0..3).map(|c| nd[c * hw + p].powi(2)).sum::<f32>().sqrt();
            if norm != 0.0 && (norm - 1.0).abs() > NORMAL_UNIT_TOL {
                return Err(format_err!("normal at pixel {p} has length {norm}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: FileRecord,
    pub label: FileRecord,
    pub depth: FileRecord,
    pub normal: FileRecord,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub split: Split,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub num_samples: usize,
    pub samples: Vec<SampleRecord>,
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_raw(path: &Path, expected_elems: usize, what: &str) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_elems * 4 {
        return Err(format_err!(
            "{}: {what} holds {} bytes ({} values), manifest implies {} values",
            path.display(),
            bytes.len(),
            bytes.len() / 4,
            expected_elems
        ));
    }
    Ok(bytes)
}

fn read_f32(path: &Path, n: usize, what: &str) -> Result<Vec<f32>> {
    let bytes = read_raw(path, n, what)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect())
}

fn read_i32(path: &Path, n: usize, what: &str) -> Result<Vec<i32>> {
    let bytes = read_raw(path, n, what)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `samples` into `spec.root_path` in the documented layout.
pub fn write_dataset(spec: &DatasetSpec, samples: &[Sample]) -> Result<Manifest> {
    spec.validate()?;
    let (h, w) = (spec.image_height, spec.image_width);
    let root = &spec.root_path;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if s.height() != h || s.width() != w {
            return Err(invalid!(
                "sample {i} is {}x{}, dataset is {h}x{w}",
                s.height(),
                s.width()
            ));
        }
        s.validate(spec.num_classes)?;
        let rec = SampleRecord {
            image: FileRecord {
                file: format!("image_{i:05}.f32"),
                shape: vec![3, h, w],
            },
            label: FileRecord {
                file: format!("label_{i:05}.i32"),
                shape: vec![h, w],
            },
            depth: FileRecord {
                file: format!("depth_{i:05}.f32"),
                shape: vec![h, w],
            },
            normal: FileRecord {
                file: format!("normal_{i:05}.f32"),
                shape: vec![3, h, w],
            },
        };
        write_file(&root.join(&rec.image.file), &f32_bytes(s.image.data()))?;
        let labels: Vec<u8> = s.labels.iter().flat_map(|v| v.to_le_bytes()).collect();
        write_file(&root.join(&rec.label.file), &labels)?;
        write_file(&root.join(&rec.depth.file), &f32_bytes(s.depth.data()))?;
        write_file(&root.join(&rec.normal.file), &f32_bytes(s.normals.data()))?;
        records.push(rec);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        split: spec.split,
        height: h,
        width: w,
        num_classes: spec.num_classes,
        num_samples: samples.len(),
        samples: records,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write_file(&root.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::NotFound(format!(
            "{} has no {MANIFEST_FILE}",
            root.display()
        )));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| format_err!("{}: {e}", path.display()))
}

/// Loads a dataset directory, taking split, size and class count from its
/// manifest.
pub fn open_dataset(root: &Path) -> Result<(DatasetSpec, Vec<Sample>)> {
    let m = read_manifest(root)?;
    let spec = DatasetSpec::new(root, m.split, m.height, m.width, m.num_classes);
    let samples = load_dataset(&spec)?;
    Ok((spec, samples))
}

/// Loads every sample listed in the manifest, in manifest order. Stops at
/// the first malformed sample.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let root = &spec.root_path;
    let m = read_manifest(root)?;
    if m.version != MANIFEST_VERSION {
        return Err(format_err!("unsupported manifest version {}", m.version));
    }
    if m.split != spec.split {
        return Err(format_err!(
            "manifest split {:?} but {:?} requested",
            m.split,
            spec.split
        ));
    }
    if (m.height, m.width, m.num_classes) != (spec.image_height, spec.image_width, spec.num_classes)
    {
        return Err(format_err!(
            "manifest declares {}x{} with {} classes, expected {}x{} with {}",
            m.height,
            m.width,
            m.num_classes,
            spec.image_height,
            spec.image_width,
            spec.num_classes
        ));
    }
    if m.num_samples != m.samples.len() {
        return Err(format_err!(
            "manifest sample count {} but {} records",
            m.num_samples,
            m.samples.len()
        ));
    }
    let (h, w) = (m.height, m.width);
    let hw = h * w;
    let mut out = Vec::with_capacity(m.samples.len());
    for (i, rec) in m.samples.iter().enumerate() {
        let expect = [
            (&rec.image, vec![3, h, w]),
            (&rec.label, vec![h, w]),
            (&rec.depth, vec![h, w]),
            (&rec.normal, vec![3, h, w]),
        ];
        for (r, shape) in &expect {
            if &r.shape != shape {
                return Err(format_err!(
                    "sample {i}: {} declared shape {:?}, expected {:?}",
                    r.file,
                    r.shape,
                    shape
                ));
            }
        }
        let image = read_f32(&root.join(&rec.image.file), 3 * hw, "image")?;
        let labels = read_i32(&root.join(&rec.label.file), hw, "label map")?;
        let depth = read_f32(&root.join(&rec.depth.file), hw, "depth map")?;
        let normals = read_f32(&root.join(&rec.normal.file), 3 * hw, "normal map")?;
        let sample = Sample {
            image: Tensor::from_vec(&[3, h, w], image)?,
            labels,
            depth: Tensor::from_vec(&[1, h, w], depth)?,
            normals: Tensor::from_vec(&[3, h, w], normals)?,
        };
        sample
            .validate(m.num_classes)
            .map_err(|e| format_err!("sample {i}: {e}"))?;
        out.push(sample);
    }
    Ok(out)
}

/// Axis-aligned rectangle `[y0, y1) × [x0, x1)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }
}

/// One planar region of a synthetic scene: `depth(x, y) = a·x + b·y + c`
/// with `x = col / W`, `y = row / H`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneRegion {
    pub rect: Rect,
    pub class: i32,
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl PlaneRegion {
    pub fn unit_normal(&self) -> [f64; 3] {
        let n = [-self.a, -self.b, 1.0];
        let len = (n[0] * n[0] + n[1] * n[1] + 1.0).sqrt();
        [n[0] / len, n[1] / len, n[2] / len]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub sample: Sample,
    pub regions: Vec<PlaneRegion>,
}

pub const SYNTH_MIN_DEPTH: f64 = 0.5;
pub const SYNTH_MAX_DEPTH: f64 = 10.0;
const MIN_REGION_SIDE: usize = 4;
const NOISE_AMPLITUDE: f32 = 0.002;

/// Class colour `(r, g)` on a regular grid inside `[0.1, 0.9]²`.
fn palette(class: i32, num_classes: usize) -> (f32, f32) {
    let side = (num_classes as f64).sqrt().ceil().max(2.0) as i32;
    let step = 0.8 / (side - 1) as f32;
    (
        0.1 + (class % side) as f32 * step,
        0.1 + (class / side) as f32 * step,
    )
}

/// Plane slope `(a, b)` shared by every region of a class.
fn class_slope(class: i32, num_classes: usize) -> (f64, f64) {
    let angle = std::f64::consts::TAU * class as f64 / num_classes as f64;
    let tilt = 0.2 + 0.25 * (class % 3) as f64;
    (tilt * angle.cos(), tilt * angle.sin())
}

fn partition(h: usize, w: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Rect> {
    let mut rects = vec![Rect {
        y0: 0,
        x0: 0,
        y1: h,
        x1: w,
    }];
    while rects.len() < count {
        let splittable: Vec<(usize, bool)> = rects
            .iter()
            .enumerate()
            .flat_map(|(i, r)| {
                let mut v = Vec::new();
                if r.y1 - r.y0 >= 2 * MIN_REGION_SIDE {
                    v.push((i, true));
                }
                if r.x1 - r.x0 >= 2 * MIN_REGION_SIDE {
                    v.push((i, false));
                }
                v
            })
            .collect();
        let Some(&(i, horizontal)) = splittable.choose(rng) else {
            break;
        };
        let r = rects[i];
        let (a, b) = if horizontal {
            let cut = rng.gen_range(r.y0 + MIN_REGION_SIDE..=r.y1 - MIN_REGION_SIDE);
            (Rect { y1: cut, ..r }, Rect { y0: cut, ..r })
        } else {
            let cut = rng.gen_range(r.x0 + MIN_REGION_SIDE..=r.x1 - MIN_REGION_SIDE);
            (Rect { x1: cut, ..r }, Rect { x0: cut, ..r })
        };
        rects[i] = a;
        rects.push(b);
    }
    rects
}

/// Generates scenes together with the plane parameters they were drawn from.
pub fn generate_synthetic_scenes(
    num_samples: usize,
    spec: &DatasetSpec,
    seed: u64,
    missing_fraction: f64,
) -> Result<Vec<SyntheticScene>> {
    if num_samples == 0 {
        return Err(invalid!("num_samples must be positive"));
    }
    if !(0.0..1.0).contains(&missing_fraction) {
        return Err(invalid!(
            "missing_fraction must be in [0, 1), got {missing_fraction}"
        ));
    }
    spec.validate()?;
    let (h, w, nc) = (spec.image_height, spec.image_width, spec.num_classes);
    let hw = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenes = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        let count = rng.gen_range(2..=6);
        let rects = partition(h, w, count, &mut rng);
        let regions: Vec<PlaneRegion> = rects
            .into_iter()
            .map(|rect| {
                let class = rng.gen_range(0..nc as i32);
                let (a, b) = class_slope(class, nc);
                let c = rng.gen_range(1.5..8.5);
                PlaneRegion {
                    rect,
                    class,
                    a,
                    b,
                    c,
                }
            })
            .collect();

        let mut image = Tensor::zeros(&[3, h, w]);
        let mut labels = vec![0i32; hw];
        let mut depth = Tensor::zeros(&[1, h, w]);
        let mut normals = Tensor::zeros(&[3, h, w]);
        for r in &regions {
            let (pr, pg) = palette(r.class, nc);
            let n = r.unit_normal();
            for y in r.rect.y0..r.rect.y1 {
                for x in r.rect.x0..r.rect.x1 {
                    let p = y * w + x;
                    let d = (r.a * x as f64 / w as f64 + r.b * y as f64 / h as f64 + r.c)
                        .clamp(SYNTH_MIN_DEPTH, SYNTH_MAX_DEPTH);
                    labels[p] = r.class;
                    depth.data_mut()[p] = d as f32;
                    for (ch, v) in n.iter().enumerate() {
                        normals.data_mut()[ch * hw + p] = *v as f32;
                    }
                    let dn = ((d - SYNTH_MIN_DEPTH) / (SYNTH_MAX_DEPTH - SYNTH_MIN_DEPTH)) as f32;
                    let img = image.data_mut();
                    img[p] = pr;
                    img[hw + p] = pg;
                    img[2 * hw + p] = dn;
                }
            }
        }
        for v in image.data_mut() {
            *v = (*v + rng.gen_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE)).clamp(0.0, 1.0);
        }
        let missing = (missing_fraction * hw as f64).round() as usize;
        for p in sample_indices(&mut rng, hw, missing).into_iter() {
            depth.data_mut()[p] = 0.0;
            for ch in 0..3 {
                normals.data_mut()[ch * hw + p] = 0.0;
            }
        }
        scenes.push(SyntheticScene {
            sample: Sample {
                image,
                labels,
                depth,
                normals,
            },
            regions,
        });
    }
    Ok(scenes)
}

/// Deterministic synthetic stand-in for NYUv2: planar rectangular regions
/// with mutually consistent labels, depth and normals.
pub fn generate_synthetic(
    num_samples: usize,
    spec: &DatasetSpec,
    seed: u64,
    missing_fraction: f64,
) -> Result<Vec<Sample>> {
    Ok(
        generate_synthetic_scenes(num_samples, spec, seed, missing_fraction)?
            .into_iter()
            .map(|s| s.sample)
            .collect(),
    )
}

/// Samples stacked along a leading batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `(B, 3, H, W)`
    pub images: Tensor,
    /// `B·H·W`
    pub labels: Vec<i32>,
    /// `(B, 1, H, W)`
    pub depth: Tensor,
    /// `(B, 3, H, W)`
    pub normals: Tensor,
    /// Positions of the stacked samples in the source sequence.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample], indices: Vec<usize>) -> Result<Self> {
        let images = Tensor::stack(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let depth = Tensor::stack(&samples.iter().map(|s| &s.depth).collect::<Vec<_>>())?;
        let normals = Tensor::stack(&samples.iter().map(|s| &s.normals).collect::<Vec<_>>())?;
        let labels = samples
            .iter()
            .flat_map(|s| s.labels.iter().copied())
            .collect();
        Ok(Self {
            images,
            labels,
            depth,
            normals,
            indices,
        })
    }

    pub fn size(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[3]
    }

    pub fn masks(&self) -> ValidityMasks {
        let hw = self.height() * self.width();
        ValidityMasks::from_targets(
            &self.labels,
            self.depth.data(),
            self.normals.data(),
            self.size(),
            hw,
        )
    }
}

/// Splits `samples` into batches; the last partial batch is kept. With
/// `shuffle`, the order is a pure function of `seed`.
pub fn make_batches(
    samples: &[Sample],
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(invalid!("batch_size must be at least 1"));
    }
    if samples.is_empty() {
        return Err(invalid!("cannot batch an empty sample sequence"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .map(|idx| {
            Batch::from_samples(
                &idx.iter().map(|&i| &samples[i]).collect::<Vec<_>>(),
                idx.to_vec(),
            )
        })
        .collect()
}

/// Seed for the shuffle of one epoch.
pub fn epoch_shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(epoch as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(root: &Path) -> DatasetSpec {
        DatasetSpec::new(root, Split::Train, 32, 32, 5)
    }

    #[test]
    fn synthetic_is_bitwise_reproducible() {
        let spec = tiny_spec(Path::new("unused"));
        let a = generate_synthetic(4, &spec, 7, 0.1).unwrap();
        let b = generate_synthetic(4, &spec, 7, 0.1).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(4, &spec, 8, 0.1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn no_missing_pixels_when_fraction_is_zero() {
        let spec = tiny_spec(Path::new("unused"));
        for s in generate_synthetic(3, &spec, 1, 0.0).unwrap() {
            let m = s.masks();
            assert!(m.depth.iter().all(|&v| v));
            assert!(m.normals.iter().all(|&v| v));
        }
    }

    #[test]
    fn missing_fraction_is_exact_and_shared_by_depth_and_normals() {
        let spec = tiny_spec(Path::new("unused"));
        for s in generate_synthetic(3, &spec, 2, 0.25).unwrap() {
            let m = s.masks();
            let (_, nd, nn) = m.counts();
            assert_eq!(nd, 1024 - 256);
            assert_eq!(m.depth, m.normals);
            assert_eq!(nn, nd);
        }
    }

    #[test]
    fn generated_normals_match_plane_coefficients() {
        let spec = tiny_spec(Path::new("unused"));
        for scene in generate_synthetic_scenes(6, &spec, 11, 0.1).unwrap() {
            assert!((2..=6).contains(&scene.regions.len()));
            let s = &scene.sample;
            let m = s.masks();
            let hw = 1024;
            for y in 0..32 {
                for x in 0..32 {
                    let p = y * 32 + x;
                    let owners: Vec<_> = scene
                        .regions
                        .iter()
                        .filter(|r| r.rect.contains(y, x))
                        .collect();
                    assert_eq!(owners.len(), 1, "regions must partition the image");
                    let r = owners[0];
                    assert_eq!(s.labels[p], r.class);
                    if !m.normals[p] {
                        continue;
                    }
                    // independent recomputation from the plane coefficients
                    let len = (r.a * r.a + r.b * r.b + 1.0).sqrt();
                    let expect = [-r.a / len, -r.b / len, 1.0 / len];
                    for (c, e) in expect.iter().enumerate() {
                        assert!((s.normals.data()[c * hw + p] as f64 - e).abs() < 1e-6);
                    }
                    let d = r.a * x as f64 / 32.0 + r.b * y as f64 / 32.0 + r.c;
                    assert!((s.depth.data()[p] as f64 - d).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn invalid_generator_arguments() {
        let spec = tiny_spec(Path::new("unused"));
        assert!(matches!(
            generate_synthetic(1, &spec, 0, 1.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            generate_synthetic(0, &spec, 0, 0.0),
            Err(Error::InvalidArgument(_))
        ));
        let bad = DatasetSpec::new("x", Split::Train, 30, 32, 5);
        assert!(generate_synthetic(1, &bad, 0, 0.0).is_err());
    }

    #[test]
    fn batch_sizes_and_order() {
        let spec = tiny_spec(Path::new("unused"));
        let samples = generate_synthetic(5, &spec, 3, 0.0).unwrap();
        let batches = make_batches(&samples, 2, false, 0).unwrap();
        assert_eq!(
            batches.iter().map(Batch::size).collect::<Vec<_>>(),
            vec![2, 2, 1]
        );
        let order: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        assert_eq!(order, vec![0, 1, 2, 3, 4]);
        assert_eq!(batches[1].images.index0(0), samples[2].image);

        let s1 = make_batches(&samples, 2, true, 9).unwrap();
        let s2 = make_batches(&samples, 2, true, 9).unwrap();
        assert_eq!(s1, s2);
        let mut seen: Vec<usize> = s1.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);

        assert!(make_batches(&samples, 0, false, 0).is_err());
        assert!(make_batches(&[], 2, false, 0).is_err());
    }

    #[test]
    fn nyuv2_sized_train_split_gives_398_batches() {
        let spec = tiny_spec(Path::new("unused"));
        let samples = generate_synthetic(795, &spec, 0, 0.0).unwrap();
        assert_eq!(make_batches(&samples, 2, true, 1).unwrap().len(), 398);
    }

    #[test]
    fn masks_follow_sentinels() {
        let labels = vec![-1, 0, 2, -1];
        let depth = vec![0.0, 1.0, 0.0, 3.0];
        let normals = vec![0.0, 1.0, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let m = ValidityMasks::from_targets(&labels, &depth, &normals, 1, 4);
        assert_eq!(m.seg, vec![false, true, true, false]);
        assert_eq!(m.depth, vec![false, true, false, true]);
        assert_eq!(m.normals, vec![false, true, false, false]);
        assert_eq!(m.counts(), (2, 2, 1));
    }
}
