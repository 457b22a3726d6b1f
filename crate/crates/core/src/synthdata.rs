//! Procedural audio-visual clips.
//!
//! Three kinds of scene:
//! - easy: one or two objects of distinct classes whose sounding state never
//!   changes;
//! - case 1: two nearby objects of the same class and look, exactly one of
//!   them sounding per frame;
//! - case 2: objects that switch between sounding and silent within the clip.
//!
//! Audio is an abstract descriptor per frame: the sum of the class
//! embeddings of every sounding object plus Gaussian noise.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mix_seed, tensor_file, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipKind {
    Easy,
    Case1,
    Case2,
}

impl ClipKind {
    pub const ALL: [ClipKind; 3] = [ClipKind::Easy, ClipKind::Case1, ClipKind::Case2];

    pub fn name(self) -> &'static str {
        match self {
            ClipKind::Easy => "easy",
            ClipKind::Case1 => "case1",
            ClipKind::Case2 => "case2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub class_id: usize,
    pub shape: Shape,
    pub color: [f32; 3],
    /// `(row, col)` in pixels.
    pub center: [f32; 2],
    pub radius: f32,
}

impl SceneObject {
    fn covers(&self, row: f32, col: f32) -> bool {
        let (dy, dx) = (row - self.center[0], col - self.center[1]);
        let r = self.radius;
        match self.shape {
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Square => {
                let half = 0.85 * r;
                dx.abs() <= half && dy.abs() <= half
            }
            Shape::Triangle => {
                // Apex up, base at dy = r/2.
                let (top, base) = (-r, 0.5 * r);
                if dy < top || dy > base {
                    return false;
                }
                let half_width = (dy - top) / (base - top) * r * 0.866 * 1.2;
                dx.abs() <= half_width
            }
        }
    }
}

/// Complete description of one clip; rendering is a pure function of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub kind: ClipKind,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub classes: usize,
    /// Back to front.
    pub objects: Vec<SceneObject>,
    /// `schedule[o][t]`: object `o` sounds at frame `t`.
    pub schedule: Vec<Vec<bool>>,
    /// `audio_table[c]` for `c ∈ [0, classes)`; row 0 is unused.
    pub audio_table: Vec<Vec<f32>>,
    pub noise: f32,
    pub pixel_noise: f32,
    /// Brightness added to sounding objects.
    pub cue_strength: f32,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(Error::Data("empty canvas or clip".into()));
        }
        if self.schedule.len() != self.objects.len()
            || self.schedule.iter().any(|s| s.len() != self.frames)
        {
            return Err(Error::Data(
                "schedule must give one flag per object per frame".into(),
            ));
        }
        if self.audio_table.len() != self.classes || self.classes < 2 {
            return Err(Error::Data("audio table needs one row per class".into()));
        }
        for o in &self.objects {
            if o.radius < 2.0 {
                return Err(Error::Data(format!(
                    "object radius {} below 2 px",
                    o.radius
                )));
            }
            if o.class_id == 0 || o.class_id >= self.classes {
                return Err(Error::Data(format!(
                    "class id {} outside [1, {})",
                    o.class_id, self.classes
                )));
            }
        }
        if !self.objects.is_empty() && !(0..self.frames).any(|t| self.schedule.iter().any(|s| s[t]))
        {
            return Err(Error::Data("every frame is silent".into()));
        }
        Ok(())
    }

    pub fn audio_dim(&self) -> usize {
        self.audio_table.first().map_or(0, Vec::len)
    }

    pub fn sounding_count(&self, t: usize) -> usize {
        self.schedule.iter().filter(|s| s[t]).count()
    }

    /// Number of state changes in one object's schedule.
    pub fn transitions(&self, object: usize) -> usize {
        self.schedule[object]
            .windows(2)
            .filter(|w| w[0] != w[1])
            .count()
    }

    /// True when no object changes state.
    pub fn is_temporally_constant(&self) -> bool {
        (0..self.objects.len()).all(|o| self.transitions(o) == 0)
    }

    /// Frames on either side of some state change.
    pub fn transition_frames(&self) -> Vec<usize> {
        let mut marked = vec![false; self.frames];
        for s in &self.schedule {
            for t in 1..self.frames {
                if s[t] != s[t - 1] {
                    marked[t - 1] = true;
                    marked[t] = true;
                }
            }
        }
        (0..self.frames).filter(|&t| marked[t]).collect()
    }
}

/// Rendered clip.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `[T×H×W×3]` in `[0, 1]`.
    pub frames: Tensor,
    /// `[T×D_a]`.
    pub audio: Tensor,
    /// `[T×H×W]` class labels stored as floats.
    pub gt: Tensor,
}

impl SyntheticSample {
    pub fn gt_labels(&self) -> Vec<usize> {
        self.gt.data().iter().map(|&v| v as usize).collect()
    }

    /// Labels of one frame.
    pub fn gt_frame(&self, t: usize) -> Vec<usize> {
        let hw = self.gt.shape()[1] * self.gt.shape()[2];
        self.gt.data()[t * hw..(t + 1) * hw]
            .iter()
            .map(|&v| v as usize)
            .collect()
    }
}

pub fn render(spec: &SceneSpec) -> Result<SyntheticSample> {
    spec.validate()?;
    let (t_len, h, w) = (spec.frames, spec.height, spec.width);
    let d_a = spec.audio_dim();
    let mut rng = Rng::new(spec.seed).fork(1);
    let mut frames = vec![0.0f32; t_len * h * w * 3];
    let mut gt = vec![0.0f32; t_len * h * w];
    let mut audio = vec![0.0f32; t_len * d_a];

    // Topmost object index per pixel, shared by all frames.
    let mut top = vec![usize::MAX; h * w];
    for (o, obj) in spec.objects.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                if obj.covers(r as f32 + 0.5, c as f32 + 0.5) {
                    top[r * w + c] = o;
                }
            }
        }
    }

    for t in 0..t_len {
        for p in 0..h * w {
            let base = (t * h * w + p) * 3;
            let color = match top[p] {
                usize::MAX => [0.08f32; 3],
                o => {
                    let obj = &spec.objects[o];
                    let cue = if spec.schedule[o][t] {
                        spec.cue_strength
                    } else {
                        0.0
                    };
                    if spec.schedule[o][t] {
                        gt[t * h * w + p] = obj.class_id as f32;
                    }
                    obj.color.map(|v| v + cue)
                }
            };
            for ch in 0..3 {
                let noise = (rng.normal() as f32) * spec.pixel_noise;
                frames[base + ch] = (color[ch] + noise).clamp(0.0, 1.0);
            }
        }
        for (o, obj) in spec.objects.iter().enumerate() {
            if spec.schedule[o][t] {
                for (a, &e) in audio[t * d_a..(t + 1) * d_a]
                    .iter_mut()
                    .zip(&spec.audio_table[obj.class_id])
                {
                    *a += e;
                }
            }
        }
        for a in &mut audio[t * d_a..(t + 1) * d_a] {
            *a += (rng.normal() as f32) * spec.noise;
        }
    }

    Ok(SyntheticSample {
        frames: Tensor::new(vec![t_len, h, w, 3], frames)?,
        audio: Tensor::new(vec![t_len, d_a], audio)?,
        gt: Tensor::new(vec![t_len, h, w], gt)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub classes: usize,
    pub audio_dim: usize,
    pub noise: f32,
    pub pixel_noise: f32,
    pub cue_strength: f32,
    pub min_radius: f32,
    pub max_radius: f32,
    /// Seed of the class embedding table, shared by every clip.
    pub table_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            frames: 4,
            classes: 5,
            audio_dim: 16,
            noise: 0.1,
            pixel_noise: 0.02,
            cue_strength: 0.15,
            min_radius: 7.0,
            max_radius: 12.0,
            table_seed: 0x5EED_AB1E,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.audio_dim == 0 || self.frames == 0 {
            return Err(Error::Config(
                "need >= 2 classes, a positive audio dim and frames".into(),
            ));
        }
        if !(self.min_radius >= 2.0 && self.max_radius >= self.min_radius) {
            return Err(Error::Config(
                "radius range must satisfy 2 <= min <= max".into(),
            ));
        }
        if 4.0 * self.max_radius >= self.height.min(self.width) as f32 {
            return Err(Error::Config(
                "canvas too small for the radius range".into(),
            ));
        }
        if self.cue_strength < 0.0 || self.noise < 0.0 || self.pixel_noise < 0.0 {
            return Err(Error::Config(
                "noise and cue strength must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Class embeddings, row 0 (background) zero.
    pub fn audio_table(&self) -> Vec<Vec<f32>> {
        let mut rng = Rng::new(self.table_seed);
        (0..self.classes)
            .map(|c| {
                (0..self.audio_dim)
                    .map(|_| if c == 0 { 0.0 } else { rng.normal() as f32 })
                    .collect()
            })
            .collect()
    }

    fn blank(&self, kind: ClipKind, seed: u64) -> SceneSpec {
        SceneSpec {
            kind,
            height: self.height,
            width: self.width,
            frames: self.frames,
            classes: self.classes,
            objects: Vec::new(),
            schedule: Vec::new(),
            audio_table: self.audio_table(),
            noise: self.noise,
            pixel_noise: self.pixel_noise,
            cue_strength: 0.0,
            seed,
        }
    }
}

const PALETTE: [[f32; 3]; 4] = [
    [0.75, 0.25, 0.2],
    [0.2, 0.65, 0.3],
    [0.25, 0.35, 0.75],
    [0.7, 0.65, 0.2],
];
const SHAPES: [Shape; 4] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Disk];

fn class_look(class_id: usize) -> (Shape, [f32; 3]) {
    let i = (class_id - 1) % PALETTE.len();
    (SHAPES[i], PALETTE[i])
}

fn make_object(rng: &mut Rng, class_id: usize, center: [f32; 2], radius: f32) -> SceneObject {
    let (shape, base) = class_look(class_id);
    SceneObject {
        class_id,
        shape,
        color: base.map(|v| (v + rng.range(-0.05, 0.05) as f32).clamp(0.0, 0.8)),
        center,
        radius,
    }
}

fn random_radius(rng: &mut Rng, cfg: &SynthConfig) -> f32 {
    rng.range(cfg.min_radius as f64, cfg.max_radius as f64) as f32
}

fn random_center(rng: &mut Rng, cfg: &SynthConfig, radius: f32) -> [f32; 2] {
    let m = radius + 1.0;
    [
        rng.range(m as f64, (cfg.height as f32 - m) as f64) as f32,
        rng.range(m as f64, (cfg.width as f32 - m) as f64) as f32,
    ]
}

fn distinct_classes(rng: &mut Rng, cfg: &SynthConfig, n: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (1..cfg.classes).collect();
    rng.shuffle(&mut ids);
    ids.truncate(n);
    ids
}

/// Places objects so that no pair overlaps.
fn scatter(rng: &mut Rng, cfg: &SynthConfig, classes: &[usize]) -> Vec<SceneObject> {
    let mut objects: Vec<SceneObject> = Vec::new();
    for &class_id in classes {
        let radius = random_radius(rng, cfg);
        let mut center = random_center(rng, cfg, radius);
        for _ in 0..100 {
            let clear = objects.iter().all(|o| {
                let (dy, dx) = (o.center[0] - center[0], o.center[1] - center[1]);
                (dy * dy + dx * dx).sqrt() > o.radius + radius + 1.0
            });
            if clear {
                break;
            }
            center = random_center(rng, cfg, radius);
        }
        objects.push(make_object(rng, class_id, center, radius));
    }
    objects
}

/// One or two objects of distinct classes, constant states, at least one sounding.
pub fn generate_easy(rng: &mut Rng, cfg: &SynthConfig) -> SceneSpec {
    let mut spec = cfg.blank(ClipKind::Easy, rng.fork(0).seed());
    let n = 1 + rng.below(2).min(cfg.classes - 2);
    let classes = distinct_classes(rng, cfg, n);
    spec.objects = scatter(rng, cfg, &classes);
    let loud = rng.below(n);
    spec.schedule = (0..n)
        .map(|o| vec![o == loud || rng.bernoulli(0.5); cfg.frames])
        .collect();
    spec
}

/// Two same-class look-alikes next to each other, exactly one sounding per frame.
pub fn generate_case1(rng: &mut Rng, cfg: &SynthConfig) -> SceneSpec {
    let mut spec = cfg.blank(ClipKind::Case1, rng.fork(0).seed());
    spec.cue_strength = cfg.cue_strength;
    let class_id = 1 + rng.below(cfg.classes - 1);
    let (r0, r1) = (random_radius(rng, cfg), random_radius(rng, cfg));
    let sum = r0 + r1;
    let margin = r0.max(r1) + 1.0;
    let (c0, c1) = loop {
        let c0 = random_center(rng, cfg, r0);
        let angle = rng.range(0.0, std::f64::consts::TAU) as f32;
        let dist = sum * rng.range(1.05, 1.5) as f32;
        let c1 = [c0[0] + dist * angle.sin(), c0[1] + dist * angle.cos()];
        if c1[0] >= margin
            && c1[0] <= cfg.height as f32 - margin
            && c1[1] >= margin
            && c1[1] <= cfg.width as f32 - margin
        {
            break (c0, c1);
        }
    };
    let first = make_object(rng, class_id, c0, r0);
    let mut second = first.clone();
    second.center = c1;
    second.radius = r1;
    second.color = first
        .color
        .map(|v| (v + rng.range(-0.02, 0.02) as f32).clamp(0.0, 0.8));
    spec.objects = vec![first, second];
    let mut which = rng.below(2);
    let mut schedule = vec![vec![false; cfg.frames]; 2];
    for t in 0..cfg.frames {
        if t > 0 && rng.bernoulli(0.3) {
            which = 1 - which;
        }
        schedule[which][t] = true;
    }
    spec.schedule = schedule;
    spec
}

/// Random schedule with at least one on→off and one off→on change.
fn switching_schedule(rng: &mut Rng, frames: usize) -> Vec<bool> {
    loop {
        let s: Vec<bool> = (0..frames).map(|_| rng.bernoulli(0.5)).collect();
        let on_off = s.windows(2).any(|w| w[0] && !w[1]);
        let off_on = s.windows(2).any(|w| !w[0] && w[1]);
        if on_off && off_on {
            return s;
        }
    }
}

/// One or two objects, the first switching on and off within the clip.
pub fn generate_case2(rng: &mut Rng, cfg: &SynthConfig) -> Result<SceneSpec> {
    if cfg.frames < 3 {
        return Err(Error::Param(
            "state switching needs at least 3 frames".into(),
        ));
    }
    let mut spec = cfg.blank(ClipKind::Case2, rng.fork(0).seed());
    let n = 1 + rng.below(2).min(cfg.classes - 2);
    let classes = distinct_classes(rng, cfg, n);
    spec.objects = scatter(rng, cfg, &classes);
    let mut schedule = vec![switching_schedule(rng, cfg.frames)];
    if n == 2 {
        schedule.push(switching_schedule(rng, cfg.frames));
    }
    spec.schedule = schedule;
    Ok(spec)
}

pub fn generate(kind: ClipKind, rng: &mut Rng, cfg: &SynthConfig) -> Result<SceneSpec> {
    match kind {
        ClipKind::Easy => Ok(generate_easy(rng, cfg)),
        ClipKind::Case1 => Ok(generate_case1(rng, cfg)),
        ClipKind::Case2 => generate_case2(rng, cfg),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: usize,
    pub spec: SceneSpec,
    pub sample: SyntheticSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: usize,
    pub dir: String,
    pub kind: ClipKind,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub mix: [f64; 3],
    pub config: SynthConfig,
    pub clips: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.clips
            .iter()
            .filter(|c| c.split == split)
            .map(|c| c.id)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Clip> {
        self.manifest
            .clips
            .iter()
            .zip(&self.clips)
            .filter(|(e, _)| e.split == split)
            .map(|(_, c)| c)
            .collect()
    }
}

/// Split by clip index: first 70 % train, next 15 % val, rest test.
pub fn split_of(index: usize, n: usize) -> Split {
    let train = n * 70 / 100;
    let val = n * 85 / 100;
    if index < train {
        Split::Train
    } else if index < val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Clip kinds in generation order: exact counts from `mix`, shuffled by `seed`.
pub fn clip_kinds(seed: u64, n_clips: usize, mix: [f64; 3]) -> Result<Vec<ClipKind>> {
    if mix.iter().any(|&m| !(m >= 0.0)) || (mix.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::Param(format!(
            "mix {mix:?} must be non-negative and sum to 1"
        )));
    }
    let n_easy = (mix[0] * n_clips as f64).round() as usize;
    let n_case1 = ((mix[1] * n_clips as f64).round() as usize).min(n_clips - n_easy.min(n_clips));
    let n_easy = n_easy.min(n_clips);
    let mut kinds = vec![ClipKind::Easy; n_easy];
    kinds.extend(vec![ClipKind::Case1; n_case1]);
    kinds.extend(vec![ClipKind::Case2; n_clips - n_easy - n_case1]);
    Rng::new(seed).fork(u64::MAX).shuffle(&mut kinds);
    Ok(kinds)
}

pub fn generate_dataset(
    seed: u64,
    n_clips: usize,
    mix: [f64; 3],
    cfg: &SynthConfig,
) -> Result<Dataset> {
    if n_clips < 10 {
        return Err(Error::Param(format!(
            "need at least 10 clips, got {n_clips}"
        )));
    }
    cfg.validate()?;
    let kinds = clip_kinds(seed, n_clips, mix)?;
    let mut clips = Vec::with_capacity(n_clips);
    let mut entries = Vec::with_capacity(n_clips);
    for (id, &kind) in kinds.iter().enumerate() {
        let clip_seed = mix_seed(seed, id as u64);
        let spec = generate(kind, &mut Rng::new(clip_seed), cfg)?;
        let sample = render(&spec)?;
        entries.push(ManifestEntry {
            id,
            dir: clip_dir_name(id),
            kind,
            split: split_of(id, n_clips),
            seed: clip_seed,
        });
        clips.push(Clip { id, spec, sample });
    }
    Ok(Dataset {
        manifest: Manifest {
            seed,
            mix,
            config: cfg.clone(),
            clips: entries,
        },
        clips,
    })
}

fn clip_dir_name(id: usize) -> String {
    format!("clip_{id:05}")
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<V: for<'de> Deserialize<'de>>(path: &Path) -> Result<V> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Writes `manifest.json` plus one directory per clip.
pub fn save_dataset(dataset: &Dataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for (entry, clip) in dataset.manifest.clips.iter().zip(&dataset.clips) {
        let dir = root.join(&entry.dir);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        tensor_file::write(dir.join("frames.avtk"), &clip.sample.frames)?;
        tensor_file::write(dir.join("audio.avtk"), &clip.sample.audio)?;
        tensor_file::write(dir.join("gt.avtk"), &clip.sample.gt)?;
        write_json(&dir.join("spec.json"), &clip.spec)?;
    }
    write_json(&root.join("manifest.json"), &dataset.manifest)
}

pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset> {
    let root = root.as_ref();
    let manifest: Manifest = read_json(&root.join("manifest.json"))?;
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for entry in &manifest.clips {
        let dir: PathBuf = root.join(&entry.dir);
        let spec: SceneSpec = read_json(&dir.join("spec.json"))?;
        let sample = SyntheticSample {
            frames: tensor_file::read(dir.join("frames.avtk"))?,
            audio: tensor_file::read(dir.join("audio.avtk"))?,
            gt: tensor_file::read(dir.join("gt.avtk"))?,
        };
        let t = spec.frames;
        if sample.frames.shape() != [t, spec.height, spec.width, 3]
            || sample.audio.shape() != [t, spec.audio_dim()]
            || sample.gt.shape() != [t, spec.height, spec.width]
        {
            return Err(Error::Data(format!(
                "{}: tensor shapes disagree with spec.json",
                dir.display()
            )));
        }
        clips.push(Clip {
            id: entry.id,
            spec,
            sample,
        });
    }
    Ok(Dataset { manifest, clips })
}
