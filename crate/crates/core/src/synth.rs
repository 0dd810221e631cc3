//! Seeded synthetic RGB-D segmentation scenes whose labels are decided by
//! depth geometry alone.
//!
//! Each scene is a tilted background plane carrying a few non-overlapping
//! axis-aligned rectangles. An object either protrudes from the plane
//! (nearer) or is recessed into it (farther) by a relief expressed in
//! pixel-spacing units of the local depth, i.e. `relief * depth / focal`
//! meters. The label is background, protruding or recessed. Color is i.i.d.
//! uniform noise for every pixel regardless of class, so a depth-blind model
//! cannot beat the majority-class rate.
//!
//! Scene `i` is drawn from `ChaCha8Rng::seed_from_u64(seed)` on stream `i`,
//! so any sample can be regenerated on its own.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{write_camera_file, CameraIntrinsics, DepthField, GeometryError};
use crate::kvfile::{KvError, KvFile};
use crate::tensor::{self, Tensor4, TensorError};

pub const IGNORE_LABEL: u8 = 255;
pub const BACKGROUND: u8 = 0;
pub const PROTRUDING: u8 = 1;
pub const RECESSED: u8 = 2;

pub const MANIFEST_NAME: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "# m25d dataset manifest v1";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path} line {line}: {msg}")]
    Manifest { path: String, line: usize, msg: String },
    #[error("dataset file {path}: {source}")]
    Tensor {
        path: String,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Kv(#[from] KvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// 0.5 to 10 m.
    Indoor,
    /// 2 to 100 m.
    Outdoor,
}

impl Regime {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            Regime::Indoor => (0.5, 10.0),
            Regime::Outdoor => (2.0, 100.0),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Indoor => "indoor",
            Regime::Outdoor => "outdoor",
        })
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "indoor" => Ok(Regime::Indoor),
            "outdoor" => Ok(Regime::Outdoor),
            other => Err(format!("unknown regime `{other}` (indoor|outdoor)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub scenes: usize,
    /// Fraction of scenes (taken from the end) assigned to the test split.
    pub test_fraction: f64,
    pub seed: u64,
    pub focal: f64,
    pub regime: Regime,
    /// Standard deviation of additive depth noise, meters.
    pub noise_sigma: f64,
    /// 2 (background, protruding) or 3 (plus recessed).
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Object relief range in pixel-spacing units of the local depth.
    pub relief: (f64, f64),
    /// Largest background tilt, in relief units per pixel.
    pub max_tilt: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 24,
            width: 24,
            scenes: 640,
            test_fraction: 0.2,
            seed: 0,
            focal: 24.0,
            regime: Regime::Indoor,
            noise_sigma: 0.0,
            classes: 3,
            min_objects: 2,
            max_objects: 4,
            min_size: 4,
            max_size: 9,
            relief: (2.0, 5.0),
            max_tilt: 0.3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.height < 3 || self.width < 3 {
            return err("image must be at least 3x3");
        }
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return err("focal must be positive");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return err("noise sigma must be >= 0");
        }
        if !(2..=3).contains(&self.classes) {
            return err("classes must be 2 or 3");
        }
        if self.min_objects > self.max_objects {
            return err("min_objects > max_objects");
        }
        if self.min_size == 0 || self.min_size > self.max_size || self.max_size > self.height.min(self.width) {
            return err("object sizes must satisfy 1 <= min <= max <= image side");
        }
        if !(self.relief.0 >= 0.0 && self.relief.0 <= self.relief.1 && self.relief.1 < self.focal) {
            return err("relief range must satisfy 0 <= lo <= hi < focal");
        }
        if !(self.max_tilt >= 0.0 && self.max_tilt.is_finite()) {
            return err("tilt must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return err("test_fraction must be in [0, 1]");
        }
        Ok(())
    }

    pub fn camera(&self) -> CameraIntrinsics {
        CameraIntrinsics::new(
            self.focal,
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
        .expect("validated focal")
    }

    pub fn test_count(&self) -> usize {
        (self.test_fraction * self.scenes as f64).round() as usize
    }

    pub fn split_of(&self, index: usize) -> Split {
        if index >= self.scenes - self.test_count() {
            Split::Test
        } else {
            Split::Train
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Per-pixel class labels, `IGNORE_LABEL` where unlabeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn to_tensor(&self) -> Tensor4 {
        Tensor4::from_vec(
            [1, 1, self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("label dims")
    }

    pub fn from_tensor(t: &Tensor4) -> Option<Self> {
        if t.n() != 1 || t.c() != 1 {
            return None;
        }
        let data = t
            .data()
            .iter()
            .map(|&v| (v.fract() == 0.0 && (0.0..=255.0).contains(&v)).then_some(v as u8))
            .collect::<Option<Vec<u8>>>()?;
        Some(Self {
            height: t.h(),
            width: t.w(),
            data,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// `(1, 3, h, w)` colors in `[0, 1)`.
    pub features: Tensor4,
    pub depth: DepthField,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Rect {
    y: usize,
    x: usize,
    h: usize,
    w: usize,
}

impl Rect {
    fn overlaps(&self, o: &Rect) -> bool {
        // one pixel of clearance keeps objects from touching
        self.y < o.y + o.h + 1 && o.y < self.y + self.h + 1 && self.x < o.x + o.w + 1 && o.x < self.x + self.w + 1
    }
}

/// Generates scene `index` of the dataset described by `cfg`.
pub fn generate_one(cfg: &SceneConfig, index: usize) -> SceneSample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (h, w) = (cfg.height, cfg.width);
    let (lo, hi) = cfg.regime.bounds();
    let f = cfg.focal;

    // background plane; log-uniform base depth keeps far and near scenes
    // equally likely
    let (llo, lhi) = ((lo * 1.5).ln(), (hi / 1.5).ln());
    let base = rng.gen_range(llo..lhi).exp();
    let ty = rng.gen_range(-cfg.max_tilt..=cfg.max_tilt);
    let tx = rng.gen_range(-cfg.max_tilt..=cfg.max_tilt);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut depth = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let d = base * (1.0 + (ty * (y as f64 - cy) + tx * (x as f64 - cx)) / f);
            depth[y * w + x] = d.clamp(lo, hi);
        }
    }

    let mut labels = vec![BACKGROUND; h * w];
    let target = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut rects: Vec<Rect> = Vec::new();
    let mut attempts = 0;
    while rects.len() < target && attempts < 200 {
        attempts += 1;
        let rh = rng.gen_range(cfg.min_size..=cfg.max_size);
        let rw = rng.gen_range(cfg.min_size..=cfg.max_size);
        let r = Rect {
            y: rng.gen_range(0..=h - rh),
            x: rng.gen_range(0..=w - rw),
            h: rh,
            w: rw,
        };
        if rects.iter().any(|o| o.overlaps(&r)) {
            continue;
        }
        let class = if cfg.classes == 2 {
            PROTRUDING
        } else if rng.gen_bool(0.5) {
            PROTRUDING
        } else {
            RECESSED
        };
        let relief = rng.gen_range(cfg.relief.0..=cfg.relief.1);
        let sign = if class == PROTRUDING { -1.0 } else { 1.0 };
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                let i = y * w + x;
                depth[i] = (depth[i] * (1.0 + sign * relief / f)).clamp(lo, hi);
                labels[i] = class;
            }
        }
        rects.push(r);
    }

    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
        for d in &mut depth {
            *d = (*d + noise.sample(&mut rng)).clamp(lo, hi);
        }
    }

    let colors: Vec<f64> = (0..3 * h * w).map(|_| rng.gen::<f64>()).collect();
    SceneSample {
        features: Tensor4::from_vec([1, 3, h, w], colors).expect("dims"),
        depth: DepthField::new(Tensor4::from_vec([1, 1, h, w], depth).expect("dims"), 1).expect("one channel"),
        labels: LabelMap {
            height: h,
            width: w,
            data: labels,
        },
    }
}

/// All scenes of `cfg`, in index order.
pub fn generate(cfg: &SceneConfig) -> Result<impl Iterator<Item = SceneSample> + '_, SynthError> {
    cfg.validate()?;
    Ok((0..cfg.scenes).map(move |i| generate_one(cfg, i)))
}

pub fn scene_config_to_kv(cfg: &SceneConfig) -> KvFile {
    let mut kv = KvFile::new();
    write_scene_config(cfg, &mut kv, "");
    kv
}

pub fn write_scene_config(cfg: &SceneConfig, kv: &mut KvFile, prefix: &str) {
    let k = |s: &str| format!("{prefix}{s}");
    kv.set(&k("height"), cfg.height);
    kv.set(&k("width"), cfg.width);
    kv.set(&k("scenes"), cfg.scenes);
    kv.set(&k("test_fraction"), cfg.test_fraction);
    kv.set(&k("seed"), cfg.seed);
    kv.set(&k("focal"), cfg.focal);
    kv.set(&k("regime"), cfg.regime);
    kv.set(&k("noise"), cfg.noise_sigma);
    kv.set(&k("classes"), cfg.classes);
    kv.set(&k("min_objects"), cfg.min_objects);
    kv.set(&k("max_objects"), cfg.max_objects);
    kv.set(&k("min_size"), cfg.min_size);
    kv.set(&k("max_size"), cfg.max_size);
    kv.set_list(&k("relief"), &[cfg.relief.0, cfg.relief.1]);
    kv.set(&k("max_tilt"), cfg.max_tilt);
}

/// Reads `{prefix}<key>` entries over `base`; absent keys keep `base`'s
/// values.
pub fn scene_config_from_kv(kv: &KvFile, prefix: &str, base: &SceneConfig) -> Result<SceneConfig, SynthError> {
    let k = |s: &str| format!("{prefix}{s}");
    let regime = match kv.get(&k("regime")) {
        Some(v) => v.parse().map_err(|_| KvError::BadValue {
            key: k("regime"),
            value: v.to_string(),
        })?,
        None => base.regime,
    };
    let relief = kv.parse_list_or(&k("relief"), vec![base.relief.0, base.relief.1])?;
    if relief.len() != 2 {
        return Err(KvError::BadValue {
            key: k("relief"),
            value: kv.get(&k("relief")).unwrap_or_default().to_string(),
        }
        .into());
    }
    let cfg = SceneConfig {
        height: kv.parse_or(&k("height"), base.height)?,
        width: kv.parse_or(&k("width"), base.width)?,
        scenes: kv.parse_or(&k("scenes"), base.scenes)?,
        test_fraction: kv.parse_or(&k("test_fraction"), base.test_fraction)?,
        seed: kv.parse_or(&k("seed"), base.seed)?,
        focal: kv.parse_or(&k("focal"), base.focal)?,
        regime,
        noise_sigma: kv.parse_or(&k("noise"), base.noise_sigma)?,
        classes: kv.parse_or(&k("classes"), base.classes)?,
        min_objects: kv.parse_or(&k("min_objects"), base.min_objects)?,
        max_objects: kv.parse_or(&k("max_objects"), base.max_objects)?,
        min_size: kv.parse_or(&k("min_size"), base.min_size)?,
        max_size: kv.parse_or(&k("max_size"), base.max_size)?,
        relief: (relief[0], relief[1]),
        max_tilt: kv.parse_or(&k("max_tilt"), base.max_tilt)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// One sample as listed in a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub split: Split,
    pub features: PathBuf,
    pub depth: PathBuf,
    pub labels: PathBuf,
}

/// Line-oriented dataset index:
///
/// ```text
/// # m25d dataset manifest v1
/// camera camera.txt
/// classes 3
/// sample <index> <train|test> <features.t4> <depth.t4> <labels.t4>
/// ```
///
/// Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub camera: PathBuf,
    pub classes: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\ncamera {}\nclasses {}\n", self.camera.display(), self.classes);
        for e in &self.entries {
            s.push_str(&format!(
                "sample {} {} {} {} {}\n",
                e.index,
                e.split,
                e.features.display(),
                e.depth.display(),
                e.labels.display()
            ));
        }
        s
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| SynthError::Io {
            path: shown.clone(),
            source,
        })?;
        let bad = |line: usize, msg: &str| SynthError::Manifest {
            path: shown.clone(),
            line,
            msg: msg.to_string(),
        };
        let mut camera = None;
        let mut classes = None;
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["camera", p] => camera = Some(PathBuf::from(p)),
                ["classes", c] => classes = Some(c.parse().map_err(|_| bad(i + 1, "bad class count"))?),
                ["sample", idx, split, feat, dep, lab] => {
                    let split: Split = split.parse().map_err(|_| bad(i + 1, "split must be train or test"))?;
                    entries.push(ManifestEntry {
                        index: idx.parse().map_err(|_| bad(i + 1, "bad sample index"))?,
                        split,
                        features: PathBuf::from(feat),
                        depth: PathBuf::from(dep),
                        labels: PathBuf::from(lab),
                    });
                }
                _ => return Err(bad(i + 1, "unrecognized line")),
            }
        }
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            camera: camera.ok_or_else(|| bad(0, "missing camera line"))?,
            classes: classes.ok_or_else(|| bad(0, "missing classes line"))?,
            entries,
        })
    }

    /// Loads every listed sample. A missing or unreadable file is reported
    /// with its path.
    pub fn load(&self) -> Result<Dataset, SynthError> {
        let (camera, rate) = crate::geometry::read_camera_file(self.root.join(&self.camera)).map_err(|e| match e {
            GeometryError::Kv(KvError::Io { path, source }) => SynthError::Io { path, source },
            other => other.into(),
        })?;
        let load = |rel: &Path| {
            let p = self.root.join(rel);
            tensor::load(&p).map_err(|source| SynthError::Tensor {
                path: p.display().to_string(),
                source,
            })
        };
        let mut samples = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let features = load(&e.features)?;
            let depth = DepthField::new(load(&e.depth)?, rate)?;
            let lt = load(&e.labels)?;
            let labels = LabelMap::from_tensor(&lt).ok_or_else(|| SynthError::Manifest {
                path: e.labels.display().to_string(),
                line: 0,
                msg: "label tensor must be (1,1,h,w) with integer values".into(),
            })?;
            samples.push((
                e.split,
                SceneSample {
                    features,
                    depth,
                    labels,
                },
            ));
        }
        Ok(Dataset {
            camera,
            classes: self.classes,
            samples,
        })
    }
}

/// Samples held in memory with their split assignment.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub camera: CameraIntrinsics,
    pub classes: usize,
    pub samples: Vec<(Split, SceneSample)>,
}

impl Dataset {
    pub fn from_config(cfg: &SceneConfig) -> Result<Self, SynthError> {
        let samples = generate(cfg)?
            .enumerate()
            .map(|(i, s)| (cfg.split_of(i), s))
            .collect();
        Ok(Self {
            camera: cfg.camera(),
            classes: cfg.classes,
            samples,
        })
    }

    pub fn load(manifest: impl AsRef<Path>) -> Result<Self, SynthError> {
        Manifest::read(manifest)?.load()
    }

    pub fn split(&self, split: Split) -> Vec<&SceneSample> {
        self.samples.iter().filter(|(s, _)| *s == split).map(|(_, x)| x).collect()
    }
}

/// Writes every scene of `cfg` under `dir` as `.t4` files, plus
/// `camera.txt`, `scene.txt` (the generator config) and the manifest.
/// Returns the manifest and the list of files written.
pub fn export_dataset(cfg: &SceneConfig, dir: impl AsRef<Path>) -> Result<(Manifest, Vec<PathBuf>), SynthError> {
    cfg.validate()?;
    let dir = dir.as_ref();
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| SynthError::Io { path, source }
    };
    let mut written = Vec::new();
    for sub in ["features", "depth", "labels"] {
        fs::create_dir_all(dir.join(sub)).map_err(io(&dir.join(sub)))?;
    }
    let camera = PathBuf::from("camera.txt");
    write_camera_file(dir.join(&camera), &cfg.camera(), 1)?;
    written.push(dir.join(&camera));
    scene_config_to_kv(cfg).write(dir.join("scene.txt"))?;
    written.push(dir.join("scene.txt"));

    let mut entries = Vec::with_capacity(cfg.scenes);
    for (i, s) in generate(cfg)?.enumerate() {
        let name = format!("{i:06}.t4");
        let e = ManifestEntry {
            index: i,
            split: cfg.split_of(i),
            features: Path::new("features").join(&name),
            depth: Path::new("depth").join(&name),
            labels: Path::new("labels").join(&name),
        };
        for (rel, t) in [
            (&e.features, &s.features),
            (&e.depth, s.depth.depth()),
            (&e.labels, &s.labels.to_tensor()),
        ] {
            let p = dir.join(rel);
            tensor::save(&p, t).map_err(|source| SynthError::Tensor {
                path: p.display().to_string(),
                source,
            })?;
            written.push(p);
        }
        entries.push(e);
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        camera,
        classes: cfg.classes,
        entries,
    };
    let mpath = dir.join(MANIFEST_NAME);
    fs::write(&mpath, manifest.to_text()).map_err(io(&mpath))?;
    written.push(mpath);
    Ok((manifest, written))
}
