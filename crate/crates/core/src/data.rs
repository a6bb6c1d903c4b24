//! Synthetic paired RGB/depth scenes and the on-disk dataset layout.
//!
//! Layout: `root/{train,val,test}/{id}.ppm` (8-bit P6 RGB) and `{id}.pfm`
//! (single-channel little-endian float, rows stored bottom to top), plus
//! `root/manifest.json` mapping each split to its ids.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::sample_rng;
use crate::error::{Error, Result};
use crate::types::{DepthMap, DepthRange, RgbImage, Sample};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Floor,
    Wall,
    Sphere,
    Box,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub depth_range: DepthRange,
    /// Number of free-standing objects (spheres and boxes) on the floor.
    pub num_primitives: usize,
    pub kinds: Vec<PrimitiveKind>,
    pub seed: u64,
    pub invalid_fraction: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 96,
            width: 128,
            depth_range: DepthRange::default(),
            num_primitives: 3,
            kinds: vec![
                PrimitiveKind::Floor,
                PrimitiveKind::Wall,
                PrimitiveKind::Sphere,
                PrimitiveKind::Box,
            ],
            seed: 0,
            invalid_fraction: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.depth_range.validate()?;
        if self.height < crate::types::MIN_IMAGE_SIDE || self.width < crate::types::MIN_IMAGE_SIDE {
            return Err(Error::Config(format!(
                "scene size {}x{} below minimum",
                self.height, self.width
            )));
        }
        if !(0.0..=0.3).contains(&self.invalid_fraction) {
            return Err(Error::Config(format!(
                "invalid_fraction must lie in [0, 0.3], got {}",
                self.invalid_fraction
            )));
        }
        Ok(())
    }
}

type Vec3 = [f64; 3];

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

#[derive(Debug, Clone)]
enum Shape {
    /// Horizontal plane `y = level`.
    Floor { level: f64 },
    /// Fronto-parallel plane `z = distance`.
    Wall { distance: f64 },
    Sphere { center: Vec3, radius: f64 },
    Cuboid { min: Vec3, max: Vec3 },
}

#[derive(Debug, Clone)]
struct Primitive {
    shape: Shape,
    albedo: Vec3,
}

struct Hit {
    t: f64,
    normal: Vec3,
    point: Vec3,
}

impl Primitive {
    /// Intersects the ray `t * dir` (origin at the camera) for `t > 0`.
    fn intersect(&self, dir: Vec3) -> Option<Hit> {
        let at = |t: f64| [t * dir[0], t * dir[1], t * dir[2]];
        match &self.shape {
            Shape::Floor { level } => {
                if dir[1] >= 0.0 {
                    return None;
                }
                let t = level / dir[1];
                Some(Hit {
                    t,
                    normal: [0.0, 1.0, 0.0],
                    point: at(t),
                })
            }
            Shape::Wall { distance } => {
                let t = distance / dir[2];
                Some(Hit {
                    t,
                    normal: [0.0, 0.0, -1.0],
                    point: at(t),
                })
            }
            Shape::Sphere { center, radius } => {
                let a = dot(dir, dir);
                let b = dot(dir, *center);
                let c = dot(*center, *center) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (b - disc.sqrt()) / a;
                if t <= 0.0 {
                    return None;
                }
                let p = at(t);
                let normal = normalize([p[0] - center[0], p[1] - center[1], p[2] - center[2]]);
                Some(Hit { t, normal, point: p })
            }
            Shape::Cuboid { min, max } => {
                let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                for k in 0..3 {
                    if dir[k].abs() < 1e-12 {
                        if 0.0 < min[k] || 0.0 > max[k] {
                            return None;
                        }
                        continue;
                    }
                    let (t0, t1) = {
                        let a = min[k] / dir[k];
                        let b = max[k] / dir[k];
                        if a < b {
                            (a, b)
                        } else {
                            (b, a)
                        }
                    };
                    if t0 > t_near {
                        t_near = t0;
                        axis = k;
                    }
                    t_far = t_far.min(t1);
                }
                if t_near > t_far || t_near <= 0.0 {
                    return None;
                }
                let mut normal = [0.0; 3];
                normal[axis] = -dir[axis].signum();
                Some(Hit {
                    t: t_near,
                    normal,
                    point: at(t_near),
                })
            }
        }
    }
}

fn random_albedo<R: Rng>(rng: &mut R) -> Vec3 {
    [
        rng.random_range(0.2..0.95),
        rng.random_range(0.2..0.95),
        rng.random_range(0.2..0.95),
    ]
}

/// Ray-casts a random scene. The camera sits above a floor looking along `+z`,
/// so floor depth grows towards the horizon row.
pub fn generate_scene<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let range = spec.depth_range;
    let focal = 0.9 * w as f64;
    let cx = w as f64 / 2.0;
    let cy = rng.random_range(0.35..0.5) * h as f64;
    let cam_height = rng.random_range(1.0..1.6);
    let has = |k: PrimitiveKind| spec.kinds.contains(&k);

    let mut prims = Vec::new();
    if has(PrimitiveKind::Floor) {
        prims.push(Primitive {
            shape: Shape::Floor { level: -cam_height },
            albedo: random_albedo(rng),
        });
    }
    if has(PrimitiveKind::Wall) {
        prims.push(Primitive {
            shape: Shape::Wall {
                distance: rng.random_range(0.75..0.95) * range.d_max,
            },
            albedo: random_albedo(rng),
        });
    }
    let objects: Vec<PrimitiveKind> = spec
        .kinds
        .iter()
        .copied()
        .filter(|k| matches!(k, PrimitiveKind::Sphere | PrimitiveKind::Box))
        .collect();
    if !objects.is_empty() {
        let near = (range.d_min + 1.0).max(1.5);
        let far = (0.65 * range.d_max).max(near + 0.5);
        for _ in 0..spec.num_primitives {
            let kind = objects[rng.random_range(0..objects.len())];
            let z = rng.random_range(near..far);
            // keep objects roughly inside the horizontal field of view
            let half_span = 0.5 * z * w as f64 / focal;
            let x = rng.random_range(-half_span..half_span);
            let size = rng.random_range(0.25..0.7);
            let shape = match kind {
                PrimitiveKind::Sphere => Shape::Sphere {
                    center: [x, -cam_height + size, z],
                    radius: size,
                },
                _ => {
                    let tall = rng.random_range(0.5..2.0) * size;
                    Shape::Cuboid {
                        min: [x - size, -cam_height, z - size],
                        max: [x + size, -cam_height + 2.0 * tall, z + size],
                    }
                }
            };
            prims.push(Primitive {
                shape,
                albedo: random_albedo(rng),
            });
        }
    }

    let light = normalize([
        rng.random_range(-0.6..0.6),
        rng.random_range(0.6..1.0),
        rng.random_range(-0.8..-0.2),
    ]);
    let fog = [0.75, 0.8, 0.85];
    let checker = rng.random_range(0.4..0.9);

    let mut depth = vec![0f32; h * w];
    let mut rgb = vec![0f32; 3 * h * w];
    for v in 0..h {
        for u in 0..w {
            let dir = [
                (u as f64 + 0.5 - cx) / focal,
                (cy - (v as f64 + 0.5)) / focal,
                1.0,
            ];
            let mut best: Option<(Hit, &Primitive)> = None;
            for p in &prims {
                if let Some(hit) = p.intersect(dir) {
                    // dir.z == 1, so the ray parameter is the planar depth
                    let z = hit.t;
                    if !range.contains(z) {
                        continue;
                    }
                    if best.as_ref().is_none_or(|(b, _)| hit.t < b.t) {
                        best = Some((hit, p));
                    }
                }
            }
            let idx = v * w + u;
            let color = match best {
                Some((hit, prim)) => {
                    depth[idx] = hit.t as f32;
                    let mut albedo = prim.albedo;
                    if let Shape::Floor { .. } = prim.shape {
                        let cell = (hit.point[0] / 0.5).floor() + (hit.point[2] / 0.5).floor();
                        if cell.rem_euclid(2.0) < 1.0 {
                            albedo = albedo.map(|a| a * checker);
                        }
                    }
                    let shade = 0.3 + 0.7 * dot(hit.normal, light).max(0.0);
                    let haze = 1.0 - (-hit.t / (1.5 * range.d_max)).exp();
                    [0, 1, 2].map(|c| albedo[c] * shade * (1.0 - haze) + fog[c] * haze)
                }
                None => [0.55, 0.7, 0.95],
            };
            for c in 0..3 {
                rgb[c * h * w + idx] = color[c].clamp(0.0, 1.0) as f32;
            }
        }
    }

    let n_invalid = (spec.invalid_fraction * (h * w) as f64).round() as usize;
    if n_invalid > 0 {
        for i in sample_indices(rng, h * w, n_invalid) {
            depth[i] = 0.0;
        }
    }

    Sample::new(
        format!("scene_{:016x}", spec.seed),
        RgbImage::new(h, w, rgb)?,
        DepthMap::new(h, w, depth)?,
    )
}

// ---------------------------------------------------------------------------
// PFM / PPM

fn invalid_header(kind: &str, msg: impl fmt::Display) -> Error {
    Error::Format(format!("malformed {kind} header: {msg}"))
}

/// Splits a netpbm-style header into `count` whitespace-separated tokens,
/// returning them and the offset of the payload (one whitespace byte after the last token).
fn header_tokens<'a>(bytes: &'a [u8], count: usize, kind: &str) -> Result<(Vec<&'a str>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(invalid_header(kind, "truncated header"));
        }
        let tok = std::str::from_utf8(&bytes[start..i])
            .map_err(|_| invalid_header(kind, "non-ascii token"))?;
        tokens.push(tok);
    }
    if i >= bytes.len() {
        return Err(invalid_header(kind, "missing payload separator"));
    }
    Ok((tokens, i + 1))
}

fn parse_dim(tok: &str, kind: &str) -> Result<usize> {
    tok.parse::<usize>()
        .ok()
        .filter(|&d| d > 0)
        .ok_or_else(|| invalid_header(kind, format!("bad dimension {tok:?}")))
}

pub fn encode_pfm(depth: &DepthMap) -> Vec<u8> {
    let (h, w) = (depth.height(), depth.width());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * h * w);
    for r in (0..h).rev() {
        for v in depth.row(r) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<DepthMap> {
    let (tokens, offset) = header_tokens(bytes, 4, "PFM")?;
    match tokens[0] {
        "Pf" => {}
        "PF" => return Err(invalid_header("PFM", "three-channel PFM is not a depth map")),
        other => return Err(invalid_header("PFM", format!("bad magic {other:?}"))),
    }
    let w = parse_dim(tokens[1], "PFM")?;
    let h = parse_dim(tokens[2], "PFM")?;
    let scale: f64 = tokens[3]
        .parse()
        .ok()
        .filter(|s: &f64| *s != 0.0 && s.is_finite())
        .ok_or_else(|| invalid_header("PFM", format!("bad scale {:?}", tokens[3])))?;
    let payload = &bytes[offset..];
    if payload.len() < 4 * h * w {
        return Err(Error::Format("unexpected end of PFM payload".into()));
    }
    let mut data = vec![0f32; h * w];
    for (i, chunk) in payload[..4 * h * w].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (file_row, col) = (i / w, i % w);
        data[(h - 1 - file_row) * w + col] = v;
    }
    DepthMap::new(h, w, data)
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let (h, w) = (image.height(), image.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                out.push((image.get(ch, r, c) * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (tokens, offset) = header_tokens(bytes, 4, "PPM")?;
    if tokens[0] != "P6" {
        return Err(invalid_header("PPM", format!("bad magic {:?}", tokens[0])));
    }
    let w = parse_dim(tokens[1], "PPM")?;
    let h = parse_dim(tokens[2], "PPM")?;
    if tokens[3] != "255" {
        return Err(invalid_header("PPM", "only 8-bit (maxval 255) PPM is supported"));
    }
    let payload = &bytes[offset..];
    if payload.len() < 3 * h * w {
        return Err(Error::Format("unexpected end of PPM payload".into()));
    }
    let mut data = vec![0f32; 3 * h * w];
    for (i, px) in payload[..3 * h * w].chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * h * w + i] = px[ch] as f32 / 255.0;
        }
    }
    RgbImage::new(h, w, data)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    write_file(path, &encode_pfm(depth))
}

pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    decode_pfm(&read_file(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_ppm(path: &Path, image: &RgbImage) -> Result<()> {
    write_file(path, &encode_ppm(image))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&read_file(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes `{dir}/{id}.ppm` and `{dir}/{id}.pfm`.
pub fn write_sample(dir: &Path, sample: &Sample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_ppm(&dir.join(format!("{}.ppm", sample.id)), &sample.image)?;
    write_pfm(&dir.join(format!("{}.pfm", sample.id)), &sample.gt_depth)
}

pub fn read_sample(dir: &Path, id: &str) -> Result<Sample> {
    let image = read_ppm(&dir.join(format!("{id}.ppm")))?;
    let depth = read_pfm(&dir.join(format!("{id}.pfm")))?;
    if (image.height(), image.width()) != (depth.height(), depth.width()) {
        return Err(Error::Format(format!(
            "sample {id}: image is {}x{} but depth is {}x{}",
            image.height(),
            image.width(),
            depth.height(),
            depth.width()
        )));
    }
    Sample::new(id, image, depth)
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub image_path: PathBuf,
    pub depth_path: PathBuf,
}

/// Ids per split, stored as `{"train": [...], "val": [...], "test": [...]}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(flatten)]
    pub splits: BTreeMap<Split, Vec<String>>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn entries(&self, root: &Path) -> Vec<ManifestEntry> {
        self.splits
            .iter()
            .flat_map(|(split, ids)| {
                ids.iter().map(move |id| {
                    let dir = root.join(split.as_str());
                    ManifestEntry {
                        id: id.clone(),
                        split: *split,
                        image_path: dir.join(format!("{id}.ppm")),
                        depth_path: dir.join(format!("{id}.pfm")),
                    }
                })
            })
            .collect()
    }

    /// Checks id uniqueness and that every listed file exists under `root`.
    pub fn validate(&self, root: &Path) -> Result<()> {
        let mut seen = HashSet::new();
        for entry in self.entries(root) {
            if !seen.insert(entry.id.clone()) {
                return Err(Error::Format(format!("duplicate sample id {:?}", entry.id)));
            }
            for p in [&entry.image_path, &entry.depth_path] {
                if !p.is_file() {
                    return Err(Error::Format(format!("missing dataset file {}", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        manifest.validate(root)?;
        Ok(manifest)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_file(&path, text.as_bytes())
    }
}

/// Loads every sample of `split` listed in the manifest under `root`.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<Sample>> {
    let manifest = DatasetManifest::load(root)?;
    let dir = root.join(split.as_str());
    manifest
        .ids(split)
        .iter()
        .map(|id| read_sample(&dir, id))
        .collect()
}

/// Sizes and seed for a generated desk dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub scene: SceneSpec,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            train: 64,
            val: 16,
            test: 0,
            height: 96,
            width: 128,
            seed: 0,
            scene: SceneSpec::default(),
        }
    }
}

/// Generates one scene per id; the per-sample seed depends only on `(seed, id)`.
pub fn synthesize_split(opts: &SynthOptions, split: Split, count: usize) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let id = format!("{split}_{i:04}");
            let mut rng = sample_rng(opts.seed, 0, &id);
            let spec = SceneSpec {
                height: opts.height,
                width: opts.width,
                seed: opts.seed,
                ..opts.scene.clone()
            };
            let mut s = generate_scene(&spec, &mut rng)?;
            s.id = id;
            Ok(s)
        })
        .collect()
}

/// Writes a full dataset (samples plus manifest) under `root`.
pub fn synthesize_dataset(root: &Path, opts: &SynthOptions) -> Result<DatasetManifest> {
    if opts.train == 0 || opts.val == 0 {
        return Err(Error::EmptyDataset("empty split".into()));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = DatasetManifest::default();
    for (split, count) in [(Split::Train, opts.train), (Split::Val, opts.val), (Split::Test, opts.test)] {
        let samples = synthesize_split(opts, split, count)?;
        let dir = root.join(split.as_str());
        for s in &samples {
            write_sample(&dir, s)?;
        }
        manifest
            .splits
            .insert(split, samples.into_iter().map(|s| s.id).collect());
    }
    manifest.save(root)?;
    Ok(manifest)
}
