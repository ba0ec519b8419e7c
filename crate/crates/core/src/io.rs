//! KITTI scan, label and pose files, binary checkpoints, dataset manifests
//! and the key=value run configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geom::{orthonormalize, IcpConfig, Point3, PointCloud, RigidTransform};
use crate::instances::SemanticPointCloud;
use crate::matching::SinkhornConfig;
use crate::nets::{Model, ModelConfig};
use crate::pipeline::{EvalPair, RegistrationConfig};
use crate::tensor::Tensor;
use crate::training::{SceneGenConfig, SyntheticPair, TrainConfig};

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a KITTI `.bin` scan: little-endian f32 `(x, y, z, intensity)` records.
pub fn read_scan(path: &Path) -> Result<PointCloud> {
    parse_scan(&read(path)?).map_err(|msg| Error::format(path, msg))
}

fn parse_scan(bytes: &[u8]) -> std::result::Result<PointCloud, String> {
    if bytes.len() % 16 != 0 {
        return Err(format!("size {} is not a multiple of 16 bytes", bytes.len()));
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut intensity = Vec::with_capacity(bytes.len() / 16);
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4 bytes"));
        let p = Point3::new(f(0) as f64, f(1) as f64, f(2) as f64);
        if !p.is_finite() {
            return Err(format!("non-finite point at index {i}"));
        }
        points.push(p);
        intensity.push(f(3));
    }
    Ok(PointCloud {
        points,
        intensity: Some(intensity),
    })
}

/// Writes a scan in the `.bin` layout; missing intensities are written as 0.
pub fn write_scan(path: &Path, cloud: &PointCloud) -> Result<()> {
    write(path, &scan_bytes(cloud))
}

fn scan_bytes(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (i, p) in cloud.points.iter().enumerate() {
        let r = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        for v in [p.x as f32, p.y as f32, p.z as f32, r] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Reads a SemanticKITTI `.label` file, keeping the lower 16 bits (semantic
/// class) of every little-endian u32.
pub fn read_labels(path: &Path, point_count: usize) -> Result<Vec<u32>> {
    let bytes = read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path, format!("size {} is not a multiple of 4 bytes", bytes.len())));
    }
    let labels = bytes.len() / 4;
    if labels != point_count {
        return Err(Error::LabelCountMismatch {
            scan: point_count,
            labels,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) & 0xffff)
        .collect())
}

pub fn write_labels(path: &Path, labels: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    write(path, &bytes)
}

/// Reads a scan and its label file into a labeled cloud.
pub fn read_labeled_scan(scan: &Path, labels: &Path) -> Result<SemanticPointCloud> {
    let cloud = read_scan(scan)?;
    let l = read_labels(labels, cloud.len())?;
    SemanticPointCloud::new(cloud, l)
}

/// Rotations further than this from orthonormal are rejected by [`read_poses`].
pub const POSE_ORTHO_TOL: f64 = 1e-3;

/// Parses one pose per non-empty line: a row-major 3×4 `[R | t]`.
///
/// Rotations within [`POSE_ORTHO_TOL`] of orthonormal are projected onto the
/// nearest proper rotation; anything further is an error.
pub fn read_poses(path: &Path) -> Result<Vec<RigidTransform>> {
    let text = String::from_utf8(read(path)?).map_err(|_| Error::format(path, "not UTF-8 text"))?;
    parse_poses(&text).map_err(|msg| Error::format(path, msg))
}

pub fn parse_poses(text: &str) -> std::result::Result<Vec<RigidTransform>, String> {
    let mut poses = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format!("line {line_no}: {e}"))?;
        if vals.len() != 12 {
            return Err(format!("line {line_no}: expected 12 numbers, found {}", vals.len()));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(format!("line {line_no}: non-finite value"));
        }
        let r = Matrix3::new(vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10]);
        crate::geom::check_rotation(&r, POSE_ORTHO_TOL).map_err(|e| format!("line {line_no}: {e}"))?;
        let t = Vector3::new(vals[3], vals[7], vals[11]);
        poses.push(RigidTransform::new(orthonormalize(&r), t).map_err(|e| format!("line {line_no}: {e}"))?);
    }
    Ok(poses)
}

/// One pose per line, 12 numbers, full precision.
pub fn format_transform(t: &RigidTransform) -> String {
    let v = t.to_row_major_3x4();
    let mut s = v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ");
    s.push('\n');
    s
}

pub fn write_poses(path: &Path, poses: &[RigidTransform]) -> Result<()> {
    let text: String = poses.iter().map(format_transform).collect();
    write(path, text.as_bytes())
}

/// Motion taking frame `b` into frame `a` coordinates: `pose_a⁻¹ · pose_b`.
pub fn relative_pose(pose_a: &RigidTransform, pose_b: &RigidTransform) -> RigidTransform {
    pose_a.inverse().compose(pose_b)
}

const MAGIC: &[u8; 4] = b"SGM1";
/// Checkpoint format version written by [`save_checkpoint`].
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Serializes named tensors in the checkpoint layout.
pub fn encode_checkpoint<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut seen = BTreeSet::new();
    for (name, _) in &tensors {
        if !seen.insert(*name) {
            return Err(Error::validation(format!("duplicate tensor name {name}")));
        }
    }
    let u32_of = |n: usize| -> Result<[u8; 4]> {
        u32::try_from(n)
            .map(u32::to_le_bytes)
            .map_err(|_| Error::validation("checkpoint field exceeds u32"))
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(tensors.len())?);
    for (name, t) in tensors {
        out.extend_from_slice(&u32_of(name.len())?);
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(t.rank())?);
        for &d in t.shape() {
            out.extend_from_slice(&u32_of(d)?);
        }
        out.push(DTYPE_F64);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("unexpected end of data at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses checkpoint bytes. The CRC is checked before anything else, so a
/// truncated or corrupted file always reports [`Error::CrcMismatch`].
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 4 {
        return Err(Error::CrcMismatch {
            stored: 0,
            computed: crc32fast::hash(bytes),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::CrcMismatch { stored, computed });
    }
    if body.len() < 4 || &body[..4] != MAGIC {
        let mut m = [0u8; 4];
        let n = body.len().min(4);
        m[..n].copy_from_slice(&body[..n]);
        return Err(Error::BadMagic(m));
    }
    let mut c = Cursor { bytes: body, pos: 4 };
    let fmt = |msg: String| Error::format(path, msg);
    let version = c.u32().map_err(fmt)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = c.u32().map_err(fmt)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32().map_err(fmt)? as usize;
        let name = std::str::from_utf8(c.take(len).map_err(fmt)?)
            .map_err(|_| fmt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32().map_err(fmt)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(c.u32().map_err(fmt)? as usize);
        }
        let dtype = c.take(1).map_err(fmt)?[0];
        if dtype != DTYPE_F64 {
            return Err(fmt(format!("tensor {name}: unsupported dtype tag {dtype}")));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| fmt(format!("tensor {name}: shape overflows")))?;
        let raw = c
            .take(n.checked_mul(8).ok_or_else(|| fmt(format!("tensor {name}: shape overflows")))?)
            .map_err(fmt)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if c.pos != body.len() {
        return Err(fmt(format!("{} trailing bytes after the last tensor", body.len() - c.pos)));
    }
    Ok(out)
}

/// Writes every parameter of `model` in parameter order.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model.params.iter().map(|(_, p)| (p.name.as_str(), &p.value)))?;
    write(path, &bytes)
}

/// Named tensors stored in a checkpoint file.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_checkpoint(&read(path)?, path)
}

/// Replaces the weights of `model` with a checkpoint whose names and shapes
/// must match the model's schema exactly.
pub fn load_checkpoint(model: &mut Model, path: &Path) -> Result<()> {
    let tensors = read_checkpoint(path)?;
    apply_checkpoint(model, tensors)
}

fn apply_checkpoint(model: &mut Model, tensors: Vec<(String, Tensor)>) -> Result<()> {
    let expected: BTreeSet<String> = model.params.iter().map(|(_, p)| p.name.clone()).collect();
    let found: BTreeSet<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
    let missing: Vec<String> = expected.difference(&found).cloned().collect();
    let unexpected: Vec<String> = found.difference(&expected).cloned().collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        return Err(Error::SchemaMismatch { missing, unexpected });
    }
    for (name, t) in &tensors {
        let want = &model.params.by_name(name).expect("checked above").value;
        if want.shape() != t.shape() {
            return Err(Error::SchemaMismatch {
                missing: vec![format!("{name} with shape {:?}", want.shape())],
                unexpected: vec![format!("{name} with shape {:?}", t.shape())],
            });
        }
    }
    for (name, t) in tensors {
        model.params.set_value(&name, t)?;
    }
    Ok(())
}

/// One sequence of a dataset: scans with labels and per-frame poses.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFiles {
    pub dir: PathBuf,
    pub scans: Vec<PathBuf>,
    pub labels: Vec<PathBuf>,
    pub poses: PathBuf,
}

/// Sequences plus the pair-selection rule: frame `i` is paired with `i + stride`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub sequences: Vec<SequenceFiles>,
    pub stride: usize,
}

/// A scan pair selected from a manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestPair {
    pub sequence: usize,
    pub frame_a: usize,
    pub frame_b: usize,
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().and_then(|e| e.to_str()) == Some(ext) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

impl DatasetManifest {
    /// Parses a manifest. Lines are `key = value`; `#` starts a comment.
    ///
    /// ```text
    /// stride = 5
    /// sequence = /data/kitti/sequences/08
    /// poses = /data/kitti/poses/08.txt
    /// ```
    ///
    /// Each `sequence` directory holds `velodyne/*.bin` and `labels/*.label`;
    /// a `poses` line applies to the preceding sequence and defaults to
    /// `<sequence>/poses.txt`. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut stride = 1;
        let mut seqs: Vec<(PathBuf, Option<PathBuf>)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("manifest line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "stride" => {
                    stride = v
                        .parse()
                        .ok()
                        .filter(|&s: &usize| s > 0)
                        .ok_or_else(|| Error::validation(format!("manifest line {}: bad stride {v:?}", n + 1)))?
                }
                "sequence" => seqs.push((base.join(v), None)),
                "poses" => match seqs.last_mut() {
                    Some(last) => last.1 = Some(base.join(v)),
                    None => {
                        return Err(Error::validation(format!("manifest line {}: poses before any sequence", n + 1)))
                    }
                },
                _ => return Err(Error::validation(format!("manifest line {}: unknown key {k:?}", n + 1))),
            }
        }
        let mut sequences = Vec::with_capacity(seqs.len());
        for (dir, poses) in seqs {
            let scans = sorted_files(&dir.join("velodyne"), "bin")?;
            let labels = sorted_files(&dir.join("labels"), "label")?;
            if scans.len() != labels.len() {
                return Err(Error::validation(format!(
                    "sequence {}: {} scans but {} label files",
                    dir.display(),
                    scans.len(),
                    labels.len()
                )));
            }
            let poses = poses.unwrap_or_else(|| dir.join("poses.txt"));
            sequences.push(SequenceFiles { dir, scans, labels, poses });
        }
        Ok(DatasetManifest { sequences, stride })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = String::from_utf8(read(path)?).map_err(|_| Error::format(path, "not UTF-8 text"))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Frame pairs `(i, i + stride)` for `i = 0, stride, 2·stride, …`.
    pub fn pairs(&self) -> Vec<ManifestPair> {
        let mut out = Vec::new();
        for (s, seq) in self.sequences.iter().enumerate() {
            let mut a = 0;
            while a + self.stride < seq.scans.len() {
                out.push(ManifestPair {
                    sequence: s,
                    frame_a: a,
                    frame_b: a + self.stride,
                });
                a += self.stride;
            }
        }
        out
    }
}

impl DatasetManifest {
    /// Poses of every sequence, each list checked to cover all scans.
    pub fn read_all_poses(&self) -> Result<Vec<Vec<RigidTransform>>> {
        self.sequences
            .iter()
            .map(|s| {
                let poses = read_poses(&s.poses)?;
                if poses.len() < s.scans.len() {
                    return Err(Error::format(
                        &s.poses,
                        format!("{} poses for {} scans", poses.len(), s.scans.len()),
                    ));
                }
                Ok(poses)
            })
            .collect()
    }

    /// Loads one pair. `poses` comes from [`DatasetManifest::read_all_poses`];
    /// `velo_to_cam` maps scanner coordinates into the frame the poses use.
    /// The ground truth takes frame `a` points into frame `b`.
    pub fn load_pair(
        &self,
        pair: &ManifestPair,
        poses: &[Vec<RigidTransform>],
        velo_to_cam: &RigidTransform,
    ) -> Result<EvalPair> {
        let seq = &self.sequences[pair.sequence];
        let x = read_labeled_scan(&seq.scans[pair.frame_a], &seq.labels[pair.frame_a])?;
        let y = read_labeled_scan(&seq.scans[pair.frame_b], &seq.labels[pair.frame_b])?;
        let p = &poses[pair.sequence];
        let cam = relative_pose(&p[pair.frame_b], &p[pair.frame_a]);
        let gt = velo_to_cam.inverse().compose(&cam).compose(velo_to_cam);
        let name = format!(
            "{}:{}-{}",
            seq.dir.file_name().map_or_else(|| seq.dir.display().to_string(), |n| n.to_string_lossy().into()),
            pair.frame_a,
            pair.frame_b
        );
        Ok(EvalPair { name, x, y, gt })
    }
}

/// Writes synthetic pairs as a dataset [`DatasetManifest::load`] can read: one
/// two-frame sequence per pair plus `manifest.txt`. Frame 0 is X, frame 1 is Y.
pub fn write_synthetic_dataset(dir: &Path, pairs: &[SyntheticPair]) -> Result<PathBuf> {
    let mut manifest = String::from("stride = 1\n");
    for (i, pair) in pairs.iter().enumerate() {
        let name = format!("pair_{i:06}");
        let seq = dir.join(&name);
        for sub in ["velodyne", "labels"] {
            let d = seq.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for (frame, cloud) in [&pair.x, &pair.y].into_iter().enumerate() {
            write_scan(&seq.join(format!("velodyne/{frame:06}.bin")), cloud.cloud())?;
            write_labels(&seq.join(format!("labels/{frame:06}.label")), cloud.labels())?;
        }
        write_poses(&seq.join("poses.txt"), &[RigidTransform::identity(), pair.gt.inverse()])?;
        writeln!(manifest, "sequence = {name}").expect("writing to a string");
    }
    let path = dir.join("manifest.txt");
    write(&path, manifest.as_bytes())?;
    Ok(path)
}

/// Every tunable of the command-line tools, read from a flat key=value file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generator: SceneGenConfig,
    pub registration: RegistrationConfig,
    /// Synthetic pair counts: training, per-epoch validation and held-out evaluation.
    pub train_pairs: usize,
    pub validation_pairs: usize,
    pub eval_pairs: usize,
    /// Category table file; the built-in table when absent.
    pub categories: Option<PathBuf>,
    /// Velodyne-to-camera extrinsic applied to poses read from disk.
    pub velo_to_cam: RigidTransform,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            generator: SceneGenConfig::default(),
            registration: RegistrationConfig::default(),
            train_pairs: 500,
            validation_pairs: 0,
            eval_pairs: 100,
            categories: None,
            velo_to_cam: RigidTransform::identity(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::validation(format!("config key {key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr, const N: usize>(key: &str, v: &str) -> Result<[T; N]> {
    let items: Vec<T> = v
        .split(',')
        .map(|s| parse_num(key, s.trim()))
        .collect::<Result<_>>()?;
    items
        .try_into()
        .map_err(|_| Error::validation(format!("config key {key}: expected {N} comma-separated values")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::validation(format!("config key {key}: expected true/false, got {v:?}"))),
    }
}

impl RunConfig {
    /// Applies `key = value` lines on top of the defaults. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("config line {}: expected key = value", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = String::from_utf8(read(path)?).map_err(|_| Error::format(path, "not UTF-8 text"))?;
        let mut c = Self::parse(&text)?;
        if let Some(p) = &c.categories {
            if p.is_relative() {
                c.categories = Some(path.parent().unwrap_or(Path::new(".")).join(p));
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.generator.validate()?;
        self.registration.validate()?;
        if self.train.shape_points != self.model.shape_points {
            return Err(Error::validation("train.shape_points must equal model.shape_points"));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t, g, r) = (
            &mut self.model,
            &mut self.train,
            &mut self.generator,
            &mut self.registration,
        );
        match key {
            "model.num_categories" => m.num_categories = parse_num(key, v)?,
            "model.gcn_dims" => m.gcn_dims = parse_list(key, v)?,
            "model.shape_dims" => m.shape_dims = parse_list(key, v)?,
            "model.tnet_hidden" => m.tnet_hidden = parse_list(key, v)?,
            "model.coord_scale" => m.coord_scale = parse_num(key, v)?,
            "model.attention_gain" => m.attention_gain = parse_num(key, v)?,
            "model.affinity_gain" => m.affinity_gain = parse_num(key, v)?,
            "shape_points" => {
                m.shape_points = parse_num(key, v)?;
                t.shape_points = m.shape_points;
            }
            "graph_k" => {
                t.graph_k = parse_num(key, v)?;
                r.graph_k = t.graph_k;
            }
            "threshold" => {
                t.threshold = parse_num(key, v)?;
                r.threshold = t.threshold;
            }
            "beta" => {
                t.beta = parse_num(key, v)?;
                r.beta = t.beta;
            }
            "sinkhorn.max_iters" => {
                t.sinkhorn.max_iters = parse_num(key, v)?;
                r.sinkhorn.max_iters = t.sinkhorn.max_iters;
            }
            "sinkhorn.tol" => {
                t.sinkhorn.tol = parse_num(key, v)?;
                r.sinkhorn.tol = t.sinkhorn.tol;
            }
            "train.batch_size" => t.batch_size = parse_num(key, v)?,
            "train.learning_rate" => t.learning_rate = parse_num(key, v)?,
            "train.lr_decay" => t.lr_decay = parse_num(key, v)?,
            "train.momentum" => t.momentum = parse_num(key, v)?,
            "train.epochs" => t.epochs = parse_num(key, v)?,
            "train.seed" => t.seed = parse_num(key, v)?,
            "train.dustbin_loss" => t.dustbin_loss = parse_bool(key, v)?,
            "train.pairs" => self.train_pairs = parse_num(key, v)?,
            "train.validation_pairs" => self.validation_pairs = parse_num(key, v)?,
            "eval.pairs" => self.eval_pairs = parse_num(key, v)?,
            "gen.instances" => g.instances = parse_list::<usize, 2>(key, v).map(|[a, b]| (a, b))?,
            "gen.points_per_instance" => {
                g.points_per_instance = parse_list::<usize, 2>(key, v).map(|[a, b]| (a, b))?
            }
            "gen.point_noise" => g.point_noise = parse_num(key, v)?,
            "gen.centroid_jitter" => g.centroid_jitter = parse_num(key, v)?,
            "gen.dropout" => g.dropout = parse_num(key, v)?,
            "gen.rotation_deg" => g.rotation_deg = parse_num(key, v)?,
            "gen.tilt_deg" => g.tilt_deg = parse_num(key, v)?,
            "gen.max_translation" => g.max_translation = parse_num(key, v)?,
            "gen.scene_extent" => g.scene_extent = parse_num(key, v)?,
            "gen.min_gap" => g.min_gap = parse_num(key, v)?,
            "register.min_instances" => r.min_instances = parse_num(key, v)?,
            "register.min_correspondences" => r.min_correspondences = parse_num(key, v)?,
            "register.rre_threshold" => r.rre_threshold = parse_num(key, v)?,
            "register.rte_threshold" => r.rte_threshold = parse_num(key, v)?,
            "icp.max_iters" => r.icp.max_iters = parse_num(key, v)?,
            "icp.convergence_eps" => r.icp.convergence_eps = parse_num(key, v)?,
            "icp.max_correspondence_dist" => r.icp.max_correspondence_dist = parse_num(key, v)?,
            "categories" => self.categories = Some(PathBuf::from(v)),
            "velo_to_cam" => {
                let vals: [f64; 12] = parse_list(key, &v.split_whitespace().collect::<Vec<_>>().join(","))?;
                self.velo_to_cam = RigidTransform::from_row_major_3x4(&vals)?;
            }
            _ => return Err(Error::validation(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in the format [`RunConfig::parse`] reads.
    pub fn to_text(&self) -> String {
        let (m, t, g, r) = (&self.model, &self.train, &self.generator, &self.registration);
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("writing to a string");
        kv("model.num_categories", m.num_categories.to_string());
        kv("model.gcn_dims", list(&m.gcn_dims));
        kv("model.shape_dims", list(&m.shape_dims));
        kv("model.tnet_hidden", list(&m.tnet_hidden));
        kv("model.coord_scale", m.coord_scale.to_string());
        kv("model.attention_gain", m.attention_gain.to_string());
        kv("model.affinity_gain", m.affinity_gain.to_string());
        kv("shape_points", m.shape_points.to_string());
        kv("graph_k", t.graph_k.to_string());
        kv("threshold", t.threshold.to_string());
        kv("beta", t.beta.to_string());
        kv("sinkhorn.max_iters", t.sinkhorn.max_iters.to_string());
        kv("sinkhorn.tol", t.sinkhorn.tol.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.learning_rate", t.learning_rate.to_string());
        kv("train.lr_decay", t.lr_decay.to_string());
        kv("train.momentum", t.momentum.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.dustbin_loss", t.dustbin_loss.to_string());
        kv("train.pairs", self.train_pairs.to_string());
        kv("train.validation_pairs", self.validation_pairs.to_string());
        kv("eval.pairs", self.eval_pairs.to_string());
        kv("gen.instances", list(&[g.instances.0, g.instances.1]));
        kv(
            "gen.points_per_instance",
            list(&[g.points_per_instance.0, g.points_per_instance.1]),
        );
        kv("gen.point_noise", g.point_noise.to_string());
        kv("gen.centroid_jitter", g.centroid_jitter.to_string());
        kv("gen.dropout", g.dropout.to_string());
        kv("gen.rotation_deg", g.rotation_deg.to_string());
        kv("gen.tilt_deg", g.tilt_deg.to_string());
        kv("gen.max_translation", g.max_translation.to_string());
        kv("gen.scene_extent", g.scene_extent.to_string());
        kv("gen.min_gap", g.min_gap.to_string());
        kv("register.min_instances", r.min_instances.to_string());
        kv("register.min_correspondences", r.min_correspondences.to_string());
        kv("register.rre_threshold", r.rre_threshold.to_string());
        kv("register.rte_threshold", r.rte_threshold.to_string());
        kv("icp.max_iters", r.icp.max_iters.to_string());
        kv("icp.convergence_eps", r.icp.convergence_eps.to_string());
        kv("icp.max_correspondence_dist", r.icp.max_correspondence_dist.to_string());
        if let Some(p) = &self.categories {
            kv("categories", p.display().to_string());
        }
        let v = self.velo_to_cam.to_row_major_3x4();
        kv("velo_to_cam", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "));
        s
    }

    /// Sinkhorn settings shared by training and registration.
    pub fn sinkhorn(&self) -> SinkhornConfig {
        self.train.sinkhorn
    }

    /// ICP settings used by registration.
    pub fn icp(&self) -> &IcpConfig {
        &self.registration.icp
    }
}
