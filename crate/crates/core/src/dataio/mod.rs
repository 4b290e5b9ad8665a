//! Bit-exact tensor container, flat-text configs, scene files, dataset
//! generation, and image export.
//!
//! Container layout (all integers little-endian): magic `NLT1`, u64 record
//! count, then per record a u64-length-prefixed UTF-8 name, a u8 dtype code
//! (1 = 64-bit float), a u64 rank, `rank` u64 extents, and the row-major
//! payload. Readers byte-swap from the declared little-endian order, so
//! files are portable across hosts.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::AggregationVariant;
use crate::network::{depth_project, Model, NetConfig};
use crate::physics::{
    add_noise, forward_measure, rasterize, NoiseModel, Primitive, SamplingGeometry, SceneSpec,
    TransientMeasurement,
};
use crate::seed::mix_seed;
use crate::tensor::Tensor;
use crate::training::{target_pyramid, LossType, Strategy, TrainConfig, TrainSample};

const MAGIC: &[u8; 4] = b"NLT1";
const DTYPE_F64: u8 = 1;

pub fn write_container(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut names = HashSet::new();
    for (name, _) in tensors {
        if !names.insert(name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name '{}'", name)));
        }
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F64);
        buf.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated container".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn read_container(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut r = Reader { buf: &raw, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, not an NLT1 container".into()));
    }
    let count = r.u64()? as usize;
    let mut out = Vec::with_capacity(count);
    let mut names = HashSet::new();
    for _ in 0..count {
        let name_len = r.u64()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if !names.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name '{}'", name)));
        }
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("unsupported dtype code {}", dtype)));
        }
        let rank = r.u64()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(8 * numel)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Flat `key = value` run configuration; `#` starts a comment and unknown
/// keys are rejected. Every pipeline stage is reachable from this file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n_x: usize,
    pub n_y: usize,
    pub n_t: usize,
    pub n_z: usize,
    pub wall_extent: f64,
    pub bin_width: f64,
    pub c: f64,
    pub base_width: usize,
    pub patch_size: usize,
    pub k: usize,
    pub k_s: usize,
    pub variant: AggregationVariant,
    pub split_ratio: String,
    pub lr_init: f64,
    pub lr_final: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_scales: usize,
    pub loss_type: LossType,
    pub strategy: Strategy,
    pub depth_sharpness: f64,
    pub apply_noise: bool,
    pub dark_count_rate: f64,
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n_x: 16,
            n_y: 16,
            n_t: 64,
            n_z: 32,
            wall_extent: 1.0,
            bin_width: 2.0e-10,
            c: 3.0e8,
            base_width: 16,
            patch_size: 2,
            k: 9,
            k_s: 6,
            variant: AggregationVariant::ResEdgeConv,
            split_ratio: "1:1:2".into(),
            lr_init: 8e-4,
            lr_final: 1e-6,
            stage1_epochs: 150,
            stage2_epochs: 80,
            batch_size: 4,
            seed: 0,
            loss_scales: 3,
            loss_type: LossType::L1,
            strategy: Strategy::AlbedoFirst,
            depth_sharpness: 20.0,
            apply_noise: false,
            dark_count_rate: 0.0,
            data_dir: "data".into(),
            checkpoint: "model.nlt".into(),
            history: "history.csv".into(),
            out_dir: "out".into(),
        }
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("cannot parse '{}' for key '{}'", v, key)))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "n_x" => cfg.n_x = parse_num(key, value)?,
                "n_y" => cfg.n_y = parse_num(key, value)?,
                "n_t" => cfg.n_t = parse_num(key, value)?,
                "n_z" => cfg.n_z = parse_num(key, value)?,
                "wall_extent" => cfg.wall_extent = parse_num(key, value)?,
                "bin_width" => cfg.bin_width = parse_num(key, value)?,
                "c" => cfg.c = parse_num(key, value)?,
                "base_width" => cfg.base_width = parse_num(key, value)?,
                "patch_size" => cfg.patch_size = parse_num(key, value)?,
                "k" => cfg.k = parse_num(key, value)?,
                "k_s" => cfg.k_s = parse_num(key, value)?,
                "variant" => cfg.variant = AggregationVariant::parse(value)?,
                "split_ratio" => {
                    if value != "1:1:2" {
                        return Err(Error::Config(format!(
                            "unsupported split_ratio '{}' (only 1:1:2 is implemented)",
                            value
                        )));
                    }
                    cfg.split_ratio = value.into();
                }
                "lr_init" => cfg.lr_init = parse_num(key, value)?,
                "lr_final" => cfg.lr_final = parse_num(key, value)?,
                "stage1_epochs" => cfg.stage1_epochs = parse_num(key, value)?,
                "stage2_epochs" => cfg.stage2_epochs = parse_num(key, value)?,
                "batch_size" => cfg.batch_size = parse_num(key, value)?,
                "seed" => cfg.seed = parse_num(key, value)?,
                "loss_scales" => cfg.loss_scales = parse_num(key, value)?,
                "loss_type" => cfg.loss_type = LossType::parse(value)?,
                "strategy" => cfg.strategy = Strategy::parse(value)?,
                "depth_sharpness" => cfg.depth_sharpness = parse_num(key, value)?,
                "apply_noise" => {
                    cfg.apply_noise = match value {
                        "true" | "1" => true,
                        "false" | "0" => false,
                        other => {
                            return Err(Error::Config(format!(
                                "apply_noise must be true/false, got '{}'",
                                other
                            )))
                        }
                    }
                }
                "dark_count_rate" => cfg.dark_count_rate = parse_num(key, value)?,
                "data_dir" => cfg.data_dir = value.into(),
                "checkpoint" => cfg.checkpoint = value.into(),
                "history" => cfg.history = value.into(),
                "out_dir" => cfg.out_dir = value.into(),
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key '{}'",
                        lineno + 1,
                        other
                    )))
                }
            }
        }
        cfg.geometry()?; // re-validate geometry invariants on load
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::parse(&fs::read_to_string(path)?)
    }

    pub fn geometry(&self) -> Result<SamplingGeometry> {
        SamplingGeometry::new(
            self.n_x,
            self.n_y,
            self.n_t,
            self.n_z,
            self.wall_extent,
            self.bin_width,
            self.c,
        )
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        NetConfig::new(
            &self.geometry()?,
            self.base_width,
            self.patch_size,
            self.k,
            self.k_s,
            self.variant,
        )
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr_init: self.lr_init,
            lr_final: self.lr_final,
            stage1_epochs: self.stage1_epochs,
            stage2_epochs: self.stage2_epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            loss_scales: self.loss_scales,
            loss_type: self.loss_type,
            variant: self.variant,
            strategy: self.strategy,
            depth_sharpness: self.depth_sharpness,
        }
    }
}

/// Scene file: same flat `key = value` syntax with keys `prim1`, `prim2`, ...
/// Values are `rect cx cy cz hx hy hz albedo`, `blob cx cy cz rx ry rz
/// albedo`, or `letter G cx cy cz hx hy hz albedo` (meters; z measured from
/// the wall plane; G one of the supported glyphs).
pub fn parse_scene(text: &str) -> Result<SceneSpec> {
    let mut prims: Vec<(usize, Primitive)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Scene(format!("line {}: expected 'primN = ...'", lineno + 1))
        })?;
        let key = key.trim();
        let idx: usize = key
            .strip_prefix("prim")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Scene(format!("line {}: unknown key '{}'", lineno + 1, key)))?;
        let fields: Vec<&str> = value.split_whitespace().collect();
        let kind = *fields
            .first()
            .ok_or_else(|| Error::Scene(format!("line {}: empty primitive", lineno + 1)))?;
        let expected = if kind == "letter" { 9 } else { 8 };
        if fields.len() != expected {
            return Err(Error::Scene(format!(
                "line {}: '{}' expects {} fields",
                lineno + 1,
                kind,
                expected
            )));
        }
        let nums: Vec<f64> = fields[expected - 7..]
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Scene(format!("line {}: bad number '{}'", lineno + 1, s)))
            })
            .collect::<Result<Vec<f64>>>()?;
        let prim = match kind {
            "rect" => Primitive::Rect {
                center: [nums[0], nums[1], nums[2]],
                half_extent: [nums[3], nums[4], nums[5]],
                albedo: nums[6],
            },
            "blob" => Primitive::Blob {
                center: [nums[0], nums[1], nums[2]],
                radii: [nums[3], nums[4], nums[5]],
                albedo: nums[6],
            },
            "letter" => {
                let glyph = fields[1];
                if glyph.chars().count() != 1 {
                    return Err(Error::Scene(format!(
                        "line {}: glyph must be one character, got '{}'",
                        lineno + 1,
                        glyph
                    )));
                }
                Primitive::Letter {
                    glyph: glyph.chars().next().expect("one char"),
                    center: [nums[0], nums[1], nums[2]],
                    half_extent: [nums[3], nums[4], nums[5]],
                    albedo: nums[6],
                }
            }
            other => {
                return Err(Error::Scene(format!(
                    "line {}: unknown primitive kind '{}'",
                    lineno + 1,
                    other
                )))
            }
        };
        prims.push((idx, prim));
    }
    prims.sort_by_key(|&(i, _)| i);
    Ok(SceneSpec {
        primitives: prims.into_iter().map(|(_, p)| p).collect(),
    })
}

/// Seeded random scene of one to three primitives, all inside the volume.
/// Primitives sit in a fixed standoff band along z: the quartic radiometric
/// falloff would otherwise bury deep scatterers below the backprojection
/// blur of near ones at desk-scale resolutions.
pub fn random_scene(g: &SamplingGeometry, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.wall_extent;
    let z_ext = g.z_extent();
    let z_res = g.z_res();
    let n = rng.random_range(1..=3usize);
    let mut primitives = Vec::with_capacity(n);
    for _ in 0..n {
        let albedo = rng.random_range(0.3..1.0);
        let hx = rng.random_range(0.08..0.22) * w;
        let hy = rng.random_range(0.08..0.22) * w;
        let hz = rng.random_range(1.0..3.0) * z_res;
        let cx = rng.random_range(-(w / 2.0 - hx)..(w / 2.0 - hx));
        let cy = rng.random_range(-(w / 2.0 - hy)..(w / 2.0 - hy));
        let z_lo = (0.3 * z_ext).max(hz);
        let z_hi = (0.5 * z_ext).max(z_lo + z_res);
        let cz = rng.random_range(z_lo..z_hi);
        primitives.push(if rng.random_bool(0.5) {
            Primitive::Rect {
                center: [cx, cy, cz],
                half_extent: [hx, hy, hz],
                albedo,
            }
        } else {
            Primitive::Blob {
                center: [cx, cy, cz],
                radii: [hx, hy, hz],
                albedo,
            }
        });
    }
    SceneSpec { primitives }
}

/// Ground-truth projections of a volume in `n_x x n_y x n_z` order.
pub fn volume_projections(vol: &Tensor, z_res: f64) -> Result<(Tensor, Tensor)> {
    let (nx, ny, nz) = (vol.shape()[0], vol.shape()[1], vol.shape()[2]);
    let albedo = Tensor::from_fn(&[nx, ny], |p| {
        (0..nz)
            .map(|z| vol.data()[p * nz + z])
            .fold(f64::NEG_INFINITY, f64::max)
    });
    // reuse the channel-layout projector for the depth map
    let mut chan = Tensor::zeros(&[nz, nx, ny]);
    for p in 0..nx * ny {
        for z in 0..nz {
            chan.data_mut()[z * nx * ny + p] = vol.data()[p * nz + z];
        }
    }
    let depth = depth_project(&chan, z_res)?;
    Ok((albedo, depth))
}

pub fn sample_file_name(index: usize) -> String {
    format!("sample_{:04}.nlt", index)
}

/// Generates `n_samples` deterministic samples under `out_dir`: for each, a
/// seeded random scene is rasterized, forward-measured, optionally noised,
/// and stored with its three-scale ground-truth projections.
pub fn generate_dataset(
    cfg: &RunConfig,
    n_samples: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let g = cfg.geometry()?;
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let sample_seed = mix_seed(seed, i as u64);
        let scene = random_scene(&g, sample_seed);
        let vol = rasterize(&scene, &g)?;
        let mut meas = forward_measure(&vol);
        if cfg.apply_noise {
            let nm = NoiseModel::new(cfg.dark_count_rate, mix_seed(sample_seed, 1))?;
            meas = add_noise(&meas, &nm);
        }
        let (albedo, depth) = volume_projections(&vol.values, g.z_res())?;
        let albedo_pyr = target_pyramid(&albedo)?;
        let depth_pyr = target_pyramid(&depth)?;
        let mut records = vec![("measurement".to_string(), meas.histogram.clone())];
        for (s, t) in albedo_pyr.iter().enumerate() {
            records.push((format!("albedo_s{}", s + 1), t.clone()));
        }
        for (s, t) in depth_pyr.iter().enumerate() {
            records.push((format!("depth_s{}", s + 1), t.clone()));
        }
        let path = out_dir.join(sample_file_name(i));
        write_container(&path, &records)?;
        files.push(path);
    }
    Ok(files)
}

/// Loads a dataset directory produced by [`generate_dataset`].
pub fn load_dataset(cfg: &RunConfig, dir: &Path) -> Result<Vec<TrainSample>> {
    let g = cfg.geometry()?;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("sample_") && n.ends_with(".nlt"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!(
            "no sample_*.nlt files under {}",
            dir.display()
        )));
    }
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let records = read_container(&path)?;
        let find = |name: &str| -> Result<Tensor> {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| {
                    Error::Format(format!("{}: missing record '{}'", path.display(), name))
                })
        };
        let meas = TransientMeasurement::new(find("measurement")?, g.clone())?;
        let albedo = vec![find("albedo_s1")?, find("albedo_s2")?, find("albedo_s3")?];
        let depth = vec![find("depth_s1")?, find("depth_s2")?, find("depth_s3")?];
        out.push(TrainSample::new(meas, albedo, depth)?);
    }
    Ok(out)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let named: Vec<(String, Tensor)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    write_container(path, &named)
}

pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model> {
    let mut model = Model::init(cfg.net_config()?, cfg.seed)?;
    let records: HashMap<String, Tensor> = read_container(path)?.into_iter().collect();
    let names: Vec<String> = model
        .named_params()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let mut tensors: Vec<&mut Tensor> = Vec::new();
    tensors.extend(model.albedo.tensors_mut());
    tensors.extend(model.depth.tensors_mut());
    if names.len() != tensors.len() {
        return Err(Error::Format("parameter enumeration mismatch".into()));
    }
    for (name, slot) in names.iter().zip(tensors) {
        let found = records
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing parameter '{}'", name)))?;
        if found.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "checkpoint parameter '{}' has shape {:?}, expected {:?}",
                name,
                found.shape(),
                slot.shape()
            )));
        }
        *slot = found.clone();
    }
    Ok(model)
}

/// Writes an 8-bit binary portable graymap (P5) after min-max normalization;
/// constant images map to mid-gray 128.
pub fn export_image(img: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = match img.shape() {
        [h, w] => (*h, *w),
        other => {
            return Err(Error::Format(format!(
                "export_image expects a 2-d image, got {:?}",
                other
            )))
        }
    };
    if !img.is_finite() {
        return Err(Error::Format("image contains non-finite values".into()));
    }
    let lo = img.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut buf = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    if hi > lo {
        for &v in img.data() {
            buf.push(((v - lo) / (hi - lo) * 255.0).round() as u8);
        }
    } else {
        buf.extend(std::iter::repeat_n(128u8, h * w));
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}
