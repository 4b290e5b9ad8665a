//! Dual-branch three-scale encoder/decoder over graph blocks.
//!
//! The physics-based feature transform folds the backprojected volume's z
//! axis into channels; the albedo branch consumes the feature as is, the
//! depth branch consumes its depth-masked variant. Each scale runs one graph
//! block plus channel fusion; stride-2 pointwise convolutions downsample
//! (doubling width), nearest-neighbor upsampling plus 1x1 projections come
//! back up with additive skips, and a per-scale softplus head emits a
//! reconstruction voxel at every decoder scale.

use rand_chacha::ChaCha8Rng;

use crate::error::{param_err, shape_err, Result};
use crate::graph::{
    graph_block_forward, uniform_init, AggregationVariant, BlockConfig, BlockParams, BlockVars,
};
use crate::physics::{adjoint_backproject, SamplingGeometry, TransientMeasurement};
use crate::seed::mix_seed;
use crate::tensor::{DiffTensor, Tape, Tensor};

pub const SCALES: usize = 3;

/// Spatial feature volume `C x H x W` produced by the feature transform
/// (C = n_z after folding depth into channels) at a given scale.
#[derive(Debug, Clone)]
pub struct GridFeature {
    pub values: DiffTensor,
    pub scale: usize,
}

/// Network-wide structure: geometry-derived extents plus graph
/// hyperparameters shared by both branches.
#[derive(Debug, Clone)]
pub struct NetConfig {
    pub n_z: usize,
    pub height: usize,
    pub width: usize,
    pub base_width: usize,
    pub patch: usize,
    pub k: usize,
    pub k_s: usize,
    pub variant: AggregationVariant,
}

impl NetConfig {
    pub fn new(
        g: &SamplingGeometry,
        base_width: usize,
        patch: usize,
        k: usize,
        k_s: usize,
        variant: AggregationVariant,
    ) -> Result<Self> {
        let cfg = NetConfig {
            n_z: g.n_z,
            height: g.n_x,
            width: g.n_y,
            base_width,
            patch,
            k,
            k_s,
            variant,
        };
        if base_width == 0 || patch == 0 || k == 0 || k_s == 0 || k_s > k {
            return Err(param_err(
                "net_config",
                "base_width, patch, k, k_s must be positive with k_s <= k",
            ));
        }
        for scale in 1..=SCALES {
            let (h, w) = cfg.scale_extent(scale);
            if h % patch != 0 || w % patch != 0 || h / patch < 2 || w / patch < 2 {
                return Err(param_err(
                    "net_config",
                    format!(
                        "scale {} extent {}x{} needs a patch grid of at least 2x2",
                        scale, h, w
                    ),
                ));
            }
        }
        Ok(cfg)
    }

    pub fn scale_extent(&self, scale: usize) -> (usize, usize) {
        let f = 1 << (scale - 1);
        (self.height / f, self.width / f)
    }

    pub fn scale_width(&self, scale: usize) -> usize {
        self.base_width << (scale - 1)
    }

    /// Feature dimension of one patch vertex at `scale`.
    pub fn scale_dim(&self, scale: usize) -> usize {
        self.scale_width(scale) * self.patch * self.patch
    }

    /// Graph settings at `scale`; k and k_s are clamped so that k < N holds
    /// on coarse scales with few patches.
    pub fn block_config(&self, scale: usize) -> BlockConfig {
        let (h, w) = self.scale_extent(scale);
        let n = (h / self.patch) * (w / self.patch);
        let k = self.k.min(n - 1);
        BlockConfig {
            patch: self.patch,
            k,
            k_s: self.k_s.min(k),
            variant: self.variant,
        }
    }
}

/// All learnable state of one branch. The albedo and depth branches are
/// structurally identical, so one serialized parameter set fits either.
#[derive(Debug, Clone)]
pub struct BranchParams {
    pub stem: Tensor,
    pub enc: Vec<BlockParams>,
    pub down: Vec<Tensor>,
    pub up: Vec<Tensor>,
    pub dec: Vec<BlockParams>,
    pub heads: Vec<Tensor>,
}

impl BranchParams {
    pub fn init(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let c = [cfg.scale_width(1), cfg.scale_width(2), cfg.scale_width(3)];
        let enc = (1..=3)
            .map(|s| BlockParams::init(cfg.scale_dim(s), cfg.variant, rng))
            .collect::<Result<Vec<_>>>()?;
        let down = vec![
            uniform_init(rng, &[c[1], c[0]], c[0]),
            uniform_init(rng, &[c[2], c[1]], c[1]),
        ];
        let up = vec![
            uniform_init(rng, &[c[1], c[2]], c[2]),
            uniform_init(rng, &[c[0], c[1]], c[1]),
        ];
        let dec = vec![
            BlockParams::init(cfg.scale_dim(2), cfg.variant, rng)?,
            BlockParams::init(cfg.scale_dim(1), cfg.variant, rng)?,
        ];
        let heads = (0..3)
            .map(|i| uniform_init(rng, &[cfg.n_z, c[i]], c[i]))
            .collect();
        Ok(BranchParams {
            stem: uniform_init(rng, &[c[0], cfg.n_z], cfg.n_z),
            enc,
            down,
            up,
            dec,
            heads,
        })
    }

    /// Stable parameter names (used for checkpoints and optimizer state).
    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = vec![(format!("{prefix}.stem"), &self.stem)];
        for (i, b) in self.enc.iter().enumerate() {
            out.extend(b.named(&format!("{prefix}.enc{}", i + 1)));
        }
        for (i, t) in self.down.iter().enumerate() {
            out.push((format!("{prefix}.down{}", i + 1), t));
        }
        for (i, t) in self.up.iter().enumerate() {
            // up[0] maps scale 3 -> 2, up[1] maps scale 2 -> 1
            out.push((format!("{prefix}.up{}", 2 - i), t));
        }
        out.extend(self.dec[0].named(&format!("{prefix}.dec2")));
        out.extend(self.dec[1].named(&format!("{prefix}.dec1")));
        for (i, t) in self.heads.iter().enumerate() {
            out.push((format!("{prefix}.head{}", i + 1), t));
        }
        out
    }

    /// Mutable tensors in the same order as [`BranchParams::named`] and
    /// [`BranchVars::leaves`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.stem];
        for b in self.enc.iter_mut() {
            out.extend(b.tensors_mut());
        }
        for t in self.down.iter_mut() {
            out.push(t);
        }
        for t in self.up.iter_mut() {
            out.push(t);
        }
        for b in self.dec.iter_mut() {
            out.extend(b.tensors_mut());
        }
        for t in self.heads.iter_mut() {
            out.push(t);
        }
        out
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> BranchVars {
        let lift = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.leaf(t)
            } else {
                DiffTensor::constant(t.clone())
            }
        };
        BranchVars {
            stem: lift(tape, &self.stem),
            enc: self
                .enc
                .iter()
                .map(|b| b.register(tape, trainable))
                .collect(),
            down: self.down.iter().map(|t| lift(tape, t)).collect(),
            up: self.up.iter().map(|t| lift(tape, t)).collect(),
            dec: self
                .dec
                .iter()
                .map(|b| b.register(tape, trainable))
                .collect(),
            heads: self.heads.iter().map(|t| lift(tape, t)).collect(),
        }
    }
}

/// Tape-registered view of [`BranchParams`].
#[derive(Debug, Clone)]
pub struct BranchVars {
    pub stem: DiffTensor,
    pub enc: Vec<BlockVars>,
    pub down: Vec<DiffTensor>,
    pub up: Vec<DiffTensor>,
    pub dec: Vec<BlockVars>,
    pub heads: Vec<DiffTensor>,
}

impl BranchVars {
    pub fn leaves(&self) -> Vec<&DiffTensor> {
        let mut out = vec![&self.stem];
        for b in &self.enc {
            out.extend(b.leaves());
        }
        out.extend(self.down.iter());
        out.extend(self.up.iter());
        for b in &self.dec {
            out.extend(b.leaves());
        }
        out.extend(self.heads.iter());
        out
    }
}

/// Physics-based feature transform: backproject the measurement, fold z into
/// channels (`F[z][x][y]`), and normalize to unit maximum. Non-learnable.
pub fn feature_transform(y: &TransientMeasurement) -> GridFeature {
    let g = &y.geometry;
    let vol = adjoint_backproject(y);
    let (nx, ny, nz) = (g.n_x, g.n_y, g.n_z);
    let vd = vol.data();
    let mut folded = vec![0.0; nz * nx * ny];
    let mut max = 0.0f64;
    for x in 0..nx {
        for yy in 0..ny {
            for z in 0..nz {
                let v = vd[(x * ny + yy) * nz + z];
                folded[z * nx * ny + x * ny + yy] = v;
                if v > max {
                    max = v;
                }
            }
        }
    }
    if max > 0.0 {
        for v in folded.iter_mut() {
            *v /= max;
        }
    }
    GridFeature {
        values: DiffTensor::constant(
            Tensor::new(vec![nz, nx, ny], folded).expect("shape consistent"),
        ),
        scale: 1,
    }
}

/// Keeps, per spatial location, only the channel holding the maximum (ties
/// keep the lowest index); every other channel is zeroed.
pub fn depth_mask(f: &GridFeature) -> GridFeature {
    let shape = f.values.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    let xd = f.values.data();
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        let mut best = xd[p];
        let mut bi = 0;
        for ch in 1..c {
            let v = xd[ch * hw + p];
            if v > best {
                best = v;
                bi = ch;
            }
        }
        out[bi * hw + p] = best;
    }
    GridFeature {
        values: DiffTensor::constant(Tensor::new(shape, out).expect("shape consistent")),
        scale: f.scale,
    }
}

/// One branch forward pass. Returns reconstruction voxels in channel layout
/// `n_z x H_s x W_s` for scales 1, 2, 3 (index 0 is full resolution).
pub fn branch_forward(
    tape: &mut Tape,
    cfg: &NetConfig,
    vars: &BranchVars,
    f: &DiffTensor,
) -> Result<[DiffTensor; 3]> {
    if f.shape() != [cfg.n_z, cfg.height, cfg.width] {
        return Err(shape_err(
            "branch_forward",
            format!(
                "input {:?} does not match configured {:?}",
                f.shape(),
                [cfg.n_z, cfg.height, cfg.width]
            ),
        ));
    }
    let f0 = tape.pointwise_conv(f, &vars.stem, 1)?;
    let e1 = graph_block_forward(tape, &f0, &vars.enc[0], &cfg.block_config(1))?;
    let f1 = tape.pointwise_conv(&e1, &vars.down[0], 2)?;
    let e2 = graph_block_forward(tape, &f1, &vars.enc[1], &cfg.block_config(2))?;
    let f2 = tape.pointwise_conv(&e2, &vars.down[1], 2)?;
    let e3 = graph_block_forward(tape, &f2, &vars.enc[2], &cfg.block_config(3))?;

    let h3 = tape.pointwise_conv(&e3, &vars.heads[2], 1)?;
    let out3 = tape.softplus(&h3)?;

    let u2 = tape.upsample_nearest2(&e3)?;
    let u2 = tape.pointwise_conv(&u2, &vars.up[0], 1)?;
    let s2 = tape.add(&u2, &e2)?;
    let d2 = graph_block_forward(tape, &s2, &vars.dec[0], &cfg.block_config(2))?;
    let h2 = tape.pointwise_conv(&d2, &vars.heads[1], 1)?;
    let out2 = tape.softplus(&h2)?;

    let u1 = tape.upsample_nearest2(&d2)?;
    let u1 = tape.pointwise_conv(&u1, &vars.up[1], 1)?;
    let s1 = tape.add(&u1, &e1)?;
    let d1 = graph_block_forward(tape, &s1, &vars.dec[1], &cfg.block_config(1))?;
    let h1 = tape.pointwise_conv(&d1, &vars.heads[0], 1)?;
    let out1 = tape.softplus(&h1)?;

    Ok([out1, out2, out3])
}

/// Per-pixel maximum over the z (channel) axis.
pub fn albedo_project(tape: &mut Tape, voxel: &DiffTensor) -> Result<DiffTensor> {
    let (v, _) = tape.reduce_max_arg(voxel, 0)?;
    Ok(v)
}

/// Per-pixel argmax index over z times the depth bin size; ties keep the
/// lowest index. Piecewise constant, used for evaluation and rendering.
pub fn depth_project(voxel: &Tensor, z_res: f64) -> Result<Tensor> {
    let (c, h, w) = match voxel.shape() {
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(shape_err(
                "depth_project",
                format!("expected rank 3, got {:?}", other),
            ))
        }
    };
    let hw = h * w;
    let vd = voxel.data();
    let mut out = vec![0.0; hw];
    for p in 0..hw {
        let mut best = vd[p];
        let mut bi = 0usize;
        for ch in 1..c {
            let v = vd[ch * hw + p];
            if v > best {
                best = v;
                bi = ch;
            }
        }
        out[p] = bi as f64 * z_res;
    }
    Tensor::new(vec![h, w], out)
}

/// Differentiable depth rendering for training: softmax over z with the
/// given sharpness, then the expected bin index times the bin size. As the
/// volume peaks, this approaches [`depth_project`].
pub fn soft_depth_project(
    tape: &mut Tape,
    voxel: &DiffTensor,
    z_res: f64,
    sharpness: f64,
) -> Result<DiffTensor> {
    let (c, h, w) = match voxel.shape() {
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(shape_err(
                "soft_depth_project",
                format!("expected rank 3, got {:?}", other),
            ))
        }
    };
    let scaled = tape.scale(voxel, sharpness)?;
    let weights = tape.channel_softmax(&scaled)?;
    let coeff = DiffTensor::constant(Tensor::from_fn(&[1, c], |i| i as f64 * z_res));
    let expected = tape.pointwise_conv(&weights, &coeff, 1)?;
    tape.reshape(&expected, &[h, w])
}

/// Reconstruction voxel in volume order `n_x x n_y x n_z`.
#[derive(Debug, Clone)]
pub struct ReconVoxel {
    pub values: Tensor,
}

impl ReconVoxel {
    /// From channel layout `n_z x H x W` (as produced by the output heads).
    pub fn from_channels(t: &Tensor) -> Result<Self> {
        let (c, h, w) = match t.shape() {
            [c, h, w] => (*c, *h, *w),
            other => {
                return Err(shape_err(
                    "recon_voxel",
                    format!("expected rank 3, got {:?}", other),
                ))
            }
        };
        let td = t.data();
        let mut out = vec![0.0; c * h * w];
        for z in 0..c {
            for x in 0..h {
                for y in 0..w {
                    out[(x * w + y) * c + z] = td[z * h * w + x * w + y];
                }
            }
        }
        Ok(ReconVoxel {
            values: Tensor::new(vec![h, w, c], out)?,
        })
    }

    pub fn to_channels(&self) -> Tensor {
        let (h, w, c) = (
            self.values.shape()[0],
            self.values.shape()[1],
            self.values.shape()[2],
        );
        let vd = self.values.data();
        let mut out = vec![0.0; c * h * w];
        for x in 0..h {
            for y in 0..w {
                for z in 0..c {
                    out[z * h * w + x * w + y] = vd[(x * w + y) * c + z];
                }
            }
        }
        Tensor::new(vec![c, h, w], out).expect("shape consistent")
    }
}

/// Combines the two branch outputs: per pixel, the output voxel is zero
/// except at the depth branch's argmax bin, which receives the albedo
/// branch's projected value. By construction the combined voxel projects
/// back to the albedo image and the depth map it was built from.
pub fn render_combine(albedo_v: &ReconVoxel, depth_v: &ReconVoxel) -> Result<ReconVoxel> {
    if albedo_v.values.shape() != depth_v.values.shape() {
        return Err(shape_err(
            "render_combine",
            format!(
                "{:?} vs {:?}",
                albedo_v.values.shape(),
                depth_v.values.shape()
            ),
        ));
    }
    let (h, w, c) = (
        albedo_v.values.shape()[0],
        albedo_v.values.shape()[1],
        albedo_v.values.shape()[2],
    );
    let ad = albedo_v.values.data();
    let dd = depth_v.values.data();
    let mut out = vec![0.0; h * w * c];
    for p in 0..h * w {
        let acol = &ad[p * c..(p + 1) * c];
        let dcol = &dd[p * c..(p + 1) * c];
        let mut zi = 0;
        let mut dbest = dcol[0];
        let mut abest = acol[0];
        for z in 1..c {
            if dcol[z] > dbest {
                dbest = dcol[z];
                zi = z;
            }
            if acol[z] > abest {
                abest = acol[z];
            }
        }
        out[p * c + zi] = abest;
    }
    Ok(ReconVoxel {
        values: Tensor::new(vec![h, w, c], out)?,
    })
}

/// Which parameter set a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    Albedo,
    Depth,
}

/// The dual-branch model: two structurally identical branches over one
/// shared configuration.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: NetConfig,
    pub albedo: BranchParams,
    pub depth: BranchParams,
}

impl Model {
    pub fn init(cfg: NetConfig, seed: u64) -> Result<Self> {
        let mut rng_a = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0));
        let mut rng_d = ChaCha8Rng::seed_from_u64(mix_seed(seed, 1));
        Ok(Model {
            albedo: BranchParams::init(&cfg, &mut rng_a)?,
            depth: BranchParams::init(&cfg, &mut rng_d)?,
            cfg,
        })
    }

    pub fn branch(&self, kind: BranchKind) -> &BranchParams {
        match kind {
            BranchKind::Albedo => &self.albedo,
            BranchKind::Depth => &self.depth,
        }
    }

    pub fn branch_mut(&mut self, kind: BranchKind) -> &mut BranchParams {
        match kind {
            BranchKind::Albedo => &mut self.albedo,
            BranchKind::Depth => &mut self.depth,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.albedo.named("albedo");
        out.extend(self.depth.named("depth"));
        out
    }

    /// Inference pass of one branch with constant parameters.
    pub fn infer(&self, kind: BranchKind, f: &DiffTensor) -> Result<[Tensor; 3]> {
        let mut tape = Tape::new();
        let vars = self.branch(kind).register(&mut tape, false);
        let outs = branch_forward(&mut tape, &self.cfg, &vars, f)?;
        Ok([
            outs[0].to_tensor(),
            outs[1].to_tensor(),
            outs[2].to_tensor(),
        ])
    }
}

use rand::SeedableRng;
