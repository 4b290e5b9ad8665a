//! Confocal transient light transport: the measurement operator, its exact
//! adjoint, Poisson noise synthesis, and scene rasterization.
//!
//! A scan point at `(xi, kappa, 0)` on the wall illuminates and observes the
//! hidden volume; a voxel with albedo `phi` at distance `r` contributes
//! `phi * dV / r^4` to the time bin `round(2 r / (c dt))`. The delta in the
//! continuous model is discretized by nearest-bin rounding so that the
//! forward and adjoint operators are exact transposes of each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{param_err, shape_err, Error, Result};
use crate::seed::mix_seed;
use crate::tensor::Tensor;

/// Wall scan grid, time binning and reconstruction volume.
///
/// The wall is the plane `z = 0`, a square of side `wall_extent` centered at
/// the origin. Scan points and voxel centers sit at cell centers of uniform
/// grids. Depth resolution is `z_res = c * bin_width / 2` (confocal round
/// trip) and the volume spans `z in [0, n_z * z_res]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGeometry {
    pub n_x: usize,
    pub n_y: usize,
    pub n_t: usize,
    pub n_z: usize,
    pub wall_extent: f64,
    pub bin_width: f64,
    pub c: f64,
}

impl SamplingGeometry {
    pub fn new(
        n_x: usize,
        n_y: usize,
        n_t: usize,
        n_z: usize,
        wall_extent: f64,
        bin_width: f64,
        c: f64,
    ) -> Result<Self> {
        if n_x < 1 || n_y < 1 || n_t < 1 || n_z < 1 {
            return Err(param_err("geometry", "all counts must be >= 1"));
        }
        if wall_extent <= 0.0 || bin_width <= 0.0 || c <= 0.0 {
            return Err(param_err(
                "geometry",
                "wall_extent, bin_width and c must be positive",
            ));
        }
        Ok(SamplingGeometry {
            n_x,
            n_y,
            n_t,
            n_z,
            wall_extent,
            bin_width,
            c,
        })
    }

    /// Desk-scale default: 16x16 scan, 64 bins, 16x16x32 volume, 1 m wall,
    /// 0.2 ns bins (3 cm depth resolution).
    pub fn desk_default() -> Self {
        SamplingGeometry::new(16, 16, 64, 32, 1.0, 2.0e-10, 3.0e8).expect("valid defaults")
    }

    /// Depth bin size `c * bin_width / 2`.
    pub fn z_res(&self) -> f64 {
        self.c * self.bin_width / 2.0
    }

    /// Extent of the reconstruction volume along z: `n_z * z_res`.
    pub fn z_extent(&self) -> f64 {
        self.n_z as f64 * self.z_res()
    }

    pub fn scan_x(&self, ix: usize) -> f64 {
        ((ix as f64 + 0.5) / self.n_x as f64 - 0.5) * self.wall_extent
    }

    pub fn scan_y(&self, iy: usize) -> f64 {
        ((iy as f64 + 0.5) / self.n_y as f64 - 0.5) * self.wall_extent
    }

    /// Center of voxel `(ix, iy, iz)`; x/y span the wall extent, z starts at
    /// the wall.
    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        [
            ((ix as f64 + 0.5) / self.n_x as f64 - 0.5) * self.wall_extent,
            ((iy as f64 + 0.5) / self.n_y as f64 - 0.5) * self.wall_extent,
            (iz as f64 + 0.5) * self.z_res(),
        ]
    }

    pub fn voxel_volume(&self) -> f64 {
        (self.wall_extent / self.n_x as f64) * (self.wall_extent / self.n_y as f64) * self.z_res()
    }

    pub fn volume_shape(&self) -> [usize; 3] {
        [self.n_x, self.n_y, self.n_z]
    }

    pub fn histogram_shape(&self) -> [usize; 3] {
        [self.n_x, self.n_y, self.n_t]
    }

    /// Time bin hit by a voxel at distance `r`, or `None` beyond `n_t`.
    pub fn bin_of(&self, r: f64) -> Option<usize> {
        let b = (2.0 * r / (self.c * self.bin_width)).round();
        if b >= 0.0 && (b as usize) < self.n_t {
            Some(b as usize)
        } else {
            None
        }
    }
}

/// Per-voxel reflectance of the hidden scene, `n_x x n_y x n_z`.
#[derive(Debug, Clone)]
pub struct AlbedoVolume {
    pub values: Tensor,
    pub geometry: SamplingGeometry,
}

impl AlbedoVolume {
    pub fn new(values: Tensor, geometry: SamplingGeometry) -> Result<Self> {
        if values.shape() != geometry.volume_shape() {
            return Err(shape_err(
                "albedo_volume",
                format!(
                    "values {:?} do not match geometry {:?}",
                    values.shape(),
                    geometry.volume_shape()
                ),
            ));
        }
        if !values.is_finite() || values.data().iter().any(|&v| v < 0.0) {
            return Err(param_err(
                "albedo_volume",
                "values must be finite and non-negative",
            ));
        }
        Ok(AlbedoVolume { values, geometry })
    }

    pub fn zeros(geometry: SamplingGeometry) -> Self {
        AlbedoVolume {
            values: Tensor::zeros(&geometry.volume_shape()),
            geometry,
        }
    }
}

/// Time-resolved photon histogram per scan point, `n_x x n_y x n_t`.
#[derive(Debug, Clone)]
pub struct TransientMeasurement {
    pub histogram: Tensor,
    pub geometry: SamplingGeometry,
}

impl TransientMeasurement {
    pub fn new(histogram: Tensor, geometry: SamplingGeometry) -> Result<Self> {
        if histogram.shape() != geometry.histogram_shape() {
            return Err(shape_err(
                "transient_measurement",
                format!(
                    "histogram {:?} does not match geometry {:?}",
                    histogram.shape(),
                    geometry.histogram_shape()
                ),
            ));
        }
        if !histogram.is_finite() || histogram.data().iter().any(|&v| v < 0.0) {
            return Err(param_err(
                "transient_measurement",
                "histogram must be finite and non-negative",
            ));
        }
        Ok(TransientMeasurement {
            histogram,
            geometry,
        })
    }
}

/// Detector dark counts and background, with its noise seed.
#[derive(Debug, Clone, Copy)]
pub struct NoiseModel {
    pub dark_count_rate: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(dark_count_rate: f64, seed: u64) -> Result<Self> {
        if !dark_count_rate.is_finite() || dark_count_rate < 0.0 {
            return Err(param_err("noise_model", "dark_count_rate must be >= 0"));
        }
        Ok(NoiseModel {
            dark_count_rate,
            seed,
        })
    }
}

/// 5x7 glyph bitmaps for the letter primitive; row 0 is the top, bit 4 the
/// leftmost column.
const GLYPHS: &[(char, [u8; 7])] = &[
    ('H', [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001]),
    ('L', [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111]),
    ('N', [0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001, 0b10001]),
    ('O', [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110]),
    ('S', [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110]),
    ('T', [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100]),
    ('U', [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110]),
    ('X', [0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b01010, 0b10001]),
];

pub fn glyph_bitmap(glyph: char) -> Option<&'static [u8; 7]> {
    GLYPHS
        .iter()
        .find(|(c, _)| *c == glyph.to_ascii_uppercase())
        .map(|(_, rows)| rows)
}

/// Scene primitive in volume coordinates (meters).
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// Axis-aligned box: center and half-extents.
    Rect {
        center: [f64; 3],
        half_extent: [f64; 3],
        albedo: f64,
    },
    /// Ellipsoid blob: center and radii.
    Blob {
        center: [f64; 3],
        radii: [f64; 3],
        albedo: f64,
    },
    /// Voxelized 5x7 glyph extruded along z inside an axis-aligned box;
    /// glyph rows run along x (top of the letter at the smaller x).
    Letter {
        glyph: char,
        center: [f64; 3],
        half_extent: [f64; 3],
        albedo: f64,
    },
}

impl Primitive {
    pub fn albedo(&self) -> f64 {
        match self {
            Primitive::Rect { albedo, .. }
            | Primitive::Blob { albedo, .. }
            | Primitive::Letter { albedo, .. } => *albedo,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Primitive::Rect {
                center,
                half_extent,
                ..
            } => (0..3).all(|a| (p[a] - center[a]).abs() <= half_extent[a]),
            Primitive::Blob { center, radii, .. } => {
                let mut s = 0.0;
                for a in 0..3 {
                    let d = (p[a] - center[a]) / radii[a];
                    s += d * d;
                }
                s <= 1.0
            }
            Primitive::Letter {
                glyph,
                center,
                half_extent,
                ..
            } => {
                if !(0..3).all(|a| (p[a] - center[a]).abs() <= half_extent[a]) {
                    return false;
                }
                let Some(rows) = glyph_bitmap(*glyph) else {
                    return false;
                };
                let cell = |v: f64, lo: f64, span: f64, n: usize| -> usize {
                    (((v - lo) / span * n as f64) as usize).min(n - 1)
                };
                let row = cell(p[0], center[0] - half_extent[0], 2.0 * half_extent[0], 7);
                let col = cell(p[1], center[1] - half_extent[1], 2.0 * half_extent[1], 5);
                rows[row] & (1 << (4 - col)) != 0
            }
        }
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let (center, ext) = match self {
            Primitive::Rect {
                center,
                half_extent,
                ..
            }
            | Primitive::Letter {
                center,
                half_extent,
                ..
            } => (center, half_extent),
            Primitive::Blob { center, radii, .. } => (center, radii),
        };
        (
            [center[0] - ext[0], center[1] - ext[1], center[2] - ext[2]],
            [center[0] + ext[0], center[1] + ext[1], center[2] + ext[2]],
        )
    }
}

/// List of primitives; later primitives overwrite earlier ones when voxels
/// overlap.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    /// Checks that every primitive lies inside the reconstruction volume and
    /// has an albedo in `[0, 1]`.
    pub fn validate(&self, g: &SamplingGeometry) -> Result<()> {
        let half = g.wall_extent / 2.0;
        for (i, prim) in self.primitives.iter().enumerate() {
            let a = prim.albedo();
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Scene(format!(
                    "primitive {}: albedo {} outside [0, 1]",
                    i, a
                )));
            }
            if let Primitive::Letter { glyph, .. } = prim {
                if glyph_bitmap(*glyph).is_none() {
                    return Err(Error::Scene(format!(
                        "primitive {}: no glyph for '{}'",
                        i, glyph
                    )));
                }
            }
            let (lo, hi) = prim.bounds();
            let inside = lo[0] >= -half
                && hi[0] <= half
                && lo[1] >= -half
                && hi[1] <= half
                && lo[2] >= 0.0
                && hi[2] <= g.z_extent();
            if !inside {
                return Err(Error::Scene(format!(
                    "primitive {} extends outside the reconstruction volume",
                    i
                )));
            }
        }
        Ok(())
    }
}

/// Fills each voxel whose center lies inside a primitive with that
/// primitive's albedo; later primitives overwrite earlier ones.
pub fn rasterize(scene: &SceneSpec, g: &SamplingGeometry) -> Result<AlbedoVolume> {
    scene.validate(g)?;
    let [nx, ny, nz] = g.volume_shape();
    let mut values = Tensor::zeros(&[nx, ny, nz]);
    let data = values.data_mut();
    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                let p = g.voxel_center(ix, iy, iz);
                for prim in &scene.primitives {
                    if prim.contains(p) {
                        data[(ix * ny + iy) * nz + iz] = prim.albedo();
                    }
                }
            }
        }
    }
    AlbedoVolume::new(values, g.clone())
}

/// Applies the discrete measurement operator: direct summation over all
/// (scan point, voxel) pairs. Voxels whose round-trip bin falls beyond
/// `n_t` are dropped; the default centered geometries never hit that case.
pub fn forward_measure(x: &AlbedoVolume) -> TransientMeasurement {
    let g = &x.geometry;
    let [nx, ny, nz] = g.volume_shape();
    let nt = g.n_t;
    let dv = g.voxel_volume();
    let xd = x.values.data();
    let mut hist = vec![0.0; nx * ny * nt];
    for sx in 0..nx {
        let px = g.scan_x(sx);
        for sy in 0..ny {
            let py = g.scan_y(sy);
            let hrow = &mut hist[(sx * ny + sy) * nt..(sx * ny + sy + 1) * nt];
            for vx in 0..nx {
                for vy in 0..ny {
                    for vz in 0..nz {
                        let phi = xd[(vx * ny + vy) * nz + vz];
                        if phi == 0.0 {
                            continue;
                        }
                        let vc = g.voxel_center(vx, vy, vz);
                        let dx = vc[0] - px;
                        let dy = vc[1] - py;
                        let r2 = dx * dx + dy * dy + vc[2] * vc[2];
                        if let Some(bin) = g.bin_of(r2.sqrt()) {
                            hrow[bin] += phi * dv / (r2 * r2);
                        }
                    }
                }
            }
        }
    }
    TransientMeasurement {
        histogram: Tensor::new(vec![nx, ny, nt], hist).expect("shape consistent"),
        geometry: g.clone(),
    }
}

/// Exact transpose of [`forward_measure`]: each histogram entry scatters to
/// every voxel whose rounded round-trip bin matches, weighted by `dV / r^4`.
/// The result is a raw volume-shaped grid (it may be negative for arbitrary
/// input histograms).
pub fn adjoint_backproject(y: &TransientMeasurement) -> Tensor {
    let g = &y.geometry;
    let [nx, ny, nz] = g.volume_shape();
    let nt = g.n_t;
    let dv = g.voxel_volume();
    let yd = y.histogram.data();
    let mut vol = vec![0.0; nx * ny * nz];
    for vx in 0..nx {
        for vy in 0..ny {
            for vz in 0..nz {
                let vc = g.voxel_center(vx, vy, vz);
                let mut acc = 0.0;
                for sx in 0..nx {
                    let dx = vc[0] - g.scan_x(sx);
                    for sy in 0..ny {
                        let dy = vc[1] - g.scan_y(sy);
                        let r2 = dx * dx + dy * dy + vc[2] * vc[2];
                        if let Some(bin) = g.bin_of(r2.sqrt()) {
                            acc += yd[(sx * ny + sy) * nt + bin] * dv / (r2 * r2);
                        }
                    }
                }
                vol[(vx * ny + vy) * nz + vz] = acc;
            }
        }
    }
    Tensor::new(vec![nx, ny, nz], vol).expect("shape consistent")
}

/// Replaces every bin with a Poisson draw of mean `bin + dark_count_rate`.
/// The generator for each bin is seeded from `(nm.seed, flat index)`, so the
/// output is bit-reproducible and independent of evaluation order.
pub fn add_noise(y: &TransientMeasurement, nm: &NoiseModel) -> TransientMeasurement {
    let mut out = y.histogram.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let mean = *v + nm.dark_count_rate;
        *v = if mean > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(nm.seed, i as u64));
            Poisson::new(mean).expect("positive mean").sample(&mut rng)
        } else {
            0.0
        };
    }
    TransientMeasurement {
        histogram: out,
        geometry: y.geometry.clone(),
    }
}
