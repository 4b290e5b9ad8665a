//! Graph block over feature patches: dynamic k-NN construction, negative-
//! vertex selection, four aggregation variants, a multi-order dilated update
//! with gating, and channel fusion. One composable block maps a grid feature
//! `C x H x W` back to `C x H x W`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{param_err, shape_err, Result};
use crate::tensor::{DiffTensor, Tape, Tensor};

/// Neighbor-message reduction used inside the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationVariant {
    ResEdgeConv,
    GraphSage,
    Gin,
    MaxRelative,
}

impl AggregationVariant {
    pub const ALL: [AggregationVariant; 4] = [
        AggregationVariant::ResEdgeConv,
        AggregationVariant::GraphSage,
        AggregationVariant::Gin,
        AggregationVariant::MaxRelative,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "resedgeconv" => Ok(AggregationVariant::ResEdgeConv),
            "graphsage" => Ok(AggregationVariant::GraphSage),
            "gin" => Ok(AggregationVariant::Gin),
            "maxrelative" | "max-relative" => Ok(AggregationVariant::MaxRelative),
            other => Err(param_err(
                "aggregation",
                format!("unknown variant '{}'", other),
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AggregationVariant::ResEdgeConv => "resedgeconv",
            AggregationVariant::GraphSage => "graphsage",
            AggregationVariant::Gin => "gin",
            AggregationVariant::MaxRelative => "maxrelative",
        }
    }

    /// Input width of the inner projection for feature dimension `d`.
    pub fn in_width(&self, d: usize) -> usize {
        match self {
            AggregationVariant::Gin => d,
            _ => 2 * d,
        }
    }
}

/// Vertex features extracted from a grid feature: `N` patch vectors of
/// dimension `D` plus the patch-grid layout that maps vertex index to
/// spatial position.
#[derive(Debug, Clone)]
pub struct PatchFeatures {
    pub x: DiffTensor,
    pub grid: (usize, usize),
    pub patch: usize,
}

impl PatchFeatures {
    pub fn vertex_count(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }
}

/// k-NN edge lists plus the selection state derived from the negative
/// vertex. `selected[i]` is always a subset of `neighbors[i]`.
#[derive(Debug, Clone)]
pub struct Graph {
    pub k: usize,
    pub neighbors: Vec<Vec<usize>>,
    pub selected: Vec<Vec<usize>>,
    pub x_neg: Vec<f64>,
}

/// Brute-force k-NN in feature space: for each row, the `k` other rows with
/// smallest Euclidean distance, ties broken by lower index.
pub fn knn_lists(values: &[f64], n: usize, d: usize, k: usize) -> Vec<Vec<usize>> {
    let mut lists = Vec::with_capacity(n);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        let xi = &values[i * d..(i + 1) * d];
        for j in 0..n {
            if j == i {
                continue;
            }
            let xj = &values[j * d..(j + 1) * d];
            let dist: f64 = xi
                .iter()
                .zip(xj)
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            cand.push((dist, j));
        }
        cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        lists.push(cand[..k].iter().map(|&(_, j)| j).collect());
    }
    lists
}

/// Partitions a grid feature into patches and connects each vertex to its
/// `k` nearest neighbors in feature space. The graph is recomputed from the
/// current feature values on every call (dynamic edges).
pub fn build_graph(
    tape: &mut Tape,
    f: &DiffTensor,
    patch: usize,
    k: usize,
) -> Result<(PatchFeatures, Graph)> {
    let x = tape.patchify(f, patch)?;
    let n = x.shape()[0];
    let d = x.shape()[1];
    if k == 0 || k >= n {
        return Err(param_err(
            "build_graph",
            format!("need 1 <= k < N, got k = {} with N = {}", k, n),
        ));
    }
    let neighbors = knn_lists(x.data(), n, d, k);
    let (h, w) = (f.shape()[1], f.shape()[2]);
    Ok((
        PatchFeatures {
            x,
            grid: (h / patch, w / patch),
            patch,
        },
        Graph {
            k,
            neighbors,
            selected: Vec::new(),
            x_neg: Vec::new(),
        },
    ))
}

/// Patch-grid positions whose mean defines the negative vertex: the four
/// corners plus their diagonal inward neighbors. Grids thinner than 3
/// degrade to the four corners alone.
fn negative_positions(gh: usize, gw: usize) -> Result<Vec<(usize, usize)>> {
    if gh < 2 || gw < 2 {
        return Err(param_err(
            "negative_vertex",
            format!("patch grid {}x{} is smaller than 2x2", gh, gw),
        ));
    }
    let mut pos = vec![(0, 0), (0, gw - 1), (gh - 1, 0), (gh - 1, gw - 1)];
    if gh >= 3 && gw >= 3 {
        pos.extend_from_slice(&[
            (1, 1),
            (1, gw - 2),
            (gh - 2, 1),
            (gh - 2, gw - 2),
        ]);
    }
    Ok(pos)
}

/// Average of the designated corner-region patch vectors. Lives outside the
/// gradient path: it only steers neighbor selection.
pub fn negative_vertex(p: &PatchFeatures) -> Result<Vec<f64>> {
    let (gh, gw) = p.grid;
    let d = p.dim();
    let pos = negative_positions(gh, gw)?;
    let mut acc = vec![0.0; d];
    for &(r, c) in &pos {
        let v = r * gw + c;
        for (a, &x) in acc.iter_mut().zip(&p.x.data()[v * d..(v + 1) * d]) {
            *a += x;
        }
    }
    for a in acc.iter_mut() {
        *a /= pos.len() as f64;
    }
    Ok(acc)
}

/// Keeps, for every vertex, the `k_s` neighbors farthest from the negative
/// vertex (ties broken by lower index). Every dropped neighbor is at least
/// as close to the negative vertex as every kept one.
pub fn select_neighbors(
    p: &PatchFeatures,
    g: &mut Graph,
    x_neg: &[f64],
    k_s: usize,
) -> Result<()> {
    if k_s == 0 || k_s > g.k {
        return Err(param_err(
            "select_neighbors",
            format!("need 1 <= k_s <= k, got k_s = {} with k = {}", k_s, g.k),
        ));
    }
    let d = p.dim();
    if x_neg.len() != d {
        return Err(shape_err(
            "select_neighbors",
            format!("x_neg has {} entries, features have {}", x_neg.len(), d),
        ));
    }
    let xd = p.x.data();
    let dist_to_neg = |j: usize| -> f64 {
        xd[j * d..(j + 1) * d]
            .iter()
            .zip(x_neg)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum()
    };
    g.selected = g
        .neighbors
        .iter()
        .map(|nbrs| {
            let mut ranked: Vec<(f64, usize)> =
                nbrs.iter().map(|&j| (dist_to_neg(j), j)).collect();
            ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            ranked[..k_s].iter().map(|&(_, j)| j).collect()
        })
        .collect();
    g.x_neg = x_neg.to_vec();
    Ok(())
}

fn flat_edges(g: &Graph, n: usize) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    if g.selected.len() != n {
        return Err(param_err(
            "aggregate",
            "neighbors must be selected before aggregation",
        ));
    }
    let k_s = g.selected[0].len();
    if k_s == 0 || g.selected.iter().any(|s| s.len() != k_s) {
        return Err(param_err("aggregate", "selected lists must share one size"));
    }
    let mut nbr = Vec::with_capacity(n * k_s);
    let mut slf = Vec::with_capacity(n * k_s);
    for (i, sel) in g.selected.iter().enumerate() {
        for &j in sel {
            nbr.push(j);
            slf.push(i);
        }
    }
    Ok((nbr, slf, k_s))
}

/// Neighborhood aggregation: the variant's reduction of neighbor messages,
/// projected through `w_in`/`w_out`, with a residual `+ X`. Shape-preserving
/// `N x D -> N x D` for every variant.
pub fn aggregate(
    tape: &mut Tape,
    p: &PatchFeatures,
    g: &Graph,
    variant: AggregationVariant,
    w_in: &DiffTensor,
    w_out: &DiffTensor,
) -> Result<DiffTensor> {
    let n = p.vertex_count();
    let d = p.dim();
    let in_w = variant.in_width(d);
    if w_in.shape() != [in_w, d] {
        return Err(shape_err(
            "aggregate",
            format!(
                "w_in {:?} does not match variant {} width [{}, {}]",
                w_in.shape(),
                variant.name(),
                in_w,
                d
            ),
        ));
    }
    if w_out.shape() != [d, d] {
        return Err(shape_err(
            "aggregate",
            format!("w_out {:?} must be [{}, {}]", w_out.shape(), d, d),
        ));
    }
    let (nbr, slf, k_s) = flat_edges(g, n)?;
    let x = &p.x;
    let hidden = match variant {
        AggregationVariant::ResEdgeConv => {
            // max_j of [x_i, x_j - x_i] w_in over the selected neighbors
            let xj = tape.gather_rows(x, &nbr)?;
            let xi = tape.gather_rows(x, &slf)?;
            let diff = tape.sub(&xj, &xi)?;
            let edge = tape.row_concat(&xi, &diff)?;
            let msg = tape.matmul(&edge, w_in)?;
            tape.segment_max(&msg, k_s)?
        }
        AggregationVariant::GraphSage => {
            let xj = tape.gather_rows(x, &nbr)?;
            let mean = tape.segment_mean(&xj, k_s)?;
            let cat = tape.row_concat(x, &mean)?;
            tape.matmul(&cat, w_in)?
        }
        AggregationVariant::Gin => {
            // (1 + eps) x_i + sum_j x_j with eps fixed to 0
            let xj = tape.gather_rows(x, &nbr)?;
            let sum = tape.segment_sum(&xj, k_s)?;
            let z = tape.add(x, &sum)?;
            tape.matmul(&z, w_in)?
        }
        AggregationVariant::MaxRelative => {
            let xj = tape.gather_rows(x, &nbr)?;
            let xi = tape.gather_rows(x, &slf)?;
            let diff = tape.sub(&xj, &xi)?;
            let maxrel = tape.segment_max(&diff, k_s)?;
            let cat = tape.row_concat(x, &maxrel)?;
            tape.matmul(&cat, w_in)?
        }
    };
    let projected = tape.matmul(&hidden, w_out)?;
    tape.add(&projected, x)
}

/// Low/mid/high channel split close to 1 : 1 : 2, all parts positive.
pub fn split_ratio(d: usize) -> Result<(usize, usize, usize)> {
    let dl = ((d as f64 / 4.0).round() as usize).max(1);
    let dm = dl;
    if dl + dm >= d {
        return Err(param_err(
            "split_ratio",
            format!("feature dimension {} too small for a 1:1:2 split", d),
        ));
    }
    Ok((dl, dm, d - dl - dm))
}

/// Multi-order update on the patch grid: a 5x5 depthwise pass over all
/// channels, then identity / dilated 5x5 / dilated 7x7 on the low, mid and
/// high channel groups, re-concatenated.
pub fn multi_order_update(
    tape: &mut Tape,
    x_grid: &DiffTensor,
    k5_d1: &DiffTensor,
    k5_d2: &DiffTensor,
    k7_d3: &DiffTensor,
    split: (usize, usize, usize),
) -> Result<DiffTensor> {
    let d = x_grid.shape()[0];
    let (dl, dm, dh) = split;
    if dl + dm + dh != d {
        return Err(shape_err(
            "multi_order_update",
            format!("split {:?} does not sum to {}", split, d),
        ));
    }
    let low = tape.depthwise_conv2d(x_grid, k5_d1, 1)?;
    let parts = tape.channel_split(&low, &[dl, dm, dh])?;
    let mid = tape.depthwise_conv2d(&parts[1], k5_d2, 2)?;
    let high = tape.depthwise_conv2d(&parts[2], k7_d3, 3)?;
    tape.channel_concat(&[&parts[0], &mid, &high])
}

/// Gating: two SiLU-activated 1x1 projections multiplied elementwise. The
/// first input is the aggregation output laid out on the patch grid, the
/// second the multi-order update output.
pub fn gate_fuse(
    tape: &mut Tape,
    x_agg_grid: &DiffTensor,
    x_d: &DiffTensor,
    proj_agg: &DiffTensor,
    proj_update: &DiffTensor,
) -> Result<DiffTensor> {
    let a = tape.pointwise_conv(x_agg_grid, proj_agg, 1)?;
    let a = tape.silu(&a)?;
    let b = tape.pointwise_conv(x_d, proj_update, 1)?;
    let b = tape.silu(&b)?;
    tape.mul(&a, &b)
}

/// Channel fusion: norm, 1x1 expansion, 3x3 depthwise, GELU, 1x1 projection,
/// GELU, and the residual back onto the input.
pub fn channel_fusion(
    tape: &mut Tape,
    y: &DiffTensor,
    norm_gain: &DiffTensor,
    norm_bias: &DiffTensor,
    expand: &DiffTensor,
    dw3: &DiffTensor,
    project: &DiffTensor,
) -> Result<DiffTensor> {
    let normed = tape.layer_norm(y, norm_gain, norm_bias, 1e-5)?;
    let expanded = tape.pointwise_conv(&normed, expand, 1)?;
    let mixed = tape.depthwise_conv2d(&expanded, dw3, 1)?;
    let z_hidden = tape.gelu(&mixed)?;
    let projected = tape.pointwise_conv(&z_hidden, project, 1)?;
    let z = tape.gelu(&projected)?;
    tape.add(&z, y)
}

/// Hidden width multiplier of the channel fusion MLP.
pub const FUSION_EXPAND_RATIO: usize = 2;

/// Learnable state of one graph block for feature dimension `D`.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub w_in: Tensor,
    pub w_out: Tensor,
    pub dw5_d1: Tensor,
    pub dw5_d2: Tensor,
    pub dw7_d3: Tensor,
    pub gate_agg: Tensor,
    pub gate_update: Tensor,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    pub expand: Tensor,
    pub dw3: Tensor,
    pub project: Tensor,
    pub split: (usize, usize, usize),
}

pub(crate) fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Depthwise kernel initialized to a centered delta plus uniform noise, so
/// the update path starts near the identity.
pub(crate) fn delta_init(rng: &mut ChaCha8Rng, channels: usize, ksz: usize) -> Tensor {
    let mut t = uniform_init(rng, &[channels, ksz, ksz], ksz * ksz);
    let center = (ksz / 2) * ksz + ksz / 2;
    for c in 0..channels {
        t.data_mut()[c * ksz * ksz + center] += 1.0;
    }
    t
}

impl BlockParams {
    pub fn init(d: usize, variant: AggregationVariant, rng: &mut ChaCha8Rng) -> Result<Self> {
        let split = split_ratio(d)?;
        let (dl, dm, dh) = split;
        debug_assert_eq!(dl + dm + dh, d);
        let in_w = variant.in_width(d);
        let hidden = FUSION_EXPAND_RATIO * d;
        Ok(BlockParams {
            w_in: uniform_init(rng, &[in_w, d], in_w),
            w_out: uniform_init(rng, &[d, d], d),
            dw5_d1: delta_init(rng, d, 5),
            dw5_d2: delta_init(rng, dm, 5),
            dw7_d3: delta_init(rng, dh, 7),
            gate_agg: uniform_init(rng, &[d, d], d),
            gate_update: uniform_init(rng, &[d, d], d),
            norm_gain: Tensor::filled(&[d], 1.0),
            norm_bias: Tensor::zeros(&[d]),
            expand: uniform_init(rng, &[hidden, d], d),
            dw3: uniform_init(rng, &[hidden, 3, 3], 9),
            project: uniform_init(rng, &[d, hidden], hidden),
            split,
        })
    }

    /// Identity block: zero projections, delta update kernels. Useful as a
    /// reference point; the full block then maps any input to itself.
    pub fn identity(d: usize, variant: AggregationVariant) -> Result<Self> {
        let split = split_ratio(d)?;
        let (_, dm, dh) = split;
        let in_w = variant.in_width(d);
        let hidden = FUSION_EXPAND_RATIO * d;
        let delta = |channels: usize, ksz: usize| {
            let mut t = Tensor::zeros(&[channels, ksz, ksz]);
            let center = (ksz / 2) * ksz + ksz / 2;
            for c in 0..channels {
                t.data_mut()[c * ksz * ksz + center] = 1.0;
            }
            t
        };
        Ok(BlockParams {
            w_in: Tensor::zeros(&[in_w, d]),
            w_out: Tensor::zeros(&[d, d]),
            dw5_d1: delta(d, 5),
            dw5_d2: delta(dm, 5),
            dw7_d3: delta(dh, 7),
            gate_agg: Tensor::zeros(&[d, d]),
            gate_update: Tensor::zeros(&[d, d]),
            norm_gain: Tensor::zeros(&[d]),
            norm_bias: Tensor::zeros(&[d]),
            expand: Tensor::zeros(&[hidden, d]),
            dw3: Tensor::zeros(&[hidden, 3, 3]),
            project: Tensor::zeros(&[d, hidden]),
            split,
        })
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{prefix}.w_in"), &self.w_in),
            (format!("{prefix}.w_out"), &self.w_out),
            (format!("{prefix}.dw5_d1"), &self.dw5_d1),
            (format!("{prefix}.dw5_d2"), &self.dw5_d2),
            (format!("{prefix}.dw7_d3"), &self.dw7_d3),
            (format!("{prefix}.gate_agg"), &self.gate_agg),
            (format!("{prefix}.gate_update"), &self.gate_update),
            (format!("{prefix}.norm_gain"), &self.norm_gain),
            (format!("{prefix}.norm_bias"), &self.norm_bias),
            (format!("{prefix}.expand"), &self.expand),
            (format!("{prefix}.dw3"), &self.dw3),
            (format!("{prefix}.project"), &self.project),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_in,
            &mut self.w_out,
            &mut self.dw5_d1,
            &mut self.dw5_d2,
            &mut self.dw7_d3,
            &mut self.gate_agg,
            &mut self.gate_update,
            &mut self.norm_gain,
            &mut self.norm_bias,
            &mut self.expand,
            &mut self.dw3,
            &mut self.project,
        ]
    }

    /// Puts every tensor on the tape: as leaves when `trainable`, otherwise
    /// as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> BlockVars {
        let lift = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.leaf(t)
            } else {
                DiffTensor::constant(t.clone())
            }
        };
        BlockVars {
            w_in: lift(tape, &self.w_in),
            w_out: lift(tape, &self.w_out),
            dw5_d1: lift(tape, &self.dw5_d1),
            dw5_d2: lift(tape, &self.dw5_d2),
            dw7_d3: lift(tape, &self.dw7_d3),
            gate_agg: lift(tape, &self.gate_agg),
            gate_update: lift(tape, &self.gate_update),
            norm_gain: lift(tape, &self.norm_gain),
            norm_bias: lift(tape, &self.norm_bias),
            expand: lift(tape, &self.expand),
            dw3: lift(tape, &self.dw3),
            project: lift(tape, &self.project),
            split: self.split,
        }
    }
}

/// Tape-registered view of [`BlockParams`].
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub w_in: DiffTensor,
    pub w_out: DiffTensor,
    pub dw5_d1: DiffTensor,
    pub dw5_d2: DiffTensor,
    pub dw7_d3: DiffTensor,
    pub gate_agg: DiffTensor,
    pub gate_update: DiffTensor,
    pub norm_gain: DiffTensor,
    pub norm_bias: DiffTensor,
    pub expand: DiffTensor,
    pub dw3: DiffTensor,
    pub project: DiffTensor,
    pub split: (usize, usize, usize),
}

impl BlockVars {
    pub fn leaves(&self) -> Vec<&DiffTensor> {
        vec![
            &self.w_in,
            &self.w_out,
            &self.dw5_d1,
            &self.dw5_d2,
            &self.dw7_d3,
            &self.gate_agg,
            &self.gate_update,
            &self.norm_gain,
            &self.norm_bias,
            &self.expand,
            &self.dw3,
            &self.project,
        ]
    }
}

/// Graph/selection hyperparameters for one block.
#[derive(Debug, Clone, Copy)]
pub struct BlockConfig {
    pub patch: usize,
    pub k: usize,
    pub k_s: usize,
    pub variant: AggregationVariant,
}

/// Full block: construct, select, aggregate, update, gate, skip, fuse. Both
/// the gate stage and the channel fusion ride on residual connections, so a
/// zero-projection block with delta kernels is the identity.
pub fn graph_block_forward(
    tape: &mut Tape,
    f: &DiffTensor,
    vars: &BlockVars,
    cfg: &BlockConfig,
) -> Result<DiffTensor> {
    let (c, h, w) = match f.shape() {
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(shape_err(
                "graph_block",
                format!("expected rank-3 grid feature, got {:?}", other),
            ))
        }
    };
    let (p, mut g) = build_graph(tape, f, cfg.patch, cfg.k)?;
    let x_neg = negative_vertex(&p)?;
    select_neighbors(&p, &mut g, &x_neg, cfg.k_s)?;
    let aggregated = aggregate(tape, &p, &g, cfg.variant, &vars.w_in, &vars.w_out)?;
    let (gh, gw) = p.grid;
    let agg_grid = tape.rows_to_grid(&aggregated, gh, gw)?;
    let updated = multi_order_update(
        tape,
        &agg_grid,
        &vars.dw5_d1,
        &vars.dw5_d2,
        &vars.dw7_d3,
        vars.split,
    )?;
    let gated = gate_fuse(tape, &agg_grid, &updated, &vars.gate_agg, &vars.gate_update)?;
    let input_grid = tape.rows_to_grid(&p.x, gh, gw)?;
    let with_skip = tape.add(&input_grid, &gated)?;
    let fused = channel_fusion(
        tape,
        &with_skip,
        &vars.norm_gain,
        &vars.norm_bias,
        &vars.expand,
        &vars.dw3,
        &vars.project,
    )?;
    let rows = tape.grid_to_rows(&fused)?;
    tape.unpatchify(&rows, c, h, w, cfg.patch)
}
