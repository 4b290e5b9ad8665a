//! Verification harnesses: central finite-difference gradient checks and the
//! adjoint dot-product identity. Used by the unit/acceptance tests and by the
//! `gradcheck` / `adjointcheck` CLI subcommands.
//!
//! The finite-difference side only ever runs forward passes, so it stays
//! independent of the backward implementation it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{
    aggregate, channel_fusion, gate_fuse, knn_lists, multi_order_update, split_ratio,
    AggregationVariant, Graph, PatchFeatures,
};
use crate::physics::{forward_measure, AlbedoVolume, SamplingGeometry, TransientMeasurement};
use crate::tensor::{DiffTensor, Tape, Tensor};

/// Step used by every central difference in the crate.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compares tape gradients of a scalar-valued graph against central finite
/// differences, elementwise, with error `|analytic - fd| / max(1, |fd|)`.
///
/// `build` receives the inputs as recorded leaves and must return the scalar
/// root. Returns the maximum relative error over all input elements.
pub fn grad_check(
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[DiffTensor]) -> Result<DiffTensor>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let leaves: Vec<DiffTensor> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let root = build(&mut tape, &leaves)?;
    if root.numel() != 1 {
        return Err(Error::Verification(
            "grad_check root must be scalar".into(),
        ));
    }
    tape.backward(&root)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(inputs)
        .map(|(leaf, t)| {
            tape.grad(leaf)
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let leaves: Vec<DiffTensor> = perturbed.iter().map(|x| t.leaf(x)).collect();
        Ok(build(&mut t, &leaves)?.scalar_value())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_err = 0.0f64;
    for i in 0..work.len() {
        for e in 0..work[i].numel() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + FD_STEP;
            let fp = eval(&work)?;
            work[i].data_mut()[e] = orig - FD_STEP;
            let fm = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let fd = (fp - fm) / (2.0 * FD_STEP);
            let err = (analytic[i].data()[e] - fd).abs() / fd.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Relative adjoint discrepancy `|<Ax, y> - <x, A^T y>| / (|Ax| |y|)` over
/// `trials` random pairs; returns the maximum observed value.
pub fn adjoint_check(g: &SamplingGeometry, trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x = random_tensor(&mut rng, &g.volume_shape(), 0.0, 1.0);
        let y = random_tensor(&mut rng, &g.histogram_shape(), -1.0, 1.0);
        let ax = forward_measure(&AlbedoVolume::new(x.clone(), g.clone())?);
        let aty = crate::physics::adjoint_backproject(&TransientMeasurement {
            histogram: y.clone(),
            geometry: g.clone(),
        });
        let lhs: f64 = ax
            .histogram
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rhs: f64 = x.data().iter().zip(aty.data()).map(|(&a, &b)| a * b).sum();
        let ax_norm = ax
            .histogram
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let y_norm = y.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = ax_norm * y_norm;
        if denom == 0.0 {
            continue;
        }
        worst = worst.max((lhs - rhs).abs() / denom);
    }
    Ok(worst)
}

/// Per-operation gradient checks over seeded random instances. One entry per
/// differentiable tensor operation; composite checks for network blocks live
/// in [`suite_blocks`].
pub fn suite_ops(seed: u64, instances: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut push = |name: &str, tol: f64, errs: Vec<f64>| {
        let max = errs.iter().cloned().fold(0.0, f64::max);
        out.push(CheckResult {
            name: name.to_string(),
            max_rel_err: max,
            tolerance: tol,
        });
    };

    let runs = |f: &dyn Fn(&mut ChaCha8Rng) -> Result<f64>| -> Result<Vec<f64>> {
        (0..instances)
            .map(|i| f(&mut ChaCha8Rng::seed_from_u64(crate::seed::mix_seed(seed, i as u64))))
            .collect()
    };

    push(
        "matmul",
        1e-6,
        runs(&|rng| {
            let a = random_tensor(rng, &[3, 4], -1.0, 1.0);
            let b = random_tensor(rng, &[4, 2], -1.0, 1.0);
            grad_check(&[a, b], |t, l| {
                let y = t.matmul(&l[0], &l[1])?;
                t.sum(&y)
            })
        })?,
    );

    push(
        "depthwise_conv2d",
        1e-6,
        runs(&|rng| {
            let x = random_tensor(rng, &[2, 8, 8], -1.0, 1.0);
            let k = random_tensor(rng, &[2, 5, 5], -1.0, 1.0);
            grad_check(&[x, k], |t, l| {
                let y = t.depthwise_conv2d(&l[0], &l[1], 2)?;
                t.sum(&y)
            })
        })?,
    );

    push(
        "pointwise_conv",
        1e-6,
        runs(&|rng| {
            let x = random_tensor(rng, &[3, 6, 6], -1.0, 1.0);
            let w = random_tensor(rng, &[4, 3], -1.0, 1.0);
            grad_check(&[x, w], |t, l| {
                let y = t.pointwise_conv(&l[0], &l[1], 2)?;
                t.sum(&y)
            })
        })?,
    );

    // A plain sum is linear in each activation output, which would hide
    // curvature errors; weight the outputs by a fixed random image instead.
    let weighted_sum = |t: &mut Tape, y: &DiffTensor, w: &Tensor| -> Result<DiffTensor> {
        let wv = DiffTensor::constant(w.clone());
        let p = t.mul(y, &wv)?;
        t.sum(&p)
    };

    for (name, which) in [("silu", 0u8), ("gelu", 1u8), ("softplus", 2u8)] {
        push(
            name,
            1e-6,
            runs(&|rng| {
                let x = random_tensor(rng, &[32], -3.0, 3.0);
                let w = random_tensor(rng, &[32], -1.0, 1.0);
                grad_check(&[x], |t, l| {
                    let y = match which {
                        0 => t.silu(&l[0])?,
                        1 => t.gelu(&l[0])?,
                        _ => t.softplus(&l[0])?,
                    };
                    weighted_sum(t, &y, &w)
                })
            })?,
        );
    }

    push(
        "layer_norm",
        1e-5,
        runs(&|rng| {
            let x = random_tensor(rng, &[4, 3, 3], -1.0, 1.0);
            let g = random_tensor(rng, &[4], 0.5, 1.5);
            let b = random_tensor(rng, &[4], -0.5, 0.5);
            let w = random_tensor(rng, &[4, 3, 3], -1.0, 1.0);
            grad_check(&[x, g, b], |t, l| {
                let y = t.layer_norm(&l[0], &l[1], &l[2], 1e-5)?;
                weighted_sum(t, &y, &w)
            })
        })?,
    );

    push(
        "concat_split",
        1e-6,
        runs(&|rng| {
            let a = random_tensor(rng, &[2, 3, 3], -1.0, 1.0);
            let b = random_tensor(rng, &[3, 3, 3], -1.0, 1.0);
            let w = random_tensor(rng, &[2, 3, 3], -1.0, 1.0);
            grad_check(&[a, b], |t, l| {
                let c = t.channel_concat(&[&l[0], &l[1]])?;
                let parts = t.channel_split(&c, &[2, 3])?;
                weighted_sum(t, &parts[0], &w)
            })
        })?,
    );

    push(
        "elementwise",
        1e-6,
        runs(&|rng| {
            let a = random_tensor(rng, &[17], -1.0, 1.0);
            let b = random_tensor(rng, &[17], -1.0, 1.0);
            grad_check(&[a, b], |t, l| {
                let m = t.mul(&l[0], &l[1])?;
                let s = t.add(&m, &l[0])?;
                let d = t.sub(&s, &l[1])?;
                let sc = t.scale(&d, 0.7)?;
                t.sum(&sc)
            })
        })?,
    );

    push(
        "reduce_max_arg",
        1e-6,
        runs(&|rng| {
            // Margins well above the FD step keep the argmax stable.
            let x = Tensor::from_fn(&[4, 5], |i| {
                ((i * 37 + 11) % 97) as f64 * 0.05 + rng.random_range(0.0..1e-3)
            });
            let w = random_tensor(rng, &[5], -1.0, 1.0);
            grad_check(&[x], |t, l| {
                let (y, _) = t.reduce_max_arg(&l[0], 0)?;
                weighted_sum(t, &y, &w)
            })
        })?,
    );

    push(
        "gather_segment",
        1e-6,
        runs(&|rng| {
            let x = random_tensor(rng, &[6, 3], -1.0, 1.0);
            let idx = vec![0, 2, 4, 1, 3, 5, 2, 0];
            let w = random_tensor(rng, &[4, 3], -1.0, 1.0);
            grad_check(&[x], |t, l| {
                let g = t.gather_rows(&l[0], &idx)?;
                let m = t.segment_mean(&g, 2)?;
                weighted_sum(t, &m, &w)
            })
        })?,
    );

    push(
        "softmax_upsample",
        1e-6,
        runs(&|rng| {
            let x = random_tensor(rng, &[3, 2, 2], -1.0, 1.0);
            let w = random_tensor(rng, &[3, 4, 4], -1.0, 1.0);
            grad_check(&[x], |t, l| {
                let s = t.channel_softmax(&l[0])?;
                let u = t.upsample_nearest2(&s)?;
                weighted_sum(t, &u, &w)
            })
        })?,
    );

    // the L1 loss path; inputs kept away from the |x| kink
    push(
        "abs_l1",
        1e-6,
        runs(&|rng| {
            let x = Tensor::from_fn(&[24], |i| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                sign * rng.random_range(0.2..1.0)
            });
            grad_check(&[x], |t, l| {
                let a = t.abs(&l[0])?;
                let s = t.sum(&a)?;
                t.scale(&s, 1.0 / 24.0)
            })
        })?,
    );

    // differentiable depth rendering used by the stage-2 loss
    push(
        "soft_depth",
        1e-5,
        runs(&|rng| {
            let v = random_tensor(rng, &[6, 3, 3], 0.0, 1.0);
            let w = random_tensor(rng, &[3, 3], -1.0, 1.0);
            grad_check(&[v], |t, l| {
                let d = crate::network::soft_depth_project(t, &l[0], 0.03, 20.0)?;
                let weighted = t.mul(&d, &DiffTensor::constant(w.clone()))?;
                t.sum(&weighted)
            })
        })?,
    );

    Ok(out)
}

/// Fixed-graph instance used by the composite checks: patch features plus
/// selected neighbor lists, built once from the unperturbed values so that
/// only the differentiable path varies under finite differences.
fn fixed_graph(rng: &mut ChaCha8Rng, n: usize, d: usize, k: usize, k_s: usize) -> (Tensor, Graph) {
    let x = random_tensor(rng, &[n, d], -1.0, 1.0);
    let neighbors = knn_lists(x.data(), n, d, k);
    let selected = neighbors
        .iter()
        .map(|nbrs| nbrs[..k_s].to_vec())
        .collect();
    (
        x,
        Graph {
            k,
            neighbors,
            selected,
            x_neg: vec![0.0; d],
        },
    )
}

/// Gradient checks through the graph aggregation (per variant) and through
/// the full composed block: aggregate, multi-order update, gate, channel
/// fusion, output head.
pub fn suite_blocks(seed: u64, instances: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let (n, d) = (16usize, 16usize);
    let (gh, gw) = (4usize, 4usize);
    let (k, k_s) = (5usize, 3usize);

    for variant in AggregationVariant::ALL {
        let mut worst = 0.0f64;
        for i in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::mix_seed(seed, 1000 + i as u64));
            let (x, graph) = fixed_graph(&mut rng, n, d, k, k_s);
            let w_in = random_tensor(&mut rng, &[variant.in_width(d), d], -0.5, 0.5);
            let w_out = random_tensor(&mut rng, &[d, d], -0.5, 0.5);
            let weight = random_tensor(&mut rng, &[n, d], -1.0, 1.0);
            let err = grad_check(&[x, w_in, w_out], |t, l| {
                let p = PatchFeatures {
                    x: l[0].clone(),
                    grid: (gh, gw),
                    patch: 2,
                };
                let agg = aggregate(t, &p, &graph, variant, &l[1], &l[2])?;
                let weighted = t.mul(&agg, &DiffTensor::constant(weight.clone()))?;
                t.sum(&weighted)
            })?;
            worst = worst.max(err);
        }
        out.push(CheckResult {
            name: format!("aggregate_{}", variant.name()),
            max_rel_err: worst,
            tolerance: 1e-4,
        });
    }

    let mut worst = 0.0f64;
    let head_out = 4usize;
    let (dl, dm, dh) = split_ratio(d)?;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::mix_seed(seed, 2000 + i as u64));
        let (x, graph) = fixed_graph(&mut rng, n, d, k, k_s);
        let inputs = vec![
            x,
            random_tensor(&mut rng, &[2 * d, d], -0.4, 0.4), // w_in
            random_tensor(&mut rng, &[d, d], -0.4, 0.4),     // w_out
            random_tensor(&mut rng, &[d, 5, 5], -0.3, 0.3),  // dw5 d1
            random_tensor(&mut rng, &[dm, 5, 5], -0.3, 0.3), // dw5 d2
            random_tensor(&mut rng, &[dh, 7, 7], -0.3, 0.3), // dw7 d3
            random_tensor(&mut rng, &[d, d], -0.4, 0.4),     // gate_agg
            random_tensor(&mut rng, &[d, d], -0.4, 0.4),     // gate_update
            random_tensor(&mut rng, &[d], 0.5, 1.5),         // norm gain
            random_tensor(&mut rng, &[d], -0.3, 0.3),        // norm bias
            random_tensor(&mut rng, &[2 * d, d], -0.4, 0.4), // expand
            random_tensor(&mut rng, &[2 * d, 3, 3], -0.3, 0.3), // dw3
            random_tensor(&mut rng, &[d, 2 * d], -0.4, 0.4), // project
            random_tensor(&mut rng, &[head_out, d], -0.4, 0.4), // head
        ];
        let weight = random_tensor(&mut rng, &[head_out, gh, gw], -1.0, 1.0);
        let err = grad_check(&inputs, |t, l| {
            let p = PatchFeatures {
                x: l[0].clone(),
                grid: (gh, gw),
                patch: 2,
            };
            let agg = aggregate(t, &p, &graph, AggregationVariant::ResEdgeConv, &l[1], &l[2])?;
            let agg_grid = t.rows_to_grid(&agg, gh, gw)?;
            let updated = multi_order_update(t, &agg_grid, &l[3], &l[4], &l[5], (dl, dm, dh))?;
            let gated = gate_fuse(t, &agg_grid, &updated, &l[6], &l[7])?;
            let input_grid = t.rows_to_grid(&l[0], gh, gw)?;
            let with_skip = t.add(&input_grid, &gated)?;
            let fused = channel_fusion(t, &with_skip, &l[8], &l[9], &l[10], &l[11], &l[12])?;
            let head = t.pointwise_conv(&fused, &l[13], 1)?;
            let activated = t.softplus(&head)?;
            let weighted = t.mul(&activated, &DiffTensor::constant(weight.clone()))?;
            t.sum(&weighted)
        })?;
        worst = worst.max(err);
    }
    out.push(CheckResult {
        name: "composite_block".into(),
        max_rel_err: worst,
        tolerance: 1e-4,
    });
    Ok(out)
}
