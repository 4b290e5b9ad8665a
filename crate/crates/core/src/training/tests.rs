use super::*;
use crate::check::random_tensor;
use crate::network::NetConfig;
use crate::physics::{forward_measure, rasterize, Primitive, SamplingGeometry, SceneSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_geometry() -> SamplingGeometry {
    SamplingGeometry::new(8, 8, 32, 8, 1.0, 4.0e-10, 3.0e8).unwrap()
}

fn tiny_corpus(n: usize) -> Vec<TrainSample> {
    let g = tiny_geometry();
    (0..n)
        .map(|i| {
            let scene = SceneSpec {
                primitives: vec![Primitive::Rect {
                    center: [0.05 * i as f64 - 0.1, 0.0, 0.3 + 0.1 * i as f64],
                    half_extent: [0.2, 0.25, 0.06],
                    albedo: 0.6 + 0.1 * (i % 3) as f64,
                }],
            };
            let vol = rasterize(&scene, &g).unwrap();
            let meas = forward_measure(&vol);
            let albedo = project_albedo_oracle(&vol.values, g.n_z);
            let depth = project_depth_oracle(&vol.values, g.n_z, g.z_res());
            TrainSample::new(
                meas,
                target_pyramid(&albedo).unwrap(),
                target_pyramid(&depth).unwrap(),
            )
            .unwrap()
        })
        .collect()
}

/// volume order n_x, n_y, n_z -> per-pixel max image
fn project_albedo_oracle(vol: &Tensor, nz: usize) -> Tensor {
    let (nx, ny) = (vol.shape()[0], vol.shape()[1]);
    Tensor::from_fn(&[nx, ny], |p| {
        (0..nz)
            .map(|z| vol.data()[p * nz + z])
            .fold(f64::NEG_INFINITY, f64::max)
    })
}

fn project_depth_oracle(vol: &Tensor, nz: usize, z_res: f64) -> Tensor {
    let (nx, ny) = (vol.shape()[0], vol.shape()[1]);
    Tensor::from_fn(&[nx, ny], |p| {
        let mut bi = 0;
        for z in 1..nz {
            if vol.data()[p * nz + z] > vol.data()[p * nz + bi] {
                bi = z;
            }
        }
        bi as f64 * z_res
    })
}

fn tiny_net_cfg() -> NetConfig {
    NetConfig::new(&tiny_geometry(), 4, 1, 3, 2, AggregationVariant::ResEdgeConv).unwrap()
}

fn random_outputs(rng: &mut ChaCha8Rng, nz: usize) -> [DiffTensor; 3] {
    [
        DiffTensor::constant(random_tensor(rng, &[nz, 8, 8], 0.0, 1.0)),
        DiffTensor::constant(random_tensor(rng, &[nz, 4, 4], 0.0, 1.0)),
        DiffTensor::constant(random_tensor(rng, &[nz, 2, 2], 0.0, 1.0)),
    ]
}

#[test]
fn loss_is_zero_when_projections_equal_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = tiny_geometry();
    let outs = random_outputs(&mut rng, g.n_z);
    // derive the targets from the outputs themselves
    let mut tape = Tape::new();
    let albedo_t: Vec<Tensor> = outs
        .iter()
        .map(|o| albedo_project(&mut tape, o).unwrap().to_tensor())
        .collect();
    let depth_t: Vec<Tensor> = outs
        .iter()
        .map(|o| {
            soft_depth_project(&mut tape, o, g.z_res(), 20.0)
                .unwrap()
                .to_tensor()
        })
        .collect();
    let meas = TransientMeasurement::new(Tensor::zeros(&g.histogram_shape()), g.clone()).unwrap();
    let sample = TrainSample::new(meas, albedo_t, depth_t).unwrap();
    for which in [BranchKind::Albedo, BranchKind::Depth] {
        let mut t = Tape::new();
        let loss = multiscale_loss(
            &mut t,
            &outs,
            &sample,
            which,
            LossType::L1,
            3,
            g.z_res(),
            20.0,
        )
        .unwrap();
        assert!(loss.scalar_value().abs() < 1e-12);
    }
}

#[test]
fn constant_half_offset_gives_half_l1_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = tiny_geometry();
    let outs = random_outputs(&mut rng, g.n_z);
    let mut tape = Tape::new();
    let proj = albedo_project(&mut tape, &outs[0]).unwrap().to_tensor();
    let target = Tensor::from_fn(proj.shape(), |i| proj.data()[i] - 0.5);
    let albedo_t = vec![
        target,
        Tensor::zeros(&[4, 4]),
        Tensor::zeros(&[2, 2]),
    ];
    let depth_t = vec![
        Tensor::zeros(&[8, 8]),
        Tensor::zeros(&[4, 4]),
        Tensor::zeros(&[2, 2]),
    ];
    let meas = TransientMeasurement::new(Tensor::zeros(&g.histogram_shape()), g.clone()).unwrap();
    let sample = TrainSample::new(meas, albedo_t, depth_t).unwrap();
    let mut t = Tape::new();
    let loss = multiscale_loss(
        &mut t,
        &outs,
        &sample,
        BranchKind::Albedo,
        LossType::L1,
        1,
        g.z_res(),
        20.0,
    )
    .unwrap();
    assert!((loss.scalar_value() - 0.5).abs() < 1e-12);
}

#[test]
fn three_scale_loss_matches_summation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = tiny_geometry();
    let outs = random_outputs(&mut rng, g.n_z);
    let albedo_t = vec![
        random_tensor(&mut rng, &[8, 8], 0.0, 1.0),
        random_tensor(&mut rng, &[4, 4], 0.0, 1.0),
        random_tensor(&mut rng, &[2, 2], 0.0, 1.0),
    ];
    let depth_t = vec![
        Tensor::zeros(&[8, 8]),
        Tensor::zeros(&[4, 4]),
        Tensor::zeros(&[2, 2]),
    ];
    let meas = TransientMeasurement::new(Tensor::zeros(&g.histogram_shape()), g.clone()).unwrap();
    let sample = TrainSample::new(meas, albedo_t.clone(), depth_t).unwrap();
    for loss_type in LossType::ALL {
        let mut t = Tape::new();
        let loss = multiscale_loss(
            &mut t,
            &outs,
            &sample,
            BranchKind::Albedo,
            loss_type,
            3,
            g.z_res(),
            20.0,
        )
        .unwrap()
        .scalar_value();
        // direct summation oracle over per-pixel max projections
        let mut expected = 0.0;
        for i in 0..3 {
            let nz = g.n_z;
            let (h, w) = (8 >> i, 8 >> i);
            let od = outs[i].data();
            let mut l1 = 0.0;
            let mut l2 = 0.0;
            for p in 0..h * w {
                let m = (0..nz)
                    .map(|z| od[z * h * w + p])
                    .fold(f64::NEG_INFINITY, f64::max);
                let d = m - albedo_t[i].data()[p];
                l1 += d.abs();
                l2 += d * d;
            }
            let inv_p = 1.0 / (h * w) as f64;
            expected += match loss_type {
                LossType::L1 => l1 * inv_p,
                LossType::Mse => l2 * inv_p,
                LossType::L1Mse => (l1 + l2) * inv_p,
            };
        }
        assert!(
            (loss - expected).abs() <= 1e-12 * (1.0 + expected.abs()),
            "{:?}: {} vs {}",
            loss_type.name(),
            loss,
            expected
        );
    }
}

#[test]
fn loss_superset_dominates_at_step_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = tiny_geometry();
    let outs = random_outputs(&mut rng, g.n_z);
    let albedo_t = vec![
        random_tensor(&mut rng, &[8, 8], 0.0, 1.0),
        random_tensor(&mut rng, &[4, 4], 0.0, 1.0),
        random_tensor(&mut rng, &[2, 2], 0.0, 1.0),
    ];
    let depth_t = albedo_t.clone();
    let meas = TransientMeasurement::new(Tensor::zeros(&g.histogram_shape()), g.clone()).unwrap();
    let sample = TrainSample::new(meas, albedo_t, depth_t).unwrap();
    let eval = |scales: usize| {
        let mut t = Tape::new();
        multiscale_loss(
            &mut t,
            &outs,
            &sample,
            BranchKind::Albedo,
            LossType::L1,
            scales,
            g.z_res(),
            20.0,
        )
        .unwrap()
        .scalar_value()
    };
    assert!(eval(3) >= eval(1));
}

#[test]
fn cosine_schedule_endpoints_and_midpoint() {
    assert_eq!(cosine_lr(0, 100, 8e-4, 1e-6).unwrap(), 8e-4);
    let end = cosine_lr(100, 100, 8e-4, 1e-6).unwrap();
    assert!((end - 1e-6).abs() < 1e-18);
    let mid = cosine_lr(50, 100, 8e-4, 1e-6).unwrap();
    assert!((mid - (8e-4 + 1e-6) / 2.0).abs() < 1e-18);
    assert!(cosine_lr(101, 100, 8e-4, 1e-6).is_err());
}

#[test]
fn cosine_schedule_is_monotone_non_increasing() {
    let mut prev = f64::INFINITY;
    for s in 0..=250 {
        let lr = cosine_lr(s, 250, 8e-4, 1e-6).unwrap();
        assert!(lr <= prev + 1e-18);
        prev = lr;
    }
}

#[test]
fn adam_zero_gradient_keeps_parameters() {
    let mut p = Tensor::from_fn(&[5], |i| i as f64);
    let before = p.clone();
    let g = Tensor::zeros(&[5]);
    let mut state = AdamState::new(&[&p]);
    adam_step(
        &mut [&mut p],
        std::slice::from_ref(&g),
        &mut state,
        0.1,
        ADAM_BETA1,
        ADAM_BETA2,
        ADAM_EPS,
    )
    .unwrap();
    assert_eq!(p.data(), before.data());
}

#[test]
fn adam_zero_learning_rate_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = random_tensor(&mut rng, &[7], -1.0, 1.0);
    let before = p.clone();
    let g = random_tensor(&mut rng, &[7], -1.0, 1.0);
    let mut state = AdamState::new(&[&p]);
    adam_step(
        &mut [&mut p],
        std::slice::from_ref(&g),
        &mut state,
        0.0,
        ADAM_BETA1,
        ADAM_BETA2,
        ADAM_EPS,
    )
    .unwrap();
    for (a, b) in p.data().iter().zip(before.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn adam_first_step_moves_by_lr_times_sign() {
    let mut p = Tensor::zeros(&[3]);
    let g = Tensor::new(vec![3], vec![2.0, -0.5, 1e-3]).unwrap();
    let mut state = AdamState::new(&[&p]);
    let lr = 0.05;
    adam_step(
        &mut [&mut p],
        std::slice::from_ref(&g),
        &mut state,
        lr,
        ADAM_BETA1,
        ADAM_BETA2,
        ADAM_EPS,
    )
    .unwrap();
    for (pv, gv) in p.data().iter().zip(g.data()) {
        assert!((pv + lr * gv.signum()).abs() < 1e-6, "{} vs {}", pv, gv);
    }
}

#[test]
fn adam_converges_on_quadratic_bowl() {
    let mut w = Tensor::scalar(0.0);
    let mut state = AdamState::new(&[&w]);
    for _ in 0..100 {
        let grad = Tensor::scalar(2.0 * (w.data()[0] - 3.0));
        adam_step(
            &mut [&mut w],
            std::slice::from_ref(&grad),
            &mut state,
            0.1,
            ADAM_BETA1,
            ADAM_BETA2,
            ADAM_EPS,
        )
        .unwrap();
    }
    assert!((w.data()[0] - 3.0).abs() < 0.1, "w = {}", w.data()[0]);
}

#[test]
fn two_stage_freezes_the_first_branch() {
    // Stage 2 must never touch the stage-1 branch: lengthening stage 2 may
    // not change a single bit of it. Checked for both stage orders.
    let data = tiny_corpus(2);
    for (strategy, frozen) in [
        (Strategy::AlbedoFirst, BranchKind::Albedo),
        (Strategy::DepthFirst, BranchKind::Depth),
    ] {
        let base = TrainConfig {
            stage1_epochs: 2,
            stage2_epochs: 1,
            batch_size: 2,
            strategy,
            ..TrainConfig::default()
        };
        let longer = TrainConfig {
            stage2_epochs: 4,
            ..base.clone()
        };
        let mut m_short = Model::init(tiny_net_cfg(), 7).unwrap();
        train_two_stage(&mut m_short, &data, &base).unwrap();
        let mut m_long = Model::init(tiny_net_cfg(), 7).unwrap();
        train_two_stage(&mut m_long, &data, &longer).unwrap();
        let a = m_short.branch(frozen).named("b");
        let b = m_long.branch(frozen).named("b");
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{} changed in stage 2", na);
            }
        }
        // the stage-2 branch did move
        let moved = m_short
            .branch(match frozen {
                BranchKind::Albedo => BranchKind::Depth,
                BranchKind::Depth => BranchKind::Albedo,
            })
            .named("b");
        let init = Model::init(tiny_net_cfg(), 7).unwrap();
        let init_named = init
            .branch(match frozen {
                BranchKind::Albedo => BranchKind::Depth,
                BranchKind::Depth => BranchKind::Albedo,
            })
            .named("b");
        let any_diff = moved
            .iter()
            .zip(&init_named)
            .any(|((_, ta), (_, tb))| ta.data() != tb.data());
        assert!(any_diff);
    }
}

#[test]
fn training_history_is_deterministic() {
    let data = tiny_corpus(2);
    let cfg = TrainConfig {
        stage1_epochs: 3,
        stage2_epochs: 2,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let mut m1 = Model::init(tiny_net_cfg(), 9).unwrap();
    let h1 = train_two_stage(&mut m1, &data, &cfg).unwrap();
    let mut m2 = Model::init(tiny_net_cfg(), 9).unwrap();
    let h2 = train_two_stage(&mut m2, &data, &cfg).unwrap();
    assert_eq!(h1.to_csv(), h2.to_csv());
    assert_eq!(h1.rows.len(), 5);
}

#[test]
fn single_branch_strategy_trains_one_parameter_set_jointly() {
    let data = tiny_corpus(2);
    let cfg = TrainConfig {
        stage1_epochs: 2,
        stage2_epochs: 3,
        batch_size: 2,
        strategy: Strategy::SingleBranch,
        ..TrainConfig::default()
    };
    let mut model = Model::init(tiny_net_cfg(), 13).unwrap();
    let init = model.clone();
    let hist = train_two_stage(&mut model, &data, &cfg).unwrap();
    // one stage covering the combined epoch budget
    assert_eq!(hist.rows.len(), 5);
    assert!(hist.rows.iter().all(|r| r.stage == 1));
    // theta (the albedo parameter set) moved, the other branch did not
    let moved = model
        .albedo
        .named("b")
        .iter()
        .zip(init.albedo.named("b"))
        .any(|((_, a), (_, b))| a.data() != b.data());
    assert!(moved);
    for ((_, a), (_, b)) in model.depth.named("b").iter().zip(init.depth.named("b")) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn training_rejects_empty_dataset() {
    let mut model = Model::init(tiny_net_cfg(), 1).unwrap();
    let cfg = TrainConfig::default();
    assert!(train_two_stage(&mut model, &[], &cfg).is_err());
}

#[test]
fn metric_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&mut rng, &[16, 16], 0.0, 1.0);
    assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP_DB);
    assert_eq!(rmse(&x, &x).unwrap(), 0.0);
    assert_eq!(mad(&x, &x).unwrap(), 0.0);
    assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn psnr_arithmetic_example() {
    let a = Tensor::zeros(&[8, 8]);
    let b = Tensor::filled(&[8, 8], 0.5);
    let p = psnr(&a, &b).unwrap();
    assert!((p - 6.0206).abs() < 1e-3, "psnr {}", p);
}

#[test]
fn ssim_matches_direct_formula_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // correlated pair with known covariance structure
    let base = random_tensor(&mut rng, &[16, 16], 0.0, 1.0);
    let noisy = Tensor::from_fn(&[16, 16], |i| {
        (base.data()[i] * 0.8 + 0.1 + 0.05 * ((i % 7) as f64 - 3.0) / 3.0).clamp(0.0, 1.0)
    });
    let got = ssim(&base, &noisy).unwrap();

    // independent oracle: separable 1-D Gaussian window, covariance form
    let n = 11usize;
    let sigma = 1.5;
    let g1: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = g1.iter().sum();
    let g1: Vec<f64> = g1.iter().map(|v| v / norm).collect();
    let c1 = 1e-4;
    let c2 = 9e-4;
    let mut total = 0.0;
    let mut count = 0;
    for i0 in 0..=(16 - n) {
        for j0 in 0..=(16 - n) {
            let mut mx = 0.0;
            let mut my = 0.0;
            for u in 0..n {
                for v in 0..n {
                    let wt = g1[u] * g1[v];
                    mx += wt * base.data()[(i0 + u) * 16 + j0 + v];
                    my += wt * noisy.data()[(i0 + u) * 16 + j0 + v];
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for u in 0..n {
                for v in 0..n {
                    let wt = g1[u] * g1[v];
                    let dx = base.data()[(i0 + u) * 16 + j0 + v] - mx;
                    let dy = noisy.data()[(i0 + u) * 16 + j0 + v] - my;
                    vx += wt * dx * dx;
                    vy += wt * dy * dy;
                    cov += wt * dx * dy;
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    let expected = total / count as f64;
    assert!(
        (got - expected).abs() <= 1e-9,
        "ssim {} vs oracle {}",
        got,
        expected
    );
}

#[test]
fn avg_pool_halves_and_averages() {
    let img = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let p = avg_pool2(&img).unwrap();
    assert_eq!(p.shape(), &[1, 1]);
    assert_eq!(p.data()[0], 2.5);
    assert!(avg_pool2(&Tensor::zeros(&[3, 4])).is_err());
}
