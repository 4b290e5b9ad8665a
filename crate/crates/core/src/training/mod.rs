//! Multi-scale losses, Adam with cosine annealing, the two-stage decoupled
//! training loop, and image fidelity metrics.
//!
//! Stage one fits the albedo branch against the albedo loss; stage two fits
//! the depth branch against the depth loss with the albedo parameters
//! bit-frozen (they are never registered as leaves, so no update can touch
//! them). The depth-first strategy swaps the stages; the single-branch
//! strategy fits one parameter set against the summed loss.

use crate::error::{param_err, shape_err, Result};
use crate::graph::AggregationVariant;
use crate::network::{
    albedo_project, branch_forward, depth_mask, feature_transform, soft_depth_project,
    BranchKind, Model,
};
use crate::physics::TransientMeasurement;
use crate::tensor::{DiffTensor, Tape, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Cap reported for infinite peak signal-to-noise ratios.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossType {
    L1,
    Mse,
    L1Mse,
}

impl LossType {
    pub const ALL: [LossType; 3] = [LossType::L1, LossType::Mse, LossType::L1Mse];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossType::L1),
            "mse" => Ok(LossType::Mse),
            "l1+mse" | "l1mse" => Ok(LossType::L1Mse),
            other => Err(param_err("loss_type", format!("unknown '{}'", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossType::L1 => "l1",
            LossType::Mse => "mse",
            LossType::L1Mse => "l1+mse",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    AlbedoFirst,
    DepthFirst,
    SingleBranch,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "albedo-first" | "albedofirst" => Ok(Strategy::AlbedoFirst),
            "depth-first" | "depthfirst" => Ok(Strategy::DepthFirst),
            "single-branch" | "singlebranch" => Ok(Strategy::SingleBranch),
            other => Err(param_err("strategy", format!("unknown '{}'", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::AlbedoFirst => "albedo-first",
            Strategy::DepthFirst => "depth-first",
            Strategy::SingleBranch => "single-branch",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_scales: usize,
    pub loss_type: LossType,
    pub variant: AggregationVariant,
    pub strategy: Strategy,
    /// Softmax sharpness of the differentiable depth rendering.
    pub depth_sharpness: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 8e-4,
            lr_final: 1e-6,
            stage1_epochs: 150,
            stage2_epochs: 80,
            batch_size: 4,
            seed: 0,
            loss_scales: 3,
            loss_type: LossType::L1,
            variant: AggregationVariant::ResEdgeConv,
            strategy: Strategy::AlbedoFirst,
            depth_sharpness: 20.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > self.lr_final && self.lr_final > 0.0) {
            return Err(param_err("train_config", "need lr_init > lr_final > 0"));
        }
        if self.stage1_epochs < 1 || self.stage2_epochs < 1 || self.batch_size < 1 {
            return Err(param_err(
                "train_config",
                "epochs and batch size must be >= 1",
            ));
        }
        if !(1..=3).contains(&self.loss_scales) {
            return Err(param_err("train_config", "loss_scales must be 1, 2 or 3"));
        }
        if self.depth_sharpness <= 0.0 {
            return Err(param_err("train_config", "depth_sharpness must be > 0"));
        }
        Ok(())
    }
}

/// One training item: a measurement plus ground-truth albedo and depth
/// images at the three loss scales.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub measurement: TransientMeasurement,
    pub albedo_gt: Vec<Tensor>,
    pub depth_gt: Vec<Tensor>,
}

impl TrainSample {
    pub fn new(
        measurement: TransientMeasurement,
        albedo_gt: Vec<Tensor>,
        depth_gt: Vec<Tensor>,
    ) -> Result<Self> {
        let g = &measurement.geometry;
        if albedo_gt.len() != 3 || depth_gt.len() != 3 {
            return Err(param_err("train_sample", "need ground truth at 3 scales"));
        }
        for i in 0..3 {
            let expect = [g.n_x >> i, g.n_y >> i];
            if albedo_gt[i].shape() != expect || depth_gt[i].shape() != expect {
                return Err(shape_err(
                    "train_sample",
                    format!(
                        "scale {} images {:?}/{:?} must be {:?}",
                        i + 1,
                        albedo_gt[i].shape(),
                        depth_gt[i].shape(),
                        expect
                    ),
                ));
            }
        }
        Ok(TrainSample {
            measurement,
            albedo_gt,
            depth_gt,
        })
    }

    /// Elements of the scale-`i` image (the loss normalizer), 1-based scale.
    pub fn elements(&self, scale: usize) -> usize {
        self.albedo_gt[scale - 1].numel()
    }
}

/// 2x2 average pooling; extents must be even.
pub fn avg_pool2(img: &Tensor) -> Result<Tensor> {
    let (h, w) = match img.shape() {
        [h, w] => (*h, *w),
        other => {
            return Err(shape_err(
                "avg_pool2",
                format!("expected rank 2, got {:?}", other),
            ))
        }
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err("avg_pool2", "extents must be even"));
    }
    let d = img.data();
    let mut out = vec![0.0; (h / 2) * (w / 2)];
    for i in 0..h / 2 {
        for j in 0..w / 2 {
            out[i * (w / 2) + j] = 0.25
                * (d[(2 * i) * w + 2 * j]
                    + d[(2 * i) * w + 2 * j + 1]
                    + d[(2 * i + 1) * w + 2 * j]
                    + d[(2 * i + 1) * w + 2 * j + 1]);
        }
    }
    Tensor::new(vec![h / 2, w / 2], out)
}

/// Three-level target pyramid built by repeated 2x2 average pooling.
pub fn target_pyramid(scale1: &Tensor) -> Result<Vec<Tensor>> {
    let s2 = avg_pool2(scale1)?;
    let s3 = avg_pool2(&s2)?;
    Ok(vec![scale1.clone(), s2, s3])
}

fn norm_term(
    tape: &mut Tape,
    diff: &DiffTensor,
    loss_type: LossType,
    inv_p: f64,
) -> Result<DiffTensor> {
    match loss_type {
        LossType::L1 => {
            let a = tape.abs(diff)?;
            let s = tape.sum(&a)?;
            tape.scale(&s, inv_p)
        }
        LossType::Mse => {
            let sq = tape.mul(diff, diff)?;
            let s = tape.sum(&sq)?;
            tape.scale(&s, inv_p)
        }
        LossType::L1Mse => {
            let l1 = norm_term(tape, diff, LossType::L1, inv_p)?;
            let mse = norm_term(tape, diff, LossType::Mse, inv_p)?;
            tape.add(&l1, &mse)
        }
    }
}

/// Sum over the included scales of `(1/P_i) * norm(projection - target)`.
/// The albedo projection is the per-pixel z maximum; the depth projection is
/// the differentiable soft rendering (see [`soft_depth_project`]).
#[allow(clippy::too_many_arguments)]
pub fn multiscale_loss(
    tape: &mut Tape,
    outputs: &[DiffTensor; 3],
    sample: &TrainSample,
    which: BranchKind,
    loss_type: LossType,
    scales: usize,
    z_res: f64,
    depth_sharpness: f64,
) -> Result<DiffTensor> {
    if !(1..=3).contains(&scales) {
        return Err(param_err("multiscale_loss", "scales must be 1, 2 or 3"));
    }
    let mut total: Option<DiffTensor> = None;
    #[allow(clippy::needless_range_loop)]
    for i in 0..scales {
        let (proj, target) = match which {
            BranchKind::Albedo => (albedo_project(tape, &outputs[i])?, &sample.albedo_gt[i]),
            BranchKind::Depth => (
                soft_depth_project(tape, &outputs[i], z_res, depth_sharpness)?,
                &sample.depth_gt[i],
            ),
        };
        if proj.shape() != target.shape() {
            return Err(shape_err(
                "multiscale_loss",
                format!(
                    "scale {} projection {:?} vs target {:?}",
                    i + 1,
                    proj.shape(),
                    target.shape()
                ),
            ));
        }
        let diff = tape.sub(&proj, &DiffTensor::constant(target.clone()))?;
        let term = norm_term(tape, &diff, loss_type, 1.0 / target.numel() as f64)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(&t, &term)?,
        });
    }
    Ok(total.expect("at least one scale"))
}

/// Cosine annealing from `lr_init` at step 0 to `lr_final` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_init: f64, lr_final: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(param_err(
            "cosine_lr",
            format!("step {} out of range 0..={}", step, total_steps),
        ));
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr_final + 0.5 * (lr_init - lr_final) * (1.0 + phase.cos()))
}

/// First/second moment state for one ordered parameter list.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update over an ordered parameter list.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(param_err("adam_step", "parameter/gradient count mismatch"));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.shape() != g.shape() {
            return Err(shape_err(
                "adam_step",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        for ((pv, &gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub stage: u8,
    pub epoch: usize,
    pub loss: f64,
}

/// Per-epoch losses of a training run, in execution order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,epoch,loss\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:?}\n", r.stage, r.epoch, r.loss));
        }
        s
    }

    pub fn stage_rows(&self, stage: u8) -> Vec<&HistoryRow> {
        self.rows.iter().filter(|r| r.stage == stage).collect()
    }
}

enum StageLoss {
    Albedo,
    Depth,
    Joint,
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    model: &mut Model,
    features: &[DiffTensor],
    data: &[TrainSample],
    kind: BranchKind,
    loss: StageLoss,
    epochs: usize,
    cfg: &TrainConfig,
    stage_tag: u8,
    history: &mut TrainHistory,
) -> Result<()> {
    let z_res = data[0].measurement.geometry.z_res();
    let batches: Vec<Vec<usize>> = (0..data.len())
        .collect::<Vec<_>>()
        .chunks(cfg.batch_size)
        .map(|c| c.to_vec())
        .collect();
    let total_steps = epochs * batches.len();
    let mut step = 0usize;
    let mut state = {
        let branch = model.branch(kind);
        let named = branch.named("p");
        let refs: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
        AdamState::new(&refs)
    };
    let net_cfg = model.cfg.clone();
    for epoch in 0..epochs {
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let mut tape = Tape::new();
            let vars = model.branch(kind).register(&mut tape, true);
            let mut total: Option<DiffTensor> = None;
            for &si in batch {
                let outs = branch_forward(&mut tape, &net_cfg, &vars, &features[si])?;
                let sample_loss = match loss {
                    StageLoss::Albedo => multiscale_loss(
                        &mut tape,
                        &outs,
                        &data[si],
                        BranchKind::Albedo,
                        cfg.loss_type,
                        cfg.loss_scales,
                        z_res,
                        cfg.depth_sharpness,
                    )?,
                    StageLoss::Depth => multiscale_loss(
                        &mut tape,
                        &outs,
                        &data[si],
                        BranchKind::Depth,
                        cfg.loss_type,
                        cfg.loss_scales,
                        z_res,
                        cfg.depth_sharpness,
                    )?,
                    StageLoss::Joint => {
                        let la = multiscale_loss(
                            &mut tape,
                            &outs,
                            &data[si],
                            BranchKind::Albedo,
                            cfg.loss_type,
                            cfg.loss_scales,
                            z_res,
                            cfg.depth_sharpness,
                        )?;
                        let ld = multiscale_loss(
                            &mut tape,
                            &outs,
                            &data[si],
                            BranchKind::Depth,
                            cfg.loss_type,
                            cfg.loss_scales,
                            z_res,
                            cfg.depth_sharpness,
                        )?;
                        tape.add(&la, &ld)?
                    }
                };
                total = Some(match total {
                    None => sample_loss,
                    Some(t) => tape.add(&t, &sample_loss)?,
                });
            }
            let batch_loss = tape.scale(&total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
            tape.backward(&batch_loss)?;
            let leaves = vars.leaves();
            let grads: Vec<Tensor> = leaves
                .iter()
                .map(|l| tape.grad(l).unwrap_or_else(|| Tensor::zeros(l.shape())))
                .collect();
            let lr = cosine_lr(step, total_steps, cfg.lr_init, cfg.lr_final)?;
            let mut params = model.branch_mut(kind).tensors_mut();
            adam_step(
                &mut params,
                &grads,
                &mut state,
                lr,
                ADAM_BETA1,
                ADAM_BETA2,
                ADAM_EPS,
            )?;
            epoch_loss += batch_loss.scalar_value();
            step += 1;
        }
        history.rows.push(HistoryRow {
            stage: stage_tag,
            epoch,
            loss: epoch_loss / batches.len() as f64,
        });
    }
    Ok(())
}

/// Precomputed branch inputs: the feature transform of each measurement for
/// the albedo branch and its depth-masked variant for the depth branch.
pub fn prepare_features(data: &[TrainSample]) -> (Vec<DiffTensor>, Vec<DiffTensor>) {
    let full: Vec<DiffTensor> = data
        .iter()
        .map(|s| feature_transform(&s.measurement).values)
        .collect();
    let masked: Vec<DiffTensor> = full
        .iter()
        .map(|f| {
            depth_mask(&crate::network::GridFeature {
                values: f.clone(),
                scale: 1,
            })
            .values
        })
        .collect();
    (full, masked)
}

/// Two-stage decoupled optimization. Stage one fits one branch, stage two
/// fits the other with the first branch untouched; the single-branch
/// strategy runs one joint stage on the albedo parameter set. Optimizer
/// state is reset between stages. Returns per-epoch losses.
pub fn train_two_stage(
    model: &mut Model,
    data: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(param_err("train_two_stage", "dataset is empty"));
    }
    let (full, masked) = prepare_features(data);
    let mut history = TrainHistory::default();
    match cfg.strategy {
        Strategy::AlbedoFirst => {
            run_stage(
                model,
                &full,
                data,
                BranchKind::Albedo,
                StageLoss::Albedo,
                cfg.stage1_epochs,
                cfg,
                1,
                &mut history,
            )?;
            run_stage(
                model,
                &masked,
                data,
                BranchKind::Depth,
                StageLoss::Depth,
                cfg.stage2_epochs,
                cfg,
                2,
                &mut history,
            )?;
        }
        Strategy::DepthFirst => {
            run_stage(
                model,
                &masked,
                data,
                BranchKind::Depth,
                StageLoss::Depth,
                cfg.stage1_epochs,
                cfg,
                1,
                &mut history,
            )?;
            run_stage(
                model,
                &full,
                data,
                BranchKind::Albedo,
                StageLoss::Albedo,
                cfg.stage2_epochs,
                cfg,
                2,
                &mut history,
            )?;
        }
        Strategy::SingleBranch => {
            run_stage(
                model,
                &full,
                data,
                BranchKind::Albedo,
                StageLoss::Joint,
                cfg.stage1_epochs + cfg.stage2_epochs,
                cfg,
                1,
                &mut history,
            )?;
        }
    }
    Ok(history)
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Mean squared error helper shared by psnr/rmse.
fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]` (data range 1).
/// Identical images report the cap value.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape("psnr", a, b)?;
    let m = mse(a, b);
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

pub fn rmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape("rmse", a, b)?;
    Ok(mse(a, b).sqrt())
}

/// Mean absolute difference.
pub fn mad(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape("mad", a, b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs())
        .sum::<f64>()
        / a.numel() as f64)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let mut w = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5) over all
/// fully-contained window positions; images assumed in `[0, 1]`, range 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape("ssim", a, b)?;
    let (h, w) = match a.shape() {
        [h, w] => (*h, *w),
        other => {
            return Err(shape_err(
                "ssim",
                format!("expected rank 2, got {:?}", other),
            ))
        }
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(param_err(
            "ssim",
            format!("image {}x{} smaller than the {} window", h, w, SSIM_WINDOW),
        ));
    }
    let win = gaussian_window();
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=(h - SSIM_WINDOW) {
        for j in 0..=(w - SSIM_WINDOW) {
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..SSIM_WINDOW {
                for v in 0..SSIM_WINDOW {
                    let wt = win[u * SSIM_WINDOW + v];
                    let x = ad[(i + u) * w + (j + v)];
                    let y = bd[(i + u) * w + (j + v)];
                    mx += wt * x;
                    my += wt * y;
                    mxx += wt * x * x;
                    myy += wt * y * y;
                    mxy += wt * x * y;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cov = mxy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests;
