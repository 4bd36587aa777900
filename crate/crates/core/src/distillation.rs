//! Two-branch training: a fully observed and a masked branch share every
//! parameter, the masked branch is scored at the full branch's winner mode,
//! and their pooled scene features are pulled together with a linear MMD term.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tsd_autograd::{Graph, Shape, Tensor, Var};

use crate::decoder::{classification_loss_vars, regression_loss_vars, ForecastVars};
use crate::encoder::{EncoderInput, SceneFeatures, SceneVars};
use crate::error::{argument, Error, Result};
use crate::masking::{MaskSpec, ObservationMask};
use crate::model::{BranchVars, ModelBound, ModelConfig, TsdModel};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::scenario::Scenario;
use crate::targets::{closest_endpoint, future_positions, target_ground_truth, target_loss_vars};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// No target supervision, full branch only.
    Baseline,
    /// Target supervision, full branch only.
    TargetOnly,
    /// Both branches without the MMD term.
    TsdNoMmd,
    /// Both branches with MMD.
    Tsd,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::TargetOnly,
        Variant::TsdNoMmd,
        Variant::Tsd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::TargetOnly => "target_only",
            Variant::TsdNoMmd => "tsd_no_mmd",
            Variant::Tsd => "tsd",
        }
    }

    pub fn uses_targets(self) -> bool {
        self != Variant::Baseline
    }

    pub fn uses_partial(self) -> bool {
        matches!(self, Variant::TsdNoMmd | Variant::Tsd)
    }

    pub fn uses_mmd(self) -> bool {
        self == Variant::Tsd
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| argument(format!("unknown variant {s:?}")))
    }
}

/// Masks the partial branch draws from, one option per scenario, uniformly.
pub fn default_mask_schedule() -> Vec<MaskSpec> {
    let mut v: Vec<MaskSpec> = [0.2, 0.4, 0.6, 0.8]
        .into_iter()
        .map(|rate| MaskSpec::Random { rate })
        .collect();
    v.extend([1, 5, 10, 15].map(|observed_len| MaskSpec::Continuous { observed_len }));
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub model: ModelConfig,
    pub variant: Variant,
    pub mask_schedule: Vec<MaskSpec>,
    pub optimizer: AdamWConfig,
    pub lr_schedule: LrSchedule,
    /// Score targets of every mode instead of the winner only.
    pub target_loss_all_modes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 32,
            model: ModelConfig::default(),
            variant: Variant::Tsd,
            mask_schedule: default_mask_schedule(),
            optimizer: AdamWConfig::default(),
            lr_schedule: LrSchedule::Constant,
            target_loss_all_modes: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.variant.uses_partial() && self.mask_schedule.is_empty() {
            return Err(Error::Config("mask_schedule is empty".into()));
        }
        for spec in &self.mask_schedule {
            match *spec {
                MaskSpec::Random { rate } if !(0.0..1.0).contains(&rate) => {
                    return Err(Error::Config(format!("mask rate {rate} outside [0, 1)")));
                }
                MaskSpec::Continuous { observed_len }
                    if observed_len == 0 || observed_len > self.model.t_obs =>
                {
                    return Err(Error::Config(format!(
                        "observed length {observed_len} outside 1..={}",
                        self.model.t_obs
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Batch-mean loss terms. Terms a variant does not use are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_tar_full: Option<f64>,
    pub l_reg_full: f64,
    pub l_cls_full: f64,
    pub l_tar_part: Option<f64>,
    pub l_reg_part: Option<f64>,
    pub l_cls_part: Option<f64>,
    pub l_mmd: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn full(&self) -> f64 {
        self.l_tar_full.unwrap_or(0.0) + self.l_reg_full + self.l_cls_full
    }

    pub fn partial(&self) -> Option<f64> {
        Some(self.l_tar_part.unwrap_or(0.0) + self.l_reg_part? + self.l_cls_part?)
    }

    /// Sum of the components present.
    pub fn component_sum(&self) -> f64 {
        self.full() + self.partial().unwrap_or(0.0) + self.l_mmd.unwrap_or(0.0)
    }

    pub const CSV_HEADER: &'static str =
        "l_tar_full,l_reg_full,l_cls_full,l_tar_part,l_reg_part,l_cls_part,l_mmd,total";

    /// Values in [`Self::CSV_HEADER`] order; absent terms are empty fields.
    pub fn csv_fields(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        format!(
            "{},{:.9e},{:.9e},{},{},{},{},{:.9e}",
            opt(self.l_tar_full),
            self.l_reg_full,
            self.l_cls_full,
            opt(self.l_tar_part),
            opt(self.l_reg_part),
            opt(self.l_cls_part),
            opt(self.l_mmd),
            self.total
        )
    }
}

fn pooled_features(g: &mut Graph, s: &SceneVars) -> Var {
    let x = g.mean_rows(s.f_x);
    let a = g.mean_rows(s.f_a);
    let xa = g.mean_rows(s.f_xa);
    g.concat_cols(&[x, a, xa])
}

/// `|| mean_batch(v_full) - mean_batch(v_part) ||^2` with `v` the pooled
/// `F_X`, `F_A`, `F_XA` of each item. Returns a `[1, 1, 1]` node.
pub fn mmd_loss_vars(g: &mut Graph, full: &SceneVars, part: &SceneVars) -> Var {
    let vf = pooled_features(g, full);
    let vp = pooled_features(g, part);
    let mf = g.mean_batch(vf);
    let mp = g.mean_batch(vp);
    let diff = g.sub(mf, mp);
    let sq = g.mul(diff, diff);
    g.sum(sq)
}

fn stack(items: &[SceneFeatures], pick: impl Fn(&SceneFeatures) -> &Tensor) -> Result<Tensor> {
    let first = pick(&items[0]).shape();
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for f in items {
        if pick(f).shape() != first {
            return Err(argument("feature shapes differ within the batch"));
        }
        data.extend_from_slice(pick(f).data());
    }
    Ok(Tensor::from_vec(
        Shape::new(items.len(), first.rows, first.cols),
        data,
    ))
}

fn batch_scene(g: &mut Graph, items: &[SceneFeatures]) -> Result<SceneVars> {
    let f_x = stack(items, |f| &f.f_x)?;
    let f_a = stack(items, |f| &f.f_a)?;
    let f_xa = stack(items, |f| &f.f_xa)?;
    let dummy = Tensor::zeros(Shape::new(1, 1, 1));
    Ok(SceneVars {
        f_x: g.constant(f_x),
        f_a: g.constant(f_a),
        f_m: g.constant(dummy.clone()),
        f_xa: g.constant(f_xa),
        f_xm: g.constant(dummy.clone()),
        f_temporal: g.constant(dummy.clone()),
        focal_key_bias: g.constant(dummy),
    })
}

/// Linear-kernel MMD between the features of two equally sized batches.
pub fn mmd_loss(full: &[SceneFeatures], part: &[SceneFeatures]) -> Result<f64> {
    if full.is_empty() || full.len() != part.len() {
        return Err(argument(format!(
            "batches must be non-empty and equal in size ({} vs {})",
            full.len(),
            part.len()
        )));
    }
    let mut g = Graph::new();
    let a = batch_scene(&mut g, full)?;
    let b = batch_scene(&mut g, part)?;
    for (x, y) in [(a.f_x, b.f_x), (a.f_a, b.f_a), (a.f_xa, b.f_xa)] {
        if g.shape(x) != g.shape(y) {
            return Err(argument("feature shapes differ between the branches"));
        }
    }
    let v = mmd_loss_vars(&mut g, &a, &b);
    Ok(g.value(v).data()[0])
}

/// Draws one partial-observation mask per scenario from `schedule`.
pub fn sample_partial_masks(
    batch: &[Scenario],
    schedule: &[MaskSpec],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ObservationMask>> {
    if schedule.is_empty() {
        return Err(argument("empty mask schedule"));
    }
    batch
        .iter()
        .map(|s| {
            let spec = schedule[rng.random_range(0..schedule.len())];
            spec.build(s.t_obs(), s.neighbors.len(), rng.random())
        })
        .collect()
}

struct BranchLoss {
    tar: Option<Var>,
    reg: Var,
    cls: Var,
}

fn batch_mean(g: &mut Graph, per_item: Var) -> Var {
    let b = g.shape(per_item).batch;
    let s = g.sum(per_item);
    g.scale(s, 1.0 / b as f64)
}

struct GroundTruth {
    steps: Var,
    targets: Option<Var>,
}

fn branch_loss(
    g: &mut Graph,
    out: &BranchVars,
    gt: &GroundTruth,
    winners: &[usize],
    all_modes: bool,
) -> BranchLoss {
    let tar = match (&out.targets, gt.targets) {
        (Some(t), Some(gt_t)) => {
            let per = target_loss_vars(g, t, gt_t, (!all_modes).then_some(winners));
            Some(batch_mean(g, per))
        }
        _ => None,
    };
    let reg = regression_loss_vars(g, &out.forecast, gt.steps, winners);
    let reg = batch_mean(g, reg);
    let cls = classification_loss_vars(g, &out.forecast, gt.steps);
    let cls = batch_mean(g, cls);
    BranchLoss { tar, reg, cls }
}

/// Winner mode per item from a branch's values: closest final target, or
/// closest trajectory endpoint when targets are absent.
fn winner_modes(
    g: &Graph,
    targets: Option<Var>,
    forecast: &ForecastVars,
    ends: &[[f64; 2]],
) -> Vec<usize> {
    let source = g.value(targets.unwrap_or(forecast.mu));
    ends.iter()
        .enumerate()
        .map(|(b, end)| closest_endpoint(source, b, *end))
        .collect()
}

/// The composite loss of one batch built on a fresh graph.
pub struct LossGraph {
    pub graph: Graph,
    pub params: ModelBound,
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Winner mode per scenario as chosen on the full branch.
    pub winners_full: Vec<usize>,
    /// Mode index the partial branch was scored at, if it ran.
    pub winners_partial: Option<Vec<usize>>,
}

/// Builds both branches (as the variant requires) and the total loss.
/// `partial_masks` is required exactly when the variant uses the partial branch.
pub fn loss_graph(
    model: &TsdModel,
    batch: &[Scenario],
    partial_masks: Option<&[ObservationMask]>,
    variant: Variant,
    target_loss_all_modes: bool,
) -> Result<LossGraph> {
    loss_graph_on(
        Graph::new(),
        model,
        batch,
        partial_masks,
        variant,
        target_loss_all_modes,
    )
}

/// [`loss_graph`] recorded on a caller-supplied (empty) graph.
pub fn loss_graph_on(
    mut g: Graph,
    model: &TsdModel,
    batch: &[Scenario],
    partial_masks: Option<&[ObservationMask]>,
    variant: Variant,
    target_loss_all_modes: bool,
) -> Result<LossGraph> {
    if batch.is_empty() {
        return Err(argument("empty training batch"));
    }
    let cfg = model.config;
    let use_targets = variant.uses_targets();
    let mut steps = Vec::with_capacity(batch.len() * 2 * cfg.t_pred);
    let mut tar = Vec::with_capacity(batch.len() * 2 * cfg.points);
    let mut ends = Vec::with_capacity(batch.len());
    for s in batch {
        if s.t_obs() != cfg.t_obs || s.t_pred() != cfg.t_pred {
            return Err(argument(format!(
                "scenario {} horizon ({}, {}) does not match the model ({}, {})",
                s.scenario_id,
                s.t_obs(),
                s.t_pred(),
                cfg.t_obs,
                cfg.t_pred
            )));
        }
        let xy = future_positions(&s.focal_future)?;
        ends.push(*xy.last().expect("non-empty future"));
        steps.extend(xy.into_iter().flatten());
        tar.extend(target_ground_truth(&s.focal_future, cfg.points)?);
    }
    let full_masks: Vec<ObservationMask> = batch
        .iter()
        .map(|s| ObservationMask::full(s.t_obs(), s.neighbors.len()))
        .collect();
    let full_items: Vec<(&Scenario, &ObservationMask)> = batch.iter().zip(&full_masks).collect();
    let full_input = EncoderInput::new(&full_items)?;
    let part_input = match (variant.uses_partial(), partial_masks) {
        (true, Some(m)) => {
            if m.len() != batch.len() {
                return Err(argument("one partial mask per scenario is required"));
            }
            let items: Vec<(&Scenario, &ObservationMask)> = batch.iter().zip(m).collect();
            Some(EncoderInput::new(&items)?)
        }
        (true, None) => return Err(argument("variant needs partial-branch masks")),
        (false, _) => None,
    };

    let params = model.bind(&mut g);
    let bsz = batch.len();
    let gt = GroundTruth {
        steps: g.constant(Tensor::from_vec(Shape::new(bsz, 1, 2 * cfg.t_pred), steps)),
        targets: use_targets
            .then(|| g.constant(Tensor::from_vec(Shape::new(bsz, 1, 2 * cfg.points), tar))),
    };

    let full = model.forward(&mut g, &params, &full_input, use_targets);
    let winners = winner_modes(
        &g,
        full.targets.as_ref().map(|t| t.mu),
        &full.forecast,
        &ends,
    );
    let lf = branch_loss(&mut g, &full, &gt, &winners, target_loss_all_modes);

    let mut terms = vec![lf.reg, lf.cls];
    terms.extend(lf.tar);
    let mut lp = None;
    let mut mmd = None;
    if let Some(input) = &part_input {
        let part = model.forward(&mut g, &params, input, use_targets);
        let l = branch_loss(&mut g, &part, &gt, &winners, target_loss_all_modes);
        terms.extend([l.reg, l.cls]);
        terms.extend(l.tar);
        if variant.uses_mmd() {
            let m = mmd_loss_vars(&mut g, &full.scene, &part.scene);
            terms.push(m);
            mmd = Some(m);
        }
        lp = Some(l);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }

    let val = |v: Var| g.value(v).data()[0];
    let breakdown = LossBreakdown {
        l_tar_full: lf.tar.map(val),
        l_reg_full: val(lf.reg),
        l_cls_full: val(lf.cls),
        l_tar_part: lp.as_ref().and_then(|l| l.tar.map(val)),
        l_reg_part: lp.as_ref().map(|l| val(l.reg)),
        l_cls_part: lp.as_ref().map(|l| val(l.cls)),
        l_mmd: mmd.map(val),
        total: val(total),
    };
    Ok(LossGraph {
        graph: g,
        params,
        total,
        breakdown,
        winners_partial: lp.is_some().then(|| winners.clone()),
        winners_full: winners,
    })
}

/// Result of one optimizer step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub breakdown: LossBreakdown,
    pub grad_norm: f64,
    pub winners_full: Vec<usize>,
    pub winners_partial: Option<Vec<usize>>,
}

/// Forward both branches, backpropagate the total and apply one update.
pub fn train_step(
    model: &mut TsdModel,
    opt: &mut AdamW,
    batch: &[Scenario],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepReport> {
    let masks = if cfg.variant.uses_partial() {
        Some(sample_partial_masks(batch, &cfg.mask_schedule, rng)?)
    } else {
        None
    };
    let lg = loss_graph(
        model,
        batch,
        masks.as_deref(),
        cfg.variant,
        cfg.target_loss_all_modes,
    )?;
    if !lg.breakdown.total.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss after {} steps: {:?}",
            opt.steps(),
            lg.breakdown
        )));
    }
    let mut grads = lg.graph.backward(lg.total);
    let flat: Vec<Option<Vec<f64>>> = lg.params.vars().map(|v| grads.take(v)).collect();
    let grad_norm = opt.update(&mut model.stores_mut(), &flat).map_err(|e| {
        Error::Training(format!(
            "step {}: {e}; losses {:?}",
            opt.steps(),
            lg.breakdown
        ))
    })?;
    if !model.is_finite() {
        return Err(Error::Training(format!(
            "parameters became non-finite at step {}",
            opt.steps()
        )));
    }
    Ok(StepReport {
        breakdown: lg.breakdown,
        grad_norm,
        winners_full: lg.winners_full,
        winners_partial: lg.winners_partial,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

/// A trained model with its loss curve.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: TsdModel,
    pub variant: Variant,
    pub curve: Vec<CurvePoint>,
}

pub fn loss_curve_csv(curve: &[CurvePoint]) -> String {
    let mut out = format!("step,epoch,{}\n", LossBreakdown::CSV_HEADER);
    for p in curve {
        let _ = writeln!(out, "{},{},{}", p.step, p.epoch, p.loss.csv_fields());
    }
    out
}

impl Trained {
    /// Writes `ckpt.bin` (with its manifest) and `loss.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        crate::checkpoint::save(&self.model, Some(self.variant), &dir.join("ckpt.bin"))?;
        crate::checkpoint::write_atomic(
            &dir.join("loss.csv"),
            loss_curve_csv(&self.curve).as_bytes(),
        )
    }
}

/// Shuffled mini-batch training for `config.epochs` epochs.
pub fn train(dataset: &[Scenario], config: &TrainConfig) -> Result<Trained> {
    train_with(dataset, config, |_| {})
}

/// [`train`] with a callback after every step.
pub fn train_with(
    dataset: &[Scenario],
    config: &TrainConfig,
    mut on_step: impl FnMut(&CurvePoint),
) -> Result<Trained> {
    if dataset.is_empty() {
        return Err(argument("empty training set"));
    }
    config.validate()?;
    let mut model = TsdModel::init(config.model, config.seed)?;
    let mut opt = AdamW::new(config.optimizer, &model.stores());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = Vec::new();
    let total_steps = config.epochs * dataset.len().div_ceil(config.batch_size);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let first = curve.len();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Scenario> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            opt.set_lr_factor(config.lr_schedule.factor(curve.len(), total_steps));
            let report = train_step(&mut model, &mut opt, &batch, config, &mut rng)?;
            let point = CurvePoint {
                step: curve.len(),
                epoch,
                loss: report.breakdown,
            };
            on_step(&point);
            curve.push(point);
        }
        let steps = &curve[first..];
        if !steps.is_empty() {
            let mean = steps.iter().map(|p| p.loss.total).sum::<f64>() / steps.len() as f64;
            log::info!(
                "{} seed {} epoch {}: mean total {:.4}",
                config.variant,
                config.seed,
                epoch,
                mean
            );
        }
    }
    Ok(Trained {
        model,
        variant: config.variant,
        curve,
    })
}
