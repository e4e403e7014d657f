//! Plane-by-plane training of the aligner and the expert bank.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::encoder::{BackboneFeatures, LevelAdapter, LEVELS};
use crate::error::{Error, Result};
use crate::imaging::{augment, derive_seed, AugmentConfig, DatasetSplit, Image};
use crate::losses::{loss_ncc, loss_orth, loss_sim, loss_smooth, total_loss, ExpertPair, LossBundle, OrthVariant};
use crate::lra::cascade_align;
use crate::model::Model;
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Epochs per plane block.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the orthogonality penalty. Configured under `loss.lambda`.
    #[serde(skip)]
    pub lambda: f64,
    /// Plane names in training order; empty means corpus order.
    pub plane_order: Vec<String>,
    /// Configured under `loss.orth_variant`.
    #[serde(skip)]
    pub orth_variant: OrthVariant,
    /// Let the orthogonality penalty move every plane's `A`, not only the
    /// current one.
    pub orth_all_experts: bool,
    /// Checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 30,
            batch_size: 4,
            seed: 0,
            lambda: 0.5,
            plane_order: Vec::new(),
            orth_variant: OrthVariant::default(),
            orth_all_experts: false,
            checkpoint_every: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("loss.lambda must be non-negative"));
        }
        Ok(())
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        Self { m: Tensor::zeros(shape.to_vec()), v: Tensor::zeros(shape.to_vec()), t: 0 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState, lr: f64) -> Result<()> {
    param.expect_same_shape(grad)?;
    param.expect_same_shape(&state.m)?;
    param.expect_same_shape(&state.v)?;
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (i, p) in param.data_mut().iter_mut().enumerate() {
        let g = grad.data()[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Adam states keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        let state = self.states.entry(name.to_string()).or_insert_with(|| AdamState::new(param.shape()));
        adam_step(param, grad, state, lr)
    }
}

/// Mean loss components of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub plane: String,
    pub sim: f64,
    pub ncc: f64,
    pub smooth: f64,
    pub orth: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.epochs {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Gradients and loss values of one (anchor, query) pair.
struct PairGrads {
    loc: Vec<Tensor>,
    expert: Vec<[Tensor; 4]>,
    sim: f64,
    ncc: f64,
    smooth: f64,
}

impl PairGrads {
    fn accumulate(&mut self, other: &PairGrads) -> Result<()> {
        for (a, b) in self.loc.iter_mut().zip(&other.loc) {
            a.axpy(1.0, b)?;
        }
        for (a, b) in self.expert.iter_mut().zip(&other.expert) {
            for (x, y) in a.iter_mut().zip(b) {
                x.axpy(1.0, y)?;
            }
        }
        self.sim += other.sim;
        self.ncc += other.ncc;
        self.smooth += other.smooth;
        Ok(())
    }
}

/// Binds plane `plane`'s expert and the general expert on `tape`, returning
/// the per-level adapters and the bound leaves `[A_c, B_c, A_g, B_g]`.
fn bind_training_adapters<'t>(tape: &'t Tape, model: &Model, plane: usize) -> Result<(Vec<LevelAdapter<'t>>, Vec<[Var<'t>; 4]>)> {
    let mut adapters = Vec::with_capacity(LEVELS);
    let mut leaves = Vec::with_capacity(LEVELS);
    for bank in &model.oks.levels {
        let w = &bank.planes[plane].weights;
        let vars = [tape.param(&w.a), tape.param(&w.b), tape.param(&bank.general.a), tape.param(&bank.general.b)];
        let a = Var::concat(&[vars[0], vars[2]])?;
        let b = Var::concat_cols(&[vars[1], vars[3]])?;
        adapters.push(LevelAdapter { a, b, scale: model.oks.cfg.scale(bank.rank()) });
        leaves.push(vars);
    }
    Ok((adapters, leaves))
}

/// Registration losses of one pair with plane `plane`'s expert active,
/// recorded on `tape`.
#[allow(clippy::type_complexity)]
fn pair_forward<'t>(
    tape: &'t Tape,
    model: &Model,
    plane: usize,
    anchor: &BackboneFeatures,
    query: &BackboneFeatures,
) -> Result<(Var<'t>, [Var<'t>; 3], Vec<[Var<'t>; 6]>, Vec<[Var<'t>; 4]>)> {
    let (adapters, leaves) = bind_training_adapters(tape, model, plane)?;
    let ad = [Some(adapters[0]), Some(adapters[1]), Some(adapters[2])];
    let fa = model.encoder.extract(tape, anchor, &ad)?;
    let fb = model.encoder.extract(tape, query, &ad)?;
    let nets = model.aligner.bind(tape, true);
    let al = cascade_align(&nets, model.aligner.mode, model.aligner.warp_both, &fa, &fb)?;
    let sim = loss_sim(&al.a, &al.b)?;
    let ncc = loss_ncc(&al.a, &al.b)?;
    let smooth = loss_smooth(&al.thetas)?;
    let reg = sim.add(ncc)?.add(smooth)?;
    Ok((reg, [sim, ncc, smooth], nets.iter().map(|n| n.vars()).collect(), leaves))
}

fn pair_grads(model: &Model, plane: usize, anchor: &BackboneFeatures, query: &BackboneFeatures) -> Result<PairGrads> {
    let tape = Tape::new();
    let (reg, parts, nets, leaves) = pair_forward(&tape, model, plane, anchor, query)?;
    let [sim, ncc, smooth] = parts.map(|v| v.item());
    let loc_shapes: Vec<Vec<Vec<usize>>> = nets.iter().map(|n| n.iter().map(|v| v.shape()).collect()).collect();
    let leaf_shapes: Vec<Vec<Vec<usize>>> = leaves.iter().map(|l| l.iter().map(|v| v.shape()).collect()).collect();
    let grads = tape.backward(reg)?;
    let loc = nets
        .iter()
        .zip(&loc_shapes)
        .flat_map(|(n, s)| n.iter().zip(s).map(|(v, sh)| grads.get_or_zeros(*v, sh)).collect::<Vec<_>>())
        .collect();
    let expert = leaves.iter().zip(&leaf_shapes).map(|(l, s)| [0, 1, 2, 3].map(|k| grads.get_or_zeros(l[k], &s[k]))).collect();
    Ok(PairGrads { loc, expert, sim, ncc, smooth })
}

/// Orthogonality penalty and its gradient for each plane's `A` per level.
/// Only `plane`'s `A` is trainable unless `all`.
fn orth_grads(model: &Model, plane: usize, variant: OrthVariant, all: bool) -> Result<(f64, Vec<Vec<Option<Tensor>>>)> {
    let tape = Tape::new();
    let levels: Vec<Vec<ExpertPair<'_>>> = model
        .oks
        .levels
        .iter()
        .map(|bank| {
            bank.planes
                .iter()
                .map(|p| {
                    let trainable = all || p.plane == plane;
                    ExpertPair { a: tape.leaf(p.weights.a.clone(), trainable), b: tape.constant(p.weights.b.clone()) }
                })
                .collect()
        })
        .collect();
    let Some(loss) = loss_orth(&levels, variant)? else {
        return Ok((0.0, Vec::new()));
    };
    let value = loss.item();
    let grads = tape.backward(loss)?;
    let out = levels.iter().map(|l| l.iter().map(|e| grads.get(e.a).cloned()).collect()).collect();
    Ok((value, out))
}

/// Mean registration loss (`sim + ncc + smooth`) of `(anchor, query)` pairs
/// with each plane's expert active.
pub fn evaluate_reg(model: &Model, pairs: &[(usize, &Image, &Image)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::domain("no pairs to evaluate"));
    }
    let values = pairs
        .par_iter()
        .map(|(plane, a, b)| {
            let tape = Tape::new();
            let fa = model.encoder.backbone(a)?;
            let fb = model.encoder.backbone(b)?;
            Ok(pair_forward(&tape, model, *plane, &fa, &fb)?.0.item())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

fn plane_order(cfg: &TrainConfig, model: &Model) -> Result<Vec<usize>> {
    if cfg.plane_order.is_empty() {
        return Ok((0..model.planes.len()).collect());
    }
    let order = cfg.plane_order.iter().map(|n| model.plane_index(n)).collect::<Result<Vec<_>>>()?;
    let mut seen = order.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != order.len() {
        return Err(Error::config("train.plane_order lists a plane twice"));
    }
    Ok(order)
}

/// Trains `model` in place. `on_epoch` sees every epoch's log row and the
/// current model (for checkpointing).
pub fn train(
    cfg: &TrainConfig,
    data: &DatasetSplit,
    anchors: &AnchorSet,
    model: &mut Model,
    mut on_epoch: impl FnMut(&EpochLog, &Model) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let order = plane_order(cfg, model)?;
    let mut anchor_feats = Vec::with_capacity(model.planes.len());
    for c in 0..model.planes.len() {
        let imgs = anchors.images(data, c)?;
        anchor_feats.push(imgs.par_iter().map(|img| model.encoder.backbone(img)).collect::<Result<Vec<_>>>()?);
        if data.train.get(c).is_none_or(|t| t.is_empty()) {
            return Err(Error::config(format!("plane {:?} has no training images", model.planes[c])));
        }
    }

    let mut adam = Adam::default();
    let mut log = TrainLog::default();
    let literal = model.oks.cfg.literal_projection;
    for &c in &order {
        model.oks.snapshot_plane(c)?;
        let train_set = &data.train[c];
        for epoch in 0..cfg.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[c as u64, epoch as u64]));
            let mut items: Vec<usize> = (0..train_set.len()).collect();
            items.shuffle(&mut rng);
            let mut sums = LossBundle::default();
            let mut batches = 0usize;
            for batch in items.chunks(cfg.batch_size) {
                let jobs: Vec<(usize, u64)> = batch.iter().map(|_| (rng.random_range(0..anchor_feats[c].len()), rng.random())).collect();
                let per_item = batch
                    .par_iter()
                    .zip(&jobs)
                    .map(|(&i, &(anchor, aug_seed))| {
                        let query = augment(&train_set[i].1, &cfg.augment, aug_seed)?;
                        let qf = model.encoder.backbone(&query)?;
                        pair_grads(model, c, &anchor_feats[c][anchor], &qf)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mut iter = per_item.into_iter();
                let mut acc = iter.next().expect("non-empty batch");
                for g in iter {
                    acc.accumulate(&g)?;
                }
                let inv = 1.0 / batch.len() as f64;

                let (orth, orth_g) =
                    if model.planes.len() > 1 { orth_grads(model, c, cfg.orth_variant, cfg.orth_all_experts)? } else { (0.0, Vec::new()) };

                for (k, g) in acc.loc.iter().enumerate() {
                    let (l, slot) = (k / 6, k % 6);
                    let name = format!("lra.{l}.{slot}");
                    adam.step(&name, model.aligner.nets[l].params_mut()[slot], &g.scale(inv), cfg.lr)?;
                }
                for (l, g) in acc.expert.iter().enumerate() {
                    let mut ga = g[0].scale(inv);
                    if let Some(Some(og)) = orth_g.get(l).map(|v| &v[c]) {
                        ga.axpy(cfg.lambda, og)?;
                    }
                    let gb = g[1].scale(inv);
                    let expert = &mut model.oks.levels[l].planes[c].weights;
                    adam.step(&format!("oks.{l}.{c}.A"), &mut expert.a, &ga, cfg.lr)?;
                    adam.step(&format!("oks.{l}.{c}.B"), &mut expert.b, &gb, cfg.lr)?;
                    if cfg.orth_all_experts && cfg.lambda > 0.0 {
                        for (p, og) in orth_g[l].iter().enumerate() {
                            if let (true, Some(og)) = (p != c, og) {
                                let a = &mut model.oks.levels[l].planes[p].weights.a;
                                adam.step(&format!("oks.{l}.{p}.A"), a, &og.scale(cfg.lambda), cfg.lr)?;
                            }
                        }
                    }
                    model.oks.levels[l].update_general(&g[2].scale(inv), &g[3].scale(inv), cfg.lr, literal)?;
                }

                let b = total_loss(acc.sim * inv, acc.ncc * inv, acc.smooth * inv, orth, cfg.lambda);
                if !b.is_finite() {
                    return Err(Error::state(format!("non-finite loss at plane {c}, epoch {epoch}")));
                }
                sums.sim += b.sim;
                sums.ncc += b.ncc;
                sums.smooth += b.smooth;
                sums.orth += b.orth;
                sums.total += b.total;
                batches += 1;
            }
            let n = batches.max(1) as f64;
            let row = EpochLog {
                epoch,
                plane: model.planes[c].clone(),
                sim: sums.sim / n,
                ncc: sums.ncc / n,
                smooth: sums.smooth / n,
                orth: sums.orth / n,
                total: sums.total / n,
            };
            on_epoch(&row, model)?;
            log.epochs.push(row);
        }
        model.oks.commit_plane(c)?;
    }
    Ok(log)
}
