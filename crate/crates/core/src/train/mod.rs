//! Three-stage training with alternating discriminator and generator updates.
//!
//! Stage I fits the encoder and verification head on image pairs. Stage II
//! freezes both and trains the pose encoder, generator and the two
//! discriminators. Stage III fine-tunes everything jointly with the
//! encoder's batch norm fixed. In stages II and III each mini-batch gets one
//! discriminator update on detached generations followed by one update of
//! the generator side through discriminators whose weights are held constant.

mod checkpoint;
mod optim;
mod schedule;

use std::collections::BTreeMap;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointHeader, TensorEntry, FORMAT_VERSION, MAGIC};
pub use optim::{Optimizer, OptimizerHeader, OptimizerKind};
pub use schedule::{BlockRate, Decay, ScheduleOverride, Stage, StageSchedule};

use crate::autograd::{concat_rows, Graph, Var};
use crate::data::{assemble_batch, Dataset, PairBatch, PairSampler, Split};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_discriminator_loss, adversarial_generator_loss, reconstruction_loss, same_pose_loss, total_objective, verification_loss,
    weighted_objective, LossReport, LossWeights, ObjectiveTerms, Saturation,
};
use crate::models::{Group, IdentityHead, ModelConfig, Networks, Preset};
use crate::nn::NormMode;
use crate::pose::BandwidthRange;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_pairs: usize,
    pub positive_pairs: usize,
    /// Iterations per epoch; 0 means one pass of `ceil(train images / batch_pairs)`.
    pub iters_per_epoch: usize,
    /// Every epoch count of the schedule is divided by this.
    pub desk_factor: f64,
    /// Heatmap bandwidth range for the online pose-map augmentation.
    pub bandwidth: BandwidthRange,
    pub momentum: f64,
    pub adam_betas: [f64; 2],
    pub stage1: ScheduleOverride,
    pub stage2: ScheduleOverride,
    pub stage3: ScheduleOverride,
    /// Hash frozen weight groups around every half-step and fail on change.
    pub audit: bool,
    /// Ends every stage after this many iterations, leaving the learning-rate
    /// schedule untouched (smoke runs).
    pub max_iterations: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Schedules divided by four, 16-pair batches and fixed 16-iteration
    /// epochs: a one-pass epoch over 80 images would be 5 steps, too few
    /// for the rates to do anything within the shortened schedule.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            batch_pairs: 16,
            positive_pairs: 4,
            iters_per_epoch: 16,
            desk_factor: 4.0,
            bandwidth: BandwidthRange::default().scaled(64.0 / 256.0),
            momentum: 0.9,
            adam_betas: [0.5, 0.999],
            stage1: ScheduleOverride::default(),
            stage2: ScheduleOverride::default(),
            stage3: ScheduleOverride::default(),
            audit: true,
            max_iterations: None,
        }
    }

    pub fn full() -> Self {
        Self { batch_pairs: 128, positive_pairs: 32, iters_per_epoch: 0, desk_factor: 1.0, bandwidth: BandwidthRange::default(), ..Self::desk() }
    }

    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Full => Self::full(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_pairs == 0 || self.positive_pairs > self.batch_pairs {
            return Err(Error::Config(format!(
                "need 1 <= batch_pairs and positive_pairs <= batch_pairs, got {} / {}",
                self.batch_pairs, self.positive_pairs
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || !self.adam_betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(Error::Config("momentum and Adam betas must lie in [0, 1)".into()));
        }
        self.bandwidth.validate().map_err(|e| Error::Config(e.to_string()))?;
        for stage in Stage::ALL {
            self.schedule(stage)?;
        }
        Ok(())
    }

    pub fn schedule(&self, stage: Stage) -> Result<StageSchedule> {
        let over = match stage {
            Stage::I => &self.stage1,
            Stage::II => &self.stage2,
            Stage::III => &self.stage3,
        };
        StageSchedule::resolve(stage, over, self.desk_factor)
    }
}

/// Values emitted after every iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    /// 1-based epoch the iteration belongs to.
    pub epoch: usize,
    /// 1-based iteration within the stage.
    pub iteration: u64,
    pub losses: LossReport,
    pub lr: BTreeMap<Group, f64>,
    /// Training-batch verification accuracy (stage I only).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pair_accuracy: Option<f64>,
    pub saturation: u64,
}

/// Receives progress from [`Trainer::run`].
pub trait TrainSink<S: Scalar> {
    fn on_step(&mut self, _trainer: &Trainer<S>, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _trainer: &mut Trainer<S>, _ds: &Dataset) -> Result<()> {
        Ok(())
    }
}

pub struct NullSink;

impl<S: Scalar> TrainSink<S> for NullSink {}

/// Appends one JSON object per iteration.
pub struct JsonlLog<W: Write> {
    pub out: W,
}

impl<S: Scalar, W: Write> TrainSink<S> for JsonlLog<W> {
    fn on_step(&mut self, _trainer: &Trainer<S>, record: &StepRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    fn on_epoch_end(&mut self, _trainer: &mut Trainer<S>, _ds: &Dataset) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Training state of one stage: weights, optimizers, counters and rng.
pub struct Trainer<S: Scalar> {
    pub nets: Networks<S>,
    pub config: TrainConfig,
    pub weights: LossWeights,
    pub schedule: StageSchedule,
    /// Iterations completed in this stage.
    pub iteration: u64,
    pub saturation: Saturation,
    rng: ChaCha8Rng,
    optimizers: BTreeMap<Group, Optimizer<S>>,
    /// Sorted training identities; position is the class index.
    classes: Vec<usize>,
    iters_per_epoch: usize,
}

const PROBE_DROPOUT_SEED: u64 = 0x5eed;

pub(crate) fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn train_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn digests<S: Scalar>(nets: &Networks<S>, groups: &[Group]) -> Vec<(Group, [u8; 32])> {
    groups.iter().map(|&g| (g, nets.group_digest(g))).collect()
}

fn norm_digest<S: Scalar>(nets: &Networks<S>) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in nets.encoder.norm_state() {
        h.update(p.name().as_bytes());
        p.value().update_digest(&mut h);
    }
    h.finalize().into()
}

fn audit<S: Scalar>(nets: &Networks<S>, before: &[(Group, [u8; 32])], what: &str) -> Result<()> {
    for &(g, d) in before {
        if nets.group_digest(g) != d {
            return Err(Error::ContractViolation(format!("{what} changed frozen group {}", g.tag())));
        }
    }
    Ok(())
}

fn item<S: Scalar>(v: Var<'_, S>) -> f64 {
    v.item().as_f64()
}

impl<S: Scalar> Trainer<S> {
    /// Fresh stage-I trainer.
    pub fn start(model: &ModelConfig, config: &TrainConfig, weights: &LossWeights, ds: &Dataset) -> Result<Self> {
        config.validate()?;
        weights.validate()?;
        let mut model = model.clone();
        let classes = ds.split(Split::Train).identities();
        if model.single_branch_classifier {
            model.num_classes = classes.len();
        }
        let nets = Networks::new(&model, &mut init_rng(config.seed))?;
        let mut t = Self::assemble(nets, config.clone(), *weights, Stage::I, train_rng(config.seed), classes)?;
        t.iters_per_epoch = t.derive_iters(ds);
        Ok(t)
    }

    fn assemble(nets: Networks<S>, config: TrainConfig, weights: LossWeights, stage: Stage, rng: ChaCha8Rng, classes: Vec<usize>) -> Result<Self> {
        let schedule = config.schedule(stage)?;
        let [b1, b2] = config.adam_betas;
        let optimizers = schedule
            .blocks
            .iter()
            .map(|(&g, b)| {
                let opt = match b.kind {
                    OptimizerKind::Sgd => Optimizer::sgd(config.momentum),
                    OptimizerKind::Adam => Optimizer::adam(b1, b2),
                };
                (g, opt)
            })
            .collect();
        Ok(Self { nets, config, weights, schedule, iteration: 0, saturation: Saturation::default(), rng, optimizers, classes, iters_per_epoch: 0 })
    }

    fn derive_iters(&self, ds: &Dataset) -> usize {
        if self.config.iters_per_epoch > 0 {
            return self.config.iters_per_epoch;
        }
        let n = ds.samples.iter().filter(|s| s.split == Split::Train).count();
        n.div_ceil(self.config.batch_pairs).max(1)
    }

    pub fn stage(&self) -> Stage {
        self.schedule.stage
    }

    pub fn model(&self) -> &ModelConfig {
        &self.nets.config
    }

    pub fn iters_per_epoch(&self) -> usize {
        self.iters_per_epoch
    }

    pub fn total_iterations(&self) -> u64 {
        let n = (self.schedule.epoch_count() * self.iters_per_epoch) as u64;
        self.config.max_iterations.map_or(n, |m| m.min(n))
    }

    /// Completed epochs in this stage.
    pub fn epoch(&self) -> usize {
        (self.iteration / self.iters_per_epoch as u64) as usize
    }

    pub fn completed(&self) -> bool {
        self.iteration >= self.total_iterations()
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    fn lr(&self, g: Group) -> f64 {
        self.schedule.lr(g, self.epoch() + 1)
    }

    // -- checkpoints --------------------------------------------------------

    fn stored_groups(&self) -> Vec<Group> {
        match self.stage() {
            Stage::I => vec![Group::E, Group::V],
            _ => Group::ALL.to_vec(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint<S> {
        let mut entries = Vec::new();
        let mut tensors = BTreeMap::new();
        let groups = self.stored_groups();
        for &g in &groups {
            for p in self.nets.group_state(g) {
                entries.push(TensorEntry { name: p.name().to_string(), shape: p.value().shape().to_vec() });
                tensors.insert(p.name().to_string(), p.value().clone());
            }
        }
        let mut optimizers = BTreeMap::new();
        for (&g, opt) in &self.optimizers {
            for (slot, t) in &opt.slots {
                let name = format!("opt/{}/{slot}", g.tag());
                entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec() });
                tensors.insert(name, t.clone());
            }
            optimizers.insert(g, opt.header.clone());
        }
        let header = CheckpointHeader {
            dtype: S::DTYPE.to_string(),
            stage: self.stage(),
            completed: self.completed(),
            epoch: self.epoch(),
            iteration: self.iteration,
            model: self.nets.config.clone(),
            train: self.config.clone(),
            losses: self.weights,
            rng: self.rng.clone(),
            saturation: self.saturation,
            groups,
            optimizers,
            classes: self.classes.clone(),
            tensors: entries,
        };
        Checkpoint { header, tensors }
    }

    /// Continues the stage a checkpoint was taken in.
    pub fn resume(ckpt: &Checkpoint<S>, ds: &Dataset) -> Result<Self> {
        let h = &ckpt.header;
        let nets = ckpt.networks()?;
        let mut t = Self::assemble(nets, h.train.clone(), h.losses, h.stage, h.rng.clone(), h.classes.clone())?;
        for (g, oh) in &h.optimizers {
            let opt = t.optimizers.get_mut(g).ok_or_else(|| Error::Checkpoint(format!("unexpected optimizer for {}", g.tag())))?;
            *opt = Optimizer::with(oh.clone());
            let prefix = format!("opt/{}/", g.tag());
            for (name, tensor) in ckpt.tensors.range(prefix.clone()..) {
                let Some(slot) = name.strip_prefix(&prefix) else { break };
                opt.slots.insert(slot.to_string(), tensor.clone());
            }
        }
        t.iteration = h.iteration;
        t.saturation = h.saturation;
        t.iters_per_epoch = t.derive_iters(ds);
        Ok(t)
    }

    /// Starts `stage` from a completed checkpoint of the stage before it.
    ///
    /// Groups absent from the checkpoint are initialized from the seed. On
    /// entering stage II the identity discriminator's backbone is copied from
    /// the encoder.
    pub fn next_stage(ckpt: &Checkpoint<S>, stage: Stage, config: &TrainConfig, weights: &LossWeights, ds: &Dataset) -> Result<Self> {
        let h = &ckpt.header;
        let want = stage.previous().ok_or_else(|| Error::InvalidArgument("stage I starts from scratch, not from a checkpoint".into()))?;
        if h.stage != want {
            return Err(Error::Checkpoint(format!("stage {stage} needs a stage-{want} checkpoint, got stage {}", h.stage)));
        }
        if !h.completed {
            return Err(Error::Checkpoint(format!("stage-{want} checkpoint is incomplete (epoch {})", h.epoch)));
        }
        if h.model.single_branch_classifier {
            return Err(Error::Config("the single-branch classifier baseline trains stage I only".into()));
        }
        config.validate()?;
        weights.validate()?;
        let mut nets = ckpt.networks()?;
        if stage == Stage::II {
            nets.init_id_disc_from_encoder();
        }
        let mut t = Self::assemble(nets, config.clone(), *weights, stage, h.rng.clone(), h.classes.clone())?;
        t.iters_per_epoch = t.derive_iters(ds);
        Ok(t)
    }

    // -- steps --------------------------------------------------------------

    /// Runs the remaining iterations of the stage.
    pub fn run(&mut self, ds: &Dataset, sink: &mut dyn TrainSink<S>) -> Result<()> {
        let sampler = PairSampler::new(ds, self.stage() != Stage::I);
        while !self.completed() {
            let record = self.step(ds, &sampler)?;
            sink.on_step(self, &record)?;
            if self.iteration % self.iters_per_epoch as u64 == 0 {
                sink.on_epoch_end(self, ds)?;
            }
        }
        Ok(())
    }

    /// One iteration of the current stage.
    pub fn step(&mut self, ds: &Dataset, sampler: &PairSampler) -> Result<StepRecord> {
        let epoch = self.epoch() + 1;
        let lr: BTreeMap<Group, f64> = self.schedule.blocks.keys().map(|&g| (g, self.lr(g))).collect();
        let (losses, pair_accuracy) = match self.stage() {
            Stage::I => {
                let (r, acc) = self.verification_step(ds, sampler)?;
                (r, Some(acc))
            }
            _ => {
                let idx = sampler.sample(self.config.batch_pairs, self.config.positive_pairs, &mut self.rng)?;
                let batch = assemble_batch(ds, idx, self.config.bandwidth, self.nets.config.noise_dim, &mut self.rng)?;
                (self.alternate_step(&batch)?, None)
            }
        };
        self.iteration += 1;
        Ok(StepRecord { stage: self.stage(), epoch, iteration: self.iteration, losses, lr, pair_accuracy, saturation: self.saturation.count })
    }

    fn class_labels(&self, ds: &Dataset, idx: &[usize]) -> Result<Vec<usize>> {
        idx.iter()
            .map(|&i| {
                let id = ds.samples[i].identity;
                self.classes.binary_search(&id).map_err(|_| Error::InvalidArgument(format!("identity {id} has no class")))
            })
            .collect()
    }

    /// Identity loss on encoder features of `[x1; x2]`: verification BCE or,
    /// for the single-branch ablation, cross-entropy over training identities.
    fn identity_loss<'g>(
        &mut self,
        g: &'g Graph<S>,
        feats: Var<'g, S>,
        same: &[bool],
        labels: Option<&[usize]>,
        mode: NormMode,
    ) -> Result<(Var<'g, S>, Option<Tensor<S>>)> {
        let n = same.len();
        match &mut self.nets.head {
            IdentityHead::Verification(h) => {
                let d = h.forward(g, feats.slice_rows(0, n), feats.slice_rows(n, 2 * n), mode);
                let loss = verification_loss(d, same, &mut self.saturation)?;
                Ok((loss, Some((*d.value()).clone())))
            }
            IdentityHead::Classification(lin) => {
                let labels = labels.ok_or_else(|| Error::InvalidArgument("classifier needs labels".into()))?;
                let logits = lin.forward(g, feats);
                Ok((logits.cross_entropy(labels), None))
            }
        }
    }

    fn verification_step(&mut self, ds: &Dataset, sampler: &PairSampler) -> Result<(LossReport, f64)> {
        let idx = sampler.sample(self.config.batch_pairs, self.config.positive_pairs, &mut self.rng)?;
        let all: Vec<usize> = idx.first.iter().chain(&idx.second).copied().collect();
        let labels = if self.nets.config.single_branch_classifier { Some(self.class_labels(ds, &all)?) } else { None };
        let g = Graph::new();
        let x = g.constant(ds.images::<S>(&all));
        let feats = self.nets.encoder.forward(&g, x, NormMode::Train);
        let (loss, probs) = self.identity_loss(&g, feats, &idx.same, labels.as_deref(), NormMode::Train)?;
        let report = LossReport { l_v: item(loss), ..Default::default() }.with_total(&self.weights)?;
        report.check_finite()?;
        let grads = g.backward(loss);
        let (lr_e, lr_v) = (self.lr(Group::E), self.lr(Group::V));
        self.optimizers.get_mut(&Group::E).unwrap().step(self.nets.group_params_mut(Group::E), &grads, lr_e);
        self.optimizers.get_mut(&Group::V).unwrap().step(self.nets.group_params_mut(Group::V), &grads, lr_v);
        let acc = match probs {
            Some(p) => p.data().iter().zip(&idx.same).filter(|(&d, &s)| (d.as_f64() > 0.5) == s).count() as f64 / idx.same.len() as f64,
            None => f64::NAN,
        };
        Ok((report, acc))
    }

    /// One discriminator update, then one generator-side update, on `batch`.
    ///
    /// Positive pairs must come first in the batch. With `config.audit` the
    /// weight groups each half-step must not touch are hashed before and after.
    pub fn alternate_step(&mut self, batch: &PairBatch<S>) -> Result<LossReport> {
        let stage = self.stage();
        if stage == Stage::I {
            return Err(Error::InvalidArgument("alternating steps need stage II or III".into()));
        }
        let n = batch.len();
        let pos = batch.positives();
        if batch.indices.same[..pos].iter().any(|s| !s) {
            return Err(Error::InvalidArgument("positive pairs must lead the batch".into()));
        }
        let joint = stage == Stage::III;
        let e_mode = if joint { NormMode::Frozen } else { NormMode::Eval };
        let v_mode = if joint { NormMode::Train } else { NormMode::Eval };
        let shared = self.nets.id_disc.backbone.is_none();
        let check = self.config.audit;
        let frozen_groups: Vec<Group> = Group::ALL.into_iter().filter(|g| !self.schedule.trains(*g)).collect();

        // generator-side forward, kept for the G-step
        let gg = Graph::new();
        let x12 = Tensor::stack_rows(&[&batch.x1, &batch.x2])?;
        let emb = if joint {
            self.nets.encoder.forward(&gg, gg.constant(x12.clone()), e_mode)
        } else {
            gg.frozen(|| self.nets.encoder.forward(&gg, gg.constant(x12.clone()), e_mode))
        };
        let pose = gg.constant(batch.target_pose.clone());
        let pf = self.nets.pose_encoder.forward(&gg, pose, NormMode::Train);
        let z = gg.constant(batch.noise.clone());
        let y = self.nets.generator.forward(&gg, emb, concat_rows(&[pf, pf]), concat_rows(&[z, z]), NormMode::Train, Some(&mut self.rng));
        let (y1, y2) = (y.slice_rows(0, n), y.slice_rows(n, 2 * n));

        // ---- D-step on detached generations
        let before_d = if check { digests(&self.nets, &[Group::E, Group::G, Group::V]) } else { vec![] };
        let (l_id_d, l_pd_d) = {
            let gd = Graph::new();
            let fakes = (*y.value()).clone();
            let imgs = Tensor::stack_rows(&[&x12, &batch.truth, &fakes])?;
            let f = if shared {
                gd.frozen(|| self.nets.encoder.forward(&gd, gd.constant(imgs), e_mode))
            } else {
                self.nets.id_disc_features(&gd, gd.constant(imgs), NormMode::Train)
            };
            let (fx1, fx2, ft) = (f.slice_rows(0, n), f.slice_rows(n, 2 * n), f.slice_rows(2 * n, 3 * n));
            let (fy1, fy2) = (f.slice_rows(3 * n, 4 * n), f.slice_rows(4 * n, 5 * n));
            let mut a = vec![fx1];
            let mut b = vec![ft];
            if pos > 0 {
                a.push(fx2.slice_rows(0, pos));
                b.push(ft.slice_rows(0, pos));
            }
            a.extend([fx1, fx2]);
            b.extend([fy1, fy2]);
            let s = self.nets.id_disc.head.forward(&gd, concat_rows(&a), concat_rows(&b), NormMode::Train);
            let mut real = vec![s.slice_rows(0, n)];
            if pos > 0 {
                real.push(s.slice_rows(n, n + pos));
            }
            let fake = [s.slice_rows(n + pos, 2 * n + pos), s.slice_rows(2 * n + pos, 3 * n + pos)];
            let eps = self.weights.label_smoothing;
            let l_id = adversarial_discriminator_loss(&real, &fake, eps, &mut self.saturation)?;

            let pd_imgs = gd.constant(Tensor::stack_rows(&[&batch.truth, &fakes])?);
            let pd_pose = gd.constant(Tensor::stack_rows(&[&batch.target_pose, &batch.target_pose, &batch.target_pose])?);
            let m = self.nets.pose_disc.forward(&gd, pd_imgs, pd_pose, NormMode::Train);
            let mut real = vec![m.slice_rows(0, n)];
            if pos > 0 {
                // y'_2 equals the target image, so its real score repeats branch 1's
                real.push(m.slice_rows(0, pos));
            }
            let fake = [m.slice_rows(n, 2 * n), m.slice_rows(2 * n, 3 * n)];
            let l_pd = adversarial_discriminator_loss(&real, &fake, eps, &mut self.saturation)?;
            let (vi, vp) = (item(l_id), item(l_pd));
            for (term, v) in [("L_id_D", vi), ("L_pd_D", vp)] {
                if !v.is_finite() {
                    return Err(Error::Divergence { term: term.into(), value: v });
                }
            }
            let grads = gd.backward(l_id.add(l_pd));
            if check {
                for grp in [Group::E, Group::G, Group::V] {
                    if self.nets.group_params(grp).iter().any(|p| grads.param(p).is_some()) {
                        return Err(Error::ContractViolation(format!("discriminator loss produced gradients for {}", grp.tag())));
                    }
                }
            }
            for grp in [Group::DId, Group::DPd] {
                let lr = self.lr(grp);
                self.optimizers.get_mut(&grp).unwrap().step(self.nets.group_params_mut(grp), &grads, lr);
            }
            (vi, vp)
        };
        if check {
            audit(&self.nets, &before_d, "discriminator step")?;
        }

        // ---- G-step through discriminators with constant weights
        let mut frozen_after = frozen_groups.clone();
        frozen_after.extend([Group::DId, Group::DPd]);
        let before_g = if check { digests(&self.nets, &frozen_after) } else { vec![] };
        let norm_before = (check && joint).then(|| norm_digest(&self.nets));
        let eps_pos = pos > 0;
        let (l_id, l_pd) = {
            let x = gg.constant(x12.clone());
            let imgs = concat_rows(&[x, y]);
            let f = gg.frozen(|| {
                if shared {
                    self.nets.encoder.forward(&gg, imgs, e_mode)
                } else {
                    self.nets.id_disc_features(&gg, imgs, NormMode::TrainNoTrack)
                }
            });
            let s = gg.frozen(|| self.nets.id_disc.head.forward(&gg, f.slice_rows(0, 2 * n), f.slice_rows(2 * n, 4 * n), NormMode::TrainNoTrack));
            let l_id = adversarial_generator_loss(&[s.slice_rows(0, n), s.slice_rows(n, 2 * n)], &mut self.saturation)?;
            let poses = gg.constant(Tensor::stack_rows(&[&batch.target_pose, &batch.target_pose])?);
            let m = gg.frozen(|| self.nets.pose_disc.forward(&gg, y, poses, NormMode::TrainNoTrack));
            let l_pd = adversarial_generator_loss(&[m.slice_rows(0, n), m.slice_rows(n, 2 * n)], &mut self.saturation)?;
            (l_id, l_pd)
        };
        let truth = gg.constant(batch.truth.clone());
        let mut l_r = reconstruction_loss(y1, truth)?;
        let mut l_sp = None;
        if eps_pos {
            let y2p = y2.slice_rows(0, pos);
            l_r = l_r.add(reconstruction_loss(y2p, truth.slice_rows(0, pos))?);
            l_sp = Some(same_pose_loss(y1.slice_rows(0, pos), y2p, &batch.indices.same[..pos])?);
        }
        let labels = None;
        let same = batch.indices.same.clone();
        let l_v = if joint {
            self.identity_loss(&gg, emb, &same, labels, v_mode)?.0
        } else {
            let emb_c = emb.detach();
            gg.frozen(|| self.identity_loss(&gg, emb_c, &same, labels, v_mode))?.0
        };
        let report = LossReport {
            l_v: item(l_v),
            l_id_d,
            l_id_g: item(l_id),
            l_pd_d,
            l_pd_g: item(l_pd),
            l_r: item(l_r),
            l_sp: l_sp.map_or(0.0, item),
            total: 0.0,
        };
        let report = LossReport { total: total_objective(&report, &self.weights)?, ..report };
        report.check_finite()?;
        let terms = ObjectiveTerms { v: Some(l_v), id: Some(l_id), pd: Some(l_pd), r: Some(l_r), sp: l_sp };
        let objective = weighted_objective(&terms, &self.weights).expect("objective has terms");
        let grads = gg.backward(objective);
        for grp in [Group::E, Group::G, Group::V] {
            if self.schedule.trains(grp) {
                let lr = self.lr(grp);
                self.optimizers.get_mut(&grp).unwrap().step(self.nets.group_params_mut(grp), &grads, lr);
            }
        }
        if check {
            audit(&self.nets, &before_g, "generator step")?;
            if let Some(d) = norm_before {
                if norm_digest(&self.nets) != d {
                    return Err(Error::ContractViolation("encoder batch norm changed during stage III".into()));
                }
            }
        }
        Ok(report)
    }

    // -- probes -------------------------------------------------------------

    /// Verification accuracy (threshold 0.5) on freshly drawn training pairs, eval mode.
    pub fn pair_accuracy(&mut self, ds: &Dataset, pairs: usize, positives: usize, seed: u64) -> Result<f64> {
        let sampler = PairSampler::new(ds, false);
        let idx = sampler.sample(pairs, positives, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let e1 = self.nets.encode(&ds.images(&idx.first))?;
        let e2 = self.nets.encode(&ds.images(&idx.second))?;
        let d = self.nets.verify(&e1, &e2)?;
        Ok(d.data().iter().zip(&idx.same).filter(|(&p, &s)| (p.as_f64() > 0.5) == s).count() as f64 / pairs as f64)
    }

    /// Reconstruction loss of a fixed batch, computed the way the G-step sees
    /// it: batch statistics in the generator (nothing tracked) and a dropout
    /// mask drawn from a fixed seed, so repeated probes are comparable.
    /// Running statistics lag the weights early in stage II, which makes an
    /// eval-mode probe jump around while the training loss is still falling.
    pub fn probe_reconstruction(&mut self, batch: &PairBatch<S>) -> Result<f64> {
        let n = batch.len();
        let pos = batch.positives();
        let g = Graph::new();
        let x12 = Tensor::stack_rows(&[&batch.x1, &batch.x2])?;
        let mut mask_rng = ChaCha8Rng::seed_from_u64(PROBE_DROPOUT_SEED);
        let y = g.frozen(|| {
            let emb = self.nets.encoder.forward(&g, g.constant(x12), NormMode::Eval);
            let pf = self.nets.pose_encoder.forward(&g, g.constant(batch.target_pose.clone()), NormMode::TrainNoTrack);
            let z = g.constant(batch.noise.clone());
            self.nets.generator.forward(&g, emb, concat_rows(&[pf, pf]), concat_rows(&[z, z]), NormMode::TrainNoTrack, Some(&mut mask_rng))
        });
        let truth = g.constant(batch.truth.clone());
        let mut l = item(reconstruction_loss(y.slice_rows(0, n), truth)?);
        if pos > 0 {
            l += item(reconstruction_loss(y.slice_rows(n, n + pos), truth.slice_rows(0, pos))?);
        }
        Ok(l)
    }

    pub fn state_digest(&self, group: Group) -> [u8; 32] {
        self.nets.group_digest(group)
    }

    pub fn encoder_norm_digest(&self) -> [u8; 32] {
        norm_digest(&self.nets)
    }

    pub fn optimizer(&self, group: Group) -> Option<&Optimizer<S>> {
        self.optimizers.get(&group)
    }
}

/// Trains stage I from scratch.
pub fn run_stage1<S: Scalar>(
    ds: &Dataset,
    model: &ModelConfig,
    config: &TrainConfig,
    weights: &LossWeights,
    sink: &mut dyn TrainSink<S>,
) -> Result<Trainer<S>> {
    let mut t = Trainer::start(model, config, weights, ds)?;
    t.run(ds, sink)?;
    Ok(t)
}

/// Trains stage II from a completed stage-I checkpoint.
pub fn run_stage2<S: Scalar>(
    ds: &Dataset,
    stage1: &Checkpoint<S>,
    config: &TrainConfig,
    weights: &LossWeights,
    sink: &mut dyn TrainSink<S>,
) -> Result<Trainer<S>> {
    let mut t = Trainer::next_stage(stage1, Stage::II, config, weights, ds)?;
    t.run(ds, sink)?;
    Ok(t)
}

/// Trains stage III from a completed stage-II checkpoint.
pub fn run_stage3<S: Scalar>(
    ds: &Dataset,
    stage2: &Checkpoint<S>,
    config: &TrainConfig,
    weights: &LossWeights,
    sink: &mut dyn TrainSink<S>,
) -> Result<Trainer<S>> {
    let mut t = Trainer::next_stage(stage2, Stage::III, config, weights, ds)?;
    t.run(ds, sink)?;
    Ok(t)
}
