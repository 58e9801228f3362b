//! Encoder, generator, verification head and the two discriminators.
//!
//! Every block exposes a graph-level `forward` used by training and an
//! eval-mode convenience method on [`Networks`] that validates shapes and
//! returns plain tensors.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autograd::{concat_features, ConvSpec, Graph, Param, Var};
use crate::error::{Error, Result};
use crate::nn::{dropout, BatchNorm, Conv2d, ConvBnRelu, Linear, Module, NormMode};
use crate::pose::NUM_JOINTS;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 50-layer residual backbone at 256x128.
    Full,
    /// Small convolutional stack at 64x32.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Preset,
    pub embed_dim: usize,
    pub pose_feat_dim: usize,
    pub noise_dim: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub dropout: f64,
    /// Identity discriminator reuses the image encoder's backbone.
    pub share_encoder_with_id_disc: bool,
    /// Identity classification head with cross-entropy instead of the pair head.
    pub single_branch_classifier: bool,
    /// Class count of the classification head; 0 when unused.
    #[serde(default)]
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            embed_dim: 128,
            pose_feat_dim: 32,
            noise_dim: 64,
            image_height: 64,
            image_width: 32,
            dropout: 0.5,
            share_encoder_with_id_disc: false,
            single_branch_classifier: false,
            num_classes: 0,
        }
    }

    pub fn full() -> Self {
        Self {
            preset: Preset::Full,
            embed_dim: 2048,
            pose_feat_dim: 128,
            noise_dim: 256,
            image_height: 256,
            image_width: 128,
            ..Self::desk()
        }
    }

    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Full => Self::full(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.pose_feat_dim == 0 || self.noise_dim == 0 {
            return bad("model dimensions must be >= 1".into());
        }
        if self.image_height % 32 != 0 || self.image_width % 32 != 0 || self.image_height == 0 || self.image_width == 0 {
            return bad(format!(
                "image size {}x{} must be a positive multiple of 32 in both axes",
                self.image_height, self.image_width
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout));
        }
        if self.preset == Preset::Full && self.embed_dim != 2048 {
            return bad("the full preset's residual backbone emits 2048-dimensional embeddings".into());
        }
        if self.single_branch_classifier && self.num_classes < 2 {
            return bad("single-branch classifier needs num_classes >= 2".into());
        }
        Ok(())
    }

    fn widths(&self) -> Widths {
        match self.preset {
            Preset::Desk => Widths {
                encoder: vec![16, 32, 64, 96],
                pose: vec![16, 32, 32, 32],
                gen_seed: 64,
                gen: vec![64, 48, 32, 16, 8],
                pose_disc: vec![16, 32, 64, 64],
            },
            Preset::Full => Widths {
                encoder: vec![],
                pose: vec![32, 64, 128, 128],
                gen_seed: 512,
                gen: vec![512, 256, 128, 64, 32],
                pose_disc: vec![64, 128, 256, 512],
            },
        }
    }
}

struct Widths {
    /// Stem and first three downsampling stages; the last stage emits `embed_dim`.
    encoder: Vec<usize>,
    /// First four pose blocks; the fifth emits `pose_feat_dim`.
    pose: Vec<usize>,
    gen_seed: usize,
    gen: Vec<usize>,
    pose_disc: Vec<usize>,
}

// ---------------------------------------------------------------------------
// Backbones

/// Bottleneck residual unit (1x1, 3x3, 1x1).
#[derive(Clone, Debug)]
pub struct Bottleneck<S> {
    reduce: ConvBnRelu<S>,
    spatial: ConvBnRelu<S>,
    expand: Conv2d<S>,
    expand_bn: BatchNorm<S>,
    shortcut: Option<(Conv2d<S>, BatchNorm<S>)>,
}

impl<S: Scalar> Bottleneck<S> {
    fn new<R: Rng + ?Sized>(name: &str, cin: usize, width: usize, stride: usize, rng: &mut R) -> Self {
        let cout = width * 4;
        // zero last-BN scale: each unit starts as its shortcut, keeping 16 stacked units tame
        let mut expand_bn = BatchNorm::new(&format!("{name}.c.bn"), cout);
        expand_bn.gamma.set(Tensor::zeros(&[cout]));
        Self {
            reduce: ConvBnRelu::new(&format!("{name}.a"), cin, width, ConvSpec::new(1, 1, 0), rng),
            spatial: ConvBnRelu::new(&format!("{name}.b"), width, width, ConvSpec::new(3, stride, 1), rng),
            expand: Conv2d::new(&format!("{name}.c.conv"), width, cout, ConvSpec::new(1, 1, 0), false, rng),
            expand_bn,
            shortcut: (stride != 1 || cin != cout).then(|| {
                (
                    Conv2d::new(&format!("{name}.down.conv"), cin, cout, ConvSpec::new(1, stride, 0), false, rng),
                    BatchNorm::new(&format!("{name}.down.bn"), cout),
                )
            }),
        }
    }

    fn forward<'g>(&mut self, g: &'g Graph<S>, x: Var<'g, S>, mode: NormMode) -> Var<'g, S> {
        let h = self.reduce.forward(g, x, mode);
        let h = self.spatial.forward(g, h, mode);
        let h = self.expand.forward(g, h);
        let h = self.expand_bn.forward(g, h, mode);
        let skip = match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(g, x);
                bn.forward(g, s, mode)
            }
            None => x,
        };
        h.add(skip).relu()
    }

    fn modules(&self) -> Vec<&dyn Module<S>> {
        let mut v: Vec<&dyn Module<S>> = vec![&self.reduce, &self.spatial, &self.expand, &self.expand_bn];
        if let Some((c, b)) = &self.shortcut {
            v.push(c);
            v.push(b);
        }
        v
    }

    fn modules_mut(&mut self) -> Vec<&mut dyn Module<S>> {
        let mut v: Vec<&mut dyn Module<S>> = vec![&mut self.reduce, &mut self.spatial, &mut self.expand, &mut self.expand_bn];
        if let Some((c, b)) = &mut self.shortcut {
            v.push(c);
            v.push(b);
        }
        v
    }
}

/// Image feature extractor ending in global average pooling.
#[derive(Clone, Debug)]
pub enum Backbone<S> {
    /// Stem plus four stride-2 conv-BN-ReLU stages.
    Desk { blocks: Vec<ConvBnRelu<S>> },
    /// ResNet-50 layout: 7x7 stem, max pool, bottleneck stages [3, 4, 6, 3].
    Residual { stem: ConvBnRelu<S>, units: Vec<Bottleneck<S>> },
}

impl<S: Scalar> Backbone<S> {
    fn new<R: Rng + ?Sized>(name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        match cfg.preset {
            Preset::Desk => {
                let w = cfg.widths().encoder;
                let mut blocks = vec![ConvBnRelu::new(&format!("{name}.stem"), 3, w[0], ConvSpec::new(3, 1, 1), rng)];
                let mut cin = w[0];
                for (i, &cout) in w[1..].iter().chain(std::iter::once(&cfg.embed_dim)).enumerate() {
                    blocks.push(ConvBnRelu::new(&format!("{name}.stage{}", i + 1), cin, cout, ConvSpec::new(3, 2, 1), rng));
                    cin = cout;
                }
                Backbone::Desk { blocks }
            }
            Preset::Full => {
                let stem = ConvBnRelu::new(&format!("{name}.stem"), 3, 64, ConvSpec::new(7, 2, 3), rng);
                let mut units = Vec::new();
                let mut cin = 64;
                for (stage, (&depth, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
                    for i in 0..depth {
                        let stride = if i == 0 && stage > 0 { 2 } else { 1 };
                        units.push(Bottleneck::new(&format!("{name}.layer{}.{}", stage + 1, i), cin, width, stride, rng));
                        cin = width * 4;
                    }
                }
                Backbone::Residual { stem, units }
            }
        }
    }

    /// `(N, 3, H, W) -> (N, D)`.
    pub fn forward<'g>(&mut self, g: &'g Graph<S>, x: Var<'g, S>, mode: NormMode) -> Var<'g, S> {
        match self {
            Backbone::Desk { blocks } => {
                let mut h = x;
                for b in blocks.iter_mut() {
                    h = b.forward(g, h, mode);
                }
                h.global_avg_pool()
            }
            Backbone::Residual { stem, units } => {
                let mut h = stem.forward(g, x, mode).max_pool2d(ConvSpec::new(3, 2, 1));
                for u in units.iter_mut() {
                    h = u.forward(g, h, mode);
                }
                h.global_avg_pool()
            }
        }
    }

    fn modules(&self) -> Vec<&dyn Module<S>> {
        match self {
            Backbone::Desk { blocks } => blocks.iter().map(|b| b as &dyn Module<S>).collect(),
            Backbone::Residual { stem, units } => {
                let mut v: Vec<&dyn Module<S>> = vec![stem];
                for u in units {
                    v.extend(u.modules());
                }
                v
            }
        }
    }

    fn modules_mut(&mut self) -> Vec<&mut dyn Module<S>> {
        match self {
            Backbone::Desk { blocks } => blocks.iter_mut().map(|b| b as &mut dyn Module<S>).collect(),
            Backbone::Residual { stem, units } => {
                let mut v: Vec<&mut dyn Module<S>> = vec![stem];
                for u in units {
                    v.extend(u.modules_mut());
                }
                v
            }
        }
    }

    /// Batch-norm parameters and running statistics.
    pub fn norm_state(&self) -> Vec<&Param<S>> {
        self.state().into_iter().filter(|p| p.name().contains(".bn.")).collect()
    }
}

impl<S: Scalar> Module<S> for Backbone<S> {
    fn state(&self) -> Vec<&Param<S>> {
        self.modules().into_iter().flat_map(|m| m.state()).collect()
    }

    fn state_mut(&mut self) -> Vec<&mut Param<S>> {
        self.modules_mut().into_iter().flat_map(|m| m.state_mut()).collect()
    }
}

// ---------------------------------------------------------------------------
// Pose encoder and generator

/// Five stride-2 conv-BN-ReLU blocks over the 18-channel pose map, then pooling.
#[derive(Clone, Debug)]
pub struct PoseEncoder<S> {
    blocks: Vec<ConvBnRelu<S>>,
}

impl<S: Scalar> PoseEncoder<S> {
    fn new<R: Rng + ?Sized>(name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut blocks = Vec::new();
        let mut cin = NUM_JOINTS;
        for (i, &cout) in cfg.widths().pose.iter().chain(std::iter::once(&cfg.pose_feat_dim)).enumerate() {
            blocks.push(ConvBnRelu::new(&format!("{name}.block{i}"), cin, cout, ConvSpec::new(4, 2, 1), rng));
            cin = cout;
        }
        Self { blocks }
    }

    /// `(N, 18, H, W) -> (N, d_P)`.
    pub fn forward<'g>(&mut self, g: &'g Graph<S>, pose: Var<'g, S>, mode: NormMode) -> Var<'g, S> {
        let mut h = pose;
        for b in self.blocks.iter_mut() {
            h = b.forward(g, h, mode);
        }
        h.global_avg_pool()
    }
}

impl<S: Scalar> Module<S> for PoseEncoder<S> {
    fn state(&self) -> Vec<&Param<S>> {
        self.blocks.iter().flat_map(|b| b.state()).collect()
    }

    fn state_mut(&mut self) -> Vec<&mut Param<S>> {
        self.blocks.iter_mut().flat_map(|b| b.state_mut()).collect()
    }
}

/// Upsample x2, 3x3 conv, batch norm, dropout, ReLU.
#[derive(Clone, Debug)]
struct UpBlock<S> {
    conv: Conv2d<S>,
    bn: BatchNorm<S>,
}

/// Maps `[embedding, pose feature, noise]` to an image in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Generator<S> {
    seed: Linear<S>,
    seed_bn: BatchNorm<S>,
    seed_shape: [usize; 3],
    blocks: Vec<UpBlock<S>>,
    out: Conv2d<S>,
    dropout: f64,
}

impl<S: Scalar> Generator<S> {
    fn new<R: Rng + ?Sized>(name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let w = cfg.widths();
        let seed_shape = [w.gen_seed, cfg.image_height / 32, cfg.image_width / 32];
        let din = cfg.embed_dim + cfg.pose_feat_dim + cfg.noise_dim;
        let mut blocks = Vec::new();
        let mut cin = w.gen_seed;
        for (i, &cout) in w.gen.iter().enumerate() {
            blocks.push(UpBlock {
                conv: Conv2d::new(&format!("{name}.up{i}.conv"), cin, cout, ConvSpec::new(3, 1, 1), false, rng),
                bn: BatchNorm::new(&format!("{name}.up{i}.bn"), cout),
            });
            cin = cout;
        }
        Self {
            seed: Linear::new(&format!("{name}.seed.fc"), din, seed_shape.iter().product(), rng),
            seed_bn: BatchNorm::new(&format!("{name}.seed.bn"), w.gen_seed),
            seed_shape,
            blocks,
            out: Conv2d::new(&format!("{name}.out"), cin, 3, ConvSpec::new(3, 1, 1), true, rng),
            dropout: cfg.dropout,
        }
    }

    /// Returns `(N, 3, H, W)` through a tanh output.
    pub fn forward<'g>(
        &mut self,
        g: &'g Graph<S>,
        embedding: Var<'g, S>,
        pose_feature: Var<'g, S>,
        noise: Var<'g, S>,
        mode: NormMode,
        mut dropout_rng: Option<&mut (dyn RngCore + '_)>,
    ) -> Var<'g, S> {
        let n = embedding.shape()[0];
        let z = concat_features(&[embedding, pose_feature, noise]);
        let [c, h, w] = self.seed_shape;
        let seed = self.seed.forward(g, z).reshape(&[n, c, h, w]);
        let mut x = self.seed_bn.forward(g, seed, mode).relu();
        for b in self.blocks.iter_mut() {
            let up = b.conv.forward(g, x.upsample2x());
            let up = b.bn.forward(g, up, mode);
            x = dropout(g, up, self.dropout, dropout_rng.as_deref_mut()).relu();
        }
        self.out.forward(g, x).tanh()
    }

    fn modules(&self) -> Vec<&dyn Module<S>> {
        let mut v: Vec<&dyn Module<S>> = vec![&self.seed, &self.seed_bn];
        for b in &self.blocks {
            v.push(&b.conv);
            v.push(&b.bn);
        }
        v.push(&self.out);
        v
    }

    fn modules_mut(&mut self) -> Vec<&mut dyn Module<S>> {
        let mut v: Vec<&mut dyn Module<S>> = vec![&mut self.seed, &mut self.seed_bn];
        for b in &mut self.blocks {
            v.push(&mut b.conv);
            v.push(&mut b.bn);
        }
        v.push(&mut self.out);
        v
    }
}

impl<S: Scalar> Module<S> for Generator<S> {
    fn state(&self) -> Vec<&Param<S>> {
        self.modules().into_iter().flat_map(|m| m.state()).collect()
    }

    fn state_mut(&mut self) -> Vec<&mut Param<S>> {
        self.modules_mut().into_iter().flat_map(|m| m.state_mut()).collect()
    }
}

// ---------------------------------------------------------------------------
// Heads and discriminators

/// Squared difference, batch norm, fully connected, sigmoid.
#[derive(Clone, Debug)]
pub struct PairHead<S> {
    bn: BatchNorm<S>,
    fc: Linear<S>,
}

impl<S: Scalar> PairHead<S> {
    fn new<R: Rng + ?Sized>(name: &str, dim: usize, rng: &mut R) -> Self {
        Self { bn: BatchNorm::new(&format!("{name}.bn"), dim), fc: Linear::new(&format!("{name}.fc"), dim, 1, rng) }
    }

    /// `(N, D), (N, D) -> (N)` same-identity probabilities.
    pub fn forward<'g>(&mut self, g: &'g Graph<S>, a: Var<'g, S>, b: Var<'g, S>, mode: NormMode) -> Var<'g, S> {
        let d = a.sub(b).square();
        let d = self.bn.forward(g, d, mode);
        let n = a.shape()[0];
        probability(self.fc.forward(g, d).reshape(&[n]))
    }
}

impl<S: Scalar> Module<S> for PairHead<S> {
    fn state(&self) -> Vec<&Param<S>> {
        let mut v = self.bn.state();
        v.extend(self.fc.state());
        v
    }

    fn state_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut v = self.bn.state_mut();
        v.extend(self.fc.state_mut());
        v
    }
}

/// Supervision head on top of the embeddings.
#[derive(Clone, Debug)]
pub enum IdentityHead<S> {
    /// Siamese verification classifier.
    Verification(PairHead<S>),
    /// Single-branch identity classifier (softmax over training identities).
    Classification(Linear<S>),
}

impl<S: Scalar> Module<S> for IdentityHead<S> {
    fn state(&self) -> Vec<&Param<S>> {
        match self {
            IdentityHead::Verification(h) => h.state(),
            IdentityHead::Classification(l) => l.state(),
        }
    }

    fn state_mut(&mut self) -> Vec<&mut Param<S>> {
        match self {
            IdentityHead::Verification(h) => h.state_mut(),
            IdentityHead::Classification(l) => l.state_mut(),
        }
    }
}

/// Sigmoid of logits limited to +-15, so no finite input rounds to exactly 0
/// or 1 even in single precision.
fn probability<'g, S: Scalar>(logits: Var<'g, S>) -> Var<'g, S> {
    let bound = S::from_f64_lossy(LOGIT_BOUND);
    logits.clamp(-bound, bound).sigmoid()
}

const LOGIT_BOUND: f64 = 15.0;

/// Judges whether a candidate image shows the anchor's identity and looks real.
#[derive(Clone, Debug)]
pub struct IdentityDiscriminator<S> {
    /// `None` when the encoder's backbone is shared.
    pub backbone: Option<Backbone<S>>,
    pub head: PairHead<S>,
}

impl<S: Scalar> Module<S> for IdentityDiscriminator<S> {
    fn state(&self) -> Vec<&Param<S>> {
        let mut v = self.backbone.as_ref().map(|b| b.state()).unwrap_or_default();
        v.extend(self.head.state());
        v
    }

    fn state_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut v = self.backbone.as_mut().map(|b| b.state_mut()).unwrap_or_default();
        v.extend(self.head.state_mut());
        v
    }
}

/// Patch discriminator over the image concatenated with its pose map.
///
/// PatchGAN layout: leaky units throughout and batch norm on every block
/// but the first. Without the norm the SGD rate of stage II drove the
/// sigmoid into saturation within a few dozen steps.
#[derive(Clone, Debug)]
pub struct PoseDiscriminator<S> {
    blocks: Vec<Conv2d<S>>,
    /// One per block after the first.
    norms: Vec<BatchNorm<S>>,
    head: Conv2d<S>,
}

impl<S: Scalar> PoseDiscriminator<S> {
    fn new<R: Rng + ?Sized>(name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut blocks = Vec::new();
        let mut norms = Vec::new();
        let mut cin = 3 + NUM_JOINTS;
        for (i, &cout) in cfg.widths().pose_disc.iter().enumerate() {
            blocks.push(Conv2d::new(&format!("{name}.block{i}"), cin, cout, ConvSpec::new(4, 2, 1), i == 0, rng));
            if i > 0 {
                norms.push(BatchNorm::new(&format!("{name}.block{i}.bn"), cout));
            }
            cin = cout;
        }
        Self { blocks, norms, head: Conv2d::new(&format!("{name}.head"), cin, 1, ConvSpec::new(1, 1, 0), true, rng) }
    }

    /// `(N, 3, H, W), (N, 18, H, W) -> (N, 1, H/16, W/16)` confidences.
    pub fn forward<'g>(&mut self, g: &'g Graph<S>, image: Var<'g, S>, pose: Var<'g, S>, mode: NormMode) -> Var<'g, S> {
        let slope = S::from_f64_lossy(0.2);
        let mut h = concat_features(&[image, pose]);
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward(g, h);
            if i > 0 {
                h = self.norms[i - 1].forward(g, h, mode);
            }
            h = h.leaky_relu(slope);
        }
        probability(self.head.forward(g, h))
    }
}

impl<S: Scalar> Module<S> for PoseDiscriminator<S> {
    fn state(&self) -> Vec<&Param<S>> {
        let mut v: Vec<&Param<S>> = self.blocks.iter().flat_map(|b| b.state()).collect();
        v.extend(self.norms.iter().flat_map(|n| n.state()));
        v.extend(self.head.state());
        v
    }

    fn state_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut v: Vec<&mut Param<S>> = self.blocks.iter_mut().flat_map(|b| b.state_mut()).collect();
        v.extend(self.norms.iter_mut().flat_map(|n| n.state_mut()));
        v.extend(self.head.state_mut());
        v
    }
}

// ---------------------------------------------------------------------------
// Bundle

/// Named weight groups stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    /// Image encoder.
    E,
    /// Pose encoder and generator.
    G,
    /// Verification (or classification) head.
    V,
    /// Identity discriminator.
    DId,
    /// Pose discriminator.
    DPd,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::E, Group::G, Group::V, Group::DId, Group::DPd];

    pub fn tag(self) -> &'static str {
        match self {
            Group::E => "E",
            Group::G => "G",
            Group::V => "V",
            Group::DId => "D_id",
            Group::DPd => "D_pd",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.tag() == tag)
    }
}

/// All five blocks of the model.
#[derive(Clone, Debug)]
pub struct Networks<S> {
    pub config: ModelConfig,
    pub encoder: Backbone<S>,
    pub pose_encoder: PoseEncoder<S>,
    pub generator: Generator<S>,
    pub head: IdentityHead<S>,
    pub id_disc: IdentityDiscriminator<S>,
    pub pose_disc: PoseDiscriminator<S>,
}

impl<S: Scalar> Networks<S> {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = Backbone::new("E", config, rng);
        let pose_encoder = PoseEncoder::new("G.pose", config, rng);
        let generator = Generator::new("G", config, rng);
        let head = if config.single_branch_classifier {
            IdentityHead::Classification(Linear::new("V.cls", config.embed_dim, config.num_classes, rng))
        } else {
            IdentityHead::Verification(PairHead::new("V", config.embed_dim, rng))
        };
        let id_backbone = (!config.share_encoder_with_id_disc).then(|| Backbone::new("D_id", config, rng));
        let id_disc = IdentityDiscriminator { backbone: id_backbone, head: PairHead::new("D_id.head", config.embed_dim, rng) };
        let pose_disc = PoseDiscriminator::new("D_pd", config, rng);
        Ok(Self { config: config.clone(), encoder, pose_encoder, generator, head, id_disc, pose_disc })
    }

    /// Trainable parameters of a group.
    pub fn group_params(&self, group: Group) -> Vec<&Param<S>> {
        match group {
            Group::E => self.encoder.params(),
            Group::G => {
                let mut v = self.pose_encoder.params();
                v.extend(self.generator.params());
                v
            }
            Group::V => self.head.params(),
            Group::DId => self.id_disc.params(),
            Group::DPd => self.pose_disc.params(),
        }
    }

    pub fn group_params_mut(&mut self, group: Group) -> Vec<&mut Param<S>> {
        match group {
            Group::E => self.encoder.params_mut(),
            Group::G => {
                let mut v = self.pose_encoder.params_mut();
                v.extend(self.generator.params_mut());
                v
            }
            Group::V => self.head.params_mut(),
            Group::DId => self.id_disc.params_mut(),
            Group::DPd => self.pose_disc.params_mut(),
        }
    }

    /// Parameters and running buffers of a group.
    pub fn group_state(&self, group: Group) -> Vec<&Param<S>> {
        match group {
            Group::E => self.encoder.state(),
            Group::G => {
                let mut v = self.pose_encoder.state();
                v.extend(self.generator.state());
                v
            }
            Group::V => self.head.state(),
            Group::DId => self.id_disc.state(),
            Group::DPd => self.pose_disc.state(),
        }
    }

    pub fn group_state_mut(&mut self, group: Group) -> Vec<&mut Param<S>> {
        match group {
            Group::E => self.encoder.state_mut(),
            Group::G => {
                let mut v = self.pose_encoder.state_mut();
                v.extend(self.generator.state_mut());
                v
            }
            Group::V => self.head.state_mut(),
            Group::DId => self.id_disc.state_mut(),
            Group::DPd => self.pose_disc.state_mut(),
        }
    }

    /// SHA-256 over every tensor (parameters and buffers) of a group.
    pub fn group_digest(&self, group: Group) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in self.group_state(group) {
            h.update(p.name().as_bytes());
            p.value().update_digest(&mut h);
        }
        h.finalize().into()
    }

    /// Copies the encoder's backbone weights into the identity discriminator.
    pub fn init_id_disc_from_encoder(&mut self) {
        if let Some(b) = &mut self.id_disc.backbone {
            for (dst, src) in b.state_mut().into_iter().zip(self.encoder.state()) {
                dst.set(src.value().clone());
            }
        }
    }

    /// Identity-discriminator features: own backbone, or the encoder's when shared.
    pub fn id_disc_features<'g>(&mut self, g: &'g Graph<S>, images: Var<'g, S>, mode: NormMode) -> Var<'g, S> {
        match &mut self.id_disc.backbone {
            Some(b) => b.forward(g, images, mode),
            None => self.encoder.forward(g, images, mode),
        }
    }

    // -- eval-mode operations on plain tensors ------------------------------

    fn check_images(&self, images: &Tensor<S>) -> Result<()> {
        let s = images.shape();
        let want = [3, self.config.image_height, self.config.image_width];
        if s.len() != 4 || s[1..] != want || s[0] == 0 {
            return Err(Error::InvalidArgument(format!("expected images (N, 3, {}, {}), got {:?}", want[1], want[2], s)));
        }
        Ok(())
    }

    fn check_pose(&self, pose: &Tensor<S>) -> Result<()> {
        let s = pose.shape();
        let want = [NUM_JOINTS, self.config.image_height, self.config.image_width];
        if s.len() != 4 || s[1..] != want || s[0] == 0 {
            return Err(Error::InvalidArgument(format!("expected pose maps (N, 18, {}, {}), got {:?}", want[1], want[2], s)));
        }
        Ok(())
    }

    fn check_vectors(t: &Tensor<S>, dim: usize, what: &str) -> Result<()> {
        let s = t.shape();
        if s.len() != 2 || s[1] != dim || s[0] == 0 {
            return Err(Error::InvalidArgument(format!("expected {what} (N, {dim}), got {s:?}")));
        }
        Ok(())
    }

    /// `(N, 3, H, W) -> (N, d_E)` embeddings.
    pub fn encode(&mut self, images: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_images(images)?;
        let g = Graph::new();
        let x = g.constant(images.clone());
        Ok((*self.encoder.forward(&g, x, NormMode::Eval).value()).clone())
    }

    /// `(N, 18, H, W) -> (N, d_P)` pose features.
    pub fn encode_pose(&mut self, pose_maps: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_pose(pose_maps)?;
        let g = Graph::new();
        let p = g.constant(pose_maps.clone());
        Ok((*self.pose_encoder.forward(&g, p, NormMode::Eval).value()).clone())
    }

    /// `(N, d_E), (N, d_P), (N, d_z) -> (N, 3, H, W)` images in `[-1, 1]`.
    pub fn generate(&mut self, embedding: &Tensor<S>, pose_feature: &Tensor<S>, noise: &Tensor<S>) -> Result<Tensor<S>> {
        Self::check_vectors(embedding, self.config.embed_dim, "embeddings")?;
        Self::check_vectors(pose_feature, self.config.pose_feat_dim, "pose features")?;
        Self::check_vectors(noise, self.config.noise_dim, "noise")?;
        if embedding.rows() != pose_feature.rows() || embedding.rows() != noise.rows() {
            return Err(Error::InvalidArgument("generator inputs disagree on batch size".into()));
        }
        let g = Graph::new();
        let (e, p, z) = (g.constant(embedding.clone()), g.constant(pose_feature.clone()), g.constant(noise.clone()));
        Ok((*self.generator.forward(&g, e, p, z, NormMode::Eval, None).value()).clone())
    }

    /// `(N, d_E), (N, d_E) -> (N)` same-identity probabilities.
    pub fn verify(&mut self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let dim = self.config.embed_dim;
        Self::check_vectors(a, dim, "embeddings")?;
        Self::check_vectors(b, dim, "embeddings")?;
        if a.shape() != b.shape() {
            return Err(Error::InvalidArgument(format!("embedding batches differ: {:?} vs {:?}", a.shape(), b.shape())));
        }
        let IdentityHead::Verification(head) = &mut self.head else {
            return Err(Error::InvalidArgument("model uses a single-branch classifier, not a verification head".into()));
        };
        let g = Graph::new();
        Ok((*head.forward(&g, g.constant(a.clone()), g.constant(b.clone()), NormMode::Eval).value()).clone())
    }

    /// `(N, 3, H, W) x 2 -> (N)` identity-discriminator probabilities.
    pub fn discriminate_identity(&mut self, anchor: &Tensor<S>, candidate: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_images(anchor)?;
        self.check_images(candidate)?;
        if anchor.rows() != candidate.rows() {
            return Err(Error::InvalidArgument("anchor and candidate batches differ".into()));
        }
        let n = anchor.rows();
        let g = Graph::new();
        let both = g.constant(Tensor::stack_rows(&[anchor, candidate])?);
        let f = self.id_disc_features(&g, both, NormMode::Eval);
        let (fa, fc) = (f.slice_rows(0, n), f.slice_rows(n, 2 * n));
        Ok((*self.id_disc.head.forward(&g, fa, fc, NormMode::Eval).value()).clone())
    }

    /// `(N, 3, H, W), (N, 18, H, W) -> (N, 1, H/16, W/16)` patch confidences.
    pub fn discriminate_pose(&mut self, images: &Tensor<S>, pose_maps: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_images(images)?;
        self.check_pose(pose_maps)?;
        if images.rows() != pose_maps.rows() {
            return Err(Error::InvalidArgument("image and pose batches differ".into()));
        }
        let g = Graph::new();
        Ok((*self.pose_disc.forward(&g, g.constant(images.clone()), g.constant(pose_maps.clone()), NormMode::Eval).value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn desk(seed: u64) -> Networks<f64> {
        Networks::new(&ModelConfig::desk(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn images(n: usize, cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
        Tensor::uniform(&[n, 3, cfg.image_height, cfg.image_width], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn poses(n: usize, cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
        Tensor::uniform(&[n, NUM_JOINTS, cfg.image_height, cfg.image_width], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn check_contracts(cfg: ModelConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Networks::<f32>::new(&cfg, &mut rng).unwrap();
        let x = images(2, &cfg, 2).cast::<f32>();
        let p = poses(2, &cfg, 3).cast::<f32>();
        let e = net.encode(&x).unwrap();
        assert_eq!(e.shape(), [2, cfg.embed_dim]);
        assert!(e.all_finite());
        let f = net.encode_pose(&p).unwrap();
        assert_eq!(f.shape(), [2, cfg.pose_feat_dim]);
        let zero = net.encode_pose(&Tensor::zeros(p.shape())).unwrap();
        assert!(zero.all_finite());
        let z = Tensor::randn(&[2, cfg.noise_dim], 1.0, &mut rng);
        let y = net.generate(&e, &f, &z).unwrap();
        assert_eq!(y.shape(), [2, 3, cfg.image_height, cfg.image_width]);
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let d = net.discriminate_pose(&y, &p).unwrap();
        assert_eq!(d.shape(), [2, 1, cfg.image_height / 16, cfg.image_width / 16]);
        assert!(d.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let s = net.discriminate_identity(&x, &y).unwrap();
        assert_eq!(s.shape(), [2]);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let v = net.verify(&e, &e.gather_rows(&[1, 0])).unwrap();
        assert!(v.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn desk_contracts() {
        check_contracts(ModelConfig::desk());
    }

    #[test]
    fn full_contracts_at_small_size() {
        check_contracts(ModelConfig { image_height: 64, image_width: 32, ..ModelConfig::full() });
    }

    #[test]
    fn shape_errors() {
        let cfg = ModelConfig::desk();
        let mut net = desk(0);
        assert!(net.encode(&Tensor::zeros(&[1, 3, 32, 32])).is_err());
        assert!(net.encode_pose(&Tensor::zeros(&[1, 17, 64, 32])).is_err());
        let e = Tensor::zeros(&[1, cfg.embed_dim]);
        let p = Tensor::zeros(&[1, cfg.pose_feat_dim]);
        assert!(net.generate(&e, &p, &Tensor::zeros(&[1, cfg.noise_dim + 1])).is_err());
        assert!(net.verify(&e, &Tensor::zeros(&[1, 3])).is_err());
        assert!(net.discriminate_pose(&images(1, &cfg, 0), &Tensor::zeros(&[1, NUM_JOINTS, 32, 32])).is_err());
        assert!(ModelConfig { image_height: 48, ..cfg.clone() }.validate().is_err());
        assert!(ModelConfig { embed_dim: 0, ..cfg }.validate().is_err());
    }

    #[test]
    fn eval_is_deterministic() {
        let cfg = ModelConfig::desk();
        let mut net = desk(4);
        let x = images(3, &cfg, 5);
        assert_eq!(net.encode(&x).unwrap(), net.encode(&x).unwrap());
        let e = net.encode(&x).unwrap();
        let f = net.encode_pose(&poses(3, &cfg, 6)).unwrap();
        let z = Tensor::randn(&[3, cfg.noise_dim], 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(net.generate(&e, &f, &z).unwrap(), net.generate(&e, &f, &z).unwrap());
        let mut again = desk(4);
        assert_eq!(again.encode(&x).unwrap(), e);
    }

    #[test]
    fn verify_symmetric_and_constant_on_diagonal() {
        let cfg = ModelConfig::desk();
        let mut net = desk(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::randn(&[16, cfg.embed_dim], 1.0, &mut rng);
        let b = Tensor::randn(&[16, cfg.embed_dim], 1.0, &mut rng);
        assert_eq!(net.verify(&a, &b).unwrap(), net.verify(&b, &a).unwrap());
        let diag = net.verify(&a, &a).unwrap();
        assert!(diag.data().iter().all(|&v| v == diag.data()[0]));
    }

    #[test]
    fn noise_and_pose_matter() {
        let cfg = ModelConfig::desk();
        let mut net = desk(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = images(1, &cfg, 12);
        let p = poses(1, &cfg, 13);
        let e = net.encode(&x).unwrap();
        let f = net.encode_pose(&p).unwrap();
        let z1 = Tensor::randn(&[1, cfg.noise_dim], 1.0, &mut rng);
        let z2 = Tensor::randn(&[1, cfg.noise_dim], 1.0, &mut rng);
        let y1 = net.generate(&e, &f, &z1).unwrap();
        assert!(y1.max_abs_diff(&net.generate(&e, &f, &z2).unwrap()) > 0.0);

        // reversing the joint order gives a different pose feature
        let hw = cfg.image_height * cfg.image_width;
        let mut permuted = p.clone();
        for c in 0..NUM_JOINTS {
            let src = NUM_JOINTS - 1 - c;
            permuted.data_mut()[c * hw..(c + 1) * hw].copy_from_slice(&p.data()[src * hw..(src + 1) * hw]);
        }
        assert!(f.max_abs_diff(&net.encode_pose(&permuted).unwrap()) > 0.0);

        let other = poses(1, &cfg, 14);
        let d1 = net.discriminate_pose(&y1, &p).unwrap();
        assert!(d1.max_abs_diff(&net.discriminate_pose(&y1, &other).unwrap()) > 0.0);
    }

    #[test]
    fn identity_discriminator_symmetric() {
        let cfg = ModelConfig::desk();
        let mut net = desk(15);
        let a = images(2, &cfg, 16);
        let b = images(2, &cfg, 17);
        assert_eq!(net.discriminate_identity(&a, &b).unwrap(), net.discriminate_identity(&b, &a).unwrap());
    }

    #[test]
    fn groups_partition_state() {
        let net = desk(18);
        let mut seen = std::collections::HashSet::new();
        for g in Group::ALL {
            for p in net.group_state(g) {
                assert!(p.name().starts_with(g.tag()), "{} in {}", p.name(), g.tag());
                assert!(seen.insert(p.name().to_string()), "duplicate {}", p.name());
            }
        }
        assert!(net.encoder.norm_state().iter().any(|p| p.name().ends_with("running_mean")));
        let shared = Networks::<f32>::new(
            &ModelConfig { share_encoder_with_id_disc: true, ..ModelConfig::desk() },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(shared.id_disc.backbone.is_none());
        assert_eq!(shared.group_params(Group::DId).len(), 4);
    }

    #[test]
    fn id_disc_copies_encoder() {
        let mut net = desk(19);
        net.init_id_disc_from_encoder();
        let cfg = ModelConfig::desk();
        let x = images(2, &cfg, 20);
        let e = net.encode(&x).unwrap();
        let g = Graph::new();
        let f = net.id_disc_features(&g, g.constant(x), NormMode::Eval);
        assert_eq!(*f.value(), e);
    }

    #[test]
    fn desk_golden_embedding() {
        let cfg = ModelConfig::desk();
        let mut net = desk(2024);
        let e = net.encode(&images(1, &cfg, 2025)).unwrap();
        let head = &e.data()[..4];
        for (a, b) in head.iter().zip(GOLDEN) {
            assert!((a - b).abs() < 1e-5, "{head:?}");
        }
    }

    const GOLDEN: [f64; 4] = [0.19085363451649132, 0.13226323324258912, 0.00010349457914093224, 0.040832495541416824];
}
