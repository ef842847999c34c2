//! The color, thermal and interaction student networks and the cross-modal
//! shared attention (CMSA) block that rectifies interaction-branch features.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, BnMode, Conv2d, Ctx, Dense, Param, Region, Trainable};
use crate::ntt;
use crate::tape::{concat, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub classes: usize,
    pub width: usize,
    pub depth: usize,
    pub seed: u64,
    /// Route interaction-branch features through CMSA; `false` is plain concatenation.
    pub use_cmsa: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classes: 5,
            width: 8,
            depth: 2,
            seed: 7,
            use_cmsa: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.depth > 6 {
            return Err(Error::Config(format!(
                "width must be >= 1 and depth in 1..=6 (got width {}, depth {})",
                self.width, self.depth
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        Ok(())
    }

    /// Output channels of each encoder block.
    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.depth).map(|j| self.width << j).collect()
    }

    /// Output channels of each decoder block (mirrors the encoder, never below `width`).
    pub fn decoder_channels(&self) -> Vec<usize> {
        let enc = self.encoder_channels();
        (0..self.depth)
            .map(|k| enc[self.depth.saturating_sub(2 + k)])
            .collect()
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.width << (self.depth - 1)
    }

    /// Spatial dims must survive `depth` rounds of 2×2 pooling.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Color,
    Thermal,
    Interaction,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Color, Modality::Thermal, Modality::Interaction];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Color => "color",
            Modality::Thermal => "thermal",
            Modality::Interaction => "interaction",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBlock {
    fn new(name: &str, region: Region, in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBlock {
            conv: Conv2d::new(&format!("{name}.conv"), region, in_c, out_c, 3, 1, 1, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), region, out_c),
        }
    }

    fn forward<'t>(&mut self, ctx: &mut Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.conv.forward(ctx, x)?;
        Ok(self.bn.forward(ctx, y)?.relu())
    }
}

/// Conv-BN-ReLU blocks, each followed by 2×2 max pooling.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<ConvBlock>,
}

impl Encoder {
    fn new(name: &str, in_c: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut prev = in_c;
        let blocks = cfg
            .encoder_channels()
            .into_iter()
            .enumerate()
            .map(|(j, c)| {
                let b = ConvBlock::new(&format!("{name}.{j}"), Region::Encoder, prev, c, rng);
                prev = c;
                b
            })
            .collect();
        Encoder { blocks }
    }

    pub fn forward<'t>(&mut self, ctx: &mut Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for b in &mut self.blocks {
            h = b.forward(ctx, h)?.maxpool2()?;
        }
        Ok(h)
    }
}

/// Nearest ×2 upsampling + Conv-BN-ReLU blocks, then a 1×1 classifier.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub blocks: Vec<ConvBlock>,
    pub classifier: Conv2d,
}

impl Decoder {
    fn new(name: &str, in_c: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut prev = in_c;
        let blocks = cfg
            .decoder_channels()
            .into_iter()
            .enumerate()
            .map(|(k, c)| {
                let b = ConvBlock::new(&format!("{name}.{k}"), Region::Decoder, prev, c, rng);
                prev = c;
                b
            })
            .collect();
        let classifier = Conv2d::new(
            &format!("{name}.classifier"),
            Region::Decoder,
            prev,
            cfg.classes,
            1,
            1,
            0,
            rng,
        );
        Decoder { blocks, classifier }
    }

    pub fn forward<'t>(&mut self, ctx: &mut Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for b in &mut self.blocks {
            h = b.forward(ctx, h.upsample2()?)?;
        }
        self.classifier.forward(ctx, h)
    }
}

/// Shared channel and spatial gates computed from both modalities.
///
/// Channel path: global max pool, a per-modality dense layer, element-wise add,
/// ReLU, a shared dense layer and a sigmoid give `V_c ∈ (0,1)^C`, applied as
/// `F ← V_c ⊙ F + F` to each modality. The spatial path repeats the pattern
/// on the channel-rectified features with 1×1 convolutions, giving
/// `V_s ∈ (0,1)^{H×W}` and `F ← V_s ⊙ F + F`.
#[derive(Clone, Debug)]
pub struct Cmsa {
    pub color_fc: Dense,
    pub thermal_fc: Dense,
    pub shared_fc: Dense,
    pub color_spatial: Conv2d,
    pub thermal_spatial: Conv2d,
    pub shared_spatial: Conv2d,
}

pub struct CmsaOutput<'t> {
    pub color: Var<'t>,
    pub thermal: Var<'t>,
    /// `N×C×1×1`
    pub channel_gate: Var<'t>,
    /// `N×1×H×W`
    pub spatial_gate: Var<'t>,
}

impl Cmsa {
    pub fn new(name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let r = Region::Encoder;
        Cmsa {
            color_fc: Dense::new(&format!("{name}.color_fc"), r, channels, channels, rng),
            thermal_fc: Dense::new(&format!("{name}.thermal_fc"), r, channels, channels, rng),
            shared_fc: Dense::new(&format!("{name}.shared_fc"), r, channels, channels, rng),
            color_spatial: Conv2d::new(
                &format!("{name}.color_spatial"),
                r,
                channels,
                1,
                1,
                1,
                0,
                rng,
            ),
            thermal_spatial: Conv2d::new(
                &format!("{name}.thermal_spatial"),
                r,
                channels,
                1,
                1,
                1,
                0,
                rng,
            ),
            shared_spatial: Conv2d::new(&format!("{name}.shared_spatial"), r, 1, 1, 1, 1, 0, rng),
        }
    }

    pub fn forward<'t>(
        &self,
        ctx: &mut Ctx<'t>,
        f_color: Var<'t>,
        f_t: Var<'t>,
    ) -> Result<CmsaOutput<'t>> {
        let (sc, st) = (f_color.shape(), f_t.shape());
        if sc != st || sc.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "cmsa",
                left: sc,
                right: st,
            });
        }
        let (n, c) = (sc[0], sc[1]);

        let pooled = |f: Var<'t>| -> Result<Var<'t>> { f.max(&[2, 3], false) };
        let vc = self.color_fc.forward(ctx, pooled(f_color)?)?;
        let vt = self.thermal_fc.forward(ctx, pooled(f_t)?)?;
        let channel_gate = self
            .shared_fc
            .forward(ctx, vc.add(vt)?.relu())?
            .sigmoid()
            .reshape(&[n, c, 1, 1])?;
        let fc_color = channel_gate.mul(f_color)?.add(f_color)?;
        let fc_t = channel_gate.mul(f_t)?.add(f_t)?;

        let sc_color = self.color_spatial.forward(ctx, fc_color)?;
        let sc_t = self.thermal_spatial.forward(ctx, fc_t)?;
        let spatial_gate = self
            .shared_spatial
            .forward(ctx, sc_color.add(sc_t)?.relu())?
            .sigmoid();
        let fs_color = spatial_gate.mul(fc_color)?.add(fc_color)?;
        let fs_t = spatial_gate.mul(fc_t)?.add(fc_t)?;
        Ok(CmsaOutput {
            color: fs_color,
            thermal: fs_t,
            channel_gate,
            spatial_gate,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        for d in [&self.color_fc, &self.thermal_fc, &self.shared_fc] {
            v.extend(d.params());
        }
        for c in [
            &self.color_spatial,
            &self.thermal_spatial,
            &self.shared_spatial,
        ] {
            v.extend(c.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        v.extend(self.color_fc.params_mut());
        v.extend(self.thermal_fc.params_mut());
        v.extend(self.shared_fc.params_mut());
        v.extend(self.color_spatial.params_mut());
        v.extend(self.thermal_spatial.params_mut());
        v.extend(self.shared_spatial.params_mut());
        v
    }
}

/// Which parameters [`BranchModel::collect_params`] returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSubset {
    All,
    BnAffineOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionSelect {
    Encoder,
    Decoder,
    Both,
}

impl RegionSelect {
    pub fn includes(self, r: Region) -> bool {
        match self {
            RegionSelect::Both => true,
            RegionSelect::Encoder => r == Region::Encoder,
            RegionSelect::Decoder => r == Region::Decoder,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RegionSelect::Encoder => "encoder",
            RegionSelect::Decoder => "decoder",
            RegionSelect::Both => "both",
        }
    }
}

#[derive(Clone, Debug)]
pub struct BranchModel {
    pub modality: Modality,
    /// One encoder, or `[E_color, E_T]` for the interaction branch.
    pub encoders: Vec<Encoder>,
    pub cmsa: Option<Cmsa>,
    pub decoder: Decoder,
}

impl BranchModel {
    pub fn new(modality: Modality, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let p = modality.name();
        let bottleneck = cfg.bottleneck_channels();
        let (encoders, cmsa, dec_in) = match modality {
            Modality::Color => (
                vec![Encoder::new(&format!("{p}.enc_color"), 3, cfg, rng)],
                None,
                bottleneck,
            ),
            Modality::Thermal => (
                vec![Encoder::new(&format!("{p}.enc_thermal"), 1, cfg, rng)],
                None,
                bottleneck,
            ),
            Modality::Interaction => {
                let ec = Encoder::new(&format!("{p}.enc_color"), 3, cfg, rng);
                let et = Encoder::new(&format!("{p}.enc_thermal"), 1, cfg, rng);
                let cmsa = cfg
                    .use_cmsa
                    .then(|| Cmsa::new(&format!("{p}.cmsa"), bottleneck, rng));
                (vec![ec, et], cmsa, 2 * bottleneck)
            }
        };
        BranchModel {
            modality,
            encoders,
            cmsa,
            decoder: Decoder::new(&format!("{p}.dec"), dec_in, cfg, rng),
        }
    }

    /// Per-pixel class logits `N×classes×H×W`.
    pub fn forward<'t>(
        &mut self,
        ctx: &mut Ctx<'t>,
        color: Option<Var<'t>>,
        thermal: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let features = match self.modality {
            Modality::Color => {
                let x = color.ok_or(Error::MissingInput("color branch needs a color image"))?;
                self.encoders[0].forward(ctx, x)?
            }
            Modality::Thermal => {
                let x =
                    thermal.ok_or(Error::MissingInput("thermal branch needs a thermal image"))?;
                self.encoders[0].forward(ctx, x)?
            }
            Modality::Interaction => {
                let xc = color.ok_or(Error::MissingInput(
                    "interaction branch needs a color image",
                ))?;
                let xt = thermal.ok_or(Error::MissingInput(
                    "interaction branch needs a thermal image",
                ))?;
                let fc = self.encoders[0].forward(ctx, xc)?;
                let ft = self.encoders[1].forward(ctx, xt)?;
                match &self.cmsa {
                    Some(m) => {
                        let out = m.forward(ctx, fc, ft)?;
                        concat(&[out.color, out.thermal], 1)?
                    }
                    None => concat(&[fc, ft], 1)?,
                }
            }
        };
        self.decoder.forward(ctx, features)
    }

    fn blocks(&self) -> impl Iterator<Item = &ConvBlock> {
        self.encoders
            .iter()
            .flat_map(|e| e.blocks.iter())
            .chain(self.decoder.blocks.iter())
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ConvBlock> {
        self.encoders
            .iter_mut()
            .flat_map(|e| e.blocks.iter_mut())
            .chain(self.decoder.blocks.iter_mut())
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm2d> {
        self.blocks().map(|b| &b.bn)
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm2d> {
        self.blocks_mut().map(|b| &mut b.bn)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        for e in &self.encoders {
            for b in &e.blocks {
                v.extend(b.conv.params());
                v.extend(b.bn.params());
            }
        }
        if let Some(m) = &self.cmsa {
            v.extend(m.params());
        }
        for b in &self.decoder.blocks {
            v.extend(b.conv.params());
            v.extend(b.bn.params());
        }
        v.extend(self.decoder.classifier.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for e in &mut self.encoders {
            for b in &mut e.blocks {
                v.extend(b.conv.params_mut());
                v.extend(b.bn.params_mut());
            }
        }
        if let Some(m) = &mut self.cmsa {
            v.extend(m.params_mut());
        }
        for b in &mut self.decoder.blocks {
            v.extend(b.conv.params_mut());
            v.extend(b.bn.params_mut());
        }
        v.extend(self.decoder.classifier.params_mut());
        v
    }

    pub fn collect_params(&self, subset: ParamSubset, region: RegionSelect) -> Vec<&Param> {
        self.params()
            .into_iter()
            .filter(|p| region.includes(p.region))
            .filter(|p| subset == ParamSubset::All || p.role.is_bn_affine())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    /// Parameters followed by batch-norm running statistics, in a fixed order.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for bn in self.batch_norms() {
            out.extend(bn.buffers().into_iter().map(|(n, t)| (n, t.clone())));
        }
        out
    }

    fn load_state(&mut self, state: &BTreeMap<String, Tensor>) -> std::result::Result<(), String> {
        let take = |name: &str, dst: &mut Tensor| -> std::result::Result<(), String> {
            let src = state
                .get(name)
                .ok_or_else(|| format!("missing tensor {name}"))?;
            if src.shape() != dst.shape() {
                return Err(format!(
                    "{name}: shape {:?} != {:?}",
                    src.shape(),
                    dst.shape()
                ));
            }
            *dst = src.clone();
            Ok(())
        };
        for p in self.params_mut() {
            take(&p.name, &mut p.value)?;
        }
        for bn in self.batch_norms_mut() {
            for (name, t) in bn.buffers_mut() {
                take(&name, t)?;
            }
        }
        Ok(())
    }
}

fn conv_count(i: usize, o: usize, k: usize) -> usize {
    i * o * k * k + o
}

fn dense_count(i: usize, o: usize) -> usize {
    i * o + o
}

/// Parameter count of one encoder with `in_c` input channels.
pub fn encoder_param_count(cfg: &ModelConfig, in_c: usize) -> usize {
    let mut prev = in_c;
    let mut n = 0;
    for c in cfg.encoder_channels() {
        n += conv_count(prev, c, 3) + 2 * c;
        prev = c;
    }
    n
}

pub fn decoder_param_count(cfg: &ModelConfig, in_c: usize) -> usize {
    let mut prev = in_c;
    let mut n = 0;
    for c in cfg.decoder_channels() {
        n += conv_count(prev, c, 3) + 2 * c;
        prev = c;
    }
    n + conv_count(prev, cfg.classes, 1)
}

pub fn cmsa_param_count(channels: usize) -> usize {
    3 * dense_count(channels, channels) + 2 * conv_count(channels, 1, 1) + conv_count(1, 1, 1)
}

/// Closed-form parameter count of a branch.
pub fn branch_param_count(cfg: &ModelConfig, modality: Modality) -> usize {
    let b = cfg.bottleneck_channels();
    match modality {
        Modality::Color => encoder_param_count(cfg, 3) + decoder_param_count(cfg, b),
        Modality::Thermal => encoder_param_count(cfg, 1) + decoder_param_count(cfg, b),
        Modality::Interaction => {
            encoder_param_count(cfg, 3)
                + encoder_param_count(cfg, 1)
                + if cfg.use_cmsa { cmsa_param_count(b) } else { 0 }
                + decoder_param_count(cfg, 2 * b)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub seed: u64,
    /// Counted from the instantiated tensors.
    pub param_counts: BTreeMap<String, usize>,
    /// From [`branch_param_count`].
    pub formula_counts: BTreeMap<String, usize>,
}

/// The three students, always ordered color, thermal, interaction.
#[derive(Clone, Debug)]
pub struct ModelSuite {
    pub config: ModelConfig,
    pub branches: [BranchModel; 3],
}

/// Input batch for the three branches.
#[derive(Clone, Debug)]
pub struct BranchInputs<'t> {
    pub color: Var<'t>,
    pub thermal: Var<'t>,
}

pub fn build_model_suite(config: &ModelConfig) -> Result<(ModelSuite, InitReport)> {
    config.validate()?;
    let branches = Modality::ALL.map(|m| {
        let stream = match m {
            Modality::Color => 1,
            Modality::Thermal => 2,
            Modality::Interaction => 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream);
        BranchModel::new(m, config, &mut rng)
    });
    let suite = ModelSuite {
        config: config.clone(),
        branches,
    };
    let report = InitReport {
        seed: config.seed,
        param_counts: suite
            .branches
            .iter()
            .map(|b| (b.modality.name().to_string(), b.param_count()))
            .collect(),
        formula_counts: Modality::ALL
            .iter()
            .map(|&m| (m.name().to_string(), branch_param_count(config, m)))
            .collect(),
    };
    Ok((suite, report))
}

impl ModelSuite {
    pub fn branch(&self, m: Modality) -> &BranchModel {
        &self.branches[m as usize]
    }

    /// Logits of every branch, ordered color, thermal, interaction.
    pub fn forward_all<'t>(
        &mut self,
        ctx: &mut Ctx<'t>,
        x: &BranchInputs<'t>,
    ) -> Result<[Var<'t>; 3]> {
        let c = self.branches[0].forward(ctx, Some(x.color), None)?;
        let t = self.branches[1].forward(ctx, None, Some(x.thermal))?;
        let i = self.branches[2].forward(ctx, Some(x.color), Some(x.thermal))?;
        Ok([c, t, i])
    }

    /// Plain logits of all three branches (no gradients recorded).
    pub fn infer(&mut self, color: &Tensor, thermal: &Tensor, mode: BnMode) -> Result<[Tensor; 3]> {
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, mode, Trainable::Nothing);
        let inputs = BranchInputs {
            color: tape.constant(color.clone()),
            thermal: tape.constant(thermal.clone()),
        };
        let out = self.forward_all(&mut ctx, &inputs)?;
        Ok(out.map(|v| v.tensor()))
    }

    pub fn params(&self) -> Vec<&Param> {
        self.branches.iter().flat_map(|b| b.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.branches
            .iter_mut()
            .flat_map(|b| b.params_mut())
            .collect()
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm2d> {
        self.branches.iter_mut().flat_map(|b| b.batch_norms_mut())
    }

    pub fn state(&self) -> Vec<(String, Tensor)> {
        self.branches.iter().flat_map(|b| b.state()).collect()
    }

    /// Write `model.ntt` + `model.json` (tensor index) + `architecture.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        ntt::save_bundle(dir, "model", &self.state())?;
        let arch = dir.join("architecture.json");
        let json = serde_json::to_string_pretty(&self.config).map_err(|e| Error::json(&arch, e))?;
        fs::write(&arch, json).map_err(|e| Error::io(&arch, e))
    }

    /// Load a checkpoint; with `expect` given, its architecture must match.
    pub fn load(dir: &Path, expect: Option<&ModelConfig>) -> Result<Self> {
        let arch = dir.join("architecture.json");
        let text = fs::read_to_string(&arch).map_err(|e| Error::io(&arch, e))?;
        let config: ModelConfig = serde_json::from_str(&text).map_err(|e| Error::json(&arch, e))?;
        if let Some(want) = expect {
            let same_arch = want.classes == config.classes
                && want.width == config.width
                && want.depth == config.depth
                && want.use_cmsa == config.use_cmsa;
            if !same_arch {
                return Err(Error::format(
                    &arch,
                    format!("checkpoint architecture {config:?} does not match {want:?}"),
                ));
            }
        }
        let (mut suite, _) = build_model_suite(&config)?;
        let state: BTreeMap<String, Tensor> = ntt::load_bundle(dir, "model")?.into_iter().collect();
        for b in &mut suite.branches {
            b.load_state(&state)
                .map_err(|d| Error::format(dir.join("model.ntt"), d))?;
        }
        Ok(suite)
    }
}
