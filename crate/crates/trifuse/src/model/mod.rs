//! The three assembled architectures plus a unimodal LSTM baseline.
//!
//! - `lmf-mult`: three LSTMs feed the low-rank fusion kernel; the fused
//!   length-1 stream is the target of one cross-modal stack per modality,
//!   and the concatenated outputs pass through a single self-attention
//!   encoder. Four transformer stacks in total.
//! - `fusion-cm-attn`: the swapped configuration, where each conv-projected
//!   modality sequence attends to the fused length-1 source; the last time
//!   steps are concatenated straight into the head. Three stacks.
//! - `mult-lite`: the reduced pairwise baseline with six cross-modal stacks
//!   (every ordered modality pair) and three self-attention stacks. Nine.
//! - `unimodal-lstm-{l,a,v}`: one LSTM plus a linear head; the comparison
//!   baseline for trimodal-interaction tasks.

mod io;

pub use io::{load_model, load_model_expecting, save_model, MODEL_FORMAT_VERSION};

use crate::attention::{
    crossmodal_encoder, self_attention_encoder, BoundStack, EncoderStackParams,
};
use crate::data::{Label, LabelKind, MultimodalSample};
use crate::error::{Error, Result};
use crate::fusion::{lmf_fuse, BoundLmf, LmfParams};
use crate::tensor::{lstm_forward, Binder, BoundLstm, LstmParams, NodeId, Padding, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

pub const MODALITIES: [Modality; 3] = [Modality::Language, Modality::Audio, Modality::Visual];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Language,
    Audio,
    Visual,
}

impl Modality {
    pub fn index(self) -> usize {
        match self {
            Modality::Language => 0,
            Modality::Audio => 1,
            Modality::Visual => 2,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Modality::Language => "l",
            Modality::Audio => "a",
            Modality::Visual => "v",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "lmf-mult")]
    LmfMult,
    #[serde(rename = "fusion-cm-attn")]
    FusionCmAttn,
    #[serde(rename = "mult-lite")]
    MultLite,
    #[serde(rename = "unimodal-lstm")]
    UnimodalLstm(Modality),
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::LmfMult => write!(f, "lmf-mult"),
            Architecture::FusionCmAttn => write!(f, "fusion-cm-attn"),
            Architecture::MultLite => write!(f, "mult-lite"),
            Architecture::UnimodalLstm(m) => write!(f, "unimodal-lstm-{}", m.short()),
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lmf-mult" => Ok(Architecture::LmfMult),
            "fusion-cm-attn" => Ok(Architecture::FusionCmAttn),
            "mult-lite" => Ok(Architecture::MultLite),
            "unimodal-lstm-l" => Ok(Architecture::UnimodalLstm(Modality::Language)),
            "unimodal-lstm-a" => Ok(Architecture::UnimodalLstm(Modality::Audio)),
            "unimodal-lstm-v" => Ok(Architecture::UnimodalLstm(Modality::Visual)),
            other => Err(Error::Usage(format!("unknown architecture '{other}'"))),
        }
    }
}

/// Output head layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    /// One continuous sentiment value.
    Regression,
    /// Four emotions, two logits each.
    Emotions,
}

impl OutputKind {
    pub fn dim(self) -> usize {
        match self {
            OutputKind::Regression => 1,
            OutputKind::Emotions => 8,
        }
    }

    pub fn label_kind(self) -> LabelKind {
        match self {
            OutputKind::Regression => LabelKind::Sentiment,
            OutputKind::Emotions => LabelKind::Emotions,
        }
    }
}

/// Hyperparameters shared by all architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dims: [usize; 3],
    pub lstm_hidden: [usize; 3],
    pub model_dim: usize,
    pub lmf_rank: usize,
    pub conv_kernels: [usize; 3],
    pub fused_conv_kernel: usize,
    pub crossmodal_layers: usize,
    pub self_attn_layers: usize,
    pub output: OutputKind,
    pub attn_dropout: f64,
    /// Head count for the mult-lite baseline; the proposed architectures are
    /// single-head throughout.
    pub heads: usize,
    /// Give fusion-cm-attn per-modality trailing self-attention stacks.
    pub trailing_self_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dims: [300, 74, 35],
            lstm_hidden: [32, 32, 32],
            model_dim: 32,
            lmf_rank: 4,
            conv_kernels: [3, 3, 3],
            fused_conv_kernel: 1,
            crossmodal_layers: 2,
            self_attn_layers: 2,
            output: OutputKind::Regression,
            attn_dropout: 0.0,
            heads: 1,
            trailing_self_attention: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.model_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "model_dim must be positive and even, got {}",
                self.model_dim
            )));
        }
        if self.input_dims.iter().any(|&d| d == 0)
            || self.lstm_hidden.iter().any(|&d| d == 0)
        {
            return Err(Error::InvalidConfig("all dims must be >= 1".into()));
        }
        if self.lmf_rank == 0 {
            return Err(Error::InvalidConfig("lmf_rank must be >= 1".into()));
        }
        for k in self.conv_kernels.iter().chain([&self.fused_conv_kernel]) {
            if *k == 0 || k % 2 == 0 {
                return Err(Error::InvalidConfig(format!(
                    "conv kernels must be odd, got {k}"
                )));
            }
        }
        if self.crossmodal_layers == 0 || self.self_attn_layers == 0 {
            return Err(Error::InvalidConfig("layer counts must be >= 1".into()));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "head count {} must divide model_dim {}",
                self.heads, self.model_dim
            )));
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return Err(Error::InvalidConfig(format!(
                "attn_dropout {} outside [0, 1)",
                self.attn_dropout
            )));
        }
        Ok(())
    }
}

/// Typed parameter storage per architecture.
#[derive(Debug, Clone)]
enum ArchParams {
    LmfMult {
        lstms: [LstmParams; 3],
        lmf: LmfParams,
        fused_conv: Tensor,
        convs: [Tensor; 3],
        cross: [EncoderStackParams; 3],
        self_attn: EncoderStackParams,
        head_w: Tensor,
        head_b: Tensor,
    },
    FusionCmAttn {
        lstms: [LstmParams; 3],
        lmf: LmfParams,
        fused_conv: Tensor,
        convs: [Tensor; 3],
        cross: [EncoderStackParams; 3],
        trailing: Option<[EncoderStackParams; 3]>,
        head_w: Tensor,
        head_b: Tensor,
    },
    MultLite {
        convs: [Tensor; 3],
        /// Six stacks in (target, source) order:
        /// (l,a), (l,v), (a,l), (a,v), (v,l), (v,a).
        cross: Vec<EncoderStackParams>,
        self_attn: [EncoderStackParams; 3],
        head_w: Tensor,
        head_b: Tensor,
    },
    UnimodalLstm {
        modality: Modality,
        lstm: LstmParams,
        head_w: Tensor,
        head_b: Tensor,
    },
}

/// A built model: architecture tag, config, and the named parameter registry.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub arch: Architecture,
    pub config: ModelConfig,
    params: ArchParams,
}

/// Node-id mirror of the parameters, valid for one tape.
pub enum BoundModel {
    LmfMult {
        lstms: [BoundLstm; 3],
        lmf: BoundLmf,
        fused_conv: NodeId,
        convs: [NodeId; 3],
        cross: Vec<BoundStack>,
        self_attn: BoundStack,
        head_w: NodeId,
        head_b: NodeId,
    },
    FusionCmAttn {
        lstms: [BoundLstm; 3],
        lmf: BoundLmf,
        fused_conv: NodeId,
        convs: [NodeId; 3],
        cross: Vec<BoundStack>,
        trailing: Option<Vec<BoundStack>>,
        head_w: NodeId,
        head_b: NodeId,
    },
    MultLite {
        convs: [NodeId; 3],
        cross: Vec<BoundStack>,
        self_attn: Vec<BoundStack>,
        head_w: NodeId,
        head_b: NodeId,
    },
    UnimodalLstm {
        modality: Modality,
        lstm: BoundLstm,
        head_w: NodeId,
        head_b: NodeId,
    },
}

fn linear_init<R: rand::Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    Tensor::uniform(vec![rows, cols], -bound, bound, rng)
}

fn conv_init<R: rand::Rng>(k: usize, d_in: usize, d_out: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / ((k * d_in) as f64).sqrt();
    Tensor::uniform(vec![k, d_in, d_out], -bound, bound, rng)
}

/// Assemble the fused-target architecture (four transformer stacks).
pub fn build_lmf_mult(config: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    ModelBundle::build(Architecture::LmfMult, config, seed)
}

/// Assemble the fused-source architecture (three transformer stacks).
pub fn build_fusion_cm_attn(config: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    ModelBundle::build(Architecture::FusionCmAttn, config, seed)
}

/// Assemble the pairwise cross-modal baseline (nine transformer stacks).
pub fn build_mult_lite(config: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    ModelBundle::build(Architecture::MultLite, config, seed)
}

impl ModelBundle {
    pub fn build(arch: Architecture, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let out = config.output.dim();
        let mut lstms = || -> [LstmParams; 3] {
            [0, 1, 2].map(|m| LstmParams::init(config.input_dims[m], config.lstm_hidden[m], &mut rng))
        };
        let params = match arch {
            Architecture::LmfMult => {
                let lstms = lstms();
                let lmf = LmfParams::init(config.lstm_hidden, config.lmf_rank, d, &mut rng);
                let fused_conv = conv_init(config.fused_conv_kernel, d, d, &mut rng);
                let convs =
                    [0, 1, 2].map(|m| conv_init(config.conv_kernels[m], config.input_dims[m], d, &mut rng));
                let cross = [0, 1, 2].map(|_| {
                    EncoderStackParams::init(d, config.crossmodal_layers, 1, config.attn_dropout, &mut rng)
                });
                let self_attn = EncoderStackParams::init(
                    3 * d,
                    config.self_attn_layers,
                    1,
                    config.attn_dropout,
                    &mut rng,
                );
                ArchParams::LmfMult {
                    lstms,
                    lmf,
                    fused_conv,
                    convs,
                    cross,
                    self_attn,
                    head_w: linear_init(3 * d, out, &mut rng),
                    head_b: Tensor::zeros(vec![out]),
                }
            }
            Architecture::FusionCmAttn => {
                let lstms = lstms();
                let lmf = LmfParams::init(config.lstm_hidden, config.lmf_rank, d, &mut rng);
                let fused_conv = conv_init(config.fused_conv_kernel, d, d, &mut rng);
                let convs =
                    [0, 1, 2].map(|m| conv_init(config.conv_kernels[m], config.input_dims[m], d, &mut rng));
                let cross = [0, 1, 2].map(|_| {
                    EncoderStackParams::init(d, config.crossmodal_layers, 1, config.attn_dropout, &mut rng)
                });
                let trailing = if config.trailing_self_attention {
                    Some([0, 1, 2].map(|_| {
                        EncoderStackParams::init(
                            d,
                            config.self_attn_layers,
                            1,
                            config.attn_dropout,
                            &mut rng,
                        )
                    }))
                } else {
                    None
                };
                ArchParams::FusionCmAttn {
                    lstms,
                    lmf,
                    fused_conv,
                    convs,
                    cross,
                    trailing,
                    head_w: linear_init(3 * d, out, &mut rng),
                    head_b: Tensor::zeros(vec![out]),
                }
            }
            Architecture::MultLite => {
                let convs =
                    [0, 1, 2].map(|m| conv_init(config.conv_kernels[m], config.input_dims[m], d, &mut rng));
                let cross = (0..6)
                    .map(|_| {
                        EncoderStackParams::init(
                            d,
                            config.crossmodal_layers,
                            config.heads,
                            config.attn_dropout,
                            &mut rng,
                        )
                    })
                    .collect();
                let self_attn = [0, 1, 2].map(|_| {
                    EncoderStackParams::init(
                        2 * d,
                        config.self_attn_layers,
                        config.heads,
                        config.attn_dropout,
                        &mut rng,
                    )
                });
                ArchParams::MultLite {
                    convs,
                    cross,
                    self_attn,
                    head_w: linear_init(6 * d, out, &mut rng),
                    head_b: Tensor::zeros(vec![out]),
                }
            }
            Architecture::UnimodalLstm(m) => {
                let idx = m.index();
                let lstm = LstmParams::init(config.input_dims[idx], config.lstm_hidden[idx], &mut rng);
                ArchParams::UnimodalLstm {
                    modality: m,
                    lstm,
                    head_w: linear_init(config.lstm_hidden[idx], out, &mut rng),
                    head_b: Tensor::zeros(vec![out]),
                }
            }
        };
        let bundle = ModelBundle {
            arch,
            config: config.clone(),
            params,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Structural validation of every parameter block.
    pub fn validate(&self) -> Result<()> {
        match &self.params {
            ArchParams::LmfMult {
                lstms,
                lmf,
                cross,
                self_attn,
                ..
            } => {
                for lstm in lstms {
                    lstm.validate()?;
                }
                lmf.validate()?;
                for stack in cross {
                    stack.validate()?;
                }
                self_attn.validate()
            }
            ArchParams::FusionCmAttn {
                lstms,
                lmf,
                cross,
                trailing,
                ..
            } => {
                for lstm in lstms {
                    lstm.validate()?;
                }
                lmf.validate()?;
                for stack in cross {
                    stack.validate()?;
                }
                if let Some(trailing) = trailing {
                    for stack in trailing {
                        stack.validate()?;
                    }
                }
                Ok(())
            }
            ArchParams::MultLite {
                cross, self_attn, ..
            } => {
                for stack in cross.iter().chain(self_attn) {
                    stack.validate()?;
                }
                Ok(())
            }
            ArchParams::UnimodalLstm { lstm, .. } => lstm.validate(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.config.output.dim()
    }

    /// Parameters whose gradient is zero by construction. Softmax over a
    /// single key is constant, so query/key projections facing a length-1
    /// sequence cannot receive gradient: the trailing encoder of `lmf-mult`
    /// (which self-attends over the length-1 fused stream) and the
    /// cross-modal stacks of `fusion-cm-attn` (whose source is the length-1
    /// fused stream). Everything else must receive gradient.
    pub fn structurally_constant_params(&self) -> Vec<String> {
        match &self.params {
            ArchParams::LmfMult { self_attn, .. } => (0..self_attn.blocks.len())
                .flat_map(|i| {
                    [
                        format!("self_enc.block{i}.w_k"),
                        format!("self_enc.block{i}.w_q"),
                    ]
                })
                .collect(),
            ArchParams::FusionCmAttn { cross, .. } => MODALITIES
                .iter()
                .zip(cross)
                .flat_map(|(m, stack)| {
                    (0..stack.blocks.len()).flat_map(move |i| {
                        [
                            format!("cm_{}.block{i}.w_k", m.short()),
                            format!("cm_{}.block{i}.w_q", m.short()),
                        ]
                    })
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Number of transformer stacks actually assembled.
    pub fn transformer_stack_count(&self) -> usize {
        match &self.params {
            ArchParams::LmfMult { cross, .. } => cross.len() + 1,
            ArchParams::FusionCmAttn { cross, trailing, .. } => {
                cross.len() + trailing.as_ref().map_or(0, |t| t.len())
            }
            ArchParams::MultLite { cross, self_attn, .. } => cross.len() + self_attn.len(),
            ArchParams::UnimodalLstm { .. } => 0,
        }
    }

    /// Visit every parameter with its registry name.
    pub fn for_each<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        match &self.params {
            ArchParams::LmfMult {
                lstms,
                lmf,
                fused_conv,
                convs,
                cross,
                self_attn,
                head_w,
                head_b,
            } => {
                for (m, lstm) in MODALITIES.iter().zip(lstms) {
                    lstm.for_each(&format!("lstm_{}", m.short()), f);
                }
                lmf.for_each("lmf", f);
                f("conv_fused".into(), fused_conv);
                for (m, conv) in MODALITIES.iter().zip(convs) {
                    f(format!("conv_{}", m.short()), conv);
                }
                for (m, stack) in MODALITIES.iter().zip(cross) {
                    stack.for_each(&format!("cm_{}", m.short()), f);
                }
                self_attn.for_each("self_enc", f);
                f("head.w".into(), head_w);
                f("head.b".into(), head_b);
            }
            ArchParams::FusionCmAttn {
                lstms,
                lmf,
                fused_conv,
                convs,
                cross,
                trailing,
                head_w,
                head_b,
            } => {
                for (m, lstm) in MODALITIES.iter().zip(lstms) {
                    lstm.for_each(&format!("lstm_{}", m.short()), f);
                }
                lmf.for_each("lmf", f);
                f("conv_fused".into(), fused_conv);
                for (m, conv) in MODALITIES.iter().zip(convs) {
                    f(format!("conv_{}", m.short()), conv);
                }
                for (m, stack) in MODALITIES.iter().zip(cross) {
                    stack.for_each(&format!("cm_{}", m.short()), f);
                }
                if let Some(trailing) = trailing {
                    for (m, stack) in MODALITIES.iter().zip(trailing) {
                        stack.for_each(&format!("trail_{}", m.short()), f);
                    }
                }
                f("head.w".into(), head_w);
                f("head.b".into(), head_b);
            }
            ArchParams::MultLite {
                convs,
                cross,
                self_attn,
                head_w,
                head_b,
            } => {
                for (m, conv) in MODALITIES.iter().zip(convs) {
                    f(format!("conv_{}", m.short()), conv);
                }
                for ((t, s), stack) in mult_lite_pairs().iter().zip(cross) {
                    stack.for_each(&format!("cm_{}_{}", t.short(), s.short()), f);
                }
                for (m, stack) in MODALITIES.iter().zip(self_attn) {
                    stack.for_each(&format!("self_{}", m.short()), f);
                }
                f("head.w".into(), head_w);
                f("head.b".into(), head_b);
            }
            ArchParams::UnimodalLstm {
                modality,
                lstm,
                head_w,
                head_b,
            } => {
                lstm.for_each(&format!("lstm_{}", modality.short()), f);
                f("head.w".into(), head_w);
                f("head.b".into(), head_b);
            }
        }
    }

    /// Mutable traversal in the same order and with the same names as
    /// [`ModelBundle::for_each`].
    pub fn for_each_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        match &mut self.params {
            ArchParams::LmfMult {
                lstms,
                lmf,
                fused_conv,
                convs,
                cross,
                self_attn,
                head_w,
                head_b,
            } => {
                for (m, lstm) in MODALITIES.iter().zip(lstms) {
                    lstm.for_each_mut(&format!("lstm_{}", m.short()), f);
                }
                lmf.for_each_mut("lmf", f);
                f("conv_fused".into(), fused_conv);
                for (m, conv) in MODALITIES.iter().zip(convs) {
                    f(format!("conv_{}", m.short()), conv);
                }
                for (m, stack) in MODALITIES.iter().zip(cross) {
                    stack.for_each_mut(&format!("cm_{}", m.short()), f);
                }
                self_attn.for_each_mut("self_enc", f);
                f("head.w".into(), head_w);
                f("head.b".into(), head_b);
            }
            ArchParams::FusionCmAttn {
                lstms,
                lmf,
                fused_conv,
                convs,
                cross,
                trailing,
                head_w,
                head_b,
            } => {
                for (m, lstm) in MODALITIES.iter().zip(lstms) {
                    lstm.for_each_mut(&format!("lstm_{}", m.short()), f);
                }
                lmf.for_each_mut("lmf", f);
                f("conv_fused".into(), fused_conv);
                for (m, conv) in MODALITIES.iter().zip(convs) {
                    f(format!("conv_{}", m.short()), conv);
                }
                for (m, stack) in MODALITIES.iter().zip(cross) {
                    stack.for_each_mut(&format!("cm_{}", m.short()), f);
                }
                if let Some(trailing) = trailing {
                    for (m, stack) in MODALITIES.iter().zip(trailing) {
                        stack.for_each_mut(&format!("trail_{}", m.short()), f);
                    }
                }
                f("head.w".into(), head_w);
                f("head.b".into(), head_b);
            }
            ArchParams::MultLite {
                convs,
                cross,
                self_attn,
                head_w,
                head_b,
            } => {
                for (m, conv) in MODALITIES.iter().zip(convs) {
                    f(format!("conv_{}", m.short()), conv);
                }
                for ((t, s), stack) in mult_lite_pairs().iter().zip(cross) {
                    stack.for_each_mut(&format!("cm_{}_{}", t.short(), s.short()), f);
                }
                for (m, stack) in MODALITIES.iter().zip(self_attn) {
                    stack.for_each_mut(&format!("self_{}", m.short()), f);
                }
                f("head.w".into(), head_w);
                f("head.b".into(), head_b);
            }
            ArchParams::UnimodalLstm {
                modality,
                lstm,
                head_w,
                head_b,
            } => {
                lstm.for_each_mut(&format!("lstm_{}", modality.short()), f);
                f("head.w".into(), head_w);
                f("head.b".into(), head_b);
            }
        }
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.numel());
        n
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each(&mut |n, _| names.push(n));
        names
    }

    /// Bind every parameter onto a tape.
    pub fn bind(&self, tape: &mut Tape) -> (BoundModel, Binder) {
        let mut b = Binder::new();
        let bound = match &self.params {
            ArchParams::LmfMult {
                lstms,
                lmf,
                fused_conv,
                convs,
                cross,
                self_attn,
                head_w,
                head_b,
            } => BoundModel::LmfMult {
                lstms: [0, 1, 2].map(|m| {
                    lstms[m].bind(tape, &mut b, &format!("lstm_{}", MODALITIES[m].short()))
                }),
                lmf: lmf.bind(tape, &mut b, "lmf"),
                fused_conv: b.leaf(tape, "conv_fused".into(), fused_conv),
                convs: [0, 1, 2].map(|m| {
                    b.leaf(tape, format!("conv_{}", MODALITIES[m].short()), &convs[m])
                }),
                cross: MODALITIES
                    .iter()
                    .zip(cross)
                    .map(|(m, s)| s.bind(tape, &mut b, &format!("cm_{}", m.short())))
                    .collect(),
                self_attn: self_attn.bind(tape, &mut b, "self_enc"),
                head_w: b.leaf(tape, "head.w".into(), head_w),
                head_b: b.leaf(tape, "head.b".into(), head_b),
            },
            ArchParams::FusionCmAttn {
                lstms,
                lmf,
                fused_conv,
                convs,
                cross,
                trailing,
                head_w,
                head_b,
            } => BoundModel::FusionCmAttn {
                lstms: [0, 1, 2].map(|m| {
                    lstms[m].bind(tape, &mut b, &format!("lstm_{}", MODALITIES[m].short()))
                }),
                lmf: lmf.bind(tape, &mut b, "lmf"),
                fused_conv: b.leaf(tape, "conv_fused".into(), fused_conv),
                convs: [0, 1, 2].map(|m| {
                    b.leaf(tape, format!("conv_{}", MODALITIES[m].short()), &convs[m])
                }),
                cross: MODALITIES
                    .iter()
                    .zip(cross)
                    .map(|(m, s)| s.bind(tape, &mut b, &format!("cm_{}", m.short())))
                    .collect(),
                trailing: trailing.as_ref().map(|t| {
                    MODALITIES
                        .iter()
                        .zip(t)
                        .map(|(m, s)| s.bind(tape, &mut b, &format!("trail_{}", m.short())))
                        .collect()
                }),
                head_w: b.leaf(tape, "head.w".into(), head_w),
                head_b: b.leaf(tape, "head.b".into(), head_b),
            },
            ArchParams::MultLite {
                convs,
                cross,
                self_attn,
                head_w,
                head_b,
            } => BoundModel::MultLite {
                convs: [0, 1, 2].map(|m| {
                    b.leaf(tape, format!("conv_{}", MODALITIES[m].short()), &convs[m])
                }),
                cross: mult_lite_pairs()
                    .iter()
                    .zip(cross)
                    .map(|((t, s), stack)| {
                        stack.bind(tape, &mut b, &format!("cm_{}_{}", t.short(), s.short()))
                    })
                    .collect(),
                self_attn: MODALITIES
                    .iter()
                    .zip(self_attn)
                    .map(|(m, s)| s.bind(tape, &mut b, &format!("self_{}", m.short())))
                    .collect(),
                head_w: b.leaf(tape, "head.w".into(), head_w),
                head_b: b.leaf(tape, "head.b".into(), head_b),
            },
            ArchParams::UnimodalLstm {
                modality,
                lstm,
                head_w,
                head_b,
            } => BoundModel::UnimodalLstm {
                modality: *modality,
                lstm: lstm.bind(tape, &mut b, &format!("lstm_{}", modality.short())),
                head_w: b.leaf(tape, "head.w".into(), head_w),
                head_b: b.leaf(tape, "head.b".into(), head_b),
            },
        };
        (bound, b)
    }

    fn check_sample(&self, s: &MultimodalSample) -> Result<()> {
        if s.dims() != self.config.input_dims {
            return Err(Error::DimMismatch(format!(
                "sample dims {:?} vs model {:?}",
                s.dims(),
                self.config.input_dims
            )));
        }
        Ok(())
    }

    /// Run the architecture over one sample on an existing tape with
    /// already-bound parameters; returns the `[output_dim]` output node.
    pub fn run(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        s: &MultimodalSample,
        train: bool,
    ) -> Result<NodeId> {
        self.check_sample(s)?;
        let d = self.config.model_dim;
        match bound {
            BoundModel::LmfMult {
                lstms,
                lmf,
                fused_conv,
                convs,
                cross,
                self_attn,
                head_w,
                head_b,
            } => {
                let seqs = bind_sequences(tape, s);
                let fused = fuse_contexts(tape, &seqs, lstms, lmf, *fused_conv, d)?;
                let mut targets = Vec::with_capacity(3);
                for m in 0..3 {
                    let proj = tape.conv1d(seqs[m], convs[m], Padding::Same)?;
                    targets.push(crossmodal_encoder(tape, fused, proj, &cross[m], train)?);
                }
                let cat = tape.concat_cols(&targets)?;
                let enc = self_attention_encoder(tape, cat, self_attn, train)?;
                head(tape, enc, *head_w, *head_b)
            }
            BoundModel::FusionCmAttn {
                lstms,
                lmf,
                fused_conv,
                convs,
                cross,
                trailing,
                head_w,
                head_b,
            } => {
                let seqs = bind_sequences(tape, s);
                let fused = fuse_contexts(tape, &seqs, lstms, lmf, *fused_conv, d)?;
                let mut lasts = Vec::with_capacity(3);
                for m in 0..3 {
                    let proj = tape.conv1d(seqs[m], convs[m], Padding::Same)?;
                    let mut enc = crossmodal_encoder(tape, proj, fused, &cross[m], train)?;
                    if let Some(trailing) = trailing {
                        enc = self_attention_encoder(tape, enc, &trailing[m], train)?;
                    }
                    let len = tape.shape(enc)[0];
                    lasts.push(tape.row(enc, len - 1)?);
                }
                let cat = tape.concat_cols(&lasts)?;
                head(tape, cat, *head_w, *head_b)
            }
            BoundModel::MultLite {
                convs,
                cross,
                self_attn,
                head_w,
                head_b,
            } => {
                let seqs = bind_sequences(tape, s);
                let projs = [
                    tape.conv1d(seqs[0], convs[0], Padding::Same)?,
                    tape.conv1d(seqs[1], convs[1], Padding::Same)?,
                    tape.conv1d(seqs[2], convs[2], Padding::Same)?,
                ];
                let mut lasts = Vec::with_capacity(3);
                for (t, pair_stacks) in [(0usize, [0usize, 1]), (1, [2, 3]), (2, [4, 5])] {
                    let pairs = mult_lite_pairs();
                    let mut outs = Vec::with_capacity(2);
                    for &stack_idx in &pair_stacks {
                        let (_, src) = pairs[stack_idx];
                        let out = crossmodal_encoder(
                            tape,
                            projs[t],
                            projs[src.index()],
                            &cross[stack_idx],
                            train,
                        )?;
                        outs.push(out);
                    }
                    let cat = tape.concat_cols(&outs)?;
                    let enc = self_attention_encoder(tape, cat, &self_attn[t], train)?;
                    let len = tape.shape(enc)[0];
                    lasts.push(tape.row(enc, len - 1)?);
                }
                let cat = tape.concat_cols(&lasts)?;
                head(tape, cat, *head_w, *head_b)
            }
            BoundModel::UnimodalLstm {
                modality,
                lstm,
                head_w,
                head_b,
            } => {
                let seqs = bind_sequences(tape, s);
                let (_, last) = lstm_forward(tape, seqs[modality.index()], lstm)?;
                let row = tape.reshape(last, vec![1, tape.shape(last)[0]])?;
                head(tape, row, *head_w, *head_b)
            }
        }
    }

    /// One-shot forward pass on a fresh tape; returns the output vector.
    pub fn forward(&self, s: &MultimodalSample, train: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (bound, _) = self.bind(&mut tape);
        let out = self.run(&mut tape, &bound, s, train)?;
        Ok(tape.tensor(out))
    }

    /// Copy gradients from the tape back into the registry tensors.
    pub fn write_grads(&mut self, tape: &Tape, binder: &Binder) -> Result<()> {
        let mut grads: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (name, id) in &binder.entries {
            let g = tape
                .grad(*id)
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            grads.insert(name, g.to_vec());
        }
        let mut missing = Vec::new();
        self.for_each_mut(&mut |name, t| match grads.remove(name.as_str()) {
            Some(g) => t.grad = Some(g),
            None => missing.push(name),
        });
        if let Some(name) = missing.first() {
            return Err(Error::MissingGradient(name.clone()));
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.for_each_mut(&mut |_, t| t.grad = None);
    }

    /// Parameter registry as (name, tensor) pairs for the optimizer.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.for_each_mut(&mut |name, t| out.push((name, t)));
        out
    }
}

/// The six (target, source) modality pairs of the baseline, in stack order.
pub fn mult_lite_pairs() -> [(Modality, Modality); 6] {
    use Modality::*;
    [
        (Language, Audio),
        (Language, Visual),
        (Audio, Language),
        (Audio, Visual),
        (Visual, Language),
        (Visual, Audio),
    ]
}

fn bind_sequences(tape: &mut Tape, s: &MultimodalSample) -> [NodeId; 3] {
    [
        tape.leaf(&s.language),
        tape.leaf(&s.audio),
        tape.leaf(&s.visual),
    ]
}

/// LSTM context vectors, low-rank fusion, and the pointwise temporal conv on
/// the resulting length-1 fused stream.
fn fuse_contexts(
    tape: &mut Tape,
    seqs: &[NodeId; 3],
    lstms: &[BoundLstm; 3],
    lmf: &BoundLmf,
    fused_conv: NodeId,
    d: usize,
) -> Result<NodeId> {
    let mut contexts = Vec::with_capacity(3);
    for m in 0..3 {
        let (_, last) = lstm_forward(tape, seqs[m], &lstms[m])?;
        contexts.push(last);
    }
    let fused = lmf_fuse(tape, contexts[0], contexts[1], contexts[2], lmf)?;
    let fused = tape.reshape(fused, vec![1, d])?;
    tape.conv1d(fused, fused_conv, Padding::Same)
}

fn head(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let y = tape.matmul(x, w)?;
    let y = tape.add_row(y, b)?;
    let out = tape.shape(y)[1];
    tape.reshape(y, vec![out])
}

/// Loss node for one sample's output under the model's output kind:
/// absolute error for regression, summed two-class cross-entropy per emotion.
pub fn sample_loss(tape: &mut Tape, output: NodeId, label: &Label) -> Result<NodeId> {
    match label {
        Label::Sentiment(y) => {
            let target = tape.constant(Tensor::vector(vec![*y])?);
            let diff = tape.sub(output, target)?;
            let abs = tape.abs(diff)?;
            tape.sum(abs)
        }
        Label::Emotions(bits) => {
            let targets: Vec<usize> = bits.iter().map(|&b| b as usize).collect();
            tape.grouped_cross_entropy(output, &targets, 2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabelKind, ParityGen};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_dims: [3, 2, 2],
            lstm_hidden: [3, 3, 3],
            model_dim: 4,
            lmf_rank: 2,
            conv_kernels: [3, 3, 3],
            fused_conv_kernel: 1,
            crossmodal_layers: 1,
            self_attn_layers: 1,
            output: OutputKind::Regression,
            attn_dropout: 0.0,
            heads: 1,
            trailing_self_attention: false,
        }
    }

    pub(crate) fn tiny_sample(lengths: [usize; 3]) -> MultimodalSample {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        MultimodalSample {
            language: Tensor::normal(vec![lengths[0], 3], 1.0, &mut rng),
            audio: Tensor::normal(vec![lengths[1], 2], 1.0, &mut rng),
            visual: Tensor::normal(vec![lengths[2], 2], 1.0, &mut rng),
            label: Label::Sentiment(1.5),
        }
    }

    fn all_archs() -> Vec<Architecture> {
        vec![
            Architecture::LmfMult,
            Architecture::FusionCmAttn,
            Architecture::MultLite,
        ]
    }

    #[test]
    fn forward_shape_contract_and_finite_output() {
        let c = tiny_config();
        let s = tiny_sample([7, 5, 3]);
        for arch in all_archs() {
            let m = ModelBundle::build(arch, &c, 1).unwrap();
            let out = m.forward(&s, false).unwrap();
            assert_eq!(out.shape(), &[1], "{arch}");
            assert!(out.data()[0].is_finite());
        }
    }

    #[test]
    fn emotion_head_yields_eight_logits() {
        let mut c = tiny_config();
        c.output = OutputKind::Emotions;
        let mut s = tiny_sample([4, 4, 4]);
        s.label = Label::Emotions([1, 0, 0, 1]);
        for arch in all_archs() {
            let m = ModelBundle::build(arch, &c, 2).unwrap();
            let out = m.forward(&s, false).unwrap();
            assert_eq!(out.shape(), &[8], "{arch}");
        }
    }

    #[test]
    fn unaligned_lengths_accepted_without_resampling() {
        let c = tiny_config();
        let s = tiny_sample([50, 37, 61]);
        for arch in all_archs() {
            let m = ModelBundle::build(arch, &c, 3).unwrap();
            m.forward(&s, false).unwrap();
        }
    }

    #[test]
    fn length_one_sequences_accepted_everywhere() {
        let c = tiny_config();
        let s = tiny_sample([1, 1, 1]);
        for arch in all_archs() {
            let m = ModelBundle::build(arch, &c, 3).unwrap();
            let out = m.forward(&s, false).unwrap();
            assert!(out.data()[0].is_finite(), "{arch}");
        }
    }

    #[test]
    fn active_dropout_perturbs_train_mode_only() {
        let mut c = tiny_config();
        c.attn_dropout = 0.3;
        let s = tiny_sample([6, 5, 4]);
        for arch in all_archs() {
            let m = ModelBundle::build(arch, &c, 31).unwrap();
            let eval_a = m.forward(&s, false).unwrap();
            let eval_b = m.forward(&s, false).unwrap();
            assert_eq!(eval_a.data(), eval_b.data(), "{arch}: eval ignores dropout");
            let train_out = m.forward(&s, true).unwrap();
            assert!(train_out.data()[0].is_finite());
            assert_ne!(
                eval_a.data(),
                train_out.data(),
                "{arch}: dropout must be active in train mode"
            );
        }
    }

    #[test]
    fn transformer_stack_counts_are_9_4_3() {
        let c = tiny_config();
        assert_eq!(
            ModelBundle::build(Architecture::LmfMult, &c, 0)
                .unwrap()
                .transformer_stack_count(),
            4
        );
        assert_eq!(
            ModelBundle::build(Architecture::FusionCmAttn, &c, 0)
                .unwrap()
                .transformer_stack_count(),
            3
        );
        assert_eq!(
            ModelBundle::build(Architecture::MultLite, &c, 0)
                .unwrap()
                .transformer_stack_count(),
            9
        );
        let mut with_trailing = c;
        with_trailing.trailing_self_attention = true;
        assert_eq!(
            ModelBundle::build(Architecture::FusionCmAttn, &with_trailing, 0)
                .unwrap()
                .transformer_stack_count(),
            6
        );
    }

    #[test]
    fn param_ordering_matches_efficiency_claim() {
        let c = ModelConfig::default();
        let fusion = ModelBundle::build(Architecture::FusionCmAttn, &c, 0)
            .unwrap()
            .param_count();
        let lmf = ModelBundle::build(Architecture::LmfMult, &c, 0)
            .unwrap()
            .param_count();
        let lite = ModelBundle::build(Architecture::MultLite, &c, 0)
            .unwrap()
            .param_count();
        assert!(fusion < lmf, "{fusion} !< {lmf}");
        assert!(lmf < lite, "{lmf} !< {lite}");
    }

    #[test]
    fn param_count_matches_hand_enumerated_shapes() {
        // independent shape enumeration, checked at both the tiny test config
        // and the defaults
        for c in [tiny_config(), ModelConfig::default()] {
            let d = c.model_dim;
            let out = c.output.dim();
            let lstm = |d_in: usize, h: usize| 4 * (h * d_in + h * h + h);
            let block = |dim: usize| 4 * dim * dim + 4 * dim + (dim * 4 * dim) * 2 + 4 * dim + dim;
            let stack = |dim: usize, layers: usize| layers * block(dim) + 2 * dim;
            let lstms: usize = (0..3).map(|m| lstm(c.input_dims[m], c.lstm_hidden[m])).sum();
            let lmf: usize = (0..3).map(|m| c.lmf_rank * (c.lstm_hidden[m] + 1) * d).sum();
            let convs: usize = (0..3).map(|m| c.conv_kernels[m] * c.input_dims[m] * d).sum();
            let fused_conv = c.fused_conv_kernel * d * d;

            let lmf_mult = lstms
                + lmf
                + fused_conv
                + convs
                + 3 * stack(d, c.crossmodal_layers)
                + stack(3 * d, c.self_attn_layers)
                + 3 * d * out
                + out;
            assert_eq!(
                ModelBundle::build(Architecture::LmfMult, &c, 0)
                    .unwrap()
                    .param_count(),
                lmf_mult
            );

            let fusion = lstms
                + lmf
                + fused_conv
                + convs
                + 3 * stack(d, c.crossmodal_layers)
                + 3 * d * out
                + out;
            assert_eq!(
                ModelBundle::build(Architecture::FusionCmAttn, &c, 0)
                    .unwrap()
                    .param_count(),
                fusion
            );

            let lite = convs
                + 6 * stack(d, c.crossmodal_layers)
                + 3 * stack(2 * d, c.self_attn_layers)
                + 6 * d * out
                + out;
            assert_eq!(
                ModelBundle::build(Architecture::MultLite, &c, 0)
                    .unwrap()
                    .param_count(),
                lite
            );
        }
    }

    #[test]
    fn registry_names_are_unique_and_match_bindings() {
        for arch in all_archs() {
            let m = ModelBundle::build(arch, &tiny_config(), 5).unwrap();
            let names = m.param_names();
            let mut sorted = names.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), names.len(), "{arch}: duplicate names");

            let mut tape = Tape::new();
            let (_, binder) = m.bind(&mut tape);
            let bound: Vec<String> = binder.entries.iter().map(|(n, _)| n.clone()).collect();
            assert_eq!(bound, names, "{arch}: bind/for_each order diverges");
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let c = tiny_config();
        let s = tiny_sample([5, 4, 3]);
        let mut archs = all_archs();
        archs.push(Architecture::UnimodalLstm(Modality::Audio));
        for arch in archs {
            let mut m = ModelBundle::build(arch, &c, 7).unwrap();
            let mut tape = Tape::new();
            let (bound, binder) = m.bind(&mut tape);
            let out = m.run(&mut tape, &bound, &s, true).unwrap();
            let loss = sample_loss(&mut tape, out, &s.label).unwrap();
            tape.backward(loss).unwrap();
            m.write_grads(&tape, &binder).unwrap();
            let mut dead = Vec::new();
            m.for_each(&mut |name, t| {
                let norm: f64 = t
                    .grad
                    .as_ref()
                    .map(|g| g.iter().map(|v| v * v).sum())
                    .unwrap_or(0.0);
                if norm == 0.0 {
                    dead.push(name);
                }
            });
            let mut expected_dead = m.structurally_constant_params();
            expected_dead.sort();
            dead.sort();
            assert_eq!(
                dead, expected_dead,
                "{arch}: zero-gradient parameters beyond the singleton-attention Q/K set"
            );
        }
    }

    #[test]
    fn zeroed_head_gives_zero_output() {
        let c = tiny_config();
        let mut m = ModelBundle::build(Architecture::LmfMult, &c, 11).unwrap();
        m.for_each_mut(&mut |name, t| {
            if name.starts_with("head.") {
                let z = vec![0.0; t.numel()];
                t.set_data(z).unwrap();
            }
        });
        let out = m.forward(&tiny_sample([4, 4, 4]), false).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_forward_is_repeatable_and_matches_dropout_free_train() {
        let mut c = tiny_config();
        c.attn_dropout = 0.0;
        let s = tiny_sample([4, 3, 5]);
        for arch in all_archs() {
            let m = ModelBundle::build(arch, &c, 13).unwrap();
            let a = m.forward(&s, false).unwrap();
            let b = m.forward(&s, false).unwrap();
            assert_eq!(a.data(), b.data(), "{arch}: eval must be deterministic");
            let t = m.forward(&s, true).unwrap();
            assert_eq!(a.data(), t.data(), "{arch}: train with dropout 0 == eval");
        }
    }

    #[test]
    fn builds_are_seed_deterministic() {
        let c = tiny_config();
        let s = tiny_sample([6, 2, 3]);
        for arch in all_archs() {
            let a = ModelBundle::build(arch, &c, 17).unwrap();
            let b = ModelBundle::build(arch, &c, 17).unwrap();
            assert_eq!(
                a.forward(&s, false).unwrap().data(),
                b.forward(&s, false).unwrap().data(),
                "{arch}"
            );
            let other = ModelBundle::build(arch, &c, 18).unwrap();
            assert_ne!(
                a.forward(&s, false).unwrap().data(),
                other.forward(&s, false).unwrap().data(),
                "{arch}: different seeds should differ"
            );
        }
    }

    #[test]
    fn sample_dim_mismatch_rejected() {
        let c = tiny_config();
        let m = ModelBundle::build(Architecture::LmfMult, &c, 0).unwrap();
        let mut s = tiny_sample([4, 4, 4]);
        s.audio = Tensor::zeros(vec![4, 5]);
        assert!(matches!(m.forward(&s, false), Err(Error::DimMismatch(_))));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny_config();
        c.model_dim = 5;
        assert!(ModelBundle::build(Architecture::LmfMult, &c, 0).is_err());
        let mut c = tiny_config();
        c.conv_kernels = [2, 3, 3];
        assert!(ModelBundle::build(Architecture::MultLite, &c, 0).is_err());
        let mut c = tiny_config();
        c.heads = 3;
        assert!(matches!(
            ModelBundle::build(Architecture::MultLite, &c, 0),
            Err(Error::InvalidConfig(_))
        ));
        let mut c = tiny_config();
        c.lmf_rank = 0;
        assert!(ModelBundle::build(Architecture::LmfMult, &c, 0).is_err());
    }

    #[test]
    fn multihead_baseline_builds_and_runs() {
        let mut c = tiny_config();
        c.heads = 2;
        let m = ModelBundle::build(Architecture::MultLite, &c, 19).unwrap();
        let out = m.forward(&tiny_sample([4, 4, 4]), false).unwrap();
        assert_eq!(out.shape(), &[1]);
    }

    #[test]
    fn parity_generated_batch_runs_through_all_architectures() {
        let gen = ParityGen {
            dims: [3, 2, 2],
            len_range: (2, 6),
            noise: 0.1,
            aligned: false,
            label_kind: LabelKind::Sentiment,
            seed: 23,
        };
        let samples = gen.generate(4).unwrap();
        for arch in all_archs() {
            let m = ModelBundle::build(arch, &tiny_config(), 29).unwrap();
            for s in &samples {
                m.forward(s, false).unwrap();
            }
        }
    }
}
