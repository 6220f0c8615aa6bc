//! Parameter storage. All trainable tensors live in one flat, named list;
//! the structural types below refer to them by [`ParamId`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{FusionMode, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

/// Residual block `y = lrelu(conv2(lrelu(conv1(x)))) + skip(x)` where the skip
/// is the identity or, when declared, a 1×1 projection.
#[derive(Clone, Copy, Debug)]
pub struct ConvBlockParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub projection: Option<ConvParams>,
}

/// Trainable state of one behavioral information extractor; the variant
/// carries exactly the fields its fusion mode uses.
#[derive(Clone, Copy, Debug)]
pub enum FusionParams {
    Micro { w: ParamId },
    Global { w: ParamId, mix: ConvParams },
    Adaptive { template_block: ConvBlockParams },
}

#[derive(Clone, Copy, Debug)]
pub struct StageParams {
    pub transition: ConvParams,
    pub pool: bool,
    pub bie: Option<FusionParams>,
    pub cb: ConvBlockParams,
}

#[derive(Clone, Copy, Debug)]
pub struct MfaParams {
    /// `[C, C, 3, 1, 1]`
    pub temporal_kernel: ParamId,
}

#[derive(Clone, Debug)]
pub struct ScnParams {
    pub config: ModelConfig,
    pub stages: [StageParams; 3],
    pub mfa: Option<MfaParams>,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

enum Init {
    FanIn(usize),
    Zero,
}

struct Builder {
    rng: ChaCha8Rng,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        let tensor = match init {
            Init::Zero => Tensor::zeros(shape),
            Init::FanIn(fan_in) => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
            }
        };
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    fn conv(
        &mut self,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        init: Init,
        bias: bool,
    ) -> ConvParams {
        let weight = self.add(format!("{name}.weight"), &[c_out, c_in, k, k], init);
        let bias = bias.then(|| self.add(format!("{name}.bias"), &[c_out], Init::Zero));
        ConvParams { weight, bias }
    }

    fn block(&mut self, name: &str, c: usize, zero_output: bool) -> ConvBlockParams {
        let fan = c * 9;
        let conv1 = self.conv(&format!("{name}.conv1"), c, c, 3, Init::FanIn(fan), true);
        if zero_output {
            let conv2 = self.conv(&format!("{name}.conv2"), c, c, 3, Init::Zero, true);
            let projection = self.conv(&format!("{name}.projection"), c, c, 1, Init::Zero, false);
            ConvBlockParams {
                conv1,
                conv2,
                projection: Some(projection),
            }
        } else {
            let conv2 = self.conv(&format!("{name}.conv2"), c, c, 3, Init::FanIn(fan), true);
            ConvBlockParams {
                conv1,
                conv2,
                projection: None,
            }
        }
    }
}

impl ScnParams {
    /// Seeded initialization: conv kernels uniform in ±sqrt(6 / fan_in),
    /// biases zero. Extractor parameters start so that every extractor adds
    /// exactly zero: `w = 0` for micro/global fusion, and a template block
    /// whose second conv and skip projection are zero for adaptive fusion.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            names: Vec::new(),
            tensors: Vec::new(),
        };
        let mut c_in = 1;
        let mut stages = Vec::with_capacity(3);
        for (s, &c) in config.channels.iter().enumerate() {
            let prefix = format!("stage{}", s + 1);
            let transition = b.conv(
                &format!("{prefix}.transition"),
                c,
                c_in,
                3,
                Init::FanIn(c_in * 9),
                true,
            );
            let cb = b.block(&format!("{prefix}.cb"), c, false);
            let bie = config.bie.enabled_at(s).map(|_| match config.bie.fusion {
                FusionMode::Micro => FusionParams::Micro {
                    w: b.add(format!("{prefix}.bie.w"), &[1], Init::Zero),
                },
                FusionMode::Global => FusionParams::Global {
                    w: b.add(format!("{prefix}.bie.w"), &[1], Init::Zero),
                    mix: b.conv(
                        &format!("{prefix}.bie.mix"),
                        c,
                        2 * c,
                        1,
                        Init::FanIn(2 * c),
                        true,
                    ),
                },
                FusionMode::Adaptive => FusionParams::Adaptive {
                    template_block: b.block(&format!("{prefix}.bie.template_block"), c, true),
                },
            });
            stages.push(StageParams {
                transition,
                pool: s > 0,
                bie,
                cb,
            });
            c_in = c;
        }
        let mfa = config.mfa.enabled.then(|| {
            let c = config.channels[2];
            MfaParams {
                temporal_kernel: b.add(
                    "mfa.temporal_kernel".into(),
                    &[c, c, 3, 1, 1],
                    Init::FanIn(3 * c),
                ),
            }
        });
        Ok(ScnParams {
            config: config.clone(),
            stages: stages.try_into().expect("three stages"),
            mfa,
            names: b.names,
            tensors: b.tensors,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor, checking names and shapes against this layout.
    pub fn load_tensors(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameter tensors, configuration expects {}",
                named.len(),
                self.tensors.len()
            )));
        }
        for (i, (name, tensor)) in named.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(Error::Checkpoint(format!(
                    "parameter {i} is `{name}`, configuration expects `{}`",
                    self.names[i]
                )));
            }
            if tensor.shape() != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, configuration expects {:?}",
                    tensor.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = tensor;
        }
        Ok(())
    }

    /// Records every parameter on `tape`, as gradient-requesting leaves when
    /// `trainable` is set.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles for every parameter, indexed like the owning [`ScnParams`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
