use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Bound, Mode, ParamSet, Real, Tape, Tensor, Var};
use crate::raster::Raster;
use crate::seed::rng_for;

use super::fusion::{FusionBlock, FusionRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Each stage is conv (padding `kernel/2`) → bias → ReLU → 2×2 average pool.
    pub stages: Vec<ConvStage>,
    pub feature_dim: usize,
    /// Feed the whole final feature map to the output affine map instead of
    /// its global average.
    #[serde(default)]
    pub flatten: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stages: vec![
                ConvStage {
                    out_channels: 8,
                    kernel: 3,
                    stride: 1,
                },
                ConvStage {
                    out_channels: 16,
                    kernel: 3,
                    stride: 1,
                },
            ],
            feature_dim: 128,
            flatten: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Registry name of the fusion block.
    pub kind: String,
    pub n_tokens: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            kind: "cross".into(),
            n_tokens: 8,
        }
    }
}

impl FusionConfig {
    pub fn token_dim(&self, d: usize) -> Result<usize> {
        if self.n_tokens == 0 || !d.is_multiple_of(self.n_tokens) {
            return Err(Error::Config(format!(
                "feature_dim {d} is not divisible into {} tokens",
                self.n_tokens
            )));
        }
        Ok(d / self.n_tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Square input side length.
    pub input_size: usize,
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    /// MLP hidden width; `None` means `feature_dim`.
    pub hidden: Option<usize>,
    pub n_classes: usize,
    pub dropout: f64,
    /// Both streams share the stream-1 backbone weights.
    pub tie_backbones: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            input_size: 32,
            backbone: BackboneConfig::default(),
            fusion: FusionConfig::default(),
            hidden: None,
            n_classes: 3,
            dropout: 0.3,
            tie_backbones: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or(self.backbone.feature_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.input_size == 0 || self.n_classes < 2 {
            return fail("need >= 1 channel, positive input size and >= 2 classes".into());
        }
        if self.backbone.feature_dim == 0 || self.hidden_width() == 0 {
            return fail("feature_dim and hidden width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        self.final_side().map(|_| ())
    }

    /// Side of the last backbone feature map.
    pub fn final_side(&self) -> Result<usize> {
        let mut side = self.input_size;
        for (i, s) in self.backbone.stages.iter().enumerate() {
            if s.out_channels == 0 || s.kernel == 0 || s.stride == 0 {
                return Err(Error::Config(format!("stage {i}: zero extent")));
            }
            let pad = s.kernel / 2;
            if s.kernel > side + 2 * pad {
                return Err(Error::Config(format!(
                    "stage {i}: kernel {} larger than padded input {}",
                    s.kernel,
                    side + 2 * pad
                )));
            }
            side = (side + 2 * pad - s.kernel) / s.stride + 1;
            if side >= 2 {
                side /= 2;
            }
        }
        Ok(side)
    }

    /// Width of the vector entering the backbone's output affine map.
    pub fn backbone_out_width(&self) -> Result<usize> {
        let c = self.backbone.stages.last().map_or(self.in_channels, |s| s.out_channels);
        let side = self.final_side()?;
        Ok(if self.backbone.flatten { c * side * side } else { c })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    /// `U(±√(6/fan_in))`, for weights feeding a ReLU.
    HeUniform {
        fan_in: usize,
    },
    /// `U(±√(3/fan_in))`, unit-variance preserving for linear maps.
    LecunUniform {
        fan_in: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn materialize<T: Real>(&self, seed: u64) -> Tensor<T> {
        let mut rng = rng_for(seed, &format!("init/{}", self.name));
        let bound = match self.init {
            Init::Zeros => 0.0,
            Init::HeUniform { fan_in } => (6.0 / fan_in as f64).sqrt(),
            Init::LecunUniform { fan_in } => (3.0 / fan_in as f64).sqrt(),
        };
        let data = (0..self.numel())
            .map(|_| {
                if bound == 0.0 {
                    T::zero()
                } else {
                    T::lit(rng.random_range(-bound..bound))
                }
            })
            .collect();
        Tensor::new(self.shape.clone(), data).expect("spec shape is positive")
    }
}

/// `x·W + b` for a vector or a row-major batch.
pub fn affine<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let is_vec = shape.len() == 1;
    let x2 = if is_vec { tape.reshape(x, &[1, shape[0]])? } else { x };
    let y = tape.matmul(x2, w)?;
    let y = tape.add_bias(y, b)?;
    if is_vec {
        tape.flatten(y)
    } else {
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub logits: Var,
    pub f1: Var,
    pub f2: Option<Var>,
    pub fused: Var,
}

/// The full network: parameters plus the selected fusion strategy.
pub struct Dianet<T: Real> {
    config: ModelConfig,
    params: ParamSet<T>,
    fusion: Box<dyn FusionBlock<T>>,
}

impl<T: Real> std::fmt::Debug for Dianet<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dianet")
            .field("config", &self.config)
            .field("fusion", &self.fusion.name())
            .field("params", &self.params.count())
            .finish()
    }
}

impl<T: Real> Clone for Dianet<T> {
    fn clone(&self) -> Self {
        Dianet::from_params(self.config.clone(), self.params.clone(), &FusionRegistry::builtin())
            .expect("a constructed model re-validates")
    }
}

/// Fixed input standardisation applied to every normalised raster before
/// the first convolution: `(x - INPUT_MEAN) / INPUT_STD`.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.25;

const BACKBONE_ONSET: &str = "onset";
const BACKBONE_OFFSET: &str = "offset";

impl<T: Real> Dianet<T> {
    /// Parameter layout for a configuration, in insertion order.
    pub fn param_specs(config: &ModelConfig, registry: &FusionRegistry<T>) -> Result<Vec<ParamSpec>> {
        config.validate()?;
        let fusion = registry.create(&config.fusion.kind)?;
        let d = config.backbone.feature_dim;
        let width = config.backbone_out_width()?;
        let mut specs = Vec::new();
        let mut backbone = |prefix: &str| {
            let mut cin = config.in_channels;
            for (i, s) in config.backbone.stages.iter().enumerate() {
                let fan_in = cin * s.kernel * s.kernel;
                specs.push(ParamSpec::new(
                    format!("{prefix}.conv{i}.w"),
                    &[s.out_channels, cin, s.kernel, s.kernel],
                    Init::HeUniform { fan_in },
                ));
                specs.push(ParamSpec::new(
                    format!("{prefix}.conv{i}.b"),
                    &[s.out_channels],
                    Init::Zeros,
                ));
                cin = s.out_channels;
            }
            specs.push(ParamSpec::new(
                format!("{prefix}.fc.w"),
                &[width, d],
                Init::LecunUniform { fan_in: width },
            ));
            specs.push(ParamSpec::new(format!("{prefix}.fc.b"), &[d], Init::Zeros));
        };
        backbone(BACKBONE_ONSET);
        if fusion.streams() == 2 && !config.tie_backbones {
            backbone(BACKBONE_OFFSET);
        }
        specs.extend(fusion.param_specs(d, &config.fusion)?);
        let h = config.hidden_width();
        specs.push(ParamSpec::new("head.fc1.w", &[d, h], Init::HeUniform { fan_in: d }));
        specs.push(ParamSpec::new("head.fc1.b", &[h], Init::Zeros));
        specs.push(ParamSpec::new(
            "head.fc2.w",
            &[h, config.n_classes],
            Init::LecunUniform { fan_in: h },
        ));
        specs.push(ParamSpec::new("head.fc2.b", &[config.n_classes], Init::Zeros));
        Ok(specs)
    }

    /// Closed-form parameter count (see README):
    /// `B·(Σ_i c_i(c_{i-1}k_i² + 1) + c_L·S·d + d) + F + d·h + h + h·K + K`
    /// with `B` backbones, fusion size `F` and `S` the final map area when
    /// flattening (1 otherwise).
    pub fn param_count_formula(config: &ModelConfig) -> Result<usize> {
        let d = config.backbone.feature_dim;
        let mut per_backbone = 0;
        let mut cin = config.in_channels;
        for s in &config.backbone.stages {
            per_backbone += s.out_channels * (cin * s.kernel * s.kernel + 1);
            cin = s.out_channels;
        }
        let side = config.final_side()?;
        let area = if config.backbone.flatten { side * side } else { 1 };
        per_backbone += cin * area * d + d;
        let (backbones, fusion) = match config.fusion.kind.as_str() {
            "cross" => {
                let t = config.fusion.token_dim(d)?;
                (2, 6 * t * t + 2 * d * d + d)
            }
            "simple" => (2, 0),
            "affine" => (1, d * d + d),
            other => return Err(Error::Config(format!("no closed form for fusion '{other}'"))),
        };
        let backbones = if backbones == 2 && config.tie_backbones {
            1
        } else {
            backbones
        };
        let h = config.hidden_width();
        Ok(backbones * per_backbone + fusion + d * h + h + h * config.n_classes + config.n_classes)
    }

    pub fn new(config: ModelConfig, registry: &FusionRegistry<T>) -> Result<Self> {
        let mut params = ParamSet::new();
        for spec in Self::param_specs(&config, registry)? {
            params.insert(spec.name.clone(), spec.materialize::<T>(config.init_seed))?;
        }
        Self::from_params(config, params, registry)
    }

    /// Wraps existing parameters, checking names and shapes against the
    /// configuration.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>, registry: &FusionRegistry<T>) -> Result<Self> {
        let specs = Self::param_specs(&config, registry)?;
        if specs.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            match params.get(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Config(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                None => return Err(Error::Config(format!("missing parameter {}", spec.name))),
            }
        }
        let fusion = registry.create(&config.fusion.kind)?;
        Ok(Dianet { config, params, fusion })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    pub fn streams(&self) -> usize {
        self.fusion.streams()
    }

    pub fn fusion_name(&self) -> &'static str {
        self.fusion.name()
    }

    pub fn cast<U: Real>(&self) -> Result<Dianet<U>> {
        Dianet::from_params(self.config.clone(), self.params.cast(), &FusionRegistry::builtin())
    }

    /// Places a raster on the tape, standardised.
    pub fn input_var(&self, tape: &mut Tape<T>, raster: &Raster) -> Result<Var> {
        let want = [self.config.in_channels, self.config.input_size, self.config.input_size];
        if raster.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "backbone input",
                left: want.to_vec(),
                right: raster.shape().to_vec(),
            });
        }
        tape.constant(
            &want,
            raster
                .data
                .iter()
                .map(|&v| T::lit((f64::from(v) - INPUT_MEAN) / INPUT_STD))
                .collect(),
        )
    }

    /// Image → `d`-vector through the backbone named by `prefix`
    /// (`onset` or `offset`).
    pub fn backbone_forward(&self, tape: &mut Tape<T>, params: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, s) in self.config.backbone.stages.iter().enumerate() {
            h = tape.conv2d(h, params.get(&format!("{prefix}.conv{i}.w"))?, s.stride, s.kernel / 2)?;
            h = tape.add_channel_bias(h, params.get(&format!("{prefix}.conv{i}.b"))?)?;
            h = tape.relu(h)?;
            let sh = tape.shape(h).to_vec();
            if sh[1] >= 2 && sh[2] >= 2 {
                h = tape.avg_pool2(h)?;
            }
        }
        let sh = tape.shape(h).to_vec();
        let pooled = if self.config.backbone.flatten {
            tape.flatten(h)?
        } else {
            let flat = tape.reshape(h, &[sh[0], sh[1] * sh[2]])?;
            tape.mean_axis(flat, 1)?
        };
        affine(
            tape,
            pooled,
            params.get(&format!("{prefix}.fc.w"))?,
            params.get(&format!("{prefix}.fc.b"))?,
        )
    }

    pub fn fuse(&self, tape: &mut Tape<T>, params: &Bound, f1: Var, f2: Option<Var>) -> Result<Var> {
        self.fusion.fuse(tape, params, f1, f2, &self.config.fusion)
    }

    /// affine → ReLU → dropout → affine; raw logits.
    pub fn classify<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        fused: Var,
        rng: &mut R,
    ) -> Result<Var> {
        let h = affine(tape, fused, params.get("head.fc1.w")?, params.get("head.fc1.b")?)?;
        let h = tape.relu(h)?;
        let h = tape.dropout(h, self.config.dropout, rng)?;
        affine(tape, h, params.get("head.fc2.w")?, params.get("head.fc2.b")?)
    }

    /// One sample: `inputs` holds one normalised raster per stream.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        params: &Bound,
        inputs: &[&Raster],
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        if inputs.len() != self.streams() {
            return Err(Error::Config(format!(
                "fusion '{}' takes {} stream(s), got {} input(s)",
                self.fusion.name(),
                self.streams(),
                inputs.len()
            )));
        }
        let x1 = self.input_var(tape, inputs[0])?;
        let f1 = self.backbone_forward(tape, params, BACKBONE_ONSET, x1)?;
        let f2 = match inputs.get(1) {
            Some(r) => {
                let x2 = self.input_var(tape, r)?;
                let prefix = if self.config.tie_backbones {
                    BACKBONE_ONSET
                } else {
                    BACKBONE_OFFSET
                };
                Some(self.backbone_forward(tape, params, prefix, x2)?)
            }
            None => None,
        };
        let fused = self.fuse(tape, params, f1, f2)?;
        let logits = self.classify(tape, params, fused, rng)?;
        Ok(ForwardOutput { logits, f1, f2, fused })
    }

    /// Eval-mode logits for one sample.
    pub fn predict_logits(&self, inputs: &[&Raster]) -> Result<Vec<T>> {
        let mut tape = Tape::new(Mode::Eval);
        let bound = self.params.bind(&mut tape)?;
        let mut rng = rng_for(0, "eval");
        let out = self.forward(&mut tape, &bound, inputs, &mut rng)?;
        Ok(tape.value(out.logits).to_vec())
    }
}
