//! Frozen convolutional backbone with a low-level tap and a full-depth output.

use std::path::Path;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::container::{NamedArray, WeightFile};
use crate::error::{FrptError, Result};
use crate::tensor::{Real, Tensor};

/// One `conv3x3 -> relu` stage with zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
}

impl<T: Real> ConvStage<T> {
    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Stage layout: `(in_channels, out_channels, stride)` per stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneArch {
    pub stages: Vec<(usize, usize, usize)>,
    pub block1_tap: usize,
}

impl BackboneArch {
    /// Four stages over RGB input: full-resolution conv, stride-2 conv (the
    /// low-level tap, 16 channels), conv, stride-2 conv to 64 channels.
    pub fn desk() -> Self {
        Self { stages: vec![(3, 16, 1), (16, 16, 2), (16, 32, 1), (32, 64, 2)], block1_tap: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T: Real = f32> {
    pub stages: Vec<ConvStage<T>>,
    pub block1_tap: usize,
}

/// Tape handles of the backbone's weights for one evaluation.
#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl<T: Real> Backbone<T> {
    /// He-initialized weights, zero biases, all frozen.
    pub fn init<R: Rng + ?Sized>(arch: &BackboneArch, rng: &mut R) -> Result<Self> {
        let stages = arch
            .stages
            .iter()
            .map(|&(ci, co, stride)| {
                let std = (2.0 / (ci * 9) as f64).sqrt();
                ConvStage { weight: Tensor::randn(&[co, ci, 3, 3], std, rng), bias: Tensor::zeros(&[co]), stride }
            })
            .collect();
        let model = Self { stages, block1_tap: arch.block1_tap };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(FrptError::Structure("backbone has no stages".into()));
        }
        if self.block1_tap >= self.stages.len() {
            return Err(FrptError::Structure(format!(
                "block1 tap {} outside {} stages",
                self.block1_tap,
                self.stages.len()
            )));
        }
        if self.stages[0].in_channels() != 3 {
            return Err(FrptError::Structure("first stage must take 3 input channels".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let ws = s.weight.shape();
            if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || s.bias.shape() != [ws[0]] || s.stride == 0 {
                return Err(FrptError::Structure(format!("stage {i} has malformed weights {ws:?}")));
            }
            if i > 0 && self.stages[i - 1].out_channels() != s.in_channels() {
                return Err(FrptError::Structure(format!(
                    "stage {i} expects {} channels, previous stage yields {}",
                    s.in_channels(),
                    self.stages[i - 1].out_channels()
                )));
            }
        }
        Ok(())
    }

    /// C_S, channels at the low-level tap.
    pub fn channels_block1(&self) -> usize {
        self.stages[self.block1_tap].out_channels()
    }

    /// C_P, channels at full depth.
    pub fn channels_out(&self) -> usize {
        self.stages.last().expect("validated").out_channels()
    }

    /// Spatial extent after `stages` stages for an `h x w` input.
    pub fn extent_after(&self, stages: usize, h: usize, w: usize) -> (usize, usize) {
        self.stages[..stages].iter().fold((h, w), |(h, w), s| ((h - 1) / s.stride + 1, (w - 1) / s.stride + 1))
    }

    /// `(H_S, W_S)` for an `h x w` input.
    pub fn block1_extent(&self, h: usize, w: usize) -> (usize, usize) {
        self.extent_after(self.block1_tap + 1, h, w)
    }

    pub fn cast<U: Real>(&self) -> Backbone<U> {
        Backbone {
            stages: self
                .stages
                .iter()
                .map(|s| ConvStage { weight: s.weight.cast(), bias: s.bias.cast(), stride: s.stride })
                .collect(),
            block1_tap: self.block1_tap,
        }
    }

    pub fn set_learnable(&mut self, learnable: bool) {
        for s in &mut self.stages {
            s.weight.requires_grad = learnable;
            s.bias.requires_grad = learnable;
            if !learnable {
                s.weight.grad = None;
                s.bias.grad = None;
            }
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.stages.iter().all(|s| !s.weight.requires_grad && !s.bias.requires_grad)
    }

    pub fn parameter_count(&self) -> usize {
        self.stages.iter().map(|s| s.weight.len() + s.bias.len()).sum()
    }

    /// Registers the weights on a tape; learnable only if the backbone is unfrozen.
    pub fn register(&self, tape: &mut Tape<T>) -> BackboneVars {
        let mut vars = BackboneVars { weights: Vec::new(), biases: Vec::new() };
        for s in &self.stages {
            vars.weights.push(tape.leaf(&s.weight));
            vars.biases.push(tape.leaf(&s.bias));
        }
        vars
    }

    /// Runs stages `0..stages` on the tape.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, vars: &BackboneVars, input: Var, stages: usize) -> Result<Var> {
        let mut x = input;
        for (i, s) in self.stages.iter().enumerate().take(stages) {
            let y = tape.conv2d(x, vars.weights[i], Some(vars.biases[i]), s.stride, 1)?;
            x = tape.relu(y);
        }
        Ok(x)
    }

    pub fn block1_on_tape(&self, tape: &mut Tape<T>, vars: &BackboneVars, image: Var) -> Result<Var> {
        self.forward_on_tape(tape, vars, image, self.block1_tap + 1)
    }

    pub fn full_on_tape(&self, tape: &mut Tape<T>, vars: &BackboneVars, image: Var) -> Result<Var> {
        self.forward_on_tape(tape, vars, image, self.stages.len())
    }

    fn forward_plain(&self, image: &Tensor<T>, stages: usize) -> Result<Tensor<T>> {
        if image.shape().len() != 3 || image.shape()[0] != 3 {
            return Err(FrptError::Shape(format!("backbone expects [3,H,W], got {:?}", image.shape())));
        }
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let x = tape.constant(image);
        let y = self.forward_on_tape(&mut tape, &vars, x, stages)?;
        Ok(tape.tensor(y))
    }

    fn register_frozen(&self, tape: &mut Tape<T>) -> BackboneVars {
        let mut vars = BackboneVars { weights: Vec::new(), biases: Vec::new() };
        for s in &self.stages {
            vars.weights.push(tape.constant(&s.weight));
            vars.biases.push(tape.constant(&s.bias));
        }
        vars
    }

    /// Low-level features M_S of `image` (`[3,H,W]`).
    pub fn block1_forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_plain(image, self.block1_tap + 1)
    }

    /// Semantic features M_P of `image`.
    pub fn full_forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_plain(image, self.stages.len())
    }
}

impl Backbone<f32> {
    pub fn to_weight_file(&self) -> WeightFile {
        let mut f = WeightFile::new();
        self.append_to(&mut f, "");
        f
    }

    /// Appends the stage arrays and metadata under `prefix`.
    pub fn append_to(&self, f: &mut WeightFile, prefix: &str) {
        f.push(NamedArray::scalar(format!("{prefix}meta/block1_tap"), self.block1_tap as f32));
        f.push(NamedArray::scalar(format!("{prefix}meta/channels"), self.channels_out() as f32));
        for (i, s) in self.stages.iter().enumerate() {
            f.push_tensor(&format!("{prefix}stage{i}/weight"), &s.weight);
            f.push_tensor(&format!("{prefix}stage{i}/bias"), &s.bias);
            f.push(NamedArray::scalar(format!("{prefix}stage{i}/stride"), s.stride as f32));
        }
    }

    pub fn from_weight_file(f: &WeightFile, prefix: &str) -> Result<Self> {
        let tap = f.integer(&format!("{prefix}meta/block1_tap"))?;
        let channels = f.integer(&format!("{prefix}meta/channels"))?;
        let mut stages = Vec::new();
        while f.get(&format!("{prefix}stage{}/weight", stages.len())).is_some() {
            let i = stages.len();
            stages.push(ConvStage {
                weight: f.tensor(&format!("{prefix}stage{i}/weight"))?,
                bias: f.tensor(&format!("{prefix}stage{i}/bias"))?,
                stride: f.integer(&format!("{prefix}stage{i}/stride"))?,
            });
        }
        let model = Backbone { stages, block1_tap: tap };
        model.validate()?;
        if model.channels_out() != channels {
            return Err(FrptError::Structure(format!(
                "metadata declares {channels} output channels, stages yield {}",
                model.channels_out()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_weight_file().save(path)
    }

    /// Loads a frozen backbone.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_weight_file(&WeightFile::load(path)?, "")
    }
}
