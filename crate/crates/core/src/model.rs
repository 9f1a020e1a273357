//! Learnable prompt state and the end-to-end forward pipeline:
//! warp -> frozen backbone -> awareness head -> pooled embedding -> classifier.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, BackboneVars};
use crate::cah::{self, CahParams};
use crate::container::{NamedArray, WeightFile};
use crate::dpp::{self, DppParams, ProjectionMap, WarpGrid};
use crate::error::{FrptError, Result};
use crate::tensor::{Real, Tensor};

/// Which parts of the prompt are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_dpp: bool,
    pub use_cah: bool,
    /// Instance normalization inside the head; off means `w_c ⊙ M_P`.
    pub use_in: bool,
    /// Unfreezes the backbone. Baseline comparisons only.
    pub finetune: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { use_dpp: true, use_cah: true, use_in: true, finetune: false }
    }
}

impl Ablation {
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.use_dpp {
            parts.push("DPP");
        }
        parts.push(if self.finetune { "FT" } else { "PT" });
        if self.use_cah {
            parts.push(if self.use_in { "CAH" } else { "CAH(w/o IN)" });
        }
        parts.join("+")
    }
}

/// Channel/extent sizes that determine the learnable parameter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScalePreset {
    pub sigma: usize,
    pub c_s: usize,
    pub c_p: usize,
    pub reduction: usize,
}

impl ScalePreset {
    /// The desk backbone on 32x32 inputs.
    pub const DESK: ScalePreset = ScalePreset { sigma: 9, c_s: 16, c_p: 64, reduction: 8 };
    /// ResNet-50 sizes: 31x31 parsing kernel over the 256-channel stage-1
    /// output, 2048 channels at depth.
    pub const PAPER: ScalePreset = ScalePreset { sigma: 31, c_s: 256, c_p: 2048, reduction: 8 };

    pub fn dpp_count(&self) -> usize {
        self.sigma * self.sigma * self.c_s
    }

    pub fn cah_count(&self) -> usize {
        2 * self.c_p * self.c_p / self.reduction
    }

    pub fn classifier_count(&self, classes: usize) -> usize {
        classes * (self.c_p + 1)
    }

    /// `sigma²·C_S + 2·C_P²/r + K·(C_P + 1)` restricted to the active parts.
    pub fn learnable_count(&self, classes: usize, ablation: &Ablation) -> usize {
        let mut n = self.classifier_count(classes);
        if ablation.use_dpp {
            n += self.dpp_count();
        }
        if ablation.use_cah {
            n += self.cah_count();
        }
        n
    }
}

/// The only learnable state of a frozen-backbone run.
#[derive(Debug, Clone, PartialEq)]
pub struct FrptParams<T: Real = f32> {
    pub dpp: Option<DppParams<T>>,
    pub cah: Option<CahParams<T>>,
    pub clf_w: Tensor<T>,
    pub clf_b: Tensor<T>,
    pub use_in: bool,
}

/// Tape handles of the learnable tensors, in [`FrptParams::named_mut`] order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub w_k: Option<Var>,
    pub w_f: Option<Var>,
    pub w_l: Option<Var>,
    pub clf_w: Var,
    pub clf_b: Var,
}

impl ParamVars {
    pub fn ordered(&self) -> Vec<Var> {
        let mut v: Vec<Var> = [self.w_k, self.w_f, self.w_l].into_iter().flatten().collect();
        v.push(self.clf_w);
        v.push(self.clf_b);
        v
    }
}

/// Everything one pipeline evaluation records.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub params: ParamVars,
    pub backbone: BackboneVars,
    pub image: Var,
    pub warped: Option<Var>,
    pub map: Option<ProjectionMap>,
    pub grid: Option<WarpGrid>,
    pub m_p: Var,
    pub w_c: Option<Var>,
    pub m_r: Var,
    pub embedding: Var,
    pub logits: Var,
}

impl<T: Real> FrptParams<T> {
    /// Zero content kernel, gate at 0.5, zero classifier.
    pub fn init<R: Rng + ?Sized>(
        backbone: &Backbone<T>,
        image_size: usize,
        classes: usize,
        ablation: &Ablation,
        gaussian_std: f64,
        reduction: usize,
        epsilon: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let c_p = backbone.channels_out();
        let (_, map_w) = backbone.block1_extent(image_size, image_size);
        let dpp = ablation
            .use_dpp
            .then(|| DppParams::zeros(backbone.channels_block1(), map_w, gaussian_std));
        if let Some(d) = &dpp {
            d.validate(map_w, backbone.channels_block1())?;
        }
        let cah = if ablation.use_cah { Some(CahParams::init(c_p, reduction, epsilon, rng)?) } else { None };
        Ok(Self {
            dpp,
            cah,
            clf_w: Tensor::zeros(&[classes, c_p]).learnable(),
            clf_b: Tensor::zeros(&[classes]).learnable(),
            use_in: ablation.use_in,
        })
    }

    pub fn classes(&self) -> usize {
        self.clf_w.shape()[0]
    }

    pub fn parameter_count(&self) -> usize {
        self.dpp.as_ref().map_or(0, |d| d.parameter_count())
            + self.cah.as_ref().map_or(0, |c| c.parameter_count())
            + self.clf_w.len()
            + self.clf_b.len()
    }

    /// Learnable tensors with their checkpoint names and whether weight
    /// decay applies.
    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>, bool)> {
        let mut v: Vec<(&'static str, &mut Tensor<T>, bool)> = Vec::new();
        if let Some(d) = self.dpp.as_mut() {
            v.push(("dpp/w_k", &mut d.w_k, true));
        }
        if let Some(c) = self.cah.as_mut() {
            v.push(("cah/w_f", &mut c.w_f, true));
            v.push(("cah/w_l", &mut c.w_l, true));
        }
        v.push(("clf/w", &mut self.clf_w, true));
        v.push(("clf/b", &mut self.clf_b, false));
        v
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut v: Vec<(&'static str, &Tensor<T>)> = Vec::new();
        if let Some(d) = self.dpp.as_ref() {
            v.push(("dpp/w_k", &d.w_k));
        }
        if let Some(c) = self.cah.as_ref() {
            v.push(("cah/w_f", &c.w_f));
            v.push(("cah/w_l", &c.w_l));
        }
        v.push(("clf/w", &self.clf_w));
        v.push(("clf/b", &self.clf_b));
        v
    }

    pub fn cast<U: Real>(&self) -> FrptParams<U> {
        FrptParams {
            dpp: self.dpp.as_ref().map(|d| d.cast()),
            cah: self.cah.as_ref().map(|c| c.cast()),
            clf_w: self.clf_w.cast(),
            clf_b: self.clf_b.cast(),
            use_in: self.use_in,
        }
    }

    pub fn register(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars {
            w_k: self.dpp.as_ref().map(|d| tape.leaf(&d.w_k)),
            w_f: self.cah.as_ref().map(|c| tape.leaf(&c.w_f)),
            w_l: self.cah.as_ref().map(|c| tape.leaf(&c.w_l)),
            clf_w: tape.leaf(&self.clf_w),
            clf_b: tape.leaf(&self.clf_b),
        }
    }

    /// Full pipeline on one `[3, H, W]` image.
    pub fn forward(&self, tape: &mut Tape<T>, backbone: &Backbone<T>, image: &Tensor<T>) -> Result<PipelineOutput> {
        let params = self.register(tape);
        let backbone_vars = backbone.register(tape);
        let image = tape.constant(image);
        self.forward_vars(tape, backbone, backbone_vars, params, image)
    }

    /// Pipeline over tensors already on the tape. The values behind
    /// `params` take precedence over the ones stored in `self`.
    pub fn forward_vars(
        &self,
        tape: &mut Tape<T>,
        backbone: &Backbone<T>,
        backbone_vars: BackboneVars,
        params: ParamVars,
        image: Var,
    ) -> Result<PipelineOutput> {
        let (input, warped, map, grid) = match (&self.dpp, params.w_k) {
            (Some(d), Some(w_k)) => {
                let out = dpp::dpp_forward(tape, image, backbone, &backbone_vars, w_k, d.gaussian_std)?;
                (out.warped, Some(out.warped), Some(out.map), Some(out.grid))
            }
            _ => (image, None, None, None),
        };
        let m_p = backbone.full_on_tape(tape, &backbone_vars, input)?;
        let (m_r, w_c) = match (&self.cah, params.w_f, params.w_l) {
            (Some(c), Some(w_f), Some(w_l)) => {
                let w_c = cah::channel_attention(tape, m_p, w_f, w_l)?;
                (cah::cah_forward(tape, m_p, w_c, c.epsilon, self.use_in)?, Some(w_c))
            }
            _ => (m_p, None),
        };
        let embedding = tape.gap(m_r)?;
        let logits = tape.fc(embedding, params.clf_w, Some(params.clf_b))?;
        Ok(PipelineOutput {
            params,
            backbone: backbone_vars,
            image,
            warped,
            map,
            grid,
            m_p,
            w_c,
            m_r,
            embedding,
            logits,
        })
    }

    /// Pipeline plus cross-entropy against `label`.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        backbone: &Backbone<T>,
        image: &Tensor<T>,
        label: usize,
    ) -> Result<(PipelineOutput, Var)> {
        let out = self.forward(tape, backbone, image)?;
        let loss = tape.cross_entropy(out.logits, label)?;
        Ok((out, loss))
    }

    /// Pooled `[C_P]` retrieval embedding; the classifier is not applied.
    pub fn embed(&self, backbone: &Backbone<T>, image: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, backbone, image)?;
        Ok(tape.value(out.embedding).to_vec())
    }
}

impl FrptParams<f32> {
    pub fn ablation(&self, finetune: bool) -> Ablation {
        Ablation { use_dpp: self.dpp.is_some(), use_cah: self.cah.is_some(), use_in: self.use_in, finetune }
    }

    /// Checkpoint arrays: `dpp/w_k`, `cah/w_f`, `cah/w_l`, `clf/w`, `clf/b`
    /// plus `meta/*` settings and, for fine-tuned runs, `backbone/*`.
    pub fn to_weight_file(&self, tuned_backbone: Option<&Backbone>) -> WeightFile {
        let mut f = WeightFile::new();
        for (name, t) in self.named() {
            f.push_tensor(name, t);
        }
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        f.push(NamedArray::scalar("meta/use_in", flag(self.use_in)));
        if let Some(d) = &self.dpp {
            f.push(NamedArray::scalar("meta/gaussian_std", d.gaussian_std as f32));
        }
        if let Some(c) = &self.cah {
            f.push(NamedArray::scalar("meta/reduction", c.reduction as f32));
            f.push(NamedArray::scalar("meta/epsilon", c.epsilon as f32));
        }
        if let Some(b) = tuned_backbone {
            b.append_to(&mut f, "backbone/");
        }
        f
    }

    /// Restores parameters and, if present, the fine-tuned backbone.
    pub fn from_weight_file(f: &WeightFile) -> Result<(Self, Option<Backbone>)> {
        let learn = |name: &str| f.tensor(name).map(|t| t.learnable());
        let dpp = match f.get("dpp/w_k") {
            Some(_) => {
                let w_k = learn("dpp/w_k")?;
                let s = w_k.shape().to_vec();
                if s.len() != 3 || s[0] != s[1] {
                    return Err(FrptError::Structure(format!("dpp/w_k has shape {s:?}")));
                }
                Some(DppParams { sigma: s[0], w_k, gaussian_std: f.real("meta/gaussian_std")? as f64 })
            }
            None => None,
        };
        let cah = match f.get("cah/w_f") {
            Some(_) => Some(CahParams {
                w_f: learn("cah/w_f")?,
                w_l: learn("cah/w_l")?,
                reduction: f.integer("meta/reduction")?,
                epsilon: f.real("meta/epsilon")? as f64,
            }),
            None => None,
        };
        let params = FrptParams {
            dpp,
            cah,
            clf_w: learn("clf/w")?,
            clf_b: learn("clf/b")?,
            use_in: f.real("meta/use_in")? != 0.0,
        };
        let tuned = match f.get("backbone/meta/block1_tap") {
            Some(_) => Some(Backbone::from_weight_file(f, "backbone/")?),
            None => None,
        };
        Ok((params, tuned))
    }

    /// `σ²·C_S + 2·C_P²/r + K·(C_P + 1)` with each active term spelled out.
    pub fn parameter_banner(&self) -> String {
        let mut terms = Vec::new();
        if let Some(d) = &self.dpp {
            let s = d.w_k.shape();
            terms.push(format!("dpp {}²·{} = {}", s[0], s[2], d.parameter_count()));
        }
        if let Some(c) = &self.cah {
            terms.push(format!("cah 2·{}²/{} = {}", c.channels(), c.reduction, c.parameter_count()));
        }
        let (k, c_p) = (self.clf_w.shape()[0], self.clf_w.shape()[1]);
        terms.push(format!("classifier {k}·({c_p}+1) = {}", k * (c_p + 1)));
        format!("learnable parameters: {} [{}]", self.parameter_count(), terms.join(", "))
    }

    /// Warped image and projection map of one `[3, H, W]` image.
    pub fn warp_view(&self, backbone: &Backbone, image: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, backbone, image)?;
        let (Some(warped), Some(map)) = (out.warped, out.map) else {
            return Err(FrptError::Config("checkpoint has no perturbation prompt".into()));
        };
        let view = |v: Var| Tensor::new(tape.shape(v), tape.value(v).to_vec());
        Ok((view(warped)?, view(map.0)?))
    }

    /// Checks the parameters fit `backbone` and image size.
    pub fn check_compatible(&self, backbone: &Backbone, image_size: usize) -> Result<()> {
        let c_p = backbone.channels_out();
        if self.clf_w.shape().len() != 2 || self.clf_w.shape()[1] != c_p || self.clf_b.shape() != [self.classes()] {
            return Err(FrptError::Structure(format!("classifier {:?} does not fit C_P = {c_p}", self.clf_w.shape())));
        }
        if let Some(d) = &self.dpp {
            let (_, map_w) = backbone.block1_extent(image_size, image_size);
            d.validate(map_w, backbone.channels_block1()).map_err(|e| FrptError::Structure(e.to_string()))?;
        }
        if let Some(c) = &self.cah {
            let hidden = c_p / c.reduction.max(1);
            if c.w_f.shape() != [hidden, c_p] || c.w_l.shape() != [c_p, hidden] {
                return Err(FrptError::Structure("awareness head does not fit backbone".into()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, tuned_backbone: Option<&Backbone>) -> Result<()> {
        self.to_weight_file(tuned_backbone).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Option<Backbone>)> {
        Self::from_weight_file(&WeightFile::load(path)?)
    }
}
