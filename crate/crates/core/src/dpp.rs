//! Discriminative perturbation prompt: a learned, content-aware warp of the
//! input image that magnifies the regions the projection map favors.
//!
//! Pipeline: low-level features `M_S` are parsed by one shared
//! `sigma x sigma x C_S` kernel into a raw map, softmax-normalized into a
//! probability mass `A`, turned into a per-pixel sampling grid by a
//! Gaussian-regularized weighted average of map coordinates, and the image
//! is bilinearly resampled at that grid.

use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, BackboneVars};
use crate::error::{FrptError, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_GAUSSIAN_STD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct DppParams<T: Real = f32> {
    /// Content-aware kernel, indexed `[w][h][c]` with offsets `-r..=r`.
    pub w_k: Tensor<T>,
    pub sigma: usize,
    pub gaussian_std: f64,
}

/// Smallest odd kernel size not below half the map width.
pub fn desk_sigma(map_w: usize) -> usize {
    let s = map_w.div_ceil(2).max(1);
    if s % 2 == 0 {
        s + 1
    } else {
        s
    }
}

impl<T: Real> DppParams<T> {
    /// Zero kernel: a uniform map and a near-identity warp.
    pub fn zeros(c_s: usize, map_w: usize, gaussian_std: f64) -> Self {
        let sigma = desk_sigma(map_w);
        Self { w_k: Tensor::zeros(&[sigma, sigma, c_s]).learnable(), sigma, gaussian_std }
    }

    pub fn validate(&self, map_w: usize, c_s: usize) -> Result<()> {
        validate_sigma(self.sigma, map_w)?;
        if self.w_k.shape() != [self.sigma, self.sigma, c_s] {
            return Err(FrptError::Config(format!(
                "content kernel shape {:?}, expected [{}, {}, {c_s}]",
                self.w_k.shape(),
                self.sigma,
                self.sigma
            )));
        }
        if !(self.gaussian_std > 0.0) {
            return Err(FrptError::Config("gaussian_std must be positive".into()));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.w_k.len()
    }

    pub fn cast<U: Real>(&self) -> DppParams<U> {
        DppParams { w_k: self.w_k.cast(), sigma: self.sigma, gaussian_std: self.gaussian_std }
    }
}

pub fn validate_sigma(sigma: usize, map_w: usize) -> Result<()> {
    if sigma % 2 == 0 {
        return Err(FrptError::Config(format!("content kernel size {sigma} must be odd")));
    }
    if sigma < map_w.div_ceil(2) {
        return Err(FrptError::Config(format!(
            "content kernel size {sigma} is below half the map width {map_w}"
        )));
    }
    Ok(())
}

/// Normalized projection map on a tape: entries non-negative, summing to 1.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionMap(pub Var);

/// Normalized source coordinates `[2, H, W]`: channel 0 is `mx`, 1 is `my`.
#[derive(Debug, Clone, Copy)]
pub struct WarpGrid(pub Var);

/// Raw projection map `[H_S, W_S]` from `m_s` (`[C_S, H_S, W_S]`) and the
/// shared kernel `w_k` (`[sigma, sigma, C_S]`), zero-padded by `sigma / 2`.
pub fn content_parse<T: Real>(tape: &mut Tape<T>, m_s: Var, w_k: Var) -> Result<Var> {
    let ms = tape.shape(m_s).to_vec();
    let ks = tape.shape(w_k).to_vec();
    if ms.len() != 3 || ks.len() != 3 || ks[2] != ms[0] || ks[0] != ks[1] {
        return Err(FrptError::Shape(format!("content kernel {ks:?} against features {ms:?}")));
    }
    let sigma = ks[0];
    validate_sigma(sigma, ms[2])?;
    // [w][h][c] -> [c][h][w], the cross-correlation layout
    let k = tape.permute3(w_k, [2, 1, 0])?;
    let k = tape.reshape(k, &[1, ms[0], sigma, sigma])?;
    let raw = tape.conv2d(m_s, k, None, 1, sigma / 2)?;
    tape.reshape(raw, &[ms[1], ms[2]])
}

pub fn normalize_map<T: Real>(tape: &mut Tape<T>, raw: Var) -> Result<ProjectionMap> {
    let a = tape.softmax(raw)?;
    let v = tape.value(a);
    let total: f64 = v.iter().map(|x| x.to64()).sum();
    debug_assert!(v.iter().all(|&x| x >= T::zero()));
    debug_assert!((total - 1.0).abs() < 1e-4, "projection map mass {total}");
    Ok(ProjectionMap(a))
}

pub fn compute_mapping<T: Real>(
    tape: &mut Tape<T>,
    map: ProjectionMap,
    out_h: usize,
    out_w: usize,
    gaussian_std: f64,
) -> Result<WarpGrid> {
    Ok(WarpGrid(tape.mapping(map.0, out_h, out_w, gaussian_std)?))
}

pub fn warp<T: Real>(tape: &mut Tape<T>, image: Var, grid: WarpGrid) -> Result<Var> {
    tape.warp(image, grid.0)
}

/// Output of [`dpp_forward`].
#[derive(Debug, Clone, Copy)]
pub struct DppOutput {
    pub warped: Var,
    pub map: ProjectionMap,
    pub grid: WarpGrid,
}

/// Warps `image` by the projection map parsed from its own low-level features.
pub fn dpp_forward<T: Real>(
    tape: &mut Tape<T>,
    image: Var,
    backbone: &Backbone<T>,
    backbone_vars: &BackboneVars,
    w_k: Var,
    gaussian_std: f64,
) -> Result<DppOutput> {
    let s = tape.shape(image).to_vec();
    let m_s = backbone.block1_on_tape(tape, backbone_vars, image)?;
    let raw = content_parse(tape, m_s, w_k)?;
    let map = normalize_map(tape, raw)?;
    let grid = compute_mapping(tape, map, s[1], s[2], gaussian_std)?;
    let warped = warp(tape, image, grid)?;
    Ok(DppOutput { warped, map, grid })
}
