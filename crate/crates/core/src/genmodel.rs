//! Generative surrogate: latent `z`, input `x` (log-conductivity per fine
//! pixel), coarse log-conductivity `X`, coarse solution `Y(X)` and fine
//! output `y`.
//!
//! ```text
//! z ~ N(0, I)
//! x | z ~ N(f(z), diag v(z))
//! X | z ~ N(W_g z + b_g, diag S_X)
//! y | X ~ N(w_h ⊙ P Y(X) + b_h, diag S_y)
//! ```
//!
//! `P` interpolates the coarse P1 solution onto the fine nodes.

use std::f64::consts::PI;
use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::approximators::{Activation, Approximator, Architecture, Layer};
use crate::error::{Error, Result};
use crate::fem::{FemSystem, Mesh, Prolongation, Source};
use crate::field::BoundaryCoeffs;

pub const VAR_MIN: f64 = 1e-8;
pub const VAR_MAX: f64 = 1e4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Clamped `exp(raw)` and its derivative with respect to `raw`.
#[inline]
pub fn clamped_var(raw: f64) -> (f64, f64) {
    let v = raw.exp();
    if v < VAR_MIN {
        (VAR_MIN, 0.0)
    } else if v > VAR_MAX {
        (VAR_MAX, 0.0)
    } else {
        (v, v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentConfig {
    pub dim_z: usize,
    pub coarse_grid: usize,
}

impl LatentConfig {
    /// Latent size of half the number of coarse pixels.
    pub fn for_coarse_grid(coarse_grid: usize) -> Self {
        let dim_z = ((0.5 * (coarse_grid * coarse_grid) as f64).round() as usize).max(1);
        Self { dim_z, coarse_grid }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub fine_grid: usize,
    pub coarse_grid: usize,
    pub dim_z: usize,
    /// Hidden layers of the decoder `z -> (mean, log-variance)` of `x`.
    pub decoder: Vec<Layer>,
    /// Constant source term shared by the fine and coarse models.
    #[serde(default)]
    pub source: f64,
}

impl ModelConfig {
    pub fn new(fine_grid: usize, coarse_grid: usize) -> Self {
        Self {
            fine_grid,
            coarse_grid,
            dim_z: LatentConfig::for_coarse_grid(coarse_grid).dim_z,
            decoder: vec![
                Layer::Dense { outputs: 128, activation: Activation::Tanh },
                Layer::Dense { outputs: 256, activation: Activation::Tanh },
            ],
            source: 0.0,
        }
    }

    pub fn with_decoder_widths(mut self, widths: &[usize]) -> Self {
        self.decoder = widths.iter().map(|&w| Layer::Dense { outputs: w, activation: Activation::Tanh }).collect();
        self
    }

    pub fn with_dim_z(mut self, dim_z: usize) -> Self {
        self.dim_z = dim_z;
        self
    }

    pub fn source(&self) -> Source {
        if self.source == 0.0 {
            Source::Zero
        } else {
            Source::Constant(self.source)
        }
    }
}

/// Offsets of each parameter group inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub decoder: Range<usize>,
    pub w_g: Range<usize>,
    pub b_g: Range<usize>,
    pub log_s_x: Range<usize>,
    pub w_h: Range<usize>,
    pub b_h: Range<usize>,
    pub log_s_y: Range<usize>,
}

impl ParamLayout {
    fn new(decoder: usize, dim_z: usize, dim_xc: usize, dim_y: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        Self {
            decoder: take(decoder),
            w_g: take(dim_xc * dim_z),
            b_g: take(dim_xc),
            log_s_x: take(dim_xc),
            w_h: take(dim_y),
            b_h: take(dim_y),
            log_s_y: take(dim_y),
        }
    }

    pub fn len(&self) -> usize {
        self.log_s_y.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All generative parameters in one vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn decoder(&self) -> &[f64] {
        &self.values[self.layout.decoder.clone()]
    }
    pub fn w_g(&self) -> &[f64] {
        &self.values[self.layout.w_g.clone()]
    }
    pub fn b_g(&self) -> &[f64] {
        &self.values[self.layout.b_g.clone()]
    }
    pub fn log_s_x(&self) -> &[f64] {
        &self.values[self.layout.log_s_x.clone()]
    }
    pub fn w_h(&self) -> &[f64] {
        &self.values[self.layout.w_h.clone()]
    }
    pub fn b_h(&self) -> &[f64] {
        &self.values[self.layout.b_h.clone()]
    }
    pub fn log_s_y(&self) -> &[f64] {
        &self.values[self.layout.log_s_y.clone()]
    }
    pub fn slice_mut(&mut self, r: Range<usize>) -> &mut [f64] {
        &mut self.values[r]
    }
    pub fn var_xc(&self) -> Vec<f64> {
        self.log_s_x().iter().map(|r| clamped_var(*r).0).collect()
    }
    pub fn var_y(&self) -> Vec<f64> {
        self.log_s_y().iter().map(|r| clamped_var(*r).0).collect()
    }
}

/// Coarse solve kept for the reverse pass.
#[derive(Debug)]
pub struct CgmSolution {
    pub system: FemSystem,
    pub y: Vec<f64>,
}

impl CgmSolution {
    /// Gradient of `cotangent·Y` with respect to the log-conductivities `X`.
    pub fn vjp(&self, cotangent: &[f64]) -> Result<Vec<f64>> {
        let g = self.system.solve_vjp(&self.y, cotangent)?;
        Ok(g.iter().zip(self.system.kappa()).map(|(g, k)| g * k).collect())
    }
}

/// One ancestral draw.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    pub z: Vec<f64>,
    pub x: Vec<f64>,
    pub xc: Vec<f64>,
    pub yc: Vec<f64>,
    pub y: Vec<f64>,
}

/// Static structure of the surrogate: meshes, interpolation and decoder layout.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    fine: Arc<Mesh>,
    coarse: Arc<Mesh>,
    prolong: Arc<Prolongation>,
    decoder: Approximator,
    layout: ParamLayout,
    source: Source,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.dim_z == 0 {
            return Err(Error::InvalidParameter("dim_z must be at least 1".into()));
        }
        let fine = Arc::new(Mesh::new(config.fine_grid)?);
        let coarse = Arc::new(Mesh::new(config.coarse_grid)?);
        let prolong = Arc::new(Prolongation::new(&fine, &coarse)?);
        let dim_x = fine.num_pixels();
        let mut layers = config.decoder.clone();
        layers.push(Layer::Dense { outputs: 2 * dim_x, activation: Activation::Identity });
        let decoder = Approximator::new(Architecture { input_dim: config.dim_z, input_channels: 1, layers })?;
        let layout = ParamLayout::new(decoder.num_params(), config.dim_z, coarse.num_pixels(), fine.num_nodes());
        let source = config.source();
        Ok(Self { config, fine, coarse, prolong, decoder, layout, source })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
    pub fn fine_mesh(&self) -> &Arc<Mesh> {
        &self.fine
    }
    pub fn coarse_mesh(&self) -> &Arc<Mesh> {
        &self.coarse
    }
    pub fn prolongation(&self) -> &Prolongation {
        &self.prolong
    }
    pub fn decoder(&self) -> &Approximator {
        &self.decoder
    }
    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }
    pub fn source(&self) -> &Source {
        &self.source
    }
    pub fn dim_z(&self) -> usize {
        self.config.dim_z
    }
    pub fn dim_x(&self) -> usize {
        self.fine.num_pixels()
    }
    pub fn dim_xc(&self) -> usize {
        self.coarse.num_pixels()
    }
    pub fn dim_y(&self) -> usize {
        self.fine.num_nodes()
    }
    pub fn dim_yc(&self) -> usize {
        self.coarse.num_nodes()
    }
    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    pub fn zero_params(&self) -> ModelParams {
        ModelParams { layout: self.layout.clone(), values: vec![0.0; self.layout.len()] }
    }

    pub fn params_from(&self, values: Vec<f64>) -> Result<ModelParams> {
        if values.len() != self.layout.len() {
            return Err(Error::DimensionMismatch { expected: self.layout.len(), got: values.len() });
        }
        Ok(ModelParams { layout: self.layout.clone(), values })
    }

    /// Random initialization. `x_mean` and `x_var` set the decoder's output
    /// biases so that it starts at the marginal moments of the inputs.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R, x_mean: f64, x_var: f64) -> ModelParams {
        let dec = Approximator::init(self.decoder.architecture().clone(), rng).expect("validated architecture");
        let mut p = self.zero_params();
        p.values[self.layout.decoder.clone()].copy_from_slice(&dec.params);
        let dim_x = self.dim_x();
        let bias_start = self.layout.decoder.end - 2 * dim_x;
        p.values[bias_start..bias_start + dim_x].fill(x_mean);
        p.values[bias_start + dim_x..self.layout.decoder.end].fill(x_var.max(VAR_MIN).ln());
        let scale = 0.1 / (self.dim_z() as f64).sqrt();
        for w in &mut p.values[self.layout.w_g.clone()] {
            *w = scale * rng.sample::<f64, _>(StandardNormal);
        }
        p.values[self.layout.b_g.clone()].fill(x_mean);
        p.values[self.layout.log_s_x.clone()].fill((1e-2f64).ln());
        p.values[self.layout.w_h.clone()].fill(1.0);
        p.values[self.layout.log_s_y.clone()].fill((1e-3f64).ln());
        p
    }

    fn check_z(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim_z() {
            return Err(Error::DimensionMismatch { expected: self.dim_z(), got: z.len() });
        }
        Ok(())
    }

    /// Mean and clamped variance of `x | z`.
    pub fn decode_x(&self, z: &[f64], params: &ModelParams) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_z(z)?;
        let out = self.decoder.eval_with(params.decoder(), z)?;
        let (mean, raw) = out.split_at(self.dim_x());
        Ok((mean.to_vec(), raw.iter().map(|r| clamped_var(*r).0).collect()))
    }

    /// `log p(x | z)`. Adds `weight` times the parameter gradient into `grad`
    /// (full layout) and returns `(value, weight · d/dz)`.
    pub fn x_loglik(
        &self,
        params: &ModelParams,
        z: &[f64],
        x: &[f64],
        weight: f64,
        grad: Option<&mut [f64]>,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_z(z)?;
        let dim_x = self.dim_x();
        if x.len() != dim_x {
            return Err(Error::DimensionMismatch { expected: dim_x, got: x.len() });
        }
        let (out, tape) = self.decoder.forward_with(params.decoder(), z)?;
        let mut value = 0.0;
        let mut cot = vec![0.0; 2 * dim_x];
        for i in 0..dim_x {
            let (v, dv) = clamped_var(out[dim_x + i]);
            let r = x[i] - out[i];
            value -= 0.5 * (LN_2PI + v.ln() + r * r / v);
            cot[i] = weight * r / v;
            // d/dv of -½(ln v + r²/v) is -½(1/v - r²/v²)
            cot[dim_x + i] = -0.5 * weight * (1.0 / v - r * r / (v * v)) * dv;
        }
        let gz = match grad {
            Some(g) => self.decoder.backward_into(params.decoder(), tape, &cot, &mut g[self.layout.decoder.clone()])?,
            None => {
                let mut scratch = vec![0.0; self.decoder.num_params()];
                self.decoder.backward_into(params.decoder(), tape, &cot, &mut scratch)?
            }
        };
        Ok((value, gz))
    }

    /// Mean `W_g z + b_g` and variance `S_X` of `X | z`.
    pub fn coarse_map(&self, z: &[f64], params: &ModelParams) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_z(z)?;
        let dz = self.dim_z();
        let w = params.w_g();
        let mean = params
            .b_g()
            .iter()
            .enumerate()
            .map(|(k, b)| b + w[k * dz..(k + 1) * dz].iter().zip(z).map(|(a, c)| a * c).sum::<f64>())
            .collect();
        Ok((mean, params.var_xc()))
    }

    /// `E_{q(X)} log p(X | z)` for `q(X) = N(q_mean, diag q_var)`.
    /// Returns `(value, d/dz, d/dq_mean, d/dq_var)` with gradients scaled by
    /// `weight`, and adds the scaled parameter gradient.
    pub fn xc_expected_loglik(
        &self,
        params: &ModelParams,
        z: &[f64],
        q_mean: &[f64],
        q_var: &[f64],
        weight: f64,
        grad: Option<&mut [f64]>,
    ) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
        let (m, _) = self.coarse_map(z, params)?;
        let dz = self.dim_z();
        let n = self.dim_xc();
        let mut value = 0.0;
        let mut gz = vec![0.0; dz];
        let mut gmean = vec![0.0; n];
        let mut gvar = vec![0.0; n];
        let mut gm = vec![0.0; n];
        let mut graw = vec![0.0; n];
        for k in 0..n {
            let (s, ds) = clamped_var(params.log_s_x()[k]);
            let r = q_mean[k] - m[k];
            let sq = r * r + q_var[k];
            value -= 0.5 * (LN_2PI + s.ln() + sq / s);
            gmean[k] = -weight * r / s;
            gvar[k] = -0.5 * weight / s;
            gm[k] = weight * r / s;
            graw[k] = -0.5 * weight * (1.0 / s - sq / (s * s)) * ds;
        }
        let w = params.w_g();
        for k in 0..n {
            for j in 0..dz {
                gz[j] += gm[k] * w[k * dz + j];
            }
        }
        if let Some(g) = grad {
            for k in 0..n {
                for j in 0..dz {
                    g[self.layout.w_g.start + k * dz + j] += gm[k] * z[j];
                }
                g[self.layout.b_g.start + k] += gm[k];
                g[self.layout.log_s_x.start + k] += graw[k];
            }
        }
        Ok((value, gz, gmean, gvar))
    }

    pub fn cgm_system(&self, xc: &[f64], bc: &BoundaryCoeffs) -> Result<FemSystem> {
        if xc.len() != self.dim_xc() {
            return Err(Error::DimensionMismatch { expected: self.dim_xc(), got: xc.len() });
        }
        let kappa = xc.iter().map(|v| v.exp()).collect();
        FemSystem::new(self.coarse.clone(), kappa, *bc, &self.source)
    }

    /// Coarse solution with conductivity `exp(X)` and the datum's boundary data.
    pub fn cgm_forward(&self, xc: &[f64], bc: &BoundaryCoeffs) -> Result<CgmSolution> {
        let system = self.cgm_system(xc, bc)?;
        let y = system.solve()?.y;
        Ok(CgmSolution { system, y })
    }

    /// Mean `w_h ⊙ P Y + b_h` and variance `S_y` of `y | Y`.
    pub fn output_map(&self, yc: &[f64], params: &ModelParams) -> Result<(Vec<f64>, Vec<f64>)> {
        if yc.len() != self.dim_yc() {
            return Err(Error::DimensionMismatch { expected: self.dim_yc(), got: yc.len() });
        }
        let py = self.prolong.apply(yc);
        let mean = py.iter().zip(params.w_h()).zip(params.b_h()).map(|((p, w), b)| w * p + b).collect();
        Ok((mean, params.var_y()))
    }

    /// `E_{q(y)} log p(y | X)` with `q(y)` having mean `y_mean` and marginal
    /// variances `y_var` (zero for an observed `y`). Returns
    /// `(value, weight · d/dX)` and adds the scaled parameter gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn y_expected_loglik(
        &self,
        params: &ModelParams,
        xc: &[f64],
        bc: &BoundaryCoeffs,
        y_mean: &[f64],
        y_var: Option<&[f64]>,
        weight: f64,
        grad: Option<&mut [f64]>,
    ) -> Result<(f64, Vec<f64>)> {
        let n = self.dim_y();
        if y_mean.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: y_mean.len() });
        }
        let cgm = self.cgm_forward(xc, bc)?;
        let py = self.prolong.apply(&cgm.y);
        let (wh, bh, ls) = (params.w_h(), params.b_h(), params.log_s_y());
        let mut value = 0.0;
        let mut cot_py = vec![0.0; n];
        let mut g_local = grad.is_some().then(|| (vec![0.0; n], vec![0.0; n], vec![0.0; n]));
        for i in 0..n {
            let (s, ds) = clamped_var(ls[i]);
            let h = wh[i] * py[i] + bh[i];
            let r = y_mean[i] - h;
            let sq = r * r + y_var.map_or(0.0, |v| v[i]);
            value -= 0.5 * (LN_2PI + s.ln() + sq / s);
            let gh = weight * r / s;
            cot_py[i] = gh * wh[i];
            if let Some((gw, gb, gs)) = g_local.as_mut() {
                gw[i] = gh * py[i];
                gb[i] = gh;
                gs[i] = -0.5 * weight * (1.0 / s - sq / (s * s)) * ds;
            }
        }
        if let (Some(g), Some((gw, gb, gs))) = (grad, g_local) {
            for i in 0..n {
                g[self.layout.w_h.start + i] += gw[i];
                g[self.layout.b_h.start + i] += gb[i];
                g[self.layout.log_s_y.start + i] += gs[i];
            }
        }
        let cot_y = self.prolong.apply_transpose(&cot_py);
        let gx = cgm.vjp(&cot_y)?;
        Ok((value, gx))
    }

    /// Mean of `y` given `X`, i.e. `h(Y(X))`.
    pub fn predict_mean(&self, params: &ModelParams, xc: &[f64], bc: &BoundaryCoeffs) -> Result<Vec<f64>> {
        let cgm = self.cgm_forward(xc, bc)?;
        Ok(self.output_map(&cgm.y, params)?.0)
    }

    /// Ancestral sample through every level of the model.
    pub fn sample_joint<R: Rng + ?Sized>(&self, params: &ModelParams, bc: &BoundaryCoeffs, rng: &mut R) -> Result<JointSample> {
        let z = prior_sample(self.dim_z(), rng);
        let (mx, vx) = self.decode_x(&z, params)?;
        let x = gaussian_draw(&mx, &vx, rng);
        let (mc, vc) = self.coarse_map(&z, params)?;
        let xc = gaussian_draw(&mc, &vc, rng);
        let yc = self.cgm_forward(&xc, bc)?.y;
        let (my, vy) = self.output_map(&yc, params)?;
        let y = gaussian_draw(&my, &vy, rng);
        Ok(JointSample { z, x, xc, yc, y })
    }

    /// `log p(z, x, X, y)` of a joint sample.
    pub fn joint_logpdf(&self, params: &ModelParams, s: &JointSample, bc: &BoundaryCoeffs) -> Result<f64> {
        let lz = prior_logpdf(&s.z);
        let (mx, vx) = self.decode_x(&s.z, params)?;
        let (mc, vc) = self.coarse_map(&s.z, params)?;
        let yc = self.cgm_forward(&s.xc, bc)?.y;
        let (my, vy) = self.output_map(&yc, params)?;
        Ok(lz + diag_gaussian_logpdf(&s.x, &mx, &vx) + diag_gaussian_logpdf(&s.xc, &mc, &vc) + diag_gaussian_logpdf(&s.y, &my, &vy))
    }
}

pub fn prior_logpdf(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * (2.0 * PI).ln()
}

pub fn prior_sample<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn diag_gaussian_logpdf(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(var)
        .map(|((x, m), v)| -0.5 * (LN_2PI + v.ln() + (x - m) * (x - m) / v))
        .sum()
}

pub fn gaussian_draw<R: Rng + ?Sized>(mean: &[f64], var: &[f64], rng: &mut R) -> Vec<f64> {
    mean.iter().zip(var).map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn small() -> (Model, ModelParams) {
        let m = Model::new(ModelConfig::new(4, 2).with_decoder_widths(&[6])).unwrap();
        let mut r = rng::stream(9, 0);
        let p = m.init_params(&mut r, 0.4, 0.64);
        (m, p)
    }

    #[test]
    fn latent_default_is_half_coarse_pixels() {
        assert_eq!(LatentConfig::for_coarse_grid(4).dim_z, 8);
        assert_eq!(LatentConfig::for_coarse_grid(1).dim_z, 1);
        assert_eq!(LatentConfig::for_coarse_grid(3).dim_z, 5);
    }

    #[test]
    fn prior_values() {
        assert!((prior_logpdf(&[0.0, 0.0]) + (2.0 * PI).ln()).abs() < 1e-15);
        assert!((prior_logpdf(&[1.0, 0.0]) + 0.5 + (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn variance_clamp_holds() {
        let (m, mut p) = small();
        let r = m.layout().decoder.clone();
        for v in &mut p.values[r] {
            *v = 50.0;
        }
        let (_, var) = m.decode_x(&[3.0, -2.0], &p).unwrap();
        assert!(var.iter().all(|v| (VAR_MIN..=VAR_MAX).contains(v)));
        for v in &mut p.values[m.layout().decoder.clone()] {
            *v = -50.0;
        }
        let (_, var) = m.decode_x(&[3.0, -2.0], &p).unwrap();
        assert!(var.iter().all(|v| (VAR_MIN..=VAR_MAX).contains(v)));
    }

    #[test]
    fn x_loglik_at_mean() {
        let (m, p) = small();
        let z = [0.3, -0.1];
        let (mean, var) = m.decode_x(&z, &p).unwrap();
        let (v, _) = m.x_loglik(&p, &z, &mean, 1.0, None).unwrap();
        let expected: f64 = var.iter().map(|v| -0.5 * (2.0 * PI * v).ln()).sum();
        assert!((v - expected).abs() < 1e-10);
    }

    #[test]
    fn coarse_map_linear() {
        let (m, mut p) = small();
        let r = m.layout().w_g.clone();
        p.values[r].fill(0.0);
        let (mean, _) = m.coarse_map(&[1.0, 2.0], &p).unwrap();
        assert_eq!(mean, p.b_g().to_vec());
    }

    #[test]
    fn cgm_constant_field_is_linear() {
        let (m, _) = small();
        let cgm = m.cgm_forward(&[0.0; 4], &BoundaryCoeffs::new(0.0, 0.0, 1.0, 1.0)).unwrap();
        for (n, y) in cgm.y.iter().enumerate() {
            assert!((y - m.coarse_mesh().node(n)[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn output_map_bias_only() {
        let (m, mut p) = small();
        p.values[m.layout().b_h.clone()].fill(0.7);
        let (mean, _) = m.output_map(&vec![0.0; 9], &p).unwrap();
        assert!(mean.iter().all(|v| *v == 0.7));
    }

    #[test]
    fn grid_mismatch_rejected() {
        assert!(matches!(Model::new(ModelConfig::new(6, 4)), Err(Error::GridMismatch { .. })));
    }

    #[test]
    fn joint_sample_reproducible() {
        let (m, p) = small();
        let bc = BoundaryCoeffs::new(0.1, 0.2, -0.3, 0.4);
        let a = m.sample_joint(&p, &bc, &mut rng::stream(1, 1)).unwrap();
        let b = m.sample_joint(&p, &bc, &mut rng::stream(1, 1)).unwrap();
        assert_eq!(a, b);
        assert!(m.joint_logpdf(&p, &a, &bc).unwrap().is_finite());
    }
}
