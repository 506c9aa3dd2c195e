//! Neural signed-distance field: positional encoding, the SDF and color MLPs,
//! and the Laplace-CDF transform from signed distance to volume density.

pub mod checkpoint;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffengine::{
    laplace_cdf, DiffError, LayoutBuilder, Mat, ParamLayout, ParamVector, SegmentId, Tape, Var,
};
use crate::optim::Adam;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid sphere radius {0}: must lie in (0, 1)")]
    InvalidRadius(f64),
    #[error("sphere fit did not converge after {steps} steps (held-out MAE {residual:.4})")]
    NonConvergence { steps: usize, residual: f64 },
    #[error("direction must be unit length, got |d| = {0}")]
    Direction(f64),
    #[error("parameter layout does not match this field")]
    LayoutMismatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sinusoidal encoding `[x, sin(2^k pi x), cos(2^k pi x)]` for `k < L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalEncoding {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl PositionalEncoding {
    pub fn output_dim(&self) -> usize {
        3 * usize::from(self.include_input) + 6 * self.num_frequencies
    }

    pub fn encode(&self, x: [f64; 3]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.output_dim());
        self.encode_into(x, &mut out);
        out
    }

    fn encode_into(&self, x: [f64; 3], out: &mut Vec<f64>) {
        if self.include_input {
            out.extend_from_slice(&x);
        }
        for k in 0..self.num_frequencies {
            let freq = (1u64 << k) as f64 * std::f64::consts::PI;
            out.extend(x.iter().map(|v| (freq * v).sin()));
            out.extend(x.iter().map(|v| (freq * v).cos()));
        }
    }

    pub fn encode_batch(&self, points: &[[f64; 3]]) -> Mat {
        let mut data = Vec::with_capacity(points.len() * self.output_dim());
        for p in points {
            self.encode_into(*p, &mut data);
        }
        Mat::new(points.len(), self.output_dim(), data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityTransformParams {
    pub alpha: f64,
    pub beta: f64,
}

/// Laplace CDF with scale `beta`: `exp(s/b)/2` for `s <= 0`, `1 - exp(-s/b)/2` otherwise.
pub fn psi_beta(s: f64, beta: f64) -> f64 {
    laplace_cdf(s / beta)
}

/// `alpha * psi_beta(-s)`: dense inside the surface, empty outside.
pub fn sdf_to_density(s: f64, params: DensityTransformParams) -> f64 {
    params.alpha * psi_beta(-s, params.beta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub s: f64,
    pub c: [f64; 3],
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub num_frequencies: usize,
    pub include_input: bool,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub color_width: usize,
    /// Sharpness of the SDF branch activation `softplus(b x) / b`.
    pub softplus_beta: f64,
    pub init_alpha: f64,
    pub init_beta: f64,
    /// Half-extent of the cubic scene bounds centred on the origin.
    pub bound: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            num_frequencies: 6,
            include_input: true,
            hidden_width: 128,
            hidden_layers: 4,
            color_width: 64,
            softplus_beta: 100.0,
            init_alpha: 10.0,
            init_beta: 0.1,
            bound: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: SegmentId,
    b: SegmentId,
}

/// Tape handles for one batch of field evaluations.
#[derive(Debug, Clone, Copy)]
pub struct FieldVars {
    /// `n x 1` signed distances.
    pub s: Var,
    /// `n x 3` colors in `[0, 1]`.
    pub color: Var,
    /// `n x 1` densities.
    pub sigma: Var,
}

/// Architecture and parameter layout of the SDF field.
#[derive(Debug, Clone)]
pub struct SdfField {
    config: FieldConfig,
    encoding: PositionalEncoding,
    layout: Arc<ParamLayout>,
    sdf_hidden: Vec<Dense>,
    sdf_out: Dense,
    color_hidden: Dense,
    color_out: Dense,
    log_alpha: SegmentId,
    log_beta: SegmentId,
}

impl SdfField {
    pub fn new(config: FieldConfig) -> Self {
        let encoding = PositionalEncoding {
            num_frequencies: config.num_frequencies,
            include_input: config.include_input,
        };
        let mut b = LayoutBuilder::new();
        let mut fan_in = encoding.output_dim();
        let mut sdf_hidden = Vec::new();
        for i in 0..config.hidden_layers {
            sdf_hidden.push(Dense {
                w: b.push(format!("sdf.{i}.weight"), config.hidden_width, fan_in),
                b: b.push(format!("sdf.{i}.bias"), 1, config.hidden_width),
            });
            fan_in = config.hidden_width;
        }
        let sdf_out = Dense {
            w: b.push("sdf.out.weight", 1, fan_in),
            b: b.push("sdf.out.bias", 1, 1),
        };
        let color_in = encoding.output_dim() + 3;
        let color_hidden = Dense {
            w: b.push("color.0.weight", config.color_width, color_in),
            b: b.push("color.0.bias", 1, config.color_width),
        };
        let color_out = Dense {
            w: b.push("color.out.weight", 3, config.color_width),
            b: b.push("color.out.bias", 1, 3),
        };
        let log_alpha = b.push("density.log_alpha", 1, 1);
        let log_beta = b.push("density.log_beta", 1, 1);
        Self {
            config,
            encoding,
            layout: Arc::new(b.build()),
            sdf_hidden,
            sdf_out,
            color_hidden,
            color_out,
            log_alpha,
            log_beta,
        }
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn encoding(&self) -> PositionalEncoding {
        self.encoding
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn check_layout(&self, params: &ParamVector) -> Result<(), FieldError> {
        if **params.layout() == *self.layout {
            Ok(())
        } else {
            Err(FieldError::LayoutMismatch)
        }
    }

    /// Gaussian fan-in initialization for the MLPs; density scalars at their
    /// configured initial values.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut p = ParamVector::zeros(self.layout.clone());
        let dense = self
            .sdf_hidden
            .iter()
            .chain([&self.sdf_out, &self.color_hidden, &self.color_out]);
        for d in dense {
            let fan_in = self.layout.segment(d.w).cols as f64;
            let normal = Normal::new(0.0, (1.0 / fan_in).sqrt()).expect("valid std");
            for w in p.segment_mut(d.w) {
                *w = normal.sample(rng);
            }
        }
        p.segment_mut(self.log_alpha)[0] = self.config.init_alpha.ln();
        p.segment_mut(self.log_beta)[0] = self.config.init_beta.ln();
        p
    }

    /// Zeroes the color head so every color evaluates to `sigmoid(0) = 0.5`.
    pub fn zero_color_head(&self, params: &mut ParamVector) {
        for seg in [
            self.color_hidden.w,
            self.color_hidden.b,
            self.color_out.w,
            self.color_out.b,
        ] {
            params.segment_mut(seg).fill(0.0);
        }
    }

    pub fn density_params(&self, params: &ParamVector) -> DensityTransformParams {
        DensityTransformParams {
            alpha: params.segment(self.log_alpha)[0].exp(),
            beta: params.segment(self.log_beta)[0].exp(),
        }
    }

    pub fn set_density_params(&self, params: &mut ParamVector, d: DensityTransformParams) {
        params.segment_mut(self.log_alpha)[0] = d.alpha.ln();
        params.segment_mut(self.log_beta)[0] = d.beta.ln();
    }

    fn clamp_to_bounds(&self, points: &[[f64; 3]]) -> (Vec<[f64; 3]>, Vec<f64>) {
        let b = self.config.bound;
        let mut clamped = Vec::with_capacity(points.len());
        let mut dist = Vec::with_capacity(points.len());
        for p in points {
            let c = p.map(|v| v.clamp(-b, b));
            let d2: f64 = p.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            clamped.push(c);
            dist.push(d2.sqrt());
        }
        (clamped, dist)
    }

    /// Signed distance for a batch of points (`n x 1`). Points outside the
    /// scene bounds are evaluated at their clamped position plus the distance
    /// to the bounds.
    pub fn sdf_on_tape(&self, tape: &mut Tape, points: &[[f64; 3]]) -> Result<Var, DiffError> {
        let (clamped, dist) = self.clamp_to_bounds(points);
        let enc = tape.constant(self.encoding.encode_batch(&clamped))?;
        let s = self.sdf_from_encoding(tape, enc)?;
        if dist.iter().any(|&d| d > 0.0) {
            let d = tape.constant(Mat::new(points.len(), 1, dist))?;
            tape.add(s, d)
        } else {
            Ok(s)
        }
    }

    fn sharp_softplus(&self, tape: &mut Tape, h: Var) -> Result<Var, DiffError> {
        let b = self.config.softplus_beta;
        if b == 1.0 {
            return tape.softplus(h);
        }
        let h = tape.scale(h, b)?;
        let h = tape.softplus(h)?;
        tape.scale(h, 1.0 / b)
    }

    fn sdf_from_encoding(&self, tape: &mut Tape, enc: Var) -> Result<Var, DiffError> {
        let mut h = enc;
        for layer in &self.sdf_hidden {
            h = tape.affine(h, layer.w, Some(layer.b))?;
            h = self.sharp_softplus(tape, h)?;
        }
        tape.affine(h, self.sdf_out.w, Some(self.sdf_out.b))
    }

    /// `alpha * psi_beta(-s)` on the tape, differentiable in `log_alpha`, `log_beta`.
    pub fn density_on_tape(&self, tape: &mut Tape, s: Var) -> Result<Var, DiffError> {
        let la = tape.param(self.log_alpha)?;
        let alpha = tape.exp(la)?;
        let lb = tape.param(self.log_beta)?;
        let nlb = tape.neg(lb)?;
        let inv_beta = tape.exp(nlb)?;
        let z = tape.mul(s, inv_beta)?;
        let nz = tape.neg(z)?;
        let psi = tape.laplace_cdf(nz)?;
        tape.mul(psi, alpha)
    }

    /// Full field evaluation for `n` points and view directions.
    pub fn eval_on_tape(
        &self,
        tape: &mut Tape,
        points: &[[f64; 3]],
        dirs: &[[f64; 3]],
    ) -> Result<FieldVars, DiffError> {
        if points.len() != dirs.len() {
            return Err(DiffError::Shape(format!(
                "{} points but {} directions",
                points.len(),
                dirs.len()
            )));
        }
        let (clamped, dist) = self.clamp_to_bounds(points);
        let enc = tape.constant(self.encoding.encode_batch(&clamped))?;
        let mut s = self.sdf_from_encoding(tape, enc)?;
        if dist.iter().any(|&d| d > 0.0) {
            let d = tape.constant(Mat::new(points.len(), 1, dist))?;
            s = tape.add(s, d)?;
        }
        let dir = tape.constant(Mat::new(
            dirs.len(),
            3,
            dirs.iter().flat_map(|d| d.iter().copied()).collect(),
        ))?;
        let cin = tape.concat_cols(&[enc, dir])?;
        let h = tape.affine(cin, self.color_hidden.w, Some(self.color_hidden.b))?;
        let h = tape.softplus(h)?;
        let logits = tape.affine(h, self.color_out.w, Some(self.color_out.b))?;
        let color = tape.sigmoid(logits)?;
        let sigma = self.density_on_tape(tape, s)?;
        Ok(FieldVars { s, color, sigma })
    }

    /// Single-point evaluation.
    pub fn eval(
        &self,
        params: &ParamVector,
        x: [f64; 3],
        d: [f64; 3],
    ) -> Result<FieldSample, FieldError> {
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(FieldError::Direction(norm));
        }
        self.check_layout(params)?;
        let mut tape = Tape::new(params);
        let vars = self.eval_on_tape(&mut tape, &[x], &[d])?;
        let c = tape.value(vars.color);
        Ok(FieldSample {
            s: tape.value(vars.s).data[0],
            c: [c.data[0], c.data[1], c.data[2]],
            sigma: tape.value(vars.sigma).data[0],
        })
    }

    /// Forward-only signed distances, evaluated in fixed-size chunks.
    pub fn sdf_batch(
        &self,
        params: &ParamVector,
        points: &[[f64; 3]],
    ) -> Result<Vec<f64>, FieldError> {
        use rayon::prelude::*;
        self.check_layout(params)?;
        let chunks: Result<Vec<Vec<f64>>, DiffError> = points
            .par_chunks(4096)
            .map(|chunk| {
                let mut tape = Tape::new(params);
                let s = self.sdf_on_tape(&mut tape, chunk)?;
                Ok(tape.value(s).data.clone())
            })
            .collect();
        Ok(chunks?.concat())
    }

    /// Forward-only colors for points seen along `dirs`.
    pub fn color_batch(
        &self,
        params: &ParamVector,
        points: &[[f64; 3]],
        dirs: &[[f64; 3]],
    ) -> Result<Vec<[f64; 3]>, FieldError> {
        self.check_layout(params)?;
        let mut out = Vec::with_capacity(points.len());
        for (pc, dc) in points.chunks(4096).zip(dirs.chunks(4096)) {
            let mut tape = Tape::new(params);
            let vars = self.eval_on_tape(&mut tape, pc, dc)?;
            out.extend(
                tape.value(vars.color)
                    .data
                    .chunks(3)
                    .map(|c| [c[0], c[1], c[2]]),
            );
        }
        Ok(out)
    }

    /// Eikonal penalty `mean((|grad_x s| - 1)^2)` with the spatial gradient
    /// taken by central differences of step `h`, so the penalty stays
    /// first-order in the parameters.
    pub fn eikonal_on_tape(
        &self,
        tape: &mut Tape,
        points: &[[f64; 3]],
        h: f64,
    ) -> Result<Var, DiffError> {
        let n = points.len();
        let mut probes = Vec::with_capacity(6 * n);
        for axis in 0..3 {
            for sign in [1.0, -1.0] {
                for p in points {
                    let mut q = *p;
                    q[axis] += sign * h;
                    probes.push(q);
                }
            }
        }
        let s = self.sdf_on_tape(tape, &probes)?;
        let s = tape.reshape(s, 6, n)?;
        let mut sq_terms = Vec::with_capacity(3);
        for axis in 0..3 {
            let plus = row_of(tape, s, 2 * axis, n)?;
            let minus = row_of(tape, s, 2 * axis + 1, n)?;
            let diff = tape.sub(plus, minus)?;
            let g = tape.scale(diff, 0.5 / h)?;
            sq_terms.push(tape.square(g)?);
        }
        let a = tape.add(sq_terms[0], sq_terms[1])?;
        let norm2 = tape.add(a, sq_terms[2])?;
        let eps = tape.scalar(1e-12)?;
        let norm2 = tape.add(norm2, eps)?;
        let norm = tape.sqrt(norm2)?;
        let one = tape.scalar(1.0)?;
        let dev = tape.sub(norm, one)?;
        let sq = tape.square(dev)?;
        let total = tape.sum(sq)?;
        tape.scale(total, 1.0 / n as f64)
    }
}

/// Row `row` of a matrix node as a `1 x cols` node.
fn row_of(tape: &mut Tape, m: Var, row: usize, cols: usize) -> Result<Var, DiffError> {
    let rows = tape.value(m).rows;
    let flat = tape.reshape(m, 1, rows * cols)?;
    tape.slice_cols(flat, row * cols, cols)
}

/// Settings for regressing a fresh field onto the analytic sphere SDF.
#[derive(Debug, Clone, Copy)]
pub struct SphereFit {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Required held-out mean absolute error.
    pub tolerance: f64,
}

impl Default for SphereFit {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 512,
            lr: 5e-3,
            tolerance: 0.02,
        }
    }
}

/// Fit points: a quarter uniform in the bounds, a quarter near the shell, a
/// quarter uniform in the ball and a quarter concentrated near the centre,
/// where the distance function has its cusp.
fn sample_fit_points<R: Rng + ?Sized>(rng: &mut R, n: usize, radius: f64, bound: f64) -> Vec<[f64; 3]> {
    (0..n)
        .map(|i| {
            if i % 4 == 0 {
                return [(); 3].map(|_| rng.random_range(-bound..bound));
            }
            let dir = loop {
                let v = [(); 3].map(|_| rng.random_range(-1.0..1.0f64));
                let n2 = v.iter().map(|x| x * x).sum::<f64>();
                if n2 > 1e-6 && n2 <= 1.0 {
                    break v.map(|x| x / n2.sqrt());
                }
            };
            let u = rng.random::<f64>();
            let r = match i % 4 {
                1 => (radius + 0.3 * (u - 0.5)).max(0.0),
                2 => radius * u.cbrt(),
                _ => radius * u.powi(4),
            };
            dir.map(|x| x * r)
        })
        .collect()
}

fn sphere_sdf(p: &[f64; 3], radius: f64) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - radius
}

/// Fresh parameters whose SDF approximates `|x| - radius`.
pub fn init_sphere<R: Rng + ?Sized>(
    field: &SdfField,
    radius: f64,
    fit: SphereFit,
    rng: &mut R,
) -> Result<ParamVector, FieldError> {
    if !(radius > 0.0 && radius < field.config.bound) {
        return Err(FieldError::InvalidRadius(radius));
    }
    let mut params = field.init_params(rng);
    let bound = field.config.bound;
    let held_out = sample_fit_points(rng, 2048, radius, bound);
    let held_target: Vec<f64> = held_out.iter().map(|p| sphere_sdf(p, radius)).collect();
    let mae = |params: &ParamVector| -> Result<f64, FieldError> {
        let s = field.sdf_batch(params, &held_out)?;
        Ok(s.iter()
            .zip(&held_target)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / s.len() as f64)
    };

    let mut opt = Adam::new(fit.lr);
    let density: Vec<usize> = [field.log_alpha, field.log_beta]
        .iter()
        .flat_map(|s| field.layout.segment(*s).range())
        .collect();
    let mut residual = mae(&params)?;
    for step in 0..fit.steps {
        let pts = sample_fit_points(rng, fit.batch, radius, bound);
        let target = Mat::new(
            pts.len(),
            1,
            pts.iter().map(|p| sphere_sdf(p, radius)).collect(),
        );
        let r = crate::diffengine::value_and_grad(&params, |t| {
            let s = field.sdf_on_tape(t, &pts)?;
            let tgt = t.constant(target)?;
            let d = t.sub(s, tgt)?;
            let sq = t.square(d)?;
            let total = t.sum(sq)?;
            t.scale(total, 1.0 / pts.len() as f64)
        })?;
        let mut grad = r.gradient;
        for &i in &density {
            grad[i] = 0.0;
        }
        if step == fit.steps * 4 / 5 {
            opt.lr = fit.lr * 0.1;
        }
        opt.step(params.values_mut(), &grad);
        if (step + 1) % 100 == 0 {
            residual = mae(&params)?;
            if residual < fit.tolerance * 0.25 {
                break;
            }
        }
    }
    residual = residual.min(mae(&params)?);
    if residual < fit.tolerance {
        Ok(params)
    } else {
        Err(FieldError::NonConvergence {
            steps: fit.steps,
            residual,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::{finite_difference_gradient, max_relative_error, value_and_grad};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> FieldConfig {
        FieldConfig {
            num_frequencies: 2,
            hidden_width: 6,
            hidden_layers: 2,
            color_width: 4,
            ..FieldConfig::default()
        }
    }

    #[test]
    fn encode_origin_l1() {
        let pe = PositionalEncoding {
            num_frequencies: 1,
            include_input: true,
        };
        assert_eq!(
            pe.encode([0.0; 3]),
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn encode_identity_when_no_frequencies() {
        let pe = PositionalEncoding {
            num_frequencies: 0,
            include_input: true,
        };
        assert_eq!(pe.encode([0.25, -1.0, 3.0]), vec![0.25, -1.0, 3.0]);
    }

    #[test]
    fn encode_half_gives_unit_sine() {
        let pe = PositionalEncoding {
            num_frequencies: 2,
            include_input: false,
        };
        let e = pe.encode([0.5, 0.0, 0.0]);
        // k = 0 sine block comes first
        assert!((e[0] - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn encode_dimension_formula(l in 0usize..=10, include in any::<bool>(), x in prop::array::uniform3(-2.0f64..2.0)) {
            let pe = PositionalEncoding { num_frequencies: l, include_input: include };
            prop_assert_eq!(pe.encode(x).len(), 3 * usize::from(include) + 6 * l);
            prop_assert_eq!(pe.output_dim(), pe.encode(x).len());
        }

        #[test]
        fn psi_is_a_cdf(beta in 1e-3f64..10.0, a in -50.0f64..50.0, b in -50.0f64..50.0) {
            prop_assert_eq!(psi_beta(0.0, beta), 0.5);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(psi_beta(lo, beta) <= psi_beta(hi, beta));
            let v = psi_beta(a, beta);
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn density_non_increasing(alpha in 0.1f64..100.0, beta in 1e-3f64..10.0, a in -5.0f64..5.0, b in -5.0f64..5.0) {
            let p = DensityTransformParams { alpha, beta };
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(sdf_to_density(lo, p) >= sdf_to_density(hi, p));
        }
    }

    #[test]
    fn psi_reference_values() {
        assert_eq!(psi_beta(0.0, 0.3), 0.5);
        assert!((psi_beta(-1.0, 1.0) - 0.5 * (-1.0f64).exp()).abs() < 1e-15);
        assert!((psi_beta(-1.0, 1.0) - 0.18394).abs() < 1e-5);
        assert!(psi_beta(1e3, 1.0) > 1.0 - 1e-12);
        assert!(psi_beta(-1e3, 1.0) < 1e-12);
    }

    #[test]
    fn density_limits() {
        let p = DensityTransformParams {
            alpha: 10.0,
            beta: 0.1,
        };
        assert_eq!(sdf_to_density(0.0, p), 5.0);
        assert!(sdf_to_density(10.0 * p.beta, p) < 1e-3);
        assert!((sdf_to_density(-10.0 * p.beta, p) - p.alpha).abs() < 1e-3);
    }

    #[test]
    fn zero_color_head_is_gray_and_deterministic() {
        let field = SdfField::new(small_config());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = field.init_params(&mut rng);
        field.zero_color_head(&mut p);
        let a = field.eval(&p, [0.1, 0.2, -0.3], [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(a.c, [0.5; 3]);
        let b = field.eval(&p, [0.1, 0.2, -0.3], [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(a, b);
        let dp = field.density_params(&p);
        assert_eq!(a.sigma, sdf_to_density(a.s, dp));
    }

    #[test]
    fn eval_rejects_non_unit_direction() {
        let field = SdfField::new(small_config());
        let p = field.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(
            field.eval(&p, [0.0; 3], [0.0, 0.0, 2.0]),
            Err(FieldError::Direction(_))
        ));
    }

    #[test]
    fn outside_bounds_adds_distance() {
        let field = SdfField::new(small_config());
        let p = field.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        let s = field.sdf_batch(&p, &[[1.0, 0.0, 0.0], [1.5, 0.0, 0.0]]).unwrap();
        assert!((s[1] - s[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn field_gradients_match_central_differences() {
        let field = SdfField::new(small_config());
        let p = field.init_params(&mut ChaCha8Rng::seed_from_u64(3));
        let pts = [[0.1, -0.4, 0.3], [0.7, 0.2, -0.5], [1.2, 0.0, 0.1]];
        let dirs = [[0.0, 0.0, 1.0], [0.6, 0.8, 0.0], [0.0, -1.0, 0.0]];
        let program = |t: &mut Tape| {
            let v = field.eval_on_tape(t, &pts, &dirs)?;
            let sc = t.sum(v.s)?;
            let cc = t.sum(v.color)?;
            let sg = t.sum(v.sigma)?;
            let a = t.add(sc, cc)?;
            t.add(a, sg)
        };
        let r = value_and_grad(&p, program).unwrap();
        let fd = finite_difference_gradient(&p, program, 5e-5).unwrap();
        let err = max_relative_error(&r.gradient, &fd, 1e-5);
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn eikonal_gradients_match_central_differences() {
        let field = SdfField::new(small_config());
        let p = field.init_params(&mut ChaCha8Rng::seed_from_u64(4));
        let pts = [[0.1, -0.4, 0.3], [0.5, 0.5, -0.2]];
        let program = |t: &mut Tape| field.eikonal_on_tape(t, &pts, 1e-2);
        let r = value_and_grad(&p, program).unwrap();
        let fd = finite_difference_gradient(&p, program, 5e-5).unwrap();
        assert!(max_relative_error(&r.gradient, &fd, 1e-5) < 1e-4);
    }

    #[test]
    fn init_sphere_rejects_degenerate_radius() {
        let field = SdfField::new(small_config());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(
            init_sphere(&field, 0.0, SphereFit::default(), &mut rng),
            Err(FieldError::InvalidRadius(_))
        ));
    }

    #[test]
    fn init_sphere_reports_residual_when_budget_too_small() {
        let field = SdfField::new(small_config());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fit = SphereFit {
            steps: 1,
            ..SphereFit::default()
        };
        match init_sphere(&field, 0.5, fit, &mut rng) {
            Err(FieldError::NonConvergence { residual, .. }) => assert!(residual >= 0.02),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn init_sphere_matches_analytic_sdf() {
        let field = SdfField::new(FieldConfig {
            num_frequencies: 2,
            hidden_width: 32,
            hidden_layers: 2,
            color_width: 8,
            ..FieldConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = init_sphere(&field, 0.5, SphereFit::default(), &mut rng).unwrap();
        let s = field
            .sdf_batch(&params, &[[0.0; 3], [0.5, 0.0, 0.0], [0.0, -0.5, 0.0], [0.0, 0.0, 0.5]])
            .unwrap();
        assert!((s[0] + 0.5).abs() < 0.02, "centre {}", s[0]);
        for v in &s[1..] {
            assert!(v.abs() < 0.02, "surface {v}");
        }
    }
}
