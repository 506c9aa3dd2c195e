//! Reverse-mode differentiation for every differentiable stage of the pipeline
//! (field evaluation, volume compositing, texture sampling), plus the central
//! finite-difference oracle used to check it.

mod params;
mod tape;

pub use params::{LayoutBuilder, ParamLayout, ParamVector, Segment, SegmentId};
pub use tape::{laplace_cdf, sigmoid, softplus, Mat, SparseRows, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("non-finite value produced by `{primitive}` (segment {segment:?}, entry {index})")]
    NonFinite {
        primitive: &'static str,
        segment: Option<String>,
        index: usize,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("layout error: {0}")]
    Layout(String),
    #[error("{0}")]
    Invalid(String),
}

/// Output values of a computation together with the gradient of its
/// scalarized (summed) output.
#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    pub value: Vec<f64>,
    pub gradient: Vec<f64>,
}

impl GradResult {
    /// Sum of all output entries, the quantity `gradient` differentiates.
    pub fn scalar(&self) -> f64 {
        self.value.iter().sum()
    }
}

/// Evaluates `computation` on a fresh tape and returns the exact reverse-mode
/// gradient of the sum of its outputs.
pub fn value_and_grad<F>(params: &ParamVector, computation: F) -> Result<GradResult, DiffError>
where
    F: FnOnce(&mut Tape) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new(params);
    let out = computation(&mut tape)?;
    let value = tape.value(out).clone();
    let seed = Mat::filled(value.rows, value.cols, 1.0);
    let gradient = tape.backward(out, &seed)?;
    Ok(GradResult {
        value: value.data,
        gradient,
    })
}

/// Vector-Jacobian product: gradient of `<seed, computation(params)>`.
pub fn vjp<F>(params: &ParamVector, computation: F, seed: &[f64]) -> Result<GradResult, DiffError>
where
    F: FnOnce(&mut Tape) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new(params);
    let out = computation(&mut tape)?;
    let value = tape.value(out).clone();
    if seed.len() != value.len() {
        return Err(DiffError::Shape(format!(
            "seed has {} entries, output has {}",
            seed.len(),
            value.len()
        )));
    }
    let gradient = tape.backward(out, &Mat::new(value.rows, value.cols, seed.to_vec()))?;
    Ok(GradResult {
        value: value.data,
        gradient,
    })
}

/// Forward evaluation only, scalarized by summation.
pub fn evaluate<F>(params: &ParamVector, computation: F) -> Result<f64, DiffError>
where
    F: FnOnce(&mut Tape) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new(params);
    let out = computation(&mut tape)?;
    Ok(tape.value(out).data.iter().sum())
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` for every coordinate.
pub fn finite_difference_gradient<F>(
    params: &ParamVector,
    computation: F,
    h: f64,
) -> Result<Vec<f64>, DiffError>
where
    F: Fn(&mut Tape) -> Result<Var, DiffError>,
{
    if !(h > 0.0) {
        return Err(DiffError::Invalid(format!("step must be positive, got {h}")));
    }
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = params.values()[i];
        probe.values_mut()[i] = orig + h;
        let plus = evaluate(&probe, &computation)?;
        probe.values_mut()[i] = orig - h;
        let minus = evaluate(&probe, &computation)?;
        probe.values_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest relative error `|a - b| / max(|a|, |b|, floor)` over two gradients.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_params(v: f64) -> (ParamVector, SegmentId) {
        let mut b = LayoutBuilder::new();
        let x = b.push("x", 1, 1);
        let p = ParamVector::from_values(Arc::new(b.build()), vec![v]).unwrap();
        (p, x)
    }

    #[test]
    fn square_value_and_grad() {
        let (p, x) = scalar_params(3.0);
        let r = value_and_grad(&p, |t| {
            let v = t.param(x)?;
            t.mul(v, v)
        })
        .unwrap();
        assert_eq!(r.scalar(), 9.0);
        assert_eq!(r.gradient, vec![6.0]);
    }

    #[test]
    fn constant_has_zero_grad() {
        let (p, _) = scalar_params(3.0);
        let r = value_and_grad(&p, |t| t.scalar(4.0)).unwrap();
        assert_eq!(r.gradient, vec![0.0]);
    }

    #[test]
    fn fd_of_square_and_linear() {
        let (p, x) = scalar_params(1.0);
        let g = finite_difference_gradient(
            &p,
            |t| {
                let v = t.param(x)?;
                t.mul(v, v)
            },
            1e-4,
        )
        .unwrap();
        assert!((g[0] - 2.0).abs() < 1e-7);
        for h in [1e-1, 1e-3, 0.5] {
            let g = finite_difference_gradient(
                &p,
                |t| {
                    let v = t.param(x)?;
                    t.scale(v, 3.0)
                },
                h,
            )
            .unwrap();
            assert!((g[0] - 3.0).abs() < 1e-12, "h={h} g={}", g[0]);
        }
        assert!(finite_difference_gradient(&p, |t| t.scalar(0.0), 0.0).is_err());
    }

    #[test]
    fn non_finite_names_primitive_and_segment() {
        let (p, x) = scalar_params(1000.0);
        let err = value_and_grad(&p, |t| {
            let v = t.param(x)?;
            t.exp(v)
        })
        .unwrap_err();
        match err {
            DiffError::NonFinite {
                primitive, segment, ..
            } => {
                assert_eq!(primitive, "exp");
                assert_eq!(segment.as_deref(), Some("x"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn mlp(
        t: &mut Tape,
        layers: &[(SegmentId, Option<SegmentId>)],
        x: Mat,
    ) -> Result<Var, DiffError> {
        let mut h = t.constant(x)?;
        for (i, (w, b)) in layers.iter().enumerate() {
            h = t.affine(h, *w, *b)?;
            if i + 1 < layers.len() {
                h = t.softplus(h)?;
            }
        }
        t.sigmoid(h)
    }

    #[test]
    fn small_mlp_matches_central_differences() {
        // 2 -> 2 -> 1, bias on the hidden layer only: 8 parameters.
        let mut b = LayoutBuilder::new();
        let w0 = b.push("l0.w", 2, 2);
        let b0 = b.push("l0.b", 1, 2);
        let w1 = b.push("l1.w", 1, 2);
        let layout = Arc::new(b.build());
        assert_eq!(layout.len(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let values = (0..layout.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = ParamVector::from_values(layout, values).unwrap();
        let layers = [(w0, Some(b0)), (w1, None)];
        let x = Mat::new(3, 2, vec![0.3, -0.2, 1.1, 0.4, -0.7, 0.9]);
        let r = value_and_grad(&p, |t| mlp(t, &layers, x.clone())).unwrap();
        let fd = finite_difference_gradient(&p, |t| mlp(t, &layers, x.clone()), 1e-5).unwrap();
        assert!(max_relative_error(&r.gradient, &fd, 1e-8) < 1e-5);
    }
}
