//! Built-in self-checks: gradient agreement with finite differences, an
//! independent compositing transcription, density-transform properties,
//! marching-cubes oracles and schedule identities.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffengine::{finite_difference_gradient, max_relative_error, value_and_grad, DiffError, Mat, Tape, Var};
use crate::field::{psi_beta, sdf_to_density, DensityTransformParams, FieldConfig, SdfField};
use crate::guidance::NoiseSchedule;
use crate::meshing::{
    connected_components, generate_uv_atlas, marching_cubes, select_main_component, AtlasConfig, Bounds,
    TriangleMesh, VoxelGrid,
};
use crate::render::{
    composite, composite_terms, orbit_camera, render_on_tape, sample_deltas, Lens, RayPlan, RenderSettings,
};
use crate::texrast::{rasterize, shade_on_tape, texture_taps, TextureAtlas};

pub const SUITES: [&str; 5] = ["gradients", "compositing", "cdf", "meshing", "schedule"];

/// Which suites to run and which density transform the CDF suite checks.
#[derive(Debug, Clone)]
pub struct CheckOptions {
    /// Empty runs every suite.
    pub suites: Vec<String>,
    /// Transform under test, `psi(s, beta)`.
    pub psi: fn(f64, f64) -> f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            suites: Vec::new(),
            psi: psi_beta,
        }
    }
}

fn sign_flipped_psi(s: f64, beta: f64) -> f64 {
    psi_beta(-s, beta)
}

impl CheckOptions {
    /// Replaces the transform under test with one whose argument sign is
    /// flipped.
    pub fn with_mutated_psi(mut self) -> Self {
        self.psi = sign_flipped_psi;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub passed: usize,
    pub failed: usize,
    pub failures: Vec<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckReport {
    pub suites: Vec<SuiteReport>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.suites.iter().all(|s| s.failed == 0)
    }

    pub fn suite(&self, name: &str) -> Option<&SuiteReport> {
        self.suites.iter().find(|s| s.name == name)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            let status = if s.failed == 0 { "PASS" } else { "FAIL" };
            writeln!(f, "{status} {:<12} passed {:>3} failed {:>3} ({:.1}s)", s.name, s.passed, s.failed, s.seconds)?;
            for msg in &s.failures {
                writeln!(f, "    {msg}")?;
            }
        }
        Ok(())
    }
}

/// Runs the selected suites. Unknown suite names are reported as failures.
pub fn run_checks(options: &CheckOptions) -> CheckReport {
    let selected: Vec<String> = if options.suites.is_empty() {
        SUITES.iter().map(|s| s.to_string()).collect()
    } else {
        options.suites.clone()
    };
    let suites = selected
        .iter()
        .map(|name| {
            let start = std::time::Instant::now();
            let results = match name.as_str() {
                "gradients" => gradient_suite(),
                "compositing" => compositing_suite(),
                "cdf" => cdf_suite(options.psi),
                "meshing" => meshing_suite(),
                "schedule" => schedule_suite(),
                other => vec![("suite".to_string(), Err(format!("unknown suite `{other}`")))],
            };
            let failures: Vec<String> = results
                .iter()
                .filter_map(|(case, r)| r.as_ref().err().map(|e| format!("{case}: {e}")))
                .collect();
            SuiteReport {
                name: name.clone(),
                passed: results.len() - failures.len(),
                failed: failures.len(),
                failures,
                seconds: start.elapsed().as_secs_f64(),
            }
        })
        .collect();
    CheckReport { suites }
}

type Case = (String, Result<(), String>);

fn case(name: &str, r: Result<(), String>) -> Case {
    (name.to_string(), r)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

const GRAD_TOL: f64 = 1e-4;

fn compare_gradients<F>(params: &crate::diffengine::ParamVector, program: F, h: f64) -> Result<(), String>
where
    F: Fn(&mut Tape) -> Result<Var, DiffError>,
{
    let ad = value_and_grad(params, &program).map_err(|e| e.to_string())?.gradient;
    let fd = finite_difference_gradient(params, &program, h).map_err(|e| e.to_string())?;
    let err = max_relative_error(&ad, &fd, 1e-4);
    ensure(err < GRAD_TOL, || format!("max relative error {err:.3e}"))
}

fn gradient_suite() -> Vec<Case> {
    let field = SdfField::new(FieldConfig {
        num_frequencies: 2,
        hidden_width: 8,
        hidden_layers: 2,
        color_width: 4,
        ..FieldConfig::default()
    });
    let params = field.init_params(&mut ChaCha8Rng::seed_from_u64(11));

    let pts = [[0.1, -0.4, 0.3], [0.7, 0.2, -0.5], [-0.3, 0.6, 0.2]];
    let dirs = [[0.0, 0.0, 1.0], [0.6, 0.8, 0.0], [0.0, -1.0, 0.0]];
    let field_eval = compare_gradients(
        &params,
        |t: &mut Tape| {
            let v = field.eval_on_tape(t, &pts, &dirs)?;
            let a = t.sum(v.s)?;
            let b = t.sum(v.color)?;
            let c = t.sum(v.sigma)?;
            let ab = t.add(a, b)?;
            t.add(ab, c)
        },
        1e-5,
    );

    let cam = orbit_camera(30.0, 20.0, 2.5, &Lens::square(40.0, 4));
    let settings = RenderSettings {
        samples: 16,
        stratified: false,
        ..RenderSettings::default()
    };
    let render = RayPlan::new(&cam, &settings, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| e.to_string())
        .and_then(|plan| {
            let target: Vec<f64> = (0..48).map(|i| (i % 5) as f64 / 5.0).collect();
            compare_gradients(
                &params,
                |t: &mut Tape| {
                    let v = render_on_tape(t, &field, &plan, 0..16, settings.background)?;
                    let y = t.constant(Mat::new(16, 3, target.clone()))?;
                    let d = t.sub(v.rgb, y)?;
                    let sq = t.square(d)?;
                    let s = t.sum(sq)?;
                    t.scale(s, 1.0 / 48.0)
                },
                1e-5,
            )
        });

    vec![
        case("field evaluation", field_eval),
        case("4x4 render loss", render),
        case("texel shading loss", texture_gradient_case()),
    ]
}

fn texture_gradient_case() -> Result<(), String> {
    let grid = VoxelGrid::from_fn(10, Bounds::cube(1.0), |p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.6)
        .map_err(|e| e.to_string())?;
    let mesh = marching_cubes(&grid, 0.0);
    let uv = generate_uv_atlas(&mesh, &AtlasConfig { texels_per_unit: 6.0, ..AtlasConfig::default() })
        .map_err(|e| e.to_string())?;
    let res = uv.resolution;
    let mut atlas = TextureAtlas::for_mesh(&uv.mesh, res, res, [0.5; 3]).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for v in &mut atlas.texels {
        *v = rng.random();
    }
    let cam = orbit_camera(15.0, 10.0, 2.5, &Lens::square(40.0, 8));
    let frags = rasterize(&uv.mesh, &cam).map_err(|e| e.to_string())?;
    let taps = texture_taps(&frags, &uv.mesh, res, res).map_err(|e| e.to_string())?;
    ensure(frags.coverage() > 0, || "fixture covers no pixels".into())?;
    let params = atlas.to_params();
    let seg = atlas.layout().find("texels").ok_or("no texel segment")?;
    let n = taps.covered.len();
    let target: Vec<f64> = (0..n * 3).map(|i| (i % 7) as f64 / 7.0).collect();
    compare_gradients(
        &params,
        |t: &mut Tape| {
            let x = t.param(seg)?;
            let img = shade_on_tape(t, x, &taps, [0.2; 3]).map_err(|e| DiffError::Shape(e.to_string()))?;
            let y = t.constant(Mat::new(n, 3, target.clone()))?;
            let d = t.sub(img, y)?;
            let sq = t.square(d)?;
            t.sum(sq)
        },
        1e-5,
    )
}

/// Direct transcription of the compositing sums: per-sample opacity
/// `1 - exp(-sigma delta)`, transmittance over the prefix up to and
/// including the sample, weights their product, and the background taking
/// the remainder.
fn literal_composite(
    colors: &[[f64; 3]],
    sigmas: &[f64],
    depths: &[f64],
    far: f64,
    bg: [f64; 3],
) -> ([f64; 3], f64, Vec<f64>, Vec<f64>) {
    let m = sigmas.len();
    let mut delta = vec![0.0; m];
    for i in 0..m {
        delta[i] = if i + 1 < m { depths[i + 1] - depths[i] } else { far - depths[i] };
    }
    let mut trans = vec![0.0; m];
    let mut weights = vec![0.0; m];
    for i in 0..m {
        let mut optical = 0.0;
        for j in 0..=i {
            optical += sigmas[j] * delta[j];
        }
        trans[i] = (-optical).exp();
        weights[i] = trans[i] * (1.0 - (-sigmas[i] * delta[i]).exp());
    }
    let acc: f64 = weights.iter().sum();
    let mut rgb = [0.0; 3];
    for (k, out) in rgb.iter_mut().enumerate() {
        let mut c = 0.0;
        for i in 0..m {
            c += weights[i] * colors[i][k];
        }
        *out = c + (1.0 - acc) * bg[k];
    }
    (rgb, acc, trans, weights)
}

fn compositing_suite() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut worst, mut bad_sum, mut bad_mono, mut errors) = (0.0f64, 0, 0, 0);
    const RAYS: usize = 10_000;
    for _ in 0..RAYS {
        let m = rng.random_range(1..=48);
        let colors: Vec<[f64; 3]> = (0..m).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let sigmas: Vec<f64> = (0..m)
            .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..50.0) })
            .collect();
        let mut depths: Vec<f64> = (0..m).map(|_| rng.random_range(0.5..4.0)).collect();
        depths.sort_by(f64::total_cmp);
        let far = 4.0;
        let bg = [rng.random(), rng.random(), rng.random()];
        let (rgb, acc, trans, weights) = literal_composite(&colors, &sigmas, &depths, far, bg);
        let got = match (composite(&colors, &sigmas, &depths, far, bg), composite_terms(&sigmas, &sample_deltas(&depths, far))) {
            (Ok(c), Ok(t)) => (c, t),
            _ => {
                errors += 1;
                continue;
            }
        };
        let (c, terms) = got;
        worst = worst.max((c.acc - acc).abs());
        for k in 0..3 {
            worst = worst.max((c.rgb[k] - rgb[k]).abs());
        }
        for i in 0..m {
            worst = worst.max((terms.transmittance[i] - trans[i]).abs());
            worst = worst.max((terms.alpha[i] - weights[i]).abs());
        }
        if terms.alpha.iter().sum::<f64>() > 1.0 + 1e-12 {
            bad_sum += 1;
        }
        if terms.transmittance.windows(2).any(|w| w[1] > w[0]) || terms.transmittance[0] > 1.0 {
            bad_mono += 1;
        }
    }
    vec![
        case("library matches literal sums", ensure(worst <= 1e-12 && errors == 0, || {
            format!("max deviation {worst:.3e} over {RAYS} rays, {errors} errors")
        })),
        case("weights sum to at most one", ensure(bad_sum == 0, || format!("{bad_sum} rays exceed one"))),
        case("transmittance non-increasing", ensure(bad_mono == 0, || format!("{bad_mono} rays increase"))),
    ]
}

fn cdf_suite(psi: fn(f64, f64) -> f64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let betas: Vec<f64> = (0..64).map(|_| 10f64.powf(rng.random_range(-3.0..0.0))).collect();

    let half = ensure(betas.iter().all(|&b| psi(0.0, b) == 0.5), || "psi(0) differs from 0.5".into());

    let mut monotone = Ok(());
    for &b in &betas {
        let mut prev = 0.0;
        for i in 0..=400 {
            let s = (i as f64 / 200.0 - 1.0) * 20.0 * b;
            let v = psi(s, b);
            if !(0.0..=1.0).contains(&v) || v < prev {
                monotone = Err(format!("not a CDF at beta {b:.3e}, s {s:.3e}"));
                break;
            }
            prev = v;
        }
        if monotone.is_err() {
            break;
        }
    }

    let mut limits = Ok(());
    for &b in &betas {
        let alpha = rng.random_range(0.5..200.0);
        let outside = alpha * psi(-10.0 * b, b);
        let inside = alpha * psi(10.0 * b, b);
        if outside.abs() / alpha > 1e-4 || (inside - alpha).abs() / alpha > 1e-4 {
            limits = Err(format!("beta {b:.3e}: outside {outside:.3e}, inside {inside:.3e} of {alpha:.3e}"));
            break;
        }
    }

    let mut density = Ok(());
    for &b in &betas {
        let p = DensityTransformParams { alpha: 3.0, beta: b };
        let s = rng.random_range(-5.0..5.0) * b;
        let expect = p.alpha * psi(-s, b);
        if (sdf_to_density(s, p) - expect).abs() > 1e-12 * p.alpha {
            density = Err(format!("density at s {s:.3e} disagrees with alpha psi(-s)"));
            break;
        }
    }

    vec![
        case("psi(0) is one half", half),
        case("monotone CDF", monotone),
        case("density limits at ten beta", limits),
        case("density is alpha psi(-s)", density),
    ]
}

fn sphere_mesh(n: usize, r: f64) -> Result<(TriangleMesh, f64), String> {
    let g = VoxelGrid::from_fn(n, Bounds::cube(1.0), |p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - r)
        .map_err(|e| e.to_string())?;
    Ok((marching_cubes(&g, 0.0), g.spacing()[0]))
}

fn meshing_suite() -> Vec<Case> {
    let sphere = sphere_mesh(64, 0.5);
    let radii = sphere.as_ref().map_err(Clone::clone).and_then(|(m, h)| {
        let worst = m
            .vertices
            .iter()
            .map(|v| ((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 0.5).abs())
            .fold(0.0, f64::max);
        ensure(!m.vertices.is_empty() && worst < 1.5 * h, || format!("worst radius error {worst:.4} vs edge {h:.4}"))
    });
    let topology = sphere.as_ref().map_err(Clone::clone).and_then(|(m, _)| {
        ensure(m.is_watertight() && m.euler_characteristic() == 2, || {
            format!("watertight {}, euler {}", m.is_watertight(), m.euler_characteristic())
        })
    });
    let floater = VoxelGrid::from_fn(32, Bounds::cube(1.0), |p| {
        let sphere = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 0.5;
        let q = p.map(|c| (c - 0.8).abs() - 0.1);
        let o = q.map(|c| c.max(0.0));
        let cube = (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt() + q[0].max(q[1]).max(q[2]).min(0.0);
        sphere.min(cube)
    })
    .map_err(|e| e.to_string())
    .and_then(|g| {
        let m = marching_cubes(&g, 0.0);
        let before = connected_components(&m).len();
        let main = select_main_component(&m, [0.0; 3]);
        let sphere_only = main
            .vertices
            .iter()
            .all(|v| ((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() - 0.5).abs() < 0.1);
        ensure(before == 2 && connected_components(&main).len() == 1 && sphere_only && main.is_watertight(), || {
            format!("{before} components before, sphere only {sphere_only}")
        })
    });
    vec![
        case("sphere vertex radii", radii),
        case("sphere topology", topology),
        case("floater removal", floater),
    ]
}

fn schedule_suite() -> Vec<Case> {
    let schedule = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let worst = (0..1000)
        .map(|_| {
            let t: f64 = rng.random_range(f64::EPSILON..=1.0);
            let (a, s) = (schedule.alpha(t), schedule.sigma(t));
            (a * a + s * s - 1.0).abs()
        })
        .fold(0.0, f64::max);
    let bounds = ensure(
        schedule.check(0.0).is_err() && schedule.check(1.0).is_ok() && schedule.check(1.5).is_err(),
        || "timestep domain is not (0, 1]".into(),
    );
    let mut prev = f64::INFINITY;
    let mut monotone = Ok(());
    for i in 1..=1000 {
        let a = schedule.alpha(i as f64 / 1000.0);
        if a > prev {
            monotone = Err(format!("alpha increases at step {i}"));
            break;
        }
        prev = a;
    }
    vec![
        case("alpha^2 + sigma^2 = 1", ensure(worst <= 4.0 * f64::EPSILON, || format!("max deviation {worst:.3e}"))),
        case("timestep domain", bounds),
        case("signal level decreasing", monotone),
    ]
}
