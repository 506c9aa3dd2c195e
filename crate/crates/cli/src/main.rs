use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sdfmesh::field::{checkpoint, SdfField};
use sdfmesh::guidance::mock::{MockBehavior, MockMode, MockServer};
use sdfmesh::image::Image;
use sdfmesh::meshing::{generate_uv_atlas, read_obj, read_ply, write_obj, write_ply, TriangleMesh};
use sdfmesh::pipeline::{
    extract_mesh, load_atlas, retexture_mesh, run_checks, run_generate, run_turntable, Backend, CheckOptions,
    PipelineConfig, RunOptions, Stage, MANIFEST_FILE, SUITES,
};
use sdfmesh::texrast::{coverage_mask, TextureAtlas};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "sdfmesh", version, about = "Text-guided SDF optimization, meshing and texture refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage from field initialization to a textured OBJ.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Reuse completed stages found in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this stage (init, stage1, mesh, atlas, pseudo_gt, stage_a, stage_b, export).
        #[arg(long)]
        stop_after: Option<Stage>,
        /// Also render the turntable into `<out>/turntable`.
        #[arg(long)]
        turntable: bool,
    },
    /// Extract the cleaned mesh from a run's optimized field.
    Mesh {
        #[command(flatten)]
        common: Common,
        /// Field parameters; defaults to `<out>/field.params`.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Texture refinement on an existing mesh.
    Retexture {
        #[command(flatten)]
        common: Common,
        /// PLY or OBJ mesh; defaults to `<out>/mesh_uv.ply`.
        #[arg(long)]
        mesh: Option<PathBuf>,
        /// Initial texture as a float grid or PNG; defaults to `<out>/atlas_init.grid`,
        /// or mid-gray when absent.
        #[arg(long)]
        texture: Option<PathBuf>,
    },
    /// Render evenly spaced orbit frames of a textured mesh.
    Turntable {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/mesh_uv.ply`.
        #[arg(long)]
        mesh: Option<PathBuf>,
        /// Defaults to `<out>/atlas_final.grid`.
        #[arg(long)]
        texture: Option<PathBuf>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        elevation: Option<f64>,
    },
    /// Run the built-in gradient, compositing, density, meshing and schedule checks.
    Check {
        /// Suites to run; all when omitted.
        #[arg(long = "suite", value_parser = clap::builder::PossibleValuesParser::new(SUITES))]
        suites: Vec<String>,
        /// Check a density transform with a flipped argument sign instead of the real one.
        #[arg(long, hide = true)]
        mutate_psi_sign: bool,
    },
    /// Serve the guidance wire protocol on loopback with an all-zero model.
    ServeMock {
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, value_enum, default_value_t = Mode::Zeros)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        delay_ms: u64,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration or a run manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the desk-scale preset instead of the defaults.
    #[arg(long, conflicts_with = "config")]
    smoke: bool,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Remote guidance URL; implies `--backend remote` unless given otherwise.
    #[arg(long)]
    endpoint: Option<String>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Analytic,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Zeros,
    WrongShape,
    Malformed,
    WrongId,
}

impl Common {
    /// File or preset values, then flag overrides, then validation.
    fn config(&self) -> anyhow::Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None if self.smoke => PipelineConfig::smoke(),
            None => PipelineConfig::default(),
        };
        if let Some(p) = &self.prompt {
            c.prompt = p.clone();
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(e) = &self.endpoint {
            c.guidance.remote.endpoint = e.clone();
            c.guidance.backend = Backend::Remote;
        }
        if let Some(b) = self.backend {
            c.guidance.backend = match b {
                BackendArg::Analytic => Backend::Analytic,
                BackendArg::Remote => Backend::Remote,
            };
        }
        if let Some(o) = &self.out {
            c.output = o.clone();
        }
        c.validate()?;
        Ok(c)
    }

    /// Like [`Common::config`], but falls back to the manifest in `--out`.
    fn run_config(&self) -> anyhow::Result<PipelineConfig> {
        if self.config.is_none() && !self.smoke {
            if let Some(dir) = &self.out {
                let manifest = dir.join(MANIFEST_FILE);
                if manifest.exists() {
                    let with = Common {
                        config: Some(manifest),
                        smoke: false,
                        prompt: self.prompt.clone(),
                        seed: self.seed,
                        backend: self.backend,
                        endpoint: self.endpoint.clone(),
                        out: self.out.clone(),
                    };
                    return with.config();
                }
            }
        }
        self.config()
    }
}

fn read_mesh(path: &Path) -> anyhow::Result<TriangleMesh> {
    let mesh = match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => read_obj(path)?,
        Some("ply") => read_ply(path)?,
        _ => bail!("{}: expected a .ply or .obj mesh", path.display()),
    };
    Ok(mesh)
}

fn read_texture(path: &Path, mesh: &TriangleMesh) -> anyhow::Result<TextureAtlas> {
    if path.extension().is_some_and(|e| e == "png") {
        let img = Image::read_png(path)?;
        let valid = coverage_mask(mesh, img.width, img.height)?;
        return Ok(TextureAtlas::from_image(&img, valid)?);
    }
    Ok(load_atlas(path, mesh)?)
}

fn generate(common: &Common, resume: bool, stop_after: Option<Stage>, turntable: bool) -> anyhow::Result<()> {
    let config = if resume { common.run_config()? } else { common.config()? };
    let outcome = run_generate(&config, RunOptions { resume, stop_after })?;
    for s in &outcome.reused {
        println!("reused   {}", s.name());
    }
    for s in &outcome.computed {
        println!("computed {}", s.name());
    }
    if let Some(obj) = &outcome.obj {
        println!("wrote {}", obj.display());
        if turntable {
            let mesh = read_ply(&outcome.dir.join("mesh_uv.ply"))?;
            let atlas = load_atlas(&outcome.dir.join("atlas_final.grid"), &mesh)?;
            let frames = run_turntable(&mesh, &atlas, &config.turntable, &outcome.dir.join("turntable"))?;
            println!("wrote {} turntable frames", frames.len());
        }
    }
    Ok(())
}

fn mesh(common: &Common, params: Option<PathBuf>) -> anyhow::Result<()> {
    let config = common.run_config()?;
    let dir = &config.output;
    let path = params.unwrap_or_else(|| dir.join("field.params"));
    let params = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let field = SdfField::new(config.field.clone());
    field.check_layout(&params)?;
    let (raw, main) = extract_mesh(&field, &params, &config.meshing)?;
    std::fs::create_dir_all(dir)?;
    write_ply(&raw, &dir.join("mesh_raw.ply"))?;
    write_ply(&main, &dir.join("mesh.ply"))?;
    let obj = write_obj(&main, None, &dir.join("mesh.obj"))?;
    println!(
        "{} vertices, {} faces (raw {}), watertight {}; wrote {}",
        main.vertices.len(),
        main.faces.len(),
        raw.faces.len(),
        main.is_watertight(),
        obj.obj.display()
    );
    Ok(())
}

fn retexture(common: &Common, mesh: Option<PathBuf>, texture: Option<PathBuf>) -> anyhow::Result<()> {
    let config = common.run_config()?;
    let dir = config.output.clone();
    let mut m = read_mesh(&mesh.unwrap_or_else(|| dir.join("mesh_uv.ply")))?;
    let mut resolution = None;
    if m.uv.is_none() {
        let uv = generate_uv_atlas(&m, &config.meshing.atlas)?;
        m = uv.mesh;
        resolution = Some(uv.resolution);
    }
    let texture = texture.or_else(|| Some(dir.join("atlas_init.grid")).filter(|p| p.exists()));
    let init = match (texture, resolution) {
        (Some(p), _) => read_texture(&p, &m)?,
        (None, Some(res)) => TextureAtlas::for_mesh(&m, res, res, [0.5; 3])?,
        (None, None) => bail!("mesh already has UVs; pass --texture for its initial texture"),
    };
    let model = config.guidance.build()?;
    let out = retexture_mesh(&m, &init, model.as_ref(), &config, Some(&dir))?;
    write_ply(&m, &dir.join("mesh_uv.ply"))?;
    println!("refined {}x{} texture; wrote {}", out.atlas.width, out.atlas.height, dir.join("model.obj").display());
    Ok(())
}

fn turntable(
    common: &Common,
    mesh: Option<PathBuf>,
    texture: Option<PathBuf>,
    frames: Option<usize>,
    elevation: Option<f64>,
) -> anyhow::Result<()> {
    let config = common.run_config()?;
    let dir = &config.output;
    let m = read_mesh(&mesh.unwrap_or_else(|| dir.join("mesh_uv.ply")))?;
    let atlas = read_texture(&texture.unwrap_or_else(|| dir.join("atlas_final.grid")), &m)?;
    let mut tt = config.turntable;
    tt.frames = frames.unwrap_or(tt.frames);
    tt.elevation_deg = elevation.unwrap_or(tt.elevation_deg);
    let written = run_turntable(&m, &atlas, &tt, &dir.join("turntable"))?;
    println!("wrote {} frames to {}", written.len(), dir.join("turntable").display());
    Ok(())
}

fn serve_mock(port: u16, mode: Mode, delay_ms: u64) -> anyhow::Result<()> {
    let behavior = MockBehavior {
        mode: match mode {
            Mode::Zeros => MockMode::Zeros,
            Mode::WrongShape => MockMode::WrongShape,
            Mode::Malformed => MockMode::Malformed,
            Mode::WrongId => MockMode::WrongId,
        },
        delay: Duration::from_millis(delay_ms),
        fail_first: 0,
    };
    let server = MockServer::bind(SocketAddr::from(([127, 0, 0, 1], port)), behavior)?;
    println!("serving {}", server.url());
    loop {
        std::thread::park();
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { common, resume, stop_after, turntable } => generate(&common, resume, stop_after, turntable),
        Command::Mesh { common, params } => mesh(&common, params),
        Command::Retexture { common, mesh, texture } => retexture(&common, mesh, texture),
        Command::Turntable { common, mesh, texture, frames, elevation } => {
            turntable(&common, mesh, texture, frames, elevation)
        }
        Command::Check { suites, mutate_psi_sign } => {
            let mut options = CheckOptions { suites, ..CheckOptions::default() };
            if mutate_psi_sign {
                options = options.with_mutated_psi();
            }
            let report = run_checks(&options);
            print!("{report}");
            return if report.all_passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE };
        }
        Command::ServeMock { port, mode, delay_ms } => serve_mock(port, mode, delay_ms),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
