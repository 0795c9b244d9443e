//! Command-line front end: phantom generation, rendering, registration,
//! warping and evaluation over the on-disk formats of `polyrigid::io`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use polyrigid::geometry::CameraMatrix;
use polyrigid::grid::{LabelMap, Volume};
use polyrigid::io::{self, CameraConfig, Manifest, WarpField};
use polyrigid::liealg::{se3_exp, TwistMatrix};
use polyrigid::phantom::{make_case, random_case_twists, CaseSettings, OrbitGeometry, Preset};
use polyrigid::registration::{
    optimize_poses, register_camera, CameraProblem, RegistrationError, RegistrationProblem, View,
};
use polyrigid::render::{render_drr, render_masked, QuadratureSpec};
use polyrigid::similarity::{dice, hd95};
use polyrigid::warpfield::{build_weights, jacobian_stats, warp_labels, warp_volume, PolyrigidField, WeightMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "polyrigid", version, about = "Polyrigid 2D/3D registration toolkit")]
struct Cli {
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom case: volume, labels, views and ground truth.
    Phantom(PhantomArgs),
    /// Render a radiograph of a volume.
    Render(RenderArgs),
    /// Refine each view's camera by registering the anchor structure.
    RegisterCamera(RegisterArgs),
    /// Estimate one rigid transform per structure from the manifest's views.
    Register(RegisterArgs),
    /// Apply a polyrigid field to a volume and its labels.
    Warp(WarpArgs),
    /// Compare an estimated field against ground-truth labels.
    Eval(EvalArgs),
}

#[derive(Args)]
struct WeightArgs {
    /// `mass` or `reciprocal`.
    #[arg(long, default_value = "mass")]
    weight_mode: String,
    /// Decay of the reciprocal kernel.
    #[arg(long)]
    epsilon: Option<f64>,
}

impl WeightArgs {
    fn mode(&self) -> Result<WeightMode> {
        match (self.weight_mode.as_str(), self.epsilon) {
            ("mass", None) => Ok(WeightMode::Mass),
            ("mass", Some(_)) => bail!("--epsilon only applies to --weight-mode reciprocal"),
            ("reciprocal", Some(epsilon)) => Ok(WeightMode::Reciprocal { epsilon }),
            ("reciprocal", None) => bail!("--weight-mode reciprocal needs --epsilon"),
            (other, _) => bail!("unknown weight mode `{other}`"),
        }
    }
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    preset: String,
    #[arg(long, default_value_t = 2)]
    views: usize,
    /// Angular span of the views in degrees.
    #[arg(long, default_value_t = 30.0)]
    arc: f64,
    /// Ground-truth twists; drawn at random from `--seed` when omitted.
    #[arg(long)]
    twists: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest random rotation (rad).
    #[arg(long, default_value_t = 0.2)]
    max_angle: f64,
    /// Largest random translation (mm).
    #[arg(long, default_value_t = 15.0)]
    max_translation: f64,
    /// Voxels per grid axis.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Detector pixels per side; the detector stays 256 mm wide.
    #[arg(long, default_value_t = 128)]
    detector: usize,
    /// Quadrature samples per ray; twice the grid size when omitted.
    #[arg(long)]
    samples: Option<usize>,
    #[command(flatten)]
    weights: WeightArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    camera: PathBuf,
    /// Render only these structures (comma separated); needs `--labels`.
    #[arg(long, value_delimiter = ',')]
    structures: Vec<u16>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also write a normalized 16-bit PGM.
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Initial twists (structure registration only); zero when omitted.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WarpArgs {
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    twists: PathBuf,
    #[command(flatten)]
    weights: WeightArgs,
    #[arg(long)]
    out_volume: PathBuf,
    #[arg(long)]
    out_labels: Option<PathBuf>,
    /// Warped voxel coordinates as PWRP1.
    #[arg(long)]
    out_warp: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Labels of the moving volume.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    twists: PathBuf,
    /// Ground-truth warped labels.
    #[arg(long)]
    truth: PathBuf,
    /// Moving volume; only its mass weights are used.
    #[arg(long)]
    volume: PathBuf,
    #[command(flatten)]
    weights: WeightArgs,
}

/// Failures caused by the numbers rather than the inputs.
fn is_numerical(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        matches!(
            e.downcast_ref::<RegistrationError>(),
            Some(RegistrationError::NonFiniteLoss { .. } | RegistrationError::Diverged { .. })
        )
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Render(a) => render(a),
        Command::RegisterCamera(a) => register_cameras(a),
        Command::Register(a) => register(a),
        Command::Warp(a) => warp(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_numerical(&e) { 2 } else { 1 })
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn quadrature(samples: Option<usize>, vol: &Volume) -> Result<QuadratureSpec> {
    Ok(match samples {
        Some(n) => QuadratureSpec::new(n)?,
        None => QuadratureSpec::for_grid(vol.geometry()),
    })
}

fn phantom(a: PhantomArgs) -> Result<()> {
    let preset: Preset = a.preset.parse()?;
    let spec = preset.spec(a.size, Preset::FIELD_OF_VIEW / a.size as f64, a.seed);
    let ids: Vec<u16> = spec.structures.iter().map(|s| s.id).collect();
    let twists = match &a.twists {
        Some(path) => io::read_twists(path)?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            random_case_twists(&mut rng, &ids, preset.anchor_id(), a.max_angle, a.max_translation)
        }
    };
    let mut settings = CaseSettings::new(a.views, a.arc);
    // Keep the detector's physical size whatever its resolution.
    let orbit = OrbitGeometry::default();
    settings.orbit = OrbitGeometry {
        detector_pixels: a.detector,
        pixel_spacing: orbit.pixel_spacing * orbit.detector_pixels as f64 / a.detector as f64,
        ..orbit
    };
    settings.weight_mode = a.weights.mode()?;
    settings.quadrature = a.samples.map(QuadratureSpec::new).transpose()?;
    let case = make_case(&spec, &twists, &settings)?;

    let out = &a.out;
    create_dir(out)?;
    io::write_volume(&out.join("moving.pvol"), &case.moving)?;
    io::write_labels(&out.join("labels.plab"), &case.labels)?;
    io::write_volume(&out.join("fixed.pvol"), &case.fixed)?;
    io::write_labels(&out.join("fixed_labels.plab"), &case.fixed_labels)?;
    io::write_twists(&out.join("truth.twists"), &case.twists)?;
    let mut manifest = String::from("moving = moving.pvol\nlabels = labels.plab\n");
    match case.weight_mode {
        WeightMode::Mass => manifest.push_str("weight_mode = mass\n"),
        WeightMode::Reciprocal { epsilon } => {
            manifest.push_str(&format!("weight_mode = reciprocal\nepsilon = {epsilon}\n"))
        }
    }
    manifest.push_str(&format!("anchor = {}\nsamples = {}\n", preset.anchor_id(), case.quadrature.sample_count));
    for (i, (image, camera)) in case.images.iter().zip(&case.cameras).enumerate() {
        io::write_image(&out.join(format!("view{i}.pimg")), image)?;
        let config = CameraConfig {
            meta: case.meta,
            pose: *camera.pose(),
        };
        io::write_camera(&out.join(format!("view{i}.cam")), &config)?;
        manifest.push_str(&format!("view.{i}.image = view{i}.pimg\nview.{i}.camera = view{i}.cam\n"));
    }
    write_text(&out.join("manifest.txt"), &manifest)
}

fn render(a: RenderArgs) -> Result<()> {
    let vol = io::read_volume(&a.volume)?;
    let config = io::read_camera(&a.camera)?;
    let camera = CameraMatrix::from_meta(&config.meta, config.pose)?;
    let q = quadrature(a.samples, &vol)?;
    let image = match (&a.labels, a.structures.is_empty()) {
        (_, true) => render_drr(&vol, &camera, &config.meta, &q)?,
        (Some(labels), false) => {
            let labels = io::read_labels(labels)?;
            render_masked(&vol, &labels, &a.structures, &camera, &config.meta, &q)?
        }
        (None, false) => bail!("--structures needs --labels"),
    };
    io::write_image(&a.out, &image)?;
    if let Some(pgm) = &a.pgm {
        io::write_pgm(pgm, &image)?;
    }
    Ok(())
}

struct Loaded {
    manifest: Manifest,
    moving: Volume,
    labels: LabelMap,
    views: Vec<(polyrigid::render::DetectorImage, CameraConfig)>,
    quadrature: QuadratureSpec,
}

fn load_manifest(path: &Path) -> Result<Loaded> {
    let manifest = Manifest::read(path)?;
    let moving = io::read_volume(&manifest.moving)?;
    let labels = io::read_labels(&manifest.labels)?;
    let views = manifest
        .views
        .iter()
        .map(|v| Ok((io::read_image(&v.image)?, io::read_camera(&v.camera)?)))
        .collect::<Result<Vec<_>>>()?;
    let quadrature = quadrature(manifest.samples, &moving)?;
    Ok(Loaded {
        manifest,
        moving,
        labels,
        views,
        quadrature,
    })
}

fn register(a: RegisterArgs) -> Result<()> {
    let Loaded {
        manifest,
        moving,
        labels,
        views,
        quadrature,
    } = load_manifest(&a.manifest)?;
    let ids = labels.structure_ids();
    let views = views
        .into_iter()
        .map(|(image, config)| {
            Ok(View {
                image,
                camera: CameraMatrix::from_meta(&config.meta, config.pose)?,
                meta: config.meta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let problem = RegistrationProblem {
        moving,
        labels,
        weight_mode: manifest.weight_mode,
        views,
        quadrature,
        patch: manifest.patch,
    };
    let init = match &a.init {
        Some(path) => io::read_twists(path)?,
        None => TwistMatrix::zeros(ids.len()),
    };
    let estimate = optimize_poses(&problem, &manifest.optim, &init)?;
    create_dir(&a.out)?;
    io::write_twists(&a.out.join("twists.txt"), &estimate.twists)?;
    let transforms: Vec<_> = estimate.twists.rows().iter().map(se3_exp).collect();
    write_text(&a.out.join("transforms.txt"), &io::encode_transforms(&ids, &transforms))?;
    write_text(&a.out.join("loss.csv"), &io::encode_loss_history(&estimate.loss_history))?;
    let best = estimate.loss_history.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    println!(
        "best_loss\t{best:.9}\niterations\t{}\nconverged\t{}",
        estimate.loss_history.len(),
        estimate.converged
    );
    Ok(())
}

fn register_cameras(a: RegisterArgs) -> Result<()> {
    if a.init.is_some() {
        bail!("--init applies to structure registration only");
    }
    let loaded = load_manifest(&a.manifest)?;
    let anchor_id = loaded.manifest.anchor.context("manifest key `anchor` is required")?;
    create_dir(&a.out)?;
    for (i, (image, config)) in loaded.views.iter().enumerate() {
        let problem = CameraProblem {
            moving: &loaded.moving,
            labels: &loaded.labels,
            anchor_id,
            observed: image,
            meta: &config.meta,
            quadrature: loaded.quadrature,
            patch: loaded.manifest.patch,
        };
        let estimate = register_camera(&problem, &config.pose, &loaded.manifest.optim)
            .with_context(|| format!("view {i}"))?;
        let refined = CameraConfig {
            meta: config.meta,
            pose: estimate.pose,
        };
        io::write_camera(&a.out.join(format!("view{i}.cam")), &refined)?;
        write_text(
            &a.out.join(format!("view{i}_loss.csv")),
            &io::encode_loss_history(&estimate.loss_history),
        )?;
        let best = estimate.loss_history.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        println!("view{i}\tbest_loss\t{best:.9}\tconverged\t{}", estimate.converged);
    }
    Ok(())
}

fn warp(a: WarpArgs) -> Result<()> {
    let vol = io::read_volume(&a.volume)?;
    let labels = io::read_labels(&a.labels)?;
    let twists = io::read_twists(&a.twists)?;
    let weights = build_weights(&labels, &vol, a.weights.mode()?)?;
    let field = PolyrigidField::new(twists, &weights)?;
    io::write_volume(&a.out_volume, &warp_volume(&vol, &field)?)?;
    let coords = field.apply_to_grid();
    if let Some(path) = &a.out_labels {
        io::write_labels(path, &warp_labels(&labels, &coords)?)?;
    }
    if let Some(path) = &a.out_warp {
        let shape = vol.geometry().shape;
        io::write_warp(path, &WarpField { shape, coords })?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let vol = io::read_volume(&a.volume)?;
    let labels = io::read_labels(&a.labels)?;
    let truth = io::read_labels(&a.truth)?;
    let twists = io::read_twists(&a.twists)?;
    labels.check_aligned(&vol)?;
    truth.check_aligned(&vol)?;
    let weights = build_weights(&labels, &vol, a.weights.mode()?)?;
    let coords = PolyrigidField::new(twists, &weights)?.apply_to_grid();
    let warped = warp_labels(&labels, &coords)?;
    let g = vol.geometry();
    let spacing = [g.spacing.x, g.spacing.y, g.spacing.z];
    let ids = labels.structure_ids();
    let mut report = String::new();
    for &id in &ids {
        let d = dice(&warped.mask(id), &truth.mask(id))?;
        report.push_str(&format!("dice\t{id}\t{d:.6}\n"));
    }
    for &id in &ids {
        let h = hd95(&warped.mask(id), &truth.mask(id), g.shape, spacing)?;
        report.push_str(&format!("hd95\t{id}\t{h:.6}\n"));
    }
    let stats = jacobian_stats(g, &coords)?;
    report.push_str(&format!("percent_folds\tall\t{:.6}\n", stats.percent_folds));
    report.push_str(&format!("sigma_log_jac\tall\t{:.6}\n", stats.sigma_log_jac));
    print!("{report}");
    Ok(())
}
