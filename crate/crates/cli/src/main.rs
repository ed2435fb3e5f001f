use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cellsynth::eval::{fid_report, Embedder, DEFAULT_EMBED_DIM};
use cellsynth::features::{CellClass, ConstraintSet};
use cellsynth::gan::{save_metrics_csv, write_metrics_csv, GanTrainer, RunSchedule, TrainConfig};
use cellsynth::mesh::{assemble_cluster_with, cell_object, export_obj, import_obj, CellBuildOptions, Scene};
use cellsynth::nn::NetParams;
use cellsynth::pipeline::{
    fit_to_canvas, fixture_cell_features, fixture_cells, fixture_cluster_features, fixture_slide, ingest_image,
    load_dataset, run_experiment, write_dataset, ExperimentConfig, FixtureSpec, SegmentOptions,
};
use cellsynth::render::{render_batch, render_view, Image, ProjectionSpec, RenderMode};
use cellsynth::topo::{reconstruct, topo_metrics_csv, train_transformer, TopoConfig, TopoTransformer};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "cellsynth", version, about = "Synthesize, render, train and evaluate 3D cell models")]
struct Cli {
    /// Seed for sampling and training; overrides the config's seeds for `run-experiment`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration document for the chosen subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

impl Cli {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample single cells and write OBJ meshes, feature JSON and projections.
    SynthCell(SynthCell),
    /// Sample small cell clusters and write OBJ meshes and projections.
    SynthCluster(SynthCluster),
    /// Render an OBJ scene from a grid of viewing angles.
    Render(RenderArgs),
    /// Train the feature-space WGAN for one class.
    TrainGan(TrainGan),
    /// Train the topology transformer on cluster images.
    TrainTopo(TrainTopo),
    /// Fréchet distance between two image directories.
    EvalFid(EvalFid),
    /// Cut, segment and store histology patches as a dataset.
    ExportDataset(ExportDataset),
    /// Run a full experiment described by `--config`.
    RunExperiment,
}

#[derive(Args)]
struct SynthCell {
    #[arg(long, default_value = "normal")]
    class: CellClass,
    #[arg(long, default_value_t = 32)]
    features: usize,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 4.0)]
    extent: f64,
}

#[derive(Args)]
struct SynthCluster {
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 8.0)]
    extent: f64,
}

#[derive(Args)]
struct RenderArgs {
    /// OBJ file to render.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "projection")]
    mode: RenderMode,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    thetas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    phis: Vec<f64>,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 8.0)]
    extent: f64,
}

#[derive(Args)]
struct TrainGan {
    #[arg(long, default_value = "normal")]
    class: CellClass,
    /// Feature budget preset: 5, 32, 1165 or 4129.
    #[arg(long, default_value_t = 32)]
    features: usize,
    #[arg(long)]
    tails: Option<usize>,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    /// Dataset directory written by `export-dataset`; the synthetic fixture is used otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct TrainTopo {
    /// Viewing grid as `thetas:phis`, e.g. `0,45,90,135:0,60,120`.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    min_n: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Generator checkpoint whose tails seed the frozen decoder.
    #[arg(long)]
    decoder_ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Directory of cluster PNGs; ten synthetic clusters are used otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct EvalFid {
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    fake: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EMBED_DIM)]
    dim: usize,
}

#[derive(Args)]
struct ExportDataset {
    /// Source PNG or directory of PNGs; a synthetic slide is used otherwise.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = "normal")]
    class: CellClass,
    #[arg(long, default_value_t = 96)]
    patch_size: usize,
    #[arg(long, default_value_t = 96)]
    stride: usize,
    #[arg(long, default_value_t = 0.15)]
    threshold: f64,
    #[arg(long, default_value_t = 50)]
    min_area: usize,
    #[arg(long, default_value_t = 32)]
    features: usize,
}

fn preset(features: usize, tails: Option<usize>) -> Result<ConstraintSet> {
    let mut c = ConstraintSet::preset(&format!("table1-{features}"))?;
    if let Some(t) = tails {
        c.layout.tails = t;
        c.validate()?;
    }
    Ok(c)
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

/// PNG files below `dir`, sorted by path.
fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).with_context(|| format!("reading {}", d.display()))? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "png") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Images below `dir` with their class when a path component names one.
fn labelled_images(dir: &Path) -> Result<(Vec<Image>, Option<Vec<CellClass>>)> {
    let files = png_files(dir)?;
    if files.is_empty() {
        bail!("no PNG images under {}", dir.display());
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        images.push(Image::load_png(f)?);
        let rel = f.strip_prefix(dir).unwrap_or(f);
        labels.push(rel.iter().find_map(|c| c.to_str()?.parse::<CellClass>().ok()));
    }
    let labels = labels.into_iter().collect::<Option<Vec<_>>>();
    Ok((images, labels))
}

fn common_canvas(sets: &mut [&mut Vec<Image>]) {
    let side = sets
        .iter()
        .flat_map(|s| s.iter())
        .map(|im| im.width().max(im.height()))
        .max()
        .unwrap_or(8)
        .max(8)
        .div_ceil(4)
        * 4;
    for s in sets.iter_mut() {
        for im in s.iter_mut() {
            if im.width() != side || im.height() != side {
                *im = fit_to_canvas(im, side);
            }
        }
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn synth_cell(cli: &Cli, a: &SynthCell) -> Result<()> {
    let c = preset(a.features, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed());
    mkdir(&cli.out)?;
    let opts = CellBuildOptions::default();
    for k in 0..a.count {
        let f = fixture_cell_features(&c, a.class, &mut rng)?;
        let scene = Scene::new(vec![cell_object(&f, &c, &opts)?]);
        export_obj(&scene, cli.out.join(format!("cell-{k}.obj")))?;
        std::fs::write(cli.out.join(format!("cell-{k}.json")), serde_json::to_string_pretty(&f)?)?;
        render_view(&scene, RenderMode::Projection, 0.0, 0.0, a.size, a.extent)?
            .save_png(cli.out.join(format!("cell-{k}.png")))?;
    }
    println!("wrote {} {} cells to {}", a.count, a.class, cli.out.display());
    Ok(())
}

fn synth_cluster(cli: &Cli, a: &SynthCluster) -> Result<()> {
    let c = preset(32, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed());
    mkdir(&cli.out)?;
    for k in 0..a.count {
        let g = fixture_cluster_features(&c, &mut rng)?;
        let scene = assemble_cluster_with(&g, &c, &CellBuildOptions::default())?;
        export_obj(&scene, cli.out.join(format!("cluster-{k}.obj")))?;
        std::fs::write(cli.out.join(format!("cluster-{k}.json")), serde_json::to_string_pretty(&g)?)?;
        render_view(&scene, RenderMode::Projection, 0.0, 0.0, a.size, a.extent)?
            .save_png(cli.out.join(format!("cluster-{k}.png")))?;
    }
    println!("wrote {} clusters to {}", a.count, cli.out.display());
    Ok(())
}

fn render(cli: &Cli, a: &RenderArgs) -> Result<()> {
    let scene = import_obj(&a.input)?;
    let spec = ProjectionSpec {
        thetas: a.thetas.clone(),
        phis: a.phis.clone(),
        size: a.size,
        mode: a.mode,
        world_extent: a.extent,
    };
    mkdir(&cli.out)?;
    let views = render_batch(&scene, &spec)?;
    for (t, p, im) in &views {
        im.save_png(cli.out.join(format!("view-{t}-{p}.png")))?;
    }
    let images: Vec<Image> = views.into_iter().map(|v| v.2).collect();
    Image::grid(&images, a.phis.len())?.save_png(cli.out.join("grid.png"))?;
    println!("rendered {} views to {}", images.len(), cli.out.display());
    Ok(())
}

fn train_gan(cli: &Cli, a: &TrainGan) -> Result<()> {
    let c = preset(a.features, a.tails)?;
    let base: TrainConfig = read_config(cli.config.as_deref())?;
    let cfg = TrainConfig {
        seed: cli.seed(),
        class: a.class,
        ..base
    };
    let real: Vec<Image> = match &a.data {
        Some(dir) => {
            let (_, records) = load_dataset(dir)?;
            records
                .iter()
                .filter(|r| r.class == a.class)
                .map(|r| fit_to_canvas(&r.image, cfg.image_size))
                .collect()
        }
        None => {
            let spec = FixtureSpec {
                cell_image_size: cfg.image_size,
                cell_extent: cfg.world_extent,
                ..FixtureSpec::default()
            };
            fixture_cells(a.class, &spec)?.into_iter().map(|(_, im)| im).collect()
        }
    };
    if real.len() < 2 {
        bail!("need at least two real {} images", a.class);
    }
    mkdir(&cli.out)?;
    let schedule = RunSchedule {
        iters: a.iters,
        eval_every: a.eval_every,
        ..RunSchedule::default()
    };
    let mut trainer = GanTrainer::new(c, cfg)?;
    let rows = trainer.run(&real, &schedule)?;
    let csv = cli.out.join("metrics.csv");
    if csv.exists() {
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf)?;
        let text = String::from_utf8(buf)?;
        let body: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        use std::io::Write;
        std::fs::OpenOptions::new().append(true).open(&csv)?.write_all(body.as_bytes())?;
    } else {
        save_metrics_csv(&rows, &csv)?;
    }
    trainer.generator.params.save(&cli.out.join("generator.ckpt"))?;
    trainer.critic.params.save(&cli.out.join("critic.ckpt"))?;
    let last = rows.last().expect("run yields rows");
    println!(
        "trained {} iterations; final critic_loss {:.6}, fid_proxy {:?}",
        last.iter, last.metrics.critic_loss, last.fid_proxy
    );
    Ok(())
}

fn parse_grid(s: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let (t, p) = s.split_once(':').context("grid must look like `t1,t2:p1,p2`")?;
    let list = |x: &str| -> Result<Vec<f64>> {
        x.split(',')
            .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad angle `{v}`")))
            .collect()
    };
    Ok((list(t)?, list(p)?))
}

fn train_topo(cli: &Cli, a: &TrainTopo) -> Result<()> {
    let mut cfg: TopoConfig = read_config(cli.config.as_deref())?;
    cfg.seed = cli.seed();
    if let Some(g) = &a.grid {
        (cfg.thetas, cfg.phis) = parse_grid(g)?;
    }
    if let Some(n) = a.min_n {
        cfg.min_n = n;
    }
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    let data: Vec<Image> = match &a.data {
        Some(dir) => png_files(dir)?
            .iter()
            .map(|f| Ok(fit_to_canvas(&Image::load_png(f)?, cfg.image_size)))
            .collect::<Result<_>>()?,
        None => {
            let spec = FixtureSpec {
                clusters: 10,
                cluster_image_size: cfg.image_size,
                cluster_extent: cfg.world_extent,
                seed: cli.seed(),
                ..FixtureSpec::default()
            };
            cellsynth::pipeline::fixture_clusters(&spec)?.into_iter().map(|(_, im)| im).collect()
        }
    };
    if data.is_empty() {
        bail!("no training images");
    }
    let mut t = TopoTransformer::new(ConstraintSet::preset("table1-32")?, cfg)?;
    if let Some(p) = &a.decoder_ckpt {
        let g = NetParams::load(p)?;
        t.load_decoder_tails(&g)?;
    }
    let before = t.decoder_bytes();
    let rows = train_transformer(&mut t, &data, a.steps)?;
    mkdir(&cli.out)?;
    std::fs::write(cli.out.join("metrics.csv"), topo_metrics_csv(&rows))?;
    t.params.save(&cli.out.join("transformer.ckpt"))?;
    for (k, s) in reconstruct(&t, &data)?.iter().enumerate().take(3) {
        export_obj(s, cli.out.join(format!("reconstruction-{k}.obj")))?;
    }
    let (first, last) = (&rows[0], rows.last().expect("rows"));
    println!(
        "loss {:.6} -> {:.6}; decoder unchanged: {}",
        first.loss,
        last.loss,
        t.decoder_bytes() == before
    );
    Ok(())
}

fn eval_fid(cli: &Cli, a: &EvalFid) -> Result<()> {
    let (mut real, real_labels) = labelled_images(&a.real)?;
    let (mut fake, fake_labels) = labelled_images(&a.fake)?;
    common_canvas(&mut [&mut real, &mut fake]);
    let e = Embedder::new(a.dim, cli.seed())?;
    let report = fid_report(&real, &fake, &e, real_labels.as_deref(), fake_labels.as_deref())?;
    print_json(&report)
}

fn export_dataset(cli: &Cli, a: &ExportDataset) -> Result<()> {
    let opts = SegmentOptions {
        threshold: a.threshold,
        min_area: a.min_area,
    };
    let sources: Vec<(String, Image)> = match &a.input {
        Some(p) if p.is_dir() => png_files(p)?
            .iter()
            .map(|f| {
                let name = f.file_stem().and_then(|s| s.to_str()).unwrap_or("source").to_string();
                Ok((name, Image::load_png(f)?))
            })
            .collect::<Result<_>>()?,
        Some(p) => vec![(
            p.file_stem().and_then(|s| s.to_str()).unwrap_or("source").to_string(),
            Image::load_png(p)?,
        )],
        None => (0..2)
            .map(|k| (format!("slide-{k}"), fixture_slide(192, 192, 12, cli.seed() + k)))
            .collect(),
    };
    let mut records = Vec::new();
    for (name, im) in &sources {
        records.extend(ingest_image(im, name, a.class, a.patch_size, a.stride, &opts)?);
    }
    mkdir(&cli.out)?;
    let m = write_dataset(&cli.out, &records, &format!("table1-{}", a.features), &[cli.seed()])?;
    print_json(&m.class_counts)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::SynthCell(a) => synth_cell(cli, a),
        Command::SynthCluster(a) => synth_cluster(cli, a),
        Command::Render(a) => render(cli, a),
        Command::TrainGan(a) => train_gan(cli, a),
        Command::TrainTopo(a) => train_topo(cli, a),
        Command::EvalFid(a) => eval_fid(cli, a),
        Command::ExportDataset(a) => export_dataset(cli, a),
        Command::RunExperiment => {
            let path = cli.config.as_deref().context("run-experiment needs --config")?;
            let mut cfg = ExperimentConfig::load(path)?;
            if cli.out != Path::new(".") {
                cfg.output_dir = cli.out.clone();
            }
            if let Some(s) = cli.seed {
                cfg.seeds = vec![s];
            }
            let report = run_experiment(&cfg)?;
            print_json(&report)
        }
    }
}

fn main() {
    if let Err(e) = run(&Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
