use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use relabel::analysis::{confidence_vs_iou, crop_iou_cdf, read_boxes_csv};
use relabel::annotate::{fc_to_pointwise_conv, read_feature_maps, read_head, read_label_maps, write_feature_maps, write_head, write_label_maps, ClassifierHead, FeatureMap};
use relabel::augment::{seeded_stream, sample_crop_detailed, CropParams, CropRegion, ImageSize};
use relabel::cost::{storage_cost, IndexWidth, Layout};
use relabel::pooling::{label_variant, LabelVariant};
use relabel::sparse::encode_sparse;
use relabel::store::{read_store, write_store};
use relabel::traindemo::{conflicting_labels, make_synthetic_dataset, train, write_reports_csv, SceneConfig, Supervision, TrainConfig};
use relabel::{DenseLabelMap, QuantFormat, ValueMode};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;

/// Localized multi-label maps: annotate, store, pool and analyse.
#[derive(Parser, Debug)]
#[command(name = "relabel", version)]
struct Cli {
    /// Plain-text key=value file supplying defaults for absent flags
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a classifier head over feature maps and store the top-k label maps
    Annotate(AnnotateArgs),
    /// Sparsify dense label maps into a label store
    Encode(EncodeArgs),
    /// Pool the label of one crop
    Pool(PoolArgs),
    /// Sample random resized crops
    SimulateCrops(SimulateArgs),
    /// CDF of crop IoU against ground-truth boxes
    CropStats(CropStatsArgs),
    /// Pooled-label confidence binned by crop IoU
    Confidence(ConfidenceArgs),
    /// Bytes needed to keep label maps for a dataset
    StorageCost(CostArgs),
    /// Synthetic training experiments
    TrainDemo(TrainArgs),
    /// Print a label store's header and record count
    Inspect(InspectArgs),
    /// Write synthetic features, head and boxes for trying the pipeline
    MakeDemoInputs(DemoInputArgs),
}

#[derive(Args, Debug)]
struct AnnotateArgs {
    /// Feature maps file
    #[arg(long)]
    features: PathBuf,
    /// Classifier head file
    #[arg(long)]
    head: PathBuf,
    /// Output label store
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    topk: usize,
    #[arg(long, default_value = "f32")]
    quant: QuantFormat,
    /// Also keep the dense raw-score maps here
    #[arg(long)]
    dense_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    /// Dense label maps file
    #[arg(long)]
    maps: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    topk: usize,
    #[arg(long, default_value = "f32")]
    quant: QuantFormat,
}

#[derive(Args, Debug)]
struct PoolArgs {
    #[arg(long)]
    store: PathBuf,
    /// Image id
    #[arg(long)]
    id: String,
    /// Normalized crop as x,y,w,h
    #[arg(long, allow_hyphen_values = true)]
    region: CropRegion,
    #[arg(long, default_value = "loc_multi")]
    variant: LabelVariant,
    /// Print every class, not only the nonzero ones
    #[arg(long)]
    all: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    samples: usize,
    /// area=LO:HI,aspect=LO:HI[,attempts=N]
    #[arg(long, default_value = "area=0.08:1,aspect=0.75:1.3333333333333333")]
    params: CropParams,
    /// Image width/height ratio the aspect range refers to
    #[arg(long, default_value_t = 1.0)]
    image_aspect: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CropStatsArgs {
    /// image_id,x0,y0,x1,y1 (normalized, with header)
    #[arg(long)]
    boxes: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    crops_per_image: usize,
    #[arg(long, default_value = "area=0.08:1,aspect=0.75:1.3333333333333333")]
    params: CropParams,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ConfidenceArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    boxes: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Total crops, spread over the images
    #[arg(long, default_value_t = 10000)]
    samples: usize,
    #[arg(long, default_value = "area=0.08:1,aspect=0.75:1.3333333333333333")]
    params: CropParams,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LayoutArg {
    Dense,
    Sparse,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum IndexBits {
    #[value(name = "16")]
    U16,
    #[value(name = "32")]
    U32,
}

#[derive(Args, Debug)]
struct CostArgs {
    #[arg(long)]
    images: u64,
    #[arg(long = "h")]
    height: u64,
    #[arg(long = "w")]
    width: u64,
    #[arg(long)]
    classes: Option<u64>,
    #[arg(long, value_enum)]
    layout: LayoutArg,
    /// Entries kept per pixel (sparse layout)
    #[arg(long)]
    k: Option<u64>,
    #[arg(long, default_value = "f32")]
    quant: QuantFormat,
    /// Class index width in bits (sparse layout)
    #[arg(long, value_enum, default_value = "16")]
    index_bits: IndexBits,
    /// Mean image-id length, for the manifest
    #[arg(long, default_value_t = 0)]
    id_len: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DemoMode {
    Conflict,
    Variants,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    mode: DemoMode,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    /// Labels presented in turn on the fixed input (conflict mode)
    #[arg(long, value_delimiter = ',', default_value = "0,1")]
    labels: Vec<usize>,
    /// Scenes to generate (variants mode)
    #[arg(long, default_value_t = 60)]
    scenes: usize,
    #[arg(long, default_value_t = 3)]
    objects: usize,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 2000)]
    eval_crops: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    store: PathBuf,
    /// Also list the image ids
    #[arg(long)]
    ids: bool,
}

#[derive(Args, Debug)]
struct DemoInputArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    images: usize,
    #[arg(long = "h", default_value_t = 15)]
    height: usize,
    #[arg(long = "w", default_value_t = 15)]
    width: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 3)]
    objects: usize,
}

fn main() -> ExitCode {
    let argv = match apply_config(std::env::args_os().collect()) {
        Ok(argv) => argv,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(EXIT_DATA);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_DATA)
        }
    }
}

/// Appends `--key=value` from the `--config` file for every flag not given
/// on the command line.
fn apply_config(mut argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(pos) = argv.iter().position(|a| a == "--config" || a.to_string_lossy().starts_with("--config=")) else {
        return Ok(argv);
    };
    let path = match argv[pos].to_string_lossy().strip_prefix("--config=") {
        Some(p) => PathBuf::from(p),
        None => match argv.get(pos + 1) {
            Some(p) => PathBuf::from(p),
            None => return Ok(argv),
        },
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
    let given: Vec<String> = argv
        .iter()
        .filter_map(|a| a.to_str())
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value", path.display(), n + 1);
        };
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key == "config" || given.contains(&key) {
            continue;
        }
        argv.push(format!("--{key}={}", value.trim()).into());
    }
    Ok(argv)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Annotate(a) => annotate(a),
        Command::Encode(a) => encode(a),
        Command::Pool(a) => pool(a),
        Command::SimulateCrops(a) => simulate(a),
        Command::CropStats(a) => crop_stats(a),
        Command::Confidence(a) => confidence(a),
        Command::StorageCost(a) => cost(a),
        Command::TrainDemo(a) => train_demo(a),
        Command::Inspect(a) => inspect(a),
        Command::MakeDemoInputs(a) => demo_inputs(a),
    }
}

fn store_maps(maps: &[(String, DenseLabelMap)], topk: usize, quant: QuantFormat, out: &Path) -> Result<()> {
    let sparse = maps
        .iter()
        .map(|(id, m)| Ok((id.as_str(), encode_sparse(m, topk, quant).with_context(|| format!("encoding {id}"))?)))
        .collect::<Result<Vec<_>>>()?;
    let store = write_store(out, &sparse).with_context(|| format!("writing {}", out.display()))?;
    let h = store.header();
    println!(
        "wrote {} maps ({}x{}x{}, k={}, {}) to {}",
        store.len(),
        h.height,
        h.width,
        h.num_classes,
        h.k,
        h.quant,
        out.display()
    );
    Ok(())
}

fn annotate(a: AnnotateArgs) -> Result<()> {
    let features = read_feature_maps(&a.features).with_context(|| format!("reading {}", a.features.display()))?;
    let head = read_head(&a.head).with_context(|| format!("reading {}", a.head.display()))?;
    let maps = features
        .iter()
        .map(|(id, f)| Ok((id.clone(), fc_to_pointwise_conv(f, &head).with_context(|| format!("annotating {id}"))?)))
        .collect::<Result<Vec<_>>>()?;
    if let Some(p) = &a.dense_out {
        write_label_maps(p, &maps).with_context(|| format!("writing {}", p.display()))?;
    }
    store_maps(&maps, a.topk, a.quant, &a.out)
}

fn encode(a: EncodeArgs) -> Result<()> {
    let maps = read_label_maps(&a.maps).with_context(|| format!("reading {}", a.maps.display()))?;
    store_maps(&maps, a.topk, a.quant, &a.out)
}

fn pool(a: PoolArgs) -> Result<()> {
    let store = read_store(&a.store).with_context(|| format!("opening {}", a.store.display()))?;
    let target = match a.variant {
        LabelVariant::LocMulti => store.target(&a.id, &a.region)?,
        v => label_variant(&store.get_map(&a.id)?.densify(), &a.region, v)?,
    };
    let mut out = io::stdout().lock();
    writeln!(out, "class_index,probability")?;
    for (k, p) in target.probs().iter().enumerate() {
        if a.all || *p != 0.0 {
            writeln!(out, "{k},{p:.9}")?;
        }
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let image = ImageSize::new(a.image_aspect, 1.0)?;
    println!("seed={}", a.seed);
    let mut rng = seeded_stream(a.seed, 0);
    let mut out = csv_writer(a.out.as_deref())?;
    out.write_record(["index", "x", "y", "w", "h", "area", "fallback"])?;
    for i in 0..a.samples {
        let s = sample_crop_detailed(&mut rng, &a.params, image);
        let r = s.region;
        out.write_record([
            i.to_string(),
            format!("{:.6}", r.x),
            format!("{:.6}", r.y),
            format!("{:.6}", r.w),
            format!("{:.6}", r.h),
            format!("{:.6}", r.area()),
            s.fallback.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

fn csv_writer(path: Option<&Path>) -> Result<csv::Writer<Box<dyn Write>>> {
    Ok(csv::Writer::from_writer(output(path)?))
}

fn read_boxes(path: &Path) -> Result<Vec<relabel::analysis::ImageBoxes>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_boxes_csv(file).with_context(|| format!("reading {}", path.display()))
}

fn crop_stats(a: CropStatsArgs) -> Result<()> {
    let boxes = read_boxes(&a.boxes)?;
    let table = crop_iou_cdf(&boxes, &a.params, a.crops_per_image, a.seed)?;
    println!("seed={}", a.seed);
    println!(
        "samples={} skipped_images={} fraction_zero={:.6} fraction_above_half={:.6}",
        table.sample_count, table.skipped_images, table.fraction_zero, table.fraction_above_half
    );
    table.write_csv(output(a.out.as_deref())?)?;
    Ok(())
}

fn confidence(a: ConfidenceArgs) -> Result<()> {
    let store = read_store(&a.store).with_context(|| format!("opening {}", a.store.display()))?;
    let boxes = read_boxes(&a.boxes)?;
    let profile = confidence_vs_iou(&store, &boxes, &a.params, a.samples, a.seed)?;
    println!("seed={}", a.seed);
    println!("samples={}", profile.sample_count);
    profile.write_csv(output(a.out.as_deref())?)?;
    Ok(())
}

fn cost(a: CostArgs) -> Result<()> {
    let layout = match a.layout {
        LayoutArg::Dense => Layout::Dense {
            classes: a.classes.context("--classes is required for the dense layout")?,
        },
        LayoutArg::Sparse => Layout::Sparse {
            k: a.k.context("--k is required for the sparse layout")?,
            index_width: match a.index_bits {
                IndexBits::U16 => IndexWidth::U16,
                IndexBits::U32 => IndexWidth::U32,
            },
        },
    };
    let c = storage_cost(a.images, a.height, a.width, layout, a.quant, a.id_len)?;
    println!("{} bytes", c.total_bytes());
    println!("payload={} overhead={}", c.payload_bytes, c.overhead_bytes);
    Ok(())
}

fn train_demo(a: TrainArgs) -> Result<()> {
    println!("seed={}", a.seed);
    match a.mode {
        DemoMode::Conflict => {
            let classes = a.labels.iter().max().map_or(2, |m| (m + 1).max(2));
            let run = conflicting_labels(&a.labels, classes, a.steps, a.lr)?;
            let mut out = csv_writer(a.out.as_deref())?;
            let mut header = vec!["step".to_string()];
            header.extend((0..classes).map(|k| format!("p{k}")));
            out.write_record(&header)?;
            for (i, p) in run.trajectory.iter().enumerate() {
                let mut row = vec![(i + 1).to_string()];
                row.extend(p.iter().map(|v| format!("{v:.9}")));
                out.write_record(&row)?;
            }
            out.flush()?;
            let last: Vec<String> = run.final_probs().iter().map(|v| format!("{v:.6}")).collect();
            eprintln!("final={}", last.join(","));
        }
        DemoMode::Variants => {
            let scenes = SceneConfig {
                n_scenes: a.scenes,
                objects_per_scene: a.objects,
                num_classes: a.classes,
                ..SceneConfig::default()
            };
            let dataset = make_synthetic_dataset(a.seed, &scenes)?;
            let config = TrainConfig {
                steps: a.steps,
                lr: a.lr,
                eval_crops: a.eval_crops,
                ..TrainConfig::default()
            };
            let reports = Supervision::ALL
                .iter()
                .map(|s| train(&dataset, *s, &config, a.seed))
                .collect::<relabel::Result<Vec<_>>>()?;
            write_reports_csv(output(a.out.as_deref())?, &reports)?;
        }
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let store = read_store(&a.store).with_context(|| format!("opening {}", a.store.display()))?;
    let h = store.header();
    let mode = match h.value_mode {
        ValueMode::RawScores => "raw_scores",
        ValueMode::Probabilities => "probabilities",
    };
    let mut out = io::stdout().lock();
    writeln!(out, "path: {}", a.store.display())?;
    writeln!(out, "version: {}", h.version)?;
    writeln!(out, "quant: {}", h.quant)?;
    writeln!(out, "value_mode: {mode}")?;
    writeln!(out, "height: {}", h.height)?;
    writeln!(out, "width: {}", h.width)?;
    writeln!(out, "classes: {}", h.num_classes)?;
    writeln!(out, "k: {}", h.k)?;
    writeln!(out, "record_bytes: {}", h.record_len())?;
    writeln!(out, "records: {}", h.record_count)?;
    if a.ids {
        for id in store.image_ids() {
            writeln!(out, "id: {id}")?;
        }
    }
    Ok(())
}

/// Synthetic scenes turned into annotator inputs: features are noisy one-hot
/// class indicators and the head scales them into confident logits.
fn demo_inputs(a: DemoInputArgs) -> Result<()> {
    use rand::Rng;
    let scenes = SceneConfig {
        n_scenes: a.images,
        height: a.height,
        width: a.width,
        num_classes: a.classes,
        objects_per_scene: a.objects,
        ..SceneConfig::default()
    };
    let dataset = make_synthetic_dataset(a.seed, &scenes)?;
    let c = a.classes;
    let mut rng = seeded_stream(a.seed, 1);
    let features = dataset
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let values = s
                .grid()
                .iter()
                .flat_map(|g| (0..c).map(move |k| f64::from(u8::from(*g == k))).collect::<Vec<_>>())
                .map(|v| v + rng.random_range(-0.2..0.2))
                .collect();
            Ok((format!("img{i:04}"), FeatureMap::new(a.height, a.width, c, values)?))
        })
        .collect::<relabel::Result<Vec<_>>>()?;
    let mut weights = vec![0.0; c * c];
    (0..c).for_each(|k| weights[k * c + k] = 6.0);
    let head = ClassifierHead::new(c, c, weights, None)?;

    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    write_feature_maps(a.out_dir.join("features.rlft"), &features)?;
    write_head(a.out_dir.join("head.rlft"), &head)?;
    let mut w = csv::Writer::from_path(a.out_dir.join("boxes.csv"))?;
    w.write_record(["image_id", "x0", "y0", "x1", "y1"])?;
    for ((id, _), scene) in features.iter().zip(&dataset) {
        for (_, b) in scene.gt_boxes() {
            w.write_record([id.clone(), b.x0.to_string(), b.y0.to_string(), b.x1.to_string(), b.y1.to_string()])?;
        }
        if scene.gt_boxes().is_empty() {
            w.write_record([id.as_str(), "", "", "", ""])?;
        }
    }
    w.flush()?;
    println!("seed={}", a.seed);
    println!("wrote features.rlft, head.rlft, boxes.csv to {}", a.out_dir.display());
    Ok(())
}
