//! The `partguide` command line.
//!
//! Exit codes: 0 success, 1 pipeline failure, 2 usage error, 3 bad or
//! missing input data.

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::classifier::{train_on_patches, Gamma, GuidanceModel, TrainConfig};
use crate::dataset::{
    load_features, BitMask, DatasetError, FeatureBlob, Manifest, PatchKey, SegmentMask, SimilarityScores,
    GSFV_HEADER_LEN,
};
use crate::evaluation::{
    config_hash, evaluate_models, fuse_best_per_part, label_efficiency_curve, read_runs_csv, report_header,
    selection_experiment, variant_table, CurveConfig, RunRecord, SelectionData, VariantTable,
};
use crate::guidance::{
    segment_variants, serve_lines, BoxFillBackend, HttpBackend, OracleBackend, PerPart, ProcessBackend, PromptOracleBackend,
    SegmentationBackend, TcpBackend, Variant, DEFAULT_THRESHOLD,
};
use crate::patchgrid::{build_grid, label_patches, PatchGrid, DEFAULT_COVERAGE, DEFAULT_DIVISOR, DEFAULT_OVERLAP};
use crate::prototypes::{
    annotation_cost_comparison, approximate_polygon_vertices, attach_scores, cluster_prototypes, rank_prototypes,
    read_prototypes, records_to_labels, simulate_annotation, write_prototypes, KMeansConfig, LabelStore,
    PrototypeError, DEFAULT_K,
};
use crate::synthetic::{SyntheticBenchmark, SyntheticConfig};

#[derive(Parser, Debug)]
#[command(name = "partguide", version, about = "Label-efficient part segmentation guidance")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build patch grids for every image, optionally with patch labels.
    Grid(GridArgs),
    /// Cluster patch features into prototypes and attach part scores.
    Prototypes(PrototypesArgs),
    /// Label ranked prototypes from ground truth with the click model.
    AnnotateSim(AnnotateArgs),
    /// Train a guidance classifier from stored prototype labels.
    Train(TrainArgs),
    /// Segment images with a trained model and one variant.
    Infer(InferArgs),
    /// Evaluate models against ground truth, or print a results table.
    Eval(EvalArgs),
    /// Per-part variant selection, full-information or sampled.
    Fuse(FuseArgs),
    /// Label-efficiency curve on the synthetic benchmark.
    Curve(CurveArgs),
    /// Serve the annotation API.
    Serve(ServeArgs),
    /// Describe the feature file format and list the patches to embed.
    ExportFeaturesSpec(ExportArgs),
    /// Write the synthetic benchmark as a dataset directory.
    Synth(SynthArgs),
    /// Run a reference segmentation backend speaking the line protocol.
    #[command(hide = true)]
    Backend(BackendArgs),
}

#[derive(Args, Debug, Clone)]
struct GridOpts {
    /// Patch side is round(min(width, height) / divisor).
    #[arg(long, default_value_t = DEFAULT_DIVISOR)]
    divisor: u32,
    /// Fractional overlap between neighbouring patches, in [0, 1).
    #[arg(long, default_value_t = DEFAULT_OVERLAP)]
    overlap: f64,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    grid: GridOpts,
    /// Write all grids as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also label patches for this part.
    #[arg(long, requires = "labels_out")]
    part: Option<String>,
    #[arg(long, requires = "part")]
    labels_out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_COVERAGE)]
    coverage: f64,
}

#[derive(Args, Debug)]
struct PrototypesArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Similarity scores CSV (image_id,patch_index,part_class,score).
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    grid: GridOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AnnotateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    prototypes: PathBuf,
    #[arg(long)]
    part: String,
    /// Label store; PARTGUIDE_STORE overrides.
    #[arg(long, default_value = "labels.jsonl")]
    store: PathBuf,
    /// Annotate only the top-ranked prototypes.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_COVERAGE)]
    coverage: f64,
    #[command(flatten)]
    grid: GridOpts,
    /// Write the click-cost comparison against polygon annotation here.
    #[arg(long)]
    cost_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    prototypes: PathBuf,
    #[arg(long, default_value = "labels.jsonl")]
    store: PathBuf,
    #[arg(long)]
    part: String,
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    /// RBF width, or `auto` for 1 / (dim · variance).
    #[arg(long, default_value = "auto")]
    gamma: Gamma,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stratified cap on the number of training patches.
    #[arg(long)]
    max_samples: Option<usize>,
    /// Train on labels from this many images, drawn with --seed.
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct BackendOpts {
    /// oracle | prompt-oracle | boxfill | tcp:HOST:PORT | http://HOST:PORT/segment | exec:COMMAND
    #[arg(long, default_value = "prompt-oracle")]
    backend: String,
    /// Concurrent backend requests per image.
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
    /// Read timeout for tcp and http backends, in seconds.
    #[arg(long, default_value_t = 30)]
    timeout: u64,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "LGSAM")]
    variant: Variant,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Restrict to these image ids.
    #[arg(long, value_delimiter = ',')]
    images: Vec<String>,
    #[command(flatten)]
    grid: GridOpts,
    #[command(flatten)]
    backend: BackendOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Print a stored results table (parts × columns) instead of evaluating.
    #[arg(long, conflicts_with_all = ["manifest", "features", "model"])]
    fixture: Option<PathBuf>,
    /// With --fixture: pick the best candidate per part.
    #[arg(long, requires = "fixture")]
    fuse: bool,
    #[arg(long, value_delimiter = ',', default_value = "GGSAM,CGSAM,LGSAM")]
    candidates: Vec<String>,
    #[arg(long, requires_all = ["features", "model"])]
    manifest: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    /// One model file per part.
    #[arg(long, num_args = 1..)]
    model: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "GGSAM,CGSAM,LGSAM,PatchNaive,PatchGGSAM,PatchCGSAM")]
    variants: Vec<Variant>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Also sweep these thresholds for the first variant.
    #[arg(long, value_delimiter = ',')]
    thresholds: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    images: Vec<String>,
    #[command(flatten)]
    grid: GridOpts,
    #[command(flatten)]
    backend: BackendOpts,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report directory (or CSV file with --fixture).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// Results table for full-information selection.
    #[arg(long, conflicts_with = "runs")]
    fixture: Option<PathBuf>,
    /// Per-image counts (per_image.csv from `eval`) for the sampled experiment.
    #[arg(long)]
    runs: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "GGSAM,CGSAM,LGSAM")]
    candidates: Vec<String>,
    /// Sample sizes; default 1, 2, 4, … up to min(64, images).
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    repetitions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CurveArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    repetitions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    train_images: usize,
    #[arg(long, default_value_t = 16)]
    eval_images: usize,
    /// oracle or prompt-oracle.
    #[arg(long, default_value = "prompt-oracle")]
    backend: String,
    #[arg(long, default_value_t = 1500)]
    max_samples: usize,
    /// Worker threads, 0 for all cores. Does not change results.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    prototypes: PathBuf,
    /// Label store; PARTGUIDE_STORE overrides.
    #[arg(long, default_value = "labels.jsonl")]
    store: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: std::net::SocketAddr,
    #[command(flatten)]
    grid: GridOpts,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// List every patch of this dataset that needs an embedding.
    #[arg(long, requires = "out")]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    grid: GridOpts,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    train_images: usize,
    #[arg(long, default_value_t = 16)]
    eval_images: usize,
}

#[derive(Args, Debug)]
struct BackendArgs {
    /// oracle | prompt-oracle | boxfill
    #[arg(long, default_value = "prompt-oracle")]
    kind: String,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    part: Option<String>,
    /// Listen for JSON lines on TCP instead of stdin/stdout.
    #[arg(long, conflicts_with = "http")]
    listen: Option<String>,
    /// Serve `POST /segment` over HTTP at this address.
    #[arg(long)]
    http: Option<std::net::SocketAddr>,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<crate::Error> for Failure {
    fn from(e: crate::Error) -> Self {
        let input = matches!(
            e,
            crate::Error::Dataset(_)
                | crate::Error::Prototype(PrototypeError::Store { .. })
                | crate::Error::Grid(crate::patchgrid::GridError::Dataset(_))
                | crate::Error::Evaluation(crate::evaluation::EvalError::Dataset(_))
        );
        Failure { code: if input { 3 } else { 1 }, message: e.to_string() }
    }
}

macro_rules! impl_failure_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                crate::Error::from(e).into()
            }
        }
    )*};
}
impl_failure_from!(
    DatasetError,
    PrototypeError,
    crate::patchgrid::GridError,
    crate::classifier::ClassifierError,
    crate::guidance::GuidanceError,
    crate::evaluation::EvalError
);

fn input_error(message: impl Into<String>) -> Failure {
    Failure { code: 3, message: message.into() }
}

fn pipeline_error(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

type CliResult = Result<(), Failure>;

/// Parses arguments, runs the command and returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Grid(a) => grid(a),
        Command::Prototypes(a) => prototypes(a),
        Command::AnnotateSim(a) => annotate_sim(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Fuse(a) => fuse(a),
        Command::Curve(a) => curve(a),
        Command::Serve(a) => serve(a),
        Command::ExportFeaturesSpec(a) => export_features_spec(a),
        Command::Synth(a) => synth(a),
        Command::Backend(a) => backend(a),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| pipeline_error(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| pipeline_error(format!("{}: {e}", path.display())))
}

fn grids_for(manifest: &Manifest, opts: &GridOpts) -> Result<Vec<PatchGrid>, Failure> {
    manifest
        .images
        .iter()
        .map(|img| build_grid(&img.id, img.width, img.height, opts.divisor, opts.overlap).map_err(Failure::from))
        .collect()
}

fn require_part(manifest: &Manifest, part: &str) -> CliResult {
    if manifest.has_class(part) {
        Ok(())
    } else {
        Err(input_error(format!(
            "unknown part class '{part}' (known: {})",
            manifest.part_classes.join(", ")
        )))
    }
}

fn grid(a: GridArgs) -> CliResult {
    let manifest = Manifest::load(&a.manifest)?;
    let grids = grids_for(&manifest, &a.grid)?;
    let total: usize = grids.iter().map(|g| g.patches.len()).sum();
    println!("{} images, {total} patches", grids.len());
    if let Some(out) = &a.out {
        let json = serde_json::to_string(&grids).map_err(|e| pipeline_error(e.to_string()))?;
        write_file(out, json)?;
    }
    if let (Some(part), Some(out)) = (&a.part, &a.labels_out) {
        require_part(&manifest, part)?;
        let mut csv = String::from("image_id,patch_index,part_class,label\n");
        let mut positives = 0;
        for (img, g) in manifest.images.iter().zip(&grids) {
            let mask = manifest.load_mask(img, part)?;
            for lp in label_patches(g, &mask, part, a.coverage)? {
                positives += lp.label as usize;
                let _ = writeln!(csv, "{},{},{},{}", lp.image_id, lp.patch.index, part, lp.label as u8);
            }
        }
        write_file(out, csv)?;
        println!("{positives} positive patches for '{part}'");
    }
    Ok(())
}

fn prototypes(a: PrototypesArgs) -> CliResult {
    let manifest = Manifest::load(&a.manifest)?;
    let grids = grids_for(&manifest, &a.grid)?;
    let features = load_features(&a.features, &grids)?;
    let scores = SimilarityScores::read_csv(&a.scores)?;
    scores.check_against(&grids)?;
    let mut protos = cluster_prototypes(&features, a.k, a.seed, &KMeansConfig::default())?;
    attach_scores(&mut protos, &scores);
    write_prototypes(&a.out, &protos)?;
    let sizes: Vec<usize> = protos.iter().map(|p| p.members.len()).collect();
    println!(
        "{} prototypes over {} patches (sizes {}..{})",
        protos.len(),
        features.len(),
        sizes.iter().min().unwrap_or(&0),
        sizes.iter().max().unwrap_or(&0)
    );
    Ok(())
}

/// Patch labels for `part` on every image of the manifest.
fn ground_truth_labels(
    manifest: &Manifest,
    grids: &[PatchGrid],
    part: &str,
    coverage: f64,
) -> Result<HashMap<PatchKey, bool>, Failure> {
    let mut gt = HashMap::new();
    for (img, g) in manifest.images.iter().zip(grids) {
        let mask = manifest.load_mask(img, part)?;
        for lp in label_patches(g, &mask, part, coverage)? {
            gt.insert(PatchKey::new(lp.image_id, lp.patch.index), lp.label);
        }
    }
    Ok(gt)
}

fn annotate_sim(a: AnnotateArgs) -> CliResult {
    let manifest = Manifest::load(&a.manifest)?;
    require_part(&manifest, &a.part)?;
    let grids = grids_for(&manifest, &a.grid)?;
    let protos = read_prototypes(&a.prototypes)?;
    let gt = ground_truth_labels(&manifest, &grids, &a.part, a.coverage)?;
    let ranked = rank_prototypes(&protos, &a.part)?;
    let budget = a.budget.unwrap_or(ranked.len()).min(ranked.len());
    let store = LabelStore::new(crate::service::store_path(a.store.clone()));
    let mut records = Vec::with_capacity(budget);
    for proto in &ranked[..budget] {
        let record = simulate_annotation(proto, &gt, &a.part)?;
        store.append(&record)?;
        records.push(record);
    }
    let clicks: u32 = records.iter().map(|r| r.clicks).sum();
    println!("{budget} prototypes annotated for '{}', {clicks} clicks, store {}", a.part, store.path().display());

    if let Some(out) = &a.cost_out {
        let mut vertices = Vec::new();
        let mut approximate = false;
        for img in &manifest.images {
            if !img.masks.contains_key(&a.part) {
                continue;
            }
            match img.polygon_vertices.get(&a.part) {
                Some(&n) => vertices.push(n),
                None => {
                    approximate = true;
                    vertices.push(approximate_polygon_vertices(&manifest.load_mask(img, &a.part)?));
                }
            }
        }
        let table = annotation_cost_comparison(&records, &BTreeMap::from([(a.part.clone(), (vertices, approximate))]))?;
        write_file(out, table.to_csv())?;
    }
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let features = FeatureBlob::read(&a.features)?;
    let protos = read_prototypes(&a.prototypes)?;
    let store = LabelStore::new(crate::service::store_path(a.store.clone()));
    let records = store.load()?;
    let mut labels = records_to_labels(&records, &protos, &a.part)?;
    if let Some(n) = a.images {
        let ids: BTreeSet<&str> = labels.iter().map(|(k, _)| k.image_id.as_str()).collect();
        let ids: Vec<&str> = ids.into_iter().collect();
        if n == 0 || n > ids.len() {
            return Err(input_error(format!("--images {n}: labels cover {} images", ids.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let keep: BTreeSet<String> =
            rand::seq::index::sample(&mut rng, ids.len(), n).into_iter().map(|i| ids[i].to_string()).collect();
        labels.retain(|(k, _)| keep.contains(&k.image_id));
    }
    if labels.is_empty() {
        return Err(input_error(format!("no labels for '{}' in {}", a.part, store.path().display())));
    }
    let config = TrainConfig { c: a.c, gamma: a.gamma, seed: a.seed, max_samples: a.max_samples, ..Default::default() };
    let model = train_on_patches(&a.part, &labels, &features, &config)?;
    model.save(&a.out)?;
    let positives = labels.iter().filter(|l| l.1).count();
    println!(
        "'{}': {} labels ({positives} positive), {} support vectors, gamma {:.4}, converged {}",
        a.part,
        labels.len(),
        model.support_count(),
        model.kernel_gamma,
        model.converged
    );
    Ok(())
}

fn part_masks(manifest: &Manifest, part: &str) -> Result<HashMap<String, BitMask>, Failure> {
    manifest
        .images
        .iter()
        .map(|img| Ok((img.id.clone(), manifest.load_mask(img, part)?)))
        .collect()
}

/// Builds the backend named by `spec`; ground-truth oracles read `part`
/// masks from the manifest.
fn make_backend(
    spec: &str,
    manifest: &Manifest,
    part: &str,
    timeout: Duration,
) -> Result<Box<dyn SegmentationBackend>, Failure> {
    Ok(match spec {
        "oracle" => Box::new(OracleBackend { masks: part_masks(manifest, part)? }),
        "prompt-oracle" => Box::new(PromptOracleBackend { masks: part_masks(manifest, part)? }),
        "boxfill" | "box" => Box::new(BoxFillBackend),
        s if s.starts_with("http://") || s.starts_with("https://") => Box::new(HttpBackend::new(s, Some(timeout))?),
        s if s.starts_with("tcp:") => Box::new(
            TcpBackend::new(&s[4..], Some(timeout)).map_err(|e| pipeline_error(format!("backend {s}: {e}")))?,
        ),
        s if s.starts_with("exec:") => {
            let mut words = s[5..].split_whitespace();
            let program = words.next().ok_or_else(|| pipeline_error("exec backend needs a command"))?;
            let mut cmd = std::process::Command::new(program);
            cmd.args(words);
            Box::new(ProcessBackend::spawn(&mut cmd).map_err(|e| pipeline_error(format!("backend {s}: {e}")))?)
        }
        other => {
            return Err(Failure {
                code: 2,
                message: format!("unknown backend '{other}' (oracle, prompt-oracle, boxfill, tcp:ADDR, http://URL, exec:CMD)"),
            })
        }
    })
}

fn selected_images<'a>(
    manifest: &'a Manifest,
    grids: &'a [PatchGrid],
    ids: &[String],
) -> Result<Vec<(&'a crate::dataset::ImageEntry, &'a PatchGrid)>, Failure> {
    for id in ids {
        if manifest.image(id).is_none() {
            return Err(input_error(format!("no image '{id}' in manifest")));
        }
    }
    Ok(manifest
        .images
        .iter()
        .zip(grids)
        .filter(|(img, _)| ids.is_empty() || ids.contains(&img.id))
        .collect())
}

fn infer(a: InferArgs) -> CliResult {
    let manifest = Manifest::load(&a.manifest)?;
    let grids = grids_for(&manifest, &a.grid)?;
    let model = GuidanceModel::load(&a.model)?;
    require_part(&manifest, &model.part_class)?;
    let images = selected_images(&manifest, &grids, &a.images)?;
    let used: Vec<PatchGrid> = images.iter().map(|(_, g)| (*g).clone()).collect();
    let features = load_features(&a.features, &used)?;
    let backend =
        make_backend(&a.backend.backend, &manifest, &model.part_class, Duration::from_secs(a.backend.timeout))?;
    std::fs::create_dir_all(&a.out).map_err(|e| pipeline_error(format!("{}: {e}", a.out.display())))?;

    let part = model.part_class.clone();
    let mut failures = 0;
    let mut total_regions = 0;
    for (_, g) in &images {
        let outcomes = segment_variants(
            g,
            &features,
            &part,
            &model,
            &[a.variant],
            a.threshold,
            backend.as_ref(),
            a.backend.max_in_flight,
        )?;
        for (v, regions, outcome) in outcomes {
            failures += outcome.failures.len();
            total_regions += regions.len();
            let stem = format!("{}.{}.{}", g.image_id, part, v.name());
            let mask = SegmentMask::from_bitmask(&g.image_id, &part, &outcome.mask);
            mask.write_json(&a.out.join(format!("{stem}.mask.json")))?;
            let json = serde_json::to_string_pretty(&regions).map_err(|e| pipeline_error(e.to_string()))?;
            write_file(&a.out.join(format!("{stem}.regions.json")), json)?;
        }
    }
    println!(
        "{} images, {total_regions} regions, {failures} failed regions, variant {}",
        images.len(),
        a.variant
    );
    Ok(())
}

fn print_fusion(table: &VariantTable, candidates: &[String]) -> CliResult {
    let names: Vec<&str> = candidates.iter().map(String::as_str).collect();
    let f = fuse_best_per_part(table, &names)?;
    for (part, v) in &f.picks {
        println!("  {part:<12} {v}");
    }
    println!("bounds: lower {:.3}, upper {:.3}", f.lower, f.upper);
    println!("fused average IoU: {:.3}", f.average);
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    if let Some(fixture) = &a.fixture {
        let table = VariantTable::read_csv(fixture)?;
        print!("{}", table.to_text(3));
        println!("best average column: {}", table.columns[table.best_column()]);
        if a.fuse {
            print_fusion(&table, &a.candidates)?;
        }
        if let Some(out) = &a.out {
            write_file(out, table.to_csv(6))?;
        }
        return Ok(());
    }
    let (Some(manifest_path), Some(features_path)) = (&a.manifest, &a.features) else {
        return Err(Failure { code: 2, message: "eval needs --fixture, or --manifest, --features and --model".into() });
    };
    let out = a.out.clone().ok_or(Failure { code: 2, message: "eval needs --out for reports".into() })?;
    let manifest = Manifest::load(manifest_path)?;
    let grids = grids_for(&manifest, &a.grid)?;
    let images = selected_images(&manifest, &grids, &a.images)?;
    let used: Vec<PatchGrid> = images.iter().map(|(_, g)| (*g).clone()).collect();
    let features = load_features(features_path, &used)?;

    let mut models = BTreeMap::new();
    for path in &a.model {
        let m = GuidanceModel::load(path)?;
        require_part(&manifest, &m.part_class)?;
        models.insert(m.part_class.clone(), m);
    }
    let timeout = Duration::from_secs(a.backend.timeout);
    let mut backends = BTreeMap::new();
    for part in models.keys() {
        backends.insert(part.clone(), make_backend(&a.backend.backend, &manifest, part, timeout)?);
    }
    let router = PerPart { backends };
    let mut gt: Vec<BTreeMap<String, BitMask>> = Vec::with_capacity(images.len());
    for (img, _) in &images {
        let mut m = BTreeMap::new();
        for part in models.keys() {
            m.insert(part.clone(), manifest.load_mask(img, part)?);
        }
        gt.push(m);
    }
    let eval_set: Vec<(&PatchGrid, &BTreeMap<String, BitMask>)> =
        images.iter().zip(&gt).map(|((_, g), m)| (*g, m)).collect();

    let runs = evaluate_models(
        &eval_set,
        &features,
        &models,
        &a.variants,
        a.threshold,
        &router,
        a.backend.max_in_flight,
    )?;
    let report = variant_table(&runs)?;
    let hash_input = (
        &a.variants,
        a.threshold,
        &a.backend.backend,
        a.grid.divisor,
        a.grid.overlap,
        models.values().map(|m| (&m.part_class, m.support_count(), m.bias.to_bits())).collect::<Vec<_>>(),
    );
    let header = report_header(a.seed, &config_hash(&hash_input), &[("threshold", a.threshold.to_string())]);
    write_file(&out.join("report.csv"), format!("{header}{}", report.pooled.to_csv(6)))?;
    write_file(&out.join("report_per_image_mean.csv"), format!("{header}{}", report.per_image_mean.to_csv(6)))?;
    write_file(&out.join("per_image.csv"), format!("{header}{}", report.per_image_csv()))?;
    write_file(&out.join("report.txt"), report.to_text())?;
    print!("{}", report.to_text());

    if !a.thresholds.is_empty() {
        let variant = a.variants[0];
        let mut values = vec![Vec::with_capacity(a.thresholds.len()); models.len()];
        for &t in &a.thresholds {
            let runs = evaluate_models(&eval_set, &features, &models, &[variant], t, &router, a.backend.max_in_flight)?;
            let r = variant_table(&runs)?;
            for (p, row) in values.iter_mut().enumerate() {
                row.push(r.pooled.values[p][0]);
            }
        }
        let table = VariantTable::new(
            models.keys().cloned().collect(),
            a.thresholds.iter().map(|t| t.to_string()).collect(),
            values,
        )?;
        write_file(&out.join("sweep.csv"), format!("{header}{}", table.to_csv(6)))?;
        println!("\nThreshold sweep ({variant})");
        print!("{}", table.to_text(3));
        println!("best average at threshold {}", table.columns[table.best_column()]);
    }
    Ok(())
}

fn fuse(a: FuseArgs) -> CliResult {
    if let Some(fixture) = &a.fixture {
        let table = VariantTable::read_csv(fixture)?;
        return print_fusion(&table, &a.candidates);
    }
    let Some(runs_path) = &a.runs else {
        return Err(Failure { code: 2, message: "fuse needs --fixture or --runs".into() });
    };
    let text = std::fs::read_to_string(runs_path).map_err(|e| input_error(format!("{}: {e}", runs_path.display())))?;
    let runs: Vec<RunRecord> = read_runs_csv(&text)?;
    let names: Vec<&str> = a.candidates.iter().map(String::as_str).collect();
    let data = SelectionData::from_runs(&runs, &names)?;
    let sizes = if a.sizes.is_empty() {
        std::iter::successors(Some(1usize), |n| Some(n * 2)).take_while(|&n| n <= data.images.len().min(64)).collect()
    } else {
        a.sizes.clone()
    };
    let curve = selection_experiment(&data, &sizes, a.repetitions, a.seed)?;
    print!("{}", curve.to_text());
    if let Some(out) = &a.out {
        let header = report_header(
            a.seed,
            &config_hash(&(&names, &sizes, a.repetitions)),
            &[("note", "choices are scored on the full set, which includes the sampled images".into())],
        );
        write_file(out, format!("{header}{}", curve.to_csv()))?;
    }
    Ok(())
}

fn curve(a: CurveArgs) -> CliResult {
    let bench = SyntheticBenchmark::generate(&SyntheticConfig {
        seed: a.seed,
        train_images: a.train_images,
        eval_images: a.eval_images,
        ..Default::default()
    })?;
    let config = CurveConfig {
        sizes: a.sizes.clone(),
        repetitions: a.repetitions,
        seed: a.seed,
        train: TrainConfig { max_samples: Some(a.max_samples), ..Default::default() },
        workers: a.workers,
        ..Default::default()
    };
    let curve = match a.backend.as_str() {
        "oracle" => label_efficiency_curve(&bench, &bench.oracle_backends(), &config)?,
        "prompt-oracle" => label_efficiency_curve(&bench, &bench.prompt_oracle_backends(), &config)?,
        other => return Err(Failure { code: 2, message: format!("curve backend must be oracle or prompt-oracle, not '{other}'") }),
    };
    let csv = curve.to_csv();
    match &a.out {
        Some(out) => write_file(out, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn serve(a: ServeArgs) -> CliResult {
    let manifest = Manifest::load(&a.manifest)?;
    let protos = read_prototypes(&a.prototypes)?;
    let store = LabelStore::new(crate::service::store_path(a.store.clone()));
    println!("serving {} prototypes on http://{} (store {})", protos.len(), a.addr, store.path().display());
    let state = crate::service::AppState::new(manifest, protos, a.grid.divisor, a.grid.overlap, store)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| pipeline_error(e.to_string()))?;
    rt.block_on(crate::service::serve(std::sync::Arc::new(state), a.addr))
        .map_err(|e| pipeline_error(format!("{}: {e}", a.addr)))
}

const FEATURES_SPEC: &str = "\
Patch feature file (GSFV), all integers little-endian:

  offset  size  field
  0       4     magic \"GSFV\"
  4       2     version, u16 = 1
  6       4     patch count N, u32
  10      4     feature dimension D, u32
  14      ...   N index entries: u16 id length L, L bytes UTF-8 image id, u32 patch index
  ...     4·N·D f32 feature matrix, row r belongs to index entry r

Every patch of every image's grid needs exactly one row. Patch indices are
row-major over the grid; see the patch list written with --out.
";

fn export_features_spec(a: ExportArgs) -> CliResult {
    print!("{FEATURES_SPEC}");
    println!("header length: {GSFV_HEADER_LEN} bytes");
    if let (Some(manifest), Some(out)) = (&a.manifest, &a.out) {
        let manifest = Manifest::load(manifest)?;
        let grids = grids_for(&manifest, &a.grid)?;
        let mut csv = String::from("image_id,patch_index,x0,y0,x1,y1\n");
        for g in &grids {
            for p in &g.patches {
                let b = p.bbox;
                let _ = writeln!(csv, "{},{},{},{},{},{}", g.image_id, p.index, b.x0, b.y0, b.x1, b.y1);
            }
        }
        write_file(out, csv)?;
        println!("{} patches listed in {}", grids.iter().map(|g| g.patches.len()).sum::<usize>(), out.display());
    }
    Ok(())
}

fn synth(a: SynthArgs) -> CliResult {
    let bench = SyntheticBenchmark::generate(&SyntheticConfig {
        seed: a.seed,
        train_images: a.train_images,
        eval_images: a.eval_images,
        ..Default::default()
    })?;
    let manifest = bench.write_dataset(&a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn backend(a: BackendArgs) -> CliResult {
    let server: Box<dyn SegmentationBackend> = match a.kind.as_str() {
        "boxfill" | "box" => Box::new(BoxFillBackend),
        kind @ ("oracle" | "prompt-oracle") => {
            let (Some(m), Some(part)) = (&a.manifest, &a.part) else {
                return Err(Failure { code: 2, message: format!("{kind} backend needs --manifest and --part") });
            };
            let manifest = Manifest::load(m)?;
            require_part(&manifest, part)?;
            let masks = part_masks(&manifest, part)?;
            if kind == "oracle" {
                Box::new(OracleBackend { masks })
            } else {
                Box::new(PromptOracleBackend { masks })
            }
        }
        other => return Err(Failure { code: 2, message: format!("unknown backend kind '{other}'") }),
    };
    if let Some(addr) = a.http {
        let rt = tokio::runtime::Runtime::new().map_err(|e| pipeline_error(e.to_string()))?;
        let app = crate::service::segment_router(std::sync::Arc::from(server));
        return rt
            .block_on(crate::service::serve_router(app, addr))
            .map_err(|e| pipeline_error(format!("{addr}: {e}")));
    }
    match &a.listen {
        None => {
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            serve_lines(server.as_ref(), stdin.lock(), stdout.lock()).map_err(|e| pipeline_error(e.to_string()))?;
        }
        Some(addr) => {
            let listener = std::net::TcpListener::bind(addr).map_err(|e| pipeline_error(format!("{addr}: {e}")))?;
            let local = listener.local_addr().map_err(|e| pipeline_error(e.to_string()))?;
            println!("listening on {local}");
            let _ = std::io::stdout().flush();
            std::thread::scope(|s| {
                for stream in listener.incoming().flatten() {
                    let server = server.as_ref();
                    s.spawn(move || {
                        if let Ok(reader) = stream.try_clone() {
                            let _ = serve_lines(server, BufReader::new(reader), stream);
                        }
                    });
                }
            });
        }
    }
    Ok(())
}
