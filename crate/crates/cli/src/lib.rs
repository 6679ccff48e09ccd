//! The `compot` command-line pipeline.
//!
//! ```text
//! compot gram        activations → per-layer Gram matrices
//! compot allocate    weights → allocation plan (JSON)
//! compot compress    weights + grams + plan → artifacts + report
//! compot reconstruct artifacts → dense weights
//! compot report      weights + artifacts → report
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use compot::allocator::{self, AllocationPlan, AllocatorConfig, PlanEntry, PlanMode, Status};
use compot::artifact::{sidecar_path, Artifacts, LayerArtifact};
use compot::baselines::{self, V2Input};
use compot::factorizer::{self, InitMode};
use compot::gram::{self, CholeskyFactor, GramState, RidgePolicy};
use compot::report::{self, LayerMetrics, Report};
use compot::tensorio::{self, LayerSpec, Manifest, TensorContainer, TensorSet, WeightMatrix};
use compot::ErrorKind;
use rayon::prelude::*;

pub mod config;

use config::{Baseline, ConfigArgs, GroupingArg, InitKind, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] compot::Error),
    #[error("config error: {0}")]
    Config(String),
}

impl CliError {
    /// 0 ok, 1 io/format, 2 config, 3 numerical, 4 infeasible budget.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Numerical => 3,
                ErrorKind::Infeasible => 4,
                ErrorKind::Io | ErrorKind::Format => 1,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "compot", version, about = "Training-free weight compression with orthogonal dictionaries")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Accumulate per-layer Gram matrices from calibration activations.
    Gram(GramArgs),
    /// Assign per-layer compression ratios and (k, s) budgets.
    Allocate(AllocateArgs),
    /// Factorize every layer according to a plan.
    Compress(CompressArgs),
    /// Expand artifacts back into dense weights.
    Reconstruct(ReconstructArgs),
    /// Measure artifacts against the original weights.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GramArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Container with `<weight>/activations` or `<weight>/activations/<i>`
    /// tensors, N×m each.
    #[arg(long)]
    pub activations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct AllocateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    /// Gram container; only read by `--baseline v2-alloc`.
    #[arg(long)]
    pub grams: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    /// Gram container. Without it every layer is compressed unwhitened.
    #[arg(long)]
    pub grams: Option<PathBuf>,
    #[arg(long)]
    pub plan: PathBuf,
    /// Artifact container; the sidecar goes to `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Report JSON, default `<out>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub artifacts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub artifacts: PathBuf,
    #[arg(long)]
    pub grams: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gram(a) => cmd_gram(&a),
        Command::Allocate(a) => cmd_allocate(&a),
        Command::Compress(a) => cmd_compress(&a),
        Command::Reconstruct(a) => cmd_reconstruct(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

/// Writes every `(path, bytes)` pair through temp files in the target
/// directories, renaming only once all writes succeeded.
pub fn write_atomic(files: &[(&Path, &[u8])]) -> Result<()> {
    let mut staged = Vec::with_capacity(files.len());
    for (path, bytes) in files {
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(compot::Error::from)?;
        tmp.write_all(bytes).map_err(compot::Error::from)?;
        tmp.as_file().sync_all().map_err(compot::Error::from)?;
        staged.push((tmp, *path));
    }
    for (tmp, path) in staged {
        tmp.persist(path).map_err(|e| compot::Error::from(e.error))?;
    }
    Ok(())
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

/// Runs `f` over `items` on `jobs` threads, keeping input order. The first
/// error in input order wins.
fn par_map<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    pool(jobs)?.install(|| items.par_iter().map(&f).collect::<Vec<_>>().into_iter().collect())
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let m = Manifest::read(path)?;
    if m.layers.is_empty() {
        return Err(CliError::Config("manifest lists no layers".into()));
    }
    Ok(m)
}

fn load_layer(weights: &TensorContainer, spec: &LayerSpec) -> Result<WeightMatrix> {
    Ok(tensorio::load_weight(weights, &spec.weight, spec.orientation)?)
}

/// Whitening for a layer: its Gram's Cholesky factor, or the identity when
/// no Gram container was supplied.
fn layer_factor(grams: Option<&TensorContainer>, spec: &LayerSpec, m: usize) -> Result<CholeskyFactor> {
    let Some(grams) = grams else {
        return Ok(CholeskyFactor::identity(m));
    };
    let g = tensorio::load_f64_matrix(grams, &spec.gram_name())?;
    if g.nrows() != m {
        return Err(compot::Error::DimensionMismatch(format!(
            "gram {:?} is {}x{}, layer {:?} has {m} inputs",
            spec.gram_name(),
            g.nrows(),
            g.ncols(),
            spec.weight
        ))
        .into());
    }
    // the sample count is not stored; any positive value marks the Gram as populated
    let state = GramState::from_gram(g, 1)?;
    Ok(gram::cholesky(&state, &RidgePolicy::default())?)
}

fn activation_chunks(acts: &TensorContainer, weight: &str) -> Vec<String> {
    let mut names = Vec::new();
    let single = format!("{weight}/activations");
    if acts.contains(&single) {
        names.push(single.clone());
    }
    for i in 0.. {
        let n = format!("{single}/{i}");
        if !acts.contains(&n) {
            break;
        }
        names.push(n);
    }
    names
}

pub fn cmd_gram(a: &GramArgs) -> Result<()> {
    let manifest = read_manifest(&a.manifest)?;
    let acts = tensorio::read_container(&a.activations)?;
    // one Gram per distinct name, fed by the first layer that names it
    let mut targets: Vec<(String, String)> = Vec::new();
    for l in &manifest.layers {
        let g = l.gram_name();
        if !targets.iter().any(|(name, _)| *name == g) {
            targets.push((g, l.weight.clone()));
        }
    }
    let grams = par_map(a.jobs.max(1), &targets, |(gram_name, weight)| {
        let chunks = activation_chunks(&acts, weight);
        if chunks.is_empty() {
            return Err(compot::Error::MissingTensor(format!("{weight}/activations")).into());
        }
        let mut state: Option<GramState> = None;
        for c in &chunks {
            let t = acts.tensor(c)?;
            let &[rows, cols] = t.shape() else {
                return Err(compot::Error::NotAMatrix {
                    name: c.clone(),
                    shape: t.shape().to_vec(),
                }
                .into());
            };
            let st = state.get_or_insert_with(|| GramState::new(cols));
            st.accumulate_rows(rows, &t.to_f64_vec())?;
        }
        Ok((gram_name.clone(), state.expect("at least one chunk")))
    })?;

    let mut set = TensorSet::new();
    for (name, st) in &grams {
        let diag = match gram::cholesky(st, &RidgePolicy::default()) {
            Ok(f) => {
                let l = f.lower();
                let piv: Vec<f64> = (0..f.dim()).map(|i| l[(i, i)] * l[(i, i)]).collect();
                let (lo, hi) = piv.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &p| (lo.min(p), hi.max(p)));
                format!("ridge={:e} pivot_ratio={:e}", f.ridge_used(), hi / lo)
            }
            Err(e) => format!("not factorizable ({e})"),
        };
        println!("{name}: N={} dim={} {diag}", st.samples(), st.dim());
        set.insert(name.clone(), st.to_tensor())?;
    }
    write_atomic(&[(&a.out, &set.encode()?)])
}

fn plan_shapes(manifest: &Manifest, weights: &[WeightMatrix], grouping: GroupingArg) -> Vec<(String, usize, usize, String)> {
    manifest
        .layers
        .iter()
        .zip(weights)
        .map(|(l, w)| {
            let group = match grouping {
                GroupingArg::Global => "all".to_string(),
                GroupingArg::PerProjectionType => allocator::projection_type(&l.weight).to_string(),
                GroupingArg::Custom => l.group.clone().unwrap_or_default(),
            };
            (l.weight.clone(), w.rows(), w.cols(), group)
        })
        .collect()
}

/// Builds the plan for `cfg` without writing it.
pub fn build_plan(manifest: &Manifest, weights: &TensorContainer, grams: Option<&TensorContainer>, cfg: &RunConfig) -> Result<AllocationPlan> {
    manifest.validate(weights, grams)?;
    let mats = par_map(cfg.jobs, &manifest.layers, |l| load_layer(weights, l))?;
    let shapes = plan_shapes(manifest, &mats, cfg.grouping);

    if let Some(cr) = cfg.static_cr {
        if cfg.cr.is_some() {
            return Err(CliError::Config("--cr and --static-cr are mutually exclusive".into()));
        }
        let plan = allocator::static_plan(&shapes, cr)?;
        return Ok(allocator::plan_to_layer_budgets(&plan, &[], cfg.ks_ratio)?);
    }
    let cr = cfg
        .cr
        .ok_or_else(|| CliError::Config("one of --cr or --static-cr is required".into()))?;

    if cfg.baseline == Baseline::V2Alloc {
        let factors = par_map(cfg.jobs, &manifest.layers.iter().zip(&mats).collect::<Vec<_>>(), |(l, w)| {
            layer_factor(grams, l, w.rows())
        })?;
        let groups: Vec<String> = manifest
            .layers
            .iter()
            .map(|l| match (cfg.grouping, &l.group) {
                (GroupingArg::Custom, Some(g)) => g.clone(),
                _ => allocator::projection_type(&l.weight).to_string(),
            })
            .collect();
        let items: Vec<V2Input<'_>> = (0..mats.len())
            .map(|i| V2Input {
                group: &groups[i],
                weight: &mats[i],
                factor: &factors[i],
            })
            .collect();
        // the listing's ratio is the kept fraction
        let kept = baselines::v2_cr_allocation(&items, 1.0 - cr)?;
        let crs: Vec<f64> = kept.iter().map(|k| 1.0 - k).collect();
        let shapes: Vec<_> = shapes
            .into_iter()
            .zip(groups)
            .map(|((name, m, n, _), g)| (name, m, n, g))
            .collect();
        let plan = allocator::ratio_plan(&shapes, &crs, cr, PlanMode::V2)?;
        return Ok(allocator::plan_to_layer_budgets(&plan, &[], cfg.ks_ratio)?);
    }

    let specs = par_map(cfg.jobs, &manifest.layers.iter().zip(&mats).collect::<Vec<_>>(), |(l, w)| {
        Ok(allocator::compute_spectrum(w, l.group.clone())?)
    })?;
    let acfg = AllocatorConfig {
        target_cr: cr,
        cr_min: cfg.cr_min,
        cr_max: cfg.cr_max,
        grouping: cfg.grouping.into(),
    };
    let plan = allocator::allocate(&specs, &acfg)?;
    Ok(allocator::plan_to_layer_budgets(&plan, &specs, cfg.ks_ratio)?)
}

pub fn cmd_allocate(a: &AllocateArgs) -> Result<()> {
    let manifest = read_manifest(&a.manifest)?;
    let cfg = RunConfig::resolve(&manifest.config, &a.config)?;
    let weights = tensorio::read_container(&a.weights)?;
    let grams = a.grams.as_deref().map(tensorio::read_container).transpose()?;
    let plan = build_plan(&manifest, &weights, grams.as_ref(), &cfg)?;
    plan.validate()?;
    let dense = plan.matrices.iter().filter(|e| e.status == Status::Dense).count();
    println!(
        "{} matrices, {} dense, target cr {}, achieved cr {:.6} (low-rank model)",
        plan.matrices.len(),
        dense,
        plan.target_cr,
        plan.achieved_cr
    );
    write_atomic(&[(&a.out, plan.to_json_pretty()?.as_bytes())])
}

/// Per-layer seed for random initialization, stable under manifest reordering.
fn layer_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed
}

fn compress_layer(
    spec: &LayerSpec,
    entry: &PlanEntry,
    weights: &TensorContainer,
    grams: Option<&TensorContainer>,
    cfg: &RunConfig,
) -> Result<(LayerArtifact, LayerMetrics)> {
    let tensor = weights.tensor(&spec.weight)?;
    let w = tensorio::weight_from_tensor(&spec.weight, &tensor, spec.orientation)?;
    if (w.rows(), w.cols()) != (entry.m, entry.n) {
        return Err(CliError::Config(format!(
            "plan says {:?} is {}x{}, weights have {}x{}",
            entry.name,
            entry.m,
            entry.n,
            w.rows(),
            w.cols()
        )));
    }
    let dense = |w: &WeightMatrix, tensor| -> Result<(LayerArtifact, LayerMetrics)> {
        let art = LayerArtifact::dense(&spec.weight, spec.orientation, tensor)?;
        let m = report::layer_metrics(w, &CholeskyFactor::identity(w.rows()), &art, None)?;
        Ok((art, m))
    };
    if entry.status == Status::Dense {
        return dense(&w, tensor);
    }
    let factor = layer_factor(grams, spec, w.rows())?;
    match cfg.baseline {
        Baseline::None => {
            let (Some(k), Some(s)) = (entry.k, entry.s) else {
                return Err(CliError::Config(format!("plan entry {:?} has no (k, s); re-run allocate", entry.name)));
            };
            let wt = gram::whiten(&factor, &w)?;
            let mut fcfg = cfg.factorizer();
            fcfg.init = match cfg.init {
                InitKind::Svd => InitMode::Svd,
                InitKind::Random => InitMode::Random {
                    seed: layer_seed(cfg.seed, &spec.weight),
                },
            };
            let fz = factorizer::factorize(&wt, &fcfg, k, s)?;
            let art = LayerArtifact::compot(&spec.weight, spec.orientation, &factor, &fz.dictionary, &fz.codes)?;
            let m = report::layer_metrics(&w, &factor, &art, Some(&fz.trace))?;
            Ok((art, m))
        }
        Baseline::Svd | Baseline::V2Alloc => {
            if entry.r == 0 {
                // nothing to keep in factored form; store as-is
                return dense(&w, tensor);
            }
            let lr = baselines::truncated_whitened_svd(&w, &factor, entry.r)?;
            let art = LayerArtifact::low_rank(&spec.weight, spec.orientation, &lr.left, &lr.right)?;
            let m = report::layer_metrics(&w, &factor, &art, None)?;
            Ok((art, m))
        }
    }
}

fn default_report_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".report.json");
    PathBuf::from(s)
}

pub fn cmd_compress(a: &CompressArgs) -> Result<()> {
    let manifest = read_manifest(&a.manifest)?;
    let cfg = RunConfig::resolve(&manifest.config, &a.config)?;
    let weights = tensorio::read_container(&a.weights)?;
    let grams = a.grams.as_deref().map(tensorio::read_container).transpose()?;
    manifest.validate(&weights, grams.as_ref())?;
    let plan = AllocationPlan::from_json_slice(&std::fs::read(&a.plan).map_err(compot::Error::from)?)?;
    if cfg.baseline == Baseline::V2Alloc && plan.mode != PlanMode::V2 {
        return Err(CliError::Config("--baseline v2-alloc needs a plan made with --baseline v2-alloc".into()));
    }
    let mut work = Vec::with_capacity(manifest.layers.len());
    for l in &manifest.layers {
        let entry = plan
            .entry(&l.weight)
            .ok_or_else(|| CliError::Config(format!("plan has no entry for {:?}", l.weight)))?;
        work.push((l, entry));
    }
    let results = par_map(cfg.jobs, &work, |(l, e)| compress_layer(l, e, &weights, grams.as_ref(), &cfg))?;
    let (layers, metrics): (Vec<_>, Vec<_>) = results.into_iter().unzip();

    let artifacts = Artifacts { layers };
    let (container, sidecar) = artifacts.encode()?;
    let echo = serde_json::json!({
        "run": cfg,
        "plan": {"mode": plan.mode, "target_cr": plan.target_cr, "ks_ratio": plan.ks_ratio, "allocator": plan.config},
    });
    let rep = report::global_report(metrics, Some(plan.target_cr), echo)?;
    let report_path = a.report.clone().unwrap_or_else(|| default_report_path(&a.out));
    let report_json = rep.to_json_pretty()?;
    let sidecar_file = sidecar_path(&a.out);
    let mut files: Vec<(&Path, &[u8])> = vec![
        (&a.out, &container),
        (&sidecar_file, &sidecar),
        (&report_path, report_json.as_bytes()),
    ];
    let csv = rep.to_csv()?;
    if let Some(p) = &a.csv {
        files.push((p, csv.as_bytes()));
    }
    write_atomic(&files)?;
    print!("{}", rep.to_table());
    Ok(())
}

pub fn cmd_reconstruct(a: &ReconstructArgs) -> Result<()> {
    let arts = Artifacts::read(&a.artifacts)?;
    let set = arts.reconstruct()?;
    write_atomic(&[(&a.out, &set.encode()?)])
}

/// Metrics of stored artifacts against the original weights.
pub fn build_report(manifest: &Manifest, weights: &TensorContainer, grams: Option<&TensorContainer>, arts: &Artifacts) -> Result<Report> {
    let mut metrics = Vec::with_capacity(arts.layers.len());
    for art in &arts.layers {
        let spec = manifest
            .layers
            .iter()
            .find(|l| l.weight == art.name())
            .ok_or_else(|| CliError::Config(format!("artifact layer {:?} is not in the manifest", art.name())))?;
        let w = tensorio::load_weight(weights, &spec.weight, art.orientation())?;
        let factor = match art {
            LayerArtifact::Dense(_) => CholeskyFactor::identity(w.rows()),
            _ => layer_factor(grams, spec, w.rows())?,
        };
        metrics.push(report::layer_metrics(&w, &factor, art, None)?);
    }
    Ok(report::global_report(metrics, None, serde_json::json!({}))?)
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let manifest = read_manifest(&a.manifest)?;
    let weights = tensorio::read_container(&a.weights)?;
    let grams = a.grams.as_deref().map(tensorio::read_container).transpose()?;
    let arts = Artifacts::read(&a.artifacts)?;
    let rep = build_report(&manifest, &weights, grams.as_ref(), &arts)?;
    let json = rep.to_json_pretty()?;
    let csv = rep.to_csv()?;
    let mut files: Vec<(&Path, &[u8])> = Vec::new();
    if let Some(p) = &a.out {
        files.push((p, json.as_bytes()));
    }
    if let Some(p) = &a.csv {
        files.push((p, csv.as_bytes()));
    }
    write_atomic(&files)?;
    print!("{}", rep.to_table());
    Ok(())
}
