//! `compact-attn` command line.
//!
//! Every subcommand prints its resolved parameters on the first line of
//! stdout. Exit codes: 0 on success, 1 for invalid input or parameters, 2 for
//! I/O and file-format errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::attention::{block_sparse_attention, dense_attention, flop_proxy, AttentionInputs};
use crate::error::{Error, Result};
use crate::io::{self, ConfigDocument, ConfigFile, ScheduleDocument};
use crate::layout::{raster_order, tile_order, TileShape, TokenOrder, VideoGrid};
use crate::masks::{rasterize, sparsity, GroupBoundaries, SpatialWindow};
use crate::metrics::{
    classify_spatial, classify_temporal, jaccard, recall, topk_block_fraction, AttentionProbMap,
};
use crate::search::{
    evaluate_config, merge_prompts, schedule_search, shrink_search, tau_sweep, SearchFamily,
    SearchParams, DEFAULT_FULL_PREFIX, DEFAULT_LAMBDA, DEFAULT_STEP_REUSE, DEFAULT_TAU,
};
use crate::synth::{
    battery, gen_probmap, gen_prompt_variant, gen_qkv, Perturbation, SpatialKind,
    SyntheticHeadSpec, TemporalKind,
};

/// Mass level used when labelling spatial patterns.
const EXTENT_MASS: f64 = 0.85;
const TOPK_TARGET: f64 = 0.95;

#[derive(Debug, Parser)]
#[command(name = "compact-attn", version, about = "Sparse video attention toolkit")]
pub struct Cli {
    /// Worker threads for per-head jobs (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Default seed for generators.
    #[arg(long, global = true, env = "COMPACT_ATTN_SEED", default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic attention maps (and optionally Q/K/V).
    Synth(SynthArgs),
    /// Search head configs or a step schedule from attention maps.
    Search(SearchArgs),
    /// Run dense and/or block-sparse attention on Q/K/V tensors.
    Attend(AttendArgs),
    /// Turn a head config into a block mask file.
    Rasterize(RasterizeArgs),
    /// Per-map metrics as CSV or JSON.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Pattern {
    Local,
    Cross,
    Global,
    /// One map per pattern family.
    Battery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Temporal {
    Invariant,
    Decay,
    Band,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value = "4x8x8")]
    grid: VideoGrid,
    #[arg(long, value_enum, default_value_t = Pattern::Local)]
    pattern: Pattern,
    /// JSON spec file; overrides the pattern flags.
    #[arg(long, conflicts_with = "pattern")]
    spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Temporal::Invariant)]
    temporal: Temporal,
    #[arg(long, default_value_t = 0.5)]
    rate: f64,
    #[arg(long, default_value_t = 1)]
    band_center: usize,
    #[arg(long, default_value_t = 0)]
    band_width: usize,
    /// Column half-extent of the local window or of the first cross corridor.
    #[arg(long)]
    omega: Option<usize>,
    /// Row half-extent of the local window or of the first cross corridor.
    #[arg(long)]
    eta: Option<usize>,
    #[arg(long)]
    omega2: Option<usize>,
    #[arg(long)]
    eta2: Option<usize>,
    /// In-pattern mass fraction.
    #[arg(long, default_value_t = 0.9)]
    p: f64,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    texture: f64,
    /// Also write this many prompt variants per map.
    #[arg(long, default_value_t = 0)]
    variants: usize,
    #[arg(long, default_value_t = 1)]
    extent_jitter: usize,
    #[arg(long, default_value_t = 0.02)]
    mass_jitter: f64,
    /// Also write Q/K/V tensors with this head dimension.
    #[arg(long)]
    qkv: Option<usize>,
    #[arg(long, short, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args, Clone)]
struct SearchOpts {
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = TileShape::default())]
    tile: TileShape,
    #[arg(long, default_value_t = crate::attention::DEFAULT_BLOCK_SIZE)]
    block_size: usize,
    /// Start distances of the frame groups.
    #[arg(long, default_value_t = GroupBoundaries::default())]
    groups: GroupBoundaries,
    #[arg(long, default_value_t = DEFAULT_STEP_REUSE)]
    step_reuse: usize,
    #[arg(long, default_value_t = DEFAULT_FULL_PREFIX)]
    full_prefix: usize,
    #[arg(long, default_value_t = SearchFamily::default())]
    family: SearchFamily,
}

impl SearchOpts {
    fn params(&self) -> SearchParams {
        SearchParams {
            tau: self.tau,
            lambda: self.lambda,
            tile: self.tile,
            block_size: self.block_size,
            group_boundaries: self.groups.clone(),
            step_reuse_n: self.step_reuse,
            full_prefix: self.full_prefix,
            family: self.family,
        }
    }
}

fn describe(p: &SearchParams) -> String {
    format!(
        "tau={} lambda={} tile={} block_size={} groups={} step_reuse_n={} full_prefix={} family={}",
        p.tau, p.lambda, p.tile, p.block_size, p.group_boundaries, p.step_reuse_n, p.full_prefix, p.family
    )
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// Probability maps (`*.probs.catn`, raster order).
    maps: Vec<PathBuf>,
    #[arg(long)]
    grid: Option<VideoGrid>,
    #[command(flatten)]
    opts: SearchOpts,
    /// Union the configs searched on every map.
    #[arg(long)]
    merge: bool,
    /// Comma-separated tau values; writes `tau,sparsity` CSV.
    #[arg(long, value_delimiter = ',')]
    sweep_tau: Vec<f64>,
    /// Directory of `l{layer}_h{head}_s{step}.probs.catn` dumps; emits a schedule.
    #[arg(long, conflicts_with_all = ["maps", "merge", "sweep_tau"])]
    dumps: Option<PathBuf>,
    /// Number of denoising steps for a schedule (default: last dumped step + 1).
    #[arg(long, requires = "dumps")]
    steps: Option<usize>,
    /// Write search traces as JSON.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Output file for the config, schedule or CSV (default: stdout).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AttendArgs {
    #[arg(long)]
    q: PathBuf,
    #[arg(long)]
    k: PathBuf,
    #[arg(long)]
    v: PathBuf,
    /// Head config; required for --sparse.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dense: bool,
    #[arg(long)]
    sparse: bool,
    /// Output tensor (the sparse result when both paths run).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RasterizeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = TokenOrder::Tiled)]
    order: TokenOrder,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Probability maps (`*.probs.catn`, raster order).
    #[arg(required = true)]
    maps: Vec<PathBuf>,
    #[arg(long)]
    grid: Option<VideoGrid>,
    /// Head config to score; without it each map is scored on its own searched config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    opts: SearchOpts,
    /// Token orders to compare top-k block fractions under, e.g. `raster,tiled`.
    #[arg(long, value_delimiter = ',')]
    compare: Vec<TokenOrder>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

/// Parses `args` and runs the command, mapping errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Error::InvalidParameter {
                field: "jobs",
                reason: "must be >= 1".into(),
            });
        }
        // A pool may already exist when run is called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(a, cli.seed),
        Command::Search(a) => cmd_search(a),
        Command::Attend(a) => cmd_attend(a),
        Command::Rasterize(a) => cmd_rasterize(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            std::io::stdout().flush().map_err(|e| Error::io("<stdout>", e))
        }
    }
}

#[derive(Serialize)]
struct ManifestEntry {
    name: String,
    file: String,
    spec: SyntheticHeadSpec,
}

#[derive(Serialize)]
struct Manifest {
    grid: String,
    seed: u64,
    maps: Vec<ManifestEntry>,
    qkv: Option<[String; 3]>,
}

fn synth_specs(a: &SynthArgs, seed: u64) -> Result<Vec<(String, SyntheticHeadSpec)>> {
    if let Some(path) = &a.spec {
        let spec: SyntheticHeadSpec = io::load_json(path)?;
        let name = path
            .file_stem()
            .map_or("spec".into(), |s| s.to_string_lossy().into_owned());
        return Ok(vec![(name, spec)]);
    }
    let g = a.grid;
    let temporal = match a.temporal {
        Temporal::Invariant => TemporalKind::Invariant,
        Temporal::Decay => TemporalKind::Decay { rate: a.rate },
        Temporal::Band => TemporalKind::Band {
            center: a.band_center,
            width: a.band_width,
        },
    };
    let spatial = match a.pattern {
        Pattern::Battery => {
            return Ok(battery(&g, seed)
                .into_iter()
                .map(|(n, s)| {
                    let s = SyntheticHeadSpec {
                        p: a.p,
                        noise_floor: a.noise,
                        texture: a.texture,
                        ..s
                    };
                    (n.to_string(), s)
                })
                .collect())
        }
        Pattern::Local => SpatialKind::Local {
            window: SpatialWindow::new(a.omega.unwrap_or(2), a.eta.unwrap_or(2)),
        },
        Pattern::Cross => SpatialKind::Cross {
            w1: SpatialWindow::new(a.omega.unwrap_or(g.w - 1), a.eta.unwrap_or(1)),
            w2: SpatialWindow::new(a.omega2.unwrap_or(1), a.eta2.unwrap_or(g.h - 1)),
        },
        Pattern::Global => SpatialKind::Global,
    };
    let name = format!("{:?}", a.pattern).to_lowercase();
    let spec = SyntheticHeadSpec {
        spatial,
        temporal,
        p: a.p,
        noise_floor: a.noise,
        texture: a.texture,
        seed,
    };
    Ok(vec![(name, spec)])
}

fn cmd_synth(a: SynthArgs, seed: u64) -> Result<()> {
    let specs = synth_specs(&a, seed)?;
    println!(
        "grid={} seed={} pattern={:?} maps={} variants={} extent_jitter={} mass_jitter={} out={}",
        a.grid,
        seed,
        a.pattern,
        specs.len(),
        a.variants,
        a.extent_jitter,
        a.mass_jitter,
        a.out.display()
    );
    let mut all = Vec::new();
    for (name, spec) in specs {
        let perturbation = Perturbation {
            extent_jitter: a.extent_jitter,
            mass_jitter: a.mass_jitter,
        };
        for i in 0..a.variants {
            let v = gen_prompt_variant(&spec, perturbation, seed.wrapping_add(1000 + i as u64))?
                .clamped_to(&a.grid);
            all.push((format!("{name}.v{i}"), v));
        }
        all.insert(all.len() - a.variants, (name, spec));
    }
    // Generate everything before touching the filesystem so bad specs
    // leave no partial output.
    let maps = all
        .iter()
        .map(|(_, s)| gen_probmap(s, &a.grid))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut entries = Vec::new();
    for ((name, spec), map) in all.into_iter().zip(maps) {
        let file = format!("{name}.probs.catn");
        io::write_tensor(a.out.join(&file), map.probs())?;
        println!("wrote {file}");
        entries.push(ManifestEntry { name, file, spec });
    }
    let qkv = match a.qkv {
        Some(d) => {
            let inputs = gen_qkv(&a.grid, d, seed)?;
            let names = ["qkv.q.catn", "qkv.k.catn", "qkv.v.catn"].map(String::from);
            for (n, m) in names.iter().zip([inputs.q(), inputs.k(), inputs.v()]) {
                io::write_tensor(a.out.join(n), m)?;
                println!("wrote {n}");
            }
            Some(names)
        }
        None => None,
    };
    io::save_json(
        a.out.join("manifest.json"),
        &Manifest {
            grid: a.grid.to_string(),
            seed,
            maps: entries,
            qkv,
        },
    )
}

fn need_grid(grid: Option<VideoGrid>) -> Result<VideoGrid> {
    grid.ok_or_else(|| Error::InvalidParameter {
        field: "grid",
        reason: "--grid is required to interpret probability maps".into(),
    })
}

fn load_map(path: &Path, grid: &VideoGrid) -> Result<AttentionProbMap> {
    AttentionProbMap::new(io::read_tensor(path)?, *grid, raster_order(grid))
}

/// `(layer, head, step)` from `l{layer}_h{head}_s{step}.probs.catn`.
fn parse_dump_name(name: &str) -> Option<(usize, usize, usize)> {
    let stem = name.strip_suffix(".probs.catn")?;
    let mut parts = stem.split('_');
    let mut field = |prefix: char| parts.next()?.strip_prefix(prefix)?.parse().ok();
    let key = (field('l')?, field('h')?, field('s')?);
    parts.next().is_none().then_some(key)
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn cmd_search(a: SearchArgs) -> Result<()> {
    let params = a.opts.params();
    params.validate()?;
    println!("{}", describe(&params));

    if let Some(dir) = &a.dumps {
        let grid = need_grid(a.grid)?;
        let mut dumps = BTreeMap::new();
        let listing = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in listing {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if let Some(key) = parse_dump_name(&file_label(&path)) {
                dumps.insert(key, load_map(&path, &grid)?);
            }
        }
        let steps = a
            .steps
            .unwrap_or_else(|| dumps.keys().map(|k| k.2 + 1).max().unwrap_or(0));
        let schedule = schedule_search(&dumps, &params, 0..steps)?;
        println!(
            "heads={} steps={} ranges_per_head={}",
            schedule.entries().len(),
            steps,
            schedule.entries().values().next().map_or(0, Vec::len)
        );
        let doc = ConfigFile::Schedule(ScheduleDocument {
            grid,
            tile: params.tile,
            block_size: params.block_size,
            schedule,
        });
        return emit(a.out.as_deref(), &(io::config_to_json(&doc) + "\n"));
    }

    if a.maps.is_empty() {
        return Err(Error::InvalidParameter {
            field: "maps",
            reason: "give at least one map or --dumps".into(),
        });
    }
    let grid = need_grid(a.grid)?;
    let maps = a
        .maps
        .iter()
        .map(|p| load_map(p, &grid))
        .collect::<Result<Vec<_>>>()?;

    if !a.sweep_tau.is_empty() {
        let rows = tau_sweep(&maps, &params, &a.sweep_tau)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::InvariantViolation(format!("csv: {e}"));
        w.write_record(["tau", "sparsity"]).map_err(csv_err)?;
        for (tau, s) in rows {
            w.write_record([tau.to_string(), s.to_string()]).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvariantViolation(e.to_string()))?;
        return emit(a.out.as_deref(), &String::from_utf8_lossy(&bytes));
    }

    if maps.len() > 1 && !a.merge {
        return Err(Error::InvalidParameter {
            field: "merge",
            reason: "several maps need --merge to produce one config".into(),
        });
    }
    let mut configs = Vec::new();
    let mut traces = Vec::new();
    for (path, map) in a.maps.iter().zip(&maps) {
        let (config, trace) = shrink_search(map, &params)?;
        let r = evaluate_config(&config, std::slice::from_ref(map), &params)?;
        println!(
            "map={} recall={} sparsity={} flop_proxy={} moves={} termination={:?}",
            file_label(path),
            r.mean_recall,
            r.sparsity,
            r.flop_proxy,
            trace.steps.len(),
            trace.termination
        );
        configs.push(config);
        traces.push(trace);
    }
    let config = merge_prompts(&configs)?;
    if a.merge {
        let r = evaluate_config(&config, &maps, &params)?;
        println!(
            "merged recall={:?} sparsity={} flop_proxy={}",
            r.recall, r.sparsity, r.flop_proxy
        );
    }
    if let Some(p) = &a.trace {
        io::save_json(p, &traces)?;
    }
    let doc = ConfigFile::Head(ConfigDocument {
        grid,
        tile: params.tile,
        block_size: params.block_size,
        config,
    });
    emit(a.out.as_deref(), &(io::config_to_json(&doc) + "\n"))
}

fn cmd_attend(a: AttendArgs) -> Result<()> {
    let (run_dense, run_sparse) = match (a.dense, a.sparse) {
        (false, false) => (true, false),
        flags => flags,
    };
    let doc = a.config.as_ref().map(io::load_head_config).transpose()?;
    println!(
        "q={} k={} v={} config={} dense={run_dense} sparse={run_sparse}",
        a.q.display(),
        a.k.display(),
        a.v.display(),
        a.config.as_ref().map_or("-".into(), |p| p.display().to_string())
    );
    let inputs = AttentionInputs::new(
        io::read_tensor(&a.q)?,
        io::read_tensor(&a.k)?,
        io::read_tensor(&a.v)?,
    )?;
    let dense = run_dense.then(|| dense_attention(&inputs)).transpose()?;
    let sparse = if run_sparse {
        let doc = doc.ok_or_else(|| Error::InvalidParameter {
            field: "config",
            reason: "--sparse needs --config".into(),
        })?;
        if doc.grid.tokens() != inputs.len() {
            return Err(Error::ShapeMismatch(format!(
                "config grid {} has {} tokens, inputs have {}",
                doc.grid,
                doc.grid.tokens(),
                inputs.len()
            )));
        }
        let perm = tile_order(&doc.grid, &doc.tile)?;
        let mask = rasterize(&doc.config, &doc.grid, &perm, doc.block_size)?;
        let tiled = AttentionInputs::new(
            inputs.q().permute_rows(&perm)?,
            inputs.k().permute_rows(&perm)?,
            inputs.v().permute_rows(&perm)?,
        )?;
        let out = block_sparse_attention(&tiled, &mask)?.permute_rows(&perm.clone().inverted())?;
        println!("sparsity={} flop_proxy={}", sparsity(&mask), flop_proxy(&mask));
        Some(out)
    } else {
        None
    };
    if let (Some(d), Some(s)) = (&dense, &sparse) {
        println!("max_abs_diff={}", d.max_abs_diff(s)?);
    }
    if let Some(p) = &a.out {
        io::write_tensor(p, sparse.as_ref().or(dense.as_ref()).expect("one path ran"))?;
    }
    Ok(())
}

fn cmd_rasterize(a: RasterizeArgs) -> Result<()> {
    let doc = io::load_head_config(&a.config)?;
    println!(
        "config={} grid={} tile={} block_size={} order={:?}",
        a.config.display(),
        doc.grid,
        doc.tile,
        doc.block_size,
        a.order
    );
    let perm = a.order.permutation(&doc.grid, &doc.tile)?;
    let mask = rasterize(&doc.config, &doc.grid, &perm, doc.block_size)?;
    println!(
        "blocks={} allowed={} sparsity={} flop_proxy={}",
        mask.total_blocks(),
        mask.count_allowed(),
        sparsity(&mask),
        flop_proxy(&mask)
    );
    if let Some(p) = &a.out {
        io::write_mask(p, &mask)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ReportRow {
    file: String,
    layer: usize,
    head: usize,
    recall: f64,
    sparsity: f64,
    jaccard: f64,
    spatial: String,
    temporal: String,
    #[serde(rename = "topk@0.95")]
    topk: f64,
    #[serde(rename = "topk@0.95_raster", skip_serializing_if = "Option::is_none")]
    topk_raster: Option<f64>,
    #[serde(rename = "topk@0.95_tiled", skip_serializing_if = "Option::is_none")]
    topk_tiled: Option<f64>,
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let params = a.opts.params();
    params.validate()?;
    let grid = need_grid(a.grid)?;
    println!("{} grid={grid} compare={:?}", describe(&params), a.compare);
    let fixed = a.config.as_ref().map(io::load_head_config).transpose()?;
    let perm = params.permutation(&grid)?;
    let fixed_mask = fixed
        .as_ref()
        .map(|d| rasterize(&d.config, &grid, &perm, params.block_size))
        .transpose()?;

    let mut rows = Vec::new();
    let mut searched_masks = Vec::new();
    for (i, path) in a.maps.iter().enumerate() {
        let label = file_label(path);
        let (layer, head) = parse_dump_name(&label).map_or((0, i), |(l, h, _)| (l, h));
        let map = load_map(path, &grid)?;
        let tiled = map.reordered(&perm)?;
        let (own, _) = shrink_search(&map, &params)?;
        let own_mask = rasterize(&own, &grid, &perm, params.block_size)?;
        let mask = fixed_mask.clone().unwrap_or_else(|| own_mask.clone());
        let topk_in = |order: TokenOrder| -> Result<f64> {
            let m = map.reordered(&order.permutation(&grid, &params.tile)?)?;
            topk_block_fraction(&m, params.block_size, TOPK_TARGET)
        };
        let compare = |o: TokenOrder| -> Result<Option<f64>> {
            a.compare.contains(&o).then(|| topk_in(o)).transpose()
        };
        rows.push(ReportRow {
            file: label,
            layer,
            head,
            recall: recall(&tiled, &mask)?,
            sparsity: sparsity(&mask),
            jaccard: jaccard(&mask, &own_mask)?,
            spatial: classify_spatial(&map, EXTENT_MASS).to_string(),
            temporal: classify_temporal(&map)
                .map_or_else(|_| "SingleFrame".to_string(), |t| t.to_string()),
            topk: topk_block_fraction(&tiled, params.block_size, TOPK_TARGET)?,
            topk_raster: compare(TokenOrder::Raster)?,
            topk_tiled: compare(TokenOrder::Tiled)?,
        });
        searched_masks.push(own_mask);
    }

    let text = match a.format {
        Format::Json => serde_json::to_string_pretty(&rows).expect("rows serialise") + "\n",
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &rows {
                w.serialize(r).map_err(|e| Error::InvariantViolation(format!("csv: {e}")))?;
            }
            let bytes = w.into_inner().map_err(|e| Error::InvariantViolation(e.to_string()))?;
            String::from_utf8_lossy(&bytes).into_owned()
        }
    };
    emit(a.out.as_deref(), &text)?;
    if searched_masks.len() > 1 {
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..searched_masks.len() {
            for j in i + 1..searched_masks.len() {
                sum += jaccard(&searched_masks[i], &searched_masks[j])?;
                pairs += 1;
            }
        }
        eprintln!("pairwise_mean_jaccard={}", sum / pairs as f64);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn dump_names() {
        assert_eq!(parse_dump_name("l3_h12_s40.probs.catn"), Some((3, 12, 40)));
        assert_eq!(parse_dump_name("l3_h12.probs.catn"), None);
        assert_eq!(parse_dump_name("l3_h12_s4_x.probs.catn"), None);
        assert_eq!(parse_dump_name("l3_h12_s4.q.catn"), None);
    }

    #[test]
    fn default_parameters_line() {
        let line = describe(&SearchParams::default());
        assert!(line.starts_with("tau=0.9 lambda=0.011 "), "{line}");
        assert!(line.contains("groups=0,1,3,7"));
    }
}
