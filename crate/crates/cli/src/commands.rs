//! Subcommands of the `xinr` binary.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use xinr::data::{save_volume, AnalyticFamily, EnsembleDataset, Split, VolumeGrid};
use xinr::explorer::{correlation_field, pick_reference, predict_field, spl_field, time_up_vs_spl, up_field};
use xinr::field::{checkpoint, ArchConfig};
use xinr::inverter::{SearchMode, SearchOptions, TargetDistribution};
use xinr::paf::PafMode;
use xinr::region::{AxisQuery, BoxSpec};
use xinr::trainer::{evaluate_members, TrainConfig, Trainer};
use xinr::ExplorableModel;

use crate::engine::{self, DataInfo, Query, SearchRequest};
use crate::error::ApiError;
use crate::service::{self, AppState};

#[derive(Debug, Parser)]
#[command(name = "xinr", version, about = "Explorable surrogate models for ensemble simulations")]
pub struct Cli {
    /// Worker threads; all cores when omitted.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize an ensemble from an analytic family.
    GenData(GenData),
    /// Train a model on an ensemble directory.
    Train(Train),
    /// Predict a volume at one parameter vector.
    Predict(Predict),
    /// Propagated mean and standard-deviation volumes over a parameter box.
    Stats(Stats),
    /// Sampled mean and standard-deviation volumes with timing.
    Baseline(Baseline),
    /// Propagated correlation volume against a reference point.
    Corr(Corr),
    /// Search for boxes whose distribution matches a target.
    Search(Search),
    /// Score a model against an ensemble split.
    Eval(Eval),
    /// Answer a JSON array of endpoint requests, as the HTTP service would.
    Query(QueryCmd),
    /// Run the HTTP service.
    Serve(Serve),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Condensed,
    Exact,
}

impl From<ModeArg> for PafMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Condensed => PafMode::Condensed,
            ModeArg::Exact => PafMode::Exact,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SearchModeArg {
    Joint,
    Param,
    Spatial,
}

impl From<SearchModeArg> for SearchMode {
    fn from(m: SearchModeArg) -> Self {
        match m {
            SearchModeArg::Joint => SearchMode::Joint,
            SearchModeArg::Param => SearchMode::Param,
            SearchModeArg::Spatial => SearchMode::Spatial,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenData {
    /// Family JSON file, or `desk` for the built-in two-parameter family.
    #[arg(long)]
    pub family: String,
    #[arg(long, default_value_t = 32)]
    pub dims: usize,
    #[arg(long, default_value_t = 40)]
    pub train: usize,
    #[arg(long, default_value_t = 10)]
    pub test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Train {
    #[arg(long)]
    pub data: PathBuf,
    /// Architecture JSON file, or `desk` for the compact configuration.
    #[arg(long, default_value = "desk")]
    pub arch: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seeds both initialization and batch sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training configuration JSON; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// History file; `history.jsonl` next to the checkpoint by default.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Predict {
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated physical parameter values in domain order.
    #[arg(long)]
    pub params: String,
    #[arg(long, default_value_t = 64)]
    pub dims: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Stats {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub param_box: PathBuf,
    #[arg(long)]
    pub out_prefix: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub dims: usize,
    #[arg(long, value_enum, default_value = "condensed")]
    pub mode: ModeArg,
}

#[derive(Debug, Args)]
pub struct Baseline {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub param_box: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub dims: usize,
    /// Write `<prefix>_mean` and `<prefix>_std` volumes.
    #[arg(long)]
    pub out_prefix: Option<PathBuf>,
    /// Alternate this many UP and SPL runs and report both medians.
    #[arg(long)]
    pub runs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Corr {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub param_box: PathBuf,
    /// Physical `x,y,z` of the reference, or `auto` for the largest mean.
    #[arg(long = "ref", default_value = "auto")]
    pub reference: String,
    #[arg(long, default_value_t = 64)]
    pub dims: usize,
    #[arg(long, value_enum, default_value = "condensed")]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Search {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, value_enum, default_value = "param")]
    pub mode: SearchModeArg,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 16)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Search options JSON; the flags above override its fields.
    #[arg(long)]
    pub options: Option<PathBuf>,
    /// Candidates file; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct QueryCmd {
    #[arg(long)]
    pub model: PathBuf,
    /// JSON array of `{endpoint, body}` requests; `-` reads stdin.
    #[arg(long)]
    pub requests: PathBuf,
}

#[derive(Debug, Args)]
pub struct Serve {
    /// Model to load; endpoints answer 409 without one.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Ensemble directory described by `/model/info`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

fn read_json(path: &Path) -> Result<Value, ApiError> {
    let mut text = String::new();
    if path == Path::new("-") {
        std::io::stdin().read_to_string(&mut text)?;
    } else {
        File::open(path)
            .map_err(|e| ApiError::new(1, "io", format!("{}: {e}", path.display())))?
            .read_to_string(&mut text)?;
    }
    Ok(serde_json::from_str(&text)?)
}

fn load_model(path: &Path) -> Result<ExplorableModel, ApiError> {
    Ok(checkpoint::load(path)?)
}

fn load_box(path: &Path, model: &ExplorableModel) -> Result<Vec<AxisQuery>, ApiError> {
    Ok(BoxSpec::from_json(&read_json(path)?, &model.domain)?.params)
}

fn print(v: &Value) -> Result<(), ApiError> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn save(grid: &VolumeGrid, path: &Path) -> Result<(), ApiError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(save_volume(grid, path)?)
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

fn parse_floats(s: &str, what: &str) -> Result<Vec<f64>, ApiError> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| ApiError::usage(format!("{what}: `{t}` is not a number"))))
        .collect()
}

fn cube(n: usize) -> Result<[usize; 3], ApiError> {
    if n == 0 {
        return Err(ApiError::usage("dims must be positive".into()));
    }
    Ok([n; 3])
}

fn gen_data(a: &GenData) -> Result<Value, ApiError> {
    let family = if a.family == "desk" {
        AnalyticFamily::desk()
    } else {
        serde_json::from_value(read_json(Path::new(&a.family))?)?
    };
    let data = EnsembleDataset::synthesize(&family, a.train, a.test, a.dims, a.seed)?;
    data.save(&a.out)?;
    let d = data.domain();
    Ok(json!({
        "out": a.out,
        "members": data.manifest.members.len(),
        "dims": data.manifest.dims,
        "value_range": [d.value_min, d.value_max],
    }))
}

fn train(a: &Train) -> Result<Value, ApiError> {
    let data = EnsembleDataset::load(&a.data)?;
    let m = data.domain().n_params();
    let arch = if a.arch == "desk" {
        ArchConfig::desk(m)
    } else {
        let mut v = read_json(Path::new(&a.arch))?;
        if let Some(o) = v.as_object_mut() {
            if !o.contains_key("n_params_m") && !o.contains_key("n_params") {
                o.insert("n_params_m".into(), json!(m));
            }
        }
        serde_json::from_value(v)?
    };
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => serde_json::from_value(read_json(p)?)?,
        None => TrainConfig { cosine: true, ..Default::default() },
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.seed = a.seed;
    let mut model = ExplorableModel::new(arch, data.domain().clone(), a.seed)?;
    let history_path = a.history.clone().unwrap_or_else(|| a.out.with_file_name("history.jsonl"));
    let mut sink = BufWriter::new(File::create(&history_path)?);
    let history = {
        let mut t = Trainer::new(cfg);
        t.history_sink = Some(&mut sink);
        t.train(&mut model, &data)?
    };
    sink.flush()?;
    checkpoint::save(&model, &a.out)?;
    let last = history.last();
    Ok(json!({
        "out": a.out,
        "history": history_path,
        "epochs": history.len(),
        "train_mse": last.map(|r| r.train_mse),
        "val_mse": last.and_then(|r| r.val_mse),
        "seconds": last.map(|r| r.seconds),
    }))
}

fn predict(a: &Predict) -> Result<Value, ApiError> {
    let model = load_model(&a.model)?;
    let p = parse_floats(&a.params, "params")?;
    BoxSpec { params: p.iter().map(|&v| AxisQuery::Point(v)).collect(), spatial: None }.validate(&model.domain)?;
    let vol = predict_field(&model, &p, cube(a.dims)?)?;
    save(&vol, &a.out)?;
    let (lo, hi) = vol.min_max();
    Ok(json!({ "out": a.out, "dims": vol.dims, "min": lo, "max": hi }))
}

fn stats(a: &Stats) -> Result<Value, ApiError> {
    let model = load_model(&a.model)?;
    let params = load_box(&a.param_box, &model)?;
    let f = up_field(&model, &params, cube(a.dims)?, a.mode.into())?;
    let (mp, sp) = (suffixed(&a.out_prefix, "_mean"), suffixed(&a.out_prefix, "_std"));
    save(&f.mean, &mp)?;
    save(&f.std, &sp)?;
    Ok(json!({ "method": "up", "dims": f.mean.dims, "seconds": f.seconds, "mean": mp, "std": sp }))
}

fn baseline(a: &Baseline) -> Result<Value, ApiError> {
    let model = load_model(&a.model)?;
    let params = load_box(&a.param_box, &model)?;
    let dims = cube(a.dims)?;
    if let Some(runs) = a.runs {
        return Ok(serde_json::to_value(time_up_vs_spl(&model, &params, dims, a.n, runs, a.seed)?)?);
    }
    let f = spl_field(&model, &params, a.n, dims, a.seed)?;
    if let Some(prefix) = &a.out_prefix {
        save(&f.mean, &suffixed(prefix, "_mean"))?;
        save(&f.std, &suffixed(prefix, "_std"))?;
    }
    Ok(json!({ "method": "spl", "n": a.n, "dims": dims, "seconds": f.seconds }))
}

fn corr(a: &Corr) -> Result<Value, ApiError> {
    let model = load_model(&a.model)?;
    let params = load_box(&a.param_box, &model)?;
    let dims = cube(a.dims)?;
    let mode: PafMode = a.mode.into();
    let reference = if a.reference == "auto" {
        pick_reference(&up_field(&model, &params, dims, mode)?.mean)
    } else {
        let x = parse_floats(&a.reference, "ref")?;
        if x.len() != 3 {
            return Err(ApiError::usage(format!("ref needs three coordinates, got {}", x.len())));
        }
        let mut idx = [0; 3];
        for k in 0..3 {
            let b = model.domain.spatial[k];
            if !b.contains(x[k]) {
                let mut e = ApiError::bad_request(format!("ref {} outside [{}, {}]", x[k], b.min, b.max), None);
                e.axis = Some(["x", "y", "z"][k].into());
                return Err(e);
            }
            idx[k] = (((x[k] - b.min) / b.width() * dims[k] as f64).floor() as usize).min(dims[k] - 1);
        }
        idx
    };
    let vol = correlation_field(&model, &params, reference, dims, mode)?;
    save(&vol, &a.out)?;
    Ok(json!({ "out": a.out, "dims": dims, "ref": reference }))
}

fn search(a: &Search) -> Result<Value, ApiError> {
    let model = load_model(&a.model)?;
    let target: TargetDistribution = serde_json::from_value(read_json(&a.target)?)?;
    let options: Option<SearchOptions> = a.options.as_deref().map(read_json).transpose()?.map(serde_json::from_value).transpose()?;
    let req = SearchRequest {
        target,
        mode: Some(a.mode.into()),
        iters: Some(a.iters),
        seeds: Some(a.restarts),
        seed: Some(a.seed),
        options,
    };
    let out = serde_json::to_value(engine::run_search(&model, &req, |_, _, _| {})?)?;
    match &a.out {
        Some(p) => {
            serde_json::to_writer_pretty(BufWriter::new(File::create(p)?), &out)?;
            Ok(json!({
                "out": p,
                "candidates": out["candidates"].as_array().map_or(0, |c| c.len()),
                "seconds": out["seconds"],
            }))
        }
        None => Ok(out),
    }
}

fn eval(a: &Eval) -> Result<Option<Value>, ApiError> {
    let model = load_model(&a.model)?;
    let data = EnsembleDataset::load(&a.data)?;
    let split: Split = a.split.parse()?;
    let report = evaluate_members(&model, &data, &data.indices(split))?;
    match a.format {
        Format::Json => Ok(Some(serde_json::to_value(report)?)),
        Format::Csv => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "member,psnr,md")?;
            for r in &report.members {
                writeln!(out, "{},{},{}", r.name, r.psnr, r.md)?;
            }
            writeln!(out, "pooled,{},{}", report.psnr, report.md)?;
            Ok(None)
        }
    }
}

fn query(a: &QueryCmd) -> Result<Value, ApiError> {
    let model = load_model(&a.model)?;
    let reqs: Vec<Value> = serde_json::from_value(read_json(&a.requests)?)?;
    let answers: Vec<Value> = reqs
        .into_iter()
        .map(|r| {
            let res = serde_json::from_value::<Query>(r).map_err(ApiError::from).and_then(|q| engine::answer(&model, &q));
            res.unwrap_or_else(|e| serde_json::to_value(e).expect("serializable error"))
        })
        .collect();
    Ok(Value::Array(answers))
}

fn serve(a: &Serve) -> Result<(), ApiError> {
    let model = a.model.as_deref().map(load_model).transpose()?;
    let data = match &a.data {
        Some(dir) => {
            let d = EnsembleDataset::load(dir)?;
            Some(DataInfo {
                dims: d.manifest.dims,
                train: d.indices(Split::Train).len(),
                test: d.indices(Split::Test).len(),
            })
        }
        None => None,
    };
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| ApiError::usage(format!("bad listen address: {e}")))?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(service::serve(AppState::new(model, data), addr))?;
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<(), ApiError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ApiError::new(1, "config", e.to_string()))?;
    }
    let out = match &cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => train(a)?,
        Command::Predict(a) => predict(a)?,
        Command::Stats(a) => stats(a)?,
        Command::Baseline(a) => baseline(a)?,
        Command::Corr(a) => corr(a)?,
        Command::Search(a) => search(a)?,
        Command::Eval(a) => match eval(a)? {
            Some(v) => v,
            None => return Ok(()),
        },
        Command::Query(a) => query(a)?,
        Command::Serve(a) => return serve(a),
    };
    print(&out)
}
