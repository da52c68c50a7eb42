//! Request handling shared by the command line and the HTTP service.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use xinr::data::VolumeGrid;
use xinr::explorer::{correlation_field, pick_reference, predict_field, up_field};
use xinr::field::domain::SPATIAL_AXIS_NAMES;
use xinr::field::{ArchConfig, DomainSpec};
use xinr::inverter::{search_with_progress, Candidate, SearchMode, SearchOptions, SearchOutcome, TargetDistribution};
use xinr::paf::{propagate_spans, NoiseSymbolRegistry, PafMode};
use xinr::range_stats::AxisSpan;
use xinr::region::{AxisQuery, BoxSpec, QueryRegion};
use xinr::ExplorableModel;

use crate::error::ApiError;

/// Slice and correlation resolution per axis when a request gives none.
pub const DEFAULT_RES: usize = 32;
/// Largest accepted slice resolution.
pub const MAX_RES: usize = 256;

/// Physical parameter values, in domain order or by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValues {
    List(Vec<f64>),
    Named(BTreeMap<String, f64>),
}

impl ParamValues {
    pub fn resolve(&self, domain: &DomainSpec) -> Result<Vec<f64>, ApiError> {
        match self {
            ParamValues::List(v) => {
                if v.len() != domain.n_params() {
                    return Err(ApiError::bad_request(
                        format!("expected {} parameters, got {}", domain.n_params(), v.len()),
                        Some("params"),
                    ));
                }
                Ok(v.clone())
            }
            ParamValues::Named(m) => {
                let mut out = vec![f64::NAN; domain.n_params()];
                for (name, &v) in m {
                    let i = domain
                        .param_index(name)
                        .ok_or_else(|| ApiError::bad_request(format!("unknown parameter `{name}`"), Some(name)))?;
                    out[i] = v;
                }
                if let Some(i) = out.iter().position(|v| v.is_nan()) {
                    let name = &domain.params[i].name;
                    return Err(ApiError::bad_request(format!("missing parameter `{name}`"), Some(name)));
                }
                Ok(out)
            }
        }
    }
}

/// Parameter box from either a full box object `{param: {...}}` or the bare
/// per-parameter mapping.
pub fn parse_param_box(v: &Value, domain: &DomainSpec) -> Result<Vec<AxisQuery>, ApiError> {
    let full = match v.as_object() {
        Some(o) if o.contains_key("param") || o.contains_key("spatial") => v.clone(),
        Some(_) => serde_json::json!({ "param": v }),
        None => return Err(ApiError::bad_request("param_box must be an object".into(), Some("param_box"))),
    };
    Ok(BoxSpec::from_json(&full, domain)?.params)
}

fn normalized_spans(model: &ExplorableModel, x: [f64; 3], params: Vec<AxisQuery>) -> Result<Vec<AxisSpan>, ApiError> {
    Ok(QueryRegion::at(x, params).spans(&model.domain)?)
}

fn point_of(spans: &[AxisSpan]) -> Option<Vec<f64>> {
    spans
        .iter()
        .map(|s| match *s {
            AxisSpan::Point(v) => Some(v),
            AxisSpan::Range(..) => None,
        })
        .collect()
}

/// Physical output at a normalized point.
fn value_at(model: &ExplorableModel, u: &[f64]) -> Result<f64, ApiError> {
    let v = model.forward([u[0], u[1], u[2]], &u[3..])?;
    Ok(model.domain.denormalize_value(v))
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelInfo {
    pub arch: ArchConfig,
    pub domain: DomainSpec,
    pub value_range: [f64; 2],
    pub parameter_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DataInfo>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DataInfo {
    pub dims: [usize; 3],
    pub train: usize,
    pub test: usize,
}

pub fn model_info(model: &ExplorableModel, data: Option<DataInfo>) -> ModelInfo {
    ModelInfo {
        arch: model.arch.clone(),
        domain: model.domain.clone(),
        value_range: [model.domain.value_min, model.domain.value_max],
        parameter_count: model.parameter_count(),
        data,
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointRequest {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub params: ParamValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointResponse {
    pub value: f64,
}

pub fn query_point(model: &ExplorableModel, req: &PointRequest) -> Result<PointResponse, ApiError> {
    let p = req.params.resolve(&model.domain)?;
    let spans = normalized_spans(model, [req.x, req.y, req.z], p.into_iter().map(AxisQuery::Point).collect())?;
    let u = point_of(&spans).expect("point query");
    Ok(PointResponse { value: value_at(model, &u)? })
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistRequest {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub param_box: Value,
    /// Monte-Carlo draws to report alongside the propagated summary.
    pub n: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: PafMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistResponse {
    pub mu: f64,
    pub sigma: f64,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc: Option<McSummary>,
}

pub fn query_dist(model: &ExplorableModel, req: &DistRequest) -> Result<DistResponse, ApiError> {
    let params = parse_param_box(&req.param_box, &model.domain)?;
    let spans = normalized_spans(model, [req.x, req.y, req.z], params)?;
    let d = &model.domain;
    let start = Instant::now();
    let (mu, sigma) = match point_of(&spans) {
        Some(u) => (value_at(model, &u)?, 0.0),
        None => {
            let (s, _) = propagate_spans(model, &spans, &NoiseSymbolRegistry::new(), req.mode)?;
            (d.denormalize_value(s.mu), s.sigma * d.value_span())
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    let mc = req.n.map(|n| monte_carlo(model, &spans, n, req.seed)).transpose()?;
    Ok(DistResponse { mu, sigma, seconds, mc })
}

fn monte_carlo(model: &ExplorableModel, spans: &[AxisSpan], n: usize, seed: u64) -> Result<McSummary, ApiError> {
    if n < 2 {
        return Err(ApiError::bad_request(format!("n must be at least 2, got {n}"), Some("n")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = vec![0.0; spans.len()];
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 0..n {
        for (v, s) in u.iter_mut().zip(spans) {
            *v = match *s {
                AxisSpan::Point(c) => c,
                AxisSpan::Range(lo, hi) => rng.random_range(lo..hi),
            };
        }
        let y = value_at(model, &u)?;
        let delta = y - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (y - mean);
    }
    Ok(McSummary { mean, std: (m2 / (n - 1) as f64).sqrt(), n })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceStat {
    Value,
    Mean,
    Std,
    Corr,
}

/// Correlation reference: voxel indices on the request grid, or `"auto"`
/// for the voxel with the largest propagated mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RefSpec {
    Voxel([usize; 3]),
    Keyword(String),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceRequest {
    pub axis: String,
    pub index: Option<usize>,
    /// Physical coordinate; the slice is the voxel layer containing it.
    pub coord: Option<f64>,
    /// Voxels per axis of the grid the slice is taken from.
    pub res: Option<usize>,
    pub params: Option<ParamValues>,
    pub param_box: Option<Value>,
    pub stat: SliceStat,
    #[serde(rename = "ref")]
    pub reference: Option<RefSpec>,
    #[serde(default)]
    pub mode: PafMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceResponse {
    pub axis: String,
    pub index: usize,
    /// Physical coordinate of the slice's voxel centers.
    pub coord: f64,
    /// `[rows, cols]`; rows follow the later remaining axis.
    pub shape: [usize; 2],
    pub values: Vec<Vec<f64>>,
    pub min: f64,
    pub max: f64,
    #[serde(rename = "ref", skip_serializing_if = "Option::is_none")]
    pub reference: Option<[usize; 3]>,
}

fn slice_axis(name: &str) -> Result<usize, ApiError> {
    SPATIAL_AXIS_NAMES
        .iter()
        .position(|n| *n == name)
        .ok_or_else(|| ApiError::bad_request(format!("unknown slice axis `{name}` (x|y|z)"), Some("axis")))
}

fn slice_index(model: &ExplorableModel, req: &SliceRequest, axis: usize, res: usize) -> Result<usize, ApiError> {
    let name = SPATIAL_AXIS_NAMES[axis];
    match (req.index, req.coord) {
        (Some(i), None) if i < res => Ok(i),
        (Some(i), None) => Err(ApiError::bad_request(format!("index {i} outside 0..{res}"), Some(name))),
        (None, Some(c)) => {
            let b = model.domain.spatial[axis];
            if !(c >= b.min && c <= b.max) {
                return Err(ApiError::bad_request(format!("coord {c} outside [{}, {}]", b.min, b.max), Some(name)));
            }
            Ok((((c - b.min) / b.width() * res as f64).floor() as usize).min(res - 1))
        }
        _ => Err(ApiError::bad_request("give exactly one of `index` and `coord`".into(), Some("index"))),
    }
}

fn extract_slice(vol: &VolumeGrid, axis: usize, index: usize) -> Vec<Vec<f64>> {
    let [a, b] = match axis {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    };
    let d = vol.dims;
    (0..d[b])
        .map(|r| {
            (0..d[a])
                .map(|c| {
                    let mut idx = [0; 3];
                    idx[axis] = index;
                    idx[a] = c;
                    idx[b] = r;
                    vol.get(idx[0], idx[1], idx[2]) as f64
                })
                .collect()
        })
        .collect()
}

pub fn field_slice(model: &ExplorableModel, req: &SliceRequest) -> Result<SliceResponse, ApiError> {
    let axis = slice_axis(&req.axis)?;
    let res = req.res.unwrap_or(DEFAULT_RES);
    if !(1..=MAX_RES).contains(&res) {
        return Err(ApiError::bad_request(format!("res must lie in 1..={MAX_RES}, got {res}"), Some("res")));
    }
    let index = slice_index(model, req, axis, res)?;
    let dims = [res; 3];
    let param_box = || -> Result<Vec<AxisQuery>, ApiError> {
        match &req.param_box {
            Some(v) => parse_param_box(v, &model.domain),
            None => Err(ApiError::bad_request(format!("stat `{:?}` needs `param_box`", req.stat).to_lowercase(), Some("param_box"))),
        }
    };
    let mut reference = None;
    let vol = match req.stat {
        SliceStat::Value => {
            let p = match &req.params {
                Some(p) => p.resolve(&model.domain)?,
                None => return Err(ApiError::bad_request("stat `value` needs `params`".into(), Some("params"))),
            };
            BoxSpec { params: p.iter().map(|&v| AxisQuery::Point(v)).collect(), spatial: None }.validate(&model.domain)?;
            predict_field(model, &p, dims)?
        }
        SliceStat::Mean => up_field(model, &param_box()?, dims, req.mode)?.mean,
        SliceStat::Std => up_field(model, &param_box()?, dims, req.mode)?.std,
        SliceStat::Corr => {
            let params = param_box()?;
            let r = match &req.reference {
                Some(RefSpec::Voxel(v)) => {
                    if let Some(a) = (0..3).find(|&a| v[a] >= res) {
                        return Err(ApiError::bad_request(
                            format!("reference {v:?} outside 0..{res}"),
                            Some(SPATIAL_AXIS_NAMES[a]),
                        ));
                    }
                    *v
                }
                Some(RefSpec::Keyword(k)) if k == "auto" => pick_reference(&up_field(model, &params, dims, req.mode)?.mean),
                None => pick_reference(&up_field(model, &params, dims, req.mode)?.mean),
                Some(RefSpec::Keyword(k)) => {
                    return Err(ApiError::bad_request(format!("ref must be [i, j, k] or \"auto\", got `{k}`"), Some("ref")))
                }
            };
            reference = Some(r);
            correlation_field(model, &params, r, dims, req.mode)?
        }
    };
    let values = extract_slice(&vol, axis, index);
    let (min, max) = values
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let b = model.domain.spatial[axis];
    let coord = b.denormalize(DomainSpec::voxel_center(index, res));
    Ok(SliceResponse {
        axis: req.axis.clone(),
        index,
        coord,
        shape: [values.len(), values.first().map_or(0, |r| r.len())],
        values,
        min,
        max,
        reference,
    })
}

/// Search request; `seeds` is the number of random restarts and `options`
/// overrides any remaining search setting.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    pub target: TargetDistribution,
    #[serde(default)]
    pub mode: Option<SearchMode>,
    pub iters: Option<usize>,
    pub seeds: Option<usize>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub options: Option<SearchOptions>,
}

impl SearchRequest {
    pub fn options(&self) -> SearchOptions {
        let mut o = self.options.clone().unwrap_or_default();
        if let Some(m) = self.mode {
            o.mode = m;
        }
        if let Some(i) = self.iters {
            o.max_iterations = i;
        }
        if let Some(s) = self.seeds {
            o.restarts = s;
        }
        if let Some(s) = self.seed {
            o.seed = s;
        }
        o
    }
}

pub fn run_search(
    model: &ExplorableModel,
    req: &SearchRequest,
    progress: impl Fn(usize, &[Candidate], &Candidate) + Sync,
) -> Result<SearchOutcome, ApiError> {
    let opts = req.options();
    if opts.restarts == 0 {
        return Err(ApiError::bad_request("seeds must be at least 1".into(), Some("seeds")));
    }
    Ok(search_with_progress(model, &req.target, &opts, progress)?)
}

/// One request of a batch, tagged by its endpoint.
#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "endpoint", content = "body", rename_all = "snake_case")]
pub enum Query {
    Info,
    Point(PointRequest),
    Dist(DistRequest),
    Slice(SliceRequest),
    Search(SearchRequest),
}

/// Answers one request as the JSON the HTTP endpoint returns.
pub fn answer(model: &ExplorableModel, q: &Query) -> Result<Value, ApiError> {
    let v = match q {
        Query::Info => serde_json::to_value(model_info(model, None)),
        Query::Point(r) => serde_json::to_value(query_point(model, r)?),
        Query::Dist(r) => serde_json::to_value(query_dist(model, r)?),
        Query::Slice(r) => serde_json::to_value(field_slice(model, r)?),
        Query::Search(r) => serde_json::to_value(run_search(model, r, |_, _, _| {})?),
    };
    Ok(v.expect("serializable response"))
}
