//! Fixtures shared by the command-line and HTTP tests.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::Arc;

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tower::ServiceExt;

use xinr::field::{ArchConfig, Bounds, DomainSpec, ParamAxis};
use xinr::ExplorableModel;
use xinr_cli::service::{router, AppState};

pub const BIN: &str = env!("CARGO_BIN_EXE_xinr");

/// Small two-parameter model with random features on a non-unit domain.
pub fn model(seed: u64) -> ExplorableModel {
    let arch = ArchConfig {
        spatial_grid_res: 4,
        plane_res: 6,
        line_res: 4,
        spatial_dim: 4,
        param_dim: 4,
        decoder_hidden: 8,
        decoder_layers: 2,
        n_params: 2,
        ..ArchConfig::default()
    };
    let domain = DomainSpec {
        spatial: [Bounds::new(0.0, 2.0), Bounds::new(-1.0, 1.0), Bounds::new(0.0, 1.0)],
        params: vec![
            ParamAxis { name: "shift".into(), min: -0.1, max: 0.1 },
            ParamAxis { name: "amp".into(), min: 0.6, max: 1.4 },
        ],
        value_min: 0.0,
        value_max: 2.0,
    };
    let mut m = ExplorableModel::new(arch, domain, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in m.features.structures_mut() {
        g.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    m
}

pub fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap()
}

/// One in-process request against the service router.
pub async fn call(state: Arc<AppState>, method: &str, path: &str, body: Option<&Value>) -> (u16, Value) {
    let req = Request::builder()
        .method(method)
        .uri(path)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = router(state).oneshot(req).await.unwrap();
    let status = resp.status().as_u16();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

/// Drops every `seconds` field, the only non-deterministic output.
pub fn strip_seconds(v: &mut Value) {
    match v {
        Value::Object(o) => {
            o.remove("seconds");
            o.values_mut().for_each(strip_seconds);
        }
        Value::Array(a) => a.iter_mut().for_each(strip_seconds),
        _ => {}
    }
}

pub fn run_cli(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

pub fn cli_json(args: &[&str]) -> Value {
    let (code, out, err) = run_cli(args);
    assert_eq!(code, 0, "xinr {args:?} failed: {err}");
    serde_json::from_str(&out).unwrap()
}

/// A `serve` process on an ephemeral port; killed on drop.
pub struct Server {
    pub child: Child,
    pub addr: SocketAddr,
}

impl Server {
    pub fn start(model: Option<&Path>) -> Self {
        let mut args = vec!["serve".to_string(), "--port".into(), "0".into()];
        if let Some(m) = model {
            args.extend(["--model".into(), m.display().to_string()]);
        }
        let mut child = Command::new(BIN).args(&args).stderr(Stdio::piped()).spawn().unwrap();
        let mut line = String::new();
        BufReader::new(child.stderr.as_mut().unwrap()).read_line(&mut line).unwrap();
        let v: Value = serde_json::from_str(&line).unwrap_or_else(|_| panic!("serve said {line}"));
        let addr = v["listening"].as_str().unwrap().parse().unwrap();
        Self { child, addr }
    }

    /// One HTTP/1.1 exchange over a fresh connection.
    pub fn request(&self, method: &str, path: &str, body: Option<&Value>) -> (u16, Value) {
        let mut s = TcpStream::connect(self.addr).unwrap();
        let payload = body.map(|b| b.to_string()).unwrap_or_default();
        write!(
            s,
            "{method} {path} HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
            self.addr,
            payload.len()
        )
        .unwrap();
        let mut raw = String::new();
        s.read_to_string(&mut raw).unwrap();
        let status: u16 = raw.split_whitespace().nth(1).unwrap().parse().unwrap();
        let (head, rest) = raw.split_once("\r\n\r\n").unwrap();
        let body = if head.to_ascii_lowercase().contains("transfer-encoding: chunked") { dechunk(rest) } else { rest.to_string() };
        (status, serde_json::from_str(&body).unwrap_or(Value::Null))
    }
}

fn dechunk(mut s: &str) -> String {
    let mut out = String::new();
    loop {
        let (size, rest) = s.split_once("\r\n").unwrap();
        let n = usize::from_str_radix(size.trim(), 16).unwrap();
        if n == 0 {
            return out;
        }
        out.push_str(&rest[..n]);
        s = &rest[n + 2..];
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
