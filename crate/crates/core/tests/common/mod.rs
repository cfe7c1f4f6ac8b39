#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tabgen::evalharness::SweepDataset;
use tabgen::ingest::{read_csv, Dataset};
use tabgen::metadata::fallback_reformat;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn fixture(rel: &str) -> PathBuf {
    fixtures().join(rel)
}

pub fn read_fixture(rel: &str) -> String {
    std::fs::read_to_string(fixture(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

/// Seeded synthetic classification data: `n_numeric` noisy numeric
/// features shifted by class, one categorical feature correlated with the
/// class, and a text target `c0..c{k-1}` in the last column.
pub fn synthetic_csv(seed: u64, rows: usize, classes: usize, n_numeric: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut header: Vec<String> = (0..n_numeric).map(|i| format!("x_{i}")).collect();
    header.push("colour".into());
    header.push("label".into());
    let mut out = header.join(",") + "\n";
    let colours = ["red", "green", "blue", "grey"];
    for r in 0..rows {
        let c = if r < classes { r } else { rng.gen_range(0..classes) };
        let mut cells: Vec<String> = (0..n_numeric)
            .map(|i| {
                let shift = ((c + i) % classes) as f64 * 1.5;
                format!("{:.3}", shift + rng.gen_range(-1.0..1.0))
            })
            .collect();
        let colour = if rng.gen_bool(0.7) {
            colours[c % colours.len()]
        } else {
            colours[rng.gen_range(0..colours.len())]
        };
        cells.push(colour.to_owned());
        cells.push(format!("c{c}"));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn synthetic_dataset(id: &str, seed: u64, rows: usize, classes: usize, n_numeric: usize) -> Dataset {
    let text = synthetic_csv(seed, rows, classes, n_numeric);
    let mut d = read_csv(id, Path::new(id), text.as_bytes()).expect("synthetic csv parses");
    d.target_column = Some("label".into());
    d
}

/// Synthetic dataset with offline metadata, ready for sweeps.
pub fn synthetic_sweep_dataset(id: &str, seed: u64, rows: usize, classes: usize) -> SweepDataset {
    let dataset = synthetic_dataset(id, seed, rows, classes, 3);
    let metadata = fallback_reformat(&dataset).expect("fallback metadata");
    SweepDataset { dataset, metadata }
}

/// Turns a prompt listing as printed (triple-quoted, indented, with
/// literal `\n` escapes) into the template text.
pub fn template_from_listing(listing: &str) -> String {
    listing
        .lines()
        .map(str::trim)
        .filter(|l| *l != "\"\"\"" && !l.is_empty())
        .collect::<String>()
        .replace("\\n", "\n")
}

#[derive(Debug, Clone)]
pub struct SeenRequest {
    pub method: String,
    pub path: String,
    pub authorization: Option<String>,
    pub body: Value,
}

/// Minimal model server. `handler` gets (method, path, body) and returns
/// (status, body).
pub struct FakeServer {
    pub url: String,
    server: Arc<tiny_http::Server>,
    thread: Option<JoinHandle<()>>,
    seen: Arc<Mutex<Vec<SeenRequest>>>,
}

impl FakeServer {
    pub fn start<F>(handler: F) -> Self
    where
        F: Fn(&str, &str, &Value) -> (u16, Value) + Send + Sync + 'static,
    {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
        let url = format!("http://{}", server.server_addr().to_ip().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let (srv, log) = (server.clone(), seen.clone());
        let thread = std::thread::spawn(move || {
            for mut req in srv.incoming_requests() {
                let mut body = String::new();
                req.as_reader().read_to_string(&mut body).unwrap();
                let body: Value = if body.is_empty() { Value::Null } else { serde_json::from_str(&body).unwrap() };
                let seen = SeenRequest {
                    method: req.method().to_string(),
                    path: req.url().to_owned(),
                    authorization: req
                        .headers()
                        .iter()
                        .find(|h| h.field.equiv("Authorization"))
                        .map(|h| h.value.to_string()),
                    body,
                };
                let (status, reply) = handler(&seen.method, &seen.path, &seen.body);
                log.lock().unwrap().push(seen);
                let header = tiny_http::Header::from_bytes("Content-Type", "application/json").unwrap();
                let resp = tiny_http::Response::from_string(reply.to_string())
                    .with_status_code(status)
                    .with_header(header);
                let _ = req.respond(resp);
            }
        });
        FakeServer {
            url,
            server,
            thread: Some(thread),
            seen,
        }
    }

    pub fn requests(&self) -> Vec<SeenRequest> {
        self.seen.lock().unwrap().clone()
    }
}

impl Drop for FakeServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
