//! Reference fitness server.
//!
//! Wire protocol: `POST /fitness` with a JSON [`FitnessQuery`]; success is
//! status 200 with `{"request_id", "loss", "n_examples"}`, failure is status
//! 400 with `{"error", "detail"}`. Losses are written with 17 significant
//! digits.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde_json::json;
use tiny_http::{Header, Method, Response, Server};
use tracing::{debug, info};

use super::{evaluate_local, FitnessQuery, OracleError};
use crate::synth::SynthWorld;

const CACHE_LIMIT: usize = 100_000;

#[derive(Debug, thiserror::Error)]
#[error("cannot bind {addr}: {reason}")]
pub struct BindError {
    pub addr: String,
    pub reason: String,
}

/// Formats a success body. Kept by hand so the loss carries exactly 17
/// significant digits.
pub fn success_body(request_id: &str, loss: f64, n_examples: usize) -> String {
    format!(
        "{{\"request_id\":{},\"loss\":{:.16e},\"n_examples\":{}}}",
        serde_json::Value::String(request_id.to_string()),
        loss,
        n_examples
    )
}

pub fn error_body(code: &str, detail: &str) -> String {
    json!({ "error": code, "detail": detail }).to_string()
}

/// Request handling without the transport: body in, `(status, body)` out.
#[derive(Debug)]
pub struct FitnessService {
    world: Arc<SynthWorld>,
    cache: Mutex<HashMap<String, String>>,
}

impl FitnessService {
    pub fn new(world: Arc<SynthWorld>) -> Self {
        Self { world, cache: Mutex::new(HashMap::new()) }
    }

    pub fn handle(&self, body: &str) -> (u16, String) {
        if let Some(hit) = self.cache.lock().expect("cache lock").get(body) {
            return (200, hit.clone());
        }
        let query: FitnessQuery = match serde_json::from_str(body) {
            Ok(q) => q,
            Err(e) => return (400, error_body("parse_error", &e.to_string())),
        };
        match evaluate_local(&self.world, &query) {
            Ok(reply) => {
                let out = success_body(&reply.request_id, reply.loss, reply.n_examples);
                let mut cache = self.cache.lock().expect("cache lock");
                if cache.len() >= CACHE_LIMIT {
                    cache.clear();
                }
                cache.insert(body.to_string(), out.clone());
                (200, out)
            }
            Err(e @ (OracleError::DimMismatch(_) | OracleError::BadStage(_) | OracleError::Parse(_))) => {
                (400, error_body(e.wire_code(), &e.to_string()))
            }
            Err(e) => (400, error_body("parse_error", &e.to_string())),
        }
    }
}

/// A running server. Dropping the handle does not stop it; call
/// [`ServerHandle::shutdown`].
pub struct ServerHandle {
    addr: SocketAddr,
    server: Arc<Server>,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(self) {
        self.stop.store(true, Ordering::SeqCst);
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers {
            let _ = w.join();
        }
        info!(addr = %self.addr, "fitness server stopped");
    }
}

fn json_header() -> Header {
    Header::from_bytes("Content-Type", "application/json").expect("static header")
}

fn respond(request: tiny_http::Request, status: u16, body: String) {
    let response = Response::from_string(body).with_status_code(status).with_header(json_header());
    if let Err(e) = request.respond(response) {
        debug!("client went away: {e}");
    }
}

fn worker(server: Arc<Server>, service: Arc<FitnessService>, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::SeqCst) {
        let mut request = match server.recv() {
            Ok(r) => r,
            Err(_) => break,
        };
        if stop.load(Ordering::SeqCst) {
            respond(request, 503, error_body("shutting_down", "server is stopping"));
            break;
        }
        let path = request.url().split('?').next().unwrap_or("").to_string();
        if path != "/fitness" {
            respond(request, 404, error_body("not_found", &format!("no route {path}")));
            continue;
        }
        if *request.method() != Method::Post {
            respond(request, 405, error_body("method_not_allowed", "use POST"));
            continue;
        }
        let mut body = String::new();
        if let Err(e) = request.as_reader().read_to_string(&mut body) {
            respond(request, 400, error_body("parse_error", &format!("unreadable body: {e}")));
            continue;
        }
        let (status, out) = service.handle(&body);
        respond(request, status, out);
    }
}

/// Binds `bind_address` and answers the wire protocol on `threads` workers
/// until shut down.
pub fn serve(world: Arc<SynthWorld>, bind_address: &str, threads: usize) -> Result<ServerHandle, BindError> {
    let server =
        Server::http(bind_address).map_err(|e| BindError { addr: bind_address.to_string(), reason: e.to_string() })?;
    let addr = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| BindError { addr: bind_address.to_string(), reason: "not an IP listener".into() })?;
    let server = Arc::new(server);
    let service = Arc::new(FitnessService::new(world));
    let stop = Arc::new(AtomicBool::new(false));
    let workers = (0..threads.max(1))
        .map(|_| {
            let (server, service, stop) = (server.clone(), service.clone(), stop.clone());
            std::thread::spawn(move || worker(server, service, stop))
        })
        .collect();
    info!(%addr, "fitness server listening");
    Ok(ServerHandle { addr, server, stop, workers })
}
