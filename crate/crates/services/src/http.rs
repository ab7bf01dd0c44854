//! Pieces shared by the three servers: JSON errors, header access and serving over TLS.

use std::net::{SocketAddr, TcpListener};
use std::time::{Duration, Instant};

use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::{Json, Router};
use axum_server::accept::NoDelayAcceptor;
use axum_server::tls_rustls::RustlsAcceptor;
use axum_server::Handle;
use tokio::task::JoinHandle;

use crate::tls::TlsIdentity;
use crate::wire::{ErrorBody, X_TIMING};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub error: String,
    pub detail: Option<String>,
}

impl ApiError {
    pub fn new(status: StatusCode, error: impl Into<String>) -> Self {
        ApiError {
            status,
            error: error.into(),
            detail: None,
        }
    }

    pub fn with_detail(mut self, detail: impl ToString) -> Self {
        self.detail = Some(detail.to_string());
        self
    }

    pub fn bad_request(error: &str) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, error)
    }

    pub fn unauthorized(error: &str) -> Self {
        ApiError::new(StatusCode::UNAUTHORIZED, error)
    }

    pub fn forbidden(error: &str) -> Self {
        ApiError::new(StatusCode::FORBIDDEN, error)
    }

    pub fn not_found(error: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, error)
    }

    pub fn internal(error: &str) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, error)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.error,
            detail: self.detail,
        };
        (self.status, Json(body)).into_response()
    }
}

pub fn header<'h>(headers: &'h HeaderMap, name: &str) -> Option<&'h str> {
    headers.get(name).and_then(|v| v.to_str().ok())
}

pub fn require_header<'h>(headers: &'h HeaderMap, name: &str, error: &str) -> Result<&'h str, ApiError> {
    header(headers, name).ok_or_else(|| ApiError::bad_request(error).with_detail(format!("missing header '{name}'")))
}

pub fn check_admin(headers: &HeaderMap, expected: &str) -> Result<(), ApiError> {
    match header(headers, crate::wire::X_ADMIN_TOKEN) {
        Some(t) if !expected.is_empty() && t == expected => Ok(()),
        _ => Err(ApiError::unauthorized("admin_credential_required")),
    }
}

/// Per-phase durations of one request, emitted as `x-timing: phase=micros;...`.
#[derive(Debug)]
pub struct Timings {
    started: Instant,
    phases: Vec<(&'static str, Duration)>,
    enabled: bool,
}

impl Timings {
    pub fn from_headers(headers: &HeaderMap) -> Self {
        Timings {
            started: Instant::now(),
            phases: Vec::new(),
            enabled: headers.contains_key(X_TIMING),
        }
    }

    pub fn record(&mut self, phase: &'static str, took: Duration) {
        if self.enabled {
            self.phases.push((phase, took));
        }
    }

    /// Runs `f`, recording its duration under `phase`.
    pub fn time<T>(&mut self, phase: &'static str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.record(phase, start.elapsed());
        out
    }

    pub fn attach(self, mut response: Response) -> Response {
        if self.enabled {
            let mut parts: Vec<String> = self
                .phases
                .iter()
                .map(|(p, d)| format!("{p}={}", d.as_micros()))
                .collect();
            parts.push(format!("total={}", self.started.elapsed().as_micros()));
            if let Ok(v) = HeaderValue::from_str(&parts.join(";")) {
                response.headers_mut().insert(X_TIMING, v);
            }
        }
        response
    }
}

/// Parses an `x-timing` header value into `(phase, microseconds)` pairs.
pub fn parse_timing(value: &str) -> Vec<(String, u64)> {
    value
        .split(';')
        .filter_map(|kv| {
            let (k, v) = kv.split_once('=')?;
            Some((k.trim().to_string(), v.trim().parse().ok()?))
        })
        .collect()
}

/// A running HTTPS server.
#[derive(Debug)]
pub struct RunningServer {
    pub addr: SocketAddr,
    handle: Handle,
    task: JoinHandle<std::io::Result<()>>,
}

impl RunningServer {
    pub fn url(&self) -> String {
        format!("https://{}", self.addr)
    }

    pub async fn shutdown(self) {
        self.handle.shutdown();
        let _ = self.task.await;
    }
}

/// Serves `router` over TLS on an already bound listener.
pub async fn serve(listener: TcpListener, tls: &TlsIdentity, router: Router) -> std::io::Result<RunningServer> {
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let config = tls.rustls_config().await?;
    let handle = Handle::new();
    let acceptor = RustlsAcceptor::new(config).acceptor(NoDelayAcceptor::new());
    let server = axum_server::from_tcp(listener).acceptor(acceptor).handle(handle.clone());
    let task = tokio::spawn(server.serve(router.into_make_service()));
    Ok(RunningServer { addr, handle, task })
}
