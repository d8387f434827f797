//! HTTP listeners: an internal and an external one per organization.

use std::collections::BTreeMap;
use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;

use aasfed_bpmn::invoker::IDEMPOTENCY_HEADER;
use aasfed_core::repository::Role;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use tokio::net::TcpListener;
use tokio::sync::watch;

use crate::api::{Api, ApiRequest, Caller};
use crate::runtime::Runtime;

struct Listener {
    api: Arc<Api>,
    caller: Caller,
    tokens: BTreeMap<String, String>,
}

impl Listener {
    fn requires_token(&self) -> bool {
        self.caller.role == Role::Internal && !self.tokens.is_empty()
    }
}

fn unauthorized(message: &str) -> Response {
    (
        StatusCode::UNAUTHORIZED,
        [(header::CONTENT_TYPE, "application/json")],
        serde_json::json!({"error": "Unauthorized", "message": message}).to_string(),
    )
        .into_response()
}

async fn dispatch(
    State(listener): State<Arc<Listener>>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let mut caller = listener.caller.clone();
    let bearer = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    match bearer {
        Some(token) => match listener.tokens.get(token) {
            Some(user) => caller.user = Some(user.clone()),
            None if listener.caller.role == Role::Internal => return unauthorized("unknown bearer token"),
            None => {}
        },
        None if listener.requires_token() && uri.path() != "/healthz" => {
            return unauthorized("bearer token required");
        }
        None => {}
    }
    let path_and_query = uri.path_and_query().map(|p| p.as_str()).unwrap_or("/");
    let mut req = ApiRequest::new(caller, method.as_str(), path_and_query);
    req.body = body.to_vec();
    req.content_type = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    req.idempotency_key = headers
        .get(IDEMPOTENCY_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    let api = listener.api.clone();
    let resp = match tokio::task::spawn_blocking(move || api.handle(&req)).await {
        Ok(r) => r,
        Err(e) => {
            tracing::error!("request handler failed: {e}");
            return StatusCode::INTERNAL_SERVER_ERROR.into_response();
        }
    };
    let status = StatusCode::from_u16(resp.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    let content_type = resp.content_type().to_string();
    (status, [(header::CONTENT_TYPE, content_type)], resp.body_bytes()).into_response()
}

/// Bound but not yet serving.
pub struct Server {
    listeners: Vec<(Arc<Listener>, TcpListener)>,
}

impl Server {
    /// Binds every configured listen address.
    pub async fn bind(rt: &Runtime) -> std::io::Result<Server> {
        let mut listeners = Vec::new();
        for o in &rt.config().organizations {
            for (addr, caller) in [
                (&o.internal_listen, Caller::internal(&o.org_id)),
                (&o.external_listen, Caller::external(&o.org_id)),
            ] {
                let Some(addr) = addr else { continue };
                let tcp = TcpListener::bind(addr).await?;
                let listener = Listener {
                    api: rt.api().clone(),
                    caller,
                    tokens: o.tokens.clone(),
                };
                listeners.push((Arc::new(listener), tcp));
            }
        }
        Ok(Server { listeners })
    }

    pub fn addresses(&self) -> Vec<(Caller, SocketAddr)> {
        self.listeners
            .iter()
            .filter_map(|(l, tcp)| Some((l.caller.clone(), tcp.local_addr().ok()?)))
            .collect()
    }

    /// Serves until `shutdown` resolves.
    pub async fn run(self, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
        let (tx, rx) = watch::channel(false);
        let mut tasks = Vec::new();
        for (listener, tcp) in self.listeners {
            let addr = tcp.local_addr()?;
            tracing::info!(org = %listener.caller.org, role = %listener.caller.role, %addr, "listening");
            let app = Router::new().fallback(dispatch).with_state(listener);
            let mut rx = rx.clone();
            tasks.push(tokio::spawn(async move {
                axum::serve(tcp, app)
                    .with_graceful_shutdown(async move {
                        let _ = rx.wait_for(|stop| *stop).await;
                    })
                    .await
            }));
        }
        shutdown.await;
        let _ = tx.send(true);
        for t in tasks {
            t.await.map_err(std::io::Error::other)??;
        }
        Ok(())
    }
}
