//! How service tasks reach the outside world.

use std::collections::VecDeque;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub const IDEMPOTENCY_HEADER: &str = "Idempotency-Key";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ServiceRequest {
    pub method: String,
    pub url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<String>,
    pub idempotency_key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceResponse {
    pub status: u16,
    pub body: String,
}

impl ServiceResponse {
    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    /// Worth one more attempt with the same idempotency key.
    pub fn is_transient(&self) -> bool {
        self.status >= 500
    }
}

/// Transport failure; no response was received.
pub type InvokeError = String;

pub trait ServiceInvoker: Send + Sync {
    fn invoke(&self, request: &ServiceRequest) -> Result<ServiceResponse, InvokeError>;
}

impl<F> ServiceInvoker for F
where
    F: Fn(&ServiceRequest) -> Result<ServiceResponse, InvokeError> + Send + Sync,
{
    fn invoke(&self, request: &ServiceRequest) -> Result<ServiceResponse, InvokeError> {
        self(request)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedCall {
    pub request: ServiceRequest,
    pub outcome: Result<ServiceResponse, InvokeError>,
}

/// Passes calls through and keeps every request/outcome pair.
pub struct RecordingInvoker {
    inner: Arc<dyn ServiceInvoker>,
    calls: Mutex<Vec<RecordedCall>>,
}

impl RecordingInvoker {
    pub fn new(inner: Arc<dyn ServiceInvoker>) -> Self {
        RecordingInvoker {
            inner,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<RecordedCall> {
        self.calls.lock().clone()
    }
}

impl ServiceInvoker for RecordingInvoker {
    fn invoke(&self, request: &ServiceRequest) -> Result<ServiceResponse, InvokeError> {
        let outcome = self.inner.invoke(request);
        self.calls.lock().push(RecordedCall {
            request: request.clone(),
            outcome: outcome.clone(),
        });
        outcome
    }
}

/// Answers calls from a recording, in order; a request that differs from
/// the recorded one is a divergence and fails.
pub struct ReplayInvoker {
    calls: Mutex<VecDeque<RecordedCall>>,
}

impl ReplayInvoker {
    pub fn new(calls: Vec<RecordedCall>) -> Self {
        ReplayInvoker {
            calls: Mutex::new(calls.into()),
        }
    }

    pub fn remaining(&self) -> usize {
        self.calls.lock().len()
    }
}

impl ServiceInvoker for ReplayInvoker {
    fn invoke(&self, request: &ServiceRequest) -> Result<ServiceResponse, InvokeError> {
        let mut calls = self.calls.lock();
        match calls.pop_front() {
            Some(c) if &c.request == request => c.outcome,
            Some(c) => Err(format!("replay diverged: expected {:?}, got {:?}", c.request, request)),
            None => Err(format!("replay exhausted at {} {}", request.method, request.url)),
        }
    }
}

/// Always answers 200 with an empty JSON object.
pub struct NullInvoker;

impl ServiceInvoker for NullInvoker {
    fn invoke(&self, _request: &ServiceRequest) -> Result<ServiceResponse, InvokeError> {
        Ok(ServiceResponse {
            status: 200,
            body: "{}".into(),
        })
    }
}
