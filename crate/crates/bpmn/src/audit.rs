use serde::{Deserialize, Serialize};
use serde_json::Value;

use aasfed_core::clock::Timestamp;

use crate::engine::Variables;
use crate::invoker::ServiceRequest;
use crate::template::EndState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case", rename_all_fields = "camelCase")]
pub enum AuditEvent {
    InstanceCreated {
        process_key: String,
        version: u32,
        variables: Variables,
    },
    NodeEntered {
        node_id: String,
    },
    NodeCompleted {
        node_id: String,
    },
    TaskAssigned {
        task_id: String,
        node_id: String,
        candidate_group: String,
    },
    TaskCompleted {
        task_id: String,
        user: String,
        values: Variables,
    },
    TaskCancelled {
        task_id: String,
    },
    FlowTaken {
        flow_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        condition_result: Option<bool>,
    },
    ConditionWarning {
        flow_id: String,
        message: String,
    },
    ServiceCall {
        node_id: String,
        request: ServiceRequest,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        response_code: Option<u16>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    TimerFired {
        node_id: String,
        due_at: Timestamp,
    },
    MessageReceived {
        node_id: String,
        topic: String,
        event_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        payload: Option<Value>,
    },
    InstanceEnded {
        state: EndState,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuditRecord {
    pub seq: u64,
    pub timestamp: Timestamp,
    pub instance_id: String,
    #[serde(flatten)]
    pub event: AuditEvent,
}
