//! Executable workflow templates and their structural checks.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::expr::{Condition, Literal};
use crate::ParseError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndState {
    Completed,
    Terminated,
    Expired,
}

impl EndState {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "completed" => Some(EndState::Completed),
            "terminated" => Some(EndState::Terminated),
            "expired" => Some(EndState::Expired),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum FieldType {
    String,
    Boolean,
    Enum { options: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FormField {
    pub name: String,
    #[serde(flatten)]
    pub field_type: FieldType,
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "trigger", rename_all = "lowercase")]
pub enum StartTrigger {
    None,
    Message {
        #[serde(rename = "topicPattern")]
        topic_pattern: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "trigger", rename_all = "lowercase", rename_all_fields = "camelCase")]
pub enum CatchTrigger {
    Timer {
        duration_ms: u64,
    },
    Message {
        topic_pattern: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        correlation_variable: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ServiceSpec {
    pub http_method: String,
    pub url_template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_template: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_variable: Option<String>,
    /// Dot path into the JSON response selecting the stored value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all_fields = "camelCase")]
pub enum NodeKind {
    StartEvent {
        #[serde(flatten)]
        trigger: StartTrigger,
    },
    EndEvent {
        state: EndState,
    },
    UserTask {
        form_fields: Vec<FormField>,
        candidate_group: String,
    },
    ServiceTask(ServiceSpec),
    ExclusiveGateway {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        default: Option<String>,
    },
    IntermediateCatchEvent {
        #[serde(flatten)]
        trigger: CatchTrigger,
        /// Set for boundary events: the node whose wait this event interrupts.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        attached_to: Option<String>,
    },
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::StartEvent { .. } => "StartEvent",
            NodeKind::EndEvent { .. } => "EndEvent",
            NodeKind::UserTask { .. } => "UserTask",
            NodeKind::ServiceTask(_) => "ServiceTask",
            NodeKind::ExclusiveGateway { .. } => "ExclusiveGateway",
            NodeKind::IntermediateCatchEvent { .. } => "IntermediateCatchEvent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Node {
    pub node_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(flatten)]
    pub kind: NodeKind,
}

impl Node {
    pub fn attached_to(&self) -> Option<&str> {
        match &self.kind {
            NodeKind::IntermediateCatchEvent { attached_to, .. } => attached_to.as_deref(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SequenceFlow {
    pub flow_id: String,
    pub source: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<Condition>,
    /// Overrides the end state of the target end event when this flow is taken.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_state: Option<EndState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WorkflowTemplate {
    pub process_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub nodes: Vec<Node>,
    pub flows: Vec<SequenceFlow>,
    pub version: u32,
}

/// Upper bound on assignments enumerated per gateway.
const MAX_ASSIGNMENTS: usize = 1 << 14;

impl WorkflowTemplate {
    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.node_id == id)
    }

    pub fn flow(&self, id: &str) -> Option<&SequenceFlow> {
        self.flows.iter().find(|f| f.flow_id == id)
    }

    pub fn start(&self) -> &Node {
        self.nodes
            .iter()
            .find(|n| matches!(n.kind, NodeKind::StartEvent { .. }))
            .expect("validated templates have a start event")
    }

    pub fn outgoing<'a>(&'a self, node_id: &'a str) -> impl Iterator<Item = &'a SequenceFlow> + 'a {
        self.flows.iter().filter(move |f| f.source == node_id)
    }

    pub fn boundary_events<'a>(&'a self, node_id: &'a str) -> impl Iterator<Item = &'a Node> + 'a {
        self.nodes.iter().filter(move |n| n.attached_to() == Some(node_id))
    }

    /// Checks every structural invariant of an executable template.
    pub fn validate(&self) -> Result<(), ParseError> {
        let graph = |reason: String| Err(ParseError::GraphInvalid(reason));
        let mut ids = BTreeSet::new();
        for id in self
            .nodes
            .iter()
            .map(|n| &n.node_id)
            .chain(self.flows.iter().map(|f| &f.flow_id))
        {
            if !ids.insert(id.as_str()) {
                return graph(format!("duplicate id {id}"));
            }
        }
        let starts: Vec<_> = self
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::StartEvent { .. }))
            .collect();
        if starts.len() != 1 {
            return graph(format!("expected exactly one start event, found {}", starts.len()));
        }
        if !self.nodes.iter().any(|n| matches!(n.kind, NodeKind::EndEvent { .. })) {
            return graph("no end event".into());
        }
        for f in &self.flows {
            for end in [&f.source, &f.target] {
                if self.node(end).is_none() {
                    return graph(format!("flow {} references unknown node {end}", f.flow_id));
                }
            }
            if f.target == starts[0].node_id {
                return graph(format!("flow {} enters the start event", f.flow_id));
            }
        }
        for n in &self.nodes {
            self.validate_node(n)?;
        }
        let reachable = self.reachable();
        let unreachable: Vec<_> = self
            .nodes
            .iter()
            .filter(|n| !reachable.contains(n.node_id.as_str()))
            .map(|n| n.node_id.as_str())
            .collect();
        if !unreachable.is_empty() {
            return graph(format!("unreachable from start: {}", unreachable.join(", ")));
        }
        Ok(())
    }

    fn validate_node(&self, n: &Node) -> Result<(), ParseError> {
        let id = &n.node_id;
        let out: Vec<_> = self.outgoing(id).collect();
        let graph = |reason: String| Err(ParseError::GraphInvalid(reason));
        match &n.kind {
            NodeKind::EndEvent { .. } => {
                if !out.is_empty() {
                    return graph(format!("end event {id} has outgoing flows"));
                }
            }
            NodeKind::ExclusiveGateway { default } => {
                if out.is_empty() {
                    return graph(format!("{id} has no outgoing flow"));
                }
                if let Some(d) = default {
                    match out.iter().find(|f| &f.flow_id == d) {
                        None => return graph(format!("default flow {d} does not leave {id}")),
                        Some(f) if f.condition.is_some() => {
                            return graph(format!("default flow {d} of {id} carries a condition"))
                        }
                        _ => {}
                    }
                }
                for f in &out {
                    if f.condition.is_none() && default.as_deref() != Some(f.flow_id.as_str()) {
                        return graph(format!("flow {} leaves gateway {id} without a condition", f.flow_id));
                    }
                }
                self.check_exclusive(id, &out)?;
            }
            _ => {
                if out.is_empty() {
                    return graph(format!("{id} has no outgoing flow"));
                }
                if out.len() > 1 {
                    return graph(format!("{id} branches without a gateway"));
                }
                if let Some(f) = out.iter().find(|f| f.condition.is_some()) {
                    return graph(format!("flow {} has a condition but does not leave a gateway", f.flow_id));
                }
            }
        }
        if let Some(target) = n.attached_to() {
            match self.node(target).map(|t| &t.kind) {
                Some(NodeKind::UserTask { .. }) | Some(NodeKind::IntermediateCatchEvent { attached_to: None, .. }) => {}
                _ => return graph(format!("boundary event {id} is attached to {target}, which never waits")),
            }
        }
        Ok(())
    }

    fn reachable(&self) -> BTreeSet<&str> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([self.start().node_id.as_str()]);
        while let Some(id) = queue.pop_front() {
            if !seen.insert(id) {
                continue;
            }
            queue.extend(self.outgoing(id).map(|f| f.target.as_str()));
            queue.extend(self.boundary_events(id).map(|n| n.node_id.as_str()));
        }
        seen
    }

    /// Candidate values for `var`: the form's enumerated domain when known,
    /// otherwise every literal compared against plus one value equal to
    /// none of them. `None` stands for "unset".
    fn domain(&self, var: &str, literals: &[&Literal]) -> Vec<Option<Value>> {
        let declared = self.nodes.iter().find_map(|n| match &n.kind {
            NodeKind::UserTask { form_fields, .. } => form_fields.iter().find(|f| f.name == var),
            _ => None,
        });
        let mut values: Vec<Option<Value>> = match declared.map(|f| &f.field_type) {
            Some(FieldType::Boolean) => vec![Some(Value::Bool(true)), Some(Value::Bool(false))],
            Some(FieldType::Enum { options }) => options.iter().map(|o| Some(Value::String(o.clone()))).collect(),
            _ => {
                let mut v: Vec<_> = literals.iter().map(|l| Some(l.to_value())).collect();
                v.push(Some(Value::String("\u{0}other".into())));
                v.push(Some(Value::Bool(true)));
                v.push(Some(Value::Bool(false)));
                v
            }
        };
        if !declared.is_some_and(|f| f.required) {
            values.push(None);
        }
        values.dedup();
        values
    }

    fn check_exclusive(&self, gateway: &str, out: &[&SequenceFlow]) -> Result<(), ParseError> {
        let conds: Vec<(&str, &Condition)> = out
            .iter()
            .filter_map(|f| f.condition.as_ref().map(|c| (f.flow_id.as_str(), c)))
            .collect();
        let mut literals: BTreeMap<&str, Vec<&Literal>> = BTreeMap::new();
        for (_, c) in &conds {
            let entry = literals.entry(c.variable()).or_default();
            if let Condition::Compare { literal, .. } = c {
                entry.push(literal);
            }
        }
        let domains: Vec<(&str, Vec<Option<Value>>)> =
            literals.iter().map(|(v, lits)| (*v, self.domain(v, lits))).collect();
        let total = domains.iter().map(|(_, d)| d.len()).product::<usize>();
        if total > MAX_ASSIGNMENTS {
            return Err(ParseError::GraphInvalid(format!(
                "gateway {gateway}: too many variable combinations to check exclusivity"
            )));
        }
        for mut i in 0..total {
            let mut vars = serde_json::Map::new();
            for (name, domain) in &domains {
                if let Some(v) = &domain[i % domain.len()] {
                    vars.insert(name.to_string(), v.clone());
                }
                i /= domain.len();
            }
            let taken: Vec<&str> = conds
                .iter()
                .filter(|(_, c)| c.evaluate(&vars).result)
                .map(|(id, _)| *id)
                .collect();
            if taken.len() > 1 {
                return Err(ParseError::GraphInvalid(format!(
                    "gateway {gateway}: flows {} can be taken together for {}",
                    taken.join(" and "),
                    Value::Object(vars)
                )));
            }
        }
        Ok(())
    }
}
