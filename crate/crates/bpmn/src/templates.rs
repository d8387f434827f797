//! Workflow templates shipped with the federation.

pub const CLONE_APPROVAL: &str = include_str!("../templates/clone-approval.bpmn");
pub const SERVICE_REQUEST: &str = include_str!("../templates/service-request.bpmn");
pub const SERVICE_RECEIPT: &str = include_str!("../templates/service-receipt.bpmn");

/// (file name, XML) of every bundled template.
pub fn bundled() -> [(&'static str, &'static str); 3] {
    [
        ("clone-approval.bpmn", CLONE_APPROVAL),
        ("service-request.bpmn", SERVICE_REQUEST),
        ("service-receipt.bpmn", SERVICE_RECEIPT),
    ]
}
