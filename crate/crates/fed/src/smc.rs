//! The service-request collection and the submodel validators that can be
//! attached to a repository by name.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use aasfed_core::model::{Submodel, SubmodelElement, ValueType};
use aasfed_core::repository::SubmodelValidator;

pub const STATUS: &str = "status";
pub const SERVICE_TYPES: [&str; 4] = ["inspection", "repair", "replacement", "calibration"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RequestStatus {
    Draft,
    Submitted,
    Acknowledged,
    Expired,
}

impl RequestStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RequestStatus::Draft => "draft",
            RequestStatus::Submitted => "submitted",
            RequestStatus::Acknowledged => "acknowledged",
            RequestStatus::Expired => "expired",
        }
    }

    pub fn can_become(self, next: RequestStatus) -> bool {
        use RequestStatus::*;
        self == next || matches!((self, next), (Draft, Submitted) | (Submitted, Acknowledged) | (Submitted, Expired))
    }
}

impl fmt::Display for RequestStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RequestStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "draft" => RequestStatus::Draft,
            "submitted" => RequestStatus::Submitted,
            "acknowledged" => RequestStatus::Acknowledged,
            "expired" => RequestStatus::Expired,
            other => return Err(format!("unknown status {other:?}")),
        })
    }
}

/// A request for service, stored as a collection inside a submodel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceRequestSmc {
    pub id_short: String,
    pub requester_org: String,
    pub contact: String,
    pub fault_description: String,
    pub requested_service_type: String,
    pub status: RequestStatus,
    pub on_site_contact: String,
    pub attachments: Vec<SubmodelElement>,
}

fn text(id_short: &str, value: &str) -> SubmodelElement {
    SubmodelElement::property(id_short, ValueType::String, value)
}

impl ServiceRequestSmc {
    pub fn draft(id_short: &str, requester_org: &str, fault_description: &str, service_type: &str) -> Self {
        ServiceRequestSmc {
            id_short: id_short.into(),
            requester_org: requester_org.into(),
            contact: String::new(),
            fault_description: fault_description.into(),
            requested_service_type: service_type.into(),
            status: RequestStatus::Draft,
            on_site_contact: String::new(),
            attachments: Vec::new(),
        }
    }

    pub fn to_element(&self) -> SubmodelElement {
        SubmodelElement::collection(
            &self.id_short,
            vec![
                text("requesterOrg", &self.requester_org),
                text("contact", &self.contact),
                text("faultDescription", &self.fault_description),
                SubmodelElement::collection("attachments", self.attachments.clone()),
                text("requestedServiceType", &self.requested_service_type),
                text(STATUS, self.status.as_str()),
                text("onSiteContact", &self.on_site_contact),
            ],
        )
    }

    /// Recognizes a collection by its required children.
    pub fn from_element(element: &SubmodelElement) -> Option<Result<Self, String>> {
        let SubmodelElement::Collection { id_short, elements } = element else {
            return None;
        };
        let child = |name: &str| elements.iter().find(|e| e.id_short() == name);
        let value = |name: &str| match child(name) {
            Some(SubmodelElement::Property { value, .. }) => Some(value.clone()),
            _ => None,
        };
        let (Some(status), Some(requester_org), Some(service_type)) =
            (value(STATUS), value("requesterOrg"), value("requestedServiceType"))
        else {
            return None;
        };
        let parsed = (|| {
            let status: RequestStatus = status.parse()?;
            if !SERVICE_TYPES.contains(&service_type.as_str()) {
                return Err(format!("unknown requestedServiceType {service_type:?}"));
            }
            let attachments = match child("attachments") {
                Some(SubmodelElement::Collection { elements, .. }) => {
                    if let Some(bad) = elements.iter().find(|e| !matches!(e, SubmodelElement::FileAttachment { .. })) {
                        return Err(format!("attachments.{} is not a file attachment", bad.id_short()));
                    }
                    elements.clone()
                }
                None => Vec::new(),
                Some(_) => return Err("attachments must be a collection".into()),
            };
            Ok(ServiceRequestSmc {
                id_short: id_short.clone(),
                requester_org,
                contact: value("contact").unwrap_or_default(),
                fault_description: value("faultDescription").unwrap_or_default(),
                requested_service_type: service_type,
                status,
                on_site_contact: value("onSiteContact").unwrap_or_default(),
                attachments,
            })
        })();
        Some(parsed)
    }
}

/// Every service-request collection in `submodel`, keyed by idShort path.
pub fn find_requests(submodel: &Submodel) -> BTreeMap<String, Result<ServiceRequestSmc, String>> {
    fn walk(elements: &[SubmodelElement], prefix: &str, out: &mut BTreeMap<String, Result<ServiceRequestSmc, String>>) {
        for e in elements {
            let path = if prefix.is_empty() {
                e.id_short().to_string()
            } else {
                format!("{prefix}.{}", e.id_short())
            };
            match ServiceRequestSmc::from_element(e) {
                Some(found) => {
                    out.insert(path, found);
                }
                None => {
                    if let SubmodelElement::Collection { elements, .. } = e {
                        walk(elements, &path, out);
                    }
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(&submodel.elements, "", &mut out);
    out
}

/// Enforces draft → submitted → {acknowledged, expired}.
pub struct ServiceRequestValidator;

impl SubmodelValidator for ServiceRequestValidator {
    fn name(&self) -> &str {
        "service-request-smc"
    }

    fn check(&self, old: Option<&Submodel>, new: &Submodel) -> Result<(), String> {
        let before = old.map(find_requests).unwrap_or_default();
        for (path, found) in find_requests(new) {
            let req = found.map_err(|e| format!("{path}: {e}"))?;
            let previous = before.get(&path).and_then(|r| r.as_ref().ok()).map(|r| r.status);
            match previous {
                Some(prev) if !prev.can_become(req.status) => {
                    return Err(format!("{path}: status {prev} cannot become {}", req.status));
                }
                None if req.status != RequestStatus::Draft && new.provenance.is_none() => {
                    return Err(format!("{path}: a new request must start as draft"));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

pub type ValidatorFactory = fn() -> Arc<dyn SubmodelValidator>;

/// Submodel validators selectable by name from the configuration.
pub struct ValidatorRegistry {
    factories: BTreeMap<&'static str, ValidatorFactory>,
}

impl Default for ValidatorRegistry {
    fn default() -> Self {
        let mut r = ValidatorRegistry {
            factories: BTreeMap::new(),
        };
        r.register("service-request-smc", || Arc::new(ServiceRequestValidator));
        r
    }
}

impl ValidatorRegistry {
    pub fn register(&mut self, name: &'static str, factory: ValidatorFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn create(&self, name: &str) -> Option<Arc<dyn SubmodelValidator>> {
        self.factories.get(name).map(|f| f())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use aasfed_core::model::Identifier;

    fn submodel(status: &str) -> Submodel {
        let mut sm = Submodel::new(Identifier::new("urn:sm:service").unwrap(), "Service");
        let mut req = ServiceRequestSmc::draft("req1", "org-oprime", "leak", "repair").to_element();
        if let SubmodelElement::Collection { elements, .. } = &mut req {
            *elements.iter_mut().find(|e| e.id_short() == STATUS).unwrap() = text(STATUS, status);
        }
        sm.elements.push(req);
        sm
    }

    #[test]
    fn transitions() {
        let v = ServiceRequestValidator;
        assert!(v.check(None, &submodel("draft")).is_ok());
        assert!(v.check(None, &submodel("submitted")).is_err());
        let order = ["draft", "submitted", "acknowledged", "expired"];
        let allowed = [
            ("draft", "draft"),
            ("draft", "submitted"),
            ("submitted", "submitted"),
            ("submitted", "acknowledged"),
            ("submitted", "expired"),
            ("acknowledged", "acknowledged"),
            ("expired", "expired"),
        ];
        for a in order {
            for b in order {
                let ok = v.check(Some(&submodel(a)), &submodel(b)).is_ok();
                assert_eq!(ok, allowed.contains(&(a, b)), "{a} -> {b}");
            }
        }
        assert!(v.check(None, &submodel("pending")).is_err());
    }

    #[test]
    fn round_trip() {
        let req = ServiceRequestSmc::draft("r", "org-a", "noise", "inspection");
        assert_eq!(ServiceRequestSmc::from_element(&req.to_element()), Some(Ok(req)));
        assert_eq!(ServiceRequestSmc::from_element(&text("x", "y")), None);
    }
}
