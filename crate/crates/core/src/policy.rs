//! ABAC evaluation at the authorization server.
//!
//! A rule matches a request when the client's subject attributes, the
//! requested object and the requested actions all fall within the rule.
//! Evaluation is permit-override: any matching `permit` rule grants, and the
//! granted permission sequence and context list come from that single rule.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::capability::{
    AttributeMap, ClientClaim, ContextRequirement, PermissionEntry, PermissionSequence, UnixSeconds,
};

pub const POLICY_TYPE: &str = "ABAC policy";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("malformed policy '{rule}': {reason}")]
    MalformedPolicy { rule: String, reason: String },
    #[error("ambiguous grant: rules {0:?} permit different sequences")]
    Ambiguous(Vec<String>),
    #[error("context '{0}' is not registered")]
    NotRegistered(String),
    #[error("context '{0}' is already registered")]
    DuplicateRegistration(String),
    #[error("no resource server known for application '{0}'")]
    UnknownApplication(String),
    #[error("policy store: {0}")]
    Store(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Authorization {
    Permit,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frequency {
    Daily,
    Weekly,
    /// Fixed 30-day window.
    Monthly,
}

impl Frequency {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "daily" => Some(Frequency::Daily),
            "weekly" => Some(Frequency::Weekly),
            "monthly" => Some(Frequency::Monthly),
            _ => None,
        }
    }

    pub fn window_secs(self) -> i64 {
        const DAY: i64 = 86_400;
        match self {
            Frequency::Daily => DAY,
            Frequency::Weekly => 7 * DAY,
            Frequency::Monthly => 30 * DAY,
        }
    }
}

/// One ABAC rule, stored in the JSON shape `{"type", "name", "application", "rules": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyDoc", into = "PolicyDoc")]
pub struct PolicyRule {
    pub name: String,
    pub application: String,
    pub subject_attributes: AttributeMap,
    pub object_attributes: AttributeMap,
    pub authorization: Authorization,
    /// `actions` list plus qualifiers such as `amount` and `frequency`.
    pub action_attributes: AttributeMap,
    pub environment_context: Vec<String>,
    pub default_decision: Authorization,
}

#[derive(Serialize, Deserialize)]
struct PolicyDoc {
    #[serde(rename = "type")]
    kind: String,
    name: String,
    application: String,
    rules: RulesDoc,
}

#[derive(Serialize, Deserialize)]
struct RulesDoc {
    #[serde(rename = "subjectAttribute")]
    subject: AttributeMap,
    #[serde(rename = "objectAttribute")]
    object: AttributeMap,
    authorization: Authorization,
    #[serde(rename = "actionAttribute")]
    action: AttributeMap,
    #[serde(rename = "environmentcontext", alias = "environmentContext", default)]
    environment: Vec<String>,
    #[serde(rename = "Default")]
    default: DefaultDoc,
}

#[derive(Serialize, Deserialize)]
struct DefaultDoc {
    authorization: Authorization,
}

impl TryFrom<PolicyDoc> for PolicyRule {
    type Error = PolicyError;

    fn try_from(doc: PolicyDoc) -> Result<Self, Self::Error> {
        if doc.kind != POLICY_TYPE {
            return Err(PolicyError::MalformedPolicy {
                rule: doc.name,
                reason: format!("type must be '{POLICY_TYPE}'"),
            });
        }
        let rule = PolicyRule {
            name: doc.name,
            application: doc.application,
            subject_attributes: doc.rules.subject,
            object_attributes: doc.rules.object,
            authorization: doc.rules.authorization,
            action_attributes: doc.rules.action,
            environment_context: doc.rules.environment,
            default_decision: doc.rules.default.authorization,
        };
        rule.validate()?;
        Ok(rule)
    }
}

impl From<PolicyRule> for PolicyDoc {
    fn from(rule: PolicyRule) -> Self {
        PolicyDoc {
            kind: POLICY_TYPE.to_string(),
            name: rule.name,
            application: rule.application,
            rules: RulesDoc {
                subject: rule.subject_attributes,
                object: rule.object_attributes,
                authorization: rule.authorization,
                action: rule.action_attributes,
                environment: rule.environment_context,
                default: DefaultDoc {
                    authorization: rule.default_decision,
                },
            },
        }
    }
}

/// Elements of an attribute value: arrays contribute their items, scalars themselves.
fn values(v: &Value) -> Vec<&Value> {
    match v {
        Value::Array(items) => items.iter().collect(),
        other => vec![other],
    }
}

/// Splits `perm@rs` into `(perm, Some(rs))`.
fn split_action(action: &str) -> (&str, Option<&str>) {
    match action.split_once('@') {
        Some((perm, rs)) => (perm, Some(rs)),
        None => (action, None),
    }
}

impl PolicyRule {
    fn malformed(&self, reason: impl Into<String>) -> PolicyError {
        PolicyError::MalformedPolicy {
            rule: self.name.clone(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.name.is_empty() || self.application.is_empty() {
            return Err(self.malformed("name and application must be non-empty"));
        }
        if self.default_decision != Authorization::Deny {
            return Err(self.malformed("Default authorization must be deny"));
        }
        let actions = self.actions();
        if self.authorization == Authorization::Permit && actions.is_empty() {
            return Err(self.malformed("a permit rule needs a non-empty actions list"));
        }
        if actions.iter().any(|a| {
            let (perm, rs) = split_action(a);
            perm.is_empty() || rs.is_some_and(str::is_empty)
        }) {
            return Err(self.malformed("empty action or resource server name"));
        }
        if let Some(freq) = self.action_attributes.get("frequency") {
            if freq.as_str().and_then(Frequency::parse).is_none() {
                return Err(self.malformed(format!("unknown frequency {freq}")));
            }
        }
        for (i, ctx) in self.environment_context.iter().enumerate() {
            if ctx.is_empty() || self.environment_context[..i].contains(ctx) {
                return Err(self.malformed("environment contexts must be non-empty and distinct"));
            }
        }
        Ok(())
    }

    /// Raw `actions` entries, possibly qualified as `perm@rs`.
    pub fn actions(&self) -> Vec<String> {
        self.action_attributes
            .get("actions")
            .map(|v| values(v).into_iter().filter_map(|a| a.as_str().map(str::to_string)).collect())
            .unwrap_or_default()
    }

    pub fn frequency(&self) -> Option<Frequency> {
        self.action_attributes
            .get("frequency")
            .and_then(Value::as_str)
            .and_then(Frequency::parse)
    }

    /// Qualifiers other than `actions`, copied into the master capability.
    pub fn qualifiers(&self) -> AttributeMap {
        self.action_attributes
            .iter()
            .filter(|(k, _)| k.as_str() != "actions")
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    fn subject_matches(&self, attrs: &SubjectAttributes) -> bool {
        self.subject_attributes.iter().all(|(key, required)| {
            attrs
                .attributes
                .get(key)
                .is_some_and(|have| values(have).iter().any(|v| values(required).contains(v)))
        })
    }

    fn object_matches(&self, requested: &AttributeMap) -> bool {
        let within_rule = requested.iter().all(|(key, asked)| {
            self.object_attributes.get(key).is_some_and(|allowed| {
                let asked = values(asked);
                !asked.is_empty() && asked.iter().all(|v| values(allowed).contains(v))
            })
        });
        within_rule && self.object_attributes.keys().all(|k| requested.contains_key(k))
    }

    fn actions_match(&self, claim: &ClientClaim) -> bool {
        let allowed: Vec<String> = self
            .actions()
            .iter()
            .map(|a| split_action(a).0.to_string())
            .collect();
        let requested = claim.actions();
        if requested.is_empty() || !requested.iter().all(|a| allowed.contains(a)) {
            return false;
        }
        claim
            .structured_scope
            .iter()
            .filter(|(k, _)| k.as_str() != "actions")
            .all(|(key, asked)| {
                self.action_attributes
                    .get(key)
                    .is_some_and(|allowed| values(asked).iter().all(|v| values(allowed).contains(v)))
            })
    }

    pub fn matches(&self, claim: &ClientClaim, attrs: &SubjectAttributes) -> bool {
        self.application == claim.application
            && attrs.subject_id == claim.client_id
            && self.subject_matches(attrs)
            && self.object_matches(&claim.object_attributes)
            && self.actions_match(claim)
    }

    /// Builds the permission sequence this rule grants. Unqualified actions run
    /// at the application's resource server; every entry carries the rule's contexts.
    pub fn sequence_for(&self, client_id: &str, directory: &ResourceDirectory) -> Result<PermissionSequence, PolicyError> {
        let entries = self
            .actions()
            .iter()
            .map(|action| {
                let (perm, rs) = split_action(action);
                let rs_id = match rs {
                    Some(rs) => rs.to_string(),
                    None => directory
                        .rs_for(&self.application)
                        .ok_or_else(|| PolicyError::UnknownApplication(self.application.clone()))?
                        .to_string(),
                };
                let contexts = self
                    .environment_context
                    .iter()
                    .map(|ctx| ContextRequirement {
                        property: ctx.clone(),
                        subject_id: client_id.to_string(),
                        rs_id: rs_id.clone(),
                    })
                    .collect();
                Ok(PermissionEntry {
                    rs_id,
                    permission: perm.to_string(),
                    contexts,
                })
            })
            .collect::<Result<Vec<_>, PolicyError>>()?;
        PermissionSequence::new(entries).map_err(|e| self.malformed(e.to_string()))
    }
}

/// Attributes of a registered client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectAttributes {
    pub subject_id: String,
    #[serde(default)]
    pub application: String,
    #[serde(rename = "subjectAttribute")]
    pub attributes: AttributeMap,
    #[serde(default)]
    pub name: String,
}

/// Maps an application name to the resource server hosting it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceDirectory(pub BTreeMap<String, String>);

impl ResourceDirectory {
    pub fn with(mut self, application: &str, rs_id: &str) -> Self {
        self.0.insert(application.to_string(), rs_id.to_string());
        self
    }

    pub fn rs_for(&self, application: &str) -> Option<&str> {
        self.0.get(application).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GrantDecision {
    Permit {
        sequence: PermissionSequence,
        contexts: Vec<String>,
    },
    Deny,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrantResult {
    pub decision: GrantDecision,
    pub matched_rule: Option<String>,
}

impl GrantResult {
    pub fn is_permit(&self) -> bool {
        matches!(self.decision, GrantDecision::Permit { .. })
    }

    fn deny(matched_rule: Option<String>) -> Self {
        GrantResult {
            decision: GrantDecision::Deny,
            matched_rule,
        }
    }
}

/// Permit-override evaluation of `claim` for a client with `attrs`.
pub fn evaluate(
    claim: &ClientClaim,
    attrs: &SubjectAttributes,
    policies: &[PolicyRule],
    directory: &ResourceDirectory,
) -> Result<GrantResult, PolicyError> {
    policies.iter().try_for_each(PolicyRule::validate)?;
    let matching: Vec<&PolicyRule> = policies.iter().filter(|r| r.matches(claim, attrs)).collect();
    let mut permits = matching.iter().filter(|r| r.authorization == Authorization::Permit);
    let Some(first) = permits.next() else {
        let denied_by = matching.first().map(|r| r.name.clone());
        return Ok(GrantResult::deny(denied_by));
    };
    let sequence = first.sequence_for(&claim.client_id, directory)?;
    let mut conflicting = Vec::new();
    for other in permits {
        let seq = other.sequence_for(&claim.client_id, directory)?;
        if seq != sequence || other.environment_context != first.environment_context {
            conflicting.push(other.name.clone());
        }
    }
    if !conflicting.is_empty() {
        conflicting.insert(0, first.name.clone());
        return Err(PolicyError::Ambiguous(conflicting));
    }
    Ok(GrantResult {
        decision: GrantDecision::Permit {
            contexts: first.environment_context.clone(),
            sequence,
        },
        matched_rule: Some(first.name.clone()),
    })
}

/// A known environmental situation oracle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EsoRegistryEntry {
    pub context_name: String,
    pub eso_url: String,
    #[serde(default)]
    pub description: String,
}

/// The AS's list of registered oracles, unique by context name.
#[derive(Debug, Clone, Default)]
pub struct EsoRegistry {
    entries: BTreeMap<String, EsoRegistryEntry>,
}

impl EsoRegistry {
    pub fn register(&mut self, entry: EsoRegistryEntry) -> Result<(), PolicyError> {
        if entry.context_name.is_empty() || entry.eso_url.is_empty() {
            return Err(PolicyError::Store("registry entries need a context name and URL".into()));
        }
        if self.entries.contains_key(&entry.context_name) {
            return Err(PolicyError::DuplicateRegistration(entry.context_name));
        }
        self.entries.insert(entry.context_name.clone(), entry);
        Ok(())
    }

    pub fn resolve(&self, context_name: &str) -> Result<&EsoRegistryEntry, PolicyError> {
        self.entries
            .get(context_name)
            .ok_or_else(|| PolicyError::NotRegistered(context_name.to_string()))
    }

    pub fn entries(&self) -> impl Iterator<Item = &EsoRegistryEntry> {
        self.entries.values()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = EsoRegistryEntry>) -> Result<Self, PolicyError> {
        let mut registry = EsoRegistry::default();
        for e in entries {
            registry.register(e)?;
        }
        Ok(registry)
    }
}

pub fn resolve_eso<'r>(context_name: &str, registry: &'r EsoRegistry) -> Result<&'r EsoRegistryEntry, PolicyError> {
    registry.resolve(context_name)
}

/// Last completed session per (client, rule).
#[derive(Debug, Clone, Default)]
pub struct FrequencyHistory {
    last_completed: HashMap<(String, String), UnixSeconds>,
}

impl FrequencyHistory {
    pub fn record_completion(&mut self, client_id: &str, rule: &str, at: UnixSeconds) {
        let slot = self
            .last_completed
            .entry((client_id.to_string(), rule.to_string()))
            .or_insert(at);
        *slot = (*slot).max(at);
    }

    pub fn last_completion(&self, client_id: &str, rule: &str) -> Option<UnixSeconds> {
        self.last_completed
            .get(&(client_id.to_string(), rule.to_string()))
            .copied()
    }
}

/// True iff no session of `client_id` under `rule` completed within the rule's window.
pub fn check_frequency(client_id: &str, rule: &PolicyRule, history: &FrequencyHistory, now: UnixSeconds) -> bool {
    let Some(freq) = rule.frequency() else {
        return true;
    };
    match history.last_completion(client_id, &rule.name) {
        None => true,
        Some(done) => now - done >= freq.window_secs(),
    }
}

/// Policy rules keyed by application, loadable from a JSON file holding one
/// policy object or a list of them.
#[derive(Debug, Clone, Default)]
pub struct PolicyStore {
    by_application: BTreeMap<String, Vec<PolicyRule>>,
}

impl PolicyStore {
    pub fn insert(&mut self, rule: PolicyRule) -> Result<(), PolicyError> {
        rule.validate()?;
        self.by_application.entry(rule.application.clone()).or_default().push(rule);
        Ok(())
    }

    pub fn from_rules(rules: impl IntoIterator<Item = PolicyRule>) -> Result<Self, PolicyError> {
        let mut store = PolicyStore::default();
        for rule in rules {
            store.insert(rule)?;
        }
        Ok(store)
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let value: Value = serde_json::from_str(text).map_err(|e| PolicyError::Store(e.to_string()))?;
        let docs = match value {
            Value::Array(items) => items,
            single => vec![single],
        };
        let rules = docs
            .into_iter()
            .map(|d| serde_json::from_value::<PolicyRule>(d).map_err(|e| PolicyError::Store(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_rules(rules)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path).map_err(|e| PolicyError::Store(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.all().collect::<Vec<_>>()).expect("policies serialize")
    }

    pub fn rules_for(&self, application: &str) -> &[PolicyRule] {
        self.by_application.get(application).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn find(&self, name: &str) -> Option<&PolicyRule> {
        self.all().find(|r| r.name == name)
    }

    pub fn all(&self) -> impl Iterator<Item = &PolicyRule> {
        self.by_application.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.by_application.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
