//! Demo data: the payment use case plus synthesized filler policies and profiles.

use std::collections::BTreeMap;

use seqcap_core::capability::UnixSeconds;
use seqcap_core::policy::{PolicyRule, SubjectAttributes};

use crate::eso_server::DAY;

pub const LOGIN_CONTEXT: &str = "used_within_two_months";
pub const LOGIN_WINDOW_SECS: i64 = 60 * DAY;
pub const HONEST_CLIENT: &str = "B";
pub const ATTACKER: &str = "M";
pub const OWNER: &str = "Alice";
/// Initial value of every demo object, $100.
pub const OPENING_BALANCE: i64 = 10_000;

/// The single-step monthly $10 charge, gated by recent logins.
pub const CHARGE_POLICY: &str = r#"{
    "type":"ABAC policy",
    "name":"ApplicationServiceCharge",
    "application":"Payment",
    "rules":{
        "subjectAttribute":{ "ApplicationID":["B"] },
        "objectAttribute":{ "resourceType":["balance"], "resourceID": "Alice" },
        "authorization":"permit",
        "actionAttribute":{ "actions":["charge"], "amount": "$10", "frequency": "monthly" },
        "environmentcontext":["used_within_two_months"],
        "Default":{ "authorization":"deny" }
    }
}"#;

/// Three reads then a $1 charge on one server, no context.
pub const STATEMENT_POLICY: &str = r#"{
    "type":"ABAC policy",
    "name":"StatementReview",
    "application":"Payment",
    "rules":{
        "subjectAttribute":{ "ApplicationID":["B"] },
        "objectAttribute":{ "resourceType":["statement"], "resourceID": "Alice" },
        "authorization":"permit",
        "actionAttribute":{ "actions":["read", "read", "read", "charge"], "amount": "$1" },
        "environmentcontext":[],
        "Default":{ "authorization":"deny" }
    }
}"#;

/// One read of the balance, gated by recent logins, with no frequency limit.
pub const INQUIRY_POLICY: &str = r#"{
    "type":"ABAC policy",
    "name":"BalanceInquiry",
    "application":"Payment",
    "rules":{
        "subjectAttribute":{ "ApplicationID":["B"] },
        "objectAttribute":{ "resourceType":["balance"], "resourceID": "Alice" },
        "authorization":"permit",
        "actionAttribute":{ "actions":["read"] },
        "environmentcontext":["used_within_two_months"],
        "Default":{ "authorization":"deny" }
    }
}"#;

/// A sequence across three servers, each step gated by recent logins.
pub const TRANSFER_POLICY: &str = r#"{
    "type":"ABAC policy",
    "name":"SavingsTransfer",
    "application":"Payment",
    "rules":{
        "subjectAttribute":{ "ApplicationID":["B"] },
        "objectAttribute":{ "resourceType":["savings"], "resourceID": "Alice" },
        "authorization":"permit",
        "actionAttribute":{ "actions":["read", "charge@RS2", "credit@RS3", "read"], "amount": "$5" },
        "environmentcontext":["used_within_two_months"],
        "Default":{ "authorization":"deny" }
    }
}"#;

pub const CLIENT_PROFILE: &str = r#"{
    "subject_id":"B",
    "application":"Payment",
    "subjectAttribute":{ "ApplicationID":["B"] },
    "name":"ApplicationB"
}"#;

fn rule(json: &str) -> PolicyRule {
    serde_json::from_str(json).expect("fixture policy parses")
}

/// Synthesized rules that never match the demo requests.
fn filler_rule(i: usize) -> PolicyRule {
    let json = format!(
        r#"{{
        "type":"ABAC policy",
        "name":"Synthetic{i}",
        "application":"Payment",
        "rules":{{
            "subjectAttribute":{{ "ApplicationID":["S{i}"] }},
            "objectAttribute":{{ "resourceType":["balance"], "resourceID": "User{i}" }},
            "authorization":"permit",
            "actionAttribute":{{ "actions":["read"] }},
            "environmentcontext":[],
            "Default":{{ "authorization":"deny" }}
        }}
    }}"#
    );
    rule(&json)
}

/// Ten policies. The multi-server transfer is included only with at least three servers.
pub fn policies(rs_count: usize) -> Vec<PolicyRule> {
    let mut rules = vec![rule(CHARGE_POLICY), rule(STATEMENT_POLICY), rule(INQUIRY_POLICY)];
    if rs_count >= 3 {
        rules.push(rule(TRANSFER_POLICY));
    }
    let fillers = 10 - rules.len();
    rules.extend((0..fillers).map(filler_rule));
    rules
}

/// The honest client, the attacker, and synthesized profiles up to `total`.
pub fn subjects(total: usize) -> Vec<SubjectAttributes> {
    let mut out: Vec<SubjectAttributes> = vec![
        serde_json::from_str(CLIENT_PROFILE).expect("fixture profile parses"),
        serde_json::from_value(serde_json::json!({
            "subject_id": ATTACKER,
            "application": "Payment",
            "subjectAttribute": { "ApplicationID": [ATTACKER] },
            "name": "ApplicationM"
        }))
        .expect("fixture profile parses"),
    ];
    let mut i = 0;
    while out.len() < total {
        out.push(SubjectAttributes {
            subject_id: format!("S{i}"),
            application: "Payment".into(),
            attributes: BTreeMap::from([("ApplicationID".to_string(), serde_json::json!([format!("S{i}")]))]),
            name: format!("Synthetic{i}"),
        });
        i += 1;
    }
    out
}

/// Objects every resource server hosts.
pub fn objects() -> BTreeMap<String, i64> {
    ["balance", "savings", "statement"]
        .into_iter()
        .map(|r| (format!("{OWNER}/{r}"), OPENING_BALANCE))
        .collect()
}

/// Alice logged in five days ago, Bob ninety.
pub fn logins(now: UnixSeconds) -> Vec<(String, UnixSeconds)> {
    vec![(OWNER.to_string(), now - 5 * DAY), ("Bob".to_string(), now - 90 * DAY)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_policies_and_profiles() {
        for n in [1, 3] {
            let p = policies(n);
            assert_eq!(p.len(), 10);
            assert_eq!(p.iter().filter(|r| r.name == "SavingsTransfer").count(), usize::from(n >= 3));
        }
        let s = subjects(60);
        assert_eq!(s.len(), 60);
        assert_eq!(s[0].subject_id, HONEST_CLIENT);
    }
}
