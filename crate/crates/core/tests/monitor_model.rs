//! Random request traces replayed against both the monitor and the model.

mod common;

use std::collections::BTreeMap;

use common::*;
use proptest::prelude::*;
use seqcap_core::capability::{PermissionSequence, SignedEnvelope};
use seqcap_core::model::{Model, ModelCapability, TransitionLabel};
use seqcap_core::monitor::{AccessRequest, Decision, DenyReason, SessionCounter};

#[derive(Debug, Clone)]
struct Step {
    cap: usize,
    rs: usize,
    perm: usize,
}

fn step_strategy() -> impl Strategy<Value = Step> {
    (0usize..4, 0usize..3, 0usize..3).prop_map(|(cap, rs, perm)| Step { cap, rs, perm })
}

fn sequence_strategy() -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0usize..3, 0usize..3), 1..=4)
}

fn to_sequence(raw: &[(usize, usize)]) -> PermissionSequence {
    let names: Vec<(String, String)> = raw.iter().map(|(rs, p)| (format!("RS{}", rs + 1), format!("p{}", p + 1))).collect();
    sequence(&names.iter().map(|(r, p)| (r.as_str(), p.as_str())).collect::<Vec<_>>())
}

async fn replay(raw: Vec<(usize, usize)>, steps: Vec<Step>) -> Result<(), TestCaseError> {
    let seq = to_sequence(&raw);
    let last = seq.last_index() as u32;
    // The model numbers servers by first appearance; map our RS indices onto it.
    let model = Model::from_sequence(&seq).unwrap();
    let mut order: Vec<usize> = Vec::new();
    for (rs, _) in &raw {
        if !order.contains(rs) {
            order.push(*rs);
        }
    }

    let session = "prop";
    let revocations = Revocations::default();
    let context = FixedContext::active();
    let mut counters: BTreeMap<usize, SessionCounter> = BTreeMap::new();
    let mut caps: BTreeMap<u32, SignedEnvelope> = BTreeMap::from([(0, issue(seq.clone(), session))]);
    let mut gamma = model.step(&model.initial(), &TransitionLabel::Issue).unwrap();
    let mut accepted: Vec<(String, String)> = Vec::new();

    for step in steps {
        let Some((&state, env)) = caps.iter().nth(step.cap % caps.len()) else { continue };
        let env = env.clone();
        let rs_id = format!("RS{}", step.rs + 1);
        let perm = format!("p{}", step.perm + 1);
        let counter = counters.get(&step.rs).cloned().unwrap_or_else(|| SessionCounter::new(session));
        let req = AccessRequest {
            client_id: "B".into(),
            permission: perm.clone(),
            presented: Some(env),
            eso_capabilities: vec![],
            pop_proof: None,
        };
        let (decision, next) = monitor(step.rs).authorize(&req, &counter, NOW, &revocations, &context).await;
        prop_assert!(next.rs_value >= counter.rs_value, "counter went backwards");
        if state < counter.rs_value {
            prop_assert!(!decision.is_granted(), "rewind accepted: state {} < rs {}", state, counter.rs_value);
        }

        let model_gamma = match order.iter().position(|r| *r == step.rs) {
            None => None,
            Some(m) => {
                let cap = ModelCapability { state };
                let label = if state < last {
                    TransitionLabel::Request { perm: perm.clone(), cap, rs: m }
                } else {
                    TransitionLabel::LastRequest { perm: perm.clone(), cap, rs: m }
                };
                model.step(&gamma, &label).ok()
            }
        };
        prop_assert_eq!(decision.is_granted(), model_gamma.is_some(), "monitor {:?} vs model at {:?}", decision, gamma);

        match decision {
            Decision::Invoke { successor, .. } => {
                caps.insert(next.rs_value, successor);
                counters.insert(step.rs, next);
                accepted.push((rs_id, perm));
            }
            Decision::InvokeLast { .. } => {
                revocations.end(session);
                accepted.push((rs_id, perm));
            }
            Decision::Deny(r) => {
                prop_assert!(matches!(r, DenyReason::OutOfOrder | DenyReason::WrongRS | DenyReason::Revoked), "{:?}", r);
            }
        }
        if let Some(g) = model_gamma {
            gamma = g;
        }
        // Accepted invocations always form a prefix of the sequence.
        for (i, (rs, p)) in accepted.iter().enumerate() {
            prop_assert!(seq.get(i).is_some_and(|e| e.names(rs, p)));
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn monitor_agrees_with_model(raw in sequence_strategy(), steps in prop::collection::vec(step_strategy(), 1..14)) {
        let rt = tokio::runtime::Builder::new_current_thread().build().unwrap();
        rt.block_on(replay(raw, steps))?;
    }
}
