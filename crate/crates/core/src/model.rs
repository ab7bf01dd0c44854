//! Executable single-session model of the protocol.
//!
//! A [`ProtocolState`] is the AS issued-flag, one counter per resource server
//! and the set of capabilities handed out so far. [`Model::step`] implements
//! the issue / request / last-request rules, [`central_step`] the one-counter
//! reference monitor, and [`Model::explore`] checks by breadth-first search
//! that every reachable edge keeps both invariants, commutes with [`eff`] and
//! never invokes a permission out of order or twice.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::capability::PermissionSequence;

pub const MAX_RS: usize = 4;
pub const MAX_SEQUENCE: usize = 4;
pub const MAX_DEPTH: usize = 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("configuration too large: {0}")]
    ConfigTooLarge(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// One entry of the modeled sequence; `rs` is a zero-based server index.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SeqEntry {
    pub rs: usize,
    pub perm: String,
}

impl fmt::Display for SeqEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", rs_name(self.rs), self.perm)
    }
}

impl Serialize for SeqEntry {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

fn rs_name(index: usize) -> String {
    format!("RS{}", index + 1)
}

/// Parses `RS1:p1,RS2:p2,...`.
pub fn parse_sequence(spec: &str) -> Result<Vec<SeqEntry>, ModelError> {
    spec.split(',')
        .map(|item| {
            let bad = || ModelError::InvalidConfig(format!("bad sequence entry '{item}', expected RS<k>:<perm>"));
            let (rs, perm) = item.trim().split_once(':').ok_or_else(bad)?;
            let k: usize = rs.strip_prefix("RS").and_then(|k| k.parse().ok()).ok_or_else(bad)?;
            if k == 0 || perm.is_empty() {
                return Err(bad());
            }
            Ok(SeqEntry {
                rs: k - 1,
                perm: perm.to_string(),
            })
        })
        .collect()
}

/// A capability of the modeled session. The sequence is fixed per [`Model`],
/// so only the state distinguishes capabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ModelCapability {
    pub state: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct ProtocolState {
    /// Whether the AS has an issued, uncompleted session.
    pub a: bool,
    pub r: Vec<u32>,
    pub c: BTreeSet<ModelCapability>,
}

impl ProtocolState {
    pub fn initial(n: usize) -> Self {
        ProtocolState {
            a: false,
            r: vec![0; n],
            c: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TransitionLabel {
    Issue,
    Request { perm: String, cap: ModelCapability, rs: usize },
    LastRequest { perm: String, cap: ModelCapability, rs: usize },
}

impl fmt::Display for TransitionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransitionLabel::Issue => write!(f, "issue()"),
            TransitionLabel::Request { perm, cap, rs } => {
                write!(f, "request({perm}, T{}, {})", cap.state, rs_name(*rs))
            }
            TransitionLabel::LastRequest { perm, cap, rs } => {
                write!(f, "last_request({perm}, T{}, {})", cap.state, rs_name(*rs))
            }
        }
    }
}

impl Serialize for TransitionLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Blocked;

/// Deliberate rule defects used to check that the explorer catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    /// Accept capabilities older than the server's counter.
    NoStateCheck,
    /// Accept any permission at the named server.
    NoPermCheck,
    /// Completion leaves the handed-out capabilities valid.
    KeepCapsOnCom,
}

impl Mutation {
    pub const ALL: [Mutation; 3] = [Mutation::NoStateCheck, Mutation::NoPermCheck, Mutation::KeepCapsOnCom];

    pub fn name(self) -> &'static str {
        match self {
            Mutation::NoStateCheck => "no-state-check",
            Mutation::NoPermCheck => "no-perm-check",
            Mutation::KeepCapsOnCom => "keep-caps-on-com",
        }
    }
}

impl FromStr for Mutation {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mutation::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ModelError::InvalidConfig(format!("unknown mutation '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CentralState {
    pub ctr: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentralLabel {
    Request,
    LastRequest,
}

/// The centralized monitor: one counter, stepping through the sequence.
pub fn central_step(s: CentralState, label: CentralLabel, seq_len: usize) -> Result<CentralState, Blocked> {
    let last = seq_len as u32 - 1;
    match label {
        CentralLabel::Request if s.ctr < last => Ok(CentralState { ctr: s.ctr + 1 }),
        CentralLabel::LastRequest if s.ctr == last => Ok(CentralState { ctr: 0 }),
        _ => Err(Blocked),
    }
}

/// Effective state: 0 outside a session, otherwise the highest server counter.
pub fn eff(gamma: &ProtocolState) -> u32 {
    if gamma.a {
        gamma.r.iter().copied().max().unwrap_or(0)
    } else {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Model {
    n: usize,
    seq: Vec<SeqEntry>,
    mutation: Option<Mutation>,
}

impl Model {
    pub fn new(n: usize, seq: Vec<SeqEntry>) -> Result<Self, ModelError> {
        if n == 0 || seq.is_empty() {
            return Err(ModelError::InvalidConfig("need at least one server and one entry".into()));
        }
        if n > MAX_RS || seq.len() > MAX_SEQUENCE {
            return Err(ModelError::ConfigTooLarge(format!(
                "n={n}, |P|={} (limits {MAX_RS}, {MAX_SEQUENCE})",
                seq.len()
            )));
        }
        if let Some(e) = seq.iter().find(|e| e.rs >= n) {
            return Err(ModelError::InvalidConfig(format!("{e} names a server beyond RS{n}")));
        }
        Ok(Model { n, seq, mutation: None })
    }

    /// Model of a concrete sequence; servers are numbered by first appearance.
    pub fn from_sequence(seq: &PermissionSequence) -> Result<Self, ModelError> {
        let mut servers: Vec<&str> = Vec::new();
        let entries = seq
            .entries()
            .iter()
            .map(|e| {
                let rs = servers.iter().position(|s| *s == e.rs_id).unwrap_or_else(|| {
                    servers.push(&e.rs_id);
                    servers.len() - 1
                });
                SeqEntry {
                    rs,
                    perm: e.permission.clone(),
                }
            })
            .collect();
        Model::new(servers.len(), entries)
    }

    pub fn with_mutation(mut self, mutation: Option<Mutation>) -> Self {
        self.mutation = mutation;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn sequence(&self) -> &[SeqEntry] {
        &self.seq
    }

    fn last(&self) -> u32 {
        self.seq.len() as u32 - 1
    }

    pub fn initial(&self) -> ProtocolState {
        ProtocolState::initial(self.n)
    }

    fn mutated(&self, m: Mutation) -> bool {
        self.mutation == Some(m)
    }

    fn request_allowed(&self, g: &ProtocolState, perm: &str, cap: ModelCapability, rs: usize) -> bool {
        let Some(entry) = self.seq.get(cap.state as usize) else {
            return false;
        };
        g.a && rs < self.n
            && g.c.contains(&cap)
            && (self.mutated(Mutation::NoStateCheck) || cap.state >= g.r[rs])
            && entry.rs == rs
            && (self.mutated(Mutation::NoPermCheck) || entry.perm == perm)
    }

    pub fn step(&self, g: &ProtocolState, label: &TransitionLabel) -> Result<ProtocolState, Blocked> {
        match label {
            TransitionLabel::Issue => {
                if g.a {
                    return Err(Blocked);
                }
                let mut next = g.clone();
                next.a = true;
                next.c.insert(ModelCapability { state: 0 });
                Ok(next)
            }
            TransitionLabel::Request { perm, cap, rs } => {
                if cap.state >= self.last() || !self.request_allowed(g, perm, *cap, *rs) {
                    return Err(Blocked);
                }
                let mut next = g.clone();
                next.r[*rs] = cap.state + 1;
                next.c.insert(ModelCapability { state: cap.state + 1 });
                Ok(next)
            }
            TransitionLabel::LastRequest { perm, cap, rs } => {
                if cap.state != self.last() || !self.request_allowed(g, perm, *cap, *rs) {
                    return Err(Blocked);
                }
                let mut next = ProtocolState::initial(self.n);
                if self.mutated(Mutation::KeepCapsOnCom) {
                    next.c = g.c.clone();
                }
                Ok(next)
            }
        }
    }

    fn distinct_perms(&self) -> Vec<&str> {
        let mut perms: Vec<&str> = Vec::new();
        for e in &self.seq {
            if !perms.contains(&e.perm.as_str()) {
                perms.push(&e.perm);
            }
        }
        perms
    }

    /// Every label over this configuration, including ones presenting
    /// capabilities that were never issued or are long superseded.
    pub fn labels(&self) -> Vec<TransitionLabel> {
        let mut out = vec![TransitionLabel::Issue];
        for state in 0..=self.last() {
            let cap = ModelCapability { state };
            for perm in self.distinct_perms() {
                for rs in 0..self.n {
                    let perm = perm.to_string();
                    out.push(TransitionLabel::Request { perm: perm.clone(), cap, rs });
                    out.push(TransitionLabel::LastRequest { perm, cap, rs });
                }
            }
        }
        out
    }

    /// An accepted request or last-request presenting `cap` at `rs`, if any.
    pub fn accepting_label(&self, g: &ProtocolState, cap: ModelCapability, rs: usize) -> Option<TransitionLabel> {
        self.distinct_perms().into_iter().find_map(|perm| {
            [
                TransitionLabel::Request { perm: perm.to_string(), cap, rs },
                TransitionLabel::LastRequest { perm: perm.to_string(), cap, rs },
            ]
            .into_iter()
            .find(|l| self.step(g, l).is_ok())
        })
    }

    pub fn usable(&self, g: &ProtocolState, cap: ModelCapability, rs: usize) -> bool {
        self.accepting_label(g, cap, rs).is_some()
    }

    fn accepting_any(&self, g: &ProtocolState, caps: impl Iterator<Item = ModelCapability>) -> Option<TransitionLabel> {
        caps.flat_map(|t| (0..self.n).map(move |rs| (t, rs)))
            .find_map(|(t, rs)| self.accepting_label(g, t, rs))
    }

    /// Inv-1 with its witness: `Err(Some(label))` names a superseded
    /// capability that is still accepted.
    pub fn inv1_witness(&self, g: &ProtocolState) -> Result<(), Option<TransitionLabel>> {
        if !g.a {
            return Ok(());
        }
        let Some(newest) = g.c.iter().next_back().copied() else {
            return Ok(());
        };
        if newest.state < g.r[self.seq[newest.state as usize].rs] {
            return Err(None);
        }
        match self.accepting_any(g, g.c.iter().copied().filter(|t| *t != newest)) {
            Some(label) => Err(Some(label)),
            None => Ok(()),
        }
    }

    /// The newest capability is not behind the counter of the server it
    /// names, and every older capability is refused everywhere.
    pub fn check_inv1(&self, g: &ProtocolState) -> bool {
        self.inv1_witness(g).is_ok()
    }

    pub fn inv2_witness(&self, g: &ProtocolState) -> Result<(), Option<TransitionLabel>> {
        if g.a {
            return Ok(());
        }
        if g.r.iter().any(|&x| x != 0) {
            return Err(None);
        }
        match self.accepting_any(g, g.c.iter().copied()) {
            Some(label) => Err(Some(label)),
            None => Ok(()),
        }
    }

    /// Outside a session all counters are zero and no capability is accepted.
    pub fn check_inv2(&self, g: &ProtocolState) -> bool {
        self.inv2_witness(g).is_ok()
    }

    pub fn explore(&self, depth: usize) -> Result<Verdict, ModelError> {
        if depth > MAX_DEPTH {
            return Err(ModelError::ConfigTooLarge(format!("depth {depth} exceeds {MAX_DEPTH}")));
        }
        Ok(Explorer::new(self, depth).run())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Inv1,
    Inv2,
    Simulation,
    Monotonicity,
    OutOfOrder,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceStep {
    pub from: ProtocolState,
    pub label: TransitionLabel,
    pub to: ProtocolState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Counterexample {
    pub kind: ViolationKind,
    pub trace: Vec<TraceStep>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ViolationCounts {
    pub inv1: usize,
    pub inv2: usize,
    pub simulation: usize,
    pub monotonicity: usize,
    pub out_of_order: usize,
    pub replay: usize,
}

impl ViolationCounts {
    fn bump(&mut self, kind: ViolationKind) {
        let slot = match kind {
            ViolationKind::Inv1 => &mut self.inv1,
            ViolationKind::Inv2 => &mut self.inv2,
            ViolationKind::Simulation => &mut self.simulation,
            ViolationKind::Monotonicity => &mut self.monotonicity,
            ViolationKind::OutOfOrder => &mut self.out_of_order,
            ViolationKind::Replay => &mut self.replay,
        };
        *slot += 1;
    }

    fn add(&mut self, other: &ViolationCounts) {
        self.inv1 += other.inv1;
        self.inv2 += other.inv2;
        self.simulation += other.simulation;
        self.monotonicity += other.monotonicity;
        self.out_of_order += other.out_of_order;
        self.replay += other.replay;
    }

    pub fn total(&self) -> usize {
        self.inv1 + self.inv2 + self.simulation + self.monotonicity + self.out_of_order + self.replay
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub ok: bool,
    pub rs: usize,
    pub sequence: Vec<SeqEntry>,
    pub depth: usize,
    pub mutation: Option<Mutation>,
    pub states_explored: usize,
    /// Labels tried, blocked ones included.
    pub labels_evaluated: usize,
    pub edges_checked: usize,
    pub violations: ViolationCounts,
    /// Distinct invocation orders that ran a session to completion.
    pub complete_orderings: Vec<Vec<SeqEntry>>,
    /// Shortest trace to the first violation found.
    pub counterexample: Option<Counterexample>,
}

/// Search node: protocol state plus what the current session has done so far.
#[derive(Clone, PartialEq, Eq, Hash)]
struct NodeKey {
    gamma: ProtocolState,
    history: Vec<SeqEntry>,
    used: BTreeSet<(u32, usize)>,
}

struct Node {
    key: NodeKey,
    parent: Option<(usize, TransitionLabel)>,
    depth: usize,
}

struct Explorer<'m> {
    model: &'m Model,
    depth: usize,
    nodes: Vec<Node>,
    seen: HashMap<NodeKey, usize>,
    edges: usize,
    tried: usize,
    violations: ViolationCounts,
    orderings: Vec<Vec<SeqEntry>>,
    first: Option<Counterexample>,
}

impl<'m> Explorer<'m> {
    fn new(model: &'m Model, depth: usize) -> Self {
        Explorer {
            model,
            depth,
            nodes: Vec::new(),
            seen: HashMap::new(),
            edges: 0,
            tried: 0,
            violations: ViolationCounts::default(),
            orderings: Vec::new(),
            first: None,
        }
    }

    fn trace_to(&self, mut idx: usize) -> Vec<TraceStep> {
        let mut steps = Vec::new();
        while let Some((parent, label)) = &self.nodes[idx].parent {
            steps.push(TraceStep {
                from: self.nodes[*parent].key.gamma.clone(),
                label: label.clone(),
                to: self.nodes[idx].key.gamma.clone(),
            });
            idx = *parent;
        }
        steps.reverse();
        steps
    }

    fn report(&mut self, kind: ViolationKind, parent: usize, label: &TransitionLabel, to: &ProtocolState) {
        self.report_with(kind, parent, label, to, None);
    }

    /// Records a violation; `witness` is a further accepted step that exhibits it.
    fn report_with(
        &mut self,
        kind: ViolationKind,
        parent: usize,
        label: &TransitionLabel,
        to: &ProtocolState,
        witness: Option<TransitionLabel>,
    ) {
        self.violations.bump(kind);
        if self.first.is_none() {
            let mut trace = self.trace_to(parent);
            trace.push(TraceStep {
                from: self.nodes[parent].key.gamma.clone(),
                label: label.clone(),
                to: to.clone(),
            });
            if let Some(w) = witness {
                let after = self.model.step(to, &w).expect("witness is accepted");
                trace.push(TraceStep {
                    from: to.clone(),
                    label: w,
                    to: after,
                });
            }
            self.first = Some(Counterexample { kind, trace });
        }
    }

    /// Checks one accepted edge and returns the successor node key.
    fn check_edge(&mut self, parent: usize, label: &TransitionLabel, next: ProtocolState) -> NodeKey {
        let model = self.model;
        let from = self.nodes[parent].key.clone();
        let seq_len = model.seq.len();

        if let Err(witness) = model.inv1_witness(&next) {
            self.report_with(ViolationKind::Inv1, parent, label, &next, witness);
        }
        if let Err(witness) = model.inv2_witness(&next) {
            self.report_with(ViolationKind::Inv2, parent, label, &next, witness);
        }

        let (before, after) = (eff(&from.gamma), eff(&next));
        let central = match label {
            TransitionLabel::Issue => Ok(CentralState { ctr: before }),
            TransitionLabel::Request { .. } => central_step(CentralState { ctr: before }, CentralLabel::Request, seq_len),
            TransitionLabel::LastRequest { .. } => {
                central_step(CentralState { ctr: before }, CentralLabel::LastRequest, seq_len)
            }
        };
        if central != Ok(CentralState { ctr: after }) {
            self.report(ViolationKind::Simulation, parent, label, &next);
        }
        if matches!(label, TransitionLabel::Request { .. }) && after < before {
            self.report(ViolationKind::Monotonicity, parent, label, &next);
        }

        let mut key = NodeKey {
            gamma: next.clone(),
            history: from.history,
            used: from.used,
        };
        match label {
            TransitionLabel::Issue => {
                key.history.clear();
                key.used.clear();
            }
            TransitionLabel::Request { perm, cap, rs } | TransitionLabel::LastRequest { perm, cap, rs } => {
                if !key.used.insert((cap.state, *rs)) {
                    self.report(ViolationKind::Replay, parent, label, &next);
                }
                let invoked = SeqEntry {
                    rs: *rs,
                    perm: perm.clone(),
                };
                let in_order = model.seq.get(key.history.len()) == Some(&invoked);
                key.history.push(invoked);
                let complete = matches!(label, TransitionLabel::LastRequest { .. });
                if !in_order || (complete && key.history.len() != seq_len) {
                    self.report(ViolationKind::OutOfOrder, parent, label, &next);
                }
                if complete {
                    let ordering = std::mem::take(&mut key.history);
                    if !self.orderings.contains(&ordering) {
                        self.orderings.push(ordering);
                    }
                    key.used.clear();
                }
            }
        }
        key
    }

    fn run(mut self) -> Verdict {
        let model = self.model;
        let labels = model.labels();
        let root = NodeKey {
            gamma: model.initial(),
            history: Vec::new(),
            used: BTreeSet::new(),
        };
        self.seen.insert(root.clone(), 0);
        self.nodes.push(Node {
            key: root,
            parent: None,
            depth: 0,
        });
        let mut queue = VecDeque::from([0usize]);

        while let Some(idx) = queue.pop_front() {
            if self.nodes[idx].depth >= self.depth {
                continue;
            }
            for label in &labels {
                self.tried += 1;
                let Ok(next) = model.step(&self.nodes[idx].key.gamma, label) else {
                    continue;
                };
                self.edges += 1;
                let key = self.check_edge(idx, label, next);
                if !self.seen.contains_key(&key) {
                    let child = self.nodes.len();
                    self.seen.insert(key.clone(), child);
                    self.nodes.push(Node {
                        key,
                        parent: Some((idx, label.clone())),
                        depth: self.nodes[idx].depth + 1,
                    });
                    queue.push_back(child);
                }
            }
        }

        Verdict {
            ok: self.violations.total() == 0,
            rs: model.n,
            sequence: model.seq.clone(),
            depth: self.depth,
            mutation: model.mutation,
            states_explored: self.nodes.len(),
            labels_evaluated: self.tried,
            edges_checked: self.edges,
            violations: self.violations,
            complete_orderings: self.orderings,
            counterexample: self.first,
        }
    }
}

/// Every sequence of length `1..=max_len` over at most `max_rs` servers, up to
/// renaming of servers and permissions. Entries with equal server and
/// permission are repeats of one another.
pub fn canonical_sequences(max_rs: usize, max_len: usize) -> Vec<Vec<SeqEntry>> {
    // Restricted-growth labelling: each new value is at most one above the largest so far.
    fn patterns(len: usize, max_value: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..len {
            out = out
                .into_iter()
                .flat_map(|p: Vec<usize>| {
                    let next = p.iter().max().map_or(0, |m| m + 1).min(max_value - 1);
                    (0..=next).map(move |v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        out
    }
    let mut all = Vec::new();
    for len in 1..=max_len {
        for servers in patterns(len, max_rs) {
            for perms in patterns(len, len) {
                all.push(
                    servers
                        .iter()
                        .zip(&perms)
                        .map(|(&rs, &p)| SeqEntry {
                            rs,
                            perm: format!("p{}", p + 1),
                        })
                        .collect(),
                );
            }
        }
    }
    all
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub configurations: usize,
    pub states_explored: usize,
    pub labels_evaluated: usize,
    pub edges_checked: usize,
    pub violations: ViolationCounts,
    /// Verdicts that found a violation.
    pub failures: Vec<Verdict>,
}

/// Explores every canonical sequence against every server count from the
/// number it uses up to `max_rs`.
pub fn sweep(max_rs: usize, max_len: usize, depth: usize, mutation: Option<Mutation>) -> Result<SweepReport, ModelError> {
    let mut report = SweepReport {
        configurations: 0,
        states_explored: 0,
        labels_evaluated: 0,
        edges_checked: 0,
        violations: ViolationCounts::default(),
        failures: Vec::new(),
    };
    for seq in canonical_sequences(max_rs, max_len) {
        let used = seq.iter().map(|e| e.rs + 1).max().unwrap_or(1);
        for n in used..=max_rs {
            let verdict = Model::new(n, seq.clone())?.with_mutation(mutation).explore(depth)?;
            report.configurations += 1;
            report.states_explored += verdict.states_explored;
            report.labels_evaluated += verdict.labels_evaluated;
            report.edges_checked += verdict.edges_checked;
            report.violations.add(&verdict.violations);
            if !verdict.ok {
                report.failures.push(verdict);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_servers() -> Model {
        Model::new(3, parse_sequence("RS1:p1,RS2:p2,RS3:p3").unwrap()).unwrap()
    }

    fn req(perm: &str, state: u32, rs: usize) -> TransitionLabel {
        TransitionLabel::Request {
            perm: perm.into(),
            cap: ModelCapability { state },
            rs,
        }
    }

    fn last(perm: &str, state: u32, rs: usize) -> TransitionLabel {
        TransitionLabel::LastRequest {
            perm: perm.into(),
            cap: ModelCapability { state },
            rs,
        }
    }

    fn caps(states: &[u32]) -> BTreeSet<ModelCapability> {
        states.iter().map(|&state| ModelCapability { state }).collect()
    }

    #[test]
    fn issue_then_request_then_replay() {
        let m = three_servers();
        let g1 = m.step(&m.initial(), &TransitionLabel::Issue).unwrap();
        assert_eq!(g1, ProtocolState { a: true, r: vec![0, 0, 0], c: caps(&[0]) });
        let g2 = m.step(&g1, &req("p1", 0, 0)).unwrap();
        assert_eq!(g2.r, vec![1, 0, 0]);
        assert_eq!(g2.c, caps(&[0, 1]));
        assert_eq!(m.step(&g2, &req("p1", 0, 0)), Err(Blocked));
        assert_eq!(m.step(&g1, &TransitionLabel::Issue), Err(Blocked));
    }

    #[test]
    fn full_run_resets() {
        let m = three_servers();
        let mut g = m.step(&m.initial(), &TransitionLabel::Issue).unwrap();
        g = m.step(&g, &req("p1", 0, 0)).unwrap();
        g = m.step(&g, &req("p2", 1, 1)).unwrap();
        assert_eq!(m.step(&g, &req("p3", 2, 2)), Err(Blocked), "last entry needs last_request");
        g = m.step(&g, &last("p3", 2, 2)).unwrap();
        assert_eq!(g, m.initial());
        assert!(m.check_inv1(&g) && m.check_inv2(&g));
        assert_eq!(eff(&g), 0);
    }

    #[test]
    fn inv1_examples() {
        let m = three_servers();
        assert!(m.check_inv1(&m.initial()));
        let g1 = m.step(&m.initial(), &TransitionLabel::Issue).unwrap();
        let g2 = m.step(&g1, &req("p1", 0, 0)).unwrap();
        assert!(m.check_inv1(&g2));
        let bad = ProtocolState { a: true, r: vec![1, 0, 0], c: caps(&[0]) };
        assert!(!m.check_inv1(&bad));
    }

    #[test]
    fn inv2_examples() {
        let m = three_servers();
        assert!(m.check_inv2(&m.initial()));
        let bad = ProtocolState { a: false, r: vec![2, 0, 0], c: BTreeSet::new() };
        assert!(!m.check_inv2(&bad));
    }

    #[test]
    fn eff_examples() {
        let m = three_servers();
        assert_eq!(eff(&m.initial()), 0);
        let g = ProtocolState { a: true, r: vec![1, 0, 0], c: caps(&[0, 1]) };
        assert_eq!(eff(&g), 1);
        let ended = ProtocolState { a: false, r: vec![1, 2, 0], c: BTreeSet::new() };
        assert_eq!(eff(&ended), 0);
    }

    #[test]
    fn central_examples() {
        let s0 = CentralState { ctr: 0 };
        assert_eq!(central_step(s0, CentralLabel::Request, 3), Ok(CentralState { ctr: 1 }));
        assert_eq!(central_step(CentralState { ctr: 2 }, CentralLabel::LastRequest, 3), Ok(s0));
        assert_eq!(central_step(s0, CentralLabel::LastRequest, 3), Err(Blocked));
        assert_eq!(central_step(CentralState { ctr: 2 }, CentralLabel::Request, 3), Err(Blocked));
        assert_eq!(central_step(s0, CentralLabel::LastRequest, 1), Ok(s0));
    }

    #[test]
    fn explore_three_server_sequence_is_clean() {
        let v = three_servers().explore(12).unwrap();
        assert!(v.ok, "{:?}", v.counterexample);
        assert_eq!(v.violations.total(), 0);
        assert_eq!(v.complete_orderings.len(), 1);
        assert_eq!(v.complete_orderings[0], three_servers().sequence().to_vec());
    }

    #[test]
    fn repeated_entry_has_one_ordering() {
        let m = Model::new(2, parse_sequence("RS1:p1,RS2:p2,RS1:p1").unwrap()).unwrap();
        let v = m.explore(12).unwrap();
        assert!(v.ok, "{:?}", v.counterexample);
        assert_eq!(v.complete_orderings, vec![m.sequence().to_vec()]);
    }

    #[test]
    fn dropping_state_check_is_caught_as_replay() {
        let m = three_servers().with_mutation(Some(Mutation::NoStateCheck));
        let v = m.explore(12).unwrap();
        assert!(!v.ok);
        let cx = v.counterexample.expect("counterexample attached");
        let lbl = &cx.trace.last().unwrap().label;
        let (TransitionLabel::Request { cap, rs, .. } | TransitionLabel::LastRequest { cap, rs, .. }) = lbl else {
            panic!("violation on issue edge");
        };
        // The offending request presents a capability already used at that server.
        let earlier = cx.trace[..cx.trace.len() - 1].iter().any(|s| {
            matches!(&s.label, TransitionLabel::Request { cap: c, rs: r, .. } if c == cap && r == rs)
        });
        assert!(earlier, "{cx:?}");
        assert!(v.violations.replay > 0);
        assert!(v.violations.inv1 > 0);
    }

    #[test]
    fn other_mutations_are_caught() {
        let m = Model::new(2, parse_sequence("RS1:p1,RS1:p2").unwrap()).unwrap();
        for mutation in [Mutation::NoPermCheck, Mutation::KeepCapsOnCom] {
            let v = m.clone().with_mutation(Some(mutation)).explore(12).unwrap();
            assert!(!v.ok, "{mutation:?} went unnoticed");
            assert!(v.counterexample.is_some());
        }
    }

    #[test]
    fn bounds_are_enforced() {
        assert!(matches!(
            Model::new(5, parse_sequence("RS1:p").unwrap()),
            Err(ModelError::ConfigTooLarge(_))
        ));
        assert!(matches!(
            Model::new(1, parse_sequence("RS1:a,RS1:b,RS1:c,RS1:d,RS1:e").unwrap()),
            Err(ModelError::ConfigTooLarge(_))
        ));
        assert!(matches!(three_servers().explore(21), Err(ModelError::ConfigTooLarge(_))));
        assert!(matches!(
            Model::new(1, parse_sequence("RS2:p").unwrap()),
            Err(ModelError::InvalidConfig(_))
        ));
        assert!(parse_sequence("RS0:p").is_err());
        assert!(parse_sequence("X1:p").is_err());
        assert_eq!("no-state-check".parse::<Mutation>(), Ok(Mutation::NoStateCheck));
    }

    #[test]
    fn canonical_sequence_counts() {
        // Restricted-growth strings: 1, 2 and 5 patterns for lengths 1..=3.
        assert_eq!(canonical_sequences(3, 1).len(), 1);
        assert_eq!(canonical_sequences(3, 2).len(), 1 + 2 * 2);
        assert_eq!(canonical_sequences(3, 3).len(), 1 + 4 + 5 * 5);
        assert_eq!(canonical_sequences(1, 3).len(), 1 + 2 + 5);
    }

    #[test]
    fn verdict_serializes() {
        let v = three_servers().explore(4).unwrap();
        let json = serde_json::to_value(&v).unwrap();
        assert_eq!(json["ok"], true);
        assert_eq!(json["sequence"][1], "RS2:p2");
        assert!(json["counterexample"].is_null());
    }
}
