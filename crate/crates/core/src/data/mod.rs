//! Data model for multistate event histories.
//!
//! Two observation schemes are supported:
//!
//! * [`EpisodeDataset`]: continuously observed paths in counting-process
//!   format, one record per interval `(tstart, tstop]` spent in a state.
//! * [`PanelDataset`]: the state occupied is recorded only at visit times.
//!
//! A record `(tstart, tstop]` contributes to the risk set of its state for
//! `tstart < t <= tstop`, so a subject leaving the state at `t` is still
//! counted in the denominator at `t`. A first record starting after time zero
//! encodes delayed entry.

pub(crate) mod io;
mod panel;
pub mod recipes;
mod validate;

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_episodes, read_episodes, write_episodes, EpisodeSchema};
pub use panel::{load_panel, read_panel, PanelDataset, PanelSchema, PanelSubject};
pub use validate::{validate, Finding, FindingKind, TransitionCount, ValidationReport};

/// An ordered `from -> to` pair of state indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Transition {
    pub from: usize,
    pub to: usize,
}

impl Transition {
    pub const fn new(from: usize, to: usize) -> Self {
        Transition { from, to }
    }
}

impl std::fmt::Display for Transition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}->{}", self.from, self.to)
    }
}

/// Labeled states, the absorbing subset, and the allowed direct transitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "StateSpaceSpec", into = "StateSpaceSpec")]
pub struct StateSpace {
    labels: Vec<String>,
    absorbing: BTreeSet<usize>,
    allowed: BTreeSet<Transition>,
}

/// Label-based JSON form of a [`StateSpace`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateSpaceSpec {
    pub labels: Vec<String>,
    #[serde(default)]
    pub absorbing: Vec<String>,
    pub allowed: Vec<(String, String)>,
}

impl StateSpace {
    pub fn new(
        labels: Vec<String>,
        absorbing: impl IntoIterator<Item = usize>,
        allowed: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let absorbing: BTreeSet<usize> = absorbing.into_iter().collect();
        let allowed: BTreeSet<Transition> = allowed
            .into_iter()
            .map(|(from, to)| Transition::new(from, to))
            .collect();
        let n = labels.len();
        if n == 0 {
            return Err(Error::InvalidStateSpace("no states".into()));
        }
        let mut seen = BTreeSet::new();
        for label in &labels {
            if !seen.insert(label.as_str()) {
                return Err(Error::InvalidStateSpace(format!("duplicate label `{label}`")));
            }
        }
        if let Some(&a) = absorbing.iter().find(|&&a| a >= n) {
            return Err(Error::InvalidStateSpace(format!("absorbing index {a} out of range")));
        }
        for tr in &allowed {
            if tr.from >= n || tr.to >= n {
                return Err(Error::InvalidStateSpace(format!("transition {tr} out of range")));
            }
            if tr.from == tr.to {
                return Err(Error::InvalidStateSpace(format!("self transition {tr}")));
            }
            if absorbing.contains(&tr.from) {
                return Err(Error::InvalidStateSpace(format!(
                    "transition {tr} leaves absorbing state"
                )));
            }
        }
        Ok(StateSpace {
            labels,
            absorbing,
            allowed,
        })
    }

    /// Alive/dead survival model.
    pub fn two_state() -> Self {
        StateSpace::new(vec!["alive".into(), "dead".into()], [1], [(0, 1)]).expect("valid")
    }

    /// Progressive chain `0 -> 1 -> ... -> n-1` with the last state absorbing.
    pub fn progressive(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidStateSpace("progressive model needs two states".into()));
        }
        StateSpace::new(
            (0..n).map(|k| k.to_string()).collect(),
            [n - 1],
            (0..n - 1).map(|k| (k, k + 1)),
        )
    }

    /// Illness-death model with distinct death states before and after illness:
    /// `0 -> 1`, `0 -> 2`, `1 -> 3`.
    pub fn illness_death(labels: [&str; 4]) -> Self {
        StateSpace::new(
            labels.iter().map(|s| s.to_string()).collect(),
            [2, 3],
            [(0, 1), (0, 2), (1, 3)],
        )
        .expect("valid")
    }

    pub fn n_states(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, state: usize) -> &str {
        &self.labels[state]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn is_absorbing(&self, state: usize) -> bool {
        self.absorbing.contains(&state)
    }

    pub fn absorbing(&self) -> &BTreeSet<usize> {
        &self.absorbing
    }

    pub fn allowed(&self) -> &BTreeSet<Transition> {
        &self.allowed
    }

    pub fn is_allowed(&self, from: usize, to: usize) -> bool {
        self.allowed.contains(&Transition::new(from, to))
    }

    pub fn check_state(&self, state: usize) -> Result<()> {
        if state < self.n_states() {
            Ok(())
        } else {
            Err(Error::UnknownState(state))
        }
    }

    pub fn check_transition(&self, tr: Transition) -> Result<()> {
        if self.allowed.contains(&tr) {
            Ok(())
        } else {
            Err(Error::DisallowedTransition {
                from: tr.from,
                to: tr.to,
            })
        }
    }

    /// States reachable from `state` through one or more allowed transitions.
    pub fn reachable_from(&self, state: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut stack = vec![state];
        while let Some(k) = stack.pop() {
            for tr in self.allowed.iter().filter(|tr| tr.from == k) {
                if out.insert(tr.to) {
                    stack.push(tr.to);
                }
            }
        }
        out
    }

    /// Allowed transitions out of `state`.
    pub fn transitions_from(&self, state: usize) -> impl Iterator<Item = Transition> + '_ {
        self.allowed.iter().copied().filter(move |tr| tr.from == state)
    }
}

impl TryFrom<StateSpaceSpec> for StateSpace {
    type Error = Error;

    fn try_from(spec: StateSpaceSpec) -> Result<Self> {
        let index = |label: &str| {
            spec.labels
                .iter()
                .position(|l| l == label)
                .ok_or_else(|| Error::InvalidStateSpace(format!("unknown label `{label}`")))
        };
        let absorbing = spec
            .absorbing
            .iter()
            .map(|l| index(l))
            .collect::<Result<Vec<_>>>()?;
        let allowed = spec
            .allowed
            .iter()
            .map(|(a, b)| Ok((index(a)?, index(b)?)))
            .collect::<Result<Vec<_>>>()?;
        StateSpace::new(spec.labels.clone(), absorbing, allowed)
    }
}

impl From<StateSpace> for StateSpaceSpec {
    fn from(space: StateSpace) -> Self {
        StateSpaceSpec {
            absorbing: space.absorbing.iter().map(|&a| space.labels[a].clone()).collect(),
            allowed: space
                .allowed
                .iter()
                .map(|tr| (space.labels[tr.from].clone(), space.labels[tr.to].clone()))
                .collect(),
            labels: space.labels,
        }
    }
}

/// How an interval ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EndMark {
    Transition(usize),
    Censored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub subject: String,
    pub tstart: f64,
    pub tstop: f64,
    pub from: usize,
    pub end: EndMark,
    pub covariates: Vec<f64>,
}

impl EpisodeRecord {
    /// Whether the record is at risk at `t`, i.e. `tstart < t <= tstop`.
    #[inline]
    pub fn at_risk(&self, t: f64) -> bool {
        self.tstart < t && t <= self.tstop
    }

    /// State occupied right after `tstop`.
    pub fn end_state(&self) -> usize {
        match self.end {
            EndMark::Transition(to) => to,
            EndMark::Censored => self.from,
        }
    }

    pub fn transition(&self) -> Option<Transition> {
        match self.end {
            EndMark::Transition(to) => Some(Transition::new(self.from, to)),
            EndMark::Censored => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpan {
    pub id: String,
    pub records: Range<usize>,
}

/// Immutable collection of counting-process records.
///
/// Records are grouped by subject (in order of first appearance) and sorted
/// by `tstart` within a subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeDataset {
    state_space: StateSpace,
    covariate_names: Vec<String>,
    records: Vec<EpisodeRecord>,
    subjects: Vec<SubjectSpan>,
}

/// Subjects at risk in a state at a given time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RiskSet {
    pub count: usize,
    pub ids: BTreeSet<String>,
}

impl EpisodeDataset {
    /// Builds a dataset, checking per-record invariants.
    ///
    /// Structural problems that span records (gaps, overlaps, zero-length
    /// intervals) are accepted here and surfaced by [`validate`].
    pub fn new(
        state_space: StateSpace,
        covariate_names: Vec<String>,
        records: Vec<EpisodeRecord>,
    ) -> Result<Self> {
        let p = covariate_names.len();
        for r in &records {
            let bad = |reason: String| Error::InvalidRecord {
                subject: r.subject.clone(),
                reason,
            };
            if !r.tstart.is_finite() || !r.tstop.is_finite() {
                return Err(bad("non-finite time".into()));
            }
            if r.tstart < 0.0 {
                return Err(bad(format!("negative tstart {}", r.tstart)));
            }
            if r.tstop < r.tstart {
                return Err(bad(format!("tstop {} precedes tstart {}", r.tstop, r.tstart)));
            }
            state_space.check_state(r.from)?;
            if state_space.is_absorbing(r.from) {
                return Err(bad(format!("interval starts in absorbing state {}", r.from)));
            }
            if let EndMark::Transition(to) = r.end {
                state_space.check_state(to)?;
                state_space.check_transition(Transition::new(r.from, to))?;
            }
            if r.covariates.len() != p {
                return Err(bad(format!(
                    "{} covariate values, expected {p}",
                    r.covariates.len()
                )));
            }
            if r.covariates.iter().any(|x| !x.is_finite()) {
                return Err(bad("non-finite covariate".into()));
            }
        }

        let mut order: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            let next = order.len();
            order.entry(r.subject.as_str()).or_insert(next);
        }
        let mut keyed: Vec<(usize, usize)> = records
            .iter()
            .enumerate()
            .map(|(i, r)| (order[r.subject.as_str()], i))
            .collect();
        keyed.sort_by(|a, b| {
            a.0.cmp(&b.0).then_with(|| {
                let (ra, rb) = (&records[a.1], &records[b.1]);
                ra.tstart
                    .total_cmp(&rb.tstart)
                    .then(ra.tstop.total_cmp(&rb.tstop))
                    .then(a.1.cmp(&b.1))
            })
        });
        drop(order);
        let mut slots: Vec<Option<EpisodeRecord>> = records.into_iter().map(Some).collect();
        let sorted: Vec<EpisodeRecord> = keyed
            .iter()
            .map(|&(_, i)| slots[i].take().expect("each record moved once"))
            .collect();

        let mut subjects: Vec<SubjectSpan> = Vec::new();
        for (i, r) in sorted.iter().enumerate() {
            match subjects.last_mut() {
                Some(span) if span.id == r.subject => span.records.end = i + 1,
                _ => subjects.push(SubjectSpan {
                    id: r.subject.clone(),
                    records: i..i + 1,
                }),
            }
        }

        Ok(EpisodeDataset {
            state_space,
            covariate_names,
            records: sorted,
            subjects,
        })
    }

    pub fn state_space(&self) -> &StateSpace {
        &self.state_space
    }

    pub fn records(&self) -> &[EpisodeRecord] {
        &self.records
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownCovariate(name.to_string()))
    }

    pub fn subjects(&self) -> &[SubjectSpan] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn subject_records(&self, subject: usize) -> &[EpisodeRecord] {
        &self.records[self.subjects[subject].records.clone()]
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Largest `tstop` in the data (0 for an empty dataset).
    pub fn max_time(&self) -> f64 {
        self.records.iter().map(|r| r.tstop).fold(0.0, f64::max)
    }

    /// Largest time at which any transition is recorded.
    pub fn last_event_time(&self) -> Option<f64> {
        self.records
            .iter()
            .filter(|r| r.transition().is_some())
            .map(|r| r.tstop)
            .reduce(f64::max)
    }

    /// Whether any subject's first record starts after time zero.
    pub fn delayed_entry_subject(&self) -> Option<&str> {
        self.subjects
            .iter()
            .find(|s| self.records[s.records.start].tstart > 0.0)
            .map(|s| s.id.as_str())
    }

    /// Dataset restricted to the given subjects, in the given order.
    ///
    /// Repeated indices are allowed (bootstrap resampling); repeated copies
    /// receive distinct subject ids by suffixing `#k`.
    pub fn select_subjects(&self, subjects: &[usize]) -> Self {
        let mut seen: HashMap<usize, usize> = HashMap::new();
        let mut records = Vec::new();
        let mut spans = Vec::with_capacity(subjects.len());
        for &s in subjects {
            let copy = seen.entry(s).or_insert(0);
            let id = if *copy == 0 {
                self.subjects[s].id.clone()
            } else {
                format!("{}#{}", self.subjects[s].id, copy)
            };
            *copy += 1;
            let start = records.len();
            for r in self.subject_records(s) {
                let mut r = r.clone();
                r.subject.clone_from(&id);
                records.push(r);
            }
            spans.push(SubjectSpan {
                id,
                records: start..records.len(),
            });
        }
        EpisodeDataset {
            state_space: self.state_space.clone(),
            covariate_names: self.covariate_names.clone(),
            records,
            subjects: spans,
        }
    }

    /// Dataset without subject `subject`.
    pub fn without_subject(&self, subject: usize) -> Self {
        let keep: Vec<usize> = (0..self.n_subjects()).filter(|&s| s != subject).collect();
        self.select_subjects(&keep)
    }

    /// Subjects occupying `state` just before `t` and still under observation at `t`.
    pub fn risk_set(&self, state: usize, t: f64) -> Result<RiskSet> {
        self.state_space.check_state(state)?;
        if !(t > 0.0) {
            return Err(Error::InvalidArgument(format!("risk set requires t > 0, got {t}")));
        }
        let ids: BTreeSet<String> = self
            .records
            .iter()
            .filter(|r| r.from == state && r.at_risk(t))
            .map(|r| r.subject.clone())
            .collect();
        Ok(RiskSet {
            count: ids.len(),
            ids,
        })
    }

    /// Distinct times of observed `from -> to` transitions with their multiplicities.
    pub fn event_times(&self, transition: Transition) -> Result<Vec<(f64, usize)>> {
        self.state_space.check_transition(transition)?;
        let mut times: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.transition() == Some(transition))
            .map(|r| r.tstop)
            .collect();
        times.sort_by(f64::total_cmp);
        let mut out: Vec<(f64, usize)> = Vec::new();
        for t in times {
            match out.last_mut() {
                Some((last, n)) if *last == t => *n += 1,
                _ => out.push((t, 1)),
            }
        }
        Ok(out)
    }
}
