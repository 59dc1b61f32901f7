use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{EndMark, EpisodeDataset, Transition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    /// Next record starts after the previous one stopped.
    Gap,
    /// Next record starts in a different state than the previous one ended in.
    Teleport,
    ZeroLength,
    /// Two records of a subject cover the same interval.
    Duplicate,
    Overlap,
    /// Records continue after the subject entered an absorbing state.
    AfterAbsorbing,
    /// Two transitions recorded at the same instant.
    SimultaneousJumps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub subject: String,
    pub time: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionCount {
    pub from: usize,
    pub to: usize,
    pub from_label: String,
    pub to_label: String,
    pub count: usize,
}

/// Tallies and consistency findings for an episode dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub transition_counts: Vec<TransitionCount>,
    pub censor_count: usize,
    pub subject_count: usize,
    pub record_count: usize,
    pub warnings: Vec<Finding>,
}

impl ValidationReport {
    pub fn count(&self, from: usize, to: usize) -> usize {
        self.transition_counts
            .iter()
            .find(|c| c.from == from && c.to == to)
            .map_or(0, |c| c.count)
    }

    pub fn is_clean(&self) -> bool {
        self.warnings.is_empty()
    }
}

/// Counts transitions and censorings and reports every structural problem.
/// Nothing is repaired.
pub fn validate(dataset: &EpisodeDataset) -> ValidationReport {
    let space = dataset.state_space();
    let mut counts: BTreeMap<Transition, usize> = BTreeMap::new();
    let mut censor_count = 0;
    let mut warnings = Vec::new();

    for r in dataset.records() {
        match r.transition() {
            Some(tr) => *counts.entry(tr).or_default() += 1,
            None => censor_count += 1,
        }
        if r.tstart == r.tstop {
            warnings.push(Finding {
                kind: FindingKind::ZeroLength,
                subject: r.subject.clone(),
                time: r.tstart,
                detail: format!("interval ({}, {}] has zero length", r.tstart, r.tstop),
            });
        }
    }

    for span in dataset.subjects() {
        let recs = &dataset.records()[span.records.clone()];
        for pair in recs.windows(2) {
            let (prev, next) = (&pair[0], &pair[1]);
            let mut push = |kind, time, detail: String| {
                warnings.push(Finding {
                    kind,
                    subject: span.id.clone(),
                    time,
                    detail,
                })
            };
            if space.is_absorbing(prev.end_state()) {
                push(
                    FindingKind::AfterAbsorbing,
                    next.tstart,
                    format!("record after entering absorbing state {}", prev.end_state()),
                );
                continue;
            }
            if prev.tstart == next.tstart && prev.tstop == next.tstop {
                push(
                    FindingKind::Duplicate,
                    next.tstart,
                    format!("interval ({}, {}] recorded twice", next.tstart, next.tstop),
                );
                continue;
            }
            if next.tstart < prev.tstop {
                push(
                    FindingKind::Overlap,
                    next.tstart,
                    format!("starts at {} before previous stop {}", next.tstart, prev.tstop),
                );
            } else if next.tstart > prev.tstop {
                push(
                    FindingKind::Gap,
                    prev.tstop,
                    format!("unobserved interval ({}, {})", prev.tstop, next.tstart),
                );
            }
            if next.from != prev.end_state() {
                push(
                    FindingKind::Teleport,
                    next.tstart,
                    format!("previous record ended in {}, next starts in {}", prev.end_state(), next.from),
                );
            }
            if matches!(prev.end, EndMark::Transition(_))
                && matches!(next.end, EndMark::Transition(_))
                && next.tstop == prev.tstop
            {
                push(
                    FindingKind::SimultaneousJumps,
                    prev.tstop,
                    "two transitions at the same time".into(),
                );
            }
        }
    }

    let transition_counts = counts
        .into_iter()
        .map(|(tr, count)| TransitionCount {
            from: tr.from,
            to: tr.to,
            from_label: space.label(tr.from).to_string(),
            to_label: space.label(tr.to).to_string(),
            count,
        })
        .collect();

    ValidationReport {
        transition_counts,
        censor_count,
        subject_count: dataset.n_subjects(),
        record_count: dataset.records().len(),
        warnings,
    }
}
