use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{column, parse_number, sniff_delimiter};
use super::StateSpace;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSubject {
    pub id: String,
    pub covariates: Vec<f64>,
    /// `(visit time, state index)` with strictly increasing times.
    pub observations: Vec<(f64, usize)>,
}

/// States recorded only at visit times, with baseline covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    state_space: StateSpace,
    covariate_names: Vec<String>,
    subjects: Vec<PanelSubject>,
}

impl PanelDataset {
    /// Checks visit ordering and that nothing is observed after an absorbing
    /// state. Pairs that the model cannot produce are reported by the
    /// likelihood, which knows the fitted transition structure.
    pub fn new(
        state_space: StateSpace,
        covariate_names: Vec<String>,
        subjects: Vec<PanelSubject>,
    ) -> Result<Self> {
        for s in &subjects {
            if s.covariates.len() != covariate_names.len() {
                return Err(Error::InvalidPanel(format!(
                    "subject {}: {} covariates, expected {}",
                    s.id,
                    s.covariates.len(),
                    covariate_names.len()
                )));
            }
            if s.covariates.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidPanel(format!("subject {}: non-finite covariate", s.id)));
            }
            for (i, &(t, state)) in s.observations.iter().enumerate() {
                state_space.check_state(state)?;
                if !t.is_finite() {
                    return Err(Error::InvalidPanel(format!("subject {}: non-finite time", s.id)));
                }
                if i > 0 {
                    let (prev_t, prev_state) = s.observations[i - 1];
                    if t <= prev_t {
                        return Err(Error::InvalidPanel(format!(
                            "subject {}: visit times not strictly increasing at {t}",
                            s.id
                        )));
                    }
                    if state_space.is_absorbing(prev_state) {
                        return Err(Error::InvalidPanel(format!(
                            "subject {}: observation at {t} after absorbing state {prev_state}",
                            s.id
                        )));
                    }
                }
            }
        }
        Ok(PanelDataset {
            state_space,
            covariate_names,
            subjects,
        })
    }

    pub fn state_space(&self) -> &StateSpace {
        &self.state_space
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn subjects(&self) -> &[PanelSubject] {
        &self.subjects
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownCovariate(name.to_string()))
    }

    /// Number of consecutive observation pairs.
    pub fn n_pairs(&self) -> usize {
        self.subjects
            .iter()
            .map(|s| s.observations.len().saturating_sub(1))
            .sum()
    }
}

/// Column mapping for panel input. Covariates are taken from each subject's
/// first visit.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PanelSchema {
    pub id: String,
    pub time: String,
    pub state: String,
    pub covariates: Vec<String>,
    pub delimiter: Option<char>,
}

impl Default for PanelSchema {
    fn default() -> Self {
        PanelSchema {
            id: "id".into(),
            time: "time".into(),
            state: "state".into(),
            covariates: Vec::new(),
            delimiter: None,
        }
    }
}

pub fn load_panel(
    path: impl AsRef<Path>,
    schema: &PanelSchema,
    state_space: &StateSpace,
) -> Result<PanelDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_panel(BufReader::new(file), schema, state_space)
}

/// State values are matched against the state-space labels.
pub fn read_panel(
    mut reader: impl Read,
    schema: &PanelSchema,
    state_space: &StateSpace,
) -> Result<PanelDataset> {
    let mut text = String::new();
    reader
        .read_to_string(&mut text)
        .map_err(|e| Error::io("<panel input>", e))?;
    if text.trim().is_empty() {
        return Err(Error::EmptyFile);
    }
    let mut csv = csv::ReaderBuilder::new()
        .delimiter(sniff_delimiter(&text, schema.delimiter))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = csv.headers()?.clone();
    let id_col = column(&headers, &schema.id)?;
    let time_col = column(&headers, &schema.time)?;
    let state_col = column(&headers, &schema.state)?;
    let cov_cols = schema
        .covariates
        .iter()
        .map(|c| column(&headers, c))
        .collect::<Result<Vec<_>>>()?;

    let mut subjects: Vec<PanelSubject> = Vec::new();
    for (i, rec) in csv.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let id = rec[id_col].to_string();
        let time = parse_number(&rec[time_col], line, &schema.time)?;
        let label = rec[state_col].trim_matches('"');
        let state = state_space
            .index_of(label)
            .ok_or_else(|| Error::UnknownStateLabel {
                line,
                label: label.to_string(),
            })?;
        match subjects.iter_mut().rev().find(|s| s.id == id) {
            Some(s) => s.observations.push((time, state)),
            None => {
                let covariates = cov_cols
                    .iter()
                    .zip(&schema.covariates)
                    .map(|(&c, name)| parse_number(&rec[c], line, name))
                    .collect::<Result<Vec<_>>>()?;
                subjects.push(PanelSubject {
                    id,
                    covariates,
                    observations: vec![(time, state)],
                });
            }
        }
    }
    if subjects.is_empty() {
        return Err(Error::EmptyFile);
    }
    for s in &mut subjects {
        s.observations.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    PanelDataset::new(state_space.clone(), schema.covariates.clone(), subjects)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_panel_with_baseline_covariates() {
        let space = StateSpace::progressive(3).unwrap();
        let text = "id,time,state,x\na,0,0,1\na,1.5,1,0\nb,0,0,0\na,3,2,0\n";
        let schema = PanelSchema {
            covariates: vec!["x".into()],
            ..Default::default()
        };
        let d = read_panel(text.as_bytes(), &schema, &space).unwrap();
        assert_eq!(d.subjects().len(), 2);
        assert_eq!(d.subjects()[0].covariates, vec![1.0]);
        assert_eq!(d.subjects()[0].observations, vec![(0.0, 0), (1.5, 1), (3.0, 2)]);
        assert_eq!(d.n_pairs(), 2);
    }

    #[test]
    fn rejects_unordered_and_post_absorbing_visits() {
        let space = StateSpace::two_state();
        let subject = |obs: Vec<(f64, usize)>| PanelSubject {
            id: "s".into(),
            covariates: vec![],
            observations: obs,
        };
        assert!(PanelDataset::new(space.clone(), vec![], vec![subject(vec![(1.0, 0), (1.0, 0)])]).is_err());
        assert!(PanelDataset::new(space.clone(), vec![], vec![subject(vec![(0.0, 1), (1.0, 1)])]).is_err());
        assert!(PanelDataset::new(space, vec![], vec![subject(vec![(0.0, 0), (1.0, 1)])]).is_ok());
    }
}
