use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EndMark, EpisodeDataset, EpisodeRecord, StateSpace};
use crate::error::{Error, Result};

/// Column mapping for counting-process input.
///
/// `state` names the column holding the state entered at `tstop` (or the
/// censor label). When `from` is absent the state occupied during each
/// interval is reconstructed: a subject's first record starts in
/// `initial_state`, later records start where the previous one ended.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeSchema {
    pub id: String,
    pub tstart: String,
    pub tstop: String,
    pub state: String,
    pub from: Option<String>,
    pub covariates: Vec<String>,
    pub censor_label: String,
    pub initial_state: Option<String>,
    pub delimiter: Option<char>,
}

impl Default for EpisodeSchema {
    fn default() -> Self {
        EpisodeSchema {
            id: "id".into(),
            tstart: "tstart".into(),
            tstop: "tstop".into(),
            state: "state".into(),
            from: None,
            covariates: Vec::new(),
            censor_label: "censor".into(),
            initial_state: None,
            delimiter: None,
        }
    }
}

pub fn load_episodes(
    path: impl AsRef<Path>,
    schema: &EpisodeSchema,
    state_space: Option<&StateSpace>,
) -> Result<EpisodeDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_episodes(BufReader::new(file), schema, state_space)
}

pub(crate) fn sniff_delimiter(text: &str, explicit: Option<char>) -> u8 {
    if let Some(c) = explicit {
        return c as u8;
    }
    let header = text.lines().next().unwrap_or("");
    if header.contains('\t') && !header.contains(',') {
        b'\t'
    } else {
        b','
    }
}

pub(crate) fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

pub(crate) fn parse_number(raw: &str, line: usize, column: &str) -> Result<f64> {
    let value = raw.trim().trim_matches('"');
    value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::NonNumericTime {
            line,
            column: column.to_string(),
            value: value.to_string(),
        })
}

struct Row {
    subject: String,
    tstart: f64,
    tstop: f64,
    from: Option<String>,
    state: String,
    covariates: Vec<f64>,
}

pub fn read_episodes(
    mut reader: impl Read,
    schema: &EpisodeSchema,
    state_space: Option<&StateSpace>,
) -> Result<EpisodeDataset> {
    let mut text = String::new();
    reader
        .read_to_string(&mut text)
        .map_err(|e| Error::io("<episode input>", e))?;
    if text.trim().is_empty() {
        return Err(Error::EmptyFile);
    }
    let mut csv = csv::ReaderBuilder::new()
        .delimiter(sniff_delimiter(&text, schema.delimiter))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = csv.headers()?.clone();
    let id_col = column(&headers, &schema.id)?;
    let start_col = column(&headers, &schema.tstart)?;
    let stop_col = column(&headers, &schema.tstop)?;
    let state_col = column(&headers, &schema.state)?;
    let from_col = schema.from.as_deref().map(|c| column(&headers, c)).transpose()?;
    let cov_cols = schema
        .covariates
        .iter()
        .map(|c| column(&headers, c))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (i, rec) in csv.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let covariates = cov_cols
            .iter()
            .zip(&schema.covariates)
            .map(|(&c, name)| parse_number(&rec[c], line, name))
            .collect::<Result<Vec<_>>>()?;
        rows.push((
            line,
            Row {
                subject: rec[id_col].to_string(),
                tstart: parse_number(&rec[start_col], line, &schema.tstart)?,
                tstop: parse_number(&rec[stop_col], line, &schema.tstop)?,
                from: from_col.map(|c| rec[c].to_string()),
                state: rec[state_col].to_string(),
                covariates,
            },
        ));
    }
    if rows.is_empty() {
        return Err(Error::EmptyFile);
    }

    let space = match state_space {
        Some(space) => space.clone(),
        None => infer_state_space(&rows, schema)?,
    };
    let lookup = |label: &str, line: usize| {
        space.index_of(label).ok_or_else(|| Error::UnknownStateLabel {
            line,
            label: label.to_string(),
        })
    };
    let initial = match &schema.initial_state {
        Some(label) => lookup(label, 1)?,
        None => 0,
    };

    // reconstruct the occupied state per subject in time order
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut first_seen: HashMap<&str, usize> = HashMap::new();
    for (_, row) in &rows {
        let n = first_seen.len();
        first_seen.entry(row.subject.as_str()).or_insert(n);
    }
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&rows[a].1, &rows[b].1);
        first_seen[ra.subject.as_str()]
            .cmp(&first_seen[rb.subject.as_str()])
            .then(ra.tstart.total_cmp(&rb.tstart))
    });

    let mut records = Vec::with_capacity(rows.len());
    let mut current: Option<(String, usize)> = None;
    for &i in &order {
        let (line, row) = &rows[i];
        let end = if row.state == schema.censor_label {
            EndMark::Censored
        } else {
            EndMark::Transition(lookup(&row.state, *line)?)
        };
        let from = match &row.from {
            Some(label) => lookup(label, *line)?,
            None => match &current {
                Some((subject, state)) if *subject == row.subject => *state,
                _ => initial,
            },
        };
        let record = EpisodeRecord {
            subject: row.subject.clone(),
            tstart: row.tstart,
            tstop: row.tstop,
            from,
            end,
            covariates: row.covariates.clone(),
        };
        current = Some((row.subject.clone(), record.end_state()));
        records.push(record);
    }
    EpisodeDataset::new(space, schema.covariates.clone(), records)
}

/// Labels in order of first appearance, allowed pairs as observed, and states
/// never left marked absorbing.
fn infer_state_space(rows: &[(usize, Row)], schema: &EpisodeSchema) -> Result<StateSpace> {
    let mut labels: Vec<String> = Vec::new();
    let intern = |label: &str, labels: &mut Vec<String>| -> usize {
        match labels.iter().position(|l| l == label) {
            Some(i) => i,
            None => {
                labels.push(label.to_string());
                labels.len() - 1
            }
        }
    };
    let initial_label = schema.initial_state.clone().unwrap_or_else(|| "initial".into());
    intern(&initial_label, &mut labels);

    let mut by_subject: Vec<(&str, f64, usize)> = rows
        .iter()
        .enumerate()
        .map(|(i, (_, r))| (r.subject.as_str(), r.tstart, i))
        .collect();
    by_subject.sort_by(|a, b| a.0.cmp(b.0).then(a.1.total_cmp(&b.1)));

    let mut pairs = std::collections::BTreeSet::new();
    let mut left = std::collections::BTreeSet::new();
    let mut prev: Option<(&str, usize)> = None;
    for &(subject, _, i) in &by_subject {
        let row = &rows[i].1;
        let from = match &row.from {
            Some(label) => intern(label, &mut labels),
            None => match prev {
                Some((s, state)) if s == subject => state,
                _ => 0,
            },
        };
        left.insert(from);
        let end = if row.state == schema.censor_label {
            from
        } else {
            let to = intern(&row.state, &mut labels);
            if to != from {
                pairs.insert((from, to));
            }
            to
        };
        prev = Some((subject, end));
    }
    let absorbing: Vec<usize> = (0..labels.len()).filter(|k| !left.contains(k)).collect();
    StateSpace::new(labels, absorbing, pairs)
}

/// Writes the dataset with an explicit `from` column, states as labels.
///
/// The output reloads with [`EpisodeSchema`] `{id, tstart, tstop, from, state}`
/// and the same state space.
pub fn write_episodes(
    dataset: &EpisodeDataset,
    writer: impl Write,
    censor_label: &str,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let mut header = vec!["id", "tstart", "tstop", "from", "state"];
    header.extend(dataset.covariate_names().iter().map(String::as_str));
    out.write_record(&header)?;
    let space = dataset.state_space();
    for r in dataset.records() {
        let mut fields = vec![
            r.subject.clone(),
            r.tstart.to_string(),
            r.tstop.to_string(),
            space.label(r.from).to_string(),
            match r.end {
                EndMark::Transition(to) => space.label(to).to_string(),
                EndMark::Censored => censor_label.to_string(),
            },
        ];
        fields.extend(r.covariates.iter().map(f64::to_string));
        out.write_record(&fields)?;
    }
    out.flush().map_err(|e| Error::io("<episode output>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate;

    fn schema() -> EpisodeSchema {
        EpisodeSchema {
            id: "id".into(),
            tstart: "time1".into(),
            tstop: "time2".into(),
            state: "state".into(),
            covariates: vec!["trt".into()],
            initial_state: Some("entry".into()),
            ..Default::default()
        }
    }

    fn colon_space() -> StateSpace {
        StateSpace::illness_death([
            "entry",
            "recur",
            "death pre-recurrence",
            "death post-recurrence",
        ])
    }

    #[test]
    fn colon_rows_map_to_records() {
        let text = "id,time1,time2,state,trt\n\
                    1,0.000000,2.650240,recur,1\n\
                    1,2.650240,4.164271,death post-recurrence,1\n\
                    2,0.000000,8.451745,censor,1\n";
        let d = read_episodes(text.as_bytes(), &schema(), Some(&colon_space())).unwrap();
        let first = &d.records()[0];
        assert_eq!((first.from, first.end), (0, EndMark::Transition(1)));
        assert_eq!(first.tstop, 2.650240);
        assert_eq!(d.records()[1].from, 1);
        assert_eq!(d.records()[1].end, EndMark::Transition(3));
        assert_eq!(d.records()[2].end, EndMark::Censored);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(
            read_episodes("".as_bytes(), &schema(), None),
            Err(Error::EmptyFile)
        ));
        assert!(matches!(
            read_episodes("id,time1,time2,state,trt\n".as_bytes(), &schema(), None),
            Err(Error::EmptyFile)
        ));
    }

    #[test]
    fn structured_parse_errors() {
        let missing = "id,time1,state,trt\n1,0,recur,1\n";
        assert!(matches!(
            read_episodes(missing.as_bytes(), &schema(), None),
            Err(Error::MissingColumn(c)) if c == "time2"
        ));
        let bad_time = "id,time1,time2,state,trt\n1,0,soon,recur,1\n";
        assert!(matches!(
            read_episodes(bad_time.as_bytes(), &schema(), None),
            Err(Error::NonNumericTime { line: 2, .. })
        ));
        let bad_label = "id,time1,time2,state,trt\n1,0,1,relapse,1\n";
        assert!(matches!(
            read_episodes(bad_label.as_bytes(), &schema(), Some(&colon_space())),
            Err(Error::UnknownStateLabel { line: 2, .. })
        ));
    }

    #[test]
    fn gap_loads_and_is_reported() {
        let text = "id\ttime1\ttime2\tstate\ttrt\n\
                    1\t0\t2\tcensor\t0\n\
                    1\t3\t4\trecur\t0\n\
                    1\t4\t5\tdeath post-recurrence\t0\n";
        let d = read_episodes(text.as_bytes(), &schema(), Some(&colon_space())).unwrap();
        let report = validate(&d);
        assert_eq!(report.warnings.len(), 1);
        assert_eq!(report.warnings[0].kind, crate::data::FindingKind::Gap);
    }

    #[test]
    fn infers_state_space() {
        let text = "id,time1,time2,state,trt\n\
                    1,0,1,ill,0\n\
                    1,1,2,dead,0\n\
                    2,0,3,censor,1\n";
        let d = read_episodes(text.as_bytes(), &schema(), None).unwrap();
        let space = d.state_space();
        assert_eq!(space.labels(), ["entry", "ill", "dead"]);
        assert!(space.is_allowed(0, 1) && space.is_allowed(1, 2));
        assert!(space.is_absorbing(2));
    }

    #[test]
    fn write_then_reload_is_identity() {
        let text = "id,time1,time2,state,trt\n\
                    1,0,0.1,recur,1\n\
                    1,0.1,0.30000000000000004,death post-recurrence,1\n\
                    2,0.5,8.451745,censor,0\n";
        let d = read_episodes(text.as_bytes(), &schema(), Some(&colon_space())).unwrap();
        let mut buf = Vec::new();
        write_episodes(&d, &mut buf, "censor").unwrap();
        let reload_schema = EpisodeSchema {
            tstart: "tstart".into(),
            tstop: "tstop".into(),
            from: Some("from".into()),
            ..schema()
        };
        let back = read_episodes(buf.as_slice(), &reload_schema, Some(&colon_space())).unwrap();
        assert_eq!(back, d);
    }
}
