//! Ingestion recipes for the public example datasets.
//!
//! Each recipe reads the table as exported from its R package (see
//! `scripts/export_datasets.py`) and performs the documented preprocessing.
//! Nothing here is applied implicitly by the generic loaders.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use super::io::{column, parse_number, sniff_delimiter};
use super::{EndMark, EpisodeDataset, EpisodeRecord, PanelDataset, PanelSubject, StateSpace};
use crate::error::{Error, Result};
use crate::frailty::{IllnessDeathData, IllnessDeathRecord};

struct Table {
    headers: csv::StringRecord,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let mut text = String::new();
        BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
            .read_to_string(&mut text)
            .map_err(|e| Error::io(path, e))?;
        if text.trim().is_empty() {
            return Err(Error::EmptyFile);
        }
        let mut csv = csv::ReaderBuilder::new()
            .delimiter(sniff_delimiter(&text, None))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = csv.headers()?.clone();
        let rows = csv.records().collect::<std::result::Result<Vec<_>, _>>()?;
        if rows.is_empty() {
            return Err(Error::EmptyFile);
        }
        Ok(Table { headers, rows })
    }

    fn numeric(&self, name: &str) -> Result<Vec<f64>> {
        let c = column(&self.headers, name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| parse_number(&r[c], i + 2, name))
            .collect()
    }

    fn text(&self, name: &str) -> Result<Vec<String>> {
        let c = column(&self.headers, name)?;
        Ok(self.rows.iter().map(|r| r[c].trim_matches('"').to_string()).collect())
    }
}

/// Options for [`colon`].
#[derive(Debug, Clone, Copy)]
pub struct ColonOptions {
    /// Move a recurrence recorded on the day of death one day earlier so the
    /// post-recurrence interval has positive length (5 subjects).
    pub shift_same_day_recurrence: bool,
    /// Divisor converting days into the analysis time unit.
    pub days_per_unit: f64,
}

impl Default for ColonOptions {
    fn default() -> Self {
        ColonOptions {
            shift_same_day_recurrence: true,
            days_per_unit: 365.25,
        }
    }
}

pub const COLON_STATES: [&str; 4] = [
    "entry",
    "recur",
    "death pre-recurrence",
    "death post-recurrence",
];

/// Colon-cancer adjuvant trial (`survival::colon`) in illness-death form.
///
/// The raw table has two rows per patient (`etype` 1 = recurrence, 2 =
/// death). Covariates: `trt` (Lev+5FU vs. observation or levamisole alone),
/// `extent34` (invasion through serosa or into contiguous structures),
/// `node4` (more than four positive nodes), `sex`, `age`.
///
/// A recurrence at the last follow-up time without death yields a single
/// record ending in `recur`.
pub fn colon(path: impl AsRef<Path>, options: ColonOptions) -> Result<EpisodeDataset> {
    let table = Table::read(path.as_ref())?;
    let id = table.text("id")?;
    let etype = table.numeric("etype")?;
    let status = table.numeric("status")?;
    let time = table.numeric("time")?;
    let rx = table.text("rx")?;
    let extent = table.numeric("extent")?;
    let node4 = table.numeric("node4")?;
    let sex = table.numeric("sex")?;
    let age = table.numeric("age")?;

    #[derive(Default)]
    struct Patient {
        first_row: usize,
        recurrence: Option<(f64, bool)>,
        death: Option<(f64, bool)>,
    }
    let mut patients: BTreeMap<usize, (String, Patient)> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for i in 0..table.rows.len() {
        let key = match order.iter().position(|s| *s == id[i]) {
            Some(k) => k,
            None => {
                order.push(id[i].clone());
                order.len() - 1
            }
        };
        let entry = patients.entry(key).or_insert_with(|| {
            (
                id[i].clone(),
                Patient {
                    first_row: i,
                    ..Default::default()
                },
            )
        });
        let event = (time[i], status[i] == 1.0);
        match etype[i] as i64 {
            1 => entry.1.recurrence = Some(event),
            2 => entry.1.death = Some(event),
            other => {
                return Err(Error::InvalidRecord {
                    subject: id[i].clone(),
                    reason: format!("etype {other}"),
                })
            }
        }
    }

    let names = ["trt", "extent34", "node4", "sex", "age"];
    let mut records = Vec::new();
    for (_, (subject, p)) in patients {
        let (Some((mut rec_t, recurred)), Some((death_t, died))) = (p.recurrence, p.death) else {
            return Err(Error::InvalidRecord {
                subject,
                reason: "needs one recurrence row and one death row".into(),
            });
        };
        if options.shift_same_day_recurrence && recurred && died && rec_t == death_t {
            rec_t -= 1.0;
        }
        let i = p.first_row;
        let covariates = vec![
            f64::from(u8::from(rx[i] == "Lev+5FU")),
            f64::from(u8::from(extent[i] >= 3.0)),
            node4[i],
            sex[i],
            age[i],
        ];
        let scale = options.days_per_unit;
        let record = |tstart: f64, tstop: f64, from: usize, end: EndMark| EpisodeRecord {
            subject: subject.clone(),
            tstart: tstart / scale,
            tstop: tstop / scale,
            from,
            end,
            covariates: covariates.clone(),
        };
        if recurred && rec_t > 0.0 && rec_t <= death_t {
            records.push(record(0.0, rec_t, 0, EndMark::Transition(1)));
            if rec_t < death_t {
                let end = if died { EndMark::Transition(3) } else { EndMark::Censored };
                records.push(record(rec_t, death_t, 1, end));
            }
        } else {
            let end = if died { EndMark::Transition(2) } else { EndMark::Censored };
            records.push(record(0.0, death_t, 0, end));
        }
    }
    EpisodeDataset::new(
        StateSpace::illness_death(COLON_STATES),
        names.iter().map(|s| s.to_string()).collect(),
        records,
    )
}

/// Joint-damage panel from the Toronto psoriatic arthritis cohort (`msm::psor`).
///
/// States 1..4 become 0..3 (0, 1-4, 5-9, 10+ damaged joints; the last is
/// absorbing). Time is `months`, which holds years since diagnosis despite the
/// column name. Covariates are first-visit values: `effusion` (`hieffusn`)
/// and `elevated_esr`, the recoded `1 - ollwsdrt`.
pub fn psoriatic(path: impl AsRef<Path>) -> Result<PanelDataset> {
    let table = Table::read(path.as_ref())?;
    let id = table.text("ptnum")?;
    let time = table.numeric("months")?;
    let state = table.numeric("state")?;
    let effusion = table.numeric("hieffusn")?;
    let low_esr = table.numeric("ollwsdrt")?;

    let space = psoriatic_state_space();
    let mut subjects: Vec<(PanelSubject, f64)> = Vec::new();
    for i in 0..table.rows.len() {
        let s = state[i] as i64;
        if !(1..=4).contains(&s) || state[i].fract() != 0.0 {
            return Err(Error::UnknownStateLabel {
                line: i + 2,
                label: state[i].to_string(),
            });
        }
        let covariates = vec![effusion[i], 1.0 - low_esr[i]];
        match subjects.iter_mut().rev().find(|(subj, _)| subj.id == id[i]) {
            Some((subj, first_time)) => {
                if time[i] < *first_time {
                    *first_time = time[i];
                    subj.covariates = covariates;
                }
                subj.observations.push((time[i], s as usize - 1));
            }
            None => subjects.push((
                PanelSubject {
                    id: id[i].clone(),
                    covariates,
                    observations: vec![(time[i], s as usize - 1)],
                },
                time[i],
            )),
        }
    }
    let subjects = subjects
        .into_iter()
        .map(|(mut s, _)| {
            s.observations.sort_by(|a, b| a.0.total_cmp(&b.0));
            s
        })
        .collect();
    PanelDataset::new(space, vec!["effusion".into(), "elevated_esr".into()], subjects)
}

pub fn psoriatic_state_space() -> StateSpace {
    StateSpace::new(
        vec!["0".into(), "1-4".into(), "5-9".into(), "10+".into()],
        [3],
        [(0, 1), (1, 2), (2, 3)],
    )
    .expect("valid")
}

/// Rotterdam tumour bank (`survival::rotterdam`), node-positive patients only.
///
/// Times are years since surgery. A relapse recorded on the day of death has
/// death moved half a day later. Patients without recorded relapse have
/// `w1` at death or last follow-up. Covariates: `age10`, `meno`, `size20_50`,
/// `size50`, `log_nodes`, `log_er`, `log_pgr` (the receptor logs are
/// `log(1 + x)`), `hormon`, `chemo`, `grade3`.
pub fn rotterdam(path: impl AsRef<Path>) -> Result<IllnessDeathData> {
    let table = Table::read(path.as_ref())?;
    let id = table.text("pid")?;
    let age = table.numeric("age")?;
    let meno = table.numeric("meno")?;
    let size = table.text("size")?;
    let grade = table.numeric("grade")?;
    let nodes = table.numeric("nodes")?;
    let pgr = table.numeric("pgr")?;
    let er = table.numeric("er")?;
    let hormon = table.numeric("hormon")?;
    let chemo = table.numeric("chemo")?;
    let rtime = table.numeric("rtime")?;
    let recur = table.numeric("recur")?;
    let dtime = table.numeric("dtime")?;
    let death = table.numeric("death")?;

    let mut records = Vec::new();
    for i in 0..table.rows.len() {
        if nodes[i] <= 0.0 {
            continue;
        }
        let covariates = vec![
            age[i] / 10.0,
            meno[i],
            f64::from(u8::from(size[i] == "20-50")),
            f64::from(u8::from(size[i] == ">50")),
            nodes[i].ln(),
            er[i].ln_1p(),
            pgr[i].ln_1p(),
            hormon[i],
            chemo[i],
            f64::from(u8::from(grade[i] == 3.0)),
        ];
        let days = 365.25;
        let relapsed = recur[i] == 1.0;
        let died = death[i] == 1.0;
        let record = if relapsed {
            let mut d = dtime[i];
            if d == rtime[i] {
                d += 0.5;
            }
            IllnessDeathRecord {
                id: id[i].clone(),
                w1: rtime[i] / days,
                w2: d / days,
                delta1: true,
                delta2: false,
                delta3: died,
                covariates,
            }
        } else {
            IllnessDeathRecord {
                id: id[i].clone(),
                w1: dtime[i] / days,
                w2: 0.0,
                delta1: false,
                delta2: died,
                delta3: false,
                covariates,
            }
        };
        records.push(record);
    }
    IllnessDeathData::new(
        [
            "age10", "meno", "size20_50", "size50", "log_nodes", "log_er", "log_pgr", "hormon",
            "chemo", "grade3",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        records,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate;
    use std::io::Write;

    #[test]
    fn colon_recipe_builds_illness_death_records() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            f,
            "id,study,rx,sex,age,obstruct,perfor,adhere,nodes,status,differ,extent,surg,node4,time,etype\n\
             1,1,Lev+5FU,1,43,0,0,0,5,1,2,3,0,1,1521,2\n\
             1,1,Lev+5FU,1,43,0,0,0,5,1,2,3,0,1,968,1\n\
             2,1,Obs,0,63,0,0,0,1,0,2,2,0,0,3087,2\n\
             2,1,Obs,0,63,0,0,0,1,0,2,2,0,0,3087,1\n\
             3,1,Lev,0,71,0,0,0,7,1,2,3,0,1,500,2\n\
             3,1,Lev,0,71,0,0,0,7,1,2,3,0,1,500,1\n\
             4,1,Lev,0,60,0,0,0,2,0,NA,4,0,0,700,2\n\
             4,1,Lev,0,60,0,0,0,2,1,NA,4,0,0,700,1"
        )
        .unwrap();
        let d = colon(f.path(), ColonOptions::default()).unwrap();
        let r = validate(&d);
        assert!(r.is_clean(), "{:?}", r.warnings);
        assert_eq!(r.count(0, 1), 3);
        assert_eq!(r.count(1, 3), 2);
        assert_eq!(r.censor_count, 1);
        // same-day recurrence moved one day earlier
        let third = d.subject_records(2);
        assert!((third[0].tstop - 499.0 / 365.25).abs() < 1e-15);
        // recurrence at last follow-up: one record, no censoring row
        assert_eq!(d.subject_records(3).len(), 1);
        assert_eq!(d.records()[0].tstop, 968.0 / 365.25);
        assert_eq!(d.subject_records(0)[0].covariates, vec![1.0, 1.0, 1.0, 1.0, 43.0]);
        assert_eq!(d.subject_records(3)[0].covariates[1], 1.0);
    }
}
