//! LADH-lite on-disk layout and the subject-wise / day-wise split protocols.
//!
//! ```text
//! root/<subject>/day<NN>/<scenario>/
//!     rgb.tnsr  ir.tnsr  rgb_clock.csv  ir_clock.csv  ppg.csv  rr.csv  spo2.csv
//! ```
//!
//! Clock CSVs use the series format with the frame index as the value.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{self, DataError};
use crate::timeline::Recording;

pub const SESSION_FILES: [&str; 7] = [
    "rgb.tnsr",
    "ir.tnsr",
    "rgb_clock.csv",
    "ir_clock.csv",
    "ppg.csv",
    "rr.csv",
    "spo2.csv",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset root {path}: {source}")]
    Root {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("need at least {needed} distinct subjects, found {found}")]
    TooFewSubjects { needed: usize, found: usize },
    #[error("need at least {needed} distinct days, found {found}")]
    TooFewDays { needed: usize, found: usize },
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("unknown split mode `{0}` (expected `subject` or `day`)")]
    UnknownSplitMode(String),
}

/// The five recording states of the collection protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scenario {
    SitRest,
    SitCare,
    StandRest,
    StandCare,
    PostExercise,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::SitRest,
        Scenario::SitCare,
        Scenario::StandRest,
        Scenario::StandCare,
        Scenario::PostExercise,
    ];

    pub fn dir_name(self) -> &'static str {
        match self {
            Scenario::SitRest => "sit_rest",
            Scenario::SitCare => "sit_care",
            Scenario::StandRest => "stand_rest",
            Scenario::StandCare => "stand_care",
            Scenario::PostExercise => "post_exercise",
        }
    }

    /// 1-based state number.
    pub fn state(self) -> u8 {
        self as u8 + 1
    }

    pub fn is_care(self) -> bool {
        matches!(self, Scenario::SitCare | Scenario::StandCare)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Scenario {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.dir_name() == s || format!("state{}", sc.state()) == s)
            .ok_or_else(|| DatasetError::UnknownScenario(s.to_string()))
    }
}

pub fn day_dir_name(day: u32) -> String {
    format!("day{day:02}")
}

fn parse_day(name: &str) -> Option<u32> {
    let digits = name.strip_prefix("day").unwrap_or(name);
    digits.parse().ok().filter(|&d| d >= 1)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SessionMeta {
    pub subject_id: String,
    pub day_index: u32,
    pub scenario: Scenario,
    pub path: PathBuf,
}

impl SessionMeta {
    /// Stable identifier `<subject>/day<NN>/<scenario>`.
    pub fn key(&self) -> String {
        format!("{}/{}/{}", self.subject_id, day_dir_name(self.day_index), self.scenario)
    }

    pub fn load(&self) -> Result<Recording, DatasetError> {
        load_recording(&self.path)
    }
}

/// Directory left out of a scan because a required file is missing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skip {
    pub path: PathBuf,
    pub missing: String,
}

impl fmt::Display for Skip {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SKIP {} {}", self.path.display(), self.missing)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScanReport {
    pub sessions: Vec<SessionMeta>,
    pub skipped: Vec<Skip>,
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<(String, PathBuf)>, std::io::Error> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            if let Some(name) = entry.file_name().to_str() {
                out.push((name.to_string(), entry.path()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Finds every complete session directory under `root`. Incomplete ones land in `skipped`.
pub fn scan_dataset(root: impl AsRef<Path>) -> Result<ScanReport, DatasetError> {
    let root = root.as_ref();
    let subjects = sorted_subdirs(root).map_err(|source| DatasetError::Root {
        path: root.to_path_buf(),
        source,
    })?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DatasetError::Io { path, source }
    };
    let mut report = ScanReport::default();
    for (subject, sdir) in subjects {
        for (day_name, ddir) in sorted_subdirs(&sdir).map_err(io(&sdir))? {
            let Some(day_index) = parse_day(&day_name) else {
                continue;
            };
            for (sc_name, path) in sorted_subdirs(&ddir).map_err(io(&ddir))? {
                let Ok(scenario) = sc_name.parse::<Scenario>() else {
                    continue;
                };
                match SESSION_FILES.iter().find(|f| !path.join(f).is_file()) {
                    Some(missing) => report.skipped.push(Skip {
                        path,
                        missing: missing.to_string(),
                    }),
                    None => report.sessions.push(SessionMeta {
                        subject_id: subject.clone(),
                        day_index,
                        scenario,
                        path,
                    }),
                }
            }
        }
    }
    report.sessions.sort();
    Ok(report)
}

fn read_clock(path: &Path) -> Result<Vec<i64>, DataError> {
    Ok(dataio::read_series_csv(path)?.timestamps_ms().to_vec())
}

/// Loads the raw streams of one session directory.
pub fn load_recording(dir: impl AsRef<Path>) -> Result<Recording, DatasetError> {
    let dir = dir.as_ref();
    Ok(Recording {
        rgb: dataio::read_tensor(dir.join("rgb.tnsr"))?,
        ir: dataio::read_tensor(dir.join("ir.tnsr"))?,
        rgb_clock_ms: read_clock(&dir.join("rgb_clock.csv"))?,
        ir_clock_ms: read_clock(&dir.join("ir_clock.csv"))?,
        ppg: dataio::read_series_csv(dir.join("ppg.csv"))?,
        rr: dataio::read_series_csv(dir.join("rr.csv"))?,
        spo2: dataio::read_series_csv(dir.join("spo2.csv"))?,
    })
}

/// Writes a recording in the session layout, creating `dir` if needed.
pub fn write_recording(dir: impl AsRef<Path>, rec: &Recording) -> Result<(), DatasetError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    dataio::write_tensor(dir.join("rgb.tnsr"), &rec.rgb)?;
    dataio::write_tensor(dir.join("ir.tnsr"), &rec.ir)?;
    let idx = |n: usize| (0..n).map(|i| i as f64).collect::<Vec<_>>();
    dataio::write_csv_raw(dir.join("rgb_clock.csv"), &rec.rgb_clock_ms, &idx(rec.rgb_clock_ms.len()))?;
    dataio::write_csv_raw(dir.join("ir_clock.csv"), &rec.ir_clock_ms, &idx(rec.ir_clock_ms.len()))?;
    dataio::write_series_csv(dir.join("ppg.csv"), &rec.ppg)?;
    dataio::write_series_csv(dir.join("rr.csv"), &rec.rr)?;
    dataio::write_series_csv(dir.join("spo2.csv"), &rec.spo2)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    #[serde(rename = "subject")]
    SubjectWise,
    #[serde(rename = "day")]
    DayWise,
}

impl FromStr for SplitMode {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "subject" | "subject-wise" => Ok(SplitMode::SubjectWise),
            "day" | "day-wise" => Ok(SplitMode::DayWise),
            _ => Err(DatasetError::UnknownSplitMode(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Partition::Train),
            "val" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            _ => Err(format!("unknown partition `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub train: Vec<SessionMeta>,
    pub val: Vec<SessionMeta>,
    pub test: Vec<SessionMeta>,
    pub mode: SplitMode,
}

impl SplitPlan {
    pub fn partition(&self, p: Partition) -> &[SessionMeta] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }
}

fn distinct_subjects(sessions: &[SessionMeta]) -> Vec<String> {
    sessions
        .iter()
        .map(|s| s.subject_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn route<K: Ord>(
    sessions: &[SessionMeta],
    key: impl Fn(&SessionMeta) -> K,
    assign: &BTreeMap<K, Partition>,
    mode: SplitMode,
) -> SplitPlan {
    let mut plan = SplitPlan {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        mode,
    };
    for s in sessions {
        let bucket = match assign[&key(s)] {
            Partition::Train => &mut plan.train,
            Partition::Val => &mut plan.val,
            Partition::Test => &mut plan.test,
        };
        bucket.push(s.clone());
    }
    plan
}

/// Shuffles subjects with `seed`; the first `train_subjects` train, the next `val_subjects`
/// validate, the rest test. All sessions of a subject stay together.
pub fn split_subject_wise(
    sessions: &[SessionMeta],
    train_subjects: usize,
    val_subjects: usize,
    seed: u64,
) -> Result<SplitPlan, DatasetError> {
    let mut subjects = distinct_subjects(sessions);
    let needed = train_subjects + val_subjects;
    if subjects.len() < needed {
        return Err(DatasetError::TooFewSubjects {
            needed,
            found: subjects.len(),
        });
    }
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assign: BTreeMap<String, Partition> = subjects
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let p = if i < train_subjects {
                Partition::Train
            } else if i < needed {
                Partition::Val
            } else {
                Partition::Test
            };
            (s, p)
        })
        .collect();
    Ok(route(sessions, |s| s.subject_id.clone(), &assign, SplitMode::SubjectWise))
}

/// Chronological split: earliest `train_days` train, next `val_days` validate, later days test.
pub fn split_day_wise(
    sessions: &[SessionMeta],
    train_days: usize,
    val_days: usize,
) -> Result<SplitPlan, DatasetError> {
    let days: BTreeSet<u32> = sessions.iter().map(|s| s.day_index).collect();
    let needed = train_days + val_days + 1;
    if days.len() < needed {
        return Err(DatasetError::TooFewDays {
            needed,
            found: days.len(),
        });
    }
    let assign: BTreeMap<u32, Partition> = days
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            let p = if i < train_days {
                Partition::Train
            } else if i < train_days + val_days {
                Partition::Val
            } else {
                Partition::Test
            };
            (d, p)
        })
        .collect();
    Ok(route(sessions, |s| s.day_index, &assign, SplitMode::DayWise))
}

/// Sessions of one subject only, for per-subject day-wise runs.
pub fn filter_subject(sessions: &[SessionMeta], subject: &str) -> Vec<SessionMeta> {
    sessions.iter().filter(|s| s.subject_id == subject).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(subject: &str, day: u32, sc: Scenario) -> SessionMeta {
        SessionMeta {
            subject_id: subject.into(),
            day_index: day,
            scenario: sc,
            path: PathBuf::from(format!("{subject}/{day}/{sc}")),
        }
    }

    fn grid(subjects: usize, days: u32) -> Vec<SessionMeta> {
        let mut v = Vec::new();
        for s in 0..subjects {
            for d in 1..=days {
                for sc in Scenario::ALL {
                    v.push(meta(&format!("S{s:02}"), d, sc));
                }
            }
        }
        v
    }

    fn subjects_of(v: &[SessionMeta]) -> BTreeSet<String> {
        v.iter().map(|s| s.subject_id.clone()).collect()
    }

    #[test]
    fn scenario_names_round_trip() {
        for sc in Scenario::ALL {
            assert_eq!(sc.dir_name().parse::<Scenario>().unwrap(), sc);
            assert_eq!(format!("state{}", sc.state()).parse::<Scenario>().unwrap(), sc);
        }
        assert!("brushing".parse::<Scenario>().is_err());
    }

    #[test]
    fn twenty_one_subjects_leave_ten_for_test() {
        let plan = split_subject_wise(&grid(21, 1), 8, 3, 7).unwrap();
        assert_eq!(subjects_of(&plan.train).len(), 8);
        assert_eq!(subjects_of(&plan.val).len(), 3);
        assert_eq!(subjects_of(&plan.test).len(), 10);
    }

    #[test]
    fn subject_split_is_deterministic() {
        let s = grid(12, 2);
        assert_eq!(split_subject_wise(&s, 8, 2, 3).unwrap(), split_subject_wise(&s, 8, 2, 3).unwrap());
    }

    #[test]
    fn subject_split_too_few() {
        assert!(matches!(
            split_subject_wise(&grid(5, 1), 8, 3, 0),
            Err(DatasetError::TooFewSubjects { needed: 11, found: 5 })
        ));
    }

    #[test]
    fn ten_days_hold_out_the_last() {
        let s = grid(2, 10);
        let plan = split_day_wise(&s, 7, 2).unwrap();
        let days = |v: &[SessionMeta]| v.iter().map(|m| m.day_index).collect::<BTreeSet<_>>();
        assert_eq!(days(&plan.test), BTreeSet::from([10]));
        assert_eq!(days(&plan.val), BTreeSet::from([8, 9]));
        assert_eq!(days(&plan.train), (1..=7).collect());
        assert_eq!(plan.train.len() + plan.val.len() + plan.test.len(), s.len());
    }

    #[test]
    fn day_split_too_few() {
        assert!(matches!(
            split_day_wise(&grid(1, 3), 7, 2),
            Err(DatasetError::TooFewDays { needed: 10, found: 3 })
        ));
    }

    #[test]
    fn scan_counts_complete_and_reports_incomplete() {
        let dir = tempfile::tempdir().unwrap();
        for s in ["A", "B"] {
            for sc in Scenario::ALL {
                let p = dir.path().join(s).join("day01").join(sc.dir_name());
                fs::create_dir_all(&p).unwrap();
                for f in SESSION_FILES {
                    if !(s == "B" && sc == Scenario::SitCare && f == "ppg.csv") {
                        fs::write(p.join(f), b"").unwrap();
                    }
                }
            }
        }
        let r = scan_dataset(dir.path()).unwrap();
        assert_eq!(r.sessions.len(), 9);
        assert_eq!(r.skipped.len(), 1);
        assert_eq!(r.skipped[0].missing, "ppg.csv");
        assert!(r.skipped[0].to_string().starts_with("SKIP "));
        assert!(r.skipped[0].to_string().ends_with("sit_care ppg.csv"));
    }

    #[test]
    fn scan_empty_root() {
        let dir = tempfile::tempdir().unwrap();
        let r = scan_dataset(dir.path()).unwrap();
        assert!(r.sessions.is_empty() && r.skipped.is_empty());
    }

    #[test]
    fn scan_missing_root() {
        assert!(matches!(
            scan_dataset("/definitely/not/here"),
            Err(DatasetError::Root { .. })
        ));
    }
}
