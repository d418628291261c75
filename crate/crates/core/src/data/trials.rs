//! Trial lists (`enroll test target|nontarget`) and score files
//! (`enroll test score`, six decimals).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub enroll_id: String,
    pub test_id: String,
    pub target: bool,
    pub score: Option<f64>,
}

impl TrialRecord {
    pub fn new(enroll_id: impl Into<String>, test_id: impl Into<String>, target: bool) -> Self {
        TrialRecord {
            enroll_id: enroll_id.into(),
            test_id: test_id.into(),
            target,
            score: None,
        }
    }

    pub fn scored(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    fn label(&self) -> &'static str {
        if self.target {
            "target"
        } else {
            "nontarget"
        }
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

pub fn parse_trials(text: &str) -> Result<Vec<TrialRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => continue,
            [enroll, test, label] => {
                let target = match *label {
                    "target" => true,
                    "nontarget" => false,
                    other => return Err(parse_err(n + 1, format!("unknown label `{other}`"))),
                };
                out.push(TrialRecord::new(*enroll, *test, target));
            }
            _ => {
                return Err(parse_err(
                    n + 1,
                    format!("expected `enroll test label`, got {} fields", fields.len()),
                ))
            }
        }
    }
    Ok(out)
}

pub fn load_trials(path: &Path) -> Result<Vec<TrialRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trials(&text)
}

pub fn format_trials(trials: &[TrialRecord]) -> String {
    let mut s = String::new();
    for t in trials {
        let _ = writeln!(s, "{} {} {}", t.enroll_id, t.test_id, t.label());
    }
    s
}

pub fn write_trials(trials: &[TrialRecord], path: &Path) -> Result<()> {
    fs::write(path, format_trials(trials)).map_err(|e| Error::io(path, e))
}

pub fn format_scores(trials: &[TrialRecord]) -> Result<String> {
    let mut s = String::new();
    for t in trials {
        let score = t.score.filter(|v| v.is_finite()).ok_or_else(|| {
            Error::Metric(format!("trial {} {} has no finite score", t.enroll_id, t.test_id))
        })?;
        let _ = writeln!(s, "{} {} {score:.6}", t.enroll_id, t.test_id);
    }
    Ok(s)
}

pub fn write_scores(trials: &[TrialRecord], path: &Path) -> Result<()> {
    fs::write(path, format_scores(trials)?).map_err(|e| Error::io(path, e))
}

pub fn parse_scores(text: &str) -> Result<Vec<(String, String, f64)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => continue,
            [enroll, test, score] => {
                let v: f64 = score
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| parse_err(n + 1, format!("bad score `{score}`")))?;
                out.push((enroll.to_string(), test.to_string(), v));
            }
            _ => {
                return Err(parse_err(
                    n + 1,
                    format!("expected `enroll test score`, got {} fields", fields.len()),
                ))
            }
        }
    }
    Ok(out)
}

pub fn read_scores(path: &Path) -> Result<Vec<(String, String, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text)
}

/// Copies scores onto matching trials; every trial must be scored.
pub fn attach_scores(trials: &mut [TrialRecord], scores: &[(String, String, f64)]) -> Result<()> {
    let lookup: HashMap<(&str, &str), f64> = scores
        .iter()
        .map(|(e, t, s)| ((e.as_str(), t.as_str()), *s))
        .collect();
    for trial in trials.iter_mut() {
        let s = lookup
            .get(&(trial.enroll_id.as_str(), trial.test_id.as_str()))
            .ok_or_else(|| Error::Metric(format!("no score for trial {} {}", trial.enroll_id, trial.test_id)))?;
        trial.score = Some(*s);
    }
    Ok(())
}
