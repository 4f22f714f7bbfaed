//! Cosine scoring and detection metrics: EER, minimum detection cost,
//! closed-set language detection cost and top-k accuracy.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndtensor::Real;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FrameSequence;
use crate::model::Network;

/// `a.b / (|a| |b|)`, accumulated in f64.
pub fn cosine_score<T: Real>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Degenerate(format!("embeddings of length {} and {}", a.len(), b.len())));
    }
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64(), y.to_f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Degenerate("cosine score of a zero vector".into()));
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// Rounds a score to the precision written in score files, so that scores
/// read back from disk equal the ones computed in memory.
pub fn quantize_score(s: f64) -> f64 {
    format!("{s:.6}").parse().expect("formatted float parses")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

/// Parses `label enroll_id test_id` lines with label 1 (target) or 0.
/// Blank lines are skipped.
pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            [] => continue,
            [label, enroll, test] => {
                let target = match *label {
                    "1" => true,
                    "0" => false,
                    other => return Err(Error::format("trial list", format!("line {}: label `{other}`", n + 1))),
                };
                out.push(Trial { enroll: enroll.to_string(), test: test.to_string(), target });
            }
            _ => return Err(Error::format("trial list", format!("line {}: expected 3 fields", n + 1))),
        }
    }
    Ok(out)
}

pub fn format_trials(trials: &[Trial]) -> String {
    let mut s = String::new();
    for t in trials {
        let _ = writeln!(s, "{} {} {}", u8::from(t.target), t.enroll, t.test);
    }
    s
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    parse_trials(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Score file lines: `enroll_id test_id score` with six decimals.
pub fn format_scores(trials: &[Trial], scores: &[f64]) -> String {
    let mut s = String::new();
    for (t, score) in trials.iter().zip(scores) {
        let _ = writeln!(s, "{} {} {score:.6}", t.enroll, t.test);
    }
    s
}

/// Parses a score file and lines it up with `trials`, which must list the
/// same pairs in the same order.
pub fn parse_scores(text: &str, trials: &[Trial]) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(trials.len());
    let lines = text.lines().filter(|l| !l.trim().is_empty());
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [enroll, test, score] = fields.as_slice() else {
            return Err(Error::format("score file", format!("line {}: expected 3 fields", n + 1)));
        };
        let trial = trials
            .get(n)
            .ok_or_else(|| Error::format("score file", format!("more scores than the {} trials", trials.len())))?;
        if trial.enroll != *enroll || trial.test != *test {
            return Err(Error::format(
                "score file",
                format!("line {} scores ({enroll}, {test}) but the trial is ({}, {})", n + 1, trial.enroll, trial.test),
            ));
        }
        let score: f64 = score
            .parse()
            .map_err(|_| Error::format("score file", format!("line {}: bad score `{score}`", n + 1)))?;
        if !score.is_finite() {
            return Err(Error::format("score file", format!("line {}: non-finite score", n + 1)));
        }
        scores.push(score);
    }
    if scores.len() != trials.len() {
        return Err(Error::format("score file", format!("{} scores for {} trials", scores.len(), trials.len())));
    }
    Ok(scores)
}

/// One operating point of a detector. `threshold = +inf` rejects everything.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

fn check_trials(scores: &[f64], targets: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != targets.len() {
        return Err(Error::Degenerate(format!("{} scores for {} trials", scores.len(), targets.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Degenerate(format!("score {i} is not finite")));
    }
    let nt = targets.iter().filter(|&&t| t).count();
    let nn = targets.len() - nt;
    if nt == 0 || nn == 0 {
        return Err(Error::Degenerate(format!("{nt} target and {nn} non-target trials; need both")));
    }
    Ok((nt, nn))
}

/// Operating points at every distinct score (a trial is accepted when its
/// score is at or above the threshold), followed by the reject-all point.
/// Miss rate rises and false-alarm rate falls along the list.
pub fn det_points(scores: &[f64], targets: &[bool]) -> Result<Vec<DetPoint>> {
    let (nt, nn) = check_trials(scores, targets)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut points = Vec::new();
    let (mut below_t, mut below_n) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        points.push(DetPoint {
            threshold: t,
            p_miss: below_t as f64 / nt as f64,
            p_fa: (nn - below_n) as f64 / nn as f64,
        });
        while i < order.len() && scores[order[i]] == t {
            if targets[order[i]] {
                below_t += 1;
            } else {
                below_n += 1;
            }
            i += 1;
        }
    }
    points.push(DetPoint { threshold: f64::INFINITY, p_miss: 1.0, p_fa: 0.0 });
    Ok(points)
}

/// Equal error rate, interpolated linearly between the two operating points
/// where miss rate crosses false-alarm rate.
pub fn eer(scores: &[f64], targets: &[bool]) -> Result<f64> {
    Ok(eer_from_points(&det_points(scores, targets)?))
}

pub(crate) fn eer_from_points(points: &[DetPoint]) -> f64 {
    for w in points.windows(2) {
        let d0 = w[0].p_miss - w[0].p_fa;
        let d1 = w[1].p_miss - w[1].p_fa;
        if d0 == 0.0 {
            return w[0].p_miss;
        }
        if d0 < 0.0 && d1 >= 0.0 {
            let a = d0 / (d0 - d1);
            return w[0].p_miss + a * (w[1].p_miss - w[0].p_miss);
        }
    }
    // The reject-all point always has p_miss - p_fa = 1, so a crossing exists.
    unreachable!("operating points end at the reject-all point")
}

/// Detection cost priors and weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams { p_target: 0.01, c_miss: 1.0, c_fa: 1.0 }
    }
}

impl CostParams {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            out.push(format!("p_target {} outside (0, 1)", self.p_target));
        }
        if !(self.c_miss > 0.0) || !(self.c_fa > 0.0) {
            out.push(format!("costs c_miss = {}, c_fa = {} must be positive", self.c_miss, self.c_fa));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    fn cost(&self, p: &DetPoint) -> f64 {
        self.c_miss * p.p_miss * self.p_target + self.c_fa * p.p_fa * (1.0 - self.p_target)
    }

    fn norm(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

/// Minimum normalised detection cost over all operating points.
pub fn min_cdet(scores: &[f64], targets: &[bool], params: &CostParams) -> Result<f64> {
    params.validate()?;
    Ok(min_cdet_from_points(&det_points(scores, targets)?, params))
}

pub(crate) fn min_cdet_from_points(points: &[DetPoint], params: &CostParams) -> f64 {
    points.iter().map(|p| params.cost(p)).fold(f64::INFINITY, f64::min) / params.norm()
}

fn check_matrix(scores: &[Vec<f64>], truth: &[usize]) -> Result<usize> {
    if scores.len() != truth.len() {
        return Err(Error::Degenerate(format!("{} score rows for {} labels", scores.len(), truth.len())));
    }
    let classes = scores.first().map_or(0, Vec::len);
    for (i, row) in scores.iter().enumerate() {
        if row.len() != classes {
            return Err(Error::Degenerate(format!("row {i} has {} scores, expected {classes}", row.len())));
        }
        if row.iter().any(|s| !s.is_finite()) {
            return Err(Error::Degenerate(format!("row {i} has a non-finite score")));
        }
    }
    if let Some(&y) = truth.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label: y, classes });
    }
    Ok(classes)
}

/// Average detection cost over target languages for closed-set detection.
/// `scores[i][l]` is a log-odds score that utterance `i` is in language `l`;
/// a score at or above zero counts as acceptance. Costs are 1 and the
/// target prior is 0.5.
pub fn cavg(scores: &[Vec<f64>], truth: &[usize]) -> Result<f64> {
    let langs = check_matrix(scores, truth)?;
    if langs < 2 {
        return Err(Error::Degenerate(format!("{langs} languages; need at least 2")));
    }
    let mut count = vec![0usize; langs];
    for &y in truth {
        count[y] += 1;
    }
    if let Some(l) = count.iter().position(|&c| c == 0) {
        return Err(Error::Degenerate(format!("language {l} has no utterances")));
    }
    // accepted[l][t]: utterances of language t accepted as language l.
    let mut accepted = vec![vec![0usize; langs]; langs];
    for (row, &y) in scores.iter().zip(truth) {
        for (l, &s) in row.iter().enumerate() {
            if s >= 0.0 {
                accepted[l][y] += 1;
            }
        }
    }
    let (p_tar, c_miss, c_fa) = (0.5, 1.0, 1.0);
    let mut total = 0.0;
    for lt in 0..langs {
        let p_miss = 1.0 - accepted[lt][lt] as f64 / count[lt] as f64;
        let fa: f64 = (0..langs)
            .filter(|&ln| ln != lt)
            .map(|ln| accepted[lt][ln] as f64 / count[ln] as f64)
            .sum();
        total += c_miss * p_tar * p_miss + c_fa * (1.0 - p_tar) * fa / (langs - 1) as f64;
    }
    Ok(total / langs as f64)
}

/// Fraction of rows whose true class ranks among the `k` highest scores.
/// Equal scores rank the lower class index first.
pub fn topk_accuracy(scores: &[Vec<f64>], truth: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("top-k accuracy needs k >= 1".into()));
    }
    let classes = check_matrix(scores, truth)?;
    if k > classes {
        return Err(Error::Config(format!("k = {k} exceeds {classes} classes")));
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput("no utterances to rank".into()));
    }
    let hits = scores
        .iter()
        .zip(truth)
        .filter(|(row, &y)| {
            let s = row[y];
            let rank = row.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < y)).count();
            rank < k
        })
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub eer: f64,
    pub min_cdet: f64,
    pub params: CostParams,
    pub n_trials: usize,
    pub n_target: usize,
    pub n_nontarget: usize,
}

/// Metrics for a scored trial list plus its DET curve.
pub fn evaluate(scores: &[f64], trials: &[Trial], params: &CostParams) -> Result<(Report, Vec<DetPoint>)> {
    params.validate()?;
    let targets: Vec<bool> = trials.iter().map(|t| t.target).collect();
    let points = det_points(scores, &targets)?;
    let n_target = targets.iter().filter(|&&t| t).count();
    let report = Report {
        eer: eer_from_points(&points),
        min_cdet: min_cdet_from_points(&points, params),
        params: *params,
        n_trials: trials.len(),
        n_target,
        n_nontarget: trials.len() - n_target,
    };
    Ok((report, points))
}

pub fn det_csv(points: &[DetPoint]) -> String {
    let mut s = String::from("threshold,p_miss,p_fa\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.threshold, p.p_miss, p.p_fa);
    }
    s
}

/// Unique utterance ids of a trial list in first-appearance order.
pub fn trial_ids(trials: &[Trial]) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut ids = Vec::new();
    for t in trials {
        for id in [&t.enroll, &t.test] {
            if seen.insert(id.as_str()) {
                ids.push(id.clone());
            }
        }
    }
    ids
}

/// Quantised cosine scores for each trial from an id -> embedding map.
pub fn score_trials<T: Real>(trials: &[Trial], embeddings: &HashMap<String, Vec<T>>) -> Result<Vec<f64>> {
    trials
        .iter()
        .map(|t| {
            let a = embeddings.get(&t.enroll).ok_or_else(|| Error::MissingUtterance(t.enroll.clone()))?;
            let b = embeddings.get(&t.test).ok_or_else(|| Error::MissingUtterance(t.test.clone()))?;
            Ok(quantize_score(cosine_score(a, b)?))
        })
        .collect()
}

/// Embeds every utterance referenced by `trials` once, at full length,
/// then scores and evaluates the trials. `lookup` resolves ids to features.
pub fn run_verification<T: Real>(
    net: &Network<T>,
    trials: &[Trial],
    lookup: impl Fn(&str) -> Result<FrameSequence>,
    params: &CostParams,
    threads: usize,
) -> Result<(Vec<f64>, Report, Vec<DetPoint>)> {
    let ids = trial_ids(trials);
    let seqs = ids.iter().map(|id| lookup(id)).collect::<Result<Vec<_>>>()?;
    let embs = net.embed_all(&seqs, threads)?;
    let map: HashMap<String, Vec<T>> = ids.into_iter().zip(embs).collect();
    let scores = score_trials(trials, &map)?;
    let (report, points) = evaluate(&scores, trials, params)?;
    Ok((scores, report, points))
}
