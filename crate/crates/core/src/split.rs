//! Stratified patient-level development/test split with cross-validation
//! folds and tune hold-outs.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::model::CaseRecord;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stratum {
    Low,
    High,
}

impl Stratum {
    pub fn name(self) -> &'static str {
        match self {
            Stratum::Low => "low",
            Stratum::High => "high",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Fit,
    Tune,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Fit => "fit",
            Role::Tune => "tune",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    Dev { fold: usize, role: Role },
    Test,
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Assignment::Dev { .. } => f.write_str("dev"),
            Assignment::Test => f.write_str("test"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitRow {
    pub case_id: String,
    pub assignment: Assignment,
    pub stratum: Stratum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitParams {
    pub test_count: usize,
    pub n_folds: usize,
    pub tune_fraction: f64,
}

impl Default for SplitParams {
    fn default() -> Self {
        Self { test_count: 54, n_folds: 5, tune_fraction: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub seed: u64,
    pub n_folds: usize,
    /// Stratum boundary; `None` when no case has a score.
    pub median: Option<f64>,
    /// One row per case, ordered by case id.
    pub rows: Vec<SplitRow>,
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 })
}

/// Splits `total` into parts proportional to `weights` by largest remainder.
/// Equal remainders favour the earlier part.
pub fn largest_remainder(total: usize, weights: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut parts: Vec<usize> = weights.iter().map(|&w| total * w / sum).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // remainder numerators are (total * w) mod sum
    order.sort_by_key(|&i| (std::cmp::Reverse((total * weights[i]) % sum), i));
    let missing = total - parts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        parts[i] += 1;
    }
    parts
}

/// Positions `r` in `0..n` picked when `t` of `n` are chosen evenly.
fn evenly_picked(r: usize, t: usize, n: usize) -> bool {
    (r + 1) * t / n > r * t / n
}

pub fn stratified_split(cases: &[CaseRecord], params: &SplitParams, seed: u64) -> Result<SplitAssignment> {
    let n = cases.len();
    if params.n_folds == 0 {
        return Err(invalid("n_folds must be positive"));
    }
    if n < params.n_folds {
        return Err(invalid(format!("{n} cases cannot fill {} folds", params.n_folds)));
    }
    if params.test_count >= n {
        return Err(invalid(format!("test_count {} must be below the case count {n}", params.test_count)));
    }
    if n - params.test_count < params.n_folds {
        return Err(invalid(format!(
            "{} development cases cannot fill {} folds",
            n - params.test_count,
            params.n_folds
        )));
    }
    if !(0.0..1.0).contains(&params.tune_fraction) {
        return Err(invalid(format!("tune_fraction must lie in [0, 1), got {}", params.tune_fraction)));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = cases.iter().find(|c| !seen.insert(c.case_id.as_str())) {
        return Err(invalid(format!("duplicate case id {:?}", dup.case_id)));
    }

    let mut sorted: Vec<&CaseRecord> = cases.iter().collect();
    sorted.sort_by(|a, b| a.case_id.cmp(&b.case_id));

    let mut scores: Vec<f64> = sorted.iter().filter_map(|c| c.ki67_score).collect();
    let med = median(&mut scores);
    let mut coin = rng::stream(seed, 0);
    let strata: Vec<Stratum> = sorted
        .iter()
        .map(|c| match (c.ki67_score, med) {
            (Some(s), Some(m)) if s <= m => Stratum::Low,
            (Some(_), Some(_)) => Stratum::High,
            _ => {
                if coin.random_bool(0.5) {
                    Stratum::High
                } else {
                    Stratum::Low
                }
            }
        })
        .collect();

    let mut shuffler = rng::stream(seed, 1);
    let mut members: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, s) in strata.iter().enumerate() {
        members[*s as usize].push(i);
    }
    for m in &mut members {
        m.shuffle(&mut shuffler);
    }

    let test_quota = largest_remainder(params.test_count, &[members[0].len(), members[1].len()]);
    let mut assignment: Vec<Option<Assignment>> = vec![None; n];
    let mut dev: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for s in 0..2 {
        for (k, &i) in members[s].iter().enumerate() {
            if k < test_quota[s] {
                assignment[i] = Some(Assignment::Test);
            } else {
                dev[s].push(i);
            }
        }
    }

    // interleave strata proportionally so that dealing the sequence
    // round-robin into folds stratifies every fold
    let mut keyed: Vec<(f64, usize, usize)> = Vec::new();
    for s in 0..2 {
        let len = dev[s].len() as f64;
        for (k, &i) in dev[s].iter().enumerate() {
            keyed.push(((k as f64 + 0.5) / len, s, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = keyed.into_iter().map(|(_, _, i)| i).collect();

    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); params.n_folds];
    for (pos, &i) in order.iter().enumerate() {
        folds[pos % params.n_folds].push(i);
    }
    let d = order.len();
    let tune_total = (params.tune_fraction * d as f64).round() as usize;
    let fold_sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
    let tune_quota = largest_remainder(tune_total, &fold_sizes);
    for (k, fold) in folds.iter().enumerate() {
        for (r, &i) in fold.iter().enumerate() {
            let role = if evenly_picked(r, tune_quota[k], fold.len()) { Role::Tune } else { Role::Fit };
            assignment[i] = Some(Assignment::Dev { fold: k + 1, role });
        }
    }

    let rows = sorted
        .iter()
        .zip(strata)
        .zip(assignment)
        .map(|((c, stratum), a)| SplitRow {
            case_id: c.case_id.clone(),
            assignment: a.expect("every case is assigned"),
            stratum,
        })
        .collect();
    Ok(SplitAssignment { seed, n_folds: params.n_folds, median: med, rows })
}

impl SplitAssignment {
    pub fn dev_count(&self) -> usize {
        self.rows.iter().filter(|r| r.assignment != Assignment::Test).count()
    }

    pub fn test_count(&self) -> usize {
        self.rows.len() - self.dev_count()
    }

    /// Members of fold `fold`, numbered from 1.
    pub fn fold_members(&self, fold: usize) -> impl Iterator<Item = &SplitRow> {
        self.rows
            .iter()
            .filter(move |r| matches!(r.assignment, Assignment::Dev { fold: f, .. } if f == fold))
    }

    /// Cases tuned on when `fold` is held out for validation.
    pub fn tune_cases(&self, fold: usize) -> impl Iterator<Item = &SplitRow> {
        self.rows.iter().filter(
            move |r| matches!(r.assignment, Assignment::Dev { fold: f, role: Role::Tune } if f != fold),
        )
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        wtr.write_record(["case_id", "assignment", "fold", "role", "stratum"])?;
        for r in &self.rows {
            let (fold, role) = match r.assignment {
                Assignment::Dev { fold, role } => (fold.to_string(), role.name()),
                Assignment::Test => (String::new(), ""),
            };
            wtr.write_record([r.case_id.as_str(), &r.assignment.to_string(), &fold, role, r.stratum.name()])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

/// Reads case records from a CSV with at least `case_id`, `he_slide_id`
/// and `ihc_slide_id` columns; `ki67_score` is optional and may be empty.
pub fn read_cases_csv<R: Read>(r: R) -> Result<Vec<CaseRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let need = |name: &str| col(name).ok_or_else(|| Error::Csv(format!("missing column {name:?}")));
    let (ci, hi, ii) = (need("case_id")?, need("he_slide_id")?, need("ihc_slide_id")?);
    let ki = col("ki67_score");
    let mut out = Vec::new();
    for (line, row) in rdr.records().enumerate() {
        let row = row?;
        let score = match ki.map(|k| row.get(k).unwrap_or("").trim()) {
            None | Some("") | Some("NA") => None,
            Some(s) => Some(
                s.parse::<f64>()
                    .map_err(|_| Error::Csv(format!("row {}: bad ki67_score {s:?}", line + 2)))?,
            ),
        };
        out.push(CaseRecord::new(&row[ci], &row[hi], &row[ii], score)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cohort(n: usize, missing_every: usize) -> Vec<CaseRecord> {
        (0..n)
            .map(|i| {
                let score = (missing_every == 0 || i % missing_every != 0).then(|| ((i * 37) % 101) as f64 * 0.9);
                CaseRecord::new(format!("C{i:04}"), format!("HE{i}"), format!("KI{i}"), score).unwrap()
            })
            .collect()
    }

    #[test]
    fn cohort_of_272() {
        let s = stratified_split(&cohort(272, 13), &SplitParams::default(), 1).unwrap();
        assert_eq!(s.dev_count(), 218);
        assert_eq!(s.test_count(), 54);
        let sizes: Vec<usize> = (1..=5).map(|k| s.fold_members(k).count()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 218);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for k in 1..=5 {
            let train = 218 - sizes[k - 1];
            let tune = s.tune_cases(k).count() as f64;
            assert!((tune - 0.15 * train as f64).abs() <= 1.5, "fold {k}: {tune} of {train}");
        }
    }

    #[test]
    fn median_ties_go_low() {
        let cases: Vec<CaseRecord> = [10.0, 25.0, 25.0, 25.0, 60.0, 70.0]
            .iter()
            .enumerate()
            .map(|(i, &s)| CaseRecord::new(format!("c{i}"), "h", "k", Some(s)).unwrap())
            .collect();
        let s = stratified_split(&cases, &SplitParams { test_count: 2, n_folds: 2, tune_fraction: 0.0 }, 3).unwrap();
        assert_eq!(s.median, Some(25.0));
        let lows = s.rows.iter().filter(|r| r.stratum == Stratum::Low).count();
        assert_eq!(lows, 4);
    }

    #[test]
    fn deterministic_per_seed() {
        let c = cohort(100, 7);
        let p = SplitParams { test_count: 20, ..Default::default() };
        let a = stratified_split(&c, &p, 5).unwrap().to_csv_string();
        assert_eq!(a, stratified_split(&c, &p, 5).unwrap().to_csv_string());
        assert_ne!(a, stratified_split(&c, &p, 6).unwrap().to_csv_string());
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = cohort(4, 0);
        assert!(stratified_split(&c, &SplitParams { test_count: 1, n_folds: 5, tune_fraction: 0.15 }, 0).is_err());
        assert!(stratified_split(&c, &SplitParams { test_count: 4, n_folds: 2, tune_fraction: 0.15 }, 0).is_err());
    }

    #[test]
    fn largest_remainder_sums() {
        assert_eq!(largest_remainder(54, &[136, 136]), vec![27, 27]);
        assert_eq!(largest_remainder(5, &[1, 1]), vec![3, 2]);
        assert_eq!(largest_remainder(33, &[44, 44, 44, 43, 43]), vec![7, 7, 7, 6, 6]);
    }

    #[test]
    fn csv_reader_accepts_case_manifest() {
        let text = "case_id,he_slide_id,ihc_slide_id,field,ki67_score\nA,h1,k1,f.wdf,12.5\nB,h2,k2,g.wdf,\n";
        let cases = read_cases_csv(text.as_bytes()).unwrap();
        assert_eq!(cases[0].ki67_score, Some(12.5));
        assert_eq!(cases[1].ki67_score, None);
    }
}
