//! Rater scores to per-image means to binary tail labels.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, ParseIssue, Result};

pub const MIN_SCORE: u8 = 1;
pub const MAX_SCORE: u8 = 9;
pub const RATINGS_HEADER: [&str; 4] = ["image_id", "rater_id", "question", "score"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Question {
    Cold,
    Confident,
}

impl FromStr for Question {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cold" => Ok(Question::Cold),
            "confident" => Ok(Question::Confident),
            other => Err(format!("unknown question '{other}' (expected cold or confident)")),
        }
    }
}

impl fmt::Display for Question {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Question::Cold => "cold",
            Question::Confident => "confident",
        })
    }
}

/// Which impression a model is trained to classify.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    /// Inverse of the `cold` ratings; label 1 = warm.
    Warmth,
    /// Proxied by the `confident` ratings; label 1 = competent.
    Competence,
}

impl Task {
    pub fn question(self) -> Question {
        match self {
            Task::Warmth => Question::Cold,
            Task::Competence => Question::Confident,
        }
    }

    /// Names of the (label 0, label 1) poles.
    pub fn class_names(self) -> [&'static str; 2] {
        match self {
            Task::Warmth => ["cold", "warm"],
            Task::Competence => ["incompetent", "competent"],
        }
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "warmth" => Ok(Task::Warmth),
            "competence" => Ok(Task::Competence),
            other => Err(format!("unknown task '{other}' (expected warmth or competence)")),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Warmth => "warmth",
            Task::Competence => "competence",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingRecord {
    pub image_id: String,
    pub rater_id: String,
    pub question: Question,
    pub score: u8,
}

/// Parses the long-format ratings CSV (`image_id,rater_id,question,score`).
///
/// Every malformed row is collected; the error lists all of them with their
/// 1-based line numbers.
pub fn parse_ratings<R: Read>(reader: R) -> Result<Vec<RatingRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let header = rdr
        .headers()
        .map_err(|e| Error::Parse(vec![ParseIssue { line: 1, message: e.to_string() }]))?
        .clone();
    let mut columns = [0usize; 4];
    let mut missing = Vec::new();
    for (slot, name) in columns.iter_mut().zip(RATINGS_HEADER) {
        match header.iter().position(|h| h.trim_start_matches('\u{feff}') == name) {
            Some(i) => *slot = i,
            None => missing.push(name),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Parse(vec![ParseIssue {
            line: 1,
            message: format!("missing column(s): {}", missing.join(", ")),
        }]));
    }

    let mut records = Vec::new();
    let mut issues = Vec::new();
    for row in rdr.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                issues.push(ParseIssue { line, message: e.to_string() });
                continue;
            }
        };
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.iter().all(str::is_empty) {
            continue;
        }
        let field = |i: usize| row.get(columns[i]);
        let (Some(image_id), Some(rater_id), Some(question), Some(score)) =
            (field(0), field(1), field(2), field(3))
        else {
            issues.push(ParseIssue { line, message: "missing field".into() });
            continue;
        };
        if image_id.is_empty() {
            issues.push(ParseIssue { line, message: "empty image_id".into() });
            continue;
        }
        let question = match question.parse::<Question>() {
            Ok(q) => q,
            Err(message) => {
                issues.push(ParseIssue { line, message });
                continue;
            }
        };
        let score = match score.parse::<i64>() {
            Ok(s) if (MIN_SCORE as i64..=MAX_SCORE as i64).contains(&s) => s as u8,
            Ok(s) => {
                issues.push(ParseIssue {
                    line,
                    message: format!("score {s} outside {MIN_SCORE}..{MAX_SCORE}"),
                });
                continue;
            }
            Err(_) => {
                issues.push(ParseIssue {
                    line,
                    message: format!("score '{score}' is not an integer"),
                });
                continue;
            }
        };
        records.push(RatingRecord {
            image_id: image_id.to_string(),
            rater_id: rater_id.to_string(),
            question,
            score,
        });
    }
    if issues.is_empty() {
        Ok(records)
    } else {
        Err(Error::Parse(issues))
    }
}

pub fn read_ratings(path: &Path) -> Result<Vec<RatingRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_ratings(std::io::BufReader::new(file))
}

/// Arithmetic mean score per image for one question.
pub fn aggregate_mean(records: &[RatingRecord], question: Question) -> Result<BTreeMap<String, f64>> {
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in records {
        let entry = sums.entry(&r.image_id).or_insert((0.0, 0));
        if r.question == question {
            entry.0 += r.score as f64;
            entry.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(id, (sum, count))| {
            if count == 0 {
                Err(Error::Aggregation {
                    image_id: id.to_string(),
                    question: question.to_string(),
                })
            } else {
                Ok((id.to_string(), sum / count as f64))
            }
        })
        .collect()
}

/// Percentile by linear interpolation between closest ranks over sorted
/// values: `h = (n−1)·p/100`, `v[⌊h⌋] + (h−⌊h⌋)·(v[⌊h⌋+1] − v[⌊h⌋])`.
pub fn percentile_linear(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Argument("percentile of an empty set".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Argument(format!("percentile {p} outside [0, 100]")));
    }
    if sorted.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Argument("percentile input is not sorted".into()));
    }
    let h = (sorted.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return Ok(sorted[sorted.len() - 1]);
    }
    Ok(sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub low: f64,
    pub high: f64,
}

/// Label for a mean rating under inclusive tail thresholds, or `None` when
/// the image falls between them.
pub fn label_for(task: Task, mean: f64, t: Thresholds) -> Option<usize> {
    let in_low = mean <= t.low;
    let in_high = mean >= t.high;
    match (task, in_low, in_high) {
        (_, false, false) => None,
        // high "cold" ratings are the cold (0) pole
        (Task::Warmth, true, _) => Some(1),
        (Task::Warmth, false, true) => Some(0),
        (Task::Competence, _, true) => Some(1),
        (Task::Competence, true, false) => Some(0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retained {
    pub image_id: String,
    pub mean_rating: f64,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dichotomy {
    pub task: Task,
    pub thresholds: Thresholds,
    /// Sorted by image id.
    pub retained: Vec<Retained>,
}

impl Dichotomy {
    pub fn count(&self, label: usize) -> usize {
        self.retained.iter().filter(|r| r.label == label).count()
    }
}

pub const MIN_RATED_IMAGES: usize = 10;

/// Keeps only the images whose mean lies in the low or high percentile tail
/// (inclusive, so ties at a threshold are kept).
pub fn dichotomize(
    means: &BTreeMap<String, f64>,
    task: Task,
    p_low: f64,
    p_high: f64,
) -> Result<Dichotomy> {
    if means.len() < MIN_RATED_IMAGES {
        return Err(Error::Argument(format!(
            "need at least {MIN_RATED_IMAGES} rated images, got {}",
            means.len()
        )));
    }
    if p_low >= p_high {
        return Err(Error::Argument(format!(
            "low percentile {p_low} must be below high percentile {p_high}"
        )));
    }
    let mut sorted: Vec<f64> = means.values().copied().collect();
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("dichotomize"));
    }
    sorted.sort_by(f64::total_cmp);
    let thresholds = Thresholds {
        low: percentile_linear(&sorted, p_low)?,
        high: percentile_linear(&sorted, p_high)?,
    };
    if thresholds.low >= thresholds.high {
        return Err(Error::Degenerate {
            low: thresholds.low,
            high: thresholds.high,
        });
    }
    let retained = means
        .iter()
        .filter_map(|(id, &mean)| {
            label_for(task, mean, thresholds).map(|label| Retained {
                image_id: id.clone(),
                mean_rating: mean,
                label,
            })
        })
        .collect();
    Ok(Dichotomy {
        task,
        thresholds,
        retained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "image_id,rater_id,question,score\n";

    #[test]
    fn parses_valid_rows() {
        let csv = format!("{HEADER}a.jpg,r1,cold,3\r\na.jpg,r2,confident,9\n");
        let recs = parse_ratings(csv.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].question, Question::Confident);
        assert_eq!(recs[1].score, 9);
    }

    #[test]
    fn reports_bad_lines() {
        let csv = format!("{HEADER}a,r1,cold,3\na,r2,cold,10\nb,r1,cold,x\nb,r2,warm,2\n");
        let Err(Error::Parse(issues)) = parse_ratings(csv.as_bytes()) else {
            panic!("expected parse error");
        };
        let lines: Vec<u64> = issues.iter().map(|i| i.line).collect();
        assert_eq!(lines, vec![3, 4, 5]);
        assert!(issues[0].message.contains("10"));
    }

    #[test]
    fn missing_column_is_reported() {
        let err = parse_ratings("image_id,rater_id,score\na,r,3\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("question"));
    }

    #[test]
    fn fifteen_raters_per_image() {
        let mut csv = HEADER.to_string();
        for img in 0..4 {
            for r in 0..15 {
                csv.push_str(&format!("img{img},r{r},cold,{}\n", 1 + (img + r) % 9));
            }
        }
        assert_eq!(parse_ratings(csv.as_bytes()).unwrap().len(), 60);
    }

    fn rec(id: &str, q: Question, score: u8) -> RatingRecord {
        RatingRecord {
            image_id: id.into(),
            rater_id: "r".into(),
            question: q,
            score,
        }
    }

    #[test]
    fn means() {
        let mut recs: Vec<_> = (0..15).map(|_| rec("a", Question::Cold, 5)).collect();
        recs.push(rec("b", Question::Cold, 1));
        recs.push(rec("b", Question::Cold, 9));
        let m = aggregate_mean(&recs, Question::Cold).unwrap();
        assert_eq!(m["a"], 5.0);
        assert_eq!(m["b"], 5.0);
        recs.push(rec("c", Question::Confident, 4));
        assert!(matches!(
            aggregate_mean(&recs, Question::Cold),
            Err(Error::Aggregation { .. })
        ));
    }

    #[test]
    fn percentiles_of_one_to_ten() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert!((percentile_linear(&v, 10.0).unwrap() - 1.9).abs() < 1e-12);
        assert!((percentile_linear(&v, 90.0).unwrap() - 9.1).abs() < 1e-12);
        assert_eq!(percentile_linear(&v, 0.0).unwrap(), 1.0);
        assert_eq!(percentile_linear(&v, 100.0).unwrap(), 10.0);
        assert!(percentile_linear(&[], 50.0).is_err());
    }

    fn means_of(values: &[f64]) -> BTreeMap<String, f64> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| (format!("img{i:03}"), v))
            .collect()
    }

    #[test]
    fn dichotomize_one_to_ten() {
        let means = means_of(&(1..=10).map(f64::from).collect::<Vec<_>>());
        let d = dichotomize(&means, Task::Warmth, 10.0, 90.0).unwrap();
        let kept: Vec<(f64, usize)> = d.retained.iter().map(|r| (r.mean_rating, r.label)).collect();
        assert_eq!(kept, vec![(1.0, 1), (10.0, 0)]);
        let d = dichotomize(&means, Task::Competence, 10.0, 90.0).unwrap();
        let kept: Vec<(f64, usize)> = d.retained.iter().map(|r| (r.mean_rating, r.label)).collect();
        assert_eq!(kept, vec![(1.0, 0), (10.0, 1)]);
    }

    #[test]
    fn constant_means_are_refused() {
        let means = means_of(&[4.0; 12]);
        assert!(matches!(
            dichotomize(&means, Task::Warmth, 10.0, 90.0),
            Err(Error::Degenerate { .. })
        ));
        assert!(dichotomize(&means_of(&[1.0, 2.0]), Task::Warmth, 10.0, 90.0).is_err());
    }

    proptest! {
        #[test]
        fn percentile_oracle(mut v in prop::collection::vec(1.0f64..9.0, 1..60), p in 0.0f64..=100.0) {
            v.sort_by(f64::total_cmp);
            let got = percentile_linear(&v, p).unwrap();
            // reference: rank position weighting of neighbours
            let pos = (v.len() - 1) as f64 * p / 100.0;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let want = v[lo] * (1.0 - (pos - lo as f64)) + v[hi] * (pos - lo as f64);
            prop_assert!((got - want).abs() < 1e-9);
            prop_assert!(got >= v[0] && got <= v[v.len() - 1]);
        }

        #[test]
        fn tails_keep_at_least_a_fifth(scores in prop::collection::vec(1u8..=9, 10..200)) {
            // integer scores force heavy ties at the thresholds
            let means = means_of(&scores.iter().map(|&s| s as f64).collect::<Vec<_>>());
            if let Ok(d) = dichotomize(&means, Task::Competence, 10.0, 90.0) {
                prop_assert!(d.retained.len() * 5 >= means.len());
                for r in &d.retained {
                    prop_assert!(r.mean_rating <= d.thresholds.low || r.mean_rating >= d.thresholds.high);
                    prop_assert_eq!(label_for(Task::Competence, r.mean_rating, d.thresholds), Some(r.label));
                }
            }
        }

        #[test]
        fn mean_matches_direct_sum(scores in prop::collection::vec(1u8..=9, 1..30)) {
            let recs: Vec<_> = scores.iter().map(|&s| rec("x", Question::Confident, s)).collect();
            let m = aggregate_mean(&recs, Question::Confident).unwrap();
            let mut total = 0u32;
            for &s in &scores { total += s as u32; }
            prop_assert!((m["x"] - total as f64 / scores.len() as f64).abs() < 1e-12);
        }
    }
}
