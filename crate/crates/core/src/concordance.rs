//! Inter-rater agreement and real-versus-synthetic detection statistics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959963984540054;

/// Items × raters table of category indices; `None` marks a missing grade.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RatingTable {
    categories: usize,
    raters: usize,
    rows: Vec<Vec<Option<usize>>>,
}

impl RatingTable {
    pub fn new(categories: usize, rows: Vec<Vec<Option<usize>>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptySet("rating table has no items".into()));
        }
        let raters = rows[0].len();
        if raters < 2 {
            return Err(Error::Config("rating table needs at least 2 raters".into()));
        }
        if categories < 1 {
            return Err(Error::Config("rating table needs at least one category".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != raters {
                return Err(Error::Shape(format!("item {i} has {} ratings, expected {raters}", r.len())));
            }
            if let Some(bad) = r.iter().flatten().find(|&&c| c >= categories) {
                return Err(Error::Config(format!("item {i} has category {bad}, only {categories} exist")));
            }
        }
        Ok(Self {
            categories,
            raters,
            rows,
        })
    }

    /// Table with every cell filled.
    pub fn complete(categories: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        Self::new(categories, rows.into_iter().map(|r| r.into_iter().map(Some).collect()).collect())
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn raters(&self) -> usize {
        self.raters
    }

    pub fn rows(&self) -> &[Vec<Option<usize>>] {
        &self.rows
    }

    /// Ratings of two raters over the items both graded.
    pub fn pair(&self, a: usize, b: usize) -> Result<PairRatings> {
        if a >= self.raters || b >= self.raters {
            return Err(Error::Config(format!("rater index out of range (have {})", self.raters)));
        }
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for r in &self.rows {
            if let (Some(p), Some(q)) = (r[a], r[b]) {
                x.push(p);
                y.push(q);
            }
        }
        PairRatings::new(self.categories, x, y)
    }
}

/// Strict-majority grade per item; `None` when no category has more than
/// half of the item's non-missing grades.
pub fn consensus(table: &RatingTable) -> Vec<Option<usize>> {
    table
        .rows
        .iter()
        .map(|r| {
            let mut counts = vec![0usize; table.categories];
            let mut n = 0;
            for &c in r.iter().flatten() {
                counts[c] += 1;
                n += 1;
            }
            counts.iter().position(|&k| 2 * k > n)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairRatings {
    categories: usize,
    a: Vec<usize>,
    b: Vec<usize>,
}

impl PairRatings {
    pub fn new(categories: usize, a: Vec<usize>, b: Vec<usize>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Shape(format!("rating sequences differ in length: {} vs {}", a.len(), b.len())));
        }
        if a.is_empty() {
            return Err(Error::EmptySet("no paired ratings".into()));
        }
        if let Some(bad) = a.iter().chain(&b).find(|&&c| c >= categories) {
            return Err(Error::Config(format!("category {bad}, only {categories} exist")));
        }
        Ok(Self { categories, a, b })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// `C × C` contingency counts, rows = first rater.
    pub fn contingency(&self) -> Vec<Vec<u64>> {
        let mut t = vec![vec![0u64; self.categories]; self.categories];
        for (&x, &y) in self.a.iter().zip(&self.b) {
            t[x][y] += 1;
        }
        t
    }
}

/// Agreement coefficient with its asymptotic standard error and 95% normal
/// interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub kappa: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Kappa {
    fn with_se(kappa: f64, std_error: f64) -> Self {
        Self {
            kappa,
            std_error,
            ci_low: kappa - Z95 * std_error,
            ci_high: kappa + Z95 * std_error,
        }
    }
}

/// Unweighted Cohen's kappa. The standard error is the large-sample
/// estimate `sqrt(p_o(1 − p_o) / (N (1 − p_e)²))`.
pub fn cohen_kappa(p: &PairRatings) -> Result<Kappa> {
    let n = p.len() as f64;
    let t = p.contingency();
    let c = p.categories;
    let po = (0..c).map(|i| t[i][i] as f64).sum::<f64>() / n;
    let pe = (0..c)
        .map(|i| {
            let row = t[i].iter().sum::<u64>() as f64 / n;
            let col = t.iter().map(|r| r[i]).sum::<u64>() as f64 / n;
            row * col
        })
        .sum::<f64>();
    if pe >= 1.0 {
        return Err(Error::UndefinedKappa(
            "chance agreement is 1 (both raters constant on one category)".into(),
        ));
    }
    let kappa = (po - pe) / (1.0 - pe);
    let se = (po * (1.0 - po) / (n * (1.0 - pe) * (1.0 - pe))).sqrt();
    Ok(Kappa::with_se(kappa, se))
}

/// Fleiss' kappa over items with a full set of grades (items with missing
/// grades are dropped). The standard error is Fleiss's large-sample formula
/// under the null of no agreement.
pub fn fleiss_kappa(table: &RatingTable) -> Result<Kappa> {
    let rows: Vec<Vec<usize>> = table
        .rows
        .iter()
        .filter(|r| r.iter().all(Option::is_some))
        .map(|r| r.iter().flatten().copied().collect())
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptySet("no fully rated items".into()));
    }
    let n_items = rows.len() as f64;
    let m = table.raters as f64;
    let k = table.categories;
    let mut totals = vec![0f64; k];
    let mut p_bar = 0.0;
    for r in &rows {
        let mut counts = vec![0f64; k];
        for &c in r {
            counts[c] += 1.0;
        }
        p_bar += (counts.iter().map(|x| x * x).sum::<f64>() - m) / (m * (m - 1.0));
        for (t, c) in totals.iter_mut().zip(&counts) {
            *t += c;
        }
    }
    p_bar /= n_items;
    let pj: Vec<f64> = totals.iter().map(|t| t / (n_items * m)).collect();
    let pe = pj.iter().map(|p| p * p).sum::<f64>();
    if pe >= 1.0 {
        return Err(Error::UndefinedKappa("every grade falls in a single category".into()));
    }
    let kappa = (p_bar - pe) / (1.0 - pe);
    let sum_pq = pj.iter().map(|p| p * (1.0 - p)).sum::<f64>();
    let sum_pq_skew = pj.iter().map(|p| p * (1.0 - p) * (1.0 - 2.0 * p)).sum::<f64>();
    let var = 2.0 / (n_items * m * (m - 1.0)) * (sum_pq * sum_pq - sum_pq_skew) / (sum_pq * sum_pq);
    Ok(Kappa::with_se(kappa, var.max(0.0).sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Synthesized,
}

impl std::str::FromStr for Origin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" => Ok(Origin::Real),
            "synthesized" | "synthetic" | "fake" => Ok(Origin::Synthesized),
            other => Err(Error::Parse(format!("unknown origin {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub predicted: Origin,
    pub truth: Origin,
}

/// Counts with one origin taken as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl DetectionCounts {
    pub fn tally(outcomes: &[DetectionOutcome], positive: Origin) -> Self {
        let mut c = Self::default();
        for o in outcomes {
            match (o.predicted == positive, o.truth == positive) {
                (true, true) => c.true_pos += 1,
                (true, false) => c.false_pos += 1,
                (false, false) => c.true_neg += 1,
                (false, true) => c.false_neg += 1,
            }
        }
        c
    }
}

/// Each metric is `None` when its denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub counts: DetectionCounts,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl DetectionMetrics {
    pub fn from_counts(c: DetectionCounts) -> Self {
        Self {
            counts: c,
            accuracy: ratio(c.true_pos + c.true_neg, c.true_pos + c.true_neg + c.false_pos + c.false_neg),
            precision: ratio(c.true_pos, c.true_pos + c.false_pos),
            sensitivity: ratio(c.true_pos, c.true_pos + c.false_neg),
            specificity: ratio(c.true_neg, c.true_neg + c.false_pos),
        }
    }
}

/// Metrics with "real" as the positive class.
pub fn detection_metrics(outcomes: &[DetectionOutcome]) -> DetectionMetrics {
    detection_metrics_with(outcomes, Origin::Real)
}

pub fn detection_metrics_with(outcomes: &[DetectionOutcome], positive: Origin) -> DetectionMetrics {
    DetectionMetrics::from_counts(DetectionCounts::tally(outcomes, positive))
}

#[derive(Debug, Deserialize)]
struct RatingRow {
    item: String,
    rater: String,
    grade: String,
}

#[derive(Debug, Deserialize)]
struct DetectionRow {
    #[allow(dead_code)]
    item: String,
    predicted: String,
    truth: String,
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Ratings loaded from long-format CSV (`item,rater,grade`), with item,
/// rater and grade labels mapped to indices in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoadedRatings {
    pub table: RatingTable,
    pub items: Vec<String>,
    pub raters: Vec<String>,
    pub grades: Vec<String>,
}

pub fn load_ratings(path: &Path) -> Result<LoadedRatings> {
    let mut rows = Vec::new();
    for r in csv_reader(path)?.deserialize::<RatingRow>() {
        rows.push(r.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?);
    }
    ratings_from_rows(rows.into_iter().map(|r| (r.item, r.rater, r.grade)))
}

pub fn ratings_from_rows(rows: impl IntoIterator<Item = (String, String, String)>) -> Result<LoadedRatings> {
    let mut cells: BTreeMap<(String, String), String> = BTreeMap::new();
    for (item, rater, grade) in rows {
        if let Some(prev) = cells.insert((item.clone(), rater.clone()), grade) {
            return Err(Error::Parse(format!("duplicate grade for item {item}, rater {rater} (previous {prev})")));
        }
    }
    let index = |v: Vec<String>| -> Vec<String> {
        let mut v = v;
        v.sort();
        v.dedup();
        v
    };
    let items = index(cells.keys().map(|(i, _)| i.clone()).collect());
    let raters = index(cells.keys().map(|(_, r)| r.clone()).collect());
    let grades = index(cells.values().cloned().collect());
    let pos = |v: &[String], s: &str| v.binary_search_by(|x| x.as_str().cmp(s)).expect("indexed above");
    let mut table = vec![vec![None; raters.len()]; items.len()];
    for ((i, r), g) in &cells {
        table[pos(&items, i)][pos(&raters, r)] = Some(pos(&grades, g));
    }
    Ok(LoadedRatings {
        table: RatingTable::new(grades.len(), table)?,
        items,
        raters,
        grades,
    })
}

/// Detection outcomes from CSV (`item,predicted,truth`).
pub fn load_detections(path: &Path) -> Result<Vec<DetectionOutcome>> {
    let mut out = Vec::new();
    for r in csv_reader(path)?.deserialize::<DetectionRow>() {
        let r = r.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        out.push(DetectionOutcome {
            predicted: r.predicted.parse()?,
            truth: r.truth.parse()?,
        });
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "undefined".into())
}

fn fmt_kappa(k: &Result<Kappa>) -> String {
    match k {
        Ok(k) => format!("{:.4} (95% normal CI {:.4} to {:.4}, SE {:.4})", k.kappa, k.ci_low, k.ci_high, k.std_error),
        Err(e) => format!("undefined ({e})"),
    }
}

/// Plain-text statistics report: detection metrics, then agreement for each
/// named rating table (Fleiss over all raters, Cohen for every rater pair).
pub fn stats_report(detections: Option<&[DetectionOutcome]>, ratings: &[(&str, &LoadedRatings)]) -> String {
    let mut out = String::new();
    if let Some(d) = detections {
        let m = detection_metrics(d);
        let c = m.counts;
        out.push_str("== real vs synthesized detection (positive = real) ==\n");
        out.push_str(&format!(
            "responses {}  TP {}  FP {}  TN {}  FN {}\n",
            d.len(),
            c.true_pos,
            c.false_pos,
            c.true_neg,
            c.false_neg
        ));
        out.push_str(&format!("accuracy    {}\n", fmt_opt(m.accuracy)));
        out.push_str(&format!("precision   {}\n", fmt_opt(m.precision)));
        out.push_str(&format!("sensitivity {}\n", fmt_opt(m.sensitivity)));
        out.push_str(&format!("specificity {}\n", fmt_opt(m.specificity)));
    }
    for (name, r) in ratings {
        let t = &r.table;
        let cons = consensus(t);
        let excluded = cons.iter().filter(|c| c.is_none()).count();
        out.push_str(&format!("== agreement: {name} ==\n"));
        out.push_str(&format!(
            "items {}  raters {}  categories {}  consensus ties excluded {}\n",
            t.rows().len(),
            t.raters(),
            t.categories(),
            excluded
        ));
        out.push_str(&format!("fleiss kappa {}\n", fmt_kappa(&fleiss_kappa(t))));
        for a in 0..t.raters() {
            for b in a + 1..t.raters() {
                let k = t.pair(a, b).and_then(|p| cohen_kappa(&p));
                out.push_str(&format!("cohen kappa {} vs {}: {}\n", r.raters[a], r.raters[b], fmt_kappa(&k)));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consensus_policy() {
        let t = RatingTable::new(
            5,
            vec![
                vec![Some(3), Some(3), Some(4), None],
                vec![Some(3), Some(4), None, None],
                vec![Some(4), Some(4), Some(4), Some(4)],
            ],
        )
        .unwrap();
        assert_eq!(consensus(&t), vec![Some(3), None, Some(4)]);
    }

    #[test]
    fn cohen_contingency_reference() {
        // [[20,5],[10,15]]: p_o = 0.7, p_e = 0.5·0.6 + 0.5·0.4 = 0.5
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (x, y, n) in [(0, 0, 20), (0, 1, 5), (1, 0, 10), (1, 1, 15)] {
            a.extend(std::iter::repeat_n(x, n));
            b.extend(std::iter::repeat_n(y, n));
        }
        let k = cohen_kappa(&PairRatings::new(2, a, b).unwrap()).unwrap();
        assert!((k.kappa - 0.4).abs() < 1e-12);
        assert!(k.ci_low < 0.4 && k.ci_high > 0.4);
    }

    #[test]
    fn constant_raters_are_undefined() {
        let p = PairRatings::new(3, vec![1; 5], vec![1; 5]).unwrap();
        assert!(matches!(cohen_kappa(&p), Err(Error::UndefinedKappa(_))));
        let t = RatingTable::complete(2, vec![vec![0, 0, 0]; 4]).unwrap();
        assert!(matches!(fleiss_kappa(&t), Err(Error::UndefinedKappa(_))));
    }

    #[test]
    fn detection_reference_table() {
        let c = DetectionCounts {
            true_pos: 30,
            false_pos: 20,
            true_neg: 25,
            false_neg: 25,
        };
        let m = DetectionMetrics::from_counts(c);
        assert_eq!(m.accuracy, Some(0.55));
        assert_eq!(m.precision, Some(0.6));
        assert!((m.sensitivity.unwrap() - 30.0 / 55.0).abs() < 1e-15);
        assert!((m.specificity.unwrap() - 25.0 / 45.0).abs() < 1e-15);
    }

    #[test]
    fn always_real_predictor() {
        let d: Vec<DetectionOutcome> = [Origin::Real, Origin::Synthesized]
            .iter()
            .cycle()
            .take(10)
            .map(|&t| DetectionOutcome {
                predicted: Origin::Real,
                truth: t,
            })
            .collect();
        let m = detection_metrics(&d);
        assert_eq!((m.sensitivity, m.specificity, m.accuracy), (Some(1.0), Some(0.0), Some(0.5)));
        assert_eq!(detection_metrics(&[]).accuracy, None);
    }
}
