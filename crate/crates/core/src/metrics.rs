//! Confusion matrices, per-class precision/recall/F1, and recovery of
//! integer counts from printed row percentages.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::labels::{Decision, Label};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("{predictions} predictions but {truths} truths")]
    LengthMismatch { predictions: usize, truths: usize },
    #[error("class index {index} outside 0..{num_classes}")]
    LabelOutOfRange { index: usize, num_classes: usize },
    #[error("confusion matrix is empty")]
    Empty,
    #[error("row {row} has {got} cells, expected {expected}")]
    RaggedRow { row: usize, expected: usize, got: usize },
    #[error("no counts up to {n_max} per class are consistent with the percentages")]
    NoConsistentCounts { n_max: usize },
    #[error("percentage table: {0}")]
    Table(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Rows are truth, columns prediction. The optional trailing column counts
/// samples that no class claimed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    pub uncertain: Option<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>, counts: Vec<Vec<u64>>, uncertain: Option<Vec<u64>>) -> Result<Self> {
        let k = labels.len();
        if counts.len() != k {
            return Err(MetricsError::RaggedRow { row: counts.len(), expected: k, got: counts.len() });
        }
        if let Some((row, r)) = counts.iter().enumerate().find(|(_, r)| r.len() != k) {
            return Err(MetricsError::RaggedRow { row, expected: k, got: r.len() });
        }
        if let Some(u) = &uncertain {
            if u.len() != k {
                return Err(MetricsError::RaggedRow { row: k, expected: k, got: u.len() });
            }
        }
        Ok(Self { labels, counts, uncertain })
    }

    /// The standard five-class labels with zero counts.
    pub fn empty(with_uncertain: bool) -> Self {
        Self {
            labels: Label::ALL.iter().map(|l| l.title().to_string()).collect(),
            counts: vec![vec![0; Label::ALL.len()]; Label::ALL.len()],
            uncertain: with_uncertain.then(|| vec![0; Label::ALL.len()]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn uncertain_count(&self, row: usize) -> u64 {
        self.uncertain.as_ref().map_or(0, |u| u[row])
    }

    pub fn row_total(&self, row: usize) -> u64 {
        self.counts[row].iter().sum::<u64>() + self.uncertain_count(row)
    }

    pub fn total(&self) -> u64 {
        (0..self.num_classes()).map(|r| self.row_total(r)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Row `r` as percentages, uncertain last when present.
    pub fn row_percentages(&self, r: usize) -> Vec<f64> {
        let n = self.row_total(r);
        let mut cells: Vec<u64> = self.counts[r].clone();
        if let Some(u) = &self.uncertain {
            cells.push(u[r]);
        }
        cells.iter().map(|&c| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 }).collect()
    }

    /// Reorders classes so that new class `i` is old class `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            labels: perm.iter().map(|&p| self.labels[p].clone()).collect(),
            counts: perm.iter().map(|&r| perm.iter().map(|&c| self.counts[r][c]).collect()).collect(),
            uncertain: self.uncertain.as_ref().map(|u| perm.iter().map(|&p| u[p]).collect()),
        }
    }

    /// Tables 1-2 style: one row per truth class with one-decimal row
    /// percentages, followed by an F1 row.
    pub fn render_table(&self, report: &MetricsReport) -> String {
        let mut header: Vec<String> = vec![String::new()];
        header.extend(self.labels.iter().cloned());
        if self.uncertain.is_some() {
            header.push("Uncertain".into());
        }
        let mut rows = vec![header];
        for r in 0..self.num_classes() {
            let mut row = vec![self.labels[r].clone()];
            row.extend(self.row_percentages(r).into_iter().map(|p| format!("{}%", format_one_decimal(p))));
            rows.push(row);
        }
        let mut f1 = vec!["F1 Score".to_string()];
        f1.extend(report.f1.iter().map(|v| format!("{v:.2}")));
        rows.push(f1);

        let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
        let widths: Vec<usize> =
            (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for row in &rows {
            let line: Vec<String> = row.iter().enumerate().map(|(c, s)| format!("{s:>w$}", w = widths[c])).collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        let _ = writeln!(out, "Accuracy: {}%", format_one_decimal(report.accuracy * 100.0));
        out
    }

    /// `truth,<label>...[,uncertain]` followed by one count row per class.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["truth".to_string()];
        header.extend(self.labels.iter().cloned());
        if self.uncertain.is_some() {
            header.push("uncertain".into());
        }
        w.write_record(&header).expect("in-memory write");
        for r in 0..self.num_classes() {
            let mut rec = vec![self.labels[r].clone()];
            rec.extend(self.counts[r].iter().map(u64::to_string));
            if let Some(u) = &self.uncertain {
                rec.push(u[r].to_string());
            }
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
    }
}

/// Round-half-up to one decimal, computed in decimal rather than binary so
/// that e.g. 6.25 renders as "6.3".
pub fn format_one_decimal(pct: f64) -> String {
    let tenths = round_tenths(pct);
    format!("{}.{}", tenths / 10, tenths % 10)
}

fn round_tenths(pct: f64) -> i64 {
    let s = format!("{:.6}", pct);
    let v: f64 = s.parse().expect("formatted float");
    (v * 10.0 + 0.5 + 1e-9).floor() as i64
}

/// Exact round-half-up of `100 * num / den` in tenths of a percent.
fn ratio_tenths(num: u64, den: u64) -> i64 {
    ((2000 * num + den) / (2 * den)) as i64
}

/// Tallies decisions against truths over the five fixed classes.
pub fn confusion(predictions: &[Decision], truths: &[Label]) -> Result<ConfusionMatrix> {
    let preds: Vec<Option<usize>> = predictions.iter().map(|d| d.label().map(Label::index)).collect();
    let truths: Vec<usize> = truths.iter().map(|l| l.index()).collect();
    let mut m = confusion_indices(Label::ALL.len(), &preds, &truths)?;
    m.labels = Label::ALL.iter().map(|l| l.title().to_string()).collect();
    Ok(m)
}

/// Index-based tally; `None` predictions go to the uncertain column.
pub fn confusion_indices(num_classes: usize, predictions: &[Option<usize>], truths: &[usize]) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::LengthMismatch { predictions: predictions.len(), truths: truths.len() });
    }
    let check = |index: usize| {
        if index < num_classes {
            Ok(index)
        } else {
            Err(MetricsError::LabelOutOfRange { index, num_classes })
        }
    };
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    let mut uncertain = vec![0u64; num_classes];
    for (p, &t) in predictions.iter().zip(truths) {
        let t = check(t)?;
        match p {
            Some(p) => counts[t][check(*p)?] += 1,
            None => uncertain[t] += 1,
        }
    }
    Ok(ConfusionMatrix { labels: (0..num_classes).map(|i| i.to_string()).collect(), counts, uncertain: Some(uncertain) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Precision,
    Recall,
    F1,
}

/// A metric whose denominator was zero and was reported as 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UndefinedMetric {
    pub class: usize,
    pub metric: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub labels: Vec<String>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub accuracy: f64,
    pub undefined: Vec<UndefinedMetric>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["class", "precision", "recall", "f1"]).expect("in-memory write");
        for i in 0..self.labels.len() {
            w.write_record([
                self.labels[i].clone(),
                format!("{:.4}", self.precision[i]),
                format!("{:.4}", self.recall[i]),
                format!("{:.4}", self.f1[i]),
            ])
            .expect("in-memory write");
        }
        w.write_record(["accuracy".to_string(), String::new(), String::new(), format!("{:.4}", self.accuracy)])
            .expect("in-memory write");
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
    }
}

/// Uncertain samples never count as a predicted class, so they are absent
/// from precision denominators but still lower recall and accuracy.
pub fn metrics_from_confusion(m: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = m.total();
    if m.num_classes() == 0 || total == 0 {
        return Err(MetricsError::Empty);
    }
    let k = m.num_classes();
    let mut undefined = Vec::new();
    let mut ratio = |num: u64, den: u64, class: usize, metric: Metric| {
        if den == 0 {
            undefined.push(UndefinedMetric { class, metric });
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let mut precision = Vec::with_capacity(k);
    let mut recall = Vec::with_capacity(k);
    for i in 0..k {
        let tp = m.counts[i][i];
        let predicted: u64 = (0..k).map(|r| m.counts[r][i]).sum();
        precision.push(ratio(tp, predicted, i, Metric::Precision));
        recall.push(ratio(tp, m.row_total(i), i, Metric::Recall));
    }
    let f1 = (0..k)
        .map(|i| {
            let s = precision[i] + recall[i];
            if s == 0.0 {
                undefined.push(UndefinedMetric { class: i, metric: Metric::F1 });
                0.0
            } else {
                2.0 * precision[i] * recall[i] / s
            }
        })
        .collect();
    Ok(MetricsReport {
        labels: m.labels.clone(),
        precision,
        recall,
        f1,
        accuracy: m.trace() as f64 / total as f64,
        undefined,
    })
}

/// Counts for one row of `n` samples implied by its printed percentages,
/// or `None` when re-rendering them would not reproduce the print.
fn row_counts(pcts: &[f64], n: usize) -> Option<Vec<u64>> {
    let mut cells = Vec::with_capacity(pcts.len());
    for &p in pcts {
        let c = (p * n as f64 / 100.0).round();
        if c < 0.0 {
            return None;
        }
        let c = c as u64;
        if ratio_tenths(c, n as u64) != round_tenths(p) {
            return None;
        }
        cells.push(c);
    }
    (cells.iter().sum::<u64>() == n as u64).then_some(cells)
}

/// Rebuilds a confusion matrix from printed row percentages and overall
/// accuracy. Row `i`'s diagonal cell is column `i`; columns beyond the row
/// count are treated as the uncertain column.
///
/// Among all per-class sample counts up to `n_max` whose cells re-render to
/// the printed percentages and whose accuracy re-renders to the printed one
/// (both at one decimal), returns the smallest total; ties go to the most
/// balanced counts (least sum of squares), then lexicographically smallest.
pub fn reconstruct_counts(row_percentages: &[Vec<f64>], overall_accuracy_pct: f64, n_max: usize) -> Result<ConfusionMatrix> {
    let k = row_percentages.len();
    if k == 0 {
        return Err(MetricsError::Empty);
    }
    let width = row_percentages[0].len();
    if width < k || width > k + 1 {
        return Err(MetricsError::RaggedRow { row: 0, expected: k, got: width });
    }
    if let Some((row, r)) = row_percentages.iter().enumerate().find(|(_, r)| r.len() != width) {
        return Err(MetricsError::RaggedRow { row, expected: width, got: r.len() });
    }
    let candidates: Vec<Vec<(usize, Vec<u64>)>> = row_percentages
        .iter()
        .map(|pcts| (1..=n_max).filter_map(|n| row_counts(pcts, n).map(|c| (n, c))).collect())
        .collect();
    if candidates.iter().any(Vec::is_empty) {
        return Err(MetricsError::NoConsistentCounts { n_max });
    }
    let target = round_tenths(overall_accuracy_pct);

    let ceiling = k * n_max;
    let mut t_max = 64.min(ceiling);
    loop {
        if let Some(ns) = search(&candidates, target, t_max) {
            let rows: Vec<Vec<u64>> = ns.iter().enumerate().map(|(i, &ci)| candidates[i][ci].1.clone()).collect();
            let counts = rows.iter().map(|r| r[..k].to_vec()).collect();
            let uncertain = (width > k).then(|| rows.iter().map(|r| r[k]).collect());
            let labels = if k == Label::ALL.len() {
                Label::ALL.iter().map(|l| l.title().to_string()).collect()
            } else {
                (0..k).map(|i| i.to_string()).collect()
            };
            return ConfusionMatrix::new(labels, counts, uncertain);
        }
        if t_max >= ceiling {
            return Err(MetricsError::NoConsistentCounts { n_max });
        }
        t_max = (t_max * 2).min(ceiling);
    }
}

/// Best partial assignment reaching a `(total, correct)` state.
#[derive(Clone)]
struct Partial {
    sumsq: u64,
    ns: Vec<usize>,
    picks: Vec<usize>,
}

fn better(a: &Partial, b: &Partial) -> bool {
    (a.sumsq, &a.ns) < (b.sumsq, &b.ns)
}

/// DP over rows with state `(total, correct)`, bounded by `t_max` samples.
/// Returns the chosen candidate index per row.
fn search(candidates: &[Vec<(usize, Vec<u64>)>], target_tenths: i64, t_max: usize) -> Option<Vec<usize>> {
    let idx = |t: usize, c: usize| t * (t_max + 1) + c;
    let mut layer: Vec<Option<Partial>> = vec![None; (t_max + 1) * (t_max + 1)];
    layer[idx(0, 0)] = Some(Partial { sumsq: 0, ns: vec![], picks: vec![] });
    for (row, cands) in candidates.iter().enumerate() {
        let mut next: Vec<Option<Partial>> = vec![None; layer.len()];
        for t in 0..=t_max {
            for c in 0..=t {
                let Some(p) = &layer[idx(t, c)] else { continue };
                for (ci, (n, cells)) in cands.iter().enumerate() {
                    let nt = t + n;
                    if nt > t_max {
                        break;
                    }
                    let nc = c + cells[row] as usize;
                    let mut ns = p.ns.clone();
                    ns.push(*n);
                    let mut picks = p.picks.clone();
                    picks.push(ci);
                    let cand = Partial { sumsq: p.sumsq + (*n as u64).pow(2), ns, picks };
                    let slot = &mut next[idx(nt, nc)];
                    if slot.as_ref().map_or(true, |s| better(&cand, s)) {
                        *slot = Some(cand);
                    }
                }
            }
        }
        layer = next;
    }
    let mut best: Option<(usize, Partial)> = None;
    for t in 1..=t_max {
        for c in 0..=t {
            let Some(p) = &layer[idx(t, c)] else { continue };
            if ratio_tenths(c as u64, t as u64) != target_tenths {
                continue;
            }
            if best.as_ref().map_or(true, |(bt, b)| t < *bt || (t == *bt && better(p, b))) {
                best = Some((t, p.clone()));
            }
        }
        if best.is_some() {
            break;
        }
    }
    best.map(|(_, p)| p.picks)
}

/// Printed confusion table: row percentages (truth rows, optional trailing
/// uncertain column), the printed overall accuracy and, optionally, the
/// printed F1 row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentageTable {
    pub name: String,
    pub rows: Vec<Vec<f64>>,
    pub accuracy_pct: f64,
    pub stated_f1: Option<Vec<f64>>,
}

/// Reads a CSV whose first column names the truth class and whose other
/// columns are percentages. `# name:`, `# accuracy_pct:` and `# stated_f1:`
/// metadata lines precede the header.
pub fn parse_percentage_table(text: &str) -> Result<PercentageTable> {
    let bad = |m: String| MetricsError::Table(m);
    let mut name = String::new();
    let mut accuracy_pct = None;
    let mut stated_f1 = None;
    for line in text.lines().map(str::trim).filter(|l| l.starts_with('#')) {
        let Some((k, v)) = line.trim_start_matches('#').split_once(':') else { continue };
        let v = v.trim();
        match k.trim() {
            "name" => name = v.to_string(),
            "accuracy_pct" => accuracy_pct = Some(v.parse::<f64>().map_err(|_| bad(format!("accuracy {v:?}")))?),
            "stated_f1" => {
                let vals = v
                    .split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|t| !t.is_empty())
                    .map(|t| t.parse::<f64>().map_err(|_| bad(format!("F1 value {t:?}"))))
                    .collect::<Result<Vec<_>>>()?;
                stated_f1 = Some(vals);
            }
            _ => {}
        }
    }
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let row = rec
            .iter()
            .skip(1)
            .map(|t| t.trim_end_matches('%').parse::<f64>().map_err(|_| bad(format!("cell {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(MetricsError::Empty);
    }
    let accuracy_pct = accuracy_pct.ok_or_else(|| bad("missing accuracy_pct".into()))?;
    Ok(PercentageTable { name, rows, accuracy_pct, stated_f1 })
}
