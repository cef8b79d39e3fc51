//! Ranking and thresholded metrics for multi-label predictions, plus the
//! conditional TPR/FPR diagnostics used to spot co-occurrence bias.

use std::io::Write;

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{shape_err, Error, Result};
use crate::kv::KvMap;
use crate::losses::sigmoid;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_CO_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    Probability,
    Logit,
}

/// Scores, binary ground truth and the decision threshold.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub scores: Array2<f64>,
    pub labels: Array2<u8>,
    pub kind: ScoreKind,
    /// Probability threshold; a score counts as positive when `prob >= threshold`.
    pub threshold: f64,
}

impl PredictionSet {
    pub fn new(scores: Array2<f64>, labels: Array2<u8>, kind: ScoreKind, threshold: f64) -> Result<Self> {
        if scores.dim() != labels.dim() {
            return shape_err(format!(
                "scores are {:?} but labels are {:?}",
                scores.dim(),
                labels.dim()
            ));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Config(format!("decision threshold must lie in (0,1), got {threshold}")));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::UndefinedMetric("non-finite score".into()));
        }
        Ok(Self {
            scores,
            labels,
            kind,
            threshold,
        })
    }

    pub fn probabilities(scores: Array2<f64>, labels: Array2<u8>) -> Result<Self> {
        Self::new(scores, labels, ScoreKind::Probability, DEFAULT_THRESHOLD)
    }

    pub fn classes(&self) -> usize {
        self.scores.ncols()
    }

    pub fn len(&self) -> usize {
        self.scores.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Binarized predictions.
    pub fn decisions(&self) -> Array2<bool> {
        let t = self.threshold;
        match self.kind {
            ScoreKind::Probability => self.scores.mapv(|s| s >= t),
            ScoreKind::Logit => self.scores.mapv(|s| sigmoid(s) >= t),
        }
    }
}

/// Non-interpolated average precision. Ties in score are ordered by
/// ascending example index.
pub fn average_precision(scores: ArrayView1<'_, f64>, labels: ArrayView1<'_, u8>) -> Result<f64> {
    if scores.len() != labels.len() {
        return shape_err("scores and labels differ in length");
    }
    let positives = labels.iter().filter(|&&y| y != 0).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] != 0 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    /// `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
    pub excluded: Vec<usize>,
}

pub fn mean_average_precision(preds: &PredictionSet) -> Result<MapReport> {
    let mut per_class = Vec::with_capacity(preds.classes());
    let mut excluded = Vec::new();
    for k in 0..preds.classes() {
        let labels = preds.labels.column(k);
        if labels.iter().all(|&y| y == 0) {
            excluded.push(k);
            per_class.push(None);
        } else {
            per_class.push(Some(average_precision(preds.scores.column(k), labels)?));
        }
    }
    let included: Vec<f64> = per_class.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::UndefinedMetric("no class has a positive example".into()));
    }
    let map = included.iter().sum::<f64>() / included.len() as f64;
    Ok(MapReport {
        per_class,
        map,
        excluded,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrF1Report {
    pub op: f64,
    pub or: f64,
    pub of1: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub counts: Vec<Confusion>,
    /// One note per zero denominator that was replaced by 0.
    pub flags: Vec<String>,
}

fn ratio(num: usize, den: usize, what: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(format!("{what}: zero denominator"));
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl PrF1Report {
    /// Overall scores pool every decision; per-class scores average the
    /// class precisions and recalls, and CF1 is their harmonic mean.
    pub fn from_counts(counts: Vec<Confusion>) -> Self {
        let mut flags = Vec::new();
        let tp: usize = counts.iter().map(|c| c.tp).sum();
        let fp: usize = counts.iter().map(|c| c.fp).sum();
        let fn_: usize = counts.iter().map(|c| c.fn_).sum();
        let op = ratio(tp, tp + fp, "OP", &mut flags);
        let or = ratio(tp, tp + fn_, "OR", &mut flags);
        let q = counts.len().max(1) as f64;
        let mut cp = 0.0;
        let mut cr = 0.0;
        for (k, c) in counts.iter().enumerate() {
            cp += ratio(c.tp, c.tp + c.fp, &format!("precision of class {k}"), &mut flags);
            cr += ratio(c.tp, c.tp + c.fn_, &format!("recall of class {k}"), &mut flags);
        }
        let (cp, cr) = (cp / q, cr / q);
        Self {
            op,
            or,
            of1: harmonic(op, or),
            cp,
            cr,
            cf1: harmonic(cp, cr),
            counts,
            flags,
        }
    }
}

pub fn pr_f1_suite(preds: &PredictionSet) -> PrF1Report {
    let decisions = preds.decisions();
    let counts = (0..preds.classes())
        .map(|k| {
            let mut c = Confusion::default();
            for (&d, &y) in decisions.column(k).iter().zip(preds.labels.column(k)) {
                match (d, y != 0) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fn_ += 1,
                    (false, false) => c.tn += 1,
                }
            }
            c
        })
        .collect();
    PrF1Report::from_counts(counts)
}

/// Rates for a target class given that a condition class is present.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairRates {
    /// `None` when `support_tp` is zero.
    pub ctpr: Option<f64>,
    /// `None` when `support_fp` is zero.
    pub cfpr: Option<f64>,
    /// Images with both target and condition present.
    pub support_tp: usize,
    /// Images with the condition present and the target absent.
    pub support_fp: usize,
}

fn rates_from(decisions: ArrayView2<'_, bool>, labels: ArrayView2<'_, u8>, target: usize, given: usize) -> PairRates {
    let (mut tp, mut both, mut fp, mut cond_only) = (0, 0, 0, 0);
    for i in 0..labels.nrows() {
        if labels[[i, given]] == 0 {
            continue;
        }
        let hit = decisions[[i, target]];
        if labels[[i, target]] != 0 {
            both += 1;
            tp += hit as usize;
        } else {
            cond_only += 1;
            fp += hit as usize;
        }
    }
    PairRates {
        ctpr: (both > 0).then(|| tp as f64 / both as f64),
        cfpr: (cond_only > 0).then(|| fp as f64 / cond_only as f64),
        support_tp: both,
        support_fp: cond_only,
    }
}

/// `CTPR(a|b)` and `CFPR(a|b)`: how often class `a` is predicted on images
/// containing `b`, split by whether `a` is really there.
pub fn conditional_rates(preds: &PredictionSet, a: usize, b: usize) -> Result<PairRates> {
    let q = preds.classes();
    if a >= q || b >= q {
        return shape_err(format!("class pair ({a},{b}) out of range for {q} classes"));
    }
    Ok(rates_from(preds.decisions().view(), preds.labels.view(), a, b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRow {
    pub a: usize,
    pub b: usize,
    /// Empirical `P(b | a)`.
    pub p_b_given_a: f64,
    /// Rates for target `b` on images containing `a`.
    pub rates: PairRates,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairConditionReport {
    pub rows: Vec<PairRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateKey {
    Ctpr,
    Cfpr,
}

impl PairConditionReport {
    pub fn find(&self, a: usize, b: usize) -> Option<&PairRow> {
        self.rows.iter().find(|r| r.a == a && r.b == b)
    }

    /// Orders rows by a baseline's rate for the same pair, descending.
    /// Pairs without a baseline value go last in their original order.
    pub fn sort_by_baseline(&mut self, baseline: &PairConditionReport, key: RateKey) {
        let value = |row: &PairRow| {
            baseline.find(row.a, row.b).and_then(|r| match key {
                RateKey::Ctpr => r.rates.ctpr,
                RateKey::Cfpr => r.rates.cfpr,
            })
        };
        self.rows.sort_by(|x, y| match (value(x), value(y)) {
            (Some(u), Some(v)) => v.total_cmp(&u),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        });
    }

    /// Class numbers are written 1-based, like the `p_k` prediction columns.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        writeln!(w, "a,b,p_b_given_a,ctpr,cfpr,support_tp,support_fp")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.a + 1,
                r.b + 1,
                r.p_b_given_a,
                opt(r.rates.ctpr),
                opt(r.rates.cfpr),
                r.rates.support_tp,
                r.rates.support_fp
            )?;
        }
        Ok(())
    }
}

/// All ordered pairs `(a, b)`, `a != b`, whose empirical `P(b|a)` exceeds
/// `co_threshold`, with the conditional rates of `b` given `a`.
pub fn pair_scan(preds: &PredictionSet, co_threshold: f64) -> PairConditionReport {
    let decisions = preds.decisions();
    let labels = &preds.labels;
    let q = preds.classes();
    let mut rows = Vec::new();
    for a in 0..q {
        let with_a = labels.column(a).iter().filter(|&&y| y != 0).count();
        if with_a == 0 {
            continue;
        }
        for b in (0..q).filter(|&b| b != a) {
            let both = labels
                .rows()
                .into_iter()
                .filter(|r| r[a] != 0 && r[b] != 0)
                .count();
            let p = both as f64 / with_a as f64;
            if p > co_threshold {
                rows.push(PairRow {
                    a,
                    b,
                    p_b_given_a: p,
                    rates: rates_from(decisions.view(), labels.view(), b, a),
                });
            }
        }
    }
    PairConditionReport { rows }
}

/// Flat `key=value` summary of ranking and thresholded metrics.
pub fn metrics_report(map: &MapReport, prf: &PrF1Report, threshold: f64) -> KvMap {
    let mut out = KvMap::new();
    out.insert("map".into(), map.map.to_string());
    for (k, ap) in map.per_class.iter().enumerate() {
        out.insert(
            format!("ap_{}", k + 1),
            ap.map_or_else(|| "NA".to_string(), |v| v.to_string()),
        );
    }
    out.insert("classes_excluded".into(), map.excluded.len().to_string());
    for (key, v) in [
        ("op", prf.op),
        ("or", prf.or),
        ("of1", prf.of1),
        ("cp", prf.cp),
        ("cr", prf.cr),
        ("cf1", prf.cf1),
    ] {
        out.insert(key.into(), v.to_string());
    }
    out.insert("threshold".into(), threshold.to_string());
    out.insert("zero_denominators".into(), prf.flags.len().to_string());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    /// Precision at each positive's rank, with rank counted directly
    /// rather than by sorting.
    fn ap_by_counting(scores: &[f64], labels: &[u8]) -> f64 {
        let ahead = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
        let pos: Vec<usize> = (0..scores.len()).filter(|&i| labels[i] == 1).collect();
        let mut terms: Vec<(usize, usize)> = pos
            .iter()
            .map(|&i| {
                let rank = 1 + (0..scores.len()).filter(|&j| ahead(i, j)).count();
                let hits = 1 + pos.iter().filter(|&&j| ahead(i, j)).count();
                (rank, hits)
            })
            .collect();
        // accumulate in rank order so rounding matches a top-down scan
        terms.sort_unstable();
        terms.iter().map(|&(rank, hits)| hits as f64 / rank as f64).sum::<f64>() / pos.len() as f64
    }

    fn ap(scores: &[f64], labels: &[u8]) -> f64 {
        average_precision(
            ArrayView1::from(scores),
            ArrayView1::from(labels),
        )
        .unwrap()
    }

    #[test]
    fn ap_reference_values() {
        assert_eq!(ap(&[0.9, 0.8, 0.1, 0.05], &[1, 1, 0, 0]), 1.0);
        assert!((ap(&[0.9, 0.8, 0.7], &[1, 0, 1]) - 0.833333).abs() < 1e-6);
        assert_eq!(ap(&[0.9, 0.8, 0.7, 0.1], &[0, 0, 0, 1]), 0.25);
        // equal scores: earlier index ranks first
        assert_eq!(ap(&[0.5, 0.5], &[0, 1]), 0.5);
        assert_eq!(ap(&[0.5, 0.5], &[1, 0]), 1.0);
        assert!(average_precision(array![0.3].view(), array![0u8].view()).is_err());
    }

    #[test]
    fn ap_matches_counting_oracle_for_all_label_patterns() {
        let mut rng = substream(31, "ap");
        for n in 1..=8 {
            // coarse scores so ties occur
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64 / 4.0).collect();
            for pattern in 1u32..(1 << n) {
                let labels: Vec<u8> = (0..n).map(|i| ((pattern >> i) & 1) as u8).collect();
                assert_eq!(ap(&scores, &labels), ap_by_counting(&scores, &labels));
            }
        }
    }

    #[test]
    fn map_cases() {
        let labels = array![[1u8, 0], [0, 1], [0, 0]];
        let scores = array![[0.9, 0.8], [0.1, 0.7], [0.2, 0.6]];
        let m = mean_average_precision(&PredictionSet::probabilities(scores.clone(), labels.clone()).unwrap()).unwrap();
        assert_eq!(m.per_class, vec![Some(1.0), Some(0.5)]);
        assert_eq!(m.map, 0.75);

        let swapped = PredictionSet::probabilities(
            scores.select(ndarray::Axis(1), &[1, 0]),
            labels.select(ndarray::Axis(1), &[1, 0]),
        )
        .unwrap();
        assert_eq!(mean_average_precision(&swapped).unwrap().map, 0.75);

        let excluded = PredictionSet::probabilities(scores.clone(), array![[1u8, 0], [0, 0], [0, 0]]).unwrap();
        let m = mean_average_precision(&excluded).unwrap();
        assert_eq!((m.map, m.excluded.clone()), (1.0, vec![1]));
        let none = PredictionSet::probabilities(scores, Array2::zeros((3, 2))).unwrap();
        assert!(mean_average_precision(&none).is_err());
    }

    #[test]
    fn map_matches_reference_evaluator() {
        let mut rng = substream(32, "map");
        for _ in 0..20 {
            let scores = Array2::from_shape_simple_fn((20, 5), || rng.random_range(0..10) as f64 / 10.0);
            let labels = Array2::from_shape_simple_fn((20, 5), || rng.random_bool(0.3) as u8);
            let preds = PredictionSet::probabilities(scores.clone(), labels.clone()).unwrap();
            let mut aps = Vec::new();
            for k in 0..5 {
                let l: Vec<u8> = labels.column(k).to_vec();
                if l.contains(&1) {
                    aps.push(ap_by_counting(&scores.column(k).to_vec(), &l));
                }
            }
            let expected = aps.iter().sum::<f64>() / aps.len() as f64;
            assert_eq!(mean_average_precision(&preds).unwrap().map, expected);
        }
    }

    #[test]
    fn prf1_cases() {
        let labels = array![[1u8, 0], [0, 1], [1, 1]];
        let perfect = PredictionSet::probabilities(labels.mapv(f64::from), labels.clone()).unwrap();
        let r = pr_f1_suite(&perfect);
        for v in [r.op, r.or, r.of1, r.cp, r.cr, r.cf1] {
            assert_eq!(v, 1.0);
        }

        let negative = PredictionSet::probabilities(Array2::zeros((3, 2)), labels.clone()).unwrap();
        let r = pr_f1_suite(&negative);
        assert_eq!((r.or, r.of1), (0.0, 0.0));
        assert!(!r.flags.is_empty());

        // class 0: tp=1 (row 0), fn=1 (row 2), fp=1 (row 1)
        // class 1: tp=2 (rows 1, 2), fp=0, fn=0, tn=1
        let scores = array![[0.7, 0.2], [0.5, 0.9], [0.49, 0.6]];
        let r = pr_f1_suite(&PredictionSet::probabilities(scores, labels).unwrap());
        assert_eq!(r.counts[0], Confusion { tp: 1, fp: 1, fn_: 1, tn: 0 });
        assert_eq!(r.counts[1], Confusion { tp: 2, fp: 0, fn_: 0, tn: 1 });
        assert_eq!(r.op, 3.0 / 4.0);
        assert_eq!(r.or, 3.0 / 4.0);
        assert_eq!(r.cp, (0.5 + 1.0) / 2.0);
        assert_eq!(r.cr, (0.5 + 1.0) / 2.0);
        assert!((r.cf1 - 0.75).abs() < 1e-15);
        assert_eq!(PrF1Report::from_counts(r.counts.clone()), r);
    }

    #[test]
    fn logit_scores_use_the_same_threshold() {
        let labels = array![[1u8], [0]];
        let p = PredictionSet::new(array![[0.0], [-0.1]], labels, ScoreKind::Logit, 0.5).unwrap();
        assert_eq!(p.decisions(), array![[true], [false]]);
    }

    #[test]
    fn conditional_rates_hand_enumeration() {
        // columns: a, b
        let labels = array![[1u8, 1], [1, 1], [0, 1], [0, 1], [0, 1], [1, 0]];
        let scores = array![[0.9, 0.0], [0.2, 0.0], [0.8, 0.0], [0.1, 0.0], [0.6, 0.0], [0.9, 0.0]];
        let preds = PredictionSet::probabilities(scores, labels.clone()).unwrap();
        let r = conditional_rates(&preds, 0, 1).unwrap();
        assert_eq!((r.support_tp, r.support_fp), (2, 3));
        assert_eq!(r.ctpr, Some(0.5));
        assert_eq!(r.cfpr, Some(2.0 / 3.0));

        let all = PredictionSet::probabilities(Array2::ones((6, 2)), labels.clone()).unwrap();
        let r = conditional_rates(&all, 0, 1).unwrap();
        assert_eq!((r.ctpr, r.cfpr), (Some(1.0), Some(1.0)));
        let none = PredictionSet::probabilities(Array2::zeros((6, 2)), labels.clone()).unwrap();
        let r = conditional_rates(&none, 0, 1).unwrap();
        assert_eq!((r.ctpr, r.cfpr), (Some(0.0), Some(0.0)));

        // b given a: a is present in rows 0, 1, 5 and b is absent only in row 5
        let r = conditional_rates(&none, 1, 0).unwrap();
        assert_eq!((r.support_tp, r.support_fp), (2, 1));
        let lone = PredictionSet::probabilities(Array2::zeros((1, 2)), array![[1u8, 0]]).unwrap();
        assert_eq!(conditional_rates(&lone, 0, 1).unwrap().ctpr, None);
        assert!(conditional_rates(&lone, 0, 2).is_err());
    }

    #[test]
    fn pair_scan_rows_and_csv() {
        let labels = array![[1u8, 1, 0], [1, 1, 0], [1, 0, 0], [0, 0, 1], [0, 1, 0]];
        let preds = PredictionSet::probabilities(Array2::from_elem((5, 3), 0.7), labels).unwrap();
        let report = pair_scan(&preds, 0.2);
        // P(1|0)=2/3, P(0|1)=2/3; class 2 never co-occurs
        assert_eq!(report.rows.len(), 2);
        let row = report.find(0, 1).unwrap();
        assert!((row.p_b_given_a - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((row.rates.support_tp, row.rates.support_fp), (2, 1));

        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("a,b,p_b_given_a,ctpr,cfpr,support_tp,support_fp\n"));

        let mut other = report.clone();
        other.rows[0].rates.cfpr = Some(0.1);
        other.rows[1].rates.cfpr = Some(0.9);
        let mut sorted = report.clone();
        sorted.sort_by_baseline(&other, RateKey::Cfpr);
        assert_eq!((sorted.rows[0].a, sorted.rows[0].b), (other.rows[1].a, other.rows[1].b));
    }

    #[test]
    fn report_keys() {
        let labels = array![[1u8, 0], [0, 0]];
        let preds = PredictionSet::probabilities(array![[0.9, 0.1], [0.2, 0.3]], labels).unwrap();
        let kv = metrics_report(&mean_average_precision(&preds).unwrap(), &pr_f1_suite(&preds), 0.5);
        assert_eq!(kv["map"], "1");
        assert_eq!(kv["ap_2"], "NA");
        assert_eq!(kv["classes_excluded"], "1");
    }

    proptest! {
        #[test]
        fn ap_invariant_under_increasing_transform(
            raw in proptest::collection::vec((0u32..50, 0u8..2), 1..30)
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64 / 10.0).collect();
            let mut labels: Vec<u8> = raw.iter().map(|r| r.1).collect();
            labels[0] = 1;
            let moved: Vec<f64> = scores.iter().map(|&s| s * s * s + 3.0 * s - 7.0).collect();
            prop_assert_eq!(ap(&scores, &labels), ap(&moved, &labels));
        }

        #[test]
        fn rates_are_probabilities(
            cells in proptest::collection::vec((0.0f64..1.0, 0u8..2, 0u8..2), 1..40)
        ) {
            let n = cells.len();
            let scores = Array2::from_shape_fn((n, 2), |(i, k)| if k == 0 { cells[i].0 } else { 1.0 - cells[i].0 });
            let labels = Array2::from_shape_fn((n, 2), |(i, k)| if k == 0 { cells[i].1 } else { cells[i].2 });
            let preds = PredictionSet::probabilities(scores, labels).unwrap();
            if let Ok(m) = mean_average_precision(&preds) {
                prop_assert!((0.0..=1.0).contains(&m.map));
            }
            for row in pair_scan(&preds, 0.0).rows {
                for v in [row.rates.ctpr, row.rates.cfpr].into_iter().flatten() {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
            let r = pr_f1_suite(&preds);
            prop_assert_eq!(PrF1Report::from_counts(r.counts.clone()), r);
        }
    }
}
