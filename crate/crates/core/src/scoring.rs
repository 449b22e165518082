//! Corpus-level MNER / EEG / GMNER scoring.
//!
//! For a predicted record `(ê, t̂, b̂)` paired with a gold record `(e, t, b)`:
//!
//! * `c_et = 1` iff `ê = e` and `t̂ = t`;
//! * `c_b = 1` iff both boxes are absent, or both are present with
//!   `IoU(b̂, b) >= 0.5`;
//! * MNER counts pairs with `c_et`, EEG pairs with `ê = e` and `c_b`, GMNER
//!   pairs with `c_et * c_b`.
//!
//! Counts are micro-averaged over the corpus. Precision, recall, F1,
//! Acc@IoU and mean IoU are all 0 when their denominator is 0.
//!
//! Pairing is one-to-one and only between records with equal (normalized)
//! spans. [`score`] pairs greedily by descending pair IoU (two absent boxes
//! rank as 1, one absent box as 0); [`oracle_score`] enumerates every
//! pairing and keeps the best, for cross-checking.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt;

use log::warn;
use serde::ser::SerializeMap;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::geometry::BBox;
use crate::scalar::Scalar;
use crate::schema::{normalize_span, EntityRecord};

/// IoU threshold of the box-correctness predicate.
pub const BOX_IOU_THRESHOLD: f64 = 0.5;

/// Default Acc@IoU thresholds.
pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.5, 0.75];

/// Largest per-side record count accepted by [`oracle_score`].
pub const ORACLE_MAX_RECORDS: usize = 6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoreError {
    #[error("duplicate example id {id:?} in {side}")]
    DuplicateId { side: &'static str, id: String },
    #[error("example {id:?} has {n_pred} predicted / {n_gold} gold records; the oracle handles at most {max} per side")]
    TooLarge {
        id: String,
        n_pred: usize,
        n_gold: usize,
        max: usize,
    },
    #[error("IoU threshold {0} is outside [0, 1]")]
    Threshold(f64),
}

/// Correctness of one predicted/gold pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchOutcome {
    pub c_et: bool,
    pub c_b: bool,
}

impl MatchOutcome {
    #[inline]
    pub fn c(&self) -> bool {
        self.c_et && self.c_b
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub pred: usize,
    pub gold: usize,
    /// IoU of the two boxes; `None` unless both are present.
    pub box_iou: Option<f64>,
    pub outcome: MatchOutcome,
}

impl MatchedPair {
    fn rank_iou(&self) -> f64 {
        pair_rank(self.box_iou, self.outcome)
    }
}

fn pair_rank(box_iou: Option<f64>, outcome: MatchOutcome) -> f64 {
    match box_iou {
        Some(v) => v,
        // both absent => c_b holds; exactly one absent => it does not
        None if outcome.c_b => 1.0,
        None => 0.0,
    }
}

fn evaluate_pair<T: Scalar>(
    p: &EntityRecord<T>,
    g: &EntityRecord<T>,
) -> (Option<f64>, MatchOutcome) {
    let box_iou = match (&p.bbox, &g.bbox) {
        (Some(a), Some(b)) => Some(a.iou(b).as_f64()),
        _ => None,
    };
    let c_b = match (&p.bbox, &g.bbox) {
        (None, None) => true,
        (Some(_), Some(_)) => box_iou.is_some_and(|v| v >= BOX_IOU_THRESHOLD),
        _ => false,
    };
    let outcome = MatchOutcome {
        c_et: p.span == g.span && p.etype == g.etype,
        c_b,
    };
    (box_iou, outcome)
}

fn span_candidates<T: Scalar>(
    pred: &[EntityRecord<T>],
    gold: &[EntityRecord<T>],
) -> Vec<MatchedPair> {
    let mut out = Vec::new();
    for (gi, g) in gold.iter().enumerate() {
        for (pi, p) in pred.iter().enumerate() {
            if p.span == g.span {
                let (box_iou, outcome) = evaluate_pair(p, g);
                out.push(MatchedPair {
                    pred: pi,
                    gold: gi,
                    box_iou,
                    outcome,
                });
            }
        }
    }
    out
}

fn content_cmp<T: Scalar>(a: &EntityRecord<T>, b: &EntityRecord<T>) -> Ordering {
    let key = |r: &EntityRecord<T>| r.bbox.map(|b| b.to_array().map(|c| c.as_f64()));
    a.etype.cmp(&b.etype).then_with(|| match (key(a), key(b)) {
        (None, None) => Ordering::Equal,
        (None, Some(_)) => Ordering::Less,
        (Some(_), None) => Ordering::Greater,
        (Some(x), Some(y)) => x
            .iter()
            .zip(&y)
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal),
    })
}

/// One-to-one greedy pairing of span-equal records.
///
/// Candidates are taken by descending pair IoU; ties prefer type-correct
/// pairs, then fall back to record content and finally to
/// `(gold index, pred index)`, so reordering records never changes which
/// contents get paired.
pub fn match_records<T: Scalar>(
    pred: &[EntityRecord<T>],
    gold: &[EntityRecord<T>],
) -> Vec<MatchedPair> {
    let mut cands = span_candidates(pred, gold);
    cands.sort_by(|a, b| {
        b.rank_iou()
            .total_cmp(&a.rank_iou())
            .then_with(|| b.outcome.c_et.cmp(&a.outcome.c_et))
            .then_with(|| content_cmp(&gold[a.gold], &gold[b.gold]))
            .then_with(|| content_cmp(&pred[a.pred], &pred[b.pred]))
            .then_with(|| (a.gold, a.pred).cmp(&(b.gold, b.pred)))
    });
    let mut used_pred = vec![false; pred.len()];
    let mut used_gold = vec![false; gold.len()];
    let mut out = Vec::new();
    for c in cands {
        if !used_pred[c.pred] && !used_gold[c.gold] {
            used_pred[c.pred] = true;
            used_gold[c.gold] = true;
            out.push(c);
        }
    }
    out.sort_by_key(|p| p.gold);
    out
}

/// Pairing that maximizes, in order, GMNER, EEG and MNER correct counts,
/// total pair IoU and number of pairs, by exhaustive enumeration.
pub fn oracle_match<T: Scalar>(
    pred: &[EntityRecord<T>],
    gold: &[EntityRecord<T>],
) -> Vec<MatchedPair> {
    let cands = span_candidates(pred, gold);
    let mut by_gold: Vec<Vec<MatchedPair>> = vec![Vec::new(); gold.len()];
    for c in cands {
        by_gold[c.gold].push(c);
    }

    type Objective = (usize, usize, usize, f64, usize);
    fn objective(pairs: &[MatchedPair]) -> Objective {
        let mut o = (0, 0, 0, 0.0, pairs.len());
        for p in pairs {
            o.0 += p.outcome.c() as usize;
            o.1 += p.outcome.c_b as usize;
            o.2 += p.outcome.c_et as usize;
            o.3 += p.rank_iou();
        }
        o
    }
    fn better(a: &Objective, b: &Objective) -> bool {
        (a.0, a.1, a.2)
            .cmp(&(b.0, b.1, b.2))
            .then_with(|| a.3.total_cmp(&b.3))
            .then_with(|| a.4.cmp(&b.4))
            .is_gt()
    }
    fn search(
        g: usize,
        by_gold: &[Vec<MatchedPair>],
        used: &mut Vec<bool>,
        current: &mut Vec<MatchedPair>,
        best: &mut (Objective, Vec<MatchedPair>),
    ) {
        if g == by_gold.len() {
            let o = objective(current);
            if better(&o, &best.0) {
                *best = (o, current.clone());
            }
            return;
        }
        search(g + 1, by_gold, used, current, best);
        for c in &by_gold[g] {
            if !used[c.pred] {
                used[c.pred] = true;
                current.push(*c);
                search(g + 1, by_gold, used, current, best);
                current.pop();
                used[c.pred] = false;
            }
        }
    }

    let mut best = ((0, 0, 0, 0.0, 0), Vec::new());
    search(
        0,
        &by_gold,
        &mut vec![false; pred.len()],
        &mut Vec::new(),
        &mut best,
    );
    best.1
}

/// Normalizes spans and collapses exact duplicate records, keeping the
/// first occurrence.
pub fn canonicalize<T: Scalar>(records: &[EntityRecord<T>]) -> Vec<EntityRecord<T>> {
    let mut out: Vec<EntityRecord<T>> = Vec::with_capacity(records.len());
    for r in records {
        let r = EntityRecord {
            span: normalize_span(&r.span),
            etype: r.etype.trim().to_string(),
            bbox: r.bbox,
        };
        if !out.contains(&r) {
            out.push(r);
        }
    }
    out
}

fn normalize_gold<T: Scalar>(records: &[EntityRecord<T>]) -> Vec<EntityRecord<T>> {
    records
        .iter()
        .map(|r| EntityRecord {
            span: normalize_span(&r.span),
            etype: r.etype.trim().to_string(),
            bbox: r.bbox,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TaskScore {
    pub n_correct: usize,
    pub n_pred: usize,
    pub n_gold: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl TaskScore {
    pub fn from_counts(n_correct: usize, n_pred: usize, n_gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(n_correct, n_pred);
        let recall = ratio(n_correct, n_gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            n_correct,
            n_pred,
            n_gold,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub mner: TaskScore,
    pub eeg: TaskScore,
    pub gmner: TaskScore,
    /// `(threshold, accuracy)`, thresholds ascending.
    pub acc_at: Vec<(f64, f64)>,
    pub mean_iou: f64,
    pub n_gold_with_box: usize,
    pub n_examples: usize,
    /// Prediction ids absent from the gold set; ignored.
    pub n_unknown_pred_ids: usize,
    /// Exact duplicate predictions collapsed before scoring.
    pub n_duplicate_preds: usize,
}

impl ScoreReport {
    pub fn acc(&self, threshold: f64) -> Option<f64> {
        self.acc_at
            .iter()
            .find(|(t, _)| *t == threshold)
            .map(|(_, a)| *a)
    }

    /// Machine-readable form: stable field order, reals at 4 decimals.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

fn fixed4<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    let raw = serde_json::value::RawValue::from_string(format!("{v:.4}"))
        .map_err(serde::ser::Error::custom)?;
    raw.serialize(s)
}

impl Serialize for TaskScore {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Wire {
            n_correct: usize,
            n_pred: usize,
            n_gold: usize,
            #[serde(serialize_with = "fixed4")]
            precision: f64,
            #[serde(serialize_with = "fixed4")]
            recall: f64,
            #[serde(serialize_with = "fixed4")]
            f1: f64,
        }
        Wire {
            n_correct: self.n_correct,
            n_pred: self.n_pred,
            n_gold: self.n_gold,
            precision: self.precision,
            recall: self.recall,
            f1: self.f1,
        }
        .serialize(s)
    }
}

impl Serialize for ScoreReport {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        struct AccMap<'a>(&'a [(f64, f64)]);
        impl Serialize for AccMap<'_> {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                let mut m = s.serialize_map(Some(self.0.len()))?;
                for (t, a) in self.0 {
                    let raw = serde_json::value::RawValue::from_string(format!("{a:.4}"))
                        .map_err(serde::ser::Error::custom)?;
                    m.serialize_entry(&t.to_string(), &raw)?;
                }
                m.end()
            }
        }
        #[derive(Serialize)]
        struct Wire<'a> {
            mner: &'a TaskScore,
            eeg: &'a TaskScore,
            gmner: &'a TaskScore,
            acc_at: AccMap<'a>,
            #[serde(serialize_with = "fixed4")]
            mean_iou: f64,
            n_gold_with_box: usize,
            n_examples: usize,
            n_unknown_pred_ids: usize,
            n_duplicate_preds: usize,
        }
        Wire {
            mner: &self.mner,
            eeg: &self.eeg,
            gmner: &self.gmner,
            acc_at: AccMap(&self.acc_at),
            mean_iou: self.mean_iou,
            n_gold_with_box: self.n_gold_with_box,
            n_examples: self.n_examples,
            n_unknown_pred_ids: self.n_unknown_pred_ids,
            n_duplicate_preds: self.n_duplicate_preds,
        }
        .serialize(s)
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<6} {:>9} {:>7} {:>7} {:>9} {:>9} {:>9}",
            "task", "correct", "pred", "gold", "precision", "recall", "f1"
        )?;
        for (name, t) in [
            ("GMNER", &self.gmner),
            ("MNER", &self.mner),
            ("EEG", &self.eeg),
        ] {
            writeln!(
                f,
                "{:<6} {:>9} {:>7} {:>7} {:>9.4} {:>9.4} {:>9.4}",
                name, t.n_correct, t.n_pred, t.n_gold, t.precision, t.recall, t.f1
            )?;
        }
        writeln!(f)?;
        for (t, a) in &self.acc_at {
            writeln!(f, "Acc@{t:<5} {a:.4}")?;
        }
        writeln!(
            f,
            "mean IoU  {:.4}  (over {} gold boxes)",
            self.mean_iou, self.n_gold_with_box
        )?;
        writeln!(
            f,
            "examples {}, unknown prediction ids {}, duplicate predictions collapsed {}",
            self.n_examples, self.n_unknown_pred_ids, self.n_duplicate_preds
        )?;
        write!(
            f,
            "note: precision, recall, F1, Acc@IoU and mean IoU are reported as 0 when their denominator is 0"
        )
    }
}

/// Records of one example, keyed by id.
pub type Labeled<T> = (String, Vec<EntityRecord<T>>);

/// Greedy corpus scoring.
pub fn score<T: Scalar>(
    preds: &[Labeled<T>],
    golds: &[Labeled<T>],
    thresholds: &[f64],
) -> Result<ScoreReport, ScoreError> {
    score_with(preds, golds, thresholds, |_, p, g| Ok(match_records(p, g)))
}

/// Exhaustive-pairing corpus scoring; every example must have at most
/// [`ORACLE_MAX_RECORDS`] records per side (after duplicate collapsing).
pub fn oracle_score<T: Scalar>(
    preds: &[Labeled<T>],
    golds: &[Labeled<T>],
    thresholds: &[f64],
) -> Result<ScoreReport, ScoreError> {
    score_with(preds, golds, thresholds, |id, p, g| {
        if p.len() > ORACLE_MAX_RECORDS || g.len() > ORACLE_MAX_RECORDS {
            return Err(ScoreError::TooLarge {
                id: id.to_string(),
                n_pred: p.len(),
                n_gold: g.len(),
                max: ORACLE_MAX_RECORDS,
            });
        }
        Ok(oracle_match(p, g))
    })
}

fn score_with<T: Scalar, M>(
    preds: &[Labeled<T>],
    golds: &[Labeled<T>],
    thresholds: &[f64],
    matcher: M,
) -> Result<ScoreReport, ScoreError>
where
    M: Fn(&str, &[EntityRecord<T>], &[EntityRecord<T>]) -> Result<Vec<MatchedPair>, ScoreError>,
{
    if let Some(&t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(ScoreError::Threshold(t));
    }
    let mut thresholds = thresholds.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    let mut gold_ids = HashSet::new();
    for (id, _) in golds {
        if !gold_ids.insert(id.as_str()) {
            return Err(ScoreError::DuplicateId {
                side: "gold",
                id: id.clone(),
            });
        }
    }
    let mut pred_map: HashMap<&str, &[EntityRecord<T>]> = HashMap::new();
    let mut n_unknown_pred_ids = 0;
    for (id, recs) in preds {
        if pred_map.insert(id.as_str(), recs).is_some() {
            return Err(ScoreError::DuplicateId {
                side: "predictions",
                id: id.clone(),
            });
        }
        if !gold_ids.contains(id.as_str()) {
            n_unknown_pred_ids += 1;
        }
    }
    if n_unknown_pred_ids > 0 {
        warn!("{n_unknown_pred_ids} prediction ids are not in the gold set and were ignored");
    }

    let (mut n_pred, mut n_gold, mut n_gold_with_box) = (0, 0, 0);
    let (mut mner, mut eeg, mut gmner) = (0, 0, 0);
    let mut n_duplicate_preds = 0;
    let mut matched_at = vec![0usize; thresholds.len()];
    let mut gold_ious: Vec<f64> = Vec::new();

    for (id, gold_raw) in golds {
        let raw_pred = pred_map.get(id.as_str()).copied().unwrap_or(&[]);
        let pred = canonicalize(raw_pred);
        n_duplicate_preds += raw_pred.len() - pred.len();
        let gold = normalize_gold(gold_raw);
        let pairs = matcher(id, &pred, &gold)?;

        n_pred += pred.len();
        n_gold += gold.len();
        let mut iou_of_gold: Vec<Option<f64>> = vec![None; gold.len()];
        for p in &pairs {
            mner += p.outcome.c_et as usize;
            eeg += p.outcome.c_b as usize;
            gmner += p.outcome.c() as usize;
            if let Some(v) = p.box_iou {
                iou_of_gold[p.gold] = Some(v);
                for (slot, t) in matched_at.iter_mut().zip(&thresholds) {
                    if v >= *t {
                        *slot += 1;
                    }
                }
            }
        }
        for (g, v) in gold.iter().zip(iou_of_gold) {
            if g.bbox.is_some() {
                n_gold_with_box += 1;
                gold_ious.push(v.unwrap_or(0.0));
            }
        }
    }

    // summing in sorted order keeps the total independent of record order
    gold_ious.sort_by(f64::total_cmp);
    let iou_total: f64 = gold_ious.iter().sum();
    let per_box = |x: f64| {
        if n_gold_with_box == 0 {
            0.0
        } else {
            x / n_gold_with_box as f64
        }
    };

    Ok(ScoreReport {
        mner: TaskScore::from_counts(mner, n_pred, n_gold),
        eeg: TaskScore::from_counts(eeg, n_pred, n_gold),
        gmner: TaskScore::from_counts(gmner, n_pred, n_gold),
        acc_at: thresholds
            .iter()
            .zip(&matched_at)
            .map(|(t, m)| (*t, per_box(*m as f64)))
            .collect(),
        mean_iou: per_box(iou_total),
        n_gold_with_box,
        n_examples: golds.len(),
        n_unknown_pred_ids,
        n_duplicate_preds,
    })
}

/// Convenience for building test records.
pub fn record<T: Scalar>(span: &str, etype: &str, bbox: Option<[f64; 4]>) -> EntityRecord<T> {
    EntityRecord {
        span: normalize_span(span),
        etype: etype.to_string(),
        bbox: bbox.map(|c| BBox::from_array(c.map(T::of)).expect("valid test box")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type R = EntityRecord<f64>;

    fn r(span: &str, etype: &str, b: Option<[f64; 4]>) -> R {
        record(span, etype, b)
    }

    fn corpus(items: Vec<(&str, Vec<R>)>) -> Vec<Labeled<f64>> {
        items
            .into_iter()
            .map(|(id, v)| (id.to_string(), v))
            .collect()
    }

    #[test]
    fn self_match_is_perfect() {
        let gold = vec![
            r("Big Ben", "LOC", Some([0., 0., 10., 10.])),
            r("UN", "ORG", None),
        ];
        let pairs = match_records(&gold, &gold);
        assert_eq!(pairs.len(), 2);
        assert!(pairs.iter().all(|p| p.outcome.c()));
    }

    #[test]
    fn wrong_type_good_box() {
        // 10x10 gold, pred shifted by 1 px: IoU = 90/110
        let gold = vec![r("Paris", "LOC", Some([0., 0., 10., 10.]))];
        let pred = vec![r("Paris", "PER", Some([1., 0., 11., 10.]))];
        let pairs = match_records(&pred, &gold);
        let o = pairs[0].outcome;
        assert!(pairs[0].box_iou.unwrap() > 0.8);
        assert!(!o.c_et && o.c_b && !o.c());
    }

    #[test]
    fn absent_boxes_match() {
        let gold = vec![r("UN", "ORG", None)];
        let o = match_records(&gold.clone(), &gold)[0].outcome;
        assert!(o.c_et && o.c_b && o.c());

        let pred = vec![r("UN", "ORG", Some([0., 0., 5., 5.]))];
        let o = match_records(&pred, &gold)[0].outcome;
        assert!(o.c_et && !o.c_b);
    }

    #[test]
    fn two_gold_three_pred_one_correct() {
        let golds = corpus(vec![(
            "e1",
            vec![
                r("Big Ben", "LOC", Some([10., 10., 50., 50.])),
                r("London", "LOC", None),
            ],
        )]);
        let preds = corpus(vec![(
            "e1",
            vec![
                r("Big Ben", "LOC", Some([10., 10., 50., 50.])),
                r("London", "ORG", Some([0., 0., 5., 5.])),
                r("Thames", "LOC", None),
            ],
        )]);
        let rep = score(&preds, &golds, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(rep.gmner.n_correct, 1);
        assert_eq!((rep.gmner.n_pred, rep.gmner.n_gold), (3, 2));
        assert!((rep.gmner.precision - 1.0 / 3.0).abs() < 1e-12);
        assert!((rep.gmner.recall - 0.5).abs() < 1e-12);
        assert!((rep.gmner.f1 - 0.4).abs() < 1e-12);
    }

    #[test]
    fn empty_predictions_score_zero() {
        let golds = corpus(vec![("a", vec![r("X", "PER", None)])]);
        let rep = score(&[], &golds, &DEFAULT_THRESHOLDS).unwrap();
        for t in [rep.mner, rep.eeg, rep.gmner] {
            assert_eq!((t.n_pred, t.precision, t.recall, t.f1), (0, 0.0, 0.0, 0.0));
        }
        let rep = score::<f64>(&[], &[], &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(rep.mean_iou, 0.0);
        assert_eq!(rep.acc(0.5), Some(0.0));
    }

    #[test]
    fn duplicates_and_unknown_ids() {
        let golds = corpus(vec![("a", vec![r("X", "PER", None)])]);
        let preds = corpus(vec![
            ("a", vec![r("X", "PER", None), r(" X ", "PER", None)]),
            ("zzz", vec![r("Y", "PER", None)]),
        ]);
        let rep = score(&preds, &golds, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(rep.n_duplicate_preds, 1);
        assert_eq!(rep.n_unknown_pred_ids, 1);
        assert_eq!(rep.gmner.f1, 1.0);

        let dup = corpus(vec![("a", vec![]), ("a", vec![])]);
        assert!(matches!(
            score(&[], &dup, &DEFAULT_THRESHOLDS),
            Err(ScoreError::DuplicateId { side: "gold", .. })
        ));
        assert!(matches!(
            score(&dup, &golds, &DEFAULT_THRESHOLDS),
            Err(ScoreError::DuplicateId {
                side: "predictions",
                ..
            })
        ));
    }

    #[test]
    fn acc_and_mean_iou() {
        let golds = corpus(vec![(
            "a",
            vec![
                r("A", "PER", Some([0., 0., 10., 10.])),
                r("B", "PER", Some([0., 0., 10., 10.])),
                r("C", "PER", Some([0., 0., 10., 10.])),
                r("D", "PER", None),
            ],
        )]);
        let preds = corpus(vec![(
            "a",
            vec![
                r("A", "PER", Some([0., 0., 10., 10.])),
                // IoU 60/100... 6x10 inside 10x10 -> 0.6
                r("B", "PER", Some([0., 0., 6., 10.])),
            ],
        )]);
        let rep = score(&preds, &golds, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(rep.n_gold_with_box, 3);
        assert!((rep.acc(0.5).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((rep.acc(0.75).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((rep.mean_iou - 1.6 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_prefers_type_correct_on_ties() {
        let gold = vec![r("A", "LOC", None)];
        let pred = vec![r("A", "PER", None), r("A", "LOC", None)];
        let pairs = match_records(&pred, &gold);
        assert_eq!(pairs[0].pred, 1);
    }

    #[test]
    fn oracle_size_limit() {
        let many: Vec<R> = (0..7).map(|i| r(&format!("s{i}"), "PER", None)).collect();
        let golds = corpus(vec![("a", many)]);
        assert!(matches!(
            oracle_score(&[], &golds, &DEFAULT_THRESHOLDS),
            Err(ScoreError::TooLarge { .. })
        ));
    }

    #[test]
    fn oracle_beats_greedy_on_crafted_case() {
        // greedy takes the highest-IoU wrong-type pair first
        let gold = vec![
            r("A", "LOC", Some([0., 0., 10., 10.])),
            r("A", "PER", Some([20., 20., 30., 30.])),
        ];
        let pred = vec![
            r("A", "PER", Some([0., 0., 10., 10.])),
            r("A", "LOC", Some([0., 0., 8., 10.])),
        ];
        let g = match_records(&pred, &gold);
        let o = oracle_match(&pred, &gold);
        let gm = |ps: &[MatchedPair]| ps.iter().filter(|p| p.outcome.c()).count();
        assert_eq!(gm(&g), 0);
        assert_eq!(gm(&o), 1);
    }

    #[test]
    fn json_has_fixed_precision() {
        let golds = corpus(vec![("a", vec![r("X", "PER", None)])]);
        let rep = score(&golds, &golds, &DEFAULT_THRESHOLDS).unwrap();
        let js = rep.to_json();
        assert!(js.contains("\"f1\": 1.0000"), "{js}");
        assert!(js.contains("\"0.75\": 0.0000"), "{js}");
        let v: serde_json::Value = serde_json::from_str(&js).unwrap();
        assert_eq!(v["gmner"]["n_correct"], 1);
    }
}
