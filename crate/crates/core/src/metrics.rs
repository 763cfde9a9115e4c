//! Overlap metrics and the batch Dice loss.
//!
//! Per-case DSC is uninformative when the ground truth is empty, so sets of
//! cases are scored with the aggregated DSC: one ratio over voxel counts pooled
//! across all cases. The training loss is its soft counterpart, computed per
//! class over the whole batch and averaged over the classes that appear in the
//! batch truth.

use std::fmt::Write as _;

use crate::error::{arg_err, Error, Result};
use crate::tensor::Tensor4D;
use crate::volume::{LabelMask, GTVN, GTVP};

/// A binary ground truth and prediction over the same voxel grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPair {
    truth: Vec<bool>,
    pred: Vec<bool>,
}

/// Confusion counts of a [`MaskPair`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OverlapCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl OverlapCounts {
    pub fn truth_size(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn pred_size(&self) -> u64 {
        self.tp + self.fp
    }

    fn dice(&self) -> Option<f64> {
        let denom = self.truth_size() + self.pred_size();
        (denom > 0).then(|| 2.0 * self.tp as f64 / denom as f64)
    }
}

impl std::ops::Add for OverlapCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

impl MaskPair {
    pub fn new(truth: Vec<bool>, pred: Vec<bool>) -> Result<Self> {
        if truth.len() != pred.len() {
            return arg_err(format!("mask sizes differ: {} vs {}", truth.len(), pred.len()));
        }
        Ok(Self { truth, pred })
    }

    /// Accepts 0/1 arrays.
    pub fn from_binary(truth: &[u8], pred: &[u8]) -> Result<Self> {
        if truth.iter().chain(pred).any(|&v| v > 1) {
            return arg_err("binary masks may only hold 0 and 1");
        }
        Self::new(truth.iter().map(|&v| v == 1).collect(), pred.iter().map(|&v| v == 1).collect())
    }

    /// One class of two label masks.
    pub fn from_labels(truth: &LabelMask, pred: &LabelMask, class: u8) -> Result<Self> {
        if truth.dims() != pred.dims() {
            return arg_err(format!("mask dims differ: {:?} vs {:?}", truth.dims(), pred.dims()));
        }
        let t = truth.labels().iter().map(|&l| l == class).collect();
        let p = pred.labels().iter().map(|&l| l == class).collect();
        Self::new(t, p)
    }

    pub fn truth(&self) -> &[bool] {
        &self.truth
    }

    pub fn pred(&self) -> &[bool] {
        &self.pred
    }

    pub fn counts(&self) -> OverlapCounts {
        let mut c = OverlapCounts::default();
        for (&t, &p) in self.truth.iter().zip(&self.pred) {
            match (t, p) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        c
    }
}

/// Dice similarity coefficient; 1 when both masks are empty.
pub fn dsc(pair: &MaskPair) -> f64 {
    pair.counts().dice().unwrap_or(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateDsc {
    pub value: f64,
    /// Set when every mask in the set was empty and `value` is the convention 1.
    pub all_empty: bool,
}

/// Aggregated DSC over a set of pairs.
pub fn dsc_agg(pairs: &[MaskPair]) -> Result<AggregateDsc> {
    if pairs.is_empty() {
        return arg_err("dsc_agg needs at least one mask pair");
    }
    let total = pairs.iter().map(MaskPair::counts).fold(OverlapCounts::default(), |a, b| a + b);
    Ok(aggregate(total))
}

fn aggregate(total: OverlapCounts) -> AggregateDsc {
    match total.dice() {
        Some(value) => AggregateDsc { value, all_empty: false },
        None => AggregateDsc { value: 1.0, all_empty: true },
    }
}

/// `None` when the prediction is empty.
pub fn precision(pair: &MaskPair) -> Option<f64> {
    let c = pair.counts();
    (c.pred_size() > 0).then(|| c.tp as f64 / c.pred_size() as f64)
}

/// `None` when the truth is empty.
pub fn recall(pair: &MaskPair) -> Option<f64> {
    let c = pair.counts();
    (c.truth_size() > 0).then(|| c.tp as f64 / c.truth_size() as f64)
}

fn check_batch(truth: &[Tensor4D], prob: &[Tensor4D]) -> Result<usize> {
    if truth.is_empty() || truth.len() != prob.len() {
        return arg_err(format!("batch sizes differ or are zero: {} vs {}", truth.len(), prob.len()));
    }
    let classes = truth[0].channels();
    for (i, (t, p)) in truth.iter().zip(prob).enumerate() {
        if t.shape() != p.shape() || t.channels() != classes {
            return arg_err(format!("batch item {i}: shapes {:?} and {:?} differ", t.shape(), p.shape()));
        }
    }
    Ok(classes)
}

/// Per class `(S_y, S_p, I)` summed over the batch.
fn class_sums(truth: &[Tensor4D], prob: &[Tensor4D], classes: usize) -> Vec<(f64, f64, f64)> {
    (0..classes)
        .map(|c| {
            let mut s = (0.0, 0.0, 0.0);
            for (t, p) in truth.iter().zip(prob) {
                for (&y, &q) in t.channel(c).iter().zip(p.channel(c)) {
                    s.0 += y as f64;
                    s.1 += q as f64;
                    s.2 += y as f64 * q as f64;
                }
            }
            s
        })
        .collect()
}

fn present(sums: &[(f64, f64, f64)]) -> Result<Vec<usize>> {
    let present: Vec<usize> = (0..sums.len()).filter(|&c| sums[c].0 > 0.0).collect();
    if present.is_empty() {
        return Err(Error::Contract("batch truth contains no class at all".into()));
    }
    Ok(present)
}

/// Soft Dice loss over a batch of one-hot truths and probabilities.
///
/// Each class is scored over the whole batch, and only classes with at least
/// one truth voxel in the batch enter the mean.
pub fn dice_loss(truth: &[Tensor4D], prob: &[Tensor4D]) -> Result<f64> {
    let classes = check_batch(truth, prob)?;
    let sums = class_sums(truth, prob, classes);
    let present = present(&sums)?;
    let total: f64 = present
        .iter()
        .map(|&c| {
            let (sy, sp, i) = sums[c];
            1.0 - 2.0 * i / (sy + sp)
        })
        .sum();
    Ok(total / present.len() as f64)
}

/// Gradient of [`dice_loss`] with respect to the probabilities.
pub fn dice_loss_grad(truth: &[Tensor4D], prob: &[Tensor4D]) -> Result<Vec<Tensor4D>> {
    let classes = check_batch(truth, prob)?;
    let sums = class_sums(truth, prob, classes);
    let present = present(&sums)?;
    let scale = 1.0 / present.len() as f64;
    let mut grads: Vec<Tensor4D> = prob.iter().map(|p| Tensor4D::zeros(classes, p.dims())).collect();
    for &c in &present {
        let (sy, sp, i) = sums[c];
        let d = sy + sp;
        for (g, t) in grads.iter_mut().zip(truth) {
            for (gv, &y) in g.channel_mut(c).iter_mut().zip(t.channel(c)) {
                *gv = (-2.0 * (y as f64 * d - i) / (d * d) * scale) as f32;
            }
        }
    }
    Ok(grads)
}

/// Reported foreground classes and their names.
pub const REPORT_CLASSES: [(u8, &str); 2] = [(GTVP, "GTVp"), (GTVN, "GTVn")];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub counts: OverlapCounts,
    /// `None` when the truth is empty.
    pub dsc: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

impl ClassMetrics {
    fn from_pair(pair: &MaskPair) -> Self {
        let counts = pair.counts();
        let dsc = (counts.truth_size() > 0).then(|| dsc(pair));
        Self { counts, dsc, precision: precision(pair), recall: recall(pair) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationRecord {
    pub patient_id: String,
    /// In [`REPORT_CLASSES`] order.
    pub classes: [ClassMetrics; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub records: Vec<EvaluationRecord>,
    /// Aggregated DSC per class in [`REPORT_CLASSES`] order.
    pub aggregate: [AggregateDsc; 2],
    /// Mean of the two class aggregates; background is not reported.
    pub mean: f64,
}

/// Scores a set of cases per foreground class.
pub fn evaluate_set(ids: &[String], truths: &[LabelMask], preds: &[LabelMask]) -> Result<EvaluationReport> {
    if ids.len() != truths.len() || truths.len() != preds.len() {
        return arg_err(format!(
            "misaligned inputs: {} ids, {} truths, {} predictions",
            ids.len(),
            truths.len(),
            preds.len()
        ));
    }
    if ids.is_empty() {
        return arg_err("nothing to evaluate");
    }
    let mut totals = [OverlapCounts::default(); 2];
    let mut records = Vec::with_capacity(ids.len());
    for ((id, t), p) in ids.iter().zip(truths).zip(preds) {
        let mut classes = [None; 2];
        for (k, &(class, _)) in REPORT_CLASSES.iter().enumerate() {
            let pair = MaskPair::from_labels(t, p, class).map_err(|e| Error::Argument(format!("{id}: {e}")))?;
            let m = ClassMetrics::from_pair(&pair);
            totals[k] = totals[k] + m.counts;
            classes[k] = Some(m);
        }
        records.push(EvaluationRecord { patient_id: id.clone(), classes: classes.map(Option::unwrap) });
    }
    let aggregate = totals.map(aggregate);
    let mean = (aggregate[0].value + aggregate[1].value) / 2.0;
    Ok(EvaluationReport { records, aggregate, mean })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.9}"))
}

impl EvaluationReport {
    /// `patient_id,class,dsc,precision,recall`, then aggregate rows. Undefined
    /// values are left empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("patient_id,class,dsc,precision,recall\n");
        for r in &self.records {
            for (m, (_, name)) in r.classes.iter().zip(REPORT_CLASSES) {
                let _ = writeln!(s, "{},{name},{},{},{}", r.patient_id, opt(m.dsc), opt(m.precision), opt(m.recall));
            }
        }
        for (a, (_, name)) in self.aggregate.iter().zip(REPORT_CLASSES) {
            let _ = writeln!(s, "AGG_{name},{name},{:.9},,", a.value);
        }
        let _ = writeln!(s, "AGG_MEAN,mean,{:.9},,", self.mean);
        s
    }

    /// Console summary with GTVp, GTVn and Average columns.
    pub fn table(&self) -> String {
        let mut s = format!("{:<10}{:>8}{:>8}{:>9}\n", "", "GTVp", "GTVn", "Average");
        let _ = writeln!(
            s,
            "{:<10}{:>8.3}{:>8.3}{:>9.3}",
            "DSC_agg", self.aggregate[0].value, self.aggregate[1].value, self.mean
        );
        for (a, (_, name)) in self.aggregate.iter().zip(REPORT_CLASSES) {
            if a.all_empty {
                let _ = writeln!(s, "note: {name} is empty in every truth and prediction");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pair(t: &[u8], p: &[u8]) -> MaskPair {
        MaskPair::from_binary(t, p).unwrap()
    }

    #[test]
    fn dsc_examples() {
        assert_eq!(dsc(&pair(&[1, 1, 0], &[1, 1, 0])), 1.0);
        assert_eq!(dsc(&pair(&[1, 0, 0], &[0, 1, 0])), 0.0);
        assert_eq!(dsc(&pair(&[1, 1, 0, 0], &[1, 0, 1, 0])), 0.5);
        assert_eq!(dsc(&pair(&[0, 0], &[0, 0])), 1.0);
        assert_eq!(dsc(&pair(&[0, 0], &[1, 0])), 0.0);
        assert!(MaskPair::from_binary(&[1, 0], &[1]).is_err());
    }

    #[test]
    fn dsc_agg_penalizes_false_positives_on_empty_truth() {
        let pairs = [pair(&[1, 0], &[1, 1]), pair(&[0, 0], &[1, 0])];
        let agg = dsc_agg(&pairs).unwrap();
        assert_eq!(agg.value, 0.5);
        assert!(!agg.all_empty);
        let empty = dsc_agg(&[pair(&[0, 0], &[0, 0])]).unwrap();
        assert_eq!(empty, AggregateDsc { value: 1.0, all_empty: true });
        assert!(dsc_agg(&[]).is_err());
    }

    #[test]
    fn precision_and_recall_examples() {
        let p = pair(&[1, 1, 0, 0], &[1, 1, 1, 1]);
        assert_eq!(precision(&p), Some(0.5));
        assert_eq!(recall(&p), Some(1.0));
        let empty_pred = pair(&[1, 0], &[0, 0]);
        assert_eq!(precision(&empty_pred), None);
        assert_eq!(recall(&empty_pred), Some(0.0));
    }

    fn one_hot(labels: &[u8], dims: [usize; 3]) -> Tensor4D {
        Tensor4D::from_vec(
            3,
            dims,
            (0..3u8).flat_map(|c| labels.iter().map(move |&l| (l == c) as u8 as f32)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn loss_is_zero_at_truth() {
        let y = one_hot(&[0, 1, 2, 1], [2, 2, 1]);
        assert_eq!(dice_loss(&[y.clone()], &[y]).unwrap(), 0.0);
    }

    #[test]
    fn tiny_batch_matches_scalar_evaluation() {
        // 1 x 3 x 1 x 1 x 2: voxel labels (0, 1), class 2 absent
        let y = one_hot(&[0, 1], [1, 1, 2]);
        let p = Tensor4D::from_vec(3, [1, 1, 2], vec![0.7, 0.2, 0.2, 0.5, 0.1, 0.3]).unwrap();
        let l0 = 1.0 - 2.0 * 0.7 / (1.0 + 0.9);
        let l1 = 1.0 - 2.0 * 0.5 / (1.0 + 0.7);
        let expected = (l0 + l1) / 2.0;
        let got = dice_loss(&[y], &[p]).unwrap();
        assert!((got - expected).abs() < 1e-7, "{got} vs {expected}");
    }

    #[test]
    fn absent_class_gets_zero_gradient() {
        let y = one_hot(&[0, 1, 1, 0], [4, 1, 1]);
        let p = Tensor4D::filled(3, [4, 1, 1], 1.0 / 3.0);
        let g = dice_loss_grad(&[y], &[p]).unwrap();
        assert!(g[0].channel(2).iter().all(|&v| v == 0.0));
        assert!(g[0].channel(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn gradient_at_truth_matches_closed_form() {
        let labels = [0, 1, 1, 2, 0, 0, 1, 2];
        let y = one_hot(&labels, [2, 2, 2]);
        let g = dice_loss_grad(&[y.clone()], &[y.clone()]).unwrap();
        for c in 0..3u8 {
            let sy = labels.iter().filter(|&&l| l == c).count() as f64;
            let (sp, i) = (sy, sy);
            let expected = -2.0 * (sy + sp - i) / ((sy + sp) * (sy + sp)) / 3.0;
            for (k, &l) in labels.iter().enumerate() {
                if l == c {
                    assert!((g[0].channel(c as usize)[k] as f64 - expected).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = crate::seeded_rng(11);
        for _ in 0..10 {
            let labels: Vec<u8> = (0..8).map(|_| rng.random_range(0..3)).collect();
            let y = one_hot(&labels, [2, 2, 2]);
            let p = Tensor4D::from_fn(3, [2, 2, 2], |_, _, _, _| rng.random_range(0.05f32..0.95));
            let g = dice_loss_grad(&[y.clone()], &[p.clone()]).unwrap();
            // f64 reference loss so the difference quotient is not dominated by f32 rounding
            let loss64 = |q: &[f64]| {
                let mut total = 0.0;
                let mut n = 0;
                for c in 0..3 {
                    let ys = &y.channel(c);
                    let qs = &q[c * 8..(c + 1) * 8];
                    let sy: f64 = ys.iter().map(|&v| v as f64).sum();
                    if sy == 0.0 {
                        continue;
                    }
                    let sp: f64 = qs.iter().sum();
                    let i: f64 = ys.iter().zip(qs).map(|(&a, &b)| a as f64 * b).sum();
                    total += 1.0 - 2.0 * i / (sy + sp);
                    n += 1;
                }
                total / n as f64
            };
            let base: Vec<f64> = p.data().iter().map(|&v| v as f64).collect();
            let h = 1e-4;
            for k in 0..base.len() {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus[k] += h;
                minus[k] -= h;
                let fd = (loss64(&plus) - loss64(&minus)) / (2.0 * h);
                let an = g[0].data()[k] as f64;
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-3, "entry {k}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn loss_rejects_shape_mismatch() {
        let a = Tensor4D::zeros(3, [2, 2, 2]);
        let b = Tensor4D::zeros(3, [2, 2, 1]);
        assert!(dice_loss(&[a.clone()], &[b]).is_err());
        assert!(dice_loss(&[a.clone()], &[]).is_err());
    }

    fn random_mask(rng: &mut impl Rng, dims: [usize; 3]) -> LabelMask {
        let n = dims.iter().product();
        LabelMask::new(dims, [1.0; 3], (0..n).map(|_| rng.random_range(0..3)).collect()).unwrap()
    }

    #[test]
    fn evaluate_identical_sets_scores_one() {
        let mut rng = crate::seeded_rng(3);
        let truths: Vec<LabelMask> = (0..3).map(|_| random_mask(&mut rng, [4, 4, 4])).collect();
        let ids: Vec<String> = (0..3).map(|i| format!("p{i}")).collect();
        let r = evaluate_set(&ids, &truths, &truths).unwrap();
        assert_eq!(r.mean, 1.0);
        assert!(r.aggregate.iter().all(|a| a.value == 1.0));
        assert!(evaluate_set(&ids[..2], &truths, &truths).is_err());
    }

    #[test]
    fn evaluate_matches_counting_oracle() {
        let mut rng = crate::seeded_rng(4);
        let dims = [6, 6, 6];
        let truths: Vec<LabelMask> = (0..5).map(|_| random_mask(&mut rng, dims)).collect();
        let preds: Vec<LabelMask> = (0..5).map(|_| random_mask(&mut rng, dims)).collect();
        let ids: Vec<String> = (0..5).map(|i| format!("case{i}")).collect();
        let r = evaluate_set(&ids, &truths, &preds).unwrap();
        let mut agg = Vec::new();
        for class in [1u8, 2] {
            let (mut inter, mut st, mut sp) = (0usize, 0usize, 0usize);
            for (t, p) in truths.iter().zip(&preds) {
                for x in 0..6 {
                    for y in 0..6 {
                        for z in 0..6 {
                            let a = t.get(x, y, z) == class;
                            let b = p.get(x, y, z) == class;
                            inter += (a && b) as usize;
                            st += a as usize;
                            sp += b as usize;
                        }
                    }
                }
            }
            agg.push(2.0 * inter as f64 / (st + sp) as f64);
        }
        assert!((r.aggregate[0].value - agg[0]).abs() < 1e-9);
        assert!((r.aggregate[1].value - agg[1]).abs() < 1e-9);
        assert!((r.mean - (agg[0] + agg[1]) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn csv_and_table_layout() {
        let t = LabelMask::new([2, 1, 1], [1.0; 3], vec![1, 0]).unwrap();
        let p = LabelMask::new([2, 1, 1], [1.0; 3], vec![1, 2]).unwrap();
        let r = evaluate_set(&["a".to_string()], &[t], &[p]).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "patient_id,class,dsc,precision,recall");
        assert_eq!(lines[1], "a,GTVp,1.000000000,1.000000000,1.000000000");
        assert_eq!(lines[2], "a,GTVn,,0.000000000,");
        assert_eq!(lines[3], "AGG_GTVp,GTVp,1.000000000,,");
        assert_eq!(lines[4], "AGG_GTVn,GTVn,0.000000000,,");
        assert_eq!(lines[5], "AGG_MEAN,mean,0.500000000,,");
        let table = r.table();
        let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
        assert_eq!(header, ["GTVp", "GTVn", "Average"]);
    }
}
