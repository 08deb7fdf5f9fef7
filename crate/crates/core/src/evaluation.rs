//! Confusion-matrix accumulation and the segmentation metric suite.
//!
//! IoUs and all aggregate metrics are fractions in `[0, 1]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScopeError};
use crate::types::{ClassId, BACKGROUND};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: Vec<ClassId>,
    index: BTreeMap<ClassId, usize>,
    /// Row = ground truth, column = prediction.
    counts: Vec<u64>,
    ignored_points: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: &[ClassId]) -> Result<Self> {
        let index: BTreeMap<ClassId, usize> =
            classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        if index.len() != classes.len() {
            return Err(ScopeError::Config("duplicate class in confusion matrix".into()));
        }
        Ok(Self {
            classes: classes.to_vec(),
            index,
            counts: vec![0; classes.len() * classes.len()],
            ignored_points: 0,
        })
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn ignored_points(&self) -> u64 {
        self.ignored_points
    }

    pub fn count(&self, gt: ClassId, pred: ClassId) -> Option<u64> {
        let g = *self.index.get(&gt)?;
        let p = *self.index.get(&pred)?;
        Some(self.counts[g * self.classes.len() + p])
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.ignored_points
    }

    /// Tally `gt` against `pred`; background ground truth only bumps `ignored_points`.
    ///
    /// Validation runs before any count changes, so a failed call leaves the matrix intact.
    pub fn accumulate(&mut self, gt: &[i32], pred: &[i32]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(ScopeError::LengthMismatch {
                gt: gt.len(),
                pred: pred.len(),
            });
        }
        let n = self.classes.len();
        let mut cells = Vec::with_capacity(gt.len());
        let mut ignored = 0u64;
        for (&g, &p) in gt.iter().zip(pred) {
            let pi = *self.index.get(&p).ok_or(ScopeError::UnknownPrediction(p))?;
            if g == BACKGROUND {
                ignored += 1;
                continue;
            }
            let gi = *self.index.get(&g).ok_or(ScopeError::UnknownClass(g))?;
            cells.push(gi * n + pi);
        }
        for c in cells {
            self.counts[c] += 1;
        }
        self.ignored_points += ignored;
        Ok(())
    }

    /// Element-wise sum with a matrix over the same classes.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(ScopeError::Config("cannot merge matrices over different classes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored_points += other.ignored_points;
        Ok(())
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class never occurs in either labelling.
    pub fn iou(&self, class_id: ClassId) -> Result<Option<f64>> {
        let c = *self.index.get(&class_id).ok_or(ScopeError::UnknownClass(class_id))?;
        let n = self.classes.len();
        let tp = self.counts[c * n + c];
        let fp: u64 = (0..n).filter(|&g| g != c).map(|g| self.counts[g * n + c]).sum();
        let fneg: u64 = (0..n).filter(|&p| p != c).map(|p| self.counts[c * n + p]).sum();
        let union = tp + fp + fneg;
        Ok((union > 0).then(|| tp as f64 / union as f64))
    }
}

pub fn harmonic_mean(b: f64, n: f64) -> f64 {
    if b + n > 0.0 {
        2.0 * b * n / (b + n)
    } else {
        0.0
    }
}

fn mean_defined(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub stage: usize,
    /// Classes with an empty union are absent.
    pub per_class_iou: BTreeMap<ClassId, f64>,
    pub miou: f64,
    pub miou_b: f64,
    pub miou_n: f64,
    pub hm: f64,
    pub classes_evaluated: Vec<ClassId>,
}

/// Metrics over the known classes of one stage. Undefined IoUs are left out of every mean;
/// at stage 0 `miou_n` and `hm` are 0.
pub fn summarize(
    cm: &ConfusionMatrix,
    base_ids: &[ClassId],
    novel_ids: &[ClassId],
    stage: usize,
) -> Result<MetricsReport> {
    if let Some(c) = base_ids.iter().find(|c| novel_ids.contains(c)) {
        return Err(ScopeError::Config(format!("class {c} is both base and novel")));
    }
    let mut per_class_iou = BTreeMap::new();
    let mut classes_evaluated = Vec::new();
    for &c in base_ids.iter().chain(novel_ids) {
        classes_evaluated.push(c);
        if let Some(v) = cm.iou(c)? {
            per_class_iou.insert(c, v);
        }
    }
    let set_mean = |ids: &[ClassId]| mean_defined(ids.iter().filter_map(|c| per_class_iou.get(c).copied()));
    let miou = set_mean(&classes_evaluated);
    let miou_b = set_mean(base_ids);
    let (miou_n, hm) = if stage == 0 {
        (0.0, 0.0)
    } else {
        let n = set_mean(novel_ids);
        (n, harmonic_mean(miou_b, n))
    };
    Ok(MetricsReport {
        stage,
        per_class_iou,
        miou,
        miou_b,
        miou_n,
        hm,
        classes_evaluated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub per_stage: Vec<MetricsReport>,
    pub miou_i: f64,
    pub fpp: f64,
}

/// Incremental mIoU and forgetting over a run covering stages `0..=T`.
///
/// With `include_stage0 = false` the stage-0 mIoU is left out of `miou_i`, unless it is the
/// only stage.
pub fn finalize_run(reports: &[MetricsReport], include_stage0: bool) -> Result<RunSummary> {
    let first = reports.first().ok_or(ScopeError::EmptyRun)?;
    for (t, r) in reports.iter().enumerate() {
        if r.stage != t {
            return Err(ScopeError::Config(format!(
                "stage reports are not contiguous: position {t} holds stage {}",
                r.stage
            )));
        }
    }
    let last = reports.last().unwrap();
    let skip = usize::from(!include_stage0 && reports.len() > 1);
    let miou_i = mean_defined(reports[skip..].iter().map(|r| r.miou));
    Ok(RunSummary {
        per_stage: reports.to_vec(),
        miou_i,
        fpp: first.miou_b - last.miou_b,
    })
}

/// How metrics of repeated runs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// HM of each run, then averaged.
    #[default]
    PerRunHm,
    /// HM of the averaged mIoU-B and mIoU-N.
    AveragedHm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub mode: AggregationMode,
    pub runs: usize,
    pub miou: f64,
    pub miou_b: f64,
    pub miou_n: f64,
    pub hm: f64,
    pub miou_i: f64,
    pub fpp: f64,
}

/// Average the final-stage metrics of several runs.
pub fn aggregate_runs(runs: &[RunSummary], mode: AggregationMode) -> Result<AggregateReport> {
    if runs.is_empty() {
        return Err(ScopeError::EmptyRun);
    }
    let finals: Vec<&MetricsReport> = runs
        .iter()
        .map(|r| r.per_stage.last().ok_or(ScopeError::EmptyRun))
        .collect::<Result<_>>()?;
    let avg = |f: &dyn Fn(&MetricsReport) -> f64| finals.iter().map(|r| f(r)).sum::<f64>() / finals.len() as f64;
    let miou_b = avg(&|r| r.miou_b);
    let miou_n = avg(&|r| r.miou_n);
    let hm = match mode {
        AggregationMode::PerRunHm => avg(&|r| r.hm),
        AggregationMode::AveragedHm => harmonic_mean(miou_b, miou_n),
    };
    let n = runs.len() as f64;
    Ok(AggregateReport {
        mode,
        runs: runs.len(),
        miou: avg(&|r| r.miou),
        miou_b,
        miou_n,
        hm,
        miou_i: runs.iter().map(|r| r.miou_i).sum::<f64>() / n,
        fpp: runs.iter().map(|r| r.fpp).sum::<f64>() / n,
    })
}

/// Long CSV: `stage,class_id,iou,miou,miou_b,miou_n,hm`, one row per evaluated class.
/// Undefined IoUs are written as an empty field.
pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("stage,class_id,iou,miou,miou_b,miou_n,hm\n");
    for r in reports {
        for c in &r.classes_evaluated {
            let iou = r.per_class_iou.get(c).map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.stage, c, iou, r.miou, r.miou_b, r.miou_n, r.hm
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn diagonal_accumulation() {
        let mut cm = ConfusionMatrix::new(&[0, 1]).unwrap();
        cm.accumulate(&[0, 0, 1], &[0, 0, 1]).unwrap();
        assert_eq!(cm.count(0, 0), Some(2));
        assert_eq!(cm.count(1, 1), Some(1));
        assert_eq!(cm.count(0, 1), Some(0));
    }

    #[test]
    fn background_is_ignored() {
        let mut cm = ConfusionMatrix::new(&[0, 1]).unwrap();
        cm.accumulate(&[-1, -1], &[0, 1]).unwrap();
        assert_eq!(cm.ignored_points(), 2);
        assert_eq!(cm.total(), 2);
        assert!(cm.iou(0).unwrap().is_none());
    }

    #[test]
    fn accumulate_errors() {
        let mut cm = ConfusionMatrix::new(&[0, 1]).unwrap();
        assert!(matches!(cm.accumulate(&[0], &[0, 1]), Err(ScopeError::LengthMismatch { .. })));
        assert!(matches!(cm.accumulate(&[0, 0], &[0, 7]), Err(ScopeError::UnknownPrediction(7))));
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn random_tally_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let classes = [0, 1, 2, 3];
        let gt: Vec<i32> = (0..1000).map(|_| rng.random_range(-1..4)).collect();
        let pred: Vec<i32> = (0..1000).map(|_| rng.random_range(0..4)).collect();
        let mut cm = ConfusionMatrix::new(&classes).unwrap();
        cm.accumulate(&gt, &pred).unwrap();
        for &g in &classes {
            for &p in &classes {
                let brute = gt.iter().zip(&pred).filter(|(a, b)| **a == g && **b == p).count() as u64;
                assert_eq!(cm.count(g, p), Some(brute));
            }
        }
        assert_eq!(cm.ignored_points(), gt.iter().filter(|&&g| g == -1).count() as u64);
        assert_eq!(cm.total(), 1000);
    }

    #[test]
    fn iou_hand_example() {
        let mut cm = ConfusionMatrix::new(&[0, 1]).unwrap();
        // TP = 5, FP = 3, FN = 2 for class 0
        let mut gt = vec![0; 5];
        let mut pred = vec![0; 5];
        gt.extend([1, 1, 1]);
        pred.extend([0, 0, 0]);
        gt.extend([0, 0]);
        pred.extend([1, 1]);
        cm.accumulate(&gt, &pred).unwrap();
        assert_eq!(cm.iou(0).unwrap(), Some(0.5));
        assert!(matches!(cm.iou(9), Err(ScopeError::UnknownClass(9))));
    }

    #[test]
    fn harmonic_mean_values() {
        assert_eq!(harmonic_mean(0.3, 0.3), 0.3);
        assert!((harmonic_mean(40.0, 20.0) - 26.667).abs() < 1e-3);
        assert!((harmonic_mean(41.94, 23.86) - 30.42).abs() < 0.01);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    #[test]
    fn summarize_stage_zero_has_no_novel() {
        let mut cm = ConfusionMatrix::new(&[0, 1]).unwrap();
        cm.accumulate(&[0, 1, 1], &[0, 1, 0]).unwrap();
        let r = summarize(&cm, &[0, 1], &[], 0).unwrap();
        assert_eq!(r.miou_n, 0.0);
        assert_eq!(r.hm, 0.0);
        assert!((r.miou - (0.5 + 0.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn summarize_excludes_undefined() {
        let mut cm = ConfusionMatrix::new(&[0, 1, 2]).unwrap();
        cm.accumulate(&[0, 0, 1], &[0, 0, 1]).unwrap();
        let r = summarize(&cm, &[0, 1], &[2], 1).unwrap();
        assert!(!r.per_class_iou.contains_key(&2));
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.miou_n, 0.0);
    }

    fn report(stage: usize, miou: f64, b: f64) -> MetricsReport {
        MetricsReport {
            stage,
            per_class_iou: BTreeMap::new(),
            miou,
            miou_b: b,
            miou_n: 0.0,
            hm: 0.0,
            classes_evaluated: vec![],
        }
    }

    #[test]
    fn finalize_examples() {
        let flat = [report(0, 0.5, 0.45), report(1, 0.4, 0.45), report(2, 0.3, 0.45)];
        let s = finalize_run(&flat, true).unwrap();
        assert_eq!(s.fpp, 0.0);
        assert!((s.miou_i - 0.4).abs() < 1e-12);
        let s = finalize_run(&flat, false).unwrap();
        assert!((s.miou_i - 0.35).abs() < 1e-12);

        let drop = [report(0, 0.5, 45.0), report(1, 0.4, 41.0)];
        assert_eq!(finalize_run(&drop, true).unwrap().fpp, 4.0);

        let single = [report(0, 0.61, 0.7)];
        let s = finalize_run(&single, true).unwrap();
        assert_eq!((s.miou_i, s.fpp), (0.61, 0.0));
        assert_eq!(finalize_run(&single, false).unwrap().miou_i, 0.61);

        assert!(matches!(finalize_run(&[], true), Err(ScopeError::EmptyRun)));
        assert!(finalize_run(&[report(1, 0.1, 0.1)], true).is_err());
    }

    #[test]
    fn aggregation_modes() {
        let mk = |b: f64, n: f64| RunSummary {
            per_stage: vec![MetricsReport {
                miou_n: n,
                hm: harmonic_mean(b, n),
                ..report(0, 0.0, b)
            }],
            miou_i: 0.0,
            fpp: 0.0,
        };
        let runs = [mk(0.4, 0.2), mk(0.4, 0.3)];
        let per = aggregate_runs(&runs, AggregationMode::PerRunHm).unwrap();
        let avg = aggregate_runs(&runs, AggregationMode::AveragedHm).unwrap();
        assert!((per.hm - (harmonic_mean(0.4, 0.2) + harmonic_mean(0.4, 0.3)) / 2.0).abs() < 1e-12);
        assert!((avg.hm - harmonic_mean(0.4, 0.25)).abs() < 1e-12);
        // HM is concave in n, so averaging first gives the larger value
        assert!(avg.hm >= per.hm);
    }

    #[test]
    fn csv_layout() {
        let mut r = report(1, 0.5, 0.5);
        r.classes_evaluated = vec![0, 3];
        r.per_class_iou.insert(0, 0.25);
        let csv = metrics_csv(&[r]);
        assert_eq!(
            csv,
            "stage,class_id,iou,miou,miou_b,miou_n,hm\n1,0,0.25,0.5,0.5,0,0\n1,3,,0.5,0.5,0,0\n"
        );
    }
}
