//! Pseudo-label selection policies.
//!
//! Three ways of turning a batch of teacher entropies into a mask:
//!
//! * `Fixed` keeps every pseudo-label with entropy ≤ τ.
//! * `Multistage` splits the SSL phase into `n_stage` equal stages. Stage
//!   `i` admits the lowest-entropy fraction `α_i` of each batch, with
//!   `α_i` rising linearly from `α_start` to `α_end`. The per-batch
//!   threshold is the entropy at 0-indexed position `floor(α_i·N)` of the
//!   ascending sort.
//! * `Adaptive` interpolates an absolute threshold linearly from `τ_start`
//!   to `τ_end` over the SSL phase; it never looks at the batch.
//!
//! Selection always uses `≤`, so ties at the threshold all pass.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleKind {
    Fixed {
        tau: f64,
    },
    /// Proportions in percent.
    Multistage {
        alpha_start: f64,
        alpha_end: f64,
        n_stage: usize,
    },
    Adaptive {
        tau_start: f64,
        tau_end: f64,
    },
}

/// A selection policy plus the length of the SSL phase it spans.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    kind: ScheduleKind,
    n_iter: usize,
}

impl CurriculumSchedule {
    pub fn new(kind: ScheduleKind, n_iter: usize) -> Result<Self> {
        if n_iter < 1 {
            return Err(Error::Config("schedule needs n_iter ≥ 1".into()));
        }
        match kind {
            ScheduleKind::Fixed { tau } if tau.is_nan() => {
                return Err(Error::Config("fixed τ is NaN".into()))
            }
            ScheduleKind::Multistage {
                alpha_start,
                alpha_end,
                n_stage,
            } => {
                if !(alpha_start > 0.0 && alpha_start <= alpha_end && alpha_end <= 100.0) {
                    return Err(Error::Config(format!(
                        "multistage needs 0 < α_start ≤ α_end ≤ 100, got {alpha_start}..{alpha_end}"
                    )));
                }
                if n_stage < 2 {
                    return Err(Error::Config(format!("multistage needs n_stage ≥ 2, got {n_stage}")));
                }
            }
            ScheduleKind::Adaptive { tau_start, tau_end } => {
                if !(tau_start.is_finite() && tau_end.is_finite() && tau_start <= tau_end) {
                    return Err(Error::Config(format!(
                        "adaptive needs finite τ_start ≤ τ_end, got {tau_start}..{tau_end}"
                    )));
                }
            }
            _ => {}
        }
        Ok(CurriculumSchedule { kind, n_iter })
    }

    pub fn fixed(tau: f64, n_iter: usize) -> Result<Self> {
        Self::new(ScheduleKind::Fixed { tau }, n_iter)
    }

    pub fn multistage(alpha_start: f64, alpha_end: f64, n_stage: usize, n_iter: usize) -> Result<Self> {
        Self::new(
            ScheduleKind::Multistage {
                alpha_start,
                alpha_end,
                n_stage,
            },
            n_iter,
        )
    }

    pub fn adaptive(tau_start: f64, tau_end: f64, n_iter: usize) -> Result<Self> {
        Self::new(ScheduleKind::Adaptive { tau_start, tau_end }, n_iter)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn n_iter(&self) -> usize {
        self.n_iter
    }

    /// Threshold for SSL iteration `t` (0-based within the SSL phase) and the
    /// stage index for multistage schedules.
    pub fn threshold(&self, t: usize, entropies: &[f64]) -> Result<(f64, Option<usize>)> {
        match self.kind {
            ScheduleKind::Fixed { tau } => Ok((tau, None)),
            ScheduleKind::Multistage { .. } => {
                let (z, stage) = stage_threshold(t, self, entropies)?;
                Ok((z, Some(stage)))
            }
            ScheduleKind::Adaptive { .. } => Ok((adaptive_threshold(t, self)?, None)),
        }
    }

    /// Threshold, then selection.
    pub fn select(&self, t: usize, entropies: &[f64]) -> Result<(SelectionResult, Option<usize>)> {
        let (threshold, stage) = self.threshold(t, entropies)?;
        Ok((select(entropies, threshold), stage))
    }

    fn multistage_params(&self) -> Result<(f64, f64, usize)> {
        match self.kind {
            ScheduleKind::Multistage {
                alpha_start,
                alpha_end,
                n_stage,
            } => Ok((alpha_start, alpha_end, n_stage)),
            _ => Err(Error::InvalidArgument("schedule is not multistage".into())),
        }
    }
}

/// Outcome of thresholding one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub mask: Vec<bool>,
    pub threshold_used: f64,
    pub mask_ratio: f64,
}

impl SelectionResult {
    pub fn selected(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Stage proportion `α_i` in percent (`1 ≤ i ≤ n_stage`).
pub fn stage_percent(i: usize, sched: &CurriculumSchedule) -> Result<f64> {
    let (start, end, n_stage) = sched.multistage_params()?;
    if i < 1 || i > n_stage {
        return Err(Error::InvalidArgument(format!("stage {i} outside 1..={n_stage}")));
    }
    Ok(start + (i - 1) as f64 * (end - start) / (n_stage - 1) as f64)
}

/// Stage proportion `α_i` as a fraction in `(0, 1]`.
pub fn stage_proportion(i: usize, sched: &CurriculumSchedule) -> Result<f64> {
    Ok(stage_percent(i, sched)? / 100.0)
}

/// 1-based stage containing SSL iteration `t`. The last stage absorbs any
/// remainder when `n_stage` does not divide `n_iter`.
pub fn stage_index(t: usize, sched: &CurriculumSchedule) -> Result<usize> {
    let (_, _, n_stage) = sched.multistage_params()?;
    let len = (sched.n_iter / n_stage).max(1);
    Ok((t / len + 1).min(n_stage))
}

/// Entropy at 0-indexed position `floor(fraction·N)` of the ascending
/// sort, clamped to the last element. `percent` is `100·fraction`.
pub fn quantile_threshold(entropies: &[f64], percent: f64) -> Result<f64> {
    if entropies.is_empty() {
        return Err(Error::InvalidArgument("empty entropy batch".into()));
    }
    if entropies.iter().any(|e| e.is_nan()) {
        return Err(Error::NonFinite("entropy batch"));
    }
    let mut sorted = entropies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let k = ((percent * n as f64 / 100.0).floor().max(0.0) as usize).min(n - 1);
    Ok(sorted[k])
}

/// Per-batch multistage threshold `z_i` and the stage `i` it belongs to.
pub fn stage_threshold(t: usize, sched: &CurriculumSchedule, entropies: &[f64]) -> Result<(f64, usize)> {
    if t >= sched.n_iter {
        return Err(Error::InvalidArgument(format!(
            "iteration {t} outside the SSL phase of {} iterations",
            sched.n_iter
        )));
    }
    let stage = stage_index(t, sched)?;
    let z = quantile_threshold(entropies, stage_percent(stage, sched)?)?;
    Ok((z, stage))
}

/// `τ_t = τ_start + (τ_end − τ_start)·t/N_iter`.
pub fn adaptive_threshold(t: usize, sched: &CurriculumSchedule) -> Result<f64> {
    let (start, end) = match sched.kind {
        ScheduleKind::Adaptive { tau_start, tau_end } => (tau_start, tau_end),
        _ => return Err(Error::InvalidArgument("schedule is not adaptive".into())),
    };
    if t > sched.n_iter {
        return Err(Error::InvalidArgument(format!("iteration {t} beyond N_iter = {}", sched.n_iter)));
    }
    if t == sched.n_iter {
        return Ok(end);
    }
    Ok(start + (end - start) * t as f64 / sched.n_iter as f64)
}

/// `mask[j] = entropies[j] ≤ threshold`.
pub fn select(entropies: &[f64], threshold: f64) -> SelectionResult {
    let mask: Vec<bool> = entropies.iter().map(|&e| e <= threshold).collect();
    let hits = mask.iter().filter(|&&m| m).count();
    let mask_ratio = if mask.is_empty() {
        0.0
    } else {
        hits as f64 / mask.len() as f64
    };
    SelectionResult {
        mask,
        threshold_used: threshold,
        mask_ratio,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub iter: usize,
    pub ratio: f64,
    pub threshold: f64,
    /// 0 when the schedule has no stages.
    pub stage: usize,
}

/// Mask-ratio telemetry, one record per SSL iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskRatioLog {
    records: Vec<MaskRecord>,
}

impl MaskRatioLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, iter: usize, sel: &SelectionResult, stage: Option<usize>) -> Result<()> {
        if let Some(last) = self.records.last() {
            if iter <= last.iter {
                return Err(Error::InvalidArgument(format!(
                    "telemetry iteration {iter} not after {}",
                    last.iter
                )));
            }
        }
        self.records.push(MaskRecord {
            iter,
            ratio: sel.mask_ratio,
            threshold: sel.threshold_used,
            stage: stage.unwrap_or(0),
        });
        Ok(())
    }

    pub fn records(&self) -> &[MaskRecord] {
        &self.records
    }

    /// CSV with header `iter,ratio,threshold,stage`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        wtr.write_record(["iter", "ratio", "threshold", "stage"])?;
        for r in &self.records {
            wtr.serialize(r)?;
        }
        wtr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Reads what [`MaskRatioLog::write_csv`] wrote; other headers are rejected.
    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        if rdr.headers()?.iter().ne(["iter", "ratio", "threshold", "stage"]) {
            return Err(Error::InvalidArgument(format!(
                "mask-ratio log header {:?} is not iter,ratio,threshold,stage",
                rdr.headers()?
            )));
        }
        let mut log = MaskRatioLog::new();
        for rec in rdr.deserialize::<MaskRecord>() {
            let rec = rec?;
            if log.records.last().is_some_and(|l| rec.iter <= l.iter) {
                return Err(Error::InvalidArgument(format!("iteration {} out of order", rec.iter)));
            }
            log.records.push(rec);
        }
        Ok(log)
    }

    /// Population standard deviation of the ratio over the second half of
    /// the records.
    pub fn last_half_std(&self) -> Option<f64> {
        let tail: Vec<f64> = self.records[self.records.len() / 2..].iter().map(|r| r.ratio).collect();
        if tail.is_empty() {
            return None;
        }
        let n = tail.len() as f64;
        let mean = tail.iter().sum::<f64>() / n;
        Some((tail.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt())
    }

    /// Maximal runs of identical ratio.
    pub fn plateaus(&self) -> Vec<Plateau> {
        let mut out: Vec<Plateau> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some(p) if p.ratio == r.ratio => p.len += 1,
                _ => out.push(Plateau {
                    start_iter: r.iter,
                    len: 1,
                    ratio: r.ratio,
                }),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plateau {
    pub start_iter: usize,
    pub len: usize,
    pub ratio: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn paper_multistage(n_iter: usize) -> CurriculumSchedule {
        CurriculumSchedule::multistage(65.0, 95.0, 4, n_iter).unwrap()
    }

    #[test]
    fn curve_statistics_and_csv_round_trip() {
        let mut log = MaskRatioLog::new();
        for (i, r) in [0.5, 0.5, 0.75, 0.75, 0.25, 0.75].into_iter().enumerate() {
            let sel = SelectionResult {
                mask: vec![],
                threshold_used: -1.0,
                mask_ratio: r,
            };
            log.push(10 + i, &sel, None).unwrap();
        }
        let levels: Vec<(usize, usize, f64)> = log.plateaus().iter().map(|p| (p.start_iter, p.len, p.ratio)).collect();
        assert_eq!(levels, [(10, 2, 0.5), (12, 2, 0.75), (14, 1, 0.25), (15, 1, 0.75)]);
        // last half [0.75, 0.25, 0.75]
        assert!((log.last_half_std().unwrap() - (1.0f64 / 18.0).sqrt()).abs() < 1e-15);
        assert_eq!(MaskRatioLog::new().last_half_std(), None);

        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        assert_eq!(MaskRatioLog::read_csv(&buf[..]).unwrap(), log);
        assert!(MaskRatioLog::read_csv(&b"iter,loss\n1,2\n"[..]).is_err());
    }

    #[test]
    fn stage_proportions() {
        let s = paper_multistage(10_000);
        let got: Vec<f64> = (1..=4).map(|i| stage_proportion(i, &s).unwrap()).collect();
        assert_eq!(got, vec![0.65, 0.75, 0.85, 0.95]);
        assert!(stage_proportion(0, &s).is_err());
        assert!(stage_proportion(5, &s).is_err());
    }

    #[test]
    fn stage_threshold_examples() {
        let s = paper_multistage(10_000);
        let batch: Vec<f64> = (0..100).map(|i| -10.0 + 0.1 * i as f64).collect();
        let (z, stage) = stage_threshold(0, &s, &batch).unwrap();
        assert_eq!((z, stage), (batch[65], 1));
        let (z, stage) = stage_threshold(9_999, &s, &batch).unwrap();
        assert_eq!((z, stage), (batch[95], 4));

        let flat = vec![-4.2; 37];
        let (z, _) = stage_threshold(0, &s, &flat).unwrap();
        assert_eq!(z, -4.2);
        assert_eq!(select(&flat, z).mask_ratio, 1.0);

        assert!(stage_threshold(0, &s, &[]).is_err());
        assert!(stage_threshold(10_000, &s, &batch).is_err());
    }

    #[test]
    fn last_stage_absorbs_remainder() {
        let s = paper_multistage(10);
        let stages: Vec<usize> = (0..10).map(|t| stage_index(t, &s).unwrap()).collect();
        assert_eq!(stages, vec![1, 1, 2, 2, 3, 3, 4, 4, 4, 4]);
    }

    #[test]
    fn adaptive_examples() {
        let s = CurriculumSchedule::adaptive(-4.5, -3.9, 10_000).unwrap();
        assert_eq!(adaptive_threshold(0, &s).unwrap(), -4.5);
        assert_eq!(adaptive_threshold(10_000, &s).unwrap(), -3.9);
        assert!((adaptive_threshold(5_000, &s).unwrap() + 4.2).abs() < 1e-12);
        assert!(adaptive_threshold(10_001, &s).is_err());
    }

    #[test]
    fn select_examples() {
        let r = select(&[-5.0, -4.0, -3.0], -3.9);
        assert_eq!(r.mask, vec![true, true, false]);
        assert!((r.mask_ratio - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(select(&[1.0, 2.0], f64::INFINITY).mask_ratio, 1.0);
        assert_eq!(select(&[1.0, 2.0], f64::NEG_INFINITY).mask_ratio, 0.0);
    }

    #[test]
    fn schedule_validation() {
        assert!(CurriculumSchedule::multistage(0.0, 95.0, 4, 10).is_err());
        assert!(CurriculumSchedule::multistage(96.0, 95.0, 4, 10).is_err());
        assert!(CurriculumSchedule::multistage(65.0, 101.0, 4, 10).is_err());
        assert!(CurriculumSchedule::multistage(65.0, 95.0, 1, 10).is_err());
        assert!(CurriculumSchedule::adaptive(-3.0, -4.0, 10).is_err());
        assert!(CurriculumSchedule::fixed(-3.9, 0).is_err());
    }

    #[test]
    fn telemetry_csv() {
        let mut log = MaskRatioLog::new();
        for (i, tau) in [(0, -5.0), (1, -4.0), (2, -3.0)] {
            log.push(i, &select(&[-4.5, -3.5], tau), None).unwrap();
        }
        assert!(log.push(2, &select(&[0.0], 0.0), None).is_err());
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "iter,ratio,threshold,stage");
        assert_eq!(lines[2], "1,0.5,-4.0,0");
    }

    proptest! {
        #[test]
        fn multistage_ratio_bounds(
            raw in proptest::collection::hash_set(-100_000i64..100_000, 1..200),
            t in 0usize..1000,
        ) {
            let batch: Vec<f64> = raw.into_iter().map(|v| v as f64 / 1000.0).collect();
            let s = paper_multistage(1000);
            let (z, stage) = stage_threshold(t, &s, &batch).unwrap();
            let alpha = stage_proportion(stage, &s).unwrap();
            let r = select(&batch, z);
            let n = batch.len() as f64;
            prop_assert!(r.mask_ratio >= alpha - 1e-12 || r.mask_ratio == 1.0);
            prop_assert!(r.mask_ratio <= alpha + 1.0 / n + 1e-12);
            for (e, m) in batch.iter().zip(&r.mask) {
                prop_assert_eq!(*m, *e <= z);
            }
        }

        #[test]
        fn thresholds_nondecreasing_across_stages(
            batch in proptest::collection::vec(-10.0f64..0.0, 1..100),
        ) {
            let s = paper_multistage(400);
            let zs: Vec<f64> = [0, 100, 200, 300]
                .iter()
                .map(|&t| stage_threshold(t, &s, &batch).unwrap().0)
                .collect();
            prop_assert!(zs.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn adaptive_is_affine(a in 0usize..500, t in 0usize..500) {
            let s = CurriculumSchedule::adaptive(-4.5, -3.9, 1000).unwrap();
            let d1 = adaptive_threshold(t + a, &s).unwrap() - adaptive_threshold(t, &s).unwrap();
            let d0 = adaptive_threshold(a, &s).unwrap() - adaptive_threshold(0, &s).unwrap();
            prop_assert!((d1 - d0).abs() < 1e-12);
        }

        #[test]
        fn select_is_monotone(
            batch in proptest::collection::vec(-10.0f64..0.0, 0..50),
            lo in -10.0f64..0.0,
            bump in 0.0f64..5.0,
        ) {
            let a = select(&batch, lo);
            let b = select(&batch, lo + bump);
            for (x, y) in a.mask.iter().zip(&b.mask) {
                prop_assert!(!x || *y);
            }
        }

        #[test]
        fn stage_index_is_monotone_and_covering(n_iter in 4usize..2000, n_stage in 2usize..5) {
            prop_assume!(n_iter >= n_stage);
            let s = CurriculumSchedule::multistage(50.0, 90.0, n_stage, n_iter).unwrap();
            let stages: Vec<usize> = (0..n_iter).map(|t| stage_index(t, &s).unwrap()).collect();
            prop_assert!(stages.windows(2).all(|w| w[0] <= w[1]));
            for i in 1..=n_stage {
                prop_assert!(stages.contains(&i));
            }
        }
    }
}
