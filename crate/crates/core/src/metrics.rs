//! Localization metrics and the method / K comparisons built on them.
//!
//! Evaluation protocol: the response map of each sample with its own audio is
//! min-max normalized (a constant map becomes all 0.5), nearest-neighbour
//! upsampled to image resolution and thresholded with `>= 0.5`. The IoU of
//! that region against the ground-truth box decides success; cIoU is the
//! success rate at IoU 0.5 and AUC the mean success rate over the 19 IoU
//! thresholds 0.05, 0.10, ..., 0.95.

use std::fmt::Write as _;

use crate::attention::{response_map, ResponseMap};
use crate::encoders::{encode_audio, encode_vision, EncoderParams};
use crate::error::{Error, Result};
use crate::synthdata::{BBox, Dataset};
use crate::trainer::{train_stage1, train_stage2, Mode, TrainConfig};

pub const BINARIZE_THRESHOLD: f64 = 0.5;
pub const SUCCESS_THRESHOLD: f64 = 0.5;

/// IoU thresholds `k / 20` for `k = 1..=19`.
pub fn auc_thresholds() -> Vec<f64> {
    (1..=19).map(|k| k as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<bool>,
}

impl BoolGrid {
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x]
    }
}

/// Nearest-neighbour upsampling of a `h × w` map to `out_h × out_w`.
pub fn upsample_nearest(alpha: &ResponseMap, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = y * alpha.height / out_h;
        for x in 0..out_w {
            let sx = x * alpha.width / out_w;
            out.push(alpha.values[sy * alpha.width + sx]);
        }
    }
    out
}

/// Min-max normalizes, upsamples to `out_h × out_w` and keeps pixels `>= 0.5`.
pub fn binarize_map(alpha: &ResponseMap, out_h: usize, out_w: usize) -> BoolGrid {
    let (lo, hi) = (alpha.min(), alpha.max());
    let span = hi - lo;
    let normalized: Vec<f64> = alpha
        .values
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.5 })
        .collect();
    let norm_map = ResponseMap {
        values: normalized,
        ..alpha.clone()
    };
    BoolGrid {
        height: out_h,
        width: out_w,
        values: upsample_nearest(&norm_map, out_h, out_w)
            .into_iter()
            .map(|v| v >= BINARIZE_THRESHOLD)
            .collect(),
    }
}

/// Pixel IoU between a predicted region and a box; 0 when the union is empty.
pub fn iou(pred: &BoolGrid, gt: &BBox) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for y in 0..pred.height {
        for x in 0..pred.width {
            let p = pred.get(y, x);
            let g = gt.contains(y, x);
            inter += (p && g) as usize;
            union += (p || g) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ciou: f64,
    pub auc: f64,
    /// `(id, iou)` sorted by id.
    pub per_sample: Vec<(usize, f64)>,
    pub n_eval: usize,
    pub binarize_threshold: f64,
    pub success_threshold: f64,
}

fn success_rate(ious: &[f64], threshold: f64) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    ious.iter().filter(|&&v| v >= threshold).count() as f64 / ious.len() as f64
}

/// Builds a report from per-sample IoUs.
pub fn summarize(mut per_sample: Vec<(usize, f64)>) -> EvalReport {
    per_sample.sort_by_key(|&(id, _)| id);
    let ious: Vec<f64> = per_sample.iter().map(|&(_, v)| v).collect();
    let thresholds = auc_thresholds();
    let auc = thresholds.iter().map(|&t| success_rate(&ious, t)).sum::<f64>() / thresholds.len() as f64;
    EvalReport {
        ciou: success_rate(&ious, SUCCESS_THRESHOLD),
        auc,
        n_eval: per_sample.len(),
        per_sample,
        binarize_threshold: BINARIZE_THRESHOLD,
        success_threshold: SUCCESS_THRESHOLD,
    }
}

/// Localization map of each sample with its own audio.
pub fn self_response(params: &EncoderParams, data: &Dataset, i: usize) -> Result<ResponseMap> {
    let s = &data.samples[i];
    response_map(&encode_audio(params, &s.audio)?, &encode_vision(params, &s.image)?)
}

pub fn evaluate(params: &EncoderParams, data: &Dataset) -> Result<EvalReport> {
    let mut per_sample = Vec::with_capacity(data.len());
    for (i, s) in data.samples.iter().enumerate() {
        let gt = s.gt_box.ok_or(Error::MissingBox(s.id))?;
        let alpha = self_response(params, data, i)?;
        let pred = binarize_map(&alpha, s.image.height, s.image.width);
        per_sample.push((s.id, iou(&pred, &gt)));
    }
    Ok(summarize(per_sample))
}

/// `id,iou` rows followed by a `ciou=...,auc=...` summary row.
pub fn report_to_csv(report: &EvalReport) -> String {
    let mut out = String::from("id,iou\n");
    for (id, v) in &report.per_sample {
        writeln!(out, "{id},{v:?}").unwrap();
    }
    writeln!(out, "{}", summary_line(report)).unwrap();
    out
}

pub fn summary_line(report: &EvalReport) -> String {
    format!("ciou={:?},auc={:?}", report.ciou, report.auc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub ciou: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeRow {
    pub mode: Mode,
    pub ciou: f64,
    pub auc: f64,
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("K,ciou,auc\n");
    for r in rows {
        writeln!(out, "{},{:?},{:?}", r.k, r.ciou, r.auc).unwrap();
    }
    out
}

pub fn modes_to_csv(rows: &[ModeRow]) -> String {
    let mut out = String::from("mode,ciou,auc\n");
    for r in rows {
        writeln!(out, "{},{:?},{:?}", r.mode, r.ciou, r.auc).unwrap();
    }
    out
}

/// Trains stage 2 once per `K` from a shared stage-1 checkpoint and evaluates
/// each result on `eval_data`.
pub fn ablate_k(train_data: &Dataset, eval_data: &Dataset, cfg: &TrainConfig, k_list: &[usize]) -> Result<Vec<SweepRow>> {
    if k_list.is_empty() {
        return Err(Error::InvalidConfig("empty K list".into()));
    }
    let n = train_data.len();
    if let Some(&bad) = k_list.iter().find(|&&k| k == 0 || k >= n) {
        return Err(Error::InvalidConfig(format!("K = {bad} outside 1..={}", n - 1)));
    }
    let stage1 = train_stage1(train_data, cfg)?;
    k_list
        .iter()
        .map(|&k| {
            let run_cfg = TrainConfig { k, ..cfg.clone() };
            let out = train_stage2(train_data, &stage1.params, None, &run_cfg)?;
            let report = evaluate(&out.params, eval_data)?;
            Ok(SweepRow {
                k,
                ciou: report.ciou,
                auc: report.auc,
            })
        })
        .collect()
}

/// Trains stage 2 in every mode from a shared stage-1 checkpoint and evaluates
/// each result on `eval_data`.
pub fn compare_methods(
    train_data: &Dataset,
    eval_data: &Dataset,
    cfg: &TrainConfig,
    modes: &[Mode],
) -> Result<Vec<ModeRow>> {
    let stage1 = train_stage1(train_data, cfg)?;
    modes
        .iter()
        .map(|&mode| {
            let run_cfg = TrainConfig { mode, ..cfg.clone() };
            let out = train_stage2(train_data, &stage1.params, None, &run_cfg)?;
            let report = evaluate(&out.params, eval_data)?;
            Ok(ModeRow {
                mode,
                ciou: report.ciou,
                auc: report.auc,
            })
        })
        .collect()
}
