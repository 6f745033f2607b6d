//! Joint BVP / RR / SpO2 objective, Adam training loop and per-session evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, Modality, ModelConfig, ModelError, ModelParams, Prediction, Upstream};
use crate::sigproc::{self, SigError, SpectralBand};
use crate::timeline::{Window, WindowBatch};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("SpO2 target {0} outside [0, 100]")]
    Spo2Target(f64),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {terms}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        terms: LossTerms,
    },
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Signal(#[from] SigError),
}

/// Which loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMask {
    pub bvp: bool,
    pub rr: bool,
    pub spo2: bool,
}

impl TaskMask {
    pub const ALL: TaskMask = TaskMask {
        bvp: true,
        rr: true,
        spo2: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.bvp || self.rr || self.spo2)
    }

    pub fn is_multi(&self) -> bool {
        [self.bvp, self.rr, self.spo2].iter().filter(|b| **b).count() > 1
    }
}

impl Default for TaskMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl FromStr for TaskMask {
    type Err = String;

    /// Comma list over `hr` (alias `bvp`), `rr`, `spo2`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut m = TaskMask {
            bvp: false,
            rr: false,
            spo2: false,
        };
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok {
                "hr" | "bvp" => m.bvp = true,
                "rr" => m.rr = true,
                "spo2" => m.spo2 = true,
                _ => return Err(format!("unknown task `{tok}` (expected hr, spo2, rr)")),
            }
        }
        if m.is_empty() {
            return Err("at least one task is required".into());
        }
        Ok(m)
    }
}

impl fmt::Display for TaskMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.bvp {
            parts.push("hr");
        }
        if self.spo2 {
            parts.push("spo2");
        }
        if self.rr {
            parts.push("rr");
        }
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub bvp: f64,
    pub rr: f64,
    pub spo2: f64,
}

impl fmt::Display for LossTerms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={} bvp={} rr={} spo2={}",
            self.total, self.bvp, self.rr, self.spo2
        )
    }
}

impl LossTerms {
    fn add(&mut self, o: &LossTerms) {
        self.total += o.total;
        self.bvp += o.bvp;
        self.rr += o.rr;
        self.spo2 += o.spo2;
    }

    fn scale(&mut self, s: f64) {
        self.total *= s;
        self.bvp *= s;
        self.rr *= s;
        self.spo2 *= s;
    }

    fn is_finite(&self) -> bool {
        self.total.is_finite() && self.bvp.is_finite() && self.rr.is_finite() && self.spo2.is_finite()
    }
}

fn mse_and_grad(pred: &[f64], gt: &[f64], weight: f64) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let mse = pred.iter().zip(gt).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / n;
    let grad = pred.iter().zip(gt).map(|(p, g)| weight * 2.0 * (p - g) / n).collect();
    (mse, grad)
}

/// `MSE_bvp + MSE_rr + coeff * (spo2_hat - spo2_gt)^2 * (100 - spo2_gt)`, each term
/// gated by `mask`, together with the derivative with respect to every prediction.
/// The SpO2 weight uses the ground-truth window mean.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    bvp_hat: &[f64],
    bvp_gt: &[f64],
    rr_hat: &[f64],
    rr_gt: &[f64],
    spo2_hat: f64,
    spo2_gt: f64,
    coeff: f64,
    mask: TaskMask,
) -> Result<(LossTerms, Upstream), TrainError> {
    if !(0.0..=100.0).contains(&spo2_gt) {
        return Err(TrainError::Spo2Target(spo2_gt));
    }
    if bvp_hat.len() != bvp_gt.len() || rr_hat.len() != rr_gt.len() || bvp_hat.len() != rr_hat.len() {
        return Err(TrainError::Length(format!(
            "bvp {}/{}, rr {}/{}",
            bvp_hat.len(),
            bvp_gt.len(),
            rr_hat.len(),
            rr_gt.len()
        )));
    }
    let on = |b: bool| if b { 1.0 } else { 0.0 };
    let (bvp_mse, bvp_g) = mse_and_grad(bvp_hat, bvp_gt, on(mask.bvp));
    let (rr_mse, rr_g) = mse_and_grad(rr_hat, rr_gt, on(mask.rr));
    let weight = coeff * (100.0 - spo2_gt);
    let err = spo2_hat - spo2_gt;
    let spo2_term = weight * err * err;
    let terms = LossTerms {
        bvp: bvp_mse,
        rr: rr_mse,
        spo2: spo2_term,
        total: on(mask.bvp) * bvp_mse + on(mask.rr) * rr_mse + on(mask.spo2) * spo2_term,
    };
    let up = Upstream {
        bvp: bvp_g,
        rr: rr_g,
        spo2: on(mask.spo2) * 2.0 * weight * err,
    };
    Ok((terms, up))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_spo2_coeff: f64,
    pub task_mask: TaskMask,
    pub modality: Modality,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 9e-3,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            loss_spo2_coeff: 0.002,
            task_mask: TaskMask::ALL,
            modality: Modality::Both,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be nonnegative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.task_mask.is_empty() {
            return Err(TrainError::Config("task_mask must be nonempty".into()));
        }
        if !(self.loss_spo2_coeff >= 0.0) {
            return Err(TrainError::Config("loss_spo2_coeff must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Bands used to turn predicted waveforms into rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bands {
    pub hr: SpectralBand,
    pub rr: SpectralBand,
}

impl Default for Bands {
    fn default() -> Self {
        Self {
            hr: SpectralBand::heart(),
            rr: SpectralBand::respiration(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub mae: f64,
    pub mape: f64,
}

/// MAE / MAPE per task, the layout of the result tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub hr: TaskMetrics,
    pub spo2: TaskMetrics,
    pub rr: TaskMetrics,
}

impl MetricTable {
    pub fn rows(&self) -> [(&'static str, TaskMetrics); 3] {
        [("HR", self.hr), ("SpO2", self.spo2), ("RR", self.rr)]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,mae,mape\n");
        for (name, m) in self.rows() {
            s.push_str(&format!("{name},{:.6},{:.6}\n", m.mae, m.mape));
        }
        s
    }

    /// One fixed-width row group per table: label | HR | SpO2 | RR.
    pub fn to_table(&self, row_label: &str) -> String {
        let rule = "-".repeat(78);
        let mut s = String::new();
        s.push_str(&rule);
        s.push('\n');
        s.push_str(&format!(
            "{:<24}| {:^15} | {:^15} | {:^15}\n",
            "", "HR Task", "SpO2 Task", "RR Task"
        ));
        s.push_str(&format!(
            "{:<24}| {:>7} {:>7} | {:>7} {:>7} | {:>7} {:>7}\n",
            "Training Set", "MAE", "MAPE", "MAE", "MAPE", "MAE", "MAPE"
        ));
        s.push_str(&rule);
        s.push('\n');
        s.push_str(&format!(
            "{:<24}| {:>7.2} {:>7.2} | {:>7.2} {:>7.2} | {:>7.2} {:>7.2}\n",
            row_label, self.hr.mae, self.hr.mape, self.spo2.mae, self.spo2.mape, self.rr.mae, self.rr.mape
        ));
        s.push_str(&rule);
        s.push('\n');
        s
    }
}

/// Label used in result tables, e.g. `Both(Multi Task)`.
pub fn run_label(modality: Modality, mask: TaskMask) -> String {
    format!(
        "{}({})",
        modality.label(),
        if mask.is_multi() { "Multi Task" } else { "Single Task" }
    )
}

/// Per-session rate estimates behind a metric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEstimate {
    pub session: String,
    pub windows: usize,
    pub hr_pred: f64,
    pub hr_gt: f64,
    pub rr_pred: f64,
    pub rr_gt: f64,
    pub spo2_pred: f64,
    pub spo2_gt: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Averages per-window rate estimates per session, then scores sessions.
pub fn score_predictions(
    preds: &[Prediction],
    windows: &WindowBatch,
    bands: Bands,
) -> Result<(MetricTable, Vec<SessionEstimate>), TrainError> {
    if windows.is_empty() {
        return Err(TrainError::EmptySet("evaluation"));
    }
    if preds.len() != windows.len() {
        return Err(TrainError::Length(format!(
            "{} predictions for {} windows",
            preds.len(),
            windows.len()
        )));
    }
    // session -> (hr_p, hr_g, rr_p, rr_g, spo2_p, spo2_g) per window, in first-seen order
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, [Vec<f64>; 6]> = BTreeMap::new();
    for (p, w) in preds.iter().zip(&windows.windows) {
        let fs = w.fs_hz;
        let row = [
            sigproc::dominant_rate_bpm(&p.bvp, fs, bands.hr)?,
            sigproc::dominant_rate_bpm(&w.bvp, fs, bands.hr)?,
            sigproc::dominant_rate_bpm(&p.rr, fs, bands.rr)?,
            sigproc::dominant_rate_bpm(&w.rr, fs, bands.rr)?,
            p.spo2,
            w.spo2_mean,
        ];
        let g = groups.entry(w.session.as_str()).or_insert_with(|| {
            order.push(w.session.as_str());
            Default::default()
        });
        for (dst, v) in g.iter_mut().zip(row) {
            dst.push(v);
        }
    }
    let est: Vec<SessionEstimate> = order
        .iter()
        .map(|s| {
            let g = &groups[s];
            SessionEstimate {
                session: s.to_string(),
                windows: g[0].len(),
                hr_pred: mean(&g[0]),
                hr_gt: mean(&g[1]),
                rr_pred: mean(&g[2]),
                rr_gt: mean(&g[3]),
                spo2_pred: mean(&g[4]),
                spo2_gt: mean(&g[5]),
            }
        })
        .collect();
    let col = |f: fn(&SessionEstimate) -> f64| est.iter().map(f).collect::<Vec<_>>();
    let task = |p: Vec<f64>, g: Vec<f64>| -> Result<TaskMetrics, TrainError> {
        Ok(TaskMetrics {
            mae: sigproc::mae(&p, &g)?,
            mape: sigproc::mape(&p, &g)?,
        })
    };
    let table = MetricTable {
        hr: task(col(|e| e.hr_pred), col(|e| e.hr_gt))?,
        spo2: task(col(|e| e.spo2_pred), col(|e| e.spo2_gt))?,
        rr: task(col(|e| e.rr_pred), col(|e| e.rr_gt))?,
    };
    Ok((table, est))
}

fn predict_one(w: &Window, params: &ModelParams, modality: Modality) -> Result<Prediction, ModelError> {
    let input = model::prepare_input(w, params.config())?;
    Ok(model::forward(&input, params, modality, false)?.prediction)
}

pub fn predict(params: &ModelParams, modality: Modality, windows: &WindowBatch) -> Result<Vec<Prediction>, TrainError> {
    windows
        .windows
        .par_iter()
        .map(|w| predict_one(w, params, modality))
        .collect::<Result<Vec<_>, _>>()
        .map_err(TrainError::from)
}

/// Per-session MAE / MAPE of HR, SpO2 and RR on `windows`.
pub fn evaluate(
    params: &ModelParams,
    modality: Modality,
    windows: &WindowBatch,
    bands: Bands,
) -> Result<(MetricTable, Vec<SessionEstimate>), TrainError> {
    if windows.is_empty() {
        return Err(TrainError::EmptySet("evaluation"));
    }
    let preds = predict(params, modality, windows)?;
    score_predictions(&preds, windows, bands)
}

fn window_loss(p: &Prediction, w: &Window, cfg: &TrainConfig) -> Result<(LossTerms, Upstream), TrainError> {
    joint_loss(&p.bvp, &w.bvp, &p.rr, &w.rr, p.spo2, w.spo2_mean, cfg.loss_spo2_coeff, cfg.task_mask)
}

fn loss_and_grad(
    w: &Window,
    params: &ModelParams,
    cfg: &TrainConfig,
) -> Result<(LossTerms, Vec<f64>), TrainError> {
    let input = model::prepare_input(w, params.config())?;
    let pass = model::forward(&input, params, cfg.modality, true)?;
    let (terms, up) = window_loss(&pass.prediction, w, cfg)?;
    let grad = model::backward(&pass, params, &up)?;
    Ok((terms, grad))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: LossTerms,
    pub val_loss: LossTerms,
    pub val_metrics: MetricTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub run: String,
    pub modality: Modality,
    pub tasks: String,
    pub param_count: usize,
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch with the lowest validation loss (earliest on ties).
    pub selected_epoch: usize,
    /// Metric tables of the selected parameters, keyed by split name.
    pub metrics: BTreeMap<String, MetricTable>,
}

impl TrainReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn mean_loss(params: &ModelParams, cfg: &TrainConfig, set: &WindowBatch) -> Result<(LossTerms, Vec<Prediction>), TrainError> {
    let preds = predict(params, cfg.modality, set)?;
    let mut acc = LossTerms::default();
    for (p, w) in preds.iter().zip(&set.windows) {
        acc.add(&window_loss(p, w, cfg)?.0);
    }
    acc.scale(1.0 / set.len() as f64);
    Ok((acc, preds))
}

/// Mini-batch Adam on the joint loss; returns the parameters of the epoch with the
/// lowest validation loss.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &WindowBatch,
    val_set: &WindowBatch,
    bands: Bands,
) -> Result<(ModelParams, TrainReport), TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }
    let mut params = ModelParams::init(model_cfg, cfg.seed)?;
    let mut adam = Adam::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05EE_D0FB_A7C4);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ModelParams)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = LossTerms::default();
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<(LossTerms, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| loss_and_grad(&train_set.windows[i], &params, cfg))
                .collect::<Result<_, _>>()?;
            let mut batch_loss = LossTerms::default();
            let mut grad = vec![0.0; params.len()];
            for (terms, g) in &results {
                batch_loss.add(terms);
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            if !batch_loss.is_finite() {
                batch_loss.scale(1.0 / batch.len() as f64);
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: bi + 1,
                    terms: batch_loss,
                });
            }
            epoch_loss.add(&batch_loss);
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            adam.update(params.as_mut_slice(), &grad, cfg.lr);
        }
        epoch_loss.scale(1.0 / train_set.len() as f64);
        let (val_loss, val_preds) = mean_loss(&params, cfg, val_set)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                batch: 0,
                terms: val_loss,
            });
        }
        let (val_metrics, _) = score_predictions(&val_preds, val_set, bands)?;
        if best.as_ref().map_or(true, |(_, b, _)| val_loss.total < *b) {
            best = Some((epoch, val_loss.total, params.clone()));
        }
        logs.push(EpochLog {
            epoch,
            train_loss: epoch_loss,
            val_loss,
            val_metrics,
        });
    }

    let (selected_epoch, params) = match best {
        Some((e, _, p)) => (e, p),
        None => (0, params),
    };
    let mut metrics = BTreeMap::new();
    metrics.insert("train".to_string(), evaluate(&params, cfg.modality, train_set, bands)?.0);
    metrics.insert("val".to_string(), evaluate(&params, cfg.modality, val_set, bands)?.0);
    let report = TrainReport {
        run: run_label(cfg.modality, cfg.task_mask),
        modality: cfg.modality,
        tasks: cfg.task_mask.to_string(),
        param_count: params.len(),
        epochs: logs,
        selected_epoch,
        metrics,
    };
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn offset(x: &[f64], d: f64) -> Vec<f64> {
        x.iter().map(|v| v + d).collect()
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let g = vec![0.3, -1.0, 2.0];
        let (t, up) = joint_loss(&g, &g, &g, &g, 96.0, 96.0, 0.002, TaskMask::ALL).unwrap();
        assert_eq!(t.total, 0.0);
        assert!(up.bvp.iter().chain(&up.rr).all(|v| *v == 0.0) && up.spo2 == 0.0);
    }

    #[test]
    fn displayed_formula_substitution() {
        let gt = vec![0.0; 10];
        let (t, _) = joint_loss(
            &offset(&gt, 1.0),
            &gt,
            &offset(&gt, 2f64.sqrt()),
            &gt,
            97.0,
            95.0,
            0.002,
            TaskMask::ALL,
        )
        .unwrap();
        assert!((t.total - 3.04).abs() < 1e-9, "{}", t.total);
    }

    #[test]
    fn saturated_target_zeroes_spo2_term() {
        let g = vec![0.0; 4];
        let (t, up) = joint_loss(&g, &g, &g, &g, 60.0, 100.0, 0.002, TaskMask::ALL).unwrap();
        assert_eq!(t.spo2, 0.0);
        assert_eq!(up.spo2, 0.0);
    }

    #[test]
    fn target_above_hundred_rejected() {
        let g = vec![0.0; 4];
        assert!(matches!(
            joint_loss(&g, &g, &g, &g, 60.0, 100.5, 0.002, TaskMask::ALL),
            Err(TrainError::Spo2Target(_))
        ));
    }

    #[test]
    fn single_task_masks_isolate_terms() {
        let gt = vec![0.1, 0.5, -0.2, 0.9];
        let bh = offset(&gt, 0.7);
        let rh = offset(&gt, -1.3);
        let full = joint_loss(&bh, &gt, &rh, &gt, 92.0, 95.0, 0.002, TaskMask::ALL).unwrap().0;
        let only = |m: &str| joint_loss(&bh, &gt, &rh, &gt, 92.0, 95.0, 0.002, m.parse().unwrap()).unwrap().0.total;
        assert_eq!(only("hr"), full.bvp);
        assert_eq!(only("rr"), full.rr);
        assert_eq!(only("spo2"), full.spo2);
        assert!((only("hr") + only("rr") + only("spo2") - full.total).abs() < 1e-12);
    }

    #[test]
    fn partials_match_central_differences() {
        let gt = vec![0.1, 0.5, -0.2, 0.9, 1.4];
        let bh = vec![0.3, 0.2, 0.0, 1.0, -0.4];
        let rh = vec![-0.5, 0.8, 0.1, 0.2, 0.6];
        let (s_hat, s_gt) = (93.5, 96.0);
        let f = |b: &[f64], r: &[f64], s: f64| joint_loss(b, &gt, r, &gt, s, s_gt, 0.002, TaskMask::ALL).unwrap().0.total;
        let (_, up) = joint_loss(&bh, &gt, &rh, &gt, s_hat, s_gt, 0.002, TaskMask::ALL).unwrap();
        let eps = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-12);
        for i in 0..5 {
            let (mut p, mut m) = (bh.clone(), bh.clone());
            p[i] += eps;
            m[i] -= eps;
            let n = (f(&p, &rh, s_hat) - f(&m, &rh, s_hat)) / (2.0 * eps);
            assert!(rel(up.bvp[i], n) < 1e-8);
            let (mut p, mut m) = (rh.clone(), rh.clone());
            p[i] += eps;
            m[i] -= eps;
            let n = (f(&bh, &p, s_hat) - f(&bh, &m, s_hat)) / (2.0 * eps);
            assert!(rel(up.rr[i], n) < 1e-8);
        }
        let n = (f(&bh, &rh, s_hat + eps) - f(&bh, &rh, s_hat - eps)) / (2.0 * eps);
        assert!(rel(up.spo2, n) < 1e-8);
    }

    #[test]
    fn task_mask_parsing() {
        assert_eq!("hr,spo2,rr".parse::<TaskMask>().unwrap(), TaskMask::ALL);
        let m: TaskMask = "hr".parse().unwrap();
        assert!(m.bvp && !m.rr && !m.spo2 && !m.is_multi());
        assert!("".parse::<TaskMask>().is_err());
        assert!("hr,temp".parse::<TaskMask>().is_err());
        assert_eq!(TaskMask::ALL.to_string(), "hr,spo2,rr");
    }

    #[test]
    fn labels_follow_result_tables() {
        assert_eq!(run_label(Modality::Both, TaskMask::ALL), "Both(Multi Task)");
        assert_eq!(run_label(Modality::Ir, TaskMask::ALL), "IR(Multi Task)");
        assert_eq!(run_label(Modality::Both, "hr".parse().unwrap()), "Both(Single Task)");
    }

    #[test]
    fn csv_has_three_rows_two_metrics() {
        let m = TaskMetrics { mae: 1.0, mape: 2.0 };
        let t = MetricTable { hr: m, spo2: m, rr: m };
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 3));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: f64::NAN, ..Default::default() }.validate().is_err());
    }

    fn tiny_set(seeds: &[u64], hr: f64) -> WindowBatch {
        let cfg = ModelConfig::tiny();
        let mut out = WindowBatch::new(cfg.window_len);
        for &seed in seeds {
            let spec = crate::synth::SynthSpec {
                hr_bpm: hr,
                spo2_pct: 94.0,
                pulse_amp: 0.05,
                seed,
                frame_hw: cfg.in_hw,
                ..Default::default()
            };
            let s = crate::synth::generate(&spec, 6.0).unwrap();
            let mut b = crate::timeline::make_windows(&s.aligned, cfg.window_len, cfg.window_len, &format!("s{seed}")).unwrap();
            b.windows.truncate(2);
            out.extend(b).unwrap();
        }
        out
    }

    #[test]
    fn zero_learning_rate_keeps_init() {
        let set = tiny_set(&[1, 2], 75.0);
        let cfg = TrainConfig { lr: 0.0, epochs: 2, batch_size: 2, ..Default::default() };
        let (p, _) = train(&ModelConfig::tiny(), &cfg, &set, &set, Bands::default()).unwrap();
        assert_eq!(p, ModelParams::init(&ModelConfig::tiny(), cfg.seed).unwrap());
    }

    #[test]
    fn overfits_one_batch() {
        let set = tiny_set(&[3], 80.0);
        let cfg = TrainConfig { epochs: 200, batch_size: 16, ..Default::default() };
        let (_, rep) = train(&ModelConfig::tiny(), &cfg, &set, &set, Bands::default()).unwrap();
        let first = rep.epochs[0].train_loss.total;
        let last = rep.epochs.last().unwrap().train_loss.total;
        assert!(last <= 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn same_seed_same_report() {
        let set = tiny_set(&[4, 5], 90.0);
        let cfg = TrainConfig { epochs: 3, batch_size: 3, seed: 9, ..Default::default() };
        let a = train(&ModelConfig::tiny(), &cfg, &set, &set, Bands::default()).unwrap();
        let b = train(&ModelConfig::tiny(), &cfg, &set, &set, Bands::default()).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.to_json(), b.1.to_json());
        let c = train(&ModelConfig::tiny(), &TrainConfig { seed: 10, ..cfg }, &set, &set, Bands::default()).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn teacher_forced_scores_within_one_bin() {
        let cfg = ModelConfig::default();
        let hrs = [58.0, 74.0, 101.0];
        let mut set = WindowBatch::new(cfg.window_len);
        for (i, hr) in hrs.into_iter().enumerate() {
            let spec = crate::synth::SynthSpec { hr_bpm: hr, seed: i as u64, frame_hw: [8, 8], ..Default::default() };
            let s = crate::synth::generate(&spec, 12.0).unwrap();
            set.extend(crate::timeline::make_windows(&s.aligned, cfg.window_len, 75, &format!("s{i}")).unwrap())
                .unwrap();
        }
        let preds: Vec<Prediction> = set
            .windows
            .iter()
            .map(|w| Prediction { bvp: w.bvp.clone(), rr: w.rr.clone(), spo2: w.spo2_mean, gate: vec![] })
            .collect();
        let (m, est) = score_predictions(&preds, &set, Bands::default()).unwrap();
        let bin = 30.0 / sigproc::fft_len(cfg.window_len) as f64 * 60.0;
        assert_eq!(est.len(), 3);
        for (e, hr) in est.iter().zip(hrs) {
            assert!((e.hr_pred - hr).abs() <= bin, "{} vs {hr}, bin {bin}", e.hr_pred);
        }
        assert_eq!(m.hr.mae, 0.0);
        assert_eq!(m.spo2.mae, 0.0);
    }
}

