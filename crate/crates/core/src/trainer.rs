//! Mean-teacher training: the student learns from labeled crops and from
//! teacher pseudo-points on unlabeled crops; the teacher follows the student
//! as an exponential moving average.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::match_targets;
use crate::consist::{build_consistent_labels, PAConfig};
use crate::error::{Error, Result};
use crate::geom::PointSet;
use crate::loss::{combine_param_grads, labeled_loss, unlabeled_loss, LossWeights};
use crate::metric::{counting_report, localization_report, CountingReport, LocalizationReport};
use crate::net::{backward, forward, ModelParams, NetHyper};
use crate::synth::{flip_point, Dataset, Field, Scene};

pub const STATE_FORMAT_VERSION: u32 = 1;
const STATE_MAGIC: &[u8; 4] = b"CPTS";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the unlabeled loss; 0 trains on labeled data only.
    pub lambda: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub pa: PAConfig,
    /// Calibrate pseudo-point weights from teacher scores; otherwise all 1.
    pub use_iuc: bool,
    /// Also weight the unlabeled localization term by calibration weights.
    pub weight_loc_loss: bool,
    pub ema_decay: f64,
    pub optimizer: AdamConfig,
    pub crop_size: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub steps: usize,
    pub flip_prob: f64,
    pub seed: u64,
    /// Score weight `μ` in the matching cost.
    pub score_weight: f64,
    pub net: NetHyper,
    /// Holdout evaluation period in steps; 0 evaluates only at start and end.
    pub eval_every: usize,
    /// Distance thresholds for holdout localization metrics.
    pub eval_sigmas: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lambda1: 0.5,
            lambda2: 2e-4,
            pa: PAConfig::default(),
            use_iuc: true,
            weight_loc_loss: false,
            ema_decay: 0.99,
            optimizer: AdamConfig::default(),
            crop_size: 64,
            batch_labeled: 4,
            batch_unlabeled: 4,
            steps: 2000,
            flip_prob: 0.5,
            seed: 0,
            score_weight: 0.05,
            net: NetHyper::default(),
            eval_every: 500,
            eval_sigmas: vec![4.0, 8.0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.pa.validate()?;
        let finite_nonneg = |field: &'static str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(field, format!("{v} must be finite and >= 0")))
            }
        };
        finite_nonneg("lambda", self.lambda)?;
        finite_nonneg("lambda1", self.lambda1)?;
        finite_nonneg("lambda2", self.lambda2)?;
        finite_nonneg("score_weight", self.score_weight)?;
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("flip_prob", "must lie in [0, 1]"));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::config("optimizer.learning_rate", "must be positive"));
        }
        if !((0.0..1.0).contains(&o.adam_beta1) && (0.0..1.0).contains(&o.adam_beta2) && o.adam_eps > 0.0) {
            return Err(Error::config("optimizer", "betas must lie in [0, 1) and eps > 0"));
        }
        if self.crop_size < self.net.patch_size {
            return Err(Error::config("crop_size", "smaller than the patch"));
        }
        if self.batch_labeled == 0 {
            return Err(Error::config("batch_labeled", "must be positive"));
        }
        if self.eval_sigmas.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::config("eval_sigmas", "thresholds must be > 0"));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    pub fn uses_unlabeled(&self) -> bool {
        self.lambda > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn update(&mut self, theta: &mut [f64], grad: &[f64], cfg: &AdamConfig) {
        self.t += 1;
        let b1 = cfg.adam_beta1;
        let b2 = cfg.adam_beta2;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            theta[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
}

/// `teacher ← α·teacher + (1 − α)·student`, elementwise.
pub fn ema_update(teacher: &mut [f64], student: &[f64], decay: f64) {
    for (t, s) in teacher.iter_mut().zip(student) {
        *t = decay * *t + (1.0 - decay) * s;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub clamp_count: u64,
    pub pseudo_points: u64,
    pub aborted_steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub adam: AdamState,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub diagnostics: Diagnostics,
}

impl TrainerState {
    /// Fresh state: student drawn from `seed`, teacher a copy of it.
    pub fn new(hyper: NetHyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let student = ModelParams::init(hyper, &mut rng);
        Ok(Self {
            teacher: student.clone(),
            adam: AdamState::new(student.len()),
            student,
            step: 0,
            rng,
            diagnostics: Diagnostics::default(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(STATE_MAGIC);
        buf.extend_from_slice(&STATE_FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.student.encode());
        buf.extend_from_slice(&self.teacher.encode());
        for vec in [&self.adam.m, &self.adam.v] {
            buf.extend_from_slice(&(vec.len() as u64).to_le_bytes());
            for x in vec.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf.extend_from_slice(&self.adam.t.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.rng.get_seed());
        buf.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        buf.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        let d = &self.diagnostics;
        for c in [d.clamp_count, d.pseudo_points, d.aborted_steps] {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, reason: &str| Error::Format {
            what: "trainer checkpoint",
            record: 0,
            offset,
            reason: reason.into(),
        };
        if bytes.len() < 8 || &bytes[..4] != STATE_MAGIC {
            return Err(fail(0, "bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != STATE_FORMAT_VERSION {
            return Err(Error::Version {
                what: "trainer checkpoint",
                found: version,
                expected: STATE_FORMAT_VERSION,
            });
        }
        let mut pos = 8;
        let (student, used) = ModelParams::decode_prefix(&bytes[pos..])?;
        pos += used;
        let (teacher, used) = ModelParams::decode_prefix(&bytes[pos..])?;
        pos += used;
        if teacher.hyper != student.hyper {
            return Err(fail(pos, "teacher and student shapes differ"));
        }
        let mut take = |n: usize| -> Result<&[u8]> {
            if bytes.len() - pos < n {
                return Err(fail(pos, "truncated"));
            }
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        let mut moments = Vec::with_capacity(2);
        for _ in 0..2 {
            let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            if n != student.len() {
                return Err(fail(0, "optimizer moment length disagrees with parameters"));
            }
            let raw = take(8 * n)?;
            moments.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect::<Vec<_>>(),
            );
        }
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().unwrap());
        let t = u64_at(take(8)?);
        let step = u64_at(take(8)?);
        let seed: [u8; 32] = take(32)?.try_into().unwrap();
        let stream = u64_at(take(8)?);
        let word_pos = u128::from_le_bytes(take(16)?.try_into().unwrap());
        let clamp_count = u64_at(take(8)?);
        let pseudo_points = u64_at(take(8)?);
        let aborted_steps = u64_at(take(8)?);
        if pos != bytes.len() {
            return Err(fail(pos, "trailing bytes"));
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        let v = moments.pop().unwrap();
        let m = moments.pop().unwrap();
        Ok(Self {
            student,
            teacher,
            adam: AdamState { m, v, t },
            step,
            rng,
            diagnostics: Diagnostics {
                clamp_count,
                pseudo_points,
                aborted_steps,
            },
        })
    }
}

pub fn save_checkpoint(state: &TrainerState, path: &Path) -> Result<()> {
    fs::write(path, state.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainerState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TrainerState::decode(&bytes)
}

/// Summary of one optimisation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub total: f64,
    pub labeled: f64,
    /// Absent when the step trained on labeled data only.
    pub unlabeled: Option<f64>,
    pub pseudo_points: usize,
    pub clamps: usize,
}

/// A labeled training view: cropped field and the annotations inside it.
fn labeled_view(scene: &Scene, crop: usize, flip_prob: f64, rng: &mut ChaCha8Rng) -> (Field, PointSet) {
    let (top, left) = crop_origin(&scene.field, crop, rng);
    let field = scene.field.crop(top, left, crop, crop);
    let gt = scene.gt_points.as_ref().expect("labeled scenes carry points");
    let mut pts: PointSet = gt
        .iter()
        .filter(|p| p.x >= left as f64 && p.x < (left + crop) as f64 && p.y >= top as f64 && p.y < (top + crop) as f64)
        .map(|p| crate::geom::Point2D::new(p.x - left as f64, p.y - top as f64))
        .collect();
    if rng.random_bool(flip_prob) {
        pts = pts.iter().map(|&p| flip_point(p, crop)).collect();
        (field.flip_horizontal(), pts)
    } else {
        (field, pts)
    }
}

fn crop_origin(field: &Field, crop: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let top = if field.height > crop {
        rng.random_range(0..=field.height - crop)
    } else {
        0
    };
    let left = if field.width > crop {
        rng.random_range(0..=field.width - crop)
    } else {
        0
    };
    (top, left)
}

/// One student update plus the teacher EMA update.
///
/// On any error (including a non-finite loss) `state` is left untouched.
pub fn train_step(state: &mut TrainerState, labeled: &[&Scene], unlabeled: &[&Scene], cfg: &TrainConfig) -> Result<StepRecord> {
    if labeled.is_empty() {
        return Err(Error::Contract("labeled batch is empty".into()));
    }
    if labeled.iter().any(|s| s.labels().is_none()) {
        return Err(Error::Contract("labeled batch contains a scene without annotations".into()));
    }
    let mut rng = state.rng.clone();
    let weights = cfg.loss_weights();
    let n_params = state.student.len();
    let mut clamps = 0usize;

    let mut grad_l = vec![0.0; n_params];
    let mut loss_l = 0.0;
    let scale_l = 1.0 / labeled.len() as f64;
    for scene in labeled {
        let (field, gt) = labeled_view(scene, cfg.crop_size, cfg.flip_prob, &mut rng);
        let (props, cache) = forward(&state.student, &field)?;
        let matching = match_targets(&gt, &props, cfg.score_weight)?;
        let l = labeled_loss(&gt, &props, &matching, weights)?;
        clamps += l.clamp_count;
        loss_l += scale_l * l.total;
        let g = backward(&cache, &l.pos_grads, &l.score_grads)?;
        for (a, b) in grad_l.iter_mut().zip(&g) {
            *a += scale_l * b;
        }
    }

    let mut grad_u = vec![0.0; n_params];
    let mut loss_u = None;
    let mut n_pseudo = 0usize;
    if !unlabeled.is_empty() {
        let scale_u = 1.0 / unlabeled.len() as f64;
        let mut acc = 0.0;
        for scene in unlabeled {
            let (top, left) = crop_origin(&scene.field, cfg.crop_size, &mut rng);
            let clean = scene.field.crop(top, left, cfg.crop_size, cfg.crop_size);
            let (teacher_props, _) = forward(&state.teacher, &clean)?;
            let mut pseudo = build_consistent_labels(&teacher_props, &cfg.pa)?;
            if !cfg.use_iuc {
                pseudo = pseudo.with_unit_weights();
            }
            n_pseudo += pseudo.len();
            let (view, pseudo) = if rng.random_bool(cfg.flip_prob) {
                (clean.flip_horizontal(), pseudo.flipped(cfg.crop_size))
            } else {
                (clean, pseudo)
            };
            let (props, cache) = forward(&state.student, &view)?;
            let matching = match_targets(&pseudo.points, &props, cfg.score_weight)?;
            let l = unlabeled_loss(&pseudo, &props, &matching, weights, cfg.weight_loc_loss)?;
            clamps += l.clamp_count;
            acc += scale_u * l.total;
            let g = backward(&cache, &l.pos_grads, &l.score_grads)?;
            for (a, b) in grad_u.iter_mut().zip(&g) {
                *a += scale_u * b;
            }
        }
        loss_u = Some(acc);
    }

    let (total, grad) = combine_param_grads((loss_l, &grad_l), (loss_u.unwrap_or(0.0), &grad_u), cfg.lambda);
    if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "step {}: total {total}, labeled {loss_l}, unlabeled {loss_u:?}, {clamps} clamped scores",
            state.step
        )));
    }

    state.adam.update(&mut state.student.theta, &grad, &cfg.optimizer);
    ema_update(&mut state.teacher.theta, &state.student.theta, cfg.ema_decay);
    state.rng = rng;
    state.step += 1;
    state.diagnostics.clamp_count += clamps as u64;
    state.diagnostics.pseudo_points += n_pseudo as u64;
    Ok(StepRecord {
        step: state.step,
        total,
        labeled: loss_l,
        unlabeled: loss_u,
        pseudo_points: n_pseudo,
        clamps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub counting: CountingReport,
    pub localization: Vec<LocalizationReport>,
}

impl ModelEval {
    pub fn f1_at(&self, sigma: f64) -> Option<f64> {
        self.localization.iter().find(|r| r.threshold == sigma).map(|r| r.f1)
    }
}

/// Metrics of one model over scenes with ground truth. Localization counts
/// are pooled over all scenes before computing P/R/F.
pub fn evaluate(params: &ModelParams, scenes: &[Scene], sigmas: &[f64]) -> Result<ModelEval> {
    let mut per_sigma: Vec<Vec<LocalizationReport>> = vec![Vec::with_capacity(scenes.len()); sigmas.len()];
    let mut counts = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let gt = scene
            .gt_points
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("scene {} has no ground truth", scene.scene_id)))?;
        let (props, _) = forward(params, &scene.field)?;
        let preds = props.confident(0.5);
        counts.push((gt.len(), preds.len()));
        for (k, &sigma) in sigmas.iter().enumerate() {
            per_sigma[k].push(localization_report(gt, &preds, 0.5, sigma)?);
        }
    }
    Ok(ModelEval {
        counting: counting_report(&counts)?,
        localization: per_sigma
            .iter()
            .zip(sigmas)
            .map(|(rs, &s)| LocalizationReport::merge(rs, s))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: u64,
    pub student: ModelEval,
    pub teacher: ModelEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub config: TrainConfig,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_holdout: usize,
    pub start_step: u64,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRow>,
    pub diagnostics: Diagnostics,
    /// Set when the run stopped early.
    pub aborted: Option<String>,
}

impl RunReport {
    pub fn final_eval(&self) -> Option<&EvalRow> {
        self.evals.last()
    }
}

pub struct RunOutcome {
    pub report: RunReport,
    pub state: TrainerState,
    pub error: Option<Error>,
}

fn eval_row(state: &TrainerState, holdout: &[Scene], sigmas: &[f64]) -> Result<EvalRow> {
    Ok(EvalRow {
        step: state.step,
        student: evaluate(&state.student, holdout, sigmas)?,
        teacher: evaluate(&state.teacher, holdout, sigmas)?,
    })
}

/// Trains from a fresh state for `cfg.steps` steps.
pub fn run(dataset: &Dataset, cfg: &TrainConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let state = TrainerState::new(cfg.net, cfg.seed)?;
    run_from(state, dataset, cfg, cfg.steps as u64)
}

/// Continues `state` until its step counter reaches `until_step`.
///
/// Batches are drawn with replacement from the state's generator, so a run
/// resumed from a checkpoint follows the uninterrupted trajectory exactly.
pub fn run_from(mut state: TrainerState, dataset: &Dataset, cfg: &TrainConfig, until_step: u64) -> Result<RunOutcome> {
    cfg.validate()?;
    if dataset.labeled.is_empty() {
        return Err(Error::Contract("dataset has no labeled scenes".into()));
    }
    if state.student.hyper != cfg.net {
        return Err(Error::Contract("checkpoint network shape differs from config".into()));
    }
    let use_unlabeled = cfg.uses_unlabeled() && !dataset.unlabeled.is_empty() && cfg.batch_unlabeled > 0;
    let mut report = RunReport {
        format_version: 1,
        config: cfg.clone(),
        n_labeled: dataset.labeled.len(),
        n_unlabeled: dataset.unlabeled.len(),
        n_holdout: dataset.holdout.len(),
        start_step: state.step,
        steps: Vec::new(),
        evals: Vec::new(),
        diagnostics: state.diagnostics.clone(),
        aborted: None,
    };
    let holdout = &dataset.holdout;
    if !holdout.is_empty() {
        report.evals.push(eval_row(&state, holdout, &cfg.eval_sigmas)?);
    }
    let mut error = None;
    while state.step < until_step {
        let labeled: Vec<&Scene> = (0..cfg.batch_labeled)
            .map(|_| &dataset.labeled[state.rng.random_range(0..dataset.labeled.len())])
            .collect();
        let unlabeled: Vec<&Scene> = if use_unlabeled {
            (0..cfg.batch_unlabeled)
                .map(|_| &dataset.unlabeled[state.rng.random_range(0..dataset.unlabeled.len())])
                .collect()
        } else {
            Vec::new()
        };
        match train_step(&mut state, &labeled, &unlabeled, cfg) {
            Ok(rec) => report.steps.push(rec),
            Err(e) => {
                state.diagnostics.aborted_steps += 1;
                report.aborted = Some(e.to_string());
                error = Some(e);
                break;
            }
        }
        let at_period = cfg.eval_every > 0 && state.step.is_multiple_of(cfg.eval_every as u64);
        if !holdout.is_empty() && (at_period || state.step == until_step) {
            report.evals.push(eval_row(&state, holdout, &cfg.eval_sigmas)?);
        }
    }
    report.diagnostics = state.diagnostics.clone();
    Ok(RunOutcome { report, state, error })
}
