//! Desk-scale point-proposal network.
//!
//! Every anchor of a regular grid looks at the `P × P` pixel patch around
//! its centre, passes it through one tanh hidden layer and emits three
//! numbers: a position offset `(dx, dy)` and a classification logit.
//! Gradients are computed by hand in [`backward`].

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{AnchorGridMeta, Point2D, ProposalSet, ScoredProposal};
use crate::synth::Field;

pub const PARAMS_FORMAT_VERSION: u32 = 1;
const PARAMS_MAGIC: &[u8; 4] = b"CPNP";

/// Outputs per anchor: dx, dy, logit.
pub const N_OUT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetHyper {
    /// Odd patch side length in pixels.
    pub patch_size: usize,
    pub hidden_width: usize,
    pub stride: usize,
}

impl Default for NetHyper {
    fn default() -> Self {
        Self {
            patch_size: 9,
            hidden_width: 32,
            stride: 4,
        }
    }
}

impl NetHyper {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size.is_multiple_of(2) {
            return Err(Error::config("patch_size", "must be odd and positive"));
        }
        if self.hidden_width == 0 {
            return Err(Error::config("hidden_width", "must be positive"));
        }
        if self.stride == 0 {
            return Err(Error::config("stride", "must be positive"));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn param_count(&self) -> usize {
        let p2 = self.patch_len();
        let h = self.hidden_width;
        p2 * h + h + N_OUT * h + N_OUT
    }
}

/// Flat parameter vector.
///
/// Layout: `w1` (`H × P²`, row-major), `b1` (`H`), `w2` (`3 × H`), `b2` (`3`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hyper: NetHyper,
    pub theta: Vec<f64>,
}

/// Initial classification bias, a prior of roughly 5% positive anchors.
const INIT_LOGIT_BIAS: f64 = -2.944;

impl ModelParams {
    pub fn zeros(hyper: NetHyper) -> Self {
        Self {
            hyper,
            theta: vec![0.0; hyper.param_count()],
        }
    }

    pub fn from_theta(hyper: NetHyper, theta: Vec<f64>) -> Result<Self> {
        hyper.validate()?;
        if theta.len() != hyper.param_count() {
            return Err(Error::Shape(format!(
                "theta has {} entries, hyper needs {}",
                theta.len(),
                hyper.param_count()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(Self { hyper, theta })
    }

    /// Random initialisation: fan-in scaled hidden weights, small output
    /// weights, zero offsets and a negative logit bias.
    pub fn init(hyper: NetHyper, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(hyper);
        let w1 = Normal::new(0.0, 1.0 / hyper.patch_size as f64).unwrap();
        let w2 = Normal::new(0.0, 0.1 / (hyper.hidden_width as f64).sqrt()).unwrap();
        let (w1_range, w2_range, b2_range) = (p.w1_range(), p.w2_range(), p.b2_range());
        for v in &mut p.theta[w1_range] {
            *v = w1.sample(rng);
        }
        for v in &mut p.theta[w2_range] {
            *v = w2.sample(rng);
        }
        p.theta[b2_range.start + 2] = INIT_LOGIT_BIAS;
        p
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    fn w1_range(&self) -> std::ops::Range<usize> {
        0..self.hyper.hidden_width * self.hyper.patch_len()
    }

    fn b1_range(&self) -> std::ops::Range<usize> {
        let s = self.w1_range().end;
        s..s + self.hyper.hidden_width
    }

    fn w2_range(&self) -> std::ops::Range<usize> {
        let s = self.b1_range().end;
        s..s + N_OUT * self.hyper.hidden_width
    }

    fn b2_range(&self) -> std::ops::Range<usize> {
        let s = self.w2_range().end;
        s..s + N_OUT
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(28 + 8 * self.theta.len());
        buf.extend_from_slice(PARAMS_MAGIC);
        buf.extend_from_slice(&PARAMS_FORMAT_VERSION.to_le_bytes());
        for v in [self.hyper.patch_size, self.hyper.hidden_width, self.hyper.stride] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.theta.len() as u64).to_le_bytes());
        for v in &self.theta {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    /// Decodes one parameter block from the front of `bytes`, returning it
    /// and the number of bytes consumed.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        let fail = |offset: usize, reason: &str| Error::Format {
            what: "parameter checkpoint",
            record: 0,
            offset,
            reason: reason.into(),
        };
        if bytes.len() < 28 {
            return Err(fail(bytes.len(), "truncated header"));
        }
        if &bytes[..4] != PARAMS_MAGIC {
            return Err(fail(0, "bad magic"));
        }
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = word(4);
        if version != PARAMS_FORMAT_VERSION {
            return Err(Error::Version {
                what: "parameter checkpoint",
                found: version,
                expected: PARAMS_FORMAT_VERSION,
            });
        }
        let hyper = NetHyper {
            patch_size: word(8) as usize,
            hidden_width: word(12) as usize,
            stride: word(16) as usize,
        };
        hyper.validate()?;
        let n = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
        if n != hyper.param_count() {
            return Err(fail(20, "parameter count disagrees with header"));
        }
        let end = 28 + 8 * n;
        if bytes.len() < end {
            return Err(fail(bytes.len(), "truncated parameter data"));
        }
        let theta = bytes[28..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((Self::from_theta(hyper, theta)?, end))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (p, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Format {
                what: "parameter checkpoint",
                record: 0,
                offset: used,
                reason: "trailing bytes".into(),
            });
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Intermediate values of a forward pass, one row per anchor.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub hyper: NetHyper,
    pub n_anchors: usize,
    /// `n_anchors × P²`
    pub patches: Vec<f64>,
    /// `n_anchors × H`
    pub hidden_pre: Vec<f64>,
    /// `n_anchors × H`
    pub hidden: Vec<f64>,
    /// `n_anchors × 3`: dx, dy, logit
    pub outputs: Vec<f64>,
    pub scores: Vec<f64>,
    /// Snapshot of the parameters that produced this cache.
    theta: Vec<f64>,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Runs the proposal network over every anchor of `field`.
pub fn forward(params: &ModelParams, field: &Field) -> Result<(ProposalSet, ForwardCache)> {
    let hyper = params.hyper;
    let p = hyper.patch_size;
    if field.height < p || field.width < p {
        return Err(Error::Shape(format!(
            "field {}×{} smaller than patch {p}",
            field.height, field.width
        )));
    }
    if let Some(i) = field.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "field value at row {}, col {} is {}",
            i / field.width,
            i % field.width,
            field.data[i]
        )));
    }
    let grid = AnchorGridMeta::new(field.height, field.width, hyper.stride);
    let m = grid.len();
    let p2 = hyper.patch_len();
    let h = hyper.hidden_width;
    let half = (p / 2) as isize;

    let w1 = &params.theta[params.w1_range()];
    let b1 = &params.theta[params.b1_range()];
    let w2 = &params.theta[params.w2_range()];
    let b2 = &params.theta[params.b2_range()];

    let mut patches = vec![0.0; m * p2];
    let mut hidden_pre = vec![0.0; m * h];
    let mut hidden = vec![0.0; m * h];
    let mut outputs = vec![0.0; m * N_OUT];
    let mut scores = vec![0.0; m];
    let mut proposals = Vec::with_capacity(m);

    for j in 0..m {
        let anchor = grid.anchor_center(j);
        let cr = anchor.y.floor() as isize;
        let cc = anchor.x.floor() as isize;
        let patch = &mut patches[j * p2..(j + 1) * p2];
        for dr in 0..p {
            for dc in 0..p {
                patch[dr * p + dc] = field.get_padded(cr - half + dr as isize, cc - half + dc as isize) as f64;
            }
        }
        let pre = &mut hidden_pre[j * h..(j + 1) * h];
        let act = &mut hidden[j * h..(j + 1) * h];
        for k in 0..h {
            let row = &w1[k * p2..(k + 1) * p2];
            let z = b1[k] + row.iter().zip(patch.iter()).map(|(a, b)| a * b).sum::<f64>();
            pre[k] = z;
            act[k] = z.tanh();
        }
        let out = &mut outputs[j * N_OUT..(j + 1) * N_OUT];
        for o in 0..N_OUT {
            let row = &w2[o * h..(o + 1) * h];
            out[o] = b2[o] + row.iter().zip(act.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
        let score = sigmoid(out[2]);
        scores[j] = score;
        proposals.push(ScoredProposal {
            position: Point2D::new(anchor.x + out[0], anchor.y + out[1]),
            score,
            anchor_index: j,
        });
    }

    let cache = ForwardCache {
        hyper,
        n_anchors: m,
        patches,
        hidden_pre,
        hidden,
        outputs,
        scores,
        theta: params.theta.clone(),
    };
    Ok((
        ProposalSet {
            proposals,
            grid_meta: grid,
        },
        cache,
    ))
}

/// Reverse-mode gradient of a scalar whose partials with respect to every
/// proposal position and score are given.
pub fn backward(cache: &ForwardCache, grad_positions: &[[f64; 2]], grad_scores: &[f64]) -> Result<Vec<f64>> {
    let m = cache.n_anchors;
    if grad_positions.len() != m || grad_scores.len() != m {
        return Err(Error::Shape(format!(
            "cache has {m} anchors, got {} position and {} score gradients",
            grad_positions.len(),
            grad_scores.len()
        )));
    }
    let hyper = cache.hyper;
    let p2 = hyper.patch_len();
    let h = hyper.hidden_width;
    let layout = ModelParams::zeros(hyper);
    let (w1r, b1r, w2r, b2r) = (layout.w1_range(), layout.b1_range(), layout.w2_range(), layout.b2_range());
    let w2 = &cache.theta[w2r.clone()];

    let mut grad = vec![0.0; hyper.param_count()];
    let mut d_pre = vec![0.0; h];
    for j in 0..m {
        let c = cache.scores[j];
        let d_out = [grad_positions[j][0], grad_positions[j][1], grad_scores[j] * c * (1.0 - c)];
        if d_out.iter().all(|&d| d == 0.0) {
            continue;
        }
        let act = &cache.hidden[j * h..(j + 1) * h];
        for o in 0..N_OUT {
            grad[b2r.start + o] += d_out[o];
            let g = &mut grad[w2r.start + o * h..w2r.start + (o + 1) * h];
            for k in 0..h {
                g[k] += d_out[o] * act[k];
            }
        }
        for k in 0..h {
            let back: f64 = (0..N_OUT).map(|o| w2[o * h + k] * d_out[o]).sum();
            d_pre[k] = back * (1.0 - act[k] * act[k]);
        }
        let patch = &cache.patches[j * p2..(j + 1) * p2];
        for k in 0..h {
            let dk = d_pre[k];
            grad[b1r.start + k] += dk;
            if dk == 0.0 {
                continue;
            }
            let g = &mut grad[w1r.start + k * p2..w1r.start + (k + 1) * p2];
            for (gi, xi) in g.iter_mut().zip(patch) {
                *gi += dk * xi;
            }
        }
    }
    Ok(grad)
}

/// Predictions above `threshold`, the detections of a trained model.
pub fn detect(params: &ModelParams, field: &Field, threshold: f64) -> Result<Vec<ScoredProposal>> {
    Ok(forward(params, field)?.0.confident(threshold))
}
