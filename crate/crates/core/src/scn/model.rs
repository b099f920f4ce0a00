use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{HeadKind, ModelConfig, ScnError};
use crate::rng::{derive_seed, seeded, tag};
use crate::scene::{CountingTriplet, Question, RegionProposal};
use crate::tensor::{ParamSet, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Normal with standard deviation `1/sqrt(rows)`.
    FanIn,
}

/// Parameter names and shapes for `config`, in registration order.
fn layout(c: &ModelConfig) -> Vec<(&'static str, [usize; 2], Init)> {
    let mut l = Vec::new();
    if c.head != HeadKind::ImageOnly {
        l.push(("q_embed", [c.vocab_size(), c.d_q], Init::Normal(0.5)));
    }
    if c.head != HeadKind::QuestionOnly {
        l.push(("w_feat", [c.feature_dim, c.d_v], Init::FanIn));
        l.push(("w_box", [6, c.d_v], Init::FanIn));
    }
    if c.head.uses_trunk() {
        l.extend([
            ("fuse1_u", [c.d_v, c.fusion_dim], Init::FanIn),
            ("fuse1_bu", [1, c.fusion_dim], Init::Zeros),
            ("fuse1_v", [c.d_q, c.fusion_dim], Init::FanIn),
            ("fuse1_bv", [1, c.fusion_dim], Init::Zeros),
            ("fuse1_o", [c.fusion_dim, c.model_dim], Init::FanIn),
            ("att_q", [c.model_dim, c.attention_dim], Init::FanIn),
            ("att_k", [c.model_dim, c.attention_dim], Init::FanIn),
            ("att_v", [c.model_dim, c.model_dim], Init::FanIn),
        ]);
    }
    if c.head == HeadKind::Regression {
        l.extend([
            ("fuse2_u", [c.model_dim, c.fusion2_dim], Init::FanIn),
            ("fuse2_bu", [1, c.fusion2_dim], Init::Zeros),
            ("fuse2_v", [c.d_q, c.fusion2_dim], Init::FanIn),
            ("fuse2_bv", [1, c.fusion2_dim], Init::Zeros),
            ("score_w", [c.fusion2_dim, 1], Init::FanIn),
            ("score_b", [1, 1], Init::Zeros),
        ]);
    } else {
        let input = match c.head {
            HeadKind::QuestionOnly => c.d_q,
            HeadKind::ImageOnly => c.d_v,
            _ => c.model_dim,
        };
        l.extend([
            ("cls_w", [input, c.classifier_dim], Init::FanIn),
            ("cls_b", [1, c.classifier_dim], Init::Zeros),
            ("cls_out_w", [c.classifier_dim, c.max_label + 1], Init::FanIn),
            ("cls_out_b", [1, c.max_label + 1], Init::Zeros),
        ]);
    }
    l
}

/// Trainable tensors of one model together with the config that shaped them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    config: ModelConfig,
    params: ParamSet,
}

impl ModelParameters {
    /// Random initialisation; weights are drawn with standard deviation
    /// `1/sqrt(fan_in)`, biases start at zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ScnError> {
        config.validate()?;
        let mut rng = seeded(derive_seed(seed, tag("init")));
        let mut params = ParamSet::new();
        for (name, [r, c], init) in layout(config) {
            let std = match init {
                Init::Zeros => 0.0,
                Init::Normal(s) => s,
                Init::FanIn => 1.0 / (r as f64).sqrt(),
            };
            let data = if std > 0.0 {
                let n = Normal::new(0.0, std).expect("positive std");
                (0..r * c).map(|_| n.sample(&mut rng)).collect()
            } else {
                vec![0.0; r * c]
            };
            params.push(name, Tensor::matrix(r, c, data)?);
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// The initialisation with uniform noise in `[-0.5, 0.5)` added to every
    /// entry, biases included, so that no parameter sits at a special value.
    /// Used for gradient checks.
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self, ScnError> {
        let mut m = Self::init(config, seed)?;
        let mut rng = seeded(derive_seed(seed, tag("jitter")));
        for id in m.params.ids().collect::<Vec<_>>() {
            for x in m.params.get_mut(id).data_mut() {
                *x += rng.random_range(-0.5..0.5);
            }
        }
        Ok(m)
    }

    /// All-zero parameters; a starting point for hand constructions.
    pub fn zeros(config: &ModelConfig) -> Result<Self, ScnError> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, [r, c], _) in layout(config) {
            params.push(name, Tensor::zeros(&[r, c]));
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// Wraps loaded tensors after checking names, shapes and finiteness
    /// against `config`.
    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Self, ScnError> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(ScnError::Config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (_, got_name, t)) in expected.iter().zip(params.iter()) {
            if *name != got_name || t.shape() != shape {
                return Err(ScnError::Config(format!(
                    "parameter {got_name} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(ScnError::Config(format!("parameter {name} is not finite")));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable access for optimisers. Shapes must not change.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.find(name).map(|id| self.params.get(id))
    }

    /// Replaces one tensor; the shape must match.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<(), ScnError> {
        let id = self
            .params
            .find(name)
            .ok_or_else(|| ScnError::Config(format!("no parameter named {name}")))?;
        let cur = self.params.get_mut(id);
        if cur.shape() != value.shape() {
            return Err(ScnError::Config(format!(
                "{name}: shape {:?} does not match {:?}",
                value.shape(),
                cur.shape()
            )));
        }
        *cur = value;
        Ok(())
    }

    /// Rejects triplets whose regions or question do not fit the config.
    pub fn check_input(&self, t: &CountingTriplet) -> Result<(), ScnError> {
        let c = &self.config;
        if t.regions.is_empty() {
            return Err(ScnError::Input("triplet has no regions".into()));
        }
        if let Some(r) = t.regions.iter().find(|r| r.feature.len() != c.feature_dim) {
            return Err(ScnError::Input(format!(
                "region feature length {} vs configured {}",
                r.feature.len(),
                c.feature_dim
            )));
        }
        let q = &t.question;
        if q.class >= c.num_classes || q.attribute.is_some_and(|a| a >= c.num_attributes) {
            return Err(ScnError::Input(format!(
                "question tokens outside the vocabulary: {}",
                q.text
            )));
        }
        Ok(())
    }
}

/// Parameters of one model registered on a tape.
pub struct Bound<'a> {
    params: &'a ParamSet,
    vars: &'a [Var],
    config: &'a ModelConfig,
}

impl<'a> Bound<'a> {
    /// `vars` must come from `model.params().register(..)`.
    pub fn new(model: &'a ModelParameters, vars: &'a [Var]) -> Self {
        assert_eq!(vars.len(), model.params.len(), "vars not registered from this model");
        Self {
            params: &model.params,
            vars,
            config: &model.config,
        }
    }

    fn v(&self, name: &str) -> Var {
        let id = self.params.find(name).unwrap_or_else(|| panic!("layout lacks {name}"));
        self.vars[id.0]
    }
}

fn question_tokens(q: &Question, c: &ModelConfig) -> Vec<usize> {
    let mut t = vec![q.mode.index(), 3 + q.class];
    if let Some(a) = q.attribute {
        t.push(3 + c.num_classes + a);
    }
    if let Some(p) = q.predicate {
        t.push(3 + c.num_classes + c.num_attributes + p.index());
    }
    t
}

fn g_question(tape: &mut Tape, b: &Bound, q: &Question) -> Result<Var, TensorError> {
    let mut onehot = vec![0.0; b.config.vocab_size()];
    for i in question_tokens(q, b.config) {
        onehot[i] += 1.0;
    }
    let x = tape.constant(Tensor::row(onehot));
    tape.matmul(x, b.v("q_embed"))
}

fn g_regions(tape: &mut Tape, b: &Bound, regions: &[RegionProposal]) -> Result<Var, TensorError> {
    let n = regions.len();
    let feats: Vec<f64> = regions.iter().flat_map(|r| r.feature.iter().copied()).collect();
    let boxes: Vec<f64> = regions.iter().flat_map(|r| r.bbox.coordinate_features()).collect();
    let f = tape.constant(Tensor::matrix(n, b.config.feature_dim, feats)?);
    let xy = tape.constant(Tensor::matrix(n, 6, boxes)?);
    let pf = tape.matmul(f, b.v("w_feat"))?;
    let pb = tape.matmul(xy, b.v("w_box"))?;
    tape.add(pf, pb)
}

/// `tanh(x U + bu) ⊙ tanh(q V + bv)`, the question row broadcast over rows.
fn g_bilinear(tape: &mut Tape, b: &Bound, x: Var, q: Var, prefix: &str) -> Result<Var, TensorError> {
    let hx = tape.affine(x, b.v(&format!("{prefix}_u")), b.v(&format!("{prefix}_bu")))?;
    let hx = tape.tanh(hx)?;
    let hq = tape.affine(q, b.v(&format!("{prefix}_v")), b.v(&format!("{prefix}_bv")))?;
    let hq = tape.tanh(hq)?;
    tape.mul(hx, hq)
}

fn g_fuse(tape: &mut Tape, b: &Bound, v: Var, q: Var) -> Result<Var, TensorError> {
    let h = g_bilinear(tape, b, v, q, "fuse1")?;
    tape.matmul(h, b.v("fuse1_o"))
}

struct AttentionVars {
    weights: Var,
    context: Var,
    output: Var,
}

fn g_attend(tape: &mut Tape, b: &Bound, m: Var) -> Result<AttentionVars, TensorError> {
    let q = tape.matmul(m, b.v("att_q"))?;
    let k = tape.matmul(m, b.v("att_k"))?;
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    let s = tape.scale(s, 1.0 / (b.config.attention_dim as f64).sqrt())?;
    let weights = tape.softmax_rows(s)?;
    let values = tape.matmul(m, b.v("att_v"))?;
    let context = tape.matmul(weights, values)?;
    let output = tape.add(m, context)?;
    Ok(AttentionVars {
        weights,
        context,
        output,
    })
}

/// Clamped per-region scores `[n,1]` and their sum.
fn g_score(tape: &mut Tape, b: &Bound, mp: Var, q: Var) -> Result<(Var, Var), TensorError> {
    let h = g_bilinear(tape, b, mp, q, "fuse2")?;
    let logits = tape.affine(h, b.v("score_w"), b.v("score_b"))?;
    let s = tape.sigmoid(logits)?;
    let eps = b.config.epsilon;
    let s = tape.clamp(s, eps, 1.0 - eps)?;
    let total = tape.sum(s)?;
    Ok((s, total))
}

/// Log-probabilities `[1, max_label+1]` from a `[1,d]` input row.
fn g_softmax_head(tape: &mut Tape, b: &Bound, x: Var) -> Result<Var, TensorError> {
    let h = tape.affine(x, b.v("cls_w"), b.v("cls_b"))?;
    let h = tape.tanh(h)?;
    let logits = tape.affine(h, b.v("cls_out_w"), b.v("cls_out_b"))?;
    tape.log_softmax_rows(logits)
}

fn g_mean_rows(tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
    let n = tape.value(x).shape()[0];
    let s = tape.sum_rows(x)?;
    tape.scale(s, 1.0 / n as f64)
}

struct Nodes {
    regions: Option<Var>,
    question: Option<Var>,
    fused: Option<Var>,
    attention: Option<AttentionVars>,
    scores: Option<(Var, Var)>,
    log_probs: Option<Var>,
}

fn g_forward(tape: &mut Tape, b: &Bound, t: &CountingTriplet) -> Result<Nodes, TensorError> {
    let head = b.config.head;
    let question = match head {
        HeadKind::ImageOnly => None,
        _ => Some(g_question(tape, b, &t.question)?),
    };
    let regions = match head {
        HeadKind::QuestionOnly => None,
        _ => Some(g_regions(tape, b, &t.regions)?),
    };
    let mut nodes = Nodes {
        regions,
        question,
        fused: None,
        attention: None,
        scores: None,
        log_probs: None,
    };
    match head {
        HeadKind::QuestionOnly => {
            nodes.log_probs = Some(g_softmax_head(tape, b, question.expect("question head"))?);
        }
        HeadKind::ImageOnly => {
            let pooled = g_mean_rows(tape, regions.expect("image head"))?;
            nodes.log_probs = Some(g_softmax_head(tape, b, pooled)?);
        }
        HeadKind::Regression | HeadKind::Classification => {
            let (v, q) = (regions.expect("trunk"), question.expect("trunk"));
            let m = g_fuse(tape, b, v, q)?;
            let att = g_attend(tape, b, m)?;
            if head == HeadKind::Regression {
                nodes.scores = Some(g_score(tape, b, att.output, q)?);
            } else {
                let pooled = g_mean_rows(tape, att.output)?;
                nodes.log_probs = Some(g_softmax_head(tape, b, pooled)?);
            }
            nodes.fused = Some(m);
            nodes.attention = Some(att);
        }
    }
    Ok(nodes)
}

/// Scalar loss nodes of one triplet.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    /// `(ĉ - c)²`; absent for softmax heads.
    pub mse: Option<Var>,
    /// Mean binary entropy of the region scores; absent for softmax heads.
    pub entropy: Option<Var>,
}

fn g_loss(tape: &mut Tape, b: &Bound, t: &CountingTriplet) -> Result<LossVars, TensorError> {
    let nodes = g_forward(tape, b, t)?;
    if let Some(lp) = nodes.log_probs {
        let k = b.config.max_label + 1;
        let mut pick = vec![0.0; k];
        pick[t.count.min(k - 1)] = 1.0;
        let pick = tape.constant(Tensor::row(pick));
        let sel = tape.mul(lp, pick)?;
        let ll = tape.sum(sel)?;
        let total = tape.scale(ll, -1.0)?;
        return Ok(LossVars {
            total,
            mse: None,
            entropy: None,
        });
    }
    let (s, total) = nodes.scores.expect("regression head");
    let label = tape.constant(Tensor::scalar(t.count as f64));
    let d = tape.sub(total, label)?;
    let mse = tape.mul(d, d)?;
    let entropy = g_entropy(tape, s)?;
    let weighted = tape.scale(entropy, b.config.lambda)?;
    let total = tape.add(mse, weighted)?;
    Ok(LossVars {
        total,
        mse: Some(mse),
        entropy: Some(entropy),
    })
}

/// `-(1/n) Σ [s ln s + (1-s) ln(1-s)]` over the `[n,1]` scores.
fn g_entropy(tape: &mut Tape, s: Var) -> Result<Var, TensorError> {
    let n = tape.value(s).len();
    let ls = tape.ln(s)?;
    let a = tape.mul(s, ls)?;
    let neg = tape.scale(s, -1.0)?;
    let one_minus = tape.offset(neg, 1.0)?;
    let lo = tape.ln(one_minus)?;
    let bterm = tape.mul(one_minus, lo)?;
    let both = tape.add(a, bterm)?;
    let sum = tape.sum(both)?;
    tape.scale(sum, -1.0 / n as f64)
}

/// Builds the training loss of `t` on `tape`. The head and λ come from the
/// model config.
pub fn triplet_loss(
    tape: &mut Tape,
    bound: &Bound,
    model: &ModelParameters,
    t: &CountingTriplet,
) -> Result<LossVars, ScnError> {
    model.check_input(t)?;
    if model.config.head.is_softmax() && t.count > model.config.max_label {
        return Err(ScnError::Input(format!(
            "label {} exceeds max_label {}",
            t.count, model.config.max_label
        )));
    }
    Ok(g_loss(tape, bound, t)?)
}

fn with_tape<T>(
    model: &ModelParameters,
    f: impl FnOnce(&mut Tape, &Bound) -> Result<T, TensorError>,
) -> Result<T, ScnError> {
    let mut tape = Tape::new();
    let vars = model.params.register(&mut tape);
    let b = Bound::new(model, &vars);
    Ok(f(&mut tape, &b)?)
}

fn require_trunk(model: &ModelParameters, what: &str) -> Result<(), ScnError> {
    if !model.config.head.uses_trunk() {
        return Err(ScnError::Config(format!(
            "{what} needs a trunk head, model is {}",
            model.config.head.as_str()
        )));
    }
    Ok(())
}

fn require_shape(t: &Tensor, cols: usize, what: &str) -> Result<usize, ScnError> {
    match t.dims2() {
        Some((n, c)) if c == cols && n > 0 => Ok(n),
        _ => Err(ScnError::Input(format!(
            "{what}: shape {:?}, expected [n,{cols}]",
            t.shape()
        ))),
    }
}

/// Encoded regions `[n, d_v]` and question vector `[1, d_q]`.
pub fn encode_inputs(t: &CountingTriplet, model: &ModelParameters) -> Result<(Tensor, Tensor), ScnError> {
    model.check_input(t)?;
    if !model.config.head.uses_trunk() {
        return Err(ScnError::Config("encode_inputs needs both encoders".into()));
    }
    with_tape(model, |tape, b| {
        let v = g_regions(tape, b, &t.regions)?;
        let q = g_question(tape, b, &t.question)?;
        Ok((tape.value(v).clone(), tape.value(q).clone()))
    })
}

/// First fusion of every region row with the question row.
pub fn fuse(regions: &Tensor, question: &Tensor, model: &ModelParameters) -> Result<Tensor, ScnError> {
    require_trunk(model, "fuse")?;
    require_shape(regions, model.config.d_v, "regions")?;
    if require_shape(question, model.config.d_q, "question")? != 1 {
        return Err(ScnError::Input("question must be a single row".into()));
    }
    with_tape(model, |tape, b| {
        let v = tape.constant(regions.clone());
        let q = tape.constant(question.clone());
        let m = g_fuse(tape, b, v, q)?;
        Ok(tape.value(m).clone())
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    /// Row-stochastic `[n,n]`.
    pub weights: Tensor,
    /// `r_i`.
    pub context: Tensor,
    /// `m'_i = m_i + r_i`.
    pub output: Tensor,
}

pub fn self_attend(fused: &Tensor, model: &ModelParameters) -> Result<Attention, ScnError> {
    require_trunk(model, "self_attend")?;
    require_shape(fused, model.config.model_dim, "fused")?;
    with_tape(model, |tape, b| {
        let m = tape.constant(fused.clone());
        let a = g_attend(tape, b, m)?;
        Ok(Attention {
            weights: tape.value(a.weights).clone(),
            context: tape.value(a.context).clone(),
            output: tape.value(a.output).clone(),
        })
    })
}

/// Per-region scores, their sum and the rounded count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScoreSet {
    pub scores: Vec<f64>,
    pub total: f64,
    pub label: usize,
}

impl RegionScoreSet {
    fn from_parts(scores: Vec<f64>, total: f64) -> Self {
        Self {
            label: round_count(total),
            scores,
            total,
        }
    }
}

/// Nearest non-negative integer, halves rounded away from zero.
pub fn round_count(x: f64) -> usize {
    x.max(0.0).round() as usize
}

pub fn score_regions(
    contextual: &Tensor,
    question: &Tensor,
    model: &ModelParameters,
) -> Result<RegionScoreSet, ScnError> {
    if model.config.head != HeadKind::Regression {
        return Err(ScnError::Config("score_regions needs the regression head".into()));
    }
    require_shape(contextual, model.config.model_dim, "contextual")?;
    require_shape(question, model.config.d_q, "question")?;
    with_tape(model, |tape, b| {
        let mp = tape.constant(contextual.clone());
        let q = tape.constant(question.clone());
        let (s, total) = g_score(tape, b, mp, q)?;
        Ok(RegionScoreSet::from_parts(
            tape.value(s).data().to_vec(),
            tape.value(total).item(),
        ))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub entropy: f64,
    pub total: f64,
    pub lambda: f64,
}

/// `L = (ĉ - c)² + λ L_H` for one instance, evaluated directly from scores.
pub fn loss(scores: &RegionScoreSet, label: usize, config: &ModelConfig) -> Result<LossBreakdown, ScnError> {
    let eps = config.epsilon;
    if scores.scores.is_empty() {
        return Err(ScnError::Input("no region scores".into()));
    }
    if let Some(&s) = scores.scores.iter().find(|&&s| !(s >= eps && s <= 1.0 - eps)) {
        return Err(ScnError::ClampViolation(s));
    }
    let mse = (scores.total - label as f64).powi(2);
    let n = scores.scores.len() as f64;
    let entropy = -scores
        .scores
        .iter()
        .map(|&s| s * s.ln() + (1.0 - s) * (1.0 - s).ln())
        .sum::<f64>()
        / n;
    Ok(LossBreakdown {
        mse,
        entropy,
        total: mse + config.lambda * entropy,
        lambda: config.lambda,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Fractional count `ĉ` for the regression head, the label otherwise.
    pub count: f64,
    pub label: usize,
    /// Region scores (regression head only).
    pub scores: Option<RegionScoreSet>,
    /// Label probabilities (softmax heads only).
    pub probabilities: Option<Vec<f64>>,
}

pub fn predict(t: &CountingTriplet, model: &ModelParameters) -> Result<Prediction, ScnError> {
    model.check_input(t)?;
    with_tape(model, |tape, b| {
        let nodes = g_forward(tape, b, t)?;
        if let Some((s, total)) = nodes.scores {
            let set = RegionScoreSet::from_parts(tape.value(s).data().to_vec(), tape.value(total).item());
            return Ok(Prediction {
                count: set.total,
                label: set.label,
                scores: Some(set),
                probabilities: None,
            });
        }
        let lp = tape.value(nodes.log_probs.expect("softmax head")).data();
        let mut best = 0;
        for (k, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = k;
            }
        }
        Ok(Prediction {
            count: best as f64,
            label: best,
            scores: None,
            probabilities: Some(lp.iter().map(|v| v.exp()).collect()),
        })
    })
}

/// Every intermediate of one regression-head forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub encoded: Tensor,
    pub question: Tensor,
    pub fused: Tensor,
    pub attention: Tensor,
    pub context: Tensor,
    pub contextual: Tensor,
    pub scores: RegionScoreSet,
}

pub fn forward_trace(t: &CountingTriplet, model: &ModelParameters) -> Result<ForwardTrace, ScnError> {
    model.check_input(t)?;
    if model.config.head != HeadKind::Regression {
        return Err(ScnError::Config("forward_trace needs the regression head".into()));
    }
    with_tape(model, |tape, b| {
        let n = g_forward(tape, b, t)?;
        let att = n.attention.expect("trunk");
        let (s, total) = n.scores.expect("regression");
        let val = |v: Var| tape.value(v).clone();
        Ok(ForwardTrace {
            encoded: val(n.regions.expect("trunk")),
            question: val(n.question.expect("trunk")),
            fused: val(n.fused.expect("trunk")),
            attention: val(att.weights),
            context: val(att.context),
            contextual: val(att.output),
            scores: RegionScoreSet::from_parts(tape.value(s).data().to_vec(), tape.value(total).item()),
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::scene::{QuestionMode, RegionProposal};
    use crate::tensor::grad_check;

    fn small_config(head: HeadKind, lambda: f64) -> ModelConfig {
        ModelConfig {
            feature_dim: 4,
            num_classes: 3,
            num_attributes: 2,
            d_v: 4,
            d_q: 4,
            fusion_dim: 5,
            model_dim: 4,
            attention_dim: 3,
            fusion2_dim: 5,
            classifier_dim: 4,
            max_label: 6,
            lambda,
            head,
            ..ModelConfig::default()
        }
    }

    fn random_triplet(n: usize, seed: u64, feature_dim: usize) -> CountingTriplet {
        let mut rng = seeded(seed);
        let regions = (0..n)
            .map(|_| {
                let x: f64 = rng.random_range(0.0..0.7);
                let y: f64 = rng.random_range(0.0..0.7);
                RegionProposal {
                    bbox: BBox::new(x, y, x + rng.random_range(0.05..0.3), y + rng.random_range(0.05..0.3)),
                    feature: (0..feature_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    source: None,
                }
            })
            .collect();
        CountingTriplet {
            image_id: 0,
            regions,
            question: Question::new(QuestionMode::ComplexAttribute, 1, Some(1), None),
            count: 2,
            gt_boxes: vec![],
            instances: vec![],
        }
    }

    fn check(head: HeadKind, lambda: f64, n: usize, seed: u64) -> f64 {
        let cfg = small_config(head, lambda);
        let model = ModelParameters::random(&cfg, seed).unwrap();
        let t = random_triplet(n, seed + 100, cfg.feature_dim);
        let report = grad_check(model.params(), 1e-5, |tape, vars| {
            let b = Bound::new(&model, vars);
            g_loss(tape, &b, &t).map(|l| l.total)
        })
        .unwrap();
        report.max_rel_error
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for n in [1, 5, 9] {
            for lambda in [0.0, 1.0] {
                let e = check(HeadKind::Regression, lambda, n, n as u64);
                assert!(e <= 1e-4, "n={n} lambda={lambda}: {e}");
            }
        }
        for head in [HeadKind::Classification, HeadKind::QuestionOnly, HeadKind::ImageOnly] {
            let e = check(head, 0.0, 5, 3);
            assert!(e <= 1e-4, "{head:?}: {e}");
        }
    }

    #[test]
    fn fusion_gradients_at_tight_tolerance() {
        let cfg = small_config(HeadKind::Regression, 1.0);
        let model = ModelParameters::init(&cfg, 4).unwrap();
        let t = random_triplet(4, 5, cfg.feature_dim);
        let (v, q) = encode_inputs(&t, &model).unwrap();
        let report = grad_check(model.params(), 1e-5, |tape, vars| {
            let b = Bound::new(&model, vars);
            let v = tape.constant(v.clone());
            let q = tape.constant(q.clone());
            let m = g_fuse(tape, &b, v, q)?;
            let w = tape.constant(Tensor::filled(&[cfg.model_dim, 1], 0.3));
            let y = tape.matmul(m, w)?;
            let y2 = tape.mul(y, y)?;
            tape.sum(y2)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{}", report.max_rel_error);
    }

    #[test]
    fn zero_projections_give_zero_regions() {
        let cfg = small_config(HeadKind::Regression, 1.0);
        let model = ModelParameters::zeros(&cfg).unwrap();
        let (v, _) = encode_inputs(&random_triplet(3, 1, 4), &model).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn coordinates_separate_identical_features() {
        let cfg = small_config(HeadKind::Regression, 1.0);
        let model = ModelParameters::init(&cfg, 2).unwrap();
        let mut t = random_triplet(2, 1, 4);
        t.regions[1].feature = t.regions[0].feature.clone();
        let (v, _) = encode_inputs(&t, &model).unwrap();
        assert_ne!(v.data()[..4], v.data()[4..]);
    }

    #[test]
    fn attribute_adds_its_embedding() {
        let cfg = small_config(HeadKind::Regression, 1.0);
        let model = ModelParameters::init(&cfg, 2).unwrap();
        let mut t = random_triplet(2, 1, 4);
        t.question = Question::new(QuestionMode::Simple, 2, None, None);
        let (_, q_simple) = encode_inputs(&t, &model).unwrap();
        t.question = Question::new(QuestionMode::ComplexAttribute, 2, Some(1), None);
        let (_, q_attr) = encode_inputs(&t, &model).unwrap();
        let table = model.get("q_embed").unwrap();
        let (simple_row, attr_row, mode_row) = (0, 3 + 3 + 1, 1);
        for j in 0..cfg.d_q {
            let expect =
                q_simple.data()[j] - table.get2(simple_row, j) + table.get2(mode_row, j) + table.get2(attr_row, j);
            assert!((q_attr.data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_question_projection_gates_fusion() {
        let cfg = small_config(HeadKind::Regression, 1.0);
        let mut model = ModelParameters::init(&cfg, 2).unwrap();
        model.set("fuse1_v", Tensor::zeros(&[cfg.d_q, cfg.fusion_dim])).unwrap();
        let (v, q) = encode_inputs(&random_triplet(3, 1, 4), &model).unwrap();
        let m = fuse(&v, &q, &model).unwrap();
        assert!(m.data().iter().all(|&x| x == 0.0));
        // Large inputs stay within the tanh envelope.
        let big = v.map(|x| x * 1e3);
        let o = model.get("fuse1_o").unwrap();
        let bound: f64 = (0..cfg.model_dim)
            .map(|j| (0..cfg.fusion_dim).map(|i| o.get2(i, j).abs()).sum::<f64>())
            .fold(0.0, f64::max);
        model
            .set("fuse1_v", Tensor::filled(&[cfg.d_q, cfg.fusion_dim], 0.2))
            .unwrap();
        let m = fuse(&big, &q, &model).unwrap();
        assert!(m.data().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn single_region_attends_to_itself() {
        let cfg = small_config(HeadKind::Regression, 1.0);
        let model = ModelParameters::init(&cfg, 2).unwrap();
        let m = Tensor::matrix(1, 4, vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let a = self_attend(&m, &model).unwrap();
        assert_eq!(a.weights.data(), &[1.0]);
        let wv = model.get("att_v").unwrap();
        for j in 0..4 {
            let value: f64 = (0..4).map(|i| m.data()[i] * wv.get2(i, j)).sum();
            assert!((a.output.data()[j] - (m.data()[j] + value)).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let cfg = small_config(HeadKind::Regression, 1.0);
        let mut rng = seeded(9);
        for case in 0..100 {
            let model = ModelParameters::init(&cfg, case).unwrap();
            let n = rng.random_range(1..12);
            let m = Tensor::matrix(n, 4, (0..n * 4).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
            let a = self_attend(&m, &model).unwrap();
            for r in 0..n {
                let s: f64 = (0..n).map(|c| a.weights.get2(r, c)).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_logits_give_near_zero_count() {
        let cfg = small_config(HeadKind::Regression, 1.0);
        let mut model = ModelParameters::init(&cfg, 2).unwrap();
        model.set("score_b", Tensor::matrix(1, 1, vec![-1e3]).unwrap()).unwrap();
        let p = predict(&random_triplet(5, 1, 4), &model).unwrap();
        let s = p.scores.unwrap();
        assert!((s.total - 5.0 * cfg.epsilon).abs() < 1e-12);
        assert_eq!(s.label, 0);
    }

    #[test]
    fn trace_sum_matches_reported_count() {
        let cfg = small_config(HeadKind::Regression, 1.0);
        let model = ModelParameters::init(&cfg, 7).unwrap();
        let tr = forward_trace(&random_triplet(8, 3, 4), &model).unwrap();
        let sum: f64 = tr.scores.scores.iter().sum();
        assert!((sum - tr.scores.total).abs() < 1e-6);
        assert_eq!(tr.attention.shape(), &[8, 8]);
        assert_eq!(tr.fused.shape(), &[8, 4]);
        // The pieces agree with the standalone operations.
        let m = fuse(&tr.encoded, &tr.question, &model).unwrap();
        assert_eq!(m, tr.fused);
        let a = self_attend(&m, &model).unwrap();
        assert_eq!(a.output, tr.contextual);
        assert_eq!(score_regions(&a.output, &tr.question, &model).unwrap(), tr.scores);
    }

    #[test]
    fn loss_reference_values() {
        let cfg = ModelConfig::default();
        let e = cfg.epsilon;
        let two = RegionScoreSet::from_parts(vec![1.0 - e, 1.0 - e, e, e, e], 2.0 - 2.0 * e + 3.0 * e);
        assert_eq!(two.label, 2);
        let l = loss(&two, 2, &cfg).unwrap();
        assert!(l.mse < 1e-10 && l.entropy < 1e-4);

        let half = RegionScoreSet::from_parts(vec![0.5], 0.5);
        let l = loss(&half, 0, &cfg).unwrap();
        assert!((l.entropy - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l.total - (0.25 + std::f64::consts::LN_2)).abs() < 1e-12);

        let frac = RegionScoreSet::from_parts(vec![0.9, 0.9, 0.91], 2.71);
        assert!((loss(&frac, 2, &cfg).unwrap().mse - 0.5041).abs() < 1e-12);
        assert_eq!(frac.label, 3);

        let bad = RegionScoreSet::from_parts(vec![1.0], 1.0);
        assert!(matches!(loss(&bad, 1, &cfg), Err(ScnError::ClampViolation(_))));
    }

    #[test]
    fn graph_loss_matches_direct_loss() {
        let cfg = small_config(HeadKind::Regression, 1.0);
        let model = ModelParameters::init(&cfg, 11).unwrap();
        let t = random_triplet(6, 2, 4);
        let mut tape = Tape::new();
        let vars = model.params().register(&mut tape);
        let b = Bound::new(&model, &vars);
        let lv = triplet_loss(&mut tape, &b, &model, &t).unwrap();
        let direct = loss(&predict(&t, &model).unwrap().scores.unwrap(), t.count, &cfg).unwrap();
        assert!((tape.value(lv.total).item() - direct.total).abs() < 1e-12);
        assert!((tape.value(lv.mse.unwrap()).item() - direct.mse).abs() < 1e-12);
        assert!((tape.value(lv.entropy.unwrap()).item() - direct.entropy).abs() < 1e-12);
    }

    #[test]
    fn rounding_contract() {
        assert_eq!(round_count(2.71), 3);
        assert_eq!(round_count(2.0), 2);
        assert_eq!(round_count(2.5), 3);
        assert_eq!(round_count(2.49), 2);
        assert_eq!(round_count(0.5), 1);
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let cfg = small_config(HeadKind::Regression, 1.0);
        let model = ModelParameters::init(&cfg, 2).unwrap();
        let mut t = random_triplet(2, 1, 5);
        assert!(matches!(predict(&t, &model), Err(ScnError::Input(_))));
        t = random_triplet(2, 1, 4);
        t.question = Question::new(QuestionMode::Simple, 7, None, None);
        assert!(matches!(predict(&t, &model), Err(ScnError::Input(_))));
        t.regions.clear();
        assert!(predict(&t, &model).is_err());
    }

    #[test]
    fn layout_round_trips_through_from_parts() {
        for head in [
            HeadKind::Regression,
            HeadKind::Classification,
            HeadKind::QuestionOnly,
            HeadKind::ImageOnly,
        ] {
            let cfg = small_config(head, 1.0);
            let m = ModelParameters::init(&cfg, 1).unwrap();
            let back = ModelParameters::from_parts(cfg.clone(), m.params().clone()).unwrap();
            assert_eq!(back, m);
            let other = small_config(HeadKind::Regression, 1.0);
            if head != HeadKind::Regression {
                assert!(ModelParameters::from_parts(other, m.params().clone()).is_err());
            }
        }
    }
}
