//! Synthetic counting scenes.
//!
//! A scene is a list of class/attribute-tagged instances on the unit canvas.
//! Region proposals stand in for detector output: each instance yields a few
//! jittered near-duplicate boxes whose features are the class prototype plus
//! the attribute prototype plus Gaussian noise, and background distractor
//! boxes carry a dedicated background prototype. Questions are templated
//! over class, attribute and canvas halves.

mod dataset;
mod generate;

pub use dataset::{
    generate_corpus, generate_dataset, label_quotas, recount, Dataset, DatasetHeader, PoolInfo, DATASET_FORMAT,
};
pub use generate::{generate_scene, make_question, propose_regions, Prototypes};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::BBox;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("question mode {0:?} cannot be satisfied on this scene")]
    Unsatisfiable(QuestionMode),
    #[error("label {label} is unreachable under the scene spec")]
    UnreachableLabel { label: usize },
    #[error("dataset format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub const CLASS_NAMES: [&str; 12] = [
    "cube", "sphere", "cylinder", "cone", "torus", "pyramid", "prism", "disk", "ring", "star", "capsule", "wedge",
];
pub const ATTRIBUTE_NAMES: [&str; 8] = ["red", "blue", "green", "yellow", "purple", "orange", "gray", "white"];

/// Generator parameters. The canvas is always the unit square.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub num_classes: usize,
    pub num_attributes: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Side lengths are drawn uniformly from this range (canvas fractions).
    pub size_range: (f64, f64),
    /// Proposals per instance, inclusive.
    pub duplicates: (usize, usize),
    /// Background proposals per scene, inclusive.
    pub distractors: (usize, usize),
    pub feature_dim: usize,
    pub noise_std: f64,
    /// Max per-edge jitter of a duplicate, as a fraction of the box side.
    pub jitter: f64,
    pub coverage_iou: f64,
    /// Probability that an instance takes the scene's dominant class.
    pub dominant_share: f64,
    pub prototype_seed: u64,
    /// Relative frequency of simple / attribute / position questions.
    pub mode_mix: [f64; 3],
    /// Probability of asking about an absent class.
    pub zero_count_rate: f64,
    pub questions_per_image: usize,
    /// Target weights per count label (index = label).
    pub label_histogram: Vec<f64>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        // Geometric decay over labels 0..=10, label 0 as common as label 1.
        let mut hist: Vec<f64> = (0..=10).map(|k: i32| 0.8f64.powi((k - 1).max(0))).collect();
        let total: f64 = hist.iter().sum();
        hist.iter_mut().for_each(|w| *w /= total);
        Self {
            num_classes: 6,
            num_attributes: 4,
            min_instances: 0,
            max_instances: 10,
            size_range: (0.08, 0.25),
            duplicates: (1, 2),
            distractors: (1, 3),
            feature_dim: 16,
            noise_std: 0.15,
            jitter: 0.1,
            coverage_iou: 0.5,
            dominant_share: 0.7,
            prototype_seed: 1,
            mode_mix: [0.6, 0.2, 0.2],
            zero_count_rate: 0.1,
            questions_per_image: 2,
            label_histogram: hist,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidSpec(m.to_string()));
        if self.num_classes == 0 || self.num_classes > CLASS_NAMES.len() {
            return bad("num_classes must be in 1..=12");
        }
        if self.num_attributes == 0 || self.num_attributes > ATTRIBUTE_NAMES.len() {
            return bad("num_attributes must be in 1..=8");
        }
        if self.min_instances > self.max_instances {
            return bad("min_instances exceeds max_instances");
        }
        let (lo, hi) = self.size_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("size_range must satisfy 0 < min <= max <= 1");
        }
        if self.duplicates.0 == 0 || self.duplicates.0 > self.duplicates.1 {
            return bad("duplicates range must satisfy 1 <= min <= max");
        }
        if self.distractors.0 > self.distractors.1 {
            return bad("distractors range is inverted");
        }
        // Class, attribute and background prototypes are mutually orthonormal.
        if self.feature_dim < self.num_classes + self.num_attributes + 1 {
            return bad("feature_dim must be at least classes + attributes + 1");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.coverage_iou) {
            return bad("coverage_iou must lie in [0,1]");
        }
        if !(0.0..0.2).contains(&self.jitter) {
            // Per-edge jitter below 0.2 keeps every duplicate at IoU >= 0.5.
            return bad("jitter must lie in [0, 0.2)");
        }
        if !(0.0..=1.0).contains(&self.dominant_share) || !(0.0..1.0).contains(&self.zero_count_rate) {
            return bad("dominant_share and zero_count_rate must be probabilities");
        }
        if self.mode_mix.iter().any(|w| *w < 0.0) || self.mode_mix.iter().sum::<f64>() <= 0.0 {
            return bad("mode_mix must be non-negative with positive mass");
        }
        if self.questions_per_image == 0 {
            return bad("questions_per_image must be positive");
        }
        if self.label_histogram.iter().any(|w| !(*w >= 0.0)) {
            return bad("label_histogram weights must be non-negative");
        }
        Ok(())
    }

    pub fn max_regions(&self) -> usize {
        self.max_instances * self.duplicates.1 + self.distractors.1
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub class: usize,
    pub attribute: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Scene {
    pub instances: Vec<Instance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionProposal {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub feature: Vec<f64>,
    /// Index of the instance this proposal was jittered from; `None` for distractors.
    pub source: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuestionMode {
    Simple,
    ComplexAttribute,
    ComplexPosition,
}

impl QuestionMode {
    pub const ALL: [QuestionMode; 3] = [
        QuestionMode::Simple,
        QuestionMode::ComplexAttribute,
        QuestionMode::ComplexPosition,
    ];

    pub fn index(self) -> usize {
        match self {
            QuestionMode::Simple => 0,
            QuestionMode::ComplexAttribute => 1,
            QuestionMode::ComplexPosition => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HalfPlane {
    LeftHalf,
    RightHalf,
    TopHalf,
    BottomHalf,
}

impl HalfPlane {
    pub const ALL: [HalfPlane; 4] = [
        HalfPlane::LeftHalf,
        HalfPlane::RightHalf,
        HalfPlane::TopHalf,
        HalfPlane::BottomHalf,
    ];

    pub fn index(self) -> usize {
        match self {
            HalfPlane::LeftHalf => 0,
            HalfPlane::RightHalf => 1,
            HalfPlane::TopHalf => 2,
            HalfPlane::BottomHalf => 3,
        }
    }

    /// Center-in-half test; the midline belongs to the right and bottom halves.
    pub fn contains(self, b: &BBox) -> bool {
        let (cx, cy) = b.center();
        match self {
            HalfPlane::LeftHalf => cx < 0.5,
            HalfPlane::RightHalf => cx >= 0.5,
            HalfPlane::TopHalf => cy < 0.5,
            HalfPlane::BottomHalf => cy >= 0.5,
        }
    }

    fn phrase(self) -> &'static str {
        match self {
            HalfPlane::LeftHalf => "left",
            HalfPlane::RightHalf => "right",
            HalfPlane::TopHalf => "top",
            HalfPlane::BottomHalf => "bottom",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub mode: QuestionMode,
    pub class: usize,
    pub attribute: Option<usize>,
    pub predicate: Option<HalfPlane>,
    pub text: String,
}

impl Question {
    pub fn new(mode: QuestionMode, class: usize, attribute: Option<usize>, predicate: Option<HalfPlane>) -> Self {
        let noun = format!("{}s", CLASS_NAMES[class % CLASS_NAMES.len()]);
        let text = match (mode, attribute, predicate) {
            (QuestionMode::ComplexAttribute, Some(a), _) => {
                format!("How many {} {}?", ATTRIBUTE_NAMES[a % ATTRIBUTE_NAMES.len()], noun)
            }
            (QuestionMode::ComplexPosition, _, Some(p)) => {
                format!("How many {} are in the {} half?", noun, p.phrase())
            }
            _ => format!("How many {}?", noun),
        };
        Self {
            mode,
            class,
            attribute,
            predicate,
            text,
        }
    }

    /// Attribute present iff attribute mode; predicate present iff position mode.
    pub fn is_well_formed(&self) -> bool {
        let attr_ok = self.attribute.is_some() == (self.mode == QuestionMode::ComplexAttribute);
        let pred_ok = self.predicate.is_some() == (self.mode == QuestionMode::ComplexPosition);
        attr_ok && pred_ok
    }

    pub fn matches(&self, inst: &Instance) -> bool {
        inst.class == self.class
            && self.attribute.is_none_or(|a| inst.attribute == a)
            && self.predicate.is_none_or(|p| p.contains(&inst.bbox))
    }

    /// Symbols standing in for the content words of the question.
    pub fn content_tokens(&self) -> Vec<String> {
        let mut t = vec![format!("class:{}", self.class)];
        if let Some(a) = self.attribute {
            t.push(format!("attr:{a}"));
        }
        if let Some(p) = self.predicate {
            t.push(format!("half:{}", p.phrase()));
        }
        t
    }
}

/// One image-question-count example. `gt_boxes` and `instances` are for
/// evaluation only and never reach the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountingTriplet {
    pub image_id: u64,
    pub regions: Vec<RegionProposal>,
    pub question: Question,
    pub count: usize,
    pub gt_boxes: Vec<BBox>,
    /// Scene annotation the label was counted from; evaluation-side only.
    pub instances: Vec<Instance>,
}

impl CountingTriplet {
    pub fn num_regions(&self) -> usize {
        self.regions.len()
    }
}
