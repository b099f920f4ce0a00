use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{HalfPlane, Instance, Question, QuestionMode, RegionProposal, Scene, SceneError, SceneSpec};
use crate::geometry::BBox;
use crate::rng::{seeded, Rng};

/// Orthonormal class, attribute and background prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub classes: Vec<Vec<f64>>,
    pub attributes: Vec<Vec<f64>>,
    pub background: Vec<f64>,
}

impl Prototypes {
    pub fn from_spec(spec: &SceneSpec) -> Self {
        let d = spec.feature_dim;
        let count = spec.num_classes + spec.num_attributes + 1;
        let mut rng = seeded(spec.prototype_seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
        while basis.len() < count {
            let mut v: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v);
            }
        }
        let background = basis.pop().expect("background prototype");
        let attributes = basis.split_off(spec.num_classes);
        Self {
            classes: basis,
            attributes,
            background,
        }
    }

    /// Nearest class prototype by inner product.
    pub fn nearest_class(&self, feature: &[f64]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (c, p) in self.classes.iter().enumerate() {
            let s: f64 = p.iter().zip(feature).map(|(a, b)| a * b).sum();
            if s > best.1 {
                best = (c, s);
            }
        }
        best.0
    }
}

/// Instance count ~ uniform on `[min_instances, max_instances]`. One class is
/// dominant per scene; each instance takes it with probability
/// `dominant_share`, otherwise a uniformly random class.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene, SceneError> {
    spec.validate()?;
    Ok(sample_scene(spec, &mut seeded(seed)))
}

pub(crate) fn sample_scene(spec: &SceneSpec, rng: &mut Rng) -> Scene {
    let n = rng.random_range(spec.min_instances..=spec.max_instances);
    let dominant = rng.random_range(0..spec.num_classes);
    let (lo, hi) = spec.size_range;
    let instances = (0..n)
        .map(|_| {
            let class = if rng.random::<f64>() < spec.dominant_share {
                dominant
            } else {
                rng.random_range(0..spec.num_classes)
            };
            let attribute = rng.random_range(0..spec.num_attributes);
            Instance {
                class,
                attribute,
                bbox: random_box(rng, lo, hi),
            }
        })
        .collect();
    Scene { instances }
}

fn random_box(rng: &mut Rng, lo: f64, hi: f64) -> BBox {
    let w = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let h = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let x1 = rng.random::<f64>() * (1.0 - w);
    let y1 = rng.random::<f64>() * (1.0 - h);
    BBox::new(x1, y1, (x1 + w).min(1.0), (y1 + h).min(1.0))
}

/// Region proposals for a scene, shuffled so list position carries nothing.
pub fn propose_regions(scene: &Scene, spec: &SceneSpec, seed: u64) -> Result<Vec<RegionProposal>, SceneError> {
    spec.validate()?;
    let protos = Prototypes::from_spec(spec);
    Ok(sample_regions(scene, spec, &protos, &mut seeded(seed)))
}

pub(crate) fn sample_regions(
    scene: &Scene,
    spec: &SceneSpec,
    protos: &Prototypes,
    rng: &mut Rng,
) -> Vec<RegionProposal> {
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite std");
    let feature = |rng: &mut Rng, parts: &[&[f64]]| -> Vec<f64> {
        (0..spec.feature_dim)
            .map(|j| {
                let base: f64 = parts.iter().map(|p| p[j]).sum();
                if spec.noise_std > 0.0 {
                    base + noise.sample(rng)
                } else {
                    base
                }
            })
            .collect()
    };

    let mut out = Vec::new();
    for (idx, inst) in scene.instances.iter().enumerate() {
        let k = rng.random_range(spec.duplicates.0..=spec.duplicates.1);
        for _ in 0..k {
            let bbox = jittered(rng, &inst.bbox, spec.jitter, spec.coverage_iou);
            let f = feature(rng, &[&protos.classes[inst.class], &protos.attributes[inst.attribute]]);
            out.push(RegionProposal {
                bbox,
                feature: f,
                source: Some(idx),
            });
        }
    }
    let n_bg = rng.random_range(spec.distractors.0..=spec.distractors.1);
    let (lo, hi) = spec.size_range;
    for _ in 0..n_bg {
        // Prefer background placements that barely touch any instance.
        let mut bbox = random_box(rng, lo, hi);
        for _ in 0..32 {
            let overlap = scene
                .instances
                .iter()
                .map(|i| i.bbox.intersection_area(&bbox))
                .fold(0.0, f64::max);
            if overlap <= 0.1 * bbox.area() {
                break;
            }
            bbox = random_box(rng, lo, hi);
        }
        let f = feature(rng, &[&protos.background]);
        out.push(RegionProposal {
            bbox,
            feature: f,
            source: None,
        });
    }
    out.shuffle(rng);
    out
}

fn jittered(rng: &mut Rng, b: &BBox, jitter: f64, min_iou: f64) -> BBox {
    let (w, h) = (b.width(), b.height());
    loop {
        let mut d = || rng.random_range(-1.0..=1.0) * jitter;
        let cand = BBox::new(b.x1 + d() * w, b.y1 + d() * h, b.x2 + d() * w, b.y2 + d() * h).clip_to_canvas();
        if cand.is_proper() && cand.iou(b) >= min_iou {
            return cand;
        }
    }
}

/// Builds a question of `mode` over `scene` and returns it with its count and
/// the boxes of the matching instances. With `zero_count`, the queried class
/// is drawn from the classes absent from the scene.
pub fn make_question(
    scene: &Scene,
    spec: &SceneSpec,
    mode: QuestionMode,
    zero_count: bool,
    seed: u64,
) -> Result<(Question, usize, Vec<BBox>), SceneError> {
    sample_question(scene, spec, mode, zero_count, &mut seeded(seed))
}

pub(crate) fn sample_question(
    scene: &Scene,
    spec: &SceneSpec,
    mode: QuestionMode,
    zero_count: bool,
    rng: &mut Rng,
) -> Result<(Question, usize, Vec<BBox>), SceneError> {
    let mut present = vec![false; spec.num_classes];
    for inst in &scene.instances {
        present[inst.class] = true;
    }
    let pool: Vec<usize> = (0..spec.num_classes).filter(|&c| present[c] != zero_count).collect();
    let Some(&class) = pool.choose(rng) else {
        return Err(SceneError::Unsatisfiable(mode));
    };
    let (attribute, predicate) = match mode {
        QuestionMode::Simple => (None, None),
        QuestionMode::ComplexAttribute => (Some(rng.random_range(0..spec.num_attributes)), None),
        QuestionMode::ComplexPosition => (None, HalfPlane::ALL.choose(rng).copied()),
    };
    let q = Question::new(mode, class, attribute, predicate);
    let gt: Vec<BBox> = scene
        .instances
        .iter()
        .filter(|i| q.matches(i))
        .map(|i| i.bbox)
        .collect();
    Ok((q, gt.len(), gt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(attribute: usize, x: f64) -> Instance {
        Instance {
            class: 0,
            attribute,
            bbox: BBox::new(x, 0.1, x + 0.1, 0.2),
        }
    }

    #[test]
    fn zero_max_instances_gives_empty_scene() {
        let spec = SceneSpec {
            max_instances: 0,
            ..SceneSpec::default()
        };
        assert!(generate_scene(&spec, 3).unwrap().instances.is_empty());
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::default();
        assert_eq!(generate_scene(&spec, 7).unwrap(), generate_scene(&spec, 7).unwrap());
    }

    #[test]
    fn oversized_boxes_rejected() {
        let spec = SceneSpec {
            size_range: (0.5, 1.5),
            ..SceneSpec::default()
        };
        assert!(matches!(generate_scene(&spec, 0), Err(SceneError::InvalidSpec(_))));
    }

    #[test]
    fn one_proposal_per_instance_in_identity_configuration() {
        let spec = SceneSpec {
            duplicates: (1, 1),
            distractors: (0, 0),
            min_instances: 4,
            ..SceneSpec::default()
        };
        let scene = generate_scene(&spec, 11).unwrap();
        let regions = propose_regions(&scene, &spec, 12).unwrap();
        assert_eq!(regions.len(), scene.instances.len());
        let mut sources: Vec<usize> = regions.iter().map(|r| r.source.unwrap()).collect();
        sources.sort();
        assert_eq!(sources, (0..scene.instances.len()).collect::<Vec<_>>());
    }

    #[test]
    fn two_instances_two_duplicates_three_distractors() {
        let spec = SceneSpec {
            duplicates: (2, 2),
            distractors: (3, 3),
            ..SceneSpec::default()
        };
        let scene = Scene {
            instances: vec![cube(0, 0.1), cube(1, 0.5)],
        };
        let regions = propose_regions(&scene, &spec, 5).unwrap();
        assert_eq!(regions.len(), 7);
        assert_eq!(regions.iter().filter(|r| r.source.is_none()).count(), 3);
    }

    #[test]
    fn counting_three_cubes() {
        let spec = SceneSpec::default();
        let scene = Scene {
            instances: vec![cube(0, 0.1), cube(1, 0.3), cube(2, 0.5)],
        };
        let (q, count, gt) = make_question(&scene, &spec, QuestionMode::Simple, false, 1).unwrap();
        assert_eq!(q.class, 0);
        assert_eq!(q.text, "How many cubes?");
        assert_eq!(count, 3);
        assert_eq!(gt.len(), 3);
    }

    #[test]
    fn attribute_filter_counts_red_cubes() {
        let spec = SceneSpec {
            num_attributes: 2,
            ..SceneSpec::default()
        };
        // attribute 0 = red, 1 = blue
        let scene = Scene {
            instances: vec![cube(0, 0.1), cube(0, 0.3), cube(1, 0.5)],
        };
        let q = Question::new(QuestionMode::ComplexAttribute, 0, Some(0), None);
        assert_eq!(q.text, "How many red cubes?");
        let brute = scene
            .instances
            .iter()
            .filter(|i| i.class == 0 && i.attribute == 0)
            .count();
        assert_eq!(brute, 2);
        assert_eq!(scene.instances.iter().filter(|i| q.matches(i)).count(), brute);
        // Sampled attribute questions agree with the brute-force filter too.
        for seed in 0..20 {
            let (q, count, _) = make_question(&scene, &spec, QuestionMode::ComplexAttribute, false, seed).unwrap();
            let a = q.attribute.unwrap();
            let expect = scene.instances.iter().filter(|i| i.attribute == a).count();
            assert_eq!(count, expect);
        }
    }

    #[test]
    fn zero_count_question_uses_absent_class() {
        let spec = SceneSpec::default();
        for seed in 0..30 {
            let scene = generate_scene(&spec, seed).unwrap();
            let (q, count, gt) = make_question(&scene, &spec, QuestionMode::Simple, true, seed).unwrap();
            assert_eq!(count, 0);
            assert!(gt.is_empty());
            assert!(scene.instances.iter().all(|i| i.class != q.class));
        }
    }

    #[test]
    fn zero_count_unsatisfiable_when_every_class_present() {
        let spec = SceneSpec {
            num_classes: 1,
            ..SceneSpec::default()
        };
        let scene = Scene {
            instances: vec![cube(0, 0.1)],
        };
        assert!(matches!(
            make_question(&scene, &spec, QuestionMode::Simple, true, 0),
            Err(SceneError::Unsatisfiable(QuestionMode::Simple))
        ));
        assert!(matches!(
            make_question(&Scene::default(), &spec, QuestionMode::Simple, false, 0),
            Err(SceneError::Unsatisfiable(_))
        ));
    }

    #[test]
    fn prototypes_are_orthonormal() {
        let p = Prototypes::from_spec(&SceneSpec::default());
        let all: Vec<&Vec<f64>> = p
            .classes
            .iter()
            .chain(&p.attributes)
            .chain(std::iter::once(&p.background))
            .collect();
        for (i, a) in all.iter().enumerate() {
            for (j, b) in all.iter().enumerate() {
                let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
    }
}
