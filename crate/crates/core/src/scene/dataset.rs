use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generate::{sample_question, sample_regions, sample_scene, Prototypes};
use super::{CountingTriplet, QuestionMode, SceneError, SceneSpec};
use crate::rng::{derive_seed, seeded};

pub const DATASET_FORMAT: &str = "countlab-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolInfo {
    pub name: String,
    pub seed: u64,
    pub start: usize,
    pub len: usize,
}

/// First line of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub spec_hash: String,
    pub spec: SceneSpec,
    pub pools: Vec<PoolInfo>,
}

/// Triplets addressed by their line index (0-based, header excluded).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub triplets: Vec<CountingTriplet>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&CountingTriplet> {
        self.triplets.get(id)
    }

    pub fn pool(&self, name: &str) -> Option<Range<usize>> {
        self.header
            .pools
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.start..p.start + p.len)
    }

    /// JSON-lines encoding: header line, then one triplet per line.
    pub fn to_jsonl(&self) -> Result<Vec<u8>, SceneError> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        for t in &self.triplets {
            serde_json::to_writer(&mut out, t)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(bytes: &[u8]) -> Result<Self, SceneError> {
        let text = std::str::from_utf8(bytes).map_err(|e| SceneError::Format(e.to_string()))?;
        let mut lines = text.lines();
        let header: DatasetHeader = match lines.next() {
            Some(l) => serde_json::from_str(l)?,
            None => return Err(SceneError::Format("missing header line".into())),
        };
        if header.format != DATASET_FORMAT {
            return Err(SceneError::Format(format!("unknown format {:?}", header.format)));
        }
        if header.version != DATASET_VERSION {
            return Err(SceneError::Format(format!("unsupported version {}", header.version)));
        }
        let triplets = lines
            .filter(|l| !l.is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<CountingTriplet>, _>>()?;
        let declared: usize = header.pools.iter().map(|p| p.len).sum();
        if declared != triplets.len() {
            return Err(SceneError::Format(format!(
                "header declares {declared} triplets, file has {}",
                triplets.len()
            )));
        }
        Ok(Self { header, triplets })
    }

    pub fn write(&self, path: &Path) -> Result<(), SceneError> {
        let bytes = self.to_jsonl()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, SceneError> {
        Self::from_jsonl(&fs::read(path)?)
    }

    /// SHA-256 of the JSON-lines encoding, streamed without materializing it.
    pub fn hash(&self) -> String {
        let mut w = HashWriter(Sha256::new());
        serde_json::to_writer(&mut w, &self.header).expect("header serializes");
        w.0.update(b"\n");
        for t in &self.triplets {
            serde_json::to_writer(&mut w, t).expect("triplet serializes");
            w.0.update(b"\n");
        }
        hex::encode(w.0.finalize())
    }

    /// Checks every triplet invariant; returns the first violation.
    pub fn validate(&self) -> Result<(), String> {
        let coverage = self.header.spec.coverage_iou;
        for (id, t) in self.triplets.iter().enumerate() {
            validate_triplet(t, coverage).map_err(|e| format!("triplet {id}: {e}"))?;
        }
        Ok(())
    }
}

struct HashWriter(Sha256);

impl Write for HashWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// Number of instances satisfying the question, recomputed from the annotation.
pub fn recount(t: &CountingTriplet) -> usize {
    t.instances.iter().filter(|i| t.question.matches(i)).count()
}

fn validate_triplet(t: &CountingTriplet, coverage: f64) -> Result<(), String> {
    if !t.question.is_well_formed() {
        return Err("question mode and fields disagree".into());
    }
    if recount(t) != t.count {
        return Err(format!("label {} but recount {}", t.count, recount(t)));
    }
    if t.gt_boxes.len() != t.count {
        return Err("gt box count differs from label".into());
    }
    for b in &t.gt_boxes {
        if !(b.is_proper() && b.within_canvas()) {
            return Err("gt box outside canvas".into());
        }
        if !t.regions.iter().any(|r| r.bbox.iou(b) >= coverage) {
            return Err("gt instance not covered by any proposal".into());
        }
    }
    for r in &t.regions {
        if !(r.bbox.is_proper() && r.bbox.within_canvas()) || r.feature.iter().any(|v| !v.is_finite()) {
            return Err("malformed region proposal".into());
        }
    }
    Ok(())
}

/// Per-label target counts summing to `n`: floors of `n * w_k` plus
/// largest-remainder top-up, ties to the lower label.
pub fn label_quotas(histogram: &[f64], n: usize) -> Result<Vec<usize>, SceneError> {
    if n == 0 {
        return Ok(vec![0; histogram.len()]);
    }
    let total: f64 = histogram.iter().sum();
    if !(total > 0.0) || histogram.iter().any(|w| !(*w >= 0.0)) {
        return Err(SceneError::InvalidSpec("label histogram has no mass".into()));
    }
    let exact: Vec<f64> = histogram.iter().map(|w| w / total * n as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut rest = n - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..exact.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for k in order {
        if rest == 0 {
            break;
        }
        if histogram[k] > 0.0 {
            quotas[k] += 1;
            rest -= 1;
        }
    }
    Ok(quotas)
}

fn check_reachable(spec: &SceneSpec, quotas: &[usize]) -> Result<(), SceneError> {
    for (label, &q) in quotas.iter().enumerate() {
        if q == 0 {
            continue;
        }
        let reachable = if label == 0 {
            spec.num_classes > 1 || spec.min_instances == 0 || spec.mode_mix[1] + spec.mode_mix[2] > 0.0
        } else {
            label <= spec.max_instances
        };
        if !reachable {
            return Err(SceneError::UnreachableLabel { label });
        }
    }
    Ok(())
}

fn generate_pool(
    spec: &SceneSpec,
    protos: &Prototypes,
    n: usize,
    seed: u64,
    pool_index: u64,
    out: &mut Vec<CountingTriplet>,
) -> Result<(), SceneError> {
    let mut quotas = label_quotas(&spec.label_histogram, n)?;
    check_reachable(spec, &quotas)?;
    let mut remaining = n;
    let mut rng = seeded(seed);
    let mut next_image = 0u64;
    let max_attempts = 5_000 * n as u64 + 100_000;
    let mix_total: f64 = spec.mode_mix.iter().sum();
    let mut attempts = 0u64;

    while remaining > 0 {
        attempts += 1;
        if attempts > max_attempts {
            let label = quotas.iter().position(|&q| q > 0).unwrap_or(0);
            return Err(SceneError::UnreachableLabel { label });
        }
        let scene_seed = rng.next_u64();
        let mut srng = seeded(scene_seed);
        let scene = sample_scene(spec, &mut srng);
        let mut accepted: Vec<(super::Question, usize, Vec<crate::geometry::BBox>)> = Vec::new();
        for _ in 0..spec.questions_per_image {
            let u = srng.random::<f64>() * mix_total;
            let mode = if u < spec.mode_mix[0] {
                QuestionMode::Simple
            } else if u < spec.mode_mix[0] + spec.mode_mix[1] {
                QuestionMode::ComplexAttribute
            } else {
                QuestionMode::ComplexPosition
            };
            let zero = srng.random::<f64>() < spec.zero_count_rate;
            let Ok((q, count, gt)) = sample_question(&scene, spec, mode, zero, &mut srng) else {
                continue;
            };
            if count >= quotas.len() || quotas[count] == 0 || accepted.iter().any(|a| a.0 == q) {
                continue;
            }
            quotas[count] -= 1;
            remaining -= 1;
            accepted.push((q, count, gt));
            if remaining == 0 {
                break;
            }
        }
        if accepted.is_empty() {
            continue;
        }
        let regions = sample_regions(&scene, spec, protos, &mut seeded(derive_seed(scene_seed, 1)));
        let image_id = (pool_index << 32) | next_image;
        next_image += 1;
        for (question, count, gt_boxes) in accepted {
            out.push(CountingTriplet {
                image_id,
                regions: regions.clone(),
                question,
                count,
                gt_boxes,
                instances: scene.instances.clone(),
            });
        }
    }
    // Interleave images so neighbouring lines are not all from one label sweep.
    let start = out.len() - n;
    let mut order_rng = seeded(derive_seed(seed, 2));
    out[start..].shuffle(&mut order_rng);
    Ok(())
}

/// `n` triplets whose label histogram follows the spec's target within ±1
/// per label, as a single pool named `"train"`.
pub fn generate_dataset(spec: &SceneSpec, n: usize, seed: u64) -> Result<Dataset, SceneError> {
    generate_pools(spec, &[("train", n, seed)])
}

/// Train and test pools from separate seeds, in one file. Image ids carry the
/// pool index in their high 32 bits, so the pools never share an image.
pub fn generate_corpus(spec: &SceneSpec, train: (usize, u64), test: (usize, u64)) -> Result<Dataset, SceneError> {
    generate_pools(spec, &[("train", train.0, train.1), ("test", test.0, test.1)])
}

fn generate_pools(spec: &SceneSpec, pools: &[(&str, usize, u64)]) -> Result<Dataset, SceneError> {
    spec.validate()?;
    let protos = Prototypes::from_spec(spec);
    let mut triplets = Vec::new();
    let mut infos = Vec::new();
    for (i, &(name, n, seed)) in pools.iter().enumerate() {
        let start = triplets.len();
        generate_pool(spec, &protos, n, seed, i as u64, &mut triplets)?;
        infos.push(PoolInfo {
            name: name.to_string(),
            seed,
            start,
            len: n,
        });
    }
    Ok(Dataset {
        header: DatasetHeader {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            spec_hash: spec.hash(),
            spec: spec.clone(),
            pools: infos,
        },
        triplets,
    })
}
