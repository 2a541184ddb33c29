//! Feature matrices, item manifests, the synthetic generator and the
//! prototype split.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::DatasetError;
use crate::rng;

const MAGIC: &[u8; 4] = b"FEAT";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 4;

/// Name used for the reserved out-of-distribution class.
pub const OOD_CLASS_NAME: &str = "none_of_these";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemMeta {
    pub id: String,
    pub true_label: Option<usize>,
    pub is_prototype: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(rename = "classes")]
    pub class_names: Vec<String>,
    pub groups: Vec<Vec<usize>>,
    pub has_ood_class: bool,
    pub items: Vec<ItemMeta>,
    /// Free-form producer notes (e.g. feature preprocessing); not interpreted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

impl Manifest {
    /// Number of target classes, excluding the reserved OOD class.
    pub fn k(&self) -> usize {
        self.class_names.len()
    }

    /// Number of classes seen by inference and the learner.
    pub fn total_classes(&self) -> usize {
        self.k() + usize::from(self.has_ood_class)
    }

    pub fn ood_index(&self) -> Option<usize> {
        self.has_ood_class.then(|| self.k())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let k = self.k();
        if k < 2 {
            return Err(DatasetError::SchemaError(format!(
                "need at least 2 classes, found {k}"
            )));
        }
        let mut seen = vec![false; k];
        for group in &self.groups {
            for &c in group {
                if c >= k {
                    return Err(DatasetError::UnknownClassIndex { index: c, k });
                }
                if seen[c] {
                    return Err(DatasetError::GroupOverlap { class: c });
                }
                seen[c] = true;
            }
        }
        if !self.groups.is_empty() {
            if let Some(missing) = seen.iter().position(|s| !s) {
                return Err(DatasetError::SchemaError(format!(
                    "class {missing} is not covered by any group"
                )));
            }
        }
        let mut ids = HashSet::with_capacity(self.items.len());
        for item in &self.items {
            if !ids.insert(item.id.as_str()) {
                return Err(DatasetError::SchemaError(format!(
                    "duplicate item id `{}`",
                    item.id
                )));
            }
            match item.true_label {
                Some(label) if label < k => {}
                Some(label) if self.has_ood_class && label == k => {}
                Some(label) => return Err(DatasetError::UnknownClassIndex { index: label, k }),
                None if item.is_prototype => {
                    return Err(DatasetError::SchemaError(format!(
                        "prototype `{}` has no true label",
                        item.id
                    )))
                }
                None => {}
            }
        }
        Ok(())
    }

    /// Groups as a partition of the target classes; singletons when the
    /// manifest carries no group structure.
    pub fn group_partition(&self) -> Vec<Vec<usize>> {
        if self.groups.is_empty() {
            (0..self.k()).map(|c| vec![c]).collect()
        } else {
            self.groups.clone()
        }
    }
}

/// Row-major N×D feature matrix aligned with manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    n_items: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureStore {
    pub fn new(n_items: usize, dim: usize, data: Vec<f32>) -> Result<Self, DatasetError> {
        if data.len() != n_items * dim {
            return Err(DatasetError::InvalidParam(format!(
                "data length {} does not match {n_items}x{dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(DatasetError::NonFiniteValue {
                row: pos / dim.max(1),
                col: pos % dim.max(1),
            });
        }
        Ok(Self { n_items, dim, data })
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Appends rows; used by OOD injection.
    pub fn extend_rows(&mut self, rows: &[f32]) -> Result<(), DatasetError> {
        if rows.len() % self.dim != 0 {
            return Err(DatasetError::InvalidParam(
                "appended rows are not a multiple of the feature dimension".into(),
            ));
        }
        if let Some(pos) = rows.iter().position(|v| !v.is_finite()) {
            return Err(DatasetError::NonFiniteValue {
                row: self.n_items + pos / self.dim,
                col: pos % self.dim,
            });
        }
        self.n_items += rows.len() / self.dim;
        self.data.extend_from_slice(rows);
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.n_items as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(DatasetError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(DatasetError::TruncatedFile {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        if bytes[4] != VERSION {
            return Err(DatasetError::BadVersion(bytes[4]));
        }
        let n = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let payload = &bytes[HEADER_LEN..];
        let expected = n * d * 4;
        if payload.len() < expected {
            return Err(DatasetError::TruncatedFile {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(DatasetError::SchemaError(format!(
                "{} trailing bytes after feature payload",
                payload.len() - expected
            )));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(n, d, data)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_features(path: &Path) -> Result<FeatureStore, DatasetError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    FeatureStore::from_bytes(&bytes)
}

pub fn write_features(path: &Path, store: &FeatureStore) -> Result<(), DatasetError> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&store.to_bytes()).map_err(|e| io_err(path, e))
}

pub fn parse_manifest(text: &str) -> Result<Manifest, DatasetError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let manifest: Manifest = serde_path_to_error::deserialize(de)
        .map_err(|e| DatasetError::SchemaError(format!("{}: {}", e.path(), e.inner())))?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<Manifest, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_manifest(&text)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| DatasetError::SchemaError(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Parameters of the class-conditional Gaussian generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub k: usize,
    pub n_per_class: usize,
    pub dim: usize,
    /// Distance between class means (within a group when grouped).
    pub separation: f64,
    #[serde(default = "default_prototypes")]
    pub prototypes_per_class: usize,
    /// Optional partition of the classes into similar-looking groups.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<Vec<usize>>,
    /// Distance between group centres; only used with `groups`.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub group_separation: f64,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

fn default_prototypes() -> usize {
    10
}

/// Class means with pairwise distance `separation` (a scaled regular
/// simplex). When `dim < k` the simplex does not fit, so the means sit on a
/// regular polygon in the first two coordinates with adjacent distance
/// `separation`.
pub fn class_means(k: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    if dim >= k {
        let scale = separation / std::f64::consts::SQRT_2;
        (0..k)
            .map(|c| {
                let mut m = vec![0.0; dim];
                m[c] = scale;
                m
            })
            .collect()
    } else {
        let radius = separation / (2.0 * (std::f64::consts::PI / k as f64).sin());
        (0..k)
            .map(|c| {
                let angle = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
                let mut m = vec![0.0; dim];
                m[0] = radius * angle.cos();
                m[1] = radius * angle.sin();
                m
            })
            .collect()
    }
}

/// Class means for grouped classes: group centres form a simplex with
/// pairwise distance `group_separation`, and each class is offset from its
/// centre along its own axis so classes of one group are `separation`
/// apart. Classes in different groups end up
/// `sqrt(group_separation^2 + separation^2)` apart. Needs `dim >= G + k`.
pub fn grouped_class_means(
    k: usize,
    dim: usize,
    groups: &[Vec<usize>],
    separation: f64,
    group_separation: f64,
) -> Result<Vec<Vec<f64>>, DatasetError> {
    let g = groups.len();
    if dim < g + k {
        return Err(DatasetError::InvalidParam(format!(
            "grouped means need dim >= groups + classes ({})",
            g + k
        )));
    }
    let mut means = vec![vec![0.0; dim]; k];
    let mut seen = vec![false; k];
    for (gi, members) in groups.iter().enumerate() {
        for &c in members {
            if c >= k {
                return Err(DatasetError::UnknownClassIndex { index: c, k });
            }
            if seen[c] {
                return Err(DatasetError::GroupOverlap { class: c });
            }
            seen[c] = true;
            means[c][gi] = group_separation / std::f64::consts::SQRT_2;
            means[c][g + c] = separation / std::f64::consts::SQRT_2;
        }
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(DatasetError::InvalidParam(format!(
            "class {c} is in no group"
        )));
    }
    Ok(means)
}

/// Generates isotropic unit-variance Gaussian classes. Items are laid out
/// class-major; the first `prototypes_per_class` items of every class are
/// prototypes.
pub fn gen_synthetic(
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<(Manifest, FeatureStore), DatasetError> {
    let SyntheticSpec {
        k,
        n_per_class,
        dim,
        separation,
        prototypes_per_class,
        ref groups,
        group_separation,
    } = *spec;
    if k < 2 {
        return Err(DatasetError::InvalidParam("k must be at least 2".into()));
    }
    if dim < 2 {
        return Err(DatasetError::InvalidParam("dim must be at least 2".into()));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(DatasetError::InvalidParam(
            "separation must be finite and non-negative".into(),
        ));
    }
    if prototypes_per_class > n_per_class {
        return Err(DatasetError::InvalidParam(
            "prototypes_per_class exceeds n_per_class".into(),
        ));
    }
    let means = if groups.is_empty() {
        class_means(k, dim, separation)
    } else {
        grouped_class_means(k, dim, groups, separation, group_separation)?
    };
    let mut rng = rng::stream(seed, "dataset.synthetic");
    let mut items = Vec::with_capacity(k * n_per_class);
    let mut data = Vec::with_capacity(k * n_per_class * dim);
    for (c, mean) in means.iter().enumerate() {
        for j in 0..n_per_class {
            items.push(ItemMeta {
                id: format!("c{c:03}-{j:06}"),
                true_label: Some(c),
                is_prototype: j < prototypes_per_class,
            });
            for m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push((m + z) as f32);
            }
        }
    }
    let manifest = Manifest {
        class_names: (0..k).map(|c| format!("class_{c:03}")).collect(),
        groups: if groups.is_empty() {
            (0..k).map(|c| vec![c]).collect()
        } else {
            groups.clone()
        },
        has_ood_class: false,
        items,
        metadata: None,
    };
    let store = FeatureStore::new(k * n_per_class, dim, data)?;
    Ok((manifest, store))
}

/// Features for out-of-distribution items: unit-variance Gaussian clusters
/// centred at random directions of norm `separation`.
pub fn gen_ood_features(
    n: usize,
    dim: usize,
    separation: f64,
    n_clusters: usize,
    seed: u64,
) -> Vec<f32> {
    let mut rng = rng::stream(seed, "dataset.ood");
    let n_clusters = n_clusters.max(1);
    let centres: Vec<Vec<f64>> = (0..n_clusters)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm * separation).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let c = &centres[rng.gen_range(0..n_clusters)];
        for m in c {
            let z: f64 = StandardNormal.sample(&mut rng);
            out.push((m + z) as f32);
        }
    }
    out
}

/// Train/validation halves of the prototype set, as item indices.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Splits every target class's prototypes (sorted by id) into two halves,
/// the odd one going to train.
pub fn prototype_split(m: &Manifest) -> Result<PrototypeSplit, DatasetError> {
    let mut per_class: BTreeMap<usize, Vec<usize>> = (0..m.k()).map(|c| (c, vec![])).collect();
    for (i, item) in m.items.iter().enumerate() {
        if !item.is_prototype {
            continue;
        }
        if let Some(label) = item.true_label {
            per_class.entry(label).or_default().push(i);
        }
    }
    let mut split = PrototypeSplit {
        train: vec![],
        val: vec![],
    };
    for (class, mut members) in per_class {
        if members.len() < 2 {
            return Err(DatasetError::TooFewPrototypes {
                class,
                found: members.len(),
            });
        }
        members.sort_by(|&a, &b| m.items[a].id.cmp(&m.items[b].id));
        let n_train = members.len().div_ceil(2);
        split.train.extend_from_slice(&members[..n_train]);
        split.val.extend_from_slice(&members[n_train..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    Ok(split)
}
