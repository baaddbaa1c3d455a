//! Dataset ingestion, class-disjoint splits, candidate pools and the
//! synthetic task generator.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Role of a class in the class-disjoint split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Validation,
    Test,
}

impl Role {
    pub fn code(self) -> i64 {
        match self {
            Role::Train => 0,
            Role::Validation => 1,
            Role::Test => 2,
        }
    }

    pub fn from_code(code: i64) -> Option<Role> {
        match code {
            0 => Some(Role::Train),
            1 => Some(Role::Validation),
            2 => Some(Role::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestDims {
    n: usize,
    d: usize,
    a: usize,
    c: usize,
}

/// JSON manifest naming the matrix files of a dataset.
#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    features: String,
    attributes: String,
    labels: String,
    split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    class_descriptors: Option<String>,
    normalized: bool,
    dims: ManifestDims,
}

/// An attribute dataset with class-disjoint split roles.
///
/// Labels are 1-based class indices. The split assigns a role to every
/// class; test classes therefore contribute no training images by
/// construction, which is the defining ZSC constraint.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// N x d image feature matrix.
    pub features: Array2<f64>,
    /// N x a per-image attribute matrix.
    pub attributes: Array2<f64>,
    /// Per-image class label in 1..=C.
    pub labels: Vec<usize>,
    /// Per-class role, indexed by class-1.
    pub split: Vec<Role>,
    /// Optional explicit C x a class descriptors.
    pub class_descriptors: Option<Array2<f64>>,
    /// Whether features were standardized per dimension before saving.
    pub normalized: bool,
}

impl Dataset {
    pub fn num_images(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn attribute_dim(&self) -> usize {
        self.attributes.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.split.len()
    }

    pub fn role_of(&self, class: usize) -> Role {
        self.split[class - 1]
    }

    pub fn classes_with_role(&self, role: Role) -> Vec<usize> {
        (1..=self.num_classes())
            .filter(|&k| self.role_of(k) == role)
            .collect()
    }

    /// Indices of images whose class has the given role, in row order.
    pub fn images_with_role(&self, role: Role) -> Vec<usize> {
        (0..self.num_images())
            .filter(|&i| self.role_of(self.labels[i]) == role)
            .collect()
    }

    pub fn images_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.num_images())
            .filter(|&i| self.labels[i] == class)
            .collect()
    }

    /// Checks all structural invariants, reporting row/class context.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_images();
        let c = self.num_classes();
        if self.attributes.nrows() != n {
            return Err(Error::dim("attributes rows", n, self.attributes.nrows()));
        }
        if self.labels.len() != n {
            return Err(Error::dim("labels length", n, self.labels.len()));
        }
        for (i, &label) in self.labels.iter().enumerate() {
            if label == 0 || label > c {
                return Err(Error::InvalidConfig(format!(
                    "label {label} at row {i} outside 1..={c}"
                )));
            }
        }
        for (i, row) in self.features.outer_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "features".into(),
                    row: i,
                });
            }
        }
        for (i, row) in self.attributes.outer_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "attributes".into(),
                    row: i,
                });
            }
        }
        if let Some(desc) = &self.class_descriptors {
            if desc.nrows() != c {
                return Err(Error::dim("class_descriptors rows", c, desc.nrows()));
            }
            if desc.ncols() != self.attribute_dim() {
                return Err(Error::dim(
                    "class_descriptors cols",
                    self.attribute_dim(),
                    desc.ncols(),
                ));
            }
        }
        Ok(())
    }

    /// Loads a dataset from a JSON manifest; paths are resolved relative
    /// to the manifest's directory.
    pub fn load(manifest_path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(manifest_path)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: manifest_path.display().to_string(),
            source: e,
        })?;
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let resolve = |name: &str| -> PathBuf { dir.join(name) };

        let features = io::read_f64_matrix(&resolve(&manifest.features))?;
        let attributes = io::read_f64_matrix(&resolve(&manifest.attributes))?;
        let labels_raw = io::read_i64_matrix(&resolve(&manifest.labels))?;
        let split_raw = io::read_i64_matrix(&resolve(&manifest.split))?;
        let class_descriptors = manifest
            .class_descriptors
            .as_deref()
            .map(|p| io::read_f64_matrix(&resolve(p)))
            .transpose()?;

        let dims = &manifest.dims;
        if features.nrows() != dims.n || features.ncols() != dims.d {
            return Err(Error::dim(
                "features shape vs manifest dims",
                format!("{}x{}", dims.n, dims.d),
                format!("{}x{}", features.nrows(), features.ncols()),
            ));
        }
        if attributes.ncols() != dims.a {
            return Err(Error::dim("attribute dim vs manifest", dims.a, attributes.ncols()));
        }
        if labels_raw.ncols() != 1 || labels_raw.nrows() != dims.n {
            return Err(Error::dim(
                "labels shape",
                format!("{}x1", dims.n),
                format!("{}x{}", labels_raw.nrows(), labels_raw.ncols()),
            ));
        }
        let labels: Vec<usize> = labels_raw.column(0).iter().map(|&v| v as usize).collect();

        // Split file: one (class_id, role_code) row per class. A class
        // listed with more than one role is a train/test overlap.
        if split_raw.ncols() != 2 {
            return Err(Error::dim("split columns", 2, split_raw.ncols()));
        }
        let mut roles: BTreeMap<usize, Role> = BTreeMap::new();
        for row in split_raw.outer_iter() {
            let class = row[0] as usize;
            let role = Role::from_code(row[1]).ok_or_else(|| Error::InvalidConfig(format!(
                "unknown split role code {} for class {class}",
                row[1]
            )))?;
            if let Some(prev) = roles.insert(class, role) {
                if prev != role {
                    return Err(Error::SplitOverlap { class });
                }
            }
        }
        let c = dims.c;
        let mut split = Vec::with_capacity(c);
        for class in 1..=c {
            match roles.get(&class) {
                Some(role) => split.push(*role),
                None => {
                    return Err(Error::InvalidConfig(format!(
                        "class {class} missing from split file"
                    )))
                }
            }
        }

        let dataset = Dataset {
            features,
            attributes,
            labels,
            split,
            class_descriptors,
            normalized: manifest.normalized,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    /// Writes the dataset and its manifest into `dir`, returning the
    /// manifest path. Output is canonical: the same dataset always
    /// produces byte-identical files.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        self.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        io::write_f64_matrix(&dir.join("features.zmat"), &self.features)?;
        io::write_f64_matrix(&dir.join("attributes.zmat"), &self.attributes)?;
        let labels = Array2::from_shape_vec(
            (self.labels.len(), 1),
            self.labels.iter().map(|&v| v as i64).collect(),
        )
        .expect("labels shape");
        io::write_i64_matrix(&dir.join("labels.zmat"), &labels)?;
        let split_rows: Vec<i64> = (1..=self.num_classes())
            .flat_map(|k| [k as i64, self.role_of(k).code()])
            .collect();
        let split = Array2::from_shape_vec((self.num_classes(), 2), split_rows).expect("split shape");
        io::write_i64_matrix(&dir.join("split.zmat"), &split)?;
        let descriptors_name = if let Some(desc) = &self.class_descriptors {
            io::write_f64_matrix(&dir.join("descriptors.zmat"), desc)?;
            Some("descriptors.zmat".to_string())
        } else {
            None
        };
        let manifest = Manifest {
            features: "features.zmat".into(),
            attributes: "attributes.zmat".into(),
            labels: "labels.zmat".into(),
            split: "split.zmat".into(),
            class_descriptors: descriptors_name,
            normalized: self.normalized,
            dims: ManifestDims {
                n: self.num_images(),
                d: self.feature_dim(),
                a: self.attribute_dim(),
                c: self.num_classes(),
            },
        };
        let manifest_path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
            path: manifest_path.display().to_string(),
            source: e,
        })?;
        std::fs::write(&manifest_path, json)
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        Ok(manifest_path)
    }
}

/// Specification for the synthetic ZSC task generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub c_total: usize,
    pub c_test: usize,
    pub images_per_class: usize,
    pub d: usize,
    pub a: usize,
    /// Std of the Gaussian noise added to features.
    pub noise_sigma: f64,
    /// Std of the Gaussian noise added to per-image attributes.
    pub attribute_noise_sigma: f64,
    /// 0 draws class prototypes independently; > 0 mixes in a shared
    /// component so prototype entries have this pairwise correlation,
    /// producing confusable classes.
    pub prototype_correlation: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            c_total: 20,
            c_test: 5,
            images_per_class: 30,
            d: 32,
            a: 16,
            noise_sigma: 0.05,
            attribute_noise_sigma: 0.05,
            prototype_correlation: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.c_test >= self.c_total {
            return Err(Error::InvalidConfig(format!(
                "c_test ({}) must be < c_total ({})",
                self.c_test, self.c_total
            )));
        }
        if self.c_total == 0 || self.c_test == 0 || self.images_per_class == 0 {
            return Err(Error::InvalidConfig("all counts must be >= 1".into()));
        }
        if self.d == 0 || self.a == 0 {
            return Err(Error::InvalidConfig("d and a must be >= 1".into()));
        }
        if self.noise_sigma < 0.0 || self.attribute_noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise sigmas must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.prototype_correlation) {
            return Err(Error::InvalidConfig(
                "prototype_correlation must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Generates a linearly-solvable synthetic ZSC task.
///
/// Class attribute prototypes are drawn in [0,1]^a; per-image attributes
/// are the prototype plus Gaussian noise; features are a fixed seeded
/// linear image of the prototype plus Gaussian noise. The last `c_test`
/// classes take the test role. Deterministic per seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0f64, 1.0).unwrap();

    // Ground-truth linear map from attribute space to feature space.
    let g = Array2::from_shape_fn((spec.d, spec.a), |_| std_normal.sample(&mut rng));

    let rho = spec.prototype_correlation;
    // Mixing weight chosen so prototype entries of two classes have
    // correlation rho: corr = w^2 / (w^2 + (1-w)^2).
    let w_shared = if rho > 0.0 {
        let s = (rho / (1.0 - rho)).sqrt();
        s / (1.0 + s)
    } else {
        0.0
    };
    let shared: Array1<f64> = Array1::from_shape_fn(spec.a, |_| rng.gen::<f64>());

    let mut prototypes = Array2::zeros((spec.c_total, spec.a));
    for mut row in prototypes.outer_iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            let own: f64 = rng.gen();
            *v = w_shared * shared[j] + (1.0 - w_shared) * own;
        }
    }

    let n = spec.c_total * spec.images_per_class;
    let mut features = Array2::zeros((n, spec.d));
    let mut attributes = Array2::zeros((n, spec.a));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0usize;
    for class in 1..=spec.c_total {
        let proto = prototypes.row(class - 1);
        let base_feature = g.dot(&proto);
        for _ in 0..spec.images_per_class {
            for (j, v) in attributes.row_mut(row).iter_mut().enumerate() {
                *v = proto[j] + spec.attribute_noise_sigma * std_normal.sample(&mut rng);
            }
            for (j, v) in features.row_mut(row).iter_mut().enumerate() {
                *v = base_feature[j] + spec.noise_sigma * std_normal.sample(&mut rng);
            }
            labels.push(class);
            row += 1;
        }
    }

    let split = (1..=spec.c_total)
        .map(|k| {
            if k > spec.c_total - spec.c_test {
                Role::Test
            } else {
                Role::Train
            }
        })
        .collect();

    let dataset = Dataset {
        features,
        attributes,
        labels,
        split,
        class_descriptors: None,
        normalized: false,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Cross-class negative candidates for every training image.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    /// For each training image, the training images of other classes
    /// whose attribute vectors may form negatives with it. Row order.
    pub per_image_candidates: BTreeMap<usize, Vec<usize>>,
    /// Training image rows per class, for intra-class correlation.
    pub class_members: BTreeMap<usize, Vec<usize>>,
}

/// Builds the negative-candidate pool over training images only.
pub fn build_candidate_pool(dataset: &Dataset) -> Result<CandidatePool> {
    let train_images = dataset.images_with_role(Role::Train);
    if train_images.is_empty() {
        return Err(Error::InvalidConfig("training split is empty".into()));
    }
    let mut class_members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &train_images {
        class_members.entry(dataset.labels[i]).or_default().push(i);
    }
    if class_members.len() < 2 {
        return Err(Error::SingleTrainingClass);
    }
    let mut per_image_candidates = BTreeMap::new();
    for &i in &train_images {
        let own = dataset.labels[i];
        let candidates: Vec<usize> = train_images
            .iter()
            .copied()
            .filter(|&j| dataset.labels[j] != own)
            .collect();
        per_image_candidates.insert(i, candidates);
    }
    Ok(CandidatePool {
        per_image_candidates,
        class_members,
    })
}
