//! Seeded synthetic retrieval benchmarks.
//!
//! Each dataset hides its own matching objective: a secret orthogonal map
//! from query space to target space. A shared encoder cannot satisfy several
//! distinct maps from the raw query alone, which is exactly the headroom the
//! per-query calibrator is meant to exploit. Sizes are deliberately skewed so
//! sampling strategy matters.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::DenseArray;
use crate::seeds;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid benchmark spec: {what}")]
    InvalidSpec { what: String },

    #[error("malformed record at line {line}: {what}")]
    MalformedRecord { line: usize, what: String },

    #[error("dimension mismatch in dataset {dataset_id}: {what}")]
    DimensionMismatch { dataset_id: usize, what: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How a dataset's targets relate to its queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskFamily {
    /// Target latent equals query latent.
    Identity,
    /// Target latent is a secret random rotation of the query latent.
    Rotation,
    /// Target matches the query exactly on a trailing attribute block; the
    /// gallery holds confusers that agree everywhere except that block.
    Attribute,
}

/// Declarative description of one dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub family: TaskFamily,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub gallery: usize,
    pub latent_dim: usize,
    pub noise: f64,
}

/// Full benchmark description; all fields must be explicit.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub name: String,
    pub seed: u64,
    #[serde(rename = "dataset")]
    pub datasets: Vec<DatasetSpec>,
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |what: String| Err(DataError::InvalidSpec { what });
        if self.datasets.is_empty() {
            return fail("at least one dataset is required".into());
        }
        for (k, ds) in self.datasets.iter().enumerate() {
            if ds.train == 0 || ds.val == 0 || ds.test == 0 {
                return fail(format!("dataset {k}: train/val/test must be nonzero"));
            }
            if ds.gallery < ds.val + ds.test {
                return fail(format!(
                    "dataset {k}: gallery {} cannot hold all {} val+test positives",
                    ds.gallery,
                    ds.val + ds.test
                ));
            }
            if ds.latent_dim < 4 {
                return fail(format!("dataset {k}: latent_dim must be at least 4"));
            }
            if !(ds.noise >= 0.0) {
                return fail(format!("dataset {k}: noise must be nonnegative"));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, DataError> {
        let spec: BenchmarkSpec =
            toml::from_str(text).map_err(|e| DataError::InvalidSpec {
                what: format!("spec parse error: {e}"),
            })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("spec serializes")
    }

    /// Default desk benchmark: six datasets over three families with a 10:1
    /// size skew, shared 16-dim latents, low noise. The two large datasets use
    /// the easier families so they saturate within a short budget and leave
    /// headroom for sampling strategy on the small rotation tasks.
    pub fn multitask_mini(seed: u64) -> Self {
        let ds = |family, train| DatasetSpec {
            family,
            train,
            val: 100,
            test: 100,
            gallery: 300,
            latent_dim: 16,
            noise: 0.025,
        };
        BenchmarkSpec {
            name: "multitask-mini".to_string(),
            seed,
            datasets: vec![
                ds(TaskFamily::Identity, 2000),
                ds(TaskFamily::Attribute, 2000),
                ds(TaskFamily::Rotation, 500),
                ds(TaskFamily::Rotation, 500),
                ds(TaskFamily::Rotation, 200),
                ds(TaskFamily::Rotation, 200),
            ],
        }
    }

    /// Two same-family datasets with a 10:1 size gap, for studying how the
    /// learned interpolation weight responds to data scale. Noise is set high
    /// enough that the only way past the retrieval floor is fitting individual
    /// train pairs, which the small dataset can do and the large one cannot.
    pub fn lambda_scale(seed: u64) -> Self {
        let ds = |train| DatasetSpec {
            family: TaskFamily::Rotation,
            train,
            val: 100,
            test: 100,
            gallery: 300,
            latent_dim: 16,
            noise: 0.45,
        };
        BenchmarkSpec {
            name: "lambda-scale".to_string(),
            seed,
            datasets: vec![ds(5000), ds(500)],
        }
    }
}

/// Which portion of a dataset a record belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Gallery,
}

/// One benchmark record. Gallery records are target-only and carry an empty
/// `query_features` vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub dataset_id: usize,
    pub split: Split,
    pub instruction_id: usize,
    pub query_features: Vec<f64>,
    pub target_features: Vec<f64>,
    pub target_id: usize,
}

/// One dataset's records grouped by split.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub id: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub gallery: Vec<Sample>,
}

/// In-memory benchmark: per-dataset splits plus the shared feature width.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub datasets: Vec<Dataset>,
    pub feature_dim: usize,
}

impl Benchmark {
    /// Groups flat records by dataset and split, validating shape coherence.
    pub fn from_samples(samples: Vec<Sample>) -> Result<Benchmark, DataError> {
        let mut datasets: Vec<Dataset> = Vec::new();
        let mut feature_dim = 0usize;
        for s in samples {
            let id = s.dataset_id;
            if datasets.len() <= id {
                datasets.resize_with(id + 1, Dataset::default);
                datasets[id].id = id;
            }
            for (ds_id, d) in datasets.iter_mut().enumerate() {
                d.id = ds_id;
            }
            let dim = s.target_features.len();
            if feature_dim == 0 {
                feature_dim = dim;
            }
            if dim != feature_dim {
                return Err(DataError::DimensionMismatch {
                    dataset_id: id,
                    what: format!("target width {dim} vs {feature_dim} elsewhere"),
                });
            }
            match s.split {
                Split::Gallery => {
                    if !s.query_features.is_empty() {
                        return Err(DataError::DimensionMismatch {
                            dataset_id: id,
                            what: "gallery records must not carry query features".into(),
                        });
                    }
                }
                _ => {
                    if s.query_features.len() != feature_dim {
                        return Err(DataError::DimensionMismatch {
                            dataset_id: id,
                            what: format!(
                                "query width {} vs {feature_dim} elsewhere",
                                s.query_features.len()
                            ),
                        });
                    }
                    if s.instruction_id != id {
                        return Err(DataError::InvalidSpec {
                            what: format!(
                                "dataset {id} carries instruction {}",
                                s.instruction_id
                            ),
                        });
                    }
                }
            }
            let bucket = match s.split {
                Split::Train => &mut datasets[id].train,
                Split::Val => &mut datasets[id].val,
                Split::Test => &mut datasets[id].test,
                Split::Gallery => &mut datasets[id].gallery,
            };
            bucket.push(s);
        }
        Ok(Benchmark {
            datasets,
            feature_dim,
        })
    }

    pub fn task_count(&self) -> usize {
        self.datasets.len()
    }

    pub fn train_sizes(&self) -> Vec<usize> {
        self.datasets.iter().map(|d| d.train.len()).collect()
    }
}

fn standard_normal_vec(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// Random orthogonal matrix via two passes of modified Gram-Schmidt over a
/// Gaussian matrix. Two passes push `‖RᵀR − I‖_F` well below 1e-10.
pub fn random_orthogonal(dim: usize, rng: &mut impl Rng) -> DenseArray {
    let mut cols: Vec<Vec<f64>> = (0..dim).map(|_| standard_normal_vec(dim, rng)).collect();
    for _pass in 0..2 {
        for j in 0..dim {
            for i in 0..j {
                let proj: f64 = cols[j]
                    .iter()
                    .zip(cols[i].iter())
                    .map(|(a, b)| a * b)
                    .sum();
                let prev = cols[i].clone();
                for (cj, pi) in cols[j].iter_mut().zip(prev.iter()) {
                    *cj -= proj * pi;
                }
            }
            let norm: f64 = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 1e-8, "degenerate Gaussian draw");
            for v in cols[j].iter_mut() {
                *v /= norm;
            }
        }
    }
    let mut data = vec![0.0; dim * dim];
    for (j, col) in cols.iter().enumerate() {
        for i in 0..dim {
            data[i * dim + j] = col[i];
        }
    }
    DenseArray::matrix(dim, dim, data).expect("square matrix")
}

fn apply_map(r: &DenseArray, z: &[f64]) -> Vec<f64> {
    r.matvec(&DenseArray::vector(z.to_vec())).data().to_vec()
}

fn add_noise(v: &mut [f64], sigma: f64, rng: &mut impl Rng) {
    if sigma == 0.0 {
        return;
    }
    for x in v.iter_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *x += sigma * n;
    }
}

/// Size of the trailing attribute block for the attribute family.
pub fn attribute_block_len(latent_dim: usize) -> usize {
    (latent_dim / 4).max(1)
}

fn generate_dataset(id: usize, spec: &DatasetSpec, root_seed: u64) -> Dataset {
    let mut rng = seeds::stream(root_seed, &format!("benchmark/{id}"));
    let m = spec.latent_dim;
    let attr = attribute_block_len(m);
    let rotation = match spec.family {
        TaskFamily::Rotation => Some(random_orthogonal(m, &mut rng)),
        TaskFamily::Identity | TaskFamily::Attribute => None,
    };

    let mut next_target_id = 0usize;
    let mut dataset = Dataset {
        id,
        ..Dataset::default()
    };

    // Positive pairs for train/val/test; remember val/test latents so the
    // gallery can host confusers built from the same latents.
    let mut eval_latents: Vec<Vec<f64>> = Vec::new();
    for (split, count) in [
        (Split::Train, spec.train),
        (Split::Val, spec.val),
        (Split::Test, spec.test),
    ] {
        for _ in 0..count {
            let z = standard_normal_vec(m, &mut rng);
            let mut query = z.clone();
            add_noise(&mut query, spec.noise, &mut rng);
            let mut target = match &rotation {
                Some(r) => apply_map(r, &z),
                None => z.clone(),
            };
            add_noise(&mut target, spec.noise, &mut rng);
            if spec.family == TaskFamily::Attribute {
                // The attribute block transfers verbatim from the query.
                target[m - attr..].copy_from_slice(&query[m - attr..]);
            }
            let target_id = next_target_id;
            next_target_id += 1;
            let sample = Sample {
                dataset_id: id,
                split,
                instruction_id: id,
                query_features: query,
                target_features: target.clone(),
                target_id,
            };
            if split != Split::Train {
                eval_latents.push(z);
                dataset.gallery.push(Sample {
                    dataset_id: id,
                    split: Split::Gallery,
                    instruction_id: id,
                    query_features: Vec::new(),
                    target_features: target,
                    target_id,
                });
            }
            match split {
                Split::Train => dataset.train.push(sample),
                Split::Val => dataset.val.push(sample),
                Split::Test => dataset.test.push(sample),
                Split::Gallery => unreachable!(),
            }
        }
    }

    // Distractors fill the gallery to size. The attribute family recycles
    // evaluation latents with a resampled attribute block, so each confuser
    // agrees with a real positive everywhere except the block that matters;
    // the other families use fresh latents under the same secret map.
    let needed = spec.gallery.saturating_sub(dataset.gallery.len());
    for i in 0..needed {
        let mut target = match spec.family {
            TaskFamily::Attribute => {
                let mut z = eval_latents[i % eval_latents.len()].clone();
                for v in z[m - attr..].iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                z
            }
            TaskFamily::Identity => standard_normal_vec(m, &mut rng),
            TaskFamily::Rotation => {
                let z = standard_normal_vec(m, &mut rng);
                apply_map(rotation.as_ref().expect("rotation family"), &z)
            }
        };
        add_noise(&mut target, spec.noise, &mut rng);
        let target_id = next_target_id;
        next_target_id += 1;
        dataset.gallery.push(Sample {
            dataset_id: id,
            split: Split::Gallery,
            instruction_id: id,
            query_features: Vec::new(),
            target_features: target,
            target_id,
        });
    }

    dataset
}

/// Generates the full benchmark; same spec and seed always produce the same
/// records.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark, DataError> {
    spec.validate()?;
    let dim = spec.datasets[0].latent_dim;
    for (k, ds) in spec.datasets.iter().enumerate() {
        if ds.latent_dim != dim {
            return Err(DataError::InvalidSpec {
                what: format!(
                    "dataset {k}: latent_dim {} differs from dataset 0's {dim}; \
                     a single encoder needs one feature width",
                    ds.latent_dim
                ),
            });
        }
    }
    let datasets = spec
        .datasets
        .iter()
        .enumerate()
        .map(|(id, ds)| generate_dataset(id, ds, spec.seed))
        .collect();
    Ok(Benchmark {
        datasets,
        feature_dim: dim,
    })
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Gallery => "gallery",
        }
    }
}

/// Floats go through std's shortest-exact formatter so that reading the file
/// back restores bit-identical values.
fn push_floats(out: &mut String, values: &[f64]) {
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        debug_assert!(v.is_finite());
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format!("{v:?}"));
    }
    out.push(']');
}

fn sample_to_line(s: &Sample) -> String {
    let mut line = String::with_capacity(64 + 24 * (s.query_features.len() + s.target_features.len()));
    line.push_str(&format!(
        "{{\"dataset_id\":{},\"split\":\"{}\",\"instruction_id\":{},\"query_features\":",
        s.dataset_id,
        s.split.as_str(),
        s.instruction_id
    ));
    push_floats(&mut line, &s.query_features);
    line.push_str(",\"target_features\":");
    push_floats(&mut line, &s.target_features);
    line.push_str(&format!(",\"target_id\":{}}}", s.target_id));
    line
}

/// Wire view of a record: numeric fields are kept as raw JSON tokens and
/// parsed with the standard library, which rounds correctly; this crate's
/// JSON parser is one ULP off on some inputs.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleWire<'a> {
    dataset_id: usize,
    split: Split,
    instruction_id: usize,
    #[serde(borrow)]
    query_features: Vec<&'a serde_json::value::RawValue>,
    #[serde(borrow)]
    target_features: Vec<&'a serde_json::value::RawValue>,
    target_id: usize,
}

fn parse_floats(raw: &[&serde_json::value::RawValue]) -> Result<Vec<f64>, String> {
    raw.iter()
        .map(|r| {
            r.get()
                .trim()
                .parse::<f64>()
                .map_err(|e| format!("bad number {:?}: {e}", r.get()))
        })
        .collect()
}

fn line_to_sample(line: &str, line_no: usize) -> Result<Sample, DataError> {
    let malformed = |what: String| DataError::MalformedRecord {
        line: line_no,
        what,
    };
    let wire: SampleWire =
        serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    Ok(Sample {
        dataset_id: wire.dataset_id,
        split: wire.split,
        instruction_id: wire.instruction_id,
        query_features: parse_floats(&wire.query_features).map_err(&malformed)?,
        target_features: parse_floats(&wire.target_features).map_err(&malformed)?,
        target_id: wire.target_id,
    })
}

/// Writes records as one JSON object per line, datasets in order, splits in
/// train/val/test/gallery order.
pub fn save_jsonl(benchmark: &Benchmark, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for ds in &benchmark.datasets {
        for bucket in [&ds.train, &ds.val, &ds.test, &ds.gallery] {
            for s in bucket {
                out.push_str(&sample_to_line(s));
                out.push('\n');
            }
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Reads a JSONL benchmark back. An empty file yields an empty benchmark.
pub fn load_jsonl(path: &Path) -> Result<Benchmark, DataError> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(line_to_sample(&line, i + 1)?);
    }
    Benchmark::from_samples(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_spec(seed: u64, family: TaskFamily, noise: f64) -> BenchmarkSpec {
        BenchmarkSpec {
            name: "tiny".to_string(),
            seed,
            datasets: vec![DatasetSpec {
                family,
                train: 40,
                val: 10,
                test: 20,
                gallery: 80,
                latent_dim: 8,
                noise,
            }],
        }
    }

    #[test]
    fn identity_family_without_noise_pairs_equal_features() {
        let bench = generate_benchmark(&tiny_spec(1, TaskFamily::Identity, 0.0)).unwrap();
        for s in &bench.datasets[0].train {
            assert_eq!(s.query_features, s.target_features);
        }
    }

    #[test]
    fn rotation_family_defeats_raw_feature_matching() {
        let mut spec = tiny_spec(2, TaskFamily::Rotation, 0.0);
        spec.datasets[0].test = 100;
        spec.datasets[0].gallery = 250;
        let bench = generate_benchmark(&spec).unwrap();
        let ds = &bench.datasets[0];
        // Rank gallery by raw dot product; positives should sit at chance.
        let mut hits = 0;
        for q in &ds.test {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for g in &ds.gallery {
                let score: f64 = q
                    .query_features
                    .iter()
                    .zip(g.target_features.iter())
                    .map(|(a, b)| a * b)
                    .sum();
                if score > best.0 {
                    best = (score, g.target_id);
                }
            }
            if best.1 == q.target_id {
                hits += 1;
            }
        }
        // Chance is 1/250 per query; 100 queries make ≥6 hits vanishingly rare.
        assert!(hits <= 5, "raw matching scored {hits}/100 under a rotation");
    }

    #[test]
    fn rotations_are_orthogonal_to_tight_tolerance() {
        let mut rng = seeds::stream(3, "test");
        for dim in [4, 8, 16, 32] {
            let r = random_orthogonal(dim, &mut rng);
            let gram = r.transposed().matmul(&r);
            let mut dev = 0.0;
            for i in 0..dim {
                for j in 0..dim {
                    let target = if i == j { 1.0 } else { 0.0 };
                    dev += (gram.get2(i, j) - target).powi(2);
                }
            }
            assert!(dev.sqrt() < 1e-10, "dim {dim}: ‖RᵀR−I‖={}", dev.sqrt());
        }
    }

    #[test]
    fn attribute_family_copies_block_and_plants_confusers() {
        let spec = tiny_spec(4, TaskFamily::Attribute, 0.0);
        let bench = generate_benchmark(&spec).unwrap();
        let ds = &bench.datasets[0];
        let m = 8;
        let attr = attribute_block_len(m);
        for s in &ds.test {
            assert_eq!(
                s.query_features[m - attr..],
                s.target_features[m - attr..],
                "attribute block must transfer from query to target"
            );
        }
        // With σ=0 a confuser matches some positive outside the block but
        // differs inside it.
        let positives: Vec<&Sample> = ds
            .gallery
            .iter()
            .filter(|g| ds.test.iter().chain(ds.val.iter()).any(|s| s.target_id == g.target_id))
            .collect();
        let confusers: Vec<&Sample> = ds
            .gallery
            .iter()
            .filter(|g| !positives.iter().any(|p| p.target_id == g.target_id))
            .collect();
        assert!(!confusers.is_empty());
        let twin_found = confusers.iter().any(|c| {
            ds.test.iter().chain(ds.val.iter()).any(|s| {
                let same_front = s.target_features[..m - attr]
                    .iter()
                    .zip(c.target_features[..m - attr].iter())
                    .all(|(a, b)| (a - b).abs() < 1e-12);
                let diff_block = s.target_features[m - attr..]
                    .iter()
                    .zip(c.target_features[m - attr..].iter())
                    .any(|(a, b)| (a - b).abs() > 1e-6);
                same_front && diff_block
            })
        });
        assert!(twin_found, "no confuser shares a positive's non-attribute part");
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let spec = BenchmarkSpec::multitask_mini(42);
        let a = generate_benchmark(&spec).unwrap();
        let b = generate_benchmark(&spec).unwrap();
        for (da, db) in a.datasets.iter().zip(b.datasets.iter()) {
            assert_eq!(da.train, db.train);
            assert_eq!(da.gallery, db.gallery);
        }
        let c = generate_benchmark(&BenchmarkSpec::multitask_mini(43)).unwrap();
        assert_ne!(a.datasets[0].train[0], c.datasets[0].train[0]);
    }

    #[test]
    fn jsonl_round_trip_preserves_everything() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bench.jsonl");
        let bench = generate_benchmark(&tiny_spec(5, TaskFamily::Rotation, 0.1)).unwrap();
        save_jsonl(&bench, &path).unwrap();
        let loaded = load_jsonl(&path).unwrap();
        assert_eq!(loaded.feature_dim, bench.feature_dim);
        for (a, b) in bench.datasets.iter().zip(loaded.datasets.iter()) {
            assert_eq!(a.train, b.train);
            assert_eq!(a.val, b.val);
            assert_eq!(a.test, b.test);
            assert_eq!(a.gallery, b.gallery);
        }

        // Re-saving the loaded benchmark must give identical bytes.
        let path2 = dir.path().join("bench2.jsonl");
        save_jsonl(&loaded, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_line_reports_its_number() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let bench = generate_benchmark(&tiny_spec(6, TaskFamily::Identity, 0.0)).unwrap();
        save_jsonl(&bench, &path).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        let cut = text.lines().next().unwrap().len() / 2;
        let second_line_start = text.find('\n').unwrap() + 1;
        text.replace_range(second_line_start..second_line_start + cut, "");
        fs::write(&path, &text).unwrap();
        let err = load_jsonl(&path).unwrap_err();
        match err {
            DataError::MalformedRecord { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_empty_benchmark() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        let bench = load_jsonl(&path).unwrap();
        assert!(bench.datasets.is_empty());
    }

    #[test]
    fn split_target_ids_are_disjoint_except_gallery() {
        let bench = generate_benchmark(&tiny_spec(7, TaskFamily::Rotation, 0.1)).unwrap();
        let ds = &bench.datasets[0];
        let train: Vec<usize> = ds.train.iter().map(|s| s.target_id).collect();
        let val: Vec<usize> = ds.val.iter().map(|s| s.target_id).collect();
        let test: Vec<usize> = ds.test.iter().map(|s| s.target_id).collect();
        for t in &train {
            assert!(!val.contains(t) && !test.contains(t));
        }
        for v in &val {
            assert!(!test.contains(v));
        }
        // Gallery covers every evaluation positive exactly once, ids unique.
        let gallery: Vec<usize> = ds.gallery.iter().map(|s| s.target_id).collect();
        let mut sorted = gallery.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), gallery.len(), "duplicate gallery target_id");
        for t in val.iter().chain(test.iter()) {
            assert!(gallery.contains(t), "positive {t} missing from gallery");
        }
        assert_eq!(gallery.len(), 80);
    }

    #[test]
    fn invalid_specs_are_rejected_with_reasons() {
        let mut spec = tiny_spec(8, TaskFamily::Identity, 0.1);
        spec.datasets[0].gallery = 10; // cannot hold 30 positives
        assert!(matches!(
            generate_benchmark(&spec),
            Err(DataError::InvalidSpec { .. })
        ));

        let mut spec = tiny_spec(9, TaskFamily::Attribute, 0.1);
        spec.datasets[0].latent_dim = 2;
        assert!(matches!(
            generate_benchmark(&spec),
            Err(DataError::InvalidSpec { .. })
        ));

        let mut spec = tiny_spec(10, TaskFamily::Identity, 0.1);
        spec.datasets[0].train = 0;
        assert!(matches!(
            generate_benchmark(&spec),
            Err(DataError::InvalidSpec { .. })
        ));
    }

    #[test]
    fn toml_spec_round_trip() {
        let spec = BenchmarkSpec::multitask_mini(42);
        let text = spec.to_toml();
        let parsed = BenchmarkSpec::from_toml(&text).unwrap();
        assert_eq!(parsed.name, spec.name);
        assert_eq!(parsed.seed, spec.seed);
        assert_eq!(parsed.datasets.len(), 6);
        assert_eq!(parsed.datasets[1].family, TaskFamily::Attribute);
        assert_eq!(parsed.datasets[3].family, TaskFamily::Rotation);

        let err = BenchmarkSpec::from_toml("name = \"x\"\n").unwrap_err();
        assert!(matches!(err, DataError::InvalidSpec { .. }));
    }
}
