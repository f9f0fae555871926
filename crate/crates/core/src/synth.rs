//! Seeded synthetic embedding worlds with factorized attributes.
//!
//! A random orthonormal frame is split into disjoint per-attribute blocks.
//! Every attribute value owns a fixed unit vector inside its block; an image
//! feature is the weighted sum of its values' vectors plus isotropic noise,
//! and a text feature is the value vector plus a per-template offset plus
//! noise. Features are L2-normalized.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{render_prompts, PromptFile, PromptSet};
use crate::tensor_io::{self, l2_norm, EmbeddingMatrix, LabeledSet};

const TEMPLATE_BANK: [&str; 8] = [
    "a photo of a {}",
    "an image of a {}",
    "a photo of the {}",
    "a picture of a {}",
    "a cropped photo of a {}",
    "a close-up photo of a {}",
    "a blurry photo of a {}",
    "a good photo of the {}",
];

fn default_dim() -> usize {
    128
}
fn default_subspace_dim() -> usize {
    4
}
fn default_signal_weight() -> f64 {
    1.0
}
fn default_noise_sigma() -> f64 {
    0.05
}
fn default_template_noise() -> f64 {
    0.1
}
fn default_templates() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSpec {
    pub name: String,
    pub values: Vec<String>,
    #[serde(default = "default_subspace_dim")]
    pub subspace_dim: usize,
    #[serde(default = "default_signal_weight")]
    pub signal_weight: f64,
}

impl AttributeSpec {
    pub fn new(name: &str, values: &[&str]) -> Self {
        AttributeSpec {
            name: name.into(),
            values: values.iter().map(|v| v.to_string()).collect(),
            subspace_dim: default_subspace_dim(),
            signal_weight: default_signal_weight(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub attributes: Vec<AttributeSpec>,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "default_template_noise")]
    pub template_noise: f64,
    #[serde(default = "default_templates")]
    pub templates: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(attributes: Vec<AttributeSpec>, seed: u64) -> Self {
        SyntheticSpec {
            dim: default_dim(),
            attributes,
            noise_sigma: default_noise_sigma(),
            template_noise: default_template_noise(),
            templates: default_templates(),
            seed,
        }
    }

    /// Two attributes in the spirit of colored digits: ten "number" values
    /// and three "color" values, defaults elsewhere.
    pub fn digits_and_colors(seed: u64) -> Self {
        Self::new(
            vec![
                AttributeSpec::new(
                    "number",
                    &[
                        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight",
                        "nine",
                    ],
                ),
                AttributeSpec::new("color", &["red", "green", "blue"]),
            ],
            seed,
        )
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(Error::Synth("no attributes".into()));
        }
        if self.dim < 2 {
            return Err(Error::Synth("dim must be at least 2".into()));
        }
        let blocks: usize = self.attributes.iter().map(|a| a.subspace_dim).sum();
        if blocks > self.dim {
            return Err(Error::Synth(format!(
                "attribute blocks need {blocks} dimensions but dim is {}",
                self.dim
            )));
        }
        for a in &self.attributes {
            if a.values.len() < 2 {
                return Err(Error::Synth(format!(
                    "attribute {} needs at least two values",
                    a.name
                )));
            }
            if a.subspace_dim == 0 {
                return Err(Error::Synth(format!(
                    "attribute {} has an empty block",
                    a.name
                )));
            }
            if !a.signal_weight.is_finite() {
                return Err(Error::Synth(format!(
                    "attribute {} has a non-finite weight",
                    a.name
                )));
            }
        }
        let mut names: Vec<&str> = self.attributes.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Synth("duplicate attribute names".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite())
            || !(self.template_noise >= 0.0 && self.template_noise.is_finite())
        {
            return Err(Error::Synth(
                "noise levels must be finite and non-negative".into(),
            ));
        }
        if self.templates == 0 {
            return Err(Error::Synth("need at least one template".into()));
        }
        Ok(())
    }

    pub fn template_strings(&self) -> Vec<String> {
        (0..self.templates)
            .map(|t| match TEMPLATE_BANK.get(t) {
                Some(s) => s.to_string(),
                None => format!("a photo of a {{}}, variant {t}"),
            })
            .collect()
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }
}

/// Prompt grid and text features of one attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeText {
    pub name: String,
    pub prompts: PromptSet,
    pub features: EmbeddingMatrix,
}

/// One attribute-value combination with independent reference and evaluation draws.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub values: Vec<usize>,
    pub reference: EmbeddingMatrix,
    pub evaluation: EmbeddingMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub spec: SyntheticSpec,
    pub samples_per_cell: usize,
    pub cells: Vec<Cell>,
    pub text: Vec<AttributeText>,
    value_vectors: Vec<Vec<Vec<f64>>>,
}

impl SyntheticWorld {
    /// Unit vector of `value` of attribute `attribute`.
    pub fn value_vector(&self, attribute: usize, value: usize) -> &[f64] {
        &self.value_vectors[attribute][value]
    }

    pub fn text_for(&self, name: &str) -> Option<&AttributeText> {
        self.text.iter().find(|t| t.name == name)
    }

    fn cell_name(&self, cell: &Cell) -> String {
        cell.values
            .iter()
            .zip(&self.spec.attributes)
            .map(|(&v, a)| format!("{}={}", a.name, a.values[v]))
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn gaussian(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = l2_norm(&v);
    if n == 0.0 {
        return Err(Error::Synth("generated a zero vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// All value combinations, last attribute varying fastest.
fn combinations(sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for &n in sizes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..n).map(move |v| {
                    let mut c = prefix.clone();
                    c.push(v);
                    c
                })
            })
            .collect();
    }
    out
}

pub fn generate_world(spec: &SyntheticSpec, samples_per_cell: usize) -> Result<SyntheticWorld> {
    spec.validate()?;
    if samples_per_cell == 0 {
        return Err(Error::Synth("samples per cell must be positive".into()));
    }
    let dim = spec.dim;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);

    let frame = DMatrix::from_column_slice(dim, dim, &gaussian(&mut rng, dim * dim))
        .qr()
        .q();

    let mut value_vectors = Vec::with_capacity(spec.attributes.len());
    let mut offset = 0;
    for a in &spec.attributes {
        let mut vectors = Vec::with_capacity(a.values.len());
        for _ in &a.values {
            let coefs = normalize(gaussian(&mut rng, a.subspace_dim))?;
            let mut u = vec![0.0; dim];
            for (j, c) in coefs.iter().enumerate() {
                for (ui, f) in u.iter_mut().zip(frame.column(offset + j).iter()) {
                    *ui += c * f;
                }
            }
            vectors.push(u);
        }
        value_vectors.push(vectors);
        offset += a.subspace_dim;
    }

    let template_offsets: Vec<Vec<f64>> = (0..spec.templates)
        .map(|_| normalize(gaussian(&mut rng, dim)))
        .collect::<Result<_>>()?;

    let templates = spec.template_strings();
    let mut text = Vec::with_capacity(spec.attributes.len());
    for (a, vectors) in spec.attributes.iter().zip(&value_vectors) {
        let prompts = render_prompts(&templates, &a.values)?;
        let mut data = Vec::with_capacity(prompts.len() * dim);
        for u in vectors {
            for r in &template_offsets {
                let noise = gaussian(&mut rng, dim);
                let t: Vec<f64> = (0..dim)
                    .map(|i| u[i] + spec.template_noise * r[i] + spec.noise_sigma * noise[i])
                    .collect();
                data.extend(normalize(t)?);
            }
        }
        let features = EmbeddingMatrix::new(data, prompts.len(), dim)?.normalized()?;
        text.push(AttributeText {
            name: a.name.clone(),
            prompts,
            features,
        });
    }

    let sizes: Vec<usize> = spec.attributes.iter().map(|a| a.values.len()).collect();
    let combos = combinations(&sizes);
    let draw = |rng: &mut ChaCha20Rng, combo: &[usize]| -> Result<EmbeddingMatrix> {
        let mut data = Vec::with_capacity(samples_per_cell * dim);
        for _ in 0..samples_per_cell {
            let noise = gaussian(rng, dim);
            let mut x: Vec<f64> = noise.iter().map(|g| spec.noise_sigma * g).collect();
            for ((a, &v), vectors) in spec.attributes.iter().zip(combo).zip(&value_vectors) {
                for (xi, ui) in x.iter_mut().zip(&vectors[v]) {
                    *xi += a.signal_weight * ui;
                }
            }
            data.extend(normalize(x)?);
        }
        EmbeddingMatrix::new(data, samples_per_cell, dim)?.normalized()
    };
    let references = combos
        .iter()
        .map(|c| draw(&mut rng, c))
        .collect::<Result<Vec<_>>>()?;
    let evaluations = combos
        .iter()
        .map(|c| draw(&mut rng, c))
        .collect::<Result<Vec<_>>>()?;
    let cells = combos
        .into_iter()
        .zip(references.into_iter().zip(evaluations))
        .map(|(values, (reference, evaluation))| Cell {
            values,
            reference,
            evaluation,
        })
        .collect();

    Ok(SyntheticWorld {
        spec: spec.clone(),
        samples_per_cell,
        cells,
        text,
        value_vectors,
    })
}

/// Train/test split of a world for a given notion of normality.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// Reference draws of the all-normal cells; labels all 0.
    pub train: LabeledSet,
    /// Evaluation draws of every cell; label 1 iff any attribute is anomalous.
    pub test: LabeledSet,
    /// Per attribute: test label 1 iff that attribute's value is anomalous.
    pub per_attribute_labels: BTreeMap<String, Vec<u8>>,
}

/// The first value of every attribute.
pub fn first_values_normal(spec: &SyntheticSpec) -> BTreeMap<String, Vec<String>> {
    spec.attributes
        .iter()
        .map(|a| (a.name.clone(), vec![a.values[0].clone()]))
        .collect()
}

pub fn make_split(
    world: &SyntheticWorld,
    normal_values: &BTreeMap<String, Vec<String>>,
) -> Result<Split> {
    let spec = &world.spec;
    for name in normal_values.keys() {
        if spec.attribute_index(name).is_none() {
            return Err(Error::Synth(format!("unknown attribute {name:?}")));
        }
    }
    let mut normal = Vec::with_capacity(spec.attributes.len());
    for a in &spec.attributes {
        let chosen = normal_values
            .get(&a.name)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| {
                Error::Synth(format!(
                    "attribute {} has no normal values, so the training cell is empty",
                    a.name
                ))
            })?;
        let mut mask = vec![false; a.values.len()];
        for v in chosen {
            let idx =
                a.values.iter().position(|x| x == v).ok_or_else(|| {
                    Error::Synth(format!("attribute {} has no value {v:?}", a.name))
                })?;
            mask[idx] = true;
        }
        normal.push(mask);
    }

    let mut train_parts = Vec::new();
    let mut train_names = Vec::new();
    let mut test_parts = Vec::new();
    let mut test_names = Vec::new();
    let mut any_labels = Vec::new();
    let mut per_attribute: Vec<Vec<u8>> = vec![Vec::new(); spec.attributes.len()];
    for cell in &world.cells {
        let anomalous: Vec<bool> = cell
            .values
            .iter()
            .zip(&normal)
            .map(|(&v, mask)| !mask[v])
            .collect();
        let name = world.cell_name(cell);
        let n = world.samples_per_cell;
        if anomalous.iter().all(|a| !a) {
            train_parts.push(&cell.reference);
            train_names.extend((0..n).map(|i| format!("{name}#{i}")));
        }
        test_parts.push(&cell.evaluation);
        test_names.extend((0..n).map(|i| format!("{name}#{i}")));
        any_labels.extend(std::iter::repeat_n(anomalous.iter().any(|&a| a) as u8, n));
        for (labels, &a) in per_attribute.iter_mut().zip(&anomalous) {
            labels.extend(std::iter::repeat_n(a as u8, n));
        }
    }
    if train_parts.is_empty() {
        return Err(Error::Synth("empty train cell".into()));
    }
    let train_rows = train_names.len();
    Ok(Split {
        train: LabeledSet::new(
            EmbeddingMatrix::vstack(&train_parts)?,
            Some(vec![0; train_rows]),
            Some(train_names),
        )?,
        test: LabeledSet::new(
            EmbeddingMatrix::vstack(&test_parts)?,
            Some(any_labels),
            Some(test_names),
        )?,
        per_attribute_labels: spec
            .attributes
            .iter()
            .map(|a| a.name.clone())
            .zip(per_attribute)
            .collect(),
    })
}

/// Files written for a world and its split, relative to the output directory.
#[derive(Debug, Clone, Serialize)]
pub struct WorldIndex {
    pub seed: u64,
    pub dim: usize,
    pub samples_per_cell: usize,
    pub train: String,
    pub test: String,
    pub attributes: Vec<AttributeFiles>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttributeFiles {
    pub name: String,
    pub normal_values: Vec<String>,
    pub prompts: String,
    pub text_features: String,
    pub test_labels: String,
}

/// Writes prompts, text features, train/test manifests and per-attribute
/// label manifests into `dir`, plus `world.json` indexing them.
pub fn write_world(
    world: &SyntheticWorld,
    normal_values: &BTreeMap<String, Vec<String>>,
    dir: impl AsRef<Path>,
) -> Result<WorldIndex> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let split = make_split(world, normal_values)?;
    tensor_io::save_labeled_set(&split.train, dir.join("train.json"), "train.npy")?;
    tensor_io::save_labeled_set(&split.test, dir.join("test.json"), "test.npy")?;

    let mut attributes = Vec::new();
    for t in &world.text {
        let prompts = format!("prompts_{}.json", t.name);
        let text_features = format!("text_{}.npy", t.name);
        let test_labels = format!("test_{}.json", t.name);
        PromptFile::from(&t.prompts).write(dir.join(&prompts))?;
        tensor_io::save_matrix(&t.features, dir.join(&text_features))?;
        tensor_io::Manifest {
            embeddings: "test.npy".into(),
            labels: Some(
                split.per_attribute_labels[&t.name]
                    .iter()
                    .map(|&l| l as i64)
                    .collect(),
            ),
            names: split.test.names.clone(),
        }
        .write(dir.join(&test_labels))?;
        attributes.push(AttributeFiles {
            name: t.name.clone(),
            normal_values: normal_values[&t.name].clone(),
            prompts,
            text_features,
            test_labels,
        });
    }
    let index = WorldIndex {
        seed: world.spec.seed,
        dim: world.spec.dim,
        samples_per_cell: world.samples_per_cell,
        train: "train.json".into(),
        test: "test.json".into(),
        attributes,
    };
    let path = dir.join("world.json");
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(index)
}
