//! Class-embedding provider: file import of precomputed text-encoder
//! vectors, or seeded synthetic unit vectors for self-contained runs.
//!
//! Import file layout (whitespace-separated text, `#` comments allowed):
//!
//! ```text
//! # class-embeddings v1
//! K D_t
//! <K class-name lines, in order>
//! <K lines of D_t floats each>
//! ```

use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Prompt wrapped around each class name before hashing/encoding.
pub const PROMPT_TEMPLATE: &str = "a photo of {}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    FileImport,
    SeededSynthetic,
}

/// One embedding row per label category.
#[derive(Debug, Clone)]
pub struct ClassEmbeddingSet {
    pub embeddings: Array2<f64>,
    pub class_names: Vec<String>,
    pub source: EmbeddingSource,
}

impl ClassEmbeddingSet {
    pub fn num_classes(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn validate(&self, expected_classes: usize, expected_dim: usize) -> Result<()> {
        if self.num_classes() != expected_classes {
            return Err(Error::Data(format!(
                "class embeddings: expected {expected_classes} rows, found {}",
                self.num_classes()
            )));
        }
        if self.dim() != expected_dim {
            return Err(Error::Data(format!(
                "class embeddings: expected dimension {expected_dim}, found {}",
                self.dim()
            )));
        }
        if self.embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("class embeddings contain non-finite values".into()));
        }
        Ok(())
    }
}

/// Load embeddings from `path` when given, otherwise derive deterministic
/// unit-norm pseudo-embeddings from `(class name, seed, dim)`.
pub fn text_provider_load(
    path: Option<&Path>,
    class_names: &[String],
    seed: u64,
    dim: usize,
) -> Result<ClassEmbeddingSet> {
    let set = match path {
        Some(path) => parse_embedding_file(path, class_names)?,
        None => synthetic(class_names, seed, dim),
    };
    set.validate(class_names.len(), if path.is_some() { set.dim() } else { dim })?;
    Ok(set)
}

fn synthetic(class_names: &[String], seed: u64, dim: usize) -> ClassEmbeddingSet {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rows = Array2::<f64>::zeros((class_names.len(), dim));
    for (i, name) in class_names.iter().enumerate() {
        let prompt = PROMPT_TEMPLATE.replace("{}", name);
        let mut hasher = Sha256::new();
        hasher.update(prompt.as_bytes());
        hasher.update(seed.to_le_bytes());
        hasher.update((dim as u64).to_le_bytes());
        let digest = hasher.finalize();
        let row_seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(row_seed);
        let mut row: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut row {
            *v /= norm;
        }
        for (j, v) in row.into_iter().enumerate() {
            rows[[i, j]] = v;
        }
    }
    ClassEmbeddingSet {
        embeddings: rows,
        class_names: class_names.to_vec(),
        source: EmbeddingSource::SeededSynthetic,
    }
}

fn parse_embedding_file(path: &Path, class_names: &[String]) -> Result<ClassEmbeddingSet> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));

    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty embedding file", path.display())))?;
    let mut parts = header.split_whitespace();
    let k: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Data(format!("{}: bad header `{header}`", path.display())))?;
    let dim: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Data(format!("{}: bad header `{header}`", path.display())))?;

    if k != class_names.len() {
        return Err(Error::Data(format!(
            "{}: expected {} embedding rows, found {k}",
            path.display(),
            class_names.len()
        )));
    }

    let mut names = Vec::with_capacity(k);
    for i in 0..k {
        let name = lines
            .next()
            .ok_or_else(|| Error::Data(format!("{}: missing class name {i}", path.display())))?;
        names.push(name.to_string());
    }
    if names != class_names {
        return Err(Error::Data(format!(
            "{}: class names {:?} do not match configured {:?}",
            path.display(),
            names,
            class_names
        )));
    }

    let mut rows = Array2::<f64>::zeros((k, dim));
    for i in 0..k {
        let line = lines
            .next()
            .ok_or_else(|| Error::Data(format!("{}: missing embedding row {i}", path.display())))?;
        let values: std::result::Result<Vec<f64>, _> =
            line.split_whitespace().map(str::parse::<f64>).collect();
        let values = values.map_err(|e| Error::Data(format!("{}: row {i}: {e}", path.display())))?;
        if values.len() != dim {
            return Err(Error::Data(format!(
                "{}: row {i}: expected {dim} values, found {}",
                path.display(),
                values.len()
            )));
        }
        for (j, v) in values.into_iter().enumerate() {
            rows[[i, j]] = v;
        }
    }

    Ok(ClassEmbeddingSet {
        embeddings: rows,
        class_names: names,
        source: EmbeddingSource::FileImport,
    })
}

/// Serialize an embedding set in the import format.
pub fn write_embedding_file(path: &Path, set: &ClassEmbeddingSet) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::from("# class-embeddings v1\n");
    let _ = writeln!(out, "{} {}", set.num_classes(), set.dim());
    for name in &set.class_names {
        let _ = writeln!(out, "{name}");
    }
    for row in set.embeddings.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    std::fs::write(path, out)?;
    Ok(())
}
