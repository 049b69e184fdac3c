//! Dataset ingestion (MNIST IDX, MovieLens ratings, bag-of-words corpora)
//! and seeded synthetic generators used as desk-scale stand-ins.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};
use thiserror::Error;

use crate::scalar::{cast, Scalar};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {0}")]
    MissingFile(String),
    #[error("format error in {path} at {position}: {message}")]
    Format {
        path: String,
        position: String,
        message: String,
    },
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Labeled vectors split into train and test; also reused (labels ignored)
/// as the continuous inputs for reconstruction models.
#[derive(Debug)]
pub struct ClassificationData<T> {
    pub features: usize,
    pub classes: usize,
    pub train_x: Vec<T>, // row-major [n_train, features]
    pub train_y: Vec<usize>,
    pub test_x: Vec<T>,
    pub test_y: Vec<usize>,
}

impl<T: Scalar> ClassificationData<T> {
    pub fn train_len(&self) -> usize {
        self.train_y.len()
    }

    pub fn test_len(&self) -> usize {
        self.test_y.len()
    }

    pub fn train_row(&self, i: usize) -> &[T] {
        &self.train_x[i * self.features..(i + 1) * self.features]
    }

    pub fn test_row(&self, i: usize) -> &[T] {
        &self.test_x[i * self.features..(i + 1) * self.features]
    }
}

/// Gaussian class clusters: centers drawn once from N(0, separation^2 I),
/// samples from N(center, noise^2 I).
pub fn synth_clusters<T: Scalar>(
    classes: usize,
    features: usize,
    train_n: usize,
    test_n: usize,
    separation: f64,
    noise: f64,
    seed: u64,
) -> ClassificationData<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![0.0f64; classes * features];
    for c in centers.iter_mut() {
        *c = separation * super::std_normal(&mut rng);
    }
    let draw = |n: usize, xs: &mut Vec<T>, ys: &mut Vec<usize>, rng: &mut ChaCha8Rng| {
        for i in 0..n {
            let y = i % classes; // balanced classes
            ys.push(y);
            for f in 0..features {
                let v = centers[y * features + f] + noise * super::std_normal(rng);
                xs.push(cast(v));
            }
        }
    };
    let mut train_x = Vec::with_capacity(train_n * features);
    let mut train_y = Vec::with_capacity(train_n);
    let mut test_x = Vec::with_capacity(test_n * features);
    let mut test_y = Vec::with_capacity(test_n);
    draw(train_n, &mut train_x, &mut train_y, &mut rng);
    draw(test_n, &mut test_x, &mut test_y, &mut rng);
    ClassificationData {
        features,
        classes,
        train_x,
        train_y,
        test_x,
        test_y,
    }
}

/// Two-class XOR-structured data: the label is the XOR of the signs of the
/// first two coordinates, so linear models top out near chance while one
/// hidden layer suffices.
pub fn synth_xor<T: Scalar>(
    features: usize,
    train_n: usize,
    test_n: usize,
    margin: f64,
    seed: u64,
) -> ClassificationData<T> {
    assert!(features >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |n: usize, xs: &mut Vec<T>, ys: &mut Vec<usize>, rng: &mut ChaCha8Rng| {
        for _ in 0..n {
            let mut row = vec![0.0f64; features];
            for v in row.iter_mut() {
                *v = super::std_normal(rng);
            }
            // Push the two informative coordinates away from the axes.
            for v in row.iter_mut().take(2) {
                *v += margin * v.signum();
            }
            let y = usize::from((row[0] > 0.0) != (row[1] > 0.0));
            ys.push(y);
            xs.extend(row.into_iter().map(|v| cast::<T>(v)));
        }
    };
    let mut train_x = Vec::new();
    let mut train_y = Vec::new();
    let mut test_x = Vec::new();
    let mut test_y = Vec::new();
    draw(train_n, &mut train_x, &mut train_y, &mut rng);
    draw(test_n, &mut test_x, &mut test_y, &mut rng);
    ClassificationData {
        features,
        classes: 2,
        train_x,
        train_y,
        test_x,
        test_y,
    }
}

/// Continuous inputs in [0, 1] with low-dimensional latent structure:
/// x = logistic(W z + b) + noise, clipped. Labels are all zero (unused).
pub fn synth_latent01<T: Scalar>(
    features: usize,
    latent: usize,
    train_n: usize,
    test_n: usize,
    noise: f64,
    seed: u64,
) -> ClassificationData<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = vec![0.0f64; latent * features];
    for v in w.iter_mut() {
        *v = 1.5 * super::std_normal(&mut rng);
    }
    let draw = |n: usize, xs: &mut Vec<T>, ys: &mut Vec<usize>, rng: &mut ChaCha8Rng| {
        for _ in 0..n {
            let z: Vec<f64> = (0..latent).map(|_| super::std_normal(rng)).collect();
            for f in 0..features {
                let mut a = 0.0;
                for (k, zk) in z.iter().enumerate() {
                    a += w[k * features + f] * zk;
                }
                let v = 1.0 / (1.0 + (-a).exp()) + noise * super::std_normal(rng);
                xs.push(cast(v.clamp(0.0, 1.0)));
            }
            ys.push(0);
        }
    };
    let mut train_x = Vec::new();
    let mut train_y = Vec::new();
    let mut test_x = Vec::new();
    let mut test_y = Vec::new();
    draw(train_n, &mut train_x, &mut train_y, &mut rng);
    draw(test_n, &mut test_x, &mut test_y, &mut rng);
    ClassificationData {
        features,
        classes: 1,
        train_x,
        train_y,
        test_x,
        test_y,
    }
}

const IDX_MAGIC_IMAGES: u32 = 2051;
const IDX_MAGIC_LABELS: u32 = 2049;

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.display().to_string()));
    }
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Format {
            path: path.display().to_string(),
            position: format!("byte {offset}"),
            message: "truncated header".into(),
        })
}

/// Parse an IDX image file (magic 2051): pixels scaled to [0, 1].
pub fn parse_idx_images<T: Scalar>(path: &Path) -> Result<(Vec<T>, usize, usize), DataError> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_MAGIC_IMAGES {
        return Err(DataError::Format {
            path: path.display().to_string(),
            position: "byte 0".into(),
            message: format!("bad magic {magic:#010x}, expected 2051"),
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let pixels = n * rows * cols;
    let body = bytes.get(16..16 + pixels).ok_or_else(|| DataError::Format {
        path: path.display().to_string(),
        position: format!("byte {}", bytes.len()),
        message: format!("expected {pixels} pixel bytes"),
    })?;
    let data = body.iter().map(|&b| cast(f64::from(b) / 255.0)).collect();
    Ok((data, n, rows * cols))
}

/// Parse an IDX label file (magic 2049).
pub fn parse_idx_labels(path: &Path) -> Result<Vec<usize>, DataError> {
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_MAGIC_LABELS {
        return Err(DataError::Format {
            path: path.display().to_string(),
            position: "byte 0".into(),
            message: format!("bad magic {magic:#010x}, expected 2049"),
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let body = bytes.get(8..8 + n).ok_or_else(|| DataError::Format {
        path: path.display().to_string(),
        position: format!("byte {}", bytes.len()),
        message: format!("expected {n} label bytes"),
    })?;
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Load the four standard MNIST IDX files from a directory.
pub fn load_mnist<T: Scalar>(dir: &Path) -> Result<ClassificationData<T>, DataError> {
    let (train_x, n_train, features) = parse_idx_images(&dir.join("train-images-idx3-ubyte"))?;
    let train_y = parse_idx_labels(&dir.join("train-labels-idx1-ubyte"))?;
    let (test_x, n_test, test_features) = parse_idx_images(&dir.join("t10k-images-idx3-ubyte"))?;
    let test_y = parse_idx_labels(&dir.join("t10k-labels-idx1-ubyte"))?;
    if train_y.len() != n_train || test_y.len() != n_test || features != test_features {
        return Err(DataError::Format {
            path: dir.display().to_string(),
            position: "headers".into(),
            message: "image/label counts disagree".into(),
        });
    }
    Ok(ClassificationData {
        features,
        classes: 10,
        train_x,
        train_y,
        test_x,
        test_y,
    })
}

/// Partially observed ratings matrix in coordinate form.
#[derive(Debug)]
pub struct RatingsData<T> {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(u32, u32, T)>,
}

impl<T: Scalar> RatingsData<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Planted low-rank matrix: D = L R^T + noise, observed on a seeded random
/// subset of cells (without replacement).
pub fn synth_lowrank<T: Scalar>(
    rows: usize,
    cols: usize,
    rank: usize,
    n_obs: usize,
    noise: f64,
    seed: u64,
) -> RatingsData<T> {
    assert!(n_obs <= rows * cols);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l = vec![0.0f64; rows * rank];
    let mut r = vec![0.0f64; cols * rank];
    for v in l.iter_mut().chain(r.iter_mut()) {
        *v = super::std_normal(&mut rng);
    }
    let picked = rand::seq::index::sample(&mut rng, rows * cols, n_obs);
    let mut cells: Vec<usize> = picked.into_iter().collect();
    cells.sort_unstable();
    let entries = cells
        .into_iter()
        .map(|cell| {
            let i = cell / cols;
            let j = cell % cols;
            let mut v = 0.0;
            for k in 0..rank {
                v += l[i * rank + k] * r[j * rank + k];
            }
            v += noise * super::std_normal(&mut rng);
            (i as u32, j as u32, cast(v))
        })
        .collect();
    RatingsData {
        rows,
        cols,
        entries,
    }
}

/// Parse MovieLens `UserID::MovieID::Rating::Timestamp` lines. Ids are
/// remapped to dense indices in order of first appearance.
pub fn load_movielens<T: Scalar>(path: &Path) -> Result<RatingsData<T>, DataError> {
    let bytes = read_file(path)?;
    let text = String::from_utf8_lossy(&bytes);
    let mut user_ids: Vec<u64> = Vec::new();
    let mut movie_ids: Vec<u64> = Vec::new();
    let mut user_map = std::collections::HashMap::new();
    let mut movie_map = std::collections::HashMap::new();
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split("::");
        let err = |message: String| DataError::Format {
            path: path.display().to_string(),
            position: format!("line {}", lineno + 1),
            message,
        };
        let user: u64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("bad user id".into()))?;
        let movie: u64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("bad movie id".into()))?;
        let rating: f64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("bad rating".into()))?;
        let row = *user_map.entry(user).or_insert_with(|| {
            user_ids.push(user);
            user_ids.len() - 1
        });
        let col = *movie_map.entry(movie).or_insert_with(|| {
            movie_ids.push(movie);
            movie_ids.len() - 1
        });
        entries.push((row as u32, col as u32, cast(rating)));
    }
    Ok(RatingsData {
        rows: user_ids.len(),
        cols: movie_ids.len(),
        entries,
    })
}

/// Bag-of-tokens corpus: each document is a sequence of vocabulary ids.
#[derive(Debug)]
pub struct Corpus {
    pub vocab: usize,
    pub docs: Vec<Vec<u32>>,
}

impl Corpus {
    pub fn total_tokens(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }
}

/// Generative LDA corpus: topic-word rows ~ Dirichlet(beta), per-document
/// topic mixtures ~ Dirichlet(alpha).
pub fn synth_lda_corpus(
    docs: usize,
    vocab: usize,
    topics: usize,
    doc_len: usize,
    alpha: f64,
    beta: f64,
    seed: u64,
) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let word_dist = Dirichlet::new(&vec![beta; vocab]).unwrap();
    let topic_dist = Dirichlet::new(&vec![alpha; topics]).unwrap();
    let topic_words: Vec<Vec<f64>> = (0..topics).map(|_| word_dist.sample(&mut rng)).collect();
    let mut out = Vec::with_capacity(docs);
    for _ in 0..docs {
        let mix = topic_dist.sample(&mut rng);
        let mut doc = Vec::with_capacity(doc_len);
        for _ in 0..doc_len {
            let k = sample_categorical(&mix, rng.gen::<f64>());
            let w = sample_categorical(&topic_words[k], rng.gen::<f64>());
            doc.push(w as u32);
        }
        out.push(doc);
    }
    Corpus { vocab, docs: out }
}

/// Parse a corpus with one document per line, whitespace-separated integer
/// token ids. The vocabulary size is max id + 1.
pub fn load_corpus(path: &Path) -> Result<Corpus, DataError> {
    let bytes = read_file(path)?;
    let text = String::from_utf8_lossy(&bytes);
    let mut docs = Vec::new();
    let mut vocab = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let mut doc = Vec::new();
        for tok in line.split_whitespace() {
            let id: u32 = tok.parse().map_err(|_| DataError::Format {
                path: path.display().to_string(),
                position: format!("line {}", lineno + 1),
                message: format!("bad token id {tok:?}"),
            })?;
            vocab = vocab.max(id as usize + 1);
            doc.push(id);
        }
        if !doc.is_empty() {
            docs.push(doc);
        }
    }
    Ok(Corpus { vocab, docs })
}

/// Index of the category selected by uniform variate `u` in [0, 1) against
/// normalized weights.
fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
