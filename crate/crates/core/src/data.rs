//! Synthetic datasets, Dirichlet label partitioning, train/test splits and the
//! on-disk dataset format.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const DATASET_MAGIC: &[u8; 8] = b"REEFLDS1";
const HEADER_LEN: usize = 8 + 5 * 4;
const MAX_REDRAWS: usize = 100;

/// Image `[C, H, W]` with pixels in `[0, 1]` and its label.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<F = f32> {
    pub image: Tensor<F>,
    pub label: usize,
}

impl<F: Scalar> Example<F> {
    pub fn cast<G: Scalar>(&self) -> Example<G> {
        Example {
            image: self.image.cast(),
            label: self.label,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub image_size: usize,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 100,
            channels: 1,
            image_size: 8,
            noise: 0.5,
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Class-conditional images: a random base pattern per class plus Gaussian
/// noise, clamped and quantized to 8 bits. Examples are grouped by class.
pub fn synth_dataset(spec: &SynthSpec, rng: &mut impl Rng) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Config("synthetic dataset needs at least 2 classes".into()));
    }
    if spec.channels == 0 || spec.image_size == 0 || !(spec.noise >= 0.0) {
        return Err(Error::Config("invalid synthetic image spec".into()));
    }
    let pixels = spec.channels * spec.image_size * spec.image_size;
    let bases: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..pixels).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut examples = Vec::with_capacity(spec.classes * spec.per_class);
    for (label, base) in bases.iter().enumerate() {
        for _ in 0..spec.per_class {
            let data = base
                .iter()
                .map(|b| {
                    let v = b + spec.noise * normal.sample(rng);
                    quantize(v) as f32 / 255.0
                })
                .collect();
            let image = Tensor::new(vec![spec.channels, spec.image_size, spec.image_size], data)?;
            examples.push(Example { image, label });
        }
    }
    Ok(Dataset {
        classes: spec.classes,
        channels: spec.channels,
        height: spec.image_size,
        width: spec.image_size,
        examples,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionSpec {
    pub num_clients: usize,
    /// Dirichlet concentration.
    pub alpha: f64,
    pub seed: u64,
}

/// Log of a `Dir(α·1_k)` draw. Sampled via `Gamma(α+1)·U^{1/α}` in log space
/// so that small `α` does not underflow to exact zeros.
pub fn log_dirichlet(alpha: f64, k: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Partition(format!("alpha must be positive, got {alpha}")));
    }
    let gamma = Gamma::new(alpha + 1.0, 1.0).map_err(|e| Error::Partition(e.to_string()))?;
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let norm = log_sum_exp(&logs);
    Ok(logs.into_iter().map(|l| l - norm).collect())
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Label-skewed partition: each client draws class proportions from
/// `Dir(α)`, each class's proportions are normalized across clients, and every
/// example goes to a client drawn from its class's distribution. Clients left
/// empty redraw their proportions.
pub fn lda_partition(labels: &[usize], spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    let c = spec.num_clients;
    if c == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if labels.len() < c {
        return Err(Error::Partition(format!(
            "{} examples cannot cover {c} clients",
            labels.len()
        )));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut props: Vec<Vec<f64>> = (0..c)
        .map(|_| log_dirichlet(spec.alpha, k, &mut rng))
        .collect::<Result<_>>()?;
    for _ in 0..=MAX_REDRAWS {
        let weights: Vec<Vec<f64>> = (0..k)
            .map(|class| {
                let col: Vec<f64> = props.iter().map(|p| p[class]).collect();
                let norm = log_sum_exp(&col);
                col.iter().map(|l| (l - norm).exp()).collect()
            })
            .collect();
        let mut parts = vec![Vec::new(); c];
        for (i, &label) in labels.iter().enumerate() {
            parts[categorical(&weights[label], &mut rng)].push(i);
        }
        let empty: Vec<usize> = (0..c).filter(|&i| parts[i].is_empty()).collect();
        if empty.is_empty() {
            return Ok(parts);
        }
        for i in empty {
            props[i] = log_dirichlet(spec.alpha, k, &mut rng)?;
        }
    }
    Err(Error::Partition(format!(
        "some client stayed empty after {MAX_REDRAWS} redraws"
    )))
}

fn categorical(weights: &[f64], rng: &mut impl Rng) -> usize {
    let mut u: f64 = rng.random_range(0.0..1.0);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(weights.len() - 1)
}

/// Shuffles and splits into `⌈ratio·n⌉` train items and the remainder, keeping
/// at least one item on each side.
pub fn split_train_test<T>(mut items: Vec<T>, ratio: f64, rng: &mut impl Rng) -> Result<(Vec<T>, Vec<T>)> {
    let n = items.len();
    if n < 2 {
        return Err(Error::Split(format!("need at least 2 examples, got {n}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Split(format!("ratio {ratio} outside (0, 1)")));
    }
    let train = ((ratio * n as f64 - 1e-9).ceil() as usize).clamp(1, n - 1);
    items.shuffle(rng);
    let test = items.split_off(train);
    Ok((items, test))
}

/// Serializes to the `REEFLDS1` format: little-endian `u32` header
/// `K, C, H, W, N`, then per record a `u32` label and `H·W·C` bytes in
/// channel-interleaved row-major order.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let pixels = ds.channels * ds.height * ds.width;
    let mut out = Vec::with_capacity(HEADER_LEN + ds.examples.len() * (4 + pixels));
    out.extend_from_slice(DATASET_MAGIC);
    for v in [ds.classes, ds.channels, ds.height, ds.width, ds.examples.len()] {
        out.extend_from_slice(&u32_of(v)?.to_le_bytes());
    }
    for ex in &ds.examples {
        if ex.image.shape() != [ds.channels, ds.height, ds.width] {
            return Err(Error::shape(
                "encode_dataset",
                format!(
                    "image {:?} in a [{}, {}, {}] dataset",
                    ex.image.shape(),
                    ds.channels,
                    ds.height,
                    ds.width
                ),
            ));
        }
        if ex.label >= ds.classes {
            return Err(Error::Input(format!("label {} >= {} classes", ex.label, ds.classes)));
        }
        out.extend_from_slice(&u32_of(ex.label)?.to_le_bytes());
        let data = ex.image.data();
        let hw = ds.height * ds.width;
        for p in 0..hw {
            for ch in 0..ds.channels {
                out.push(quantize(data[ch * hw + p] as f64));
            }
        }
    }
    Ok(out)
}

fn u32_of(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Input(format!("{v} does not fit in 32 bits")))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            detail: format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        });
    }
    if &bytes[..8] != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic".into(),
        });
    }
    let read = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
    let (classes, channels, height, width, n) = (read(8), read(12), read(16), read(20), read(24));
    let pixels = channels * height * width;
    let expected = HEADER_LEN as u64 + n as u64 * (4 + pixels as u64);
    if bytes.len() as u64 != expected {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            detail: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let hw = height * width;
    let mut examples = Vec::with_capacity(n);
    let mut off = HEADER_LEN;
    for _ in 0..n {
        let label = read(off);
        if label >= classes {
            return Err(Error::Format {
                offset: off as u64,
                detail: format!("label {label} >= {classes} classes"),
            });
        }
        off += 4;
        let mut data = vec![0f32; pixels];
        for p in 0..hw {
            for ch in 0..channels {
                data[ch * hw + p] = bytes[off + p * channels + ch] as f32 / 255.0;
            }
        }
        off += pixels;
        examples.push(Example {
            image: Tensor::new(vec![channels, height, width], data)?,
            label,
        });
    }
    Ok(Dataset {
        classes,
        channels,
        height,
        width,
        examples,
    })
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    std::fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}

/// CSV with header `client_id,example_index`, one row per assignment.
pub fn write_manifest(mut w: impl Write, parts: &[Vec<usize>]) -> Result<()> {
    writeln!(w, "client_id,example_index")?;
    for (client, idx) in parts.iter().enumerate() {
        for i in idx {
            writeln!(w, "{client},{i}")?;
        }
    }
    Ok(())
}
