//! Synthetic paired image/caption data with latent classes, controlled
//! caption-shuffling noise, and a JSON-lines file format.
//!
//! Every class owns a mean direction in region-feature space and a slice of
//! the vocabulary. A caption is a bag of tokens from its class slice. The
//! paired image's regions are the class mean plus an instance signal derived
//! from the caption's tokens plus Gaussian noise, so retrieval is learnable
//! beyond the class level.
//!
//! Randomness: one `ChaCha8Rng` per purpose, all seeded with the spec seed
//! and separated by stream id ([`STREAM_CLASS_MEANS`] .. [`STREAM_NOISE`]).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "ncl-dataset";
pub const DATASET_VERSION: u32 = 1;

pub const STREAM_CLASS_MEANS: u64 = 0;
pub const STREAM_TOKEN_SIGNATURES: u64 = 1;
pub const STREAM_TRAIN: u64 = 2;
pub const STREAM_VAL: u64 = 3;
pub const STREAM_TEST: u64 = 4;
pub const STREAM_NOISE: u64 = 5;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Norm of each class mean in region-feature space.
    pub class_separation: f64,
    pub tokens_per_caption: usize,
    pub vocab_size: usize,
    pub d_img_in: usize,
    pub regions_per_image: usize,
    /// Scale of the caption-specific component of each image.
    pub instance_scale: f64,
    /// Standard deviation of per-region Gaussian noise.
    pub region_noise: f64,
    pub noise_ratio: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 16,
            n_train: 2000,
            n_val: 200,
            n_test: 200,
            class_separation: 2.0,
            tokens_per_caption: 6,
            vocab_size: 256,
            d_img_in: 16,
            regions_per_image: 4,
            instance_scale: 1.0,
            region_noise: 0.5,
            noise_ratio: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn tokens_per_class(&self) -> usize {
        self.vocab_size / self.n_classes.max(1)
    }

    /// Checks every field; error paths are relative to this struct.
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config("n_classes", "must be >= 2"));
        }
        for (name, v) in [
            ("n_train", self.n_train),
            ("n_val", self.n_val),
            ("n_test", self.n_test),
            ("tokens_per_caption", self.tokens_per_caption),
            ("d_img_in", self.d_img_in),
            ("regions_per_image", self.regions_per_image),
        ] {
            if v < 1 {
                return Err(Error::config(name, "must be >= 1"));
            }
        }
        if self.tokens_per_class() < 2 {
            return Err(Error::config(
                "vocab_size",
                format!(
                    "vocabulary of {} is too small for {} classes (need >= 2 tokens per class)",
                    self.vocab_size, self.n_classes
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.noise_ratio) {
            return Err(Error::config("noise_ratio", "must lie in [0, 1)"));
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("instance_scale", self.instance_scale),
            ("region_noise", self.region_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, "must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// One image/caption pair. `c` is ground truth for evaluation only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub id: u64,
    pub regions: Vec<Vec<f64>>,
    pub tokens: Vec<u32>,
    /// Latent class of the image.
    pub latent_class: u32,
    /// Latent class of the caption currently attached.
    pub caption_class: u32,
    /// Id of the pair this caption was generated for.
    pub caption_id: u64,
    pub c: u8,
}

impl PairRecord {
    pub fn is_matched(&self) -> bool {
        self.c == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format: String,
    pub version: u32,
    pub spec: SyntheticSpec,
    /// Fraction of train pairs with `c = 0`, rounded to 4 decimals.
    pub realized_noise_ratio: f64,
    /// Number of train captions reassigned by noise injection.
    pub moved_captions: usize,
    /// A single selected index was swapped with an unselected one.
    pub swap_fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub meta: DatasetMeta,
    pub train: Vec<PairRecord>,
    pub val: Vec<PairRecord>,
    pub test: Vec<PairRecord>,
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Generates all three splits with every pair matched (`c = 1`).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let d = spec.d_img_in;
    let mut rng = stream_rng(spec.seed, STREAM_CLASS_MEANS);
    let means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            random_unit(&mut rng, d)
                .into_iter()
                .map(|x| x * spec.class_separation)
                .collect()
        })
        .collect();
    let mut rng = stream_rng(spec.seed, STREAM_TOKEN_SIGNATURES);
    let signatures: Vec<Vec<f64>> = (0..spec.vocab_size)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let per_class = spec.tokens_per_class();
    let inst_scale = spec.instance_scale / (spec.tokens_per_caption as f64).sqrt();

    let mut next_id = 0u64;
    let mut make_split = |n: usize, stream: u64| -> Vec<PairRecord> {
        let mut rng = stream_rng(spec.seed, stream);
        (0..n)
            .map(|i| {
                let class = i % spec.n_classes;
                let tokens: Vec<u32> = (0..spec.tokens_per_caption)
                    .map(|_| (class * per_class + rng.random_range(0..per_class)) as u32)
                    .collect();
                let mut instance = vec![0.0; d];
                for &t in &tokens {
                    for (v, s) in instance.iter_mut().zip(&signatures[t as usize]) {
                        *v += s * inst_scale;
                    }
                }
                let regions = (0..spec.regions_per_image)
                    .map(|_| {
                        (0..d)
                            .map(|j| {
                                let eps: f64 = StandardNormal.sample(&mut rng);
                                means[class][j] + instance[j] + spec.region_noise * eps
                            })
                            .collect()
                    })
                    .collect();
                let id = next_id;
                next_id += 1;
                PairRecord {
                    id,
                    regions,
                    tokens,
                    latent_class: class as u32,
                    caption_class: class as u32,
                    caption_id: id,
                    c: 1,
                }
            })
            .collect()
    };
    let train = make_split(spec.n_train, STREAM_TRAIN);
    let val = make_split(spec.n_val, STREAM_VAL);
    let test = make_split(spec.n_test, STREAM_TEST);
    Ok(DatasetBundle {
        meta: DatasetMeta {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            spec: SyntheticSpec {
                noise_ratio: 0.0,
                ..spec.clone()
            },
            realized_noise_ratio: 0.0,
            moved_captions: 0,
            swap_fallback: false,
        },
        train,
        val,
        test,
    })
}

fn move_caption(records: &mut [PairRecord], from: &[(Vec<u32>, u32, u64)], to: usize, src: usize) {
    let (tokens, class, id) = &from[src];
    let r = &mut records[to];
    r.tokens = tokens.clone();
    r.caption_class = *class;
    r.caption_id = *id;
    r.c = u8::from(r.caption_class == r.latent_class);
}

/// Reassigns the captions of `floor(rho * N)` uniformly chosen train pairs by
/// a uniformly random derangement among themselves. With exactly one selected
/// pair, its caption is swapped with a random unselected pair instead.
pub fn inject_noise(bundle: &DatasetBundle, rho: f64, seed: u64) -> Result<DatasetBundle> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::config("noise_ratio", "must lie in [0, 1)"));
    }
    let mut out = bundle.clone();
    let n = out.train.len();
    let k = (rho * n as f64).floor() as usize;
    let mut rng = stream_rng(seed, STREAM_NOISE);
    let captions: Vec<(Vec<u32>, u32, u64)> = out
        .train
        .iter()
        .map(|r| (r.tokens.clone(), r.caption_class, r.caption_id))
        .collect();
    let mut moved = 0;
    let mut fallback = false;
    if k == 1 {
        let chosen = rng.random_range(0..n);
        let mut other = rng.random_range(0..n - 1);
        if other >= chosen {
            other += 1;
        }
        move_caption(&mut out.train, &captions, chosen, other);
        move_caption(&mut out.train, &captions, other, chosen);
        moved = 2;
        fallback = true;
    } else if k >= 2 {
        let selected = index::sample(&mut rng, n, k).into_vec();
        let mut perm: Vec<usize> = (0..k).collect();
        loop {
            perm.shuffle(&mut rng);
            if perm.iter().enumerate().all(|(i, &p)| i != p) {
                break;
            }
        }
        for (i, &p) in perm.iter().enumerate() {
            move_caption(&mut out.train, &captions, selected[i], selected[p]);
        }
        moved = k;
    }
    let mismatched = out.train.iter().filter(|r| r.c == 0).count();
    out.meta.spec.noise_ratio = rho;
    out.meta.spec.seed = bundle.meta.spec.seed;
    out.meta.moved_captions = moved;
    out.meta.swap_fallback = fallback;
    out.meta.realized_noise_ratio = if n == 0 {
        0.0
    } else {
        round4(mismatched as f64 / n as f64)
    };
    Ok(out)
}

/// Generation followed by noise injection at `spec.noise_ratio`, both driven
/// by `spec.seed`.
pub fn build_dataset(spec: &SyntheticSpec) -> Result<DatasetBundle> {
    let clean = generate_synthetic(spec)?;
    inject_noise(&clean, spec.noise_ratio, spec.seed)
}

#[derive(Serialize, Deserialize)]
struct RecordLine<'a> {
    split: std::borrow::Cow<'a, str>,
    #[serde(flatten)]
    record: std::borrow::Cow<'a, PairRecord>,
}

pub fn write_dataset<W: Write>(bundle: &DatasetBundle, mut out: W) -> Result<()> {
    serde_json::to_writer(&mut out, &bundle.meta).map_err(std::io::Error::other)?;
    out.write_all(b"\n")?;
    for (split, records) in [
        ("train", &bundle.train),
        ("val", &bundle.val),
        ("test", &bundle.test),
    ] {
        for r in records {
            let line = RecordLine {
                split: split.into(),
                record: std::borrow::Cow::Borrowed(r),
            };
            serde_json::to_writer(&mut out, &line).map_err(std::io::Error::other)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<DatasetBundle> {
    let mut lines = input.lines().enumerate();
    let parse_err = |line: usize, message: String| Error::Parse { line, message };
    let (_, first) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file, expected metadata line".into()))?;
    let first = first?;
    let raw: serde_json::Value =
        serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    if let Some(v) = raw.get("version").and_then(|v| v.as_u64()) {
        if v as u32 != DATASET_VERSION {
            return Err(Error::Version {
                found: v as u32,
                supported: DATASET_VERSION,
            });
        }
    }
    let meta: DatasetMeta = serde_json::from_value(raw).map_err(|e| parse_err(1, e.to_string()))?;
    if meta.format != DATASET_FORMAT {
        return Err(parse_err(
            1,
            format!("unknown format tag {:?}", meta.format),
        ));
    }
    let mut bundle = DatasetBundle {
        meta,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let rec: RecordLine<'static> =
            serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        let r = rec.record.into_owned();
        if r.tokens.is_empty() {
            return Err(parse_err(line_no, "record has no tokens".into()));
        }
        if r.c != u8::from(r.caption_class == r.latent_class) {
            return Err(parse_err(
                line_no,
                "correspondence flag disagrees with latent classes".into(),
            ));
        }
        match rec.split.as_ref() {
            "train" => bundle.train.push(r),
            "val" => bundle.val.push(r),
            "test" => bundle.test.push(r),
            other => return Err(parse_err(line_no, format!("unknown split {other:?}"))),
        }
    }
    Ok(bundle)
}

pub fn save_dataset(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    write_dataset(bundle, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: &Path) -> Result<DatasetBundle> {
    read_dataset(BufReader::new(File::open(path)?))
}
