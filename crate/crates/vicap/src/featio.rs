//! Feature/caption file formats, vocabulary, manifests, and the synthetic
//! dataset generator used for desk-scale verification.
//!
//! File formats (all little-endian, all diff-able where textual):
//! - `VFX1` feature files: magic "VFX1", five u32s `n, Dt, Da, m, Do`, then
//!   f32 payload: temporal row-major, audio, objects row-major.
//! - manifest: first line `Dt\tDa\tDo`, then `video_id\trelative-path`.
//! - captions: one record per line, `video_id\tcaption\tcaption…`.
//! - vocabulary: one token per line, line number = id.

use crate::util::{crc32, seeded_rng};
use crate::{Error, Result};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Row-major f32 matrix, the storage type for raw features.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat32 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Mat32 {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}×{cols} wants {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Mat32 { rows, cols, data })
    }

    pub fn empty(cols: usize) -> Self {
        Mat32 {
            rows: 0,
            cols,
            data: Vec::new(),
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Raw per-video inputs as produced by the upstream feature extractors.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFeatures {
    pub video_id: String,
    /// n × Dt, one row per segment (image‖motion concatenated upstream).
    pub temporal: Mat32,
    /// Da acoustic features.
    pub audio: Vec<f32>,
    /// m × Do object features; m may be zero.
    pub objects: Mat32,
}

impl VideoFeatures {
    pub fn validate(&self) -> Result<()> {
        if self.temporal.rows == 0 {
            return Err(Error::Value(format!(
                "{}: need at least one temporal segment",
                self.video_id
            )));
        }
        let finite = self.temporal.data.iter().all(|x| x.is_finite())
            && self.audio.iter().all(|x| x.is_finite())
            && self.objects.data.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::Value(format!(
                "{}: non-finite feature value",
                self.video_id
            )));
        }
        Ok(())
    }
}

const VFX_MAGIC: &[u8; 4] = b"VFX1";

pub fn write_feature_file(v: &VideoFeatures, path: &Path) -> Result<()> {
    v.validate()?;
    let mut buf = Vec::with_capacity(
        24 + 4 * (v.temporal.data.len() + v.audio.len() + v.objects.data.len()),
    );
    buf.extend_from_slice(VFX_MAGIC);
    for dim in [
        v.temporal.rows,
        v.temporal.cols,
        v.audio.len(),
        v.objects.rows,
        v.objects.cols,
    ] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for x in v
        .temporal
        .data
        .iter()
        .chain(v.audio.iter())
        .chain(v.objects.data.iter())
    {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_feature_file(path: &Path) -> Result<VideoFeatures> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if buf.len() < 24 {
        return Err(Error::Length(format!(
            "{}: truncated header ({} bytes)",
            path.display(),
            buf.len()
        )));
    }
    if &buf[..4] != VFX_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}",
            path.display(),
            &buf[..4]
        )));
    }
    let u = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (n, dt, da, m, d_o) = (u(0), u(1), u(2), u(3), u(4));
    let want = n * dt + da + m * d_o;
    if buf.len() != 24 + 4 * want {
        return Err(Error::Length(format!(
            "{}: payload wants {} reals, file holds {} bytes past header",
            path.display(),
            want,
            buf.len() - 24
        )));
    }
    let mut reals = Vec::with_capacity(want);
    for i in 0..want {
        let off = 24 + 4 * i;
        reals.push(f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()));
    }
    let objects = reals.split_off(n * dt + da);
    let audio = reals.split_off(n * dt);
    let video_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let v = VideoFeatures {
        video_id,
        temporal: Mat32::new(n, dt, reals)?,
        audio,
        objects: Mat32::new(m, d_o, objects)?,
    };
    v.validate()?;
    Ok(v)
}

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Token↔id mapping with the four fixed specials at ids 0–3.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let lookup = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, lookup }
    }

    /// Tokens with corpus frequency ≥ min_count, ordered by frequency
    /// descending then lexicographically, after the four specials.
    pub fn build(captions: &[String], min_count: usize) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::Value("empty caption corpus".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for c in captions {
            for t in tokenize(c) {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(kept.into_iter().map(|(t, _)| t));
        Ok(Self::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.lookup.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// [BOS] + token ids (OOV → UNK) + [EOS].
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(tokenize(text).iter().map(|t| self.id(t).unwrap_or(UNK)));
        ids.push(EOS);
        ids
    }

    /// Inverse of encode for in-vocabulary text: specials are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Content tokens (no specials) as strings, for metric evaluation.
    pub fn content_tokens(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .filter_map(|&id| self.token(id))
            .map(str::to_string)
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.tokens.join("\n") + "\n";
        fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let tokens: Vec<String> = body.lines().map(str::to_string).collect();
        if tokens.len() < 4 || tokens[..4] != SPECIALS.map(str::to_string) {
            return Err(Error::Format(format!(
                "{}: vocabulary must start with the four specials",
                path.display()
            )));
        }
        Ok(Self::from_tokens(tokens))
    }

    /// Stable content hash, stored in checkpoints to catch vocab mismatches.
    pub fn hash(&self) -> u32 {
        crc32(self.tokens.join("\n").as_bytes())
    }
}

/// Ground-truth captions for one video, already encoded (BOS…EOS).
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRecord {
    pub video_id: String,
    pub captions: Vec<Vec<u32>>,
}

impl CaptionRecord {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.captions.is_empty() {
            return Err(Error::Value(format!("{}: no captions", self.video_id)));
        }
        for c in &self.captions {
            if c.len() < 2 || c[0] != BOS || *c.last().unwrap() != EOS {
                return Err(Error::Value(format!(
                    "{}: caption must be BOS…EOS",
                    self.video_id
                )));
            }
            if c.iter().any(|&id| id as usize >= vocab_size) {
                return Err(Error::Value(format!(
                    "{}: token id out of vocabulary",
                    self.video_id
                )));
            }
        }
        Ok(())
    }
}

/// Write caption text records: `video_id TAB caption TAB caption …`.
pub fn write_caption_file(records: &[(String, Vec<String>)], path: &Path) -> Result<()> {
    let mut out = String::new();
    for (id, caps) in records {
        out.push_str(id);
        for c in caps {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_caption_file(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let id = parts.next().unwrap().to_string();
        let caps: Vec<String> = parts.map(str::to_string).collect();
        if caps.is_empty() {
            return Err(Error::Format(format!(
                "{}:{}: record without captions",
                path.display(),
                lineno + 1
            )));
        }
        out.push((id, caps));
    }
    Ok(out)
}

/// Split manifest: feature dimensions plus (video_id, feature path) entries.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub split: String,
    pub dims: (usize, usize, usize),
    pub entries: Vec<(String, PathBuf)>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("{}\t{}\t{}\n", self.dims.0, self.dims.1, self.dims.2);
        for (id, rel) in &self.entries {
            out.push_str(&format!("{}\t{}\n", id, rel.display()));
        }
        fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Load and validate: unique ids, every path resolvable relative to the
    /// manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut lines = body.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format(format!("{}: empty manifest", path.display())))?;
        let dims: Vec<usize> = header
            .split('\t')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("{}: bad dimensions header", path.display())))?;
        if dims.len() != 3 {
            return Err(Error::Format(format!(
                "{}: header must be Dt\\tDa\\tDo",
                path.display()
            )));
        }
        let mut seen = HashMap::new();
        let mut entries = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let (id, rel) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!("{}:{}: bad manifest line", path.display(), lineno + 2))
            })?;
            if seen.insert(id.to_string(), ()).is_some() {
                return Err(Error::Format(format!(
                    "{}: duplicate video id {id:?}",
                    path.display()
                )));
            }
            let full = base.join(rel);
            if !full.exists() {
                return Err(Error::Format(format!(
                    "{}: feature file {} not found",
                    path.display(),
                    full.display()
                )));
            }
            entries.push((id.to_string(), PathBuf::from(rel)));
        }
        let split = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(DatasetManifest { split, dims: (dims[0], dims[1], dims[2]), entries })
    }
}

/// One fully loaded video: features plus its encoded reference captions.
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub features: VideoFeatures,
    pub refs: Vec<Vec<u32>>,
}

/// In-memory dataset ready for training and evaluation.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dims: (usize, usize, usize),
    pub vocab: Vocabulary,
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    /// Load `manifest.tsv`, `captions.tsv` and `vocab.txt` from a directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(&dir.join("manifest.tsv"))?;
        let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
        let caption_text = read_caption_file(&dir.join("captions.tsv"))?;
        let by_id: HashMap<&str, &Vec<String>> =
            caption_text.iter().map(|(id, c)| (id.as_str(), c)).collect();
        let mut items = Vec::with_capacity(manifest.entries.len());
        for (id, rel) in &manifest.entries {
            let features = read_feature_file(&dir.join(rel))?;
            if features.temporal.cols != manifest.dims.0
                || features.audio.len() != manifest.dims.1
                || (features.objects.rows > 0 && features.objects.cols != manifest.dims.2)
            {
                return Err(Error::Shape(format!(
                    "{id}: feature dims do not match manifest header"
                )));
            }
            let caps = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::Format(format!("no captions for video {id:?}")))?;
            let refs: Vec<Vec<u32>> = caps.iter().map(|c| vocab.encode(c)).collect();
            let record = CaptionRecord {
                video_id: id.clone(),
                captions: refs.clone(),
            };
            record.validate(vocab.len())?;
            items.push(DatasetItem {
                features: VideoFeatures { video_id: id.clone(), ..features },
                refs,
            });
        }
        Ok(Dataset {
            dims: manifest.dims,
            vocab,
            items,
        })
    }

    /// Reference captions as content-token strings, aligned with `items`.
    pub fn reference_tokens(&self) -> Vec<Vec<Vec<String>>> {
        self.items
            .iter()
            .map(|it| {
                it.refs
                    .iter()
                    .map(|r| self.vocab.content_tokens(r))
                    .collect()
            })
            .collect()
    }
}

/// Configuration for the synthetic concept-sequence dataset.
#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub num_concepts: usize,
    pub dt: usize,
    pub da: usize,
    pub d_obj: usize,
    pub noise_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_videos: 32,
            num_concepts: 10,
            dt: 12,
            da: 6,
            d_obj: 12,
            noise_scale: 0.05,
        }
    }
}

/// Deterministic synthetic dataset. Each video draws 2–4 concepts; temporal
/// rows and object rows are the concept prototypes plus Gaussian noise, the
/// audio vector is the prototype mean plus noise, and the caption is the
/// concept letters in drawn order. The caption is thus a deterministic
/// function of the noiseless features.
pub fn synth_generate(cfg: &SynthConfig, seed: u64, out_dir: &Path) -> Result<Dataset> {
    if cfg.num_concepts < 2 || cfg.num_concepts > 26 {
        return Err(Error::Value("num_concepts must be in 2..=26".into()));
    }
    if cfg.num_videos == 0 || cfg.dt == 0 || cfg.da == 0 || cfg.d_obj == 0 {
        return Err(Error::Value("num_videos and all dims must be positive".into()));
    }
    fs::create_dir_all(out_dir.join("features"))
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut rng = seeded_rng(seed);
    let proto = |rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize| -> Vec<Vec<f32>> {
        (0..rows)
            .map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0) as f32).collect())
            .collect()
    };
    let proto_t = proto(&mut rng, cfg.num_concepts, cfg.dt);
    let proto_a = proto(&mut rng, cfg.num_concepts, cfg.da);
    let proto_o = proto(&mut rng, cfg.num_concepts, cfg.d_obj);
    let noisy = |rng: &mut rand_chacha::ChaCha8Rng, base: f64| -> f32 {
        let g: f64 = StandardNormal.sample(rng);
        (base + g * cfg.noise_scale) as f32
    };

    let mut caption_records = Vec::new();
    let mut manifest_entries = Vec::new();
    for vi in 0..cfg.num_videos {
        let k = rng.gen_range(2..=4usize.min(cfg.num_concepts));
        let concepts: Vec<usize> = sample(&mut rng, cfg.num_concepts, k).into_vec();
        let mut temporal = Vec::with_capacity(k * cfg.dt);
        for &c in &concepts {
            for &p in &proto_t[c] {
                temporal.push(noisy(&mut rng, p as f64));
            }
        }
        let audio: Vec<_> = (0..cfg.da)
            .map(|j| {
                let mean: f64 =
                    concepts.iter().map(|&c| proto_a[c][j] as f64).sum::<f64>() / k as f64;
                noisy(&mut rng, mean)
            })
            .collect();
        let mut objects = Vec::with_capacity(k * cfg.d_obj);
        for &c in &concepts {
            for &p in &proto_o[c] {
                objects.push(noisy(&mut rng, p as f64));
            }
        }
        let video_id = format!("vid_{vi:04}");
        let caption = concepts
            .iter()
            .map(|&c| ((b'a' + c as u8) as char).to_string())
            .collect::<Vec<_>>()
            .join(" ");
        let features = VideoFeatures {
            video_id: video_id.clone(),
            temporal: Mat32::new(k, cfg.dt, temporal)?,
            audio,
            objects: Mat32::new(k, cfg.d_obj, objects)?,
        };
        let rel = PathBuf::from("features").join(format!("{video_id}.vfx"));
        write_feature_file(&features, &out_dir.join(&rel))?;
        manifest_entries.push((video_id.clone(), rel));
        caption_records.push((video_id, vec![caption]));
    }

    let manifest = DatasetManifest {
        split: "manifest".into(),
        dims: (cfg.dt, cfg.da, cfg.d_obj),
        entries: manifest_entries,
    };
    manifest.save(&out_dir.join("manifest.tsv"))?;
    write_caption_file(&caption_records, &out_dir.join("captions.tsv"))?;
    let texts: Vec<String> = caption_records
        .iter()
        .flat_map(|(_, caps)| caps.iter().cloned())
        .collect();
    let vocab = Vocabulary::build(&texts, 1)?;
    vocab.save(&out_dir.join("vocab.txt"))?;
    Dataset::load(out_dir)
}

/// Write a snapshot of a flat key-value config next to outputs.
pub fn write_config_snapshot(pairs: &[(String, String)], path: &Path) -> Result<()> {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(&format!("{k}={v}\n"));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}
