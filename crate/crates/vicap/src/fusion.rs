//! Visual-semantic embedding (VSE) and candidate-caption reranking.
//!
//! Videos and sentences map into a shared L2-normalized space; training
//! pulls matched pairs together with a hard-negative triplet ranking loss.
//! At fusion time the candidate captions produced by the temporal and
//! spatial branches are scored by cosine similarity to the video and the
//! best one is kept.

use crate::decoder::LstmIds;
use crate::diffcore::{
    adam_step, glorot, AdamHyper, AdamState, ParamStore, Tape, Tensor, Var,
};
use crate::encoder::global_raw;
use crate::featio::{Dataset, VideoFeatures, Vocabulary};
use crate::train::{Checkpoint, LogEntry};
use crate::util::seeded_rng;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;

pub const VSE_MARGIN: f64 = 0.2;
pub const VSE_DESK_EMBED: usize = 32;

#[derive(Debug, Clone)]
pub struct VseConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub clip: f64,
    pub embed: usize,
    pub margin: f64,
    pub log_every: u64,
}

impl Default for VseConfig {
    fn default() -> Self {
        VseConfig {
            lr: 1e-3,
            batch_size: 8,
            max_steps: 500,
            seed: 0,
            clip: 5.0,
            embed: VSE_DESK_EMBED,
            margin: VSE_MARGIN,
            log_every: 50,
        }
    }
}

impl VseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Value("vse batch size must be at least 2".into()));
        }
        if self.lr < 0.0 || self.margin < 0.0 || self.embed == 0 {
            return Err(Error::Value("lr, margin must be ≥ 0 and embed positive".into()));
        }
        Ok(())
    }
}

/// Parameter handles of both towers.
#[derive(Debug, Clone, Copy)]
pub struct VseIds {
    pub w_v: crate::diffcore::ParamId,
    pub b_v: crate::diffcore::ParamId,
    pub embed: crate::diffcore::ParamId,
    pub lstm: LstmIds,
    pub w_s: crate::diffcore::ParamId,
    pub b_s: crate::diffcore::ParamId,
    pub dim: usize,
}

pub struct VseModel {
    pub store: ParamStore,
    pub ids: VseIds,
    pub margin: f64,
    pub feature_dims: (usize, usize, usize),
    pub vocab_hash: u32,
    pub vocab_size: usize,
    pub step: u64,
}

impl VseModel {
    pub fn init(
        feature_dims: (usize, usize, usize),
        embed: usize,
        margin: f64,
        vocab: &Vocabulary,
        seed: u64,
    ) -> Result<Self> {
        let (dt, da, _) = feature_dims;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let ids = VseIds {
            w_v: store.register("vse.w_v", glorot(embed, dt + da, &mut rng))?,
            b_v: store.register("vse.b_v", Tensor::zeros(&[embed]))?,
            embed: store.register("vse.embed", glorot(vocab.len(), embed, &mut rng))?,
            lstm: LstmIds::init(&mut store, embed, embed, &mut rng, "vse.lstm")?,
            w_s: store.register("vse.w_s", glorot(embed, embed, &mut rng))?,
            b_s: store.register("vse.b_s", Tensor::zeros(&[embed]))?,
            dim: embed,
        };
        Ok(VseModel {
            store,
            ids,
            margin,
            feature_dims,
            vocab_hash: vocab.hash(),
            vocab_size: vocab.len(),
            step: 0,
        })
    }

    /// The same parameter handles over a replacement store (gradient
    /// probing wants to evaluate the model at perturbed parameters).
    pub fn with_store(&self, store: ParamStore) -> VseModel {
        VseModel {
            store,
            ids: self.ids,
            margin: self.margin,
            feature_dims: self.feature_dims,
            vocab_hash: self.vocab_hash,
            vocab_size: self.vocab_size,
            step: self.step,
        }
    }

    /// L2-normalized video embedding from the raw global feature.
    pub fn embed_video(&self, tape: &mut Tape, v: &VideoFeatures) -> Result<Var> {
        v.validate()?;
        let w = tape.param(&self.store, self.ids.w_v);
        let b = tape.param(&self.store, self.ids.b_v);
        let raw = tape.constant(Tensor::vector(global_raw(v)));
        let x = tape.affine(raw, w, b)?;
        tape.l2_normalize(x)
    }

    /// L2-normalized sentence embedding: word embeddings through an LSTM,
    /// final hidden state through a linear layer. Content tokens only;
    /// empty sentences are rejected.
    pub fn embed_sentence(&self, tape: &mut Tape, tokens: &[u32]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Value("cannot embed an empty sentence".into()));
        }
        let table = tape.param(&self.store, self.ids.embed);
        let lstm = self.ids.lstm.lease(tape, &self.store);
        let w_s = tape.param(&self.store, self.ids.w_s);
        let b_s = tape.param(&self.store, self.ids.b_s);
        let mut h = tape.constant(Tensor::zeros(&[self.ids.dim]));
        let mut c = tape.constant(Tensor::zeros(&[self.ids.dim]));
        for &tok in tokens {
            if tok as usize >= self.vocab_size {
                return Err(Error::Value(format!("token id {tok} out of vocabulary")));
            }
            let e = tape.embed_row(table, tok as usize)?;
            let (nh, nc) = tape.lstm_cell(e, h, c, lstm)?;
            h = nh;
            c = nc;
        }
        let x = tape.affine(h, w_s, b_s)?;
        tape.l2_normalize(x)
    }

    /// Cosine similarity (both embeddings are unit vectors).
    pub fn similarity(&self, v: &VideoFeatures, tokens: &[u32]) -> Result<f64> {
        let mut tape = Tape::new();
        let ve = self.embed_video(&mut tape, v)?;
        let se = self.embed_sentence(&mut tape, tokens)?;
        let d = tape.dot(ve, se)?;
        Ok(tape.value(d).item())
    }
}

/// Hard-negative triplet ranking loss over a batch of matched
/// (video, sentence) embedding pairs: for each pair, one hinge against the
/// hardest in-batch negative sentence and one against the hardest negative
/// video, margin `m`, mean over the batch.
pub fn vse_loss(tape: &mut Tape, videos: &[Var], sentences: &[Var], margin: f64) -> Result<Var> {
    if videos.len() != sentences.len() {
        return Err(Error::Shape("vse_loss: pair count mismatch".into()));
    }
    let n = videos.len();
    if n < 2 {
        return Err(Error::Value("vse_loss needs at least two pairs".into()));
    }
    let mut sims = vec![vec![None::<Var>; n]; n];
    let sim = |tape: &mut Tape, sims: &mut Vec<Vec<Option<Var>>>, i: usize, j: usize| -> Result<Var> {
        if sims[i][j].is_none() {
            sims[i][j] = Some(tape.dot(videos[i], sentences[j])?);
        }
        Ok(sims[i][j].unwrap())
    };
    let mut hinges = Vec::with_capacity(2 * n);
    for i in 0..n {
        let pos = sim(tape, &mut sims, i, i)?;
        // hardest negative sentence for video i (first index on ties)
        let mut best_j = usize::MAX;
        let mut best_val = f64::NEG_INFINITY;
        for j in 0..n {
            if j == i {
                continue;
            }
            let s = sim(tape, &mut sims, i, j)?;
            let v = tape.value(s).item();
            if v > best_val {
                best_val = v;
                best_j = j;
            }
        }
        let neg_s = sims[i][best_j].unwrap();
        let d1 = tape.sub(neg_s, pos);
        let d1m = tape.add_const(d1, margin);
        hinges.push(tape.relu(d1m));
        // hardest negative video for sentence i
        let mut best_k = usize::MAX;
        let mut best_val = f64::NEG_INFINITY;
        for k in 0..n {
            if k == i {
                continue;
            }
            let s = sim(tape, &mut sims, k, i)?;
            let v = tape.value(s).item();
            if v > best_val {
                best_val = v;
                best_k = k;
            }
        }
        let neg_v = sims[best_k][i].unwrap();
        let d2 = tape.sub(neg_v, pos);
        let d2m = tape.add_const(d2, margin);
        hinges.push(tape.relu(d2m));
    }
    let total = tape.sum_scalars(&hinges);
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Trains the VSE on matched (video, reference) pairs with shuffled
/// minibatches and one random reference per video per visit.
pub fn train_vse(data: &Dataset, cfg: &VseConfig, log: &mut Vec<LogEntry>) -> Result<VseModel> {
    cfg.validate()?;
    if data.items.len() < cfg.batch_size {
        return Err(Error::Value(format!(
            "dataset has {} items, need at least the batch size {}",
            data.items.len(),
            cfg.batch_size
        )));
    }
    let mut model = VseModel::init(data.dims, cfg.embed, cfg.margin, &data.vocab, cfg.seed)?;
    let mut rng = seeded_rng(cfg.seed ^ 0x75e_f00d);
    let mut adam = AdamState::new(&model.store);
    let hyper = AdamHyper {
        lr: cfg.lr,
        clip: cfg.clip,
        ..Default::default()
    };
    let refs = crate::train::reference_ids(&data.items);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0usize;
    for step in 1..=cfg.max_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor >= order.len() {
                order.clear();
                order.extend(0..data.items.len());
                order.shuffle(&mut rng);
                cursor = 0;
            }
            // a batch must not contain the same video twice: its own
            // sentence would otherwise appear as a "negative"
            if !batch.contains(&order[cursor]) {
                batch.push(order[cursor]);
            }
            cursor += 1;
        }
        let mut tape = Tape::new();
        let mut videos = Vec::with_capacity(batch.len());
        let mut sentences = Vec::with_capacity(batch.len());
        for &vi in &batch {
            videos.push(model.embed_video(&mut tape, &data.items[vi].features)?);
            let r = &refs[vi][rng.gen_range(0..refs[vi].len())];
            sentences.push(model.embed_sentence(&mut tape, r)?);
        }
        let loss = vse_loss(&mut tape, &videos, &sentences, cfg.margin)?;
        let loss_val = tape.value(loss).item();
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!("NaN vse loss at step {step}")));
        }
        tape.backward(loss, &mut model.store)?;
        adam_step(&mut model.store, &mut adam, &hyper)?;
        model.step = step;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log.push(LogEntry {
                step,
                loss: loss_val,
                reward: None,
            });
        }
    }
    Ok(model)
}

/// Index of the candidate most similar to the video; ties break toward the
/// lowest index. Empty candidates are skipped; at least one candidate must
/// be scoreable.
pub fn rerank(model: &VseModel, v: &VideoFeatures, candidates: &[Vec<u32>]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, cand) in candidates.iter().enumerate() {
        if cand.is_empty() {
            continue;
        }
        let s = model.similarity(v, cand)?;
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::Value("no non-empty candidate to rerank".into()))
}

/// Fraction of videos whose own sentence ranks first among all sentences.
pub fn recall_at_one(model: &VseModel, data: &Dataset) -> Result<f64> {
    let refs = crate::train::reference_ids(&data.items);
    let sentences: Vec<&Vec<u32>> = refs.iter().map(|r| &r[0]).collect();
    let mut hits = 0usize;
    for (i, item) in data.items.iter().enumerate() {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for (j, s) in sentences.iter().enumerate() {
            let sim = model.similarity(&item.features, s)?;
            if sim > best.1 {
                best = (j, sim);
            }
        }
        if best.0 == i {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.items.len() as f64)
}

pub fn vse_checkpoint(model: &VseModel) -> Checkpoint {
    let meta = vec![
        ("kind".into(), "vse".into()),
        ("step".into(), model.step.to_string()),
        ("vocab_hash".into(), model.vocab_hash.to_string()),
        ("vocab_size".into(), model.vocab_size.to_string()),
        ("embed".into(), model.ids.dim.to_string()),
        ("margin".into(), model.margin.to_string()),
        ("dt".into(), model.feature_dims.0.to_string()),
        ("da".into(), model.feature_dims.1.to_string()),
        ("dobj".into(), model.feature_dims.2.to_string()),
    ];
    Checkpoint::from_store(&model.store, meta)
}

pub fn vse_from_checkpoint(ckpt: &Checkpoint, vocab: Option<&Vocabulary>) -> Result<VseModel> {
    if ckpt.meta_value("kind") != Some("vse") {
        return Err(Error::Format("not a vse checkpoint".into()));
    }
    let hash: u32 = ckpt
        .meta_value("vocab_hash")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format("checkpoint missing metadata \"vocab_hash\"".into()))?;
    if let Some(v) = vocab {
        if v.hash() != hash {
            return Err(Error::Format(
                "checkpoint was built with a different vocabulary".into(),
            ));
        }
    }
    let get = |key: &str| -> Result<usize> {
        ckpt.meta_value(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("checkpoint missing metadata {key:?}")))
    };
    let feature_dims = (get("dt")?, get("da")?, get("dobj")?);
    let embed = get("embed")?;
    let vocab_size = get("vocab_size")?;
    let margin: f64 = ckpt
        .meta_value("margin")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Format("checkpoint missing metadata \"margin\"".into()))?;
    let (dt, da, _) = feature_dims;
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(0);
    let ids = VseIds {
        w_v: store.register("vse.w_v", glorot(embed, dt + da, &mut rng))?,
        b_v: store.register("vse.b_v", Tensor::zeros(&[embed]))?,
        embed: store.register("vse.embed", glorot(vocab_size, embed, &mut rng))?,
        lstm: LstmIds::init(&mut store, embed, embed, &mut rng, "vse.lstm")?,
        w_s: store.register("vse.w_s", glorot(embed, embed, &mut rng))?,
        b_s: store.register("vse.b_s", Tensor::zeros(&[embed]))?,
        dim: embed,
    };
    ckpt.apply_to_store(&mut store)?;
    Ok(VseModel {
        store,
        ids,
        margin,
        feature_dims,
        vocab_hash: hash,
        vocab_size,
        step: ckpt
            .meta_value("step")
            .and_then(|v| v.parse().ok())
            .unwrap_or(0),
    })
}
