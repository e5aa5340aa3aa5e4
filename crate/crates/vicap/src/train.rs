//! Cross-entropy training, self-critical fine-tuning with a mixed
//! CIDEr-D + BLEU reward, and checkpoint persistence.
//!
//! Self-critical training uses the model's own greedy decode as the reward
//! baseline: advantage = r(sample) − r(greedy), treated as a constant. The
//! mixed objective is λ·loss_RL + (1−λ)·loss_CE. Training is single-worker
//! and bit-deterministic given the seed.

use crate::decoder::{
    greedy_decode, sample_decode, sequence_ce_loss, Branch, DecoderDims, DecoderIds,
};
use crate::diffcore::{
    adam_step, AdamHyper, AdamState, ParamStore, Tape, Var,
};
use crate::encoder::EncoderIds;
use crate::featio::{Dataset, DatasetItem, Vocabulary};
use crate::metrics::{cider_d_sentence, compute_doc_freq, sentence_bleu, CorpusDocFreq};
use crate::util::{crc32, seeded_rng};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;

/// Everything a training run needs to know.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub clip: f64,
    /// RL mixing weight λ ∈ [0,1]; the CE term gets 1−λ.
    pub lambda_rl: f64,
    pub w_cider: f64,
    pub w_bleu: f64,
    pub max_len: usize,
    pub branch: Branch,
    pub dims: DecoderDims,
    pub log_every: u64,
    /// Stop CE training early once every training caption is reproduced
    /// (checked every `log_every` steps); 0 disables.
    pub early_stop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 8,
            max_steps: 2000,
            seed: 0,
            clip: 5.0,
            lambda_rl: 0.7,
            w_cider: 0.8,
            w_bleu: 0.2,
            max_len: 8,
            branch: Branch::Temporal,
            dims: crate::decoder::DESK_DIMS,
            log_every: 100,
            early_stop: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_rl)
            || !(0.0..=1.0).contains(&self.w_cider)
            || !(0.0..=1.0).contains(&self.w_bleu)
        {
            return Err(Error::Value("lambda and reward weights must lie in [0,1]".into()));
        }
        if (self.w_cider + self.w_bleu - 1.0).abs() > 1e-9 {
            return Err(Error::Value("reward weights must sum to 1".into()));
        }
        if self.lr < 0.0 || self.batch_size == 0 || self.max_len == 0 {
            return Err(Error::Value("lr must be ≥ 0, batch and max_len positive".into()));
        }
        Ok(())
    }
}

/// Encoder + decoder pair for one attention branch.
pub struct CaptionModel {
    pub store: ParamStore,
    pub enc: EncoderIds,
    pub dec: DecoderIds,
    pub branch: Branch,
    pub feature_dims: (usize, usize, usize),
    pub vocab_hash: u32,
    pub step: u64,
}

impl CaptionModel {
    pub fn init(
        feature_dims: (usize, usize, usize),
        dims: DecoderDims,
        vocab: &Vocabulary,
        branch: Branch,
        seed: u64,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let enc = EncoderIds::init(&mut store, feature_dims, dims.hidden, &mut rng, "enc")?;
        let dec = DecoderIds::init(&mut store, dims, vocab.len(), &mut rng, "dec")?;
        Ok(CaptionModel {
            store,
            enc,
            dec,
            branch,
            feature_dims,
            vocab_hash: vocab.hash(),
            step: 0,
        })
    }

    /// Greedy caption for one video, as content token ids.
    pub fn greedy_caption(&self, item: &DatasetItem, max_len: usize) -> Result<Vec<u32>> {
        let mut tape = Tape::new();
        let enc = self.enc.encode(&mut tape, &self.store, &item.features)?;
        let vars = self.dec.lease(&mut tape, &self.store);
        greedy_decode(&mut tape, &vars, &enc, self.branch, max_len)
    }

    pub fn beam_caption(&self, item: &DatasetItem, beam: usize, max_len: usize) -> Result<Vec<u32>> {
        let mut tape = Tape::new();
        let enc = self.enc.encode(&mut tape, &self.store, &item.features)?;
        let vars = self.dec.lease(&mut tape, &self.store);
        crate::decoder::beam_decode(&mut tape, &vars, &enc, self.branch, beam, max_len, 0.0)
    }

    /// Teacher-forced token accuracy over every reference of every item.
    pub fn token_accuracy(&self, items: &[DatasetItem]) -> Result<f64> {
        let (mut correct, mut total) = (0usize, 0usize);
        for item in items {
            let mut tape = Tape::new();
            let enc = self.enc.encode(&mut tape, &self.store, &item.features)?;
            let vars = self.dec.lease(&mut tape, &self.store);
            for caption in &item.refs {
                let out = sequence_ce_loss(&mut tape, &vars, &enc, self.branch, caption)?;
                correct += out.correct;
                total += out.positions;
            }
        }
        Ok(correct as f64 / total.max(1) as f64)
    }
}

/// One training log record: `step TAB loss TAB reward`.
#[derive(Debug, Clone, Copy)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
    pub reward: Option<f64>,
}

impl LogEntry {
    pub fn to_line(self) -> String {
        match self.reward {
            Some(r) => format!("{}\t{:.6}\t{:.6}", self.step, self.loss, r),
            None => format!("{}\t{:.6}\t-", self.step, self.loss),
        }
    }
}

fn next_batch(
    order: &mut Vec<usize>,
    cursor: &mut usize,
    n: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    for _ in 0..batch {
        if *cursor >= order.len() {
            order.clear();
            order.extend(0..n);
            order.shuffle(rng);
            *cursor = 0;
        }
        out.push(order[*cursor]);
        *cursor += 1;
    }
    out
}

/// Cross-entropy training: uniformly shuffled minibatches, one random
/// reference caption per video per visit, Adam with global-norm clipping.
pub fn train_ce(
    data: &Dataset,
    cfg: &TrainConfig,
    log: &mut Vec<LogEntry>,
) -> Result<CaptionModel> {
    cfg.validate()?;
    if data.items.is_empty() {
        return Err(Error::Value("empty dataset".into()));
    }
    let mut model = CaptionModel::init(data.dims, cfg.dims, &data.vocab, cfg.branch, cfg.seed)?;
    let mut rng = seeded_rng(cfg.seed ^ 0x5eed_1e55);
    let mut adam = AdamState::new(&model.store);
    let hyper = AdamHyper {
        lr: cfg.lr,
        clip: cfg.clip,
        ..Default::default()
    };
    let mut order = Vec::new();
    let mut cursor = 0usize;
    for step in 1..=cfg.max_steps {
        let batch = next_batch(&mut order, &mut cursor, data.items.len(), cfg.batch_size, &mut rng);
        let mut tape = Tape::new();
        let vars = model.dec.lease(&mut tape, &model.store);
        let mut losses = Vec::with_capacity(batch.len());
        for &vi in &batch {
            let item = &data.items[vi];
            let enc = model.enc.encode(&mut tape, &model.store, &item.features)?;
            let caption = &item.refs[rng.gen_range(0..item.refs.len())];
            let out = sequence_ce_loss(&mut tape, &vars, &enc, cfg.branch, caption)?;
            losses.push(out.loss);
        }
        let total = tape.sum_scalars(&losses);
        let loss = tape.scale(total, 1.0 / losses.len() as f64);
        let loss_val = tape.value(loss).item();
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!("NaN loss at step {step}")));
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
            if cfg.early_stop && model.token_accuracy(&data.items)? >= 1.0 {
                break;
            }
        }
    }
    Ok(model)
}

/// Mixed reward r(y) = w_cider·CIDEr-D_sent(y) + w_bleu·BLEU_sent(y).
pub fn mixed_reward(
    tokens: &[u32],
    refs: &[Vec<u32>],
    df: &CorpusDocFreq<u32>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let cider = cider_d_sentence(tokens, refs, df)?;
    let bleu = sentence_bleu(tokens, refs)?;
    Ok(cfg.w_cider * cider + cfg.w_bleu * bleu)
}

/// Reference content tokens (ids) per item, the reward's comparison basis.
pub fn reference_ids(items: &[DatasetItem]) -> Vec<Vec<Vec<u32>>> {
    items
        .iter()
        .map(|it| {
            it.refs
                .iter()
                .map(|r| content_ids(r))
                .collect()
        })
        .collect()
}

fn content_ids(caption: &[u32]) -> Vec<u32> {
    use crate::featio::{BOS, EOS, PAD};
    caption
        .iter()
        .cloned()
        .filter(|&t| t != BOS && t != EOS && t != PAD)
        .collect()
}

/// Value breakdown of one self-critical batch loss.
pub struct ScstBatch {
    pub loss: Var,
    pub mean_sample_reward: f64,
    pub mean_greedy_reward: f64,
}

/// Builds the self-critical policy-gradient loss for a batch on the given
/// tape: per video, −A·Σ log p(sampled tokens) with A = r(sample) −
/// r(greedy) held constant; mixed with the teacher-forced CE term as
/// λ·RL + (1−λ)·CE.
#[allow(clippy::too_many_arguments)]
pub fn scst_batch_loss(
    tape: &mut Tape,
    model: &CaptionModel,
    items: &[&DatasetItem],
    refs: &[Vec<Vec<u32>>],
    df: &CorpusDocFreq<u32>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ScstBatch> {
    if items.is_empty() {
        return Err(Error::Value("empty batch".into()));
    }
    if refs.len() != items.len() || refs.iter().any(|r| r.is_empty()) {
        return Err(Error::Value("every batch video needs references".into()));
    }
    let vars = model.dec.lease(tape, &model.store);
    let mut rl_terms = Vec::with_capacity(items.len());
    let mut ce_losses = Vec::with_capacity(items.len());
    let (mut sample_sum, mut greedy_sum) = (0.0, 0.0);
    for (item, ref_set) in items.iter().zip(refs) {
        let enc = model.enc.encode(tape, &model.store, &item.features)?;
        let sample = sample_decode(tape, &vars, &enc, cfg.branch, cfg.max_len, rng)?;
        let greedy = greedy_decode(tape, &vars, &enc, cfg.branch, cfg.max_len)?;
        let r_sample = mixed_reward(&sample.tokens, ref_set, df, cfg)?;
        let r_greedy = mixed_reward(&greedy, ref_set, df, cfg)?;
        sample_sum += r_sample;
        greedy_sum += r_greedy;
        let advantage = r_sample - r_greedy;
        // −A·Σ log p = A·Σ nll
        let nll = tape.sum_scalars(&sample.nll_nodes);
        rl_terms.push(tape.scale(nll, advantage));
        let caption = &item.refs[rng.gen_range(0..item.refs.len())];
        let ce = sequence_ce_loss(tape, &vars, &enc, cfg.branch, caption)?;
        ce_losses.push(ce.loss);
    }
    let b = items.len() as f64;
    let rl_total = tape.sum_scalars(&rl_terms);
    let rl = tape.scale(rl_total, 1.0 / b);
    let ce_total = tape.sum_scalars(&ce_losses);
    let ce = tape.scale(ce_total, 1.0 / b);
    let rl_part = tape.scale(rl, cfg.lambda_rl);
    let ce_part = tape.scale(ce, 1.0 - cfg.lambda_rl);
    let loss = tape.add(rl_part, ce_part);
    Ok(ScstBatch {
        loss,
        mean_sample_reward: sample_sum / b,
        mean_greedy_reward: greedy_sum / b,
    })
}

/// Self-critical fine-tuning from a converged CE model. Document
/// frequencies for the CIDEr-D reward are computed once from the training
/// references and frozen.
pub fn train_rl(
    data: &Dataset,
    cfg: &TrainConfig,
    mut model: CaptionModel,
    log: &mut Vec<LogEntry>,
) -> Result<CaptionModel> {
    cfg.validate()?;
    if data.items.is_empty() {
        return Err(Error::Value("empty dataset".into()));
    }
    let refs = reference_ids(&data.items);
    let df = compute_doc_freq(&refs);
    let mut rng = seeded_rng(cfg.seed ^ 0x5c57_ba5e);
    let mut adam = AdamState::new(&model.store);
    let hyper = AdamHyper {
        lr: cfg.lr,
        clip: cfg.clip,
        ..Default::default()
    };
    let mut order = Vec::new();
    let mut cursor = 0usize;
    for step in 1..=cfg.max_steps {
        let batch = next_batch(&mut order, &mut cursor, data.items.len(), cfg.batch_size, &mut rng);
        let items: Vec<&DatasetItem> = batch.iter().map(|&i| &data.items[i]).collect();
        let batch_refs: Vec<Vec<Vec<u32>>> = batch.iter().map(|&i| refs[i].clone()).collect();
        let mut tape = Tape::new();
        let out = scst_batch_loss(&mut tape, &model, &items, &batch_refs, &df, cfg, &mut rng)?;
        let loss_val = tape.value(out.loss).item();
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!("NaN loss at RL step {step}")));
        }
        let greedy_reward = out.mean_greedy_reward;
        tape.backward(out.loss, &mut model.store)?;
        adam_step(&mut model.store, &mut adam, &hyper)?;
        model.step += 1;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log.push(LogEntry {
                step: model.step,
                loss: loss_val,
                reward: Some(greedy_reward),
            });
        }
    }
    Ok(model)
}

const CKP_MAGIC: &[u8; 4] = b"CKP1";

/// Named parameter tensors plus flat metadata, serialized as CKP1.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: Vec<(String, String)>) -> Self {
        let params = store
            .ids()
            .map(|id| {
                (
                    store.name(id).to_string(),
                    store.value(id).shape().to_vec(),
                    store.value(id).data().iter().map(|&x| x as f32).collect(),
                )
            })
            .collect();
        Checkpoint { meta, params }
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta_value(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("checkpoint missing metadata {key:?}")))
    }

    /// Copy parameter payloads into a store with matching names/shapes.
    pub fn apply_to_store(&self, store: &mut ParamStore) -> Result<()> {
        for (name, shape, payload) in &self.params {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Shape(format!("unknown parameter {name:?}")))?;
            if store.value(id).shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter {name:?}: checkpoint shape {:?} vs model {:?}",
                    shape,
                    store.value(id).shape()
                )));
            }
            for (dst, &src) in store.value_mut(id).data_mut().iter_mut().zip(payload) {
                *dst = src as f64;
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKP_MAGIC);
        let meta: String = self
            .meta
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(meta.as_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, shape, payload) in &self.params {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in payload {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < 8 || &buf[..4] != CKP_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let body = &buf[..buf.len() - 4];
        let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
        if crc32(body) != stored {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let mut pos = 4usize;
        let take_u32 = |pos: &mut usize| -> Result<u32> {
            if *pos + 4 > body.len() {
                return Err(Error::Length("truncated checkpoint".into()));
            }
            let v = u32::from_le_bytes(body[*pos..*pos + 4].try_into().unwrap());
            *pos += 4;
            Ok(v)
        };
        let meta_len = take_u32(&mut pos)? as usize;
        if pos + meta_len > body.len() {
            return Err(Error::Length("truncated checkpoint metadata".into()));
        }
        let meta_text = std::str::from_utf8(&body[pos..pos + meta_len])
            .map_err(|_| Error::Format("checkpoint metadata is not UTF-8".into()))?;
        pos += meta_len;
        let meta = meta_text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let count = take_u32(&mut pos)? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = take_u32(&mut pos)? as usize;
            if pos + name_len > body.len() {
                return Err(Error::Length("truncated parameter name".into()));
            }
            let name = std::str::from_utf8(&body[pos..pos + name_len])
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            pos += name_len;
            let rank = take_u32(&mut pos)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(take_u32(&mut pos)? as usize);
            }
            let n: usize = shape.iter().product();
            if pos + 4 * n > body.len() {
                return Err(Error::Length(format!("truncated payload for {name:?}")));
            }
            let mut payload = Vec::with_capacity(n);
            for i in 0..n {
                payload.push(f32::from_le_bytes(
                    body[pos + 4 * i..pos + 4 * i + 4].try_into().unwrap(),
                ));
            }
            pos += 4 * n;
            params.push((name, shape, payload));
        }
        if pos != body.len() {
            return Err(Error::Length("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint { meta, params })
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, c.encode()).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Checkpoint::decode(&buf)
}

/// Checkpoint for a caption model, carrying enough metadata to rebuild it.
pub fn model_checkpoint(model: &CaptionModel) -> Checkpoint {
    let meta = vec![
        ("kind".into(), "caption".into()),
        ("step".into(), model.step.to_string()),
        ("branch".into(), model.branch.tag().into()),
        ("vocab_hash".into(), model.vocab_hash.to_string()),
        ("hidden".into(), model.dec.dims.hidden.to_string()),
        ("embed".into(), model.dec.dims.embed.to_string()),
        ("attn".into(), model.dec.dims.attn.to_string()),
        ("vocab_size".into(), model.dec.vocab_size.to_string()),
        ("dt".into(), model.feature_dims.0.to_string()),
        ("da".into(), model.feature_dims.1.to_string()),
        ("dobj".into(), model.feature_dims.2.to_string()),
    ];
    Checkpoint::from_store(&model.store, meta)
}

/// Rebuild a caption model from its checkpoint. When `vocab` is given the
/// stored vocabulary hash must match (load-for-training safety).
pub fn model_from_checkpoint(ckpt: &Checkpoint, vocab: Option<&Vocabulary>) -> Result<CaptionModel> {
    if ckpt.meta_value("kind") != Some("caption") {
        return Err(Error::Format("not a caption-model checkpoint".into()));
    }
    let hash: u32 = ckpt.meta_parse("vocab_hash")?;
    if let Some(v) = vocab {
        if v.hash() != hash {
            return Err(Error::Format(
                "checkpoint was built with a different vocabulary".into(),
            ));
        }
    }
    let dims = DecoderDims {
        hidden: ckpt.meta_parse("hidden")?,
        embed: ckpt.meta_parse("embed")?,
        attn: ckpt.meta_parse("attn")?,
    };
    let feature_dims = (
        ckpt.meta_parse("dt")?,
        ckpt.meta_parse("da")?,
        ckpt.meta_parse("dobj")?,
    );
    let vocab_size: usize = ckpt.meta_parse("vocab_size")?;
    let branch = Branch::parse(ckpt.meta_value("branch").unwrap_or(""))?;
    // dummy vocab-sized init, immediately overwritten by the payload
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(0);
    let enc = EncoderIds::init(&mut store, feature_dims, dims.hidden, &mut rng, "enc")?;
    let dec = DecoderIds::init(&mut store, dims, vocab_size, &mut rng, "dec")?;
    ckpt.apply_to_store(&mut store)?;
    Ok(CaptionModel {
        store,
        enc,
        dec,
        branch,
        feature_dims,
        vocab_hash: hash,
        step: ckpt.meta_parse("step")?,
    })
}

/// Exact-match rate of greedy captions against any reference.
pub fn greedy_exact_matches(model: &CaptionModel, data: &Dataset, max_len: usize) -> Result<usize> {
    let refs = reference_ids(&data.items);
    let mut hits = 0;
    for (item, ref_set) in data.items.iter().zip(&refs) {
        let got = model.greedy_caption(item, max_len)?;
        if ref_set.iter().any(|r| r == &got) {
            hits += 1;
        }
    }
    Ok(hits)
}

/// Mean greedy-decode CIDEr-D over a dataset.
pub fn mean_greedy_cider(
    model: &CaptionModel,
    data: &Dataset,
    df: &CorpusDocFreq<u32>,
    max_len: usize,
) -> Result<f64> {
    let refs = reference_ids(&data.items);
    let mut total = 0.0;
    for (item, ref_set) in data.items.iter().zip(&refs) {
        let got = model.greedy_caption(item, max_len)?;
        total += cider_d_sentence(&got, ref_set, df)?;
    }
    Ok(total / data.items.len() as f64)
}
