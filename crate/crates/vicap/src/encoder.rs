//! Projects raw video features into the global representation v̄, the
//! temporal memory Vᵗ and the spatial memory Vᵒ.
//!
//! v̄ = W_g·[meanpool(temporal) ‖ audio] + b_g, each temporal row maps
//! through W_t and each object row through W_o. The feature files already
//! store image‖motion concatenated per segment, and average pooling is
//! coordinate-wise, so pooling the concatenated rows equals pooling the two
//! modalities separately and concatenating. No nonlinearity follows the
//! projections.

use crate::diffcore::{glorot, ParamId, ParamStore, Tape, Tensor, Var};
use crate::featio::VideoFeatures;
use crate::{Error, Result};
use rand::Rng;

/// The three linear projections of the encoder.
#[derive(Debug, Clone, Copy)]
pub struct EncoderIds {
    pub w_g: ParamId,
    pub b_g: ParamId,
    pub w_t: ParamId,
    pub b_t: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
}

/// Encoded representations on a tape: differentiable during training,
/// plain forward values during decoding.
pub struct EncodedVideo {
    pub vbar: Var,
    pub temporal: Vec<Var>,
    pub objects: Vec<Var>,
}

/// The raw global feature [meanpool(temporal) ‖ audio], also consumed by
/// the fusion model's video tower.
pub fn global_raw(v: &VideoFeatures) -> Vec<f64> {
    let (n, dt) = (v.temporal.rows, v.temporal.cols);
    let mut pooled = vec![0.0f64; dt];
    for r in 0..n {
        for (p, x) in pooled.iter_mut().zip(v.temporal.row(r)) {
            *p += *x as f64;
        }
    }
    for p in &mut pooled {
        *p /= n as f64;
    }
    pooled.extend(v.audio.iter().map(|&x| x as f64));
    pooled
}

impl EncoderIds {
    pub fn init(
        store: &mut ParamStore,
        dims: (usize, usize, usize),
        hidden: usize,
        rng: &mut impl Rng,
        prefix: &str,
    ) -> Result<Self> {
        let (dt, da, d_o) = dims;
        Ok(EncoderIds {
            w_g: store.register(&format!("{prefix}.w_g"), glorot(hidden, dt + da, rng))?,
            b_g: store.register(&format!("{prefix}.b_g"), Tensor::zeros(&[hidden]))?,
            w_t: store.register(&format!("{prefix}.w_t"), glorot(hidden, dt, rng))?,
            b_t: store.register(&format!("{prefix}.b_t"), Tensor::zeros(&[hidden]))?,
            w_o: store.register(&format!("{prefix}.w_o"), glorot(hidden, d_o, rng))?,
            b_o: store.register(&format!("{prefix}.b_o"), Tensor::zeros(&[hidden]))?,
        })
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        v: &VideoFeatures,
    ) -> Result<EncodedVideo> {
        v.validate()?;
        let w_g = tape.param(store, self.w_g);
        let b_g = tape.param(store, self.b_g);
        let w_t = tape.param(store, self.w_t);
        let b_t = tape.param(store, self.b_t);
        let w_o = tape.param(store, self.w_o);
        let b_o = tape.param(store, self.b_o);

        let raw = tape.constant(Tensor::vector(global_raw(v)));
        let vbar = tape.affine(raw, w_g, b_g).map_err(|e| {
            Error::Shape(format!("{}: global projection: {e}", v.video_id))
        })?;
        let mut temporal = Vec::with_capacity(v.temporal.rows);
        for r in 0..v.temporal.rows {
            let row = tape.constant(Tensor::vector(
                v.temporal.row(r).iter().map(|&x| x as f64).collect(),
            ));
            temporal.push(tape.affine(row, w_t, b_t)?);
        }
        let mut objects = Vec::with_capacity(v.objects.rows);
        for r in 0..v.objects.rows {
            let row = tape.constant(Tensor::vector(
                v.objects.row(r).iter().map(|&x| x as f64).collect(),
            ));
            objects.push(tape.affine(row, w_o, b_o)?);
        }
        Ok(EncodedVideo {
            vbar,
            temporal,
            objects,
        })
    }
}
