//! Frozen pre-norm transformer that runs on the device.
//!
//! Weights are synthesized from `init_seed` (or imported from a `PAEW` file)
//! and never change afterwards. `forward` exposes the residual stream after
//! every layer plus the softmax prediction `y_pre` read off the pivot token.
//!
//! Layer layout:
//!
//! ```text
//! x  = tok_emb[ids] + pos_emb
//! x += MHA(LN1(x))            causal for Autoregressive, padding keys masked
//! x += W2·gelu(W1·LN2(x)+b1)+b2
//! hidden[i] = x
//! y_pre = softmax(LNf(x[pivot])·head_w + head_b)
//! ```

use crate::numerics::{matmul, softmax, Activation, SeededRng, ShapeError, Tensor};
use thiserror::Error;

pub const PAD_TOKEN: u32 = 0;
/// Token placed in slot 0 for autoencoding models.
pub const CLS_TOKEN: u32 = 1;

const LN_EPS: f64 = 1e-5;
const FFN_MULT: usize = 4;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid backbone config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("weight file: {0}")]
    WeightFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArchKind {
    /// Decoder-only; the pivot is the last real token.
    Autoregressive,
    /// Bidirectional encoder; the pivot is the `[CLS]` slot at position 0.
    Autoencoding,
}

impl ArchKind {
    pub fn code(self) -> u8 {
        match self {
            ArchKind::Autoregressive => 0,
            ArchKind::Autoencoding => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ArchKind::Autoregressive),
            1 => Some(ArchKind::Autoencoding),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Autoregressive => "autoregressive",
            ArchKind::Autoencoding => "autoencoding",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "autoregressive" | "decoder" | "gpt" => Some(ArchKind::Autoregressive),
            "autoencoding" | "encoder" | "bert" => Some(ArchKind::Autoencoding),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub arch_kind: ArchKind,
    pub init_seed: u64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), BackboneError> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("seq_len", self.seq_len),
            ("vocab_size", self.vocab_size),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(BackboneError::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(BackboneError::Config(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.vocab_size <= CLS_TOKEN as usize {
            return Err(BackboneError::Config(
                "vocab_size must leave room for the pad and cls ids".into(),
            ));
        }
        Ok(())
    }

    /// Number of frozen weights, embeddings included.
    pub fn parameter_count(&self) -> usize {
        let h = self.hidden_size;
        let f = FFN_MULT * h;
        let per_layer = 4 * h * h + 4 * h + h * f + f + f * h + h;
        self.vocab_size * h
            + self.seq_len * h
            + self.num_layers * per_layer
            + 2 * h
            + h * self.num_classes
            + self.num_classes
    }
}

/// Token ids plus a padding mask (`true` = real token), both `[batch × seq_len]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenBatch {
    pub fn new(
        batch: usize,
        seq_len: usize,
        ids: Vec<u32>,
        mask: Vec<bool>,
    ) -> Result<Self, BackboneError> {
        if ids.len() != batch * seq_len || mask.len() != batch * seq_len {
            return Err(BackboneError::Input(format!(
                "token batch {}x{} got {} ids and {} mask entries",
                batch,
                seq_len,
                ids.len(),
                mask.len()
            )));
        }
        Ok(Self {
            batch,
            seq_len,
            ids,
            mask,
        })
    }

    pub fn sample_ids(&self, b: usize) -> &[u32] {
        &self.ids[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn sample_mask(&self, b: usize) -> &[bool] {
        &self.mask[b * self.seq_len..(b + 1) * self.seq_len]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// One `[B × L_seq × H]` tensor per transformer layer.
    pub hidden_states: Vec<Tensor>,
    /// `[B × C]` softmax probabilities.
    pub y_pre: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerWeights {
    ln1_g: Vec<f64>,
    ln1_b: Vec<f64>,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    ln2_g: Vec<f64>,
    ln2_b: Vec<f64>,
    w1: Tensor,
    b1: Vec<f64>,
    w2: Tensor,
    b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneModel {
    config: BackboneConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    layers: Vec<LayerWeights>,
    lnf_g: Vec<f64>,
    lnf_b: Vec<f64>,
    head_w: Tensor,
    head_b: Vec<f64>,
}

/// Synthesizes a frozen backbone deterministically from `config.init_seed`.
pub fn build_backbone(config: BackboneConfig) -> Result<BackboneModel, BackboneError> {
    config.validate()?;
    let h = config.hidden_size;
    let f = FFN_MULT * h;
    let mut rng = SeededRng::new(config.init_seed);
    let proj = 1.0 / (h as f64).sqrt();
    let tok_emb = Tensor::uniform(&[config.vocab_size, h], 1.0, &mut rng);
    let pos_emb = Tensor::uniform(&[config.seq_len, h], 0.5, &mut rng);
    let layers = (0..config.num_layers)
        .map(|_| LayerWeights {
            ln1_g: vec![1.0; h],
            ln1_b: vec![0.0; h],
            wq: Tensor::uniform(&[h, h], proj, &mut rng),
            wk: Tensor::uniform(&[h, h], proj, &mut rng),
            wv: Tensor::uniform(&[h, h], proj, &mut rng),
            wo: Tensor::uniform(&[h, h], proj, &mut rng),
            ln2_g: vec![1.0; h],
            ln2_b: vec![0.0; h],
            w1: Tensor::uniform(&[h, f], proj, &mut rng),
            b1: vec![0.0; f],
            w2: Tensor::uniform(&[f, h], 1.0 / (f as f64).sqrt(), &mut rng),
            b2: vec![0.0; h],
        })
        .collect();
    let head_w = Tensor::uniform(&[h, config.num_classes], proj, &mut rng);
    Ok(BackboneModel {
        head_b: vec![0.0; config.num_classes],
        lnf_g: vec![1.0; h],
        lnf_b: vec![0.0; h],
        config,
        tok_emb,
        pos_emb,
        layers,
        head_w,
    })
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], out: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv * g[i] + b[i];
    }
}

fn layer_norm_rows(x: &Tensor, g: &[f64], b: &[f64]) -> Tensor {
    let mut out = Tensor::zeros(x.shape());
    let c = x.cols();
    for r in 0..x.rows() {
        layer_norm(x.row(r), g, b, &mut out.data_mut()[r * c..(r + 1) * c]);
    }
    out
}

impl BackboneModel {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Runs the frozen network over a token batch.
    pub fn forward(&self, batch: &TokenBatch) -> Result<ForwardTrace, BackboneError> {
        let cfg = &self.config;
        if batch.seq_len != cfg.seq_len {
            return Err(BackboneError::Input(format!(
                "sequence length {} != configured {}",
                batch.seq_len, cfg.seq_len
            )));
        }
        if batch.batch == 0 {
            return Err(BackboneError::Input("empty batch".into()));
        }
        if let Some(bad) = batch.ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(BackboneError::Input(format!(
                "token id {bad} out of vocabulary (size {})",
                cfg.vocab_size
            )));
        }
        let (h, s) = (cfg.hidden_size, cfg.seq_len);
        let mut hidden: Vec<Vec<f64>> =
            vec![Vec::with_capacity(batch.batch * s * h); cfg.num_layers];
        let mut logits = Vec::with_capacity(batch.batch * cfg.num_classes);
        for b in 0..batch.batch {
            let mask = batch.sample_mask(b);
            let mut x = self.embed(batch.sample_ids(b))?;
            for (layer, out) in self.layers.iter().zip(hidden.iter_mut()) {
                x = self.layer_forward(layer, &x, mask)?;
                out.extend_from_slice(x.data());
            }
            // Final layer's pivot row drives y_pre. An all-pad sample falls
            // back to row 0 here; select_pivot rejects it explicitly.
            let pivot = pivot_index(cfg.arch_kind, mask).unwrap_or(0);
            let mut normed = vec![0.0; h];
            layer_norm(x.row(pivot), &self.lnf_g, &self.lnf_b, &mut normed);
            let row = Tensor::new(vec![1, h], normed)?;
            let z = matmul(&row, &self.head_w)?.add_row_vector(&self.head_b)?;
            logits.extend(softmax(z.data()));
        }
        let hidden_states = hidden
            .into_iter()
            .map(|d| Tensor::new(vec![batch.batch, s, h], d))
            .collect::<Result<_, _>>()?;
        Ok(ForwardTrace {
            hidden_states,
            y_pre: Tensor::new(vec![batch.batch, cfg.num_classes], logits)?,
        })
    }

    fn embed(&self, ids: &[u32]) -> Result<Tensor, BackboneError> {
        let h = self.config.hidden_size;
        let mut x = Vec::with_capacity(ids.len() * h);
        for (pos, &id) in ids.iter().enumerate() {
            let t = self.tok_emb.row(id as usize);
            let p = self.pos_emb.row(pos);
            x.extend(t.iter().zip(p).map(|(a, b)| a + b));
        }
        Ok(Tensor::new(vec![ids.len(), h], x)?)
    }

    fn layer_forward(
        &self,
        w: &LayerWeights,
        x: &Tensor,
        mask: &[bool],
    ) -> Result<Tensor, BackboneError> {
        let cfg = &self.config;
        let (s, h) = (cfg.seq_len, cfg.hidden_size);
        let heads = cfg.num_heads;
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let causal = cfg.arch_kind == ArchKind::Autoregressive;

        let n1 = layer_norm_rows(x, &w.ln1_g, &w.ln1_b);
        let q = matmul(&n1, &w.wq)?;
        let k = matmul(&n1, &w.wk)?;
        let v = matmul(&n1, &w.wv)?;
        let mut ctx = Tensor::zeros(&[s, h]);
        let mut scores = vec![0.0; s];
        for head in 0..heads {
            let off = head * dh;
            for i in 0..s {
                let qi = &q.row(i)[off..off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..s {
                    let allowed = mask[j] && (!causal || j <= i);
                    scores[j] = if allowed {
                        let kj = &k.row(j)[off..off + dh];
                        let sc = qi.iter().zip(kj).fold(0.0, |a, (x, y)| a + x * y) * scale;
                        max = max.max(sc);
                        sc
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                if max == f64::NEG_INFINITY {
                    // No visible key (leading padding under a causal mask).
                    continue;
                }
                let mut total = 0.0;
                for sc in scores.iter_mut() {
                    *sc = if sc.is_finite() {
                        (*sc - max).exp()
                    } else {
                        0.0
                    };
                    total += *sc;
                }
                let out = &mut ctx.row_mut(i)[off..off + dh];
                for (j, &p) in scores.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let wgt = p / total;
                    for (o, vv) in out.iter_mut().zip(&v.row(j)[off..off + dh]) {
                        *o += wgt * vv;
                    }
                }
            }
        }
        let attn = matmul(&ctx, &w.wo)?;
        let x1 = x.add(&attn)?;

        let n2 = layer_norm_rows(&x1, &w.ln2_g, &w.ln2_b);
        let hmid = matmul(&n2, &w.w1)?
            .add_row_vector(&w.b1)?
            .map(|z| Activation::Gelu.apply(z));
        let ff = matmul(&hmid, &w.w2)?.add_row_vector(&w.b2)?;
        Ok(x1.add(&ff)?)
    }

    /// Every weight in declared order: tok_emb, pos_emb, per layer
    /// (ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2),
    /// lnf_g, lnf_b, head_w, head_b.
    pub fn weight_buffers(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.tok_emb.data(), self.pos_emb.data()];
        for l in &self.layers {
            out.extend([
                l.ln1_g.as_slice(),
                &l.ln1_b,
                l.wq.data(),
                l.wk.data(),
                l.wv.data(),
                l.wo.data(),
                &l.ln2_g,
                &l.ln2_b,
                l.w1.data(),
                &l.b1,
                l.w2.data(),
                &l.b2,
            ]);
        }
        out.extend([
            self.lnf_g.as_slice(),
            &self.lnf_b,
            self.head_w.data(),
            &self.head_b,
        ]);
        out
    }

    fn weight_buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.tok_emb.data_mut(), self.pos_emb.data_mut()];
        for l in &mut self.layers {
            out.extend([
                l.ln1_g.as_mut_slice(),
                &mut l.ln1_b,
                l.wq.data_mut(),
                l.wk.data_mut(),
                l.wv.data_mut(),
                l.wo.data_mut(),
                &mut l.ln2_g,
                &mut l.ln2_b,
                l.w1.data_mut(),
                &mut l.b1,
                l.w2.data_mut(),
                &mut l.b2,
            ]);
        }
        out.extend([
            self.lnf_g.as_mut_slice(),
            &mut self.lnf_b,
            self.head_w.data_mut(),
            &mut self.head_b,
        ]);
        out
    }

    /// Serializes to the `PAEW` weight layout (weights as LE f32).
    pub fn to_weight_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.push(WEIGHT_VERSION);
        for v in [
            c.num_layers,
            c.hidden_size,
            c.num_heads,
            c.seq_len,
            c.vocab_size,
            c.num_classes,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(c.arch_kind.code());
        out.extend_from_slice(&c.init_seed.to_le_bytes());
        for buf in self.weight_buffers() {
            for &v in buf {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Loads a `PAEW` file produced by [`BackboneModel::to_weight_bytes`] or
    /// an external converter.
    pub fn from_weight_bytes(bytes: &[u8]) -> Result<Self, BackboneError> {
        let header = 4 + 1 + 6 * 4 + 1 + 8;
        if bytes.len() < header {
            return Err(BackboneError::WeightFile("truncated header".into()));
        }
        if &bytes[..4] != WEIGHT_MAGIC {
            return Err(BackboneError::WeightFile("bad magic".into()));
        }
        if bytes[4] != WEIGHT_VERSION {
            return Err(BackboneError::WeightFile(format!(
                "unsupported version {}",
                bytes[4]
            )));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let arch = ArchKind::from_code(bytes[29])
            .ok_or_else(|| BackboneError::WeightFile(format!("unknown arch {}", bytes[29])))?;
        let config = BackboneConfig {
            num_layers: u32_at(5),
            hidden_size: u32_at(9),
            num_heads: u32_at(13),
            seq_len: u32_at(17),
            vocab_size: u32_at(21),
            num_classes: u32_at(25),
            arch_kind: arch,
            init_seed: u64::from_le_bytes(bytes[30..38].try_into().unwrap()),
        };
        config.validate()?;
        let expected = config.parameter_count();
        let body = &bytes[header..];
        if body.len() != expected * 4 {
            return Err(BackboneError::WeightFile(format!(
                "expected {} weight bytes, found {}",
                expected * 4,
                body.len()
            )));
        }
        let mut model = build_backbone(config)?;
        let mut floats = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        for buf in model.weight_buffers_mut() {
            for v in buf.iter_mut() {
                *v = floats.next().expect("length checked above");
            }
        }
        Ok(model)
    }
}

const WEIGHT_MAGIC: &[u8; 4] = b"PAEW";
const WEIGHT_VERSION: u8 = 1;

/// Index of the pivot token for one sample, `None` if the mask has no real token.
pub fn pivot_index(arch: ArchKind, mask: &[bool]) -> Option<usize> {
    if !mask.iter().any(|&m| m) {
        return None;
    }
    match arch {
        ArchKind::Autoencoding => Some(0),
        ArchKind::Autoregressive => mask.iter().rposition(|&m| m),
    }
}

/// Gathers the pivot row of each sample: `[B × L_seq × H] -> [B × H]`.
pub fn select_pivot(
    hidden: &Tensor,
    arch: ArchKind,
    pad_mask: &[bool],
) -> Result<Tensor, BackboneError> {
    let &[b, s, h] = hidden.shape() else {
        return Err(BackboneError::Input(format!(
            "hidden state must be rank 3, got {:?}",
            hidden.shape()
        )));
    };
    if pad_mask.len() != b * s {
        return Err(BackboneError::Input(format!(
            "pad mask has {} entries for a {}x{} batch",
            pad_mask.len(),
            b,
            s
        )));
    }
    let mut out = Vec::with_capacity(b * h);
    for i in 0..b {
        let mask = &pad_mask[i * s..(i + 1) * s];
        let p = pivot_index(arch, mask)
            .ok_or_else(|| BackboneError::Input(format!("sample {i} is entirely padding")))?;
        let start = (i * s + p) * h;
        out.extend_from_slice(&hidden.data()[start..start + h]);
    }
    Ok(Tensor::new(vec![b, h], out)?)
}
