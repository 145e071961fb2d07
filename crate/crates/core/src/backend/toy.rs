//! A deliberately tiny diffusion stack implementing [`DiffusionBackend`] end to end,
//! with hand-derived gradients. It is small enough to train on one CPU core in
//! seconds while still exercising token registration, conditioning, noising,
//! cross-attention and selective freezing.
//!
//! Architecture:
//! * tokenizer: whitespace words over a fixed base vocabulary; unknown plain words
//!   fall into hashed buckets; `<...>` words must be registered special tokens.
//! * text encoder: per-token `tanh(W e + b)` states, mean-pooled into one vector.
//! * latent codec: `ds x ds` average pooling followed by a fixed 1x1 channel map
//!   (decoder is its pseudo-inverse followed by nearest upsampling).
//! * denoiser: three 3x3 convolutions; the timestep embedding and pooled text vector
//!   are added after the first, followed by one cross-attention block over the
//!   per-token states.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::checkpoint::{read_group, write_group, write_manifest, CheckpointError, CheckpointManifest, CHECKPOINT_FORMAT};
use super::{
    AttentionLayer, BackendError, BackendMetadata, DiffusionBackend, Latent, LatentShape, NoiseSchedule, ParamGrads,
    ParamGroup, TokenId, TokenInit, TrainExample,
};
use crate::assets::SpecialToken;
use crate::raster::resize_rgb;
use crate::rng::{normal_vec, seeded_rng};

pub const BOS: &str = "<bos>";

const BASE_WORDS: &[&str] = &[
    "a", "an", "the", "of", "on", "in", "at", "with", "and", "to", "by", "from", "photo", "picture", "image", "painting",
    "painted", "printed", "logo", "symbol", "text", "sign", "icon", "emblem", "plain", "solid", "background", "scene",
    "natural", "colorful", "dog", "cat", "apple", "star", "heart", "smiley", "face", "flower", "mug", "cup", "shirt",
    "t-shirt", "hat", "cap", "bag", "backpack", "bottle", "car", "wall", "laptop", "phone", "book", "box", "shoe",
    "jacket", "hoodie", "pillow", "plate", "sticker", "banner", "flag", "truck", "umbrella", "skateboard", "guitar",
    "notebook", "tote", "sweater", "vase", "lamp", "table", "chair", "door", "window", "street", "beach", "forest",
    "city", "room", "kitchen", "desk", "red", "blue", "green", "yellow", "white", "black", "big", "small", "new", "old",
    "wooden", "metal", "glass", "paper", "cotton",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub image_size: u32,
    pub downsample: u32,
    pub latent_channels: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub time_dim: usize,
    pub hash_buckets: usize,
    pub num_train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub guidance_scale: f64,
    pub init_seed: u64,
    /// Also inject the mean-pooled text state into the first layer; when off,
    /// text reaches the denoiser only through cross-attention.
    #[serde(default = "pooled_default")]
    pub pooled_conditioning: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            downsample: 4,
            latent_channels: 4,
            hidden: 16,
            embed_dim: 16,
            attn_dim: 8,
            time_dim: 8,
            hash_buckets: 64,
            num_train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            guidance_scale: 1.0,
            init_seed: 0,
            pooled_conditioning: true,
        }
    }
}

fn pooled_default() -> bool {
    true
}

/// Offsets of each tensor inside the flat denoiser parameter group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserLayout {
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub wt: Range<usize>,
    pub wc: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub w3: Range<usize>,
    pub b3: Range<usize>,
    pub total: usize,
}

impl DenoiserLayout {
    fn new(cfg: &ToyConfig) -> Self {
        let (c, h, d, a, td) = (cfg.latent_channels, cfg.hidden, cfg.embed_dim, cfg.attn_dim, cfg.time_dim);
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let w1 = take(h * c * 9);
        let b1 = take(h);
        let wt = take(h * td);
        let wc = take(if cfg.pooled_conditioning { h * d } else { 0 });
        let wq = take(a * h);
        let wk = take(a * d);
        let wv = take(h * d);
        let w2 = take(h * h * 9);
        let b2 = take(h);
        let w3 = take(c * h * 9);
        let b3 = take(c);
        Self {
            w1,
            b1,
            wt,
            wc,
            wq,
            wk,
            wv,
            w2,
            b2,
            w3,
            b3,
            total: at,
        }
    }
}

pub struct ToyBackend {
    config: ToyConfig,
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
    base_vocab_len: usize,
    embeddings: Vec<f64>,
    text: Vec<f64>,
    denoiser: Vec<f64>,
    layout: DenoiserLayout,
    codec_enc: Vec<f64>,
    codec_dec: Vec<f64>,
    schedule: NoiseSchedule,
    metadata: BackendMetadata,
}

impl std::fmt::Debug for ToyBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyBackend")
            .field("config", &self.config)
            .field("vocab_size", &self.vocab.len())
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

fn fnv1a(word: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in word.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn scaled_normal(rng: &mut crate::rng::RandomStream, n: usize, std: f64) -> Vec<f64> {
    normal_vec(rng, n).into_iter().map(|x| x * std).collect()
}

/// Fixed 1x1 RGB -> latent map and its left pseudo-inverse.
fn codec_maps(channels: usize) -> (Vec<f64>, Vec<f64>) {
    const ROWS: [[f64; 3]; 4] = [[0.5, 0.5, 0.5], [0.6, -0.6, 0.0], [0.35, 0.35, -0.7], [0.3, -0.1, 0.2]];
    assert!(channels >= 3, "toy codec needs at least 3 latent channels");
    let enc: Vec<f64> = (0..channels).flat_map(|c| ROWS[c % 4].map(|v| v * (1.0 + (c / 4) as f64 * 0.1))).collect();
    // (M^T M)^{-1} M^T, M is channels x 3
    let mut mtm = [[0.0; 3]; 3];
    for c in 0..channels {
        for i in 0..3 {
            for j in 0..3 {
                mtm[i][j] += enc[c * 3 + i] * enc[c * 3 + j];
            }
        }
    }
    let inv = invert3(mtm);
    let mut dec = vec![0.0; 3 * channels];
    for i in 0..3 {
        for c in 0..channels {
            dec[i * channels + c] = (0..3).map(|j| inv[i][j] * enc[c * 3 + j]).sum();
        }
    }
    (enc, dec)
}

fn invert3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    assert!(det.abs() > 1e-12, "singular codec map");
    let others = |k: usize| -> [usize; 2] {
        match k {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    };
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            // adjugate: cofactor of (j, i)
            let (r, c) = (others(j), others(i));
            let minor = m[r[0]][c[0]] * m[r[1]][c[1]] - m[r[0]][c[1]] * m[r[1]][c[0]];
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            *v = sign * minor / det;
        }
    }
    inv
}

fn conv3x3(input: &[f64], cin: usize, weight: &[f64], cout: usize, h: usize, w: usize, out: &mut [f64]) {
    let s = h * w;
    for o in 0..cout {
        for i in 0..cin {
            let kernel = &weight[(o * cin + i) * 9..(o * cin + i + 1) * 9];
            let inp = &input[i * s..(i + 1) * s];
            let outp = &mut out[o * s..(o + 1) * s];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = kernel[ky * 3 + kx];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &inp[sy as usize * w..(sy as usize + 1) * w];
                        let dst = &mut outp[y * w..(y + 1) * w];
                        let (x0, x1) = (if kx == 0 { 1 } else { 0 }, if kx == 2 { w - 1 } else { w });
                        for x in x0..x1 {
                            dst[x] += wv * src[x + kx - 1];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    weight: &[f64],
    cout: usize,
    h: usize,
    w: usize,
    dout: &[f64],
    dweight: &mut [f64],
    mut dinput: Option<&mut [f64]>,
) {
    let s = h * w;
    for o in 0..cout {
        let g = &dout[o * s..(o + 1) * s];
        for i in 0..cin {
            let base = (o * cin + i) * 9;
            let inp = &input[i * s..(i + 1) * s];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = weight[base + ky * 3 + kx];
                    let mut acc = 0.0;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        let (x0, x1) = (if kx == 0 { 1 } else { 0 }, if kx == 2 { w - 1 } else { w });
                        for x in x0..x1 {
                            let sx = x + kx - 1;
                            acc += g[y * w + x] * inp[sy * w + sx];
                            if let Some(di) = dinput.as_deref_mut() {
                                di[i * s + sy * w + sx] += wv * g[y * w + x];
                            }
                        }
                    }
                    dweight[base + ky * 3 + kx] += acc;
                }
            }
        }
    }
}

/// Activations kept from a forward pass for the backward pass.
struct Forward {
    /// Per-token hidden states, `L x D`.
    states: Vec<f64>,
    pooled: Vec<f64>,
    temb: Vec<f64>,
    y1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    r: Vec<f64>,
    y2: Vec<f64>,
    out: Vec<f64>,
}

impl ToyBackend {
    pub fn new(config: ToyConfig) -> Self {
        assert!(config.image_size % config.downsample == 0, "image size must be divisible by the downsample factor");
        assert!(config.time_dim % 2 == 0, "time embedding dimension must be even");
        let layout = DenoiserLayout::new(&config);
        let mut vocab: Vec<String> = vec![BOS.to_string()];
        vocab.extend(BASE_WORDS.iter().map(|w| w.to_string()));
        vocab.extend((0..config.hash_buckets).map(|b| format!("##{b}")));
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let base_vocab_len = vocab.len();
        let d = config.embed_dim;
        let (c, h, a, td) = (config.latent_channels, config.hidden, config.attn_dim, config.time_dim);

        let mut rng = seeded_rng(config.init_seed, "toy-backend/init");
        let embeddings = normal_vec(&mut rng, base_vocab_len * d);
        let mut text = scaled_normal(&mut rng, d * d, (1.0 / d as f64).sqrt());
        text.extend(std::iter::repeat_n(0.0, d));

        let mut den = vec![0.0; layout.total];
        let mut fill = |r: &Range<usize>, std: f64, rng: &mut crate::rng::RandomStream| {
            den[r.clone()].copy_from_slice(&scaled_normal(rng, r.len(), std));
        };
        fill(&layout.w1, (1.0 / (c * 9) as f64).sqrt(), &mut rng);
        fill(&layout.wt, (1.0 / td as f64).sqrt(), &mut rng);
        fill(&layout.wc, (1.0 / d as f64).sqrt(), &mut rng);
        fill(&layout.wq, (1.0 / h as f64).sqrt(), &mut rng);
        fill(&layout.wk, (1.0 / d as f64).sqrt(), &mut rng);
        fill(&layout.wv, (1.0 / d as f64).sqrt(), &mut rng);
        fill(&layout.w2, (1.0 / (h * 9) as f64).sqrt(), &mut rng);
        fill(&layout.w3, (1.0 / (h * 9) as f64).sqrt(), &mut rng);
        let _ = a;

        let (codec_enc, codec_dec) = codec_maps(c);
        let schedule = NoiseSchedule::linear(config.num_train_steps, config.beta_start, config.beta_end);
        Self {
            config,
            vocab,
            index,
            base_vocab_len,
            embeddings,
            text,
            denoiser: den,
            layout,
            codec_enc,
            codec_dec,
            schedule,
            metadata: BackendMetadata::default(),
        }
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn layout(&self) -> &DenoiserLayout {
        &self.layout
    }

    pub fn parameter_count(&self) -> usize {
        self.embeddings.len() + self.text.len() + self.denoiser.len() + self.codec_enc.len()
    }

    pub fn base_vocab_len(&self) -> usize {
        self.base_vocab_len
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    fn spatial(&self) -> (usize, usize) {
        let side = (self.config.image_size / self.config.downsample) as usize;
        (side, side)
    }

    fn time_embedding(&self, t: usize) -> Vec<f64> {
        let half = self.config.time_dim / 2;
        let tn = t as f64 / (self.schedule.num_steps() - 1) as f64;
        let mut v = vec![0.0; self.config.time_dim];
        for k in 0..half {
            let f = std::f64::consts::PI * 0.5 * (1u64 << k) as f64;
            v[k] = (f * tn).sin();
            v[half + k] = (f * tn).cos();
        }
        v
    }

    fn check_inputs(&self, z_t: &Latent, t: usize, tokens: &[TokenId]) -> Result<(), BackendError> {
        if z_t.shape != self.latent_shape() {
            return Err(BackendError::Shape {
                expected: self.latent_shape().to_string(),
                got: z_t.shape.to_string(),
            });
        }
        if t >= self.schedule.num_steps() {
            return Err(BackendError::Timestep {
                t,
                num_steps: self.schedule.num_steps(),
            });
        }
        if tokens.is_empty() {
            return Err(BackendError::Shape {
                expected: "at least one token".to_string(),
                got: "none".to_string(),
            });
        }
        if let Some(bad) = tokens.iter().find(|&&id| id >= self.vocab.len()) {
            return Err(BackendError::UnknownToken(format!("id {bad}")));
        }
        Ok(())
    }

    fn forward(&self, z_t: &Latent, t: usize, tokens: &[TokenId]) -> Forward {
        let cfg = &self.config;
        let (c, hd, d, a, td) = (cfg.latent_channels, cfg.hidden, cfg.embed_dim, cfg.attn_dim, cfg.time_dim);
        let (hh, ww) = self.spatial();
        let s = hh * ww;
        let l = tokens.len();
        let p = &self.denoiser;
        let ly = &self.layout;

        // text encoder
        let (wte, bte) = self.text.split_at(d * d);
        let mut states = vec![0.0; l * d];
        for (j, &id) in tokens.iter().enumerate() {
            let e = &self.embeddings[id * d..(id + 1) * d];
            for o in 0..d {
                let g: f64 = bte[o] + wte[o * d..(o + 1) * d].iter().zip(e).map(|(w, x)| w * x).sum::<f64>();
                states[j * d + o] = g.tanh();
            }
        }
        let mut pooled = vec![0.0; d];
        for j in 0..l {
            for o in 0..d {
                pooled[o] += states[j * d + o];
            }
        }
        pooled.iter_mut().for_each(|v| *v /= l as f64);

        // layer 1 with additive timestep / pooled conditioning
        let temb = self.time_embedding(t);
        let mut u1 = vec![0.0; hd * s];
        conv3x3(&z_t.data, c, &p[ly.w1.clone()], hd, hh, ww, &mut u1);
        let (b1, wt, wc) = (&p[ly.b1.clone()], &p[ly.wt.clone()], &p[ly.wc.clone()]);
        for o in 0..hd {
            let shift = b1[o]
                + (0..td).map(|k| wt[o * td + k] * temb[k]).sum::<f64>()
                + wc.get(o * d..(o + 1) * d).map_or(0.0, |w| w.iter().zip(&pooled).map(|(w, x)| w * x).sum());
            u1[o * s..(o + 1) * s].iter_mut().for_each(|v| *v += shift);
        }
        let y1: Vec<f64> = u1.iter().map(|v| v.tanh()).collect();

        // cross-attention: queries from y1, keys/values from token states
        let (wq, wk, wv) = (&p[ly.wq.clone()], &p[ly.wk.clone()], &p[ly.wv.clone()]);
        let mut q = vec![0.0; s * a];
        for pos in 0..s {
            for ai in 0..a {
                q[pos * a + ai] = (0..hd).map(|h| wq[ai * hd + h] * y1[h * s + pos]).sum();
            }
        }
        let mut k = vec![0.0; l * a];
        let mut v = vec![0.0; l * hd];
        for j in 0..l {
            let hj = &states[j * d..(j + 1) * d];
            for ai in 0..a {
                k[j * a + ai] = wk[ai * d..(ai + 1) * d].iter().zip(hj).map(|(w, x)| w * x).sum();
            }
            for h in 0..hd {
                v[j * hd + h] = wv[h * d..(h + 1) * d].iter().zip(hj).map(|(w, x)| w * x).sum();
            }
        }
        let inv_sqrt = 1.0 / (a as f64).sqrt();
        let mut attn = vec![0.0; s * l];
        for pos in 0..s {
            let row = &mut attn[pos * l..(pos + 1) * l];
            for j in 0..l {
                row[j] = (0..a).map(|ai| q[pos * a + ai] * k[j * a + ai]).sum::<f64>() * inv_sqrt;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        let mut r = y1.clone();
        for pos in 0..s {
            for j in 0..l {
                let aw = attn[pos * l + j];
                for h in 0..hd {
                    r[h * s + pos] += aw * v[j * hd + h];
                }
            }
        }

        // layers 2 and 3
        let mut u2 = vec![0.0; hd * s];
        conv3x3(&r, hd, &p[ly.w2.clone()], hd, hh, ww, &mut u2);
        let b2 = &p[ly.b2.clone()];
        for o in 0..hd {
            u2[o * s..(o + 1) * s].iter_mut().for_each(|x| *x += b2[o]);
        }
        let y2: Vec<f64> = u2.iter().map(|x| x.tanh()).collect();
        let mut out = vec![0.0; c * s];
        conv3x3(&y2, hd, &p[ly.w3.clone()], c, hh, ww, &mut out);
        let b3 = &p[ly.b3.clone()];
        for o in 0..c {
            out[o * s..(o + 1) * s].iter_mut().for_each(|x| *x += b3[o]);
        }

        Forward {
            states,
            pooled,
            temb,
            y1,
            q,
            k,
            v,
            attn,
            r,
            y2,
            out,
        }
    }

    /// Accumulate parameter gradients given `dout = dLoss/dout`.
    fn backward(&self, z_t: &Latent, tokens: &[TokenId], f: &Forward, dout: &[f64], grads: &mut ParamGrads) {
        let cfg = &self.config;
        let (c, hd, d, a, td) = (cfg.latent_channels, cfg.hidden, cfg.embed_dim, cfg.attn_dim, cfg.time_dim);
        let (hh, ww) = self.spatial();
        let s = hh * ww;
        let l = tokens.len();
        let p = &self.denoiser;
        let ly = &self.layout;
        let gd = &mut grads.denoiser;

        // layer 3
        for o in 0..c {
            gd[ly.b3.start + o] += dout[o * s..(o + 1) * s].iter().sum::<f64>();
        }
        let mut dy2 = vec![0.0; hd * s];
        conv3x3_backward(&f.y2, hd, &p[ly.w3.clone()], c, hh, ww, dout, &mut gd[ly.w3.clone()], Some(&mut dy2));

        // layer 2
        let du2: Vec<f64> = dy2.iter().zip(&f.y2).map(|(g, y)| g * (1.0 - y * y)).collect();
        for o in 0..hd {
            gd[ly.b2.start + o] += du2[o * s..(o + 1) * s].iter().sum::<f64>();
        }
        let mut dr = vec![0.0; hd * s];
        conv3x3_backward(&f.r, hd, &p[ly.w2.clone()], hd, hh, ww, &du2, &mut gd[ly.w2.clone()], Some(&mut dr));

        // cross-attention
        let (wq, wk, wv) = (&p[ly.wq.clone()], &p[ly.wk.clone()], &p[ly.wv.clone()]);
        let inv_sqrt = 1.0 / (a as f64).sqrt();
        let mut dy1 = dr.clone();
        let mut dv = vec![0.0; l * hd];
        let mut dk = vec![0.0; l * a];
        let mut dstates = vec![0.0; l * d];
        for pos in 0..s {
            let arow = &f.attn[pos * l..(pos + 1) * l];
            let mut da = vec![0.0; l];
            for j in 0..l {
                let mut acc = 0.0;
                for h in 0..hd {
                    let g = dr[h * s + pos];
                    dv[j * hd + h] += arow[j] * g;
                    acc += g * f.v[j * hd + h];
                }
                da[j] = acc;
            }
            let mix: f64 = arow.iter().zip(&da).map(|(x, y)| x * y).sum();
            let mut dq = vec![0.0; a];
            for j in 0..l {
                let ds = arow[j] * (da[j] - mix) * inv_sqrt;
                if ds == 0.0 {
                    continue;
                }
                for ai in 0..a {
                    dq[ai] += ds * f.k[j * a + ai];
                    dk[j * a + ai] += ds * f.q[pos * a + ai];
                }
            }
            for ai in 0..a {
                if dq[ai] == 0.0 {
                    continue;
                }
                for h in 0..hd {
                    gd[ly.wq.start + ai * hd + h] += dq[ai] * f.y1[h * s + pos];
                    dy1[h * s + pos] += wq[ai * hd + h] * dq[ai];
                }
            }
        }
        for j in 0..l {
            let hj = &f.states[j * d..(j + 1) * d];
            for ai in 0..a {
                let g = dk[j * a + ai];
                for x in 0..d {
                    gd[ly.wk.start + ai * d + x] += g * hj[x];
                    dstates[j * d + x] += wk[ai * d + x] * g;
                }
            }
            for h in 0..hd {
                let g = dv[j * hd + h];
                for x in 0..d {
                    gd[ly.wv.start + h * d + x] += g * hj[x];
                    dstates[j * d + x] += wv[h * d + x] * g;
                }
            }
        }

        // layer 1
        let du1: Vec<f64> = dy1.iter().zip(&f.y1).map(|(g, y)| g * (1.0 - y * y)).collect();
        let wc = &p[ly.wc.clone()];
        let mut dpooled = vec![0.0; d];
        for o in 0..hd {
            let total: f64 = du1[o * s..(o + 1) * s].iter().sum();
            gd[ly.b1.start + o] += total;
            for k in 0..td {
                gd[ly.wt.start + o * td + k] += total * f.temb[k];
            }
            if !wc.is_empty() {
                for k in 0..d {
                    gd[ly.wc.start + o * d + k] += total * f.pooled[k];
                    dpooled[k] += wc[o * d + k] * total;
                }
            }
        }
        conv3x3_backward(&z_t.data, c, &p[ly.w1.clone()], hd, hh, ww, &du1, &mut gd[ly.w1.clone()], None);

        // text encoder and embeddings
        let (wte, _) = self.text.split_at(d * d);
        for (j, &id) in tokens.iter().enumerate() {
            let e = &self.embeddings[id * d..(id + 1) * d];
            for o in 0..d {
                let hs = f.states[j * d + o];
                let dg = (dstates[j * d + o] + dpooled[o] / l as f64) * (1.0 - hs * hs);
                if dg == 0.0 {
                    continue;
                }
                grads.text_encoder[d * d + o] += dg;
                for x in 0..d {
                    grads.text_encoder[o * d + x] += dg * e[x];
                    grads.token_embeddings[id * d + x] += wte[o * d + x] * dg;
                }
            }
        }
    }

    /// Zero the query projection so every attention row is uniform over tokens.
    pub fn rig_uniform_attention(&mut self) {
        let r = self.layout.wq.clone();
        self.denoiser[r].iter_mut().for_each(|w| *w = 0.0);
    }

    /// Replace the denoiser with a hand-set, content-addressable one: the first
    /// layer passes the latent channels through, queries read those channels
    /// (scaled by `sharpness`), and the last two layers pass the attention
    /// output straight to the prediction. A token then attends wherever the
    /// latent colour matches its key, so the best key for a logo is known in
    /// advance. Keys and values keep their initial random projections.
    pub fn rig_content_attention(&mut self, sharpness: f64) {
        let (c, hd, a) = (self.config.latent_channels, self.config.hidden, self.config.attn_dim);
        let ly = self.layout.clone();
        let p = &mut self.denoiser;
        for r in [&ly.w1, &ly.b1, &ly.wt, &ly.wc, &ly.wq, &ly.w2, &ly.b2, &ly.w3, &ly.b3] {
            p[r.clone()].iter_mut().for_each(|w| *w = 0.0);
        }
        let centre = 4;
        for ch in 0..c.min(hd) {
            p[ly.w1.start + (ch * c + ch) * 9 + centre] = 1.0;
            p[ly.w3.start + (ch * hd + ch) * 9 + centre] = 1.0;
        }
        for h in 0..hd {
            p[ly.w2.start + (h * hd + h) * 9 + centre] = 1.0;
        }
        for i in 0..a.min(c) {
            p[ly.wq.start + i * hd + i] = sharpness;
        }
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<(), CheckpointError> {
        std::fs::create_dir_all(dir).map_err(|source| CheckpointError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let d = self.config.embed_dim;
        let groups = vec![
            write_group(dir, ParamGroup::TokenEmbeddings.name(), vec![self.vocab.len(), d], &self.embeddings)?,
            write_group(dir, ParamGroup::TextEncoder.name(), vec![d + 1, d], &self.text)?,
            write_group(dir, ParamGroup::Denoiser.name(), vec![self.denoiser.len()], &self.denoiser)?,
        ];
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT,
            backend: "toy".to_string(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            vocab: self.vocab.clone(),
            base_vocab_len: self.base_vocab_len,
            metadata: self.metadata.clone(),
            groups,
        };
        write_manifest(dir, &manifest)
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self, CheckpointError> {
        let manifest = CheckpointManifest::read(dir)?;
        if manifest.backend != "toy" {
            return Err(CheckpointError::Manifest(format!("expected a toy checkpoint, found `{}`", manifest.backend)));
        }
        let config: ToyConfig =
            serde_json::from_value(manifest.config.clone()).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let mut backend = ToyBackend::new(config);
        if manifest.vocab[..manifest.base_vocab_len] != backend.vocab[..] {
            return Err(CheckpointError::Manifest("base vocabulary differs from this build".to_string()));
        }
        let d = backend.config.embed_dim;
        let emb = read_group(dir, manifest.group(ParamGroup::TokenEmbeddings.name())?)?;
        let text = read_group(dir, manifest.group(ParamGroup::TextEncoder.name())?)?;
        let den = read_group(dir, manifest.group(ParamGroup::Denoiser.name())?)?;
        let expect = |name: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(CheckpointError::ShapeMismatch {
                    group: name.to_string(),
                    expected: want,
                    found: got,
                })
            }
        };
        expect("token_embeddings", emb.len(), manifest.vocab.len() * d)?;
        expect("text_encoder", text.len(), backend.text.len())?;
        expect("denoiser", den.len(), backend.denoiser.len())?;
        backend.vocab = manifest.vocab.clone();
        backend.index = backend.vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        if backend.index.len() != backend.vocab.len() {
            return Err(CheckpointError::Manifest("duplicate vocabulary entries".to_string()));
        }
        backend.embeddings = emb;
        backend.text = text;
        backend.denoiser = den;
        backend.metadata = manifest.metadata;
        Ok(backend)
    }
}

impl DiffusionBackend for ToyBackend {
    fn tokenize(&self, prompt: &str) -> Result<Vec<TokenId>, BackendError> {
        let mut ids = vec![self.index[BOS]];
        for raw in prompt.split_whitespace() {
            if raw.starts_with('<') && raw.ends_with('>') {
                let id = self.index.get(raw).copied().filter(|&id| id >= self.base_vocab_len);
                ids.push(id.ok_or_else(|| BackendError::UnknownToken(raw.to_string()))?);
                continue;
            }
            let word = raw.trim_matches(|c: char| ",.;:!?\"'()".contains(c)).to_lowercase();
            if word.is_empty() {
                continue;
            }
            let id = match self.index.get(&word) {
                Some(&id) if id < self.base_vocab_len && !word.starts_with("##") && word != BOS => id,
                _ => self.index[&format!("##{}", fnv1a(&word) % self.config.hash_buckets as u64)],
            };
            ids.push(id);
        }
        Ok(ids)
    }

    fn token_id(&self, literal: &str) -> Option<TokenId> {
        self.index.get(literal).copied()
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn embedding_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn register_token(&mut self, token: &SpecialToken, init: &TokenInit, rng: &mut dyn RngCore) -> Result<TokenId, BackendError> {
        if self.index.contains_key(&token.literal) {
            return Err(BackendError::DuplicateToken(token.literal.clone()));
        }
        let d = self.config.embed_dim;
        if token.embedding_dim != d {
            return Err(BackendError::EmbeddingDim {
                expected: d,
                got: token.embedding_dim,
            });
        }
        let row = match init {
            TokenInit::FromWord(word) => {
                let ids = self.tokenize(word)?;
                let id = match ids.as_slice() {
                    [_, id] if *id < self.base_vocab_len => *id,
                    _ => return Err(BackendError::InitWord(word.clone())),
                };
                self.embeddings[id * d..(id + 1) * d].to_vec()
            }
            TokenInit::Random => normal_vec(rng, d),
        };
        let id = self.vocab.len();
        self.vocab.push(token.literal.clone());
        self.index.insert(token.literal.clone(), id);
        self.embeddings.extend(row);
        Ok(id)
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn latent_shape(&self) -> LatentShape {
        let (h, w) = self.spatial();
        LatentShape {
            channels: self.config.latent_channels,
            height: h,
            width: w,
        }
    }

    fn image_size(&self) -> (u32, u32) {
        (self.config.image_size, self.config.image_size)
    }

    fn encode_image(&self, image: &RgbImage) -> Latent {
        let size = self.config.image_size;
        let img = resize_rgb(image, size, size);
        let ds = self.config.downsample as usize;
        let shape = self.latent_shape();
        let s = shape.height * shape.width;
        let mut pooled = vec![0.0; 3 * s];
        for (x, y, px) in img.enumerate_pixels() {
            let cell = (y as usize / ds) * shape.width + x as usize / ds;
            for ch in 0..3 {
                pooled[ch * s + cell] += px.0[ch] as f64 / 127.5 - 1.0;
            }
        }
        let norm = (ds * ds) as f64;
        pooled.iter_mut().for_each(|v| *v /= norm);
        let mut data = vec![0.0; shape.len()];
        for c in 0..shape.channels {
            for pos in 0..s {
                data[c * s + pos] = (0..3).map(|ch| self.codec_enc[c * 3 + ch] * pooled[ch * s + pos]).sum();
            }
        }
        Latent { shape, data }
    }

    fn decode_latent(&self, z: &Latent) -> RgbImage {
        let shape = z.shape;
        let ds = self.config.downsample;
        let s = shape.height * shape.width;
        let (w, h) = (shape.width as u32 * ds, shape.height as u32 * ds);
        RgbImage::from_fn(w, h, |x, y| {
            let pos = (y / ds) as usize * shape.width + (x / ds) as usize;
            let mut px = [0u8; 3];
            for (ch, out) in px.iter_mut().enumerate() {
                let v: f64 = (0..shape.channels)
                    .map(|c| self.codec_dec[ch * shape.channels + c] * z.data[c * s + pos])
                    .sum();
                *out = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
            }
            Rgb(px)
        })
    }

    fn predict_noise(&self, z_t: &Latent, t: usize, tokens: &[TokenId]) -> Result<Latent, BackendError> {
        self.check_inputs(z_t, t, tokens)?;
        let f = self.forward(z_t, t, tokens);
        Ok(Latent {
            shape: z_t.shape,
            data: f.out,
        })
    }

    fn loss_and_grads(&self, batch: &[TrainExample]) -> Result<(f64, ParamGrads), BackendError> {
        let mut grads = ParamGrads {
            token_embeddings: vec![0.0; self.embeddings.len()],
            text_encoder: vec![0.0; self.text.len()],
            denoiser: vec![0.0; self.denoiser.len()],
        };
        if batch.is_empty() {
            return Ok((0.0, grads));
        }
        let n_el = self.latent_shape().len();
        let norm = (batch.len() * n_el) as f64;
        let mut loss = 0.0;
        for ex in batch {
            self.check_inputs(&ex.latent, ex.t, &ex.tokens)?;
            let z_t = super::noise_latent(&ex.latent, ex.t, &ex.eps, &self.schedule)?;
            let f = self.forward(&z_t, ex.t, &ex.tokens);
            let mut dout = vec![0.0; n_el];
            for ((d, o), e) in dout.iter_mut().zip(&f.out).zip(&ex.eps.data) {
                let diff = o - e;
                loss += diff * diff;
                *d = 2.0 * diff / norm;
            }
            self.backward(&z_t, &ex.tokens, &f, &dout, &mut grads);
        }
        Ok((loss / norm, grads))
    }

    fn params(&self, group: ParamGroup) -> &[f64] {
        match group {
            ParamGroup::TokenEmbeddings => &self.embeddings,
            ParamGroup::TextEncoder => &self.text,
            ParamGroup::Denoiser => &self.denoiser,
        }
    }

    fn params_mut(&mut self, group: ParamGroup) -> &mut [f64] {
        match group {
            ParamGroup::TokenEmbeddings => &mut self.embeddings,
            ParamGroup::TextEncoder => &mut self.text,
            ParamGroup::Denoiser => &mut self.denoiser,
        }
    }

    fn token_rows(&self, id: TokenId) -> Range<usize> {
        let d = self.config.embed_dim;
        id * d..(id + 1) * d
    }

    fn guidance_scale(&self) -> f64 {
        self.config.guidance_scale
    }

    fn cross_attention(&self, z_t: &Latent, t: usize, tokens: &[TokenId]) -> Result<Vec<AttentionLayer>, BackendError> {
        self.check_inputs(z_t, t, tokens)?;
        let f = self.forward(z_t, t, tokens);
        let (h, w) = self.spatial();
        Ok(vec![AttentionLayer {
            layer: 0,
            height: h,
            width: w,
            num_tokens: tokens.len(),
            probs: f.attn,
        }])
    }

    fn metadata(&self) -> &BackendMetadata {
        &self.metadata
    }

    fn metadata_mut(&mut self) -> &mut BackendMetadata {
        &mut self.metadata
    }

    fn save(&self, dir: &Path) -> Result<(), BackendError> {
        Ok(self.save_checkpoint(dir)?)
    }
}
