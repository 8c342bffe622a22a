//! Small trainable convolutional encoder.
//!
//! Architecture: a stack of 3x3 stride-2 convolutions with ReLU, a flatten,
//! and a linear embedding layer. An optional projection head (ReLU then
//! linear) is applied only during contrastive training. All parameters live
//! in one flat `Vec<f32>` so the optimizer and checkpoints treat them as a
//! single buffer.

use image::RgbImage;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::preprocess;
use crate::seed;

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: isize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvEncoderConfig {
    pub input_size_px: u32,
    /// Output channels of each convolution.
    pub channels: Vec<usize>,
    pub embedding_dim: usize,
    /// Width of the training-only projection head; `None` disables it.
    pub projection_dim: Option<usize>,
    /// Initialization seed.
    pub seed: u64,
}

impl Default for ConvEncoderConfig {
    fn default() -> Self {
        ConvEncoderConfig {
            input_size_px: 32,
            channels: vec![8, 16, 32],
            embedding_dim: 64,
            projection_dim: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    in_c: usize,
    out_c: usize,
    in_hw: usize,
    out_hw: usize,
    w: usize,
    b: usize,
}

impl ConvLayer {
    fn n_weights(&self) -> usize {
        self.out_c * self.in_c * KERNEL * KERNEL
    }

    fn forward(&self, params: &[f32], x: &[f32], out: &mut [f32]) {
        let w = &params[self.w..self.w + self.n_weights()];
        let b = &params[self.b..self.b + self.out_c];
        let (ih, oh) = (self.in_hw as isize, self.out_hw);
        for o in 0..self.out_c {
            for oy in 0..oh {
                for ox in 0..oh {
                    let mut acc = b[o];
                    for i in 0..self.in_c {
                        let wbase = (o * self.in_c + i) * KERNEL * KERNEL;
                        let xbase = i * self.in_hw * self.in_hw;
                        for ky in 0..KERNEL {
                            let iy = (oy * STRIDE) as isize + ky as isize - PAD;
                            if iy < 0 || iy >= ih {
                                continue;
                            }
                            for kx in 0..KERNEL {
                                let ix = (ox * STRIDE) as isize + kx as isize - PAD;
                                if ix < 0 || ix >= ih {
                                    continue;
                                }
                                acc += w[wbase + ky * KERNEL + kx]
                                    * x[xbase + iy as usize * self.in_hw + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + oy) * oh + ox] = acc;
                }
            }
        }
    }

    /// Accumulates parameter gradients and, if requested, the input gradient.
    fn backward(
        &self,
        params: &[f32],
        x: &[f32],
        gout: &[f32],
        grads: &mut [f32],
        mut gx: Option<&mut [f32]>,
    ) {
        let nw = self.n_weights();
        let (ih, oh) = (self.in_hw as isize, self.out_hw);
        for o in 0..self.out_c {
            for oy in 0..oh {
                for ox in 0..oh {
                    let g = gout[(o * oh + oy) * oh + ox];
                    if g == 0.0 {
                        continue;
                    }
                    grads[self.b + o] += g;
                    for i in 0..self.in_c {
                        let wbase = (o * self.in_c + i) * KERNEL * KERNEL;
                        let xbase = i * self.in_hw * self.in_hw;
                        for ky in 0..KERNEL {
                            let iy = (oy * STRIDE) as isize + ky as isize - PAD;
                            if iy < 0 || iy >= ih {
                                continue;
                            }
                            for kx in 0..KERNEL {
                                let ix = (ox * STRIDE) as isize + kx as isize - PAD;
                                if ix < 0 || ix >= ih {
                                    continue;
                                }
                                let xi = xbase + iy as usize * self.in_hw + ix as usize;
                                let wi = wbase + ky * KERNEL + kx;
                                debug_assert!(wi < nw);
                                grads[self.w + wi] += g * x[xi];
                                if let Some(gx) = gx.as_deref_mut() {
                                    gx[xi] += g * params[self.w + wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct DenseLayer {
    in_f: usize,
    out_f: usize,
    w: usize,
    b: usize,
}

impl DenseLayer {
    fn forward(&self, params: &[f32], x: &[f32]) -> Vec<f32> {
        (0..self.out_f)
            .map(|o| {
                let row = &params[self.w + o * self.in_f..self.w + (o + 1) * self.in_f];
                params[self.b + o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>()
            })
            .collect()
    }

    fn backward(&self, params: &[f32], x: &[f32], gout: &[f32], grads: &mut [f32]) -> Vec<f32> {
        let mut gx = vec![0.0f32; self.in_f];
        for o in 0..self.out_f {
            let g = gout[o];
            grads[self.b + o] += g;
            let base = self.w + o * self.in_f;
            for i in 0..self.in_f {
                grads[base + i] += g * x[i];
                gx[i] += g * params[base + i];
            }
        }
        gx
    }
}

/// Intermediate activations of one forward pass, kept for backprop.
pub struct ForwardTrace {
    /// Input followed by each post-ReLU convolution output.
    activations: Vec<Vec<f32>>,
    embedding: Vec<f32>,
    projected: Option<(Vec<f32>, Vec<f32>)>,
}

impl ForwardTrace {
    /// The vector the training loss sees: the projection head output if the
    /// head is enabled, otherwise the embedding.
    pub fn output(&self) -> &[f32] {
        match &self.projected {
            Some((_, out)) => out,
            None => &self.embedding,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvEncoder {
    name: String,
    id: String,
    config: ConvEncoderConfig,
    convs: Vec<ConvLayer>,
    head: DenseLayer,
    projection: Option<DenseLayer>,
    params: Vec<f32>,
}

impl ConvEncoder {
    /// He-initialized encoder.
    pub fn new(name: &str, config: ConvEncoderConfig) -> Self {
        let (convs, head, projection, n_params) = Self::layout(&config);
        let mut params = vec![0.0f32; n_params];
        let mut rng = seed::rng(config.seed);
        let mut init = |offset: usize, len: usize, fan_in: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for p in &mut params[offset..offset + len] {
                *p = normal.sample(&mut rng) as f32;
            }
        };
        for c in &convs {
            init(c.w, c.n_weights(), c.in_c * KERNEL * KERNEL);
        }
        init(head.w, head.in_f * head.out_f, head.in_f);
        if let Some(p) = projection {
            init(p.w, p.in_f * p.out_f, p.in_f);
        }
        Self::from_parts(name, config, params).expect("layout matches")
    }

    /// Rebuilds an encoder from saved parameters.
    pub fn from_parts(name: &str, config: ConvEncoderConfig, params: Vec<f32>) -> Result<Self, String> {
        if config.channels.is_empty() || config.embedding_dim == 0 {
            return Err("encoder needs at least one conv layer and a positive embedding dim".into());
        }
        let (convs, head, projection, n_params) = Self::layout(&config);
        if params.len() != n_params {
            return Err(format!(
                "parameter count {} does not match architecture ({n_params})",
                params.len()
            ));
        }
        let mut enc = ConvEncoder {
            name: name.to_string(),
            id: String::new(),
            config,
            convs,
            head,
            projection,
            params,
        };
        enc.refresh_id();
        Ok(enc)
    }

    fn layout(config: &ConvEncoderConfig) -> (Vec<ConvLayer>, DenseLayer, Option<DenseLayer>, usize) {
        let mut offset = 0;
        let mut convs = Vec::new();
        let mut in_c = 3;
        let mut hw = config.input_size_px as usize;
        for &out_c in &config.channels {
            let out_hw = (hw + 2 * PAD as usize - KERNEL) / STRIDE + 1;
            let w = offset;
            offset += out_c * in_c * KERNEL * KERNEL;
            let b = offset;
            offset += out_c;
            convs.push(ConvLayer {
                in_c,
                out_c,
                in_hw: hw,
                out_hw,
                w,
                b,
            });
            in_c = out_c;
            hw = out_hw;
        }
        let flat = in_c * hw * hw;
        let mut dense = |in_f: usize, out_f: usize| {
            let w = offset;
            offset += in_f * out_f;
            let b = offset;
            offset += out_f;
            DenseLayer { in_f, out_f, w, b }
        };
        let head = dense(flat, config.embedding_dim);
        let projection = config
            .projection_dim
            .map(|p| dense(config.embedding_dim, p));
        (convs, head, projection, offset)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// `<name>@<first 12 hex digits of the weight digest>`; changes whenever
    /// the weights do.
    pub fn encoder_id(&self) -> &str {
        &self.id
    }

    pub fn refresh_id(&mut self) {
        let digest = self.weights_digest();
        self.id = format!("{}@{}", self.name, &digest[..12]);
    }

    pub fn weights_digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn config(&self) -> &ConvEncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// HWC `[0, 1]` pixels to a centered CHW tensor.
    fn input_tensor(&self, image: &RgbImage) -> Vec<f32> {
        let s = self.config.input_size_px as usize;
        let hwc = preprocess(image, self.config.input_size_px);
        let mut chw = vec![0.0f32; 3 * s * s];
        for (p, px) in hwc.chunks_exact(3).enumerate() {
            for c in 0..3 {
                chw[c * s * s + p] = (px[c] - 0.5) * 4.0;
            }
        }
        chw
    }

    pub fn forward(&self, image: &RgbImage) -> ForwardTrace {
        let mut activations = vec![self.input_tensor(image)];
        for layer in &self.convs {
            let mut out = vec![0.0f32; layer.out_c * layer.out_hw * layer.out_hw];
            layer.forward(&self.params, activations.last().expect("input present"), &mut out);
            out.iter_mut().for_each(|v| *v = v.max(0.0));
            activations.push(out);
        }
        let embedding = self
            .head
            .forward(&self.params, activations.last().expect("conv output"));
        let projected = self.projection.map(|p| {
            let hidden: Vec<f32> = embedding.iter().map(|v| v.max(0.0)).collect();
            let out = p.forward(&self.params, &hidden);
            (hidden, out)
        });
        ForwardTrace {
            activations,
            embedding,
            projected,
        }
    }

    /// Evaluation-mode embedding (projection head skipped).
    pub fn embed(&self, image: &RgbImage) -> Vec<f32> {
        self.forward(image).embedding
    }

    /// Parameter gradient for one image given `dL/d output`.
    pub fn backward(&self, trace: &ForwardTrace, grad_output: &[f32]) -> Vec<f32> {
        let mut grads = vec![0.0f32; self.params.len()];
        let grad_embedding = match (&self.projection, &trace.projected) {
            (Some(p), Some((hidden, _))) => {
                let gh = p.backward(&self.params, hidden, grad_output, &mut grads);
                gh.iter()
                    .zip(&trace.embedding)
                    .map(|(g, &e)| if e > 0.0 { *g } else { 0.0 })
                    .collect()
            }
            _ => grad_output.to_vec(),
        };
        let mut g = self.head.backward(
            &self.params,
            trace.activations.last().expect("conv output"),
            &grad_embedding,
            &mut grads,
        );
        for (li, layer) in self.convs.iter().enumerate().rev() {
            let out = &trace.activations[li + 1];
            for (gv, &a) in g.iter_mut().zip(out) {
                if a <= 0.0 {
                    *gv = 0.0;
                }
            }
            let input = &trace.activations[li];
            if li == 0 {
                layer.backward(&self.params, input, &g, &mut grads, None);
            } else {
                let mut gx = vec![0.0f32; input.len()];
                layer.backward(&self.params, input, &g, &mut grads, Some(&mut gx));
                g = gx;
            }
        }
        grads
    }

    /// Summed parameter gradient over a batch. Per-image work runs in
    /// parallel; the reduction order is fixed so results do not depend on
    /// the thread count.
    pub fn backward_batch(&self, traces: &[ForwardTrace], grad_outputs: &[Vec<f32>]) -> Vec<f32> {
        let per_image: Vec<Vec<f32>> = traces
            .par_iter()
            .zip(grad_outputs.par_iter())
            .map(|(t, g)| self.backward(t, g))
            .collect();
        let mut total = vec![0.0f32; self.params.len()];
        for g in per_image {
            for (t, v) in total.iter_mut().zip(g) {
                *t += v;
            }
        }
        total
    }
}
