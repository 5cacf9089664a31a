//! The post-level classifier: per-modality projections, positional
//! augmentation, a two-stream cross-modal encoder, a self-attention encoder
//! over fused posts, masked mean pooling and a linear head.
//!
//! Attention masking contract: padded slots are never visible as keys, and
//! slots without an image are never visible as keys in attention over the
//! image stream. Inputs in such slots are zeroed before projection, so no
//! stored value there can reach the output.

mod checkpoint;
mod params;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{BoundParams, ParamStore};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Gradients, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::sampling::{Batch, PostWindow, TauOrigin};
use crate::temporal::{learned_on_tape, time2vec_on_tape, PositionalMode, TimeTransform};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub cross_layers: usize,
    pub cross_heads: usize,
    pub self_layers: usize,
    pub self_heads: usize,
    pub ffn_multiplier: usize,
    pub dropout: f64,
    pub positional: PositionalMode,
    pub text_dim: usize,
    pub image_dim: usize,
    /// Window size K.
    pub window: usize,
    /// Rows of the learned positional table.
    pub max_window: usize,
    pub time_epsilon: f64,
    pub time_transform: TimeTransform,
    pub tau_origin: TauOrigin,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            cross_layers: 4,
            cross_heads: 8,
            self_layers: 2,
            self_heads: 8,
            ffn_multiplier: 4,
            dropout: 0.1,
            positional: PositionalMode::Time2Vec,
            text_dim: 768,
            image_dim: 512,
            window: 128,
            max_window: 512,
            time_epsilon: 1.0,
            time_transform: TimeTransform::Reciprocal,
            tau_origin: TauOrigin::FirstPost,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d_model == 0 || self.text_dim == 0 || self.image_dim == 0 {
            return bad("d_model, text_dim and image_dim must be positive".into());
        }
        if self.cross_heads == 0 || self.d_model % self.cross_heads != 0 {
            return bad(format!("d_model {} not divisible by cross_heads {}", self.d_model, self.cross_heads));
        }
        if self.self_heads == 0 || self.d_model % self.self_heads != 0 {
            return bad(format!("d_model {} not divisible by self_heads {}", self.d_model, self.self_heads));
        }
        if self.ffn_multiplier == 0 {
            return bad("ffn_multiplier must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.window == 0 {
            return bad("window must be at least 1".into());
        }
        if self.positional == PositionalMode::Learned && self.window > self.max_window {
            return bad(format!(
                "learned positions support K <= {}, got {}",
                self.max_window, self.window
            ));
        }
        if !(self.time_epsilon > 0.0) {
            return bad("time_epsilon must be positive".into());
        }
        Ok(())
    }
}

/// Where the projected post embeddings come from.
pub(crate) enum StreamInput<'a> {
    /// Project the window's raw embeddings.
    Raw,
    /// Use these `[k, d_model]` matrices as differentiable stream inputs in
    /// place of the projections.
    Projected { text: &'a Tensor, image: &'a Tensor },
}

pub(crate) struct WindowGraph {
    pub logit: Var,
    pub text_stream_input: Var,
    pub image_stream_input: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Optimizer steps applied since initialisation.
    pub trained_steps: u64,
}

fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("static shape")
}

fn add_linear<R: Rng + ?Sized>(s: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut R) -> Result<()> {
    s.insert(format!("{name}.w"), xavier(i, o, rng))?;
    s.insert(format!("{name}.b"), Tensor::zeros(&[o]))
}

fn add_norm(s: &mut ParamStore, name: &str, d: usize) -> Result<()> {
    s.insert(format!("{name}.g"), Tensor::new(vec![d], vec![1.0; d])?)?;
    s.insert(format!("{name}.b"), Tensor::zeros(&[d]))
}

fn add_attention<R: Rng + ?Sized>(s: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        add_linear(s, &format!("{name}.{p}"), d, d, rng)?;
    }
    add_norm(s, &format!("{name}.ln"), d)
}

fn add_ffn<R: Rng + ?Sized>(s: &mut ParamStore, name: &str, d: usize, mult: usize, rng: &mut R) -> Result<()> {
    add_linear(s, &format!("{name}.up"), d, d * mult, rng)?;
    add_linear(s, &format!("{name}.down"), d * mult, d, rng)?;
    add_norm(s, &format!("{name}.ln"), d)
}

struct Ctx<'a, R: Rng + ?Sized> {
    tape: &'a mut Tape,
    p: &'a BoundParams<'a>,
    cfg: &'a ModelConfig,
    train: bool,
    rng: &'a mut R,
}

impl<R: Rng + ?Sized> Ctx<'_, R> {
    fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p.var(&format!("{name}.w"))?;
        let b = self.p.var(&format!("{name}.b"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_bias(y, b)
    }

    fn norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let g = self.p.var(&format!("{name}.g"))?;
        let b = self.p.var(&format!("{name}.b"))?;
        self.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    /// Multi-head attention of `queries` over `keys_values`.
    fn attention(
        &mut self,
        name: &str,
        queries: Var,
        keys_values: Var,
        query_mask: &[bool],
        key_mask: &[bool],
        heads: usize,
    ) -> Result<Var> {
        let d = self.cfg.d_model;
        let dh = d / heads;
        let q = self.linear(queries, &format!("{name}.q"))?;
        let k = self.linear(keys_values, &format!("{name}.k"))?;
        let v = self.linear(keys_values, &format!("{name}.v"))?;
        let (nq, nk) = (query_mask.len(), key_mask.len());
        let mut additive = vec![0.0; nq * nk];
        for (r, qm) in query_mask.iter().enumerate() {
            for (c, km) in key_mask.iter().enumerate() {
                if !qm || !km {
                    additive[r * nk + c] = f64::NEG_INFINITY;
                }
            }
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.tape.slice(q, 1, h * dh, dh)?;
            let kh = self.tape.slice(k, 1, h * dh, dh)?;
            let vh = self.tape.slice(v, 1, h * dh, dh)?;
            let kt = self.tape.transpose(kh)?;
            let scores = self.tape.matmul(qh, kt)?;
            let scores = self.tape.scale(scores, scale)?;
            let weights = self.tape.softmax(scores, Some(&additive))?;
            ctx.push(self.tape.matmul(weights, vh)?);
        }
        let merged = if heads == 1 { ctx[0] } else { self.tape.concat(&ctx, 1)? };
        self.linear(merged, &format!("{name}.o"))
    }

    /// Post-norm residual attention sublayer. With no visible key the
    /// sublayer is the identity.
    fn attention_block(
        &mut self,
        name: &str,
        x: Var,
        kv: Var,
        query_mask: &[bool],
        key_mask: &[bool],
        heads: usize,
    ) -> Result<Var> {
        if !key_mask.iter().any(|m| *m) {
            return Ok(x);
        }
        let a = self.attention(name, x, kv, query_mask, key_mask, heads)?;
        let a = self.tape.dropout(a, self.cfg.dropout, self.rng, self.train)?;
        let s = self.tape.add(x, a)?;
        self.norm(s, &format!("{name}.ln"))
    }

    fn ffn_block(&mut self, name: &str, x: Var) -> Result<Var> {
        let h = self.linear(x, &format!("{name}.up"))?;
        let h = self.tape.gelu(h)?;
        let h = self.linear(h, &format!("{name}.down"))?;
        let h = self.tape.dropout(h, self.cfg.dropout, self.rng, self.train)?;
        let s = self.tape.add(x, h)?;
        self.norm(s, &format!("{name}.ln"))
    }
}

fn masked_rows(data: &[f64], cols: usize, keep: &[bool]) -> Vec<f64> {
    let mut out = data.to_vec();
    for (r, k) in keep.iter().enumerate() {
        if !k {
            out[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    out
}

fn factors(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect()
}

impl Model {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut s = ParamStore::new();
        add_linear(&mut s, "text_proj", config.text_dim, d, rng)?;
        add_linear(&mut s, "image_proj", config.image_dim, d, rng)?;
        match config.positional {
            PositionalMode::Time2Vec => {
                let omega = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                let phi = (0..d)
                    .map(|_| rng.gen_range(-std::f64::consts::PI..=std::f64::consts::PI))
                    .collect();
                s.insert("pos.omega", Tensor::new(vec![1, d], omega)?)?;
                s.insert("pos.phi", Tensor::new(vec![d], phi)?)?;
            }
            PositionalMode::Learned => {
                let table = (0..config.max_window * d)
                    .map(|_| rng.gen_range(-0.05..=0.05))
                    .collect();
                s.insert("pos.table", Tensor::new(vec![config.max_window, d], table)?)?;
            }
            PositionalMode::Zero => {}
        }
        for l in 0..config.cross_layers {
            for a in ["t2i", "i2t", "t_self", "i_self"] {
                add_attention(&mut s, &format!("cross.{l}.{a}"), d, rng)?;
            }
            for f in ["t_ffn", "i_ffn"] {
                add_ffn(&mut s, &format!("cross.{l}.{f}"), d, config.ffn_multiplier, rng)?;
            }
        }
        for l in 0..config.self_layers {
            add_attention(&mut s, &format!("self.{l}.attn"), d, rng)?;
            add_ffn(&mut s, &format!("self.{l}.ffn"), d, config.ffn_multiplier, rng)?;
        }
        add_linear(&mut s, "cls", d, 1, rng)?;
        Ok(Self {
            config,
            params: s,
            trained_steps: 0,
        })
    }

    fn check_window(&self, w: &PostWindow) -> Result<()> {
        let c = &self.config;
        if w.text_dim != c.text_dim {
            return Err(Error::shape(
                "forward",
                format!("text dim {} vs config {}", w.text_dim, c.text_dim),
            ));
        }
        if w.image_dim != c.image_dim && w.image_count() > 0 {
            return Err(Error::shape(
                "forward",
                format!("image dim {} vs config {}", w.image_dim, c.image_dim),
            ));
        }
        if w.real_count() == 0 {
            return Err(Error::InvalidArgument(format!("window of {} is all padding", w.user_id)));
        }
        if c.positional == PositionalMode::Learned && w.k > c.max_window {
            return Err(Error::InvalidArgument(format!(
                "window size {} exceeds learned table size {}",
                w.k, c.max_window
            )));
        }
        Ok(())
    }

    /// Records the full classifier for one window.
    pub(crate) fn build_window<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &BoundParams<'_>,
        window: &PostWindow,
        input: StreamInput<'_>,
        train: bool,
        rng: &mut R,
    ) -> Result<WindowGraph> {
        self.check_window(window)?;
        let cfg = &self.config;
        let k = window.k;
        let pad = &window.pad_mask;
        let img = &window.image_mask;
        let pad_f = factors(pad);
        let img_f = factors(img);
        let mut cx = Ctx {
            tape,
            p: bound,
            cfg,
            train,
            rng,
        };

        let (t_in, i_in) = match input {
            StreamInput::Raw => {
                let text = masked_rows(&window.text, cfg.text_dim, pad);
                let image = if window.image_dim == cfg.image_dim {
                    masked_rows(&window.image, cfg.image_dim, img)
                } else {
                    vec![0.0; k * cfg.image_dim]
                };
                let text = cx.tape.constant(Tensor::new(vec![k, cfg.text_dim], text)?);
                let image = cx.tape.constant(Tensor::new(vec![k, cfg.image_dim], image)?);
                (cx.linear(text, "text_proj")?, cx.linear(image, "image_proj")?)
            }
            StreamInput::Projected { text, image } => (cx.tape.param(text.clone()), cx.tape.param(image.clone())),
        };

        let pos = match cfg.positional {
            PositionalMode::Time2Vec => {
                let omega = bound.var("pos.omega")?;
                let phi = bound.var("pos.phi")?;
                Some(time2vec_on_tape(
                    cx.tape,
                    omega,
                    phi,
                    &window.tau,
                    &pad_f,
                    cfg.time_epsilon,
                    cfg.time_transform,
                )?)
            }
            PositionalMode::Learned => {
                let table = bound.var("pos.table")?;
                Some(learned_on_tape(cx.tape, table, &window.position, &pad_f)?)
            }
            PositionalMode::Zero => None,
        };
        let (mut t, mut i) = match pos {
            Some(p) => (cx.tape.add(t_in, p)?, cx.tape.add(i_in, p)?),
            None => (t_in, i_in),
        };

        for l in 0..cfg.cross_layers {
            let h = cfg.cross_heads;
            let t_x = cx.attention_block(&format!("cross.{l}.t2i"), t, i, pad, img, h)?;
            let i_x = cx.attention_block(&format!("cross.{l}.i2t"), i, t, pad, pad, h)?;
            let t_s = cx.attention_block(&format!("cross.{l}.t_self"), t_x, t_x, pad, pad, h)?;
            let i_s = cx.attention_block(&format!("cross.{l}.i_self"), i_x, i_x, pad, img, h)?;
            t = cx.ffn_block(&format!("cross.{l}.t_ffn"), t_s)?;
            i = cx.ffn_block(&format!("cross.{l}.i_ffn"), i_s)?;
        }

        let image_part = cx.tape.scale_rows(i, &img_f)?;
        let mut fused = cx.tape.add(t, image_part)?;
        for l in 0..cfg.self_layers {
            fused = cx.attention_block(&format!("self.{l}.attn"), fused, fused, pad, pad, cfg.self_heads)?;
            fused = cx.ffn_block(&format!("self.{l}.ffn"), fused)?;
        }
        let pooled = cx.tape.masked_mean(fused, 0, pad)?;
        let logit = cx.linear(pooled, "cls")?;
        Ok(WindowGraph {
            logit,
            text_stream_input: t_in,
            image_stream_input: i_in,
        })
    }

    /// Logit of a single window.
    pub fn window_logit<R: Rng + ?Sized>(&self, window: &PostWindow, train: bool, rng: &mut R) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.params.register(&mut tape, false);
        let g = self.build_window(&mut tape, &bound, window, StreamInput::Raw, train, rng)?;
        Ok(tape.value(g.logit).data()[0])
    }

    /// Projected `[k, d_model]` text and image stream inputs, before positional
    /// augmentation.
    pub fn project_window(&self, window: &PostWindow) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.params.register(&mut tape, false);
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let g = self.build_window(&mut tape, &bound, window, StreamInput::Raw, false, &mut rng)?;
        Ok((tape.value(g.text_stream_input).clone(), tape.value(g.image_stream_input).clone()))
    }

    /// Eval-mode logit with the stream inputs replaced by `text` and `image`,
    /// and the logit's gradient with respect to both.
    pub fn logit_with_inputs(&self, window: &PostWindow, text: &Tensor, image: &Tensor) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new().strict(true);
        let bound = self.params.register(&mut tape, false);
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let g = self.build_window(&mut tape, &bound, window, StreamInput::Projected { text, image }, false, &mut rng)?;
        let logit = tape.value(g.logit).data()[0];
        let mut grads = tape.backward(g.logit)?;
        let gt = grads.take(g.text_stream_input).ok_or(Error::NonFinite { op: "logit_with_inputs" })?;
        let gi = grads.take(g.image_stream_input).ok_or(Error::NonFinite { op: "logit_with_inputs" })?;
        Ok((logit, gt, gi))
    }

    /// One logit per window in the batch.
    pub fn forward<R: Rng + ?Sized>(&self, batch: &Batch, train: bool, rng: &mut R) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        batch.windows.iter().map(|w| self.window_logit(w, train, rng)).collect()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.text_dim != self.config.text_dim {
            return Err(Error::shape(
                "forward",
                format!("batch text dim {} vs config {}", batch.text_dim, self.config.text_dim),
            ));
        }
        Ok(())
    }

    /// Mean binary cross-entropy over the batch and its gradient for every
    /// parameter, in [`ParamStore`] order.
    pub fn loss_and_grads<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        train: bool,
        rng: &mut R,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check_batch(batch)?;
        if batch.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        let n = batch.len() as f64;
        let mut total = vec![Vec::new(); self.params.len()];
        for (j, (_, t)) in self.params.iter().enumerate() {
            total[j] = vec![0.0; t.len()];
        }
        let mut loss = 0.0;
        for w in &batch.windows {
            let mut tape = Tape::new();
            let bound = self.params.register(&mut tape, true);
            let g = self.build_window(&mut tape, &bound, w, StreamInput::Raw, train, rng)?;
            let l = tape.bce_with_logits(g.logit, &[w.label.as_f64()])?;
            loss += tape.value(l).data()[0] / n;
            let vars = bound.vars.clone();
            drop(bound);
            let grads: Gradients = tape.backward_with_seed(l, &[1.0 / n])?;
            for (acc, v) in total.iter_mut().zip(vars) {
                if let Some(g) = grads.get(v) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
        }
        Ok((loss, total))
    }

    /// Mean loss only, with dropout off.
    pub fn loss<R: Rng + ?Sized>(&self, batch: &Batch, rng: &mut R) -> Result<f64> {
        let logits = self.forward(batch, false, rng)?;
        crate::training::bce_loss(&logits, &batch.labels())
    }
}

/// Elementwise sigmoid.
pub fn predict_proba(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|z| sigmoid(*z)).collect()
}
