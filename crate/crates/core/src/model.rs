//! Embodiment-conditioned encoder/decoder.
//!
//! The encoder reads standardised human features behind a handful of
//! shape-derived prompt tokens and keeps only the motion positions. The
//! decoder runs on that latent sequence, cross-attends to the robot's prompt
//! bank and is modulated by its pooled prompt through AdaLN. A per-robot head
//! maps the shared latent to that robot's output width.
//!
//! Parameter names starting with `robot.{k}.` belong to robot `k` alone.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, ParamId, ParamStore, Var, LN_EPS};
use crate::error::{Error, Result};
use crate::features::{human_width, robot_width, BETA_DIM};
use crate::rng::substream;

pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub ffn_ratio: usize,
    pub prompt_len: usize,
    pub human_prompt_len: usize,
    pub dropout: f64,
    pub joints: usize,
    /// DoF count per robot id.
    pub robot_dofs: Vec<usize>,
    pub window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk(vec![])
    }
}

impl ModelConfig {
    pub fn desk(robot_dofs: Vec<usize>) -> Self {
        ModelConfig {
            d_model: 64,
            n_enc_layers: 4,
            n_dec_layers: 4,
            n_heads: 4,
            ffn_ratio: 4,
            prompt_len: 8,
            human_prompt_len: 4,
            dropout: 0.1,
            joints: 12,
            robot_dofs,
            window: 16,
        }
    }

    pub fn paper(robot_dofs: Vec<usize>) -> Self {
        ModelConfig {
            d_model: 768,
            n_enc_layers: 12,
            n_dec_layers: 12,
            n_heads: 12,
            prompt_len: 16,
            window: 60,
            ..ModelConfig::desk(robot_dofs)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.prompt_len == 0 {
            return Err(Error::Config("prompt_len must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.robot_dofs.is_empty() {
            return Err(Error::Config("model needs at least one robot".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        human_width(self.joints)
    }

    pub fn output_width(&self, robot: usize) -> Result<usize> {
        self.robot_dofs
            .get(robot)
            .map(|&n| robot_width(n))
            .ok_or_else(|| self.unknown(robot))
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn unknown(&self, id: usize) -> Error {
        Error::UnknownRobot {
            id,
            known: (0..self.robot_dofs.len()).collect(),
        }
    }
}

/// Whether dropout is active. Evaluation is deterministic.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    fn dropout(&mut self, g: &mut Graph, x: Var, rate: f64) -> Var {
        match self {
            Mode::Eval => x,
            Mode::Train(rng) => g.dropout(x, rate, &mut **rng),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderLayer {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub ffn: Ffn,
}

/// Self-attention, cross-attention, FFN; one modulation head each.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderLayer {
    pub modulation: [Linear; 3],
    pub self_attn: Attention,
    pub cross_attn: Attention,
    pub ffn: Ffn,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobotParams {
    pub prompt: ParamId,
    pub adapter: Ffn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub input: Linear,
    pub human_prompt: Ffn,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: Norm,
    pub decoder: Vec<DecoderLayer>,
    pub robots: Vec<RobotParams>,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: crate::rng::StreamRng,
}

impl Builder<'_> {
    fn xavier(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array::uniform(&[fan_in, fan_out], bound, &mut self.rng);
        Linear {
            w: self.store.add(format!("{name}.w"), w, true),
            b: Some(self.store.add(format!("{name}.b"), Array::zeros(&[fan_out]), false)),
        }
    }

    fn zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.store.add(format!("{name}.w"), Array::zeros(&[fan_in, fan_out]), false),
            b: Some(self.store.add(format!("{name}.b"), Array::zeros(&[fan_out]), false)),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.store.add(format!("{name}.gain"), Array::full(&[d], 1.0), false),
            bias: self.store.add(format!("{name}.bias"), Array::zeros(&[d]), false),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        // a key bias shifts every score of a query equally, so softmax
        // cancels it and its gradient is identically zero
        let bound = (3.0 / d as f64).sqrt();
        let kw = Array::uniform(&[d, d], bound, &mut self.rng);
        let k = Linear {
            w: self.store.add(format!("{name}.k.w"), kw, true),
            b: None,
        };
        Attention {
            q: self.xavier(&format!("{name}.q"), d, d),
            k,
            v: self.xavier(&format!("{name}.v"), d, d),
            o: self.xavier(&format!("{name}.o"), d, d),
        }
    }

    fn ffn(&mut self, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Ffn {
        Ffn {
            up: self.xavier(&format!("{name}.up"), d_in, hidden),
            down: self.xavier(&format!("{name}.down"), hidden, d_out),
        }
    }
}

/// Model parameters plus the handles needed to run them.
#[derive(Clone, Debug)]
pub struct AdaMorph {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: ParamStore,
}

impl AdaMorph {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng: substream(seed, "init", 0),
        };
        let input = b.xavier("input", config.input_width(), d);
        let human_prompt = b.ffn("human_prompt", BETA_DIM, 2 * d, config.human_prompt_len * d);
        let hidden = config.ffn_ratio * d;
        let encoder = (0..config.n_enc_layers)
            .map(|l| EncoderLayer {
                norm1: b.norm(&format!("enc.{l}.norm1"), d),
                attn: b.attention(&format!("enc.{l}.attn"), d),
                norm2: b.norm(&format!("enc.{l}.norm2"), d),
                ffn: b.ffn(&format!("enc.{l}.ffn"), d, hidden, d),
            })
            .collect();
        let encoder_norm = b.norm("enc.norm", d);
        let decoder = (0..config.n_dec_layers)
            .map(|l| DecoderLayer {
                modulation: std::array::from_fn(|i| b.zero_linear(&format!("dec.{l}.mod{i}"), d, 2 * d)),
                self_attn: b.attention(&format!("dec.{l}.self_attn"), d),
                cross_attn: b.attention(&format!("dec.{l}.cross_attn"), d),
                ffn: b.ffn(&format!("dec.{l}.ffn"), d, hidden, d),
            })
            .collect();
        let robots = config
            .robot_dofs
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                let bank = Array::randn(&[config.prompt_len, d], PROMPT_INIT_STD, &mut b.rng);
                RobotParams {
                    prompt: b.store.add(format!("robot.{k}.prompt"), bank, false),
                    adapter: b.ffn(&format!("robot.{k}.adapter"), d, 2 * d, robot_width(n)),
                }
            })
            .collect();
        let layout = Layout {
            input,
            human_prompt,
            encoder,
            encoder_norm,
            decoder,
            robots,
        };
        Ok(AdaMorph {
            config,
            layout,
            params,
        })
    }

    pub fn robot(&self, k: usize) -> Result<&RobotParams> {
        self.layout.robots.get(k).ok_or_else(|| self.config.unknown(k))
    }

    /// Whether parameter `name` is owned by a single robot.
    pub fn robot_of(name: &str) -> Option<usize> {
        name.strip_prefix("robot.")?.split('.').next()?.parse().ok()
    }

    pub fn forward(&self, g: &mut Graph, x: &Array, beta: &Array, robot: usize, mode: Mode) -> Result<Var> {
        self.forward_with(&self.params, g, x, beta, robot, mode)
    }

    /// `[B, T, 9+6J]` standardised features and `[B, 10]` shape codes to
    /// `[B, T, 9+N_k]` standardised robot features.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        x: &Array,
        beta: &Array,
        robot: usize,
        mut mode: Mode,
    ) -> Result<Var> {
        let z = self.encode(store, g, x, beta, &mut mode)?;
        let h = self.decode(store, g, z, robot, &mut mode)?;
        self.adapt_output(store, g, h, robot)
    }

    pub fn encode(&self, store: &ParamStore, g: &mut Graph, x: &Array, beta: &Array, mode: &mut Mode) -> Result<Var> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let din = cfg.input_width();
        if x.ndim() != 3 || x.shape()[2] != din {
            return Err(Error::WidthMismatch {
                expected: din,
                got: x.shape().last().copied().unwrap_or(0),
            });
        }
        let (b, t) = (x.shape()[0], x.shape()[1]);
        if beta.shape() != [b, BETA_DIM] {
            return Err(Error::shape("encode beta", &[b, BETA_DIM], beta.shape()));
        }
        let xv = g.constant(x.clone());
        let tokens = linear(g, store, xv, self.layout.input)?;
        let pe = g.constant(positional_encoding(t, d));
        let tokens = g.add(tokens, pe)?;

        let bv = g.constant(beta.clone());
        let ph = mlp(g, store, bv, self.layout.human_prompt)?;
        let ph = g.reshape(ph, &[b, cfg.human_prompt_len, d])?;
        let mut h = g.concat(&[ph, tokens], 1)?;

        for layer in &self.layout.encoder {
            let n = affine_norm(g, store, h, layer.norm1)?;
            let a = self_attention(g, store, n, &layer.attn, cfg.n_heads)?;
            let a = mode.dropout(g, a, cfg.dropout);
            h = g.add(h, a)?;
            let n = affine_norm(g, store, h, layer.norm2)?;
            let f = mlp(g, store, n, layer.ffn)?;
            let f = mode.dropout(g, f, cfg.dropout);
            h = g.add(h, f)?;
        }
        let h = affine_norm(g, store, h, self.layout.encoder_norm)?;
        g.slice(h, 1, cfg.human_prompt_len, t)
    }

    pub fn decode(&self, store: &ParamStore, g: &mut Graph, z: Var, robot: usize, mode: &mut Mode) -> Result<Var> {
        let cfg = &self.config;
        let rp = *self.robot(robot)?;
        let bank = g.param(store, rp.prompt);
        let c_emb = pool_prompt(g, bank)?;
        let mut h = z;
        for layer in &self.layout.decoder {
            let n = modulated_norm(g, store, h, c_emb, layer.modulation[0])?;
            let a = self_attention(g, store, n, &layer.self_attn, cfg.n_heads)?;
            let a = mode.dropout(g, a, cfg.dropout);
            h = g.add(h, a)?;

            let n = modulated_norm(g, store, h, c_emb, layer.modulation[1])?;
            let (c, _) = cross_attention(g, store, n, bank, &layer.cross_attn, cfg.n_heads)?;
            let c = mode.dropout(g, c, cfg.dropout);
            h = g.add(h, c)?;

            let n = modulated_norm(g, store, h, c_emb, layer.modulation[2])?;
            let f = mlp(g, store, n, layer.ffn)?;
            let f = mode.dropout(g, f, cfg.dropout);
            h = g.add(h, f)?;
        }
        let last = g.shape(h).len() - 1;
        g.layer_norm(h, last, LN_EPS)
    }

    pub fn adapt_output(&self, store: &ParamStore, g: &mut Graph, h: Var, robot: usize) -> Result<Var> {
        let rp = *self.robot(robot)?;
        mlp(g, store, h, rp.adapter)
    }

    /// Sentinel-free view of one decoder sublayer's modulation for tests and
    /// diagnostics: `(γ, b)` for the given pooled prompt.
    pub fn modulation(&self, store: &ParamStore, g: &mut Graph, layer: usize, sublayer: usize, c_emb: Var) -> Result<(Var, Var)> {
        let head = self.layout.decoder[layer].modulation[sublayer];
        modulation(g, store, c_emb, head, self.config.d_model)
    }

    /// Pooled prompt of robot `k` as a plain vector.
    pub fn pooled_prompt(&self, k: usize) -> Result<Vec<f64>> {
        let rp = self.robot(k)?;
        let mut g = Graph::new();
        let bank = g.param(&self.params, rp.prompt);
        let c = pool_prompt(&mut g, bank)?;
        Ok(g.value(c).data().to_vec())
    }
}

/// Standard sine/cosine table `[t, d]`.
pub fn positional_encoding(t: usize, d: usize) -> Array {
    Array::from_fn(&[t, d], |idx| {
        let (pos, i) = ((idx / d) as f64, idx % d);
        let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
        if i % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

pub fn linear(g: &mut Graph, store: &ParamStore, x: Var, lin: Linear) -> Result<Var> {
    let w = g.param(store, lin.w);
    let y = g.matmul(x, w)?;
    match lin.b {
        Some(b) => {
            let b = g.param(store, b);
            g.add(y, b)
        }
        None => Ok(y),
    }
}

fn mlp(g: &mut Graph, store: &ParamStore, x: Var, f: Ffn) -> Result<Var> {
    let h = linear(g, store, x, f.up)?;
    let h = g.gelu(h);
    linear(g, store, h, f.down)
}

fn affine_norm(g: &mut Graph, store: &ParamStore, x: Var, n: Norm) -> Result<Var> {
    let last = g.shape(x).len() - 1;
    let y = g.layer_norm(x, last, LN_EPS)?;
    let gain = g.param(store, n.gain);
    let bias = g.param(store, n.bias);
    let y = g.mul(y, gain)?;
    g.add(y, bias)
}

/// Mean over the prompt axis: `[L_p, d] -> [d]`.
pub fn pool_prompt(g: &mut Graph, bank: Var) -> Result<Var> {
    g.mean(bank, 0)
}

/// `(1 + γ) ⊙ LN(h) + b` with LN over the last axis and no affine terms.
pub fn adaln(g: &mut Graph, h: Var, gamma: Var, b: Var) -> Result<Var> {
    let last = g.shape(h).len() - 1;
    let n = g.layer_norm(h, last, LN_EPS)?;
    let scaled = g.mul(n, gamma)?;
    let y = g.add(n, scaled)?;
    g.add(y, b)
}

fn modulation(g: &mut Graph, store: &ParamStore, c_emb: Var, head: Linear, d: usize) -> Result<(Var, Var)> {
    let c = g.reshape(c_emb, &[1, d])?;
    let gb = linear(g, store, c, head)?;
    let gb = g.reshape(gb, &[2 * d])?;
    Ok((g.slice(gb, 0, 0, d)?, g.slice(gb, 0, d, d)?))
}

fn modulated_norm(g: &mut Graph, store: &ParamStore, h: Var, c_emb: Var, head: Linear) -> Result<Var> {
    let d = *g.shape(h).last().expect("non-scalar");
    let (gamma, b) = modulation(g, store, c_emb, head, d)?;
    adaln(g, h, gamma, b)
}

/// `[B, T, d] -> [B, H, T, d/H]`.
fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, t, heads, d / heads])?;
    g.permute(x, &[0, 2, 1, 3])
}

fn merge_heads(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, h, t, dk) = (s[0], s[1], s[2], s[3]);
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b, t, h * dk])
}

fn attend(g: &mut Graph, q: Var, kt: Var, v: Var, dk: usize) -> Result<(Var, Var)> {
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let last = g.shape(scores).len() - 1;
    let weights = g.softmax(scores, last)?;
    Ok((g.matmul(weights, v)?, weights))
}

/// Bidirectional multi-head self-attention over the time axis.
pub fn self_attention(g: &mut Graph, store: &ParamStore, x: Var, a: &Attention, heads: usize) -> Result<Var> {
    let dk = g.shape(x)[2] / heads;
    let q = linear(g, store, x, a.q)?;
    let k = linear(g, store, x, a.k)?;
    let v = linear(g, store, x, a.v)?;
    let q = split_heads(g, q, heads)?;
    let k = split_heads(g, k, heads)?;
    let v = split_heads(g, v, heads)?;
    let kt = g.transpose(k)?;
    let (o, _) = attend(g, q, kt, v, dk)?;
    let o = merge_heads(g, o)?;
    linear(g, store, o, a.o)
}

/// Queries from `x: [B, T, d]`, keys and values from `memory: [L, d]`.
/// Returns the projected output and the `[B, H, T, L]` attention weights.
pub fn cross_attention(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    memory: Var,
    a: &Attention,
    heads: usize,
) -> Result<(Var, Var)> {
    let d = g.shape(x)[2];
    let dk = d / heads;
    let l = g.shape(memory)[0];
    let q = linear(g, store, x, a.q)?;
    let q = split_heads(g, q, heads)?;
    let k = linear(g, store, memory, a.k)?;
    let k = g.reshape(k, &[l, heads, dk])?;
    let kt = g.permute(k, &[1, 2, 0])?;
    let v = linear(g, store, memory, a.v)?;
    let v = g.reshape(v, &[l, heads, dk])?;
    let v = g.permute(v, &[1, 0, 2])?;
    let (o, w) = attend(g, q, kt, v, dk)?;
    let o = merge_heads(g, o)?;
    Ok((linear(g, store, o, a.o)?, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_params;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_heads: 2,
            ffn_ratio: 2,
            prompt_len: 2,
            human_prompt_len: 2,
            dropout: 0.1,
            joints: 2,
            robot_dofs: vec![3, 5],
            window: 3,
        }
    }

    fn inputs(cfg: &ModelConfig, b: usize, seed: u64) -> (Array, Array) {
        let mut rng = substream(seed, "inputs", 0);
        (
            Array::randn(&[b, cfg.window, cfg.input_width()], 1.0, &mut rng),
            Array::randn(&[b, BETA_DIM], 1.0, &mut rng),
        )
    }

    fn randomise_conditioning(m: &mut AdaMorph) {
        let mut rng = substream(0, "mod", 0);
        for (_, p) in m.params.iter_mut() {
            // large prompts give distinct keys, so query-side gradients sit
            // well above finite-difference noise
            let bound = if p.name.ends_with(".prompt") {
                2.0
            } else if p.name.contains(".mod") {
                0.5
            } else {
                continue;
            };
            for x in p.value.data_mut() {
                *x = rng.random_range(-bound..bound);
            }
        }
    }

    #[test]
    fn presets() {
        let d = ModelConfig::desk(vec![7]);
        assert_eq!((d.d_model, d.n_enc_layers, d.n_dec_layers, d.n_heads, d.prompt_len, d.human_prompt_len), (64, 4, 4, 4, 8, 4));
        let p = ModelConfig::paper(vec![7]);
        assert_eq!((p.d_model, p.n_dec_layers, p.n_heads, p.prompt_len), (768, 12, 12, 16));
        assert!(p.validate().is_ok());
        let bad = ModelConfig { n_heads: 3, ..d };
        assert!(bad.validate().is_err());
        assert_eq!(ModelConfig::desk(vec![7]).output_width(0).unwrap(), 16);
    }

    #[test]
    fn forward_shapes_and_errors() {
        let cfg = tiny();
        let m = AdaMorph::new(cfg.clone(), 1).unwrap();
        let (x, beta) = inputs(&cfg, 2, 0);
        for k in 0..2 {
            let mut g = Graph::new();
            let y = m.forward(&mut g, &x, &beta, k, Mode::Eval).unwrap();
            assert_eq!(g.shape(y), &[2, 3, 9 + cfg.robot_dofs[k]]);
            assert!(g.value(y).is_finite());
        }
        let mut g = Graph::new();
        assert!(matches!(m.forward(&mut g, &x, &beta, 2, Mode::Eval), Err(Error::UnknownRobot { id: 2, .. })));
        let wrong = Array::zeros(&[1, 3, 10]);
        assert!(matches!(
            m.forward(&mut g, &wrong, &Array::zeros(&[1, BETA_DIM]), 0, Mode::Eval),
            Err(Error::WidthMismatch { expected: 21, got: 10 })
        ));
    }

    #[test]
    fn encoder_depends_on_beta() {
        let cfg = tiny();
        let m = AdaMorph::new(cfg.clone(), 1).unwrap();
        let (x, beta) = inputs(&cfg, 1, 0);
        let beta2 = beta.map(|v| v + 0.5);
        let mut g = Graph::new();
        let z1 = m.encode(&m.params, &mut g, &x, &beta, &mut Mode::Eval).unwrap();
        let z2 = m.encode(&m.params, &mut g, &x, &beta2, &mut Mode::Eval).unwrap();
        assert_eq!(g.shape(z1), &[1, 3, 8]);
        assert!(g.value(z1).max_abs_diff(g.value(z2)) > 1e-9);
    }

    #[test]
    fn eval_is_deterministic_and_train_uses_dropout() {
        let cfg = tiny();
        let m = AdaMorph::new(cfg.clone(), 1).unwrap();
        let (x, beta) = inputs(&cfg, 1, 0);
        let run = |mode: Mode| {
            let mut g = Graph::new();
            let y = m.forward(&mut g, &x, &beta, 0, mode).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(Mode::Eval), run(Mode::Eval));
        let mut rng = substream(1, "dropout", 0);
        assert_ne!(run(Mode::Train(&mut rng)), run(Mode::Eval));
    }

    #[test]
    fn pool_prompt_examples() {
        let mut g = Graph::new();
        let bank = g.constant(Array::new(vec![2, 3], vec![0.0, 0.0, 0.0, 2.0, 2.0, 2.0]).unwrap());
        let c = pool_prompt(&mut g, bank).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn adaln_examples() {
        let mut g = Graph::new();
        let h = g.constant(Array::from_fn(&[3, 4], |i| (i as f64 * 1.3).sin()));
        let plain = g.layer_norm(h, 1, LN_EPS).unwrap();
        let zeros = g.constant(Array::zeros(&[4]));
        let ones = g.constant(Array::full(&[4], 1.0));
        let minus = g.constant(Array::full(&[4], -1.0));
        let b = g.constant(Array::from_vec(vec![0.5, -1.0, 2.0, 0.0]));
        let y0 = adaln(&mut g, h, zeros, zeros).unwrap();
        assert_eq!(g.value(y0), g.value(plain));
        let y1 = adaln(&mut g, h, ones, zeros).unwrap();
        assert!(g.value(y1).max_abs_diff(&g.value(plain).map(|v| 2.0 * v)) < 1e-15);
        let y2 = adaln(&mut g, h, minus, b).unwrap();
        for row in g.value(y2).data().chunks(4) {
            assert_eq!(row, &[0.5, -1.0, 2.0, 0.0]);
        }
    }

    #[test]
    fn zero_init_modulation_is_plain_layer_norm() {
        let cfg = tiny();
        let m = AdaMorph::new(cfg.clone(), 3).unwrap();
        let mut rng = substream(3, "pairs", 0);
        for _ in 0..10 {
            let mut g = Graph::new();
            let h = g.constant(Array::randn(&[2, 3, 8], 2.0, &mut rng));
            let c = g.constant(Array::randn(&[8], 5.0, &mut rng));
            let plain = g.layer_norm(h, 2, LN_EPS).unwrap();
            for s in 0..3 {
                let (gamma, b) = m.modulation(&m.params, &mut g, 0, s, c).unwrap();
                let y = adaln(&mut g, h, gamma, b).unwrap();
                assert_eq!(g.value(y), g.value(plain));
            }
        }
    }

    #[test]
    fn single_key_cross_attention_copies_value() {
        let cfg = ModelConfig {
            prompt_len: 1,
            ..tiny()
        };
        let m = AdaMorph::new(cfg, 5).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Array::randn(&[2, 3, 8], 1.0, &mut substream(0, "x", 0)));
        let bank = g.param(&m.params, m.layout.robots[0].prompt);
        let a = m.layout.decoder[0].cross_attn;
        let (out, w) = cross_attention(&mut g, &m.params, x, bank, &a, 2).unwrap();
        assert!(g.value(w).data().iter().all(|&v| v == 1.0));
        // every query position receives the same projected value row
        let o = g.value(out).data();
        for row in o.chunks(8) {
            for (a, b) in row.iter().zip(&o[..8]) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let m = AdaMorph::new(tiny(), 5).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Array::randn(&[2, 3, 8], 3.0, &mut substream(0, "x", 0)));
        let bank = g.param(&m.params, m.layout.robots[1].prompt);
        let (_, w) = cross_attention(&mut g, &m.params, x, bank, &m.layout.decoder[0].cross_attn, 2).unwrap();
        for row in g.value(w).data().chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adapter_is_framewise() {
        let m = AdaMorph::new(tiny(), 2).unwrap();
        let h = Array::randn(&[1, 3, 8], 1.0, &mut substream(0, "h", 0));
        let mut perm = h.clone();
        perm.data_mut()[..8].copy_from_slice(&h.data()[16..24]);
        perm.data_mut()[16..24].copy_from_slice(&h.data()[..8]);
        let mut g = Graph::new();
        let hv = g.constant(h);
        let pv = g.constant(perm);
        let y = m.adapt_output(&m.params, &mut g, hv, 1).unwrap();
        let yp = m.adapt_output(&m.params, &mut g, pv, 1).unwrap();
        let (a, b) = (g.value(y).data(), g.value(yp).data());
        let w = 14;
        assert_eq!(&a[..w], &b[2 * w..3 * w]);
        assert_eq!(&a[w..2 * w], &b[w..2 * w]);
    }

    #[test]
    fn batch_matches_single_windows() {
        let cfg = tiny();
        let m = AdaMorph::new(cfg.clone(), 8).unwrap();
        let (x, beta) = inputs(&cfg, 3, 1);
        let din = cfg.input_width();
        let mut g = Graph::new();
        let all = m.forward(&mut g, &x, &beta, 1, Mode::Eval).unwrap();
        let all = g.value(all).clone();
        let w = 3 * 14;
        for i in 0..3 {
            let xi = Array::new(vec![1, 3, din], x.data()[i * 3 * din..(i + 1) * 3 * din].to_vec()).unwrap();
            let bi = Array::new(vec![1, BETA_DIM], beta.data()[i * BETA_DIM..(i + 1) * BETA_DIM].to_vec()).unwrap();
            let mut g = Graph::new();
            let y = m.forward(&mut g, &xi, &bi, 1, Mode::Eval).unwrap();
            for (a, b) in g.value(y).data().iter().zip(&all.data()[i * w..(i + 1) * w]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn robot_gradients_are_isolated() {
        let cfg = tiny();
        let m = AdaMorph::new(cfg.clone(), 8).unwrap();
        let (x, beta) = inputs(&cfg, 2, 1);
        let mut g = Graph::new();
        let y = m.forward(&mut g, &x, &beta, 0, Mode::Eval).unwrap();
        let sq = g.mul(y, y).unwrap();
        let l = g.sum_all(sq);
        let grads = g.backward(l).unwrap();
        for (id, _) in grads.param_grads() {
            let name = &m.params.get(id).name;
            assert_ne!(AdaMorph::robot_of(name), Some(1), "{name}");
        }
    }

    #[test]
    fn full_model_gradient_check() {
        let cfg = tiny();
        let mut m = AdaMorph::new(cfg.clone(), 4).unwrap();
        randomise_conditioning(&mut m);
        let (x, beta) = inputs(&cfg, 2, 2);
        let report = grad_check_params(
            |g, store| {
                let y = m.forward_with(store, g, &x, &beta, 1, Mode::Eval)?;
                let s = g.sin(y);
                Ok(g.sum_all(s))
            },
            &m.params,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
