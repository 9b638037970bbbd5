//! The U-Net style feature backbone with its four prediction heads, and the
//! single-file parameter container.
//!
//! The encoder stacks residual blocks (conv - norm - relu twice, summed with
//! an identity or 1x1 shortcut) with 2x2 max pooling between levels; the
//! decoder mirrors it with nearest upsampling and merges skip connections by
//! summation. Heads: a sigmoid seed map, positional and conditional
//! embeddings (all 1x1 convs over the backbone features), and a two-layer
//! perceptron over embedding offsets realized as 1x1 convs so a whole crop is
//! evaluated in one op.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BnRunning, Graph, Var};
use crate::tensor::{self, Dtype, Tensor};

/// Spatial sizes are padded up to a multiple of this before the backbone runs.
pub const PAD_MULTIPLE: usize = 32;

pub const MODEL_MAGIC: &[u8; 8] = b"INSEGMDL";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub d_f: usize,
    pub d_p: usize,
    pub d_e: usize,
    pub phi_hidden: usize,
    pub seed: u64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 64, 128],
            d_f: 16,
            d_p: 4,
            d_e: 4,
            phi_hidden: 32,
            seed: 0,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::invalid("config", "in_channels must be positive"));
        }
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::invalid("config", "need at least 2 nonzero level widths"));
        }
        if self.d_p < 2 {
            return Err(Error::invalid("config", "d_p must be at least 2"));
        }
        if self.d_f == 0 || self.phi_hidden == 0 {
            return Err(Error::invalid("config", "d_f and phi_hidden must be positive"));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// (out_channels, in_channels, k, k)
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn he_uniform(rng: &mut ChaCha8Rng, oc: usize, ic: usize, k: usize) -> Self {
        let fan_in = (ic * k * k) as f64;
        let limit = (6.0 / fan_in).sqrt();
        let data: Vec<f64> = (0..oc * ic * k * k).map(|_| rng.gen_range(-limit..limit)).collect();
        Self {
            weight: Tensor::new(vec![oc, ic, k, k], data).expect("sized"),
            bias: Tensor::zeros(vec![oc]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: BnRunning,
}

impl BnLayer {
    fn identity(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            running: BnRunning::new(channels),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub conv1: ConvLayer,
    pub bn1: BnLayer,
    pub conv2: ConvLayer,
    pub bn2: BnLayer,
    /// 1x1 projection when in and out channel counts differ.
    pub shortcut: Option<ConvLayer>,
}

impl ResBlock {
    fn init(rng: &mut ChaCha8Rng, ic: usize, oc: usize) -> Self {
        Self {
            conv1: ConvLayer::he_uniform(rng, oc, ic, 3),
            bn1: BnLayer::identity(oc),
            conv2: ConvLayer::he_uniform(rng, oc, oc, 3),
            bn2: BnLayer::identity(oc),
            shortcut: (ic != oc).then(|| ConvLayer::he_uniform(rng, oc, ic, 1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ArchitectureConfig,
    pub enc: Vec<ResBlock>,
    /// Channel projections after each decoder upsample, indexed by the level
    /// they project down to.
    pub dec_proj: Vec<ConvLayer>,
    pub dec: Vec<ResBlock>,
    pub final_conv: ConvLayer,
    pub seed_head: ConvLayer,
    pub pos_head: ConvLayer,
    pub emb_head: ConvLayer,
    pub phi_fc1: ConvLayer,
    pub phi_fc2: ConvLayer,
}

/// Everything the backbone predicts for one image, in eval mode: the seed map
/// S, positional embedding P, conditional embedding E, and the coordinate
/// grid O matching P's channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    /// (H, W), sigmoid-bounded.
    pub s: Tensor,
    /// (D_p, H, W)
    pub p: Tensor,
    /// (D_e, H, W)
    pub e: Tensor,
    /// (D_p, H, W); channel 0 = row, channel 1 = column, rest zero.
    pub o: Tensor,
}

impl FeatureBundle {
    pub fn height(&self) -> usize {
        self.s.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.s.shape()[1]
    }
}

/// Pixel coordinate grid: channel 0 holds the row index, channel 1 the
/// column index, any further channels are zero.
pub fn coordinate_grid(h: usize, w: usize, d_p: usize) -> Tensor {
    assert!(d_p >= 2, "coordinate grid needs at least row and column channels");
    let mut data = vec![0.0; d_p * h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = y as f64;
            data[h * w + y * w + x] = x as f64;
        }
    }
    Tensor::new(vec![d_p, h, w], data).expect("sized")
}

/// Vars for one residual block's parameters on some graph.
#[derive(Clone, Copy)]
struct BlockVars {
    c1: (Var, Var),
    bn1: (Var, Var, usize),
    c2: (Var, Var),
    bn2: (Var, Var, usize),
    short: Option<(Var, Var)>,
}

/// All model parameters registered as leaves on a graph; `bn` slots index
/// into the running-stat list in storage order.
pub struct NetVars {
    enc: Vec<BlockVars>,
    proj: Vec<(Var, Var)>,
    dec: Vec<BlockVars>,
    final_c: (Var, Var),
    s_head: (Var, Var),
    p_head: (Var, Var),
    e_head: (Var, Var),
    pub phi1: (Var, Var),
    pub phi2: (Var, Var),
}

/// Head outputs on the tape, batch-shaped (N, ., H, W).
pub struct HeadVars {
    pub seed_logit: Var,
    pub seed: Var,
    pub pos: Var,
    pub emb: Var,
}

trait BnApply {
    fn bn(&mut self, g: &mut Graph, x: Var, gamma: Var, beta: Var, slot: usize) -> Result<Var>;
}

struct TrainBn<'a> {
    slots: Vec<&'a mut BnRunning>,
}

impl BnApply for TrainBn<'_> {
    fn bn(&mut self, g: &mut Graph, x: Var, gamma: Var, beta: Var, slot: usize) -> Result<Var> {
        g.batchnorm_train(x, gamma, beta, self.slots[slot])
    }
}

struct EvalBn<'a> {
    slots: Vec<&'a BnRunning>,
}

impl BnApply for EvalBn<'_> {
    fn bn(&mut self, g: &mut Graph, x: Var, gamma: Var, beta: Var, slot: usize) -> Result<Var> {
        g.batchnorm_eval(x, gamma, beta, self.slots[slot])
    }
}

impl ModelParams {
    /// Fresh parameters, deterministic in `config.seed`: He-uniform conv
    /// weights, zero biases except the final perceptron bias at -1 so early
    /// predicted instances start small.
    pub fn build(config: ArchitectureConfig) -> Result<ModelParams> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let l = config.levels();
        let mut enc = Vec::with_capacity(l);
        let mut ic = config.in_channels;
        for &wd in &config.widths {
            enc.push(ResBlock::init(&mut rng, ic, wd));
            ic = wd;
        }
        let mut dec_proj = Vec::with_capacity(l - 1);
        let mut dec = Vec::with_capacity(l - 1);
        for i in 0..l - 1 {
            dec_proj.push(ConvLayer::he_uniform(&mut rng, config.widths[i], config.widths[i + 1], 1));
            dec.push(ResBlock::init(&mut rng, config.widths[i], config.widths[i]));
        }
        let final_conv = ConvLayer::he_uniform(&mut rng, config.d_f, config.widths[0], 1);
        let seed_head = ConvLayer::he_uniform(&mut rng, 1, config.d_f, 1);
        let pos_head = ConvLayer::he_uniform(&mut rng, config.d_p, config.d_f, 1);
        let emb_head = ConvLayer::he_uniform(&mut rng, config.d_e, config.d_f, 1);
        let phi_fc1 =
            ConvLayer::he_uniform(&mut rng, config.phi_hidden, config.d_p + config.d_e, 1);
        let mut phi_fc2 = ConvLayer::he_uniform(&mut rng, 1, config.phi_hidden, 1);
        phi_fc2.bias = Tensor::full(vec![1], -1.0);
        Ok(ModelParams {
            config,
            enc,
            dec_proj,
            dec,
            final_conv,
            seed_head,
            pos_head,
            emb_head,
            phi_fc1,
            phi_fc2,
        })
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Learnable tensors in storage order; the name scheme doubles as the
    /// container directory.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (i, b) in self.enc.iter().enumerate() {
            push_block(&mut out, &format!("enc{i}"), b);
        }
        for (i, p) in self.dec_proj.iter().enumerate() {
            out.push((format!("dec{i}.proj.weight"), &p.weight));
            out.push((format!("dec{i}.proj.bias"), &p.bias));
        }
        for (i, b) in self.dec.iter().enumerate() {
            push_block(&mut out, &format!("dec{i}"), b);
        }
        for (name, c) in self.head_layers() {
            out.push((format!("{name}.weight"), &c.weight));
            out.push((format!("{name}.bias"), &c.bias));
        }
        out
    }

    fn head_layers(&self) -> [(&'static str, &ConvLayer); 6] {
        [
            ("final", &self.final_conv),
            ("seed_head", &self.seed_head),
            ("pos_head", &self.pos_head),
            ("emb_head", &self.emb_head),
            ("phi_fc1", &self.phi_fc1),
            ("phi_fc2", &self.phi_fc2),
        ]
    }

    /// Mutable view in the same order as `named_params`.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, b) in self.enc.iter_mut().enumerate() {
            push_block_mut(&mut out, &format!("enc{i}"), b);
        }
        for (i, p) in self.dec_proj.iter_mut().enumerate() {
            out.push((format!("dec{i}.proj.weight"), &mut p.weight));
            out.push((format!("dec{i}.proj.bias"), &mut p.bias));
        }
        for (i, b) in self.dec.iter_mut().enumerate() {
            push_block_mut(&mut out, &format!("dec{i}"), b);
        }
        let heads: [(&'static str, &mut ConvLayer); 6] = [
            ("final", &mut self.final_conv),
            ("seed_head", &mut self.seed_head),
            ("pos_head", &mut self.pos_head),
            ("emb_head", &mut self.emb_head),
            ("phi_fc1", &mut self.phi_fc1),
            ("phi_fc2", &mut self.phi_fc2),
        ];
        for (name, c) in heads {
            out.push((format!("{name}.weight"), &mut c.weight));
            out.push((format!("{name}.bias"), &mut c.bias));
        }
        out
    }

    /// Batch-norm running statistics as named tensors, in slot order.
    pub fn named_buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, bn) in self.bn_layers() {
            out.push((
                format!("{name}.running_mean"),
                Tensor::new(vec![bn.running.mean.len()], bn.running.mean.clone()).expect("sized"),
            ));
            out.push((
                format!("{name}.running_var"),
                Tensor::new(vec![bn.running.var.len()], bn.running.var.clone()).expect("sized"),
            ));
        }
        out
    }

    fn bn_layers(&self) -> Vec<(String, &BnLayer)> {
        let mut out = Vec::new();
        for (i, b) in self.enc.iter().enumerate() {
            out.push((format!("enc{i}.bn1"), &b.bn1));
            out.push((format!("enc{i}.bn2"), &b.bn2));
        }
        for (i, b) in self.dec.iter().enumerate() {
            out.push((format!("dec{i}.bn1"), &b.bn1));
            out.push((format!("dec{i}.bn2"), &b.bn2));
        }
        out
    }

    fn bn_running_mut(&mut self) -> Vec<&mut BnRunning> {
        let mut out: Vec<&mut BnRunning> = Vec::new();
        for b in self.enc.iter_mut() {
            out.push(&mut b.bn1.running);
            out.push(&mut b.bn2.running);
        }
        for b in self.dec.iter_mut() {
            out.push(&mut b.bn1.running);
            out.push(&mut b.bn2.running);
        }
        out
    }

    fn bn_running(&self) -> Vec<&BnRunning> {
        self.bn_layers().into_iter().map(|(_, b)| &b.running).collect()
    }

    /// Registers every parameter as a graph leaf. Returns the var structure
    /// for the forward wiring plus (name, var) pairs for gradient lookup.
    pub fn register(&self, g: &mut Graph, requires_grad: bool) -> (NetVars, Vec<(String, Var)>) {
        let mut named = Vec::new();
        let mut slot = 0usize;
        let reg_conv = |g: &mut Graph, named: &mut Vec<(String, Var)>, name: String, c: &ConvLayer| {
            let w = g.leaf(c.weight.clone(), requires_grad);
            let b = g.leaf(c.bias.clone(), requires_grad);
            named.push((format!("{name}.weight"), w));
            named.push((format!("{name}.bias"), b));
            (w, b)
        };
        let reg_block = |g: &mut Graph,
                             named: &mut Vec<(String, Var)>,
                             slot: &mut usize,
                             prefix: &str,
                             b: &ResBlock| {
            let c1 = reg_conv(g, named, format!("{prefix}.conv1"), &b.conv1);
            let g1 = g.leaf(b.bn1.gamma.clone(), requires_grad);
            let b1 = g.leaf(b.bn1.beta.clone(), requires_grad);
            named.push((format!("{prefix}.bn1.gamma"), g1));
            named.push((format!("{prefix}.bn1.beta"), b1));
            let s1 = *slot;
            *slot += 1;
            let c2 = reg_conv(g, named, format!("{prefix}.conv2"), &b.conv2);
            let g2 = g.leaf(b.bn2.gamma.clone(), requires_grad);
            let b2 = g.leaf(b.bn2.beta.clone(), requires_grad);
            named.push((format!("{prefix}.bn2.gamma"), g2));
            named.push((format!("{prefix}.bn2.beta"), b2));
            let s2 = *slot;
            *slot += 1;
            let short = b.shortcut.as_ref().map(|c| reg_conv(g, named, format!("{prefix}.shortcut"), c));
            BlockVars { c1, bn1: (g1, b1, s1), c2, bn2: (g2, b2, s2), short }
        };

        let enc: Vec<BlockVars> = self
            .enc
            .iter()
            .enumerate()
            .map(|(i, b)| reg_block(g, &mut named, &mut slot, &format!("enc{i}"), b))
            .collect();
        let proj: Vec<(Var, Var)> = self
            .dec_proj
            .iter()
            .enumerate()
            .map(|(i, p)| reg_conv(g, &mut named, format!("dec{i}.proj"), p))
            .collect();
        let dec: Vec<BlockVars> = self
            .dec
            .iter()
            .enumerate()
            .map(|(i, b)| reg_block(g, &mut named, &mut slot, &format!("dec{i}"), b))
            .collect();
        let final_c = reg_conv(g, &mut named, "final".into(), &self.final_conv);
        let s_head = reg_conv(g, &mut named, "seed_head".into(), &self.seed_head);
        let p_head = reg_conv(g, &mut named, "pos_head".into(), &self.pos_head);
        let e_head = reg_conv(g, &mut named, "emb_head".into(), &self.emb_head);
        let phi1 = reg_conv(g, &mut named, "phi_fc1".into(), &self.phi_fc1);
        let phi2 = reg_conv(g, &mut named, "phi_fc2".into(), &self.phi_fc2);
        (NetVars { enc, proj, dec, final_c, s_head, p_head, e_head, phi1, phi2 }, named)
    }

    fn check_channels(&self, c: usize) -> Result<()> {
        if c != self.config.in_channels {
            return Err(Error::invalid(
                "forward",
                format!("input has {c} channels, model expects {}", self.config.in_channels),
            ));
        }
        Ok(())
    }

    /// Training forward over a batch var (N, C, H, W) with H, W multiples of
    /// [`PAD_MULTIPLE`]. Updates batch-norm running statistics.
    #[allow(clippy::type_complexity)]
    pub fn forward_train(&mut self, g: &mut Graph, x: Var) -> Result<(HeadVars, NetVars, Vec<(String, Var)>)> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::invalid("forward", format!("expected 4-d batch, got {shape:?}")));
        }
        self.check_channels(shape[1])?;
        if !shape[2].is_multiple_of(PAD_MULTIPLE) || !shape[3].is_multiple_of(PAD_MULTIPLE) {
            return Err(Error::invalid(
                "forward",
                format!("training batch dims {}x{} must be multiples of {PAD_MULTIPLE}", shape[2], shape[3]),
            ));
        }
        let (vars, named) = self.register(g, true);
        let mut bn = TrainBn { slots: self.bn_running_mut() };
        let heads = run_unet(g, x, &vars, &mut bn)?;
        Ok((heads, vars, named))
    }

    /// Eval forward for one (C, H, W) image: pads reflectively to the next
    /// multiples of [`PAD_MULTIPLE`], runs the net with running statistics,
    /// and crops every head back to H x W.
    pub fn forward_eval(&self, x: &Tensor) -> Result<FeatureBundle> {
        let shape = x.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::invalid("forward", format!("expected (c, h, w) image, got {shape:?}")));
        }
        self.check_channels(shape[0])?;
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let pad_h = (PAD_MULTIPLE - h % PAD_MULTIPLE) % PAD_MULTIPLE;
        let pad_w = (PAD_MULTIPLE - w % PAD_MULTIPLE) % PAD_MULTIPLE;

        let mut g = Graph::new();
        let x0 = g.leaf(x.reshaped(vec![1, c, h, w])?, false);
        let xp = if pad_h > 0 || pad_w > 0 { g.reflect_pad(x0, pad_h, pad_w)? } else { x0 };
        let (vars, _) = self.register(&mut g, false);
        let mut bn = EvalBn { slots: self.bn_running() };
        let heads = run_unet(&mut g, xp, &vars, &mut bn)?;

        let crop_back = |g: &mut Graph, v: Var| -> Result<Var> {
            if pad_h > 0 || pad_w > 0 {
                g.crop(v, 0, 0, 0, h, w)
            } else {
                Ok(v)
            }
        };
        let s = crop_back(&mut g, heads.seed)?;
        let p = crop_back(&mut g, heads.pos)?;
        let e = crop_back(&mut g, heads.emb)?;
        Ok(FeatureBundle {
            s: g.value(s).reshaped(vec![h, w])?,
            p: g.value(p).reshaped(vec![self.config.d_p, h, w])?,
            e: g.value(e).reshaped(vec![self.config.d_e, h, w])?,
            o: coordinate_grid(h, w, self.config.d_p),
        })
    }

    /// Perceptron logits over one crop: offsets (D_p, h, w) relative to a
    /// seed, conditional embedding (D_e, h, w) broadcast from the seed pixel.
    pub fn phi_forward(&self, offsets: &Tensor, e_crop: &Tensor) -> Result<Tensor> {
        let os = offsets.shape().to_vec();
        let es = e_crop.shape().to_vec();
        if os.len() != 3 || os[0] != self.config.d_p {
            return Err(Error::invalid(
                "phi_forward",
                format!("offsets shape {os:?}, expected ({}, h, w)", self.config.d_p),
            ));
        }
        if es.len() != 3 || es[0] != self.config.d_e || es[1..] != os[1..] {
            return Err(Error::invalid(
                "phi_forward",
                format!("embedding shape {es:?} does not match offsets {os:?}"),
            ));
        }
        let (h, w) = (os[1], os[2]);
        let mut g = Graph::new();
        let ov = g.leaf(offsets.reshaped(vec![1, os[0], h, w])?, false);
        let ev = g.leaf(e_crop.reshaped(vec![1, es[0], h, w])?, false);
        let w1 = g.leaf(self.phi_fc1.weight.clone(), false);
        let b1 = g.leaf(self.phi_fc1.bias.clone(), false);
        let w2 = g.leaf(self.phi_fc2.weight.clone(), false);
        let b2 = g.leaf(self.phi_fc2.bias.clone(), false);
        let logits = phi_graph(&mut g, ov, ev, (w1, b1), (w2, b2))?;
        g.value(logits).reshaped(vec![h, w])
    }
}

/// In-graph perceptron over concatenated offset and embedding channels.
pub fn phi_graph(
    g: &mut Graph,
    offsets: Var,
    emb: Var,
    phi1: (Var, Var),
    phi2: (Var, Var),
) -> Result<Var> {
    let joined = if g.value(emb).shape()[1] == 0 { offsets } else { g.concat_c(offsets, emb)? };
    let hidden = g.conv2d(joined, phi1.0, phi1.1)?;
    let hidden = g.relu(hidden);
    g.conv2d(hidden, phi2.0, phi2.1)
}

fn run_block(g: &mut Graph, x: Var, b: &BlockVars, bn: &mut dyn BnApply) -> Result<Var> {
    let y = g.conv2d(x, b.c1.0, b.c1.1)?;
    let y = bn.bn(g, y, b.bn1.0, b.bn1.1, b.bn1.2)?;
    let y = g.relu(y);
    let y = g.conv2d(y, b.c2.0, b.c2.1)?;
    let y = bn.bn(g, y, b.bn2.0, b.bn2.1, b.bn2.2)?;
    let y = g.relu(y);
    let sc = match b.short {
        Some((w, bias)) => g.conv2d(x, w, bias)?,
        None => x,
    };
    g.add(y, sc)
}

fn run_unet(g: &mut Graph, x: Var, vars: &NetVars, bn: &mut dyn BnApply) -> Result<HeadVars> {
    let levels = vars.enc.len();
    let mut skips = Vec::with_capacity(levels);
    let mut cur = x;
    for (i, blk) in vars.enc.iter().enumerate() {
        if i > 0 {
            cur = g.maxpool2x2(cur)?;
        }
        cur = run_block(g, cur, blk, bn)?;
        skips.push(cur);
    }
    for i in (0..levels - 1).rev() {
        cur = g.upsample2x(cur)?;
        cur = g.conv2d(cur, vars.proj[i].0, vars.proj[i].1)?;
        cur = g.add(cur, skips[i])?;
        cur = run_block(g, cur, &vars.dec[i], bn)?;
    }
    let f = g.conv2d(cur, vars.final_c.0, vars.final_c.1)?;
    let seed_logit = g.conv2d(f, vars.s_head.0, vars.s_head.1)?;
    let seed = g.sigmoid(seed_logit);
    let pos = g.conv2d(f, vars.p_head.0, vars.p_head.1)?;
    let emb = g.conv2d(f, vars.e_head.0, vars.e_head.1)?;
    Ok(HeadVars { seed_logit, seed, pos, emb })
}

fn push_block<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, b: &'a ResBlock) {
    out.push((format!("{prefix}.conv1.weight"), &b.conv1.weight));
    out.push((format!("{prefix}.conv1.bias"), &b.conv1.bias));
    out.push((format!("{prefix}.bn1.gamma"), &b.bn1.gamma));
    out.push((format!("{prefix}.bn1.beta"), &b.bn1.beta));
    out.push((format!("{prefix}.conv2.weight"), &b.conv2.weight));
    out.push((format!("{prefix}.conv2.bias"), &b.conv2.bias));
    out.push((format!("{prefix}.bn2.gamma"), &b.bn2.gamma));
    out.push((format!("{prefix}.bn2.beta"), &b.bn2.beta));
    if let Some(s) = &b.shortcut {
        out.push((format!("{prefix}.shortcut.weight"), &s.weight));
        out.push((format!("{prefix}.shortcut.bias"), &s.bias));
    }
}

fn push_block_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, b: &'a mut ResBlock) {
    out.push((format!("{prefix}.conv1.weight"), &mut b.conv1.weight));
    out.push((format!("{prefix}.conv1.bias"), &mut b.conv1.bias));
    out.push((format!("{prefix}.bn1.gamma"), &mut b.bn1.gamma));
    out.push((format!("{prefix}.bn1.beta"), &mut b.bn1.beta));
    out.push((format!("{prefix}.conv2.weight"), &mut b.conv2.weight));
    out.push((format!("{prefix}.conv2.bias"), &mut b.conv2.bias));
    out.push((format!("{prefix}.bn2.gamma"), &mut b.bn2.gamma));
    out.push((format!("{prefix}.bn2.beta"), &mut b.bn2.beta));
    if let Some(s) = &mut b.shortcut {
        out.push((format!("{prefix}.shortcut.weight"), &mut s.weight));
        out.push((format!("{prefix}.shortcut.bias"), &mut s.bias));
    }
}

// ---------------------------------------------------------------------------
// Container serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ArchitectureConfig,
    tensors: Vec<TensorEntry>,
}

/// Writes the single-file container: magic, header length, JSON header with a
/// tensor directory, then concatenated tensor payloads.
pub fn save_model(params: &ModelParams, path: &Path) -> Result<()> {
    let p = path.display().to_string();
    let buffers = params.named_buffers();
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    {
        let mut append = |name: &str, t: &Tensor| -> Result<()> {
            let start = payload.len() as u64;
            tensor::write_rtf(&mut payload, t, Dtype::F64, &p)?;
            entries.push(TensorEntry {
                name: name.to_string(),
                offset: start,
                len: payload.len() as u64 - start,
            });
            Ok(())
        };
        for (name, t) in params.named_params() {
            append(&name, t)?;
        }
        for (name, t) in &buffers {
            append(name, t)?;
        }
    }
    let header = Header { version: MODEL_VERSION, config: params.config.clone(), tensors: entries };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::format(&p, format!("header encode: {e}")))?;

    let mut f = std::fs::File::create(path).map_err(|e| Error::io(&p, e))?;
    f.write_all(MODEL_MAGIC).map_err(|e| Error::io(&p, e))?;
    f.write_all(&(header_json.len() as u32).to_le_bytes()).map_err(|e| Error::io(&p, e))?;
    f.write_all(&header_json).map_err(|e| Error::io(&p, e))?;
    f.write_all(&payload).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let p = path.display().to_string();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(&p, e))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|e| Error::io(&p, e))?;
    if &magic != MODEL_MAGIC {
        return Err(Error::format(&p, "not a model container (bad magic)"));
    }
    let mut len_bytes = [0u8; 4];
    f.read_exact(&mut len_bytes).map_err(|e| Error::io(&p, e))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json).map_err(|e| Error::io(&p, e))?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::format(&p, format!("header decode: {e}")))?;
    if header.version != MODEL_VERSION {
        return Err(Error::format(
            &p,
            format!("unsupported container version {} (expected {MODEL_VERSION})", header.version),
        ));
    }
    let mut payload = Vec::new();
    f.read_to_end(&mut payload).map_err(|e| Error::io(&p, e))?;

    let mut loaded: std::collections::HashMap<String, Tensor> = std::collections::HashMap::new();
    for e in &header.tensors {
        let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
        if end > payload.len() || start > end {
            return Err(Error::format(&p, format!("tensor {} outside payload", e.name)));
        }
        let (t, _) = tensor::read_rtf(&mut &payload[start..end], &p)?;
        if loaded.insert(e.name.clone(), t).is_some() {
            return Err(Error::format(&p, format!("duplicate tensor {}", e.name)));
        }
    }

    let mut params = ModelParams::build(header.config)?;
    for (name, t) in params.named_params_mut() {
        let stored = loaded
            .remove(&name)
            .ok_or_else(|| Error::format(&p, format!("missing tensor {name}")))?;
        if stored.shape() != t.shape() {
            return Err(Error::format(
                &p,
                format!("tensor {name}: stored shape {:?} vs expected {:?}", stored.shape(), t.shape()),
            ));
        }
        *t = stored;
    }
    // buffers: running stats per bn layer, same naming as named_buffers
    let buffer_names: Vec<String> = params.named_buffers().into_iter().map(|(n, _)| n).collect();
    let mut running = params.bn_running_mut();
    for (i, name) in buffer_names.iter().enumerate() {
        let stored = loaded
            .remove(name)
            .ok_or_else(|| Error::format(&p, format!("missing tensor {name}")))?;
        let slot = &mut running[i / 2];
        let dst = if name.ends_with("running_mean") { &mut slot.mean } else { &mut slot.var };
        if stored.numel() != dst.len() {
            return Err(Error::format(&p, format!("tensor {name}: wrong length")));
        }
        dst.copy_from_slice(stored.data());
    }
    if !loaded.is_empty() {
        let mut extra: Vec<String> = loaded.into_keys().collect();
        extra.sort();
        return Err(Error::format(&p, format!("unexpected tensors: {}", extra.join(", "))));
    }
    Ok(params)
}
