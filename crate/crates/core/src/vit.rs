//! Plain pre-norm Vision Transformer: patch embedding, `L` encoder layers of
//! multi-head attention and GELU feed-forward blocks with residuals, a final
//! LayerNorm on the class token and a linear head.
//!
//! Two forward paths exist: [`forward`] evaluates directly with the kernel and
//! [`loss_tape`]/[`logits_tape`] record the same computation on a [`Tape`] for
//! training. They are written independently and tested against each other.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arc::{self, AdapterBank, BankGrad, Form, Mode, Site};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernel::{self, matmul, Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    pub ln_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneConfig {
    /// Desk-scale shape used throughout the tests: 8x8x3 images, 4x4 patches,
    /// D=16, L=3, two heads, four classes.
    pub fn toy() -> Self {
        Self {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            embed_dim: 16,
            layers: 3,
            heads: 2,
            mlp_ratio: 4,
            classes: 4,
            ln_eps: kernel::LN_EPS,
        }
    }

    /// ViT-B/16 at 224px; only used for counting.
    pub fn vit_base() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            layers: 12,
            heads: 12,
            mlp_ratio: 4,
            classes: 1000,
            ln_eps: kernel::LN_EPS,
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

/// `H x W x C` image stored row-major over (row, col, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn for_config(cfg: &BackboneConfig) -> Self {
        Self::zeros(cfg.image_size, cfg.image_size, cfg.channels)
    }

    pub fn random(cfg: &BackboneConfig, rng: &mut Rng) -> Self {
        let mut img = Self::for_config(cfg);
        for v in &mut img.data {
            *v = rng.normal();
        }
        img
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        self.data[(row * self.width + col) * self.channels + ch] = v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Matrix,
    pub ln1_beta: Matrix,
    pub wq: Matrix,
    pub bq: Matrix,
    pub wk: Matrix,
    pub bk: Matrix,
    pub wv: Matrix,
    pub bv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
    pub ln2_gamma: Matrix,
    pub ln2_beta: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl LayerWeights {
    const FIELDS: [&'static str; 16] = [
        "ln1.gamma", "ln1.beta", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2.gamma",
        "ln2.beta", "w1", "b1", "w2", "b2",
    ];

    fn fields(&self) -> [&Matrix; 16] {
        [
            &self.ln1_gamma, &self.ln1_beta, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv,
            &self.bv, &self.wo, &self.bo, &self.ln2_gamma, &self.ln2_beta, &self.w1, &self.b1,
            &self.w2, &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Matrix; 16] {
        [
            &mut self.ln1_gamma, &mut self.ln1_beta, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_gamma, &mut self.ln2_beta, &mut self.w1, &mut self.b1, &mut self.w2,
            &mut self.b2,
        ]
    }

    fn zeros(cfg: &BackboneConfig) -> Self {
        let d = cfg.embed_dim;
        let hd = cfg.hidden_dim();
        Self {
            ln1_gamma: Matrix::filled(1, d, 1.0),
            ln1_beta: Matrix::zeros(1, d),
            wq: Matrix::zeros(d, d),
            bq: Matrix::zeros(1, d),
            wk: Matrix::zeros(d, d),
            bk: Matrix::zeros(1, d),
            wv: Matrix::zeros(d, d),
            bv: Matrix::zeros(1, d),
            wo: Matrix::zeros(d, d),
            bo: Matrix::zeros(1, d),
            ln2_gamma: Matrix::filled(1, d, 1.0),
            ln2_beta: Matrix::zeros(1, d),
            w1: Matrix::zeros(d, hd),
            b1: Matrix::zeros(1, hd),
            w2: Matrix::zeros(hd, d),
            b2: Matrix::zeros(1, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub w: Matrix,
    pub b: Matrix,
}

impl Head {
    pub fn zeros(cfg: &BackboneConfig) -> Self {
        Self {
            w: Matrix::zeros(cfg.embed_dim, cfg.classes),
            b: Matrix::zeros(1, cfg.classes),
        }
    }
}

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

/// Complete parameter set of the backbone, including the classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    pub config: BackboneConfig,
    pub patch_w: Matrix,
    pub patch_b: Matrix,
    pub cls: Matrix,
    pub pos: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_gamma: Matrix,
    pub final_beta: Matrix,
    pub head: Head,
}

impl BackboneWeights {
    /// All-zero weights with unit LayerNorm gains.
    pub fn zeros(cfg: &BackboneConfig) -> Self {
        let d = cfg.embed_dim;
        Self {
            config: cfg.clone(),
            patch_w: Matrix::zeros(cfg.patch_dim(), d),
            patch_b: Matrix::zeros(1, d),
            cls: Matrix::zeros(1, d),
            pos: Matrix::zeros(cfg.tokens(), d),
            layers: (0..cfg.layers).map(|_| LayerWeights::zeros(cfg)).collect(),
            final_gamma: Matrix::filled(1, d, 1.0),
            final_beta: Matrix::zeros(1, d),
            head: Head::zeros(cfg),
        }
    }

    /// Random stand-in for a pretrained backbone: matrices ~ N(0, 1/fan_in),
    /// biases ~ N(0, 0.1^2), embeddings ~ N(0, 0.5^2), LayerNorm gains near 1.
    pub fn random(cfg: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut w = Self::zeros(cfg);
        let mut fill = |m: &mut Matrix, std: f64| *m = rng.normal_matrix(m.rows(), m.cols(), std);
        let inv = |n: usize| (1.0 / n as f64).sqrt();
        let d = cfg.embed_dim;
        fill(&mut w.patch_w, inv(cfg.patch_dim()));
        fill(&mut w.patch_b, 0.1);
        fill(&mut w.cls, 0.5);
        fill(&mut w.pos, 0.5);
        for lw in &mut w.layers {
            for m in [&mut lw.wq, &mut lw.wk, &mut lw.wv, &mut lw.wo, &mut lw.w1] {
                fill(m, inv(d));
            }
            fill(&mut lw.w2, inv(cfg.hidden_dim()));
            for m in [&mut lw.bq, &mut lw.bk, &mut lw.bv, &mut lw.bo, &mut lw.b1, &mut lw.b2] {
                fill(m, 0.1);
            }
            for m in [&mut lw.ln1_beta, &mut lw.ln2_beta] {
                fill(m, 0.1);
            }
            for m in [&mut lw.ln1_gamma, &mut lw.ln2_gamma] {
                fill(m, 0.1);
                *m = m.map(|x| 1.0 + x);
            }
        }
        fill(&mut w.head.w, inv(d));
        Ok(w)
    }

    /// Tensors in a fixed order with stable names (the checkpoint layout).
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("backbone.patch.w".to_string(), &self.patch_w),
            ("backbone.patch.b".to_string(), &self.patch_b),
            ("backbone.cls".to_string(), &self.cls),
            ("backbone.pos".to_string(), &self.pos),
        ];
        for (i, lw) in self.layers.iter().enumerate() {
            for (field, m) in LayerWeights::FIELDS.iter().zip(lw.fields()) {
                out.push((format!("backbone.l{}.{field}", i + 1), m));
            }
        }
        out.push(("backbone.final_ln.gamma".to_string(), &self.final_gamma));
        out.push(("backbone.final_ln.beta".to_string(), &self.final_beta));
        out.push((HEAD_W.to_string(), &self.head.w));
        out.push((HEAD_B.to_string(), &self.head.b));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![
            ("backbone.patch.w".to_string(), &mut self.patch_w),
            ("backbone.patch.b".to_string(), &mut self.patch_b),
            ("backbone.cls".to_string(), &mut self.cls),
            ("backbone.pos".to_string(), &mut self.pos),
        ];
        for (i, lw) in self.layers.iter_mut().enumerate() {
            for (field, m) in LayerWeights::FIELDS.iter().zip(lw.fields_mut()) {
                out.push((format!("backbone.l{}.{field}", i + 1), m));
            }
        }
        out.push(("backbone.final_ln.gamma".to_string(), &mut self.final_gamma));
        out.push(("backbone.final_ln.beta".to_string(), &mut self.final_beta));
        out.push((HEAD_W.to_string(), &mut self.head.w));
        out.push((HEAD_B.to_string(), &mut self.head.b));
        out
    }

    /// Rebuilds weights from named tensors; every expected name must be
    /// present with the shape implied by `cfg`, and nothing else.
    pub fn from_named(cfg: &BackboneConfig, tensors: &BTreeMap<String, Matrix>) -> Result<Self> {
        cfg.validate()?;
        let mut w = Self::zeros(cfg);
        let mut seen = 0;
        for (name, slot) in w.named_tensors_mut() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing backbone tensor `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::dim("BackboneWeights::from_named", slot.shape(), t.shape()));
            }
            *slot = t.clone();
            seen += 1;
        }
        let expected = tensors
            .keys()
            .filter(|k| k.starts_with("backbone.") || k.starts_with("head."))
            .count();
        if expected != seen {
            return Err(Error::Config("unexpected backbone tensors present".into()));
        }
        Ok(w)
    }

    /// SHA-256 over names, shapes and little-endian bytes of every tensor.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, m) in self.named_tensors() {
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn with_head(&self, head: Head) -> Self {
        Self {
            head,
            ..self.clone()
        }
    }

    pub fn layer(&self, l: usize) -> &LayerWeights {
        &self.layers[l - 1]
    }
}

/// Flattened patches, `N x (P*P*C)`: patches in row-major patch order, each
/// flattened row-major over (pixel row, pixel col, channel).
pub fn extract_patches(image: &Image, cfg: &BackboneConfig) -> Result<Matrix> {
    if image.height != cfg.image_size || image.width != cfg.image_size || image.channels != cfg.channels {
        return Err(Error::dim(
            "patch_embed",
            (image.height, image.width * image.channels),
            (cfg.image_size, cfg.image_size * cfg.channels),
        ));
    }
    let p = cfg.patch_size;
    let per_side = cfg.image_size / p;
    let mut out = Matrix::zeros(cfg.num_patches(), cfg.patch_dim());
    for pr in 0..per_side {
        for pc in 0..per_side {
            let row = out.row_mut(pr * per_side + pc);
            let mut k = 0;
            for i in 0..p {
                for j in 0..p {
                    for c in 0..cfg.channels {
                        row[k] = image.get(pr * p + i, pc * p + j, c);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `[x_cls; X_patches W + b] + X_pos`, shape `(N+1) x D`.
pub fn patch_embed(image: &Image, w: &BackboneWeights) -> Result<Matrix> {
    let patches = extract_patches(image, &w.config)?;
    let proj = matmul(&patches, &w.patch_w)?.add_row(&w.patch_b)?;
    Matrix::concat_rows(&[&w.cls, &proj])?.add(&w.pos)
}

fn attention(q: &Matrix, k: &Matrix, v: &Matrix, heads: usize) -> Result<Matrix> {
    let dh = q.cols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, dh)?;
        let kh = k.slice_cols(h * dh, dh)?;
        let vh = v.slice_cols(h * dh, dh)?;
        let scores = matmul(&qh, &kh.transpose())?.scale(scale);
        outs.push(matmul(&kernel::softmax_rows(&scores), &vh)?);
    }
    Matrix::concat_cols(&outs.iter().collect::<Vec<_>>())
}

fn project(x: &Matrix, w: &Matrix, b: &Matrix, bypass: Option<&Matrix>) -> Result<Matrix> {
    let mut y = matmul(x, w)?.add_row(b)?;
    if let Some(delta) = bypass {
        y.add_assign(&matmul(delta, w)?)?;
    }
    Ok(y)
}

/// Multi-head self-attention on normalized tokens. `bypass`, when given, is
/// projected by the same Q/K/V matrices and added to the projections (the
/// parallel adapter branch).
pub fn mha(x_norm: &Matrix, lw: &LayerWeights, heads: usize, bypass: Option<&Matrix>) -> Result<Matrix> {
    if x_norm.cols() != lw.wq.rows() {
        return Err(Error::dim("mha", x_norm.shape(), lw.wq.shape()));
    }
    let q = project(x_norm, &lw.wq, &lw.bq, bypass)?;
    let k = project(x_norm, &lw.wk, &lw.bk, bypass)?;
    let v = project(x_norm, &lw.wv, &lw.bv, bypass)?;
    matmul(&attention(&q, &k, &v, heads)?, &lw.wo)?.add_row(&lw.bo)
}

/// `GELU(x W_1 + b_1) W_2 + b_2`, with the same optional bypass as [`mha`].
pub fn ffn(x_norm: &Matrix, lw: &LayerWeights, bypass: Option<&Matrix>) -> Result<Matrix> {
    if x_norm.cols() != lw.w1.rows() {
        return Err(Error::dim("ffn", x_norm.shape(), lw.w1.shape()));
    }
    let h = kernel::gelu(&project(x_norm, &lw.w1, &lw.b1, bypass)?);
    matmul(&h, &lw.w2)?.add_row(&lw.b2)
}

fn apply_before(
    x_norm: Matrix,
    bank: Option<&AdapterBank>,
    layer: usize,
    site: Site,
    mode: Mode<'_>,
) -> Result<(Matrix, Option<Matrix>)> {
    let Some(bank) = bank.filter(|b| b.hooks().get(layer, site).is_some()) else {
        return Ok((x_norm, None));
    };
    let out = arc::arc_forward(&x_norm, bank, layer, site, mode)?;
    match bank.config().form {
        Form::Sequential => Ok((out, None)),
        Form::Parallel => Ok((x_norm, Some(out))),
    }
}

fn apply_after(y: Matrix, bank: Option<&AdapterBank>, layer: usize, site: Site, mode: Mode<'_>) -> Result<Matrix> {
    match bank.filter(|b| b.hooks().get(layer, site).is_some()) {
        Some(bank) => arc::arc_forward(&y, bank, layer, site, mode),
        None => Ok(y),
    }
}

/// Runs the encoder over a token matrix, applying adapter hooks.
pub fn encode(
    mut x: Matrix,
    w: &BackboneWeights,
    adapters: Option<&AdapterBank>,
    mut mode: Mode<'_>,
) -> Result<Matrix> {
    let cfg = &w.config;
    for (i, lw) in w.layers.iter().enumerate() {
        let l = i + 1;
        let xn = kernel::layernorm(&x, lw.ln1_gamma.data(), lw.ln1_beta.data(), cfg.ln_eps)?;
        let (xin, bypass) = apply_before(xn, adapters, l, Site::BeforeMha, mode.reborrow())?;
        let a = mha(&xin, lw, cfg.heads, bypass.as_ref())?;
        let a = apply_after(a, adapters, l, Site::AfterMha, mode.reborrow())?;
        x = x.add(&a)?;

        let xn = kernel::layernorm(&x, lw.ln2_gamma.data(), lw.ln2_beta.data(), cfg.ln_eps)?;
        let (xin, bypass) = apply_before(xn, adapters, l, Site::BeforeFfn, mode.reborrow())?;
        let f = ffn(&xin, lw, bypass.as_ref())?;
        let f = apply_after(f, adapters, l, Site::AfterFfn, mode.reborrow())?;
        x = x.add(&f)?;
    }
    Ok(x)
}

/// Logits (1 x K) for one image using `head` in place of `w.head`.
pub fn forward_with_head(
    image: &Image,
    w: &BackboneWeights,
    head: &Head,
    adapters: Option<&AdapterBank>,
    mode: Mode<'_>,
) -> Result<Matrix> {
    if let Some(bank) = adapters {
        bank.config().validate(&w.config)?;
        if bank.dim() != w.config.embed_dim {
            return Err(Error::Config("adapter bank width differs from backbone".into()));
        }
    }
    let x = encode(patch_embed(image, w)?, w, adapters, mode)?;
    let cls = x.slice_rows(0, 1)?;
    let cls = kernel::layernorm(&cls, w.final_gamma.data(), w.final_beta.data(), w.config.ln_eps)?;
    matmul(&cls, &head.w)?.add_row(&head.b)
}

/// Logits (1 x K) for one image.
pub fn forward(image: &Image, w: &BackboneWeights, adapters: Option<&AdapterBank>, mode: Mode<'_>) -> Result<Matrix> {
    forward_with_head(image, w, &w.head, adapters, mode)
}

pub fn predict(logits: &Matrix) -> usize {
    logits
        .row(0)
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i)
}

/// What a tape forward treats as trainable.
#[derive(Debug, Clone, Copy)]
pub struct TapeModel<'a> {
    pub backbone: &'a BackboneWeights,
    pub head: &'a Head,
    pub head_trainable: bool,
    pub bank: Option<&'a AdapterBank>,
    pub bank_grad: BankGrad,
}

fn frozen(t: &mut Tape, name: String, m: &Matrix) -> Result<Var> {
    t.param(&name, m, false)
}

fn project_tape(t: &mut Tape, x: Var, w: Var, b: Var, bypass: Option<Var>) -> Result<Var> {
    let y = t.matmul(x, w)?;
    let mut y = t.add_row(y, b)?;
    if let Some(delta) = bypass {
        let extra = t.matmul(delta, w)?;
        y = t.add(y, extra)?;
    }
    Ok(y)
}

fn adapter_tape(
    t: &mut Tape,
    x: Var,
    model: &TapeModel<'_>,
    layer: usize,
    site: Site,
    mode: Mode<'_>,
) -> Result<(Var, Option<Var>)> {
    let Some(bank) = model.bank.filter(|b| b.hooks().get(layer, site).is_some()) else {
        return Ok((x, None));
    };
    let out = arc::arc_forward_tape(t, x, bank, layer, site, model.bank_grad, mode)?;
    match (site.is_before(), bank.config().form) {
        (true, Form::Parallel) => Ok((x, Some(out))),
        _ => Ok((out, None)),
    }
}

/// Records the forward pass for one image and returns its logits node (1 x K).
pub fn logits_tape(t: &mut Tape, model: &TapeModel<'_>, image: &Image, mut mode: Mode<'_>) -> Result<Var> {
    let w = model.backbone;
    let cfg = &w.config;
    let names: BTreeMap<String, &Matrix> = w.named_tensors().into_iter().collect();
    let p = |t: &mut Tape, name: &str| frozen(t, name.to_string(), names[name]);

    let patches = t.constant(extract_patches(image, cfg)?);
    let pw = p(t, "backbone.patch.w")?;
    let pb = p(t, "backbone.patch.b")?;
    let cls = p(t, "backbone.cls")?;
    let pos = p(t, "backbone.pos")?;
    let proj = t.matmul(patches, pw)?;
    let proj = t.add_row(proj, pb)?;
    let tokens = t.concat_rows(&[cls, proj])?;
    let mut x = t.add(tokens, pos)?;

    let dh = cfg.head_dim();
    for l in 1..=cfg.layers {
        let lp = |t: &mut Tape, field: &str| p(t, &format!("backbone.l{l}.{field}"));
        let (g1, b1) = (lp(t, "ln1.gamma")?, lp(t, "ln1.beta")?);
        let xn = t.layernorm(x, g1, b1, cfg.ln_eps)?;
        let (xin, bypass) = adapter_tape(t, xn, model, l, Site::BeforeMha, mode.reborrow())?;
        let (wq, bq) = (lp(t, "wq")?, lp(t, "bq")?);
        let (wk, bk) = (lp(t, "wk")?, lp(t, "bk")?);
        let (wv, bv) = (lp(t, "wv")?, lp(t, "bv")?);
        let q = project_tape(t, xin, wq, bq, bypass)?;
        let k = project_tape(t, xin, wk, bk, bypass)?;
        let v = project_tape(t, xin, wv, bv, bypass)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = t.slice_cols(q, h * dh, dh)?;
            let kh = t.slice_cols(k, h * dh, dh)?;
            let vh = t.slice_cols(v, h * dh, dh)?;
            let kt = t.transpose(kh);
            let s = t.matmul(qh, kt)?;
            let s = t.scale(s, 1.0 / (dh as f64).sqrt());
            let a = t.softmax_rows(s);
            heads.push(t.matmul(a, vh)?);
        }
        let cat = t.concat_cols(&heads)?;
        let (wo, bo) = (lp(t, "wo")?, lp(t, "bo")?);
        let a = t.matmul(cat, wo)?;
        let a = t.add_row(a, bo)?;
        let (a, _) = adapter_tape(t, a, model, l, Site::AfterMha, mode.reborrow())?;
        x = t.add(x, a)?;

        let (g2, b2) = (lp(t, "ln2.gamma")?, lp(t, "ln2.beta")?);
        let xn = t.layernorm(x, g2, b2, cfg.ln_eps)?;
        let (xin, bypass) = adapter_tape(t, xn, model, l, Site::BeforeFfn, mode.reborrow())?;
        let (w1, bias1) = (lp(t, "w1")?, lp(t, "b1")?);
        let h = project_tape(t, xin, w1, bias1, bypass)?;
        let h = t.gelu(h);
        let (w2, bias2) = (lp(t, "w2")?, lp(t, "b2")?);
        let f = t.matmul(h, w2)?;
        let f = t.add_row(f, bias2)?;
        let (f, _) = adapter_tape(t, f, model, l, Site::AfterFfn, mode.reborrow())?;
        x = t.add(x, f)?;
    }

    let cls = t.slice_rows(x, 0, 1)?;
    let fg = p(t, "backbone.final_ln.gamma")?;
    let fb = p(t, "backbone.final_ln.beta")?;
    let cls = t.layernorm(cls, fg, fb, cfg.ln_eps)?;
    let hw = t.param(HEAD_W, &model.head.w, model.head_trainable)?;
    let hb = t.param(HEAD_B, &model.head.b, model.head_trainable)?;
    let z = t.matmul(cls, hw)?;
    t.add_row(z, hb)
}

/// Mean cross-entropy over a batch, recorded on the tape.
pub fn loss_tape(
    t: &mut Tape,
    model: &TapeModel<'_>,
    images: &[&Image],
    labels: &[usize],
    mut mode: Mode<'_>,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(images.len());
    for img in images {
        rows.push(logits_tape(t, model, img, mode.reborrow())?);
    }
    let logits = t.concat_rows(&rows)?;
    t.cross_entropy(logits, labels)
}
