//! Adapter Re-Composing: a bottleneck adapter `x W_down diag(c) W_up + b + x`
//! whose projections are shared across layers (inter-layer sharing) and tied
//! as `W_up = W_down^T` (intra-layer sharing), with per-layer coefficients `c`
//! and biases `b` re-composing a distinct adapter at every insertion site.
//!
//! All bank tensors live in one name-keyed map so that the optimizer, the
//! checkpoint format and the tape see the same parameter names:
//!
//! | name                     | shape  | present when                     |
//! |--------------------------|--------|----------------------------------|
//! | `arc.{group}.down`       | D x D' | inter-layer sharing              |
//! | `arc.{group}.up`         | D' x D | inter-layer, untied (non-intra)  |
//! | `arc.{group}.l{l}.down`  | D x D' | non-inter sharing                |
//! | `arc.{group}.l{l}.up`    | D' x D | non-inter sharing                |
//! | `arc.{site}.l{l}.coeff`  | 1 x D' | bottleneck variant               |
//! | `arc.{site}.l{l}.bias`   | 1 x D  | bottleneck variant               |
//! | `arc.{site}.l{l}.delta`  | D x D  | full-rank variant                |
//!
//! Layers are numbered from 1.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::kernel::{matmul, Matrix, Rng};
use crate::vit::BackboneConfig;

/// Where in an encoder layer an adapter is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// On the LN1 output, before the Q/K/V projections.
    BeforeMha,
    /// On the attention block output (after `W_o`), before the residual add.
    AfterMha,
    /// On the LN2 output, before `W_1`.
    BeforeFfn,
    /// On the FFN output (after `W_2`), before the residual add.
    AfterFfn,
}

impl Site {
    pub const ALL: [Site; 4] = [Site::BeforeMha, Site::AfterMha, Site::BeforeFfn, Site::AfterFfn];

    pub fn as_str(self) -> &'static str {
        match self {
            Site::BeforeMha => "before_mha",
            Site::AfterMha => "after_mha",
            Site::BeforeFfn => "before_ffn",
            Site::AfterFfn => "after_ffn",
        }
    }

    pub fn is_before(self) -> bool {
        matches!(self, Site::BeforeMha | Site::BeforeFfn)
    }

    /// The block this site adapts, ignoring any cross-block sharing.
    pub fn block(self) -> Group {
        match self {
            Site::BeforeMha | Site::AfterMha => Group::Mha,
            Site::BeforeFfn | Site::AfterFfn => Group::Ffn,
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A family of adapters sharing projection matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Mha,
    Ffn,
    /// MHA and FFN adapters merged into a single group.
    Joint,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Mha => "mha",
            Group::Ffn => "ffn",
            Group::Joint => "joint",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    /// Tied `W_up = W_down^T`, one projection per group shared by all layers.
    IntraInter,
    /// As `IntraInter`, with MHA and FFN adapters also sharing one projection.
    IntraInterStar,
    /// Independent `W_up`, shared across layers.
    NonIntraInter,
    /// Independent `W_up`, separate projections in every layer.
    NonIntraNonInter,
}

impl Sharing {
    pub const ALL: [Sharing; 4] = [
        Sharing::IntraInter,
        Sharing::IntraInterStar,
        Sharing::NonIntraInter,
        Sharing::NonIntraNonInter,
    ];

    pub fn tied(self) -> bool {
        matches!(self, Sharing::IntraInter | Sharing::IntraInterStar)
    }

    pub fn across_layers(self) -> bool {
        !matches!(self, Sharing::NonIntraNonInter)
    }

    pub fn group_of(self, site: Site) -> Group {
        match self {
            Sharing::IntraInterStar => Group::Joint,
            _ => site.block(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    #[default]
    Sequential,
    /// The adapter's delta runs as a bypass next to the identity path; only
    /// valid at `before_*` sites.
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Bottleneck,
    /// Unconstrained per-site `D x D` adaptation matrices, used for spectral analysis.
    FullRank,
}

fn default_positions() -> BTreeSet<Site> {
    [Site::BeforeMha, Site::BeforeFfn].into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArcConfig {
    pub bottleneck: usize,
    pub positions: BTreeSet<Site>,
    pub sharing: Sharing,
    /// 1-based layer numbers; `None` means every layer.
    pub insertion_layers: Option<BTreeSet<usize>>,
    pub form: Form,
    pub dropout_rate: f64,
    pub variant: Variant,
}

impl Default for ArcConfig {
    fn default() -> Self {
        Self {
            bottleneck: 50,
            positions: default_positions(),
            sharing: Sharing::IntraInter,
            insertion_layers: None,
            form: Form::Sequential,
            dropout_rate: 0.1,
            variant: Variant::Bottleneck,
        }
    }
}

impl ArcConfig {
    pub fn with_bottleneck(mut self, d: usize) -> Self {
        self.bottleneck = d;
        self
    }

    pub fn with_positions(mut self, sites: &[Site]) -> Self {
        self.positions = sites.iter().copied().collect();
        self
    }

    pub fn with_sharing(mut self, sharing: Sharing) -> Self {
        self.sharing = sharing;
        self
    }

    pub fn with_form(mut self, form: Form) -> Self {
        self.form = form;
        self
    }

    pub fn with_layers(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.insertion_layers = Some(layers.into_iter().collect());
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout_rate = p;
        self
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.variant = v;
        self
    }

    /// Inserted layers, resolved against the backbone depth.
    pub fn layers(&self, backbone: &BackboneConfig) -> BTreeSet<usize> {
        match &self.insertion_layers {
            Some(set) => set.clone(),
            None => (1..=backbone.layers).collect(),
        }
    }

    /// Groups that own projection matrices under this config.
    pub fn groups(&self) -> BTreeSet<Group> {
        self.positions
            .iter()
            .map(|&s| self.sharing.group_of(s))
            .collect()
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        let d = backbone.embed_dim;
        if self.variant == Variant::Bottleneck && (self.bottleneck == 0 || self.bottleneck > d) {
            return Err(Error::Config(format!(
                "bottleneck must be in 1..={d}, got {}",
                self.bottleneck
            )));
        }
        if self.positions.is_empty() {
            return Err(Error::Config("positions must not be empty".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        let layers = self.layers(backbone);
        if layers.is_empty() {
            return Err(Error::Config("insertion_layers must not be empty".into()));
        }
        if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > backbone.layers) {
            return Err(Error::Config(format!(
                "insertion layer {bad} outside 1..={}",
                backbone.layers
            )));
        }
        if self.form == Form::Parallel {
            if let Some(site) = self.positions.iter().find(|s| !s.is_before()) {
                return Err(Error::Config(format!(
                    "parallel form only supports before_* sites, got {site}"
                )));
            }
        }
        Ok(())
    }
}

/// One resolved adapter call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hook {
    pub layer: usize,
    pub site: Site,
    pub group: Group,
    pub form: Form,
}

/// Map from `(layer, site)` to the adapter applied there.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HookTable {
    hooks: BTreeMap<(usize, Site), Hook>,
}

impl HookTable {
    pub fn get(&self, layer: usize, site: Site) -> Option<&Hook> {
        self.hooks.get(&(layer, site))
    }

    pub fn len(&self) -> usize {
        self.hooks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Hook> {
        self.hooks.values()
    }

    pub fn layers(&self) -> BTreeSet<usize> {
        self.hooks.keys().map(|&(l, _)| l).collect()
    }
}

pub fn resolve_hooks(config: &ArcConfig, backbone: &BackboneConfig) -> Result<HookTable> {
    config.validate(backbone)?;
    let mut hooks = BTreeMap::new();
    for layer in config.layers(backbone) {
        for &site in &config.positions {
            hooks.insert(
                (layer, site),
                Hook {
                    layer,
                    site,
                    group: config.sharing.group_of(site),
                    form: config.form,
                },
            );
        }
    }
    Ok(HookTable { hooks })
}

/// Train or eval behaviour for adapter dropout.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    pub fn reborrow(&mut self) -> Mode<'_> {
        match self {
            Mode::Eval => Mode::Eval,
            Mode::Train(rng) => Mode::Train(rng),
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Up-projection of one adapter: either tied to the down-projection or stored.
#[derive(Debug, Clone, Copy)]
pub enum UpProjection<'a> {
    Tied,
    Free(&'a Matrix),
}

pub fn down_name(group: Group, layer: Option<usize>) -> String {
    match layer {
        Some(l) => format!("arc.{group}.l{l}.down"),
        None => format!("arc.{group}.down"),
    }
}

pub fn up_name(group: Group, layer: Option<usize>) -> String {
    match layer {
        Some(l) => format!("arc.{group}.l{l}.up"),
        None => format!("arc.{group}.up"),
    }
}

pub fn coeff_name(site: Site, layer: usize) -> String {
    format!("arc.{site}.l{layer}.coeff")
}

pub fn bias_name(site: Site, layer: usize) -> String {
    format!("arc.{site}.l{layer}.bias")
}

pub fn delta_name(site: Site, layer: usize) -> String {
    format!("arc.{site}.l{layer}.delta")
}

/// Trainable adapter parameters for one backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBank {
    config: ArcConfig,
    dim: usize,
    hooks: HookTable,
    tensors: BTreeMap<String, Matrix>,
    training: bool,
}

impl AdapterBank {
    /// Fresh bank: projections ~ N(0, 1/D) (free up-projections ~ N(0, 1/D')),
    /// coefficients, biases and full-rank deltas all zero, so every adapter
    /// starts as the identity map.
    pub fn init(config: &ArcConfig, backbone: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        let hooks = resolve_hooks(config, backbone)?;
        let d = backbone.embed_dim;
        let dp = config.bottleneck;
        let mut tensors = BTreeMap::new();
        match config.variant {
            Variant::FullRank => {
                for h in hooks.iter() {
                    tensors.insert(delta_name(h.site, h.layer), Matrix::zeros(d, d));
                }
            }
            Variant::Bottleneck => {
                let down_std = (1.0 / d as f64).sqrt();
                let up_std = (1.0 / dp as f64).sqrt();
                let layer_keys: Vec<Option<usize>> = if config.sharing.across_layers() {
                    vec![None]
                } else {
                    hooks.layers().into_iter().map(Some).collect()
                };
                for group in config.groups() {
                    for &layer in &layer_keys {
                        tensors.insert(down_name(group, layer), rng.normal_matrix(d, dp, down_std));
                        if !config.sharing.tied() {
                            tensors.insert(up_name(group, layer), rng.normal_matrix(dp, d, up_std));
                        }
                    }
                }
                for h in hooks.iter() {
                    tensors.insert(coeff_name(h.site, h.layer), Matrix::zeros(1, dp));
                    tensors.insert(bias_name(h.site, h.layer), Matrix::zeros(1, d));
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            dim: d,
            hooks,
            tensors,
            training: false,
        })
    }

    /// Rebuilds a bank from named tensors, checking that exactly the expected
    /// names are present with the expected shapes.
    pub fn from_tensors(
        config: &ArcConfig,
        backbone: &BackboneConfig,
        tensors: BTreeMap<String, Matrix>,
    ) -> Result<Self> {
        let template = Self::init(config, backbone, &mut Rng::new(0))?;
        template.with_params(&tensors)?.check_complete(&tensors)
    }

    fn check_complete(self, given: &BTreeMap<String, Matrix>) -> Result<Self> {
        if let Some(extra) = given.keys().find(|k| !self.tensors.contains_key(*k)) {
            return Err(Error::Config(format!("unexpected adapter tensor `{extra}`")));
        }
        if let Some(missing) = self.tensors.keys().find(|k| !given.contains_key(*k)) {
            return Err(Error::Config(format!("missing adapter tensor `{missing}`")));
        }
        Ok(self)
    }

    /// Marks the bank as being trained (dropout live). Fusion refuses banks in
    /// this state.
    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn config(&self) -> &ArcConfig {
        &self.config
    }

    pub fn hooks(&self) -> &HookTable {
        &self.hooks
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tensors(&self) -> &BTreeMap<String, Matrix> {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.tensors.get_mut(name)
    }

    /// Copy of this bank with the named tensors replaced. Names must exist and
    /// shapes must match; names not in `params` are kept.
    pub fn with_params(&self, params: &ParamSet) -> Result<Self> {
        let mut out = self.clone();
        for (name, value) in params {
            if !name.starts_with("arc.") {
                continue;
            }
            let slot = out
                .tensors
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("unknown adapter tensor `{name}`")))?;
            if slot.shape() != value.shape() {
                return Err(Error::dim("AdapterBank::with_params", slot.shape(), value.shape()));
            }
            *slot = value.clone();
        }
        Ok(out)
    }

    /// Number of stored trainable scalars.
    pub fn parameter_count(&self) -> u64 {
        self.tensors.values().map(|t| t.len() as u64).sum()
    }

    fn projection_key(&self, layer: usize) -> Option<usize> {
        (!self.config.sharing.across_layers()).then_some(layer)
    }

    fn hook(&self, layer: usize, site: Site) -> Result<&Hook> {
        self.hooks.get(layer, site).ok_or_else(|| {
            Error::Contract(format!("no adapter configured at layer {layer}, {site}"))
        })
    }

    pub fn down(&self, layer: usize, site: Site) -> Result<&Matrix> {
        let hook = self.hook(layer, site)?;
        self.get(&down_name(hook.group, self.projection_key(layer)))
    }

    pub fn up(&self, layer: usize, site: Site) -> Result<UpProjection<'_>> {
        let hook = self.hook(layer, site)?;
        if self.config.sharing.tied() {
            Ok(UpProjection::Tied)
        } else {
            Ok(UpProjection::Free(self.get(&up_name(hook.group, self.projection_key(layer)))?))
        }
    }

    pub fn coeff(&self, layer: usize, site: Site) -> Result<&Matrix> {
        self.hook(layer, site)?;
        self.get(&coeff_name(site, layer))
    }

    pub fn bias(&self, layer: usize, site: Site) -> Result<&Matrix> {
        self.hook(layer, site)?;
        self.get(&bias_name(site, layer))
    }

    pub fn delta(&self, layer: usize, site: Site) -> Result<&Matrix> {
        self.hook(layer, site)?;
        self.get(&delta_name(site, layer))
    }

    fn get(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("adapter tensor `{name}` not in bank")))
    }

    /// The linear part of the adapter at `(layer, site)`: `W_down diag(c) W_up`
    /// for the bottleneck variant, `delta` for the full-rank variant.
    pub fn adaptation_matrix(&self, layer: usize, site: Site) -> Result<Matrix> {
        match self.config.variant {
            Variant::FullRank => Ok(self.delta(layer, site)?.clone()),
            Variant::Bottleneck => {
                let down = self.down(layer, site)?;
                let scaled = down.mul_row(self.coeff(layer, site)?)?;
                match self.up(layer, site)? {
                    UpProjection::Tied => matmul(&scaled, &down.transpose()),
                    UpProjection::Free(up) => matmul(&scaled, up),
                }
            }
        }
    }

    /// Bias added after the up-projection (zero row for full-rank adapters).
    pub fn output_bias(&self, layer: usize, site: Site) -> Result<Matrix> {
        match self.config.variant {
            Variant::FullRank => {
                self.hook(layer, site)?;
                Ok(Matrix::zeros(1, self.dim))
            }
            Variant::Bottleneck => Ok(self.bias(layer, site)?.clone()),
        }
    }
}

/// Bottleneck hidden features `x W_down diag(c)`, with inverted dropout in
/// train mode.
pub fn arc_hidden(x: &Matrix, bank: &AdapterBank, layer: usize, site: Site, mode: Mode<'_>) -> Result<Matrix> {
    let h = matmul(x, bank.down(layer, site)?)?.mul_row(bank.coeff(layer, site)?)?;
    let p = bank.config.dropout_rate;
    match mode {
        Mode::Train(rng) if p > 0.0 => h.hadamard(&rng.dropout_mask(h.rows(), h.cols(), p)),
        _ => Ok(h),
    }
}

/// Applies the adapter at `(layer, site)` to `x_in` ((N+1) x D).
///
/// Sequential form returns `x W_down diag(c) W_up + 1 b^T + x`; parallel form
/// returns only the delta `x W_down diag(c) W_up + 1 b^T`. The full-rank
/// variant returns `x delta + x` (or `x delta` in parallel form).
pub fn arc_forward(x_in: &Matrix, bank: &AdapterBank, layer: usize, site: Site, mode: Mode<'_>) -> Result<Matrix> {
    let delta = match bank.config.variant {
        Variant::FullRank => matmul(x_in, bank.delta(layer, site)?)?,
        Variant::Bottleneck => {
            let h = arc_hidden(x_in, bank, layer, site, mode)?;
            let up = match bank.up(layer, site)? {
                UpProjection::Tied => matmul(&h, &bank.down(layer, site)?.transpose())?,
                UpProjection::Free(up) => matmul(&h, up)?,
            };
            up.add_row(bank.bias(layer, site)?)?
        }
    };
    match bank.config.form {
        Form::Sequential => delta.add(x_in),
        Form::Parallel => Ok(delta),
    }
}

/// How bank tensors enter a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankGrad {
    Trainable,
    Frozen,
}

/// Tape counterpart of [`arc_forward`]. The tied up-projection is recorded as
/// a transpose of the registered down-projection node, so its gradient flows
/// back into the single stored matrix.
pub fn arc_forward_tape(
    t: &mut Tape,
    x_in: Var,
    bank: &AdapterBank,
    layer: usize,
    site: Site,
    grad: BankGrad,
    mode: Mode<'_>,
) -> Result<Var> {
    let trainable = grad == BankGrad::Trainable;
    let hook = *bank.hook(layer, site)?;
    let delta = match bank.config.variant {
        Variant::FullRank => {
            let w = t.param(&delta_name(site, layer), bank.delta(layer, site)?, trainable)?;
            t.matmul(x_in, w)?
        }
        Variant::Bottleneck => {
            let key = bank.projection_key(layer);
            let down = t.param(&down_name(hook.group, key), bank.down(layer, site)?, trainable)?;
            let coeff = t.param(&coeff_name(site, layer), bank.coeff(layer, site)?, trainable)?;
            let bias = t.param(&bias_name(site, layer), bank.bias(layer, site)?, trainable)?;
            let h = t.matmul(x_in, down)?;
            let mut h = t.mul_row(h, coeff)?;
            let p = bank.config.dropout_rate;
            if let Mode::Train(rng) = mode {
                if p > 0.0 {
                    let (r, c) = t.value(h).shape();
                    h = t.dropout_mask(h, rng.dropout_mask(r, c, p))?;
                }
            }
            let up = match bank.up(layer, site)? {
                UpProjection::Tied => t.transpose(down),
                UpProjection::Free(m) => t.param(&up_name(hook.group, key), m, trainable)?,
            };
            let u = t.matmul(h, up)?;
            t.add_row(u, bias)?
        }
    };
    match bank.config.form {
        Form::Sequential => t.add(delta, x_in),
        Form::Parallel => Ok(delta),
    }
}
