//! ResNet1D-8 and ResNet1D-18 built from one residual block design.
//!
//! Block layout: `conv(stride s) -> norm -> GELU -> dropout -> conv -> norm`,
//! summed with the skip path and passed through a final GELU. The skip path is
//! a stride-`s` 1x1 convolution followed by a normalization whenever the
//! block changes channel count or length, and the identity otherwise. The head
//! is global average pooling over time followed by one fully-connected layer.
//! Convolutions pad by repeating edge samples unless configured otherwise, so
//! a per-channel constant added to a block's input only shifts each
//! convolution output by a constant.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::BranchOutputs;
use crate::error::{Error, Result};
use crate::normlayers::{BranchChoice, BranchSelector, InstanceStats, NormKind, NormLayer};
use crate::numcore::{Adam, BatchMoments, PadMode, ParamIds, Parameter, Tape, Tensor, Var};

pub const DEFAULT_KERNEL_SIZE: usize = 7;
pub const DEFAULT_STRIDE: usize = 2;
pub const DEFAULT_DROPOUT: f64 = 0.1;
pub const DEFAULT_PADDING: PadMode = PadMode::Replicate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "resnet1d8")]
    ResNet1D8,
    #[serde(rename = "resnet1d18")]
    ResNet1D18,
}

impl Variant {
    pub fn block_count(self) -> usize {
        match self {
            Variant::ResNet1D8 => 3,
            Variant::ResNet1D18 => 4,
        }
    }

    pub fn default_widths(self) -> &'static [usize] {
        match self {
            Variant::ResNet1D8 => &[32, 64, 128],
            Variant::ResNet1D18 => &[32, 64, 128, 256],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::ResNet1D8 => "resnet1d8",
            Variant::ResNet1D18 => "resnet1d18",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet1d8" => Ok(Variant::ResNet1D8),
            "resnet1d18" => Ok(Variant::ResNet1D18),
            other => Err(Error::Configuration(format!("unknown model variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub dropout_rate: f64,
    pub norm_kind: NormKind,
    pub padding_mode: PadMode,
}

impl ResidualBlockConfig {
    /// Whether the skip path needs its own convolution and normalization.
    pub fn has_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.stride != 1
    }

    pub fn output_len(&self, t: usize) -> usize {
        let pad = self.kernel_size / 2;
        (t + 2 * pad - self.kernel_size) / self.stride + 1
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.stride == 0 {
            return Err(Error::Configuration(format!(
                "block channels and stride must be positive: {self:?}"
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Configuration(format!(
                "kernel size must be odd so both paths keep equal length, got {}",
                self.kernel_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Configuration(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub block_configs: Vec<ResidualBlockConfig>,
    pub num_classes: usize,
    pub input_channels: usize,
    pub num_domains: usize,
}

impl ModelConfig {
    /// Default widths, kernel 7, stride 2 per block.
    pub fn new(
        variant: Variant,
        input_channels: usize,
        num_classes: usize,
        norm_kind: NormKind,
        num_domains: usize,
    ) -> Self {
        Self::with_widths(
            variant,
            input_channels,
            variant.default_widths(),
            DEFAULT_KERNEL_SIZE,
            DEFAULT_STRIDE,
            DEFAULT_DROPOUT,
            norm_kind,
            num_classes,
            num_domains,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_widths(
        variant: Variant,
        input_channels: usize,
        widths: &[usize],
        kernel_size: usize,
        stride: usize,
        dropout_rate: f64,
        norm_kind: NormKind,
        num_classes: usize,
        num_domains: usize,
    ) -> Self {
        let mut block_configs = Vec::with_capacity(widths.len());
        let mut c_in = input_channels;
        for &w in widths {
            block_configs.push(ResidualBlockConfig {
                in_channels: c_in,
                out_channels: w,
                kernel_size,
                stride,
                dropout_rate,
                norm_kind,
                padding_mode: DEFAULT_PADDING,
            });
            c_in = w;
        }
        ModelConfig {
            variant,
            block_configs,
            num_classes,
            input_channels,
            num_domains,
        }
    }

    pub fn norm_kind(&self) -> NormKind {
        self.block_configs
            .first()
            .map(|b| b.norm_kind)
            .unwrap_or(NormKind::Bn)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_configs.len() != self.variant.block_count() {
            return Err(Error::Configuration(format!(
                "{} has {} residual blocks, config lists {}",
                self.variant,
                self.variant.block_count(),
                self.block_configs.len()
            )));
        }
        if self.num_classes == 0 || self.input_channels == 0 {
            return Err(Error::Configuration(
                "num_classes and input_channels must be positive".into(),
            ));
        }
        let mut c = self.input_channels;
        for b in &self.block_configs {
            b.validate()?;
            if b.in_channels != c {
                return Err(Error::Configuration(format!(
                    "block expects {} input channels, previous stage yields {c}",
                    b.in_channels
                )));
            }
            c = b.out_channels;
        }
        let kinds = self.block_configs.iter().map(|b| b.norm_kind);
        if kinds.clone().any(|k| k != self.norm_kind()) {
            return Err(Error::Configuration(
                "all blocks must share one normalization kind".into(),
            ));
        }
        if self.norm_kind().is_domain_specific() && self.num_domains == 0 {
            return Err(Error::Configuration(
                "domain-specific normalization needs at least one domain".into(),
            ));
        }
        Ok(())
    }

    /// Number of normalization layers in execution order.
    pub fn norm_layer_count(&self) -> usize {
        self.block_configs
            .iter()
            .map(|b| if b.has_projection() { 3 } else { 2 })
            .sum()
    }
}

#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: PadMode,
}

impl Conv1dLayer {
    #[allow(clippy::too_many_arguments)]
    fn new(
        ids: &mut ParamIds,
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        pad_mode: PadMode,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        let w: Vec<f64> = (0..c_out * c_in * kernel)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let b: Vec<f64> = (0..c_out).map(|_| rng.random_range(-bound..bound)).collect();
        Conv1dLayer {
            weight: Parameter::new(
                ids.next_id(),
                Tensor::new(vec![c_out, c_in, kernel], w).expect("weight shape"),
            ),
            bias: Parameter::new(ids.next_id(), Tensor::from_vec(b)),
            stride,
            padding,
            pad_mode,
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv1d_padded(x, w, b, self.stride, self.padding, self.pad_mode)
    }
}

/// Everything a forward pass produced besides its output variable.
#[derive(Debug, Default)]
pub(crate) struct ForwardRecord {
    /// `(norm layer ordinal, state slot, moments)`.
    pub updates: Vec<(usize, usize, BatchMoments)>,
    pub stats: Vec<InstanceStats>,
    pub chosen: Vec<usize>,
}

pub(crate) struct Pass<'a, 'r> {
    pub choice: BranchChoice<'a>,
    pub training: bool,
    pub tracing: bool,
    pub rng: &'r mut dyn RngCore,
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub config: ResidualBlockConfig,
    pub conv1: Conv1dLayer,
    pub norm1: NormLayer,
    pub conv2: Conv1dLayer,
    pub norm2: NormLayer,
    pub skip: Option<(Conv1dLayer, NormLayer)>,
}

impl ResidualBlock {
    pub fn new(
        ids: &mut ParamIds,
        rng: &mut ChaCha8Rng,
        config: ResidualBlockConfig,
        domains: &[String],
    ) -> Result<Self> {
        config.validate()?;
        let ResidualBlockConfig {
            in_channels: ci,
            out_channels: co,
            kernel_size: k,
            stride,
            norm_kind,
            padding_mode: mode,
            ..
        } = config;
        let pad = k / 2;
        let conv1 = Conv1dLayer::new(ids, rng, ci, co, k, stride, pad, mode);
        let norm1 = NormLayer::new(ids, norm_kind, co, domains)?;
        let conv2 = Conv1dLayer::new(ids, rng, co, co, k, 1, pad, mode);
        let norm2 = NormLayer::new(ids, norm_kind, co, domains)?;
        let skip = if config.has_projection() {
            let conv = Conv1dLayer::new(ids, rng, ci, co, 1, stride, 0, PadMode::Zeros);
            let norm = NormLayer::new(ids, norm_kind, co, domains)?;
            Some((conv, norm))
        } else {
            None
        };
        Ok(ResidualBlock {
            config,
            conv1,
            norm1,
            conv2,
            norm2,
            skip,
        })
    }

    pub fn norm_layers(&self) -> Vec<&NormLayer> {
        let mut v = vec![&self.norm1, &self.norm2];
        v.extend(self.skip.as_ref().map(|(_, n)| n));
        v
    }

    pub fn norm_layers_mut(&mut self) -> Vec<&mut NormLayer> {
        let mut v = vec![&mut self.norm1, &mut self.norm2];
        v.extend(self.skip.as_mut().map(|(_, n)| n));
        v
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut v = vec![&self.conv1.weight, &self.conv1.bias];
        v.extend(self.norm1.params());
        v.extend([&self.conv2.weight, &self.conv2.bias]);
        v.extend(self.norm2.params());
        if let Some((conv, norm)) = &self.skip {
            v.extend([&conv.weight, &conv.bias]);
            v.extend(norm.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![&mut self.conv1.weight, &mut self.conv1.bias];
        v.extend(self.norm1.params_mut());
        v.extend([&mut self.conv2.weight, &mut self.conv2.bias]);
        v.extend(self.norm2.params_mut());
        if let Some((conv, norm)) = &mut self.skip {
            v.extend([&mut conv.weight, &mut conv.bias]);
            v.extend(norm.params_mut());
        }
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// `first_norm` is the model-wide ordinal of this block's first norm.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        first_norm: usize,
        pass: &mut Pass<'_, '_>,
        record: &mut ForwardRecord,
    ) -> Result<Var> {
        let mut norm = |tape: &mut Tape, layer: &NormLayer, ordinal: usize, v: Var, pass: &mut Pass<'_, '_>| -> Result<Var> {
            let o = layer.forward(tape, v, pass.choice, pass.training, pass.tracing)?;
            record
                .updates
                .extend(o.updates.into_iter().map(|(slot, m)| (ordinal, slot, m)));
            record.stats.extend(o.instance_stats);
            record.chosen.extend(o.chosen);
            Ok(o.out)
        };
        let h = self.conv1.forward(tape, x)?;
        let h = norm(tape, &self.norm1, first_norm, h, pass)?;
        let h = tape.gelu(h);
        let h = tape.dropout(h, self.config.dropout_rate, pass.training, &mut *pass.rng)?;
        let h = self.conv2.forward(tape, h)?;
        let h = norm(tape, &self.norm2, first_norm + 1, h, pass)?;
        let s = match &self.skip {
            Some((conv, layer)) => {
                let s = conv.forward(tape, x)?;
                norm(tape, layer, first_norm + 2, s, pass)?
            }
            None => x,
        };
        let sum = tape.add(h, s)?;
        Ok(tape.gelu(sum))
    }

    /// Standalone forward of one block on a tensor, without touching any state.
    pub fn forward_tensor(
        &self,
        x: &Tensor,
        branch: Option<usize>,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor> {
        let domain_specific = self.config.norm_kind.is_domain_specific();
        let choice = match (branch, domain_specific) {
            (Some(b), true) => BranchChoice::Fixed(b),
            (None, true) => {
                return Err(Error::Routing(
                    "domain-specific block needs a branch".into(),
                ))
            }
            (_, false) => BranchChoice::Shared,
        };
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut pass = Pass {
            choice,
            training,
            tracing: false,
            rng,
        };
        let y = self.forward(&mut tape, xv, 0, &mut pass, &mut ForwardRecord::default())?;
        Ok(tape.value(y).clone())
    }
}

/// Output of [`Model::forward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Tensor,
    /// Captured right before every normalization layer when tracing.
    pub per_layer_instance_stats: Vec<InstanceStats>,
    /// Branch used at every normalization layer, for domain-specific models.
    pub branches: Vec<usize>,
}

/// Which normalization statistics a forward pass uses.
#[derive(Clone, Copy)]
pub enum Route<'a> {
    /// Domain-invariant models.
    Shared,
    /// Route every bank to the branch of this source domain.
    Domain(&'a str),
    Branch(usize),
    Select(&'a dyn BranchSelector),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub blocks: Vec<ResidualBlock>,
    pub head_weight: Parameter,
    pub head_bias: Parameter,
    domains: Vec<String>,
}

/// Builds a model whose banks (if any) hold one branch per entry of
/// `domains`, in that order.
pub fn build_model(config: &ModelConfig, domains: &[String], seed: u64) -> Result<Model> {
    config.validate()?;
    if domains.len() != config.num_domains {
        return Err(Error::Configuration(format!(
            "config declares {} domains, {} ids given",
            config.num_domains,
            domains.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = ParamIds::new();
    let mut blocks = Vec::with_capacity(config.block_configs.len());
    for bc in &config.block_configs {
        blocks.push(ResidualBlock::new(&mut ids, &mut rng, bc.clone(), domains)?);
    }
    let features = config
        .block_configs
        .last()
        .map(|b| b.out_channels)
        .unwrap_or(config.input_channels);
    let bound = 1.0 / (features as f64).sqrt();
    let w: Vec<f64> = (0..config.num_classes * features)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    let head_weight = Parameter::new(
        ids.next_id(),
        Tensor::new(vec![config.num_classes, features], w)?,
    );
    let head_bias = Parameter::new(ids.next_id(), Tensor::zeros(&[config.num_classes]));
    Ok(Model {
        config: config.clone(),
        blocks,
        head_weight,
        head_bias,
        domains: domains.to_vec(),
    })
}

impl Model {
    pub fn norm_kind(&self) -> NormKind {
        self.config.norm_kind()
    }

    pub fn is_domain_specific(&self) -> bool {
        self.norm_kind().is_domain_specific()
    }

    /// Source domains the model was built for (bank branch order).
    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn num_branches(&self) -> usize {
        if self.is_domain_specific() {
            self.domains.len()
        } else {
            1
        }
    }

    pub fn norm_layers(&self) -> Vec<&NormLayer> {
        self.blocks.iter().flat_map(|b| b.norm_layers()).collect()
    }

    pub fn norm_layers_mut(&mut self) -> Vec<&mut NormLayer> {
        self.blocks.iter_mut().flat_map(|b| b.norm_layers_mut()).collect()
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut v: Vec<&Parameter> = self.blocks.iter().flat_map(|b| b.params()).collect();
        v.extend([&self.head_weight, &self.head_bias]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v: Vec<&mut Parameter> =
            self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect();
        v.extend([&mut self.head_weight, &mut self.head_bias]);
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Renames the source domains, e.g. after loading a checkpoint.
    pub fn set_domains(&mut self, domains: Vec<String>) -> Result<()> {
        if domains.len() != self.config.num_domains {
            return Err(Error::Configuration(format!(
                "model has {} domains, {} ids given",
                self.config.num_domains,
                domains.len()
            )));
        }
        for layer in self.norm_layers_mut() {
            if let Some(bank) = layer.bank_mut() {
                bank.set_domain_index(&domains)?;
            }
        }
        self.domains = domains;
        Ok(())
    }

    /// Branch index of a source domain; errors for unknown domains.
    pub fn branch_of(&self, domain: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d == domain)
            .ok_or_else(|| Error::Routing(format!("unknown domain '{domain}'")))
    }

    fn choice<'a>(&self, route: Route<'a>) -> Result<BranchChoice<'a>> {
        if !self.is_domain_specific() {
            return match route {
                Route::Shared | Route::Domain(_) => Ok(BranchChoice::Shared),
                Route::Branch(_) | Route::Select(_) => Err(Error::Configuration(format!(
                    "{} model has no branches to choose from",
                    self.norm_kind()
                ))),
            };
        }
        match route {
            Route::Shared => Err(Error::Routing(
                "domain-specific model needs a domain, a branch, or a selector".into(),
            )),
            Route::Domain(d) => Ok(BranchChoice::Fixed(self.branch_of(d)?)),
            Route::Branch(i) if i < self.domains.len() => Ok(BranchChoice::Fixed(i)),
            Route::Branch(i) => Err(Error::Routing(format!(
                "branch {i} out of range for {} branches",
                self.domains.len()
            ))),
            Route::Select(s) => Ok(BranchChoice::Select(s)),
        }
    }

    pub(crate) fn forward_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        pass: &mut Pass<'_, '_>,
    ) -> Result<(Var, ForwardRecord)> {
        let xs = tape.value(x).shape();
        if xs.len() != 3 || xs[1] != self.config.input_channels {
            return Err(Error::Dimension(format!(
                "model expects [B, {}, T] input, got {:?}",
                self.config.input_channels, xs
            )));
        }
        if (pass.tracing || matches!(pass.choice, BranchChoice::Select(_))) && xs[0] != 1 {
            return Err(Error::Contract(format!(
                "tracing and selection need a single instance, got batch of {}",
                xs[0]
            )));
        }
        let mut record = ForwardRecord::default();
        let mut h = x;
        let mut ordinal = 0;
        for block in &self.blocks {
            h = block.forward(tape, h, ordinal, pass, &mut record)?;
            ordinal += block.norm_layers().len();
        }
        let pooled = tape.mean_time(h)?;
        let w = tape.param(&self.head_weight);
        let b = tape.param(&self.head_bias);
        let logits = tape.linear(pooled, w, b)?;
        Ok((logits, record))
    }

    /// Forward pass that never mutates the model. In training mode batch
    /// statistics are used but not committed; see [`Model::train_step`].
    pub fn forward(
        &self,
        x: &Tensor,
        route: Route<'_>,
        training: bool,
        tracing: bool,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardTrace> {
        let choice = self.choice(route)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut pass = Pass {
            choice,
            training,
            tracing,
            rng,
        };
        let (logits, record) = self.forward_tape(&mut tape, xv, &mut pass)?;
        Ok(ForwardTrace {
            logits: tape.value(logits).clone(),
            per_layer_instance_stats: record.stats,
            branches: record.chosen,
        })
    }

    /// Records the cross-entropy of a forward pass on an existing tape, so
    /// gradients with respect to `x` can be taken. Running statistics are
    /// not committed.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        labels: &[usize],
        route: Route<'_>,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let mut pass = Pass {
            choice: self.choice(route)?,
            training,
            tracing: false,
            rng,
        };
        let (logits, _) = self.forward_tape(tape, x, &mut pass)?;
        tape.cross_entropy(logits, labels)
    }

    /// Evaluation-mode logits `[B, classes]`.
    pub fn logits(&self, x: &Tensor, route: Route<'_>) -> Result<Tensor> {
        self.forward(x, route, false, false, &mut NoRng)
            .map(|t| t.logits)
    }

    /// One optimizer step on a batch; returns the batch loss. For
    /// domain-specific models the batch must come from a single domain.
    pub fn train_step(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        domains: &[&str],
        optimizer: &mut Adam,
        rng: &mut dyn RngCore,
    ) -> Result<f64> {
        let route = if self.is_domain_specific() {
            let first = *domains
                .first()
                .ok_or_else(|| Error::Routing("no domain ids for batch".into()))?;
            if let Some(o) = domains.iter().find(|d| **d != first) {
                return Err(Error::Contract(format!(
                    "mixed-domain batch ('{first}' and '{o}'); batches must be domain-homogeneous"
                )));
            }
            BranchChoice::Fixed(self.branch_of(first)?)
        } else {
            BranchChoice::Shared
        };
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut pass = Pass {
            choice: route,
            training: true,
            tracing: false,
            rng,
        };
        let (logits, record) = self.forward_tape(&mut tape, xv, &mut pass)?;
        let loss = tape.cross_entropy(logits, labels)?;
        let loss_value = tape.value(loss).item();
        let grads = tape.backward(loss)?;

        let mut params = self.params_mut();
        params.iter_mut().for_each(|p| p.zero_grad());
        let mut by_id: Vec<Option<&Tensor>> = Vec::new();
        for (id, g) in grads.params() {
            if by_id.len() <= id.0 {
                by_id.resize(id.0 + 1, None);
            }
            by_id[id.0] = Some(g);
        }
        for p in params.iter_mut() {
            if let Some(Some(g)) = by_id.get(p.id.0) {
                p.accumulate(g);
            }
        }
        optimizer.step(params);

        let mut layers = self.norm_layers_mut();
        for (ordinal, slot, m) in record.updates {
            layers[ordinal].apply_updates(&[(slot, m)])?;
        }
        Ok(loss_value)
    }

    /// Pushes one instance through every branch in turn (eval mode).
    pub fn forward_all_branches(&self, x: &Tensor) -> Result<BranchOutputs> {
        if !self.is_domain_specific() {
            return Err(Error::Configuration(format!(
                "{} model has no domain-specific branches",
                self.norm_kind()
            )));
        }
        if x.shape().first() != Some(&1) {
            return Err(Error::Contract(
                "forward_all_branches takes a single instance".into(),
            ));
        }
        let logits = (0..self.domains.len())
            .map(|i| self.logits(x, Route::Branch(i)).map(|t| t.into_data()))
            .collect::<Result<Vec<_>>>()?;
        BranchOutputs::from_logits(logits)
    }
}

/// Rng for passes that must not draw randomness.
pub(crate) struct NoRng;

impl RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("evaluation passes draw no randomness")
    }

    fn next_u64(&mut self) -> u64 {
        unreachable!("evaluation passes draw no randomness")
    }

    fn fill_bytes(&mut self, _dst: &mut [u8]) {
        unreachable!("evaluation passes draw no randomness")
    }
}

#[cfg(test)]
mod tests;
