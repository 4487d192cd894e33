//! Batch, instance and instance-batch normalization, plus the banked
//! domain-specific variants (one branch of statistics per source domain).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregation::BranchStats;
use crate::error::{Error, Result};
use crate::numcore::{sigmoid_value, BatchMoments, ParamIds, Parameter, Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Raw mixture logits are clamped here; `sigmoid(±40)` is 0 or 1 to within
/// 5e-18.
const MIX_LOGIT_LIMIT: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Bn,
    In,
    Ibn,
    Dsbn,
    Dsin,
    Dson,
}

impl NormKind {
    pub const ALL: [NormKind; 6] = [
        NormKind::Bn,
        NormKind::In,
        NormKind::Ibn,
        NormKind::Dsbn,
        NormKind::Dsin,
        NormKind::Dson,
    ];

    pub fn is_domain_specific(self) -> bool {
        matches!(self, NormKind::Dsbn | NormKind::Dsin | NormKind::Dson)
    }

    pub fn name(self) -> &'static str {
        match self {
            NormKind::Bn => "bn",
            NormKind::In => "in",
            NormKind::Ibn => "ibn",
            NormKind::Dsbn => "dsbn",
            NormKind::Dsin => "dsin",
            NormKind::Dson => "dson",
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NormKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Configuration(format!("unknown normalization kind '{s}'")))
    }
}

/// Affine parameters and running statistics of one normalization.
#[derive(Debug, Clone)]
pub struct NormState {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub batches_seen: u64,
}

impl NormState {
    pub fn new(ids: &mut ParamIds, channels: usize) -> Self {
        Self::with_hyper(ids, channels, DEFAULT_MOMENTUM, DEFAULT_EPS)
    }

    pub fn with_hyper(ids: &mut ParamIds, channels: usize, momentum: f64, eps: f64) -> Self {
        NormState {
            gamma: Parameter::new(ids.next_id(), Tensor::full(&[channels], 1.0)),
            beta: Parameter::new(ids.next_id(), Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps,
            batches_seen: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Exponential moving average of batch statistics.
    pub fn update_running_stats(&mut self, batch_mean: &[f64], batch_var: &[f64]) -> Result<()> {
        let c = self.channels();
        if batch_mean.len() != c || batch_var.len() != c {
            return Err(Error::Dimension(format!(
                "running-stat update sized {}/{} for {c} channels",
                batch_mean.len(),
                batch_var.len()
            )));
        }
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(batch_var) {
            *r = ((1.0 - m) * *r + m * b).max(0.0);
        }
        self.batches_seen += 1;
        Ok(())
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    pub fn branch_stats(&self) -> BranchStats {
        BranchStats {
            mean: self.running_mean.clone(),
            std: self.running_var.iter().map(|v| v.max(0.0).sqrt()).collect(),
        }
    }

    /// Batch norm on the tape. In training mode the batch moments are
    /// returned so the caller can fold them into the running statistics.
    pub fn bn_var(
        &self,
        tape: &mut Tape,
        x: Var,
        training: bool,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        if training {
            let (y, moments) = tape.batch_norm(x, g, b, self.eps)?;
            Ok((y, Some(moments)))
        } else {
            let y = tape.frozen_norm(x, g, b, &self.running_mean, &self.running_var, self.eps)?;
            Ok((y, None))
        }
    }

    /// Instance norm on the tape using this state's affine parameters.
    pub fn in_var(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        tape.instance_norm(x, g, b, self.eps)
    }
}

/// Per-channel mean and population standard deviation of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn compute_instance_stats(z: &Tensor) -> Result<InstanceStats> {
    z.expect_rank(3, "compute_instance_stats")?;
    let (b, c, t) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    if b != 1 {
        return Err(Error::Contract(format!(
            "instance statistics need a single instance, got batch of {b}"
        )));
    }
    if t < 2 {
        return Err(Error::DegenerateInstance(format!(
            "instance statistics need at least 2 time steps, got {t}"
        )));
    }
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for row in z.data().chunks(t) {
        let m = row.iter().sum::<f64>() / t as f64;
        let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / t as f64;
        mean.push(m);
        std.push(v.sqrt());
    }
    Ok(InstanceStats { mean, std })
}

/// Picks one branch given the incoming instance statistics.
pub trait BranchSelector {
    fn select(&self, z: &InstanceStats, candidates: &[BranchStats]) -> Result<usize>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BankKind {
    Dsbn,
    Dsin,
    Dson,
}

impl BankKind {
    pub fn from_norm(kind: NormKind) -> Option<Self> {
        match kind {
            NormKind::Dsbn => Some(BankKind::Dsbn),
            NormKind::Dsin => Some(BankKind::Dsin),
            NormKind::Dson => Some(BankKind::Dson),
            _ => None,
        }
    }
}

/// One normalization branch per source domain.
///
/// For DSON each branch additionally owns an instance-norm affine pair and an
/// unconstrained mixture logit; the mixture weight is its sigmoid.
#[derive(Debug, Clone)]
pub struct NormBank {
    pub kind: BankKind,
    pub branches: Vec<NormState>,
    pub in_affine: Vec<NormState>,
    pub dson_mix: Vec<Parameter>,
    domain_index: BTreeMap<String, usize>,
}

impl NormBank {
    pub fn new(
        ids: &mut ParamIds,
        kind: BankKind,
        channels: usize,
        domains: &[String],
    ) -> Result<Self> {
        if domains.is_empty() {
            return Err(Error::Configuration(
                "a normalization bank needs at least one domain".into(),
            ));
        }
        let mut domain_index = BTreeMap::new();
        for (i, d) in domains.iter().enumerate() {
            if domain_index.insert(d.clone(), i).is_some() {
                return Err(Error::Configuration(format!("duplicate domain id '{d}'")));
            }
        }
        let mut branches = Vec::with_capacity(domains.len());
        let mut in_affine = Vec::new();
        let mut dson_mix = Vec::new();
        for _ in domains {
            branches.push(NormState::new(ids, channels));
            if kind == BankKind::Dson {
                in_affine.push(NormState::new(ids, channels));
                dson_mix.push(Parameter::new(ids.next_id(), Tensor::scalar(0.0)));
            }
        }
        Ok(NormBank {
            kind,
            branches,
            in_affine,
            dson_mix,
            domain_index,
        })
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn domain_index(&self) -> &BTreeMap<String, usize> {
        &self.domain_index
    }

    pub fn contains_domain(&self, domain: &str) -> bool {
        self.domain_index.contains_key(domain)
    }

    /// Domain ids ordered by branch position.
    pub fn domains(&self) -> Vec<String> {
        let mut out = vec![String::new(); self.len()];
        for (d, &i) in &self.domain_index {
            out[i] = d.clone();
        }
        out
    }

    pub(crate) fn set_domain_index(&mut self, domains: &[String]) -> Result<()> {
        if domains.len() != self.len() {
            return Err(Error::Configuration(format!(
                "{} domain ids for a bank of {} branches",
                domains.len(),
                self.len()
            )));
        }
        let mut index = BTreeMap::new();
        for (i, d) in domains.iter().enumerate() {
            if index.insert(d.clone(), i).is_some() {
                return Err(Error::Configuration(format!("duplicate domain id '{d}'")));
            }
        }
        self.domain_index = index;
        Ok(())
    }

    /// Branch for a domain-homogeneous batch, given one domain id per sample.
    pub fn route(&self, domains: &[&str]) -> Result<usize> {
        let first = *domains
            .first()
            .ok_or_else(|| Error::Routing("no domain ids supplied".into()))?;
        if let Some(other) = domains.iter().find(|d| **d != first) {
            return Err(Error::Contract(format!(
                "mixed-domain batch ('{first}' and '{other}'); batches must be domain-homogeneous"
            )));
        }
        self.domain_index
            .get(first)
            .copied()
            .ok_or_else(|| Error::Routing(format!("unknown domain '{first}'")))
    }

    pub fn mix_weight(&self, branch: usize) -> Option<f64> {
        self.dson_mix
            .get(branch)
            .map(|p| sigmoid_value(p.value.item()))
    }

    /// Sets a DSON mixture weight `w` in `[0, 1]` through its logit.
    pub fn set_mix_weight(&mut self, branch: usize, w: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::Parameter(format!("mixture weight {w} outside [0, 1]")));
        }
        let p = self
            .dson_mix
            .get_mut(branch)
            .ok_or_else(|| Error::Configuration(format!("no DSON mixture for branch {branch}")))?;
        let raw = (w / (1.0 - w)).ln().clamp(-MIX_LOGIT_LIMIT, MIX_LOGIT_LIMIT);
        p.value = Tensor::scalar(raw);
        Ok(())
    }

    /// Stored statistics used by the selection strategies.
    pub fn branch_stats(&self) -> Result<Vec<BranchStats>> {
        match self.kind {
            BankKind::Dsin => Err(Error::Configuration(
                "DSIN branches keep no running statistics to select by".into(),
            )),
            _ => Ok(self.branches.iter().map(NormState::branch_stats).collect()),
        }
    }

    /// Normalizes through one branch. Training returns the batch moments of
    /// the batch-norm part, if any.
    pub fn forward_branch(
        &self,
        tape: &mut Tape,
        x: Var,
        branch: usize,
        training: bool,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let state = self.branches.get(branch).ok_or_else(|| {
            Error::Routing(format!("branch {branch} out of range for {} branches", self.len()))
        })?;
        match self.kind {
            BankKind::Dsbn => state.bn_var(tape, x, training),
            BankKind::Dsin => Ok((state.in_var(tape, x)?, None)),
            BankKind::Dson => {
                let (bn, moments) = state.bn_var(tape, x, training)?;
                let inn = self.in_affine[branch].in_var(tape, x)?;
                let raw = tape.param(&self.dson_mix[branch]);
                let w = tape.sigmoid(raw);
                Ok((tape.mix(bn, inn, w)?, moments))
            }
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for i in 0..self.len() {
            out.extend(self.branches[i].params());
            if self.kind == BankKind::Dson {
                out.extend(self.in_affine[i].params());
                out.push(&self.dson_mix[i]);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        let dson = self.kind == BankKind::Dson;
        let mut in_affine = self.in_affine.iter_mut();
        let mut mix = self.dson_mix.iter_mut();
        for b in self.branches.iter_mut() {
            out.extend(b.params_mut());
            if dson {
                if let Some(a) = in_affine.next() {
                    out.extend(a.params_mut());
                }
                if let Some(m) = mix.next() {
                    out.push(m);
                }
            }
        }
        out
    }
}

/// How a normalization layer picks its statistics for one forward pass.
#[derive(Clone, Copy)]
pub enum BranchChoice<'a> {
    /// Domain-invariant layers; banks reject it.
    Shared,
    Fixed(usize),
    /// Pick per layer from the incoming instance statistics (B = 1, eval).
    Select(&'a dyn BranchSelector),
}

/// Output of a [`NormLayer`] forward.
#[derive(Debug)]
pub struct NormOutput {
    pub out: Var,
    /// `(state slot, moments)` pairs to fold into running statistics.
    pub updates: Vec<(usize, BatchMoments)>,
    pub chosen: Option<usize>,
    pub instance_stats: Option<InstanceStats>,
}

/// A normalization layer of any supported kind.
#[derive(Debug, Clone)]
pub enum NormLayer {
    Batch(NormState),
    Instance(NormState),
    InstanceBatch {
        instance: NormState,
        batch: NormState,
    },
    Bank(NormBank),
}

impl NormLayer {
    pub fn new(
        ids: &mut ParamIds,
        kind: NormKind,
        channels: usize,
        domains: &[String],
    ) -> Result<Self> {
        Ok(match kind {
            NormKind::Bn => NormLayer::Batch(NormState::new(ids, channels)),
            NormKind::In => NormLayer::Instance(NormState::new(ids, channels)),
            NormKind::Ibn => {
                if channels < 2 {
                    return Err(Error::Configuration(format!(
                        "IBN needs at least 2 channels, got {channels}"
                    )));
                }
                let half = channels / 2;
                NormLayer::InstanceBatch {
                    instance: NormState::new(ids, half),
                    batch: NormState::new(ids, channels - half),
                }
            }
            NormKind::Dsbn | NormKind::Dsin | NormKind::Dson => {
                let bank_kind = BankKind::from_norm(kind).expect("domain-specific kind");
                NormLayer::Bank(NormBank::new(ids, bank_kind, channels, domains)?)
            }
        })
    }

    pub fn bank(&self) -> Option<&NormBank> {
        match self {
            NormLayer::Bank(b) => Some(b),
            _ => None,
        }
    }

    pub fn bank_mut(&mut self) -> Option<&mut NormBank> {
        match self {
            NormLayer::Bank(b) => Some(b),
            _ => None,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        choice: BranchChoice<'_>,
        training: bool,
        trace: bool,
    ) -> Result<NormOutput> {
        let selecting = matches!(choice, BranchChoice::Select(_));
        let instance_stats = if trace || selecting {
            Some(compute_instance_stats(tape.value(x))?)
        } else {
            None
        };
        let mut updates = Vec::new();
        let mut chosen = None;
        let out = match self {
            NormLayer::Batch(s) => {
                let (y, m) = s.bn_var(tape, x, training)?;
                updates.extend(m.map(|m| (0, m)));
                y
            }
            NormLayer::Instance(s) => s.in_var(tape, x)?,
            NormLayer::InstanceBatch { instance, batch } => {
                let c = tape.value(x).shape()[1];
                let half = instance.channels();
                let xa = tape.slice_channels(x, 0, half)?;
                let xb = tape.slice_channels(x, half, c - half)?;
                let ya = instance.in_var(tape, xa)?;
                let (yb, m) = batch.bn_var(tape, xb, training)?;
                updates.extend(m.map(|m| (0, m)));
                tape.concat_channels(ya, yb)?
            }
            NormLayer::Bank(bank) => {
                let branch = match choice {
                    BranchChoice::Shared => {
                        return Err(Error::Routing(
                            "domain-specific normalization needs a branch or a selector".into(),
                        ))
                    }
                    BranchChoice::Fixed(i) => i,
                    BranchChoice::Select(selector) => {
                        if training {
                            return Err(Error::Contract(
                                "branch selection is an inference-only strategy".into(),
                            ));
                        }
                        let stats = instance_stats.as_ref().expect("computed above");
                        selector.select(stats, &bank.branch_stats()?)?
                    }
                };
                chosen = Some(branch);
                let (y, m) = bank.forward_branch(tape, x, branch, training)?;
                updates.extend(m.map(|m| (branch, m)));
                y
            }
        };
        Ok(NormOutput {
            out,
            updates,
            chosen,
            instance_stats: if trace { instance_stats } else { None },
        })
    }

    /// The state whose running statistics a forward update slot refers to.
    pub fn stats_slot_mut(&mut self, slot: usize) -> Option<&mut NormState> {
        match self {
            NormLayer::Batch(s) if slot == 0 => Some(s),
            NormLayer::InstanceBatch { batch, .. } if slot == 0 => Some(batch),
            NormLayer::Bank(b) => b.branches.get_mut(slot),
            _ => None,
        }
    }

    pub fn apply_updates(&mut self, updates: &[(usize, BatchMoments)]) -> Result<()> {
        for (slot, m) in updates {
            let state = self.stats_slot_mut(*slot).ok_or_else(|| {
                Error::Contract(format!("no running statistics at slot {slot}"))
            })?;
            state.update_running_stats(&m.mean, &m.var)?;
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Parameter> {
        match self {
            NormLayer::Batch(s) | NormLayer::Instance(s) => s.params().to_vec(),
            NormLayer::InstanceBatch { instance, batch } => {
                let mut v = instance.params().to_vec();
                v.extend(batch.params());
                v
            }
            NormLayer::Bank(b) => b.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            NormLayer::Batch(s) | NormLayer::Instance(s) => s.params_mut().into_iter().collect(),
            NormLayer::InstanceBatch { instance, batch } => {
                let mut v: Vec<&mut Parameter> = instance.params_mut().into_iter().collect();
                v.extend(batch.params_mut());
                v
            }
            NormLayer::Bank(b) => b.params_mut(),
        }
    }

    /// Every state carried by the layer, in a fixed order (for checkpoints).
    pub fn states(&self) -> Vec<&NormState> {
        match self {
            NormLayer::Batch(s) | NormLayer::Instance(s) => vec![s],
            NormLayer::InstanceBatch { instance, batch } => vec![instance, batch],
            NormLayer::Bank(b) => b.branches.iter().chain(&b.in_affine).collect(),
        }
    }

    pub fn states_mut(&mut self) -> Vec<&mut NormState> {
        match self {
            NormLayer::Batch(s) | NormLayer::Instance(s) => vec![s],
            NormLayer::InstanceBatch { instance, batch } => vec![instance, batch],
            NormLayer::Bank(b) => b.branches.iter_mut().chain(b.in_affine.iter_mut()).collect(),
        }
    }
}

fn run_on_tape<F>(x: &Tensor, f: F) -> Result<(Tensor, Vec<(usize, BatchMoments)>)>
where
    F: FnOnce(&mut Tape, Var) -> Result<(Var, Vec<(usize, BatchMoments)>)>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (y, updates) = f(&mut tape, xv)?;
    Ok((tape.value(y).clone(), updates))
}

pub fn bn_forward(x: &Tensor, state: &mut NormState, training: bool) -> Result<Tensor> {
    let (y, updates) = run_on_tape(x, |tape, xv| {
        let (y, m) = state.bn_var(tape, xv, training)?;
        Ok((y, m.into_iter().map(|m| (0, m)).collect()))
    })?;
    for (_, m) in updates {
        state.update_running_stats(&m.mean, &m.var)?;
    }
    Ok(y)
}

pub fn in_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(gamma.clone());
    let b = tape.constant(beta.clone());
    let y = tape.instance_norm(xv, g, b, eps)?;
    Ok(tape.value(y).clone())
}

pub fn ibn_forward(
    x: &Tensor,
    in_state: &NormState,
    bn_state: &mut NormState,
    training: bool,
) -> Result<Tensor> {
    x.expect_rank(3, "ibn_forward")?;
    let c = x.shape()[1];
    if c < 2 {
        return Err(Error::Configuration(format!(
            "IBN needs at least 2 channels, got {c}"
        )));
    }
    if in_state.channels() != c / 2 || bn_state.channels() != c - c / 2 {
        return Err(Error::Dimension(format!(
            "IBN states sized {}+{} for {c} channels",
            in_state.channels(),
            bn_state.channels()
        )));
    }
    let mut layer = NormLayer::InstanceBatch {
        instance: in_state.clone(),
        batch: bn_state.clone(),
    };
    let (y, updates) = run_on_tape(x, |tape, xv| {
        let o = layer.forward(tape, xv, BranchChoice::Shared, training, false)?;
        Ok((o.out, o.updates))
    })?;
    layer.apply_updates(&updates)?;
    if let NormLayer::InstanceBatch { batch, .. } = layer {
        *bn_state = batch;
    }
    Ok(y)
}

fn bank_forward(
    x: &Tensor,
    bank: &mut NormBank,
    expected: BankKind,
    domains: &[&str],
    training: bool,
) -> Result<Tensor> {
    if bank.kind != expected {
        return Err(Error::Configuration(format!(
            "expected a {expected:?} bank, got {:?}",
            bank.kind
        )));
    }
    if domains.len() != x.shape().first().copied().unwrap_or(0) {
        return Err(Error::Contract(format!(
            "{} domain ids for a batch of {}",
            domains.len(),
            x.shape().first().copied().unwrap_or(0)
        )));
    }
    let branch = bank.route(domains)?;
    let (y, updates) = run_on_tape(x, |tape, xv| {
        let (y, m) = bank.forward_branch(tape, xv, branch, training)?;
        Ok((y, m.into_iter().map(|m| (branch, m)).collect()))
    })?;
    for (b, m) in updates {
        bank.branches[b].update_running_stats(&m.mean, &m.var)?;
    }
    Ok(y)
}

/// Domain-specific batch norm; `domains` holds one id per sample and must be
/// homogeneous.
pub fn dsbn_forward(x: &Tensor, bank: &mut NormBank, domains: &[&str], training: bool) -> Result<Tensor> {
    bank_forward(x, bank, BankKind::Dsbn, domains, training)
}

pub fn dsin_forward(x: &Tensor, bank: &mut NormBank, domains: &[&str], training: bool) -> Result<Tensor> {
    bank_forward(x, bank, BankKind::Dsin, domains, training)
}

pub fn dson_forward(x: &Tensor, bank: &mut NormBank, domains: &[&str], training: bool) -> Result<Tensor> {
    bank_forward(x, bank, BankKind::Dson, domains, training)
}
